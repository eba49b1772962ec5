//! Teacher training with checkpoint capture, and the checkpoint store.
//!
//! Checkpoint files are little-endian:
//!
//! ```text
//! magic      8 bytes  "RCOCKPT\0"
//! version    u32      1
//! dtype      u8       1 = f32, 2 = f64
//! digest     64 bytes hex SHA-256 of the network spec
//! epoch      u32
//! seed       u64
//! lr         f64      learning rate of the epoch that produced it
//! train_loss f64
//! layers     u32      then per layer: u8 flag (0 = no params, 1 = weight
//!                     and bias follow); each tensor is u32 rank, u32 dims,
//!                     then raw scalars
//! checksum   32 bytes SHA-256 of everything above
//! ```
//!
//! A trajectory directory holds one `epoch_NNNN.ckpt` per capture and a
//! `manifest.json` index.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::Dataset;
use crate::error::{CheckpointError, Error, Result};
use crate::fit::{epoch_seed, run_epoch, BatchLoss};
use crate::losses::ce_loss;
use crate::nn::{init_params, LayerParams, NetworkSpec, Params, SgdConfig};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"RCOCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

/// Optimization recipe shared by teacher and student runs. The epoch count
/// is the schedule's `total_epochs`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub sgd: SgdConfig,
    pub batch_size: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn epochs(&self) -> u32 {
        self.sgd.schedule.total_epochs
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be >= 1"));
        }
        self.sgd.validate()
    }
}

/// A teacher parameter snapshot taken after `epoch` completed epochs.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub epoch: u32,
    pub params: Params<T>,
    pub lr_at_capture: f64,
    pub train_loss: f64,
    pub spec_hash: String,
    pub seed: u64,
}

/// Epoch-ascending checkpoints of one teacher run; the last one is the
/// converged teacher.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory<T> {
    pub spec: NetworkSpec,
    pub config: TrainConfig,
    pub checkpoints: Vec<Checkpoint<T>>,
}

impl<T: Scalar> Trajectory<T> {
    pub fn validate(&self) -> Result<()> {
        if self.checkpoints.is_empty() {
            return Err(Error::invalid("trajectory has no checkpoints"));
        }
        if self.checkpoints.windows(2).any(|w| w[0].epoch >= w[1].epoch) {
            return Err(Error::invalid("trajectory epochs must be strictly increasing"));
        }
        let digest = self.spec.digest();
        if let Some(c) = self.checkpoints.iter().find(|c| c.spec_hash != digest) {
            return Err(CheckpointError::SpecDigestMismatch {
                found: c.spec_hash.clone(),
                expected: digest,
            }
            .into());
        }
        Ok(())
    }

    pub fn epochs(&self) -> Vec<u32> {
        self.checkpoints.iter().map(|c| c.epoch).collect()
    }

    pub fn get(&self, epoch: u32) -> Option<&Checkpoint<T>> {
        self.checkpoints
            .binary_search_by_key(&epoch, |c| c.epoch)
            .ok()
            .map(|i| &self.checkpoints[i])
    }

    pub fn index_of(&self, epoch: u32) -> Option<usize> {
        self.checkpoints.binary_search_by_key(&epoch, |c| c.epoch).ok()
    }

    pub fn final_checkpoint(&self) -> &Checkpoint<T> {
        self.checkpoints.last().expect("non-empty trajectory")
    }
}

/// Train a teacher with cross-entropy, capturing a checkpoint after every
/// `capture_every`-th epoch and after the final epoch.
pub fn train_teacher<T: Scalar>(
    spec: &NetworkSpec,
    cfg: &TrainConfig,
    data: &Dataset<T>,
    capture_every: u32,
) -> Result<Trajectory<T>> {
    if capture_every == 0 {
        return Err(Error::invalid("capture_every must be >= 1"));
    }
    cfg.validate()?;
    if data.example_shape() != spec.input_shape.as_slice() {
        return Err(Error::shape("teacher input", &spec.input_shape, data.example_shape()));
    }
    let digest = spec.digest();
    let mut params: Params<T> = init_params(spec, cfg.seed)?;
    let mut velocity = params.zeros_like();
    let epochs = cfg.epochs();
    let mut checkpoints = Vec::new();
    for e in 0..epochs {
        let lr = cfg.sgd.schedule.lr_at(e)?;
        let loss = run_epoch(
            spec,
            &mut params,
            &mut velocity,
            data,
            cfg.batch_size,
            epoch_seed(cfg.seed, e),
            &cfg.sgd,
            lr,
            |batch, trace| {
                let (loss, logit_grad) = ce_loss(trace.logits(), &batch.labels)?;
                Ok(BatchLoss {
                    loss,
                    logit_grad,
                    feature_grad: None,
                })
            },
        )?;
        let done = e + 1;
        if done % capture_every == 0 || done == epochs {
            checkpoints.push(Checkpoint {
                epoch: done,
                params: params.clone(),
                lr_at_capture: lr,
                train_loss: loss,
                spec_hash: digest.clone(),
                seed: cfg.seed,
            });
        }
    }
    Ok(Trajectory {
        spec: spec.clone(),
        config: cfg.clone(),
        checkpoints,
    })
}

// ---------------------------------------------------------------------------
// Checkpoint codec

pub fn encode_checkpoint<T: Scalar>(c: &Checkpoint<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(128 + c.params.num_params() * T::BYTES);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.push(T::DTYPE);
    let mut digest = [b'0'; 64];
    let hash = c.spec_hash.as_bytes();
    digest[..hash.len().min(64)].copy_from_slice(&hash[..hash.len().min(64)]);
    out.extend_from_slice(&digest);
    out.extend_from_slice(&c.epoch.to_le_bytes());
    out.extend_from_slice(&c.seed.to_le_bytes());
    out.extend_from_slice(&c.lr_at_capture.to_le_bytes());
    out.extend_from_slice(&c.train_loss.to_le_bytes());
    out.extend_from_slice(&(c.params.layers.len() as u32).to_le_bytes());
    for layer in &c.params.layers {
        match layer {
            None => out.push(0),
            Some(p) => {
                out.push(1);
                for t in [&p.weight, &p.bias] {
                    out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
                    for &d in t.shape() {
                        out.extend_from_slice(&(d as u32).to_le_bytes());
                    }
                    for &v in t.data() {
                        v.write_le(&mut out);
                    }
                }
            }
        }
    }
    let sum = Sha256::digest(&out);
    out.extend_from_slice(&sum);
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated)?;
        let s = self.bytes.get(self.pos..end).ok_or(CheckpointError::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn tensor<T: Scalar>(&mut self) -> Result<Tensor<T>, CheckpointError> {
        let rank = self.u32()? as usize;
        if rank > 8 {
            return Err(CheckpointError::BadFormat);
        }
        let shape = (0..rank)
            .map(|_| self.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or(CheckpointError::BadFormat)?;
        let raw = self.take(n.checked_mul(T::BYTES).ok_or(CheckpointError::Truncated)?)?;
        let data = raw.chunks_exact(T::BYTES).map(T::read_le).collect();
        Tensor::new(shape, data).map_err(|_| CheckpointError::BadFormat)
    }
}

pub fn decode_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<Checkpoint<T>, CheckpointError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8).map_err(|_| CheckpointError::BadFormat)? != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadFormat);
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::UnsupportedVersion {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let dtype = r.u8()?;
    if dtype != T::DTYPE {
        return Err(CheckpointError::DtypeMismatch {
            found: dtype,
            expected: T::DTYPE,
        });
    }
    let spec_hash = String::from_utf8(r.take(64)?.to_vec()).map_err(|_| CheckpointError::BadFormat)?;
    let epoch = r.u32()?;
    let seed = r.u64()?;
    let lr_at_capture = r.f64()?;
    let train_loss = r.f64()?;
    let n_layers = r.u32()? as usize;
    let mut layers = Vec::with_capacity(n_layers.min(1024));
    for _ in 0..n_layers {
        layers.push(match r.u8()? {
            0 => None,
            1 => Some(LayerParams {
                weight: r.tensor()?,
                bias: r.tensor()?,
            }),
            _ => return Err(CheckpointError::BadFormat),
        });
    }
    let body_end = r.pos;
    let stored = r.take(32)?;
    if r.pos != bytes.len() {
        return Err(CheckpointError::BadFormat);
    }
    if Sha256::digest(&bytes[..body_end]).as_slice() != stored {
        return Err(CheckpointError::ChecksumMismatch);
    }
    Ok(Checkpoint {
        epoch,
        params: Params { layers },
        lr_at_capture,
        train_loss,
        spec_hash,
        seed,
    })
}

/// Write atomically (temporary file, then rename).
pub fn save_checkpoint<T: Scalar>(c: &Checkpoint<T>, path: &Path) -> Result<()> {
    write_atomic(path, &encode_checkpoint(c))
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(decode_checkpoint(&bytes)?)
}

/// Load and refuse checkpoints produced for a different network.
pub fn load_checkpoint_for<T: Scalar>(path: &Path, spec: &NetworkSpec) -> Result<Checkpoint<T>> {
    let c = load_checkpoint(path)?;
    let expected = spec.digest();
    if c.spec_hash != expected {
        return Err(CheckpointError::SpecDigestMismatch {
            found: c.spec_hash,
            expected,
        }
        .into());
    }
    c.params.check_matches(spec)?;
    Ok(c)
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// Trajectory manifest

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub epoch: u32,
    pub file: String,
    pub lr_at_capture: f64,
    pub train_loss: f64,
}

/// JSON index of a trajectory directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryManifest {
    pub format_version: u32,
    pub spec_digest: String,
    pub spec: NetworkSpec,
    pub config: TrainConfig,
    pub checkpoints: Vec<ManifestEntry>,
}

pub fn checkpoint_file_name(epoch: u32) -> String {
    format!("epoch_{epoch:04}.ckpt")
}

pub fn save_trajectory<T: Scalar>(traj: &Trajectory<T>, dir: &Path) -> Result<TrajectoryManifest> {
    traj.validate()?;
    let mut entries = Vec::with_capacity(traj.checkpoints.len());
    for c in &traj.checkpoints {
        let file = checkpoint_file_name(c.epoch);
        save_checkpoint(c, &dir.join(&file))?;
        entries.push(ManifestEntry {
            epoch: c.epoch,
            file,
            lr_at_capture: c.lr_at_capture,
            train_loss: c.train_loss,
        });
    }
    let manifest = TrajectoryManifest {
        format_version: CHECKPOINT_VERSION,
        spec_digest: traj.spec.digest(),
        spec: traj.spec.clone(),
        config: traj.config.clone(),
        checkpoints: entries,
    };
    write_atomic(
        &dir.join(MANIFEST_FILE),
        &serde_json::to_vec_pretty(&manifest)?,
    )?;
    Ok(manifest)
}

pub fn load_manifest(dir: &Path) -> Result<TrajectoryManifest> {
    let path = dir.join(MANIFEST_FILE);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

pub fn load_trajectory<T: Scalar>(dir: &Path) -> Result<Trajectory<T>> {
    let manifest = load_manifest(dir)?;
    if manifest.spec.digest() != manifest.spec_digest {
        return Err(CheckpointError::SpecDigestMismatch {
            found: manifest.spec_digest,
            expected: manifest.spec.digest(),
        }
        .into());
    }
    let checkpoints = manifest
        .checkpoints
        .iter()
        .map(|e| {
            let c = load_checkpoint_for(&dir.join(&e.file), &manifest.spec)?;
            if c.epoch != e.epoch {
                return Err(Error::invalid(format!(
                    "{} holds epoch {}, manifest says {}",
                    e.file, c.epoch, e.epoch
                )));
            }
            Ok(c)
        })
        .collect::<Result<Vec<_>>>()?;
    let traj = Trajectory {
        spec: manifest.spec,
        config: manifest.config,
        checkpoints,
    };
    traj.validate()?;
    Ok(traj)
}
