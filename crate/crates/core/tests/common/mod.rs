//! Shared helpers for the integration tests: synthetic data, random
//! networks, a finite-difference gradient checker and reference oracles.
#![allow(dead_code)]

use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rco_core::data::{idx, Dataset};
use rco_core::nn::{forward_trace, init_params, LayerSpec, NetworkSpec, Params};
use rco_core::{Scalar, Tensor};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `n` images of shape `shape` with values in `[0, 1)` and labels drawn
/// uniformly from `classes`. Each class shifts a different pixel block so
/// small networks can learn the task.
pub fn synthetic_dataset<T: Scalar>(n: usize, shape: &[usize], classes: usize, seed: u64) -> Dataset<T> {
    let mut r = rng(seed);
    let per: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n * per);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let label = r.random_range(0..classes);
        for p in 0..per {
            let base: f64 = r.random_range(0.0..0.5);
            let bump = if p % classes == label { 0.5 } else { 0.0 };
            data.push(T::from_f64(base + bump).unwrap());
        }
        labels.push(label);
    }
    let mut full = vec![n];
    full.extend_from_slice(shape);
    Dataset::new(Tensor::new(full, data).unwrap(), labels, classes).unwrap()
}

/// A random small network mixing dense, convolution, pooling and ReLU
/// layers, with a random feature tap.
pub fn random_network(r: &mut impl Rng) -> NetworkSpec {
    let classes = r.random_range(2..=4);
    if r.random_bool(0.5) {
        let input = vec![1, r.random_range(2..=3), r.random_range(2..=3)];
        let depth = r.random_range(1..=2);
        let hidden: Vec<usize> = (0..depth).map(|_| r.random_range(3..=6)).collect();
        let mut spec = NetworkSpec::mlp(&input, &hidden, classes);
        let candidates: Vec<usize> = (0..spec.layers.len() - 1).collect();
        spec.feature_tap = candidates[r.random_range(0..candidates.len())];
        spec
    } else {
        let c = r.random_range(1..=2);
        let (h, w) = (r.random_range(3..=5), r.random_range(3..=5));
        let k = r.random_range(1..=3);
        let mut layers = vec![LayerSpec::Conv3x3 { fan_in: c, fan_out: k }, LayerSpec::Relu];
        let (mut hh, mut ww) = (h, w);
        if r.random_bool(0.5) {
            layers.push(LayerSpec::AvgPool2x2);
            hh /= 2;
            ww /= 2;
        }
        layers.push(LayerSpec::Flatten);
        let mut width = k * hh * ww;
        if r.random_bool(0.5) {
            let hidden = r.random_range(3..=5);
            layers.push(LayerSpec::Dense { fan_in: width, fan_out: hidden });
            layers.push(LayerSpec::Relu);
            width = hidden;
        }
        layers.push(LayerSpec::Dense { fan_in: width, fan_out: classes });
        let feature_tap = r.random_range(0..layers.len() - 1);
        NetworkSpec {
            input_shape: vec![c, h, w],
            layers,
            num_classes: classes,
            feature_tap,
        }
    }
}

/// Random batch of inputs for `spec`, values in `[-1, 1)`.
pub fn random_batch<T: Scalar>(spec: &NetworkSpec, batch: usize, r: &mut impl Rng) -> Tensor<T> {
    let mut shape = vec![batch];
    shape.extend_from_slice(&spec.input_shape);
    Tensor::from_fn(&shape, |_| T::from_f64(r.random_range(-1.0..1.0)).unwrap())
}

/// Parameters with every value drawn from `[-scale, scale)`.
pub fn random_params<T: Scalar>(spec: &NetworkSpec, scale: f64, r: &mut impl Rng) -> Params<T> {
    let mut p: Params<T> = init_params(spec, r.random()).unwrap();
    for t in p.tensors_mut() {
        for v in t.data_mut() {
            *v = T::from_f64(r.random_range(-scale..scale)).unwrap();
        }
    }
    p
}

/// ReLU activation pattern of a forward pass, used to detect kinks.
pub fn relu_mask<T: Scalar>(spec: &NetworkSpec, params: &Params<T>, x: &Tensor<T>) -> Vec<bool> {
    let trace = forward_trace(spec, params, x).unwrap();
    let acts = trace.activations();
    let mut mask = Vec::new();
    for (k, layer) in spec.layers.iter().enumerate() {
        if *layer == LayerSpec::Relu {
            mask.extend(acts[k].data().iter().map(|v| *v > T::zero()));
        }
    }
    mask
}

/// Outcome of comparing analytic and central-difference gradients.
#[derive(Debug, Default)]
pub struct GradCheck {
    pub checked: usize,
    pub skipped_kinks: usize,
    pub worst_rel: f64,
}

/// Relative error with a floor on the denominator so that coordinates where
/// both gradients vanish compare absolutely.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Compare `analytic` against central differences of `loss` on up to
/// `samples` randomly chosen coordinates (all of them when there are
/// fewer). Coordinates whose perturbation flips a ReLU are skipped.
pub fn check_gradient(
    spec: &NetworkSpec,
    params: &Params<f64>,
    x: &Tensor<f64>,
    analytic: &Params<f64>,
    loss: &dyn Fn(&Params<f64>) -> f64,
    samples: usize,
    r: &mut impl Rng,
) -> GradCheck {
    let n = params.num_params();
    let flat_grad = analytic.flatten();
    let coords: Vec<usize> = if n <= samples {
        (0..n).collect()
    } else {
        (0..samples).map(|_| r.random_range(0..n)).collect()
    };
    let h = 1e-5;
    let mut out = GradCheck::default();
    for i in coords {
        let w = params.get_flat(i).unwrap();
        let mut plus = params.clone();
        plus.set_flat(i, w + h);
        let mut minus = params.clone();
        minus.set_flat(i, w - h);
        if relu_mask(spec, &plus, x) != relu_mask(spec, &minus, x) {
            out.skipped_kinks += 1;
            continue;
        }
        let numeric = (loss(&plus) - loss(&minus)) / (2.0 * h);
        let e = rel_error(flat_grad[i], numeric);
        out.worst_rel = out.worst_rel.max(e);
        out.checked += 1;
    }
    out
}

/// Greedy search exactly as written in the reference pseudocode, using
/// 1-based anchor numbers: from anchor `i` of `n`, scan `j = i+1 .. n-1`,
/// return `j - 1` at the first ratio above `delta`, otherwise `n`.
/// `h[k - 1]` is the hardness of anchor `k`.
pub fn brute_force_gs(h: &[f64], i: usize, delta: f64) -> usize {
    let n = h.len();
    let hi = h[i - 1];
    let mut j = i + 1;
    while j < n {
        let hj = h[j - 1];
        let r = if hi == 0.0 {
            if hj == 0.0 { 0.0 } else { f64::INFINITY }
        } else {
            (hj - hi) / hi
        };
        if r > delta {
            return j - 1;
        }
        j += 1;
    }
    n
}

/// Location of the MNIST IDX files: `RCO_MNIST_DIR`, or `data/mnist` at the
/// workspace root.
pub fn mnist_dir() -> PathBuf {
    std::env::var_os("RCO_MNIST_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"))
}

pub fn mnist_available() -> bool {
    let d = mnist_dir();
    [
        "train-images-idx3-ubyte",
        "train-labels-idx1-ubyte",
        "t10k-images-idx3-ubyte",
        "t10k-labels-idx1-ubyte",
    ]
    .iter()
    .all(|f| d.join(f).is_file())
}

/// Write a small synthetic IDX train/test pair into `dir`.
pub fn write_synthetic_idx(dir: &std::path::Path, n_train: usize, n_test: usize, seed: u64) {
    std::fs::create_dir_all(dir).unwrap();
    let mut r = rng(seed);
    let mut make = |n: usize| {
        let mut pixels = Vec::with_capacity(n * 36);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let label: u8 = r.random_range(0..3);
            for p in 0..36usize {
                let base: u8 = r.random_range(0..100);
                pixels.push(if p % 3 == label as usize { base + 150 } else { base });
            }
            labels.push(label);
        }
        (idx::encode_images(&pixels, n, 6, 6), idx::encode_labels(&labels))
    };
    let (ti, tl) = make(n_train);
    let (si, sl) = make(n_test);
    std::fs::write(dir.join("train-images"), ti).unwrap();
    std::fs::write(dir.join("train-labels"), tl).unwrap();
    std::fs::write(dir.join("test-images"), si).unwrap();
    std::fs::write(dir.join("test-labels"), sl).unwrap();
}

/// Losses covered by the gradient suite.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossUnderTest {
    CrossEntropy,
    Kd,
    Rco,
    Mimic,
}

pub const ALL_LOSSES: [LossUnderTest; 4] = [
    LossUnderTest::CrossEntropy,
    LossUnderTest::Kd,
    LossUnderTest::Rco,
    LossUnderTest::Mimic,
];

/// Check analytic gradients of every loss on `networks` random networks.
/// Returns the worst relative error per loss and the number of coordinates
/// checked.
pub fn gradient_suite(networks: usize, seed: u64) -> Vec<(LossUnderTest, GradCheck)> {
    use rco_core::losses::{ce_loss, kd_loss, mimic_loss, rco_step_loss, DistillConfig};
    use rco_core::nn::{backward, backward_with_features, forward};

    let mut r = rng(seed);
    let mut results: Vec<(LossUnderTest, GradCheck)> =
        ALL_LOSSES.iter().map(|&l| (l, GradCheck::default())).collect();
    for _ in 0..networks {
        let spec = random_network(&mut r);
        let batch = r.random_range(1..=4);
        let x: Tensor<f64> = random_batch(&spec, batch, &mut r);
        let params: Params<f64> = random_params(&spec, 0.8, &mut r);
        let labels: Vec<usize> = (0..batch).map(|_| r.random_range(0..spec.num_classes)).collect();
        let zt = Tensor::from_fn(&[batch, spec.num_classes], |_| r.random_range(-3.0..3.0));
        let anchor = Tensor::from_fn(&[batch, spec.num_classes], |_| r.random_range(-3.0..3.0));
        let cfg = DistillConfig {
            temperature: r.random_range(1.0..8.0),
            lambda: r.random_range(0.1..2.0),
            kl_grad_scale: r.random_bool(0.5),
        };
        let (_, feats) = forward(&spec, &params, &x).unwrap();
        let ft = Tensor::from_fn(feats.shape(), |_| r.random_range(-1.0..1.0));

        for (kind, acc) in results.iter_mut() {
            let loss = |p: &Params<f64>| -> f64 {
                let (z, f) = forward(&spec, p, &x).unwrap();
                match kind {
                    LossUnderTest::CrossEntropy => ce_loss(&z, &labels).unwrap().0,
                    LossUnderTest::Kd => kd_loss(&z, &zt, &labels, &cfg).unwrap().0,
                    LossUnderTest::Rco => rco_step_loss(&z, &anchor, &labels, &cfg).unwrap().0,
                    LossUnderTest::Mimic => mimic_loss(&f, &ft).unwrap().0,
                }
            };
            let (z, f) = forward(&spec, &params, &x).unwrap();
            let analytic = match kind {
                LossUnderTest::CrossEntropy => {
                    backward(&spec, &params, &x, &ce_loss(&z, &labels).unwrap().1).unwrap()
                }
                LossUnderTest::Kd => {
                    backward(&spec, &params, &x, &kd_loss(&z, &zt, &labels, &cfg).unwrap().1).unwrap()
                }
                LossUnderTest::Rco => backward(
                    &spec,
                    &params,
                    &x,
                    &rco_step_loss(&z, &anchor, &labels, &cfg).unwrap().1,
                )
                .unwrap(),
                LossUnderTest::Mimic => {
                    let g = mimic_loss(&f, &ft).unwrap().1;
                    let zero = Tensor::zeros(z.shape());
                    backward_with_features(&spec, &params, &x, &zero, &g).unwrap()
                }
            };
            let c = check_gradient(&spec, &params, &x, &analytic, &loss, 40, &mut r);
            acc.checked += c.checked;
            acc.skipped_kinks += c.skipped_kinks;
            acc.worst_rel = acc.worst_rel.max(c.worst_rel);
        }
    }
    results
}

/// Small end-to-end experiment over synthetic IDX files written into `dir`:
/// 15 teacher epochs captured every epoch, a 15 epoch student budget and one
/// arm per strategy.
pub fn synthetic_experiment(dir: &std::path::Path) -> rco_core::pipeline::ExperimentConfig {
    use rco_core::losses::DistillConfig;
    use rco_core::nn::{LrSchedule, SgdConfig};
    use rco_core::pipeline::*;
    use rco_core::trainer::LossKind;
    use rco_core::trajectory::TrainConfig;

    let data = dir.join("data");
    write_synthetic_idx(&data, 160, 60, 11);
    let train = |lr: f64, seed: u64| TrainConfig {
        sgd: SgdConfig {
            momentum: 0.9,
            weight_decay: 5e-4,
            schedule: LrSchedule {
                initial_lr: lr,
                drop_epochs: vec![10],
                drop_factor: 0.1,
                total_epochs: 15,
            },
        },
        batch_size: 16,
        seed,
    };
    let arm = |name: &str, strategy| ArmConfig {
        name: name.into(),
        strategy,
    };
    ExperimentConfig {
        dataset: DatasetConfig {
            name: "synthetic".into(),
            source: DataSource::Idx {
                train_images: data.join("train-images"),
                train_labels: data.join("train-labels"),
                test_images: data.join("test-images"),
                test_labels: data.join("test-labels"),
            },
            normalize: true,
            train_limit: None,
            test_limit: None,
            val_size: 40,
            split_seed: 3,
        },
        teacher: TeacherConfig {
            spec: NetworkSpec::mlp(&[1, 6, 6], &[24], 3),
            train: train(0.05, 1),
            capture_every: 1,
        },
        student: StudentConfig {
            spec: NetworkSpec::mlp(&[1, 6, 6], &[4], 3),
            train: train(0.05, 0),
            loss_kind: LossKind::Kd,
            hint_weight: 1.0,
            adapter: false,
            restart_lr: true,
        },
        distill: DistillConfig::default(),
        arms: vec![
            arm("softmax", StrategyConfig::Softmax),
            arm("kd", StrategyConfig::Kd { anchor_epoch: None }),
            arm("eei", StrategyConfig::Eei { gap: 5 }),
            arm(
                "one_stage",
                StrategyConfig::OneStageEei {
                    gap: 5,
                    switch_epochs: None,
                },
            ),
            arm(
                "gs",
                StrategyConfig::Gs {
                    delta: 0.8,
                    stage_epochs: Some(5),
                },
            ),
        ],
        seeds: vec![0, 1],
        analysis: AnalysisConfig {
            kl_curve: true,
            pca: true,
            noise: Some(NoiseConfig {
                arm_a: "one_stage".into(),
                arm_b: "kd".into(),
                deltas: rco_core::analysis::default_deltas(),
                seed: 0,
                limit: None,
            }),
        },
        output_dir: None,
    }
}

/// Every regular file below `root` with its contents, keyed by relative path.
pub fn snapshot_tree(root: &std::path::Path) -> std::collections::BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &std::path::Path, dir: &std::path::Path, out: &mut std::collections::BTreeMap<PathBuf, Vec<u8>>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&path).unwrap());
            }
        }
    }
    let mut out = std::collections::BTreeMap::new();
    walk(root, root, &mut out);
    out
}

/// Parameters of a single dense layer holding `values` (weights then bias).
pub fn as_params(values: &[f64]) -> Params<f64> {
    use rco_core::nn::LayerParams;
    let n = values.len();
    Params {
        layers: vec![Some(LayerParams {
            weight: Tensor::new(vec![1, n - 1], values[..n - 1].to_vec()).unwrap(),
            bias: Tensor::new(vec![1], vec![values[n - 1]]).unwrap(),
        })],
    }
}

/// Coordinates from a full singular value decomposition of the difference
/// matrix: `U * S` restricted to the top two singular values.
pub fn svd_oracle(points: &[Vec<f64>]) -> (Vec<[f64; 2]>, [f64; 2]) {
    let last = points.last().unwrap();
    let rows = points.len() - 1;
    let dim = last.len();
    let d = nalgebra::DMatrix::from_fn(rows, dim, |i, j| points[i][j] - last[j]);
    let svd = d.clone().svd(true, true);
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let vt = svd.v_t.unwrap();
    let total: f64 = svd.singular_values.iter().map(|s| s * s).sum();
    let mut coords = vec![[0.0; 2]; points.len()];
    let mut explained = [0.0; 2];
    for (slot, &k) in order.iter().take(2).enumerate() {
        explained[slot] = svd.singular_values[k].powi(2) / total;
        for (i, p) in points.iter().enumerate() {
            coords[i][slot] = (0..dim).map(|j| (p[j] - last[j]) * vt[(k, j)]).sum();
        }
    }
    (coords, explained)
}

/// MNIST with 10,000 training images held out for validation.
pub struct Mnist {
    pub train: Dataset<f32>,
    pub val: Dataset<f32>,
    pub test: Dataset<f32>,
}

pub fn load_mnist() -> Result<Mnist, String> {
    use rco_core::data::{load_idx, split_validation};
    let d = mnist_dir();
    if !mnist_available() {
        return Err(format!(
            "MNIST IDX files not found in {}; run scripts/fetch_mnist.sh or set RCO_MNIST_DIR",
            d.display()
        ));
    }
    let full = load_idx(&d.join("train-images-idx3-ubyte"), &d.join("train-labels-idx1-ubyte"))
        .map_err(|e| e.to_string())?;
    let test = load_idx(&d.join("t10k-images-idx3-ubyte"), &d.join("t10k-labels-idx1-ubyte"))
        .map_err(|e| e.to_string())?;
    let split = split_validation(&full, 10_000, 7).map_err(|e| e.to_string())?;
    Ok(Mnist {
        train: split.train,
        val: split.val,
        test,
    })
}

pub const MNIST_EPOCHS: u32 = 15;
pub const MNIST_TAU: f64 = 5.0;

pub fn mnist_teacher_spec() -> NetworkSpec {
    NetworkSpec::mlp(&[1, 28, 28], &[256], 10)
}

pub fn mnist_student_spec() -> NetworkSpec {
    NetworkSpec::mlp(&[1, 28, 28], &[32], 10)
}

fn mnist_recipe(weight_decay: f64, drop_epochs: Vec<u32>, seed: u64) -> rco_core::trajectory::TrainConfig {
    use rco_core::nn::{LrSchedule, SgdConfig};
    rco_core::trajectory::TrainConfig {
        sgd: SgdConfig {
            momentum: 0.9,
            weight_decay,
            schedule: LrSchedule {
                initial_lr: 0.05,
                drop_epochs,
                drop_factor: 0.1,
                total_epochs: MNIST_EPOCHS,
            },
        },
        batch_size: 128,
        seed,
    }
}

/// Teacher recipe: learning rate drops after epochs 9 and 12, no weight
/// decay, every epoch captured.
pub fn mnist_teacher_recipe() -> rco_core::trajectory::TrainConfig {
    mnist_recipe(0.0, vec![9, 12], 1)
}

pub fn mnist_student_recipe(seed: u64) -> rco_core::trajectory::TrainConfig {
    mnist_recipe(5e-4, vec![9, 12], seed)
}

pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}
