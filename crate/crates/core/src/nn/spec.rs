use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// One layer of a feed-forward network.
///
/// Convolutions are 3x3, stride 1, zero padding 1 (spatial size preserved);
/// `fan_in`/`fan_out` are the input/output channel counts. Average pooling
/// is 2x2 with stride 2; odd trailing rows/columns are dropped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense { fan_in: usize, fan_out: usize },
    #[serde(rename = "conv2d_3x3")]
    Conv3x3 { fan_in: usize, fan_out: usize },
    Relu,
    Flatten,
    #[serde(rename = "avgpool_2x2")]
    AvgPool2x2,
}

impl LayerSpec {
    pub fn has_params(&self) -> bool {
        matches!(self, LayerSpec::Dense { .. } | LayerSpec::Conv3x3 { .. })
    }

    /// `(weight shape, bias shape)` for parameterized layers.
    pub fn param_shapes(&self) -> Option<(Vec<usize>, Vec<usize>)> {
        match *self {
            LayerSpec::Dense { fan_in, fan_out } => Some((vec![fan_out, fan_in], vec![fan_out])),
            LayerSpec::Conv3x3 { fan_in, fan_out } => {
                Some((vec![fan_out, fan_in, 3, 3], vec![fan_out]))
            }
            _ => None,
        }
    }

    pub fn param_count(&self) -> usize {
        match *self {
            LayerSpec::Dense { fan_in, fan_out } => fan_in * fan_out + fan_out,
            LayerSpec::Conv3x3 { fan_in, fan_out } => fan_in * fan_out * 9 + fan_out,
            _ => 0,
        }
    }

    /// Number of inputs feeding one output unit, used for init scaling.
    pub fn receptive_fan_in(&self) -> usize {
        match *self {
            LayerSpec::Dense { fan_in, .. } => fan_in,
            LayerSpec::Conv3x3 { fan_in, .. } => fan_in * 9,
            _ => 0,
        }
    }

    fn describe(&self) -> String {
        match *self {
            LayerSpec::Dense { fan_in, fan_out } => format!("dense {fan_in}->{fan_out}"),
            LayerSpec::Conv3x3 { fan_in, fan_out } => format!("conv3x3 {fan_in}->{fan_out}"),
            LayerSpec::Relu => "relu".into(),
            LayerSpec::Flatten => "flatten".into(),
            LayerSpec::AvgPool2x2 => "avgpool2x2".into(),
        }
    }

    /// Per-example output shape for a per-example input shape.
    fn output_shape(&self, input: &[usize]) -> std::result::Result<Vec<usize>, String> {
        match *self {
            LayerSpec::Dense { fan_in, fan_out } => {
                if fan_in == 0 || fan_out == 0 {
                    return Err("dense fan_in and fan_out must be >= 1".into());
                }
                if input != [fan_in] {
                    return Err(format!("expects input [{fan_in}], got {input:?}"));
                }
                Ok(vec![fan_out])
            }
            LayerSpec::Conv3x3 { fan_in, fan_out } => {
                if fan_in == 0 || fan_out == 0 {
                    return Err("conv fan_in and fan_out must be >= 1".into());
                }
                match input {
                    [c, h, w] if *c == fan_in && *h > 0 && *w > 0 => Ok(vec![fan_out, *h, *w]),
                    _ => Err(format!("expects input [{fan_in}, H, W], got {input:?}")),
                }
            }
            LayerSpec::Relu => Ok(input.to_vec()),
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
            LayerSpec::AvgPool2x2 => match input {
                [c, h, w] if *h >= 2 && *w >= 2 => Ok(vec![*c, h / 2, w / 2]),
                _ => Err(format!("expects input [C, H>=2, W>=2], got {input:?}")),
            },
        }
    }
}

/// Architecture of a classifier: layers, class count and the index of the
/// layer whose output is used as the feature representation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    /// Per-example input shape, e.g. `[1, 28, 28]`.
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
    pub num_classes: usize,
    pub feature_tap: usize,
}

impl NetworkSpec {
    /// `flatten -> (dense -> relu)* -> dense`, feature tap on the last hidden
    /// activation (or the flattened input when there are no hidden layers).
    pub fn mlp(input_shape: &[usize], hidden: &[usize], num_classes: usize) -> Self {
        let mut layers = vec![LayerSpec::Flatten];
        let mut width: usize = input_shape.iter().product();
        for &h in hidden {
            layers.push(LayerSpec::Dense {
                fan_in: width,
                fan_out: h,
            });
            layers.push(LayerSpec::Relu);
            width = h;
        }
        let feature_tap = layers.len() - 1;
        layers.push(LayerSpec::Dense {
            fan_in: width,
            fan_out: num_classes,
        });
        Self {
            input_shape: input_shape.to_vec(),
            layers,
            num_classes,
            feature_tap,
        }
    }

    /// Check shape compatibility and return per-example output shapes of
    /// every layer.
    pub fn validate(&self) -> Result<Vec<Vec<usize>>> {
        if self.layers.is_empty() {
            return Err(Error::InvalidSpec("network has no layers".into()));
        }
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return Err(Error::InvalidSpec(format!(
                "input shape {:?} must be non-empty with positive dimensions",
                self.input_shape
            )));
        }
        if self.feature_tap >= self.layers.len() {
            return Err(Error::InvalidSpec(format!(
                "feature_tap {} out of range for {} layers",
                self.feature_tap,
                self.layers.len()
            )));
        }
        let mut shapes = Vec::with_capacity(self.layers.len());
        let mut current = self.input_shape.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            current = layer.output_shape(&current).map_err(|msg| {
                let prev = if i == 0 {
                    "network input".to_string()
                } else {
                    format!("layer {} ({})", i - 1, self.layers[i - 1].describe())
                };
                Error::InvalidSpec(format!(
                    "{prev} is incompatible with layer {i} ({}): {msg}",
                    layer.describe()
                ))
            })?;
            shapes.push(current.clone());
        }
        if current != [self.num_classes] {
            return Err(Error::InvalidSpec(format!(
                "last layer outputs {current:?}, expected [{}] logits",
                self.num_classes
            )));
        }
        Ok(shapes)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(LayerSpec::param_count).sum()
    }

    /// Per-example feature size at the tap.
    pub fn feature_dim(&self) -> Result<usize> {
        let shapes = self.validate()?;
        Ok(shapes[self.feature_tap].iter().product())
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn digest(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("spec serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}
