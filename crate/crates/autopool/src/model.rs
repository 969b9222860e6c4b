//! Differentiable instance predictor: a linear or one-hidden-layer model
//! mapping per-instance features to per-class probabilities via a sigmoid
//! output, with exact backpropagation and a self-describing checkpoint format.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pooling::InstanceLikelihoods;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Architecture {
    Linear,
    Mlp { hidden: usize },
}

/// One dense layer: `weight` is out×in, `bias` is out.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub architecture: Architecture,
    pub input_dim: usize,
    pub num_classes: usize,
    pub layers: Vec<Layer>,
}

/// Per-layer gradients, same shapes as the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub layers: Vec<Layer>,
}

/// Intermediate activations of one forward pass, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    input: Array2<f64>,
    hidden_pre: Option<Array2<f64>>,
    hidden: Option<Array2<f64>>,
    probs: Array2<f64>,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Fan-in-scaled zero-mean initialization; biases start at zero.
pub fn init_params(
    architecture: Architecture,
    input_dim: usize,
    num_classes: usize,
    seed: u64,
) -> Result<ModelParams> {
    if input_dim < 1 || num_classes < 1 {
        return Err(Error::InvalidInput(format!(
            "model needs input_dim >= 1 and num_classes >= 1, got {input_dim} and {num_classes}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layer = |rows: usize, cols: usize| -> Layer {
        let scale = 1.0 / (cols as f64).sqrt();
        let dist = Normal::new(0.0, scale).expect("positive std");
        let mut weight = Array2::zeros((rows, cols));
        for w in weight.iter_mut() {
            *w = dist.sample(&mut rng);
        }
        Layer {
            weight,
            bias: Array1::zeros(rows),
        }
    };
    let layers = match architecture {
        Architecture::Linear => vec![layer(num_classes, input_dim)],
        Architecture::Mlp { hidden } => {
            if hidden < 1 {
                return Err(Error::InvalidParameter(
                    "hidden width must be at least 1".to_string(),
                ));
            }
            vec![layer(hidden, input_dim), layer(num_classes, hidden)]
        }
    };
    Ok(ModelParams {
        architecture,
        input_dim,
        num_classes,
        layers,
    })
}

/// Forward pass over one bag of m instances (features: m×d).
///
/// Hidden layers (if any) use rectified-linear activation; the output layer
/// applies a sigmoid per class, so every output lies in (0, 1).
pub fn model_forward(
    params: &ModelParams,
    features: &Array2<f64>,
) -> Result<(InstanceLikelihoods, ForwardCache)> {
    if features.ncols() != params.input_dim {
        return Err(Error::InvalidInput(format!(
            "features have {} columns, model expects {}",
            features.ncols(),
            params.input_dim
        )));
    }
    if features.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite feature entry".to_string()));
    }
    let (hidden_pre, hidden, logits) = match params.architecture {
        Architecture::Linear => {
            let l = &params.layers[0];
            let z = features.dot(&l.weight.t()) + &l.bias;
            (None, None, z)
        }
        Architecture::Mlp { .. } => {
            let l0 = &params.layers[0];
            let l1 = &params.layers[1];
            let pre = features.dot(&l0.weight.t()) + &l0.bias;
            let act = pre.mapv(|v| v.max(0.0));
            let z = act.dot(&l1.weight.t()) + &l1.bias;
            (Some(pre), Some(act), z)
        }
    };
    let probs = logits.mapv(sigmoid);
    let cache = ForwardCache {
        input: features.clone(),
        hidden_pre,
        hidden,
        probs: probs.clone(),
    };
    Ok((InstanceLikelihoods::new(probs)?, cache))
}

/// Exact parameter gradients given `upstream = dL/d(output probabilities)`.
pub fn model_backward(
    params: &ModelParams,
    cache: &ForwardCache,
    upstream: &Array2<f64>,
) -> Result<ParamGrads> {
    if upstream.dim() != cache.probs.dim() {
        return Err(Error::InvalidInput(format!(
            "upstream shape {:?} does not match output shape {:?}",
            upstream.dim(),
            cache.probs.dim()
        )));
    }
    // d sigmoid(z) / dz = p (1 - p)
    let dz = upstream * &cache.probs.mapv(|p| p * (1.0 - p));
    let layers = match params.architecture {
        Architecture::Linear => {
            vec![Layer {
                weight: dz.t().dot(&cache.input),
                bias: dz.sum_axis(Axis(0)),
            }]
        }
        Architecture::Mlp { .. } => {
            let hidden = cache.hidden.as_ref().expect("mlp cache has hidden");
            let hidden_pre = cache.hidden_pre.as_ref().expect("mlp cache has hidden_pre");
            let l1 = &params.layers[1];
            let grad1 = Layer {
                weight: dz.t().dot(hidden),
                bias: dz.sum_axis(Axis(0)),
            };
            let dh = dz.dot(&l1.weight);
            let dpre = &dh * &hidden_pre.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
            let grad0 = Layer {
                weight: dpre.t().dot(&cache.input),
                bias: dpre.sum_axis(Axis(0)),
            };
            vec![grad0, grad1]
        }
    };
    Ok(ParamGrads { layers })
}

impl ModelParams {
    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    /// Read one parameter by flat index (layer order, weights then bias,
    /// row-major). Used by finite-difference checks.
    pub fn param(&self, mut index: usize) -> f64 {
        for l in &self.layers {
            if index < l.weight.len() {
                return *l.weight.iter().nth(index).expect("in range");
            }
            index -= l.weight.len();
            if index < l.bias.len() {
                return l.bias[index];
            }
            index -= l.bias.len();
        }
        panic!("parameter index out of range");
    }

    /// Write one parameter by flat index; same ordering as [`Self::param`].
    pub fn set_param(&mut self, mut index: usize, value: f64) {
        for l in &mut self.layers {
            if index < l.weight.len() {
                *l.weight.iter_mut().nth(index).expect("in range") = value;
                return;
            }
            index -= l.weight.len();
            if index < l.bias.len() {
                l.bias[index] = value;
                return;
            }
            index -= l.bias.len();
        }
        panic!("parameter index out of range");
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorDoc {
    name: String,
    shape: Vec<usize>,
    values: Vec<f64>,
}

/// On-disk checkpoint: a self-describing JSON document listing every tensor
/// with its shape and row-major values, plus optional operator metadata.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointDoc {
    format: String,
    architecture: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    hidden: Option<usize>,
    input_dim: usize,
    num_classes: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    operator: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    alpha: Option<Vec<f64>>,
    tensors: Vec<TensorDoc>,
}

const CHECKPOINT_FORMAT: &str = "autopool-checkpoint-v1";

/// Extra run metadata stored alongside the parameters.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CheckpointMeta {
    pub operator: Option<String>,
    pub alpha: Option<Vec<f64>>,
}

pub fn save_checkpoint(params: &ModelParams, meta: &CheckpointMeta, path: &Path) -> Result<()> {
    let (arch_name, hidden) = match params.architecture {
        Architecture::Linear => ("linear".to_string(), None),
        Architecture::Mlp { hidden } => ("mlp".to_string(), Some(hidden)),
    };
    let mut tensors = Vec::new();
    for (i, l) in params.layers.iter().enumerate() {
        tensors.push(TensorDoc {
            name: format!("layer{i}.weight"),
            shape: vec![l.weight.nrows(), l.weight.ncols()],
            values: l.weight.iter().copied().collect(),
        });
        tensors.push(TensorDoc {
            name: format!("layer{i}.bias"),
            shape: vec![l.bias.len()],
            values: l.bias.to_vec(),
        });
    }
    let doc = CheckpointDoc {
        format: CHECKPOINT_FORMAT.to_string(),
        architecture: arch_name,
        hidden,
        input_dim: params.input_dim,
        num_classes: params.num_classes,
        operator: meta.operator.clone(),
        alpha: meta.alpha.clone(),
        tensors,
    };
    let mut text = serde_json::to_string_pretty(&doc)
        .map_err(|e| Error::Format {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelParams, CheckpointMeta)> {
    let text = fs::read_to_string(path)?;
    let doc: CheckpointDoc = serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    let format_err = |message: String| Error::Format {
        path: path.display().to_string(),
        message,
    };
    if doc.format != CHECKPOINT_FORMAT {
        return Err(format_err(format!("unknown format tag {}", doc.format)));
    }
    let architecture = match (doc.architecture.as_str(), doc.hidden) {
        ("linear", _) => Architecture::Linear,
        ("mlp", Some(hidden)) => Architecture::Mlp { hidden },
        ("mlp", None) => return Err(format_err("mlp checkpoint lacks hidden width".into())),
        (other, _) => return Err(format_err(format!("unknown architecture {other}"))),
    };
    let mut layers = Vec::new();
    let mut tensors = doc.tensors.into_iter();
    while let Some(w) = tensors.next() {
        let b = tensors
            .next()
            .ok_or_else(|| format_err(format!("tensor {} has no matching bias", w.name)))?;
        if w.shape.len() != 2 || b.shape.len() != 1 {
            return Err(format_err(format!(
                "expected matrix+vector pair, got shapes {:?} and {:?}",
                w.shape, b.shape
            )));
        }
        if w.values.len() != w.shape[0] * w.shape[1] || b.values.len() != b.shape[0] {
            return Err(format_err("tensor length does not match its shape".into()));
        }
        if w.shape[0] != b.shape[0] {
            return Err(format_err("weight rows and bias length differ".into()));
        }
        layers.push(Layer {
            weight: Array2::from_shape_vec((w.shape[0], w.shape[1]), w.values)
                .expect("length checked"),
            bias: Array1::from_vec(b.values),
        });
    }
    let params = ModelParams {
        architecture,
        input_dim: doc.input_dim,
        num_classes: doc.num_classes,
        layers,
    };
    let expected_layers = match architecture {
        Architecture::Linear => 1,
        Architecture::Mlp { .. } => 2,
    };
    if params.layers.len() != expected_layers {
        return Err(format_err(format!(
            "expected {expected_layers} layers, found {}",
            params.layers.len()
        )));
    }
    if params.layers.last().expect("nonempty").weight.nrows() != params.num_classes {
        return Err(format_err("output layer width differs from num_classes".into()));
    }
    Ok((
        params,
        CheckpointMeta {
            operator: doc.operator,
            alpha: doc.alpha,
        },
    ))
}
