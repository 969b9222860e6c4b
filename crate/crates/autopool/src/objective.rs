//! Training objectives and the joint θ/α optimization loop: bag-level and
//! instance-level binary cross-entropy, gradient assembly through the pooling
//! operator into the instance model, a shared Adam update for θ and α, weight
//! capping by projection, early stopping, and learning-rate reduction.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::evaluation::{static_metrics, static_prediction, threshold_predictions};
use crate::model::{
    init_params, model_backward, model_forward, Architecture, Layer, ModelParams, ParamGrads,
};
use crate::pooling::{project_alpha, rap_penalty, InstanceLikelihoods, PoolingOperator};
use crate::synthdata::Bag;

/// Probabilities are clipped to [ε, 1−ε] inside the cross-entropy.
pub const PROB_CLIP: f64 = 1e-7;

/// Training mode selector: one of the pooling operators, or strong
/// (instance-level) supervision that bypasses pooling entirely.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Operator {
    Max,
    Mean,
    Softmax,
    Auto,
    Cap,
    Rap { lambda: f64 },
    Strong,
}

impl Operator {
    /// λ for the quadratically penalized variant, if this is one.
    pub fn lambda(&self) -> Option<f64> {
        match self {
            Operator::Rap { lambda } => Some(*lambda),
            _ => None,
        }
    }

    pub fn is_strong(&self) -> bool {
        matches!(self, Operator::Strong)
    }

    /// Build the pooling side of this mode. `None` for strong training.
    pub fn build_pooling(
        &self,
        num_classes: usize,
        alpha_init: f64,
        bag_size: usize,
    ) -> Result<Option<PoolingOperator>> {
        Ok(Some(match self {
            Operator::Max => PoolingOperator::max(num_classes),
            Operator::Mean => PoolingOperator::mean(num_classes),
            Operator::Softmax => PoolingOperator::softmax(num_classes),
            Operator::Auto => PoolingOperator::auto(num_classes, alpha_init),
            Operator::Cap => PoolingOperator::cap(num_classes, alpha_init, bag_size)?,
            Operator::Rap { lambda } => PoolingOperator::rap(num_classes, alpha_init, *lambda)?,
            Operator::Strong => return Ok(None),
        }))
    }
}

impl FromStr for Operator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max" => Ok(Operator::Max),
            "mean" => Ok(Operator::Mean),
            "softmax" => Ok(Operator::Softmax),
            "auto" => Ok(Operator::Auto),
            "cap" => Ok(Operator::Cap),
            "strong" => Ok(Operator::Strong),
            other => {
                if let Some(rest) = other.strip_prefix("rap:") {
                    let lambda: f64 = rest.parse().map_err(|_| {
                        Error::InvalidParameter(format!("cannot parse penalty coefficient {rest}"))
                    })?;
                    if !(lambda >= 0.0) {
                        return Err(Error::InvalidParameter(format!(
                            "penalty coefficient must be nonnegative, got {lambda}"
                        )));
                    }
                    Ok(Operator::Rap { lambda })
                } else {
                    Err(Error::InvalidParameter(format!(
                        "unknown operator {other}; expected max|mean|softmax|auto|cap|rap:<lambda>|strong"
                    )))
                }
            }
        }
    }
}

impl fmt::Display for Operator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Operator::Max => write!(f, "max"),
            Operator::Mean => write!(f, "mean"),
            Operator::Softmax => write!(f, "softmax"),
            Operator::Auto => write!(f, "auto"),
            Operator::Cap => write!(f, "cap"),
            Operator::Rap { lambda } => write!(f, "rap:{lambda}"),
            Operator::Strong => write!(f, "strong"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub operator: Operator,
    pub architecture: Architecture,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Stop when validation has not improved for this many epochs.
    pub early_stop_patience: usize,
    /// Multiply the learning rate by `lr_reduce_factor` after this many
    /// epochs without improvement.
    pub lr_reduce_patience: usize,
    pub lr_reduce_factor: f64,
    pub alpha_init: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            operator: Operator::Auto,
            architecture: Architecture::Linear,
            learning_rate: 0.01,
            batch_size: 16,
            max_epochs: 150,
            early_stop_patience: 30,
            lr_reduce_patience: 10,
            lr_reduce_factor: 0.5,
            alpha_init: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size < 1 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".to_string()));
        }
        if self.early_stop_patience < 1 || self.lr_reduce_patience < 1 {
            return Err(Error::InvalidConfig(
                "patience values must be >= 1".to_string(),
            ));
        }
        if !(self.lr_reduce_factor > 0.0 && self.lr_reduce_factor < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "lr_reduce_factor must lie in (0, 1), got {}",
                self.lr_reduce_factor
            )));
        }
        Ok(())
    }
}

/// Loss decomposition for one step or epoch: `total = bce + penalty`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub bce: f64,
    pub penalty: f64,
    pub total: f64,
}

/// Adam accumulators for the model parameters and α, updated with a shared
/// step count.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m_layers: Vec<Layer>,
    pub v_layers: Vec<Layer>,
    pub m_alpha: Array1<f64>,
    pub v_alpha: Array1<f64>,
    pub t: u64,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl AdamState {
    fn zeros_like(params: &ModelParams, num_classes: usize) -> Self {
        let zero_layers = || {
            params
                .layers
                .iter()
                .map(|l| Layer {
                    weight: Array2::zeros(l.weight.dim()),
                    bias: Array1::zeros(l.bias.len()),
                })
                .collect()
        };
        Self {
            m_layers: zero_layers(),
            v_layers: zero_layers(),
            m_alpha: Array1::zeros(num_classes),
            v_alpha: Array1::zeros(num_classes),
            t: 0,
        }
    }
}

#[inline]
fn adam_update(x: &mut f64, g: f64, m: &mut f64, v: &mut f64, lr: f64, c1: f64, c2: f64) {
    *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
    *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
    let m_hat = *m / c1;
    let v_hat = *v / c2;
    *x -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
}

/// Mutable training state. `pooling` is `None` in strong mode.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub params: ModelParams,
    pub pooling: Option<PoolingOperator>,
    pub adam: AdamState,
    pub epoch: usize,
    pub step: u64,
    pub best_validation_score: f64,
    pub epochs_since_improvement: usize,
    pub epochs_since_lr_change: usize,
    pub current_lr: f64,
    pub rng: ChaCha8Rng,
    best_params: ModelParams,
    best_alpha: Array1<f64>,
}

impl TrainState {
    /// Current α values (zeros in strong mode, where no pooling exists).
    pub fn alpha(&self) -> Array1<f64> {
        match &self.pooling {
            Some(op) => op.alpha.alpha.clone(),
            None => Array1::zeros(self.params.num_classes),
        }
    }
}

/// One row of the per-epoch training history. The α snapshot is taken at the
/// start of the epoch, before any update of that epoch is applied.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_f1: f64,
    pub lr: f64,
    pub alpha: Vec<f64>,
}

/// History file layout: `epoch,train_loss,val_f1,lr,operator,alpha_0..`,
/// one row per epoch.
pub fn history_to_csv(records: &[EpochRecord], operator: &Operator, num_classes: usize) -> String {
    use std::fmt::Write as _;
    let mut out = String::from("epoch,train_loss,val_f1,lr,operator");
    for c in 0..num_classes {
        let _ = write!(out, ",alpha_{c}");
    }
    out.push('\n');
    for r in records {
        let _ = write!(out, "{},{},{},{},{operator}", r.epoch, r.train_loss, r.val_f1, r.lr);
        for a in &r.alpha {
            let _ = write!(out, ",{a}");
        }
        out.push('\n');
    }
    out
}

/// A history file read back: the operator label and per-epoch rows.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedHistory {
    pub operator: String,
    pub rows: Vec<EpochRecord>,
}

pub fn history_from_csv(text: &str, source: &str) -> Result<ParsedHistory> {
    let format_err = |message: String| Error::Format {
        path: source.to_string(),
        message,
    };
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| format_err("empty history file".to_string()))?;
    let columns: Vec<&str> = header.split(',').collect();
    if columns.len() < 5 || columns[0] != "epoch" || columns[4] != "operator" {
        return Err(format_err(format!("unrecognized history header {header}")));
    }
    let num_alpha = columns.len() - 5;
    let mut operator = String::new();
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != columns.len() {
            return Err(format_err(format!(
                "row {} has {} fields, expected {}",
                i + 2,
                fields.len(),
                columns.len()
            )));
        }
        let parse_f64 = |s: &str| {
            s.parse::<f64>()
                .map_err(|e| format_err(format!("row {}: {e}", i + 2)))
        };
        operator = fields[4].to_string();
        rows.push(EpochRecord {
            epoch: fields[0]
                .parse()
                .map_err(|e| format_err(format!("row {}: {e}", i + 2)))?,
            train_loss: parse_f64(fields[1])?,
            val_f1: parse_f64(fields[2])?,
            lr: parse_f64(fields[3])?,
            alpha: fields[5..5 + num_alpha]
                .iter()
                .map(|f| parse_f64(f))
                .collect::<Result<Vec<f64>>>()?,
        });
    }
    Ok(ParsedHistory { operator, rows })
}

/// Mean binary cross-entropy over bags and classes, with the gradient with
/// respect to each pooled value. Probabilities are clipped to [ε, 1−ε]; where
/// clipping is active the gradient is 0 (the clipped loss is flat there).
pub fn mil_loss(pooled: &Array2<f64>, labels: &Array2<f64>) -> Result<(LossReport, Array2<f64>)> {
    if pooled.dim() != labels.dim() {
        return Err(Error::InvalidInput(format!(
            "pooled shape {:?} does not match labels shape {:?}",
            pooled.dim(),
            labels.dim()
        )));
    }
    let n = pooled.len() as f64;
    let mut total = 0.0;
    let mut grad = Array2::zeros(pooled.dim());
    for ((g, &p), &y) in grad.iter_mut().zip(pooled.iter()).zip(labels.iter()) {
        let clipped = p.clamp(PROB_CLIP, 1.0 - PROB_CLIP);
        total += -y * clipped.ln() - (1.0 - y) * (1.0 - clipped).ln();
        *g = if (PROB_CLIP..=1.0 - PROB_CLIP).contains(&p) {
            (clipped - y) / (clipped * (1.0 - clipped)) / n
        } else {
            0.0
        };
    }
    let bce = total / n;
    Ok((
        LossReport {
            bce,
            penalty: 0.0,
            total: bce,
        },
        grad,
    ))
}

/// Mean instance-wise binary cross-entropy across bags; no pooling in the
/// gradient path. Returns per-bag gradient matrices.
pub fn strong_loss(
    instances: &[InstanceLikelihoods],
    strong_labels: &[&Array2<u8>],
) -> Result<(LossReport, Vec<Array2<f64>>)> {
    if instances.len() != strong_labels.len() {
        return Err(Error::InvalidInput(
            "one strong-label matrix per bag is required".to_string(),
        ));
    }
    let n: usize = instances.iter().map(|p| p.values().len()).sum();
    if n == 0 {
        return Err(Error::InvalidInput("no instances".to_string()));
    }
    let n = n as f64;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(instances.len());
    for (p, labels) in instances.iter().zip(strong_labels) {
        if p.values().dim() != labels.dim() {
            return Err(Error::InvalidInput(format!(
                "instance shape {:?} does not match strong labels {:?}",
                p.values().dim(),
                labels.dim()
            )));
        }
        let mut grad = Array2::zeros(p.values().dim());
        for ((g, &pv), &yv) in grad.iter_mut().zip(p.values().iter()).zip(labels.iter()) {
            let y = f64::from(yv);
            let clipped = pv.clamp(PROB_CLIP, 1.0 - PROB_CLIP);
            total += -y * clipped.ln() - (1.0 - y) * (1.0 - clipped).ln();
            *g = if (PROB_CLIP..=1.0 - PROB_CLIP).contains(&pv) {
                (clipped - y) / (clipped * (1.0 - clipped)) / n
            } else {
                0.0
            };
        }
        grads.push(grad);
    }
    let bce = total / n;
    Ok((
        LossReport {
            bce,
            penalty: 0.0,
            total: bce,
        },
        grads,
    ))
}

fn zero_grads(params: &ModelParams) -> ParamGrads {
    ParamGrads {
        layers: params
            .layers
            .iter()
            .map(|l| Layer {
                weight: Array2::zeros(l.weight.dim()),
                bias: Array1::zeros(l.bias.len()),
            })
            .collect(),
    }
}

fn accumulate(into: &mut ParamGrads, from: &ParamGrads) {
    for (a, b) in into.layers.iter_mut().zip(&from.layers) {
        a.weight += &b.weight;
        a.bias += &b.bias;
    }
}

/// Forward+backward over one batch: total loss (including any α penalty),
/// parameter gradients, and the α gradient. Shared by the training step and
/// the finite-difference checks.
pub fn batch_gradients<R: Rng + ?Sized>(
    params: &ModelParams,
    pooling: Option<&PoolingOperator>,
    batch: &[&Bag],
    rng: &mut R,
) -> Result<(LossReport, ParamGrads, Array1<f64>)> {
    if batch.is_empty() {
        return Err(Error::InvalidInput("empty batch".to_string()));
    }
    let c = params.num_classes;
    let mut param_grads = zero_grads(params);
    let mut alpha_grad = Array1::zeros(c);

    match pooling {
        Some(op) => {
            let mut pooled = Array2::zeros((batch.len(), c));
            let mut labels = Array2::zeros((batch.len(), c));
            let mut caches = Vec::with_capacity(batch.len());
            let mut likelihoods = Vec::with_capacity(batch.len());
            let mut weights = Vec::with_capacity(batch.len());
            for (i, bag) in batch.iter().enumerate() {
                let (p, cache) = model_forward(params, &bag.features)?;
                let (bag_likelihood, w) = op.forward(&p, rng)?;
                for class in 0..c {
                    pooled[[i, class]] = bag_likelihood.values[class];
                    labels[[i, class]] = f64::from(bag.weak_labels[class]);
                }
                caches.push(cache);
                likelihoods.push(p);
                weights.push(w);
            }
            let (mut report, d_pooled) = mil_loss(&pooled, &labels)?;
            for (i, bag_cache) in caches.iter().enumerate() {
                let upstream = d_pooled.row(i);
                let grads = op.backward(&likelihoods[i], upstream, &weights[i])?;
                let model_grads = model_backward(params, bag_cache, &grads.d_instances)?;
                accumulate(&mut param_grads, &model_grads);
                if op.learns_alpha() {
                    alpha_grad += &grads.d_alpha;
                }
            }
            if op.learns_alpha() {
                let (penalty, penalty_grad) = rap_penalty(&op.alpha);
                report.penalty = penalty;
                report.total = report.bce + penalty;
                alpha_grad += &penalty_grad;
            }
            Ok((report, param_grads, alpha_grad))
        }
        None => {
            let mut likelihoods = Vec::with_capacity(batch.len());
            let mut caches = Vec::with_capacity(batch.len());
            let mut strong = Vec::with_capacity(batch.len());
            for bag in batch {
                let labels = bag.strong_labels.as_ref().ok_or_else(|| {
                    Error::MissingStrongLabels(format!(
                        "bag {} lacks strong labels required for strong training",
                        bag.bag_id
                    ))
                })?;
                let (p, cache) = model_forward(params, &bag.features)?;
                likelihoods.push(p);
                caches.push(cache);
                strong.push(labels);
            }
            let (report, grads) = strong_loss(&likelihoods, &strong)?;
            for (cache, grad) in caches.iter().zip(&grads) {
                let model_grads = model_backward(params, cache, grad)?;
                accumulate(&mut param_grads, &model_grads);
            }
            Ok((report, param_grads, alpha_grad))
        }
    }
}

/// Batch loss only (forward pass), for finite-difference oracles.
pub fn batch_loss<R: Rng + ?Sized>(
    params: &ModelParams,
    pooling: Option<&PoolingOperator>,
    batch: &[&Bag],
    rng: &mut R,
) -> Result<f64> {
    let c = params.num_classes;
    match pooling {
        Some(op) => {
            let mut pooled = Array2::zeros((batch.len(), c));
            let mut labels = Array2::zeros((batch.len(), c));
            for (i, bag) in batch.iter().enumerate() {
                let (p, _) = model_forward(params, &bag.features)?;
                let (bag_likelihood, _) = op.forward(&p, rng)?;
                for class in 0..c {
                    pooled[[i, class]] = bag_likelihood.values[class];
                    labels[[i, class]] = f64::from(bag.weak_labels[class]);
                }
            }
            let (report, _) = mil_loss(&pooled, &labels)?;
            let penalty = if op.learns_alpha() {
                rap_penalty(&op.alpha).0
            } else {
                0.0
            };
            Ok(report.bce + penalty)
        }
        None => {
            let mut likelihoods = Vec::with_capacity(batch.len());
            let mut strong = Vec::with_capacity(batch.len());
            for bag in batch {
                let labels = bag.strong_labels.as_ref().ok_or_else(|| {
                    Error::MissingStrongLabels(format!("bag {} lacks strong labels", bag.bag_id))
                })?;
                let (p, _) = model_forward(params, &bag.features)?;
                likelihoods.push(p);
                strong.push(labels);
            }
            Ok(strong_loss(&likelihoods, &strong)?.0.bce)
        }
    }
}

/// One optimizer step over a batch: assemble gradients, apply a shared Adam
/// update to θ (and α when the operator learns it), then project α if capped.
pub fn train_step(
    state: &mut TrainState,
    batch: &[&Bag],
    _config: &TrainConfig,
) -> Result<LossReport> {
    let (report, param_grads, alpha_grad) =
        batch_gradients(&state.params, state.pooling.as_ref(), batch, &mut state.rng)?;
    if !report.total.is_finite() {
        return Err(Error::TrainingDivergence {
            batch_index: state.step,
            message: format!("loss became {}", report.total),
        });
    }
    state.step += 1;
    state.adam.t += 1;
    let c1 = 1.0 - ADAM_BETA1.powi(state.adam.t as i32);
    let c2 = 1.0 - ADAM_BETA2.powi(state.adam.t as i32);
    let lr = state.current_lr;
    for ((layer, grad), (m, v)) in state
        .params
        .layers
        .iter_mut()
        .zip(&param_grads.layers)
        .zip(state.adam.m_layers.iter_mut().zip(&mut state.adam.v_layers))
    {
        for ((x, &g), (m, v)) in layer
            .weight
            .iter_mut()
            .zip(grad.weight.iter())
            .zip(m.weight.iter_mut().zip(v.weight.iter_mut()))
        {
            adam_update(x, g, m, v, lr, c1, c2);
        }
        for ((x, &g), (m, v)) in layer
            .bias
            .iter_mut()
            .zip(grad.bias.iter())
            .zip(m.bias.iter_mut().zip(v.bias.iter_mut()))
        {
            adam_update(x, g, m, v, lr, c1, c2);
        }
    }
    if let Some(op) = &mut state.pooling {
        if op.learns_alpha() {
            for ((x, &g), (m, v)) in op
                .alpha
                .alpha
                .iter_mut()
                .zip(alpha_grad.iter())
                .zip(state.adam.m_alpha.iter_mut().zip(state.adam.v_alpha.iter_mut()))
            {
                adam_update(x, g, m, v, lr, c1, c2);
            }
            op.alpha = project_alpha(op.alpha.clone());
        }
    }
    Ok(report)
}

/// Validation score used for early stopping: static macro-F1 at threshold
/// 0.5, where the bag-level prediction is the max over instance likelihoods.
pub fn validation_macro_f1(params: &ModelParams, bags: &[Bag]) -> Result<f64> {
    let c = params.num_classes;
    let mut predicted = Array2::zeros((bags.len(), c));
    let mut reference = Array2::zeros((bags.len(), c));
    for (i, bag) in bags.iter().enumerate() {
        let (p, _) = model_forward(params, &bag.features)?;
        let bag_pred = static_prediction(&p);
        let row = bag_pred.values.insert_axis(ndarray::Axis(0));
        let roll = threshold_predictions(&row, 0.5, 1.0)?;
        for class in 0..c {
            predicted[[i, class]] = roll.active[[0, class]];
            reference[[i, class]] = bag.weak_labels[class];
        }
    }
    Ok(static_metrics(&predicted, &reference)?.macro_avg.f1)
}

fn check_bags(bags: &[Bag], input_dim: usize, num_classes: usize) -> Result<()> {
    for bag in bags {
        if bag.feature_dim() != input_dim || bag.num_classes() != num_classes {
            return Err(Error::InvalidInput(format!(
                "bag {} has shape ({}, {} classes), expected ({input_dim}, {num_classes} classes)",
                bag.bag_id,
                bag.feature_dim(),
                bag.num_classes()
            )));
        }
    }
    Ok(())
}

/// Full training loop. Returns the best-validation state (parameters and α
/// restored to the best epoch) and the per-epoch history.
pub fn train(
    train_bags: &[Bag],
    validation_bags: &[Bag],
    config: &TrainConfig,
) -> Result<(TrainState, Vec<EpochRecord>)> {
    config.validate()?;
    if train_bags.is_empty() || validation_bags.is_empty() {
        return Err(Error::InvalidInput(
            "training and validation splits must be non-empty".to_string(),
        ));
    }
    let input_dim = train_bags[0].feature_dim();
    let num_classes = train_bags[0].num_classes();
    check_bags(train_bags, input_dim, num_classes)?;
    check_bags(validation_bags, input_dim, num_classes)?;

    let mut root = ChaCha8Rng::seed_from_u64(config.seed);
    let param_seed: u64 = root.random();
    let loop_seed: u64 = root.random();

    let params = init_params(config.architecture, input_dim, num_classes, param_seed)?;
    let min_bag_size = train_bags
        .iter()
        .map(Bag::num_instances)
        .min()
        .expect("non-empty");
    let pooling = config
        .operator
        .build_pooling(num_classes, config.alpha_init, min_bag_size)?;
    let adam = AdamState::zeros_like(&params, num_classes);
    let mut state = TrainState {
        best_params: params.clone(),
        best_alpha: pooling
            .as_ref()
            .map(|op| op.alpha.alpha.clone())
            .unwrap_or_else(|| Array1::zeros(num_classes)),
        params,
        pooling,
        adam,
        epoch: 0,
        step: 0,
        best_validation_score: f64::NEG_INFINITY,
        epochs_since_improvement: 0,
        epochs_since_lr_change: 0,
        current_lr: config.learning_rate,
        rng: ChaCha8Rng::seed_from_u64(loop_seed),
    };

    let mut history = Vec::new();
    let mut order: Vec<usize> = (0..train_bags.len()).collect();
    for epoch in 1..=config.max_epochs {
        state.epoch = epoch;
        let alpha_snapshot = state.alpha().to_vec();
        let lr_this_epoch = state.current_lr;
        order.shuffle(&mut state.rng);

        let mut loss_sum = 0.0;
        let mut bag_count = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&Bag> = chunk.iter().map(|&i| &train_bags[i]).collect();
            let report = train_step(&mut state, &batch, config)?;
            loss_sum += report.total * batch.len() as f64;
            bag_count += batch.len();
        }
        let train_loss = loss_sum / bag_count as f64;

        let val_f1 = validation_macro_f1(&state.params, validation_bags)?;
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_f1,
            lr: lr_this_epoch,
            alpha: alpha_snapshot,
        });

        if val_f1 > state.best_validation_score {
            state.best_validation_score = val_f1;
            state.best_params = state.params.clone();
            state.best_alpha = state.alpha();
            state.epochs_since_improvement = 0;
            state.epochs_since_lr_change = 0;
        } else {
            state.epochs_since_improvement += 1;
            state.epochs_since_lr_change += 1;
            if state.epochs_since_lr_change >= config.lr_reduce_patience {
                state.current_lr *= config.lr_reduce_factor;
                state.epochs_since_lr_change = 0;
            }
            if state.epochs_since_improvement >= config.early_stop_patience {
                break;
            }
        }
    }

    state.params = state.best_params.clone();
    if let Some(op) = &mut state.pooling {
        op.alpha.alpha = state.best_alpha.clone();
    }
    Ok((state, history))
}
