// Range guards are written in negated form so NaN fails them.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

//! Browser bindings for the pooling operators. Three interactive operations,
//! each returning a JSON string for the static demo page in `www/`:
//! pooling one column at a chosen α, the closed-form weight-bound curves,
//! and a miniature two-class training run showing α adapt per class.

use ndarray::{Array1, Array2};
use serde::Serialize;
use wasm_bindgen::prelude::*;

use autopool::objective::{train, Operator, TrainConfig};
use autopool::pooling::{
    cap_alpha_bound, pool_auto, weight_bounds, AlphaVector, InstanceLikelihoods,
};
use autopool::synthdata::{generate, preset_short_long};

#[derive(Serialize)]
struct PoolResult {
    pooled: f64,
    weights: Vec<f64>,
    mean: f64,
    max: f64,
    min: f64,
    bound_lower: f64,
    bound_upper: f64,
    /// ln(m−1), the φ+ = 0.5 cap; absent for singleton columns.
    cap_bound: Option<f64>,
}

#[derive(Serialize)]
struct ErrorResult<'a> {
    error: &'a str,
}

fn err_json(message: &str) -> String {
    serde_json::to_string(&ErrorResult { error: message }).expect("serializable")
}

/// Pool one column of instance likelihoods with sharpness `alpha`.
#[wasm_bindgen]
pub fn pool_column(values: &[f64], alpha: f64) -> String {
    if values.is_empty() {
        return err_json("need at least one instance");
    }
    if values.iter().any(|v| !(*v >= 0.0 && *v <= 1.0)) {
        return err_json("instance likelihoods must lie in [0, 1]");
    }
    if !alpha.is_finite() {
        return err_json("alpha must be finite");
    }
    let m = values.len();
    let p = InstanceLikelihoods::new(
        Array2::from_shape_vec((m, 1), values.to_vec()).expect("shape"),
    )
    .expect("validated range");
    let a = AlphaVector::unconstrained(Array1::from_elem(1, alpha));
    let (pooled, weights) = pool_auto(&p, &a).expect("finite alpha");
    let bounds = weight_bounds(alpha, m);
    let mean = values.iter().sum::<f64>() / m as f64;
    let max = values.iter().cloned().fold(f64::MIN, f64::max);
    let min = values.iter().cloned().fold(f64::MAX, f64::min);
    let result = PoolResult {
        pooled: pooled.values[0],
        weights: weights.weights.column(0).to_vec(),
        mean,
        max,
        min,
        bound_lower: bounds.lower,
        bound_upper: bounds.upper,
        cap_bound: cap_alpha_bound(0.5, m).ok(),
    };
    serde_json::to_string(&result).expect("serializable")
}

#[derive(Serialize)]
struct BoundsCurve {
    alphas: Vec<f64>,
    lower: Vec<f64>,
    upper: Vec<f64>,
    uniform: f64,
    cap_bound: Option<f64>,
}

/// Closed-form instance-weight bounds over an α range for bag size `m`.
#[wasm_bindgen]
pub fn bounds_curve(m: u32, alpha_lo: f64, alpha_hi: f64, steps: u32) -> String {
    if m < 1 {
        return err_json("bag size must be at least 1");
    }
    if steps < 2 || !(alpha_hi > alpha_lo) || !alpha_lo.is_finite() || !alpha_hi.is_finite() {
        return err_json("need a finite alpha range and at least 2 steps");
    }
    let m = m as usize;
    let steps = steps as usize;
    let mut alphas = Vec::with_capacity(steps);
    let mut lower = Vec::with_capacity(steps);
    let mut upper = Vec::with_capacity(steps);
    for i in 0..steps {
        let alpha = alpha_lo + (alpha_hi - alpha_lo) * i as f64 / (steps - 1) as f64;
        let b = weight_bounds(alpha, m);
        alphas.push(alpha);
        lower.push(b.lower);
        upper.push(b.upper);
    }
    let curve = BoundsCurve {
        alphas,
        lower,
        upper,
        uniform: 1.0 / m as f64,
        cap_bound: cap_alpha_bound(0.5, m).ok(),
    };
    serde_json::to_string(&curve).expect("serializable")
}

#[derive(Serialize)]
struct TrainDemo {
    classes: Vec<String>,
    epochs: Vec<usize>,
    /// One α trajectory per class, indexed like `classes`.
    alpha: Vec<Vec<f64>>,
    train_loss: Vec<f64>,
    val_f1: Vec<f64>,
    final_alpha: Vec<f64>,
}

/// Train auto-pool on a small two-class set (one short-event class, one
/// full-duration class) and report the per-epoch α trajectories.
#[wasm_bindgen]
pub fn train_demo(seed: u32, epochs: u32) -> String {
    if !(1..=200).contains(&epochs) {
        return err_json("epochs must lie in [1, 200]");
    }
    let mut synth = preset_short_long(seed as u64);
    // Browser-sized run.
    synth.num_train_bags = 120;
    synth.num_val_bags = 40;
    synth.num_test_bags = 1;
    let data = match generate(&synth) {
        Ok(d) => d,
        Err(e) => return err_json(&e.to_string()),
    };
    let config = TrainConfig {
        operator: Operator::Auto,
        max_epochs: epochs as usize,
        early_stop_patience: epochs as usize,
        learning_rate: 0.02,
        seed: seed as u64,
        ..TrainConfig::default()
    };
    let (state, history) = match train(&data.train, &data.validation, &config) {
        Ok(r) => r,
        Err(e) => return err_json(&e.to_string()),
    };
    let num_classes = data.class_names.len();
    let mut alpha = vec![Vec::with_capacity(history.len()); num_classes];
    for record in &history {
        for (c, traj) in alpha.iter_mut().enumerate() {
            traj.push(record.alpha[c]);
        }
    }
    let demo = TrainDemo {
        classes: data.class_names.clone(),
        epochs: history.iter().map(|r| r.epoch).collect(),
        alpha,
        train_loss: history.iter().map(|r| r.train_loss).collect(),
        val_f1: history.iter().map(|r| r.val_f1).collect(),
        final_alpha: state.alpha().to_vec(),
    };
    serde_json::to_string(&demo).expect("serializable")
}
