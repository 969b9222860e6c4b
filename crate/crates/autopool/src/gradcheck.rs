//! Finite-difference verification of every analytic gradient in the crate.
//!
//! The oracle is a central difference of the forward-only path (step 1e-5);
//! it never touches the analytic backward code, so the two routes are
//! independent. Used by the CLI's gradcheck command and the acceptance suite.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{init_params, model_backward, model_forward, Architecture, ModelParams};
use crate::objective::{batch_gradients, batch_loss, Operator};
use crate::pooling::{pool_auto_backward, AlphaVector, InstanceLikelihoods};
use crate::synthdata::Bag;

pub const FD_STEP: f64 = 1e-5;

/// Relative error with a small absolute guard for near-zero gradients.
fn rel_err(analytic: f64, fd: f64) -> f64 {
    (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-6)
}

#[derive(Debug, Clone)]
pub struct ComponentReport {
    pub name: String,
    pub max_rel_err: f64,
    pub threshold: f64,
}

impl ComponentReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.threshold
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub seed: u64,
    pub trials: usize,
    pub components: Vec<ComponentReport>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.components.iter().all(ComponentReport::passed)
    }
}

fn random_column(rng: &mut ChaCha8Rng, m: usize) -> Vec<f64> {
    // Margin keeps p ± step inside [0, 1] when the oracle perturbs entries.
    (0..m).map(|_| rng.random_range(0.001..0.999)).collect()
}

fn pooled_value(column: &[f64], alpha: f64) -> f64 {
    let p = InstanceLikelihoods::new(
        Array2::from_shape_vec((column.len(), 1), column.to_vec()).expect("shape"),
    )
    .expect("column in range");
    let a = AlphaVector::unconstrained(Array1::from_vec(vec![alpha]));
    crate::pooling::pool_auto(&p, &a).expect("finite alpha").0.values[0]
}

/// Check d(pooled)/d(instances) and d(pooled)/d(alpha) on random columns.
fn check_pooling(seed: u64, trials: usize) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst_instances = 0.0f64;
    let mut worst_alpha = 0.0f64;
    for _ in 0..trials {
        let m = rng.random_range(2..12);
        let alpha = rng.random_range(-4.0..4.0);
        let column = random_column(&mut rng, m);
        let p = InstanceLikelihoods::new(
            Array2::from_shape_vec((m, 1), column.clone()).expect("shape"),
        )
        .expect("in range");
        let a = AlphaVector::unconstrained(Array1::from_vec(vec![alpha]));
        let grads =
            pool_auto_backward(&p, &a, Array1::from_vec(vec![1.0]).view()).expect("valid");
        for k in 0..m {
            let mut plus = column.clone();
            let mut minus = column.clone();
            plus[k] += FD_STEP;
            minus[k] -= FD_STEP;
            let fd = (pooled_value(&plus, alpha) - pooled_value(&minus, alpha)) / (2.0 * FD_STEP);
            worst_instances = worst_instances.max(rel_err(grads.d_instances[[k, 0]], fd));
        }
        let fd_alpha = (pooled_value(&column, alpha + FD_STEP)
            - pooled_value(&column, alpha - FD_STEP))
            / (2.0 * FD_STEP);
        worst_alpha = worst_alpha.max(rel_err(grads.d_alpha[0], fd_alpha));
    }
    (worst_instances, worst_alpha)
}

/// Check model parameter gradients against the finite difference of a random
/// linear functional of the output probabilities.
fn check_model(seed: u64, trials: usize, architecture: Architecture) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let d = rng.random_range(2..5);
        let c = rng.random_range(1..4);
        let m = rng.random_range(1..5);
        let mut params = init_params(architecture, d, c, rng.random()).expect("valid dims");
        let mut features = Array2::zeros((m, d));
        for v in features.iter_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        let mut upstream = Array2::zeros((m, c));
        for v in upstream.iter_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        let (_, cache) = model_forward(&params, &features).expect("valid");
        let analytic = model_backward(&params, &cache, &upstream).expect("valid");
        let mut flat = Vec::new();
        for l in &analytic.layers {
            flat.extend(l.weight.iter().copied());
            flat.extend(l.bias.iter().copied());
        }
        let loss = |params: &ModelParams| -> f64 {
            let (probs, _) = model_forward(params, &features).expect("valid");
            (probs.values() * &upstream).sum()
        };
        for (i, &analytic_value) in flat.iter().enumerate() {
            let original = params.param(i);
            params.set_param(i, original + FD_STEP);
            let plus = loss(&params);
            params.set_param(i, original - FD_STEP);
            let minus = loss(&params);
            params.set_param(i, original);
            let fd = (plus - minus) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic_value, fd));
        }
    }
    worst
}

fn random_bag(rng: &mut ChaCha8Rng, id: usize, m: usize, d: usize, c: usize) -> Bag {
    let mut features = Array2::zeros((m, d));
    for v in features.iter_mut() {
        *v = rng.random_range(-1.0..1.0);
    }
    let mut strong = Array2::zeros((m, c));
    let mut weak = vec![0u8; c];
    for class in 0..c {
        for frame in 0..m {
            if rng.random_range(0.0..1.0) < 0.4 {
                strong[[frame, class]] = 1;
                weak[class] = 1;
            }
        }
    }
    Bag {
        bag_id: format!("gradcheck-{id}"),
        features,
        weak_labels: weak,
        strong_labels: Some(strong),
    }
}

/// Check the fully assembled loss gradient (θ and α jointly) for the
/// differentiable operators, and θ for strong training.
fn check_end_to_end(seed: u64, trials: usize) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let operators = [
        Operator::Mean,
        Operator::Softmax,
        Operator::Auto,
        Operator::Cap,
        Operator::Rap { lambda: 1e-3 },
        Operator::Strong,
    ];
    let mut worst_theta = 0.0f64;
    let mut worst_alpha = 0.0f64;
    for trial in 0..trials {
        let operator = operators[trial % operators.len()];
        let d = 3;
        let c = 2;
        let m = 3;
        let bags: Vec<Bag> = (0..2).map(|i| random_bag(&mut rng, i, m, d, c)).collect();
        let batch: Vec<&Bag> = bags.iter().collect();
        let mut params =
            init_params(Architecture::Linear, d, c, rng.random()).expect("valid dims");
        let mut pooling = operator
            .build_pooling(c, rng.random_range(-1.0..2.0), m)
            .expect("valid operator");
        // Tie-free data: a throwaway rng is fine for these operators.
        let mut tie_rng = ChaCha8Rng::seed_from_u64(0);
        let (_, param_grads, alpha_grad) =
            batch_gradients(&params, pooling.as_ref(), &batch, &mut tie_rng).expect("valid");

        let mut flat = Vec::new();
        for l in &param_grads.layers {
            flat.extend(l.weight.iter().copied());
            flat.extend(l.bias.iter().copied());
        }
        for (i, &analytic_value) in flat.iter().enumerate() {
            let original = params.param(i);
            params.set_param(i, original + FD_STEP);
            let plus =
                batch_loss(&params, pooling.as_ref(), &batch, &mut tie_rng).expect("valid");
            params.set_param(i, original - FD_STEP);
            let minus =
                batch_loss(&params, pooling.as_ref(), &batch, &mut tie_rng).expect("valid");
            params.set_param(i, original);
            let fd = (plus - minus) / (2.0 * FD_STEP);
            worst_theta = worst_theta.max(rel_err(analytic_value, fd));
        }
        if let Some(op) = &mut pooling {
            if op.learns_alpha() {
                for class in 0..c {
                    let original = op.alpha.alpha[class];
                    op.alpha.alpha[class] = original + FD_STEP;
                    let plus =
                        batch_loss(&params, Some(op), &batch, &mut tie_rng).expect("valid");
                    op.alpha.alpha[class] = original - FD_STEP;
                    let minus =
                        batch_loss(&params, Some(op), &batch, &mut tie_rng).expect("valid");
                    op.alpha.alpha[class] = original;
                    let fd = (plus - minus) / (2.0 * FD_STEP);
                    worst_alpha = worst_alpha.max(rel_err(alpha_grad[class], fd));
                }
            }
        }
    }
    (worst_theta, worst_alpha)
}

/// Run every gradient check. `trials` is the number of random cases per
/// component.
pub fn run(seed: u64, trials: usize) -> Result<GradCheckReport> {
    if trials < 1 {
        return Err(Error::InvalidParameter(
            "gradcheck needs at least 1 trial".to_string(),
        ));
    }
    let (pool_instances, pool_alpha) = check_pooling(seed, trials);
    let model_linear = check_model(seed.wrapping_add(1), trials.div_ceil(4), Architecture::Linear);
    let model_mlp = check_model(
        seed.wrapping_add(2),
        trials.div_ceil(4),
        Architecture::Mlp { hidden: 5 },
    );
    let (theta, alpha) = check_end_to_end(seed.wrapping_add(3), trials);
    let components = vec![
        ComponentReport {
            name: "pooling.d_instances".to_string(),
            max_rel_err: pool_instances,
            threshold: 1e-5,
        },
        ComponentReport {
            name: "pooling.d_alpha".to_string(),
            max_rel_err: pool_alpha,
            threshold: 1e-5,
        },
        ComponentReport {
            name: "model.linear".to_string(),
            max_rel_err: model_linear,
            threshold: 1e-5,
        },
        ComponentReport {
            name: "model.mlp".to_string(),
            max_rel_err: model_mlp,
            threshold: 1e-5,
        },
        ComponentReport {
            name: "end_to_end.theta".to_string(),
            max_rel_err: theta,
            threshold: 1e-4,
        },
        ComponentReport {
            name: "end_to_end.alpha".to_string(),
            max_rel_err: alpha,
            threshold: 1e-4,
        },
    ];
    Ok(GradCheckReport {
        seed,
        trials,
        components,
    })
}
