//! Clipped-surrogate policy optimization with analytic gradients.
//!
//! Gradients flow through the actor MLP, the Gaussian log-density, and the
//! value MLP by hand; the squash Jacobian term of the log-density depends
//! only on the sampled pre-squash value, so it drops out of all parameter
//! gradients. Parameters are treated as one flat block
//! `[actor | log_std | value]` so a single Adam instance drives the update.

use crate::config::TrainConfig;
use crate::control::{action_log_prob, PolicyParameters};
use crate::error::{Result, SimError};
use crate::nn::Adam;
use crate::rl::ProcessedBatch;

/// Scale advantages to mean 0, standard deviation 1 (population), with a
/// floor guarding degenerate batches.
pub fn normalize_advantages(adv: &mut [f64]) {
    if adv.is_empty() {
        return;
    }
    let n = adv.len() as f64;
    let mean = adv.iter().sum::<f64>() / n;
    let var = adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt().max(1e-8);
    for a in adv.iter_mut() {
        *a = (*a - mean) / std;
    }
}

/// Differential entropy of the Gaussian head.
pub fn gaussian_entropy(log_std: f64) -> f64 {
    0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E).ln() + log_std
}

/// Per-sample clipped surrogate objective. Returns the objective value and
/// whether the unclipped branch was selected (ties go to unclipped, whose
/// derivative is the correct subgradient there).
pub fn clip_objective(ratio: f64, adv: f64, eps: f64) -> (f64, bool) {
    let clipped = ratio.clamp(1.0 - eps, 1.0 + eps) * adv;
    let raw = ratio * adv;
    if raw <= clipped {
        (raw, true)
    } else {
        (clipped, false)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LossStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct UpdateStats {
    pub losses: LossStats,
    pub grad_norm: f64,
}

/// Number of scalars in the flat parameter block.
pub fn flat_param_count(params: &PolicyParameters) -> usize {
    params.actor.params().len() + 1 + params.value.params().len()
}

/// Concatenate `[actor | log_std | value]`.
pub fn gather_params(params: &PolicyParameters) -> Vec<f64> {
    let mut flat = Vec::with_capacity(flat_param_count(params));
    flat.extend_from_slice(params.actor.params());
    flat.push(params.log_std);
    flat.extend_from_slice(params.value.params());
    flat
}

/// Write a flat block back into the structured parameters.
pub fn scatter_params(params: &mut PolicyParameters, flat: &[f64]) {
    let na = params.actor.params().len();
    let nv = params.value.params().len();
    assert_eq!(flat.len(), na + 1 + nv);
    params.actor.params_mut().copy_from_slice(&flat[..na]);
    params.log_std = flat[na];
    params.value.params_mut().copy_from_slice(&flat[na + 1..]);
}

fn ratio_at(
    params: &PolicyParameters,
    batch: &ProcessedBatch,
    i: usize,
    accel_bounds: [f64; 2],
    mean: f64,
) -> Result<f64> {
    let lp_new = action_log_prob(batch.z[i], mean, params.log_std, accel_bounds);
    let ratio = (lp_new - batch.log_prob_old[i]).exp();
    if !ratio.is_finite() {
        return Err(SimError::NonFinite {
            context: format!("policy ratio at transition {i}"),
        });
    }
    Ok(ratio)
}

/// Evaluate the three loss components on the indexed subset without
/// touching gradients. Advantages must already be normalized.
pub fn ppo_losses(
    params: &PolicyParameters,
    batch: &ProcessedBatch,
    idx: &[usize],
    cfg: &TrainConfig,
    accel_bounds: [f64; 2],
) -> Result<LossStats> {
    assert!(!idx.is_empty());
    let m = idx.len() as f64;
    let mut policy_sum = 0.0;
    let mut value_sum = 0.0;
    for &i in idx {
        let mean = params.actor.forward_checked(&batch.obs[i], "actor")?[0];
        let ratio = ratio_at(params, batch, i, accel_bounds, mean)?;
        let (obj, _) = clip_objective(ratio, batch.advantages[i], cfg.clip_eps);
        policy_sum += obj;
        let v = params.value.forward_checked(&batch.aug[i], "value")?[0];
        value_sum += (v - batch.returns[i]).powi(2);
    }
    Ok(LossStats {
        policy_loss: -policy_sum / m,
        value_loss: value_sum / m,
        entropy: gaussian_entropy(params.log_std),
    })
}

/// Scalar objective actually minimized; used by gradient checks.
pub fn total_loss(
    params: &PolicyParameters,
    batch: &ProcessedBatch,
    idx: &[usize],
    cfg: &TrainConfig,
    accel_bounds: [f64; 2],
) -> Result<f64> {
    let s = ppo_losses(params, batch, idx, cfg, accel_bounds)?;
    Ok(s.policy_loss + cfg.value_coeff * s.value_loss - cfg.entropy_coeff * s.entropy)
}

/// Analytic gradient of [`total_loss`] over the indexed subset, as a flat
/// `[actor | log_std | value]` block. Fails (leaving no side effects) on a
/// non-finite ratio or gradient.
pub fn ppo_backward(
    params: &PolicyParameters,
    batch: &ProcessedBatch,
    idx: &[usize],
    cfg: &TrainConfig,
    accel_bounds: [f64; 2],
) -> Result<(Vec<f64>, UpdateStats)> {
    assert!(!idx.is_empty());
    let m = idx.len() as f64;
    let std = params.log_std.exp();
    let na = params.actor.params().len();
    let nv = params.value.params().len();
    let mut actor_grads = vec![0.0; na];
    let mut value_grads = vec![0.0; nv];
    let mut log_std_grad = 0.0;
    let mut policy_sum = 0.0;
    let mut value_sum = 0.0;

    for &i in idx {
        let cache = params.actor.forward_cached(&batch.obs[i]);
        let mean = cache.output()[0];
        if !mean.is_finite() {
            return Err(SimError::NonFinite {
                context: format!("actor output at transition {i}"),
            });
        }
        let ratio = ratio_at(params, batch, i, accel_bounds, mean)?;
        let adv = batch.advantages[i];
        let (obj, unclipped) = clip_objective(ratio, adv, cfg.clip_eps);
        policy_sum += obj;

        // ∂(−obj/M)/∂ratio is −adv/M on the unclipped branch, 0 when the
        // clipped constant branch is active.
        if unclipped && adv != 0.0 {
            let g_ratio = -adv / m;
            let zc = (batch.z[i] - mean) / std;
            let dlp_dmean = zc / std;
            let dlp_dlogstd = zc * zc - 1.0;
            let d_mean = g_ratio * ratio * dlp_dmean;
            log_std_grad += g_ratio * ratio * dlp_dlogstd;
            params.actor.backward(&cache, &[d_mean], &mut actor_grads);
        }

        let vcache = params.value.forward_cached(&batch.aug[i]);
        let v = vcache.output()[0];
        if !v.is_finite() {
            return Err(SimError::NonFinite {
                context: format!("value output at transition {i}"),
            });
        }
        let err = v - batch.returns[i];
        value_sum += err * err;
        let d_v = cfg.value_coeff * 2.0 * err / m;
        params.value.backward(&vcache, &[d_v], &mut value_grads);
    }

    // Entropy bonus: −entropy_coeff·(const + log_std).
    log_std_grad -= cfg.entropy_coeff;

    let mut flat = Vec::with_capacity(na + 1 + nv);
    flat.extend_from_slice(&actor_grads);
    flat.push(log_std_grad);
    flat.extend_from_slice(&value_grads);

    let grad_norm = flat.iter().map(|g| g * g).sum::<f64>().sqrt();
    if !grad_norm.is_finite() {
        return Err(SimError::NonFinite {
            context: "minibatch gradient".to_string(),
        });
    }
    let stats = UpdateStats {
        losses: LossStats {
            policy_loss: -policy_sum / m,
            value_loss: value_sum / m,
            entropy: gaussian_entropy(params.log_std),
        },
        grad_norm,
    };
    Ok((flat, stats))
}

/// Adam over the flat parameter block.
#[derive(Debug, Clone)]
pub struct PpoOptimizer {
    adam: Adam,
}

impl PpoOptimizer {
    pub fn new(params: &PolicyParameters, lr: f64) -> Self {
        PpoOptimizer {
            adam: Adam::new(flat_param_count(params), lr),
        }
    }

    pub fn step(&mut self, params: &mut PolicyParameters, grads: &[f64]) {
        let mut flat = gather_params(params);
        self.adam.step(&mut flat, grads);
        scatter_params(params, &flat);
    }
}
