//! Policy-gradient training: reward shaping, the augmented value-network
//! input, generalized advantage estimation, the clipped-surrogate update
//! with manual backpropagation, and the batch training loop.

pub mod gae;
pub mod ppo;
pub mod train;

use crate::config::RewardCoeffs;
use crate::control::{Observation, AUG_OBS_DIM, OBS_DIM};

/// Runs never come close to these totals; they only set the value-input
/// scale for cumulative odometer and fuel readings.
pub const MILES_SCALE: f64 = 5.0;
pub const GALLONS_SCALE: f64 = 1.0;
pub const HORIZON_SCALE: f64 = 100.0;

/// Finalization step of the splitmix64 generator: a cheap, well-mixed
/// u64 → u64 bijection.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Hash a chunk identifier into a reproducible scalar in [−1, 1].
pub fn chunk_id_signal(ident: u64) -> f64 {
    (splitmix64(ident) as f64 / u64::MAX as f64) * 2.0 - 1.0
}

/// Episode-level context appended to the observation for the value network.
#[derive(Debug, Clone, Copy)]
pub struct AugContext {
    pub miles: f64,
    pub gallons: f64,
    pub horizon_decisions: usize,
    pub chunk_ident: u64,
    /// Fraction of the episode completed in distance, in [0, 1].
    pub progress_space: f64,
    /// Fraction of the episode completed in time, in [0, 1].
    pub progress_time: f64,
}

/// Value-network input: the 14 observation scalars followed by
/// [miles, gallons, horizon, chunk id hash, progress_space, progress_time],
/// each scaled into [−1, 1].
pub fn build_aug_input(obs: &Observation, ctx: &AugContext) -> [f64; AUG_OBS_DIM] {
    let mut aug = [0.0; AUG_OBS_DIM];
    aug[..OBS_DIM].copy_from_slice(obs.raw());
    aug[OBS_DIM] = (ctx.miles / MILES_SCALE).clamp(-1.0, 1.0);
    aug[OBS_DIM + 1] = (ctx.gallons / GALLONS_SCALE).clamp(-1.0, 1.0);
    aug[OBS_DIM + 2] = (ctx.horizon_decisions as f64 / HORIZON_SCALE).clamp(-1.0, 1.0);
    aug[OBS_DIM + 3] = chunk_id_signal(ctx.chunk_ident);
    aug[OBS_DIM + 4] = ctx.progress_space.clamp(0.0, 1.0);
    aug[OBS_DIM + 5] = ctx.progress_time.clamp(0.0, 1.0);
    aug
}

/// Per-decision reward: energy use averaged over the platoon, squared
/// commanded acceleration, an out-of-range gap penalty, and a time-gap
/// penalty active only when moving with a meaningful gap.
///
/// `energies` are fuel rates (gallons/s) for the ego vehicle and everything
/// behind it, each averaged over the decision's simulation window.
/// `a_out` is the post-wrapper, pre-speed-clip acceleration.
pub fn reward(
    energies: &[f64],
    a_out: f64,
    h: f64,
    v_av: f64,
    h_min: f64,
    h_max: f64,
    c: &RewardCoeffs,
) -> f64 {
    debug_assert!(!energies.is_empty());
    let mean_e = energies.iter().sum::<f64>() / energies.len() as f64;
    let gap_pen = if h < h_min || h > h_max { 1.0 } else { 0.0 };
    let time_gap = if h > 10.0 && v_av > 1.0 { h / v_av } else { 0.0 };
    -c.c1 * mean_e - c.c2 * a_out * a_out - c.c3 * gap_pen - c.c4 * time_gap
}

/// One decision-level transition collected during rollout.
#[derive(Debug, Clone)]
pub struct Transition {
    pub obs: [f64; OBS_DIM],
    pub aug: [f64; AUG_OBS_DIM],
    /// Pre-squash action sample.
    pub z: f64,
    /// Bounded acceleration command (m/s²).
    pub action: f64,
    pub log_prob: f64,
    pub reward: f64,
    pub value: f64,
    /// True when the episode genuinely terminates here (not a horizon cut).
    pub done: bool,
}

/// One complete episode plus its truncation bootstrap.
#[derive(Debug, Clone)]
pub struct EpisodeRollout {
    pub transitions: Vec<Transition>,
    /// Value estimate at the state after the last transition; ignored when
    /// the final transition is a true termination.
    pub bootstrap_value: f64,
}

impl EpisodeRollout {
    pub fn undiscounted_return(&self) -> f64 {
        self.transitions.iter().map(|t| t.reward).sum()
    }
}

/// All episodes of one training iteration.
#[derive(Debug, Clone, Default)]
pub struct RolloutBatch {
    pub episodes: Vec<EpisodeRollout>,
}

impl RolloutBatch {
    pub fn num_transitions(&self) -> usize {
        self.episodes.iter().map(|e| e.transitions.len()).sum()
    }

    pub fn mean_episode_return(&self) -> f64 {
        if self.episodes.is_empty() {
            return 0.0;
        }
        self.episodes.iter().map(|e| e.undiscounted_return()).sum::<f64>()
            / self.episodes.len() as f64
    }

    /// Flatten into per-transition arrays with advantages and returns
    /// computed per episode.
    pub fn flatten_with_gae(&self, gamma: f64, lambda: f64) -> crate::Result<ProcessedBatch> {
        let n = self.num_transitions();
        let mut out = ProcessedBatch {
            obs: Vec::with_capacity(n),
            aug: Vec::with_capacity(n),
            z: Vec::with_capacity(n),
            log_prob_old: Vec::with_capacity(n),
            advantages: Vec::with_capacity(n),
            returns: Vec::with_capacity(n),
        };
        for ep in &self.episodes {
            let rewards: Vec<f64> = ep.transitions.iter().map(|t| t.reward).collect();
            let mut values: Vec<f64> = ep.transitions.iter().map(|t| t.value).collect();
            values.push(ep.bootstrap_value);
            let dones: Vec<bool> = ep.transitions.iter().map(|t| t.done).collect();
            let (adv, ret) = gae::compute_gae(&rewards, &values, &dones, gamma, lambda)?;
            for (t, (a, r)) in ep.transitions.iter().zip(adv.iter().zip(&ret)) {
                out.obs.push(t.obs);
                out.aug.push(t.aug);
                out.z.push(t.z);
                out.log_prob_old.push(t.log_prob);
                out.advantages.push(*a);
                out.returns.push(*r);
            }
        }
        Ok(out)
    }
}

/// Flat per-transition training arrays for minibatch updates.
#[derive(Debug, Clone)]
pub struct ProcessedBatch {
    pub obs: Vec<[f64; OBS_DIM]>,
    pub aug: Vec<[f64; AUG_OBS_DIM]>,
    pub z: Vec<f64>,
    pub log_prob_old: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl ProcessedBatch {
    pub fn len(&self) -> usize {
        self.z.len()
    }

    pub fn is_empty(&self) -> bool {
        self.z.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::control::SpeedHistory;

    fn coeffs() -> RewardCoeffs {
        RewardCoeffs::default()
    }

    #[test]
    fn reward_energy_term_only_when_slow_and_in_range() {
        // Gap in range; v_av below the time-gap gate; no acceleration.
        let e = [0.123, 0.123, 0.123];
        let r = reward(&e, 0.0, 50.0, 0.5, 10.4, 120.0, &coeffs());
        assert!((r - (-0.06 * 0.123)).abs() < 1e-15, "{r}");
    }

    #[test]
    fn reward_out_of_range_gap_costs_fixed_penalty() {
        let r = reward(&[0.0], 0.0, 300.0, 0.0, 10.0, 120.0, &coeffs());
        assert!((r - (-0.6)).abs() < 1e-15, "{r}");
        // Below the floor counts as out of range too.
        let r2 = reward(&[0.0], 0.0, 5.0, 0.0, 10.0, 120.0, &coeffs());
        assert!((r2 - (-0.6)).abs() < 1e-15);
    }

    #[test]
    fn reward_time_gap_term_arithmetic() {
        let r = reward(&[0.0], 0.0, 30.0, 15.0, 10.0, 120.0, &coeffs());
        assert!((r - (-0.005 * 2.0)).abs() < 1e-15, "{r}");
    }

    #[test]
    fn reward_comfort_term_is_quadratic() {
        let r = reward(&[0.0], -2.0, 50.0, 0.0, 10.0, 120.0, &coeffs());
        assert!((r - (-0.02 * 4.0)).abs() < 1e-15);
    }

    #[test]
    fn reward_time_gap_needs_both_gates() {
        // h ≤ 10 gates off even at speed.
        let r = reward(&[0.0], 0.0, 10.0, 20.0, 5.0, 120.0, &coeffs());
        assert_eq!(r, 0.0);
        // v ≤ 1 gates off even with a big gap.
        let r2 = reward(&[0.0], 0.0, 100.0, 1.0, 5.0, 120.0, &coeffs());
        assert_eq!(r2, 0.0);
    }

    #[test]
    fn aug_input_layout_and_scaling() {
        let hist = SpeedHistory::new(20.0);
        let obs = build_obs(&hist);
        let ctx = AugContext {
            miles: 2.5,
            gallons: 0.25,
            horizon_decisions: 50,
            chunk_ident: 42,
            progress_space: 0.3,
            progress_time: 0.7,
        };
        let aug = build_aug_input(&obs, &ctx);
        assert_eq!(&aug[..OBS_DIM], obs.raw());
        assert!((aug[14] - 0.5).abs() < 1e-15);
        assert!((aug[15] - 0.25).abs() < 1e-15);
        assert!((aug[16] - 0.5).abs() < 1e-15);
        assert_eq!(aug[17], chunk_id_signal(42));
        assert!((aug[18] - 0.3).abs() < 1e-15);
        assert!((aug[19] - 0.7).abs() < 1e-15);
        assert!(aug.iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn aug_input_clamps_runaway_totals() {
        let hist = SpeedHistory::new(20.0);
        let obs = build_obs(&hist);
        let ctx = AugContext {
            miles: 99.0,
            gallons: 99.0,
            horizon_decisions: 5000,
            chunk_ident: 0,
            progress_space: 2.0,
            progress_time: -0.5,
        };
        let aug = build_aug_input(&obs, &ctx);
        assert_eq!(aug[14], 1.0);
        assert_eq!(aug[15], 1.0);
        assert_eq!(aug[16], 1.0);
        assert_eq!(aug[18], 1.0);
        assert_eq!(aug[19], 0.0);
    }

    #[test]
    fn chunk_signal_is_bounded_and_spread() {
        let a = chunk_id_signal(1);
        let b = chunk_id_signal(2);
        assert!((-1.0..=1.0).contains(&a) && (-1.0..=1.0).contains(&b));
        assert!((a - b).abs() > 1e-3, "nearby idents should hash apart");
        assert_eq!(a, chunk_id_signal(1));
    }

    #[test]
    fn batch_return_bookkeeping() {
        let mk = |rews: &[f64]| EpisodeRollout {
            transitions: rews
                .iter()
                .map(|&r| Transition {
                    obs: [0.0; OBS_DIM],
                    aug: [0.0; AUG_OBS_DIM],
                    z: 0.0,
                    action: 0.0,
                    log_prob: 0.0,
                    reward: r,
                    value: 0.0,
                    done: false,
                })
                .collect(),
            bootstrap_value: 0.0,
        };
        let batch = RolloutBatch {
            episodes: vec![mk(&[1.0, 2.0]), mk(&[3.0, 4.0, 5.0])],
        };
        assert_eq!(batch.num_transitions(), 5);
        assert!((batch.mean_episode_return() - 7.5).abs() < 1e-15);
        let flat = batch.flatten_with_gae(0.999, 0.99).unwrap();
        assert_eq!(flat.len(), 5);
    }

    fn build_obs(hist: &SpeedHistory) -> Observation {
        crate::control::build_observation(20.0, hist, Some((22.0, 40.0)), None)
    }
}
