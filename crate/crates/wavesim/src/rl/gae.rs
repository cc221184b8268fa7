//! Generalized advantage estimation over one episode.

use crate::error::{Result, SimError};

/// Compute advantages and returns for one episode.
///
/// `values` must hold one more entry than `rewards`: the trailing entry is
/// the bootstrap value of the post-episode state (pass 0 for a true
/// termination; the horizon-truncation caller passes a value estimate).
/// `dones[t]` marks a genuine termination after step `t`, masking the next
/// value out of the recursion. Returns are `advantage + value`.
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    gamma: f64,
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let t_len = rewards.len();
    if values.len() != t_len + 1 || dones.len() != t_len {
        return Err(SimError::Invalid(format!(
            "advantage inputs misaligned: {} rewards, {} values, {} dones",
            t_len,
            values.len(),
            dones.len()
        )));
    }
    let mut advantages = vec![0.0; t_len];
    let mut returns = vec![0.0; t_len];
    let mut acc = 0.0;
    for t in (0..t_len).rev() {
        let mask = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * values[t + 1] * mask - values[t];
        acc = delta + gamma * lambda * mask * acc;
        advantages[t] = acc;
        returns[t] = acc + values[t];
    }
    Ok((advantages, returns))
}

/// O(T²) reference implementation: advantage_t = Σ_k (γλ)^k δ_{t+k}, the
/// sum cut at the first true termination.
pub fn compute_gae_brute_force(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    gamma: f64,
    lambda: f64,
) -> (Vec<f64>, Vec<f64>) {
    let t_len = rewards.len();
    assert_eq!(values.len(), t_len + 1);
    assert_eq!(dones.len(), t_len);
    let delta: Vec<f64> = (0..t_len)
        .map(|t| {
            let mask = if dones[t] { 0.0 } else { 1.0 };
            rewards[t] + gamma * values[t + 1] * mask - values[t]
        })
        .collect();
    let mut advantages = vec![0.0; t_len];
    let mut returns = vec![0.0; t_len];
    for t in 0..t_len {
        let mut coef = 1.0;
        let mut acc = 0.0;
        for k in t..t_len {
            acc += coef * delta[k];
            if dones[k] {
                break;
            }
            coef *= gamma * lambda;
        }
        advantages[t] = acc;
        returns[t] = acc + values[t];
    }
    (advantages, returns)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn lambda_zero_collapses_to_one_step_td() {
        let rewards = [1.0, -0.5, 2.0];
        let values = [0.3, 0.1, -0.2, 0.4];
        let dones = [false, false, false];
        let gamma = 0.99;
        let (adv, ret) = compute_gae(&rewards, &values, &dones, gamma, 0.0).unwrap();
        for t in 0..3 {
            let want = rewards[t] + gamma * values[t + 1] - values[t];
            assert!((adv[t] - want).abs() < 1e-15);
            assert!((ret[t] - (want + values[t])).abs() < 1e-15);
        }
    }

    #[test]
    fn lambda_one_with_terminal_is_reward_to_go() {
        let rewards = [1.0, 2.0, 3.0, 4.0];
        let values = [0.5, -0.5, 0.25, 1.0, 9.9]; // bootstrap masked by done
        let dones = [false, false, false, true];
        let gamma = 0.9;
        let (adv, _) = compute_gae(&rewards, &values, &dones, gamma, 1.0).unwrap();
        for t in 0..4 {
            let mut rtg = 0.0;
            let mut g = 1.0;
            for k in t..4 {
                rtg += g * rewards[k];
                g *= gamma;
            }
            assert!((adv[t] - (rtg - values[t])).abs() < 1e-12, "t={t}");
        }
    }

    #[test]
    fn truncation_bootstraps_through_the_last_value() {
        let rewards = [0.0];
        let values = [0.0, 10.0];
        let (adv, ret) = compute_gae(&rewards, &values, &[false], 0.5, 1.0).unwrap();
        assert!((adv[0] - 5.0).abs() < 1e-15);
        assert!((ret[0] - 5.0).abs() < 1e-15);
    }

    #[test]
    fn recursion_matches_brute_force_on_random_episodes() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..300 {
            let t_len = rng.random_range(1..60);
            let rewards: Vec<f64> = (0..t_len).map(|_| rng.random_range(-2.0..2.0)).collect();
            let values: Vec<f64> = (0..=t_len).map(|_| rng.random_range(-2.0..2.0)).collect();
            let dones: Vec<bool> = (0..t_len).map(|_| rng.random::<f64>() < 0.1).collect();
            let gamma = rng.random_range(0.9..1.0);
            let lambda = rng.random_range(0.8..1.0);
            let (adv, ret) = compute_gae(&rewards, &values, &dones, gamma, lambda).unwrap();
            let (adv_bf, ret_bf) =
                compute_gae_brute_force(&rewards, &values, &dones, gamma, lambda);
            for t in 0..t_len {
                assert!((adv[t] - adv_bf[t]).abs() <= 1e-12, "adv t={t}");
                assert!((ret[t] - ret_bf[t]).abs() <= 1e-12, "ret t={t}");
            }
        }
    }

    #[test]
    fn misaligned_inputs_error() {
        assert!(compute_gae(&[1.0], &[0.0], &[false], 0.9, 0.9).is_err());
        assert!(compute_gae(&[1.0], &[0.0, 0.0], &[], 0.9, 0.9).is_err());
    }
}
