//! Evaluation grids: every (trajectory × penetration × lane-change × seed)
//! cell runs the candidate controller against an identically-conditioned
//! car-following baseline and reports the paired deltas.

use rayon::prelude::*;

use crate::config::SimConfig;
use crate::energy::{mpg_improvement, MpgSample};
use crate::error::Result;

use super::{run_episode, Policy, RunSpec};
use crate::data::LeaderTrajectory;

/// The full evaluation request.
#[derive(Debug, Clone)]
pub struct EvalGrid {
    pub trajectories: Vec<LeaderTrajectory>,
    pub penetrations: Vec<f64>,
    pub lc_options: Vec<bool>,
    pub seeds: Vec<u64>,
    pub platoon_size: usize,
    pub planner_enabled: bool,
    pub policy: Policy,
}

/// One grid cell: candidate controller vs baseline under identical
/// conditions.
#[derive(Debug, Clone, PartialEq)]
pub struct CellResult {
    pub run_id: String,
    pub traj_id: String,
    pub penetration: f64,
    pub lc_enabled: bool,
    pub seed: u64,
    pub system_mpg: f64,
    pub baseline_mpg: f64,
    pub mpg_improvement_pct: f64,
    pub throughput_vph: f64,
    pub baseline_throughput_vph: f64,
    pub throughput_delta_pct: f64,
    pub last_follower_speed_std: f64,
    pub baseline_last_follower_speed_std: f64,
    pub collisions: usize,
}

/// Per-condition aggregate over seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub traj_id: String,
    pub penetration: f64,
    pub lc_enabled: bool,
    pub n_seeds: usize,
    pub mean_improvement_pct: f64,
    /// Population standard deviation over seeds.
    pub std_improvement_pct: f64,
    pub mean_throughput_delta_pct: f64,
}

fn run_cell(cfg: &SimConfig, grid: &EvalGrid, traj: &LeaderTrajectory, penetration: f64, lc: bool, seed: u64) -> Result<CellResult> {
    let mut spec = RunSpec::new(traj.clone(), grid.platoon_size, penetration);
    spec.lc_enabled = lc;
    spec.planner_enabled = grid.planner_enabled;
    spec.seed = seed;
    spec.policy = grid.policy.clone();
    let controlled = run_episode(cfg, &spec)?.metrics;

    let mut base_spec = spec.clone();
    base_spec.policy = Policy::Idm;
    let baseline = run_episode(cfg, &base_spec)?.metrics;

    let improvement = mpg_improvement(
        &MpgSample {
            comparability_key: controlled.comparability_key.clone(),
            mpg: controlled.system_mpg,
        },
        &MpgSample {
            comparability_key: baseline.comparability_key.clone(),
            mpg: baseline.system_mpg,
        },
    )?;
    let throughput_delta_pct = if baseline.throughput_vph > 0.0 {
        100.0 * (controlled.throughput_vph / baseline.throughput_vph - 1.0)
    } else {
        0.0
    };
    Ok(CellResult {
        run_id: format!("{}_p{}_lc{}_s{}", traj.id, penetration, lc as u8, seed),
        traj_id: traj.id.clone(),
        penetration,
        lc_enabled: lc,
        seed,
        system_mpg: controlled.system_mpg,
        baseline_mpg: baseline.system_mpg,
        mpg_improvement_pct: improvement,
        throughput_vph: controlled.throughput_vph,
        baseline_throughput_vph: baseline.throughput_vph,
        throughput_delta_pct,
        last_follower_speed_std: controlled.last_follower().speed_std,
        baseline_last_follower_speed_std: baseline.last_follower().speed_std,
        collisions: controlled.collision_count,
    })
}

/// Run every cell of the grid (in parallel, deterministically ordered).
pub fn evaluate_matrix(cfg: &SimConfig, grid: &EvalGrid) -> Result<Vec<CellResult>> {
    let mut cells = Vec::new();
    for traj in &grid.trajectories {
        for &pen in &grid.penetrations {
            for &lc in &grid.lc_options {
                for &seed in &grid.seeds {
                    cells.push((traj, pen, lc, seed));
                }
            }
        }
    }
    cells
        .par_iter()
        .map(|(traj, pen, lc, seed)| run_cell(cfg, grid, traj, *pen, *lc, *seed))
        .collect()
}

/// Aggregate cells over seeds, preserving first-seen condition order.
pub fn summarize(cells: &[CellResult]) -> Vec<SummaryRow> {
    let mut order: Vec<(String, f64, bool)> = Vec::new();
    for c in cells {
        let key = (c.traj_id.clone(), c.penetration, c.lc_enabled);
        if !order.contains(&key) {
            order.push(key);
        }
    }
    order
        .into_iter()
        .map(|(traj_id, pen, lc)| {
            let group: Vec<&CellResult> = cells
                .iter()
                .filter(|c| c.traj_id == traj_id && c.penetration == pen && c.lc_enabled == lc)
                .collect();
            let n = group.len() as f64;
            let mean = group.iter().map(|c| c.mpg_improvement_pct).sum::<f64>() / n;
            let var = group
                .iter()
                .map(|c| (c.mpg_improvement_pct - mean).powi(2))
                .sum::<f64>()
                / n;
            let mean_thru = group.iter().map(|c| c.throughput_delta_pct).sum::<f64>() / n;
            SummaryRow {
                traj_id,
                penetration: pen,
                lc_enabled: lc,
                n_seeds: group.len(),
                mean_improvement_pct: mean,
                std_improvement_pct: var.sqrt(),
                mean_throughput_delta_pct: mean_thru,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{corpus, generate_synthetic_wave};
    use crate::sim::reference::ReferenceParams;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn traj(i: usize) -> LeaderTrajectory {
        let (spec, seed) = corpus().remove(i);
        generate_synthetic_wave(&spec, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn identity_policy_reports_exactly_zero_improvement() {
        let grid = EvalGrid {
            trajectories: vec![traj(4), traj(5)],
            penetrations: vec![0.1, 0.25],
            lc_options: vec![false],
            seeds: vec![1],
            platoon_size: 8,
            planner_enabled: false,
            policy: Policy::Idm,
        };
        let cells = evaluate_matrix(&SimConfig::default(), &grid).unwrap();
        assert_eq!(cells.len(), 4);
        for c in &cells {
            assert_eq!(c.mpg_improvement_pct, 0.0, "{}", c.run_id);
            assert_eq!(c.throughput_delta_pct, 0.0);
            assert_eq!(c.system_mpg, c.baseline_mpg);
            assert_eq!(c.collisions, 0);
        }
    }

    #[test]
    fn grid_order_is_trajectory_penetration_lc_seed() {
        let grid = EvalGrid {
            trajectories: vec![traj(4)],
            penetrations: vec![0.1, 0.2],
            lc_options: vec![false, true],
            seeds: vec![5, 6],
            platoon_size: 4,
            planner_enabled: false,
            policy: Policy::Idm,
        };
        let cells = evaluate_matrix(&SimConfig::default(), &grid).unwrap();
        let ids: Vec<&str> = cells.iter().map(|c| c.run_id.as_str()).collect();
        assert_eq!(
            ids,
            vec![
                "eval_freeflow_p0.1_lc0_s5",
                "eval_freeflow_p0.1_lc0_s6",
                "eval_freeflow_p0.1_lc1_s5",
                "eval_freeflow_p0.1_lc1_s6",
                "eval_freeflow_p0.2_lc0_s5",
                "eval_freeflow_p0.2_lc0_s6",
                "eval_freeflow_p0.2_lc1_s5",
                "eval_freeflow_p0.2_lc1_s6",
            ]
        );
    }

    #[test]
    fn free_flow_gains_less_than_stop_and_go() {
        let grid = EvalGrid {
            trajectories: vec![traj(4), traj(7)],
            penetrations: vec![0.04],
            lc_options: vec![false],
            seeds: vec![2],
            platoon_size: 50,
            planner_enabled: false,
            policy: Policy::Reference(ReferenceParams::default()),
        };
        let cells = evaluate_matrix(&SimConfig::default(), &grid).unwrap();
        let freeflow = &cells[0];
        let waves = &cells[1];
        assert!(
            freeflow.mpg_improvement_pct < waves.mpg_improvement_pct,
            "free-flow {} vs waves {}",
            freeflow.mpg_improvement_pct,
            waves.mpg_improvement_pct
        );
    }

    #[test]
    fn summaries_average_over_seeds() {
        let mk = |seed, imp, thru| CellResult {
            run_id: format!("t_s{seed}"),
            traj_id: "t".into(),
            penetration: 0.1,
            lc_enabled: false,
            seed,
            system_mpg: 30.0,
            baseline_mpg: 28.0,
            mpg_improvement_pct: imp,
            throughput_vph: 1000.0,
            baseline_throughput_vph: 1000.0,
            throughput_delta_pct: thru,
            last_follower_speed_std: 1.0,
            baseline_last_follower_speed_std: 2.0,
            collisions: 0,
        };
        let rows = summarize(&[mk(1, 4.0, -1.0), mk(2, 6.0, -3.0)]);
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].n_seeds, 2);
        assert!((rows[0].mean_improvement_pct - 5.0).abs() < 1e-12);
        assert!((rows[0].std_improvement_pct - 1.0).abs() < 1e-12);
        assert!((rows[0].mean_throughput_delta_pct - (-2.0)).abs() < 1e-12);
    }
}
