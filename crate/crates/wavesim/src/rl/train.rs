//! The outer training loop: sample short leader chunks, roll the stochastic
//! policy through them, estimate advantages, and take clipped-surrogate
//! steps. For a fixed config the whole run is reproducible to the bit —
//! episode plans and seeds are drawn sequentially up front, so parallel
//! rollout collection returns exactly what a sequential pass would.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::SimConfig;
use crate::control::{act, ActMode, Observation, PolicyParameters};
use crate::data::{sample_chunk, LeaderTrajectory, TrajectoryChunk};
use crate::energy::METERS_PER_MILE;
use crate::error::{Result, SimError};
use crate::rl::ppo::{normalize_advantages, ppo_backward, PpoOptimizer};
use crate::rl::{build_aug_input, reward, AugContext, EpisodeRollout, RolloutBatch, Transition};
use crate::sim::{Episode, EpisodeOptions};
use crate::vehicle::VehicleKind;

use super::splitmix64;

/// One training episode: the configured platoon chasing a replayed leader
/// chunk, with exactly one controlled vehicle and no warm-up gating, lane
/// changes, or route guidance. Collisions end the episode (a true
/// termination) rather than faulting the run — an exploring policy causes
/// them routinely, and aborting training on the first unlucky sample would
/// make every long run a lottery.
pub struct TrainEnv {
    cfg: SimConfig,
    ep: Episode,
    av_id: u32,
    /// The controlled vehicle and everything behind it, in platoon order.
    tail_ids: Vec<u32>,
    chunk_ident: u64,
    chunk_total_m: f64,
    total_steps: usize,
    horizon: usize,
    decisions: usize,
}

/// What one decision window produced.
#[derive(Debug, Clone, Copy)]
pub struct DecisionOutcome {
    pub reward: f64,
    /// Post-wrapper command from the window's first simulation step — the
    /// value the comfort penalty charges.
    pub a_out: f64,
    /// Simulation steps actually integrated (short of the window on a
    /// terminating collision).
    pub sim_steps: usize,
    /// A follower chain collapsed this window: the episode truly ends here,
    /// with no bootstrap. The wrapper keeps the controlled vehicle off its
    /// own leader, but an exploring policy that parks in moving traffic can
    /// still collapse the floor-limited humans behind it.
    pub terminated: bool,
}

impl TrainEnv {
    pub fn new(cfg: &SimConfig, chunk: &TrajectoryChunk, seed: u64) -> Result<Self> {
        let kinds = cfg.platoon_layout.kinds();
        let n_avs = kinds.iter().filter(|k| **k == VehicleKind::Av).count();
        if n_avs != 1 {
            return Err(SimError::InvalidConfig {
                field: "platoon_layout".into(),
                value: cfg.platoon_layout.to_string(),
                reason: format!("training needs exactly one controlled vehicle, found {n_avs}"),
            });
        }
        let (traj, _) = LeaderTrajectory::from_speeds(
            format!("{}+{}", chunk.traj_id, chunk.start),
            chunk.speeds.clone(),
        )?;
        let chunk_total_m = traj.total_distance();
        let total_steps = traj.len() - 1;
        let opts = EpisodeOptions {
            warmup_gating: false,
            seed,
            ..EpisodeOptions::default()
        };
        let ep = Episode::new(cfg, traj, kinds, opts)?;
        let av_id = ep.av_ids()[0];
        let tail_ids: Vec<u32> = ep
            .vehicles()
            .iter()
            .skip_while(|v| v.id != av_id)
            .map(|v| v.id)
            .collect();
        let repeat = cfg.action_repeat as usize;
        Ok(TrainEnv {
            cfg: cfg.clone(),
            ep,
            av_id,
            tail_ids,
            chunk_ident: chunk.ident(),
            chunk_total_m,
            total_steps,
            horizon: total_steps.div_ceil(repeat),
            decisions: 0,
        })
    }

    /// Decisions per episode at the configured action repeat.
    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn decisions_taken(&self) -> usize {
        self.decisions
    }

    pub fn is_done(&self) -> bool {
        self.ep.step_count() >= self.total_steps
    }

    /// Policy observation at the current state.
    pub fn observation(&self) -> Observation {
        self.ep.observe(0)
    }

    /// Episode-level context for the value network's extra inputs.
    pub fn aug_context(&self) -> AugContext {
        let dist = self.ep.vehicle_distance_m(self.av_id);
        AugContext {
            miles: dist / METERS_PER_MILE,
            gallons: self.ep.vehicle_fuel_gal(self.av_id),
            horizon_decisions: self.horizon,
            chunk_ident: self.chunk_ident,
            progress_space: if self.chunk_total_m > 0.0 {
                (dist / self.chunk_total_m).clamp(0.0, 1.0)
            } else {
                0.0
            },
            progress_time: self.decisions as f64 / self.horizon as f64,
        }
    }

    /// Hold `raw` for one decision window and integrate through it.
    ///
    /// The comfort penalty charges the wrapper's output on the window's
    /// first step; the gap terms read the end-of-window state; the energy
    /// term averages each tail vehicle's fuel rate over the window via its
    /// fuel-book delta. A collision anywhere in the window ends the episode
    /// (`terminated` set, fuel averaged over the completed portion); every
    /// other simulator fault propagates.
    pub fn step_decision(&mut self, raw: f64) -> Result<DecisionOutcome> {
        assert!(!self.is_done(), "episode already ran its full horizon");
        let fuel_before: Vec<f64> = self
            .tail_ids
            .iter()
            .map(|&id| self.ep.vehicle_fuel_gal(id))
            .collect();
        self.ep.set_raw_action(0, raw);
        let window = (self.total_steps - self.ep.step_count()).min(self.cfg.action_repeat as usize);
        let mut completed = 0usize;
        let mut terminated = false;
        while completed < window && !terminated {
            match self.ep.sim_step() {
                Ok(()) => completed += 1,
                Err(SimError::Collision { .. }) => terminated = true,
                Err(e) => return Err(e),
            }
        }
        // The wrapper decision is staged before integration, so the command
        // exists even when the very first step of the window collides.
        let a_out = self
            .ep
            .last_wrap(0)
            .expect("controlled vehicle is active from step one")
            .wrapped_accel;
        let energies: Vec<f64> = if completed == 0 {
            vec![0.0; self.tail_ids.len()]
        } else {
            let span = completed as f64 * self.cfg.dt;
            self.tail_ids
                .iter()
                .zip(&fuel_before)
                .map(|(&id, &before)| (self.ep.vehicle_fuel_gal(id) - before) / span)
                .collect()
        };
        let snap = self.ep.av_snapshot(0);
        self.decisions += 1;
        Ok(DecisionOutcome {
            reward: reward(
                &energies,
                a_out,
                snap.h,
                snap.v_av,
                snap.h_min,
                snap.h_max,
                &self.cfg.reward,
            ),
            a_out,
            sim_steps: completed,
            terminated,
        })
    }
}

/// Roll the stochastic policy through one chunk episode. A collision ends
/// the episode early with a true termination (no bootstrap); a horizon cut
/// bootstraps through the value estimate of the post-episode state.
fn collect_episode(
    cfg: &SimConfig,
    params: &PolicyParameters,
    chunk: &TrajectoryChunk,
    seed: u64,
) -> Result<EpisodeRollout> {
    let mut env = TrainEnv::new(cfg, chunk, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ 0x706f_6c69));
    let mut transitions = Vec::with_capacity(env.horizon());
    while !env.is_done() {
        let obs = env.observation();
        let aug = build_aug_input(&obs, &env.aug_context());
        let sample = act(params, &obs, ActMode::Stochastic, &mut rng, cfg.accel_bounds)?;
        let value = params.value.forward_checked(&aug, "value")?[0];
        let out = env.step_decision(sample.action)?;
        transitions.push(Transition {
            obs: *obs.raw(),
            aug,
            z: sample.z,
            action: sample.action,
            log_prob: sample.log_prob,
            reward: out.reward,
            value,
            done: out.terminated,
        });
        if out.terminated {
            return Ok(EpisodeRollout {
                transitions,
                bootstrap_value: 0.0,
            });
        }
    }
    let obs = env.observation();
    let aug = build_aug_input(&obs, &env.aug_context());
    let bootstrap_value = params.value.forward_checked(&aug, "value")?[0];
    Ok(EpisodeRollout {
        transitions,
        bootstrap_value,
    })
}

struct EpisodePlan {
    chunk: TrajectoryChunk,
    seed: u64,
}

/// Draw an iteration's episode plans sequentially so results do not depend
/// on how collection is parallelized.
fn plan_episodes(
    trajs: &[LeaderTrajectory],
    count: usize,
    chunk_len: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<EpisodePlan>> {
    let mut plans = Vec::with_capacity(count);
    for _ in 0..count {
        let traj = &trajs[rng.random_range(0..trajs.len())];
        let chunk = sample_chunk(traj, chunk_len, rng)?;
        plans.push(EpisodePlan {
            chunk,
            seed: rng.random(),
        });
    }
    Ok(plans)
}

fn collect_batch(
    cfg: &SimConfig,
    params: &PolicyParameters,
    plans: &[EpisodePlan],
) -> Result<RolloutBatch> {
    let episodes = plans
        .par_iter()
        .map(|p| collect_episode(cfg, params, &p.chunk, p.seed))
        .collect::<Result<Vec<_>>>()?;
    Ok(RolloutBatch { episodes })
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct IterRow {
    pub iter: u32,
    /// Exact transition count collected this iteration — below the nominal
    /// batch size when episodes terminate early.
    pub transitions: usize,
    pub mean_ep_reward: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub grad_norm: f64,
    /// Wall-clock seconds for the iteration; forced to 0 in strict mode so
    /// logs are byte-identical across machines.
    pub wall_s: f64,
}

/// Output of [`train`].
pub struct TrainResult {
    pub params: PolicyParameters,
    pub rows: Vec<IterRow>,
    pub checkpoints: Vec<PathBuf>,
    pub log_path: PathBuf,
}

pub const PROGRESS_FILE: &str = "progress.csv";
pub const FINAL_CHECKPOINT: &str = "policy_final.bin";

/// Run the full training loop, writing [`PROGRESS_FILE`] and periodic policy
/// checkpoints into `out_dir`. `strict` zeroes the wall-clock column.
pub fn train(
    cfg: &SimConfig,
    trajs: &[LeaderTrajectory],
    out_dir: &Path,
    strict: bool,
    mut on_iter: impl FnMut(&IterRow),
) -> Result<TrainResult> {
    cfg.validate()?;
    if trajs.is_empty() {
        return Err(SimError::Invalid("no training trajectories supplied".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| SimError::io(out_dir, e))?;
    let log_path = out_dir.join(PROGRESS_FILE);
    let mut log = std::io::BufWriter::new(
        std::fs::File::create(&log_path).map_err(|e| SimError::io(&log_path, e))?,
    );
    writeln!(
        log,
        "iter,transitions,mean_ep_reward,policy_loss,value_loss,entropy,grad_norm,wall_s"
    )
    .map_err(|e| SimError::io(&log_path, e))?;

    let t = &cfg.train;
    let horizon = cfg.horizon_env_steps as usize;
    let chunk_len = horizon * cfg.action_repeat as usize + 1;
    let episodes_per_iter = (t.batch_size as usize).div_ceil(horizon);

    let mut init_rng = ChaCha8Rng::seed_from_u64(splitmix64(cfg.seed ^ 0x696e_6974));
    let mut episode_rng = ChaCha8Rng::seed_from_u64(splitmix64(cfg.seed ^ 0x6570_6973));
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(splitmix64(cfg.seed ^ 0x7368_7566));

    let mut params = PolicyParameters::init(&mut init_rng, t.log_std_init, cfg.accel_bounds);
    let mut opt = PpoOptimizer::new(&params, t.lr);
    let mut rows = Vec::with_capacity(t.iterations as usize);
    let mut checkpoints = Vec::new();

    for iter in 1..=t.iterations {
        let t0 = Instant::now();
        let plans = plan_episodes(trajs, episodes_per_iter, chunk_len, &mut episode_rng)?;
        let batch = collect_batch(cfg, &params, &plans)?;
        let mean_ep_reward = batch.mean_episode_return();
        let mut flat = batch.flatten_with_gae(t.gamma, t.gae_lambda)?;
        normalize_advantages(&mut flat.advantages);

        let mut idx: Vec<usize> = (0..flat.len()).collect();
        let mut sums = [0.0f64; 4];
        let mut updates = 0usize;
        for _ in 0..t.epochs_per_iter {
            idx.shuffle(&mut shuffle_rng);
            for mb in idx.chunks(t.minibatch_size as usize) {
                let (grads, stats) = ppo_backward(&params, &flat, mb, t, cfg.accel_bounds)?;
                opt.step(&mut params, &grads);
                sums[0] += stats.losses.policy_loss;
                sums[1] += stats.losses.value_loss;
                sums[2] += stats.losses.entropy;
                sums[3] += stats.grad_norm;
                updates += 1;
            }
        }
        params.validate()?;

        let m = updates.max(1) as f64;
        let row = IterRow {
            iter,
            transitions: flat.len(),
            mean_ep_reward,
            policy_loss: sums[0] / m,
            value_loss: sums[1] / m,
            entropy: sums[2] / m,
            grad_norm: sums[3] / m,
            wall_s: if strict { 0.0 } else { t0.elapsed().as_secs_f64() },
        };
        writeln!(
            log,
            "{},{},{},{},{},{},{},{}",
            row.iter,
            row.transitions,
            row.mean_ep_reward,
            row.policy_loss,
            row.value_loss,
            row.entropy,
            row.grad_norm,
            row.wall_s
        )
        .map_err(|e| SimError::io(&log_path, e))?;
        log.flush().map_err(|e| SimError::io(&log_path, e))?;
        on_iter(&row);
        rows.push(row);

        if iter % t.checkpoint_every == 0 {
            let path = out_dir.join(format!("checkpoint_{iter:04}.bin"));
            params.save_checkpoint(&path)?;
            checkpoints.push(path);
        }
    }
    let final_path = out_dir.join(FINAL_CHECKPOINT);
    params.save_checkpoint(&final_path)?;
    checkpoints.push(final_path);

    Ok(TrainResult {
        params,
        rows,
        checkpoints,
        log_path,
    })
}
