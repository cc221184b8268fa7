//! Episode orchestration: platoon assembly, the fixed-order step loop, and
//! run-level metric accumulation.
//!
//! One simulation step executes, in this order and no other:
//!   1. the leader's end-of-step speed is read from the replayed trajectory;
//!   2. every follower's acceleration is computed from the pre-step snapshot
//!      (humans via the car-following law, controlled vehicles by re-applying
//!      the wrappers to their held raw action);
//!   3. lane-change events fire (when enabled), inserting or removing humans;
//!   4. the whole platoon integrates semi-implicitly;
//!   5. metrics accumulate on the post-step state.

pub mod export;
pub mod matrix;
pub mod reference;

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::SimConfig;
use crate::control::{
    act, build_observation, h_max, h_min, wrap_action, ActMode, Observation, PolicyParameters,
    SpeedHistory, WrapBranch, WrapperDecision,
};
use crate::data::LeaderTrajectory;
use crate::dynamics::{equilibrium_gap, idm_accel};
use crate::energy::{system_mpg, FuelMeter, METERS_PER_MILE};
use crate::error::{Result, SimError};
use crate::lanechange::{apply_lane_changes, LcEvent};
use crate::planner::{build_profile, query, synth_feed, SegmentFeed, TargetSpeedProfile};
use crate::rl::splitmix64;
use crate::vehicle::{TsdRecord, VehicleKind, VehicleState};
use reference::{ReferenceController, ReferenceParams};

/// Controller choice for the run's AVs.
#[derive(Debug, Clone)]
pub enum Policy {
    /// Baseline stub: AVs follow the human car-following law exactly
    /// (no wrapper, no decisions) — the identity comparison policy.
    Idm,
    /// Raw action drawn uniformly from the acceleration bounds each decision.
    Random,
    /// Scripted gap-buffer smoother.
    Reference(ReferenceParams),
    /// Trained policy, evaluated deterministically.
    Checkpoint(Box<PolicyParameters>),
}

impl Policy {
    pub fn label(&self) -> &'static str {
        match self {
            Policy::Idm => "idm",
            Policy::Random => "random",
            Policy::Reference(_) => "reference",
            Policy::Checkpoint(_) => "checkpoint",
        }
    }
}

/// Everything needed to reproduce one evaluation run.
#[derive(Debug, Clone)]
pub struct RunSpec {
    pub traj: LeaderTrajectory,
    /// Followers behind the trajectory leader.
    pub platoon_size: usize,
    /// AV fraction; spacing is `round(1/penetration)` with the first AV
    /// placed after the first full spacing block.
    pub penetration: f64,
    pub lc_enabled: bool,
    pub planner_enabled: bool,
    pub policy: Policy,
    pub seed: u64,
    /// When set, AVs at negative positions behave as humans.
    pub warmup: bool,
    pub record_tsd: bool,
    pub record_gap_traces: bool,
}

impl RunSpec {
    pub fn new(traj: LeaderTrajectory, platoon_size: usize, penetration: f64) -> Self {
        RunSpec {
            traj,
            platoon_size,
            penetration,
            lc_enabled: false,
            planner_enabled: false,
            policy: Policy::Idm,
            seed: 0,
            warmup: true,
            record_tsd: false,
            record_gap_traces: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.platoon_size < 1 {
            return Err(SimError::InvalidConfig {
                field: "platoon_size".into(),
                value: self.platoon_size.to_string(),
                reason: "need at least one follower".into(),
            });
        }
        if !(0.0..=1.0).contains(&self.penetration) {
            return Err(SimError::InvalidConfig {
                field: "penetration".into(),
                value: self.penetration.to_string(),
                reason: "must lie in [0, 1]".into(),
            });
        }
        Ok(())
    }

    /// Platoon composition: the trajectory leader, then followers with AVs
    /// at every `spacing`-th follower slot (1-based).
    pub fn kinds(&self) -> Vec<VehicleKind> {
        let mut kinds = Vec::with_capacity(self.platoon_size + 1);
        kinds.push(VehicleKind::TrajectoryLeader);
        let spacing = if self.penetration > 0.0 {
            ((1.0 / self.penetration).round() as usize).max(1)
        } else {
            usize::MAX
        };
        for i in 1..=self.platoon_size {
            if spacing != usize::MAX && i % spacing == 0 {
                kinds.push(VehicleKind::Av);
            } else {
                kinds.push(VehicleKind::Human);
            }
        }
        kinds
    }

    /// Identifies the run conditions a controller is evaluated under —
    /// everything except the controller itself.
    pub fn comparability_key(&self) -> String {
        format!(
            "{}|n{}|p{}|lc{}|pl{}|s{}",
            self.traj.id,
            self.platoon_size,
            self.penetration,
            self.lc_enabled as u8,
            self.planner_enabled as u8,
            self.seed
        )
    }
}

/// One AV's gap-trace sample (recorded per simulation step, post-warmup).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GapTraceRow {
    pub t: f64,
    pub h: f64,
    pub h_min: f64,
    pub h_max: f64,
    pub branch: WrapBranch,
}

/// Per-vehicle run summary.
#[derive(Debug, Clone, PartialEq)]
pub struct VehicleSummary {
    pub id: u32,
    pub kind: VehicleKind,
    pub distance_m: f64,
    pub fuel_gal: f64,
    pub speed_mean: f64,
    pub speed_std: f64,
    pub fuel_clamp_events: u64,
}

/// Aggregate outcome of a completed (collision-free) run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunMetrics {
    pub steps: usize,
    pub duration_s: f64,
    pub final_vehicle_count: usize,
    pub total_miles: f64,
    pub total_gallons: f64,
    pub system_mpg: f64,
    /// Vehicles/hour crossing the detector position.
    pub throughput_vph: f64,
    /// Always 0 on success; a collision aborts the run with a fault.
    pub collision_count: usize,
    /// Wrapper branch engagements over all AV steps:
    /// [failsafe, gap_close, pass_through].
    pub branch_counts: [u64; 3],
    pub last_follower_id: u32,
    pub per_vehicle: Vec<VehicleSummary>,
    pub comparability_key: String,
}

impl RunMetrics {
    pub fn vehicle(&self, id: u32) -> Option<&VehicleSummary> {
        self.per_vehicle.iter().find(|v| v.id == id)
    }

    pub fn last_follower(&self) -> &VehicleSummary {
        self.vehicle(self.last_follower_id)
            .expect("initial vehicles are never removed")
    }
}

/// Full output of [`run_episode`].
#[derive(Debug, Clone)]
pub struct EpisodeOutcome {
    pub metrics: RunMetrics,
    pub tsd: Vec<TsdRecord>,
    pub gap_traces: Vec<(u32, Vec<GapTraceRow>)>,
    pub lc_events: Vec<LcEvent>,
    pub feeds: Vec<SegmentFeed>,
}

/// Throughput detector position (m); far enough in that warm-up vehicles
/// reach it mid-run.
pub const DETECTOR_X: f64 = 1000.0;

/// Construction-time switches for [`Episode`].
#[derive(Debug, Clone, Copy)]
pub struct EpisodeOptions {
    pub lc_enabled: bool,
    pub planner_enabled: bool,
    /// AVs at negative positions behave as humans.
    pub warmup_gating: bool,
    /// AVs take the human acceleration path entirely (identity baseline).
    pub avs_as_humans: bool,
    pub record_tsd: bool,
    pub record_gap_traces: bool,
    pub seed: u64,
}

impl Default for EpisodeOptions {
    fn default() -> Self {
        EpisodeOptions {
            lc_enabled: false,
            planner_enabled: false,
            warmup_gating: true,
            avs_as_humans: false,
            record_tsd: false,
            record_gap_traces: false,
            seed: 0,
        }
    }
}

/// Live view of one AV and its immediate surroundings at a decision point.
#[derive(Debug, Clone, Copy)]
pub struct AvSnapshot {
    pub v_av: f64,
    pub v_lead: f64,
    pub h: f64,
    pub h_min: f64,
    pub h_max: f64,
    pub position: f64,
    pub planner_target: Option<f64>,
}

#[derive(Debug, Clone)]
struct AvController {
    id: u32,
    history: SpeedHistory,
    held_raw: f64,
    last_wrap: Option<WrapperDecision>,
}

#[derive(Debug, Clone)]
struct VehicleBook {
    kind: VehicleKind,
    distance_m: f64,
    fuel: FuelMeter,
    // Running speed statistics (Welford).
    count: u64,
    mean: f64,
    m2: f64,
}

impl VehicleBook {
    fn new(kind: VehicleKind) -> Self {
        VehicleBook {
            kind,
            distance_m: 0.0,
            fuel: FuelMeter::default(),
            count: 0,
            mean: 0.0,
            m2: 0.0,
        }
    }

    fn push_speed(&mut self, v: f64) {
        self.count += 1;
        let d = v - self.mean;
        self.mean += d / self.count as f64;
        self.m2 += d * (v - self.mean);
    }

    fn speed_std(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            (self.m2 / self.count as f64).sqrt()
        }
    }
}

/// A single running simulation instance.
pub struct Episode {
    cfg: SimConfig,
    traj: LeaderTrajectory,
    opts: EpisodeOptions,
    vehicles: Vec<VehicleState>,
    controllers: Vec<AvController>,
    lc_rng: ChaCha8Rng,
    next_id: u32,
    step: usize,
    profile: Option<TargetSpeedProfile>,
    current_issued_at: f64,
    book: BTreeMap<u32, VehicleBook>,
    branch_counts: [u64; 3],
    crossings: u64,
    tsd: Vec<TsdRecord>,
    gap_traces: BTreeMap<u32, Vec<GapTraceRow>>,
    lc_events: Vec<LcEvent>,
    feeds: Vec<SegmentFeed>,
    last_follower_id: u32,
}

impl Episode {
    /// Assemble the platoon at car-following equilibrium spacing for the
    /// leader's initial speed (capped just below the desired speed, where
    /// the equilibrium gap diverges), rear vehicles at negative positions.
    pub fn new(
        cfg: &SimConfig,
        traj: LeaderTrajectory,
        kinds: &[VehicleKind],
        opts: EpisodeOptions,
    ) -> Result<Self> {
        if kinds.first() != Some(&VehicleKind::TrajectoryLeader)
            || kinds.len() < 2
            || kinds[1..].contains(&VehicleKind::TrajectoryLeader)
        {
            return Err(SimError::Invalid(
                "platoon needs one leading trajectory vehicle followed by at least one follower"
                    .into(),
            ));
        }
        let v0 = traj.speeds[0].clamp(cfg.speed_bounds[0], cfg.speed_bounds[1]);
        let v_eq = v0.min(cfg.idm.v0 - 1.0).max(0.0);
        let spacing = equilibrium_gap(&cfg.idm, v_eq)?;

        let mut vehicles = Vec::with_capacity(kinds.len());
        let mut controllers = Vec::new();
        let mut x = 0.0;
        for (i, kind) in kinds.iter().enumerate() {
            let veh = VehicleState::new(i as u32, *kind, x, v0);
            if *kind == VehicleKind::Av && !opts.avs_as_humans {
                controllers.push(AvController {
                    id: veh.id,
                    history: SpeedHistory::new(v0),
                    held_raw: 0.0,
                    last_wrap: None,
                });
            }
            x -= veh.length + spacing;
            vehicles.push(veh);
        }
        crate::vehicle::recompute_gaps(&mut vehicles);

        let mut book = BTreeMap::new();
        for veh in &vehicles {
            book.insert(veh.id, VehicleBook::new(veh.kind));
        }

        let mut ep = Episode {
            cfg: cfg.clone(),
            opts,
            lc_rng: ChaCha8Rng::seed_from_u64(splitmix64(opts.seed ^ 0x6c63_7267)),
            next_id: kinds.len() as u32,
            step: 0,
            profile: None,
            current_issued_at: f64::NEG_INFINITY,
            book,
            branch_counts: [0; 3],
            crossings: 0,
            tsd: Vec::new(),
            gap_traces: BTreeMap::new(),
            lc_events: Vec::new(),
            feeds: Vec::new(),
            last_follower_id: (kinds.len() - 1) as u32,
            vehicles,
            controllers,
            traj,
        };
        ep.refresh_planner();
        Ok(ep)
    }

    pub fn num_avs(&self) -> usize {
        self.controllers.len()
    }

    pub fn av_ids(&self) -> Vec<u32> {
        self.controllers.iter().map(|c| c.id).collect()
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn elapsed_s(&self) -> f64 {
        self.step as f64 * self.cfg.dt
    }

    pub fn vehicles(&self) -> &[VehicleState] {
        &self.vehicles
    }

    pub fn vehicle_fuel_gal(&self, id: u32) -> f64 {
        self.book.get(&id).map_or(0.0, |b| b.fuel.gallons)
    }

    pub fn vehicle_distance_m(&self, id: u32) -> f64 {
        self.book.get(&id).map_or(0.0, |b| b.distance_m)
    }

    fn av_index(&self, slot: usize) -> usize {
        let id = self.controllers[slot].id;
        self.vehicles
            .iter()
            .position(|v| v.id == id)
            .expect("controlled vehicles are never removed")
    }

    /// Current state around the slot-th AV.
    pub fn av_snapshot(&self, slot: usize) -> AvSnapshot {
        let idx = self.av_index(slot);
        let veh = &self.vehicles[idx];
        let front = &self.vehicles[idx - 1];
        let h = veh.gap.expect("non-leader has a gap");
        AvSnapshot {
            v_av: veh.speed,
            v_lead: front.speed,
            h,
            h_min: h_min(veh.speed, front.speed),
            h_max: h_max(veh.speed),
            position: veh.position,
            planner_target: self.profile.as_ref().map(|p| query(p, veh.position)),
        }
    }

    /// Scaled policy observation for the slot-th AV.
    pub fn observe(&self, slot: usize) -> Observation {
        let idx = self.av_index(slot);
        let veh = &self.vehicles[idx];
        let front = &self.vehicles[idx - 1];
        let profile = self.profile.as_ref().map(|p| (p, veh.position));
        build_observation(
            veh.speed,
            &self.controllers[slot].history,
            Some((front.speed, veh.gap.expect("non-leader has a gap"))),
            profile,
        )
    }

    /// Hold a new raw action for the slot-th AV; the wrappers re-evaluate it
    /// on every simulation step until the next decision.
    pub fn set_raw_action(&mut self, slot: usize, raw: f64) {
        self.controllers[slot].held_raw = raw;
    }

    /// Wrapper decision from the most recent step this AV was controlled.
    pub fn last_wrap(&self, slot: usize) -> Option<WrapperDecision> {
        self.controllers[slot].last_wrap
    }

    fn refresh_planner(&mut self) {
        if !self.opts.planner_enabled {
            return;
        }
        let t_now = self.traj.start_t + self.elapsed_s();
        let upd = self.cfg.planner.update_interval;
        let issued = (t_now / upd).floor() * upd;
        if issued != self.current_issued_at {
            let feed = synth_feed(&self.traj, t_now, &self.cfg.planner);
            self.profile = build_profile(&feed, self.cfg.planner.bandwidth).ok();
            self.current_issued_at = issued;
            self.feeds.push(feed);
        }
    }

    /// Advance one `dt` step through the five fixed phases.
    pub fn sim_step(&mut self) -> Result<()> {
        let dt = self.cfg.dt;
        let k_next = self.step + 1;
        // (1) Leader end-of-step speed from replay (holds its last sample).
        let leader_v = self.traj.speed_at(k_next);

        // (2) Accelerations from the pre-step snapshot, staged on each
        // vehicle so lane changes can reshape the platoon afterwards.
        let n = self.vehicles.len();
        let mut staged = vec![0.0; n];
        for i in 1..n {
            let veh = &self.vehicles[i];
            let front = &self.vehicles[i - 1];
            let gap = veh.gap.expect("non-leader has a gap");
            let human_accel = || idm_accel(&self.cfg.idm, veh.speed, front.speed, gap);
            staged[i] = match veh.kind {
                VehicleKind::Human | VehicleKind::TrajectoryLeader => human_accel(),
                VehicleKind::Av => {
                    if self.opts.avs_as_humans {
                        human_accel()
                    } else if self.opts.warmup_gating && veh.position < 0.0 {
                        human_accel()
                    } else {
                        let slot = self
                            .controllers
                            .iter()
                            .position(|c| c.id == veh.id)
                            .expect("every active AV has a controller");
                        let wd = wrap_action(
                            self.controllers[slot].held_raw,
                            veh.speed,
                            front.speed,
                            gap,
                            dt,
                            self.cfg.accel_bounds,
                            self.cfg.speed_bounds,
                        );
                        self.branch_counts[match wd.branch {
                            WrapBranch::Failsafe => 0,
                            WrapBranch::GapClose => 1,
                            WrapBranch::PassThrough => 2,
                        }] += 1;
                        if self.opts.record_gap_traces {
                            let t = self.elapsed_s();
                            self.gap_traces.entry(veh.id).or_default().push(GapTraceRow {
                                t,
                                h: gap,
                                h_min: wd.h_min,
                                h_max: wd.h_max,
                                branch: wd.branch,
                            });
                        }
                        self.controllers[slot].last_wrap = Some(wd);
                        wd.applied_accel
                    }
                }
            };
        }
        for (veh, a) in self.vehicles.iter_mut().zip(&staged) {
            veh.accel = *a;
        }

        // (3) Lane changes reshape the platoon (humans only).
        if self.opts.lc_enabled {
            let events = apply_lane_changes(
                &mut self.vehicles,
                &self.cfg.lc,
                &mut self.lc_rng,
                k_next as u64,
                &mut self.next_id,
            );
            self.lc_events.extend(events);
        }

        // (4) Integration.
        let accels: Vec<f64> = self.vehicles.iter().map(|v| v.accel).collect();
        crate::dynamics::step_platoon(
            &mut self.vehicles,
            &accels,
            dt,
            self.cfg.speed_bounds,
            Some(leader_v),
            k_next as u64,
        )?;
        self.step = k_next;

        // (5) Metrics on the post-step state.
        let t_new = self.elapsed_s();
        for veh in &self.vehicles {
            let book = self
                .book
                .entry(veh.id)
                .or_insert_with(|| VehicleBook::new(veh.kind));
            book.fuel.tick(&self.cfg.energy, veh.speed, veh.accel, dt);
            let dx = veh.speed * dt;
            let prev_x = veh.position - dx;
            book.distance_m += dx;
            if prev_x < DETECTOR_X && veh.position >= DETECTOR_X {
                self.crossings += 1;
            }
            book.push_speed(veh.speed);
            if self.opts.record_tsd {
                self.tsd.push(TsdRecord {
                    vehicle_id: veh.id,
                    t: t_new,
                    x: veh.position,
                    v: veh.speed,
                });
            }
        }
        for ctrl in &mut self.controllers {
            let id = ctrl.id;
            let v = self
                .vehicles
                .iter()
                .find(|veh| veh.id == id)
                .expect("controlled vehicles are never removed")
                .speed;
            ctrl.history.push(v);
        }

        self.refresh_planner();
        Ok(())
    }

    /// Close out the run and produce metrics.
    pub fn finish(self, comparability_key: String) -> EpisodeOutcome {
        let duration_s = self.step as f64 * self.cfg.dt;
        let mut per_vehicle = Vec::with_capacity(self.book.len());
        let mut distances = Vec::with_capacity(self.book.len());
        let mut fuels = Vec::with_capacity(self.book.len());
        for (id, b) in &self.book {
            per_vehicle.push(VehicleSummary {
                id: *id,
                kind: b.kind,
                distance_m: b.distance_m,
                fuel_gal: b.fuel.gallons,
                speed_mean: b.mean,
                speed_std: b.speed_std(),
                fuel_clamp_events: b.fuel.clamp_events,
            });
            distances.push(b.distance_m);
            fuels.push(b.fuel.gallons);
        }
        let metrics = RunMetrics {
            steps: self.step,
            duration_s,
            final_vehicle_count: self.vehicles.len(),
            total_miles: distances.iter().sum::<f64>() / METERS_PER_MILE,
            total_gallons: fuels.iter().sum(),
            system_mpg: system_mpg(&distances, &fuels).unwrap_or(0.0),
            throughput_vph: if duration_s > 0.0 {
                self.crossings as f64 * 3600.0 / duration_s
            } else {
                0.0
            },
            collision_count: 0,
            branch_counts: self.branch_counts,
            last_follower_id: self.last_follower_id,
            per_vehicle,
            comparability_key,
        };
        EpisodeOutcome {
            metrics,
            tsd: self.tsd,
            gap_traces: self.gap_traces.into_iter().collect(),
            lc_events: self.lc_events,
            feeds: self.feeds,
        }
    }
}

/// Run one full-trajectory evaluation episode.
pub fn run_episode(cfg: &SimConfig, spec: &RunSpec) -> Result<EpisodeOutcome> {
    spec.validate()?;
    let kinds = spec.kinds();
    let opts = EpisodeOptions {
        lc_enabled: spec.lc_enabled,
        planner_enabled: spec.planner_enabled,
        warmup_gating: spec.warmup,
        avs_as_humans: matches!(spec.policy, Policy::Idm),
        record_tsd: spec.record_tsd,
        record_gap_traces: spec.record_gap_traces,
        seed: spec.seed,
    };
    let mut ep = Episode::new(cfg, spec.traj.clone(), &kinds, opts)?;
    let mut action_rng = ChaCha8Rng::seed_from_u64(splitmix64(spec.seed ^ 0x6163_7469_6f6e));
    let mut refs: Vec<ReferenceController> = match &spec.policy {
        Policy::Reference(p) => (0..ep.num_avs()).map(|_| ReferenceController::new(*p)).collect(),
        _ => Vec::new(),
    };
    let decision_dt = cfg.dt * cfg.action_repeat as f64;
    let steps = spec.traj.len() - 1;
    let [a_lo, a_hi] = cfg.accel_bounds;

    for k in 0..steps {
        if k % cfg.action_repeat as usize == 0 {
            for slot in 0..ep.num_avs() {
                let raw = match &spec.policy {
                    Policy::Idm => 0.0, // unreachable: no controllers exist
                    Policy::Random => action_rng.random_range(a_lo..=a_hi),
                    Policy::Reference(_) => {
                        let snap = ep.av_snapshot(slot);
                        refs[slot].decide(&snap, decision_dt, cfg.accel_bounds)
                    }
                    Policy::Checkpoint(params) => {
                        let obs = ep.observe(slot);
                        act(params, &obs, ActMode::Deterministic, &mut action_rng, cfg.accel_bounds)?
                            .action
                    }
                };
                ep.set_raw_action(slot, raw);
            }
        }
        ep.sim_step()?;
    }
    Ok(ep.finish(spec.comparability_key()))
}
