//! Probabilistic cut-in/cut-out events for evaluation runs.
//!
//! Cut-in probability is a piecewise second-order polynomial in (gap, leader
//! speed); cut-out probability is piecewise second-order in leader speed.
//! The committed default coefficients are plausible hand-picked values — NOT
//! calibrated against any dataset — and the full coefficient set is
//! config-loadable for substitution.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dynamics::ACCEL_FLOOR;
use crate::error::{Result, SimError};
use crate::vehicle::{recompute_gaps, VehicleKind, VehicleState};

/// Extra rear clearance demanded beyond the pure braking distance when
/// judging whether an insertion leaves the follower a physically avoidable
/// situation, m.
const KINEMATIC_MARGIN: f64 = 2.0;

/// Reaction allowance for the new follower, s. Car-following control ramps
/// its braking with the closing gap rather than slamming the floor the
/// instant a vehicle appears, so the rear clearance adds one second of
/// travel at the follower's speed.
const REACTION_S: f64 = 1.0;

/// Front clearance per unit of inserted speed, s. A new vehicle must appear
/// at roughly its own desired headway: dropped closer, its first
/// car-following response is a floor-rate brake that injects a fresh shock
/// into the platoon.
const INSERT_HEADWAY_S: f64 = 1.0;

/// One piece of a bivariate quadratic over (h, v): coefficients order
/// `[1, h, v, h², h·v, v²]`, active for `h ∈ [lo, hi)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Poly2Piece {
    pub lo: f64,
    pub hi: f64,
    pub c: [f64; 6],
}

/// One piece of a univariate quadratic over v: coefficients `[1, v, v²]`,
/// active for `v ∈ [lo, hi)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Poly1Piece {
    pub lo: f64,
    pub hi: f64,
    pub c: [f64; 3],
}

/// Lane-change model parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LcParams {
    /// Cut-in probability pieces, keyed on the ego's gap h.
    pub p_in_pieces: Vec<Poly2Piece>,
    /// Cut-out probability pieces, keyed on the ego's leader speed.
    pub p_out_pieces: Vec<Poly1Piece>,
    /// Mean of the inserted-gap ratio distribution.
    pub gap_ratio_mu: f64,
    /// Standard deviation of the inserted-gap ratio distribution.
    pub gap_ratio_sigma: f64,
    /// Hard clip applied to sampled ratios, ⊂ (0, 1).
    pub ratio_clip: [f64; 2],
    /// Minimum gap either side of an inserted vehicle, m.
    pub min_insert_gap: f64,
}

impl Default for LcParams {
    fn default() -> Self {
        // Cut-in: zero below 30 m, quadratic ramp to p_max at 120 m, flat
        // beyond. No leader-speed dependence by default.
        let p_max = 0.004;
        let s = p_max / ((120.0 - 30.0) * (120.0 - 30.0));
        let p_in_pieces = vec![
            Poly2Piece { lo: 0.0, hi: 30.0, c: [0.0; 6] },
            // p_max·((h−30)/90)² expanded in the monomial basis.
            Poly2Piece {
                lo: 30.0,
                hi: 120.0,
                c: [900.0 * s, -60.0 * s, 0.0, s, 0.0, 0.0],
            },
            Poly2Piece { lo: 120.0, hi: f64::INFINITY, c: [p_max, 0.0, 0.0, 0.0, 0.0, 0.0] },
        ];
        // Cut-out: zero below 5 m/s, quadratic ramp to q_max at 30 m/s.
        let q_max = 0.002;
        let r = q_max / ((30.0 - 5.0) * (30.0 - 5.0));
        let p_out_pieces = vec![
            Poly1Piece { lo: 0.0, hi: 5.0, c: [0.0; 3] },
            Poly1Piece { lo: 5.0, hi: 30.0, c: [25.0 * r, -10.0 * r, r] },
            Poly1Piece { lo: 30.0, hi: f64::INFINITY, c: [q_max, 0.0, 0.0] },
        ];
        LcParams {
            p_in_pieces,
            p_out_pieces,
            gap_ratio_mu: 0.5,
            gap_ratio_sigma: 0.15,
            ratio_clip: [0.2, 0.8],
            min_insert_gap: 8.0,
        }
    }
}

impl LcParams {
    pub fn validate(&self) -> Result<()> {
        let err = |field: &str, value: String, reason: &str| {
            Err(SimError::InvalidConfig {
                field: field.into(),
                value,
                reason: reason.into(),
            })
        };
        if self.p_in_pieces.is_empty() || self.p_out_pieces.is_empty() {
            return err("lc.p_in_pieces", "[]".into(), "needs at least one piece");
        }
        let spans_in: Vec<(f64, f64)> = self.p_in_pieces.iter().map(|p| (p.lo, p.hi)).collect();
        let spans_out: Vec<(f64, f64)> = self.p_out_pieces.iter().map(|p| (p.lo, p.hi)).collect();
        for (name, spans) in [("lc.p_in_pieces", spans_in), ("lc.p_out_pieces", spans_out)] {
            for (i, &(lo, hi)) in spans.iter().enumerate() {
                if !(lo.is_finite() && lo < hi) {
                    return err(name, format!("piece {i}: [{lo}, {hi})"), "needs lo < hi");
                }
                if i > 0 && (lo - spans[i - 1].1).abs() > 1e-9 {
                    return err(name, format!("piece {i}"), "pieces must be contiguous");
                }
            }
        }
        let all_coeffs_finite = self
            .p_in_pieces
            .iter()
            .flat_map(|p| p.c.iter())
            .chain(self.p_out_pieces.iter().flat_map(|p| p.c.iter()))
            .all(|c| c.is_finite());
        if !all_coeffs_finite {
            return err("lc.p_in_pieces", "coefficients".into(), "must be finite");
        }
        let [lo, hi] = self.ratio_clip;
        if !(0.0 < lo && lo < hi && hi < 1.0) {
            return err(
                "lc.ratio_clip",
                format!("[{lo}, {hi}]"),
                "must satisfy 0 < lo < hi < 1",
            );
        }
        if !(self.gap_ratio_sigma.is_finite() && self.gap_ratio_sigma > 0.0) {
            return err(
                "lc.gap_ratio_sigma",
                format!("{}", self.gap_ratio_sigma),
                "must be positive",
            );
        }
        if !self.gap_ratio_mu.is_finite() {
            return err("lc.gap_ratio_mu", format!("{}", self.gap_ratio_mu), "must be finite");
        }
        if !(self.min_insert_gap.is_finite() && self.min_insert_gap >= 0.0) {
            return err(
                "lc.min_insert_gap",
                format!("{}", self.min_insert_gap),
                "must be non-negative",
            );
        }
        Ok(())
    }
}

fn eval_pieces_2d(pieces: &[Poly2Piece], h: f64, v: f64) -> f64 {
    let lo = pieces[0].lo;
    let hi = pieces[pieces.len() - 1].hi;
    let h = h.clamp(lo, if hi.is_finite() { hi } else { f64::MAX });
    let piece = pieces
        .iter()
        .find(|p| h < p.hi)
        .unwrap_or(&pieces[pieces.len() - 1]);
    let c = piece.c;
    (c[0] + c[1] * h + c[2] * v + c[3] * h * h + c[4] * h * v + c[5] * v * v).clamp(0.0, 1.0)
}

fn eval_pieces_1d(pieces: &[Poly1Piece], v: f64) -> f64 {
    let lo = pieces[0].lo;
    let hi = pieces[pieces.len() - 1].hi;
    let v = v.clamp(lo, if hi.is_finite() { hi } else { f64::MAX });
    let piece = pieces
        .iter()
        .find(|p| v < p.hi)
        .unwrap_or(&pieces[pieces.len() - 1]);
    let c = piece.c;
    (c[0] + c[1] * v + c[2] * v * v).clamp(0.0, 1.0)
}

/// Per-step probability that a vehicle cuts in ahead of an ego with gap `h`
/// whose leader drives at `v_lead`.
pub fn cut_in_prob(p: &LcParams, h: f64, v_lead: f64) -> f64 {
    eval_pieces_2d(&p.p_in_pieces, h, v_lead)
}

/// Per-step probability that the ego's leader leaves the lane.
pub fn cut_out_prob(p: &LcParams, v_lead: f64) -> f64 {
    eval_pieces_1d(&p.p_out_pieces, v_lead)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LcEventKind {
    CutIn,
    CutOut,
    Suppressed,
}

impl LcEventKind {
    pub fn label(&self) -> &'static str {
        match self {
            LcEventKind::CutIn => "cut_in",
            LcEventKind::CutOut => "cut_out",
            LcEventKind::Suppressed => "suppressed",
        }
    }
}

/// One lane-change event, as written to the event log.
#[derive(Debug, Clone, PartialEq)]
pub struct LcEvent {
    pub step: u64,
    pub ego_id: u32,
    pub kind: LcEventKind,
    pub inserted_id: Option<u32>,
    pub gap_before: f64,
    pub gap_after: f64,
}

/// Smallest rear gap behind which an inserted vehicle still leaves its new
/// follower an escape: the braking-distance difference at the fleet-wide
/// deceleration floor, plus a reaction allowance and a fixed margin.
fn rear_clearance_needed(v_follower: f64, v_inserted: f64) -> f64 {
    let b = -ACCEL_FLOOR;
    let closing = (v_follower * v_follower - v_inserted * v_inserted).max(0.0);
    closing / (2.0 * b) + v_follower * REACTION_S + KINEMATIC_MARGIN
}

/// Smallest front gap at which the inserted vehicle itself starts out near
/// its desired following distance instead of deep inside it.
fn front_clearance_needed(p: &LcParams, v_inserted: f64) -> f64 {
    p.min_insert_gap + v_inserted * INSERT_HEADWAY_S
}

/// Apply one lane-change round to the platoon: for each non-leader ego (front
/// to back), evaluate cut-out of its leader first, then cut-in ahead of it; at
/// most one event per ego per step. Only `Human` vehicles are ever removed.
/// New ids come from `next_id`.
pub fn apply_lane_changes(
    platoon: &mut Vec<VehicleState>,
    p: &LcParams,
    rng: &mut impl Rng,
    step: u64,
    next_id: &mut u32,
) -> Vec<LcEvent> {
    let mut events = Vec::new();
    let egos: Vec<u32> = platoon.iter().skip(1).map(|v| v.id).collect();
    let ratio_dist = Normal::new(p.gap_ratio_mu, p.gap_ratio_sigma)
        .expect("validated sigma is positive");

    for ego_id in egos {
        // The platoon mutates as we go; re-locate the ego each round. It may
        // have gained a new leader from an earlier ego's event.
        let Some(idx) = platoon.iter().position(|v| v.id == ego_id) else {
            continue; // removed by an earlier cut-out this step
        };
        debug_assert!(idx >= 1);
        let h = platoon[idx].gap.expect("non-leader has a gap");
        let v_ego = platoon[idx].speed;
        let leader = platoon[idx - 1].clone();

        // Cut-out first: the ego's leader leaves the lane.
        if rng.random::<f64>() < cut_out_prob(p, leader.speed)
            && leader.kind == VehicleKind::Human
        {
            platoon.remove(idx - 1);
            recompute_gaps(platoon);
            let merged = platoon
                .iter()
                .find(|v| v.id == ego_id)
                .and_then(|v| v.gap)
                .unwrap_or(f64::INFINITY);
            events.push(LcEvent {
                step,
                ego_id,
                kind: LcEventKind::CutOut,
                inserted_id: None,
                gap_before: h,
                gap_after: merged,
            });
            continue;
        }

        // Cut-in: a new vehicle appears between the ego and its leader.
        if rng.random::<f64>() < cut_in_prob(p, h, leader.speed) {
            let length = platoon[idx].length;
            let available = h - length;
            let ratio = ratio_dist
                .sample(rng)
                .clamp(p.ratio_clip[0], p.ratio_clip[1]);
            let gap_front = ratio * available;
            let gap_rear = available - gap_front;
            let v_ins = leader.speed;

            let feasible = available > 0.0
                && gap_front >= front_clearance_needed(p, v_ins)
                && gap_rear >= p.min_insert_gap
                && gap_rear >= rear_clearance_needed(v_ego, v_ins);
            if !feasible {
                events.push(LcEvent {
                    step,
                    ego_id,
                    kind: LcEventKind::Suppressed,
                    inserted_id: None,
                    gap_before: h,
                    gap_after: h,
                });
                continue;
            }

            let mut inserted = VehicleState::new(
                *next_id,
                VehicleKind::Human,
                platoon[idx].position + gap_rear + length,
                v_ins,
            );
            *next_id += 1;
            inserted.accel = 0.0;
            let inserted_id = inserted.id;
            platoon.insert(idx, inserted);
            recompute_gaps(platoon);
            events.push(LcEvent {
                step,
                ego_id,
                kind: LcEventKind::CutIn,
                inserted_id: Some(inserted_id),
                gap_before: h,
                gap_after: gap_rear,
            });
        }
    }
    events
}
