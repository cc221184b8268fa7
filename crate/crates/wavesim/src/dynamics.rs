//! Car-following law, platoon integration, and linear string-stability
//! analysis.
//!
//! Human drivers follow the Intelligent Driver Model (IDM) with the enhanced
//! desired-gap convention (the dynamic term is floored at zero so the desired
//! gap never drops below the jam distance). The committed default parameters
//! are calibrated so that a homogeneous platoon is string-unstable below
//! ~17.9 m/s and stable above — perturbations injected at low equilibrium
//! speeds grow into stop-and-go waves as they propagate rearward.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};
use crate::vehicle::{recompute_gaps, VehicleState};

/// Fleet-wide braking floor in m/s²; no vehicle, human or controlled, brakes
/// harder than this.
pub const ACCEL_FLOOR: f64 = -3.0;

/// Intelligent Driver Model parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IdmParams {
    /// Desired free-flow speed, m/s.
    pub v0: f64,
    /// Desired time headway, s. Accepts `T` as a config alias.
    #[serde(alias = "T")]
    pub t_headway: f64,
    /// Jam distance (minimum standstill gap), m.
    pub s0: f64,
    /// Maximum acceleration, m/s².
    pub a_max: f64,
    /// Comfortable deceleration, m/s².
    pub b: f64,
    /// Acceleration exponent.
    pub delta: f64,
}

impl Default for IdmParams {
    /// Calibrated so the linear string-stability boundary sits at ~17.9 m/s:
    /// platoons are unstable (waves grow) below, stable above. See
    /// `string_stable` and `perturbation_growth_ratio`.
    fn default() -> Self {
        IdmParams {
            v0: 30.0,
            t_headway: 1.0,
            s0: 6.0,
            a_max: 2.2,
            b: 3.0,
            delta: 4.0,
        }
    }
}

impl IdmParams {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("idm.v0", self.v0),
            ("idm.t_headway", self.t_headway),
            ("idm.s0", self.s0),
            ("idm.a_max", self.a_max),
            ("idm.b", self.b),
            ("idm.delta", self.delta),
        ];
        for (name, v) in fields {
            if !v.is_finite() || v <= 0.0 {
                return Err(SimError::InvalidConfig {
                    field: name.into(),
                    value: format!("{v}"),
                    reason: "must be strictly positive".into(),
                });
            }
        }
        if self.delta < 1.0 {
            return Err(SimError::InvalidConfig {
                field: "idm.delta".into(),
                value: format!("{}", self.delta),
                reason: "must be >= 1".into(),
            });
        }
        Ok(())
    }
}

/// IDM acceleration for ego speed `v`, leader speed `v_lead`, and
/// bumper-to-bumper gap `s` (must be positive). The result is clipped to
/// `[ACCEL_FLOOR, a_max]`.
pub fn idm_accel(p: &IdmParams, v: f64, v_lead: f64, s: f64) -> f64 {
    debug_assert!(s > 0.0, "idm_accel requires a positive gap, got {s}");
    let dv = v - v_lead;
    let dynamic = v * p.t_headway + v * dv / (2.0 * (p.a_max * p.b).sqrt());
    let s_star = p.s0 + dynamic.max(0.0);
    let a = p.a_max * (1.0 - (v / p.v0).powf(p.delta) - (s_star / s).powi(2));
    a.clamp(ACCEL_FLOOR, p.a_max)
}

/// Gap at which a vehicle following a same-speed leader holds exactly zero
/// acceleration: `s_e(v) = (s0 + v·T) / sqrt(1 - (v/v0)^delta)`.
///
/// Only defined for `0 <= v < v0`; at or above the desired speed no finite
/// equilibrium gap exists.
pub fn equilibrium_gap(p: &IdmParams, v: f64) -> Result<f64> {
    if !(0.0..p.v0).contains(&v) {
        return Err(SimError::Invalid(format!(
            "no finite equilibrium gap at v = {v} m/s (requires 0 <= v < v0 = {})",
            p.v0
        )));
    }
    let r = (v / p.v0).powf(p.delta);
    Ok((p.s0 + v * p.t_headway) / (1.0 - r).sqrt())
}

/// Outcome of the linear string-stability test at one equilibrium speed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StringStability {
    /// `true` when small perturbations decay as they propagate rearward.
    pub stable: bool,
    /// Criterion margin; positive means stable, negative unstable.
    pub margin: f64,
}

/// Linear string-stability test of the car-following law at equilibrium
/// speed `v`.
///
/// Writes the law as `a(v, Δv, s)` with `Δv = v - v_lead`, takes partial
/// derivatives `f_v, f_Δv, f_s` at `(v, 0, s_e(v))` by central finite
/// differences (step 1e-4), and evaluates
///
/// ```text
/// margin = ½·f_v² + f_v·f_Δv − f_s
/// ```
///
/// which is nonnegative exactly when the platoon transfer function has gain
/// ≤ 1 at all frequencies, i.e. speed perturbations decay vehicle-to-vehicle.
pub fn string_stable(p: &IdmParams, v: f64) -> Result<StringStability> {
    let se = equilibrium_gap(p, v)?;
    let h = 1e-4;
    // f_v: ego and leader speed varied together (Δv held at 0).
    let f_v = (idm_accel(p, v + h, v + h, se) - idm_accel(p, v - h, v - h, se)) / (2.0 * h);
    // f_Δv: leader speed varied against ego (Δv = ±h).
    let f_dv = (idm_accel(p, v, v - h, se) - idm_accel(p, v, v + h, se)) / (2.0 * h);
    let f_s = (idm_accel(p, v, v, se + h) - idm_accel(p, v, v, se - h)) / (2.0 * h);
    let margin = 0.5 * f_v * f_v + f_v * f_dv - f_s;
    Ok(StringStability {
        stable: margin >= 0.0,
        margin,
    })
}

/// Locate the stability boundary by scanning `margin` over `[v_lo, v_hi]`
/// at `step` resolution and bisecting the first sign change to ~1e-3 m/s.
/// Returns `None` if the margin does not change sign in the range.
pub fn stability_boundary(p: &IdmParams, v_lo: f64, v_hi: f64, step: f64) -> Option<f64> {
    let mut prev: Option<(f64, f64)> = None;
    let mut v = v_lo;
    while v <= v_hi + 1e-12 {
        let m = string_stable(p, v).ok()?.margin;
        if let Some((pv, pm)) = prev {
            if pm.signum() != m.signum() {
                // Bisect [pv, v].
                let (mut lo, mut hi, lo_m) = (pv, v, pm);
                for _ in 0..40 {
                    let mid = 0.5 * (lo + hi);
                    let mm = string_stable(p, mid).ok()?.margin;
                    if mm.signum() == lo_m.signum() {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                return Some(0.5 * (lo + hi));
            }
        }
        prev = Some((v, m));
        v += step;
    }
    None
}

/// Semi-implicit Euler update of the whole platoon.
///
/// Per vehicle: `v' = clamp(v + a·dt, v_lo, v_hi)` then `x' = x + v'·dt`.
/// The front vehicle's new speed is overridden by `leader_speed` when given
/// (trajectory replay drives it directly). Each vehicle's `accel` field is
/// set to the realized acceleration `(v' − v)/dt`, and gaps are recomputed.
///
/// Fails with a collision fault (both vehicle ids plus `step`) if any gap
/// closes to zero or below.
pub fn step_platoon(
    platoon: &mut [VehicleState],
    accels: &[f64],
    dt: f64,
    speed_bounds: [f64; 2],
    leader_speed: Option<f64>,
    step: u64,
) -> Result<()> {
    assert_eq!(
        platoon.len(),
        accels.len(),
        "one acceleration per vehicle required"
    );
    let [v_lo, v_hi] = speed_bounds;
    for (i, veh) in platoon.iter_mut().enumerate() {
        let v = veh.speed;
        let v_new = match (i, leader_speed) {
            (0, Some(vl)) => vl.clamp(v_lo, v_hi),
            _ => (v + accels[i] * dt).clamp(v_lo, v_hi),
        };
        veh.accel = (v_new - v) / dt;
        veh.speed = v_new;
        veh.position += v_new * dt;
    }
    recompute_gaps(platoon);
    for i in 1..platoon.len() {
        if platoon[i].gap.unwrap_or(1.0) <= 0.0 {
            return Err(SimError::Collision {
                front_id: platoon[i - 1].id,
                rear_id: platoon[i].id,
                step,
            });
        }
    }
    Ok(())
}

/// Simulation oracle for string stability: perturbation growth along a
/// 21-vehicle chain (leader + 20 followers) at equilibrium speed `v_e`.
///
/// A single transient dip disperses before any narrowband growth becomes
/// visible over 20 vehicles, so the probe injects a sustained train of
/// 0.5 m/s leader dips, `v_lead(t) = v_e + 0.25·(cos(ω·t) − 1)`, and measures
/// the steady-state deviation amplitude (max |v − (v_e − 0.25)| over the
/// second half of a 900 s run) at vehicle 20 versus vehicle 2. The returned
/// ratio is maximized over a small probe-frequency scan; ratios above 1 mean
/// perturbations grow as they travel rearward.
pub fn perturbation_growth_ratio(p: &IdmParams, v_e: f64) -> Result<f64> {
    const PROBE_FREQS: [f64; 5] = [0.15, 0.20, 0.27, 0.35, 0.45];
    const N_FOLLOWERS: usize = 20;
    const T_END: f64 = 900.0;
    const DT: f64 = 0.1;

    let gap = equilibrium_gap(p, v_e)?;
    let n = N_FOLLOWERS + 1;
    let steps = (T_END / DT) as usize;
    let half = steps / 2;
    let mut best = 0.0_f64;

    for omega in PROBE_FREQS {
        let mut x = vec![0.0_f64; n];
        let mut v = vec![v_e; n];
        for i in 1..n {
            x[i] = x[i - 1] - crate::vehicle::VEHICLE_LENGTH - gap;
        }
        let mut amp = vec![0.0_f64; n];
        for k in 0..steps {
            let t = k as f64 * DT;
            let v_lead = v_e + 0.25 * ((omega * t).cos() - 1.0);
            let mut acc = vec![0.0_f64; n];
            for i in 1..n {
                let s = x[i - 1] - crate::vehicle::VEHICLE_LENGTH - x[i];
                acc[i] = idm_accel(p, v[i], v[i - 1], s);
            }
            v[0] = v_lead;
            for i in 1..n {
                v[i] = (v[i] + acc[i] * DT).clamp(0.0, 35.0);
            }
            for i in 0..n {
                x[i] += v[i] * DT;
            }
            if k >= half {
                // Deviations are measured around the probe's mean v_e − 0.25.
                for i in 0..n {
                    amp[i] = amp[i].max((v[i] - (v_e - 0.25)).abs());
                }
            }
        }
        if amp[2] > 0.0 {
            best = best.max(amp[20] / amp[2]);
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vehicle::{VehicleKind, VehicleState, VEHICLE_LENGTH};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn standstill_equilibrium_is_exact() {
        let p = IdmParams::default();
        // At v = 0 the desired gap is exactly s0, so a vehicle stopped at s0
        // behind a stopped leader holds zero acceleration.
        assert_eq!(idm_accel(&p, 0.0, 0.0, p.s0), 0.0);
    }

    #[test]
    fn free_flow_limit_vanishes() {
        let p = IdmParams::default();
        let a = idm_accel(&p, p.v0, p.v0, 1e9);
        assert!(a <= 0.0);
        assert!(a.abs() < 1e-6 * p.a_max, "free-flow accel {a}");
    }

    #[test]
    fn equilibrium_gap_substitutes_back_to_zero_accel() {
        let p = IdmParams::default();
        let se = equilibrium_gap(&p, 15.0).unwrap();
        assert!(idm_accel(&p, 15.0, 15.0, se).abs() < 1e-9);
    }

    #[test]
    fn equilibrium_gap_matches_bisection_oracle() {
        let p = IdmParams::default();
        for v in [2.0, 9.5, 15.0, 21.0, 27.0] {
            // Bisection on idm_accel(v, v, s) = 0 over s.
            let (mut lo, mut hi) = (p.s0 * 0.5, 5000.0);
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if idm_accel(&p, v, v, mid) < 0.0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            let oracle = 0.5 * (lo + hi);
            let closed = equilibrium_gap(&p, v).unwrap();
            assert!(
                (closed - oracle).abs() < 1e-6,
                "v={v}: closed {closed} vs bisection {oracle}"
            );
        }
    }

    #[test]
    fn equilibrium_gap_increases_with_speed() {
        let p = IdmParams::default();
        let mut prev = equilibrium_gap(&p, 0.0).unwrap();
        assert_eq!(prev, p.s0);
        let mut v = 0.25;
        while v < p.v0 * 0.999 {
            let g = equilibrium_gap(&p, v).unwrap();
            assert!(g > prev, "s_e not increasing at v={v}");
            prev = g;
            v += 0.25;
        }
        // Near v0 the gap blows up but stays ordered.
        let near = equilibrium_gap(&p, 0.999 * p.v0).unwrap();
        assert!(near > equilibrium_gap(&p, 0.9 * p.v0).unwrap());
        assert!(equilibrium_gap(&p, p.v0).is_err());
    }

    #[test]
    fn stability_boundary_brackets_in_17_19() {
        let p = IdmParams::default();
        assert!(!string_stable(&p, 17.0).unwrap().stable);
        assert!(string_stable(&p, 19.0).unwrap().stable);
        let boundary = stability_boundary(&p, 5.0, 29.0, 0.25).unwrap();
        assert!(
            (17.0..19.0).contains(&boundary),
            "boundary {boundary} outside [17, 19]"
        );
    }

    #[test]
    fn growth_oracle_agrees_with_criterion_sign() {
        let p = IdmParams::default();
        for v in [10.0, 14.0, 22.0, 25.0] {
            let margin = string_stable(&p, v).unwrap().margin;
            let ratio = perturbation_growth_ratio(&p, v).unwrap();
            if margin < 0.0 {
                assert!(ratio > 1.0, "v={v}: margin {margin} but ratio {ratio}");
            } else {
                assert!(ratio < 1.0, "v={v}: margin {margin} but ratio {ratio}");
            }
        }
    }

    #[test]
    fn step_arithmetic_and_speed_floor() {
        let mut platoon = vec![
            VehicleState::new(0, VehicleKind::TrajectoryLeader, 100.0, 20.0),
            VehicleState::new(1, VehicleKind::Human, 0.0, 1.0),
        ];
        step_platoon(&mut platoon, &[0.0, -3.0], 0.1, [0.0, 35.0], Some(20.0), 0).unwrap();
        assert!((platoon[1].speed - 0.7).abs() < 1e-12);
        assert!((platoon[1].position - 0.07).abs() < 1e-12);

        let mut platoon = vec![
            VehicleState::new(0, VehicleKind::TrajectoryLeader, 100.0, 20.0),
            VehicleState::new(1, VehicleKind::Human, 0.0, 0.2),
        ];
        step_platoon(&mut platoon, &[0.0, -3.0], 0.1, [0.0, 35.0], Some(20.0), 0).unwrap();
        assert_eq!(platoon[1].speed, 0.0);
        assert_eq!(platoon[1].position, 0.0);
    }

    #[test]
    fn equilibrium_platoon_stays_put() {
        let p = IdmParams::default();
        let v = 20.0;
        let gap = equilibrium_gap(&p, v).unwrap();
        let n = 200;
        let mut platoon = Vec::with_capacity(n);
        let mut x = 0.0;
        platoon.push(VehicleState::new(0, VehicleKind::TrajectoryLeader, x, v));
        for i in 1..n {
            x -= VEHICLE_LENGTH + gap;
            platoon.push(VehicleState::new(i as u32, VehicleKind::Human, x, v));
        }
        recompute_gaps(&mut platoon);
        for step in 0..500 {
            let accels: Vec<f64> = platoon
                .iter()
                .enumerate()
                .map(|(i, veh)| {
                    if i == 0 {
                        0.0
                    } else {
                        idm_accel(&p, veh.speed, platoon[i - 1].speed, veh.gap.unwrap())
                    }
                })
                .collect();
            step_platoon(&mut platoon, &accels, 0.1, [0.0, 35.0], Some(v), step).unwrap();
        }
        for veh in &platoon {
            assert!(
                (veh.speed - v).abs() < 1e-6,
                "vehicle {} drifted to {}",
                veh.id,
                veh.speed
            );
        }
    }

    #[test]
    fn collision_fault_carries_ids_and_step() {
        let mut platoon = vec![
            VehicleState::new(7, VehicleKind::TrajectoryLeader, 6.0, 0.0),
            VehicleState::new(8, VehicleKind::Human, 0.0, 12.0),
        ];
        let err = step_platoon(&mut platoon, &[0.0, 0.0], 0.1, [0.0, 35.0], Some(0.0), 41)
            .unwrap_err();
        match err {
            SimError::Collision {
                front_id,
                rear_id,
                step,
            } => {
                assert_eq!((front_id, rear_id, step), (7, 8, 41));
            }
            other => panic!("expected collision, got {other}"),
        }
    }

    #[test]
    fn idm_accel_is_locally_lipschitz() {
        let p = IdmParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(222);
        const L: f64 = 1e4;
        for _ in 0..2000 {
            let v: f64 = rng.random_range(0.0..32.0);
            let vl: f64 = rng.random_range(0.0..32.0);
            let s: f64 = rng.random_range(1.0..300.0);
            let base = idm_accel(&p, v, vl, s);
            let eps = 1e-6;
            for (dv, dvl, ds) in [(eps, 0.0, 0.0), (0.0, eps, 0.0), (0.0, 0.0, eps)] {
                let perturbed = idm_accel(&p, v + dv, vl + dvl, s + ds);
                assert!(
                    (perturbed - base).abs() <= L * eps,
                    "jump at v={v} vl={vl} s={s}"
                );
            }
        }
    }
}
