//! Scripted wave-smoothing controller: follow a low-pass estimate of the
//! leader's speed (never faster than the routing target when one exists)
//! while proportionally steering the gap toward a large buffer, leaving the
//! safety and gap-closing wrappers to handle the extremes.

use super::AvSnapshot;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReferenceParams {
    /// Proportional gain on the speed error, 1/s.
    pub speed_gain: f64,
    /// Proportional gain on the gap error, 1/s².
    pub gap_gain: f64,
    /// Time constant of the leader-speed moving average, s.
    pub ema_tau_s: f64,
    /// Gap setpoint as a fraction of the gap-closing threshold.
    pub gap_target_frac: f64,
}

impl Default for ReferenceParams {
    fn default() -> Self {
        ReferenceParams {
            speed_gain: 0.5,
            gap_gain: 0.01,
            ema_tau_s: 20.0,
            gap_target_frac: 0.8,
        }
    }
}

/// Per-AV controller state (the speed filter memory).
#[derive(Debug, Clone)]
pub struct ReferenceController {
    params: ReferenceParams,
    ema: Option<f64>,
}

impl ReferenceController {
    pub fn new(params: ReferenceParams) -> Self {
        ReferenceController { params, ema: None }
    }

    /// Current leader-speed estimate (the raw leader speed before the first
    /// update).
    pub fn speed_estimate(&self) -> Option<f64> {
        self.ema
    }

    /// One decision: returns the raw acceleration command, clamped to the
    /// action bounds (the caller still applies the wrappers).
    pub fn decide(&mut self, snap: &AvSnapshot, decision_dt: f64, accel_bounds: [f64; 2]) -> f64 {
        let p = self.params;
        let ema = match self.ema {
            None => snap.v_lead,
            Some(prev) => {
                let alpha = 1.0 - (-decision_dt / p.ema_tau_s).exp();
                prev + alpha * (snap.v_lead - prev)
            }
        };
        self.ema = Some(ema);
        let mut v_cmd = ema;
        if let Some(target) = snap.planner_target {
            v_cmd = v_cmd.min(target);
        }
        let gap_err = snap.h - p.gap_target_frac * snap.h_max;
        let raw = p.speed_gain * (v_cmd - snap.v_av) + p.gap_gain * gap_err;
        raw.clamp(accel_bounds[0], accel_bounds[1])
    }
}
