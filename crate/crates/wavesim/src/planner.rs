//! Target-speed planner: turns coarse, delayed segment-average speed data
//! into a smooth position-indexed speed profile and serves downstream
//! queries to controllers.
//!
//! The pipeline is: segment midpoints → linear interpolation onto a 10 m
//! grid → Gaussian kernel smoothing (truncated at 4σ, weights renormalized,
//! constant extension at the edges). Feeds refresh on a fixed interval and
//! always describe the road as it was `delay` seconds ago, mimicking a real
//! traffic-data provider.

use serde::{Deserialize, Serialize};

use crate::data::LeaderTrajectory;
use crate::error::{Result, SimError};

/// Profile grid spacing in meters.
pub const GRID_SPACING: f64 = 10.0;

/// Upper bound on any speed carried by feeds or profiles, m/s.
pub const FEED_SPEED_MAX: f64 = 40.0;

/// Averaging window used when building a segment's speed estimate, s.
const SEGMENT_WINDOW: f64 = 60.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlannerParams {
    /// Segment length of the synthetic feed partition, m.
    pub segment_length: f64,
    /// Data latency: a feed issued at `t` describes the road at `t - delay`, s.
    pub delay: f64,
    /// Feeds refresh only at multiples of this interval, s.
    pub update_interval: f64,
    /// Gaussian smoothing standard deviation, m.
    pub bandwidth: f64,
    /// Speed reported for road segments never yet observed, m/s.
    pub placeholder_speed: f64,
}

impl Default for PlannerParams {
    fn default() -> Self {
        PlannerParams {
            segment_length: 800.0,
            delay: 180.0,
            update_interval: 60.0,
            bandwidth: 300.0,
            placeholder_speed: 30.0,
        }
    }
}

impl PlannerParams {
    pub fn validate(&self) -> Result<()> {
        let checks = [
            ("planner.segment_length", self.segment_length, self.segment_length > 0.0),
            ("planner.delay", self.delay, self.delay >= 0.0),
            ("planner.update_interval", self.update_interval, self.update_interval > 0.0),
            ("planner.bandwidth", self.bandwidth, self.bandwidth > 0.0),
            (
                "planner.placeholder_speed",
                self.placeholder_speed,
                (0.0..=FEED_SPEED_MAX).contains(&self.placeholder_speed),
            ),
        ];
        for (name, v, ok) in checks {
            if !v.is_finite() || !ok {
                return Err(SimError::InvalidConfig {
                    field: name.into(),
                    value: format!("{v}"),
                    reason: "out of range".into(),
                });
            }
        }
        Ok(())
    }
}

/// One road segment's average speed observation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Segment {
    pub start_x: f64,
    pub end_x: f64,
    pub avg_speed: f64,
}

impl Segment {
    pub fn midpoint(&self) -> f64 {
        0.5 * (self.start_x + self.end_x)
    }
}

/// A snapshot of segment-average speeds as issued by the data provider.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentFeed {
    /// Contiguous, ordered segments covering the road extent.
    pub segments: Vec<Segment>,
    /// Time this feed was issued, s. Always a multiple of `update_interval`.
    pub issued_at: f64,
    pub delay: f64,
    pub update_interval: f64,
}

impl SegmentFeed {
    pub fn validate(&self) -> Result<()> {
        if self.segments.is_empty() {
            return Err(SimError::Invalid("segment feed is empty".into()));
        }
        for (i, s) in self.segments.iter().enumerate() {
            if s.end_x <= s.start_x {
                return Err(SimError::Invalid(format!(
                    "segment {i} has non-positive extent [{}, {}]",
                    s.start_x, s.end_x
                )));
            }
            if !(0.0..=FEED_SPEED_MAX).contains(&s.avg_speed) {
                return Err(SimError::Invalid(format!(
                    "segment {i} speed {} outside [0, {FEED_SPEED_MAX}]",
                    s.avg_speed
                )));
            }
            if i > 0 && (s.start_x - self.segments[i - 1].end_x).abs() > 1e-6 {
                return Err(SimError::Invalid(format!(
                    "segments {} and {i} are not contiguous",
                    i - 1
                )));
            }
        }
        Ok(())
    }
}

/// Smoothed position→target-speed map on a uniform 10 m grid, with constant
/// extension outside the sampled extent.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetSpeedProfile {
    pub x0: f64,
    pub spacing: f64,
    pub v: Vec<f64>,
    /// Issue time of the feed this profile was built from, s.
    pub valid_from: f64,
}

/// Build a target-speed profile from a segment feed.
///
/// Step 1 interpolates linearly through the segment-midpoint points onto the
/// 10 m grid; step 2 convolves with a Gaussian kernel of standard deviation
/// `bandwidth` truncated at 4σ with renormalized weights, extending the
/// signal as a constant beyond the outermost midpoints.
pub fn build_profile(feed: &SegmentFeed, bandwidth: f64) -> Result<TargetSpeedProfile> {
    feed.validate()?;
    if !(bandwidth.is_finite() && bandwidth > 0.0) {
        return Err(SimError::Invalid(format!("bandwidth {bandwidth} must be > 0")));
    }

    let mids: Vec<(f64, f64)> = feed
        .segments
        .iter()
        .map(|s| (s.midpoint(), s.avg_speed.clamp(0.0, FEED_SPEED_MAX)))
        .collect();
    let x0 = mids[0].0;
    let x_last = mids[mids.len() - 1].0;
    let n = ((x_last - x0) / GRID_SPACING).ceil() as usize + 1;

    // Piecewise-linear interpolation through the midpoints.
    let mut raw = Vec::with_capacity(n);
    let mut seg = 0;
    for i in 0..n {
        let x = x0 + i as f64 * GRID_SPACING;
        while seg + 1 < mids.len() - 1 && x > mids[seg + 1].0 {
            seg += 1;
        }
        let v = if mids.len() == 1 || x <= mids[0].0 {
            mids[0].1
        } else if x >= x_last {
            mids[mids.len() - 1].1
        } else {
            let (xa, va) = mids[seg];
            let (xb, vb) = mids[seg + 1];
            va + (vb - va) * (x - xa) / (xb - xa)
        };
        raw.push(v);
    }

    // Truncated, renormalized Gaussian kernel on the grid.
    let radius = (4.0 * bandwidth / GRID_SPACING).ceil() as i64;
    let mut weights = Vec::with_capacity((2 * radius + 1) as usize);
    for j in -radius..=radius {
        let d = j as f64 * GRID_SPACING;
        weights.push((-d * d / (2.0 * bandwidth * bandwidth)).exp());
    }
    let wsum: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= wsum;
    }

    let mut smooth = Vec::with_capacity(n);
    for i in 0..n as i64 {
        let mut acc = 0.0;
        for (k, w) in weights.iter().enumerate() {
            let j = (i + k as i64 - radius).clamp(0, n as i64 - 1) as usize;
            acc += w * raw[j];
        }
        smooth.push(acc.clamp(0.0, FEED_SPEED_MAX));
    }

    Ok(TargetSpeedProfile {
        x0,
        spacing: GRID_SPACING,
        v: smooth,
        valid_from: feed.issued_at,
    })
}

/// Target speed at position `x`: linear interpolation between knots,
/// constant extension outside the grid.
pub fn query(profile: &TargetSpeedProfile, x: f64) -> f64 {
    let n = profile.v.len();
    if n == 1 {
        return profile.v[0];
    }
    let f = (x - profile.x0) / profile.spacing;
    if f <= 0.0 {
        return profile.v[0];
    }
    if f >= (n - 1) as f64 {
        return profile.v[n - 1];
    }
    let i = f.floor() as usize;
    let frac = f - i as f64;
    profile.v[i] + (profile.v[i + 1] - profile.v[i]) * frac
}

/// Target speeds at the ego position and 200 m, 500 m, and 1 km downstream.
pub fn query_downstream(profile: &TargetSpeedProfile, x: f64) -> [f64; 4] {
    [
        query(profile, x),
        query(profile, x + 200.0),
        query(profile, x + 500.0),
        query(profile, x + 1000.0),
    ]
}

/// Synthesize the segment feed a traffic-data provider would issue at time
/// `t`, from the leader's replayed trajectory.
///
/// The road (the leader's full extent) is partitioned into fixed-length
/// segments. A feed issued at `τ = floor(t / update_interval)·update_interval`
/// may use samples up to `τ - delay` only. Each segment reports the time-mean
/// of the leader's speed while inside it over the trailing
/// [`SEGMENT_WINDOW`]-second window of its (visible) visit; segments the
/// leader has not yet reached report `placeholder_speed`. Before any data is
/// visible (cold start) the whole feed is placeholders.
pub fn synth_feed(traj: &LeaderTrajectory, t: f64, p: &PlannerParams) -> SegmentFeed {
    let issued_at = (t / p.update_interval).floor() * p.update_interval;
    let cutoff = issued_at - p.delay;

    let extent = traj.total_distance().max(p.segment_length);
    let n_seg = (extent / p.segment_length).ceil() as usize;

    // Index of the last sample visible at the cutoff (positions and times
    // are both monotone).
    let visible = if cutoff < traj.start_t {
        None
    } else {
        let k = ((cutoff - traj.start_t) / traj.dt).floor() as usize;
        Some(k.min(traj.len() - 1))
    };

    let mut segments = Vec::with_capacity(n_seg);
    for s in 0..n_seg {
        let lo = s as f64 * p.segment_length;
        let hi = lo + p.segment_length;
        let avg = visible.and_then(|kmax| {
            // Contiguous index range of samples inside [lo, hi).
            let a = traj.positions.partition_point(|&x| x < lo);
            let b = traj.positions.partition_point(|&x| x < hi);
            let b = b.min(kmax + 1);
            if a >= b {
                return None;
            }
            let t_last = traj.time_at(b - 1);
            let w_start = traj
                .positions
                .len()
                .min(a.max(((t_last - SEGMENT_WINDOW - traj.start_t) / traj.dt).ceil() as usize));
            let span = &traj.speeds[w_start..b];
            Some(span.iter().sum::<f64>() / span.len() as f64)
        });
        segments.push(Segment {
            start_x: lo,
            end_x: hi,
            avg_speed: avg.unwrap_or(p.placeholder_speed).clamp(0.0, FEED_SPEED_MAX),
        });
    }

    SegmentFeed {
        segments,
        issued_at,
        delay: p.delay,
        update_interval: p.update_interval,
    }
}
