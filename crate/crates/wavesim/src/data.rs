//! Leader trajectory data: CSV load/store, random chunk sampling for
//! training, and a trapezoidal-wave generator for building a reproducible
//! trajectory corpus.

use std::path::Path;

use rand::Rng;

use crate::error::{Result, SimError};

/// Sample spacing every trajectory must use, s.
pub const TRAJECTORY_DT: f64 = 0.1;
/// Speed range a stored trajectory may carry; out-of-range samples are
/// clamped on load. (The simulator separately enforces its own, tighter
/// speed bounds at replay time.)
pub const SPEED_MIN: f64 = 0.0;
pub const SPEED_MAX: f64 = 40.0;
/// Maximum cruise speed the wave generator accepts, m/s.
pub const WAVE_BASE_MAX: f64 = 35.0;

/// A replayable speed-vs-time record for the platoon leader.
///
/// Positions are integrated with the same semi-implicit convention the
/// simulator uses (`x[k] = x[k-1] + v[k]·dt`), so `positions[k]` is exactly
/// where a simulated leader starting at `x = 0` sits after step `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct LeaderTrajectory {
    pub id: String,
    pub dt: f64,
    /// Time of the first sample, s.
    pub start_t: f64,
    pub speeds: Vec<f64>,
    pub positions: Vec<f64>,
}

impl LeaderTrajectory {
    /// Build from raw speed samples at [`TRAJECTORY_DT`] spacing, clamping
    /// out-of-range values. Returns the trajectory and the clamp count.
    pub fn from_speeds(id: impl Into<String>, speeds: Vec<f64>) -> Result<(Self, usize)> {
        let id = id.into();
        if speeds.len() < 2 {
            return Err(SimError::Trajectory {
                id,
                reason: format!("needs at least 2 samples, got {}", speeds.len()),
            });
        }
        let mut clamped = 0usize;
        let mut clean = Vec::with_capacity(speeds.len());
        for (k, &v) in speeds.iter().enumerate() {
            if !v.is_finite() {
                return Err(SimError::Trajectory {
                    id,
                    reason: format!("non-finite speed at sample {k}"),
                });
            }
            let c = v.clamp(SPEED_MIN, SPEED_MAX);
            if c != v {
                clamped += 1;
            }
            clean.push(c);
        }
        let mut positions = Vec::with_capacity(clean.len());
        let mut x = 0.0;
        positions.push(x);
        for &v in &clean[1..] {
            x += v * TRAJECTORY_DT;
            positions.push(x);
        }
        Ok((
            LeaderTrajectory {
                id,
                dt: TRAJECTORY_DT,
                start_t: 0.0,
                speeds: clean,
                positions,
            },
            clamped,
        ))
    }

    pub fn len(&self) -> usize {
        self.speeds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.speeds.is_empty()
    }

    pub fn time_at(&self, k: usize) -> f64 {
        self.start_t + k as f64 * self.dt
    }

    /// Speed at sample `k`, holding the last sample forever.
    pub fn speed_at(&self, k: usize) -> f64 {
        self.speeds[k.min(self.speeds.len() - 1)]
    }

    pub fn total_distance(&self) -> f64 {
        *self.positions.last().unwrap_or(&0.0)
    }

    pub fn duration(&self) -> f64 {
        (self.len().saturating_sub(1)) as f64 * self.dt
    }

    /// Write as CSV with header `t,v`. Output is deterministic, so a
    /// regenerated file is byte-identical to the original.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        use std::io::Write;
        let mut f = std::io::BufWriter::new(
            std::fs::File::create(path).map_err(|e| SimError::io(path, e))?,
        );
        let mut emit = |line: String| -> Result<()> {
            writeln!(f, "{line}").map_err(|e| SimError::io(path, e))
        };
        emit("t,v".into())?;
        for (k, &v) in self.speeds.iter().enumerate() {
            emit(format!("{:.1},{}", self.time_at(k), v))?;
        }
        Ok(())
    }
}

/// Load a trajectory from CSV (`t,v` header). Returns the trajectory and the
/// number of speed samples clamped into `[0, 40]`.
pub fn load_trajectory(path: &Path) -> Result<(LeaderTrajectory, usize)> {
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "trajectory".into());
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| SimError::Parse {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
    let parse_err = |reason: String| SimError::Parse {
        path: path.to_path_buf(),
        reason,
    };

    let headers = reader.headers().map_err(|e| parse_err(e.to_string()))?;
    if headers.len() != 2 || &headers[0] != "t" || &headers[1] != "v" {
        return Err(parse_err(format!(
            "expected header `t,v`, got `{}`",
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }

    let mut times = Vec::new();
    let mut speeds = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| parse_err(e.to_string()))?;
        let row = i + 2; // 1-based, after header
        let t: f64 = rec[0]
            .trim()
            .parse()
            .map_err(|_| parse_err(format!("row {row}: bad time `{}`", &rec[0])))?;
        let v: f64 = rec[1]
            .trim()
            .parse()
            .map_err(|_| parse_err(format!("row {row}: bad speed `{}`", &rec[1])))?;
        times.push(t);
        speeds.push(v);
    }
    for w in times.windows(2) {
        if ((w[1] - w[0]) - TRAJECTORY_DT).abs() > 1e-6 {
            return Err(parse_err(format!(
                "time column is not uniformly spaced at {TRAJECTORY_DT} s ({} -> {})",
                w[0], w[1]
            )));
        }
    }
    let start_t = times.first().copied().unwrap_or(0.0);
    let (mut traj, clamped) = LeaderTrajectory::from_speeds(id, speeds)?;
    traj.start_t = start_t;
    Ok((traj, clamped))
}

/// A contiguous slice of a trajectory, remembering where it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryChunk {
    pub traj_id: String,
    /// Index of the chunk's first sample in the source trajectory.
    pub start: usize,
    pub speeds: Vec<f64>,
}

impl TrajectoryChunk {
    /// Stable identity for hashing into observations: source id hashed into
    /// the high bits, start offset in the low 20.
    pub fn ident(&self) -> u64 {
        debug_assert!(self.start < (1 << 20));
        (fnv1a64(self.traj_id.as_bytes()) & 0x7FF_FFFF_FFFF) << 20 | self.start as u64
    }
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x1_0000_0000_01b3);
    }
    h
}

/// Draw a chunk of `chunk_len` samples with a uniformly random start.
pub fn sample_chunk(
    traj: &LeaderTrajectory,
    chunk_len: usize,
    rng: &mut impl Rng,
) -> Result<TrajectoryChunk> {
    if chunk_len < 2 || chunk_len > traj.len() {
        return Err(SimError::Trajectory {
            id: traj.id.clone(),
            reason: format!(
                "chunk length {chunk_len} not in [2, {}]",
                traj.len()
            ),
        });
    }
    let start = rng.random_range(0..=traj.len() - chunk_len);
    Ok(TrajectoryChunk {
        traj_id: traj.id.clone(),
        start,
        speeds: traj.speeds[start..start + chunk_len].to_vec(),
    })
}

/// Parameters for the trapezoidal-wave trajectory generator: a cruise at
/// `v_base` interrupted by `wave_count` slow-down episodes (ramp down to
/// `v_min`, hold, ramp back), each placed with uniform jitter inside its own
/// equal share of the timeline.
#[derive(Debug, Clone, PartialEq)]
pub struct WaveSpec {
    pub id: String,
    pub duration_s: f64,
    pub v_base: f64,
    pub wave_count: usize,
    pub v_min: f64,
    pub hold_s: f64,
    /// Ramp-down rate, m/s² (positive).
    pub decel: f64,
    /// Ramp-up rate, m/s² (positive).
    pub accel: f64,
}

impl WaveSpec {
    fn validate(&self) -> Result<()> {
        let bad = |reason: &str| {
            Err(SimError::Trajectory {
                id: self.id.clone(),
                reason: reason.into(),
            })
        };
        if !(self.duration_s > 1.0) {
            return bad("duration must exceed 1 s");
        }
        if !(SPEED_MIN..=WAVE_BASE_MAX).contains(&self.v_base) {
            return bad("base speed outside [0, 35]");
        }
        if self.wave_count > 0 {
            if !(SPEED_MIN..=SPEED_MAX).contains(&self.v_min) || self.v_min >= self.v_base {
                return bad("wave floor must sit in [0, v_base)");
            }
            if !(0.0 < self.decel && self.decel <= 3.0) || !(0.0 < self.accel && self.accel <= 3.0)
            {
                return bad("ramp rates must lie in (0, 3] m/s²");
            }
            if self.hold_s < 0.0 {
                return bad("hold must be non-negative");
            }
        }
        Ok(())
    }

    fn episode_len(&self) -> f64 {
        let drop = self.v_base - self.v_min;
        drop / self.decel + self.hold_s + drop / self.accel
    }
}

/// Generate a wave trajectory. Fails if the episodes cannot fit their slots.
pub fn generate_synthetic_wave(
    spec: &WaveSpec,
    rng: &mut impl Rng,
) -> Result<LeaderTrajectory> {
    spec.validate()?;
    let n = (spec.duration_s / TRAJECTORY_DT).round() as usize;

    // Episode start times, one per equal slot, uniformly jittered.
    let mut starts = Vec::with_capacity(spec.wave_count);
    if spec.wave_count > 0 {
        let slot = spec.duration_s / spec.wave_count as f64;
        let free = slot - spec.episode_len();
        if free < 0.0 {
            return Err(SimError::Trajectory {
                id: spec.id.clone(),
                reason: format!(
                    "episode of {:.1} s does not fit a {:.1} s slot",
                    spec.episode_len(),
                    slot
                ),
            });
        }
        for i in 0..spec.wave_count {
            let jitter = if free > 0.0 { rng.random_range(0.0..free) } else { 0.0 };
            starts.push(i as f64 * slot + jitter);
        }
    }

    let drop = spec.v_base - spec.v_min;
    let mut speeds = Vec::with_capacity(n);
    for k in 0..n {
        let t = k as f64 * TRAJECTORY_DT;
        let mut v = spec.v_base;
        for &t0 in &starts {
            let down_end = t0 + drop / spec.decel;
            let hold_end = down_end + spec.hold_s;
            let up_end = hold_end + drop / spec.accel;
            if t >= t0 && t < down_end {
                v = spec.v_base - spec.decel * (t - t0);
            } else if t >= down_end && t < hold_end {
                v = spec.v_min;
            } else if t >= hold_end && t < up_end {
                v = spec.v_min + spec.accel * (t - hold_end);
            }
        }
        // Keep CSVs tidy without affecting dynamics.
        speeds.push((v * 1e6).round() / 1e6);
    }

    let (mut traj, clamped) = LeaderTrajectory::from_speeds(spec.id.clone(), speeds)?;
    debug_assert_eq!(clamped, 0);
    traj.start_t = 0.0;
    Ok(traj)
}

/// The built-in trajectory corpus: four training waves plus six held-out
/// evaluation profiles, each paired with its generation seed.
///
/// Wave floors are calibrated against the fleet-wide braking floor: dips
/// below ~7 m/s make far followers arrive at the jammed region faster than
/// bounded braking can absorb, so every profile here replays collision-free
/// under an uncontrolled platoon of at least 160 vehicles.
pub fn corpus() -> Vec<(WaveSpec, u64)> {
    let spec = |id: &str,
                duration_s: f64,
                v_base: f64,
                wave_count: usize,
                v_min: f64,
                hold_s: f64,
                decel: f64,
                accel: f64| WaveSpec {
        id: id.into(),
        duration_s,
        v_base,
        wave_count,
        v_min,
        hold_s,
        decel,
        accel,
    };
    vec![
        (spec("train_wave_a", 720.0, 29.0, 5, 10.0, 12.0, 1.2, 1.0), 101),
        (spec("train_wave_b", 720.0, 27.0, 6, 8.0, 8.0, 1.5, 1.2), 102),
        (spec("train_wave_c", 800.0, 30.0, 4, 12.0, 20.0, 1.0, 0.8), 103),
        (spec("train_wave_d", 760.0, 26.0, 7, 7.0, 6.0, 2.0, 1.5), 104),
        (spec("eval_freeflow", 600.0, 28.0, 0, 20.0, 0.0, 1.0, 1.0), 201),
        (spec("eval_mixed_a", 700.0, 28.0, 4, 12.0, 10.0, 1.2, 1.0), 202),
        (spec("eval_mixed_b", 700.0, 30.0, 5, 10.0, 8.0, 1.5, 1.2), 203),
        (spec("eval_stopgo_a", 800.0, 26.0, 7, 8.0, 10.0, 2.2, 1.4), 204),
        (spec("eval_stopgo_b", 800.0, 24.0, 8, 7.0, 8.0, 2.5, 1.6), 205),
        (spec("eval_stopgo_c", 750.0, 27.0, 6, 9.0, 12.0, 1.8, 1.1), 206),
    ]
}
