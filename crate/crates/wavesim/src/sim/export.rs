//! Machine-readable CSV exports. Every writer produces deterministic bytes
//! for deterministic inputs (floats print in shortest round-trip form, times
//! on the fixed step grid with two decimals).

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Result, SimError};
use crate::lanechange::LcEvent;
use crate::planner::SegmentFeed;
use crate::vehicle::TsdRecord;

use super::matrix::{CellResult, SummaryRow};
use super::{GapTraceRow, RunMetrics};

fn writer(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).map_err(|e| SimError::io(path, e))?,
    ))
}

fn finish(mut w: BufWriter<File>, path: &Path) -> Result<()> {
    w.flush().map_err(|e| SimError::io(path, e))
}

/// Time-space diagram: one row per vehicle per completed step.
pub fn write_tsd_csv(path: &Path, records: &[TsdRecord]) -> Result<()> {
    let mut w = writer(path)?;
    let mut emit = || -> std::io::Result<()> {
        writeln!(w, "vehicle_id,t,x,v")?;
        for r in records {
            writeln!(w, "{},{:.2},{},{}", r.vehicle_id, r.t, r.x, r.v)?;
        }
        Ok(())
    };
    emit().map_err(|e| SimError::io(path, e))?;
    finish(w, path)
}

/// One AV's gap trace with the wrapper thresholds and active branch.
pub fn write_gap_trace_csv(path: &Path, rows: &[GapTraceRow]) -> Result<()> {
    let mut w = writer(path)?;
    let mut emit = || -> std::io::Result<()> {
        writeln!(w, "t,h,h_min,h_max,branch")?;
        for r in rows {
            writeln!(
                w,
                "{:.2},{},{},{},{}",
                r.t,
                r.h,
                r.h_min,
                r.h_max,
                r.branch.label()
            )?;
        }
        Ok(())
    };
    emit().map_err(|e| SimError::io(path, e))?;
    finish(w, path)
}

/// Lane-change event log.
pub fn write_lc_events_csv(path: &Path, events: &[LcEvent]) -> Result<()> {
    let mut w = writer(path)?;
    let mut emit = || -> std::io::Result<()> {
        writeln!(w, "step,ego_id,event,inserted_id,gap_before,gap_after")?;
        for e in events {
            let inserted = e.inserted_id.map_or(String::new(), |id| id.to_string());
            writeln!(
                w,
                "{},{},{},{},{},{}",
                e.step,
                e.ego_id,
                e.kind.label(),
                inserted,
                e.gap_before,
                e.gap_after
            )?;
        }
        Ok(())
    };
    emit().map_err(|e| SimError::io(path, e))?;
    finish(w, path)
}

/// Segment-speed feeds as issued over the run (one row per segment).
pub fn write_feeds_csv(path: &Path, feeds: &[SegmentFeed]) -> Result<()> {
    let mut w = writer(path)?;
    let mut emit = || -> std::io::Result<()> {
        writeln!(w, "issued_at,start_x,end_x,avg_speed")?;
        for f in feeds {
            for s in &f.segments {
                writeln!(w, "{:.1},{},{},{}", f.issued_at, s.start_x, s.end_x, s.avg_speed)?;
            }
        }
        Ok(())
    };
    emit().map_err(|e| SimError::io(path, e))?;
    finish(w, path)
}

/// Run-level metrics of a single episode as a one-row CSV.
pub fn write_run_csv(
    path: &Path,
    traj_id: &str,
    policy: &str,
    seed: u64,
    m: &RunMetrics,
) -> Result<()> {
    let mut w = writer(path)?;
    let mut emit = || -> std::io::Result<()> {
        writeln!(
            w,
            "traj_id,policy,seed,steps,duration_s,vehicles,total_miles,total_gallons,\
             system_mpg,throughput_vph,collisions,failsafe,gap_close,pass_through"
        )?;
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            traj_id,
            policy,
            seed,
            m.steps,
            m.duration_s,
            m.final_vehicle_count,
            m.total_miles,
            m.total_gallons,
            m.system_mpg,
            m.throughput_vph,
            m.collision_count,
            m.branch_counts[0],
            m.branch_counts[1],
            m.branch_counts[2]
        )?;
        Ok(())
    };
    emit().map_err(|e| SimError::io(path, e))?;
    finish(w, path)
}

/// Per-vehicle summaries for one episode.
pub fn write_vehicles_csv(path: &Path, m: &RunMetrics) -> Result<()> {
    let mut w = writer(path)?;
    let mut emit = || -> std::io::Result<()> {
        writeln!(w, "id,kind,distance_m,fuel_gal,speed_mean,speed_std,fuel_clamp_events")?;
        for v in &m.per_vehicle {
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                v.id,
                v.kind.label(),
                v.distance_m,
                v.fuel_gal,
                v.speed_mean,
                v.speed_std,
                v.fuel_clamp_events
            )?;
        }
        Ok(())
    };
    emit().map_err(|e| SimError::io(path, e))?;
    finish(w, path)
}

/// Evaluation cells, one row per (trajectory, penetration, lc, seed).
pub fn write_metrics_csv(path: &Path, cells: &[CellResult]) -> Result<()> {
    let mut w = writer(path)?;
    let mut emit = || -> std::io::Result<()> {
        writeln!(
            w,
            "run_id,traj_id,penetration,lc_enabled,system_mpg,mpg_improvement_pct,throughput_vph,collisions"
        )?;
        for c in cells {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{}",
                c.run_id,
                c.traj_id,
                c.penetration,
                c.lc_enabled,
                c.system_mpg,
                c.mpg_improvement_pct,
                c.throughput_vph,
                c.collisions
            )?;
        }
        Ok(())
    };
    emit().map_err(|e| SimError::io(path, e))?;
    finish(w, path)
}

/// Seed-aggregated summary rows.
pub fn write_summary_csv(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    let mut w = writer(path)?;
    let mut emit = || -> std::io::Result<()> {
        writeln!(
            w,
            "traj_id,penetration,lc_enabled,n_seeds,mean_improvement_pct,std_improvement_pct,mean_throughput_delta_pct"
        )?;
        for r in rows {
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                r.traj_id,
                r.penetration,
                r.lc_enabled,
                r.n_seeds,
                r.mean_improvement_pct,
                r.std_improvement_pct,
                r.mean_throughput_delta_pct
            )?;
        }
        Ok(())
    };
    emit().map_err(|e| SimError::io(path, e))?;
    finish(w, path)
}
