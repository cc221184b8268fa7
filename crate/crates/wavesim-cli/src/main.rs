//! Command-line front end: single simulations, evaluation grids, policy
//! training, string-stability scans, corpus generation, and time-space
//! exports.
//!
//! Exit codes: 0 on success, 1 on usage or input errors, 2 when a
//! simulation faults (collision or non-finite state). Every successful
//! command ends with one `<command> ok ...` line that includes the seed
//! and the active config hash, so runs can be matched to their settings
//! from logs alone. All file outputs land under `--out`.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use wavesim::config::{config_from_str, load_config, SimConfig};
use wavesim::control::PolicyParameters;
use wavesim::data::{corpus, generate_synthetic_wave, load_trajectory, LeaderTrajectory};
use wavesim::dynamics::{stability_boundary, string_stable};
use wavesim::error::SimError;
use wavesim::rl::train::{train, FINAL_CHECKPOINT};
use wavesim::sim::export::{
    write_feeds_csv, write_gap_trace_csv, write_lc_events_csv, write_metrics_csv, write_run_csv,
    write_summary_csv, write_tsd_csv, write_vehicles_csv,
};
use wavesim::sim::matrix::{evaluate_matrix, summarize, EvalGrid};
use wavesim::sim::reference::ReferenceParams;
use wavesim::sim::{run_episode, Policy, RunSpec};

/// Environment variable consulted for the config path when `--config` is
/// not given.
const CONFIG_ENV: &str = "WAVESIM_CONFIG";

#[derive(Parser)]
#[command(
    name = "wavesim",
    version,
    about = "Single-lane mixed-autonomy traffic simulator"
)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct GlobalArgs {
    /// Config file (TOML). Falls back to $WAVESIM_CONFIG, then built-in
    /// defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Dotted config override, e.g. `--set idm.v0=28` (repeatable).
    #[arg(long = "set", value_name = "KEY.PATH=VALUE", global = true)]
    set: Vec<String>,

    /// Master seed; overrides the config file's `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Directory for all file outputs.
    #[arg(long, default_value = "out", global = true)]
    out: PathBuf,

    /// Worker threads (default: one per core).
    #[arg(long, global = true)]
    jobs: Option<usize>,

    /// Single-threaded run with wall-clock fields zeroed, so logs and
    /// outputs are bitwise reproducible.
    #[arg(long, global = true)]
    strict_deterministic: bool,

    /// Force the target-speed planner off regardless of spec/grid files.
    #[arg(long, global = true)]
    no_planner: bool,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one episode from a spec file and write its metrics.
    Simulate(SimulateArgs),
    /// Run a controller-vs-baseline grid and write metrics + summary CSVs.
    Evaluate(EvaluateArgs),
    /// Train a policy with PPO and write checkpoints + a progress log.
    Train(TrainArgs),
    /// Print the car-following stability margin per speed and the
    /// bracketed neutral-stability boundary.
    Stability(StabilityArgs),
    /// Write the built-in trajectory corpus as CSV files.
    GenData,
    /// Run one episode and export only the time-space diagram CSV.
    ExportTsd(SimulateArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Run spec file (TOML).
    #[arg(long)]
    spec: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Grid file (TOML). Defaults to the built-in held-out grid.
    #[arg(long)]
    grid: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// Training trajectories: file paths or built-in ids
    /// (default: every built-in `train_*` wave).
    #[arg(long, value_delimiter = ',')]
    trajs: Vec<String>,
}

#[derive(Args)]
struct StabilityArgs {
    /// Speeds (m/s) to print margins for.
    #[arg(long, value_delimiter = ',', default_value = "10,14,17,19,22,25")]
    speeds: Vec<f64>,

    /// Boundary scan as `lo,hi,step` in m/s.
    #[arg(long, value_delimiter = ',', default_value = "1,29,0.5")]
    scan: Vec<f64>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = u8::from(e.use_stderr());
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let fault = e
                .chain()
                .any(|c| c.downcast_ref::<SimError>().is_some_and(|s| s.is_sim_fault()));
            ExitCode::from(if fault { 2 } else { 1 })
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    let threads = if g.strict_deterministic { Some(1) } else { g.jobs };
    if let Some(n) = threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .context("configuring the worker pool")?;
    }
    let cfg = load_cfg(g)?;
    match &cli.cmd {
        Cmd::Simulate(a) => cmd_simulate(&cfg, g, &a.spec, false),
        Cmd::ExportTsd(a) => cmd_simulate(&cfg, g, &a.spec, true),
        Cmd::Evaluate(a) => cmd_evaluate(&cfg, g, a),
        Cmd::Train(a) => cmd_train(&cfg, g, a),
        Cmd::Stability(a) => cmd_stability(&cfg, a),
        Cmd::GenData => cmd_gen_data(&cfg, g),
    }
}

/// Resolve the active config: `--config`, then $WAVESIM_CONFIG, then
/// built-in defaults; dotted `--set` overrides and `--seed` apply on top.
fn load_cfg(g: &GlobalArgs) -> Result<SimConfig> {
    let mut overrides = g.set.clone();
    if let Some(seed) = g.seed {
        overrides.push(format!("seed={seed}"));
    }
    let path = g
        .config
        .clone()
        .or_else(|| std::env::var_os(CONFIG_ENV).map(PathBuf::from));
    let cfg = match path {
        Some(p) => load_config(&p, &overrides)?,
        None => config_from_str(&SimConfig::default().canonical_toml(), &overrides)?,
    };
    Ok(cfg)
}

fn read_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn ensure_out(g: &GlobalArgs) -> Result<()> {
    std::fs::create_dir_all(&g.out).with_context(|| format!("creating {}", g.out.display()))
}

/// Interpret a trajectory name as a file path if one exists, otherwise as
/// a built-in corpus id.
fn resolve_traj(name: &str) -> Result<LeaderTrajectory> {
    let path = Path::new(name);
    if path.exists() {
        let (traj, clamped) = load_trajectory(path)?;
        if clamped > 0 {
            eprintln!(
                "note: {clamped} speed sample(s) clamped to the storage range in {}",
                path.display()
            );
        }
        return Ok(traj);
    }
    for (spec, seed) in corpus() {
        if spec.id == name {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            return Ok(generate_synthetic_wave(&spec, &mut rng)?);
        }
    }
    let ids: Vec<String> = corpus().into_iter().map(|(s, _)| s.id).collect();
    bail!(
        "trajectory `{name}` is neither a readable file nor a built-in id \
         (built-ins: {})",
        ids.join(", ")
    );
}

fn parse_policy(name: &str, checkpoint: Option<&Path>) -> Result<Policy> {
    match name {
        "idm" => Ok(Policy::Idm),
        "random" => Ok(Policy::Random),
        "reference" => Ok(Policy::Reference(ReferenceParams::default())),
        "checkpoint" => {
            let path =
                checkpoint.context("policy `checkpoint` needs a `checkpoint = \"...\"` path")?;
            let params = PolicyParameters::load_checkpoint(path)?;
            Ok(Policy::Checkpoint(Box::new(params)))
        }
        other => bail!("unknown policy `{other}` (expected idm, random, reference, checkpoint)"),
    }
}

/// One evaluation run, as read from `simulate --spec`.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SpecFile {
    /// Trajectory file path or built-in id.
    traj: String,
    #[serde(default = "default_platoon")]
    platoon_size: usize,
    #[serde(default = "default_penetration")]
    penetration: f64,
    #[serde(default)]
    lc_enabled: bool,
    #[serde(default)]
    planner_enabled: bool,
    #[serde(default = "default_policy_idm")]
    policy: String,
    #[serde(default)]
    checkpoint: Option<PathBuf>,
    #[serde(default)]
    seed: u64,
    #[serde(default = "default_true")]
    warmup: bool,
    #[serde(default)]
    record_tsd: bool,
    #[serde(default)]
    record_gap_traces: bool,
}

fn default_platoon() -> usize {
    50
}
fn default_penetration() -> f64 {
    0.04
}
fn default_policy_idm() -> String {
    "idm".into()
}
fn default_policy_reference() -> String {
    "reference".into()
}
fn default_true() -> bool {
    true
}

impl SpecFile {
    fn into_run_spec(self, g: &GlobalArgs) -> Result<RunSpec> {
        let traj = resolve_traj(&self.traj)?;
        let mut spec = RunSpec::new(traj, self.platoon_size, self.penetration);
        spec.lc_enabled = self.lc_enabled;
        spec.planner_enabled = self.planner_enabled && !g.no_planner;
        spec.policy = parse_policy(&self.policy, self.checkpoint.as_deref())?;
        spec.seed = g.seed.unwrap_or(self.seed);
        spec.warmup = self.warmup;
        spec.record_tsd = self.record_tsd;
        spec.record_gap_traces = self.record_gap_traces;
        spec.validate()?;
        Ok(spec)
    }
}

fn cmd_simulate(cfg: &SimConfig, g: &GlobalArgs, spec_path: &Path, tsd_only: bool) -> Result<()> {
    let file: SpecFile = read_toml(spec_path)?;
    let mut spec = file.into_run_spec(g)?;
    if tsd_only {
        spec.record_tsd = true;
    }
    let outcome = run_episode(cfg, &spec)?;
    let m = &outcome.metrics;
    ensure_out(g)?;
    if tsd_only {
        let path = g.out.join("tsd.csv");
        write_tsd_csv(&path, &outcome.tsd)?;
        println!(
            "export-tsd ok traj={} policy={} seed={} cfg={} rows={} out={}",
            spec.traj.id,
            spec.policy.label(),
            spec.seed,
            cfg.hash(),
            outcome.tsd.len(),
            path.display()
        );
        return Ok(());
    }
    write_run_csv(
        &g.out.join("run.csv"),
        &spec.traj.id,
        spec.policy.label(),
        spec.seed,
        m,
    )?;
    write_vehicles_csv(&g.out.join("vehicles.csv"), m)?;
    if spec.record_tsd {
        write_tsd_csv(&g.out.join("tsd.csv"), &outcome.tsd)?;
    }
    for (id, rows) in &outcome.gap_traces {
        write_gap_trace_csv(&g.out.join(format!("gap_trace_{id}.csv")), rows)?;
    }
    if spec.lc_enabled {
        write_lc_events_csv(&g.out.join("lc_events.csv"), &outcome.lc_events)?;
    }
    if spec.planner_enabled {
        write_feeds_csv(&g.out.join("feeds.csv"), &outcome.feeds)?;
    }
    println!(
        "simulate ok traj={} policy={} seed={} cfg={} steps={} mpg={:.3} vph={:.1} collisions={} out={}",
        spec.traj.id,
        spec.policy.label(),
        spec.seed,
        cfg.hash(),
        m.steps,
        m.system_mpg,
        m.throughput_vph,
        m.collision_count,
        g.out.display()
    );
    Ok(())
}

/// A full evaluation grid, as read from `evaluate --grid`.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct GridFile {
    #[serde(default = "default_eval_trajs")]
    trajectories: Vec<String>,
    #[serde(default = "default_penetrations")]
    penetrations: Vec<f64>,
    #[serde(default = "default_lc_options")]
    lc: Vec<bool>,
    #[serde(default = "default_seeds")]
    seeds: Vec<u64>,
    #[serde(default = "default_platoon")]
    platoon_size: usize,
    #[serde(default)]
    planner_enabled: bool,
    #[serde(default = "default_policy_reference")]
    policy: String,
    #[serde(default)]
    checkpoint: Option<PathBuf>,
}

fn default_eval_trajs() -> Vec<String> {
    corpus()
        .into_iter()
        .filter(|(s, _)| s.id.starts_with("eval_"))
        .map(|(s, _)| s.id)
        .collect()
}
fn default_penetrations() -> Vec<f64> {
    vec![0.04, 0.10]
}
fn default_lc_options() -> Vec<bool> {
    vec![false]
}
fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2]
}

impl Default for GridFile {
    fn default() -> Self {
        GridFile {
            trajectories: default_eval_trajs(),
            penetrations: default_penetrations(),
            lc: default_lc_options(),
            seeds: default_seeds(),
            platoon_size: default_platoon(),
            planner_enabled: false,
            policy: default_policy_reference(),
            checkpoint: None,
        }
    }
}

fn cmd_evaluate(cfg: &SimConfig, g: &GlobalArgs, a: &EvaluateArgs) -> Result<()> {
    let file: GridFile = match &a.grid {
        Some(p) => read_toml(p)?,
        None => GridFile::default(),
    };
    let mut trajectories = Vec::with_capacity(file.trajectories.len());
    for name in &file.trajectories {
        trajectories.push(resolve_traj(name)?);
    }
    let grid = EvalGrid {
        trajectories,
        penetrations: file.penetrations,
        lc_options: file.lc,
        seeds: file.seeds,
        platoon_size: file.platoon_size,
        planner_enabled: file.planner_enabled && !g.no_planner,
        policy: parse_policy(&file.policy, file.checkpoint.as_deref())?,
    };
    let cells = evaluate_matrix(cfg, &grid)?;
    let rows = summarize(&cells);
    ensure_out(g)?;
    write_metrics_csv(&g.out.join("metrics.csv"), &cells)?;
    write_summary_csv(&g.out.join("summary.csv"), &rows)?;
    for c in &cells {
        println!(
            "cell {} mpg={:.3} base={:.3} improvement={:+.2}% vph_delta={:+.2}% collisions={}",
            c.run_id, c.system_mpg, c.baseline_mpg, c.mpg_improvement_pct, c.throughput_delta_pct, c.collisions
        );
    }
    for r in &rows {
        println!(
            "summary traj={} pen={} lc={} seeds={} improvement_mean={:+.2}% improvement_std={:.2} vph_delta_mean={:+.2}%",
            r.traj_id,
            r.penetration,
            r.lc_enabled,
            r.n_seeds,
            r.mean_improvement_pct,
            r.std_improvement_pct,
            r.mean_throughput_delta_pct
        );
    }
    let mean_all = if cells.is_empty() {
        0.0
    } else {
        cells.iter().map(|c| c.mpg_improvement_pct).sum::<f64>() / cells.len() as f64
    };
    println!(
        "evaluate ok cells={} policy={} improvement_mean={:+.2}% seed={} cfg={} out={}",
        cells.len(),
        grid.policy.label(),
        mean_all,
        cfg.seed,
        cfg.hash(),
        g.out.display()
    );
    Ok(())
}

fn cmd_train(cfg: &SimConfig, g: &GlobalArgs, a: &TrainArgs) -> Result<()> {
    let names: Vec<String> = if a.trajs.is_empty() {
        corpus()
            .into_iter()
            .filter(|(s, _)| s.id.starts_with("train_"))
            .map(|(s, _)| s.id)
            .collect()
    } else {
        a.trajs.clone()
    };
    let mut trajs = Vec::with_capacity(names.len());
    for name in &names {
        trajs.push(resolve_traj(name)?);
    }
    ensure_out(g)?;
    // Record the exact settings next to the artifacts they produced.
    let cfg_path = g.out.join("config.toml");
    std::fs::write(&cfg_path, cfg.canonical_toml())
        .with_context(|| format!("writing {}", cfg_path.display()))?;
    let total_iters = cfg.train.iterations;
    let result = train(cfg, &trajs, &g.out, g.strict_deterministic, |row| {
        println!(
            "iter {:>4}/{} n={} reward={:+.4} policy_loss={:+.6} value_loss={:.6} entropy={:.3} grad={:.4} wall={:.2}s",
            row.iter,
            total_iters,
            row.transitions,
            row.mean_ep_reward,
            row.policy_loss,
            row.value_loss,
            row.entropy,
            row.grad_norm,
            row.wall_s
        );
    })?;
    let first = result.rows.first().map_or(0.0, |r| r.mean_ep_reward);
    let last = result.rows.last().map_or(0.0, |r| r.mean_ep_reward);
    println!(
        "train ok iters={} trajs={} first_reward={:+.4} last_reward={:+.4} seed={} cfg={} final={}",
        result.rows.len(),
        trajs.len(),
        first,
        last,
        cfg.seed,
        cfg.hash(),
        g.out.join(FINAL_CHECKPOINT).display()
    );
    Ok(())
}

fn cmd_stability(cfg: &SimConfig, a: &StabilityArgs) -> Result<()> {
    if a.scan.len() != 3 {
        bail!("--scan wants exactly three values: lo,hi,step");
    }
    for &v in &a.speeds {
        let s = string_stable(&cfg.idm, v)?;
        println!(
            "v={:>6.2} margin={:+.6} {}",
            v,
            s.margin,
            if s.stable { "stable" } else { "unstable" }
        );
    }
    let boundary = stability_boundary(&cfg.idm, a.scan[0], a.scan[1], a.scan[2]);
    match boundary {
        Some(b) => println!(
            "stability ok boundary={:.3} scan=[{},{}] seed={} cfg={}",
            b,
            a.scan[0],
            a.scan[1],
            cfg.seed,
            cfg.hash()
        ),
        None => println!(
            "stability ok boundary=none scan=[{},{}] seed={} cfg={}",
            a.scan[0],
            a.scan[1],
            cfg.seed,
            cfg.hash()
        ),
    }
    Ok(())
}

fn cmd_gen_data(cfg: &SimConfig, g: &GlobalArgs) -> Result<()> {
    ensure_out(g)?;
    let mut files = 0;
    for (spec, seed) in corpus() {
        let traj = generate_synthetic_wave(&spec, &mut ChaCha8Rng::seed_from_u64(seed))?;
        let path = g.out.join(format!("{}.csv", spec.id));
        traj.write_csv(&path)?;
        println!(
            "wrote {} ({} samples, {:.0}s)",
            path.display(),
            traj.len(),
            traj.duration()
        );
        files += 1;
    }
    println!(
        "gen-data ok files={files} seed={} cfg={} out={}",
        cfg.seed,
        cfg.hash(),
        g.out.display()
    );
    Ok(())
}
