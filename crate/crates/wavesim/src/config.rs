//! Run configuration: one TOML file (plus dotted-path overrides) describes a
//! complete, validated, hashable experiment.
//!
//! Every numeric field is bounds-checked in [`SimConfig::validate`], which
//! runs on every load path — an invalid `SimConfig` cannot escape this
//! module. The canonical serialization is the reproducibility surface: two
//! runs with equal config hashes and seeds produce equal outputs.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dynamics::IdmParams;
use crate::energy::EnergyParams;
use crate::error::{Result, SimError};
use crate::lanechange::LcParams;
use crate::planner::PlannerParams;
use crate::vehicle::VehicleKind;

/// Reward shaping coefficients: energy, action magnitude, gap-violation, and
/// time-headway penalty weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardCoeffs {
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    pub c4: f64,
}

impl Default for RewardCoeffs {
    fn default() -> Self {
        RewardCoeffs { c1: 0.06, c2: 0.02, c3: 0.6, c4: 0.005 }
    }
}

impl RewardCoeffs {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("reward.c1", self.c1),
            ("reward.c2", self.c2),
            ("reward.c3", self.c3),
            ("reward.c4", self.c4),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(SimError::InvalidConfig {
                    field: name.into(),
                    value: format!("{v}"),
                    reason: "must be finite and non-negative".into(),
                });
            }
        }
        Ok(())
    }
}

/// PPO training hyperparameters. The defaults are the desk-scale profile;
/// `config/paper.toml` commits the full-scale alternative.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Discount factor.
    pub gamma: f64,
    /// GAE exponential weight.
    pub gae_lambda: f64,
    /// PPO clipping radius.
    pub clip_eps: f64,
    /// Adam learning rate, shared by actor, value, and log-std.
    pub lr: f64,
    /// Optimization epochs per collected batch.
    pub epochs_per_iter: u32,
    /// Training iterations (collect + optimize cycles).
    pub iterations: u32,
    /// Control decisions collected per iteration.
    pub batch_size: u32,
    /// Minibatch size for gradient steps; must divide `batch_size`.
    pub minibatch_size: u32,
    /// Weight of the value loss in the combined objective.
    pub value_coeff: f64,
    /// Entropy bonus weight.
    pub entropy_coeff: f64,
    /// Initial value of the state-independent log standard deviation.
    pub log_std_init: f64,
    /// Write a checkpoint every this many iterations (and at the end).
    pub checkpoint_every: u32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            gamma: 0.999,
            gae_lambda: 0.99,
            clip_eps: 0.2,
            lr: 3e-4,
            epochs_per_iter: 5,
            iterations: 200,
            batch_size: 1500,
            minibatch_size: 500,
            value_coeff: 0.5,
            entropy_coeff: 0.0,
            log_std_init: 0.0,
            checkpoint_every: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |field: &str, value: String, reason: &str| {
            Err(SimError::InvalidConfig {
                field: field.into(),
                value,
                reason: reason.into(),
            })
        };
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return err("train.gamma", format!("{}", self.gamma), "must lie in (0, 1]");
        }
        if !(self.gae_lambda >= 0.0 && self.gae_lambda <= 1.0) {
            return err("train.gae_lambda", format!("{}", self.gae_lambda), "must lie in [0, 1]");
        }
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return err("train.clip_eps", format!("{}", self.clip_eps), "must lie in (0, 1)");
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return err("train.lr", format!("{}", self.lr), "must be positive");
        }
        if self.epochs_per_iter == 0 {
            return err("train.epochs_per_iter", "0".into(), "must be >= 1");
        }
        if self.iterations == 0 {
            return err("train.iterations", "0".into(), "must be >= 1");
        }
        if self.batch_size == 0 || self.minibatch_size == 0 {
            return err("train.batch_size", "0".into(), "batch sizes must be >= 1");
        }
        if self.minibatch_size > self.batch_size || self.batch_size % self.minibatch_size != 0 {
            return err(
                "train.minibatch_size",
                format!("{}", self.minibatch_size),
                "must divide batch_size",
            );
        }
        if !(self.value_coeff.is_finite() && self.value_coeff >= 0.0)
            || !(self.entropy_coeff.is_finite() && self.entropy_coeff >= 0.0)
        {
            return err(
                "train.value_coeff",
                format!("{}/{}", self.value_coeff, self.entropy_coeff),
                "loss weights must be finite and non-negative",
            );
        }
        if !self.log_std_init.is_finite() {
            return err("train.log_std_init", format!("{}", self.log_std_init), "must be finite");
        }
        if self.checkpoint_every == 0 {
            return err("train.checkpoint_every", "0".into(), "must be >= 1");
        }
        Ok(())
    }
}

/// Ordered vehicle-kind sequence, written compactly as e.g. `"L A H*7"`
/// (leader, one controlled vehicle, seven humans).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct PlatoonLayout(pub Vec<VehicleKind>);

impl PlatoonLayout {
    pub fn kinds(&self) -> &[VehicleKind] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Index of the first controlled vehicle, if any.
    pub fn av_index(&self) -> Option<usize> {
        self.0.iter().position(|k| *k == VehicleKind::Av)
    }
}

impl std::str::FromStr for PlatoonLayout {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self> {
        let mut kinds = Vec::new();
        for tok in s.split_whitespace() {
            let (sym, count) = match tok.split_once('*') {
                Some((sym, n)) => {
                    let n: usize = n.parse().map_err(|_| SimError::InvalidConfig {
                        field: "platoon_layout".into(),
                        value: tok.into(),
                        reason: "repeat count must be a positive integer".into(),
                    })?;
                    (sym, n)
                }
                None => (tok, 1),
            };
            if count == 0 {
                return Err(SimError::InvalidConfig {
                    field: "platoon_layout".into(),
                    value: tok.into(),
                    reason: "repeat count must be a positive integer".into(),
                });
            }
            let kind = match sym.to_ascii_uppercase().as_str() {
                "L" => VehicleKind::TrajectoryLeader,
                "A" => VehicleKind::Av,
                "H" => VehicleKind::Human,
                _ => {
                    return Err(SimError::InvalidConfig {
                        field: "platoon_layout".into(),
                        value: tok.into(),
                        reason: "expected L, A, or H tokens".into(),
                    })
                }
            };
            kinds.extend(std::iter::repeat(kind).take(count));
        }
        if kinds.is_empty() {
            return Err(SimError::InvalidConfig {
                field: "platoon_layout".into(),
                value: s.into(),
                reason: "must name at least one vehicle".into(),
            });
        }
        Ok(PlatoonLayout(kinds))
    }
}

impl fmt::Display for PlatoonLayout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sym = |k: &VehicleKind| match k {
            VehicleKind::TrajectoryLeader => "L",
            VehicleKind::Av => "A",
            VehicleKind::Human => "H",
        };
        let mut first = true;
        let mut i = 0;
        while i < self.0.len() {
            let mut j = i + 1;
            while j < self.0.len() && self.0[j] == self.0[i] {
                j += 1;
            }
            if !first {
                write!(f, " ")?;
            }
            first = false;
            match j - i {
                1 => write!(f, "{}", sym(&self.0[i]))?,
                n => write!(f, "{}*{n}", sym(&self.0[i]))?,
            }
            i = j;
        }
        Ok(())
    }
}

impl TryFrom<String> for PlatoonLayout {
    type Error = SimError;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<PlatoonLayout> for String {
    fn from(l: PlatoonLayout) -> String {
        l.to_string()
    }
}

/// Complete experiment configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    /// Master seed; every random stream in a run derives from it.
    pub seed: u64,
    /// Simulation step, s.
    pub dt: f64,
    /// Simulation steps per control decision.
    pub action_repeat: u32,
    /// Control decisions per training episode.
    pub horizon_env_steps: u32,
    /// Training platoon composition, leader first.
    pub platoon_layout: PlatoonLayout,
    /// [v_lo, v_hi] in m/s, enforced at integration time.
    pub speed_bounds: [f64; 2],
    /// [a_lo, a_hi] in m/s² for controlled vehicles.
    pub accel_bounds: [f64; 2],
    pub idm: IdmParams,
    pub energy: EnergyParams,
    pub lc: LcParams,
    pub planner: PlannerParams,
    pub reward: RewardCoeffs,
    pub train: TrainConfig,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            seed: 0,
            dt: 0.1,
            action_repeat: 10,
            horizon_env_steps: 50,
            platoon_layout: "L A H*7".parse().expect("default layout parses"),
            speed_bounds: [0.0, 35.0],
            accel_bounds: [-3.0, 1.5],
            idm: IdmParams::default(),
            energy: EnergyParams::default(),
            lc: LcParams::default(),
            planner: PlannerParams::default(),
            reward: RewardCoeffs::default(),
            train: TrainConfig::default(),
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |field: &str, value: String, reason: &str| {
            Err(SimError::InvalidConfig {
                field: field.into(),
                value,
                reason: reason.into(),
            })
        };
        if !(self.dt.is_finite() && self.dt > 0.0 && self.dt <= 1.0) {
            return err("dt", format!("{}", self.dt), "must lie in (0, 1] seconds");
        }
        if self.action_repeat == 0 {
            return err("action_repeat", "0".into(), "must be >= 1");
        }
        if self.horizon_env_steps == 0 {
            return err("horizon_env_steps", "0".into(), "must be >= 1");
        }
        let [v_lo, v_hi] = self.speed_bounds;
        if !(v_lo.is_finite() && v_hi.is_finite() && 0.0 <= v_lo && v_lo < v_hi && v_hi <= 40.0) {
            return err(
                "speed_bounds",
                format!("[{v_lo}, {v_hi}]"),
                "must satisfy 0 <= v_lo < v_hi <= 40",
            );
        }
        let [a_lo, a_hi] = self.accel_bounds;
        if !(a_lo.is_finite() && a_hi.is_finite() && a_lo < 0.0 && 0.0 < a_hi && a_hi <= 10.0) {
            return err(
                "accel_bounds",
                format!("[{a_lo}, {a_hi}]"),
                "must bracket zero with a_hi <= 10",
            );
        }
        if self.platoon_layout.is_empty() {
            return err("platoon_layout", String::new(), "must be non-empty");
        }
        let kinds = self.platoon_layout.kinds();
        if kinds[0] != VehicleKind::TrajectoryLeader {
            return err(
                "platoon_layout",
                self.platoon_layout.to_string(),
                "must start with the trajectory leader (L)",
            );
        }
        if kinds.len() < 2 {
            return err(
                "platoon_layout",
                self.platoon_layout.to_string(),
                "needs at least one vehicle behind the leader",
            );
        }
        if kinds[1..].iter().any(|k| *k == VehicleKind::TrajectoryLeader) {
            return err(
                "platoon_layout",
                self.platoon_layout.to_string(),
                "must contain exactly one trajectory leader",
            );
        }
        self.idm.validate()?;
        self.energy.validate()?;
        self.lc.validate()?;
        self.planner.validate()?;
        self.reward.validate()?;
        self.train.validate()?;
        if self.train.batch_size % self.horizon_env_steps != 0 {
            return err(
                "train.batch_size",
                format!("{}", self.train.batch_size),
                "must be a whole number of episodes (divisible by horizon_env_steps)",
            );
        }
        if self.lc.min_insert_gap < self.idm.s0 {
            return err(
                "lc.min_insert_gap",
                format!("{}", self.lc.min_insert_gap),
                "must be at least the jam distance idm.s0",
            );
        }
        Ok(())
    }

    /// Simulation steps in one training episode.
    pub fn sim_steps_per_episode(&self) -> usize {
        self.horizon_env_steps as usize * self.action_repeat as usize
    }

    /// Canonical serialized form; input to the config hash.
    pub fn canonical_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// First 12 hex digits of the SHA-256 of the canonical serialization.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical_toml().as_bytes());
        digest[..6].iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Parse a config from TOML text, apply `key.path=value` overrides, validate.
pub fn config_from_str(text: &str, overrides: &[String]) -> Result<SimConfig> {
    let parse_err = |reason: String| SimError::Parse {
        path: "<config>".into(),
        reason,
    };
    let mut value: toml::Value =
        toml::from_str(text).map_err(|e| parse_err(e.to_string()))?;
    for spec in overrides {
        apply_override(&mut value, spec)?;
    }
    let cfg: SimConfig = value.try_into().map_err(|e: toml::de::Error| parse_err(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Load and validate a config file, applying overrides on top.
pub fn load_config(path: &Path, overrides: &[String]) -> Result<SimConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| SimError::io(path, e))?;
    let parse_err = |reason: String| SimError::Parse {
        path: path.to_path_buf(),
        reason,
    };
    let mut value: toml::Value =
        toml::from_str(&text).map_err(|e| parse_err(e.to_string()))?;
    for spec in overrides {
        apply_override(&mut value, spec)?;
    }
    let cfg: SimConfig = value.try_into().map_err(|e: toml::de::Error| parse_err(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Set one dotted-path key in a parsed TOML tree. The value side is parsed
/// as TOML (so `1.5`, `true`, `[0,35]` work) and falls back to a plain
/// string otherwise. Unknown keys are rejected later, at deserialization.
pub fn apply_override(root: &mut toml::Value, spec: &str) -> Result<()> {
    let bad = |reason: &str| {
        Err(SimError::InvalidConfig {
            field: "--set".into(),
            value: spec.into(),
            reason: reason.into(),
        })
    };
    let Some((path, raw)) = spec.split_once('=') else {
        return bad("expected key.path=value");
    };
    let path = path.trim();
    let raw = raw.trim();
    if path.is_empty() || path.split('.').any(|p| p.is_empty()) {
        return bad("key path is empty");
    }
    let parsed = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));

    let parts: Vec<&str> = path.split('.').collect();
    let mut node = root;
    for part in &parts[..parts.len() - 1] {
        let table = match node.as_table_mut() {
            Some(t) => t,
            None => return bad("key path crosses a non-table value"),
        };
        node = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    match node.as_table_mut() {
        Some(t) => {
            t.insert(parts[parts.len() - 1].to_string(), parsed);
            Ok(())
        }
        None => bad("key path crosses a non-table value"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_fill_the_contract() {
        let cfg = SimConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.dt, 0.1);
        assert_eq!(cfg.action_repeat, 10);
        assert_eq!(cfg.horizon_env_steps, 50);
        assert_eq!(cfg.sim_steps_per_episode(), 500);
        assert_eq!(cfg.speed_bounds, [0.0, 35.0]);
        assert_eq!(cfg.accel_bounds, [-3.0, 1.5]);
        assert_eq!(cfg.platoon_layout.len(), 9);
        assert_eq!(cfg.platoon_layout.av_index(), Some(1));
        assert_eq!(
            (cfg.reward.c1, cfg.reward.c2, cfg.reward.c3, cfg.reward.c4),
            (0.06, 0.02, 0.6, 0.005)
        );
    }

    #[test]
    fn minimal_file_gets_defaults() {
        let cfg = config_from_str("seed = 7\n", &[]).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.dt, 0.1);
        assert_eq!(cfg.action_repeat, 10);
        assert_eq!(cfg.speed_bounds, [0.0, 35.0]);
        assert_eq!(cfg.accel_bounds, [-3.0, 1.5]);
    }

    #[test]
    fn zero_dt_is_named_in_the_error() {
        let err = config_from_str("dt = 0.0\n", &[]).unwrap_err().to_string();
        assert!(err.contains("dt"), "{err}");
    }

    #[test]
    fn reward_coeffs_echo_exactly() {
        let cfg = config_from_str(
            "[reward]\nc1 = 0.06\nc2 = 0.02\nc3 = 0.6\nc4 = 0.005\n",
            &[],
        )
        .unwrap();
        assert_eq!(cfg.reward, RewardCoeffs::default());
    }

    #[test]
    fn serialization_round_trips() {
        for cfg in [SimConfig::default(), {
            let mut c = SimConfig::default();
            c.seed = 99;
            c.idm.t_headway = 1.3;
            c.platoon_layout = "L A H*24".parse().unwrap();
            c.train.batch_size = 9000;
            c.train.minibatch_size = 3000;
            c
        }] {
            let text = cfg.canonical_toml();
            let back = config_from_str(&text, &[]).unwrap();
            assert_eq!(back, cfg);
            assert_eq!(back.hash(), cfg.hash());
        }
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = config_from_str("bogus = 1\n", &[]).unwrap_err().to_string();
        assert!(err.contains("bogus"), "{err}");
        let err = config_from_str("[idm]\nzeta = 1\n", &[]).unwrap_err().to_string();
        assert!(err.contains("zeta"), "{err}");
    }

    #[test]
    fn overrides_set_nested_fields() {
        let cfg = config_from_str(
            "",
            &[
                "idm.T=1.2".into(),
                "train.lr=0.001".into(),
                "seed=9".into(),
                "platoon_layout=L A H*24".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.idm.t_headway, 1.2);
        assert_eq!(cfg.train.lr, 0.001);
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.platoon_layout.len(), 26);
    }

    #[test]
    fn overrides_are_schema_checked() {
        let err = config_from_str("", &["idm.nope=1".into()]).unwrap_err().to_string();
        assert!(err.contains("nope"), "{err}");
        let err = config_from_str("", &["justakey".into()]).unwrap_err().to_string();
        assert!(err.contains("key.path=value"), "{err}");
    }

    #[test]
    fn hash_tracks_content() {
        let a = SimConfig::default();
        let mut b = SimConfig::default();
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 12);
        assert!(a.hash().chars().all(|c| c.is_ascii_hexdigit()));
    }

    #[test]
    fn layout_parses_and_prints_compactly() {
        let l: PlatoonLayout = "l a h*2 a h".parse().unwrap();
        assert_eq!(l.len(), 6);
        assert_eq!(l.to_string(), "L A H*2 A H");
        assert!("".parse::<PlatoonLayout>().is_err());
        assert!("X".parse::<PlatoonLayout>().is_err());
        assert!("H*0".parse::<PlatoonLayout>().is_err());

        let mut cfg = SimConfig::default();
        cfg.platoon_layout = "A H".parse().unwrap();
        assert!(cfg.validate().is_err(), "leader must come first");
        cfg.platoon_layout = "L H L".parse().unwrap();
        assert!(cfg.validate().is_err(), "single leader only");
    }

    #[test]
    fn committed_reference_files_match_code_defaults() {
        let root = concat!(env!("CARGO_MANIFEST_DIR"), "/../..");
        let default = load_config(Path::new(&format!("{root}/config/default.toml")), &[]).unwrap();
        assert_eq!(default, SimConfig::default());

        let paper = load_config(Path::new(&format!("{root}/config/paper.toml")), &[]).unwrap();
        assert_eq!(paper.platoon_layout.len(), 26);
        assert_eq!(paper.train.batch_size, 9000);
        assert_eq!(paper.train.minibatch_size, 3000);
        assert_eq!(paper.train.iterations, 2500);
        assert_eq!(paper.reward, RewardCoeffs::default());
    }
}
