//! Experiment configuration: a sectioned TOML document with `[ring]`,
//! `[lane_change]`, `[train]`, `[curriculum]`, `[highway]` and `[run]`.

use std::path::Path;

use ringflow::highway_env::HighwayConfig;
use ringflow::perturbation::LaneChangeConfig;
use ringflow::ring_env::RingEnvConfig;
use ringflow::trpo::{CurriculumSchedule, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CurriculumSection {
    pub enabled: bool,
    pub n_pretrain: usize,
    pub n_train: usize,
}

impl Default for CurriculumSection {
    fn default() -> Self {
        Self { enabled: true, n_pretrain: 200, n_train: 500 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub experiment_id: String,
    pub output_dir: String,
    /// Episodes per `eval` invocation.
    pub eval_episodes: usize,
    /// Training checkpoints every this many iterations (0 disables).
    pub checkpoint_every: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            experiment_id: "ringflow".into(),
            output_dir: "runs".into(),
            eval_episodes: 100,
            checkpoint_every: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub ring: RingEnvConfig,
    pub lane_change: LaneChangeConfig,
    pub train: TrainConfig,
    pub curriculum: CurriculumSection,
    pub highway: HighwayConfig,
    pub run: RunSection,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> CliResult<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::Config(one_line(&e.to_string())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            CliError::Config(msg) => CliError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Load `path` (or defaults when `None`) and apply `section.key=value`
    /// overrides in order.
    pub fn load_with_overrides(path: Option<&Path>, overrides: &[String]) -> CliResult<Self> {
        let base = match path {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        base.with_overrides(overrides)
    }

    pub fn with_overrides(&self, overrides: &[String]) -> CliResult<Self> {
        if overrides.is_empty() {
            return Ok(self.clone());
        }
        let mut table: toml::Table = toml::Table::try_from(self).map_err(|e| CliError::Config(e.to_string()))?;
        for ov in overrides {
            apply_override(&mut table, ov)?;
        }
        let cfg: Self = table
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Config(format!("after overrides: {}", one_line(&e.to_string()))))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration is always representable as TOML")
    }

    /// SHA-256 of the canonical TOML rendering, hex encoded.
    pub fn config_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    /// The ring environment with the `[lane_change]` section applied.
    pub fn ring_env(&self) -> RingEnvConfig {
        RingEnvConfig { lane_change: self.lane_change.clone(), ..self.ring.clone() }
    }

    pub fn schedule(&self) -> CurriculumSchedule {
        let c = &self.curriculum;
        let n = self.ring.n_av.max(1);
        if c.enabled {
            CurriculumSchedule::growing(n, c.n_pretrain, c.n_train, self.lane_change.clone())
        } else {
            CurriculumSchedule::ablation(n, c.n_pretrain, c.n_train, self.lane_change.clone())
        }
    }

    pub fn validate(&self) -> CliResult<()> {
        if self.ring.n_av == 0 {
            return Err(CliError::Config("ring.n_av must be >= 1".into()));
        }
        let invalid = |e: ringflow::Error| CliError::Config(e.to_string());
        self.ring_env().validate().map_err(invalid)?;
        self.train.validate(self.ring.horizon_steps).map_err(invalid)?;
        self.highway.validate().map_err(invalid)?;
        if self.train.seeds.is_empty() {
            return Err(CliError::Config("train.seeds must not be empty".into()));
        }
        if self.highway.obs_dim() != self.ring.obs_dim() {
            return Err(CliError::Config("highway.obs_frames must match ring.obs_frames".into()));
        }
        Ok(())
    }
}

fn one_line(msg: &str) -> String {
    msg.lines().map(str::trim).filter(|l| !l.is_empty()).collect::<Vec<_>>().join(" | ")
}

/// Parse the right-hand side of an override as a TOML value, falling back to
/// a bare string.
fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn apply_override(table: &mut toml::Table, assignment: &str) -> CliResult<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override {assignment:?} is not of the form section.key=value")))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.len() < 2 || keys.iter().any(|k| k.is_empty()) {
        return Err(CliError::Config(format!("override key {path:?} must be section.key")));
    }
    let mut node = table;
    for key in &keys[..keys.len() - 1] {
        let entry = node
            .entry(key.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("override path {path:?}: {key} is not a section")))?;
    }
    node.insert(keys[keys.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}
