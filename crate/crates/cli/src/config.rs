//! Run configuration.
//!
//! Config files are flat `section.key = value` lines. Values are JSON
//! literals (`0.5`, `[128, 64]`, `true`) or bare words, which are read as
//! strings (`returns.metric = pixel`). `#` starts a comment. Keys are checked
//! against the defaults, so a typo is an error rather than a silent no-op.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use bcva_core::helpgate::{default_classifier_thresholds, default_nus, default_value_epsilons};
use bcva_core::{DoorWorldConfig, ExpertConfig, ModelConfig, ObservationSpec, ReturnConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GateGrids {
    pub value_epsilons: Vec<f64>,
    pub classifier_thresholds: Vec<f64>,
    pub nus: Vec<u32>,
}

impl Default for GateGrids {
    fn default() -> Self {
        Self {
            value_epsilons: default_value_epsilons(),
            classifier_thresholds: default_classifier_thresholds(),
            nus: default_nus(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    pub validation_fraction: f64,
    pub salt: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            validation_fraction: 0.25,
            salt: 1,
        }
    }
}

/// Dataset sizes and the first world seed of each generator. Episode `i`
/// uses seed `*_seed + i`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub demos: u64,
    pub rollouts: u64,
    pub demo_seed: u64,
    pub rollout_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            demos: 1000,
            rollouts: 2000,
            demo_seed: 0,
            rollout_seed: 1_000_000,
        }
    }
}

/// World seeds reserved for each loop generation.
pub const LOOP_SEED_BLOCK: u64 = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoopConfig {
    pub generations: u32,
    /// Generation-0 rollouts added to the dataset.
    pub bootstrap_rollouts: u64,
    /// Generation-0 rollouts held out as the fixed validation set.
    pub validation_rollouts: u64,
    pub rollouts_per_generation: u64,
    /// Expert demonstrations recorded per help request.
    pub demos_per_help: u64,
    /// First world seed used by the loop's rollouts.
    pub seed: u64,
}

impl Default for LoopConfig {
    fn default() -> Self {
        Self {
            generations: 3,
            bootstrap_rollouts: 400,
            validation_rollouts: 400,
            rollouts_per_generation: 200,
            demos_per_help: 1,
            seed: 10_000_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    pub demos: PathBuf,
    pub rollouts: PathBuf,
    pub labeled: PathBuf,
    pub checkpoint: PathBuf,
    pub eval_dir: PathBuf,
    pub run_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            demos: "demos.jsonl".into(),
            rollouts: "rollouts.jsonl".into(),
            labeled: "labeled.jsonl".into(),
            checkpoint: "model.ckpt".into(),
            eval_dir: "eval".into(),
            run_dir: "run".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub world: DoorWorldConfig,
    /// Behavior of the noisy expert that produces failure-bearing rollouts.
    pub expert: ExpertConfig,
    pub observation: ObservationSpec,
    pub returns: ReturnConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub gate: GateGrids,
    pub split: SplitConfig,
    pub data: DataConfig,
    #[serde(rename = "loop")]
    pub loop_: LoopConfig,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            world: DoorWorldConfig::default(),
            expert: ExpertConfig {
                noise_std: 0.5,
                ..ExpertConfig::default()
            },
            observation: ObservationSpec::new(32, 32, 1).expect("valid default spec"),
            returns: ReturnConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig {
                steps_per_epoch: 150,
                ..TrainConfig::default()
            },
            gate: GateGrids::default(),
            split: SplitConfig::default(),
            data: DataConfig::default(),
            loop_: LoopConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

impl RunConfig {
    /// Defaults overlaid with a config file (if any) and then `overrides`,
    /// each of the form `key=value`.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut pairs = Vec::new();
        if let Some(p) = path {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
            pairs.extend(parse_flat(&text, &p.display().to_string())?);
        }
        for (i, o) in overrides.iter().enumerate() {
            let (k, v) = o.split_once('=').ok_or_else(|| {
                CliError::Usage(format!("--set expects key=value, got `{o}`"))
            })?;
            pairs.push((k.trim().to_string(), v.trim().to_string(), format!("--set #{}", i + 1)));
        }
        Self::from_pairs(&pairs)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_pairs(&parse_flat(text, "config")?)
    }

    fn from_pairs(pairs: &[(String, String, String)]) -> Result<Self> {
        let mut tree = serde_json::to_value(Self::default()).expect("config serializes");
        for (key, raw, origin) in pairs {
            set_path(&mut tree, key, parse_value(raw))
                .map_err(|m| CliError::Config(format!("{origin}: {m}")))?;
        }
        let cfg: Self = serde_path_to_error::deserialize(tree).map_err(|e| {
            CliError::Config(format!("`{}`: {}", e.path(), e.inner()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let c = |e: String| CliError::Config(e);
        self.world.validate().map_err(|e| c(e.to_string()))?;
        self.expert.validate().map_err(|e| c(e.to_string()))?;
        self.observation.validate().map_err(|e| c(e.to_string()))?;
        self.returns.validate().map_err(|e| c(e.to_string()))?;
        self.model.validate().map_err(|e| c(e.to_string()))?;
        self.train.validate().map_err(|e| c(e.to_string()))?;
        let g = &self.gate;
        if g.value_epsilons.is_empty() || g.classifier_thresholds.is_empty() || g.nus.is_empty() {
            return Err(c("gate grids must be non-empty".into()));
        }
        if g.nus.contains(&0) {
            return Err(c("gate.nus entries must be >= 1".into()));
        }
        let f = self.split.validation_fraction;
        if !(f > 0.0 && f < 1.0) {
            return Err(c(format!("split.validation_fraction must lie in (0, 1), got {f}")));
        }
        let l = &self.loop_;
        if l.generations == 0 {
            return Err(c("loop.generations must be >= 1".into()));
        }
        if l.validation_rollouts == 0 {
            return Err(c("loop.validation_rollouts must be >= 1".into()));
        }
        if l.bootstrap_rollouts + l.validation_rollouts > LOOP_SEED_BLOCK || l.rollouts_per_generation > LOOP_SEED_BLOCK {
            return Err(c(format!("loop rollout counts must fit in {LOOP_SEED_BLOCK} seeds per generation")));
        }
        let p = &self.paths;
        let all = [&p.demos, &p.rollouts, &p.labeled, &p.checkpoint, &p.eval_dir, &p.run_dir];
        let distinct: BTreeSet<_> = all.iter().collect();
        if distinct.len() != all.len() {
            return Err(c("paths.* entries must be distinct".into()));
        }
        Ok(())
    }

    /// The config as flat `key = value` lines, sorted by key. Parsing the
    /// output yields the same config.
    pub fn to_flat(&self) -> String {
        let tree = serde_json::to_value(self).expect("config serializes");
        let mut lines = Vec::new();
        flatten("", &tree, &mut lines);
        lines.sort();
        let mut out = String::new();
        for (k, v) in lines {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }
}

fn parse_flat(text: &str, origin: &str) -> Result<Vec<(String, String, String)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = match line.find('#') {
            Some(p) => &line[..p],
            None => line,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            CliError::Config(format!("{origin}:{}: expected `key = value`", i + 1))
        })?;
        out.push((k.trim().to_string(), v.trim().to_string(), format!("{origin}:{}", i + 1)));
    }
    Ok(out)
}

fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

fn set_path(tree: &mut Value, key: &str, value: Value) -> std::result::Result<(), String> {
    let mut node = tree;
    let parts: Vec<&str> = key.split('.').collect();
    if parts.len() < 2 || parts.iter().any(|p| p.is_empty()) {
        return Err(format!("`{key}` is not a `section.key` name"));
    }
    for (depth, part) in parts.iter().enumerate() {
        let obj: &mut Map<String, Value> = node
            .as_object_mut()
            .ok_or_else(|| format!("unknown key `{key}`"))?;
        let child = obj
            .get_mut(*part)
            .ok_or_else(|| format!("unknown key `{key}`"))?;
        if depth + 1 == parts.len() {
            if child.is_object() {
                return Err(format!("`{key}` is a section, not a key"));
            }
            *child = value;
            return Ok(());
        }
        node = child;
    }
    unreachable!()
}

fn flatten(prefix: &str, v: &Value, out: &mut Vec<(String, String)>) {
    match v {
        Value::Object(m) => {
            for (k, child) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, child, out);
            }
        }
        Value::String(s) => out.push((prefix.to_string(), s.clone())),
        other => out.push((prefix.to_string(), other.to_string())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use bcva_core::DistanceMetric;

    #[test]
    fn defaults_round_trip_through_flat_text() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::parse(&cfg.to_flat()).unwrap(), cfg);
    }

    #[test]
    fn overrides_apply_in_order() {
        let text = "# fixture\nreturns.metric = time\ntrain.epochs = 3 # short\nmodel.encoder_hidden = [8, 4]\n";
        let cfg = RunConfig::load(None, &[]).unwrap();
        assert_eq!(cfg.returns.metric, DistanceMetric::Pixel);
        let cfg = RunConfig::parse(text).unwrap();
        assert_eq!(cfg.returns.metric, DistanceMetric::Time);
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.model.encoder_hidden, vec![8, 4]);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.cfg");
        std::fs::write(&p, text).unwrap();
        let cfg = RunConfig::load(Some(&p), &["train.epochs=5".into(), "world.start.x = 1.5".into()]).unwrap();
        assert_eq!(cfg.train.epochs, 5);
        assert_eq!(cfg.world.start.x, 1.5);
    }

    #[test]
    fn unknown_keys_and_bad_types_are_config_errors() {
        for text in ["train.epoch = 3", "train = 3", "nosection = 1", "train.epochs = fast", "returns.metric = sound"] {
            let e = RunConfig::parse(text).unwrap_err();
            assert_eq!(e.category(), "config", "{text}: {e}");
        }
        let e = RunConfig::parse("train.epochs = fast").unwrap_err();
        assert!(e.to_string().contains("train.epochs"), "{e}");
    }

    #[test]
    fn invariants_are_checked() {
        assert!(RunConfig::parse("paths.demos = model.ckpt").is_err());
        assert!(RunConfig::parse("gate.nus = [0, 5]").is_err());
        assert!(RunConfig::parse("split.validation_fraction = 1.0").is_err());
        assert!(RunConfig::parse("returns.gamma = 1.0").is_err());
        assert!(RunConfig::parse("expert.noise_std = -1").is_err());
    }
}
