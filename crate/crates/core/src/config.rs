//! Experiment configuration: a single TOML file with full defaulting.
//!
//! Only `task.teacher_seed`, `task.pool_size` and `task.seq_len` are
//! required. [`ExperimentConfig::to_toml`] emits the resolved configuration,
//! which parses back to an identical value.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::align::ScalingVariant;
use crate::error::{Error, Result};
use crate::oracles::{Direction, OracleKind, PropertySpec, Threshold};
use crate::oracles::OracleTables;
use crate::semionline::RunConfig;
use crate::seqmodel::{Arch, CeConfig, AMINO_ACIDS};

/// Fields of `[task]` that have no default.
pub const REQUIRED_TASK_FIELDS: [&str; 3] = ["teacher_seed", "pool_size", "seq_len"];

fn default_eval_pool() -> usize {
    16
}

fn default_sharpness() -> f64 {
    3.0
}

fn default_labels() -> usize {
    4
}

fn default_label_temperature() -> f64 {
    1.0
}

/// The synthetic design problem: hidden teacher, backbone pools and the
/// teacher-labelled pretraining data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    pub teacher_seed: u64,
    pub pool_size: usize,
    pub seq_len: usize,
    #[serde(default = "default_eval_pool")]
    pub eval_pool_size: usize,
    #[serde(default = "default_sharpness")]
    pub teacher_sharpness: f64,
    /// Teacher samples per training backbone in the pretraining set.
    #[serde(default = "default_labels")]
    pub labels_per_backbone: usize,
    #[serde(default = "default_label_temperature")]
    pub label_temperature: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleDef {
    pub name: String,
    pub kind: OracleKind,
    pub weight: f64,
    /// Defaults to the kind's natural direction.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub direction: Option<Direction>,
    #[serde(default)]
    pub threshold: Threshold,
}

impl OracleDef {
    pub fn spec(&self) -> PropertySpec {
        PropertySpec {
            name: self.name.clone(),
            weight: self.weight,
            threshold: self.threshold,
            direction: self.direction.unwrap_or(self.kind.natural_direction()),
        }
    }
}

/// Designability at weight 0.6 and GRAVY-based solubility at 0.4.
pub fn default_oracles() -> Vec<OracleDef> {
    vec![
        OracleDef {
            name: "designability".into(),
            kind: OracleKind::Designability,
            weight: 0.6,
            direction: None,
            threshold: Threshold::default(),
        },
        OracleDef {
            name: "solubility".into(),
            kind: OracleKind::Gravy,
            weight: 0.4,
            direction: None,
            threshold: Threshold::default(),
        },
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed for pretraining and alignment.
    #[serde(default)]
    pub seed: u64,
    pub task: TaskConfig,
    #[serde(default)]
    pub model: Arch,
    #[serde(default)]
    pub pretrain: CeConfig,
    #[serde(default = "default_oracles")]
    pub oracles: Vec<OracleDef>,
    #[serde(default)]
    pub tables: OracleTables,
    #[serde(default)]
    pub run: RunConfig,
}

impl ExperimentConfig {
    /// Reads, defaults and validates a config file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Validation(vec![e.message().to_string()]))?;
        let missing: Vec<String> = match table.get("task") {
            Some(toml::Value::Table(task)) => REQUIRED_TASK_FIELDS
                .iter()
                .filter(|k| !task.contains_key(**k))
                .map(|k| format!("task.{k}: required field missing"))
                .collect(),
            Some(_) => vec!["task: must be a table".to_string()],
            None => REQUIRED_TASK_FIELDS
                .iter()
                .map(|k| format!("task.{k}: required field missing"))
                .collect(),
        };
        if !missing.is_empty() {
            return Err(Error::Validation(missing));
        }
        let mut cfg: ExperimentConfig = toml::from_str(text)
            .map_err(|e| Error::Validation(vec![e.message().to_string()]))?;
        let explicit_n = table
            .get("run")
            .and_then(|r| r.as_table())
            .is_some_and(|r| r.contains_key("backbones_per_iteration"));
        if !explicit_n {
            cfg.run.backbones_per_iteration = cfg.run.backbones_per_iteration.min(cfg.task.pool_size.max(1));
        }
        cfg.resolve()?;
        Ok(cfg)
    }

    /// Fills derived fields and validates the result.
    pub fn resolve(&mut self) -> Result<()> {
        let mut bad = Vec::new();
        let weights: Vec<f64> = self.oracles.iter().map(|o| o.weight).collect();
        if !self.run.align.weights.is_empty() && self.run.align.weights != weights {
            bad.push(
                "run.align.weights: conflicts with the oracle weights; set weights on [[oracles]]"
                    .to_string(),
            );
        }
        self.run.align.weights = weights;
        self.run.seed = self.seed;
        bad.extend(self.problems());
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(bad))
        }
    }

    /// Every violated constraint, one message per field.
    pub fn problems(&self) -> Vec<String> {
        let mut bad = Vec::new();
        let limit = i64::MAX as u64;
        if self.seed > limit {
            bad.push(format!("seed: must be <= {limit}"));
        }
        let t = &self.task;
        if t.teacher_seed > limit {
            bad.push(format!("task.teacher_seed: must be <= {limit}"));
        }
        for (name, v) in [
            ("task.pool_size", t.pool_size),
            ("task.seq_len", t.seq_len),
            ("task.eval_pool_size", t.eval_pool_size),
            ("task.labels_per_backbone", t.labels_per_backbone),
        ] {
            if v == 0 {
                bad.push(format!("{name}: must be >= 1"));
            }
        }
        if !t.teacher_sharpness.is_finite() {
            bad.push(format!("task.teacher_sharpness: must be finite, got {}", t.teacher_sharpness));
        }
        if !(t.label_temperature > 0.0) || !t.label_temperature.is_finite() {
            bad.push(format!("task.label_temperature: must be > 0, got {}", t.label_temperature));
        }
        let m = &self.model;
        if !(2..=AMINO_ACIDS.len()).contains(&m.alphabet_size) {
            bad.push(format!(
                "model.alphabet_size: must lie in 2..={}, got {}",
                AMINO_ACIDS.len(),
                m.alphabet_size
            ));
        }
        for (name, v) in [
            ("model.feature_dim", m.feature_dim),
            ("model.embed_dim", m.embed_dim),
            ("model.hidden_dim", m.hidden_dim),
        ] {
            if v == 0 {
                bad.push(format!("{name}: must be >= 1"));
            }
        }
        let p = &self.pretrain;
        if p.batch_size == 0 {
            bad.push("pretrain.batch_size: must be >= 1".to_string());
        }
        if !(p.lr > 0.0) || !p.lr.is_finite() {
            bad.push(format!("pretrain.lr: must be > 0, got {}", p.lr));
        }
        if !(0.0..1.0).contains(&p.beta1) || !(0.0..1.0).contains(&p.beta2) {
            bad.push("pretrain.beta1/beta2: must lie in [0, 1)".to_string());
        }
        if !(p.eps > 0.0) {
            bad.push(format!("pretrain.eps: must be > 0, got {}", p.eps));
        }
        if self.oracles.is_empty() {
            bad.push("oracles: at least one oracle is required".to_string());
        }
        let mut names = BTreeSet::new();
        for (i, o) in self.oracles.iter().enumerate() {
            if o.name.is_empty() {
                bad.push(format!("oracles[{i}].name: must be nonempty"));
            } else if !names.insert(o.name.as_str()) {
                bad.push(format!("oracles[{i}].name: duplicate name '{}'", o.name));
            }
            if !o.weight.is_finite() || o.weight < 0.0 {
                bad.push(format!("oracles[{i}].weight: must be finite and >= 0, got {}", o.weight));
            }
            if o.weight == 0.0 && self.run.align.scaling == ScalingVariant::Appendix {
                bad.push(format!("oracles[{i}].weight: appendix scaling needs a nonzero weight"));
            }
            match o.threshold {
                Threshold::Absolute(v) | Threshold::StdFraction(v) if !v.is_finite() || v < 0.0 => {
                    bad.push(format!("oracles[{i}].threshold: must be finite and >= 0"));
                }
                _ => {}
            }
        }
        bad.extend(self.run.problems().into_iter().map(|e| format!("run.{e}")));
        if self.run.backbones_per_iteration > t.pool_size {
            bad.push(format!(
                "run.backbones_per_iteration: {} exceeds task.pool_size {}",
                self.run.backbones_per_iteration, t.pool_size
            ));
        }
        bad
    }

    pub fn specs(&self) -> Vec<PropertySpec> {
        self.oracles.iter().map(OracleDef::spec).collect()
    }

    /// The resolved configuration as TOML.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Serde(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "[task]\nteacher_seed = 1\npool_size = 8\nseq_len = 10\n";

    #[test]
    fn minimal_config_takes_defaults() {
        let cfg = ExperimentConfig::parse(MINIMAL).unwrap();
        assert_eq!(cfg.run.align.beta, 0.5);
        assert_eq!(cfg.run.optim.lr, 5e-6);
        assert_eq!(cfg.run.iterations, 20);
        assert_eq!(cfg.run.batch_size, 64);
        assert_eq!(cfg.run.align.weights, vec![0.6, 0.4]);
        assert_eq!(cfg.model, Arch::default());
        assert_eq!(cfg.run.backbones_per_iteration, 8);
    }

    #[test]
    fn missing_fields_are_all_named() {
        let err = ExperimentConfig::parse("[task]\npool_size = 8\n").unwrap_err();
        match err {
            Error::Validation(v) => {
                assert_eq!(v.len(), 2);
                assert!(v.iter().any(|m| m.contains("teacher_seed")));
                assert!(v.iter().any(|m| m.contains("seq_len")));
            }
            e => panic!("{e}"),
        }
    }

    #[test]
    fn every_bad_field_is_listed() {
        let text = format!(
            "{MINIMAL}[run]\nrollouts_per_backbone = 3\neval_temperature = -1.0\nbackbones_per_iteration = 9\n[run.align]\nbeta = 0.0\n"
        );
        match ExperimentConfig::parse(&text).unwrap_err() {
            Error::Validation(v) => {
                for needle in ["rollouts_per_backbone", "eval_temperature", "backbones_per_iteration", "beta"] {
                    assert!(v.iter().any(|m| m.contains(needle)), "{needle} not in {v:?}");
                }
            }
            e => panic!("{e}"),
        }
    }

    #[test]
    fn unknown_key_is_rejected() {
        let text = format!("{MINIMAL}[run]\nitertions = 3\n");
        assert!(matches!(ExperimentConfig::parse(&text), Err(Error::Validation(_))));
    }

    #[test]
    fn resolved_dump_roundtrips() {
        let text = format!("seed = 42\n{MINIMAL}[run]\nloss = \"weighted_score\"\n");
        let cfg = ExperimentConfig::parse(&text).unwrap();
        let again = ExperimentConfig::parse(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(cfg, again);
        assert_eq!(again.run.seed, 42);
    }
}
