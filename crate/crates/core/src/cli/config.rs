//! Run configuration: defaults, JSON file merge and dotted-key overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::evalkit::BenchmarkConfig;
use crate::model::{MaskPolicy, ModelConfig};
use crate::synthworld::{SuiteSpec, TaskKind, DEFAULT_GRID};
use crate::trainer::{Phase, StageConfig, DEFAULT_TAU};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stages {
    pub stage1: StageConfig,
    pub stage2_step1: StageConfig,
    pub stage2_step2: StageConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub suite: SuiteSpec,
    pub rounds: usize,
    pub scorings: usize,
    pub base_seed: u64,
    pub sampling_steps: usize,
    pub mask_active: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationConfig {
    pub tau_grid: Vec<f64>,
    pub suite: SuiteSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    /// Share of cells kept by the top-fraction masks.
    pub fraction: f64,
    pub suite: SuiteSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub stages: Stages,
    pub eval: EvalConfig,
    pub ablation: AblationConfig,
    pub probe: ProbeConfig,
    pub tau: f64,
    pub seeds: Vec<u64>,
    /// Output root; `--out` and the environment variable take precedence.
    pub output_dir: Option<PathBuf>,
}

pub const HELD_OUT_SEED_START: u64 = 1_000_000;
pub const ABLATION_SEED_START: u64 = 2_000_000;

impl Default for RunConfig {
    fn default() -> Self {
        let distinction = vec![
            TaskKind::DistinctionCross,
            TaskKind::DistinctionIntra,
            TaskKind::DistCompCross,
            TaskKind::DistCompIntra,
        ];
        let held_out = SuiteSpec {
            tasks: vec![TaskKind::DistinctionCross],
            seed_start: HELD_OUT_SEED_START,
            per_task: 100,
            grid: DEFAULT_GRID,
        };
        Self {
            model: ModelConfig::default(),
            stages: Stages {
                stage1: StageConfig::default_for(Phase::Stage1),
                stage2_step1: StageConfig::default_for(Phase::Stage2Step1),
                stage2_step2: StageConfig::default_for(Phase::Stage2Step2),
            },
            eval: EvalConfig {
                suite: held_out.clone(),
                rounds: 3,
                scorings: 3,
                base_seed: 0,
                sampling_steps: 8,
                mask_active: true,
            },
            ablation: AblationConfig {
                tau_grid: vec![0.82, 0.85, 0.88],
                suite: SuiteSpec {
                    tasks: distinction,
                    seed_start: ABLATION_SEED_START,
                    per_task: 25,
                    grid: DEFAULT_GRID,
                },
            },
            probe: ProbeConfig {
                fraction: 0.5,
                suite: held_out,
            },
            tau: DEFAULT_TAU,
            seeds: vec![1, 2, 3, 4, 5],
            output_dir: None,
        }
    }
}

/// Usage or configuration problem (exit code 1).
#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}:{line}:{column}: {message}")]
    Syntax {
        path: String,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("cannot read config {path}: {source}")]
    Read {
        path: String,
        source: std::io::Error,
    },
    #[error("override `{0}`: expected key=value")]
    Override(String),
    #[error("override `{key}`: {message}")]
    OverridePath { key: String, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Applies `a.b.c=value`. The value is parsed as JSON, falling back to a
/// plain string.
pub fn apply_override(root: &mut Value, spec: &str) -> Result<(), ConfigError> {
    let (key, raw) = spec
        .split_once('=')
        .filter(|(k, _)| !k.is_empty())
        .ok_or_else(|| ConfigError::Override(spec.to_string()))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let last = i + 1 == parts.len();
        let bad = |message: String| ConfigError::OverridePath {
            key: key.to_string(),
            message,
        };
        node = match node {
            Value::Object(map) => {
                if last {
                    map.insert(part.to_string(), value);
                    return Ok(());
                }
                map.get_mut(*part).ok_or_else(|| bad(format!("no key `{part}`")))?
            }
            Value::Array(items) => {
                let idx: usize = part.parse().map_err(|_| bad(format!("`{part}` is not an index")))?;
                let len = items.len();
                let slot = items
                    .get_mut(idx)
                    .ok_or_else(|| bad(format!("index {idx} out of range ({len})")))?;
                if last {
                    *slot = value;
                    return Ok(());
                }
                slot
            }
            _ => return Err(bad(format!("`{part}` is below a scalar"))),
        };
    }
    unreachable!("split yields at least one part")
}

impl RunConfig {
    /// Defaults, then the file (deep-merged), then each override in order.
    pub fn resolve(path: Option<&Path>, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut root = serde_json::to_value(RunConfig::default()).expect("default config serializes");
        if let Some(path) = path {
            let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
                path: path.display().to_string(),
                source,
            })?;
            let patch: Value = serde_json::from_str(&text).map_err(|e| ConfigError::Syntax {
                path: path.display().to_string(),
                line: e.line(),
                column: e.column(),
                message: e.to_string(),
            })?;
            if !patch.is_object() {
                return Err(ConfigError::Invalid("top level must be a JSON object".into()));
            }
            merge(&mut root, patch);
        }
        for o in overrides {
            apply_override(&mut root, o)?;
        }
        let cfg: RunConfig = serde_json::from_value(root).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        self.model.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if !(self.tau > -1.0 && self.tau < 1.0) {
            return bad(format!("tau {} outside (-1, 1)", self.tau));
        }
        if self.seeds.is_empty() {
            return bad("seeds must not be empty".into());
        }
        if self.ablation.tau_grid.is_empty() {
            return bad("ablation.tau_grid must not be empty".into());
        }
        if let Some(t) = self.ablation.tau_grid.iter().find(|t| !(**t > -1.0 && **t < 1.0)) {
            return bad(format!("ablation tau {t} outside (-1, 1)"));
        }
        if !(self.probe.fraction > 0.0 && self.probe.fraction <= 1.0) {
            return bad(format!("probe.fraction {} outside (0, 1]", self.probe.fraction));
        }
        if self.eval.rounds == 0 || self.eval.scorings == 0 || self.eval.sampling_steps == 0 {
            return bad("eval rounds, scorings and sampling_steps must be positive".into());
        }
        for suite in [&self.eval.suite, &self.ablation.suite, &self.probe.suite] {
            if suite.tasks.is_empty() || suite.per_task == 0 {
                return bad("suites need at least one task and one sample per task".into());
            }
        }
        for s in self.stages_for(self.seeds[0]) {
            s.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        }
        Ok(())
    }

    /// The three curriculum stages with the run seed and tau applied.
    pub fn stages_for(&self, seed: u64) -> [StageConfig; 3] {
        let fix = |s: &StageConfig| StageConfig {
            seed,
            tau: self.tau,
            ..s.clone()
        };
        [
            fix(&self.stages.stage1),
            fix(&self.stages.stage2_step1),
            fix(&self.stages.stage2_step2),
        ]
    }

    pub fn benchmark(&self) -> BenchmarkConfig {
        BenchmarkConfig {
            rounds: self.eval.rounds,
            scorings: self.eval.scorings,
            base_seed: self.eval.base_seed,
            sampling_steps: self.eval.sampling_steps,
            policy: if self.eval.mask_active {
                MaskPolicy::Active { tau: self.tau }
            } else {
                MaskPolicy::Off
            },
        }
    }

    /// Config as embedded in reports; the output root is dropped so reports
    /// do not depend on where a run was placed.
    pub fn echo(&self) -> Value {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Value::Object(m) = &mut v {
            m.remove("output_dir");
        }
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
        let cfg = RunConfig::resolve(None, &[]).unwrap();
        assert_eq!(cfg, RunConfig::default());
    }

    #[test]
    fn overrides_reach_nested_keys() {
        let cfg = RunConfig::resolve(
            None,
            &[
                "stages.stage1.steps=7".into(),
                "tau=0.5".into(),
                "seeds=[9]".into(),
                "ablation.tau_grid.1=0.8".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.stages.stage1.steps, 7);
        assert_eq!(cfg.tau, 0.5);
        assert_eq!(cfg.seeds, vec![9]);
        assert_eq!(cfg.ablation.tau_grid[1], 0.8);
        assert!(cfg.stages_for(9).iter().all(|s| s.seed == 9 && s.tau == 0.5));
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(matches!(
            RunConfig::resolve(None, &["nonsense=1".into()]),
            Err(ConfigError::Invalid(_))
        ));
        assert!(matches!(
            RunConfig::resolve(None, &["stages.nothing.steps=1".into()]),
            Err(ConfigError::OverridePath { .. })
        ));
        assert!(matches!(RunConfig::resolve(None, &["tau".into()]), Err(ConfigError::Override(_))));
        assert!(matches!(
            RunConfig::resolve(None, &["tau=1.5".into()]),
            Err(ConfigError::Invalid(_))
        ));
    }

    #[test]
    fn malformed_file_reports_line_and_column() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, "{\n  \"tau\": 0.5,\n  \"seeds\": [1,\n}\n").unwrap();
        match RunConfig::resolve(Some(&p), &[]) {
            Err(ConfigError::Syntax { line, column, .. }) => {
                assert_eq!(line, 4);
                assert!(column >= 1);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn file_values_merge_over_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"stages": {"stage1": {"steps": 3}}, "eval": {"rounds": 1}}"#).unwrap();
        let cfg = RunConfig::resolve(Some(&p), &["eval.rounds=2".into()]).unwrap();
        assert_eq!(cfg.stages.stage1.steps, 3);
        assert_eq!(cfg.stages.stage2_step1.steps, 200);
        assert_eq!(cfg.eval.rounds, 2);
    }
}
