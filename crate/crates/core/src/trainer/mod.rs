//! Staged flow-matching training with parameter-group freezing.

mod adam;
mod run;

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{all_groups, GroupSet, ParamGroup};
use crate::synthworld::{TaskKind, DEFAULT_GRID};

pub use adam::{OptimizerState, BETA1, BETA2, EPSILON};
pub use run::{
    flow_loss, flow_loss_graph, flow_pair, run_ablation_variant, run_curriculum, run_phase,
    training_item, AblationVariant, Curriculum, TrainReport,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Stage1,
    Stage2Step1,
    Stage2Step2,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Stage1 => "stage1",
            Phase::Stage2Step1 => "stage2_step1",
            Phase::Stage2Step2 => "stage2_step2",
        }
    }

    /// Groups a phase is allowed to update.
    pub fn trainable_groups(self) -> GroupSet {
        match self {
            Phase::Stage1 => all_groups(),
            Phase::Stage2Step1 => [ParamGroup::UnderstandingExpert].into_iter().collect(),
            Phase::Stage2Step2 => [
                ParamGroup::UnderstandingExpert,
                ParamGroup::GenerationExpert,
                ParamGroup::FlowHead,
            ]
            .into_iter()
            .collect(),
        }
    }

    fn salt(self) -> u64 {
        match self {
            Phase::Stage1 => 0x51,
            Phase::Stage2Step1 => 0x521,
            Phase::Stage2Step2 => 0x522,
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Which samples a phase streams.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSpec {
    pub tasks: Vec<TaskKind>,
    pub grid: (usize, usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub phase: Phase,
    pub steps: usize,
    pub trainable_groups: BTreeSet<ParamGroup>,
    pub mask_active: bool,
    pub tau: f64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub data: DataSpec,
}

pub const DEFAULT_TAU: f64 = 0.88;
pub const DEFAULT_BATCH: usize = 4;
pub const DEFAULT_LR: f64 = 1e-3;

impl StageConfig {
    pub fn default_for(phase: Phase) -> Self {
        let (steps, mask_active, tasks) = match phase {
            Phase::Stage1 => (
                500,
                false,
                vec![TaskKind::CompositionSingle, TaskKind::CompositionMulti],
            ),
            Phase::Stage2Step1 => (200, true, TaskKind::ALL.to_vec()),
            Phase::Stage2Step2 => (200, true, TaskKind::ALL.to_vec()),
        };
        Self {
            phase,
            steps,
            trainable_groups: phase.trainable_groups(),
            mask_active,
            tau: DEFAULT_TAU,
            batch_size: DEFAULT_BATCH,
            learning_rate: DEFAULT_LR,
            seed: 1,
            data: DataSpec {
                tasks,
                grid: DEFAULT_GRID,
            },
        }
    }

    /// Checks the per-phase contract. The mask flag of the Stage II phases
    /// is left free so bridge-less ablations share the interface.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("{}: {m}", self.phase)));
        if self.data.tasks.is_empty() {
            return Err(Error::EmptyInput("training dataset has no tasks"));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad(format!("learning_rate {} must be positive", self.learning_rate));
        }
        if !(self.tau > -1.0 && self.tau < 1.0) {
            return bad(format!("tau {} outside (-1, 1)", self.tau));
        }
        if self.trainable_groups != self.phase.trainable_groups() {
            return bad(format!(
                "trainable groups {:?} differ from {:?}",
                self.trainable_groups,
                self.phase.trainable_groups()
            ));
        }
        match self.phase {
            Phase::Stage1 => {
                if self.mask_active {
                    return bad("the mask is inactive in Stage I".into());
                }
                if let Some(t) = self.data.tasks.iter().find(|t| !t.is_single_candidate()) {
                    return bad(format!("task {t} is not single-candidate"));
                }
            }
            Phase::Stage2Step1 => {}
            Phase::Stage2Step2 => {
                if !self.data.tasks.iter().any(|t| t.is_distinction()) {
                    return bad("dataset needs multi-candidate tasks".into());
                }
            }
        }
        Ok(())
    }
}
