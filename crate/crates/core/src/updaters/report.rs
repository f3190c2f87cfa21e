use serde::{Deserialize, Serialize};

use super::condition::ConditionEstimate;
use super::Algo;
use crate::policies::KlStats;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Independent,
    Dependent,
    Sequential,
    Simultaneous,
}

/// Which agent a phase trained, and for which pipeline.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub phase: Phase,
    pub pipeline: Option<usize>,
    pub agent: usize,
}

/// KL of every agent right after one agent's sequential turn.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TurnKl {
    pub agent: usize,
    pub kl: Vec<KlStats>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationReport {
    pub algo: Algo,
    /// Condition at the intermediate parameters; FP3O only.
    pub condition: Option<ConditionEstimate>,
    /// The same estimate re-evaluated at the final parameters.
    pub constraint: Option<ConditionEstimate>,
    pub dependent_step_ran: bool,
    /// Final per-agent KL from the collecting parameters.
    pub kl: Vec<KlStats>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub kl_turns: Vec<TurnKl>,
    pub policy_loss: f64,
    pub entropy: f64,
    pub value_loss: f64,
    pub trace: Vec<TraceEntry>,
}

impl IterationReport {
    pub(crate) fn new(algo: Algo) -> Self {
        Self {
            algo,
            condition: None,
            constraint: None,
            dependent_step_ran: false,
            kl: vec![],
            kl_turns: vec![],
            policy_loss: 0.0,
            entropy: 0.0,
            value_loss: 0.0,
            trace: vec![],
        }
    }

    /// Condition truth equals post-hoc constraint truth.
    pub fn matching(&self) -> Option<bool> {
        Some(self.condition?.met == self.constraint?.met)
    }
}
