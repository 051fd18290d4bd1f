//! Structured run outputs shared by the run and report stages.

use std::collections::BTreeMap;

use hybridlab_core::ablation::{AblationCondition, ComponentKind};
use hybridlab_core::config::LayoutKind;
use hybridlab_core::eval::EvalResult;
use hybridlab_core::metrics::LayerMetrics;
use hybridlab_core::stats::{BootstrapCI, RandomControlSummary, RedundancyRatio};
use serde::{Deserialize, Serialize};

pub const HELDOUT_TASK: &str = "heldout";
pub const MEAN_TASK: &str = "mean";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionOutcome {
    pub condition: AblationCondition,
    pub result: EvalResult,
    pub n_eval_tokens: usize,
    /// Bootstrap intervals per task plus the cross-task mean.
    pub stats: BTreeMap<String, BootstrapCI>,
}

impl ConditionOutcome {
    /// Mean signed score change across probe tasks.
    pub fn mean_delta(&self) -> Option<f64> {
        let d = &self.result.delta_scores;
        (!d.is_empty()).then(|| d.values().sum::<f64>() / d.len() as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ControlMeasure {
    /// Mean probe-score change across tasks.
    MeanScoreDelta,
    Perplexity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomControlRow {
    pub measure: ControlMeasure,
    pub targeted_value: f64,
    pub summary: RandomControlSummary,
    pub redundancy: Option<RedundancyRatio>,
}

/// Unmatched random removals of `count` layers, as multiples of the
/// baseline perplexity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemovalRow {
    pub count: usize,
    pub ratio: RandomControlSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationRow {
    pub metric: String,
    pub r: Option<f64>,
    pub p: Option<f64>,
    pub n: usize,
    pub impact: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResults {
    pub model_id: String,
    pub layout: LayoutKind,
    pub n_layers: usize,
    /// Component kinds present in each layer.
    pub layer_components: Vec<Vec<ComponentKind>>,
    pub unigram_perplexity: f64,
    pub suites: Vec<crate::config::Suite>,
    pub tasks: Vec<String>,
    /// Baseline first, then every other condition in canonical order.
    pub conditions: Vec<ConditionOutcome>,
    pub random_controls: Vec<RandomControlRow>,
    pub removals: Vec<RemovalRow>,
    pub metrics: Vec<LayerMetrics>,
    pub correlations: Vec<CorrelationRow>,
    pub positional_kinds: Vec<ComponentKind>,
}

impl RunResults {
    pub fn baseline(&self) -> &ConditionOutcome {
        &self.conditions[0]
    }

    pub fn find(&self, name: &str) -> Option<&ConditionOutcome> {
        self.conditions.iter().find(|c| c.condition.name == name)
    }

    pub fn by_source(&self, source: hybridlab_core::ablation::Source) -> impl Iterator<Item = &ConditionOutcome> {
        self.conditions.iter().filter(move |c| c.condition.source == source)
    }
}
