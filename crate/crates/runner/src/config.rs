use std::path::{Path, PathBuf};

use hybridlab_core::ablation::ComponentKind;
use hybridlab_core::config::ModelConfig;
use hybridlab_core::eval::{ProbeTask, TaskName};
use hybridlab_core::seeding::derive_seed;
use hybridlab_core::train::TrainConfig;
use hybridlab_core::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, clap::ValueEnum)]
pub enum Suite {
    Group,
    LayerSweep,
    Positional,
    RandomControls,
    Perplexity,
    Probes,
    Metrics,
    Correlation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeSettings {
    #[serde(default = "default_probe_examples")]
    pub n_examples: usize,
    #[serde(default = "default_prompt_len")]
    pub prompt_len: usize,
}

fn default_probe_examples() -> usize {
    200
}

fn default_prompt_len() -> usize {
    48
}

impl Default for ProbeSettings {
    fn default() -> Self {
        Self {
            n_examples: default_probe_examples(),
            prompt_len: default_prompt_len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Identifier written into every results row.
    #[serde(default = "default_model_id")]
    pub model_id: String,
    pub model: ModelConfig,
    #[serde(default)]
    pub train: Option<TrainConfig>,
    #[serde(default)]
    pub checkpoint_path: Option<PathBuf>,
    #[serde(default = "default_corpus")]
    pub corpus_path: PathBuf,
    pub suites: Vec<Suite>,
    #[serde(default = "default_random_trials")]
    pub random_control_trials: usize,
    #[serde(default = "default_perplexity_trials")]
    pub perplexity_control_trials: usize,
    /// Extra unmatched random removals of this many layers, used for the
    /// hybrid-versus-transformer fragility comparison.
    #[serde(default)]
    pub random_removal_counts: Vec<usize>,
    pub global_seed: u64,
    pub output_dir: PathBuf,
    /// Held-out tokens scored for perplexity (from the start of the split).
    #[serde(default = "default_eval_tokens")]
    pub eval_tokens: usize,
    #[serde(default)]
    pub probes: ProbeSettings,
    #[serde(default = "default_resamples")]
    pub n_resamples: usize,
}

fn default_model_id() -> String {
    "model".into()
}

fn default_corpus() -> PathBuf {
    PathBuf::from("data/moby-dick.txt")
}

fn default_random_trials() -> usize {
    3
}

fn default_perplexity_trials() -> usize {
    5
}

fn default_eval_tokens() -> usize {
    32_768
}

fn default_resamples() -> usize {
    hybridlab_core::stats::DEFAULT_RESAMPLES
}

impl ExperimentConfig {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        match (&self.train, &self.checkpoint_path) {
            (Some(tc), None) => tc.validate(&self.model)?,
            (None, Some(_)) => {}
            _ => return Err(Error::Config("exactly one of train / checkpoint_path must be set".into())),
        }
        let mut seen = self.suites.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.suites.len() {
            return Err(Error::Config("suites contain duplicates".into()));
        }
        if self.has(Suite::Correlation) && !(self.has(Suite::LayerSweep) && self.has(Suite::Metrics)) {
            return Err(Error::Config("Correlation requires LayerSweep and Metrics".into()));
        }
        if self.random_control_trials == 0 || self.perplexity_control_trials == 0 {
            return Err(Error::Config("random-control trial counts must be positive".into()));
        }
        if self.n_resamples == 0 || self.eval_tokens < 2 {
            return Err(Error::Config("n_resamples and eval_tokens must be positive".into()));
        }
        if let Some(&c) = self.random_removal_counts.iter().find(|&&c| c == 0 || c > self.model.n_layers()) {
            return Err(Error::Config(format!("random removal count {c} out of range")));
        }
        if self.has(Suite::Probes) {
            for task in self.probe_tasks() {
                task.validate(&self.model).map_err(|e| Error::Config(e.to_string()))?;
            }
        }
        Ok(())
    }

    pub fn has(&self, suite: Suite) -> bool {
        self.suites.contains(&suite)
    }

    /// Measurements taken for each condition; perplexity when none is named.
    pub fn measures_perplexity(&self) -> bool {
        self.has(Suite::Perplexity) || !self.has(Suite::Probes)
    }

    pub fn probe_tasks(&self) -> Vec<ProbeTask> {
        if !self.has(Suite::Probes) {
            return Vec::new();
        }
        [TaskName::AssociativeRecall, TaskName::Copy, TaskName::MajorityLabel]
            .into_iter()
            .map(|name| {
                ProbeTask::new(
                    name,
                    self.probes.n_examples,
                    self.probes.prompt_len,
                    derive_seed(self.global_seed, name.label(), 0),
                )
            })
            .collect()
    }

    /// Component kinds the positional suite sweeps, in report order.
    pub fn positional_kinds(&self) -> Vec<ComponentKind> {
        [ComponentKind::LinearAttention, ComponentKind::SoftmaxAttention, ComponentKind::Ssm]
            .into_iter()
            .filter(|&k| hybridlab_core::ablation::enumerate_positional(&self.model.layout, k).is_ok())
            .collect()
    }

    /// Trials generated per random control: enough for both the score and
    /// perplexity summaries, which use a prefix of them.
    pub fn random_trials_needed(&self) -> usize {
        let mut n = 0;
        if self.has(Suite::Probes) {
            n = n.max(self.random_control_trials);
        }
        if self.measures_perplexity() {
            n = n.max(self.perplexity_control_trials);
        }
        n
    }
}
