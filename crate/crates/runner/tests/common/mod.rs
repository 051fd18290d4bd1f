#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use hybridlab::config::{ExperimentConfig, ProbeSettings, Suite};
use hybridlab_core::config::{HybridLayout, ModelConfig};
use hybridlab_core::train::TrainConfig;

pub fn corpus_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/moby-dick.txt")
}

pub fn tiny_model(layout: HybridLayout) -> ModelConfig {
    ModelConfig {
        d_model: 16,
        vocab_size: 256,
        n_heads: 2,
        key_dim: 8,
        value_dim: 8,
        ssm_state_dim: 4,
        mlp_hidden: 32,
        max_seq_len: 64,
        layout,
        init_seed: 1,
    }
}

pub fn tiny_train() -> TrainConfig {
    TrainConfig {
        steps: 6,
        batch_size: 2,
        seq_len: 32,
        learning_rate: 3e-3,
        warmup_steps: 2,
        grad_clip_norm: 1.0,
        optimizer_seed: 0,
        data_seed: 1,
        weight_decay: 0.01,
        min_lr_fraction: 0.1,
        checkpoint_every: 0,
    }
}

pub fn tiny_config(layout: HybridLayout, suites: Vec<Suite>, out: &Path) -> ExperimentConfig {
    ExperimentConfig {
        model_id: format!("{:?}", layout.kind).to_lowercase(),
        model: tiny_model(layout),
        train: Some(tiny_train()),
        checkpoint_path: None,
        corpus_path: corpus_path(),
        suites,
        random_control_trials: 2,
        perplexity_control_trials: 3,
        random_removal_counts: vec![],
        global_seed: 42,
        output_dir: out.to_path_buf(),
        eval_tokens: 600,
        probes: ProbeSettings {
            n_examples: 12,
            prompt_len: 24,
        },
        n_resamples: 200,
    }
}

pub const ALL_SUITES: [Suite; 8] = [
    Suite::Group,
    Suite::LayerSweep,
    Suite::Positional,
    Suite::RandomControls,
    Suite::Perplexity,
    Suite::Probes,
    Suite::Metrics,
    Suite::Correlation,
];

/// Every file in `dir` keyed by name.
pub fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect()
}

pub fn read_csv(path: &Path) -> Vec<BTreeMap<String, String>> {
    let mut r = csv::Reader::from_path(path).unwrap();
    let headers = r.headers().unwrap().clone();
    r.records()
        .map(|rec| {
            headers
                .iter()
                .zip(rec.unwrap().iter())
                .map(|(h, v)| (h.to_string(), v.to_string()))
                .collect()
        })
        .collect()
}
