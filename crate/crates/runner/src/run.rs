//! End-to-end experiment execution.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::time::Instant;

use hybridlab_core::ablation::{
    enumerate_group_conditions, enumerate_layer_sweep, enumerate_positional, enumerate_random_controls,
    enumerate_random_removals, AblationCondition, ComponentKind, Source,
};
use hybridlab_core::checkpoint;
use hybridlab_core::corpus::{tokens, unigram_perplexity, Corpus};
use hybridlab_core::eval::{evaluate, ConditionEval, ProbeTask};
use hybridlab_core::metrics::{compute_layer_metrics, correlate, layer_components, LayerMetrics, PERMUTATIONS};
use hybridlab_core::params::Parameters;
use hybridlab_core::seeding::derive_seed;
use hybridlab_core::stats::{bootstrap_drop_ci, bootstrap_mean_drop_ci, redundancy_ratio, summarize_random_controls};
use hybridlab_core::train::{train_observed, write_loss_history, LossRecord, TrainObserver};
use hybridlab_core::{Error, Result};
use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{ExperimentConfig, Suite};
use crate::output;
use crate::results::*;

pub const TOOL_VERSION: &str = concat!("hybridlab ", env!("CARGO_PKG_VERSION"));
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const TIMINGS_FILE: &str = "timings.json";

/// Caps rayon parallelism with `HYBRIDLAB_THREADS` when set.
pub fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var("HYBRIDLAB_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::Config(format!("HYBRIDLAB_THREADS must be a positive integer, got {v:?}")))?;
        b = b.num_threads(n);
    }
    b.build().map_err(|e| Error::Config(format!("thread pool: {e}")))
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn config_hash(config: &ExperimentConfig) -> String {
    sha256_hex(&serde_json::to_vec(config).expect("config serializes"))
}

struct CheckpointEvery<'a> {
    every: usize,
    dir: &'a Path,
    config: &'a hybridlab_core::config::ModelConfig,
    written: Vec<PathBuf>,
}

impl TrainObserver for CheckpointEvery<'_> {
    fn on_step(&mut self, record: &LossRecord, params: &Parameters<f32>) -> Result<()> {
        if self.every > 0 && (record.step + 1).is_multiple_of(self.every) {
            let path = self.dir.join(format!("model_step{:06}.ckpt", record.step + 1));
            checkpoint::save(&path, params, self.config)?;
            self.written.push(path);
        }
        Ok(())
    }
}

/// Trains (writing the checkpoint and loss history into the output
/// directory) or loads the configured checkpoint.
pub fn obtain_model(config: &ExperimentConfig, corpus: &Corpus, written: &mut Vec<PathBuf>) -> Result<Parameters<f32>> {
    if let Some(path) = &config.checkpoint_path {
        let (params, ckpt_config) = checkpoint::load(path)?;
        if ckpt_config != config.model {
            return Err(Error::Config(format!(
                "checkpoint {} was saved for a different model config",
                path.display()
            )));
        }
        return Ok(params);
    }
    let tc = config.train.as_ref().expect("validated: train or checkpoint");
    let dir = &config.output_dir;
    let mut observer = CheckpointEvery {
        every: tc.checkpoint_every,
        dir,
        config: &config.model,
        written: Vec::new(),
    };
    let init = Parameters::<f32>::init(&config.model)?;
    let (params, history) = train_observed(init, &config.model, tc, &corpus.train, &mut observer)?;
    written.append(&mut observer.written);
    let hist_path = dir.join("loss_history.csv");
    write_loss_history(std::fs::File::create(&hist_path)?, &history)?;
    written.push(hist_path);
    let ckpt = dir.join(CHECKPOINT_FILE);
    checkpoint::save(&ckpt, &params, &config.model)?;
    written.push(ckpt);
    Ok(params)
}

/// Every condition the configured suites request, baseline first, each
/// exactly once.
pub fn enumerate_conditions(config: &ExperimentConfig) -> Result<Vec<AblationCondition>> {
    let layout = &config.model.layout;
    let mut out = vec![AblationCondition::baseline(layout)];
    let groups = enumerate_group_conditions(layout);
    if config.has(Suite::Group) || config.has(Suite::RandomControls) {
        out.extend(groups.iter().cloned());
    }
    if config.has(Suite::LayerSweep) {
        out.extend(enumerate_layer_sweep(layout));
    }
    if config.has(Suite::Positional) {
        for kind in config.positional_kinds() {
            out.extend(enumerate_positional(layout, kind)?);
        }
    }
    let trials = config.random_trials_needed();
    if config.has(Suite::RandomControls) {
        for g in &groups {
            out.extend(enumerate_random_controls(
                layout,
                g,
                trials,
                derive_seed(config.global_seed, &g.name, 0),
            )?);
        }
    }
    for &count in &config.random_removal_counts {
        let label = format!("remove{count}");
        out.extend(enumerate_random_removals(
            layout,
            count,
            config.perplexity_control_trials,
            derive_seed(config.global_seed, &label, 0),
            &label,
        )?);
    }
    let mut seen = BTreeSet::new();
    for c in &out {
        c.validate(layout)?;
        if !seen.insert(c.name.clone()) {
            return Err(Error::Condition(format!("duplicate condition name {}", c.name)));
        }
    }
    Ok(out)
}

fn condition_seed(config: &ExperimentConfig, cond: &AblationCondition) -> u64 {
    derive_seed(config.global_seed, &cond.name, cond.trial_index.unwrap_or(0) as u64)
}

fn bootstrap_stats(
    config: &ExperimentConfig,
    cond: &AblationCondition,
    baseline: &ConditionEval,
    eval: &ConditionEval,
) -> Result<BTreeMap<String, hybridlab_core::stats::BootstrapCI>> {
    let mut out = BTreeMap::new();
    if eval.per_example.is_empty() {
        return Ok(out);
    }
    let seed = condition_seed(config, cond);
    let mut pairs = Vec::new();
    for (task, abl) in &eval.per_example {
        let base = &baseline.per_example[task];
        let ci = bootstrap_drop_ci(base, abl, config.n_resamples, derive_seed(seed, task, 0))?;
        out.insert(task.clone(), ci);
        pairs.push((base.as_slice(), abl.as_slice()));
    }
    let ci = bootstrap_mean_drop_ci(&pairs, config.n_resamples, derive_seed(seed, MEAN_TASK, 0))?;
    out.insert(MEAN_TASK.to_string(), ci);
    Ok(out)
}

fn random_control_rows(config: &ExperimentConfig, results: &[ConditionOutcome]) -> Result<Vec<RandomControlRow>> {
    let mut rows = Vec::new();
    for g in results.iter().filter(|c| c.condition.source == Source::Group) {
        let controls: Vec<&ConditionOutcome> = results
            .iter()
            .filter(|c| {
                c.condition.source == Source::RandomControl
                    && c.condition.name.starts_with(&format!("{}_random_t", g.condition.name))
            })
            .collect();
        if controls.is_empty() {
            continue;
        }
        if let Some(targeted) = g.mean_delta() {
            let per_trial: Vec<f64> = controls
                .iter()
                .take(config.random_control_trials)
                .filter_map(|c| c.mean_delta())
                .collect();
            rows.push(RandomControlRow {
                measure: ControlMeasure::MeanScoreDelta,
                targeted_value: targeted,
                summary: summarize_random_controls(&g.condition.name, &per_trial)?,
                redundancy: None,
            });
        }
        if let Some(targeted) = g.result.perplexity {
            let per_trial: Vec<f64> = controls
                .iter()
                .take(config.perplexity_control_trials)
                .filter_map(|c| c.result.perplexity)
                .collect();
            let summary = summarize_random_controls(&g.condition.name, &per_trial)?;
            rows.push(RandomControlRow {
                measure: ControlMeasure::Perplexity,
                targeted_value: targeted,
                redundancy: Some(redundancy_ratio(targeted, summary.mean)?),
                summary,
            });
        }
    }
    Ok(rows)
}

fn removal_rows(config: &ExperimentConfig, results: &[ConditionOutcome]) -> Result<Vec<RemovalRow>> {
    config
        .random_removal_counts
        .iter()
        .filter_map(|&count| {
            let prefix = format!("remove{count}_random_t");
            let ratios: Vec<f64> = results
                .iter()
                .filter(|c| c.condition.name.starts_with(&prefix))
                .filter_map(|c| c.result.ppl_ratio)
                .collect();
            (!ratios.is_empty()).then(|| {
                Ok(RemovalRow {
                    count,
                    ratio: summarize_random_controls(&format!("remove{count}"), &ratios)?,
                })
            })
        })
        .collect()
}

/// Impact of each layer-sweep condition: the mean probe-score drop when
/// probes ran, otherwise the log perplexity ratio.
fn sweep_impact(c: &ConditionOutcome) -> Option<f64> {
    c.mean_delta().map(|d| -d).or(c.result.ppl_ratio.map(f64::ln))
}

fn correlation_rows(
    config: &ExperimentConfig,
    metrics: &[LayerMetrics],
    results: &[ConditionOutcome],
) -> Vec<CorrelationRow> {
    let impact = if config.has(Suite::Probes) {
        "mean_score_drop"
    } else {
        "log_ppl_ratio"
    };
    let mut points: Vec<(usize, ComponentKind, f64)> = Vec::new();
    for c in results.iter().filter(|c| c.condition.source == Source::LayerSweep) {
        let Some(y) = sweep_impact(c) else { continue };
        let target = c.condition.targets.iter().next().expect("sweep conditions have one target");
        let l = target.layer_index;
        // skipped layers are keyed by their mixer in the metrics table
        let kind = match target.kind {
            ComponentKind::WholeLayer => layer_components(&config.model, l)[0],
            k => k,
        };
        points.push((l, kind, y));
    }
    type Extract = fn(&LayerMetrics, ComponentKind) -> f64;
    let extract: [(&str, Extract); 4] = [
        ("norm_change", |m, _| m.norm_change),
        ("cosine_sim", |m, _| m.cosine_sim),
        ("output_ratio", |m, k| m.output_ratio[&k]),
        ("logit_lens_kl", |m, k| m.logit_lens_kl[&k]),
    ];
    extract
        .iter()
        .map(|(name, f)| {
            let xs: Vec<f64> = points.iter().map(|&(l, k, _)| f(&metrics[l], k)).collect();
            let ys: Vec<f64> = points.iter().map(|p| p.2).collect();
            let seed = derive_seed(config.global_seed, &format!("correlation/{name}"), 0);
            let (r, p) = match correlate(name, &xs, &ys, PERMUTATIONS, seed) {
                Ok(c) => (Some(c.r), Some(c.p_value)),
                Err(_) => (None, None),
            };
            CorrelationRow {
                metric: name.to_string(),
                r,
                p,
                n: xs.len(),
                impact: impact.to_string(),
            }
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct FileEntry {
    pub file: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct ConditionIndex {
    pub seed: u64,
    pub files: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub global_seed: u64,
    pub files: Vec<FileEntry>,
    pub conditions: BTreeMap<String, ConditionIndex>,
    /// Derived seeds beyond the per-condition ones.
    pub seeds: BTreeMap<String, u64>,
    /// Per-condition wall-clock seconds live in this file, which is the one
    /// output not expected to reproduce byte-for-byte.
    pub timings_file: String,
}

/// Runs every requested suite and writes all result files into
/// `config.output_dir`.
pub fn run(config: &ExperimentConfig) -> Result<RunManifest> {
    config.validate()?;
    let dir = &config.output_dir;
    std::fs::create_dir_all(dir)?;
    let corpus = Corpus::load(&config.corpus_path)?;
    let mut written = Vec::new();
    let mut timings = BTreeMap::new();
    let t = Instant::now();
    let params = obtain_model(config, &corpus, &mut written)?;
    timings.insert("<train>".to_string(), t.elapsed().as_secs_f64());

    let heldout_all = tokens(&corpus.heldout);
    let heldout = &heldout_all[..config.eval_tokens.min(heldout_all.len())];
    let unigram = unigram_perplexity(&corpus.train, &corpus.heldout[..heldout.len()])?;
    let tasks: Vec<ProbeTask> = config.probe_tasks();
    let ppl_tokens = config.measures_perplexity().then_some(heldout);
    let conditions = enumerate_conditions(config)?;

    let pool = thread_pool()?;
    let start = Instant::now();
    let base_eval = evaluate(&params, &config.model, &conditions[0], ppl_tokens, &tasks, None)?;
    timings.insert(conditions[0].name.clone(), start.elapsed().as_secs_f64());
    let evals: Vec<(ConditionEval, f64)> = pool.install(|| {
        conditions[1..]
            .par_iter()
            .map(|c| {
                let t = Instant::now();
                let e = evaluate(&params, &config.model, c, ppl_tokens, &tasks, Some(&base_eval.result))?;
                Ok((e, t.elapsed().as_secs_f64()))
            })
            .collect::<Result<Vec<_>>>()
    })?;
    timings.insert("<evaluate>".into(), start.elapsed().as_secs_f64());

    let mut outcomes = Vec::with_capacity(conditions.len());
    outcomes.push(ConditionOutcome {
        condition: conditions[0].clone(),
        result: base_eval.result.clone(),
        n_eval_tokens: base_eval.n_eval_tokens,
        stats: BTreeMap::new(),
    });
    for (cond, (eval, secs)) in conditions[1..].iter().zip(evals) {
        timings.insert(cond.name.clone(), secs);
        outcomes.push(ConditionOutcome {
            stats: bootstrap_stats(config, cond, &base_eval, &eval)?,
            condition: cond.clone(),
            result: eval.result,
            n_eval_tokens: eval.n_eval_tokens,
        });
    }

    let metrics = if config.has(Suite::Metrics) {
        let t = Instant::now();
        let m = compute_layer_metrics(&params, &config.model, &heldout_all)?;
        timings.insert("<metrics>".into(), t.elapsed().as_secs_f64());
        m
    } else {
        Vec::new()
    };
    let correlations = if config.has(Suite::Correlation) {
        correlation_rows(config, &metrics, &outcomes)
    } else {
        Vec::new()
    };

    let results = RunResults {
        model_id: config.model_id.clone(),
        layout: config.model.layout.kind,
        n_layers: config.model.n_layers(),
        layer_components: (0..config.model.n_layers()).map(|l| layer_components(&config.model, l)).collect(),
        unigram_perplexity: unigram,
        suites: config.suites.clone(),
        tasks: tasks.iter().map(|t| t.name.label().to_string()).collect(),
        random_controls: random_control_rows(config, &outcomes)?,
        removals: removal_rows(config, &outcomes)?,
        conditions: outcomes,
        metrics,
        correlations,
        positional_kinds: if config.has(Suite::Positional) {
            config.positional_kinds()
        } else {
            Vec::new()
        },
    };

    written.extend(output::write_all(dir, &results)?);
    let timing_path = dir.join(TIMINGS_FILE);
    output::write_json(&timing_path, &timings)?;

    let mut files = Vec::new();
    for path in &written {
        files.push(FileEntry {
            file: relative_name(dir, path),
            sha256: sha256_hex(&std::fs::read(path)?),
        });
    }
    files.sort_by(|a, b| a.file.cmp(&b.file));
    let per_condition_files: Vec<String> = ["results.csv", "results.json", "conditions.json"]
        .into_iter()
        .chain(config.has(Suite::Probes).then_some("stats.csv"))
        .map(String::from)
        .collect();
    let conditions_index = conditions
        .iter()
        .map(|c| {
            (
                c.name.clone(),
                ConditionIndex {
                    seed: condition_seed(config, c),
                    files: per_condition_files.clone(),
                },
            )
        })
        .collect();
    let mut seeds = BTreeMap::new();
    for t in &tasks {
        seeds.insert(format!("probe/{}", t.name.label()), t.rng_seed);
    }
    if let Some(tc) = &config.train {
        seeds.insert("train/data".into(), tc.data_seed);
        seeds.insert("train/optimizer".into(), tc.optimizer_seed);
    }
    seeds.insert("model/init".into(), config.model.init_seed);
    let manifest = RunManifest {
        tool_version: TOOL_VERSION.into(),
        config_hash: config_hash(config),
        config: config.clone(),
        global_seed: config.global_seed,
        files,
        conditions: conditions_index,
        seeds,
        timings_file: TIMINGS_FILE.into(),
    };
    output::write_json(&dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

fn relative_name(dir: &Path, path: &Path) -> String {
    path.strip_prefix(dir).unwrap_or(path).to_string_lossy().into_owned()
}
