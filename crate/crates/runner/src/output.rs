//! Result-file emission. Every writer is a pure function of `RunResults`,
//! so identical results give identical bytes.

use std::path::{Path, PathBuf};

use hybridlab_core::{Error, Result};
use serde::Serialize;

use crate::results::{RunResults, HELDOUT_TASK};
use crate::{report, sweep};

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    std::fs::write(path, bytes)?;
    Ok(())
}

fn csv_error(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Format(format!("csv: {other:?}")),
    }
}

fn write_csv<R: Serialize>(path: &Path, rows: impl IntoIterator<Item = R>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
    for r in rows {
        w.serialize(r).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct ResultRow {
    pub model_id: String,
    pub condition: String,
    pub source: String,
    pub mechanism: String,
    pub task: String,
    pub n: usize,
    pub score: Option<f64>,
    pub delta: Option<f64>,
    pub loss: Option<f64>,
    pub ppl: Option<f64>,
    pub ppl_ratio: Option<f64>,
}

/// One row per (condition, task), plus a held-out row whose delta is the
/// loss change from baseline.
pub fn result_rows(results: &RunResults) -> Vec<ResultRow> {
    let base_loss = results.baseline().result.loss;
    let mut rows = Vec::new();
    for c in &results.conditions {
        let r = &c.result;
        let row = |task: &str, n: usize, score: Option<f64>, delta: Option<f64>| ResultRow {
            model_id: results.model_id.clone(),
            condition: c.condition.name.clone(),
            source: format!("{:?}", c.condition.source),
            mechanism: format!("{:?}", c.condition.mechanism),
            task: task.to_string(),
            n,
            score,
            delta,
            loss: r.loss,
            ppl: r.perplexity,
            ppl_ratio: r.ppl_ratio,
        };
        for (task, &score) in &r.task_scores {
            rows.push(row(task, r.n_examples[task], Some(score), Some(r.delta_scores[task])));
        }
        if let (Some(loss), Some(base)) = (r.loss, base_loss) {
            rows.push(row(HELDOUT_TASK, c.n_eval_tokens, None, Some(loss - base)));
        }
    }
    rows
}

#[derive(Serialize)]
struct StatRow<'a> {
    condition: &'a str,
    task: &'a str,
    point_drop: f64,
    lo: f64,
    hi: f64,
    significant: bool,
    n_resamples: usize,
    seed: u64,
}

#[derive(Serialize)]
struct ControlRow<'a> {
    matched_condition: &'a str,
    measure: String,
    targeted_value: f64,
    mean: f64,
    std: f64,
    trials: usize,
    per_trial: String,
    redundancy_ratio: Option<f64>,
}

#[derive(Serialize)]
struct MetricRow {
    layer: usize,
    kind: &'static str,
    norm_change: f64,
    cosine_sim: f64,
    output_ratio: f64,
    logit_lens_kl: f64,
}

#[derive(Serialize)]
struct CorrelationCsvRow<'a> {
    metric: &'a str,
    r: Option<f64>,
    p: Option<f64>,
    n: usize,
}

/// Writes every result file for one run and returns their paths.
pub fn write_all(dir: &Path, results: &RunResults) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    let mut emit = |name: &str| {
        let p = dir.join(name);
        written.push(p.clone());
        p
    };
    write_csv(&emit("results.csv"), result_rows(results))?;

    if results.conditions.iter().any(|c| !c.stats.is_empty()) {
        let rows = results.conditions.iter().flat_map(|c| {
            c.stats.iter().map(|(task, ci)| StatRow {
                condition: &c.condition.name,
                task,
                point_drop: ci.point_drop,
                lo: ci.lo,
                hi: ci.hi,
                significant: ci.significant,
                n_resamples: ci.n_resamples,
                seed: ci.seed,
            })
        });
        write_csv(&emit("stats.csv"), rows)?;
    }
    if !results.random_controls.is_empty() || !results.removals.is_empty() {
        let matched = results.random_controls.iter().map(|r| ControlRow {
            matched_condition: &r.summary.matched_condition,
            measure: format!("{:?}", r.measure),
            targeted_value: r.targeted_value,
            mean: r.summary.mean,
            std: r.summary.std,
            trials: r.summary.trials,
            per_trial: join(&r.summary.per_trial),
            redundancy_ratio: r.redundancy.map(|x| x.ratio),
        });
        let removals = results.removals.iter().map(|r| ControlRow {
            matched_condition: &r.ratio.matched_condition,
            measure: "PerplexityRatio".into(),
            targeted_value: r.count as f64,
            mean: r.ratio.mean,
            std: r.ratio.std,
            trials: r.ratio.trials,
            per_trial: join(&r.ratio.per_trial),
            redundancy_ratio: None,
        });
        write_csv(&emit("random_controls.csv"), matched.chain(removals))?;
    }
    if !results.metrics.is_empty() {
        let rows = results.metrics.iter().flat_map(|m| {
            m.output_ratio.iter().map(|(kind, &ratio)| MetricRow {
                layer: m.layer_index,
                kind: kind.label(),
                norm_change: m.norm_change,
                cosine_sim: m.cosine_sim,
                output_ratio: ratio,
                logit_lens_kl: m.logit_lens_kl[kind],
            })
        });
        write_csv(&emit("metrics.csv"), rows)?;
    }
    if !results.correlations.is_empty() {
        let rows = results.correlations.iter().map(|c| CorrelationCsvRow {
            metric: &c.metric,
            r: c.r,
            p: c.p,
            n: c.n,
        });
        write_csv(&emit("correlation.csv"), rows)?;
    }
    if let Some(table) = sweep::emit_sweep_table(results) {
        std::fs::write(emit("sweep.csv"), table.to_csv())?;
        std::fs::write(emit("sweep.svg"), table.to_svg())?;
    }
    let conditions: Vec<_> = results.conditions.iter().map(|c| &c.condition).collect();
    write_json(&emit("conditions.json"), &conditions)?;
    write_json(&emit("results.json"), results)?;
    let rep = report::emit_paper_shaped_report(std::slice::from_ref(results));
    write_json(&emit("report.json"), &rep)?;
    std::fs::write(emit("report.txt"), rep.render())?;
    Ok(written)
}

fn join(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(";")
}

pub fn read_results(dir: &Path) -> Result<RunResults> {
    let text = std::fs::read_to_string(dir.join("results.json"))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", dir.display())))
}
