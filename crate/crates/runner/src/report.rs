//! Tables shaped like the published ones, built from one or more runs.

use std::fmt::Write;

use hybridlab_core::ablation::{ComponentId, ComponentKind, Source};
use hybridlab_core::config::LayoutKind;
use serde::{Deserialize, Serialize};

use crate::config::Suite;
use crate::results::{ConditionOutcome, ControlMeasure, RunResults, MEAN_TASK};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Cell {
    Num(f64),
    Text(String),
    Empty,
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Num(v)
    }
}

impl From<Option<f64>> for Cell {
    fn from(v: Option<f64>) -> Self {
        v.map_or(Cell::Empty, Cell::Num)
    }
}

impl From<&str> for Cell {
    fn from(v: &str) -> Self {
        Cell::Text(v.to_string())
    }
}

impl From<String> for Cell {
    fn from(v: String) -> Self {
        Cell::Text(v)
    }
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Num(v as f64)
    }
}

impl From<bool> for Cell {
    fn from(v: bool) -> Self {
        Cell::Text(if v { "yes" } else { "no" }.into())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub id: String,
    pub title: String,
    pub model_id: Option<String>,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    fn new(id: &str, title: &str, model_id: Option<&str>, columns: &[&str]) -> Self {
        Self {
            id: id.into(),
            title: title.into(),
            model_id: model_id.map(str::to_string),
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    /// Cell at `(row, column name)`.
    pub fn get(&self, row: usize, column: &str) -> Option<&Cell> {
        let j = self.columns.iter().position(|c| c == column)?;
        self.rows.get(row)?.get(j)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub models: Vec<String>,
    pub tables: Vec<Table>,
    pub notes: Vec<String>,
}

/// Early-versus-late comparison of single-layer perplexity increases for
/// the component kind whose group removal hurts most.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositionalGradient {
    pub kind: ComponentKind,
    pub early_mean_increase: f64,
    pub late_mean_increase: f64,
    pub holds: bool,
}

fn target_kind(results: &RunResults, t: &ComponentId) -> Option<ComponentKind> {
    match t.kind {
        ComponentKind::WholeLayer => results.layer_components.get(t.layer_index)?.first().copied(),
        k => Some(k),
    }
}

fn sweep_kind(results: &RunResults, c: &ConditionOutcome) -> Option<ComponentKind> {
    target_kind(results, c.condition.targets.iter().next()?)
}

/// The component kind whose group ablation raises perplexity the most,
/// falling back to the most frequent swept kind.
pub fn dominant_kind(results: &RunResults) -> Option<ComponentKind> {
    let by_group = results
        .by_source(Source::Group)
        .filter_map(|c| Some((target_kind(results, c.condition.targets.iter().next()?)?, c.result.ppl_ratio?)))
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(k, _)| k);
    by_group.or_else(|| {
        let mut counts = std::collections::BTreeMap::new();
        for c in results.by_source(Source::LayerSweep) {
            if let Some(k) = sweep_kind(results, c) {
                *counts.entry(k).or_insert(0usize) += 1;
            }
        }
        counts.into_iter().max_by_key(|&(_, n)| n).map(|(k, _)| k)
    })
}

pub fn positional_gradient(results: &RunResults) -> Option<PositionalGradient> {
    let kind = dominant_kind(results)?;
    let [early, _, late] = hybridlab_core::ablation::thirds(results.n_layers);
    let mut e = Vec::new();
    let mut l = Vec::new();
    for c in results.by_source(Source::LayerSweep) {
        if sweep_kind(results, c) != Some(kind) {
            continue;
        }
        let layer = c.condition.targets.iter().next()?.layer_index;
        let inc = c.result.ppl_ratio? - 1.0;
        if early.contains(&layer) {
            e.push(inc);
        } else if late.contains(&layer) {
            l.push(inc);
        }
    }
    if e.is_empty() || l.is_empty() {
        return None;
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (early_mean_increase, late_mean_increase) = (mean(&e), mean(&l));
    Some(PositionalGradient {
        kind,
        early_mean_increase,
        late_mean_increase,
        holds: early_mean_increase > late_mean_increase,
    })
}

fn group_rows(results: &RunResults) -> impl Iterator<Item = &ConditionOutcome> {
    std::iter::once(results.baseline()).chain(results.by_source(Source::Group))
}

fn group_score_table(r: &RunResults) -> Table {
    let mut cols = vec!["condition".to_string()];
    for t in &r.tasks {
        cols.push(t.clone());
        cols.push(format!("{t}_delta"));
    }
    cols.extend(["mean_delta", "mean_lo", "mean_hi", "significant"].map(String::from));
    let mut t = Table::new("group_scores", "Group ablation: probe accuracy and change", Some(&r.model_id), &[]);
    t.columns = cols;
    for c in group_rows(r) {
        let mut row: Vec<Cell> = vec![c.condition.name.as_str().into()];
        for task in &r.tasks {
            row.push(c.result.task_scores[task].into());
            row.push(c.result.delta_scores[task].into());
        }
        row.push(c.mean_delta().into());
        match c.stats.get(MEAN_TASK) {
            Some(ci) => row.extend([ci.lo.into(), ci.hi.into(), ci.significant.into()]),
            None => row.extend([Cell::Empty, Cell::Empty, Cell::Empty]),
        }
        t.rows.push(row);
    }
    t
}

fn perplexity_table(r: &RunResults) -> Table {
    let mut t = Table::new(
        "perplexity",
        "Held-out perplexity under group ablation",
        Some(&r.model_id),
        &["condition", "loss", "perplexity", "x_baseline"],
    );
    for c in group_rows(r) {
        t.rows.push(vec![
            c.condition.name.as_str().into(),
            c.result.loss.into(),
            c.result.perplexity.into(),
            c.result.ppl_ratio.into(),
        ]);
    }
    t
}

fn random_control_table(r: &RunResults) -> Table {
    let mut t = Table::new(
        "random_controls",
        "Targeted versus matched random removal",
        Some(&r.model_id),
        &["condition", "measure", "targeted", "random_mean", "random_std", "trials", "redundancy_ratio"],
    );
    for row in &r.random_controls {
        let measure = match row.measure {
            ControlMeasure::MeanScoreDelta => "mean_score_delta",
            ControlMeasure::Perplexity => "perplexity",
        };
        t.rows.push(vec![
            row.summary.matched_condition.as_str().into(),
            measure.into(),
            row.targeted_value.into(),
            row.summary.mean.into(),
            row.summary.std.into(),
            row.summary.trials.into(),
            row.redundancy.map(|x| x.ratio).into(),
        ]);
    }
    t
}

fn positional_table(r: &RunResults) -> Table {
    let mut t = Table::new(
        "positional",
        "Removal by depth third",
        Some(&r.model_id),
        &["condition", "kind", "third", "mean_delta", "perplexity", "x_baseline"],
    );
    for c in r.by_source(Source::Positional) {
        let kind = c.condition.targets.iter().next().map_or("", |t| t.kind.label());
        let third = c.condition.name.rsplit('_').next().unwrap_or("");
        t.rows.push(vec![
            c.condition.name.as_str().into(),
            kind.into(),
            third.into(),
            c.mean_delta().into(),
            c.result.perplexity.into(),
            c.result.ppl_ratio.into(),
        ]);
    }
    t
}

fn sweep_table(r: &RunResults) -> Table {
    let mut t = Table::new(
        "layer_sweep",
        "Single-component removal",
        Some(&r.model_id),
        &["layer", "kind", "mean_delta", "x_baseline"],
    );
    for c in r.by_source(Source::LayerSweep) {
        let target = c.condition.targets.iter().next().expect("sweep conditions have one target");
        t.rows.push(vec![
            target.layer_index.into(),
            target.kind.label().into(),
            c.mean_delta().into(),
            c.result.ppl_ratio.into(),
        ]);
    }
    t
}

fn gradient_table(r: &RunResults, g: &PositionalGradient) -> Table {
    let mut t = Table::new(
        "positional_gradient",
        "Early versus late single-layer perplexity increase (dominant kind)",
        Some(&r.model_id),
        &["kind", "early_mean_increase", "late_mean_increase", "early_exceeds_late"],
    );
    t.rows.push(vec![
        g.kind.label().into(),
        g.early_mean_increase.into(),
        g.late_mean_increase.into(),
        g.holds.into(),
    ]);
    t
}

fn metrics_table(r: &RunResults) -> Table {
    let mut t = Table::new(
        "layer_metrics",
        "Hidden-state metrics",
        Some(&r.model_id),
        &["layer", "kind", "norm_change", "cosine_sim", "output_ratio", "logit_lens_kl"],
    );
    for m in &r.metrics {
        for (kind, &ratio) in &m.output_ratio {
            t.rows.push(vec![
                m.layer_index.into(),
                kind.label().into(),
                m.norm_change.into(),
                m.cosine_sim.into(),
                ratio.into(),
                m.logit_lens_kl[kind].into(),
            ]);
        }
    }
    t
}

fn correlation_table(r: &RunResults) -> Table {
    let mut t = Table::new(
        "correlation",
        "Metric versus ablation impact",
        Some(&r.model_id),
        &["metric", "impact", "r", "p", "n"],
    );
    for c in &r.correlations {
        t.rows.push(vec![
            c.metric.as_str().into(),
            c.impact.as_str().into(),
            c.r.into(),
            c.p.into(),
            c.n.into(),
        ]);
    }
    t
}

fn removal_table(r: &RunResults) -> Table {
    let mut t = Table::new(
        "random_removals",
        "Random layer removal, multiples of baseline perplexity",
        Some(&r.model_id),
        &["layers_removed", "mean_ratio", "std", "trials"],
    );
    for row in &r.removals {
        t.rows.push(vec![
            row.count.into(),
            row.ratio.mean.into(),
            row.ratio.std.into(),
            row.ratio.trials.into(),
        ]);
    }
    t
}

fn fragility_table(runs: &[RunResults]) -> Option<Table> {
    let mut t = Table::new(
        "fragility",
        "Transformer versus hybrid fragility under random removal",
        None,
        &["hybrid", "transformer", "layers_removed", "hybrid_ratio", "transformer_ratio", "ratio"],
    );
    for h in runs.iter().filter(|r| r.layout != LayoutKind::PureAttention) {
        for p in runs.iter().filter(|r| r.layout == LayoutKind::PureAttention) {
            for hr in &h.removals {
                if let Some(pr) = p.removals.iter().find(|x| x.count == hr.count) {
                    t.rows.push(vec![
                        h.model_id.as_str().into(),
                        p.model_id.as_str().into(),
                        hr.count.into(),
                        hr.ratio.mean.into(),
                        pr.ratio.mean.into(),
                        (pr.ratio.mean / hr.ratio.mean).into(),
                    ]);
                }
            }
        }
    }
    (!t.rows.is_empty()).then_some(t)
}

pub fn emit_paper_shaped_report(runs: &[RunResults]) -> Report {
    let mut tables = Vec::new();
    let mut notes = Vec::new();
    for r in runs {
        let has = |s| r.suites.contains(&s);
        if has(Suite::Group) {
            if r.tasks.is_empty() {
                notes.push(format!("{}: group score table omitted, Probes suite not run", r.model_id));
            } else {
                tables.push(group_score_table(r));
            }
        }
        if has(Suite::Perplexity) {
            tables.push(perplexity_table(r));
        }
        if has(Suite::RandomControls) {
            if r.random_controls.is_empty() {
                notes.push(format!("{}: no random-control summaries were produced", r.model_id));
            } else {
                tables.push(random_control_table(r));
            }
        }
        if has(Suite::Positional) {
            tables.push(positional_table(r));
        }
        if has(Suite::LayerSweep) {
            tables.push(sweep_table(r));
            match positional_gradient(r) {
                Some(g) => {
                    if !g.holds {
                        notes.push(format!(
                            "{}: early-third removals of {} do not exceed late-third removals",
                            r.model_id,
                            g.kind.label()
                        ));
                    }
                    tables.push(gradient_table(r, &g));
                }
                None => notes.push(format!("{}: positional gradient needs perplexity sweep results", r.model_id)),
            }
        }
        if has(Suite::Metrics) {
            tables.push(metrics_table(r));
        }
        if has(Suite::Correlation) {
            tables.push(correlation_table(r));
        }
        if !r.removals.is_empty() {
            tables.push(removal_table(r));
        }
    }
    if runs.len() > 1 {
        match fragility_table(runs) {
            Some(t) => tables.push(t),
            None => notes.push(
                "fragility comparison omitted: needs a hybrid and a pure-attention run with matching random_removal_counts"
                    .into(),
            ),
        }
    }
    Report {
        models: runs.iter().map(|r| r.model_id.clone()).collect(),
        tables,
        notes,
    }
}

/// Fixed-width rendering with thousands separators for large values.
pub fn format_number(v: f64) -> String {
    if !v.is_finite() {
        return v.to_string();
    }
    let a = v.abs();
    if a >= 1000.0 {
        let s = format!("{:.0}", a);
        let mut out = String::new();
        for (i, ch) in s.chars().enumerate() {
            if i > 0 && (s.len() - i) % 3 == 0 {
                out.push(',');
            }
            out.push(ch);
        }
        if v < 0.0 {
            out.insert(0, '-');
        }
        out
    } else if a >= 100.0 {
        format!("{v:.1}")
    } else if a >= 10.0 {
        format!("{v:.2}")
    } else {
        format!("{v:.4}")
    }
}

impl Report {
    pub fn table(&self, id: &str, model_id: Option<&str>) -> Option<&Table> {
        self.tables
            .iter()
            .find(|t| t.id == id && (model_id.is_none() || t.model_id.as_deref() == model_id))
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for t in &self.tables {
            match &t.model_id {
                Some(m) => writeln!(out, "== {} [{m}]", t.title).unwrap(),
                None => writeln!(out, "== {}", t.title).unwrap(),
            }
            let cells: Vec<Vec<String>> = t
                .rows
                .iter()
                .map(|row| {
                    row.iter()
                        .map(|c| match c {
                            Cell::Num(v) => format_number(*v),
                            Cell::Text(s) => s.clone(),
                            Cell::Empty => "-".into(),
                        })
                        .collect()
                })
                .collect();
            let widths: Vec<usize> = (0..t.columns.len())
                .map(|j| cells.iter().map(|r| r[j].len()).chain([t.columns[j].len()]).max().unwrap_or(0))
                .collect();
            let line = |items: &[String]| {
                let mut s = String::new();
                for (j, item) in items.iter().enumerate() {
                    if j == 0 {
                        write!(s, "{item:<w$}", w = widths[j]).unwrap();
                    } else {
                        write!(s, "  {item:>w$}", w = widths[j]).unwrap();
                    }
                }
                s.trim_end().to_string()
            };
            writeln!(out, "{}", line(&t.columns)).unwrap();
            for r in &cells {
                writeln!(out, "{}", line(r)).unwrap();
            }
            out.push('\n');
        }
        if !self.notes.is_empty() {
            out.push_str("Notes\n");
            for n in &self.notes {
                writeln!(out, "- {n}").unwrap();
            }
        }
        out
    }
}
