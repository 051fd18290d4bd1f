//! Layer-sweep matrix and its SVG heatmap.

use std::fmt::Write;

use hybridlab_core::ablation::{ComponentKind, Source};

use crate::results::{RunResults, HELDOUT_TASK};

#[derive(Debug, Clone, PartialEq)]
pub struct SweepTable {
    pub model_id: String,
    /// `(layer, kind)` per row, in sweep order.
    pub rows: Vec<(usize, ComponentKind)>,
    pub columns: Vec<String>,
    /// `cells[row][column]`: signed change from baseline.
    pub cells: Vec<Vec<f64>>,
}

/// Rows are (layer, kind), columns the probe tasks followed by the held-out
/// loss, and cells the same deltas the results file reports.
pub fn emit_sweep_table(results: &RunResults) -> Option<SweepTable> {
    let sweep: Vec<_> = results.by_source(Source::LayerSweep).collect();
    if sweep.is_empty() {
        return None;
    }
    let mut columns = results.tasks.clone();
    let base_loss = results.baseline().result.loss;
    if base_loss.is_some() {
        columns.push(HELDOUT_TASK.to_string());
    }
    let mut rows = Vec::new();
    let mut cells = Vec::new();
    for c in sweep {
        let target = c.condition.targets.iter().next().expect("one target per sweep condition");
        rows.push((target.layer_index, target.kind));
        let mut row: Vec<f64> = results.tasks.iter().map(|t| c.result.delta_scores[t]).collect();
        if let (Some(base), Some(loss)) = (base_loss, c.result.loss) {
            row.push(loss - base);
        }
        cells.push(row);
    }
    Some(SweepTable {
        model_id: results.model_id.clone(),
        rows,
        columns,
        cells,
    })
}

/// Diverging colour for `t ∈ [−1, 1]`: blue below zero, white at zero,
/// red above.
pub fn diverging(t: f64) -> (u8, u8, u8) {
    let t = t.clamp(-1.0, 1.0);
    let end = if t < 0.0 { (33.0, 102.0, 172.0) } else { (178.0, 24.0, 43.0) };
    let a = t.abs();
    let mix = |e: f64| (255.0 + (e - 255.0) * a).round() as u8;
    (mix(end.0), mix(end.1), mix(end.2))
}

impl SweepTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,kind");
        for c in &self.columns {
            write!(out, ",{c}").unwrap();
        }
        out.push('\n');
        for ((layer, kind), row) in self.rows.iter().zip(&self.cells) {
            write!(out, "{layer},{}", kind.label()).unwrap();
            for v in row {
                write!(out, ",{v}").unwrap();
            }
            out.push('\n');
        }
        out
    }

    /// Symmetric colour limit: the largest absolute cell per column.
    fn column_scale(&self, col: usize) -> f64 {
        self.cells.iter().map(|r| r[col].abs()).fold(0.0, f64::max)
    }

    pub fn to_svg(&self) -> String {
        let (cw, ch, left, top) = (92.0, 22.0, 150.0, 56.0);
        let width = left + cw * self.columns.len() as f64 + 20.0;
        let legend_top = top + ch * self.rows.len() as f64 + 24.0;
        let height = legend_top + 26.0 + 18.0 * self.columns.len() as f64;
        let mut s = String::new();
        writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="monospace" font-size="11">"#
        )
        .unwrap();
        writeln!(s, r#"<rect width="{width}" height="{height}" fill="white"/>"#).unwrap();
        writeln!(
            s,
            r#"<text x="10" y="18" font-size="13">{}: layer-wise change from baseline</text>"#,
            escape(&self.model_id)
        )
        .unwrap();
        for (j, c) in self.columns.iter().enumerate() {
            let x = left + cw * j as f64 + cw / 2.0;
            writeln!(s, r#"<text x="{x}" y="{}" text-anchor="middle">{}</text>"#, top - 8.0, escape(c)).unwrap();
        }
        let scales: Vec<f64> = (0..self.columns.len()).map(|j| self.column_scale(j)).collect();
        for (i, ((layer, kind), row)) in self.rows.iter().zip(&self.cells).enumerate() {
            let y = top + ch * i as f64;
            writeln!(
                s,
                r#"<text x="10" y="{}">L{layer:02} {}</text>"#,
                y + ch * 0.7,
                kind.label()
            )
            .unwrap();
            for (j, &v) in row.iter().enumerate() {
                let t = if scales[j] > 0.0 { v / scales[j] } else { 0.0 };
                let (r, g, b) = diverging(t);
                let x = left + cw * j as f64;
                writeln!(
                    s,
                    r##"<rect x="{x}" y="{y}" width="{cw}" height="{ch}" fill="#{r:02x}{g:02x}{b:02x}" stroke="#999"/>"##
                )
                .unwrap();
                writeln!(
                    s,
                    r#"<text x="{}" y="{}" text-anchor="middle">{v:+.3}</text>"#,
                    x + cw / 2.0,
                    y + ch * 0.7
                )
                .unwrap();
            }
        }
        // legend: one gradient bar spanning −max..+max, with the observed
        // extremes of every column spelled out
        writeln!(
            s,
            r##"<defs><linearGradient id="div"><stop offset="0" stop-color="#2166ac"/><stop offset="0.5" stop-color="#ffffff"/><stop offset="1" stop-color="#b2182b"/></linearGradient></defs>"##
        )
        .unwrap();
        writeln!(
            s,
            r##"<rect x="{left}" y="{legend_top}" width="{}" height="10" fill="url(#div)" stroke="#999"/>"##,
            cw * 2.0
        )
        .unwrap();
        writeln!(s, r#"<text x="10" y="{}">scale per column</text>"#, legend_top + 9.0).unwrap();
        for (j, c) in self.columns.iter().enumerate() {
            let (lo, hi) = self
                .cells
                .iter()
                .map(|r| r[j])
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
            writeln!(
                s,
                r#"<text x="10" y="{}">{}: min {lo:+.4}  max {hi:+.4}  colour limit ±{:.4}</text>"#,
                legend_top + 30.0 + 18.0 * j as f64,
                escape(c),
                scales[j]
            )
            .unwrap();
        }
        s.push_str("</svg>\n");
        s
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(cells: Vec<Vec<f64>>) -> SweepTable {
        SweepTable {
            model_id: "m".into(),
            rows: (0..cells.len()).map(|l| (l, ComponentKind::Ssm)).collect(),
            columns: vec!["a".into(), "b".into()],
            cells,
        }
    }

    fn fills(svg: &str) -> Vec<String> {
        svg.lines()
            .filter(|l| l.starts_with("<rect x=") && l.contains("fill=\"#") && !l.contains("url("))
            .map(|l| l.split("fill=\"").nth(1).unwrap()[..7].to_string())
            .collect()
    }

    #[test]
    fn zero_deltas_render_uniform_midscale() {
        let svg = table(vec![vec![0.0, 0.0]; 3]).to_svg();
        let f = fills(&svg);
        assert_eq!(f.len(), 6);
        assert!(f.iter().all(|c| c == "#ffffff"));
    }

    #[test]
    fn one_nonzero_cell_is_the_only_coloured_one() {
        let mut cells = vec![vec![0.0, 0.0]; 3];
        cells[1][0] = -0.2;
        let f = fills(&table(cells).to_svg());
        assert_eq!(f.iter().filter(|c| *c != "#ffffff").count(), 1);
        assert_eq!(f[2], "#2166ac");
    }

    #[test]
    fn diverging_endpoints() {
        assert_eq!(diverging(0.0), (255, 255, 255));
        assert_eq!(diverging(1.0), (178, 24, 43));
        assert_eq!(diverging(-1.0), (33, 102, 172));
    }

    #[test]
    fn csv_matches_cells() {
        let t = table(vec![vec![0.5, -0.25]]);
        assert_eq!(t.to_csv(), "layer,kind,a,b\n0,ssm,0.5,-0.25\n");
    }
}
