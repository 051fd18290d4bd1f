//! Hidden-state contribution metrics and their correlation with ablation
//! impact.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ablation::{AblationCondition, ComponentId, ComponentKind, Source};
use crate::config::{LayoutKind, ModelConfig};
use crate::error::{Error, Result};
use crate::model::{forward, forward_masked, Contribution};
use crate::params::Parameters;
use crate::tensor::{dot, l2_norm, log_softmax, Tensor};

pub const DIAGNOSTIC_TOKENS: usize = 512;
pub const PERMUTATIONS: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerMetrics {
    pub layer_index: usize,
    pub norm_change: f64,
    pub cosine_sim: f64,
    pub output_ratio: BTreeMap<ComponentKind, f64>,
    pub logit_lens_kl: BTreeMap<ComponentKind, f64>,
}

/// Per-token mean of `‖post − pre‖ / ‖pre‖` and `cos(pre, post)` over rows.
pub fn state_change(layer: usize, pre: &Tensor<f32>, post: &Tensor<f32>, row_offset: usize) -> Result<(f64, f64)> {
    let mut change = 0.0;
    let mut cos = 0.0;
    for t in 0..pre.rows() {
        let a: Vec<f64> = pre.row(t).iter().map(|&v| v as f64).collect();
        let b: Vec<f64> = post.row(t).iter().map(|&v| v as f64).collect();
        let na = l2_norm(&a);
        if na == 0.0 {
            return Err(Error::ZeroNorm {
                layer,
                position: row_offset + t,
            });
        }
        let diff: Vec<f64> = a.iter().zip(&b).map(|(x, y)| y - x).collect();
        change += l2_norm(&diff) / na;
        let nb = l2_norm(&b);
        cos += if nb == 0.0 { 0.0 } else { dot(&a, &b) / (na * nb) };
    }
    let n = pre.rows() as f64;
    Ok((change / n, cos / n))
}

/// Per-token mean of `‖f‖ / ‖h‖`.
fn output_ratio(h: &Tensor<f32>, f: &Tensor<f32>) -> f64 {
    let total: f64 = (0..h.rows())
        .map(|t| l2_norm(f.row(t)) as f64 / l2_norm(h.row(t)) as f64)
        .sum();
    total / h.rows() as f64
}

/// `Σ p (ln p − ln q)` for probability vectors; zero-probability terms of
/// `p` contribute nothing.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi.ln() - qi.ln()))
        .sum()
}

/// KL between the softmax distributions of two logit rows.
pub fn kl_from_logits(p_logits: &[f32], q_logits: &[f32]) -> f64 {
    let lp = log_softmax(&p_logits.iter().map(|&v| v as f64).collect::<Vec<_>>());
    let lq = log_softmax(&q_logits.iter().map(|&v| v as f64).collect::<Vec<_>>());
    lp.iter().zip(&lq).map(|(&a, &b)| a.exp() * (a - b)).sum::<f64>().max(0.0)
}

fn diagnostic(tokens: &[u32]) -> Result<&[u32]> {
    if tokens.len() < DIAGNOSTIC_TOKENS {
        return Err(Error::Input(format!(
            "diagnostic corpus has {} tokens, need {DIAGNOSTIC_TOKENS}",
            tokens.len()
        )));
    }
    Ok(&tokens[..DIAGNOSTIC_TOKENS])
}

/// Diagnostic windows: independent chunks of at most `max_seq_len`.
fn chunks(config: &ModelConfig, tokens: &[u32]) -> Vec<std::ops::Range<usize>> {
    let w = config.max_seq_len;
    (0..tokens.len()).step_by(w).map(|s| s..(s + w).min(tokens.len())).collect()
}

/// Single-component ablation used for the logit-lens comparison: zeroing
/// in parallel blocks, skipping elsewhere.
pub fn single_component_condition(config: &ModelConfig, component: ComponentId) -> AblationCondition {
    if config.layout.kind == LayoutKind::Parallel {
        AblationCondition::zero(
            format!("L{:02}_{}_zero", component.layer_index, component.kind.label()),
            [component],
            Source::LayerSweep,
        )
    } else {
        AblationCondition::skip_layers(
            format!("L{:02}_{}_skip", component.layer_index, component.kind.label()),
            [component.layer_index],
            Source::LayerSweep,
        )
    }
}

/// Mixer components of layer `l`, in reporting order.
pub fn layer_components(config: &ModelConfig, l: usize) -> Vec<ComponentKind> {
    match config.layout.mixer_kind(l) {
        Some(kind) => vec![kind.into()],
        None => vec![ComponentKind::SoftmaxAttention, ComponentKind::Ssm],
    }
}

fn contribution_of(kind: ComponentKind) -> Contribution {
    match kind {
        ComponentKind::SoftmaxAttention => Contribution::SoftmaxAttention,
        ComponentKind::LinearAttention => Contribution::LinearAttention,
        ComponentKind::Ssm => Contribution::Ssm,
        ComponentKind::WholeLayer => unreachable!("whole layers have no single contribution"),
    }
}

/// Mean KL(p_baseline ‖ p_ablated) over the diagnostic positions.
pub fn logit_lens_kl(
    params: &Parameters<f32>,
    config: &ModelConfig,
    component: ComponentId,
    diag: &[u32],
) -> Result<f64> {
    let diag = diagnostic(diag)?;
    let cond = single_component_condition(config, component);
    let mask = cond.mask(&config.layout)?;
    let clear = crate::ablation::Mask::clear(config.n_layers());
    let mut total = 0.0;
    for r in chunks(config, diag) {
        let (base, _) = forward_masked(params, config, &diag[r.clone()], false, &clear)?;
        let (abl, _) = forward_masked(params, config, &diag[r], false, &mask)?;
        for t in 0..base.rows() {
            total += kl_from_logits(base.row(t), abl.row(t));
        }
    }
    Ok(total / diag.len() as f64)
}

pub fn compute_layer_metrics(params: &Parameters<f32>, config: &ModelConfig, diag: &[u32]) -> Result<Vec<LayerMetrics>> {
    let diag = diagnostic(diag)?;
    let n_layers = config.n_layers();
    let mut change = vec![0.0; n_layers];
    let mut cos = vec![0.0; n_layers];
    let mut ratio: Vec<BTreeMap<ComponentKind, f64>> = vec![BTreeMap::new(); n_layers];
    for r in chunks(config, diag) {
        let weight = r.len() as f64 / diag.len() as f64;
        let (_, cap) = forward(params, config, &diag[r.clone()], true, None)?;
        for (l, layer) in cap.layers.iter().enumerate() {
            let (c, s) = state_change(l, &layer.h_pre, &layer.h_post, r.start)?;
            change[l] += c * weight;
            cos[l] += s * weight;
            for kind in layer_components(config, l) {
                let f = layer
                    .contribution(contribution_of(kind))
                    .expect("capture records every mixer contribution");
                *ratio[l].entry(kind).or_insert(0.0) += output_ratio(&layer.h_pre, f) * weight;
            }
        }
    }
    let mut out = Vec::with_capacity(n_layers);
    for l in 0..n_layers {
        let mut kl = BTreeMap::new();
        for kind in layer_components(config, l) {
            kl.insert(kind, logit_lens_kl(params, config, ComponentId::new(l, kind), diag)?);
        }
        out.push(LayerMetrics {
            layer_index: l,
            norm_change: change[l],
            cosine_sim: cos[l],
            output_ratio: std::mem::take(&mut ratio[l]),
            logit_lens_kl: kl,
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// correlation

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationResult {
    pub metric_name: String,
    pub r: f64,
    pub p_value: f64,
    pub n_points: usize,
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Input("correlation inputs differ in length".into()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation("zero variance input".into()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Pearson r with a two-sided permutation p-value,
/// `(1 + #{|r_perm| ≥ |r|}) / (1 + permutations)`.
pub fn correlate(metric_name: &str, x: &[f64], y: &[f64], permutations: usize, seed: u64) -> Result<CorrelationResult> {
    if x.len() < 3 {
        return Err(Error::Input(format!("correlation needs at least 3 points, got {}", x.len())));
    }
    let r = pearson(x, y)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shuffled = y.to_vec();
    // guard against round-off making the identity permutation look extreme
    let threshold = r.abs() - 1e-12;
    let mut extreme = 0usize;
    for _ in 0..permutations {
        shuffled.shuffle(&mut rng);
        if pearson(x, &shuffled)?.abs() >= threshold {
            extreme += 1;
        }
    }
    Ok(CorrelationResult {
        metric_name: metric_name.to_string(),
        r,
        p_value: (1 + extreme) as f64 / (1 + permutations) as f64,
        n_points: x.len(),
    })
}
