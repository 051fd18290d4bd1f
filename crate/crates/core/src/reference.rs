//! Slow, independently written reference forms of the mixing kernels, used
//! as test oracles. Everything here works in f64 on plain nested vectors.

use crate::tensor::Tensor;

fn to_f64<T: crate::scalar::Scalar>(t: &Tensor<T>) -> Vec<Vec<f64>> {
    (0..t.rows())
        .map(|i| t.row(i).iter().map(|v| v.to_f64().unwrap()).collect())
        .collect()
}

/// Direct O(n²) causal attention: every output is a probability-weighted
/// sum over the visible prefix, computed with scalar loops.
pub fn attention<T: crate::scalar::Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    n_heads: usize,
) -> Vec<Vec<f64>> {
    let (q, k, v) = (to_f64(q), to_f64(k), to_f64(v));
    let len = q.len();
    let dk = q[0].len() / n_heads;
    let dv = v[0].len() / n_heads;
    let mut out = vec![vec![0.0; n_heads * dv]; len];
    for h in 0..n_heads {
        for i in 0..len {
            let scores: Vec<f64> = (0..=i)
                .map(|j| (0..dk).map(|c| q[i][h * dk + c] * k[j][h * dk + c]).sum::<f64>() / (dk as f64).sqrt())
                .collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = w.iter().sum();
            for (j, wj) in w.iter().enumerate() {
                for c in 0..dv {
                    out[i][h * dv + c] += wj / z * v[j][h * dv + c];
                }
            }
        }
    }
    out
}

/// Gated delta rule evaluated with explicit dense matrices,
/// `S ← α (I − β k kᵀ) S + β k vᵀ`, `o = Sᵀ q`.
pub fn delta_rule<T: crate::scalar::Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    alpha: &Tensor<T>,
    beta: &Tensor<T>,
    n_heads: usize,
) -> Vec<Vec<f64>> {
    let (q, k, v, alpha, beta) = (to_f64(q), to_f64(k), to_f64(v), to_f64(alpha), to_f64(beta));
    let len = q.len();
    let dk = q[0].len() / n_heads;
    let dv = v[0].len() / n_heads;
    let mut out = vec![vec![0.0; n_heads * dv]; len];
    for h in 0..n_heads {
        let mut s = vec![vec![0.0; dv]; dk];
        for t in 0..len {
            let kt = &k[t][h * dk..(h + 1) * dk];
            let (a, b) = (alpha[t][h], beta[t][h]);
            // transition matrix M = a (I - b k k^T)
            let m: Vec<Vec<f64>> = (0..dk)
                .map(|r| {
                    (0..dk)
                        .map(|c| a * ((r == c) as u8 as f64 - b * kt[r] * kt[c]))
                        .collect()
                })
                .collect();
            let mut next = vec![vec![0.0; dv]; dk];
            for r in 0..dk {
                for c in 0..dv {
                    let mut acc = b * kt[r] * v[t][h * dv + c];
                    for j in 0..dk {
                        acc += m[r][j] * s[j][c];
                    }
                    next[r][c] = acc;
                }
            }
            s = next;
            for c in 0..dv {
                out[t][h * dv + c] = (0..dk).map(|r| s[r][c] * q[t][h * dk + r]).sum();
            }
        }
    }
    out
}

/// Selective scan in its unrolled quadratic form,
/// `y_t = Σ_{s ≤ t} (c_t · b_s) (∏_{s < r ≤ t} a_r) x_s`.
pub fn selective_scan<T: crate::scalar::Scalar>(
    x: &Tensor<T>,
    a: &Tensor<T>,
    b: &Tensor<T>,
    c: &Tensor<T>,
    n_heads: usize,
) -> Vec<Vec<f64>> {
    let (x, a, b, c) = (to_f64(x), to_f64(a), to_f64(b), to_f64(c));
    let len = x.len();
    let width = x[0].len();
    let per_head = width / n_heads;
    let mut out = vec![vec![0.0; width]; len];
    for t in 0..len {
        for s in 0..=t {
            let cb: f64 = c[t].iter().zip(&b[s]).map(|(ci, bi)| ci * bi).sum();
            for ch in 0..width {
                let h = ch / per_head;
                let decay: f64 = (s + 1..=t).map(|r| a[r][h]).product();
                out[t][ch] += cb * decay * x[s][ch];
            }
        }
    }
    out
}

/// Maximum absolute difference divided by the reference's largest magnitude.
pub fn relative_error<T: crate::scalar::Scalar>(actual: &Tensor<T>, reference: &[Vec<f64>]) -> f64 {
    let mut diff = 0.0f64;
    let mut scale = 0.0f64;
    for (i, row) in reference.iter().enumerate() {
        for (a, r) in actual.row(i).iter().zip(row) {
            diff = diff.max((a.to_f64().unwrap() - r).abs());
            scale = scale.max(r.abs());
        }
    }
    diff / scale.max(f64::MIN_POSITIVE)
}

// ---------------------------------------------------------------------------
// whole-component references: projections done with scalar loops

fn project<T: crate::scalar::Scalar>(x: &[Vec<f64>], w: &Tensor<T>) -> Vec<Vec<f64>> {
    let w = to_f64(w);
    x.iter()
        .map(|row| {
            (0..w[0].len())
                .map(|j| row.iter().enumerate().map(|(i, xi)| xi * w[i][j]).sum())
                .collect()
        })
        .collect()
}

fn flat<T: crate::scalar::Scalar>(t: &Tensor<T>) -> Vec<f64> {
    t.data.iter().map(|v| v.to_f64().unwrap()).collect()
}

fn tensor(rows: &[Vec<f64>]) -> Tensor<f64> {
    Tensor::from_vec(&[rows.len(), rows[0].len()], rows.concat())
}

fn l2_rows(x: &mut [Vec<f64>], head_dim: usize) {
    for row in x {
        for chunk in row.chunks_mut(head_dim) {
            let n = (chunk.iter().map(|v| v * v).sum::<f64>() + 1e-6).sqrt();
            chunk.iter_mut().for_each(|v| *v /= n);
        }
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Softmax-attention component output for a normalized input.
pub fn attention_component<T: crate::scalar::Scalar>(
    p: &crate::params::AttentionParams<T>,
    xn: &Tensor<T>,
    n_heads: usize,
) -> Vec<Vec<f64>> {
    let x = to_f64(xn);
    let (q, k, v) = (project(&x, &p.wq), project(&x, &p.wk), project(&x, &p.wv));
    let o = attention(&tensor(&q), &tensor(&k), &tensor(&v), n_heads);
    project(&o, &p.wo)
}

/// Gated delta-rule component output for a normalized input.
pub fn linear_attention_component<T: crate::scalar::Scalar>(
    p: &crate::params::DeltaParams<T>,
    xn: &Tensor<T>,
    n_heads: usize,
    key_dim: usize,
) -> Vec<Vec<f64>> {
    let x = to_f64(xn);
    let (mut q, mut k, v) = (project(&x, &p.wq), project(&x, &p.wk), project(&x, &p.wv));
    l2_rows(&mut q, key_dim);
    l2_rows(&mut k, key_dim);
    let b_alpha = flat(&p.b_alpha);
    let tau: Vec<f64> = flat(&p.log_tau).iter().map(|t| t.exp()).collect();
    let alpha: Vec<Vec<f64>> = project(&x, &p.w_alpha)
        .iter()
        .map(|row| {
            row.iter()
                .enumerate()
                .map(|(h, z)| (tau[h] * -softplus(-(z + b_alpha[h]))).max(-60.0).exp())
                .collect()
        })
        .collect();
    let beta: Vec<Vec<f64>> = project(&x, &p.w_beta)
        .iter()
        .map(|row| row.iter().map(|z| 1.0 / (1.0 + (-z).exp())).collect())
        .collect();
    let o = delta_rule(&tensor(&q), &tensor(&k), &tensor(&v), &tensor(&alpha), &tensor(&beta), n_heads);
    project(&o, &p.wo)
}

/// Selective-scan SSM component output for a normalized input.
pub fn ssm_component<T: crate::scalar::Scalar>(
    p: &crate::params::SsmParams<T>,
    xn: &Tensor<T>,
    n_heads: usize,
) -> Vec<Vec<f64>> {
    let x = to_f64(xn);
    let b_dt = flat(&p.b_dt);
    let a: Vec<Vec<f64>> = project(&x, &p.w_dt)
        .iter()
        .map(|row| {
            row.iter()
                .enumerate()
                .map(|(h, z)| (-softplus(z + b_dt[h]).clamp(1e-6, 60.0)).exp())
                .collect()
        })
        .collect();
    let y = selective_scan(
        &tensor(&project(&x, &p.w_x)),
        &tensor(&a),
        &tensor(&project(&x, &p.w_b)),
        &tensor(&project(&x, &p.w_c)),
        n_heads,
    );
    project(&y, &p.wo)
}

// ---------------------------------------------------------------------------
// structural ablation oracles

/// The same model with layer `l` physically removed.
pub fn without_layer<T: crate::scalar::Scalar>(
    params: &crate::params::Parameters<T>,
    config: &crate::config::ModelConfig,
    l: usize,
) -> (crate::params::Parameters<T>, crate::config::ModelConfig) {
    use crate::config::LayoutKind;
    let mut p = params.clone();
    p.layers.remove(l);
    let mut c = config.clone();
    match c.layout.kind {
        LayoutKind::Sequential => {
            c.layout.sequential_pattern.remove(l);
        }
        LayoutKind::Parallel | LayoutKind::PureAttention => c.layout.n_blocks -= 1,
    }
    (p, c)
}

/// The same model with one component's output projection set to zero, so
/// that component contributes the zero function.
pub fn with_zeroed_component<T: crate::scalar::Scalar>(
    params: &crate::params::Parameters<T>,
    id: crate::ablation::ComponentId,
) -> crate::params::Parameters<T> {
    use crate::ablation::ComponentKind;
    use crate::params::{LayerParams, MixerParams};
    let mut p = params.clone();
    let wo = match (&mut p.layers[id.layer_index], id.kind) {
        (LayerParams::Single { mixer: MixerParams::Softmax(a), .. }, ComponentKind::SoftmaxAttention) => &mut a.wo,
        (LayerParams::Single { mixer: MixerParams::Linear(d), .. }, ComponentKind::LinearAttention) => &mut d.wo,
        (LayerParams::Parallel { attn, .. }, ComponentKind::SoftmaxAttention) => &mut attn.wo,
        (LayerParams::Parallel { ssm, .. }, ComponentKind::Ssm) => &mut ssm.wo,
        (_, kind) => panic!("layer {} has no {kind:?} component", id.layer_index),
    };
    wo.fill_zero();
    p
}

// ---------------------------------------------------------------------------
// exhaustive bootstrap

/// Interval of the paired mean difference from the exact resampling
/// distribution over all nⁿ equally likely resamples: the generalized
/// inverse CDF at each tail, which is where a large bootstrap settles.
/// Only sensible for tiny `n`.
pub fn exhaustive_drop_ci(baseline: &[f64], ablated: &[f64], level: f64) -> (f64, f64) {
    let diffs: Vec<f64> = ablated.iter().zip(baseline).map(|(a, b)| a - b).collect();
    let n = diffs.len();
    let total = n.pow(n as u32);
    let mut dist = Vec::with_capacity(total);
    for code in 0..total {
        let mut c = code;
        let mut sum = 0.0;
        for _ in 0..n {
            sum += diffs[c % n];
            c /= n;
        }
        dist.push(sum / n as f64);
    }
    dist.sort_by(f64::total_cmp);
    let quantile = |q: f64| {
        let k = (q * total as f64).ceil() as usize;
        dist[k.clamp(1, total) - 1]
    };
    let tail = (1.0 - level) / 2.0;
    (quantile(tail), quantile(1.0 - tail))
}
