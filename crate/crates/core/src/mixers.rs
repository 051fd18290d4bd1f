//! Token mixers and sub-blocks acting on a pre-normalized input.
//!
//! Every `*_forward` maps `xn: (T, d_model)` to an additive residual
//! contribution of the same shape. With `record` set it also returns the
//! cache its `*_backward` consumes; backward routines accumulate into a
//! gradient struct of the same type as the parameters.

use crate::config::ModelConfig;
use crate::kernels::{self, Heads};
use crate::params::{AttentionParams, DeltaParams, MlpParams, SsmParams};
use crate::scalar::Scalar;
use crate::tensor::{
    accumulate_input_grad, accumulate_weight_grad, matmul, sigmoid, silu, softplus, Tensor,
};

pub const RMS_EPS: f64 = 1e-5;
const L2_EPS: f64 = 1e-6;
/// Lower clamp on the log of the delta-rule decay gate.
pub const MIN_LOG_ALPHA: f64 = -60.0;
/// Clamp range on `softplus` inside the scan decay, keeping `a_t` in (0, 1).
pub const SSM_SOFTPLUS_RANGE: (f64, f64) = (1e-6, 60.0);

pub fn heads_of(config: &ModelConfig) -> Heads {
    Heads {
        n_heads: config.n_heads,
        key_dim: config.key_dim,
        value_dim: config.value_dim,
    }
}

// ---------------------------------------------------------------------------
// RMS normalization

pub struct NormCache<T> {
    pub x: Tensor<T>,
    pub inv_rms: Vec<T>,
}

pub fn rms_norm<T: Scalar>(x: &Tensor<T>, gain: &Tensor<T>, record: bool) -> (Tensor<T>, Option<NormCache<T>>) {
    let d = x.cols();
    let eps = T::lit(RMS_EPS);
    let mut out = Tensor::zeros(&x.shape);
    let mut inv = Vec::with_capacity(x.rows());
    for i in 0..x.rows() {
        let row = x.row(i);
        let ms = row.iter().map(|&v| v * v).sum::<T>() / T::from_usize(d).unwrap();
        let r = T::one() / (ms + eps).sqrt();
        for ((o, &v), &g) in out.row_mut(i).iter_mut().zip(row).zip(&gain.data) {
            *o = v * r * g;
        }
        inv.push(r);
    }
    let cache = record.then(|| NormCache {
        x: x.clone(),
        inv_rms: inv,
    });
    (out, cache)
}

/// Accumulates into `d_gain` and `dx`.
pub fn rms_norm_backward<T: Scalar>(
    cache: &NormCache<T>,
    gain: &Tensor<T>,
    dy: &Tensor<T>,
    d_gain: &mut Tensor<T>,
    dx: &mut Tensor<T>,
) {
    let d = cache.x.cols();
    let inv_d = T::one() / T::from_usize(d).unwrap();
    for i in 0..cache.x.rows() {
        let x = cache.x.row(i);
        let r = cache.inv_rms[i];
        let g_row = dy.row(i);
        let mut inner = T::zero();
        for j in 0..d {
            let gy = g_row[j] * gain.data[j];
            inner += gy * x[j];
            d_gain.data[j] += g_row[j] * x[j] * r;
        }
        let coeff = r * r * r * inner * inv_d;
        let dxr = dx.row_mut(i);
        for j in 0..d {
            dxr[j] += r * g_row[j] * gain.data[j] - coeff * x[j];
        }
    }
}

// ---------------------------------------------------------------------------
// softmax attention

pub struct AttentionCache<T> {
    xn: Tensor<T>,
    q: Tensor<T>,
    k: Tensor<T>,
    v: Tensor<T>,
    o: Tensor<T>,
    trace: kernels::AttentionTrace<T>,
}

pub fn attention_forward<T: Scalar>(
    p: &AttentionParams<T>,
    xn: &Tensor<T>,
    heads: Heads,
    record: bool,
) -> (Tensor<T>, Option<AttentionCache<T>>) {
    let q = matmul(xn, &p.wq);
    let k = matmul(xn, &p.wk);
    let v = matmul(xn, &p.wv);
    let (o, trace) = kernels::causal_attention(&q, &k, &v, heads, record);
    let out = matmul(&o, &p.wo);
    let cache = trace.map(|trace| AttentionCache {
        xn: xn.clone(),
        q,
        k,
        v,
        o,
        trace,
    });
    (out, cache)
}

pub fn attention_backward<T: Scalar>(
    p: &AttentionParams<T>,
    cache: &AttentionCache<T>,
    d_out: &Tensor<T>,
    grads: &mut AttentionParams<T>,
    dxn: &mut Tensor<T>,
    heads: Heads,
) {
    accumulate_weight_grad(&mut grads.wo, &cache.o, d_out);
    let mut d_o = Tensor::zeros(&cache.o.shape);
    accumulate_input_grad(&mut d_o, d_out, &p.wo);
    let (dq, dk, dv) =
        kernels::causal_attention_backward(&cache.q, &cache.k, &cache.v, &cache.trace, &d_o, heads);
    accumulate_weight_grad(&mut grads.wq, &cache.xn, &dq);
    accumulate_weight_grad(&mut grads.wk, &cache.xn, &dk);
    accumulate_weight_grad(&mut grads.wv, &cache.xn, &dv);
    accumulate_input_grad(dxn, &dq, &p.wq);
    accumulate_input_grad(dxn, &dk, &p.wk);
    accumulate_input_grad(dxn, &dv, &p.wv);
}

// ---------------------------------------------------------------------------
// gated delta-rule linear attention

/// Per-token gate values after their activations, `(T, H)` each.
pub struct DeltaGates<T> {
    pub alpha: Tensor<T>,
    pub beta: Tensor<T>,
}

pub struct DeltaCache<T> {
    xn: Tensor<T>,
    q_norm: Vec<T>,
    k_norm: Vec<T>,
    q: Tensor<T>,
    k: Tensor<T>,
    v: Tensor<T>,
    log_sig: Tensor<T>,
    alpha_clamped: Vec<bool>,
    z_alpha: Tensor<T>,
    gates: DeltaGates<T>,
    o: Tensor<T>,
    trace: kernels::DeltaTrace<T>,
}

fn l2_normalize_heads<T: Scalar>(x: &mut Tensor<T>, head_dim: usize) -> Vec<T> {
    let eps = T::lit(L2_EPS);
    let mut norms = Vec::with_capacity(x.len() / head_dim);
    for chunk in x.data.chunks_mut(head_dim) {
        let n = (chunk.iter().map(|&v| v * v).sum::<T>() + eps).sqrt();
        chunk.iter_mut().for_each(|v| *v /= n);
        norms.push(n);
    }
    norms
}

fn l2_normalize_backward<T: Scalar>(y: &Tensor<T>, norms: &[T], dy: &Tensor<T>, head_dim: usize) -> Tensor<T> {
    let mut dx = Tensor::zeros(&y.shape);
    for (((dxc, yc), dyc), &n) in dx
        .data
        .chunks_mut(head_dim)
        .zip(y.data.chunks(head_dim))
        .zip(dy.data.chunks(head_dim))
        .zip(norms)
    {
        let proj = crate::tensor::dot(yc, dyc);
        for ((d, &yv), &g) in dxc.iter_mut().zip(yc).zip(dyc) {
            *d = (g - yv * proj) / n;
        }
    }
    dx
}

/// Decay and write-strength gates for a normalized input.
pub fn delta_gates<T: Scalar>(p: &DeltaParams<T>, xn: &Tensor<T>) -> DeltaGates<T> {
    let (gates, ..) = delta_gates_full(p, xn);
    gates
}

#[allow(clippy::type_complexity)]
fn delta_gates_full<T: Scalar>(
    p: &DeltaParams<T>,
    xn: &Tensor<T>,
) -> (DeltaGates<T>, Tensor<T>, Tensor<T>, Vec<bool>) {
    let mut z_alpha = matmul(xn, &p.w_alpha);
    let heads = p.b_alpha.len();
    for row in z_alpha.data.chunks_mut(heads) {
        for (z, &b) in row.iter_mut().zip(&p.b_alpha.data) {
            *z += b;
        }
    }
    let mut log_sig = Tensor::zeros(&z_alpha.shape);
    let mut alpha = Tensor::zeros(&z_alpha.shape);
    let mut clamped = vec![false; z_alpha.len()];
    let floor = T::lit(MIN_LOG_ALPHA);
    for (i, &z) in z_alpha.data.iter().enumerate() {
        let ls = -softplus(-z);
        let tau = p.log_tau.data[i % heads].exp();
        let mut la = tau * ls;
        if la < floor {
            la = floor;
            clamped[i] = true;
        }
        log_sig.data[i] = ls;
        alpha.data[i] = la.exp();
    }
    let mut beta = matmul(xn, &p.w_beta);
    beta.data.iter_mut().for_each(|z| *z = sigmoid(*z));
    (DeltaGates { alpha, beta }, z_alpha, log_sig, clamped)
}

pub fn delta_forward<T: Scalar>(
    p: &DeltaParams<T>,
    xn: &Tensor<T>,
    heads: Heads,
    record: bool,
) -> (Tensor<T>, Option<DeltaCache<T>>) {
    let mut q = matmul(xn, &p.wq);
    let mut k = matmul(xn, &p.wk);
    let v = matmul(xn, &p.wv);
    let q_norm = l2_normalize_heads(&mut q, heads.key_dim);
    let k_norm = l2_normalize_heads(&mut k, heads.key_dim);
    let (gates, z_alpha, log_sig, alpha_clamped) = delta_gates_full(p, xn);
    let (o, trace) = kernels::gated_delta_rule(&q, &k, &v, &gates.alpha, &gates.beta, heads, record);
    let out = matmul(&o, &p.wo);
    let cache = trace.map(|trace| DeltaCache {
        xn: xn.clone(),
        q_norm,
        k_norm,
        q,
        k,
        v,
        log_sig,
        alpha_clamped,
        z_alpha,
        gates,
        o,
        trace,
    });
    (out, cache)
}

pub fn delta_backward<T: Scalar>(
    p: &DeltaParams<T>,
    cache: &DeltaCache<T>,
    d_out: &Tensor<T>,
    grads: &mut DeltaParams<T>,
    dxn: &mut Tensor<T>,
    heads: Heads,
) {
    accumulate_weight_grad(&mut grads.wo, &cache.o, d_out);
    let mut d_o = Tensor::zeros(&cache.o.shape);
    accumulate_input_grad(&mut d_o, d_out, &p.wo);
    let g = kernels::gated_delta_rule_backward(
        &cache.q,
        &cache.k,
        &cache.v,
        &cache.gates.alpha,
        &cache.gates.beta,
        &cache.trace,
        &d_o,
        heads,
    );

    let n_heads = heads.n_heads;
    let mut dz_alpha = Tensor::zeros(&cache.z_alpha.shape);
    for i in 0..dz_alpha.len() {
        if cache.alpha_clamped[i] {
            continue;
        }
        let h = i % n_heads;
        let tau = p.log_tau.data[h].exp();
        let d_log_alpha = g.d_alpha.data[i] * cache.gates.alpha.data[i];
        grads.log_tau.data[h] += d_log_alpha * cache.log_sig.data[i] * tau;
        let dz = d_log_alpha * tau * sigmoid(-cache.z_alpha.data[i]);
        dz_alpha.data[i] = dz;
        grads.b_alpha.data[h] += dz;
    }
    let mut dz_beta = g.d_beta;
    for (d, &b) in dz_beta.data.iter_mut().zip(&cache.gates.beta.data) {
        *d *= b * (T::one() - b);
    }
    let dq_raw = l2_normalize_backward(&cache.q, &cache.q_norm, &g.dq, heads.key_dim);
    let dk_raw = l2_normalize_backward(&cache.k, &cache.k_norm, &g.dk, heads.key_dim);

    accumulate_weight_grad(&mut grads.wq, &cache.xn, &dq_raw);
    accumulate_weight_grad(&mut grads.wk, &cache.xn, &dk_raw);
    accumulate_weight_grad(&mut grads.wv, &cache.xn, &g.dv);
    accumulate_weight_grad(&mut grads.w_alpha, &cache.xn, &dz_alpha);
    accumulate_weight_grad(&mut grads.w_beta, &cache.xn, &dz_beta);
    accumulate_input_grad(dxn, &dq_raw, &p.wq);
    accumulate_input_grad(dxn, &dk_raw, &p.wk);
    accumulate_input_grad(dxn, &g.dv, &p.wv);
    accumulate_input_grad(dxn, &dz_alpha, &p.w_alpha);
    accumulate_input_grad(dxn, &dz_beta, &p.w_beta);
}

// ---------------------------------------------------------------------------
// selective-scan SSM path

pub struct SsmCache<T> {
    xn: Tensor<T>,
    x: Tensor<T>,
    a: Tensor<T>,
    b: Tensor<T>,
    c: Tensor<T>,
    z_dt: Tensor<T>,
    dt_clamped: Vec<bool>,
    y: Tensor<T>,
    trace: kernels::ScanTrace<T>,
}

/// Per-head scan decays `a_t = exp(−softplus(w_Δᵀ x_t + b_Δ))`, `(T, H)`.
pub fn ssm_decay<T: Scalar>(p: &SsmParams<T>, xn: &Tensor<T>) -> Tensor<T> {
    ssm_decay_full(p, xn).0
}

fn ssm_decay_full<T: Scalar>(p: &SsmParams<T>, xn: &Tensor<T>) -> (Tensor<T>, Tensor<T>, Vec<bool>) {
    let mut z = matmul(xn, &p.w_dt);
    let heads = p.b_dt.len();
    for row in z.data.chunks_mut(heads) {
        for (v, &b) in row.iter_mut().zip(&p.b_dt.data) {
            *v += b;
        }
    }
    let (lo, hi) = (T::lit(SSM_SOFTPLUS_RANGE.0), T::lit(SSM_SOFTPLUS_RANGE.1));
    let mut clamped = vec![false; z.len()];
    let mut a = Tensor::zeros(&z.shape);
    for (i, &zv) in z.data.iter().enumerate() {
        let sp = softplus(zv);
        let spc = sp.max(lo).min(hi);
        clamped[i] = spc != sp;
        a.data[i] = (-spc).exp();
    }
    (a, z, clamped)
}

pub fn ssm_forward<T: Scalar>(
    p: &SsmParams<T>,
    xn: &Tensor<T>,
    n_heads: usize,
    record: bool,
) -> (Tensor<T>, Option<SsmCache<T>>) {
    let x = matmul(xn, &p.w_x);
    let b = matmul(xn, &p.w_b);
    let c = matmul(xn, &p.w_c);
    let (a, z_dt, dt_clamped) = ssm_decay_full(p, xn);
    let (y, trace) = kernels::selective_scan(&x, &a, &b, &c, n_heads, record);
    let out = matmul(&y, &p.wo);
    let cache = trace.map(|trace| SsmCache {
        xn: xn.clone(),
        x,
        a,
        b,
        c,
        z_dt,
        dt_clamped,
        y,
        trace,
    });
    (out, cache)
}

pub fn ssm_backward<T: Scalar>(
    p: &SsmParams<T>,
    cache: &SsmCache<T>,
    d_out: &Tensor<T>,
    grads: &mut SsmParams<T>,
    dxn: &mut Tensor<T>,
    n_heads: usize,
) {
    accumulate_weight_grad(&mut grads.wo, &cache.y, d_out);
    let mut dy = Tensor::zeros(&cache.y.shape);
    accumulate_input_grad(&mut dy, d_out, &p.wo);
    let g = kernels::selective_scan_backward(
        &cache.x,
        &cache.a,
        &cache.b,
        &cache.c,
        &cache.trace,
        &dy,
        n_heads,
    );
    let mut dz = Tensor::zeros(&cache.z_dt.shape);
    for i in 0..dz.len() {
        if cache.dt_clamped[i] {
            continue;
        }
        // a = exp(-softplus(z)): da/dz = -a * sigmoid(z)
        let v = -g.da.data[i] * cache.a.data[i] * sigmoid(cache.z_dt.data[i]);
        dz.data[i] = v;
        grads.b_dt.data[i % n_heads] += v;
    }
    accumulate_weight_grad(&mut grads.w_x, &cache.xn, &g.dx);
    accumulate_weight_grad(&mut grads.w_b, &cache.xn, &g.db);
    accumulate_weight_grad(&mut grads.w_c, &cache.xn, &g.dc);
    accumulate_weight_grad(&mut grads.w_dt, &cache.xn, &dz);
    accumulate_input_grad(dxn, &g.dx, &p.w_x);
    accumulate_input_grad(dxn, &g.db, &p.w_b);
    accumulate_input_grad(dxn, &g.dc, &p.w_c);
    accumulate_input_grad(dxn, &dz, &p.w_dt);
}

// ---------------------------------------------------------------------------
// MLP

pub struct MlpCache<T> {
    xn: Tensor<T>,
    pre: Tensor<T>,
    act: Tensor<T>,
}

pub fn mlp_forward<T: Scalar>(p: &MlpParams<T>, xn: &Tensor<T>, record: bool) -> (Tensor<T>, Option<MlpCache<T>>) {
    let pre = matmul(xn, &p.w_in);
    let mut act = pre.clone();
    act.data.iter_mut().for_each(|v| *v = silu(*v));
    let out = matmul(&act, &p.w_out);
    let cache = record.then(|| MlpCache {
        xn: xn.clone(),
        pre,
        act,
    });
    (out, cache)
}

pub fn mlp_backward<T: Scalar>(
    p: &MlpParams<T>,
    cache: &MlpCache<T>,
    d_out: &Tensor<T>,
    grads: &mut MlpParams<T>,
    dxn: &mut Tensor<T>,
) {
    accumulate_weight_grad(&mut grads.w_out, &cache.act, d_out);
    let mut d_act = Tensor::zeros(&cache.act.shape);
    accumulate_input_grad(&mut d_act, d_out, &p.w_out);
    for (d, &x) in d_act.data.iter_mut().zip(&cache.pre.data) {
        let s = sigmoid(x);
        *d *= s * (T::one() + x * (T::one() - s));
    }
    accumulate_weight_grad(&mut grads.w_in, &cache.xn, &d_act);
    accumulate_input_grad(dxn, &d_act, &p.w_in);
}
