//! Sequence-mixing kernels operating on already-projected per-head inputs.
//!
//! All three kernels are causal by construction and run sequentially over
//! time. Each has a matching reverse-mode routine; when `record` is set the
//! forward pass keeps whatever the backward pass needs.

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Head geometry shared by the kernels.
#[derive(Debug, Clone, Copy)]
pub struct Heads {
    pub n_heads: usize,
    pub key_dim: usize,
    pub value_dim: usize,
}

// ---------------------------------------------------------------------------
// causal softmax attention

pub struct AttentionTrace<T> {
    /// Attention weights, `[head][query][key]`, zero above the diagonal.
    pub probs: Vec<T>,
}

/// Multi-head causal softmax attention.
///
/// `q`, `k`: `(T, H*dk)`; `v`: `(T, H*dv)`; returns `(T, H*dv)`.
pub fn causal_attention<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    heads: Heads,
    record: bool,
) -> (Tensor<T>, Option<AttentionTrace<T>>) {
    let len = q.rows();
    let Heads {
        n_heads,
        key_dim: dk,
        value_dim: dv,
    } = heads;
    let qk_w = n_heads * dk;
    let v_w = n_heads * dv;
    let scale = T::one() / T::from_usize(dk).unwrap().sqrt();
    let mut out = Tensor::zeros(&[len, v_w]);
    let mut all_probs = if record {
        vec![T::zero(); n_heads * len * len]
    } else {
        Vec::new()
    };
    let mut scores = vec![T::zero(); len * len];
    for h in 0..n_heads {
        T::gemm(
            len,
            dk,
            len,
            scale,
            &q.data[h * dk..],
            qk_w as isize,
            1,
            &k.data[h * dk..],
            1,
            qk_w as isize,
            T::zero(),
            &mut scores,
            len as isize,
            1,
        );
        for i in 0..len {
            let row = &mut scores[i * len..(i + 1) * len];
            crate::tensor::softmax_in_place(&mut row[..=i]);
            row[i + 1..].iter_mut().for_each(|x| *x = T::zero());
        }
        T::gemm(
            len,
            len,
            dv,
            T::one(),
            &scores,
            len as isize,
            1,
            &v.data[h * dv..],
            v_w as isize,
            1,
            T::zero(),
            &mut out.data[h * dv..],
            v_w as isize,
            1,
        );
        if record {
            all_probs[h * len * len..(h + 1) * len * len].copy_from_slice(&scores);
        }
    }
    (out, record.then_some(AttentionTrace { probs: all_probs }))
}

/// Gradients of [`causal_attention`] with respect to `q`, `k`, `v`.
pub fn causal_attention_backward<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    trace: &AttentionTrace<T>,
    d_out: &Tensor<T>,
    heads: Heads,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let len = q.rows();
    let Heads {
        n_heads,
        key_dim: dk,
        value_dim: dv,
    } = heads;
    let qk_w = n_heads * dk;
    let v_w = n_heads * dv;
    let scale = T::one() / T::from_usize(dk).unwrap().sqrt();
    let mut dq = Tensor::zeros(&q.shape);
    let mut dk_t = Tensor::zeros(&k.shape);
    let mut dv_t = Tensor::zeros(&v.shape);
    let mut d_probs = vec![T::zero(); len * len];
    for h in 0..n_heads {
        let probs = &trace.probs[h * len * len..(h + 1) * len * len];
        // dP = dO V^T
        T::gemm(
            len,
            dv,
            len,
            T::one(),
            &d_out.data[h * dv..],
            v_w as isize,
            1,
            &v.data[h * dv..],
            1,
            v_w as isize,
            T::zero(),
            &mut d_probs,
            len as isize,
            1,
        );
        // dV += P^T dO
        T::gemm(
            len,
            len,
            dv,
            T::one(),
            probs,
            1,
            len as isize,
            &d_out.data[h * dv..],
            v_w as isize,
            1,
            T::one(),
            &mut dv_t.data[h * dv..],
            v_w as isize,
            1,
        );
        // softmax Jacobian, scaled; reuse d_probs as dScores
        for i in 0..len {
            let p = &probs[i * len..(i + 1) * len];
            let g = &mut d_probs[i * len..(i + 1) * len];
            let inner: T = (0..=i).map(|j| p[j] * g[j]).sum();
            for j in 0..=i {
                g[j] = p[j] * (g[j] - inner) * scale;
            }
            g[i + 1..].iter_mut().for_each(|x| *x = T::zero());
        }
        // dQ += dS K
        T::gemm(
            len,
            len,
            dk,
            T::one(),
            &d_probs,
            len as isize,
            1,
            &k.data[h * dk..],
            qk_w as isize,
            1,
            T::one(),
            &mut dq.data[h * dk..],
            qk_w as isize,
            1,
        );
        // dK += dS^T Q
        T::gemm(
            len,
            len,
            dk,
            T::one(),
            &d_probs,
            1,
            len as isize,
            &q.data[h * dk..],
            qk_w as isize,
            1,
            T::one(),
            &mut dk_t.data[h * dk..],
            qk_w as isize,
            1,
        );
    }
    (dq, dk_t, dv_t)
}

// ---------------------------------------------------------------------------
// gated delta rule

pub struct DeltaTrace<T> {
    /// `S_0..=S_T` per head, `[head][t][key][value]`.
    pub states: Vec<T>,
}

pub struct DeltaGrads<T> {
    pub dq: Tensor<T>,
    pub dk: Tensor<T>,
    pub dv: Tensor<T>,
    pub d_alpha: Tensor<T>,
    pub d_beta: Tensor<T>,
}

/// Gated delta rule with zero initial state:
/// `S_t = α_t (I − β_t k_t k_tᵀ) S_{t−1} + β_t k_t v_tᵀ`, `o_t = S_tᵀ q_t`.
///
/// `q`, `k`: `(T, H*dk)`, `v`: `(T, H*dv)`, `alpha`, `beta`: `(T, H)`.
pub fn gated_delta_rule<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    alpha: &Tensor<T>,
    beta: &Tensor<T>,
    heads: Heads,
    record: bool,
) -> (Tensor<T>, Option<DeltaTrace<T>>) {
    let len = q.rows();
    let Heads {
        n_heads,
        key_dim: dk,
        value_dim: dv,
    } = heads;
    let block = dk * dv;
    let mut out = Tensor::zeros(&[len, n_heads * dv]);
    let mut states = if record {
        vec![T::zero(); n_heads * (len + 1) * block]
    } else {
        Vec::new()
    };
    let mut s = vec![T::zero(); block];
    let mut u = vec![T::zero(); dv];
    for h in 0..n_heads {
        s.iter_mut().for_each(|x| *x = T::zero());
        for t in 0..len {
            let kt = &k.row(t)[h * dk..(h + 1) * dk];
            let vt = &v.row(t)[h * dv..(h + 1) * dv];
            let qt = &q.row(t)[h * dk..(h + 1) * dk];
            let a = alpha.row(t)[h];
            let b = beta.row(t)[h];
            u.iter_mut().for_each(|x| *x = T::zero());
            for i in 0..dk {
                let ki = kt[i];
                for (uj, &sij) in u.iter_mut().zip(&s[i * dv..(i + 1) * dv]) {
                    *uj += ki * sij;
                }
            }
            for i in 0..dk {
                let bk = b * kt[i];
                let row = &mut s[i * dv..(i + 1) * dv];
                for j in 0..dv {
                    row[j] = a * (row[j] - bk * u[j]) + bk * vt[j];
                }
            }
            let ot = &mut out.row_mut(t)[h * dv..(h + 1) * dv];
            for i in 0..dk {
                let qi = qt[i];
                for (oj, &sij) in ot.iter_mut().zip(&s[i * dv..(i + 1) * dv]) {
                    *oj += sij * qi;
                }
            }
            if record {
                let at = (h * (len + 1) + t + 1) * block;
                states[at..at + block].copy_from_slice(&s);
            }
        }
    }
    (out, record.then_some(DeltaTrace { states }))
}

#[allow(clippy::too_many_arguments)]
pub fn gated_delta_rule_backward<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    alpha: &Tensor<T>,
    beta: &Tensor<T>,
    trace: &DeltaTrace<T>,
    d_out: &Tensor<T>,
    heads: Heads,
) -> DeltaGrads<T> {
    let len = q.rows();
    let Heads {
        n_heads,
        key_dim: dk,
        value_dim: dv,
    } = heads;
    let block = dk * dv;
    let mut g = DeltaGrads {
        dq: Tensor::zeros(&q.shape),
        dk: Tensor::zeros(&k.shape),
        dv: Tensor::zeros(&v.shape),
        d_alpha: Tensor::zeros(&alpha.shape),
        d_beta: Tensor::zeros(&beta.shape),
    };
    let mut ds = vec![T::zero(); block];
    let mut u = vec![T::zero(); dv];
    let mut du = vec![T::zero(); dv];
    for h in 0..n_heads {
        ds.iter_mut().for_each(|x| *x = T::zero());
        for t in (0..len).rev() {
            let base = h * (len + 1) * block;
            let s_t = &trace.states[base + (t + 1) * block..base + (t + 2) * block];
            let s_prev = &trace.states[base + t * block..base + (t + 1) * block];
            let kt = &k.row(t)[h * dk..(h + 1) * dk];
            let vt = &v.row(t)[h * dv..(h + 1) * dv];
            let qt = &q.row(t)[h * dk..(h + 1) * dk];
            let dot_ = &d_out.row(t)[h * dv..(h + 1) * dv];
            let a = alpha.row(t)[h];
            let b = beta.row(t)[h];

            // o_t = S_tᵀ q_t
            {
                let dqt = &mut g.dq.row_mut(t)[h * dk..(h + 1) * dk];
                for i in 0..dk {
                    let row = &s_t[i * dv..(i + 1) * dv];
                    dqt[i] += crate::tensor::dot(row, dot_);
                    let qi = qt[i];
                    for (dsij, &doj) in ds[i * dv..(i + 1) * dv].iter_mut().zip(dot_) {
                        *dsij += qi * doj;
                    }
                }
            }

            u.iter_mut().for_each(|x| *x = T::zero());
            for i in 0..dk {
                let ki = kt[i];
                for (uj, &pij) in u.iter_mut().zip(&s_prev[i * dv..(i + 1) * dv]) {
                    *uj += ki * pij;
                }
            }

            // S_t = α (P − β k u) + β k vᵀ
            let mut d_a = T::zero();
            let mut d_b = T::zero();
            du.iter_mut().for_each(|x| *x = T::zero());
            let dkt = &mut g.dk.row_mut(t)[h * dk..(h + 1) * dk];
            let dvt = &mut g.dv.row_mut(t)[h * dv..(h + 1) * dv];
            for i in 0..dk {
                let ki = kt[i];
                let mut dki = T::zero();
                for j in 0..dv {
                    let dsij = ds[i * dv + j];
                    let m = s_prev[i * dv + j] - b * ki * u[j];
                    d_a += dsij * m;
                    let gij = a * dsij;
                    d_b += dsij * ki * vt[j] - gij * ki * u[j];
                    dki += b * (dsij * vt[j] - gij * u[j]);
                    dvt[j] += b * dsij * ki;
                    du[j] -= b * gij * ki;
                }
                dkt[i] += dki;
            }
            // u = kᵀ P; dP = α dS + k duᵀ
            for i in 0..dk {
                let ki = kt[i];
                let p_row = &s_prev[i * dv..(i + 1) * dv];
                dkt[i] += crate::tensor::dot(p_row, &du);
                for j in 0..dv {
                    ds[i * dv + j] = a * ds[i * dv + j] + ki * du[j];
                }
            }
            g.d_alpha.row_mut(t)[h] += d_a;
            g.d_beta.row_mut(t)[h] += d_b;
        }
    }
    g
}

// ---------------------------------------------------------------------------
// selective scan

pub struct ScanTrace<T> {
    /// `s_0..=s_T`, `[t][head][channel][state]`.
    pub states: Vec<T>,
}

pub struct ScanGrads<T> {
    pub dx: Tensor<T>,
    pub da: Tensor<T>,
    pub db: Tensor<T>,
    pub dc: Tensor<T>,
}

/// Selective scan with per-head scalar decay and zero initial state:
/// `s_t = a_t s_{t−1} + b_t x_t`, `y_t = c_tᵀ s_t`, per channel.
///
/// `x`: `(T, H*P)`, `a`: `(T, H)`, `b`, `c`: `(T, N)`; returns `(T, H*P)`.
pub fn selective_scan<T: Scalar>(
    x: &Tensor<T>,
    a: &Tensor<T>,
    b: &Tensor<T>,
    c: &Tensor<T>,
    n_heads: usize,
    record: bool,
) -> (Tensor<T>, Option<ScanTrace<T>>) {
    let len = x.rows();
    let width = x.cols();
    let channels = width / n_heads;
    let n = b.cols();
    let block = width * n;
    let mut y = Tensor::zeros(&[len, width]);
    let mut s = vec![T::zero(); block];
    let mut states = if record {
        vec![T::zero(); (len + 1) * block]
    } else {
        Vec::new()
    };
    for t in 0..len {
        let bt = b.row(t);
        let ct = c.row(t);
        let xt = x.row(t);
        let at = a.row(t);
        let yt = y.row_mut(t);
        for ch in 0..width {
            let decay = at[ch / channels];
            let xv = xt[ch];
            let st = &mut s[ch * n..(ch + 1) * n];
            let mut acc = T::zero();
            for ((sv, &bv), &cv) in st.iter_mut().zip(bt).zip(ct) {
                *sv = decay * *sv + bv * xv;
                acc += cv * *sv;
            }
            yt[ch] = acc;
        }
        if record {
            states[(t + 1) * block..(t + 2) * block].copy_from_slice(&s);
        }
    }
    (y, record.then_some(ScanTrace { states }))
}

#[allow(clippy::too_many_arguments)]
pub fn selective_scan_backward<T: Scalar>(
    x: &Tensor<T>,
    a: &Tensor<T>,
    b: &Tensor<T>,
    c: &Tensor<T>,
    trace: &ScanTrace<T>,
    dy: &Tensor<T>,
    n_heads: usize,
) -> ScanGrads<T> {
    let len = x.rows();
    let width = x.cols();
    let channels = width / n_heads;
    let n = b.cols();
    let block = width * n;
    let mut g = ScanGrads {
        dx: Tensor::zeros(&x.shape),
        da: Tensor::zeros(&a.shape),
        db: Tensor::zeros(&b.shape),
        dc: Tensor::zeros(&c.shape),
    };
    let mut ds = vec![T::zero(); block];
    for t in (0..len).rev() {
        let s_t = &trace.states[(t + 1) * block..(t + 2) * block];
        let s_prev = &trace.states[t * block..(t + 1) * block];
        let bt = b.row(t);
        let ct = c.row(t);
        let xt = x.row(t);
        let at = a.row(t);
        let dyt = dy.row(t);
        let mut dct = vec![T::zero(); n];
        let mut dbt = vec![T::zero(); n];
        let mut dat = vec![T::zero(); n_heads];
        let dxt = g.dx.row_mut(t);
        for ch in 0..width {
            let decay = at[ch / channels];
            let dyv = dyt[ch];
            let xv = xt[ch];
            let dst = &mut ds[ch * n..(ch + 1) * n];
            let st = &s_t[ch * n..(ch + 1) * n];
            let sp = &s_prev[ch * n..(ch + 1) * n];
            let mut d_decay = T::zero();
            let mut dx_acc = T::zero();
            for j in 0..n {
                dst[j] += ct[j] * dyv;
                dct[j] += dyv * st[j];
                d_decay += dst[j] * sp[j];
                dbt[j] += dst[j] * xv;
                dx_acc += dst[j] * bt[j];
                dst[j] *= decay;
            }
            dxt[ch] += dx_acc;
            dat[ch / channels] += d_decay;
        }
        g.dc.row_mut(t).copy_from_slice(&dct);
        g.db.row_mut(t).copy_from_slice(&dbt);
        g.da.row_mut(t).copy_from_slice(&dat);
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: usize, cols: usize, v: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(&[rows, cols], v.to_vec())
    }

    #[test]
    fn delta_single_step_writes_outer_product() {
        // one head, dk = 2, dv = 2; alpha = 1 so S_1 = beta k v^T
        let heads = Heads {
            n_heads: 1,
            key_dim: 2,
            value_dim: 2,
        };
        let k = t2(1, 2, &[0.6, 0.8]);
        let v = t2(1, 2, &[2.0, -1.0]);
        let q = t2(1, 2, &[1.0, 0.0]);
        let alpha = t2(1, 1, &[1.0]);
        let beta = t2(1, 1, &[0.5]);
        let (o, trace) = gated_delta_rule(&q, &k, &v, &alpha, &beta, heads, true);
        let s1 = &trace.unwrap().states[4..8];
        let want = [0.5 * 0.6 * 2.0, -(0.5 * 0.6), 0.5 * 0.8 * 2.0, -(0.5 * 0.8)];
        for (a, b) in s1.iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
        // o = S^T q picks the first key row
        assert!((o.data[0] - want[0]).abs() < 1e-15);
        assert!((o.data[1] - want[1]).abs() < 1e-15);
    }

    #[test]
    fn delta_without_writes_is_silent() {
        let heads = Heads {
            n_heads: 2,
            key_dim: 3,
            value_dim: 2,
        };
        let len = 5;
        let fill = |c: usize, s: f64| {
            Tensor::from_vec(&[len, c], (0..len * c).map(|i| (i as f64 * s).cos()).collect())
        };
        let (o, _) = gated_delta_rule(
            &fill(6, 0.3),
            &fill(6, 0.7),
            &fill(4, 1.1),
            &Tensor::filled(&[len, 2], 0.9),
            &Tensor::zeros(&[len, 2]),
            heads,
            false,
        );
        assert!(o.data.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn delta_rule_overwrites_same_key() {
        let heads = Heads {
            n_heads: 1,
            key_dim: 2,
            value_dim: 3,
        };
        let k = t2(2, 2, &[0.6, 0.8, 0.6, 0.8]);
        let v = t2(2, 3, &[1.0, 2.0, 3.0, -4.0, 0.5, 7.0]);
        let q = k.clone();
        let ones = Tensor::filled(&[2, 1], 1.0);
        let (o, _) = gated_delta_rule(&q, &k, &v, &ones, &ones, heads, false);
        for (got, want) in o.row(1).iter().zip([-4.0, 0.5, 7.0]) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn scan_prefix_sum_and_memoryless_cases() {
        let x = t2(4, 1, &[1.0, 2.0, -3.0, 0.5]);
        let ones = Tensor::filled(&[4, 1], 1.0);
        let (y, _) = selective_scan(&x, &ones, &ones, &ones, 1, false);
        assert_eq!(y.data, vec![1.0, 3.0, 0.0, 0.5]);

        let zeros = Tensor::zeros(&[4, 1]);
        let b = t2(4, 1, &[2.0, 2.0, 2.0, 2.0]);
        let c = t2(4, 1, &[0.5, 1.0, 1.5, 2.0]);
        let (y, _) = selective_scan(&x, &zeros, &b, &c, 1, false);
        for t in 0..4 {
            assert_eq!(y.data[t], c.data[t] * b.data[t] * x.data[t]);
        }
    }

    #[test]
    fn attention_single_token_returns_value() {
        let heads = Heads {
            n_heads: 2,
            key_dim: 2,
            value_dim: 3,
        };
        let q = t2(1, 4, &[0.3, -2.0, 5.0, 1.0]);
        let k = t2(1, 4, &[1.0, 1.0, -1.0, 0.5]);
        let v = t2(1, 6, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let (o, _) = causal_attention(&q, &k, &v, heads, false);
        assert_eq!(o.data, v.data);
    }

    #[test]
    fn attention_zero_scores_average_prefix() {
        let heads = Heads {
            n_heads: 1,
            key_dim: 2,
            value_dim: 1,
        };
        let z = Tensor::zeros(&[3, 2]);
        let v = t2(3, 1, &[3.0, 6.0, 9.0]);
        let (o, trace) = causal_attention(&z, &z, &v, heads, true);
        let want = [3.0, 4.5, 6.0];
        for (a, b) in o.data.iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
        let p = trace.unwrap().probs;
        assert!((p[2 * 3] - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(p[1], 0.0);
    }
}
