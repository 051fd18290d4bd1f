//! Forward computation for the three layouts, with optional hidden-state
//! capture and ablation masks, plus the training-time forward/backward.

use crate::ablation::{AblationCondition, LayerMask, Mask};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::loss;
use crate::mixers::{self, heads_of};
use crate::params::{LayerParams, MixerParams, Parameters};
use crate::scalar::Scalar;
use crate::tensor::{accumulate_input_grad, accumulate_weight_grad, matmul, Tensor};

/// Additive contribution a sub-block writes into the residual stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Contribution {
    SoftmaxAttention,
    LinearAttention,
    Ssm,
    Mlp,
}

#[derive(Debug, Clone)]
pub struct LayerCapture<T> {
    pub h_pre: Tensor<T>,
    pub h_post: Tensor<T>,
    /// One entry per sub-block; suppressed components record zeros.
    pub contributions: Vec<(Contribution, Tensor<T>)>,
}

impl<T: Scalar> LayerCapture<T> {
    pub fn contribution(&self, which: Contribution) -> Option<&Tensor<T>> {
        self.contributions.iter().find(|(c, _)| *c == which).map(|(_, t)| t)
    }
}

#[derive(Debug, Clone, Default)]
pub struct CaptureBuffer<T> {
    pub layers: Vec<LayerCapture<T>>,
    pub final_logits: Option<Tensor<T>>,
}

impl<T> CaptureBuffer<T> {
    pub fn is_empty(&self) -> bool {
        self.layers.is_empty() && self.final_logits.is_none()
    }
}

pub fn check_tokens(config: &ModelConfig, tokens: &[u32]) -> Result<()> {
    if tokens.is_empty() {
        return Err(Error::Input("empty token sequence".into()));
    }
    if tokens.len() > config.max_seq_len {
        return Err(Error::Input(format!(
            "sequence length {} exceeds max_seq_len {}",
            tokens.len(),
            config.max_seq_len
        )));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= config.vocab_size) {
        return Err(Error::Input(format!(
            "token id {bad} out of range for vocab {}",
            config.vocab_size
        )));
    }
    Ok(())
}

pub fn embed<T: Scalar>(params: &Parameters<T>, tokens: &[u32]) -> Tensor<T> {
    let d = params.embed.cols();
    let mut h = Tensor::zeros(&[tokens.len(), d]);
    for (t, &tok) in tokens.iter().enumerate() {
        h.row_mut(t).copy_from_slice(params.embed.row(tok as usize));
    }
    h
}

/// Final RMS norm followed by the unembedding.
pub fn unembed<T: Scalar>(params: &Parameters<T>, h: &Tensor<T>) -> Tensor<T> {
    let (xn, _) = mixers::rms_norm(h, &params.final_norm, false);
    matmul(&xn, &params.unembed)
}

/// Runs one layer. `capture` receives the layer's sub-block contributions.
pub fn block_forward<T: Scalar>(
    h: &Tensor<T>,
    layer: &LayerParams<T>,
    mask: LayerMask,
    config: &ModelConfig,
    mut capture: Option<&mut Vec<(Contribution, Tensor<T>)>>,
) -> Tensor<T> {
    let heads = heads_of(config);
    let mut record = |c: Contribution, t: &Tensor<T>| {
        if let Some(buf) = capture.as_deref_mut() {
            buf.push((c, t.clone()));
        }
    };
    if mask.skip {
        return h.clone();
    }
    let (mut h1, mlp_norm, mlp) = match layer {
        LayerParams::Single {
            norm,
            mixer,
            mlp_norm,
            mlp,
        } => {
            let (kind, zeroed) = match mixer {
                MixerParams::Softmax(_) => (Contribution::SoftmaxAttention, mask.zero_attention),
                MixerParams::Linear(_) => (Contribution::LinearAttention, mask.zero_linear),
            };
            let mut h1 = h.clone();
            if zeroed {
                record(kind, &Tensor::zeros(&h.shape));
            } else {
                let (xn, _) = mixers::rms_norm(h, norm, false);
                let out = match mixer {
                    MixerParams::Softmax(p) => mixers::attention_forward(p, &xn, heads, false).0,
                    MixerParams::Linear(p) => mixers::delta_forward(p, &xn, heads, false).0,
                };
                record(kind, &out);
                h1.add_assign(&out);
            }
            (h1, mlp_norm, mlp)
        }
        LayerParams::Parallel {
            norm,
            attn,
            ssm,
            mlp_norm,
            mlp,
        } => {
            let mut h1 = h.clone();
            let xn = (!(mask.zero_attention && mask.zero_ssm)).then(|| mixers::rms_norm(h, norm, false).0);
            if mask.zero_attention {
                record(Contribution::SoftmaxAttention, &Tensor::zeros(&h.shape));
            } else {
                let out = mixers::attention_forward(attn, xn.as_ref().unwrap(), heads, false).0;
                record(Contribution::SoftmaxAttention, &out);
                h1.add_assign(&out);
            }
            if mask.zero_ssm {
                record(Contribution::Ssm, &Tensor::zeros(&h.shape));
            } else {
                let out = mixers::ssm_forward(ssm, xn.as_ref().unwrap(), config.n_heads, false).0;
                record(Contribution::Ssm, &out);
                h1.add_assign(&out);
            }
            (h1, mlp_norm, mlp)
        }
    };
    let (xn2, _) = mixers::rms_norm(&h1, mlp_norm, false);
    let (out, _) = mixers::mlp_forward(mlp, &xn2, false);
    record(Contribution::Mlp, &out);
    h1.add_assign(&out);
    h1
}

/// Full forward pass. Returns `(T, vocab)` logits and, when `capture` is
/// set, per-layer hidden states and contributions.
pub fn forward<T: Scalar>(
    params: &Parameters<T>,
    config: &ModelConfig,
    tokens: &[u32],
    capture: bool,
    condition: Option<&AblationCondition>,
) -> Result<(Tensor<T>, CaptureBuffer<T>)> {
    let mask = match condition {
        Some(c) => c.mask(&config.layout)?,
        None => Mask::clear(config.n_layers()),
    };
    forward_masked(params, config, tokens, capture, &mask)
}

pub fn forward_masked<T: Scalar>(
    params: &Parameters<T>,
    config: &ModelConfig,
    tokens: &[u32],
    capture: bool,
    mask: &Mask,
) -> Result<(Tensor<T>, CaptureBuffer<T>)> {
    check_tokens(config, tokens)?;
    let mut h = embed(params, tokens);
    let mut buf = CaptureBuffer::default();
    for (l, layer) in params.layers.iter().enumerate() {
        let mut contributions = Vec::new();
        let next = block_forward(
            &h,
            layer,
            mask.layer(l),
            config,
            capture.then_some(&mut contributions),
        );
        if !next.all_finite() {
            return Err(Error::NonFinite {
                location: format!("layer {l}"),
            });
        }
        if capture {
            buf.layers.push(LayerCapture {
                h_pre: h,
                h_post: next.clone(),
                contributions,
            });
        }
        h = next;
    }
    let logits = unembed(params, &h);
    if !logits.all_finite() {
        return Err(Error::NonFinite {
            location: "unembedding".into(),
        });
    }
    if capture {
        buf.final_logits = Some(logits.clone());
    }
    Ok((logits, buf))
}

// ---------------------------------------------------------------------------
// training path

// one per layer per step
#[allow(clippy::large_enum_variant)]
enum MixerTape<T> {
    Softmax(mixers::AttentionCache<T>),
    Linear(mixers::DeltaCache<T>),
}

enum LayerTape<T> {
    Single {
        norm: mixers::NormCache<T>,
        mixer: MixerTape<T>,
        mlp_norm: mixers::NormCache<T>,
        mlp: mixers::MlpCache<T>,
    },
    Parallel {
        norm: mixers::NormCache<T>,
        attn: mixers::AttentionCache<T>,
        ssm: mixers::SsmCache<T>,
        mlp_norm: mixers::NormCache<T>,
        mlp: mixers::MlpCache<T>,
    },
}

fn layer_forward_recorded<T: Scalar>(
    h: &Tensor<T>,
    layer: &LayerParams<T>,
    config: &ModelConfig,
) -> (Tensor<T>, LayerTape<T>) {
    let heads = heads_of(config);
    let (norm_p, mlp_norm_p, mlp_p) = match layer {
        LayerParams::Single { norm, mlp_norm, mlp, .. } | LayerParams::Parallel { norm, mlp_norm, mlp, .. } => {
            (norm, mlp_norm, mlp)
        }
    };
    let (xn, norm) = mixers::rms_norm(h, norm_p, true);
    let norm = norm.unwrap();
    let mut h1 = h.clone();
    enum Mixed<T> {
        Single(MixerTape<T>),
        Parallel(mixers::AttentionCache<T>, mixers::SsmCache<T>),
    }
    let mixed = match layer {
        LayerParams::Single { mixer, .. } => {
            let (out, tape) = match mixer {
                MixerParams::Softmax(p) => {
                    let (o, c) = mixers::attention_forward(p, &xn, heads, true);
                    (o, MixerTape::Softmax(c.unwrap()))
                }
                MixerParams::Linear(p) => {
                    let (o, c) = mixers::delta_forward(p, &xn, heads, true);
                    (o, MixerTape::Linear(c.unwrap()))
                }
            };
            h1.add_assign(&out);
            Mixed::Single(tape)
        }
        LayerParams::Parallel { attn, ssm, .. } => {
            let (a_out, a_cache) = mixers::attention_forward(attn, &xn, heads, true);
            let (s_out, s_cache) = mixers::ssm_forward(ssm, &xn, config.n_heads, true);
            h1.add_assign(&a_out);
            h1.add_assign(&s_out);
            Mixed::Parallel(a_cache.unwrap(), s_cache.unwrap())
        }
    };
    let (xn2, mlp_norm) = mixers::rms_norm(&h1, mlp_norm_p, true);
    let (m_out, mlp) = mixers::mlp_forward(mlp_p, &xn2, true);
    h1.add_assign(&m_out);
    let (mlp_norm, mlp) = (mlp_norm.unwrap(), mlp.unwrap());
    let tape = match mixed {
        Mixed::Single(mixer) => LayerTape::Single {
            norm,
            mixer,
            mlp_norm,
            mlp,
        },
        Mixed::Parallel(attn, ssm) => LayerTape::Parallel {
            norm,
            attn,
            ssm,
            mlp_norm,
            mlp,
        },
    };
    (h1, tape)
}

/// Mean next-token cross-entropy of `tokens[..n]` predicting `targets`
/// and its gradient, accumulated into `grads` scaled by `weight`.
pub fn loss_and_grad<T: Scalar>(
    params: &Parameters<T>,
    config: &ModelConfig,
    tokens: &[u32],
    targets: &[u32],
    grads: &mut Parameters<T>,
    weight: T,
) -> Result<T> {
    check_tokens(config, tokens)?;
    if targets.len() != tokens.len() {
        return Err(Error::Input("tokens and targets differ in length".into()));
    }
    let heads = heads_of(config);
    let mut h = embed(params, tokens);
    let mut tapes = Vec::with_capacity(params.layers.len());
    for (l, layer) in params.layers.iter().enumerate() {
        let (next, tape) = layer_forward_recorded(&h, layer, config);
        if !next.all_finite() {
            return Err(Error::NonFinite {
                location: format!("layer {l}"),
            });
        }
        tapes.push(tape);
        h = next;
    }
    let (xf, final_cache) = mixers::rms_norm(&h, &params.final_norm, true);
    let final_cache = final_cache.unwrap();
    let logits = matmul(&xf, &params.unembed);
    let (loss, mut d_logits) = loss::cross_entropy_with_grad(&logits, targets)?;
    if weight != T::one() {
        d_logits.data.iter_mut().for_each(|g| *g *= weight);
    }

    accumulate_weight_grad(&mut grads.unembed, &xf, &d_logits);
    let mut d_xf = Tensor::zeros(&xf.shape);
    accumulate_input_grad(&mut d_xf, &d_logits, &params.unembed);
    let mut dh = Tensor::zeros(&h.shape);
    mixers::rms_norm_backward(&final_cache, &params.final_norm, &d_xf, &mut grads.final_norm, &mut dh);

    for ((layer, tape), grad) in params
        .layers
        .iter()
        .zip(tapes.iter())
        .zip(grads.layers.iter_mut())
        .rev()
    {
        // h2 = h1 + mlp(norm(h1))
        let (mlp_norm_p, mlp_p, g_mlp_norm, g_mlp, mlp_norm_c, mlp_c) = match (layer, tape, &mut *grad) {
            (
                LayerParams::Single { mlp_norm, mlp, .. },
                LayerTape::Single {
                    mlp_norm: nc, mlp: mc, ..
                },
                LayerParams::Single {
                    mlp_norm: gn, mlp: gm, ..
                },
            )
            | (
                LayerParams::Parallel { mlp_norm, mlp, .. },
                LayerTape::Parallel {
                    mlp_norm: nc, mlp: mc, ..
                },
                LayerParams::Parallel {
                    mlp_norm: gn, mlp: gm, ..
                },
            ) => (mlp_norm, mlp, gn, gm, nc, mc),
            _ => unreachable!("tape and parameters share a layout"),
        };
        let mut d_xn2 = Tensor::zeros(&dh.shape);
        mixers::mlp_backward(mlp_p, mlp_c, &dh, g_mlp, &mut d_xn2);
        mixers::rms_norm_backward(mlp_norm_c, mlp_norm_p, &d_xn2, g_mlp_norm, &mut dh);

        // h1 = h + mixer(norm(h))
        let mut d_xn = Tensor::zeros(&dh.shape);
        match (layer, tape, grad) {
            (
                LayerParams::Single { norm, mixer, .. },
                LayerTape::Single { norm: nc, mixer: mt, .. },
                LayerParams::Single {
                    norm: gn, mixer: gmx, ..
                },
            ) => {
                match (mixer, mt, gmx) {
                    (MixerParams::Softmax(p), MixerTape::Softmax(c), MixerParams::Softmax(g)) => {
                        mixers::attention_backward(p, c, &dh, g, &mut d_xn, heads)
                    }
                    (MixerParams::Linear(p), MixerTape::Linear(c), MixerParams::Linear(g)) => {
                        mixers::delta_backward(p, c, &dh, g, &mut d_xn, heads)
                    }
                    _ => unreachable!("mixer kinds agree"),
                }
                mixers::rms_norm_backward(nc, norm, &d_xn, gn, &mut dh);
            }
            (
                LayerParams::Parallel { norm, attn, ssm, .. },
                LayerTape::Parallel {
                    norm: nc,
                    attn: ac,
                    ssm: sc,
                    ..
                },
                LayerParams::Parallel {
                    norm: gn,
                    attn: ga,
                    ssm: gs,
                    ..
                },
            ) => {
                mixers::attention_backward(attn, ac, &dh, ga, &mut d_xn, heads);
                mixers::ssm_backward(ssm, sc, &dh, gs, &mut d_xn, config.n_heads);
                mixers::rms_norm_backward(nc, norm, &d_xn, gn, &mut dh);
            }
            _ => unreachable!("tape and parameters share a layout"),
        }
    }

    for (t, &tok) in tokens.iter().enumerate() {
        let row = grads.embed.row_mut(tok as usize);
        for (g, &d) in row.iter_mut().zip(dh.row(t)) {
            *g += d;
        }
    }
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::HybridLayout;

    fn tokens(n: usize, vocab: usize, salt: u32) -> Vec<u32> {
        (0..n as u32).map(|i| (i * 7 + salt * 3 + 1) % vocab as u32).collect()
    }

    fn layouts() -> Vec<HybridLayout> {
        vec![
            HybridLayout::three_to_one(1),
            HybridLayout::parallel(2),
            HybridLayout::pure_attention(2),
        ]
    }

    #[test]
    fn logits_shape_and_finiteness() {
        for layout in layouts() {
            let cfg = ModelConfig::micro(layout);
            let p = Parameters::<f32>::init(&cfg).unwrap();
            let (logits, cap) = forward(&p, &cfg, &[3], false, None).unwrap();
            assert_eq!(logits.shape, vec![1, cfg.vocab_size]);
            assert!(logits.all_finite());
            assert!(cap.is_empty());
        }
    }

    #[test]
    fn repeated_calls_are_bit_identical() {
        let cfg = ModelConfig::micro(HybridLayout::parallel(2));
        let p = Parameters::<f32>::init(&cfg).unwrap();
        let toks = tokens(9, cfg.vocab_size, 1);
        let a = forward(&p, &cfg, &toks, false, None).unwrap().0;
        let b = forward(&p, &cfg, &toks, false, None).unwrap().0;
        assert_eq!(a.data, b.data);
    }

    #[test]
    fn input_errors() {
        let cfg = ModelConfig::micro(HybridLayout::parallel(1));
        let p = Parameters::<f32>::init(&cfg).unwrap();
        assert!(matches!(
            forward(&p, &cfg, &[cfg.vocab_size as u32], false, None),
            Err(Error::Input(_))
        ));
        let long = vec![0u32; cfg.max_seq_len + 1];
        assert!(matches!(forward(&p, &cfg, &long, false, None), Err(Error::Input(_))));
    }

    #[test]
    fn non_finite_weights_name_the_layer() {
        let cfg = ModelConfig::micro(HybridLayout::parallel(2));
        let mut p = Parameters::<f32>::init(&cfg).unwrap();
        if let LayerParams::Parallel { mlp, .. } = &mut p.layers[1] {
            mlp.w_out.data[0] = f32::INFINITY;
        }
        match forward(&p, &cfg, &tokens(4, cfg.vocab_size, 0), false, None) {
            Err(Error::NonFinite { location }) => assert_eq!(location, "layer 1"),
            other => panic!("expected numeric error, got {other:?}"),
        }
    }

    #[test]
    fn capture_is_populated_per_layer() {
        for layout in layouts() {
            let cfg = ModelConfig::micro(layout);
            let p = Parameters::<f32>::init(&cfg).unwrap();
            let (logits, cap) = forward(&p, &cfg, &tokens(6, cfg.vocab_size, 2), true, None).unwrap();
            assert_eq!(cap.layers.len(), cfg.n_layers());
            assert_eq!(cap.final_logits.as_ref().unwrap().data, logits.data);
            for layer in &cap.layers {
                let expected = if cfg.layout.kind == crate::config::LayoutKind::Parallel { 3 } else { 2 };
                assert_eq!(layer.contributions.len(), expected);
            }
        }
    }

    #[test]
    fn recorded_forward_matches_inference_loss() {
        for layout in layouts() {
            let cfg = ModelConfig::micro(layout);
            let p = Parameters::<f64>::init(&cfg).unwrap();
            let toks = tokens(10, cfg.vocab_size, 3);
            let (inp, tgt) = (&toks[..9], &toks[1..]);
            let mut grads = p.zeros_like();
            let train_loss = loss_and_grad(&p, &cfg, inp, tgt, &mut grads, 1.0).unwrap();
            let (logits, _) = forward(&p, &cfg, inp, false, None).unwrap();
            let eval_loss = loss::cross_entropy(&logits, tgt).unwrap();
            assert!((train_loss - eval_loss).abs() < 1e-12);
        }
    }
}
