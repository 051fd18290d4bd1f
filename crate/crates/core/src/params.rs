//! Model parameters: typed storage plus a named, shape-audited view.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::{LayerKind, LayoutKind, ModelConfig};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams<T> {
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub wo: Tensor<T>,
}

/// Gated delta-rule mixer.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaParams<T> {
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub wo: Tensor<T>,
    pub w_alpha: Tensor<T>,
    pub b_alpha: Tensor<T>,
    /// Log of the per-head exponent applied to the decay gate.
    pub log_tau: Tensor<T>,
    pub w_beta: Tensor<T>,
}

/// Selective-scan mixer.
#[derive(Debug, Clone, PartialEq)]
pub struct SsmParams<T> {
    pub w_x: Tensor<T>,
    pub w_b: Tensor<T>,
    pub w_c: Tensor<T>,
    pub w_dt: Tensor<T>,
    pub b_dt: Tensor<T>,
    pub wo: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams<T> {
    pub w_in: Tensor<T>,
    pub w_out: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum MixerParams<T> {
    Softmax(AttentionParams<T>),
    Linear(DeltaParams<T>),
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerParams<T> {
    /// One token mixer followed by an MLP (sequential and pure-attention layouts).
    Single {
        norm: Tensor<T>,
        mixer: MixerParams<T>,
        mlp_norm: Tensor<T>,
        mlp: MlpParams<T>,
    },
    /// Attention and SSM paths sharing one pre-norm, followed by an MLP.
    Parallel {
        norm: Tensor<T>,
        attn: AttentionParams<T>,
        ssm: SsmParams<T>,
        mlp_norm: Tensor<T>,
        mlp: MlpParams<T>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parameters<T> {
    pub embed: Tensor<T>,
    pub layers: Vec<LayerParams<T>>,
    pub final_norm: Tensor<T>,
    pub unembed: Tensor<T>,
}

/// Parameter path and shape, in canonical (payload) order.
pub type ManifestEntry = (String, Vec<usize>);

/// Every parameter the declared layout reads, with the shape the config
/// implies.
pub fn expected_manifest(config: &ModelConfig) -> Vec<ManifestEntry> {
    let d = config.d_model;
    let h = config.n_heads;
    let qk = h * config.key_dim;
    let vw = config.mixer_width();
    let n = config.ssm_state_dim;
    let mut out = vec![("embed".to_string(), vec![config.vocab_size, d])];
    for l in 0..config.n_layers() {
        let p = |name: &str| format!("layers.{l}.{name}");
        out.push((p("norm"), vec![d]));
        let attn = |prefix: &str, out: &mut Vec<ManifestEntry>| {
            out.push((p(&format!("{prefix}.wq")), vec![d, qk]));
            out.push((p(&format!("{prefix}.wk")), vec![d, qk]));
            out.push((p(&format!("{prefix}.wv")), vec![d, vw]));
            out.push((p(&format!("{prefix}.wo")), vec![vw, d]));
        };
        match config.layout.kind {
            LayoutKind::Parallel => {
                attn("attn", &mut out);
                out.push((p("ssm.w_x"), vec![d, vw]));
                out.push((p("ssm.w_b"), vec![d, n]));
                out.push((p("ssm.w_c"), vec![d, n]));
                out.push((p("ssm.w_dt"), vec![d, h]));
                out.push((p("ssm.b_dt"), vec![h]));
                out.push((p("ssm.wo"), vec![vw, d]));
            }
            _ => match config.layout.mixer_kind(l) {
                Some(LayerKind::SoftmaxAttention) => attn("attn", &mut out),
                _ => {
                    attn("linear_attn", &mut out);
                    out.push((p("linear_attn.w_alpha"), vec![d, h]));
                    out.push((p("linear_attn.b_alpha"), vec![h]));
                    out.push((p("linear_attn.log_tau"), vec![h]));
                    out.push((p("linear_attn.w_beta"), vec![d, h]));
                }
            },
        }
        out.push((p("mlp_norm"), vec![d]));
        out.push((p("mlp.w_in"), vec![d, config.mlp_hidden]));
        out.push((p("mlp.w_out"), vec![config.mlp_hidden, d]));
    }
    out.push(("final_norm".to_string(), vec![d]));
    out.push(("unembed".to_string(), vec![d, config.vocab_size]));
    out
}


/// Generates paired `visit`/`visit_mut` traversals over every tensor in
/// canonical order.
macro_rules! traversal {
    ($name:ident, $iter:ident, $($m:tt)?) => {
        pub fn $name<'a, F: FnMut(String, &'a $($m)? Tensor<T>)>(&'a $($m)? self, mut f: F) {
            f("embed".into(), &$($m)? self.embed);
            for (l, layer) in self.layers.$iter().enumerate() {
                let p = |name: &str| format!("layers.{l}.{name}");
                match layer {
                    LayerParams::Single { norm, mixer, mlp_norm, mlp } => {
                        f(p("norm"), norm);
                        match mixer {
                            MixerParams::Softmax(a) => {
                                f(p("attn.wq"), &$($m)? a.wq);
                                f(p("attn.wk"), &$($m)? a.wk);
                                f(p("attn.wv"), &$($m)? a.wv);
                                f(p("attn.wo"), &$($m)? a.wo);
                            }
                            MixerParams::Linear(a) => {
                                f(p("linear_attn.wq"), &$($m)? a.wq);
                                f(p("linear_attn.wk"), &$($m)? a.wk);
                                f(p("linear_attn.wv"), &$($m)? a.wv);
                                f(p("linear_attn.wo"), &$($m)? a.wo);
                                f(p("linear_attn.w_alpha"), &$($m)? a.w_alpha);
                                f(p("linear_attn.b_alpha"), &$($m)? a.b_alpha);
                                f(p("linear_attn.log_tau"), &$($m)? a.log_tau);
                                f(p("linear_attn.w_beta"), &$($m)? a.w_beta);
                            }
                        }
                        f(p("mlp_norm"), mlp_norm);
                        f(p("mlp.w_in"), &$($m)? mlp.w_in);
                        f(p("mlp.w_out"), &$($m)? mlp.w_out);
                    }
                    LayerParams::Parallel { norm, attn, ssm, mlp_norm, mlp } => {
                        f(p("norm"), norm);
                        f(p("attn.wq"), &$($m)? attn.wq);
                        f(p("attn.wk"), &$($m)? attn.wk);
                        f(p("attn.wv"), &$($m)? attn.wv);
                        f(p("attn.wo"), &$($m)? attn.wo);
                        f(p("ssm.w_x"), &$($m)? ssm.w_x);
                        f(p("ssm.w_b"), &$($m)? ssm.w_b);
                        f(p("ssm.w_c"), &$($m)? ssm.w_c);
                        f(p("ssm.w_dt"), &$($m)? ssm.w_dt);
                        f(p("ssm.b_dt"), &$($m)? ssm.b_dt);
                        f(p("ssm.wo"), &$($m)? ssm.wo);
                        f(p("mlp_norm"), mlp_norm);
                        f(p("mlp.w_in"), &$($m)? mlp.w_in);
                        f(p("mlp.w_out"), &$($m)? mlp.w_out);
                    }
                }
            }
            f("final_norm".into(), &$($m)? self.final_norm);
            f("unembed".into(), &$($m)? self.unembed);
        }
    };
}

/// Parameter family used to stratify gradient checks and reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamFamily {
    Embedding,
    Unembedding,
    Norm,
    SoftmaxAttention,
    LinearAttention,
    Ssm,
    Mlp,
}

impl ParamFamily {
    pub fn of_path(path: &str) -> Self {
        if path == "embed" {
            Self::Embedding
        } else if path == "unembed" {
            Self::Unembedding
        } else if path.ends_with("norm") {
            Self::Norm
        } else if path.contains(".linear_attn.") {
            Self::LinearAttention
        } else if path.contains(".attn.") {
            Self::SoftmaxAttention
        } else if path.contains(".ssm.") {
            Self::Ssm
        } else {
            Self::Mlp
        }
    }
}

impl<T: Scalar> Parameters<T> {
    traversal!(visit, iter,);
    traversal!(visit_mut, iter_mut, mut);

    /// Deterministic initialization from `config.init_seed`.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let h = config.n_heads;
        let qk = h * config.key_dim;
        let vw = config.mixer_width();
        let n = config.ssm_state_dim;
        let z = |shape: &[usize]| Tensor::<T>::zeros(shape);
        let ones = |len: usize| Tensor::<T>::filled(&[len], T::one());
        let attn = || AttentionParams {
            wq: z(&[d, qk]),
            wk: z(&[d, qk]),
            wv: z(&[d, vw]),
            wo: z(&[vw, d]),
        };
        let mlp = || MlpParams {
            w_in: z(&[d, config.mlp_hidden]),
            w_out: z(&[config.mlp_hidden, d]),
        };
        let layers = (0..config.n_layers())
            .map(|l| match config.layout.kind {
                LayoutKind::Parallel => LayerParams::Parallel {
                    norm: ones(d),
                    attn: attn(),
                    ssm: SsmParams {
                        w_x: z(&[d, vw]),
                        w_b: z(&[d, n]),
                        w_c: z(&[d, n]),
                        w_dt: z(&[d, h]),
                        b_dt: z(&[h]),
                        wo: z(&[vw, d]),
                    },
                    mlp_norm: ones(d),
                    mlp: mlp(),
                },
                _ => {
                    let mixer = match config.layout.mixer_kind(l) {
                        Some(LayerKind::SoftmaxAttention) => MixerParams::Softmax(attn()),
                        _ => MixerParams::Linear(DeltaParams {
                            wq: z(&[d, qk]),
                            wk: z(&[d, qk]),
                            wv: z(&[d, vw]),
                            wo: z(&[vw, d]),
                            w_alpha: z(&[d, h]),
                            b_alpha: z(&[h]),
                            log_tau: z(&[h]),
                            w_beta: z(&[d, h]),
                        }),
                    };
                    LayerParams::Single {
                        norm: ones(d),
                        mixer,
                        mlp_norm: ones(d),
                        mlp: mlp(),
                    }
                }
            })
            .collect();
        let mut params = Self {
            embed: z(&[config.vocab_size, d]),
            layers,
            final_norm: ones(d),
            unembed: z(&[d, config.vocab_size]),
        };

        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let depth_scale = (2.0 * config.n_layers() as f64).sqrt();
        params.visit_mut(|path, t| {
            let leaf = path.rsplit('.').next().unwrap_or("");
            let heads = t.len();
            match leaf {
                _ if path.ends_with("norm") => {}
                "b_alpha" => {
                    // decay gates start between 0.90 and 0.99
                    for (i, v) in t.data.iter_mut().enumerate() {
                        let a = spread(0.90, 0.99, i, heads);
                        *v = T::lit((a / (1.0 - a)).ln());
                    }
                }
                "b_dt" => {
                    // scan decays start between 0.60 and 0.98
                    for (i, v) in t.data.iter_mut().enumerate() {
                        let a: f64 = spread(0.60, 0.98, i, heads);
                        *v = T::lit((-a.ln()).exp_m1().ln());
                    }
                }
                "log_tau" => {}
                _ => {
                    let fan_in = t.shape[0] as f64;
                    let std = match leaf {
                        "embed" => 1.0,
                        "unembed" => 0.5 / fan_in.sqrt(),
                        "wo" | "w_out" => 1.0 / (fan_in.sqrt() * depth_scale),
                        _ => 1.0 / fan_in.sqrt(),
                    };
                    let normal = Normal::new(0.0, std).expect("positive std");
                    for v in t.data.iter_mut() {
                        *v = T::lit(normal.sample(&mut rng));
                    }
                }
            }
        });
        Ok(params)
    }

    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        out.visit_mut(|_, t| t.fill_zero());
        out
    }

    pub fn cast<U: Scalar>(&self) -> Parameters<U> {
        let cast_attn = |a: &AttentionParams<T>| AttentionParams {
            wq: a.wq.cast(),
            wk: a.wk.cast(),
            wv: a.wv.cast(),
            wo: a.wo.cast(),
        };
        let cast_mlp = |m: &MlpParams<T>| MlpParams {
            w_in: m.w_in.cast(),
            w_out: m.w_out.cast(),
        };
        Parameters {
            embed: self.embed.cast(),
            final_norm: self.final_norm.cast(),
            unembed: self.unembed.cast(),
            layers: self
                .layers
                .iter()
                .map(|layer| match layer {
                    LayerParams::Single { norm, mixer, mlp_norm, mlp } => LayerParams::Single {
                        norm: norm.cast(),
                        mixer: match mixer {
                            MixerParams::Softmax(a) => MixerParams::Softmax(cast_attn(a)),
                            MixerParams::Linear(a) => MixerParams::Linear(DeltaParams {
                                wq: a.wq.cast(),
                                wk: a.wk.cast(),
                                wv: a.wv.cast(),
                                wo: a.wo.cast(),
                                w_alpha: a.w_alpha.cast(),
                                b_alpha: a.b_alpha.cast(),
                                log_tau: a.log_tau.cast(),
                                w_beta: a.w_beta.cast(),
                            }),
                        },
                        mlp_norm: mlp_norm.cast(),
                        mlp: cast_mlp(mlp),
                    },
                    LayerParams::Parallel { norm, attn, ssm, mlp_norm, mlp } => LayerParams::Parallel {
                        norm: norm.cast(),
                        attn: cast_attn(attn),
                        ssm: SsmParams {
                            w_x: ssm.w_x.cast(),
                            w_b: ssm.w_b.cast(),
                            w_c: ssm.w_c.cast(),
                            w_dt: ssm.w_dt.cast(),
                            b_dt: ssm.b_dt.cast(),
                            wo: ssm.wo.cast(),
                        },
                        mlp_norm: mlp_norm.cast(),
                        mlp: cast_mlp(mlp),
                    },
                })
                .collect(),
        }
    }

    /// Paths and shapes in canonical order.
    pub fn manifest(&self) -> Vec<ManifestEntry> {
        let mut out = Vec::new();
        self.visit(|path, t| out.push((path, t.shape.clone())));
        out
    }

    pub fn n_params(&self) -> usize {
        let mut n = 0;
        self.visit(|_, t| n += t.len());
        n
    }

    /// Verifies that every stored tensor is one the layout reads, with the
    /// shape the config implies, and that none is missing.
    pub fn audit_shapes(&self, config: &ModelConfig) -> Result<()> {
        let expected = expected_manifest(config);
        let actual = self.manifest();
        for (path, shape) in &actual {
            match expected.iter().find(|(p, _)| p == path) {
                None => return Err(Error::Format(format!("orphan parameter {path}"))),
                Some((_, want)) if want != shape => {
                    return Err(Error::Format(format!(
                        "parameter {path} has shape {shape:?}, config implies {want:?}"
                    )))
                }
                Some(_) => {}
            }
        }
        for (path, _) in &expected {
            if !actual.iter().any(|(p, _)| p == path) {
                return Err(Error::Format(format!("missing parameter {path}")));
            }
        }
        if actual.len() != expected.len() {
            return Err(Error::Format("duplicate parameter paths".into()));
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        let mut ok = true;
        self.visit(|_, t| ok &= t.all_finite());
        ok
    }

    /// Global L2 norm over every tensor.
    pub fn global_norm(&self) -> T {
        let mut acc = T::zero();
        self.visit(|_, t| acc += t.sum_sq());
        acc.sqrt()
    }

    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        let mut out = Vec::new();
        self.visit(|_, t| out.push(t));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        self.visit_mut(|path, t| out.push((path, t)));
        out
    }

    /// Flattened copy of every value in canonical order.
    pub fn flat(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.n_params());
        self.visit(|_, t| out.extend_from_slice(&t.data));
        out
    }
}

fn spread(lo: f64, hi: f64, i: usize, n: usize) -> f64 {
    if n <= 1 {
        (lo + hi) / 2.0
    } else {
        lo + (hi - lo) * i as f64 / (n - 1) as f64
    }
}
