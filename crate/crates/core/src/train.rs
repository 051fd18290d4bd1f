//! Byte-level language-model training and finite-difference gradient checks.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::loss;
use crate::model::{self, loss_and_grad};
use crate::params::{ParamFamily, Parameters};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub grad_clip_norm: f64,
    /// Recorded for provenance; the optimizer itself draws no randomness.
    pub optimizer_seed: u64,
    pub data_seed: u64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    /// Final learning rate as a fraction of the peak.
    #[serde(default = "default_min_lr_fraction")]
    pub min_lr_fraction: f64,
    /// Write a parameter checkpoint every this many steps (0 disables).
    #[serde(default)]
    pub checkpoint_every: usize,
}

fn default_weight_decay() -> f64 {
    0.01
}

fn default_min_lr_fraction() -> f64 {
    0.1
}

impl TrainConfig {
    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        if self.batch_size == 0 || self.seq_len == 0 {
            return Err(Error::Config("batch_size and seq_len must be positive".into()));
        }
        if self.seq_len > model.max_seq_len {
            return Err(Error::Config(format!(
                "seq_len {} exceeds max_seq_len {}",
                self.seq_len, model.max_seq_len
            )));
        }
        if self.warmup_steps > self.steps && self.steps > 0 {
            return Err(Error::Config("warmup_steps exceeds steps".into()));
        }
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(self.learning_rate) || !positive(self.grad_clip_norm) {
            return Err(Error::Config("learning_rate and grad_clip_norm must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.min_lr_fraction) || self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return Err(Error::Config("min_lr_fraction or weight_decay out of range".into()));
        }
        Ok(())
    }

    /// Learning rate for 0-based `step`: linear warmup, then cosine decay.
    pub fn lr_at(&self, step: usize) -> f64 {
        let peak = self.learning_rate;
        if step < self.warmup_steps {
            return peak * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let decay_steps = self.steps.saturating_sub(self.warmup_steps).max(1);
        let progress = ((step - self.warmup_steps) as f64 / decay_steps as f64).min(1.0);
        let floor = peak * self.min_lr_fraction;
        floor + (peak - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub loss: f64,
    pub learning_rate: f64,
}

/// AdamW with decoupled weight decay. Norm gains and the gate biases are
/// not decayed.
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Parameters<f32>,
    v: Parameters<f32>,
    t: i32,
}

fn decays(path: &str) -> bool {
    !(path.ends_with("norm") || path.ends_with("b_alpha") || path.ends_with("b_dt") || path.ends_with("log_tau"))
}

impl AdamW {
    pub fn new(params: &Parameters<f32>, weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay,
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut Parameters<f32>, grads: &Parameters<f32>, lr: f64) {
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let bc1 = 1.0 - b1.powi(self.t);
        let bc2 = 1.0 - b2.powi(self.t);
        let wd = self.weight_decay;
        let eps = self.eps;
        let tensors = params
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(self.m.tensors_mut())
            .zip(self.v.tensors_mut());
        for ((((path, p), g), (_, m)), (_, v)) in tensors {
            let decay = if decays(&path) { wd } else { 0.0 };
            for (((w, &gi), mi), vi) in p.data.iter_mut().zip(&g.data).zip(&mut m.data).zip(&mut v.data) {
                let gi = gi as f64;
                let mn = b1 * *mi as f64 + (1.0 - b1) * gi;
                let vn = b2 * *vi as f64 + (1.0 - b2) * gi * gi;
                *mi = mn as f32;
                *vi = vn as f32;
                let update = (mn / bc1) / ((vn / bc2).sqrt() + eps);
                let wv = *w as f64;
                *w = (wv - lr * (update + decay * wv)) as f32;
            }
        }
    }
}

/// Start offsets of the `batch_size` windows used at `step`.
pub fn batch_offsets(tc: &TrainConfig, corpus_len: usize, step: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(crate::seeding::derive_seed(tc.data_seed, "batch", step as u64));
    let max_start = corpus_len - tc.seq_len - 1;
    (0..tc.batch_size).map(|_| rng.random_range(0..=max_start)).collect()
}

/// Observer invoked after each optimizer step with the updated parameters.
pub trait TrainObserver {
    fn on_step(&mut self, record: &LossRecord, params: &Parameters<f32>) -> Result<()>;
}

impl TrainObserver for () {
    fn on_step(&mut self, _: &LossRecord, _: &Parameters<f32>) -> Result<()> {
        Ok(())
    }
}

pub fn train(
    params: Parameters<f32>,
    config: &ModelConfig,
    tc: &TrainConfig,
    corpus: &[u8],
) -> Result<(Parameters<f32>, Vec<LossRecord>)> {
    train_observed(params, config, tc, corpus, &mut ())
}

pub fn train_observed(
    mut params: Parameters<f32>,
    config: &ModelConfig,
    tc: &TrainConfig,
    corpus: &[u8],
    observer: &mut dyn TrainObserver,
) -> Result<(Parameters<f32>, Vec<LossRecord>)> {
    config.validate()?;
    tc.validate(config)?;
    params.audit_shapes(config)?;
    if corpus.len() < tc.seq_len + 1 {
        return Err(Error::Input(format!(
            "corpus has {} bytes, need at least seq_len + 1 = {}",
            corpus.len(),
            tc.seq_len + 1
        )));
    }
    if config.vocab_size < 256 && corpus.iter().any(|&b| b as usize >= config.vocab_size) {
        return Err(Error::Input("corpus byte outside model vocabulary".into()));
    }
    let tokens: Vec<u32> = corpus.iter().map(|&b| b as u32).collect();
    let mut opt = AdamW::new(&params, tc.weight_decay);
    let mut grads = params.zeros_like();
    let mut history = Vec::with_capacity(tc.steps);
    let weight = 1.0 / tc.batch_size as f32;
    for step in 0..tc.steps {
        grads.visit_mut(|_, t| t.fill_zero());
        let mut total = 0.0f64;
        for start in batch_offsets(tc, tokens.len(), step) {
            let window = &tokens[start..start + tc.seq_len + 1];
            let l = loss_and_grad(&params, config, &window[..tc.seq_len], &window[1..], &mut grads, weight)
                .map_err(|e| match e {
                    Error::NonFinite { .. } => Error::Diverged { step, loss: f64::NAN },
                    other => other,
                })?;
            total += l as f64;
        }
        let loss = total / tc.batch_size as f64;
        if !loss.is_finite() || !grads.all_finite() {
            return Err(Error::Diverged { step, loss });
        }
        let norm = grads.global_norm() as f64;
        if norm > tc.grad_clip_norm {
            let scale = (tc.grad_clip_norm / norm) as f32;
            grads.visit_mut(|_, t| t.data.iter_mut().for_each(|g| *g *= scale));
        }
        let lr = tc.lr_at(step);
        opt.step(&mut params, &grads, lr);
        let record = LossRecord {
            step,
            loss,
            learning_rate: lr,
        };
        history.push(record);
        observer.on_step(&record, &params)?;
    }
    params.audit_shapes(config)?;
    Ok((params, history))
}

pub fn write_loss_history<W: std::io::Write>(out: W, history: &[LossRecord]) -> Result<()> {
    use std::io::Write;
    let mut w = std::io::BufWriter::new(out);
    writeln!(w, "step,loss,learning_rate")?;
    for r in history {
        writeln!(w, "{},{:.6},{:.6e}", r.step, r.loss, r.learning_rate)?;
    }
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// gradient checking

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleSpec {
    /// Coordinates sampled from every tensor.
    pub per_tensor: usize,
    pub seed: u64,
    pub step: f64,
    /// Gradients smaller than this are compared in absolute terms.
    pub abs_floor: f64,
}

impl Default for SampleSpec {
    fn default() -> Self {
        Self {
            per_tensor: 3,
            seed: 0,
            step: 1e-4,
            abs_floor: 1e-6,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_path: String,
    pub per_family: BTreeMap<ParamFamily, f64>,
    pub n_coords: usize,
}

fn sequence_loss(params: &Parameters<f64>, config: &ModelConfig, tokens: &[u32]) -> Result<f64> {
    let n = tokens.len() - 1;
    let (logits, _) = model::forward(params, config, &tokens[..n], false, None)?;
    loss::cross_entropy(&logits, &tokens[1..])
}

/// Compares analytic gradients against central differences on sampled
/// coordinates of every tensor, evaluated in f64.
pub fn grad_check(
    params: &Parameters<f64>,
    config: &ModelConfig,
    tokens: &[u32],
    spec: SampleSpec,
) -> Result<GradCheckReport> {
    if tokens.len() < 2 {
        return Err(Error::Input("grad check needs at least two tokens".into()));
    }
    let n = tokens.len() - 1;
    let mut analytic = params.zeros_like();
    loss_and_grad(params, config, &tokens[..n], &tokens[1..], &mut analytic, 1.0)?;

    let mut coords: Vec<(usize, String, usize)> = Vec::new();
    let mut embed_rows: Vec<usize> = tokens[..n].iter().map(|&t| t as usize).collect();
    embed_rows.sort_unstable();
    embed_rows.dedup();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut tensor_index = 0;
    params.visit(|path, t| {
        for _ in 0..spec.per_tensor {
            let idx = if path == "embed" {
                // rows of tokens never seen have zero gradient; sample used ones
                let cols = t.cols();
                embed_rows[rng.random_range(0..embed_rows.len())] * cols + rng.random_range(0..cols)
            } else {
                rng.random_range(0..t.len())
            };
            coords.push((tensor_index, path.clone(), idx));
        }
        tensor_index += 1;
    });

    let mut flat_grad = Vec::new();
    analytic.visit(|_, t| flat_grad.push(t.data.clone()));

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_path: String::new(),
        per_family: BTreeMap::new(),
        n_coords: coords.len(),
    };
    let mut probe = params.clone();
    for (ti, path, idx) in coords {
        let set = |p: &mut Parameters<f64>, delta: f64| {
            let mut k = 0;
            p.visit_mut(|_, t| {
                if k == ti {
                    t.data[idx] += delta;
                }
                k += 1;
            });
        };
        set(&mut probe, spec.step);
        let up = sequence_loss(&probe, config, tokens)?;
        set(&mut probe, -2.0 * spec.step);
        let down = sequence_loss(&probe, config, tokens)?;
        set(&mut probe, spec.step);
        let numeric = (up - down) / (2.0 * spec.step);
        let a = flat_grad[ti][idx];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(spec.abs_floor);
        let fam = report.per_family.entry(ParamFamily::of_path(&path)).or_insert(0.0);
        *fam = fam.max(err);
        if err > report.max_rel_error || report.worst_path.is_empty() {
            report.max_rel_error = report.max_rel_error.max(err);
            report.worst_path = format!("{path}[{idx}]");
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::HybridLayout;

    fn tiny_tc(steps: usize) -> TrainConfig {
        TrainConfig {
            steps,
            batch_size: 2,
            seq_len: 16,
            learning_rate: 1e-2,
            warmup_steps: steps.min(5),
            grad_clip_norm: 1.0,
            optimizer_seed: 0,
            data_seed: 1,
            weight_decay: 0.01,
            min_lr_fraction: 0.1,
            checkpoint_every: 0,
        }
    }

    #[test]
    fn schedule_warms_up_then_decays() {
        let tc = TrainConfig {
            steps: 100,
            warmup_steps: 10,
            ..tiny_tc(100)
        };
        assert!((tc.lr_at(0) - 1e-3).abs() < 1e-12);
        assert!((tc.lr_at(9) - 1e-2).abs() < 1e-12);
        assert!((tc.lr_at(10) - 1e-2).abs() < 1e-12);
        assert!(tc.lr_at(50) < tc.lr_at(20));
        assert!((tc.lr_at(100) - 1e-3).abs() < 1e-12);
    }

    #[test]
    fn validation_rejects_long_windows() {
        let cfg = ModelConfig::micro(HybridLayout::parallel(1));
        let tc = TrainConfig {
            seq_len: cfg.max_seq_len + 1,
            ..tiny_tc(1)
        };
        assert!(tc.validate(&cfg).is_err());
    }

    #[test]
    fn zero_steps_leave_parameters_unchanged() {
        let cfg = ModelConfig::micro(HybridLayout::parallel(1));
        let p = Parameters::<f32>::init(&cfg).unwrap();
        let corpus: Vec<u8> = (0..64).map(|i| (i % 11) as u8).collect();
        let (q, hist) = train(p.clone(), &cfg, &tiny_tc(0), &corpus).unwrap();
        assert!(hist.is_empty());
        assert_eq!(p.flat(), q.flat());
    }

    #[test]
    fn optimizer_skips_decay_on_gains() {
        assert!(!decays("layers.0.norm"));
        assert!(!decays("final_norm"));
        assert!(!decays("layers.1.ssm.b_dt"));
        assert!(decays("layers.1.ssm.w_dt"));
        assert!(decays("embed"));
    }

    #[test]
    fn short_corpus_is_rejected() {
        let cfg = ModelConfig::micro(HybridLayout::parallel(1));
        let p = Parameters::<f32>::init(&cfg).unwrap();
        assert!(matches!(train(p, &cfg, &tiny_tc(1), &[1u8; 16]), Err(Error::Input(_))));
    }

    #[test]
    fn loss_history_csv_has_header() {
        let mut buf = Vec::new();
        write_loss_history(
            &mut buf,
            &[LossRecord {
                step: 0,
                loss: 1.5,
                learning_rate: 1e-3,
            }],
        )
        .unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert!(s.starts_with("step,loss,learning_rate\n0,1.500000,"));
    }
}
