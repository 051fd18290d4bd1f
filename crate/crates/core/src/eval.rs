//! Held-out perplexity and synthetic probe tasks under ablation masks.

use std::collections::BTreeMap;
use std::ops::Range;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ablation::{AblationCondition, Mask};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::loss::per_token_nll;
use crate::model::forward_masked;
use crate::params::Parameters;
use crate::seeding::derive_seed;
use crate::tensor::log_softmax;

pub const EVAL_WINDOW: usize = 256;

/// Input ranges of the non-overlapping evaluation windows over `n` tokens.
/// Window `r` predicts tokens `r.start + 1 ..= r.end`, so every token after
/// the first is scored exactly once.
pub fn windows(n: usize, window: usize) -> Vec<Range<usize>> {
    assert!(window > 0, "window must be positive");
    let mut out = Vec::new();
    let mut start = 0;
    while start + 1 < n {
        let end = (start + window).min(n - 1);
        out.push(start..end);
        start = end;
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Perplexity {
    pub loss: f64,
    pub perplexity: f64,
    pub n_tokens: usize,
}

impl Perplexity {
    pub fn from_loss(loss: f64, n_tokens: usize) -> Self {
        Self {
            loss,
            perplexity: loss.exp(),
            n_tokens,
        }
    }
}

pub fn perplexity(
    params: &Parameters<f32>,
    config: &ModelConfig,
    condition: Option<&AblationCondition>,
    tokens: &[u32],
) -> Result<Perplexity> {
    let mask = match condition {
        Some(c) => c.mask(&config.layout)?,
        None => Mask::clear(config.n_layers()),
    };
    perplexity_masked(params, config, &mask, tokens)
}

pub fn perplexity_masked(
    params: &Parameters<f32>,
    config: &ModelConfig,
    mask: &Mask,
    tokens: &[u32],
) -> Result<Perplexity> {
    if tokens.len() < 2 {
        return Err(Error::Input("perplexity needs at least two tokens".into()));
    }
    let window = EVAL_WINDOW.min(config.max_seq_len);
    let mut total = 0.0f64;
    let mut count = 0usize;
    for r in windows(tokens.len(), window) {
        let (logits, _) = forward_masked(params, config, &tokens[r.clone()], false, mask)?;
        let nll = per_token_nll(&logits, &tokens[r.start + 1..r.end + 1])?;
        total += nll.iter().map(|&v| v as f64).sum::<f64>();
        count += nll.len();
    }
    Ok(Perplexity::from_loss(total / count as f64, count))
}

pub fn ppl_ratio(ablated: f64, baseline: f64) -> Result<f64> {
    if baseline.is_nan() || baseline <= 0.0 {
        return Err(Error::Input(format!("baseline perplexity {baseline} is not positive")));
    }
    Ok(ablated / baseline)
}

/// Signed per-task change `ablated − baseline`.
pub fn score_drop(
    baseline: &BTreeMap<String, f64>,
    ablated: &BTreeMap<String, f64>,
) -> Result<BTreeMap<String, f64>> {
    if !baseline.keys().eq(ablated.keys()) {
        return Err(Error::Input("baseline and ablated task sets differ".into()));
    }
    Ok(baseline
        .iter()
        .map(|(task, b)| (task.clone(), ablated[task] - b))
        .collect())
}

// ---------------------------------------------------------------------------
// probe tasks

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TaskName {
    AssociativeRecall,
    Copy,
    MajorityLabel,
}

impl TaskName {
    pub fn label(self) -> &'static str {
        match self {
            Self::AssociativeRecall => "associative_recall",
            Self::Copy => "copy",
            Self::MajorityLabel => "majority_label",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeTask {
    pub name: TaskName,
    pub n_examples: usize,
    pub prompt_len: usize,
    pub rng_seed: u64,
}

const KEYS: &[u8] = b"abcdefghijklmnop";
const VALUES: &[u8] = b"0123456789ABCDEF";
const LABELS: [&[u8]; 2] = [b"no", b"yes"];

/// A prompt and its candidate continuations; `answer` indexes the correct one.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub prompt: Vec<u32>,
    pub candidates: Vec<Vec<u32>>,
    pub answer: usize,
}

fn singles(alphabet: &[u8]) -> Vec<Vec<u32>> {
    alphabet.iter().map(|&b| vec![b as u32]).collect()
}

impl ProbeTask {
    pub fn new(name: TaskName, n_examples: usize, prompt_len: usize, rng_seed: u64) -> Self {
        Self {
            name,
            n_examples,
            prompt_len,
            rng_seed,
        }
    }

    pub fn chance(&self) -> f64 {
        match self.name {
            TaskName::AssociativeRecall => 1.0 / VALUES.len() as f64,
            TaskName::Copy => 1.0 / KEYS.len() as f64,
            TaskName::MajorityLabel => 1.0 / LABELS.len() as f64,
        }
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        if config.vocab_size < 128 {
            return Err(Error::Input("probe tasks use ASCII tokens and need vocab_size >= 128".into()));
        }
        if self.n_examples == 0 || self.prompt_len < 8 {
            return Err(Error::Input("probe tasks need n_examples >= 1 and prompt_len >= 8".into()));
        }
        if self.prompt_len + 3 > config.max_seq_len {
            return Err(Error::Input(format!(
                "prompt_len {} does not fit max_seq_len {}",
                self.prompt_len, config.max_seq_len
            )));
        }
        Ok(())
    }

    /// Example `index`, a pure function of the task name, seed and index.
    pub fn example(&self, index: usize) -> Example {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.rng_seed, self.name.label(), index as u64));
        let tok = |b: u8| b as u32;
        match self.name {
            TaskName::AssociativeRecall => {
                let pairs = ((self.prompt_len - 1) / 3).clamp(1, KEYS.len());
                let mut keys = KEYS.to_vec();
                keys.shuffle(&mut rng);
                keys.truncate(pairs);
                let values: Vec<usize> = (0..pairs).map(|_| rng.random_range(0..VALUES.len())).collect();
                let mut prompt = Vec::with_capacity(3 * pairs + 1);
                for (&k, &v) in keys.iter().zip(&values) {
                    prompt.extend([tok(k), tok(VALUES[v]), tok(b' ')]);
                }
                let q = rng.random_range(0..pairs);
                prompt.push(tok(keys[q]));
                Example {
                    prompt,
                    candidates: singles(VALUES),
                    answer: values[q],
                }
            }
            TaskName::Copy => {
                let span = ((self.prompt_len - 1) / 2).max(1);
                let symbols: Vec<usize> = (0..span).map(|_| rng.random_range(0..KEYS.len())).collect();
                let j = rng.random_range(0..span);
                let mut prompt: Vec<u32> = symbols.iter().map(|&s| tok(KEYS[s])).collect();
                prompt.push(tok(b'|'));
                prompt.extend(symbols[..j].iter().map(|&s| tok(KEYS[s])));
                Example {
                    prompt,
                    candidates: singles(KEYS),
                    answer: symbols[j],
                }
            }
            TaskName::MajorityLabel => {
                let mut n = ((self.prompt_len - 2) / 7).max(1);
                if n.is_multiple_of(2) {
                    n -= 1;
                }
                let majority = rng.random_range(0..LABELS.len());
                let n_major = rng.random_range(n / 2 + 1..=n);
                let mut labels: Vec<usize> = (0..n).map(|i| if i < n_major { majority } else { 1 - majority }).collect();
                labels.shuffle(&mut rng);
                let mut prompt = Vec::new();
                for &l in &labels {
                    prompt.push(tok(KEYS[rng.random_range(0..KEYS.len())]));
                    prompt.push(tok(KEYS[rng.random_range(0..KEYS.len())]));
                    prompt.push(tok(b':'));
                    prompt.extend(LABELS[l].iter().map(|&b| tok(b)));
                    prompt.push(tok(b';'));
                }
                prompt.extend([tok(b'?'), tok(b':')]);
                Example {
                    prompt,
                    candidates: LABELS.iter().map(|l| l.iter().map(|&b| tok(b)).collect()).collect(),
                    answer: majority,
                }
            }
        }
    }
}

/// Index of the highest-scoring candidate; ties go to the lowest index.
fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Length-normalized log-likelihood of each candidate continuation.
pub fn score_candidates(
    params: &Parameters<f32>,
    config: &ModelConfig,
    mask: &Mask,
    example: &Example,
) -> Result<Vec<f64>> {
    let p = example.prompt.len();
    if example.candidates.iter().all(|c| c.len() == 1) {
        let (logits, _) = forward_masked(params, config, &example.prompt, false, mask)?;
        let lp = log_softmax(logits.row(p - 1));
        return Ok(example.candidates.iter().map(|c| lp[c[0] as usize] as f64).collect());
    }
    example
        .candidates
        .iter()
        .map(|cont| {
            let mut seq = example.prompt.clone();
            seq.extend_from_slice(&cont[..cont.len() - 1]);
            let (logits, _) = forward_masked(params, config, &seq, false, mask)?;
            let total: f64 = cont
                .iter()
                .enumerate()
                .map(|(i, &t)| log_softmax(logits.row(p - 1 + i))[t as usize] as f64)
                .sum();
            Ok(total / cont.len() as f64)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskOutcome {
    pub accuracy: f64,
    /// Per-example correctness in example order.
    pub correct: Vec<bool>,
}

pub fn run_task(params: &Parameters<f32>, config: &ModelConfig, mask: &Mask, task: &ProbeTask) -> Result<TaskOutcome> {
    task.validate(config)?;
    let correct = (0..task.n_examples)
        .map(|i| {
            let ex = task.example(i);
            Ok(argmax(&score_candidates(params, config, mask, &ex)?) == ex.answer)
        })
        .collect::<Result<Vec<bool>>>()?;
    let accuracy = correct.iter().filter(|&&c| c).count() as f64 / correct.len() as f64;
    Ok(TaskOutcome { accuracy, correct })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub condition_name: String,
    pub task_scores: BTreeMap<String, f64>,
    pub loss: Option<f64>,
    pub perplexity: Option<f64>,
    pub delta_scores: BTreeMap<String, f64>,
    pub ppl_ratio: Option<f64>,
    pub n_examples: BTreeMap<String, usize>,
}

/// Everything measured for one condition, including the raw per-example
/// correctness used by the bootstrap.
#[derive(Debug, Clone)]
pub struct ConditionEval {
    pub result: EvalResult,
    pub per_example: BTreeMap<String, Vec<bool>>,
    pub n_eval_tokens: usize,
}

pub fn evaluate(
    params: &Parameters<f32>,
    config: &ModelConfig,
    condition: &AblationCondition,
    heldout: Option<&[u32]>,
    tasks: &[ProbeTask],
    baseline: Option<&EvalResult>,
) -> Result<ConditionEval> {
    let mask = condition.mask(&config.layout)?;
    let ppl = heldout.map(|t| perplexity_masked(params, config, &mask, t)).transpose()?;
    let mut task_scores = BTreeMap::new();
    let mut n_examples = BTreeMap::new();
    let mut per_example = BTreeMap::new();
    for task in tasks {
        let out = run_task(params, config, &mask, task)?;
        let key = task.name.label().to_string();
        task_scores.insert(key.clone(), out.accuracy);
        n_examples.insert(key.clone(), out.correct.len());
        per_example.insert(key, out.correct);
    }
    let (delta_scores, ppl_ratio) = match baseline {
        Some(b) => (
            score_drop(&b.task_scores, &task_scores)?,
            match (ppl, b.perplexity) {
                (Some(p), Some(bp)) => Some(ppl_ratio(p.perplexity, bp)?),
                _ => None,
            },
        ),
        None => (
            task_scores.keys().map(|k| (k.clone(), 0.0)).collect(),
            ppl.map(|_| 1.0),
        ),
    };
    Ok(ConditionEval {
        result: EvalResult {
            condition_name: condition.name.clone(),
            task_scores,
            loss: ppl.map(|p| p.loss),
            perplexity: ppl.map(|p| p.perplexity),
            delta_scores,
            ppl_ratio,
            n_examples,
        },
        per_example,
        n_eval_tokens: ppl.map_or(0, |p| p.n_tokens),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn windows_cover_every_target_once() {
        for n in [2usize, 3, 10, 256, 257, 258, 1000] {
            for w in [1usize, 7, 256] {
                let mut hits = vec![0; n];
                for r in windows(n, w) {
                    assert!(r.len() <= w && !r.is_empty());
                    hits[r.start + 1..=r.end].iter_mut().for_each(|h| *h += 1);
                }
                assert_eq!(hits[0], 0);
                assert!(hits[1..].iter().all(|&h| h == 1), "n={n} w={w}");
            }
        }
    }

    #[test]
    fn perplexity_is_exp_of_loss() {
        let p = Perplexity::from_loss(2.03, 1);
        assert_eq!(p.perplexity, 2.03f64.exp());
        assert_eq!(format!("{:.1}", p.perplexity), "7.6");
        let p = Perplexity::from_loss(12.50, 1);
        assert!((p.perplexity - 268_337.0).abs() < 1.0);
    }

    #[test]
    fn ratio_cases() {
        assert!((ppl_ratio(625.0, 7.6).unwrap() - 82.2).abs() < 0.1);
        assert!((ppl_ratio(268_337.0, 7.6).unwrap() - 35_307.5).abs() < 1.0);
        assert_eq!(ppl_ratio(3.3, 3.3).unwrap(), 1.0);
        assert!(ppl_ratio(1.0, 0.0).is_err());
    }

    #[test]
    fn score_drop_cases() {
        let m = |v: f64| BTreeMap::from([("t".to_string(), v)]);
        assert!((score_drop(&m(0.489), &m(0.250)).unwrap()["t"] + 0.239).abs() < 1e-12);
        assert!((score_drop(&m(0.400), &m(0.030)).unwrap()["t"] + 0.370).abs() < 1e-12);
        assert_eq!(score_drop(&m(0.5), &m(0.5)).unwrap()["t"], 0.0);
        let other = BTreeMap::from([("u".to_string(), 0.1)]);
        assert!(score_drop(&m(0.5), &other).is_err());
    }

    #[test]
    fn examples_are_pure_functions_of_seed_and_index() {
        for name in [TaskName::AssociativeRecall, TaskName::Copy, TaskName::MajorityLabel] {
            let t = ProbeTask::new(name, 10, 48, 3);
            assert_eq!(t.example(4), t.example(4));
            assert_ne!(t.example(4), t.example(5));
            let ex = t.example(0);
            assert!(ex.answer < ex.candidates.len());
            assert!(ex.prompt.len() <= t.prompt_len + 2);
        }
    }

    #[test]
    fn recall_answer_follows_the_queried_key() {
        let t = ProbeTask::new(TaskName::AssociativeRecall, 1, 31, 9);
        for i in 0..20 {
            let ex = t.example(i);
            let key = *ex.prompt.last().unwrap();
            let pos = ex.prompt.iter().position(|&k| k == key).unwrap();
            assert_eq!(ex.candidates[ex.answer][0], ex.prompt[pos + 1]);
        }
    }

    #[test]
    fn majority_label_has_a_strict_majority() {
        let t = ProbeTask::new(TaskName::MajorityLabel, 1, 64, 1);
        for i in 0..20 {
            let ex = t.example(i);
            let text = String::from_utf8(ex.prompt.iter().map(|&b| b as u8).collect()).unwrap();
            let yes = text.matches(":yes;").count();
            let no = text.matches(":no;").count();
            assert_eq!((yes > no) as usize, ex.answer);
            assert_ne!(yes, no);
        }
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[1.0, 1.0, 0.5]), 0);
        assert_eq!(argmax(&[0.0, 2.0, 2.0]), 1);
    }
}
