//! Paired bootstrap intervals, random-control summaries and redundancy
//! ratios.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_RESAMPLES: usize = 1000;
pub const DEFAULT_LEVEL: f64 = 0.95;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapCI {
    pub point_drop: f64,
    pub lo: f64,
    pub hi: f64,
    pub level: f64,
    pub n_resamples: usize,
    pub seed: u64,
    pub significant: bool,
}

impl BootstrapCI {
    fn from_distribution(point_drop: f64, mut dist: Vec<f64>, level: f64, seed: u64) -> Self {
        dist.sort_by(f64::total_cmp);
        let tail = (1.0 - level) / 2.0;
        let lo = percentile(&dist, tail);
        let hi = percentile(&dist, 1.0 - tail);
        Self {
            point_drop,
            lo,
            hi,
            level,
            n_resamples: dist.len(),
            seed,
            significant: lo > 0.0 || hi < 0.0,
        }
    }
}

/// Percentile of sorted data with linear interpolation between order
/// statistics at rank `q (n − 1)`.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "percentile of empty data");
    let rank = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let below = rank.floor() as usize;
    let above = rank.ceil() as usize;
    let frac = rank - below as f64;
    sorted[below] + (sorted[above] - sorted[below]) * frac
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn as_scores(v: &[bool]) -> Vec<f64> {
    v.iter().map(|&b| b as u8 as f64).collect()
}

fn check_paired(baseline: &[f64], ablated: &[f64]) -> Result<()> {
    if baseline.len() != ablated.len() {
        return Err(Error::Input(format!(
            "paired lists differ in length ({} vs {})",
            baseline.len(),
            ablated.len()
        )));
    }
    if baseline.is_empty() {
        return Err(Error::Input("bootstrap needs at least one example".into()));
    }
    Ok(())
}

/// Paired percentile bootstrap of `mean(ablated) − mean(baseline)`.
pub fn bootstrap_drop_ci(baseline: &[bool], ablated: &[bool], n_resamples: usize, seed: u64) -> Result<BootstrapCI> {
    bootstrap_drop_ci_scores(&as_scores(baseline), &as_scores(ablated), n_resamples, seed)
}

pub fn bootstrap_drop_ci_scores(baseline: &[f64], ablated: &[f64], n_resamples: usize, seed: u64) -> Result<BootstrapCI> {
    check_paired(baseline, ablated)?;
    if n_resamples == 0 {
        return Err(Error::Input("n_resamples must be positive".into()));
    }
    let diffs: Vec<f64> = ablated.iter().zip(baseline).map(|(a, b)| a - b).collect();
    let n = diffs.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = (0..n_resamples)
        .map(|_| (0..n).map(|_| diffs[rng.random_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    Ok(BootstrapCI::from_distribution(mean(&diffs), dist, DEFAULT_LEVEL, seed))
}

/// Bootstrap of the mean drop across tasks: each resample draws examples
/// within every task independently, then averages the per-task drops.
pub fn bootstrap_mean_drop_ci(tasks: &[(&[bool], &[bool])], n_resamples: usize, seed: u64) -> Result<BootstrapCI> {
    if tasks.is_empty() {
        return Err(Error::Input("no tasks to aggregate".into()));
    }
    let diffs: Vec<Vec<f64>> = tasks
        .iter()
        .map(|(b, a)| {
            let (b, a) = (as_scores(b), as_scores(a));
            check_paired(&b, &a)?;
            Ok(a.iter().zip(&b).map(|(x, y)| x - y).collect())
        })
        .collect::<Result<_>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = (0..n_resamples)
        .map(|_| {
            let total: f64 = diffs
                .iter()
                .map(|d| (0..d.len()).map(|_| d[rng.random_range(0..d.len())]).sum::<f64>() / d.len() as f64)
                .sum();
            total / diffs.len() as f64
        })
        .collect();
    let point = diffs.iter().map(|d| mean(d)).sum::<f64>() / diffs.len() as f64;
    Ok(BootstrapCI::from_distribution(point, dist, DEFAULT_LEVEL, seed))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomControlSummary {
    pub matched_condition: String,
    pub mean: f64,
    /// Sample standard deviation; 0 for a single trial.
    pub std: f64,
    pub trials: usize,
    pub per_trial: Vec<f64>,
}

pub fn summarize_random_controls(matched_condition: &str, per_trial: &[f64]) -> Result<RandomControlSummary> {
    if per_trial.is_empty() {
        return Err(Error::Input("no random-control trials".into()));
    }
    let m = mean(per_trial);
    let std = if per_trial.len() < 2 {
        0.0
    } else {
        (per_trial.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (per_trial.len() - 1) as f64).sqrt()
    };
    Ok(RandomControlSummary {
        matched_condition: matched_condition.to_string(),
        mean: m,
        std,
        trials: per_trial.len(),
        per_trial: per_trial.to_vec(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RedundancyRatio {
    pub targeted_value: f64,
    pub random_mean: f64,
    pub ratio: f64,
}

pub fn redundancy_ratio(targeted_value: f64, random_mean: f64) -> Result<RedundancyRatio> {
    if !(targeted_value > 0.0 && random_mean > 0.0) {
        return Err(Error::Input("redundancy ratio needs positive inputs".into()));
    }
    Ok(RedundancyRatio {
        targeted_value,
        random_mean,
        ratio: random_mean / targeted_value,
    })
}
