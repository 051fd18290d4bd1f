use std::path::Path;

use crate::error::{Error, Result};

/// Byte-level corpus with a contiguous 90/10 train/held-out split.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub train: Vec<u8>,
    pub heldout: Vec<u8>,
}

impl Corpus {
    pub fn load(path: &Path) -> Result<Self> {
        Self::split(std::fs::read(path)?)
    }

    pub fn split(bytes: Vec<u8>) -> Result<Self> {
        if bytes.len() < 20 {
            return Err(Error::Input(format!("corpus of {} bytes is too small to split", bytes.len())));
        }
        let cut = bytes.len() - bytes.len() / 10;
        let heldout = bytes[cut..].to_vec();
        let mut train = bytes;
        train.truncate(cut);
        Ok(Self { train, heldout })
    }
}

pub fn tokens(bytes: &[u8]) -> Vec<u32> {
    bytes.iter().map(|&b| b as u32).collect()
}

/// Perplexity of `eval` under the add-one smoothed byte unigram fit on
/// `fit`. Positions match next-token evaluation: the first byte is not
/// scored.
pub fn unigram_perplexity(fit: &[u8], eval: &[u8]) -> Result<f64> {
    if eval.len() < 2 {
        return Err(Error::Input("need at least two evaluation bytes".into()));
    }
    let mut counts = [1.0f64; 256];
    for &b in fit {
        counts[b as usize] += 1.0;
    }
    let total: f64 = counts.iter().sum();
    let nll: f64 = eval[1..].iter().map(|&b| -(counts[b as usize] / total).ln()).sum();
    Ok((nll / (eval.len() - 1) as f64).exp())
}
