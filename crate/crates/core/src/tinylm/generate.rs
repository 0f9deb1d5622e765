use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{forward, Params};
use crate::error::Result;
use crate::scenegen::Vocab;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    /// Upper bound on generated tokens after BOS (also capped by `max_seq`).
    pub max_new_tokens: usize,
    /// At decoding step `t` (1-based) the EOS logit is shifted by `length_penalty * t`.
    /// Positive values favour stopping; 0 disables.
    pub length_penalty: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            max_new_tokens: 64,
            length_penalty: 0.0,
        }
    }
}

/// Greedy decoding from BOS. The result starts with BOS and ends with EOS
/// unless the length cap was reached first.
pub fn generate(params: &Params, features: &Array2<f64>, dcfg: &DecodeConfig) -> Result<Vec<usize>> {
    let cap = params.config.max_seq.min(dcfg.max_new_tokens.saturating_add(1));
    let mut tokens = vec![Vocab::BOS];
    let mut step = 0usize;
    while tokens.len() < cap {
        step += 1;
        let trace = forward(params, features, &tokens)?;
        let mut last = trace.logits.row(trace.n_text - 1).to_owned();
        if dcfg.length_penalty != 0.0 {
            last[Vocab::EOS] += dcfg.length_penalty * step as f64;
        }
        let next = argmax(last.iter().copied());
        tokens.push(next);
        if next == Vocab::EOS {
            break;
        }
    }
    Ok(tokens)
}

/// First index of the maximum; NaNs never win.
pub(crate) fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}
