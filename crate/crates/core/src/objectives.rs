//! Training objectives over next-token logits.
//!
//! * `mle`: mean over positions of `-log softmax(z)[y]`.
//! * `selective`: identical at positions labelled EOS; elsewhere the EOS logit
//!   is removed from the partition function, so the label is scored against
//!   the other tokens only and the EOS logit gets no gradient there.
//! * `combined`: per-example alternation between the two, keyed on the
//!   example's ordinal in the dataset.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scenegen::Vocab;
use crate::tinylm::{log_sum_exp, ForwardTrace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveKind {
    Mle,
    Selective,
    Combined,
}

impl std::fmt::Display for ObjectiveKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ObjectiveKind::Mle => "mle",
            ObjectiveKind::Selective => "selective",
            ObjectiveKind::Combined => "combined",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObjectiveSpec {
    pub kind: ObjectiveKind,
    /// Selective-to-MLE example ratio for `combined` (1.0 is 1:1).
    pub combine_ratio: f64,
}

impl Default for ObjectiveSpec {
    fn default() -> Self {
        ObjectiveSpec {
            kind: ObjectiveKind::Mle,
            combine_ratio: 1.0,
        }
    }
}

impl ObjectiveSpec {
    pub fn new(kind: ObjectiveKind) -> Self {
        ObjectiveSpec {
            kind,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.combine_ratio.is_finite() && self.combine_ratio > 0.0) {
            return Err(Error::Config("objective: combine_ratio must be > 0".into()));
        }
        Ok(())
    }

    /// Concrete objective for the example at `ordinal`.
    pub fn resolve(&self, ordinal: usize) -> ObjectiveHandle {
        match self.kind {
            ObjectiveKind::Mle => ObjectiveHandle::Mle,
            ObjectiveKind::Selective => ObjectiveHandle::Selective { eos: Vocab::EOS },
            ObjectiveKind::Combined if combined_uses_selective(ordinal, self.combine_ratio) => {
                ObjectiveHandle::Selective { eos: Vocab::EOS }
            }
            ObjectiveKind::Combined => ObjectiveHandle::Mle,
        }
    }
}

/// Deterministic alternation: example `k` is selective iff `floor((k+1)p) > floor(kp)`
/// with `p = ratio / (1 + ratio)`, so any prefix of `n` examples holds
/// `floor(n p)` selective ones.
pub fn combined_uses_selective(ordinal: usize, ratio: f64) -> bool {
    let p = ratio / (1.0 + ratio);
    let k = ordinal as f64;
    ((k + 1.0) * p).floor() > (k * p).floor()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObjectiveHandle {
    Mle,
    Selective { eos: usize },
}

/// Loss, per-position terms, and `dloss/dlogits` for one sequence.
#[derive(Debug, Clone)]
pub struct LossOutput {
    pub loss: f64,
    pub terms: Vec<f64>,
    pub dlogits: Array2<f64>,
}

impl ObjectiveHandle {
    pub fn evaluate(self, logits: &Array2<f64>, labels: &[usize]) -> Result<LossOutput> {
        match self {
            ObjectiveHandle::Mle => masked_cross_entropy(logits, labels, None),
            ObjectiveHandle::Selective { eos } => masked_cross_entropy(logits, labels, Some(eos)),
        }
    }
}

/// Cross-entropy where, if `excluded` is set, that token is dropped from the
/// partition function at every position whose label is not that token.
fn masked_cross_entropy(logits: &Array2<f64>, labels: &[usize], excluded: Option<usize>) -> Result<LossOutput> {
    let (n, v) = logits.dim();
    if labels.len() != n {
        return Err(Error::Alignment {
            left: n,
            right: labels.len(),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= v) {
        return Err(Error::Config(format!("label {bad} outside vocabulary of {v}")));
    }
    let mut terms = Vec::with_capacity(n);
    let mut dlogits = Array2::zeros((n, v));
    let inv_n = 1.0 / n as f64;
    for (i, &y) in labels.iter().enumerate() {
        let row = logits.row(i);
        let drop = excluded.filter(|&e| e != y);
        let kept = || row.iter().enumerate().filter(move |(j, _)| Some(*j) != drop).map(|(_, &z)| z);
        let lse = log_sum_exp(kept());
        terms.push(lse - row[y]);
        let mut d = dlogits.row_mut(i);
        for (j, (&z, g)) in row.iter().zip(d.iter_mut()).enumerate() {
            if Some(j) != drop {
                *g = (z - lse).exp() * inv_n;
            }
        }
        d[y] -= inv_n;
    }
    let loss = terms.iter().sum::<f64>() * inv_n;
    Ok(LossOutput { loss, terms, dlogits })
}

pub fn mle_loss(trace: &ForwardTrace, labels: &[usize]) -> Result<f64> {
    Ok(ObjectiveHandle::Mle.evaluate(&trace.logits, labels)?.loss)
}

pub fn selective_loss(trace: &ForwardTrace, labels: &[usize], eos: usize) -> Result<f64> {
    Ok(ObjectiveHandle::Selective { eos }.evaluate(&trace.logits, labels)?.loss)
}

/// Per-position selective terms (equal to the MLE terms where the label is EOS).
pub fn selective_terms(trace: &ForwardTrace, labels: &[usize], eos: usize) -> Result<Vec<f64>> {
    Ok(ObjectiveHandle::Selective { eos }.evaluate(&trace.logits, labels)?.terms)
}

pub fn combined_loss(trace: &ForwardTrace, labels: &[usize], eos: usize, ratio: f64, ordinal: usize) -> Result<f64> {
    let spec = ObjectiveSpec {
        kind: ObjectiveKind::Combined,
        combine_ratio: ratio,
    };
    spec.validate()?;
    let handle = match spec.resolve(ordinal) {
        ObjectiveHandle::Selective { .. } => ObjectiveHandle::Selective { eos },
        h => h,
    };
    Ok(handle.evaluate(&trace.logits, labels)?.loss)
}

/// Softmax over every token except `excluded`; the excluded entry is 0.
pub fn restricted_softmax(row: &[f64], excluded: usize) -> Vec<f64> {
    let lse = log_sum_exp(row.iter().enumerate().filter(|(j, _)| *j != excluded).map(|(_, &z)| z));
    row.iter()
        .enumerate()
        .map(|(j, &z)| if j == excluded { 0.0 } else { (z - lse).exp() })
        .collect()
}
