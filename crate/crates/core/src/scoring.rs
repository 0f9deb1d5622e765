//! Per-example EOS supervision scores under a reference model, and
//! score-based dataset filtering.
//!
//! `s_pos = -Σ_{y=EOS} log p_EOS` measures how weakly the reference model
//! already expects the example's terminations; `s_neg = -Σ_{y≠EOS} log(1 - p_EOS)`
//! measures how hard the example pushes EOS down elsewhere. Examples with a
//! large `s_final = s_neg - s_pos` are the ones most likely to teach the model
//! to keep talking.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scenegen::{stream_rng, Example, Vocab};
use crate::tinylm::{forward, log_sum_exp, Params};

const STREAM_FILTER: u64 = 31;
pub const PROB_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreTriple {
    pub s_pos: f64,
    pub s_neg: f64,
    pub s_final: f64,
}

/// Scores from per-position EOS probabilities and the labels they predict.
pub fn score_from_probs(labels: &[usize], p_eos: &[f64], eos: usize) -> Result<ScoreTriple> {
    if labels.len() != p_eos.len() {
        return Err(Error::Alignment {
            left: labels.len(),
            right: p_eos.len(),
        });
    }
    let (mut s_pos, mut s_neg) = (0.0, 0.0);
    for (&y, &p) in labels.iter().zip(p_eos) {
        let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
        if y == eos {
            s_pos -= p.ln();
        } else {
            s_neg -= (1.0 - p).ln();
        }
    }
    Ok(ScoreTriple {
        s_pos,
        s_neg,
        s_final: s_neg - s_pos,
    })
}

pub fn score_example(ref_params: &Params, example: &Example) -> Result<ScoreTriple> {
    let trace = forward(ref_params, &example.features.tokens, example.inputs())?;
    let p_eos: Vec<f64> = trace
        .logits
        .rows()
        .into_iter()
        .map(|row| (row[Vocab::EOS] - log_sum_exp(row.iter().copied())).exp())
        .collect();
    score_from_probs(&example.labels, &p_eos, Vocab::EOS)
}

pub fn score_dataset(ref_params: &Params, examples: &[Example]) -> Result<Vec<ScoreTriple>> {
    examples
        .iter()
        .enumerate()
        .map(|(i, ex)| score_example(ref_params, ex).map_err(|e| Error::at(i, e)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterMode {
    /// Remove the highest-ranked examples.
    Top,
    /// Remove a uniformly random subset.
    Random,
    /// Remove the lowest-ranked examples.
    Reversed,
}

/// Ranking key; larger means more harmful.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMetric {
    /// `s_final`.
    Final,
    /// `s_neg` alone.
    Neg,
    /// `-s_pos` alone.
    Pos,
}

impl ScoreMetric {
    pub fn key(self, s: &ScoreTriple) -> f64 {
        match self {
            ScoreMetric::Final => s.s_final,
            ScoreMetric::Neg => s.s_neg,
            ScoreMetric::Pos => -s.s_pos,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterPlan {
    pub mode: FilterMode,
    pub ratio: f64,
    pub seed: u64,
    pub metric: ScoreMetric,
}

impl Default for FilterPlan {
    fn default() -> Self {
        FilterPlan {
            mode: FilterMode::Top,
            ratio: 0.2,
            seed: 0,
            metric: ScoreMetric::Final,
        }
    }
}

impl FilterPlan {
    pub fn validate(&self) -> Result<()> {
        if !(self.ratio > 0.0 && self.ratio < 1.0) {
            return Err(Error::Config(format!("filter ratio {} outside (0, 1)", self.ratio)));
        }
        Ok(())
    }

    /// Number of examples removed from a dataset of `n`.
    pub fn n_removed(&self, n: usize) -> usize {
        ((self.ratio * n as f64).ceil() as usize).min(n)
    }
}

/// Indices to remove, ascending.
pub fn removed_indices(scores: &[ScoreTriple], plan: &FilterPlan) -> Result<Vec<usize>> {
    plan.validate()?;
    let k = plan.n_removed(scores.len());
    let mut order: Vec<usize> = (0..scores.len()).collect();
    match plan.mode {
        FilterMode::Random => order.shuffle(&mut stream_rng(plan.seed, STREAM_FILTER)),
        FilterMode::Top => {
            order.sort_by(|&a, &b| plan.metric.key(&scores[b]).total_cmp(&plan.metric.key(&scores[a])).then(a.cmp(&b)))
        }
        FilterMode::Reversed => {
            order.sort_by(|&a, &b| plan.metric.key(&scores[a]).total_cmp(&plan.metric.key(&scores[b])).then(a.cmp(&b)))
        }
    }
    let mut removed = order[..k].to_vec();
    removed.sort_unstable();
    Ok(removed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterManifest {
    pub mode: FilterMode,
    pub metric: ScoreMetric,
    pub ratio: f64,
    pub seed: u64,
    pub n_before: usize,
    pub n_after: usize,
    pub removed: Vec<usize>,
}

/// Kept examples in their original order, plus the manifest of what was dropped.
pub fn filter_dataset(
    examples: &[Example],
    scores: &[ScoreTriple],
    plan: &FilterPlan,
) -> Result<(Vec<Example>, FilterManifest)> {
    if examples.len() != scores.len() {
        return Err(Error::Alignment {
            left: examples.len(),
            right: scores.len(),
        });
    }
    let removed = removed_indices(scores, plan)?;
    let mut drop = vec![false; examples.len()];
    removed.iter().for_each(|&i| drop[i] = true);
    let kept: Vec<Example> = examples
        .iter()
        .zip(&drop)
        .filter(|(_, &d)| !d)
        .map(|(e, _)| e.clone())
        .collect();
    let manifest = FilterManifest {
        mode: plan.mode,
        metric: plan.metric,
        ratio: plan.ratio,
        seed: plan.seed,
        n_before: examples.len(),
        n_after: kept.len(),
        removed,
    };
    Ok((kept, manifest))
}

/// Tab-separated report, one row per example.
pub fn score_report(scores: &[ScoreTriple]) -> String {
    let mut out = String::from("index\ts_pos\ts_neg\ts_final\n");
    for (i, s) in scores.iter().enumerate() {
        let _ = writeln!(out, "{i}\t{}\t{}\t{}", s.s_pos, s.s_neg, s.s_final);
    }
    out
}

pub fn write_score_report(path: &Path, scores: &[ScoreTriple]) -> Result<()> {
    fs::write(path, score_report(scores))?;
    Ok(())
}

/// Leading `#` lines (provenance) are skipped.
pub fn read_score_report(path: &Path) -> Result<Vec<ScoreTriple>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().skip_while(|l| l.starts_with('#'));
    if lines.next() != Some("index\ts_pos\ts_neg\ts_final") {
        return Err(Error::Format("score report: bad header".into()));
    }
    lines
        .enumerate()
        .map(|(row, line)| {
            let f: Vec<&str> = line.split('\t').collect();
            let num = |s: &str| {
                s.parse::<f64>()
                    .map_err(|_| Error::Format(format!("score report row {row}: bad number {s:?}")))
            };
            if f.len() != 4 || f[0] != row.to_string() {
                return Err(Error::Format(format!("score report row {row}: malformed")));
            }
            Ok(ScoreTriple {
                s_pos: num(f[1])?,
                s_neg: num(f[2])?,
                s_final: num(f[3])?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    pub mean: f64,
    pub std: f64,
}

/// Equal-width histogram over the observed range.
pub fn histogram(values: &[f64], bins: usize) -> Histogram {
    let bins = bins.max(1);
    let n = values.len();
    let mean = if n > 0 { values.iter().sum::<f64>() / n as f64 } else { 0.0 };
    let std = if n > 0 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt()
    } else {
        0.0
    };
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = if n == 0 {
        (0.0, 1.0)
    } else if hi > lo {
        (lo, hi)
    } else {
        (lo - 0.5, hi + 0.5)
    };
    let width = (hi - lo) / bins as f64;
    let edges = (0..=bins).map(|i| lo + width * i as f64).collect();
    let mut counts = vec![0; bins];
    for &v in values {
        let b = (((v - lo) / width) as usize).min(bins - 1);
        counts[b] += 1;
    }
    Histogram { edges, counts, mean, std }
}
