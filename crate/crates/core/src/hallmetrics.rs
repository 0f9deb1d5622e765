//! CHAIR-style object hallucination metrics over generated captions.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scenegen::{Scene, Vocab};

/// Class ids of every object word in `caption`, deduplicated.
pub fn extract_objects(caption: &[usize], vocab: &Vocab) -> BTreeSet<usize> {
    caption.iter().filter_map(|&t| vocab.token_class(t)).collect()
}

/// Object mentions with multiplicity, in caption order.
pub fn object_mentions(caption: &[usize], vocab: &Vocab) -> Vec<usize> {
    caption.iter().filter_map(|&t| vocab.token_class(t)).collect()
}

/// Caption length in tokens, not counting BOS or EOS.
pub fn caption_length(caption: &[usize]) -> usize {
    caption.iter().filter(|&&t| t != Vocab::BOS && t != Vocab::EOS).count()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub chair_s: f64,
    pub chair_i: f64,
    pub recall: f64,
    pub mean_length: f64,
    pub n_captions: usize,
}

pub fn chair_eval(captions: &[Vec<usize>], scenes: &[Scene], vocab: &Vocab) -> Result<EvalReport> {
    if captions.len() != scenes.len() {
        return Err(Error::Alignment {
            left: captions.len(),
            right: scenes.len(),
        });
    }
    let (mut with_halluc, mut halluc, mut mentioned, mut correct, mut truth, mut length) = (0, 0, 0, 0, 0, 0);
    for (cap, scene) in captions.iter().zip(scenes) {
        let objs = extract_objects(cap, vocab);
        let present: BTreeSet<usize> = scene.class_ids().into_iter().collect();
        let h = objs.difference(&present).count();
        with_halluc += usize::from(h > 0);
        halluc += h;
        mentioned += objs.len();
        correct += objs.intersection(&present).count();
        truth += present.len();
        length += caption_length(cap);
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    Ok(EvalReport {
        chair_s: ratio(with_halluc, captions.len()),
        chair_i: ratio(halluc, mentioned),
        recall: ratio(correct, truth),
        mean_length: ratio(length, captions.len()),
        n_captions: captions.len(),
    })
}

/// Keep the first `ceil(R% * len)` content tokens of each caption and close it with EOS.
pub fn truncate_baseline(captions: &[Vec<usize>], percent: f64) -> Result<Vec<Vec<usize>>> {
    if !(percent > 0.0 && percent <= 100.0) {
        return Err(Error::Config(format!("truncation percentage {percent} outside (0, 100]")));
    }
    Ok(captions
        .iter()
        .map(|cap| {
            let body: Vec<usize> = cap.iter().copied().filter(|&t| t != Vocab::BOS && t != Vocab::EOS).collect();
            let keep = ((percent / 100.0 * body.len() as f64).ceil() as usize).min(body.len());
            let mut out = Vec::with_capacity(keep + 2);
            if cap.first() == Some(&Vocab::BOS) {
                out.push(Vocab::BOS);
            }
            out.extend_from_slice(&body[..keep]);
            out.push(Vocab::EOS);
            out
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OmissionReport {
    pub n_halluc_omitted: usize,
    pub n_correct_omitted: usize,
    pub halluc_rate_of_omission: f64,
    /// Mean correct object mentions per new caption (with multiplicity).
    pub avg_correct_per_caption: f64,
    pub avg_halluc_per_caption: f64,
}

/// Objects the base captions mention but the new captions drop, split by correctness.
pub fn omission_analysis(
    base: &[Vec<usize>],
    new: &[Vec<usize>],
    scenes: &[Scene],
    vocab: &Vocab,
) -> Result<OmissionReport> {
    if base.len() != new.len() {
        return Err(Error::Alignment {
            left: base.len(),
            right: new.len(),
        });
    }
    if base.len() != scenes.len() {
        return Err(Error::Alignment {
            left: base.len(),
            right: scenes.len(),
        });
    }
    let (mut h_om, mut c_om, mut c_cnt, mut h_cnt) = (0, 0, 0, 0);
    for ((b, n), scene) in base.iter().zip(new).zip(scenes) {
        let present: BTreeSet<usize> = scene.class_ids().into_iter().collect();
        let kept = extract_objects(n, vocab);
        for c in extract_objects(b, vocab).difference(&kept) {
            if present.contains(c) {
                c_om += 1;
            } else {
                h_om += 1;
            }
        }
        for c in object_mentions(n, vocab) {
            if present.contains(&c) {
                c_cnt += 1;
            } else {
                h_cnt += 1;
            }
        }
    }
    let n = new.len().max(1) as f64;
    Ok(OmissionReport {
        n_halluc_omitted: h_om,
        n_correct_omitted: c_om,
        halluc_rate_of_omission: if h_om + c_om > 0 {
            h_om as f64 / (h_om + c_om) as f64
        } else {
            0.0
        },
        avg_correct_per_caption: c_cnt as f64 / n,
        avg_halluc_per_caption: h_cnt as f64 / n,
    })
}
