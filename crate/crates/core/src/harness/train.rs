use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objectives::ObjectiveSpec;
use crate::scenegen::{stream_rng, Example, Vocab};
use crate::tinylm::optim::{Adam, AdamConfig};
use crate::tinylm::{backward, eos_probability, forward, Params};

const STREAM_SHUFFLE: u64 = 21;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Steps between EOS tracking measurements; 0 disables tracking.
    pub log_interval: usize,
    pub optimizer: AdamConfig,
    pub schedule: LrSchedule,
    /// Fraction of total steps spent in linear warmup.
    pub warmup_frac: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    Cosine,
}

/// Learning-rate multiplier at 0-based `step` out of `total`.
pub fn lr_factor(schedule: LrSchedule, warmup_frac: f64, step: usize, total: usize) -> f64 {
    let warm = (warmup_frac * total as f64).ceil() as usize;
    if step < warm {
        return (step + 1) as f64 / warm as f64;
    }
    match schedule {
        LrSchedule::Constant => 1.0,
        LrSchedule::Cosine => {
            let span = (total - warm).max(1) as f64;
            0.5 * (1.0 + (std::f64::consts::PI * (step - warm) as f64 / span).cos())
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 3,
            batch_size: 16,
            log_interval: 50,
            optimizer: AdamConfig::default(),
            schedule: LrSchedule::Cosine,
            warmup_frac: 0.03,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("train: batch_size must be >= 1".into()));
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0 && (0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2) && o.eps > 0.0) {
            return Err(Error::Config("train: invalid optimizer hyperparameters".into()));
        }
        if !(0.0..1.0).contains(&self.warmup_frac) {
            return Err(Error::Config("train: warmup_frac must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EosTrack {
    pub step: usize,
    /// Mean `log p_EOS` at EOS-labelled positions.
    pub eos_loglik: f64,
    /// Mean `p_EOS` at positions whose input token is a period.
    pub sentence_end_p_eos: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    /// Mean batch loss per optimizer step.
    pub losses: Vec<f64>,
    pub tracks: Vec<EosTrack>,
}

/// Read-only EOS measurement over `batch`.
pub fn track_eos(params: &Params, batch: &[Example]) -> Result<(f64, f64)> {
    if batch.is_empty() {
        return Err(Error::Config("track_eos: empty batch".into()));
    }
    let (mut ll, mut n_ll, mut pe, mut n_pe) = (0.0, 0usize, 0.0, 0usize);
    for ex in batch {
        let tokens = ex.inputs();
        let trace = forward(params, &ex.features.tokens, tokens)?;
        let eos_pos: Vec<usize> = (0..ex.labels.len()).filter(|&i| ex.labels[i] == Vocab::EOS).collect();
        for p in eos_probability(&trace, &eos_pos, Vocab::EOS)? {
            ll += p.max(f64::MIN_POSITIVE).ln();
            n_ll += 1;
        }
        let ends: Vec<usize> = (0..tokens.len()).filter(|&i| tokens[i] == Vocab::PERIOD).collect();
        for p in eos_probability(&trace, &ends, Vocab::EOS)? {
            pe += p;
            n_pe += 1;
        }
    }
    Ok((ll / n_ll.max(1) as f64, pe / n_pe.max(1) as f64))
}

/// Minibatch Adam over `examples`. Each example's objective is keyed on its
/// index in `examples`; the visiting order is reshuffled every epoch.
pub fn train(
    params: &mut Params,
    examples: &[Example],
    objective: &ObjectiveSpec,
    cfg: &TrainConfig,
    seed: u64,
    tracking: &[Example],
) -> Result<TrainingLog> {
    cfg.validate()?;
    objective.validate()?;
    if examples.is_empty() {
        return Err(Error::Config("train: empty dataset".into()));
    }
    let mut adam = Adam::new(cfg.optimizer.clone(), params);
    let mut rng = stream_rng(seed, STREAM_SHUFFLE);
    let mut log = TrainingLog::default();
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let track = |params: &Params, step: usize, log: &mut TrainingLog| -> Result<()> {
        if cfg.log_interval > 0 && !tracking.is_empty() {
            let (eos_loglik, sentence_end_p_eos) = track_eos(params, tracking)?;
            log.tracks.push(EosTrack {
                step,
                eos_loglik,
                sentence_end_p_eos,
            });
        }
        Ok(())
    };
    track(params, 0, &mut log)?;
    let total = cfg.epochs * examples.len().div_ceil(cfg.batch_size);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let mut grads = params.zeros_like();
            let mut loss = 0.0;
            for &k in chunk {
                let ex = &examples[k];
                let trace = forward(params, &ex.features.tokens, ex.inputs())?;
                let out = objective.resolve(k).evaluate(&trace.logits, &ex.labels)?;
                if !out.loss.is_finite() {
                    return Err(Error::Numeric(format!(
                        "non-finite loss at step {} (example {k})",
                        log.losses.len() + 1
                    )));
                }
                loss += out.loss;
                grads.add_scaled(1.0, &backward(params, &trace, &out.dlogits).grads);
            }
            let inv = 1.0 / chunk.len() as f64;
            grads.scale(inv);
            adam.config.lr = cfg.optimizer.lr * lr_factor(cfg.schedule, cfg.warmup_frac, log.losses.len(), total);
            adam.update(params, &grads);
            if !params.all_finite() {
                return Err(Error::Numeric(format!("parameters diverged at step {}", log.losses.len() + 1)));
            }
            log.losses.push(loss * inv);
            let step = log.losses.len();
            if cfg.log_interval > 0 && step % cfg.log_interval == 0 {
                track(params, step, &mut log)?;
            }
        }
    }
    let last = log.losses.len();
    if cfg.log_interval > 0 && log.tracks.last().map(|t| t.step) != Some(last) {
        track(params, last, &mut log)?;
    }
    Ok(log)
}
