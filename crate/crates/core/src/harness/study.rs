//! The full experiment matrix for one seed, built in memory.

use serde::{Deserialize, Serialize};

use super::train::{train, LrSchedule, TrainConfig, TrainingLog};
use crate::error::Result;
use crate::hallmetrics::{chair_eval, EvalReport};
use crate::objectives::{ObjectiveKind, ObjectiveSpec};
use crate::scenegen::{build_dataset, DatasetConfig, DetailLevel, DetailMixture, Example, Scene, Vocab};
use crate::scoring::{filter_dataset, score_dataset, FilterMode, FilterPlan, ScoreTriple};
use crate::tinylm::{generate, init_params, optim::AdamConfig, DecodeConfig, ModelConfig, Params};

/// Scene-seed block reserved per study seed; train, pretrain and test draw from disjoint sub-ranges.
const SEED_BLOCK: u64 = 100_000_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudyConfig {
    /// Instruction data. Seed ranges are overridden per study seed.
    pub dataset: DatasetConfig,
    /// Brief captions used to pretrain the language model before instruction tuning.
    pub pretrain_size: usize,
    pub pretrain: TrainConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Training of the all-over-detailed run whose EOS trend is tracked.
    pub over_detailed: TrainConfig,
    pub further: TrainConfig,
    pub decode: DecodeConfig,
    pub filter_ratio: f64,
    /// Held-out examples used for EOS tracking during training.
    pub track_size: usize,
}

impl Default for StudyConfig {
    fn default() -> Self {
        let lr = |lr: f64| AdamConfig {
            lr,
            ..Default::default()
        };
        StudyConfig {
            dataset: DatasetConfig::default(),
            pretrain_size: 6000,
            pretrain: TrainConfig {
                epochs: 8,
                log_interval: 0,
                optimizer: lr(3e-3),
                ..Default::default()
            },
            model: ModelConfig::default(),
            train: TrainConfig {
                epochs: 3,
                optimizer: lr(2e-4),
                ..Default::default()
            },
            over_detailed: TrainConfig {
                epochs: 3,
                optimizer: lr(2e-4),
                schedule: LrSchedule::Constant,
                ..Default::default()
            },
            further: TrainConfig {
                epochs: 1,
                optimizer: lr(2e-4),
                ..Default::default()
            },
            decode: DecodeConfig::default(),
            filter_ratio: 0.2,
            track_size: 64,
        }
    }
}

impl StudyConfig {
    /// Dataset config with the seed ranges for study seed `seed`.
    pub fn dataset_for(&self, seed: u64) -> DatasetConfig {
        let base = seed * SEED_BLOCK;
        DatasetConfig {
            train_seed_start: base,
            test_seed_start: base + SEED_BLOCK / 2,
            ..self.dataset.clone()
        }
    }

    /// Held-out scenes re-captioned up to the perception limit, so EOS is
    /// labelled exactly where the visible content runs out.
    pub fn track_examples(&self, test: &[Example], seed: u64) -> Result<Vec<Example>> {
        self.recaption(&test[..self.track_size.min(test.len())], DetailLevel::PerceivableOnly, seed)
    }

    /// The same scenes captioned at `level`.
    pub fn recaption(&self, examples: &[Example], level: DetailLevel, seed: u64) -> Result<Vec<Example>> {
        let dcfg = self.dataset_for(seed);
        let (vocab, tables) = (dcfg.vocab(), dcfg.tables());
        examples
            .iter()
            .map(|e| dcfg.example_for(e.scene.clone(), level, &vocab, &tables))
            .collect()
    }

    pub fn pretrain_dataset_for(&self, seed: u64) -> DatasetConfig {
        let d = self.dataset_for(seed);
        DatasetConfig {
            mixture: DetailMixture {
                perceivable_only: 1.0,
                full: 0.0,
                over_detailed: 0.0,
            },
            train_size: self.pretrain_size,
            train_seed_start: d.train_seed_start + SEED_BLOCK / 4,
            test_size: 1,
            ..d
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub params: Params,
    pub log: TrainingLog,
}

/// Every model of the matrix for one seed, plus the data they were trained on.
#[derive(Debug, Clone)]
pub struct Study {
    pub seed: u64,
    pub train: Vec<Example>,
    pub test: Vec<Example>,
    pub pretrained: Params,
    /// MLE instruction tuning; also the scoring reference.
    pub mle: TrainedModel,
    /// MLE on the training scenes with every caption over-detailed.
    pub over_detailed: TrainedModel,
    pub selective: TrainedModel,
    pub mle_further: TrainedModel,
    pub selective_further: TrainedModel,
    pub scores: Vec<ScoreTriple>,
    pub top_filtered: TrainedModel,
    pub reversed_filtered: TrainedModel,
}

fn fit(
    init: &Params,
    data: &[Example],
    kind: ObjectiveKind,
    cfg: &TrainConfig,
    seed: u64,
    track: &[Example],
) -> Result<TrainedModel> {
    let mut params = init.clone();
    let log = train(&mut params, data, &ObjectiveSpec::new(kind), cfg, seed, track)?;
    Ok(TrainedModel { params, log })
}

impl Study {
    pub fn run(cfg: &StudyConfig, seed: u64) -> Result<Study> {
        let data = build_dataset(&cfg.dataset_for(seed))?;
        let pre = build_dataset(&cfg.pretrain_dataset_for(seed))?;
        let track = cfg.track_examples(&data.test, seed)?;
        let track = &track[..];
        let model = ModelConfig {
            feature_dim: cfg.dataset.perception.feature_dim,
            scene_slots: cfg.dataset.perception.scene_slots,
            vocab_size: cfg.dataset.vocab().len(),
            ..cfg.model.clone()
        };
        let mut pretrained = init_params(&model, seed)?;
        train(
            &mut pretrained,
            &pre.train,
            &ObjectiveSpec::new(ObjectiveKind::Mle),
            &cfg.pretrain,
            seed ^ 0x5eed,
            &[],
        )?;
        let mle = fit(&pretrained, &data.train, ObjectiveKind::Mle, &cfg.train, seed, track)?;
        let od = cfg.recaption(&data.train, DetailLevel::OverDetailed, seed)?;
        let over_detailed = fit(&pretrained, &od, ObjectiveKind::Mle, &cfg.over_detailed, seed, track)?;
        let selective = fit(&pretrained, &data.train, ObjectiveKind::Selective, &cfg.train, seed, track)?;
        let fseed = seed + 1;
        let mle_further = fit(&mle.params, &data.train, ObjectiveKind::Mle, &cfg.further, fseed, track)?;
        let selective_further = fit(&mle.params, &data.train, ObjectiveKind::Selective, &cfg.further, fseed, track)?;
        let scores = score_dataset(&mle.params, &data.train)?;
        let filtered = |mode| -> Result<TrainedModel> {
            let plan = FilterPlan {
                mode,
                ratio: cfg.filter_ratio,
                seed,
                ..Default::default()
            };
            let (kept, _) = filter_dataset(&data.train, &scores, &plan)?;
            fit(&pretrained, &kept, ObjectiveKind::Mle, &cfg.train, seed, track)
        };
        let top_filtered = filtered(FilterMode::Top)?;
        let reversed_filtered = filtered(FilterMode::Reversed)?;
        Ok(Study {
            seed,
            train: data.train,
            test: data.test,
            pretrained,
            mle,
            over_detailed,
            selective,
            mle_further,
            selective_further,
            scores,
            top_filtered,
            reversed_filtered,
        })
    }
}

/// Greedy captions for every example's scene.
pub fn caption_all(params: &Params, examples: &[Example], decode: &DecodeConfig) -> Result<Vec<Vec<usize>>> {
    examples
        .iter()
        .map(|e| generate(params, &e.features.tokens, decode))
        .collect()
}

pub fn evaluate(
    params: &Params,
    examples: &[Example],
    vocab: &Vocab,
    decode: &DecodeConfig,
) -> Result<(EvalReport, Vec<Vec<usize>>)> {
    let captions = caption_all(params, examples, decode)?;
    let scenes: Vec<Scene> = examples.iter().map(|e| e.scene.clone()).collect();
    Ok((chair_eval(&captions, &scenes, vocab)?, captions))
}
