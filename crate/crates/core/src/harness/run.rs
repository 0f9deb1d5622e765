//! Config-driven runs. One config names one experiment kind; each seed gets
//! its own `seed-<n>` directory and every artifact carries the config hash,
//! the seed and the code version.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::plot::{emit_plots, PlotInputs};
use super::train::{train, TrainConfig, TrainingLog};
use crate::error::{Error, Result};
use crate::hallmetrics::{chair_eval, EvalReport};
use crate::objectives::{ObjectiveKind, ObjectiveSpec};
use crate::probes::{flow_summary, tendency_report, FlowSummary, Manipulation, TendencyCurve};
use crate::scenegen::{read_examples, write_examples, DatasetConfig, Example, Scene};
use crate::scoring::{filter_dataset, read_score_report, score_dataset, score_report, FilterManifest, FilterPlan};
use crate::tinylm::checkpoint::Checkpoint;
use crate::tinylm::{generate, init_params, DecodeConfig, ModelConfig, Params};

pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunKind {
    TrainMle,
    TrainSelective,
    TrainCombined,
    FurtherTrain,
    Score,
    Filter,
    ProbeSaliency,
    ProbeTendency,
    Eval,
}

impl RunKind {
    pub fn name(self) -> &'static str {
        match self {
            RunKind::TrainMle => "train_mle",
            RunKind::TrainSelective => "train_selective",
            RunKind::TrainCombined => "train_combined",
            RunKind::FurtherTrain => "further_train",
            RunKind::Score => "score",
            RunKind::Filter => "filter",
            RunKind::ProbeSaliency => "probe_saliency",
            RunKind::ProbeTendency => "probe_tendency",
            RunKind::Eval => "eval",
        }
    }

    pub fn is_training(self) -> bool {
        matches!(
            self,
            RunKind::TrainMle | RunKind::TrainSelective | RunKind::TrainCombined | RunKind::FurtherTrain
        )
    }
}

/// Relative paths resolve against the working directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub kind: RunKind,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    /// Must match the config the data files were built with (features are re-rendered from it).
    pub dataset: DatasetConfig,
    /// JSON-lines examples, as written by `dataset build`.
    pub train_data: Option<PathBuf>,
    pub eval_data: Option<PathBuf>,
    /// Initial weights for training (fresh init when absent); the model under
    /// test for score, probe and eval runs.
    pub checkpoint: Option<PathBuf>,
    /// Score report consumed by `filter`.
    pub scores: Option<PathBuf>,
    /// Layer sizes; slot, feature and vocabulary sizes come from `dataset`.
    pub model: ModelConfig,
    /// Objective of `further_train` and the combine ratio of `train_combined`.
    pub objective: ObjectiveSpec,
    pub train: TrainConfig,
    pub decode: DecodeConfig,
    /// The run seed replaces `filter.seed`.
    pub filter: FilterPlan,
    /// Settings shared by every tendency curve; the mode field is ignored.
    pub manipulation: Manipulation,
    /// Leading eval examples used by the probes.
    pub probe_examples: usize,
    /// EOS tracking batch: this many leading eval examples (0 disables).
    pub track_examples: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            kind: RunKind::TrainMle,
            seeds: vec![0],
            out_dir: PathBuf::from("runs"),
            dataset: DatasetConfig::default(),
            train_data: None,
            eval_data: None,
            checkpoint: None,
            scores: None,
            model: ModelConfig::default(),
            objective: ObjectiveSpec::default(),
            train: TrainConfig::default(),
            decode: DecodeConfig::default(),
            filter: FilterPlan::default(),
            manipulation: Manipulation::default(),
            probe_examples: 500,
            track_examples: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
    pub code_version: String,
    pub kind: RunKind,
}

/// A JSON artifact with its provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stamped<T> {
    pub provenance: Provenance,
    pub data: T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub seed: u64,
    pub dir: PathBuf,
    pub artifacts: Vec<String>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// SHA-256 over the canonical JSON form, ignoring `out_dir`. Input files
    /// enter by content digest, so moving them leaves the hash unchanged.
    pub fn hash(&self) -> Result<String> {
        let digest = |p: &Option<PathBuf>| -> Result<Option<PathBuf>> {
            p.as_deref()
                .map(|p| Ok(PathBuf::from(format!("sha256:{}", hex::encode(Sha256::digest(fs::read(p)?))))))
                .transpose()
        };
        let canonical = RunConfig {
            out_dir: PathBuf::new(),
            train_data: digest(&self.train_data)?,
            eval_data: digest(&self.eval_data)?,
            checkpoint: digest(&self.checkpoint)?,
            scores: digest(&self.scores)?,
            ..self.clone()
        };
        Ok(hex::encode(Sha256::digest(serde_json::to_vec(&canonical)?)))
    }

    fn need<'a>(&self, field: &str, p: &'a Option<PathBuf>) -> Result<&'a Path> {
        let p = p
            .as_deref()
            .ok_or_else(|| Error::Config(format!("{} needs `{field}`", self.kind.name())))?;
        if !p.exists() {
            return Err(Error::Config(format!("{field}: {} does not exist", p.display())));
        }
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must be nonempty".into()));
        }
        self.dataset.validate()?;
        self.model_config().validate()?;
        self.objective.validate()?;
        self.train.validate()?;
        self.filter.validate()?;
        self.manipulation.validate()?;
        for (field, p) in [
            ("train_data", &self.train_data),
            ("eval_data", &self.eval_data),
            ("checkpoint", &self.checkpoint),
            ("scores", &self.scores),
        ] {
            if let Some(p) = p {
                if !p.exists() {
                    return Err(Error::Config(format!("{field}: {} does not exist", p.display())));
                }
            }
        }
        match self.kind {
            RunKind::TrainMle | RunKind::TrainSelective | RunKind::TrainCombined => {
                self.need("train_data", &self.train_data)?;
            }
            RunKind::FurtherTrain => {
                self.need("train_data", &self.train_data)?;
                self.need("checkpoint", &self.checkpoint)?;
            }
            RunKind::Score => {
                self.need("train_data", &self.train_data)?;
                self.need("checkpoint", &self.checkpoint)?;
            }
            RunKind::Filter => {
                self.need("train_data", &self.train_data)?;
                self.need("scores", &self.scores)?;
            }
            RunKind::ProbeSaliency | RunKind::ProbeTendency | RunKind::Eval => {
                self.need("eval_data", &self.eval_data)?;
                self.need("checkpoint", &self.checkpoint)?;
                if self.probe_examples == 0 {
                    return Err(Error::Config("probe_examples must be >= 1".into()));
                }
            }
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            feature_dim: self.dataset.perception.feature_dim,
            scene_slots: self.dataset.perception.scene_slots,
            vocab_size: self.dataset.vocab().len(),
            ..self.model.clone()
        }
    }

    /// Objective used by the training kinds.
    pub fn training_objective(&self) -> ObjectiveSpec {
        let kind = match self.kind {
            RunKind::TrainMle => ObjectiveKind::Mle,
            RunKind::TrainSelective => ObjectiveKind::Selective,
            RunKind::TrainCombined => ObjectiveKind::Combined,
            _ => self.objective.kind,
        };
        ObjectiveSpec {
            kind,
            ..self.objective.clone()
        }
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn read_stamped<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Stamped<T>> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

fn load_checkpoint(path: &Path, model: &ModelConfig) -> Result<Params> {
    let params = Checkpoint::load(path)?.params;
    let c = &params.config;
    if (c.vocab_size, c.feature_dim) != (model.vocab_size, model.feature_dim) {
        return Err(Error::Config(format!(
            "checkpoint {} has vocab {} / feature_dim {}, dataset needs {} / {}",
            path.display(),
            c.vocab_size,
            c.feature_dim,
            model.vocab_size,
            model.feature_dim
        )));
    }
    Ok(params)
}

/// Greedy captions and CHAIR metrics over `examples`.
pub fn evaluate_model(
    params: &Params,
    examples: &[Example],
    dcfg: &DatasetConfig,
    decode: &DecodeConfig,
) -> Result<(EvalReport, Vec<Vec<usize>>)> {
    let captions = examples
        .iter()
        .enumerate()
        .map(|(i, e)| generate(params, &e.features.tokens, decode).map_err(|err| Error::at(i, err)))
        .collect::<Result<Vec<_>>>()?;
    let scenes: Vec<Scene> = examples.iter().map(|e| e.scene.clone()).collect();
    Ok((chair_eval(&captions, &scenes, &dcfg.vocab())?, captions))
}

/// Executes every seed of `config`. Output is a pure function of the config
/// (minus `out_dir`) and the seed.
pub fn run(config: &RunConfig) -> Result<Vec<SeedOutcome>> {
    config.validate()?;
    let hash = config.hash()?;
    fs::create_dir_all(&config.out_dir)?;
    fs::write(config.out_dir.join("config.toml"), config.to_toml()?)?;
    let read = |p: &Option<PathBuf>| -> Result<Option<Vec<Example>>> {
        p.as_deref().map(|p| read_examples(p, &config.dataset)).transpose()
    };
    let train_data = read(&config.train_data)?;
    let eval_data = read(&config.eval_data)?;
    let model = config.model_config();
    let mut outcomes = Vec::new();
    for &seed in &config.seeds {
        let dir = config.out_dir.join(format!("seed-{seed}"));
        fs::create_dir_all(&dir)?;
        let prov = Provenance {
            config_hash: hash.clone(),
            seed,
            code_version: CODE_VERSION.into(),
            kind: config.kind,
        };
        let mut artifacts = Vec::new();
        let mut emit = |name: &str| artifacts.push(name.to_string());
        let init = |seed: u64| -> Result<Params> {
            match &config.checkpoint {
                Some(p) => load_checkpoint(p, &model),
                None => init_params(&model, seed),
            }
        };
        let probe_set = |n: usize| -> &[Example] {
            let e = eval_data.as_deref().unwrap_or(&[]);
            &e[..n.min(e.len())]
        };
        match config.kind {
            k if k.is_training() => {
                let data = train_data.as_deref().expect("validated");
                let mut params = init(seed)?;
                let track = probe_set(config.track_examples);
                let log: TrainingLog = train(&mut params, data, &config.training_objective(), &config.train, seed, track)?;
                let mut ck = Checkpoint::new(params);
                ck.meta.insert("config_hash".into(), hash.clone());
                ck.meta.insert("seed".into(), seed.to_string());
                ck.meta.insert("code_version".into(), CODE_VERSION.into());
                ck.meta.insert("kind".into(), config.kind.name().into());
                ck.save(&dir.join("model.ckpt"))?;
                emit("model.ckpt");
                write_json(&dir.join("training_log.json"), &Stamped { provenance: prov.clone(), data: log })?;
                emit("training_log.json");
                if let Some(eval) = &eval_data {
                    let (report, _) = evaluate_model(&ck.params, eval, &config.dataset, &config.decode)?;
                    write_json(&dir.join("eval.json"), &Stamped { provenance: prov.clone(), data: report })?;
                    emit("eval.json");
                }
            }
            RunKind::Score => {
                let params = init(seed)?;
                let scores = score_dataset(&params, train_data.as_deref().expect("validated"))?;
                let text = format!("{}{}", provenance_comment(&prov), score_report(&scores));
                fs::write(dir.join("scores.tsv"), text)?;
                emit("scores.tsv");
            }
            RunKind::Filter => {
                let data = train_data.as_deref().expect("validated");
                let scores = read_score_report(config.scores.as_deref().expect("validated"))?;
                let plan = FilterPlan {
                    seed,
                    ..config.filter.clone()
                };
                let (kept, manifest): (Vec<Example>, FilterManifest) = filter_dataset(data, &scores, &plan)?;
                write_examples(&dir.join("filtered.jsonl"), &kept)?;
                emit("filtered.jsonl");
                write_json(&dir.join("filter_manifest.json"), &Stamped { provenance: prov.clone(), data: manifest })?;
                emit("filter_manifest.json");
            }
            RunKind::ProbeSaliency => {
                let params = init(seed)?;
                let flow: FlowSummary = flow_summary(&params, probe_set(config.probe_examples), seed)?;
                write_json(&dir.join("saliency.json"), &Stamped { provenance: prov.clone(), data: flow })?;
                emit("saliency.json");
            }
            RunKind::ProbeTendency => {
                let params = init(seed)?;
                let base = Manipulation {
                    aux_seed: seed,
                    ..config.manipulation.clone()
                };
                let curves: Vec<TendencyCurve> = tendency_report(&params, probe_set(config.probe_examples), &base)?;
                write_json(&dir.join("tendency.json"), &Stamped { provenance: prov.clone(), data: curves })?;
                emit("tendency.json");
            }
            RunKind::Eval => {
                let params = init(seed)?;
                let eval = eval_data.as_deref().expect("validated");
                let (report, captions) = evaluate_model(&params, eval, &config.dataset, &config.decode)?;
                write_json(&dir.join("eval.json"), &Stamped { provenance: prov.clone(), data: report })?;
                emit("eval.json");
                let vocab = config.dataset.vocab();
                let mut text = provenance_comment(&prov);
                for c in &captions {
                    text.push_str(&vocab.decode(c));
                    text.push('\n');
                }
                fs::write(dir.join("captions.txt"), text)?;
                emit("captions.txt");
            }
            _ => unreachable!("training kinds handled above"),
        }
        outcomes.push(SeedOutcome { seed, dir, artifacts });
    }
    Ok(outcomes)
}

fn provenance_comment(p: &Provenance) -> String {
    format!(
        "# config_hash={} seed={} code_version={} kind={}\n",
        p.config_hash,
        p.seed,
        p.code_version,
        p.kind.name()
    )
}

/// Collects whichever reports exist in a seed directory and plots them into `<dir>/plots`.
pub fn report(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(Error::Config(format!("{} is not a directory", dir.display())));
    }
    let opt = |name: &str| Some(dir.join(name)).filter(|p| p.exists());
    let inputs = PlotInputs {
        training_log: opt("training_log.json").map(|p| read_stamped(&p).map(|s| s.data)).transpose()?,
        tendency: opt("tendency.json").map(|p| read_stamped(&p).map(|s| s.data)).transpose()?,
        flow: opt("saliency.json").map(|p| read_stamped(&p).map(|s| s.data)).transpose()?,
        scores: opt("scores.tsv").map(|p| read_score_report(&p)).transpose()?,
    };
    let out = emit_plots(&dir.join("plots"), &inputs)?;
    if out.is_empty() {
        return Err(Error::Config(format!("{} holds no plottable reports", dir.display())));
    }
    Ok(out)
}
