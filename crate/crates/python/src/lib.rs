//! Python bindings. Configs cross the boundary as TOML text, matching the
//! CLI's config files; data crosses as plain lists.

use std::path::PathBuf;

use eosbench::harness::{run as run_mod, train as train_mod};
use eosbench::objectives::{ObjectiveHandle, ObjectiveKind, ObjectiveSpec};
use eosbench::scenegen::{self, DatasetConfig, Example, Vocab};
use eosbench::tinylm::checkpoint::Checkpoint;
use eosbench::tinylm::{self, DecodeConfig, ModelConfig, Params};
use eosbench::{hallmetrics, probes, scoring};
use ndarray::Array2;
use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use serde::de::DeserializeOwned;

create_exception!(pyeosbench, EosbenchError, PyException, "Raised for any testbed error; args are (class, message).");

fn err(e: eosbench::Error) -> PyErr {
    EosbenchError::new_err((e.class(), e.to_string()))
}

fn config<T: DeserializeOwned + Default>(text: Option<&str>) -> PyResult<T> {
    match text {
        None => Ok(T::default()),
        Some(t) => toml::from_str(t).map_err(|e| err(eosbench::Error::Config(e.message().to_string()))),
    }
}

fn objective(name: &str, combine_ratio: f64) -> PyResult<ObjectiveSpec> {
    let kind = match name {
        "mle" => ObjectiveKind::Mle,
        "selective" => ObjectiveKind::Selective,
        "combined" => ObjectiveKind::Combined,
        other => return Err(err(eosbench::Error::Config(format!("unknown objective {other:?}")))),
    };
    let spec = ObjectiveSpec { kind, combine_ratio };
    spec.validate().map_err(err)?;
    Ok(spec)
}

/// Generated scenes with their features and captions.
#[pyclass(module = "pyeosbench", frozen)]
struct Dataset {
    config: DatasetConfig,
    train: Vec<Example>,
    test: Vec<Example>,
}

impl Dataset {
    fn split(&self, name: &str) -> PyResult<&[Example]> {
        match name {
            "train" => Ok(&self.train),
            "test" => Ok(&self.test),
            other => Err(err(eosbench::Error::Config(format!("unknown split {other:?}")))),
        }
    }

    fn example(&self, split: &str, index: usize) -> PyResult<&Example> {
        let s = self.split(split)?;
        s.get(index)
            .ok_or_else(|| err(eosbench::Error::Config(format!("index {index} out of range for {} examples", s.len()))))
    }
}

#[pymethods]
impl Dataset {
    /// Builds both splits from a dataset config (TOML); defaults when omitted.
    #[new]
    #[pyo3(signature = (config_toml=None))]
    fn new(config_toml: Option<&str>) -> PyResult<Self> {
        let config: DatasetConfig = config(config_toml)?;
        let ds = scenegen::build_dataset(&config).map_err(err)?;
        Ok(Dataset {
            config,
            train: ds.train,
            test: ds.test,
        })
    }

    #[pyo3(signature = (split="train"))]
    fn size(&self, split: &str) -> PyResult<usize> {
        Ok(self.split(split)?.len())
    }

    #[pyo3(signature = (index, split="train"))]
    fn caption(&self, index: usize, split: &str) -> PyResult<Vec<usize>> {
        Ok(self.example(split, index)?.caption.clone())
    }

    #[pyo3(signature = (index, split="train"))]
    fn caption_text(&self, index: usize, split: &str) -> PyResult<String> {
        Ok(self.config.vocab().decode(&self.example(split, index)?.caption))
    }

    #[pyo3(signature = (index, split="train"))]
    fn features(&self, index: usize, split: &str) -> PyResult<Vec<Vec<f64>>> {
        Ok(rows(&self.example(split, index)?.features.tokens))
    }

    #[pyo3(signature = (index, split="train"))]
    fn scene_classes(&self, index: usize, split: &str) -> PyResult<Vec<usize>> {
        Ok(self.example(split, index)?.scene.class_ids())
    }

    fn vocab(&self) -> Vec<String> {
        let v = self.config.vocab();
        (0..v.len()).map(|i| v.token(i).unwrap_or_default().to_string()).collect()
    }
}

fn rows(a: &Array2<f64>) -> Vec<Vec<f64>> {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn matrix(v: Vec<Vec<f64>>) -> PyResult<Array2<f64>> {
    let n = v.len();
    let d = v.first().map_or(0, Vec::len);
    let flat: Vec<f64> = v.into_iter().flatten().collect();
    Array2::from_shape_vec((n, d), flat).map_err(|_| err(eosbench::Error::Config("ragged matrix".into())))
}

/// A tiny captioning transformer.
#[pyclass(module = "pyeosbench")]
struct Model {
    params: Params,
}

#[pymethods]
impl Model {
    /// Fresh weights sized for `dataset`; layer sizes from a model config (TOML).
    #[new]
    #[pyo3(signature = (dataset, seed=0, model_toml=None))]
    fn new(dataset: &Dataset, seed: u64, model_toml: Option<&str>) -> PyResult<Self> {
        let base: ModelConfig = config(model_toml)?;
        let cfg = ModelConfig {
            feature_dim: dataset.config.perception.feature_dim,
            scene_slots: dataset.config.perception.scene_slots,
            vocab_size: dataset.config.vocab().len(),
            ..base
        };
        Ok(Model {
            params: tinylm::init_params(&cfg, seed).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Model {
            params: Checkpoint::load(&path).map_err(err)?.params,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        Checkpoint::new(self.params.clone()).save(&path).map_err(err)
    }

    fn num_params(&self) -> usize {
        self.params.num_params()
    }

    /// Trains in place on the training split; returns per-step losses.
    #[pyo3(signature = (dataset, objective="mle", seed=0, train_toml=None, combine_ratio=1.0))]
    fn train(
        &mut self,
        py: Python<'_>,
        dataset: &Dataset,
        objective: &str,
        seed: u64,
        train_toml: Option<&str>,
        combine_ratio: f64,
    ) -> PyResult<Vec<f64>> {
        let spec = self::objective(objective, combine_ratio)?;
        let cfg: train_mod::TrainConfig = config(train_toml)?;
        let params = &mut self.params;
        let log = py
            .detach(|| train_mod::train(params, &dataset.train, &spec, &cfg, seed, &[]))
            .map_err(err)?;
        Ok(log.losses)
    }

    /// Greedy caption for one feature grid.
    #[pyo3(signature = (features, max_new_tokens=64, length_penalty=0.0))]
    fn generate(&self, features: Vec<Vec<f64>>, max_new_tokens: usize, length_penalty: f64) -> PyResult<Vec<usize>> {
        let dcfg = DecodeConfig {
            max_new_tokens,
            length_penalty,
        };
        tinylm::generate(&self.params, &matrix(features)?, &dcfg).map_err(err)
    }

    /// `(s_pos, s_neg, s_final)` for every training example.
    fn score(&self, py: Python<'_>, dataset: &Dataset) -> PyResult<Vec<(f64, f64, f64)>> {
        let scores = py
            .detach(|| scoring::score_dataset(&self.params, &dataset.train))
            .map_err(err)?;
        Ok(scores.iter().map(|s| (s.s_pos, s.s_neg, s.s_final)).collect())
    }

    /// CHAIR metrics of greedy captions over the test split.
    fn evaluate(&self, py: Python<'_>, dataset: &Dataset) -> PyResult<(f64, f64, f64, f64)> {
        let (r, _) = py
            .detach(|| {
                run_mod::evaluate_model(&self.params, &dataset.test, &dataset.config, &DecodeConfig::default())
            })
            .map_err(err)?;
        Ok((r.chair_s, r.chair_i, r.recall, r.mean_length))
    }

    /// Mean p_EOS by relative-position bucket after periods, under one manipulation mode.
    #[pyo3(signature = (dataset, mode="none", n_examples=100, seed=0))]
    fn tendency(&self, dataset: &Dataset, mode: &str, n_examples: usize, seed: u64) -> PyResult<Vec<(f64, f64)>> {
        let mode = probes::ManipulationMode::ALL
            .into_iter()
            .find(|m| m.name() == mode)
            .ok_or_else(|| err(eosbench::Error::Config(format!("unknown manipulation {mode:?}"))))?;
        let m = probes::Manipulation {
            aux_seed: seed,
            ..probes::Manipulation::new(mode)
        };
        let ex = &dataset.test[..n_examples.min(dataset.test.len())];
        let c = probes::tendency_curve(&self.params, ex, &m).map_err(err)?;
        Ok(c.points.iter().map(|p| (p.x, p.mean_p_eos)).collect())
    }

    /// Per-layer (scene, previous, current) saliency shares for predicting `caption[target]`.
    #[pyo3(signature = (dataset, index, target=None))]
    fn flow(&self, dataset: &Dataset, index: usize, target: Option<usize>) -> PyResult<Vec<[f64; 3]>> {
        let ex = dataset.example("test", index)?;
        let t = target.unwrap_or(ex.caption.len() - 1);
        let rep = probes::saliency(&self.params, ex, t).map_err(err)?;
        Ok(probes::flow_proportions(&rep))
    }
}

/// `(mean loss, per-position terms, dloss/dlogits)` for one sequence.
#[pyfunction]
#[pyo3(signature = (logits, labels, objective="mle", eos=Vocab::EOS))]
fn loss(
    logits: Vec<Vec<f64>>,
    labels: Vec<usize>,
    objective: &str,
    eos: usize,
) -> PyResult<(f64, Vec<f64>, Vec<Vec<f64>>)> {
    let handle = match objective {
        "mle" => ObjectiveHandle::Mle,
        "selective" => ObjectiveHandle::Selective { eos },
        other => return Err(err(eosbench::Error::Config(format!("unknown objective {other:?}")))),
    };
    let out = handle.evaluate(&matrix(logits)?, &labels).map_err(err)?;
    Ok((out.loss, out.terms, rows(&out.dlogits)))
}

#[pyfunction]
#[pyo3(signature = (labels, p_eos, eos=Vocab::EOS))]
fn score_from_probs(labels: Vec<usize>, p_eos: Vec<f64>, eos: usize) -> PyResult<(f64, f64, f64)> {
    let s = scoring::score_from_probs(&labels, &p_eos, eos).map_err(err)?;
    Ok((s.s_pos, s.s_neg, s.s_final))
}

/// Indices removed by a filter plan over `s_final` values.
#[pyfunction]
#[pyo3(signature = (s_final, mode="top", ratio=0.2, seed=0))]
fn filter_indices(s_final: Vec<f64>, mode: &str, ratio: f64, seed: u64) -> PyResult<Vec<usize>> {
    let mode = match mode {
        "top" => scoring::FilterMode::Top,
        "random" => scoring::FilterMode::Random,
        "reversed" => scoring::FilterMode::Reversed,
        other => return Err(err(eosbench::Error::Config(format!("unknown filter mode {other:?}")))),
    };
    let scores: Vec<scoring::ScoreTriple> = s_final
        .iter()
        .map(|&f| scoring::ScoreTriple {
            s_pos: 0.0,
            s_neg: f,
            s_final: f,
        })
        .collect();
    let plan = scoring::FilterPlan {
        mode,
        ratio,
        seed,
        ..Default::default()
    };
    scoring::removed_indices(&scores, &plan).map_err(err)
}

/// `(chair_s, chair_i, recall, mean_length)` for token captions against scene class lists.
#[pyfunction]
fn chair(captions: Vec<Vec<usize>>, scenes: Vec<Vec<usize>>, n_classes: usize, n_attributes: usize) -> PyResult<(f64, f64, f64, f64)> {
    let scenes: Vec<scenegen::Scene> = scenes
        .into_iter()
        .map(|classes| scenegen::Scene {
            objects: classes
                .into_iter()
                .map(|class_id| scenegen::ObjectInstance {
                    class_id,
                    attributes: vec![],
                    salience: 1.0,
                })
                .collect(),
            seed: 0,
        })
        .collect();
    let r = hallmetrics::chair_eval(&captions, &scenes, &Vocab::new(n_classes, n_attributes)).map_err(err)?;
    Ok((r.chair_s, r.chair_i, r.recall, r.mean_length))
}

/// Executes a run config (TOML, as for the CLI); returns the artifact paths.
#[pyfunction]
fn run(py: Python<'_>, config_toml: &str) -> PyResult<Vec<PathBuf>> {
    let cfg = run_mod::RunConfig::from_toml(config_toml).map_err(err)?;
    let outcomes = py.detach(|| run_mod::run(&cfg)).map_err(err)?;
    Ok(outcomes
        .iter()
        .flat_map(|o| o.artifacts.iter().map(move |a| o.dir.join(a)))
        .collect())
}

#[pymodule]
pub fn pyeosbench(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("EosbenchError", m.py().get_type::<EosbenchError>())?;
    m.add("EOS", Vocab::EOS)?;
    m.add("BOS", Vocab::BOS)?;
    m.add_class::<Dataset>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(loss, m)?)?;
    m.add_function(wrap_pyfunction!(score_from_probs, m)?)?;
    m.add_function(wrap_pyfunction!(filter_indices, m)?)?;
    m.add_function(wrap_pyfunction!(chair, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    Ok(())
}
