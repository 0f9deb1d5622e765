//! Synthetic scenes, perception-limited feature rendering, and templated captions.
//!
//! A scene is a handful of objects, each with a class, some attributes, and a
//! salience in `[0, 1]`. Rendering turns the scene into a fixed number of
//! feature rows; objects below the perception threshold (and empty slots)
//! become pure noise. Captions are sequences of `a <attr>* <class> .`
//! sentences, ordered by decreasing salience, terminated by a single EOS.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

// Independent RNG streams derived from one seed.
const STREAM_SCENE: u64 = 1;
const STREAM_NOISE: u64 = 2;
const STREAM_CAPTION: u64 = 3;
const STREAM_MIXTURE: u64 = 4;
const STREAM_EMBED: u64 = 5;

pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const CLASS_WORDS: &[&str] = &[
    "cube", "ball", "cone", "ring", "star", "disk", "lamp", "vase", "book", "cup", "shoe", "bell",
    "kite", "drum", "fork", "key", "leaf", "bowl", "coin", "flag", "hat", "sock", "tent", "wand",
    "boat", "car", "tree", "bird", "fish", "frog", "apple", "pear", "clock", "chair", "table",
    "sofa", "plate", "spoon", "knife", "bottle", "candle", "mirror", "pillow", "rope",
];

const ATTRIBUTE_WORDS: &[&str] = &[
    "red", "blue", "green", "yellow", "purple", "orange", "white", "black", "small", "large",
    "striped", "dotted", "shiny", "matte", "wooden", "metal",
];

/// Token inventory: four specials, one token per object class, one per attribute.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    lookup: HashMap<String, usize>,
    n_classes: usize,
    n_attributes: usize,
}

impl Vocab {
    pub const BOS: usize = 0;
    pub const EOS: usize = 1;
    pub const PERIOD: usize = 2;
    pub const ARTICLE: usize = 3;
    const FIRST_CLASS: usize = 4;

    pub fn new(n_classes: usize, n_attributes: usize) -> Self {
        let mut tokens: Vec<String> = ["<bos>", "<eos>", ".", "a"].iter().map(|s| s.to_string()).collect();
        for c in 0..n_classes {
            tokens.push(CLASS_WORDS.get(c).map_or_else(|| format!("object{c}"), |w| w.to_string()));
        }
        for a in 0..n_attributes {
            tokens.push(ATTRIBUTE_WORDS.get(a).map_or_else(|| format!("attr{a}"), |w| w.to_string()));
        }
        let lookup = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocab {
            tokens,
            lookup,
            n_classes,
            n_attributes,
        }
    }

    pub fn from_scene_config(cfg: &SceneConfig) -> Self {
        Self::new(cfg.n_classes, cfg.n_attributes)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn n_attributes(&self) -> usize {
        self.n_attributes
    }

    pub fn token(&self, index: usize) -> Option<&str> {
        self.tokens.get(index).map(String::as_str)
    }

    pub fn index(&self, token: &str) -> Option<usize> {
        self.lookup.get(token).copied()
    }

    pub fn class_token(&self, class_id: usize) -> Option<usize> {
        (class_id < self.n_classes).then_some(Self::FIRST_CLASS + class_id)
    }

    pub fn attribute_token(&self, attr_id: usize) -> Option<usize> {
        (attr_id < self.n_attributes).then_some(Self::FIRST_CLASS + self.n_classes + attr_id)
    }

    /// Object class named by `token`, if it is an object word.
    pub fn token_class(&self, token: usize) -> Option<usize> {
        (Self::FIRST_CLASS..Self::FIRST_CLASS + self.n_classes)
            .contains(&token)
            .then(|| token - Self::FIRST_CLASS)
    }

    pub fn is_attribute_token(&self, token: usize) -> bool {
        let start = Self::FIRST_CLASS + self.n_classes;
        (start..start + self.n_attributes).contains(&token)
    }

    /// Whitespace-separated rendering, e.g. `<bos> a red cube . <eos>`.
    pub fn decode(&self, tokens: &[usize]) -> String {
        tokens
            .iter()
            .map(|&t| self.token(t).unwrap_or("<unk>"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Inverse of [`Vocab::decode`]; unknown words are an error.
    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace()
            .map(|w| {
                self.index(w)
                    .ok_or_else(|| Error::Generation(format!("word {w:?} not in vocabulary")))
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectInstance {
    pub class_id: usize,
    pub attributes: Vec<usize>,
    pub salience: f64,
}

/// Objects are kept in decreasing-salience order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub objects: Vec<ObjectInstance>,
    pub seed: u64,
}

impl Scene {
    pub fn class_ids(&self) -> Vec<usize> {
        self.objects.iter().map(|o| o.class_id).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub n_classes: usize,
    pub n_attributes: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_attributes: usize,
    pub max_attributes: usize,
    /// Salience is drawn from `Uniform[salience_low, salience_high)`.
    pub salience_low: f64,
    pub salience_high: f64,
    /// Lower bound on the salience of each scene's first object, so every scene
    /// has a main subject. Must lie in `[salience_low, salience_high]`.
    pub subject_salience_low: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            n_classes: 44,
            n_attributes: 16,
            min_objects: 1,
            max_objects: 5,
            min_attributes: 0,
            max_attributes: 1,
            salience_low: 0.0,
            salience_high: 1.0,
            subject_salience_low: 0.5,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("scene: {m}")));
        if self.n_classes == 0 {
            return bad("n_classes must be >= 1");
        }
        if self.min_objects > self.max_objects {
            return bad("min_objects > max_objects");
        }
        if self.max_objects > self.n_classes {
            return bad("max_objects exceeds n_classes (classes within a scene are distinct)");
        }
        if self.min_attributes > self.max_attributes {
            return bad("min_attributes > max_attributes");
        }
        if self.max_attributes > self.n_attributes {
            return bad("max_attributes exceeds n_attributes");
        }
        if !(0.0..=1.0).contains(&self.salience_low)
            || !(0.0..=1.0).contains(&self.salience_high)
            || self.salience_low > self.salience_high
        {
            return bad("salience range must satisfy 0 <= low <= high <= 1");
        }
        if !(self.salience_low..=self.salience_high).contains(&self.subject_salience_low) {
            return bad("subject_salience_low must lie in [salience_low, salience_high]");
        }
        Ok(())
    }
}

fn sample_attributes(rng: &mut ChaCha8Rng, cfg: &SceneConfig) -> Vec<usize> {
    let k = rng.random_range(cfg.min_attributes..=cfg.max_attributes);
    let mut attrs = sample(rng, cfg.n_attributes, k).into_vec();
    attrs.sort_unstable();
    attrs
}

pub fn gen_scene(seed: u64, cfg: &SceneConfig) -> Result<Scene> {
    cfg.validate()?;
    let mut rng = stream_rng(seed, STREAM_SCENE);
    let n = rng.random_range(cfg.min_objects..=cfg.max_objects);
    let classes = sample(&mut rng, cfg.n_classes, n).into_vec();
    let mut objects: Vec<ObjectInstance> = classes
        .into_iter()
        .enumerate()
        .map(|(i, class_id)| {
            let attributes = sample_attributes(&mut rng, cfg);
            let low = if i == 0 { cfg.subject_salience_low } else { cfg.salience_low };
            let salience = if cfg.salience_high > low {
                rng.random_range(low..cfg.salience_high)
            } else {
                low
            };
            ObjectInstance {
                class_id,
                attributes,
                salience,
            }
        })
        .collect();
    objects.sort_by(|a, b| b.salience.total_cmp(&a.salience));
    Ok(Scene { objects, seed })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerceptionConfig {
    /// Objects with salience below this are not perceivable.
    pub threshold: f64,
    pub scene_slots: usize,
    pub feature_dim: usize,
    /// Noise added to informative rows.
    pub signal_noise: f64,
    /// Per-entry std of the Gaussian rows that replace imperceptible objects and empty slots.
    pub degraded_scale: f64,
    /// Seed of the fixed class/attribute embedding tables.
    pub embed_seed: u64,
}

impl Default for PerceptionConfig {
    fn default() -> Self {
        PerceptionConfig {
            threshold: 0.5,
            scene_slots: 5,
            feature_dim: 32,
            signal_noise: 0.05,
            degraded_scale: 0.05,
            embed_seed: 17,
        }
    }
}

impl PerceptionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Config("perception: threshold must lie in [0, 1]".into()));
        }
        if self.scene_slots == 0 || self.feature_dim == 0 {
            return Err(Error::Config("perception: scene_slots and feature_dim must be >= 1".into()));
        }
        if self.signal_noise < 0.0 || self.degraded_scale < 0.0 {
            return Err(Error::Config("perception: noise scales must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    pub tokens: Array2<f64>,
    pub perceivable_mask: Vec<bool>,
}

impl FeatureGrid {
    pub fn n_slots(&self) -> usize {
        self.tokens.nrows()
    }
}

/// Fixed embedding tables the renderer draws informative rows from.
#[derive(Debug, Clone)]
pub struct FeatureTables {
    class: Array2<f64>,
    attribute: Array2<f64>,
    salience_dir: Array1<f64>,
}

impl FeatureTables {
    pub fn new(scene: &SceneConfig, pcfg: &PerceptionConfig) -> Self {
        let d = pcfg.feature_dim;
        let mut rng = stream_rng(pcfg.embed_seed, STREAM_EMBED);
        let normal = Normal::new(0.0, 1.0 / (d as f64).sqrt()).expect("valid std");
        let mut draw = |rows: usize| Array2::from_shape_fn((rows, d), |_| normal.sample(&mut rng));
        let class = draw(scene.n_classes);
        let attribute = draw(scene.n_attributes).mapv(|x| 0.5 * x);
        let salience_dir = draw(1).row(0).to_owned();
        FeatureTables {
            class,
            attribute,
            salience_dir,
        }
    }

    fn informative_row(&self, obj: &ObjectInstance) -> Array1<f64> {
        let mut row = self.class.row(obj.class_id).to_owned();
        for &a in &obj.attributes {
            row += &self.attribute.row(a);
        }
        row.scaled_add(obj.salience, &self.salience_dir);
        row
    }
}

pub fn render_features(scene: &Scene, scfg: &SceneConfig, pcfg: &PerceptionConfig) -> Result<FeatureGrid> {
    render_with_tables(scene, &FeatureTables::new(scfg, pcfg), pcfg)
}

pub fn render_with_tables(scene: &Scene, tables: &FeatureTables, pcfg: &PerceptionConfig) -> Result<FeatureGrid> {
    pcfg.validate()?;
    if scene.objects.len() > pcfg.scene_slots {
        return Err(Error::Config(format!(
            "scene has {} objects but only {} slots",
            scene.objects.len(),
            pcfg.scene_slots
        )));
    }
    let d = pcfg.feature_dim;
    let mut rng = stream_rng(scene.seed, STREAM_NOISE);
    let signal = Normal::new(0.0, pcfg.signal_noise).map_err(|e| Error::Config(e.to_string()))?;
    let degraded = Normal::new(0.0, pcfg.degraded_scale).map_err(|e| Error::Config(e.to_string()))?;
    let mut tokens = Array2::zeros((pcfg.scene_slots, d));
    let mut mask = vec![false; pcfg.scene_slots];
    for (slot, seen) in mask.iter_mut().enumerate() {
        let mut row = tokens.row_mut(slot);
        match scene.objects.get(slot) {
            Some(obj) if obj.salience >= pcfg.threshold => {
                let base = tables.informative_row(obj);
                for (r, b) in row.iter_mut().zip(base.iter()) {
                    *r = b + signal.sample(&mut rng);
                }
                *seen = true;
            }
            _ => row.iter_mut().for_each(|r| *r = degraded.sample(&mut rng)),
        }
    }
    Ok(FeatureGrid {
        tokens,
        perceivable_mask: mask,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetailLevel {
    PerceivableOnly,
    Full,
    OverDetailed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CaptionConfig {
    /// Absent-object sentences added under `over_detailed`, drawn uniformly from this range.
    pub min_distractors: usize,
    pub max_distractors: usize,
    /// Insert distractors at random sentence boundaries rather than after the real objects.
    pub interleave_distractors: bool,
}

impl Default for CaptionConfig {
    fn default() -> Self {
        CaptionConfig {
            min_distractors: 1,
            max_distractors: 2,
            interleave_distractors: true,
        }
    }
}

fn push_sentence(out: &mut Vec<usize>, vocab: &Vocab, class_id: usize, attributes: &[usize]) -> Result<()> {
    out.push(Vocab::ARTICLE);
    for &a in attributes {
        out.push(
            vocab
                .attribute_token(a)
                .ok_or_else(|| Error::Generation(format!("attribute {a} has no token")))?,
        );
    }
    out.push(
        vocab
            .class_token(class_id)
            .ok_or_else(|| Error::Generation(format!("class {class_id} has no token")))?,
    );
    out.push(Vocab::PERIOD);
    Ok(())
}

/// Templated caption for `scene` at the requested detail level.
pub fn gen_caption(
    scene: &Scene,
    level: DetailLevel,
    vocab: &Vocab,
    scfg: &SceneConfig,
    pcfg: &PerceptionConfig,
    ccfg: &CaptionConfig,
) -> Result<Vec<usize>> {
    if ccfg.min_distractors > ccfg.max_distractors {
        return Err(Error::Config("caption: min_distractors > max_distractors".into()));
    }
    let mut sentences: Vec<(usize, &[usize])> = scene
        .objects
        .iter()
        .filter(|o| level != DetailLevel::PerceivableOnly || o.salience >= pcfg.threshold)
        .map(|o| (o.class_id, o.attributes.as_slice()))
        .collect();
    let mut extra = Vec::new();
    let mut rng = stream_rng(scene.seed, STREAM_CAPTION);
    if level == DetailLevel::OverDetailed {
        let k = rng.random_range(ccfg.min_distractors..=ccfg.max_distractors);
        let present = scene.class_ids();
        let absent: Vec<usize> = (0..vocab.n_classes()).filter(|c| !present.contains(c)).collect();
        let k = k.min(absent.len());
        for i in sample(&mut rng, absent.len(), k) {
            extra.push((absent[i], sample_attributes(&mut rng, scfg)));
        }
    }
    for (class_id, attrs) in &extra {
        let at = if ccfg.interleave_distractors {
            rng.random_range(0..=sentences.len())
        } else {
            sentences.len()
        };
        sentences.insert(at, (*class_id, attrs.as_slice()));
    }
    let mut out = vec![Vocab::BOS];
    for (class_id, attrs) in sentences {
        push_sentence(&mut out, vocab, class_id, attrs)?;
    }
    out.push(Vocab::EOS);
    Ok(out)
}

/// One training/evaluation record. Features are derived, never serialized.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub scene: Scene,
    pub features: FeatureGrid,
    pub caption: Vec<usize>,
    pub labels: Vec<usize>,
    pub detail_level: DetailLevel,
}

impl Example {
    pub fn new(scene: Scene, features: FeatureGrid, caption: Vec<usize>, detail_level: DetailLevel) -> Self {
        let labels = caption.iter().skip(1).copied().collect();
        Example {
            scene,
            features,
            caption,
            labels,
            detail_level,
        }
    }

    /// Model input: every caption token except the last.
    pub fn inputs(&self) -> &[usize] {
        &self.caption[..self.caption.len().saturating_sub(1)]
    }

    pub fn n_sentences(&self) -> usize {
        self.caption.iter().filter(|&&t| t == Vocab::PERIOD).count()
    }
}

/// Relative weights of the three detail levels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetailMixture {
    pub perceivable_only: f64,
    pub full: f64,
    pub over_detailed: f64,
}

impl Default for DetailMixture {
    fn default() -> Self {
        DetailMixture {
            perceivable_only: 0.3,
            full: 0.3,
            over_detailed: 0.4,
        }
    }
}

impl DetailMixture {
    fn validate(&self) -> Result<()> {
        let w = [self.perceivable_only, self.full, self.over_detailed];
        if w.iter().any(|&x| !x.is_finite() || x < 0.0) || w.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Config("mixture weights must be >= 0 with a positive sum".into()));
        }
        Ok(())
    }

    fn draw(&self, seed: u64) -> DetailLevel {
        let total = self.perceivable_only + self.full + self.over_detailed;
        let u = stream_rng(seed, STREAM_MIXTURE).random::<f64>() * total;
        if u < self.perceivable_only {
            DetailLevel::PerceivableOnly
        } else if u < self.perceivable_only + self.full || self.over_detailed == 0.0 {
            DetailLevel::Full
        } else {
            DetailLevel::OverDetailed
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub scene: SceneConfig,
    pub perception: PerceptionConfig,
    pub caption: CaptionConfig,
    pub mixture: DetailMixture,
    /// Mixture applied to the test split; defaults to the training mixture when absent.
    pub test_mixture: Option<DetailMixture>,
    pub train_size: usize,
    pub test_size: usize,
    pub train_seed_start: u64,
    pub test_seed_start: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            scene: SceneConfig::default(),
            perception: PerceptionConfig::default(),
            caption: CaptionConfig::default(),
            mixture: DetailMixture::default(),
            test_mixture: None,
            train_size: 6000,
            test_size: 500,
            train_seed_start: 0,
            test_seed_start: 1_000_000,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.perception.validate()?;
        self.mixture.validate()?;
        if let Some(m) = &self.test_mixture {
            m.validate()?;
        }
        if self.scene.max_objects > self.perception.scene_slots {
            return Err(Error::Config("max_objects exceeds scene_slots".into()));
        }
        if self.train_size == 0 || self.test_size == 0 {
            return Err(Error::Config("dataset sizes must be > 0".into()));
        }
        let (a0, a1) = (self.train_seed_start, self.train_seed_start + self.train_size as u64);
        let (b0, b1) = (self.test_seed_start, self.test_seed_start + self.test_size as u64);
        if a0 < b1 && b0 < a1 {
            return Err(Error::Config(format!(
                "train seeds [{a0}, {a1}) overlap test seeds [{b0}, {b1})"
            )));
        }
        Ok(())
    }

    pub fn vocab(&self) -> Vocab {
        Vocab::from_scene_config(&self.scene)
    }

    /// Deterministically builds one example from its scene seed.
    pub fn example(&self, seed: u64, mixture: &DetailMixture, vocab: &Vocab, tables: &FeatureTables) -> Result<Example> {
        let scene = gen_scene(seed, &self.scene)?;
        let level = mixture.draw(seed);
        self.example_for(scene, level, vocab, tables)
    }

    pub fn example_for(&self, scene: Scene, level: DetailLevel, vocab: &Vocab, tables: &FeatureTables) -> Result<Example> {
        let features = render_with_tables(&scene, tables, &self.perception)?;
        let caption = gen_caption(&scene, level, vocab, &self.scene, &self.perception, &self.caption)?;
        Ok(Example::new(scene, features, caption, level))
    }

    pub fn tables(&self) -> FeatureTables {
        FeatureTables::new(&self.scene, &self.perception)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<Example>,
    pub test: Vec<Example>,
}

pub fn build_dataset(dcfg: &DatasetConfig) -> Result<Dataset> {
    dcfg.validate()?;
    let vocab = dcfg.vocab();
    let tables = dcfg.tables();
    let split = |start: u64, size: usize, mixture: &DetailMixture| -> Result<Vec<Example>> {
        (0..size as u64)
            .map(|i| dcfg.example(start + i, mixture, &vocab, &tables))
            .collect()
    };
    let test_mixture = dcfg.test_mixture.as_ref().unwrap_or(&dcfg.mixture);
    Ok(Dataset {
        train: split(dcfg.train_seed_start, dcfg.train_size, &dcfg.mixture)?,
        test: split(dcfg.test_seed_start, dcfg.test_size, test_mixture)?,
    })
}

/// Line format of the dataset files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleRecord {
    pub seed: u64,
    pub detail_level: DetailLevel,
    pub objects: Vec<ObjectInstance>,
    pub caption: Vec<usize>,
}

impl From<&Example> for ExampleRecord {
    fn from(ex: &Example) -> Self {
        ExampleRecord {
            seed: ex.scene.seed,
            detail_level: ex.detail_level,
            objects: ex.scene.objects.clone(),
            caption: ex.caption.clone(),
        }
    }
}

pub fn write_examples(path: &Path, examples: &[Example]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for ex in examples {
        serde_json::to_writer(&mut w, &ExampleRecord::from(ex))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads records back, re-rendering feature grids from `dcfg`.
pub fn read_examples(path: &Path, dcfg: &DatasetConfig) -> Result<Vec<Example>> {
    let tables = dcfg.tables();
    let vocab = dcfg.vocab();
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ExampleRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
        if let Some(&bad) = rec.caption.iter().find(|&&t| t >= vocab.len()) {
            return Err(Error::Format(format!(
                "{}:{}: token {bad} outside vocabulary of {}",
                path.display(),
                lineno + 1,
                vocab.len()
            )));
        }
        let scene = Scene {
            objects: rec.objects,
            seed: rec.seed,
        };
        let features = render_with_tables(&scene, &tables, &dcfg.perception)?;
        out.push(Example::new(scene, features, rec.caption, rec.detail_level));
    }
    Ok(out)
}
