//! Read-only instruments: attention saliency flow and EOS tendency under
//! context manipulation.

use std::ops::Range;

use ndarray::{Array2, Axis};
use rand::seq::IndexedRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scenegen::{stream_rng, Example, Vocab};
use crate::tinylm::{backward, eos_probability, forward, forward_with, log_sum_exp, ForwardOptions, Params};

const STREAM_TARGET: u64 = 41;
const STREAM_MANIPULATE: u64 = 42;

/// Context-index ranges of the three segments feeding a prediction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segments {
    pub slots: Range<usize>,
    pub previous: Range<usize>,
    pub current: Range<usize>,
}

/// Splits `n_text` input tokens into previous sentences and the current one.
/// Sentences end at a period; BOS belongs to the first. A trailing partial
/// sentence is the current one; when the input ends on a period the last
/// completed sentence is.
pub fn segment(tokens: &[usize], n_slots: usize) -> Segments {
    let n = tokens.len();
    let last_period = tokens.iter().rposition(|&t| t == Vocab::PERIOD);
    let start = match last_period {
        Some(p) if p + 1 < n => p + 1,
        Some(p) => tokens[..p].iter().rposition(|&t| t == Vocab::PERIOD).map_or(0, |q| q + 1),
        None => 0,
    };
    Segments {
        slots: 0..n_slots,
        previous: n_slots..n_slots + start,
        current: n_slots + start..n_slots + n,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyReport {
    /// `layers[l]` is `mean_h |A ⊙ ∂L/∂A|`, `[ctx × ctx]`.
    pub layers: Vec<Array2<f64>>,
    pub segments: Segments,
    /// Caption index of the predicted token.
    pub target_pos: usize,
    pub target_token: usize,
    /// Context row whose output predicts the target.
    pub row: usize,
    /// Input tokens (the caption before the target).
    pub tokens: Vec<usize>,
    pub n_slots: usize,
}

/// Saliency of every attention entry for predicting `caption[target_pos]`
/// from the tokens before it.
pub fn saliency(params: &Params, example: &Example, target_pos: usize) -> Result<SaliencyReport> {
    let len = example.caption.len();
    if target_pos == 0 || target_pos >= len {
        return Err(Error::Target { target: target_pos, len });
    }
    let tokens = &example.caption[..target_pos];
    let target = example.caption[target_pos];
    let trace = forward(params, &example.features.tokens, tokens)?;
    let n = tokens.len();
    let mut dlogits = Array2::zeros(trace.logits.raw_dim());
    let last = trace.logits.row(n - 1);
    let lse = log_sum_exp(last.iter().copied());
    for (d, &z) in dlogits.row_mut(n - 1).iter_mut().zip(last.iter()) {
        *d = (z - lse).exp();
    }
    dlogits[[n - 1, target]] -= 1.0;
    let out = backward(params, &trace, &dlogits);
    let layers = trace
        .attn
        .iter()
        .zip(&out.d_attn)
        .map(|(heads, grads)| {
            let mut acc = Array2::<f64>::zeros(heads[0].raw_dim());
            for (a, g) in heads.iter().zip(grads) {
                acc.zip_mut_with(&(a * g), |s, &v| *s += v.abs());
            }
            acc / heads.len() as f64
        })
        .collect();
    Ok(SaliencyReport {
        layers,
        segments: segment(tokens, trace.n_slots),
        target_pos,
        target_token: target,
        row: trace.n_slots + n - 1,
        tokens: tokens.to_vec(),
        n_slots: trace.n_slots,
    })
}

/// Per-layer share of the flow into the target row from (scene, previous sentences, current sentence).
pub fn flow_proportions(report: &SaliencyReport) -> Vec<[f64; 3]> {
    let seg = &report.segments;
    report
        .layers
        .iter()
        .map(|m| {
            let row = m.row(report.row);
            let sum = |r: &Range<usize>| row.slice(ndarray::s![r.clone()]).sum();
            let parts = [sum(&seg.slots), sum(&seg.previous), sum(&seg.current)];
            normalize(parts)
        })
        .collect()
}

fn normalize(parts: [f64; 3]) -> [f64; 3] {
    let total: f64 = parts.iter().sum();
    if total > 0.0 {
        parts.map(|p| p / total)
    } else {
        [0.0; 3]
    }
}

/// Per-layer (others → periods, periods → target, among others), each the mean
/// flow over its pairs and normalized across the three. Only text positions take part.
pub fn aggregation_pattern(report: &SaliencyReport) -> Vec<[f64; 3]> {
    let s = report.n_slots;
    let t = report.row - s;
    let periods: Vec<usize> = (0..report.tokens.len())
        .filter(|&i| i != t && report.tokens[i] == Vocab::PERIOD)
        .collect();
    let others: Vec<usize> = (0..report.tokens.len())
        .filter(|&i| i != t && report.tokens[i] != Vocab::PERIOD)
        .collect();
    let mean = |v: &mut dyn Iterator<Item = f64>| {
        let (sum, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
        if n > 0 {
            sum / n as f64
        } else {
            0.0
        }
    };
    report
        .layers
        .iter()
        .map(|m| {
            let to_periods = mean(
                &mut periods
                    .iter()
                    .flat_map(|&p| others.iter().filter(move |&&j| j < p).map(move |&j| m[[s + p, s + j]])),
            );
            let to_target = mean(&mut periods.iter().map(|&p| m[[s + t, s + p]]));
            let among = mean(
                &mut others
                    .iter()
                    .flat_map(|&i| others.iter().filter(move |&&j| j < i).map(move |&j| m[[s + i, s + j]])),
            );
            normalize([to_periods, to_target, among])
        })
        .collect()
}

/// Per-layer means over a probe sample: flow proportions for EOS and non-EOS
/// targets, and the aggregation pattern for EOS targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowSummary {
    pub n_examples: usize,
    pub eos: Vec<[f64; 3]>,
    pub non_eos: Vec<[f64; 3]>,
    pub aggregation: Vec<[f64; 3]>,
}

impl FlowSummary {
    /// Mean previous-sentence proportion over the top-quartile layers, `(eos, non_eos)`.
    pub fn top_quartile_previous(&self) -> (f64, f64) {
        let top = top_quartile_layers(self.eos.len());
        let mean = |v: &[[f64; 3]]| top.clone().map(|l| v[l][1]).sum::<f64>() / top.len() as f64;
        (mean(&self.eos), mean(&self.non_eos))
    }
}

/// Saliency over every example, targeting the EOS label and one sampled
/// non-EOS token of the last sentence.
pub fn flow_summary(params: &Params, examples: &[Example], seed: u64) -> Result<FlowSummary> {
    if examples.is_empty() {
        return Err(Error::Config("flow_summary: empty dataset".into()));
    }
    let n_layers = params.config.n_layers;
    let mut eos = vec![[0.0; 3]; n_layers];
    let mut non_eos = vec![[0.0; 3]; n_layers];
    let mut aggregation = vec![[0.0; 3]; n_layers];
    let add = |acc: &mut Vec<[f64; 3]>, v: Vec<[f64; 3]>| {
        for (a, x) in acc.iter_mut().zip(v) {
            for k in 0..3 {
                a[k] += x[k];
            }
        }
    };
    for (i, ex) in examples.iter().enumerate() {
        let r = saliency(params, ex, ex.caption.len() - 1).map_err(|e| Error::at(i, e))?;
        add(&mut eos, flow_proportions(&r));
        add(&mut aggregation, aggregation_pattern(&r));
        let target = sample_non_eos_target(ex, seed.wrapping_mul(1_000_003).wrapping_add(i as u64))
            .map_err(|e| Error::at(i, e))?;
        let r = saliency(params, ex, target).map_err(|e| Error::at(i, e))?;
        add(&mut non_eos, flow_proportions(&r));
    }
    let n = examples.len() as f64;
    let mean = |v: Vec<[f64; 3]>| v.into_iter().map(|t| t.map(|x| x / n)).collect();
    Ok(FlowSummary {
        n_examples: examples.len(),
        eos: mean(eos),
        non_eos: mean(non_eos),
        aggregation: mean(aggregation),
    })
}

/// Layers in the top quartile (at least one).
pub fn top_quartile_layers(n_layers: usize) -> Range<usize> {
    n_layers - n_layers.div_ceil(4)..n_layers
}

/// Picks a non-EOS target uniformly among the last (up to 10) tokens of the
/// caption's last sentence.
pub fn sample_non_eos_target(example: &Example, seed: u64) -> Result<usize> {
    let body_end = example.caption.len() - 1;
    if body_end < 1 {
        return Err(Error::Target {
            target: 1,
            len: example.caption.len(),
        });
    }
    let prev_period = example.caption[..body_end - 1]
        .iter()
        .rposition(|&t| t == Vocab::PERIOD)
        .map_or(1, |p| p + 1);
    let start = prev_period.max(body_end.saturating_sub(10)).max(1);
    Ok(stream_rng(seed, STREAM_TARGET).random_range(start..body_end))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ManipulationMode {
    None,
    ImageMinus,
    ImagePlus,
    ImageReplace,
    TextMinus,
}

impl ManipulationMode {
    pub const ALL: [ManipulationMode; 5] = [
        ManipulationMode::None,
        ManipulationMode::ImageMinus,
        ManipulationMode::ImagePlus,
        ManipulationMode::ImageReplace,
        ManipulationMode::TextMinus,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ManipulationMode::None => "none",
            ManipulationMode::ImageMinus => "image_minus",
            ManipulationMode::ImagePlus => "image_plus",
            ManipulationMode::ImageReplace => "image_replace",
            ManipulationMode::TextMinus => "text_minus",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Manipulation {
    pub mode: ManipulationMode,
    /// Noising steps applied under `image_minus`.
    pub noise_steps: usize,
    /// Length of the linear variance schedule the steps are taken from.
    pub schedule_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Per-entry std of the noise the features diffuse toward under
    /// `image_minus`; `None` uses the RMS of the example's own features.
    /// The default equals the default perception floor, so fully noised
    /// slots read as "nothing perceivable".
    pub noise_std: Option<f64>,
    /// Caption tokens hidden under `text_minus`, counted after BOS (which
    /// stays visible as the prompt); `None` uses `ceil(mask_frac * len)`.
    pub mask_prefix_len: Option<usize>,
    pub mask_frac: f64,
    pub aux_seed: u64,
}

impl Default for Manipulation {
    fn default() -> Self {
        Manipulation {
            mode: ManipulationMode::None,
            noise_steps: 500,
            schedule_steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            noise_std: Some(0.05),
            mask_prefix_len: None,
            mask_frac: 0.25,
            aux_seed: 0,
        }
    }
}

impl Manipulation {
    pub fn new(mode: ManipulationMode) -> Self {
        Manipulation {
            mode,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mode == ManipulationMode::ImageMinus && self.noise_steps > self.schedule_steps {
            return Err(Error::Config(format!(
                "noise_steps {} exceeds schedule_steps {}",
                self.noise_steps, self.schedule_steps
            )));
        }
        if !(0.0 <= self.beta_start && self.beta_start <= self.beta_end && self.beta_end < 1.0) {
            return Err(Error::Config("need 0 <= beta_start <= beta_end < 1".into()));
        }
        if self.noise_std.is_some_and(|s| !(s >= 0.0 && s.is_finite())) {
            return Err(Error::Config("noise_std must be finite and >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.mask_frac) {
            return Err(Error::Config("mask_frac must lie in [0, 1]".into()));
        }
        Ok(())
    }

    fn beta(&self, step: usize) -> f64 {
        if self.schedule_steps <= 1 {
            return self.beta_start;
        }
        let f = step as f64 / (self.schedule_steps - 1) as f64;
        self.beta_start + f * (self.beta_end - self.beta_start)
    }
}

/// A (possibly edited) model context: scene slots plus a text mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Context {
    pub features: Array2<f64>,
    /// Text positions hidden from later positions.
    pub masked_text: Range<usize>,
}

/// Applies `m` to the context of `example`; the text itself is never changed.
/// `pool` supplies donor scenes for `image_plus` / `image_replace`.
pub fn manipulate(example: &Example, m: &Manipulation, pool: &[Example], rng: &mut ChaCha8Rng) -> Result<Context> {
    m.validate()?;
    let x0 = &example.features.tokens;
    let mut ctx = Context {
        features: x0.clone(),
        masked_text: 0..0,
    };
    match m.mode {
        ManipulationMode::None => {}
        ManipulationMode::ImageMinus => {
            let scale = m
                .noise_std
                .unwrap_or_else(|| (x0.iter().map(|v| v * v).sum::<f64>() / x0.len().max(1) as f64).sqrt());
            for step in 0..m.noise_steps {
                let beta = m.beta(step);
                let keep = (1.0 - beta).sqrt();
                let add = beta.sqrt() * scale;
                ctx.features.mapv_inplace(|v| {
                    let e: f64 = StandardNormal.sample(rng);
                    keep * v + add * e
                });
            }
        }
        ManipulationMode::ImagePlus | ManipulationMode::ImageReplace => {
            let donors: Vec<&Example> = pool.iter().filter(|d| d.scene.seed != example.scene.seed).collect();
            let donor = donors
                .choose(rng)
                .ok_or_else(|| Error::Config(format!("{} needs a donor pool with another scene", m.mode.name())))?;
            let extra = &donor.features.tokens;
            if extra.ncols() != x0.ncols() {
                return Err(Error::Config("donor feature width differs".into()));
            }
            ctx.features = if m.mode == ManipulationMode::ImagePlus {
                ndarray::concatenate(Axis(0), &[x0.view(), extra.view()]).expect("matching widths")
            } else {
                extra.clone()
            };
        }
        ManipulationMode::TextMinus => {
            let n = example.inputs().len().saturating_sub(1);
            let k = m
                .mask_prefix_len
                .unwrap_or_else(|| (m.mask_frac * n as f64).ceil() as usize)
                .min(n);
            ctx.masked_text = 1..1 + k;
        }
    }
    Ok(ctx)
}

pub const N_BUCKETS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    /// Bucket centre on the relative-position axis.
    pub x: f64,
    pub mean_p_eos: f64,
    pub count: usize,
    pub bucket: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TendencyCurve {
    pub mode: ManipulationMode,
    /// Non-empty buckets only, in increasing position.
    pub points: Vec<CurvePoint>,
    /// `p ≈ a * exp(b * x)`.
    pub fit_a: f64,
    pub fit_b: f64,
    /// Root-mean-square of `p - a e^{bx}` over the points.
    pub fit_rmse: f64,
}

impl TendencyCurve {
    pub fn bucket_mean(&self, bucket: usize) -> Option<f64> {
        self.points.iter().find(|p| p.bucket == bucket).map(|p| p.mean_p_eos)
    }
}

pub fn bucket_of(x: f64) -> usize {
    ((x * N_BUCKETS as f64).ceil() as usize).clamp(1, N_BUCKETS) - 1
}

/// Log-linear least squares for `y ≈ a e^{b x}`; returns `(a, b, rmse)`.
pub fn exp_fit(points: &[(f64, f64)]) -> (f64, f64, f64) {
    let pts: Vec<(f64, f64)> = points.iter().filter(|(_, y)| *y > 0.0).map(|&(x, y)| (x, y.ln())).collect();
    let n = pts.len() as f64;
    if pts.is_empty() {
        return (0.0, 0.0, 0.0);
    }
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let b = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let a = (my - b * mx).exp();
    let rmse = (points.iter().map(|&(x, y)| (y - a * (b * x).exp()).powi(2)).sum::<f64>() / points.len() as f64).sqrt();
    (a, b, rmse)
}

/// Raw `(relative position, p_EOS)` samples at every period in the teacher-forced inputs.
pub fn tendency_samples(params: &Params, example: &Example, ctx: &Context) -> Result<Vec<(f64, f64)>> {
    let tokens = example.inputs();
    let opts = ForwardOptions {
        masked_text: ctx.masked_text.clone(),
        perturb: None,
    };
    let trace = forward_with(params, &ctx.features, tokens, &opts)?;
    let n = tokens.len() as f64;
    let pos: Vec<usize> = (0..tokens.len()).filter(|&i| tokens[i] == Vocab::PERIOD).collect();
    let probs = eos_probability(&trace, &pos, Vocab::EOS)?;
    Ok(pos.iter().zip(probs).map(|(&i, p)| ((i + 1) as f64 / n, p)).collect())
}

/// Mean p_EOS after each period, bucketed by relative position, under `m`.
/// Donor scenes for image edits come from `examples` itself.
pub fn tendency_curve(params: &Params, examples: &[Example], m: &Manipulation) -> Result<TendencyCurve> {
    if examples.is_empty() {
        return Err(Error::Config("tendency_curve: empty dataset".into()));
    }
    let mut sums = [(0.0, 0usize); N_BUCKETS];
    for (i, ex) in examples.iter().enumerate() {
        let mut rng = stream_rng(m.aux_seed.wrapping_add(i as u64), STREAM_MANIPULATE);
        let ctx = manipulate(ex, m, examples, &mut rng).map_err(|e| Error::at(i, e))?;
        for (x, p) in tendency_samples(params, ex, &ctx).map_err(|e| Error::at(i, e))? {
            let b = bucket_of(x);
            sums[b].0 += p;
            sums[b].1 += 1;
        }
    }
    let points: Vec<CurvePoint> = sums
        .iter()
        .enumerate()
        .filter(|(_, (_, c))| *c > 0)
        .map(|(b, &(s, c))| CurvePoint {
            x: (b as f64 + 0.5) / N_BUCKETS as f64,
            mean_p_eos: s / c as f64,
            count: c,
            bucket: b,
        })
        .collect();
    let xy: Vec<(f64, f64)> = points.iter().map(|p| (p.x, p.mean_p_eos)).collect();
    let (fit_a, fit_b, fit_rmse) = exp_fit(&xy);
    Ok(TendencyCurve {
        mode: m.mode,
        points,
        fit_a,
        fit_b,
        fit_rmse,
    })
}

/// One curve per manipulation mode (baseline first), sharing `base`'s settings.
pub fn tendency_report(params: &Params, examples: &[Example], base: &Manipulation) -> Result<Vec<TendencyCurve>> {
    ManipulationMode::ALL
        .iter()
        .map(|&mode| tendency_curve(params, examples, &Manipulation { mode, ..base.clone() }))
        .collect()
}
