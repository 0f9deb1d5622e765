//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits nonzero when any fails. The trend criteria share one study per seed,
//! built once, in parallel.

mod common;

use std::io::Write as _;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use eosbench::hallmetrics::{chair_eval, truncate_baseline, EvalReport};
use eosbench::harness::run::{run, RunConfig, RunKind};
use eosbench::harness::study::{evaluate, Study, StudyConfig};
use eosbench::harness::{EosTrack, TrainConfig, TrainingLog};
use eosbench::objectives::{combined_uses_selective, restricted_softmax, ObjectiveHandle};
use eosbench::probes::{flow_summary, tendency_report, Manipulation, ManipulationMode, TendencyCurve};
use eosbench::scenegen::{build_dataset, write_examples, DatasetConfig, ObjectInstance, Scene, Vocab};
use eosbench::scoring::{removed_indices, score_from_probs, FilterMode, FilterPlan, ScoreMetric, ScoreTriple};
use eosbench::tinylm::{init_params, loss_and_grads, ModelConfig};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: [u64; 3] = [0, 1, 2];
/// Largest tolerated relative recall drop of a selective model against its MLE match.
const RECALL_BUDGET: f64 = 0.15;
const STUDY_BUDGET: Duration = Duration::from_secs(15 * 60);

type Verdict = Result<String, String>;
type Criterion = (&'static str, fn() -> Verdict);

fn ensure(ok: bool, detail: String) -> Verdict {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

struct Zoo {
    cfg: StudyConfig,
    studies: Vec<Study>,
    elapsed: Duration,
}

fn zoo() -> &'static Zoo {
    static ZOO: OnceLock<Zoo> = OnceLock::new();
    ZOO.get_or_init(|| {
        let cfg = StudyConfig::default();
        let t = Instant::now();
        let studies = std::thread::scope(|s| {
            let handles: Vec<_> = SEEDS.iter().map(|&seed| s.spawn({
                let cfg = &cfg;
                move || Study::run(cfg, seed).unwrap()
            })).collect();
            handles.into_iter().map(|h| h.join().unwrap()).collect()
        });
        Zoo { cfg, studies, elapsed: t.elapsed() }
    })
}

fn eval(z: &Zoo, s: &Study, params: &eosbench::tinylm::Params) -> EvalReport {
    evaluate(params, &s.test, &z.cfg.dataset.vocab(), &z.cfg.decode).unwrap().0
}

fn slope(pts: &[(f64, f64)]) -> f64 {
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>() / sxx
}

/// Least-squares slope of a tracked quantity over the final half of training.
fn final_half_slope(log: &TrainingLog, f: fn(&EosTrack) -> f64) -> f64 {
    let last = log.tracks.last().expect("tracked run").step as f64;
    let pts: Vec<(f64, f64)> = log
        .tracks
        .iter()
        .filter(|t| t.step as f64 >= last / 2.0)
        .map(|t| (t.step as f64, f(t)))
        .collect();
    slope(&pts)
}

fn c1_gradients() -> Verdict {
    const CAPTION: [usize; 9] = [0, 3, 8, 5, 2, 3, 6, 2, 1];
    let t = Instant::now();
    let cfg = common::micro_config();
    let feats = common::micro_features();
    let (tokens, labels) = (&CAPTION[..8], &CAPTION[1..]);
    let mut checked = 0;
    for positional in [true, false] {
        let cfg = ModelConfig { positional, ..cfg.clone() };
        for (name, spec) in common::objective_specs() {
            for ordinal in 0..2 {
                let params = init_params(&cfg, 7 + ordinal as u64).unwrap();
                let handle = spec.resolve(ordinal);
                let (_, grads) = loss_and_grads(&params, &feats, tokens, labels, handle).unwrap();
                let numeric =
                    common::fd_gradient(&params, |p| common::direct_loss(p, &feats, tokens, labels, handle));
                for (i, (&a, &n)) in grads.flatten().iter().zip(&numeric).enumerate() {
                    if !common::close(a, n, common::REL_TOL, common::ABS_TOL) {
                        return Err(format!("{name} param {i}: analytic {a:e} vs numeric {n:e}"));
                    }
                    checked += 1;
                }
            }
        }
    }
    let secs = t.elapsed().as_secs_f64();
    ensure(secs < 60.0, format!("{checked} gradient entries within tolerance in {secs:.1}s"))
}

fn c2_selective() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let eos = Vocab::EOS;
    for _ in 0..2000 {
        let (n, v) = (rng.random_range(1..8), rng.random_range(3..12));
        let z = Array2::from_shape_fn((n, v), |_| rng.random_range(-8.0..8.0));
        let y: Vec<usize> = (0..n).map(|_| if rng.random_bool(0.3) { eos } else { rng.random_range(0..v) }).collect();
        let sel = ObjectiveHandle::Selective { eos }.evaluate(&z, &y).unwrap();
        let mle = ObjectiveHandle::Mle.evaluate(&z, &y).unwrap();
        for (i, &label) in y.iter().enumerate() {
            if label == eos {
                if sel.terms[i] != mle.terms[i] {
                    return Err(format!("EOS-labelled term differs: {} vs {}", sel.terms[i], mle.terms[i]));
                }
            } else if sel.dlogits[[i, eos]] != 0.0 {
                return Err(format!("EOS gradient {} at a non-EOS label", sel.dlogits[[i, eos]]));
            }
            let p = restricted_softmax(&z.row(i).to_vec(), eos);
            if (p.iter().sum::<f64>() - 1.0).abs() > 1e-5 || p[eos] != 0.0 {
                return Err("restricted softmax not normalized".into());
            }
        }
    }
    let half = (0..1000).filter(|&k| combined_uses_selective(k, 1.0)).count();
    ensure(half == 500, format!("2000 random cases exact; 1:1 alternation gives {half}/1000 selective"))
}

fn c3_scoring() -> Verdict {
    let s = score_from_probs(&[7, 9, Vocab::EOS], &[0.5, 0.25, 0.8], Vocab::EOS).unwrap();
    if (s.s_neg - 0.9808).abs() > 1e-4 || (s.s_pos - 0.2231).abs() > 1e-4 || s.s_final != s.s_neg - s.s_pos {
        return Err(format!("toy fixture gave {s:?}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..500 {
        let n = rng.random_range(1..150);
        // coarse values force ties
        let scores: Vec<ScoreTriple> = (0..n)
            .map(|_| {
                let (p, q) = (rng.random_range(0..5) as f64, rng.random_range(0..5) as f64);
                ScoreTriple { s_pos: p, s_neg: q, s_final: q - p }
            })
            .collect();
        let mode = [FilterMode::Top, FilterMode::Random, FilterMode::Reversed][rng.random_range(0..3)];
        let (r1, r2) = (rng.random_range(0.01..0.5), rng.random_range(0.5..0.99));
        let plan = |ratio| FilterPlan { mode, ratio, seed: 9, metric: ScoreMetric::Final };
        let small = removed_indices(&scores, &plan(r1)).unwrap();
        let large = removed_indices(&scores, &plan(r2)).unwrap();
        if small.len() != (r1 * n as f64).ceil() as usize {
            return Err(format!("removed {} of {n} at ratio {r1}", small.len()));
        }
        if !small.iter().all(|i| large.contains(i)) {
            return Err("larger ratio is not a superset".into());
        }
        if mode != FilterMode::Random {
            let key = |i: usize| scores[i].s_final;
            let worse = |a: usize, b: usize| match mode {
                FilterMode::Top => key(a) > key(b) || (key(a) == key(b) && a < b),
                _ => key(a) < key(b) || (key(a) == key(b) && a < b),
            };
            for &r in &small {
                if let Some(k) = (0..n).find(|k| !small.contains(k) && worse(*k, r)) {
                    return Err(format!("kept {k} ranks ahead of removed {r}"));
                }
            }
        }
    }
    Ok("toy fixture 0.9808/0.2231; 500 random lists keep count, superset and tie-break contracts".into())
}

fn c4_metrics() -> Verdict {
    let v = Vocab::new(8, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut fixtures = 0;
    for _ in 0..1200 {
        let n = rng.random_range(1..=10);
        let mut caps = Vec::new();
        let mut scenes = Vec::new();
        for _ in 0..n {
            let k = rng.random_range(1..=5);
            let objects = (0..k)
                .map(|_| ObjectInstance { class_id: rng.random_range(0..8), attributes: vec![], salience: 1.0 })
                .collect();
            scenes.push(Scene { objects, seed: 0 });
            let mut cap = vec![Vocab::BOS];
            cap.extend((0..rng.random_range(0..12)).map(|_| rng.random_range(Vocab::PERIOD..v.len())));
            cap.push(Vocab::EOS);
            caps.push(cap);
        }
        let got = chair_eval(&caps, &scenes, &v).unwrap();
        // recount mention by mention
        let (mut hs, mut h, mut m, mut c, mut t) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for (cap, sc) in caps.iter().zip(&scenes) {
            let mut any = false;
            for class in 0..8 {
                let said = cap.contains(&v.class_token(class).unwrap());
                let there = sc.objects.iter().any(|o| o.class_id == class);
                t += f64::from(u8::from(there));
                if said {
                    m += 1.0;
                    if there {
                        c += 1.0;
                    } else {
                        h += 1.0;
                        any = true;
                    }
                }
            }
            hs += f64::from(u8::from(any));
        }
        let want = [hs / n as f64, if m > 0.0 { h / m } else { 0.0 }, c / t];
        let have = [got.chair_s, got.chair_i, got.recall];
        if want.iter().zip(&have).any(|(a, b)| (a - b).abs() > 1e-12) {
            return Err(format!("fixture {fixtures}: {have:?} vs recount {want:?}"));
        }
        if truncate_baseline(&caps, 100.0).unwrap() != caps {
            return Err("R=100 truncation changed a caption".into());
        }
        fixtures += 1;
    }
    Ok(format!("{fixtures} fixtures match the recount; R=100 truncation is the identity"))
}

fn c5_training_trends() -> Verdict {
    let z = zoo();
    let mut lines = Vec::new();
    let mut ok = z.elapsed < STUDY_BUDGET;
    for s in &z.studies {
        let fig1 = final_half_slope(&s.over_detailed.log, |t| t.eos_loglik);
        let pts: Vec<(f64, f64)> = s
            .selective_further
            .log
            .tracks
            .iter()
            .map(|t| (t.step as f64, t.sentence_end_p_eos))
            .collect();
        let fig8 = slope(&pts);
        ok &= fig1 <= 0.0 && fig8 >= 0.0;
        lines.push(format!("seed {}: eos loglik slope {fig1:.2e}, p_eos slope {fig8:.2e}", s.seed));
    }
    ensure(ok, format!("{}; studies took {:.0}s", lines.join("; "), z.elapsed.as_secs_f64()))
}

/// Mean over seeds of each bucket present in every seed.
fn seed_mean(curves: &[&TendencyCurve]) -> Vec<(usize, f64, f64)> {
    curves[0]
        .points
        .iter()
        .filter_map(|p| {
            let vals: Option<Vec<f64>> = curves.iter().map(|c| c.bucket_mean(p.bucket)).collect();
            vals.map(|v| (p.bucket, p.x, v.iter().sum::<f64>() / v.len() as f64))
        })
        .collect()
}

fn c6_tendency() -> Verdict {
    let z = zoo();
    let reports: Vec<Vec<TendencyCurve>> = std::thread::scope(|sc| {
        let hs: Vec<_> = z
            .studies
            .iter()
            .map(|s| {
                sc.spawn(move || {
                    let base = Manipulation { aux_seed: s.seed, ..Default::default() };
                    tendency_report(&s.mle.params, &s.test, &base).unwrap()
                })
            })
            .collect();
        hs.into_iter().map(|h| h.join().unwrap()).collect()
    });
    let curve = |mode: ManipulationMode| {
        let cs: Vec<&TendencyCurve> = reports.iter().map(|r| r.iter().find(|c| c.mode == mode).unwrap()).collect();
        seed_mean(&cs)
    };
    let base = curve(ManipulationMode::None);
    let rising = slope(&base.iter().map(|&(_, x, y)| (x, y)).collect::<Vec<_>>());
    let mut ok = rising > 0.0;
    let mut lines = vec![format!("baseline slope {rising:.3}")];
    for mode in [
        ManipulationMode::ImageMinus,
        ManipulationMode::ImagePlus,
        ManipulationMode::ImageReplace,
        ManipulationMode::TextMinus,
    ] {
        let up = mode == ManipulationMode::ImageMinus;
        let (mut hits, mut matched) = (0, 0);
        for (b, _, y) in curve(mode) {
            if let Some(&(_, _, y0)) = base.iter().find(|p| p.0 == b) {
                matched += 1;
                hits += usize::from(if up { y > y0 } else { y < y0 });
            }
        }
        ok &= 2 * hits > matched;
        lines.push(format!("{} {} in {hits}/{matched}", mode.name(), if up { "up" } else { "down" }));
    }
    ensure(ok, lines.join("; "))
}

fn c7_flow() -> Verdict {
    let z = zoo();
    let sums: Vec<(f64, f64)> = std::thread::scope(|sc| {
        let hs: Vec<_> = z
            .studies
            .iter()
            .map(|s| sc.spawn(move || flow_summary(&s.mle.params, &s.test, s.seed).unwrap().top_quartile_previous()))
            .collect();
        hs.into_iter().map(|h| h.join().unwrap()).collect()
    });
    let n = sums.len() as f64;
    let eos = sums.iter().map(|p| p.0).sum::<f64>() / n;
    let non = sums.iter().map(|p| p.1).sum::<f64>() / n;
    let per: Vec<String> = sums.iter().map(|(a, b)| format!("{a:.3}/{b:.3}")).collect();
    ensure(
        eos > non,
        format!("previous-sentence share eos {eos:.3} vs non-eos {non:.3} (per seed {})", per.join(", ")),
    )
}

fn compare(tag: &str, base: &EvalReport, sel: &EvalReport) -> (bool, String) {
    let drop = if base.recall > 0.0 { (base.recall - sel.recall) / base.recall } else { 0.0 };
    let ok = sel.chair_s < base.chair_s
        && sel.chair_i < base.chair_i
        && sel.mean_length < base.mean_length
        && drop <= RECALL_BUDGET;
    (
        ok,
        format!(
            "{tag} chs {:.3}->{:.3} chi {:.3}->{:.3} len {:.2}->{:.2} recall {:+.1}%",
            base.chair_s,
            sel.chair_s,
            base.chair_i,
            sel.chair_i,
            base.mean_length,
            sel.mean_length,
            -100.0 * drop
        ),
    )
}

fn c8_selective_models() -> Verdict {
    let z = zoo();
    let mut ok = true;
    let mut lines = Vec::new();
    for s in &z.studies {
        let mle = eval(z, s, &s.mle.params);
        let further_mle = eval(z, s, &s.mle_further.params);
        let further_sel = eval(z, s, &s.selective_further.params);
        let scratch_sel = eval(z, s, &s.selective.params);
        let (a, la) = compare("further", &further_mle, &further_sel);
        let (b, lb) = compare("scratch", &mle, &scratch_sel);
        ok &= a && b;
        lines.push(format!("seed {}: {la}; {lb}", s.seed));
    }
    ensure(ok, lines.join(" | "))
}

fn c9_filtering() -> Verdict {
    let z = zoo();
    let mut ok = true;
    let mut lines = Vec::new();
    for s in &z.studies {
        let orig = eval(z, s, &s.mle.params);
        let top = eval(z, s, &s.top_filtered.params);
        let rev = eval(z, s, &s.reversed_filtered.params);
        let ratio = rev.mean_length / top.mean_length;
        ok &= top.chair_s < orig.chair_s && top.chair_i < orig.chair_i && rev.chair_s > orig.chair_s && ratio >= 1.5;
        lines.push(format!(
            "seed {}: chs orig {:.3} top {:.3} rev {:.3}, chi orig {:.3} top {:.3}, length ratio {ratio:.2}",
            s.seed, orig.chair_s, top.chair_s, rev.chair_s, orig.chair_i, top.chair_i
        ));
    }
    ensure(ok, lines.join(" | "))
}

fn c10_determinism() -> Verdict {
    let tmp = tempfile::tempdir().unwrap();
    let dcfg = DatasetConfig { train_size: 32, test_size: 8, ..Default::default() };
    let ds = build_dataset(&dcfg).unwrap();
    let (train, test) = (tmp.path().join("train.jsonl"), tmp.path().join("test.jsonl"));
    write_examples(&train, &ds.train).unwrap();
    write_examples(&test, &ds.test).unwrap();
    let files = ["seed-3/model.ckpt", "seed-3/training_log.json", "seed-3/eval.json"];
    let mut outs = Vec::new();
    for rep in ["a", "b"] {
        let cfg = RunConfig {
            kind: RunKind::TrainCombined,
            seeds: vec![3],
            out_dir: tmp.path().join(rep),
            dataset: dcfg.clone(),
            train_data: Some(train.clone()),
            eval_data: Some(test.clone()),
            model: ModelConfig { n_layers: 2, n_heads: 2, d_model: 16, d_ff: 32, ..Default::default() },
            train: TrainConfig { epochs: 2, batch_size: 8, log_interval: 1, ..Default::default() },
            track_examples: 8,
            ..Default::default()
        };
        run(&cfg).unwrap();
        outs.push(files.map(|f| std::fs::read(cfg.out_dir.join(f)).unwrap()));
    }
    let same = outs[0] == outs[1];
    ensure(same, format!("{} artifacts byte-identical across reruns: {same}", files.len()))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 10] = [
        ("gradient correctness", c1_gradients),
        ("selective-objective exactness", c2_selective),
        ("scoring identities", c3_scoring),
        ("metric oracle", c4_metrics),
        ("EOS trends during training", c5_training_trends),
        ("EOS tendency under manipulation", c6_tendency),
        ("flow from previous sentences", c7_flow),
        ("selective vs MLE models", c8_selective_models),
        ("score-based filtering", c9_filtering),
        ("determinism", c10_determinism),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    let mut out = std::io::stdout();
    for (i, (name, f)) in criteria.iter().enumerate() {
        let id = format!("criterion {}", i + 1);
        if !filter.is_empty() && !filter.iter().any(|p| id.contains(p.as_str()) || name.contains(p.as_str())) {
            continue;
        }
        let verdict = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| Err("panicked".into()));
        let (tag, detail) = match verdict {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        let _ = writeln!(out, "{tag} {id:>12} {name}: {detail}");
        let _ = out.flush();
    }
    if failed > 0 {
        let _ = writeln!(out, "{failed} criteria failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
