//! Minimal deterministic SVG line plots. Every plot is written next to a
//! tab-separated file holding the plotted points.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::train::TrainingLog;
use crate::error::Result;
use crate::probes::{FlowSummary, TendencyCurve};
use crate::scoring::{histogram, ScoreTriple};

const W: f64 = 640.0;
const H: f64 = 400.0;
const MARGIN: (f64, f64, f64, f64) = (60.0, 150.0, 40.0, 50.0); // left, right, top, bottom
const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Plot {
    /// File stem; the SVG and TSV are `<stem>.svg` and `<stem>.tsv`.
    pub stem: String,
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
}

fn bounds(series: &[Series]) -> ((f64, f64), (f64, f64)) {
    let pts = || series.iter().flat_map(|s| s.points.iter()).filter(|p| p.0.is_finite() && p.1.is_finite());
    let fold = |f: fn(&(f64, f64)) -> f64| {
        pts().map(f).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
    };
    let widen = |(lo, hi): (f64, f64)| {
        if !lo.is_finite() {
            (0.0, 1.0)
        } else if hi - lo < 1e-12 {
            (lo - 0.5, hi + 0.5)
        } else {
            (lo, hi)
        }
    };
    (widen(fold(|p| p.0)), widen(fold(|p| p.1)))
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

impl Plot {
    pub fn to_svg(&self) -> String {
        let ((x0, x1), (y0, y1)) = bounds(&self.series);
        let (ml, mr, mt, mb) = MARGIN;
        let (pw, ph) = (W - ml - mr, H - mt - mb);
        let sx = |x: f64| ml + (x - x0) / (x1 - x0) * pw;
        let sy = |y: f64| mt + ph - (y - y0) / (y1 - y0) * ph;
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#
        );
        let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="20" text-anchor="middle" font-size="13">{}</text>"#,
            ml + pw / 2.0,
            esc(&self.title)
        );
        let _ = writeln!(
            s,
            r#"<rect x="{ml:.1}" y="{mt:.1}" width="{pw:.1}" height="{ph:.1}" fill="none" stroke="black"/>"#
        );
        for k in 0..=4 {
            let f = k as f64 / 4.0;
            let (xv, yv) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
            let _ = writeln!(
                s,
                r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
                sx(xv),
                mt + ph + 15.0,
                tick(xv)
            );
            let _ = writeln!(
                s,
                r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
                ml - 5.0,
                sy(yv) + 4.0,
                tick(yv)
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            ml + pw / 2.0,
            H - 12.0,
            esc(&self.x_label)
        );
        let _ = writeln!(
            s,
            r#"<text x="15" y="{:.1}" text-anchor="middle" transform="rotate(-90 15 {:.1})">{}</text>"#,
            mt + ph / 2.0,
            mt + ph / 2.0,
            esc(&self.y_label)
        );
        for (i, ser) in self.series.iter().enumerate() {
            let color = PALETTE[i % PALETTE.len()];
            let pts: Vec<String> = ser
                .points
                .iter()
                .filter(|p| p.0.is_finite() && p.1.is_finite())
                .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
                .collect();
            let _ = writeln!(
                s,
                r#"<polyline class="series" data-name="{}" fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
                esc(&ser.name),
                pts.join(" ")
            );
            let ly = mt + 12.0 + 16.0 * i as f64;
            let lx = ml + pw + 10.0;
            let _ = writeln!(
                s,
                r#"<line x1="{lx:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="{color}" stroke-width="2"/>"#,
                ly - 4.0,
                lx + 18.0,
                ly - 4.0
            );
            let _ = writeln!(s, r#"<text x="{:.1}" y="{ly:.1}">{}</text>"#, lx + 22.0, esc(&ser.name));
        }
        s.push_str("</svg>\n");
        s
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from("series\tx\ty\n");
        for ser in &self.series {
            for (x, y) in &ser.points {
                let _ = writeln!(s, "{}\t{x}\t{y}", ser.name);
            }
        }
        s
    }

    /// Writes `<stem>.svg` and `<stem>.tsv` under `dir`; returns the SVG path.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir)?;
        let svg = dir.join(format!("{}.svg", self.stem));
        fs::write(&svg, self.to_svg())?;
        fs::write(dir.join(format!("{}.tsv", self.stem)), self.to_tsv())?;
        Ok(svg)
    }
}

fn tick(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e4 || v.abs() < 1e-2) {
        format!("{v:.1e}")
    } else {
        format!("{v:.2}")
    }
}

/// Whatever reports a run directory holds; absent ones produce no plot.
#[derive(Debug, Clone, Default)]
pub struct PlotInputs {
    pub training_log: Option<TrainingLog>,
    pub tendency: Option<Vec<TendencyCurve>>,
    pub flow: Option<FlowSummary>,
    pub scores: Option<Vec<ScoreTriple>>,
}

pub fn build_plots(inputs: &PlotInputs) -> Vec<Plot> {
    let mut plots = Vec::new();
    if let Some(log) = inputs.training_log.as_ref().filter(|l| !l.tracks.is_empty()) {
        let track = |f: fn(&super::train::EosTrack) -> f64| log.tracks.iter().map(|t| (t.step as f64, f(t))).collect();
        plots.push(Plot {
            stem: "eos_loglik".into(),
            title: "EOS log-likelihood at EOS labels".into(),
            x_label: "step".into(),
            y_label: "mean log p(EOS)".into(),
            series: vec![Series {
                name: "eos_loglik".into(),
                points: track(|t| t.eos_loglik),
            }],
        });
        plots.push(Plot {
            stem: "sentence_end_p_eos".into(),
            title: "p(EOS) at sentence ends".into(),
            x_label: "step".into(),
            y_label: "mean p(EOS)".into(),
            series: vec![Series {
                name: "sentence_end_p_eos".into(),
                points: track(|t| t.sentence_end_p_eos),
            }],
        });
    }
    if let Some(curves) = &inputs.tendency {
        plots.push(Plot {
            stem: "tendency".into(),
            title: "EOS tendency under context manipulation".into(),
            x_label: "relative position".into(),
            y_label: "mean p(EOS)".into(),
            series: curves
                .iter()
                .map(|c| Series {
                    name: c.mode.name().into(),
                    points: c.points.iter().map(|p| (p.x, p.mean_p_eos)).collect(),
                })
                .collect(),
        });
    }
    if let Some(flow) = &inputs.flow {
        let col = |v: &[[f64; 3]], k: usize| v.iter().enumerate().map(|(l, t)| (l as f64, t[k])).collect();
        let segs = ["scene", "previous", "current"];
        let mut series = Vec::new();
        for (tag, v) in [("eos", &flow.eos), ("non_eos", &flow.non_eos)] {
            for (k, seg) in segs.iter().enumerate() {
                series.push(Series {
                    name: format!("{tag}_{seg}"),
                    points: col(v, k),
                });
            }
        }
        plots.push(Plot {
            stem: "flow".into(),
            title: "Information flow into the target".into(),
            x_label: "layer".into(),
            y_label: "proportion".into(),
            series,
        });
        plots.push(Plot {
            stem: "aggregation".into(),
            title: "Aggregation pattern (EOS targets)".into(),
            x_label: "layer".into(),
            y_label: "proportion".into(),
            series: ["others_to_periods", "periods_to_target", "among_others"]
                .iter()
                .enumerate()
                .map(|(k, n)| Series {
                    name: n.to_string(),
                    points: col(&flow.aggregation, k),
                })
                .collect(),
        });
    }
    if let Some(scores) = inputs.scores.as_ref().filter(|s| !s.is_empty()) {
        let finals: Vec<f64> = scores.iter().map(|s| s.s_final).collect();
        let h = histogram(&finals, 20);
        plots.push(Plot {
            stem: "score_hist".into(),
            title: "Distribution of S_final".into(),
            x_label: "S_final".into(),
            y_label: "count".into(),
            series: vec![Series {
                name: "s_final".into(),
                points: h
                    .counts
                    .iter()
                    .enumerate()
                    .map(|(i, &c)| ((h.edges[i] + h.edges[i + 1]) / 2.0, c as f64))
                    .collect(),
            }],
        });
    }
    plots
}

/// Renders every available plot into `dir`; returns the SVG paths.
pub fn emit_plots(dir: &Path, inputs: &PlotInputs) -> Result<Vec<PathBuf>> {
    build_plots(inputs).iter().map(|p| p.write(dir)).collect()
}
