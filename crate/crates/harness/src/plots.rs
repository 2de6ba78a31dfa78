//! Standalone SVG figures, each written next to a CSV with exactly the
//! plotted points.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use supsiam::molgraph::Split;

use crate::analysis::AnalysisBundle;
use crate::error::HarnessError;
use crate::grid::Cell;
use crate::store::write_atomic;

const W: f64 = 640.0;
const H: f64 = 420.0;
const ML: f64 = 70.0;
const MR: f64 = 150.0;
const MT: f64 = 40.0;
const MB: f64 = 55.0;
const PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
];

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
    /// Symmetric error bar per point.
    pub errors: Option<Vec<f64>>,
    /// x positions drawn as vertical dashed markers.
    pub markers: Vec<f64>,
}

impl Series {
    pub fn new(label: impl Into<String>, points: Vec<(f64, f64)>) -> Self {
        Self {
            label: label.into(),
            points,
            errors: None,
            markers: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Style {
    Lines,
    Points,
    Bars,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Figure {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub style: Style,
    pub series: Vec<Series>,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn range(vals: impl Iterator<Item = f64>) -> (f64, f64) {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in vals.filter(|v| v.is_finite()) {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 * (1.0 + lo.abs()) {
        let pad = 0.5 * (1.0 + lo.abs()) * 0.1;
        return (lo - pad, hi + pad);
    }
    let pad = 0.05 * (hi - lo);
    (lo - pad, hi + pad)
}

fn tick_label(v: f64) -> String {
    if v == 0.0 {
        "0".into()
    } else if v.abs() >= 1e4 || v.abs() < 1e-2 {
        format!("{v:.2e}")
    } else {
        format!("{v:.3}").trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

impl Figure {
    pub fn n_points(&self) -> usize {
        self.series.iter().map(|s| s.points.len()).sum()
    }

    pub fn to_svg(&self) -> String {
        let all = || self.series.iter().flat_map(|s| s.points.iter());
        let (x0, x1) = range(all().map(|p| p.0).chain(self.series.iter().flat_map(|s| s.markers.iter().copied())));
        let (y0, y1) = range(self.series.iter().flat_map(|s| {
            s.points.iter().enumerate().flat_map(move |(i, p)| {
                let e = s.errors.as_ref().map_or(0.0, |e| e[i]);
                [p.1 - e, p.1 + e]
            })
        }));
        let (y0, y1) = if self.style == Style::Bars { (y0.min(0.0), y1) } else { (y0, y1) };
        let pw = W - ML - MR;
        let ph = H - MT - MB;
        let sx = |x: f64| ML + (x - x0) / (x1 - x0) * pw;
        let sy = |y: f64| MT + ph - (y - y0) / (y1 - y0) * ph;
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#
        );
        let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
        let _ = writeln!(
            s,
            r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
            ML + pw / 2.0,
            escape(&self.title)
        );
        let _ = writeln!(
            s,
            r#"<rect x="{ML}" y="{MT}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
        );
        for k in 0..=4 {
            let fx = x0 + (x1 - x0) * k as f64 / 4.0;
            let fy = y0 + (y1 - y0) * k as f64 / 4.0;
            let _ = writeln!(
                s,
                r#"<line x1="{0:.2}" y1="{1:.2}" x2="{0:.2}" y2="{2:.2}" stroke="black"/><text x="{0:.2}" y="{3:.2}" text-anchor="middle">{4}</text>"#,
                sx(fx),
                MT + ph,
                MT + ph + 5.0,
                MT + ph + 18.0,
                tick_label(fx)
            );
            let _ = writeln!(
                s,
                r#"<line x1="{0:.2}" y1="{1:.2}" x2="{2:.2}" y2="{1:.2}" stroke="black"/><text x="{3:.2}" y="{4:.2}" text-anchor="end">{5}</text>"#,
                ML - 5.0,
                sy(fy),
                ML,
                ML - 8.0,
                sy(fy) + 4.0,
                tick_label(fy)
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
            ML + pw / 2.0,
            H - 12.0,
            escape(&self.x_label)
        );
        let _ = writeln!(
            s,
            r#"<text x="18" y="{0}" text-anchor="middle" transform="rotate(-90 18 {0})">{1}</text>"#,
            MT + ph / 2.0,
            escape(&self.y_label)
        );
        let bar_w = {
            let mut xs: Vec<f64> = all().map(|p| p.0).collect();
            xs.sort_by(f64::total_cmp);
            let step = xs.windows(2).map(|w| w[1] - w[0]).filter(|d| *d > 0.0).fold(f64::INFINITY, f64::min);
            if step.is_finite() { step / (x1 - x0) * pw * 0.9 } else { pw * 0.05 }
        };
        for (i, ser) in self.series.iter().enumerate() {
            let color = PALETTE[i % PALETTE.len()];
            let _ = writeln!(s, r#"<g class="series" data-points="{}">"#, ser.points.len());
            match self.style {
                Style::Lines => {
                    let pts: Vec<String> = ser.points.iter().map(|p| format!("{:.2},{:.2}", sx(p.0), sy(p.1))).collect();
                    let _ = writeln!(
                        s,
                        r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
                        pts.join(" ")
                    );
                }
                Style::Points => {
                    for (j, p) in ser.points.iter().enumerate() {
                        if let Some(e) = ser.errors.as_ref().map(|e| e[j]) {
                            let _ = writeln!(
                                s,
                                r#"<line x1="{0:.2}" y1="{1:.2}" x2="{0:.2}" y2="{2:.2}" stroke="{color}"/>"#,
                                sx(p.0),
                                sy(p.1 - e),
                                sy(p.1 + e)
                            );
                        }
                        let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="3.5" fill="{color}"/>"#, sx(p.0), sy(p.1));
                    }
                }
                Style::Bars => {
                    for p in &ser.points {
                        let top = sy(p.1.max(0.0));
                        let base = sy(0.0_f64.max(y0));
                        let _ = writeln!(
                            s,
                            r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="{color}" fill-opacity="0.6"/>"#,
                            sx(p.0) - bar_w / 2.0,
                            top,
                            bar_w,
                            (base - top).max(0.0)
                        );
                    }
                }
            }
            let _ = writeln!(s, "</g>");
            for &m in &ser.markers {
                let _ = writeln!(
                    s,
                    r#"<line x1="{0:.2}" y1="{1}" x2="{0:.2}" y2="{2}" stroke="{color}" stroke-dasharray="4 3"/>"#,
                    sx(m),
                    MT,
                    MT + ph
                );
            }
            let ly = MT + 14.0 * i as f64 + 8.0;
            let _ = writeln!(
                s,
                r#"<rect x="{0}" y="{1}" width="10" height="10" fill="{color}"/><text x="{2}" y="{3}">{4}</text>"#,
                W - MR + 10.0,
                ly - 8.0,
                W - MR + 25.0,
                ly + 1.0,
                escape(&ser.label)
            );
        }
        s.push_str("</svg>\n");
        s
    }

    /// `series,x,y[,error][,marker]` with one row per plotted point.
    pub fn to_csv(&self, x_name: &str, y_name: &str) -> Result<Vec<u8>, HarnessError> {
        let has_err = self.series.iter().any(|s| s.errors.is_some());
        let has_markers = self.series.iter().any(|s| !s.markers.is_empty());
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["series".to_string(), x_name.to_string(), y_name.to_string()];
        if has_err {
            header.push("stdev".into());
        }
        if has_markers {
            header.push("marker".into());
        }
        w.write_record(&header)?;
        for ser in &self.series {
            for (j, p) in ser.points.iter().enumerate() {
                let mut row = vec![ser.label.clone(), p.0.to_string(), p.1.to_string()];
                if has_err {
                    row.push(ser.errors.as_ref().map(|e| e[j].to_string()).unwrap_or_default());
                }
                if has_markers {
                    row.push(ser.markers.contains(&p.0).to_string());
                }
                w.write_record(&row)?;
            }
        }
        w.into_inner().map_err(|e| HarnessError::Runtime(e.to_string()))
    }
}

fn emit(dir: &Path, stem: &str, fig: &Figure, x: &str, y: &str, out: &mut Vec<PathBuf>) -> Result<(), HarnessError> {
    fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    let svg = dir.join(format!("{stem}.svg"));
    let csv = dir.join(format!("{stem}.csv"));
    write_atomic(&csv, &fig.to_csv(x, y)?)?;
    write_atomic(&svg, fig.to_svg().as_bytes())?;
    out.push(svg);
    out.push(csv);
    Ok(())
}

/// Equal-width histogram as `(bin_center, count)` points.
pub fn histogram(values: &[f64], bins: usize) -> Vec<(f64, f64)> {
    let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    if finite.is_empty() || bins == 0 {
        return Vec::new();
    }
    let lo = finite.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = finite.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
    let mut counts = vec![0usize; bins];
    for v in finite {
        let b = (((v - lo) / width) as usize).min(bins - 1);
        counts[b] += 1;
    }
    counts
        .into_iter()
        .enumerate()
        .map(|(i, c)| (lo + width * (i as f64 + 0.5), c as f64))
        .collect()
}

fn training_curves(bundle: &AnalysisBundle, cell: &Cell) -> Vec<(&'static str, &'static str, Figure)> {
    let panels: [(&str, &str, fn(&supsiam::trainer::EpochRow) -> Option<f64>); 4] = [
        ("l_y", "target loss", |r| Some(r.l_y)),
        ("l_s", "Siamese loss", |r| Some(r.l_s)),
        ("l_r", "l2 loss", |r| Some(r.l_r)),
        ("feature_variance", "embedding feature variance", |r| r.feature_variance),
    ];
    panels
        .into_iter()
        .map(|(stem, title, get)| {
            let series = bundle
                .runs_in(cell)
                .map(|r| {
                    let pts = r
                        .epochs
                        .iter()
                        .filter(|e| e.split == Split::Train)
                        .filter_map(|e| get(e).filter(|v| v.is_finite()).map(|v| (e.epoch as f64, v)))
                        .collect();
                    Series::new(format!("run{}", r.run), pts)
                })
                .collect();
            (
                stem,
                stem,
                Figure {
                    title: format!("{} ({})", title, cell.key()),
                    x_label: "epoch".into(),
                    y_label: title.into(),
                    style: Style::Lines,
                    series,
                },
            )
        })
        .collect()
}

/// Writes every figure of `bundle` under `dir`; an empty bundle writes nothing.
pub fn emit_plots(bundle: &AnalysisBundle, dir: &Path, hist_bins: usize) -> Result<Vec<PathBuf>, HarnessError> {
    let mut out = Vec::new();
    if bundle.is_empty() {
        return Ok(out);
    }
    for agg in &bundle.aggregates {
        let cell = &agg.cell;
        let cdir = dir.join(cell.key());
        for (stem, y, fig) in training_curves(bundle, cell) {
            emit(&cdir, &format!("train_{stem}"), &fig, "epoch", y, &mut out)?;
        }
        let etas: Vec<f64> = bundle
            .runs_in(cell)
            .flat_map(|r| r.smoothness.per_molecule_eta.iter().map(|(_, e)| *e))
            .collect();
        let fig = Figure {
            title: format!("per-molecule smoothness ({})", cell.key()),
            x_label: "eta".into(),
            y_label: "molecules".into(),
            style: Style::Bars,
            series: vec![Series::new("all runs", histogram(&etas, hist_bins))],
        };
        emit(&cdir, "smoothness_hist", &fig, "eta_bin_center", "count", &mut out)?;
        let series: Vec<Series> = bundle
            .runs_in(cell)
            .filter_map(|r| {
                r.collapse.as_ref().map(|c| {
                    let mut s = Series::new(
                        format!("run{}", r.run),
                        c.cev_curve.iter().enumerate().map(|(j, v)| ((j + 1) as f64, *v)).collect(),
                    );
                    s.markers = vec![c.gamma95_index as f64];
                    s
                })
            })
            .collect();
        if !series.is_empty() {
            let fig = Figure {
                title: format!("cumulative explained variance ({})", cell.key()),
                x_label: "component j".into(),
                y_label: "CEV".into(),
                style: Style::Lines,
                series,
            };
            emit(&cdir, "cev", &fig, "j", "cev", &mut out)?;
        }
    }
    let scatters: [(&str, &str, fn(&crate::analysis::CellAggregate) -> Option<(f64, Option<f64>)>); 3] = [
        ("test_metric", "test metric", |a| a.test_metric.as_ref().map(|s| (s.mean, s.stdev))),
        ("eta_f", "manifold smoothness", |a| a.eta_f.as_ref().map(|s| (s.mean, s.stdev))),
        ("bold_gamma", "bold Gamma", |a| a.bold_gamma.as_ref().map(|s| (s.mean, s.stdev))),
    ];
    for (stem, title, get) in scatters {
        let mut series: Vec<Series> = Vec::new();
        for a in &bundle.aggregates {
            let Some((mean, sd)) = get(a) else { continue };
            let label = format!("tau{} d{} lr{}", a.cell.tau, a.cell.d, a.cell.lambda_r);
            let idx = match series.iter().position(|s| s.label == label) {
                Some(i) => i,
                None => {
                    let mut s = Series::new(label, Vec::new());
                    s.errors = Some(Vec::new());
                    series.push(s);
                    series.len() - 1
                }
            };
            series[idx].points.push((a.cell.lambda_s, mean));
            series[idx].errors.as_mut().expect("set above").push(sd.unwrap_or(0.0));
        }
        if series.is_empty() {
            continue;
        }
        let fig = Figure {
            title: format!("{title} vs lambda_s"),
            x_label: "lambda_s".into(),
            y_label: title.into(),
            style: Style::Points,
            series,
        };
        emit(dir, &format!("scatter_{stem}_vs_lambda_s"), &fig, "lambda_s", stem, &mut out)?;
    }
    Ok(out)
}
