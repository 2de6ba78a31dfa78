//! Post-hoc analysis of a store: test-set smoothness, collapse spectra and
//! per-cell aggregates.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use supsiam::metrics::{cev, manifold_smoothness, CollapseReport, MetricError, SmoothnessConfig, SmoothnessReport};
use supsiam::molgraph::{ConformerRecord, Split};
use supsiam::par::{map_slice, ExecMode};
use supsiam::trainer::{evaluate, summarize, EpochRow, MetricSummary};

use crate::config::AnalysisSection;
use crate::error::HarnessError;
use crate::grid::Cell;
use crate::store::{write_atomic, ExperimentStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunAnalysis {
    pub run_id: String,
    pub cell: Cell,
    pub run: usize,
    pub smoothness: SmoothnessReport,
    pub collapse: Option<CollapseReport>,
    /// Why `collapse` is absent, or any other reason to distrust this run.
    pub flag: Option<String>,
    pub test_metric: Option<f64>,
    pub epochs: Vec<EpochRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellAggregate {
    pub cell: Cell,
    pub runs: usize,
    pub eta_f: Option<MetricSummary>,
    pub bold_gamma: Option<MetricSummary>,
    pub gamma95_index: Option<MetricSummary>,
    pub feature_variance: Option<MetricSummary>,
    pub test_metric: Option<MetricSummary>,
    pub flagged: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AnalysisBundle {
    pub dataset: String,
    pub eval_metric: Option<String>,
    pub runs: Vec<RunAnalysis>,
    pub aggregates: Vec<CellAggregate>,
    pub warnings: Vec<String>,
}

impl AnalysisBundle {
    pub fn is_empty(&self) -> bool {
        self.runs.is_empty()
    }

    pub fn runs_in(&self, cell: &Cell) -> impl Iterator<Item = &RunAnalysis> {
        let key = cell.key();
        self.runs.iter().filter(move |r| r.cell.key() == key)
    }
}

fn analyze_run(
    store: &ExperimentStore,
    cell: &Cell,
    run: usize,
    test: &[ConformerRecord],
    cfg: &AnalysisSection,
) -> Result<RunAnalysis, HarnessError> {
    let stored = store.load_run(cell, run)?;
    let sm_cfg = SmoothnessConfig {
        tau: cfg.tau,
        samples: cfg.samples,
        seed: cfg.seed,
    };
    let smoothness = manifold_smoothness(&stored.model, test, &sm_cfg, ExecMode::Sequential)
        .map_err(|e| HarnessError::Runtime(e.to_string()))?;
    let mut tc = stored.report.config;
    tc.exec = ExecMode::Sequential;
    let ev = evaluate(&stored.model, test, &tc, cfg.seed)?;
    let (collapse, flag) = match cev(&ev.embeddings) {
        Ok(c) => (Some(c), None),
        Err(MetricError::Degenerate(m)) => (None, Some(format!("degenerate embeddings: {m}"))),
        Err(e) => return Err(HarnessError::Runtime(e.to_string())),
    };
    Ok(RunAnalysis {
        run_id: format!("{}/run{run}", cell.key()),
        cell: *cell,
        run,
        smoothness,
        collapse,
        flag,
        test_metric: stored.report.test.and_then(|t| t.metric),
        epochs: stored.report.epochs,
    })
}

fn aggregate(cell: &Cell, runs: &[&RunAnalysis]) -> CellAggregate {
    let col = |name: &str, f: &dyn Fn(&RunAnalysis) -> Option<f64>| {
        let v: Vec<f64> = runs.iter().filter_map(|r| f(r)).collect();
        summarize(name, &v)
    };
    CellAggregate {
        cell: *cell,
        runs: runs.len(),
        eta_f: col("eta_f", &|r| Some(r.smoothness.eta_f)),
        bold_gamma: col("bold_gamma", &|r| r.collapse.as_ref().map(|c| c.bold_gamma)),
        gamma95_index: col("gamma95_index", &|r| r.collapse.as_ref().map(|c| c.gamma95_index as f64)),
        feature_variance: col("feature_variance", &|r| r.collapse.as_ref().map(|c| c.feature_variance)),
        test_metric: col("test_metric", &|r| r.test_metric),
        flagged: runs.iter().filter(|r| r.flag.is_some()).count(),
    }
}

/// Analyzes every completed run against the test split; unreadable runs
/// become warnings rather than errors.
pub fn analyze(
    store: &ExperimentStore,
    test: &[ConformerRecord],
    cfg: &AnalysisSection,
    mode: ExecMode,
) -> Result<AnalysisBundle, HarnessError> {
    if test.is_empty() {
        return Err(HarnessError::Config("dataset has no test records".into()));
    }
    let jobs: Vec<(Cell, usize)> = store
        .completed()
        .into_iter()
        .flat_map(|(c, runs)| runs.into_iter().map(move |k| (c, k)))
        .collect();
    let results = map_slice(mode, &jobs, |(c, k)| analyze_run(store, c, *k, test, cfg));
    let mut bundle = AnalysisBundle {
        dataset: store.dataset(),
        ..AnalysisBundle::default()
    };
    for ((c, k), r) in jobs.iter().zip(results) {
        match r {
            Ok(a) => bundle.runs.push(a),
            Err(e) => bundle.warnings.push(format!("{}/run{k}: {e}", c.key())),
        }
    }
    for (key, runs) in store.manifest().failed {
        for (k, msg) in runs {
            bundle.warnings.push(format!("{key}/run{k}: training failed: {msg}"));
        }
    }
    let mut cells: Vec<Cell> = Vec::new();
    for r in &bundle.runs {
        if !cells.iter().any(|c| c.key() == r.cell.key()) {
            cells.push(r.cell);
        }
    }
    bundle.aggregates = cells
        .iter()
        .map(|c| aggregate(c, &bundle.runs_in(c).collect::<Vec<_>>()))
        .collect();
    if let Some((c, runs)) = store.completed().first() {
        if let Ok(s) = store.load_run(c, runs[0]) {
            bundle.eval_metric = Some(s.report.config.eval_metric.name().to_string());
        }
    }
    Ok(bundle)
}

fn csv_bytes(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<Vec<u8>, HarnessError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.into_inner().map_err(|e| HarnessError::Runtime(e.to_string()))
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn analysis_dir(store: &ExperimentStore) -> PathBuf {
    store.dir().join("analysis")
}

fn put(path: &Path, bytes: &[u8]) -> Result<(), HarnessError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    }
    write_atomic(path, bytes)
}

/// Rows of the bold-Γ-by-λ_s table: per (τ, d, λ_r) group, cells in
/// increasing λ_s with the mean bold Γ and whether the group is non-decreasing.
pub fn gamma_trend_rows(bundle: &AnalysisBundle) -> Vec<(Cell, f64, bool)> {
    let mut groups: Vec<(String, Vec<(Cell, f64)>)> = Vec::new();
    for a in &bundle.aggregates {
        let Some(g) = &a.bold_gamma else { continue };
        let key = format!("{}_{}_{}", a.cell.tau, a.cell.d, a.cell.lambda_r);
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, v)) => v.push((a.cell, g.mean)),
            None => groups.push((key, vec![(a.cell, g.mean)])),
        }
    }
    let mut out = Vec::new();
    for (_, mut v) in groups {
        v.sort_by(|a, b| a.0.lambda_s.total_cmp(&b.0.lambda_s));
        let mono = v.windows(2).all(|w| w[1].1 >= w[0].1);
        out.extend(v.into_iter().map(|(c, g)| (c, g, mono)));
    }
    out
}

/// Writes the per-run and aggregate CSVs plus `bundle.json`.
pub fn write_bundle(store: &ExperimentStore, bundle: &AnalysisBundle) -> Result<PathBuf, HarnessError> {
    let dir = analysis_dir(store);
    for r in &bundle.runs {
        let rd = dir.join(r.cell.key()).join(format!("run{}", r.run));
        put(
            &rd.join("smoothness.csv"),
            &csv_bytes(
                &["id", "eta"],
                r.smoothness.per_molecule_eta.iter().map(|(id, e)| vec![id.clone(), e.to_string()]),
            )?,
        )?;
        if let Some(c) = &r.collapse {
            put(
                &rd.join("collapse.csv"),
                &csv_bytes(
                    &["j", "gamma_j", "cev_j"],
                    c.spectrum
                        .iter()
                        .zip(&c.cev_curve)
                        .enumerate()
                        .map(|(j, (g, v))| vec![(j + 1).to_string(), g.to_string(), v.to_string()]),
                )?,
            )?;
        }
    }
    let mut summary = Vec::new();
    for r in &bundle.runs {
        let mut push = |m: &str, v: Option<f64>| {
            if let Some(v) = v {
                summary.push(vec![r.run_id.clone(), m.to_string(), v.to_string()]);
            }
        };
        push("eta_f", Some(r.smoothness.eta_f));
        push("bold_gamma", r.collapse.as_ref().map(|c| c.bold_gamma));
        push("gamma95_index", r.collapse.as_ref().map(|c| c.gamma95_index as f64));
        push("feature_variance", r.collapse.as_ref().map(|c| c.feature_variance));
        push("test_metric", r.test_metric);
    }
    put(&dir.join("summary.csv"), &csv_bytes(&["run_id", "metric", "value"], summary)?)?;
    let stat = |s: &Option<MetricSummary>| {
        [
            opt(s.as_ref().map(|s| s.mean)),
            opt(s.as_ref().and_then(|s| s.stdev)),
        ]
    };
    let agg_rows = bundle.aggregates.iter().map(|a| {
        let mut row = vec![
            a.cell.tau.to_string(),
            a.cell.d.to_string(),
            a.cell.lambda_s.to_string(),
            a.cell.lambda_r.to_string(),
            a.runs.to_string(),
        ];
        for s in [&a.eta_f, &a.bold_gamma, &a.gamma95_index, &a.feature_variance, &a.test_metric] {
            row.extend(stat(s));
        }
        row.push(a.flagged.to_string());
        row
    });
    put(
        &dir.join("aggregate.csv"),
        &csv_bytes(
            &[
                "tau",
                "d",
                "lambda_s",
                "lambda_r",
                "runs",
                "eta_f_mean",
                "eta_f_stdev",
                "bold_gamma_mean",
                "bold_gamma_stdev",
                "gamma95_mean",
                "gamma95_stdev",
                "feature_variance_mean",
                "feature_variance_stdev",
                "test_metric_mean",
                "test_metric_stdev",
                "flagged_runs",
            ],
            agg_rows,
        )?,
    )?;
    let trend = gamma_trend_rows(bundle).into_iter().map(|(c, g, mono)| {
        vec![
            c.tau.to_string(),
            c.d.to_string(),
            c.lambda_r.to_string(),
            c.lambda_s.to_string(),
            g.to_string(),
            mono.to_string(),
        ]
    });
    put(
        &dir.join("gamma_by_lambda_s.csv"),
        &csv_bytes(&["tau", "d", "lambda_r", "lambda_s", "bold_gamma_mean", "group_nondecreasing"], trend)?,
    )?;
    let json = serde_json::to_string_pretty(bundle).expect("bundle serializes");
    put(&dir.join("bundle.json"), json.as_bytes())?;
    Ok(dir)
}

pub fn read_bundle(store: &ExperimentStore) -> Result<AnalysisBundle, HarnessError> {
    let p = analysis_dir(store).join("bundle.json");
    let text = fs::read_to_string(&p).map_err(|e| HarnessError::io(&p, e))?;
    serde_json::from_str(&text).map_err(|e| HarnessError::Runtime(format!("bad bundle {}: {e}", p.display())))
}

/// Test split named in the store's manifest, or the one given explicitly.
pub fn test_records(store: &ExperimentStore, data: Option<&Path>) -> Result<Vec<ConformerRecord>, HarnessError> {
    let path = match data {
        Some(p) => p.to_path_buf(),
        None => store
            .manifest()
            .data_path
            .ok_or_else(|| HarnessError::Config("store does not record its dataset; pass --data".into()))?,
    };
    Ok(supsiam::molgraph::Dataset::open(&path)?.split(Split::Test))
}
