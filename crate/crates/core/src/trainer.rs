//! Supervised training loop: inverse-density batch sampling, per-pass
//! conformer sampling and augmentation, Adam, validation-best checkpoint
//! selection and ensemble summaries.

use std::collections::BTreeMap;
use std::io::Write;

use rand::distr::weighted::WeightedIndex;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::{EncoderConfig, Model, ModelError, PriorStats};
use crate::metrics::{feature_variance, roc_auc, spearman_rho, MetricError};
use crate::molgraph::{
    augment, build_radial_graph, center_coordinates, sample_conformer, ConformerRecord, Dataset, NoiseConfig, Split,
    TaskKind,
};
use crate::objective::{batch_gradients, BatchLossReport, MoleculeSample, ObjectiveConfig, ObjectiveError};
use crate::par::{map_indexed, ExecMode};
use crate::seed::{derive, stream};
use crate::tensor::{Gradients, ParamStore};

pub const WEIGHT_FLOOR: f64 = 1e-3;
pub const REGRESSION_BINS: usize = 10;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("training diverged at epoch {epoch}, batch {batch}: {detail}")]
    Diverged { epoch: usize, batch: usize, detail: String },
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl From<ModelError> for TrainError {
    fn from(e: ModelError) -> Self {
        TrainError::Objective(e.into())
    }
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMetric {
    Rocauc,
    Spearman,
}

impl EvalMetric {
    pub fn for_task(task: TaskKind) -> Self {
        match task {
            TaskKind::Classification => EvalMetric::Rocauc,
            TaskKind::Regression => EvalMetric::Spearman,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            EvalMetric::Rocauc => "rocauc",
            EvalMetric::Spearman => "spearman",
        }
    }

    /// Scores point predictions; `None` when the metric is undefined on
    /// this split (a single class, constant predictions).
    pub fn score(self, predictions: &[f64], labels: &[f64]) -> Result<Option<f64>> {
        let v = match self {
            EvalMetric::Rocauc => {
                let l: Vec<u8> = labels.iter().map(|&y| u8::from(y >= 0.5)).collect();
                roc_auc(predictions, &l, 100)
            }
            EvalMetric::Spearman => spearman_rho(predictions, labels),
        };
        match v {
            Ok(x) => Ok(Some(x)),
            Err(MetricError::Undefined(_)) => Ok(None),
            Err(e) => Err(e.into()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Gradients,
    v: Gradients,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Self {
        Self {
            config,
            step: 0,
            m: Gradients::zeros_like(params),
            v: Gradients::zeros_like(params),
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients) {
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let ids: Vec<_> = params.iter().map(|(id, _)| id).collect();
        for id in ids {
            let k = id.index();
            let g = grads.get(id);
            let (m, v) = (&mut self.m.0[k], &mut self.v.0[k]);
            let p = params.values_mut(id);
            for i in 0..p.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingWeights {
    pub weights: Vec<f64>,
    /// Bin density fraction of each record, before flooring.
    pub p_y: Vec<f64>,
}

/// Inverse-density weights `w_i = 1 - p_y(y_i)`, floored at `floor`.
///
/// Classification bins by class; regression uses `n_bins` equal-width bins
/// over the label range (labels are already in their training scale).
pub fn compute_sampling_weights(labels: &[f64], task: TaskKind, n_bins: usize, floor: f64) -> SamplingWeights {
    let n = labels.len();
    let bin_of: Vec<usize> = match task {
        TaskKind::Classification => labels.iter().map(|&y| usize::from(y >= 0.5)).collect(),
        TaskKind::Regression => {
            let lo = labels.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = labels.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let bins = n_bins.max(1);
            labels
                .iter()
                .map(|&y| {
                    if hi > lo {
                        (((y - lo) / (hi - lo) * bins as f64) as usize).min(bins - 1)
                    } else {
                        0
                    }
                })
                .collect()
        }
    };
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for &b in &bin_of {
        *counts.entry(b).or_default() += 1;
    }
    let p_y: Vec<f64> = bin_of.iter().map(|b| counts[b] as f64 / n as f64).collect();
    let weights = p_y.iter().map(|p| (1.0 - p).max(floor)).collect();
    SamplingWeights { weights, p_y }
}

/// Record indices drawn with replacement, probability proportional to weight.
pub fn draw_batch<R: Rng + ?Sized>(weights: &[f64], batch_size: usize, rng: &mut R) -> Result<Vec<usize>> {
    let dist = WeightedIndex::new(weights).map_err(|e| TrainError::Config(format!("sampling weights: {e}")))?;
    Ok((0..batch_size).map(|_| rng.sample(&dist)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Base seed; every run's streams derive from it.
    pub seed: u64,
    pub instantiations: usize,
    pub repeats: usize,
    pub eval_metric: EvalMetric,
    pub noise: NoiseConfig,
    pub objective: ObjectiveConfig,
    pub regression_bins: usize,
    pub weight_floor: f64,
    #[serde(default)]
    pub exec: ExecMode,
}

impl TrainConfig {
    pub fn for_task(task: TaskKind) -> Self {
        Self {
            epochs: 50,
            batch_size: 32,
            adam: AdamConfig::default(),
            seed: 0,
            instantiations: 5,
            repeats: 2,
            eval_metric: EvalMetric::for_task(task),
            noise: NoiseConfig::default(),
            objective: ObjectiveConfig::default(),
            regression_bins: REGRESSION_BINS,
            weight_floor: WEIGHT_FLOOR,
            exec: ExecMode::default(),
        }
    }

    pub fn runs(&self) -> usize {
        self.instantiations * self.repeats
    }

    /// Run `k` uses weight instantiation `k mod instantiations`; repeats of
    /// an instantiation differ only in their data streams.
    pub fn run_seeds(&self, k: usize) -> RunSeeds {
        RunSeeds {
            init: derive(self.seed, &[0, (k % self.instantiations.max(1)) as u64]),
            stream: derive(self.seed, &[1, k as u64]),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(TrainError::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.adam.lr >= 0.0) || !self.adam.lr.is_finite() {
            return Err(TrainError::Config(format!("invalid learning rate {}", self.adam.lr)));
        }
        if !(self.noise.tau >= 0.0) || !self.noise.tau.is_finite() {
            return Err(TrainError::Config(format!("invalid noise tau {}", self.noise.tau)));
        }
        if self.noise.samples == 0 {
            return Err(TrainError::Config("noise samples must include the parent (A >= 1)".into()));
        }
        if self.objective.posterior_samples == 0 {
            return Err(TrainError::Config("posterior samples must be positive".into()));
        }
        self.objective.weights.validate(self.noise.samples)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunSeeds {
    pub init: u64,
    pub stream: u64,
}

/// Samples a conformer, centers it and builds the parent plus `A - 1`
/// noised graphs for one record.
pub fn prepare_sample(record: &ConformerRecord, noise: &NoiseConfig, cutoff: f64, seed: u64) -> MoleculeSample {
    let mut rng = stream(seed, &[0]);
    let c = sample_conformer(record, &mut rng);
    let parent = center_coordinates(&record.conformers[c]);
    let mut graphs = Vec::with_capacity(noise.samples);
    graphs.push(build_radial_graph(&parent, &record.atomic_numbers, cutoff));
    for copy in augment(&parent, noise, &mut rng) {
        graphs.push(build_radial_graph(&copy, &record.atomic_numbers, cutoff));
    }
    MoleculeSample {
        graphs,
        label: record.label,
        seed: derive(seed, &[1]),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochOutcome {
    pub report: BatchLossReport,
    /// Feature variance of the parent embeddings seen this epoch.
    pub feature_variance: Option<f64>,
}

fn variance_of(rows: &[Vec<f64>]) -> Option<f64> {
    (rows.len() >= 2).then(|| feature_variance(rows).ok()).flatten()
}

/// One pass of `ceil(n / batch_size)` weighted batches with an Adam step each.
pub fn train_epoch(
    model: &mut Model,
    adam: &mut Adam,
    records: &[ConformerRecord],
    weights: &SamplingWeights,
    cfg: &TrainConfig,
    epoch: usize,
    stream_seed: u64,
) -> Result<EpochOutcome> {
    if records.is_empty() {
        return Err(TrainError::Config("empty training split".into()));
    }
    let n_batches = records.len().div_ceil(cfg.batch_size);
    let mut reports = Vec::with_capacity(n_batches);
    let mut zs = Vec::new();
    for b in 0..n_batches {
        let mut rng = stream(stream_seed, &[epoch as u64, b as u64]);
        let idx = draw_batch(&weights.weights, cfg.batch_size, &mut rng)?;
        let batch: Vec<MoleculeSample> = map_indexed(cfg.exec, idx.len(), |i| {
            let seed = derive(stream_seed, &[epoch as u64, b as u64, i as u64]);
            prepare_sample(&records[idx[i]], &cfg.noise, model.config.cutoff, seed)
        });
        let (report, grads, outcomes) = batch_gradients(model, &batch, &cfg.objective, true, true, cfg.exec)?;
        let grads = grads.expect("gradients requested");
        if !report.total.is_finite() || !grads.is_finite() {
            return Err(TrainError::Diverged {
                epoch,
                batch: b,
                detail: format!("loss {} with finite gradients: {}", report.total, grads.is_finite()),
            });
        }
        adam.step(&mut model.params, &grads);
        reports.push(report);
        zs.extend(outcomes.into_iter().map(|o| o.z_parent));
    }
    Ok(EpochOutcome {
        report: BatchLossReport::mean(&reports),
        feature_variance: variance_of(&zs),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub report: BatchLossReport,
    pub metric: Option<f64>,
    pub feature_variance: Option<f64>,
    pub predictions: Vec<f64>,
    /// Parent projected embeddings, one row per record.
    pub embeddings: Vec<Vec<f64>>,
}

/// Eval-mode losses, point predictions and metric on `records`.
pub fn evaluate(
    model: &Model,
    records: &[ConformerRecord],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<Evaluation> {
    if records.is_empty() {
        return Err(TrainError::Config("cannot evaluate an empty split".into()));
    }
    let batch: Vec<MoleculeSample> = map_indexed(cfg.exec, records.len(), |i| {
        prepare_sample(&records[i], &cfg.noise, model.config.cutoff, derive(seed, &[i as u64]))
    });
    let (report, _, outcomes) = batch_gradients(model, &batch, &cfg.objective, false, false, cfg.exec)?;
    let predictions = outcomes
        .iter()
        .map(|o| model.point_prediction(o.parent_posterior))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let labels: Vec<f64> = records.iter().map(|r| r.label).collect();
    let metric = cfg.eval_metric.score(&predictions, &labels)?;
    let embeddings: Vec<Vec<f64>> = outcomes.into_iter().map(|o| o.z_parent).collect();
    Ok(Evaluation {
        report,
        metric,
        feature_variance: variance_of(&embeddings),
        predictions,
        embeddings,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub split: Split,
    pub l_y: f64,
    pub l_s: f64,
    pub l_r: f64,
    pub total: f64,
    pub eval_metric: Option<f64>,
    pub feature_variance: Option<f64>,
}

impl EpochRow {
    fn new(epoch: usize, split: Split, r: &BatchLossReport, metric: Option<f64>, var: Option<f64>) -> Self {
        Self {
            epoch,
            split,
            l_y: r.l_y,
            l_s: r.l_s,
            l_r: r.l_r,
            total: r.total,
            eval_metric: metric,
            feature_variance: var,
        }
    }

    pub fn report(&self) -> BatchLossReport {
        BatchLossReport {
            total: self.total,
            l_y: self.l_y,
            l_s: self.l_s,
            l_r: self.l_r,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub run: usize,
    pub seeds: RunSeeds,
    pub config: TrainConfig,
    pub encoder: EncoderConfig,
    pub epochs: Vec<EpochRow>,
    /// 1-based epoch whose weights were kept.
    pub best_epoch: usize,
    pub best_valid_metric: Option<f64>,
    pub test: Option<TestSummary>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestSummary {
    pub report: BatchLossReport,
    pub metric: Option<f64>,
    pub feature_variance: Option<f64>,
}

impl RunReport {
    pub fn rows(&self, split: Split) -> impl Iterator<Item = &EpochRow> {
        self.epochs.iter().filter(move |r| r.split == split)
    }

    pub fn last_row(&self, split: Split) -> Option<&EpochRow> {
        self.rows(split).last()
    }

    pub fn write_epochs_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        for row in &self.epochs {
            wr.serialize(row)?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn read_epochs_csv<R: std::io::Read>(r: R) -> Result<Vec<EpochRow>> {
        let mut rd = csv::Reader::from_reader(r);
        Ok(rd.deserialize().collect::<std::result::Result<Vec<EpochRow>, _>>()?)
    }

    /// Named scalar outcomes used for ensemble summaries.
    pub fn scalar_metrics(&self) -> BTreeMap<String, f64> {
        let mut out = BTreeMap::new();
        if let Some(v) = self.best_valid_metric {
            out.insert("best_valid_metric".into(), v);
        }
        if let Some(t) = &self.test {
            if let Some(v) = t.metric {
                out.insert(format!("test_{}", self.config.eval_metric.name()), v);
            }
            out.insert("test_l_y".into(), t.report.l_y);
            out.insert("test_l_s".into(), t.report.l_s);
            out.insert("test_total".into(), t.report.total);
            if let Some(v) = t.feature_variance {
                out.insert("test_feature_variance".into(), v);
            }
        }
        if let Some(r) = self.last_row(Split::Train) {
            out.insert("final_train_cosine_distance".into(), r.report().cosine_distance());
        }
        out
    }
}

/// Index of the best metric value (first on ties); undefined values never win.
pub fn select_best(metrics: &[Option<f64>]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, m) in metrics.iter().enumerate() {
        if let Some(v) = *m {
            if v.is_finite() && best.is_none_or(|(_, b)| v > b) {
                best = Some((i, v));
            }
        }
    }
    best.map(|(i, _)| i)
}

#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Vec<ConformerRecord>,
    pub valid: Vec<ConformerRecord>,
    pub test: Vec<ConformerRecord>,
}

impl Splits {
    pub fn from_dataset(ds: &Dataset) -> Self {
        Self {
            train: ds.split(Split::Train),
            valid: ds.split(Split::Valid),
            test: ds.split(Split::Test),
        }
    }
}

pub struct FitOutcome {
    pub report: RunReport,
    pub best: Model,
}

/// Trains `model` for `cfg.epochs` and keeps the weights of the epoch with
/// the best validation metric. Test metrics come from those weights.
pub fn fit(mut model: Model, splits: &Splits, cfg: &TrainConfig, run: usize, seeds: RunSeeds) -> Result<FitOutcome> {
    cfg.validate()?;
    if splits.valid.is_empty() {
        return Err(TrainError::Config("validation split is empty".into()));
    }
    if splits.train.is_empty() {
        return Err(TrainError::Config("training split is empty".into()));
    }
    if model.task == TaskKind::Regression && model.prior.is_none() {
        let labels: Vec<f64> = splits.train.iter().map(|r| r.label).collect();
        model.prior = Some(PriorStats::from_labels(&labels));
    }
    let labels: Vec<f64> = splits.train.iter().map(|r| r.label).collect();
    let weights = compute_sampling_weights(&labels, model.task, cfg.regression_bins, cfg.weight_floor);
    let mut adam = Adam::new(cfg.adam, &model.params);
    let mut rows = Vec::with_capacity(2 * cfg.epochs);
    let mut best: Option<(usize, f64, ParamStore)> = None;
    for epoch in 1..=cfg.epochs {
        let train = train_epoch(&mut model, &mut adam, &splits.train, &weights, cfg, epoch, seeds.stream)?;
        rows.push(EpochRow::new(epoch, Split::Train, &train.report, None, train.feature_variance));
        let valid = evaluate(&model, &splits.valid, cfg, derive(seeds.stream, &[u64::MAX, epoch as u64]))?;
        rows.push(EpochRow::new(epoch, Split::Valid, &valid.report, valid.metric, valid.feature_variance));
        if let Some(m) = valid.metric.filter(|m| m.is_finite()) {
            if best.as_ref().is_none_or(|(_, b, _)| m > *b) {
                best = Some((epoch, m, model.params.clone()));
            }
        }
    }
    let (best_epoch, best_valid_metric) = match best {
        Some((e, m, params)) => {
            model.params = params;
            (e, Some(m))
        }
        None => (cfg.epochs, None),
    };
    let test = if splits.test.is_empty() {
        None
    } else {
        let ev = evaluate(&model, &splits.test, cfg, derive(seeds.stream, &[u64::MAX - 1]))?;
        Some(TestSummary {
            report: ev.report,
            metric: ev.metric,
            feature_variance: ev.feature_variance,
        })
    };
    Ok(FitOutcome {
        report: RunReport {
            run,
            seeds,
            config: *cfg,
            encoder: model.config,
            epochs: rows,
            best_epoch,
            best_valid_metric,
            test,
        },
        best: model,
    })
}

/// Builds run `k` of an ensemble from scratch and trains it.
pub fn train_run(encoder: &EncoderConfig, task: TaskKind, splits: &Splits, cfg: &TrainConfig, k: usize) -> Result<FitOutcome> {
    let seeds = cfg.run_seeds(k);
    let model = Model::new(*encoder, task, seeds.init)?;
    fit(model, splits, cfg, k, seeds)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub metric: String,
    pub n: usize,
    pub mean: f64,
    /// Sample standard deviation; absent with fewer than two values.
    pub stdev: Option<f64>,
}

pub fn summarize(metric: &str, values: &[f64]) -> Option<MetricSummary> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let mean = sorted.iter().sum::<f64>() / n as f64;
    let stdev = (n >= 2).then(|| (sorted.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt());
    Some(MetricSummary {
        metric: metric.to_string(),
        n,
        mean,
        stdev,
    })
}

/// Mean and sample stdev of every scalar metric across runs.
pub fn ensemble_summary(reports: &[RunReport]) -> Vec<MetricSummary> {
    let mut values: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in reports {
        for (k, v) in r.scalar_metrics() {
            values.entry(k).or_default().push(v);
        }
    }
    values.iter().filter_map(|(k, v)| summarize(k, v)).collect()
}
