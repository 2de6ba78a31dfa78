//! Combined supervised + Siamese objective.
//!
//! For one molecule with samples `a = 1..A` (parent first):
//!
//! ```text
//! L = (1/A) sum_a (ly * Ly(a) + lr * ||z_a||) + (1/(A-1)) sum_{a>=2} ls * Ls(z_1, z_a)
//! Ls(z_1, z_a) = -1/2 [cos(z_1, sg(z_a)) + cos(z_a, sg(z_1))]
//! ```
//!
//! Batches average this over molecules.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::{sample_predictions, Model, ModelError, Pass, Posterior, PriorStats};
use crate::molgraph::{RadialGraph, TaskKind};
use crate::par::{map_slice, ExecMode};
use crate::seed::stream;
use crate::tensor::{Gradients, Tape, TensorError, Var};

pub const BCE_CLAMP: f64 = 1e-7;

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("validation: {0}")]
    Validation(String),
}

impl From<TensorError> for ObjectiveError {
    fn from(e: TensorError) -> Self {
        ObjectiveError::Model(ModelError::Tensor(e))
    }
}

pub type Result<T> = std::result::Result<T, ObjectiveError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_y: f64,
    pub lambda_s: f64,
    pub lambda_r: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_y: 1.0,
            lambda_s: 0.0,
            lambda_r: 0.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self, samples: usize) -> Result<()> {
        if [self.lambda_y, self.lambda_s, self.lambda_r].iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(ObjectiveError::Config("loss weights must be finite and >= 0".into()));
        }
        if samples == 0 {
            return Err(ObjectiveError::Config("need at least one sample per conformer".into()));
        }
        if self.lambda_s > 0.0 && samples < 2 {
            return Err(ObjectiveError::Config(format!(
                "Siamese weight {} requires at least 2 samples per conformer (parent + augmentation), got {samples}",
                self.lambda_s
            )));
        }
        Ok(())
    }
}

/// Unweighted loss components averaged over a batch, plus the weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BatchLossReport {
    pub total: f64,
    pub l_y: f64,
    pub l_s: f64,
    pub l_r: f64,
}

impl BatchLossReport {
    pub fn recompose(&self, w: &LossWeights) -> f64 {
        w.lambda_y * self.l_y + w.lambda_s * self.l_s + w.lambda_r * self.l_r
    }

    pub fn mean(reports: &[BatchLossReport]) -> BatchLossReport {
        let n = reports.len().max(1) as f64;
        let mut out = BatchLossReport::default();
        for r in reports {
            out.total += r.total;
            out.l_y += r.l_y;
            out.l_s += r.l_s;
            out.l_r += r.l_r;
        }
        out.total /= n;
        out.l_y /= n;
        out.l_s /= n;
        out.l_r /= n;
        out
    }

    /// Mean cosine distance between parent and augmented embeddings.
    pub fn cosine_distance(&self) -> f64 {
        1.0 + self.l_s
    }
}

/// `-1/2 [cos(z1, sg(za)) + cos(za, sg(z1))]` averaged over augmentations.
///
/// With `stopgrad = false` the detach is skipped on both sides (ablation).
pub fn siamese_loss(tape: &mut Tape, z_parent: Var, z_augs: &[Var], stopgrad: bool) -> Result<Var> {
    if z_augs.is_empty() {
        return Err(ObjectiveError::Config("Siamese loss needs at least one augmentation".into()));
    }
    let mut acc: Option<Var> = None;
    for &za in z_augs {
        let (za_t, z1_t) = if stopgrad {
            (tape.detach(za), tape.detach(z_parent))
        } else {
            (za, z_parent)
        };
        let c1 = tape.cosine_similarity(z_parent, za_t)?;
        let c2 = tape.cosine_similarity(za, z1_t)?;
        let s = tape.add(c1, c2)?;
        let term = tape.mul_scalar(s, -0.5);
        acc = Some(match acc {
            Some(a) => tape.add(a, term)?,
            None => term,
        });
    }
    Ok(tape.mul_scalar(acc.expect("non-empty"), 1.0 / z_augs.len() as f64))
}

/// Euclidean norm of a projected embedding.
pub fn l2_penalty(tape: &mut Tape, z: Var) -> Var {
    tape.norm(z)
}

fn bce(tape: &mut Tape, probs: Var, y: f64) -> Result<Var> {
    let p = tape.clamp(probs, BCE_CLAMP, 1.0 - BCE_CLAMP);
    let lp = tape.log(p)?;
    let q = tape.neg(p)?;
    let q = tape.add_scalar(q, 1.0);
    let lq = tape.log(q)?;
    let a = tape.mul_scalar(lp, y);
    let b = tape.mul_scalar(lq, 1.0 - y);
    let s = tape.add(a, b)?;
    let m = tape.mean(s)?;
    Ok(tape.neg(m)?)
}

fn mse(tape: &mut Tape, preds: Var, y: f64) -> Result<Var> {
    let d = tape.add_scalar(preds, -y);
    let sq = tape.square(d)?;
    Ok(tape.mean(sq)?)
}

/// Sampled-prediction target loss averaged over the given posteriors.
#[allow(clippy::too_many_arguments)]
pub fn target_loss<R: rand::Rng + ?Sized>(
    tape: &mut Tape,
    posteriors: &[(Var, Var)],
    y: f64,
    task: TaskKind,
    m: usize,
    prior: Option<&PriorStats>,
    rng: &mut R,
) -> Result<Var> {
    if task == TaskKind::Classification && y != 0.0 && y != 1.0 {
        return Err(ObjectiveError::Validation(format!("classification label {y} not in {{0, 1}}")));
    }
    if posteriors.is_empty() {
        return Err(ObjectiveError::Config("target loss needs at least one posterior".into()));
    }
    let mut acc: Option<Var> = None;
    for &(mu, sigma) in posteriors {
        let preds = sample_predictions(tape, mu, sigma, m, task, prior, rng)?;
        let l = match task {
            TaskKind::Classification => bce(tape, preds, y)?,
            TaskKind::Regression => mse(tape, preds, y)?,
        };
        acc = Some(match acc {
            Some(a) => tape.add(a, l)?,
            None => l,
        });
    }
    Ok(tape.mul_scalar(acc.expect("non-empty"), 1.0 / posteriors.len() as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    pub weights: LossWeights,
    /// Posterior draws per sample for the target loss.
    pub posterior_samples: usize,
    pub stopgrad: bool,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            posterior_samples: 10,
            stopgrad: true,
        }
    }
}

/// One molecule ready for the objective: parent graph first, then augmentations.
#[derive(Debug, Clone)]
pub struct MoleculeSample {
    pub graphs: Vec<RadialGraph>,
    pub label: f64,
    /// Seeds this molecule's dropout and posterior-sampling streams.
    pub seed: u64,
}

/// Per-molecule graph handles after building the objective on a tape.
#[derive(Debug, Clone)]
pub struct MoleculeTerms {
    pub total: Var,
    pub l_y: Var,
    pub l_s: Option<Var>,
    pub l_r: Var,
    pub z: Vec<Var>,
    /// `(mu, sigma)` per sample, parent first.
    pub posteriors: Vec<(Var, Var)>,
}

impl MoleculeTerms {
    pub fn report(&self, tape: &Tape) -> BatchLossReport {
        BatchLossReport {
            total: tape.item(self.total),
            l_y: tape.item(self.l_y),
            l_s: self.l_s.map_or(0.0, |v| tape.item(v)),
            l_r: tape.item(self.l_r),
        }
    }
}

/// Records the full objective for one molecule on `tape`.
pub fn molecule_objective(
    tape: &mut Tape,
    model: &Model,
    sample: &MoleculeSample,
    cfg: &ObjectiveConfig,
    training: bool,
) -> Result<MoleculeTerms> {
    let a = sample.graphs.len();
    cfg.weights.validate(a)?;
    let mut dropout_rng = stream(sample.seed, &[0]);
    let mut draw_rng = stream(sample.seed, &[1]);
    let mut zs = Vec::with_capacity(a);
    let mut posts = Vec::with_capacity(a);
    for g in &sample.graphs {
        let mut pass = if training {
            Pass::train(&mut dropout_rng)
        } else {
            Pass::eval()
        };
        let out = model.forward(tape, g, &mut pass)?;
        zs.push(out.z);
        posts.push((out.mu, out.sigma));
    }
    let l_y = target_loss(
        tape,
        &posts,
        sample.label,
        model.task,
        cfg.posterior_samples,
        model.prior.as_ref(),
        &mut draw_rng,
    )?;
    let mut l_r_acc = l2_penalty(tape, zs[0]);
    for &z in &zs[1..] {
        let n = l2_penalty(tape, z);
        l_r_acc = tape.add(l_r_acc, n)?;
    }
    let l_r = tape.mul_scalar(l_r_acc, 1.0 / a as f64);
    let l_s = if a >= 2 {
        Some(siamese_loss(tape, zs[0], &zs[1..], cfg.stopgrad)?)
    } else {
        None
    };
    let w = cfg.weights;
    let wy = tape.mul_scalar(l_y, w.lambda_y);
    let wr = tape.mul_scalar(l_r, w.lambda_r);
    let mut total = tape.add(wy, wr)?;
    if let Some(s) = l_s {
        let ws = tape.mul_scalar(s, w.lambda_s);
        total = tape.add(total, ws)?;
    }
    Ok(MoleculeTerms {
        total,
        l_y,
        l_s,
        l_r,
        z: zs,
        posteriors: posts,
    })
}

/// The batch objective on one tape, ready for `backward`.
pub struct BatchLoss {
    pub loss: Var,
    pub report: BatchLossReport,
    pub terms: Vec<MoleculeTerms>,
}

/// Builds the batch-mean objective on a single tape.
pub fn combined_loss(
    tape: &mut Tape,
    model: &Model,
    batch: &[MoleculeSample],
    cfg: &ObjectiveConfig,
    training: bool,
) -> Result<BatchLoss> {
    if batch.is_empty() {
        return Err(ObjectiveError::Config("empty batch".into()));
    }
    let mut terms = Vec::with_capacity(batch.len());
    let mut sum: Option<Var> = None;
    for s in batch {
        let t = molecule_objective(tape, model, s, cfg, training)?;
        sum = Some(match sum {
            Some(acc) => tape.add(acc, t.total)?,
            None => t.total,
        });
        terms.push(t);
    }
    let loss = tape.mul_scalar(sum.expect("non-empty batch"), 1.0 / batch.len() as f64);
    let reports: Vec<BatchLossReport> = terms.iter().map(|t| t.report(tape)).collect();
    let mut report = BatchLossReport::mean(&reports);
    report.total = tape.item(loss);
    Ok(BatchLoss { loss, report, terms })
}

/// Result of evaluating one molecule on its own tape.
#[derive(Debug, Clone)]
pub struct MoleculeOutcome {
    pub report: BatchLossReport,
    pub grads: Option<Gradients>,
    /// Projected embedding of the parent sample.
    pub z_parent: Vec<f64>,
    pub parent_posterior: Posterior,
}

/// Batch-mean objective and (optionally) its parameter gradients, with each
/// molecule on a separate tape. Per-molecule gradients are summed in batch
/// order, so the result does not depend on `mode`.
pub fn batch_gradients(
    model: &Model,
    batch: &[MoleculeSample],
    cfg: &ObjectiveConfig,
    training: bool,
    with_grads: bool,
    mode: ExecMode,
) -> Result<(BatchLossReport, Option<Gradients>, Vec<MoleculeOutcome>)> {
    if batch.is_empty() {
        return Err(ObjectiveError::Config("empty batch".into()));
    }
    let scale = 1.0 / batch.len() as f64;
    let outcomes: Vec<Result<MoleculeOutcome>> = map_slice(mode, batch, |s| {
        let mut tape = Tape::new();
        let t = molecule_objective(&mut tape, model, s, cfg, training)?;
        let grads = if with_grads {
            let scaled = tape.mul_scalar(t.total, scale);
            tape.backward(scaled)?;
            Some(tape.param_grads(&model.params))
        } else {
            None
        };
        Ok(MoleculeOutcome {
            report: t.report(&tape),
            grads,
            z_parent: tape.values(t.z[0]).to_vec(),
            parent_posterior: Posterior {
                mu: tape.item(t.posteriors[0].0),
                sigma: tape.item(t.posteriors[0].1),
            },
        })
    });
    let outcomes = outcomes.into_iter().collect::<Result<Vec<_>>>()?;
    let grads = if with_grads {
        let mut total = Gradients::zeros_like(&model.params);
        for o in &outcomes {
            total.add_assign(o.grads.as_ref().expect("requested"));
        }
        Some(total)
    } else {
        None
    };
    let reports: Vec<BatchLossReport> = outcomes.iter().map(|o| o.report).collect();
    Ok((BatchLossReport::mean(&reports), grads, outcomes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use crate::molgraph::build_radial_graph;

    fn scalar_loss(build: impl Fn(&mut Tape) -> Var) -> f64 {
        let mut t = Tape::new();
        let v = build(&mut t);
        t.item(v)
    }

    #[test]
    fn siamese_examples() {
        let v = scalar_loss(|t| {
            let a = t.constant(vec![2], vec![0.3, 0.4]).unwrap();
            let b = t.constant(vec![2], vec![0.3, 0.4]).unwrap();
            siamese_loss(t, a, &[b], true).unwrap()
        });
        assert!((v + 1.0).abs() < 1e-15);
        let v = scalar_loss(|t| {
            let a = t.constant(vec![2], vec![1., 0.]).unwrap();
            let b = t.constant(vec![2], vec![0., 1.]).unwrap();
            siamese_loss(t, a, &[b], true).unwrap()
        });
        assert_eq!(v, 0.0);
        let v = scalar_loss(|t| {
            let a = t.constant(vec![2], vec![1., 0.]).unwrap();
            let b = t.constant(vec![2], vec![1., 1.]).unwrap();
            siamese_loss(t, a, &[b], true).unwrap()
        });
        assert!((v + std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        let mut t = Tape::new();
        let a = t.constant(vec![2], vec![1., 0.]).unwrap();
        let z = t.constant(vec![2], vec![0., 0.]).unwrap();
        assert!(siamese_loss(&mut t, a, &[z], true).is_err());
        assert!(siamese_loss(&mut t, a, &[], true).is_err());
    }

    #[test]
    fn siamese_symmetry_and_scale_invariance() {
        let a = vec![0.3, -1.2, 0.7];
        let b = vec![1.1, 0.4, -0.2];
        let f = |x: &[f64], y: &[f64]| {
            scalar_loss(|t| {
                let p = t.constant(vec![3], x.to_vec()).unwrap();
                let q = t.constant(vec![3], y.to_vec()).unwrap();
                siamese_loss(t, p, &[q], true).unwrap()
            })
        };
        assert!((f(&a, &b) - f(&b, &a)).abs() < 1e-15);
        let scaled: Vec<f64> = a.iter().map(|x| x * 7.5).collect();
        assert!((f(&a, &b) - f(&scaled, &b)).abs() < 1e-14);
    }

    #[test]
    fn l2_penalty_examples() {
        let mut t = Tape::new();
        let z = t.constant(vec![2], vec![0., 0.]).unwrap();
        let n = l2_penalty(&mut t, z);
        assert_eq!(t.item(n), 0.0);
        let z = t.variable(vec![2], vec![3., 4.]).unwrap();
        let n = l2_penalty(&mut t, z);
        assert_eq!(t.item(n), 5.0);
        t.backward(n).unwrap();
        let g = t.grad(z).unwrap();
        assert!((g[0] - 0.6).abs() < 1e-15 && (g[1] - 0.8).abs() < 1e-15);
        let h = 1e-6;
        let fd0 = (((3.0f64 + h).powi(2) + 16.0).sqrt() - ((3.0f64 - h).powi(2) + 16.0).sqrt()) / (2.0 * h);
        assert!((fd0 - 0.6).abs() < 1e-8);
        // 1-homogeneous
        let z = t.constant(vec![2], vec![6., 8.]).unwrap();
        let n = l2_penalty(&mut t, z);
        assert_eq!(t.item(n), 10.0);
    }

    #[test]
    fn target_loss_examples() {
        let mut rng = stream(1, &[]);
        let mut t = Tape::new();
        let tiny = t.constant(vec![1], vec![1e-300]).unwrap();
        let big = t.constant(vec![1], vec![50.0]).unwrap();
        let zero = t.constant(vec![1], vec![0.0]).unwrap();
        let l = target_loss(&mut t, &[(big, tiny)], 1.0, TaskKind::Classification, 5, None, &mut rng).unwrap();
        // clamped at 1 - 1e-7
        assert!(t.item(l) < 1.1e-7);
        let l = target_loss(&mut t, &[(zero, tiny)], 1.0, TaskKind::Classification, 5, None, &mut rng).unwrap();
        assert!((t.item(l) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((t.item(l) - 0.6931).abs() < 1e-4);
        let prior = PriorStats { mu_t: 0.0, sigma_t: 1.0 };
        let y = crate::tensor::tanhshrink(1.0);
        let one = t.constant(vec![1], vec![1.0]).unwrap();
        let l = target_loss(&mut t, &[(one, tiny)], y, TaskKind::Regression, 5, Some(&prior), &mut rng).unwrap();
        assert_eq!(t.item(l), 0.0);
        assert!(matches!(
            target_loss(&mut t, &[(one, tiny)], 0.5, TaskKind::Classification, 5, None, &mut rng),
            Err(ObjectiveError::Validation(_))
        ));
    }

    fn fixture(samples: usize, tau: f64, seed: u64) -> (Model, Vec<MoleculeSample>) {
        let mut model = Model::new(EncoderConfig::with_hidden_dim(6), TaskKind::Regression, seed).unwrap();
        model.prior = Some(PriorStats { mu_t: 0.5, sigma_t: 2.0 });
        let mut rng = stream(seed, &[9]);
        let batch = (0..3)
            .map(|i| {
                let parent: Vec<[f64; 3]> = (0..4).map(|k| [k as f64 * 1.2, (i + k) as f64 * 0.3, 0.1]).collect();
                let mut graphs = vec![build_radial_graph(&parent, &[6, 7, 8, 6], 4.0)];
                let cfg = crate::molgraph::NoiseConfig { tau, samples, seed: 0 };
                for c in crate::molgraph::augment(&parent, &cfg, &mut rng) {
                    graphs.push(build_radial_graph(&c, &[6, 7, 8, 6], 4.0));
                }
                MoleculeSample {
                    graphs,
                    label: i as f64 * 0.4,
                    seed: 100 + i as u64,
                }
            })
            .collect();
        (model, batch)
    }

    #[test]
    fn combined_loss_examples() {
        let (model, batch) = fixture(2, 0.1, 1);
        let w = LossWeights { lambda_y: 1.0, lambda_s: 0.0, lambda_r: 0.0 };
        let cfg = ObjectiveConfig { weights: w, ..Default::default() };
        let mut t = Tape::new();
        let b = combined_loss(&mut t, &model, &batch, &cfg, true).unwrap();
        assert_eq!(b.report.total, b.report.l_y);

        let (model, batch) = fixture(2, 0.0, 2);
        let cfg = ObjectiveConfig {
            weights: LossWeights { lambda_y: 0.0, lambda_s: 1.0, lambda_r: 0.0 },
            ..Default::default()
        };
        let mut t = Tape::new();
        // eval mode: identical parent and copy give identical embeddings
        let b = combined_loss(&mut t, &model, &batch, &cfg, false).unwrap();
        assert!((b.report.total + 1.0).abs() < 1e-12);

        let bad = ObjectiveConfig {
            weights: LossWeights { lambda_y: 1.0, lambda_s: 10.0, lambda_r: 0.0 },
            ..Default::default()
        };
        let (model, batch) = fixture(1, 0.1, 3);
        let mut t = Tape::new();
        assert!(matches!(
            combined_loss(&mut t, &model, &batch, &bad, true),
            Err(ObjectiveError::Config(_))
        ));
    }

    #[test]
    fn per_molecule_tapes_match_single_tape() {
        let (model, batch) = fixture(3, 0.2, 4);
        let cfg = ObjectiveConfig {
            weights: LossWeights { lambda_y: 1.0, lambda_s: 0.7, lambda_r: 0.3 },
            posterior_samples: 4,
            stopgrad: true,
        };
        let mut t = Tape::new();
        let b = combined_loss(&mut t, &model, &batch, &cfg, true).unwrap();
        t.backward(b.loss).unwrap();
        let single = t.param_grads(&model.params);
        for mode in [ExecMode::Sequential, ExecMode::Parallel] {
            let (rep, grads, _) = batch_gradients(&model, &batch, &cfg, true, true, mode).unwrap();
            assert!((rep.total - b.report.total).abs() < 1e-12);
            assert!((rep.recompose(&cfg.weights) - rep.total).abs() < 1e-10);
            let grads = grads.unwrap();
            for (x, y) in grads.0.iter().flatten().zip(single.0.iter().flatten()) {
                assert!((x - y).abs() <= 1e-12 * (1.0 + y.abs()));
            }
        }
        let seq = batch_gradients(&model, &batch, &cfg, true, true, ExecMode::Sequential).unwrap();
        let par = batch_gradients(&model, &batch, &cfg, true, true, ExecMode::Parallel).unwrap();
        assert_eq!(seq.1, par.1);
    }

    #[test]
    fn zero_siamese_weights_reduce_to_target_gradient() {
        let (model, batch) = fixture(2, 0.1, 5);
        let cfg = ObjectiveConfig::default();
        let mut t = Tape::new();
        let b = combined_loss(&mut t, &model, &batch[..1], &cfg, true).unwrap();
        t.backward(b.loss).unwrap();
        let full = t.param_grads(&model.params);

        // rebuild only the target term with the same streams
        let s = &batch[0];
        let mut t = Tape::new();
        let mut dropout_rng = stream(s.seed, &[0]);
        let mut draw_rng = stream(s.seed, &[1]);
        let mut posts = Vec::new();
        for g in &s.graphs {
            let out = model.forward(&mut t, g, &mut Pass::train(&mut dropout_rng)).unwrap();
            posts.push((out.mu, out.sigma));
        }
        let l = target_loss(&mut t, &posts, s.label, model.task, 10, model.prior.as_ref(), &mut draw_rng).unwrap();
        t.backward(l).unwrap();
        let only = t.param_grads(&model.params);
        assert_eq!(full, only);
    }
}
