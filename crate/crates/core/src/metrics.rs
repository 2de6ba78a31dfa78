//! Analysis metrics: posterior manifold smoothness, embedding feature
//! variance, cumulative explained variance of the embedding spectrum,
//! thresholded ROC-AUC and Spearman rank correlation.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::{Model, ModelError, Posterior};
use crate::molgraph::{augment, build_radial_graph, center_coordinates, sample_conformer, ConformerRecord, NoiseConfig};
use crate::par::{map_indexed, ExecMode};
use crate::seed::stream;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("numeric domain violation: {0}")]
    Domain(String),
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("metric undefined: {0}")]
    Undefined(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, MetricError>;

/// `KL(p || q)` between univariate Gaussians.
pub fn gaussian_kl(p: Posterior, q: Posterior) -> Result<f64> {
    if !(p.sigma > 0.0) || !(q.sigma > 0.0) {
        return Err(MetricError::Domain(format!(
            "sigmas must be positive, got {} and {}",
            p.sigma, q.sigma
        )));
    }
    let dm = q.mu - p.mu;
    Ok(q.sigma.ln() - p.sigma.ln() + (p.sigma * p.sigma + dm * dm) / (2.0 * q.sigma * q.sigma) - 0.5)
}

/// Mean of `1 - KL(parent || augmented)` over a molecule's noised copies.
pub fn molecule_smoothness(parent: Posterior, augmented: &[Posterior]) -> Result<f64> {
    if augmented.is_empty() {
        return Err(MetricError::Contract("smoothness needs at least one augmented sample".into()));
    }
    let mut s = 0.0;
    for &q in augmented {
        s += 1.0 - gaussian_kl(parent, q)?;
    }
    Ok(s / augmented.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmoothnessConfig {
    pub tau: f64,
    /// Samples per conformer, parent included.
    pub samples: usize,
    pub seed: u64,
}

impl Default for SmoothnessConfig {
    fn default() -> Self {
        Self {
            tau: 0.1,
            samples: 10,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothnessReport {
    pub per_molecule_eta: Vec<(String, f64)>,
    pub eta_f: f64,
    pub eval_tau: f64,
    pub eval_samples: usize,
}

impl SmoothnessReport {
    pub fn from_values(per_molecule_eta: Vec<(String, f64)>, cfg: &SmoothnessConfig) -> Self {
        let n = per_molecule_eta.len().max(1) as f64;
        let eta_f = per_molecule_eta.iter().map(|(_, e)| e).sum::<f64>() / n;
        Self {
            per_molecule_eta,
            eta_f,
            eval_tau: cfg.tau,
            eval_samples: cfg.samples,
        }
    }
}

/// Anything that maps a radial graph to a predicted posterior.
pub trait PosteriorModel: Sync {
    fn posterior_of(&self, graph: &crate::molgraph::RadialGraph) -> Result<Posterior>;
    fn cutoff(&self) -> f64;
}

impl PosteriorModel for Model {
    fn posterior_of(&self, graph: &crate::molgraph::RadialGraph) -> Result<Posterior> {
        Ok(self.posterior(graph)?)
    }

    fn cutoff(&self) -> f64 {
        self.config.cutoff
    }
}

/// Eval-mode manifold smoothness over `records`, one sampled conformer each.
pub fn manifold_smoothness<M: PosteriorModel>(
    model: &M,
    records: &[ConformerRecord],
    cfg: &SmoothnessConfig,
    mode: ExecMode,
) -> Result<SmoothnessReport> {
    if cfg.samples < 2 {
        return Err(MetricError::Contract("smoothness needs at least 2 samples per conformer".into()));
    }
    let noise = NoiseConfig {
        tau: cfg.tau,
        samples: cfg.samples,
        seed: cfg.seed,
    };
    let etas: Vec<Result<(String, f64)>> = map_indexed(mode, records.len(), |i| {
        let rec = &records[i];
        let mut rng = stream(cfg.seed, &[i as u64]);
        let c = sample_conformer(rec, &mut rng);
        let parent = center_coordinates(&rec.conformers[c]);
        let pg = build_radial_graph(&parent, &rec.atomic_numbers, model.cutoff());
        let p = model.posterior_of(&pg)?;
        let mut qs = Vec::with_capacity(cfg.samples - 1);
        for copy in augment(&parent, &noise, &mut rng) {
            let g = build_radial_graph(&copy, &rec.atomic_numbers, model.cutoff());
            qs.push(model.posterior_of(&g)?);
        }
        Ok((rec.id.clone(), molecule_smoothness(p, &qs)?))
    });
    let etas = etas.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(SmoothnessReport::from_values(etas, cfg))
}

fn check_matrix(z: &[Vec<f64>], min_rows: usize) -> Result<usize> {
    if z.len() < min_rows {
        return Err(MetricError::Contract(format!("need at least {min_rows} rows, got {}", z.len())));
    }
    let d = z[0].len();
    if d == 0 || z.iter().any(|r| r.len() != d) {
        return Err(MetricError::Contract("rows must be non-empty and of equal length".into()));
    }
    Ok(d)
}

/// Population variance of each feature across rows, averaged over features.
pub fn feature_variance(z: &[Vec<f64>]) -> Result<f64> {
    let d = check_matrix(z, 2)?;
    let n = z.len() as f64;
    let mut total = 0.0;
    for j in 0..d {
        let mean = z.iter().map(|r| r[j]).sum::<f64>() / n;
        total += z.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / n;
    }
    Ok(total / d as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollapseReport {
    /// Explained variances, descending.
    pub spectrum: Vec<f64>,
    pub cev_curve: Vec<f64>,
    pub bold_gamma: f64,
    /// 1-based index of the first component reaching 95% CEV.
    pub gamma95_index: usize,
    pub feature_variance: f64,
}

/// Cumulative-explained-variance analysis of an embedding matrix.
///
/// The spectrum holds covariance eigenvalues (squared singular values of
/// the column-centered matrix over `n - 1`), zero-padded to `d` entries.
pub fn cev(z: &[Vec<f64>]) -> Result<CollapseReport> {
    let d = check_matrix(z, 2)?;
    let n = z.len();
    let means: Vec<f64> = (0..d).map(|j| z.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
    let raw_scale: f64 = z.iter().flatten().map(|x| x * x).sum::<f64>();
    let centered = DMatrix::from_fn(n, d, |i, j| z[i][j] - means[j]);
    let centered_ss: f64 = centered.iter().map(|x| x * x).sum();
    if centered_ss <= 1e-24 * (1.0 + raw_scale) {
        return Err(MetricError::Degenerate("all rows identical; no spectrum".into()));
    }
    let sv = centered.singular_values();
    let mut spectrum: Vec<f64> = sv.iter().map(|s| s * s / (n - 1) as f64).collect();
    spectrum.resize(d, 0.0);
    spectrum.sort_by(|a, b| b.partial_cmp(a).expect("finite spectrum"));
    let total: f64 = spectrum.iter().sum();
    let mut acc = 0.0;
    let cev_curve: Vec<f64> = spectrum
        .iter()
        .map(|g| {
            acc += g;
            acc / total
        })
        .collect();
    let bold_gamma = cev_curve.iter().sum::<f64>() / d as f64;
    let gamma95_index = cev_curve.iter().position(|&c| c >= 0.95).map_or(d, |j| j + 1);
    Ok(CollapseReport {
        spectrum,
        cev_curve,
        bold_gamma,
        gamma95_index,
        feature_variance: feature_variance(z)?,
    })
}

fn check_binary(scores: &[f64], labels: &[u8]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(MetricError::Contract("scores and labels differ in length".into()));
    }
    if labels.iter().any(|&l| l > 1) {
        return Err(MetricError::Contract("labels must be 0 or 1".into()));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(MetricError::Undefined("ROC needs both classes".into()));
    }
    Ok((pos, neg))
}

/// ROC points `(fpr, tpr)` at `n_thresholds` cut points evenly spaced on
/// `[0, 1]`, a sample counting as positive when `score >= threshold`.
pub fn roc_curve(scores: &[f64], labels: &[u8], n_thresholds: usize) -> Result<Vec<(f64, f64)>> {
    let (pos, neg) = check_binary(scores, labels)?;
    if n_thresholds < 2 {
        return Err(MetricError::Contract("need at least 2 thresholds".into()));
    }
    let mut pts = Vec::with_capacity(n_thresholds + 2);
    pts.push((0.0, 0.0));
    for k in 0..n_thresholds {
        let t = k as f64 / (n_thresholds - 1) as f64;
        let (mut tp, mut fp) = (0usize, 0usize);
        for (&s, &l) in scores.iter().zip(labels) {
            if s >= t {
                if l == 1 {
                    tp += 1;
                } else {
                    fp += 1;
                }
            }
        }
        pts.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
    }
    pts.push((1.0, 1.0));
    pts.sort_by(|a, b| a.partial_cmp(b).expect("finite rates"));
    Ok(pts)
}

/// Trapezoidal area under the thresholded ROC curve.
pub fn roc_auc(scores: &[f64], labels: &[u8], n_thresholds: usize) -> Result<f64> {
    let pts = roc_curve(scores, labels, n_thresholds)?;
    Ok(pts
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0)
        .sum())
}

/// ROC-AUC of hard predictions `score >= cut`; a training-time tracking metric.
pub fn binarized_accuracy_auc(scores: &[f64], labels: &[u8], cut: f64) -> Result<f64> {
    let hard: Vec<f64> = scores.iter().map(|&s| if s >= cut { 1.0 } else { 0.0 }).collect();
    roc_auc(&hard, labels, 100)
}

/// 1-based ranks with ties sharing their mean rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].partial_cmp(&x[b]).expect("finite values"));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(MetricError::Undefined("zero variance".into()));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

pub fn spearman_rho(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(MetricError::Contract("need two equal-length series of length >= 2".into()));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(MetricError::Domain("non-finite values".into()));
    }
    pearson(&average_ranks(x), &average_ranks(y))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::molgraph::{RadialGraph, Split};
    use rand::Rng;

    fn post(mu: f64, sigma: f64) -> Posterior {
        Posterior { mu, sigma }
    }

    #[test]
    fn kl_examples() {
        assert_eq!(gaussian_kl(post(0.3, 1.2), post(0.3, 1.2)).unwrap(), 0.0);
        assert!((gaussian_kl(post(0., 1.), post(1., 1.)).unwrap() - 0.5).abs() < 1e-15);
        let v = gaussian_kl(post(0., 1.), post(0., 2.)).unwrap();
        assert!((v - (2f64.ln() + 0.125 - 0.5)).abs() < 1e-15);
        assert!((v - 0.3181).abs() < 1e-4);
        assert!(gaussian_kl(post(0., 0.), post(0., 1.)).is_err());
    }

    #[test]
    fn feature_variance_examples() {
        let same = vec![vec![1.0, 2.0]; 4];
        assert_eq!(feature_variance(&same).unwrap(), 0.0);
        let z = vec![vec![0., 0.], vec![2., 0.]];
        assert_eq!(feature_variance(&z).unwrap(), 0.5);
        let mut doubled = z.clone();
        doubled.extend(z.clone());
        assert_eq!(feature_variance(&doubled).unwrap(), 0.5);
        assert!(feature_variance(&z[..1]).is_err());
    }

    #[test]
    fn cev_examples() {
        // rank 1
        let z: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64, 2.0 * i as f64, -(i as f64)]).collect();
        let r = cev(&z).unwrap();
        assert!(r.cev_curve.iter().all(|&c| (c - 1.0).abs() < 1e-12));
        assert!((r.bold_gamma - 1.0).abs() < 1e-12);
        assert_eq!(r.gamma95_index, 1);
        // equal spectrum in d = 2: +-e1, +-e2
        let z = vec![vec![1., 0.], vec![-1., 0.], vec![0., 1.], vec![0., -1.]];
        let r = cev(&z).unwrap();
        assert!((r.bold_gamma - 0.75).abs() < 1e-12);
        // spectrum (3, 1, 0, 0) from scaled axis-aligned points, n - 1 = 3
        let a = (4.5f64).sqrt();
        let b = (1.5f64).sqrt();
        let z = vec![
            vec![a, 0., 0., 0.],
            vec![-a, 0., 0., 0.],
            vec![0., b, 0., 0.],
            vec![0., -b, 0., 0.],
        ];
        let r = cev(&z).unwrap();
        assert!((r.spectrum[0] - 3.0).abs() < 1e-12 && (r.spectrum[1] - 1.0).abs() < 1e-12);
        let expect = [0.75, 1.0, 1.0, 1.0];
        for (c, e) in r.cev_curve.iter().zip(expect) {
            assert!((c - e).abs() < 1e-12);
        }
        assert!((r.bold_gamma - 0.9375).abs() < 1e-12);
        assert_eq!(r.gamma95_index, 2);
        assert!(matches!(cev(&vec![vec![0.3, 0.1]; 5]), Err(MetricError::Degenerate(_))));
    }

    #[test]
    fn cev_properties() {
        let mut rng = crate::seed::stream(2, &[]);
        let d = 5;
        let z: Vec<Vec<f64>> = (0..30).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let r = cev(&z).unwrap();
        assert!(r.cev_curve.windows(2).all(|w| w[1] >= w[0]));
        assert_eq!(*r.cev_curve.last().unwrap(), 1.0);
        assert!((0.5..=1.0).contains(&r.bold_gamma));
        // rotate columns: plane rotation on features 0 and 1
        let (c, s) = (0.3f64.cos(), 0.3f64.sin());
        let rot: Vec<Vec<f64>> = z
            .iter()
            .map(|row| {
                let mut out = row.clone();
                out[0] = c * row[0] - s * row[1];
                out[1] = s * row[0] + c * row[1];
                out
            })
            .collect();
        assert!((cev(&rot).unwrap().bold_gamma - r.bold_gamma).abs() < 1e-12);
        // isotropic spectrum -> (d + 1) / (2d)
        let iso: Vec<Vec<f64>> = (0..d)
            .flat_map(|k| {
                [1.0, -1.0].map(|sgn| {
                    let mut v = vec![0.0; d];
                    v[k] = sgn;
                    v
                })
            })
            .collect();
        let expect = (d as f64 + 1.0) / (2.0 * d as f64);
        assert!((cev(&iso).unwrap().bold_gamma - expect).abs() < 1e-12);
    }

    #[test]
    fn roc_examples() {
        let labels = [1, 0, 1, 0];
        assert_eq!(roc_auc(&[0.9, 0.1, 0.8, 0.2], &labels, 100).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.1, 0.9, 0.2, 0.8], &labels, 100).unwrap(), 0.0);
        assert!((roc_auc(&[0.6, 0.7, 0.8, 0.2], &labels, 100).unwrap() - 0.75).abs() < 1e-12);
        assert!(matches!(roc_auc(&[0.1, 0.2], &[1, 1], 100), Err(MetricError::Undefined(_))));
    }

    #[test]
    fn binarized_auc_examples() {
        let v = binarized_accuracy_auc(&[0.995, 0.999, 0.991, 1.0], &[1, 1, 0, 1], 0.99).unwrap();
        assert_eq!(v, 0.5);
        let v = binarized_accuracy_auc(&[0.995, 0.2, 0.999, 0.98], &[1, 0, 1, 0], 0.99).unwrap();
        assert_eq!(v, 1.0);
        let mut rng = crate::seed::stream(3, &[]);
        let n = 10_000;
        let s: Vec<f64> = (0..n).map(|_| rng.random_range(0.9..1.0)).collect();
        let l: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
        let v = binarized_accuracy_auc(&s, &l, 0.99).unwrap();
        assert!((v - 0.5).abs() < 0.02);
    }

    #[test]
    fn spearman_examples() {
        let x = [1.0, 2.0, 3.0, 4.0];
        assert!((spearman_rho(&x, &x).unwrap() - 1.0).abs() < 1e-15);
        assert!((spearman_rho(&x, &[4.0, 3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-15);
        assert!((spearman_rho(&[1., 2., 3.], &[1., 3., 2.]).unwrap() - 0.5).abs() < 1e-15);
        assert!(matches!(spearman_rho(&x, &[1.; 4]), Err(MetricError::Undefined(_))));
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
        let y = [0.3, -1.0, 2.0, 0.5];
        let cubed: Vec<f64> = y.iter().map(|v: &f64| v.powi(3) + 10.0).collect();
        assert_eq!(spearman_rho(&x, &y).unwrap(), spearman_rho(&x, &cubed).unwrap());
    }

    struct Constant;

    impl PosteriorModel for Constant {
        fn posterior_of(&self, _: &RadialGraph) -> Result<Posterior> {
            Ok(post(0.2, 0.7))
        }
        fn cutoff(&self) -> f64 {
            4.0
        }
    }

    /// Posterior read off the first node's x coordinate via graph distances.
    struct EdgeCount;

    impl PosteriorModel for EdgeCount {
        fn posterior_of(&self, g: &RadialGraph) -> Result<Posterior> {
            let s: f64 = g.edges.iter().map(|e| e.distance).sum();
            Ok(post(s, 1.0))
        }
        fn cutoff(&self) -> f64 {
            4.0
        }
    }

    fn rec(id: &str, coords: Vec<[f64; 3]>) -> ConformerRecord {
        ConformerRecord {
            id: id.into(),
            atomic_numbers: vec![6; coords.len()],
            conformers: vec![coords],
            label: 0.0,
            split: Split::Test,
        }
    }

    #[test]
    fn smoothness_examples() {
        let recs = vec![rec("a", vec![[0.; 3], [1., 0., 0.]]), rec("b", vec![[0.; 3], [0., 2., 0.]])];
        let cfg = SmoothnessConfig::default();
        let r = manifold_smoothness(&Constant, &recs, &cfg, ExecMode::Parallel).unwrap();
        assert!(r.per_molecule_eta.iter().all(|(_, e)| *e == 1.0));
        assert_eq!(r.eta_f, 1.0);
        let zero = SmoothnessConfig { tau: 0.0, ..cfg };
        let r = manifold_smoothness(&EdgeCount, &recs, &zero, ExecMode::Sequential).unwrap();
        assert_eq!(r.eta_f, 1.0);
        let r = manifold_smoothness(&EdgeCount, &recs, &cfg, ExecMode::Parallel).unwrap();
        assert!(r.per_molecule_eta.iter().all(|(_, e)| *e < 1.0));
        let r2 = manifold_smoothness(&EdgeCount, &recs, &cfg, ExecMode::Sequential).unwrap();
        assert_eq!(r, r2);
    }

    #[test]
    fn hand_computed_smoothness_fixture() {
        // molecule 1: parent (0, 1), copies (1, 1) and (0, 2)
        // molecule 2: parent (0, 1), copy (0, 1)
        let m1 = molecule_smoothness(post(0., 1.), &[post(1., 1.), post(0., 2.)]).unwrap();
        let m2 = molecule_smoothness(post(0., 1.), &[post(0., 1.)]).unwrap();
        let hand1 = ((1.0 - 0.5) + (1.0 - (2f64.ln() + 1.0 / 8.0 - 0.5))) / 2.0;
        assert!((m1 - hand1).abs() < 1e-15);
        assert_eq!(m2, 1.0);
        let cfg = SmoothnessConfig::default();
        let r = SmoothnessReport::from_values(vec![("m1".into(), m1), ("m2".into(), m2)], &cfg);
        assert!((r.eta_f - (hand1 + 1.0) / 2.0).abs() < 1e-15);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn kl_is_nonnegative(mp in -5.0f64..5.0, sp in 0.05f64..5.0, mq in -5.0f64..5.0, sq in 0.05f64..5.0) {
                let kl = gaussian_kl(post(mp, sp), post(mq, sq)).unwrap();
                prop_assert!(kl >= -1e-15);
                prop_assert!(gaussian_kl(post(mp, sp), post(mp, sp)).unwrap().abs() < 1e-15);
            }

            #[test]
            fn cev_curve_is_monotone_and_ends_at_one(rows in proptest::collection::vec(proptest::collection::vec(-3.0f64..3.0, 5), 3..30)) {
                if let Ok(r) = cev(&rows) {
                    prop_assert!(r.cev_curve.windows(2).all(|w| w[1] >= w[0] - 1e-12));
                    prop_assert!((r.cev_curve[4] - 1.0).abs() < 1e-12);
                    prop_assert!(r.bold_gamma >= 0.5 - 1e-12 && r.bold_gamma <= 1.0 + 1e-12);
                    prop_assert!(r.gamma95_index >= 1 && r.gamma95_index <= 5);
                }
            }

            #[test]
            fn spearman_ignores_increasing_transforms(pairs in proptest::collection::vec((-10i32..10, -10i32..10), 3..40)) {
                let x: Vec<f64> = pairs.iter().map(|p| p.0 as f64).collect();
                let y: Vec<f64> = pairs.iter().map(|p| p.1 as f64).collect();
                let tx: Vec<f64> = x.iter().map(|v| (v / 3.0).exp()).collect();
                let ty: Vec<f64> = y.iter().map(|v| v * v * v + 2.0 * v).collect();
                match (spearman_rho(&x, &y), spearman_rho(&tx, &ty)) {
                    (Ok(a), Ok(b)) => prop_assert!((a - b).abs() < 1e-12),
                    (Err(_), Err(_)) => {}
                    (a, b) => prop_assert!(false, "{a:?} vs {b:?}"),
                }
            }

            #[test]
            fn auc_is_a_probability(scores in proptest::collection::vec(0.0f64..=1.0, 4..60), seed in 0u64..1000) {
                let mut rng = crate::seed::stream(seed, &[]);
                let mut labels: Vec<u8> = scores.iter().map(|_| rng.random_range(0..2)).collect();
                labels[0] = 0;
                labels[1] = 1;
                let a = roc_auc(&scores, &labels, 100).unwrap();
                prop_assert!((0.0..=1.0).contains(&a));
            }
        }
    }
}
