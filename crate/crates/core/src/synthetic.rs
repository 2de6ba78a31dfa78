//! Synthetic point-cloud regression set: random clouds labeled by the
//! sigmoid of their radius of gyration.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::molgraph::{center_coordinates, ConformerRecord, Coords, Dataset, DatasetManifest, LabelTransform, Split, TaskKind, ALLOWED_ELEMENTS};
use crate::seed::stream;
use crate::tensor::sigmoid;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub n_molecules: usize,
    pub min_nodes: usize,
    pub max_nodes: usize,
    pub conformers: usize,
    /// Per-molecule coordinate std is drawn uniformly from this range (Å).
    pub scale: (f64, f64),
    /// Std of the per-conformer jitter around the base geometry (Å).
    pub jitter: f64,
    pub train_fraction: f64,
    pub valid_fraction: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_molecules: 200,
            min_nodes: 10,
            max_nodes: 20,
            conformers: 3,
            scale: (0.3, 1.5),
            jitter: 0.05,
            train_fraction: 0.7,
            valid_fraction: 0.15,
            seed: 0,
        }
    }
}

pub fn radius_of_gyration(coords: &[[f64; 3]]) -> f64 {
    let c = center_coordinates(coords);
    let ss: f64 = c.iter().map(|p| p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sum();
    (ss / c.len() as f64).sqrt()
}

pub fn generate(cfg: &SyntheticConfig) -> Dataset {
    let mut rng = stream(cfg.seed, &[]);
    let n_train = (cfg.n_molecules as f64 * cfg.train_fraction).round() as usize;
    let n_valid = (cfg.n_molecules as f64 * cfg.valid_fraction).round() as usize;
    let jitter = Normal::new(0.0, cfg.jitter).expect("finite jitter");
    let records = (0..cfg.n_molecules)
        .map(|i| {
            let n = rng.random_range(cfg.min_nodes..=cfg.max_nodes);
            let s = rng.random_range(cfg.scale.0..=cfg.scale.1);
            let spread = Normal::new(0.0, s).expect("positive scale");
            let base: Coords = (0..n)
                .map(|_| [spread.sample(&mut rng), spread.sample(&mut rng), spread.sample(&mut rng)])
                .collect();
            let atomic_numbers = (0..n)
                .map(|_| ALLOWED_ELEMENTS[rng.random_range(0..ALLOWED_ELEMENTS.len())])
                .collect();
            let mut conformers = vec![base.clone()];
            for _ in 1..cfg.conformers.max(1) {
                conformers.push(
                    base.iter()
                        .map(|p| [p[0] + jitter.sample(&mut rng), p[1] + jitter.sample(&mut rng), p[2] + jitter.sample(&mut rng)])
                        .collect(),
                );
            }
            let split = if i < n_train {
                Split::Train
            } else if i < n_train + n_valid {
                Split::Valid
            } else {
                Split::Test
            };
            ConformerRecord {
                id: format!("cloud{i:04}"),
                atomic_numbers,
                label: sigmoid(radius_of_gyration(&base)),
                conformers,
                split,
            }
        })
        .collect();
    Dataset {
        manifest: DatasetManifest {
            name: "synthetic".into(),
            task: TaskKind::Regression,
            label_transform: LabelTransform::None,
        },
        records,
    }
}
