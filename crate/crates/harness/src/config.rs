//! Experiment configuration: a TOML file with `[data]`, `[model]`,
//! `[train]`, `[noise]`, `[weights]`, `[grid]` and `[analysis]` sections,
//! each key overridable from the command line.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use supsiam::encoder::EncoderConfig;
use supsiam::molgraph::{DatasetManifest, LabelTransform, NoiseConfig, TaskKind};
use supsiam::objective::{LossWeights, ObjectiveConfig};
use supsiam::par::ExecMode;
use supsiam::trainer::{AdamConfig, EvalMetric, TrainConfig, REGRESSION_BINS, WEIGHT_FLOOR};

use crate::error::HarnessError;
use crate::grid::{Cell, GridSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Pgp,
    Clear,
}

impl Preset {
    pub fn task(self) -> TaskKind {
        match self {
            Preset::Pgp => TaskKind::Classification,
            Preset::Clear => TaskKind::Regression,
        }
    }

    pub fn label_transform(self) -> LabelTransform {
        match self {
            Preset::Pgp => LabelTransform::None,
            Preset::Clear => LabelTransform::Log10,
        }
    }

    /// Rejects datasets whose manifest disagrees with the preset.
    pub fn check(self, manifest: &DatasetManifest) -> Result<(), HarnessError> {
        if manifest.task != self.task() || manifest.label_transform != self.label_transform() {
            return Err(HarnessError::Config(format!(
                "preset {self:?} expects a {:?} dataset with {:?} labels, manifest says {:?} / {:?}",
                self.task(),
                self.label_transform(),
                manifest.task,
                manifest.label_transform
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub path: Option<PathBuf>,
    pub preset: Option<Preset>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub hidden_dim: usize,
    pub num_blocks: usize,
    pub radial_num_basis: usize,
    pub radial_num_hidden: usize,
    pub radial_num_layers: usize,
    pub cutoff: f64,
    pub dropout: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let e = EncoderConfig::default();
        Self {
            hidden_dim: e.hidden_dim,
            num_blocks: e.num_blocks,
            radial_num_basis: e.radial_num_basis,
            radial_num_hidden: e.radial_num_hidden,
            radial_num_layers: e.radial_num_layers,
            cutoff: e.cutoff,
            dropout: e.dropout,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub instantiations: usize,
    pub repeats: usize,
    pub posterior_samples: usize,
    pub stopgrad: bool,
    pub sequential: bool,
    pub regression_bins: usize,
    pub weight_floor: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 32,
            learning_rate: AdamConfig::default().lr,
            seed: 0,
            instantiations: 5,
            repeats: 2,
            posterior_samples: 10,
            stopgrad: true,
            sequential: false,
            regression_bins: REGRESSION_BINS,
            weight_floor: WEIGHT_FLOOR,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSection {
    pub tau: f64,
    /// Samples per conformer including the parent.
    pub samples: usize,
}

impl Default for NoiseSection {
    fn default() -> Self {
        Self { tau: 0.1, samples: 2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WeightsSection {
    pub lambda_y: f64,
    pub lambda_s: f64,
    pub lambda_r: f64,
}

impl Default for WeightsSection {
    fn default() -> Self {
        Self {
            lambda_y: 1.0,
            lambda_s: 0.0,
            lambda_r: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSection {
    pub tau: Vec<f64>,
    pub d: Vec<usize>,
    pub lambda_s: Vec<f64>,
    pub lambda_r: Vec<f64>,
    /// Concurrent runs; 0 uses every core.
    pub workers: usize,
}

impl Default for GridSection {
    fn default() -> Self {
        let g = GridSpec::reference();
        Self {
            tau: g.tau,
            d: g.d,
            lambda_s: g.lambda_s,
            lambda_r: g.lambda_r,
            workers: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisSection {
    pub tau: f64,
    pub samples: usize,
    pub seed: u64,
    pub histogram_bins: usize,
}

impl Default for AnalysisSection {
    fn default() -> Self {
        Self {
            tau: 0.1,
            samples: 10,
            seed: 0,
            histogram_bins: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub noise: NoiseSection,
    pub weights: WeightsSection,
    pub grid: GridSection,
    pub analysis: AnalysisSection,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        toml::from_str(text).map_err(|e| HarnessError::Config(format!("invalid config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn encoder(&self) -> EncoderConfig {
        let m = &self.model;
        EncoderConfig {
            hidden_dim: m.hidden_dim,
            num_blocks: m.num_blocks,
            radial_num_basis: m.radial_num_basis,
            radial_num_hidden: m.radial_num_hidden,
            radial_num_layers: m.radial_num_layers,
            cutoff: m.cutoff,
            dropout: m.dropout,
            ..EncoderConfig::default()
        }
    }

    pub fn trainer(&self, task: TaskKind) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            epochs: t.epochs,
            batch_size: t.batch_size,
            adam: AdamConfig {
                lr: t.learning_rate,
                ..AdamConfig::default()
            },
            seed: t.seed,
            instantiations: t.instantiations,
            repeats: t.repeats,
            eval_metric: EvalMetric::for_task(task),
            noise: NoiseConfig {
                tau: self.noise.tau,
                samples: self.noise.samples,
                seed: t.seed,
            },
            objective: ObjectiveConfig {
                weights: LossWeights {
                    lambda_y: self.weights.lambda_y,
                    lambda_s: self.weights.lambda_s,
                    lambda_r: self.weights.lambda_r,
                },
                posterior_samples: t.posterior_samples,
                stopgrad: t.stopgrad,
            },
            regression_bins: t.regression_bins,
            weight_floor: t.weight_floor,
            exec: if t.sequential { ExecMode::Sequential } else { ExecMode::Parallel },
        }
    }

    pub fn grid_spec(&self) -> GridSpec {
        GridSpec {
            tau: self.grid.tau.clone(),
            d: self.grid.d.clone(),
            lambda_s: self.grid.lambda_s.clone(),
            lambda_r: self.grid.lambda_r.clone(),
            runs: self.train.instantiations * self.train.repeats,
            epochs: self.train.epochs,
        }
    }

    /// The single cell described by the `[noise]`, `[model]` and `[weights]` sections.
    pub fn single_cell(&self) -> Cell {
        Cell {
            tau: self.noise.tau,
            d: self.model.hidden_dim,
            lambda_s: self.weights.lambda_s,
            lambda_r: self.weights.lambda_r,
        }
    }

    /// This config with one grid cell's axes substituted.
    pub fn for_cell(&self, cell: &Cell) -> Self {
        let mut c = self.clone();
        c.noise.tau = cell.tau;
        c.model.hidden_dim = cell.d;
        c.weights.lambda_s = cell.lambda_s;
        c.weights.lambda_r = cell.lambda_r;
        c
    }

    pub fn validate(&self, task: TaskKind) -> Result<(), HarnessError> {
        self.encoder().validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        self.trainer(task).validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        if self.analysis.samples < 2 {
            return Err(HarnessError::Config("analysis samples must be at least 2".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::from_toml(&c.to_toml()).unwrap(), c);
        assert_eq!(c.grid_spec().cells().len(), 64);
        assert_eq!(c.grid_spec().runs, 10);
    }

    #[test]
    fn partial_file() {
        let c = ExperimentConfig::from_toml("[weights]\nlambda_s = 10.0\n[noise]\nsamples = 1\n").unwrap();
        assert_eq!(c.weights.lambda_s, 10.0);
        assert_eq!(c.train.epochs, 50);
        assert!(matches!(c.validate(TaskKind::Regression), Err(HarnessError::Config(_))));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(ExperimentConfig::from_toml("[train]\nepochz = 3\n").is_err());
        assert!(ExperimentConfig::from_toml("[bogus]\n").is_err());
    }
}
