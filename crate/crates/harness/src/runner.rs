//! Grid execution over a worker pool.

use std::path::Path;

use supsiam::molgraph::{Dataset, TaskKind};
use supsiam::trainer::{train_run, Splits};

use crate::config::ExperimentConfig;
use crate::error::HarnessError;
use crate::grid::{Cell, GridSpec};
use crate::store::ExperimentStore;

/// Loads a dataset and checks it against the configured preset.
pub fn load_dataset(path: &Path, cfg: &ExperimentConfig) -> Result<Dataset, HarnessError> {
    let ds = Dataset::open(path)?;
    if let Some(p) = cfg.data.preset {
        p.check(&ds.manifest)?;
    }
    Ok(ds)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GridOutcome {
    pub executed: Vec<(Cell, usize)>,
    pub skipped: Vec<(Cell, usize)>,
    pub failed: Vec<(Cell, usize, String)>,
}

pub struct GridJob<'a> {
    pub dataset: &'a Dataset,
    pub config: &'a ExperimentConfig,
    pub grid: &'a GridSpec,
    pub workers: usize,
    /// Re-run completed and failed runs.
    pub force: bool,
}

fn validate_cells(cfg: &ExperimentConfig, task: TaskKind, cells: &[Cell]) -> Result<(), HarnessError> {
    for c in cells {
        cfg.for_cell(c)
            .validate(task)
            .map_err(|e| HarnessError::Config(format!("cell {}: {e}", c.key())))?;
    }
    Ok(())
}

fn execute(store: &ExperimentStore, job: &GridJob<'_>, splits: &Splits, cell: Cell, run: usize) -> Result<(), String> {
    let cfg = job.config.for_cell(&cell);
    let task = job.dataset.manifest.task;
    let mut tc = cfg.trainer(task);
    tc.epochs = job.grid.epochs;
    let out = train_run(&cfg.encoder(), task, splits, &tc, run).map_err(|e| e.to_string())?;
    store.write_run(&cell, run, &out).map_err(|e| e.to_string())
}

/// Trains every missing `(cell, run)` pair; completed runs are skipped and
/// training failures are recorded in the store rather than aborting the grid.
pub fn run_grid(store: &ExperimentStore, job: &GridJob<'_>) -> Result<GridOutcome, HarnessError> {
    store.verify()?;
    let task = job.dataset.manifest.task;
    let cells = job.grid.cells();
    validate_cells(job.config, task, &cells)?;
    let splits = Splits::from_dataset(job.dataset);
    if splits.valid.is_empty() {
        return Err(HarnessError::Config("dataset has no validation records".into()));
    }
    let mut outcome = GridOutcome::default();
    let mut todo = Vec::new();
    for cell in &cells {
        store.write_config(cell, &job.config.for_cell(cell).to_toml())?;
        for run in 0..job.grid.runs {
            let done = store.is_complete(cell, run) || store.is_failed(cell, run);
            if done && !job.force {
                outcome.skipped.push((*cell, run));
            } else {
                todo.push((*cell, run));
            }
        }
    }
    let results = run_jobs(job.workers, &todo, |&(cell, run)| execute(store, job, &splits, cell, run))?;
    for ((cell, run), r) in todo.into_iter().zip(results) {
        match r {
            Ok(()) => outcome.executed.push((cell, run)),
            Err(msg) => {
                store.record_failure(&cell, run, &msg)?;
                outcome.failed.push((cell, run, msg));
            }
        }
    }
    Ok(outcome)
}

#[cfg(feature = "parallel")]
fn run_jobs<T: Sync, R: Send>(
    workers: usize,
    items: &[T],
    f: impl Fn(&T) -> R + Sync + Send,
) -> Result<Vec<R>, HarnessError> {
    use rayon::prelude::*;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| HarnessError::Runtime(format!("worker pool: {e}")))?;
    Ok(pool.install(|| items.par_iter().map(&f).collect()))
}

#[cfg(not(feature = "parallel"))]
fn run_jobs<T: Sync, R: Send>(
    _workers: usize,
    items: &[T],
    f: impl Fn(&T) -> R + Sync + Send,
) -> Result<Vec<R>, HarnessError> {
    Ok(items.iter().map(f).collect())
}
