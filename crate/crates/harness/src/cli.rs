//! Command-line interface.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use supsiam::molgraph::{save_dataset, Dataset, Split, TaskKind};
use supsiam::par::ExecMode;
use supsiam::synthetic::{generate, SyntheticConfig};
use supsiam::trainer::{ensemble_summary, RunReport};

use crate::analysis::{analysis_dir, analyze, read_bundle, test_records, write_bundle};
use crate::config::{ExperimentConfig, Preset};
use crate::error::HarnessError;
use crate::grid::GridSpec;
use crate::plots::emit_plots;
use crate::runner::{load_dataset, run_grid, GridJob};
use crate::store::ExperimentStore;

#[derive(Debug, Parser)]
#[command(name = "supsiam", version, about = "Supervised Siamese training, ablation grids and collapse analysis")]
pub struct Cli {
    /// TOML experiment config; command-line flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check an ingestion file and its manifest.
    ValidateData {
        path: PathBuf,
        #[arg(long)]
        preset: Option<Preset>,
    },
    /// Write a synthetic point-cloud regression dataset.
    Synthetic {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        molecules: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train the ensemble of one configuration.
    Train(RunArgs),
    /// Train every cell of the ablation grid.
    Grid {
        #[command(flatten)]
        run: RunArgs,
        /// Print the cell plan without training.
        #[arg(long)]
        dry_run: bool,
        #[command(flatten)]
        axes: GridAxes,
    },
    /// Compute smoothness and collapse reports for a store.
    Analyze {
        #[command(flatten)]
        store: StoreArgs,
        /// Dataset file; defaults to the one recorded in the store.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long = "analysis-tau")]
        tau: Option<f64>,
        #[arg(long = "analysis-A")]
        samples: Option<usize>,
        #[arg(long)]
        sequential: bool,
    },
    /// Render figures and their CSV twins from an analysis bundle.
    Plots {
        #[command(flatten)]
        store: StoreArgs,
        #[arg(long)]
        bins: Option<usize>,
    },
    /// Print per-cell ensemble summaries.
    Report {
        #[command(flatten)]
        store: StoreArgs,
    },
}

#[derive(Debug, Args)]
pub struct StoreArgs {
    #[arg(long, default_value = "experiments")]
    pub store: PathBuf,
    /// Dataset name inside the store; inferred when the store holds one.
    #[arg(long)]
    pub dataset: Option<String>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value = "experiments")]
    pub store: PathBuf,
    #[command(flatten)]
    pub overrides: Overrides,
    /// Concurrent runs (0 = all cores).
    #[arg(long)]
    pub workers: Option<usize>,
    /// Re-run runs that are already complete or failed.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args, Default)]
pub struct Overrides {
    #[arg(long)]
    pub preset: Option<Preset>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub instantiations: Option<usize>,
    #[arg(long)]
    pub repeats: Option<usize>,
    #[arg(long)]
    pub posterior_samples: Option<usize>,
    #[arg(long)]
    pub no_stopgrad: bool,
    #[arg(long)]
    pub sequential: bool,
    #[arg(long)]
    pub tau: Option<f64>,
    /// Samples per conformer, parent included.
    #[arg(long = "A")]
    pub samples: Option<usize>,
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long)]
    pub num_blocks: Option<usize>,
    #[arg(long)]
    pub lambda_y: Option<f64>,
    #[arg(long)]
    pub lambda_s: Option<f64>,
    #[arg(long)]
    pub lambda_r: Option<f64>,
}

#[derive(Debug, Args, Default)]
pub struct GridAxes {
    #[arg(id = "grid_tau", long = "grid-tau", value_delimiter = ',')]
    pub tau: Option<Vec<f64>>,
    #[arg(id = "grid_d", long = "grid-d", value_delimiter = ',')]
    pub d: Option<Vec<usize>>,
    #[arg(id = "grid_lambda_s", long = "grid-lambda-s", value_delimiter = ',')]
    pub lambda_s: Option<Vec<f64>>,
    #[arg(id = "grid_lambda_r", long = "grid-lambda-r", value_delimiter = ',')]
    pub lambda_r: Option<Vec<f64>>,
}

impl Overrides {
    pub fn apply(&self, c: &mut ExperimentConfig) {
        macro_rules! set {
            ($src:expr, $dst:expr) => {
                if let Some(v) = $src.clone() {
                    $dst = v;
                }
            };
        }
        if self.preset.is_some() {
            c.data.preset = self.preset;
        }
        set!(self.epochs, c.train.epochs);
        set!(self.batch_size, c.train.batch_size);
        set!(self.lr, c.train.learning_rate);
        set!(self.seed, c.train.seed);
        set!(self.seed, c.analysis.seed);
        set!(self.instantiations, c.train.instantiations);
        set!(self.repeats, c.train.repeats);
        set!(self.posterior_samples, c.train.posterior_samples);
        set!(self.tau, c.noise.tau);
        set!(self.samples, c.noise.samples);
        set!(self.d, c.model.hidden_dim);
        set!(self.num_blocks, c.model.num_blocks);
        set!(self.lambda_y, c.weights.lambda_y);
        set!(self.lambda_s, c.weights.lambda_s);
        set!(self.lambda_r, c.weights.lambda_r);
        if self.no_stopgrad {
            c.train.stopgrad = false;
        }
        if self.sequential {
            c.train.sequential = true;
        }
    }
}

impl GridAxes {
    pub fn apply(&self, c: &mut ExperimentConfig) {
        if let Some(v) = &self.tau {
            c.grid.tau = v.clone();
        }
        if let Some(v) = &self.d {
            c.grid.d = v.clone();
        }
        if let Some(v) = &self.lambda_s {
            c.grid.lambda_s = v.clone();
        }
        if let Some(v) = &self.lambda_r {
            c.grid.lambda_r = v.clone();
        }
    }
}

fn base_config(path: Option<&Path>) -> Result<ExperimentConfig, HarnessError> {
    match path {
        Some(p) => ExperimentConfig::load(p),
        None => Ok(ExperimentConfig::default()),
    }
}

fn data_path(args: &RunArgs, cfg: &ExperimentConfig) -> Result<PathBuf, HarnessError> {
    args.data
        .clone()
        .or_else(|| cfg.data.path.clone())
        .ok_or_else(|| HarnessError::Config("no dataset given (--data or [data].path)".into()))
}

fn resolve_dataset(args: &StoreArgs) -> Result<String, HarnessError> {
    if let Some(d) = &args.dataset {
        return Ok(d.clone());
    }
    let entries = std::fs::read_dir(&args.store).map_err(|e| HarnessError::io(&args.store, e))?;
    let names: Vec<String> = entries
        .filter_map(|e| e.ok())
        .filter(|e| e.path().join("manifest.json").exists())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    match names.as_slice() {
        [one] => Ok(one.clone()),
        [] => Err(HarnessError::Config(format!("no datasets in store {}", args.store.display()))),
        _ => Err(HarnessError::Config(format!("store holds several datasets ({}); pass --dataset", names.join(", ")))),
    }
}

fn print_plan(out: &mut dyn Write, grid: &GridSpec) -> std::io::Result<()> {
    let cells = grid.cells();
    writeln!(out, "grid plan: {} cells x {} runs = {} runs, {} epochs each", cells.len(), grid.runs, cells.len() * grid.runs, grid.epochs)?;
    for (i, c) in cells.iter().enumerate() {
        writeln!(out, "{:>3} {}", i + 1, c.key())?;
    }
    Ok(())
}

fn train_or_grid(
    run: &RunArgs,
    mut cfg: ExperimentConfig,
    grid: Option<GridSpec>,
    out: &mut dyn Write,
) -> Result<(), HarnessError> {
    if let Some(w) = run.workers {
        cfg.grid.workers = w;
    }
    let path = data_path(run, &cfg)?;
    let ds = load_dataset(&path, &cfg)?;
    let grid = grid.unwrap_or_else(|| {
        let c = cfg.single_cell();
        GridSpec {
            tau: vec![c.tau],
            d: vec![c.d],
            lambda_s: vec![c.lambda_s],
            lambda_r: vec![c.lambda_r],
            runs: cfg.train.instantiations * cfg.train.repeats,
            epochs: cfg.train.epochs,
        }
    });
    let store = ExperimentStore::open(&run.store, &ds.manifest.name)?;
    store.set_data_path(&path)?;
    let job = GridJob {
        dataset: &ds,
        config: &cfg,
        grid: &grid,
        workers: cfg.grid.workers,
        force: run.force,
    };
    let res = run_grid(&store, &job)?;
    let io = |e| HarnessError::io(store.dir(), e);
    writeln!(out, "executed {} runs, skipped {}, failed {}", res.executed.len(), res.skipped.len(), res.failed.len()).map_err(io)?;
    for (c, k, msg) in &res.failed {
        writeln!(out, "failed {}/run{k}: {msg}", c.key()).map_err(io)?;
    }
    writeln!(out, "store: {}", store.dir().display()).map_err(io)?;
    Ok(())
}

/// Runs a parsed command, writing human-readable output to `out`.
pub fn run(cli: Cli, out: &mut dyn Write) -> Result<(), HarnessError> {
    let cfg_path = cli.config.clone();
    let stdout_err = |e: std::io::Error| HarnessError::Runtime(format!("writing output: {e}"));
    match cli.command {
        Command::ValidateData { path, preset } => {
            let ds = Dataset::open(&path)?;
            if let Some(p) = preset {
                p.check(&ds.manifest)?;
            }
            let count = |s| ds.records.iter().filter(|r| r.split == s).count();
            writeln!(
                out,
                "{}: {} records ({} train, {} valid, {} test), task {:?}",
                path.display(),
                ds.records.len(),
                count(Split::Train),
                count(Split::Valid),
                count(Split::Test),
                ds.manifest.task
            )
            .map_err(stdout_err)?;
        }
        Command::Synthetic { out: path, molecules, seed } => {
            let ds = generate(&SyntheticConfig {
                n_molecules: molecules,
                seed,
                ..SyntheticConfig::default()
            });
            save_dataset(&path, &ds.records)?;
            ds.manifest.save(&path)?;
            writeln!(out, "wrote {} records to {}", ds.records.len(), path.display()).map_err(stdout_err)?;
        }
        Command::Train(run) => {
            let mut cfg = base_config(cfg_path.as_deref())?;
            run.overrides.apply(&mut cfg);
            cfg.validate(TaskKind::Regression)?;
            train_or_grid(&run, cfg, None, out)?;
        }
        Command::Grid { run, dry_run, axes } => {
            let mut cfg = base_config(cfg_path.as_deref())?;
            run.overrides.apply(&mut cfg);
            axes.apply(&mut cfg);
            let grid = cfg.grid_spec();
            for c in grid.cells() {
                cfg.for_cell(&c)
                    .validate(TaskKind::Regression)
                    .map_err(|e| HarnessError::Config(format!("cell {}: {e}", c.key())))?;
            }
            if dry_run {
                print_plan(out, &grid).map_err(stdout_err)?;
                return Ok(());
            }
            train_or_grid(&run, cfg, Some(grid), out)?;
        }
        Command::Analyze {
            store,
            data,
            seed,
            tau,
            samples,
            sequential,
        } => {
            let mut cfg = base_config(cfg_path.as_deref())?;
            if let Some(s) = seed {
                cfg.analysis.seed = s;
            }
            if let Some(t) = tau {
                cfg.analysis.tau = t;
            }
            if let Some(a) = samples {
                cfg.analysis.samples = a;
            }
            if cfg.analysis.samples < 2 {
                return Err(HarnessError::Config("analysis needs A >= 2".into()));
            }
            let name = resolve_dataset(&store)?;
            let st = ExperimentStore::open_existing(&store.store, &name)?;
            let test = test_records(&st, data.as_deref())?;
            let mode = if sequential { ExecMode::Sequential } else { ExecMode::Parallel };
            let bundle = analyze(&st, &test, &cfg.analysis, mode)?;
            for w in &bundle.warnings {
                writeln!(out, "warning: {w}").map_err(stdout_err)?;
            }
            let dir = write_bundle(&st, &bundle)?;
            writeln!(
                out,
                "analyzed {} runs in {} cells -> {}",
                bundle.runs.len(),
                bundle.aggregates.len(),
                dir.display()
            )
            .map_err(stdout_err)?;
        }
        Command::Plots { store, bins } => {
            let cfg = base_config(cfg_path.as_deref())?;
            let name = resolve_dataset(&store)?;
            let st = ExperimentStore::open_existing(&store.store, &name)?;
            let bundle = read_bundle(&st)?;
            let files = emit_plots(&bundle, &st.dir().join("plots"), bins.unwrap_or(cfg.analysis.histogram_bins))?;
            if files.is_empty() {
                writeln!(out, "bundle is empty; no plots written").map_err(stdout_err)?;
            } else {
                writeln!(out, "wrote {} files under {}", files.len(), st.dir().join("plots").display()).map_err(stdout_err)?;
            }
        }
        Command::Report { store } => {
            let name = resolve_dataset(&store)?;
            let st = ExperimentStore::open_existing(&store.store, &name)?;
            st.verify()?;
            report(&st, out).map_err(stdout_err)?;
        }
    }
    Ok(())
}

fn fmt_stat(mean: f64, sd: Option<f64>) -> String {
    match sd {
        Some(s) => format!("{mean:.4} ± {s:.4}"),
        None => format!("{mean:.4}"),
    }
}

fn report(st: &ExperimentStore, out: &mut dyn Write) -> std::io::Result<()> {
    writeln!(out, "dataset {}", st.dataset())?;
    for (cell, runs) in st.completed() {
        let reports: Vec<RunReport> = runs.iter().filter_map(|&k| st.load_run(&cell, k).ok()).map(|s| s.report).collect();
        writeln!(out, "\n{} ({} runs)", cell.key(), reports.len())?;
        for s in ensemble_summary(&reports) {
            writeln!(out, "  {:<32} {}", s.metric, fmt_stat(s.mean, s.stdev))?;
        }
    }
    let failed = st.manifest().failed;
    for (key, runs) in &failed {
        for (k, msg) in runs {
            writeln!(out, "failed {key}/run{k}: {msg}")?;
        }
    }
    if analysis_dir(st).join("bundle.json").exists() {
        if let Ok(b) = read_bundle(st) {
            writeln!(out, "\nanalysis (test split)")?;
            writeln!(out, "  {:<28} {:>20} {:>20} {:>20}", "cell", "eta_f", "bold_gamma", "test_metric")?;
            for a in &b.aggregates {
                let cellf = |m: &Option<supsiam::trainer::MetricSummary>| {
                    m.as_ref().map_or("-".to_string(), |s| fmt_stat(s.mean, s.stdev))
                };
                writeln!(
                    out,
                    "  {:<28} {:>20} {:>20} {:>20}{}",
                    a.cell.key(),
                    cellf(&a.eta_f),
                    cellf(&a.bold_gamma),
                    cellf(&a.test_metric),
                    if a.flagged > 0 { format!("  [{} flagged]", a.flagged) } else { String::new() }
                )?;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }
}
