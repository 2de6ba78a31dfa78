//! On-disk experiment store.
//!
//! ```text
//! <root>/<dataset>/manifest.json
//! <root>/<dataset>/tau<τ>_d<d>_ls<λs>_lr<λr>/run<k>/{epochs.csv, checkpoint.bin, summary.csv, report.json}
//! ```
//!
//! Run directories are staged under a temporary name and renamed into
//! place, so a run directory either holds every artifact or does not exist.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use supsiam::encoder::Model;
use supsiam::trainer::{FitOutcome, RunReport};

use crate::error::HarnessError;
use crate::grid::Cell;

pub const EPOCHS_FILE: &str = "epochs.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const REPORT_FILE: &str = "report.json";
const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub dataset: String,
    /// Ingestion file the runs were trained on.
    #[serde(default)]
    pub data_path: Option<PathBuf>,
    pub completed: BTreeMap<String, Vec<usize>>,
    pub failed: BTreeMap<String, BTreeMap<usize, String>>,
}

pub struct ExperimentStore {
    dir: PathBuf,
    manifest: Mutex<Manifest>,
}

pub struct StoredRun {
    pub cell: Cell,
    pub report: RunReport,
    pub model: Model,
}

/// Writes `bytes` to `path` through a sibling temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), HarnessError> {
    let tmp = path.with_extension(format!(
        "{}tmp",
        path.extension().map(|e| format!("{}.", e.to_string_lossy())).unwrap_or_default()
    ));
    {
        let mut f = fs::File::create(&tmp).map_err(|e| HarnessError::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| HarnessError::io(&tmp, e))?;
        f.sync_all().map_err(|e| HarnessError::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| HarnessError::io(path, e))
}

pub fn summary_csv(run_id: &str, report: &RunReport) -> Result<Vec<u8>, HarnessError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["run_id", "metric", "value"])?;
    for (k, v) in report.scalar_metrics() {
        w.write_record([run_id, k.as_str(), &v.to_string()])?;
    }
    w.into_inner().map_err(|e| HarnessError::Runtime(e.to_string()))
}

impl ExperimentStore {
    pub fn open(root: &Path, dataset: &str) -> Result<Self, HarnessError> {
        let dir = root.join(dataset);
        fs::create_dir_all(&dir).map_err(|e| HarnessError::io(&dir, e))?;
        let path = dir.join(MANIFEST_FILE);
        let manifest = if path.exists() {
            let text = fs::read_to_string(&path).map_err(|e| HarnessError::io(&path, e))?;
            serde_json::from_str(&text)
                .map_err(|e| HarnessError::Integrity(vec![format!("{}: {e}", path.display())]))?
        } else {
            Manifest {
                dataset: dataset.to_string(),
                ..Manifest::default()
            }
        };
        Ok(Self {
            dir,
            manifest: Mutex::new(manifest),
        })
    }

    /// Opens an existing store without creating anything.
    pub fn open_existing(root: &Path, dataset: &str) -> Result<Self, HarnessError> {
        let dir = root.join(dataset);
        if !dir.join(MANIFEST_FILE).exists() {
            return Err(HarnessError::Config(format!("no experiment store at {}", dir.display())));
        }
        Self::open(root, dataset)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn dataset(&self) -> String {
        self.manifest.lock().expect("manifest lock").dataset.clone()
    }

    pub fn manifest(&self) -> Manifest {
        self.manifest.lock().expect("manifest lock").clone()
    }

    pub fn cell_dir(&self, cell: &Cell) -> PathBuf {
        self.dir.join(cell.key())
    }

    pub fn run_dir(&self, cell: &Cell, run: usize) -> PathBuf {
        self.cell_dir(cell).join(format!("run{run}"))
    }

    pub fn is_complete(&self, cell: &Cell, run: usize) -> bool {
        let m = self.manifest.lock().expect("manifest lock");
        m.completed.get(&cell.key()).is_some_and(|v| v.contains(&run))
    }

    pub fn is_failed(&self, cell: &Cell, run: usize) -> bool {
        let m = self.manifest.lock().expect("manifest lock");
        m.failed.get(&cell.key()).is_some_and(|v| v.contains_key(&run))
    }

    fn save_manifest(&self, m: &Manifest) -> Result<(), HarnessError> {
        let text = serde_json::to_string_pretty(m).expect("manifest serializes");
        write_atomic(&self.dir.join(MANIFEST_FILE), text.as_bytes())
    }

    pub fn set_data_path(&self, path: &Path) -> Result<(), HarnessError> {
        let mut m = self.manifest.lock().expect("manifest lock");
        let abs = fs::canonicalize(path).unwrap_or_else(|_| path.to_path_buf());
        if m.data_path.as_deref() != Some(abs.as_path()) {
            m.data_path = Some(abs);
            self.save_manifest(&m)?;
        }
        Ok(())
    }

    pub fn write_config(&self, cell: &Cell, toml_text: &str) -> Result<(), HarnessError> {
        let dir = self.cell_dir(cell);
        fs::create_dir_all(&dir).map_err(|e| HarnessError::io(&dir, e))?;
        write_atomic(&dir.join("config.toml"), toml_text.as_bytes())
    }

    /// Stages every artifact of a run, renames it into place and marks it complete.
    pub fn write_run(&self, cell: &Cell, run: usize, outcome: &FitOutcome) -> Result<(), HarnessError> {
        let cell_dir = self.cell_dir(cell);
        fs::create_dir_all(&cell_dir).map_err(|e| HarnessError::io(&cell_dir, e))?;
        let final_dir = self.run_dir(cell, run);
        let stage = cell_dir.join(format!(".run{run}.staging"));
        if stage.exists() {
            fs::remove_dir_all(&stage).map_err(|e| HarnessError::io(&stage, e))?;
        }
        fs::create_dir_all(&stage).map_err(|e| HarnessError::io(&stage, e))?;
        let mut epochs = Vec::new();
        outcome.report.write_epochs_csv(&mut epochs)?;
        let write = |name: &str, bytes: &[u8]| {
            let p = stage.join(name);
            fs::write(&p, bytes).map_err(|e| HarnessError::io(&p, e))
        };
        write(EPOCHS_FILE, &epochs)?;
        let ckpt = stage.join(CHECKPOINT_FILE);
        outcome.best.save(&ckpt).map_err(|e| HarnessError::Runtime(e.to_string()))?;
        let run_id = format!("{}/run{run}", cell.key());
        write(SUMMARY_FILE, &summary_csv(&run_id, &outcome.report)?)?;
        write(REPORT_FILE, serde_json::to_string_pretty(&outcome.report).expect("report serializes").as_bytes())?;
        if final_dir.exists() {
            fs::remove_dir_all(&final_dir).map_err(|e| HarnessError::io(&final_dir, e))?;
        }
        fs::rename(&stage, &final_dir).map_err(|e| HarnessError::io(&final_dir, e))?;
        let mut m = self.manifest.lock().expect("manifest lock");
        let runs = m.completed.entry(cell.key()).or_default();
        if !runs.contains(&run) {
            runs.push(run);
            runs.sort_unstable();
        }
        if let Some(f) = m.failed.get_mut(&cell.key()) {
            f.remove(&run);
            if f.is_empty() {
                m.failed.remove(&cell.key());
            }
        }
        self.save_manifest(&m)
    }

    pub fn record_failure(&self, cell: &Cell, run: usize, message: &str) -> Result<(), HarnessError> {
        let mut m = self.manifest.lock().expect("manifest lock");
        m.failed.entry(cell.key()).or_default().insert(run, message.to_string());
        self.save_manifest(&m)
    }

    /// Every completed run must still have readable artifacts.
    pub fn verify(&self) -> Result<(), HarnessError> {
        let m = self.manifest();
        let mut bad = Vec::new();
        for (key, runs) in &m.completed {
            let Some(cell) = Cell::parse_key(key) else {
                bad.push(format!("{key} (unparseable cell key)"));
                continue;
            };
            for &k in runs {
                if let Err(e) = self.load_run(&cell, k) {
                    bad.push(format!("{key}/run{k} ({e})"));
                }
            }
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(HarnessError::Integrity(bad))
        }
    }

    pub fn load_run(&self, cell: &Cell, run: usize) -> Result<StoredRun, HarnessError> {
        let dir = self.run_dir(cell, run);
        for name in [EPOCHS_FILE, CHECKPOINT_FILE, SUMMARY_FILE, REPORT_FILE] {
            if !dir.join(name).exists() {
                return Err(HarnessError::Runtime(format!("missing {name}")));
            }
        }
        let p = dir.join(REPORT_FILE);
        let text = fs::read_to_string(&p).map_err(|e| HarnessError::io(&p, e))?;
        let report: RunReport =
            serde_json::from_str(&text).map_err(|e| HarnessError::Runtime(format!("bad report: {e}")))?;
        let model = Model::load(&dir.join(CHECKPOINT_FILE)).map_err(|e| HarnessError::Runtime(e.to_string()))?;
        Ok(StoredRun {
            cell: *cell,
            report,
            model,
        })
    }

    /// Completed cells in key order with their run indices.
    pub fn completed(&self) -> Vec<(Cell, Vec<usize>)> {
        self.manifest()
            .completed
            .iter()
            .filter_map(|(k, v)| Cell::parse_key(k).map(|c| (c, v.clone())))
            .collect()
    }
}
