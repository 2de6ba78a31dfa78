//! Conformer records, their line-delimited ingestion format, coordinate
//! centering, Gaussian augmentation and radial-graph construction.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Element codes accepted by the encoder, in embedding-table order.
pub const ALLOWED_ELEMENTS: [u8; 8] = [6, 7, 8, 9, 16, 17, 35, 53];
pub const MAX_ENSEMBLE: usize = 10;
pub const DEFAULT_CUTOFF: f64 = 4.0;

pub type Coords = Vec<[f64; 3]>;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("validation failed for {} record(s): {}", .0.len(), format_rejections(.0))]
    Validation(Vec<Rejection>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rejection {
    pub id: String,
    pub line: usize,
    pub reason: String,
}

fn format_rejections(r: &[Rejection]) -> String {
    r.iter()
        .map(|x| format!("{} (line {}): {}", x.id, x.line, x.reason))
        .collect::<Vec<_>>()
        .join("; ")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Hash)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Classification,
    Regression,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelTransform {
    None,
    Log10,
}

/// Sidecar description of a dataset file. Labels in the data file are
/// already expressed in the transformed space named by `label_transform`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub task: TaskKind,
    pub label_transform: LabelTransform,
}

impl DatasetManifest {
    /// `data.jsonl` -> `data.manifest.json`.
    pub fn sidecar_path(data: &Path) -> PathBuf {
        let stem = data.file_stem().and_then(|s| s.to_str()).unwrap_or("dataset");
        data.with_file_name(format!("{stem}.manifest.json"))
    }

    pub fn load(data: &Path) -> Result<Self, DataError> {
        let path = Self::sidecar_path(data);
        let text = std::fs::read_to_string(&path).map_err(|source| DataError::Io {
            path: path.clone(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|e| DataError::Parse {
            line: e.line(),
            message: format!("manifest: {e}"),
        })
    }

    pub fn save(&self, data: &Path) -> Result<(), DataError> {
        let path = Self::sidecar_path(data);
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(&path, text).map_err(|source| DataError::Io { path, source })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConformerRecord {
    pub id: String,
    pub atomic_numbers: Vec<u8>,
    pub conformers: Vec<Coords>,
    pub label: f64,
    pub split: Split,
}

impl ConformerRecord {
    pub fn n_atoms(&self) -> usize {
        self.atomic_numbers.len()
    }

    /// Checks the atom-set, ensemble-size and atom-count invariants.
    pub fn validate(&self) -> Result<(), String> {
        if self.atomic_numbers.is_empty() {
            return Err("no atoms".into());
        }
        if let Some(z) = self.atomic_numbers.iter().find(|z| element_index(**z).is_none()) {
            return Err(format!("element {z} not in allowed set"));
        }
        let m = self.conformers.len();
        if m == 0 || m > MAX_ENSEMBLE {
            return Err(format!("ensemble size {m} outside 1..={MAX_ENSEMBLE}"));
        }
        for (k, c) in self.conformers.iter().enumerate() {
            if c.len() != self.atomic_numbers.len() {
                return Err(format!(
                    "conformer {k} has {} atoms, expected {}",
                    c.len(),
                    self.atomic_numbers.len()
                ));
            }
            if c.iter().flatten().any(|x| !x.is_finite()) {
                return Err(format!("conformer {k} has non-finite coordinates"));
            }
        }
        if !self.label.is_finite() {
            return Err("non-finite label".into());
        }
        Ok(())
    }
}

pub fn element_index(z: u8) -> Option<usize> {
    ALLOWED_ELEMENTS.iter().position(|&e| e == z)
}

/// Reads a line-delimited dataset. Blank lines are skipped.
///
/// Every record is validated; if any fail, the error lists all of them.
pub fn load_dataset(path: &Path, split_filter: Option<Split>) -> Result<Vec<ConformerRecord>, DataError> {
    let file = File::open(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut records = Vec::new();
    let mut rejected = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|source| DataError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ConformerRecord = serde_json::from_str(&line).map_err(|e| DataError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        match rec.validate() {
            Ok(()) => {
                if split_filter.is_none_or(|s| s == rec.split) {
                    records.push(rec);
                }
            }
            Err(reason) => rejected.push(Rejection {
                id: rec.id.clone(),
                line: line_no,
                reason,
            }),
        }
    }
    if !rejected.is_empty() {
        return Err(DataError::Validation(rejected));
    }
    Ok(records)
}

pub fn save_dataset(path: &Path, records: &[ConformerRecord]) -> Result<(), DataError> {
    let io_err = |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut w = BufWriter::new(File::create(path).map_err(io_err)?);
    for r in records {
        let line = serde_json::to_string(r).expect("record serializes");
        writeln!(w, "{line}").map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

/// A validated dataset together with its manifest.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub records: Vec<ConformerRecord>,
}

impl Dataset {
    pub fn open(path: &Path) -> Result<Self, DataError> {
        let manifest = DatasetManifest::load(path)?;
        let records = load_dataset(path, None)?;
        let ds = Self { manifest, records };
        ds.check_labels()?;
        Ok(ds)
    }

    pub fn check_labels(&self) -> Result<(), DataError> {
        if self.manifest.task != TaskKind::Classification {
            return Ok(());
        }
        let bad: Vec<Rejection> = self
            .records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.label != 0.0 && r.label != 1.0)
            .map(|(i, r)| Rejection {
                id: r.id.clone(),
                line: i + 1,
                reason: format!("classification label {} not in {{0, 1}}", r.label),
            })
            .collect();
        if bad.is_empty() {
            Ok(())
        } else {
            Err(DataError::Validation(bad))
        }
    }

    pub fn split(&self, split: Split) -> Vec<ConformerRecord> {
        self.records.iter().filter(|r| r.split == split).cloned().collect()
    }
}

/// Translates coordinates so their centroid is the origin.
pub fn center_coordinates(coords: &[[f64; 3]]) -> Coords {
    let n = coords.len() as f64;
    let mut c = [0.0; 3];
    for p in coords {
        for k in 0..3 {
            c[k] += p[k];
        }
    }
    c.iter_mut().for_each(|x| *x /= n);
    coords.iter().map(|p| [p[0] - c[0], p[1] - c[1], p[2] - c[2]]).collect()
}

/// Uniformly picks one conformer of the ensemble.
pub fn sample_conformer<R: Rng + ?Sized>(record: &ConformerRecord, rng: &mut R) -> usize {
    rng.random_range(0..record.conformers.len())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    /// Standard deviation of the per-coordinate Gaussian noise, in Å.
    pub tau: f64,
    /// Samples per conformer, parent included.
    pub samples: usize,
    pub seed: u64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            tau: 0.1,
            samples: 2,
            seed: 0,
        }
    }
}

/// Returns `samples - 1` noised copies of `coords`; the parent is not modified.
pub fn augment<R: Rng + ?Sized>(coords: &[[f64; 3]], cfg: &NoiseConfig, rng: &mut R) -> Vec<Coords> {
    let copies = cfg.samples.saturating_sub(1);
    if cfg.tau == 0.0 {
        return vec![coords.to_vec(); copies];
    }
    let normal = Normal::new(0.0, cfg.tau).expect("tau is finite and non-negative");
    (0..copies)
        .map(|_| {
            coords
                .iter()
                .map(|p| {
                    [
                        p[0] + normal.sample(rng),
                        p[1] + normal.sample(rng),
                        p[2] + normal.sample(rng),
                    ]
                })
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge {
    pub src: usize,
    pub dst: usize,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RadialGraph {
    pub n_nodes: usize,
    pub edges: Vec<Edge>,
    pub node_types: Vec<u8>,
}

impl RadialGraph {
    pub fn n_self_loops(&self) -> usize {
        self.edges.iter().filter(|e| e.src == e.dst).count()
    }

    pub fn sources(&self) -> Vec<usize> {
        self.edges.iter().map(|e| e.src).collect()
    }

    pub fn targets(&self) -> Vec<usize> {
        self.edges.iter().map(|e| e.dst).collect()
    }
}

pub fn distance(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
}

/// Directed edges between every pair within `cutoff`, plus one self-loop per node.
pub fn build_radial_graph(coords: &[[f64; 3]], node_types: &[u8], cutoff: f64) -> RadialGraph {
    let n = coords.len();
    let mut edges = Vec::with_capacity(n * 4);
    for dst in 0..n {
        for src in 0..n {
            if src == dst {
                edges.push(Edge {
                    src,
                    dst,
                    distance: 0.0,
                });
                continue;
            }
            let d = distance(&coords[src], &coords[dst]);
            if d <= cutoff {
                edges.push(Edge { src, dst, distance: d });
            }
        }
    }
    RadialGraph {
        n_nodes: n,
        edges,
        node_types: node_types.to_vec(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::stream;
    use proptest::prelude::*;

    fn record(id: &str, z: Vec<u8>, confs: Vec<Coords>) -> ConformerRecord {
        ConformerRecord {
            id: id.into(),
            atomic_numbers: z,
            conformers: confs,
            label: 1.0,
            split: Split::Train,
        }
    }

    #[test]
    fn centering_examples() {
        assert_eq!(center_coordinates(&[[5., 5., 5.]]), vec![[0., 0., 0.]]);
        assert_eq!(
            center_coordinates(&[[0., 0., 0.], [2., 0., 0.]]),
            vec![[-1., 0., 0.], [1., 0., 0.]]
        );
    }

    proptest! {
        #[test]
        fn centering_preserves_distances(pts in proptest::collection::vec(proptest::array::uniform3(-50.0f64..50.0), 1..20)) {
            let c = center_coordinates(&pts);
            let mut cen = [0.0; 3];
            for p in &c { for k in 0..3 { cen[k] += p[k]; } }
            let norm = (cen[0] * cen[0] + cen[1] * cen[1] + cen[2] * cen[2]).sqrt() / c.len() as f64;
            prop_assert!(norm < 1e-12);
            for i in 0..pts.len() {
                for j in 0..pts.len() {
                    prop_assert!((distance(&pts[i], &pts[j]) - distance(&c[i], &c[j])).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn edges_are_symmetric(pts in proptest::collection::vec(proptest::array::uniform3(-4.0f64..4.0), 1..15)) {
            let g = build_radial_graph(&pts, &vec![6; pts.len()], DEFAULT_CUTOFF);
            prop_assert_eq!(g.n_self_loops(), pts.len());
            for e in &g.edges {
                prop_assert!(e.distance <= DEFAULT_CUTOFF);
                prop_assert!(g.edges.iter().any(|f| f.src == e.dst && f.dst == e.src));
            }
        }
    }

    #[test]
    fn graph_examples() {
        let g = build_radial_graph(&[[0., 0., 0.], [3., 0., 0.]], &[6, 6], 4.0);
        assert_eq!(g.edges.len(), 4);
        let g = build_radial_graph(&[[0., 0., 0.], [5., 0., 0.]], &[6, 6], 4.0);
        assert_eq!(g.edges.len(), 2);
        assert_eq!(g.n_self_loops(), 2);
        // isoceles triangle with sides 3, 3, 5
        let h = (9.0f64 - 6.25).sqrt();
        let tri = [[-2.5, 0., 0.], [2.5, 0., 0.], [0., h, 0.]];
        let g = build_radial_graph(&tri, &[6, 6, 6], 4.0);
        // enumerate pairs independently
        let mut expected = 3;
        for i in 0..3 {
            for j in 0..3 {
                if i != j && distance(&tri[i], &tri[j]) <= 4.0 {
                    expected += 1;
                }
            }
        }
        assert_eq!(expected, 7);
        assert_eq!(g.edges.len(), 7);
    }

    #[test]
    fn sampling_conformers() {
        let single = record("a", vec![6], vec![vec![[0.; 3]]]);
        let mut rng = stream(3, &[]);
        assert!((0..100).all(|_| sample_conformer(&single, &mut rng) == 0));

        let ten = record("b", vec![6], vec![vec![[0.; 3]]; 10]);
        let mut rng = stream(4, &[]);
        let mut counts = [0usize; 10];
        let n = 10_000;
        for _ in 0..n {
            counts[sample_conformer(&ten, &mut rng)] += 1;
        }
        let sd = (n as f64 * 0.1 * 0.9).sqrt();
        for c in counts {
            assert!((c as f64 - n as f64 * 0.1).abs() < 5.0 * sd);
        }
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - 1000.0).powi(2) / 1000.0).sum();
        // 9 degrees of freedom, p = 0.001 critical value
        assert!(chi2 < 27.88, "chi2 = {chi2}");

        let a: Vec<usize> = {
            let mut r = stream(9, &[1]);
            (0..50).map(|_| sample_conformer(&ten, &mut r)).collect()
        };
        let b: Vec<usize> = {
            let mut r = stream(9, &[1]);
            (0..50).map(|_| sample_conformer(&ten, &mut r)).collect()
        };
        assert_eq!(a, b);
    }

    #[test]
    fn augmentation_noise_scale() {
        let parent: Coords = (0..20).map(|i| [i as f64 * 0.1, 0., -1.]).collect();
        let cfg0 = NoiseConfig {
            tau: 0.0,
            samples: 4,
            seed: 0,
        };
        let mut rng = stream(1, &[]);
        let copies = augment(&parent, &cfg0, &mut rng);
        assert_eq!(copies.len(), 3);
        assert!(copies.iter().all(|c| c == &parent));

        let cfg = NoiseConfig {
            tau: 0.1,
            samples: 2,
            seed: 0,
        };
        let mut total = 0.0;
        let mut count = 0usize;
        for _ in 0..10_000 {
            let c = &augment(&parent, &cfg, &mut rng)[0];
            for (p, q) in parent.iter().zip(c) {
                for k in 0..3 {
                    total += (q[k] - p[k]).abs();
                    count += 1;
                }
            }
        }
        let mean = total / count as f64;
        let expected = 0.1 * (2.0 / std::f64::consts::PI).sqrt();
        assert!((mean - expected).abs() / expected < 0.05);
    }

    #[test]
    fn load_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        std::fs::write(&path, "").unwrap();
        assert!(load_dataset(&path, None).unwrap().is_empty());

        let recs = vec![
            record("m1", vec![6, 8], vec![vec![[0.1, 0.2, 0.3], [1.0 / 3.0, -2.5e-7, 9.75]]]),
            ConformerRecord {
                split: Split::Test,
                label: 0.123456789012345678,
                ..record("m2", vec![17], vec![vec![[0.; 3]], vec![[1e-300, 2., 3.]]])
            },
        ];
        save_dataset(&path, &recs).unwrap();
        let back = load_dataset(&path, None).unwrap();
        assert_eq!(back, recs);
        let bits = |r: &[ConformerRecord]| -> Vec<u64> {
            r.iter()
                .flat_map(|x| x.conformers.iter().flatten().flatten().map(|v| v.to_bits()).chain([x.label.to_bits()]))
                .collect()
        };
        assert_eq!(bits(&back), bits(&recs));
        assert_eq!(load_dataset(&path, Some(Split::Test)).unwrap().len(), 1);

        std::fs::write(&path, "{\"id\": \"x\"\nnot json").unwrap();
        match load_dataset(&path, None) {
            Err(DataError::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("expected parse error, got {other:?}"),
        }

        let bad = vec![
            record("phos", vec![15], vec![vec![[0.; 3]]]),
            record("ok", vec![6], vec![vec![[0.; 3]]]),
            record("ragged", vec![6, 6], vec![vec![[0.; 3]]]),
            record("big", vec![6], vec![vec![[0.; 3]]; 11]),
        ];
        save_dataset(&path, &bad).unwrap();
        match load_dataset(&path, None) {
            Err(DataError::Validation(r)) => {
                let ids: Vec<&str> = r.iter().map(|x| x.id.as_str()).collect();
                assert_eq!(ids, ["phos", "ragged", "big"]);
            }
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn manifest_and_label_checks() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pgp.jsonl");
        let m = DatasetManifest {
            name: "pgp".into(),
            task: TaskKind::Classification,
            label_transform: LabelTransform::None,
        };
        m.save(&path).unwrap();
        assert_eq!(DatasetManifest::sidecar_path(&path).file_name().unwrap(), "pgp.manifest.json");
        let mut r = record("a", vec![6], vec![vec![[0.; 3]]]);
        r.label = 0.5;
        save_dataset(&path, &[r]).unwrap();
        assert!(matches!(Dataset::open(&path), Err(DataError::Validation(_))));
    }
}
