//! Ablation grid over noise temperature, latent size and loss weights.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub tau: Vec<f64>,
    pub d: Vec<usize>,
    pub lambda_s: Vec<f64>,
    pub lambda_r: Vec<f64>,
    pub runs: usize,
    pub epochs: usize,
}

impl GridSpec {
    pub fn reference() -> Self {
        Self {
            tau: vec![0.1, 1.0],
            d: vec![128, 256],
            lambda_s: vec![0.0, 0.1, 1.0, 10.0],
            lambda_r: vec![0.0, 0.1, 1.0, 10.0],
            runs: 10,
            epochs: 50,
        }
    }

    /// Cells in a fixed nested order: tau, d, lambda_s, lambda_r.
    pub fn cells(&self) -> Vec<Cell> {
        let mut out = Vec::new();
        for &tau in &self.tau {
            for &d in &self.d {
                for &lambda_s in &self.lambda_s {
                    for &lambda_r in &self.lambda_r {
                        out.push(Cell { tau, d, lambda_s, lambda_r });
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub tau: f64,
    pub d: usize,
    pub lambda_s: f64,
    pub lambda_r: f64,
}

impl Cell {
    /// Directory name, e.g. `tau0.1_d128_ls1_lr0`.
    pub fn key(&self) -> String {
        format!("tau{}_d{}_ls{}_lr{}", self.tau, self.d, self.lambda_s, self.lambda_r)
    }

    pub fn parse_key(key: &str) -> Option<Cell> {
        let mut parts = key.split('_');
        let tau = parts.next()?.strip_prefix("tau")?.parse().ok()?;
        let d = parts.next()?.strip_prefix('d')?.parse().ok()?;
        let lambda_s = parts.next()?.strip_prefix("ls")?.parse().ok()?;
        let lambda_r = parts.next()?.strip_prefix("lr")?.parse().ok()?;
        parts.next().is_none().then_some(Cell { tau, d, lambda_s, lambda_r })
    }
}
