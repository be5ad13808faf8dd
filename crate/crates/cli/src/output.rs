//! Long-format CSV writers, JSON summaries and the run manifest.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use mfg_lqg::{GridFunction, Mat};
use serde::Serialize;
use sha2::{Digest, Sha256};

/// Full round-trip formatting (17 significant digits).
pub fn num(v: f64) -> String {
    format!("{v:.16e}")
}

/// A CSV table accumulated in memory and written in one go.
pub struct Table {
    text: String,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Self { text: format!("{}\n", header.join(",")) }
    }

    pub fn row(&mut self, cells: &[String]) {
        self.text.push_str(&cells.join(","));
        self.text.push('\n');
    }

    pub fn write(&self, dir: &Path, name: &str) -> io::Result<()> {
        fs::write(dir.join(name), &self.text)
    }
}

/// `node,t,row,col,value` rows of a matrix-valued grid function, with
/// `prefix` cells prepended.
pub fn grid_rows(table: &mut Table, prefix: &[String], g: &GridFunction) {
    let grid = g.grid();
    for (j, m) in g.values().iter().enumerate() {
        for c in 0..m.ncols() {
            for r in 0..m.nrows() {
                let mut cells = prefix.to_vec();
                cells.extend([j.to_string(), num(grid.node(j)), r.to_string(), c.to_string(), num(m[(r, c)])]);
                table.row(&cells);
            }
        }
    }
}

pub fn grid_header<'a>(prefix: &[&'a str]) -> Vec<&'a str> {
    let mut h = prefix.to_vec();
    h.extend(["node", "t", "row", "col", "value"]);
    h
}

/// `row,col,value` rows of a constant matrix.
pub fn matrix_rows(table: &mut Table, prefix: &[String], m: &Mat) {
    for c in 0..m.ncols() {
        for r in 0..m.nrows() {
            let mut cells = prefix.to_vec();
            cells.extend([r.to_string(), c.to_string(), num(m[(r, c)])]);
            table.row(&cells);
        }
    }
}

/// Row-major nested arrays for JSON output.
pub fn nested(m: &Mat) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|r| (0..m.ncols()).map(|c| m[(r, c)]).collect()).collect()
}

pub fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> io::Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(io::Error::other)?;
    text.push('\n');
    fs::write(dir.join(name), text)
}

/// Hash of the configuration after parsing and re-serializing with sorted
/// keys, so whitespace and key order do not matter.
pub fn config_hash(bytes: &[u8]) -> String {
    let canonical = match serde_json::from_slice::<serde_json::Value>(bytes) {
        Ok(v) => serde_json::to_vec(&v).unwrap_or_else(|_| bytes.to_vec()),
        Err(_) => bytes.to_vec(),
    };
    hex::encode(Sha256::digest(&canonical))
}

#[derive(Debug, Serialize)]
pub struct Timing {
    pub phase: String,
    pub seconds: f64,
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config_path: Option<PathBuf>,
    pub config_sha256: Option<String>,
    pub master_seed: Option<u64>,
    pub version: String,
    pub output_dir: PathBuf,
    pub threads: Option<usize>,
    pub timings: Vec<Timing>,
}
