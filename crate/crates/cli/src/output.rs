//! Output bookkeeping, the run manifest, and the exit-code contract.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use photomask::io::{write_atomic, write_json};
use serde::{Deserialize, Serialize};

use crate::args::Cli;

/// Why a command failed; decides the exit code.
#[derive(Debug)]
pub enum Failure {
    /// Bad arguments or input files: exit 2.
    Input(String),
    /// The numerics broke down: exit 3.
    Numerical(String),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Input(_) => 2,
            Failure::Numerical(_) => 3,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Input(m) => write!(f, "input error: {m}"),
            Failure::Numerical(m) => write!(f, "numerical failure: {m}"),
        }
    }
}

impl From<photomask::Error> for Failure {
    fn from(e: photomask::Error) -> Self {
        if e.is_numerical() {
            Failure::Numerical(e.to_string())
        } else {
            Failure::Input(e.to_string())
        }
    }
}

impl From<csv::Error> for Failure {
    fn from(e: csv::Error) -> Self {
        Failure::Input(e.to_string())
    }
}

/// Files written under one output directory, in write order.
pub struct Outputs {
    dir: PathBuf,
    files: Vec<String>,
}

impl Outputs {
    /// Nothing is created until the first file is registered.
    pub fn new(dir: &Path) -> Self {
        Outputs {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        }
    }

    /// Registers `rel` and returns its full path, creating parent directories.
    pub fn path(&mut self, rel: &str) -> Result<PathBuf, Failure> {
        let p = self.dir.join(rel);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent).map_err(|e| Failure::Input(format!("{}: {e}", parent.display())))?;
        }
        self.files.push(rel.to_string());
        Ok(p)
    }

    pub fn json<T: Serialize>(&mut self, rel: &str, value: &T) -> Result<(), Failure> {
        let p = self.path(rel)?;
        Ok(write_json(&p, value)?)
    }

    pub fn bytes(&mut self, rel: &str, bytes: &[u8]) -> Result<(), Failure> {
        let p = self.path(rel)?;
        Ok(write_atomic(&p, bytes)?)
    }

    /// Writes a CSV from a header and rows of already formatted fields.
    pub fn csv(&mut self, rel: &str, header: &[&str], rows: &[Vec<String>]) -> Result<(), Failure> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(header)?;
        for r in rows {
            w.write_record(r)?;
        }
        let bytes = w.into_inner().map_err(|e| Failure::Input(e.to_string()))?;
        self.bytes(rel, &bytes)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn files(&self) -> &[String] {
        &self.files
    }
}

/// Enough to reproduce a run: the full parsed invocation plus what it wrote.
#[derive(Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub config: Cli,
    pub seed: u64,
    pub version: String,
    pub outputs: Vec<String>,
    pub wall_time_s: f64,
    /// Exit code the run finished with.
    pub status: i32,
}

pub const MANIFEST: &str = "manifest.json";

pub fn write_manifest(dir: &Path, manifest: &Manifest) -> Result<(), Failure> {
    Ok(write_json(&dir.join(MANIFEST), manifest)?)
}

pub fn read_manifest(path: &Path) -> Result<Manifest, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::Input(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::Input(format!("{}: {e}", path.display())))
}

/// Shortest round-trip formatting, so reports are reproducible to the bit.
pub fn num(v: f64) -> String {
    format!("{v}")
}
