//! Run manifests: `manifest_<command>.txt` in the output directory.
//!
//! The manifest records everything an identical re-run needs (the full
//! config text and command arguments) plus SHA-256 digests of every output.
//! Thread counts are deliberately absent so manifests compare equal across
//! `--jobs` values.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use pyoco_core::config::ExperimentConfig;
use pyoco_core::ndcore::ptns;
use sha2::{Digest, Sha256};

/// Version of the `manifest_<command>.txt` layout itself.
pub const MANIFEST_VERSION: u32 = 1;
/// Versions of the text formats written next to PTNS tensors.
pub const CHECKPOINT_VERSION: u32 = 1;
pub const DATASET_INDEX_VERSION: u32 = 1;
pub const CSV_VERSION: u32 = 1;
pub const CONFIG_VERSION: u32 = 1;

pub struct Manifest {
    command: String,
    args: Vec<(String, String)>,
    inputs: Vec<(String, String)>,
    outputs: Vec<(String, String)>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

/// Regular files below `dir`, sorted by path.
fn files_under(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).with_context(|| format!("listing {}", d.display()))? {
            let p = entry?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p);
            }
        }
    }
    out.sort();
    Ok(out)
}

impl Manifest {
    pub fn new(command: &str) -> Self {
        Self {
            command: command.to_string(),
            args: Vec::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn arg(&mut self, key: &str, value: impl ToString) {
        self.args.push((key.to_string(), value.to_string()));
    }

    /// Records the digest of an input file, or of every file in an input directory.
    pub fn input(&mut self, path: &Path) -> Result<()> {
        let digests = digests(path)?;
        self.inputs.extend(digests);
        Ok(())
    }

    pub fn output(&mut self, path: &Path) -> Result<()> {
        let digests = digests(path)?;
        self.outputs.extend(digests);
        Ok(())
    }

    pub fn render(&self, config: &ExperimentConfig) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "manifest_version = {MANIFEST_VERSION}");
        let _ = writeln!(s, "command = {}", self.command);
        let _ = writeln!(s, "tool_version = {}", env!("CARGO_PKG_VERSION"));
        let _ = writeln!(s, "config_hash = {}", config.hash());
        let _ = writeln!(s, "seed = {}", config.seed);
        let _ = writeln!(s, "format.ptns = {}", ptns::VERSION);
        let _ = writeln!(s, "format.checkpoint = {CHECKPOINT_VERSION}");
        let _ = writeln!(s, "format.dataset_index = {DATASET_INDEX_VERSION}");
        let _ = writeln!(s, "format.csv = {CSV_VERSION}");
        let _ = writeln!(s, "format.config = {CONFIG_VERSION}");
        for (k, v) in &self.args {
            let _ = writeln!(s, "arg.{k} = {v}");
        }
        for (p, h) in &self.inputs {
            let _ = writeln!(s, "input {p} = {h}");
        }
        for (p, h) in &self.outputs {
            let _ = writeln!(s, "output {p} = {h}");
        }
        s.push_str("[config]\n");
        s.push_str(&config.serialize());
        s
    }
}

fn digests(path: &Path) -> Result<Vec<(String, String)>> {
    let files = if path.is_dir() {
        files_under(path)?
    } else {
        vec![path.to_path_buf()]
    };
    files
        .into_iter()
        .map(|f| Ok((f.display().to_string(), sha256_file(&f)?)))
        .collect()
}

pub fn manifest_path(config: &ExperimentConfig, command: &str) -> PathBuf {
    config.output_dir.join(format!("manifest_{command}.txt"))
}

/// Lines present in only one of the two manifests, prefixed `-` (old) or `+` (new).
pub fn diff(old: &str, new: &str) -> Vec<String> {
    let a: Vec<&str> = old.lines().collect();
    let b: Vec<&str> = new.lines().collect();
    let mut out: Vec<String> = a
        .iter()
        .filter(|l| !b.contains(l))
        .map(|l| format!("- {l}"))
        .collect();
    out.extend(
        b.iter()
            .filter(|l| !a.contains(l))
            .map(|l| format!("+ {l}")),
    );
    out
}
