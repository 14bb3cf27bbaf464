//! Artifact paths and small file helpers shared by the subcommands.

use std::fs;
use std::path::{Path, PathBuf};

use prunelab::{Criterion, Error, PhaseOrder, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;

pub const BASELINE: &str = "baseline";
const LOCK_FILE: &str = ".prunelab.lock";

/// Stem of a pruned model's artifacts, e.g. `wm_1_cl`.
pub fn pruned_stem(criterion: Criterion, blocks: usize, order: PhaseOrder) -> String {
    format!("{}_{blocks}_{}", criterion.tag(), order.tag())
}

pub fn checkpoint(out: &Path, stem: &str) -> PathBuf {
    out.join(format!("{stem}.prlb"))
}

pub fn metrics(out: &Path, stem: &str) -> PathBuf {
    out.join(format!("{stem}.metrics.json"))
}

pub fn latency(out: &Path, stem: &str) -> PathBuf {
    out.join(format!("{stem}.latency.json"))
}

pub fn entry(out: &Path, stem: &str) -> PathBuf {
    out.join(format!("{stem}.entry.json"))
}

pub fn plan_log(out: &Path, stem: &str) -> PathBuf {
    out.join(format!("{stem}.plan.tsv"))
}

pub fn phases(out: &Path, stem: &str) -> PathBuf {
    out.join(format!("{stem}.phases.json"))
}

pub fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write(
        path,
        &serde_json::to_string_pretty(value).expect("artifact serializes"),
    )
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        offset: offset_of(&text, e.line(), e.column()),
        msg: e.to_string(),
    })
}

fn offset_of(text: &str, line: usize, column: usize) -> u64 {
    let before: usize = text
        .split_inclusive('\n')
        .take(line.saturating_sub(1))
        .map(str::len)
        .sum();
    (before + column.saturating_sub(1)) as u64
}

/// Advisory lock held while a subcommand reads or writes an output directory.
pub struct DirLock(PathBuf);

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(LOCK_FILE);
        match fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
        {
            Ok(_) => Ok(DirLock(path)),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Report(format!(
                "{} is locked by another run; delete {} if it is stale",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(Error::io(path, e)),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}
