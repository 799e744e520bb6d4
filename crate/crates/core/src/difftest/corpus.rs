//! On-disk bug corpus: `bugs/<kind>/<dedup-key>/{model.json,input.dljt,report.json}`.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use thiserror::Error;

use super::BugReport;
use crate::dljt::{self, DljtError};
use crate::graph::{from_json, to_json, GraphModel, ParseError};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("model.json: {0}")]
    Model(#[from] ParseError),
    #[error("input.dljt: {0}")]
    Tensor(#[from] DljtError),
    #[error("report.json: {0}")]
    Report(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct BugEntry {
    pub dir: PathBuf,
    pub report: BugReport,
    pub model: GraphModel,
    pub input: Tensor,
}

/// Writes one entry under `root/bugs/` and returns its directory.
pub fn write_entry(root: &Path, report: &BugReport, model: &GraphModel, input: &Tensor) -> Result<PathBuf, CorpusError> {
    let dir = root.join("bugs").join(report.kind.dir_name()).join(&report.dedup_key);
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("model.json"), to_json(model))?;
    dljt::write_file(dir.join("input.dljt"), input)?;
    let mut text = serde_json::to_string_pretty(report)?;
    text.push('\n');
    fs::write(dir.join("report.json"), text)?;
    Ok(dir)
}

pub fn read_entry(dir: &Path) -> Result<BugEntry, CorpusError> {
    Ok(BugEntry {
        dir: dir.to_path_buf(),
        report: serde_json::from_str(&fs::read_to_string(dir.join("report.json"))?)?,
        model: from_json(&fs::read_to_string(dir.join("model.json"))?)?,
        input: dljt::read_file(dir.join("input.dljt"))?,
    })
}

fn collect(dir: &Path, base: &Path, out: &mut Vec<(String, PathBuf)>) -> io::Result<()> {
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            collect(&path, base, out)?;
        } else {
            let rel = path.strip_prefix(base).expect("under base").to_string_lossy().replace('\\', "/");
            out.push((rel, path));
        }
    }
    Ok(())
}

/// SHA-256 over every file below `root/bugs`, visited in sorted path order.
/// An absent corpus hashes as empty.
pub fn corpus_digest(root: &Path) -> io::Result<String> {
    let bugs = root.join("bugs");
    let mut files = Vec::new();
    if bugs.is_dir() {
        collect(&bugs, &bugs, &mut files)?;
    }
    files.sort();
    let mut h = Sha256::new();
    for (rel, path) in files {
        let data = fs::read(&path)?;
        h.update((rel.len() as u64).to_le_bytes());
        h.update(rel.as_bytes());
        h.update((data.len() as u64).to_le_bytes());
        h.update(&data);
    }
    Ok(hex::encode(h.finalize()))
}

/// Every entry directory below `root/bugs`, sorted.
pub fn entry_dirs(root: &Path) -> io::Result<Vec<PathBuf>> {
    let mut dirs = Vec::new();
    let bugs = root.join("bugs");
    if !bugs.is_dir() {
        return Ok(dirs);
    }
    for kind in fs::read_dir(&bugs)? {
        let kind = kind?.path();
        if kind.is_dir() {
            for e in fs::read_dir(&kind)? {
                let e = e?.path();
                if e.join("report.json").is_file() {
                    dirs.push(e);
                }
            }
        }
    }
    dirs.sort();
    Ok(dirs)
}
