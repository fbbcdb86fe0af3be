//! Reproducibility records: every command drops a `run.json` with the
//! resolved configuration, the seed, and content hashes of its inputs.

use std::fs;
use std::path::Path;

use anyhow::Result;
use serde::Serialize;
use serde_json::Value;

/// FNV-1a 64-bit over a byte stream.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn hash_file(path: &Path) -> Result<String> {
    Ok(format!("{:016x}", fnv1a64(&fs::read(path)?)))
}

/// Combined content hash over a set of files: each file hashed, then the
/// sorted `name:hash` lines hashed together.
pub fn hash_files<'a>(paths: impl Iterator<Item = &'a Path>) -> Result<String> {
    let mut lines: Vec<String> = Vec::new();
    for p in paths {
        lines.push(format!("{}:{}", p.file_name().unwrap_or_default().to_string_lossy(), hash_file(p)?));
    }
    lines.sort();
    Ok(format!("{:016x}", fnv1a64(lines.join("\n").as_bytes())))
}

#[derive(Serialize)]
pub struct RunRecord {
    pub command: String,
    pub seed: u64,
    pub config: Value,
    pub inputs: Vec<(String, String)>,
    pub outputs: Vec<String>,
    pub threads: usize,
}

/// Write `run.json` into the output directory.
pub fn write_run_record(dir: &Path, record: &RunRecord) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("run.json"), serde_json::to_string_pretty(record)?)?;
    Ok(())
}
