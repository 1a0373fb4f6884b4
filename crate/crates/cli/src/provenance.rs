//! Provenance records written next to every artifact.
//!
//! Schema (`<artifact>.provenance.json`, or `provenance.json` inside an
//! artifact directory):
//!
//! ```json
//! {
//!   "tool": "w2w",
//!   "version": "0.1.0",
//!   "command": "build-space",
//!   "params": { ... },
//!   "inputs": [{ "path": "...", "sha256": "..." }],
//!   "outputs": [{ "path": "...", "sha256": "..." }],
//!   "created_unix": 1760000000
//! }
//! ```
//!
//! Directory digests hash the sorted `relative-path\tsha256` lines of every
//! file below the directory, skipping provenance records. The timestamp is
//! the only non-deterministic field any command writes.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use w2w_core::io::{file_sha256, sha256_hex, write_json_atomic};
use w2w_core::Error;

pub const DIR_RECORD: &str = "provenance.json";
const SUFFIX: &str = ".provenance.json";

#[derive(Debug, Serialize)]
pub struct Digest {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct Provenance<'a, P: Serialize> {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: &'a str,
    pub params: &'a P,
    pub inputs: Vec<Digest>,
    pub outputs: Vec<Digest>,
    pub created_unix: u64,
}

fn is_record(path: &Path) -> bool {
    path.file_name()
        .and_then(|n| n.to_str())
        .is_some_and(|n| n == DIR_RECORD || n.ends_with(SUFFIX))
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<(), Error> {
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else if !is_record(&path) {
            out.push(path.strip_prefix(root).unwrap_or(&path).to_path_buf());
        }
    }
    Ok(())
}

/// sha256 of a file, or of the listing of a directory's files.
pub fn digest_path(path: &Path) -> Result<String, Error> {
    if path.is_dir() {
        let mut files = Vec::new();
        collect_files(path, path, &mut files)?;
        files.sort();
        let mut listing = String::new();
        for f in files {
            listing.push_str(&format!("{}\t{}\n", f.display(), file_sha256(&path.join(&f))?));
        }
        Ok(sha256_hex(listing.as_bytes()))
    } else {
        file_sha256(path)
    }
}

fn digests(paths: &[&Path]) -> Result<Vec<Digest>, Error> {
    paths
        .iter()
        .map(|p| {
            Ok(Digest {
                path: p.display().to_string(),
                sha256: digest_path(p)?,
            })
        })
        .collect()
}

/// Where the record for `artifact` lives.
pub fn record_path(artifact: &Path) -> PathBuf {
    if artifact.is_dir() {
        artifact.join(DIR_RECORD)
    } else {
        let mut name = artifact.file_name().unwrap_or_default().to_os_string();
        name.push(SUFFIX);
        artifact.with_file_name(name)
    }
}

/// Writes the record for `primary` listing every input and output digest.
pub fn write_record<P: Serialize>(
    command: &str,
    params: &P,
    inputs: &[&Path],
    outputs: &[&Path],
    primary: &Path,
) -> Result<(), Error> {
    let created_unix = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let record = Provenance {
        tool: "w2w",
        version: env!("CARGO_PKG_VERSION"),
        command,
        params,
        inputs: digests(inputs)?,
        outputs: digests(outputs)?,
        created_unix,
    };
    write_json_atomic(&record_path(primary), &record)
}
