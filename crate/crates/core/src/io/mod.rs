//! File formats: CVRPLib instances, checkpoints, TOML configs, instance
//! sets and reports.

pub mod checkpoint;
pub mod config;
pub mod cvrplib;
pub mod dataset;

use std::io::Write;
use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: unsupported EDGE_WEIGHT_TYPE `{found}` (only EUC_2D is supported)")]
    UnsupportedWeightType { line: usize, found: String },
    #[error("line {line}: missing {section}")]
    MissingSection { line: usize, section: String },
    #[error("line {line}: depot demand must be 0, found {found}")]
    DepotDemand { line: usize, found: u64 },
    #[error("line {line}: {section} lists {found} nodes, DIMENSION is {expected}")]
    NodeCount {
        line: usize,
        section: String,
        expected: usize,
        found: usize,
    },
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("checkpoint checksum mismatch: stored {stored:016x}, computed {actual:016x}")]
    Checksum { stored: u64, actual: u64 },
    #[error("tensor `{tensor}` has shape {found:?}, model expects {expected:?}")]
    ShapeMismatch {
        tensor: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("unknown key `{key}` in [{section}]{}", suggestion.as_ref().map(|s| format!(", did you mean `{s}`?")).unwrap_or_default())]
    UnknownKey {
        section: String,
        key: String,
        suggestion: Option<String>,
    },
    #[error("{0}")]
    Format(String),
}

impl IoError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        IoError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// Writes `bytes` to a sibling temporary file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    let result = (|| {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = std::fs::remove_file(&tmp);
        return Err(IoError::io(path, e));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn atomic_write_replaces() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.txt");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), b"two");
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
