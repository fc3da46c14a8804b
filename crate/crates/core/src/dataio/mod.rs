//! Files on disk: feature matrices, manifests, checkpoints, and the
//! synthetic benchmark generator.

mod checkpoint;
mod features;
mod manifest;
pub mod synth;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, Cursor, CHECKPOINT_VERSION};
pub use features::{decode_features, encode_features, read_feature_file, write_feature_file, HEADER_LEN, MAGIC};
pub use manifest::{decode_rle, encode_rle, load_manifest, manifest_to_string, Dataset, ManifestRow, RowSplit, Video};

use std::io::Write;
use std::path::{Path, PathBuf};

use thiserror::Error;

/// Environment variable naming the default workspace root.
pub const WORKSPACE_ENV: &str = "ANOMIZE_WORKSPACE";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: format error at byte {offset}: {message}")]
    Format {
        path: String,
        offset: u64,
        message: String,
    },
    #[error("{path}: payload truncated: header declares {expected} bytes, found {found}")]
    Truncated {
        path: String,
        expected: u64,
        found: u64,
    },
    #[error("{0}")]
    Schema(String),
    #[error("open-set protocol violation: {0}")]
    Protocol(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("checkpoint corrupted: {0}")]
    Corruption(String),
    #[error("checkpoint incompatible: {0}")]
    Migration(String),
}

pub type Result<T, E = DataError> = std::result::Result<T, E>;

impl DataError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

/// Writes `bytes` to a sibling temporary file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir)?;
    let name = path
        .file_name()
        .ok_or_else(|| std::io::Error::new(std::io::ErrorKind::InvalidInput, "path has no file name"))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(name);
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = dir.join(tmp_name);
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path).inspect_err(|_| {
        let _ = std::fs::remove_file(&tmp);
    })
}

/// Resolves the workspace root: an explicit value wins, then
/// `ANOMIZE_WORKSPACE`, then the current directory.
pub fn workspace_root(explicit: Option<&Path>) -> PathBuf {
    if let Some(p) = explicit {
        return p.to_path_buf();
    }
    match std::env::var_os(WORKSPACE_ENV) {
        Some(v) if !v.is_empty() => PathBuf::from(v),
        _ => PathBuf::from("."),
    }
}

/// Joins relative paths onto `root`; absolute paths pass through.
pub fn resolve(root: &Path, path: &Path) -> PathBuf {
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        root.join(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn atomic_write_replaces_contents() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a/b.txt");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), b"two");
        let leftovers = std::fs::read_dir(p.parent().unwrap()).unwrap().count();
        assert_eq!(leftovers, 1);
    }

    #[test]
    fn resolve_keeps_absolute_paths() {
        let root = Path::new("/ws");
        assert_eq!(resolve(root, Path::new("x/y")), PathBuf::from("/ws/x/y"));
        assert_eq!(resolve(root, Path::new("/abs")), PathBuf::from("/abs"));
        assert_eq!(workspace_root(Some(Path::new("/given"))), PathBuf::from("/given"));
    }
}
