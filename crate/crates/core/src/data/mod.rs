//! Corpus ingestion and export, the synthetic IDM corpus, manifests and
//! checkpoint files.

mod checkpoint;
mod ingest;
mod manifest;
mod synthetic;
mod table;

use std::io::Write;
use std::path::Path;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use ingest::{export_csv, ingest_csv, ColumnMap};
pub use manifest::{sidecar_path, CorpusManifest, UnitSystem, CORPUS_FRAME_RATE_HZ};
pub use synthetic::{generate_synthetic, IdmParams, Obstacle, SyntheticConfig};
pub use table::TrajectoryTable;

use crate::error::{Error, Result};

/// Writes `bytes` to a temporary file beside `path`, then renames it into
/// place, so readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}
