//! Dataset I/O, metrics, perturbations, checkpointing, fixture generation,
//! and the CLI harness that composes the full pipeline.

pub mod checkpoint;
pub mod cli;
pub mod dataset;
pub mod engine;
pub mod metrics;
pub mod perturb;
pub mod toygen;

use std::path::Path;

use crate::error::{Error, Result};

/// Write a file via temp-file-plus-rename so consumers never observe a
/// partially written artifact.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    let mut tmp = tempfile::NamedTempFile::new_in(dir.unwrap_or(Path::new(".")))
        .map_err(|e| Error::io(path, e))?;
    std::io::Write::write_all(&mut tmp, bytes).map_err(|e| Error::io(path, e))?;
    tmp.persist(path)
        .map_err(|e| Error::io(path, e.error))?;
    Ok(())
}
