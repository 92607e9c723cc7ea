//! Image and weights files. Every writer goes through a temporary file in the
//! destination directory and a rename, so a failed write leaves nothing behind.

mod image;
mod scenes;
mod weights;

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub use self::image::{decode_ppm, encode_ppm, load_image, save_image, ImageFormat};
pub use self::scenes::{list_scenes, load_triplet, save_scene, ScenePaths};
pub use self::weights::{load_weights, read_weights, save_weights, write_weights, MAGIC, VERSION};

/// Writes `bytes` to `path` atomically.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(path, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}
