//! Scene directories: `scene_NNN_{low,mid,high}.ppm` plus an optional
//! `scene_NNN_gt.ppm` target per scene.

use std::path::{Path, PathBuf};

use super::image::{load_image, save_image};
use crate::error::{Error, Result};
use crate::net::ExposureTriplet;
use crate::tensor::Tensor3;

const PARTS: [&str; 3] = ["low", "mid", "high"];

/// Paths of one scene's files.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScenePaths {
    pub frames: [PathBuf; 3],
    pub target: Option<PathBuf>,
}

fn file(dir: &Path, index: usize, part: &str) -> PathBuf {
    dir.join(format!("scene_{index:03}_{part}.ppm"))
}

/// Writes scene `index` into `dir` (created if needed).
pub fn save_scene(dir: &Path, index: usize, triplet: &ExposureTriplet, target: Option<&Tensor3>) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (part, frame) in PARTS.iter().zip(triplet.frames()) {
        save_image(file(dir, index, part), frame)?;
    }
    if let Some(t) = target {
        save_image(file(dir, index, "gt"), t)?;
    }
    Ok(())
}

/// Every complete scene in `dir`, ordered by index.
pub fn list_scenes(dir: &Path) -> Result<Vec<ScenePaths>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut indices = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name();
        let Some(name) = name.to_str() else { continue };
        if let Some(idx) = name
            .strip_prefix("scene_")
            .and_then(|r| r.strip_suffix("_mid.ppm"))
            .and_then(|n| n.parse::<usize>().ok())
        {
            indices.push(idx);
        }
    }
    indices.sort_unstable();
    let mut scenes = Vec::new();
    for i in indices {
        let frames = PARTS.map(|p| file(dir, i, p));
        if let Some(missing) = frames.iter().find(|p| !p.exists()) {
            return Err(Error::InvalidInput(format!("incomplete scene: {} is missing", missing.display())));
        }
        let gt = file(dir, i, "gt");
        scenes.push(ScenePaths {
            frames,
            target: gt.exists().then_some(gt),
        });
    }
    if scenes.is_empty() {
        return Err(Error::InvalidInput(format!("no scene_NNN_mid.ppm files in {}", dir.display())));
    }
    Ok(scenes)
}

pub fn load_triplet(frames: &[PathBuf; 3]) -> Result<ExposureTriplet> {
    ExposureTriplet::new(load_image(&frames[0])?, load_image(&frames[1])?, load_image(&frames[2])?)
}
