//! The dataset directory contract: `manifest.json` at the root, one
//! subdirectory per scene.
//!
//! The manifest stores each scene's spec, and the spec regenerates the
//! scene bit-exactly; the image files beside it are the same data in
//! portable formats for inspection and interchange. Consumers that need
//! exact floats (train, eval, bench, ablate) re-realize from the spec so
//! no quantization from the 16-bit containers leaks into results.

use pnsr_core::synth::{self, DatasetConfig, SceneSpec, ScenePair};
use pnsr_core::{io, Error, Result};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};

/// One scene's row. Paths are relative to the dataset directory and use
/// '/' separators regardless of platform.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneEntry {
    pub index: usize,
    /// Post-retry spec: realizing it reproduces the scene on the first
    /// attempt.
    pub spec: SceneSpec,
    pub hr_depth: String,
    pub hr_intrinsics: String,
    pub lr_depth: String,
    pub lr_intrinsics: String,
    pub lr_pncc: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub config: DatasetConfig,
    pub scenes: Vec<SceneEntry>,
}

impl Manifest {
    pub fn path_in(dir: &Path) -> PathBuf {
        dir.join("manifest.json")
    }

    pub fn read(dir: &Path) -> Result<Manifest> {
        let path = Self::path_in(dir);
        let text = fs::read_to_string(&path).map_err(|e| {
            Error::Format {
                offset: 0,
                msg: format!("cannot read {}: {e}", path.display()),
            }
        })?;
        let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::Format {
            offset: 0,
            msg: format!("{} is not a valid manifest: {e}", path.display()),
        })?;
        m.config.validate()?;
        if m.scenes.len() != m.config.n_scenes {
            return Err(Error::Format {
                offset: 0,
                msg: format!(
                    "{} declares {} scenes but lists {}",
                    path.display(),
                    m.config.n_scenes,
                    m.scenes.len()
                ),
            });
        }
        Ok(m)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::State(format!("manifest serialization failed: {e}")))?;
        text.push('\n');
        fs::write(Self::path_in(dir), text)?;
        Ok(())
    }
}

/// Resolve a manifest-relative path ('/'-separated) against the dataset
/// directory.
pub fn resolve(dir: &Path, rel: &str) -> PathBuf {
    let mut p = dir.to_path_buf();
    for seg in rel.split('/') {
        p.push(seg);
    }
    p
}

/// Re-realize every scene from its spec. The cameras come from the
/// intrinsics files so edits to them are honored (and validated), while
/// the heavy data is regenerated exactly.
pub fn load_pairs(dir: &Path, m: &Manifest) -> Result<Vec<ScenePair>> {
    m.scenes
        .iter()
        .map(|e| {
            let intr = io::read_intrinsics(&resolve(dir, &e.hr_intrinsics))?;
            synth::realize(&e.spec, &intr, m.config.scale, m.config.s)
        })
        .collect()
}
