//! Dataset manifest:
//!
//! ```json
//! {"images": [{"path": "img.png",
//!              "masks": [{"id": "m0", "path": "m0.png", "label": "cat"},
//!                        {"id": "m1", "box": [4, 4, 20, 30], "expression_id": "e7"}]}]}
//! ```
//!
//! Relative paths are resolved against the manifest's directory. A mask
//! entry carries either `path` or `box`, and a `label` (class retrieval),
//! an `expression_id` (referring retrieval) or both. Every mask of an image
//! is a candidate for that image's expressions.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{arg, Error, Result};
use crate::mask::{PixelBox, QueryMask};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub images: Vec<ManifestImage>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestImage {
    pub path: PathBuf,
    pub masks: Vec<ManifestMask>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestMask {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default, rename = "box", skip_serializing_if = "Option::is_none")]
    pub bbox: Option<PixelBox>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expression_id: Option<String>,
}

impl ManifestMask {
    /// Reads or rasterizes the mask for an image of `dims`.
    pub fn resolve(&self, base: &Path, dims: (usize, usize)) -> Result<QueryMask> {
        match (&self.path, &self.bbox) {
            (Some(p), None) => QueryMask::load(base.join(p), Some(dims)),
            (None, Some(b)) => QueryMask::from_box(*b, dims.0, dims.1),
            _ => arg(format!(
                "mask `{}` needs exactly one of `path` or `box`",
                self.id
            )),
        }
    }
}

impl Manifest {
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let manifest: Manifest = serde_json::from_str(text).map_err(|e| Error::Parse {
            path: origin.to_path_buf(),
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        for img in &manifest.images {
            for m in &img.masks {
                if m.path.is_some() == m.bbox.is_some() {
                    return Err(Error::Data(format!(
                        "mask `{}` of {} needs exactly one of `path` or `box`",
                        m.id,
                        img.path.display()
                    )));
                }
            }
        }
        Ok(manifest)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::parse(&std::fs::read_to_string(path)?, path)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}
