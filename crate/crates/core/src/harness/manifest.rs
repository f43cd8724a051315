//! Dataset manifest (`manifest.json`).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{io_err, PadmError, Result};
use crate::phantom::SpecRanges;
use crate::projector::NoiseModel;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Global intensity statistics fixing the affine map to `[-1, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    /// Maximum over every AC image; shared by NAC and AC.
    pub ac_max: f64,
    pub mu_max: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestItem {
    pub id: String,
    pub seed: u64,
    pub split: Split,
    pub has_defect: bool,
    pub emission: String,
    pub mu: Option<String>,
    pub nac: String,
    pub ac: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub count: usize,
    pub seed: u64,
    pub grid_size: usize,
    pub pixel_spacing: f64,
    pub n_angles: usize,
    pub mlem_iters: usize,
    pub noise: Option<NoiseModel>,
    pub orientation: String,
    pub split_rule: String,
    pub normalization: Normalization,
    pub ranges: SpecRanges,
    pub items: Vec<ManifestItem>,
}

impl Manifest {
    pub const FORMAT_VERSION: u32 = 1;
    pub const SPLIT_RULE: &'static str =
        "first floor(0.6n) items train, next floor(0.2n) val, remainder test";

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(io_err(path))
    }

    /// Reads a manifest from a file or from a directory containing `manifest.json`.
    pub fn read(path: &Path) -> Result<(Self, PathBuf)> {
        let file = if path.is_dir() {
            path.join(MANIFEST_FILE)
        } else {
            path.to_path_buf()
        };
        let text = std::fs::read_to_string(&file).map_err(io_err(&file))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        if manifest.format_version != Self::FORMAT_VERSION {
            return Err(PadmError::ConfigMismatch(format!(
                "manifest format {} is not supported",
                manifest.format_version
            )));
        }
        let root = file.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok((manifest, root))
    }

    pub fn items_in(&self, split: Split) -> impl Iterator<Item = &ManifestItem> {
        self.items.iter().filter(move |i| i.split == split)
    }
}
