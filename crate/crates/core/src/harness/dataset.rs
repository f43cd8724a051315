//! Loading generated datasets into normalised training pairs.

use std::path::{Path, PathBuf};

use gradkit::Tensor;

use crate::error::{PadmError, Result};
use crate::harness::manifest::{Manifest, ManifestItem, Split};
use crate::harness::preprocess::{center_crop, normalize, resize_bilinear};
use crate::harness::tensorfile::read_f64;
use crate::image::Image;

/// One slice at the model grid: condition `y` (NAC), target `x0` (AC) and the
/// attenuation input `a`, all mapped to `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SlicePair {
    pub id: String,
    pub split: Split,
    pub y: Vec<f32>,
    pub x0: Vec<f32>,
    pub a: Option<Vec<f32>>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: Manifest,
    pub root: PathBuf,
    /// Side of the model grid.
    pub side: usize,
    /// Pixel spacing at the model grid, cm.
    pub spacing: f64,
    pub pairs: Vec<SlicePair>,
}

fn load_image(root: &Path, rel: &str, side: usize, spacing: f64) -> Result<Image> {
    let path = root.join(rel);
    let t = read_f64(&path)?;
    if t.shape() != [side, side] {
        return Err(PadmError::Format {
            path,
            detail: format!("shape {:?}, manifest says {side}×{side}", t.shape()),
        });
    }
    Image::new(side, spacing, t.into_data())
}

fn to_f32(img: &Image) -> Vec<f32> {
    img.data().iter().map(|&v| v as f32).collect()
}

impl Dataset {
    /// Reads every item, crops to `roi` (default: whole grid) and resizes to
    /// `target` pixels per side.
    pub fn load(path: &Path, roi: Option<usize>, target: usize) -> Result<Self> {
        let (manifest, root) = Manifest::read(path)?;
        let grid = manifest.grid_size;
        let roi = roi.unwrap_or(grid);
        let norm = manifest.normalization;
        let prepare = |img: &Image, vmax: f64| -> Result<Image> {
            normalize(&resize_bilinear(&center_crop(img, roi)?, target)?, vmax)
        };
        let load_item = |item: &ManifestItem| -> Result<SlicePair> {
            let read = |rel: &str| load_image(&root, rel, grid, manifest.pixel_spacing);
            let a = match &item.mu {
                Some(rel) => Some(to_f32(&prepare(&read(rel)?, norm.mu_max)?)),
                None => None,
            };
            Ok(SlicePair {
                id: item.id.clone(),
                split: item.split,
                y: to_f32(&prepare(&read(&item.nac)?, norm.ac_max)?),
                x0: to_f32(&prepare(&read(&item.ac)?, norm.ac_max)?),
                a,
            })
        };
        let pairs = manifest.items.iter().map(load_item).collect::<Result<Vec<_>>>()?;
        let spacing = manifest.pixel_spacing * roi as f64 / target as f64;
        Ok(Self {
            manifest,
            root,
            side: target,
            spacing,
            pairs,
        })
    }

    pub fn split(&self, split: Split) -> Vec<&SlicePair> {
        self.pairs.iter().filter(|p| p.split == split).collect()
    }
}

/// Which image of a pair to stack.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Field {
    Y,
    X0,
    A,
}

/// Stacks one field of `pairs` into a `[B, 1, side, side]` tensor.
pub fn stack(pairs: &[&SlicePair], field: Field, side: usize) -> Result<Tensor<f32>> {
    let mut data = Vec::with_capacity(pairs.len() * side * side);
    for p in pairs {
        let src = match field {
            Field::Y => &p.y,
            Field::X0 => &p.x0,
            Field::A => p
                .a
                .as_ref()
                .ok_or_else(|| PadmError::MissingMu(format!("item {}", p.id)))?,
        };
        if src.len() != side * side {
            return Err(PadmError::Shape(format!("item {} is not {side}×{side}", p.id)));
        }
        data.extend_from_slice(src);
    }
    Ok(Tensor::from_vec(vec![pairs.len(), 1, side, side], data)?)
}
