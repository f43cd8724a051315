//! Parallel-beam SPECT physics: attenuated projection, MLEM and Chang-style ACFs.
//!
//! Rays are sampled uniformly at half-pixel steps. Activity is looked up at
//! the nearest pixel and attenuation by bilinear interpolation; each sample
//! sees the attenuation accumulated between it and the detector, including
//! the detector-side half of its own step. The discretised operator is stored as a sparse matrix so the
//! back projection is its exact transpose.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{PadmError, Result};
use crate::image::{EmissionMap, Image, MuMap};

/// Sensitivity below which a pixel is excluded from MLEM.
pub const SENSITIVITY_FLOOR: f64 = 1e-12;

/// Midpoint sub-samples of μ per marching step in attenuation integrals.
const MU_SUBSTEPS: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    angles: Vec<f64>,
    n_bins: usize,
    bin_spacing: f64,
    side: usize,
    pixel_spacing: f64,
}

impl Geometry {
    pub fn new(
        angles: Vec<f64>,
        n_bins: usize,
        bin_spacing: f64,
        side: usize,
        pixel_spacing: f64,
    ) -> Result<Self> {
        let bad = |m: String| Err(PadmError::InvalidGeometry(m));
        if angles.is_empty() {
            return bad("at least one angle is required".into());
        }
        if angles.iter().any(|a| !(0.0..PI).contains(a)) {
            return bad("angles must lie in [0, π)".into());
        }
        if angles.windows(2).any(|w| w[1] <= w[0]) {
            return bad("angles must be strictly increasing".into());
        }
        if side == 0 {
            return bad("image side must be positive".into());
        }
        if n_bins < side {
            return bad(format!("{n_bins} bins cannot cover a {side}-pixel image"));
        }
        if !(bin_spacing > 0.0 && pixel_spacing > 0.0) {
            return bad("spacings must be positive".into());
        }
        Ok(Self {
            angles,
            n_bins,
            bin_spacing,
            side,
            pixel_spacing,
        })
    }

    /// `n_angles` views uniform over `[0, π)` with one bin per pixel column.
    pub fn parallel(n_angles: usize, side: usize, pixel_spacing: f64) -> Result<Self> {
        let angles = (0..n_angles)
            .map(|m| m as f64 * PI / n_angles as f64)
            .collect();
        Self::new(angles, side, pixel_spacing, side, pixel_spacing)
    }

    pub fn angles(&self) -> &[f64] {
        &self.angles
    }

    pub fn n_angles(&self) -> usize {
        self.angles.len()
    }

    pub fn n_bins(&self) -> usize {
        self.n_bins
    }

    pub fn bin_spacing(&self) -> f64 {
        self.bin_spacing
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn pixel_spacing(&self) -> f64 {
        self.pixel_spacing
    }

    /// Ray-marching step length.
    pub fn step(&self) -> f64 {
        self.pixel_spacing / 2.0
    }

    /// Unit vector pointing from the object toward the detector at angle `m`.
    pub fn direction(&self, m: usize) -> (f64, f64) {
        let (s, c) = self.angles[m].sin_cos();
        (-s, c)
    }

    /// Unit vector along the detector at angle `m`.
    pub fn detector_axis(&self, m: usize) -> (f64, f64) {
        let (s, c) = self.angles[m].sin_cos();
        (c, s)
    }

    /// Signed offset of bin `k` from the rotation axis.
    pub fn bin_offset(&self, k: usize) -> f64 {
        (k as f64 - (self.n_bins as f64 - 1.0) / 2.0) * self.bin_spacing
    }

    /// Ray parameters of every sample along a ray: start and count. The start
    /// lies on a pixel edge so axis-aligned rays sample each pixel twice.
    fn ray_span(&self) -> (f64, usize) {
        let n = self.side as f64;
        let margin = (n * (std::f64::consts::SQRT_2 - 1.0) / 2.0).ceil();
        let half = (n / 2.0 + margin) * self.pixel_spacing;
        let count = (2.0 * half / self.step()).round() as usize;
        (-half, count)
    }

    pub fn sinogram_len(&self) -> usize {
        self.n_angles() * self.n_bins
    }

    pub(crate) fn check_image(&self, img: &Image, what: &str) -> Result<()> {
        if img.side() != self.side || (img.spacing() - self.pixel_spacing).abs() > 1e-12 {
            return Err(PadmError::Shape(format!(
                "{what} is {}×{} @ {} cm, geometry expects {}×{} @ {} cm",
                img.side(),
                img.side(),
                img.spacing(),
                self.side,
                self.side,
                self.pixel_spacing
            )));
        }
        Ok(())
    }
}

/// Projection data, angle-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Sinogram {
    n_angles: usize,
    n_bins: usize,
    data: Vec<f64>,
}

impl Sinogram {
    pub fn new(n_angles: usize, n_bins: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n_angles * n_bins {
            return Err(PadmError::Shape(format!(
                "sinogram {n_angles}×{n_bins} needs {} values, got {}",
                n_angles * n_bins,
                data.len()
            )));
        }
        if data.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(PadmError::Shape(
                "sinogram entries must be finite and non-negative".into(),
            ));
        }
        Ok(Self {
            n_angles,
            n_bins,
            data,
        })
    }

    pub fn n_angles(&self) -> usize {
        self.n_angles
    }

    pub fn n_bins(&self) -> usize {
        self.n_bins
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, m: usize, k: usize) -> f64 {
        self.data[m * self.n_bins + k]
    }

    fn check(&self, geometry: &Geometry) -> Result<()> {
        if self.n_angles != geometry.n_angles() || self.n_bins != geometry.n_bins() {
            return Err(PadmError::Shape(format!(
                "sinogram is {}×{}, geometry expects {}×{}",
                self.n_angles,
                self.n_bins,
                geometry.n_angles(),
                geometry.n_bins()
            )));
        }
        Ok(())
    }
}

/// The discretised attenuated projector for one geometry and μ-map.
#[derive(Clone, Debug)]
pub struct Projector {
    geometry: Geometry,
    row_ptr: Vec<usize>,
    cols: Vec<u32>,
    vals: Vec<f64>,
}

impl Projector {
    pub fn new(geometry: &Geometry, mu: Option<&MuMap>) -> Result<Self> {
        if let Some(mu) = mu {
            geometry.check_image(mu.image(), "μ-map")?;
        }
        let side = geometry.side();
        let grid = Image::zeros(side, geometry.pixel_spacing());
        let (l0, count) = geometry.ray_span();
        let h = geometry.step();
        let rows: Vec<Vec<(u32, f64)>> = (0..geometry.sinogram_len())
            .into_par_iter()
            .map(|row| {
                let (m, k) = (row / geometry.n_bins(), row % geometry.n_bins());
                let (dx, dy) = geometry.direction(m);
                let (ex, ey) = geometry.detector_axis(m);
                let r = geometry.bin_offset(k);
                let point = |j: usize| {
                    let l = l0 + (j as f64 + 0.5) * h;
                    (r * ex + l * dx, r * ey + l * dy)
                };
                let mut weights = vec![1.0; count];
                if let Some(mu) = mu {
                    let sub = h / MU_SUBSTEPS as f64;
                    let mut tail = 0.0;
                    for j in (0..count).rev() {
                        let l_start = l0 + j as f64 * h;
                        let mut lower = 0.0;
                        let mut upper = 0.0;
                        for i in 0..MU_SUBSTEPS {
                            let l = l_start + (i as f64 + 0.5) * sub;
                            let v = mu.image().bilinear(r * ex + l * dx, r * ey + l * dy) * sub;
                            if i < MU_SUBSTEPS / 2 {
                                lower += v;
                            } else {
                                upper += v;
                            }
                        }
                        weights[j] = (-(tail + upper)).exp();
                        tail += lower + upper;
                    }
                }
                let mut entries: Vec<(u32, f64)> = Vec::new();
                for (j, w) in weights.iter().enumerate() {
                    let (x, y) = point(j);
                    if let Some(p) = grid.pixel_at(x, y) {
                        match entries.last_mut() {
                            Some((q, acc)) if *q as usize == p => *acc += h * w,
                            _ => entries.push((p as u32, h * w)),
                        }
                    }
                }
                entries
            })
            .collect();
        let mut row_ptr = Vec::with_capacity(rows.len() + 1);
        row_ptr.push(0);
        let nnz = rows.iter().map(Vec::len).sum();
        let mut cols = Vec::with_capacity(nnz);
        let mut vals = Vec::with_capacity(nnz);
        for entries in rows {
            for (c, v) in entries {
                cols.push(c);
                vals.push(v);
            }
            row_ptr.push(cols.len());
        }
        Ok(Self {
            geometry: geometry.clone(),
            row_ptr,
            cols,
            vals,
        })
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.row_ptr[i]..self.row_ptr[i + 1];
        self.cols[span.clone()]
            .iter()
            .zip(&self.vals[span])
            .map(|(&c, &v)| (c as usize, v))
    }

    /// `A x` for a flat image.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.geometry.side().pow(2), "image length");
        (0..self.row_ptr.len() - 1)
            .map(|i| self.row(i).map(|(c, v)| v * x[c]).sum())
            .collect()
    }

    /// `Aᵀ g` for a flat sinogram.
    pub fn apply_transpose(&self, g: &[f64]) -> Vec<f64> {
        assert_eq!(g.len(), self.geometry.sinogram_len(), "sinogram length");
        let mut out = vec![0.0; self.geometry.side().pow(2)];
        for (i, gi) in g.iter().enumerate() {
            if *gi != 0.0 {
                for (c, v) in self.row(i) {
                    out[c] += v * gi;
                }
            }
        }
        out
    }

    pub fn project(&self, emission: &EmissionMap) -> Result<Sinogram> {
        self.geometry.check_image(emission.image(), "emission")?;
        Sinogram::new(
            self.geometry.n_angles(),
            self.geometry.n_bins(),
            self.apply(emission.image().data()),
        )
    }

    pub fn back_project(&self, sinogram: &Sinogram) -> Result<Image> {
        sinogram.check(&self.geometry)?;
        Image::new(
            self.geometry.side(),
            self.geometry.pixel_spacing(),
            self.apply_transpose(sinogram.data()),
        )
    }

    /// `Aᵀ 1`.
    pub fn sensitivity(&self) -> Vec<f64> {
        self.apply_transpose(&vec![1.0; self.geometry.sinogram_len()])
    }
}

pub fn forward_project(
    emission: &EmissionMap,
    mu: Option<&MuMap>,
    geometry: &Geometry,
) -> Result<Sinogram> {
    Projector::new(geometry, mu)?.project(emission)
}

pub fn back_project(sinogram: &Sinogram, mu: Option<&MuMap>, geometry: &Geometry) -> Result<Image> {
    Projector::new(geometry, mu)?.back_project(sinogram)
}

/// Poisson log-likelihood `Σ g ln(Ax) − Ax`, dropping the constant `ln g!`.
pub fn poisson_log_likelihood(g: &[f64], expected: &[f64]) -> f64 {
    g.iter()
        .zip(expected)
        .map(|(&g, &e)| match (g > 0.0, e > 0.0) {
            (true, true) => g * e.ln() - e,
            (true, false) => f64::NEG_INFINITY,
            _ => -e,
        })
        .sum()
}

#[derive(Clone, Debug, PartialEq)]
pub enum MlemInit {
    /// Constant image matching the total counts of the data.
    Uniform,
    Image(Image),
}

#[derive(Clone, Debug)]
pub struct MlemTrace {
    pub image: Image,
    /// Likelihood of the initial estimate followed by one entry per iteration.
    pub log_likelihood: Vec<f64>,
}

pub fn mlem(
    sinogram: &Sinogram,
    geometry: &Geometry,
    mu: Option<&MuMap>,
    iters: usize,
    init: MlemInit,
) -> Result<Image> {
    let projector = Projector::new(geometry, mu)?;
    mlem_with(&projector, sinogram, iters, init).map(|t| t.image)
}

/// MLEM against a prebuilt projector, recording the likelihood of every iterate.
pub fn mlem_with(
    projector: &Projector,
    sinogram: &Sinogram,
    iters: usize,
    init: MlemInit,
) -> Result<MlemTrace> {
    let geometry = projector.geometry();
    sinogram.check(geometry)?;
    if iters == 0 {
        return Err(PadmError::InvalidConfig("MLEM needs at least one iteration".into()));
    }
    let g = sinogram.data();
    let sens = projector.sensitivity();
    let mask: Vec<bool> = sens.iter().map(|&s| s >= SENSITIVITY_FLOOR).collect();
    let mut x = match init {
        MlemInit::Uniform => {
            let total_sens: f64 = sens.iter().sum();
            let total: f64 = g.iter().sum();
            let level = if total > 0.0 && total_sens > 0.0 {
                total / total_sens
            } else {
                1.0
            };
            vec![level; sens.len()]
        }
        MlemInit::Image(img) => {
            geometry.check_image(&img, "MLEM init")?;
            if img.data().iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return Err(PadmError::InvalidConfig(
                    "MLEM init must be finite and non-negative".into(),
                ));
            }
            img.into_data()
        }
    };
    for (v, &keep) in x.iter_mut().zip(&mask) {
        if !keep {
            *v = 0.0;
        }
    }
    let mut expected = projector.apply(&x);
    let mut history = vec![poisson_log_likelihood(g, &expected)];
    for iter in 1..=iters {
        let ratio: Vec<f64> = g
            .iter()
            .zip(&expected)
            .map(|(&g, &e)| if e > 0.0 { g / e } else { 0.0 })
            .collect();
        let back = projector.apply_transpose(&ratio);
        for ((v, &b), (&s, &keep)) in x.iter_mut().zip(&back).zip(sens.iter().zip(&mask)) {
            *v = if keep { *v * b / s } else { 0.0 };
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(PadmError::Divergence(iter));
        }
        expected = projector.apply(&x);
        history.push(poisson_log_likelihood(g, &expected));
    }
    Ok(MlemTrace {
        image: Image::new(geometry.side(), geometry.pixel_spacing(), x)?,
        log_likelihood: history,
    })
}

/// Pixels hit by the samples `(j + ½)·h` along the ray leaving pixel `p`
/// toward the detector at angle `m`, up to the grid edge.
fn march<'a>(
    mu: &'a Image,
    geometry: &Geometry,
    m: usize,
    p: usize,
) -> impl Iterator<Item = usize> + 'a {
    let (row, col) = (p / mu.side(), p % mu.side());
    let (cx, cy) = mu.center_of(row, col);
    let (dx, dy) = geometry.direction(m);
    let h = geometry.step();
    (0..)
        .map(move |j| {
            let l = (j as f64 + 0.5) * h;
            mu.pixel_at(cx + l * dx, cy + l * dy)
        })
        .take_while(Option::is_some)
        .flatten()
}

/// Length of the ray from each pixel toward the detector that lies inside
/// `{μ > 0}`; for convex supports this is the distance to the boundary.
#[derive(Clone, Debug, PartialEq)]
pub struct PathLengthField {
    pub angle: f64,
    pub lengths: Image,
}

pub fn path_lengths(mu: &MuMap, geometry: &Geometry, angle_index: usize) -> Result<PathLengthField> {
    if angle_index >= geometry.n_angles() {
        return Err(PadmError::AngleOutOfRange {
            index: angle_index,
            count: geometry.n_angles(),
        });
    }
    let img = mu.image();
    geometry.check_image(img, "μ-map")?;
    let h = geometry.step();
    let data = (0..img.data().len())
        .map(|p| {
            if img.data()[p] > 0.0 {
                let inside = march(img, geometry, angle_index, p)
                    .filter(|&q| img.data()[q] > 0.0)
                    .count();
                inside as f64 * h
            } else {
                0.0
            }
        })
        .collect();
    Ok(PathLengthField {
        angle: geometry.angles()[angle_index],
        lengths: Image::new(img.side(), img.spacing(), data)?,
    })
}

pub fn all_path_lengths(mu: &MuMap, geometry: &Geometry) -> Result<Vec<PathLengthField>> {
    (0..geometry.n_angles())
        .map(|m| path_lengths(mu, geometry, m))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AcfMode {
    /// `μ(p)·s_φ(p)`: the uniform-attenuation approximation.
    MuTimesS,
    /// `∫ μ dl` along the ray from `p` to the grid edge.
    LineIntegral,
}

/// `ACF(p) = (1/N Σ_m exp(−a_m(p)))⁻¹` from per-angle attenuation exponents.
pub fn acf_from_exponents(exponents: &[Vec<f64>]) -> Vec<f64> {
    let n = exponents.len() as f64;
    let len = exponents.first().map_or(0, Vec::len);
    (0..len)
        .map(|p| {
            let mean = exponents.iter().map(|a| (-a[p]).exp()).sum::<f64>() / n;
            1.0 / mean
        })
        .collect()
}

pub fn acf_reference(mu: &MuMap, geometry: &Geometry, mode: AcfMode) -> Result<Image> {
    let img = mu.image();
    geometry.check_image(img, "μ-map")?;
    let h = geometry.step();
    let exponents: Vec<Vec<f64>> = match mode {
        AcfMode::MuTimesS => all_path_lengths(mu, geometry)?
            .into_iter()
            .map(|f| {
                f.lengths
                    .data()
                    .iter()
                    .zip(img.data())
                    .map(|(s, m)| m * s)
                    .collect()
            })
            .collect(),
        AcfMode::LineIntegral => (0..geometry.n_angles())
            .map(|m| {
                (0..img.data().len())
                    .map(|p| march(img, geometry, m, p).map(|q| img.data()[q]).sum::<f64>() * h)
                    .collect()
            })
            .collect(),
    };
    Image::new(img.side(), img.spacing(), acf_from_exponents(&exponents))
}

/// Poisson count model: counts per unit of expected projection value.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    pub counts_scale: f64,
}

impl NoiseModel {
    pub fn apply<R: Rng + ?Sized>(&self, sinogram: &Sinogram, rng: &mut R) -> Result<Sinogram> {
        if !(self.counts_scale > 0.0) {
            return Err(PadmError::InvalidConfig("counts scale must be positive".into()));
        }
        let data = sinogram
            .data()
            .iter()
            .map(|&v| {
                let lambda = v * self.counts_scale;
                if lambda > 0.0 {
                    let draw: f64 = Poisson::new(lambda).expect("positive rate").sample(rng);
                    draw / self.counts_scale
                } else {
                    0.0
                }
            })
            .collect();
        Sinogram::new(sinogram.n_angles(), sinogram.n_bins(), data)
    }
}

/// Simulates attenuated data and reconstructs it without (NAC) and with (AC)
/// attenuation modelling.
pub fn make_nac_ac_pair<R: Rng + ?Sized>(
    emission: &EmissionMap,
    mu: &MuMap,
    geometry: &Geometry,
    iters: usize,
    noise: Option<(NoiseModel, &mut R)>,
) -> Result<(Image, Image)> {
    emission.image().check_same_grid(mu.image(), "emission vs attenuation")?;
    let attenuated = Projector::new(geometry, Some(mu))?;
    let mut data = attenuated.project(emission)?;
    if let Some((model, rng)) = noise {
        data = model.apply(&data, rng)?;
    }
    let plain = Projector::new(geometry, None)?;
    let nac = mlem_with(&plain, &data, iters, MlemInit::Uniform)?.image;
    let ac = mlem_with(&attenuated, &data, iters, MlemInit::Uniform)?.image;
    Ok((nac, ac))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mu_map(side: usize, f: impl Fn(f64, f64) -> f64) -> MuMap {
        let mut img = Image::zeros(side, 1.0);
        for r in 0..side {
            for c in 0..side {
                let (x, y) = img.center_of(r, c);
                img.set(r, c, f(x, y));
            }
        }
        MuMap::new(img).unwrap()
    }

    #[test]
    fn geometry_validation() {
        assert!(Geometry::new(vec![], 4, 1.0, 4, 1.0).is_err());
        assert!(Geometry::new(vec![0.5, 0.1], 4, 1.0, 4, 1.0).is_err());
        assert!(Geometry::new(vec![PI], 4, 1.0, 4, 1.0).is_err());
        assert!(Geometry::new(vec![0.0], 3, 1.0, 4, 1.0).is_err());
        assert!(Geometry::parallel(8, 4, 1.0).is_ok());
    }

    #[test]
    fn empty_support_has_zero_path_lengths() {
        let geo = Geometry::parallel(4, 6, 1.0).unwrap();
        let mu = mu_map(6, |_, _| 0.0);
        for m in 0..4 {
            assert!(path_lengths(&mu, &geo, m).unwrap().lengths.data().iter().all(|&s| s == 0.0));
        }
        assert!(matches!(
            path_lengths(&mu, &geo, 4),
            Err(PadmError::AngleOutOfRange { index: 4, count: 4 })
        ));
    }

    #[test]
    fn axis_aligned_path_length_is_exact() {
        // 7 pixels of support above the centre row of a 9-grid: centre at row 4,
        // support rows 1..=7, so the exit lies 3.5 pixels above the centre.
        let geo = Geometry::parallel(2, 9, 1.0).unwrap();
        let mu = mu_map(9, |_, y| if y.abs() < 3.6 { 0.1 } else { 0.0 });
        let s = path_lengths(&mu, &geo, 0).unwrap().lengths;
        assert_eq!(s.get(4, 4), 3.5);
        assert_eq!(s.get(0, 4), 0.0);
    }

    #[test]
    fn mlem_rejects_zero_iterations() {
        let geo = Geometry::parallel(2, 4, 1.0).unwrap();
        let sino = Sinogram::new(2, 4, vec![1.0; 8]).unwrap();
        assert!(mlem(&sino, &geo, None, 0, MlemInit::Uniform).is_err());
    }

    #[test]
    fn likelihood_handles_zero_expectation() {
        assert_eq!(poisson_log_likelihood(&[0.0], &[0.0]), 0.0);
        assert_eq!(poisson_log_likelihood(&[1.0], &[0.0]), f64::NEG_INFINITY);
        assert!((poisson_log_likelihood(&[2.0], &[1.0]) + 1.0).abs() < 1e-15);
    }
}
