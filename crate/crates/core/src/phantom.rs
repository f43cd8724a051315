//! Synthetic cardiac phantoms built from ellipse and annulus primitives.
//!
//! A phantom is an elliptical torso of soft tissue with optional lungs and a
//! vertebral disk, plus an annular myocardium carrying most of the tracer.
//! Maps are rasterised with 4×4 supersampling per pixel.

use std::f64::consts::TAU;
use std::path::Path;

use gradkit::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, PadmError, Result};
use crate::harness::manifest::{Manifest, ManifestItem, Normalization, Split, MANIFEST_FILE};
use crate::harness::tensorfile::write_tensor;
use crate::image::{EmissionMap, Image, MuMap};
use crate::projector::{make_nac_ac_pair, Geometry, NoiseModel};

const SUPERSAMPLE: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ellipse {
    pub center: (f64, f64),
    pub semi_axes: (f64, f64),
}

impl Ellipse {
    pub fn circle(center: (f64, f64), radius: f64) -> Self {
        Self {
            center,
            semi_axes: (radius, radius),
        }
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        let u = (x - self.center.0) / self.semi_axes.0;
        let v = (y - self.center.1) / self.semi_axes.1;
        u * u + v * v <= 1.0
    }

    fn extent(&self) -> f64 {
        (self.center.0.abs() + self.semi_axes.0).max(self.center.1.abs() + self.semi_axes.1)
    }

    fn validate(&self, what: &str) -> Result<()> {
        let (a, b) = self.semi_axes;
        if !(a > 0.0 && b > 0.0) {
            return Err(PadmError::InvalidPhantom(format!(
                "{what} semi-axes must be positive, got ({a}, {b})"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Annulus {
    pub center: (f64, f64),
    pub inner_radius: f64,
    pub outer_radius: f64,
    pub activity: f64,
}

/// Angular sector of reduced uptake, measured counter-clockwise from +x.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Defect {
    pub start_deg: f64,
    pub extent_deg: f64,
    pub multiplier: f64,
}

impl Defect {
    fn covers(&self, angle_deg: f64) -> bool {
        (angle_deg - self.start_deg).rem_euclid(360.0) < self.extent_deg
    }
}

/// Linear attenuation coefficients in cm⁻¹.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TissueMu {
    pub soft_tissue: f64,
    pub lung: f64,
    pub bone: f64,
}

impl Default for TissueMu {
    fn default() -> Self {
        Self {
            soft_tissue: 0.15,
            lung: 0.04,
            bone: 0.25,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub grid_size: usize,
    pub pixel_spacing: f64,
    pub torso: Ellipse,
    pub lungs: Vec<Ellipse>,
    pub spine: Option<Ellipse>,
    pub myocardium: Annulus,
    pub defect: Option<Defect>,
    pub background_activity: f64,
    pub lung_activity: f64,
    /// Peak relative amplitude of a random first-harmonic variation of
    /// myocardial uptake, drawn from the jitter generator.
    pub uptake_variation: f64,
    pub mu_values: TissueMu,
    pub seed: u64,
}

impl PhantomSpec {
    /// A centred circular torso with a centred ring and nothing else.
    pub fn centered(grid_size: usize, pixel_spacing: f64) -> Self {
        let half = grid_size as f64 * pixel_spacing / 2.0;
        Self {
            grid_size,
            pixel_spacing,
            torso: Ellipse::circle((0.0, 0.0), 0.8 * half),
            lungs: Vec::new(),
            spine: None,
            myocardium: Annulus {
                center: (0.0, 0.0),
                inner_radius: 0.15 * half,
                outer_radius: 0.3 * half,
                activity: 1.0,
            },
            defect: None,
            background_activity: 0.1,
            lung_activity: 0.03,
            uptake_variation: 0.0,
            mu_values: TissueMu::default(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(PadmError::InvalidPhantom(m));
        if self.grid_size == 0 {
            return bad("grid_size must be positive".into());
        }
        if !(self.pixel_spacing > 0.0) {
            return bad("pixel_spacing must be positive".into());
        }
        self.torso.validate("torso")?;
        for lung in &self.lungs {
            lung.validate("lung")?;
        }
        if let Some(spine) = &self.spine {
            spine.validate("spine")?;
        }
        let m = &self.myocardium;
        if !(m.inner_radius >= 0.0 && m.inner_radius < m.outer_radius) {
            return bad(format!(
                "myocardium needs 0 ≤ inner < outer radius, got {} and {}",
                m.inner_radius, m.outer_radius
            ));
        }
        let mu = &self.mu_values;
        if [mu.soft_tissue, mu.lung, mu.bone]
            .iter()
            .any(|v| !(v.is_finite() && *v >= 0.0))
        {
            return bad("mu_values must be finite and non-negative".into());
        }
        if [m.activity, self.background_activity, self.lung_activity]
            .iter()
            .any(|v| !(v.is_finite() && *v >= 0.0))
        {
            return bad("activity levels must be finite and non-negative".into());
        }
        if !(0.0..1.0).contains(&self.uptake_variation) {
            return bad("uptake_variation must lie in [0, 1)".into());
        }
        if let Some(d) = &self.defect {
            if !(0.0..=1.0).contains(&d.multiplier) || !(d.extent_deg >= 0.0) {
                return bad("defect multiplier must lie in [0, 1] with extent ≥ 0".into());
            }
        }
        let half = self.grid_size as f64 * self.pixel_spacing / 2.0;
        let ring = Ellipse::circle(m.center, m.outer_radius);
        let shapes = std::iter::once(("torso", &self.torso))
            .chain(self.lungs.iter().map(|l| ("lung", l)))
            .chain(self.spine.iter().map(|s| ("spine", s)))
            .chain(std::iter::once(("myocardium", &ring)));
        for (what, e) in shapes {
            if e.extent() > half + 1e-9 {
                return bad(format!(
                    "{what} reaches {:.3} cm but the grid half-width is {half:.3} cm",
                    e.extent()
                ));
            }
        }
        Ok(())
    }

    /// [`make_phantom`] with a generator seeded from `self.seed`.
    pub fn render(&self) -> Result<(EmissionMap, MuMap)> {
        make_phantom(self, &mut ChaCha8Rng::seed_from_u64(self.seed))
    }
}

/// Rasterises a phantom. The generator drives the uptake variation only.
pub fn make_phantom<R: Rng + ?Sized>(spec: &PhantomSpec, jitter_rng: &mut R) -> Result<(EmissionMap, MuMap)> {
    spec.validate()?;
    let amplitude = spec.uptake_variation * jitter_rng.random::<f64>();
    let phase = TAU * jitter_rng.random::<f64>();
    let n = spec.grid_size;
    let mut emission = Image::zeros(n, spec.pixel_spacing);
    let mut mu = Image::zeros(n, spec.pixel_spacing);
    let sub = spec.pixel_spacing / SUPERSAMPLE as f64;
    let weight = 1.0 / (SUPERSAMPLE * SUPERSAMPLE) as f64;
    for r in 0..n {
        for c in 0..n {
            let (px, py) = emission.center_of(r, c);
            // Class counts keep the result independent of sub-sample order.
            let mut tally = Tally::default();
            for si in 0..SUPERSAMPLE {
                for sj in 0..SUPERSAMPLE {
                    let x = px + (sj as f64 + 0.5) * sub - spec.pixel_spacing / 2.0;
                    let y = py - (si as f64 + 0.5) * sub + spec.pixel_spacing / 2.0;
                    tally.add(sample_point(spec, amplitude, phase, x, y));
                }
            }
            let tissue = &spec.mu_values;
            let a = tally.background as f64 * spec.background_activity
                + tally.lung_activity as f64 * spec.lung_activity
                + tally.myocardium;
            let u = tally.soft as f64 * tissue.soft_tissue
                + tally.lung as f64 * tissue.lung
                + tally.bone as f64 * tissue.bone;
            emission.set(r, c, a * weight);
            mu.set(r, c, u * weight);
        }
    }
    Ok((EmissionMap::new(emission)?, MuMap::new(mu)?))
}

#[derive(Clone, Copy)]
enum Uptake {
    None,
    Background,
    Lung,
    Myocardium(f64),
}

#[derive(Clone, Copy)]
enum Tissue {
    Air,
    Soft,
    Lung,
    Bone,
}

#[derive(Default)]
struct Tally {
    background: u32,
    lung_activity: u32,
    myocardium: f64,
    soft: u32,
    lung: u32,
    bone: u32,
}

impl Tally {
    fn add(&mut self, (uptake, tissue): (Uptake, Tissue)) {
        match uptake {
            Uptake::None => {}
            Uptake::Background => self.background += 1,
            Uptake::Lung => self.lung_activity += 1,
            Uptake::Myocardium(v) => self.myocardium += v,
        }
        match tissue {
            Tissue::Air => {}
            Tissue::Soft => self.soft += 1,
            Tissue::Lung => self.lung += 1,
            Tissue::Bone => self.bone += 1,
        }
    }
}

fn sample_point(spec: &PhantomSpec, amplitude: f64, phase: f64, x: f64, y: f64) -> (Uptake, Tissue) {
    if !spec.torso.contains(x, y) {
        return (Uptake::None, Tissue::Air);
    }
    let (mut uptake, mut tissue) = (Uptake::Background, Tissue::Soft);
    if spec.lungs.iter().any(|l| l.contains(x, y)) {
        uptake = Uptake::Lung;
        tissue = Tissue::Lung;
    }
    if spec.spine.is_some_and(|s| s.contains(x, y)) {
        tissue = Tissue::Bone;
    }
    let m = &spec.myocardium;
    let (dx, dy) = (x - m.center.0, y - m.center.1);
    let radius = (dx * dx + dy * dy).sqrt();
    if radius >= m.inner_radius && radius <= m.outer_radius {
        let theta = dy.atan2(dx);
        let mut level = m.activity;
        if amplitude > 0.0 {
            level *= 1.0 + amplitude * (theta - phase).cos();
        }
        if let Some(defect) = &spec.defect {
            if defect.covers(theta.to_degrees()) {
                level *= defect.multiplier;
            }
        }
        uptake = Uptake::Myocardium(level);
        tissue = Tissue::Soft;
    }
    (uptake, tissue)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub const fn fixed(v: f64) -> Self {
        Self { lo: v, hi: v }
    }

    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let u: f64 = rng.random();
        self.lo + u * (self.hi - self.lo)
    }
}

/// Per-field intervals from which dataset phantoms are drawn uniformly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpecRanges {
    pub grid_size: usize,
    pub pixel_spacing: f64,
    pub torso_semi_x: Interval,
    pub torso_semi_y: Interval,
    pub torso_shift: Interval,
    pub with_lungs: bool,
    pub lung_offset_x: Interval,
    pub lung_semi_x: Interval,
    pub lung_semi_y: Interval,
    pub with_spine: bool,
    pub spine_radius: Interval,
    pub myo_center_x: Interval,
    pub myo_center_y: Interval,
    pub myo_inner_radius: Interval,
    pub myo_thickness: Interval,
    pub myo_activity: Interval,
    pub defect_probability: f64,
    pub defect_start_deg: Interval,
    pub defect_extent_deg: Interval,
    pub defect_multiplier: Interval,
    pub background_activity: Interval,
    pub lung_activity: Interval,
    pub uptake_variation: f64,
    pub mu_values: TissueMu,
}

impl Default for SpecRanges {
    fn default() -> Self {
        Self::desk(32, 0.8)
    }
}

impl SpecRanges {
    /// Ranges scaled to a `grid_size`-pixel field of view; the reference
    /// anatomy assumes a 25.6 cm field.
    pub fn desk(grid_size: usize, pixel_spacing: f64) -> Self {
        let k = grid_size as f64 * pixel_spacing / 25.6;
        let iv = |lo: f64, hi: f64| Interval::new(lo * k, hi * k);
        Self {
            grid_size,
            pixel_spacing,
            torso_semi_x: iv(9.5, 11.5),
            torso_semi_y: iv(7.0, 8.5),
            torso_shift: iv(-0.4, 0.4),
            with_lungs: true,
            lung_offset_x: iv(5.5, 6.0),
            lung_semi_x: iv(1.8, 2.4),
            lung_semi_y: iv(3.2, 4.0),
            with_spine: true,
            spine_radius: iv(1.0, 1.3),
            myo_center_x: iv(-1.0, 0.5),
            myo_center_y: iv(-0.5, 1.0),
            myo_inner_radius: iv(1.6, 2.4),
            myo_thickness: iv(1.2, 2.0),
            myo_activity: Interval::new(0.8, 1.2),
            defect_probability: 0.5,
            defect_start_deg: Interval::new(0.0, 360.0),
            defect_extent_deg: Interval::new(30.0, 90.0),
            defect_multiplier: Interval::new(0.2, 0.7),
            background_activity: Interval::new(0.05, 0.2),
            lung_activity: Interval::new(0.01, 0.04),
            uptake_variation: 0.1,
            mu_values: TissueMu::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("torso_semi_x", self.torso_semi_x),
            ("torso_semi_y", self.torso_semi_y),
            ("torso_shift", self.torso_shift),
            ("lung_offset_x", self.lung_offset_x),
            ("lung_semi_x", self.lung_semi_x),
            ("lung_semi_y", self.lung_semi_y),
            ("spine_radius", self.spine_radius),
            ("myo_center_x", self.myo_center_x),
            ("myo_center_y", self.myo_center_y),
            ("myo_inner_radius", self.myo_inner_radius),
            ("myo_thickness", self.myo_thickness),
            ("myo_activity", self.myo_activity),
            ("defect_start_deg", self.defect_start_deg),
            ("defect_extent_deg", self.defect_extent_deg),
            ("defect_multiplier", self.defect_multiplier),
            ("background_activity", self.background_activity),
            ("lung_activity", self.lung_activity),
        ];
        for (field, iv) in fields {
            if !(iv.lo <= iv.hi) {
                return Err(PadmError::InvalidInterval {
                    field: field.into(),
                    lo: iv.lo,
                    hi: iv.hi,
                });
            }
        }
        if !(0.0..=1.0).contains(&self.defect_probability) {
            return Err(PadmError::InvalidPhantom(
                "defect_probability must lie in [0, 1]".into(),
            ));
        }
        Ok(())
    }

    /// Draws one phantom description. Every field is drawn whether or not it
    /// is used so the stream stays aligned across configurations.
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> PhantomSpec {
        let shift = (self.torso_shift.draw(rng), self.torso_shift.draw(rng));
        let torso = Ellipse {
            center: shift,
            semi_axes: (self.torso_semi_x.draw(rng), self.torso_semi_y.draw(rng)),
        };
        let lung_x = self.lung_offset_x.draw(rng);
        let lung_axes = (self.lung_semi_x.draw(rng), self.lung_semi_y.draw(rng));
        let lungs = if self.with_lungs {
            [-1.0, 1.0]
                .iter()
                .map(|side| Ellipse {
                    center: (shift.0 + side * lung_x, shift.1 + 0.1 * torso.semi_axes.1),
                    semi_axes: lung_axes,
                })
                .collect()
        } else {
            Vec::new()
        };
        let spine_r = self.spine_radius.draw(rng);
        let spine = self.with_spine.then(|| {
            Ellipse::circle(
                (shift.0, shift.1 - torso.semi_axes.1 + spine_r + 0.6),
                spine_r,
            )
        });
        let inner = self.myo_inner_radius.draw(rng);
        let myocardium = Annulus {
            center: (
                shift.0 + self.myo_center_x.draw(rng),
                shift.1 + self.myo_center_y.draw(rng),
            ),
            inner_radius: inner,
            outer_radius: inner + self.myo_thickness.draw(rng),
            activity: self.myo_activity.draw(rng),
        };
        let has_defect = rng.random::<f64>() < self.defect_probability;
        let defect = Defect {
            start_deg: self.defect_start_deg.draw(rng),
            extent_deg: self.defect_extent_deg.draw(rng),
            multiplier: self.defect_multiplier.draw(rng),
        };
        PhantomSpec {
            grid_size: self.grid_size,
            pixel_spacing: self.pixel_spacing,
            torso,
            lungs,
            spine,
            myocardium,
            defect: has_defect.then_some(defect),
            background_activity: self.background_activity.draw(rng),
            lung_activity: self.lung_activity.draw(rng),
            uptake_variation: self.uptake_variation,
            mu_values: self.mu_values,
            seed: rng.next_u64(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetOptions {
    pub n_angles: usize,
    pub mlem_iters: usize,
    pub noise: Option<NoiseModel>,
    pub orientation: String,
}

impl Default for DatasetOptions {
    fn default() -> Self {
        Self {
            n_angles: 16,
            mlem_iters: 30,
            noise: None,
            orientation: "SA".into(),
        }
    }
}

/// `floor(0.6·n)` train, `floor(0.2·n)` validation, the remainder test, in index order.
pub fn split_for(index: usize, count: usize) -> Split {
    let train = count * 6 / 10;
    let val = count * 2 / 10;
    if index < train {
        Split::Train
    } else if index < train + val {
        Split::Val
    } else {
        Split::Test
    }
}

/// Generator for item `index`: the dataset seed with the item index as stream.
pub fn item_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

struct Generated {
    item: ManifestItem,
    ac_max: f64,
    mu_max: f64,
}

/// Generates `count` phantoms with NAC/AC reconstructions into `out_dir` and
/// writes `manifest.json` there.
pub fn make_dataset(
    count: usize,
    ranges: &SpecRanges,
    seed: u64,
    out_dir: &Path,
    options: &DatasetOptions,
) -> Result<Manifest> {
    if count == 0 {
        return Err(PadmError::InvalidConfig("dataset count must be at least 1".into()));
    }
    ranges.validate()?;
    let geometry = Geometry::parallel(options.n_angles, ranges.grid_size, ranges.pixel_spacing)?;
    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let generated: Vec<Generated> = (0..count)
        .into_par_iter()
        .map(|i| generate_item(i, count, ranges, seed, out_dir, options, &geometry))
        .collect::<Result<_>>()?;
    let normalization = Normalization {
        ac_max: generated.iter().map(|g| g.ac_max).fold(0.0, f64::max),
        mu_max: generated.iter().map(|g| g.mu_max).fold(0.0, f64::max),
    };
    let manifest = Manifest {
        format_version: Manifest::FORMAT_VERSION,
        count,
        seed,
        grid_size: ranges.grid_size,
        pixel_spacing: ranges.pixel_spacing,
        n_angles: options.n_angles,
        mlem_iters: options.mlem_iters,
        noise: options.noise,
        orientation: options.orientation.clone(),
        split_rule: Manifest::SPLIT_RULE.into(),
        normalization,
        ranges: ranges.clone(),
        items: generated.into_iter().map(|g| g.item).collect(),
    };
    manifest.write(&out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

fn generate_item(
    index: usize,
    count: usize,
    ranges: &SpecRanges,
    seed: u64,
    out_dir: &Path,
    options: &DatasetOptions,
    geometry: &Geometry,
) -> Result<Generated> {
    let mut rng = item_rng(seed, index);
    let spec = ranges.draw(&mut rng);
    let (emission, mu) = spec.render()?;
    let noise = options.noise.map(|model| (model, &mut rng));
    let (nac, ac) = make_nac_ac_pair(&emission, &mu, geometry, options.mlem_iters, noise)?;
    let id = format!("p{index:05}");
    let name = |kind: &str| format!("{id}_{kind}.padt");
    let n = spec.grid_size;
    let save = |kind: &str, img: &Image| -> Result<String> {
        let file = name(kind);
        let t = Tensor::from_vec(vec![n, n], img.data().to_vec())?;
        write_tensor(&out_dir.join(&file), &t)?;
        Ok(file)
    };
    let item = ManifestItem {
        id: id.clone(),
        seed: spec.seed,
        split: split_for(index, count),
        has_defect: spec.defect.is_some(),
        emission: save("emission", emission.image())?,
        mu: Some(save("mu", mu.image())?),
        nac: save("nac", &nac)?,
        ac: save("ac", &ac)?,
    };
    Ok(Generated {
        item,
        ac_max: ac.max(),
        mu_max: mu.image().max(),
    })
}
