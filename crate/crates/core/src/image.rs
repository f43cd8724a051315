//! Square 2-D grids with physical pixel spacing.
//!
//! Row `i` runs top to bottom, column `j` left to right. Pixel centres sit at
//! `x = (j - (n-1)/2)·Δ`, `y = ((n-1)/2 - i)·Δ` so the grid centre is the origin
//! and `y` points up.

use serde::{Deserialize, Serialize};

use crate::error::{PadmError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Image {
    side: usize,
    spacing: f64,
    data: Vec<f64>,
}

impl Image {
    pub fn new(side: usize, spacing: f64, data: Vec<f64>) -> Result<Self> {
        if data.len() != side * side {
            return Err(PadmError::Shape(format!(
                "{side}×{side} image needs {} values, got {}",
                side * side,
                data.len()
            )));
        }
        if !(spacing > 0.0 && spacing.is_finite()) {
            return Err(PadmError::Shape(format!("pixel spacing {spacing}")));
        }
        Ok(Self { side, spacing, data })
    }

    pub fn zeros(side: usize, spacing: f64) -> Self {
        Self::filled(side, spacing, 0.0)
    }

    pub fn filled(side: usize, spacing: f64, v: f64) -> Self {
        Self {
            side,
            spacing,
            data: vec![v; side * side],
        }
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.side + col]
    }

    pub fn set(&mut self, row: usize, col: usize, v: f64) {
        self.data[row * self.side + col] = v;
    }

    /// Physical coordinates (cm) of the centre of pixel `(row, col)`.
    pub fn center_of(&self, row: usize, col: usize) -> (f64, f64) {
        let c = (self.side as f64 - 1.0) / 2.0;
        ((col as f64 - c) * self.spacing, (c - row as f64) * self.spacing)
    }

    /// Pixel containing the physical point, if it lies on the grid.
    pub fn pixel_at(&self, x: f64, y: f64) -> Option<usize> {
        let half = self.side as f64 / 2.0;
        let col = (x / self.spacing + half).floor();
        let row = (half - y / self.spacing).floor();
        let n = self.side as f64;
        if col < 0.0 || row < 0.0 || col >= n || row >= n {
            return None;
        }
        Some(row as usize * self.side + col as usize)
    }

    /// Bilinear interpolation between pixel centres; zero outside the grid.
    pub fn bilinear(&self, x: f64, y: f64) -> f64 {
        let c = (self.side as f64 - 1.0) / 2.0;
        let u = x / self.spacing + c;
        let v = c - y / self.spacing;
        let (u0, v0) = (u.floor(), v.floor());
        let (fu, fv) = (u - u0, v - v0);
        let n = self.side as isize;
        let at = |r: isize, c: isize| {
            if r < 0 || c < 0 || r >= n || c >= n {
                0.0
            } else {
                self.data[r as usize * self.side + c as usize]
            }
        };
        let (r0, c0) = (v0 as isize, u0 as isize);
        (1.0 - fv) * ((1.0 - fu) * at(r0, c0) + fu * at(r0, c0 + 1))
            + fv * ((1.0 - fu) * at(r0 + 1, c0) + fu * at(r0 + 1, c0 + 1))
    }

    /// Rotates the grid by 90° counter-clockwise.
    pub fn rot90(&self) -> Self {
        let n = self.side;
        let mut out = Self::zeros(n, self.spacing);
        for r in 0..n {
            for c in 0..n {
                out.set(n - 1 - c, r, self.get(r, c));
            }
        }
        out
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Mean over pixels whose centre lies at radius `[r_lo, r_hi)` cm from `(cx, cy)`.
    pub fn ring_mean(&self, cx: f64, cy: f64, r_lo: f64, r_hi: f64) -> Option<f64> {
        let mut sum = 0.0;
        let mut n = 0usize;
        for r in 0..self.side {
            for c in 0..self.side {
                let (x, y) = self.center_of(r, c);
                let d = ((x - cx).powi(2) + (y - cy).powi(2)).sqrt();
                if d >= r_lo && d < r_hi {
                    sum += self.get(r, c);
                    n += 1;
                }
            }
        }
        (n > 0).then(|| sum / n as f64)
    }

    pub(crate) fn check_same_grid(&self, other: &Image, what: &str) -> Result<()> {
        if self.side != other.side || (self.spacing - other.spacing).abs() > 1e-12 {
            return Err(PadmError::Shape(format!(
                "{what}: {}×{} @ {} cm vs {}×{} @ {} cm",
                self.side, self.side, self.spacing, other.side, other.side, other.spacing
            )));
        }
        Ok(())
    }
}

macro_rules! nonneg_map {
    ($(#[$doc:meta])* $name:ident) => {
        $(#[$doc])*
        #[derive(Clone, Debug, PartialEq)]
        pub struct $name(Image);

        impl $name {
            /// Rejects negative or non-finite entries.
            pub fn new(image: Image) -> Result<Self> {
                if let Some(v) = image.data().iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
                    return Err(PadmError::InvalidPhantom(format!(
                        "{} entry {v} is negative or non-finite",
                        stringify!($name)
                    )));
                }
                Ok(Self(image))
            }

            pub fn image(&self) -> &Image {
                &self.0
            }

            pub fn into_image(self) -> Image {
                self.0
            }

            pub fn side(&self) -> usize {
                self.0.side()
            }

            pub fn spacing(&self) -> f64 {
                self.0.spacing()
            }
        }
    };
}

nonneg_map!(
    /// Tracer activity per pixel (arbitrary units, ≥ 0).
    EmissionMap
);
nonneg_map!(
    /// Linear attenuation coefficient per pixel in cm⁻¹ (≥ 0).
    MuMap
);

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pixel_lookup_inverts_centres() {
        for side in [4, 5] {
            let img = Image::zeros(side, 0.8);
            for r in 0..side {
                for c in 0..side {
                    let (x, y) = img.center_of(r, c);
                    assert_eq!(img.pixel_at(x, y), Some(r * side + c));
                }
            }
            assert_eq!(img.pixel_at(side as f64, 0.0), None);
        }
    }

    #[test]
    fn bilinear_hits_centres_and_midpoints() {
        let img = Image::new(2, 1.0, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (x, y) = img.center_of(1, 0);
        assert_eq!(img.bilinear(x, y), 3.0);
        assert_eq!(img.bilinear(0.0, 0.0), 2.5);
    }

    #[test]
    fn rot90_four_times_is_identity() {
        let img = Image::new(3, 1.0, (0..9).map(f64::from).collect()).unwrap();
        assert_eq!(img.rot90().rot90().rot90().rot90(), img);
        assert_eq!(img.rot90().get(0, 0), 2.0);
    }

    #[test]
    fn negative_maps_are_rejected() {
        let img = Image::new(1, 1.0, vec![-0.1]).unwrap();
        assert!(MuMap::new(img.clone()).is_err());
        assert!(EmissionMap::new(img).is_err());
    }
}
