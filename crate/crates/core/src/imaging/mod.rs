//! Image and sinogram containers.
//!
//! Both types store `f32` samples in row-major order; sinograms are
//! view-major (one row per projection angle). Numerical kernels accumulate
//! in `f64` and round back on construction.

mod file;

pub use file::{load_array, load_array_with, save_array, AnyArray, NanPolicy, MAGIC};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// What the samples of an [`Image`] or [`Sinogram`] represent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Unit {
    /// Linear attenuation (or a dimensionless surrogate of it).
    #[default]
    Attenuation,
    /// Line integrals, `value × mm`.
    LineIntegral,
    /// Display units in `[0, 1]`.
    Normalized,
    Arbitrary,
}

fn check_finite(values: &[f32], what: &str) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::Validation(format!("{what}: non-finite value {} at element {i}", values[i]))),
        None => Ok(()),
    }
}

/// A 2D attenuation map on a square-pixel grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    pixel_size: f64,
    unit: Unit,
    values: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, pixel_size: f64, values: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::param(format!("image dimensions must be >= 1, got {width}x{height}")));
        }
        if !(pixel_size.is_finite() && pixel_size > 0.0) {
            return Err(Error::param(format!("pixel size must be positive, got {pixel_size}")));
        }
        if values.len() != width * height {
            return Err(Error::ShapeMismatch(format!(
                "{width}x{height} image needs {} values, got {}",
                width * height,
                values.len()
            )));
        }
        check_finite(&values, "image")?;
        Ok(Self { width, height, pixel_size, unit: Unit::Attenuation, values })
    }

    /// Builds an image from `f64` samples, rounding to `f32`.
    pub fn from_f64(width: usize, height: usize, pixel_size: f64, values: &[f64]) -> Result<Self> {
        Self::new(width, height, pixel_size, values.iter().map(|&v| v as f32).collect())
    }

    pub fn zeros(width: usize, height: usize, pixel_size: f64) -> Self {
        Self::filled(width, height, pixel_size, 0.0)
    }

    pub fn filled(width: usize, height: usize, pixel_size: f64, value: f32) -> Self {
        assert!(width > 0 && height > 0 && pixel_size > 0.0 && value.is_finite());
        Self { width, height, pixel_size, unit: Unit::Attenuation, values: vec![value; width * height] }
    }

    /// An image with the same grid as `self` and new values.
    pub fn with_values(&self, values: Vec<f32>) -> Result<Self> {
        let mut out = Self::new(self.width, self.height, self.pixel_size, values)?;
        out.unit = self.unit;
        Ok(out)
    }

    pub fn with_values_f64(&self, values: &[f64]) -> Result<Self> {
        self.with_values(values.iter().map(|&v| v as f32).collect())
    }

    pub fn with_unit(mut self, unit: Unit) -> Self {
        self.unit = unit;
        self
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn pixel_size(&self) -> f64 {
        self.pixel_size
    }

    pub fn unit(&self) -> Unit {
        self.unit
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.values.iter().map(|&v| f64::from(v)).collect()
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.values[row * self.width + col]
    }

    pub fn same_grid(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub(crate) fn require_same_grid(&self, other: &Image, what: &str) -> Result<()> {
        if self.same_grid(other) {
            Ok(())
        } else {
            Err(Error::ShapeMismatch(format!(
                "{what}: {}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )))
        }
    }

    /// Physical (x, y) of a pixel center in mm. The grid is centered on the
    /// isocenter; x grows with the column index, y decreases with the row.
    pub fn pixel_center(&self, row: usize, col: usize) -> (f64, f64) {
        pixel_center(self.width, self.height, self.pixel_size, row, col)
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.values.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    pub fn l2_norm(&self) -> f64 {
        self.values.iter().map(|&v| f64::from(v).powi(2)).sum::<f64>().sqrt()
    }

    pub fn clamp_min(&self, floor: f32) -> Image {
        let mut out = self.clone();
        out.values.iter_mut().for_each(|v| *v = v.max(floor));
        out
    }

    /// `clamp((v - lo) / (hi - lo), 0, 1)` with the unit set to normalized.
    pub fn normalize_window(&self, lo: f64, hi: f64) -> Result<Image> {
        normalize_window(self, lo, hi)
    }
}

pub(crate) fn pixel_center(width: usize, height: usize, pixel_size: f64, row: usize, col: usize) -> (f64, f64) {
    let x = (col as f64 - (width as f64 - 1.0) / 2.0) * pixel_size;
    let y = ((height as f64 - 1.0) / 2.0 - row as f64) * pixel_size;
    (x, y)
}

pub fn normalize_window(img: &Image, lo: f64, hi: f64) -> Result<Image> {
    if !(hi > lo) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::param(format!("display window needs hi > lo, got [{lo}, {hi}]")));
    }
    let span = hi - lo;
    let values = img.values.iter().map(|&v| ((f64::from(v) - lo) / span).clamp(0.0, 1.0) as f32).collect();
    Ok(img.with_values(values)?.with_unit(Unit::Normalized))
}

/// Fan-beam projection data indexed `(view, detector)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sinogram {
    n_views: usize,
    n_detectors: usize,
    view_angles: Vec<f64>,
    unit: Unit,
    values: Vec<f32>,
}

impl Sinogram {
    pub fn new(n_detectors: usize, view_angles: Vec<f64>, values: Vec<f32>) -> Result<Self> {
        let n_views = view_angles.len();
        if n_views == 0 || n_detectors == 0 {
            return Err(Error::param(format!("sinogram needs >= 1 view and detector, got {n_views}x{n_detectors}")));
        }
        if view_angles.iter().any(|a| !a.is_finite()) {
            return Err(Error::Validation("view angles must be finite".into()));
        }
        if view_angles.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Validation("view angles must be strictly increasing".into()));
        }
        if values.len() != n_views * n_detectors {
            return Err(Error::ShapeMismatch(format!(
                "{n_views}x{n_detectors} sinogram needs {} values, got {}",
                n_views * n_detectors,
                values.len()
            )));
        }
        check_finite(&values, "sinogram")?;
        Ok(Self { n_views, n_detectors, view_angles, unit: Unit::LineIntegral, values })
    }

    pub fn zeros(n_detectors: usize, view_angles: Vec<f64>) -> Result<Self> {
        let n = view_angles.len() * n_detectors;
        Self::new(n_detectors, view_angles, vec![0.0; n])
    }

    pub fn with_values(&self, values: Vec<f32>) -> Result<Self> {
        let mut out = Self::new(self.n_detectors, self.view_angles.clone(), values)?;
        out.unit = self.unit;
        Ok(out)
    }

    pub fn with_unit(mut self, unit: Unit) -> Self {
        self.unit = unit;
        self
    }

    pub fn n_views(&self) -> usize {
        self.n_views
    }

    pub fn n_detectors(&self) -> usize {
        self.n_detectors
    }

    pub fn view_angles(&self) -> &[f64] {
        &self.view_angles
    }

    pub fn unit(&self) -> Unit {
        self.unit
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn row(&self, view: usize) -> &[f32] {
        &self.values[view * self.n_detectors..(view + 1) * self.n_detectors]
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.values.iter().map(|&v| f64::from(v)).collect()
    }

    pub fn l2_norm(&self) -> f64 {
        self.values.iter().map(|&v| f64::from(v).powi(2)).sum::<f64>().sqrt()
    }
}
