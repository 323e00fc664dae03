//! Ellipse phantoms, sinogram simulation and sparse-view dataset cases.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{apply_view_mask, forward_project, FanBeamGeometry, ViewMask};
use crate::imaging::{load_array, save_array, Image, Sinogram};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ellipse {
    /// mm
    pub center: (f64, f64),
    /// mm, along the rotated x and y axes
    pub semi_axes: (f64, f64),
    /// radians, counter-clockwise
    pub rotation: f64,
    /// added to every pixel whose center lies inside
    pub intensity: f64,
}

impl Ellipse {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.rotation.sin_cos();
        let (dx, dy) = (x - self.center.0, y - self.center.1);
        let u = (dx * c + dy * s) / self.semi_axes.0;
        let v = (-dx * s + dy * c) / self.semi_axes.1;
        u * u + v * v <= 1.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    pub width: usize,
    pub height: usize,
    pub pixel_size: f64,
    /// Optional ceiling applied after summation; the floor is always 0.
    #[serde(default)]
    pub upper_clamp: Option<f32>,
    pub ellipses: Vec<Ellipse>,
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 || !(self.pixel_size > 0.0) {
            return Err(Error::param("phantom grid must be non-empty with positive pixel size"));
        }
        for e in &self.ellipses {
            let finite = [e.center.0, e.center.1, e.semi_axes.0, e.semi_axes.1, e.rotation, e.intensity]
                .iter()
                .all(|v| v.is_finite());
            if !finite || e.semi_axes.0 <= 0.0 || e.semi_axes.1 <= 0.0 {
                return Err(Error::param(format!("invalid ellipse {e:?}")));
            }
        }
        Ok(())
    }

    /// Half-width of the largest centered square field of view, mm.
    pub fn half_fov(&self) -> f64 {
        0.5 * self.pixel_size * self.width.min(self.height) as f64
    }
}

pub fn rasterize_phantom(spec: &PhantomSpec) -> Result<Image> {
    spec.validate()?;
    let (w, h) = (spec.width, spec.height);
    let mut values = vec![0.0f32; w * h];
    values.par_chunks_mut(w).enumerate().for_each(|(row, out)| {
        for (col, o) in out.iter_mut().enumerate() {
            let (x, y) = crate::imaging::pixel_center(w, h, spec.pixel_size, row, col);
            let sum: f64 = spec.ellipses.iter().filter(|e| e.contains(x, y)).map(|e| e.intensity).sum();
            let mut v = (sum as f32).max(0.0);
            if let Some(hi) = spec.upper_clamp {
                v = v.min(hi);
            }
            *o = v;
        }
    });
    Image::new(w, h, spec.pixel_size, values)
}

/// Modified (Toft) Shepp–Logan head phantom scaled to the grid.
pub fn shepp_logan(width: usize, height: usize, pixel_size: f64) -> PhantomSpec {
    // intensity, a, b, x0, y0, rotation (degrees), in units of the half FOV
    const TABLE: [[f64; 6]; 10] = [
        [1.0, 0.69, 0.92, 0.0, 0.0, 0.0],
        [-0.8, 0.6624, 0.874, 0.0, -0.0184, 0.0],
        [-0.2, 0.11, 0.31, 0.22, 0.0, -18.0],
        [-0.2, 0.16, 0.41, -0.22, 0.0, 18.0],
        [0.1, 0.21, 0.25, 0.0, 0.35, 0.0],
        [0.1, 0.046, 0.046, 0.0, 0.1, 0.0],
        [0.1, 0.046, 0.046, 0.0, -0.1, 0.0],
        [0.1, 0.046, 0.023, -0.08, -0.605, 0.0],
        [0.1, 0.023, 0.023, 0.0, -0.606, 0.0],
        [0.1, 0.023, 0.046, 0.06, -0.605, 0.0],
    ];
    let mut spec = PhantomSpec { width, height, pixel_size, upper_clamp: None, ellipses: Vec::new() };
    let s = spec.half_fov();
    spec.ellipses = TABLE
        .iter()
        .map(|&[i, a, b, x0, y0, deg]| Ellipse {
            center: (x0 * s, y0 * s),
            semi_axes: (a * s, b * s),
            rotation: deg.to_radians(),
            intensity: i,
        })
        .collect();
    spec
}

/// Random body-plus-inserts phantoms with values clamped to `[0, 1]`.
pub fn gen_random_phantom_corpus(
    n: usize,
    seed: u64,
    width: usize,
    height: usize,
    pixel_size: f64,
) -> Result<Vec<PhantomSpec>> {
    if n == 0 {
        return Err(Error::param("corpus size must be >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n).map(|_| random_phantom(&mut rng, width, height, pixel_size)).collect())
}

fn random_phantom(rng: &mut ChaCha8Rng, width: usize, height: usize, pixel_size: f64) -> PhantomSpec {
    let mut spec = PhantomSpec { width, height, pixel_size, upper_clamp: Some(1.0), ellipses: Vec::new() };
    let r = spec.half_fov();
    let body = Ellipse {
        center: (rng.gen_range(-0.05..0.05) * r, rng.gen_range(-0.05..0.05) * r),
        semi_axes: (rng.gen_range(0.6..0.85) * r, rng.gen_range(0.6..0.85) * r),
        rotation: rng.gen_range(0.0..PI),
        intensity: rng.gen_range(0.3..0.6),
    };
    let inner_limit = 0.55 * body.semi_axes.0.min(body.semi_axes.1);
    spec.ellipses.push(body.clone());
    for _ in 0..rng.gen_range(3..7) {
        let radius = rng.gen_range(0.0..1.0f64).sqrt() * inner_limit;
        let theta = rng.gen_range(0.0..2.0 * PI);
        spec.ellipses.push(Ellipse {
            center: (body.center.0 + radius * theta.cos(), body.center.1 + radius * theta.sin()),
            semi_axes: (rng.gen_range(0.06..0.3) * r, rng.gen_range(0.06..0.3) * r),
            rotation: rng.gen_range(0.0..PI),
            intensity: rng.gen_range(-0.3..0.4),
        });
    }
    spec
}

/// A slightly perturbed copy of `spec`: centers and axes move by up to
/// `jitter_mm`, intensities by up to `intensity_jitter`.
pub fn near_duplicate(spec: &PhantomSpec, jitter_mm: f64, intensity_jitter: f64, seed: u64) -> PhantomSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = spec.clone();
    for e in &mut out.ellipses {
        let mut j = || rng.gen_range(-1.0..=1.0) * jitter_mm;
        e.center.0 += j();
        e.center.1 += j();
        e.semi_axes.0 = (e.semi_axes.0 + j()).max(0.5 * e.semi_axes.0);
        e.semi_axes.1 = (e.semi_axes.1 + j()).max(0.5 * e.semi_axes.1);
        e.intensity += rng.gen_range(-1.0..=1.0) * intensity_jitter;
    }
    out
}

/// Post-log noise added to simulated projections.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum NoiseModel {
    #[default]
    None,
    Gaussian {
        sigma: f64,
    },
    /// Counts `Poisson(I0 · e^{-s·y})`, floored at `floor` before the log
    /// and divided by `s` after it. `s` converts image units to mm⁻¹.
    Poisson {
        incident: f64,
        #[serde(default = "default_floor")]
        floor: f64,
        #[serde(default = "default_scale")]
        scale: f64,
    },
}

fn default_floor() -> f64 {
    1.0
}

fn default_scale() -> f64 {
    1.0
}

impl NoiseModel {
    pub fn validate(&self) -> Result<()> {
        match *self {
            NoiseModel::None => Ok(()),
            NoiseModel::Gaussian { sigma } if sigma >= 0.0 && sigma.is_finite() => Ok(()),
            NoiseModel::Poisson { incident, floor, scale }
                if incident > 0.0 && incident.is_finite() && floor > 0.0 && scale > 0.0 && scale.is_finite() =>
            {
                Ok(())
            }
            other => Err(Error::param(format!("invalid noise model {other:?}"))),
        }
    }
}

/// Forward projection over all views of `geom` followed by noise.
pub fn simulate_sinogram(img: &Image, geom: &FanBeamGeometry, noise: &NoiseModel, seed: u64) -> Result<Sinogram> {
    noise.validate()?;
    let clean = forward_project(img, geom)?;
    match *noise {
        NoiseModel::None | NoiseModel::Gaussian { sigma: 0.0 } => Ok(clean),
        NoiseModel::Gaussian { sigma } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let normal = Normal::new(0.0, sigma).map_err(|e| Error::param(e.to_string()))?;
            let v = clean.values().iter().map(|&y| (f64::from(y) + normal.sample(&mut rng)) as f32).collect();
            clean.with_values(v)
        }
        NoiseModel::Poisson { incident, floor, scale } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut v = Vec::with_capacity(clean.values().len());
            let mut floored = 0usize;
            for &y in clean.values() {
                let lambda = incident * (-scale * f64::from(y)).exp();
                let counts = if lambda > 0.0 {
                    Poisson::new(lambda).map_err(|e| Error::Numerical(e.to_string()))?.sample(&mut rng)
                } else {
                    0.0
                };
                if counts < floor {
                    floored += 1;
                }
                v.push((-(counts.max(floor) / incident).ln() / scale) as f32);
            }
            if floored * 100 > v.len() {
                log::warn!("{floored} of {} rays hit the count floor; the Poisson scale may be too large", v.len());
            }
            clean.with_values(v)
        }
    }
}

/// How many views of the full scan to keep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Keep {
    /// `round(j · n_views / count)` for `j < count`.
    Count(usize),
    Stride(usize),
}

impl Keep {
    pub fn mask(&self, n_views: usize) -> Result<ViewMask> {
        match *self {
            Keep::Count(k) if k > n_views => Err(Error::param(format!("cannot keep {k} of {n_views} views"))),
            Keep::Count(k) => ViewMask::uniform(n_views, k),
            Keep::Stride(s) => ViewMask::stride(n_views, s),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub phantom: PathBuf,
    pub full_sinogram: PathBuf,
    pub sparse_sinogram: PathBuf,
    pub mask: PathBuf,
    pub geometry: FanBeamGeometry,
    pub noise: NoiseModel,
    pub split: String,
}

/// A loaded case with all arrays in memory.
#[derive(Debug, Clone)]
pub struct SparseCase {
    pub id: String,
    pub phantom: Image,
    pub full_sinogram: Sinogram,
    pub sparse_sinogram: Sinogram,
    pub mask: ViewMask,
    pub geometry: FanBeamGeometry,
}

impl ManifestEntry {
    pub fn load(&self, base: &Path) -> Result<SparseCase> {
        let mask_path = base.join(&self.mask);
        let mask_text = fs::read_to_string(&mask_path).map_err(|e| Error::io(&mask_path, e))?;
        let mask: ViewMask =
            serde_json::from_str(&mask_text).map_err(|e| Error::Header(format!("{}: {e}", mask_path.display())))?;
        mask.validate()?;
        Ok(SparseCase {
            id: self.id.clone(),
            phantom: load_array(base.join(&self.phantom))?.into_image()?,
            full_sinogram: load_array(base.join(&self.full_sinogram))?.into_sinogram()?,
            sparse_sinogram: load_array(base.join(&self.sparse_sinogram))?.into_sinogram()?,
            mask,
            geometry: self.geometry.clone(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: u32,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn new() -> Self {
        Self { version: 1, entries: Vec::new() }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: Self = serde_json::from_str(&text).map_err(|e| Error::Header(format!("{}: {e}", path.display())))?;
        if m.version != 1 {
            return Err(Error::Header(format!("unsupported manifest version {}", m.version)));
        }
        Ok(m)
    }

    /// Checks that every referenced file exists and loads.
    pub fn validate(&self, base: &Path) -> Result<()> {
        for e in &self.entries {
            e.load(base)?;
        }
        Ok(())
    }
}

/// Simulate a full scan of `img`, add noise, then keep a uniform or strided
/// subset of views. Arrays are written under `out_dir` with `id` as prefix;
/// paths in the returned entry are relative to `out_dir`.
#[allow(clippy::too_many_arguments)]
pub fn make_sparse_case(
    img: &Image,
    geom: &FanBeamGeometry,
    keep: Keep,
    noise: &NoiseModel,
    seed: u64,
    out_dir: &Path,
    id: &str,
    split: &str,
) -> Result<ManifestEntry> {
    let mask = keep.mask(geom.n_views())?;
    let full = simulate_sinogram(img, geom, noise, seed)?;
    let sparse = apply_view_mask(&full, &mask)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let entry = ManifestEntry {
        id: id.to_string(),
        phantom: format!("{id}_phantom.rspf").into(),
        full_sinogram: format!("{id}_full.rspf").into(),
        sparse_sinogram: format!("{id}_sparse.rspf").into(),
        mask: format!("{id}_mask.json").into(),
        geometry: geom.clone(),
        noise: *noise,
        split: split.to_string(),
    };
    save_array(img.clone(), out_dir.join(&entry.phantom))?;
    save_array(full, out_dir.join(&entry.full_sinogram))?;
    save_array(sparse, out_dir.join(&entry.sparse_sinogram))?;
    let mask_path = out_dir.join(&entry.mask);
    fs::write(&mask_path, serde_json::to_string(&mask).expect("mask serializes"))
        .map_err(|e| Error::io(&mask_path, e))?;
    Ok(entry)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::uniform_angles;

    #[test]
    fn empty_spec_is_zero() {
        let spec = PhantomSpec { width: 8, height: 6, pixel_size: 1.0, upper_clamp: None, ellipses: vec![] };
        assert!(rasterize_phantom(&spec).unwrap().values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn disk_area_matches() {
        let (n, ps, radius) = (128, 1.0, 40.0);
        let spec = PhantomSpec {
            width: n,
            height: n,
            pixel_size: ps,
            upper_clamp: None,
            ellipses: vec![Ellipse { center: (0.0, 0.0), semi_axes: (radius, radius), rotation: 0.0, intensity: 1.0 }],
        };
        let img = rasterize_phantom(&spec).unwrap();
        let count = img.values().iter().filter(|&&v| v == 1.0).count() as f64;
        let area = PI * radius * radius / (ps * ps);
        assert!((count - area).abs() / area < 0.02, "{count} vs {area}");
    }

    #[test]
    fn shepp_logan_hand_values() {
        // 256 px over a 2 mm-normalized FOV: half-FOV 1 unit = 128 px.
        let n = 256;
        let spec = shepp_logan(n, n, 1.0);
        let img = rasterize_phantom(&spec).unwrap();
        let at = |u: f64, v: f64| {
            let col = (u * 128.0 + 127.5).round() as usize;
            let row = (127.5 - v * 128.0).round() as usize;
            img.get(row, col)
        };
        // (0,0): outer skull 1.0 + brain -0.8.
        assert!((at(0.0, 0.0) - 0.2).abs() < 1e-6);
        // (0, 0.35): plus the 0.1 ellipse centered there.
        assert!((at(0.0, 0.35) - 0.3).abs() < 1e-6);
        // (0.22, 0): the right dark ellipse cancels brain intensity.
        assert!(at(0.22, 0.0).abs() < 1e-6);
        // (0, 0.9): skull rim only.
        assert!((at(0.0, 0.9) - 1.0).abs() < 1e-6);
        // (0.95, 0.95): outside everything.
        assert_eq!(at(0.95, 0.95), 0.0);
    }

    #[test]
    fn corpus_deterministic_distinct_bounded() {
        let a = gen_random_phantom_corpus(50, 11, 32, 32, 4.0).unwrap();
        let b = gen_random_phantom_corpus(50, 11, 32, 32, 4.0).unwrap();
        assert_eq!(a, b);
        for i in 0..a.len() {
            for j in i + 1..a.len() {
                assert_ne!(a[i], a[j]);
            }
        }
        for spec in &a {
            let img = rasterize_phantom(spec).unwrap();
            let (lo, hi) = img.min_max();
            assert!(lo >= 0.0 && hi <= 1.0);
        }
        assert!(gen_random_phantom_corpus(0, 1, 8, 8, 1.0).is_err());
    }

    #[test]
    fn noise_free_simulation_is_projection() {
        let geom = FanBeamGeometry::desk(16, 16, 2.0, 12).unwrap();
        let img = rasterize_phantom(&shepp_logan(16, 16, 2.0)).unwrap();
        let clean = forward_project(&img, &geom).unwrap();
        assert_eq!(simulate_sinogram(&img, &geom, &NoiseModel::None, 1).unwrap(), clean);
        assert_eq!(simulate_sinogram(&img, &geom, &NoiseModel::Gaussian { sigma: 0.0 }, 1).unwrap(), clean);
        assert!(NoiseModel::Poisson { incident: 0.0, floor: 1.0, scale: 1.0 }.validate().is_err());
        assert!(NoiseModel::Poisson { incident: 1e5, floor: 1.0, scale: 0.0 }.validate().is_err());
        assert!(NoiseModel::Gaussian { sigma: -1.0 }.validate().is_err());
    }

    #[test]
    fn poisson_scale_keeps_units() {
        // With scale s the post-log variance becomes e^{s·y} / (I0 s²).
        let geom = FanBeamGeometry::desk(8, 8, 2.0, 2).unwrap();
        let img = Image::filled(8, 8, 2.0, 1.0);
        let (i0, s) = (1e5, 0.02);
        let noise = NoiseModel::Poisson { incident: i0, floor: 1.0, scale: s };
        let bin = geom.n_detectors / 2;
        let samples: Vec<f64> =
            (0..200).map(|k| f64::from(simulate_sinogram(&img, &geom, &noise, k).unwrap().row(0)[bin])).collect();
        let y = f64::from(forward_project(&img, &geom).unwrap().row(0)[bin]);
        let mean = samples.iter().sum::<f64>() / 200.0;
        let var = samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 199.0;
        let expect = (s * y).exp() / (i0 * s * s);
        assert!((mean - y).abs() < 4.0 * (expect / 200.0).sqrt(), "{mean} vs {y}");
        assert!((var - expect).abs() / expect < 0.2, "{var} vs {expect}");
    }

    #[test]
    fn poisson_post_log_variance() {
        // Var(-ln(N / I0)) ≈ e^{y} / I0 for N ~ Poisson(I0 e^{-y}).
        let geom = FanBeamGeometry::desk(8, 8, 2.0, 2).unwrap();
        let img = Image::filled(8, 8, 2.0, 0.05);
        let noise = NoiseModel::Poisson { incident: 1e6, floor: 1.0, scale: 1.0 };
        let bin = geom.n_detectors / 2;
        let samples: Vec<f64> =
            (0..200).map(|s| f64::from(simulate_sinogram(&img, &geom, &noise, s).unwrap().row(0)[bin])).collect();
        let y = f64::from(forward_project(&img, &geom).unwrap().row(0)[bin]);
        let mean = samples.iter().sum::<f64>() / 200.0;
        let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / 199.0;
        let expect = y.exp() / 1e6;
        assert!(y > 0.5);
        assert!((var - expect).abs() / expect < 0.2, "{var} vs {expect}");
    }

    #[test]
    fn sparse_case_files_and_masks() {
        let dir = tempfile::tempdir().unwrap();
        let geom = FanBeamGeometry::covering(16, 16, 2.0, uniform_angles(40), 33, 550.0, 400.0).unwrap();
        let img = rasterize_phantom(&shepp_logan(16, 16, 2.0)).unwrap();
        let noise = NoiseModel::Gaussian { sigma: 0.01 };
        let entry = make_sparse_case(&img, &geom, Keep::Count(10), &noise, 5, dir.path(), "c0", "test").unwrap();
        let mut manifest = DatasetManifest::new();
        manifest.entries.push(entry);
        let mpath = dir.path().join("manifest.json");
        manifest.save(&mpath).unwrap();
        let loaded = DatasetManifest::load(&mpath).unwrap();
        assert_eq!(loaded, manifest);
        loaded.validate(dir.path()).unwrap();
        let case = loaded.entries[0].load(dir.path()).unwrap();
        assert_eq!(case.mask.indices(), &[0, 4, 8, 12, 16, 20, 24, 28, 32, 36]);
        // Noise is applied to the full scan before masking.
        for (k, &v) in case.mask.indices().iter().enumerate() {
            assert_eq!(case.sparse_sinogram.row(k), case.full_sinogram.row(v));
        }

        assert!(Keep::Count(41).mask(40).is_err());
        assert_eq!(Keep::Count(40).mask(40).unwrap(), ViewMask::full(40).unwrap());
        assert!(Keep::Count(125).mask(1000).unwrap().indices().windows(2).all(|w| w[1] - w[0] == 8));
        assert!(Keep::Count(123).mask(984).unwrap().indices().windows(2).all(|w| w[1] - w[0] == 8));

        std::fs::remove_file(dir.path().join("c0_full.rspf")).unwrap();
        assert!(loaded.validate(dir.path()).is_err());
    }
}
