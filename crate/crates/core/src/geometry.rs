//! Fan-beam system model.
//!
//! The source sits on a circle of radius `source_to_center` around the
//! isocenter; for view angle `β` it is at `R (cos β, sin β)` and the central
//! ray points back through the isocenter. Detector elements lie on an arc
//! centered on the source (equiangular), element `k` at fan angle
//! `γ_k = (k - (n - 1) / 2) · pitch`. Each measurement is the Siddon line
//! integral from the source to the element center, so [`forward_project`]
//! and [`back_project`] are exact transposes of one sparse matrix.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{Image, Sinogram};

/// Number of view groups summed in fixed order by the backprojectors.
const ADJOINT_CHUNKS: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FanBeamGeometry {
    /// mm
    pub source_to_center: f64,
    /// mm
    pub center_to_detector: f64,
    pub n_detectors: usize,
    /// radians between adjacent detector elements
    pub detector_angular_pitch: f64,
    /// radians, strictly increasing
    pub view_angles: Vec<f64>,
    pub width: usize,
    pub height: usize,
    /// mm
    pub pixel_size: f64,
}

impl FanBeamGeometry {
    pub fn validate(&self) -> Result<()> {
        if !(self.source_to_center > 0.0 && self.source_to_center.is_finite()) {
            return Err(Error::param("source_to_center must be > 0"));
        }
        if !(self.center_to_detector >= 0.0 && self.center_to_detector.is_finite()) {
            return Err(Error::param("center_to_detector must be >= 0"));
        }
        if self.n_detectors == 0 {
            return Err(Error::param("n_detectors must be >= 1"));
        }
        if !(self.detector_angular_pitch > 0.0 && self.detector_angular_pitch.is_finite()) {
            return Err(Error::param("detector_angular_pitch must be > 0"));
        }
        if self.width == 0 || self.height == 0 || !(self.pixel_size > 0.0) {
            return Err(Error::param("image grid must be non-empty with positive pixel size"));
        }
        if self.view_angles.is_empty() {
            return Err(Error::param("geometry needs at least one view"));
        }
        if self.view_angles.windows(2).any(|w| w[1] <= w[0]) || self.view_angles.iter().any(|a| !a.is_finite()) {
            return Err(Error::param("view angles must be finite and strictly increasing"));
        }
        if self.source_to_center <= self.circumscribed_radius() {
            return Err(Error::param("source lies inside the image grid"));
        }
        if self.half_fan_angle() < (self.inscribed_radius() / self.source_to_center).asin() {
            log::warn!(
                "detector fan ({:.4} rad half-angle) does not cover the inscribed circle of the image grid",
                self.half_fan_angle()
            );
        }
        Ok(())
    }

    /// Geometry with the given grid and views, and a detector arc of
    /// `n_detectors` elements sized to cover the whole grid diagonal.
    pub fn covering(
        width: usize,
        height: usize,
        pixel_size: f64,
        view_angles: Vec<f64>,
        n_detectors: usize,
        source_to_center: f64,
        center_to_detector: f64,
    ) -> Result<Self> {
        let r = 0.5 * pixel_size * ((width * width + height * height) as f64).sqrt();
        if source_to_center <= r {
            return Err(Error::param("source lies inside the image grid"));
        }
        let fan = 2.0 * (r / source_to_center).asin() * 1.02;
        let pitch = fan / n_detectors.max(1) as f64;
        let geom = Self {
            source_to_center,
            center_to_detector,
            n_detectors,
            detector_angular_pitch: pitch,
            view_angles,
            width,
            height,
            pixel_size,
        };
        geom.validate()?;
        Ok(geom)
    }

    /// Desk-scale default: 550 mm / 400 mm distances, `2 · max(w, h) + 1`
    /// detectors, `n_views` uniform over 2π.
    pub fn desk(width: usize, height: usize, pixel_size: f64, n_views: usize) -> Result<Self> {
        Self::covering(width, height, pixel_size, uniform_angles(n_views), 2 * width.max(height) + 1, 550.0, 400.0)
    }

    pub fn n_views(&self) -> usize {
        self.view_angles.len()
    }

    pub fn source_to_detector(&self) -> f64 {
        self.source_to_center + self.center_to_detector
    }

    pub fn detector_angle(&self, det: usize) -> f64 {
        (det as f64 - (self.n_detectors as f64 - 1.0) / 2.0) * self.detector_angular_pitch
    }

    pub fn half_fan_angle(&self) -> f64 {
        (self.n_detectors as f64 - 1.0) / 2.0 * self.detector_angular_pitch
    }

    pub fn inscribed_radius(&self) -> f64 {
        0.5 * self.pixel_size * self.width.min(self.height) as f64
    }

    pub fn circumscribed_radius(&self) -> f64 {
        0.5 * self.pixel_size * ((self.width.pow(2) + self.height.pow(2)) as f64).sqrt()
    }

    pub fn n_pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn source_position(&self, view_angle: f64) -> (f64, f64) {
        let (s, c) = view_angle.sin_cos();
        (self.source_to_center * c, self.source_to_center * s)
    }

    /// Endpoints (source, detector element center) of one ray.
    pub fn ray_endpoints(&self, view_angle: f64, det: usize) -> ((f64, f64), (f64, f64)) {
        let src = self.source_position(view_angle);
        let dir = view_angle + std::f64::consts::PI + self.detector_angle(det);
        let (s, c) = dir.sin_cos();
        let sdd = self.source_to_detector();
        (src, (src.0 + sdd * c, src.1 + sdd * s))
    }

    pub fn image_zeros(&self) -> Image {
        Image::zeros(self.width, self.height, self.pixel_size)
    }

    pub fn check_image(&self, img: &Image) -> Result<()> {
        if img.width() != self.width || img.height() != self.height {
            return Err(Error::param(format!(
                "image is {}x{}, geometry expects {}x{}",
                img.width(),
                img.height(),
                self.width,
                self.height
            )));
        }
        if (img.pixel_size() - self.pixel_size).abs() > 1e-9 * self.pixel_size {
            return Err(Error::param(format!(
                "image pixel size {} mm differs from geometry {} mm",
                img.pixel_size(),
                self.pixel_size
            )));
        }
        Ok(())
    }

    /// Siddon trace of one ray: `(pixel index, length in mm)` in ray order.
    pub fn trace(&self, view_angle: f64, det: usize, out: &mut Vec<(u32, f64)>) {
        let (p1, p2) = self.ray_endpoints(view_angle, det);
        siddon(p1, p2, self.width, self.height, self.pixel_size, out);
    }
}

/// `n` angles uniformly spaced over `[0, 2π)`.
pub fn uniform_angles(n: usize) -> Vec<f64> {
    (0..n).map(|i| 2.0 * std::f64::consts::PI * i as f64 / n as f64).collect()
}

/// Parametric range `[lo, hi]` along one axis for which the ray is inside the
/// slab `[min, max]`. `None` when parallel and outside.
fn slab(p: f64, d: f64, min: f64, max: f64) -> Option<(f64, f64)> {
    if d != 0.0 {
        let a = (min - p) / d;
        let b = (max - p) / d;
        Some((a.min(b), a.max(b)))
    } else if p > min && p < max {
        Some((f64::NEG_INFINITY, f64::INFINITY))
    } else {
        None
    }
}

/// Plane crossings strictly inside `(a_min, a_max)`, increasing in α.
#[allow(clippy::too_many_arguments)]
fn crossings(p: f64, d: f64, origin: f64, step: f64, n: usize, a_min: f64, a_max: f64, out: &mut Vec<f64>) {
    out.clear();
    if d == 0.0 {
        return;
    }
    let alpha = |i: usize| (origin + i as f64 * step - p) / d;
    if d > 0.0 {
        out.extend((0..=n).map(alpha).filter(|&a| a > a_min && a < a_max));
    } else {
        out.extend((0..=n).rev().map(alpha).filter(|&a| a > a_min && a < a_max));
    }
}

/// Exact radiological path of the segment `p1 → p2` through a centered
/// `width × height` grid. Pixels are identified by the midpoint of each
/// segment between consecutive plane crossings.
pub(crate) fn siddon(
    p1: (f64, f64),
    p2: (f64, f64),
    width: usize,
    height: usize,
    pixel_size: f64,
    out: &mut Vec<(u32, f64)>,
) {
    out.clear();
    let (xmin, ymin) = (-0.5 * width as f64 * pixel_size, -0.5 * height as f64 * pixel_size);
    let (xmax, ymax) = (-xmin, -ymin);
    let (dx, dy) = (p2.0 - p1.0, p2.1 - p1.1);
    let length = dx.hypot(dy);
    if length == 0.0 {
        return;
    }
    let (Some((ax0, ax1)), Some((ay0, ay1))) = (slab(p1.0, dx, xmin, xmax), slab(p1.1, dy, ymin, ymax)) else {
        return;
    };
    let a_min = ax0.max(ay0).max(0.0);
    let a_max = ax1.min(ay1).min(1.0);
    if a_min >= a_max {
        return;
    }

    let mut xs = Vec::new();
    let mut ys = Vec::new();
    crossings(p1.0, dx, xmin, pixel_size, width, a_min, a_max, &mut xs);
    crossings(p1.1, dy, ymin, pixel_size, height, a_min, a_max, &mut ys);

    let (mut i, mut j) = (0, 0);
    let mut prev = a_min;
    loop {
        let next = match (xs.get(i), ys.get(j)) {
            (Some(&ax), Some(&ay)) => {
                if ax < ay {
                    i += 1;
                    ax
                } else if ay < ax {
                    j += 1;
                    ay
                } else {
                    i += 1;
                    j += 1;
                    ax
                }
            }
            (Some(&ax), None) => {
                i += 1;
                ax
            }
            (None, Some(&ay)) => {
                j += 1;
                ay
            }
            (None, None) => a_max,
        };
        let seg = (next - prev) * length;
        if seg > 0.0 {
            let mid = 0.5 * (prev + next);
            let x = p1.0 + mid * dx;
            let y = p1.1 + mid * dy;
            let col = (((x - xmin) / pixel_size).floor() as isize).clamp(0, width as isize - 1) as usize;
            let from_bottom = (((y - ymin) / pixel_size).floor() as isize).clamp(0, height as isize - 1) as usize;
            let row = height - 1 - from_bottom;
            out.push(((row * width + col) as u32, seg));
        }
        if next >= a_max {
            break;
        }
        prev = next;
    }
}

/// Indices of the acquired views, strictly increasing.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViewMask {
    n_views: usize,
    kept_view_indices: Vec<usize>,
}

impl ViewMask {
    pub fn new(n_views: usize, kept_view_indices: Vec<usize>) -> Result<Self> {
        let mask = Self { n_views, kept_view_indices };
        mask.validate()?;
        Ok(mask)
    }

    pub fn validate(&self) -> Result<()> {
        if self.kept_view_indices.is_empty() {
            return Err(Error::param("view mask must keep at least one view"));
        }
        if self.kept_view_indices.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::param("view mask indices must be strictly increasing"));
        }
        if let Some(&last) = self.kept_view_indices.last() {
            if last >= self.n_views {
                return Err(Error::param(format!("view index {last} out of range for {} views", self.n_views)));
            }
        }
        Ok(())
    }

    pub fn full(n_views: usize) -> Result<Self> {
        Self::new(n_views, (0..n_views).collect())
    }

    /// `keep` views at indices `round(j · n_views / keep)`.
    pub fn uniform(n_views: usize, keep: usize) -> Result<Self> {
        if keep == 0 || keep > n_views {
            return Err(Error::param(format!("cannot keep {keep} of {n_views} views")));
        }
        let idx =
            (0..keep).map(|j| ((j as f64 * n_views as f64 / keep as f64).round() as usize).min(n_views - 1)).collect();
        Self::new(n_views, idx)
    }

    /// Every `stride`-th view starting at 0.
    pub fn stride(n_views: usize, stride: usize) -> Result<Self> {
        if stride == 0 {
            return Err(Error::param("stride must be >= 1"));
        }
        Self::new(n_views, (0..n_views).step_by(stride).collect())
    }

    pub fn n_views(&self) -> usize {
        self.n_views
    }

    pub fn indices(&self) -> &[usize] {
        &self.kept_view_indices
    }

    pub fn len(&self) -> usize {
        self.kept_view_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kept_view_indices.is_empty()
    }

    fn check_against(&self, n_views: usize) -> Result<()> {
        if self.n_views != n_views {
            return Err(Error::param(format!("mask built for {} views applied to {n_views}", self.n_views)));
        }
        Ok(())
    }
}

fn project_views(geom: &FanBeamGeometry, img: &Image, views: &[usize]) -> Result<Sinogram> {
    geom.validate()?;
    geom.check_image(img)?;
    let x = img.values();
    let n_det = geom.n_detectors;
    let rows: Vec<Vec<f32>> = views
        .par_iter()
        .map_init(Vec::new, |buf, &v| {
            let angle = geom.view_angles[v];
            (0..n_det)
                .map(|d| {
                    geom.trace(angle, d, buf);
                    buf.iter().map(|&(p, w)| w * f64::from(x[p as usize])).sum::<f64>() as f32
                })
                .collect()
        })
        .collect();
    let angles = views.iter().map(|&v| geom.view_angles[v]).collect();
    Sinogram::new(n_det, angles, rows.concat())
}

/// Sum `contribute(local_view, acc)` over all views in a fixed grouping so
/// the result is independent of the thread count.
fn accumulate_views<F>(n_local: usize, n_pixels: usize, contribute: F) -> Vec<f64>
where
    F: Fn(usize, &mut Vec<(u32, f64)>, &mut [f64]) + Sync,
{
    let chunk = n_local.div_ceil(ADJOINT_CHUNKS).max(1);
    let partials: Vec<Vec<f64>> = (0..n_local)
        .collect::<Vec<_>>()
        .par_chunks(chunk)
        .map(|views| {
            let mut acc = vec![0.0; n_pixels];
            let mut buf = Vec::new();
            for &v in views {
                contribute(v, &mut buf, &mut acc);
            }
            acc
        })
        .collect();
    let mut out = vec![0.0; n_pixels];
    for p in &partials {
        out.iter_mut().zip(p).for_each(|(o, v)| *o += v);
    }
    out
}

fn backproject_views(geom: &FanBeamGeometry, sino: &Sinogram, views: &[usize]) -> Result<Image> {
    geom.validate()?;
    if sino.n_detectors() != geom.n_detectors || sino.n_views() != views.len() {
        return Err(Error::param(format!(
            "sinogram is {}x{}, expected {}x{}",
            sino.n_views(),
            sino.n_detectors(),
            views.len(),
            geom.n_detectors
        )));
    }
    let acc = accumulate_views(views.len(), geom.n_pixels(), |local, buf, acc| {
        let angle = geom.view_angles[views[local]];
        for (d, &y) in sino.row(local).iter().enumerate() {
            if y == 0.0 {
                continue;
            }
            geom.trace(angle, d, buf);
            for &(p, w) in buf.iter() {
                acc[p as usize] += w * f64::from(y);
            }
        }
    });
    Image::from_f64(geom.width, geom.height, geom.pixel_size, &acc)
}

/// `A x` over all views of `geom`.
pub fn forward_project(img: &Image, geom: &FanBeamGeometry) -> Result<Sinogram> {
    let views: Vec<usize> = (0..geom.n_views()).collect();
    project_views(geom, img, &views)
}

/// `Aᵀ y`, the exact transpose of [`forward_project`].
pub fn back_project(sino: &Sinogram, geom: &FanBeamGeometry) -> Result<Image> {
    let views: Vec<usize> = (0..geom.n_views()).collect();
    backproject_views(geom, sino, &views)
}

/// `M(Λ) y`: keep the masked rows in order.
pub fn apply_view_mask(sino: &Sinogram, mask: &ViewMask) -> Result<Sinogram> {
    mask.check_against(sino.n_views())?;
    let values: Vec<f32> = mask.indices().iter().flat_map(|&v| sino.row(v).iter().copied()).collect();
    let angles = mask.indices().iter().map(|&v| sino.view_angles()[v]).collect();
    Ok(Sinogram::new(sino.n_detectors(), angles, values)?.with_unit(sino.unit()))
}

/// `M(Λ) A x`, tracing only the kept views.
pub fn masked_forward(img: &Image, geom: &FanBeamGeometry, mask: &ViewMask) -> Result<Sinogram> {
    mask.check_against(geom.n_views())?;
    project_views(geom, img, mask.indices())
}

/// `(M(Λ) A)ᵀ y` for a sinogram holding only the kept views.
pub fn masked_adjoint(sino: &Sinogram, geom: &FanBeamGeometry, mask: &ViewMask) -> Result<Image> {
    mask.check_against(geom.n_views())?;
    backproject_views(geom, sino, mask.indices())
}

/// Precomputed sparse rows of `M(Λ) A` for repeated use by iterative solvers.
///
/// Row `local_view * n_detectors + det` holds the Siddon weights of that
/// ray. Products give bit-identical results to the tracing functions above.
#[derive(Debug, Clone)]
pub struct SystemMatrix {
    geom: FanBeamGeometry,
    views: Vec<usize>,
    row_ptr: Vec<usize>,
    cols: Vec<u32>,
    weights: Vec<f64>,
}

impl SystemMatrix {
    pub fn new(geom: &FanBeamGeometry, mask: &ViewMask) -> Result<Self> {
        geom.validate()?;
        mask.check_against(geom.n_views())?;
        let n_det = geom.n_detectors;
        let per_view: Vec<(Vec<usize>, Vec<u32>, Vec<f64>)> = mask
            .indices()
            .par_iter()
            .map_init(Vec::new, |buf, &v| {
                let mut lens = Vec::with_capacity(n_det);
                let mut cols = Vec::new();
                let mut ws = Vec::new();
                for d in 0..n_det {
                    geom.trace(geom.view_angles[v], d, buf);
                    lens.push(buf.len());
                    cols.extend(buf.iter().map(|e| e.0));
                    ws.extend(buf.iter().map(|e| e.1));
                }
                (lens, cols, ws)
            })
            .collect();
        let mut row_ptr = vec![0];
        let mut cols = Vec::new();
        let mut weights = Vec::new();
        for (lens, c, w) in per_view {
            for l in lens {
                row_ptr.push(row_ptr.last().unwrap() + l);
            }
            cols.extend(c);
            weights.extend(w);
        }
        Ok(Self { geom: geom.clone(), views: mask.indices().to_vec(), row_ptr, cols, weights })
    }

    pub fn geometry(&self) -> &FanBeamGeometry {
        &self.geom
    }

    pub fn n_views(&self) -> usize {
        self.views.len()
    }

    pub fn n_detectors(&self) -> usize {
        self.geom.n_detectors
    }

    pub fn n_pixels(&self) -> usize {
        self.geom.n_pixels()
    }

    pub fn view_angles(&self) -> Vec<f64> {
        self.views.iter().map(|&v| self.geom.view_angles[v]).collect()
    }

    pub fn row(&self, local_view: usize, det: usize) -> (&[u32], &[f64]) {
        let r = local_view * self.geom.n_detectors + det;
        let (a, b) = (self.row_ptr[r], self.row_ptr[r + 1]);
        (&self.cols[a..b], &self.weights[a..b])
    }

    /// Ray projections of `x` for one local view, written to `out`.
    pub fn forward_view(&self, local_view: usize, x: &[f64], out: &mut [f64]) {
        for (d, o) in out.iter_mut().enumerate() {
            let (c, w) = self.row(local_view, d);
            *o = c.iter().zip(w).map(|(&p, &w)| w * x[p as usize]).sum();
        }
    }

    /// Projections of `x` (f64 pixels) over the given local views, view-major.
    pub fn forward_views(&self, local_views: &[usize], x: &[f64]) -> Vec<f64> {
        let n_det = self.geom.n_detectors;
        let mut out = vec![0.0; local_views.len() * n_det];
        out.par_chunks_mut(n_det).zip(local_views.par_iter()).for_each(|(row, &v)| self.forward_view(v, x, row));
        out
    }

    /// `Σ_views Aᵀ_view r_view` for view-major residual rows matching `local_views`.
    pub fn adjoint_views(&self, local_views: &[usize], rows: &[f64]) -> Vec<f64> {
        let n_det = self.geom.n_detectors;
        accumulate_views(local_views.len(), self.n_pixels(), |k, _, acc| {
            let v = local_views[k];
            for d in 0..n_det {
                let y = rows[k * n_det + d];
                if y == 0.0 {
                    continue;
                }
                let (c, w) = self.row(v, d);
                for (&p, &w) in c.iter().zip(w) {
                    acc[p as usize] += w * y;
                }
            }
        })
    }

    pub fn all_views(&self) -> Vec<usize> {
        (0..self.views.len()).collect()
    }

    pub fn forward(&self, img: &Image) -> Result<Sinogram> {
        self.geom.check_image(img)?;
        let x: Vec<f64> = img.to_f64();
        let y = self.forward_views(&self.all_views(), &x);
        Sinogram::new(self.geom.n_detectors, self.view_angles(), y.iter().map(|&v| v as f32).collect())
    }

    pub fn adjoint(&self, sino: &Sinogram) -> Result<Image> {
        if sino.n_views() != self.views.len() || sino.n_detectors() != self.geom.n_detectors {
            return Err(Error::param("sinogram shape does not match system matrix"));
        }
        let acc = self.adjoint_views(&self.all_views(), &sino.to_f64());
        Image::from_f64(self.geom.width, self.geom.height, self.geom.pixel_size, &acc)
    }
}
