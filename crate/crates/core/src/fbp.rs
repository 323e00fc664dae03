//! Equiangular fan-beam filtered backprojection.
//!
//! Each projection row is cosine-weighted, convolved with the fan-beam ramp
//! kernel `g(nα) = ½ (nα / sin nα)² h(nα)` and backprojected with the
//! inverse-square source distance weight. Views are weighted by their own
//! angular footprint, so uniformly sub-sampled view sets need no extra code.

use std::f64::consts::PI;
use std::sync::Arc;

use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::FanBeamGeometry;
use crate::imaging::{Image, Sinogram};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum RampFilter {
    #[default]
    RamLak,
    SheppLogan,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Interpolation {
    Nearest,
    #[default]
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FbpConfig {
    pub filter: RampFilter,
    /// Fraction of Nyquist kept, in `(0, 1]`.
    pub frequency_cutoff: f64,
    pub interpolation: Interpolation,
}

impl Default for FbpConfig {
    fn default() -> Self {
        Self { filter: RampFilter::RamLak, frequency_cutoff: 1.0, interpolation: Interpolation::Linear }
    }
}

impl FbpConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.frequency_cutoff > 0.0 && self.frequency_cutoff <= 1.0) {
            return Err(Error::param(format!("frequency cutoff must be in (0, 1], got {}", self.frequency_cutoff)));
        }
        Ok(())
    }
}

/// Discrete spatial ramp kernel at integer offset `k` for sample spacing `spacing`.
pub fn ramp_kernel(filter: RampFilter, k: i64, spacing: f64) -> f64 {
    let t2 = spacing * spacing;
    match filter {
        RampFilter::RamLak => {
            if k == 0 {
                1.0 / (4.0 * t2)
            } else if k % 2 == 0 {
                0.0
            } else {
                -1.0 / (PI * PI * (k * k) as f64 * t2)
            }
        }
        RampFilter::SheppLogan => -2.0 / (PI * PI * t2 * (4.0 * (k * k) as f64 - 1.0)),
    }
}

/// Linear convolution of every row with a symmetric kernel via zero-padded FFT.
struct RowFilter {
    n: usize,
    padded: usize,
    fft: Arc<dyn Fft<f64>>,
    ifft: Arc<dyn Fft<f64>>,
    response: Vec<Complex<f64>>,
}

impl RowFilter {
    /// `kernel(k)` for `k` in `-(n-1)..=(n-1)`; bins above `cutoff · Nyquist` are zeroed.
    fn new(n: usize, cutoff: f64, kernel: impl Fn(i64) -> f64) -> Self {
        let padded = 2 * n.next_power_of_two();
        let mut planner = FftPlanner::new();
        let fft = planner.plan_fft_forward(padded);
        let ifft = planner.plan_fft_inverse(padded);
        let mut response = vec![Complex::new(0.0, 0.0); padded];
        for k in 0..n as i64 {
            let v = kernel(k);
            response[k as usize].re = v;
            if k > 0 {
                response[padded - k as usize].re = kernel(-k);
            }
        }
        fft.process(&mut response);
        if cutoff < 1.0 {
            let half = padded / 2;
            for (i, r) in response.iter_mut().enumerate() {
                let f = i.min(padded - i) as f64 / half as f64;
                if f > cutoff {
                    *r = Complex::new(0.0, 0.0);
                }
            }
        }
        let scale = 1.0 / padded as f64;
        response.iter_mut().for_each(|r| *r *= scale);
        Self { n, padded, fft, ifft, response }
    }

    fn apply(&self, row: &[f64], out: &mut [f64], buf: &mut Vec<Complex<f64>>) {
        buf.clear();
        buf.extend(row.iter().map(|&v| Complex::new(v, 0.0)));
        buf.resize(self.padded, Complex::new(0.0, 0.0));
        self.fft.process(buf);
        buf.iter_mut().zip(&self.response).for_each(|(b, r)| *b *= r);
        self.ifft.process(buf);
        for (o, b) in out.iter_mut().zip(buf.iter()).take(self.n) {
            *o = b.re;
        }
    }

    fn apply_rows(&self, rows: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; rows.len()];
        out.par_chunks_mut(self.n)
            .zip(rows.par_chunks(self.n))
            .for_each_init(Vec::new, |buf, (o, r)| self.apply(r, o, buf));
        out
    }
}

/// Convolve each detector row with the discrete ramp kernel of `spacing`.
/// An impulse comes back as the kernel itself (no `spacing` factor).
pub fn ramp_filter_rows(sino: &Sinogram, cfg: &FbpConfig, spacing: f64) -> Result<Sinogram> {
    cfg.validate()?;
    if sino.n_detectors() < 2 {
        return Err(Error::param("ramp filtering needs at least 2 detectors"));
    }
    if !(spacing > 0.0) {
        return Err(Error::param("detector spacing must be positive"));
    }
    let filter = RowFilter::new(sino.n_detectors(), cfg.frequency_cutoff, |k| ramp_kernel(cfg.filter, k, spacing));
    let out = filter.apply_rows(&sino.to_f64());
    sino.with_values(out.iter().map(|&v| v as f32).collect())
}

/// Angular footprint of each view: half the gap to its neighbours, wrapping
/// around 2π.
pub fn view_weights(angles: &[f64]) -> Vec<f64> {
    let n = angles.len();
    if n == 1 {
        return vec![2.0 * PI];
    }
    (0..n)
        .map(|i| {
            let next = if i + 1 < n { angles[i + 1] } else { angles[0] + 2.0 * PI };
            let prev = if i > 0 { angles[i - 1] } else { angles[n - 1] - 2.0 * PI };
            0.5 * (next - prev)
        })
        .collect()
}

pub fn fbp_reconstruct(sino: &Sinogram, geom: &FanBeamGeometry, cfg: &FbpConfig) -> Result<Image> {
    cfg.validate()?;
    geom.validate()?;
    if sino.n_views() < 2 {
        return Err(Error::param("FBP needs at least 2 views"));
    }
    let n_det = geom.n_detectors;
    if sino.n_detectors() != n_det {
        return Err(Error::param(format!("sinogram has {} detectors, geometry {}", sino.n_detectors(), n_det)));
    }
    if n_det < 2 {
        return Err(Error::param("FBP needs at least 2 detectors"));
    }
    let alpha = geom.detector_angular_pitch;
    let r = geom.source_to_center;

    // Cosine pre-weighting: R' = R · D · cos γ.
    let mut weighted = sino.to_f64();
    for row in weighted.chunks_mut(n_det) {
        for (d, v) in row.iter_mut().enumerate() {
            *v *= r * geom.detector_angle(d).cos();
        }
    }
    let fan_kernel = |k: i64| -> f64 {
        let base = ramp_kernel(cfg.filter, k, alpha);
        if k == 0 {
            0.5 * base
        } else {
            let g = k as f64 * alpha;
            0.5 * (g / g.sin()).powi(2) * base
        }
    };
    let filter = RowFilter::new(n_det, cfg.frequency_cutoff, fan_kernel);
    let mut filtered = filter.apply_rows(&weighted);
    filtered.iter_mut().for_each(|v| *v *= alpha);

    let angles = sino.view_angles();
    let dbeta = view_weights(angles);
    let (w, h) = (geom.width, geom.height);
    let center = (n_det as f64 - 1.0) / 2.0;
    let trig: Vec<(f64, f64)> = angles.iter().map(|a| a.sin_cos()).collect();

    let mut image = vec![0.0f64; w * h];
    image.par_chunks_mut(w).enumerate().for_each(|(row, out)| {
        for (col, o) in out.iter_mut().enumerate() {
            let (x, y) = crate::imaging::pixel_center(w, h, geom.pixel_size, row, col);
            let mut acc = 0.0;
            for (v, &(sb, cb)) in trig.iter().enumerate() {
                // Source at R(cos β, sin β); central ray direction c = -(cos β, sin β).
                let (vx, vy) = (x - r * cb, y - r * sb);
                let along = -(vx * cb + vy * sb);
                let perp = vx * sb - vy * cb;
                let gamma = perp.atan2(along);
                let l2 = vx * vx + vy * vy;
                let u = gamma / alpha + center;
                let q = &filtered[v * n_det..(v + 1) * n_det];
                let sample = match cfg.interpolation {
                    Interpolation::Nearest => {
                        let i = u.round();
                        if i < 0.0 || i > (n_det - 1) as f64 {
                            continue;
                        }
                        q[i as usize]
                    }
                    Interpolation::Linear => {
                        if u < 0.0 || u > (n_det - 1) as f64 {
                            continue;
                        }
                        let i0 = (u.floor() as usize).min(n_det - 2);
                        let t = u - i0 as f64;
                        (1.0 - t) * q[i0] + t * q[i0 + 1]
                    }
                };
                acc += dbeta[v] * sample / l2;
            }
            *o = acc;
        }
    });
    Image::from_f64(w, h, geom.pixel_size, &image)
}
