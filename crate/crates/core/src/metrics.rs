//! PSNR, SSIM and noise power spectrum.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{Image, Unit};

pub const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

pub const DEFAULT_PSNR_CAP: f64 = 99.0;

/// `20 log10(peak / √MSE)`. `peak = None` uses `max(reference)`; identical
/// images return `cap`.
pub fn psnr(x: &Image, reference: &Image, peak: Option<f64>, cap: f64) -> Result<f64> {
    x.require_same_grid(reference, "psnr")?;
    let mse =
        x.values().iter().zip(reference.values()).map(|(&a, &b)| (f64::from(a) - f64::from(b)).powi(2)).sum::<f64>()
            / x.len() as f64;
    if mse == 0.0 {
        return Ok(cap);
    }
    let peak = peak.unwrap_or_else(|| f64::from(reference.min_max().1));
    Ok((20.0 * (peak / mse.sqrt()).log10()).min(cap))
}

/// Dynamic range `L` entering the SSIM stabilizers `(K L)²`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DynamicRange {
    /// `max(ref) - min(ref)`, or 1 when the reference is flat.
    #[default]
    FromReference,
    Fixed(f64),
}

#[derive(Debug, Clone)]
pub struct SsimResult {
    pub mean: f64,
    /// Local SSIM over the valid window positions,
    /// `(w - 10) × (h - 10)`.
    pub map: Image,
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        *v = (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Separable "valid" Gaussian filter.
fn filter_valid(src: &[f64], w: usize, h: usize, win: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (ow, oh) = (w + 1 - SSIM_WINDOW, h + 1 - SSIM_WINDOW);
    let mut tmp = vec![0.0; ow * h];
    for r in 0..h {
        for c in 0..ow {
            tmp[r * ow + c] = (0..SSIM_WINDOW).map(|k| win[k] * src[r * w + c + k]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for r in 0..oh {
        for c in 0..ow {
            out[r * ow + c] = (0..SSIM_WINDOW).map(|k| win[k] * tmp[(r + k) * ow + c]).sum();
        }
    }
    out
}

/// Mean SSIM with an 11×11 Gaussian window (σ = 1.5), K1 = 0.01, K2 = 0.03.
pub fn ssim(x: &Image, reference: &Image, range: DynamicRange) -> Result<SsimResult> {
    x.require_same_grid(reference, "ssim")?;
    let (w, h) = (x.width(), x.height());
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::param(format!("SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {w}x{h}")));
    }
    let l = match range {
        DynamicRange::Fixed(l) if l > 0.0 => l,
        DynamicRange::Fixed(l) => return Err(Error::param(format!("dynamic range must be positive, got {l}"))),
        DynamicRange::FromReference => {
            let (lo, hi) = reference.min_max();
            let span = f64::from(hi) - f64::from(lo);
            if span > 0.0 {
                span
            } else {
                1.0
            }
        }
    };
    let c1 = (K1 * l).powi(2);
    let c2 = (K2 * l).powi(2);
    let a = x.to_f64();
    let b = reference.to_f64();
    let win = gaussian_window();
    let sq = |v: &[f64]| v.iter().map(|t| t * t).collect::<Vec<_>>();
    let prod: Vec<f64> = a.iter().zip(&b).map(|(p, q)| p * q).collect();
    let mu_a = filter_valid(&a, w, h, &win);
    let mu_b = filter_valid(&b, w, h, &win);
    let e_aa = filter_valid(&sq(&a), w, h, &win);
    let e_bb = filter_valid(&sq(&b), w, h, &win);
    let e_ab = filter_valid(&prod, w, h, &win);
    let map: Vec<f64> = (0..mu_a.len())
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .collect();
    let mean = map.iter().sum::<f64>() / map.len() as f64;
    let map =
        Image::from_f64(w + 1 - SSIM_WINDOW, h + 1 - SSIM_WINDOW, x.pixel_size(), &map)?.with_unit(Unit::Arbitrary);
    Ok(SsimResult { mean, map })
}

/// Rectangle in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Roi {
    pub row: usize,
    pub col: usize,
    pub height: usize,
    pub width: usize,
}

impl Roi {
    pub fn full(img: &Image) -> Self {
        Self { row: 0, col: 0, height: img.height(), width: img.width() }
    }
}

/// `|DFT2(roi - mean)|²`, shifted so DC lands at `(height / 2, width / 2)`.
pub fn nps(residual: &Image, roi: Roi) -> Result<Image> {
    if roi.width == 0 || roi.height == 0 {
        return Err(Error::param("NPS region is empty"));
    }
    if roi.row + roi.height > residual.height() || roi.col + roi.width > residual.width() {
        return Err(Error::param("NPS region extends outside the image"));
    }
    let (w, h) = (roi.width, roi.height);
    let mut data: Vec<Complex<f64>> = Vec::with_capacity(w * h);
    for r in roi.row..roi.row + h {
        for c in roi.col..roi.col + w {
            data.push(Complex::new(f64::from(residual.get(r, c)), 0.0));
        }
    }
    let mean = data.iter().map(|c| c.re).sum::<f64>() / (w * h) as f64;
    data.iter_mut().for_each(|c| c.re -= mean);

    let mut planner = FftPlanner::new();
    let row_fft = planner.plan_fft_forward(w);
    for row in data.chunks_mut(w) {
        row_fft.process(row);
    }
    let col_fft = planner.plan_fft_forward(h);
    let mut col = vec![Complex::new(0.0, 0.0); h];
    for c in 0..w {
        for r in 0..h {
            col[r] = data[r * w + c];
        }
        col_fft.process(&mut col);
        for r in 0..h {
            data[r * w + c] = col[r];
        }
    }
    let mut out = vec![0.0f64; w * h];
    for r in 0..h {
        for c in 0..w {
            let sr = (r + h / 2) % h;
            let sc = (c + w / 2) % w;
            out[sr * w + sc] = data[r * w + c].norm_sqr();
        }
    }
    Ok(Image::from_f64(w, h, residual.pixel_size(), &out)?.with_unit(Unit::Arbitrary))
}

#[derive(Debug, Clone, Serialize)]
pub struct MetricReport {
    pub psnr: f64,
    pub ssim: f64,
    #[serde(skip)]
    pub nps: Option<Image>,
}

pub fn report(x: &Image, reference: &Image) -> Result<MetricReport> {
    Ok(MetricReport {
        psnr: psnr(x, reference, None, DEFAULT_PSNR_CAP)?,
        ssim: ssim(x, reference, DynamicRange::FromReference)?.mean,
        nps: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn noise(w: usize, h: usize, amp: f64, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..w * h)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                amp * z
            })
            .collect()
    }

    fn ramp(w: usize, h: usize) -> Image {
        let v: Vec<f64> =
            (0..w * h).map(|i| ((i % w) as f64 / w as f64) * 0.8 + 0.2 * ((i / w) as f64 / h as f64)).collect();
        Image::from_f64(w, h, 1.0, &v).unwrap()
    }

    #[test]
    fn psnr_reference_values() {
        let r = Image::filled(8, 8, 1.0, 1.0);
        assert_eq!(psnr(&r, &r, None, 99.0).unwrap(), 99.0);
        let x = Image::filled(8, 8, 1.0, 1.1);
        assert!((psnr(&x, &r, None, 99.0).unwrap() - 20.0).abs() < 1e-5);
        let x = Image::filled(8, 8, 1.0, 1.01);
        assert!((psnr(&x, &r, None, 99.0).unwrap() - 40.0).abs() < 1e-4);
        assert!(psnr(&Image::zeros(4, 4, 1.0), &r, None, 99.0).is_err());
    }

    #[test]
    fn psnr_decreases_with_noise_amplitude() {
        let base = ramp(32, 32);
        let mut last = f64::INFINITY;
        for amp in [0.001, 0.003, 0.01, 0.03, 0.1] {
            let n = noise(32, 32, 1.0, 7);
            let v: Vec<f64> = base.to_f64().iter().zip(&n).map(|(b, e)| b + amp * e).collect();
            let p = psnr(&base.with_values_f64(&v).unwrap(), &base, None, 99.0).unwrap();
            assert!(p < last);
            last = p;
        }
    }

    #[test]
    fn ssim_identity_and_symmetry() {
        let a = ramp(24, 20);
        let s = ssim(&a, &a, DynamicRange::FromReference).unwrap();
        assert!((s.mean - 1.0).abs() < 1e-12);
        assert_eq!((s.map.width(), s.map.height()), (14, 10));

        let n = noise(24, 20, 0.05, 2);
        let b = a.with_values_f64(&a.to_f64().iter().zip(&n).map(|(x, e)| x + e).collect::<Vec<_>>()).unwrap();
        let ab = ssim(&a, &b, DynamicRange::Fixed(1.0)).unwrap().mean;
        let ba = ssim(&b, &a, DynamicRange::Fixed(1.0)).unwrap().mean;
        assert!((ab - ba).abs() < 1e-12);
        assert!((-1.0..=1.0).contains(&ab) && ab < 1.0);
    }

    #[test]
    fn ssim_constant_images_closed_form() {
        // Flat images: σ = 0, so SSIM reduces to the luminance term
        // (2 μx μy + C1) / (μx² + μy² + C1) with C1 = (0.01 · 1)².
        let r = Image::filled(16, 16, 1.0, 0.5);
        let x = Image::filled(16, 16, 1.0, 0.7);
        let c1 = 1e-4;
        let (mx, my) = (f64::from(0.7f32), 0.5);
        let expect = (2.0 * mx * my + c1) / (mx * mx + my * my + c1);
        let got = ssim(&x, &r, DynamicRange::Fixed(1.0)).unwrap().mean;
        assert!((got - expect).abs() < 1e-9, "{got} vs {expect}");
        assert!((expect - 0.945953).abs() < 1e-6);
    }

    #[test]
    fn ssim_spatial_translation_invariance() {
        let a = ramp(12, 12);
        let n = noise(12, 12, 0.1, 4);
        let b = a.with_values_f64(&a.to_f64().iter().zip(&n).map(|(x, e)| x + e).collect::<Vec<_>>()).unwrap();
        let place = |img: &Image, dr: usize, dc: usize| {
            let mut v = vec![0.0f32; 48 * 48];
            for r in 0..12 {
                for c in 0..12 {
                    v[(r + dr) * 48 + c + dc] = img.get(r, c);
                }
            }
            Image::new(48, 48, 1.0, v).unwrap()
        };
        let s1 = ssim(&place(&a, 12, 12), &place(&b, 12, 12), DynamicRange::Fixed(1.0)).unwrap().mean;
        let s2 = ssim(&place(&a, 20, 15), &place(&b, 20, 15), DynamicRange::Fixed(1.0)).unwrap().mean;
        assert!((s1 - s2).abs() < 1e-12);
    }

    #[test]
    fn ssim_small_image_rejected() {
        let a = Image::zeros(10, 30, 1.0);
        assert!(ssim(&a, &a, DynamicRange::FromReference).is_err());
    }

    #[test]
    fn nps_zero_and_cosine() {
        let z = Image::zeros(16, 16, 1.0);
        assert!(nps(&z, Roi::full(&z)).unwrap().values().iter().all(|&v| v == 0.0));

        // cos(2π · 3 x / 32): DFT has two peaks of magnitude (W H) / 2 at kx = ±3.
        let (w, h) = (32, 16);
        let v: Vec<f64> =
            (0..w * h).map(|i| (2.0 * std::f64::consts::PI * 3.0 * (i % w) as f64 / w as f64).cos()).collect();
        let img = Image::from_f64(w, h, 1.0, &v).unwrap();
        let s = nps(&img, Roi::full(&img)).unwrap();
        let peak = ((w * h) as f64 / 2.0).powi(2);
        let (cr, cc) = (h / 2, w / 2);
        for (r, c) in [(cr, cc - 3), (cr, cc + 3)] {
            assert!((f64::from(s.get(r, c)) - peak).abs() / peak < 1e-5);
        }
        let rest: f64 = s.values().iter().map(|&v| f64::from(v)).sum::<f64>() - 2.0 * peak;
        assert!(rest.abs() / peak < 1e-4);
    }

    #[test]
    fn nps_white_noise_is_flat() {
        // Per-bin estimates are Gamma distributed; flatness is checked on 8×8
        // bin block averages over 50 realisations.
        let n = 64;
        let mut acc = vec![0.0f64; n * n];
        for seed in 0..50 {
            let img = Image::from_f64(n, n, 1.0, &noise(n, n, 1.0, 1000 + seed)).unwrap();
            let s = nps(&img, Roi::full(&img)).unwrap();
            acc.iter_mut().zip(s.values()).for_each(|(a, &v)| *a += f64::from(v) / 50.0);
        }
        acc[(n / 2) * n + n / 2] = f64::NAN;
        let finite: Vec<f64> = acc.iter().copied().filter(|v| v.is_finite()).collect();
        let mean = finite.iter().sum::<f64>() / finite.len() as f64;
        for br in 0..8 {
            for bc in 0..8 {
                let mut s = 0.0;
                let mut k = 0;
                for r in br * 8..br * 8 + 8 {
                    for c in bc * 8..bc * 8 + 8 {
                        if acc[r * n + c].is_finite() {
                            s += acc[r * n + c];
                            k += 1;
                        }
                    }
                }
                let block = s / k as f64;
                assert!((block - mean).abs() / mean < 0.2, "block ({br},{bc}) = {block}, mean {mean}");
            }
        }
    }

    #[test]
    fn nps_roi_checks() {
        let img = Image::zeros(8, 8, 1.0);
        assert!(nps(&img, Roi { row: 0, col: 0, height: 0, width: 4 }).is_err());
        assert!(nps(&img, Roi { row: 4, col: 4, height: 8, width: 2 }).is_err());
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(64))]

        #[test]
        fn ssim_is_bounded_and_self_similarity_is_one(
            a in proptest::collection::vec(-1.0f64..1.0, 256),
            b in proptest::collection::vec(-1.0f64..1.0, 256),
        ) {
            let x = Image::from_f64(16, 16, 1.0, &a).unwrap();
            let y = Image::from_f64(16, 16, 1.0, &b).unwrap();
            let s = ssim(&x, &y, DynamicRange::default()).unwrap().mean;
            proptest::prop_assert!((-1.0..=1.0).contains(&s));
            let one = ssim(&x, &x, DynamicRange::default()).unwrap().mean;
            proptest::prop_assert!((one - 1.0).abs() < 1e-12);
        }
    }
}
