//! Poisson-flow sampling: noise schedule, perturbations, the exact empirical
//! denoiser over a finite charge set and the Heun ODE sampler.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::imaging::Image;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleParams {
    pub sigma_max: f64,
    pub sigma_min: f64,
    pub rho: f64,
    pub n_steps: usize,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        Self { sigma_max: 80.0, sigma_min: 0.002, rho: 7.0, n_steps: 16 }
    }
}

impl ScheduleParams {
    pub fn build(&self) -> Result<NoiseSchedule> {
        make_schedule(self.sigma_max, self.sigma_min, self.rho, self.n_steps)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    params: ScheduleParams,
    times: Vec<f64>,
}

impl NoiseSchedule {
    pub fn params(&self) -> &ScheduleParams {
        &self.params
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn n_steps(&self) -> usize {
        self.times.len()
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        ScheduleParams::default().build().expect("default schedule is valid")
    }
}

/// ρ-spaced grid from `sigma_max` down to `sigma_min`; endpoints are exact.
pub fn make_schedule(sigma_max: f64, sigma_min: f64, rho: f64, n_steps: usize) -> Result<NoiseSchedule> {
    if !(sigma_min > 0.0 && sigma_max > sigma_min && sigma_max.is_finite()) {
        return Err(Error::param(format!("need sigma_max > sigma_min > 0, got {sigma_max}, {sigma_min}")));
    }
    if !(rho > 0.0 && rho.is_finite()) {
        return Err(Error::param("rho must be > 0"));
    }
    if n_steps < 2 {
        return Err(Error::param("n_steps must be >= 2"));
    }
    let (a, b) = (sigma_max.powf(1.0 / rho), sigma_min.powf(1.0 / rho));
    let last = (n_steps - 1) as f64;
    let mut times: Vec<f64> = (0..n_steps).map(|i| (a + i as f64 / last * (b - a)).powf(rho)).collect();
    times[0] = sigma_max;
    times[n_steps - 1] = sigma_min;
    if times.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::Numerical("schedule is not strictly decreasing".into()));
    }
    Ok(NoiseSchedule { params: ScheduleParams { sigma_max, sigma_min, rho, n_steps }, times })
}

fn gaussian(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn unit_direction(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        let e = gaussian(n, rng);
        let norm = e.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            return e.into_iter().map(|v| v / norm).collect();
        }
    }
}

/// `x0 + r·ε/‖ε‖` with ε standard normal.
pub fn perturb_spherical(x0: &Image, r: f64, seed: u64) -> Result<Image> {
    if !(r >= 0.0 && r.is_finite()) {
        return Err(Error::param("perturbation radius must be finite and >= 0"));
    }
    if r == 0.0 {
        return Ok(x0.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dir = unit_direction(x0.len(), &mut rng);
    let v: Vec<f64> = x0.values().iter().zip(&dir).map(|(&x, d)| f64::from(x) + r * d).collect();
    x0.with_values_f64(&v)
}

/// `x_sp + σ·ε` with ε standard normal.
pub fn hijack_init(x_sp: &Image, sigma: f64, seed: u64) -> Result<Image> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::param("hijack sigma must be finite and >= 0"));
    }
    if sigma == 0.0 {
        return Ok(x_sp.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let e = gaussian(x_sp.len(), &mut rng);
    let v: Vec<f64> = x_sp.values().iter().zip(&e).map(|(&x, e)| f64::from(x) + sigma * e).collect();
    x_sp.with_values_f64(&v)
}

/// Augmented dimension D. `Infinite` is the Gaussian (EDM) limit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AugmentedDim {
    Finite(f64),
    Infinite,
}

impl Default for AugmentedDim {
    fn default() -> Self {
        AugmentedDim::Finite(128.0)
    }
}

impl AugmentedDim {
    pub fn validate(&self) -> Result<()> {
        match *self {
            AugmentedDim::Finite(d) if !(d >= 1.0 && d.is_finite()) => {
                Err(Error::param(format!("D must be >= 1, got {d}")))
            }
            _ => Ok(()),
        }
    }

    pub fn finite(&self) -> Option<f64> {
        match *self {
            AugmentedDim::Finite(d) => Some(d),
            AugmentedDim::Infinite => None,
        }
    }

    pub fn from_option(d: Option<f64>) -> Self {
        d.map_or(AugmentedDim::Infinite, AugmentedDim::Finite)
    }
}

impl fmt::Display for AugmentedDim {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AugmentedDim::Finite(d) => write!(f, "{d}"),
            AugmentedDim::Infinite => f.write_str("infinite"),
        }
    }
}

impl std::str::FromStr for AugmentedDim {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "inf" | "infinite" | "infinity" => Ok(AugmentedDim::Infinite),
            other => {
                let d: f64 = other.parse().map_err(|_| Error::param(format!("invalid D '{s}'")))?;
                let d = AugmentedDim::Finite(d);
                d.validate()?;
                Ok(d)
            }
        }
    }
}

impl Serialize for AugmentedDim {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            AugmentedDim::Finite(d) => s.serialize_f64(*d),
            AugmentedDim::Infinite => s.serialize_str("infinite"),
        }
    }
}

impl<'de> Deserialize<'de> for AugmentedDim {
    fn deserialize<De: Deserializer<'de>>(de: De) -> std::result::Result<Self, De::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(de)? {
            Raw::Num(d) => {
                let d = AugmentedDim::Finite(d);
                d.validate().map_err(serde::de::Error::custom)?;
                Ok(d)
            }
            Raw::Text(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

/// Finite empirical data distribution treated as point charges.
#[derive(Debug, Clone)]
pub struct ChargeSet {
    width: usize,
    height: usize,
    pixel_size: f64,
    charges: Vec<Vec<f64>>,
    d: AugmentedDim,
}

impl ChargeSet {
    pub fn new(charges: &[Image], d: AugmentedDim) -> Result<Self> {
        d.validate()?;
        let first = charges.first().ok_or_else(|| Error::param("charge set must not be empty"))?;
        for c in charges {
            first.require_same_grid(c, "charge")?;
        }
        Ok(Self {
            width: first.width(),
            height: first.height(),
            pixel_size: first.pixel_size(),
            charges: charges.iter().map(Image::to_f64).collect(),
            d,
        })
    }

    /// Data dimension N.
    pub fn dim(&self) -> usize {
        self.width * self.height
    }

    pub fn augmented_dim(&self) -> AugmentedDim {
        self.d
    }

    pub fn len(&self) -> usize {
        self.charges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.charges.is_empty()
    }

    pub fn charge(&self, i: usize) -> Image {
        Image::from_f64(self.width, self.height, self.pixel_size, &self.charges[i]).expect("charge grid is valid")
    }

    pub fn raw(&self, i: usize) -> &[f64] {
        &self.charges[i]
    }

    pub fn template(&self) -> Image {
        Image::zeros(self.width, self.height, self.pixel_size)
    }

    fn check(&self, x: &Image) -> Result<()> {
        if x.width() != self.width || x.height() != self.height {
            return Err(Error::ShapeMismatch(format!(
                "input is {}x{}, charges are {}x{}",
                x.width(),
                x.height(),
                self.width,
                self.height
            )));
        }
        Ok(())
    }

    fn sq_dists(&self, x: &[f64]) -> Vec<f64> {
        self.charges.par_iter().map(|c| c.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightMode {
    /// Heavy-tailed kernel with `r = σ√D`.
    #[default]
    Pfgmpp,
    GaussianLimit,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DenoiserMetadata {
    pub n: usize,
    pub d: AugmentedDim,
    pub supports_condition: bool,
}

/// Clean-image predictor `f(x_t, σ, condition)`.
pub trait Denoiser {
    fn metadata(&self) -> DenoiserMetadata;
    fn denoise(&mut self, x: &Image, sigma: f64, condition: Option<&Image>) -> Result<Image>;
}

impl<T: Denoiser + ?Sized> Denoiser for Box<T> {
    fn metadata(&self) -> DenoiserMetadata {
        (**self).metadata()
    }

    fn denoise(&mut self, x: &Image, sigma: f64, condition: Option<&Image>) -> Result<Image> {
        (**self).denoise(x, sigma, condition)
    }
}

/// Posterior mean of the charge set under the perturbation kernel. The
/// condition image is accepted and ignored.
#[derive(Debug, Clone)]
pub struct ExactEmpiricalDenoiser {
    charges: ChargeSet,
    mode: WeightMode,
}

fn normalize_log_weights(mut lw: Vec<f64>) -> Vec<f64> {
    let max = lw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in lw.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    lw.iter_mut().for_each(|v| *v /= sum);
    lw
}

impl ExactEmpiricalDenoiser {
    pub fn new(charges: ChargeSet, mode: WeightMode) -> Self {
        Self { charges, mode }
    }

    pub fn charges(&self) -> &ChargeSet {
        &self.charges
    }

    pub fn mode(&self) -> WeightMode {
        match (self.mode, self.charges.d) {
            (WeightMode::Pfgmpp, AugmentedDim::Infinite) => WeightMode::GaussianLimit,
            (m, _) => m,
        }
    }

    fn log_weights(&self, x: &[f64], sigma: f64) -> Vec<f64> {
        let d2 = self.charges.sq_dists(x);
        match (self.mode(), self.charges.d) {
            (WeightMode::Pfgmpp, AugmentedDim::Finite(d)) => {
                let r2 = sigma * sigma * d;
                let e = 0.5 * (self.charges.dim() as f64 + d);
                d2.into_iter().map(|q| -e * (q / r2).ln_1p()).collect()
            }
            _ => {
                let s2 = 2.0 * sigma * sigma;
                d2.into_iter().map(|q| -q / s2).collect()
            }
        }
    }

    fn check_sigma(sigma: f64) -> Result<()> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::param(format!("sigma must be > 0, got {sigma}")));
        }
        Ok(())
    }

    /// Normalized posterior weights of each charge.
    pub fn weights(&self, x: &Image, sigma: f64) -> Result<Vec<f64>> {
        self.charges.check(x)?;
        Self::check_sigma(sigma)?;
        Ok(normalize_log_weights(self.log_weights(&x.to_f64(), sigma)))
    }

    pub fn denoise_raw(&self, x: &[f64], sigma: f64) -> Vec<f64> {
        let w = normalize_log_weights(self.log_weights(x, sigma));
        let cs = &self.charges.charges;
        let mut out = vec![0.0; x.len()];
        out.par_chunks_mut(1024).enumerate().for_each(|(chunk, o)| {
            let base = chunk * 1024;
            for (j, c) in cs.iter().enumerate() {
                if w[j] == 0.0 {
                    continue;
                }
                for (k, v) in o.iter_mut().enumerate() {
                    *v += w[j] * c[base + k];
                }
            }
        });
        out
    }

    /// Normalized field `√D·E_u/E_r` of the charges at `(x, r = σ√D)`,
    /// computed from the Poisson field directly. In the Gaussian limit this
    /// falls back to `(x − denoise(x))/σ`.
    pub fn field(&self, x: &Image, sigma: f64) -> Result<Vec<f64>> {
        self.charges.check(x)?;
        Self::check_sigma(sigma)?;
        let xv = x.to_f64();
        let d = match (self.mode(), self.charges.d) {
            (WeightMode::Pfgmpp, AugmentedDim::Finite(d)) => d,
            _ => {
                let den = self.denoise_raw(&xv, sigma);
                return Ok(xv.iter().zip(den).map(|(a, b)| (a - b) / sigma).collect());
            }
        };
        let r = sigma * d.sqrt();
        // E(ũ) ∝ Σ_j (ũ − ṽ_j)/‖ũ − ṽ_j‖^{N+D}; scale out the largest term.
        let e = 0.5 * (self.charges.dim() as f64 + d);
        let d2 = self.charges.sq_dists(&xv);
        let logs: Vec<f64> = d2.iter().map(|q| -e * (q + r * r).ln()).collect();
        let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut e_u = vec![0.0; xv.len()];
        let mut e_r = 0.0;
        for (j, l) in logs.iter().enumerate() {
            let s = (l - max).exp();
            for (k, eu) in e_u.iter_mut().enumerate() {
                *eu += s * (xv[k] - self.charges.charges[j][k]);
            }
            e_r += s * r;
        }
        Ok(e_u.into_iter().map(|v| d.sqrt() * v / e_r).collect())
    }
}

impl Denoiser for ExactEmpiricalDenoiser {
    fn metadata(&self) -> DenoiserMetadata {
        DenoiserMetadata { n: self.charges.dim(), d: self.charges.d, supports_condition: false }
    }

    fn denoise(&mut self, x: &Image, sigma: f64, _condition: Option<&Image>) -> Result<Image> {
        self.charges.check(x)?;
        Self::check_sigma(sigma)?;
        x.with_values_f64(&self.denoise_raw(&x.to_f64(), sigma))
    }
}

/// Sample from the kernel's prior at noise level σ around the origin. For
/// finite D the radius follows `r·sqrt(B/(1−B))`, `B ~ Beta(N/2, D/2)`.
pub fn sample_prior(template: &Image, sigma: f64, d: AugmentedDim, seed: u64) -> Result<Image> {
    d.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = template.len();
    let v: Vec<f64> = match d {
        AugmentedDim::Infinite => gaussian(n, &mut rng).into_iter().map(|e| sigma * e).collect(),
        AugmentedDim::Finite(dd) => {
            let beta = Beta::new(n as f64 / 2.0, dd / 2.0).map_err(|e| Error::param(e.to_string()))?;
            let b: f64 = beta.sample(&mut rng);
            let radius = sigma * dd.sqrt() * (b / (1.0 - b)).sqrt();
            unit_direction(n, &mut rng).into_iter().map(|u| radius * u).collect()
        }
    };
    template.with_values_f64(&v)
}

fn slope(x: &[f64], den: &[f64], t: f64) -> Vec<f64> {
    x.iter().zip(den).map(|(a, b)| (a - b) / t).collect()
}

/// One predictor-corrector step from `t` to `t_next`, Euler only when
/// `t_next = 0`.
pub fn heun_step(x: &Image, t: f64, t_next: f64, den: &mut dyn Denoiser, condition: Option<&Image>) -> Result<Image> {
    if !(t > 0.0) || !(t_next >= 0.0) {
        return Err(Error::param(format!("heun step needs t > 0 and t_next >= 0, got {t} -> {t_next}")));
    }
    let xv = x.to_f64();
    let f = den.denoise(x, t, condition)?;
    let d = slope(&xv, &f.to_f64(), t);
    let h = t_next - t;
    let pred: Vec<f64> = xv.iter().zip(&d).map(|(x, d)| x + h * d).collect();
    if t_next == 0.0 {
        return x.with_values_f64(&pred);
    }
    let pred_img = x.with_values_f64(&pred)?;
    let f2 = den.denoise(&pred_img, t_next, condition)?;
    let d2 = slope(&pred_img.to_f64(), &f2.to_f64(), t_next);
    let out: Vec<f64> = xv.iter().zip(d.iter().zip(&d2)).map(|(x, (a, b))| x + 0.5 * h * (a + b)).collect();
    let img = x.with_values_f64(&out)?;
    if img.values().iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite state in heun step".into()));
    }
    Ok(img)
}

/// Heun steps along `times[start_index..]`. Returns the start state followed
/// by every later state.
pub fn sample_trajectory(
    start: &Image,
    schedule: &NoiseSchedule,
    start_index: usize,
    den: &mut dyn Denoiser,
    condition: Option<&Image>,
) -> Result<Vec<Image>> {
    let times = schedule.times();
    if start_index + 1 >= times.len() {
        return Err(Error::param(format!(
            "start index {start_index} leaves no steps in a {}-step schedule",
            times.len()
        )));
    }
    let mut states = vec![start.clone()];
    for i in start_index..times.len() - 1 {
        let next = heun_step(states.last().unwrap(), times[i], times[i + 1], den, condition)
            .map_err(|e| Error::Step { step: i, source: Box::new(e) })?;
        states.push(next);
    }
    Ok(states)
}
