//! Total variation and the ASD-POCS data-consistency solver.
//!
//! POCS is an ordered-subsets SART sweep: rays are normalized by their length
//! through the grid and pixels by their per-subset column sums. Each outer
//! iteration runs one sweep and then a few normalized TV descent steps whose
//! length is tied to how far the sweep moved the image.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{FanBeamGeometry, SystemMatrix, ViewMask};
use crate::imaging::{Image, Sinogram};

/// TV smoothing constant, either absolute or relative to the dynamic range
/// of the starting image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TvSmoothing {
    Relative(f64),
    Absolute(f64),
}

impl TvSmoothing {
    pub fn resolve(&self, x: &[f64]) -> f64 {
        match *self {
            TvSmoothing::Absolute(e) => e,
            TvSmoothing::Relative(r) => {
                let (lo, hi) = x.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
                let range = hi - lo;
                if range > 0.0 && range.is_finite() {
                    r * range
                } else {
                    r
                }
            }
        }
    }

    fn value(&self) -> f64 {
        match *self {
            TvSmoothing::Relative(v) | TvSmoothing::Absolute(v) => v,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AsdPocsConfig {
    pub n_iterations: usize,
    pub n_subsets: usize,
    pub tv_steps_per_iteration: usize,
    /// μ₀
    pub relaxation: f64,
    pub relaxation_decay: f64,
    /// TV step length as a fraction of the POCS update norm.
    pub tv_step_ratio: f64,
    pub tv_step_decay: f64,
    pub tv_smoothing: TvSmoothing,
    /// Stop once `‖MAx − y‖₂ ≤ data_tolerance`; 0 disables the check.
    pub data_tolerance: f64,
    pub enforce_nonnegativity: bool,
}

impl Default for AsdPocsConfig {
    fn default() -> Self {
        Self {
            n_iterations: 10,
            n_subsets: 8,
            tv_steps_per_iteration: 5,
            relaxation: 1.0,
            relaxation_decay: 0.99,
            tv_step_ratio: 0.2,
            tv_step_decay: 0.97,
            tv_smoothing: TvSmoothing::Relative(1e-6),
            data_tolerance: 0.0,
            enforce_nonnegativity: true,
        }
    }
}

impl AsdPocsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_subsets == 0 {
            return Err(Error::param("n_subsets must be >= 1"));
        }
        if !(self.relaxation > 0.0 && self.relaxation <= 2.0) {
            return Err(Error::param(format!("relaxation {} outside (0, 2]", self.relaxation)));
        }
        for (name, v) in [("relaxation_decay", self.relaxation_decay), ("tv_step_decay", self.tv_step_decay)] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::param(format!("{name} {v} outside (0, 1]")));
            }
        }
        if !(self.tv_step_ratio >= 0.0 && self.tv_step_ratio.is_finite()) {
            return Err(Error::param("tv_step_ratio must be finite and >= 0"));
        }
        let e = self.tv_smoothing.value();
        if !(e > 0.0 && e.is_finite()) {
            return Err(Error::param("tv smoothing must be > 0"));
        }
        if !(self.data_tolerance >= 0.0) {
            return Err(Error::param("data_tolerance must be >= 0"));
        }
        Ok(())
    }
}

/// Disjoint groups of local view positions (indices into the kept views).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubsetPartition {
    groups: Vec<Vec<usize>>,
}

impl SubsetPartition {
    /// Position `p` goes to group `p % n_subsets`.
    pub fn interleaved(n_kept: usize, n_subsets: usize) -> Result<Self> {
        if n_subsets == 0 {
            return Err(Error::param("n_subsets must be >= 1"));
        }
        let mut groups = vec![Vec::new(); n_subsets];
        for p in 0..n_kept {
            groups[p % n_subsets].push(p);
        }
        Ok(Self { groups })
    }

    pub fn groups(&self) -> &[Vec<usize>] {
        &self.groups
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    /// Group contents translated to original view indices.
    pub fn view_indices(&self, mask: &ViewMask) -> Vec<Vec<usize>> {
        self.groups.iter().map(|g| g.iter().map(|&p| mask.indices()[p]).collect()).collect()
    }

    fn check(&self, n_kept: usize) -> Result<()> {
        let mut seen = vec![false; n_kept];
        for &p in self.groups.iter().flatten() {
            if p >= n_kept || seen[p] {
                return Err(Error::param("subset partition is not a partition of the kept views"));
            }
            seen[p] = true;
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::param("subset partition does not cover every kept view"));
        }
        Ok(())
    }
}

fn tv_terms(x: &[f64], w: usize, h: usize, eps: f64, mut f: impl FnMut(usize, f64, f64, f64)) {
    for s in 0..h {
        for m in 0..w {
            let i = s * w + m;
            let a = if s > 0 { x[i] - x[i - w] } else { 0.0 };
            let b = if m > 0 { x[i] - x[i - 1] } else { 0.0 };
            let n = (a * a + b * b + eps * eps).sqrt();
            f(i, a, b, n);
        }
    }
}

pub(crate) fn tv_norm_raw(x: &[f64], w: usize, h: usize, eps: f64) -> f64 {
    let mut sum = 0.0;
    tv_terms(x, w, h, eps, |_, _, _, n| sum += n - eps);
    sum
}

pub(crate) fn tv_gradient_raw(x: &[f64], w: usize, h: usize, eps: f64) -> Vec<f64> {
    let mut g = vec![0.0; x.len()];
    tv_terms(x, w, h, eps, |i, a, b, n| {
        if n == 0.0 {
            return;
        }
        g[i] += (a + b) / n;
        if a != 0.0 {
            g[i - w] -= a / n;
        }
        if b != 0.0 {
            g[i - 1] -= b / n;
        }
    });
    g
}

fn asd_step_raw(x: &mut [f64], w: usize, h: usize, eta: f64, eps: f64) {
    if eta == 0.0 {
        return;
    }
    let g = tv_gradient_raw(x, w, h, eps);
    let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return;
    }
    let s = eta / norm;
    x.iter_mut().zip(&g).for_each(|(x, g)| *x -= s * g);
}

/// Smoothed isotropic TV; `tv_epsilon = 0` gives the exact norm.
pub fn tv_norm(img: &Image, tv_epsilon: f64) -> f64 {
    tv_norm_raw(&img.to_f64(), img.width(), img.height(), tv_epsilon.max(0.0))
}

pub fn tv_gradient(img: &Image, tv_epsilon: f64) -> Result<Image> {
    if !(tv_epsilon > 0.0) {
        return Err(Error::param("tv_gradient needs tv_epsilon > 0"));
    }
    img.with_values_f64(&tv_gradient_raw(&img.to_f64(), img.width(), img.height(), tv_epsilon))
}

/// One normalized TV descent step `x − η g/‖g‖₂`.
pub fn asd_step(x: &Image, eta: f64, tv_epsilon: f64) -> Result<Image> {
    if !(eta >= 0.0) {
        return Err(Error::param("eta must be >= 0"));
    }
    if !(tv_epsilon > 0.0) {
        return Err(Error::param("asd_step needs tv_epsilon > 0"));
    }
    let mut v = x.to_f64();
    asd_step_raw(&mut v, x.width(), x.height(), eta, tv_epsilon);
    x.with_values_f64(&v)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub relaxation: f64,
    pub pocs_change: f64,
    pub tv_step: f64,
    pub residual: f64,
    pub tv: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Default)]
pub struct AsdPocsLog {
    pub initial_residual: f64,
    pub tv_epsilon: f64,
    pub iterations: Vec<IterationRecord>,
    pub stopped_early: bool,
}

impl AsdPocsLog {
    pub fn final_residual(&self) -> f64 {
        self.iterations.last().map_or(self.initial_residual, |r| r.residual)
    }
}

/// Precomputed operator and normalizers for repeated runs against the same
/// measured sinogram.
#[derive(Debug, Clone)]
pub struct AsdPocsSolver {
    matrix: SystemMatrix,
    partition: SubsetPartition,
    y: Vec<f64>,
    row_inv: Vec<f64>,
    col_inv: Vec<Vec<f64>>,
    cfg: AsdPocsConfig,
}

fn inverse_or_zero(v: f64) -> f64 {
    if v > 0.0 {
        1.0 / v
    } else {
        0.0
    }
}

impl AsdPocsSolver {
    pub fn new(geom: &FanBeamGeometry, mask: &ViewMask, y_sp: &Sinogram, cfg: AsdPocsConfig) -> Result<Self> {
        cfg.validate()?;
        let partition = SubsetPartition::interleaved(mask.len(), cfg.n_subsets)?;
        Self::with_partition(geom, mask, y_sp, partition, cfg)
    }

    pub fn with_partition(
        geom: &FanBeamGeometry,
        mask: &ViewMask,
        y_sp: &Sinogram,
        partition: SubsetPartition,
        cfg: AsdPocsConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        if y_sp.n_views() != mask.len() || y_sp.n_detectors() != geom.n_detectors {
            return Err(Error::ShapeMismatch(format!(
                "sinogram is {}x{}, mask and geometry need {}x{}",
                y_sp.n_views(),
                y_sp.n_detectors(),
                mask.len(),
                geom.n_detectors
            )));
        }
        partition.check(mask.len())?;
        for (g, group) in partition.groups().iter().enumerate() {
            if group.is_empty() {
                log::warn!("subset {g} is empty and will be skipped");
            }
        }
        let matrix = SystemMatrix::new(geom, mask)?;
        let n_det = geom.n_detectors;
        let mut row_inv = Vec::with_capacity(mask.len() * n_det);
        for v in 0..mask.len() {
            for d in 0..n_det {
                row_inv.push(inverse_or_zero(matrix.row(v, d).1.iter().sum()));
            }
        }
        let col_inv = partition
            .groups()
            .iter()
            .map(|group| {
                let ones = vec![1.0; group.len() * n_det];
                matrix.adjoint_views(group, &ones).into_iter().map(inverse_or_zero).collect()
            })
            .collect();
        Ok(Self { matrix, partition, y: y_sp.to_f64(), row_inv, col_inv, cfg })
    }

    pub fn config(&self) -> &AsdPocsConfig {
        &self.cfg
    }

    pub fn matrix(&self) -> &SystemMatrix {
        &self.matrix
    }

    /// `‖MAx − y_sp‖₂`
    pub fn residual(&self, x: &[f64]) -> f64 {
        let ax = self.matrix.forward_views(&self.matrix.all_views(), x);
        ax.iter().zip(&self.y).map(|(a, y)| (a - y) * (a - y)).sum::<f64>().sqrt()
    }

    fn sweep_raw(&self, x: &mut [f64], mu: f64) {
        let n_det = self.matrix.n_detectors();
        for (group, col_inv) in self.partition.groups().iter().zip(&self.col_inv) {
            if group.is_empty() {
                continue;
            }
            let mut r = self.matrix.forward_views(group, x);
            for (k, &v) in group.iter().enumerate() {
                for d in 0..n_det {
                    let i = v * n_det + d;
                    let j = k * n_det + d;
                    r[j] = (self.y[i] - r[j]) * self.row_inv[i];
                }
            }
            let upd = self.matrix.adjoint_views(group, &r);
            x.iter_mut().zip(upd.iter().zip(col_inv)).for_each(|(x, (u, c))| *x += mu * u * c);
        }
        if self.cfg.enforce_nonnegativity {
            clamp_nonneg(x);
        }
    }

    /// One ordered-subsets sweep with relaxation `mu`.
    pub fn sweep(&self, x: &Image, mu: f64) -> Result<Image> {
        self.matrix.geometry().check_image(x)?;
        let mut v = x.to_f64();
        self.sweep_raw(&mut v, mu);
        x.with_values_f64(&v)
    }

    pub fn run(&self, x0: &Image) -> Result<(Image, AsdPocsLog)> {
        let geom = self.matrix.geometry();
        geom.check_image(x0)?;
        let (w, h) = (geom.width, geom.height);
        let cfg = &self.cfg;
        let mut x = x0.to_f64();
        let eps = cfg.tv_smoothing.resolve(&x);
        if cfg.enforce_nonnegativity {
            clamp_nonneg(&mut x);
        }
        let mut log = AsdPocsLog { tv_epsilon: eps, ..Default::default() };
        let mut residual = self.residual(&x);
        log.initial_residual = residual;
        for k in 0..cfg.n_iterations {
            if cfg.data_tolerance > 0.0 && residual <= cfg.data_tolerance {
                log.stopped_early = true;
                break;
            }
            let mu = cfg.relaxation * cfg.relaxation_decay.powi(k as i32);
            let before = x.clone();
            self.sweep_raw(&mut x, mu);
            let change = x.iter().zip(&before).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            let eta = cfg.tv_step_ratio * cfg.tv_step_decay.powi(k as i32) * change;
            for _ in 0..cfg.tv_steps_per_iteration {
                asd_step_raw(&mut x, w, h, eta, eps);
            }
            residual = self.residual(&x);
            log.iterations.push(IterationRecord {
                iteration: k,
                relaxation: mu,
                pocs_change: change,
                tv_step: eta,
                residual,
                tv: tv_norm_raw(&x, w, h, eps),
            });
            log::debug!("asd-pocs iter {k}: residual {residual:.4e}, change {change:.3e}");
        }
        if cfg.enforce_nonnegativity {
            clamp_nonneg(&mut x);
        }
        Ok((x0.with_values_f64(&x)?, log))
    }
}

fn clamp_nonneg(x: &mut [f64]) {
    x.iter_mut().filter(|v| **v < 0.0).for_each(|v| *v = 0.0);
}

/// Standalone sweep; builds the operator each call.
pub fn pocs_sweep(
    x: &Image,
    y_sp: &Sinogram,
    geom: &FanBeamGeometry,
    mask: &ViewMask,
    partition: &SubsetPartition,
    mu: f64,
    enforce_nonnegativity: bool,
) -> Result<Image> {
    let cfg =
        AsdPocsConfig { relaxation: mu.clamp(f64::MIN_POSITIVE, 2.0), enforce_nonnegativity, ..Default::default() };
    AsdPocsSolver::with_partition(geom, mask, y_sp, partition.clone(), cfg)?.sweep(x, mu)
}

pub fn asd_pocs_run(
    x0: &Image,
    y_sp: &Sinogram,
    geom: &FanBeamGeometry,
    mask: &ViewMask,
    cfg: &AsdPocsConfig,
) -> Result<Image> {
    Ok(AsdPocsSolver::new(geom, mask, y_sp, cfg.clone())?.run(x0)?.0)
}
