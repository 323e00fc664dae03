//! Fixed-seed desk-scale case shared by the regression tests, the CLI and
//! the acceptance suite.

use crate::error::Result;
use crate::geometry::{masked_forward, FanBeamGeometry, ViewMask};
use crate::imaging::{Image, Sinogram};
use crate::phantom::{gen_random_phantom_corpus, near_duplicate, rasterize_phantom, PhantomSpec};
use crate::poisson::{AugmentedDim, ChargeSet, ExactEmpiricalDenoiser, WeightMode};

pub const REGRESSION_SEED: u64 = 7;
pub const REGRESSION_SIZE: usize = 64;
pub const REGRESSION_FULL_VIEWS: usize = 360;
pub const REGRESSION_KEPT_VIEWS: usize = 60;
pub const REGRESSION_CHARGES: usize = 50;
/// Field of view edge, mm.
pub const REGRESSION_FOV: f64 = 200.0;
/// Center and axis jitter of the near-duplicate charge, in pixels.
pub const NEAR_DUPLICATE_JITTER_PX: f64 = 0.1;
pub const NEAR_DUPLICATE_INTENSITY_JITTER: f64 = 0.005;

#[derive(Debug, Clone)]
pub struct RegressionCase {
    pub geom: FanBeamGeometry,
    pub mask: ViewMask,
    pub truth_spec: PhantomSpec,
    pub truth: Image,
    /// Noiseless measurements over the kept views.
    pub y_sp: Sinogram,
    /// The first entry is a near-duplicate of the target.
    pub charges: Vec<Image>,
}

impl RegressionCase {
    pub fn denoiser(&self, d: AugmentedDim, mode: WeightMode) -> Result<ExactEmpiricalDenoiser> {
        Ok(ExactEmpiricalDenoiser::new(ChargeSet::new(&self.charges, d)?, mode))
    }
}

/// Target phantom plus a charge set of one near-duplicate and 49 other random
/// phantoms from the same generator.
pub fn regression_case() -> Result<RegressionCase> {
    build_case(REGRESSION_SEED, REGRESSION_SIZE, REGRESSION_FULL_VIEWS, REGRESSION_KEPT_VIEWS, REGRESSION_CHARGES)
}

pub fn build_case(
    seed: u64,
    size: usize,
    full_views: usize,
    kept_views: usize,
    n_charges: usize,
) -> Result<RegressionCase> {
    let ps = REGRESSION_FOV / size as f64;
    let specs = gen_random_phantom_corpus(n_charges, seed, size, size, ps)?;
    let truth_spec = specs[0].clone();
    let truth = rasterize_phantom(&truth_spec)?;
    let mut charges = vec![rasterize_phantom(&near_duplicate(
        &truth_spec,
        NEAR_DUPLICATE_JITTER_PX * ps,
        NEAR_DUPLICATE_INTENSITY_JITTER,
        seed ^ 0x5eed,
    ))?];
    for s in &specs[1..] {
        charges.push(rasterize_phantom(s)?);
    }
    let geom = FanBeamGeometry::desk(size, size, ps, full_views)?;
    let mask = ViewMask::uniform(full_views, kept_views)?;
    let y_sp = masked_forward(&truth, &geom, &mask)?;
    Ok(RegressionCase { geom, mask, truth_spec, truth, y_sp, charges })
}
