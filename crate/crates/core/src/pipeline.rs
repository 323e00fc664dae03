//! Hijacked Poisson-flow sampling with per-step data consistency and
//! residual fusion.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fbp::{fbp_reconstruct, FbpConfig};
use crate::geometry::{FanBeamGeometry, ViewMask};
use crate::imaging::{Image, Sinogram};
use crate::metrics::{psnr, ssim, DynamicRange, DEFAULT_PSNR_CAP};
use crate::poisson::{heun_step, hijack_init, Denoiser, NoiseSchedule, ScheduleParams};
use crate::tv::{tv_norm, AsdPocsConfig, AsdPocsSolver};

/// Which branch α weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionConvention {
    /// `α·phys + (1−α)·gen`
    #[default]
    #[serde(alias = "alg1")]
    AlphaPhysics,
    /// `α·gen + (1−α)·phys`
    #[serde(alias = "eq25")]
    AlphaGenerative,
}

impl FusionConvention {
    /// α that keeps only the generative branch.
    pub fn pure_generative_alpha(&self) -> f64 {
        match self {
            FusionConvention::AlphaPhysics => 0.0,
            FusionConvention::AlphaGenerative => 1.0,
        }
    }

    /// Weight given to the physics branch for a given α.
    pub fn phys_weight(&self, alpha: f64) -> f64 {
        match self {
            FusionConvention::AlphaPhysics => alpha,
            FusionConvention::AlphaGenerative => 1.0 - alpha,
        }
    }
}

impl std::str::FromStr for FusionConvention {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "alpha_physics" | "alg1" => Ok(FusionConvention::AlphaPhysics),
            "alpha_generative" | "eq25" => Ok(FusionConvention::AlphaGenerative),
            _ => Err(Error::param(format!("unknown fusion convention '{s}' (alpha_physics | alpha_generative)"))),
        }
    }
}

pub fn fuse_residual(gen: &Image, phys: &Image, alpha: f64, convention: FusionConvention) -> Result<Image> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::param(format!("fusion alpha {alpha} outside [0, 1]")));
    }
    gen.require_same_grid(phys, "fusion branches")?;
    let wp = convention.phys_weight(alpha);
    let wg = 1.0 - wp;
    let v: Vec<f64> =
        gen.values().iter().zip(phys.values()).map(|(&g, &p)| wp * f64::from(p) + wg * f64::from(g)).collect();
    gen.with_values_f64(&v)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ResPFConfig {
    pub schedule: ScheduleParams,
    /// Index into the schedule to hijack at; `None` means `n_steps − 2`.
    pub hijack_index: Option<usize>,
    pub fusion_alpha: f64,
    pub fusion_convention: FusionConvention,
    pub dc: AsdPocsConfig,
    pub fbp: FbpConfig,
    pub seed: u64,
}

impl Default for ResPFConfig {
    fn default() -> Self {
        Self {
            schedule: ScheduleParams::default(),
            hijack_index: None,
            fusion_alpha: 0.4,
            fusion_convention: FusionConvention::AlphaPhysics,
            dc: AsdPocsConfig::default(),
            fbp: FbpConfig::default(),
            seed: 0,
        }
    }
}

impl ResPFConfig {
    pub fn tau(&self) -> usize {
        self.hijack_index.unwrap_or(self.schedule.n_steps.saturating_sub(2))
    }

    pub fn validate(&self) -> Result<NoiseSchedule> {
        let schedule = self.schedule.build()?;
        if self.tau() > schedule.n_steps() - 2 {
            return Err(Error::param(format!(
                "hijack index {} must be <= n_steps - 2 = {}",
                self.tau(),
                schedule.n_steps() - 2
            )));
        }
        if !(0.0..=1.0).contains(&self.fusion_alpha) {
            return Err(Error::param(format!("fusion alpha {} outside [0, 1]", self.fusion_alpha)));
        }
        self.dc.validate()?;
        self.fbp.validate()?;
        Ok(schedule)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub t: f64,
    pub t_next: f64,
    pub psnr: Option<f64>,
    /// `‖MA x_fused − y_sp‖₂`
    pub residual: f64,
    pub tv: f64,
}

#[derive(Debug, Clone)]
pub struct ResPFOutput {
    pub fused: Image,
    pub x_sp: Image,
    pub hijack_start: Image,
    pub steps: Vec<StepRecord>,
}

/// Prepared reconstruction for one measured sinogram. Building it runs FBP
/// and the operator setup once; [`ResPF::run`] can then be repeated with
/// different α or denoisers.
#[derive(Debug, Clone)]
pub struct ResPF {
    cfg: ResPFConfig,
    schedule: NoiseSchedule,
    solver: AsdPocsSolver,
    x_sp: Image,
}

fn check_finite(img: &Image, step: usize, what: &str) -> Result<()> {
    if img.values().iter().any(|v| !v.is_finite()) {
        return Err(Error::Step { step, source: Box::new(Error::Numerical(format!("{what} has non-finite pixels"))) });
    }
    Ok(())
}

impl ResPF {
    pub fn new(y_sp: &Sinogram, geom: &FanBeamGeometry, mask: &ViewMask, cfg: ResPFConfig) -> Result<Self> {
        let schedule = cfg.validate()?;
        let solver = AsdPocsSolver::new(geom, mask, y_sp, cfg.dc.clone())?;
        let x_sp = fbp_reconstruct(y_sp, geom, &cfg.fbp)?;
        Ok(Self { cfg, schedule, solver, x_sp })
    }

    pub fn config(&self) -> &ResPFConfig {
        &self.cfg
    }

    pub fn x_sp(&self) -> &Image {
        &self.x_sp
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn hijack_start(&self) -> Result<Image> {
        hijack_init(&self.x_sp, self.schedule.times()[self.cfg.tau()], self.cfg.seed)
    }

    pub fn run(&self, den: &mut dyn Denoiser, reference: Option<&Image>) -> Result<ResPFOutput> {
        self.run_with_alpha(self.cfg.fusion_alpha, den, reference)
    }

    pub fn run_with_alpha(&self, alpha: f64, den: &mut dyn Denoiser, reference: Option<&Image>) -> Result<ResPFOutput> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::param(format!("fusion alpha {alpha} outside [0, 1]")));
        }
        let meta = den.metadata();
        if meta.n != self.x_sp.len() {
            return Err(Error::ShapeMismatch(format!(
                "denoiser dimension {} != image size {}",
                meta.n,
                self.x_sp.len()
            )));
        }
        if let Some(r) = reference {
            self.x_sp.require_same_grid(r, "reference")?;
        }
        let condition = meta.supports_condition.then_some(&self.x_sp);
        let times = self.schedule.times();
        let start = self.hijack_start()?;
        let mut x = start.clone();
        let mut steps = Vec::new();
        for i in self.cfg.tau()..times.len() - 1 {
            let (t, t_next) = (times[i], times[i + 1]);
            let gen =
                heun_step(&x, t, t_next, den, condition).map_err(|e| Error::Step { step: i, source: Box::new(e) })?;
            check_finite(&gen, i, "generative output")?;
            let phys = if self.cfg.dc.n_iterations == 0 && self.cfg.fusion_convention.phys_weight(alpha) == 0.0 {
                gen.clone()
            } else {
                self.solver.run(&gen).map_err(|e| Error::Step { step: i, source: Box::new(e) })?.0
            };
            check_finite(&phys, i, "data-consistent output")?;
            x = fuse_residual(&gen, &phys, alpha, self.cfg.fusion_convention)?;
            let record = StepRecord {
                step: i,
                t,
                t_next,
                psnr: reference.map(|r| psnr(&x, r, None, DEFAULT_PSNR_CAP)).transpose()?,
                residual: self.solver.residual(&x.to_f64()),
                tv: tv_norm(&x, 0.0),
            };
            log::info!(
                "step {i}: t {t:.4} -> {t_next:.4}, residual {:.4e}{}",
                record.residual,
                record.psnr.map_or(String::new(), |p| format!(", psnr {p:.2} dB"))
            );
            steps.push(record);
        }
        Ok(ResPFOutput { fused: x, x_sp: self.x_sp.clone(), hijack_start: start, steps })
    }
}

pub fn respf_reconstruct(
    y_sp: &Sinogram,
    geom: &FanBeamGeometry,
    mask: &ViewMask,
    cfg: &ResPFConfig,
    den: &mut dyn Denoiser,
    reference: Option<&Image>,
) -> Result<ResPFOutput> {
    ResPF::new(y_sp, geom, mask, cfg.clone())?.run(den, reference)
}

pub fn write_step_log(steps: &[StepRecord], path: &Path) -> Result<()> {
    let mut out = String::from("step,t,t_next,psnr,residual,tv\n");
    for s in steps {
        let p = s.psnr.map_or_else(|| "n/a".to_string(), |p| format!("{p:.6}"));
        out.push_str(&format!("{},{},{},{p},{:.9e},{:.9e}\n", s.step, s.t, s.t_next, s.residual, s.tv));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub alpha: f64,
    pub psnr: f64,
    pub ssim: f64,
}

/// `n + 1` evenly spaced values in `[0, 1]`.
pub fn alpha_grid(n: usize) -> Vec<f64> {
    let n = n.max(1);
    (0..=n).map(|i| i as f64 / n as f64).collect()
}

pub fn sweep_alpha(
    pipeline: &ResPF,
    alphas: &[f64],
    den: &mut dyn Denoiser,
    reference: &Image,
) -> Result<Vec<SweepRow>> {
    alphas
        .iter()
        .map(|&alpha| {
            let out = pipeline.run_with_alpha(alpha, den, Some(reference))?;
            Ok(SweepRow {
                alpha,
                psnr: psnr(&out.fused, reference, None, DEFAULT_PSNR_CAP)?,
                ssim: ssim(&out.fused, reference, DynamicRange::FromReference)?.mean,
            })
        })
        .collect()
}

pub fn write_sweep_csv(rows: &[SweepRow], mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "alpha,psnr,ssim")?;
    for r in rows {
        writeln!(out, "{},{:.6},{:.6}", r.alpha, r.psnr, r.ssim)?;
    }
    Ok(())
}

/// Index of a strictly interior maximum of PSNR, if one exists.
pub fn interior_optimum(rows: &[SweepRow]) -> Option<usize> {
    if rows.len() < 3 {
        return None;
    }
    let (first, last) = (rows[0].psnr, rows[rows.len() - 1].psnr);
    (1..rows.len() - 1)
        .filter(|&i| rows[i].psnr > first && rows[i].psnr > last)
        .max_by(|&a, &b| rows[a].psnr.total_cmp(&rows[b].psnr))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::masked_forward;
    use crate::phantom::{gen_random_phantom_corpus, rasterize_phantom};
    use crate::poisson::{sample_trajectory, AugmentedDim, ChargeSet, ExactEmpiricalDenoiser, WeightMode};

    #[test]
    fn fusion_conventions() {
        let gen = Image::filled(3, 2, 1.0, 1.0);
        let phys = Image::filled(3, 2, 1.0, 0.0);
        let at = |a, c| fuse_residual(&gen, &phys, a, c).unwrap().values()[0];
        assert!((at(0.4, FusionConvention::AlphaGenerative) - 0.4).abs() < 1e-7);
        assert!((at(0.4, FusionConvention::AlphaPhysics) - 0.6).abs() < 1e-7);
        let g = Image::from_f64(2, 2, 1.0, &[0.1, 0.7, 0.33, 2.0]).unwrap();
        let p = Image::from_f64(2, 2, 1.0, &[0.9, -0.2, 0.5, 1.0]).unwrap();
        assert_eq!(fuse_residual(&g, &p, 1.0, FusionConvention::AlphaGenerative).unwrap(), g);
        assert_eq!(fuse_residual(&g, &p, 0.0, FusionConvention::AlphaGenerative).unwrap(), p);
        assert_eq!(fuse_residual(&g, &p, 0.0, FusionConvention::AlphaPhysics).unwrap(), g);
        assert_eq!(fuse_residual(&g, &p, 1.0, FusionConvention::AlphaPhysics).unwrap(), p);
        assert!(fuse_residual(&g, &p, 1.5, FusionConvention::AlphaPhysics).is_err());
        assert!(fuse_residual(&g, &Image::zeros(3, 2, 1.0), 0.5, FusionConvention::AlphaPhysics).is_err());
        assert_eq!("alpha_generative".parse::<FusionConvention>().unwrap(), FusionConvention::AlphaGenerative);
        assert!("x".parse::<FusionConvention>().is_err());
    }

    fn small_case() -> (FanBeamGeometry, ViewMask, Image, Sinogram, ExactEmpiricalDenoiser) {
        let n = 24;
        let ps = 200.0 / n as f64;
        let specs = gen_random_phantom_corpus(6, 3, n, n, ps).unwrap();
        let imgs: Vec<Image> = specs.iter().map(|s| rasterize_phantom(s).unwrap()).collect();
        let geom = FanBeamGeometry::desk(n, n, ps, 90).unwrap();
        let mask = ViewMask::uniform(90, 18).unwrap();
        let y = masked_forward(&imgs[0], &geom, &mask).unwrap();
        let den = ExactEmpiricalDenoiser::new(
            ChargeSet::new(&imgs[1..], AugmentedDim::default()).unwrap(),
            WeightMode::Pfgmpp,
        );
        (geom, mask, imgs[0].clone(), y, den)
    }

    #[test]
    fn pure_generative_matches_trajectory() {
        let (geom, mask, _, y, mut den) = small_case();
        for conv in [FusionConvention::AlphaPhysics, FusionConvention::AlphaGenerative] {
            let mut cfg =
                ResPFConfig { hijack_index: Some(10), fusion_convention: conv, seed: 4, ..Default::default() };
            cfg.fusion_alpha = conv.pure_generative_alpha();
            cfg.dc.n_iterations = 0;
            let pipeline = ResPF::new(&y, &geom, &mask, cfg).unwrap();
            let out = pipeline.run(&mut den, None).unwrap();
            let traj =
                sample_trajectory(&pipeline.hijack_start().unwrap(), pipeline.schedule(), 10, &mut den, None).unwrap();
            assert_eq!(&out.fused, traj.last().unwrap());
            assert_eq!(out.steps.len(), 5);
        }
    }

    #[test]
    fn step_accounting_and_determinism() {
        let (geom, mask, truth, y, mut den) = small_case();
        let mut cfg = ResPFConfig { seed: 9, ..Default::default() };
        cfg.dc.n_iterations = 2;
        let a = respf_reconstruct(&y, &geom, &mask, &cfg, &mut den, Some(&truth)).unwrap();
        assert_eq!(a.steps.len(), 1);
        let b = respf_reconstruct(&y, &geom, &mask, &cfg, &mut den, Some(&truth)).unwrap();
        assert_eq!(a.fused, b.fused);
        assert!(a.steps[0].psnr.is_some());
        cfg.hijack_index = Some(0);
        let c = respf_reconstruct(&y, &geom, &mask, &cfg, &mut den, None).unwrap();
        assert_eq!(c.steps.len(), 15);
        assert!(c.steps.iter().all(|s| s.psnr.is_none()));

        cfg.hijack_index = Some(15);
        assert!(ResPF::new(&y, &geom, &mask, cfg.clone()).is_err());
        cfg.hijack_index = None;
        cfg.fusion_alpha = -0.1;
        assert!(ResPF::new(&y, &geom, &mask, cfg).is_err());
    }

    #[test]
    fn data_fidelity_does_not_worsen_over_steps() {
        let (geom, mask, truth, y, mut den) = small_case();
        for seed in [1, 2, 3] {
            let mut cfg = ResPFConfig { seed, hijack_index: Some(0), ..Default::default() };
            cfg.dc.n_iterations = 3;
            let res = respf_reconstruct(&y, &geom, &mask, &cfg, &mut den, Some(&truth)).unwrap();
            let (first, last) = (res.steps[0].residual, res.steps.last().unwrap().residual);
            assert!(last <= first, "seed {seed}: {first} -> {last}");
        }
    }

    #[test]
    fn alpha_sweep_rows_and_csv() {
        let (geom, mask, truth, y, mut den) = small_case();
        let mut cfg = ResPFConfig::default();
        cfg.dc.n_iterations = 2;
        let pipeline = ResPF::new(&y, &geom, &mask, cfg).unwrap();
        let grid = alpha_grid(4);
        assert_eq!(grid, vec![0.0, 0.25, 0.5, 0.75, 1.0]);
        let rows = sweep_alpha(&pipeline, &grid, &mut den, &truth).unwrap();
        assert_eq!(rows.len(), 5);
        let mut buf = Vec::new();
        write_sweep_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("alpha,psnr,ssim\n"));
        assert_eq!(text.lines().count(), 6);

        let mk = |p: &[f64]| {
            p.iter().enumerate().map(|(i, &psnr)| SweepRow { alpha: i as f64, psnr, ssim: 0.0 }).collect::<Vec<_>>()
        };
        assert_eq!(interior_optimum(&mk(&[1.0, 3.0, 2.0, 0.5])), Some(1));
        assert_eq!(interior_optimum(&mk(&[1.0, 2.0, 3.0])), None);
    }

    #[test]
    fn step_log_csv() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("steps.csv");
        let rows = vec![StepRecord { step: 14, t: 0.5, t_next: 0.002, psnr: None, residual: 1.0, tv: 2.0 }];
        write_step_log(&rows, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().next().unwrap(), "step,t,t_next,psnr,residual,tv");
        assert!(text.lines().nth(1).unwrap().starts_with("14,0.5,0.002,n/a,"));
    }

    proptest::proptest! {
        #[test]
        fn fusion_lies_between_branches(
            g in proptest::collection::vec(-10.0f32..10.0, 6),
            p in proptest::collection::vec(-10.0f32..10.0, 6),
            alpha in 0.0f64..=1.0,
        ) {
            let gen = Image::new(3, 2, 1.0, g).unwrap();
            let phys = Image::new(3, 2, 1.0, p).unwrap();
            for conv in [FusionConvention::AlphaPhysics, FusionConvention::AlphaGenerative] {
                let f = fuse_residual(&gen, &phys, alpha, conv).unwrap();
                for ((&v, &a), &b) in f.values().iter().zip(gen.values()).zip(phys.values()) {
                    proptest::prop_assert!(v >= a.min(b) - 1e-5 && v <= a.max(b) + 1e-5);
                }
            }
        }
    }
}
