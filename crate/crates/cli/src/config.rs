use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{Context, Result};
use respf_core::phantom::{Keep, NoiseModel};
use respf_core::pipeline::{FusionConvention, ResPFConfig};
use respf_core::poisson::{AugmentedDim, WeightMode};
use respf_core::scenario::{REGRESSION_FOV, REGRESSION_FULL_VIEWS, REGRESSION_KEPT_VIEWS, REGRESSION_SIZE};
use respf_core::tv::AsdPocsConfig;
use serde::{Deserialize, Serialize};

/// Bad flags or config contents. Maps to exit code 2.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

pub fn config_err(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

/// Grid and scan used when simulating new cases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeometryConfig {
    pub size: usize,
    /// Field of view edge, mm.
    pub fov: f64,
    pub views: usize,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        Self { size: REGRESSION_SIZE, fov: REGRESSION_FOV, views: REGRESSION_FULL_VIEWS }
    }
}

impl GeometryConfig {
    pub fn pixel_size(&self) -> f64 {
        self.fov / self.size as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum DenoiserKind {
    #[default]
    Exact,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    pub kind: DenoiserKind,
    /// Directory of `.rspf` images, or a dataset manifest whose `train`
    /// entries supply the charges.
    pub charges: Option<PathBuf>,
    pub augmented_dim: AugmentedDim,
    pub weights: WeightMode,
    /// Server command line, or `tcp://host:port`.
    pub server: Option<String>,
    pub timeout_secs: f64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            kind: DenoiserKind::Exact,
            charges: None,
            augmented_dim: AugmentedDim::default(),
            weights: WeightMode::default(),
            server: None,
            timeout_secs: 10.0,
        }
    }
}

impl DenoiserConfig {
    pub fn timeout(&self) -> Duration {
        Duration::from_secs_f64(self.timeout_secs)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub geometry: GeometryConfig,
    pub keep: Keep,
    pub noise: NoiseModel,
    pub respf: ResPFConfig,
    /// Settings for `--method asdpocs`. ResPF uses `respf.dc`, and FBP
    /// always uses `respf.fbp`.
    pub asdpocs: AsdPocsConfig,
    pub denoiser: DenoiserConfig,
    /// Dataset manifest to reconstruct.
    pub dataset: Option<PathBuf>,
    pub out_dir: PathBuf,
    /// Overrides `respf.seed` and simulation seeds when set.
    pub seed: Option<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            geometry: GeometryConfig::default(),
            keep: Keep::Count(REGRESSION_KEPT_VIEWS),
            noise: NoiseModel::None,
            respf: ResPFConfig::default(),
            asdpocs: AsdPocsConfig::default(),
            denoiser: DenoiserConfig::default(),
            dataset: None,
            out_dir: PathBuf::from("out"),
            seed: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(self.respf.seed)
    }

    /// Checked before any compute runs.
    pub fn validate(&self) -> Result<()> {
        let g = &self.geometry;
        if g.size == 0 || g.views == 0 || !(g.fov > 0.0 && g.fov.is_finite()) {
            return Err(config_err("geometry needs size >= 1, views >= 1 and fov > 0"));
        }
        self.keep.mask(g.views)?;
        self.noise.validate()?;
        self.respf.validate()?;
        self.asdpocs.validate()?;
        self.denoiser.augmented_dim.validate()?;
        if !(self.denoiser.timeout_secs > 0.0 && self.denoiser.timeout_secs.is_finite()) {
            return Err(config_err("denoiser.timeout_secs must be > 0"));
        }
        Ok(())
    }
}

/// ResPF knobs that can be set on the command line.
#[derive(Debug, Clone, Default, clap::Args)]
pub struct ResPFOverrides {
    /// Fusion coefficient.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Which branch alpha weights: `alpha_physics` or `alpha_generative`.
    #[arg(long, value_parser = parse_convention)]
    pub convention: Option<FusionConvention>,
    /// Schedule index to hijack at.
    #[arg(long)]
    pub tau: Option<usize>,
    /// Schedule length.
    #[arg(long)]
    pub steps: Option<usize>,
    /// ASD-POCS iterations per sampling step.
    #[arg(long)]
    pub dc_iters: Option<usize>,
}

impl ResPFOverrides {
    pub fn apply(&self, cfg: &mut ResPFConfig) {
        if let Some(a) = self.alpha {
            cfg.fusion_alpha = a;
        }
        if let Some(c) = self.convention {
            cfg.fusion_convention = c;
        }
        if let Some(t) = self.tau {
            cfg.hijack_index = Some(t);
        }
        if let Some(n) = self.steps {
            cfg.schedule.n_steps = n;
        }
        if let Some(n) = self.dc_iters {
            cfg.dc.n_iterations = n;
        }
    }
}

/// Denoiser selection flags.
#[derive(Debug, Clone, Default, clap::Args)]
pub struct DenoiserOverrides {
    #[arg(long, value_enum)]
    pub denoiser: Option<DenoiserKind>,
    /// Charge images: a directory of `.rspf` files or a dataset manifest.
    #[arg(long)]
    pub charges: Option<PathBuf>,
    /// Augmented dimension, a number or `inf`.
    #[arg(long = "d", value_parser = parse_dim)]
    pub augmented_dim: Option<AugmentedDim>,
    /// Use Gaussian-limit weights for the exact denoiser.
    #[arg(long)]
    pub gaussian_weights: bool,
    /// Remote server command line, or tcp://host:port.
    #[arg(long)]
    pub server: Option<String>,
    /// Remote reply timeout, seconds.
    #[arg(long)]
    pub timeout: Option<f64>,
}

impl DenoiserOverrides {
    pub fn apply(&self, cfg: &mut DenoiserConfig) {
        if let Some(k) = self.denoiser {
            cfg.kind = k;
        }
        if let Some(c) = &self.charges {
            cfg.charges = Some(c.clone());
        }
        if let Some(d) = self.augmented_dim {
            cfg.augmented_dim = d;
        }
        if self.gaussian_weights {
            cfg.weights = WeightMode::GaussianLimit;
        }
        if let Some(s) = &self.server {
            cfg.server = Some(s.clone());
            if self.denoiser.is_none() {
                cfg.kind = DenoiserKind::Remote;
            }
        }
        if let Some(t) = self.timeout {
            cfg.timeout_secs = t;
        }
    }
}

pub fn parse_dim(s: &str) -> Result<AugmentedDim, String> {
    s.parse().map_err(|e: respf_core::Error| e.to_string())
}

pub fn parse_convention(s: &str) -> Result<FusionConvention, String> {
    s.parse().map_err(|e: respf_core::Error| e.to_string())
}

/// `none`, `gaussian:SIGMA` or `poisson:I0[:SCALE]`, where SCALE converts
/// image units to mm⁻¹.
pub fn parse_noise(s: &str) -> Result<NoiseModel, String> {
    let (kind, arg) = s.split_once(':').unwrap_or((s, ""));
    let num = || arg.parse::<f64>().map_err(|_| format!("noise '{s}' needs a numeric argument"));
    let model = match kind {
        "none" if arg.is_empty() => NoiseModel::None,
        "gaussian" => NoiseModel::Gaussian { sigma: num()? },
        "poisson" => {
            let (i0, scale) = arg.split_once(':').unwrap_or((arg, "1"));
            let bad = || format!("noise '{s}' needs poisson:I0[:SCALE]");
            NoiseModel::Poisson {
                incident: i0.parse().map_err(|_| bad())?,
                floor: 1.0,
                scale: scale.parse().map_err(|_| bad())?,
            }
        }
        _ => return Err(format!("unknown noise '{s}' (none | gaussian:SIGMA | poisson:I0[:SCALE])")),
    };
    model.validate().map_err(|e| e.to_string())?;
    Ok(model)
}
