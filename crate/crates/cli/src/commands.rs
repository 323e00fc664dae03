use std::fs::File;
use std::io::{self, BufReader, BufWriter};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{Context, Result};
use clap::{ArgGroup, Args, ValueEnum};
use rayon::prelude::*;
use respf_core::bridge::{
    serve, AddOneDenoiser, Endpoint, IdentityDenoiser, RemoteDenoiser, ServeOptions, PROTOCOL_VERSION,
};
use respf_core::fbp::fbp_reconstruct;
use respf_core::metrics::{nps, psnr, ssim, DynamicRange, Roi, DEFAULT_PSNR_CAP};
use respf_core::phantom::{
    gen_random_phantom_corpus, make_sparse_case, rasterize_phantom, shepp_logan, DatasetManifest, Keep, ManifestEntry,
    NoiseModel, PhantomSpec,
};
use respf_core::pipeline::{
    alpha_grid, interior_optimum, sweep_alpha as run_sweep, write_step_log, write_sweep_csv, ResPF,
};
use respf_core::poisson::{
    sample_prior, sample_trajectory, AugmentedDim, ChargeSet, Denoiser, ExactEmpiricalDenoiser, WeightMode,
};
use respf_core::scenario::{regression_case, REGRESSION_KEPT_VIEWS};
use respf_core::tv::AsdPocsSolver;
use respf_core::{FanBeamGeometry, Image, Sinogram, ViewMask};
use serde::Serialize;

use crate::config::{config_err, parse_dim, parse_noise, DenoiserKind, DenoiserOverrides, ResPFOverrides, RunConfig};
use crate::output::{create_dir, load_charges, load_image, parse_window, save_image, write_csv, write_preview, Window};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PhantomKind {
    SheppLogan,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PreviewFormat {
    Png,
    Pgm,
}

impl PreviewFormat {
    fn ext(self) -> &'static str {
        match self {
            PreviewFormat::Png => "png",
            PreviewFormat::Pgm => "pgm",
        }
    }
}

/// Grid flags shared by the commands that create images.
#[derive(Debug, Clone, Default, Args)]
pub struct GridOverrides {
    /// Image edge length, pixels.
    #[arg(long)]
    pub size: Option<usize>,
    /// Field of view edge, mm.
    #[arg(long)]
    pub fov: Option<f64>,
}

impl GridOverrides {
    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(s) = self.size {
            cfg.geometry.size = s;
        }
        if let Some(f) = self.fov {
            cfg.geometry.fov = f;
        }
    }
}

fn set_seed(cfg: &mut RunConfig, seed: Option<u64>) {
    if let Some(s) = seed {
        cfg.seed = Some(s);
    }
    cfg.respf.seed = cfg.seed();
}

#[derive(Debug, Args)]
pub struct PhantomArgs {
    #[arg(long, value_enum, default_value_t = PhantomKind::SheppLogan)]
    kind: PhantomKind,
    #[command(flatten)]
    grid: GridOverrides,
    #[arg(long)]
    seed: Option<u64>,
    /// Member of the seeded random corpus to draw.
    #[arg(long, default_value_t = 0)]
    index: usize,
    /// Output array file.
    #[arg(long)]
    out: PathBuf,
    /// Also write an 8-bit preview (.png or .pgm).
    #[arg(long)]
    preview: Option<PathBuf>,
    /// Display window LO,HI or `minmax`.
    #[arg(long, value_parser = parse_window, default_value = "0,1")]
    window: Window,
}

pub fn phantom(args: PhantomArgs, mut cfg: RunConfig) -> Result<()> {
    args.grid.apply(&mut cfg);
    set_seed(&mut cfg, args.seed);
    cfg.validate()?;
    let (n, ps) = (cfg.geometry.size, cfg.geometry.pixel_size());
    let spec: PhantomSpec = match args.kind {
        PhantomKind::SheppLogan => shepp_logan(n, n, ps),
        PhantomKind::Random => gen_random_phantom_corpus(args.index + 1, cfg.seed(), n, n, ps)?.swap_remove(args.index),
    };
    let img = rasterize_phantom(&spec)?;
    save_image(&img, &args.out)?;
    if let Some(p) = &args.preview {
        write_preview(&img, args.window, p)?;
    }
    log::info!("wrote {}", args.out.display());
    Ok(())
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("source").required(true).args(["phantom", "corpus", "regression"])))]
pub struct SimulateArgs {
    /// Phantom array file to scan.
    #[arg(long)]
    phantom: Option<PathBuf>,
    /// Generate and scan this many random phantoms.
    #[arg(long)]
    corpus: Option<usize>,
    /// Write the fixed regression case and its charge set.
    #[arg(long)]
    regression: bool,
    #[command(flatten)]
    grid: GridOverrides,
    /// Views in the full scan.
    #[arg(long)]
    views: Option<usize>,
    /// Keep this many uniformly spaced views.
    #[arg(long, conflicts_with = "stride")]
    keep: Option<usize>,
    /// Keep every n-th view.
    #[arg(long)]
    stride: Option<usize>,
    /// none, gaussian:SIGMA or poisson:I0[:SCALE]
    #[arg(long, value_parser = parse_noise)]
    noise: Option<NoiseModel>,
    #[arg(long)]
    seed: Option<u64>,
    /// Case id, or the id prefix for a corpus.
    #[arg(long, default_value = "case")]
    id: String,
    /// Split label; defaults to `train` for a corpus and `test` otherwise.
    #[arg(long)]
    split: Option<String>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

const MANIFEST_NAME: &str = "manifest.json";

pub fn simulate(args: SimulateArgs, mut cfg: RunConfig) -> Result<()> {
    args.grid.apply(&mut cfg);
    set_seed(&mut cfg, args.seed);
    if let Some(v) = args.views {
        cfg.geometry.views = v;
    }
    if let Some(k) = args.keep {
        cfg.keep = Keep::Count(k);
    }
    if let Some(s) = args.stride {
        cfg.keep = Keep::Stride(s);
    }
    if let Some(n) = args.noise {
        cfg.noise = n;
    }
    if let Some(d) = args.out_dir {
        cfg.out_dir = d;
    }
    cfg.validate()?;
    let out = cfg.out_dir.clone();
    create_dir(&out)?;
    let seed = cfg.seed();

    let entries: Vec<ManifestEntry> = if args.regression {
        let case = regression_case()?;
        let charge_dir = out.join("charges");
        create_dir(&charge_dir)?;
        for (i, c) in case.charges.iter().enumerate() {
            save_image(c, &charge_dir.join(format!("charge_{i:03}.rspf")))?;
        }
        let split = args.split.as_deref().unwrap_or("test");
        let keep = Keep::Count(REGRESSION_KEPT_VIEWS);
        vec![make_sparse_case(&case.truth, &case.geom, keep, &NoiseModel::None, seed, &out, "regression", split)?]
    } else if let Some(path) = &args.phantom {
        let img = load_image(path)?;
        let geom = FanBeamGeometry::desk(img.width(), img.height(), img.pixel_size(), cfg.geometry.views)?;
        let split = args.split.as_deref().unwrap_or("test");
        vec![make_sparse_case(&img, &geom, cfg.keep, &cfg.noise, seed, &out, &args.id, split)?]
    } else {
        let n = args.corpus.expect("source group is required");
        let (size, ps) = (cfg.geometry.size, cfg.geometry.pixel_size());
        let specs = gen_random_phantom_corpus(n, seed, size, size, ps)?;
        let geom = FanBeamGeometry::desk(size, size, ps, cfg.geometry.views)?;
        let split = args.split.as_deref().unwrap_or("train");
        specs
            .par_iter()
            .enumerate()
            .map(|(i, spec)| {
                let img = rasterize_phantom(spec)?;
                let id = format!("{}_{i:03}", args.id);
                make_sparse_case(&img, &geom, cfg.keep, &cfg.noise, seed.wrapping_add(i as u64), &out, &id, split)
            })
            .collect::<respf_core::Result<_>>()?
    };

    let manifest_path = out.join(MANIFEST_NAME);
    let mut manifest =
        if manifest_path.exists() { DatasetManifest::load(&manifest_path)? } else { DatasetManifest::new() };
    for e in entries {
        match manifest.entries.iter_mut().find(|m| m.id == e.id) {
            Some(slot) => *slot = e,
            None => manifest.entries.push(e),
        }
    }
    manifest.save(&manifest_path)?;
    println!("{}", manifest_path.display());
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Method {
    Fbp,
    Asdpocs,
    Respf,
}

impl Method {
    fn name(self) -> &'static str {
        match self {
            Method::Fbp => "fbp",
            Method::Asdpocs => "asdpocs",
            Method::Respf => "respf",
        }
    }
}

/// Which cases to run: the built-in regression case or manifest entries.
#[derive(Debug, Clone, Default, Args)]
pub struct CaseSelection {
    /// Dataset manifest; overrides `dataset` from the config file.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Only this case id.
    #[arg(long)]
    case: Option<String>,
    /// Only entries with this split label.
    #[arg(long)]
    split: Option<String>,
    /// Use the built-in regression case and its charge set.
    #[arg(long, conflicts_with = "manifest")]
    regression: bool,
}

struct Case {
    id: String,
    y_sp: Sinogram,
    geom: FanBeamGeometry,
    mask: ViewMask,
    reference: Image,
}

/// Cases plus the charge set that ships with them, if any.
fn select_cases(sel: &CaseSelection, cfg: &RunConfig) -> Result<(Vec<Case>, Option<Vec<Image>>)> {
    if sel.regression {
        let c = regression_case()?;
        let case = Case { id: "regression".into(), y_sp: c.y_sp, geom: c.geom, mask: c.mask, reference: c.truth };
        return Ok((vec![case], Some(c.charges)));
    }
    let path = sel
        .manifest
        .as_ref()
        .or(cfg.dataset.as_ref())
        .ok_or_else(|| config_err("no cases: pass --manifest, --regression or set `dataset` in the config"))?;
    let manifest = DatasetManifest::load(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let cases = manifest
        .entries
        .iter()
        .filter(|e| sel.case.as_ref().is_none_or(|id| &e.id == id))
        .filter(|e| sel.split.as_ref().is_none_or(|s| &e.split == s))
        .map(|e| {
            let c = e.load(base)?;
            Ok(Case { id: c.id, y_sp: c.sparse_sinogram, geom: c.geometry, mask: c.mask, reference: c.phantom })
        })
        .collect::<Result<Vec<_>>>()?;
    if cases.is_empty() {
        return Err(config_err(format!("no matching cases in {}", path.display())));
    }
    Ok((cases, None))
}

enum DenoiserSource {
    Exact(ExactEmpiricalDenoiser),
    Remote { endpoint: Endpoint, timeout: Duration },
}

impl DenoiserSource {
    fn from_config(cfg: &RunConfig, bundled: Option<Vec<Image>>) -> Result<Self> {
        let d = &cfg.denoiser;
        match d.kind {
            DenoiserKind::Exact => {
                let charges = match (&d.charges, bundled) {
                    (Some(p), _) => load_charges(p)?,
                    (None, Some(c)) => c,
                    (None, None) => return Err(config_err("the exact denoiser needs --charges")),
                };
                Ok(Self::Exact(ExactEmpiricalDenoiser::new(ChargeSet::new(&charges, d.augmented_dim)?, d.weights)))
            }
            DenoiserKind::Remote => {
                let server = d.server.as_ref().ok_or_else(|| config_err("the remote denoiser needs --server"))?;
                Ok(Self::Remote { endpoint: Endpoint::parse(server), timeout: d.timeout() })
            }
        }
    }

    fn open(&self) -> Result<Box<dyn Denoiser>> {
        Ok(match self {
            Self::Exact(den) => Box::new(den.clone()),
            Self::Remote { endpoint, timeout } => Box::new(RemoteDenoiser::connect(endpoint, *timeout)?),
        })
    }
}

#[derive(Debug, Serialize)]
struct MetricsRow {
    case_id: String,
    method: &'static str,
    views: usize,
    psnr: f64,
    ssim: f64,
    lpips: &'static str,
}

fn quality(x: &Image, reference: &Image) -> Result<(f64, f64)> {
    Ok((psnr(x, reference, None, DEFAULT_PSNR_CAP)?, ssim(x, reference, DynamicRange::FromReference)?.mean))
}

#[derive(Debug, Args)]
pub struct ReconArgs {
    /// One or more methods, comma separated. All rows go to one `metrics.csv`.
    #[arg(long, value_enum, value_delimiter = ',', default_value = "fbp")]
    method: Vec<Method>,
    #[command(flatten)]
    cases: CaseSelection,
    /// Output directory; overrides `out_dir` from the config file.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Sampler seed.
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    respf: ResPFOverrides,
    #[command(flatten)]
    denoiser: DenoiserOverrides,
    /// Preview display window LO,HI or `minmax`.
    #[arg(long, value_parser = parse_window, default_value = "0,1")]
    window: Window,
    #[arg(long, value_enum, default_value_t = PreviewFormat::Png)]
    preview_format: PreviewFormat,
}

pub fn recon(args: ReconArgs, mut cfg: RunConfig) -> Result<()> {
    set_seed(&mut cfg, args.seed);
    args.respf.apply(&mut cfg.respf);
    args.denoiser.apply(&mut cfg.denoiser);
    if let Some(d) = &args.out_dir {
        cfg.out_dir = d.clone();
    }
    cfg.validate()?;
    let (cases, bundled) = select_cases(&args.cases, &cfg)?;
    let mut methods: Vec<Method> = Vec::new();
    for m in &args.method {
        if !methods.contains(m) {
            methods.push(*m);
        }
    }
    let source =
        if methods.contains(&Method::Respf) { Some(DenoiserSource::from_config(&cfg, bundled)?) } else { None };
    let out = cfg.out_dir.clone();
    create_dir(&out)?;
    let jobs: Vec<(&Case, Method)> = cases.iter().flat_map(|c| methods.iter().map(move |&m| (c, m))).collect();

    let rows = jobs
        .par_iter()
        .map(|&(case, method)| -> Result<MetricsRow> {
            let stem = out.join(format!("{}_{}", case.id, method.name()));
            let x = match method {
                Method::Fbp => fbp_reconstruct(&case.y_sp, &case.geom, &cfg.respf.fbp)?,
                Method::Asdpocs => {
                    let x0 = fbp_reconstruct(&case.y_sp, &case.geom, &cfg.respf.fbp)?;
                    let solver = AsdPocsSolver::new(&case.geom, &case.mask, &case.y_sp, cfg.asdpocs.clone())?;
                    let (x, log) = solver.run(&x0)?;
                    write_csv(&log.iterations, &stem.with_extension("log.csv"))?;
                    x
                }
                Method::Respf => {
                    let mut den = source.as_ref().expect("built for respf").open()?;
                    let pipeline = ResPF::new(&case.y_sp, &case.geom, &case.mask, cfg.respf.clone())?;
                    let res = pipeline
                        .run(den.as_mut(), Some(&case.reference))
                        .with_context(|| format!("case {}", case.id))?;
                    write_step_log(&res.steps, &stem.with_extension("steps.csv"))?;
                    res.fused
                }
            };
            save_image(&x, &stem.with_extension("rspf"))?;
            write_preview(&x, args.window, &stem.with_extension(args.preview_format.ext()))?;
            let (p, s) = quality(&x, &case.reference)?;
            log::info!("{} {}: psnr {p:.2} dB, ssim {s:.4}", case.id, method.name());
            Ok(MetricsRow {
                case_id: case.id.clone(),
                method: method.name(),
                views: case.mask.len(),
                psnr: p,
                ssim: s,
                lpips: "n/a",
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let metrics = out.join("metrics.csv");
    write_csv(&rows, &metrics)?;
    println!("{}", metrics.display());
    Ok(())
}

fn parse_roi(s: &str) -> Result<Roi, String> {
    let v: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse().map_err(|_| format!("bad ROI '{s}', expected ROW,COL,HEIGHT,WIDTH")))
        .collect::<Result<_, _>>()?;
    match v[..] {
        [row, col, height, width] => Ok(Roi { row, col, height, width }),
        _ => Err(format!("bad ROI '{s}', expected ROW,COL,HEIGHT,WIDTH")),
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Reconstruction array file.
    #[arg(long)]
    image: PathBuf,
    /// Reference array file.
    #[arg(long)]
    reference: PathBuf,
    /// Write the noise power spectrum of `image − reference` here.
    #[arg(long)]
    nps: Option<PathBuf>,
    /// NPS region ROW,COL,HEIGHT,WIDTH; the whole image by default.
    #[arg(long, value_parser = parse_roi)]
    roi: Option<Roi>,
    /// CSV file for the metrics row; stdout by default.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct EvalRow {
    image: String,
    psnr: f64,
    ssim: f64,
    lpips: &'static str,
}

pub fn eval(args: EvalArgs) -> Result<()> {
    let x = load_image(&args.image)?;
    let reference = load_image(&args.reference)?;
    let (p, s) = quality(&x, &reference)?;
    if let Some(path) = &args.nps {
        let residual: Vec<f64> =
            x.values().iter().zip(reference.values()).map(|(&a, &b)| f64::from(a) - f64::from(b)).collect();
        let residual = x.with_values_f64(&residual)?;
        let roi = args.roi.unwrap_or_else(|| Roi::full(&residual));
        save_image(&nps(&residual, roi)?, path)?;
    }
    let row = EvalRow { image: args.image.display().to_string(), psnr: p, ssim: s, lpips: "n/a" };
    match &args.out {
        Some(path) => write_csv(&[row], path),
        None => {
            let mut w = csv::Writer::from_writer(io::stdout().lock());
            w.serialize(row)?;
            w.flush()?;
            Ok(())
        }
    }
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    cases: CaseSelection,
    /// Grid points over [0, 1].
    #[arg(long, default_value_t = 11)]
    points: usize,
    /// Output CSV; `<out_dir>/sweep_alpha.csv` by default.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    respf: ResPFOverrides,
    #[command(flatten)]
    denoiser: DenoiserOverrides,
}

pub fn sweep_alpha(args: SweepArgs, mut cfg: RunConfig) -> Result<()> {
    set_seed(&mut cfg, args.seed);
    args.respf.apply(&mut cfg.respf);
    args.denoiser.apply(&mut cfg.denoiser);
    cfg.validate()?;
    if args.points < 2 {
        return Err(config_err("--points must be >= 2"));
    }
    let mut sel = args.cases.clone();
    if sel.manifest.is_none() && cfg.dataset.is_none() {
        sel.regression = true;
    }
    let (mut cases, bundled) = select_cases(&sel, &cfg)?;
    if cases.len() != 1 {
        return Err(config_err(format!("sweep needs exactly one case, {} selected (use --case)", cases.len())));
    }
    let case = cases.remove(0);
    let source = DenoiserSource::from_config(&cfg, bundled)?;
    let pipeline = ResPF::new(&case.y_sp, &case.geom, &case.mask, cfg.respf.clone())?;
    let mut den = source.open()?;
    let rows = run_sweep(&pipeline, &alpha_grid(args.points - 1), den.as_mut(), &case.reference)?;

    let path = args.out.unwrap_or_else(|| cfg.out_dir.join("sweep_alpha.csv"));
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    let file = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
    write_sweep_csv(&rows, BufWriter::new(file)).with_context(|| format!("writing {}", path.display()))?;
    match interior_optimum(&rows) {
        Some(i) => log::info!("interior optimum at alpha {}", rows[i].alpha),
        None => log::info!("no interior optimum; best PSNR at an endpoint"),
    }
    println!("{}", path.display());
    Ok(())
}

#[derive(Debug, Args)]
pub struct FieldDemoArgs {
    /// Charges placed evenly on a circle.
    #[arg(long, default_value_t = 8)]
    n_charges: usize,
    #[arg(long, default_value_t = 1.0)]
    radius: f64,
    /// Number of sampled trajectories.
    #[arg(long, default_value_t = 32)]
    trajectories: usize,
    /// Augmented dimension, a number or `inf`.
    #[arg(long = "d", value_parser = parse_dim)]
    augmented_dim: Option<AugmentedDim>,
    /// Schedule length.
    #[arg(long)]
    steps: Option<usize>,
    /// Seed of the first trajectory; trajectory k uses seed + k.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct ChargeRow {
    index: usize,
    x: f64,
    y: f64,
}

#[derive(Debug, Serialize)]
struct TrajectoryRow {
    seed: u64,
    step: usize,
    t: f64,
    x: f64,
    y: f64,
}

#[derive(Debug, Serialize)]
struct EndpointRow {
    seed: u64,
    nearest: usize,
    distance: f64,
}

fn point(x: f64, y: f64) -> Image {
    Image::from_f64(2, 1, 1.0, &[x, y]).expect("two-pixel image")
}

pub fn field_demo(args: FieldDemoArgs, mut cfg: RunConfig) -> Result<()> {
    set_seed(&mut cfg, args.seed);
    if let Some(n) = args.steps {
        cfg.respf.schedule.n_steps = n;
    }
    if let Some(d) = args.augmented_dim {
        cfg.denoiser.augmented_dim = d;
    }
    if let Some(d) = &args.out_dir {
        cfg.out_dir = d.clone();
    }
    cfg.validate()?;
    if args.n_charges == 0 || args.trajectories == 0 || !(args.radius > 0.0) {
        return Err(config_err("field demo needs charges >= 1, trajectories >= 1 and radius > 0"));
    }
    let pts: Vec<(f64, f64)> = (0..args.n_charges)
        .map(|k| {
            let a = std::f64::consts::TAU * k as f64 / args.n_charges as f64;
            (args.radius * a.cos(), args.radius * a.sin())
        })
        .collect();
    let charges: Vec<Image> = pts.iter().map(|&(x, y)| point(x, y)).collect();
    let d = cfg.denoiser.augmented_dim;
    let den = ExactEmpiricalDenoiser::new(ChargeSet::new(&charges, d)?, WeightMode::Pfgmpp);
    let schedule = cfg.respf.schedule.build()?;
    let base = cfg.seed();

    let runs = (0..args.trajectories as u64)
        .into_par_iter()
        .map(|k| -> Result<(u64, Vec<Image>)> {
            let seed = base.wrapping_add(k);
            let start = sample_prior(&charges[0], schedule.times()[0], d, seed)?;
            let mut den = den.clone();
            Ok((seed, sample_trajectory(&start, &schedule, 0, &mut den, None)?))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut traj = Vec::new();
    let mut ends = Vec::new();
    for (seed, states) in &runs {
        for (step, s) in states.iter().enumerate() {
            let v = s.to_f64();
            traj.push(TrajectoryRow { seed: *seed, step, t: schedule.times()[step], x: v[0], y: v[1] });
        }
        let v = states.last().expect("non-empty trajectory").to_f64();
        let (nearest, distance) = pts
            .iter()
            .map(|&(x, y)| (v[0] - x).hypot(v[1] - y))
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .expect("at least one charge");
        ends.push(EndpointRow { seed: *seed, nearest, distance });
    }
    let out = cfg.out_dir.clone();
    create_dir(&out)?;
    let rows: Vec<ChargeRow> = pts.iter().enumerate().map(|(index, &(x, y))| ChargeRow { index, x, y }).collect();
    write_csv(&rows, &out.join("charges.csv"))?;
    write_csv(&traj, &out.join("trajectories.csv"))?;
    write_csv(&ends, &out.join("endpoints.csv"))?;
    let hit = (0..pts.len()).filter(|i| ends.iter().any(|e| e.nearest == *i)).count();
    let worst = ends.iter().map(|e| e.distance).fold(0.0, f64::max);
    println!("{hit}/{} charges hit, max endpoint distance {worst:.3e}", pts.len());
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Handler {
    Identity,
    AddOne,
    Exact,
}

#[derive(Debug, Args)]
pub struct BridgeServeArgs {
    #[arg(long, value_enum, default_value_t = Handler::Identity)]
    handler: Handler,
    /// Pixel count announced by the test handlers.
    #[arg(long, default_value_t = 64 * 64)]
    n: usize,
    #[command(flatten)]
    denoiser: DenoiserOverrides,
    /// Serve TCP on this address instead of stdio. Port 0 picks a free port;
    /// the bound address is printed to stderr.
    #[arg(long)]
    listen: Option<String>,
    /// With --listen, exit after the first connection closes.
    #[arg(long)]
    once: bool,
    #[arg(long, hide = true, default_value_t = PROTOCOL_VERSION)]
    protocol_version: u32,
}

pub fn bridge_serve(args: BridgeServeArgs, mut cfg: RunConfig) -> Result<()> {
    args.denoiser.apply(&mut cfg.denoiser);
    cfg.validate()?;
    let mut opts = ServeOptions { protocol_version: args.protocol_version, ..ServeOptions::default() };
    let mut den: Box<dyn Denoiser> = match args.handler {
        Handler::Identity => Box::new(IdentityDenoiser { n: args.n }),
        Handler::AddOne => Box::new(AddOneDenoiser { n: args.n }),
        Handler::Exact => {
            let path = cfg.denoiser.charges.as_ref().ok_or_else(|| config_err("the exact handler needs --charges"))?;
            let set = ChargeSet::new(&load_charges(path)?, cfg.denoiser.augmented_dim)?;
            opts.pixel_size = set.template().pixel_size();
            Box::new(ExactEmpiricalDenoiser::new(set, cfg.denoiser.weights))
        }
    };
    let Some(addr) = &args.listen else {
        let (stdin, stdout) = (io::stdin(), io::stdout());
        serve(&mut BufReader::new(stdin.lock()), &mut stdout.lock(), den.as_mut(), opts)?;
        return Ok(());
    };
    let listener = TcpListener::bind(addr).with_context(|| format!("binding {addr}"))?;
    eprintln!("listening on {}", listener.local_addr()?);
    for stream in listener.incoming() {
        let stream = stream?;
        let mut reader = BufReader::new(stream.try_clone()?);
        let mut writer = stream;
        if let Err(e) = serve(&mut reader, &mut writer, den.as_mut(), opts) {
            log::warn!("connection ended: {e}");
        }
        if args.once {
            break;
        }
    }
    Ok(())
}
