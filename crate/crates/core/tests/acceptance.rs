//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Exits non-zero when a criterion fails unexpectedly. Criteria listed in
//! `KNOWN_RED` still print FAIL but do not fail the run unless `--strict`
//! is passed.

use std::net::TcpListener;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::thread;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use respf_core::bridge::{serve, Endpoint, RemoteDenoiser, ServeOptions, DEFAULT_TIMEOUT};
use respf_core::fbp::{fbp_reconstruct, FbpConfig};
use respf_core::geometry::FanBeamGeometry;
use respf_core::metrics::{psnr, DEFAULT_PSNR_CAP};
use respf_core::pipeline::{
    alpha_grid, fuse_residual, interior_optimum, sweep_alpha, FusionConvention, ResPF, ResPFConfig,
};
use respf_core::poisson::{
    heun_step, make_schedule, sample_prior, sample_trajectory, AugmentedDim, ChargeSet, Denoiser,
    ExactEmpiricalDenoiser, NoiseSchedule, WeightMode,
};
use respf_core::scenario::{regression_case, RegressionCase};
use respf_core::tv::{tv_gradient, tv_norm, AsdPocsConfig, AsdPocsSolver};
use respf_core::{Image, SystemMatrix, ViewMask};

/// Criteria that fail on the desk-scale case for reasons analysed in the
/// project notes.
const KNOWN_RED: &[&str] = &["alpha-sweep-shape"];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

struct Criterion {
    name: &'static str,
    budget: Duration,
    run: Box<dyn Fn() -> Outcome>,
}

fn criterion(name: &'static str, budget_secs: u64, run: impl Fn() -> Outcome + 'static) -> Criterion {
    Criterion { name, budget: Duration::from_secs(budget_secs), run: Box::new(run) }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn max_abs_diff(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| f64::from((x - y).abs())).fold(0.0, f64::max)
}

fn adjoint() -> Outcome {
    let n = 64;
    let geom = FanBeamGeometry::desk(n, n, 200.0 / n as f64, 90).unwrap();
    let a = SystemMatrix::new(&geom, &ViewMask::full(90).unwrap()).unwrap();
    let views = a.all_views();
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let x: Vec<f64> = (0..n * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..90 * a.n_detectors()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let ax = a.forward_views(&views, &x);
        let aty = a.adjoint_views(&views, &y);
        let rel = (dot(&ax, &y) - dot(&x, &aty)).abs() / (norm(&ax) * norm(&y));
        worst = worst.max(rel);
    }
    outcome(worst < 1e-5, format!("max relative gap {worst:.2e} over 20 cases (< 1e-5)"))
}

fn schedule() -> Outcome {
    let s16 = make_schedule(80.0, 0.002, 7.0, 16).unwrap();
    let s3 = make_schedule(80.0, 0.002, 7.0, 3).unwrap();
    let ends = s16.times()[0] == 80.0 && s16.times()[15] == 0.002 && s3.times()[0] == 80.0 && s3.times()[2] == 0.002;
    // (σmax^{1/ρ} + ½(σmin^{1/ρ} − σmax^{1/ρ}))^ρ, evaluated through logs.
    let (hi, lo) = ((80f64.ln() / 7.0).exp(), (0.002f64.ln() / 7.0).exp());
    let oracle = (7.0 * (0.5 * (hi + lo)).ln()).exp();
    let rel = (s3.times()[1] - oracle).abs() / oracle;
    outcome(
        ends && rel < 1e-9,
        format!(
            "endpoints exact: {ends}; midpoint {:.10} vs oracle {oracle:.10}, rel {rel:.1e} (< 1e-9)",
            s3.times()[1]
        ),
    )
}

fn point(x: f64, y: f64) -> Image {
    Image::from_f64(2, 1, 1.0, &[x, y]).unwrap()
}

/// Normalized PFGM++ or Gaussian weights, computed directly.
fn oracle_weights(x: &[f64], charges: &[[f64; 2]], sigma: f64, d: Option<f64>) -> Vec<f64> {
    let logw: Vec<f64> = charges
        .iter()
        .map(|c| {
            let d2 = (x[0] - c[0]).powi(2) + (x[1] - c[1]).powi(2);
            match d {
                Some(d) => -(2.0 + d) / 2.0 * (d2 / (sigma * sigma * d)).ln_1p(),
                None => -d2 / (2.0 * sigma * sigma),
            }
        })
        .collect();
    let m = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logw.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

fn exact_denoiser() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let template = Image::zeros(8, 8, 1.0);
    let c: Vec<f64> = (0..64).map(|_| rng.gen_range(0.0..1.0)).collect();
    let charge = template.with_values_f64(&c).unwrap();
    let mut single = ExactEmpiricalDenoiser::new(
        ChargeSet::new(std::slice::from_ref(&charge), AugmentedDim::Finite(128.0)).unwrap(),
        WeightMode::Pfgmpp,
    );
    let mut id_err = 0.0f64;
    for sigma in [0.01, 1.0, 80.0] {
        let x: Vec<f64> = (0..64).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let out = single.denoise(&template.with_values_f64(&x).unwrap(), sigma, None).unwrap();
        id_err = id_err.max(max_abs_diff(out.values(), charge.values()));
    }

    let (c1, c2) = (point(-0.7, 0.2), point(0.5, -0.4));
    let mut pair = ExactEmpiricalDenoiser::new(
        ChargeSet::new(&[c1, c2], AugmentedDim::Finite(128.0)).unwrap(),
        WeightMode::Pfgmpp,
    );
    let mid = point(-0.1, -0.1);
    let mut sym_err = 0.0f64;
    for sigma in [0.05, 0.5, 5.0] {
        sym_err = sym_err.max(max_abs_diff(pair.denoise(&mid, sigma, None).unwrap().values(), mid.values()));
    }

    let pts: Vec<[f64; 2]> = (0..10).map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]).collect();
    let imgs: Vec<Image> = pts.iter().map(|p| point(p[0], p[1])).collect();
    let d = 1e7;
    let pf = ExactEmpiricalDenoiser::new(ChargeSet::new(&imgs, AugmentedDim::Finite(d)).unwrap(), WeightMode::Pfgmpp);
    let gl =
        ExactEmpiricalDenoiser::new(ChargeSet::new(&imgs, AugmentedDim::Finite(d)).unwrap(), WeightMode::GaussianLimit);
    let (mut limit_diff, mut oracle_diff) = (0.0f64, 0.0f64);
    for sigma in [0.2, 0.5, 1.0, 2.0, 5.0] {
        for i in 0..9 {
            for j in 0..9 {
                let (x, y) = (-2.0 + 0.5 * i as f64, -2.0 + 0.5 * j as f64);
                let xi = point(x, y);
                let wp = pf.weights(&xi, sigma).unwrap();
                let wg = gl.weights(&xi, sigma).unwrap();
                let xv = xi.to_f64();
                let op = oracle_weights(&xv, &pts_f32(&pts), sigma, Some(d));
                let og = oracle_weights(&xv, &pts_f32(&pts), sigma, None);
                for k in 0..10 {
                    limit_diff = limit_diff.max((wp[k] - wg[k]).abs());
                    oracle_diff = oracle_diff.max((wp[k] - op[k]).abs()).max((wg[k] - og[k]).abs());
                }
            }
        }
    }
    outcome(
        id_err < 1e-6 && sym_err < 1e-6 && limit_diff < 1e-3 && oracle_diff < 1e-9,
        format!(
            "single-charge err {id_err:.1e}, two-charge midpoint err {sym_err:.1e}, D=1e7 vs gaussian {limit_diff:.2e} (< 1e-3), vs direct formula {oracle_diff:.1e}"
        ),
    )
}

/// Charge coordinates as stored (f32) so the oracle sees the same points.
fn pts_f32(pts: &[[f64; 2]]) -> Vec<[f64; 2]> {
    pts.iter().map(|p| [f64::from(p[0] as f32), f64::from(p[1] as f32)]).collect()
}

fn heun() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let template = Image::zeros(8, 8, 1.0);
    let c: Vec<f64> = (0..64).map(|_| rng.gen_range(0.0..1.0)).collect();
    let charge = template.with_values_f64(&c).unwrap();
    let cv = charge.to_f64();
    let mut den = ExactEmpiricalDenoiser::new(
        ChargeSet::new(&[charge], AugmentedDim::Finite(128.0)).unwrap(),
        WeightMode::Pfgmpp,
    );
    let schedule = NoiseSchedule::default();
    let t = schedule.times();
    let start = sample_prior(&template, t[0], AugmentedDim::Finite(128.0), 9).unwrap();
    let start =
        template.with_values_f64(&start.to_f64().iter().zip(&cv).map(|(e, c)| c + e).collect::<Vec<_>>()).unwrap();
    let s0 = start.to_f64();
    let closed = |tk: f64| -> Vec<f64> { cv.iter().zip(&s0).map(|(c, s)| c + tk / t[0] * (s - c)).collect() };
    let rel_err = |x: &Image, tk: f64| -> (f64, f64) {
        let want = closed(tk);
        let err: Vec<f64> = x.to_f64().iter().zip(&want).map(|(a, b)| a - b).collect();
        let dev: Vec<f64> = want.iter().zip(&cv).map(|(a, b)| a - b).collect();
        (norm(&err) / norm(&want), norm(&err) / norm(&dev))
    };
    let one = heun_step(&start, t[0], t[1], &mut den, None).unwrap();
    let (one_rel, one_dev) = rel_err(&one, t[1]);
    let chain = sample_trajectory(&start, &schedule, 0, &mut den, None).unwrap();
    let (mut rel, mut dev) = (0.0f64, 0.0f64);
    for (k, s) in chain.iter().enumerate().skip(1) {
        let (r, d) = rel_err(s, t[k]);
        rel = rel.max(r);
        dev = dev.max(d);
    }
    outcome(
        chain.len() == 16 && one_rel.max(rel) < 1e-3 && one_dev.max(dev) < 1e-3,
        format!("one step rel {one_rel:.1e}; 16-step chain max rel {rel:.1e}, relative to remaining displacement {dev:.1e} (< 1e-3)"),
    )
}

const TV_EPS: f64 = 1e-2;

/// TV with forward differences against the upper and left neighbours, in f64.
fn tv_oracle(x: &[f64], w: usize, eps: f64) -> f64 {
    let mut s = 0.0;
    for i in 0..x.len() {
        let (r, c) = (i / w, i % w);
        let a = if r > 0 { x[i] - x[i - w] } else { 0.0 };
        let b = if c > 0 { x[i] - x[i - 1] } else { 0.0 };
        s += (a * a + b * b + eps * eps).sqrt() - eps;
    }
    s
}

fn tv_fd() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    let (w, h) = (16, 16);
    let step = 1e-5;
    let (mut worst, mut norm_gap) = (0.0f64, 0.0f64);
    for _ in 0..50 {
        let v: Vec<f64> = (0..w * h).map(|_| rng.gen_range(0.0..1.0)).collect();
        let img = Image::from_f64(w, h, 1.0, &v).unwrap();
        let x = img.to_f64();
        let g = tv_gradient(&img, TV_EPS).unwrap().to_f64();
        let fd: Vec<f64> = (0..x.len())
            .map(|i| {
                let mut p = x.clone();
                let mut m = x.clone();
                p[i] += step;
                m[i] -= step;
                (tv_oracle(&p, w, TV_EPS) - tv_oracle(&m, w, TV_EPS)) / (2.0 * step)
            })
            .collect();
        let gmax = g.iter().map(|v| v.abs()).fold(0.0, f64::max);
        let emax = g.iter().zip(&fd).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        worst = worst.max(emax / gmax);
        let o = tv_oracle(&x, w, TV_EPS);
        norm_gap = norm_gap.max((tv_norm(&img, TV_EPS) - o).abs() / o);
    }
    outcome(
        worst < 1e-4 && norm_gap < 1e-9,
        format!("max relative gradient error {worst:.2e} over 50 images (< 1e-4), eps {TV_EPS}; norm vs oracle {norm_gap:.1e}"),
    )
}

fn asd_pocs(case: &RegressionCase) -> Outcome {
    let x0 = fbp_reconstruct(&case.y_sp, &case.geom, &FbpConfig::default()).unwrap();
    let cfg = AsdPocsConfig::default();
    let solver = AsdPocsSolver::new(&case.geom, &case.mask, &case.y_sp, cfg.clone()).unwrap();
    let (x, log) = solver.run(&x0).unwrap();
    let (r0, r1) = (solver.residual(&x0.to_f64()), solver.residual(&x.to_f64()));
    let (tv0, tv1) = (tv_norm(&x0, 0.0), tv_norm(&x, 0.0));
    outcome(
        log.iterations.len() == cfg.n_iterations && r1 < r0 && tv1 < tv0,
        format!("{} iterations: residual {r0:.3} -> {r1:.3}, TV {tv0:.2} -> {tv1:.2}", log.iterations.len()),
    )
}

fn mode_coverage() -> Outcome {
    let pts: Vec<(f64, f64)> =
        (0..8).map(|k| (std::f64::consts::TAU * k as f64 / 8.0).sin_cos()).map(|(s, c)| (c, s)).collect();
    let imgs: Vec<Image> = pts.iter().map(|&(x, y)| point(x, y)).collect();
    let d = AugmentedDim::Finite(128.0);
    let mut den = ExactEmpiricalDenoiser::new(ChargeSet::new(&imgs, d).unwrap(), WeightMode::Pfgmpp);
    let schedule = NoiseSchedule::default();
    let mut hits = [0usize; 8];
    let mut worst = 0.0f64;
    for seed in 0..200 {
        let start = sample_prior(&imgs[0], schedule.times()[0], d, seed).unwrap();
        let end = sample_trajectory(&start, &schedule, 0, &mut den, None).unwrap().pop().unwrap().to_f64();
        // Brute-force nearest charge.
        let (k, dist) = pts
            .iter()
            .map(|&(x, y)| ((end[0] - x).powi(2) + (end[1] - y).powi(2)).sqrt())
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap();
        hits[k] += 1;
        worst = worst.max(dist);
    }
    let all = hits.iter().all(|&h| h > 0);
    outcome(worst < 1e-2 && all, format!("max endpoint distance {worst:.2e} (< 1e-2), hits per charge {hits:?}"))
}

fn fbp_psnr(case: &RegressionCase, cfg: &ResPFConfig) -> f64 {
    let x = fbp_reconstruct(&case.y_sp, &case.geom, &cfg.fbp).unwrap();
    psnr(&x, &case.truth, None, DEFAULT_PSNR_CAP).unwrap()
}

fn end_to_end(case: &RegressionCase) -> Outcome {
    let cfg = ResPFConfig::default();
    let pipeline = ResPF::new(&case.y_sp, &case.geom, &case.mask, cfg.clone()).unwrap();
    let mut den = case.denoiser(AugmentedDim::default(), WeightMode::Pfgmpp).unwrap();
    let out = pipeline.run(&mut den, Some(&case.truth)).unwrap();
    let fused = psnr(&out.fused, &case.truth, None, DEFAULT_PSNR_CAP).unwrap();
    let base = fbp_psnr(case, &cfg);
    outcome(
        fused >= base + 3.0,
        format!("fused {fused:.2} dB vs FBP {base:.2} dB, margin {:+.2} dB (>= +3)", fused - base),
    )
}

fn alpha_shape(case: &RegressionCase) -> Outcome {
    let pipeline = ResPF::new(&case.y_sp, &case.geom, &case.mask, ResPFConfig::default()).unwrap();
    let mut den = case.denoiser(AugmentedDim::default(), WeightMode::Pfgmpp).unwrap();
    let rows = sweep_alpha(&pipeline, &alpha_grid(10), &mut den, &case.truth).unwrap();
    let best = rows.iter().max_by(|a, b| a.psnr.total_cmp(&b.psnr)).unwrap();
    let curve: Vec<String> = rows.iter().map(|r| format!("{:.2}", r.psnr)).collect();
    outcome(
        rows.len() == 11 && interior_optimum(&rows).is_some(),
        format!("best alpha {} ({:.2} dB); PSNR over alpha 0..1: {}", best.alpha, best.psnr, curve.join(" ")),
    )
}

fn degenerate(case: &RegressionCase) -> Outcome {
    let mut ok = true;
    let mut notes = Vec::new();
    for conv in [FusionConvention::AlphaPhysics, FusionConvention::AlphaGenerative] {
        let mut cfg = ResPFConfig { fusion_convention: conv, ..ResPFConfig::default() };
        cfg.fusion_alpha = conv.pure_generative_alpha();
        cfg.dc.n_iterations = 0;
        let pipeline = ResPF::new(&case.y_sp, &case.geom, &case.mask, cfg.clone()).unwrap();
        let mut den = case.denoiser(AugmentedDim::default(), WeightMode::Pfgmpp).unwrap();
        let out = pipeline.run(&mut den, None).unwrap();
        let states =
            sample_trajectory(&pipeline.hijack_start().unwrap(), pipeline.schedule(), cfg.tau(), &mut den, None)
                .unwrap();
        let same = out.fused.values() == states.last().unwrap().values();
        ok &= same;
        notes.push(format!("{conv:?} endpoint bit-exact: {same}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut img = || {
        let v: Vec<f64> = (0..256).map(|_| rng.gen_range(-2.0..2.0)).collect();
        Image::from_f64(16, 16, 1.0, &v).unwrap()
    };
    let (gen, phys) = (img(), img());
    let mut fused_ok = true;
    for conv in [FusionConvention::AlphaPhysics, FusionConvention::AlphaGenerative] {
        let g = conv.pure_generative_alpha();
        fused_ok &= fuse_residual(&gen, &phys, g, conv).unwrap().values() == gen.values();
        fused_ok &= fuse_residual(&gen, &phys, 1.0 - g, conv).unwrap().values() == phys.values();
    }
    ok &= fused_ok;
    notes.push(format!("fusion identities at alpha 0 and 1: {fused_ok}"));
    outcome(ok, notes.join(", "))
}

fn bridge(case: &RegressionCase) -> Outcome {
    let cfg = ResPFConfig::default();
    let pipeline = ResPF::new(&case.y_sp, &case.geom, &case.mask, cfg).unwrap();
    let mut local = case.denoiser(AugmentedDim::default(), WeightMode::Pfgmpp).unwrap();
    let a = pipeline.run(&mut local, None).unwrap().fused;

    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    let mut hosted = case.denoiser(AugmentedDim::default(), WeightMode::Pfgmpp).unwrap();
    let opts = ServeOptions { pixel_size: case.truth.pixel_size(), ..ServeOptions::default() };
    let server = thread::spawn(move || {
        let (stream, _) = listener.accept().unwrap();
        let mut reader = std::io::BufReader::new(stream.try_clone().unwrap());
        let mut writer = stream;
        serve(&mut reader, &mut writer, &mut hosted, opts).unwrap();
    });
    let mut remote = RemoteDenoiser::connect(&Endpoint::Tcp(addr), DEFAULT_TIMEOUT).unwrap();
    let b = pipeline.run(&mut remote, None).unwrap().fused;
    remote.shutdown().unwrap();
    server.join().unwrap();
    let diff = max_abs_diff(a.values(), b.values());
    outcome(diff <= 1e-6, format!("max abs diff in-process vs loopback {diff:.1e} (<= 1e-6)"))
}

fn main() {
    let strict = std::env::args().any(|a| a == "--strict");
    let case = regression_case().expect("regression case builds");
    let shared = || case.clone();
    let (c6, c8, c9, c10, c11) = (shared(), shared(), shared(), shared(), shared());
    let criteria = vec![
        criterion("adjoint", 10, adjoint),
        criterion("schedule", 1, schedule),
        criterion("exact-denoiser-oracle", 5, exact_denoiser),
        criterion("heun-exactness", 5, heun),
        criterion("tv-gradient-fd", 30, tv_fd),
        criterion("asd-pocs-regression", 60, move || asd_pocs(&c6)),
        criterion("mode-coverage", 30, mode_coverage),
        criterion("respf-end-to-end", 300, move || end_to_end(&c8)),
        criterion("alpha-sweep-shape", 600, move || alpha_shape(&c9)),
        criterion("degenerate-equivalences", 1, move || degenerate(&c10)),
        criterion("bridge-equivalence", 120, move || bridge(&c11)),
    ];

    let (mut passed, mut unexpected, mut known) = (0, Vec::new(), Vec::new());
    for c in &criteria {
        let t0 = Instant::now();
        let res = catch_unwind(AssertUnwindSafe(|| (c.run)()))
            .unwrap_or_else(|e| outcome(false, format!("panicked: {}", panic_message(&e))));
        let dt = t0.elapsed();
        let in_time = dt <= c.budget;
        let pass = res.pass && in_time;
        let timing = format!("{:.2}s / {}s", dt.as_secs_f64(), c.budget.as_secs());
        let tag = if pass { "PASS" } else { "FAIL" };
        let late = if in_time { "" } else { " [over time budget]" };
        println!("{tag} {:<26} {}  ({timing}){late}", c.name, res.detail);
        if pass {
            passed += 1;
        } else if KNOWN_RED.contains(&c.name) {
            known.push(c.name);
        } else {
            unexpected.push(c.name);
        }
    }
    println!(
        "acceptance: {passed}/{} passed; known red: {}; unexpected failures: {}",
        criteria.len(),
        if known.is_empty() { "none".into() } else { known.join(", ") },
        if unexpected.is_empty() { "none".into() } else { unexpected.join(", ") },
    );
    if !unexpected.is_empty() || (strict && !known.is_empty()) {
        std::process::exit(1);
    }
}

fn panic_message(e: &Box<dyn std::any::Any + Send>) -> String {
    e.downcast_ref::<&str>().map(|s| s.to_string()).or_else(|| e.downcast_ref::<String>().cloned()).unwrap_or_default()
}
