//! Acceptance checks, one test per criterion. Each writes a PASS/FAIL line
//! straight to stderr so the summary survives output capture.

use std::io::Write;
use std::time::Instant;

use planestitch::config::RunConfig;
use planestitch::correlation::{
    correlation_flow, flow_to_homography, fuse, ternary_search_sigma, CorrelationFlow, FeatureMap, SigmaSearchConfig,
};
use planestitch::distortion::{final_scores, global_score};
use planestitch::geometry::{Point2, Quad};
use planestitch::homography::{
    compose, decompose, invert, offsets_to_homography, DecompositionCoefficients, FourPointOffsets, Homography,
};
use planestitch::io::to_json_string;
use planestitch::local::overlap_mae;
use planestitch::losses::{alignment_loss_h, inter_grid_loss, intra_grid_loss, LossWeights, Mesh};
use planestitch::metrics::{mpsnr, mpsnr_masked, mssim, PSNR_CAP};
use planestitch::pipeline::{stitch, Injected};
use planestitch::plane::{normalized_quad, optimize_coefficients, OptimizerConfig, PlaneObjective};
use planestitch::raster::{ImageBuffer, ScalarMap};
use planestitch::synth::{generate, SceneSpec, Texture};
use planestitch::warp::{bidirectional_stitch, tps_solve, WarpedImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn report(n: u32, title: &str, ok: bool, detail: &str) {
    let verdict = if ok { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "criterion {n:>2} {verdict}: {title} ({detail})");
    assert!(ok, "criterion {n} failed: {title} ({detail})");
}

/// CPU seconds consumed by the calling thread.
fn thread_cpu_seconds() -> f64 {
    let mut ts = libc::timespec { tv_sec: 0, tv_nsec: 0 };
    // SAFETY: `ts` is a valid, writable timespec.
    let rc = unsafe { libc::clock_gettime(libc::CLOCK_THREAD_CPUTIME_ID, &mut ts) };
    assert_eq!(rc, 0, "thread CPU clock unavailable");
    ts.tv_sec as f64 + ts.tv_nsec as f64 * 1e-9
}

/// Run `f` on a single rayon worker so all of its work is charged to the
/// one thread whose CPU clock is read.
fn on_one_core<T: Send>(f: impl FnOnce() -> T + Send) -> (T, f64) {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    pool.install(|| {
        let t0 = thread_cpu_seconds();
        let out = f();
        (out, thread_cpu_seconds() - t0)
    })
}

fn random_offsets_h(rng: &mut ChaCha8Rng, w: f64, h: f64, frac: f64) -> Homography {
    let r = frac * w.min(h);
    loop {
        let off = std::array::from_fn(|_| Point2::new(rng.random_range(-r..=r), rng.random_range(-r..=r)));
        if let Ok(hm) = offsets_to_homography(&FourPointOffsets::new(off, w, h)) {
            return hm;
        }
    }
}

fn random_c(rng: &mut ChaCha8Rng) -> DecompositionCoefficients {
    DecompositionCoefficients::new(std::array::from_fn(|_| rng.random()))
}

#[test]
fn c01_decomposition_algebra() {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let cases: Vec<(Homography, DecompositionCoefficients, f64, f64)> = (0..1000)
        .map(|_| {
            let (w, h) = (rng.random_range(64.0..1024.0f64).round(), rng.random_range(64.0..1024.0f64).round());
            (random_offsets_h(&mut rng, w, h, 0.25), random_c(&mut rng), w, h)
        })
        .collect();
    let ((worst, endpoints_exact, failures), secs) = on_one_core(|| {
        let mut worst = 0.0f64;
        let mut exact = true;
        let mut failures = 0;
        for (hm, c, w, h) in &cases {
            match decompose(hm, c, *w, *h) {
                Ok(d) => {
                    let back = compose(&invert(&d.h_ref).unwrap(), &d.h_tgt).unwrap();
                    worst = worst.max(back.relative_diff(hm));
                }
                Err(_) => failures += 1,
            }
            let d0 = decompose(hm, &DecompositionCoefficients::uniform(0.0), *w, *h).unwrap();
            let d1 = decompose(hm, &DecompositionCoefficients::uniform(1.0), *w, *h).unwrap();
            exact &= d0.h_ref == invert(hm).unwrap() && d0.h_tgt == Homography::identity();
            exact &= d1.h_ref == Homography::identity() && d1.h_tgt == *hm;
        }
        (worst, exact, failures)
    });
    report(
        1,
        "decomposition recomposes and hits both endpoints",
        worst < 1e-9 && endpoints_exact && failures == 0 && secs < 1.0,
        &format!("max relative error {worst:.2e}, endpoints exact {endpoints_exact}, {failures} failures, {secs:.3} s"),
    );
}

#[test]
fn c02_similarities_are_distortion_free() {
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let mut worst = 0.0f64;
    for k in 0..1000 {
        let s = rng.random_range(0.3..3.0);
        let a = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
        let (tx, ty) = (rng.random_range(-500.0..500.0), rng.random_range(-500.0..500.0));
        let sim = Homography::similarity(s, a, tx, ty).unwrap();
        // scores are taken on the frame-normalized quad, which is a
        // similarity image of the unit square when the frame is square
        let side = rng.random_range(32.0..1024.0f64).round();
        let q = normalized_quad(&sim, side, side).unwrap();
        let fin = final_scores(&q).unwrap().final_;
        worst = fin.iter().fold(worst, |m, v| m.max(v.abs()));
        // and directly on a similarity image of the unit square
        if k % 2 == 0 {
            let unit = Quad::frame(1.0, 1.0).map(|p| sim.apply(p).unwrap());
            worst = final_scores(&unit).unwrap().final_.iter().fold(worst, |m, v| m.max(v.abs()));
        }
    }
    report(2, "similarity transforms score zero distortion", worst < 1e-9, &format!("max s_final {worst:.2e}"));
}

#[test]
fn c03_rectangle_law() {
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let (a, b): (f64, f64) = (rng.random_range(1e-2..1e3), rng.random_range(1e-2..1e3));
        let expect = (a * a - b * b).abs() / (a * a + b * b);
        worst = worst.max((global_score(&Quad::frame(a, b)).unwrap() - expect).abs());
    }
    report(3, "global score of an a x b rectangle", worst <= 1e-12, &format!("max error {worst:.2e}"));
}

/// Anisotropic scaling with a keystone on a `n x n` frame.
fn anisotropic_perspective(rng: &mut ChaCha8Rng, n: f64) -> Homography {
    loop {
        let sx = if rng.random_bool(0.5) { rng.random_range(1.15..1.45) } else { rng.random_range(0.65..0.85) };
        let sy = if sx > 1.0 { rng.random_range(0.7..0.95) } else { rng.random_range(1.05..1.3) };
        let keystone = rng.random_range(0.05..0.2) * n * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let shear = rng.random_range(-0.08..0.08) * n;
        let c = n / 2.0;
        let frame = Quad::frame(n, n);
        let off: [Point2; 4] = std::array::from_fn(|i| {
            let p = frame.p[i];
            let top = if p.y < c { 1.0 } else { -1.0 };
            let side = if p.x < c { 1.0 } else { -1.0 };
            Point2::new(
                (sx - 1.0) * (p.x - c) + top * side * keystone / 2.0 + shear * (p.y - c) / n,
                (sy - 1.0) * (p.y - c) + rng.random_range(-0.02..0.02) * n,
            )
        });
        if let Ok(h) = offsets_to_homography(&FourPointOffsets::new(off, n, n)) {
            return h;
        }
    }
}

/// Smooth random saliency: a few Gaussian bumps on a floor.
fn blob_saliency(rng: &mut ChaCha8Rng, n: usize) -> ScalarMap {
    let blobs: Vec<(f64, f64, f64, f64)> = (0..4)
        .map(|_| {
            let r = rng.random_range(0.1..0.3) * n as f64;
            (rng.random_range(0.0..n as f64), rng.random_range(0.0..n as f64), r, rng.random_range(0.3..1.0))
        })
        .collect();
    ScalarMap::from_fn(n, n, |x, y| {
        0.05 + blobs
            .iter()
            .map(|&(cx, cy, r, a)| a * (-((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)) / (2.0 * r * r)).exp())
            .sum::<f64>()
    })
}

fn plane_case(rng: &mut ChaCha8Rng, n: usize) -> PlaneObjective {
    let h = anisotropic_perspective(rng, n as f64);
    let (sr, st) = (blob_saliency(rng, n), blob_saliency(rng, n));
    let (sr, st) = planestitch::distortion::normalize_saliency_pair(&sr, &st);
    PlaneObjective::new(&h, &sr, &st).unwrap()
}

/// Lower 2.5% bootstrap quantile of the mean of `d`.
fn bootstrap_lower(d: &[f64], rng: &mut ChaCha8Rng) -> f64 {
    let mut means: Vec<f64> = (0..4000)
        .map(|_| (0..d.len()).map(|_| d[rng.random_range(0..d.len())]).sum::<f64>() / d.len() as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    means[means.len() / 40]
}

#[test]
fn c04_optimal_plane_dominates() {
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    let cfg = OptimizerConfig::default();
    let (mut opt, mut mid, mut refp) = (Vec::new(), Vec::new(), Vec::new());
    let mut per_instance = true;
    for _ in 0..50 {
        let obj = plane_case(&mut rng, 128);
        let o = optimize_coefficients(&obj, &cfg).unwrap().final_loss;
        let m = obj.evaluate(&DecompositionCoefficients::middle_plane()).unwrap();
        let r = obj.evaluate(&DecompositionCoefficients::reference_plane()).unwrap();
        per_instance &= o <= m && o <= r;
        opt.push(o);
        mid.push(m);
        refp.push(r);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let d_mo: Vec<f64> = mid.iter().zip(&opt).map(|(m, o)| m - o).collect();
    let d_rm: Vec<f64> = refp.iter().zip(&mid).map(|(r, m)| r - m).collect();
    let (lo_mo, lo_rm) = (bootstrap_lower(&d_mo, &mut rng), bootstrap_lower(&d_rm, &mut rng));
    report(
        4,
        "optimized plane beats middle beats reference",
        per_instance && lo_mo > 0.0 && lo_rm > 0.0,
        &format!(
            "means {:.4} / {:.4} / {:.4} (reference / middle / optimized), bootstrap lower bounds {lo_rm:.2e} and {lo_mo:.2e}, per-instance {per_instance}",
            mean(&refp),
            mean(&mid),
            mean(&opt)
        ),
    );
}

#[test]
fn c05_optimizer_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(105);
    let cases: Vec<PlaneObjective> = (0..20).map(|_| plane_case(&mut rng, 128)).collect();
    let cfg = OptimizerConfig::default();
    let t0 = Instant::now();
    let mut worst_ratio = 0.0f64;
    for obj in &cases {
        let fin = optimize_coefficients(obj, &cfg).unwrap().final_loss;
        let mut grid_min = f64::INFINITY;
        for k in 0..625 {
            let c = std::array::from_fn(|i| ((k / 5usize.pow(i as u32)) % 5) as f64 / 4.0);
            if let Ok(v) = obj.evaluate(&DecompositionCoefficients::new(c)) {
                grid_min = grid_min.min(v);
            }
        }
        worst_ratio = worst_ratio.max(fin / grid_min);
    }
    let secs = t0.elapsed().as_secs_f64();
    report(
        5,
        "optimizer within 5% of the 625-point grid minimum",
        worst_ratio <= 1.05 && secs < 30.0,
        &format!("worst final/grid ratio {worst_ratio:.4}, {secs:.2} s"),
    );
}

#[test]
fn c06_ternary_search_tolerance() {
    let cfg = SigmaSearchConfig::default();
    let tol = 3.0 * (2.0f64 / 3.0).powi(10) / 2.0;
    let mut rng = ChaCha8Rng::seed_from_u64(106);
    let mut worst = 0.0f64;
    let mut planted = vec![0.7, 0.0, 1.0, -0.99, 1.99];
    planted.extend((0..50).map(|_| rng.random_range(-1.0..2.0)));
    let objectives = |s: f64| -> [Box<dyn Fn(f64) -> f64>; 3] {
        [
            Box::new(move |x: f64| -(x - s) * (x - s)),
            Box::new(move |x: f64| -(x - s).abs()),
            Box::new(move |x: f64| (-(x - s).powi(2) * 4.0).exp()),
        ]
    };
    for &s in &planted {
        for f in &objectives(s) {
            worst = worst.max((ternary_search_sigma(f, &cfg).unwrap().sigma - s).abs());
        }
    }
    // a maximizer on the range boundary is only bracketed, not centred
    let mut edge = true;
    for s in [cfg.range_lo, cfg.range_hi] {
        for f in &objectives(s) {
            let r = ternary_search_sigma(f, &cfg).unwrap();
            let last = r.brackets.last().unwrap();
            edge &= (last[0]..=last[1]).contains(&s) && (r.sigma - s).abs() <= last[1] - last[0];
        }
    }
    report(
        6,
        "ternary search lands within half the final bracket",
        worst <= tol && edge,
        &format!("max |error| {worst:.5} vs {tol:.5} over {} interior optima, boundary optima bracketed {edge}", planted.len()),
    );
}

fn random_flow(rng: &mut ChaCha8Rng, w: usize, h: usize) -> CorrelationFlow {
    let flow = (0..w * h).map(|_| [rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0)]).collect();
    let conf = (0..w * h).map(|_| rng.random()).collect();
    CorrelationFlow::new(w, h, flow, conf).unwrap()
}

#[test]
fn c07_fusion_is_linear() {
    let mut rng = ChaCha8Rng::seed_from_u64(107);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let (a, b) = (random_flow(&mut rng, 9, 7), random_flow(&mut rng, 9, 7));
        let s = rng.random_range(-1.0..=2.0);
        let f = fuse(&a, &b, s).unwrap();
        for i in 0..a.cells() {
            for k in 0..2 {
                worst = worst.max((f.flow[i][k] - ((1.0 - s) * a.flow[i][k] + s * b.flow[i][k])).abs());
            }
        }
    }
    report(7, "fusion is exactly linear in sigma", worst <= 1e-6, &format!("max error {worst:.2e}"));
}

#[test]
fn c08_correlation_matches_exhaustive_argmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(108);
    let mut mismatches = 0;
    for _ in 0..50 {
        let (c, w, h) = (rng.random_range(4..24), rng.random_range(3..12), rng.random_range(3..10));
        let mk = |rng: &mut ChaCha8Rng| {
            let planes: Vec<f64> = (0..c * w * h).map(|_| rng.random_range(-1.0..1.0)).collect();
            FeatureMap::from_planar(c, w, h, &planes).unwrap()
        };
        let (a, b) = (mk(&mut rng), mk(&mut rng));
        let flow = correlation_flow(&a, &b).unwrap();
        for i in 0..w * h {
            // strict `>` keeps the lowest index among ties
            let mut best = (0, f64::NEG_INFINITY);
            for j in 0..w * h {
                let s: f64 = a.cell(i).iter().zip(b.cell(j)).map(|(x, y)| x * y).sum();
                if s > best.1 {
                    best = (j, s);
                }
            }
            let expect = [(best.0 % w) as f64 - (i % w) as f64, (best.0 / w) as f64 - (i / w) as f64];
            mismatches += usize::from(flow.flow[i] != expect);
        }
    }
    report(8, "correlation flow equals brute-force argmax", mismatches == 0, &format!("{mismatches} mismatching cells"));
}

#[test]
fn c09_robust_recovery_with_outliers() {
    let (n, cell) = (512usize, 16usize);
    let g = n / cell;
    let mut successes = 0;
    let mut worst = 0.0f64;
    for trial in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + trial);
        let truth = random_offsets_h(&mut rng, n as f64, n as f64, 0.08);
        let inv = truth.inverse().unwrap();
        let c = cell as f64;
        let flow: Vec<[f64; 2]> = (0..g * g)
            .map(|i| {
                if rng.random::<f64>() < 0.3 {
                    [rng.random_range(-(g as f64)..g as f64), rng.random_range(-(g as f64)..g as f64)]
                } else {
                    let p = Point2::new((i % g) as f64 * c + (c - 1.0) / 2.0, (i / g) as f64 * c + (c - 1.0) / 2.0);
                    let q = inv.apply(p).unwrap();
                    [(q.x - p.x) / c, (q.y - p.y) / c]
                }
            })
            .collect();
        let flow = CorrelationFlow::new(g, g, flow, vec![1.0; g * g]).unwrap();
        if let Ok(h) = flow_to_homography(&flow, cell, trial) {
            let e = h.corner_error(&truth, n as f64, n as f64);
            worst = worst.max(e);
            successes += usize::from(e < 0.5);
        }
    }
    report(
        9,
        "planted homography recovered through 30% outliers",
        successes >= 49,
        &format!("{successes}/50 under 0.5 px, worst {worst:.3} px"),
    );
}

fn scene(seed: u64, noise: f64, size: usize) -> planestitch::synth::Scene {
    let texture = if seed % 2 == 0 { Texture::Perlin } else { Texture::BlobField };
    generate(&SceneSpec { width: size, height: size, texture, h_magnitude: 0.15, noise_std: noise, seed, ..SceneSpec::default() })
        .unwrap()
}

#[test]
fn c10_end_to_end_synthetic() {
    let cfg = RunConfig::default();
    let mut accurate = 0;
    let mut failures = Vec::new();
    let mut worst_time = 0.0f64;
    let mut total_time = 0.0;
    let mut min_ssim = f64::INFINITY;
    for seed in 0..50u64 {
        let sc = scene(seed, 0.01, 512);
        let (out, secs) = on_one_core(|| stitch(&sc.i_ref, &sc.i_tgt, &cfg, &Injected::default(), Some(&sc.h_true)));
        worst_time = worst_time.max(secs);
        total_time += secs;
        match out {
            Ok(o) => accurate += usize::from(o.result.truth.unwrap().corner_error_mean < 2.0),
            Err(e) => failures.push(format!("seed {seed}: {e}")),
        }
        let clean = scene(seed, 0.0, 512);
        match stitch(&clean.i_ref, &clean.i_tgt, &cfg, &Injected::default(), None) {
            Ok(o) => min_ssim = min_ssim.min(o.result.metrics.map_or(f64::NEG_INFINITY, |m| m.mssim)),
            Err(e) => {
                min_ssim = f64::NEG_INFINITY;
                failures.push(format!("noiseless seed {seed}: {e}"));
            }
        }
    }
    report(
        10,
        "zero-shot stitching of synthetic pairs",
        accurate >= 45 && min_ssim >= 0.99 && worst_time < 2.0,
        &format!(
            "{accurate}/50 under 2 px mean corner error, min noiseless mSSIM {min_ssim:.5}, CPU per pair mean {:.2} s max {worst_time:.2} s, errors {failures:?}",
            total_time / 50.0
        ),
    );
}

#[test]
fn c11_alignment_is_plane_independent() {
    let mut rng = ChaCha8Rng::seed_from_u64(111);
    let mut worst = 0.0f64;
    let mut skipped = 0;
    for seed in 0..10u64 {
        let sc = scene(500 + seed, 0.0, 256);
        let base = bidirectional_stitch(&sc.i_ref, &sc.i_tgt, &sc.h_true, &DecompositionCoefficients::reference_plane(), None, None)
            .unwrap();
        let base_mae = overlap_mae(&base).unwrap().unwrap();
        for _ in 0..10 {
            let c = random_c(&mut rng);
            match bidirectional_stitch(&sc.i_ref, &sc.i_tgt, &sc.h_true, &c, None, None) {
                Ok(s) => worst = worst.max((overlap_mae(&s).unwrap().unwrap() - base_mae).abs()),
                Err(_) => skipped += 1,
            }
        }
    }
    report(
        11,
        "overlap error does not depend on the plane",
        worst <= 2.0 / 255.0 && skipped == 0,
        &format!("max MAE deviation {worst:.5} (bound {:.5}), {skipped} degenerate planes", 2.0 / 255.0),
    );
}

#[test]
fn c12_tps_exactness() {
    let mut rng = ChaCha8Rng::seed_from_u64(112);
    let (mut resid, mut bend) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let n = rng.random_range(4..60);
        let src: Vec<Point2> =
            (0..n).map(|_| Point2::new(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0))).collect();
        let dst: Vec<Point2> =
            src.iter().map(|p| Point2::new(p.x + rng.random_range(-20.0..20.0), p.y + rng.random_range(-20.0..20.0))).collect();
        let t = tps_solve(&src, &dst).unwrap();
        for (s, d) in src.iter().zip(&dst) {
            resid = resid.max(t.apply(*s).distance(*d));
        }
        let a: [f64; 6] = std::array::from_fn(|i| match i {
            0 | 4 => rng.random_range(0.7..1.3),
            2 | 5 => rng.random_range(-50.0..50.0),
            _ => rng.random_range(-0.3..0.3),
        });
        let aff: Vec<Point2> =
            src.iter().map(|p| Point2::new(a[0] * p.x + a[1] * p.y + a[2], a[3] * p.x + a[4] * p.y + a[5])).collect();
        bend = bend.max(tps_solve(&src, &aff).unwrap().max_bending_weight());
    }
    report(
        12,
        "thin-plate spline interpolates and reproduces affine maps",
        resid < 1e-6 && bend < 1e-8,
        &format!("max residual {resid:.2e} px, max bending weight {bend:.2e}"),
    );
}

#[test]
fn c13_metrics() {
    let mut rng = ChaCha8Rng::seed_from_u64(113);
    let img = ImageBuffer::from_fn(64, 48, 3, |_, _, _| rng.random());
    let x = WarpedImage::unwarped(&img);
    let self_exact = mssim(&x, &x).unwrap() == 1.0 && mpsnr(&x, &x).unwrap() == PSNR_CAP;

    let mut closed = 0.0f64;
    for delta in [0.5, 0.1, 0.03, 0.01, 1e-3, 1e-4] {
        let a = ImageBuffer::from_fn(40, 30, 1, |_, x, y| 0.2 + 0.5 * ((x * 7 + y * 3) % 11) as f64 / 11.0);
        let b = a.map_values(|v| v + delta);
        let got = mpsnr(&WarpedImage::unwarped(&a), &WarpedImage::unwarped(&b)).unwrap();
        closed = closed.max((got - 20.0 * (1.0 / delta).log10()).abs());
    }

    let mut oracle = 0.0f64;
    for _ in 0..20 {
        let (w, h) = (rng.random_range(8..50), rng.random_range(8..50));
        let a = ScalarMap::from_fn(w, h, |_, _| rng.random());
        let b = ScalarMap::from_fn(w, h, |_, _| rng.random());
        let mask = ScalarMap::from_fn(w, h, |_, _| if rng.random_bool(0.6) { 1.0 } else { 0.0 });
        let (mut se, mut n) = (0.0, 0.0);
        for y in 0..h {
            for x in 0..w {
                if mask.get(x, y) == 1.0 {
                    se += (a.get(x, y) - b.get(x, y)).powi(2);
                    n += 1.0;
                }
            }
        }
        let expect = 20.0 * (1.0 / (se / n).sqrt()).log10();
        oracle = oracle.max((mpsnr_masked(&a, &b, &mask).unwrap() - expect).abs());
    }
    report(
        13,
        "masked metrics match their closed forms",
        self_exact && closed <= 1e-6 && oracle <= 1e-9,
        &format!("self-comparison exact {self_exact}, constant-offset error {closed:.2e} dB, RMSE oracle error {oracle:.2e} dB"),
    );
}

#[test]
fn c14_loss_evaluators() {
    let wts = LossWeights::default();
    let (w, h) = (512.0, 384.0);
    let (u, v) = (wts.u, wts.v);
    let grid = Mesh::uniform(w, h, u, v);
    let zero = intra_grid_loss(&grid, w, h, &wts).unwrap() == 0.0 && inter_grid_loss(&grid, &wts).unwrap() == 0.0;
    let mut worst = 0.0f64;

    // one horizontal edge collapsed to zero length
    let mut m = grid.clone();
    m.points[v] = m.points[v - 1];
    let expect = wts.alpha * w / v as f64 / ((u + 1) * v) as f64;
    worst = worst.max((intra_grid_loss(&m, w, h, &wts).unwrap() - expect).abs());

    // the whole grid shrunk to alpha/2 of its cell size
    let m = grid.map(|p| p.scale(wts.alpha / 2.0));
    let expect = wts.alpha / 2.0 * (w / v as f64 + h / u as f64);
    worst = worst.max((intra_grid_loss(&m, w, h, &wts).unwrap() - expect).abs());

    // top-right corner lifted so the last row edge turns 90 degrees
    let mut m = grid.clone();
    let (cw, ch) = (w / v as f64, h / u as f64);
    m.points[v] = Point2::new(w - cw, -cw);
    let below = Point2::new(w, ch);
    let next = Point2::new(w, 2.0 * ch);
    let e1 = below.sub(m.points[v]);
    let e2 = next.sub(below);
    let col_term = 1.0 - e1.dot(e2) / (e1.norm() * e2.norm());
    let tuples = (u + 1) * (v - 1) + (v + 1) * (u - 1);
    let expect = (1.0 + col_term) / tuples as f64;
    worst = worst.max((inter_grid_loss(&m, &wts).unwrap() - expect).abs());

    // symmetric photometric term for a constant 0.1 offset
    let a = ImageBuffer::filled(32, 24, 1, 0.4);
    let b = ImageBuffer::filled(32, 24, 1, 0.5);
    worst = worst.max((alignment_loss_h(&a, &b, &Homography::identity(), &wts).unwrap() - 0.1).abs());

    report(
        14,
        "grid and alignment losses match closed forms",
        zero && worst <= 1e-12,
        &format!("uniform grid zero {zero}, max closed-form error {worst:.2e}"),
    );
}

#[test]
fn c15_stitch_is_deterministic() {
    let sc = scene(15, 0.01, 256);
    let cfg = RunConfig { seed: 9, ..RunConfig::default() };
    let run = || {
        let out = stitch(&sc.i_ref, &sc.i_tgt, &cfg, &Injected::default(), Some(&sc.h_true)).unwrap();
        (to_json_string(&out.result).unwrap(), out.panorama)
    };
    let (j1, p1) = run();
    let (j2, p2) = run();
    report(15, "identical runs give identical results", j1 == j2 && p1 == p2, &format!("{} bytes of JSON", j1.len()));
}
