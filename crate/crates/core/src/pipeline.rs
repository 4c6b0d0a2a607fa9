//! End-to-end workflows behind the command-line tool.
//!
//! Each workflow is a pure function from decoded inputs to a serializable
//! report, plus a thin `*_files` wrapper that reads and writes the on-disk
//! formats. Reports carry [`SCHEMA_VERSION`] and a `kind` tag.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::correlation::{
    estimate_from_features, DualFeatures, SigmaObjective, SigmaProbe, SigmaSearch, SigmaSearchConfig,
};
use crate::distortion::{normalize_saliency_pair, saliency_map, VertexScores};
use crate::error::{Error, Result};
use crate::geometry::Point2;
use crate::homography::{invert, Decomposition, DecompositionCoefficients, Homography};
use crate::io;
use crate::local::{local_refine, LocalStatus};
use crate::losses::{alignment_loss_h, alignment_loss_tps, inter_grid_loss, intra_grid_loss, LossBreakdown, Mesh};
use crate::metrics::{self, aggregate, bucket, render_table, AggregateRow, BucketMode, MetricReport, SsimWindow};
use crate::plane::{optimize_coefficients, OptimizerTrace, PlaneObjective};
use crate::raster::{ImageBuffer, ScalarMap};
use crate::refine::{refine_homography, Refinement};
use crate::synth::{generate, SceneSpec};
use crate::warp::{bidirectional_stitch, composite_average, warp_image_h, warp_with, Canvas, Stitched, TpsTransform, WarpedImage};

pub const SCHEMA_VERSION: u32 = 1;

/// Externally computed inputs that replace built-in stand-ins.
#[derive(Debug, Clone, Default)]
pub struct Injected {
    pub features: Option<DualFeatures>,
    /// Raw saliency of the reference and target views.
    pub saliency: Option<(ScalarMap, ScalarMap)>,
}

impl Injected {
    /// Load the four feature tensors (`a_ref`, `a_tgt`, `b_ref`, `b_tgt`)
    /// and/or the two saliency tensors.
    pub fn load(features: Option<[&Path; 4]>, saliency: Option<[&Path; 2]>) -> Result<Self> {
        let features = match features {
            Some([ar, at, br, bt]) => Some(DualFeatures {
                a_ref: io::read_feature_map(ar)?,
                a_tgt: io::read_feature_map(at)?,
                b_ref: io::read_feature_map(br)?,
                b_tgt: io::read_feature_map(bt)?,
            }),
            None => None,
        };
        let saliency = match saliency {
            Some([r, t]) => Some((io::read_scalar_map(r)?, io::read_scalar_map(t)?)),
            None => None,
        };
        Ok(Self { features, saliency })
    }
}

/// Give a grey image three channels when the other view is colour.
fn match_channels(a: &ImageBuffer, b: &ImageBuffer) -> Result<(ImageBuffer, ImageBuffer)> {
    if !a.same_dims(b) {
        return Err(Error::DimensionMismatch(format!(
            "reference {}x{} vs target {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    let widen = |img: &ImageBuffer, n: usize| {
        if img.channels() == n {
            img.clone()
        } else {
            ImageBuffer::from_fn(img.width(), img.height(), n, |_, x, y| img.get(0, x, y))
        }
    };
    match (a.channels(), b.channels()) {
        (x, y) if x == y => Ok((a.clone(), b.clone())),
        (1, n) => Ok((widen(a, n), b.clone())),
        (n, 1) => Ok((a.clone(), widen(b, n))),
        (x, y) => Err(Error::DimensionMismatch(format!("{x} vs {y} channels"))),
    }
}

/// Coarse correlation estimate and its optional photometric refinement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalEstimate {
    pub h_coarse: Homography,
    pub sigma: f64,
    pub objective: f64,
    pub search: SigmaSearch,
    pub probes: Vec<SigmaProbe>,
    pub refinement: Option<Refinement>,
    /// Final target-to-reference homography.
    pub h: Homography,
}

pub fn estimate_global(i_ref: &ImageBuffer, i_tgt: &ImageBuffer, cfg: &RunConfig, injected: &Injected) -> Result<GlobalEstimate> {
    let extracted;
    let features = match &injected.features {
        Some(f) => f,
        None => {
            extracted = DualFeatures::extract(i_ref, i_tgt, cfg.cell)?;
            &extracted
        }
    };
    let est = estimate_from_features(features, i_ref, i_tgt, &cfg.sigma, cfg.cell, cfg.seed, &cfg.loss)?;
    let refinement = if cfg.refine_global { Some(refine_homography(i_ref, i_tgt, &est.h, &cfg.refine)?) } else { None };
    let h = refinement.as_ref().map_or(est.h, |r| r.h);
    Ok(GlobalEstimate {
        h_coarse: est.h,
        sigma: est.sigma,
        objective: est.objective,
        search: est.search,
        probes: est.probes,
        refinement,
        h,
    })
}

/// Jointly normalized saliency of both views.
pub fn saliency_pair(i_ref: &ImageBuffer, i_tgt: &ImageBuffer, cfg: &RunConfig, injected: &Injected) -> Result<(ScalarMap, ScalarMap)> {
    let (a, b) = match &injected.saliency {
        Some((a, b)) => {
            if !a.same_dims(b) || a.width() != i_ref.width() || a.height() != i_ref.height() {
                return Err(Error::DimensionMismatch(format!(
                    "saliency {}x{} and {}x{} for {}x{} images",
                    a.width(),
                    a.height(),
                    b.width(),
                    b.height(),
                    i_ref.width(),
                    i_ref.height()
                )));
            }
            (a.clone(), b.clone())
        }
        None => (saliency_map(i_ref, &cfg.saliency)?, saliency_map(i_tgt, &cfg.saliency)?),
    };
    Ok(normalize_saliency_pair(&a, &b))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlaneReport {
    pub c_dec: [f64; 4],
    pub loss: f64,
    pub trace: OptimizerTrace,
    pub scores_ref: VertexScores,
    pub scores_tgt: VertexScores,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalReport {
    pub status: LocalStatus,
    pub matched: usize,
    pub mae_before: f64,
    pub mae_after: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthReport {
    pub h_true: Homography,
    pub corner_error_mean: f64,
    pub corner_error_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StitchResult {
    pub schema_version: u32,
    pub kind: String,
    pub width: usize,
    pub height: usize,
    pub config: RunConfig,
    pub global: GlobalEstimate,
    pub h: Homography,
    pub sigma: f64,
    pub plane: PlaneReport,
    pub h_ref: Homography,
    pub h_tgt: Homography,
    pub canvas: Canvas,
    pub local: Option<LocalReport>,
    pub loss: LossBreakdown,
    /// Overlap metrics; `None` when the views do not overlap.
    pub metrics: Option<MetricReport>,
    pub truth: Option<TruthReport>,
}

pub struct StitchOutput {
    pub result: StitchResult,
    pub stitched: Stitched,
    pub panorama: ImageBuffer,
    pub tps: Option<(TpsTransform, TpsTransform)>,
}

/// Target frame -> reference frame through the global warps and the
/// optional splines: `h_ref^-1 . T_ref^-1 . T_tgt . h_tgt`.
fn final_forward(d: &Decomposition, tps: Option<&(TpsTransform, TpsTransform)>) -> Result<impl Fn(Point2) -> Option<Point2>> {
    let ref_inv = invert(&d.h_ref)?;
    let h_tgt = d.h_tgt;
    let splines = match tps {
        Some((r, t)) => Some((r.inverse()?, t.clone())),
        None => None,
    };
    Ok(move |p: Point2| {
        let mut q = h_tgt.apply(p)?;
        if let Some((r_inv, t)) = &splines {
            q = r_inv.apply(t.apply(q));
        }
        ref_inv.apply(q)
    })
}

/// Backward form of [`final_forward`]: reference frame -> target frame.
fn final_backward(d: &Decomposition, tps: Option<&(TpsTransform, TpsTransform)>) -> Result<impl Fn(Point2) -> Option<Point2> + Sync> {
    let tgt_inv = invert(&d.h_tgt)?;
    let h_ref = d.h_ref;
    let splines = match tps {
        Some((r, t)) => Some((r.clone(), t.inverse()?)),
        None => None,
    };
    Ok(move |p: Point2| {
        let mut q = h_ref.apply(p)?;
        if let Some((r, t_inv)) = &splines {
            q = t_inv.apply(r.apply(q));
        }
        tgt_inv.apply(q)
    })
}

/// Every loss term of a finished stitch.
pub fn loss_breakdown(
    i_ref: &ImageBuffer,
    i_tgt: &ImageBuffer,
    h: &Homography,
    d: &Decomposition,
    tps: Option<&(TpsTransform, TpsTransform)>,
    coef: f64,
    cfg: &RunConfig,
) -> Result<LossBreakdown> {
    let w = &cfg.loss;
    let (fw, fh) = (i_ref.width() as f64, i_ref.height() as f64);
    let align_h = alignment_loss_h(i_ref, i_tgt, h, w)?;
    let frame = Canvas::frame(i_ref.width(), i_ref.height());
    let warped = warp_with(i_tgt, &frame, final_backward(d, tps)?);
    let tps_align = alignment_loss_tps(i_ref, &warped, w)?;
    let fwd = final_forward(d, tps)?;
    let mesh = Mesh::uniform(fw, fh, w.u, w.v);
    let mapped: Option<Vec<Point2>> = mesh.points.iter().map(|&p| fwd(p)).collect();
    let mapped = mapped.ok_or_else(|| Error::PointAtInfinity("mesh vertex of the target grid".into()))?;
    let mesh = Mesh::new(mesh.rows, mesh.cols, mapped)?;
    Ok(LossBreakdown {
        align_h,
        align_tps: tps_align.value,
        tps_empty_overlap: tps_align.empty_overlap,
        shape_intra: intra_grid_loss(&mesh, fw, fh, w)?,
        shape_inter: inter_grid_loss(&mesh, w)?,
        coef,
        total: 0.0,
    }
    .finish(w))
}

/// Full pipeline on decoded images.
pub fn stitch(
    i_ref: &ImageBuffer,
    i_tgt: &ImageBuffer,
    cfg: &RunConfig,
    injected: &Injected,
    truth: Option<&Homography>,
) -> Result<StitchOutput> {
    cfg.validate()?;
    let (i_ref, i_tgt) = match_channels(i_ref, i_tgt)?;
    let (w, h) = (i_ref.width(), i_ref.height());
    let global = estimate_global(&i_ref, &i_tgt, cfg, injected)?;
    let hm = global.h;

    let (s_ref, s_tgt) = saliency_pair(&i_ref, &i_tgt, cfg, injected)?;
    let objective = PlaneObjective::new(&hm, &s_ref, &s_tgt)?;
    let trace = optimize_coefficients(&objective, &cfg.optimizer)?;
    let c = trace.coefficients();
    let eval = objective.evaluate_detailed(&c)?;

    let (stitched, tps, local) = if cfg.local {
        let out = local_refine(&i_ref, &i_tgt, &hm, &c, cfg.loss.u + 1, cfg.loss.v + 1, &cfg.local_tps)?;
        let report = LocalReport { status: out.status, matched: out.matched, mae_before: out.mae_before, mae_after: out.mae_after };
        let tps = out.tps_ref.zip(out.tps_tgt);
        (out.stitched, tps, Some(report))
    } else {
        (bidirectional_stitch(&i_ref, &i_tgt, &hm, &c, None, None)?, None, None)
    };
    let panorama = composite_average(&stitched.reference, &stitched.target)?;
    let loss = loss_breakdown(&i_ref, &i_tgt, &hm, &stitched.decomposition, tps.as_ref(), trace.final_loss, cfg)?;
    let metrics = match metrics::report(&stitched.reference, &stitched.target, SsimWindow::Uniform) {
        Ok(r) => Some(r),
        Err(Error::EmptyOverlap) => None,
        Err(e) => return Err(e),
    };
    let truth = truth.map(|t| TruthReport {
        h_true: *t,
        corner_error_mean: hm.mean_corner_error(t, w as f64, h as f64),
        corner_error_max: hm.corner_error(t, w as f64, h as f64),
    });
    let result = StitchResult {
        schema_version: SCHEMA_VERSION,
        kind: "stitch".into(),
        width: w,
        height: h,
        config: cfg.clone(),
        sigma: global.sigma,
        h: hm,
        global,
        plane: PlaneReport {
            c_dec: c.c,
            loss: eval.loss,
            trace,
            scores_ref: eval.scores_ref,
            scores_tgt: eval.scores_tgt,
        },
        h_ref: stitched.decomposition.h_ref,
        h_tgt: stitched.decomposition.h_tgt,
        canvas: stitched.canvas,
        local,
        loss,
        metrics,
        truth,
    };
    Ok(StitchOutput { result, stitched, panorama, tps })
}

/// Files written by [`stitch_files`], relative to the output directory.
pub const STITCH_OUTPUTS: [&str; 6] =
    ["panorama.png", "warped_ref.png", "warped_tgt.png", "mask_ref.png", "mask_tgt.png", "result.json"];

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn write_stitch(out_dir: &Path, out: &StitchOutput) -> Result<()> {
    create_dir(out_dir)?;
    io::write_image(&out_dir.join(STITCH_OUTPUTS[0]), &out.panorama)?;
    io::write_image(&out_dir.join(STITCH_OUTPUTS[1]), &out.stitched.reference.image)?;
    io::write_image(&out_dir.join(STITCH_OUTPUTS[2]), &out.stitched.target.image)?;
    io::write_mask(&out_dir.join(STITCH_OUTPUTS[3]), &out.stitched.reference.mask)?;
    io::write_mask(&out_dir.join(STITCH_OUTPUTS[4]), &out.stitched.target.mask)?;
    io::write_json(&out_dir.join(STITCH_OUTPUTS[5]), &out.result)
}

/// Read both images (and an optional ground-truth homography), stitch,
/// and write every output.
pub fn stitch_files(
    ref_path: &Path,
    tgt_path: &Path,
    out_dir: &Path,
    cfg: &RunConfig,
    injected: &Injected,
    truth: Option<&Path>,
) -> Result<StitchResult> {
    cfg.validate()?;
    let i_ref = io::read_image(ref_path)?;
    let i_tgt = io::read_image(tgt_path)?;
    let truth = truth.map(io::read_json::<Homography>).transpose()?;
    let out = stitch(&i_ref, &i_tgt, cfg, injected, truth.as_ref())?;
    write_stitch(out_dir, &out)?;
    Ok(out.result)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecomposeResult {
    pub schema_version: u32,
    pub kind: String,
    pub h: Homography,
    pub width: usize,
    pub height: usize,
    pub c_dec: [f64; 4],
    pub h_ref: Homography,
    pub h_tgt: Homography,
    pub scores_ref: VertexScores,
    pub scores_tgt: VertexScores,
    pub loss: f64,
    pub trace: Option<OptimizerTrace>,
}

/// Split `h` at fixed coefficients or, with `c = None`, at optimized ones.
/// Without saliency the loss weights every pixel equally.
pub fn decompose_h(
    h: &Homography,
    width: usize,
    height: usize,
    c: Option<DecompositionCoefficients>,
    saliency: Option<(ScalarMap, ScalarMap)>,
    cfg: &RunConfig,
) -> Result<DecomposeResult> {
    cfg.validate()?;
    if width < 2 || height < 2 {
        return Err(Error::ImageTooSmall(format!("{width}x{height} frame")));
    }
    let objective = match &saliency {
        Some((a, b)) => {
            if a.width() != width || a.height() != height {
                return Err(Error::DimensionMismatch(format!(
                    "saliency {}x{} for a {width}x{height} frame",
                    a.width(),
                    a.height()
                )));
            }
            let (a, b) = normalize_saliency_pair(a, b);
            PlaneObjective::new(h, &a, &b)?
        }
        None => PlaneObjective::uniform(h, width, height)?,
    };
    let (c, trace) = match c {
        Some(c) => (c, None),
        None => {
            let t = optimize_coefficients(&objective, &cfg.optimizer)?;
            (t.coefficients(), Some(t))
        }
    };
    let e = objective.evaluate_detailed(&c)?;
    Ok(DecomposeResult {
        schema_version: SCHEMA_VERSION,
        kind: "decompose".into(),
        h: *h,
        width,
        height,
        c_dec: c.c,
        h_ref: e.decomposition.h_ref,
        h_tgt: e.decomposition.h_tgt,
        scores_ref: e.scores_ref,
        scores_tgt: e.scores_tgt,
        loss: e.loss,
        trace,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SigmaReport {
    pub schema_version: u32,
    pub kind: String,
    pub config: SigmaSearchConfig,
    /// Bracket after each iteration.
    pub brackets: Vec<[f64; 2]>,
    /// Every objective evaluation of the search, in order.
    pub probes: Vec<SigmaProbe>,
    pub sigma: f64,
    pub objective: f64,
    /// Evenly spaced sweep over the range, when requested.
    pub sweep: Option<Vec<SigmaProbe>>,
    /// Best point of the sweep.
    pub sweep_best: Option<SigmaProbe>,
}

/// Ternary search over sigma (and optionally a fixed sweep of `fixed`
/// evenly spaced values) on built-in or injected features.
pub fn search_sigma(
    i_ref: &ImageBuffer,
    i_tgt: &ImageBuffer,
    cfg: &RunConfig,
    injected: &Injected,
    fixed: Option<usize>,
) -> Result<SigmaReport> {
    cfg.validate()?;
    let (i_ref, i_tgt) = match_channels(i_ref, i_tgt)?;
    let extracted;
    let features = match &injected.features {
        Some(f) => f,
        None => {
            extracted = DualFeatures::extract(&i_ref, &i_tgt, cfg.cell)?;
            &extracted
        }
    };
    let obj = SigmaObjective::new(features, &i_ref, &i_tgt, cfg.cell, cfg.seed, &cfg.loss)?;
    let mut probes = Vec::new();
    let search = crate::correlation::ternary_search_sigma(
        |s| {
            let v = obj.probe(s).0;
            probes.push(SigmaProbe { sigma: s, value: v });
            v
        },
        &cfg.sigma,
    )?;
    let sweep = match fixed {
        Some(0) => return Err(Error::Config("fixed: sweep needs at least one point".into())),
        Some(n) => {
            let (lo, hi) = (cfg.sigma.range_lo, cfg.sigma.range_hi);
            Some(
                (0..n)
                    .map(|k| {
                        let s = if n == 1 { 0.5 * (lo + hi) } else { lo + (hi - lo) * k as f64 / (n - 1) as f64 };
                        SigmaProbe { sigma: s, value: obj.probe(s).0 }
                    })
                    .collect::<Vec<_>>(),
            )
        }
        None => None,
    };
    let sweep_best = sweep.as_ref().and_then(|v| {
        v.iter().copied().fold(None, |best: Option<SigmaProbe>, p| match best {
            Some(b) if b.value >= p.value => Some(b),
            _ => Some(p),
        })
    });
    Ok(SigmaReport {
        schema_version: SCHEMA_VERSION,
        kind: "search-sigma".into(),
        config: cfg.sigma,
        brackets: search.brackets,
        probes,
        sigma: search.sigma,
        objective: search.value,
        sweep,
        sweep_best,
    })
}

/// Human-readable trace of a sigma search.
pub fn render_sigma_report(r: &SigmaReport) -> String {
    let mut s = String::new();
    for (k, [lo, hi]) in r.brackets.iter().enumerate() {
        s.push_str(&format!("iter {:>2}: [{lo:.6}, {hi:.6}]\n", k + 1));
    }
    s.push_str(&format!("sigma = {:.6}\nobjective = {:.9}\n", r.sigma, r.objective));
    if let Some(best) = r.sweep_best {
        s.push_str(&format!("sweep best: sigma = {:.6}, objective = {:.9}\n", best.sigma, best.value));
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub name: String,
    pub report: Option<MetricReport>,
    /// Why the pair was left out, e.g. an empty overlap.
    pub skipped: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub schema_version: u32,
    pub kind: String,
    pub bucket_mode: BucketMode,
    pub pairs: Vec<EvalRow>,
    pub aggregate: Vec<AggregateRow>,
    pub table: String,
}

/// One evaluation pair on a shared canvas.
#[derive(Debug, Clone)]
pub struct EvalPair {
    pub name: String,
    pub reference: WarpedImage,
    pub target: WarpedImage,
}

/// Bucket and aggregate reports; pairs without overlap are skipped.
pub fn evaluate(pairs: &[EvalPair], mode: &BucketMode) -> Result<EvalResult> {
    let mut rows = Vec::new();
    let mut names = Vec::new();
    let mut reports = Vec::new();
    for p in pairs {
        match metrics::report(&p.reference, &p.target, SsimWindow::Uniform) {
            Ok(r) => {
                names.push(p.name.clone());
                reports.push(r);
                rows.push(EvalRow { name: p.name.clone(), report: Some(r), skipped: None });
            }
            Err(e @ (Error::EmptyOverlap | Error::CanvasMismatch(_))) => {
                rows.push(EvalRow { name: p.name.clone(), report: None, skipped: Some(e.to_string()) })
            }
            Err(e) => return Err(e),
        }
    }
    let bucketed = bucket(&reports, mode);
    let mut it = bucketed.iter();
    for row in rows.iter_mut().filter(|r| r.report.is_some()) {
        row.report = it.next().copied();
    }
    Ok(EvalResult {
        schema_version: SCHEMA_VERSION,
        kind: "eval".into(),
        bucket_mode: *mode,
        aggregate: aggregate(&bucketed),
        table: render_table(&names, &bucketed, mode),
        pairs: rows,
    })
}

fn mask_from_png(path: &Path) -> Result<ScalarMap> {
    let img = io::read_image(path)?;
    let l = img.luma();
    Ok(ScalarMap::from_fn(l.width(), l.height(), |x, y| if l.get(x, y) > 0.5 { 1.0 } else { 0.0 }))
}

/// Build a pair from `<stem>_ref.png` and `<stem>_tgt.png` next to each
/// other. Masks `<stem>_ref_mask.png`/`<stem>_tgt_mask.png` mark already
/// aligned views; otherwise `<stem>_h.json` (target -> reference) warps the
/// target onto the reference frame; with neither, the views are taken as
/// aligned and fully valid.
pub fn load_eval_pair(dir: &Path, stem: &str) -> Result<EvalPair> {
    let p = |suffix: &str| dir.join(format!("{stem}{suffix}"));
    let i_ref = io::read_image(&p("_ref.png"))?;
    let i_tgt = io::read_image(&p("_tgt.png"))?;
    let (i_ref, i_tgt) = if i_ref.same_dims(&i_tgt) { match_channels(&i_ref, &i_tgt)? } else { (i_ref, i_tgt) };
    let (mr, mt, hj) = (p("_ref_mask.png"), p("_tgt_mask.png"), p("_h.json"));
    let (reference, target) = if mr.exists() || mt.exists() {
        let canvas = Canvas::frame(i_ref.width(), i_ref.height());
        let mask_or_full = |path: &PathBuf, img: &ImageBuffer| {
            if path.exists() {
                mask_from_png(path)
            } else {
                Ok(ScalarMap::filled(img.width(), img.height(), 1.0))
            }
        };
        let ref_mask = mask_or_full(&mr, &i_ref)?;
        let tgt_mask = mask_or_full(&mt, &i_tgt)?;
        (
            WarpedImage { image: i_ref, mask: ref_mask, canvas },
            WarpedImage { image: i_tgt, mask: tgt_mask, canvas },
        )
    } else if hj.exists() {
        let h: Homography = io::read_json(&hj)?;
        let canvas = Canvas::frame(i_ref.width(), i_ref.height());
        let target = warp_image_h(&i_tgt, &h, &canvas)?;
        (WarpedImage::unwarped(&i_ref), target)
    } else {
        (WarpedImage::unwarped(&i_ref), WarpedImage::unwarped(&i_tgt))
    };
    Ok(EvalPair { name: stem.to_string(), reference, target })
}

/// Every `<stem>_ref.png` in `dir` with a matching target, sorted by stem.
pub fn load_eval_dir(dir: &Path) -> Result<Vec<EvalPair>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut stems = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(stem) = name.strip_suffix("_ref.png") {
            if dir.join(format!("{stem}_tgt.png")).exists() {
                stems.push(stem.to_string());
            }
        }
    }
    stems.sort();
    stems.iter().map(|s| load_eval_pair(dir, s)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthResult {
    pub schema_version: u32,
    pub kind: String,
    pub spec: SceneSpec,
    pub h_true: Homography,
}

/// Files written by [`synth_files`].
pub const SYNTH_OUTPUTS: [&str; 4] = ["ref.png", "tgt.png", "h_true.json", "synth.json"];

pub fn synth_files(spec: &SceneSpec, out_dir: &Path) -> Result<SynthResult> {
    let scene = generate(spec)?;
    create_dir(out_dir)?;
    io::write_image(&out_dir.join(SYNTH_OUTPUTS[0]), &scene.i_ref)?;
    io::write_image(&out_dir.join(SYNTH_OUTPUTS[1]), &scene.i_tgt)?;
    io::write_json(&out_dir.join(SYNTH_OUTPUTS[2]), &scene.h_true)?;
    let result = SynthResult { schema_version: SCHEMA_VERSION, kind: "synth".into(), spec: *spec, h_true: scene.h_true };
    io::write_json(&out_dir.join(SYNTH_OUTPUTS[3]), &result)?;
    Ok(result)
}
