//! Two hand-built cell descriptors, global matching between views, linear
//! flow fusion, robust homography fitting and the sigma search.
//!
//! Extractor A combines gradient-orientation and intensity-shape
//! histograms; extractor B is a pooled census transform and so ignores any
//! strictly monotone change of intensity. Either can be replaced by
//! externally computed descriptors ([`FeatureMap::from_planar`]).
//!
//! Flows point from a reference cell to its best target cell, in cell
//! units. The fitted homography maps target pixels to reference pixels.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Point2;
use crate::homography::{compose, invert, Homography};
use crate::losses::{alignment_loss_h, LossWeights};
use crate::raster::ImageBuffer;

pub const DEFAULT_CELL: usize = 16;
pub const MIN_CELL: usize = 4;
/// Correspondences below this confidence are not used for fitting.
pub const MIN_CONFIDENCE: f64 = 0.05;
pub const MIN_MATCHES: usize = 8;
pub const HYPOTHESES: usize = 1000;
/// Inlier threshold in cell units.
pub const INLIER_CELLS: f64 = 0.75;
pub const MIN_INLIER_RATIO: f64 = 0.25;
/// Objective assigned to a sigma whose flow cannot be fitted. Alignment
/// losses of images in `[0, 1]` never exceed 1, so this is always worst.
pub const FAILED_FIT_SCORE: f64 = -2.0;
const TEXTURELESS_STD: f64 = 1e-6;

/// Per-cell descriptors, cell-major (`data[cell * channels + k]`).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    channels: usize,
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(channels: usize, width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 || width == 0 || height == 0 || data.len() != channels * width * height {
            return Err(Error::DimensionMismatch(format!(
                "{} values for {channels} channels on {width}x{height} cells",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::DimensionMismatch("non-finite descriptor value".into()));
        }
        Ok(Self { channels, width, height, data })
    }

    /// From channel-major planes (`planes[k * w * h + y * w + x]`), as stored
    /// in tensor files. Each cell is scaled to unit length; all-zero cells
    /// stay zero.
    pub fn from_planar(channels: usize, width: usize, height: usize, planes: &[f64]) -> Result<Self> {
        let n = width * height;
        if planes.len() != channels * n {
            return Err(Error::DimensionMismatch(format!(
                "{} values for {channels} channels on {width}x{height} cells",
                planes.len()
            )));
        }
        let mut data = vec![0.0; channels * n];
        for i in 0..n {
            for k in 0..channels {
                data[i * channels + k] = planes[k * n + i];
            }
            normalize(&mut data[i * channels..(i + 1) * channels]);
        }
        Self::new(channels, width, height, data)
    }

    pub fn to_planar(&self) -> Vec<f64> {
        let n = self.width * self.height;
        let mut out = vec![0.0; self.channels * n];
        for i in 0..n {
            for k in 0..self.channels {
                out[k * n + i] = self.data[i * self.channels + k];
            }
        }
        out
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn cells(&self) -> usize {
        self.width * self.height
    }

    #[inline]
    pub fn cell(&self, i: usize) -> &[f64] {
        &self.data[i * self.channels..(i + 1) * self.channels]
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> &[f64] {
        self.cell(y * self.width + x)
    }

    fn same_shape(&self, o: &FeatureMap) -> bool {
        self.channels == o.channels && self.width == o.width && self.height == o.height
    }
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

fn grid_dims(img: &ImageBuffer, cell: usize) -> Result<(usize, usize)> {
    if cell < MIN_CELL {
        return Err(Error::Config(format!("cell: must be at least {MIN_CELL} px, got {cell}")));
    }
    if img.width() < cell || img.height() < cell {
        return Err(Error::ImageTooSmall(format!(
            "{}x{} image for {cell} px cells",
            img.width(),
            img.height()
        )));
    }
    Ok((img.width() / cell, img.height() / cell))
}

/// Spread `weight` over the two bins nearest to continuous bin `pos`.
#[inline]
fn soft_bin(hist: &mut [f64], pos: f64, weight: f64, wrap: bool) {
    let n = hist.len();
    let f = pos.floor();
    let t = pos - f;
    let i0 = f as isize;
    let idx = |i: isize| -> Option<usize> {
        if wrap {
            Some(i.rem_euclid(n as isize) as usize)
        } else if (0..n as isize).contains(&i) {
            Some(i as usize)
        } else {
            None
        }
    };
    if let Some(i) = idx(i0) {
        hist[i] += weight * (1.0 - t);
    }
    if let Some(i) = idx(i0 + 1) {
        hist[i] += weight * t;
    }
}

fn center(v: &mut [f64]) {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    v.iter_mut().for_each(|x| *x -= m);
}

const DIM_A: usize = 82;
/// Squared block weights of extractor A: orientation, layout, moments.
pub const W_A: [f64; 3] = [0.6, 0.3, 0.1];

/// Extractor A: 82 values per cell, computed over the cell and its eight
/// neighbours (a `3 cell x 3 cell` window, edge pixels repeated).
///
/// * 8-bin gradient-orientation histograms of the nine cells, magnitude
///   weighted and soft binned, mean-subtracted as one block, unit length;
/// * 8 luma layout values: the mean of `(v - mean) / std` over each
///   neighbouring cell, clockwise from the top-left, unit length;
/// * the `(mean, std)` pair, unit length.
///
/// The blocks carry squared weights [`W_A`] and the result is rescaled to
/// unit length. Windows with `std < 1e-6` give zero descriptors.
pub fn extract_features_a(img: &ImageBuffer, cell: usize) -> Result<FeatureMap> {
    let (gw, gh) = grid_dims(img, cell)?;
    let l = img.luma();
    let (w, h) = (l.width() as isize, l.height() as isize);
    let px = |x: isize, y: isize| l.get(x.clamp(0, w - 1) as usize, y.clamp(0, h - 1) as usize);
    let c = cell as isize;
    // Per-cell statistics on a grid padded by one cell, so every window is
    // the sum of nine entries: orientation histogram, sum and sum of squares.
    let (ew, eh) = (gw + 2, gh + 2);
    let stats: Vec<([f64; 8], f64, f64)> = (0..ew * eh)
        .into_par_iter()
        .map(|ei| {
            let (x0, y0) = ((ei % ew) as isize - 1, (ei / ew) as isize - 1);
            let mut ori = [0.0; 8];
            let (mut sum, mut sq) = (0.0, 0.0);
            for y in y0 * c..(y0 + 1) * c {
                for x in x0 * c..(x0 + 1) * c {
                    let v = px(x, y);
                    sum += v;
                    sq += v * v;
                    let gx = 0.5 * (px(x + 1, y) - px(x - 1, y));
                    let gy = 0.5 * (px(x, y + 1) - px(x, y - 1));
                    let mag = gx.hypot(gy);
                    if mag > 0.0 {
                        let theta = gy.atan2(gx).rem_euclid(2.0 * PI);
                        soft_bin(&mut ori, theta / (2.0 * PI) * 8.0, mag, true);
                    }
                }
            }
            (ori, sum, sq)
        })
        .collect();
    let per_cell = (cell * cell) as f64;
    const RING: [usize; 8] = [0, 1, 2, 5, 8, 7, 6, 3];
    let cells: Vec<Vec<f64>> = (0..gw * gh)
        .into_par_iter()
        .map(|ci| {
            let (ix, iy) = (ci % gw, ci / gw);
            let nb: [&([f64; 8], f64, f64); 9] = std::array::from_fn(|b| &stats[(iy + b / 3) * ew + ix + b % 3]);
            let n = 9.0 * per_cell;
            let mean = nb.iter().map(|s| s.1).sum::<f64>() / n;
            let var = nb.iter().map(|s| s.2).sum::<f64>() / n - mean * mean;
            let std = var.max(0.0).sqrt();
            let mut d = vec![0.0; DIM_A];
            if std < TEXTURELESS_STD {
                return d;
            }
            let (ori, rest) = d.split_at_mut(72);
            let (lum, ms) = rest.split_at_mut(8);
            for (b, s) in nb.iter().enumerate() {
                ori[b * 8..b * 8 + 8].copy_from_slice(&s.0);
            }
            center(ori);
            for (j, &b) in RING.iter().enumerate() {
                lum[j] = (nb[b].1 / per_cell - mean) / std;
            }
            ms[0] = mean;
            ms[1] = std;
            for (b, wgt) in [(&mut *ori, W_A[0]), (&mut *lum, W_A[1]), (&mut *ms, W_A[2])] {
                normalize(b);
                b.iter_mut().for_each(|v| *v *= wgt.sqrt());
            }
            normalize(&mut d);
            d
        })
        .collect();
    FeatureMap::new(DIM_A, gw, gh, cells.concat())
}

/// Offsets of a 5x5 lattice without its centre.
fn census_offsets() -> [(isize, isize); 24] {
    let mut o = [(0, 0); 24];
    let mut k = 0;
    for dy in -2..=2 {
        for dx in -2..=2 {
            if dx != 0 || dy != 0 {
                o[k] = (dx, dy);
                k += 1;
            }
        }
    }
    o
}

/// Spacing of the census lattice for a cell size.
pub fn census_stride(cell: usize) -> usize {
    (3 * cell / 4).max(1)
}

/// Extractor B: for each quadrant of the cell and each of the 24 offsets
/// of a sparse 5x5 lattice with spacing [`census_stride`], the sum of
/// `sign(neighbour - centre)` on luma; 96 values scaled to unit length.
/// Borders repeat the edge pixel.
pub fn extract_features_b(img: &ImageBuffer, cell: usize) -> Result<FeatureMap> {
    let (gw, gh) = grid_dims(img, cell)?;
    let l = img.luma();
    let (w, h) = (l.width() as isize, l.height() as isize);
    let px = |x: isize, y: isize| l.get(x.clamp(0, w - 1) as usize, y.clamp(0, h - 1) as usize);
    let stride = census_stride(cell) as isize;
    let offs = census_offsets();
    let cells: Vec<Vec<f64>> = (0..gw * gh)
        .into_par_iter()
        .map(|ci| {
            let (cx, cy) = ((ci % gw) * cell, (ci / gw) * cell);
            let mut d = vec![0.0; 4 * 24];
            let half = cell / 2;
            for k in 0..cell * cell {
                let (kx, ky) = (k % cell, k / cell);
                let q = 24 * (usize::from(kx >= half) + 2 * usize::from(ky >= half));
                let (x, y) = ((cx + kx) as isize, (cy + ky) as isize);
                let c = px(x, y);
                for (j, &(dx, dy)) in offs.iter().enumerate() {
                    let v = px(x + dx * stride, y + dy * stride);
                    d[q + j] += if v > c {
                        1.0
                    } else if v < c {
                        -1.0
                    } else {
                        0.0
                    };
                }
            }
            normalize(&mut d);
            d
        })
        .collect();
    FeatureMap::new(4 * 24, gw, gh, cells.concat())
}

/// Dense cell correspondences with per-cell confidence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationFlow {
    pub width: usize,
    pub height: usize,
    /// `(dx, dy)` in cells, row-major.
    pub flow: Vec<[f64; 2]>,
    pub confidence: Vec<f64>,
}

impl CorrelationFlow {
    pub fn new(width: usize, height: usize, flow: Vec<[f64; 2]>, confidence: Vec<f64>) -> Result<Self> {
        if flow.len() != width * height || confidence.len() != width * height {
            return Err(Error::DimensionMismatch(format!("flow of {} cells for a {width}x{height} grid", flow.len())));
        }
        Ok(Self { width, height, flow, confidence })
    }

    pub fn cells(&self) -> usize {
        self.width * self.height
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Match every reference cell against all target cells by cosine
/// similarity.
///
/// The flow points at the best target cell, the lowest cell index winning
/// ties. Confidence is the best similarity minus the best similarity found
/// outside the 3x3 neighbourhood of the winner, clamped to `[0, 1]`; when
/// the grid has no such cells the best similarity itself is used. Zero
/// reference descriptors get zero flow and zero confidence.
pub fn correlation_flow(f_ref: &FeatureMap, f_tgt: &FeatureMap) -> Result<CorrelationFlow> {
    if !f_ref.same_shape(f_tgt) {
        return Err(Error::DimensionMismatch(format!(
            "features {}x{}x{} vs {}x{}x{}",
            f_ref.width, f_ref.height, f_ref.channels, f_tgt.width, f_tgt.height, f_tgt.channels
        )));
    }
    let (w, n) = (f_ref.width, f_ref.cells());
    let out: Vec<([f64; 2], f64)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let a = f_ref.cell(i);
            if a.iter().all(|&v| v == 0.0) {
                return ([0.0, 0.0], 0.0);
            }
            let sims: Vec<f64> = (0..n).map(|j| dot(a, f_tgt.cell(j))).collect();
            let mut best = 0;
            for j in 1..n {
                if sims[j] > sims[best] {
                    best = j;
                }
            }
            let (bx, by) = ((best % w) as isize, (best / w) as isize);
            let second = (0..n)
                .filter(|&j| ((j % w) as isize - bx).abs() > 1 || ((j / w) as isize - by).abs() > 1)
                .map(|j| sims[j])
                .fold(f64::NEG_INFINITY, f64::max);
            let margin = if second.is_finite() { sims[best] - second } else { sims[best] };
            let flow = [bx as f64 - (i % w) as f64, by as f64 - (i / w) as f64];
            (flow, margin.clamp(0.0, 1.0))
        })
        .collect();
    let (flow, confidence) = out.into_iter().unzip();
    CorrelationFlow::new(f_ref.width, f_ref.height, flow, confidence)
}

/// `(1 - sigma) * a + sigma * b` per cell; confidence is the smaller of
/// the two. Any real `sigma` is allowed.
pub fn fuse(a: &CorrelationFlow, b: &CorrelationFlow, sigma: f64) -> Result<CorrelationFlow> {
    if a.width != b.width || a.height != b.height {
        return Err(Error::DimensionMismatch(format!(
            "flows {}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    let flow = a
        .flow
        .iter()
        .zip(&b.flow)
        .map(|(p, q)| [(1.0 - sigma) * p[0] + sigma * q[0], (1.0 - sigma) * p[1] + sigma * q[1]])
        .collect();
    let confidence = a.confidence.iter().zip(&b.confidence).map(|(p, q)| p.min(*q)).collect();
    CorrelationFlow::new(a.width, a.height, flow, confidence)
}

/// Reference pixel `p` and target pixel `q` of one confident cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    pub reference: Point2,
    pub target: Point2,
}

/// Cell centres and their flow targets for cells above [`MIN_CONFIDENCE`].
pub fn correspondences(flow: &CorrelationFlow, cell: usize) -> Vec<Correspondence> {
    let c = cell as f64;
    let half = (c - 1.0) / 2.0;
    (0..flow.cells())
        .filter(|&i| flow.confidence[i] > MIN_CONFIDENCE)
        .map(|i| {
            let p = Point2::new((i % flow.width) as f64 * c + half, (i / flow.width) as f64 * c + half);
            let f = flow.flow[i];
            Correspondence { reference: p, target: Point2::new(p.x + f[0] * c, p.y + f[1] * c) }
        })
        .collect()
}

/// Hartley normalization: centroid to the origin, mean distance `sqrt(2)`.
fn hartley(pts: &[Point2]) -> Option<(Point2, f64)> {
    let n = pts.len() as f64;
    let c = pts.iter().fold(Point2::default(), |a, &p| a.add(p)).scale(1.0 / n);
    let d = pts.iter().map(|p| p.distance(c)).sum::<f64>() / n;
    (d > 0.0 && d.is_finite()).then(|| (c, 2f64.sqrt() / d))
}

/// Least-squares homography with `dst ~ H src` from four or more pairs,
/// via the normalized direct linear solve.
pub fn fit_homography_dlt(src: &[Point2], dst: &[Point2]) -> Result<Homography> {
    if src.len() != dst.len() || src.len() < 4 {
        return Err(Error::InsufficientMatches { found: src.len().min(dst.len()), needed: 4 });
    }
    let degenerate = || Error::DegenerateQuad("correspondences do not determine a homography".into());
    let (cs, ks) = hartley(src).ok_or_else(degenerate)?;
    let (cd, kd) = hartley(dst).ok_or_else(degenerate)?;
    let rows = (2 * src.len()).max(9);
    let mut a = DMatrix::<f64>::zeros(rows, 9);
    for (i, (s, d)) in src.iter().zip(dst).enumerate() {
        let (x, y) = ((s.x - cs.x) * ks, (s.y - cs.y) * ks);
        let (u, v) = ((d.x - cd.x) * kd, (d.y - cd.y) * kd);
        let r = 2 * i;
        for (k, val) in [-x, -y, -1.0, 0.0, 0.0, 0.0, u * x, u * y, u].into_iter().enumerate() {
            a[(r, k)] = val;
        }
        for (k, val) in [0.0, 0.0, 0.0, -x, -y, -1.0, v * x, v * y, v].into_iter().enumerate() {
            a[(r + 1, k)] = val;
        }
    }
    let svd = a.svd(false, true);
    let vt = svd.v_t.ok_or_else(degenerate)?;
    let (imin, _) = svd
        .singular_values
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |acc, (i, &s)| if s < acc.1 { (i, s) } else { acc });
    let hn: Vec<f64> = (0..9).map(|k| vt[(imin, k)]).collect();
    // undo normalization: H = Td^-1 * Hn * Ts
    let ts = [ks, 0.0, -ks * cs.x, 0.0, ks, -ks * cs.y, 0.0, 0.0, 1.0];
    let td_inv = [1.0 / kd, 0.0, cd.x, 0.0, 1.0 / kd, cd.y, 0.0, 0.0, 1.0];
    let mul = |x: &[f64], y: &[f64]| -> [f64; 9] {
        std::array::from_fn(|i| (0..3).map(|k| x[(i / 3) * 3 + k] * y[k * 3 + i % 3]).sum())
    };
    Homography::from_rows(mul(&td_inv, &mul(&hn, &ts)))
}

/// Outcome of the seeded consensus fit.
#[derive(Debug, Clone, PartialEq)]
pub struct RobustFit {
    pub h: Homography,
    /// Indices into the correspondence list, under the returned `h`.
    pub inliers: Vec<usize>,
    pub inlier_ratio: f64,
}

fn residual(h: &Homography, c: &Correspondence) -> f64 {
    h.apply(c.target).map_or(f64::INFINITY, |p| p.distance(c.reference))
}

fn inliers_of(h: &Homography, corr: &[Correspondence], threshold: f64) -> Vec<usize> {
    (0..corr.len()).filter(|&i| residual(h, &corr[i]) <= threshold).collect()
}

/// Hypotheses are scored in batches of this size between stopping checks.
pub const HYPOTHESIS_BATCH: usize = 50;
/// Probability that some scored sample is all inliers when sampling stops.
pub const SAMPLING_CONFIDENCE: f64 = 0.999;

/// Samples needed to draw one all-inlier quadruple with
/// [`SAMPLING_CONFIDENCE`] at inlier ratio `w`.
fn hypotheses_needed(w: f64) -> f64 {
    let p = w.powi(4);
    if p >= 1.0 {
        1.0
    } else if p <= 0.0 {
        f64::INFINITY
    } else {
        (1.0 - SAMPLING_CONFIDENCE).ln() / (1.0 - p).ln()
    }
}

/// Consensus fit of target-to-reference homographies: up to [`HYPOTHESES`]
/// random four-point samples, stopping early once the best consensus makes
/// a clean sample near certain, then two least-squares refits on the inliers.
pub fn fit_robust(corr: &[Correspondence], threshold: f64, seed: u64) -> Result<RobustFit> {
    if corr.len() < MIN_MATCHES {
        return Err(Error::InsufficientMatches { found: corr.len(), needed: MIN_MATCHES });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples: Vec<[usize; 4]> = (0..HYPOTHESES)
        .map(|_| {
            let s = rand::seq::index::sample(&mut rng, corr.len(), 4);
            [s.index(0), s.index(1), s.index(2), s.index(3)]
        })
        .collect();
    let mut best: Option<(usize, Homography)> = None;
    let mut drawn = 0;
    for chunk in samples.chunks(HYPOTHESIS_BATCH) {
        let scored: Vec<(usize, Option<Homography>)> = chunk
            .par_iter()
            .map(|s| {
                let src: Vec<Point2> = s.iter().map(|&i| corr[i].target).collect();
                let dst: Vec<Point2> = s.iter().map(|&i| corr[i].reference).collect();
                match fit_homography_dlt(&src, &dst) {
                    Ok(h) => (corr.iter().filter(|c| residual(&h, c) <= threshold).count(), Some(h)),
                    Err(_) => (0, None),
                }
            })
            .collect();
        for (count, h) in scored {
            if let Some(h) = h {
                if best.as_ref().is_none_or(|(b, _)| count > *b) {
                    best = Some((count, h));
                }
            }
        }
        drawn += chunk.len();
        if best.as_ref().is_some_and(|(b, _)| drawn as f64 >= hypotheses_needed(*b as f64 / corr.len() as f64)) {
            break;
        }
    }
    let (count, mut h) = best.ok_or(Error::NoConsensus { ratio: 0.0, threshold: MIN_INLIER_RATIO })?;
    let ratio = count as f64 / corr.len() as f64;
    if ratio < MIN_INLIER_RATIO {
        return Err(Error::NoConsensus { ratio, threshold: MIN_INLIER_RATIO });
    }
    let mut inliers = inliers_of(&h, corr, threshold);
    for _ in 0..2 {
        if inliers.len() < 4 {
            break;
        }
        let src: Vec<Point2> = inliers.iter().map(|&i| corr[i].target).collect();
        let dst: Vec<Point2> = inliers.iter().map(|&i| corr[i].reference).collect();
        let Ok(refit) = fit_homography_dlt(&src, &dst) else { break };
        let next = inliers_of(&refit, corr, threshold);
        if next.len() < inliers.len() {
            break;
        }
        h = refit;
        inliers = next;
    }
    let inlier_ratio = inliers.len() as f64 / corr.len() as f64;
    Ok(RobustFit { h, inliers, inlier_ratio })
}

/// Target-to-reference homography from a correlation flow.
pub fn flow_to_homography(flow: &CorrelationFlow, cell: usize, seed: u64) -> Result<Homography> {
    let corr = correspondences(flow, cell);
    Ok(fit_robust(&corr, INLIER_CELLS * cell as f64, seed)?.h)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SigmaSearchConfig {
    pub range_lo: f64,
    pub range_hi: f64,
    pub iters: usize,
}

impl Default for SigmaSearchConfig {
    fn default() -> Self {
        Self { range_lo: -1.0, range_hi: 2.0, iters: 10 }
    }
}

impl SigmaSearchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.range_lo.is_finite() && self.range_hi.is_finite() && self.range_lo < self.range_hi) {
            return Err(Error::Config(format!(
                "sigma.range: need lo < hi, got [{}, {}]",
                self.range_lo, self.range_hi
            )));
        }
        if self.iters < 1 {
            return Err(Error::Config("sigma.iters: must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SigmaSearch {
    pub sigma: f64,
    pub value: f64,
    /// Bracket `[lo, hi]` after each iteration.
    pub brackets: Vec<[f64; 2]>,
}

/// Two-probe ternary search for the maximum of `objective` over the
/// configured range. Returns the final bracket midpoint and its value.
pub fn ternary_search_sigma(mut objective: impl FnMut(f64) -> f64, cfg: &SigmaSearchConfig) -> Result<SigmaSearch> {
    cfg.validate()?;
    let mut eval = |s: f64| {
        let v = objective(s);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFiniteObjective(format!("sigma objective at {s}")))
        }
    };
    let (mut lo, mut hi) = (cfg.range_lo, cfg.range_hi);
    let width = hi - lo;
    let mut brackets = Vec::with_capacity(cfg.iters);
    for k in 0..cfg.iters {
        let third = width * (2.0f64 / 3.0).powi(k as i32) / 3.0;
        let (m1, m2) = (lo + third, hi - third);
        if eval(m1)? < eval(m2)? {
            lo = m1;
        } else {
            hi = m2;
        }
        brackets.push([lo, hi]);
    }
    let sigma = 0.5 * (lo + hi);
    Ok(SigmaSearch { sigma, value: eval(sigma)?, brackets })
}

/// Objective value of every probed sigma, in probe order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SigmaProbe {
    pub sigma: f64,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualEstimate {
    pub h: Homography,
    pub sigma: f64,
    /// Negative homography alignment loss at the chosen sigma.
    pub objective: f64,
    pub search: SigmaSearch,
    pub probes: Vec<SigmaProbe>,
}

/// Descriptors of both views from both extractors.
#[derive(Debug, Clone)]
pub struct DualFeatures {
    pub a_ref: FeatureMap,
    pub a_tgt: FeatureMap,
    pub b_ref: FeatureMap,
    pub b_tgt: FeatureMap,
}

impl DualFeatures {
    pub fn extract(i_ref: &ImageBuffer, i_tgt: &ImageBuffer, cell: usize) -> Result<Self> {
        Ok(Self {
            a_ref: extract_features_a(i_ref, cell)?,
            a_tgt: extract_features_a(i_tgt, cell)?,
            b_ref: extract_features_b(i_ref, cell)?,
            b_tgt: extract_features_b(i_tgt, cell)?,
        })
    }
}

/// Images wider than this are scored at half resolution.
pub const SCORE_HALVE_ABOVE: usize = 256;

fn halves(img: &ImageBuffer) -> bool {
    img.width() > SCORE_HALVE_ABOVE && img.height() >= 16
}

fn half(img: &ImageBuffer) -> crate::raster::ScalarMap {
    let l = img.luma();
    if halves(img) {
        crate::refine::downsample(&l)
    } else {
        l
    }
}

/// Sigma-search objective: negative symmetric alignment loss of the
/// homography fitted to the fused flow, or [`FAILED_FIT_SCORE`]. Images
/// wider than [`SCORE_HALVE_ABOVE`] are scored on 2x2-averaged luma.
pub struct SigmaObjective<'a> {
    pub flow_a: CorrelationFlow,
    pub flow_b: CorrelationFlow,
    luma_ref: ImageBuffer,
    luma_tgt: ImageBuffer,
    halved: bool,
    cell: usize,
    seed: u64,
    weights: &'a LossWeights,
}

impl<'a> SigmaObjective<'a> {
    pub fn new(
        features: &DualFeatures,
        i_ref: &ImageBuffer,
        i_tgt: &ImageBuffer,
        cell: usize,
        seed: u64,
        weights: &'a LossWeights,
    ) -> Result<Self> {
        if !i_ref.same_dims(i_tgt) {
            return Err(Error::DimensionMismatch("reference and target images differ in size".into()));
        }
        Ok(Self {
            flow_a: correlation_flow(&features.a_ref, &features.a_tgt)?,
            flow_b: correlation_flow(&features.b_ref, &features.b_tgt)?,
            luma_ref: half(i_ref).into(),
            luma_tgt: half(i_tgt).into(),
            halved: halves(i_ref),
            cell,
            seed,
            weights,
        })
    }

    pub fn homography(&self, sigma: f64) -> Result<Homography> {
        flow_to_homography(&fuse(&self.flow_a, &self.flow_b, sigma)?, self.cell, self.seed)
    }

    pub fn score(&self, h: &Homography) -> f64 {
        let h = if self.halved {
            // half-resolution pixel x' = (x - 0.5) / 2
            let s = Homography::from_rows([0.5, 0.0, -0.25, 0.0, 0.5, -0.25, 0.0, 0.0, 1.0]).expect("invertible");
            match invert(&s).and_then(|si| compose(&s, &compose(h, &si)?)) {
                Ok(h) => h,
                Err(_) => return FAILED_FIT_SCORE,
            }
        } else {
            *h
        };
        match alignment_loss_h(&self.luma_ref, &self.luma_tgt, &h, self.weights) {
            Ok(l) if l.is_finite() => -l,
            _ => FAILED_FIT_SCORE,
        }
    }

    /// Objective and fitted homography at `sigma`.
    pub fn probe(&self, sigma: f64) -> (f64, Option<Homography>) {
        match self.homography(sigma) {
            Ok(h) => (self.score(&h), Some(h)),
            Err(_) => (FAILED_FIT_SCORE, None),
        }
    }
}

/// Fixed sigmas probed besides the search: the two pure branches and
/// their mean.
pub const ANCHOR_SIGMAS: [f64; 3] = [0.0, 0.5, 1.0];

/// Search sigma on precomputed descriptors and return the best homography
/// seen among the search result and [`ANCHOR_SIGMAS`].
pub fn estimate_from_features(
    features: &DualFeatures,
    i_ref: &ImageBuffer,
    i_tgt: &ImageBuffer,
    cfg: &SigmaSearchConfig,
    cell: usize,
    seed: u64,
    weights: &LossWeights,
) -> Result<DualEstimate> {
    cfg.validate()?;
    let obj = SigmaObjective::new(features, i_ref, i_tgt, cell, seed, weights)?;
    let mut probes = Vec::new();
    let mut record = |s: f64| {
        let (v, _) = obj.probe(s);
        probes.push(SigmaProbe { sigma: s, value: v });
        v
    };
    let search = ternary_search_sigma(&mut record, cfg)?;
    let mut best = (search.sigma, search.value);
    for s in ANCHOR_SIGMAS {
        let v = record(s);
        if v > best.1 {
            best = (s, v);
        }
    }
    let h = obj.homography(best.0)?;
    Ok(DualEstimate { h, sigma: best.0, objective: best.1, search, probes })
}

/// Extract both descriptor pairs and run [`estimate_from_features`].
pub fn estimate_homography_dual(
    i_ref: &ImageBuffer,
    i_tgt: &ImageBuffer,
    cfg: &SigmaSearchConfig,
    cell: usize,
    seed: u64,
) -> Result<DualEstimate> {
    let features = DualFeatures::extract(i_ref, i_tgt, cell)?;
    estimate_from_features(&features, i_ref, i_tgt, cfg, cell, seed, &LossWeights::default())
}
