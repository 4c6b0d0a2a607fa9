//! Direct photometric refinement of a homography estimate.
//!
//! Coarse-to-fine Levenberg-Marquardt on the eight free entries of the
//! homography (in centred, unit-scaled coordinates) plus a gain and bias
//! between the views, with Huber weights. The result is kept only when the
//! normalized cross-correlation over the overlap improves, so refinement
//! never makes an estimate worse by that measure.

use nalgebra::{SMatrix, SVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Point2;
use crate::homography::Homography;
use crate::raster::{ImageBuffer, ScalarMap};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefineConfig {
    /// Coarsest pyramid level has at least this many pixels on its short side.
    pub min_size: usize,
    pub iters: usize,
    /// Huber threshold on intensity residuals.
    pub huber: f64,
    /// Levels with a short side of at least 256 px use every `step`-th
    /// row and column.
    pub step: usize,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self { min_size: 48, iters: 25, huber: 0.04, step: 2 }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_size < 8 {
            return Err(Error::Config("refine.min_size: must be at least 8".into()));
        }
        if self.iters < 1 {
            return Err(Error::Config("refine.iters: must be at least 1".into()));
        }
        if self.step < 1 {
            return Err(Error::Config("refine.step: must be at least 1".into()));
        }
        if !(self.huber > 0.0 && self.huber.is_finite()) {
            return Err(Error::Config("refine.huber: must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Refinement {
    pub h: Homography,
    /// Overlap correlation before and after.
    pub ncc_before: f64,
    pub ncc_after: f64,
    pub accepted: bool,
}

/// Halve resolution by 2x2 averaging.
pub(crate) fn downsample(m: &ScalarMap) -> ScalarMap {
    let (w, h) = (m.width() / 2, m.height() / 2);
    ScalarMap::from_fn(w, h, |x, y| {
        0.25 * (m.get(2 * x, 2 * y) + m.get(2 * x + 1, 2 * y) + m.get(2 * x, 2 * y + 1) + m.get(2 * x + 1, 2 * y + 1))
    })
}

/// Central-difference gradients with repeated borders.
fn gradients(m: &ScalarMap) -> (ScalarMap, ScalarMap) {
    let (w, h) = (m.width(), m.height());
    let gx = ScalarMap::from_fn(w, h, |x, y| 0.5 * (m.get((x + 1).min(w - 1), y) - m.get(x.saturating_sub(1), y)));
    let gy = ScalarMap::from_fn(w, h, |x, y| 0.5 * (m.get(x, (y + 1).min(h - 1)) - m.get(x, y.saturating_sub(1))));
    (gx, gy)
}

struct Level {
    r: ScalarMap,
    t: ScalarMap,
    gx: ScalarMap,
    gy: ScalarMap,
    /// Level pixels per full-resolution pixel.
    scale: f64,
    step: usize,
}

/// Pixel coordinates of a level map to normalized ones by
/// `(p * (1 / scale) - c) / s` with the full-resolution centre and radius.
struct Frame {
    c: Point2,
    s: f64,
}

impl Frame {
    fn to_norm(&self, p: Point2, scale: f64) -> Point2 {
        Point2::new((p.x / scale - self.c.x) / self.s, (p.y / scale - self.c.y) / self.s)
    }

    fn from_norm(&self, q: Point2, scale: f64) -> Point2 {
        Point2::new((q.x * self.s + self.c.x) * scale, (q.y * self.s + self.c.y) * scale)
    }

    /// `N H N^-1` for pixel-space `H`.
    fn normalize(&self, h: &Homography) -> [f64; 9] {
        let n = [1.0 / self.s, 0.0, -self.c.x / self.s, 0.0, 1.0 / self.s, -self.c.y / self.s, 0.0, 0.0, 1.0];
        let n_inv = [self.s, 0.0, self.c.x, 0.0, self.s, self.c.y, 0.0, 0.0, 1.0];
        let g = mul3(&n, &mul3(&h.matrix(), &n_inv));
        g.map(|v| v / g[8])
    }

    fn denormalize(&self, g: &[f64; 9]) -> Result<Homography> {
        let n = [1.0 / self.s, 0.0, -self.c.x / self.s, 0.0, 1.0 / self.s, -self.c.y / self.s, 0.0, 0.0, 1.0];
        let n_inv = [self.s, 0.0, self.c.x, 0.0, self.s, self.c.y, 0.0, 0.0, 1.0];
        Homography::from_rows(mul3(&n_inv, &mul3(g, &n)))
    }
}

fn mul3(a: &[f64; 9], b: &[f64; 9]) -> [f64; 9] {
    std::array::from_fn(|i| (0..3).map(|k| a[(i / 3) * 3 + k] * b[k * 3 + i % 3]).sum())
}

#[inline]
fn project(g: &[f64; 9], p: Point2) -> Option<(Point2, f64)> {
    let w = g[6] * p.x + g[7] * p.y + g[8];
    if w.abs() < 1e-8 {
        return None;
    }
    Some((Point2::new((g[0] * p.x + g[1] * p.y + g[2]) / w, (g[3] * p.x + g[4] * p.y + g[5]) / w), w))
}

/// Parameters: g[0..8] then gain and bias.
type Params = SVector<f64, 10>;

fn unpack(p: &Params) -> ([f64; 9], f64, f64) {
    ([p[0], p[1], p[2], p[3], p[4], p[5], p[6], p[7], 1.0], p[8], p[9])
}

#[inline]
fn huber_weight(r: f64, k: f64) -> f64 {
    if r.abs() <= k {
        1.0
    } else {
        k / r.abs()
    }
}

#[inline]
fn huber_cost(r: f64, k: f64) -> f64 {
    if r.abs() <= k {
        0.5 * r * r
    } else {
        k * (r.abs() - 0.5 * k)
    }
}

/// Normal equations and robust cost at `p`; `None` when too little
/// overlap remains.
fn accumulate(level: &Level, frame: &Frame, p: &Params, k: f64, with_jac: bool) -> Option<(SMatrix<f64, 10, 10>, Params, f64)> {
    let (g, gain, bias) = unpack(p);
    let (w, h) = (level.t.width(), level.t.height());
    let rows: Vec<(SMatrix<f64, 10, 10>, Params, f64, usize)> = (0..h)
        .into_par_iter()
        .step_by(level.step)
        .map(|y| {
            let mut jtj = SMatrix::<f64, 10, 10>::zeros();
            let mut jtr = Params::zeros();
            let mut cost = 0.0;
            let mut n = 0;
            for x in (0..w).step_by(level.step) {
                let xn = frame.to_norm(Point2::new(x as f64, y as f64), level.scale);
                let Some((yn, den)) = project(&g, xn) else { continue };
                let q = frame.from_norm(yn, level.scale);
                let Some(iv) = level.r.sample(q.x, q.y) else { continue };
                let r = gain * iv + bias - level.t.get(x, y);
                cost += huber_cost(r, k);
                n += 1;
                if !with_jac {
                    continue;
                }
                let wgt = huber_weight(r, k);
                let (gx, gy) = (level.gx.sample(q.x, q.y).unwrap_or(0.0), level.gy.sample(q.x, q.y).unwrap_or(0.0));
                // d(pixel)/d(normalized) = s * scale
                let ds = frame.s * level.scale;
                let (ax, ay) = (gain * gx * ds / den, gain * gy * ds / den);
                let j = Params::from([
                    ax * xn.x,
                    ax * xn.y,
                    ax,
                    ay * xn.x,
                    ay * xn.y,
                    ay,
                    -(ax * yn.x + ay * yn.y) * xn.x,
                    -(ax * yn.x + ay * yn.y) * xn.y,
                    iv,
                    1.0,
                ]);
                jtj += wgt * j * j.transpose();
                jtr += wgt * r * j;
            }
            (jtj, jtr, cost, n)
        })
        .collect();
    let mut jtj = SMatrix::<f64, 10, 10>::zeros();
    let mut jtr = Params::zeros();
    let (mut cost, mut n) = (0.0, 0usize);
    for (a, b, c, m) in rows {
        jtj += a;
        jtr += b;
        cost += c;
        n += m;
    }
    (n >= (w * h) / (10 * level.step * level.step) && n >= 64).then(|| (jtj, jtr, cost / n as f64))
}

/// A level is done once a step moves no frame corner this far (level pixels).
const CONVERGED_PX: f64 = 0.01;

/// Largest displacement of the frame corners between two parameter
/// vectors, full-resolution pixels.
fn corner_shift(frame: &Frame, a: &Params, b: &Params, w: f64, h: f64) -> f64 {
    let (ga, _, _) = unpack(a);
    let (gb, _, _) = unpack(b);
    [(0.0, 0.0), (w, 0.0), (0.0, h), (w, h)]
        .iter()
        .map(|&(x, y)| {
            let n = frame.to_norm(Point2::new(x, y), 1.0);
            match (project(&ga, n), project(&gb, n)) {
                (Some((qa, _)), Some((qb, _))) => qa.distance(qb) * frame.s,
                _ => f64::INFINITY,
            }
        })
        .fold(0.0, f64::max)
}

/// Correlation of `I_ref(H x)` and `I_tgt(x)` over the overlap.
pub fn overlap_ncc(r: &ScalarMap, t: &ScalarMap, h: &Homography) -> f64 {
    let (mut s1, mut s2, mut s11, mut s22, mut s12, mut n) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
    for y in 0..t.height() {
        for x in 0..t.width() {
            let Some(q) = h.apply(Point2::new(x as f64, y as f64)) else { continue };
            let Some(a) = r.sample(q.x, q.y) else { continue };
            let b = t.get(x, y);
            s1 += a;
            s2 += b;
            s11 += a * a;
            s22 += b * b;
            s12 += a * b;
            n += 1.0;
        }
    }
    if n < 16.0 {
        return -1.0;
    }
    let cov = s12 / n - (s1 / n) * (s2 / n);
    let va = s11 / n - (s1 / n).powi(2);
    let vb = s22 / n - (s2 / n).powi(2);
    if va <= 0.0 || vb <= 0.0 {
        return -1.0;
    }
    cov / (va * vb).sqrt()
}

/// Refine a target-to-reference homography on the luma of both views.
pub fn refine_homography(i_ref: &ImageBuffer, i_tgt: &ImageBuffer, h0: &Homography, cfg: &RefineConfig) -> Result<Refinement> {
    cfg.validate()?;
    if !i_ref.same_dims(i_tgt) {
        return Err(Error::DimensionMismatch("reference and target images differ in size".into()));
    }
    let (r0, t0) = (i_ref.luma(), i_tgt.luma());
    let (w, h) = (r0.width() as f64, r0.height() as f64);
    let frame = Frame { c: Point2::new(w / 2.0, h / 2.0), s: w.max(h) / 2.0 };

    let mut levels = Vec::new();
    let (mut r, mut t, mut scale) = (r0.clone(), t0.clone(), 1.0);
    loop {
        let (gx, gy) = gradients(&r);
        let step = if r.width().min(r.height()) >= 256 { cfg.step } else { 1 };
        levels.push(Level { r: r.clone(), t: t.clone(), gx, gy, scale, step });
        if r.width().min(r.height()) / 2 < cfg.min_size {
            break;
        }
        r = downsample(&r);
        t = downsample(&t);
        scale *= 0.5;
    }

    let g0 = frame.normalize(h0);
    let mut p = Params::from([g0[0], g0[1], g0[2], g0[3], g0[4], g0[5], g0[6], g0[7], 1.0, 0.0]);
    for level in levels.iter().rev() {
        let mut mu = 1e-3;
        let Some((mut jtj, mut jtr, mut cost)) = accumulate(level, &frame, &p, cfg.huber, true) else { break };
        for _ in 0..cfg.iters {
            let mut a = jtj;
            for i in 0..10 {
                a[(i, i)] += mu * jtj[(i, i)].max(1e-12);
            }
            let Some(step) = a.lu().solve(&(-jtr)) else { break };
            let cand = p + step;
            match accumulate(level, &frame, &cand, cfg.huber, true) {
                Some((j2, r2, c2)) if c2 < cost => {
                    let moved = corner_shift(&frame, &p, &cand, w, h) * level.scale;
                    p = cand;
                    (jtj, jtr, cost) = (j2, r2, c2);
                    mu = (mu / 3.0).max(1e-9);
                    if moved < CONVERGED_PX {
                        break;
                    }
                }
                _ => {
                    mu *= 4.0;
                    if mu > 1e6 {
                        break;
                    }
                }
            }
        }
    }
    let (g, _, _) = unpack(&p);
    let before = overlap_ncc(&r0, &t0, h0);
    let Ok(h1) = frame.denormalize(&g) else {
        return Ok(Refinement { h: *h0, ncc_before: before, ncc_after: before, accepted: false });
    };
    let after = overlap_ncc(&r0, &t0, &h1);
    if after > before {
        Ok(Refinement { h: h1, ncc_before: before, ncc_after: after, accepted: true })
    } else {
        Ok(Refinement { h: *h0, ncc_before: before, ncc_after: before, accepted: false })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, Photometric, SceneSpec};

    #[test]
    fn refines_a_perturbed_estimate() {
        let spec = SceneSpec { width: 256, height: 192, h_magnitude: 0.12, seed: 3, ..SceneSpec::default() };
        let s = generate(&spec).unwrap();
        let m = s.h_true.matrix();
        let start = Homography::from_rows([m[0], m[1], m[2] + 6.0, m[3], m[4], m[5] - 4.0, m[6], m[7], m[8]]).unwrap();
        assert!(start.corner_error(&s.h_true, 256.0, 192.0) > 5.0);
        let out = refine_homography(&s.i_ref, &s.i_tgt, &start, &RefineConfig::default()).unwrap();
        assert!(out.accepted);
        assert!(out.h.corner_error(&s.h_true, 256.0, 192.0) < 0.5, "{}", out.h.corner_error(&s.h_true, 256.0, 192.0));
    }

    #[test]
    fn tolerates_gain_and_bias() {
        let spec = SceneSpec {
            width: 256,
            height: 192,
            photometric: Some(Photometric { gamma: 1.0, brightness: 0.1 }),
            seed: 4,
            ..SceneSpec::default()
        };
        let s = generate(&spec).unwrap();
        let start = crate::homography::compose(&s.h_true, &Homography::translation(3.0, 2.0)).unwrap();
        let out = refine_homography(&s.i_ref, &s.i_tgt, &start, &RefineConfig::default()).unwrap();
        assert!(out.h.corner_error(&s.h_true, 256.0, 192.0) < 1.0);
    }

    #[test]
    fn never_reports_a_worse_correlation() {
        let spec = SceneSpec { width: 128, height: 96, seed: 5, ..SceneSpec::default() };
        let s = generate(&spec).unwrap();
        let out = refine_homography(&s.i_ref, &s.i_tgt, &s.h_true, &RefineConfig::default()).unwrap();
        assert!(out.ncc_after >= out.ncc_before);
    }
}
