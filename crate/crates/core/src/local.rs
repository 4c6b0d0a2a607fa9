//! Classical local refinement after the global bidirectional warp.
//!
//! Control points on a regular grid over the canvas are matched between the
//! two warped views by zero-mean normalized cross-correlation of small
//! patches. The displacement field is median filtered, split evenly between
//! the views, and realized as one thin-plate spline per side acting on
//! plane coordinates. Points outside the overlap stay fixed. A folded spline
//! or a result that does not reduce the overlap error leaves the global
//! warp in place.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Point2;
use crate::homography::{DecompositionCoefficients, Homography};
use crate::metrics::overlap_mask;
use crate::raster::{ImageBuffer, ScalarMap};
use crate::warp::{bidirectional_stitch, control_grid, tps_solve, Stitched, TpsTransform};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LocalConfig {
    /// Largest displacement searched, pixels.
    pub search_radius: usize,
    /// Patches are `2 r + 1` pixels square.
    pub patch_radius: usize,
    /// Matches scoring below this correlation are dropped.
    pub min_zncc: f64,
}

impl Default for LocalConfig {
    fn default() -> Self {
        Self { search_radius: 8, patch_radius: 8, min_zncc: 0.6 }
    }
}

impl LocalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.search_radius < 1 || self.search_radius > 64 {
            return Err(Error::Config("local.search_radius: must lie in 1..=64".into()));
        }
        if self.patch_radius < 2 || self.patch_radius > 32 {
            return Err(Error::Config("local.patch_radius: must lie in 2..=32".into()));
        }
        if !(-1.0..=1.0).contains(&self.min_zncc) {
            return Err(Error::Config("local.min_zncc: must lie in [-1, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LocalStatus {
    Applied,
    /// Too few control points matched.
    NoMatches,
    /// A spline folded; the global warp was kept.
    Folded,
    /// The overlap error did not drop; the global warp was kept.
    NoImprovement,
}

#[derive(Debug, Clone)]
pub struct LocalOutcome {
    pub stitched: Stitched,
    pub tps_ref: Option<TpsTransform>,
    pub tps_tgt: Option<TpsTransform>,
    pub status: LocalStatus,
    pub matched: usize,
    pub mae_before: f64,
    pub mae_after: f64,
}

/// Mean absolute luma difference over the overlap, or `None` without one.
pub fn overlap_mae(s: &Stitched) -> Result<Option<f64>> {
    let m = overlap_mask(&s.reference, &s.target)?;
    let (a, b) = (s.reference.image.luma(), s.target.image.luma());
    let (mut sum, mut n) = (0.0, 0usize);
    for ((&k, &x), &y) in m.data().iter().zip(a.data()).zip(b.data()) {
        if k > 0.5 {
            sum += (x - y).abs();
            n += 1;
        }
    }
    Ok((n > 0).then(|| sum / n as f64))
}

/// Whether the `(2r+1)^2` patch at integer `(x, y)` lies inside `mask`.
fn patch_inside(mask: &ScalarMap, x: isize, y: isize, r: isize) -> bool {
    let (w, h) = (mask.width() as isize, mask.height() as isize);
    if x - r < 0 || y - r < 0 || x + r >= w || y + r >= h {
        return false;
    }
    (y - r..=y + r).all(|v| (x - r..=x + r).all(|u| mask.get(u as usize, v as usize) > 0.5))
}

fn zncc(a: &ScalarMap, b: &ScalarMap, (ax, ay): (isize, isize), (bx, by): (isize, isize), r: isize) -> f64 {
    let n = ((2 * r + 1) * (2 * r + 1)) as f64;
    let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for dy in -r..=r {
        for dx in -r..=r {
            let p = a.get((ax + dx) as usize, (ay + dy) as usize);
            let q = b.get((bx + dx) as usize, (by + dy) as usize);
            sa += p;
            sb += q;
            saa += p * p;
            sbb += q * q;
            sab += p * q;
        }
    }
    let va = saa - sa * sa / n;
    let vb = sbb - sb * sb / n;
    if va <= 1e-12 || vb <= 1e-12 {
        return -1.0;
    }
    (sab - sa * sb / n) / (va * vb).sqrt()
}

/// Vertex of the parabola through three equally spaced samples, in `[-0.5, 0.5]`.
fn parabola_peak(l: f64, c: f64, r: f64) -> f64 {
    let den = l - 2.0 * c + r;
    if den >= 0.0 {
        return 0.0;
    }
    (0.5 * (l - r) / den).clamp(-0.5, 0.5)
}

/// Displacement `d` with `tgt(p + d) ~ ref(p)` at canvas pixel `p`.
fn match_point(
    r_img: &ScalarMap,
    t_img: &ScalarMap,
    r_mask: &ScalarMap,
    t_mask: &ScalarMap,
    p: (isize, isize),
    cfg: &LocalConfig,
) -> Option<Point2> {
    let pr = cfg.patch_radius as isize;
    let sr = cfg.search_radius as isize;
    if !patch_inside(r_mask, p.0, p.1, pr) {
        return None;
    }
    let side = (2 * sr + 1) as usize;
    let mut scores = vec![f64::NEG_INFINITY; side * side];
    let mut best = (f64::NEG_INFINITY, 0usize);
    for dy in -sr..=sr {
        for dx in -sr..=sr {
            let q = (p.0 + dx, p.1 + dy);
            if !patch_inside(t_mask, q.0, q.1, pr) {
                continue;
            }
            let i = ((dy + sr) as usize) * side + (dx + sr) as usize;
            scores[i] = zncc(r_img, t_img, p, q, pr);
            if scores[i] > best.0 {
                best = (scores[i], i);
            }
        }
    }
    if best.0 < cfg.min_zncc {
        return None;
    }
    let (bx, by) = (best.1 % side, best.1 / side);
    // peaks on the search border are unreliable
    if bx == 0 || by == 0 || bx == side - 1 || by == side - 1 {
        return None;
    }
    let s = |x: usize, y: usize| scores[y * side + x];
    if [s(bx - 1, by), s(bx + 1, by), s(bx, by - 1), s(bx, by + 1)].iter().any(|v| !v.is_finite()) {
        return None;
    }
    let fx = parabola_peak(s(bx - 1, by), s(bx, by), s(bx + 1, by));
    let fy = parabola_peak(s(bx, by - 1), s(bx, by), s(bx, by + 1));
    Some(Point2::new(bx as f64 - sr as f64 + fx, by as f64 - sr as f64 + fy))
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// 3x3 median over matched neighbours; unmatched points stay unmatched.
fn median_filter(d: &[Option<Point2>], rows: usize, cols: usize) -> Vec<Option<Point2>> {
    (0..rows * cols)
        .map(|i| {
            d[i]?;
            let (r, c) = ((i / cols) as isize, (i % cols) as isize);
            let (mut xs, mut ys) = (Vec::new(), Vec::new());
            for dr in -1..=1 {
                for dc in -1..=1 {
                    let (rr, cc) = (r + dr, c + dc);
                    if rr < 0 || cc < 0 || rr >= rows as isize || cc >= cols as isize {
                        continue;
                    }
                    if let Some(p) = d[rr as usize * cols + cc as usize] {
                        xs.push(p.x);
                        ys.push(p.y);
                    }
                }
            }
            Some(Point2::new(median(&mut xs), median(&mut ys)))
        })
        .collect()
}

/// Globally stitch, then try the local correction on a `rows x cols`
/// control grid.
pub fn local_refine(
    i_ref: &ImageBuffer,
    i_tgt: &ImageBuffer,
    h: &Homography,
    c: &DecompositionCoefficients,
    rows: usize,
    cols: usize,
    cfg: &LocalConfig,
) -> Result<LocalOutcome> {
    cfg.validate()?;
    let global = bidirectional_stitch(i_ref, i_tgt, h, c, None, None)?;
    let before = overlap_mae(&global)?.unwrap_or(0.0);
    let keep = |status, matched| LocalOutcome {
        stitched: global.clone(),
        tps_ref: None,
        tps_tgt: None,
        status,
        matched,
        mae_before: before,
        mae_after: before,
    };
    if rows < 2 || cols < 2 {
        return Err(Error::Config("local grid needs at least 2x2 control points".into()));
    }
    let canvas = global.canvas;
    let (lr, lt) = (global.reference.image.luma(), global.target.image.luma());
    let (mr, mt) = (&global.reference.mask, &global.target.mask);
    let pts: Vec<Point2> = control_grid((canvas.width - 1) as f64, (canvas.height - 1) as f64, rows, cols);
    let raw: Vec<Option<Point2>> = pts
        .par_iter()
        .map(|p| match_point(&lr, &lt, mr, mt, (p.x.round() as isize, p.y.round() as isize), cfg))
        .collect();
    let matched = raw.iter().filter(|d| d.is_some()).count();
    if matched < 4 {
        return Ok(keep(LocalStatus::NoMatches, matched));
    }
    let field = median_filter(&raw, rows, cols);
    // canvas pixel -> plane coordinates
    let plane: Vec<Point2> = pts.iter().map(|p| p.sub(canvas.offset)).collect();
    let half: Vec<Point2> = field.iter().map(|d| d.map_or(Point2::default(), |d| d.scale(0.5))).collect();
    let dst_ref: Vec<Point2> = plane.iter().zip(&half).map(|(p, d)| p.add(*d)).collect();
    let dst_tgt: Vec<Point2> = plane.iter().zip(&half).map(|(p, d)| p.sub(*d)).collect();
    let tps_ref = tps_solve(&plane, &dst_ref)?.with_grid(rows, cols);
    let tps_tgt = tps_solve(&plane, &dst_tgt)?.with_grid(rows, cols);
    if tps_ref.check_folding().is_err() || tps_tgt.check_folding().is_err() {
        return Ok(keep(LocalStatus::Folded, matched));
    }
    let refined = bidirectional_stitch(i_ref, i_tgt, h, c, Some(&tps_ref), Some(&tps_tgt))?;
    let after = overlap_mae(&refined)?.unwrap_or(f64::INFINITY);
    if after < before {
        Ok(LocalOutcome {
            stitched: refined,
            tps_ref: Some(tps_ref),
            tps_tgt: Some(tps_tgt),
            status: LocalStatus::Applied,
            matched,
            mae_before: before,
            mae_after: after,
        })
    } else {
        Ok(keep(LocalStatus::NoImprovement, matched))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, SceneSpec};

    #[test]
    fn parabola_peak_recovers_offsets() {
        let f = |x: f64| -(x - 0.3).powi(2);
        assert!((parabola_peak(f(-1.0), f(0.0), f(1.0)) - 0.3).abs() < 1e-12);
        assert_eq!(parabola_peak(1.0, 0.0, 1.0), 0.0);
    }

    #[test]
    fn median_filter_removes_an_outlier() {
        let mut d = vec![Some(Point2::new(1.0, 0.0)); 9];
        d[4] = Some(Point2::new(9.0, 9.0));
        d[0] = None;
        let f = median_filter(&d, 3, 3);
        assert_eq!(f[4], Some(Point2::new(1.0, 0.0)));
        assert_eq!(f[0], None);
    }

    #[test]
    fn identical_views_keep_the_global_warp() {
        let s = generate(&SceneSpec { width: 128, height: 96, seed: 2, ..SceneSpec::default() }).unwrap();
        let out = local_refine(&s.i_ref, &s.i_ref, &Homography::identity(), &DecompositionCoefficients::middle_plane(), 13, 13, &LocalConfig::default()).unwrap();
        assert_ne!(out.status, LocalStatus::Applied);
        assert_eq!(out.mae_before, 0.0);
        assert!(out.tps_ref.is_none());
    }

    #[test]
    fn parallax_error_is_reduced() {
        let spec = SceneSpec { width: 192, height: 160, parallax_px: 4.0, seed: 6, ..SceneSpec::default() };
        let s = generate(&spec).unwrap();
        let out = local_refine(&s.i_ref, &s.i_tgt, &s.h_true, &DecompositionCoefficients::middle_plane(), 13, 13, &LocalConfig::default()).unwrap();
        assert!(out.mae_after <= out.mae_before);
    }
}
