//! Alignment and mesh-shape objectives, used as diagnostics and as the
//! sigma-search objective.
//!
//! Photometric means run over every pixel and channel of the frame, with
//! the validity mask inside the product. Absolute magnitudes therefore
//! shrink with the overlap, which is the intended reading of the formula.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Point2;
use crate::homography::{invert, Homography};
use crate::raster::ImageBuffer;
use crate::warp::{warp_image_h, warp_with, Canvas, WarpedImage};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda: f64,
    pub w_tps: f64,
    pub w_s: f64,
    pub w_c: f64,
    pub alpha: f64,
    /// Mesh cells along y.
    pub u: usize,
    /// Mesh cells along x.
    pub v: usize,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda: 0.5, w_tps: 4.0, w_s: 4.0, w_c: 10.0, alpha: 0.125, u: 12, v: 12 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda", self.lambda),
            ("w_tps", self.w_tps),
            ("w_s", self.w_s),
            ("w_c", self.w_c),
            ("alpha", self.alpha),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("loss.{name}: must be positive")));
            }
        }
        if self.u < 1 || self.v < 1 {
            return Err(Error::Config("loss.u, loss.v: mesh needs at least one cell".into()));
        }
        Ok(())
    }
}

fn check_same(a: &ImageBuffer, b: &ImageBuffer) -> Result<()> {
    if a.same_dims(b) {
        Ok(())
    } else {
        Err(Error::DimensionMismatch(format!(
            "{}x{}x{} vs {}x{}x{}",
            a.width(),
            a.height(),
            a.channels(),
            b.width(),
            b.height(),
            b.channels()
        )))
    }
}

/// `mean |fixed * mask - warped|` over all pixels and channels; `fixed`
/// lives on the canvas frame.
fn masked_term(fixed: &ImageBuffer, warped: &WarpedImage) -> f64 {
    let (w, h, nc) = (fixed.width(), fixed.height(), fixed.channels());
    let mut sum = 0.0;
    for c in 0..nc {
        let (f, g) = (fixed.plane(c), warped.image.plane(c));
        for i in 0..w * h {
            sum += (f[i] * warped.mask.data()[i] - g[i]).abs();
        }
    }
    sum / (w * h * nc) as f64
}

/// Symmetric homography alignment loss: the target pulled into the
/// reference frame and the reference pulled into the target frame.
pub fn alignment_loss_h(i_ref: &ImageBuffer, i_tgt: &ImageBuffer, h: &Homography, weights: &LossWeights) -> Result<f64> {
    check_same(i_ref, i_tgt)?;
    if i_ref.is_empty() {
        return Err(Error::EmptyImage);
    }
    let frame = Canvas::frame(i_ref.width(), i_ref.height());
    let fwd = warp_image_h(i_tgt, h, &frame)?;
    let back = warp_image_h(i_ref, &invert(h)?, &frame)?;
    Ok(weights.lambda * (masked_term(i_ref, &fwd) + masked_term(i_tgt, &back)))
}

/// Result of the local alignment term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TpsAlignment {
    pub value: f64,
    /// The two views share no pixel; `value` is then 0.
    pub empty_overlap: bool,
}

/// `w_tps`-weighted mean absolute error over the overlap of the unwarped
/// reference (placed at the canvas origin) and a warped target.
pub fn alignment_loss_tps(i_ref: &ImageBuffer, warped_tgt: &WarpedImage, weights: &LossWeights) -> Result<TpsAlignment> {
    if i_ref.channels() != warped_tgt.image.channels() {
        return Err(Error::CanvasMismatch(format!(
            "{} vs {} channels",
            i_ref.channels(),
            warped_tgt.image.channels()
        )));
    }
    let placed = warp_with(i_ref, &warped_tgt.canvas, Some);
    let (n, nc) = (placed.mask.len(), i_ref.channels());
    let mut sum = 0.0;
    let mut overlap = 0usize;
    for i in 0..n {
        if placed.mask.data()[i] > 0.5 && warped_tgt.mask.data()[i] > 0.5 {
            overlap += 1;
            for c in 0..nc {
                sum += (placed.image.plane(c)[i] - warped_tgt.image.plane(c)[i]).abs();
            }
        }
    }
    if overlap == 0 {
        return Ok(TpsAlignment { value: 0.0, empty_overlap: true });
    }
    Ok(TpsAlignment { value: weights.w_tps * sum / (n * nc) as f64, empty_overlap: false })
}

/// A deformed `(U+1) x (V+1)` control grid, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mesh {
    pub rows: usize,
    pub cols: usize,
    pub points: Vec<Point2>,
}

impl Mesh {
    pub fn new(rows: usize, cols: usize, points: Vec<Point2>) -> Result<Self> {
        if rows < 2 || cols < 2 || points.len() != rows * cols {
            return Err(Error::DimensionMismatch(format!("{} points for a {rows}x{cols} mesh", points.len())));
        }
        Ok(Self { rows, cols, points })
    }

    /// Uniform grid with `u x v` cells spanning the frame.
    pub fn uniform(width: f64, height: f64, u: usize, v: usize) -> Self {
        let points = (0..=u)
            .flat_map(|i| (0..=v).map(move |j| Point2::new(width * j as f64 / v as f64, height * i as f64 / u as f64)))
            .collect();
        Self { rows: u + 1, cols: v + 1, points }
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> Point2 {
        self.points[i * self.cols + j]
    }

    pub fn map(&self, f: impl Fn(Point2) -> Point2) -> Mesh {
        Mesh { rows: self.rows, cols: self.cols, points: self.points.iter().map(|&p| f(p)).collect() }
    }
}

fn check_mesh(mesh: &Mesh, weights: &LossWeights) -> Result<()> {
    if mesh.rows != weights.u + 1 || mesh.cols != weights.v + 1 || mesh.points.len() != mesh.rows * mesh.cols {
        return Err(Error::DimensionMismatch(format!(
            "mesh {}x{} vs {}x{} control points",
            mesh.rows,
            mesh.cols,
            weights.u + 1,
            weights.v + 1
        )));
    }
    Ok(())
}

/// Penalizes cells whose edges project shorter than `alpha` of the nominal
/// cell size.
pub fn intra_grid_loss(mesh: &Mesh, width: f64, height: f64, weights: &LossWeights) -> Result<f64> {
    check_mesh(mesh, weights)?;
    let (u, v) = (weights.u, weights.v);
    let min_w = weights.alpha * width / v as f64;
    let min_h = weights.alpha * height / u as f64;
    let mut horiz = 0.0;
    for i in 0..=u {
        for j in 0..v {
            horiz += (min_w - mesh.at(i, j + 1).sub(mesh.at(i, j)).x.abs()).max(0.0);
        }
    }
    let mut vert = 0.0;
    for i in 0..u {
        for j in 0..=v {
            vert += (min_h - mesh.at(i + 1, j).sub(mesh.at(i, j)).y.abs()).max(0.0);
        }
    }
    Ok(horiz / ((u + 1) * v) as f64 + vert / (u * (v + 1)) as f64)
}

/// Mean `1 - cos` between consecutive edges along every grid row and
/// column.
pub fn inter_grid_loss(mesh: &Mesh, weights: &LossWeights) -> Result<f64> {
    check_mesh(mesh, weights)?;
    let mut sum = 0.0;
    let mut count = 0usize;
    let mut chain = |pts: &[Point2]| -> Result<()> {
        for k in 0..pts.len().saturating_sub(2) {
            let a = pts[k + 1].sub(pts[k]);
            let b = pts[k + 2].sub(pts[k + 1]);
            let (na, nb) = (a.norm(), b.norm());
            if na == 0.0 || nb == 0.0 {
                return Err(Error::ZeroLengthEdge(format!("edge at control point {k} of a grid line")));
            }
            sum += 1.0 - a.dot(b) / (na * nb);
            count += 1;
        }
        Ok(())
    };
    for i in 0..mesh.rows {
        let row: Vec<Point2> = (0..mesh.cols).map(|j| mesh.at(i, j)).collect();
        chain(&row)?;
    }
    for j in 0..mesh.cols {
        let col: Vec<Point2> = (0..mesh.rows).map(|i| mesh.at(i, j)).collect();
        chain(&col)?;
    }
    Ok(if count == 0 { 0.0 } else { sum / count as f64 })
}

/// Weighted total `align + w_s * shape + w_c * coef`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossParts {
    /// Global plus local alignment; the local term already carries `w_tps`.
    pub align: f64,
    pub shape: f64,
    pub coef: f64,
}

pub fn total_loss(parts: &LossParts, weights: &LossWeights) -> f64 {
    parts.align + weights.w_s * parts.shape + weights.w_c * parts.coef
}

/// Every term reported by a stitch run.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub align_h: f64,
    pub align_tps: f64,
    pub tps_empty_overlap: bool,
    pub shape_intra: f64,
    pub shape_inter: f64,
    pub coef: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn parts(&self) -> LossParts {
        LossParts {
            align: self.align_h + self.align_tps,
            shape: self.shape_intra + self.shape_inter,
            coef: self.coef,
        }
    }

    /// Fill `total` from the other fields.
    pub fn finish(mut self, weights: &LossWeights) -> Self {
        self.total = total_loss(&self.parts(), weights);
        self
    }
}
