//! Backward image warping, thin-plate splines and compositing.
//!
//! Warps are described by their forward map (source pixel -> plane point)
//! and executed backward: every canvas pixel is pulled back to the source
//! and bilinearly sampled. Samples that fall outside the source
//! pixel-center rectangle are zero with mask 0; nothing is clamp-extended.
//!
//! Canvas pixel `(u, v)` shows plane point `(u - offset.x, v - offset.y)`.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Point2, Quad};
use crate::homography::{decompose, invert, warp_quad, Decomposition, DecompositionCoefficients, Homography};
use crate::raster::{ImageBuffer, ScalarMap};

/// Canvases larger than this many pixels are refused.
pub const MAX_CANVAS_PIXELS: usize = 1 << 26;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Canvas {
    pub width: usize,
    pub height: usize,
    /// Translation added to plane coordinates.
    pub offset: Point2,
}

impl Canvas {
    /// A canvas that is exactly the source frame.
    pub fn frame(width: usize, height: usize) -> Self {
        Self { width, height, offset: Point2::default() }
    }

    #[inline]
    pub fn to_plane(&self, u: usize, v: usize) -> Point2 {
        Point2::new(u as f64 - self.offset.x, v as f64 - self.offset.y)
    }
}

/// Extents within this of an integer are treated as that integer.
const CANVAS_SNAP: f64 = 1e-9;

/// Bounding box of all vertices: `offset = -min`, size `ceil(max - min)`.
pub fn make_canvas(quads: &[Quad]) -> Result<Canvas> {
    let mut lo = Point2::new(f64::INFINITY, f64::INFINITY);
    let mut hi = Point2::new(f64::NEG_INFINITY, f64::NEG_INFINITY);
    for q in quads {
        let (a, b) = q.bounds();
        lo = Point2::new(lo.x.min(a.x), lo.y.min(a.y));
        hi = Point2::new(hi.x.max(b.x), hi.y.max(b.y));
    }
    if quads.is_empty() || !(lo.x.is_finite() && lo.y.is_finite() && hi.x.is_finite() && hi.y.is_finite()) {
        return Err(Error::DegenerateQuad("no finite quads for the canvas".into()));
    }
    // round-off must not add a row or column
    let width = (hi.x - lo.x - CANVAS_SNAP).ceil().max(1.0);
    let height = (hi.y - lo.y - CANVAS_SNAP).ceil().max(1.0);
    if width * height > MAX_CANVAS_PIXELS as f64 {
        return Err(Error::DegenerateQuad(format!("canvas {width}x{height} is too large")));
    }
    Ok(Canvas { width: width as usize, height: height as usize, offset: Point2::new(-lo.x, -lo.y) })
}

/// An image pulled onto a canvas with its validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct WarpedImage {
    pub image: ImageBuffer,
    pub mask: ScalarMap,
    pub canvas: Canvas,
}

impl WarpedImage {
    /// Canvas offset of the plane origin.
    pub fn origin(&self) -> Point2 {
        self.canvas.offset
    }

    /// Place an image on its own frame without resampling.
    pub fn unwarped(img: &ImageBuffer) -> Self {
        WarpedImage {
            image: img.clone(),
            mask: ScalarMap::filled(img.width(), img.height(), 1.0),
            canvas: Canvas::frame(img.width(), img.height()),
        }
    }

    pub fn same_canvas(&self, other: &WarpedImage) -> bool {
        self.canvas.width == other.canvas.width && self.canvas.height == other.canvas.height
    }
}

/// Pull `img` onto `canvas` through `backward` (plane point -> source point).
pub fn warp_with<F>(img: &ImageBuffer, canvas: &Canvas, backward: F) -> WarpedImage
where
    F: Fn(Point2) -> Option<Point2> + Sync,
{
    let (cw, ch, nc) = (canvas.width, canvas.height, img.channels());
    let rows: Vec<(Vec<f64>, Vec<f64>)> = (0..ch)
        .into_par_iter()
        .map(|v| {
            let mut px = vec![0.0; cw * nc];
            let mut mk = vec![0.0; cw];
            for u in 0..cw {
                let Some(s) = backward(canvas.to_plane(u, v)) else { continue };
                if !crate::raster::inside(s.x, s.y, img.width(), img.height()) {
                    continue;
                }
                mk[u] = 1.0;
                for c in 0..nc {
                    px[c * cw + u] = img.sample(c, s.x, s.y).unwrap_or(0.0);
                }
            }
            (px, mk)
        })
        .collect();
    let mut image = ImageBuffer::filled(cw, ch, nc, 0.0);
    let mut mask = ScalarMap::zeros(cw, ch);
    for (v, (px, mk)) in rows.into_iter().enumerate() {
        for c in 0..nc {
            image.plane_mut(c)[v * cw..(v + 1) * cw].copy_from_slice(&px[c * cw..(c + 1) * cw]);
        }
        mask.data_mut()[v * cw..(v + 1) * cw].copy_from_slice(&mk);
    }
    WarpedImage { image, mask, canvas: *canvas }
}

/// Warp by `h` (source -> plane) onto `canvas`.
pub fn warp_image_h(img: &ImageBuffer, h: &Homography, canvas: &Canvas) -> Result<WarpedImage> {
    let inv = invert(h)?;
    Ok(warp_with(img, canvas, |p| inv.apply(p)))
}

/// Validity mask alone: the warp of an all-ones image.
pub fn warp_mask_h(width: usize, height: usize, h: &Homography, canvas: &Canvas) -> Result<ScalarMap> {
    let ones = ImageBuffer::filled(width, height, 1, 1.0);
    Ok(warp_image_h(&ones, h, canvas)?.mask)
}

/// `r^2 log r^2`, zero at the origin.
#[inline]
fn tps_kernel(r2: f64) -> f64 {
    if r2 > 0.0 {
        r2 * r2.ln()
    } else {
        0.0
    }
}

/// Thin-plate spline `R^2 -> R^2` through control points.
///
/// Coordinates are centred and scaled internally; the stored weights and
/// affine part live in those normalized units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TpsTransform {
    src: Vec<Point2>,
    dst: Vec<Point2>,
    center: Point2,
    scale: f64,
    /// Normalized source points.
    nodes: Vec<Point2>,
    /// Kernel weights, one 2-vector per control point.
    weights: Vec<[f64; 2]>,
    /// `[a0, ax, ay]` for x then y, normalized units.
    affine: [[f64; 3]; 2],
    /// `(rows, cols)` when the sources form a regular grid.
    grid: Option<(usize, usize)>,
}

impl TpsTransform {
    pub fn sources(&self) -> &[Point2] {
        &self.src
    }

    pub fn targets(&self) -> &[Point2] {
        &self.dst
    }

    pub fn bending_weights(&self) -> &[[f64; 2]] {
        &self.weights
    }

    pub fn max_bending_weight(&self) -> f64 {
        self.weights.iter().flat_map(|w| w.iter()).map(|v| v.abs()).fold(0.0, f64::max)
    }

    /// Record that the sources form a `rows x cols` grid (row-major).
    pub fn with_grid(mut self, rows: usize, cols: usize) -> Self {
        if rows * cols == self.src.len() {
            self.grid = Some((rows, cols));
        }
        self
    }

    #[inline]
    fn normalize(&self, p: Point2) -> Point2 {
        p.sub(self.center).scale(self.scale)
    }

    #[inline]
    pub fn apply(&self, p: Point2) -> Point2 {
        let q = self.normalize(p);
        let a = &self.affine;
        let mut x = a[0][0] + a[0][1] * q.x + a[0][2] * q.y;
        let mut y = a[1][0] + a[1][1] * q.x + a[1][2] * q.y;
        for (n, w) in self.nodes.iter().zip(&self.weights) {
            let u = tps_kernel((q.x - n.x).powi(2) + (q.y - n.y).powi(2));
            x += w[0] * u;
            y += w[1] * u;
        }
        Point2::new(x / self.scale + self.center.x, y / self.scale + self.center.y)
    }

    /// Jacobian determinant of the forward map at `p`.
    pub fn jacobian_det(&self, p: Point2) -> f64 {
        let q = self.normalize(p);
        let a = &self.affine;
        let (mut xx, mut xy, mut yx, mut yy) = (a[0][1], a[0][2], a[1][1], a[1][2]);
        for (n, w) in self.nodes.iter().zip(&self.weights) {
            let (dx, dy) = (q.x - n.x, q.y - n.y);
            let r2 = dx * dx + dy * dy;
            if r2 > 0.0 {
                let g = 2.0 * (r2.ln() + 1.0);
                xx += w[0] * g * dx;
                xy += w[0] * g * dy;
                yx += w[1] * g * dx;
                yy += w[1] * g * dy;
            }
        }
        xx * yy - xy * yx
    }

    /// Reverse interpolant: solve with sources and targets swapped.
    pub fn inverse(&self) -> Result<TpsTransform> {
        tps_solve(&self.dst, &self.src)
    }

    /// Fails with `FoldedMesh` when the Jacobian determinant is not positive
    /// somewhere on the control region sampled four times finer than the
    /// control spacing.
    pub fn check_folding(&self) -> Result<()> {
        let (rows, cols) = self.grid.unwrap_or_else(|| {
            let k = (self.src.len() as f64).sqrt().ceil() as usize;
            (k.max(2), k.max(2))
        });
        let (lo, hi) = bounds(&self.src);
        let (nx, ny) = (4 * (cols.max(2) - 1), 4 * (rows.max(2) - 1));
        for j in 0..=ny {
            for i in 0..=nx {
                let p = Point2::new(
                    lo.x + (hi.x - lo.x) * i as f64 / nx as f64,
                    lo.y + (hi.y - lo.y) * j as f64 / ny as f64,
                );
                let det = self.jacobian_det(p);
                if !(det > 0.0) {
                    return Err(Error::FoldedMesh(format!(
                        "Jacobian determinant {det:.3e} at ({:.1}, {:.1})",
                        p.x, p.y
                    )));
                }
            }
        }
        Ok(())
    }
}

fn bounds(pts: &[Point2]) -> (Point2, Point2) {
    pts.iter().fold(
        (Point2::new(f64::INFINITY, f64::INFINITY), Point2::new(f64::NEG_INFINITY, f64::NEG_INFINITY)),
        |(lo, hi), p| (Point2::new(lo.x.min(p.x), lo.y.min(p.y)), Point2::new(hi.x.max(p.x), hi.y.max(p.y))),
    )
}

/// Solve the thin-plate spline taking `src[i]` to `dst[i]`.
pub fn tps_solve(src: &[Point2], dst: &[Point2]) -> Result<TpsTransform> {
    let n = src.len();
    if n != dst.len() {
        return Err(Error::DimensionMismatch(format!("{n} sources vs {} targets", dst.len())));
    }
    if n < 3 {
        return Err(Error::SingularSystem(format!("{n} control points, need at least 3")));
    }
    let center = src.iter().fold(Point2::default(), |a, &p| a.add(p)).scale(1.0 / n as f64);
    let spread = src.iter().map(|p| p.distance(center)).fold(0.0, f64::max);
    if !(spread > 0.0) {
        return Err(Error::SingularSystem("control points coincide".into()));
    }
    let scale = 1.0 / spread;
    let nodes: Vec<Point2> = src.iter().map(|p| p.sub(center).scale(scale)).collect();

    // collinear sources leave the affine block rank deficient
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for p in &nodes {
        sxx += p.x * p.x;
        sxy += p.x * p.y;
        syy += p.y * p.y;
    }
    let tr = sxx + syy;
    let det = sxx * syy - sxy * sxy;
    if det <= 1e-12 * tr * tr {
        return Err(Error::SingularSystem("control points are collinear".into()));
    }
    for i in 0..n {
        for j in i + 1..n {
            if nodes[i].distance(nodes[j]) < 1e-9 {
                return Err(Error::SingularSystem(format!("duplicate control points {i} and {j}")));
            }
        }
    }

    let m = n + 3;
    let mut l = DMatrix::<f64>::zeros(m, m);
    for i in 0..n {
        for j in i + 1..n {
            let d = nodes[i].sub(nodes[j]);
            let k = tps_kernel(d.dot(d));
            l[(i, j)] = k;
            l[(j, i)] = k;
        }
        let row = [1.0, nodes[i].x, nodes[i].y];
        for (c, v) in row.iter().enumerate() {
            l[(i, n + c)] = *v;
            l[(n + c, i)] = *v;
        }
    }
    let mut rhs = DMatrix::<f64>::zeros(m, 2);
    for (i, p) in dst.iter().enumerate() {
        let q = p.sub(center).scale(scale);
        rhs[(i, 0)] = q.x;
        rhs[(i, 1)] = q.y;
    }
    let sol = l
        .clone()
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::SingularSystem("thin-plate system is singular".into()))?;
    let resid = (&l * &sol - &rhs).abs().max();
    if !resid.is_finite() || resid > 1e-6 {
        return Err(Error::SingularSystem(format!("thin-plate residual {resid:.3e}")));
    }
    let weights = (0..n).map(|i| [sol[(i, 0)], sol[(i, 1)]]).collect();
    let affine = [
        [sol[(n, 0)], sol[(n + 1, 0)], sol[(n + 2, 0)]],
        [sol[(n, 1)], sol[(n + 1, 1)], sol[(n + 2, 1)]],
    ];
    Ok(TpsTransform {
        src: src.to_vec(),
        dst: dst.to_vec(),
        center,
        scale,
        nodes,
        weights,
        affine,
        grid: None,
    })
}

pub fn tps_apply(t: &TpsTransform, pts: &[Point2]) -> Vec<Point2> {
    pts.iter().map(|&p| t.apply(p)).collect()
}

/// Regular `(rows) x (cols)` grid of points spanning `[0, W] x [0, H]`,
/// row-major.
pub fn control_grid(width: f64, height: f64, rows: usize, cols: usize) -> Vec<Point2> {
    let mut pts = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            pts.push(Point2::new(
                width * c as f64 / (cols - 1).max(1) as f64,
                height * r as f64 / (rows - 1).max(1) as f64,
            ));
        }
    }
    pts
}

/// Warp by a thin-plate spline (source -> plane) onto `canvas`.
pub fn warp_image_tps(img: &ImageBuffer, t: &TpsTransform, canvas: &Canvas) -> Result<WarpedImage> {
    t.check_folding()?;
    let inv = t.inverse()?;
    Ok(warp_with(img, canvas, |p| Some(inv.apply(p))))
}

/// Both views on the shared plane.
#[derive(Debug, Clone)]
pub struct Stitched {
    pub reference: WarpedImage,
    pub target: WarpedImage,
    pub canvas: Canvas,
    pub decomposition: Decomposition,
}

/// Backward map for one side: plane point -> optional TPS pull-back ->
/// inverse global warp.
fn side_backward(h: &Homography, tps: Option<&TpsTransform>) -> Result<impl Fn(Point2) -> Option<Point2> + Sync> {
    let inv = invert(h)?;
    let tps_inv = match tps {
        Some(t) => {
            t.check_folding()?;
            Some(t.inverse()?)
        }
        None => None,
    };
    Ok(move |p: Point2| {
        let q = match &tps_inv {
            Some(t) => t.apply(p),
            None => p,
        };
        inv.apply(q)
    })
}

/// Decompose `h` with `c` and warp both images onto one canvas. Optional
/// thin-plate splines act on plane coordinates after each global warp.
pub fn bidirectional_stitch(
    i_ref: &ImageBuffer,
    i_tgt: &ImageBuffer,
    h: &Homography,
    c: &DecompositionCoefficients,
    tps_ref: Option<&TpsTransform>,
    tps_tgt: Option<&TpsTransform>,
) -> Result<Stitched> {
    if !i_ref.same_dims(i_tgt) {
        return Err(Error::DimensionMismatch(format!(
            "reference {}x{} vs target {}x{}",
            i_ref.width(),
            i_ref.height(),
            i_tgt.width(),
            i_tgt.height()
        )));
    }
    let (w, hh) = (i_ref.width() as f64, i_ref.height() as f64);
    let d = decompose(h, c, w, hh)?;
    let q_ref = warp_quad(&d.h_ref, w, hh)?;
    let q_tgt = warp_quad(&d.h_tgt, w, hh)?;
    let mut quads = vec![q_ref, q_tgt];
    for t in [tps_ref, tps_tgt].into_iter().flatten() {
        let (lo, hi) = bounds(t.targets());
        quads.push(Quad::new([lo, Point2::new(hi.x, lo.y), Point2::new(lo.x, hi.y), hi]));
    }
    let canvas = make_canvas(&quads)?;
    let reference = warp_with(i_ref, &canvas, side_backward(&d.h_ref, tps_ref)?);
    let target = warp_with(i_tgt, &canvas, side_backward(&d.h_tgt, tps_tgt)?);
    Ok(Stitched { reference, target, canvas, decomposition: d })
}

/// Mean over the overlap, single-view pixels copied, zero elsewhere.
pub fn composite_average(a: &WarpedImage, b: &WarpedImage) -> Result<ImageBuffer> {
    if !a.same_canvas(b) || a.image.channels() != b.image.channels() {
        return Err(Error::CanvasMismatch(format!(
            "{}x{}x{} vs {}x{}x{}",
            a.canvas.width,
            a.canvas.height,
            a.image.channels(),
            b.canvas.width,
            b.canvas.height,
            b.image.channels()
        )));
    }
    let (w, h, nc) = (a.canvas.width, a.canvas.height, a.image.channels());
    let mut out = ImageBuffer::filled(w, h, nc, 0.0);
    for y in 0..h {
        for x in 0..w {
            let (ma, mb) = (a.mask.get(x, y) > 0.5, b.mask.get(x, y) > 0.5);
            for c in 0..nc {
                let v = match (ma, mb) {
                    (true, true) => 0.5 * (a.image.get(c, x, y) + b.image.get(c, x, y)),
                    (true, false) => a.image.get(c, x, y),
                    (false, true) => b.image.get(c, x, y),
                    (false, false) => 0.0,
                };
                out.set(c, x, y, v);
            }
        }
    }
    Ok(out)
}

/// Solve `A x = b` by least squares; helper for affine fits in tests and
/// diagnostics.
pub fn least_squares(a: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    a.clone().svd(true, true).solve(b, 1e-12).ok()
}
