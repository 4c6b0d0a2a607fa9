//! Projective transforms of the image plane.
//!
//! A [`Homography`] maps target-image coordinates to reference-image
//! coordinates. Matrices are kept in canonical scale (`m[2][2] = 1`, or unit
//! Frobenius norm when that entry vanishes) so that equal transforms compare
//! equal entry by entry.
//!
//! Composition follows function application: `compose(a, b)` applies `b`
//! first, so `compose(a, b).apply(x) == a.apply(b.apply(x))`.
//!
//! The four-point representation stores how far each corner of the
//! `W x H` frame moves, with corners fixed at `(0,0), (W,0), (0,H), (W,H)`
//! in `TL, TR, BL, BR` order.

use nalgebra::{SMatrix, SVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Point2, Quad};

/// Largest condition number accepted for the eight-equation corner system.
pub const MAX_CONDITION: f64 = 1e12;

/// Smallest projective denominator accepted when mapping a point.
pub const MIN_DENOMINATOR: f64 = 1e-8;

/// Invertible 3x3 projective map, row-major, canonical scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "HomographyJson", into = "HomographyJson")]
pub struct Homography {
    m: [f64; 9],
}

#[derive(Serialize, Deserialize)]
struct HomographyJson {
    h: [f64; 9],
}

impl TryFrom<HomographyJson> for Homography {
    type Error = Error;
    fn try_from(j: HomographyJson) -> Result<Self> {
        Homography::from_rows(j.h)
    }
}

impl From<Homography> for HomographyJson {
    fn from(h: Homography) -> Self {
        HomographyJson { h: h.m }
    }
}

impl Homography {
    pub const IDENTITY: Homography = Homography { m: [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0] };

    /// Canonicalize and validate a row-major matrix.
    pub fn from_rows(m: [f64; 9]) -> Result<Self> {
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::DegenerateQuad("non-finite matrix entry".into()));
        }
        let frob = m.iter().map(|v| v * v).sum::<f64>().sqrt();
        if frob == 0.0 {
            return Err(Error::DegenerateQuad("zero matrix".into()));
        }
        let scale = if m[8].abs() > 1e-12 * frob {
            m[8]
        } else {
            // sign fixed by the first non-negligible entry
            let lead = m.iter().copied().find(|v| v.abs() > 1e-12 * frob).unwrap_or(1.0);
            frob * lead.signum()
        };
        let m = m.map(|v| v / scale);
        let h = Homography { m };
        let norm = m.iter().map(|v| v * v).sum::<f64>().sqrt();
        if h.det().abs() <= 1e-14 * norm * norm * norm {
            return Err(Error::DegenerateQuad("singular matrix".into()));
        }
        Ok(h)
    }

    pub fn identity() -> Self {
        Self::IDENTITY
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Homography { m: [1.0, 0.0, tx, 0.0, 1.0, ty, 0.0, 0.0, 1.0] }
    }

    pub fn scaling(sx: f64, sy: f64) -> Result<Self> {
        Self::from_rows([sx, 0.0, 0.0, 0.0, sy, 0.0, 0.0, 0.0, 1.0])
    }

    /// Rotation by `angle` radians and uniform scale `s`, then translation.
    pub fn similarity(s: f64, angle: f64, tx: f64, ty: f64) -> Result<Self> {
        let (sin, cos) = angle.sin_cos();
        Self::from_rows([s * cos, -s * sin, tx, s * sin, s * cos, ty, 0.0, 0.0, 1.0])
    }

    pub fn matrix(&self) -> [f64; 9] {
        self.m
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.m[row * 3 + col]
    }

    pub fn det(&self) -> f64 {
        let m = &self.m;
        m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6])
            + m[2] * (m[3] * m[7] - m[4] * m[6])
    }

    /// Projective denominator `h_3 . (x, y, 1)`.
    #[inline]
    pub fn denominator(&self, p: Point2) -> f64 {
        self.m[6] * p.x + self.m[7] * p.y + self.m[8]
    }

    /// Map a point; `None` when it lands at (or near) infinity.
    #[inline]
    pub fn apply(&self, p: Point2) -> Option<Point2> {
        let w = self.denominator(p);
        if w.abs() <= MIN_DENOMINATOR {
            return None;
        }
        Some(self.apply_unchecked(p))
    }

    #[inline]
    pub fn apply_unchecked(&self, p: Point2) -> Point2 {
        let m = &self.m;
        let w = m[6] * p.x + m[7] * p.y + m[8];
        Point2::new((m[0] * p.x + m[1] * p.y + m[2]) / w, (m[3] * p.x + m[4] * p.y + m[5]) / w)
    }

    pub fn inverse(&self) -> Result<Homography> {
        invert(self)
    }

    /// Largest absolute entry difference, both sides in canonical scale.
    pub fn max_abs_diff(&self, other: &Homography) -> f64 {
        self.m.iter().zip(&other.m).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    /// Entry difference relative to the larger matrix norm (infinity norm).
    pub fn relative_diff(&self, other: &Homography) -> f64 {
        let scale = self.m.iter().chain(&other.m).map(|v| v.abs()).fold(1.0, f64::max);
        self.max_abs_diff(other) / scale
    }

    /// Largest corner displacement between two transforms on a frame.
    pub fn corner_error(&self, other: &Homography, width: f64, height: f64) -> f64 {
        Quad::frame(width, height)
            .p
            .iter()
            .map(|&c| match (self.apply(c), other.apply(c)) {
                (Some(a), Some(b)) => a.distance(b),
                _ => f64::INFINITY,
            })
            .fold(0.0, f64::max)
    }

    /// Mean corner displacement between two transforms on a frame.
    pub fn mean_corner_error(&self, other: &Homography, width: f64, height: f64) -> f64 {
        let q = Quad::frame(width, height);
        let total: f64 = q
            .p
            .iter()
            .map(|&c| match (self.apply(c), other.apply(c)) {
                (Some(a), Some(b)) => a.distance(b),
                _ => f64::INFINITY,
            })
            .sum();
        total / 4.0
    }
}

/// Matrix inverse in canonical scale.
pub fn invert(h: &Homography) -> Result<Homography> {
    let m = &h.m;
    let det = h.det();
    if det == 0.0 || !det.is_finite() {
        return Err(Error::DegenerateQuad("cannot invert a singular homography".into()));
    }
    let adj = [
        m[4] * m[8] - m[5] * m[7],
        m[2] * m[7] - m[1] * m[8],
        m[1] * m[5] - m[2] * m[4],
        m[5] * m[6] - m[3] * m[8],
        m[0] * m[8] - m[2] * m[6],
        m[2] * m[3] - m[0] * m[5],
        m[3] * m[7] - m[4] * m[6],
        m[1] * m[6] - m[0] * m[7],
        m[0] * m[4] - m[1] * m[3],
    ];
    Homography::from_rows(adj.map(|v| v / det))
}

/// `compose(a, b)` applies `b` first, then `a`.
pub fn compose(a: &Homography, b: &Homography) -> Result<Homography> {
    let (x, y) = (&a.m, &b.m);
    let mut m = [0.0; 9];
    for r in 0..3 {
        for c in 0..3 {
            m[r * 3 + c] = (0..3).map(|k| x[r * 3 + k] * y[k * 3 + c]).sum();
        }
    }
    Homography::from_rows(m)
}

/// Corner displacements of a `width x height` frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FourPointOffsets {
    pub offsets: [Point2; 4],
    pub width: f64,
    pub height: f64,
}

impl FourPointOffsets {
    pub fn new(offsets: [Point2; 4], width: f64, height: f64) -> Self {
        Self { offsets, width, height }
    }

    pub fn zero(width: f64, height: f64) -> Self {
        Self::new([Point2::default(); 4], width, height)
    }

    pub fn uniform(d: Point2, width: f64, height: f64) -> Self {
        Self::new([d; 4], width, height)
    }

    /// The displaced frame corners.
    pub fn quad(&self) -> Quad {
        let frame = Quad::frame(self.width, self.height);
        Quad::new(std::array::from_fn(|i| frame.p[i].add(self.offsets[i])))
    }

    /// Per-vertex scaling of the displacements.
    pub fn scaled(&self, c: &DecompositionCoefficients) -> Self {
        Self::new(std::array::from_fn(|i| self.offsets[i].scale(c.c[i])), self.width, self.height)
    }
}

/// Solve the homography taking the frame corners to the displaced corners.
pub fn offsets_to_homography(off: &FourPointOffsets) -> Result<Homography> {
    if !(off.width > 0.0 && off.height > 0.0) {
        return Err(Error::DegenerateQuad(format!("frame {}x{} is empty", off.width, off.height)));
    }
    if off.offsets.iter().all(|d| d.x == 0.0 && d.y == 0.0) {
        return Ok(Homography::identity());
    }
    let dst = off.quad();
    if !dst.is_convex_positive() {
        return Err(Error::DegenerateQuad("displaced corners do not form a convex quad".into()));
    }
    let src = Quad::frame(off.width, off.height);
    four_point_homography(&src, &dst)
}

/// Exact homography for four correspondences (normalized coordinates,
/// partial-pivot solve, condition check).
pub(crate) fn four_point_homography(src: &Quad, dst: &Quad) -> Result<Homography> {
    let (ts, src_n) = normalize4(&src.p);
    let (td, dst_n) = normalize4(&dst.p);
    let mut a = SMatrix::<f64, 8, 8>::zeros();
    let mut b = SVector::<f64, 8>::zeros();
    for i in 0..4 {
        let (x, y) = (src_n[i].x, src_n[i].y);
        let (u, v) = (dst_n[i].x, dst_n[i].y);
        let r = 2 * i;
        a[(r, 0)] = x;
        a[(r, 1)] = y;
        a[(r, 2)] = 1.0;
        a[(r, 6)] = -u * x;
        a[(r, 7)] = -u * y;
        b[r] = u;
        a[(r + 1, 3)] = x;
        a[(r + 1, 4)] = y;
        a[(r + 1, 5)] = 1.0;
        a[(r + 1, 6)] = -v * x;
        a[(r + 1, 7)] = -v * y;
        b[r + 1] = v;
    }
    let sv = a.singular_values();
    let (smax, smin) = (sv.max(), sv.min());
    if !(smin > 0.0) || smax / smin > MAX_CONDITION {
        return Err(Error::DegenerateQuad(format!(
            "corner system is ill-conditioned (cond {:.3e})",
            smax / smin
        )));
    }
    let sol = a
        .lu()
        .solve(&b)
        .ok_or_else(|| Error::DegenerateQuad("corner system is singular".into()))?;
    let hn = [sol[0], sol[1], sol[2], sol[3], sol[4], sol[5], sol[6], sol[7], 1.0];
    // H = Td^-1 * Hn * Ts
    let hn = Homography::from_rows(hn)?;
    let td_inv = invert(&td)?;
    compose(&td_inv, &compose(&hn, &ts)?)
}

/// Similarity normalization: centroid to origin, mean distance sqrt(2).
fn normalize4(p: &[Point2; 4]) -> (Homography, [Point2; 4]) {
    let c = p.iter().fold(Point2::default(), |a, &q| a.add(q)).scale(0.25);
    let mean_d = p.iter().map(|q| q.distance(c)).sum::<f64>() / 4.0;
    let s = if mean_d > 0.0 { std::f64::consts::SQRT_2 / mean_d } else { 1.0 };
    let t = Homography { m: [s, 0.0, -s * c.x, 0.0, s, -s * c.y, 0.0, 0.0, 1.0] };
    (t, p.map(|q| q.sub(c).scale(s)))
}

/// Frame-corner displacements produced by `h`.
pub fn homography_to_offsets(h: &Homography, width: f64, height: f64) -> Result<FourPointOffsets> {
    let frame = Quad::frame(width, height);
    let mapped = warp_quad(h, width, height)?;
    if !mapped.is_convex_positive() {
        return Err(Error::DegenerateQuad("frame maps to a non-convex quad".into()));
    }
    Ok(FourPointOffsets::new(
        std::array::from_fn(|i| mapped.p[i].sub(frame.p[i])),
        width,
        height,
    ))
}

/// Frame corners mapped through `h`, in `TL, TR, BL, BR` order.
pub fn warp_quad(h: &Homography, width: f64, height: f64) -> Result<Quad> {
    let frame = Quad::frame(width, height);
    let mut out = [Point2::default(); 4];
    for (i, &c) in frame.p.iter().enumerate() {
        // every corner must sit on the same side of the line at infinity as the origin
        if h.denominator(c) <= MIN_DENOMINATOR {
            return Err(Error::PointAtInfinity(format!("frame corner ({}, {})", c.x, c.y)));
        }
        out[i] = h.apply_unchecked(c);
    }
    Ok(Quad::new(out))
}

/// Per-vertex blend factors `c_i` in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CoefficientsJson", into = "CoefficientsJson")]
pub struct DecompositionCoefficients {
    pub c: [f64; 4],
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CoefficientsJson {
    c: [f64; 4],
}

impl TryFrom<CoefficientsJson> for DecompositionCoefficients {
    type Error = String;

    /// Unlike [`DecompositionCoefficients::new`], stored values are never
    /// clamped: out-of-range input is an error.
    fn try_from(j: CoefficientsJson) -> std::result::Result<Self, String> {
        if j.c.iter().all(|v| (0.0..=1.0).contains(v)) {
            Ok(DecompositionCoefficients { c: j.c })
        } else {
            Err(format!("coefficients must lie in [0, 1], got {:?}", j.c))
        }
    }
}

impl From<DecompositionCoefficients> for CoefficientsJson {
    fn from(c: DecompositionCoefficients) -> Self {
        CoefficientsJson { c: c.c }
    }
}

impl DecompositionCoefficients {
    /// Clamps each entry into `[0, 1]`; NaN becomes 0.
    pub fn new(c: [f64; 4]) -> Self {
        Self { c: c.map(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) }) }
    }

    pub fn uniform(t: f64) -> Self {
        Self::new([t; 4])
    }

    /// `c = 0`: the target frame is the stitching plane.
    pub fn target_plane() -> Self {
        Self::uniform(0.0)
    }

    /// `c = 1`: the reference frame is the stitching plane.
    pub fn reference_plane() -> Self {
        Self::uniform(1.0)
    }

    pub fn middle_plane() -> Self {
        Self::uniform(0.5)
    }
}

impl Default for DecompositionCoefficients {
    fn default() -> Self {
        Self::target_plane()
    }
}

/// The two warps onto a shared plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Decomposition {
    /// Reference image -> plane.
    pub h_ref: Homography,
    /// Target image -> plane.
    pub h_tgt: Homography,
}

/// Split `h` (target -> reference) into warps of both images onto the plane
/// selected by `c`.
///
/// `h_tgt` moves each target corner the fraction `c_i` of the way along
/// its displacement under `h`. `h_ref = h_tgt . h^-1`, so a target point `x`
/// and its reference counterpart `h(x)` land on the same plane point, and
/// `h = h_ref^-1 . h_tgt`.
pub fn decompose(
    h: &Homography,
    c: &DecompositionCoefficients,
    width: f64,
    height: f64,
) -> Result<Decomposition> {
    if c.c.iter().all(|&v| v == 1.0) {
        return Ok(Decomposition { h_ref: Homography::IDENTITY, h_tgt: *h });
    }
    if c.c.iter().all(|&v| v == 0.0) {
        return Ok(Decomposition { h_ref: invert(h)?, h_tgt: Homography::IDENTITY });
    }
    let off = homography_to_offsets(h, width, height)?;
    let h_tgt = offsets_to_homography(&off.scaled(c))?;
    let h_ref = compose(&h_tgt, &invert(h)?)?;
    Ok(Decomposition { h_ref, h_tgt })
}

/// Dense per-pixel displacement `(m_x, m_y)` induced by a homography.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionField {
    pub width: usize,
    pub height: usize,
    pub data: Vec<[f64; 2]>,
}

impl MotionField {
    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [f64; 2] {
        self.data[y * self.width + x]
    }
}

/// `m(x, y) = h(x, y) - (x, y)` at every pixel.
pub fn motion_field(h: &Homography, width: usize, height: usize) -> Result<MotionField> {
    let mut data = Vec::with_capacity(width * height);
    for y in 0..height {
        for x in 0..width {
            let p = Point2::new(x as f64, y as f64);
            let q = h.apply(p).ok_or_else(|| {
                Error::PointAtInfinity(format!("pixel ({x}, {y}) has a vanishing denominator"))
            })?;
            data.push([q.x - p.x, q.y - p.y]);
        }
    }
    Ok(MotionField { width, height, data })
}
