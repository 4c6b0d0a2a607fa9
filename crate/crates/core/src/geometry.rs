//! Points and image-rectangle quads.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    #[inline]
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    #[inline]
    pub fn sub(self, o: Point2) -> Point2 {
        Point2::new(self.x - o.x, self.y - o.y)
    }

    #[inline]
    pub fn add(self, o: Point2) -> Point2 {
        Point2::new(self.x + o.x, self.y + o.y)
    }

    #[inline]
    pub fn scale(self, k: f64) -> Point2 {
        Point2::new(self.x * k, self.y * k)
    }

    #[inline]
    pub fn dot(self, o: Point2) -> f64 {
        self.x * o.x + self.y * o.y
    }

    #[inline]
    pub fn cross(self, o: Point2) -> f64 {
        self.x * o.y - self.y * o.x
    }

    #[inline]
    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    #[inline]
    pub fn distance(self, o: Point2) -> f64 {
        self.sub(o).norm()
    }
}

/// Vertex indices in the fixed order used everywhere: top-left, top-right,
/// bottom-left, bottom-right. Diagonals are `TL-BR` and `TR-BL`.
pub const TL: usize = 0;
pub const TR: usize = 1;
pub const BL: usize = 2;
pub const BR: usize = 3;

/// Four vertices in `TL, TR, BL, BR` order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quad {
    pub p: [Point2; 4],
}

impl Quad {
    pub const fn new(p: [Point2; 4]) -> Self {
        Self { p }
    }

    /// Corners of a `width x height` frame at `(0,0), (W,0), (0,H), (W,H)`.
    pub fn frame(width: f64, height: f64) -> Self {
        Self::new([
            Point2::new(0.0, 0.0),
            Point2::new(width, 0.0),
            Point2::new(0.0, height),
            Point2::new(width, height),
        ])
    }

    pub fn centroid(&self) -> Point2 {
        let s = self.p.iter().fold(Point2::default(), |acc, &q| acc.add(q));
        s.scale(0.25)
    }

    /// Vertices in boundary order (TL, TR, BR, BL).
    pub fn ring(&self) -> [Point2; 4] {
        [self.p[TL], self.p[TR], self.p[BR], self.p[BL]]
    }

    /// Shoelace area over the boundary ring; positive for the image frame
    /// in y-down coordinates.
    pub fn signed_area(&self) -> f64 {
        let r = self.ring();
        0.5 * (0..4).map(|i| r[i].cross(r[(i + 1) % 4])).sum::<f64>()
    }

    /// Strictly convex with positive orientation, relative to the quad scale.
    pub fn is_convex_positive(&self) -> bool {
        let r = self.ring();
        let scale = self.diameter().max(f64::MIN_POSITIVE);
        let tol = 1e-12 * scale * scale;
        (0..4).all(|i| {
            let a = r[(i + 1) % 4].sub(r[i]);
            let b = r[(i + 2) % 4].sub(r[(i + 1) % 4]);
            a.cross(b) > tol
        })
    }

    pub fn diameter(&self) -> f64 {
        let mut d: f64 = 0.0;
        for i in 0..4 {
            for j in i + 1..4 {
                d = d.max(self.p[i].distance(self.p[j]));
            }
        }
        d
    }

    pub fn map(&self, f: impl Fn(Point2) -> Point2) -> Quad {
        Quad::new(self.p.map(f))
    }

    /// Axis-aligned bounds as `(min, max)`.
    pub fn bounds(&self) -> (Point2, Point2) {
        let mut lo = Point2::new(f64::INFINITY, f64::INFINITY);
        let mut hi = Point2::new(f64::NEG_INFINITY, f64::NEG_INFINITY);
        for q in &self.p {
            lo = Point2::new(lo.x.min(q.x), lo.y.min(q.y));
            hi = Point2::new(hi.x.max(q.x), hi.y.max(q.y));
        }
        (lo, hi)
    }
}
