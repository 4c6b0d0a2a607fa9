//! Distortion scoring of warped frames and the semantic distortion loss.
//!
//! A warp that is a similarity (rotation, uniform scale, translation) does
//! not distort content. Everything else is measured on the image of the
//! frame rectangle, one score per vertex:
//!
//! * distance: `|p_i - p_c| / min_j |p_j - p_c| - 1`, with `p_c` the vertex mean;
//! * angle: `|cos|` of the angle between the two frame edges meeting at the
//!   vertex (edges to its horizontal and vertical neighbours);
//! * global: `|cos|` of the angle between the diagonals `TL-BR` and `TR-BL`,
//!   shared by all four vertices.
//!
//! The final per-vertex score is their sum. Scores are spread over the
//! source image by bilinear interpolation (the distortion map) and weighted
//! by a saliency map in [`semantic_distortion_loss`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Point2, Quad, BL, BR, TL, TR};
use crate::raster::{ImageBuffer, ScalarMap};

/// Edge neighbours of each vertex: horizontal first, then vertical.
const NEIGHBOURS: [(usize, usize); 4] = [(TR, BL), (TL, BR), (BR, TL), (BL, TR)];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VertexScores {
    pub distance: [f64; 4],
    pub angle: [f64; 4],
    pub global: f64,
    #[serde(rename = "final")]
    pub final_: [f64; 4],
}

impl VertexScores {
    pub fn zero() -> Self {
        Self { distance: [0.0; 4], angle: [0.0; 4], global: 0.0, final_: [0.0; 4] }
    }
}

pub fn distance_scores(q: &Quad) -> Result<[f64; 4]> {
    let c = q.centroid();
    let d = q.p.map(|p| p.distance(c));
    let min = d.iter().copied().fold(f64::INFINITY, f64::min);
    if !(min > 1e-9 * q.diameter()) {
        return Err(Error::DegenerateQuad("a vertex coincides with the quad centroid".into()));
    }
    Ok(d.map(|v| v / min - 1.0))
}

fn abs_cos(a: Point2, b: Point2, what: &str) -> Result<f64> {
    let (na, nb) = (a.norm(), b.norm());
    if !(na > 0.0 && nb > 0.0) {
        return Err(Error::DegenerateQuad(format!("zero-length {what}")));
    }
    Ok((a.dot(b).abs() / (na * nb)).min(1.0))
}

pub fn angle_scores(q: &Quad) -> Result<[f64; 4]> {
    let mut out = [0.0; 4];
    for (i, &(h, v)) in NEIGHBOURS.iter().enumerate() {
        out[i] = abs_cos(q.p[h].sub(q.p[i]), q.p[v].sub(q.p[i]), "edge")?;
    }
    Ok(out)
}

pub fn global_score(q: &Quad) -> Result<f64> {
    abs_cos(q.p[BR].sub(q.p[TL]), q.p[BL].sub(q.p[TR]), "diagonal")
}

pub fn final_scores(q: &Quad) -> Result<VertexScores> {
    let distance = distance_scores(q)?;
    let angle = angle_scores(q)?;
    let global = global_score(q)?;
    let final_ = std::array::from_fn(|i| distance[i] + angle[i] + global);
    Ok(VertexScores { distance, angle, global, final_ })
}

/// Bilinear weights of the four vertices at normalized position `(u, v)`.
#[inline]
pub(crate) fn vertex_weights(u: f64, v: f64) -> [f64; 4] {
    [(1.0 - u) * (1.0 - v), u * (1.0 - v), (1.0 - u) * v, u * v]
}

#[inline]
fn normalized_coord(i: usize, n: usize) -> f64 {
    if n > 1 {
        i as f64 / (n - 1) as f64
    } else {
        0.0
    }
}

/// Per-pixel bilinear blend of the final vertex scores over a
/// `width x height` source frame. Corner pixels carry the vertex values.
pub fn distortion_map(scores: &VertexScores, width: usize, height: usize) -> Result<ScalarMap> {
    if width == 0 || height == 0 {
        return Err(Error::DimensionMismatch(format!("{width}x{height} distortion map")));
    }
    let s = scores.final_;
    Ok(ScalarMap::from_fn(width, height, |x, y| {
        let w = vertex_weights(normalized_coord(x, width), normalized_coord(y, height));
        w[0] * s[0] + w[1] * s[1] + w[2] * s[2] + w[3] * s[3]
    }))
}

/// `mean(w_i * S)` for each vertex weight field `w_i`; the loss of any
/// distortion map built from vertex scores `s` is then `sum_i s_i m_i`.
pub fn vertex_moments(saliency: &ScalarMap) -> [f64; 4] {
    let (w, h) = (saliency.width(), saliency.height());
    let mut acc = [0.0; 4];
    for y in 0..h {
        let v = normalized_coord(y, h);
        let mut row = [0.0; 4];
        for x in 0..w {
            let s = saliency.get(x, y);
            let wt = vertex_weights(normalized_coord(x, w), v);
            for k in 0..4 {
                row[k] += wt[k] * s;
            }
        }
        for k in 0..4 {
            acc[k] += row[k];
        }
    }
    let n = (w * h).max(1) as f64;
    acc.map(|a| a / n)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SaliencyConfig {
    /// Gaussian standard deviation in pixels.
    pub sigma: f64,
}

impl Default for SaliencyConfig {
    fn default() -> Self {
        Self { sigma: 2.0 }
    }
}

impl SaliencyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config("saliency.sigma: must be a finite non-negative number".into()));
        }
        Ok(())
    }
}

/// Raw saliency: Gaussian-smoothed gradient magnitude of luma.
///
/// Stand-in for deep semantic features; externally computed rasters can be
/// used instead (see [`crate::io::read_scalar_map`]).
pub fn saliency_map(img: &ImageBuffer, cfg: &SaliencyConfig) -> Result<ScalarMap> {
    if img.is_empty() {
        return Err(Error::EmptyImage);
    }
    let luma = img.luma();
    Ok(gaussian_blur(&gradient_magnitude(&luma), cfg.sigma))
}

/// Central-difference gradient magnitude with replicated borders.
pub fn gradient_magnitude(m: &ScalarMap) -> ScalarMap {
    let (w, h) = (m.width(), m.height());
    ScalarMap::from_fn(w, h, |x, y| {
        let gx = 0.5 * (m.get((x + 1).min(w - 1), y) - m.get(x.saturating_sub(1), y));
        let gy = 0.5 * (m.get(x, (y + 1).min(h - 1)) - m.get(x, y.saturating_sub(1)));
        gx.hypot(gy)
    })
}

pub(crate) fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let r = (3.0 * sigma).ceil() as i64;
    let k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian blur with replicated borders.
pub fn gaussian_blur(m: &ScalarMap, sigma: f64) -> ScalarMap {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as i64;
    let (w, h) = (m.width() as i64, m.height() as i64);
    let horiz = ScalarMap::from_fn(m.width(), m.height(), |x, y| {
        k.iter()
            .enumerate()
            .map(|(i, kv)| kv * m.get((x as i64 + i as i64 - r).clamp(0, w - 1) as usize, y))
            .sum()
    });
    ScalarMap::from_fn(m.width(), m.height(), |x, y| {
        k.iter()
            .enumerate()
            .map(|(i, kv)| kv * horiz.get(x, (y as i64 + i as i64 - r).clamp(0, h - 1) as usize))
            .sum()
    })
}

/// Joint min-max normalization of two saliency maps into `[0, 1]`.
/// A flat joint range yields two zero maps.
pub fn normalize_saliency_pair(a: &ScalarMap, b: &ScalarMap) -> (ScalarMap, ScalarMap) {
    let range = match (a.min_max(), b.min_max()) {
        (Some((l0, h0)), Some((l1, h1))) => (l0.min(l1), h0.max(h1)),
        (Some(r), None) | (None, Some(r)) => r,
        (None, None) => (0.0, 0.0),
    };
    let (lo, hi) = range;
    let norm = |m: &ScalarMap| {
        let mut out = m.clone();
        for v in out.data_mut() {
            *v = if hi > lo { ((*v - lo) / (hi - lo)).clamp(0.0, 1.0) } else { 0.0 };
        }
        out
    };
    (norm(a), norm(b))
}

/// `mean(D_ref * S_ref) + mean(D_tgt * S_tgt)`.
pub fn semantic_distortion_loss(
    d_ref: &ScalarMap,
    s_ref: &ScalarMap,
    d_tgt: &ScalarMap,
    s_tgt: &ScalarMap,
) -> Result<f64> {
    Ok(product_mean(d_ref, s_ref)? + product_mean(d_tgt, s_tgt)?)
}

fn product_mean(d: &ScalarMap, s: &ScalarMap) -> Result<f64> {
    if !d.same_dims(s) {
        return Err(Error::DimensionMismatch(format!(
            "distortion map {}x{} vs saliency {}x{}",
            d.width(),
            d.height(),
            s.width(),
            s.height()
        )));
    }
    if d.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = d
        .data()
        .chunks(d.width())
        .zip(s.data().chunks(s.width()))
        .map(|(dr, sr)| dr.iter().zip(sr).map(|(a, b)| a * b).sum::<f64>())
        .sum();
    Ok(total / d.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::homography::Homography;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn quad(p: [(f64, f64); 4]) -> Quad {
        Quad::new(p.map(|(x, y)| Point2::new(x, y)))
    }

    fn unit_square() -> Quad {
        Quad::frame(1.0, 1.0)
    }

    fn sheared() -> Quad {
        quad([(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (2.0, 1.0)])
    }

    #[test]
    fn rectangles_have_zero_distance_and_angle_scores() {
        let q = quad([(3.0, 1.0), (7.0, 1.0), (3.0, 3.0), (7.0, 3.0)]);
        assert_eq!(distance_scores(&q).unwrap(), [0.0; 4]);
        assert_eq!(angle_scores(&q).unwrap(), [0.0; 4]);
    }

    #[test]
    fn distance_score_of_pulled_vertex() {
        // square centred at the origin; TL moved outward along its diagonal
        let mut q = quad([(-1.0, -1.0), (1.0, -1.0), (-1.0, 1.0), (1.0, 1.0)]);
        q.p[TL] = Point2::new(-3.0, -3.0);
        let s = distance_scores(&q).unwrap();
        let c = q.centroid();
        let d: Vec<f64> = q.p.iter().map(|p| p.distance(c)).collect();
        let min = d.iter().copied().fold(f64::INFINITY, f64::min);
        for i in 0..4 {
            assert!((s[i] - (d[i] / min - 1.0)).abs() < 1e-15);
            assert!(s[i] >= 0.0);
        }
        assert_eq!(s.iter().copied().fold(f64::INFINITY, f64::min), 0.0);
        assert!(s[TL] > 1.0);
    }

    #[test]
    fn shear_angle_scores() {
        let s = angle_scores(&sheared()).unwrap();
        for v in s {
            assert!((v - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
        }
        let mirrored = sheared().map(|p| Point2::new(p.x, -p.y));
        assert_eq!(angle_scores(&mirrored).unwrap(), s);
    }

    #[test]
    fn global_score_examples() {
        assert_eq!(global_score(&unit_square()).unwrap(), 0.0);
        let r = quad([(-2.0, -1.0), (2.0, -1.0), (-2.0, 1.0), (2.0, 1.0)]);
        assert!((global_score(&r).unwrap() - 0.6).abs() < 1e-15);
        let eps = 1e-7;
        let near = Quad::frame(1.0 + eps, 1.0);
        assert!(global_score(&near).unwrap() < 1e-6);
    }

    #[test]
    fn final_scores_of_rectangle_and_shear() {
        let s = final_scores(&Quad::frame(4.0, 2.0)).unwrap();
        for v in s.final_ {
            assert!((v - 0.6).abs() < 1e-15);
        }
        let q = sheared();
        let s = final_scores(&q).unwrap();
        // independent evaluation straight from coordinates
        let c = Point2::new(1.0, 0.5);
        let d = q.p.map(|p| ((p.x - c.x).powi(2) + (p.y - c.y).powi(2)).sqrt());
        let dmin = d.iter().copied().fold(f64::INFINITY, f64::min);
        let glob = (2.0f64 * 0.0 + 1.0 * 1.0).abs() / (5.0f64.sqrt() * 1.0);
        for i in 0..4 {
            let expect = d[i] / dmin - 1.0 + std::f64::consts::FRAC_1_SQRT_2 + glob;
            assert!((s.final_[i] - expect).abs() < 1e-12, "{i}: {} vs {expect}", s.final_[i]);
        }
    }

    #[test]
    fn collapsed_quad_is_degenerate() {
        let q = quad([(0.0, 0.0), (0.0, 0.0), (0.0, 0.0), (0.0, 0.0)]);
        assert!(final_scores(&q).is_err());
        let edge = quad([(0.0, 0.0), (0.0, 0.0), (0.0, 1.0), (1.0, 1.0)]);
        assert!(matches!(angle_scores(&edge), Err(Error::DegenerateQuad(_))));
    }

    #[test]
    fn similarity_images_score_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let h = Homography::similarity(
                rng.random_range(0.05..20.0),
                rng.random_range(-3.2..3.2),
                rng.random_range(-500.0..500.0),
                rng.random_range(-500.0..500.0),
            )
            .unwrap();
            let q = unit_square().map(|p| h.apply(p).unwrap());
            let s = final_scores(&q).unwrap();
            assert!(s.final_.iter().all(|&v| v.abs() < 1e-9), "{s:?}");
        }
    }

    #[test]
    fn distortion_map_examples() {
        let mut s = VertexScores::zero();
        s.final_ = [0.7; 4];
        let m = distortion_map(&s, 5, 4).unwrap();
        assert!(m.data().iter().all(|&v| (v - 0.7).abs() < 1e-15));

        s.final_ = [1.0, 0.0, 0.0, 0.0];
        let m = distortion_map(&s, 3, 3).unwrap();
        assert_eq!(m.get(0, 0), 1.0);
        assert_eq!(m.get(2, 0), 0.0);
        assert_eq!(m.get(0, 2), 0.0);
        assert_eq!(m.get(2, 2), 0.0);
        assert!((m.get(1, 1) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn distortion_map_is_affine_along_edges() {
        let mut s = VertexScores::zero();
        s.final_ = [0.3, 1.1, 2.0, 0.4];
        let m = distortion_map(&s, 11, 7).unwrap();
        assert_eq!([m.get(0, 0), m.get(10, 0), m.get(0, 6), m.get(10, 6)], s.final_);
        for x in 0..11 {
            let t = x as f64 / 10.0;
            assert!((m.get(x, 0) - (0.3 + t * 0.8)).abs() < 1e-12);
            assert!((m.get(x, 6) - (2.0 - t * 1.6)).abs() < 1e-12);
        }
    }

    #[test]
    fn moments_reproduce_map_products() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let sal = ScalarMap::from_fn(23, 17, |_, _| rng.random());
        let mut s = VertexScores::zero();
        s.final_ = [0.2, 1.3, 0.05, 0.9];
        let d = distortion_map(&s, 23, 17).unwrap();
        let direct = product_mean(&d, &sal).unwrap();
        let m = vertex_moments(&sal);
        let via = (0..4).map(|i| s.final_[i] * m[i]).sum::<f64>();
        assert!((direct - via).abs() < 1e-13);
    }

    #[test]
    fn constant_image_has_zero_saliency() {
        let img = ImageBuffer::filled(20, 12, 3, 0.4);
        let s = saliency_map(&img, &SaliencyConfig::default()).unwrap();
        assert!(s.data().iter().all(|&v| v.abs() < 1e-15));
        assert!(matches!(
            saliency_map(&ImageBuffer::filled(0, 0, 1, 0.0), &SaliencyConfig::default()),
            Err(Error::EmptyImage)
        ));
    }

    #[test]
    fn step_edge_saliency_matches_convolution_oracle() {
        let img = ImageBuffer::from_fn(16, 16, 1, |_, x, _| if x >= 8 { 1.0 } else { 0.0 });
        let s = saliency_map(&img, &SaliencyConfig::default()).unwrap();

        // brute-force 2-D convolution of the known gradient magnitude
        let grad = |x: i64| -> f64 {
            let x = x.clamp(0, 15);
            if x == 7 || x == 8 {
                0.5
            } else {
                0.0
            }
        };
        let sigma: f64 = 2.0;
        let r = 6i64;
        let norm: f64 = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).sum();
        for y in 0..16 {
            for x in 0..16i64 {
                let mut acc = 0.0;
                for dy in -r..=r {
                    for dx in -r..=r {
                        let w = (-((dx * dx + dy * dy) as f64) / (2.0 * sigma * sigma)).exp();
                        acc += w * grad(x + dx);
                    }
                }
                acc /= norm * norm;
                assert!((s.get(x as usize, y) - acc).abs() < 1e-12);
            }
        }
        for y in 0..16 {
            for k in 0..8 {
                assert!((s.get(7 - k, y) - s.get(8 + k, y)).abs() < 1e-12, "symmetric falloff");
            }
            assert!(s.get(7, y) >= s.get(6, y) && s.get(6, y) >= s.get(5, y));
        }
    }

    #[test]
    fn saliency_commutes_with_rotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let img = ImageBuffer::from_fn(19, 13, 1, |_, _, _| rng.random());
        let a = saliency_map(&img, &SaliencyConfig::default()).unwrap().rotate90();
        let b = saliency_map(&img.rotate90(), &SaliencyConfig::default()).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn joint_normalization() {
        let a = ScalarMap::new(3, 1, vec![0.0, 1.0, 2.0]).unwrap();
        let b = ScalarMap::new(3, 1, vec![1.0, 2.0, 4.0]).unwrap();
        let (na, nb) = normalize_saliency_pair(&a, &b);
        assert_eq!(na.data(), &[0.0, 0.25, 0.5]);
        assert_eq!(nb.data(), &[0.25, 0.5, 1.0]);
        let c = ScalarMap::filled(4, 4, 3.0);
        let (x, y) = normalize_saliency_pair(&c, &c);
        assert!(x.data().iter().chain(y.data()).all(|&v| v == 0.0));
    }

    #[test]
    fn loss_examples() {
        let z = ScalarMap::zeros(8, 8);
        let one = ScalarMap::filled(8, 8, 1.0);
        assert_eq!(semantic_distortion_loss(&z, &one, &z, &one).unwrap(), 0.0);
        assert_eq!(semantic_distortion_loss(&one, &one, &one, &one).unwrap(), 2.0);
        let small = ScalarMap::zeros(4, 8);
        assert!(matches!(
            semantic_distortion_loss(&small, &one, &z, &one),
            Err(Error::DimensionMismatch(_))
        ));

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let maps: Vec<ScalarMap> = (0..4).map(|_| ScalarMap::from_fn(13, 9, |_, _| rng.random())).collect();
        let mut oracle = 0.0;
        for (d, s) in [(&maps[0], &maps[1]), (&maps[2], &maps[3])] {
            let mut acc = 0.0;
            for y in 0..9 {
                for x in 0..13 {
                    acc += d.get(x, y) * s.get(x, y);
                }
            }
            oracle += acc / 117.0;
        }
        let got = semantic_distortion_loss(&maps[0], &maps[1], &maps[2], &maps[3]).unwrap();
        assert!((got - oracle).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn rectangle_law(a in 0.1f64..10.0, b in 0.1f64..10.0) {
            let g = global_score(&Quad::frame(a, b)).unwrap();
            prop_assert!((g - (a * a - b * b).abs() / (a * a + b * b)).abs() < 1e-12);
        }

        #[test]
        fn scores_are_scale_invariant(
            pts in proptest::array::uniform8(-0.2f64..0.2),
            k in 0.01f64..100.0,
        ) {
            let q = Quad::frame(1.0, 1.0);
            let q = Quad::new(std::array::from_fn(|i| q.p[i].add(Point2::new(pts[2 * i], pts[2 * i + 1]))));
            let a = final_scores(&q).unwrap();
            let b = final_scores(&q.map(|p| p.scale(k))).unwrap();
            for i in 0..4 {
                prop_assert!((a.final_[i] - b.final_[i]).abs() < 1e-9);
                prop_assert!(a.final_[i] >= 0.0);
                prop_assert_eq!(a.final_[i], a.distance[i] + a.angle[i] + a.global);
            }
            prop_assert_eq!(a.distance.iter().copied().fold(f64::INFINITY, f64::min), 0.0);
        }

        #[test]
        fn loss_is_monotone_in_distortion(
            vals in proptest::collection::vec(0.0f64..1.0, 32),
            idx in 0usize..16,
            bump in 0.0f64..3.0,
        ) {
            let d = ScalarMap::new(4, 4, vals[..16].to_vec()).unwrap();
            let s = ScalarMap::new(4, 4, vals[16..].to_vec()).unwrap();
            let mut d2 = d.clone();
            d2.data_mut()[idx] += bump;
            let before = semantic_distortion_loss(&d, &s, &d, &s).unwrap();
            let after = semantic_distortion_loss(&d2, &s, &d, &s).unwrap();
            prop_assert!(after >= before);
        }
    }
}
