//! Synthetic stitching scenes with a known homography.
//!
//! The scene is a continuous procedural texture `T` on the reference plane.
//! The reference view samples `T(x)` and the target view samples `T(H x)`,
//! so both views are exact point samples and the target sees content beyond
//! the reference frame. Texture values come from a counter-based hash of
//! lattice coordinates, so any pixel can be evaluated independently.

use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Point2;
use crate::homography::{offsets_to_homography, FourPointOffsets, Homography};
use crate::raster::ImageBuffer;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Texture {
    /// Multi-octave gradient noise.
    #[default]
    Perlin,
    /// Periodic checkerboards at several scales; deliberately ambiguous.
    CheckerMultiscale,
    /// Randomly placed soft blobs over a faint noise floor.
    BlobField,
}

impl FromStr for Texture {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "perlin" => Ok(Texture::Perlin),
            "checker-multiscale" => Ok(Texture::CheckerMultiscale),
            "blob-field" => Ok(Texture::BlobField),
            _ => Err(Error::Config(format!(
                "texture: expected perlin, checker-multiscale or blob-field, got `{s}`"
            ))),
        }
    }
}

/// Applied to the target view as `clamp(v^gamma + brightness)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Photometric {
    pub gamma: f64,
    pub brightness: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub texture: Texture,
    /// Largest corner offset as a fraction of `min(width, height)`.
    pub h_magnitude: f64,
    /// Largest extra shift of the foreground layer in the target view.
    pub parallax_px: f64,
    pub photometric: Option<Photometric>,
    /// Gaussian noise added to the target view.
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            width: 512,
            height: 512,
            texture: Texture::Perlin,
            h_magnitude: 0.15,
            parallax_px: 0.0,
            photometric: None,
            noise_std: 0.0,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |f: &str, why: &str| Err(Error::Config(format!("synth.{f}: {why}")));
        if self.width < 16 || self.height < 16 {
            return bad("size", "must be at least 16x16");
        }
        if !(0.0..=0.3).contains(&self.h_magnitude) {
            return bad("h_magnitude", "must lie in [0, 0.3]");
        }
        if !(self.parallax_px >= 0.0 && self.parallax_px.is_finite()) {
            return bad("parallax_px", "must be non-negative");
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad("noise_std", "must be non-negative");
        }
        if let Some(p) = self.photometric {
            if !(p.gamma > 0.0 && p.gamma.is_finite() && p.brightness.is_finite()) {
                return bad("photometric", "gamma must be positive and brightness finite");
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub i_ref: ImageBuffer,
    pub i_tgt: ImageBuffer,
    /// Target-to-reference homography.
    pub h_true: Homography,
}

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Uniform value in `[0, 1)` for a lattice point of one layer.
#[inline]
fn lattice(seed: u64, layer: u64, ix: i64, iy: i64) -> f64 {
    let h = mix64(seed ^ mix64(layer.wrapping_add(0x9e37_79b9_7f4a_7c15) ^ mix64((ix as u64) ^ mix64(iy as u64))));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

#[inline]
fn fade(t: f64) -> f64 {
    t * t * t * (t * (t * 6.0 - 15.0) + 10.0)
}

/// Gradient noise with period-free hashed gradients, roughly in `[-1, 1]`.
fn gradient_noise(seed: u64, layer: u64, x: f64, y: f64) -> f64 {
    let (fx, fy) = (x.floor(), y.floor());
    let (ix, iy) = (fx as i64, fy as i64);
    let (tx, ty) = (x - fx, y - fy);
    let corner = |dx: i64, dy: i64| {
        let a = lattice(seed, layer, ix + dx, iy + dy) * std::f64::consts::TAU;
        a.cos() * (tx - dx as f64) + a.sin() * (ty - dy as f64)
    };
    let (u, v) = (fade(tx), fade(ty));
    let top = corner(0, 0) + u * (corner(1, 0) - corner(0, 0));
    let bottom = corner(0, 1) + u * (corner(1, 1) - corner(0, 1));
    (top + v * (bottom - top)) * std::f64::consts::SQRT_2
}

/// Octaves from 96 px down to 6 px.
fn fbm(seed: u64, layer: u64, p: Point2) -> f64 {
    let mut v = 0.0;
    let mut wavelength = 96.0;
    let mut amp = 0.5;
    for o in 0..5 {
        v += amp * gradient_noise(seed, layer * 16 + o, p.x / wavelength, p.y / wavelength);
        wavelength /= 2.0;
        amp *= 0.6;
    }
    v
}

fn checker(p: Point2) -> f64 {
    let sq = |period: f64, x: f64, y: f64| {
        // smoothed square wave keeps the image band-limited
        let s = |t: f64| (8.0 * (std::f64::consts::TAU * t / period).sin()).tanh();
        s(x) * s(y)
    };
    0.5 + 0.3 * sq(48.0, p.x, p.y) + 0.15 * sq(12.0, p.x + 3.0, p.y + 5.0)
}

/// One soft blob per 24 px lattice cell, jittered.
fn blobs(seed: u64, p: Point2) -> f64 {
    const CELL: f64 = 24.0;
    let (cx, cy) = ((p.x / CELL).floor() as i64, (p.y / CELL).floor() as i64);
    let mut v = 0.0;
    for dy in -2..=2 {
        for dx in -2..=2 {
            let (ix, iy) = (cx + dx, cy + dy);
            let c = Point2::new(
                (ix as f64 + lattice(seed, 101, ix, iy)) * CELL,
                (iy as f64 + lattice(seed, 102, ix, iy)) * CELL,
            );
            let r = 5.0 + 14.0 * lattice(seed, 103, ix, iy);
            let a = 2.0 * lattice(seed, 104, ix, iy) - 1.0;
            let d2 = p.sub(c).dot(p.sub(c));
            v += a * (-d2 / (2.0 * r * r)).exp();
        }
    }
    0.5 + 0.3 * v.tanh() + 0.05 * gradient_noise(seed, 105, p.x / 10.0, p.y / 10.0)
}

fn texture_value(texture: Texture, seed: u64, p: Point2) -> f64 {
    match texture {
        Texture::Perlin => 0.5 + 0.45 * fbm(seed, 1, p),
        Texture::CheckerMultiscale => checker(p),
        Texture::BlobField => blobs(seed, p),
    }
}

/// RGB scene value: luma-like base plus slow per-channel tint fields.
fn scene_rgb(texture: Texture, seed: u64, p: Point2) -> [f64; 3] {
    let v = texture_value(texture, seed, p);
    let t1 = 0.5 + 0.5 * gradient_noise(seed, 201, p.x / 150.0, p.y / 150.0);
    let t2 = 0.5 + 0.5 * gradient_noise(seed, 202, p.x / 150.0, p.y / 150.0);
    [v, 0.85 * v + 0.15 * t1, 0.75 * v + 0.25 * t2].map(|c| c.clamp(0.0, 1.0))
}

/// Foreground layer for parallax: a few large discs with their own texture.
struct Foreground {
    discs: Vec<(Point2, f64)>,
    shift: Point2,
}

impl Foreground {
    fn alpha(&self, p: Point2) -> f64 {
        self.discs
            .iter()
            .map(|&(c, r)| (r - p.distance(c)).clamp(0.0, 1.0))
            .fold(0.0, f64::max)
    }
}

fn foreground_rgb(seed: u64, p: Point2) -> [f64; 3] {
    let v = 0.5 + 0.4 * fbm(seed, 7, p.scale(1.7));
    [0.9 * v + 0.1, 0.6 * v, 0.4 * v + 0.2].map(|c: f64| c.clamp(0.0, 1.0))
}

fn render(
    width: usize,
    height: usize,
    spec: &SceneSpec,
    fg: Option<&Foreground>,
    map: impl Fn(Point2) -> Point2 + Sync,
    fg_shift: Point2,
) -> ImageBuffer {
    let rows: Vec<Vec<[f64; 3]>> = (0..height)
        .into_par_iter()
        .map(|y| {
            (0..width)
                .map(|x| {
                    let p = map(Point2::new(x as f64, y as f64));
                    let bg = scene_rgb(spec.texture, spec.seed, p);
                    match fg {
                        Some(f) => {
                            let q = p.sub(fg_shift);
                            let a = f.alpha(q);
                            if a > 0.0 {
                                let c = foreground_rgb(spec.seed, q);
                                std::array::from_fn(|k| bg[k] + a * (c[k] - bg[k]))
                            } else {
                                bg
                            }
                        }
                        None => bg,
                    }
                })
                .collect()
        })
        .collect();
    ImageBuffer::from_fn(width, height, 3, |c, x, y| rows[y][x][c])
}

/// Draw a scene: random corner offsets, both views, then target-side
/// perturbations in the order parallax, photometric, noise.
pub fn generate(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let (w, h) = (spec.width as f64, spec.height as f64);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let amp = spec.h_magnitude * w.min(h);
    let h_true = if amp == 0.0 {
        Homography::IDENTITY
    } else {
        loop {
            let off: [Point2; 4] =
                std::array::from_fn(|_| Point2::new(rng.random_range(-amp..=amp), rng.random_range(-amp..=amp)));
            if let Ok(hm) = offsets_to_homography(&FourPointOffsets::new(off, w, h)) {
                break hm;
            }
        }
    };
    let fg = (spec.parallax_px > 0.0).then(|| {
        let discs = (0..3)
            .map(|_| {
                let c = Point2::new(rng.random_range(0.2 * w..0.8 * w), rng.random_range(0.2 * h..0.8 * h));
                (c, rng.random_range(0.06..0.14) * w.min(h))
            })
            .collect();
        let angle = rng.random_range(0.0..std::f64::consts::TAU);
        let mag = rng.random_range(0.5..=1.0) * spec.parallax_px;
        Foreground { discs, shift: Point2::new(mag * angle.cos(), mag * angle.sin()) }
    });
    let i_ref = render(spec.width, spec.height, spec, fg.as_ref(), |p| p, Point2::default());
    let shift = fg.as_ref().map_or(Point2::default(), |f| f.shift);
    let mut i_tgt = render(spec.width, spec.height, spec, fg.as_ref(), |p| h_true.apply_unchecked(p), shift);
    if let Some(ph) = spec.photometric {
        i_tgt = i_tgt.map_values(|v| (v.powf(ph.gamma) + ph.brightness).clamp(0.0, 1.0));
    }
    if spec.noise_std > 0.0 {
        let normal = Normal::new(0.0, spec.noise_std).map_err(|e| Error::Config(format!("synth.noise_std: {e}")))?;
        let mut noise_rng = ChaCha8Rng::seed_from_u64(mix64(spec.seed ^ 0x6e6f_6973_65));
        let mut data = i_tgt.data().to_vec();
        for v in &mut data {
            *v = (*v + normal.sample(&mut noise_rng)).clamp(0.0, 1.0);
        }
        i_tgt = ImageBuffer::new(spec.width, spec.height, 3, data)?;
    }
    Ok(Scene { i_ref, i_tgt, h_true })
}
