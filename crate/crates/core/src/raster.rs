//! Planar floating-point rasters.
//!
//! Pixel `(x, y)` sits at integer coordinates with the origin at the top-left
//! pixel center; `x` grows to the right and `y` grows downward. Values are
//! nominally in `[0, 1]`.

use crate::error::{Error, Result};

const LUMA_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

/// Single-channel raster: saliency, distortion, masks, luma.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarMap {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl ScalarMap {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::DimensionMismatch(format!(
                "{} values for a {width}x{height} map",
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Self { width, height, data: vec![value; width * height] }
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self::filled(width, height, 0.0)
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self { width, height, data }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn same_dims(&self, other: &ScalarMap) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn min_max(&self) -> Option<(f64, f64)> {
        let mut it = self.data.iter().copied();
        let first = it.next()?;
        Some(it.fold((first, first), |(lo, hi), v| (lo.min(v), hi.max(v))))
    }

    /// Arithmetic mean, summed row by row so the result does not depend on
    /// how callers parallelize.
    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        let total: f64 = self.data.chunks(self.width.max(1)).map(|row| row.iter().sum::<f64>()).sum();
        total / self.data.len() as f64
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Rotate by 90 degrees clockwise.
    pub fn rotate90(&self) -> ScalarMap {
        let (w, h) = (self.width, self.height);
        ScalarMap::from_fn(h, w, |x, y| self.get(y, h - 1 - x))
    }

    /// Bilinear sample; `None` outside `[0, w-1] x [0, h-1]`.
    #[inline]
    pub fn sample(&self, x: f64, y: f64) -> Option<f64> {
        let (i0, j0, fx, fy) = bilinear_cell(x, y, self.width, self.height)?;
        let i1 = (i0 + 1).min(self.width - 1);
        let j1 = (j0 + 1).min(self.height - 1);
        let top = lerp(self.get(i0, j0), self.get(i1, j0), fx);
        let bottom = lerp(self.get(i0, j1), self.get(i1, j1), fx);
        Some(lerp(top, bottom, fy))
    }
}

/// Multi-channel planar image (one plane per channel).
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl ImageBuffer {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 || data.len() != width * height * channels {
            return Err(Error::DimensionMismatch(format!(
                "{} values for a {width}x{height}x{channels} image",
                data.len()
            )));
        }
        Ok(Self { width, height, channels, data })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Self {
        Self { width, height, channels, data: vec![value; width * height * channels] }
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(width * height * channels);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, x, y));
                }
            }
        }
        Self { width, height, channels, data }
    }

    /// Build from per-channel planes of identical size.
    pub fn from_planes(planes: Vec<ScalarMap>) -> Result<Self> {
        let first = planes.first().ok_or(Error::EmptyImage)?;
        let (width, height) = (first.width(), first.height());
        if planes.iter().any(|p| !p.same_dims(first)) {
            return Err(Error::DimensionMismatch("planes differ in size".into()));
        }
        let channels = planes.len();
        let mut data = Vec::with_capacity(width * height * channels);
        for p in planes {
            data.extend_from_slice(p.data());
        }
        Ok(Self { width, height, channels, data })
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.width == 0 || self.height == 0
    }

    #[inline]
    pub fn get(&self, c: usize, x: usize, y: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, x: usize, y: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.width * self.height;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.width * self.height;
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn channel_map(&self, c: usize) -> ScalarMap {
        ScalarMap { width: self.width, height: self.height, data: self.plane(c).to_vec() }
    }

    pub fn same_dims(&self, other: &ImageBuffer) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Luma plane: the single channel of a gray image, or Rec. 601 weights
    /// over the first three channels.
    pub fn luma(&self) -> ScalarMap {
        if self.channels < 3 {
            return self.channel_map(0);
        }
        let n = self.width * self.height;
        let (r, g, b) = (self.plane(0), self.plane(1), self.plane(2));
        let data = (0..n)
            .map(|i| LUMA_WEIGHTS[0] * r[i] + LUMA_WEIGHTS[1] * g[i] + LUMA_WEIGHTS[2] * b[i])
            .collect();
        ScalarMap { width: self.width, height: self.height, data }
    }

    pub fn map_values(&self, f: impl Fn(f64) -> f64) -> ImageBuffer {
        ImageBuffer {
            width: self.width,
            height: self.height,
            channels: self.channels,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn rotate90(&self) -> ImageBuffer {
        let planes = (0..self.channels).map(|c| self.channel_map(c).rotate90()).collect();
        ImageBuffer::from_planes(planes).expect("rotation preserves shape")
    }

    /// Bilinear sample of channel `c`; `None` outside the pixel-center rectangle.
    #[inline]
    pub fn sample(&self, c: usize, x: f64, y: f64) -> Option<f64> {
        let (i0, j0, fx, fy) = bilinear_cell(x, y, self.width, self.height)?;
        let i1 = (i0 + 1).min(self.width - 1);
        let j1 = (j0 + 1).min(self.height - 1);
        let top = lerp(self.get(c, i0, j0), self.get(c, i1, j0), fx);
        let bottom = lerp(self.get(c, i0, j1), self.get(c, i1, j1), fx);
        Some(lerp(top, bottom, fy))
    }
}

impl From<ScalarMap> for ImageBuffer {
    fn from(m: ScalarMap) -> Self {
        ImageBuffer { width: m.width, height: m.height, channels: 1, data: m.data }
    }
}

/// Tolerance for sample points that land a hair outside the valid range
/// because of projective round-off.
const EDGE_EPS: f64 = 1e-9;

#[inline]
pub(crate) fn inside(x: f64, y: f64, width: usize, height: usize) -> bool {
    width > 0
        && height > 0
        && x >= -EDGE_EPS
        && y >= -EDGE_EPS
        && x <= (width - 1) as f64 + EDGE_EPS
        && y <= (height - 1) as f64 + EDGE_EPS
}

#[inline]
fn bilinear_cell(x: f64, y: f64, width: usize, height: usize) -> Option<(usize, usize, f64, f64)> {
    if !inside(x, y, width, height) {
        return None;
    }
    let xc = x.clamp(0.0, (width - 1) as f64);
    let yc = y.clamp(0.0, (height - 1) as f64);
    let i0 = (xc.floor() as usize).min(width - 1);
    let j0 = (yc.floor() as usize).min(height - 1);
    Some((i0, j0, xc - i0 as f64, yc - j0 as f64))
}

/// `a + (b - a) t`; exact when `a == b`, which keeps warped all-ones images
/// identical to their masks.
#[inline]
pub(crate) fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + (b - a) * t
}
