//! Overlap-restricted quality metrics and difficulty buckets.
//!
//! Both metrics work on Rec.601 luma and only look at pixels valid in both
//! warped views. SSIM windows that touch a pixel outside the overlap are
//! skipped entirely rather than renormalized.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::ScalarMap;
use crate::warp::WarpedImage;

/// Reported when the RMSE is below `RMSE_FLOOR`.
pub const PSNR_CAP: f64 = 100.0;
pub const RMSE_FLOOR: f64 = 1e-5;
pub const SSIM_WINDOW: usize = 7;
const C1: f64 = 1e-4;
const C2: f64 = 9e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Bucket {
    Easy,
    Moderate,
    Hard,
    Unbucketed,
}

impl fmt::Display for Bucket {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Bucket::Easy => "Easy",
            Bucket::Moderate => "Moderate",
            Bucket::Hard => "Hard",
            Bucket::Unbucketed => "-",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mpsnr: f64,
    pub mssim: f64,
    pub overlap_fraction: f64,
    pub bucket: Bucket,
}

/// SSIM window weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SsimWindow {
    #[default]
    Uniform,
    /// 7x7 Gaussian with std 1.5, for comparison with other toolchains.
    Gaussian,
}

impl SsimWindow {
    fn weights(self) -> [f64; SSIM_WINDOW * SSIM_WINDOW] {
        let n = SSIM_WINDOW * SSIM_WINDOW;
        match self {
            SsimWindow::Uniform => [1.0 / n as f64; SSIM_WINDOW * SSIM_WINDOW],
            SsimWindow::Gaussian => {
                let r = (SSIM_WINDOW / 2) as f64;
                let mut w = [0.0; SSIM_WINDOW * SSIM_WINDOW];
                for (i, v) in w.iter_mut().enumerate() {
                    let (dx, dy) = ((i % SSIM_WINDOW) as f64 - r, (i / SSIM_WINDOW) as f64 - r);
                    *v = (-(dx * dx + dy * dy) / (2.0 * 1.5 * 1.5)).exp();
                }
                let s: f64 = w.iter().sum();
                w.map(|v| v / s)
            }
        }
    }
}

fn check_canvas(a: &WarpedImage, b: &WarpedImage) -> Result<()> {
    if a.same_canvas(b) {
        Ok(())
    } else {
        Err(Error::CanvasMismatch(format!(
            "{}x{} vs {}x{}",
            a.canvas.width, a.canvas.height, b.canvas.width, b.canvas.height
        )))
    }
}

/// Pixels valid in both views, as 0/1.
pub fn overlap_mask(a: &WarpedImage, b: &WarpedImage) -> Result<ScalarMap> {
    check_canvas(a, b)?;
    let data = a
        .mask
        .data()
        .iter()
        .zip(b.mask.data())
        .map(|(&x, &y)| if x > 0.5 && y > 0.5 { 1.0 } else { 0.0 })
        .collect();
    ScalarMap::new(a.canvas.width, a.canvas.height, data)
}

fn check_maps(a: &ScalarMap, b: &ScalarMap, mask: &ScalarMap) -> Result<()> {
    if a.same_dims(b) && a.same_dims(mask) {
        Ok(())
    } else {
        Err(Error::DimensionMismatch("metric inputs must share one canvas".into()))
    }
}

/// PSNR of two luma maps over `mask`, capped at [`PSNR_CAP`].
pub fn mpsnr_masked(a: &ScalarMap, b: &ScalarMap, mask: &ScalarMap) -> Result<f64> {
    check_maps(a, b, mask)?;
    let mut sum = 0.0;
    let mut n = 0usize;
    for ((&x, &y), &m) in a.data().iter().zip(b.data()).zip(mask.data()) {
        if m > 0.5 {
            sum += (x - y) * (x - y);
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::EmptyOverlap);
    }
    let rmse = (sum / n as f64).sqrt();
    Ok(if rmse < RMSE_FLOOR { PSNR_CAP } else { (20.0 * (1.0 / rmse).log10()).min(PSNR_CAP) })
}

/// Mean SSIM over pixels whose whole window lies inside `mask`.
pub fn mssim_masked(a: &ScalarMap, b: &ScalarMap, mask: &ScalarMap, window: SsimWindow) -> Result<f64> {
    check_maps(a, b, mask)?;
    let (w, h) = (a.width(), a.height());
    let r = SSIM_WINDOW / 2;
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::EmptyOverlap);
    }
    let wts = window.weights();
    let rows: Vec<(f64, usize)> = (r..h - r)
        .into_par_iter()
        .map(|y| {
            let mut acc = 0.0;
            let mut n = 0usize;
            let mut xs = [0.0; SSIM_WINDOW * SSIM_WINDOW];
            let mut ys = [0.0; SSIM_WINDOW * SSIM_WINDOW];
            'px: for x in r..w - r {
                for k in 0..SSIM_WINDOW * SSIM_WINDOW {
                    let (px, py) = (x + k % SSIM_WINDOW - r, y + k / SSIM_WINDOW - r);
                    if mask.get(px, py) <= 0.5 {
                        continue 'px;
                    }
                    xs[k] = a.get(px, py);
                    ys[k] = b.get(px, py);
                }
                acc += ssim_window(&xs, &ys, &wts);
                n += 1;
            }
            (acc, n)
        })
        .collect();
    let (sum, n) = rows.iter().fold((0.0, 0usize), |(s, c), &(a, b)| (s + a, c + b));
    if n == 0 {
        return Err(Error::EmptyOverlap);
    }
    Ok(sum / n as f64)
}

/// SSIM of one window. Every statistic is formed with the same operations
/// for both inputs, so identical windows give exactly 1.
fn ssim_window(xs: &[f64], ys: &[f64], wts: &[f64]) -> f64 {
    let mut mx = 0.0;
    let mut my = 0.0;
    for k in 0..wts.len() {
        mx += wts[k] * xs[k];
        my += wts[k] * ys[k];
    }
    let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
    for k in 0..wts.len() {
        let (dx, dy) = (xs[k] - mx, ys[k] - my);
        vx += wts[k] * (dx * dx);
        vy += wts[k] * (dy * dy);
        cxy += wts[k] * (dx * dy);
    }
    let num = (mx * my + mx * my + C1) * (cxy + cxy + C2);
    let den = (mx * mx + my * my + C1) * (vx + vy + C2);
    num / den
}

pub fn mpsnr(a: &WarpedImage, b: &WarpedImage) -> Result<f64> {
    let m = overlap_mask(a, b)?;
    mpsnr_masked(&a.image.luma(), &b.image.luma(), &m)
}

pub fn mssim(a: &WarpedImage, b: &WarpedImage) -> Result<f64> {
    mssim_with(a, b, SsimWindow::Uniform)
}

pub fn mssim_with(a: &WarpedImage, b: &WarpedImage, window: SsimWindow) -> Result<f64> {
    let m = overlap_mask(a, b)?;
    mssim_masked(&a.image.luma(), &b.image.luma(), &m, window)
}

/// Both metrics plus the overlap fraction of the canvas, unbucketed.
pub fn report(a: &WarpedImage, b: &WarpedImage, window: SsimWindow) -> Result<MetricReport> {
    let m = overlap_mask(a, b)?;
    let (la, lb) = (a.image.luma(), b.image.luma());
    Ok(MetricReport {
        mpsnr: mpsnr_masked(&la, &lb, &m)?,
        mssim: mssim_masked(&la, &lb, &m, window)?,
        overlap_fraction: m.mean(),
        bucket: Bucket::Unbucketed,
    })
}

/// How reports are split into Easy / Moderate / Hard.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum BucketMode {
    /// Thirds by mPSNR, best first; the remainder goes to Easy, then Moderate.
    #[default]
    Tertile,
    /// `mpsnr >= t1` is Easy, `>= t2` Moderate, the rest Hard.
    Fixed { t1: f64, t2: f64 },
}

impl FromStr for BucketMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "tertile" {
            return Ok(BucketMode::Tertile);
        }
        let bad = || Error::Config(format!("bucket: expected `tertile` or `fixed:t1,t2`, got `{s}`"));
        let rest = s.strip_prefix("fixed:").ok_or_else(bad)?;
        let (a, b) = rest.split_once(',').ok_or_else(bad)?;
        let t1: f64 = a.trim().parse().map_err(|_| bad())?;
        let t2: f64 = b.trim().parse().map_err(|_| bad())?;
        if !(t1.is_finite() && t2.is_finite() && t1 >= t2) {
            return Err(Error::Config(format!("bucket: thresholds must satisfy t1 >= t2, got {t1},{t2}")));
        }
        Ok(BucketMode::Fixed { t1, t2 })
    }
}

impl fmt::Display for BucketMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BucketMode::Tertile => f.write_str("tertile"),
            BucketMode::Fixed { t1, t2 } => write!(f, "fixed:{t1},{t2}"),
        }
    }
}

impl TryFrom<String> for BucketMode {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<BucketMode> for String {
    fn from(m: BucketMode) -> String {
        m.to_string()
    }
}

/// Assign buckets; input order is kept and breaks ties.
pub fn bucket(reports: &[MetricReport], mode: &BucketMode) -> Vec<MetricReport> {
    let mut out = reports.to_vec();
    match *mode {
        BucketMode::Fixed { t1, t2 } => {
            for r in &mut out {
                r.bucket = if r.mpsnr >= t1 {
                    Bucket::Easy
                } else if r.mpsnr >= t2 {
                    Bucket::Moderate
                } else {
                    Bucket::Hard
                };
            }
        }
        BucketMode::Tertile => {
            let n = out.len();
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&i, &j| out[j].mpsnr.total_cmp(&out[i].mpsnr));
            let easy = n / 3 + usize::from(n % 3 > 0);
            let moderate = n / 3 + usize::from(n % 3 > 1);
            for (rank, &i) in order.iter().enumerate() {
                out[i].bucket = if rank < easy {
                    Bucket::Easy
                } else if rank < easy + moderate {
                    Bucket::Moderate
                } else {
                    Bucket::Hard
                };
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub label: String,
    pub count: usize,
    /// `None` for an empty bucket.
    pub mpsnr: Option<f64>,
    pub mssim: Option<f64>,
}

/// Easy, Moderate, Hard and Average rows.
pub fn aggregate(reports: &[MetricReport]) -> Vec<AggregateRow> {
    let row = |label: &str, pick: &dyn Fn(&MetricReport) -> bool| {
        let sel: Vec<&MetricReport> = reports.iter().filter(|r| pick(r)).collect();
        let n = sel.len();
        let mean = |f: fn(&MetricReport) -> f64| (n > 0).then(|| sel.iter().map(|r| f(r)).sum::<f64>() / n as f64);
        AggregateRow { label: label.into(), count: n, mpsnr: mean(|r| r.mpsnr), mssim: mean(|r| r.mssim) }
    };
    vec![
        row("Easy", &|r| r.bucket == Bucket::Easy),
        row("Moderate", &|r| r.bucket == Bucket::Moderate),
        row("Hard", &|r| r.bucket == Bucket::Hard),
        row("Average", &|_| true),
    ]
}

/// Plain-text table: one line per pair, then the aggregate rows.
pub fn render_table(names: &[String], reports: &[MetricReport], mode: &BucketMode) -> String {
    let fmt_opt = |v: Option<f64>, prec: usize| v.map_or_else(|| "-".to_string(), |v| format!("{v:.prec$}"));
    let width = names.iter().map(|n| n.len()).chain([8]).max().unwrap_or(8);
    let mut s = String::new();
    let _ = writeln!(s, "# buckets: {mode}");
    let _ = writeln!(s, "{:<width$}  {:>8}  {:>7}  {:>7}  {:<8}", "pair", "mPSNR", "mSSIM", "overlap", "bucket");
    for (name, r) in names.iter().zip(reports) {
        let _ = writeln!(
            s,
            "{:<width$}  {:>8.3}  {:>7.4}  {:>7.3}  {:<8}",
            name, r.mpsnr, r.mssim, r.overlap_fraction, r.bucket
        );
    }
    let rows = aggregate(reports);
    let _ = writeln!(s, "{:-<w$}", "", w = width + 40);
    let _ = writeln!(
        s,
        "{:<width$}  {:>8}  {:>7}  {:>7}  {:>8}",
        "summary", "Easy", "Moderate", "Hard", "Average"
    );
    let _ = writeln!(
        s,
        "{:<width$}  {:>8}  {:>7}  {:>7}  {:>8}",
        "mPSNR",
        fmt_opt(rows[0].mpsnr, 3),
        fmt_opt(rows[1].mpsnr, 3),
        fmt_opt(rows[2].mpsnr, 3),
        fmt_opt(rows[3].mpsnr, 3)
    );
    let _ = writeln!(
        s,
        "{:<width$}  {:>8}  {:>7}  {:>7}  {:>8}",
        "mSSIM",
        fmt_opt(rows[0].mssim, 4),
        fmt_opt(rows[1].mssim, 4),
        fmt_opt(rows[2].mssim, 4),
        fmt_opt(rows[3].mssim, 4)
    );
    let _ = writeln!(
        s,
        "{:<width$}  {:>8}  {:>7}  {:>7}  {:>8}",
        "count", rows[0].count, rows[1].count, rows[2].count, rows[3].count
    );
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::ImageBuffer;
    use crate::warp::Canvas;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn warped(img: ImageBuffer, mask: ScalarMap) -> WarpedImage {
        let canvas = Canvas::frame(img.width(), img.height());
        WarpedImage { image: img, mask, canvas }
    }

    fn random_img(rng: &mut ChaCha8Rng, w: usize, h: usize) -> ImageBuffer {
        ImageBuffer::from_fn(w, h, 1, |_, _, _| rng.random::<f64>())
    }

    fn full(w: usize, h: usize) -> ScalarMap {
        ScalarMap::filled(w, h, 1.0)
    }

    #[test]
    fn self_comparison_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = ImageBuffer::from_fn(30, 20, 3, |_, _, _| rng.random::<f64>());
        let a = warped(img.clone(), full(30, 20));
        assert_eq!(mssim(&a, &a).unwrap(), 1.0);
        assert_eq!(mssim_with(&a, &a, SsimWindow::Gaussian).unwrap(), 1.0);
        assert_eq!(mpsnr(&a, &a).unwrap(), 100.0);
    }

    #[test]
    fn constant_difference_psnr() {
        let a = warped(ImageBuffer::filled(16, 16, 1, 0.3), full(16, 16));
        let b = warped(ImageBuffer::filled(16, 16, 1, 0.4), full(16, 16));
        assert!((mpsnr(&a, &b).unwrap() - 20.0).abs() < 1e-6);
    }

    #[test]
    fn constant_images_ssim_closed_form() {
        let a = warped(ImageBuffer::filled(9, 9, 1, 0.25), full(9, 9));
        let b = warped(ImageBuffer::filled(9, 9, 1, 0.75), full(9, 9));
        let expect = (2.0 * 0.25 * 0.75 + 1e-4) / (0.25f64.powi(2) + 0.75f64.powi(2) + 1e-4);
        assert!((mssim(&a, &b).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn psnr_matches_brute_force_and_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let (x, y) = (random_img(&mut rng, 20, 15), random_img(&mut rng, 20, 15));
            let m = ScalarMap::from_fn(20, 15, |i, j| if (i * 7 + j * 3) % 5 != 0 { 1.0 } else { 0.0 });
            let (a, b) = (warped(x.clone(), m.clone()), warped(y.clone(), full(20, 15)));
            let mut s = 0.0;
            let mut n = 0.0;
            for j in 0..15 {
                for i in 0..20 {
                    if m.get(i, j) > 0.5 {
                        s += (x.get(0, i, j) - y.get(0, i, j)).powi(2);
                        n += 1.0;
                    }
                }
            }
            let oracle = 20.0 * (1.0 / (s / n).sqrt()).log10();
            let got = mpsnr(&a, &b).unwrap();
            assert!((got - oracle).abs() < 1e-9);
            assert_eq!(got, mpsnr(&b, &a).unwrap());
        }
    }

    #[test]
    fn ssim_bounded_and_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let (x, y) = (random_img(&mut rng, 12, 12), random_img(&mut rng, 12, 12));
            let (a, b) = (warped(x, full(12, 12)), warped(y, full(12, 12)));
            let s = mssim(&a, &b).unwrap();
            assert!((-1.0..=1.0).contains(&s));
            assert!((s - mssim(&b, &a).unwrap()).abs() < 1e-15);
        }
    }

    #[test]
    fn ssim_locality() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (x, y) = (random_img(&mut rng, 24, 20), random_img(&mut rng, 24, 20));
        let sub = ScalarMap::from_fn(24, 20, |i, j| if (4..18).contains(&i) && (2..15).contains(&j) { 1.0 } else { 0.0 });
        let got = mssim(&warped(x.clone(), sub), &warped(y.clone(), full(24, 20))).unwrap();
        // brute force on the cropped region, whose every interior window counts
        let cx = ScalarMap::from_fn(14, 13, |i, j| x.get(0, i + 4, j + 2));
        let cy = ScalarMap::from_fn(14, 13, |i, j| y.get(0, i + 4, j + 2));
        let mut sum = 0.0;
        let mut n = 0.0;
        for j in 3..10 {
            for i in 3..11 {
                let px: Vec<f64> = (0..49).map(|k| cx.get(i + k % 7 - 3, j + k / 7 - 3)).collect();
                let py: Vec<f64> = (0..49).map(|k| cy.get(i + k % 7 - 3, j + k / 7 - 3)).collect();
                let (mx, my) = (px.iter().sum::<f64>() / 49.0, py.iter().sum::<f64>() / 49.0);
                let vx = px.iter().map(|v| (v - mx).powi(2)).sum::<f64>() / 49.0;
                let vy = py.iter().map(|v| (v - my).powi(2)).sum::<f64>() / 49.0;
                let c = px.iter().zip(&py).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / 49.0;
                sum += (2.0 * mx * my + C1) * (2.0 * c + C2) / ((mx * mx + my * my + C1) * (vx + vy + C2));
                n += 1.0;
            }
        }
        assert!((got - sum / n).abs() < 1e-12);
    }

    #[test]
    fn overlap_is_per_pixel_and() {
        let m1 = ScalarMap::from_fn(10, 4, |i, _| if i < 6 { 1.0 } else { 0.0 });
        let m2 = ScalarMap::from_fn(10, 4, |i, _| if i >= 4 { 1.0 } else { 0.0 });
        let a = warped(ImageBuffer::filled(10, 4, 1, 0.0), m1.clone());
        let b = warped(ImageBuffer::filled(10, 4, 1, 0.0), m2.clone());
        let o = overlap_mask(&a, &b).unwrap();
        for j in 0..4 {
            for i in 0..10 {
                let expect = m1.get(i, j) > 0.5 && m2.get(i, j) > 0.5;
                assert_eq!(o.get(i, j) == 1.0, expect);
            }
        }
        let c = warped(ImageBuffer::filled(10, 4, 1, 0.0), ScalarMap::from_fn(10, 4, |i, _| if i >= 6 { 1.0 } else { 0.0 }));
        assert!(overlap_mask(&a, &c).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(matches!(mpsnr(&a, &c), Err(Error::EmptyOverlap)));
        assert!(matches!(mssim(&a, &c), Err(Error::EmptyOverlap)));
    }

    #[test]
    fn canvas_mismatch_is_reported() {
        let a = warped(ImageBuffer::filled(10, 4, 1, 0.0), full(10, 4));
        let b = warped(ImageBuffer::filled(8, 4, 1, 0.0), full(8, 4));
        assert!(matches!(overlap_mask(&a, &b), Err(Error::CanvasMismatch(_))));
    }

    fn rep(mpsnr: f64) -> MetricReport {
        MetricReport { mpsnr, mssim: 0.5, overlap_fraction: 1.0, bucket: Bucket::Unbucketed }
    }

    #[test]
    fn tertile_and_fixed_buckets() {
        let r = [rep(20.0), rep(30.0), rep(10.0)];
        let b: Vec<Bucket> = bucket(&r, &BucketMode::Tertile).iter().map(|r| r.bucket).collect();
        assert_eq!(b, [Bucket::Moderate, Bucket::Easy, Bucket::Hard]);
        let f: Vec<Bucket> = bucket(&r, &"fixed:25,18".parse().unwrap()).iter().map(|r| r.bucket).collect();
        assert_eq!(f, [Bucket::Moderate, Bucket::Easy, Bucket::Hard]);
        let eq = [rep(5.0); 6];
        let b: Vec<Bucket> = bucket(&eq, &BucketMode::Tertile).iter().map(|r| r.bucket).collect();
        assert_eq!(b, [Bucket::Easy, Bucket::Easy, Bucket::Moderate, Bucket::Moderate, Bucket::Hard, Bucket::Hard]);
    }

    #[test]
    fn tertile_counts_differ_by_at_most_one() {
        for n in 1..20 {
            let r: Vec<MetricReport> = (0..n).map(|i| rep((i * 7 % 11) as f64)).collect();
            let rows = aggregate(&bucket(&r, &BucketMode::Tertile));
            let c = [rows[0].count, rows[1].count, rows[2].count];
            assert_eq!(c.iter().sum::<usize>(), n);
            assert!(c.iter().max().unwrap() - c.iter().min().unwrap() <= 1);
        }
    }

    #[test]
    fn bucket_mode_parsing() {
        assert_eq!("tertile".parse::<BucketMode>().unwrap(), BucketMode::Tertile);
        assert_eq!("fixed:25,18".parse::<BucketMode>().unwrap(), BucketMode::Fixed { t1: 25.0, t2: 18.0 });
        assert!("fixed:10,20".parse::<BucketMode>().is_err());
        assert!("thirds".parse::<BucketMode>().is_err());
    }

    #[test]
    fn empty_table_renders() {
        let t = render_table(&[], &[], &BucketMode::Tertile);
        assert!(t.starts_with("# buckets: tertile"));
        assert!(aggregate(&[]).iter().all(|r| r.count == 0 && r.mpsnr.is_none()));
    }
}
