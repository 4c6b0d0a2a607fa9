//! Choosing the stitching plane.
//!
//! For coefficients `c`, the homography is split into the two warps onto
//! the plane ([`decompose`]), each warped frame is scored, the scores are
//! spread over the source image and weighted by saliency. The coefficient
//! search minimizes that loss directly with projected finite-difference
//! descent.
//!
//! Quads are scored in frame-normalized coordinates (`x / W`, `y / H`), so an
//! unwarped frame scores zero whatever its aspect ratio. On square frames
//! this is a uniform rescale and leaves every score unchanged.

use serde::{Deserialize, Serialize};

use crate::distortion::{distortion_map, final_scores, semantic_distortion_loss, vertex_moments, VertexScores};
use crate::error::{Error, Result};
use crate::geometry::{Point2, Quad};
use crate::homography::{decompose, warp_quad, Decomposition, DecompositionCoefficients, Homography};
use crate::raster::ScalarMap;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub max_iters: usize,
    pub init: DecompositionCoefficients,
    pub fd_step: f64,
    pub step0: f64,
    /// Per-iteration step decay factor, in `(0, 1)`.
    pub decay: f64,
    pub tol: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            max_iters: 50,
            init: DecompositionCoefficients::target_plane(),
            fd_step: 1e-3,
            step0: 0.2,
            decay: 0.8,
            tol: 1e-6,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: &str| Err(Error::Config(format!("optimizer.{field}: {why}")));
        if self.max_iters < 1 {
            return bad("max_iters", "must be at least 1");
        }
        if self.init.c.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return bad("init", "coefficients must lie in [0, 1]");
        }
        if !(self.decay > 0.0 && self.decay < 1.0) {
            return bad("decay", "must lie strictly between 0 and 1");
        }
        for (name, v) in [("fd_step", self.fd_step), ("step0", self.step0), ("tol", self.tol)] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(name, "must be positive");
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub c: [f64; 4],
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerTrace {
    pub iters: Vec<TraceEntry>,
    pub final_c: [f64; 4],
    pub final_loss: f64,
}

impl OptimizerTrace {
    pub fn coefficients(&self) -> DecompositionCoefficients {
        DecompositionCoefficients::new(self.final_c)
    }
}

/// Decreases smaller than this are round-off, not progress.
const LOSS_NOISE: f64 = 1e-12;

/// Frame-normalized image of the frame under `h`.
pub fn normalized_quad(h: &Homography, width: f64, height: f64) -> Result<Quad> {
    let q = warp_quad(h, width, height)?;
    Ok(q.map(|p| Point2::new(p.x / width, p.y / height)))
}

/// Scores of both decomposed warps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlaneEvaluation {
    pub decomposition: Decomposition,
    pub scores_ref: VertexScores,
    pub scores_tgt: VertexScores,
    pub loss: f64,
}

/// The loss as a function of `c` for one homography and saliency pair.
///
/// Every distortion map is a bilinear blend of four vertex values, so
/// `mean(D * S)` reduces to a dot product with four saliency moments that
/// are computed once.
#[derive(Debug, Clone)]
pub struct PlaneObjective {
    h: Homography,
    width: f64,
    height: f64,
    moments_ref: [f64; 4],
    moments_tgt: [f64; 4],
}

impl PlaneObjective {
    pub fn new(h: &Homography, s_ref: &ScalarMap, s_tgt: &ScalarMap) -> Result<Self> {
        if !s_ref.same_dims(s_tgt) || s_ref.is_empty() {
            return Err(Error::DimensionMismatch(format!(
                "saliency maps {}x{} and {}x{}",
                s_ref.width(),
                s_ref.height(),
                s_tgt.width(),
                s_tgt.height()
            )));
        }
        Ok(Self {
            h: *h,
            width: s_ref.width() as f64,
            height: s_ref.height() as f64,
            moments_ref: vertex_moments(s_ref),
            moments_tgt: vertex_moments(s_tgt),
        })
    }

    /// Uniform saliency over a `width x height` frame.
    pub fn uniform(h: &Homography, width: usize, height: usize) -> Result<Self> {
        let s = ScalarMap::filled(width, height, 1.0);
        Self::new(h, &s, &s)
    }

    pub fn homography(&self) -> &Homography {
        &self.h
    }

    pub fn evaluate_detailed(&self, c: &DecompositionCoefficients) -> Result<PlaneEvaluation> {
        let d = decompose(&self.h, c, self.width, self.height)?;
        let scores_ref = final_scores(&normalized_quad(&d.h_ref, self.width, self.height)?)?;
        let scores_tgt = final_scores(&normalized_quad(&d.h_tgt, self.width, self.height)?)?;
        let dot = |s: &VertexScores, m: &[f64; 4]| (0..4).map(|i| s.final_[i] * m[i]).sum::<f64>();
        let loss = dot(&scores_ref, &self.moments_ref) + dot(&scores_tgt, &self.moments_tgt);
        Ok(PlaneEvaluation { decomposition: d, scores_ref, scores_tgt, loss })
    }

    pub fn evaluate(&self, c: &DecompositionCoefficients) -> Result<f64> {
        Ok(self.evaluate_detailed(c)?.loss)
    }

    /// Objective with failed decompositions mapped to `+inf`.
    fn value(&self, c: &[f64; 4]) -> f64 {
        self.evaluate(&DecompositionCoefficients::new(*c)).unwrap_or(f64::INFINITY)
    }
}

/// `L(c)` through the explicit pipeline: decompose, score both quads,
/// build both distortion maps, weight by saliency.
pub fn evaluate_plane(
    h: &Homography,
    c: &DecompositionCoefficients,
    s_ref: &ScalarMap,
    s_tgt: &ScalarMap,
    width: usize,
    height: usize,
) -> Result<f64> {
    let (w, hh) = (width as f64, height as f64);
    let d = decompose(h, c, w, hh)?;
    let scores_ref = final_scores(&normalized_quad(&d.h_ref, w, hh)?)?;
    let scores_tgt = final_scores(&normalized_quad(&d.h_tgt, w, hh)?)?;
    let d_ref = distortion_map(&scores_ref, width, height)?;
    let d_tgt = distortion_map(&scores_tgt, width, height)?;
    semantic_distortion_loss(&d_ref, s_ref, &d_tgt, s_tgt)
}

/// Minimize the plane loss over `c` in `[0, 1]^4`.
///
/// The search starts from the best of `cfg.init`, the reference plane and
/// the middle plane, so the result never scores worse than any of them.
/// Each iteration takes a normalized projected finite-difference gradient
/// step of length `step0 * decay^k`, halving up to five times until the loss
/// strictly drops; steps that never improve are skipped.
pub fn optimize_coefficients(objective: &PlaneObjective, cfg: &OptimizerConfig) -> Result<OptimizerTrace> {
    cfg.validate()?;
    let init_loss = objective.value(&cfg.init.c);
    if !init_loss.is_finite() {
        return Err(Error::NonFiniteObjective(format!("plane loss at init {:?}", cfg.init.c)));
    }
    let mut cur = cfg.init.c;
    let mut cur_loss = init_loss;
    for start in [DecompositionCoefficients::reference_plane(), DecompositionCoefficients::middle_plane()] {
        let l = objective.value(&start.c);
        if l < cur_loss - LOSS_NOISE {
            cur = start.c;
            cur_loss = l;
        }
    }

    let mut iters = vec![TraceEntry { c: cur, loss: cur_loss }];
    for k in 0..cfg.max_iters {
        let Some(dir) = descent_direction(objective, &cur, cur_loss, cfg.fd_step) else { break };
        let mut step = cfg.step0 * cfg.decay.powi(k as i32);
        let mut accepted = None;
        for _ in 0..6 {
            let cand: [f64; 4] = std::array::from_fn(|i| (cur[i] + step * dir[i]).clamp(0.0, 1.0));
            let l = objective.value(&cand);
            if l < cur_loss - LOSS_NOISE {
                accepted = Some((cand, l));
                break;
            }
            step *= 0.5;
        }
        match accepted {
            Some((cand, l)) => {
                let gain = cur_loss - l;
                cur = cand;
                cur_loss = l;
                iters.push(TraceEntry { c: cur, loss: cur_loss });
                if gain < cfg.tol {
                    break;
                }
            }
            None => iters.push(TraceEntry { c: cur, loss: cur_loss }),
        }
    }
    Ok(OptimizerTrace { iters, final_c: cur, final_loss: cur_loss })
}

/// Unit-length negative projected gradient, or `None` at a stationary point.
fn descent_direction(objective: &PlaneObjective, c: &[f64; 4], f0: f64, fd: f64) -> Option<[f64; 4]> {
    let mut g = [0.0; 4];
    for i in 0..4 {
        let mut hi = *c;
        let mut lo = *c;
        hi[i] = (c[i] + fd).min(1.0);
        lo[i] = (c[i] - fd).max(0.0);
        let (fh, fl) = (objective.value(&hi), objective.value(&lo));
        g[i] = match (fh.is_finite(), fl.is_finite()) {
            (true, true) if hi[i] > lo[i] => (fh - fl) / (hi[i] - lo[i]),
            (true, false) if hi[i] > c[i] => (fh - f0) / (hi[i] - c[i]),
            (false, true) if c[i] > lo[i] => (f0 - fl) / (c[i] - lo[i]),
            _ => 0.0,
        };
        // drop components that would push through an active bound
        if (c[i] <= 0.0 && g[i] > 0.0) || (c[i] >= 1.0 && g[i] < 0.0) {
            g[i] = 0.0;
        }
    }
    let n = g.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n > 0.0 && n.is_finite() {
        Some(g.map(|v| -v / n))
    } else {
        None
    }
}
