pub mod config;
pub mod correlation;
pub mod distortion;
pub mod error;
pub mod geometry;
pub mod homography;
pub mod io;
pub mod local;
pub mod losses;
pub mod metrics;
pub mod pipeline;
pub mod plane;
pub mod raster;
pub mod refine;
pub mod synth;
pub mod warp;

pub use error::{Error, Result};

/// The guide's chapters, compiled so their snippets run as doctests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/homography.md")]
    mod homography {}
    #[doc = include_str!("../../../book/src/distortion.md")]
    mod distortion {}
    #[doc = include_str!("../../../book/src/plane.md")]
    mod plane {}
    #[doc = include_str!("../../../book/src/correlation.md")]
    mod correlation {}
    #[doc = include_str!("../../../book/src/warping.md")]
    mod warping {}
    #[doc = include_str!("../../../book/src/losses-metrics.md")]
    mod losses_metrics {}
    #[doc = include_str!("../../../book/src/synthetic.md")]
    mod synthetic {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
