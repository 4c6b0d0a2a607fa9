//! `planestitch` command-line tool.
//!
//! Exit status: 0 success, 2 matching failure, 3 unreadable or unwritable
//! file, 4 configuration or degenerate geometry. Every failure prints one
//! line starting with `planestitch: error[<kind>]:` on stderr.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use planestitch::config::RunConfig;
use planestitch::homography::{DecompositionCoefficients, Homography};
use planestitch::io;
use planestitch::metrics::BucketMode;
use planestitch::pipeline::{self, Injected};
use planestitch::synth::{Photometric, SceneSpec, Texture};
use planestitch::Error;

#[derive(Parser)]
#[command(name = "planestitch", version, about = "Stitch two views on a distortion-minimizing plane")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

/// Settings shared by every subcommand; they override the config file.
#[derive(Args)]
struct Common {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Correlation cell size in pixels.
    #[arg(long, global = true)]
    cell: Option<usize>,
    /// Sigma search range as `lo,hi`.
    #[arg(long, global = true, allow_hyphen_values = true)]
    sigma_range: Option<String>,
    #[arg(long, global = true)]
    sigma_iters: Option<usize>,
    /// Enable the local thin-plate spline stage.
    #[arg(long, global = true)]
    local: bool,
    /// Skip photometric refinement of the global homography.
    #[arg(long, global = true)]
    no_refine: bool,
    /// `tertile` or `fixed:t1,t2`.
    #[arg(long, global = true)]
    bucket: Option<String>,
}

/// Four descriptor tensors replacing the built-in extractors.
#[derive(Args)]
struct FeatureArgs {
    /// RSFT tensors: extractor A reference, A target, B reference, B target.
    #[arg(long, num_args = 4, value_names = ["A_REF", "A_TGT", "B_REF", "B_TGT"])]
    features: Option<Vec<PathBuf>>,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate, decompose, warp and blend a pair.
    Stitch {
        reference: PathBuf,
        target: PathBuf,
        /// Output directory.
        #[arg(long, short)]
        out: PathBuf,
        /// Ground-truth homography JSON; adds corner errors to the result.
        #[arg(long)]
        truth: Option<PathBuf>,
        #[command(flatten)]
        features: FeatureArgs,
        /// RSFT saliency rasters of the reference and target.
        #[arg(long, num_args = 2, value_names = ["S_REF", "S_TGT"])]
        saliency: Option<Vec<PathBuf>>,
    },
    /// Split a homography onto a plane given or optimized coefficients.
    Decompose {
        /// Homography JSON (`{"h": [9 values]}`).
        h: PathBuf,
        /// Per-vertex coefficients.
        #[arg(long = "c", num_args = 4, conflicts_with = "optimize", value_names = ["C0", "C1", "C2", "C3"])]
        c: Option<Vec<f64>>,
        /// Optimize the coefficients.
        #[arg(long)]
        optimize: bool,
        /// Images that fix the frame size and provide saliency.
        #[arg(long, num_args = 2, value_names = ["REF", "TGT"])]
        images: Option<Vec<PathBuf>>,
        /// RSFT saliency rasters of the reference and target.
        #[arg(long, num_args = 2, value_names = ["S_REF", "S_TGT"])]
        saliency: Option<Vec<PathBuf>>,
        #[arg(long)]
        width: Option<usize>,
        #[arg(long)]
        height: Option<usize>,
        /// Write the JSON here instead of stdout.
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Ternary search for the fusion weight, with an optional fixed sweep.
    SearchSigma {
        reference: PathBuf,
        target: PathBuf,
        #[command(flatten)]
        features: FeatureArgs,
        /// Also probe this many evenly spaced values.
        #[arg(long)]
        fixed: Option<usize>,
        /// Write the JSON report here.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Overlap metrics and bucket table for a directory or a single pair.
    Eval {
        /// Directory of `<name>_ref.png` / `<name>_tgt.png` pairs.
        dir: Option<PathBuf>,
        #[arg(long = "ref", requires = "tgt", conflicts_with = "dir")]
        reference: Option<PathBuf>,
        #[arg(long = "tgt", requires = "reference")]
        tgt: Option<PathBuf>,
        /// Target-to-reference homography for a raw pair.
        #[arg(long, requires = "reference")]
        h: Option<PathBuf>,
        /// Write the JSON report here.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Generate a synthetic pair with its true homography.
    Synth {
        #[arg(long, short)]
        out: PathBuf,
        #[arg(long, default_value_t = 512)]
        width: usize,
        #[arg(long, default_value_t = 512)]
        height: usize,
        /// perlin, checker-multiscale or blob-field.
        #[arg(long, default_value = "perlin")]
        texture: String,
        #[arg(long, default_value_t = 0.15)]
        h_magnitude: f64,
        #[arg(long, default_value_t = 0.0)]
        parallax: f64,
        #[arg(long)]
        gamma: Option<f64>,
        #[arg(long, allow_hyphen_values = true)]
        brightness: Option<f64>,
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
    },
}

fn config_error(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

fn parse_range(s: &str) -> Result<(f64, f64), Error> {
    let bad = || config_error(format!("--sigma-range: expected `lo,hi`, got `{s}`"));
    let (a, b) = s.split_once(',').ok_or_else(bad)?;
    Ok((a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?))
}

/// Defaults, then the file, then flags.
fn build_config(c: &Common) -> Result<RunConfig, Error> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(v) = c.seed {
        cfg.seed = v;
    }
    if let Some(v) = c.cell {
        cfg.cell = v;
    }
    if let Some(r) = &c.sigma_range {
        (cfg.sigma.range_lo, cfg.sigma.range_hi) = parse_range(r)?;
    }
    if let Some(v) = c.sigma_iters {
        cfg.sigma.iters = v;
    }
    if c.local {
        cfg.local = true;
    }
    if c.no_refine {
        cfg.refine_global = false;
    }
    if let Some(b) = &c.bucket {
        cfg.bucket = b.parse::<BucketMode>()?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn injected(features: &FeatureArgs, saliency: Option<&Vec<PathBuf>>) -> Result<Injected, Error> {
    let f = features.features.as_ref().map(|v| [v[0].as_path(), v[1].as_path(), v[2].as_path(), v[3].as_path()]);
    let s = saliency.map(|v| [v[0].as_path(), v[1].as_path()]);
    Injected::load(f, s)
}

fn emit_json<T: serde::Serialize>(value: &T, out: Option<&Path>) -> Result<(), Error> {
    match out {
        Some(p) => io::write_json(p, value),
        None => {
            print!("{}", io::to_json_string(value)?);
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    let cfg = build_config(&cli.common)?;
    match cli.command {
        Command::Stitch { reference, target, out, truth, features, saliency } => {
            let inj = injected(&features, saliency.as_ref())?;
            let r = pipeline::stitch_files(&reference, &target, &out, &cfg, &inj, truth.as_deref())?;
            println!("sigma {:.6}  c_dec {:?}  plane loss {:.6}", r.sigma, r.plane.c_dec, r.plane.loss);
            if let Some(m) = &r.metrics {
                println!("overlap mPSNR {:.3} dB  mSSIM {:.4}", m.mpsnr, m.mssim);
            }
            if let Some(t) = &r.truth {
                println!("corner error mean {:.4} px  max {:.4} px", t.corner_error_mean, t.corner_error_max);
            }
            println!("wrote {}", out.display());
        }
        Command::Decompose { h, c, optimize, images, saliency, width, height, out } => {
            let hm: Homography = io::read_json(&h)?;
            let (w, hh, sal) = match &images {
                Some(v) => {
                    let a = io::read_image(&v[0])?;
                    let b = io::read_image(&v[1])?;
                    let inj = Injected::load(None, saliency.as_ref().map(|s| [s[0].as_path(), s[1].as_path()]))?;
                    let sal = pipeline::saliency_pair(&a, &b, &cfg, &inj)?;
                    (a.width(), a.height(), Some(sal))
                }
                None => {
                    let sal = match &saliency {
                        Some(s) => Some((io::read_scalar_map(&s[0])?, io::read_scalar_map(&s[1])?)),
                        None => None,
                    };
                    let dims = sal.as_ref().map(|(a, _)| (a.width(), a.height()));
                    let w = width.or(dims.map(|d| d.0)).ok_or_else(|| config_error("decompose: give --images, --saliency or --width/--height"))?;
                    let hh = height.or(dims.map(|d| d.1)).ok_or_else(|| config_error("decompose: give --images, --saliency or --width/--height"))?;
                    (w, hh, sal)
                }
            };
            let coeffs = match (c, optimize) {
                (Some(v), false) => {
                    if v.iter().any(|x| !(0.0..=1.0).contains(x)) {
                        return Err(config_error("--c: coefficients must lie in [0, 1]"));
                    }
                    Some(DecompositionCoefficients::new([v[0], v[1], v[2], v[3]]))
                }
                (None, true) => None,
                _ => return Err(config_error("decompose: give exactly one of --c or --optimize")),
            };
            let r = pipeline::decompose_h(&hm, w, hh, coeffs, sal, &cfg)?;
            emit_json(&r, out.as_deref())?;
        }
        Command::SearchSigma { reference, target, features, fixed, json } => {
            let inj = injected(&features, None)?;
            let a = io::read_image(&reference)?;
            let b = io::read_image(&target)?;
            let r = pipeline::search_sigma(&a, &b, &cfg, &inj, fixed)?;
            print!("{}", pipeline::render_sigma_report(&r));
            if let Some(p) = json {
                io::write_json(&p, &r)?;
            }
        }
        Command::Eval { dir, reference, tgt, h, json } => {
            let pairs = match (dir, reference, tgt) {
                (Some(d), None, None) => pipeline::load_eval_dir(&d)?,
                (None, Some(r), Some(t)) => {
                    let tmp_stem = |p: &Path| p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                    let a = io::read_image(&r)?;
                    let b = io::read_image(&t)?;
                    let canvas = planestitch::warp::Canvas::frame(a.width(), a.height());
                    let target = match &h {
                        Some(hp) => {
                            let hm: Homography = io::read_json(hp)?;
                            planestitch::warp::warp_image_h(&b, &hm, &canvas)?
                        }
                        None => planestitch::warp::WarpedImage::unwarped(&b),
                    };
                    vec![pipeline::EvalPair {
                        name: tmp_stem(&r),
                        reference: planestitch::warp::WarpedImage::unwarped(&a),
                        target,
                    }]
                }
                _ => return Err(config_error("eval: give a directory or --ref and --tgt")),
            };
            let r = pipeline::evaluate(&pairs, &cfg.bucket)?;
            print!("{}", r.table);
            for row in r.pairs.iter().filter(|p| p.skipped.is_some()) {
                println!("skipped {}: {}", row.name, row.skipped.as_deref().unwrap_or(""));
            }
            if let Some(p) = json {
                io::write_json(&p, &r)?;
            }
        }
        Command::Synth { out, width, height, texture, h_magnitude, parallax, gamma, brightness, noise } => {
            let texture: Texture = texture.parse()?;
            let photometric = match (gamma, brightness) {
                (None, None) => None,
                (g, b) => Some(Photometric { gamma: g.unwrap_or(1.0), brightness: b.unwrap_or(0.0) }),
            };
            let spec = SceneSpec {
                width,
                height,
                texture,
                h_magnitude,
                parallax_px: parallax,
                photometric,
                noise_std: noise,
                seed: cfg.seed,
            };
            let r = pipeline::synth_files(&spec, &out)?;
            println!("wrote {} (h_true {:?})", out.display(), r.h_true.matrix());
        }
    }
    Ok(())
}

fn fail(kind: &str, msg: &str, code: u8) -> ExitCode {
    let line = msg.lines().map(str::trim).filter(|l| !l.is_empty()).collect::<Vec<_>>().join(" ");
    eprintln!("planestitch: error[{kind}]: {line}");
    ExitCode::from(code)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let text = e.render().to_string();
            let first = text.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            return fail("usage", first, 4);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(e.kind(), &e.to_string(), e.exit_code() as u8),
    }
}
