//! `graphseg segment` extracts a foreground mask from one image;
//! `graphseg eval` runs a whole manifest and reports per-image metrics.
//!
//! Exit status: 0 when everything succeeded, 1 when the run failed or some
//! manifest entries did, 2 for an invalid invocation.

use std::fs::File;
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use graphseg_core::eval::{run_dataset, EntryResult};
use graphseg_core::imageio::{
    load_lab_image, load_prior_map, load_trimap, parse_bbox, save_mask, trimap_from_bbox,
    trimap_from_prior,
};
use graphseg_core::pipeline::{first_iteration_matrix_dump, segment, superpixel_debug_png};
use graphseg_core::{BBox, Mode, SegConfig, Solver};

#[derive(Parser)]
#[command(name = "graphseg", version, about = "Foreground extraction by probabilistic matching on a superpixel graph")]
struct Cli {
    /// Log more (-v info, -vv debug, -vvv trace).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Segment one image into a foreground mask.
    Segment(SegmentArgs),
    /// Segment every manifest entry and report its metric.
    Eval(EvalArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    /// Two-sided unaries from a box or trimap.
    Semi,
    /// Two-sided unaries from a prior map.
    Auto,
    /// Background-only unaries in the first iteration.
    Gb,
}

#[derive(Clone, Copy, ValueEnum)]
enum SolverArg {
    Sgm,
    Pgm,
}

/// Model flags, mapping one to one onto [`SegConfig`].
#[derive(Args)]
struct ModelArgs {
    /// Foreground mixture components.
    #[arg(long, default_value_t = 3)]
    kf: usize,
    /// Background mixture components.
    #[arg(long, default_value_t = 3)]
    kb: usize,
    /// Most-similar neighbors kept per superpixel.
    #[arg(long, default_value_t = 4)]
    m: usize,
    /// Unary weight in the assignment matrix.
    #[arg(long, default_value_t = 2.0)]
    lambda: f64,
    /// Refinement iterations per run.
    #[arg(long, default_value_t = 10)]
    iters: usize,
    /// Independent reruns combined by majority vote.
    #[arg(long, default_value_t = 10)]
    runs: usize,
    /// Target superpixel size in pixels.
    #[arg(long, default_value_t = 200)]
    sp_size: usize,
    /// Base seed; rerun r uses seed + r.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Defaults to auto when initializing from a prior, semi otherwise.
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long, value_enum, default_value_t = SolverArg::Pgm)]
    solver: SolverArg,
}

impl ModelArgs {
    fn config(&self, default_mode: Mode) -> SegConfig {
        SegConfig {
            k_f: self.kf,
            k_b: self.kb,
            m: self.m,
            lambda: self.lambda,
            refine_iters: self.iters,
            runs: self.runs,
            seed: self.seed,
            mode: match self.mode {
                None => default_mode,
                Some(ModeArg::Semi) => Mode::Semi,
                Some(ModeArg::Auto) => Mode::Auto,
                Some(ModeArg::Gb) => Mode::Gb,
            },
            solver: match self.solver {
                SolverArg::Sgm => Solver::Sgm,
                SolverArg::Pgm => Solver::Pgm,
            },
            target_sp_size: self.sp_size,
        }
    }
}

fn bbox_arg(text: &str) -> Result<BBox, String> {
    parse_bbox(text).map_err(|e| e.to_string())
}

fn probability_arg(text: &str) -> Result<f64, String> {
    let v: f64 = text.parse().map_err(|e| format!("{e}"))?;
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("{v} is outside [0, 1]"))
    }
}

/// Exactly one way of saying where the foreground may be.
#[derive(Args)]
#[group(required = true, multiple = false)]
struct InitArgs {
    /// Bounding box "x y w h"; everything outside is background.
    #[arg(long, value_parser = bbox_arg)]
    bbox: Option<BBox>,
    /// Trimap PNG: 0 background, 255 foreground, anything else unknown.
    #[arg(long)]
    trimap: Option<PathBuf>,
    /// Grayscale foreground-probability map (0..255 maps to 0..1).
    #[arg(long)]
    prior: Option<PathBuf>,
}

#[derive(Args)]
struct SegmentArgs {
    /// Input image (PNG or JPEG).
    #[arg(long)]
    image: PathBuf,
    #[command(flatten)]
    init: InitArgs,
    /// Prior probability below which a pixel is clamped to background.
    #[arg(long, value_parser = probability_arg, default_value_t = 0.4)]
    p0: f64,
    /// Output mask path.
    #[arg(long, default_value = "mask.png")]
    out: PathBuf,
    /// Also write a superpixel-boundary PNG here.
    #[arg(long)]
    debug_superpixels: Option<PathBuf>,
    /// Also dump the first iteration's assignment matrix here, one
    /// "row col value" line per entry.
    #[arg(long)]
    dump_matrix: Option<PathBuf>,
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Args)]
struct EvalArgs {
    /// Manifest: image, groundtruth, init kind, init path, metric;
    /// tab-separated, one entry per line, paths relative to the manifest.
    #[arg(long)]
    manifest: PathBuf,
    /// Prior threshold applied to prior-initialized entries.
    #[arg(long, value_parser = probability_arg, default_value_t = 0.4)]
    p0: f64,
    /// Write records to this TSV instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    model: ModelArgs,
}

fn run_segment(a: &SegmentArgs) -> Result<()> {
    let img = load_lab_image(&a.image).with_context(|| format!("reading {}", a.image.display()))?;
    let (trimap, default_mode) = if let Some(bbox) = a.init.bbox {
        (trimap_from_bbox(img.width, img.height, bbox)?, Mode::Semi)
    } else if let Some(path) = &a.init.trimap {
        (
            load_trimap(path).with_context(|| format!("reading {}", path.display()))?,
            Mode::Semi,
        )
    } else {
        let path = a.init.prior.as_ref().expect("init group is required");
        let (w, h, prior) =
            load_prior_map(path).with_context(|| format!("reading {}", path.display()))?;
        if (w, h) != (img.width, img.height) {
            bail!(
                "prior map is {w}x{h} but the image is {}x{}",
                img.width,
                img.height
            );
        }
        (trimap_from_prior(w, h, &prior, a.p0)?, Mode::Auto)
    };
    let cfg = a.model.config(default_mode);

    if let Some(path) = &a.debug_superpixels {
        std::fs::write(path, superpixel_debug_png(&img, &cfg)?)
            .with_context(|| format!("writing {}", path.display()))?;
    }
    if let Some(path) = &a.dump_matrix {
        std::fs::write(path, first_iteration_matrix_dump(&img, &trimap, &cfg)?)
            .with_context(|| format!("writing {}", path.display()))?;
    }

    let outcome = segment(&img, &trimap, &cfg)?;
    if outcome.collapsed {
        log::warn!("all superpixels ended in one class; the mask is trivial");
    }
    save_mask(&a.out, &outcome.mask).with_context(|| format!("writing {}", a.out.display()))?;
    Ok(())
}

fn run_eval(a: &EvalArgs) -> Result<ExitCode> {
    let cfg = a.model.config(Mode::Semi);
    let report = run_dataset(&a.manifest, &cfg, a.p0)?;
    let mut out: Box<dyn Write> = match &a.out {
        Some(path) => Box::new(
            File::create(path).with_context(|| format!("creating {}", path.display()))?,
        ),
        None => Box::new(std::io::stdout().lock()),
    };
    let mut metric_names: Vec<&str> = Vec::new();
    for entry in &report.entries {
        match entry {
            EntryResult::Ok(r) => {
                if !metric_names.contains(&r.metric.name()) {
                    metric_names.push(r.metric.name());
                }
                writeln!(out, "{}\t{}\t{:.6}", r.image_id, r.metric.name(), r.value)?;
            }
            EntryResult::Failed { image_id, message } => {
                writeln!(out, "{image_id}\terror\t{message}")?;
            }
        }
    }
    match report.mean {
        Some(mean) => {
            let name = if metric_names.len() == 1 {
                metric_names[0]
            } else {
                "mixed"
            };
            writeln!(out, "mean\t{name}\t{mean:.6}")?;
        }
        None => writeln!(out, "mean\t-\tundefined")?,
    }
    Ok(if report.failed_count() == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        2 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();

    let result = match &cli.command {
        Command::Segment(a) => run_segment(a).map(|()| ExitCode::SUCCESS),
        Command::Eval(a) => run_eval(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
