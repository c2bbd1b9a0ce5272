//! Command-line surface over the pipeline: scene synthesis, fitting,
//! evaluation, rendering and gradient checking.
//!
//! Exit codes: 0 success, 1 I/O failure, 2 usage error, 3 fit-domain
//! error (empty condition, too few pixels, out-of-bounds RoI, ...). All
//! commands are deterministic given `--seed` (falling back to the
//! `CONDSEG_SEED` environment variable) and produce byte-reproducible
//! files.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::error::Error;
use crate::fitter::{assemble_class_map, fit_scene, FitConfig};
use crate::io::{
    normalize_to_unit, read_json, read_scene_bundle, write_json, write_mask_pgm, write_mask_png,
    write_scene_bundle, FitDoc, FitErrorDoc, SCHEMA_VERSION,
};
use crate::metrics::{evaluate, evaluate_baseline, format_table, parallel_map, BaselineOptions};
use crate::objective::{gradcheck_with_corruption, FD_TOL};
use crate::raster::{distmap, segmap};
use crate::synth::{generate_scene, SynthConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_IO: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_FIT: i32 = 3;

#[derive(Parser, Debug)]
#[command(
    name = "condseg",
    version,
    about = "Recover full pupil/iris ellipses from visible-only segmentation masks"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate synthetic scene bundles (masks + ground-truth ellipses)
    Synth(SynthArgs),
    /// Fit full iris and pupil ellipses to scene bundles
    Fit(FitArgs),
    /// Evaluate fits against scene ground truth
    Eval(EvalArgs),
    /// Render distmaps, segmaps, hard masks and the 3-class overlay
    Render(RenderArgs),
    /// Verify analytic gradients against central finite differences
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Output directory for scene bundles
    #[arg(long)]
    pub out: PathBuf,
    /// Number of scenes to generate (must be positive)
    #[arg(long)]
    pub count: usize,
    #[arg(long, default_value_t = 320)]
    pub width: usize,
    #[arg(long, default_value_t = 240)]
    pub height: usize,
    #[arg(long, env = "CONDSEG_SEED", default_value_t = 0)]
    pub seed: u64,
    /// Keep only scenes whose occlusion fraction does not exceed this
    #[arg(long)]
    pub occlusion_max: Option<f64>,
}

#[derive(Args, Debug)]
#[group(required = true, multiple = false)]
pub struct FitInput {
    /// One scene bundle directory; --out is a fit JSON file
    #[arg(long)]
    pub scene: Option<PathBuf>,
    /// Directory of scene bundles; --out is a directory of fit JSONs
    #[arg(long)]
    pub scenes: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct FitArgs {
    #[command(flatten)]
    pub input: FitInput,
    /// Output fit JSON file (--scene) or directory (--scenes)
    #[arg(long)]
    pub out: PathBuf,
    /// Soft-mask sharpness
    #[arg(long, default_value_t = 800.0)]
    pub tau: f64,
    /// Iteration budget per restart
    #[arg(long, default_value_t = 400)]
    pub iters: usize,
    #[arg(long, default_value_t = 4)]
    pub restarts: usize,
    #[arg(long, env = "CONDSEG_SEED", default_value_t = 0)]
    pub seed: u64,
    /// Scene-level parallelism for --scenes
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Directory of scene bundles
    #[arg(long)]
    pub scenes: PathBuf,
    /// Directory of fit JSONs named after the scene bundles
    #[arg(long)]
    pub fits: PathBuf,
    /// Output report JSON
    #[arg(long)]
    pub out: PathBuf,
    /// Add a baseline column; the only supported value is "ransac"
    #[arg(long)]
    pub baseline: Option<String>,
    #[arg(long, default_value_t = 500)]
    pub ransac_iters: usize,
    #[arg(long, default_value_t = 1.5)]
    pub ransac_thresh: f64,
    #[arg(long, env = "CONDSEG_SEED", default_value_t = 0)]
    pub seed: u64,
    /// Scene-level parallelism for the baseline column
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Args, Debug)]
pub struct RenderArgs {
    /// Scene bundle directory
    #[arg(long)]
    pub scene: PathBuf,
    /// Fit JSON produced by `fit`
    #[arg(long)]
    pub fit: PathBuf,
    /// Output path prefix
    #[arg(long)]
    pub out: String,
    /// Override the segmap sharpness recorded in the fit
    #[arg(long)]
    pub tau: Option<f64>,
    /// Additionally write PNG copies
    #[arg(long, default_value_t = false)]
    pub png: bool,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 50)]
    pub trials: usize,
    #[arg(long, env = "CONDSEG_SEED", default_value_t = 0)]
    pub seed: u64,
    /// Test fixture: flip the sign of one analytic partial (0..=4)
    #[arg(long, hide = true)]
    pub corrupt_partial: Option<usize>,
}

pub fn run(cli: &Cli) -> i32 {
    match &cli.command {
        Command::Synth(args) => run_synth(args),
        Command::Fit(args) => run_fit(args),
        Command::Eval(args) => run_eval(args),
        Command::Render(args) => run_render(args),
        Command::Gradcheck(args) => run_gradcheck(args),
    }
}

fn fail(code: i32, msg: impl std::fmt::Display) -> i32 {
    eprintln!("error: {msg}");
    code
}

fn error_code(e: &Error) -> i32 {
    if e.is_fit_domain() {
        EXIT_FIT
    } else {
        EXIT_IO
    }
}

// ── synth ──────────────────────────────────────────────────────────────────

fn run_synth(args: &SynthArgs) -> i32 {
    if args.count == 0 {
        return fail(EXIT_USAGE, "--count must be positive");
    }
    if args.width < 16 || args.height < 16 {
        return fail(EXIT_USAGE, "--width/--height must be at least 16");
    }
    let cfg = SynthConfig {
        width: args.width,
        height: args.height,
        seed: args.seed,
        ..SynthConfig::default()
    };
    let occ_max = args.occlusion_max.unwrap_or(1.0);
    let budget = 200 * args.count as u64 + 1000;
    let mut written = 0usize;
    let mut index = 0u64;
    while written < args.count {
        if index >= budget {
            return fail(EXIT_IO, format!("exhausted {budget} attempts looking for scenes with occlusion <= {occ_max}"));
        }
        let scene = match generate_scene(&cfg, index) {
            Ok(s) => s,
            Err(e) => return fail(error_code(&e), e),
        };
        index += 1;
        if scene.occlusion_fraction > occ_max {
            continue;
        }
        let dir = args.out.join(format!("scene_{written:04}"));
        if let Err(e) = write_scene_bundle(&dir, &scene) {
            return fail(EXIT_IO, e);
        }
        written += 1;
    }
    println!("wrote {written} scene bundles to {}", args.out.display());
    EXIT_OK
}

// ── fit ────────────────────────────────────────────────────────────────────

fn fit_config(tau: f64, iters: usize, restarts: usize, seed: u64) -> FitConfig {
    FitConfig { tau, max_iters: iters, restarts, seed, ..FitConfig::default() }
}

/// Fit one bundle into a document; I/O problems come back as `Err`,
/// fit-domain failures as a document with the `error` field set.
fn fit_one(scene_dir: &Path, cfg: &FitConfig) -> Result<FitDoc, Error> {
    let scene = read_scene_bundle(scene_dir)?;
    let mut doc = FitDoc {
        schema_version: SCHEMA_VERSION,
        tau: cfg.tau,
        seed: cfg.seed,
        fit: None,
        error: None,
    };
    match fit_scene(&scene.visible_pupil, &scene.visible_iris_region, &scene.eye, cfg) {
        Ok(fit) => doc.fit = Some(fit),
        Err(e) if e.is_fit_domain() => {
            doc.error = Some(FitErrorDoc { kind: e.kind().into(), message: e.to_string() })
        }
        Err(e) => return Err(e),
    }
    Ok(doc)
}

fn run_fit(args: &FitArgs) -> i32 {
    let cfg = fit_config(args.tau, args.iters, args.restarts, args.seed);
    if let Some(scene_dir) = &args.input.scene {
        let doc = match fit_one(scene_dir, &cfg) {
            Ok(d) => d,
            Err(e) => return fail(error_code(&e), e),
        };
        if let Err(e) = write_json(&doc, &args.out) {
            return fail(EXIT_IO, e);
        }
        match &doc.error {
            Some(err) => fail(EXIT_FIT, format!("{}: {}", err.kind, err.message)),
            None => {
                println!("wrote {}", args.out.display());
                EXIT_OK
            }
        }
    } else {
        let scenes_root = args.input.scenes.as_ref().expect("clap group");
        let dirs = match list_scene_dirs(scenes_root) {
            Ok(d) => d,
            Err(e) => return fail(EXIT_IO, e),
        };
        if dirs.is_empty() {
            return fail(EXIT_USAGE, format!("no scene_* bundles under {}", scenes_root.display()));
        }
        if let Err(e) = fs::create_dir_all(&args.out) {
            return fail(EXIT_IO, e);
        }
        let docs = parallel_map(&dirs, args.jobs, |_, dir| fit_one(dir, &cfg));
        let mut n_fit_errors = 0usize;
        for (dir, doc) in dirs.iter().zip(docs) {
            let doc = match doc {
                Ok(d) => d,
                Err(e) => return fail(error_code(&e), e),
            };
            if doc.error.is_some() {
                n_fit_errors += 1;
            }
            let name = dir.file_name().expect("scene dir name").to_string_lossy();
            if let Err(e) = write_json(&doc, &args.out.join(format!("{name}.json"))) {
                return fail(EXIT_IO, e);
            }
        }
        println!("fitted {} scenes ({n_fit_errors} failed) into {}", dirs.len(), args.out.display());
        if n_fit_errors > 0 {
            EXIT_FIT
        } else {
            EXIT_OK
        }
    }
}

// ── eval ───────────────────────────────────────────────────────────────────

fn run_eval(args: &EvalArgs) -> i32 {
    if let Some(b) = &args.baseline {
        if b != "ransac" {
            return fail(EXIT_USAGE, format!("unknown baseline {b:?}; supported: ransac"));
        }
    }
    let dirs = match list_scene_dirs(&args.scenes) {
        Ok(d) => d,
        Err(e) => return fail(EXIT_IO, e),
    };
    if dirs.is_empty() {
        return fail(EXIT_USAGE, format!("no scene_* bundles under {}", args.scenes.display()));
    }
    let mut scenes = Vec::with_capacity(dirs.len());
    let mut fits = Vec::with_capacity(dirs.len());
    for dir in &dirs {
        let scene = match read_scene_bundle(dir) {
            Ok(s) => s,
            Err(e) => return fail(EXIT_IO, e),
        };
        let name = dir.file_name().expect("scene dir name").to_string_lossy();
        let fit_path = args.fits.join(format!("{name}.json"));
        if !fit_path.exists() {
            return fail(EXIT_USAGE, format!("misaligned inputs: missing {}", fit_path.display()));
        }
        let doc: FitDoc = match read_json(&fit_path) {
            Ok(d) => d,
            Err(e) => return fail(EXIT_IO, e),
        };
        scenes.push(scene);
        fits.push(doc.fit);
    }
    let mut report = match evaluate(&scenes, &fits) {
        Ok(r) => r,
        Err(e) => return fail(error_code(&e), e),
    };
    if args.baseline.is_some() {
        let opts = BaselineOptions {
            iters: args.ransac_iters,
            inlier_thresh: args.ransac_thresh,
            seed: args.seed,
        };
        match evaluate_baseline(&scenes, &opts, args.jobs) {
            Ok((summary, n_failed)) => {
                if n_failed > 0 {
                    eprintln!("note: ransac baseline failed on {n_failed} scenes");
                }
                report.ransac = Some(summary);
            }
            Err(e) => return fail(error_code(&e), e),
        }
    }
    if let Err(e) = write_json(&report, &args.out) {
        return fail(EXIT_IO, e);
    }
    print!("{}", format_table(&report));
    EXIT_OK
}

// ── render ─────────────────────────────────────────────────────────────────

fn run_render(args: &RenderArgs) -> i32 {
    let scene = match read_scene_bundle(&args.scene) {
        Ok(s) => s,
        Err(e) => return fail(EXIT_IO, e),
    };
    let doc: FitDoc = match read_json(&args.fit) {
        Ok(d) => d,
        Err(e) => return fail(EXIT_IO, e),
    };
    let Some(fit) = doc.fit else {
        let msg = doc
            .error
            .map(|e| format!("{}: {}", e.kind, e.message))
            .unwrap_or_else(|| "fit document holds no fit".into());
        return fail(EXIT_FIT, msg);
    };
    let tau = args.tau.unwrap_or(doc.tau);
    let (w, h) = scene.eye.shape();
    let delta = FitConfig::default().delta;

    let mut outputs: Vec<(String, crate::raster::MaskImage)> = Vec::new();
    for (name, e) in [("iris", &fit.iris.ellipse), ("pupil", &fit.pupil.ellipse)] {
        let d = match distmap(e, w, h) {
            Ok(d) => d,
            Err(err) => return fail(error_code(&err), err),
        };
        let s = match segmap(&d, tau, delta) {
            Ok(s) => s,
            Err(err) => return fail(error_code(&err), err),
        };
        let hard = crate::raster::hard_mask(e, w, h).expect("validated ellipse");
        outputs.push((format!("{name}_distmap"), normalize_to_unit(&d)));
        outputs.push((format!("{name}_segmap"), s));
        outputs.push((format!("{name}_hard"), hard));
    }
    match assemble_class_map(&fit.iris.ellipse, &fit.pupil.ellipse, &scene.eye) {
        Ok(cm) => outputs.push(("classes".into(), cm.to_grayscale())),
        Err(e) => return fail(error_code(&e), e),
    }

    for (suffix, mask) in &outputs {
        let pgm = PathBuf::from(format!("{}_{suffix}.pgm", args.out));
        if let Err(e) = write_mask_pgm(mask, &pgm) {
            return fail(EXIT_IO, e);
        }
        if args.png {
            let png_path = PathBuf::from(format!("{}_{suffix}.png", args.out));
            if let Err(e) = write_mask_png(mask, &png_path) {
                return fail(EXIT_IO, e);
            }
        }
    }
    println!("wrote {} images with prefix {} (tau = {tau})", outputs.len(), args.out);
    EXIT_OK
}

// ── gradcheck ──────────────────────────────────────────────────────────────

fn run_gradcheck(args: &GradcheckArgs) -> i32 {
    if args.trials == 0 {
        return fail(EXIT_USAGE, "--trials must be positive");
    }
    if let Some(k) = args.corrupt_partial {
        if k > 4 {
            return fail(EXIT_USAGE, "--corrupt-partial must be in 0..=4");
        }
    }
    let report = gradcheck_with_corruption(args.trials, args.seed, args.corrupt_partial);
    for (name, err) in ["xhat0", "yhat0", "ahat", "bhat", "thetahat"]
        .iter()
        .zip(report.max_rel_err)
    {
        println!("{name:<9} max rel err {err:.3e}");
    }
    if report.passed {
        println!("gradcheck: PASS ({} trials, tol {FD_TOL:.0e})", report.trials);
        EXIT_OK
    } else {
        println!("gradcheck: FAIL ({} trials, tol {FD_TOL:.0e})", report.trials);
        1
    }
}

// ── Helpers ────────────────────────────────────────────────────────────────

/// Sorted `scene_*` subdirectories of a bundle root.
pub fn list_scene_dirs(root: &Path) -> std::io::Result<Vec<PathBuf>> {
    let mut dirs = Vec::new();
    for entry in fs::read_dir(root)? {
        let entry = entry?;
        if !entry.file_type()?.is_dir() {
            continue;
        }
        if entry.file_name().to_string_lossy().starts_with("scene_") {
            dirs.push(entry.path());
        }
    }
    dirs.sort();
    Ok(dirs)
}
