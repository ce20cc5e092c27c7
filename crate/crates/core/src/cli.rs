//! Command-line entry point.
//!
//! Every subcommand works inside one output directory:
//!
//! ```text
//! <out>/data/manifest.txt, <out>/data/frames/*.png    synth
//! <out>/train/checkpoint.tkpc, <out>/train/loss_log.csv  train
//! <out>/eval/report.csv, <out>/eval/summary.txt       eval
//! <out>/render/*.png                                  render
//! ```

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::config::RunSettings;
use crate::dataset::{generate_synthetic, load_manifest, load_poses, Frame, Split};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalFrame, EvalReport, FrameReport};
use crate::model::{load_checkpoint, TkPlanes};
use crate::raster::{read_png, write_png};
use crate::train::{build_model, distinct_timestamps, train};

#[derive(Debug, Parser)]
#[command(
    name = "tkplanes",
    version,
    about = "Tiered feature-plane radiance fields for dynamic scenes"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Flat key = value settings file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory (created if missing).
    #[arg(long, global = true, default_value = "tkp_out")]
    pub out: PathBuf,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Checkpoint to render or evaluate (default: <out>/train/checkpoint.tkpc).
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,
    /// Split to evaluate.
    #[arg(long, global = true, value_enum, default_value_t = SplitArg::Val)]
    pub split: SplitArg,
    /// Pose list (manifest format) for `render`.
    #[arg(long, global = true)]
    pub poses: Option<PathBuf>,
    /// Dataset manifest (default: <out>/data/manifest.txt).
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,
    /// More log output; repeat for more.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    /// Only errors.
    #[arg(short, long, global = true)]
    pub quiet: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dynamic scene and its manifest.
    Synth,
    /// Train a model on the manifest's training split.
    Train,
    /// Render images for a list of poses and timestamps.
    Render,
    /// Render a split and score PSNR / DPSNR.
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
        }
    }
}

/// Parses `argv` (including the program name), runs, and returns the
/// process exit code.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    init_logging(&cli);
    init_threads();
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn init_logging(cli: &Cli) {
    let level = if cli.quiet {
        log::LevelFilter::Error
    } else {
        match cli.verbose {
            0 => log::LevelFilter::Info,
            1 => log::LevelFilter::Debug,
            _ => log::LevelFilter::Trace,
        }
    };
    let _ = env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(None)
        .try_init();
}

fn init_threads() {
    #[cfg(feature = "parallel")]
    if let Some(n) = std::env::var("TKP_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            log::debug!("thread pool already configured: {e}");
        }
    }
}

fn settings(cli: &Cli) -> Result<RunSettings> {
    let mut s = match &cli.config {
        Some(p) => RunSettings::read(p)?,
        None => RunSettings::default(),
    };
    if let Some(seed) = cli.seed {
        s.train.seed = seed;
    }
    Ok(s)
}

fn manifest_path(cli: &Cli) -> PathBuf {
    cli.manifest
        .clone()
        .unwrap_or_else(|| cli.out.join("data").join("manifest.txt"))
}

fn checkpoint_path(cli: &Cli) -> PathBuf {
    cli.checkpoint
        .clone()
        .unwrap_or_else(|| cli.out.join("train").join("checkpoint.tkpc"))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn execute(cli: &Cli) -> Result<()> {
    std::fs::create_dir_all(&cli.out).map_err(|e| Error::io(&cli.out, e))?;
    let s = settings(cli)?;
    match cli.command {
        Command::Synth => {
            let spec = s.synth.to_spec(s.train.seed);
            let scene = generate_synthetic(&spec)?;
            let path = scene.write(&cli.out.join("data"))?;
            log::info!(
                "wrote {} frames to {} (dynamic pixel ratio {:.4})",
                scene.images.len(),
                path.display(),
                scene.dynamic_pixel_ratio
            );
            Ok(())
        }
        Command::Train => {
            let manifest = load_manifest(&manifest_path(cli))?;
            let frames = manifest.load_frames(Split::Train)?;
            let val = manifest.load_frames(Split::Val)?;
            let model = build_model(
                &s.train,
                manifest.width,
                manifest.height,
                manifest.scene_bounds()?,
                distinct_timestamps(&frames),
            )?;
            log::info!(
                "training on {} frames, {} parameters, {} rays per image",
                frames.len(),
                model.store.num_scalars(),
                model.config.rays_per_image()
            );
            let dir = cli.out.join("train");
            let outcome = train(model, &frames, &val, &s.train, Some(&dir))?;
            log::info!(
                "finished {} iterations, running loss {:.6}; checkpoint in {}",
                outcome.info.iteration,
                outcome.info.running_loss,
                dir.display()
            );
            Ok(())
        }
        Command::Render => {
            let poses = cli
                .poses
                .as_ref()
                .ok_or_else(|| Error::Config("render needs --poses <manifest>".into()))?;
            let (model, _) = load_checkpoint(&checkpoint_path(cli))?;
            let summary = render_novel(&model, poses, &cli.out.join("render"))?;
            for (i, e) in &summary.errors {
                log::error!("pose {i}: {e}");
            }
            log::info!("rendered {} images", summary.written.len());
            Ok(())
        }
        Command::Eval => {
            let (model, _) = load_checkpoint(&checkpoint_path(cli))?;
            let manifest = load_manifest(&manifest_path(cli))?;
            let split: Split = cli.split.into();
            let records = manifest.split(split);
            if records.is_empty() {
                return Err(Error::Config(format!("the {} split is empty", split.as_str())));
            }
            let dir = cli.out.join("eval");
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            let mut report = EvalReport::default();
            for r in records {
                let name = r.image.display().to_string();
                let frame = read_png(&manifest.image_path(r)).map(|image| Frame {
                    record: r.clone(),
                    image,
                });
                let row = match frame {
                    Ok(f) => {
                        let one = [EvalFrame {
                            name: name.clone(),
                            pose: &f.record.pose,
                            image: &f.image,
                            boxes: &f.record.boxes,
                        }];
                        let mut dump_err = None;
                        let mut rep = evaluate(&model, &one, |n, img| {
                            if s.dump_images {
                                if let Err(e) = write_png(&dir.join("images").join(n), img) {
                                    dump_err = Some(e);
                                }
                            }
                        });
                        if let Some(e) = dump_err {
                            return Err(e);
                        }
                        rep.frames.remove(0)
                    }
                    Err(e) => FrameReport {
                        name,
                        psnr: None,
                        dpsnr: None,
                        render_ms: 0.0,
                        rays: model.config.rays_per_image(),
                        error: Some(e.to_string()),
                    },
                };
                report.frames.push(row);
            }
            write_text(&dir.join("report.csv"), &report.to_csv(true))?;
            write_text(&dir.join("summary.txt"), &report.summary())?;
            print!("{}", report.summary());
            Ok(())
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct RenderSummary {
    pub written: Vec<PathBuf>,
    /// Index into the pose list and what went wrong.
    pub errors: Vec<(usize, String)>,
}

/// Renders one image per entry of the pose list at `poses`. Entries whose
/// image field is `-` are named `render_NNNN.png`. Bad entries (timestamp
/// outside `[0, 1]`, wrong image size) are reported and skipped.
pub fn render_novel(model: &TkPlanes, poses: &Path, out_dir: &Path) -> Result<RenderSummary> {
    let list = load_poses(poses)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut summary = RenderSummary::default();
    for (i, f) in list.frames.iter().enumerate() {
        let t = f.timestamp();
        if !(0.0..=1.0).contains(&t) {
            summary.errors.push((i, format!("timestamp {t} outside [0, 1]")));
            continue;
        }
        let name = if f.image.as_os_str() == "-" {
            PathBuf::from(format!("render_{i:04}.png"))
        } else {
            f.image.clone()
        };
        match model.render(&f.pose) {
            Ok(img) => {
                let path = out_dir.join(name);
                write_png(&path, &img)?;
                summary.written.push(path);
            }
            Err(e) => summary.errors.push((i, e.to_string())),
        }
    }
    Ok(summary)
}
