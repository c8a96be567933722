//! `smurf`: generate toy datasets, train, render held-out views, evaluate and
//! inspect learned blur kernels.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use smurf_core::fsio;
use smurf_core::image::Image;
use smurf_core::scenegen::{self, export_dataset, rig_spec, test_name, Dataset, Motion, RigOptions};
use smurf_core::train::{self, load_checkpoint, render_test_views, Ablation, EvalReport, TrainConfig, CHECKPOINT};

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Runtime(#[from] smurf_core::Error),
}

type CliResult<T> = Result<T, CliError>;

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Usage(format!("{}: {e}", path.display()))
}

#[derive(Parser, Debug)]
#[command(name = "smurf", version, about = "Radiance fields from motion-blurred images")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a blurred toy dataset to a directory.
    GenData(GenData),
    /// Train a model on a dataset directory.
    Train(TrainArgs),
    /// Render sharp held-out views from a checkpoint.
    Render(RenderArgs),
    /// Score held-out renders with PSNR and SSIM.
    Eval(EvalArgs),
    /// Export the learned blur kernel of one pixel.
    InspectKernel(InspectArgs),
}

#[derive(Args, Debug)]
struct GenData {
    /// default, linear, stationary, cubic or tiny.
    #[arg(long, default_value = "default")]
    preset: String,
    /// Camera motion during exposure: stationary, linear or cubic.
    #[arg(long)]
    interp: Option<String>,
    #[arg(long)]
    resolution: Option<usize>,
    #[arg(long)]
    views: Option<usize>,
    #[arg(long)]
    test_views: Option<usize>,
    #[arg(long)]
    subframes: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// TOML file with any subset of the training keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    iters: Option<usize>,
    /// full, no-suppression, no-residual, no-regularizers, time-only,
    /// no-embedding or no-kernel.
    #[arg(long)]
    ablation: Option<String>,
    #[arg(long)]
    warps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ModelArgs {
    /// Checkpoint file, or a run directory containing one.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
}

#[derive(Args, Debug)]
struct RenderArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Compare against the test images in this directory instead of the
    /// dataset's; renders are quantized to 8 bits first.
    #[arg(long)]
    against: Option<PathBuf>,
    /// Write CSV to the given file, or to stdout when no file is given.
    #[arg(long, num_args = 0..=1)]
    csv: Option<Option<PathBuf>>,
}

#[derive(Args, Debug)]
struct InspectArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    view: usize,
    /// Pixel coordinates `x y`; pixel centers sit at half-integers.
    #[arg(long, num_args = 2, value_names = ["X", "Y"], allow_negative_numbers = true)]
    pixel: Vec<f64>,
    /// Trace CSV path; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Draw the pixel path over the blurry image into this PNG.
    #[arg(long)]
    overlay: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Render(a) => render_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::InspectKernel(a) => inspect_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn gen_data(a: GenData) -> CliResult<()> {
    let usage = |e: smurf_core::Error| CliError::Usage(e.to_string());
    let mut opts = RigOptions::preset(&a.preset).map_err(usage)?;
    if let Some(m) = &a.interp {
        opts.motion = m.parse::<Motion>().map_err(usage)?;
    }
    opts.resolution = a.resolution.unwrap_or(opts.resolution);
    opts.views = a.views.unwrap_or(opts.views);
    opts.test_views = a.test_views.unwrap_or(opts.test_views);
    opts.subframes = a.subframes.unwrap_or(opts.subframes);
    opts.seed = a.seed.unwrap_or(opts.seed);
    let spec = rig_spec(&opts).map_err(usage)?;
    let manifest = export_dataset(&spec, &a.out)?;
    println!(
        "{}: {} blurred views, {} held-out views, {}x{}, {:?} motion, {} sub-frames",
        a.out.display(),
        manifest.views.len(),
        manifest.test_poses.len(),
        manifest.width,
        manifest.height,
        opts.motion,
        opts.subframes
    );
    Ok(())
}

fn load_dataset(dir: &Path) -> CliResult<Dataset> {
    if !dir.join("manifest.json").is_file() {
        return Err(CliError::Usage(format!("{} is not a dataset directory", dir.display())));
    }
    Ok(Dataset::load(dir)?)
}

fn train_cmd(a: TrainArgs) -> CliResult<()> {
    let data = load_dataset(&a.data)?;
    let mut cfg = match &a.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
            TrainConfig::from_toml(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?
        }
        None => TrainConfig::default(),
    };
    if let Some(name) = &a.ablation {
        name.parse::<Ablation>().map_err(|e| CliError::Usage(e.to_string()))?.apply(&mut cfg);
    }
    cfg.iterations = a.iters.unwrap_or(cfg.iterations);
    cfg.cmbk.warps = a.warps.unwrap_or(cfg.cmbk.warps);
    cfg.batch_size = a.batch_size.unwrap_or(cfg.batch_size);
    cfg.seed = a.seed.unwrap_or(cfg.seed);
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let run = train::train(&data, &cfg, Some(&a.out))?;
    match run.log.last() {
        Some(last) => println!(
            "{} iterations, recon {:.6}, suppression {:.6}, {:.1}s",
            last.iteration, last.recon_loss, last.supp_loss, last.wall_time
        ),
        None => println!("0 iterations"),
    }
    println!("checkpoint: {}", a.out.join(CHECKPOINT).display());
    Ok(())
}

fn checkpoint_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(CHECKPOINT)
    } else {
        p.to_path_buf()
    }
}

fn load_model(a: &ModelArgs) -> CliResult<(train::Model, Dataset)> {
    let data = load_dataset(&a.data)?;
    let path = checkpoint_path(&a.checkpoint);
    if !path.is_file() {
        return Err(CliError::Runtime(smurf_core::Error::Io {
            path,
            source: std::io::Error::from(std::io::ErrorKind::NotFound),
        }));
    }
    let ck = load_checkpoint(&path)?;
    if ck.model.frame.views != data.manifest.views.len() {
        return Err(CliError::Usage(format!(
            "checkpoint was trained on {} views, dataset has {}",
            ck.model.frame.views,
            data.manifest.views.len()
        )));
    }
    Ok((ck.model, data))
}

fn is_render_dir(p: &Path) -> bool {
    fs::read_dir(p).map(|entries| {
        entries.flatten().all(|e| {
            let name = e.file_name().to_string_lossy().into_owned();
            name.starts_with("test_") && name.ends_with(".png")
        })
    })
    .unwrap_or(false)
}

fn render_cmd(a: RenderArgs) -> CliResult<()> {
    let (model, data) = load_model(&a.model)?;
    let images = render_test_views(&model, &data)?;
    fsio::publish_dir(&a.out, is_render_dir, |dir| {
        images.iter().enumerate().try_for_each(|(i, img)| img.save_png(&dir.join(test_name(i))))
    })?;
    println!("{} views written to {}", images.len(), a.out.display());
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> CliResult<()> {
    let (model, data) = load_model(&a.model)?;
    let renders = render_test_views(&model, &data)?;
    let report = match &a.against {
        Some(dir) => {
            let refs = (0..renders.len())
                .map(|i| Image::load_png(&dir.join(test_name(i))))
                .collect::<smurf_core::Result<Vec<_>>>()?;
            let quantized: Vec<Image> = renders.iter().map(Image::quantized).collect();
            EvalReport::from_pairs(&quantized, &refs)?
        }
        None => EvalReport::from_pairs(&renders, &data.test)?,
    };
    match &a.csv {
        Some(Some(path)) => {
            let mut buf = Vec::new();
            report.write_csv(&mut buf)?;
            fsio::write_atomic(path, &buf)?;
        }
        Some(None) => report.write_csv(std::io::stdout().lock())?,
        None => {}
    }
    if !matches!(a.csv, Some(None)) {
        println!("{:<8} {:>8} {:>8}", "view", "psnr", "ssim");
        for r in &report.rows {
            println!("{:<8} {:>8.3} {:>8.4}", r.view, r.psnr, r.ssim);
        }
        println!("{:<8} {:>8.3} {:>8.4}", "mean", report.mean_psnr, report.mean_ssim);
    }
    Ok(())
}

fn inspect_cmd(a: InspectArgs) -> CliResult<()> {
    let (model, data) = load_model(&a.model)?;
    let pixel = [a.pixel[0], a.pixel[1]];
    if a.view >= data.manifest.views.len() {
        return Err(CliError::Usage(format!("view {} out of range", a.view)));
    }
    let cams = Arc::new(data.manifest.cameras());
    let rows = model
        .cmbk
        .trace(&model.store, a.view, pixel, &cams)
        .map_err(|e| CliError::Usage(e.to_string()))?;
    match &a.out {
        Some(path) => {
            let mut buf = Vec::new();
            smurf_core::cmbk::write_trace_csv(&rows, &mut buf)?;
            fsio::write_atomic(path, &buf)?;
        }
        None => {
            let mut out = std::io::stdout().lock();
            smurf_core::cmbk::write_trace_csv(&rows, &mut out)?;
            out.flush().map_err(|e| io_err(Path::new("stdout"), e))?;
        }
    }
    let path: Vec<[f64; 2]> = rows.iter().map(|r| [r.p_x, r.p_y]).collect();
    eprintln!(
        "view {} pixel ({}, {}): path length {:.4} px, chord deviation {:.4} px",
        a.view,
        pixel[0],
        pixel[1],
        scenegen::path_length(&path),
        scenegen::chord_deviation(&path)
    );
    if let Some(png) = &a.overlay {
        overlay(&data.blur[a.view], &path, 8).save_png(png)?;
    }
    Ok(())
}

/// Upscale `img` by `zoom` and mark the path: green start, red thereafter.
fn overlay(img: &Image, path: &[[f64; 2]], zoom: usize) -> Image {
    let (w, h) = (img.width * zoom, img.height * zoom);
    let mut out = Image::filled(w, h, [0.0; 3]);
    for y in 0..h {
        for x in 0..w {
            out.set_pixel(x, y, img.pixel(x / zoom, y / zoom));
        }
    }
    for (i, p) in path.iter().enumerate() {
        let color = if i == 0 { [0.0, 1.0, 0.0] } else { [1.0, 0.0, 0.0] };
        let (cx, cy) = (p[0] * zoom as f64, p[1] * zoom as f64);
        for dy in -1i64..=1 {
            for dx in -1i64..=1 {
                let (x, y) = (cx.floor() as i64 + dx, cy.floor() as i64 + dy);
                if x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h {
                    out.set_pixel(x as usize, y as usize, color);
                }
            }
        }
    }
    out
}
