mod config;
mod exit;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};

use dksan::autodiff::gradcheck::{self, GradcheckConfig};
use dksan::data::{
    self, frame_name, list_frames, load_ppm, load_video_dir, manifest_windows, parse_manifest, replicate_index, save_ppm,
    synth_video, synth_videos, Dataset, SynthPattern, SynthSpec,
};
use dksan::loss_metrics::{psnr_with, PsnrMode};
use dksan::network::{pack_frames, Checkpoint};
use dksan::nn_ops::bicubic_upscale;
use dksan::training::{train, RunFiles, Trainer};
use dksan::Tensor;

use config::RunConfig;
use exit::{Fail, Outcome, ResultExt};

/// Deformable-kernel video super-resolution.
#[derive(Parser, Debug)]
#[command(name = "dksan", version, about, max_term_width = 100)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a network and write the log, checkpoints and resumable state
    Train(TrainArgs),
    /// Super-resolve a directory of LR frames
    Infer(InferArgs),
    /// PSNR of predicted frames against ground truth
    Eval(EvalArgs),
    /// Compare analytic gradients with central differences
    Gradcheck(GradcheckArgs),
    /// Write a synthetic clip as HR and LR frame directories
    Synth(SynthArgs),
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Starting configuration
    #[arg(long, default_value = "desk", value_parser = ["desk", "paper"])]
    preset: String,
    /// key=value config file applied on top of the preset
    #[arg(long)]
    config: Option<PathBuf>,
    /// `synth:<pattern>[+<pattern>...]` or a directory of HR clip directories
    #[arg(long, default_value = "synth:checker+blobs")]
    data: String,
    /// Held-out clips for validation; synthetic data uses a separate seed by default
    #[arg(long)]
    val: Option<String>,
    /// Training windows as `video_id start_frame` lines (directory data only)
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Output directory
    #[arg(long, default_value = "runs/dksan")]
    out: PathBuf,
    /// Initialization and sampling seed [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Adam steps [default: 2000 for desk, 115000 for paper]
    #[arg(long)]
    steps: Option<u64>,
    /// Total upscaling factor; sets the number of x2 levels [default: 4 for desk, 16 for paper]
    #[arg(long)]
    scale: Option<usize>,
    /// Continue from state.dkst in the output directory
    #[arg(long)]
    resume: bool,
    /// Print the resolved configuration and exit
    #[arg(long)]
    print_config: bool,
    /// Overrides such as `channels=32` or `lr=1e-4`; later ones win
    #[arg(value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args, Debug)]
struct InferArgs {
    /// Trained checkpoint (.dksn)
    #[arg(long, required_unless_present = "bicubic")]
    checkpoint: Option<PathBuf>,
    /// Directory of LR frame_*.ppm files
    #[arg(long)]
    data: PathBuf,
    /// Output directory for the SR frames
    #[arg(long)]
    out: PathBuf,
    /// Upscaling factor for --bicubic
    #[arg(long, default_value_t = 4)]
    scale: usize,
    /// Write plain bicubic upscales instead of running a network
    #[arg(long)]
    bicubic: bool,
    /// Accepted for a uniform interface; inference is deterministic
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Predicted frames
    #[arg(long)]
    pred: PathBuf,
    /// Ground-truth frames with matching file names
    #[arg(long)]
    gt: PathBuf,
    /// Also write the table as CSV
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long, default_value = "rgb", value_parser = ["rgb", "luma"])]
    mode: String,
    /// Accepted for a uniform interface; evaluation is deterministic
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// Check every registered op
    #[arg(long, conflicts_with = "op")]
    all: bool,
    /// A single op from the registry
    #[arg(required_unless_present = "all")]
    op: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Elements checked per tensor
    #[arg(long, default_value_t = 8)]
    samples: usize,
    /// Central-difference step
    #[arg(long, default_value_t = 1e-3)]
    eps: f64,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, default_value = "checker", value_parser = ["gradient", "checker", "blobs"])]
    pattern: String,
    /// Output root; frames go to <out>/hr/<clip> and <out>/lr/<clip>
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 5)]
    frames: usize,
    /// LR frame height and width
    #[arg(long, default_value_t = 32)]
    size: usize,
    #[arg(long, default_value_t = 4)]
    scale: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Per-frame LR translation as dy,dx
    #[arg(long, default_value = "0.5,0.75")]
    motion: String,
    /// Gaussian noise sigma added to the LR frames
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = init_threads().and_then(|()| match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Infer(a) => cmd_infer(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Synth(a) => cmd_synth(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn init_threads() -> Outcome<()> {
    let Ok(v) = std::env::var("DKSAN_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Fail::config(anyhow!("DKSAN_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Fail::config(anyhow!(e)))
}

fn parse_patterns(list: &str) -> Outcome<Vec<SynthPattern>> {
    list.split('+').map(|p| p.parse::<SynthPattern>().or_config()).collect()
}

/// Synthetic sets: 16 training clips of 5 frames at 32x32 LR.
fn synth_set(patterns: &[SynthPattern], count: usize, frames: usize, scale: usize, seed: u64) -> Outcome<Vec<data::Video>> {
    synth_videos(patterns, count, frames.max(5), 32, scale, 1.5, seed).or_data()
}

fn load_sets(a: &TrainArgs, rc: &RunConfig) -> Outcome<(Dataset, Dataset)> {
    let frames = rc.net.frames;
    let scale = rc.net.scale();
    let seed = rc.train.seed;
    let train_set = if let Some(list) = a.data.strip_prefix("synth:") {
        if a.manifest.is_some() {
            return Err(Fail::config(anyhow!("--manifest needs directory data")));
        }
        Dataset::new(synth_set(&parse_patterns(list)?, 16, frames, scale, seed)?, frames).or_data()?
    } else {
        let videos = load_video_dir(Path::new(&a.data), scale).or_data()?;
        match &a.manifest {
            Some(m) => {
                let text = std::fs::read_to_string(m).with_context(|| m.display().to_string()).or_data()?;
                let windows = manifest_windows(&videos, &parse_manifest(&text).or_data()?, frames).or_data()?;
                Dataset::with_windows(videos, windows, frames).or_data()?
            }
            None => Dataset::new(videos, frames).or_data()?,
        }
    };
    let val_spec = a.val.clone().unwrap_or_else(|| a.data.clone());
    let val = if let Some(list) = val_spec.strip_prefix("synth:") {
        // held-out clips: a different synthesis seed
        let videos = synth_videos(&parse_patterns(list)?, 4, frames, 24, scale, 1.5, seed ^ 0x7661_6c00).or_data()?;
        Dataset::new(videos, frames).or_data()?
    } else {
        Dataset::new(load_video_dir(Path::new(&val_spec), scale).or_data()?, frames).or_data()?
    };
    Ok((train_set, val))
}

fn cmd_train(a: TrainArgs) -> Outcome<()> {
    let mut rc = RunConfig::preset(&a.preset).or_config()?;
    if let Some(path) = &a.config {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))
            .or_config()?;
        rc.apply_text(&text).or_config()?;
    }
    if let Some(s) = a.seed {
        rc.train.seed = s;
    }
    if let Some(s) = a.steps {
        rc.train.steps = s;
    }
    if let Some(s) = a.scale {
        rc.set_scale(s).or_config()?;
    }
    for kv in &a.overrides {
        rc.apply_override(kv).or_config()?;
    }
    rc.validate().or_config()?;
    print!("{rc}");
    if a.print_config {
        return Ok(());
    }

    let files = RunFiles::new(&a.out).or_data()?;
    let mut trainer = if a.resume {
        let mut t = Trainer::load_state(files.state()).or_data()?;
        if t.net.cfg != rc.net {
            return Err(Fail::config(anyhow!("saved state was trained with a different network config")));
        }
        t.cfg.steps = rc.train.steps;
        println!("resuming at step {}", t.step);
        t
    } else {
        Trainer::new(&rc.train, &rc.net).or_config()?
    };
    let (train_set, val) = load_sets(&a, &rc)?;
    println!(
        "{} parameters, {} training windows, {} validation windows",
        trainer.store.num_scalars(),
        train_set.len(),
        val.len()
    );
    let baseline = data::bicubic_baseline(&val).or_data()?;
    println!("bicubic validation PSNR {baseline:.3} dB");
    let report = train(&mut trainer, &train_set, &val, Some(&files), |row| {
        if let Some(p) = row.psnr_val {
            println!(
                "step {:>6}  loss {:.5}  val {:.3} dB  lr {:.2e}  {:.1}s",
                row.step, row.loss, p, row.lr, row.seconds
            );
        }
    })
    .map_err(Fail::from_core)?;
    println!(
        "final {:.3} dB, best {:.3} dB ({:+.3} dB over bicubic); outputs in {}",
        report.final_psnr,
        report.best_psnr,
        report.best_psnr - baseline,
        a.out.display()
    );
    Ok(())
}

fn cmd_infer(a: InferArgs) -> Outcome<()> {
    let model = match &a.checkpoint {
        Some(path) if !a.bicubic => Some(Checkpoint::load(path).or_data()?.restore().or_data()?),
        _ => None,
    };
    let paths = list_frames(&a.data).with_context(|| a.data.display().to_string()).or_data()?;
    if paths.is_empty() {
        return Err(Fail::data(anyhow!("no frame_*.ppm files in {}", a.data.display())));
    }
    let frames: Vec<Tensor<f32>> = paths
        .iter()
        .map(|p| load_ppm(p).with_context(|| p.display().to_string()).or_data())
        .collect::<Outcome<_>>()?;
    std::fs::create_dir_all(&a.out).or_data()?;
    let mut total = 0.0;
    for (t, path) in paths.iter().enumerate() {
        let start = Instant::now();
        let sr = match &model {
            Some((net, store)) => {
                let n = net.cfg.frames;
                let half = (n / 2) as isize;
                let window: Vec<Tensor<f32>> = (-half..=half)
                    .map(|d| frames[replicate_index(t, d, frames.len())].clone())
                    .collect();
                let packed = pack_frames(&window).or_data()?;
                net.infer(store, &packed).map_err(Fail::from_core)?
            }
            None => bicubic_upscale(&frames[t], a.scale).or_config()?.map(|v| v.clamp(0.0, 1.0)),
        };
        let secs = start.elapsed().as_secs_f64();
        total += secs;
        let name = path.file_name().expect("listed files have names");
        save_ppm(a.out.join(name), &sr).or_data()?;
        let [_, _, h, w] = sr.shape();
        println!("{}  {w}x{h}  {secs:.3} s/f", name.to_string_lossy());
    }
    println!("{} frames, mean {:.3} s/f", paths.len(), total / paths.len() as f64);
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Outcome<()> {
    let mode: PsnrMode = a.mode.parse().or_config()?;
    let gt = list_frames(&a.gt).with_context(|| a.gt.display().to_string()).or_data()?;
    if gt.is_empty() {
        return Err(Fail::data(anyhow!("no frame_*.ppm files in {}", a.gt.display())));
    }
    let mut rows = Vec::new();
    let mut missing = Vec::new();
    for g in &gt {
        let name = g.file_name().expect("listed files have names").to_string_lossy().into_owned();
        let p = a.pred.join(&name);
        if !p.exists() {
            missing.push(name);
            continue;
        }
        let pred = load_ppm(&p).with_context(|| p.display().to_string()).or_data()?;
        let truth = load_ppm(g).with_context(|| g.display().to_string()).or_data()?;
        let v = psnr_with(&pred, &truth, 1.0, mode).with_context(|| name.clone()).or_data()?;
        rows.push((name, v));
    }
    let width = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max("Average".len());
    println!("{:<width$}  {:>9}", "frame", "PSNR(dB)");
    for (n, v) in &rows {
        println!("{n:<width$}  {v:>9.3}");
    }
    let avg = if rows.is_empty() {
        f64::NAN
    } else {
        rows.iter().map(|(_, v)| v).sum::<f64>() / rows.len() as f64
    };
    println!("{:<width$}  {avg:>9.3}", "Average");
    if let Some(path) = &a.csv {
        let mut csv = String::from("frame,psnr\n");
        for (n, v) in &rows {
            csv.push_str(&format!("{n},{v:.6}\n"));
        }
        csv.push_str(&format!("Average,{avg:.6}\n"));
        std::fs::write(path, csv).with_context(|| path.display().to_string()).or_data()?;
    }
    if !missing.is_empty() {
        return Err(Fail::data(anyhow!(
            "{} ground-truth frames have no prediction: {}",
            missing.len(),
            missing.join(", ")
        )));
    }
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs) -> Outcome<()> {
    let cfg = GradcheckConfig {
        eps: a.eps,
        samples_per_tensor: a.samples,
        seed: a.seed,
        ..GradcheckConfig::default()
    };
    let name = if a.all { None } else { a.op.as_deref() };
    let reports = gradcheck::run(name, &cfg).or_config()?;
    print!("{}", gradcheck::format_report(&reports));
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed).map(|r| r.name).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Fail::numeric(anyhow!("gradient check failed for {}", failed.join(", "))))
    }
}

fn cmd_synth(a: SynthArgs) -> Outcome<()> {
    let pattern: SynthPattern = a.pattern.parse().or_config()?;
    let (dy, dx) = a
        .motion
        .split_once(',')
        .and_then(|(y, x)| Some((y.trim().parse().ok()?, x.trim().parse().ok()?)))
        .ok_or_else(|| Fail::config(anyhow!("--motion expects dy,dx, got {:?}", a.motion)))?;
    let spec = SynthSpec {
        motion: (dy, dx),
        noise_sigma: a.noise,
        frames: a.frames,
        lr_height: a.size,
        lr_width: a.size,
        ..SynthSpec::new(pattern, a.seed)
    };
    let video = synth_video(&spec, a.scale).or_config()?;
    let clip = format!("{}_{}", pattern.name(), a.seed);
    let hr_dir = a.out.join("hr").join(&clip);
    let lr_dir = a.out.join("lr").join(&clip);
    std::fs::create_dir_all(&hr_dir).or_data()?;
    std::fs::create_dir_all(&lr_dir).or_data()?;
    for (t, (hr, lr)) in video.hr.iter().zip(&video.lr).enumerate() {
        save_ppm(hr_dir.join(frame_name(t)), hr).or_data()?;
        save_ppm(lr_dir.join(frame_name(t)), lr).or_data()?;
    }
    println!("{} frames -> {} and {}", video.len(), hr_dir.display(), lr_dir.display());
    Ok(())
}
