//! `osvi`: dataset synthesis, training, inference, evaluation and
//! self-verification for one-shot video inpainting.

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::parser::ValueSource;
use clap::{ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand};

use osvi::checkpoint;
use osvi::config::TrainConfig;
use osvi::data::dataset::{read_frames, read_snippet, write_frames, write_masks, Manifest};
use osvi::data::pnm::read_pgm_mask;
use osvi::data::{read_dataset, write_dataset, Profile, SynthConfig};
use osvi::metrics::{evaluate_clip, MetricReport};
use osvi::model::infer;
use osvi::train::{self, Trainer};
use osvi::verify;
use osvi::{Error, Tensor};

#[derive(Parser)]
#[command(name = "osvi", version, about = "One-shot video inpainting on synthetic clips")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a dataset of input/mask/clean snippets.
    Synth(SynthArgs),
    /// Train generator and discriminator on a dataset.
    Train(TrainArgs),
    /// Predict masks and completed frames.
    Infer(InferArgs),
    /// Score predictions against a dataset.
    Eval(EvalArgs),
    /// Run the self-verification suites.
    Verify(VerifyArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Number of snippets.
    #[arg(long, default_value_t = 16)]
    n: usize,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Difficulty profile (toy-A or toy-B).
    #[arg(long, default_value = "toy-A")]
    profile: Profile,
    /// Seed of the first snippet; later snippets use the following seeds.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 7)]
    frames: usize,
    #[arg(long, default_value_t = 48)]
    height: usize,
    #[arg(long, default_value_t = 80)]
    width: usize,
}

/// Field names match the configuration keys so explicit flags can be
/// layered over a config file.
#[derive(Args)]
struct TrainArgs {
    /// Dataset directory holding a manifest.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for train.log and checkpoint.osvc.
    #[arg(long)]
    out: PathBuf,
    /// `key = value` config file; explicit flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Continue from a checkpoint; only --iterations and --checkpoint-every may change.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    batch: usize,
    #[arg(long, default_value_t = 1000)]
    iterations: u64,
    /// Adam learning rate.
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    checkpoint_every: u64,
    /// Token width C_T.
    #[arg(long, default_value_t = 32)]
    dim: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    /// Transformer blocks L.
    #[arg(long, default_value_t = 4)]
    blocks: usize,
    #[arg(long, default_value_t = 64)]
    mlp_hidden: usize,
    /// key-side or paper-literal.
    #[arg(long, default_value = "key-side")]
    masking: String,
    /// Store every n-th frame in the mask memory.
    #[arg(long, default_value_t = 5)]
    memory_every: usize,
    /// Drop the mask loss [default: off].
    #[arg(long)]
    no_mask_loss: bool,
    /// Plain attention in temporal blocks [default: off].
    #[arg(long)]
    no_mask_guidance: bool,
    /// Guided full attention in spatial blocks [default: off].
    #[arg(long)]
    stb_masked: bool,
    /// Stop completion gradients at the predicted masks [default: off].
    #[arg(long)]
    detach_masks: bool,
    /// Separate encoder for completion [default: off].
    #[arg(long)]
    separate_encoders: bool,
    /// Drop the adversarial loss and discriminator [default: off].
    #[arg(long)]
    no_gan: bool,
}

#[derive(Args)]
struct InferArgs {
    /// Trained checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Directory of frame_*.ppm files of one clip.
    #[arg(long, conflicts_with = "data")]
    video: Option<PathBuf>,
    /// Frame-0 object mask (PGM) for --video.
    #[arg(long, requires = "video")]
    mask0: Option<PathBuf>,
    /// Dataset directory; predicts every snippet into <out>/<id>/.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Keep input pixels where the predicted mask is below 0.5 [default: off].
    #[arg(long)]
    composite: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Predictions laid out as <pred>/<id>/{frames,masks}.
    #[arg(long)]
    pred: PathBuf,
    /// Dataset directory holding a manifest.
    #[arg(long)]
    data: PathBuf,
    /// Report path [default: <pred>/eval.tsv].
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    /// Run one suite only (grad, leakage, structure, loss, metrics) [default: all].
    #[arg(long)]
    suite: Option<String>,
}

/// Failure mapped to the process exit code.
enum Failure {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::Contract(_) => Failure::Usage(msg),
            Error::NonFinite { .. } | Error::Evaluation(_) => Failure::Numeric(msg),
            _ => Failure::Data(msg),
        }
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    let matches = match Cli::command().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    let sub = matches.subcommand().map(|(_, m)| m).expect("subcommand is required");
    let outcome = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train_cmd(a, sub),
        Command::Infer(a) => infer_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Verify(a) => verify_cmd(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Data(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Numeric(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(3)
        }
    }
}

fn synth(a: SynthArgs) -> Outcome {
    let cfg = SynthConfig {
        frames: a.frames,
        height: a.height,
        width: a.width,
        profile: a.profile,
    };
    let m = write_dataset(a.n, &a.out, &cfg, a.seed)?;
    println!("wrote {} snippets to {}", m.entries.len(), a.out.display());
    Ok(())
}

/// Config keys given explicitly on the command line, with their values.
fn explicit_keys(m: &ArgMatches) -> Vec<(&'static str, String)> {
    TrainConfig::KEYS
        .iter()
        .filter(|k| m.value_source(k) == Some(ValueSource::CommandLine))
        .map(|&k| {
            let v = if m.try_get_one::<bool>(k).ok().flatten().is_some() {
                "true".to_string()
            } else {
                m.get_raw(k)
                    .and_then(|mut v| v.next())
                    .map(|v| v.to_string_lossy().into_owned())
                    .unwrap_or_default()
            };
            (k, v)
        })
        .collect()
}

fn train_cmd(a: TrainArgs, m: &ArgMatches) -> Outcome {
    let explicit = explicit_keys(m);
    let mut trainer = match &a.resume {
        Some(path) => {
            if a.config.is_some() {
                return Err(Failure::Usage("--config cannot be combined with --resume".into()));
            }
            let mut t = checkpoint::load(path)?;
            for (k, v) in &explicit {
                if !matches!(*k, "iterations" | "checkpoint_every") {
                    return Err(Failure::Usage(format!(
                        "--{} cannot change when resuming",
                        k.replace('_', "-")
                    )));
                }
                t.config.set(k, v)?;
            }
            t
        }
        None => {
            let mut cfg = TrainConfig::default();
            if let Some(path) = &a.config {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
                cfg.apply_text(&text)?;
            }
            for (k, v) in &explicit {
                cfg.set(k, v)?;
            }
            cfg.validate()?;
            Trainer::new(cfg)?
        }
    };
    let (_, data) = read_dataset(&a.data)?;
    if data.is_empty() {
        return Err(Failure::Data(format!("{}: dataset has no snippets", a.data.display())));
    }
    std::fs::create_dir_all(&a.out).map_err(|e| Failure::Data(format!("{}: {e}", a.out.display())))?;
    std::fs::write(a.out.join("config.txt"), trainer.config.to_text())
        .map_err(|e| Failure::Data(format!("{}: {e}", a.out.display())))?;
    let mut stdout = std::io::stdout().lock();
    train::run(&mut trainer, &data, &a.out, &mut stdout)?;
    eprintln!(
        "trained to step {}; checkpoint at {}",
        trainer.step,
        a.out.join(train::CHECKPOINT_FILE).display()
    );
    Ok(())
}

fn write_prediction(dir: &Path, frames: &Tensor<f32>, masks: &Tensor<f32>) -> Outcome {
    write_frames(&dir.join("frames"), frames)?;
    write_masks(&dir.join("masks"), masks)?;
    Ok(())
}

fn infer_cmd(a: InferArgs) -> Outcome {
    let trainer = checkpoint::load(&a.checkpoint)?;
    let (gen, params) = (&trainer.generator, &trainer.gen_params);
    match (&a.video, &a.data) {
        (Some(video), None) => {
            let mask0 = a
                .mask0
                .as_ref()
                .ok_or_else(|| Failure::Usage("--video needs --mask0, the frame-0 object mask".into()))?;
            let clip = read_frames(video)?;
            let m0 = read_pgm_mask(mask0)?;
            let out = infer(gen, params, &clip, &m0, a.composite)?;
            println!("memory frames {:?}", out.memory_frames);
            write_prediction(&a.out, &out.frames, &out.masks)?;
            println!("wrote {} frames to {}", clip.shape()[0], a.out.display());
        }
        (None, Some(data)) => {
            let manifest = Manifest::read(data)?;
            for e in &manifest.entries {
                let s = read_snippet(&data.join(&e.dir), &e.id, e.seed)?;
                let out = infer(gen, params, &s.input, &s.first_mask(), a.composite)?;
                println!("{}: memory frames {:?}", e.id, out.memory_frames);
                write_prediction(&a.out.join(&e.id), &out.frames, &out.masks)?;
            }
        }
        _ => return Err(Failure::Usage("give either --video with --mask0, or --data".into())),
    }
    Ok(())
}

fn eval_threads() -> usize {
    let cap = std::env::var("OSVI_THREADS").ok().and_then(|v| v.parse::<usize>().ok());
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    cap.unwrap_or(cores).max(1)
}

fn score(pred: &Path, data: &Path, e: &osvi::data::ManifestEntry) -> Result<MetricReport, String> {
    let dir = pred.join(&e.id);
    if !dir.is_dir() {
        return Err(format!("no prediction for {}", e.id));
    }
    let s = read_snippet(&data.join(&e.dir), &e.id, e.seed).map_err(|x| x.to_string())?;
    let frames = read_frames(&dir.join("frames")).map_err(|x| x.to_string())?;
    let masks = osvi::data::dataset::read_masks(&dir.join("masks")).map_err(|x| x.to_string())?;
    evaluate_clip(&frames, &s.clean, &masks, &s.masks).map_err(|x| format!("{}: {x}", e.id))
}

fn eval_cmd(a: EvalArgs) -> Outcome {
    let manifest = Manifest::read(&a.data)?;
    let entries = &manifest.entries;
    let threads = eval_threads().min(entries.len().max(1));
    let mut results: Vec<Option<Result<MetricReport, String>>> = (0..entries.len()).map(|_| None).collect();
    let chunk = entries.len().div_ceil(threads).max(1);
    std::thread::scope(|scope| {
        for (slots, es) in results.chunks_mut(chunk).zip(entries.chunks(chunk)) {
            let (pred, data) = (&a.pred, &a.data);
            scope.spawn(move || {
                for (slot, e) in slots.iter_mut().zip(es) {
                    *slot = Some(score(pred, data, e));
                }
            });
        }
    });
    let mut tsv = String::from("snippet\tpsnr\tssim\tiou\trecall\n");
    let mut scored = Vec::new();
    for (e, r) in entries.iter().zip(results) {
        match r.expect("every slot is filled") {
            Ok(m) => {
                tsv.push_str(&row(&e.id, &m));
                scored.push(m);
            }
            Err(msg) => eprintln!("warning: skipping {}: {msg}", e.id),
        }
    }
    if scored.is_empty() {
        return Err(Failure::Data("no snippet could be evaluated".into()));
    }
    tsv.push_str(&row("MEAN", &MetricReport::mean(&scored)));
    let out = a.out.unwrap_or_else(|| a.pred.join("eval.tsv"));
    std::fs::write(&out, &tsv).map_err(|e| Failure::Data(format!("{}: {e}", out.display())))?;
    print!("{tsv}");
    Ok(())
}

fn row(id: &str, m: &MetricReport) -> String {
    format!("{id}\t{:.4}\t{:.6}\t{:.6}\t{:.6}\n", m.psnr, m.ssim, m.iou, m.recall)
}

fn verify_cmd(a: VerifyArgs) -> Outcome {
    let suites: Vec<&str> = match &a.suite {
        Some(s) => vec![s.as_str()],
        None => verify::SUITES.to_vec(),
    };
    let start = Instant::now();
    let mut failed = Vec::new();
    let mut out = std::io::stdout().lock();
    for name in suites {
        let report = verify::run_suite(name)?;
        let status = if report.passed() { "PASS" } else { "FAIL" };
        let _ = writeln!(out, "{status}  {:<10} {:>7.2} s", report.suite, report.seconds);
        for c in &report.checks {
            let _ = writeln!(out, "      {} {}: {}", if c.passed { "ok  " } else { "FAIL" }, c.name, c.detail);
        }
        if !report.passed() {
            failed.push(report.suite);
        }
    }
    let _ = writeln!(out, "total {:.2} s", start.elapsed().as_secs_f64());
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Numeric(format!("failed suites: {}", failed.join(", "))))
    }
}
