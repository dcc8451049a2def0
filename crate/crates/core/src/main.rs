use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use densecap::autograd::gradcheck::primitive_suite;
use densecap::data::checkpoint::Checkpoint;
use densecap::data::config::Config;
use densecap::data::features::{load_dataset, load_features, write_dataset};
use densecap::data::synthetic::{generate_dataset, SyntheticSpec};
use densecap::inference::{caption_segments, dense_caption};
use densecap::pipeline::{evaluate, model_gradcheck, new_trainer, ranked_proposals, train_until};
use densecap::{Error, Result};

#[derive(Parser)]
#[command(
    name = "densecap",
    version,
    about = "Dense event captioning with a masked transformer"
)]
#[command(arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset of feature files.
    Generate(GenerateArgs),
    /// Train a model and write checkpoints and a per-step log.
    Train(TrainArgs),
    /// Localization and dense captioning metrics of a checkpoint.
    Eval(EvalArgs),
    /// Ranked event proposals for one video.
    Propose(ProposeArgs),
    /// Dense captions for one video.
    Caption(CaptionArgs),
    /// Finite-difference checks of every primitive and of the full loss.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 10)]
    videos: usize,
    #[arg(long, default_value_t = 64)]
    window: usize,
    #[arg(long, default_value_t = 16)]
    d_in: usize,
    #[arg(long, default_value_t = 1)]
    min_events: usize,
    #[arg(long, default_value_t = 3)]
    max_events: usize,
    #[arg(long, default_value_t = 8)]
    min_event_len: usize,
    #[arg(long, default_value_t = 24)]
    max_event_len: usize,
    #[arg(long, default_value_t = 4)]
    patterns: usize,
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    /// Hyperparameter file; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory of feature files.
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint written during and after training.
    #[arg(long)]
    out: PathBuf,
    /// Continue from this checkpoint instead of a fresh model.
    #[arg(long, conflicts_with = "config")]
    resume: Option<PathBuf>,
    /// Total step count, overriding the config.
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 0)]
    checkpoint_every: u64,
    /// Step log destination; stdout when absent.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Proposals per video for recall.
    #[arg(long, default_value_t = 10)]
    proposals: usize,
    /// Report destination; stdout when absent.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Recall-versus-proposals curve as CSV.
    #[arg(long)]
    curve: Option<PathBuf>,
}

#[derive(Args)]
struct ProposeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    video: PathBuf,
    #[arg(long, default_value_t = 10)]
    top: usize,
}

#[derive(Args)]
struct CaptionArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    video: PathBuf,
    /// Caption the annotated segments of the video instead of proposals.
    #[arg(long)]
    gt_segments: bool,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Parameter entries sampled for the full-loss check.
    #[arg(long, default_value_t = 120)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn generate(a: GenerateArgs) -> Result<()> {
    let spec = SyntheticSpec {
        videos: a.videos,
        window: a.window,
        d_in: a.d_in,
        min_events: a.min_events,
        max_events: a.max_events,
        min_event_len: a.min_event_len,
        max_event_len: a.max_event_len,
        patterns: a.patterns,
        noise: a.noise,
        seed: a.seed,
    };
    let videos = generate_dataset(&spec)?;
    let paths = write_dataset(&a.out, &videos)?;
    println!("wrote {} videos to {}", paths.len(), a.out.display());
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let videos = load_dataset(&a.data)?;
    let (mut trainer, config) = match &a.resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            let config = ckpt.config.clone();
            if a.seed.is_some_and(|s| s != config.train.seed) {
                return Err(Error::Config("--seed differs from the checkpoint seed".into()));
            }
            (ckpt.into_trainer(&videos)?, config)
        }
        None => {
            let mut config = match &a.config {
                Some(p) => Config::load(p)?,
                None => Config::default(),
            };
            if let Some(s) = a.seed {
                config.train.seed = s;
            }
            (new_trainer(&config, &videos)?, config)
        }
    };
    let until = a.steps.unwrap_or(config.train.steps);
    info!(
        "training from step {} to {until} on {} videos",
        trainer.step,
        videos.len()
    );

    let mut log = output(a.log.as_deref())?;
    let mut io_err = None;
    let every = a.checkpoint_every;
    let mut saved = false;
    while trainer.step < until {
        let next = trainer.step.checked_div(every).map_or(until, |q| (q + 1) * every);
        train_until(&mut trainer, next.min(until), |l| {
            if let Err(e) = writeln!(log, "{l}") {
                io_err.get_or_insert(e);
            }
        })?;
        if let Some(e) = io_err.take() {
            return Err(e.into());
        }
        Checkpoint::from_trainer(&trainer, &config).save(&a.out)?;
        saved = true;
    }
    log.flush()?;
    if !saved {
        Checkpoint::from_trainer(&trainer, &config).save(&a.out)?;
    }
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let model = ckpt.model()?;
    let videos = load_dataset(&a.data)?;
    let report = evaluate(&model, &ckpt.vocab, &ckpt.config, &videos, a.proposals)?;
    let mut out = output(a.report.as_deref())?;
    write!(out, "{report}")?;
    out.flush()?;
    if let Some(p) = &a.curve {
        std::fs::write(p, report.curve_csv())?;
    }
    Ok(())
}

fn propose(a: ProposeArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let model = ckpt.model()?;
    let video = load_features(&a.video)?;
    let all = model.propose(&video.frames)?;
    let kept = ranked_proposals(&model, &video.frames, ckpt.config.inference.overlap_cap, a.top)?;
    let mut out = output(None)?;
    for s in kept {
        let score = all
            .iter()
            .find(|p| p.start == s.start && p.end == s.end)
            .map_or(f64::NAN, |p| p.score);
        writeln!(out, "{:.4}\t{:.4}\t{score:.6}", s.start, s.end)?;
    }
    out.flush()?;
    Ok(())
}

fn caption(a: CaptionArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let model = ckpt.model()?;
    let video = load_features(&a.video)?;
    let mut out = output(None)?;
    if a.gt_segments {
        let segments = video.segments();
        if segments.is_empty() {
            return Err(Error::Validation("video has no annotated segments".into()));
        }
        for (s, seq) in segments
            .iter()
            .zip(caption_segments(&model, &video.frames, &segments)?)
        {
            writeln!(
                out,
                "{:.4}\t{:.4}\t{}",
                s.start,
                s.end,
                ckpt.vocab.decode(&seq).join(" ")
            )?;
        }
    } else {
        for (p, seq) in dense_caption(&model, &video.frames, &ckpt.config.inference)?.events {
            writeln!(
                out,
                "{:.4}\t{:.4}\t{:.6}\t{}",
                p.start,
                p.end,
                p.score,
                ckpt.vocab.decode(&seq).join(" ")
            )?;
        }
    }
    out.flush()?;
    Ok(())
}

const PRIMITIVE_TOL: f64 = 1e-4;
const MODEL_TOL: f64 = 1e-3;

fn gradcheck(a: GradcheckArgs) -> Result<bool> {
    let config = match &a.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    let mut ok = true;
    for (name, r) in primitive_suite(a.seed)? {
        let pass = r.passes(PRIMITIVE_TOL);
        ok &= pass;
        println!(
            "{} {name}: {} entries, max rel err {:.3e}",
            if pass { "ok  " } else { "FAIL" },
            r.checked,
            r.max_rel_err
        );
    }
    let r = model_gradcheck(&config, a.samples, a.seed)?;
    let pass = r.passes(MODEL_TOL);
    ok &= pass;
    println!(
        "{} full loss: {} entries, max rel err {:.3e}",
        if pass { "ok  " } else { "FAIL" },
        r.checked,
        r.max_rel_err
    );
    Ok(ok)
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Generate(a) => generate(a)?,
        Command::Train(a) => train(a)?,
        Command::Eval(a) => eval(a)?,
        Command::Propose(a) => propose(a)?,
        Command::Caption(a) => caption(a)?,
        Command::Gradcheck(a) => return gradcheck(a),
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
