use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::Args;
use converse_core::checkpoint::{self, Manifest};
use converse_core::config::RunConfig;
use converse_core::training::{train, Learner, Mode, TrainOutcome};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::{setup, Common};

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// `sapient` or `sapient-e`.
    #[arg(long)]
    pub mode: Option<Mode>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Planner rollouts per user (N).
    #[arg(long)]
    pub rollouts: Option<usize>,
    /// UCT exploration weight (w).
    #[arg(long)]
    pub exploration: Option<f64>,
    /// Catalog file, overriding the config.
    #[arg(long)]
    pub catalog: Option<PathBuf>,
    /// Continue from this checkpoint and its step counter.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Serialize)]
struct Timing {
    step: usize,
    seconds: f64,
    elapsed: f64,
}

/// Applies the train flags on top of a resolved config.
pub fn configure(mut cfg: RunConfig, args: &TrainArgs) -> Result<RunConfig> {
    if let Some(m) = args.mode {
        cfg.train.mode = m;
    }
    if let Some(s) = args.steps {
        cfg.train.steps = s;
    }
    if let Some(n) = args.rollouts {
        cfg.planner.n = n;
    }
    if let Some(w) = args.exploration {
        cfg.planner.w = w;
    }
    cfg.validate()?;
    if cfg.train.steps == 0 {
        bail!("train.steps must be at least 1");
    }
    Ok(cfg)
}

pub fn run(common: &Common, args: TrainArgs) -> Result<()> {
    let cfg = configure(setup::resolve(common)?, &args)?;
    let split = setup::split(&cfg, args.catalog.as_deref())?;
    let out = setup::out_dir(&cfg)?;
    std::fs::write(out.join("config.toml"), cfg.to_toml())?;

    let (mut learner, start_step, encoder) = match &args.resume {
        Some(path) => {
            let model = setup::model(&cfg, &split.train, Some(path), cfg.seed)?;
            let manifest = model.manifest.expect("checkpoints carry a manifest");
            if manifest.encoder_config() != cfg.encoder {
                tracing::warn!("checkpoint encoder sizes override the config");
            }
            // a resumed run draws fresh users rather than replaying the first run's stream
            let rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(manifest.step as u64));
            let learner = Learner::with_params(&split.train, model.agent, model.params, cfg.episode.clone(), cfg.planner.clone(), cfg.train.clone(), rng);
            (learner, manifest.step, manifest.encoder_config())
        }
        None => {
            let learner = Learner::new(&split.train, &cfg.encoder, cfg.episode.clone(), cfg.planner.clone(), cfg.train.clone(), cfg.seed);
            (learner, 0, cfg.encoder.clone())
        }
    };

    let mut metrics = std::io::BufWriter::new(std::fs::File::create(out.join("metrics.jsonl"))?);
    let mut timing = std::io::BufWriter::new(std::fs::File::create(out.join("timing.jsonl"))?);
    let started = Instant::now();
    let mut last = started;
    let mut io_err: Option<std::io::Error> = None;
    tracing::info!(mode = %cfg.train.mode, steps = cfg.train.steps, start_step, "training");
    let outcome = train(&mut learner, Some(&split.valid), start_step, cfg.seed, |r| {
        let now = Instant::now();
        let t = Timing { step: r.step, seconds: (now - last).as_secs_f64(), elapsed: (now - started).as_secs_f64() };
        last = now;
        let res = writeln!(metrics, "{}", serde_json::to_string(r).expect("records serialize"))
            .and_then(|_| writeln!(timing, "{}", serde_json::to_string(&t).expect("timings serialize")));
        if let Err(e) = res {
            io_err.get_or_insert(e);
        }
        if let Some(v) = &r.valid {
            tracing::info!(step = r.step, sr = v.sr, at = v.at, hdcg = v.hdcg, "validation");
        }
    })?;
    if let Some(e) = io_err {
        return Err(e).context("writing logs");
    }
    metrics.flush()?;
    timing.flush()?;
    save(&cfg, &split.train, &encoder, &learner, &outcome, start_step, &out)?;
    if let Some(v) = &outcome.best_valid {
        print!("{}", v.table("valid (best)"));
    }
    println!("steps {}..{} in {:.1}s, checkpoints in {}", start_step + 1, start_step + cfg.train.steps, started.elapsed().as_secs_f64(), out.display());
    Ok(())
}

fn save(
    cfg: &RunConfig,
    train: &converse_core::catalog::Catalog,
    encoder: &converse_core::encoder::EncoderConfig,
    learner: &Learner,
    outcome: &TrainOutcome,
    start_step: usize,
    out: &std::path::Path,
) -> Result<()> {
    let max_positions = learner.episode.t_max + 1;
    let final_step = start_step + cfg.train.steps;
    let manifest = |step| Manifest::new(encoder, max_positions, train, cfg.split_seed, step, cfg.train.mode, cfg.seed);
    checkpoint::save(&out.join("final.ckpt"), &manifest(final_step), &outcome.final_params)?;
    let best_step = outcome
        .best_valid
        .as_ref()
        .and_then(|b| outcome.log.iter().find(|r| r.valid.as_ref() == Some(b)))
        .map_or(final_step, |r| r.step);
    checkpoint::save(&out.join("best.ckpt"), &manifest(best_step), &outcome.best_params)?;
    Ok(())
}
