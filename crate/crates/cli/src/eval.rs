use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Result};
use clap::{Args, ValueEnum};
use converse_core::agent::{GraphContext, Inference};
use converse_core::catalog::{Catalog, ItemId, Split, UserId};
use converse_core::config::RunConfig;
use converse_core::env::{Env, Status, TraceRecord};
use converse_core::eval::{
    action_pattern_stats, aggregate, evaluate, session_rng, sessions, write_sweep, AbsGreedy, AgentPolicy, EpisodeRecord, MatchingScorer, MaxEntropy,
    MetricsReport,
};
use converse_core::planner::PlannerConfig;
use converse_core::training::{train, Learner};
use serde::Serialize;

use crate::{setup, Common};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyName {
    Agent,
    AbsGreedy,
    MaxEntropy,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitName {
    Valid,
    Test,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Trained checkpoint; required by the agent policy.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "agent")]
    pub policy: PolicyName,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitName,
    /// Catalog file, overriding the config.
    #[arg(long)]
    pub catalog: Option<PathBuf>,
    /// Train over the w and N grids and write SR-vs-w and SR-vs-N tables.
    #[arg(long)]
    pub emit_plots: bool,
    #[arg(long, default_value = "0,0.5,1,1.5,2")]
    pub grid_w: String,
    #[arg(long, default_value = "1,5,10,20")]
    pub grid_n: String,
    /// Training steps per grid point (defaults to the config).
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Serialize)]
struct ReportLine<'a> {
    policy: PolicyName,
    split: SplitName,
    seed: u64,
    checkpoint: Option<&'a Path>,
    report: &'a MetricsReport,
    patterns: &'a BTreeMap<String, f64>,
}

#[derive(Serialize)]
struct EpisodeLine<'a> {
    user: UserId,
    outcome: Status,
    turns: usize,
    targets: &'a [ItemId],
    trace: &'a [TraceRecord],
}

fn pick(split: &Split, name: SplitName) -> &Catalog {
    match name {
        SplitName::Valid => &split.valid,
        SplitName::Test => &split.test,
    }
}

pub fn run(common: &Common, args: EvalArgs) -> Result<()> {
    let cfg = setup::resolve(common)?;
    if args.policy == PolicyName::Agent && args.checkpoint.is_none() {
        bail!("--policy agent needs --checkpoint");
    }
    let split = setup::split(&cfg, args.catalog.as_deref())?;
    let target = pick(&split, args.split);
    let model = setup::model(&cfg, &split.train, args.checkpoint.as_deref(), cfg.seed)?;
    let env = Env::new(&split.train, &cfg.episode);
    let sess = sessions(&env, target, cfg.seed);
    if sess.is_empty() {
        bail!("the {:?} split has no evaluable users", args.split);
    }
    let scorer = MatchingScorer { emb: model.params.get(model.agent.encoder.emb).clone(), index: split.train.entity_index() };
    let records = match args.policy {
        PolicyName::Agent => {
            let ctx = GraphContext::new(&split.train);
            let inference = Inference::new(&model.agent, &model.params, &split.train, &cfg.episode, &ctx);
            evaluate(&env, &sess, |_| AgentPolicy { inference: &inference })
        }
        PolicyName::AbsGreedy => evaluate(&env, &sess, |_| AbsGreedy { scorer: scorer.clone(), k_v: cfg.episode.k_v }),
        PolicyName::MaxEntropy => evaluate(&env, &sess, |u| MaxEntropy {
            catalog: &split.train,
            scorer: scorer.clone(),
            k_v: cfg.episode.k_v,
            k_p: cfg.episode.k_p,
            p_rec: cfg.eval.p_rec,
            rng: session_rng(cfg.seed ^ 0x5eed, u),
        }),
    };
    let report = aggregate(&records, cfg.episode.t_max, cfg.episode.k_v)?;
    let patterns = action_pattern_stats(&records, cfg.eval.pattern_len)?;

    let out = setup::out_dir(&cfg)?;
    let line = ReportLine { policy: args.policy, split: args.split, seed: cfg.seed, checkpoint: args.checkpoint.as_deref(), report: &report, patterns: &patterns };
    std::fs::write(out.join("eval.jsonl"), serde_json::to_string(&line)? + "\n")?;
    std::fs::write(out.join("episodes.jsonl"), episodes_jsonl(&records)?)?;

    let label = args.policy.to_possible_value().expect("policies have names").get_name().to_string();
    print!("{}", report.table(&label));
    let mut pat = String::new();
    for (k, v) in &patterns {
        let _ = write!(pat, " {k}={v:.3}");
    }
    println!("patterns (per episode):{pat}");

    if args.emit_plots {
        emit_plots(&cfg, &split, args.split, &args)?;
    }
    Ok(())
}

fn episodes_jsonl(records: &[EpisodeRecord]) -> Result<String> {
    let mut s = String::new();
    for r in records {
        let line = EpisodeLine { user: r.user, outcome: r.outcome, turns: r.turns, targets: &r.targets, trace: &r.trace };
        s.push_str(&serde_json::to_string(&line)?);
        s.push('\n');
    }
    Ok(s)
}

/// Trains one agent per grid point and evaluates its best validation parameters.
fn sweep_point(cfg: &RunConfig, split: &Split, which: SplitName, planner: PlannerConfig, steps: usize) -> Result<MetricsReport> {
    let mut tc = cfg.train.clone();
    tc.steps = steps;
    let mut learner = Learner::new(&split.train, &cfg.encoder, cfg.episode.clone(), planner, tc, cfg.seed);
    let outcome = train(&mut learner, Some(&split.valid), 0, cfg.seed, |_| {})?;
    let env = Env::new(&split.train, &cfg.episode);
    let sess = sessions(&env, pick(split, which), cfg.seed);
    let ctx = GraphContext::new(&split.train);
    let inference = Inference::new(&learner.agent, &outcome.best_params, &split.train, &cfg.episode, &ctx);
    let records = evaluate(&env, &sess, |_| AgentPolicy { inference: &inference });
    Ok(aggregate(&records, cfg.episode.t_max, cfg.episode.k_v)?)
}

fn emit_plots(cfg: &RunConfig, split: &Split, which: SplitName, args: &EvalArgs) -> Result<()> {
    let steps = args.steps.unwrap_or(cfg.train.steps);
    let ws: Vec<f64> = setup::parse_list(&args.grid_w)?;
    let ns: Vec<usize> = setup::parse_list(&args.grid_n)?;
    let mut by_w = Vec::new();
    for &w in &ws {
        let planner = PlannerConfig { w, ..cfg.planner.clone() };
        planner.validate().map_err(anyhow::Error::msg)?;
        let r = sweep_point(cfg, split, which, planner, steps)?;
        tracing::info!(w, sr = r.sr, "grid point");
        by_w.push((w, r));
    }
    let mut by_n = Vec::new();
    for &n in &ns {
        let planner = PlannerConfig { n, ..cfg.planner.clone() };
        planner.validate().map_err(anyhow::Error::msg)?;
        let r = sweep_point(cfg, split, which, planner, steps)?;
        tracing::info!(n, sr = r.sr, "grid point");
        by_n.push((n as f64, r));
    }
    write_sweep(&cfg.out.join("sr_vs_w.tsv"), "w", &by_w)?;
    write_sweep(&cfg.out.join("sr_vs_n.tsv"), "n", &by_n)?;
    println!("wrote {} and {}", cfg.out.join("sr_vs_w.tsv").display(), cfg.out.join("sr_vs_n.tsv").display());
    Ok(())
}
