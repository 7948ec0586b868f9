use std::fmt::Write as _;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::Args;
use converse_core::agent::{GraphContext, Inference};
use converse_core::catalog::ItemId;
use converse_core::env::Env;
use converse_core::planner::{best_trajectory, plan_user, Trajectory, Tree};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::{setup, Common};

#[derive(Args, Debug)]
pub struct PlanArgs {
    /// Trained checkpoint; without one a seeded fresh agent is used.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub user: usize,
    /// Planner rollouts (N).
    #[arg(long)]
    pub rollouts: Option<usize>,
    /// UCT exploration weight (w).
    #[arg(long)]
    pub exploration: Option<f64>,
    /// Opening seed value; drawn from the user's shared values when absent.
    #[arg(long)]
    pub seed_value: Option<usize>,
    /// Catalog file, overriding the config.
    #[arg(long)]
    pub catalog: Option<PathBuf>,
}

pub fn run(common: &Common, args: PlanArgs) -> Result<()> {
    let mut cfg = setup::resolve(common)?;
    if let Some(n) = args.rollouts {
        cfg.planner.n = n;
    }
    if let Some(w) = args.exploration {
        cfg.planner.w = w;
    }
    cfg.validate()?;
    let split = setup::split(&cfg, args.catalog.as_deref())?;
    let train = &split.train;
    if args.user >= train.n_users() {
        bail!("user {} out of range (catalog has {})", args.user, train.n_users());
    }
    let targets: Vec<ItemId> = train.user_items(args.user).to_vec();
    let model = setup::model(&cfg, train, args.checkpoint.as_deref(), cfg.seed)?;
    let env = Env::new(train, &cfg.episode);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let root = match args.seed_value {
        Some(p) => {
            if p >= train.n_values() || targets.iter().any(|&v| !train.item_has_value(v, p)) {
                bail!("seed value {p} is not shared by user {}'s items", args.user);
            }
            env.init_with_seed(args.user, p)
        }
        None => env.init_session(args.user, &targets, &mut rng).with_context(|| format!("user {} has no valid opening", args.user))?,
    };
    let ctx = GraphContext::new(train);
    let inference = Inference::new(&model.agent, &model.params, train, &cfg.episode, &ctx);
    let (trajectories, tree) = plan_user(&inference, &cfg.planner, root, &targets, &mut rng);
    let text = dump(&tree, &trajectories, cfg.planner.n, cfg.planner.w);
    match &common.out {
        Some(path) => {
            std::fs::write(path, &text).with_context(|| format!("writing {}", path.display()))?;
            println!("wrote {}", path.display());
        }
        None => print!("{text}"),
    }
    Ok(())
}

/// Tree nodes followed by one line per trajectory with its edges and rewards.
pub fn dump(tree: &Tree, trajectories: &[Trajectory], n: usize, w: f64) -> String {
    let mut s = format!("# plan n={n} w={w} nodes={} trajectories={}\n", tree.nodes.len(), trajectories.len());
    s.push_str(&tree.dump());
    let best = best_trajectory(trajectories);
    for (i, t) in trajectories.iter().enumerate() {
        let edges: Vec<String> = t.edges.iter().map(|(node, kind)| format!("{node}:{}", kind.letter())).collect();
        let rewards: Vec<String> = t.rewards().iter().map(|r| format!("{r}")).collect();
        let _ = writeln!(
            s,
            "trajectory={i} outcome={:?} return={} best={} edges={} rewards={}",
            t.outcome,
            t.ret,
            best == Some(i),
            edges.join(","),
            rewards.join(",")
        );
    }
    s
}
