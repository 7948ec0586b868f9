//! Rayon pool against one worker on the two parallel hot paths.
//! `cargo bench --no-default-features` measures the sequential build instead.

use converse_core::agent::{GraphContext, Inference};
use converse_core::catalog::{generate_synthetic, split_interactions, SyntheticSpec};
use converse_core::encoder::EncoderConfig;
use converse_core::env::{Env, EpisodeConfig};
use converse_core::eval::{evaluate, sessions, AgentPolicy};
use converse_core::planner::PlannerConfig;
use converse_core::training::{gradients, store_plan, training_users, BatchItem, Learner, Mode, TrainConfig};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

type Runner = Box<dyn Fn(&mut (dyn FnMut() + Send))>;

fn pools() -> Vec<(&'static str, Runner)> {
    #[cfg(feature = "parallel")]
    {
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        vec![("one-thread", Box::new(move |f: &mut (dyn FnMut() + Send)| one.install(f))), ("pool", Box::new(|f: &mut (dyn FnMut() + Send)| f()))]
    }
    #[cfg(not(feature = "parallel"))]
    {
        vec![("sequential", Box::new(|f: &mut (dyn FnMut() + Send)| f()))]
    }
}

fn bench(c: &mut Criterion) {
    let full = generate_synthetic(&SyntheticSpec::default()).unwrap();
    let split = split_interactions(&full, 1);
    let episode = EpisodeConfig::default();
    let enc = EncoderConfig { d: 32, heads: 4, ..Default::default() };
    let cfg = TrainConfig { batch_size: 32, warmup: 32, ..Default::default() };
    let mut learner = Learner::new(&split.train, &enc, episode.clone(), PlannerConfig::default(), cfg, 1);
    for (user, targets) in training_users(&split.train).into_iter().take(6) {
        let trajs = learner.plan(user, &targets);
        store_plan(&mut learner.memory, Mode::SapientE, &trajs);
    }
    let batch: Vec<BatchItem> = learner.memory.iter().take(32).map(|e| BatchItem { experience: e, weight: 1.0, target: e.reward }).collect();

    let mut g = c.benchmark_group("gradients");
    g.sample_size(10);
    for (name, run) in pools() {
        g.bench_function(BenchmarkId::new("batch32", name), |b| {
            b.iter(|| run(&mut || drop(gradients(&learner.agent, &learner.params, &learner.ctx.plan, &split.train, &batch, true, None))))
        });
    }
    g.finish();

    let env = Env::new(&split.train, &episode);
    let sess = sessions(&env, &split.test, 1);
    let ctx = GraphContext::new(&split.train);
    let inference = Inference::new(&learner.agent, &learner.params, &split.train, &episode, &ctx);
    let mut g = c.benchmark_group("evaluate");
    g.sample_size(10);
    for (name, run) in pools() {
        g.bench_function(BenchmarkId::new("test-split", name), |b| {
            b.iter(|| run(&mut || drop(evaluate(&env, &sess, |_| AgentPolicy { inference: &inference }))))
        });
    }
    g.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
