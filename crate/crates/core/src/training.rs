//! Self-training: experience storage, the three losses and the outer loop.
//!
//! Gradients are computed per sample on independent tapes that read the
//! global graph encoding as an input. The gradient flowing into that input is
//! summed and pushed through a single tape holding the graph attention stack,
//! so the embeddings and attention weights receive the full gradient.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{sync_target, Agent, GraphContext, Inference};
use crate::catalog::{Catalog, ItemId, UserId};
use crate::encoder::{EncoderConfig, GatPlan};
use crate::env::{Action, ActionKind, ConversationState, Env, EpisodeConfig};
use crate::eval::{aggregate, evaluate, sessions, AgentPolicy, MetricsReport};
use crate::params::{Adam, AdamConfig, ParamGrads, ParamSet};
use crate::planner::{best_trajectory, plan_user, PlannerConfig, Trajectory};
use crate::replay::{Experience, ReplayMemory};
use crate::tape::{Tape, Var};
use crate::tensor::Matrix;

/// Samples per worker chunk; fixed so the reduction order never depends on the thread count.
const CHUNK: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    #[serde(rename = "sapient")]
    Sapient,
    #[serde(rename = "sapient-e")]
    SapientE,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Sapient => "sapient",
            Mode::SapientE => "sapient-e",
        })
    }
}

impl FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "sapient" => Ok(Mode::Sapient),
            "sapient-e" => Ok(Mode::SapientE),
            _ => Err(format!("unknown mode `{s}` (expected sapient or sapient-e)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub mode: Mode,
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub memory_size: usize,
    pub alpha_per: f64,
    pub beta_per: f64,
    pub per_eps: f64,
    pub target_sync: usize,
    /// Validation period in steps; 0 validates only after the last step.
    pub eval_every: usize,
    /// Experiences required before the first update.
    pub warmup: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Sapient,
            steps: 2000,
            lr: 1e-4,
            batch_size: 128,
            memory_size: 10_000,
            alpha_per: 0.6,
            beta_per: 0.4,
            per_eps: 1e-5,
            target_sync: 20,
            eval_every: 100,
            warmup: 128,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.batch_size == 0 || self.memory_size == 0 || self.target_sync == 0 {
            return Err("batch_size, memory_size and target_sync must be positive".into());
        }
        if !(self.lr >= 0.0) || !(self.per_eps > 0.0) || !(self.alpha_per >= 0.0) || !(self.beta_per >= 0.0) {
            return Err("lr, alpha_per and beta_per must be non-negative and per_eps positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum TrainError {
    #[error("replay memory holds {have} experiences, need at least {need}")]
    InsufficientData { have: usize, need: usize },
    #[error("no training user has a valid opening")]
    NoUsers,
}

/// Converts one trajectory into replay tuples.
pub fn trajectory_experiences(t: &Trajectory, from_best: bool) -> Vec<Experience> {
    t.steps
        .iter()
        .enumerate()
        .map(|(i, s)| Experience {
            state: s.state.clone(),
            kind: s.kind,
            action: s.action.clone(),
            reward: s.reward,
            next: s.next.clone(),
            next_kind: if s.next.is_terminal() { None } else { t.steps.get(i + 1).map(|n| n.kind) },
            from_best,
        })
        .collect()
}

/// Pushes the experiences of one planning call; returns how many were stored.
pub fn store_plan(memory: &mut ReplayMemory, mode: Mode, trajectories: &[Trajectory]) -> usize {
    let Some(best) = best_trajectory(trajectories) else { return 0 };
    let chosen: Vec<usize> = match mode {
        Mode::Sapient => vec![best],
        Mode::SapientE => (0..trajectories.len()).collect(),
    };
    let mut n = 0;
    for i in chosen {
        for e in trajectory_experiences(&trajectories[i], i == best) {
            memory.push(e);
            n += 1;
        }
    }
    n
}

/// Trajectory indices by return, best first; ties keep planner order.
pub fn rank_trajectories(trajectories: &[Trajectory]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..trajectories.len()).collect();
    order.sort_by(|&a, &b| trajectories[b].ret.partial_cmp(&trajectories[a].ret).expect("finite returns"));
    order
}

/// `log π(o|s)` under the availability mask; `None` when only one type is available
/// (its probability is 1 and carries no gradient).
pub fn log_policy(agent: &Agent, tape: &mut Tape, s: Var, state: &ConversationState, kind: ActionKind) -> Option<Var> {
    let available = state.available();
    if !(available[0] && available[1]) {
        return None;
    }
    let logits = agent.policy_logits(tape, s);
    let lp = tape.log_softmax_rows(logits);
    Some(tape.slice_cols(lp, kind.index(), 1))
}

/// `Q(a|s,o)` for the action's leading element.
pub fn q_of_action(agent: &Agent, tape: &mut Tape, s: Var, action: &Action) -> Var {
    let row = agent.encoder.index.row(action.primary());
    agent.q_values(tape, s, vec![row])
}

/// `max_{a' ∈ A_{s',o'}} Q(a'|s',o')` under the given parameters.
pub fn max_q(agent: &Agent, params: &ParamSet, global: &Matrix, catalog: &Catalog, state: &ConversationState, kind: ActionKind) -> f64 {
    let (rows, _) = agent.action_rows(state, kind);
    assert!(!rows.is_empty(), "action type {kind:?} has no candidates");
    let mut tape = Tape::new(params);
    let g = tape.input_ref(global);
    let s = agent.encoder.encode_state(&mut tape, g, state, catalog);
    let q = agent.q_values(&mut tape, s, rows);
    tape.value(q).data().iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// TD target `r + γ·max Q̃(s',o')`, or `r` when `s'` is terminal.
pub fn td_target(agent: &Agent, target: &ParamSet, target_global: &Matrix, catalog: &Catalog, e: &Experience, gamma: f64) -> f64 {
    match e.next_kind {
        None => e.reward,
        Some(k) => e.reward + gamma * max_q(agent, target, target_global, catalog, &e.next, k),
    }
}

/// `(1/B) Σ w_i·(−log π(o_i|s_i))` on one tape.
pub fn policy_loss(agent: &Agent, tape: &mut Tape, global: Var, catalog: &Catalog, batch: &[&Experience], weights: &[f64]) -> Var {
    let b = batch.len() as f64;
    let mut terms = Vec::new();
    for (e, &w) in batch.iter().zip(weights) {
        let s = agent.encoder.encode_state(tape, global, &e.state, catalog);
        if let Some(lp) = log_policy(agent, tape, s, &e.state, e.kind) {
            terms.push(tape.scale(lp, -w / b));
        }
    }
    sum_scalars(tape, terms)
}

/// `(1/B) Σ w_i·(Q(a_i|s_i,o_i) − y_i)²` on one tape.
pub fn q_loss(agent: &Agent, tape: &mut Tape, global: Var, catalog: &Catalog, batch: &[&Experience], weights: &[f64], targets: &[f64]) -> Var {
    let b = batch.len() as f64;
    let mut terms = Vec::new();
    for ((e, &w), &y) in batch.iter().zip(weights).zip(targets) {
        let s = agent.encoder.encode_state(tape, global, &e.state, catalog);
        let q = q_of_action(agent, tape, s, &e.action);
        let y = tape.input(Matrix::scalar(y));
        let d = tape.sub(q, y);
        let sq = tape.mul(d, d);
        terms.push(tape.scale(sq, w / b));
    }
    sum_scalars(tape, terms)
}

/// Negative Plackett-Luce log-likelihood of ranked trajectories, each scored by `Σ log π(o|s)`.
pub fn listwise_loss(agent: &Agent, tape: &mut Tape, global: Var, catalog: &Catalog, ranked: &[&Trajectory]) -> Var {
    let mut cache: HashMap<&ConversationState, Option<Var>> = HashMap::new();
    let mut scores = Vec::new();
    for t in ranked {
        let mut terms = Vec::new();
        for step in &t.steps {
            let row = *cache.entry(&step.state).or_insert_with(|| {
                let s = agent.encoder.encode_state(tape, global, &step.state, catalog);
                let available = step.state.available();
                (available[0] && available[1]).then(|| {
                    let logits = agent.policy_logits(tape, s);
                    tape.log_softmax_rows(logits)
                })
            });
            if let Some(row) = row {
                terms.push(tape.slice_cols(row, step.kind.index(), 1));
            }
        }
        scores.push(sum_scalars(tape, terms));
    }
    let col = tape.concat_rows(scores);
    tape.plackett_luce_nll(col)
}

fn sum_scalars(tape: &mut Tape, terms: Vec<Var>) -> Var {
    let mut it = terms.into_iter();
    match it.next() {
        None => tape.input(Matrix::scalar(0.0)),
        Some(first) => it.fold(first, |acc, t| tape.add(acc, t)),
    }
}

/// Gradient contributions of independent per-item tapes.
struct GradSum {
    grads: ParamGrads,
    global: Matrix,
}

impl GradSum {
    fn merge(&mut self, other: GradSum) {
        self.grads.merge(&other.grads);
        self.global.add_assign(&other.global);
    }
}

/// Runs `build` on a fresh tape per item in fixed chunks, backpropagates the
/// returned node with its seed, and reduces in item order. Side values from
/// `build` come back in item order.
fn per_item_grads<T: Sync, R: Send>(
    params: &ParamSet,
    global: &Matrix,
    items: &[T],
    build: impl Fn(&mut Tape, Var, &T) -> (Var, Matrix, R) + Sync + Send,
) -> (GradSum, Vec<R>) {
    let parts = crate::par::map_chunks(items, CHUNK, |chunk| {
        let mut acc = GradSum { grads: ParamGrads::zeros_like(params), global: Matrix::zeros(global.rows(), global.cols()) };
        let mut side = Vec::with_capacity(chunk.len());
        for item in chunk {
            let mut tape = Tape::new(params);
            let g = tape.input_ref(global);
            let (out, seed, r) = build(&mut tape, g, item);
            let mut grads = tape.backward_seeded(out, seed);
            tape.accumulate_param_grads(&grads, &mut acc.grads);
            if let Some(dg) = grads.take(g) {
                acc.global.add_assign(&dg);
            }
            side.push(r);
        }
        (acc, side)
    });
    let mut total = GradSum { grads: ParamGrads::zeros_like(params), global: Matrix::zeros(global.rows(), global.cols()) };
    let mut side = Vec::with_capacity(items.len());
    for (p, r) in parts {
        total.merge(p);
        side.extend(r);
    }
    (total, side)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub policy: Option<f64>,
    pub q: Option<f64>,
    pub listwise: Option<f64>,
    pub grad_norm: f64,
}

/// Everything the online learner owns.
pub struct Learner<'c> {
    pub catalog: &'c Catalog,
    pub ctx: GraphContext,
    pub agent: Agent,
    pub params: ParamSet,
    pub target: ParamSet,
    target_global: Matrix,
    pub adam: Adam,
    pub memory: ReplayMemory,
    pub config: TrainConfig,
    pub episode: EpisodeConfig,
    pub planner: PlannerConfig,
    pub updates: u64,
    pub rng: ChaCha8Rng,
}

impl<'c> Learner<'c> {
    /// Fresh parameters drawn from `seed`. `catalog` holds the training interactions.
    pub fn new(catalog: &'c Catalog, encoder: &EncoderConfig, episode: EpisodeConfig, planner: PlannerConfig, config: TrainConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::default();
        let agent = Agent::register(&mut params, encoder, catalog.entity_index(), episode.t_max + 1, &mut rng);
        Self::with_params(catalog, agent, params, episode, planner, config, rng)
    }

    pub fn with_params(
        catalog: &'c Catalog,
        agent: Agent,
        params: ParamSet,
        episode: EpisodeConfig,
        planner: PlannerConfig,
        config: TrainConfig,
        rng: ChaCha8Rng,
    ) -> Self {
        let ctx = GraphContext::new(catalog);
        let target = params.clone();
        let target_global = agent.encoder.global_vectors(&target, &ctx.plan);
        let adam = Adam::new(&params, AdamConfig { lr: config.lr, ..AdamConfig::default() });
        let memory = ReplayMemory::new(config.memory_size, config.alpha_per);
        Self { catalog, ctx, agent, params, target, target_global, adam, memory, config, episode, planner, updates: 0, rng }
    }

    pub fn inference(&self) -> Inference<'_> {
        Inference::new(&self.agent, &self.params, self.catalog, &self.episode, &self.ctx)
    }

    pub fn sync_target(&mut self) {
        sync_target(&self.params, &mut self.target);
        self.target_global = self.agent.encoder.global_vectors(&self.target, &self.ctx.plan);
    }

    /// Plans for one user from a fresh opening.
    pub fn plan(&mut self, user: UserId, targets: &[ItemId]) -> Vec<Trajectory> {
        let env = Env::new(self.catalog, &self.episode);
        let root = env.init_session(user, targets, &mut self.rng).expect("training users have valid openings");
        let mut rng = ChaCha8Rng::seed_from_u64(self.rng.gen());
        let inference = self.inference();
        plan_user(&inference, &self.planner, root, targets, &mut rng).0
    }

    /// One optimizer step. `latest` holds the most recent planning call's
    /// trajectories; SAPIENT-e ranks them for the listwise term.
    pub fn train_step(&mut self, latest: &[Trajectory]) -> Result<StepLosses, TrainError> {
        let need = self.config.warmup.max(1);
        if self.memory.len() < need {
            return Err(TrainError::InsufficientData { have: self.memory.len(), need });
        }
        let batch = self.memory.sample(self.config.batch_size, self.config.beta_per, &mut self.rng).expect("memory is nonempty");
        let samples: Vec<(usize, f64)> = batch.indices.iter().copied().zip(batch.weights.iter().copied()).collect();
        let (agent, catalog, gamma) = (&self.agent, self.catalog, self.episode.gamma);
        let (target, target_global, memory) = (&self.target, &self.target_global, &self.memory);
        let targets: Vec<f64> = crate::par::map(&samples, |&(i, _)| td_target(agent, target, target_global, catalog, memory.get(i), gamma));

        let with_policy = self.config.mode == Mode::Sapient;
        let batch: Vec<BatchItem> =
            samples.iter().zip(&targets).map(|(&(i, w), &y)| BatchItem { experience: memory.get(i), weight: w, target: y }).collect();
        let listwise = (self.config.mode == Mode::SapientE && !latest.is_empty()).then_some(latest);
        let result = gradients(agent, &self.params, &self.ctx.plan, catalog, &batch, with_policy, listwise);
        drop(batch);

        let b = samples.len() as f64;
        let q_value: f64 = samples.iter().zip(&result.td_errors).map(|(&(_, w), &d)| w * d * d).sum::<f64>() / b;
        let policy_value: f64 = samples.iter().zip(&result.log_probs).map(|(&(_, w), &lp)| -w * lp).sum::<f64>() / b;
        let losses = StepLosses {
            q: Some(q_value),
            policy: with_policy.then_some(policy_value),
            listwise: result.listwise,
            grad_norm: result.grads.global_norm(),
        };
        self.adam.step(&mut self.params, &result.grads);

        for (&(i, _), &d) in samples.iter().zip(&result.td_errors) {
            self.memory.update_priority(i, d.abs() + self.config.per_eps);
        }
        self.updates += 1;
        if self.updates.is_multiple_of(self.config.target_sync as u64) {
            self.sync_target();
        }
        Ok(losses)
    }
}

/// One replay sample with its importance weight and TD target.
pub struct BatchItem<'e> {
    pub experience: &'e Experience,
    pub weight: f64,
    pub target: f64,
}

pub struct GradientResult {
    pub grads: ParamGrads,
    /// `Q(a|s,o) − y` per batch item.
    pub td_errors: Vec<f64>,
    /// Masked `log π(o|s)` per batch item (0 when the policy term is off or only one type is available).
    pub log_probs: Vec<f64>,
    pub listwise: Option<f64>,
}

/// Gradient of `q_loss` (plus `policy_loss` when `with_policy`, plus
/// `listwise_loss` over `listwise` when given) with respect to every parameter.
pub fn gradients(
    agent: &Agent,
    params: &ParamSet,
    plan: &GatPlan,
    catalog: &Catalog,
    batch: &[BatchItem],
    with_policy: bool,
    listwise: Option<&[Trajectory]>,
) -> GradientResult {
    let mut gtape = Tape::new(params);
    let gvar = agent.encoder.encode_global(&mut gtape, plan);
    let global = gtape.value(gvar).clone();
    let b = batch.len() as f64;
    let (mut sum, stats) = per_item_grads(params, &global, batch, |tape, g, item| {
        let e = item.experience;
        let s = agent.encoder.encode_state(tape, g, &e.state, catalog);
        let q = q_of_action(agent, tape, s, &e.action);
        let delta = tape.value(q).item() - item.target;
        let yv = tape.input(Matrix::scalar(item.target));
        let d = tape.sub(q, yv);
        let sq = tape.mul(d, d);
        let mut loss = tape.scale(sq, item.weight / b);
        let mut logp = 0.0;
        if with_policy {
            if let Some(lp) = log_policy(agent, tape, s, &e.state, e.kind) {
                logp = tape.value(lp).item();
                let p = tape.scale(lp, -item.weight / b);
                loss = tape.add(loss, p);
            }
        }
        (loss, Matrix::scalar(1.0), (delta, logp))
    });
    let mut value = None;
    if let Some(trajectories) = listwise {
        let (v, part) = listwise_grads(agent, params, &global, catalog, trajectories);
        sum.merge(part);
        value = Some(v);
    }
    let global_grads = gtape.backward_seeded(gvar, sum.global);
    gtape.accumulate_param_grads(&global_grads, &mut sum.grads);
    let (td_errors, log_probs) = stats.into_iter().unzip();
    GradientResult { grads: sum.grads, td_errors, log_probs, listwise: value }
}

/// Listwise loss value and its gradient, computed per unique state.
fn listwise_grads(agent: &Agent, params: &ParamSet, global: &Matrix, catalog: &Catalog, trajectories: &[Trajectory]) -> (f64, GradSum) {
    let order = rank_trajectories(trajectories);
    let ranked: Vec<&Trajectory> = order.iter().map(|&i| &trajectories[i]).collect();
    let mut states: Vec<&ConversationState> = Vec::new();
    let mut slot: HashMap<&ConversationState, usize> = HashMap::new();
    for t in &ranked {
        for step in &t.steps {
            let avail = step.state.available();
            if avail[0] && avail[1] && !slot.contains_key(&step.state) {
                slot.insert(&step.state, states.len());
                states.push(&step.state);
            }
        }
    }
    let logp: Vec<[f64; 2]> = crate::par::map(&states, |state| {
        let mut tape = Tape::new(params);
        let g = tape.input_ref(global);
        let s = agent.encoder.encode_state(&mut tape, g, state, catalog);
        let logits = agent.policy_logits(&mut tape, s);
        let lp = tape.log_softmax_rows(logits);
        let row = tape.value(lp).row(0);
        [row[0], row[1]]
    });
    let scores: Vec<f64> = ranked
        .iter()
        .map(|t| t.steps.iter().filter_map(|st| slot.get(&st.state).map(|&i| logp[i][st.kind.index()])).sum())
        .collect();
    let empty = ParamSet::default();
    let mut pl = Tape::new(&empty);
    let sv = pl.input(Matrix::column(scores));
    let loss = pl.plackett_luce_nll(sv);
    let value = pl.value(loss).item();
    let dscore = pl.backward(loss).wrt(sv).expect("scores feed the loss").clone();
    let mut seeds = vec![[0.0f64; 2]; states.len()];
    for (r, t) in ranked.iter().enumerate() {
        for st in &t.steps {
            if let Some(&i) = slot.get(&st.state) {
                seeds[i][st.kind.index()] += dscore.data()[r];
            }
        }
    }
    let items: Vec<(&ConversationState, [f64; 2])> = states.into_iter().zip(seeds).collect();
    let (sum, _) = per_item_grads(params, global, &items, |tape, g, &(state, seed)| {
        let s = agent.encoder.encode_state(tape, g, state, catalog);
        let logits = agent.policy_logits(tape, s);
        let lp = tape.log_softmax_rows(logits);
        (lp, Matrix::row_vector(seed.to_vec()), ())
    });
    (value, sum)
}

/// One line of the training metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub mode: Mode,
    pub user: UserId,
    pub trajectories: usize,
    /// Trajectories whose experiences entered memory in this step.
    pub trajectories_stored: usize,
    /// Trajectories ranked by the listwise loss in this step.
    pub trajectories_ranked: usize,
    pub experiences_stored: usize,
    pub best_return: f64,
    pub memory: usize,
    pub memory_all_best: bool,
    pub losses: Option<StepLosses>,
    pub valid: Option<MetricsReport>,
}

pub struct TrainOutcome {
    pub final_params: ParamSet,
    pub best_params: ParamSet,
    pub best_valid: Option<MetricsReport>,
    pub log: Vec<MetricsRecord>,
}

/// Greedy-agent metrics on the users of `split`.
pub fn validate(agent: &Agent, params: &ParamSet, train: &Catalog, split: &Catalog, episode: &EpisodeConfig, ctx: &GraphContext, seed: u64) -> Option<MetricsReport> {
    let env = Env::new(train, episode);
    let sess = sessions(&env, split, seed);
    if sess.is_empty() {
        return None;
    }
    let inference = Inference::new(agent, params, train, episode, ctx);
    let records = evaluate(&env, &sess, |_| AgentPolicy { inference: &inference });
    aggregate(&records, episode.t_max, episode.k_v).ok()
}

/// Users of `catalog` that can open a session, with their interactions as targets.
pub fn training_users(catalog: &Catalog) -> Vec<(UserId, Vec<ItemId>)> {
    (0..catalog.n_users())
        .filter(|&u| !catalog.user_items(u).is_empty() && !catalog.shared_values(catalog.user_items(u)).is_empty())
        .map(|u| (u, catalog.user_items(u).to_vec()))
        .collect()
}

/// The outer loop: sample a user, plan, store, update, validate periodically.
/// `on_record` sees every metrics line as it is produced.
pub fn train(learner: &mut Learner, valid: Option<&Catalog>, start_step: usize, seed: u64, mut on_record: impl FnMut(&MetricsRecord)) -> Result<TrainOutcome, TrainError> {
    let users = training_users(learner.catalog);
    if users.is_empty() {
        return Err(TrainError::NoUsers);
    }
    let mode = learner.config.mode;
    let mut log = Vec::new();
    let mut best: Option<(MetricsReport, ParamSet)> = None;
    let total = learner.config.steps;
    for k in 0..total {
        let step = start_step + k + 1;
        let (user, targets) = users[learner.rng.gen_range(0..users.len())].clone();
        let trajectories = learner.plan(user, &targets);
        let stored = store_plan(&mut learner.memory, mode, &trajectories);
        let best_return = best_trajectory(&trajectories).map_or(0.0, |b| trajectories[b].ret);
        let losses = match learner.train_step(&trajectories) {
            Ok(l) => Some(l),
            Err(TrainError::InsufficientData { .. }) => None,
            Err(e) => return Err(e),
        };
        let validate_now = (learner.config.eval_every > 0 && step.is_multiple_of(learner.config.eval_every)) || k + 1 == total;
        let report = match (validate_now, valid) {
            (true, Some(v)) => validate(&learner.agent, &learner.params, learner.catalog, v, &learner.episode, &learner.ctx, seed),
            _ => None,
        };
        if let Some(r) = &report {
            let better = best.as_ref().is_none_or(|(b, _)| r.sr > b.sr || (r.sr == b.sr && r.hdcg > b.hdcg));
            if better {
                best = Some((r.clone(), learner.params.clone()));
            }
        }
        let record = MetricsRecord {
            step,
            mode,
            user,
            trajectories: trajectories.len(),
            trajectories_stored: if mode == Mode::Sapient { 1 } else { trajectories.len() },
            trajectories_ranked: if mode == Mode::SapientE && losses.is_some() { trajectories.len() } else { 0 },
            experiences_stored: stored,
            best_return,
            memory: learner.memory.len(),
            memory_all_best: learner.memory.iter().all(|e| e.from_best),
            losses,
            valid: report,
        };
        on_record(&record);
        log.push(record);
    }
    let final_params = learner.params.clone();
    let (best_valid, best_params) = match best {
        Some((r, p)) => (Some(r), p),
        None => (None, final_params.clone()),
    };
    Ok(TrainOutcome { final_params, best_params, best_valid, log })
}
