//! Episode runner, SR/AT/hDCG metrics, rule-based baselines and action-pattern statistics.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{compose_question, compose_recommendation, Inference, SelectMode};
use crate::catalog::{Catalog, EntityIndex, ItemId, UserId, ValueId};
use crate::encoder::matching_score;
use crate::env::{Action, ActionKind, ConversationState, Env, EnvError, Status, TraceRecord};
use crate::tensor::Matrix;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("no episodes to aggregate")]
    Empty,
    #[error("pattern length must be at least 1")]
    BadPatternLength,
}

/// A decision maker that can drive an episode.
pub trait Policy {
    fn act(&mut self, state: &ConversationState) -> Action;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub user: UserId,
    pub outcome: Status,
    pub turns: usize,
    pub kinds: Vec<ActionKind>,
    /// `(turn, list)` for every recommendation turn.
    pub rec_lists: Vec<(usize, Vec<ItemId>)>,
    pub targets: Vec<ItemId>,
    pub rewards: Vec<f64>,
    pub trace: Vec<TraceRecord>,
}

/// Runs `policy` from `root` until the conversation ends.
pub fn run_episode(policy: &mut dyn Policy, env: &Env, root: ConversationState, targets: &[ItemId]) -> EpisodeRecord {
    let mut state = root;
    let mut record = EpisodeRecord {
        user: state.user,
        outcome: state.status,
        turns: 0,
        kinds: Vec::new(),
        rec_lists: Vec::new(),
        targets: targets.to_vec(),
        rewards: Vec::new(),
        trace: vec![TraceRecord::seed(&state)],
    };
    while !state.is_terminal() {
        let action = policy.act(&state);
        let step = env.step(&state, &action, targets).expect("policies emit valid actions");
        record.kinds.push(action.kind());
        if let Action::Rec(items) = &action {
            record.rec_lists.push((step.next.turn, items.clone()));
        }
        record.rewards.push(step.reward);
        record.trace.push(TraceRecord::step(&action, &step.response, &step.next, step.reward));
        state = step.next;
    }
    record.outcome = state.status;
    record.turns = state.turn;
    record
}

/// Gain of a hit at turn `t` and list position `k` (both 1-based).
pub fn hdcg_gain(t: usize, k: usize) -> f64 {
    let (t, k) = (t as f64, k as f64);
    let a = 1.0 / (t + 2.0).log2();
    let b = 1.0 / (t + 1.0).log2();
    a + (b - a) / (k + 1.0).log2()
}

/// `hDCG@(T,K)` with relevance 1 at the best-ranked target of each list.
pub fn hdcg(record: &EpisodeRecord, t_max: usize, k_max: usize) -> f64 {
    let mut total = 0.0;
    for (t, list) in &record.rec_lists {
        if *t > t_max {
            continue;
        }
        if let Some(k) = list.iter().take(k_max).position(|v| record.targets.contains(v)) {
            total += hdcg_gain(*t, k + 1);
        }
    }
    total
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub sr: f64,
    pub at: f64,
    pub hdcg: f64,
    pub episodes: usize,
}

impl MetricsReport {
    pub fn table(&self, label: &str) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<16} {:>8} {:>8} {:>8} {:>9}", "policy", "SR", "AT", "hDCG", "episodes");
        let _ = writeln!(s, "{:<16} {:>8.4} {:>8.4} {:>8.4} {:>9}", label, self.sr, self.at, self.hdcg, self.episodes);
        s
    }
}

/// SR, AT (failures count as `T_max`) and mean hDCG.
pub fn aggregate(records: &[EpisodeRecord], t_max: usize, k_v: usize) -> Result<MetricsReport, EvalError> {
    if records.is_empty() {
        return Err(EvalError::Empty);
    }
    let n = records.len() as f64;
    let successes = records.iter().filter(|r| r.outcome == Status::Success).count() as f64;
    let turns: f64 = records.iter().map(|r| if r.outcome == Status::Success { r.turns } else { t_max } as f64).sum();
    let hdcg_sum: f64 = records.iter().map(|r| hdcg(r, t_max, k_v)).sum();
    Ok(MetricsReport { sr: successes / n, at: turns / n, hdcg: hdcg_sum / n, episodes: records.len() })
}

/// Frequency of each length-`n` action-kind substring per episode.
pub fn action_pattern_stats(records: &[EpisodeRecord], n: usize) -> Result<BTreeMap<String, f64>, EvalError> {
    if n == 0 {
        return Err(EvalError::BadPatternLength);
    }
    if records.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut counts: BTreeMap<String, f64> = BTreeMap::new();
    for r in records {
        let letters: String = r.kinds.iter().map(|k| k.letter()).collect();
        for w in letters.as_bytes().windows(n) {
            *counts.entry(String::from_utf8_lossy(w).into_owned()).or_default() += 1.0;
        }
    }
    let m = records.len() as f64;
    for v in counts.values_mut() {
        *v /= m;
    }
    Ok(counts)
}

/// Scores items by the matching score under a fixed embedding table.
#[derive(Clone, Debug)]
pub struct MatchingScorer {
    pub emb: Matrix,
    pub index: EntityIndex,
}

impl MatchingScorer {
    pub fn rank(&self, state: &ConversationState) -> Vec<(ItemId, f64)> {
        state.candidate_items.iter().map(|&v| (v, matching_score(&self.emb, self.index, state, v))).collect()
    }

    pub fn recommend(&self, state: &ConversationState, k_v: usize) -> Action {
        compose_recommendation(&self.rank(state), k_v)
    }
}

/// Recommends the top `K_v` candidates every turn.
pub struct AbsGreedy {
    pub scorer: MatchingScorer,
    pub k_v: usize,
}

impl Policy for AbsGreedy {
    fn act(&mut self, state: &ConversationState) -> Action {
        self.scorer.recommend(state, self.k_v)
    }
}

/// Binary entropy (nats) of the share of candidate items carrying each candidate value.
pub fn value_entropies(state: &ConversationState, catalog: &Catalog) -> Vec<(ValueId, f64)> {
    let n = state.candidate_items.len() as f64;
    state
        .candidate_values
        .iter()
        .map(|&p| {
            let c = state.candidate_items.iter().filter(|&&v| catalog.item_has_value(v, p)).count() as f64;
            let f = if n > 0.0 { c / n } else { 0.0 };
            let h = if f <= 0.0 || f >= 1.0 { 0.0 } else { -(f * f.ln() + (1.0 - f) * (1.0 - f).ln()) };
            (p, h)
        })
        .collect()
}

/// Asks the maximum-entropy value (plus `K_p − 1` more of its type), or
/// recommends with probability `p_rec`.
pub struct MaxEntropy<'c> {
    pub catalog: &'c Catalog,
    pub scorer: MatchingScorer,
    pub k_v: usize,
    pub k_p: usize,
    pub p_rec: f64,
    pub rng: ChaCha8Rng,
}

impl Policy for MaxEntropy<'_> {
    fn act(&mut self, state: &ConversationState) -> Action {
        let [can_ask, can_rec] = state.available();
        let draw = self.rng.gen::<f64>();
        if !can_ask || (can_rec && draw < self.p_rec) {
            return self.scorer.recommend(state, self.k_v);
        }
        compose_question(&value_entropies(state, self.catalog), self.catalog, self.k_p)
    }
}

/// The trained agent acting greedily without planning.
pub struct AgentPolicy<'a, 'b> {
    pub inference: &'b Inference<'a>,
}

impl Policy for AgentPolicy<'_, '_> {
    fn act(&mut self, state: &ConversationState) -> Action {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        self.inference.select_action(state, SelectMode::Greedy, &mut rng).expect("running states have an available action")
    }
}

/// Seeded RNG for opening a session for `user`, shared across policies.
pub fn session_rng(seed: u64, user: UserId) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(user as u64 + 1);
    rng
}

/// Opens one session per user with targets in `split`; users without a
/// valid opening are skipped.
pub fn sessions(env: &Env, split: &Catalog, seed: u64) -> Vec<(ConversationState, Vec<ItemId>)> {
    let mut out = Vec::new();
    for u in 0..split.n_users() {
        let targets = split.user_items(u).to_vec();
        match env.init_session(u, &targets, &mut session_rng(seed, u)) {
            Ok(root) => out.push((root, targets)),
            Err(EnvError::NoTargets | EnvError::NoSharedValue) => {}
            Err(e) => panic!("unexpected session error for user {u}: {e}"),
        }
    }
    out
}

/// Runs one episode per session, in parallel over sessions.
pub fn evaluate<P: Policy>(
    env: &Env,
    sessions: &[(ConversationState, Vec<ItemId>)],
    make_policy: impl Fn(UserId) -> P + Sync,
) -> Vec<EpisodeRecord> {
    crate::par::map(sessions, |(root, targets)| {
        let mut policy = make_policy(root.user);
        run_episode(&mut policy, env, root.clone(), targets)
    })
}

/// Writes `x<TAB>SR` rows for external plotting.
pub fn write_sweep(path: &Path, label: &str, points: &[(f64, MetricsReport)]) -> std::io::Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "{label}\tsr\tat\thdcg")?;
    for (x, m) in points {
        writeln!(f, "{x}\t{}\t{}\t{}", m.sr, m.at, m.hdcg)?;
    }
    Ok(())
}
