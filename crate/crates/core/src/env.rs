//! The per-user conversational MDP and its rule-based user simulator.
//!
//! A session starts from a seed value `p0` the user volunteers. Each turn the
//! agent either asks about up to `K_p` attribute values of one type or
//! recommends up to `K_v` items. The state keeps accepted/rejected values,
//! rejected items and the shrinking candidate sets.

use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{Catalog, Entity, ItemId, TypeId, UserId, ValueId};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EnvError {
    #[error("target items share no attribute value")]
    NoSharedValue,
    #[error("no target items given")]
    NoTargets,
    #[error("seed value {0} is not carried by every target item")]
    BadSeed(ValueId),
    #[error("episode already ended")]
    Terminal,
    #[error("invalid action: {0}")]
    InvalidAction(String),
    #[error("response does not match the pending action: {0}")]
    InvalidResponse(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionKind {
    Ask,
    Rec,
}

impl ActionKind {
    pub const ALL: [ActionKind; 2] = [ActionKind::Ask, ActionKind::Rec];

    pub fn index(self) -> usize {
        match self {
            ActionKind::Ask => 0,
            ActionKind::Rec => 1,
        }
    }

    pub fn from_index(i: usize) -> Self {
        if i == 0 {
            ActionKind::Ask
        } else {
            ActionKind::Rec
        }
    }

    pub fn letter(self) -> char {
        match self {
            ActionKind::Ask => 'A',
            ActionKind::Rec => 'R',
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", content = "ids", rename_all = "snake_case")]
pub enum Action {
    /// Values of a single attribute type, best first.
    Ask(Vec<ValueId>),
    /// Items in ranked order, best first.
    Rec(Vec<ItemId>),
}

impl Action {
    pub fn kind(&self) -> ActionKind {
        match self {
            Action::Ask(_) => ActionKind::Ask,
            Action::Rec(_) => ActionKind::Rec,
        }
    }

    pub fn ids(&self) -> &[usize] {
        match self {
            Action::Ask(v) | Action::Rec(v) => v,
        }
    }

    /// The highest-ranked entity of the action.
    pub fn primary(&self) -> Entity {
        match self {
            Action::Ask(v) => Entity::Value(v[0]),
            Action::Rec(v) => Entity::Item(v[0]),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum UserResponse {
    Ask { accepted: Vec<ValueId>, rejected: Vec<ValueId> },
    Rec { hit: bool },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardConstants {
    pub rec_accept: f64,
    pub ask_accept: f64,
    pub rec_reject: f64,
    pub ask_reject: f64,
    pub quit: f64,
}

impl Default for RewardConstants {
    fn default() -> Self {
        Self { rec_accept: 1.0, ask_accept: 0.01, rec_reject: -0.1, ask_reject: -0.1, quit: -0.3 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EpisodeConfig {
    pub t_max: usize,
    pub k_v: usize,
    pub k_p: usize,
    pub gamma: f64,
    pub rewards: RewardConstants,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self { t_max: 15, k_v: 10, k_p: 2, gamma: 0.999, rewards: RewardConstants::default() }
    }
}

impl EpisodeConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.t_max == 0 || self.k_v == 0 || self.k_p == 0 {
            return Err("t_max, k_v and k_p must be at least 1".into());
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(format!("gamma must lie in (0, 1), got {}", self.gamma));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Running,
    Success,
    Fail,
}

/// An entity mentioned during the conversation, in mention order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Mention {
    pub entity: Entity,
    pub turn: usize,
    pub accepted: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ConversationState {
    pub user: UserId,
    pub seed_value: ValueId,
    pub seed_type: TypeId,
    pub turn: usize,
    pub status: Status,
    pub accepted_values: BTreeSet<ValueId>,
    pub rejected_values: BTreeSet<ValueId>,
    pub rejected_items: BTreeSet<ItemId>,
    pub candidate_values: BTreeSet<ValueId>,
    pub candidate_items: BTreeSet<ItemId>,
    pub history: Vec<Mention>,
}

impl ConversationState {
    pub fn is_terminal(&self) -> bool {
        self.status != Status::Running
    }

    /// `[ask, rec]` availability.
    pub fn available(&self) -> [bool; 2] {
        let running = !self.is_terminal();
        [running && !self.candidate_values.is_empty(), running && !self.candidate_items.is_empty()]
    }

    pub fn is_available(&self, kind: ActionKind) -> bool {
        self.available()[kind.index()]
    }
}

/// One line of the episode trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub turn: usize,
    pub kind: String,
    pub payload: Vec<usize>,
    pub accepted: Vec<usize>,
    pub rejected: Vec<usize>,
    pub reward: f64,
    pub status: Status,
}

impl TraceRecord {
    pub fn seed(state: &ConversationState) -> Self {
        TraceRecord {
            turn: 0,
            kind: "seed".into(),
            payload: vec![state.seed_value],
            accepted: vec![state.seed_value],
            rejected: state.rejected_values.iter().copied().collect(),
            reward: 0.0,
            status: state.status,
        }
    }

    pub fn step(action: &Action, response: &UserResponse, next: &ConversationState, reward: f64) -> Self {
        let (accepted, rejected) = match response {
            UserResponse::Ask { accepted, rejected } => (accepted.clone(), rejected.clone()),
            UserResponse::Rec { hit: true } => (action.ids().to_vec(), Vec::new()),
            UserResponse::Rec { hit: false } => (Vec::new(), action.ids().to_vec()),
        };
        TraceRecord {
            turn: next.turn,
            kind: match action.kind() {
                ActionKind::Ask => "ask".into(),
                ActionKind::Rec => "rec".into(),
            },
            payload: action.ids().to_vec(),
            accepted,
            rejected,
            reward,
            status: next.status,
        }
    }
}

/// Renders trace records as line-delimited JSON.
pub fn trace_to_jsonl(records: &[TraceRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("trace records serialize"));
        out.push('\n');
    }
    out
}

/// Result of one environment step.
#[derive(Clone, Debug)]
pub struct StepResult {
    pub response: UserResponse,
    pub reward: f64,
    pub next: ConversationState,
}

/// The conversational environment over a fixed catalog.
#[derive(Clone, Copy, Debug)]
pub struct Env<'c> {
    pub catalog: &'c Catalog,
    pub config: &'c EpisodeConfig,
}

impl<'c> Env<'c> {
    pub fn new(catalog: &'c Catalog, config: &'c EpisodeConfig) -> Self {
        Self { catalog, config }
    }

    /// Opens a session with a seed value drawn uniformly from the values shared by all targets.
    pub fn init_session(&self, user: UserId, targets: &[ItemId], rng: &mut impl Rng) -> Result<ConversationState, EnvError> {
        if targets.is_empty() {
            return Err(EnvError::NoTargets);
        }
        let shared = self.catalog.shared_values(targets);
        if shared.is_empty() {
            return Err(EnvError::NoSharedValue);
        }
        let p0 = shared[rng.gen_range(0..shared.len())];
        Ok(self.init_with_seed(user, p0))
    }

    /// Opens a session from an explicit seed value.
    pub fn init_with_seed(&self, user: UserId, p0: ValueId) -> ConversationState {
        let c = self.catalog;
        let y0 = c.value_type(p0);
        let mut rejected_values = BTreeSet::new();
        if c.is_single_valued(y0) {
            rejected_values.extend(c.values_of_type(y0).into_iter().filter(|&p| p != p0));
        }
        let accepted_values = BTreeSet::from([p0]);
        let candidate_values =
            (0..c.n_values()).filter(|p| !accepted_values.contains(p) && !rejected_values.contains(p)).collect();
        let candidate_items: BTreeSet<ItemId> = c
            .items_with_value(p0)
            .iter()
            .copied()
            .filter(|&v| !c.item_values(v).iter().any(|p| rejected_values.contains(p)))
            .collect();
        let mut history = vec![Mention { entity: Entity::Value(p0), turn: 0, accepted: true }];
        history.extend(rejected_values.iter().map(|&p| Mention { entity: Entity::Value(p), turn: 0, accepted: false }));
        let status = if candidate_items.is_empty() { Status::Fail } else { Status::Running };
        ConversationState {
            user,
            seed_value: p0,
            seed_type: y0,
            turn: 0,
            status,
            accepted_values,
            rejected_values,
            rejected_items: BTreeSet::new(),
            candidate_values,
            candidate_items,
            history,
        }
    }

    pub fn validate_action(&self, state: &ConversationState, action: &Action) -> Result<(), EnvError> {
        if state.is_terminal() {
            return Err(EnvError::Terminal);
        }
        let bad = |m: String| Err(EnvError::InvalidAction(m));
        match action {
            Action::Ask(values) => {
                if values.is_empty() || values.len() > self.config.k_p {
                    return bad(format!("ask carries {} values, expected 1..={}", values.len(), self.config.k_p));
                }
                let y = self.catalog.value_type(values[0]);
                for &p in values {
                    if !state.candidate_values.contains(&p) {
                        return bad(format!("value {p} is not a candidate"));
                    }
                    if self.catalog.value_type(p) != y {
                        return bad("asked values span several attribute types".into());
                    }
                }
                if values.iter().collect::<BTreeSet<_>>().len() != values.len() {
                    return bad("duplicate values".into());
                }
            }
            Action::Rec(items) => {
                if items.is_empty() || items.len() > self.config.k_v {
                    return bad(format!("rec carries {} items, expected 1..={}", items.len(), self.config.k_v));
                }
                for &v in items {
                    if !state.candidate_items.contains(&v) {
                        return bad(format!("item {v} is not a candidate"));
                    }
                }
                if items.iter().collect::<BTreeSet<_>>().len() != items.len() {
                    return bad("duplicate items".into());
                }
            }
        }
        Ok(())
    }

    /// Answers the way the rule-based simulator would for the given targets.
    pub fn simulate_user(&self, action: &Action, targets: &[ItemId]) -> UserResponse {
        match action {
            Action::Ask(values) => {
                let (accepted, rejected) =
                    values.iter().partition(|&&p| targets.iter().any(|&v| self.catalog.item_has_value(v, p)));
                UserResponse::Ask { accepted, rejected }
            }
            Action::Rec(items) => UserResponse::Rec { hit: items.iter().any(|v| targets.contains(v)) },
        }
    }

    /// Immediate reward of answering `action` with `response`, given the successor state.
    pub fn reward(&self, response: &UserResponse, next: &ConversationState) -> f64 {
        let r = &self.config.rewards;
        let base = match response {
            UserResponse::Ask { accepted, rejected } => accepted.len() as f64 * r.ask_accept + rejected.len() as f64 * r.ask_reject,
            UserResponse::Rec { hit: true } => r.rec_accept,
            UserResponse::Rec { hit: false } => r.rec_reject,
        };
        if next.status == Status::Fail {
            base + r.quit
        } else {
            base
        }
    }

    /// Applies a user response. Candidate items are narrowed incrementally.
    pub fn transition(
        &self,
        state: &ConversationState,
        action: &Action,
        response: &UserResponse,
    ) -> Result<ConversationState, EnvError> {
        self.validate_action(state, action)?;
        let mut next = state.clone();
        next.turn += 1;
        let turn = next.turn;
        match (action, response) {
            (Action::Ask(values), UserResponse::Ask { accepted, rejected }) => {
                let asked: BTreeSet<_> = values.iter().copied().collect();
                let answered: BTreeSet<_> = accepted.iter().chain(rejected).copied().collect();
                if asked != answered || accepted.len() + rejected.len() != values.len() {
                    return Err(EnvError::InvalidResponse("accepted and rejected must partition the asked values".into()));
                }
                for &p in values {
                    next.candidate_values.remove(&p);
                }
                let mut acc = accepted.clone();
                acc.sort_unstable();
                let mut rej = rejected.clone();
                rej.sort_unstable();
                for &p in &acc {
                    next.accepted_values.insert(p);
                    next.history.push(Mention { entity: Entity::Value(p), turn, accepted: true });
                }
                for &p in &rej {
                    next.rejected_values.insert(p);
                    next.history.push(Mention { entity: Entity::Value(p), turn, accepted: false });
                }
                if !rej.is_empty() {
                    let cat = self.catalog;
                    next.candidate_items.retain(|&v| !rej.iter().any(|&p| cat.item_has_value(v, p)));
                }
            }
            (Action::Rec(items), UserResponse::Rec { hit }) => {
                if *hit {
                    next.status = Status::Success;
                    return Ok(next);
                }
                let mut sorted = items.clone();
                sorted.sort_unstable();
                for &v in &sorted {
                    next.rejected_items.insert(v);
                    next.candidate_items.remove(&v);
                    next.history.push(Mention { entity: Entity::Item(v), turn, accepted: false });
                }
            }
            _ => return Err(EnvError::InvalidResponse("response kind differs from action kind".into())),
        }
        if next.turn >= self.config.t_max || next.candidate_items.is_empty() {
            next.status = Status::Fail;
        }
        Ok(next)
    }

    /// Simulates the user's answer, transitions and scores in one step.
    pub fn step(&self, state: &ConversationState, action: &Action, targets: &[ItemId]) -> Result<StepResult, EnvError> {
        let response = self.simulate_user(action, targets);
        self.apply(state, action, response)
    }

    /// Transitions and scores with an externally supplied response.
    pub fn apply(&self, state: &ConversationState, action: &Action, response: UserResponse) -> Result<StepResult, EnvError> {
        let next = self.transition(state, action, &response)?;
        let reward = self.reward(&response, &next);
        Ok(StepResult { response, reward, next })
    }
}

/// `Σ_{t ≥ start} γ^{t-start} r_t` over a zero-based reward list.
pub fn cumulative_return(rewards: &[f64], gamma: f64, start: usize) -> f64 {
    rewards.iter().skip(start).rev().fold(0.0, |acc, &r| r + gamma * acc)
}

/// Tail returns for every start index.
pub fn tail_returns(rewards: &[f64], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for t in (0..rewards.len()).rev() {
        acc = rewards[t] + gamma * acc;
        out[t] = acc;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::{prop_assert, prop_assert_eq, proptest};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn restaurants() -> Catalog {
        // price (single valued): low medium high premium; cuisine (multi valued): thai bar
        Catalog::new(
            vec!["price".into(), "cuisine".into()],
            vec!["low".into(), "medium".into(), "high".into(), "premium".into(), "thai".into(), "bar".into()],
            vec![0, 0, 0, 0, 1, 1],
            vec![vec![1, 4], vec![1, 4, 5], vec![1, 5], vec![0, 4], vec![2, 5]],
            vec![vec![0, 1, 2]],
        )
        .unwrap()
    }

    #[test]
    fn medium_price_seed_rejects_other_prices() {
        let c = restaurants();
        let cfg = EpisodeConfig::default();
        let env = Env::new(&c, &cfg);
        let s = env.init_with_seed(0, 1);
        assert_eq!(s.rejected_values, BTreeSet::from([0, 2, 3]));
        assert_eq!(s.candidate_values, BTreeSet::from([4, 5]));
        assert_eq!(s.status, Status::Running);
    }

    #[test]
    fn multi_valued_seed_rejects_nothing() {
        let c = restaurants();
        let cfg = EpisodeConfig::default();
        let s = Env::new(&c, &cfg).init_with_seed(0, 4);
        assert!(s.rejected_values.is_empty());
        let brute: BTreeSet<_> = (0..c.n_items()).filter(|&v| c.item_values(v).contains(&4)).collect();
        assert_eq!(s.candidate_items, brute);
    }

    #[test]
    fn single_shared_value_fixes_seed() {
        let c = restaurants();
        let cfg = EpisodeConfig::default();
        let env = Env::new(&c, &cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..10 {
            let s = env.init_session(0, &[0, 2], &mut rng).unwrap();
            assert_eq!(s.seed_value, 1);
        }
        assert_eq!(env.init_session(0, &[3, 4], &mut rng), Err(EnvError::NoSharedValue));
    }

    #[test]
    fn simulator_rules() {
        let c = restaurants();
        let cfg = EpisodeConfig::default();
        let env = Env::new(&c, &cfg);
        assert_eq!(env.simulate_user(&Action::Ask(vec![4, 5]), &[0]), UserResponse::Ask { accepted: vec![4], rejected: vec![5] });
        assert_eq!(env.simulate_user(&Action::Rec(vec![2, 0]), &[0]), UserResponse::Rec { hit: true });
        assert_eq!(env.simulate_user(&Action::Ask(vec![3]), &[0]), UserResponse::Ask { accepted: vec![], rejected: vec![3] });
    }

    #[test]
    fn reward_arithmetic() {
        let c = restaurants();
        let cfg = EpisodeConfig::default();
        let env = Env::new(&c, &cfg);
        let s = env.init_with_seed(0, 4);
        let resp = UserResponse::Ask { accepted: vec![1, 2], rejected: vec![3, 4, 5] };
        assert!((env.reward(&resp, &s) - (2.0 * 0.01 - 3.0 * 0.1)).abs() < 1e-12);
        assert_eq!(env.reward(&UserResponse::Rec { hit: true }, &s), 1.0);
        let mut failed = s.clone();
        failed.status = Status::Fail;
        assert!((env.reward(&UserResponse::Rec { hit: false }, &failed) - (-0.1 - 0.3)).abs() < 1e-12);
    }

    #[test]
    fn rec_miss_moves_items_to_rejected() {
        let c = restaurants();
        let cfg = EpisodeConfig::default();
        let env = Env::new(&c, &cfg);
        let s = env.init_with_seed(0, 4);
        let r = env.step(&s, &Action::Rec(vec![3, 1]), &[0]).unwrap();
        assert_eq!(r.next.rejected_items, BTreeSet::from([1, 3]));
        assert!(!r.next.candidate_items.contains(&1) && !r.next.candidate_items.contains(&3));
        assert_eq!(r.next.turn, 1);
    }

    #[test]
    fn hit_freezes_and_forbids_further_steps() {
        let c = restaurants();
        let cfg = EpisodeConfig::default();
        let env = Env::new(&c, &cfg);
        let s = env.init_with_seed(0, 4);
        let r = env.step(&s, &Action::Rec(vec![0]), &[0]).unwrap();
        assert_eq!(r.next.status, Status::Success);
        assert_eq!(r.reward, 1.0);
        assert_eq!(env.step(&r.next, &Action::Rec(vec![1]), &[0]).unwrap_err(), EnvError::Terminal);
    }

    #[test]
    fn failing_at_the_turn_cap() {
        let c = restaurants();
        let cfg = EpisodeConfig { t_max: 2, ..Default::default() };
        let env = Env::new(&c, &cfg);
        let s = env.init_with_seed(0, 4);
        let r1 = env.step(&s, &Action::Rec(vec![3]), &[0]).unwrap();
        assert_eq!(r1.next.status, Status::Running);
        let r2 = env.step(&r1.next, &Action::Rec(vec![1]), &[0]).unwrap();
        assert_eq!(r2.next.status, Status::Fail);
        assert!((r2.reward + 0.4).abs() < 1e-12);
    }

    #[test]
    fn invalid_actions_are_rejected() {
        let c = restaurants();
        let cfg = EpisodeConfig::default();
        let env = Env::new(&c, &cfg);
        let s = env.init_with_seed(0, 1);
        assert!(env.validate_action(&s, &Action::Ask(vec![0])).is_err());
        assert!(env.validate_action(&s, &Action::Rec(vec![4])).is_err());
        assert!(env.validate_action(&s, &Action::Ask(vec![])).is_err());
        let bad = UserResponse::Ask { accepted: vec![4], rejected: vec![] };
        assert!(env.transition(&s, &Action::Ask(vec![4, 5]), &bad).is_err());
    }

    #[test]
    fn returns() {
        assert!((cumulative_return(&[-0.1, 1.0], 0.999, 0) - 0.899).abs() < 1e-12);
        assert_eq!(cumulative_return(&[0.7], 0.5, 0), 0.7);
        let rs = [0.3, -0.1, 0.01, 1.0];
        let tails = tail_returns(&rs, 0.9);
        for (t, &v) in tails.iter().enumerate() {
            assert!((v - cumulative_return(&rs, 0.9, t)).abs() < 1e-12);
        }
    }

    #[test]
    fn trace_starts_with_seed_record() {
        let c = restaurants();
        let cfg = EpisodeConfig::default();
        let s = Env::new(&c, &cfg).init_with_seed(0, 1);
        let rec = TraceRecord::seed(&s);
        assert_eq!((rec.kind.as_str(), rec.payload.clone(), rec.rejected.clone()), ("seed", vec![1], vec![0, 2, 3]));
        assert_eq!(trace_to_jsonl(&[rec]).lines().count(), 1);
    }

    fn brute_candidates(c: &Catalog, s: &ConversationState) -> BTreeSet<ItemId> {
        (0..c.n_items())
            .filter(|&v| {
                let vals = c.item_values(v);
                vals.contains(&s.seed_value)
                    && !s.rejected_items.contains(&v)
                    && vals.iter().any(|p| s.accepted_values.contains(p))
                    && !vals.iter().any(|p| s.rejected_values.contains(p))
            })
            .collect()
    }

    proptest! {
        #[test]
        fn random_episodes_keep_invariants(seed in 0u64..5000, n_types in 1usize..4, per_type in 2usize..4) {
            let spec = crate::catalog::SyntheticSpec {
                n_users: 3, n_items: 20, n_types, n_values_per_type: per_type,
                values_per_item: n_types, interactions_per_user: 3, seed,
            };
            let c = crate::catalog::generate_synthetic(&spec).unwrap();
            let cfg = EpisodeConfig::default();
            let env = Env::new(&c, &cfg);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let targets = c.user_items(0).to_vec();
            let mut s = env.init_session(0, &targets, &mut rng).unwrap();
            prop_assert_eq!(&s.candidate_items, &brute_candidates(&c, &s));
            while !s.is_terminal() {
                let ask = s.is_available(ActionKind::Ask) && rng.gen_bool(0.5);
                let action = if ask {
                    let first = *s.candidate_values.iter().nth(rng.gen_range(0..s.candidate_values.len())).unwrap();
                    let y = c.value_type(first);
                    let mut vals = vec![first];
                    vals.extend(s.candidate_values.iter().copied().filter(|&p| p != first && c.value_type(p) == y).take(cfg.k_p - 1));
                    Action::Ask(vals)
                } else {
                    let mut items: Vec<_> = s.candidate_items.iter().copied().filter(|v| !targets.contains(v)).collect();
                    if items.is_empty() || rng.gen_bool(0.1) {
                        items = s.candidate_items.iter().copied().collect();
                    }
                    items.truncate(rng.gen_range(1..=cfg.k_v));
                    Action::Rec(items)
                };
                let r = env.step(&s, &action, &targets).unwrap();
                let lo = cfg.k_p as f64 * cfg.rewards.ask_reject + cfg.rewards.quit;
                prop_assert!(r.reward >= lo - 1e-12 && r.reward <= cfg.rewards.rec_accept + 1e-12);
                prop_assert!(r.next.candidate_items.is_subset(&s.candidate_items));
                prop_assert!(s.rejected_values.is_subset(&r.next.rejected_values));
                prop_assert!(s.rejected_items.is_subset(&r.next.rejected_items));
                prop_assert_eq!(r.next.turn, s.turn + 1);
                prop_assert!(r.next.turn <= cfg.t_max);
                if r.next.status != Status::Success {
                    prop_assert_eq!(&r.next.candidate_items, &brute_candidates(&c, &r.next));
                    for v in &targets {
                        prop_assert!(r.next.candidate_items.contains(v));
                    }
                }
                prop_assert!(r.next.accepted_values.is_disjoint(&r.next.rejected_values));
                prop_assert!(r.next.candidate_values.is_disjoint(&r.next.rejected_values));
                prop_assert!(r.next.candidate_values.is_disjoint(&r.next.accepted_values));
                s = r.next;
            }
        }
    }
}
