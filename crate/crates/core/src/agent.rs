//! Hierarchical decision maker: a policy over action types and a dueling
//! Q-network over concrete values/items, sharing one state encoder.

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{Catalog, EntityIndex, GlobalGraph, ItemId, ValueId};
use crate::encoder::{Encoder, EncoderConfig, GatPlan, LEAKY_SLOPE};
use crate::env::{Action, ActionKind, ConversationState, EpisodeConfig};
use crate::params::{glorot, ParamId, ParamSet};
use crate::tape::{Tape, Var};
use crate::tensor::Matrix;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AgentError {
    #[error("both action types are masked")]
    NoAction,
    #[error("candidate {0} is outside the sub action space")]
    NotACandidate(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectMode {
    Greedy,
    Sampled,
}

#[derive(Clone, Debug)]
struct Mlp {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

/// Parameter handles for encoder, policy and dueling Q-network.
#[derive(Clone, Debug)]
pub struct Agent {
    pub encoder: Encoder,
    policy: Mlp,
    adv_ws: ParamId,
    adv_wa: ParamId,
    adv_b1: ParamId,
    adv_w2: ParamId,
    adv_b2: ParamId,
    value: Mlp,
}

impl Agent {
    pub fn register(
        params: &mut ParamSet,
        config: &EncoderConfig,
        index: EntityIndex,
        max_positions: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let encoder = Encoder::register(params, config, index, max_positions, rng);
        let d = config.d;
        let policy = Mlp {
            w1: params.insert("policy.w1", glorot(rng, d, d)),
            b1: params.insert("policy.b1", Matrix::zeros(1, d)),
            w2: params.insert("policy.w2", glorot(rng, d, 2)),
            b2: params.insert("policy.b2", Matrix::zeros(1, 2)),
        };
        // the advantage input is `s ‖ a`; its first layer is stored as the two row blocks
        let bound = (6.0 / (3 * d) as f64).sqrt();
        let adv_ws = params.insert("q.adv.ws", crate::params::uniform(rng, d, d, bound));
        let adv_wa = params.insert("q.adv.wa", crate::params::uniform(rng, d, d, bound));
        let adv_b1 = params.insert("q.adv.b1", Matrix::zeros(1, d));
        let adv_w2 = params.insert("q.adv.w2", glorot(rng, d, 1));
        let adv_b2 = params.insert("q.adv.b2", Matrix::zeros(1, 1));
        let value = Mlp {
            w1: params.insert("q.val.w1", glorot(rng, d, d)),
            b1: params.insert("q.val.b1", Matrix::zeros(1, d)),
            w2: params.insert("q.val.w2", glorot(rng, d, 1)),
            b2: params.insert("q.val.b2", Matrix::zeros(1, 1)),
        };
        Self { encoder, policy, adv_ws, adv_wa, adv_b1, adv_w2, adv_b2, value }
    }

    /// Re-derives handles for a parameter set produced by [`Agent::register`].
    pub fn from_layout(params: &ParamSet, config: &EncoderConfig, index: EntityIndex, max_positions: usize) -> Self {
        let mut scratch = ParamSet::default();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let agent = Agent::register(&mut scratch, config, index, max_positions, &mut rng);
        assert!(scratch.same_layout(params), "parameter layout does not match the model configuration");
        agent
    }

    fn mlp(&self, tape: &mut Tape, x: Var, m: &Mlp) -> Var {
        let (w1, b1, w2, b2) = (tape.param(m.w1), tape.param(m.b1), tape.param(m.w2), tape.param(m.b2));
        let h = tape.matmul(x, w1);
        let h = tape.add_row(h, b1);
        let h = tape.leaky_relu(h, LEAKY_SLOPE);
        let o = tape.matmul(h, w2);
        tape.add_row(o, b2)
    }

    /// `MLP_π(s)`, a `1 x 2` row of `[ask, rec]` logits.
    pub fn policy_logits(&self, tape: &mut Tape, s: Var) -> Var {
        self.mlp(tape, s, &self.policy)
    }

    /// `MLP_A(s ‖ a) + MLP_V(s)` for every candidate row of the embedding table (`n x 1`).
    pub fn q_values(&self, tape: &mut Tape, s: Var, rows: Vec<usize>) -> Var {
        let emb = tape.param(self.encoder.emb);
        let a = tape.gather_rows(emb, rows);
        let (ws, wa, b1, w2, b2) =
            (tape.param(self.adv_ws), tape.param(self.adv_wa), tape.param(self.adv_b1), tape.param(self.adv_w2), tape.param(self.adv_b2));
        let hs = tape.matmul(s, ws);
        let hs = tape.add(hs, b1);
        let ha = tape.matmul(a, wa);
        let h = tape.add_row(ha, hs);
        let h = tape.leaky_relu(h, LEAKY_SLOPE);
        let adv = tape.matmul(h, w2);
        let adv = tape.add_row(adv, b2);
        let v = self.mlp(tape, s, &self.value);
        tape.add_row(adv, v)
    }

    /// Embedding-table rows of the sub action space `A_{s,o}`, ascending by id.
    pub fn action_rows(&self, state: &ConversationState, kind: ActionKind) -> (Vec<usize>, Vec<usize>) {
        let ix = self.encoder.index;
        match kind {
            ActionKind::Ask => {
                let ids: Vec<usize> = state.candidate_values.iter().copied().collect();
                (ids.iter().map(|&p| ix.value(p)).collect(), ids)
            }
            ActionKind::Rec => {
                let ids: Vec<usize> = state.candidate_items.iter().copied().collect();
                (ids.iter().map(|&v| ix.item(v)).collect(), ids)
            }
        }
    }
}

/// The global graph plus its attention plan, shared read-only by all workers.
#[derive(Clone, Debug)]
pub struct GraphContext {
    pub graph: GlobalGraph,
    pub plan: GatPlan,
}

impl GraphContext {
    pub fn new(catalog: &Catalog) -> Self {
        let graph = crate::catalog::build_global_graph(catalog);
        let plan = GatPlan::new(&graph);
        Self { graph, plan }
    }
}

/// Read-only inference view: one parameter snapshot with its global encoder output cached.
pub struct Inference<'a> {
    pub agent: &'a Agent,
    pub params: &'a ParamSet,
    pub catalog: &'a Catalog,
    pub episode: &'a EpisodeConfig,
    pub global: Matrix,
}

impl<'a> Inference<'a> {
    pub fn new(agent: &'a Agent, params: &'a ParamSet, catalog: &'a Catalog, episode: &'a EpisodeConfig, ctx: &GraphContext) -> Self {
        let global = agent.encoder.global_vectors(params, &ctx.plan);
        Self { agent, params, catalog, episode, global }
    }

    /// Encodes the state and scores both sub action spaces.
    pub fn evaluate(&self, state: &ConversationState) -> StateEval {
        let mut tape = Tape::new(self.params);
        let g = tape.input_ref(&self.global);
        let s = self.agent.encoder.encode_state(&mut tape, g, state, self.catalog);
        let logits = self.agent.policy_logits(&mut tape, s);
        let l = tape.value(logits).row(0).to_vec();
        let raw = softmax2(l[0], l[1]);
        let mut scored: [Vec<(usize, f64)>; 2] = [Vec::new(), Vec::new()];
        for kind in ActionKind::ALL {
            let (rows, ids) = self.agent.action_rows(state, kind);
            if rows.is_empty() {
                continue;
            }
            let q = self.agent.q_values(&mut tape, s, rows);
            scored[kind.index()] = ids.into_iter().zip(tape.value(q).data().iter().copied()).collect();
        }
        let available = state.available();
        let [values, items] = scored;
        StateEval { s: tape.value(s).clone(), raw_probs: raw, probs: mask_probs(raw, available), available, value_q: values, item_q: items }
    }

    pub fn select_action(&self, state: &ConversationState, mode: SelectMode, rng: &mut impl Rng) -> Result<Action, AgentError> {
        self.evaluate(state).select(mode, rng, self.catalog, self.episode)
    }
}

/// Everything the agent computes for one state.
#[derive(Clone, Debug)]
pub struct StateEval {
    pub s: Matrix,
    /// Unmasked `softmax(MLP_π(s))`.
    pub raw_probs: [f64; 2],
    /// Probabilities renormalized over available action types.
    pub probs: [f64; 2],
    pub available: [bool; 2],
    /// `(value id, Q)` ascending by id.
    pub value_q: Vec<(ValueId, f64)>,
    /// `(item id, Q)` ascending by id.
    pub item_q: Vec<(ItemId, f64)>,
}

impl StateEval {
    pub fn scored(&self, kind: ActionKind) -> &[(usize, f64)] {
        match kind {
            ActionKind::Ask => &self.value_q,
            ActionKind::Rec => &self.item_q,
        }
    }

    /// `max_{a ∈ A_{s,o}} Q(a | s, o)`, or `None` when the type is masked.
    pub fn max_q(&self, kind: ActionKind) -> Option<f64> {
        if !self.available[kind.index()] {
            return None;
        }
        self.scored(kind).iter().map(|x| x.1).fold(None, |m, q| Some(m.map_or(q, |m: f64| m.max(q))))
    }

    /// Argmax of the masked policy; ties go to ask.
    pub fn greedy_kind(&self) -> Result<ActionKind, AgentError> {
        match self.available {
            [false, false] => Err(AgentError::NoAction),
            [true, false] => Ok(ActionKind::Ask),
            [false, true] => Ok(ActionKind::Rec),
            [true, true] => Ok(if self.probs[0] >= self.probs[1] { ActionKind::Ask } else { ActionKind::Rec }),
        }
    }

    pub fn sample_kind(&self, rng: &mut impl Rng) -> Result<ActionKind, AgentError> {
        if self.available == [false, false] {
            return Err(AgentError::NoAction);
        }
        let u: f64 = rng.gen();
        Ok(if u < self.probs[0] { ActionKind::Ask } else { ActionKind::Rec })
    }

    /// The greedy concrete action for a given action type.
    pub fn compose(&self, kind: ActionKind, catalog: &Catalog, episode: &EpisodeConfig) -> Option<Action> {
        if !self.available[kind.index()] {
            return None;
        }
        Some(match kind {
            ActionKind::Ask => compose_question(&self.value_q, catalog, episode.k_p),
            ActionKind::Rec => compose_recommendation(&self.item_q, episode.k_v),
        })
    }

    pub fn select(&self, mode: SelectMode, rng: &mut impl Rng, catalog: &Catalog, episode: &EpisodeConfig) -> Result<Action, AgentError> {
        let kind = match mode {
            SelectMode::Greedy => self.greedy_kind()?,
            SelectMode::Sampled => self.sample_kind(rng)?,
        };
        Ok(self.compose(kind, catalog, episode).expect("selected kind is available"))
    }
}

/// Descending by Q, ties by ascending id.
fn rank(scored: &[(usize, f64)]) -> Vec<(usize, f64)> {
    let mut v = scored.to_vec();
    v.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    v
}

/// Argmax value fixes the attribute type; the question is filled with the
/// best-scoring values of that type, up to `k_p`.
pub fn compose_question(scored: &[(ValueId, f64)], catalog: &Catalog, k_p: usize) -> Action {
    let ranked = rank(scored);
    let y = catalog.value_type(ranked[0].0);
    Action::Ask(ranked.iter().filter(|(p, _)| catalog.value_type(*p) == y).take(k_p).map(|x| x.0).collect())
}

/// Top-`k_v` items by descending Q.
pub fn compose_recommendation(scored: &[(ItemId, f64)], k_v: usize) -> Action {
    Action::Rec(rank(scored).into_iter().take(k_v).map(|x| x.0).collect())
}

pub fn softmax2(a: f64, b: f64) -> [f64; 2] {
    let m = a.max(b);
    let (ea, eb) = ((a - m).exp(), (b - m).exp());
    [ea / (ea + eb), eb / (ea + eb)]
}

pub fn mask_probs(raw: [f64; 2], available: [bool; 2]) -> [f64; 2] {
    match available {
        [true, true] => raw,
        [true, false] => [1.0, 0.0],
        [false, true] => [0.0, 1.0],
        [false, false] => [0.0, 0.0],
    }
}

/// Copies every online parameter into the target snapshot.
pub fn sync_target(online: &ParamSet, target: &mut ParamSet) {
    target.copy_from(online);
}
