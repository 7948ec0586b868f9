//! State encoder.
//!
//! Three graph encoders feed a sequence aggregator:
//! - a multi-head graph attention stack over the global user–item–value graph,
//! - GCN stacks over the per-turn positive and negative feedback graphs,
//! - a gated fusion of both views for every mentioned value/item, followed by
//!   a small post-LN transformer and mean pooling into `s_t`.
//!
//! Everything is expressed as [`Tape`] operations so gradients reach every
//! parameter and embedding row.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::catalog::{Catalog, Entity, EntityIndex, GlobalGraph, ItemId, ValueId};
use crate::env::ConversationState;
use crate::params::{glorot, uniform, ParamId, ParamSet};
use crate::tape::{Tape, Var};
use crate::tensor::{self, Matrix};

pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub d: usize,
    pub heads: usize,
    pub gat_layers: usize,
    pub pos_layers: usize,
    pub neg_layers: usize,
    pub seq_layers: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { d: 64, heads: 4, gat_layers: 2, pos_layers: 1, neg_layers: 1, seq_layers: 2 }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.d == 0 || self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return Err(format!("heads ({}) must divide d ({})", self.heads, self.d));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct GatLayer {
    w1: ParamId,
    w2: ParamId,
    a: ParamId,
}

#[derive(Clone, Debug)]
struct SeqLayer {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    ln1_g: ParamId,
    ln1_b: ParamId,
    ff_w1: ParamId,
    ff_b1: ParamId,
    ff_w2: ParamId,
    ff_b2: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
}

/// Parameter handles of the encoder inside a shared [`ParamSet`].
#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub index: EntityIndex,
    pub max_positions: usize,
    pub emb: ParamId,
    gat: Vec<GatLayer>,
    gcn_pos: Vec<ParamId>,
    gcn_neg: Vec<ParamId>,
    proj_a: ParamId,
    bias_a: ParamId,
    proj_n: ParamId,
    bias_n: ParamId,
    gate_w1: ParamId,
    gate_w2: ParamId,
    gate_b: ParamId,
    positions: ParamId,
    seq: Vec<SeqLayer>,
}

impl Encoder {
    /// Registers freshly initialized encoder parameters.
    pub fn register(
        params: &mut ParamSet,
        config: &EncoderConfig,
        index: EntityIndex,
        max_positions: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let d = config.d;
        let emb_bound = 1.0 / (d as f64).sqrt();
        let emb = params.insert("enc.emb", uniform(rng, index.total(), d, emb_bound));
        let gat = (0..config.gat_layers)
            .map(|l| GatLayer {
                w1: params.insert(format!("enc.gat.{l}.w1"), glorot(rng, d, d)),
                w2: params.insert(format!("enc.gat.{l}.w2"), glorot(rng, d, d)),
                a: params.insert(format!("enc.gat.{l}.a"), glorot(rng, 1, d)),
            })
            .collect();
        let gcn_pos = (0..config.pos_layers).map(|l| params.insert(format!("enc.gcn_pos.{l}.w"), glorot(rng, d, d))).collect();
        let gcn_neg = (0..config.neg_layers).map(|l| params.insert(format!("enc.gcn_neg.{l}.w"), glorot(rng, d, d))).collect();
        let proj_a = params.insert("enc.agg.wa", glorot(rng, d, d));
        let bias_a = params.insert("enc.agg.ba", Matrix::zeros(1, d));
        let proj_n = params.insert("enc.agg.wn", glorot(rng, d, d));
        let bias_n = params.insert("enc.agg.bn", Matrix::zeros(1, d));
        let gate_w1 = params.insert("enc.gate.w1", glorot(rng, d, d));
        let gate_w2 = params.insert("enc.gate.w2", glorot(rng, d, d));
        let gate_b = params.insert("enc.gate.b", Matrix::zeros(1, d));
        let positions = params.insert("enc.seq.positions", uniform(rng, max_positions, d, emb_bound));
        let seq = (0..config.seq_layers)
            .map(|l| SeqLayer {
                wq: params.insert(format!("enc.seq.{l}.wq"), glorot(rng, d, d)),
                wk: params.insert(format!("enc.seq.{l}.wk"), glorot(rng, d, d)),
                wv: params.insert(format!("enc.seq.{l}.wv"), glorot(rng, d, d)),
                wo: params.insert(format!("enc.seq.{l}.wo"), glorot(rng, d, d)),
                ln1_g: params.insert(format!("enc.seq.{l}.ln1.g"), Matrix::filled(1, d, 1.0)),
                ln1_b: params.insert(format!("enc.seq.{l}.ln1.b"), Matrix::zeros(1, d)),
                ff_w1: params.insert(format!("enc.seq.{l}.ff.w1"), glorot(rng, d, d)),
                ff_b1: params.insert(format!("enc.seq.{l}.ff.b1"), Matrix::zeros(1, d)),
                ff_w2: params.insert(format!("enc.seq.{l}.ff.w2"), glorot(rng, d, d)),
                ff_b2: params.insert(format!("enc.seq.{l}.ff.b2"), Matrix::zeros(1, d)),
                ln2_g: params.insert(format!("enc.seq.{l}.ln2.g"), Matrix::filled(1, d, 1.0)),
                ln2_b: params.insert(format!("enc.seq.{l}.ln2.b"), Matrix::zeros(1, d)),
            })
            .collect();
        Self {
            config: config.clone(),
            index,
            max_positions,
            emb,
            gat,
            gcn_pos,
            gcn_neg,
            proj_a,
            bias_a,
            proj_n,
            bias_n,
            gate_w1,
            gate_w2,
            gate_b,
            positions,
            seq,
        }
    }

    /// Global graph attention stack; returns one row per entity.
    pub fn encode_global(&self, tape: &mut Tape, plan: &GatPlan) -> Var {
        let mut h = tape.param(self.emb);
        for layer in &self.gat {
            h = self.gat_layer(tape, plan, h, layer);
        }
        h
    }

    /// Forward-only global pass.
    pub fn global_vectors(&self, params: &ParamSet, plan: &GatPlan) -> Matrix {
        let mut tape = Tape::new(params);
        let g = self.encode_global(&mut tape, plan);
        tape.value(g).clone()
    }

    fn gat_layer(&self, tape: &mut Tape, plan: &GatPlan, h: Var, layer: &GatLayer) -> Var {
        let heads = self.config.heads;
        let (w1, w2, a) = (tape.param(layer.w1), tape.param(layer.w2), tape.param(layer.a));
        let p1 = tape.matmul(h, w1);
        let p2 = tape.matmul(h, w2);
        let e1 = tape.gather_rows(p1, plan.dst.clone());
        let e2 = tape.gather_rows(p2, plan.src.clone());
        let pre = tape.add(e1, e2);
        let act = tape.leaky_relu(pre, LEAKY_SLOPE);
        let logits = tape.head_dot(act, a, heads);
        let alpha = tape.segment_softmax(logits, plan.seg.clone(), plan.n_seg);
        let msg = tape.head_scale(e2, alpha, heads);
        let z = tape.scatter_add_rows(msg, plan.seg.clone(), plan.n_seg);
        let wcol = tape.input(Matrix::column(plan.seg_weight.clone()));
        let zw = tape.mul_col(z, wcol);
        let nodes = tape.scatter_add_rows(zw, plan.seg_node.clone(), plan.n_nodes);
        let mask = tape.input(Matrix::column(plan.isolated.clone()));
        let pass = tape.mul_col(h, mask);
        let sum = tape.add(nodes, pass);
        tape.leaky_relu(sum, LEAKY_SLOPE)
    }

    /// Matching scores `w_v` of `items` as an `n x 1` column.
    fn scores(&self, tape: &mut Tape, emb: Var, state: &ConversationState, items: &[ItemId]) -> Var {
        let ix = self.index;
        let user = tape.gather_rows(emb, vec![ix.user(state.user)]);
        let pos = tape.gather_rows(emb, state.accepted_values.iter().map(|&p| ix.value(p)).collect());
        let pos = tape.sum_rows(pos);
        let mut query = tape.add(user, pos);
        if !state.rejected_values.is_empty() {
            let neg = tape.gather_rows(emb, state.rejected_values.iter().map(|&p| ix.value(p)).collect());
            let neg = tape.sum_rows(neg);
            query = tape.sub(query, neg);
        }
        let rows = tape.gather_rows(emb, items.iter().map(|&v| ix.item(v)).collect());
        let logits = tape.matmul_nt(rows, query);
        tape.sigmoid(logits)
    }

    fn gcn(&self, tape: &mut Tape, emb: Var, graph: &FeedbackGraph, scores: Var, layers: &[ParamId]) -> Var {
        let n = graph.nodes.len();
        let score_part = tape.gather_rows(scores, graph.score_edges.iter().map(|e| e.2).collect());
        let unit_part = tape.input(Matrix::filled(graph.unit_edges.len(), 1, 1.0));
        let base = tape.concat_rows(vec![score_part, unit_part]);
        let (dst, src, und) = graph.directed();
        let w = tape.gather_rows(base, und);
        let deg = tape.scatter_add_rows(w, dst.clone(), n);
        let dd = tape.gather_rows(deg, dst.clone());
        let ds = tape.gather_rows(deg, src.clone());
        let prod = tape.mul(dd, ds);
        let coef = tape.pow(prod, -0.5);
        let rows = graph.nodes.iter().map(|&e| self.index.row(e)).collect();
        let mut x = tape.gather_rows(emb, rows);
        for &wid in layers {
            let wm = tape.param(wid);
            let xw = tape.matmul(x, wm);
            let msg = tape.gather_rows(xw, src.clone());
            let msg = tape.mul_col(msg, coef);
            let agg = tape.scatter_add_rows(msg, dst.clone(), n);
            let sum = tape.add(agg, x);
            x = tape.leaky_relu(sum, LEAKY_SLOPE);
        }
        x
    }

    /// Feedback-graph GCN outputs for both polarities, one row per graph node.
    pub fn encode_feedback(&self, tape: &mut Tape, state: &ConversationState, graphs: &FeedbackGraphs) -> (Var, Var) {
        let emb = tape.param(self.emb);
        let scores = self.scores(tape, emb, state, &graphs.scored_items);
        let pos = self.gcn(tape, emb, &graphs.positive, scores, &self.gcn_pos);
        let neg = self.gcn(tape, emb, &graphs.negative, scores, &self.gcn_neg);
        (pos, neg)
    }

    /// `gate(x, y) = ξ ⊙ x + (1 − ξ) ⊙ y` row-wise.
    pub fn gate(&self, tape: &mut Tape, x: Var, y: Var) -> Var {
        let (w1, w2, b) = (tape.param(self.gate_w1), tape.param(self.gate_w2), tape.param(self.gate_b));
        let xa = tape.matmul(x, w1);
        let ya = tape.matmul(y, w2);
        let pre = tape.add(xa, ya);
        let pre = tape.add_row(pre, b);
        let xi = tape.sigmoid(pre);
        let diff = tape.sub(x, y);
        let mix = tape.mul(xi, diff);
        tape.add(y, mix)
    }

    /// Fused token sequence for the conversation history, ordered by mention.
    pub fn tokens(&self, tape: &mut Tape, global: Var, state: &ConversationState, graphs: &FeedbackGraphs, pos: Var, neg: Var) -> Var {
        let mut pos_rows = Vec::new();
        let mut neg_rows = Vec::new();
        let mut order = Vec::with_capacity(state.history.len());
        for m in &state.history {
            if m.accepted {
                order.push((true, pos_rows.len()));
                pos_rows.push(graphs.positive.local(m.entity).expect("accepted entity in positive graph"));
            } else {
                order.push((false, neg_rows.len()));
                neg_rows.push(graphs.negative.local(m.entity).expect("rejected entity in negative graph"));
            }
        }
        let n_pos = pos_rows.len();
        let (wa, ba, wn, bn) = (tape.param(self.proj_a), tape.param(self.bias_a), tape.param(self.proj_n), tape.param(self.bias_n));
        let yp = tape.gather_rows(pos, pos_rows);
        let yp = tape.matmul(yp, wa);
        let yp = tape.add_row(yp, ba);
        let yn = tape.gather_rows(neg, neg_rows);
        let yn = tape.matmul(yn, wn);
        let yn = tape.add_row(yn, bn);
        let y_all = tape.concat_rows(vec![yp, yn]);
        let perm = order.iter().map(|&(p, i)| if p { i } else { n_pos + i }).collect();
        let y = tape.gather_rows(y_all, perm);
        let x = tape.gather_rows(global, state.history.iter().map(|m| self.index.row(m.entity)).collect());
        self.gate(tape, x, y)
    }

    /// Positional embeddings, transformer layers and mean pooling.
    pub fn aggregate(&self, tape: &mut Tape, tokens: Var, turns: &[usize]) -> Var {
        let positions = tape.param(self.positions);
        let idx = turns.iter().map(|&t| t.min(self.max_positions - 1)).collect();
        let pe = tape.gather_rows(positions, idx);
        let mut x = tape.add(tokens, pe);
        for layer in &self.seq {
            x = self.seq_layer(tape, x, layer);
        }
        tape.mean_rows(x)
    }

    fn seq_layer(&self, tape: &mut Tape, x: Var, l: &SeqLayer) -> Var {
        let d = self.config.d;
        let heads = self.config.heads;
        let dh = d / heads;
        let (wq, wk, wv, wo) = (tape.param(l.wq), tape.param(l.wk), tape.param(l.wv), tape.param(l.wo));
        let q = tape.matmul(x, wq);
        let k = tape.matmul(x, wk);
        let v = tape.matmul(x, wv);
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = tape.slice_cols(q, h * dh, dh);
            let kh = tape.slice_cols(k, h * dh, dh);
            let vh = tape.slice_cols(v, h * dh, dh);
            let s = tape.matmul_nt(qh, kh);
            let s = tape.scale(s, 1.0 / (dh as f64).sqrt());
            let a = tape.softmax_rows(s);
            outs.push(tape.matmul(a, vh));
        }
        let cat = if heads == 1 { outs[0] } else { tape.concat_cols(outs) };
        let attn = tape.matmul(cat, wo);
        let res = tape.add(x, attn);
        let (g1, b1) = (tape.param(l.ln1_g), tape.param(l.ln1_b));
        let x1 = tape.layer_norm(res, g1, b1);
        let (fw1, fb1, fw2, fb2) = (tape.param(l.ff_w1), tape.param(l.ff_b1), tape.param(l.ff_w2), tape.param(l.ff_b2));
        let f = tape.matmul(x1, fw1);
        let f = tape.add_row(f, fb1);
        let f = tape.leaky_relu(f, 0.0);
        let f = tape.matmul(f, fw2);
        let f = tape.add_row(f, fb2);
        let res2 = tape.add(x1, f);
        let (g2, b2) = (tape.param(l.ln2_g), tape.param(l.ln2_b));
        tape.layer_norm(res2, g2, b2)
    }

    /// Full state representation `s_t` (`1 x d`) given the global encoder output.
    pub fn encode_state(&self, tape: &mut Tape, global: Var, state: &ConversationState, catalog: &Catalog) -> Var {
        let graphs = build_feedback_graphs(state, catalog);
        let (pos, neg) = self.encode_feedback(tape, state, &graphs);
        let tokens = self.tokens(tape, global, state, &graphs, pos, neg);
        let turns: Vec<usize> = state.history.iter().map(|m| m.turn).collect();
        self.aggregate(tape, tokens, &turns)
    }
}

/// Precomputed index arrays for graph attention over a [`GlobalGraph`].
///
/// Every directed edge `src → dst` belongs to a segment identified by the
/// destination node and the neighbor class (users or values for items).
#[derive(Clone, Debug)]
pub struct GatPlan {
    pub n_nodes: usize,
    pub dst: Vec<usize>,
    pub src: Vec<usize>,
    pub seg: Vec<usize>,
    pub n_seg: usize,
    pub seg_node: Vec<usize>,
    pub seg_weight: Vec<f64>,
    pub isolated: Vec<f64>,
}

impl GatPlan {
    pub fn new(graph: &GlobalGraph) -> Self {
        let ix = graph.index;
        let n = ix.total();
        // (dst, side, src); side 0 = user/value node's item side, 1 = item's user side, 2 = item's value side
        let mut edges: Vec<(usize, u8, usize)> = Vec::new();
        for &(u, v) in &graph.user_item_edges {
            edges.push((ix.user(u), 0, ix.item(v)));
            edges.push((ix.item(v), 1, ix.user(u)));
        }
        for &(p, v) in &graph.value_item_edges {
            edges.push((ix.value(p), 0, ix.item(v)));
            edges.push((ix.item(v), 2, ix.value(p)));
        }
        edges.sort_unstable();
        let mut dst = Vec::with_capacity(edges.len());
        let mut src = Vec::with_capacity(edges.len());
        let mut seg = Vec::with_capacity(edges.len());
        let mut seg_node = Vec::new();
        let mut seg_side = Vec::new();
        for &(d, side, s) in &edges {
            if seg_node.last() != Some(&d) || seg_side.last() != Some(&side) {
                seg_node.push(d);
                seg_side.push(side);
            }
            dst.push(d);
            src.push(s);
            seg.push(seg_node.len() - 1);
        }
        let mut sides = vec![0usize; n];
        for &d in &seg_node {
            sides[d] += 1;
        }
        let seg_weight = seg_node.iter().map(|&d| 1.0 / sides[d] as f64).collect();
        let isolated = sides.iter().map(|&s| if s == 0 { 1.0 } else { 0.0 }).collect();
        Self { n_nodes: n, dst, src, n_seg: seg_node.len(), seg, seg_node, seg_weight, isolated }
    }

    /// Edges grouped by segment: `(dst, [src...])`.
    pub fn neighborhoods(&self) -> Vec<(usize, Vec<usize>)> {
        let mut out: Vec<(usize, Vec<usize>)> = self.seg_node.iter().map(|&d| (d, Vec::new())).collect();
        for (e, &s) in self.seg.iter().enumerate() {
            out[s].1.push(self.src[e]);
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Polarity {
    Positive,
    Negative,
}

/// A local feedback graph. Nodes are listed once; edges are undirected.
#[derive(Clone, Debug, PartialEq)]
pub struct FeedbackGraph {
    pub polarity: Polarity,
    pub nodes: Vec<Entity>,
    /// `(a, b, k)`: user–item edge weighted by the `k`-th matching score.
    pub score_edges: Vec<(usize, usize, usize)>,
    /// Unit-weight edges.
    pub unit_edges: Vec<(usize, usize)>,
}

impl FeedbackGraph {
    pub fn local(&self, e: Entity) -> Option<usize> {
        self.nodes.binary_search(&e).ok()
    }

    /// Directed `(dst, src, undirected index)` arrays, score edges first.
    fn directed(&self) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
        let n = 2 * (self.score_edges.len() + self.unit_edges.len());
        let (mut dst, mut src, mut und) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
        let pairs = self.score_edges.iter().map(|e| (e.0, e.1)).chain(self.unit_edges.iter().copied());
        for (k, (a, b)) in pairs.enumerate() {
            dst.extend([a, b]);
            src.extend([b, a]);
            und.extend([k, k]);
        }
        (dst, src, und)
    }

    /// Numeric edge weight lookup `E(i, j)` given matching scores.
    pub fn weight(&self, i: usize, j: usize, scores: &[f64]) -> f64 {
        for &(a, b, k) in &self.score_edges {
            if (a, b) == (i, j) || (b, a) == (i, j) {
                return scores[k];
            }
        }
        if self.unit_edges.iter().any(|&(a, b)| (a, b) == (i, j) || (b, a) == (i, j)) {
            1.0
        } else {
            0.0
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeedbackGraphs {
    /// Items with a matching score, ascending; score edges index into this list.
    pub scored_items: Vec<ItemId>,
    pub positive: FeedbackGraph,
    pub negative: FeedbackGraph,
}

/// Builds the positive graph over `{u} ∪ P+ ∪ P^c ∪ V^c` and the negative
/// graph over `{u} ∪ P− ∪ V− ∪ P^c ∪ V^c`.
pub fn build_feedback_graphs(state: &ConversationState, catalog: &Catalog) -> FeedbackGraphs {
    let mut scored_items: Vec<ItemId> = state.candidate_items.iter().chain(&state.rejected_items).copied().collect();
    scored_items.sort_unstable();
    scored_items.dedup();
    let score_idx = |v: ItemId| scored_items.binary_search(&v).expect("scored item");

    let build = |polarity: Polarity| {
        let (fb_values, extra_items): (Vec<ValueId>, Vec<ItemId>) = match polarity {
            Polarity::Positive => (state.accepted_values.iter().copied().collect(), Vec::new()),
            Polarity::Negative => (state.rejected_values.iter().copied().collect(), state.rejected_items.iter().copied().collect()),
        };
        let mut nodes = vec![Entity::User(state.user)];
        nodes.extend(fb_values.iter().chain(&state.candidate_values).map(|&p| Entity::Value(p)));
        nodes.extend(extra_items.iter().chain(&state.candidate_items).map(|&v| Entity::Item(v)));
        nodes.sort_unstable();
        nodes.dedup();
        let local = |e: Entity| nodes.binary_search(&e).expect("node present");
        let mut score_edges = Vec::new();
        let mut unit_edges = Vec::new();
        for &e in &nodes {
            if let Entity::Item(v) = e {
                score_edges.push((0, local(e), score_idx(v)));
                for &p in catalog.item_values(v) {
                    if let Ok(j) = nodes.binary_search(&Entity::Value(p)) {
                        unit_edges.push((local(e), j));
                    }
                }
            }
        }
        for &p in &fb_values {
            unit_edges.push((0, local(Entity::Value(p))));
        }
        FeedbackGraph { polarity, nodes, score_edges, unit_edges }
    };
    let positive = build(Polarity::Positive);
    let negative = build(Polarity::Negative);
    FeedbackGraphs { scored_items, positive, negative }
}

/// `sigmoid(e_u·e_v + Σ_{P+} e_v·e_p − Σ_{P−} e_v·e_p)` from a raw embedding table.
pub fn matching_score(emb: &Matrix, index: EntityIndex, state: &ConversationState, item: ItemId) -> f64 {
    let ev = emb.row(index.item(item));
    let mut logit = tensor::dot(emb.row(index.user(state.user)), ev);
    for &p in &state.accepted_values {
        logit += tensor::dot(ev, emb.row(index.value(p)));
    }
    for &p in &state.rejected_values {
        logit -= tensor::dot(ev, emb.row(index.value(p)));
    }
    tensor::sigmoid(logit)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::catalog::build_global_graph;
    use crate::env::{Action, Env, EpisodeConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn toy_catalog() -> Catalog {
        Catalog::new(
            vec!["a".into(), "b".into()],
            vec!["a0".into(), "a1".into(), "b0".into(), "b1".into()],
            vec![0, 0, 1, 1],
            vec![vec![0, 2], vec![0, 3], vec![1, 2], vec![0, 2, 3]],
            vec![vec![0, 1], vec![3]],
        )
        .unwrap()
    }

    fn small_config() -> EncoderConfig {
        EncoderConfig { d: 4, heads: 2, gat_layers: 2, pos_layers: 1, neg_layers: 1, seq_layers: 2 }
    }

    /// A mid-episode state with accepted/rejected values and rejected items.
    pub(crate) fn toy_state(c: &Catalog) -> ConversationState {
        let cfg = EpisodeConfig::default();
        let env = Env::new(c, &cfg);
        let s = env.init_with_seed(0, 0);
        let s = env.step(&s, &Action::Ask(vec![2]), &[3]).unwrap().next;
        env.step(&s, &Action::Rec(vec![0]), &[3]).unwrap().next
    }

    fn dense_gat_layer(h: &Matrix, w1: &Matrix, w2: &Matrix, a: &Matrix, heads: usize, neigh: &[Vec<Vec<usize>>]) -> Matrix {
        let (n, d) = h.shape();
        let dh = d / heads;
        let p1 = tensor::matmul(h, w1);
        let p2 = tensor::matmul(h, w2);
        let mut out = Matrix::zeros(n, d);
        for i in 0..n {
            let sides: Vec<&Vec<usize>> = neigh[i].iter().filter(|s| !s.is_empty()).collect();
            if sides.is_empty() {
                for c in 0..d {
                    out.set(i, c, tensor::leaky_relu(h.get(i, c), LEAKY_SLOPE));
                }
                continue;
            }
            let mut z = vec![0.0; d];
            for side in &sides {
                for k in 0..heads {
                    let logits: Vec<f64> = side
                        .iter()
                        .map(|&j| {
                            (0..dh)
                                .map(|c| {
                                    let col = k * dh + c;
                                    a.get(0, col) * tensor::leaky_relu(p1.get(i, col) + p2.get(j, col), LEAKY_SLOPE)
                                })
                                .sum::<f64>()
                        })
                        .collect();
                    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let total: f64 = logits.iter().map(|l| (l - m).exp()).sum();
                    for (jj, &j) in side.iter().enumerate() {
                        let alpha = (logits[jj] - m).exp() / total;
                        for c in 0..dh {
                            z[k * dh + c] += alpha * p2.get(j, k * dh + c) / sides.len() as f64;
                        }
                    }
                }
            }
            for c in 0..d {
                out.set(i, c, tensor::leaky_relu(z[c], LEAKY_SLOPE));
            }
        }
        out
    }

    #[test]
    fn gat_matches_dense_oracle() {
        let c = toy_catalog();
        let g = build_global_graph(&c);
        let plan = GatPlan::new(&g);
        let mut params = ParamSet::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let enc = Encoder::register(&mut params, &small_config(), c.entity_index(), 16, &mut rng);
        let ix = c.entity_index();
        let mut neigh = vec![Vec::new(); ix.total()];
        for u in 0..c.n_users() {
            neigh[ix.user(u)] = vec![c.user_items(u).iter().map(|&v| ix.item(v)).collect()];
        }
        for p in 0..c.n_values() {
            neigh[ix.value(p)] = vec![c.items_with_value(p).iter().map(|&v| ix.item(v)).collect()];
        }
        for v in 0..c.n_items() {
            let users = (0..c.n_users()).filter(|&u| c.user_items(u).contains(&v)).map(|u| ix.user(u)).collect();
            let values = c.item_values(v).iter().map(|&p| ix.value(p)).collect();
            neigh[ix.item(v)] = vec![users, values];
        }
        let mut h = params.get(enc.emb).clone();
        for l in 0..2 {
            let get = |n: &str| params.get(params.id(&format!("enc.gat.{l}.{n}")).unwrap()).clone();
            h = dense_gat_layer(&h, &get("w1"), &get("w2"), &get("a"), 2, &neigh);
        }
        let got = enc.global_vectors(&params, &plan);
        for (a, b) in got.data().iter().zip(h.data()) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn two_node_graph_and_isolated_nodes() {
        // one user with one item that has one value; value 1 is isolated
        let c = Catalog::new(vec!["t".into()], vec!["x".into(), "y".into()], vec![0, 0], vec![vec![0]], vec![vec![0]]).unwrap();
        let plan = GatPlan::new(&build_global_graph(&c));
        let mut params = ParamSet::default();
        let cfg = EncoderConfig { d: 2, heads: 1, gat_layers: 1, ..small_config() };
        let enc = Encoder::register(&mut params, &cfg, c.entity_index(), 4, &mut ChaCha8Rng::seed_from_u64(0));
        let ix = c.entity_index();
        let out = enc.global_vectors(&params, &plan);
        let emb = params.get(enc.emb);
        let w2 = params.get(params.id("enc.gat.0.w2").unwrap());
        // singleton neighborhood: alpha = 1, so the user gets sigma(W2 h_item)
        let expect = tensor::matmul(&emb.gather_rows(&[ix.item(0)]), w2).map(|v| tensor::leaky_relu(v, LEAKY_SLOPE));
        assert!((out.row(ix.user(0))[0] - expect.get(0, 0)).abs() < 1e-12);
        let iso = ix.value(1);
        for col in 0..2 {
            assert!((out.get(iso, col) - tensor::leaky_relu(emb.get(iso, col), LEAKY_SLOPE)).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_weights_sum_to_one() {
        let c = toy_catalog();
        let plan = GatPlan::new(&build_global_graph(&c));
        let mut params = ParamSet::default();
        let enc = Encoder::register(&mut params, &small_config(), c.entity_index(), 16, &mut ChaCha8Rng::seed_from_u64(5));
        let mut tape = Tape::new(&params);
        let h = tape.param(enc.emb);
        let (w1, w2, a) = (tape.param(enc.gat[0].w1), tape.param(enc.gat[0].w2), tape.param(enc.gat[0].a));
        let p1 = tape.matmul(h, w1);
        let p2 = tape.matmul(h, w2);
        let e1 = tape.gather_rows(p1, plan.dst.clone());
        let e2 = tape.gather_rows(p2, plan.src.clone());
        let s = tape.add(e1, e2);
        let s = tape.leaky_relu(s, LEAKY_SLOPE);
        let logits = tape.head_dot(s, a, 2);
        let alpha = tape.segment_softmax(logits, plan.seg.clone(), plan.n_seg);
        let mut sums = vec![0.0; plan.n_seg * 2];
        for (e, &sg) in plan.seg.iter().enumerate() {
            for k in 0..2 {
                sums[sg * 2 + k] += tape.value(alpha).get(e, k);
            }
        }
        assert!(sums.iter().all(|s| (s - 1.0).abs() < 1e-12));
    }

    #[test]
    fn feedback_graph_rules() {
        let c = toy_catalog();
        let cfg = EpisodeConfig::default();
        let s0 = Env::new(&c, &cfg).init_with_seed(0, 0);
        let g = build_feedback_graphs(&s0, &c);
        let pos = &g.positive;
        let u = pos.local(Entity::User(0)).unwrap();
        let p0 = pos.local(Entity::Value(0)).unwrap();
        assert_eq!(pos.weight(u, p0, &[0.0; 8]), 1.0);
        // seed type is single valued, so value 1 was rejected and lives only in the negative graph
        assert!(pos.local(Entity::Value(1)).is_none());
        assert!(g.negative.local(Entity::Value(1)).is_some());

        let s = toy_state(&c);
        let g = build_feedback_graphs(&s, &c);
        let scores: Vec<f64> = (0..g.scored_items.len()).map(|k| 0.1 + 0.1 * k as f64).collect();
        for graph in [&g.positive, &g.negative] {
            let (fb_values, extra): (Vec<usize>, Vec<usize>) = match graph.polarity {
                Polarity::Positive => (s.accepted_values.iter().copied().collect(), vec![]),
                Polarity::Negative => (s.rejected_values.iter().copied().collect(), s.rejected_items.iter().copied().collect()),
            };
            for (i, &a) in graph.nodes.iter().enumerate() {
                for (j, &b) in graph.nodes.iter().enumerate() {
                    let expected = match (a, b) {
                        (Entity::User(_), Entity::Item(v)) | (Entity::Item(v), Entity::User(_)) => {
                            scores[g.scored_items.iter().position(|&x| x == v).unwrap()]
                        }
                        (Entity::Item(v), Entity::Value(p)) | (Entity::Value(p), Entity::Item(v)) => {
                            if c.item_has_value(v, p) {
                                1.0
                            } else {
                                0.0
                            }
                        }
                        (Entity::User(_), Entity::Value(p)) | (Entity::Value(p), Entity::User(_)) => {
                            if fb_values.contains(&p) {
                                1.0
                            } else {
                                0.0
                            }
                        }
                        _ => 0.0,
                    };
                    assert_eq!(graph.weight(i, j, &scores), expected, "{a:?} {b:?}");
                }
            }
            for v in extra.iter().chain(&s.candidate_items) {
                assert!(graph.local(Entity::Item(*v)).is_some());
            }
        }
    }

    #[test]
    fn gcn_two_node_hand_value() {
        // user + one accepted value, no candidates: a single unit edge, normalization 1/sqrt(1*1)
        let c = Catalog::new(vec!["t".into()], vec!["x".into()], vec![0], vec![vec![0]], vec![vec![0]]).unwrap();
        let cfg = EpisodeConfig::default();
        let mut s = Env::new(&c, &cfg).init_with_seed(0, 0);
        s.candidate_items.clear();
        let g = build_feedback_graphs(&s, &c);
        assert_eq!(g.positive.nodes.len(), 2);
        let mut params = ParamSet::default();
        let ecfg = EncoderConfig { d: 2, heads: 1, ..small_config() };
        let enc = Encoder::register(&mut params, &ecfg, c.entity_index(), 4, &mut ChaCha8Rng::seed_from_u64(1));
        let mut tape = Tape::new(&params);
        let (pos, _) = enc.encode_feedback(&mut tape, &s, &g);
        let emb = params.get(enc.emb);
        let w = params.get(params.id("enc.gcn_pos.0.w").unwrap());
        let ix = c.entity_index();
        let (eu, ep) = (emb.gather_rows(&[ix.user(0)]), emb.gather_rows(&[ix.value(0)]));
        let mut expect = tensor::matmul(&ep, w);
        expect.add_assign(&eu);
        let expect = expect.map(|v| tensor::leaky_relu(v, LEAKY_SLOPE));
        let got = tape.value(pos).row(0).to_vec();
        for k in 0..2 {
            assert!((got[k] - expect.get(0, k)).abs() < 1e-12);
        }
    }

    #[test]
    fn matching_score_formula() {
        let c = toy_catalog();
        let s = toy_state(&c);
        let ix = c.entity_index();
        let zero = Matrix::zeros(ix.total(), 3);
        assert_eq!(matching_score(&zero, ix, &s, 0), 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let emb = uniform(&mut rng, ix.total(), 3, 1.0);
        let ev = emb.row(ix.item(0));
        let mut q = emb.row(ix.user(0)).to_vec();
        for &p in &s.accepted_values {
            for k in 0..3 {
                q[k] += emb.get(ix.value(p), k);
            }
        }
        for &p in &s.rejected_values {
            for k in 0..3 {
                q[k] -= emb.get(ix.value(p), k);
            }
        }
        let brute = 1.0 / (1.0 + (-(0..3).map(|k| ev[k] * q[k]).sum::<f64>()).exp());
        let got = matching_score(&emb, ix, &s, 0);
        assert!((got - brute).abs() < 1e-12 && got > 0.0 && got < 1.0);
    }

    #[test]
    fn saturated_gate_returns_global_vector() {
        let c = toy_catalog();
        let mut params = ParamSet::default();
        let enc = Encoder::register(&mut params, &small_config(), c.entity_index(), 16, &mut ChaCha8Rng::seed_from_u64(2));
        *params.get_mut(enc.gate_b) = Matrix::filled(1, 4, 1e3);
        let mut tape = Tape::new(&params);
        let x = tape.input(Matrix::from_vec(2, 4, vec![0.1, -0.2, 0.3, 0.4, 0.5, 0.6, -0.7, 0.8]));
        let y = tape.input(Matrix::from_vec(2, 4, vec![9.0; 8]));
        let out = enc.gate(&mut tape, x, y);
        for (a, b) in tape.value(out).data().iter().zip(tape.value(x).data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn token_order_matters() {
        let c = toy_catalog();
        let mut params = ParamSet::default();
        let enc = Encoder::register(&mut params, &small_config(), c.entity_index(), 16, &mut ChaCha8Rng::seed_from_u64(4));
        let mut tape = Tape::new(&params);
        let toks = tape.input(Matrix::from_vec(2, 4, vec![0.3, -0.1, 0.2, 0.5, -0.4, 0.6, 0.1, -0.3]));
        let a = enc.aggregate(&mut tape, toks, &[0, 1]);
        let swapped = tape.gather_rows(toks, vec![1, 0]);
        let b = enc.aggregate(&mut tape, swapped, &[0, 1]);
        let diff: f64 = tape.value(a).data().iter().zip(tape.value(b).data()).map(|(x, y)| (x - y).abs()).sum();
        assert!(diff > 1e-6);
        // a single token is its own mean
        let one = tape.gather_rows(toks, vec![0]);
        let s = enc.aggregate(&mut tape, one, &[0]);
        assert_eq!(tape.value(s).shape(), (1, 4));
    }

    #[test]
    fn encode_state_is_deterministic_and_finite() {
        let c = toy_catalog();
        let plan = GatPlan::new(&build_global_graph(&c));
        let mut params = ParamSet::default();
        let enc = Encoder::register(&mut params, &small_config(), c.entity_index(), 16, &mut ChaCha8Rng::seed_from_u64(6));
        let s = toy_state(&c);
        let run = || {
            let mut tape = Tape::new(&params);
            let g = enc.encode_global(&mut tape, &plan);
            let out = enc.encode_state(&mut tape, g, &s, &c);
            tape.value(out).clone()
        };
        let a = run();
        assert_eq!(a, run());
        assert!(a.is_finite());
        assert_eq!(a.shape(), (1, 4));
    }
}
