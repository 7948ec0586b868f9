//! Monte Carlo tree search over action types.
//!
//! Nodes are conversation states, edges are `ask`/`rec`. Each simulation
//! selects a path with UCT, expands the leaf into both children, rolls out
//! with the agent until the conversation ends, and backs the tail returns up
//! the path.

use std::collections::HashMap;
use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::agent::{Inference, SelectMode, StateEval};
use crate::catalog::{ItemId, UserId};
use crate::env::{tail_returns, Action, ActionKind, ConversationState, Env, Status};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlannerConfig {
    /// Simulations per user.
    pub n: usize,
    /// Exploration factor.
    pub w: f64,
    pub rollout_mode: SelectMode,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self { n: 20, w: 1.5, rollout_mode: SelectMode::Greedy }
    }
}

impl PlannerConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.n == 0 {
            return Err("n must be at least 1".into());
        }
        if !(self.w >= 0.0) {
            return Err(format!("w must be non-negative, got {}", self.w));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Node {
    pub state: ConversationState,
    pub parent: Option<usize>,
    /// The action and reward on the edge from the parent.
    pub incoming: Option<(Action, f64)>,
    pub visits: u64,
    pub children: [Option<usize>; 2],
    pub q: [f64; 2],
    pub edge_visits: [u64; 2],
}

impl Node {
    fn new(state: ConversationState, parent: Option<usize>, incoming: Option<(Action, f64)>) -> Self {
        Self { state, parent, incoming, visits: 0, children: [None, None], q: [0.0; 2], edge_visits: [0; 2] }
    }

    pub fn is_terminal(&self) -> bool {
        self.state.is_terminal()
    }

    pub fn is_expanded(&self) -> bool {
        self.children.iter().any(Option::is_some)
    }
}

#[derive(Clone, Debug, Default)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn root(&self) -> &Node {
        &self.nodes[0]
    }

    pub fn child(&self, node: usize, kind: ActionKind) -> Option<&Node> {
        self.nodes[node].children[kind.index()].map(|c| &self.nodes[c])
    }

    /// Line-oriented dump: one record per node.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for (i, n) in self.nodes.iter().enumerate() {
            let parent = n.parent.map_or("-".to_string(), |p| p.to_string());
            let action = n.incoming.as_ref().map_or("-".to_string(), |(a, r)| {
                let ids: Vec<String> = a.ids().iter().map(usize::to_string).collect();
                format!("{}:{} r={r:.4}", a.kind().letter(), ids.join(","))
            });
            let fmt_q = |q: f64| if q == f64::NEG_INFINITY { "-inf".to_string() } else { format!("{q:.6}") };
            let _ = writeln!(
                out,
                "node={i} parent={parent} turn={} status={:?} V={} q_ask={} q_rec={} n_ask={} n_rec={} action={action}",
                n.state.turn,
                n.state.status,
                n.visits,
                fmt_q(n.q[0]),
                fmt_q(n.q[1]),
                n.edge_visits[0],
                n.edge_visits[1],
            );
        }
        out
    }
}

/// One transition of a simulated conversation.
#[derive(Clone, Debug)]
pub struct Step {
    pub state: ConversationState,
    pub kind: ActionKind,
    pub action: Action,
    pub reward: f64,
    pub next: ConversationState,
}

#[derive(Clone, Debug)]
pub struct Trajectory {
    pub user: UserId,
    pub steps: Vec<Step>,
    pub outcome: Status,
    /// Discounted return from the first turn.
    pub ret: f64,
    /// Tree edges this simulation updated, indexed by turn.
    pub edges: Vec<(usize, ActionKind)>,
}

impl Trajectory {
    pub fn rewards(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.reward).collect()
    }

    pub fn kinds(&self) -> Vec<ActionKind> {
        self.steps.iter().map(|s| s.kind).collect()
    }
}

/// `argmax_o q(s,o) + w·sqrt(ln V(s) / V(f(s,o)))`.
///
/// Unvisited children win outright (ask first); masked types are never chosen.
pub fn uct_select(q: [f64; 2], parent_visits: u64, child_visits: [Option<u64>; 2], w: f64) -> Option<ActionKind> {
    for kind in ActionKind::ALL {
        if child_visits[kind.index()] == Some(0) {
            return Some(kind);
        }
    }
    let mut best: Option<(ActionKind, f64)> = None;
    for kind in ActionKind::ALL {
        let Some(cv) = child_visits[kind.index()] else { continue };
        let score = q[kind.index()] + w * ((parent_visits as f64).ln() / cv as f64).sqrt();
        if best.map_or(true, |(_, b)| score > b) {
            best = Some((kind, score));
        }
    }
    best.map(|b| b.0)
}

/// Search state for one user.
pub struct Planner<'a, 'b> {
    pub inference: &'b Inference<'a>,
    pub env: Env<'a>,
    pub config: &'b PlannerConfig,
    pub targets: Vec<ItemId>,
    pub tree: Tree,
    cache: HashMap<ConversationState, StateEval>,
}

impl<'a, 'b> Planner<'a, 'b> {
    pub fn new(inference: &'b Inference<'a>, config: &'b PlannerConfig, root: ConversationState, targets: &[ItemId]) -> Self {
        let env = Env::new(inference.catalog, inference.episode);
        let tree = Tree { nodes: vec![Node::new(root, None, None)] };
        Self { inference, env, config, targets: targets.to_vec(), tree, cache: HashMap::new() }
    }

    fn eval(&mut self, state: &ConversationState) -> StateEval {
        if let Some(e) = self.cache.get(state) {
            return e.clone();
        }
        let e = self.inference.evaluate(state);
        self.cache.insert(state.clone(), e.clone());
        e
    }

    fn uct(&self, node: usize) -> Option<ActionKind> {
        let n = &self.tree.nodes[node];
        let child_visits = n.children.map(|c| c.map(|c| self.tree.nodes[c].visits));
        uct_select(n.q, n.visits, child_visits, self.config.w)
    }

    /// Walks from the root along UCT choices; returns the node path and its steps.
    pub fn select_path(&self) -> (Vec<usize>, Vec<Step>, Vec<(usize, ActionKind)>) {
        let mut path = vec![0];
        let mut steps = Vec::new();
        let mut edges = Vec::new();
        let mut cur = 0;
        while self.tree.nodes[cur].is_expanded() && !self.tree.nodes[cur].is_terminal() {
            let Some(kind) = self.uct(cur) else { break };
            let child = self.tree.nodes[cur].children[kind.index()].expect("selected child exists");
            let (action, reward) = self.tree.nodes[child].incoming.clone().expect("child has an incoming edge");
            steps.push(Step {
                state: self.tree.nodes[cur].state.clone(),
                kind,
                action,
                reward,
                next: self.tree.nodes[child].state.clone(),
            });
            edges.push((cur, kind));
            path.push(child);
            cur = child;
        }
        (path, steps, edges)
    }

    /// Attaches both children to a non-terminal leaf and seeds the parent's q with `max Q`.
    pub fn expand(&mut self, leaf: usize) {
        let state = self.tree.nodes[leaf].state.clone();
        debug_assert!(!state.is_terminal() && !self.tree.nodes[leaf].is_expanded());
        let eval = self.eval(&state);
        for kind in ActionKind::ALL {
            let Some(action) = eval.compose(kind, self.inference.catalog, self.inference.episode) else {
                self.tree.nodes[leaf].q[kind.index()] = f64::NEG_INFINITY;
                continue;
            };
            let step = self.env.step(&state, &action, &self.targets).expect("composed actions are valid");
            let id = self.tree.nodes.len();
            self.tree.nodes.push(Node::new(step.next, Some(leaf), Some((action, step.reward))));
            self.tree.nodes[leaf].children[kind.index()] = Some(id);
            self.tree.nodes[leaf].q[kind.index()] = eval.max_q(kind).expect("available kind has candidates");
        }
    }

    /// Simulates with the agent from `state` until the conversation ends.
    pub fn rollout(&mut self, state: &ConversationState, rng: &mut impl Rng) -> Vec<Step> {
        let mut steps = Vec::new();
        let mut cur = state.clone();
        while !cur.is_terminal() {
            let eval = self.eval(&cur);
            let action = eval
                .select(self.config.rollout_mode, rng, self.inference.catalog, self.inference.episode)
                .expect("running states have an available action");
            let r = self.env.step(&cur, &action, &self.targets).expect("agent actions are valid");
            steps.push(Step { state: cur, kind: action.kind(), action, reward: r.reward, next: r.next.clone() });
            cur = r.next;
        }
        steps
    }

    /// Updates visit counts and running means along the simulated path.
    pub fn backprop(&mut self, path: &[usize], edges: &[(usize, ActionKind)], rewards: &[f64]) {
        let tails = tail_returns(rewards, self.inference.episode.gamma);
        for &n in path {
            self.tree.nodes[n].visits += 1;
        }
        for (t, &(n, kind)) in edges.iter().enumerate() {
            let node = &mut self.tree.nodes[n];
            let k = kind.index();
            node.edge_visits[k] += 1;
            node.q[k] += (tails[t] - node.q[k]) / node.edge_visits[k] as f64;
        }
    }

    /// One selection–expansion–rollout–backprop cycle.
    pub fn simulate(&mut self, rng: &mut impl Rng) -> Trajectory {
        let (path, mut steps, mut edges) = self.select_path();
        let leaf = *path.last().expect("path holds the root");
        if !self.tree.nodes[leaf].is_terminal() {
            self.expand(leaf);
            let leaf_state = self.tree.nodes[leaf].state.clone();
            let suffix = self.rollout(&leaf_state, rng);
            if let Some(first) = suffix.first() {
                edges.push((leaf, first.kind));
            }
            steps.extend(suffix);
        }
        let rewards: Vec<f64> = steps.iter().map(|s| s.reward).collect();
        self.backprop(&path, &edges, &rewards);
        let outcome = steps.last().map_or(self.tree.nodes[0].state.status, |s| s.next.status);
        let ret = tail_returns(&rewards, self.inference.episode.gamma).first().copied().unwrap_or(0.0);
        Trajectory { user: self.tree.nodes[0].state.user, steps, outcome, ret, edges }
    }
}

/// Runs `N` simulations from a fresh root; returns every trajectory and the final tree.
pub fn plan_user(
    inference: &Inference,
    config: &PlannerConfig,
    root: ConversationState,
    targets: &[ItemId],
    rng: &mut impl Rng,
) -> (Vec<Trajectory>, Tree) {
    let mut planner = Planner::new(inference, config, root, targets);
    let trajectories = (0..config.n).map(|_| planner.simulate(rng)).collect();
    (trajectories, planner.tree)
}

/// Index of the highest-return trajectory; ties go to the earliest.
pub fn best_trajectory(trajectories: &[Trajectory]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, t) in trajectories.iter().enumerate() {
        if best.map_or(true, |b| t.ret > trajectories[b].ret) {
            best = Some(i);
        }
    }
    best
}
