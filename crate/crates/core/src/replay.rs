//! Prioritized experience replay.

use rand::Rng;
use thiserror::Error;

use crate::env::{Action, ActionKind, ConversationState};

#[derive(Clone, Debug, PartialEq)]
pub struct Experience {
    pub state: ConversationState,
    pub kind: ActionKind,
    pub action: Action,
    pub reward: f64,
    pub next: ConversationState,
    /// Action type taken at `next` in the same trajectory; `None` iff `next` is terminal.
    pub next_kind: Option<ActionKind>,
    /// Set when the experience came from the highest-return trajectory of its planning call.
    pub from_best: bool,
}

impl Experience {
    pub fn terminal(&self) -> bool {
        self.next_kind.is_none()
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ReplayError {
    #[error("replay memory is empty")]
    Empty,
}

/// Binary sum tree over `capacity` leaves.
#[derive(Clone, Debug)]
struct SumTree {
    leaves: usize,
    nodes: Vec<f64>,
}

impl SumTree {
    fn new(capacity: usize) -> Self {
        let leaves = capacity.next_power_of_two();
        Self { leaves, nodes: vec![0.0; 2 * leaves] }
    }

    fn total(&self) -> f64 {
        self.nodes[1]
    }

    fn set(&mut self, i: usize, value: f64) {
        let mut n = i + self.leaves;
        self.nodes[n] = value;
        while n > 1 {
            n /= 2;
            self.nodes[n] = self.nodes[2 * n] + self.nodes[2 * n + 1];
        }
    }

    fn get(&self, i: usize) -> f64 {
        self.nodes[i + self.leaves]
    }

    /// Leaf whose cumulative interval contains `mass`.
    fn find(&self, mut mass: f64) -> usize {
        let mut n = 1;
        while n < self.leaves {
            let left = self.nodes[2 * n];
            if mass < left || self.nodes[2 * n + 1] <= 0.0 {
                n *= 2;
            } else {
                mass -= left;
                n = 2 * n + 1;
            }
        }
        n - self.leaves
    }
}

/// FIFO ring buffer with proportional sampling.
#[derive(Clone, Debug)]
pub struct ReplayMemory {
    capacity: usize,
    alpha: f64,
    items: Vec<Experience>,
    priorities: Vec<f64>,
    next: usize,
    tree: SumTree,
}

#[derive(Clone, Debug)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub weights: Vec<f64>,
}

impl ReplayMemory {
    pub fn new(capacity: usize, alpha: f64) -> Self {
        assert!(capacity > 0);
        Self { capacity, alpha, items: Vec::new(), priorities: Vec::new(), next: 0, tree: SumTree::new(capacity) }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn get(&self, i: usize) -> &Experience {
        &self.items[i]
    }

    pub fn priority(&self, i: usize) -> f64 {
        self.priorities[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Experience> {
        self.items.iter()
    }

    /// Largest stored priority, or 1 when empty.
    pub fn max_priority(&self) -> f64 {
        self.priorities.iter().copied().fold(None, |m: Option<f64>, p| Some(m.map_or(p, |m| m.max(p)))).unwrap_or(1.0)
    }

    /// Sampling probability of slot `i`.
    pub fn probability(&self, i: usize) -> f64 {
        self.tree.get(i) / self.tree.total()
    }

    pub fn push(&mut self, e: Experience) {
        let p = self.max_priority();
        if self.items.len() < self.capacity {
            self.items.push(e);
            self.priorities.push(p);
        } else {
            self.items[self.next] = e;
            self.priorities[self.next] = p;
        }
        self.tree.set(self.next, p.powf(self.alpha));
        self.next = (self.next + 1) % self.capacity;
    }

    pub fn update_priority(&mut self, i: usize, p: f64) {
        assert!(p > 0.0 && p.is_finite(), "priority must be positive, got {p}");
        self.priorities[i] = p;
        self.tree.set(i, p.powf(self.alpha));
    }

    /// Draws `size` slots with replacement, proportionally to `priority^α`,
    /// with importance weights `(M·P_i)^(−β)` scaled by the batch maximum.
    pub fn sample(&self, size: usize, beta: f64, rng: &mut impl Rng) -> Result<Batch, ReplayError> {
        if self.items.is_empty() {
            return Err(ReplayError::Empty);
        }
        let total = self.tree.total();
        let m = self.items.len() as f64;
        let mut indices = Vec::with_capacity(size);
        let mut weights = Vec::with_capacity(size);
        for _ in 0..size {
            let i = self.tree.find(rng.gen::<f64>() * total).min(self.items.len() - 1);
            indices.push(i);
            weights.push((m * self.probability(i)).powf(-beta));
        }
        let max = weights.iter().copied().fold(0.0, f64::max);
        for w in &mut weights {
            *w /= max;
        }
        Ok(Batch { indices, weights })
    }
}
