//! Anytime bounded search from a root belief.
//!
//! Every node carries a lower and an upper estimate of the optimal value of
//! its belief. Fringe nodes take these from linear critics (`w · b`). At each
//! step the open node with the largest discounted, reach-weighted gap is
//! expanded under the action with the highest upper Q-value, and both bounds
//! are backed up to the root. Unexpanded actions are scored by one-step
//! critic lookahead, so backups always maximize over the full action set.

use std::fmt::Write as _;

use thiserror::Error;

use crate::belief_model::{Belief, PomdpModel};

#[derive(Debug, Error)]
pub enum TreeError {
    #[error("root belief has {found} entries, model has {expected} states")]
    BeliefDimension { expected: usize, found: usize },
    #[error("critic weights have {found} entries, model has {expected} states")]
    CriticDimension { expected: usize, found: usize },
}

/// Linear lower/upper value bounds used at the fringe.
#[derive(Debug, Clone, Copy)]
pub struct LeafCritic<'a> {
    pub lower: &'a [f64],
    pub upper: &'a [f64],
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SearchBudget {
    pub max_expansions: usize,
    /// Stop once the root gap falls below this.
    pub eps_gap: f64,
    /// Stop when an expansion shrinks the root gap by less than this; `<= 0` disables the rule.
    pub eps_gap_delta: f64,
    /// Observation branches at or below this probability are not instantiated.
    pub p_min: f64,
}

impl Default for SearchBudget {
    fn default() -> Self {
        SearchBudget {
            max_expansions: 50,
            eps_gap: 1e-3,
            eps_gap_delta: 0.0,
            p_min: 1e-4,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Branch {
    pub cell: usize,
    pub prob: f64,
    pub child: usize,
}

#[derive(Debug, Clone)]
pub struct ExpandedAction {
    pub action: usize,
    pub branches: Vec<Branch>,
    /// Critic-leaf contribution `sum p_cell * w · b'_cell` of pruned branches.
    pub pruned_lower: f64,
    pub pruned_upper: f64,
}

#[derive(Debug, Clone)]
pub struct BeliefNode {
    pub belief: Belief,
    pub depth: usize,
    pub lower: f64,
    pub upper: f64,
    /// Probability of reaching this node from the root under the tree policy.
    pub reach_prob: f64,
    /// `(parent, action, cell)`.
    pub parent: Option<(usize, usize, usize)>,
    pub expanded: Vec<ExpandedAction>,
    pub best_action: Option<usize>,
    /// Per action: immediate expected reward and critic-leaf Q bounds.
    leaf_q: Vec<LeafQ>,
}

#[derive(Debug, Clone, Copy)]
struct LeafQ {
    reward: f64,
    lower: f64,
    upper: f64,
}

impl BeliefNode {
    pub fn is_fringe(&self) -> bool {
        self.expanded.is_empty()
    }

    fn expanded_action(&self, a: usize) -> Option<&ExpandedAction> {
        self.expanded.iter().find(|e| e.action == a)
    }

    /// Open nodes are candidates for expansion: fringe nodes, or expanded
    /// nodes whose preferred action has no subtree yet.
    fn is_open(&self) -> bool {
        match self.best_action {
            None => true,
            Some(a) => self.expanded_action(a).is_none(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchResult {
    pub root_lower: f64,
    pub root_upper: f64,
    /// Midpoint of the root bounds.
    pub root_value: f64,
    pub best_root_action_bin: usize,
    pub expansions_used: usize,
    /// Root gap before the first expansion and after each one.
    pub root_gap_history: Vec<f64>,
}

pub struct SearchTree<'m> {
    model: &'m PomdpModel,
    critic: LeafCritic<'m>,
    p_min: f64,
    nodes: Vec<BeliefNode>,
    expansions: usize,
    gap_history: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn argmax_first(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

impl<'m> SearchTree<'m> {
    pub fn new(model: &'m PomdpModel, critic: LeafCritic<'m>, root: Belief, p_min: f64) -> Result<Self, TreeError> {
        let k = model.k;
        if root.len() != k {
            return Err(TreeError::BeliefDimension {
                expected: k,
                found: root.len(),
            });
        }
        for w in [critic.lower, critic.upper] {
            if w.len() != k {
                return Err(TreeError::CriticDimension {
                    expected: k,
                    found: w.len(),
                });
            }
        }
        let mut tree = SearchTree {
            model,
            critic,
            p_min,
            nodes: Vec::new(),
            expansions: 0,
            gap_history: Vec::new(),
        };
        tree.push_node(root, 0, None, 1.0);
        tree.gap_history.push(tree.root().upper - tree.root().lower);
        Ok(tree)
    }

    fn push_node(&mut self, belief: Belief, depth: usize, parent: Option<(usize, usize, usize)>, reach: f64) -> usize {
        let mut lower = dot(self.critic.lower, belief.probs());
        let mut upper = dot(self.critic.upper, belief.probs());
        if lower > upper {
            let mid = 0.5 * (lower + upper);
            lower = mid;
            upper = mid;
        }
        self.nodes.push(BeliefNode {
            belief,
            depth,
            lower,
            upper,
            reach_prob: reach,
            parent,
            expanded: Vec::new(),
            best_action: None,
            leaf_q: Vec::new(),
        });
        self.nodes.len() - 1
    }

    pub fn root(&self) -> &BeliefNode {
        &self.nodes[0]
    }

    pub fn nodes(&self) -> &[BeliefNode] {
        &self.nodes
    }

    pub fn expansions(&self) -> usize {
        self.expansions
    }

    /// One-step critic lookahead for every action. The linear critic makes the
    /// expectation over cells collapse to `w · (predicted continuation mass)`.
    fn ensure_leaf_q(&mut self, id: usize) {
        if !self.nodes[id].leaf_q.is_empty() {
            return;
        }
        let gamma = self.model.gamma;
        let b = &self.nodes[id].belief;
        let q: Vec<LeafQ> = (0..self.model.n_actions)
            .map(|a| {
                let reward = self.model.expected_reward(b, a);
                let pred = self.model.predict(b, a);
                LeafQ {
                    reward,
                    lower: reward + gamma * dot(self.critic.lower, &pred),
                    upper: reward + gamma * dot(self.critic.upper, &pred),
                }
            })
            .collect();
        self.nodes[id].leaf_q = q;
    }

    /// `(Q^L, Q^U)` of every action at an expanded node.
    fn q_values(&self, id: usize) -> Vec<(f64, f64)> {
        let node = &self.nodes[id];
        let gamma = self.model.gamma;
        node.leaf_q
            .iter()
            .enumerate()
            .map(|(a, leaf)| match node.expanded_action(a) {
                None => (leaf.lower, leaf.upper),
                Some(e) => {
                    let (mut lo, mut up) = (e.pruned_lower, e.pruned_upper);
                    for br in &e.branches {
                        let child = &self.nodes[br.child];
                        lo += br.prob * child.lower;
                        up += br.prob * child.upper;
                    }
                    (leaf.reward + gamma * lo, leaf.reward + gamma * up)
                }
            })
            .collect()
    }

    /// Recomputes bounds and preferred action of one node from its children
    /// and critic leaves.
    fn backup_node(&mut self, id: usize) {
        let q = self.q_values(id);
        let best = argmax_first(q.iter().map(|(_, u)| *u));
        let mut lower = q.iter().map(|(l, _)| *l).fold(f64::NEG_INFINITY, f64::max);
        let mut upper = q[best].1;
        if lower > upper {
            let mid = 0.5 * (lower + upper);
            lower = mid;
            upper = mid;
        }
        let node = &mut self.nodes[id];
        node.lower = lower;
        node.upper = upper;
        node.best_action = Some(best);
    }

    /// Backs up bounds from `id` to the root.
    pub fn backup(&mut self, mut id: usize) {
        loop {
            self.backup_node(id);
            match self.nodes[id].parent {
                Some((p, _, _)) => id = p,
                None => break,
            }
        }
    }

    /// Refreshes reach probabilities along the tree policy and returns the
    /// open node with the largest `gamma^depth * gap * reach` (first in
    /// depth-first order on ties), if its score is positive.
    pub fn select(&mut self) -> Option<usize> {
        for n in &mut self.nodes {
            n.reach_prob = 0.0;
        }
        self.nodes[0].reach_prob = 1.0;
        let gamma = self.model.gamma;
        let mut best: Option<(usize, f64)> = None;
        let mut stack = vec![0usize];
        while let Some(id) = stack.pop() {
            let node = &self.nodes[id];
            if node.is_open() {
                let score = fringe_score(gamma, node);
                if score > best.map_or(0.0, |b| b.1) {
                    best = Some((id, score));
                }
                continue;
            }
            let reach = node.reach_prob;
            let a = node.best_action.expect("non-open node has a preferred action");
            let children: Vec<(usize, f64)> = node
                .expanded_action(a)
                .map(|e| e.branches.iter().map(|br| (br.child, br.prob)).collect())
                .unwrap_or_default();
            for &(child, p) in children.iter().rev() {
                self.nodes[child].reach_prob = reach * p;
                stack.push(child);
            }
        }
        best.map(|b| b.0)
    }

    /// Expands `id` under its highest upper-Q unexpanded action and backs up.
    pub fn expand(&mut self, id: usize) {
        self.ensure_leaf_q(id);
        let action = match self.nodes[id].best_action {
            Some(a) if self.nodes[id].expanded_action(a).is_none() => a,
            _ => argmax_first(self.q_values(id).iter().map(|(_, u)| *u)),
        };
        let model = self.model;
        let belief = self.nodes[id].belief.clone();
        let depth = self.nodes[id].depth;
        let reach = self.nodes[id].reach_prob;
        let mut exp = ExpandedAction {
            action,
            branches: Vec::new(),
            pruned_lower: 0.0,
            pruned_upper: 0.0,
        };
        for br in model.branches(&belief, action) {
            if br.prob > self.p_min {
                let child_belief = br.belief().expect("positive branch probability");
                let child = self.push_node(child_belief, depth + 1, Some((id, action, br.cell)), reach * br.prob);
                exp.branches.push(Branch {
                    cell: br.cell,
                    prob: br.prob,
                    child,
                });
            } else {
                exp.pruned_lower += dot(self.critic.lower, &br.weights);
                exp.pruned_upper += dot(self.critic.upper, &br.weights);
            }
        }
        self.nodes[id].expanded.push(exp);
        self.expansions += 1;
        self.backup(id);
        self.gap_history.push(self.root().upper - self.root().lower);
    }

    /// Selects and expands one node. Returns false when nothing is left to expand.
    pub fn step(&mut self) -> bool {
        match self.select() {
            Some(id) => {
                self.expand(id);
                true
            }
            None => false,
        }
    }

    /// Reach probability of a node recomputed from its ancestors.
    pub fn reach_from_root(&self, mut id: usize) -> f64 {
        let mut reach = 1.0;
        while let Some((p, a, cell)) = self.nodes[id].parent {
            let parent = &self.nodes[p];
            if parent.best_action != Some(a) {
                return 0.0;
            }
            let prob = parent
                .expanded_action(a)
                .and_then(|e| e.branches.iter().find(|br| br.cell == cell))
                .map_or(0.0, |br| br.prob);
            reach *= prob;
            id = p;
        }
        reach
    }

    pub fn fringe_score(&self, id: usize) -> f64 {
        fringe_score(self.model.gamma, &self.nodes[id])
    }

    pub fn result(&mut self) -> SearchResult {
        if self.root().best_action.is_none() {
            self.ensure_leaf_q(0);
        }
        let root = self.root();
        let best = root
            .best_action
            .unwrap_or_else(|| argmax_first(root.leaf_q.iter().map(|q| q.upper)));
        SearchResult {
            root_lower: root.lower,
            root_upper: root.upper,
            root_value: 0.5 * (root.lower + root.upper),
            best_root_action_bin: best,
            expansions_used: self.expansions,
            root_gap_history: self.gap_history.clone(),
        }
    }

    /// One line per node: id, parent, depth, action, cell, lower, upper, reach, best action.
    pub fn dump(&self) -> String {
        let mut out = String::from("# id parent depth action cell lower upper reach_prob best_action\n");
        let opt = |v: Option<usize>| v.map_or("-".to_string(), |x| x.to_string());
        for (id, n) in self.nodes.iter().enumerate() {
            let (parent, action, cell) = match n.parent {
                Some((p, a, c)) => (Some(p), Some(a), Some(c)),
                None => (None, None, None),
            };
            let _ = writeln!(
                out,
                "{id} {} {} {} {} {} {} {} {}",
                opt(parent),
                n.depth,
                opt(action),
                opt(cell),
                n.lower,
                n.upper,
                n.reach_prob,
                opt(n.best_action)
            );
        }
        out
    }
}

fn fringe_score(gamma: f64, node: &BeliefNode) -> f64 {
    gamma.powi(node.depth as i32) * (node.upper - node.lower) * node.reach_prob
}

/// Runs the anytime search until a stopping rule fires.
pub fn search<'m>(
    model: &'m PomdpModel,
    critic: LeafCritic<'m>,
    root: Belief,
    budget: &SearchBudget,
) -> Result<(SearchResult, SearchTree<'m>), TreeError> {
    let mut tree = SearchTree::new(model, critic, root, budget.p_min)?;
    while tree.expansions() < budget.max_expansions {
        let before = tree.root().upper - tree.root().lower;
        if before < budget.eps_gap || !tree.step() {
            break;
        }
        let after = tree.root().upper - tree.root().lower;
        if budget.eps_gap_delta > 0.0 && before - after < budget.eps_gap_delta {
            break;
        }
    }
    Ok((tree.result(), tree))
}
