//! Stored part of the search tree: per-edge visit counts and cumulative
//! rewards.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::num::Scalar;

pub type NodeId = usize;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EdgeStats<T> {
    /// Cumulative (discounted) reward `R_{s,a}`.
    pub reward: T,
    /// `n_{s,a}`
    pub visits: u64,
}

impl<T: Scalar> Default for EdgeStats<T> {
    fn default() -> Self {
        Self {
            reward: T::zero(),
            visits: 0,
        }
    }
}

impl<T: Scalar> EdgeStats<T> {
    pub fn mean(&self) -> Option<T> {
        (self.visits > 0).then(|| self.reward / T::from_count(self.visits))
    }
}

#[derive(Clone, Debug)]
pub struct TreeNode<T, A> {
    key: String,
    depth: usize,
    visits: u64,
    stats: BTreeMap<A, EdgeStats<T>>,
    children: BTreeMap<A, NodeId>,
}

impl<T: Scalar, A: Copy + Ord> TreeNode<T, A> {
    fn new(key: String, depth: usize) -> Self {
        Self {
            key,
            depth,
            visits: 0,
            stats: BTreeMap::new(),
            children: BTreeMap::new(),
        }
    }

    pub fn key(&self) -> &str {
        &self.key
    }

    /// Distance from the root in transitions.
    pub fn depth(&self) -> usize {
        self.depth
    }

    /// `n_{a',s}`: how often a rollout passed through this node.
    pub fn visits(&self) -> u64 {
        self.visits
    }

    pub fn edge(&self, action: A) -> EdgeStats<T> {
        self.stats.get(&action).copied().unwrap_or_default()
    }

    pub fn edges(&self) -> impl Iterator<Item = (A, &EdgeStats<T>)> {
        self.stats.iter().map(|(a, s)| (*a, s))
    }

    pub fn child(&self, action: A) -> Option<NodeId> {
        self.children.get(&action).copied()
    }

    pub fn num_children(&self) -> usize {
        self.children.len()
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TreeError {
    #[error("edge {index} of the backpropagated path starts at node {node}, which is not stored")]
    UnknownNode { index: usize, node: NodeId },
    #[error("edge {index} does not follow a stored parent-child link")]
    BrokenPath { index: usize },
    #[error("reward {0} outside [0, 1]")]
    RewardRange(f64),
}

/// Arena-backed tree rooted at node 0.
#[derive(Clone, Debug)]
pub struct SearchTree<T, A> {
    nodes: Vec<TreeNode<T, A>>,
}

impl<T: Scalar, A: Copy + Ord> SearchTree<T, A> {
    pub fn new(root_key: impl Into<String>) -> Self {
        Self {
            nodes: vec![TreeNode::new(root_key.into(), 0)],
        }
    }

    pub const ROOT: NodeId = 0;

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn node(&self, id: NodeId) -> &TreeNode<T, A> {
        &self.nodes[id]
    }

    pub fn nodes(&self) -> impl Iterator<Item = &TreeNode<T, A>> {
        self.nodes.iter()
    }

    pub fn child(&self, parent: NodeId, action: A) -> Option<NodeId> {
        self.nodes[parent].child(action)
    }

    /// Adds the child reached by `action`, or returns the existing one.
    pub fn expand(&mut self, parent: NodeId, action: A, key: impl Into<String>) -> NodeId {
        if let Some(id) = self.child(parent, action) {
            return id;
        }
        let id = self.nodes.len();
        let depth = self.nodes[parent].depth + 1;
        self.nodes.push(TreeNode::new(key.into(), depth));
        self.nodes[parent].children.insert(action, id);
        id
    }

    /// Updates the stored edges of one rollout.
    ///
    /// `edges` are the stored `(node, action)` pairs from the root in order,
    /// and `steps_to_end[i]` is how many transitions separate edge `i` from
    /// the terminal transition (0 for the terminal one). Each edge gains
    /// `gamma^k · reward`. Validation happens before any mutation.
    pub fn backpropagate(
        &mut self,
        edges: &[(NodeId, A)],
        steps_to_end: &[usize],
        reward: T,
        gamma: T,
    ) -> Result<(), TreeError> {
        if !(reward >= T::zero() && reward <= T::one()) {
            return Err(TreeError::RewardRange(reward.to_f64_lossy()));
        }
        assert_eq!(edges.len(), steps_to_end.len());
        for (index, window) in edges.iter().enumerate() {
            let (node, _) = *window;
            if node >= self.nodes.len() {
                return Err(TreeError::UnknownNode { index, node });
            }
            if index == 0 && node != Self::ROOT {
                return Err(TreeError::BrokenPath { index });
            }
            if index > 0 {
                let (parent, via) = edges[index - 1];
                if self.child(parent, via) != Some(node) {
                    return Err(TreeError::BrokenPath { index });
                }
            }
        }
        for (&(node, action), &k) in edges.iter().zip(steps_to_end) {
            let increment = if k == 0 {
                reward
            } else {
                gamma.powi(k as i32) * reward
            };
            let n = &mut self.nodes[node];
            n.visits += 1;
            let e = n.stats.entry(action).or_default();
            e.visits += 1;
            e.reward += increment;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    type Tree = SearchTree<f64, u8>;

    fn chain(tree: &mut Tree, actions: &[u8]) -> Vec<(NodeId, u8)> {
        let mut node = Tree::ROOT;
        let mut edges = vec![];
        for &a in actions {
            edges.push((node, a));
            node = tree.expand(node, a, format!("{node}-{a}"));
        }
        edges
    }

    #[test]
    fn zero_reward_only_counts() {
        let mut t = Tree::new("");
        let edges = chain(&mut t, &[1, 2, 3]);
        t.backpropagate(&edges, &[2, 1, 0], 0.0, 1.0).unwrap();
        for &(n, a) in &edges {
            assert_eq!(t.node(n).edge(a), EdgeStats { reward: 0.0, visits: 1 });
        }
    }

    #[test]
    fn undiscounted_reward_reaches_every_edge() {
        let mut t = Tree::new("");
        let edges = chain(&mut t, &[1, 2, 3]);
        t.backpropagate(&edges, &[2, 1, 0], 0.8, 1.0).unwrap();
        for &(n, a) in &edges {
            assert_eq!(t.node(n).edge(a).reward, 0.8);
            assert_eq!(t.node(n).visits(), 1);
        }
    }

    #[test]
    fn discounting_by_distance() {
        let mut t = Tree::new("");
        let edges = chain(&mut t, &[4, 5]);
        t.backpropagate(&edges, &[1, 0], 0.8, 0.5).unwrap();
        assert_eq!(t.node(edges[1].0).edge(5).reward, 0.8);
        assert_eq!(t.node(edges[0].0).edge(4).reward, 0.4);
    }

    #[test]
    fn broken_paths_are_rejected_without_mutation() {
        let mut t = Tree::new("");
        let edges = chain(&mut t, &[1, 2]);
        let bad = [(edges[0].0, 1), (7, 2)];
        assert!(matches!(
            t.backpropagate(&bad, &[1, 0], 0.5, 1.0),
            Err(TreeError::UnknownNode { index: 1, node: 7 })
        ));
        let skip = [(edges[0].0, 9), (edges[1].0, 2)];
        assert_eq!(
            t.backpropagate(&skip, &[1, 0], 0.5, 1.0),
            Err(TreeError::BrokenPath { index: 1 })
        );
        assert!(t.backpropagate(&edges, &[1, 0], 1.5, 1.0).is_err());
        assert!(t.nodes().all(|n| n.visits() == 0));
    }

    #[test]
    fn expand_is_idempotent() {
        let mut t = Tree::new("");
        let a = t.expand(Tree::ROOT, 3, "x");
        let b = t.expand(Tree::ROOT, 3, "x");
        assert_eq!(a, b);
        assert_eq!(t.len(), 2);
        assert_eq!(t.node(a).depth(), 1);
    }
}
