//! Statistic sharing between similar states.
//!
//! Two states are similar when they have the same number of layers, their
//! feature map falls in the same representation bin, and they contain the
//! same number of fully connected layers. For the softmax action the
//! preceding action must match as well. Visit statistics of all similar
//! states are pooled per action and blended with the exact node statistics.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::arch::{Action, ArchState, SpaceConfig};
use crate::num::Scalar;
use crate::tree::{EdgeStats, TreeNode};

use super::{pick, Policy, RunRng, Score, SelectionContext, Transition};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SimilarityClass {
    pub depth: usize,
    pub rep_bin: usize,
    pub fc_count: usize,
}

impl SimilarityClass {
    pub fn of(state: &ArchState, space: &SpaceConfig) -> Self {
        Self {
            depth: state.depth(),
            rep_bin: space.rep_bin(state.rep_size()),
            fc_count: state.fc_count(),
        }
    }
}

/// Cell of the neighbor table that scores `action` in a given state.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum NeighborKey {
    Layer(SimilarityClass),
    /// Softmax statistics are additionally split by the previous action
    /// (`None` for the empty network).
    Softmax(SimilarityClass, Option<Action>),
}

impl NeighborKey {
    pub fn for_action(state: &ArchState, action: Action, space: &SpaceConfig) -> Self {
        let class = SimilarityClass::of(state, space);
        if action.is_terminate() {
            NeighborKey::Softmax(class, state.last_action())
        } else {
            NeighborKey::Layer(class)
        }
    }
}

#[derive(Clone, Debug, Default)]
struct Cell<T> {
    total: u64,
    actions: BTreeMap<Action, EdgeStats<T>>,
}

/// Pooled statistics `R_{N(s),a}`, `n_{N(s),a}` and `n_{a',N(s)}`.
#[derive(Clone, Debug)]
pub struct RaveTable<T> {
    cells: HashMap<NeighborKey, Cell<T>>,
}

impl<T: Scalar> Default for RaveTable<T> {
    fn default() -> Self {
        Self {
            cells: HashMap::new(),
        }
    }
}

impl<T: Scalar> RaveTable<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, key: NeighborKey, action: Action, reward: T) {
        let cell = self.cells.entry(key).or_insert_with(|| Cell {
            total: 0,
            actions: BTreeMap::new(),
        });
        cell.total += 1;
        let e = cell.actions.entry(action).or_default();
        e.visits += 1;
        e.reward += reward;
    }

    /// One update per transition of a terminal path.
    pub fn update(&mut self, path: &[Transition], reward: T, space: &SpaceConfig) {
        for t in path {
            self.add(NeighborKey::for_action(&t.state, t.action, space), t.action, reward);
        }
    }

    pub fn stats(&self, key: &NeighborKey, action: Action) -> EdgeStats<T> {
        self.cells
            .get(key)
            .and_then(|c| c.actions.get(&action).copied())
            .unwrap_or_default()
    }

    pub fn total(&self, key: &NeighborKey) -> u64 {
        self.cells.get(key).map_or(0, |c| c.total)
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    /// Checks `total = Σ_a n_{N,a}` for every cell.
    pub fn is_consistent(&self) -> bool {
        self.cells
            .values()
            .all(|c| c.total == c.actions.values().map(|e| e.visits).sum::<u64>())
    }
}

/// Weight `β` given to the pooled statistics; `α = 1 − β`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RaveWeighting<T> {
    /// `β = sqrt(k / (3n + k))` with `n = n_{s,a}`.
    Schedule { k: T },
    /// Constant `β`; `Fixed(0)` reduces to plain UCT.
    Fixed(T),
}

impl<T: Scalar> Default for RaveWeighting<T> {
    fn default() -> Self {
        RaveWeighting::Schedule { k: T::lit(250.0) }
    }
}

impl<T: Scalar> RaveWeighting<T> {
    pub fn beta(&self, exact_visits: u64, _neighbor_visits: u64) -> T {
        match *self {
            RaveWeighting::Schedule { k } => {
                (k / (T::lit(3.0) * T::from_count(exact_visits) + k)).sqrt()
            }
            RaveWeighting::Fixed(beta) => beta,
        }
    }
}

/// Blended score of one action.
///
/// A side with no visits gets zero weight. If the weighting itself puts no
/// mass on the pooled side, the pooled statistics are ignored entirely.
pub fn rave_score<T: Scalar>(
    exact: EdgeStats<T>,
    parent_visits: u64,
    pooled: EdgeStats<T>,
    pooled_total: u64,
    weighting: &RaveWeighting<T>,
    c: T,
) -> Score<T> {
    let raw_beta = weighting.beta(exact.visits, pooled.visits);
    let pooled_visits = if raw_beta > T::zero() { pooled.visits } else { 0 };
    let (alpha, beta) = match (exact.visits, pooled_visits) {
        (0, 0) => return Score::Untried,
        (0, _) => (T::zero(), T::one()),
        (_, 0) => (T::one(), T::zero()),
        _ => (T::one() - raw_beta, raw_beta),
    };
    let mut value = T::zero();
    let mut count = T::zero();
    let mut parent = T::zero();
    if alpha > T::zero() {
        let n = T::from_count(exact.visits);
        value += alpha * (exact.reward / n);
        count += alpha * n;
        parent += alpha * T::from_count(parent_visits);
    }
    if beta > T::zero() {
        let n = T::from_count(pooled.visits);
        value += beta * (pooled.reward / n);
        count += beta * n;
        parent += beta * T::from_count(pooled_total);
    }
    let log_parent = parent.max(T::one()).ln();
    Score::Value(value + c * (log_parent / count).sqrt())
}

#[allow(clippy::too_many_arguments)]
pub fn select_rave4nn<T: Scalar>(
    node: &TreeNode<T, Action>,
    state: &ArchState,
    legal: &[Action],
    table: &RaveTable<T>,
    weighting: &RaveWeighting<T>,
    c: T,
    space: &SpaceConfig,
    rng: &mut RunRng,
) -> Action {
    let scored: Vec<(Action, Score<T>)> = legal
        .iter()
        .map(|&a| {
            let key = NeighborKey::for_action(state, a, space);
            let score = rave_score(
                node.edge(a),
                node.visits(),
                table.stats(&key, a),
                table.total(&key),
                weighting,
                c,
            );
            (a, score)
        })
        .collect();
    pick(&scored, rng)
}

#[derive(Clone, Debug)]
pub struct Rave4nnPolicy<T> {
    pub c: T,
    pub weighting: RaveWeighting<T>,
    pub table: RaveTable<T>,
}

impl<T: Scalar> Rave4nnPolicy<T> {
    pub fn new(c: T, weighting: RaveWeighting<T>) -> Self {
        Self {
            c,
            weighting,
            table: RaveTable::new(),
        }
    }
}

impl<T: Scalar> Policy<T> for Rave4nnPolicy<T> {
    fn name(&self) -> &'static str {
        "rave4nn"
    }

    fn select(&mut self, ctx: &SelectionContext<'_, T>, rng: &mut RunRng) -> Action {
        select_rave4nn(
            ctx.node,
            ctx.state,
            ctx.legal,
            &self.table,
            &self.weighting,
            self.c,
            ctx.space,
            rng,
        )
    }

    fn observe(&mut self, path: &[Transition], reward: T, space: &SpaceConfig) {
        self.table.update(path, reward, space);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tree::SearchTree;
    use rand::SeedableRng;

    fn space() -> SpaceConfig {
        SpaceConfig::default()
    }

    fn state(text: &str) -> ArchState {
        ArchState::parse(text, &space()).unwrap()
    }

    fn act(t: &str) -> Action {
        t.parse().unwrap()
    }

    fn path_of(text: &str) -> Vec<Transition> {
        let sp = space();
        let mut s = ArchState::new(&sp);
        let mut out = vec![];
        for a in crate::arch::parse_actions(text).unwrap() {
            out.push(Transition {
                state: s.clone(),
                action: a,
            });
            s = s.apply(a, &sp).unwrap();
        }
        out
    }

    #[test]
    fn weighting_schedule() {
        let w = RaveWeighting::<f64>::default();
        assert_eq!(w.beta(0, 5), 1.0);
        assert!((w.beta(1, 5) - (250.0f64 / 253.0).sqrt()).abs() < 1e-15);
        assert!(w.beta(1_000_000, 0) < 0.01);
        let mut prev = 1.0;
        for n in 1..100 {
            let b = w.beta(n, 0);
            assert!(b < prev && b > 0.0);
            assert!((b + (1.0 - b) - 1.0).abs() < 1e-15);
            prev = b;
        }
    }

    #[test]
    fn update_touches_one_cell_per_transition() {
        let mut t = RaveTable::<f64>::new();
        let path = path_of("C(3,64)-C(3,64)-SM");
        t.update(&path, 0.7, &space());
        assert_eq!(t.len(), 3);
        for tr in &path {
            let key = NeighborKey::for_action(&tr.state, tr.action, &space());
            let e = t.stats(&key, tr.action);
            assert_eq!(e.visits, 1);
            assert!((e.reward - 0.7).abs() < 1e-15);
        }
        assert!(t.is_consistent());
    }

    #[test]
    fn similar_states_share_cells() {
        let sp = space();
        let s1 = state("C(3,64)-C(1,128)");
        let s2 = state("C(5,512)-C(3,64)");
        let a = act("C(3,256)");
        assert_eq!(NeighborKey::for_action(&s1, a, &sp), NeighborKey::for_action(&s2, a, &sp));
        // softmax keys differ by the previous action
        assert_ne!(
            NeighborKey::for_action(&s1, Action::TERMINATE, &sp),
            NeighborKey::for_action(&s2, Action::TERMINATE, &sp)
        );
        let s3 = state("C(3,64)-C(3,64)");
        let s4 = state("C(1,64)-C(3,64)");
        assert_eq!(
            NeighborKey::for_action(&s3, Action::TERMINATE, &sp),
            NeighborKey::for_action(&s4, Action::TERMINATE, &sp)
        );
        // different bin
        let s5 = state("C(3,64)-P(5,3)-C(3,64)-P(5,3)");
        let s6 = state("C(3,64)-C(1,64)-C(3,64)-C(1,64)");
        let s7 = state("C(3,64)-P(2,2)-C(3,64)-C(3,64)");
        assert_eq!(s5.rep_size(), 2);
        assert_ne!(NeighborKey::for_action(&s5, a, &sp), NeighborKey::for_action(&s6, a, &sp));
        assert_eq!(NeighborKey::for_action(&s7, a, &sp), NeighborKey::for_action(&s6, a, &sp));
    }

    #[test]
    fn pooled_stats_guide_unvisited_actions() {
        let sp = space();
        let s = ArchState::new(&sp);
        let a1 = act("C(3,64)");
        let a2 = act("C(5,64)");
        let mut tree = SearchTree::<f64, Action>::new("");
        tree.expand(0, a2, "C(5,64)");
        tree.backpropagate(&[(0, a2)], &[0], 0.5, 1.0).unwrap();
        let mut table = RaveTable::new();
        let key = NeighborKey::for_action(&s, a1, &sp);
        table.add(key, a1, 0.8);
        table.add(key, a1, 0.8);
        let w = RaveWeighting::default();
        // a1: 0.8 + 0.5·sqrt(ln 2 / 2); a2 has no pooled data: 0.5 + 0.5·sqrt(ln 1)
        let s1 = rave_score(tree.node(0).edge(a1), 1, table.stats(&key, a1), table.total(&key), &w, 0.5);
        let expected = 0.8 + 0.5 * (2f64.ln() / 2.0).sqrt();
        assert_eq!(s1, Score::Value(expected));
        let key2 = NeighborKey::for_action(&s, a2, &sp);
        let s2 = rave_score(tree.node(0).edge(a2), 1, table.stats(&key2, a2), 0, &w, 0.5);
        assert_eq!(s2, Score::Value(0.5));
        let mut rng = RunRng::seed_from_u64(3);
        let chosen = select_rave4nn(tree.node(0), &s, &[a1, a2], &table, &w, 0.5, &sp, &mut rng);
        assert_eq!(chosen, a1);
    }

    #[test]
    fn no_information_means_uniform() {
        let sp = space();
        let s = ArchState::new(&sp);
        let tree = SearchTree::<f64, Action>::new("");
        let table = RaveTable::new();
        let legal = s.legal_actions(3, &sp).unwrap();
        let mut rng = RunRng::seed_from_u64(9);
        let mut seen = std::collections::HashSet::new();
        for _ in 0..500 {
            seen.insert(select_rave4nn(tree.node(0), &s, &legal, &table, &RaveWeighting::default(), 0.5, &sp, &mut rng));
        }
        assert_eq!(seen.len(), legal.len());
    }
}
