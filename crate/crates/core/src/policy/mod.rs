//! Tree policies: the rules that pick an action at a stored node.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::arch::{Action, ArchState, SpaceConfig};
use crate::num::Scalar;
use crate::tree::TreeNode;

pub mod crp;
pub mod rave;
pub mod uct;

pub use crp::{select_crp, CrpPolicy, DepthStats};
pub use rave::{select_rave4nn, NeighborKey, Rave4nnPolicy, RaveTable, RaveWeighting, SimilarityClass};
pub use uct::{select_uct, UctPolicy};

/// Random source threaded through a whole run.
pub type RunRng = ChaCha8Rng;

/// One step of a rollout: the state before the move and the move taken.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Transition {
    pub state: ArchState,
    pub action: Action,
}

pub struct SelectionContext<'a, T> {
    pub node: &'a TreeNode<T, Action>,
    pub state: &'a ArchState,
    pub legal: &'a [Action],
    pub space: &'a SpaceConfig,
}

pub trait Policy<T: Scalar>: Send {
    fn name(&self) -> &'static str;

    /// Chooses one of `ctx.legal` (never empty).
    fn select(&mut self, ctx: &SelectionContext<'_, T>, rng: &mut RunRng) -> Action;

    /// Called once per completed rollout with the full terminal path,
    /// including the uniformly random completion.
    fn observe(&mut self, _path: &[Transition], _reward: T, _space: &SpaceConfig) {}
}

/// Score of a candidate action. `Untried` outranks every value.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Score<T> {
    Untried,
    Value(T),
}

/// Uniform choice among untried candidates if any, else argmax with
/// uniformly random tie-breaking.
pub fn pick<A: Copy, T: Scalar>(scored: &[(A, Score<T>)], rng: &mut RunRng) -> A {
    assert!(!scored.is_empty(), "no candidate actions");
    let untried: Vec<A> = scored
        .iter()
        .filter(|(_, s)| matches!(s, Score::Untried))
        .map(|(a, _)| *a)
        .collect();
    if !untried.is_empty() {
        return untried[rng.random_range(0..untried.len())];
    }
    let value = |s: &Score<T>| match s {
        Score::Value(v) => *v,
        Score::Untried => unreachable!(),
    };
    let best = scored
        .iter()
        .map(|(_, s)| value(s))
        .fold(T::neg_infinity(), T::max);
    let ties: Vec<A> = scored
        .iter()
        .filter(|(_, s)| value(s) == best)
        .map(|(a, _)| *a)
        .collect();
    if ties.is_empty() {
        // every score is NaN
        return scored[rng.random_range(0..scored.len())].0;
    }
    ties[rng.random_range(0..ties.len())]
}

/// Uniformly random tree policy.
#[derive(Clone, Debug, Default)]
pub struct RandomPolicy;

impl<T: Scalar> Policy<T> for RandomPolicy {
    fn name(&self) -> &'static str {
        "random"
    }

    fn select(&mut self, ctx: &SelectionContext<'_, T>, rng: &mut RunRng) -> Action {
        ctx.legal[rng.random_range(0..ctx.legal.len())]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;

    #[test]
    fn untried_first() {
        let mut rng = RunRng::seed_from_u64(1);
        let scored = [(0u8, Score::Value(10.0)), (1, Score::Untried), (2, Score::Value(3.0))];
        for _ in 0..20 {
            assert_eq!(pick(&scored, &mut rng), 1);
        }
    }

    #[test]
    fn ties_are_split_uniformly() {
        let mut rng = RunRng::seed_from_u64(2);
        let scored = [(0u8, Score::Value(1.0)), (1, Score::Value(1.0)), (2, Score::Value(0.5))];
        let mut counts = [0usize; 3];
        for _ in 0..4000 {
            counts[pick(&scored, &mut rng) as usize] += 1;
        }
        assert_eq!(counts[2], 0);
        assert!(counts[0] > 1800 && counts[1] > 1800, "{counts:?}");
    }

    proptest! {
        #[test]
        fn argmax_invariant_under_shift(
            values in proptest::collection::vec(-64i32..64, 1..12),
            shift in -32i32..32,
            seed in any::<u64>(),
        ) {
            // dyadic values keep the shift exact
            let base: Vec<(usize, Score<f64>)> = values.iter().enumerate()
                .map(|(i, &v)| (i, Score::Value(v as f64 / 4.0))).collect();
            let moved: Vec<(usize, Score<f64>)> = values.iter().enumerate()
                .map(|(i, &v)| (i, Score::Value(v as f64 / 4.0 + shift as f64))).collect();
            let mut r1 = RunRng::seed_from_u64(seed);
            let mut r2 = RunRng::seed_from_u64(seed);
            prop_assert_eq!(pick(&base, &mut r1), pick(&moved, &mut r2));
        }
    }
}
