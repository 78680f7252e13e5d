use crate::arch::Action;
use crate::num::Scalar;
use crate::tree::TreeNode;

use super::{pick, Policy, RunRng, Score, SelectionContext};

/// UCB1 over the stored edge statistics: untried actions first, then
/// `R/n + c·sqrt(ln(N)/n)`.
pub fn select_uct<T: Scalar, A: Copy + Ord>(
    node: &TreeNode<T, A>,
    legal: &[A],
    c: T,
    rng: &mut RunRng,
) -> A {
    let parent = T::from_count(node.visits());
    let scored: Vec<(A, Score<T>)> = legal
        .iter()
        .map(|&a| {
            let e = node.edge(a);
            if e.visits == 0 {
                return (a, Score::Untried);
            }
            let n = T::from_count(e.visits);
            (a, Score::Value(e.reward / n + c * (parent.ln() / n).sqrt()))
        })
        .collect();
    pick(&scored, rng)
}

#[derive(Clone, Debug)]
pub struct UctPolicy<T> {
    pub c: T,
}

impl<T: Scalar> Policy<T> for UctPolicy<T> {
    fn name(&self) -> &'static str {
        "uct"
    }

    fn select(&mut self, ctx: &SelectionContext<'_, T>, rng: &mut RunRng) -> Action {
        select_uct(ctx.node, ctx.legal, self.c, rng)
    }
}
