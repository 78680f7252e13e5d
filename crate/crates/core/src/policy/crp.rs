use std::collections::BTreeMap;

use crate::arch::{Action, ArchState, SpaceConfig};
use crate::crp_model::{CrpConfig, CrpModel};
use crate::num::Scalar;

use super::{pick, Policy, RunRng, Score, SelectionContext, Transition};

/// Per-depth visit counts `n_d` and `n_{d,a}`, where `d` is the depth of
/// the successor state (layers, softmax included).
#[derive(Clone, Debug, Default)]
pub struct DepthStats {
    depths: BTreeMap<usize, (u64, BTreeMap<Action, u64>)>,
}

impl DepthStats {
    pub fn new() -> Self {
        Self::default()
    }

    /// Depth index used for choosing an action in `state`.
    pub fn depth_of(state: &ArchState) -> usize {
        state.actions().len() + 1
    }

    pub fn record(&mut self, path: &[Transition]) {
        for t in path {
            let slot = self
                .depths
                .entry(Self::depth_of(&t.state))
                .or_default();
            slot.0 += 1;
            *slot.1.entry(t.action).or_default() += 1;
        }
    }

    pub fn reached(&self, depth: usize) -> u64 {
        self.depths.get(&depth).map_or(0, |d| d.0)
    }

    pub fn chosen(&self, depth: usize, action: Action) -> u64 {
        self.depths
            .get(&depth)
            .and_then(|d| d.1.get(&action).copied())
            .unwrap_or(0)
    }

    pub fn is_consistent(&self) -> bool {
        self.depths
            .values()
            .all(|(n, per)| *n == per.values().sum::<u64>())
    }
}

/// `argmax R̂(s,a) + c·sqrt(ln(n_d) / n_{d,a})`, untried depth-action pairs
/// first.
pub fn select_crp<T: Scalar>(
    state: &ArchState,
    legal: &[Action],
    model: &mut CrpModel<T>,
    depth_stats: &DepthStats,
    c: T,
    space: &SpaceConfig,
    rng: &mut RunRng,
) -> Action {
    let d = DepthStats::depth_of(state);
    let reached = T::from_count(depth_stats.reached(d));
    let scored: Vec<(Action, Score<T>)> = legal
        .iter()
        .map(|&a| {
            let n = depth_stats.chosen(d, a);
            if n == 0 {
                return (a, Score::Untried);
            }
            let predicted = model
                .predict_reward(state, a, space)
                .expect("legal action encodes");
            let bonus = c * (reached.ln() / T::from_count(n)).sqrt();
            (a, Score::Value(predicted + bonus))
        })
        .collect();
    pick(&scored, rng)
}

#[derive(Clone, Debug)]
pub struct CrpPolicy<T> {
    pub c: T,
    pub model: CrpModel<T>,
    pub depth_stats: DepthStats,
}

impl<T: Scalar> CrpPolicy<T> {
    pub fn new(c: T, config: CrpConfig<T>) -> Self {
        Self {
            c,
            model: CrpModel::new(config),
            depth_stats: DepthStats::new(),
        }
    }
}

impl<T: Scalar> Policy<T> for CrpPolicy<T> {
    fn name(&self) -> &'static str {
        "crp"
    }

    fn select(&mut self, ctx: &SelectionContext<'_, T>, rng: &mut RunRng) -> Action {
        select_crp(
            ctx.state,
            ctx.legal,
            &mut self.model,
            &self.depth_stats,
            self.c,
            ctx.space,
            rng,
        )
    }

    fn observe(&mut self, path: &[Transition], reward: T, space: &SpaceConfig) {
        self.depth_stats.record(path);
        if let Err(e) = self.model.record(path, reward, space) {
            log::error!("could not record rollout for reward prediction: {e}");
        }
    }
}
