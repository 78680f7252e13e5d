//! The rollout loop: tree policy inside the stored tree, one-node
//! expansion, uniformly random completion, evaluation and backpropagation.

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arch::{Action, ArchState, Constraints, SpaceConfig};
use crate::eval::{EvaluationService, Source};
use crate::num::Scalar;
use crate::policy::{Policy, RunRng, SelectionContext, Transition};
use crate::tree::{NodeId, SearchTree};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig<T> {
    pub gamma: T,
    pub initial_max_depth: usize,
    pub depth_increase_every: usize,
    pub rollout_budget: Option<u64>,
    pub cost_budget: Option<f64>,
    pub seed: u64,
    /// Consecutive convolutions required before each pooling layer.
    pub min_convs_before_pool: usize,
    /// Raise the minimum depth by one every this many rollouts.
    pub ramp_min_depth_every: Option<usize>,
    /// Abort after this many evaluator failures in a row.
    pub max_consecutive_failures: u64,
}

impl<T: Scalar> Default for SearchConfig<T> {
    fn default() -> Self {
        Self {
            gamma: T::one(),
            initial_max_depth: 3,
            depth_increase_every: 50,
            rollout_budget: None,
            cost_budget: None,
            seed: 0,
            min_convs_before_pool: 0,
            ramp_min_depth_every: None,
            max_consecutive_failures: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("a rollout budget or a cost budget is required")]
    NoBudget,
    #[error("rollout budget must be positive")]
    ZeroRollouts,
    #[error("cost budget must be positive and finite, got {0}")]
    BadCostBudget(f64),
    #[error("discount factor must lie in (0, 1], got {0}")]
    BadGamma(f64),
    #[error("depth increase interval must be positive")]
    ZeroDepthInterval,
    #[error("minimum depth ramp interval must be positive")]
    ZeroRampInterval,
    #[error("initial maximum depth must be positive")]
    ZeroInitialDepth,
}

impl<T: Scalar> SearchConfig<T> {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.rollout_budget.is_none() && self.cost_budget.is_none() {
            return Err(ConfigError::NoBudget);
        }
        if self.rollout_budget == Some(0) {
            return Err(ConfigError::ZeroRollouts);
        }
        if let Some(c) = self.cost_budget {
            if !(c.is_finite() && c > 0.0) {
                return Err(ConfigError::BadCostBudget(c));
            }
        }
        if !(self.gamma > T::zero() && self.gamma <= T::one()) {
            return Err(ConfigError::BadGamma(self.gamma.to_f64_lossy()));
        }
        if self.depth_increase_every == 0 {
            return Err(ConfigError::ZeroDepthInterval);
        }
        if self.ramp_min_depth_every == Some(0) {
            return Err(ConfigError::ZeroRampInterval);
        }
        if self.initial_max_depth == 0 {
            return Err(ConfigError::ZeroInitialDepth);
        }
        Ok(())
    }

    pub fn max_depth_at(&self, rollout: u64) -> usize {
        self.initial_max_depth + (rollout / self.depth_increase_every as u64) as usize
    }

    pub fn min_depth_at(&self, rollout: u64) -> usize {
        self.ramp_min_depth_every
            .map_or(0, |k| (rollout / k as u64) as usize)
            .min(self.max_depth_at(rollout))
    }

    pub fn constraints_at(&self, rollout: u64) -> Constraints {
        Constraints {
            max_depth: self.max_depth_at(rollout),
            min_depth: self.min_depth_at(rollout),
            min_convs_before_pool: self.min_convs_before_pool,
        }
    }
}

/// One completed rollout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutRecord {
    pub index: u64,
    pub architecture: String,
    pub reward: f64,
    pub cost_units: f64,
    pub cache_hit: bool,
    pub donor_distance: Option<u32>,
    #[serde(rename = "max_depth_at_rollout")]
    pub max_depth: usize,
}

/// A rollout whose evaluation failed. It consumed budget but left the
/// tree and the policy untouched.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutFailure {
    pub index: u64,
    pub architecture: String,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Step {
    Completed(RolloutRecord),
    Failed(RolloutFailure),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SearchError {
    #[error("evaluator failed {count} times in a row, last: {last}")]
    EvaluatorUnavailable { count: u64, last: String },
}

pub struct Search<T, P> {
    space: SpaceConfig,
    config: SearchConfig<T>,
    tree: SearchTree<T, Action>,
    policy: P,
    service: EvaluationService,
    rng: RunRng,
    next_index: u64,
    cumulative_cost: f64,
    consecutive_failures: u64,
    records: Vec<RolloutRecord>,
    failures: Vec<RolloutFailure>,
}

impl<T: Scalar, P: Policy<T>> Search<T, P> {
    pub fn new(
        space: SpaceConfig,
        config: SearchConfig<T>,
        policy: P,
        service: EvaluationService,
    ) -> Result<Self, ConfigError> {
        config.validate()?;
        let root = ArchState::new(&space).canonical_string();
        Ok(Self {
            space,
            rng: RunRng::seed_from_u64(config.seed),
            config,
            tree: SearchTree::new(root),
            policy,
            service,
            next_index: 0,
            cumulative_cost: 0.0,
            consecutive_failures: 0,
            records: Vec::new(),
            failures: Vec::new(),
        })
    }

    pub fn tree(&self) -> &SearchTree<T, Action> {
        &self.tree
    }

    pub fn policy(&self) -> &P {
        &self.policy
    }

    pub fn service(&self) -> &EvaluationService {
        &self.service
    }

    pub fn records(&self) -> &[RolloutRecord] {
        &self.records
    }

    pub fn failures(&self) -> &[RolloutFailure] {
        &self.failures
    }

    pub fn cumulative_cost(&self) -> f64 {
        self.cumulative_cost
    }

    pub fn rollouts_attempted(&self) -> u64 {
        self.next_index
    }

    pub fn budget_exhausted(&self) -> bool {
        self.config.rollout_budget.is_some_and(|b| self.next_index >= b)
            || self.config.cost_budget.is_some_and(|b| self.cumulative_cost >= b)
    }

    /// Runs one rollout regardless of the budget.
    pub fn step(&mut self) -> Step {
        let index = self.next_index;
        self.next_index += 1;
        let limits = self.config.constraints_at(index);
        let space = self.space.clone();

        let mut state = ArchState::new(&space);
        let mut path: Vec<Transition> = Vec::new();
        let mut edges: Vec<(NodeId, Action)> = Vec::new();
        let mut expansion: Option<(NodeId, Action, String)> = None;
        let mut node = SearchTree::<T, Action>::ROOT;

        // selection inside the stored tree
        while !state.is_terminal() {
            let legal = state.legal_actions_within(&space, &limits).expect("state is not terminal");
            let ctx = SelectionContext {
                node: self.tree.node(node),
                state: &state,
                legal: &legal,
                space: &space,
            };
            let action = self.policy.select(&ctx, &mut self.rng);
            debug_assert!(legal.contains(&action), "policy chose an illegal action");
            edges.push((node, action));
            path.push(Transition { state: state.clone(), action });
            state = state.apply(action, &space).expect("policy chose a legal action");
            match self.tree.child(node, action) {
                Some(child) => node = child,
                None => {
                    expansion = Some((node, action, state.canonical_string()));
                    break;
                }
            }
        }

        // uniformly random completion
        while !state.is_terminal() {
            let legal = state.legal_actions_within(&space, &limits).expect("state is not terminal");
            let action = legal[self.rng.random_range(0..legal.len())];
            path.push(Transition { state: state.clone(), action });
            state = state.apply(action, &space).expect("legal action");
        }

        let architecture = state.canonical_string();
        let outcome = match self.service.evaluate(&state) {
            Ok(o) => o,
            Err(e) => {
                log::error!("rollout {index}: evaluation of {architecture} failed: {e}");
                self.consecutive_failures += 1;
                let failure = RolloutFailure {
                    index,
                    architecture,
                    error: e.to_string(),
                };
                self.failures.push(failure.clone());
                return Step::Failed(failure);
            }
        };
        self.consecutive_failures = 0;

        if let Some((parent, action, key)) = expansion {
            self.tree.expand(parent, action, key);
        }
        let reward = T::lit(outcome.evaluation.accuracy);
        let last = path.len() - 1;
        let steps: Vec<usize> = (0..edges.len()).map(|i| last - i).collect();
        self.tree
            .backpropagate(&edges, &steps, reward, self.config.gamma)
            .expect("rollout path follows stored links");
        self.policy.observe(&path, reward, &space);

        self.cumulative_cost += outcome.evaluation.cost_units;
        let record = RolloutRecord {
            index,
            architecture,
            reward: outcome.evaluation.accuracy,
            cost_units: outcome.evaluation.cost_units,
            cache_hit: outcome.evaluation.source == Source::Cache,
            donor_distance: outcome.donor.map(|d| d.distance),
            max_depth: limits.max_depth,
        };
        self.records.push(record.clone());
        Step::Completed(record)
    }

    /// Steps until the budget is spent.
    pub fn run(&mut self) -> Result<(), SearchError> {
        while !self.budget_exhausted() {
            if let Step::Failed(f) = self.step() {
                if self.consecutive_failures >= self.config.max_consecutive_failures {
                    return Err(SearchError::EvaluatorUnavailable {
                        count: self.consecutive_failures,
                        last: f.error,
                    });
                }
            }
        }
        Ok(())
    }

    pub fn into_parts(self) -> (Vec<RolloutRecord>, Vec<RolloutFailure>, P, EvaluationService) {
        (self.records, self.failures, self.policy, self.service)
    }
}
