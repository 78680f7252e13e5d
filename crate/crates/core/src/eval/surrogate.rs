//! Closed-form stand-in for training: a pseudo-accuracy computed from layer
//! counts and the parameter count.
//!
//! ```text
//! score = w_conv·min(n_conv, 6) + w_pool·min(n_pool, 3)
//!       − w_fc_penalty·|n_fc − 1| − w_param·|ln(params) − target_log_params|
//! accuracy = clamp(0.5 + 0.5·tanh(score − 1), 0, 1)
//! ```
//!
//! With `noise_std > 0`, Gaussian noise truncated to keep the result in
//! `[0, 1]` is added. The noise stream for an architecture is seeded from a
//! SHA-256 digest of the run seed and the canonical string, so the value is
//! a pure function of both.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::arch::ArchState;

use super::{Backend, BackendResult, EvalError, Source, WarmStart};

/// Bumped whenever the formula or its defaults change.
pub const SURROGATE_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurrogateConfig {
    pub w_conv: f64,
    pub w_pool: f64,
    pub w_fc_penalty: f64,
    pub w_param: f64,
    pub target_log_params: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        Self {
            w_conv: 0.25,
            w_pool: 0.15,
            w_fc_penalty: 0.1,
            w_param: 0.05,
            target_log_params: 1e6f64.ln(),
            noise_std: 0.0,
            seed: 0,
        }
    }
}

/// Noiseless score before the squashing.
pub fn surrogate_score(state: &ArchState, cfg: &SurrogateConfig) -> f64 {
    let n_conv = state.count_where(|a| a.is_conv()).min(6) as f64;
    let n_pool = state.count_where(|a| a.is_pool()).min(3) as f64;
    let n_fc = state.count_where(|a| a.is_fc()) as f64;
    let log_params = (state.total_params() as f64).ln();
    cfg.w_conv * n_conv + cfg.w_pool * n_pool
        - cfg.w_fc_penalty * (n_fc - 1.0).abs()
        - cfg.w_param * (log_params - cfg.target_log_params).abs()
}

pub fn surrogate_reward(state: &ArchState, cfg: &SurrogateConfig) -> f64 {
    let base = (0.5 + 0.5 * (surrogate_score(state, cfg) - 1.0).tanh()).clamp(0.0, 1.0);
    if cfg.noise_std > 0.0 {
        add_noise(base, &state.canonical_string(), cfg)
    } else {
        base
    }
}

fn add_noise(base: f64, canonical: &str, cfg: &SurrogateConfig) -> f64 {
    let mut hasher = Sha256::new();
    hasher.update(cfg.seed.to_le_bytes());
    hasher.update(canonical.as_bytes());
    let mut rng = ChaCha8Rng::from_seed(hasher.finalize().into());
    let normal = Normal::new(0.0, cfg.noise_std).expect("noise_std is finite and positive");
    for _ in 0..1000 {
        let v = base + normal.sample(&mut rng);
        if (0.0..=1.0).contains(&v) {
            return v;
        }
    }
    base
}

#[derive(Clone, Debug, Default)]
pub struct SurrogateBackend {
    pub config: SurrogateConfig,
}

impl SurrogateBackend {
    pub fn new(config: SurrogateConfig) -> Self {
        Self { config }
    }
}

impl Backend for SurrogateBackend {
    fn name(&self) -> &'static str {
        "surrogate"
    }

    fn evaluate(&mut self, state: &ArchState, _: Option<&WarmStart>) -> Result<BackendResult, EvalError> {
        Ok(BackendResult {
            accuracy: surrogate_reward(state, &self.config),
            cost_units: None,
            source: Source::Surrogate,
        })
    }
}
