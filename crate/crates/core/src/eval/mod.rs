//! Reward oracles and the run-wide evaluation cache.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arch::ArchState;
use crate::net2net::{CostModel, Donor, DonorIndex};

pub mod external;
pub mod protocol;
pub mod surrogate;
pub mod tabular;

pub use external::ExternalBackend;
pub use protocol::{ProtocolClient, ProtocolError};
pub use surrogate::{surrogate_reward, SurrogateBackend, SurrogateConfig};
pub use tabular::{TabularBackend, TabularError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Surrogate,
    Tabular,
    External,
    Cache,
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Source::Surrogate => "surrogate",
            Source::Tabular => "tabular",
            Source::External => "external",
            Source::Cache => "cache",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    pub cost_units: f64,
    pub source: Source,
}

/// Donor information passed along with an evaluation request.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WarmStart {
    pub donor: String,
    pub distance: u32,
}

impl From<&Donor> for WarmStart {
    fn from(d: &Donor) -> Self {
        Self {
            donor: d.architecture.clone(),
            distance: d.distance,
        }
    }
}

/// What a backend reports for one architecture.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BackendResult {
    pub accuracy: f64,
    /// Cost reported by the backend; `None` defers to the cost model.
    pub cost_units: Option<f64>,
    pub source: Source,
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("architecture `{0}` is not terminal")]
    NotTerminal(String),
    #[error("accuracy {accuracy} for `{architecture}` is outside [0, 1]")]
    OutOfRange { architecture: String, accuracy: f64 },
    #[error("cost {cost} for `{architecture}` is negative or not finite")]
    InvalidCost { architecture: String, cost: f64 },
    #[error(transparent)]
    Tabular(#[from] TabularError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
}

pub trait Backend: Send {
    fn name(&self) -> &'static str;

    /// Evaluates a terminal architecture. Called at most once per
    /// architecture by [`EvaluationService`].
    fn evaluate(&mut self, state: &ArchState, warm_start: Option<&WarmStart>) -> Result<BackendResult, EvalError>;
}

/// Result of one lookup through the service.
#[derive(Clone, Debug, PartialEq)]
pub struct Outcome {
    pub evaluation: Evaluation,
    /// Donor used for a warm start. Always `None` on a cache hit.
    pub donor: Option<Donor>,
}

/// Cache, donor search and cost accounting in front of a backend.
pub struct EvaluationService {
    backend: Box<dyn Backend>,
    cache: HashMap<String, f64>,
    donors: DonorIndex,
    cost: CostModel,
    backend_calls: u64,
    backend_failures: u64,
}

impl EvaluationService {
    pub fn new(backend: Box<dyn Backend>) -> Self {
        Self::with_models(backend, DonorIndex::default(), CostModel::default())
    }

    pub fn with_models(backend: Box<dyn Backend>, donors: DonorIndex, cost: CostModel) -> Self {
        Self {
            backend,
            cache: HashMap::new(),
            donors,
            cost,
            backend_calls: 0,
            backend_failures: 0,
        }
    }

    pub fn backend_name(&self) -> &'static str {
        self.backend.name()
    }

    /// Successful backend evaluations so far.
    pub fn backend_calls(&self) -> u64 {
        self.backend_calls
    }

    pub fn backend_failures(&self) -> u64 {
        self.backend_failures
    }

    pub fn cached(&self, canonical: &str) -> Option<f64> {
        self.cache.get(canonical).copied()
    }

    pub fn evaluate(&mut self, state: &ArchState) -> Result<Outcome, EvalError> {
        let key = state.canonical_string();
        if !state.is_terminal() {
            return Err(EvalError::NotTerminal(key));
        }
        if let Some(&accuracy) = self.cache.get(&key) {
            return Ok(Outcome {
                evaluation: Evaluation {
                    accuracy,
                    cost_units: 0.0,
                    source: Source::Cache,
                },
                donor: None,
            });
        }
        let donor = self.donors.find_donor(state);
        let warm = donor.as_ref().map(WarmStart::from);
        let result = match self.backend.evaluate(state, warm.as_ref()) {
            Ok(r) => r,
            Err(e) => {
                self.backend_failures += 1;
                return Err(e);
            }
        };
        if !(0.0..=1.0).contains(&result.accuracy) {
            self.backend_failures += 1;
            return Err(EvalError::OutOfRange {
                architecture: key,
                accuracy: result.accuracy,
            });
        }
        let cost_units = result
            .cost_units
            .unwrap_or_else(|| self.cost.evaluation_cost(donor.is_some()));
        if !(cost_units.is_finite() && cost_units >= 0.0) {
            self.backend_failures += 1;
            return Err(EvalError::InvalidCost {
                architecture: key,
                cost: cost_units,
            });
        }
        self.backend_calls += 1;
        self.cache.insert(key, result.accuracy);
        self.donors.insert(state, result.accuracy);
        Ok(Outcome {
            evaluation: Evaluation {
                accuracy: result.accuracy,
                cost_units,
                source: result.source,
            },
            donor,
        })
    }
}
