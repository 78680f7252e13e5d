//! Monte Carlo planning over layer-by-layer convolutional architectures.
//!
//! The numeric core (GP regression, tree statistics, policies) is generic
//! over [`num::Scalar`]; the aliases below fix it to `f64` for the engine.

pub mod arch;
pub mod crp_model;
pub mod eval;
pub mod experiment;
pub mod gp;
pub mod net2net;
pub mod num;
pub mod policy;
pub mod report;
pub mod search;
pub mod tree;

pub use arch::{Action, ArchState, SpaceConfig};

/// Scalar used by the engine and the CLI.
pub type Real = f64;

pub type Tree = tree::SearchTree<Real, Action>;
pub type Gp = gp::GpModel<Real>;
pub type GpF32 = gp::GpModel<f32>;
pub type CrpModel = crp_model::CrpModel<Real>;
pub type Crp = policy::CrpPolicy<Real>;
pub type Rave4nn = policy::Rave4nnPolicy<Real>;
pub type Uct = policy::UctPolicy<Real>;
pub type RaveTable = policy::RaveTable<Real>;
pub type Engine<P> = search::Search<Real, P>;
