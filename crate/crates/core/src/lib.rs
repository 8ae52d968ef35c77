//! Low-rank plus sparse composite MDPs: instance generation, constrained
//! least-squares estimation of the transition core, optimistic Q-learning
//! (single task and transfer) and exact dynamic-programming ground truth.
//!
//! Everything numerical is generic over [`Real`] (`f32` or `f64`); the
//! aliases below fix the scalar to `f64`.

pub mod agents;
pub mod error;
pub mod estimation;
pub mod instance_gen;
pub mod io;
pub mod linalg;
pub mod mdp;
pub mod oracle;
pub mod scalar;

pub use error::{Error, Result};
pub use scalar::Real;

pub type Mdp = mdp::CompositeMdp<f64>;
pub type Features = mdp::FeatureTables<f64>;
pub type Regularity = mdp::RegularityConstants<f64>;
pub type Pair = instance_gen::TaskPair<f64>;
pub type Data = estimation::RegressionData<f64>;
pub type Estimate = estimation::EstimatorState<f64>;
pub type Values = oracle::ValueTables<f64>;
pub type Trace = agents::RunTrace<f64>;
