//! Assembly sequence planning over subassembly lattices: a voxel world, a
//! feasibility oracle, a graph Q-network trained with double Q-learning, and
//! search procedures that turn learned scores into validated plans.
//!
//! The network and training code are generic over [`scalar::Scalar`]; the
//! aliases below fix the scalar for the common cases.

pub mod asp_graph;
pub mod feasibility;
pub mod fixtures;
pub mod gnn;
pub mod harness;
pub mod rl;
pub mod scalar;
pub mod search;
pub mod world;

pub use scalar::Scalar;

pub type QNet = gnn::QNetParams<f64>;
pub type QNet32 = gnn::QNetParams<f32>;
pub type Features = gnn::NodeFeatures<f64>;
pub type Features32 = gnn::NodeFeatures<f32>;
pub type Env = rl::Environment<f64>;
pub type Env32 = rl::Environment<f32>;
pub type Trainer = rl::Learner<f64>;
pub type Trainer32 = rl::Learner<f32>;
