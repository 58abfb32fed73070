//! Distributed coupled-policy gradient for networked multi-agent RL.
//!
//! Agents sit on an undirected communication graph. Each agent runs a tabular
//! softmax policy whose logits mix its own parameters with those of its
//! `kappa_p`-hop neighbours, estimates a policy gradient from a single
//! geometric two-horizon rollout, and tracks every other agent's parameters
//! with a push-sum protocol over a column-stochastic weight matrix.
//!
//! The [`oracle`] module computes every quantity the estimator targets by
//! exact enumeration on small instances, so the stochastic pieces can be
//! checked against closed-form values.

pub mod envs;
pub mod error;
pub mod estimator;
pub mod model;
pub mod netgraph;
pub mod oracle;
pub mod policy;
pub mod pushsum;
pub mod rng;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
pub use model::{FactoredModel, InitialDistribution};
pub use netgraph::{AgentGraph, HopNeighborhood, WeightMatrix};
pub use policy::{EstimatedParams, MixingSpec, ParamAccess, ParamLayout, PolicyParams, SoftmaxPolicy};
pub use pushsum::PushSumState;
pub use trainer::{run_dscp, DscpConfig, TrainOutput, TrainRecord};
