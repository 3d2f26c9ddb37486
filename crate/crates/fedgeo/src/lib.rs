//! Deterministic federated-learning simulator for user next-location
//! prediction.
//!
//! The crate simulates a server coordinating many clients that each hold a
//! private trajectory dataset over a gridded geography. On top of plain
//! FedAvg/FedProx it implements the FedGeo algorithm:
//!
//! - geographic adjacency alignment (GAA): the embedding layer is blended
//!   with its geographic neighbors through a row-stochastic spatial weight
//!   matrix before every broadcast,
//! - layer-wise similarity aggregation (LWA): client layers are combined
//!   with softmax weights from scaled dot products against the FedAvg
//!   temporary model,
//! - entropy-based sampling (EBS): clients participate proportionally to
//!   the entropy of their location distribution.
//!
//! Everything is seed-deterministic: identical configs reproduce identical
//! round logs bit for bit.

mod fsio;

pub mod experiment;
pub mod federation;
pub mod geogrid;
pub mod metrics;
pub mod mobility;
pub mod model;
pub mod seed;
