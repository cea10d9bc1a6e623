//! Norm diffusion as log-linear response in a 2x2 coordination game played on
//! a weighted graph, driven by pluggable schedulers.
//!
//! The crate has two halves. The simulation side ([`dynamics`], [`scheduler`],
//! [`experiments`]) runs trajectories and Monte-Carlo studies. The exact side
//! ([`exact`]) builds the full Markov chain for small instances and answers
//! questions about stationary distributions, resistances and stochastically
//! stable states by linear algebra and minimum arborescences.

pub mod arborescence;
pub mod dynamics;
pub mod error;
pub mod exact;
pub mod experiments;
pub mod graph;
pub mod model;
pub mod rng;
pub mod scheduler;

pub use error::{Error, Result};
pub use graph::{Family, WeightedGraph};
pub use model::{Beta, Configuration, ModelParams, PayoffMatrix, Strategy};
pub use scheduler::SchedulerSpec;
