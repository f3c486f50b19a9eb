//! Minimum-time trajectory planning by Chebyshev pseudospectral collocation,
//! with smooth segment-sphere avoidance constraints and a high-rate
//! artificial-potential-field correction, plus a closed-loop simulator.
//!
//! The pipeline: [`nlp::assemble`] turns a boundary-value problem and an
//! obstacle snapshot into an NLP over node states, node controls and the
//! maneuver time; [`nlp::solve`] runs an augmented Lagrangian method with
//! derivatives from [`autodiff`]; [`executor::run`] replans in the background
//! while the controller blends the plan's command with [`apf`] repulsion.

pub mod apf;
pub mod autodiff;
pub mod chebyshev;
pub mod config;
pub mod executor;
pub mod geometry;
pub mod metrics;
pub mod model;
pub mod nlp;

pub use config::ScenarioConfig;
pub use model::Vec3;
