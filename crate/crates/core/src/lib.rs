//! Diversity-regularized trajectory-guided driving policy, end to end: a
//! small reverse-mode autodiff engine, the full training loss suite with a
//! feature-diversity regularizer, a two-branch GRU policy network, PID-based
//! trajectory tracking with situational action fusion, a deterministic 2D
//! kinematic driving simulator with CARLA-style scoring, and a saliency
//! interpretability pipeline (principal-component saliency, shared-interest
//! metrics, saliency-control correlation).

pub mod autodiff;
pub mod controller;
pub mod error;
pub mod harness;
pub mod interpret;
pub mod losses;
pub mod sim;
pub mod model;
pub mod policy;
pub mod types;

pub use error::{Error, Result};
