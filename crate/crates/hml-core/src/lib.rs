//! Simulation, fitting, and verification toolkit for a synergy-based model
//! of human motor learning in a target-capture game.
//!
//! The model couples a perception filter, gradient-based forward learning
//! of the body-to-cursor mapping, and gradient-based inverse learning of
//! joint velocities, all integrated by Euler-Maruyama. Around the dynamics
//! sit the game protocol (sessions, trials, capture detection), the
//! performance metrics, an NSGA-II parameter fitter, Monte Carlo trade-off
//! studies, and numerical checks of the convergence theory.

pub mod analysis;
pub mod fitting;
pub mod io;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod stats;
pub mod synergy;
pub mod synthetic;
pub mod task;
pub mod theory;
