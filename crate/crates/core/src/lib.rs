//! Differentiable soft-robot locomotion: mass-spring and MLS-MPM simulators
//! with hand-written adjoints, a small neural controller, locomotion losses,
//! and a batched training loop.

pub mod ablation;
pub mod agent;
pub mod checkpoint;
pub mod controller;
pub mod error;
pub mod gradcheck;
pub mod mass_spring;
pub mod mpm;
pub mod objectives;
pub mod optim;
pub mod protocol;
pub mod session;
pub mod sim;
pub mod trainer;

pub use agent::{center_of_mass, highest_point, load_design, lowest_point, AgentDesign, DesignKind, SimState, Vec2, Mat2};
pub use error::{DesignError, Error, Result};
