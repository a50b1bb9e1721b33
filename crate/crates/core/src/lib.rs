//! Delay-optimal power control for an energy-harvesting point-to-point link.
//!
//! * [`numerics`]: `E₁`, root finding, channel expectations `F`/`G`.
//! * [`priority`]: regime classification and closed-form priority functions.
//! * [`policies`]: the water-filling policy and three baselines.
//! * [`mdp`]: discretized average-cost MDP oracle.
//! * [`vcts`]: reflected fluid model.
//! * [`sim`]: seeded slot-level simulator.
//! * [`config`]: TOML experiment configuration.

pub mod config;
pub mod mdp;
pub mod numerics;
pub mod params;
pub mod policies;
pub mod priority;
pub mod sim;
pub mod vcts;

pub use params::{SystemParams, SystemState};
