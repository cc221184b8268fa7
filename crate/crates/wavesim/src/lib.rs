//! Single-lane mixed-autonomy traffic simulation toolkit.
//!
//! The crate simulates a platoon of vehicles behind a trajectory-replaying
//! leader: human drivers follow a calibrated car-following law, while
//! controlled vehicles run a policy (neural, scripted, or random) behind
//! safety wrappers. On top of the simulator sit a coarse-data target-speed
//! planner, a fuel/energy metric suite, a probabilistic lane-change model for
//! evaluation, and a desk-scale PPO trainer with manual backpropagation.
//!
//! Everything is deterministic under a fixed seed: all randomness flows
//! through explicitly seeded ChaCha streams, and simulation state updates in
//! a fixed documented order.

pub mod config;
pub mod control;
pub mod data;
pub mod dynamics;
pub mod energy;
pub mod error;
pub mod lanechange;
pub mod nn;
pub mod planner;
pub mod rl;
pub mod sim;
pub mod vehicle;

pub use config::SimConfig;
pub use error::{Result, SimError};
