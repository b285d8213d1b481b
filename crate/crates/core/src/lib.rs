//! Desk-scale vision + robot-state force estimation for teleoperated
//! surgical manipulation: synthetic data generation, four estimator
//! network variants, a physics baseline, evaluation, and a real-time
//! loop-rate benchmark.

pub mod bench;
pub mod cli;
pub mod data;
pub mod error;
pub mod evaluator;
pub mod imgproc;
pub mod nets;
pub mod physics;
pub mod sim;
pub mod tensor;
pub mod trainer;

pub use cli::run_cli;
pub use error::{Error, Result};
