//! Core library for a simulated GUI control stack: a deterministic windowed
//! environment, structured screen perception, a small transformer policy with
//! value heads, search oracles, and a hybrid imitation + offline RL trainer.

pub mod autodiff;
pub mod diagnostics;
pub mod env;
pub mod eval;
pub mod oracle;
pub mod perception;
pub mod policy;
pub mod rng;
pub mod suite;
pub mod trainer;
