//! Deterministic simulator for federated fine-tuning with low-rank adapters.
//!
//! The crate covers the alternating-freeze protocol (RoLoRA) and its
//! baselines (FFA-LoRA, factor-wise FedAvg, FlexLoRA, FLoRA stacking), the
//! linear and two-layer ReLU task models, closed-form convergence oracles for
//! the rank-1 linear case, and the experiment runner behind the `fedlora` CLI.

pub mod error;
pub mod experiment;
pub mod linalg;

pub use error::{Error, Result};
pub mod idx;
pub mod lora;
pub mod sim;
pub mod task;
pub mod theory;
pub mod verify;
