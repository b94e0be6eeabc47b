//! Meta-learned channel pruning.
//!
//! A [`PruningNet`](pruningnet::PruningNet) generates convolution weights for
//! any channel configuration of a target network. Training samples a random
//! configuration per step, so after training every pruned structure can be
//! scored on held-out data without fine-tuning. An evolutionary search then
//! picks the most accurate structure under a FLOPs or latency budget, and
//! the winner is trained from scratch.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod cost;
pub mod data;
pub mod error;
pub mod eval;
pub mod evosearch;
pub mod kernels;
pub mod netdef;
pub mod network;
pub mod pruningnet;
pub mod report;
pub mod rng;
pub mod tensor;
pub mod train;

pub use autodiff::{BnMode, BnState, RunningUpdate, Tape, Var};
pub use checkpoint::Checkpoint;
pub use error::{Error, Result};
pub use netdef::{Gene, NetworkTemplate};
pub use tensor::Tensor;
