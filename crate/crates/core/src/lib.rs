//! Clustered mixture-of-experts engine.
//!
//! Experts are grouped online by a fused parameter/activation similarity,
//! each group is stored as a shared base plus per-expert low-rank residuals,
//! and tokens are routed in two stages (group, then expert). Supporting
//! modules quantize residuals to INT4, simulate all-to-all traffic and
//! offloading, and run the training protocol end to end.

pub mod error;
mod io;
pub mod numerics;
pub mod rng;
pub mod expert_bank;
pub mod clustering;
pub mod compression;
pub mod quantization;
pub mod routing;
pub mod comm_sim;
pub mod memory_manager;
pub mod trainer;

pub use error::{MoeError, Result};
