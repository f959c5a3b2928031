//! Teacher / compressed-student distillation on a byte-level toy language
//! model.

pub mod checkpoint;
pub mod corpus;
pub mod loss;
pub mod model;
pub mod pipeline;
pub mod sensitivity;
pub mod train;

use serde::{Deserialize, Serialize};

use crate::adapter::AdapterMode;
use crate::error::{CuaError, Result};
use crate::qemu::{ChannelParams, EmulationMode};

pub use corpus::Corpus;
pub use loss::{kd_loss, kd_loss_grad, KdLoss};
pub use model::{build_toy_lm, insert_adapters, AdapterExec, Projector, ToyLm, ToyLmConfig};
pub use sensitivity::{sensitivity_rank, SensitivityConfig, SensitivityScore};
pub use train::{compress_svd, perplexity, perplexity_with, plant_rotation, pretrain, train_adapters, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoisePoint {
    pub lambda: f64,
    pub ppl: f64,
}

/// Held-out perplexity with every sign-constrained adapter evaluated through
/// the emulated measurement path under depolarizing strength `λ`.
pub fn noise_phase_sweep(
    model: &ToyLm,
    data: &[u8],
    grid: &[f64],
    mode: EmulationMode,
    n_shots: u64,
    seed: u64,
    max_windows: usize,
) -> Result<Vec<NoisePoint>> {
    let adapters = model.adapters();
    if adapters.is_empty() || adapters.iter().any(|(s, _)| s.mode != AdapterMode::SignConstrained) {
        return Err(CuaError::InvalidConfig("noise sweep needs sign_constrained adapters only".into()));
    }
    grid.iter()
        .map(|&lambda| {
            let channel = ChannelParams { n_shots, ..ChannelParams::depolarizing(lambda) };
            let exec = AdapterExec::Emulated { channel, mode, seed };
            Ok(NoisePoint { lambda, ppl: perplexity_with(model, data, max_windows, &exec)? })
        })
        .collect()
}
