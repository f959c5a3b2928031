//! Cayley unitary adapters.
//!
//! A block-diagonal orthogonal operator `Q = ⊕ Q_i` with each
//! `Q_i = (I - K_i/2)(I + K_i/2)^{-1}` is placed in front of a frozen
//! projection `W`, optionally through the sign-corrected map
//! `y = W(|Qx| ⊙ sgn(x))`. The crate also emulates running each block as a
//! small quantum circuit, accounts for gate noise and coupling-map packing,
//! measures operator entanglement, and trains adapters on a toy language
//! model by distillation.

pub mod adapter;
pub mod cayley;
pub mod circuit_plan;
pub mod distill;
pub mod entanglement;
pub mod error;
pub mod qemu;
pub mod rng;

pub use adapter::{
    adapter_backward, forward_plain, forward_sign_constrained, make_ablation, AblationKind, AdapterMode,
    AdapterSite, CuaLayer, Projection, Transform,
};
pub use cayley::{
    assemble_bdu, bdu_apply, cayley_gradient, cayley_inverse, cayley_transform, skew_from_params,
    BlockDiagonalUnitary, DenseOrthogonal, SkewBlockParams,
};
pub use circuit_plan::{CouplingMap, GateBudget, InfidelityReport};
pub use entanglement::{Bipartition, OperatorSchmidtSpectrum};
pub use error::{CuaError, Result};
pub use qemu::{EmulationMode, NoiseModel, ShotCounts};
