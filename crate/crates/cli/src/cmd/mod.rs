pub mod ablate;
pub mod entangle;
pub mod noise;
pub mod pack;
pub mod train;

use std::path::Path;

use cua_core::distill::checkpoint::load_checkpoint;
use cua_core::distill::ToyLm;

use crate::report::CliResult;

/// Load a checkpoint that must hold a bare backbone.
pub fn load_teacher(path: &Path) -> CliResult<ToyLm> {
    let m = load_checkpoint(path).map_err(|e| format!("cannot load teacher {}: {e}", path.display()))?;
    if !m.adapters().is_empty() {
        return Err(format!("teacher checkpoint {} contains adapters", path.display()).into());
    }
    Ok(m)
}
