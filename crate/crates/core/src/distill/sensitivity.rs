//! Ranking projection sites by how promising they are for an adapter.
//!
//! Components per site:
//! - `bdu_compatibility`: share of `‖W‖_F²` in the block-diagonal tiles
//!   aligned with the adapter's blocks (rows split proportionally).
//! - `grad_norm_init`: adapter gradient norm on a probe batch, with identity
//!   adapters at every site and a next-byte CE loss.
//! - `energy_fraction`: the site's share of mean squared input norm.
//! - `position_penalty`: `c·(2t−1)²` with `t` the relative depth.
//!
//! The composite is the mean of the three min-max-normalised components
//! minus the penalty. Sites whose inputs are identically zero go last.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::adapter::{AdapterMode, AdapterSite, Projection};
use crate::error::{CuaError, Result};

use super::model::{all_sites, insert_adapters, ToyLm};
use super::train::{batch_loss_grads, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityScore {
    pub site: AdapterSite,
    pub bdu_compatibility: f64,
    pub grad_norm_init: f64,
    pub energy_fraction: f64,
    pub position_penalty: f64,
    pub composite: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensitivityConfig {
    pub block_dim: usize,
    pub mode: AdapterMode,
    pub penalty_weight: f64,
}

impl Default for SensitivityConfig {
    fn default() -> Self {
        Self { block_dim: 4, mode: AdapterMode::SignConstrained, penalty_weight: 0.25 }
    }
}

pub fn block_energy_fraction(w: &DMatrix<f64>, block_dim: usize) -> Result<f64> {
    let (rows, cols) = w.shape();
    if block_dim == 0 || cols % block_dim != 0 {
        return Err(CuaError::InvalidShape(format!("{cols} not divisible by {block_dim}")));
    }
    let total = w.norm_squared();
    if total == 0.0 {
        return Ok(0.0);
    }
    let k = cols / block_dim;
    let mut kept = 0.0;
    for i in 0..k {
        let (r0, r1) = (i * rows / k, (i + 1) * rows / k);
        kept += w.view((r0, i * block_dim), (r1 - r0, block_dim)).norm_squared();
    }
    Ok(kept / total)
}

pub fn position_penalty(layer: usize, num_layers: usize, weight: f64) -> f64 {
    let t = if num_layers <= 1 { 0.5 } else { layer as f64 / (num_layers - 1) as f64 };
    weight * (2.0 * t - 1.0).powi(2)
}

fn min_max(v: &[f64]) -> Vec<f64> {
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    v.iter().map(|x| if hi > lo { (x - lo) / (hi - lo) } else { 0.0 }).collect()
}

/// Composite scores from raw `[compatibility, grad_norm, energy]` rows and
/// penalties.
pub fn composite_scores(components: &[[f64; 3]], penalties: &[f64]) -> Vec<f64> {
    let cols: Vec<Vec<f64>> = (0..3).map(|j| min_max(&components.iter().map(|c| c[j]).collect::<Vec<_>>())).collect();
    (0..components.len()).map(|i| (cols[0][i] + cols[1][i] + cols[2][i]) / 3.0 - penalties[i]).collect()
}

/// Descending composite order; dead sites last; ties by site index.
pub fn rank_scores(mut scores: Vec<SensitivityScore>) -> Vec<SensitivityScore> {
    scores.sort_by(|a, b| {
        let dead = |s: &SensitivityScore| s.energy_fraction == 0.0;
        dead(a)
            .cmp(&dead(b))
            .then(b.composite.total_cmp(&a.composite))
            .then(a.site.index().cmp(&b.site.index()))
    });
    scores
}

/// Score and rank every projection site of an adapter-free model.
pub fn sensitivity_rank(model: &ToyLm, probe: &[&[u8]], cfg: &SensitivityConfig) -> Result<Vec<SensitivityScore>> {
    if probe.is_empty() {
        return Err(CuaError::InvalidConfig("empty probe batch".into()));
    }
    let nl = model.cfg.num_layers;
    let sites = all_sites(nl, cfg.mode);
    let adapted = insert_adapters(model, &sites, cfg.block_dim)?;
    let ce = TrainConfig { alpha_kd: 0.0, beta: 1.0, ..Default::default() };
    let (_, grads) = batch_loss_grads(&adapted, None, probe, &ce, false)?;
    let tokens: Vec<Vec<usize>> = probe.iter().map(|w| w.iter().map(|&b| b as usize).collect()).collect();
    let seqs: Vec<&[usize]> = tokens.iter().map(|t| &t[..t.len().min(model.cfg.context_length)]).collect();
    let moments = model.site_input_moments(&seqs)?;
    let moment_sum: f64 = moments.iter().sum();
    let mut comps = Vec::with_capacity(sites.len());
    let mut pens = Vec::with_capacity(sites.len());
    for s in &sites {
        let i = s.index();
        let w = model.projector(s.layer, s.projection).weight();
        let g = grads.adapters[i].as_ref().map_or(0.0, |g| g.iter().map(|v| v * v).sum::<f64>().sqrt());
        let e = if moment_sum > 0.0 { moments[i] / moment_sum } else { 0.0 };
        comps.push([block_energy_fraction(w, cfg.block_dim)?, g, e]);
        pens.push(position_penalty(s.layer, nl, cfg.penalty_weight));
    }
    let composite = composite_scores(&comps, &pens);
    let scores = sites
        .iter()
        .enumerate()
        .map(|(i, &site)| SensitivityScore {
            site,
            bdu_compatibility: comps[i][0],
            grad_norm_init: comps[i][1],
            energy_fraction: comps[i][2],
            position_penalty: pens[i],
            composite: composite[i],
        })
        .collect();
    Ok(rank_scores(scores))
}

/// CSV with one row per ranked site.
pub fn scores_csv(scores: &[SensitivityScore]) -> String {
    let mut s =
        String::from("rank,site,bdu_compatibility,grad_norm_init,energy_fraction,position_penalty,composite\n");
    for (r, x) in scores.iter().enumerate() {
        s.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r + 1,
            x.site.label(),
            x.bdu_compatibility,
            x.grad_norm_init,
            x.energy_fraction,
            x.position_penalty,
            x.composite
        ));
    }
    s
}

/// The top `n` sites of a ranking restricted to the given projections.
pub fn top_sites(scores: &[SensitivityScore], n: usize, allowed: &[Projection]) -> Vec<AdapterSite> {
    scores.iter().filter(|s| allowed.contains(&s.site.projection)).take(n).map(|s| s.site).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn energy_fraction_of_block_diagonal_is_one() {
        let mut w = DMatrix::zeros(4, 4);
        w[(0, 1)] = 1.0;
        w[(3, 2)] = 2.0;
        assert_eq!(block_energy_fraction(&w, 2).unwrap(), 1.0);
        w[(0, 3)] = 1.0;
        assert!((block_energy_fraction(&w, 2).unwrap() - 5.0 / 6.0).abs() < 1e-15);
        assert!(block_energy_fraction(&w, 3).is_err());
    }

    #[test]
    fn middle_layer_beats_extreme_layer_with_equal_components() {
        let comps = [[0.5, 1.0, 0.2], [0.5, 1.0, 0.2], [0.1, 0.0, 0.0]];
        let pens = [position_penalty(0, 3, 0.25), position_penalty(1, 3, 0.25), position_penalty(2, 3, 0.25)];
        let c = composite_scores(&comps, &pens);
        assert!(c[1] > c[0]);
        assert_eq!(pens[1], 0.0);
    }

    #[test]
    fn dead_site_is_ranked_last() {
        let mk = |layer, composite, energy| SensitivityScore {
            site: AdapterSite::new(layer, Projection::Q, AdapterMode::SignConstrained),
            bdu_compatibility: 0.0,
            grad_norm_init: 0.0,
            energy_fraction: energy,
            position_penalty: 0.0,
            composite,
        };
        let r = rank_scores(vec![mk(0, 5.0, 0.0), mk(1, 0.1, 0.2), mk(2, 0.1, 0.2)]);
        assert_eq!(r.iter().map(|s| s.site.layer).collect::<Vec<_>>(), vec![1, 2, 0]);
    }
}
