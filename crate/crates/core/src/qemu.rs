//! Emulated quantum execution of one adapter block: amplitude encoding,
//! (noisy) computational-basis probabilities, shot sampling, and the
//! sign-corrected magnitude reconstruction `ŷ_k = sqrt(c_k/N) sgn(x_k) ||x||`.
//!
//! Noise is applied at the probability-vector level. Global depolarising
//! noise commutes with every unitary (`U I U^† = I`), so any sequence of
//! per-gate channels with strengths `λ_i` acts on the measured diagonal
//! exactly like one channel with `λ = 1 - Π(1 - λ_i)` applied after the
//! unitary. [`density_matrix_reference`] keeps the full-matrix path around as
//! a cross-check.

use std::io::Write;

use nalgebra::DMatrix;
use rand_distr::{Binomial, Distribution};
use serde::{Deserialize, Serialize};

use crate::adapter::{sgn, AdapterMode, CuaLayer};
use crate::circuit_plan::{gate_budget_for_block, gate_infidelity};
use crate::error::{CuaError, Result};
use crate::rng::{derive_seed, rng_from};

/// Slices with a norm below this bypass the quantum path and return zeros.
pub const ZERO_SLICE_NORM: f64 = 1e-12;
/// Frequencies are clipped to `[FREQ_FLOOR, 1]` before the square root.
pub const FREQ_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    pub p_sx: f64,
    pub p_cz: f64,
    pub p_readout: f64,
    pub n_shots: u64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self { p_sx: 2.45e-4, p_cz: 1.78e-3, p_readout: 6.8e-3, n_shots: 8192 }
    }
}

impl NoiseModel {
    pub fn noiseless(n_shots: u64) -> Self {
        Self { p_sx: 0.0, p_cz: 0.0, p_readout: 0.0, n_shots }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, value) in [("p_sx", self.p_sx), ("p_cz", self.p_cz), ("p_readout", self.p_readout)] {
            if !(0.0..=1.0).contains(&value) {
                return Err(CuaError::InvalidProbability { name, value });
            }
        }
        if self.n_shots == 0 {
            return Err(CuaError::InvalidConfig("n_shots must be positive".into()));
        }
        Ok(())
    }

    pub fn from_toml(s: &str) -> Result<Self> {
        let m: Self = toml::from_str(s).map_err(|e| CuaError::Parse(e.to_string()))?;
        m.validate()?;
        Ok(m)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("flat numeric struct")
    }

    /// Aggregated channel for one `2^n`-dimensional block, with gate budgets
    /// taken from the synthesis table.
    pub fn channel_for_block(&self, n_qubits: usize) -> Result<ChannelParams> {
        let budget = gate_budget_for_block(n_qubits)?;
        let report = gate_infidelity(&budget, self, n_qubits);
        Ok(ChannelParams { lambda: report.lambda_total, p_readout: self.p_readout, n_shots: self.n_shots })
    }
}

/// The three knobs the emulated measurement actually consumes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelParams {
    pub lambda: f64,
    pub p_readout: f64,
    pub n_shots: u64,
}

impl ChannelParams {
    pub fn noiseless() -> Self {
        Self { lambda: 0.0, p_readout: 0.0, n_shots: 8192 }
    }

    pub fn depolarizing(lambda: f64) -> Self {
        Self { lambda, p_readout: 0.0, n_shots: 8192 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncodedSlice {
    pub amplitudes: Vec<f64>,
    pub norm: f64,
    pub signs: Vec<f64>,
    pub zero: bool,
}

impl EncodedSlice {
    pub fn len(&self) -> usize {
        self.amplitudes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.amplitudes.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShotCounts {
    pub counts: Vec<u64>,
    pub total: u64,
}

fn qubits_for(len: usize) -> Result<usize> {
    if len < 2 || !len.is_power_of_two() {
        return Err(CuaError::InvalidShape(format!("length {len} is not 2^n with n >= 1")));
    }
    Ok(len.trailing_zeros() as usize)
}

/// Normalise a slice into amplitudes, keeping the norm and signs classically.
pub fn amplitude_encode(x: &[f64]) -> Result<EncodedSlice> {
    qubits_for(x.len())?;
    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    let signs: Vec<f64> = x.iter().map(|v| sgn(*v)).collect();
    if norm < ZERO_SLICE_NORM {
        return Ok(EncodedSlice { amplitudes: vec![0.0; x.len()], norm, signs, zero: true });
    }
    Ok(EncodedSlice { amplitudes: x.iter().map(|v| v / norm).collect(), norm, signs, zero: false })
}

/// Born-rule probabilities `p_k = (Q a)_k^2`.
pub fn ideal_probabilities(q: &DMatrix<f64>, slice: &EncodedSlice) -> Result<Vec<f64>> {
    let b = slice.len();
    if q.nrows() != b || q.ncols() != b {
        return Err(CuaError::DimensionMismatch { expected: b, got: q.nrows() });
    }
    Ok((0..b)
        .map(|r| {
            let amp: f64 = (0..b).map(|c| q[(r, c)] * slice.amplitudes[c]).sum();
            amp * amp
        })
        .collect())
}

/// `p' = (1 - λ) p + λ / b`.
pub fn apply_depolarizing(p: &[f64], lambda: f64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(CuaError::InvalidProbability { name: "lambda", value: lambda });
    }
    let u = 1.0 / p.len() as f64;
    Ok(p.iter().map(|v| (1.0 - lambda) * v + lambda * u).collect())
}

/// Symmetric per-qubit bit-flip confusion applied as `C^{⊗n}`.
pub fn apply_readout_confusion(p: &[f64], p_ro: f64, n_qubits: usize) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&p_ro) {
        return Err(CuaError::InvalidProbability { name: "p_readout", value: p_ro });
    }
    if p.len() != 1 << n_qubits {
        return Err(CuaError::DimensionMismatch { expected: 1 << n_qubits, got: p.len() });
    }
    let mut cur = p.to_vec();
    for q in 0..n_qubits {
        let bit = 1 << q;
        let mut next = vec![0.0; cur.len()];
        for (i, v) in next.iter_mut().enumerate() {
            *v = (1.0 - p_ro) * cur[i] + p_ro * cur[i ^ bit];
        }
        cur = next;
    }
    Ok(cur)
}

/// Multinomial draw by sequential conditional binomials.
pub fn sample_shots(p: &[f64], n_shots: u64, seed: u64) -> ShotCounts {
    let mut rng = rng_from(seed);
    let total_p: f64 = p.iter().map(|v| v.max(0.0)).sum();
    let mut remaining = n_shots;
    let mut mass_left = 1.0;
    let mut counts = vec![0u64; p.len()];
    let last = p.iter().rposition(|v| *v > 0.0).unwrap_or(p.len().saturating_sub(1));
    for (i, pi) in p.iter().enumerate() {
        if remaining == 0 {
            break;
        }
        let pi = pi.max(0.0) / total_p;
        if i == last || mass_left <= 0.0 {
            counts[i] = remaining;
            break;
        }
        let cond = (pi / mass_left).clamp(0.0, 1.0);
        let c = Binomial::new(remaining, cond).expect("probability clamped to [0, 1]").sample(&mut rng);
        counts[i] = c;
        remaining -= c;
        mass_left -= pi;
    }
    ShotCounts { counts, total: n_shots }
}

/// Turn frequencies back into a signed, rescaled vector.
pub fn reconstruct_from_freqs(freqs: &[f64], slice: &EncodedSlice) -> Vec<f64> {
    if slice.zero {
        return vec![0.0; slice.len()];
    }
    freqs
        .iter()
        .zip(&slice.signs)
        .map(|(f, s)| if *s == 0.0 { 0.0 } else { f.clamp(FREQ_FLOOR, 1.0).sqrt() * s * slice.norm })
        .collect()
}

pub fn reconstruct(counts: &ShotCounts, slice: &EncodedSlice) -> Result<Vec<f64>> {
    if counts.total == 0 {
        return Err(CuaError::InvalidConfig("no shots to reconstruct from".into()));
    }
    if counts.counts.len() != slice.len() {
        return Err(CuaError::DimensionMismatch { expected: slice.len(), got: counts.counts.len() });
    }
    let n = counts.total as f64;
    let freqs: Vec<f64> = counts.counts.iter().map(|c| *c as f64 / n).collect();
    Ok(reconstruct_from_freqs(&freqs, slice))
}

/// Full density-matrix path: `ρ = |Qa⟩⟨Qa|`, each `λ_i` applied in turn as
/// `ρ ← (1-λ_i) ρ + λ_i I/b`, then readout confusion on the diagonal.
pub fn density_matrix_reference(
    q: &DMatrix<f64>,
    slice: &EncodedSlice,
    per_gate_lambdas: &[f64],
    p_ro: f64,
) -> Result<Vec<f64>> {
    let b = slice.len();
    let n = qubits_for(b)?;
    let psi = q * nalgebra::DVector::from_column_slice(&slice.amplitudes);
    let mut rho = &psi * psi.transpose();
    let eye = DMatrix::<f64>::identity(b, b) / b as f64;
    for &l in per_gate_lambdas {
        if !(0.0..=1.0).contains(&l) {
            return Err(CuaError::InvalidProbability { name: "lambda", value: l });
        }
        rho = rho * (1.0 - l) + &eye * l;
    }
    let diag: Vec<f64> = rho.diagonal().iter().copied().collect();
    apply_readout_confusion(&diag, p_ro, n)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmulationMode {
    /// Use the channel output probabilities directly (infinite shots).
    ExactProb,
    /// Draw `n_shots` multinomial samples per slice.
    Sampled,
}

/// Run one slice through encode → noise → (sampling) → reconstruct.
pub fn emulate_slice(
    q: &DMatrix<f64>,
    x: &[f64],
    channel: &ChannelParams,
    mode: EmulationMode,
    seed: u64,
) -> Result<Vec<f64>> {
    let slice = amplitude_encode(x)?;
    if slice.zero {
        return Ok(vec![0.0; x.len()]);
    }
    let n = qubits_for(x.len())?;
    let mut p = ideal_probabilities(q, &slice)?;
    if channel.lambda > 0.0 {
        p = apply_depolarizing(&p, channel.lambda)?;
    }
    if channel.p_readout > 0.0 {
        p = apply_readout_confusion(&p, channel.p_readout, n)?;
    }
    match mode {
        EmulationMode::ExactProb => Ok(reconstruct_from_freqs(&p, &slice)),
        EmulationMode::Sampled => reconstruct(&sample_shots(&p, channel.n_shots, seed), &slice),
    }
}

fn check_emulable(layer: &CuaLayer) -> Result<usize> {
    if layer.mode() != AdapterMode::SignConstrained {
        return Err(CuaError::InvalidConfig("emulation needs a sign_constrained layer".into()));
    }
    let b = layer.transform().block_dim();
    qubits_for(b)?;
    if !layer.d_in().is_multiple_of(b) {
        return Err(CuaError::InvalidShape(format!("d = {} not divisible by block size {b}", layer.d_in())));
    }
    Ok(b)
}

/// Emulated pre-weight vector `|Qx| ⊙ sgn(x)` for one input. Slice `i` of
/// token `token` draws from the stream `(seed, token, i)`.
pub fn emulated_pre_weight(
    layer: &CuaLayer,
    x: &[f64],
    channel: &ChannelParams,
    mode: EmulationMode,
    seed: u64,
    token: u64,
) -> Result<Vec<f64>> {
    let b = check_emulable(layer)?;
    if x.len() != layer.d_in() {
        return Err(CuaError::DimensionMismatch { expected: layer.d_in(), got: x.len() });
    }
    let blocks = layer.transform().blocks_view();
    let mut out = Vec::with_capacity(x.len());
    for (i, q) in blocks.iter().enumerate() {
        let s = derive_seed(seed, &[token, i as u64]);
        out.extend(emulate_slice(q, &x[i * b..(i + 1) * b], channel, mode, s)?);
    }
    Ok(out)
}

/// Emulated `y = W ŷ` for a sign-constrained layer, with the channel derived
/// from the noise model and the block's gate budget.
pub fn emulated_forward(
    layer: &CuaLayer,
    x: &[f64],
    noise: &NoiseModel,
    mode: EmulationMode,
    seed: u64,
) -> Result<Vec<f64>> {
    noise.validate()?;
    let b = check_emulable(layer)?;
    let n = qubits_for(b)?;
    let channel = if noise.p_sx == 0.0 && noise.p_cz == 0.0 {
        ChannelParams { lambda: 0.0, p_readout: noise.p_readout, n_shots: noise.n_shots }
    } else {
        noise.channel_for_block(n)?
    };
    emulated_forward_with(layer, x, &channel, mode, seed)
}

pub fn emulated_forward_with(
    layer: &CuaLayer,
    x: &[f64],
    channel: &ChannelParams,
    mode: EmulationMode,
    seed: u64,
) -> Result<Vec<f64>> {
    let pre = emulated_pre_weight(layer, x, channel, mode, seed, 0)?;
    Ok((layer.frozen_weight() * nalgebra::DVector::from_vec(pre)).data.into())
}

/// Row-wise emulated pre-weight map (row `r` is token `token_offset + r`).
pub fn emulated_pre_weight_rows(
    layer: &CuaLayer,
    x: &DMatrix<f64>,
    channel: &ChannelParams,
    mode: EmulationMode,
    seed: u64,
    token_offset: u64,
) -> Result<DMatrix<f64>> {
    let (n, d) = x.shape();
    let mut out = DMatrix::zeros(n, d);
    let mut row = vec![0.0; d];
    for r in 0..n {
        for c in 0..d {
            row[c] = x[(r, c)];
        }
        let y = emulated_pre_weight(layer, &row, channel, mode, seed, token_offset + r as u64)?;
        for c in 0..d {
            out[(r, c)] = y[c];
        }
    }
    Ok(out)
}

/// CSV trace `slice_id,outcome,count`.
pub fn write_shot_trace<W: Write>(mut w: W, traces: &[(usize, ShotCounts)]) -> std::io::Result<()> {
    writeln!(w, "slice_id,outcome,count")?;
    for (id, c) in traces {
        for (k, n) in c.counts.iter().enumerate() {
            writeln!(w, "{id},{k},{n}")?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encode_examples() {
        let s = amplitude_encode(&[3.0, -4.0, 0.0, 0.0]).unwrap();
        assert_eq!(s.norm, 5.0);
        assert_eq!(s.amplitudes, vec![0.6, -0.8, 0.0, 0.0]);
        assert_eq!(s.signs, vec![1.0, -1.0, 0.0, 0.0]);
        let basis = amplitude_encode(&[1.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!((basis.norm, basis.amplitudes[0]), (1.0, 1.0));
        assert!(amplitude_encode(&[0.0; 4]).unwrap().zero);
        assert!(amplitude_encode(&[1.0, 2.0, 3.0]).is_err());
        assert!(amplitude_encode(&[1.0]).is_err());
    }

    #[test]
    fn probabilities_identity() {
        let s = amplitude_encode(&[3.0, -4.0, 0.0, 0.0]).unwrap();
        let p = ideal_probabilities(&DMatrix::identity(4, 4), &s).unwrap();
        assert!((p[0] - 0.36).abs() < 1e-15 && (p[1] - 0.64).abs() < 1e-15);
        assert_eq!(&p[2..], &[0.0, 0.0]);
        assert!(ideal_probabilities(&DMatrix::identity(2, 2), &s).is_err());
    }

    #[test]
    fn depolarizing_examples() {
        let p = [1.0, 0.0, 0.0, 0.0];
        assert_eq!(apply_depolarizing(&p, 0.0).unwrap(), p.to_vec());
        assert_eq!(apply_depolarizing(&p, 1.0).unwrap(), vec![0.25; 4]);
        let q = apply_depolarizing(&p, 0.012).unwrap();
        let want = [0.991, 0.003, 0.003, 0.003];
        assert!(q.iter().zip(want).all(|(a, b)| (a - b).abs() < 1e-15));
        assert!(apply_depolarizing(&p, 1.5).is_err());
        assert!(apply_depolarizing(&p, -0.1).is_err());
    }

    #[test]
    fn readout_examples() {
        let p = [1.0, 0.0, 0.0, 0.0];
        assert_eq!(apply_readout_confusion(&p, 0.0, 2).unwrap(), p.to_vec());
        let q = apply_readout_confusion(&p, 6.8e-3, 2).unwrap();
        assert!((q[0] - (1.0 - 6.8e-3f64).powi(2)).abs() < 1e-15);
        assert!((q[0] - 0.98645).abs() < 1e-5);
        assert!((q.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!(apply_readout_confusion(&p, 0.1, 3).is_err());
    }

    #[test]
    fn sampling_indicator_and_determinism() {
        let c = sample_shots(&[0.0, 0.0, 1.0, 0.0], 1000, 4);
        assert_eq!(c.counts, vec![0, 0, 1000, 0]);
        let a = sample_shots(&[0.36, 0.64, 0.0, 0.0], 8192, 11);
        let b = sample_shots(&[0.36, 0.64, 0.0, 0.0], 8192, 11);
        assert_eq!(a, b);
        assert_eq!(a.counts.iter().sum::<u64>(), 8192);
        assert_eq!(&a.counts[2..], &[0, 0]);
    }

    #[test]
    fn reconstruct_examples() {
        let s = amplitude_encode(&[3.0, -4.0, 0.0, 0.0]).unwrap();
        let y = reconstruct_from_freqs(&[0.36, 0.64, 0.0, 0.0], &s);
        assert!((y[0] - 3.0).abs() < 1e-12 && (y[1] + 4.0).abs() < 1e-12);
        assert_eq!(&y[2..], &[0.0, 0.0]);

        let s = amplitude_encode(&[1.0, 0.0, 0.0, 0.0]).unwrap();
        let y = reconstruct(&ShotCounts { counts: vec![100, 0, 0, 0], total: 100 }, &s).unwrap();
        assert_eq!(y, vec![1.0, 0.0, 0.0, 0.0]);
        // counts at a zero-sign index are gated away
        let y = reconstruct(&ShotCounts { counts: vec![50, 50, 0, 0], total: 100 }, &s).unwrap();
        assert_eq!(y[1], 0.0);
        assert!(reconstruct(&ShotCounts { counts: vec![0; 4], total: 0 }, &s).is_err());
    }

    #[test]
    fn noise_model_defaults_and_file() {
        let m = NoiseModel::default();
        assert_eq!((m.p_sx, m.p_cz, m.p_readout, m.n_shots), (2.45e-4, 1.78e-3, 6.8e-3, 8192));
        assert_eq!(NoiseModel::from_toml(&m.to_toml()).unwrap(), m);
        assert!(NoiseModel::from_toml("p_sx = 2.0\np_cz = 0.0\np_readout = 0.0\nn_shots = 10").is_err());
    }

    #[test]
    fn shot_trace_csv() {
        let mut buf = Vec::new();
        write_shot_trace(&mut buf, &[(3, ShotCounts { counts: vec![1, 2], total: 3 })]).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "slice_id,outcome,count\n3,0,1\n3,1,2\n");
    }
}
