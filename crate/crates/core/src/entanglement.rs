//! Operator-entanglement diagnostics: operator Schmidt spectra across a
//! bipartition, effective bond dimension, entropy ratios, Monte Carlo
//! entangling power, and brickwork reference circuits.
//!
//! Index convention: for `U` of dimension `d_A d_B`, the row index is
//! `i = i_A d_B + i_B` (subsystem A holds the high-order bits, qubit 0 is the
//! most significant). The reshaped matrix is
//! `M[(i_A, j_A), (i_B, j_B)] = U[(i_A, i_B), (j_A, j_B)]`.

use std::fmt::Write as _;

use nalgebra::{DMatrix, Matrix2, Matrix4, Vector2, Vector4};
use num_complex::Complex64;
use serde::Serialize;
use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::adapter::haar_orthogonal;
use crate::cayley::{assemble_bdu, BlockDiagonalUnitary, SkewBlockParams};
use crate::error::{CuaError, Result};
use crate::rng::{derive_seed, rng_from, Rng};

/// Singular values at or below this fraction of the largest do not count
/// towards the achieved rank.
pub const RANK_CUTOFF: f64 = 1e-10;
/// Default effective-bond-dimension threshold (fraction of `σ_max`).
pub const BOND_THRESHOLD: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Bipartition {
    pub d_a: usize,
    pub d_b: usize,
}

impl Bipartition {
    pub fn new(d_a: usize, d_b: usize) -> Result<Self> {
        if d_a < 2 || d_b < 2 {
            return Err(CuaError::InvalidShape(format!("trivial bipartition {d_a}|{d_b}")));
        }
        Ok(Self { d_a, d_b })
    }

    /// Cut an `n`-qubit register after the first `k` qubits.
    pub fn qubits(k: usize, n: usize) -> Result<Self> {
        if k == 0 || k >= n {
            return Err(CuaError::InvalidShape(format!("cannot cut {n} qubits after {k}")));
        }
        Self::new(1 << k, 1 << (n - k))
    }

    pub fn dim(&self) -> usize {
        self.d_a * self.d_b
    }

    /// `min(d_A^2, d_B^2)`.
    pub fn rank_max(&self) -> usize {
        (self.d_a * self.d_a).min(self.d_b * self.d_b)
    }

    /// `"k|n-k"` when both sides are qubit registers, `"d_A|d_B"` otherwise.
    pub fn label(&self) -> String {
        if self.d_a.is_power_of_two() && self.d_b.is_power_of_two() {
            format!("{}|{}", self.d_a.trailing_zeros(), self.d_b.trailing_zeros())
        } else {
            format!("{}x{}", self.d_a, self.d_b)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OperatorSchmidtSpectrum {
    /// Descending, `Σσ² = 1`.
    pub sigmas: Vec<f64>,
    pub rank: usize,
    pub entropy_bits: f64,
}

impl OperatorSchmidtSpectrum {
    fn from_singular_values(mut s: Vec<f64>) -> Result<Self> {
        s.sort_by(|a, b| b.total_cmp(a));
        let norm2: f64 = s.iter().map(|v| v * v).sum();
        if norm2 <= 0.0 {
            return Err(CuaError::InvalidShape("zero operator has no Schmidt spectrum".into()));
        }
        let inv = norm2.sqrt().recip();
        let sigmas: Vec<f64> = s.into_iter().map(|v| v * inv).collect();
        let smax = sigmas[0];
        let rank = sigmas.iter().filter(|v| **v > RANK_CUTOFF * smax).count();
        let entropy_bits = sigmas
            .iter()
            .map(|v| v * v)
            .filter(|p| *p > 0.0)
            .map(|p| -p * p.log2())
            .sum();
        Ok(Self { sigmas, rank, entropy_bits })
    }

    pub fn sigma_max(&self) -> f64 {
        self.sigmas[0]
    }

    /// `1 - Σσ⁴`.
    pub fn purity_deficit(&self) -> f64 {
        1.0 - self.sigmas.iter().map(|v| v.powi(4)).sum::<f64>()
    }
}

/// Singular values of a dense matrix; tall inputs go through a Householder
/// QR first so only the small triangular factor is decomposed.
fn singular_values(m: DMatrix<f64>) -> Vec<f64> {
    let m = if m.nrows() < m.ncols() { m.transpose() } else { m };
    let m = if m.nrows() > 2 * m.ncols() { m.qr().r() } else { m };
    m.singular_values().iter().copied().collect()
}

/// Operator Schmidt spectrum from the nonzero entries `(row, col, value)` of
/// an operator. All-zero rows and columns of the reshaped matrix are dropped
/// before the decomposition, which leaves the singular values unchanged.
pub fn operator_schmidt_entries(
    dim: usize,
    entries: impl IntoIterator<Item = (usize, usize, f64)>,
    cut: Bipartition,
) -> Result<OperatorSchmidtSpectrum> {
    if cut.dim() != dim {
        return Err(CuaError::InvalidShape(format!(
            "cut {}|{} does not factor dimension {dim}",
            cut.d_a, cut.d_b
        )));
    }
    let (da, db) = (cut.d_a, cut.d_b);
    let mut row_ix = vec![u32::MAX; da * da];
    let mut col_ix = vec![u32::MAX; db * db];
    let mut rows = 0u32;
    let mut cols = 0u32;
    let mut kept = Vec::new();
    for (i, j, v) in entries {
        if v == 0.0 {
            continue;
        }
        let (ia, ib) = (i / db, i % db);
        let (ja, jb) = (j / db, j % db);
        let r = ia * da + ja;
        let c = ib * db + jb;
        if row_ix[r] == u32::MAX {
            row_ix[r] = rows;
            rows += 1;
        }
        if col_ix[c] == u32::MAX {
            col_ix[c] = cols;
            cols += 1;
        }
        kept.push((row_ix[r], col_ix[c], v));
    }
    if kept.is_empty() {
        return Err(CuaError::InvalidShape("zero operator has no Schmidt spectrum".into()));
    }
    let mut m = DMatrix::zeros(rows as usize, cols as usize);
    for (r, c, v) in kept {
        m[(r as usize, c as usize)] = v;
    }
    OperatorSchmidtSpectrum::from_singular_values(singular_values(m))
}

/// Operator Schmidt decomposition of a dense square operator.
pub fn operator_schmidt(u: &DMatrix<f64>, cut: Bipartition) -> Result<OperatorSchmidtSpectrum> {
    if u.nrows() != u.ncols() {
        return Err(CuaError::InvalidShape("operator must be square".into()));
    }
    let n = u.nrows();
    // column-major walk keeps memory access sequential
    let entries = (0..n).flat_map(move |j| (0..n).map(move |i| (i, j, u[(i, j)])));
    operator_schmidt_entries(n, entries, cut)
}

/// Operator Schmidt decomposition of a block-diagonal operator without
/// materialising it.
pub fn operator_schmidt_bdu(u: &BlockDiagonalUnitary, cut: Bipartition) -> Result<OperatorSchmidtSpectrum> {
    let b = u.block_dim();
    let entries = u.blocks().iter().enumerate().flat_map(move |(k, q)| {
        (0..b).flat_map(move |c| (0..b).map(move |r| (k * b + r, k * b + c, q[(r, c)])))
    });
    operator_schmidt_entries(u.input_dim(), entries, cut)
}

/// Number of `σ_k > threshold_fraction · σ_max`.
pub fn effective_bond_dim(spec: &OperatorSchmidtSpectrum, threshold_fraction: f64) -> usize {
    let Some(&smax) = spec.sigmas.first() else { return 0 };
    spec.sigmas.iter().filter(|v| **v > threshold_fraction * smax).count()
}

/// `S_op / S_max` with `S_max = n/2` bits. Strongly entangling operators can
/// exceed 1 at cuts near the middle, since the operator bound there is
/// `2 min(k, n-k)` bits.
pub fn entropy_ratio(spec: &OperatorSchmidtSpectrum, n_qubits: usize) -> Result<f64> {
    if n_qubits < 2 {
        return Err(CuaError::InvalidConfig("entropy ratio needs n >= 2".into()));
    }
    Ok(spec.entropy_bits / (n_qubits as f64 / 2.0))
}

/// Haar-random special orthogonal matrix (determinant +1).
pub fn haar_special_orthogonal(d: usize, rng: &mut Rng) -> DMatrix<f64> {
    let mut q = haar_orthogonal(d, rng);
    if q.determinant() < 0.0 {
        q.column_mut(0).neg_mut();
    }
    q
}

/// Block-diagonal operator with iid Haar SO(b) blocks.
pub fn haar_bdu(num_blocks: usize, block_dim: usize, seed: u64) -> Result<BlockDiagonalUnitary> {
    let mut rng = rng_from(seed);
    BlockDiagonalUnitary::from_blocks((0..num_blocks).map(|_| haar_special_orthogonal(block_dim, &mut rng)).collect())
}

/// Left-multiply `u` by a 4x4 gate on qubits `(q, q+1)` of an `n`-qubit register.
fn apply_two_qubit_gate(u: &mut DMatrix<f64>, gate: &DMatrix<f64>, q: usize, n: usize) {
    let hi = 1usize << (n - 1 - q);
    let lo = 1usize << (n - 2 - q);
    let dim = u.nrows();
    let g: Vec<f64> = (0..16).map(|k| gate[(k / 4, k % 4)]).collect();
    for c in 0..u.ncols() {
        let col = &mut u.as_mut_slice()[c * dim..(c + 1) * dim];
        for base in 0..dim {
            if base & (hi | lo) != 0 {
                continue;
            }
            let idx = [base, base | lo, base | hi, base | hi | lo];
            let v = [col[idx[0]], col[idx[1]], col[idx[2]], col[idx[3]]];
            for r in 0..4 {
                col[idx[r]] = g[r * 4] * v[0] + g[r * 4 + 1] * v[1] + g[r * 4 + 2] * v[2] + g[r * 4 + 3] * v[3];
            }
        }
    }
}

/// Incrementally built brickwork circuit of Haar SO(4) gates.
#[derive(Debug, Clone)]
pub struct Brickwork {
    n_qubits: usize,
    seed: u64,
    depth: usize,
    unitary: DMatrix<f64>,
}

impl Brickwork {
    pub fn new(n_qubits: usize, seed: u64) -> Result<Self> {
        if !(2..=14).contains(&n_qubits) {
            return Err(CuaError::InvalidConfig(format!("brickwork supports 2..=14 qubits, got {n_qubits}")));
        }
        let d = 1 << n_qubits;
        Ok(Self { n_qubits, seed, depth: 0, unitary: DMatrix::identity(d, d) })
    }

    /// Append one layer: odd layers (1st, 3rd, ...) act on (0,1), (2,3), ...;
    /// even layers on (1,2), (3,4), ....
    pub fn push_layer(&mut self) {
        self.depth += 1;
        let start = if self.depth % 2 == 1 { 0 } else { 1 };
        let mut q = start;
        while q + 1 < self.n_qubits {
            let mut rng = rng_from(derive_seed(self.seed, &[self.depth as u64, q as u64]));
            let gate = haar_special_orthogonal(4, &mut rng);
            apply_two_qubit_gate(&mut self.unitary, &gate, q, self.n_qubits);
            q += 2;
        }
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn unitary(&self) -> &DMatrix<f64> {
        &self.unitary
    }
}

/// Product of `depth` brickwork layers on `n_qubits` (identity at depth 0).
pub fn brickwork_unitary(n_qubits: usize, depth: usize, seed: u64) -> Result<DMatrix<f64>> {
    let mut bw = Brickwork::new(n_qubits, seed)?;
    for _ in 0..depth {
        bw.push_layer();
    }
    Ok(bw.unitary)
}

/// BDU assembled from every generator scaled by `s`.
pub fn stress_scale(params: &SkewBlockParams, s: f64) -> Result<BlockDiagonalUnitary> {
    if s.is_nan() || s < 0.0 {
        return Err(CuaError::InvalidConfig(format!("stress scale must be >= 0, got {s}")));
    }
    assemble_bdu(&params.scaled(s))
}

/// Embed `U` in the next power-of-two dimension, identity on the padding.
pub fn pad_to_pow2(u: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let m = u.nrows();
    if m < 2 || u.ncols() != m {
        return Err(CuaError::InvalidShape(format!("pad_to_pow2 needs a square matrix of side >= 2, got {}x{}", m, u.ncols())));
    }
    let p = m.next_power_of_two();
    let mut out = DMatrix::identity(p, p);
    out.view_mut((0, 0), (m, m)).copy_from(u);
    Ok(out)
}

fn random_qubit_state(rng: &mut Rng) -> Vector2<Complex64> {
    let mut draw = || Complex64::new(rng.sample(StandardNormal), rng.sample(StandardNormal));
    let v = Vector2::new(draw(), draw());
    let n = v.norm();
    v / Complex64::from(n)
}

/// Linear entropy `1 - Tr ρ_A²` of a two-qubit pure state.
fn linear_entropy(psi: &Vector4<Complex64>) -> f64 {
    let m = Matrix2::new(psi[0], psi[1], psi[2], psi[3]);
    let rho = m * m.adjoint();
    let purity: f64 = rho.iter().map(|z| z.norm_sqr()).sum();
    1.0 - purity
}

pub fn cnot() -> Matrix4<Complex64> {
    let o = Complex64::new(1.0, 0.0);
    let z = Complex64::new(0.0, 0.0);
    Matrix4::new(o, z, z, z, z, o, z, z, z, z, z, o, z, z, o, z)
}

pub fn swap() -> Matrix4<Complex64> {
    let o = Complex64::new(1.0, 0.0);
    let z = Complex64::new(0.0, 0.0);
    Matrix4::new(o, z, z, z, z, z, o, z, z, o, z, z, z, z, z, o)
}

pub fn to_complex4(u: &DMatrix<f64>) -> Result<Matrix4<Complex64>> {
    if u.shape() != (4, 4) {
        return Err(CuaError::InvalidShape(format!("entangling power needs 4x4, got {:?}", u.shape())));
    }
    Ok(Matrix4::from_fn(|r, c| Complex64::new(u[(r, c)], 0.0)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EntanglingPower {
    /// Mean linear entropy normalised by the CNOT estimate on the same samples.
    pub value: f64,
    pub std_error: f64,
    pub samples: usize,
}

/// Monte Carlo entangling power relative to CNOT, over Haar-random product
/// inputs. The same inputs drive both gates.
pub fn entangling_power(u: &Matrix4<Complex64>, samples: usize, seed: u64) -> EntanglingPower {
    let mut rng = rng_from(seed);
    let cx = cnot();
    let n = samples.max(2);
    let (mut su, mut sc, mut suu, mut scc, mut suc) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for _ in 0..n {
        let a = random_qubit_state(&mut rng);
        let b = random_qubit_state(&mut rng);
        let prod = Vector4::new(a[0] * b[0], a[0] * b[1], a[1] * b[0], a[1] * b[1]);
        let eu = linear_entropy(&(u * prod));
        let ec = linear_entropy(&(cx * prod));
        su += eu;
        sc += ec;
        suu += eu * eu;
        scc += ec * ec;
        suc += eu * ec;
    }
    let nf = n as f64;
    let (mu, mc) = (su / nf, sc / nf);
    let var_u = (suu / nf - mu * mu).max(0.0);
    let var_c = (scc / nf - mc * mc).max(0.0);
    let cov = suc / nf - mu * mc;
    let ratio = mu / mc;
    // delta method for a ratio of correlated means
    let var_ratio = (var_u - 2.0 * ratio * cov + ratio * ratio * var_c) / (mc * mc * nf);
    EntanglingPower { value: ratio, std_error: var_ratio.max(0.0).sqrt(), samples: n }
}

/// One row of an operator-Schmidt summary table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SchmidtRow {
    pub object: String,
    pub cut: String,
    pub rank_max: usize,
    pub rank_achieved: usize,
    pub sigma_max: f64,
    pub purity_deficit: f64,
}

impl SchmidtRow {
    pub fn new(object: impl Into<String>, cut: &Bipartition, spec: &OperatorSchmidtSpectrum) -> Self {
        Self {
            object: object.into(),
            cut: cut.label(),
            rank_max: cut.rank_max(),
            rank_achieved: spec.rank,
            sigma_max: spec.sigma_max(),
            purity_deficit: spec.purity_deficit(),
        }
    }
}

pub fn schmidt_rows_csv(rows: &[SchmidtRow]) -> String {
    let mut s = String::from("object,cut,rank_max,rank_achieved,sigma_max,one_minus_sum_sigma4\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{:.6},{:.6}",
            r.object, r.cut, r.rank_max, r.rank_achieved, r.sigma_max, r.purity_deficit
        );
    }
    s
}

/// CSV `cut,k,sigma`.
pub fn spectrum_csv(spectra: &[(String, OperatorSchmidtSpectrum)]) -> String {
    let mut s = String::from("cut,k,sigma\n");
    for (cut, spec) in spectra {
        for (k, v) in spec.sigmas.iter().enumerate() {
            let _ = writeln!(s, "{cut},{k},{v:.12e}");
        }
    }
    s
}
