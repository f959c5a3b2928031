//! Block-diagonal orthogonal operators parameterised by the Cayley transform.
//!
//! Each block is generated by a skew-symmetric `K_i` (stored as its strict
//! upper triangle, row-major) and mapped to `Q_i = (I - K_i/2)(I + K_i/2)^{-1}`.
//! The full operator is the direct sum of the blocks acting on consecutive
//! length-`b` slices of the input.

use nalgebra::DMatrix;
use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::error::{CuaError, Result};
use crate::rng::Rng;

/// Orthogonality tolerance enforced on every assembled block.
pub const BLOCK_ORTHO_TOL: f64 = 1e-12;
/// Orthogonality tolerance for dense (full-dimension) operators.
pub const DENSE_ORTHO_TOL: f64 = 1e-10;
/// `cayley_inverse` refuses `Q` when `I + Q` has a singular value below this.
pub const INVERSE_SINGULAR_TOL: f64 = 1e-8;

/// Free parameters of `k` skew-symmetric generators of side `b`.
#[derive(Debug, Clone, PartialEq)]
pub struct SkewBlockParams {
    block_dim: usize,
    num_blocks: usize,
    values: Vec<f64>,
}

/// Number of free parameters in one `b x b` skew-symmetric generator.
pub const fn params_per_block(block_dim: usize) -> usize {
    block_dim * block_dim.saturating_sub(1) / 2
}

impl SkewBlockParams {
    pub fn new(block_dim: usize, num_blocks: usize, values: Vec<f64>) -> Result<Self> {
        if block_dim < 2 || !block_dim.is_power_of_two() {
            return Err(CuaError::InvalidShape(format!(
                "block dimension must be a power of two >= 2, got {block_dim}"
            )));
        }
        if num_blocks == 0 {
            return Err(CuaError::InvalidShape("num_blocks must be positive".into()));
        }
        let expected = num_blocks * params_per_block(block_dim);
        if values.len() != expected {
            return Err(CuaError::DimensionMismatch { expected, got: values.len() });
        }
        Ok(Self { block_dim, num_blocks, values })
    }

    /// Zero generators: every block is the identity.
    pub fn zeros(block_dim: usize, num_blocks: usize) -> Result<Self> {
        Self::new(block_dim, num_blocks, vec![0.0; num_blocks * params_per_block(block_dim)])
    }

    /// Zero generators covering an input of dimension `dim`.
    pub fn zeros_for_dim(dim: usize, block_dim: usize) -> Result<Self> {
        if block_dim == 0 || !dim.is_multiple_of(block_dim) {
            return Err(CuaError::InvalidShape(format!(
                "dimension {dim} is not divisible by block size {block_dim}"
            )));
        }
        Self::zeros(block_dim, dim / block_dim)
    }

    /// iid normal parameters with standard deviation `scale`.
    pub fn random(block_dim: usize, num_blocks: usize, scale: f64, rng: &mut Rng) -> Result<Self> {
        let n = num_blocks * params_per_block(block_dim);
        let values = (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect();
        Self::new(block_dim, num_blocks, values)
    }

    pub fn block_dim(&self) -> usize {
        self.block_dim
    }

    pub fn num_blocks(&self) -> usize {
        self.num_blocks
    }

    pub fn input_dim(&self) -> usize {
        self.block_dim * self.num_blocks
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn block_values(&self, block_index: usize) -> &[f64] {
        let p = params_per_block(self.block_dim);
        &self.values[block_index * p..(block_index + 1) * p]
    }

    /// Every generator multiplied by `s`.
    pub fn scaled(&self, s: f64) -> Self {
        Self {
            block_dim: self.block_dim,
            num_blocks: self.num_blocks,
            values: self.values.iter().map(|v| v * s).collect(),
        }
    }
}

/// Materialise the skew-symmetric generator of one block.
pub fn skew_from_params(params: &SkewBlockParams, block_index: usize) -> Result<DMatrix<f64>> {
    if block_index >= params.num_blocks {
        return Err(CuaError::IndexOutOfRange { index: block_index, len: params.num_blocks });
    }
    let slice = params.block_values(block_index);
    if slice.iter().any(|v| !v.is_finite()) {
        return Err(CuaError::NonFinite("skew parameters"));
    }
    let b = params.block_dim;
    let mut k = DMatrix::zeros(b, b);
    let mut it = slice.iter();
    for i in 0..b {
        for j in (i + 1)..b {
            let v = *it.next().expect("slice length checked at construction");
            k[(i, j)] = v;
            k[(j, i)] = -v;
        }
    }
    Ok(k)
}

fn check_square(m: &DMatrix<f64>) -> Result<usize> {
    if m.nrows() != m.ncols() {
        return Err(CuaError::InvalidShape(format!("expected square matrix, got {}x{}", m.nrows(), m.ncols())));
    }
    Ok(m.nrows())
}

fn max_skew_defect(k: &DMatrix<f64>) -> f64 {
    let n = k.nrows();
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in i..n {
            worst = worst.max((k[(i, j)] + k[(j, i)]).abs());
        }
    }
    worst
}

/// `||Q^T Q - I||_F`.
pub fn orthogonality_defect(q: &DMatrix<f64>) -> f64 {
    let n = q.ncols();
    (q.transpose() * q - DMatrix::<f64>::identity(n, n)).norm()
}

/// `Q = (I - K/2)(I + K/2)^{-1}`, evaluated as the solve `(I + K/2) Q = I - K/2`
/// (the two factors commute).
pub fn cayley_transform(k: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = check_square(k)?;
    if k.iter().any(|v| !v.is_finite()) {
        return Err(CuaError::NonFinite("generator"));
    }
    let scale = k.amax().max(1.0);
    let defect = max_skew_defect(k);
    if defect > 1e-12 * scale {
        return Err(CuaError::NotSkew(defect));
    }
    let eye = DMatrix::<f64>::identity(n, n);
    let half = k * 0.5;
    let m = &eye + &half;
    let rhs = &eye - &half;
    m.lu().solve(&rhs).ok_or(CuaError::Singular(0.0))
}

/// Recover `K = 2 (I + Q)^{-1} (I - Q)`.
pub fn cayley_inverse(q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = check_square(q)?;
    let eye = DMatrix::<f64>::identity(n, n);
    let m = &eye + q;
    let smin = m.singular_values().min();
    if smin < INVERSE_SINGULAR_TOL {
        return Err(CuaError::Singular(smin));
    }
    let k = m.lu().solve(&(&eye - q)).ok_or(CuaError::Singular(smin))? * 2.0;
    // Project away round-off so the result is exactly antisymmetric.
    Ok((&k - k.transpose()) * 0.5)
}

/// Direct sum of equally sized orthogonal blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockDiagonalUnitary {
    block_dim: usize,
    blocks: Vec<DMatrix<f64>>,
}

impl BlockDiagonalUnitary {
    /// Build from explicit blocks, checking shape and orthogonality.
    pub fn from_blocks(blocks: Vec<DMatrix<f64>>) -> Result<Self> {
        let first = blocks.first().ok_or_else(|| CuaError::InvalidShape("no blocks".into()))?;
        let b = first.nrows();
        for blk in &blocks {
            if blk.nrows() != b || blk.ncols() != b {
                return Err(CuaError::InvalidShape("blocks must share one square size".into()));
            }
            let defect = orthogonality_defect(blk);
            if defect > BLOCK_ORTHO_TOL * (b as f64).max(1.0) {
                return Err(CuaError::NotOrthogonal(defect));
            }
        }
        Ok(Self { block_dim: b, blocks })
    }

    pub fn identity(dim: usize, block_dim: usize) -> Result<Self> {
        assemble_bdu(&SkewBlockParams::zeros_for_dim(dim, block_dim)?)
    }

    pub fn block_dim(&self) -> usize {
        self.block_dim
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn input_dim(&self) -> usize {
        self.block_dim * self.blocks.len()
    }

    pub fn blocks(&self) -> &[DMatrix<f64>] {
        &self.blocks
    }

    /// Apply to `x` writing into `out` (both of length `input_dim`).
    pub fn apply_into(&self, x: &[f64], out: &mut [f64]) {
        let b = self.block_dim;
        for (i, q) in self.blocks.iter().enumerate() {
            let xs = &x[i * b..(i + 1) * b];
            let os = &mut out[i * b..(i + 1) * b];
            for (r, o) in os.iter_mut().enumerate() {
                let mut acc = 0.0;
                for (c, xv) in xs.iter().enumerate() {
                    acc += q[(r, c)] * xv;
                }
                *o = acc;
            }
        }
    }

    /// Apply the transpose (the inverse) to `g`.
    pub fn apply_transpose_into(&self, g: &[f64], out: &mut [f64]) {
        let b = self.block_dim;
        for (i, q) in self.blocks.iter().enumerate() {
            let gs = &g[i * b..(i + 1) * b];
            let os = &mut out[i * b..(i + 1) * b];
            for (c, o) in os.iter_mut().enumerate() {
                let mut acc = 0.0;
                for (r, gv) in gs.iter().enumerate() {
                    acc += q[(r, c)] * gv;
                }
                *o = acc;
            }
        }
    }

    /// Materialise the full `d x d` matrix.
    pub fn to_dense(&self) -> DMatrix<f64> {
        let d = self.input_dim();
        let b = self.block_dim;
        let mut m = DMatrix::zeros(d, d);
        for (i, q) in self.blocks.iter().enumerate() {
            m.view_mut((i * b, i * b), (b, b)).copy_from(q);
        }
        m
    }
}

/// Cayley-transform every generator and collect the blocks.
pub fn assemble_bdu(params: &SkewBlockParams) -> Result<BlockDiagonalUnitary> {
    let blocks = (0..params.num_blocks)
        .map(|i| skew_from_params(params, i).and_then(|k| cayley_transform(&k)))
        .collect::<Result<Vec<_>>>()?;
    Ok(BlockDiagonalUnitary { block_dim: params.block_dim, blocks })
}

/// `y = Q x` for a block-diagonal `Q`.
pub fn bdu_apply(u: &BlockDiagonalUnitary, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != u.input_dim() {
        return Err(CuaError::DimensionMismatch { expected: u.input_dim(), got: x.len() });
    }
    let mut out = vec![0.0; x.len()];
    u.apply_into(x, &mut out);
    Ok(out)
}

/// A full-dimension orthogonal matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseOrthogonal {
    matrix: DMatrix<f64>,
}

impl DenseOrthogonal {
    pub fn new(matrix: DMatrix<f64>) -> Result<Self> {
        check_square(&matrix)?;
        let defect = orthogonality_defect(&matrix);
        if defect > DENSE_ORTHO_TOL {
            return Err(CuaError::NotOrthogonal(defect));
        }
        Ok(Self { matrix })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }
}

/// Pull a gradient with respect to the block entries `dL/dQ_i` back to the
/// stored upper-triangular parameters.
///
/// With `M = I + K/2`, `dQ = -1/2 M^{-1} dK (I + Q)`, hence
/// `dL/dK = -1/2 M^{-T} G (I + Q)^T`, and each free parameter `K_ij = -K_ji`
/// collects `dL/dK_ij - dL/dK_ji`.
pub fn cayley_gradient(params: &SkewBlockParams, upstream: &[DMatrix<f64>]) -> Result<Vec<f64>> {
    if upstream.len() != params.num_blocks {
        return Err(CuaError::DimensionMismatch { expected: params.num_blocks, got: upstream.len() });
    }
    let b = params.block_dim;
    let eye = DMatrix::<f64>::identity(b, b);
    let mut grad = Vec::with_capacity(params.len());
    for (i, g) in upstream.iter().enumerate() {
        if g.nrows() != b || g.ncols() != b {
            return Err(CuaError::InvalidShape(format!("upstream block {i} is {}x{}", g.nrows(), g.ncols())));
        }
        let k = skew_from_params(params, i)?;
        let q = cayley_transform(&k)?;
        let mt = (&eye + &k * 0.5).transpose();
        let x = mt.lu().solve(g).ok_or(CuaError::Singular(0.0))?;
        let gk = x * (&eye + q).transpose() * -0.5;
        for r in 0..b {
            for c in (r + 1)..b {
                grad.push(gk[(r, c)] - gk[(c, r)]);
            }
        }
    }
    Ok(grad)
}

/// Serialise parameters as `"CUA1" | b: u32 LE | k: u32 LE | values: f64 LE`.
pub fn params_to_bytes(params: &SkewBlockParams) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 8 * params.len());
    out.extend_from_slice(b"CUA1");
    out.extend_from_slice(&(params.block_dim as u32).to_le_bytes());
    out.extend_from_slice(&(params.num_blocks as u32).to_le_bytes());
    for v in &params.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn params_from_bytes(bytes: &[u8]) -> Result<SkewBlockParams> {
    if bytes.len() < 12 || &bytes[..4] != b"CUA1" {
        return Err(CuaError::Parse("missing CUA1 header".into()));
    }
    let b = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let k = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let body = &bytes[12..];
    let expected = k * params_per_block(b);
    if body.len() != expected * 8 {
        return Err(CuaError::Parse(format!("expected {} payload bytes, found {}", expected * 8, body.len())));
    }
    let values = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    SkewBlockParams::new(b, k, values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;
    use nalgebra::dmatrix;

    #[test]
    fn zero_params_give_zero_generator() {
        let p = SkewBlockParams::zeros(4, 1).unwrap();
        assert_eq!(skew_from_params(&p, 0).unwrap(), DMatrix::zeros(4, 4));
    }

    #[test]
    fn single_param_placement() {
        let p = SkewBlockParams::new(2, 1, vec![2.0]).unwrap();
        assert_eq!(skew_from_params(&p, 0).unwrap(), dmatrix![0.0, 2.0; -2.0, 0.0]);
    }

    #[test]
    fn upper_triangle_is_row_major() {
        let p = SkewBlockParams::new(4, 1, vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let k = skew_from_params(&p, 0).unwrap();
        assert_eq!([k[(0, 1)], k[(0, 2)], k[(0, 3)], k[(1, 2)], k[(1, 3)], k[(2, 3)]], [1., 2., 3., 4., 5., 6.]);
    }

    #[test]
    fn skew_errors() {
        let p = SkewBlockParams::zeros(4, 2).unwrap();
        assert!(matches!(skew_from_params(&p, 2), Err(CuaError::IndexOutOfRange { .. })));
        let nan = SkewBlockParams::new(2, 1, vec![f64::NAN]).unwrap();
        assert!(matches!(skew_from_params(&nan, 0), Err(CuaError::NonFinite(_))));
        assert!(SkewBlockParams::new(4, 1, vec![0.0; 5]).is_err());
        assert!(SkewBlockParams::new(3, 1, vec![0.0; 3]).is_err());
    }

    #[test]
    fn random_generators_are_antisymmetric() {
        for seed in 0..100 {
            let mut rng = rng_from(seed);
            let p = SkewBlockParams::random(8, 2, 1.0, &mut rng).unwrap();
            for i in 0..2 {
                let k = skew_from_params(&p, i).unwrap();
                assert_eq!((&k + k.transpose()).amax(), 0.0);
            }
        }
    }

    #[test]
    fn cayley_identity_and_quarter_turn() {
        let q = cayley_transform(&DMatrix::zeros(3, 3)).unwrap();
        assert_eq!(q, DMatrix::identity(3, 3));
        // (I - K/2) = [[1,-1],[1,1]], (I + K/2)^{-1} = 1/2 [[1,-1],[1,1]]
        let q = cayley_transform(&dmatrix![0.0, 2.0; -2.0, 0.0]).unwrap();
        let want = dmatrix![0.0, -1.0; 1.0, 0.0];
        assert!((q - want).amax() < 1e-15);
    }

    #[test]
    fn cayley_rejects_bad_input() {
        assert!(matches!(cayley_transform(&DMatrix::zeros(2, 3)), Err(CuaError::InvalidShape(_))));
        assert!(matches!(cayley_transform(&dmatrix![0.0, 1.0; 1.0, 0.0]), Err(CuaError::NotSkew(_))));
    }

    #[test]
    fn random_cayley_has_unit_determinant() {
        for seed in 0..100 {
            let mut rng = rng_from(seed);
            let p = SkewBlockParams::random(4, 1, 1.0, &mut rng).unwrap();
            let q = cayley_transform(&skew_from_params(&p, 0).unwrap()).unwrap();
            assert!((q.determinant() - 1.0).abs() < 1e-12);
            assert!(orthogonality_defect(&q) < BLOCK_ORTHO_TOL);
        }
    }

    #[test]
    fn inverse_round_trip() {
        assert_eq!(cayley_inverse(&DMatrix::identity(4, 4)).unwrap(), DMatrix::zeros(4, 4));
        for seed in 0..50 {
            let mut rng = rng_from(seed);
            let p = SkewBlockParams::random(4, 1, 0.2, &mut rng).unwrap();
            let k = skew_from_params(&p, 0).unwrap();
            let back = cayley_inverse(&cayley_transform(&k).unwrap()).unwrap();
            assert!((back - k).amax() < 1e-10);
        }
        let minus = -DMatrix::<f64>::identity(2, 2);
        assert!(matches!(cayley_inverse(&minus), Err(CuaError::Singular(_))));
    }

    #[test]
    fn assemble_sizes() {
        let p = SkewBlockParams::zeros_for_dim(4096, 4).unwrap();
        assert_eq!((p.num_blocks(), p.len()), (1024, 6144));
        let p = SkewBlockParams::zeros_for_dim(576, 4).unwrap();
        assert_eq!((p.num_blocks(), p.len()), (144, 864));
        let u = assemble_bdu(&SkewBlockParams::zeros_for_dim(8, 4).unwrap()).unwrap();
        assert_eq!(u.to_dense(), DMatrix::identity(8, 8));
    }

    #[test]
    fn apply_quarter_turn_block() {
        let u = BlockDiagonalUnitary::from_blocks(vec![dmatrix![0.0, -1.0; 1.0, 0.0]]).unwrap();
        assert_eq!(bdu_apply(&u, &[3.0, 4.0]).unwrap(), vec![-4.0, 3.0]);
        assert!(matches!(bdu_apply(&u, &[1.0]), Err(CuaError::DimensionMismatch { .. })));
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let mut rng = rng_from(3);
        let p = SkewBlockParams::random(4, 2, 0.5, &mut rng).unwrap();
        let g = cayley_gradient(&p, &[DMatrix::zeros(4, 4), DMatrix::zeros(4, 4)]).unwrap();
        assert!(g.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn identity_is_stationary_for_distance_to_identity() {
        // L = ||Q - I||_F^2, G = 2 (Q - I) = 0 at K = 0.
        let p = SkewBlockParams::zeros(4, 1).unwrap();
        let q = assemble_bdu(&p).unwrap().blocks()[0].clone();
        let g = (q - DMatrix::<f64>::identity(4, 4)) * 2.0;
        assert!(cayley_gradient(&p, &[g]).unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn bytes_round_trip_and_rejects_garbage() {
        let mut rng = rng_from(9);
        let p = SkewBlockParams::random(4, 3, 1.0, &mut rng).unwrap();
        let bytes = params_to_bytes(&p);
        assert_eq!(&bytes[..4], b"CUA1");
        assert_eq!(params_from_bytes(&bytes).unwrap(), p);
        assert!(params_from_bytes(b"CUA2\0\0\0\0\0\0\0\0").is_err());
        assert!(params_from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }
}
