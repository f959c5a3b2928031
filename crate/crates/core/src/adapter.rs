//! The adapter forward map `y = W(|Qx| ⊙ sgn(x))` and its unconstrained
//! relatives, plus the stochastic baselines used in ablations.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::cayley::{
    assemble_bdu, cayley_gradient, BlockDiagonalUnitary, DenseOrthogonal, SkewBlockParams,
};
use crate::error::{CuaError, Result};
use crate::rng::rng_from;

/// `sgn` with `sgn(0) = 0`.
#[inline]
pub fn sgn(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterMode {
    SignConstrained,
    Orthogonal,
    Unconstrained,
}

impl fmt::Display for AdapterMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AdapterMode::SignConstrained => "sign_constrained",
            AdapterMode::Orthogonal => "orthogonal",
            AdapterMode::Unconstrained => "unconstrained",
        })
    }
}

impl FromStr for AdapterMode {
    type Err = CuaError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sign_constrained" | "sign-constrained" => Ok(AdapterMode::SignConstrained),
            "orthogonal" => Ok(AdapterMode::Orthogonal),
            "unconstrained" => Ok(AdapterMode::Unconstrained),
            other => Err(CuaError::Parse(format!("unknown adapter mode `{other}`"))),
        }
    }
}

/// The seven projection sites of a decoder block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Projection {
    #[serde(rename = "q_proj")]
    Q,
    #[serde(rename = "k_proj")]
    K,
    #[serde(rename = "v_proj")]
    V,
    #[serde(rename = "o_proj")]
    O,
    #[serde(rename = "gate_proj")]
    Gate,
    #[serde(rename = "up_proj")]
    Up,
    #[serde(rename = "down_proj")]
    Down,
}

impl Projection {
    pub const ALL: [Projection; 7] =
        [Projection::Q, Projection::K, Projection::V, Projection::O, Projection::Gate, Projection::Up, Projection::Down];

    pub fn name(self) -> &'static str {
        match self {
            Projection::Q => "q_proj",
            Projection::K => "k_proj",
            Projection::V => "v_proj",
            Projection::O => "o_proj",
            Projection::Gate => "gate_proj",
            Projection::Up => "up_proj",
            Projection::Down => "down_proj",
        }
    }

    pub fn index(self) -> usize {
        Projection::ALL.iter().position(|p| *p == self).unwrap()
    }
}

impl fmt::Display for Projection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Projection {
    type Err = CuaError;
    fn from_str(s: &str) -> Result<Self> {
        Projection::ALL
            .into_iter()
            .find(|p| p.name() == s || p.name().trim_end_matches("_proj") == s)
            .ok_or_else(|| CuaError::Parse(format!("unknown projection `{s}`")))
    }
}

/// Where an adapter sits in a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AdapterSite {
    pub layer: usize,
    pub projection: Projection,
    pub mode: AdapterMode,
}

impl AdapterSite {
    pub fn new(layer: usize, projection: Projection, mode: AdapterMode) -> Self {
        Self { layer, projection, mode }
    }

    /// Stable ordering key: layer-major, then projection order.
    pub fn index(&self) -> usize {
        self.layer * Projection::ALL.len() + self.projection.index()
    }

    /// `"<layer>.<projection>"`, e.g. `1.v_proj`.
    pub fn label(&self) -> String {
        format!("{}.{}", self.layer, self.projection)
    }
}

/// The operator placed in front of the frozen weight.
#[derive(Debug, Clone, PartialEq)]
pub enum Transform {
    /// Trainable block-diagonal Cayley operator.
    Cayley { params: SkewBlockParams, bdu: BlockDiagonalUnitary },
    /// A fixed full-dimension orthogonal matrix.
    DenseOrthogonal(DenseOrthogonal),
    /// Trainable unconstrained block-diagonal matrix (`b^2` parameters per block).
    Blocks(Vec<DMatrix<f64>>),
    /// Any dense square matrix; used for unconstrained full-dimension maps and
    /// for non-orthogonal ablation baselines.
    Matrix(DMatrix<f64>),
}

impl Transform {
    pub fn cayley(params: SkewBlockParams) -> Result<Self> {
        let bdu = assemble_bdu(&params)?;
        Ok(Transform::Cayley { params, bdu })
    }

    pub fn identity_cayley(dim: usize, block_dim: usize) -> Result<Self> {
        Self::cayley(SkewBlockParams::zeros_for_dim(dim, block_dim)?)
    }

    pub fn identity_blocks(dim: usize, block_dim: usize) -> Result<Self> {
        if block_dim == 0 || !dim.is_multiple_of(block_dim) {
            return Err(CuaError::InvalidShape(format!("{dim} not divisible by {block_dim}")));
        }
        Ok(Transform::Blocks(vec![DMatrix::identity(block_dim, block_dim); dim / block_dim]))
    }

    pub fn dim(&self) -> usize {
        match self {
            Transform::Cayley { bdu, .. } => bdu.input_dim(),
            Transform::DenseOrthogonal(q) => q.dim(),
            Transform::Blocks(bs) => bs.iter().map(|b| b.nrows()).sum(),
            Transform::Matrix(m) => m.nrows(),
        }
    }

    /// Trainable parameter count.
    pub fn num_params(&self) -> usize {
        match self {
            Transform::Cayley { params, .. } => params.len(),
            Transform::DenseOrthogonal(_) => 0,
            Transform::Blocks(bs) => bs.iter().map(|b| b.len()).sum(),
            Transform::Matrix(m) => m.len(),
        }
    }

    pub fn is_orthogonal(&self) -> bool {
        matches!(self, Transform::Cayley { .. } | Transform::DenseOrthogonal(_))
    }

    /// Block size of the operator's direct-sum structure (the full dimension
    /// for dense operators).
    pub fn block_dim(&self) -> usize {
        match self {
            Transform::Cayley { bdu, .. } => bdu.block_dim(),
            Transform::Blocks(bs) => bs[0].nrows(),
            _ => self.dim(),
        }
    }

    /// The diagonal blocks of the operator (a single block for dense maps).
    pub fn blocks_view(&self) -> Vec<&DMatrix<f64>> {
        match self {
            Transform::Cayley { bdu, .. } => bdu.blocks().iter().collect(),
            Transform::DenseOrthogonal(q) => vec![q.matrix()],
            Transform::Blocks(bs) => bs.iter().collect(),
            Transform::Matrix(m) => vec![m],
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let d = self.dim();
        let mut out = DMatrix::zeros(d, d);
        let mut off = 0;
        for b in self.blocks_view() {
            let n = b.nrows();
            out.view_mut((off, off), (n, n)).copy_from(b);
            off += n;
        }
        out
    }

    /// `out = T x`.
    pub fn apply_into(&self, x: &[f64], out: &mut [f64]) {
        if let Transform::Cayley { bdu, .. } = self {
            bdu.apply_into(x, out);
            return;
        }
        let mut off = 0;
        for b in self.blocks_view() {
            let n = b.nrows();
            for r in 0..n {
                let mut acc = 0.0;
                for c in 0..n {
                    acc += b[(r, c)] * x[off + c];
                }
                out[off + r] = acc;
            }
            off += n;
        }
    }

    /// `out = T^T g`.
    pub fn apply_transpose_into(&self, g: &[f64], out: &mut [f64]) {
        let mut off = 0;
        for b in self.blocks_view() {
            let n = b.nrows();
            for c in 0..n {
                let mut acc = 0.0;
                for r in 0..n {
                    acc += b[(r, c)] * g[off + r];
                }
                out[off + c] = acc;
            }
            off += n;
        }
    }

    /// Flat trainable parameters (empty for fixed operators).
    pub fn params(&self) -> Vec<f64> {
        match self {
            Transform::Cayley { params, .. } => params.values().to_vec(),
            Transform::DenseOrthogonal(_) => Vec::new(),
            Transform::Blocks(bs) => bs.iter().flat_map(|b| b.iter().copied()).collect(),
            Transform::Matrix(m) => m.iter().copied().collect(),
        }
    }

    /// Replace the trainable parameters, re-deriving any cached operator.
    pub fn set_params(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.num_params() {
            return Err(CuaError::DimensionMismatch { expected: self.num_params(), got: values.len() });
        }
        match self {
            Transform::Cayley { params, bdu } => {
                params.values_mut().copy_from_slice(values);
                *bdu = assemble_bdu(params)?;
            }
            Transform::DenseOrthogonal(_) => {}
            Transform::Blocks(bs) => {
                let mut off = 0;
                for b in bs.iter_mut() {
                    let n = b.len();
                    b.as_mut_slice().copy_from_slice(&values[off..off + n]);
                    off += n;
                }
            }
            Transform::Matrix(m) => m.as_mut_slice().copy_from_slice(values),
        }
        Ok(())
    }

    /// Convert per-block `dL/dT_i` into a gradient over [`Transform::params`].
    pub fn param_gradient(&self, upstream: &[DMatrix<f64>]) -> Result<Vec<f64>> {
        match self {
            Transform::Cayley { params, .. } => cayley_gradient(params, upstream),
            Transform::DenseOrthogonal(_) => Ok(Vec::new()),
            Transform::Blocks(_) | Transform::Matrix(_) => {
                Ok(upstream.iter().flat_map(|g| g.iter().copied()).collect())
            }
        }
    }

    fn zero_block_grads(&self) -> Vec<DMatrix<f64>> {
        self.blocks_view().iter().map(|b| DMatrix::zeros(b.nrows(), b.ncols())).collect()
    }
}

/// FNV-1a over the bit patterns of a matrix.
pub fn weight_checksum(w: &DMatrix<f64>) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for v in w.iter() {
        for byte in v.to_bits().to_le_bytes() {
            h ^= byte as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01B3);
        }
    }
    h
}

/// A frozen projection preceded by an adapter operator.
#[derive(Debug, Clone, PartialEq)]
pub struct CuaLayer {
    mode: AdapterMode,
    transform: Transform,
    frozen_weight: DMatrix<f64>,
}

/// Per-block gradient with respect to the operator entries, accumulated over
/// a batch of inputs.
#[derive(Debug, Clone)]
pub struct OperatorGrad {
    pub blocks: Vec<DMatrix<f64>>,
}

impl CuaLayer {
    pub fn new(mode: AdapterMode, transform: Transform, frozen_weight: DMatrix<f64>) -> Result<Self> {
        if transform.dim() != frozen_weight.ncols() {
            return Err(CuaError::DimensionMismatch { expected: frozen_weight.ncols(), got: transform.dim() });
        }
        match (mode, &transform) {
            (AdapterMode::Unconstrained, Transform::Cayley { .. } | Transform::DenseOrthogonal(_)) => {
                return Err(CuaError::InvalidConfig("unconstrained mode needs a dense or block matrix".into()))
            }
            (AdapterMode::Orthogonal, t) if !t.is_orthogonal() => {
                return Err(CuaError::InvalidConfig("orthogonal mode needs an orthogonal operator".into()))
            }
            (AdapterMode::SignConstrained, t) if !t.is_orthogonal() => {
                return Err(CuaError::InvalidConfig("sign-constrained mode needs an orthogonal operator".into()))
            }
            _ => {}
        }
        Ok(Self { mode, transform, frozen_weight })
    }

    /// A sign-constrained layer around an arbitrary fixed square operator.
    /// Only ablation baselines use this: the operator need not be orthogonal.
    pub fn ablation(operator: DMatrix<f64>, frozen_weight: DMatrix<f64>) -> Result<Self> {
        if operator.nrows() != operator.ncols() || operator.nrows() != frozen_weight.ncols() {
            return Err(CuaError::DimensionMismatch { expected: frozen_weight.ncols(), got: operator.nrows() });
        }
        Ok(Self { mode: AdapterMode::SignConstrained, transform: Transform::Matrix(operator), frozen_weight })
    }

    /// Identity-initialised adapter of the given mode and block size.
    pub fn identity(mode: AdapterMode, block_dim: usize, frozen_weight: DMatrix<f64>) -> Result<Self> {
        let d = frozen_weight.ncols();
        let t = match mode {
            AdapterMode::Unconstrained => Transform::identity_blocks(d, block_dim)?,
            _ => Transform::identity_cayley(d, block_dim)?,
        };
        Self::new(mode, t, frozen_weight)
    }

    pub fn mode(&self) -> AdapterMode {
        self.mode
    }

    pub fn transform(&self) -> &Transform {
        &self.transform
    }

    pub fn transform_mut(&mut self) -> &mut Transform {
        &mut self.transform
    }

    pub fn frozen_weight(&self) -> &DMatrix<f64> {
        &self.frozen_weight
    }

    pub fn into_frozen_weight(self) -> DMatrix<f64> {
        self.frozen_weight
    }

    pub fn d_in(&self) -> usize {
        self.frozen_weight.ncols()
    }

    pub fn d_out(&self) -> usize {
        self.frozen_weight.nrows()
    }

    /// The vector handed to `W`: `|Tx| ⊙ sgn(x)` or `Tx`.
    pub fn pre_weight_into(&self, x: &[f64], out: &mut [f64]) {
        self.transform.apply_into(x, out);
        if self.mode == AdapterMode::SignConstrained {
            for (o, xv) in out.iter_mut().zip(x) {
                *o = o.abs() * sgn(*xv);
            }
        }
    }

    /// Row-wise pre-weight map over a batch (one input per row).
    pub fn pre_weight_rows(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let (n, d) = x.shape();
        let mut out = DMatrix::zeros(n, d);
        let mut xi = vec![0.0; d];
        let mut oi = vec![0.0; d];
        for r in 0..n {
            for c in 0..d {
                xi[c] = x[(r, c)];
            }
            self.pre_weight_into(&xi, &mut oi);
            for c in 0..d {
                out[(r, c)] = oi[c];
            }
        }
        out
    }

    /// Row-wise forward: `Y = pre(X) W^T`.
    pub fn forward_rows(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        self.pre_weight_rows(x) * self.frozen_weight.transpose()
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.d_in() {
            return Err(CuaError::DimensionMismatch { expected: self.d_in(), got: x.len() });
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let mut pre = vec![0.0; x.len()];
        self.pre_weight_into(x, &mut pre);
        Ok((&self.frozen_weight * nalgebra::DVector::from_vec(pre)).data.into())
    }

    /// Back-propagate a batch. Given inputs `x` (rows) and `dL/dY` (rows),
    /// returns `dL/dX` and the accumulated operator gradient. `W` receives no
    /// gradient.
    pub fn backward_rows(&self, x: &DMatrix<f64>, dy: &DMatrix<f64>) -> (DMatrix<f64>, OperatorGrad) {
        let dpre = dy * &self.frozen_weight;
        let (n, d) = x.shape();
        let mut dx = DMatrix::zeros(n, d);
        let mut grads = self.transform.zero_block_grads();
        let mut xi = vec![0.0; d];
        let mut ui = vec![0.0; d];
        let mut du = vec![0.0; d];
        let mut dxi = vec![0.0; d];
        for r in 0..n {
            for c in 0..d {
                xi[c] = x[(r, c)];
            }
            self.transform.apply_into(&xi, &mut ui);
            for c in 0..d {
                du[c] = match self.mode {
                    // d|u|/du = sgn(u), with 0 at the kink.
                    AdapterMode::SignConstrained => dpre[(r, c)] * sgn(ui[c]) * sgn(xi[c]),
                    _ => dpre[(r, c)],
                };
            }
            self.transform.apply_transpose_into(&du, &mut dxi);
            for c in 0..d {
                dx[(r, c)] = dxi[c];
            }
            let mut off = 0;
            for g in grads.iter_mut() {
                let bsz = g.nrows();
                for i in 0..bsz {
                    let dui = du[off + i];
                    if dui == 0.0 {
                        continue;
                    }
                    for j in 0..bsz {
                        g[(i, j)] += dui * xi[off + j];
                    }
                }
                off += bsz;
            }
        }
        (dx, OperatorGrad { blocks: grads })
    }

    pub fn param_gradient(&self, grad: &OperatorGrad) -> Result<Vec<f64>> {
        self.transform.param_gradient(&grad.blocks)
    }
}

/// `y = W(|Qx| ⊙ sgn(x))`.
pub fn forward_sign_constrained(layer: &CuaLayer, x: &[f64]) -> Result<Vec<f64>> {
    if layer.mode != AdapterMode::SignConstrained {
        return Err(CuaError::InvalidConfig(format!("expected sign_constrained layer, got {}", layer.mode)));
    }
    layer.forward(x)
}

/// `y = W(Qx)` for the orthogonal and unconstrained regimes.
pub fn forward_plain(layer: &CuaLayer, x: &[f64]) -> Result<Vec<f64>> {
    if layer.mode == AdapterMode::SignConstrained {
        return Err(CuaError::InvalidConfig("forward_plain on a sign_constrained layer".into()));
    }
    layer.forward(x)
}

/// Gradient of `<upstream, layer(x)>` with respect to the transform parameters.
pub fn adapter_backward(layer: &CuaLayer, x: &[f64], upstream: &[f64]) -> Result<Vec<f64>> {
    layer.check_input(x)?;
    if upstream.len() != layer.d_out() {
        return Err(CuaError::DimensionMismatch { expected: layer.d_out(), got: upstream.len() });
    }
    let xm = DMatrix::from_row_slice(1, x.len(), x);
    let dy = DMatrix::from_row_slice(1, upstream.len(), upstream);
    let (_, g) = layer.backward_rows(&xm, &dy);
    layer.param_gradient(&g)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationKind {
    Identity,
    SignedDiagonal,
    RandomGaussian,
    RandomUnitary,
    RandomPermutation,
}

impl AblationKind {
    pub const ALL: [AblationKind; 5] = [
        AblationKind::Identity,
        AblationKind::SignedDiagonal,
        AblationKind::RandomGaussian,
        AblationKind::RandomUnitary,
        AblationKind::RandomPermutation,
    ];

    pub fn is_stochastic_scrambler(self) -> bool {
        matches!(self, AblationKind::RandomGaussian | AblationKind::RandomUnitary | AblationKind::RandomPermutation)
    }

    pub fn name(self) -> &'static str {
        match self {
            AblationKind::Identity => "identity",
            AblationKind::SignedDiagonal => "signed_diagonal",
            AblationKind::RandomGaussian => "random_gaussian",
            AblationKind::RandomUnitary => "random_unitary",
            AblationKind::RandomPermutation => "random_permutation",
        }
    }
}

/// Haar-distributed orthogonal matrix: QR of a Gaussian matrix with the
/// diagonal of `R` made positive.
pub fn haar_orthogonal(d: usize, rng: &mut crate::rng::Rng) -> DMatrix<f64> {
    let g = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for c in 0..d {
        if r[(c, c)] < 0.0 {
            q.column_mut(c).neg_mut();
        }
    }
    q
}

/// Ablation baseline operator of dimension `d`, reproducible from `seed`.
pub fn make_ablation(kind: AblationKind, d: usize, seed: u64) -> Result<DMatrix<f64>> {
    if d == 0 {
        return Err(CuaError::InvalidShape("ablation dimension must be positive".into()));
    }
    let mut rng = rng_from(seed);
    Ok(match kind {
        AblationKind::Identity => DMatrix::identity(d, d),
        AblationKind::SignedDiagonal => {
            DMatrix::from_diagonal(&nalgebra::DVector::from_fn(d, |_, _| if rng.random::<bool>() { 1.0 } else { -1.0 }))
        }
        AblationKind::RandomGaussian => {
            let s = (1.0 / d as f64).sqrt();
            DMatrix::from_fn(d, d, |_, _| s * rng.sample::<f64, _>(StandardNormal))
        }
        AblationKind::RandomUnitary => haar_orthogonal(d, &mut rng),
        AblationKind::RandomPermutation => {
            let mut perm: Vec<usize> = (0..d).collect();
            perm.shuffle(&mut rng);
            let mut m = DMatrix::zeros(d, d);
            for (r, c) in perm.into_iter().enumerate() {
                m[(r, c)] = 1.0;
            }
            m
        }
    })
}

/// Plain-text description of one adapter, enough to rebuild it from its
/// parameter blob.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerManifest {
    pub site: String,
    pub mode: AdapterMode,
    pub block_size: usize,
    pub params_blob: String,
}

impl LayerManifest {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest fields are plain scalars")
    }

    pub fn from_toml(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| CuaError::Parse(e.to_string()))
    }
}
