//! A small byte-level decoder-only transformer with hand-written backprop.
//!
//! Each block is pre-norm (RMSNorm) with causal multi-head attention and a
//! SwiGLU feed-forward of width `4d`. Every block has the seven projection
//! sites `q, k, v, o, gate, up, down`; any of them can hold a frozen weight
//! or a [`CuaLayer`] wrapping that weight.

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::adapter::{AdapterMode, AdapterSite, CuaLayer, Projection, Transform};
use crate::error::{CuaError, Result};
use crate::qemu::{emulated_pre_weight_rows, ChannelParams, EmulationMode};
use crate::rng::{derive_seed, rng_at};

pub const RMS_EPS: f64 = 1e-6;
pub const FF_MULT: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyLmConfig {
    pub num_layers: usize,
    pub d_model: usize,
    pub num_heads: usize,
    pub vocab_size: usize,
    pub context_length: usize,
}

impl Default for ToyLmConfig {
    fn default() -> Self {
        Self { num_layers: 2, d_model: 32, num_heads: 4, vocab_size: 256, context_length: 64 }
    }
}

impl ToyLmConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(CuaError::InvalidConfig(m.to_string()));
        if self.num_layers == 0 {
            return bad("num_layers must be positive");
        }
        if self.d_model == 0 || !self.d_model.is_multiple_of(4) {
            return bad("d_model must be a positive multiple of 4");
        }
        if self.num_heads == 0 || !self.d_model.is_multiple_of(self.num_heads) {
            return bad("num_heads must divide d_model");
        }
        if self.vocab_size < 2 {
            return bad("vocab_size must be at least 2");
        }
        if self.context_length == 0 {
            return bad("context_length must be positive");
        }
        Ok(())
    }

    pub fn ff_dim(&self) -> usize {
        FF_MULT * self.d_model
    }

    /// `(d_out, d_in)` of a projection.
    pub fn proj_shape(&self, p: Projection) -> (usize, usize) {
        let (d, f) = (self.d_model, self.ff_dim());
        match p {
            Projection::Q | Projection::K | Projection::V | Projection::O => (d, d),
            Projection::Gate | Projection::Up => (f, d),
            Projection::Down => (d, f),
        }
    }
}

/// What sits at a projection site.
#[derive(Debug, Clone, PartialEq)]
pub enum Projector {
    Frozen(DMatrix<f64>),
    Adapted(CuaLayer),
}

impl Projector {
    pub fn weight(&self) -> &DMatrix<f64> {
        match self {
            Projector::Frozen(w) => w,
            Projector::Adapted(l) => l.frozen_weight(),
        }
    }

    pub fn adapter(&self) -> Option<&CuaLayer> {
        match self {
            Projector::Adapted(l) => Some(l),
            Projector::Frozen(_) => None,
        }
    }
}

/// How adapter operators are evaluated during a forward pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AdapterExec {
    Classical,
    /// Run sign-constrained adapters through the emulated measurement path.
    Emulated { channel: ChannelParams, mode: EmulationMode, seed: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub ln1: DVector<f64>,
    pub ln2: DVector<f64>,
    /// Indexed by [`Projection::index`].
    pub proj: Vec<Projector>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyLm {
    pub cfg: ToyLmConfig,
    /// `vocab × d`
    pub tok_emb: DMatrix<f64>,
    /// `context × d`
    pub pos_emb: DMatrix<f64>,
    pub blocks: Vec<Block>,
    pub ln_f: DVector<f64>,
    /// `vocab × d`
    pub head: DMatrix<f64>,
}

fn gaussian(rows: usize, cols: usize, std: f64, seed: u64, tag: u64) -> DMatrix<f64> {
    let mut rng = rng_at(seed, &[tag]);
    DMatrix::from_fn(rows, cols, |_, _| std * rng.sample::<f64, _>(StandardNormal))
}

/// Build a randomly initialised model. Identical seeds give bit-identical
/// weights.
pub fn build_toy_lm(cfg: ToyLmConfig, seed: u64) -> Result<ToyLm> {
    cfg.validate()?;
    let d = cfg.d_model;
    let depth_scale = 1.0 / (2.0 * cfg.num_layers as f64).sqrt();
    let blocks = (0..cfg.num_layers)
        .map(|l| {
            let proj = Projection::ALL
                .iter()
                .map(|&p| {
                    let (o, i) = cfg.proj_shape(p);
                    let mut std = 1.0 / (i as f64).sqrt();
                    if matches!(p, Projection::O | Projection::Down) {
                        std *= depth_scale;
                    }
                    Projector::Frozen(gaussian(o, i, std, seed, 100 + (l * 7 + p.index()) as u64))
                })
                .collect();
            Block { ln1: DVector::from_element(d, 1.0), ln2: DVector::from_element(d, 1.0), proj }
        })
        .collect();
    Ok(ToyLm {
        cfg,
        tok_emb: gaussian(cfg.vocab_size, d, 1.0, seed, 1),
        pos_emb: gaussian(cfg.context_length, d, 0.1, seed, 2),
        blocks,
        ln_f: DVector::from_element(d, 1.0),
        head: gaussian(cfg.vocab_size, d, 1.0 / (d as f64).sqrt(), seed, 3),
    })
}

struct RmsCache {
    xhat: DMatrix<f64>,
    inv_rms: Vec<f64>,
}

fn rms_forward(x: &DMatrix<f64>, g: &DVector<f64>) -> (DMatrix<f64>, RmsCache) {
    let (n, d) = x.shape();
    let mut xhat = x.clone();
    let mut inv_rms = Vec::with_capacity(n);
    for r in 0..n {
        let ms = (0..d).map(|c| x[(r, c)] * x[(r, c)]).sum::<f64>() / d as f64;
        let inv = 1.0 / (ms + RMS_EPS).sqrt();
        for c in 0..d {
            xhat[(r, c)] *= inv;
        }
        inv_rms.push(inv);
    }
    let mut y = xhat.clone();
    for c in 0..d {
        y.column_mut(c).scale_mut(g[c]);
    }
    (y, RmsCache { xhat, inv_rms })
}

fn rms_backward(dy: &DMatrix<f64>, g: &DVector<f64>, cache: &RmsCache, dg: Option<&mut DVector<f64>>) -> DMatrix<f64> {
    let (n, d) = dy.shape();
    if let Some(dg) = dg {
        for c in 0..d {
            dg[c] += dy.column(c).dot(&cache.xhat.column(c));
        }
    }
    let mut dx = DMatrix::zeros(n, d);
    for r in 0..n {
        let mut m = 0.0;
        for c in 0..d {
            m += dy[(r, c)] * g[c] * cache.xhat[(r, c)];
        }
        m /= d as f64;
        for c in 0..d {
            dx[(r, c)] = cache.inv_rms[r] * (dy[(r, c)] * g[c] - cache.xhat[(r, c)] * m);
        }
    }
    dx
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

struct BlockCache {
    n1: RmsCache,
    a1: DMatrix<f64>,
    q: DMatrix<f64>,
    k: DMatrix<f64>,
    v: DMatrix<f64>,
    probs: Vec<DMatrix<f64>>,
    attn: DMatrix<f64>,
    n2: RmsCache,
    a2: DMatrix<f64>,
    g: DMatrix<f64>,
    u: DMatrix<f64>,
    h: DMatrix<f64>,
}

/// Activations retained for the backward pass.
pub struct ForwardCache {
    tokens: Vec<usize>,
    blocks: Vec<BlockCache>,
    nf: RmsCache,
    af: DMatrix<f64>,
}

/// Gradients of the backbone tensors, laid out like the model.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneGrads {
    pub tok_emb: DMatrix<f64>,
    pub pos_emb: DMatrix<f64>,
    pub ln1: Vec<DVector<f64>>,
    pub ln2: Vec<DVector<f64>>,
    pub proj: Vec<Vec<DMatrix<f64>>>,
    pub ln_f: DVector<f64>,
    pub head: DMatrix<f64>,
}

impl BackboneGrads {
    fn zeros(m: &ToyLm) -> Self {
        let z = |x: &DMatrix<f64>| DMatrix::zeros(x.nrows(), x.ncols());
        Self {
            tok_emb: z(&m.tok_emb),
            pos_emb: z(&m.pos_emb),
            ln1: m.blocks.iter().map(|b| DVector::zeros(b.ln1.len())).collect(),
            ln2: m.blocks.iter().map(|b| DVector::zeros(b.ln2.len())).collect(),
            proj: m.blocks.iter().map(|b| b.proj.iter().map(|p| z(p.weight())).collect()).collect(),
            ln_f: DVector::zeros(m.ln_f.len()),
            head: z(&m.head),
        }
    }

    /// Flat views in the order of [`ToyLm::backbone_slices_mut`].
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = vec![self.tok_emb.as_slice(), self.pos_emb.as_slice()];
        for l in 0..self.ln1.len() {
            out.push(self.ln1[l].as_slice());
            out.push(self.ln2[l].as_slice());
            for p in &self.proj[l] {
                out.push(p.as_slice());
            }
        }
        out.push(self.ln_f.as_slice());
        out.push(self.head.as_slice());
        out
    }
}

/// Gradients from one or more backward passes.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub backbone: Option<BackboneGrads>,
    /// Indexed by site index (`layer * 7 + projection`); `None` for frozen sites.
    pub adapters: Vec<Option<Vec<f64>>>,
}

impl Grads {
    pub fn new(model: &ToyLm, with_backbone: bool) -> Self {
        let adapters = model
            .blocks
            .iter()
            .flat_map(|b| b.proj.iter().map(|p| p.adapter().map(|l| vec![0.0; l.transform().num_params()])))
            .collect();
        Self { backbone: with_backbone.then(|| BackboneGrads::zeros(model)), adapters }
    }

    /// Euclidean norm of all adapter gradients.
    pub fn adapter_norm(&self) -> f64 {
        self.adapters.iter().flatten().flat_map(|g| g.iter()).map(|v| v * v).sum::<f64>().sqrt()
    }
}

fn add_into(acc: &mut [f64], g: &[f64]) {
    for (a, b) in acc.iter_mut().zip(g) {
        *a += b;
    }
}

impl ToyLm {
    pub fn num_backbone_params(&self) -> usize {
        self.tok_emb.len()
            + self.pos_emb.len()
            + self.ln_f.len()
            + self.head.len()
            + self
                .blocks
                .iter()
                .map(|b| b.ln1.len() + b.ln2.len() + b.proj.iter().map(|p| p.weight().len()).sum::<usize>())
                .sum::<usize>()
    }

    pub fn num_adapter_params(&self) -> usize {
        self.adapters().iter().map(|(_, l)| l.transform().num_params()).sum()
    }

    pub fn projector(&self, layer: usize, p: Projection) -> &Projector {
        &self.blocks[layer].proj[p.index()]
    }

    pub fn set_projector(&mut self, layer: usize, p: Projection, proj: Projector) -> Result<()> {
        if layer >= self.blocks.len() {
            return Err(CuaError::IndexOutOfRange { index: layer, len: self.blocks.len() });
        }
        let slot = &mut self.blocks[layer].proj[p.index()];
        if slot.weight().shape() != proj.weight().shape() {
            return Err(CuaError::InvalidShape(format!(
                "projector shape {:?} does not match {:?}",
                proj.weight().shape(),
                slot.weight().shape()
            )));
        }
        *slot = proj;
        Ok(())
    }

    /// All adapted sites with their layers, in site-index order.
    pub fn adapters(&self) -> Vec<(AdapterSite, &CuaLayer)> {
        let mut out = Vec::new();
        for (l, b) in self.blocks.iter().enumerate() {
            for p in Projection::ALL {
                if let Some(a) = b.proj[p.index()].adapter() {
                    out.push((AdapterSite::new(l, p, a.mode()), a));
                }
            }
        }
        out
    }

    pub fn adapters_mut(&mut self) -> Vec<(usize, &mut CuaLayer)> {
        let mut out = Vec::new();
        for (l, b) in self.blocks.iter_mut().enumerate() {
            for (pi, pr) in b.proj.iter_mut().enumerate() {
                if let Projector::Adapted(a) = pr {
                    out.push((l * 7 + pi, a));
                }
            }
        }
        out
    }

    /// Remove all adapters, keeping their frozen weights.
    pub fn strip_adapters(&self) -> ToyLm {
        let mut m = self.clone();
        for b in &mut m.blocks {
            for p in &mut b.proj {
                if let Projector::Adapted(a) = p {
                    *p = Projector::Frozen(a.frozen_weight().clone());
                }
            }
        }
        m
    }

    /// Backbone tensors in a fixed order, including the frozen weights held
    /// inside adapters.
    pub fn backbone_tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = vec![self.tok_emb.as_slice(), self.pos_emb.as_slice()];
        for b in &self.blocks {
            out.push(b.ln1.as_slice());
            out.push(b.ln2.as_slice());
            for p in &b.proj {
                out.push(p.weight().as_slice());
            }
        }
        out.push(self.ln_f.as_slice());
        out.push(self.head.as_slice());
        out
    }

    /// Mutable backbone tensors, same order as [`BackboneGrads::slices`].
    /// Fails if any site is adapted, since adapter weights are frozen.
    pub fn backbone_slices_mut(&mut self) -> Result<Vec<&mut [f64]>> {
        if !self.adapters().is_empty() {
            return Err(CuaError::InvalidConfig("backbone training requires a model without adapters".into()));
        }
        let mut out: Vec<&mut [f64]> = vec![self.tok_emb.as_mut_slice(), self.pos_emb.as_mut_slice()];
        for b in &mut self.blocks {
            out.push(b.ln1.as_mut_slice());
            out.push(b.ln2.as_mut_slice());
            for p in &mut b.proj {
                if let Projector::Frozen(w) = p {
                    out.push(w.as_mut_slice());
                }
            }
        }
        out.push(self.ln_f.as_mut_slice());
        out.push(self.head.as_mut_slice());
        Ok(out)
    }

    /// FNV-1a over every backbone tensor.
    pub fn backbone_checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for t in self.backbone_tensors() {
            for v in t {
                for byte in v.to_bits().to_le_bytes() {
                    h ^= byte as u64;
                    h = h.wrapping_mul(0x0000_0100_0000_01B3);
                }
            }
        }
        h
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(CuaError::InvalidShape("empty token sequence".into()));
        }
        if tokens.len() > self.cfg.context_length {
            return Err(CuaError::InvalidShape(format!(
                "sequence length {} exceeds context {}",
                tokens.len(),
                self.cfg.context_length
            )));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= self.cfg.vocab_size) {
            return Err(CuaError::IndexOutOfRange { index: t, len: self.cfg.vocab_size });
        }
        Ok(())
    }

    fn apply_proj(&self, layer: usize, p: Projection, x: &DMatrix<f64>, exec: &AdapterExec, stream: u64) -> Result<DMatrix<f64>> {
        let pr = &self.blocks[layer].proj[p.index()];
        match (pr, exec) {
            (Projector::Frozen(w), _) => Ok(x * w.transpose()),
            (Projector::Adapted(a), AdapterExec::Classical) => Ok(a.forward_rows(x)),
            (Projector::Adapted(a), AdapterExec::Emulated { channel, mode, seed }) => {
                let s = derive_seed(*seed, &[stream, (layer * 7 + p.index()) as u64]);
                let pre = emulated_pre_weight_rows(a, x, channel, *mode, s, 0)?;
                Ok(pre * a.frozen_weight().transpose())
            }
        }
    }

    fn forward_impl(&self, tokens: &[usize], exec: &AdapterExec, stream: u64) -> Result<(DMatrix<f64>, ForwardCache)> {
        self.check_tokens(tokens)?;
        let t_len = tokens.len();
        let d = self.cfg.d_model;
        let nh = self.cfg.num_heads;
        let dh = d / nh;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut x = DMatrix::from_fn(t_len, d, |t, c| self.tok_emb[(tokens[t], c)] + self.pos_emb[(t, c)]);
        let mut caches = Vec::with_capacity(self.blocks.len());
        for (l, b) in self.blocks.iter().enumerate() {
            let (a1, n1) = rms_forward(&x, &b.ln1);
            let q = self.apply_proj(l, Projection::Q, &a1, exec, stream)?;
            let k = self.apply_proj(l, Projection::K, &a1, exec, stream)?;
            let v = self.apply_proj(l, Projection::V, &a1, exec, stream)?;
            let mut attn = DMatrix::zeros(t_len, d);
            let mut probs = Vec::with_capacity(nh);
            for h in 0..nh {
                let qh = q.columns(h * dh, dh);
                let kh = k.columns(h * dh, dh);
                let vh = v.columns(h * dh, dh);
                let mut s = qh * kh.transpose() * scale;
                for i in 0..t_len {
                    let mx = (0..=i).map(|j| s[(i, j)]).fold(f64::NEG_INFINITY, f64::max);
                    let mut z = 0.0;
                    for j in 0..t_len {
                        let e = if j <= i { (s[(i, j)] - mx).exp() } else { 0.0 };
                        s[(i, j)] = e;
                        z += e;
                    }
                    for j in 0..=i {
                        s[(i, j)] /= z;
                    }
                }
                attn.columns_mut(h * dh, dh).copy_from(&(&s * vh));
                probs.push(s);
            }
            let o = self.apply_proj(l, Projection::O, &attn, exec, stream)?;
            x += o;
            let (a2, n2) = rms_forward(&x, &b.ln2);
            let g = self.apply_proj(l, Projection::Gate, &a2, exec, stream)?;
            let u = self.apply_proj(l, Projection::Up, &a2, exec, stream)?;
            let h = g.zip_map(&u, |gv, uv| gv * sigmoid(gv) * uv);
            let down = self.apply_proj(l, Projection::Down, &h, exec, stream)?;
            x += down;
            caches.push(BlockCache { n1, a1, q, k, v, probs, attn, n2, a2, g, u, h });
        }
        let (af, nf) = rms_forward(&x, &self.ln_f);
        let logits = &af * self.head.transpose();
        Ok((logits, ForwardCache { tokens: tokens.to_vec(), blocks: caches, nf, af }))
    }

    /// Logits (`len × vocab`) for one token sequence.
    pub fn logits(&self, tokens: &[usize]) -> Result<DMatrix<f64>> {
        Ok(self.forward_impl(tokens, &AdapterExec::Classical, 0)?.0)
    }

    /// Logits with a chosen adapter execution path. `stream` separates the
    /// sampling streams of different sequences.
    pub fn logits_with(&self, tokens: &[usize], exec: &AdapterExec, stream: u64) -> Result<DMatrix<f64>> {
        Ok(self.forward_impl(tokens, exec, stream)?.0)
    }

    /// One logits matrix per sequence of the batch.
    pub fn forward_batch(&self, batch: &[&[usize]]) -> Result<Vec<DMatrix<f64>>> {
        batch.iter().map(|s| self.logits(s)).collect()
    }

    pub fn forward_cached(&self, tokens: &[usize]) -> Result<(DMatrix<f64>, ForwardCache)> {
        self.forward_impl(tokens, &AdapterExec::Classical, 0)
    }

    fn proj_backward(
        &self,
        layer: usize,
        p: Projection,
        x: &DMatrix<f64>,
        dy: &DMatrix<f64>,
        grads: &mut Grads,
    ) -> Result<DMatrix<f64>> {
        match &self.blocks[layer].proj[p.index()] {
            Projector::Frozen(w) => {
                if let Some(bg) = grads.backbone.as_mut() {
                    bg.proj[layer][p.index()] += dy.transpose() * x;
                }
                Ok(dy * w)
            }
            Projector::Adapted(a) => {
                let (dx, og) = a.backward_rows(x, dy);
                if let Some(acc) = grads.adapters[layer * 7 + p.index()].as_mut() {
                    if !acc.is_empty() {
                        add_into(acc, &a.param_gradient(&og)?);
                    }
                }
                Ok(dx)
            }
        }
    }

    /// Accumulate gradients of a scalar loss given `dL/dlogits`.
    pub fn backward(&self, cache: &ForwardCache, dlogits: &DMatrix<f64>, grads: &mut Grads) -> Result<()> {
        let t_len = cache.tokens.len();
        if dlogits.shape() != (t_len, self.cfg.vocab_size) {
            return Err(CuaError::InvalidShape(format!("dlogits shape {:?}", dlogits.shape())));
        }
        let d = self.cfg.d_model;
        let nh = self.cfg.num_heads;
        let dh = d / nh;
        let scale = 1.0 / (dh as f64).sqrt();
        if let Some(bg) = grads.backbone.as_mut() {
            bg.head += dlogits.transpose() * &cache.af;
        }
        let daf = dlogits * &self.head;
        let mut dx = rms_backward(&daf, &self.ln_f, &cache.nf, grads.backbone.as_mut().map(|g| &mut g.ln_f));
        for (l, b) in self.blocks.iter().enumerate().rev() {
            let c = &cache.blocks[l];
            // feed-forward half
            let dhid = self.proj_backward(l, Projection::Down, &c.h, &dx, grads)?;
            let mut dg = DMatrix::zeros(t_len, c.g.ncols());
            let mut du = DMatrix::zeros(t_len, c.g.ncols());
            for i in 0..c.g.len() {
                let z = c.g[i];
                let s = sigmoid(z);
                du[i] = dhid[i] * z * s;
                dg[i] = dhid[i] * c.u[i] * s * (1.0 + z * (1.0 - s));
            }
            let mut da2 = self.proj_backward(l, Projection::Gate, &c.a2, &dg, grads)?;
            da2 += self.proj_backward(l, Projection::Up, &c.a2, &du, grads)?;
            dx += rms_backward(&da2, &b.ln2, &c.n2, grads.backbone.as_mut().map(|g| &mut g.ln2[l]));
            // attention half
            let dattn = self.proj_backward(l, Projection::O, &c.attn, &dx, grads)?;
            let mut dq = DMatrix::zeros(t_len, d);
            let mut dk = DMatrix::zeros(t_len, d);
            let mut dv = DMatrix::zeros(t_len, d);
            for h in 0..nh {
                let p = &c.probs[h];
                let doh = dattn.columns(h * dh, dh);
                let vh = c.v.columns(h * dh, dh);
                let dp = doh * vh.transpose();
                dv.columns_mut(h * dh, dh).copy_from(&(p.transpose() * doh));
                let mut ds = DMatrix::zeros(t_len, t_len);
                for i in 0..t_len {
                    let row: f64 = (0..=i).map(|j| p[(i, j)] * dp[(i, j)]).sum();
                    for j in 0..=i {
                        ds[(i, j)] = p[(i, j)] * (dp[(i, j)] - row) * scale;
                    }
                }
                dq.columns_mut(h * dh, dh).copy_from(&(&ds * c.k.columns(h * dh, dh)));
                dk.columns_mut(h * dh, dh).copy_from(&(ds.transpose() * c.q.columns(h * dh, dh)));
            }
            let mut da1 = self.proj_backward(l, Projection::Q, &c.a1, &dq, grads)?;
            da1 += self.proj_backward(l, Projection::K, &c.a1, &dk, grads)?;
            da1 += self.proj_backward(l, Projection::V, &c.a1, &dv, grads)?;
            dx += rms_backward(&da1, &b.ln1, &c.n1, grads.backbone.as_mut().map(|g| &mut g.ln1[l]));
        }
        if let Some(bg) = grads.backbone.as_mut() {
            for (t, &tok) in cache.tokens.iter().enumerate() {
                for c in 0..d {
                    bg.tok_emb[(tok, c)] += dx[(t, c)];
                    bg.pos_emb[(t, c)] += dx[(t, c)];
                }
            }
        }
        Ok(())
    }

    /// Mean squared input norm seen by each site over the given sequences,
    /// indexed by site index.
    pub fn site_input_moments(&self, seqs: &[&[usize]]) -> Result<Vec<f64>> {
        let mut acc = vec![0.0; self.blocks.len() * 7];
        let mut count = 0usize;
        for s in seqs {
            let (_, c) = self.forward_cached(s)?;
            count += s.len();
            for (l, bc) in c.blocks.iter().enumerate() {
                let a1 = bc.a1.norm_squared();
                let a2 = bc.a2.norm_squared();
                for p in Projection::ALL {
                    let v = match p {
                        Projection::Q | Projection::K | Projection::V => a1,
                        Projection::O => bc.attn.norm_squared(),
                        Projection::Gate | Projection::Up => a2,
                        Projection::Down => bc.h.norm_squared(),
                    };
                    acc[l * 7 + p.index()] += v;
                }
            }
        }
        Ok(acc.into_iter().map(|v| v / count.max(1) as f64).collect())
    }
}

/// Wrap each site's projection in an identity-initialised adapter of the
/// site's mode. The returned model's forward equals the input model's.
pub fn insert_adapters(model: &ToyLm, sites: &[AdapterSite], block_dim: usize) -> Result<ToyLm> {
    let mut out = model.clone();
    let mut seen = std::collections::BTreeSet::new();
    for s in sites {
        if s.layer >= model.blocks.len() {
            return Err(CuaError::IndexOutOfRange { index: s.layer, len: model.blocks.len() });
        }
        if !seen.insert(s.index()) {
            return Err(CuaError::InvalidConfig(format!("duplicate site {}", s.label())));
        }
        let w = match &out.blocks[s.layer].proj[s.projection.index()] {
            Projector::Frozen(w) => w.clone(),
            Projector::Adapted(_) => {
                return Err(CuaError::InvalidConfig(format!("site {} already adapted", s.label())))
            }
        };
        let layer = CuaLayer::identity(s.mode, block_dim, w)?;
        out.blocks[s.layer].proj[s.projection.index()] = Projector::Adapted(layer);
    }
    Ok(out)
}

/// Every site of a model with the given mode.
pub fn all_sites(num_layers: usize, mode: AdapterMode) -> Vec<AdapterSite> {
    (0..num_layers).flat_map(|l| Projection::ALL.into_iter().map(move |p| AdapterSite::new(l, p, mode))).collect()
}

/// Replace a frozen projection by a sign-constrained layer around a fixed
/// operator (an ablation baseline).
pub fn with_fixed_operator(model: &ToyLm, layer: usize, p: Projection, operator: DMatrix<f64>) -> Result<ToyLm> {
    let mut out = model.clone();
    let w = model.projector(layer, p).weight().clone();
    out.set_projector(layer, p, Projector::Adapted(CuaLayer::ablation(operator, w)?))?;
    Ok(out)
}

/// Replace an adapter's transform parameters (same layout as
/// [`Transform::params`]).
pub fn set_adapter_params(model: &mut ToyLm, site_index: usize, values: &[f64]) -> Result<()> {
    for (i, a) in model.adapters_mut() {
        if i == site_index {
            return a.transform_mut().set_params(values);
        }
    }
    Err(CuaError::InvalidConfig(format!("no adapter at site index {site_index}")))
}

/// Adapter transform at a site, if any.
pub fn adapter_transform(model: &ToyLm, layer: usize, p: Projection) -> Option<&Transform> {
    model.projector(layer, p).adapter().map(|a| a.transform())
}
