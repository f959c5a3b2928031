//! Optimisation and evaluation: Adam with warmup and linear decay, backbone
//! pre-training, adapter distillation, perplexity, SVD compression, and the
//! planted-rotation construction.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::adapter::Projection;
use crate::cayley::{assemble_bdu, SkewBlockParams};
use crate::error::{CuaError, Result};
use crate::rng::rng_at;

use super::corpus::{eval_windows, sample_windows};
use super::loss::kd_loss_grad;
use super::model::{AdapterExec, Grads, Projector, ToyLm};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub alpha_kd: f64,
    pub beta: f64,
    pub temperature: f64,
    /// Peak learning rate, reached after warmup and decayed linearly.
    pub learning_rate: f64,
    pub warmup_steps: usize,
    /// Passes over the training bytes; ignored when `max_steps` is set.
    pub epochs: usize,
    pub max_steps: Option<usize>,
    pub batch_size: usize,
    pub seed: u64,
    /// Window of the smoothed-loss trend check.
    pub monotone_window: usize,
    /// Relative rise allowed between consecutive smoothed-loss windows.
    pub monotone_tolerance: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha_kd: 0.1,
            beta: 2.0,
            temperature: 1.5,
            learning_rate: 1e-4,
            warmup_steps: 10,
            epochs: 1,
            max_steps: None,
            batch_size: 8,
            seed: 0,
            monotone_window: 50,
            monotone_tolerance: 0.05,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let finite = [self.alpha_kd, self.beta, self.temperature, self.learning_rate, self.monotone_tolerance];
        if finite.iter().any(|v| !v.is_finite()) {
            return Err(CuaError::NonFinite("training hyper-parameter"));
        }
        if self.alpha_kd < 0.0 || self.beta < 0.0 {
            return Err(CuaError::InvalidConfig("alpha_kd and beta must be non-negative".into()));
        }
        if self.temperature <= 0.0 {
            return Err(CuaError::InvalidConfig("temperature must be positive".into()));
        }
        if self.learning_rate <= 0.0 || self.batch_size == 0 {
            return Err(CuaError::InvalidConfig("learning_rate and batch_size must be positive".into()));
        }
        Ok(())
    }

    pub fn total_steps(&self, train_len: usize, context: usize) -> usize {
        self.max_steps.unwrap_or_else(|| self.epochs * (train_len / (self.batch_size * (context + 1))).max(1))
    }

    /// Learning rate at 0-based `step` of a `total`-step run.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        if step < self.warmup_steps {
            return self.learning_rate * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = total.saturating_sub(self.warmup_steps).max(1) as f64;
        self.learning_rate * (total.saturating_sub(step) as f64 / span).clamp(0.0, 1.0)
    }
}

/// Adam over one flat parameter vector.
#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    pub fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = Self::B1 * self.m[i] + (1.0 - Self::B1) * grad[i];
            self.v[i] = Self::B2 * self.v[i] + (1.0 - Self::B2) * grad[i] * grad[i];
            params[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + Self::EPS);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub loss: f64,
    pub kd_term: f64,
    pub ce_term: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainReport {
    pub history: Vec<StepMetrics>,
}

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,loss,kd_term,ce_term,lr\n");
        for m in &self.history {
            s.push_str(&format!("{},{},{},{},{}\n", m.step, m.loss, m.kd_term, m.ce_term, m.lr));
        }
        s
    }

    /// Means over consecutive non-overlapping windows.
    pub fn smoothed(&self, window: usize) -> Vec<f64> {
        self.history.chunks_exact(window.max(1)).map(|c| c.iter().map(|m| m.loss).sum::<f64>() / c.len() as f64).collect()
    }
}

fn split_window(w: &[u8]) -> (Vec<usize>, Vec<Option<usize>>) {
    let tokens = w[..w.len() - 1].iter().map(|&b| b as usize).collect();
    let labels = w[1..].iter().map(|&b| Some(b as usize)).collect();
    (tokens, labels)
}

/// Summed loss terms of one batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchLoss {
    pub total: f64,
    pub kd_term: f64,
    pub ce_term: f64,
}

/// Loss and gradients of `student` on a batch of byte windows. Each window
/// of length `L` supplies `L-1` inputs and their next-byte labels.
pub fn batch_loss_grads(
    student: &ToyLm,
    teacher: Option<&ToyLm>,
    windows: &[&[u8]],
    cfg: &TrainConfig,
    with_backbone: bool,
) -> Result<(BatchLoss, Grads)> {
    let v = student.cfg.vocab_size;
    let mut caches = Vec::with_capacity(windows.len());
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    let mut teacher_rows = Vec::new();
    for w in windows {
        if w.len() < 2 {
            return Err(CuaError::InvalidShape("training window shorter than 2 bytes".into()));
        }
        let (tokens, lab) = split_window(w);
        let (logits, cache) = student.forward_cached(&tokens)?;
        if let Some(t) = teacher {
            teacher_rows.push(t.logits(&tokens)?);
        }
        rows.push(logits);
        labels.extend(lab);
        caches.push(cache);
    }
    let stack = |ms: &[DMatrix<f64>]| {
        let n: usize = ms.iter().map(|m| m.nrows()).sum();
        let mut out = DMatrix::zeros(n, v);
        let mut off = 0;
        for m in ms {
            out.rows_mut(off, m.nrows()).copy_from(m);
            off += m.nrows();
        }
        out
    };
    let s = stack(&rows);
    let t = teacher.map(|_| stack(&teacher_rows));
    let loss = kd_loss_grad(&s, t.as_ref(), &labels, cfg)?;
    let mut grads = Grads::new(student, with_backbone);
    let mut off = 0;
    for (cache, r) in caches.iter().zip(&rows) {
        let g = loss.grad.rows(off, r.nrows()).into_owned();
        student.backward(cache, &g, &mut grads)?;
        off += r.nrows();
    }
    Ok((BatchLoss { total: loss.total, kd_term: loss.kd_term, ce_term: loss.ce_term }, grads))
}

struct TrendGuard {
    window: usize,
    tol: f64,
    acc: f64,
    n: usize,
    prev: Option<f64>,
}

impl TrendGuard {
    fn push(&mut self, step: usize, loss: f64) -> Result<()> {
        if !loss.is_finite() {
            return Err(CuaError::Diverged { step, reason: format!("loss is {loss}") });
        }
        if self.window == 0 {
            return Ok(());
        }
        self.acc += loss;
        self.n += 1;
        if self.n == self.window {
            let mean = self.acc / self.n as f64;
            if let Some(p) = self.prev {
                if mean > p * (1.0 + self.tol) {
                    return Err(CuaError::Diverged {
                        step,
                        reason: format!("smoothed loss rose from {p:.6} to {mean:.6}"),
                    });
                }
            }
            self.prev = Some(mean);
            self.acc = 0.0;
            self.n = 0;
        }
        Ok(())
    }
}

/// Train every backbone tensor with the CE term only (`alpha_kd` must be 0).
/// Used to produce teachers.
pub fn pretrain(model: &mut ToyLm, corpus: &[u8], cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    if cfg.alpha_kd != 0.0 {
        return Err(CuaError::InvalidConfig("pretraining has no teacher; set alpha_kd = 0".into()));
    }
    let ctx = model.cfg.context_length;
    let total = cfg.total_steps(corpus.len(), ctx);
    let n_params: usize = model.backbone_slices_mut()?.iter().map(|s| s.len()).sum();
    let mut adam = Adam::new(n_params);
    let mut rng = rng_at(cfg.seed, &[0x9e7a]);
    let mut guard = TrendGuard { window: 0, tol: 0.0, acc: 0.0, n: 0, prev: None };
    let mut report = TrainReport::default();
    let mut flat_p = vec![0.0; n_params];
    let mut flat_g = vec![0.0; n_params];
    for step in 0..total {
        let windows = sample_windows(corpus, ctx + 1, cfg.batch_size, &mut rng);
        let (loss, grads) = batch_loss_grads(model, None, &windows, cfg, true)?;
        guard.push(step, loss.total)?;
        let bg = grads.backbone.expect("backbone gradients requested");
        let mut off = 0;
        for g in bg.slices() {
            flat_g[off..off + g.len()].copy_from_slice(g);
            off += g.len();
        }
        let lr = cfg.lr_at(step, total);
        let mut slices = model.backbone_slices_mut()?;
        let mut off = 0;
        for s in slices.iter() {
            flat_p[off..off + s.len()].copy_from_slice(s);
            off += s.len();
        }
        adam.step(&mut flat_p, &flat_g, lr);
        let mut off = 0;
        for s in slices.iter_mut() {
            let n = s.len();
            s.copy_from_slice(&flat_p[off..off + n]);
            off += n;
        }
        report.history.push(StepMetrics { step, loss: loss.total, kd_term: loss.kd_term, ce_term: loss.ce_term, lr });
    }
    Ok(report)
}

fn adapter_param_vec(model: &ToyLm) -> Vec<f64> {
    model.adapters().iter().flat_map(|(_, a)| a.transform().params()).collect()
}

/// Distil the student's adapter parameters against the teacher. Backbone
/// tensors are never written; their checksum is verified at the end.
pub fn train_adapters(student: &mut ToyLm, teacher: &ToyLm, corpus: &[u8], cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    if student.cfg.vocab_size != teacher.cfg.vocab_size || student.cfg.context_length != teacher.cfg.context_length {
        return Err(CuaError::InvalidConfig("teacher and student must share vocabulary and context".into()));
    }
    if student.num_adapter_params() == 0 {
        return Err(CuaError::InvalidConfig("student has no trainable adapters".into()));
    }
    let checksum = student.backbone_checksum();
    let ctx = student.cfg.context_length;
    let total = cfg.total_steps(corpus.len(), ctx);
    let mut params = adapter_param_vec(student);
    let mut adam = Adam::new(params.len());
    let mut rng = rng_at(cfg.seed, &[0xada9]);
    let mut guard =
        TrendGuard { window: cfg.monotone_window, tol: cfg.monotone_tolerance, acc: 0.0, n: 0, prev: None };
    let mut report = TrainReport::default();
    for step in 0..total {
        let windows = sample_windows(corpus, ctx + 1, cfg.batch_size, &mut rng);
        let (loss, grads) = batch_loss_grads(student, Some(teacher), &windows, cfg, false)?;
        guard.push(step, loss.total)?;
        let flat_g: Vec<f64> = grads.adapters.iter().flatten().flat_map(|g| g.iter().copied()).collect();
        let lr = cfg.lr_at(step, total);
        adam.step(&mut params, &flat_g, lr);
        let mut off = 0;
        for (_, a) in student.adapters_mut() {
            let n = a.transform().num_params();
            a.transform_mut().set_params(&params[off..off + n])?;
            off += n;
        }
        report.history.push(StepMetrics { step, loss: loss.total, kd_term: loss.kd_term, ce_term: loss.ce_term, lr });
    }
    if student.backbone_checksum() != checksum {
        return Err(CuaError::Diverged { step: total, reason: "frozen backbone checksum changed".into() });
    }
    Ok(report)
}

/// `exp` of the mean next-byte NLL over up to `max_windows` non-overlapping
/// windows of `context + 1` bytes.
pub fn perplexity(model: &ToyLm, data: &[u8], max_windows: usize) -> Result<f64> {
    perplexity_with(model, data, max_windows, &AdapterExec::Classical)
}

pub fn perplexity_with(model: &ToyLm, data: &[u8], max_windows: usize, exec: &AdapterExec) -> Result<f64> {
    if data.len() < 2 {
        return Err(CuaError::InvalidConfig("perplexity needs at least two bytes".into()));
    }
    let mut windows = eval_windows(data, model.cfg.context_length + 1, max_windows.max(1));
    if windows.is_empty() {
        windows.push(&data[..data.len().min(model.cfg.context_length + 1)]);
    }
    let mut nll = 0.0;
    let mut count = 0usize;
    for (i, w) in windows.iter().enumerate() {
        let (tokens, labels) = split_window(w);
        let logits = model.logits_with(&tokens, exec, i as u64)?;
        for (r, y) in labels.iter().enumerate() {
            let y = y.expect("labels from bytes are always present");
            let row = logits.row(r);
            let mx = row.max();
            let lse = mx + row.iter().map(|z| (z - mx).exp()).sum::<f64>().ln();
            nll += lse - logits[(r, y)];
            count += 1;
        }
    }
    Ok((nll / count as f64).exp())
}

/// Best rank-`r` approximation of `w` (Eckart–Young).
pub fn truncated_svd(w: &DMatrix<f64>, rank: usize) -> DMatrix<f64> {
    let svd = w.clone().svd(true, true);
    let u = svd.u.expect("requested U");
    let vt = svd.v_t.expect("requested V^T");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]).then(a.cmp(&b)));
    let mut out = DMatrix::zeros(w.nrows(), w.ncols());
    for &k in order.iter().take(rank) {
        out += svd.singular_values[k] * u.column(k) * vt.row(k);
    }
    out
}

/// Replace every projection by its rank-`⌈fraction·min(dims)⌉` truncation.
pub fn compress_svd(model: &ToyLm, rank_fraction: f64) -> Result<ToyLm> {
    if !(rank_fraction > 0.0 && rank_fraction < 1.0) {
        return Err(CuaError::InvalidConfig(format!("rank_fraction {rank_fraction} outside (0, 1)")));
    }
    if !model.adapters().is_empty() {
        return Err(CuaError::InvalidConfig("compress the backbone before inserting adapters".into()));
    }
    let mut out = model.clone();
    for b in &mut out.blocks {
        for p in &mut b.proj {
            let w = p.weight();
            let r = (rank_fraction * w.nrows().min(w.ncols()) as f64).ceil() as usize;
            *p = Projector::Frozen(truncated_svd(w, r.max(1)));
        }
    }
    Ok(out)
}

/// Student whose weights at `sites` become `W·R` for random block rotations
/// `R = cayley(K)`, `K` drawn with entry scale `scale`. Returns the student
/// and each site's generator, so `cayley(-K)` undoes the rotation.
pub fn plant_rotation(
    model: &ToyLm,
    sites: &[(usize, Projection)],
    block_dim: usize,
    scale: f64,
    seed: u64,
) -> Result<(ToyLm, Vec<SkewBlockParams>)> {
    let mut out = model.clone();
    let mut gens = Vec::with_capacity(sites.len());
    for (i, &(l, p)) in sites.iter().enumerate() {
        let w = model.projector(l, p).weight().clone();
        let d_in = w.ncols();
        if block_dim == 0 || !d_in.is_multiple_of(block_dim) {
            return Err(CuaError::InvalidShape(format!("{d_in} not divisible by {block_dim}")));
        }
        let mut rng = rng_at(seed, &[i as u64]);
        let k = SkewBlockParams::random(block_dim, d_in / block_dim, scale, &mut rng)?;
        let r = assemble_bdu(&k)?.to_dense();
        out.set_projector(l, p, Projector::Frozen(w * r))?;
        gens.push(k);
    }
    Ok((out, gens))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distill::model::{build_toy_lm, ToyLmConfig};

    fn tiny() -> ToyLmConfig {
        ToyLmConfig { num_layers: 1, d_model: 16, num_heads: 2, vocab_size: 256, context_length: 16 }
    }

    #[test]
    fn schedule_warms_up_then_decays() {
        let c = TrainConfig { learning_rate: 1.0, warmup_steps: 4, ..Default::default() };
        assert_eq!(c.lr_at(0, 20), 0.25);
        assert_eq!(c.lr_at(3, 20), 1.0);
        assert_eq!(c.lr_at(4, 20), 1.0);
        assert!(c.lr_at(12, 20) < c.lr_at(8, 20));
        assert!(c.lr_at(19, 20) > 0.0);
    }

    #[test]
    fn uniform_model_has_vocab_perplexity() {
        let mut m = build_toy_lm(tiny(), 0).unwrap();
        m.head.fill(0.0);
        let data: Vec<u8> = (0..200u32).map(|i| (i * 37 % 251) as u8).collect();
        let ppl = perplexity(&m, &data, 100).unwrap();
        assert!((ppl - 256.0).abs() < 1e-9);
        assert!(perplexity(&m, &[1], 10).is_err());
    }

    #[test]
    fn memorised_snippet_reaches_perplexity_near_one() {
        let mut m = build_toy_lm(tiny(), 1).unwrap();
        let data: Vec<u8> = b"abcdefghijklmnop".iter().copied().cycle().take(400).collect();
        let cfg = TrainConfig {
            alpha_kd: 0.0,
            beta: 1.0,
            learning_rate: 1e-2,
            warmup_steps: 5,
            max_steps: Some(150),
            ..Default::default()
        };
        let before = perplexity(&m, &data, 20).unwrap();
        pretrain(&mut m, &data, &cfg).unwrap();
        let after = perplexity(&m, &data, 20).unwrap();
        assert!(before > 50.0, "{before}");
        assert!(after < 1.1, "{after}");
    }

    #[test]
    fn full_rank_compression_is_lossless() {
        let m = build_toy_lm(tiny(), 2).unwrap();
        let c = compress_svd(&m, 0.999).unwrap();
        for (a, b) in m.blocks.iter().zip(&c.blocks) {
            for (pa, pb) in a.proj.iter().zip(&b.proj) {
                assert!((pa.weight() - pb.weight()).abs().max() < 1e-6);
            }
        }
        assert!(compress_svd(&m, 1.0).is_err());
        assert!(compress_svd(&m, 0.0).is_err());
    }

    #[test]
    fn truncation_rank_is_exact() {
        let w = DMatrix::from_fn(6, 4, |r, c| ((r * 3 + c * 5) % 7) as f64 - 3.0);
        let t = truncated_svd(&w, 2);
        let s = t.svd(false, false).singular_values;
        assert_eq!(s.iter().filter(|&&v| v > 1e-9).count(), 2);
    }

    #[test]
    fn trend_guard_aborts_on_rise_and_nan() {
        let mut g = TrendGuard { window: 2, tol: 0.01, acc: 0.0, n: 0, prev: None };
        g.push(0, 2.0).unwrap();
        g.push(1, 2.0).unwrap();
        g.push(2, 1.9).unwrap();
        g.push(3, 1.9).unwrap();
        g.push(4, 2.5).unwrap();
        assert!(matches!(g.push(5, 2.5), Err(CuaError::Diverged { step: 5, .. })));
        assert!(g.push(6, f64::NAN).is_err());
    }
}
