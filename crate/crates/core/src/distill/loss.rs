//! Distillation loss: `α·T²·KL(p_T ‖ p_S) + β·CE(student, labels)`, where
//! `p_T`, `p_S` are temperature-`T` softmaxes of teacher and student logits.
//! KL is averaged over positions, CE over non-ignored labels.

use nalgebra::DMatrix;

use crate::error::{CuaError, Result};

use super::train::TrainConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct KdLoss {
    pub total: f64,
    /// Mean KL before the `α·T²` weighting.
    pub kd_term: f64,
    /// Mean CE before the `β` weighting.
    pub ce_term: f64,
    /// `dL/dstudent_logits`.
    pub grad: DMatrix<f64>,
}

fn log_softmax_row(z: &DMatrix<f64>, r: usize, inv_t: f64, out: &mut [f64]) {
    let v = z.ncols();
    let mx = (0..v).map(|c| z[(r, c)] * inv_t).fold(f64::NEG_INFINITY, f64::max);
    let lse = mx + (0..v).map(|c| (z[(r, c)] * inv_t - mx).exp()).sum::<f64>().ln();
    for c in 0..v {
        out[c] = z[(r, c)] * inv_t - lse;
    }
}

/// Loss and gradient. `teacher` may be omitted when `alpha_kd == 0`.
/// Labels equal to `None` are ignored by the CE term.
pub fn kd_loss_grad(
    student: &DMatrix<f64>,
    teacher: Option<&DMatrix<f64>>,
    labels: &[Option<usize>],
    cfg: &TrainConfig,
) -> Result<KdLoss> {
    let (n, v) = student.shape();
    if labels.len() != n {
        return Err(CuaError::DimensionMismatch { expected: n, got: labels.len() });
    }
    if let Some(t) = teacher {
        if t.shape() != student.shape() {
            return Err(CuaError::InvalidShape(format!("teacher {:?} vs student {:?}", t.shape(), student.shape())));
        }
    } else if cfg.alpha_kd != 0.0 {
        return Err(CuaError::InvalidConfig("KD term needs teacher logits".into()));
    }
    if let Some(&Some(bad)) = labels.iter().find(|l| matches!(l, Some(y) if *y >= v)) {
        return Err(CuaError::IndexOutOfRange { index: bad, len: v });
    }
    let temp = cfg.temperature;
    let n_lab = labels.iter().filter(|l| l.is_some()).count();
    let mut grad = DMatrix::zeros(n, v);
    let mut kl_sum = 0.0;
    let mut ce_sum = 0.0;
    let mut ls = vec![0.0; v];
    let mut lt = vec![0.0; v];
    for r in 0..n {
        if let (Some(t), true) = (teacher, cfg.alpha_kd != 0.0) {
            log_softmax_row(student, r, 1.0 / temp, &mut ls);
            log_softmax_row(t, r, 1.0 / temp, &mut lt);
            let w = cfg.alpha_kd * temp / n as f64;
            for c in 0..v {
                let pt = lt[c].exp();
                kl_sum += pt * (lt[c] - ls[c]);
                grad[(r, c)] += w * (ls[c].exp() - pt);
            }
        }
        if let Some(y) = labels[r] {
            log_softmax_row(student, r, 1.0, &mut ls);
            ce_sum -= ls[y];
            let w = cfg.beta / n_lab as f64;
            for c in 0..v {
                grad[(r, c)] += w * ls[c].exp();
            }
            grad[(r, y)] -= w;
        }
    }
    let kd_term = if n > 0 { kl_sum / n as f64 } else { 0.0 };
    let ce_term = if n_lab > 0 { ce_sum / n_lab as f64 } else { 0.0 };
    let total = cfg.alpha_kd * temp * temp * kd_term + cfg.beta * ce_term;
    Ok(KdLoss { total, kd_term, ce_term, grad })
}

/// Scalar loss only.
pub fn kd_loss(
    student: &DMatrix<f64>,
    teacher: &DMatrix<f64>,
    labels: &[Option<usize>],
    cfg: &TrainConfig,
) -> Result<f64> {
    Ok(kd_loss_grad(student, Some(teacher), labels, cfg)?.total)
}
