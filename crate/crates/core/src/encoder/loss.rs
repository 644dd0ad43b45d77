//! Co-masked objectives and their derivatives w.r.t. the head outputs.

use super::config::LossWeights;
use super::params::Mat;
use crate::error::{Error, Result};

/// Mean cross-entropy over masked rows and its gradient w.r.t. the logits.
pub fn geom_loss_grad(logits: &Mat, targets: &[u32]) -> Result<(f64, Mat)> {
    let m = logits.nrows();
    if m == 0 || targets.is_empty() {
        return Err(Error::EmptyMask);
    }
    if targets.len() != m {
        return Err(Error::Shape(format!("{} targets for {m} logit rows", targets.len())));
    }
    let v = logits.ncols();
    let mut grad = Mat::zeros(logits.raw_dim());
    let mut total = 0.0;
    for ((row, mut g), &t) in logits.rows().into_iter().zip(grad.rows_mut()).zip(targets) {
        let t = t as usize;
        if t >= v {
            return Err(Error::TokenOutOfRange { id: t as u32, size: v });
        }
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let sum: f64 = row.iter().map(|&x| (x - max).exp()).sum();
        let log_z = max + sum.ln();
        total += log_z - row[t];
        for (gi, &x) in g.iter_mut().zip(row.iter()) {
            *gi = (x - log_z).exp() / m as f64;
        }
        g[t] -= 1.0 / m as f64;
    }
    Ok((total / m as f64, grad))
}

pub fn loss_geom(logits: &Mat, targets: &[u32]) -> Result<f64> {
    geom_loss_grad(logits, targets).map(|(l, _)| l)
}

/// `beta_speed * MSE(v) + beta_heading/2 * (MSE(sin) + MSE(cos))` and its
/// gradient w.r.t. the `|M| x 3` predictions.
pub fn kin_loss_grad(preds: &Mat, targets: &[[f64; 3]], w: &LossWeights) -> Result<(f64, Mat)> {
    let m = preds.nrows();
    if m == 0 || targets.is_empty() {
        return Err(Error::EmptyMask);
    }
    if targets.len() != m || preds.ncols() != 3 {
        return Err(Error::Shape(format!("kin preds {:?} vs {} targets", preds.dim(), targets.len())));
    }
    let coef = [w.beta_speed, 0.5 * w.beta_heading, 0.5 * w.beta_heading];
    let mut grad = Mat::zeros((m, 3));
    let mut sums = [0.0; 3];
    for (i, t) in targets.iter().enumerate() {
        for c in 0..3 {
            let e = preds[[i, c]] - t[c];
            sums[c] += e * e;
            grad[[i, c]] = coef[c] * 2.0 * e / m as f64;
        }
    }
    let loss = (0..3).map(|c| coef[c] * sums[c] / m as f64).sum();
    Ok((loss, grad))
}

pub fn loss_kin(preds: &Mat, targets: &[[f64; 3]], w: &LossWeights) -> Result<f64> {
    kin_loss_grad(preds, targets, w).map(|(l, _)| l)
}

pub fn loss_joint(geom: f64, kin: f64, lambda_kin: f64) -> f64 {
    geom + lambda_kin * kin
}
