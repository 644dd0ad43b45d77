//! Joint loss and its gradient over single examples and batches.

use serde::{Deserialize, Serialize};

use super::config::{EncoderConfig, LossWeights};
use super::loss::{geom_loss_grad, kin_loss_grad, loss_joint};
use super::model::{backward, forward, forward_cached, Example};
use super::params::Params;
use crate::error::{Error, Result};
use crate::exec::Execution;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub joint: f64,
    pub geom: f64,
    pub kin: f64,
}

impl LossBreakdown {
    fn add_scaled(&mut self, o: &LossBreakdown, k: f64) {
        self.joint += k * o.joint;
        self.geom += k * o.geom;
        self.kin += k * o.kin;
    }
}

fn check_finite(l: &LossBreakdown) -> Result<()> {
    if l.joint.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence { step: 0, loss: l.joint })
    }
}

pub fn example_loss(params: &Params, cfg: &EncoderConfig, ex: &Example, w: &LossWeights) -> Result<LossBreakdown> {
    let out = forward(params, cfg, &ex.input, &ex.mask)?;
    let (ids, kin) = ex.targets();
    let (geom, _) = geom_loss_grad(&out.geom_logits, &ids)?;
    let (kin, _) = kin_loss_grad(&out.kin_preds, &kin, w)?;
    Ok(LossBreakdown {
        joint: loss_joint(geom, kin, w.lambda_kin),
        geom,
        kin,
    })
}

pub fn example_loss_and_grad(params: &Params, cfg: &EncoderConfig, ex: &Example, w: &LossWeights) -> Result<(LossBreakdown, Params)> {
    let (out, cache) = forward_cached(params, cfg, &ex.input, &ex.mask)?;
    let (ids, kin) = ex.targets();
    let (geom, d_logits) = geom_loss_grad(&out.geom_logits, &ids)?;
    let (kin, d_preds) = kin_loss_grad(&out.kin_preds, &kin, w)?;
    let loss = LossBreakdown {
        joint: loss_joint(geom, kin, w.lambda_kin),
        geom,
        kin,
    };
    check_finite(&loss)?;
    let grad = backward(params, cfg, &cache, &d_logits, &(d_preds * w.lambda_kin));
    Ok((loss, grad))
}

/// Mean loss over a batch.
pub fn batch_loss(params: &Params, cfg: &EncoderConfig, batch: &[Example], w: &LossWeights, exec: Execution) -> Result<LossBreakdown> {
    if batch.is_empty() {
        return Err(Error::EmptyMask);
    }
    let per = exec.map_slice(batch, |ex| example_loss(params, cfg, ex, w));
    let k = 1.0 / batch.len() as f64;
    let mut total = LossBreakdown::default();
    for l in per {
        total.add_scaled(&l?, k);
    }
    Ok(total)
}

/// Mean loss and gradient over a batch. Per-example gradients are summed in
/// batch order, so the result does not depend on the execution mode.
pub fn batch_loss_and_grad(params: &Params, cfg: &EncoderConfig, batch: &[Example], w: &LossWeights, exec: Execution) -> Result<(LossBreakdown, Params)> {
    if batch.is_empty() {
        return Err(Error::EmptyMask);
    }
    let per = exec.map_slice(batch, |ex| example_loss_and_grad(params, cfg, ex, w));
    let k = 1.0 / batch.len() as f64;
    let mut total = LossBreakdown::default();
    let mut grad = params.zeros_like();
    for r in per {
        let (l, g) = r?;
        total.add_scaled(&l, k);
        grad.add_scaled(&g, k);
    }
    Ok((total, grad))
}
