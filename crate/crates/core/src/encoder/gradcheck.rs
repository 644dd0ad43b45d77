//! Central finite-difference check of the analytic gradient.

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::config::{EncoderConfig, LossWeights};
use super::grad::{batch_loss, batch_loss_and_grad};
use super::model::{EncoderInput, Example};
use super::params::Params;
use crate::error::Result;
use crate::exec::Execution;
use crate::rng::{item_rng, DOMAIN_GRADCHECK};
use crate::masking::{sample_mask, MaskSpec};
use crate::vocab::{MASK_ID, NUM_SPECIAL};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradCheckOptions {
    pub coords_per_tensor: usize,
    pub eps: f64,
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            coords_per_tensor: 20,
            eps: 1e-5,
            tolerance: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckEntry {
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    /// `|analytic - numeric| / max(1, |numeric|)`
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "coords={}\nmax_rel_error={:e}\ntolerance={:e}\npassed={}\n",
            self.entries.len(),
            self.max_rel_error,
            self.tolerance,
            self.passed()
        );
        for e in &self.entries {
            s.push_str(&format!(
                "{}\t{}\t{:.12e}\t{:.12e}\t{:.3e}\n",
                e.tensor, e.index, e.analytic, e.numeric, e.rel_error
            ));
        }
        s
    }
}

/// Random batch of `n` length-`len` examples over the config's vocabulary,
/// each masked with `spec`. Tokens move a few metres and 15 s per step.
pub fn toy_batch(cfg: &EncoderConfig, n: usize, len: usize, spec: &MaskSpec, seed: u64) -> Result<Vec<Example>> {
    (0..n)
        .map(|i| {
            let mut rng = item_rng(seed, DOMAIN_GRADCHECK, 1 + i as u64);
            let token_ids: Vec<u32> = (0..len).map(|_| rng.random_range(NUM_SPECIAL as u32..cfg.vocab_size as u32)).collect();
            let kin = (0..len)
                .map(|_| {
                    let h: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                    [rng.random_range(0.0..1.0), h.sin(), h.cos()]
                })
                .collect();
            let mut pos = [0.0f64; 3];
            let offsets = (0..len)
                .map(|j| {
                    if j > 0 {
                        pos[0] += rng.random_range(-1e-3..1e-3);
                        pos[1] += rng.random_range(-1e-3..1e-3);
                        pos[2] += 15.0;
                    }
                    pos
                })
                .collect();
            let mask = sample_mask(&token_ids, spec, &mut rng)?.positions;
            Ok(Example {
                input: EncoderInput { token_ids, kin, offsets },
                mask,
            })
        })
        .collect()
}

/// Picks coordinates per tensor. Embedding rows are drawn from the rows the
/// batch actually reads, since every other row has an exactly zero gradient.
fn pick_coords(params: &Params, batch: &[Example], opts: &GradCheckOptions) -> Vec<(usize, usize)> {
    let mut rng = item_rng(opts.seed, DOMAIN_GRADCHECK, 0);
    let mut rows: Vec<usize> = batch
        .iter()
        .flat_map(|ex| {
            ex.input
                .token_ids
                .iter()
                .enumerate()
                .map(|(j, &id)| if ex.mask.contains(&j) { MASK_ID } else { id } as usize)
        })
        .collect();
    rows.sort_unstable();
    rows.dedup();
    let d = params.cell_emb.ncols();
    let mut coords = Vec::new();
    for (ti, (name, t)) in params.tensors().into_iter().enumerate() {
        for _ in 0..opts.coords_per_tensor {
            let idx = if name == "cell_emb" {
                rows.choose(&mut rng).copied().unwrap_or(0) * d + rng.random_range(0..d)
            } else {
                rng.random_range(0..t.len())
            };
            coords.push((ti, idx));
        }
    }
    coords
}

fn perturbed(params: &Params, tensor: usize, index: usize, delta: f64) -> Params {
    let mut p = params.clone();
    p.tensors_mut()[tensor].1[index] += delta;
    p
}

pub fn gradcheck(
    params: &Params,
    cfg: &EncoderConfig,
    batch: &[Example],
    w: &LossWeights,
    opts: &GradCheckOptions,
    exec: Execution,
) -> Result<GradCheckReport> {
    let (_, grad) = batch_loss_and_grad(params, cfg, batch, w, Execution::Sequential)?;
    let names: Vec<String> = params.tensors().into_iter().map(|(n, _)| n).collect();
    let grads = grad.tensors();
    let coords = pick_coords(params, batch, opts);
    let numeric = exec.map_slice(&coords, |&(ti, idx)| -> Result<f64> {
        let plus = batch_loss(&perturbed(params, ti, idx, opts.eps), cfg, batch, w, Execution::Sequential)?;
        let minus = batch_loss(&perturbed(params, ti, idx, -opts.eps), cfg, batch, w, Execution::Sequential)?;
        Ok((plus.joint - minus.joint) / (2.0 * opts.eps))
    });
    let mut entries = Vec::with_capacity(coords.len());
    let mut max_rel: f64 = 0.0;
    for (&(ti, idx), num) in coords.iter().zip(numeric) {
        let numeric = num?;
        let analytic = grads[ti].1[idx];
        let rel_error = (analytic - numeric).abs() / numeric.abs().max(1.0);
        max_rel = max_rel.max(rel_error);
        entries.push(GradCheckEntry {
            tensor: names[ti].clone(),
            index: idx,
            analytic,
            numeric,
            rel_error,
        });
    }
    Ok(GradCheckReport {
        entries,
        max_rel_error: max_rel,
        tolerance: opts.tolerance,
    })
}
