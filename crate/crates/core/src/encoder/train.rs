//! Minimal masked pretraining loop.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::config::{EncoderConfig, LossWeights};
use super::grad::{batch_loss, batch_loss_and_grad, LossBreakdown};
use super::model::{forward, EncoderInput, Example};
use super::optim::{AdamW, AdamWConfig};
use super::params::Params;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::masking::{sample_mask, MaskSpec};
use crate::rng::{item_rng, DOMAIN_BATCH, DOMAIN_EVAL, DOMAIN_MASK};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// Accuracy is measured every `eval_every` steps and after the last one.
    pub eval_every: usize,
    pub seed: u64,
    pub optim: AdamWConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            batch_size: 16,
            eval_every: 200,
            seed: 0,
            optim: AdamWConfig {
                lr: 1e-3,
                ..Default::default()
            },
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::Config("batch_size and eval_every must be positive".into()));
        }
        self.optim.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: usize,
    pub lr: f64,
    #[serde(rename = "J")]
    pub joint: f64,
    #[serde(rename = "L_geom")]
    pub geom: f64,
    #[serde(rename = "L_kin")]
    pub kin: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: Params,
    pub trace: Vec<TraceRecord>,
    pub final_accuracy: f64,
}

/// Attaches a mask drawn from `item_rng(spec.seed, domain, first_index + i)`
/// to every input whose mask budget is non-zero; others are dropped.
pub fn masked_examples(inputs: &[EncoderInput], spec: &MaskSpec, domain: u64, first_index: u64) -> Result<Vec<Example>> {
    let mut out = Vec::with_capacity(inputs.len());
    for (i, x) in inputs.iter().enumerate() {
        if spec.budget(x.len()) == 0 {
            continue;
        }
        let mut rng = item_rng(spec.seed, domain, first_index + i as u64);
        let mask = sample_mask(&x.token_ids, spec, &mut rng)?;
        out.push(Example {
            input: x.clone(),
            mask: mask.positions,
        });
    }
    Ok(out)
}

/// Held-out examples with masks fixed by `spec.seed`.
pub fn eval_examples(inputs: &[EncoderInput], spec: &MaskSpec) -> Result<Vec<Example>> {
    masked_examples(inputs, spec, DOMAIN_EVAL, 0)
}

fn argmax(row: ndarray::ArrayView1<'_, f64>) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

/// Top-1 accuracy of the geometric head over all masked positions.
pub fn masked_accuracy(params: &Params, cfg: &EncoderConfig, examples: &[Example], exec: Execution) -> Result<f64> {
    let per = exec.map_slice(examples, |ex| -> Result<(usize, usize)> {
        let out = forward(params, cfg, &ex.input, &ex.mask)?;
        let hits = out
            .geom_logits
            .rows()
            .into_iter()
            .zip(&ex.mask)
            .filter(|(row, &j)| argmax(*row) == ex.input.token_ids[j] as usize)
            .count();
        Ok((hits, ex.mask.len()))
    });
    let (mut hits, mut total) = (0, 0);
    for r in per {
        let (h, t) = r?;
        hits += h;
        total += t;
    }
    if total == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(hits as f64 / total as f64)
}

/// Accuracy of always predicting the most frequent masked target.
pub fn majority_baseline(examples: &[Example]) -> f64 {
    let mut counts = std::collections::BTreeMap::new();
    let mut total = 0usize;
    for ex in examples {
        for &j in &ex.mask {
            *counts.entry(ex.input.token_ids[j]).or_insert(0usize) += 1;
            total += 1;
        }
    }
    counts.values().copied().max().map_or(0.0, |m| m as f64 / total as f64)
}

/// Runs `tc.steps` AdamW updates from `init`. `on_step` sees the step
/// number (1-based, after the update) and the current parameters.
pub fn train<F>(
    init: Params,
    cfg: &EncoderConfig,
    data: &[EncoderInput],
    eval: &[Example],
    spec: &MaskSpec,
    weights: &LossWeights,
    tc: &TrainConfig,
    exec: Execution,
    mut on_step: F,
) -> Result<TrainOutcome>
where
    F: FnMut(usize, &Params, &TraceRecord) -> Result<()>,
{
    tc.validate()?;
    cfg.validate()?;
    weights.validate()?;
    spec.validate()?;
    let usable: Vec<&EncoderInput> = data.iter().filter(|x| spec.budget(x.len()) > 0).collect();
    if usable.is_empty() {
        return Err(Error::InsufficientData { needed: 1, available: 0 });
    }
    let mut params = init;
    let mut opt = AdamW::new(tc.optim, &params);
    let mut trace = Vec::with_capacity(tc.steps);
    let mut final_accuracy = if eval.is_empty() {
        0.0
    } else {
        masked_accuracy(&params, cfg, eval, exec)?
    };

    for step in 0..tc.steps {
        let mut rng = item_rng(tc.seed, DOMAIN_BATCH, step as u64);
        let picked: Vec<EncoderInput> = (0..tc.batch_size)
            .map(|_| usable[rng.random_range(0..usable.len())].clone())
            .collect();
        let batch = masked_examples(&picked, spec, DOMAIN_MASK, (step * tc.batch_size) as u64)?;
        let (loss, grad): (LossBreakdown, Params) = match batch_loss_and_grad(&params, cfg, &batch, weights, exec) {
            Err(Error::Divergence { loss, .. }) => return Err(Error::Divergence { step, loss }),
            r => r?,
        };
        if !loss.joint.is_finite() {
            return Err(Error::Divergence { step, loss: loss.joint });
        }
        let lr = tc.optim.lr_at(step, tc.steps);
        opt.step(&mut params, &grad, lr);
        if !params.all_finite() {
            return Err(Error::Divergence { step, loss: f64::NAN });
        }
        let done = step + 1;
        let accuracy = if !eval.is_empty() && (done % tc.eval_every == 0 || done == tc.steps) {
            final_accuracy = masked_accuracy(&params, cfg, eval, exec)?;
            Some(final_accuracy)
        } else {
            None
        };
        let rec = TraceRecord {
            step: done,
            lr,
            joint: loss.joint,
            geom: loss.geom,
            kin: loss.kin,
            accuracy,
        };
        on_step(done, &params, &rec)?;
        trace.push(rec);
    }
    Ok(TrainOutcome {
        params,
        trace,
        final_accuracy,
    })
}

/// Mean joint loss on fixed held-out examples.
pub fn eval_loss(params: &Params, cfg: &EncoderConfig, eval: &[Example], weights: &LossWeights, exec: Execution) -> Result<LossBreakdown> {
    batch_loss(params, cfg, eval, weights, exec)
}

/// One JSON object per line.
pub fn trace_to_jsonl(trace: &[TraceRecord]) -> Result<String> {
    let mut s = String::new();
    for r in trace {
        s.push_str(&serde_json::to_string(r)?);
        s.push('\n');
    }
    Ok(s)
}

/// Mean of `values` over consecutive non-overlapping windows of `window`.
pub fn block_means(values: &[f64], window: usize) -> Vec<f64> {
    values
        .chunks_exact(window.max(1))
        .map(|c| c.iter().sum::<f64>() / c.len() as f64)
        .collect()
}
