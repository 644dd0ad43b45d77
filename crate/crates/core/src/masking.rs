//! Span masking for pretraining.
//!
//! Both strategies draw candidate spans with lengths uniform over
//! `{avg_span - 1, avg_span, avg_span + 1}` and start positions uniform over
//! all placements, until the budget `floor(ratio * L)` is met or
//! `10 * budget` candidates have been drawn. The run-aware strategy rejects
//! a candidate whose two endpoints both sit strictly inside the same run of
//! repeated token ids. Leftover budget is filled from run endpoints first,
//! then from any unmasked position.
//!
//! Positions are 0-based.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::rng::{item_rng, DOMAIN_MASK};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskStrategy {
    RunAware,
    Naive,
}

impl std::str::FromStr for MaskStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "run_aware" => Ok(MaskStrategy::RunAware),
            "naive" => Ok(MaskStrategy::Naive),
            other => Err(Error::Config(format!("unknown mask strategy `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub ratio: f64,
    pub avg_span: usize,
    pub strategy: MaskStrategy,
    pub seed: u64,
}

impl Default for MaskSpec {
    fn default() -> Self {
        MaskSpec {
            ratio: 0.3,
            avg_span: 6,
            strategy: MaskStrategy::RunAware,
            seed: 0,
        }
    }
}

impl MaskSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.ratio > 0.0 && self.ratio < 1.0) {
            return Err(Error::Config(format!("mask ratio {} not in (0,1)", self.ratio)));
        }
        if self.avg_span < 2 {
            return Err(Error::Config("average span must be >= 2".into()));
        }
        Ok(())
    }

    pub fn budget(&self, len: usize) -> usize {
        // tolerance guards products like 0.3 * 110 landing just under an integer
        ((self.ratio * len as f64) + 1e-9).floor() as usize
    }
}

/// Maximal block of equal token ids, inclusive bounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Run {
    pub start: usize,
    pub end: usize,
    pub token_id: u32,
}

impl Run {
    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn strictly_inside(&self, i: usize) -> bool {
        self.start < i && i < self.end
    }
}

pub fn runs(ids: &[u32]) -> Vec<Run> {
    let mut out: Vec<Run> = Vec::new();
    for (i, &id) in ids.iter().enumerate() {
        match out.last_mut() {
            Some(r) if r.token_id == id => r.end = i,
            _ => out.push(Run {
                start: i,
                end: i,
                token_id: id,
            }),
        }
    }
    out
}

/// True when both endpoints of `[s, e]` lie strictly inside one run.
pub fn is_run_interior_span(runs: &[Run], run_of: &[usize], s: usize, e: usize) -> bool {
    let (rs, re) = (run_of[s], run_of[e]);
    rs == re && runs[rs].strictly_inside(s) && runs[rs].strictly_inside(e)
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MaskSet {
    /// Sorted, distinct masked positions.
    pub positions: Vec<usize>,
    /// Accepted candidate spans (inclusive).
    pub spans: Vec<(usize, usize)>,
    pub attempts: usize,
    pub rejections: usize,
    pub filled_from_endpoints: usize,
    pub filled_arbitrary: usize,
}

impl MaskSet {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn contains(&self, pos: usize) -> bool {
        self.positions.binary_search(&pos).is_ok()
    }
}

pub fn sample_mask<R: Rng + ?Sized>(ids: &[u32], spec: &MaskSpec, rng: &mut R) -> Result<MaskSet> {
    spec.validate()?;
    let len = ids.len();
    if len == 0 {
        return Err(Error::EmptyTrajectory);
    }
    let budget = spec.budget(len);
    let runs = runs(ids);
    let mut run_of = vec![0usize; len];
    for (ri, r) in runs.iter().enumerate() {
        run_of[r.start..=r.end].fill(ri);
    }

    let mut masked = vec![false; len];
    let mut count = 0usize;
    let mut out = MaskSet::default();
    let max_attempts = 10 * budget;

    while count < budget && out.attempts < max_attempts {
        out.attempts += 1;
        let sampled = rng.random_range(spec.avg_span - 1..=spec.avg_span + 1);
        let span_len = sampled.min(len).min(budget - count);
        let s = rng.random_range(0..=len - span_len);
        let e = s + span_len - 1;
        if spec.strategy == MaskStrategy::RunAware && is_run_interior_span(&runs, &run_of, s, e) {
            out.rejections += 1;
            continue;
        }
        out.spans.push((s, e));
        for m in &mut masked[s..=e] {
            if !*m {
                *m = true;
                count += 1;
            }
        }
    }

    if count < budget {
        let mut endpoints: Vec<usize> = runs
            .iter()
            .flat_map(|r| [r.start, r.end])
            .filter(|&i| !masked[i])
            .collect();
        endpoints.dedup();
        endpoints.shuffle(rng);
        for i in endpoints.into_iter().take(budget - count) {
            masked[i] = true;
            count += 1;
            out.filled_from_endpoints += 1;
        }
    }
    if count < budget {
        let mut rest: Vec<usize> = (0..len).filter(|&i| !masked[i]).collect();
        rest.shuffle(rng);
        for i in rest.into_iter().take(budget - count) {
            masked[i] = true;
            out.filled_arbitrary += 1;
        }
    }

    out.positions = (0..len).filter(|&i| masked[i]).collect();
    Ok(out)
}

pub fn sample_mask_run_aware<R: Rng + ?Sized>(ids: &[u32], spec: &MaskSpec, rng: &mut R) -> Result<MaskSet> {
    sample_mask(
        ids,
        &MaskSpec {
            strategy: MaskStrategy::RunAware,
            ..*spec
        },
        rng,
    )
}

pub fn sample_mask_naive<R: Rng + ?Sized>(ids: &[u32], spec: &MaskSpec, rng: &mut R) -> Result<MaskSet> {
    sample_mask(
        ids,
        &MaskSpec {
            strategy: MaskStrategy::Naive,
            ..*spec
        },
        rng,
    )
}

/// Mask for item `index` drawn from its own stream of `spec.seed`.
pub fn sample_for_item(ids: &[u32], spec: &MaskSpec, index: u64) -> Result<MaskSet> {
    let mut rng = item_rng(spec.seed, DOMAIN_MASK, index);
    sample_mask(ids, spec, &mut rng)
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MaskStats {
    pub sequences: usize,
    pub budget_met: usize,
    pub total_masked: usize,
    pub total_tokens: usize,
    pub accepted_spans: usize,
    pub interior_span_violations: usize,
    pub rejections: usize,
    pub filled_from_endpoints: usize,
    pub filled_arbitrary: usize,
    /// run length -> number of runs
    pub run_length_histogram: BTreeMap<usize, usize>,
}

impl MaskStats {
    pub fn budget_satisfaction_rate(&self) -> f64 {
        if self.sequences == 0 {
            return 1.0;
        }
        self.budget_met as f64 / self.sequences as f64
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "sequences={}", self.sequences);
        let _ = writeln!(s, "budget_satisfaction_rate={}", self.budget_satisfaction_rate());
        let _ = writeln!(s, "total_tokens={}", self.total_tokens);
        let _ = writeln!(s, "total_masked={}", self.total_masked);
        let _ = writeln!(s, "accepted_spans={}", self.accepted_spans);
        let _ = writeln!(s, "interior_span_violations={}", self.interior_span_violations);
        let _ = writeln!(s, "rejections={}", self.rejections);
        let _ = writeln!(s, "filled_from_endpoints={}", self.filled_from_endpoints);
        let _ = writeln!(s, "filled_arbitrary={}", self.filled_arbitrary);
        for (len, n) in &self.run_length_histogram {
            let _ = writeln!(s, "run_length.{len}={n}");
        }
        s
    }
}

/// Samples one mask per sequence (stream = sequence index) and aggregates.
pub fn mask_stats(seqs: &[Vec<u32>], spec: &MaskSpec, exec: Execution) -> Result<MaskStats> {
    let per_item = exec.map_range(seqs.len(), |i| sample_for_item(&seqs[i], spec, i as u64));
    let mut st = MaskStats::default();
    for (ids, m) in seqs.iter().zip(per_item) {
        let m = m?;
        let rs = runs(ids);
        let mut run_of = vec![0usize; ids.len()];
        for (ri, r) in rs.iter().enumerate() {
            run_of[r.start..=r.end].fill(ri);
            *st.run_length_histogram.entry(r.len()).or_insert(0) += 1;
        }
        st.sequences += 1;
        st.total_tokens += ids.len();
        st.total_masked += m.len();
        if m.len() == spec.budget(ids.len()) {
            st.budget_met += 1;
        }
        st.accepted_spans += m.spans.len();
        st.interior_span_violations += m
            .spans
            .iter()
            .filter(|&&(s, e)| is_run_interior_span(&rs, &run_of, s, e))
            .count();
        st.rejections += m.rejections;
        st.filled_from_endpoints += m.filled_from_endpoints;
        st.filled_arbitrary += m.filled_arbitrary;
    }
    Ok(st)
}
