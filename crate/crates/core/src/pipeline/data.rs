//! Glue between trajectories, vocabularies and encoder inputs.

use crate::encoder::EncoderInput;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::geo::{GpsPoint, Trajectory};
use crate::grid::GridConfig;
use crate::tokenizer::TokenSequence;
use crate::vocab::{build_vocabulary, Vocabulary};

pub fn all_points(trajs: &[Trajectory]) -> Vec<GpsPoint> {
    trajs.iter().flat_map(|t| t.points.iter().copied()).collect()
}

/// Encoder inputs from token sequences, keeping at most `max_len` leading
/// tokens of each.
pub fn encoder_inputs(seqs: &[TokenSequence], v_max: f64, max_len: usize, exec: Execution) -> Result<Vec<EncoderInput>> {
    exec.map_slice(seqs, |s| {
        let mut s = s.clone();
        s.tokens.truncate(max_len);
        EncoderInput::from_sequence(&s, v_max)
    })
    .into_iter()
    .collect()
}

/// Smallest capacity whose vocabulary has at most `target_cells` cells.
/// Cell counts never grow with capacity, so a bisection suffices.
pub fn capacity_for_cells(points: &[GpsPoint], cfg: &GridConfig, target_cells: usize, exec: Execution) -> Result<(u64, Vocabulary)> {
    if points.is_empty() || target_cells == 0 {
        return Err(Error::InsufficientData {
            needed: 1,
            available: points.len().min(target_cells),
        });
    }
    let (mut lo, mut hi) = (1u64, points.len() as u64);
    let mut best = build_vocabulary(points, cfg, hi, exec)?;
    if best.num_cells() > target_cells {
        return Err(Error::Config(format!(
            "even capacity {hi} yields {} cells (> {target_cells}); lower r_min",
            best.num_cells()
        )));
    }
    while lo < hi {
        let mid = lo + (hi - lo) / 2;
        let v = build_vocabulary(points, cfg, mid, exec)?;
        if v.num_cells() <= target_cells {
            hi = mid;
            best = v;
        } else {
            lo = mid + 1;
        }
    }
    Ok((hi, best))
}
