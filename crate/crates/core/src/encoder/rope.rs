//! Multi-axis rotary position embeddings.
//!
//! A head of width `d_head` is cut into contiguous blocks, each driven by
//! one coordinate axis. Inside a block of width `w`, dimension pair
//! `(2i, 2i+1)` rotates by `coord * base^(-2i / w)`.

use ndarray::{s, ArrayViewMut2};

use super::params::Mat;

/// Coordinate axes carried per token: scaled latitude offset, scaled
/// longitude offset, seconds since the first token.
pub type Coord = [f64; 3];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RopeBlock {
    pub offset: usize,
    pub width: usize,
    pub axis: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RopeLayout {
    pub d_head: usize,
    pub base: f64,
    pub blocks: Vec<RopeBlock>,
}

impl RopeLayout {
    /// Latitude, longitude and time blocks.
    pub fn spatiotemporal(split: [usize; 3], base: f64) -> Self {
        let mut offset = 0;
        let blocks = split
            .iter()
            .enumerate()
            .map(|(axis, &width)| {
                let b = RopeBlock { offset, width, axis };
                offset += width;
                b
            })
            .collect();
        RopeLayout {
            d_head: offset,
            base,
            blocks,
        }
    }

    /// Whole head rotated by time alone.
    pub fn temporal(d_head: usize, base: f64) -> Self {
        RopeLayout {
            d_head,
            base,
            blocks: vec![RopeBlock {
                offset: 0,
                width: d_head,
                axis: 2,
            }],
        }
    }

    /// Per-token cos/sin tables, one column per rotated pair.
    pub fn table(&self, coords: &[Coord]) -> RopeTable {
        let pairs = self.d_head / 2;
        let mut cos = Mat::zeros((coords.len(), pairs));
        let mut sin = Mat::zeros((coords.len(), pairs));
        for (row, c) in coords.iter().enumerate() {
            for b in &self.blocks {
                for i in 0..b.width / 2 {
                    let freq = self.base.powf(-2.0 * i as f64 / b.width as f64);
                    let angle = c[b.axis] * freq;
                    let col = b.offset / 2 + i;
                    cos[[row, col]] = angle.cos();
                    sin[[row, col]] = angle.sin();
                }
            }
        }
        RopeTable { cos, sin }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RopeTable {
    pub cos: Mat,
    pub sin: Mat,
}

impl RopeTable {
    /// Rotates each row of `x` (`L x d_head`) in place. `inverse` applies
    /// the transpose rotation, which is the backward pass.
    pub fn apply(&self, mut x: ArrayViewMut2<'_, f64>, inverse: bool) {
        let sign = if inverse { -1.0 } else { 1.0 };
        for (r, mut row) in x.rows_mut().into_iter().enumerate() {
            for p in 0..self.cos.ncols() {
                let (c, s) = (self.cos[[r, p]], sign * self.sin[[r, p]]);
                let (a, b) = (row[2 * p], row[2 * p + 1]);
                row[2 * p] = a * c - b * s;
                row[2 * p + 1] = a * s + b * c;
            }
        }
    }

    pub fn rotate(&self, x: &Mat) -> Mat {
        let mut y = x.clone();
        self.apply(y.view_mut(), false);
        y
    }
}

/// Rotates the `d_head` slice of every head of an `L x d_model` matrix.
pub fn rotate_heads(x: &mut Mat, table: &RopeTable, n_heads: usize, inverse: bool) {
    let dh = x.ncols() / n_heads;
    for h in 0..n_heads {
        table.apply(x.slice_mut(s![.., h * dh..(h + 1) * dh]), inverse);
    }
}
