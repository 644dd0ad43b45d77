//! Multi-head scaled dot-product attention with rotary queries and keys.

use ndarray::{s, Axis};

use super::params::{AttnParams, Mat};
use super::rope::{rotate_heads, RopeTable};

#[derive(Debug, Clone)]
pub struct AttnCache {
    x_q: Mat,
    x_kv: Mat,
    q_rot: Mat,
    k_rot: Mat,
    v: Mat,
    /// Per-head `L_q x L_k` attention weights.
    pub weights: Vec<Mat>,
    concat: Mat,
}

/// Row-wise softmax over valid keys; invalid keys get exactly zero weight.
pub fn masked_softmax(logits: &Mat, key_valid: &[bool]) -> Mat {
    let mut out = Mat::zeros(logits.raw_dim());
    for (row, mut o) in logits.rows().into_iter().zip(out.rows_mut()) {
        let max = row
            .iter()
            .zip(key_valid)
            .filter(|(_, &v)| v)
            .map(|(&x, _)| x)
            .fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for ((o, &x), &valid) in o.iter_mut().zip(row.iter()).zip(key_valid) {
            if valid {
                *o = (x - max).exp();
                sum += *o;
            }
        }
        o.mapv_inplace(|v| v / sum);
    }
    out
}

/// Pre-softmax logits `Q_rot K_rot^T / sqrt(d_head)` for each head.
pub fn attention_logits(p: &AttnParams, x_q: &Mat, x_kv: &Mat, q_table: &RopeTable, k_table: &RopeTable, n_heads: usize) -> Vec<Mat> {
    let mut q = x_q.dot(&p.wq);
    let mut k = x_kv.dot(&p.wk);
    rotate_heads(&mut q, q_table, n_heads, false);
    rotate_heads(&mut k, k_table, n_heads, false);
    let dh = q.ncols() / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    (0..n_heads)
        .map(|h| {
            let cols = s![.., h * dh..(h + 1) * dh];
            q.slice(cols).dot(&k.slice(cols).t()) * scale
        })
        .collect()
}

pub fn attention(
    p: &AttnParams,
    x_q: &Mat,
    x_kv: &Mat,
    q_table: &RopeTable,
    k_table: &RopeTable,
    key_valid: &[bool],
    n_heads: usize,
) -> (Mat, AttnCache) {
    let mut q_rot = x_q.dot(&p.wq);
    let mut k_rot = x_kv.dot(&p.wk);
    let v = x_kv.dot(&p.wv);
    rotate_heads(&mut q_rot, q_table, n_heads, false);
    rotate_heads(&mut k_rot, k_table, n_heads, false);
    let dh = q_rot.ncols() / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut concat = Mat::zeros((x_q.nrows(), q_rot.ncols()));
    let mut weights = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let logits = q_rot.slice(cols).dot(&k_rot.slice(cols).t()) * scale;
        let a = masked_softmax(&logits, key_valid);
        concat.slice_mut(cols).assign(&a.dot(&v.slice(cols)));
        weights.push(a);
    }
    let out = concat.dot(&p.wo);
    (
        out,
        AttnCache {
            x_q: x_q.clone(),
            x_kv: x_kv.clone(),
            q_rot,
            k_rot,
            v,
            weights,
            concat,
        },
    )
}

/// Returns `(d x_q, d x_kv)` and accumulates weight gradients.
pub fn attention_backward(
    dout: &Mat,
    p: &AttnParams,
    c: &AttnCache,
    q_table: &RopeTable,
    k_table: &RopeTable,
    n_heads: usize,
    grad: &mut AttnParams,
) -> (Mat, Mat) {
    grad.wo += &c.concat.t().dot(dout);
    let dconcat = dout.dot(&p.wo.t());
    let dh = c.q_rot.ncols() / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = Mat::zeros(c.q_rot.raw_dim());
    let mut dk = Mat::zeros(c.k_rot.raw_dim());
    let mut dv = Mat::zeros(c.v.raw_dim());
    for (h, a) in c.weights.iter().enumerate() {
        let cols = s![.., h * dh..(h + 1) * dh];
        let d_o = dconcat.slice(cols);
        let da = d_o.dot(&c.v.slice(cols).t());
        dv.slice_mut(cols).assign(&a.t().dot(&d_o));
        // softmax backward: dS = A * (dA - rowsum(dA * A))
        let row_dot = (&da * a).sum_axis(Axis(1)).insert_axis(Axis(1));
        let ds = a * &(&da - &row_dot);
        dq.slice_mut(cols).assign(&(ds.dot(&c.k_rot.slice(cols)) * scale));
        dk.slice_mut(cols).assign(&(ds.t().dot(&c.q_rot.slice(cols)) * scale));
    }
    rotate_heads(&mut dq, q_table, n_heads, true);
    rotate_heads(&mut dk, k_table, n_heads, true);
    grad.wq += &c.x_q.t().dot(&dq);
    grad.wk += &c.x_kv.t().dot(&dk);
    grad.wv += &c.x_kv.t().dot(&dv);
    let dx_q = dq.dot(&p.wq.t());
    let dx_kv = dk.dot(&p.wk.t()) + dv.dot(&p.wv.t());
    (dx_q, dx_kv)
}
