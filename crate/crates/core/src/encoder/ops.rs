//! Row-wise building blocks with hand-written backward passes.

use ndarray::{Axis, Zip};

use super::params::{KinEmbedParams, LayerNormParams, Mat, MlpParams, Vector};

pub const LN_EPS: f64 = 1e-5;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximated GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

#[derive(Debug, Clone)]
pub struct LnCache {
    xhat: Mat,
    inv_std: Vector,
}

pub fn layer_norm(x: &Mat, p: &LayerNormParams) -> (Mat, LnCache) {
    let d = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut inv_std = Vector::zeros(x.nrows());
    for (mut row, s) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
        let mean = row.sum() / d;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|v| v * v).sum::<f64>() / d;
        *s = 1.0 / (var + LN_EPS).sqrt();
        let k = *s;
        row.mapv_inplace(|v| v * k);
    }
    let y = &xhat * &p.gain + &p.bias;
    (y, LnCache { xhat, inv_std })
}

pub fn layer_norm_backward(dy: &Mat, p: &LayerNormParams, cache: &LnCache, grad: &mut LayerNormParams) -> Mat {
    grad.gain += &(dy * &cache.xhat).sum_axis(Axis(0));
    grad.bias += &dy.sum_axis(Axis(0));
    let d = dy.ncols() as f64;
    let dxhat = dy * &p.gain;
    let mut dx = Mat::zeros(dy.raw_dim());
    for (((mut out, g), xh), &s) in dx
        .rows_mut()
        .into_iter()
        .zip(dxhat.rows())
        .zip(cache.xhat.rows())
        .zip(cache.inv_std.iter())
    {
        let mean_g = g.sum() / d;
        let mean_gx = g.dot(&xh) / d;
        Zip::from(&mut out)
            .and(&g)
            .and(&xh)
            .for_each(|o, &gi, &xi| *o = s * (gi - mean_g - xi * mean_gx));
    }
    dx
}

#[derive(Debug, Clone)]
pub struct MlpCache {
    x: Mat,
    gate_pre: Mat,
    up: Mat,
    hidden: Mat,
}

fn geglu(gate_pre: &Mat, up: &Mat) -> Mat {
    let mut h = gate_pre.mapv(gelu);
    h *= up;
    h
}

pub fn mlp(x: &Mat, p: &MlpParams) -> (Mat, MlpCache) {
    let gate_pre = x.dot(&p.w_gate);
    let up = x.dot(&p.w_up);
    let hidden = geglu(&gate_pre, &up);
    let y = hidden.dot(&p.w_down);
    (
        y,
        MlpCache {
            x: x.clone(),
            gate_pre,
            up,
            hidden,
        },
    )
}

fn geglu_backward(dh: &Mat, gate_pre: &Mat, up: &Mat) -> (Mat, Mat) {
    let mut d_gate = Mat::zeros(dh.raw_dim());
    let mut d_up = Mat::zeros(dh.raw_dim());
    Zip::from(&mut d_gate)
        .and(&mut d_up)
        .and(dh)
        .and(gate_pre)
        .and(up)
        .for_each(|dg, du, &g, &a, &b| {
            *dg = g * b * gelu_grad(a);
            *du = g * gelu(a);
        });
    (d_gate, d_up)
}

pub fn mlp_backward(dy: &Mat, p: &MlpParams, c: &MlpCache, grad: &mut MlpParams) -> Mat {
    grad.w_down += &c.hidden.t().dot(dy);
    let dh = dy.dot(&p.w_down.t());
    let (d_gate, d_up) = geglu_backward(&dh, &c.gate_pre, &c.up);
    grad.w_gate += &c.x.t().dot(&d_gate);
    grad.w_up += &c.x.t().dot(&d_up);
    d_gate.dot(&p.w_gate.t()) + d_up.dot(&p.w_up.t())
}

/// Kinematic input embedding: two-layer GeGLU with biases on an `L x 3` input.
pub fn kin_embed(x: &Mat, p: &KinEmbedParams) -> (Mat, MlpCache) {
    let gate_pre = x.dot(&p.w_gate) + &p.b_gate;
    let up = x.dot(&p.w_up) + &p.b_up;
    let hidden = geglu(&gate_pre, &up);
    let y = hidden.dot(&p.w_down) + &p.b_down;
    (
        y,
        MlpCache {
            x: x.clone(),
            gate_pre,
            up,
            hidden,
        },
    )
}

pub fn kin_embed_backward(dy: &Mat, p: &KinEmbedParams, c: &MlpCache, grad: &mut KinEmbedParams) -> Mat {
    grad.w_down += &c.hidden.t().dot(dy);
    grad.b_down += &dy.sum_axis(Axis(0));
    let dh = dy.dot(&p.w_down.t());
    let (d_gate, d_up) = geglu_backward(&dh, &c.gate_pre, &c.up);
    grad.w_gate += &c.x.t().dot(&d_gate);
    grad.b_gate += &d_gate.sum_axis(Axis(0));
    grad.w_up += &c.x.t().dot(&d_up);
    grad.b_up += &d_up.sum_axis(Axis(0));
    d_gate.dot(&p.w_gate.t()) + d_up.dot(&p.w_up.t())
}
