//! Trainable tensors of the dual-channel encoder.
//!
//! Every tensor is visited in a fixed order by [`ParamSet::collect`] and
//! [`ParamSet::collect_mut`]; checkpoints, the optimizer and the gradient
//! checker all rely on that order.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::config::EncoderConfig;
use crate::rng::{item_rng, DOMAIN_INIT};

pub type Mat = Array2<f64>;
pub type Vector = Array1<f64>;

pub trait ParamSet {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a [f64])>);
    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut [f64])>);
}

impl ParamSet for Mat {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a [f64])>) {
        out.push((prefix.to_string(), self.as_slice().expect("standard layout")));
    }
    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut [f64])>) {
        out.push((prefix.to_string(), self.as_slice_mut().expect("standard layout")));
    }
}

impl ParamSet for Vector {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a [f64])>) {
        out.push((prefix.to_string(), self.as_slice().expect("standard layout")));
    }
    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut [f64])>) {
        out.push((prefix.to_string(), self.as_slice_mut().expect("standard layout")));
    }
}

impl<T: ParamSet> ParamSet for Vec<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a [f64])>) {
        for (i, t) in self.iter().enumerate() {
            t.collect(&format!("{prefix}[{i}]"), out);
        }
    }
    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut [f64])>) {
        for (i, t) in self.iter_mut().enumerate() {
            t.collect_mut(&format!("{prefix}[{i}]"), out);
        }
    }
}

macro_rules! param_struct {
    ($name:ident { $($field:ident),* $(,)? }) => {
        impl ParamSet for $name {
            fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a [f64])>) {
                $( self.$field.collect(&join(prefix, stringify!($field)), out); )*
            }
            fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut [f64])>) {
                $( self.$field.collect_mut(&join(prefix, stringify!($field)), out); )*
            }
        }
    };
}

fn join(prefix: &str, field: &str) -> String {
    if prefix.is_empty() {
        field.to_string()
    } else {
        format!("{prefix}.{field}")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams {
    pub gain: Vector,
    pub bias: Vector,
}
param_struct!(LayerNormParams { gain, bias });

#[derive(Debug, Clone, PartialEq)]
pub struct AttnParams {
    /// Columns `h*d_head..(h+1)*d_head` hold head `h`.
    pub wq: Mat,
    pub wk: Mat,
    pub wv: Mat,
    pub wo: Mat,
}
param_struct!(AttnParams { wq, wk, wv, wo });

/// `y = (gelu(x W_gate) * (x W_up)) W_down`
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub w_gate: Mat,
    pub w_up: Mat,
    pub w_down: Mat,
}
param_struct!(MlpParams { w_gate, w_up, w_down });

#[derive(Debug, Clone, PartialEq)]
pub struct SelfBlockParams {
    pub ln_attn: LayerNormParams,
    pub attn: AttnParams,
    pub ln_mlp: LayerNormParams,
    pub mlp: MlpParams,
}
param_struct!(SelfBlockParams { ln_attn, attn, ln_mlp, mlp });

#[derive(Debug, Clone, PartialEq)]
pub struct CrossBlockParams {
    pub ln_query: LayerNormParams,
    pub ln_context: LayerNormParams,
    pub attn: AttnParams,
    pub ln_mlp: LayerNormParams,
    pub mlp: MlpParams,
}
param_struct!(CrossBlockParams { ln_query, ln_context, attn, ln_mlp, mlp });

#[derive(Debug, Clone, PartialEq)]
pub struct FusionBlockParams {
    pub self_block: SelfBlockParams,
    pub cross: CrossBlockParams,
}
param_struct!(FusionBlockParams { self_block, cross });

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelParams {
    pub self_blocks: Vec<SelfBlockParams>,
    pub fusion: Vec<FusionBlockParams>,
    pub final_ln: LayerNormParams,
}
param_struct!(ChannelParams { self_blocks, fusion, final_ln });

/// Two-layer GeGLU over the 3-wide kinematic triple, with biases.
#[derive(Debug, Clone, PartialEq)]
pub struct KinEmbedParams {
    pub w_gate: Mat,
    pub b_gate: Vector,
    pub w_up: Mat,
    pub b_up: Vector,
    pub w_down: Mat,
    pub b_down: Vector,
}
param_struct!(KinEmbedParams { w_gate, b_gate, w_up, b_up, w_down, b_down });

#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub cell_emb: Mat,
    pub kin_embed: KinEmbedParams,
    pub geo: ChannelParams,
    pub kin: ChannelParams,
    pub geo_head_w: Mat,
    pub geo_head_b: Vector,
    pub kin_head_w: Mat,
    pub kin_head_b: Vector,
}
param_struct!(Params {
    cell_emb,
    kin_embed,
    geo,
    kin,
    geo_head_w,
    geo_head_b,
    kin_head_w,
    kin_head_b
});

struct Init<R: Rng> {
    rng: R,
}

impl<R: Rng> Init<R> {
    fn normal(&mut self, rows: usize, cols: usize, std: f64) -> Mat {
        let dist = Normal::new(0.0, std).expect("positive std");
        Mat::from_shape_fn((rows, cols), |_| dist.sample(&mut self.rng))
    }

    fn ln(&mut self, d: usize) -> LayerNormParams {
        LayerNormParams {
            gain: Vector::ones(d),
            bias: Vector::zeros(d),
        }
    }

    fn attn(&mut self, d: usize, out_std: f64) -> AttnParams {
        let s = 1.0 / (d as f64).sqrt();
        AttnParams {
            wq: self.normal(d, d, s),
            wk: self.normal(d, d, s),
            wv: self.normal(d, d, s),
            wo: self.normal(d, d, out_std),
        }
    }

    fn mlp(&mut self, d: usize, f: usize, out_std: f64) -> MlpParams {
        let s = 1.0 / (d as f64).sqrt();
        MlpParams {
            w_gate: self.normal(d, f, s),
            w_up: self.normal(d, f, s),
            w_down: self.normal(f, d, out_std),
        }
    }

    fn self_block(&mut self, cfg: &EncoderConfig, out_std: f64) -> SelfBlockParams {
        let d = cfg.d_model;
        SelfBlockParams {
            ln_attn: self.ln(d),
            attn: self.attn(d, out_std),
            ln_mlp: self.ln(d),
            mlp: self.mlp(d, cfg.d_ff, out_std),
        }
    }

    fn channel(&mut self, cfg: &EncoderConfig) -> ChannelParams {
        let d = cfg.d_model;
        let out_std = 1.0 / (d as f64).sqrt() / (2.0 * cfg.n_layers as f64).sqrt();
        let self_blocks = (0..cfg.n_self()).map(|_| self.self_block(cfg, out_std)).collect();
        let fusion = (0..cfg.n_fusion)
            .map(|_| FusionBlockParams {
                self_block: self.self_block(cfg, out_std),
                cross: CrossBlockParams {
                    ln_query: self.ln(d),
                    ln_context: self.ln(d),
                    attn: self.attn(d, out_std),
                    ln_mlp: self.ln(d),
                    mlp: self.mlp(d, cfg.d_ff, out_std),
                },
            })
            .collect();
        ChannelParams {
            self_blocks,
            fusion,
            final_ln: self.ln(d),
        }
    }
}

impl Params {
    /// Seeded random initialization.
    pub fn init(cfg: &EncoderConfig, seed: u64) -> Self {
        let mut init = Init {
            rng: item_rng(seed, DOMAIN_INIT, 0),
        };
        let (d, h, v) = (cfg.d_model, cfg.kin_hidden, cfg.vocab_size);
        let cell_emb = init.normal(v, d, 1.0);
        let kin_embed = KinEmbedParams {
            w_gate: init.normal(3, h, 1.0),
            b_gate: Vector::zeros(h),
            w_up: init.normal(3, h, 1.0),
            b_up: Vector::zeros(h),
            w_down: init.normal(h, d, 1.0 / (h as f64).sqrt()),
            b_down: Vector::zeros(d),
        };
        let geo = init.channel(cfg);
        let kin = init.channel(cfg);
        Params {
            cell_emb,
            kin_embed,
            geo,
            kin,
            geo_head_w: init.normal(d, v, 0.02),
            geo_head_b: Vector::zeros(v),
            kin_head_w: init.normal(d, 3, 0.02),
            kin_head_b: Vector::zeros(3),
        }
    }

    pub fn tensors(&self) -> Vec<(String, &[f64])> {
        let mut out = Vec::new();
        self.collect("", &mut out);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out = Vec::new();
        self.collect_mut("", &mut out);
        out
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, t) in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// `self += scale * other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &Params, scale: f64) {
        for ((_, a), (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += scale * y;
            }
        }
    }

    pub fn scale(&mut self, k: f64) {
        for (_, t) in self.tensors_mut() {
            t.iter_mut().for_each(|x| *x *= k);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.iter().all(|x| x.is_finite()))
    }

    /// Shapes consistent with `cfg`.
    pub fn matches(&self, cfg: &EncoderConfig) -> bool {
        let d = cfg.d_model;
        self.cell_emb.dim() == (cfg.vocab_size, d)
            && self.kin_embed.w_down.dim() == (cfg.kin_hidden, d)
            && self.geo.self_blocks.len() == cfg.n_self()
            && self.kin.self_blocks.len() == cfg.n_self()
            && self.geo.fusion.len() == cfg.n_fusion
            && self.kin.fusion.len() == cfg.n_fusion
            && self.geo_head_w.dim() == (d, cfg.vocab_size)
            && self.geo.self_blocks.iter().all(|b| b.mlp.w_gate.dim() == (d, cfg.d_ff))
    }
}
