//! Dual-channel encoder forward and backward passes.
//!
//! Per channel: `n_layers - n_fusion` self-attention blocks, then `n_fusion`
//! fusion blocks. A fusion block runs each channel's self block, then a
//! cross block whose context is the *other* channel's state from before
//! this fusion block. The geometric channel rotates by (lat, lon, time);
//! the kinematic channel's self-attention rotates by time only; cross
//! attention uses (lat, lon, time) for both directions.

use ndarray::{Axis, Zip};

use super::attention::{attention, attention_backward, AttnCache};
use super::config::EncoderConfig;
use super::ops::{kin_embed, kin_embed_backward, layer_norm, layer_norm_backward, mlp, mlp_backward, LnCache, MlpCache};
use super::params::{ChannelParams, CrossBlockParams, Mat, Params, SelfBlockParams};
use super::rope::{Coord, RopeLayout, RopeTable};
use crate::error::{Error, Result};
use crate::tokenizer::{kinematic_features, TokenSequence};
use crate::vocab::{MASK_ID, PAD_ID};

/// One trajectory prepared for the encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderInput {
    pub token_ids: Vec<u32>,
    /// `(v / v_max, sin heading, cos heading)` per token.
    pub kin: Vec<[f64; 3]>,
    /// Unscaled `(lat - lat0, lon - lon0, t - t0)` per token.
    pub offsets: Vec<Coord>,
}

impl EncoderInput {
    pub fn from_sequence(seq: &TokenSequence, v_max: f64) -> Result<Self> {
        let first = seq.tokens.first().ok_or(Error::EmptyTrajectory)?;
        let kin = kinematic_features(seq, v_max)?
            .into_iter()
            .map(|k| k.as_array())
            .collect();
        let offsets = seq
            .tokens
            .iter()
            .map(|t| [t.lat - first.lat, t.lon - first.lon, t.t - first.t])
            .collect();
        Ok(EncoderInput {
            token_ids: seq.ids(),
            kin,
            offsets,
        })
    }

    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    /// Appends `extra` PAD tokens.
    pub fn padded(&self, extra: usize) -> Self {
        let mut out = self.clone();
        out.token_ids.extend(std::iter::repeat_n(PAD_ID, extra));
        out.kin.extend(std::iter::repeat_n([0.0; 3], extra));
        out.offsets.extend(std::iter::repeat_n([0.0; 3], extra));
        out
    }

    pub fn key_valid(&self) -> Vec<bool> {
        self.token_ids.iter().map(|&id| id != PAD_ID).collect()
    }

    /// Rotary coordinates: degree offsets times `coord_scale`, seconds as-is.
    pub fn rope_coords(&self, coord_scale: f64) -> Vec<Coord> {
        self.offsets
            .iter()
            .map(|o| [o[0] * coord_scale, o[1] * coord_scale, o[2]])
            .collect()
    }
}

/// An input together with its masked positions.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub input: EncoderInput,
    pub mask: Vec<usize>,
}

impl Example {
    pub fn targets(&self) -> (Vec<u32>, Vec<[f64; 3]>) {
        (
            self.mask.iter().map(|&j| self.input.token_ids[j]).collect(),
            self.mask.iter().map(|&j| self.input.kin[j]).collect(),
        )
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub g_final: Mat,
    pub k_final: Mat,
    /// `|mask| x vocab_size`
    pub geom_logits: Mat,
    /// `|mask| x 3`
    pub kin_preds: Mat,
}

#[derive(Debug, Clone)]
pub struct SelfBlockCache {
    ln_attn: LnCache,
    attn: AttnCache,
    ln_mlp: LnCache,
    mlp: MlpCache,
}

impl SelfBlockCache {
    pub fn attention_weights(&self) -> &[Mat] {
        &self.attn.weights
    }
}

pub fn self_block(x: &Mat, p: &SelfBlockParams, table: &RopeTable, valid: &[bool], n_heads: usize) -> (Mat, SelfBlockCache) {
    let (n1, ln_attn) = layer_norm(x, &p.ln_attn);
    let (a, attn) = attention(&p.attn, &n1, &n1, table, table, valid, n_heads);
    let x1 = x + &a;
    let (n2, ln_mlp) = layer_norm(&x1, &p.ln_mlp);
    let (m, mlp_cache) = mlp(&n2, &p.mlp);
    (
        x1 + m,
        SelfBlockCache {
            ln_attn,
            attn,
            ln_mlp,
            mlp: mlp_cache,
        },
    )
}

fn self_block_backward(dy: &Mat, p: &SelfBlockParams, c: &SelfBlockCache, table: &RopeTable, n_heads: usize, g: &mut SelfBlockParams) -> Mat {
    let dn2 = mlp_backward(dy, &p.mlp, &c.mlp, &mut g.mlp);
    let dx1 = dy + &layer_norm_backward(&dn2, &p.ln_mlp, &c.ln_mlp, &mut g.ln_mlp);
    let (dq, dkv) = attention_backward(&dx1, &p.attn, &c.attn, table, table, n_heads, &mut g.attn);
    let dn1 = dq + dkv;
    &dx1 + &layer_norm_backward(&dn1, &p.ln_attn, &c.ln_attn, &mut g.ln_attn)
}

#[derive(Debug, Clone)]
pub struct CrossBlockCache {
    ln_query: LnCache,
    ln_context: LnCache,
    attn: AttnCache,
    ln_mlp: LnCache,
    mlp: MlpCache,
}

impl CrossBlockCache {
    pub fn attention_weights(&self) -> &[Mat] {
        &self.attn.weights
    }
}

pub fn cross_block(
    x: &Mat,
    context: &Mat,
    p: &CrossBlockParams,
    table: &RopeTable,
    valid: &[bool],
    n_heads: usize,
) -> Result<(Mat, CrossBlockCache)> {
    if x.dim() != context.dim() {
        return Err(Error::Shape(format!(
            "cross attention inputs differ: {:?} vs {:?}",
            x.dim(),
            context.dim()
        )));
    }
    let (nq, ln_query) = layer_norm(x, &p.ln_query);
    let (nc, ln_context) = layer_norm(context, &p.ln_context);
    let (a, attn) = attention(&p.attn, &nq, &nc, table, table, valid, n_heads);
    let x1 = x + &a;
    let (n2, ln_mlp) = layer_norm(&x1, &p.ln_mlp);
    let (m, mlp_cache) = mlp(&n2, &p.mlp);
    Ok((
        x1 + m,
        CrossBlockCache {
            ln_query,
            ln_context,
            attn,
            ln_mlp,
            mlp: mlp_cache,
        },
    ))
}

/// Returns `(d x, d context)`.
fn cross_block_backward(dy: &Mat, p: &CrossBlockParams, c: &CrossBlockCache, table: &RopeTable, n_heads: usize, g: &mut CrossBlockParams) -> (Mat, Mat) {
    let dn2 = mlp_backward(dy, &p.mlp, &c.mlp, &mut g.mlp);
    let dx1 = dy + &layer_norm_backward(&dn2, &p.ln_mlp, &c.ln_mlp, &mut g.ln_mlp);
    let (dq, dkv) = attention_backward(&dx1, &p.attn, &c.attn, table, table, n_heads, &mut g.attn);
    let dx = &dx1 + &layer_norm_backward(&dq, &p.ln_query, &c.ln_query, &mut g.ln_query);
    let dctx = layer_norm_backward(&dkv, &p.ln_context, &c.ln_context, &mut g.ln_context);
    (dx, dctx)
}

struct ChannelTables {
    geo_self: RopeTable,
    kin_self: RopeTable,
    fusion: RopeTable,
}

impl ChannelTables {
    fn new(cfg: &EncoderConfig, coords: &[Coord]) -> Self {
        let st = RopeLayout::spatiotemporal(cfg.rope_split, cfg.rope_base).table(coords);
        let t = RopeLayout::temporal(cfg.d_head(), cfg.rope_base).table(coords);
        ChannelTables {
            geo_self: st.clone(),
            kin_self: t,
            fusion: st,
        }
    }
}

struct FusionCache {
    geo_self: SelfBlockCache,
    kin_self: SelfBlockCache,
    geo_cross: CrossBlockCache,
    kin_cross: CrossBlockCache,
}

pub struct ModelCache {
    token_ids: Vec<u32>,
    mask: Vec<usize>,
    kin_embed: MlpCache,
    geo_blocks: Vec<SelfBlockCache>,
    kin_blocks: Vec<SelfBlockCache>,
    fusion: Vec<FusionCache>,
    geo_final: LnCache,
    kin_final: LnCache,
    g_final: Mat,
    k_final: Mat,
    tables: ChannelTables,
}

impl ModelCache {
    /// Attention weights of every block in forward order: for each channel
    /// the self blocks, then per fusion block (self, cross).
    pub fn attention_weights(&self) -> Vec<(&'static str, &[Mat])> {
        let mut out: Vec<(&'static str, &[Mat])> = Vec::new();
        for c in &self.geo_blocks {
            out.push(("geo.self", c.attention_weights()));
        }
        for c in &self.kin_blocks {
            out.push(("kin.self", c.attention_weights()));
        }
        for f in &self.fusion {
            out.push(("geo.fusion.self", f.geo_self.attention_weights()));
            out.push(("kin.fusion.self", f.kin_self.attention_weights()));
            out.push(("geo.fusion.cross", f.geo_cross.attention_weights()));
            out.push(("kin.fusion.cross", f.kin_cross.attention_weights()));
        }
        out
    }
}

fn validate(cfg: &EncoderConfig, params: &Params, input: &EncoderInput, mask: &[usize]) -> Result<()> {
    let n = input.len();
    if n == 0 {
        return Err(Error::EmptyTrajectory);
    }
    if input.kin.len() != n || input.offsets.len() != n {
        return Err(Error::Shape(format!(
            "ids {n}, kin {}, coords {}",
            input.kin.len(),
            input.offsets.len()
        )));
    }
    if n > cfg.max_seq_len {
        return Err(Error::Shape(format!("length {n} exceeds max_seq_len {}", cfg.max_seq_len)));
    }
    if !params.matches(cfg) {
        return Err(Error::Shape("parameters do not match encoder config".into()));
    }
    if let Some(&id) = input.token_ids.iter().find(|&&id| id as usize >= cfg.vocab_size) {
        return Err(Error::TokenOutOfRange {
            id,
            size: cfg.vocab_size,
        });
    }
    if input.token_ids.iter().all(|&id| id == PAD_ID) {
        return Err(Error::Shape("sequence contains only padding".into()));
    }
    let mut seen = vec![false; n];
    for &j in mask {
        if j >= n || seen[j] || input.token_ids[j] == PAD_ID {
            return Err(Error::Shape(format!("invalid mask position {j}")));
        }
        seen[j] = true;
    }
    Ok(())
}

fn gather_rows(x: &Mat, rows: &[usize]) -> Mat {
    x.select(Axis(0), rows)
}

pub fn forward_cached(params: &Params, cfg: &EncoderConfig, input: &EncoderInput, mask: &[usize]) -> Result<(ForwardOutput, ModelCache)> {
    validate(cfg, params, input, mask)?;
    let n = input.len();
    let h = cfg.n_heads;
    let valid = input.key_valid();
    let coords = input.rope_coords(cfg.coord_scale);
    let tables = ChannelTables::new(cfg, &coords);

    let mut masked = vec![false; n];
    for &j in mask {
        masked[j] = true;
    }
    let ids: Vec<u32> = input
        .token_ids
        .iter()
        .zip(&masked)
        .map(|(&id, &m)| if m { MASK_ID } else { id })
        .collect();
    let mut g = params.cell_emb.select(Axis(0), &ids.iter().map(|&i| i as usize).collect::<Vec<_>>());
    let kin_in = Mat::from_shape_fn((n, 3), |(r, c)| if masked[r] { 0.0 } else { input.kin[r][c] });
    let (mut k, kin_cache) = kin_embed(&kin_in, &params.kin_embed);

    let mut geo_blocks = Vec::with_capacity(cfg.n_self());
    let mut kin_blocks = Vec::with_capacity(cfg.n_self());
    for (gp, kp) in params.geo.self_blocks.iter().zip(&params.kin.self_blocks) {
        let (g2, gc) = self_block(&g, gp, &tables.geo_self, &valid, h);
        let (k2, kc) = self_block(&k, kp, &tables.kin_self, &valid, h);
        g = g2;
        k = k2;
        geo_blocks.push(gc);
        kin_blocks.push(kc);
    }

    let mut fusion = Vec::with_capacity(cfg.n_fusion);
    for (gp, kp) in params.geo.fusion.iter().zip(&params.kin.fusion) {
        let (g_tilde, geo_self) = self_block(&g, &gp.self_block, &tables.geo_self, &valid, h);
        let (k_tilde, kin_self) = self_block(&k, &kp.self_block, &tables.kin_self, &valid, h);
        let (g_next, geo_cross) = cross_block(&g_tilde, &k, &gp.cross, &tables.fusion, &valid, h)?;
        let (k_next, kin_cross) = cross_block(&k_tilde, &g, &kp.cross, &tables.fusion, &valid, h)?;
        g = g_next;
        k = k_next;
        fusion.push(FusionCache {
            geo_self,
            kin_self,
            geo_cross,
            kin_cross,
        });
    }

    let (g_final, geo_final) = layer_norm(&g, &params.geo.final_ln);
    let (k_final, kin_final) = layer_norm(&k, &params.kin.final_ln);
    let geom_logits = gather_rows(&g_final, mask).dot(&params.geo_head_w) + &params.geo_head_b;
    let kin_preds = gather_rows(&k_final, mask).dot(&params.kin_head_w) + &params.kin_head_b;

    let out = ForwardOutput {
        g_final: g_final.clone(),
        k_final: k_final.clone(),
        geom_logits,
        kin_preds,
    };
    let cache = ModelCache {
        token_ids: ids,
        mask: mask.to_vec(),
        kin_embed: kin_cache,
        geo_blocks,
        kin_blocks,
        fusion,
        geo_final,
        kin_final,
        g_final,
        k_final,
        tables,
    };
    Ok((out, cache))
}

pub fn forward(params: &Params, cfg: &EncoderConfig, input: &EncoderInput, mask: &[usize]) -> Result<ForwardOutput> {
    forward_cached(params, cfg, input, mask).map(|(o, _)| o)
}

fn channel_grads(g: &mut ChannelParams) -> (&mut Vec<SelfBlockParams>, &mut Vec<super::params::FusionBlockParams>) {
    (&mut g.self_blocks, &mut g.fusion)
}

/// Gradients of a scalar loss given its derivatives w.r.t. the two head
/// outputs.
pub fn backward(params: &Params, cfg: &EncoderConfig, cache: &ModelCache, d_logits: &Mat, d_preds: &Mat) -> Params {
    let h = cfg.n_heads;
    let mut grad = params.zeros_like();
    let g_m = gather_rows(&cache.g_final, &cache.mask);
    let k_m = gather_rows(&cache.k_final, &cache.mask);
    grad.geo_head_w += &g_m.t().dot(d_logits);
    grad.geo_head_b += &d_logits.sum_axis(Axis(0));
    grad.kin_head_w += &k_m.t().dot(d_preds);
    grad.kin_head_b += &d_preds.sum_axis(Axis(0));

    let mut dg_final = Mat::zeros(cache.g_final.raw_dim());
    let mut dk_final = Mat::zeros(cache.k_final.raw_dim());
    let dg_rows = d_logits.dot(&params.geo_head_w.t());
    let dk_rows = d_preds.dot(&params.kin_head_w.t());
    for (i, &j) in cache.mask.iter().enumerate() {
        dg_final.row_mut(j).assign(&dg_rows.row(i));
        dk_final.row_mut(j).assign(&dk_rows.row(i));
    }
    let mut dg = layer_norm_backward(&dg_final, &params.geo.final_ln, &cache.geo_final, &mut grad.geo.final_ln);
    let mut dk = layer_norm_backward(&dk_final, &params.kin.final_ln, &cache.kin_final, &mut grad.kin.final_ln);

    for (i, fc) in cache.fusion.iter().enumerate().rev() {
        let (gp, kp) = (&params.geo.fusion[i], &params.kin.fusion[i]);
        let (dg_tilde, dk_ctx) = cross_block_backward(&dg, &gp.cross, &fc.geo_cross, &cache.tables.fusion, h, &mut grad.geo.fusion[i].cross);
        let (dk_tilde, dg_ctx) = cross_block_backward(&dk, &kp.cross, &fc.kin_cross, &cache.tables.fusion, h, &mut grad.kin.fusion[i].cross);
        dg = self_block_backward(&dg_tilde, &gp.self_block, &fc.geo_self, &cache.tables.geo_self, h, &mut grad.geo.fusion[i].self_block) + dg_ctx;
        dk = self_block_backward(&dk_tilde, &kp.self_block, &fc.kin_self, &cache.tables.kin_self, h, &mut grad.kin.fusion[i].self_block) + dk_ctx;
    }

    let (geo_self_grads, _) = channel_grads(&mut grad.geo);
    for (i, c) in cache.geo_blocks.iter().enumerate().rev() {
        dg = self_block_backward(&dg, &params.geo.self_blocks[i], c, &cache.tables.geo_self, h, &mut geo_self_grads[i]);
    }
    let (kin_self_grads, _) = channel_grads(&mut grad.kin);
    for (i, c) in cache.kin_blocks.iter().enumerate().rev() {
        dk = self_block_backward(&dk, &params.kin.self_blocks[i], c, &cache.tables.kin_self, h, &mut kin_self_grads[i]);
    }

    for (row, &id) in dg.rows().into_iter().zip(&cache.token_ids) {
        let mut target = grad.cell_emb.row_mut(id as usize);
        Zip::from(&mut target).and(&row).for_each(|t, &d| *t += d);
    }
    kin_embed_backward(&dk, &params.kin_embed, &cache.kin_embed, &mut grad.kin_embed);
    grad
}
