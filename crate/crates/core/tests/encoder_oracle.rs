//! A plain nested-loop re-implementation of the encoder forward pass and
//! co-masked loss, compared against the library on the toy configuration.

use geotok::encoder::grad::example_loss;
use geotok::encoder::params::{AttnParams, CrossBlockParams, LayerNormParams, Mat, MlpParams, SelfBlockParams};
use geotok::encoder::{forward, EncoderConfig, EncoderInput, Example, LossWeights, Params};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type M = Vec<Vec<f64>>;

fn to_m(a: &Mat) -> M {
    (0..a.nrows()).map(|i| (0..a.ncols()).map(|j| a[[i, j]]).collect()).collect()
}

fn matmul(a: &M, b: &Mat) -> M {
    a.iter()
        .map(|row| {
            (0..b.ncols())
                .map(|j| row.iter().enumerate().map(|(k, &x)| x * b[[k, j]]).sum())
                .collect()
        })
        .collect()
}

fn add(a: &M, b: &M) -> M {
    a.iter().zip(b).map(|(r, s)| r.iter().zip(s).map(|(x, y)| x + y).collect()).collect()
}

fn layer_norm(x: &M, p: &LayerNormParams) -> M {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            row.iter()
                .enumerate()
                .map(|(j, v)| (v - mean) / (var + 1e-5).sqrt() * p.gain[j] + p.bias[j])
                .collect()
        })
        .collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

fn geglu_mlp(x: &M, p: &MlpParams) -> M {
    let gate = matmul(x, &p.w_gate);
    let up = matmul(x, &p.w_up);
    let h: M = gate
        .iter()
        .zip(&up)
        .map(|(g, u)| g.iter().zip(u).map(|(a, b)| gelu(*a) * b).collect())
        .collect();
    matmul(&h, &p.w_down)
}

/// Rotation angle for every (even, odd) pair of a head.
type Angles = Vec<Vec<f64>>;

fn st_angles(coords: &[[f64; 3]], split: [usize; 3], base: f64) -> Angles {
    coords
        .iter()
        .map(|c| {
            let mut a = Vec::new();
            for (axis, &w) in split.iter().enumerate() {
                for i in 0..w / 2 {
                    a.push(c[axis] / base.powf(2.0 * i as f64 / w as f64));
                }
            }
            a
        })
        .collect()
}

fn time_angles(coords: &[[f64; 3]], d_head: usize, base: f64) -> Angles {
    coords
        .iter()
        .map(|c| (0..d_head / 2).map(|i| c[2] / base.powf(2.0 * i as f64 / d_head as f64)).collect())
        .collect()
}

fn rotate(v: &[f64], ang: &[f64]) -> Vec<f64> {
    let mut out = v.to_vec();
    for (p, &a) in ang.iter().enumerate() {
        out[2 * p] = v[2 * p] * a.cos() - v[2 * p + 1] * a.sin();
        out[2 * p + 1] = v[2 * p] * a.sin() + v[2 * p + 1] * a.cos();
    }
    out
}

fn attention(xq: &M, xkv: &M, p: &AttnParams, ang: &Angles, valid: &[bool], heads: usize) -> M {
    let q = matmul(xq, &p.wq);
    let k = matmul(xkv, &p.wk);
    let v = matmul(xkv, &p.wv);
    let d = q[0].len();
    let dh = d / heads;
    let n = xq.len();
    let mut concat = vec![vec![0.0; d]; n];
    for h in 0..heads {
        let r = h * dh..(h + 1) * dh;
        for i in 0..n {
            let qi = rotate(&q[i][r.clone()], &ang[i]);
            let mut w = vec![0.0; xkv.len()];
            let mut logits = vec![f64::NEG_INFINITY; xkv.len()];
            for j in 0..xkv.len() {
                if valid[j] {
                    let kj = rotate(&k[j][r.clone()], &ang[j]);
                    logits[j] = qi.iter().zip(&kj).map(|(a, b)| a * b).sum::<f64>() / (dh as f64).sqrt();
                }
            }
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
            for j in 0..xkv.len() {
                w[j] = (logits[j] - mx).exp() / z;
            }
            for c in 0..dh {
                concat[i][h * dh + c] = (0..xkv.len()).map(|j| w[j] * v[j][h * dh + c]).sum();
            }
        }
    }
    matmul(&concat, &p.wo)
}

fn self_block(x: &M, p: &SelfBlockParams, ang: &Angles, valid: &[bool], heads: usize) -> M {
    let n1 = layer_norm(x, &p.ln_attn);
    let x1 = add(x, &attention(&n1, &n1, &p.attn, ang, valid, heads));
    add(&x1, &geglu_mlp(&layer_norm(&x1, &p.ln_mlp), &p.mlp))
}

fn cross_block(x: &M, ctx: &M, p: &CrossBlockParams, ang: &Angles, valid: &[bool], heads: usize) -> M {
    let nq = layer_norm(x, &p.ln_query);
    let nc = layer_norm(ctx, &p.ln_context);
    let x1 = add(x, &attention(&nq, &nc, &p.attn, ang, valid, heads));
    add(&x1, &geglu_mlp(&layer_norm(&x1, &p.ln_mlp), &p.mlp))
}

/// Returns (logits, kin predictions) at the masked rows.
fn oracle_forward(p: &Params, cfg: &EncoderConfig, input: &EncoderInput, mask: &[usize]) -> (M, M) {
    let n = input.token_ids.len();
    let valid: Vec<bool> = input.token_ids.iter().map(|&t| t != 0).collect();
    let coords: Vec<[f64; 3]> = input
        .offsets
        .iter()
        .map(|o| [o[0] * cfg.coord_scale, o[1] * cfg.coord_scale, o[2]])
        .collect();
    let st = st_angles(&coords, cfg.rope_split, cfg.rope_base);
    let tm = time_angles(&coords, cfg.d_model / cfg.n_heads, cfg.rope_base);

    let mut g: M = (0..n)
        .map(|i| {
            let id = if mask.contains(&i) { 2 } else { input.token_ids[i] as usize };
            (0..cfg.d_model).map(|j| p.cell_emb[[id, j]]).collect()
        })
        .collect();
    let kin_in: M = (0..n)
        .map(|i| if mask.contains(&i) { vec![0.0; 3] } else { input.kin[i].to_vec() })
        .collect();
    let ke = &p.kin_embed;
    let gate = matmul(&kin_in, &ke.w_gate);
    let up = matmul(&kin_in, &ke.w_up);
    let hidden: M = (0..n)
        .map(|i| (0..cfg.kin_hidden).map(|j| gelu(gate[i][j] + ke.b_gate[j]) * (up[i][j] + ke.b_up[j])).collect())
        .collect();
    let mut k: M = matmul(&hidden, &ke.w_down)
        .into_iter()
        .map(|r| r.iter().enumerate().map(|(j, v)| v + ke.b_down[j]).collect())
        .collect();

    let h = cfg.n_heads;
    for (gp, kp) in p.geo.self_blocks.iter().zip(&p.kin.self_blocks) {
        g = self_block(&g, gp, &st, &valid, h);
        k = self_block(&k, kp, &tm, &valid, h);
    }
    for (gf, kf) in p.geo.fusion.iter().zip(&p.kin.fusion) {
        let gt = self_block(&g, &gf.self_block, &st, &valid, h);
        let kt = self_block(&k, &kf.self_block, &tm, &valid, h);
        let g_next = cross_block(&gt, &k, &gf.cross, &st, &valid, h);
        let k_next = cross_block(&kt, &g, &kf.cross, &st, &valid, h);
        g = g_next;
        k = k_next;
    }
    let g = layer_norm(&g, &p.geo.final_ln);
    let k = layer_norm(&k, &p.kin.final_ln);
    let gm: M = mask.iter().map(|&i| g[i].clone()).collect();
    let km: M = mask.iter().map(|&i| k[i].clone()).collect();
    let logits = matmul(&gm, &p.geo_head_w)
        .into_iter()
        .map(|r| r.iter().enumerate().map(|(j, v)| v + p.geo_head_b[j]).collect())
        .collect();
    let preds = matmul(&km, &p.kin_head_w)
        .into_iter()
        .map(|r| r.iter().enumerate().map(|(j, v)| v + p.kin_head_b[j]).collect())
        .collect();
    (logits, preds)
}

fn oracle_loss(logits: &M, preds: &M, ex: &Example, w: &LossWeights) -> f64 {
    let m = ex.mask.len() as f64;
    let mut geom = 0.0;
    let mut kin = 0.0;
    for (r, &pos) in ex.mask.iter().enumerate() {
        let t = ex.input.token_ids[pos] as usize;
        let z: f64 = logits[r].iter().map(|l| l.exp()).sum();
        geom -= (logits[r][t].exp() / z).ln();
        let tk = ex.input.kin[pos];
        kin += w.beta_speed * (preds[r][0] - tk[0]).powi(2);
        kin += w.beta_heading / 2.0 * ((preds[r][1] - tk[1]).powi(2) + (preds[r][2] - tk[2]).powi(2));
    }
    geom / m + w.lambda_kin * kin / m
}

fn toy_example(seed: u64, vocab: usize, len: usize, pads: usize) -> Example {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut token_ids: Vec<u32> = (0..len).map(|_| rng.random_range(3..vocab as u32)).collect();
    let mut kin: Vec<[f64; 3]> = (0..len)
        .map(|_| {
            let a: f64 = rng.random_range(0.0..6.28);
            [rng.random_range(0.0..1.0), a.sin(), a.cos()]
        })
        .collect();
    let mut offsets: Vec<[f64; 3]> = (0..len)
        .map(|i| [rng.random_range(-2e-3..2e-3), rng.random_range(-2e-3..2e-3), 15.0 * i as f64])
        .collect();
    for j in len - pads..len {
        token_ids[j] = 0;
        kin[j] = [0.0; 3];
        offsets[j] = [0.0; 3];
    }
    Example {
        input: EncoderInput { token_ids, kin, offsets },
        mask: vec![1, 2, 3, 7, 11],
    }
}

#[test]
fn library_forward_and_loss_match_oracle() {
    let cfg = EncoderConfig::toy(50);
    let w = LossWeights {
        beta_speed: 1.3,
        beta_heading: 0.7,
        lambda_kin: 0.9,
    };
    for seed in 0..3 {
        let p = Params::init(&cfg, 100 + seed);
        let ex = toy_example(seed, 50, 16, 2);
        let out = forward(&p, &cfg, &ex.input, &ex.mask).unwrap();
        let (logits, preds) = oracle_forward(&p, &cfg, &ex.input, &ex.mask);
        let lib_logits = to_m(&out.geom_logits);
        let lib_preds = to_m(&out.kin_preds);
        for (a, b) in lib_logits.iter().flatten().zip(logits.iter().flatten()) {
            assert!((a - b).abs() <= 1e-9, "logit {a} vs {b}");
        }
        for (a, b) in lib_preds.iter().flatten().zip(preds.iter().flatten()) {
            assert!((a - b).abs() <= 1e-9, "kin {a} vs {b}");
        }
        let lib = example_loss(&p, &cfg, &ex, &w).unwrap();
        let ora = oracle_loss(&logits, &preds, &ex, &w);
        assert!((lib.joint - ora).abs() <= 1e-9, "loss {} vs {ora}", lib.joint);
    }
}
