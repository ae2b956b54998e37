//! Straight-line f64 re-implementation of the decoder, used as a reference.

use graft_core::model::{Model, ModelConfig};

/// One flattened f64 copy per parameter, in checkpoint order.
pub fn params_f64(model: &Model) -> Vec<Vec<f64>> {
    model
        .params()
        .iter()
        .map(|(_, t)| t.data().iter().map(|&v| v as f64).collect())
        .collect()
}

fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a[i * k + p] * b[p * n + j];
            }
            out[i * n + j] = s;
        }
    }
    out
}

fn rms_norm(x: &[f64], gain: &[f64], eps: f64) -> Vec<f64> {
    let d = gain.len();
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(d) {
        let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
        let r = 1.0 / (ms + eps).sqrt();
        out.extend(row.iter().zip(gain).map(|(v, g)| v * g * r));
    }
    out
}

fn rope(x: &mut [f64], t: usize, n_heads: usize, d: usize, base: f64) {
    let dh = d / n_heads;
    let half = dh / 2;
    for pos in 0..t {
        for h in 0..n_heads {
            for i in 0..half {
                let angle = pos as f64 * base.powf(-2.0 * i as f64 / dh as f64);
                let (s, c) = angle.sin_cos();
                let (ia, ib) = (pos * d + h * dh + i, pos * d + h * dh + i + half);
                let (a, b) = (x[ia], x[ib]);
                x[ia] = a * c - b * s;
                x[ib] = a * s + b * c;
            }
        }
    }
}

fn attention(q: &[f64], k: &[f64], v: &[f64], t: usize, n_heads: usize, d: usize) -> Vec<f64> {
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; t * d];
    for h in 0..n_heads {
        for i in 0..t {
            let scores: Vec<f64> = (0..=i)
                .map(|j| (0..dh).map(|c| q[i * d + h * dh + c] * k[j * d + h * dh + c]).sum::<f64>() * scale)
                .collect();
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in 0..dh {
                out[i * d + h * dh + c] = (0..=i).map(|j| e[j] / z * v[j * d + h * dh + c]).sum();
            }
        }
    }
    out
}

/// One block over a single sequence `x[t × d]`; `p` holds the block's
/// tensors in checkpoint order.
pub fn block(cfg: &ModelConfig, p: &[Vec<f64>], x: &[f64], t: usize) -> Vec<f64> {
    let (d, f) = (cfg.d_model, cfg.d_ff);
    let eps = cfg.rms_eps;
    let (w_q, w_k, w_v, w_o, w_1, w_2, w_3, attn_norm, ffn_norm) =
        (&p[0], &p[1], &p[2], &p[3], &p[4], &p[5], &p[6], &p[7], &p[8]);
    let h = rms_norm(x, attn_norm, eps);
    let mut q = matmul(&h, w_q, t, d, d);
    let mut k = matmul(&h, w_k, t, d, d);
    let v = matmul(&h, w_v, t, d, d);
    rope(&mut q, t, cfg.n_heads, d, cfg.rope_base);
    rope(&mut k, t, cfg.n_heads, d, cfg.rope_base);
    let a = matmul(&attention(&q, &k, &v, t, cfg.n_heads, d), w_o, t, d, d);
    let x1: Vec<f64> = x.iter().zip(&a).map(|(x, a)| x + a).collect();
    let u = rms_norm(&x1, ffn_norm, eps);
    let gate = matmul(&u, w_1, t, d, f);
    let up = matmul(&u, w_2, t, d, f);
    let hidden: Vec<f64> = gate.iter().zip(&up).map(|(g, u)| g / (1.0 + (-g).exp()) * u).collect();
    let mut ffn = matmul(&hidden, w_3, t, f, d);
    if cfg.post_ffn_norm {
        ffn = rms_norm(&ffn, &p[9], eps);
    }
    x1.iter().zip(&ffn).map(|(x, y)| x + y).collect()
}

/// Mean next-token cross-entropy over sequences of `seq_len` tokens.
pub fn loss(cfg: &ModelConfig, p: &[Vec<f64>], tokens: &[usize], targets: &[usize], seq_len: usize) -> f64 {
    let (d, vocab) = (cfg.d_model, cfg.vocab_size);
    let per_block = if cfg.post_ffn_norm { 10 } else { 9 };
    let n = p.len();
    let mut total = 0.0;
    for (seq, tgt) in tokens.chunks(seq_len).zip(targets.chunks(seq_len)) {
        let mut x: Vec<f64> = seq.iter().flat_map(|&id| p[0][id * d..(id + 1) * d].to_vec()).collect();
        for b in 0..cfg.n_layers {
            x = block(cfg, &p[1 + b * per_block..1 + (b + 1) * per_block], &x, seq_len);
        }
        let h = rms_norm(&x, &p[n - 2], cfg.rms_eps);
        let logits = matmul(&h, &p[n - 1], seq_len, d, vocab);
        for (row, &y) in logits.chunks(vocab).zip(tgt) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
            total += lse - row[y];
        }
    }
    total / tokens.len() as f64
}
