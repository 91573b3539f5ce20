//! Floating-point reference: dequantized weights, exact GELU, softmax and
//! LayerNorm. Differences from the fixed-point oracle come only from
//! activation quantization and the nonlinear approximations.

use super::{argmax, Model, QMatrix};
use crate::error::{Error, Result};
use crate::nonlinear::gelu_reference;

const LN_EPS: f64 = 1e-5;

fn deq(m: &QMatrix, scale: f64) -> Vec<f64> {
    m.data.iter().map(|&v| v as f64 / scale).collect()
}

fn matmul(x: &[f64], rows: usize, w: &[f64], k: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for c in 0..k {
            let xv = x[i * k + c];
            for j in 0..cols {
                out[i * cols + j] += xv * w[c * cols + j];
            }
        }
    }
    out
}

fn layernorm_rows(x: &mut [f64], d: usize, gamma: &[f64], beta: &[f64]) {
    for row in x.chunks_mut(d) {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        for (j, v) in row.iter_mut().enumerate() {
            *v = (*v - mean) * inv * gamma[j] + beta[j];
        }
    }
}

/// Real-valued logits for the position after `tokens`.
pub fn float_logits(model: &Model, tokens: &[u32]) -> Result<Vec<f64>> {
    let cfg = &model.config;
    let m = tokens.len();
    if m == 0 {
        return Err(Error::Empty("prompt"));
    }
    let s = (1u64 << cfg.frac_bits) as f64;
    let (d, hd, f) = (cfg.d_model, cfg.head_dim(), cfg.ffn_dim);
    let deqv = |v: &Vec<i64>| -> Vec<f64> { v.iter().map(|&x| x as f64 / s).collect() };
    let mut x = Vec::with_capacity(m * d);
    for (pos, &t) in tokens.iter().enumerate() {
        x.extend(model.embed(t, pos)?.into_iter().map(|v| v as f64 / s));
    }
    for w in &model.layers {
        let q = matmul(&x, m, &deq(&w.wq, s), d, d);
        let k = matmul(&x, m, &deq(&w.wk, s), d, d);
        let v = matmul(&x, m, &deq(&w.wv, s), d, d);
        let mut attn = vec![0.0; m * d];
        for h in 0..cfg.heads {
            for i in 0..m {
                let scores: Vec<f64> = (0..=i)
                    .map(|r| {
                        (0..hd)
                            .map(|c| q[i * d + h * hd + c] * k[r * d + h * hd + c])
                            .sum::<f64>()
                            / (hd as f64).sqrt()
                    })
                    .collect();
                let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|v| (v - mx).exp()).collect();
                let z: f64 = e.iter().sum();
                for c in 0..hd {
                    attn[i * d + h * hd + c] = (0..=i).map(|r| e[r] / z * v[r * d + h * hd + c]).sum();
                }
            }
        }
        let o = matmul(&attn, m, &deq(&w.wo, s), d, d);
        let mut r: Vec<f64> = x.iter().zip(&o).map(|(a, b)| a + b).collect();
        layernorm_rows(&mut r, d, &deqv(&w.ln1_gamma), &deqv(&w.ln1_beta));
        let b1 = deqv(&w.b1);
        let h1: Vec<f64> = matmul(&r, m, &deq(&w.w1, s), d, f)
            .iter()
            .enumerate()
            .map(|(i, v)| gelu_reference(v + b1[i % f]))
            .collect();
        let b2 = deqv(&w.b2);
        let h2 = matmul(&h1, m, &deq(&w.w2, s), f, d);
        let mut y: Vec<f64> = r
            .iter()
            .zip(&h2)
            .enumerate()
            .map(|(i, (a, b))| a + b + b2[i % d])
            .collect();
        layernorm_rows(&mut y, d, &deqv(&w.ln2_gamma), &deqv(&w.ln2_beta));
        x = y;
    }
    Ok(matmul(&x[(m - 1) * d..], 1, &deq(&model.lm_head, s), d, cfg.vocab))
}

/// Greedy generation on the float reference.
pub fn float_generate(model: &Model, prompt: &[u32], k: usize) -> Result<Vec<u32>> {
    let mut seq = prompt.to_vec();
    let mut out = Vec::with_capacity(k);
    for _ in 0..k {
        let logits = float_logits(model, &seq)?;
        // Compare on a fine integer grid so ties resolve like the fixed-point argmax.
        let scaled: Vec<i64> = logits.iter().map(|v| (v * 1e9).round() as i64).collect();
        let t = argmax(&scaled);
        out.push(t);
        seq.push(t);
    }
    Ok(out)
}
