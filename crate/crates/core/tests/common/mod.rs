//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xmorpher::attention::AttentionParams;
use xmorpher::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
}

/// `x·W + b` for one token.
fn affine(x: &[f64], w: &Tensor<f64>, b: Option<&Tensor<f64>>) -> Vec<f64> {
    let (cin, cout) = (w.shape()[0], w.shape()[1]);
    (0..cout)
        .map(|j| {
            let mut acc = b.map_or(0.0, |b| b.data()[j]);
            for i in 0..cin {
                acc += x[i] * w.data()[i * cout + j];
            }
            acc
        })
        .collect()
}

fn project(tokens: &[Vec<f64>], l: &xmorpher::params::Linear<Tensor<f64>>) -> Vec<Vec<f64>> {
    tokens.iter().map(|t| affine(t, &l.weight, l.bias.as_ref())).collect()
}

/// Attention of one window: per head, per query, an explicit loop over keys.
/// Returns `(outputs[s][c], weights[h][s][m])`.
pub fn dense_window_attention(
    queries: &[Vec<f64>],
    keys: &[Vec<f64>],
    valid: &[bool],
    p: &AttentionParams<Tensor<f64>>,
) -> (Vec<Vec<f64>>, Vec<Vec<Vec<f64>>>) {
    let c = p.channels();
    let heads = p.heads;
    let dh = c / heads;
    let q = project(queries, &p.query);
    let k = project(keys, &p.key);
    let v = project(keys, &p.value);
    let mut concat = vec![vec![0.0; c]; queries.len()];
    let mut weights = vec![vec![vec![0.0; keys.len()]; queries.len()]; heads];
    for h in 0..heads {
        for (qi, qrow) in q.iter().enumerate() {
            let mut logits = vec![f64::NEG_INFINITY; keys.len()];
            for (ki, krow) in k.iter().enumerate() {
                if !valid[ki] {
                    continue;
                }
                let mut dot = 0.0;
                for e in 0..dh {
                    dot += qrow[h * dh + e] * krow[h * dh + e];
                }
                logits[ki] = dot / (dh as f64).sqrt();
            }
            let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|&l| if l == f64::NEG_INFINITY { 0.0 } else { (l - top).exp() }).collect();
            let z: f64 = exps.iter().sum();
            for ki in 0..keys.len() {
                let w = exps[ki] / z;
                weights[h][qi][ki] = w;
                for e in 0..dh {
                    concat[qi][h * dh + e] += w * v[ki][h * dh + e];
                }
            }
        }
    }
    (project(&concat, &p.proj), weights)
}

/// Standard non-overlapping window self-attention over a `[D, H, W, C]` grid
/// whose extents are multiples of `window`. Windows are found by integer
/// division of voxel coordinates, independent of any partition routine.
pub fn window_self_attention(grid: &Tensor<f64>, window: [usize; 3], p: &AttentionParams<Tensor<f64>>) -> Tensor<f64> {
    let s = grid.shape();
    let (dims, c) = ([s[0], s[1], s[2]], s[3]);
    let at = |d: usize, h: usize, w: usize| -> Vec<f64> {
        let o = ((d * dims[1] + h) * dims[2] + w) * c;
        grid.data()[o..o + c].to_vec()
    };
    let mut out = vec![0.0; grid.numel()];
    for wd in 0..dims[0] / window[0] {
        for wh in 0..dims[1] / window[1] {
            for ww in 0..dims[2] / window[2] {
                let mut coords = Vec::new();
                for d in 0..window[0] {
                    for h in 0..window[1] {
                        for w in 0..window[2] {
                            coords.push([wd * window[0] + d, wh * window[1] + h, ww * window[2] + w]);
                        }
                    }
                }
                let tokens: Vec<Vec<f64>> = coords.iter().map(|x| at(x[0], x[1], x[2])).collect();
                let (res, _) = dense_window_attention(&tokens, &tokens, &vec![true; tokens.len()], p);
                for (x, r) in coords.iter().zip(res) {
                    let o = ((x[0] * dims[1] + x[1]) * dims[2] + x[2]) * c;
                    out[o..o + c].copy_from_slice(&r);
                }
            }
        }
    }
    Tensor::new(s.to_vec(), out).unwrap()
}

/// `Σ x ⊙ r` with a fixed random `r`, so that every output element matters.
pub fn probe(g: &mut xmorpher::Graph64, x: xmorpher::TensorId, seed: u64) -> xmorpher::TensorId {
    let r = random(g.shape(x), &mut rng(seed));
    let r = g.constant(r);
    let y = g.mul(x, r).unwrap();
    g.sum(y)
}
