use std::sync::Arc;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;
use crate::gradcheck::check_gradients;

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
}

/// Weighted sum with fixed pseudo-random weights; gives every output element
/// a distinct sensitivity.
fn probe(g: &mut Graph<f64>, x: TensorId) -> TensorId {
    let n = g.value(x).numel();
    let w = Tensor::from_fn(g.shape(x).to_vec(), |i| ((i * 7919 % 97) as f64 / 97.0) - 0.4 + 1e-3 * n as f64);
    let w = g.constant(w);
    let p = g.mul(x, w).unwrap();
    g.sum(p)
}

#[test]
fn matmul_identity_and_projector() {
    let mut g = Graph::new();
    let i2 = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let m = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let out = g.matmul(i2, m).unwrap();
    assert_eq!(g.value(out).data(), &[1.0, 2.0, 3.0, 4.0]);

    let p = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 0.0]));
    let m = g.constant(t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]));
    let out = g.matmul(p, m).unwrap();
    assert_eq!(g.value(out).data(), &[5.0, 6.0, 0.0, 0.0]);
}

#[test]
fn matmul_shape_errors() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::zeros(vec![3, 4]));
    let b = g.constant(Tensor::zeros(vec![3, 2]));
    assert!(matches!(g.matmul(a, b), Err(Error::Shape { op: "matmul", .. })));
    let a = g.constant(Tensor::zeros(vec![2, 3, 4]));
    let b = g.constant(Tensor::zeros(vec![5, 4, 2]));
    assert!(g.matmul(a, b).is_err());
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random(&[3, 4], &mut rng);
    let b = random(&[4, 2], &mut rng);
    let r = check_gradients(&[a, b], 1e-5, |g, ids| {
        let y = g.matmul(ids[0], ids[1])?;
        Ok(g.sum(y))
    })
    .unwrap();
    assert!(r.max_rel_err < 1e-6, "{r:?}");
}

#[test]
fn batched_and_broadcast_matmul_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = random(&[2, 3, 3, 4], &mut rng);
    let b = random(&[2, 3, 4, 2], &mut rng);
    let r = check_gradients(&[a.clone(), b], 1e-5, |g, ids| {
        let y = g.matmul(ids[0], ids[1])?;
        Ok(probe(g, y))
    })
    .unwrap();
    assert!(r.max_rel_err < 1e-6, "{r:?}");
    let w = random(&[4, 5], &mut rng);
    let r = check_gradients(&[a, w], 1e-5, |g, ids| {
        let y = g.matmul(ids[0], ids[1])?;
        Ok(probe(g, y))
    })
    .unwrap();
    assert!(r.max_rel_err < 1e-6, "{r:?}");
}

#[test]
fn softmax_examples() {
    let mut g = Graph::new();
    let x = g.constant(t(&[2], &[0.0, 0.0]));
    let y = g.softmax(x, 0).unwrap();
    assert_eq!(g.value(y).data(), &[0.5, 0.5]);

    let x = g.constant(t(&[2], &[2f64.ln(), 0.0]));
    let y = g.softmax(x, 0).unwrap();
    let v = g.value(y).data();
    assert!((v[0] - 2.0 / 3.0).abs() < 1e-15 && (v[1] - 1.0 / 3.0).abs() < 1e-15);

    let x = g.constant(t(&[2], &[1000.0, 0.0]));
    let y = g.softmax(x, 0).unwrap();
    let v = g.value(y).data();
    // shifted computation: exp(0) / (exp(0) + exp(-1000))
    assert!(v.iter().all(|x| x.is_finite()));
    assert!((v[0] - 1.0).abs() < 1e-300_f64.max(f64::EPSILON));
    assert!(v[1] < 1e-300);
}

#[test]
fn softmax_gradient_on_inner_axis() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&[3, 4, 2], &mut rng);
    for axis in 0..3 {
        let r = check_gradients(&[x.clone()], 1e-5, |g, ids| {
            let y = g.softmax(ids[0], axis)?;
            Ok(probe(g, y))
        })
        .unwrap();
        assert!(r.max_rel_err < 1e-6, "axis {axis}: {r:?}");
    }
}

#[test]
fn layer_norm_examples() {
    let mut g = Graph::new();
    let gain = g.constant(t(&[4], &[1.0; 4]));
    let bias = g.constant(t(&[4], &[0.0; 4]));
    let x = g.constant(t(&[1, 4], &[3.5; 4]));
    let y = g.layer_norm(x, gain, bias, 1e-5).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));

    let gain = g.constant(t(&[2], &[1.0; 2]));
    let bias = g.constant(t(&[2], &[0.0; 2]));
    let x = g.constant(t(&[2], &[1.0, 3.0]));
    let y = g.layer_norm(x, gain, bias, 0.0).unwrap();
    assert_eq!(g.value(y).data(), &[-1.0, 1.0]);
}

#[test]
fn layer_norm_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random(&[3, 8], &mut rng);
    let gain = random(&[8], &mut rng);
    let bias = random(&[8], &mut rng);
    let r = check_gradients(&[x, gain, bias], 1e-5, |g, ids| {
        let y = g.layer_norm(ids[0], ids[1], ids[2], LAYER_NORM_EPS)?;
        Ok(probe(g, y))
    })
    .unwrap();
    assert!(r.max_rel_err < 1e-5, "{r:?}");
}

/// Maclaurin series of erf; independent of libm.
fn erf_series(x: f64) -> f64 {
    let mut term = x;
    let mut sum = x;
    for n in 1..200 {
        term *= -x * x / n as f64;
        sum += term / (2 * n + 1) as f64;
    }
    sum * 2.0 / std::f64::consts::PI.sqrt()
}

#[test]
fn gelu_examples() {
    let mut g = Graph::new();
    let x = g.constant(t(&[5], &[0.0, 10.0, -10.0, 1.0, -0.5]));
    let y = g.gelu(x);
    let v = g.value(y).data().to_vec();
    assert_eq!(v[0], 0.0);
    assert!((v[1] - 10.0).abs() < 1e-12);
    assert!(v[2].abs() < 1e-12);
    let oracle = |x: f64| 0.5 * x * (1.0 + erf_series(x / 2f64.sqrt()));
    assert!((v[3] - oracle(1.0)).abs() < 1e-10, "{} vs {}", v[3], oracle(1.0));
    assert!((v[4] - oracle(-0.5)).abs() < 1e-10);
}

#[test]
fn gelu_gradient() {
    let x = t(&[7], &[-3.0, -1.2, -0.3, 0.0, 0.4, 1.1, 2.7]);
    let r = check_gradients(&[x], 1e-5, |g, ids| {
        let y = g.gelu(ids[0]);
        Ok(probe(g, y))
    })
    .unwrap();
    assert!(r.max_rel_err < 1e-6, "{r:?}");
}

#[test]
fn linear_examples_and_gradient() {
    let mut g = Graph::new();
    let x = g.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
    let eye = g.constant(t(&[3, 3], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]));
    let zero_bias = g.constant(Tensor::zeros(vec![3]));
    let y = g.linear(x, eye, Some(zero_bias)).unwrap();
    assert_eq!(g.value(y).data(), g.value(x).data());

    let w0 = g.constant(Tensor::zeros(vec![3, 2]));
    let b = g.constant(t(&[2], &[0.25, -1.5]));
    let y = g.linear(x, w0, Some(b)).unwrap();
    assert_eq!(g.value(y).data(), &[0.25, -1.5, 0.25, -1.5]);

    let bad = g.constant(Tensor::zeros(vec![2, 2]));
    assert!(g.linear(x, bad, None).is_err());

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let xs = random(&[2, 3, 4], &mut rng);
    let w = random(&[4, 5], &mut rng);
    let bias = random(&[5], &mut rng);
    let r = check_gradients(&[xs, w, bias], 1e-5, |g, ids| {
        let y = g.linear(ids[0], ids[1], Some(ids[2]))?;
        Ok(probe(g, y))
    })
    .unwrap();
    assert!(r.max_rel_err < 1e-6, "{r:?}");
}

#[test]
fn backward_examples() {
    let mut g = Graph::new();
    let x = g.param(t(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, 7.0]));
    let s = g.sum(x);
    g.backward(s).unwrap();
    assert!(g.grad(x).unwrap().data().iter().all(|&v| v == 1.0));

    let mut g = Graph::new();
    let x = g.param(t(&[4], &[1.0, -2.0, 3.0, 0.5]));
    let sq = g.mul(x, x).unwrap();
    let s = g.sum(sq);
    let loss = g.scale(s, 0.5);
    g.backward(loss).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), g.value(x).data());

    let y = g.param(t(&[2], &[1.0, 1.0]));
    g.backward(loss).unwrap();
    assert_eq!(g.grad(y).unwrap().data(), &[0.0, 0.0], "unreachable grads are zero");
    assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
}

#[test]
fn elementwise_and_layout_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let a = random(&[2, 3, 4], &mut rng);
    let b = Tensor::from_fn(vec![2, 3, 4], |_| rng.gen_range(0.5..2.0));
    let r = check_gradients(&[a.clone(), b.clone()], 1e-5, |g, ids| {
        let s = g.add(ids[0], ids[1])?;
        let d = g.sub(s, ids[1])?;
        let m = g.mul(d, ids[1])?;
        let q = g.div(m, ids[1])?;
        let q = g.div(q, ids[1])?;
        let q = g.scale(q, 1.7);
        let q = g.offset(q, 0.3);
        let q = g.add_const(q, &Tensor::full(vec![2, 3, 4], -0.1))?;
        let p = g.permute(q, &[2, 0, 1])?;
        let r = g.reshape(p, &[8, 3])?;
        let parts = g.split(r, 0, &[3, 5])?;
        let c = g.concat(&[parts[1], parts[0]], 0)?;
        let c2 = g.concat(&[c, c], 1)?;
        Ok(probe(g, c2))
    })
    .unwrap();
    assert!(r.max_rel_err < 1e-6, "{r:?}");

    let r = check_gradients(&[a], 1e-5, |g, ids| {
        let m = g.mean(ids[0]);
        let s = g.sum(ids[0]);
        let both = g.concat(&[m, s], 0);
        // rank-0 tensors cannot concatenate
        assert!(both.is_err());
        let rm = g.reshape(m, &[1])?;
        let rs = g.reshape(s, &[1])?;
        let c = g.concat(&[rm, rs], 0)?;
        Ok(probe(g, c))
    })
    .unwrap();
    assert!(r.max_rel_err < 1e-6, "{r:?}");
}

#[test]
fn gather_scatter_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a = random(&[5, 3], &mut rng);
    let idx: RowIndex = Arc::from(vec![Some(4), None, Some(0), Some(4), Some(2)]);
    let r = check_gradients(&[a], 1e-5, |g, ids| {
        let y = g.gather_rows(ids[0], idx.clone(), 3)?;
        let z = g.scatter_rows(y, idx.clone(), 3, 6)?;
        Ok(probe(g, z))
    })
    .unwrap();
    assert!(r.max_rel_err < 1e-6, "{r:?}");
}

#[test]
fn grid_sample_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let image = random(&[2, 3, 4, 5], &mut rng);
    // keep coordinates away from integer lattice planes and the border
    let coords = Tensor::from_fn(vec![2, 3, 3], |i| {
        let base = [1.0, 1.5, 2.2][i % 3];
        base + rng.gen_range(0.1..0.4)
    });
    let r = check_gradients(&[image, coords], 1e-5, |g, ids| {
        let y = g.grid_sample(ids[0], ids[1])?;
        Ok(probe(g, y))
    })
    .unwrap();
    assert!(r.max_rel_err < 1e-6, "{r:?}");
}

#[test]
fn grid_sample_identity_and_clamp() {
    let mut g = Graph::new();
    let img = Tensor::from_fn(vec![1, 2, 2, 3], |i| i as f64 * 1.25 - 2.0);
    let img = g.constant(img);
    let mut crd = Vec::new();
    for d in 0..2 {
        for h in 0..2 {
            for w in 0..3 {
                crd.extend([d as f64, h as f64, w as f64]);
            }
        }
    }
    let c = g.constant(t(&[2, 2, 3, 3], &crd));
    let out = g.grid_sample(img, c).unwrap();
    assert_eq!(g.value(out).data(), g.value(img).data());

    let c = g.constant(t(&[1, 3], &[-4.0, 9.0, 1.5]));
    let out = g.grid_sample(img, c).unwrap();
    // clamps to d=0, h=1, w=1.5
    let expected = 0.5 * (g.value(img).data()[4] + g.value(img).data()[5]);
    assert_eq!(g.value(out).data(), &[expected]);
}

#[test]
fn box_sum_matches_direct_summation() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = random(&[2, 4, 5, 3], &mut rng);
    let mut g = Graph::new();
    let id = g.constant(x.clone());
    let y = g.box_sum(id, 1).unwrap();
    let (d, h, w) = (4i64, 5i64, 3i64);
    for b in 0..2i64 {
        for i in 0..d {
            for j in 0..h {
                for k in 0..w {
                    let mut s = 0.0;
                    for a in i - 1..=i + 1 {
                        for bb in j - 1..=j + 1 {
                            for c in k - 1..=k + 1 {
                                if (0..d).contains(&a) && (0..h).contains(&bb) && (0..w).contains(&c) {
                                    s += x.data()[(((b * d + a) * h + bb) * w + c) as usize];
                                }
                            }
                        }
                    }
                    let got = g.value(y).data()[(((b * d + i) * h + j) * w + k) as usize];
                    assert!((got - s).abs() < 1e-12);
                }
            }
        }
    }
    let r = check_gradients(&[x], 1e-5, |g, ids| {
        let y = g.box_sum(ids[0], 2)?;
        Ok(probe(g, y))
    })
    .unwrap();
    assert!(r.max_rel_err < 1e-6, "{r:?}");
}

#[test]
fn backward_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let a = random(&[4, 6], &mut rng);
    let w = random(&[6, 6], &mut rng);
    let run = || {
        let mut g = Graph::new();
        let x = g.param(a.clone());
        let wi = g.param(w.clone());
        let h = g.linear(x, wi, None).unwrap();
        let h = g.gelu(h);
        let s = g.softmax(h, 1).unwrap();
        let l = probe(&mut g, s);
        g.backward(l).unwrap();
        (g.grad(x).unwrap(), g.grad(wi).unwrap())
    };
    let (g1, w1) = run();
    let (g2, w2) = run();
    assert_eq!(g1.data(), g2.data());
    assert_eq!(w1.data(), w2.data());
}

fn shape_strategy() -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(1usize..4, 1..5)
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(data in prop::collection::vec(-10.0f64..10.0, 12)) {
        let mut g = Graph::new();
        let x = g.constant(t(&[3, 4], &data));
        let y = g.softmax(x, 1).unwrap();
        for row in g.value(y).data().chunks(4) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn reshape_and_permute_roundtrip(shape in shape_strategy(), seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&shape, &mut rng);
        let mut perm: Vec<usize> = (0..shape.len()).collect();
        perm.reverse();
        perm.rotate_left(seed as usize % shape.len());
        let mut g = Graph::new();
        let id = g.constant(x.clone());
        let p = g.permute(id, &perm).unwrap();
        let mut inv = vec![0; perm.len()];
        for (i, &q) in perm.iter().enumerate() { inv[q] = i; }
        let back = g.permute(p, &inv).unwrap();
        prop_assert_eq!(g.value(back), &x);
        let flat = g.reshape(id, &[x.numel()]).unwrap();
        let back = g.reshape(flat, &shape).unwrap();
        prop_assert_eq!(g.value(back), &x);
    }

    #[test]
    fn scatter_then_gather_roundtrip(rows in 1usize..10, width in 1usize..4, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&[rows, width], &mut rng);
        // injective index into a larger table
        let mut targets: Vec<usize> = (0..rows + 3).collect();
        for i in (1..targets.len()).rev() {
            let j = rng.gen_range(0..=i);
            targets.swap(i, j);
        }
        let idx: RowIndex = targets[..rows].iter().map(|&r| Some(r)).collect();
        let mut g = Graph::new();
        let id = g.constant(x.clone());
        let s = g.scatter_rows(id, idx.clone(), width, rows + 3).unwrap();
        let back = g.gather_rows(s, idx, width).unwrap();
        prop_assert_eq!(g.value(back).data(), x.data());
    }
}
