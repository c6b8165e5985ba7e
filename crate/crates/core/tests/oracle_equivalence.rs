mod common;

use common::{dense_window_attention, random, rng, window_self_attention};
use rand::Rng;
use xmorpher::attention::{cat_block, w_mca, AttentionParams};
use xmorpher::windowing::{window_merge, window_partition, WindowConfig, WindowLayout, WindowSet};
use xmorpher::Graph64;

fn rows(t: &xmorpher::Tensor<f64>, win: usize) -> Vec<Vec<f64>> {
    let s = t.shape();
    let (m, c) = (s[1], s[2]);
    (0..m).map(|r| t.data()[(win * m + r) * c..(win * m + r + 1) * c].to_vec()).collect()
}

#[test]
fn batched_wmca_matches_dense_loops_on_random_instances() {
    let mut r = rng(2024);
    let mut worst: f64 = 0.0;
    for case in 0..120 {
        let n = r.gen_range(1..4);
        let s = r.gen_range(1..6);
        let m = r.gen_range(1..9);
        let heads = r.gen_range(1..4);
        let c = heads * r.gen_range(1..4);
        let p = AttentionParams::<xmorpher::Tensor<f64>>::init(c, heads, &mut r).unwrap();
        let base = random(&[n, s, c], &mut r);
        let search = random(&[n, m, c], &mut r);
        let mut valid: Vec<bool> = (0..n * m).map(|_| r.gen_bool(0.7)).collect();
        for w in 0..n {
            valid[w * m + r.gen_range(0..m)] = true;
        }
        let mut g = Graph64::new();
        let pb = p.bind(&mut g);
        let b = g.constant(base.clone());
        let k = g.constant(search.clone());
        let out = w_mca(&mut g, b, k, &valid, &pb).unwrap();
        let (o, wts) = (g.value(out.output), g.value(out.weights));
        for win in 0..n {
            let (ro, rw) = dense_window_attention(&rows(&base, win), &rows(&search, win), &valid[win * m..(win + 1) * m], &p);
            for (qi, row) in ro.iter().enumerate() {
                for (e, &x) in row.iter().enumerate() {
                    worst = worst.max((o.data()[(win * s + qi) * c + e] - x).abs());
                }
            }
            for h in 0..heads {
                for qi in 0..s {
                    for ki in 0..m {
                        let got = wts.data()[((win * heads + h) * s + qi) * m + ki];
                        worst = worst.max((got - rw[h][qi][ki]).abs());
                        if !valid[win * m + ki] {
                            assert_eq!(got, 0.0, "case {case}: masked key weight");
                        }
                    }
                }
            }
        }
    }
    assert!(worst < 1e-6, "max abs error {worst}");
}

#[test]
fn spec_sized_instance_matches_dense_loops() {
    // n = 2 windows of s = 8 tokens, μ·s = 216 searching tokens, c = 4, 2 heads
    let mut r = rng(5);
    let p = AttentionParams::<xmorpher::Tensor<f64>>::init(4, 2, &mut r).unwrap();
    let grid = random(&[2, 4, 2, 4], &mut r);
    let cfg = WindowConfig::default();
    let wb = window_partition(&grid, &cfg).unwrap();
    let ws = xmorpher::windowing::window_area_partition(&grid, &cfg).unwrap();
    assert_eq!((wb.count(), wb.layout.tokens_per_window(), ws.layout.tokens_per_window()), (2, 8, 216));
    let valid = ws.layout.valid();
    let mut g = Graph64::new();
    let pb = p.bind(&mut g);
    let b = g.constant(wb.tokens.clone());
    let k = g.constant(ws.tokens.clone());
    let out = w_mca(&mut g, b, k, &valid, &pb).unwrap();
    for win in 0..2 {
        let (ro, _) = dense_window_attention(&rows(&wb.tokens, win), &rows(&ws.tokens, win), &valid[win * 216..(win + 1) * 216], &p);
        for (qi, row) in ro.iter().enumerate() {
            for (e, &x) in row.iter().enumerate() {
                assert!((g.value(out.output).data()[(win * 8 + qi) * 4 + e] - x).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn unit_magnification_reduces_to_window_self_attention() {
    let mut r = rng(11);
    for &(dims, window, heads, c) in &[
        ([4, 4, 4], [2, 2, 2], 2, 4),
        ([2, 6, 4], [2, 3, 2], 1, 3),
        ([4, 2, 2], [4, 2, 1], 3, 6),
    ] {
        let cfg = WindowConfig::new(window, [1, 1, 1]).unwrap();
        let p = AttentionParams::<xmorpher::Tensor<f64>>::init(c, heads, &mut r).unwrap();
        let grid = random(&[dims[0], dims[1], dims[2], c], &mut r);
        let wb = window_partition(&grid, &cfg).unwrap();
        let ws = xmorpher::windowing::window_area_partition(&grid, &cfg).unwrap();
        assert_eq!(wb.tokens, ws.tokens);
        let mut g = Graph64::new();
        let pb = p.bind(&mut g);
        let b = g.constant(wb.tokens.clone());
        let out = w_mca(&mut g, b, b, &ws.layout.valid(), &pb).unwrap();
        let merged = window_merge(
            &WindowSet {
                layout: wb.layout.clone(),
                tokens: g.value(out.output).clone(),
            },
            dims,
        )
        .unwrap();
        let reference = window_self_attention(&grid, window, &p);
        let err = merged
            .data()
            .iter()
            .zip(reference.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-9, "{dims:?}: {err}");
    }
}

#[test]
fn unit_magnification_cat_block_on_equal_inputs_is_self_attention_block() {
    // with b = s the attention branch of the CAT block is window self-attention on LN(x)
    let mut r = rng(12);
    let cfg = WindowConfig::new([2, 2, 2], [1, 1, 1]).unwrap();
    let mut p = AttentionParams::<xmorpher::Tensor<f64>>::init(4, 2, &mut r).unwrap();
    p.fc2.weight = xmorpher::Tensor::zeros(vec![16, 4]);
    p.fc2.bias = Some(xmorpher::Tensor::zeros(vec![4]));
    let grid = random(&[4, 2, 4, 4], &mut r);
    let mut g = Graph64::new();
    let pb = p.bind(&mut g);
    let x = g.constant(grid.clone());
    let out = cat_block(&mut g, x, x, &pb, &cfg).unwrap();

    // LayerNorm by hand
    let mut normed = grid.clone();
    for row in normed.data_mut().chunks_mut(4) {
        let mean = row.iter().sum::<f64>() / 4.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        row.iter_mut().for_each(|v| *v = (*v - mean) / (var + 1e-5).sqrt());
    }
    let att = window_self_attention(&normed, [2, 2, 2], &p);
    for ((o, a), x) in g.value(out.output).data().iter().zip(att.data()).zip(grid.data()) {
        assert!((o - (x + a)).abs() < 1e-9);
    }
}

#[test]
fn window_enumeration_order_is_immaterial() {
    let mut r = rng(13);
    let (n, s, m, c) = (4, 3, 5, 4);
    let p = AttentionParams::<xmorpher::Tensor<f64>>::init(c, 2, &mut r).unwrap();
    let base = random(&[n, s, c], &mut r);
    let search = random(&[n, m, c], &mut r);
    let valid: Vec<bool> = (0..n * m).map(|i| i % 3 != 1).collect();
    let perm = [2usize, 0, 3, 1];
    let permute = |t: &xmorpher::Tensor<f64>, rows: usize| {
        let w = rows * c;
        let mut d = Vec::new();
        for &i in &perm {
            d.extend_from_slice(&t.data()[i * w..(i + 1) * w]);
        }
        xmorpher::Tensor::new(t.shape().to_vec(), d).unwrap()
    };
    let pvalid: Vec<bool> = perm.iter().flat_map(|&i| valid[i * m..(i + 1) * m].to_vec()).collect();
    let run = |b: xmorpher::Tensor<f64>, k: xmorpher::Tensor<f64>, v: &[bool]| {
        let mut g = Graph64::new();
        let pb = p.bind(&mut g);
        let b = g.constant(b);
        let k = g.constant(k);
        let o = w_mca(&mut g, b, k, v, &pb).unwrap().output;
        g.value(o).clone()
    };
    let plain = run(base.clone(), search.clone(), &valid);
    let shuffled = run(permute(&base, s), permute(&search, m), &pvalid);
    assert_eq!(permute(&plain, s), shuffled);
}

#[test]
fn base_tokens_sit_inside_their_searching_windows() {
    for &(grid, base, mag) in &[([5, 4, 4], [2, 2, 2], [3, 3, 3]), ([3, 7, 2], [1, 3, 2], [5, 1, 3])] {
        let cfg = WindowConfig::new(base, mag).unwrap();
        let b = WindowLayout::base(grid, &cfg).unwrap();
        let s = WindowLayout::searching(grid, &cfg).unwrap();
        assert_eq!(b.count(), s.count());
        assert_eq!(s.tokens_per_window(), cfg.mu() * cfg.base_volume());
        for w in 0..b.count() {
            let lo: Vec<isize> = (0..3).map(|a| b.origins[w][a]).collect();
            for a in 0..3 {
                let so = s.origins[w][a];
                let offset = lo[a] - so;
                assert!(offset >= 0 && offset as usize + base[a] <= s.window[a]);
                // centred: equal margins on both sides
                assert_eq!(2 * offset as usize + base[a], s.window[a]);
            }
        }
    }
}
