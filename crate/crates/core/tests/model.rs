mod common;

use std::cell::Cell;
use std::time::Instant;

use common::{probe, random, rng};
use xmorpher::architecture::{forward_nodes, ArchConfig, ModelParams};
use xmorpher::attention::{cat_block, fusion_module, AttentionParams};
use xmorpher::gradcheck::check_gradients;
use xmorpher::registration::{ncc_nodes, similarity_nodes, smoothness_nodes, spatial_transform_nodes, Similarity};
use xmorpher::windowing::WindowConfig;
use xmorpher::{Graph64, Tensor, TensorId};

fn small(no_cross: bool) -> ArchConfig {
    ArchConfig {
        input: [8, 8, 8],
        embed_channels: 4,
        levels: 2,
        rounds: 1,
        window: WindowConfig::default(),
        heads: vec![2, 2],
        no_cross,
    }
}

fn flatten(p: &ModelParams<Tensor<f64>>) -> Vec<Tensor<f64>> {
    let mut v = Vec::new();
    p.map(&mut |_, t| v.push(t.clone()));
    v
}

fn rebuild(p: &ModelParams<Tensor<f64>>, ids: &[TensorId]) -> ModelParams<TensorId> {
    let k = Cell::new(0);
    p.map(&mut |_, _| {
        k.set(k.get() + 1);
        ids[k.get() - 1]
    })
}

fn full_model_gradcheck(no_cross: bool) {
    let cfg = small(no_cross);
    let params = ModelParams::<Tensor<f64>>::init_random(&cfg, 3).unwrap();
    let mut r = rng(4);
    let mut inputs = vec![random(&[8, 8, 8], &mut r), random(&[8, 8, 8], &mut r)];
    inputs.extend(flatten(&params));
    let report = check_gradients(&inputs, 1e-5, |g, ids| {
        let p = rebuild(&params, &ids[2..]);
        let out = forward_nodes(g, ids[0], ids[1], &p, &cfg)?;
        Ok(probe(g, out.dvf, 9))
    })
    .unwrap();
    assert_eq!(report.checked, 1024 + params.param_count());
    assert!(report.max_rel_err < 1e-4, "{report:?}");
}

#[test]
fn full_forward_gradients_match_finite_differences() {
    full_model_gradcheck(false);
}

#[test]
fn no_cross_forward_gradients_match_finite_differences() {
    full_model_gradcheck(true);
}

#[test]
fn warp_and_losses_gradients_match_finite_differences() {
    let mut r = rng(21);
    let moving = Tensor::from_fn(vec![5, 5, 5], |i| ((i * 7) % 13) as f64 / 13.0 + 0.1 * ((i as f64) * 0.37).sin());
    let fixed = random(&[5, 5, 5], &mut r);
    // keep sample points away from integer coordinates where trilinear weights kink
    let phi = Tensor::from_fn(vec![3, 5, 5, 5], |i| 0.25 + 0.4 * ((i as f64) * 1.3).sin());
    for kind in [Similarity::Mse, Similarity::Ncc { radius: 1 }] {
        let report = check_gradients(&[moving.clone(), fixed.clone(), phi.clone()], 1e-5, |g, ids| {
            let w = spatial_transform_nodes(g, ids[0], ids[2])?;
            let s = similarity_nodes(g, w, ids[1], kind)?;
            let sm = smoothness_nodes(g, ids[2], 0.7)?;
            g.add(s, sm)
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "{kind:?}: {report:?}");
    }
    let report = check_gradients(&[moving, fixed], 1e-5, |g, ids| ncc_nodes(g, ids[0], ids[1], 2)).unwrap();
    assert!(report.max_rel_err < 1e-4, "{report:?}");
}

fn audit(no_cross: bool) {
    let cfg = small(no_cross);
    let params = ModelParams::<Tensor<f64>>::init_random(&cfg, 8).unwrap();
    let mut r = rng(9);
    let mut g = Graph64::new();
    let p = params.bind(&mut g);
    let m = g.constant(random(&[8, 8, 8], &mut r));
    let f = g.constant(random(&[8, 8, 8], &mut r));
    let out = forward_nodes(&mut g, m, f, &p, &cfg).unwrap();
    let loss = probe(&mut g, out.dvf, 10);
    g.backward(loss).unwrap();
    let mut dead = Vec::new();
    p.map(&mut |name, &id| {
        let grad = g.grad(id).unwrap();
        let zeros = grad.data().iter().filter(|&&v| v == 0.0).count();
        if zeros > 0 {
            dead.push(format!("{name}: {zeros} of {}", grad.numel()));
        }
    });
    assert!(dead.is_empty(), "parameters without gradient: {dead:?}");
}

#[test]
fn every_parameter_receives_gradient() {
    audit(false);
}

#[test]
fn every_no_cross_parameter_receives_gradient() {
    audit(true);
}

#[test]
fn swapping_inputs_swaps_streams_at_every_level() {
    for levels in [2, 3] {
        let cfg = ArchConfig {
            input: [16, 16, 8],
            embed_channels: 4,
            levels,
            rounds: 2,
            window: WindowConfig::default(),
            heads: vec![1; levels],
            no_cross: false,
        };
        let params = ModelParams::<Tensor<f64>>::init_random(&cfg, 1).unwrap();
        let mut r = rng(2);
        let a = random(&[16, 16, 8], &mut r);
        let b = random(&[16, 16, 8], &mut r);
        let run = |x: &Tensor<f64>, y: &Tensor<f64>| {
            let mut g = Graph64::new();
            let p = params.bind(&mut g);
            let x = g.constant(x.clone());
            let y = g.constant(y.clone());
            let out = forward_nodes(&mut g, x, y, &p, &cfg).unwrap();
            out.features
                .iter()
                .map(|s| (s.stage, g.value(s.moving).clone(), g.value(s.fixed).clone()))
                .collect::<Vec<_>>()
        };
        let ab = run(&a, &b);
        let ba = run(&b, &a);
        assert_eq!(ab.len(), 2 * levels - 1);
        for ((sa, ma, fa), (sb, mb, fb)) in ab.iter().zip(&ba) {
            assert_eq!(sa, sb);
            assert_eq!(ma, fb, "{sa:?}");
            assert_eq!(fa, mb, "{sa:?}");
            assert_ne!(ma, fa);
        }
    }
}

#[test]
fn fusion_symmetry_for_several_round_counts() {
    let mut r = rng(31);
    let cfg = WindowConfig::default();
    for k in 1..=3 {
        let rounds: Vec<AttentionParams<Tensor<f64>>> =
            (0..k).map(|_| AttentionParams::init(4, 2, &mut r).unwrap()).collect();
        let x = random(&[4, 4, 2, 4], &mut r);
        let y = random(&[4, 4, 2, 4], &mut r);
        let mut g = Graph64::new();
        let p: Vec<_> = rounds.iter().map(|p| p.bind(&mut g)).collect();
        let xi = g.constant(x.clone());
        let x2 = g.constant(x);
        let yi = g.constant(y);
        let (m, f, _) = fusion_module(&mut g, xi, x2, &p, &cfg).unwrap();
        assert_eq!(g.value(m), g.value(f), "k = {k}");
        let (m1, f1, _) = fusion_module(&mut g, xi, yi, &p, &cfg).unwrap();
        let (m2, f2, _) = fusion_module(&mut g, yi, xi, &p, &cfg).unwrap();
        assert_eq!(g.value(m1), g.value(f2));
        assert_eq!(g.value(f1), g.value(m2));
    }
}

#[test]
fn cat_block_gradients_cover_every_parameter() {
    let mut r = rng(41);
    let p = AttentionParams::<Tensor<f64>>::init(4, 2, &mut r).unwrap();
    let mut inputs = vec![random(&[2, 4, 4, 4], &mut r), random(&[2, 4, 4, 4], &mut r)];
    p.map("", &mut |_, t| inputs.push(t.clone()));
    let cfg = WindowConfig::default();
    let report = check_gradients(&inputs, 1e-5, |g, ids| {
        let k = Cell::new(2);
        let pb = p.map("", &mut |_, _| {
            k.set(k.get() + 1);
            ids[k.get() - 1]
        });
        let out = cat_block(g, ids[0], ids[1], &pb, &cfg)?;
        Ok(probe(g, out.output, 3))
    })
    .unwrap();
    assert!(report.max_rel_err < 1e-4, "{report:?}");
}

#[test]
fn forward_backward_smoke_bound() {
    let cfg = ArchConfig {
        input: [16, 16, 16],
        embed_channels: 4,
        levels: 2,
        rounds: 1,
        window: WindowConfig::default(),
        heads: vec![2, 2],
        no_cross: false,
    };
    let params = ModelParams::<Tensor<f64>>::init_random(&cfg, 0).unwrap();
    let mut r = rng(0);
    let start = Instant::now();
    let mut g = Graph64::new();
    let p = params.bind(&mut g);
    let m = g.constant(random(&[16, 16, 16], &mut r));
    let f = g.constant(random(&[16, 16, 16], &mut r));
    let out = forward_nodes(&mut g, m, f, &p, &cfg).unwrap();
    let loss = probe(&mut g, out.dvf, 1);
    g.backward(loss).unwrap();
    let secs = start.elapsed().as_secs_f64();
    assert!(secs < 10.0, "forward + backward took {secs:.2} s");
}
