use ffgan_core::attention::VisualFeatureMap;
use ffgan_core::fusion::{apply_affine, AffineMode, AffineParams, FfBlock};
use ffgan_core::testing::{check_input_gradients, check_param_gradients, random_projection};
use ffgan_core::text::WordFeatures;
use ffgan_core::{AttnAxis, Error, Graph, ParamStore, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A block whose final convolutions are randomized so that scale and shift
/// depend on the context.
fn live_block(dw: usize, dm: usize, mode: AffineMode, seed: u64) -> (FfBlock, ParamStore<f64>) {
    let mut ps = ParamStore::new();
    let block = FfBlock::new(&mut ps, "ff", dw, dm, mode, &mut rng(seed));
    let mut r = rng(seed + 1);
    for tag in ["scale1", "shift1"] {
        let id = ps.find(&format!("ff.affine.{tag}.weight")).expect("final conv weight");
        let shape = ps.get(id).shape().to_vec();
        *ps.get_mut(id) = Tensor::randn(&shape, &mut r).map(|v| v * 0.3);
    }
    (block, ps)
}

fn words(l: usize, dw: usize, length: usize, seed: u64) -> WordFeatures<f64> {
    let mut values = Tensor::randn(&[l, dw], &mut rng(seed));
    values.data_mut()[length * dw..].iter_mut().for_each(|v| *v = 0.0);
    WordFeatures { values, mask: (0..l).map(|i| i < length).collect() }
}

#[test]
fn affine_hand_cases() {
    let h = VisualFeatureMap::new(Tensor::from_f64(&[1, 1, 2], &[2., 3.]).unwrap()).unwrap();
    let a = AffineParams {
        scale: Tensor::from_f64(&[1, 1, 2], &[0.5, 2.]).unwrap(),
        shift: Tensor::from_f64(&[1, 1, 2], &[1., -1.]).unwrap(),
    };
    assert_eq!(apply_affine(&h, &a).unwrap().values().data(), &[2., 5.]);
    let kill = AffineParams { scale: Tensor::zeros(&[1, 1, 2]), shift: Tensor::from_f64(&[1, 1, 2], &[7., 8.]).unwrap() };
    assert_eq!(apply_affine(&h, &kill).unwrap().values().data(), &[7., 8.]);
    let wrong = AffineParams::<f64>::identity(&[1, 2, 1]);
    assert!(matches!(apply_affine(&h, &wrong), Err(Error::Config(_))));
}

#[test]
fn fresh_block_is_identity() {
    let mut ps = ParamStore::<f64>::new();
    let block = FfBlock::new(&mut ps, "ff", 3, 4, AffineMode::PerElement, &mut rng(1));
    let h = VisualFeatureMap::new(Tensor::randn(&[4, 4, 4], &mut rng(2))).unwrap();
    let (out, w) = block.ff_block(&ps, &words(5, 3, 3, 3), &h, AttnAxis::Words).unwrap();
    assert_eq!(out, h);
    assert_eq!(w.values.shape(), &[5, 16]);
    // zero context: the affine maps reduce to the final biases
    let zero = ffgan_core::attention::ContextMap { values: Tensor::zeros(&[4, 4, 4]) };
    let a = block.affine.predict_affine(&ps, &zero).unwrap();
    assert!(a.scale.data().iter().all(|&v| v == 1.0) && a.shift.data().iter().all(|&v| v == 0.0));
}

#[test]
fn block_equals_sequential_components() {
    for mode in [AffineMode::PerElement, AffineMode::PerChannel] {
        let (block, ps) = live_block(3, 4, mode, 4);
        let w = words(4, 3, 3, 5);
        let h = VisualFeatureMap::new(Tensor::randn(&[4, 2, 4], &mut rng(6))).unwrap();
        let (out, weights) = block.ff_block(&ps, &w, &h, AttnAxis::Words).unwrap();
        let (ctx, w2) = block.attention.word_context(&ps, &w, &h, AttnAxis::Words).unwrap();
        let affine = block.affine.predict_affine(&ps, &ctx).unwrap();
        let manual: Vec<f64> = h
            .values()
            .data()
            .iter()
            .zip(affine.scale.data())
            .zip(affine.shift.data())
            .map(|((x, s), b)| x * s + b)
            .collect();
        assert_eq!(weights, w2);
        assert!(out.values().data().iter().zip(&manual).all(|(a, b)| (a - b).abs() < 1e-6));
        assert_eq!(out.values().shape(), h.values().shape());
        if mode == AffineMode::PerChannel {
            for c in 0..4 {
                let plane = &affine.scale.data()[c * 8..(c + 1) * 8];
                assert!(plane.iter().all(|&v| v == plane[0]));
            }
        }
    }
}

#[test]
fn no_dead_spatial_positions_in_affine_prediction() {
    let (block, ps) = live_block(3, 2, AffineMode::PerElement, 7);
    let f = Tensor::randn(&[2, 4, 4], &mut rng(8));
    let base = block.affine.predict_affine(&ps, &ffgan_core::attention::ContextMap { values: f.clone() }).unwrap();
    for k in 0..f.numel() {
        let mut g = f.clone();
        g.data_mut()[k] += 0.5;
        let a = block.affine.predict_affine(&ps, &ffgan_core::attention::ContextMap { values: g }).unwrap();
        assert!(a.scale != base.scale || a.shift != base.shift, "element {k} has no effect");
    }
    let bad = ffgan_core::attention::ContextMap { values: Tensor::zeros(&[3, 4, 4]) };
    assert!(matches!(block.affine.predict_affine(&ps, &bad), Err(Error::Config(_))));
}

#[test]
fn every_parameter_receives_gradient() {
    let (block, ps) = live_block(3, 3, AffineMode::PerElement, 9);
    let w = words(4, 3, 4, 10).values.reshape(&[1, 4, 3]).unwrap();
    let h = Tensor::randn(&[2, 3, 4, 4], &mut rng(11));
    let mut g = Graph::new();
    let wv = {
        let stacked = Tensor::stack(&[w.clone().reshape(&[4, 3]).unwrap(), w.reshape(&[4, 3]).unwrap()]).unwrap();
        g.constant(stacked)
    };
    let hv = g.constant(h);
    let (out, _) = block.forward(&mut g, &ps, wv, &[true; 8], hv, AttnAxis::Words);
    let sq = g.mul(out, out);
    let loss = g.sum_all(sq);
    let grads = g.backward(loss);
    let pg = g.param_grads(&grads, &ps);
    for id in ps.trainable_ids() {
        let grad = pg[id.index()].as_ref().expect("gradient");
        assert!(grad.data().iter().any(|&v| v != 0.0), "{} has zero gradient", ps.name(id));
    }
}

#[test]
fn ff_block_gradients() {
    let (block, ps) = live_block(2, 2, AffineMode::PerElement, 12);
    let w = words(3, 2, 2, 13).values.reshape(&[1, 3, 2]).unwrap();
    let mask = [true, true, false];
    let h = Tensor::randn(&[1, 2, 2, 2], &mut rng(14));
    let errs = check_input_gradients(&[w.clone(), h.clone()], 1e-5, |g, v| {
        let (out, _) = block.forward(g, &ps, v[0], &mask, v[1], AttnAxis::Words);
        random_projection(g, out, 15)
    });
    assert!(errs.iter().all(|&e| e < 1e-4), "{errs:?}");
    let errs = check_param_gradients(&ps, 1e-5, |g, p| {
        let wv = g.constant(w.clone());
        let hv = g.constant(h.clone());
        let (out, _) = block.forward(g, p, wv, &mask, hv, AttnAxis::Words);
        random_projection(g, out, 16)
    });
    assert!(errs.iter().all(|(_, e)| *e < 1e-4), "{errs:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn identity_affine_is_exact(seed in any::<u64>(), c in 1usize..5, hp in 0u32..4, wp in 0u32..4) {
        let shape = [c, 1usize << hp, 1usize << wp];
        let h = VisualFeatureMap::new(Tensor::<f64>::randn(&shape, &mut rng(seed)).map(|v| v * 1e3)).unwrap();
        prop_assert_eq!(apply_affine(&h, &AffineParams::identity(&shape)).unwrap(), h);
    }

    #[test]
    fn magnitude_is_monotone_in_scale(x in -10.0f64..10.0, s1 in 0.0f64..5.0, ds in 0.0f64..5.0) {
        let h = VisualFeatureMap::<f64>::new(Tensor::from_f64(&[1, 1, 1], &[x]).unwrap()).unwrap();
        let at = |s: f64| {
            let a = AffineParams { scale: Tensor::from_f64(&[1, 1, 1], &[s]).unwrap(), shift: Tensor::zeros(&[1, 1, 1]) };
            apply_affine(&h, &a).unwrap().values().data()[0].abs()
        };
        prop_assert!(at(s1) <= at(s1 + ds));
        prop_assert!(at(-s1) <= at(-(s1 + ds)));
    }

    #[test]
    fn block_preserves_shape(seed in any::<u64>(), hp in 0u32..3, wp in 0u32..3, length in 1usize..4) {
        let (block, ps) = live_block(3, 2, AffineMode::PerElement, seed);
        let h = VisualFeatureMap::new(Tensor::randn(&[2, 1 << hp, 1 << wp], &mut rng(seed ^ 5))).unwrap();
        let (out, _) = block.ff_block(&ps, &words(3, 3, length, seed ^ 6), &h, AttnAxis::Words).unwrap();
        prop_assert_eq!(out.values().shape(), h.values().shape());
    }
}
