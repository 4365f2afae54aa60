use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

const H: f64 = 1e-5;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let len = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Builds `Σ w ⊙ op(inputs)` with fixed random `w`, returns the value and the
/// analytic gradients of every input.
fn scalarize<F>(inputs: &[Tensor], weights_seed: u64, op: F) -> (f64, Vec<Vec<f64>>)
where
    F: Fn(&mut Graph<'_>, &[Var]) -> Var,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t)).collect();
    let out = op(&mut g, &vars);
    let n = g.value(out).len();
    let mut rng = ChaCha8Rng::seed_from_u64(weights_seed);
    let w: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let s = g.weighted_sum(out, &w).unwrap();
    let value = g.value(s).data()[0];
    g.backward(s).unwrap();
    let grads = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).map_or(vec![0.0; t.len()], <[f64]>::to_vec))
        .collect();
    (value, grads)
}

fn check<F>(inputs: Vec<Tensor>, tol: f64, op: F) -> GradCheckReport
where
    F: Fn(&mut Graph<'_>, &[Var]) -> Var + Copy,
{
    let (_, analytic) = scalarize(&inputs, 99, op);
    finite_difference_check(|p| scalarize(p, 99, op).0, &inputs, &analytic, H, tol)
}

#[test]
fn gather_copies_rows() {
    let table = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
    let mut g = Graph::new();
    let t = g.param(&table);
    let out = g.gather(t, &[1, 0]).unwrap();
    assert_eq!(g.value(out), &Tensor::from_rows(&[vec![3.0, 4.0], vec![1.0, 2.0]]));
}

#[test]
fn gather_scatters_gradients_additively() {
    let table = Tensor::from_rows(&[vec![0.0, 0.0], vec![0.0, 0.0]]);
    let mut g = Graph::new();
    let t = g.param(&table);
    let out = g.gather(t, &[0, 0]).unwrap();
    let s = g.weighted_sum(out, &[1.0, 1.0, 2.0, 2.0]).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(t).unwrap(), &[3.0, 3.0, 0.0, 0.0]);
}

#[test]
fn gather_rejects_out_of_range_index_with_position() {
    let table = Tensor::zeros(&[2, 2]);
    let mut g = Graph::new();
    let t = g.param(&table);
    match g.gather(t, &[0, 5]) {
        Err(Error::IndexOutOfRange { position, index, len }) => {
            assert_eq!((position, index, len), (1, 5, 2));
        }
        other => panic!("unexpected {other:?}", other = other.map(|_| ())),
    }
}

#[test]
fn gather_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let r = check(vec![random(&[5, 3], &mut rng)], 1e-6, |g, v| {
        g.gather(v[0], &[4, 0, 2, 4, 1]).unwrap()
    });
    assert!(r.passed, "{r:?}");
}

#[test]
fn affine_examples() {
    let x = Tensor::from_rows(&[vec![1.0, 0.0]]);
    let w = Tensor::from_rows(&[vec![2.0, 0.0], vec![0.0, 3.0]]);
    let b = Tensor::vector(vec![1.0, 1.0]);
    let mut g = Graph::new();
    let (xv, wv, bv) = (g.param(&x), g.param(&w), g.param(&b));
    let out = g.affine(xv, wv, Some(bv)).unwrap();
    assert_eq!(g.value(out).data(), &[3.0, 1.0]);

    let zero = Tensor::zeros(&[3, 2]);
    let zv = g.param(&zero);
    let out = g.affine(zv, wv, Some(bv)).unwrap();
    for r in 0..3 {
        assert_eq!(g.value(out).row(r), b.data());
    }
}

#[test]
fn affine_shape_mismatch_names_both_shapes() {
    let x = Tensor::zeros(&[2, 3]);
    let w = Tensor::zeros(&[2, 2]);
    let mut g = Graph::new();
    let (xv, wv) = (g.param(&x), g.param(&w));
    let err = g.affine(xv, wv, None).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
}

#[test]
fn affine_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let inputs = vec![
        random(&[3, 4], &mut rng),
        random(&[4, 2], &mut rng),
        random(&[2], &mut rng),
    ];
    let r = check(inputs, 1e-6, |g, v| g.affine(v[0], v[1], Some(v[2])).unwrap());
    assert!(r.passed, "{r:?}");
}

#[test]
fn elementwise_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = random(&[3, 4], &mut rng);
    let b = random(&[3, 4], &mut rng);
    let r = check(vec![a.clone(), b.clone()], 1e-6, |g, v| g.add(v[0], v[1]).unwrap());
    assert!(r.passed, "add {r:?}");
    let r = check(vec![a.clone()], 1e-6, |g, v| g.relu(v[0]));
    assert!(r.passed, "relu {r:?}");
    let r = check(vec![a.clone(), b.clone()], 1e-6, |g, v| g.concat_cols(v[0], v[1]).unwrap());
    assert!(r.passed, "concat_cols {r:?}");
    let r = check(vec![a.clone(), b], 1e-6, |g, v| g.concat_rows(v[0], v[1]).unwrap());
    assert!(r.passed, "concat_rows {r:?}");
    let r = check(vec![a], 1e-6, |g, v| {
        g.mul_mask(v[0], (0..12).map(|i| i as f64 * 0.25).collect()).unwrap()
    });
    assert!(r.passed, "mul_mask {r:?}");
}

#[test]
fn softmax_examples() {
    let x = Tensor::from_rows(&[vec![0.0, 0.0], vec![1.0, 0.0]]);
    let mut g = Graph::new();
    let xv = g.param(&x);
    for tau in [0.1, 1.0, 7.0] {
        let y = g.softmax_rows(xv, tau).unwrap();
        assert_eq!(g.value(y).row(0), &[0.5, 0.5]);
    }
    let y = g.softmax_rows(xv, 1.0).unwrap();
    let logistic = 1.0 / (1.0 + (-1.0f64).exp());
    assert!((g.value(y).get(1, 0) - 0.7311).abs() < 1e-4);
    assert!((g.value(y).get(1, 0) - logistic).abs() < 1e-15);
    assert!((g.value(y).get(1, 1) - 0.2689).abs() < 1e-4);

    let mut prev = g.value(y).get(1, 0);
    for tau in [2.0, 10.0, 100.0, 1e6] {
        let y = g.softmax_rows(xv, tau).unwrap();
        let p = g.value(y).get(1, 0);
        assert!(p < prev && p > 0.5);
        prev = p;
    }
    assert!((prev - 0.5).abs() < 1e-6);
}

#[test]
fn softmax_rejects_non_positive_temperature() {
    let x = Tensor::zeros(&[1, 2]);
    let mut g = Graph::new();
    let xv = g.param(&x);
    assert!(matches!(g.softmax_rows(xv, 0.0), Err(Error::Config(_))));
    assert!(matches!(g.softmax_rows(xv, -1.0), Err(Error::Config(_))));
}

#[test]
fn softmax_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for tau in [1.0, 5.0] {
        let r = check(vec![random(&[3, 5], &mut rng)], 1e-6, move |g, v| {
            g.softmax_rows(v[0], tau).unwrap()
        });
        assert!(r.passed, "tau {tau}: {r:?}");
    }
}

#[test]
fn layer_norm_and_pick_log_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let inputs = vec![
        random(&[3, 6], &mut rng),
        random(&[6], &mut rng),
        random(&[6], &mut rng),
    ];
    let r = check(inputs, 1e-6, |g, v| {
        g.layer_norm(v[0], v[1], v[2], LAYER_NORM_EPS).unwrap()
    });
    assert!(r.passed, "layer_norm {r:?}");

    let r = check(vec![random(&[4, 2], &mut rng)], 1e-6, |g, v| {
        let p = g.softmax_rows(v[0], 2.0).unwrap();
        g.pick_log(p, &[Some(1), None, Some(0), Some(1)]).unwrap()
    });
    assert!(r.passed, "pick_log {r:?}");
}

#[test]
fn attention_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let inputs = vec![
        random(&[5, 4], &mut rng),
        random(&[5, 4], &mut rng),
        random(&[5, 4], &mut rng),
    ];
    let r = check(inputs, 1e-6, |g, v| g.causal_attention(v[0], v[1], v[2], 2).unwrap());
    assert!(r.passed, "{r:?}");
}

#[test]
fn cross_entropy_examples() {
    // One target and one negative with equal logits.
    let h = Tensor::from_rows(&[vec![1.0]]);
    let w = Tensor::from_rows(&[vec![0.0, 0.5, 0.5]]);
    let b = Tensor::zeros(&[3]);
    let mut g = Graph::new();
    let (hv, wv, bv) = (g.param(&h), g.param(&w), g.param(&b));
    let l = g
        .cross_entropy(hv, wv, bv, &[Some(1)], &Candidates::Sampled(vec![2]))
        .unwrap();
    assert!((g.value(l).data()[0] - std::f64::consts::LN_2).abs() < 1e-15);

    // Dominant target logit drives the loss to zero.
    let w = Tensor::from_rows(&[vec![0.0, 60.0, 0.0]]);
    let mut g = Graph::new();
    let (hv, wv, bv) = (g.param(&h), g.param(&w), g.param(&b));
    let l = g
        .cross_entropy(hv, wv, bv, &[Some(1)], &Candidates::Sampled(vec![2]))
        .unwrap();
    assert!(g.value(l).data()[0] < 1e-20);

    // Full catalog of three items with logits [1, 2, 3], target is the third.
    let w = Tensor::from_rows(&[vec![0.0, 1.0, 2.0, 3.0]]);
    let b = Tensor::zeros(&[4]);
    let mut g = Graph::new();
    let (hv, wv, bv) = (g.param(&h), g.param(&w), g.param(&b));
    let l = g.cross_entropy(hv, wv, bv, &[Some(3)], &Candidates::Full).unwrap();
    let e = |x: f64| x.exp();
    let expected = -(e(3.0) / (e(1.0) + e(2.0) + e(3.0))).ln();
    assert!((g.value(l).data()[0] - expected).abs() < 1e-12);
    assert!((expected - 0.4076).abs() < 1e-4);
}

#[test]
fn cross_entropy_rejects_target_in_negative_set() {
    let h = Tensor::zeros(&[2, 1]);
    let w = Tensor::zeros(&[1, 4]);
    let b = Tensor::zeros(&[4]);
    let mut g = Graph::new();
    let (hv, wv, bv) = (g.param(&h), g.param(&w), g.param(&b));
    let err = g
        .cross_entropy(hv, wv, bv, &[Some(1), Some(3)], &Candidates::Sampled(vec![2, 3]))
        .unwrap_err();
    assert!(matches!(err, Error::TargetCollision { row: 1, item: 3 }));
}

#[test]
fn cross_entropy_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let inputs = vec![
        random(&[4, 3], &mut rng),
        random(&[3, 7], &mut rng),
        random(&[7], &mut rng),
    ];
    let targets = [Some(2), None, Some(6), Some(1)];
    let r = check(inputs.clone(), 1e-6, |g, v| {
        g.cross_entropy(v[0], v[1], v[2], &targets, &Candidates::Full).unwrap()
    });
    assert!(r.passed, "full {r:?}");
    let targets = [Some(2), None, Some(6), Some(2)];
    let r = check(inputs, 1e-6, |g, v| {
        g.cross_entropy(v[0], v[1], v[2], &targets, &Candidates::Sampled(vec![1, 4, 5]))
            .unwrap()
    });
    assert!(r.passed, "sampled {r:?}");
}

fn block_fixture(seed: u64) -> (ParamStore, BlockParams) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let p = BlockParams::init(&mut store, "blk", 4, 8, &mut rng);
    // Larger weights than the training init so the check exercises curvature.
    for t in store.tensors_mut() {
        for v in t.data_mut() {
            *v += rng.random_range(-0.5..0.5);
        }
    }
    (store, p)
}

fn run_block(store: &ParamStore, p: &BlockParams, x: &Tensor) -> (Tensor, Option<Vec<f64>>) {
    let mut g = Graph::new();
    let bound = store.bind(&mut g);
    let xv = g.param(x);
    let out = causal_self_attention_block::<ChaCha8Rng>(&mut g, &bound, p, xv, 2, None)
        .unwrap()
        .output;
    (g.value(out).clone(), None)
}

#[test]
fn block_is_causal_under_perturbation() {
    let (store, p) = block_fixture(8);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = random(&[6, 4], &mut rng);
    let (base, _) = run_block(&store, &p, &x);
    for t in 0..6 {
        let mut y = x.clone();
        for v in y.row_mut(t) {
            *v += 0.7;
        }
        let (out, _) = run_block(&store, &p, &y);
        for s in 0..t {
            assert_eq!(out.row(s), base.row(s), "row {s} moved when perturbing {t}");
        }
        assert_ne!(out.row(t), base.row(t));
    }
}

#[test]
fn single_position_attends_to_itself() {
    let (store, p) = block_fixture(10);
    let x = Tensor::from_rows(&[vec![0.3, -0.2, 0.1, 0.9]]);
    let mut g = Graph::new();
    let bound = store.bind(&mut g);
    let xv = g.param(&x);
    let out = causal_self_attention_block::<ChaCha8Rng>(&mut g, &bound, &p, xv, 2, None).unwrap();
    assert_eq!(g.attention_probs(out.attention).unwrap(), &[1.0, 1.0]);
}

#[test]
fn block_gradient_matches_finite_differences() {
    let (store, p) = block_fixture(11);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = random(&[5, 4], &mut rng);

    let eval = |params: &[Tensor], x: &Tensor, backward: bool| {
        let mut s = store.clone();
        s.tensors_mut().clone_from_slice(params);
        let mut g = Graph::new();
        let bound = s.bind(&mut g);
        let xv = g.param(x);
        let out = causal_self_attention_block::<ChaCha8Rng>(&mut g, &bound, &p, xv, 2, None)
            .unwrap()
            .output;
        let w: Vec<f64> = (0..20).map(|i| ((i * 7 % 11) as f64 - 5.0) / 5.0).collect();
        let l = g.weighted_sum(out, &w).unwrap();
        let value = g.value(l).data()[0];
        if !backward {
            return (value, Vec::new());
        }
        g.backward(l).unwrap();
        let mut grads = s.zero_grads();
        grads.accumulate(&g, &bound);
        let mut all = grads.data;
        all.push(g.grad(xv).unwrap().to_vec());
        (value, all)
    };

    let mut inputs = store.tensors().to_vec();
    inputs.push(x.clone());
    let (_, analytic) = eval(store.tensors(), &x, true);
    let n = store.len();
    let r = finite_difference_check(
        |p| eval(&p[..n], &p[n], false).0,
        &inputs,
        &analytic,
        H,
        1e-4,
    );
    assert!(r.passed, "{r:?}");
}

#[test]
fn replay_is_bit_identical() {
    let (store, p) = block_fixture(13);
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let x = random(&[4, 4], &mut rng);
    let run = || {
        let mut g = Graph::new();
        let bound = store.bind(&mut g);
        let xv = g.param(&x);
        let mut drng = ChaCha8Rng::seed_from_u64(15);
        let out = causal_self_attention_block(&mut g, &bound, &p, xv, 2, Some((0.2, &mut drng)))
            .unwrap()
            .output;
        let l = g.sum(out).unwrap();
        g.backward(l).unwrap();
        let mut grads = store.zero_grads();
        grads.accumulate(&g, &bound);
        grads
    };
    assert_eq!(run(), run());
}

#[test]
fn softmax_rows_sum_to_one_on_random_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    for _ in 0..50 {
        let x = Tensor::new(
            vec![3, 6],
            (0..18).map(|_| rng.random_range(-50.0..50.0)).collect(),
        )
        .unwrap();
        let mut g = Graph::new();
        let xv = g.param(&x);
        let y = g.softmax_rows(xv, rng.random_range(0.1..10.0)).unwrap();
        for r in 0..3 {
            let row = g.value(y).row(r);
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }
}

#[test]
fn backward_requires_a_scalar() {
    let x = Tensor::zeros(&[2]);
    let mut g = Graph::new();
    let xv = g.param(&x);
    assert!(g.backward(xv).is_err());
}
