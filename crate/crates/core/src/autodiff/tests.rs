use super::*;
use crate::Error;
use super::suite::{op_suite, rand_tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn every_op_matches_finite_differences() {
    let checks = op_suite(20, 1e-5).unwrap();
    assert_eq!(checks.len(), 19);
    for c in &checks {
        assert_eq!(c.trials, 20, "{}", c.op);
        assert!(c.checked > 0, "{}: nothing checked", c.op);
        assert!(c.max_rel_error <= 1e-4, "{}: rel err {}", c.op, c.max_rel_error);
    }
}

#[test]
fn op_examples() {
    let mut g = Graph::<f32>::new();
    let z = g.input(Tensor::zeros(&[2, 3])).unwrap();
    let e = g.exp(z).unwrap();
    assert!(g.value(e).data().iter().all(|v| *v == 1.0));
    let s = g.sigmoid(z).unwrap();
    assert!(g.value(s).data().iter().all(|v| *v == 0.5));

    // 3x3 input 1..9, all-ones 2x2 kernel: sums of each 2x2 window.
    let x = g.input(Tensor::new(vec![1, 1, 3, 3], (1..=9).map(|v| v as f32).collect()).unwrap()).unwrap();
    let k = g.input(Tensor::full(&[1, 1, 2, 2], 1.0)).unwrap();
    let y = g.conv2d(x, k, None, 1, 0).unwrap();
    assert_eq!(g.shape(y), &[1, 1, 2, 2]);
    assert_eq!(g.value(y).data(), &[12.0, 16.0, 24.0, 28.0]);
}

#[test]
fn conv2d_padding_and_stride_geometry() {
    let mut g = Graph::<f64>::new();
    let x = g.input(Tensor::full(&[1, 1, 4, 4], 1.0)).unwrap();
    let k = g.input(Tensor::full(&[1, 1, 3, 3], 1.0)).unwrap();
    let y = g.conv2d(x, k, None, 2, 1).unwrap();
    assert_eq!(g.shape(y), &[1, 1, 2, 2]);
    // Top-left window sees a 2x2 corner of ones, the rest sees 3x3 minus border.
    assert_eq!(g.value(y).data(), &[4.0, 6.0, 6.0, 9.0]);
}

#[test]
fn shape_errors_name_the_op() {
    let mut g = Graph::<f64>::new();
    let a = g.input(Tensor::zeros(&[2, 3])).unwrap();
    let b = g.input(Tensor::zeros(&[3, 2])).unwrap();
    let err = g.add(a, b).unwrap_err();
    assert!(matches!(err, Error::Shape { op: "add", .. }), "{err}");
    let x = g.input(Tensor::zeros(&[1, 2, 4, 4])).unwrap();
    let w = g.input(Tensor::zeros(&[1, 3, 3, 3])).unwrap();
    assert!(matches!(g.conv2d(x, w, None, 1, 1), Err(Error::Shape { op: "conv2d", .. })));
    assert!(matches!(g.concat(&[x, a]), Err(Error::Shape { op: "concat", .. })));
    assert!(matches!(g.avg_pool2d(x, 3), Err(Error::Shape { op: "avg_pool2d", .. })));
}

#[test]
fn backward_requires_scalar() {
    let mut g = Graph::<f64>::new();
    let a = g.leaf(Tensor::zeros(&[2])).unwrap();
    assert!(matches!(g.backward(a, None), Err(Error::Contract(_))));
}

#[test]
fn mean_gradients() {
    let mut store = ParamStore::new();
    let id = store.add("p", Tensor::full(&[5], 0.8));
    store.zero_grads();
    let mut g = Graph::<f64>::new();
    let p = g.param(&store, id).unwrap();
    let l = g.mean(p).unwrap();
    g.backward(l, Some(&mut store)).unwrap();
    assert!(store.grad(id).unwrap().iter().all(|v| (*v - 0.2).abs() < 1e-15));

    store.zero_grads();
    let mut g = Graph::<f64>::new();
    let p = g.param(&store, id).unwrap();
    let sq = g.mul(p, p).unwrap();
    let l = g.mean(sq).unwrap();
    g.backward(l, Some(&mut store)).unwrap();
    assert!(store.grad(id).unwrap().iter().all(|v| (*v - 2.0 * 0.8 / 5.0).abs() < 1e-15));

    // A second backward without zeroing accumulates.
    g.backward(l, Some(&mut store)).unwrap();
    assert!(store.grad(id).unwrap().iter().all(|v| (*v - 4.0 * 0.8 / 5.0).abs() < 1e-15));
}

#[test]
fn linear_graph_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut store = ParamStore::new();
    let a = store.add("a", rand_tensor(&mut rng, &[3, 4], -1.0, 1.0));
    let b = store.add("b", rand_tensor(&mut rng, &[3, 4], -1.0, 1.0));
    let report = grad_check(
        &store,
        |g, st| {
            let (x, y) = (g.param(st, a)?, g.param(st, b)?);
            let c = g.scalar(3.0)?;
            let y3 = g.mul(y, c)?;
            let s = g.sub(x, y3)?;
            g.mean(s)
        },
        GradCheckConfig::default(),
    )
    .unwrap();
    assert!(report.max_rel_error <= 1e-10, "{report:?}");
    assert_eq!(report.checked, 24);
}

#[test]
fn relu_kink_entries_are_excluded() {
    let mut store = ParamStore::new();
    let id = store.add("p", Tensor::new(vec![3], vec![0.0, 1.0, -1.0]).unwrap());
    let report = grad_check(
        &store,
        |g, st| {
            let p = g.param(st, id)?;
            let r = g.relu(p)?;
            g.mean(r)
        },
        GradCheckConfig::default(),
    )
    .unwrap();
    assert_eq!(report.excluded, 1);
    assert_eq!(report.checked, 2);
    assert!(report.max_rel_error <= 1e-10);
}

#[test]
fn frozen_inputs_receive_no_gradient() {
    let mut store = ParamStore::new();
    let w = store.add("w", Tensor::full(&[1, 1, 1, 1], 2.0));
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::full(&[1, 1, 2, 2], 1.0)).unwrap();
    let wf = g.frozen(&store, w).unwrap();
    let y = g.conv2d(x, wf, None, 1, 0).unwrap();
    let l = g.mean(y).unwrap();
    store.zero_grads();
    g.backward(l, Some(&mut store)).unwrap();
    assert!(g.grad(wf).is_none());
    assert_eq!(store.grad(w).unwrap(), &[0.0]);
    assert_eq!(g.grad(x).unwrap(), &[0.5; 4]);
}

#[test]
fn forward_rejects_non_finite() {
    let mut g = Graph::<f32>::new();
    let x = g.input(Tensor::full(&[2], 200.0)).unwrap();
    assert!(matches!(g.exp(x), Err(Error::Contract(_))));
    let z = g.input(Tensor::zeros(&[2])).unwrap();
    assert!(g.ln(z).is_err());
}

#[test]
fn identical_runs_are_bit_identical() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let w = store.add("w", rand_tensor(&mut rng, &[4, 3, 3, 3], -1.0, 1.0).cast::<f32>());
        let x = rand_tensor(&mut rng, &[2, 3, 8, 8], 0.0, 1.0).cast::<f32>();
        store.zero_grads();
        let mut g = Graph::<f32>::new();
        let xv = g.input(x).unwrap();
        let wv = g.param(&store, w).unwrap();
        let y = g.conv2d(xv, wv, None, 2, 1).unwrap();
        let y = g.sigmoid(y).unwrap();
        let l = g.mean(y).unwrap();
        g.backward(l, Some(&mut store)).unwrap();
        (g.value(y).clone(), store.grad(w).unwrap().to_vec())
    };
    let (a, ga) = run();
    let (b, gb) = run();
    assert_eq!(a, b);
    assert_eq!(ga, gb);
}
