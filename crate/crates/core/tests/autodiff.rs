use dga::autodiff::{finite_diff_directional, finite_diff_entry, finite_diff_grad, relative_error, Graph, RngState, Tensor, Var};
use dga::Error;
use proptest::prelude::*;

fn random(shape: &[usize], rng: &mut RngState) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal()).collect()).unwrap()
}

fn close(a: &[f32], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(b) {
        assert!((*x as f64 - y).abs() <= tol, "{x} vs {y}");
    }
}

/// Checks `grad` against central differences of `loss_of`: along its own
/// direction within 1e-2 relative, and entrywise up to f32 evaluation noise.
fn assert_fd(loss_of: impl Fn(&Tensor) -> f64, at: &Tensor, grad: &Tensor) {
    let norm = grad.data().iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
    let dir: Vec<f32> = grad.data().iter().map(|&v| (v as f64 / norm) as f32).collect();
    let numeric = finite_diff_directional(&loss_of, at, &dir, 1e-3).unwrap();
    assert!(relative_error(norm, numeric, 1e-8) < 1e-2, "directional {norm} vs {numeric}");
    let numeric = finite_diff_grad(&loss_of, at, 1e-3).unwrap();
    for (a, n) in grad.data().iter().zip(numeric.data()) {
        let err = relative_error(*a as f64, *n as f64, 1e-8);
        assert!(err < 1e-2 || (a - n).abs() < 2e-4, "analytic {a} numeric {n}");
    }
}

#[test]
fn linear_hand_values() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap(), false);
    let w = g.leaf(Tensor::from_rows(&[vec![1.0], vec![1.0]]).unwrap(), false);
    let b = g.leaf(Tensor::new(vec![1], vec![3.0]).unwrap(), false);
    let y = g.linear(x, w, b).unwrap();
    assert_eq!(g.value(y).data(), &[6.0]);

    let mut g = Graph::new();
    let x = g.leaf(Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap(), false);
    let w = g.leaf(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap(), false);
    let b = g.leaf(Tensor::zeros(&[2]), false);
    let y = g.linear(x, w, b).unwrap();
    assert_eq!(g.value(y).data(), &[1.0, 0.0]);
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = RngState::new(1);
    let (a, b) = (random(&[3, 4], &mut rng), random(&[4, 2], &mut rng));
    let mut oracle = vec![0.0f64; 6];
    for i in 0..3 {
        for j in 0..2 {
            for k in 0..4 {
                oracle[i * 2 + j] += a.data()[i * 4 + k] as f64 * b.data()[k * 2 + j] as f64;
            }
        }
    }
    let mut g = Graph::new();
    let (va, vb) = (g.leaf(a, false), g.leaf(b, false));
    let y = g.matmul(va, vb, false).unwrap();
    close(g.value(y).data(), &oracle, 1e-6);
}

#[test]
fn shape_mismatch_names_both_shapes() {
    let mut g = Graph::new();
    let a = g.leaf(Tensor::zeros(&[2, 3]), false);
    let b = g.leaf(Tensor::zeros(&[2, 3]), false);
    match g.matmul(a, b, false) {
        Err(Error::Shape { left, right, .. }) => {
            assert_eq!(left, vec![2, 3]);
            assert_eq!(right, vec![2, 3]);
        }
        other => panic!("expected shape error, got {other:?}"),
    }
}

#[test]
fn softmax_examples() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::from_rows(&[vec![0.0, 0.0], vec![1.0, 2.0]]).unwrap(), false);
    let s = g.softmax(x, 1).unwrap();
    assert_eq!(&g.value(s).data()[..2], &[0.5, 0.5]);

    let mut g = Graph::new();
    let x = g.leaf(Tensor::from_rows(&[vec![1.0, 2.0, 3.0]]).unwrap(), false);
    let s = g.softmax(x, 1).unwrap();
    let z: f64 = (1..=3).map(|i| (i as f64).exp()).sum();
    let oracle: Vec<f64> = (1..=3).map(|i| (i as f64).exp() / z).collect();
    close(g.value(s).data(), &oracle, 1e-6);
}

#[test]
fn layer_norm_examples() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::from_rows(&[vec![2.0; 4]]).unwrap(), false);
    let ones = g.leaf(Tensor::full(&[4], 1.0), false);
    let zeros = g.leaf(Tensor::zeros(&[4]), false);
    let y = g.layer_norm(x, ones, zeros, 1e-5).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));

    let beta = g.leaf(Tensor::new(vec![4], vec![0.5, -1.0, 2.0, 3.0]).unwrap(), false);
    let y = g.layer_norm(x, zeros, beta, 1e-5).unwrap();
    assert_eq!(g.value(y).data(), &[0.5, -1.0, 2.0, 3.0]);

    let mut rng = RngState::new(4);
    let row = random(&[1, 6], &mut rng);
    let mut g = Graph::new();
    let x = g.leaf(row.clone(), false);
    let ones = g.leaf(Tensor::full(&[6], 1.0), false);
    let zeros = g.leaf(Tensor::zeros(&[6]), false);
    let y = g.layer_norm(x, ones, zeros, 1e-5).unwrap();
    let d: Vec<f64> = row.data().iter().map(|&v| v as f64).collect();
    let mu = d.iter().sum::<f64>() / 6.0;
    let var = d.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / 6.0;
    let oracle: Vec<f64> = d.iter().map(|v| (v - mu) / (var + 1e-5).sqrt()).collect();
    close(g.value(y).data(), &oracle, 1e-6);
}

#[test]
fn dropout_examples() {
    let x = Tensor::full(&[200, 100], 1.0);
    let mut g = Graph::new();
    let v = g.leaf(x.clone(), false);
    let y = g.dropout(v, 0.0, &mut RngState::new(1)).unwrap();
    assert!(g.value(y).bit_eq(&x));

    let a = g.dropout(v, 0.5, &mut RngState::new(2)).unwrap();
    let b = g.dropout(v, 0.5, &mut RngState::new(2)).unwrap();
    assert!(g.value(a).bit_eq(g.value(b)));
    let mean = g.value(a).data().iter().map(|&v| v as f64).sum::<f64>() / 20_000.0;
    assert!((mean - 1.0).abs() < 0.05, "mean {mean}");

    assert!(matches!(g.dropout(v, 1.0, &mut RngState::new(1)), Err(Error::InvalidProbability(_))));
}

#[test]
fn cross_entropy_examples() {
    let v = 7;
    let mut g = Graph::new();
    let logits = g.leaf(Tensor::zeros(&[1, v]), false);
    let l = g.cross_entropy_logits(logits, &[Some(3)]).unwrap();
    assert!((g.value(l).item() as f64 - (v as f64).ln()).abs() < 1e-6);

    let mut row = vec![0.0; v];
    row[2] = 1000.0;
    let logits = g.leaf(Tensor::from_rows(&[row]).unwrap(), false);
    let l = g.cross_entropy_logits(logits, &[Some(2)]).unwrap();
    assert!(g.value(l).item().abs() < 1e-6);

    let rows = vec![vec![0.3, -1.2, 2.0], vec![5.0, 1.0, -3.0]];
    let logits = g.leaf(Tensor::from_rows(&rows).unwrap(), true);
    let l = g.cross_entropy_logits(logits, &[None, Some(1)]).unwrap();
    let r = &rows[1];
    let lse = r.iter().map(|&x| (x as f64).exp()).sum::<f64>().ln();
    assert!((g.value(l).item() as f64 - (lse - r[1] as f64)).abs() < 1e-6);
    let grads = g.backward(l).unwrap();
    assert!(grads.get(logits).unwrap().data()[..3].iter().all(|&x| x == 0.0));

    assert!(matches!(g.cross_entropy_logits(logits, &[None, None]), Err(Error::EmptyLoss)));
}

#[test]
fn backward_product_rule_and_contract() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::scalar(2.0), true);
    let y = g.leaf(Tensor::scalar(3.0), true);
    let f = g.mul(x, y).unwrap();
    let grads = g.backward(f).unwrap();
    assert_eq!(grads.get(x).unwrap().item(), 3.0);
    assert_eq!(grads.get(y).unwrap().item(), 2.0);

    let v = g.leaf(Tensor::zeros(&[2]), true);
    assert!(matches!(g.backward(v), Err(Error::Contract(_))));
}

#[test]
fn finite_differences_of_simple_functions() {
    let x = Tensor::scalar(3.0);
    let d = finite_diff_entry(|t| (t.item() as f64).powi(2), &x, 0, 1e-3).unwrap();
    assert!((d - 6.0).abs() < 1e-3);
    let x = Tensor::scalar(0.0);
    let d = finite_diff_entry(|t| (t.item() as f64).sin(), &x, 0, 1e-3).unwrap();
    assert!((d - 1.0).abs() < 1e-3);
}

fn mlp_loss(g: &mut Graph, x: Var, w1: Var, b1: Var, w2: Var, targets: &[Option<usize>]) -> Var {
    let h = g.linear(x, w1, b1).unwrap();
    let h = g.gelu(h);
    let y = g.matmul(h, w2, false).unwrap();
    g.cross_entropy_logits(y, targets).unwrap()
}

#[test]
fn two_layer_mlp_matches_finite_differences() {
    let mut rng = RngState::new(9);
    let x = random(&[3, 4], &mut rng);
    let small = |t: Tensor| Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| 0.5 * v).collect()).unwrap();
    let params = [
        small(random(&[4, 5], &mut rng)),
        small(random(&[5], &mut rng)),
        small(random(&[5, 3], &mut rng)),
    ];
    let targets = [Some(0), Some(2), None];
    let eval = |ps: &[Tensor]| {
        let mut g = Graph::new();
        let xv = g.leaf(x.clone(), false);
        let v: Vec<Var> = ps.iter().map(|p| g.leaf(p.clone(), true)).collect();
        let l = mlp_loss(&mut g, xv, v[0], v[1], v[2], &targets);
        let grads = g.backward(l).unwrap();
        (g.value(l).item() as f64, v.iter().map(|&p| grads.get(p).unwrap()).collect::<Vec<_>>())
    };
    let (_, grads) = eval(&params);
    for i in 0..3 {
        let f = |t: &Tensor| {
            let mut ps = params.clone();
            ps[i] = t.clone();
            eval(&ps).0
        };
        assert_fd(f, &params[i], &grads[i]);
    }
}

/// Each primitive's backward, checked through a random linear functional of its output.
#[test]
fn primitives_match_finite_differences() {
    type Op = fn(&mut Graph, Var) -> Var;
    let ops: Vec<(&str, &[usize], Op)> = vec![
        ("softmax", &[3, 4], |g, x| g.softmax(x, 1).unwrap()),
        ("gelu", &[3, 4], |g, x| g.gelu(x)),
        ("normalize_rows", &[3, 4], |g, x| g.normalize_rows(x).unwrap()),
        ("scale", &[3, 4], |g, x| g.scale(x, -1.7)),
        ("gather_rows", &[3, 4], |g, x| g.gather_rows(x, &[2, 0, 2]).unwrap()),
        ("mean_pool", &[2, 3, 4], |g, x| g.mean_pool(x, &[true, false, true, true, true, false]).unwrap()),
        ("layer_norm", &[3, 4], |g, x| {
            let gamma = g.constant(Tensor::new(vec![4], vec![1.0, 0.5, -2.0, 1.5]).unwrap());
            let beta = g.constant(Tensor::new(vec![4], vec![0.1, 0.2, 0.3, 0.4]).unwrap());
            g.layer_norm(x, gamma, beta, 1e-5).unwrap()
        }),
        ("dropout", &[3, 4], |g, x| g.dropout(x, 0.3, &mut RngState::new(5)).unwrap()),
    ];
    let mut rng = RngState::new(11);
    for (name, shape, op) in ops {
        let x0 = random(shape, &mut rng);
        let probe = {
            let mut g = Graph::new();
            let x = g.leaf(x0.clone(), false);
            let y = op(&mut g, x);
            random(g.shape(y), &mut RngState::new(13))
        };
        let run = |t: &Tensor| {
            let mut g = Graph::new();
            let x = g.leaf(t.clone(), true);
            let y = op(&mut g, x);
            let w = g.constant(probe.clone());
            let prod = g.mul(y, w).unwrap();
            let l = g.sum(prod);
            let grads = g.backward(l).unwrap();
            (g.value(l).item() as f64, grads.get(x).unwrap())
        };
        let (_, grad) = run(&x0);
        let numeric = finite_diff_grad(|t| run(t).0, &x0, 1e-3).unwrap();
        for (a, n) in grad.data().iter().zip(numeric.data()) {
            let err = relative_error(*a as f64, *n as f64, 1e-8);
            assert!(err < 1e-2 || (a - n).abs() < 2e-4, "{name}: analytic {a} numeric {n}");
        }
    }
}

#[test]
fn hooks_scale_upstream_gradients() {
    let mut rng = RngState::new(21);
    let x = random(&[2, 3], &mut rng);
    let w = random(&[3, 3], &mut rng);
    let run = |factor: Option<f32>| {
        let mut g = Graph::new();
        let xv = g.leaf(x.clone(), false);
        let wv = g.leaf(w.clone(), true);
        let h = g.matmul(xv, wv, false).unwrap();
        if let Some(f) = factor {
            g.attach_grad_scale(h, f).unwrap();
        }
        let s = g.gelu(h);
        let l = g.sum(s);
        let grads = g.backward(l).unwrap();
        (g.value(l).clone(), grads.get(wv).unwrap())
    };
    let (l0, g0) = run(None);
    let (l1, g1) = run(Some(1.0));
    let (lh, gh) = run(Some(0.5));
    let (lz, gz) = run(Some(0.0));
    assert!(l0.bit_eq(&l1) && l0.bit_eq(&lh) && l0.bit_eq(&lz));
    assert!(g0.bit_eq(&g1));
    for (a, b) in gh.data().iter().zip(g0.data()) {
        assert_eq!(*a, 0.5 * b);
    }
    assert!(gz.data().iter().all(|&v| v == 0.0));

    let mut g = Graph::new();
    let v = g.leaf(Tensor::scalar(1.0), true);
    assert!(g.attach_grad_scale(v, -1.0).is_err());
}

#[test]
fn identical_seeds_give_identical_gradients() {
    let run = || {
        let mut rng = RngState::new(3);
        let x = random(&[4, 4], &mut rng);
        let mut g = Graph::new();
        let xv = g.leaf(x, true);
        let d = g.dropout(xv, 0.2, &mut rng).unwrap();
        let s = g.softmax(d, 1).unwrap();
        let l = g.cross_entropy_logits(s, &[Some(0), Some(1), None, Some(3)]).unwrap();
        (g.value(l).clone(), g.backward(l).unwrap().get(xv).unwrap())
    };
    let (a, ga) = run();
    let (b, gb) = run();
    assert!(a.bit_eq(&b) && ga.bit_eq(&gb));
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(data in prop::collection::vec(-30.0f32..30.0, 12), shift in -50.0f32..50.0) {
        let t = Tensor::new(vec![3, 4], data.clone()).unwrap();
        let mut g = Graph::new();
        let x = g.leaf(t, false);
        let s = g.softmax(x, 1).unwrap();
        for r in 0..3 {
            let sum: f64 = g.value(s).row(r).iter().map(|&v| v as f64).sum();
            prop_assert!((sum - 1.0).abs() < 1e-6);
        }
        let shifted = Tensor::new(vec![3, 4], data.iter().map(|v| v + shift).collect()).unwrap();
        let xs = g.leaf(shifted, false);
        let ss = g.softmax(xs, 1).unwrap();
        for (a, b) in g.value(s).data().iter().zip(g.value(ss).data()) {
            prop_assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn hooks_never_change_forward_values(factor in 0.0f32..2.0, seed in 0u64..1000) {
        let mut rng = RngState::new(seed);
        let x = random(&[2, 5], &mut rng);
        let forward = |hook: bool| {
            let mut g = Graph::new();
            let v = g.leaf(x.clone(), true);
            let d = g.dropout(v, 0.3, &mut RngState::new(seed)).unwrap();
            if hook {
                g.attach_grad_scale(d, factor).unwrap();
            }
            let y = g.gelu(d);
            g.value(y).clone()
        };
        prop_assert!(forward(true).bit_eq(&forward(false)));
    }
}
