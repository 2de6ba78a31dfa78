use super::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Central-difference gradient of `f` at `x`, independent of the tape's
/// backward rules: it only ever evaluates forward values.
fn fd_grad(x: &[f64], h: f64, f: &dyn Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut g = vec![0.0; x.len()];
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        let orig = xp[i];
        xp[i] = orig + h;
        let up = f(&xp);
        xp[i] = orig - h;
        let dn = f(&xp);
        xp[i] = orig;
        g[i] = (up - dn) / (2.0 * h);
    }
    g
}

fn analytic_grad(x: &[f64], shape: &[usize], build: &dyn Fn(&mut Tape, Var) -> Var) -> (f64, Vec<f64>) {
    let mut t = Tape::new();
    let v = t.variable(shape.to_vec(), x.to_vec()).unwrap();
    let out = build(&mut t, v);
    let s = t.sum(out).unwrap();
    t.backward(s).unwrap();
    (t.item(s), t.grad(v).unwrap().to_vec())
}

fn assert_close_grads(a: &[f64], b: &[f64], rel: f64, abs: f64) {
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        let tol = abs.max(rel * x.abs().max(y.abs()));
        assert!((x - y).abs() <= tol, "component {i}: analytic {x} vs fd {y}");
    }
}

/// Randomized sweep: 20 points in [lo, hi], h = 1e-5, rel 1e-4, abs 1e-7.
fn sweep(shape: &[usize], lo: f64, hi: f64, build: &dyn Fn(&mut Tape, Var) -> Var) {
    let n: usize = shape.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..20 {
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
        let (_, ga) = analytic_grad(&x, shape, build);
        let f = |p: &[f64]| {
            let mut t = Tape::new();
            let v = t.constant(shape.to_vec(), p.to_vec()).unwrap();
            let out = build(&mut t, v);
            t.values(out).iter().sum::<f64>()
        };
        let gf = fd_grad(&x, 1e-5, &f);
        assert_close_grads(&ga, &gf, 1e-4, 1e-7);
    }
}

#[test]
fn matmul_examples() {
    let mut t = Tape::new();
    let a = t.constant(vec![2, 2], vec![1., 0., 0., 1.]).unwrap();
    let b = t.constant(vec![2, 1], vec![2., 3.]).unwrap();
    let c = t.matmul(a, b).unwrap();
    assert_eq!(t.values(c), &[2., 3.]);
    let a = t.constant(vec![1, 2], vec![1., 2.]).unwrap();
    let b = t.constant(vec![2, 1], vec![3., 4.]).unwrap();
    let c = t.matmul(a, b).unwrap();
    assert_eq!(t.values(c), &[11.]);
    assert!(matches!(t.matmul(a, a), Err(TensorError::Shape { .. })));
}

#[test]
fn matmul_gradient_both_operands() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let b: Vec<f64> = (0..12).map(|_| rng.random_range(-2.0..2.0)).collect();
    let bb = b.clone();
    sweep(&[3, 4], -2.0, 2.0, &move |t, a| {
        let bv = t.constant(vec![4, 3], bb.clone()).unwrap();
        t.matmul(a, bv).unwrap()
    });
    let a: Vec<f64> = (0..8).map(|_| rng.random_range(-2.0..2.0)).collect();
    sweep(&[4, 3], -2.0, 2.0, &move |t, b| {
        let av = t.constant(vec![2, 4], a.clone()).unwrap();
        let p = t.matmul(av, b).unwrap();
        t.square(p).unwrap()
    });
    // d sum(AB)/dA = 1 B^T: every row of the gradient equals the row sums of B
    let mut t = Tape::new();
    let av = t.variable(vec![2, 4], vec![0.5; 8]).unwrap();
    let bv = t.constant(vec![4, 3], b.clone()).unwrap();
    let p = t.matmul(av, bv).unwrap();
    let s = t.sum(p).unwrap();
    t.backward(s).unwrap();
    let g = t.grad(av).unwrap();
    for r in 0..2 {
        for c in 0..4 {
            let row_sum: f64 = b[c * 3..c * 3 + 3].iter().sum();
            assert!((g[r * 4 + c] - row_sum).abs() < 1e-12);
        }
    }
}

#[test]
fn elementwise_examples_and_domain() {
    let mut t = Tape::new();
    let a = t.constant(vec![2], vec![1., 2.]).unwrap();
    let b = t.constant(vec![2], vec![3., 4.]).unwrap();
    let c = t.add(a, b).unwrap();
    assert_eq!(t.values(c), &[4., 6.]);
    let z = t.constant(vec![1], vec![0.]).unwrap();
    let e = t.exp(z).unwrap();
    assert_eq!(t.values(e), &[1.]);
    assert!(matches!(t.log(z), Err(TensorError::Domain { .. })));
    let neg = t.constant(vec![1], vec![-1.]).unwrap();
    assert!(matches!(t.sqrt(neg), Err(TensorError::Domain { .. })));
    assert!(matches!(t.div(a, z), Err(TensorError::Domain { .. })));

    let mut t = Tape::new();
    let x = t.variable(vec![1], vec![2.0]).unwrap();
    let l = t.log(x).unwrap();
    t.backward(l).unwrap();
    let g = t.grad(x).unwrap()[0];
    let fd = fd_grad(&[2.0], 1e-5, &|p| p[0].ln())[0];
    assert!((g - 0.5).abs() < 1e-15);
    assert!((g - fd).abs() < 1e-8);
}

#[test]
fn elementwise_gradients() {
    let other: Vec<f64> = vec![0.7, -1.3, 1.9, 0.4, -0.2, 1.1];
    for op in [BinaryOp::Add, BinaryOp::Sub, BinaryOp::Mul] {
        let o = other.clone();
        sweep(&[2, 3], -2.0, 2.0, &move |t, x| {
            let c = t.constant(vec![2, 3], o.clone()).unwrap();
            let y = t.binary(op, x, c).unwrap();
            t.binary(op, c, y).unwrap()
        });
    }
    sweep(&[6], 0.5, 2.0, &|t, x| {
        let c = t.constant(vec![1], vec![1.7]).unwrap();
        let y = t.div(c, x).unwrap();
        t.div(y, c).unwrap()
    });
    // scalar broadcast on both sides
    sweep(&[1], -2.0, 2.0, &|t, s| {
        let v = t.constant(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        let y = t.mul(s, v).unwrap();
        t.mul(y, s).unwrap()
    });
    for op in [UnaryOp::Neg, UnaryOp::Exp, UnaryOp::Square] {
        sweep(&[5], -2.0, 2.0, &move |t, x| t.unary(op, x).unwrap());
    }
    for op in [UnaryOp::Log, UnaryOp::Sqrt] {
        sweep(&[5], 0.1, 2.0, &move |t, x| t.unary(op, x).unwrap());
    }
    sweep(&[4], -2.0, 2.0, &|t, x| {
        let y = t.add_scalar(x, 0.3);
        let y = t.mul_scalar(y, -1.5);
        let y = t.mul_const(y, vec![0.0, 1.25, 1.25, 2.0]).unwrap();
        t.square(y).unwrap()
    });
}

#[test]
fn activation_values() {
    assert_eq!(shifted_softplus(0.0), 0.0);
    assert_eq!(sigmoid(0.0), 0.5);
    assert!((tanhshrink(1.0) - (1.0 - 1f64.tanh())).abs() < 1e-15);
    assert!((tanhshrink(1.0) - 0.238406).abs() < 1e-6);
    assert_eq!(softplus(40.0), 40.0);
    assert_eq!(softplus(-40.0), (-40f64).exp());
    assert!(sigmoid(-800.0).is_finite() && sigmoid(800.0) == 1.0);
}

#[test]
fn activation_gradients() {
    for kind in [
        Activation::ShiftedSoftplus,
        Activation::Softplus,
        Activation::Sigmoid,
        Activation::Tanhshrink,
        Activation::Tanh,
    ] {
        sweep(&[6], -2.0, 2.0, &move |t, x| {
            let y = t.activation(kind, x);
            let c = t.constant(vec![6], vec![1., -2., 3., 0.5, -1., 2.]).unwrap();
            t.mul(y, c).unwrap()
        });
    }
}

#[test]
fn layer_norm_examples() {
    let mut t = Tape::new();
    let g = t.constant(vec![2], vec![1., 1.]).unwrap();
    let b = t.constant(vec![2], vec![0., 0.]).unwrap();
    let x = t.constant(vec![2, 2], vec![3., 3., 1., -1.]).unwrap();
    let y = t.layer_norm(x, g, b).unwrap();
    let v = t.values(y);
    assert_eq!(&v[..2], &[0., 0.]);
    let expect = 1.0 / (1.0f64 + LAYER_NORM_EPS).sqrt();
    assert!((v[2] - expect).abs() < 1e-15 && (v[3] + expect).abs() < 1e-15);
    assert!((v[2] - 1.0).abs() < 1e-5);
}

#[test]
fn layer_norm_gradients() {
    let gain = vec![0.5, 1.5, -1.0, 2.0];
    let bias = vec![0.1, 0.0, -0.3, 0.2];
    let w = vec![1.0, -2.0, 0.5, 3.0, 0.25, -1.0, 2.0, 0.7, -0.4, 1.2, 0.9, -1.1];
    sweep(&[3, 4], -2.0, 2.0, &|t, x| {
        let g = t.constant(vec![4], gain.clone()).unwrap();
        let b = t.constant(vec![4], bias.clone()).unwrap();
        let y = t.layer_norm(x, g, b).unwrap();
        let w = t.constant(vec![3, 4], w.clone()).unwrap();
        t.mul(y, w).unwrap()
    });
    // gradient with respect to gain and bias
    sweep(&[4], -2.0, 2.0, &|t, g| {
        let x = t.constant(vec![2, 4], vec![0.3, -1.0, 2.0, 0.1, 1.0, 1.5, -0.5, 0.0]).unwrap();
        let y = t.layer_norm(x, g, g).unwrap();
        t.square(y).unwrap()
    });
}

#[test]
fn reduction_examples() {
    let mut t = Tape::new();
    let x = t.variable(vec![2], vec![2., 4.]).unwrap();
    let m = t.mean(x).unwrap();
    assert_eq!(t.item(m), 3.0);
    t.backward(m).unwrap();
    assert_eq!(t.grad(x).unwrap(), &[0.5, 0.5]);
    let mat = t.constant(vec![3, 2], vec![1., 2., 3., 4., 5., 6.]).unwrap();
    let r = t.mean_rows(mat).unwrap();
    assert_eq!(t.shape(r), &[1, 2]);
    assert_eq!(t.values(r), &[3., 4.]);
    let empty = t.constant(vec![0], vec![]).unwrap();
    assert!(matches!(t.mean(empty), Err(TensorError::Empty(_))));
    sweep(&[3, 2], -2.0, 2.0, &|t, x| {
        let a = t.mean_rows(x).unwrap();
        let b = t.reduce(Reduction::MeanCols, x).unwrap();
        let a = t.square(a).unwrap();
        let b = t.square(b).unwrap();
        let sa = t.sum(a).unwrap();
        let sb = t.mean(b).unwrap();
        t.add(sa, sb).unwrap()
    });
}

#[test]
fn cosine_examples() {
    let mut t = Tape::new();
    let a = t.constant(vec![2], vec![1., 0.]).unwrap();
    let b = t.constant(vec![2], vec![0., 1.]).unwrap();
    let c = t.constant(vec![2], vec![1., 1.]).unwrap();
    let z = t.constant(vec![2], vec![0., 0.]).unwrap();
    let s = t.cosine_similarity(a, a).unwrap();
    assert_eq!(t.item(s), 1.0);
    let s = t.cosine_similarity(a, b).unwrap();
    assert_eq!(t.item(s), 0.0);
    let s = t.cosine_similarity(a, c).unwrap();
    assert!((t.item(s) - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
    assert!(matches!(t.cosine_similarity(a, z), Err(TensorError::Domain { .. })));
    let other = vec![0.3, -1.2, 0.8, 1.5];
    sweep(&[4], -2.0, 2.0, &|t, x| {
        let o = t.constant(vec![4], other.clone()).unwrap();
        let c1 = t.cosine_similarity(x, o).unwrap();
        let sq = t.square(x).unwrap();
        let c2 = t.cosine_similarity(sq, x).unwrap();
        t.add(c1, c2).unwrap()
    });
}

#[test]
fn detach_examples() {
    let mut t = Tape::new();
    let x = t.variable(vec![1], vec![3.0]).unwrap();
    let d = t.detach(x);
    assert_eq!(t.values(d), t.values(x));
    let y = t.mul(x, d).unwrap();
    t.backward(y).unwrap();
    assert_eq!(t.grad(x).unwrap(), &[3.0]);

    let mut t = Tape::new();
    let x = t.variable(vec![1], vec![3.0]).unwrap();
    let d = t.detach(x);
    let y = t.square(d).unwrap();
    t.backward(y).unwrap();
    assert!(t.grad(x).is_none());
    assert!(t.grad(d).is_none());
}

#[test]
fn backward_contracts() {
    let mut t = Tape::new();
    let p = t.variable(vec![3], vec![1., 2., 3.]).unwrap();
    let q = t.variable(vec![2], vec![-1., 5.]).unwrap();
    let sp = t.sum(p).unwrap();
    let sq = t.sum(q).unwrap();
    let l = t.add(sp, sq).unwrap();
    t.backward(l).unwrap();
    assert_eq!(t.grad(p).unwrap(), &[1., 1., 1.]);
    assert_eq!(t.grad(q).unwrap(), &[1., 1.]);
    t.backward(l).unwrap();
    assert_eq!(t.grad(p).unwrap(), &[2., 2., 2.]);
    t.zero_grad();
    assert!(t.grad(p).is_none());
    assert!(matches!(t.backward(p), Err(TensorError::Contract(_))));
}

#[test]
fn gather_scatter_norm_clamp_gradients() {
    sweep(&[3, 2], -2.0, 2.0, &|t, x| {
        let g = t.gather_rows(x, &[2, 0, 0, 1]).unwrap();
        let s = t.scatter_add_rows(g, &[1, 1, 0, 2], 3).unwrap();
        let s = t.square(s).unwrap();
        let n = t.norm(x);
        let r = t.reshape(s, vec![6]).unwrap();
        let r = t.sum(r).unwrap();
        t.add(r, n).unwrap()
    });
    sweep(&[5], -2.0, 2.0, &|t, x| {
        let c = t.clamp(x, -1.0, 1.0);
        t.square(c).unwrap()
    });
    let mut t = Tape::new();
    let z = t.variable(vec![2], vec![0., 0.]).unwrap();
    let n = t.norm(z);
    assert_eq!(t.item(n), 0.0);
    t.backward(n).unwrap();
    assert_eq!(t.grad(z).unwrap(), &[0., 0.]);
}

#[test]
fn backward_is_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let vals: Vec<f64> = (0..12).map(|_| rng.random_range(-2.0..2.0)).collect();
        let mut t = Tape::new();
        let x = t.variable(vec![3, 4], vals.clone()).unwrap();
        let w = t.variable(vec![4, 2], vals[..8].to_vec()).unwrap();
        let y = t.matmul(x, w).unwrap();
        let y = t.activation(Activation::ShiftedSoftplus, y);
        let m = t.mean_rows(y).unwrap();
        let l = t.norm(m);
        t.backward(l).unwrap();
        (t.grad(x).unwrap().to_vec(), t.grad(w).unwrap().to_vec())
    };
    let (a, b) = (run(), run());
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a.0), bits(&b.0));
    assert_eq!(bits(&a.1), bits(&b.1));
}

#[test]
fn param_leaves_are_shared_within_a_tape() {
    let mut store = ParamStore::new();
    let w = store.register("w", vec![2], vec![1.0, 2.0]).unwrap();
    assert!(store.register("w", vec![1], vec![0.0]).is_err());
    let mut t = Tape::new();
    let a = t.param(&store, w);
    let b = t.param(&store, w);
    assert_eq!(a, b);
    let y = t.mul(a, b).unwrap();
    let s = t.sum(y).unwrap();
    t.backward(s).unwrap();
    let g = t.param_grads(&store);
    assert_eq!(g.get(w), &[2.0, 4.0]);
}
