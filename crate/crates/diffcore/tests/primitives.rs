use diffcore::fdcheck::{central_gradient, max_relative_error};
use diffcore::{DiffError, Tape, Tensor, Var};
use proptest::prelude::*;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Gradient of `build` at `x` by the tape and by central differences.
fn check(x: &Tensor, build: impl Fn(&mut Tape, Var) -> Var) -> f64 {
    let mut tape = Tape::new();
    let v = tape.leaf(x.clone());
    let out = build(&mut tape, v);
    let ad = tape.backward(out, &[v]).unwrap().remove(0);
    let fd = central_gradient(
        |p| {
            let mut t = Tape::new();
            let v = t.leaf(p.clone());
            let o = build(&mut t, v);
            t.value(o).item()
        },
        x,
        1e-5,
    );
    max_relative_error(&ad, &fd)
}

#[test]
fn identity_matmul_returns_operand() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random(&[3, 3], &mut rng, -1.0, 1.0);
    let mut tape = Tape::new();
    let i = tape.constant(Tensor::eye(3));
    let av = tape.constant(a.clone());
    let out = tape.matmul(i, av).unwrap();
    assert_eq!(tape.value(out), &a);
}

#[test]
fn sum_of_concat_is_sum_of_parts() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::vector(vec![1.5, -2.0, 4.0]));
    let b = tape.constant(Tensor::vector(vec![0.25, 8.0]));
    let c = tape.concat(&[a, b], 0).unwrap();
    let s = tape.sum(c).unwrap();
    assert_eq!(tape.value(s).item(), 1.5 - 2.0 + 4.0 + 0.25 + 8.0);
}

#[test]
fn softmax_of_zeros_is_uniform() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::vector(vec![0.0; 3]));
    let s = tape.softmax(a, 0).unwrap();
    for v in tape.value(s).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn square_gradient_at_three_is_six() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::scalar(3.0));
    let y = tape.mul(x, x).unwrap();
    assert_eq!(tape.backward(y, &[x]).unwrap()[0].item(), 6.0);
}

#[test]
fn abs_subgradient_is_zero_at_ties() {
    let y = Tensor::vector(vec![0.3, -1.2, 2.0, 0.0]);
    let mut tape = Tape::new();
    let x = tape.leaf(y.clone());
    let yv = tape.constant(y.clone());
    let d = tape.sub(x, yv).unwrap();
    let a = tape.abs(d).unwrap();
    let m = tape.mean(a).unwrap();
    let g = tape.backward(m, &[x]).unwrap().remove(0);
    assert!(g.data().iter().all(|&v| v == 0.0));

    // Away from ties the sign convention agrees with finite differences.
    let shifted = Tensor::vector(vec![0.5, -1.5, 2.25, -0.1]);
    let err = check(&shifted, |t, v| {
        let yv = t.constant(y.clone());
        let d = t.sub(v, yv).unwrap();
        let a = t.abs(d).unwrap();
        t.mean(a).unwrap()
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn acos_is_clamped_not_an_error() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::vector(vec![1.5, -3.0, 1.0]));
    let y = tape.acos(x).unwrap();
    let v = tape.value(y).data().to_vec();
    assert!((v[0] - (1.0 - diffcore::ACOS_EPS).acos()).abs() < 1e-15);
    assert!((v[1] - (-1.0 + diffcore::ACOS_EPS).acos()).abs() < 1e-15);
    let s = tape.sum(y).unwrap();
    let g = tape.backward(s, &[x]).unwrap().remove(0);
    assert!(g.is_finite());
}

#[test]
fn unused_target_gets_zero_gradient() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
    let unused = tape.leaf(Tensor::zeros(&[2, 3]));
    let s = tape.sum(x).unwrap();
    let g = tape.backward(s, &[unused]).unwrap();
    assert_eq!(g[0], Tensor::zeros(&[2, 3]));
}

#[test]
fn foreign_target_is_rejected() {
    let mut other = Tape::new();
    let foreign = other.leaf(Tensor::scalar(1.0));
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::scalar(2.0));
    let y = tape.square(x).unwrap();
    assert_eq!(tape.backward(y, &[foreign]).unwrap_err(), DiffError::NotOnTape);
}

#[test]
fn shape_mismatch_is_reported() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[3, 2]));
    assert!(matches!(tape.add(a, b), Err(DiffError::Shape(_))));
    assert!(matches!(tape.matmul(a, a), Err(DiffError::Shape(_))));
}

#[test]
fn non_finite_results_are_detected() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::vector(vec![-1.0]));
    assert_eq!(tape.sqrt(a).unwrap_err(), DiffError::NonFinite("sqrt"));
}

#[test]
fn every_primitive_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..20 {
        let x = random(&[3, 4], &mut rng, -1.0, 1.0);
        let pos = random(&[3, 4], &mut rng, 0.5, 2.0);
        let w = random(&[4, 5], &mut rng, -1.0, 1.0);
        let r9 = random(&[3, 9], &mut rng, -1.0, 1.0);
        let checks: Vec<(&str, f64)> = vec![
            (
                "elementwise",
                check(&x, |t, v| {
                    let c = t.constant(pos.clone());
                    let a = t.mul(v, c).unwrap();
                    let b = t.div(a, c).unwrap();
                    let d = t.sub(b, c).unwrap();
                    let e = t.add(d, v).unwrap();
                    let f = t.mul(e, e).unwrap();
                    t.sum(f).unwrap()
                }),
            ),
            (
                "scalar broadcast",
                check(&x, |t, v| {
                    let s = t.slice(v, 1, 0, 1).unwrap();
                    let s = t.slice(s, 0, 0, 1).unwrap();
                    let s = t.reshape(s, &[]).unwrap();
                    let a = t.mul(v, s).unwrap();
                    let three = t.constant(Tensor::scalar(3.0));
                    let b = t.div(s, three).unwrap();
                    let c = t.sub(a, b).unwrap();
                    let d = t.square(c).unwrap();
                    t.sum(d).unwrap()
                }),
            ),
            (
                "unary",
                check(&x, |t, v| {
                    let a = t.tanh(v).unwrap();
                    let b = t.sin(a).unwrap();
                    let c = t.cos(v).unwrap();
                    let d = t.exp(c).unwrap();
                    let e = t.silu(v).unwrap();
                    let f = t.sigmoid(e).unwrap();
                    let g = t.add(b, d).unwrap();
                    let h = t.mul(g, f).unwrap();
                    let sq = t.square(v).unwrap();
                    let sq = t.affine(sq, 1.0, 0.5).unwrap();
                    let r = t.sqrt(sq).unwrap();
                    let l = t.log(r).unwrap();
                    let p = t.powf(r, 1.5).unwrap();
                    let k = t.add(h, l).unwrap();
                    let k = t.add(k, p).unwrap();
                    t.mean(k).unwrap()
                }),
            ),
            (
                "acos",
                check(&x.map(|v| 0.9 * v), |t, v| {
                    let a = t.acos(v).unwrap();
                    t.sum(a).unwrap()
                }),
            ),
            (
                "matmul/transpose",
                check(&x, |t, v| {
                    let wv = t.constant(w.clone());
                    let a = t.matmul(v, wv).unwrap();
                    let at = t.transpose(a).unwrap();
                    let b = t.matmul(at, v).unwrap();
                    let c = t.tanh(b).unwrap();
                    t.sum(c).unwrap()
                }),
            ),
            (
                "layout",
                check(&x, |t, v| {
                    let a = t.slice(v, 1, 1, 2).unwrap();
                    let b = t.gather(v, 0, &[2, 0, 2]).unwrap();
                    let r = t.reshape(b, &[4, 3]).unwrap();
                    let r = t.transpose(r).unwrap();
                    let c = t.concat(&[a, r], 1).unwrap();
                    let d = t.sum_axis(c, 0).unwrap();
                    let e = t.square(d).unwrap();
                    t.sum(e).unwrap()
                }),
            ),
            (
                "extremum",
                check(&x, |t, v| {
                    let s = t.square(v).unwrap();
                    let a = t.max(s).unwrap();
                    let b = t.min(v).unwrap();
                    t.add(a, b).unwrap()
                }),
            ),
            (
                "layer_norm",
                check(&x, |t, v| {
                    let c = t.constant(w.clone());
                    let n = t.layer_norm(v, 1e-5).unwrap();
                    let m = t.matmul(n, c).unwrap();
                    let s = t.sin(m).unwrap();
                    t.sum(s).unwrap()
                }),
            ),
            (
                "softmax",
                check(&x, |t, v| {
                    let c = t.constant(pos.clone());
                    let s0 = t.softmax(v, 0).unwrap();
                    let s1 = t.softmax(v, 1).unwrap();
                    let a = t.mul(s0, c).unwrap();
                    let b = t.mul(s1, s1).unwrap();
                    let d = t.add(a, b).unwrap();
                    t.sum(d).unwrap()
                }),
            ),
            (
                "bmm3/bmv3",
                check(&r9, |t, v| {
                    let other = t.constant(r9.map(|q| q * 0.5 + 0.1));
                    let p = t.bmm3(v, other).unwrap();
                    let q = t.bmm3(other, p).unwrap();
                    let vec3 = t.slice(v, 1, 2, 3).unwrap();
                    let m = t.bmv3(q, vec3).unwrap();
                    let s = t.square(m).unwrap();
                    t.sum(s).unwrap()
                }),
            ),
        ];
        for (name, err) in checks {
            assert!(err <= 1e-4, "{name}: relative error {err}");
        }
    }
}

#[test]
fn forward_and_backward_are_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let x = random(&[4, 4], &mut rng, -1.0, 1.0);
        let mut tape = Tape::new();
        let v = tape.leaf(x);
        let m = tape.matmul(v, v).unwrap();
        let s = tape.softmax(m, 1).unwrap();
        let l = tape.sum(s).unwrap();
        let l2 = tape.square(l).unwrap();
        let g = tape.backward(l2, &[v]).unwrap().remove(0);
        (tape.value(l2).clone(), g)
    };
    let (a, ga) = run();
    let (b, gb) = run();
    assert_eq!(a.data()[0].to_bits(), b.data()[0].to_bits());
    assert!(ga.data().iter().zip(gb.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
}

proptest! {
    #[test]
    fn backward_is_linear_in_the_loss(
        xs in proptest::collection::vec(-2.0f64..2.0, 6),
        a in -3.0f64..3.0,
        b in -3.0f64..3.0,
    ) {
        let x = Tensor::new(vec![2, 3], xs).unwrap();
        let grads = |wa: f64, wb: f64| {
            let mut t = Tape::new();
            let v = t.leaf(x.clone());
            let l1 = { let s = t.sin(v).unwrap(); t.sum(s).unwrap() };
            let l2 = { let s = t.square(v).unwrap(); let s = t.tanh(s).unwrap(); t.mean(s).unwrap() };
            let l1 = t.scale(l1, wa).unwrap();
            let l2 = t.scale(l2, wb).unwrap();
            let l = t.add(l1, l2).unwrap();
            t.backward(l, &[v]).unwrap().remove(0)
        };
        let combined = grads(a, b);
        let g1 = grads(1.0, 0.0);
        let g2 = grads(0.0, 1.0);
        for i in 0..6 {
            let expect = a * g1.data()[i] + b * g2.data()[i];
            prop_assert!((combined.data()[i] - expect).abs() <= 1e-12);
        }
    }
}
