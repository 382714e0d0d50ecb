//! Dense tensors and a reverse-mode differentiation tape.

mod dense;
mod gradcheck;
mod tape;

pub use dense::Tensor;
pub use gradcheck::{grad_check, relative_error, GradCheckReport};
pub use tape::{sigmoid, Activation, BinaryOp, Mode, Tape, Var};

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn triple_loop(a: &Tensor, b: &Tensor) -> Vec<f64> {
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a.data()[i * k + p] * b.data()[p * n + j];
                }
                out[i * n + j] = s;
            }
        }
        out
    }

    #[test]
    fn matmul_examples() {
        let mut t = Tape::new();
        let id = t.constant(Tensor::identity(2));
        let m = t.constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let p = t.matmul(id, m).unwrap();
        assert_eq!(t.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);

        let a = t.constant(Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap());
        let b = t.constant(Tensor::matrix(2, 1, vec![3.0, 4.0]).unwrap());
        let p = t.matmul(a, b).unwrap();
        assert_eq!(t.value(p).data(), &[11.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (x, y) = (random(&mut rng, &[3, 4]), random(&mut rng, &[4, 2]));
        let oracle = triple_loop(&x, &y);
        let (xv, yv) = (t.constant(x), t.constant(y));
        let p = t.matmul(xv, yv).unwrap();
        for (got, want) in t.value(p).data().iter().zip(&oracle) {
            assert!((got - want).abs() <= 1e-12 * want.abs().max(1.0));
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(&[2, 3]));
        let b = t.constant(Tensor::zeros(&[2, 3]));
        let msg = t.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3] vs [2, 3]"), "{msg}");
    }

    #[test]
    fn elementwise_examples() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let z = t.constant(Tensor::zeros(&[3]));
        let p = t.mul(a, z).unwrap();
        assert_eq!(t.value(p).data(), &[0.0, 0.0, 0.0]);
        let s = t.add(a, z).unwrap();
        assert_eq!(t.value(s), t.value(a));
        let x = t.constant(Tensor::vector(vec![2.0, 3.0]));
        let y = t.constant(Tensor::vector(vec![4.0, 5.0]));
        let p = t.mul(x, y).unwrap();
        assert_eq!(t.value(p).data(), &[8.0, 15.0]);
        assert!(matches!(t.add(a, x), Err(crate::Error::Shape { .. })));
        let two = t.constant(Tensor::scalar(2.0));
        let p = t.mul(two, a).unwrap();
        assert_eq!(t.value(p).data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn activation_examples() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![0.0, -100.0]));
        let s = t.sigmoid(x);
        let th = t.tanh(x);
        assert_eq!(t.value(s).data()[0], 0.5);
        assert_eq!(t.value(th).data()[0], 0.0);
        let low = t.value(s).data()[1];
        assert!((0.0..=1e-40).contains(&low) && !low.is_nan());
    }

    #[test]
    fn masked_softmax_examples() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![0.7; 3]));
        let y = t.masked_softmax(x, &[true; 3]).unwrap();
        for v in t.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = t.constant(Tensor::vector(vec![5.0, 1.0, 1.0]));
        let y = t.masked_softmax(x, &[true, false, false]).unwrap();
        assert_eq!(t.value(y).data(), &[1.0, 0.0, 0.0]);
        assert!(matches!(
            t.masked_softmax(x, &[false; 3]),
            Err(crate::Error::DegenerateInput { .. })
        ));

        // two-pass oracle: exp of raw logits, then normalize
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let logits = random(&mut rng, &[7]);
        let e: Vec<f64> = logits.data().iter().map(|v| v.exp()).collect();
        let z: f64 = e.iter().sum();
        let x = t.constant(logits);
        let y = t.masked_softmax(x, &[true; 7]).unwrap();
        for (got, want) in t.value(y).data().iter().zip(e.iter().map(|v| v / z)) {
            assert!((got - want).abs() <= 1e-12);
        }
    }

    #[test]
    fn concat_examples() {
        let mut t = Tape::new();
        let a = t.param(Tensor::vector(vec![1.0, 2.0]));
        let b = t.param(Tensor::vector(vec![3.0]));
        let c = t.concat(a, b, 0).unwrap();
        assert_eq!(t.value(c).data(), &[1.0, 2.0, 3.0]);
        let e = t.constant(Tensor::vector(vec![]));
        let ce = t.concat(a, e, 0).unwrap();
        assert_eq!(t.value(ce), t.value(a));
        let s = t.sum_components(c);
        t.backward(s).unwrap();
        assert_eq!(t.grad(a).unwrap().data(), &[1.0, 1.0]);
        assert_eq!(t.grad(b).unwrap().data(), &[1.0]);

        let m = t.constant(Tensor::zeros(&[2, 3]));
        let n = t.constant(Tensor::zeros(&[3, 3]));
        assert!(t.concat(m, n, 1).is_err());
        assert!(t.concat(m, n, 0).is_ok());
    }

    #[test]
    fn sum_components_examples() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let s = t.sum_components(x);
        assert_eq!(t.value(s).item(), Some(6.0));
        let z = t.constant(Tensor::zeros(&[5]));
        let s = t.sum_components(z);
        assert_eq!(t.value(s).item(), Some(0.0));
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let r = random(&mut rng, &[9]);
        let mut fold = 0.0;
        for v in r.data() {
            fold += v;
        }
        let x = t.constant(r);
        let s = t.sum_components(x);
        assert_eq!(t.value(s).item().unwrap().to_bits(), fold.to_bits());
    }

    #[test]
    fn dropout_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut t = Tape::new();
        let x = t.constant(random(&mut rng, &[50]));
        let e = t.dropout(x, 0.7, Mode::Eval, &mut rng).unwrap();
        assert_eq!(t.value(e), t.value(x));
        let z = t.dropout(x, 0.0, Mode::Train, &mut rng).unwrap();
        assert_eq!(t.value(z), t.value(x));
        assert!(t.dropout(x, 1.0, Mode::Train, &mut rng).is_err());
        assert!(t.dropout(x, -0.1, Mode::Eval, &mut rng).is_err());

        let ones = t.constant(Tensor::ones(&[100_000]));
        let d = t.dropout(ones, 0.5, Mode::Train, &mut rng).unwrap();
        let mean = t.value(d).data().iter().sum::<f64>() / 100_000.0;
        assert!((0.98..=1.02).contains(&mean), "mean {mean}");
    }

    #[test]
    fn nll_examples() {
        let mut t = Tape::new();
        let u = t.constant(Tensor::vector(vec![0.3; 4]));
        for target in 0..4 {
            let l = t.nll_loss(u, &[true; 4], &[target]).unwrap();
            assert!((t.value(l).item().unwrap() - 4f64.ln()).abs() < 1e-15);
        }
        let sharp = t.constant(Tensor::vector(vec![100.0, 0.0, 0.0, 0.0]));
        let l = t.nll_loss(sharp, &[true; 4], &[0]).unwrap();
        assert!(t.value(l).item().unwrap() < 1e-40);

        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let logits = t.constant(random(&mut rng, &[6]));
        let mask = [true, true, false, true, true, true];
        let p = t.masked_softmax(logits, &mask).unwrap();
        let oracle = -t.value(p).data()[4].ln();
        let l = t.nll_loss(logits, &mask, &[4]).unwrap();
        assert!((t.value(l).item().unwrap() - oracle).abs() <= 1e-12);

        assert!(matches!(
            t.nll_loss(logits, &mask, &[2]),
            Err(crate::Error::InvalidTarget { .. })
        ));
        assert!(matches!(
            t.nll_loss(logits, &mask, &[6]),
            Err(crate::Error::InvalidTarget { .. })
        ));
    }

    #[test]
    fn backward_examples() {
        let mut t = Tape::new();
        let x = t.param(Tensor::vector(vec![0.5, -1.0, 2.0]));
        let s = t.sum_components(x);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);

        let mut t = Tape::new();
        let x = t.param(Tensor::vector(vec![1.0, 2.0]));
        let unused = t.param(Tensor::vector(vec![7.0]));
        let sq = t.mul(x, x).unwrap();
        let s = t.sum_components(sq);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[2.0, 4.0]);
        assert_eq!(t.grad(unused).unwrap().data(), &[0.0]);

        assert!(matches!(t.backward(sq), Err(crate::Error::Contract(_))));
    }

    #[test]
    fn grad_check_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&mut rng, &[5]);
        let r = grad_check(|t, v| Ok(t.sum_components(v[0])), std::slice::from_ref(&x), 1e-5, 1e-10).unwrap();
        assert!(r.passed(), "{r:?}");

        let r = grad_check(
            |t, v| {
                let p = t.masked_softmax(v[0], &[true, true, false, true, true])?;
                let w = t.constant(Tensor::vector(vec![1.0, -2.0, 0.5, 3.0, 0.25]));
                let q = t.mul(p, w)?;
                let s = t.sum_components(q);
                let l = t.nll_loss(v[0], &[true, true, false, true, true], &[3])?;
                t.add(s, l)
            },
            &[x],
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn grad_check_rejects_nondeterminism() {
        use std::cell::RefCell;
        let rng = RefCell::new(ChaCha8Rng::seed_from_u64(2));
        let x = Tensor::ones(&[20]);
        let err = grad_check(
            |t, v| {
                let d = t.dropout(v[0], 0.5, Mode::Train, &mut *rng.borrow_mut())?;
                Ok(t.sum_components(d))
            },
            &[x],
            1e-5,
            1e-6,
        )
        .unwrap_err();
        assert!(matches!(err, crate::Error::Contract(_)));
    }

    type LossFn = Box<dyn Fn(&mut Tape, &[Var]) -> crate::Result<Var>>;

    /// One function per primitive with a backward rule; each reduces to a
    /// scalar through a fixed random weighting so every output component
    /// matters.
    fn primitive_losses() -> Vec<(&'static str, Vec<Vec<usize>>, LossFn)> {
        fn weigh(t: &mut Tape, v: Var) -> crate::Result<Var> {
            let n = t.value(v).numel();
            let w: Vec<f64> = (0..n).map(|i| 0.3 + 0.17 * i as f64 - 0.05 * (i * i % 7) as f64).collect();
            let w = t.constant(Tensor::new(t.shape(v).to_vec(), w)?);
            let p = t.mul(v, w)?;
            Ok(t.sum_components(p))
        }
        vec![
            ("matmul", vec![vec![3, 4], vec![4, 2]], Box::new(|t, v| { let o = t.matmul(v[0], v[1])?; weigh(t, o) })),
            ("matmul_nt", vec![vec![3, 4], vec![2, 4]], Box::new(|t, v| { let o = t.matmul_nt(v[0], v[1])?; weigh(t, o) })),
            ("add", vec![vec![2, 3], vec![2, 3]], Box::new(|t, v| { let o = t.add(v[0], v[1])?; weigh(t, o) })),
            ("sub", vec![vec![2, 3], vec![2, 3]], Box::new(|t, v| { let o = t.sub(v[0], v[1])?; weigh(t, o) })),
            ("mul", vec![vec![2, 3], vec![2, 3]], Box::new(|t, v| { let o = t.mul(v[0], v[1])?; weigh(t, o) })),
            ("scalar_mul", vec![vec![], vec![2, 3]], Box::new(|t, v| { let o = t.mul(v[0], v[1])?; weigh(t, o) })),
            ("scale_shift", vec![vec![4]], Box::new(|t, v| { let o = t.scale(v[0], -1.5); let o = t.shift(o, 0.25); weigh(t, o) })),
            ("add_bias", vec![vec![3, 2], vec![2]], Box::new(|t, v| { let o = t.add_bias(v[0], v[1])?; weigh(t, o) })),
            ("sigmoid", vec![vec![5]], Box::new(|t, v| { let o = t.sigmoid(v[0]); weigh(t, o) })),
            ("tanh", vec![vec![5]], Box::new(|t, v| { let o = t.tanh(v[0]); weigh(t, o) })),
            ("concat", vec![vec![2, 3], vec![2, 1]], Box::new(|t, v| { let o = t.concat(v[0], v[1], 1)?; weigh(t, o) })),
            ("sum_last_axis", vec![vec![3, 4]], Box::new(|t, v| { let o = t.sum_last_axis(v[0]); weigh(t, o) })),
            ("masked_softmax", vec![vec![2, 4]], Box::new(|t, v| { let o = t.masked_softmax(v[0], &[true, false, true, true, true, true, false, true])?; weigh(t, o) })),
            ("nll_loss", vec![vec![2, 4]], Box::new(|t, v| t.nll_loss(v[0], &[true, true, false, true, true, true, true, false], &[1, 2]))),
            ("mul_const", vec![vec![4]], Box::new(|t, v| { let o = t.mul_const(v[0], vec![0.0, 2.0, 2.0, 0.0])?; weigh(t, o) })),
            ("gather_rows", vec![vec![4, 3]], Box::new(|t, v| { let o = t.gather_rows(v[0], &[2, 0, 2])?; weigh(t, o) })),
            ("select_rows", vec![vec![3, 2], vec![3, 2]], Box::new(|t, v| { let o = t.select_rows(&[true, false, true], v[0], v[1])?; weigh(t, o) })),
            ("weighted_sum", vec![vec![2, 3], vec![2, 4], vec![2, 4], vec![2, 4]], Box::new(|t, v| { let o = t.weighted_sum(v[0], &v[1..])?; weigh(t, o) })),
        ]
    }

    #[test]
    fn every_primitive_passes_grad_check_at_ten_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for (name, shapes, f) in primitive_losses() {
            for _ in 0..10 {
                let inputs: Vec<Tensor> = shapes.iter().map(|s| random(&mut rng, s)).collect();
                let r = grad_check(&f, &inputs, 1e-5, 1e-5).unwrap();
                assert!(r.passed(), "{name}: {r:?}");
            }
        }
    }

    #[test]
    fn fan_out_accumulates() {
        let mut t = Tape::new();
        let x = t.param(Tensor::vector(vec![3.0]));
        let a = t.add(x, x).unwrap();
        let b = t.mul(a, x).unwrap(); // 2x²
        let s = t.sum_components(b);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[12.0]);
    }

    #[test]
    fn forward_is_bit_reproducible() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (a, b) = (random(&mut rng, &[4, 5]), random(&mut rng, &[5, 3]));
        let run = || {
            let mut t = Tape::new();
            let (x, y) = (t.constant(a.clone()), t.constant(b.clone()));
            let p = t.matmul(x, y).unwrap();
            let q = t.tanh(p);
            let d = t.dropout(q, 0.3, Mode::Eval, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
            t.value(d).clone()
        };
        let (r1, r2) = (run(), run());
        assert!(r1.data().iter().zip(r2.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    proptest! {
        #[test]
        fn softmax_is_a_distribution(
            logits in prop::collection::vec(-50.0f64..50.0, 1..16),
            mask_bits in prop::collection::vec(any::<bool>(), 16),
        ) {
            let n = logits.len();
            let mut mask: Vec<bool> = mask_bits[..n].to_vec();
            mask[0] = true;
            let mut t = Tape::new();
            let x = t.constant(Tensor::vector(logits));
            let y = t.masked_softmax(x, &mask).unwrap();
            let out = t.value(y).data();
            let sum: f64 = out.iter().sum();
            prop_assert!((sum - 1.0).abs() <= 1e-12);
            for (v, m) in out.iter().zip(&mask) {
                prop_assert!(*v >= 0.0);
                if !m { prop_assert_eq!(*v, 0.0); }
            }
        }

        #[test]
        fn softmax_shift_invariant(
            logits in prop::collection::vec(-20.0f64..20.0, 1..12),
            c in -100.0f64..100.0,
        ) {
            let n = logits.len();
            let mask = vec![true; n];
            let mut t = Tape::new();
            let x = t.constant(Tensor::vector(logits));
            let xs = t.shift(x, c);
            let y0 = t.masked_softmax(x, &mask).unwrap();
            let y1 = t.masked_softmax(xs, &mask).unwrap();
            for (a, b) in t.value(y0).data().iter().zip(t.value(y1).data()) {
                prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(b.abs()));
            }
        }

        #[test]
        fn dropout_rate_zero_matches_eval(xs in prop::collection::vec(-5.0f64..5.0, 1..32), seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut t = Tape::new();
            let x = t.constant(Tensor::vector(xs));
            let a = t.dropout(x, 0.0, Mode::Train, &mut rng).unwrap();
            let b = t.dropout(x, 0.0, Mode::Eval, &mut rng).unwrap();
            prop_assert_eq!(t.value(a), t.value(b));
        }
    }
}
