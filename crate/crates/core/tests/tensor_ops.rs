use hrda_core::gradcheck::{grad_check, grad_check_many};
use hrda_core::ops::{self, Factor};
use hrda_core::{Graph, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn conv_is_linear_in_input(
        seed in 0u64..10_000,
        n in 1usize..3, cin in 1usize..4, cout in 1usize..4,
        h in 3usize..9, w in 3usize..9,
        k in prop::sample::select(vec![1usize, 3]),
        stride in 1usize..3,
        a in -3.0f64..3.0, b in -3.0f64..3.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&[n, cin, h, w], &mut rng);
        let y = random(&[n, cin, h, w], &mut rng);
        let wt = random(&[cout, cin, k, k], &mut rng);
        let bias = Tensor::zeros(&[cout]);
        let pad = k / 2;
        let conv = |t: &Tensor| ops::conv2d(t, &wt, &bias, stride, pad).unwrap().0;
        let mix = x.zip_map(&y, "mix", |p, q| a * p + b * q).unwrap();
        let lhs = conv(&mix);
        let rhs = conv(&x).zip_map(&conv(&y), "mix", |p, q| a * p + b * q).unwrap();
        prop_assert!(lhs.max_abs_diff(&rhs) < 1e-10);
    }

    #[test]
    fn resize_round_trip_on_constants(v in -5.0f64..5.0, h in 1usize..6, w in 1usize..6, f in 1usize..5) {
        let x = Tensor::full(&[1, 2, h, w], v);
        let up = ops::resize_bilinear(&x, Factor::up(f)).unwrap();
        let back = ops::resize_bilinear(&up, Factor::down(f)).unwrap();
        prop_assert_eq!(back, x);
    }

    #[test]
    fn zero_pad_preserves_sum(seed in 0u64..1000, h in 1usize..5, w in 1usize..5, top in 0usize..4, left in 0usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&[1, 2, h, w], &mut rng);
        let p = ops::zero_pad(&x, h + 4, w + 4, top, left).unwrap();
        prop_assert!((p.sum() - x.sum()).abs() < 1e-12);
        prop_assert_eq!(ops::crop(&p, top, left, h, w).unwrap(), x);
    }
}

#[test]
fn spec_grad_check_examples() {
    let x = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
    let sq = |g: &mut Graph, v| {
        let s = g.square(v);
        Ok(g.sum(s))
    };
    let mut g = Graph::new();
    let v = g.param(x.clone());
    let out = sq(&mut g, v).unwrap();
    assert_eq!(g.backward(out).unwrap().get(v).unwrap().data(), &[2.0, 4.0]);
    assert!(grad_check(sq, &x, 1e-5).unwrap() < 1e-8);

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random(&[2, 3, 4, 4], &mut rng);
    let err = grad_check(
        |g, v| {
            let s = g.sigmoid(v);
            Ok(g.mean(s))
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn conv_relu_chain_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let inputs = [
        random(&[2, 3, 8, 8], &mut rng),
        random(&[4, 3, 3, 3], &mut rng),
        random(&[4], &mut rng),
        random(&[2, 4, 1, 1], &mut rng),
        random(&[2], &mut rng),
    ];
    let err = grad_check_many(
        |g, v| {
            let h = g.conv2d(v[0], v[1], v[2], 2, 1)?;
            let h = g.relu(h);
            let z = g.conv2d(h, v[3], v[4], 1, 0)?;
            let z = g.square(z);
            Ok(g.mean(z))
        },
        &inputs,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn shared_subexpression_gradients_add_up() {
    // f = sum(x*x + sigmoid(x)): both branches read x
    let x = Tensor::new(vec![3], vec![0.3, -1.2, 2.0]).unwrap();
    let mut g = Graph::new();
    let v = g.param(x.clone());
    let a = g.mul(v, v).unwrap();
    let b = g.sigmoid(v);
    let s = g.add(a, b).unwrap();
    let out = g.sum(s);
    let grad = g.backward(out).unwrap();
    for (d, &xi) in grad.get(v).unwrap().data().iter().zip(x.data()) {
        let sg = 1.0 / (1.0 + (-xi).exp());
        assert!((d - (2.0 * xi + sg * (1.0 - sg))).abs() < 1e-12);
    }
}
