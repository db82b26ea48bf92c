use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use segkit::tensor::gradcheck::{
    finite_difference_check, BatchNormOp, Conv2dOp, LossOp, MaxPoolOp, ReluOp,
};
use segkit::tensor::{
    conv2d, conv_transpose2d, softmax_cross_entropy_weighted, BnParams, ConvParams, LabelMap,
    Shape, Tensor,
};

fn random(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_, _, _, _| rng.random_range(-1.0..1.0))
}

fn out_size(len: usize, k: usize, s: usize, p: usize) -> Option<usize> {
    let span = (len + 2 * p).checked_sub(k)?;
    (span % s == 0).then_some(span / s + 1)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn conv_adjoint_identity(seed in any::<u64>(), k in 1usize..5, s in 1usize..4, p in 0usize..3,
                             cin in 1usize..4, cout in 1usize..4, h in 3usize..9) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let Some(oh) = out_size(h, k, s, p) else { return Ok(()); };
        let params = ConvParams::new(random(Shape::new(cout, cin, k, k), &mut rng), None, s, p);
        let x = random(Shape::new(2, cin, h, h), &mut rng);
        let y = random(Shape::new(2, cout, oh, oh), &mut rng);
        let lhs = conv2d(&x, &params).unwrap().dot(&y);
        let rhs = x.dot(&conv_transpose2d(&y, &params, (h, h)).unwrap());
        prop_assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(1.0), "{lhs} vs {rhs}");
    }

    #[test]
    fn conv_gradients_match_differences(seed in any::<u64>(), k in 1usize..4, s in 1usize..3, groups in 1usize..3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (cin, cout) = (2 * groups, 2 * groups);
        let h = 2 * s + k;
        let Some(_) = out_size(h, k, s, k / 2) else { return Ok(()); };
        let kernel = random(Shape::new(cout, cin / groups, k, k), &mut rng);
        let bias = (0..cout).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut op = Conv2dOp(ConvParams::new(kernel, Some(bias), s, k / 2).with_groups(groups));
        let x = random(Shape::new(1, cin, h, h), &mut rng);
        let err = finite_difference_check(&mut op, &x, 1e-5).unwrap();
        prop_assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn batchnorm_gradients_match_differences(seed in any::<u64>(), n in 1usize..3, c in 1usize..3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut bn = BnParams::new(c);
        bn.gamma = (0..c).map(|_| rng.random_range(0.5..1.5)).collect();
        bn.beta = (0..c).map(|_| rng.random_range(-0.5..0.5)).collect();
        let x = random(Shape::new(n, c, 3, 3), &mut rng);
        let err = finite_difference_check(&mut BatchNormOp(bn), &x, 1e-5).unwrap();
        prop_assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn pool_and_relu_gradients_match_differences(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(Shape::new(1, 2, 6, 6), &mut rng);
        // keep inputs away from ties and kinks
        let x = x.map(|v| if v.abs() < 1e-3 { v + 0.01 } else { v });
        let err = finite_difference_check(&mut MaxPoolOp { kernel: 2, stride: 2 }, &x, 1e-6).unwrap();
        prop_assert!(err < 1e-4, "pool {err}");
        let err = finite_difference_check(&mut ReluOp, &x, 1e-6).unwrap();
        prop_assert!(err < 1e-4, "relu {err}");
    }

    #[test]
    fn loss_gradients_match_differences(seed in any::<u64>(), classes in 2usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(Shape::new(2, classes, 3, 3), &mut rng);
        let labels: Vec<LabelMap> = (0..2)
            .map(|_| LabelMap::new(3, 3, (0..9).map(|_| rng.random_range(0..classes as u8)).collect()).unwrap())
            .collect();
        let weights = (0..classes).map(|_| rng.random_range(0.5..3.0)).collect();
        let mut op = LossOp { labels, weights, void_index: 255 };
        let err = finite_difference_check(&mut op, &x, 1e-5).unwrap();
        prop_assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn unit_weights_give_the_plain_mean(seed in any::<u64>(), classes in 2usize..5, voids in 0usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(Shape::new(1, classes, 2, 4), &mut rng);
        let mut data: Vec<u8> = (0..8).map(|_| rng.random_range(0..classes as u8)).collect();
        for v in data.iter_mut().take(voids) {
            *v = 255;
        }
        let labels = LabelMap::new(2, 4, data.clone()).unwrap();
        let out = softmax_cross_entropy_weighted(&x, &[labels], &vec![1.0; classes], 255).unwrap();
        let mut total = 0.0;
        let mut count = 0;
        for (i, &l) in data.iter().enumerate() {
            if l == 255 {
                continue;
            }
            let (y, xx) = (i / 4, i % 4);
            let logits: Vec<f64> = (0..classes).map(|c| x.at(0, c, y, xx)).collect();
            let lse = logits.iter().map(|v| v.exp()).sum::<f64>().ln();
            total += lse - logits[l as usize];
            count += 1;
        }
        let expected = if count == 0 { 0.0 } else { total / count as f64 };
        prop_assert!((out.loss - expected).abs() < 1e-12, "{} vs {expected}", out.loss);
    }
}
