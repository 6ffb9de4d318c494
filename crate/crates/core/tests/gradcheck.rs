//! Spot finite-difference checks for every differentiable op. The full
//! 100-case sweep lives in the acceptance suite; these smaller runs keep
//! the feedback loop fast.

mod common;

use common::{assert_gradcheck, random_tensor, rng};
use staa_core::tensor::Tensor;

const TOL: f64 = 1e-4;
const SEEDS: std::ops::Range<u64> = 0..5;

#[test]
fn elementwise_ops() {
    for seed in SEEDS {
        let mut r = rng(seed);
        let a = random_tensor(&[3, 4], -2.0, 2.0, &mut r);
        let b = random_tensor(&[3, 4], -2.0, 2.0, &mut r);
        assert_gradcheck("add", &[a.clone(), b.clone()], seed, TOL, &|t, l| {
            t.add(l[0], l[1]).unwrap()
        });
        assert_gradcheck("sub", &[a.clone(), b.clone()], seed, TOL, &|t, l| {
            t.sub(l[0], l[1]).unwrap()
        });
        assert_gradcheck("mul", &[a.clone(), b.clone()], seed, TOL, &|t, l| {
            t.mul(l[0], l[1]).unwrap()
        });
        assert_gradcheck("neg_scale", &[a.clone()], seed, TOL, &|t, l| {
            let n = t.neg(l[0]);
            t.scale(n, 1.7)
        });
        assert_gradcheck("sigmoid", &[a.clone()], seed, TOL, &|t, l| t.sigmoid(l[0]));
        assert_gradcheck("tanh", &[a.clone()], seed, TOL, &|t, l| t.tanh(l[0]));

        // Keep activation inputs away from the kink at zero.
        let away = a.map(|v| if v.abs() < 0.05 { v + 0.1 } else { v });
        assert_gradcheck("relu", &[away.clone()], seed, TOL, &|t, l| t.relu(l[0]));
        assert_gradcheck("leaky_relu", &[away], seed, TOL, &|t, l| t.leaky_relu(l[0], 0.1));
    }
}

#[test]
fn reductions_and_losses() {
    for seed in SEEDS {
        let mut r = rng(seed + 10);
        let a = random_tensor(&[2, 5], -2.0, 2.0, &mut r);
        // Separate b so |a-b| stays away from the kink.
        let b = a.map(|v| v + 0.7);
        assert_gradcheck("sum", &[a.clone()], seed, TOL, &|t, l| t.sum(l[0]));
        assert_gradcheck("mean", &[a.clone()], seed, TOL, &|t, l| t.mean(l[0]));
        assert_gradcheck("l1_loss", &[a, b], seed, TOL, &|t, l| {
            t.l1_loss(l[0], l[1]).unwrap()
        });
    }
}

#[test]
fn structural_ops() {
    for seed in SEEDS {
        let mut r = rng(seed + 20);
        let a = random_tensor(&[2, 3, 4], -1.0, 1.0, &mut r);
        let b = random_tensor(&[2, 2, 4], -1.0, 1.0, &mut r);
        assert_gradcheck("concat_slice", &[a.clone(), b], seed, TOL, &|t, l| {
            let cat = t.concat(&[l[0], l[1]], 1).unwrap();
            t.slice(cat, 1, 1, 3).unwrap()
        });
        assert_gradcheck("reshape", &[a.clone()], seed, TOL, &|t, l| {
            t.reshape(l[0], vec![6, 4]).unwrap()
        });
        let bias = random_tensor(&[2], -1.0, 1.0, &mut r);
        let x4 = random_tensor(&[2, 2, 3, 3], -1.0, 1.0, &mut r);
        assert_gradcheck("add_channel_bias", &[x4, bias], seed, TOL, &|t, l| {
            t.add_channel_bias(l[0], l[1]).unwrap()
        });
        assert_gradcheck("softmax_flat", &[a], seed, TOL, &|t, l| {
            t.softmax_flat(l[0]).unwrap()
        });
    }
}

#[test]
fn conv3d_full_and_depthwise() {
    for seed in SEEDS {
        let mut r = rng(seed + 30);
        let input = random_tensor(&[2, 3, 4, 4], -1.0, 1.0, &mut r);
        let kernel = random_tensor(&[2, 2, 3, 3, 3], -0.5, 0.5, &mut r);
        assert_gradcheck("conv3d_s1", &[input.clone(), kernel.clone()], seed, TOL, &|t, l| {
            t.conv3d(l[0], l[1], (1, 1, 1)).unwrap()
        });
        assert_gradcheck("conv3d_s2", &[input.clone(), kernel], seed, TOL, &|t, l| {
            t.conv3d(l[0], l[1], (2, 2, 2)).unwrap()
        });

        let shared = random_tensor(&[3, 3, 3], -0.5, 0.5, &mut r);
        assert_gradcheck("dw_shared", &[input.clone(), shared], seed, TOL, &|t, l| {
            t.depthwise_conv3d(l[0], l[1], (2, 2, 2), true).unwrap()
        });
        let per_channel = random_tensor(&[2, 3, 3, 3], -0.5, 0.5, &mut r);
        assert_gradcheck("dw_per_channel", &[input, per_channel], seed, TOL, &|t, l| {
            t.depthwise_conv3d(l[0], l[1], (1, 2, 2), false).unwrap()
        });
    }
}

#[test]
fn shuffle_and_resample() {
    for seed in SEEDS {
        let mut r = rng(seed + 40);
        let x = random_tensor(&[8, 2, 3, 3], -1.0, 1.0, &mut r);
        assert_gradcheck("shuffle", &[x], seed, TOL, &|t, l| {
            t.space_time_shuffle(l[0], 2, 2).unwrap()
        });
        let v = random_tensor(&[2, 3, 4, 4], -1.0, 1.0, &mut r);
        assert_gradcheck("resample_up", &[v.clone()], seed, TOL, &|t, l| {
            t.resample_linear(l[0], [6, 8, 8]).unwrap()
        });
        assert_gradcheck("resample_rational", &[v], seed, TOL, &|t, l| {
            t.resample_linear(l[0], [4, 6, 6]).unwrap()
        });
    }
}

#[test]
fn bilinear_and_deformable() {
    for seed in SEEDS {
        let mut r = rng(seed + 50);
        let feature = random_tensor(&[2, 5, 5], -1.0, 1.0, &mut r);
        // Interior, non-integer sample positions: away from clamp region
        // and from the integer-lattice kinks of bilinear interpolation.
        let off = Tensor::new(
            vec![2],
            vec![
                0.3 + 0.4 * rand::Rng::gen_range(&mut r, 0.0..1.0),
                0.3 + 0.4 * rand::Rng::gen_range(&mut r, 0.0..1.0),
            ],
        )
        .unwrap();
        assert_gradcheck("bilinear_sample", &[feature.clone(), off], seed, TOL, &|t, l| {
            t.bilinear_sample(l[0], (2, 2), l[1]).unwrap()
        });

        let taps = 9;
        let offsets_data: Vec<f64> = (0..2 * taps * 25)
            .map(|_| 0.25 + 0.5 * rand::Rng::gen_range(&mut r, 0.0..1.0))
            .collect();
        let offsets = Tensor::new(vec![2 * taps, 5, 5], offsets_data).unwrap();
        let kernel = random_tensor(&[2, 2, 3, 3], -0.5, 0.5, &mut r);
        assert_gradcheck(
            "deform_conv2d",
            &[feature, offsets, kernel],
            seed,
            TOL,
            &|t, l| t.deform_conv2d(l[0], l[1], l[2]).unwrap(),
        );
    }
}
