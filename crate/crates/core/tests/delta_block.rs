use deltaconv::attention::Linear;
use deltaconv::delta_conv::*;
use deltaconv::ops;
use deltaconv::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape.to_vec(), 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[test]
fn calibrated_support_is_within_bound() {
    for k in [9usize, 13] {
        let config = BlockConfig::calibrated(8, 2, k).unwrap();
        let support = impulse_support(&probe_block(2, config.stage_kernels.clone(), false).unwrap()).unwrap();
        assert!((k..=k + 4).contains(&support), "K={k}: support {support}");
        let random = DeltaConvBlock::<f64>::init(BlockConfig { pooling_branch: false, ..config }, 3).unwrap();
        assert!(impulse_support(&random).unwrap() <= support);
    }
}

#[test]
fn calibration_examples_and_errors() {
    assert_eq!(calibrate_kernel_sizes(3, 0, true).unwrap(), vec![3]);
    let ks = calibrate_kernel_sizes(5, 1, false).unwrap();
    assert!(impulse_support(&probe_block(1, ks, false).unwrap()).unwrap() >= 5);
    assert!(calibrate_kernel_sizes(8, 2, false).is_err());
    let err = calibrate_kernel_sizes(201, 1, false).unwrap_err();
    assert!(err.to_string().contains("more stages"));
}

/// Channel-summed absolute change of the output caused by a unit impulse at `(cy, cx)`.
fn impulse_response(block: &DeltaConvBlock<f64>, side: usize, cy: usize, cx: usize) -> Vec<f64> {
    let c = block.config.channels;
    let zero = Tensor::<f64>::zeros(vec![1, c, side, side]);
    let base = block.forward(&zero).unwrap();
    let mut z = zero;
    z.data_mut()[cy * side + cx] = 1.0;
    let out = block.forward(&z).unwrap();
    let plane = side * side;
    let mut diff = vec![0.0; plane];
    for (o, b) in out.data().chunks(plane).zip(base.data().chunks(plane)) {
        for ((d, o), b) in diff.iter_mut().zip(o).zip(b) {
            *d += (o - b).abs();
        }
    }
    diff
}

#[test]
fn stage_weighting_decays_with_distance() {
    for kernels in [vec![3, 1], vec![1, 3], vec![3, 3]] {
        let block = probe_block(2, kernels.clone(), false).unwrap();
        let side = 32;
        let (cy, cx) = (15, 15);
        let resp = impulse_response(&block, side, cy, cx);
        let mut ring_mean = vec![(0.0, 0usize); side];
        for y in 0..side {
            for x in 0..side {
                let d = y.abs_diff(cy).max(x.abs_diff(cx));
                ring_mean[d].0 += resp[y * side + x];
                ring_mean[d].1 += 1;
            }
        }
        let means: Vec<f64> = ring_mean.iter().filter(|r| r.1 > 0).map(|r| r.0 / r.1 as f64).collect();
        for w in means.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "kernels {kernels:?}: ring means {means:?}");
        }
    }
}

#[test]
fn pooling_branch_adds_only_a_constant_outside_the_support() {
    let config = BlockConfig::new(8, 2, vec![3, 1]).unwrap();
    let with = DeltaConvBlock::<f64>::init(config.clone(), 4).unwrap();
    let mut without = with.clone();
    without.config.pooling_branch = false;
    let side = 32;
    let support_map = impulse_response(&without, side, 16, 16);
    let c = config.channels;
    let zero = Tensor::<f64>::zeros(vec![1, c, side, side]);
    let mut z = zero.clone();
    z.data_mut()[16 * side + 16] = 1.0;
    let (a, b) = (with.forward(&z).unwrap(), with.forward(&zero).unwrap());
    let plane = side * side;
    for ch in 0..c {
        let outside: Vec<f64> = (0..plane)
            .filter(|&p| support_map[p] == 0.0)
            .map(|p| a.data()[ch * plane + p] - b.data()[ch * plane + p])
            .collect();
        assert!(!outside.is_empty());
        assert!(outside.iter().all(|v| (v - outside[0]).abs() < 1e-9));
    }
}

#[test]
fn pooling_branch_commutes_on_random_inputs() {
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = 2 + (seed as usize % 5);
        let psi: Linear<f64> = Linear {
            weight: Tensor::randn(vec![c, c], 1.0, &mut rng),
            bias: Tensor::randn(vec![c], 1.0, &mut rng),
        };
        let z = Tensor::randn(vec![1 + seed as usize % 2, c, 1 + seed as usize % 7, 2 + seed as usize % 5], 1.0, &mut rng);
        let a = pooling_branch(&z, &psi).unwrap();
        let b = pooling_branch_conv_first(&z, &psi).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() < 1e-9);
    }
}

#[test]
fn f32_block_tracks_f64() {
    let block = DeltaConvBlock::<f64>::init(BlockConfig::new(8, 2, vec![3, 1]).unwrap(), 9).unwrap();
    let z = randn(&[1, 8, 16, 16], 2);
    let hi = block.forward(&z).unwrap();
    let lo = block.cast::<f32>().forward(&z.cast::<f32>()).unwrap();
    assert!(hi.max_abs_diff(&lo.cast::<f64>()).unwrap() < 1e-4);
}

#[test]
fn non_divisible_input_is_rejected_before_compute() {
    let block = DeltaConvBlock::<f64>::init(BlockConfig::new(8, 2, vec![3, 1]).unwrap(), 0).unwrap();
    assert!(block.forward(&randn(&[1, 8, 10, 12], 0)).is_err());
    assert!(block.forward(&randn(&[1, 4, 8, 8], 0)).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn drop_in_shape(b in 1usize..3, mult_h in 1usize..5, mult_w in 1usize..5, n in 1u32..3, seed in 0u64..100) {
        let c = 4 * n as usize;
        let ks = vec![3; n as usize];
        let block = DeltaConvBlock::<f64>::init(BlockConfig::new(c, n, ks).unwrap(), seed).unwrap();
        let f = 1usize << n;
        let z = randn(&[b, c, f * mult_h, f * mult_w], seed);
        let out = block.forward(&z).unwrap();
        prop_assert_eq!(out.shape(), z.shape());
        prop_assert!(out.is_finite());
    }

    #[test]
    fn scaled_gate_is_bounded(c_half in 1usize..5, m in 0.1f64..10.0, seed in 0u64..1000) {
        let c = 2 * c_half;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = Tensor::<f64>::randn(vec![1, c, 3, 3], 1.0, &mut rng).map(|v| (v.tanh()) * m);
        let scaled = ops::simple_gate(&f, true).unwrap();
        let plain = ops::simple_gate(&f, false).unwrap();
        let bound = m * m / (c as f64).sqrt();
        prop_assert!(scaled.data().iter().all(|v| v.abs() <= bound + 1e-12));
        for (s, p) in scaled.data().iter().zip(plain.data()) {
            prop_assert!((s * (c as f64).sqrt() - p).abs() < 1e-12 * p.abs().max(1.0));
        }
    }
}
