mod common;

use common::*;
use deltaconv::attention::{AttentionMap, MapMeta};
use deltaconv::locality::*;
use deltaconv::Tensor;
use num_complex::Complex64;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn filt(d0: f64, order: u32) -> Butterworth {
    Butterworth { d0, order }
}

#[test]
fn asm_matches_loop_oracle_and_is_monotone() {
    for (i, side) in [8usize, 16].into_iter().enumerate() {
        for case in 0..20 {
            let map = random_map(side, side, (100 * i + case) as u64);
            for q in (0..side * side).step_by(7) {
                let vals = map.query(q);
                let pos = (q / side, q % side);
                let mut prev = 0.0;
                for k in kernel_sizes(full_kernel(side, side)) {
                    let a = asm(vals, side, side, pos, k).unwrap();
                    assert!((a - asm_oracle(vals, side, side, pos, k)).abs() < 1e-9);
                    assert!(a + 1e-12 >= prev);
                    prev = a;
                }
                assert!((prev - 1.0).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn layer_and_aggregate_profiles_match_oracles() {
    let maps: Vec<AttentionMap> = (0..3).map(|s| random_map(8, 8, s)).collect();
    for m in &maps {
        let p = layer_profile(m, Mode::Raw, 1).unwrap();
        let o = profile_oracle(m, None);
        for (a, b) in p.asm.iter().zip(&o) {
            assert!((a - b).abs() < 1e-9);
        }
        let (k, reached) = erf(&p, 0.8).unwrap();
        assert!(reached);
        assert_eq!(Some(k), erf_oracle(&o, 0.8));
    }
    let agg = asm_aggregate(&maps, Mode::Raw, 1).unwrap();
    let oracles: Vec<Vec<f64>> = maps.iter().map(|m| profile_oracle(m, None)).collect();
    for (i, a) in agg.asm.iter().enumerate() {
        let mean = oracles.iter().map(|o| o[i]).sum::<f64>() / 3.0;
        assert!((a - mean).abs() < 1e-9);
    }
    assert!((agg.asm.last().unwrap() - 1.0).abs() < 1e-6);
    for (i, g) in agg.gradient.iter().enumerate().skip(1) {
        assert!((g - (agg.asm[i] - agg.asm[i - 1])).abs() < 1e-15);
    }
    assert!(asm_aggregate(&[], Mode::Raw, 1).is_err());
}

#[test]
fn filtered_profile_and_erf_match_oracles() {
    for (seed, side) in [(0u64, 8usize), (1, 8), (2, 16)] {
        let map = random_map(side, side, seed);
        let mode = Mode::Filtered(Butterworth::default());
        let p = layer_profile(&map, mode, 1).unwrap();
        let o = profile_oracle(&map, Some((4.0, 2)));
        for (a, b) in p.asm.iter().zip(&o) {
            assert!((a - b).abs() < 1e-9);
        }
        assert!((p.asm.last().unwrap() - 1.0).abs() < 1e-9);
        for t in [0.5, 0.8, 0.95] {
            assert_eq!(Some(erf(&p, t).unwrap().0), erf_oracle(&o, t));
        }
    }
}

fn gaussian_local(side: usize, std: f64) -> AttentionMap {
    let n = side * side;
    let data = (0..n)
        .flat_map(|q| {
            let (qy, qx) = ((q / side) as f64, (q % side) as f64);
            let row: Vec<f64> = (0..n)
                .map(|p| {
                    let d2 = ((p / side) as f64 - qy).powi(2) + ((p % side) as f64 - qx).powi(2);
                    (-d2 / (2.0 * std * std)).exp()
                })
                .collect();
            let s: f64 = row.iter().sum();
            row.into_iter().map(move |v| v / s)
        })
        .collect();
    let meta = MapMeta { layer: 0, timestep: None, model_name: "gaussian".into() };
    AttentionMap::new(meta, Tensor::new(vec![n, side, side], data).unwrap()).unwrap()
}

#[test]
fn gaussian_local_erf_equals_scan_and_grows_with_width() {
    let mut last = 0;
    for std in [0.5, 1.0, 2.0, 3.0] {
        let map = gaussian_local(16, std);
        let mode = Mode::Filtered(Butterworth::default());
        let r = layer_erf(&map, mode, 0.8, 1).unwrap();
        let o = profile_oracle(&map, Some((4.0, 2)));
        assert_eq!(Some(r.k_hat), erf_oracle(&o, 0.8));
        let raw = layer_erf(&map, Mode::Raw, 0.8, 1).unwrap();
        assert!(raw.k_hat >= last);
        last = raw.k_hat;
    }
}

#[test]
fn delta_maps_have_unit_erf() {
    let n = 64;
    let data = (0..n * n).map(|i| if i / n == i % n { 1.0 } else { 0.0 }).collect();
    let meta = MapMeta { layer: 3, timestep: Some(10), model_name: "delta".into() };
    let map = AttentionMap::new(meta, Tensor::new(vec![n, 8, 8], data).unwrap()).unwrap();
    let r = layer_erf(&map, Mode::Raw, 0.8, 1).unwrap();
    assert_eq!((r.k_hat, r.reached), (1, true));
    assert!(layer_profile(&map, Mode::Raw, 1).unwrap().gradient[1..].iter().all(|g| g.abs() < 1e-15));
    assert!(!detect_sink_artifact(&map, 0.5).unwrap().detected);
}

#[test]
fn spectral_checks() {
    let (h, w) = (16, 16);
    let f = Butterworth::default();
    let constant = vec![0.37; h * w];
    assert!(highpass_filter(&constant, h, w, f).unwrap().values.iter().all(|v| v.abs() < 1e-9));

    let cosine: Vec<f64> = (0..h * w)
        .map(|i| (std::f64::consts::TAU * 4.0 * (i % w) as f64 / w as f64).cos())
        .collect();
    let out = highpass_filter(&cosine, h, w, filt(4.0, 2)).unwrap().values;
    for (o, c) in out.iter().zip(&cosine) {
        assert!((o - 0.5 * c).abs() < 1e-6);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = Tensor::<f64>::randn(vec![h * w], 1.0, &mut rng).into_data();
    let hp = HighPass::new(h, w, f).unwrap();
    let back = hp.inverse(&hp.forward(&x));
    assert!(x.iter().zip(&back).all(|(a, b)| (a - b).abs() < 1e-9));
    let cx: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    let direct = dft2_direct(&dft2_direct(&cx, h, w, false), h, w, true);
    assert!(x.iter().zip(&direct).all(|(a, b)| (a - b.re).abs() < 1e-9 && b.im.abs() < 1e-9));

    let fast = highpass_filter(&x, h, w, f).unwrap().values;
    let slow = highpass_filter_direct(&x, h, w, f).unwrap().values;
    let oracle = highpass_oracle(&x, h, w, 4.0, 2);
    for i in 0..h * w {
        assert!((fast[i] - slow[i]).abs() < 1e-9 && (fast[i] - oracle[i]).abs() < 1e-9);
    }
    assert!(highpass_filter(&x, h, w, filt(0.0, 2)).is_err());
    assert!(highpass_filter(&x, h, w, filt(4.0, 0)).is_err());
}

#[test]
fn sink_detection_on_last_pixel() {
    let n = 16;
    let data = (0..n * n)
        .map(|i| if i % n == n - 1 { 0.9 } else { 0.1 / (n - 1) as f64 })
        .collect();
    let meta = MapMeta { layer: 0, timestep: None, model_name: "sink".into() };
    let map = AttentionMap::new(meta, Tensor::new(vec![n, 4, 4], data).unwrap()).unwrap();
    let r = detect_sink_artifact(&map, 0.5).unwrap();
    assert!(r.detected);
    assert_eq!(r.location, Some((3, 3)));
    let uniform = AttentionMap::new(
        MapMeta { layer: 0, timestep: None, model_name: "u".into() },
        Tensor::full(vec![n, 4, 4], 1.0 / n as f64),
    )
    .unwrap();
    assert!(!detect_sink_artifact(&uniform, 0.5).unwrap().detected);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn highpass_is_linear(seed in 0u64..10_000, a in -3.0f64..3.0, b in -3.0f64..3.0, h in 2usize..9, w in 2usize..9) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::<f64>::randn(vec![h * w], 1.0, &mut rng).into_data();
        let y = Tensor::<f64>::randn(vec![h * w], 1.0, &mut rng).into_data();
        let f = Butterworth::default();
        let mix: Vec<f64> = x.iter().zip(&y).map(|(p, q)| a * p + b * q).collect();
        let lhs = highpass_filter(&mix, h, w, f).unwrap().values;
        let fx = highpass_filter(&x, h, w, f).unwrap().values;
        let fy = highpass_filter(&y, h, w, f).unwrap().values;
        for i in 0..h * w {
            prop_assert!((lhs[i] - (a * fx[i] + b * fy[i])).abs() < 1e-9);
        }
    }

    #[test]
    fn larger_cutoff_never_adds_energy(seed in 0u64..10_000, d0 in 0.5f64..6.0, extra in 0.0f64..4.0) {
        let (h, w) = (8, 8);
        let x = Tensor::<f64>::randn(vec![h * w], 1.0, &mut ChaCha8Rng::seed_from_u64(seed)).into_data();
        let energy = |d: f64| {
            let v = highpass_filter(&x, h, w, filt(d, 2)).unwrap().values;
            v.iter().map(|t| t * t).sum::<f64>()
        };
        prop_assert!(energy(d0 + extra) <= energy(d0) + 1e-9);
    }

    #[test]
    fn erf_is_monotone_in_threshold(seed in 0u64..10_000, t1 in 0.05f64..1.0, t2 in 0.05f64..1.0) {
        let map = random_map(8, 8, seed);
        let p = layer_profile(&map, Mode::Filtered(Butterworth::default()), 2).unwrap();
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        prop_assert!(erf(&p, lo).unwrap().0 <= erf(&p, hi).unwrap().0);
    }
}
