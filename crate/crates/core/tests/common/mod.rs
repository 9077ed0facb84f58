//! Brute-force oracles and generators shared by integration tests and the acceptance suite.
#![allow(dead_code)]

use deltaconv::attention::{AttentionMap, MapMeta};
use deltaconv::Tensor;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Row-stochastic random map set of shape (h·w, h, w), mixing locality and noise.
pub fn random_map(h: usize, w: usize, seed: u64) -> AttentionMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = h * w;
    let sharp: f64 = rng.random_range(0.2..3.0);
    let mut data = Vec::with_capacity(n * n);
    for q in 0..n {
        let (qy, qx) = ((q / w) as f64, (q % w) as f64);
        let row: Vec<f64> = (0..n)
            .map(|p| {
                let (y, x) = ((p / w) as f64, (p % w) as f64);
                let d2 = (y - qy).powi(2) + (x - qx).powi(2);
                (-sharp * d2).exp() + rng.random_range(0.0..0.05)
            })
            .collect();
        let s: f64 = row.iter().sum();
        data.extend(row.into_iter().map(|v| v / s));
    }
    let meta = MapMeta { layer: seed as usize, timestep: None, model_name: "random".into() };
    AttentionMap::new(meta, Tensor::new(vec![n, h, w], data).unwrap()).unwrap()
}

/// Mass of `values` at cells whose ℓ∞ distance to `query` is at most `k / 2`.
pub fn asm_oracle(values: &[f64], h: usize, w: usize, query: (usize, usize), k: usize) -> f64 {
    let r = (k / 2) as i64;
    let mut s = 0.0;
    for y in 0..h {
        for x in 0..w {
            let d = (y as i64 - query.0 as i64).abs().max((x as i64 - query.1 as i64).abs());
            if d <= r {
                s += values[y * w + x];
            }
        }
    }
    s
}

/// Butterworth high-pass through a textbook O(N²) double-sum DFT.
pub fn highpass_oracle(values: &[f64], h: usize, w: usize, d0: f64, order: u32) -> Vec<f64> {
    let tau = std::f64::consts::TAU;
    let centered = |i: usize, n: usize| if i <= n / 2 { i as f64 } else { i as f64 - n as f64 };
    let mut spec = vec![Complex64::default(); h * w];
    for u in 0..h {
        for v in 0..w {
            let mut s = Complex64::default();
            for y in 0..h {
                for x in 0..w {
                    let ph = -tau * ((u * y) as f64 / h as f64 + (v * x) as f64 / w as f64);
                    s += Complex64::from_polar(values[y * w + x], ph);
                }
            }
            let d = centered(u, h).hypot(centered(v, w));
            let g = if d == 0.0 { 0.0 } else { 1.0 / (1.0 + (d0 / d).powi(2 * order as i32)) };
            spec[u * w + v] = s * g;
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut s = Complex64::default();
            for u in 0..h {
                for v in 0..w {
                    let ph = tau * ((u * y) as f64 / h as f64 + (v * x) as f64 / w as f64);
                    s += spec[u * w + v] * Complex64::from_polar(1.0, ph);
                }
            }
            out[y * w + x] = s.re / (h * w) as f64;
        }
    }
    out
}

/// Per-layer profile by plain loops: mean over queries of window sums, with
/// filtered maps measured as normalized absolute mass.
pub fn profile_oracle(map: &AttentionMap, filter: Option<(f64, u32)>) -> Vec<f64> {
    let (h, w) = map.grid().unwrap();
    let ks: Vec<usize> = (1..=2 * h.max(w) - 1).step_by(2).collect();
    let mut acc = vec![0.0; ks.len()];
    for q in 0..h * w {
        let raw = map.query(q).to_vec();
        let vals = match filter {
            None => raw,
            Some((d0, order)) => {
                let f: Vec<f64> = highpass_oracle(&raw, h, w, d0, order).iter().map(|v| v.abs()).collect();
                let total: f64 = f.iter().sum();
                f.into_iter().map(|v| v / total).collect()
            }
        };
        for (i, &k) in ks.iter().enumerate() {
            acc[i] += asm_oracle(&vals, h, w, (q / w, q % w), k);
        }
    }
    acc.into_iter().map(|a| a / (h * w) as f64).collect()
}

/// First odd kernel whose value reaches `threshold`, scanning upward.
pub fn erf_oracle(profile: &[f64], threshold: f64) -> Option<usize> {
    profile.iter().position(|&a| a + 1e-12 >= threshold).map(|i| 2 * i + 1)
}
