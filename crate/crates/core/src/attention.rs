//! Reference dense self-attention and neighborhood attention.
//!
//! These are the frozen teachers for distillation and the source of attention
//! maps for the locality analysis. No positional terms are added: locality of
//! a teacher comes from its weights and the structure of its input.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::counting::{scope, OpCategory};
use crate::dtf;
use crate::error::{Error, Result};
use crate::ops;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Affine map over channels, applied per pixel as a 1×1 convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    /// (out, in)
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(weight: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        let [out, _] = weight.shape() else {
            return Err(Error::dim("weight rank", 2, weight.shape().len()));
        };
        if bias.len() != *out {
            return Err(Error::dim("bias length", *out, bias.len()));
        }
        Ok(Linear { weight, bias })
    }

    pub fn identity(c: usize) -> Self {
        Linear {
            weight: Tensor::from_fn(vec![c, c], |i| if i / c == i % c { T::one() } else { T::zero() }),
            bias: Tensor::zeros(vec![c]),
        }
    }

    pub fn zeros(out: usize, inp: usize) -> Self {
        Linear {
            weight: Tensor::zeros(vec![out, inp]),
            bias: Tensor::zeros(vec![out]),
        }
    }

    /// Gaussian weights with standard deviation `1/√in`, zero bias.
    pub fn random<R: Rng + ?Sized>(out: usize, inp: usize, rng: &mut R) -> Self {
        Linear {
            weight: Tensor::randn(vec![out, inp], 1.0 / (inp as f64).sqrt(), rng),
            bias: Tensor::zeros(vec![out]),
        }
    }

    pub fn in_features(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        ops::conv1x1(x, &self.weight, &self.bias)
    }
}

/// Projections of one attention sub-module.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams<T> {
    pub psi_q: Linear<T>,
    pub psi_k: Linear<T>,
    pub psi_v: Linear<T>,
    /// Optional output projection, as in the attention blocks of latent diffusion U-Nets.
    pub psi_o: Option<Linear<T>>,
    pub num_heads: usize,
}

impl<T: Scalar> AttentionParams<T> {
    pub fn new(
        psi_q: Linear<T>,
        psi_k: Linear<T>,
        psi_v: Linear<T>,
        psi_o: Option<Linear<T>>,
        num_heads: usize,
    ) -> Result<Self> {
        let p = AttentionParams {
            psi_q,
            psi_k,
            psi_v,
            psi_o,
            num_heads,
        };
        p.validate()?;
        Ok(p)
    }

    /// Seeded random single-head parameters without output projection.
    pub fn random(channels: usize, num_heads: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::new(
            Linear::random(channels, channels, &mut rng),
            Linear::random(channels, channels, &mut rng),
            Linear::random(channels, channels, &mut rng),
            None,
            num_heads,
        )
    }

    pub fn channels(&self) -> usize {
        self.psi_q.in_features()
    }

    pub fn head_dim(&self) -> usize {
        self.channels() / self.num_heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.channels();
        if self.num_heads == 0 || !c.is_multiple_of(self.num_heads) {
            return Err(Error::config(format!(
                "{c} channels cannot be split into {} heads",
                self.num_heads
            )));
        }
        for (name, l) in [("psi_q", &self.psi_q), ("psi_k", &self.psi_k), ("psi_v", &self.psi_v)] {
            if l.in_features() != c || l.out_features() != c {
                return Err(Error::dim(format!("{name} width"), c, l.out_features()));
            }
        }
        if let Some(o) = &self.psi_o {
            if o.in_features() != c || o.out_features() != c {
                return Err(Error::dim("psi_o width", c, o.out_features()));
            }
        }
        Ok(())
    }

    /// All parameter tensors in a fixed order.
    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        let mut v = vec![
            &self.psi_q.weight,
            &self.psi_q.bias,
            &self.psi_k.weight,
            &self.psi_k.bias,
            &self.psi_v.weight,
            &self.psi_v.bias,
        ];
        if let Some(o) = &self.psi_o {
            v.push(&o.weight);
            v.push(&o.bias);
        }
        v
    }
}

/// Result of an attention forward pass.
#[derive(Debug, Clone)]
pub struct AttentionOutput<T> {
    pub out: Tensor<T>,
    /// One (Q, H, W) map per batch item, averaged over heads. Empty unless requested.
    pub maps: Vec<Tensor<T>>,
}

/// Which keys a query may attend to.
#[derive(Debug, Clone, Copy)]
enum Window {
    Full,
    /// K×K window clipped at the borders.
    Square(usize),
}

/// Dense softmax attention over all H·W positions.
pub fn self_attention<T: Scalar>(
    z: &Tensor<T>,
    params: &AttentionParams<T>,
    keep_maps: bool,
) -> Result<AttentionOutput<T>> {
    attend(z, params, Window::Full, keep_maps)
}

/// Attention restricted to the K×K neighborhood of each query (K odd).
///
/// Windows are clipped at the borders and the softmax is taken over the keys
/// that remain.
pub fn neighborhood_attention<T: Scalar>(
    z: &Tensor<T>,
    params: &AttentionParams<T>,
    k: usize,
    keep_maps: bool,
) -> Result<AttentionOutput<T>> {
    if k.is_multiple_of(2) {
        return Err(Error::config(format!(
            "neighborhood size must be odd, got {k}"
        )));
    }
    attend(z, params, Window::Square(k), keep_maps)
}

/// Transpose one head of a (C, N) plane into (N, dk) rows.
fn head_rows<T: Scalar>(plane: &[T], n: usize, c0: usize, dk: usize) -> Vec<T> {
    let mut rows = vec![T::zero(); n * dk];
    for c in 0..dk {
        for p in 0..n {
            rows[p * dk + c] = plane[(c0 + c) * n + p];
        }
    }
    rows
}

fn attend<T: Scalar>(
    z: &Tensor<T>,
    params: &AttentionParams<T>,
    window: Window,
    keep_maps: bool,
) -> Result<AttentionOutput<T>> {
    params.validate()?;
    let (b, c, h, w) = z.dims4()?;
    if c != params.channels() {
        return Err(Error::dim("attention channels", params.channels(), c));
    }
    let n = h * w;
    let heads = params.num_heads;
    let dk = c / heads;
    let tau = T::of(1.0 / (dk as f64).sqrt());
    let head_weight = T::of(1.0 / heads as f64);

    let (q, k, v) = scope(OpCategory::Projection, || -> Result<_> {
        Ok((
            params.psi_q.apply(z)?,
            params.psi_k.apply(z)?,
            params.psi_v.apply(z)?,
        ))
    })?;

    let mut out = vec![T::zero(); b * c * n];
    let mut maps = Vec::new();
    let mut keys: Vec<usize> = Vec::with_capacity(n);
    let mut scores: Vec<T> = Vec::with_capacity(n);
    let mut acc = vec![T::zero(); dk];

    for bi in 0..b {
        let plane = bi * c * n..(bi + 1) * c * n;
        let mut map = if keep_maps {
            vec![T::zero(); n * n]
        } else {
            Vec::new()
        };
        for hd in 0..heads {
            let qr = head_rows(&q.data()[plane.clone()], n, hd * dk, dk);
            let kr = head_rows(&k.data()[plane.clone()], n, hd * dk, dk);
            let vr = head_rows(&v.data()[plane.clone()], n, hd * dk, dk);
            for qi in 0..n {
                keys.clear();
                match window {
                    Window::Full => keys.extend(0..n),
                    Window::Square(ks) => {
                        let r = ks / 2;
                        let (qy, qx) = (qi / w, qi % w);
                        for y in qy.saturating_sub(r)..(qy + r + 1).min(h) {
                            for x in qx.saturating_sub(r)..(qx + r + 1).min(w) {
                                keys.push(y * w + x);
                            }
                        }
                    }
                }
                let qrow = &qr[qi * dk..(qi + 1) * dk];
                scores.clear();
                scope(OpCategory::Spatial, || {
                    for &kj in &keys {
                        let krow = &kr[kj * dk..(kj + 1) * dk];
                        let mut s = T::zero();
                        for (&a, &bb) in qrow.iter().zip(krow) {
                            s += a * bb;
                        }
                        scores.push(s);
                    }
                });
                scope(OpCategory::Softmax, || {
                    for s in scores.iter_mut() {
                        *s *= tau;
                    }
                    ops::softmax_in_place(&mut scores);
                });
                scope(OpCategory::Spatial, || {
                    acc.fill(T::zero());
                    for (&kj, &a) in keys.iter().zip(&scores) {
                        let vrow = &vr[kj * dk..(kj + 1) * dk];
                        for (o, &vv) in acc.iter_mut().zip(vrow) {
                            *o += a * vv;
                        }
                    }
                });
                for (ci, &o) in acc.iter().enumerate() {
                    out[(bi * c + hd * dk + ci) * n + qi] = o;
                }
                if keep_maps {
                    let row = &mut map[qi * n..(qi + 1) * n];
                    for (&kj, &a) in keys.iter().zip(&scores) {
                        row[kj] = if heads == 1 { a } else { row[kj] + a * head_weight };
                    }
                }
            }
        }
        if keep_maps {
            maps.push(Tensor::new(vec![n, h, w], map)?);
        }
    }

    let mut out = Tensor::new(vec![b, c, h, w], out)?;
    if let Some(o) = &params.psi_o {
        out = scope(OpCategory::Projection, || o.apply(&out))?;
    }
    Ok(AttentionOutput { out, maps })
}

/// Wavelength, in pixels, of the slowest component of [`probe_latent`].
pub const PROBE_WAVELENGTH: f64 = 128.0;

/// Unit-norm positional field: channel pairs hold cos/sin of seeded plane waves.
///
/// Every pixel vector has norm one and the inner product of two pixels decays
/// with their distance (up to about a quarter wavelength), so dot-product
/// attention on this input is local exactly when its logits are sharp.
pub fn probe_latent<T: Scalar>(h: usize, w: usize, channels: usize, seed: u64) -> Result<Tensor<T>> {
    if !channels.is_multiple_of(2) {
        return Err(Error::config("probe latent needs an even channel count"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pairs = channels / 2;
    let base = 2.0 * std::f64::consts::PI / PROBE_WAVELENGTH;
    let waves: Vec<(f64, f64, f64)> = (0..pairs)
        .map(|_| {
            let theta = rng.random_range(0.0..std::f64::consts::TAU);
            let mag = base * rng.random_range(0.75..1.25);
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            (mag * theta.cos(), mag * theta.sin(), phase)
        })
        .collect();
    let norm = (1.0 / pairs as f64).sqrt();
    let mut data = vec![T::zero(); channels * h * w];
    for (m, &(wy, wx, ph)) in waves.iter().enumerate() {
        for y in 0..h {
            for x in 0..w {
                let a = wy * y as f64 + wx * x as f64 + ph;
                data[(2 * m) * h * w + y * w + x] = T::of(norm * a.cos());
                data[(2 * m + 1) * h * w + y * w + x] = T::of(norm * a.sin());
            }
        }
    }
    Tensor::new(vec![1, channels, h, w], data)
}

/// Mean squared frequency of the waves in [`probe_latent`], used to size teacher logits.
fn probe_mean_sq_frequency() -> f64 {
    let base = 2.0 * std::f64::consts::PI / PROBE_WAVELENGTH;
    // E[m²] for m uniform on [0.75, 1.25] times base.
    base * base * (1.25f64.powi(3) - 0.75f64.powi(3)) / (3.0 * 0.5)
}

/// Seeded single-head teacher whose attention on [`probe_latent`] input is an
/// approximately Gaussian bump of standard deviation `locality_scale` pixels.
///
/// ψ_q and ψ_k are the same random rotation scaled by `a`, so logits are
/// `a²·⟨z_i, z_j⟩/√C`. With unit-norm probe pixels
/// `⟨z_i, z_j⟩ ≈ 1 − ω²·d²/4`, hence `a² = 2√C / (ω²·s²)` for spread `s`.
pub fn make_localized_teacher<T: Scalar>(
    seed: u64,
    channels: usize,
    locality_scale: f64,
) -> Result<AttentionParams<T>> {
    if !(locality_scale > 0.0) {
        return Err(Error::config("locality scale must be positive"));
    }
    let a2 = 2.0 * (channels as f64).sqrt() / (probe_mean_sq_frequency() * locality_scale * locality_scale);
    tied_attention(seed, channels, a2.sqrt())
}

/// Single-head attention with ψ_q = ψ_k = `gain`·O for a seeded random
/// orthogonal O and a Gaussian ψ_v. Logits grow with feature similarity, so
/// on spatially correlated inputs attention decays with distance.
pub fn tied_attention<T: Scalar>(seed: u64, channels: usize, gain: f64) -> Result<AttentionParams<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rot = random_orthogonal(channels, &mut rng);
    let scaled = Tensor::from_fn(vec![channels, channels], |i| T::of(gain * rot[i]));
    let qk = Linear::new(scaled, Tensor::zeros(vec![channels]))?;
    let v = Linear::random(channels, channels, &mut rng);
    AttentionParams::new(qk.clone(), qk, v, None, 1)
}

/// Row-major orthogonal matrix from Gram-Schmidt on Gaussian columns.
fn random_orthogonal<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    use rand_distr::{Distribution, StandardNormal};
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n);
    while rows.len() < n {
        let mut v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
        for r in &rows {
            let d: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
            for (x, y) in v.iter_mut().zip(r) {
                *x -= d * y;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            rows.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    rows.concat()
}

/// One layer of a synthetic attention stack.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticLayer {
    pub h: usize,
    pub w: usize,
    /// Standard deviation, in pixels of this grid, of the query-centered bump.
    pub scale: f64,
    /// Share of each query's mass in the local bump; the rest follows a broad
    /// query-independent field.
    pub local_weight: f64,
    pub seed: u64,
}

/// Row-stochastic (Q, H, W) map mixing a Gaussian bump around every query
/// with a smooth global field (a wide seeded bump over a constant floor).
pub fn synthetic_map(layer: &SyntheticLayer) -> Result<Tensor<f64>> {
    let SyntheticLayer { h, w, scale, local_weight, seed } = *layer;
    if !(scale > 0.0) || !(0.0..=1.0).contains(&local_weight) {
        return Err(Error::config("synthetic map needs scale > 0 and local weight in [0, 1]"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (cy, cx) = (rng.random_range(0.0..h as f64), rng.random_range(0.0..w as f64));
    let spread = 0.25 * h.max(w) as f64;
    let n = h * w;
    let coords = |p: usize| ((p / w) as f64, (p % w) as f64);
    let bump = |(y, x): (f64, f64), (y0, x0): (f64, f64), s: f64| {
        (-((y - y0).powi(2) + (x - x0).powi(2)) / (2.0 * s * s)).exp()
    };
    let global: Vec<f64> = (0..n).map(|p| bump(coords(p), (cy, cx), spread) + 0.2).collect();
    let gsum: f64 = global.iter().sum();
    let mut data = vec![0.0; n * n];
    let mut local = vec![0.0; n];
    for q in 0..n {
        let center = coords(q);
        for (p, l) in local.iter_mut().enumerate() {
            *l = bump(coords(p), center, scale);
        }
        let lsum: f64 = local.iter().sum();
        let row = &mut data[q * n..(q + 1) * n];
        for p in 0..n {
            row[p] = local_weight * local[p] / lsum + (1.0 - local_weight) * global[p] / gsum;
        }
    }
    Tensor::new(vec![n, h, w], data)
}

/// Family of synthetic stacks resembling the two kinds of diffusion backbones.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StackKind {
    /// Transformer backbone: every layer on one token grid.
    DitLike,
    /// U-Net backbone: layers split across two resolutions.
    UnetLike,
}

/// Synthetic attention stack at desk scale (grids halved from the full models).
///
/// Locality scales are drawn in pixels of the full-resolution latent and
/// divided by each layer's downsampling, so deeper U-Net levels see the same
/// physical neighborhood on a coarser grid.
pub fn synthetic_stack(kind: StackKind, seed: u64) -> Result<Vec<AttentionMap>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // (grid side, downsampling, locality scale range) per layer.
    type Plan = Vec<(usize, f64, (f64, f64))>;
    let (name, plan): (&str, Plan) = match kind {
        StackKind::DitLike => ("dit-like", vec![(32, 2.0, (1.0, 2.5)); 28]),
        StackKind::UnetLike => {
            let mut p = vec![(32, 2.0, (1.5, 3.5)); 6];
            p.extend(vec![(16, 4.0, (1.5, 3.5)); 6]);
            ("unet-like", p)
        }
    };
    plan.into_iter()
        .enumerate()
        .map(|(layer, (side, down, (lo, hi)))| {
            let spec = SyntheticLayer {
                h: side,
                w: side,
                scale: rng.random_range(lo..hi) / down,
                local_weight: rng.random_range(0.3..0.8),
                seed: rng.random(),
            };
            AttentionMap::new(
                MapMeta { layer, timestep: None, model_name: name.into() },
                synthetic_map(&spec)?,
            )
        })
        .collect()
}

/// JSON sidecar stored next to an attention-map DTF file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapMeta {
    pub layer: usize,
    /// `None` marks a map already aggregated over timesteps.
    pub timestep: Option<u32>,
    pub model_name: String,
}

/// Attention of every query over the H'×W' grid, shape (H'·W', H', W').
#[derive(Debug, Clone)]
pub struct AttentionMap {
    pub meta: MapMeta,
    pub values: Tensor<f64>,
}

impl AttentionMap {
    pub fn new(meta: MapMeta, values: Tensor<f64>) -> Result<Self> {
        let m = AttentionMap { meta, values };
        m.grid()?;
        Ok(m)
    }

    /// (H', W') of the key grid.
    pub fn grid(&self) -> Result<(usize, usize)> {
        match self.values.shape() {
            [q, h, w] if *q == h * w => Ok((*h, *w)),
            [q, h, w] => Err(Error::dim("query count", h * w, *q)),
            s => Err(Error::dim("attention map rank", 3, s.len())),
        }
    }

    pub fn query_count(&self) -> usize {
        self.values.shape()[0]
    }

    /// Map of one query as a row-major H'×W' slice.
    pub fn query(&self, q: usize) -> &[f64] {
        let n = self.values.shape()[1] * self.values.shape()[2];
        &self.values.data()[q * n..(q + 1) * n]
    }

    /// Largest deviation of any query row sum from one.
    pub fn row_sum_error(&self) -> f64 {
        (0..self.query_count())
            .map(|q| (self.query(q).iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// Write `<dir>/<stem>.dtf` and `<dir>/<stem>.json`.
    pub fn save(&self, dir: impl AsRef<Path>, stem: &str) -> Result<PathBuf> {
        let dir = dir.as_ref();
        let path = dir.join(format!("{stem}.dtf"));
        dtf::write(&path, &self.values, crate::DType::F64)?;
        fs::write(dir.join(format!("{stem}.json")), serde_json::to_string_pretty(&self.meta)?)?;
        Ok(path)
    }

    /// Load a map and its sidecar (same stem, `.json` extension).
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let values = dtf::read::<f64>(path)?;
        let side = path.with_extension("json");
        let text = fs::read_to_string(&side)?;
        let meta: MapMeta = serde_json::from_str(&text).map_err(|e| Error::Format {
            path: side.clone(),
            offset: 0,
            reason: e.to_string(),
        })?;
        AttentionMap::new(meta, values).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            offset: 0,
            reason: e.to_string(),
        })
    }

    /// Uniform average over timesteps; all inputs must share a grid.
    pub fn aggregate(maps: &[AttentionMap]) -> Result<AttentionMap> {
        let first = maps
            .first()
            .ok_or_else(|| Error::usage("no attention maps to aggregate"))?;
        let mut sum = first.values.clone();
        for m in &maps[1..] {
            sum = sum.zip_map(&m.values, |a, b| a + b)?;
        }
        let inv = 1.0 / maps.len() as f64;
        Ok(AttentionMap {
            meta: MapMeta {
                layer: first.meta.layer,
                timestep: None,
                model_name: first.meta.model_name.clone(),
            },
            values: sum.map(|v| v * inv),
        })
    }
}
