//! Attention locality analysis: attention score mass (ASM) curves, Butterworth
//! high-pass filtering of attention maps, and the effective receptive field.
//!
//! The ASM window is centered on the query itself: `ASM(q, K)` sums the map
//! over pixels `p` with `‖p − q‖∞ < K/2`, clipped at the borders without
//! renormalization. Filtered maps have negative entries, so their ASM sums
//! absolute values and divides by the total absolute mass; the full-map value
//! is then exactly one, except for maps with no high-frequency content, whose
//! curve stays near zero.

use std::io::Write;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::attention::AttentionMap;
use crate::error::{Error, Result};

/// Butterworth high-pass parameters. `d0` is measured in frequency bins.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Butterworth {
    pub d0: f64,
    pub order: u32,
}

impl Default for Butterworth {
    fn default() -> Self {
        Butterworth { d0: 4.0, order: 2 }
    }
}

impl Butterworth {
    pub fn validate(&self) -> Result<()> {
        if !(self.d0 > 0.0) || !self.d0.is_finite() {
            return Err(Error::config(format!("cutoff must be positive, got {}", self.d0)));
        }
        if self.order < 1 {
            return Err(Error::config("filter order must be at least 1"));
        }
        Ok(())
    }

    /// Gain at distance `d` from the zero-frequency bin; zero at `d = 0`.
    pub fn gain(&self, d: f64) -> f64 {
        if d == 0.0 {
            0.0
        } else {
            1.0 / (1.0 + (self.d0 / d).powi(2 * self.order as i32))
        }
    }
}

/// Signed frequency of DFT bin `k` on an axis of length `n` (centered spectrum).
fn signed_freq(k: usize, n: usize) -> f64 {
    if k <= n / 2 {
        k as f64
    } else {
        k as f64 - n as f64
    }
}

/// Gain of every bin of an `h`×`w` spectrum, row-major.
pub fn gain_mask(h: usize, w: usize, filter: &Butterworth) -> Vec<f64> {
    let mut g = Vec::with_capacity(h * w);
    for u in 0..h {
        for v in 0..w {
            let (fu, fv) = (signed_freq(u, h), signed_freq(v, w));
            g.push(filter.gain((fu * fu + fv * fv).sqrt()));
        }
    }
    g
}

/// Separable direct DFT of a row-major `h`×`w` array. `inverse` applies the
/// conjugate kernel and the 1/(h·w) normalization.
pub fn dft2_direct(data: &[Complex64], h: usize, w: usize, inverse: bool) -> Vec<Complex64> {
    let sign = if inverse { 1.0 } else { -1.0 };
    let twiddles = |n: usize| -> Vec<Complex64> {
        (0..n)
            .map(|k| Complex64::from_polar(1.0, sign * std::f64::consts::TAU * k as f64 / n as f64))
            .collect()
    };
    let (tw_w, tw_h) = (twiddles(w), twiddles(h));
    let mut rows = vec![Complex64::default(); h * w];
    for y in 0..h {
        for v in 0..w {
            let mut s = Complex64::default();
            for x in 0..w {
                s += data[y * w + x] * tw_w[(v * x) % w];
            }
            rows[y * w + v] = s;
        }
    }
    let mut out = vec![Complex64::default(); h * w];
    for u in 0..h {
        for v in 0..w {
            let mut s = Complex64::default();
            for y in 0..h {
                s += rows[y * w + v] * tw_h[(u * y) % h];
            }
            out[u * w + v] = s;
        }
    }
    if inverse {
        let inv = 1.0 / (h * w) as f64;
        for c in &mut out {
            *c *= inv;
        }
    }
    out
}

/// Map-sized FFT plans plus the filter's gain mask, reusable across queries.
pub struct HighPass {
    h: usize,
    w: usize,
    filter: Butterworth,
    gain: Vec<f64>,
    row_fwd: Arc<dyn Fft<f64>>,
    row_inv: Arc<dyn Fft<f64>>,
    col_fwd: Arc<dyn Fft<f64>>,
    col_inv: Arc<dyn Fft<f64>>,
}

impl HighPass {
    pub fn new(h: usize, w: usize, filter: Butterworth) -> Result<Self> {
        filter.validate()?;
        if h == 0 || w == 0 {
            return Err(Error::config("empty map"));
        }
        let mut planner = FftPlanner::new();
        Ok(HighPass {
            h,
            w,
            filter,
            gain: gain_mask(h, w, &filter),
            row_fwd: planner.plan_fft_forward(w),
            row_inv: planner.plan_fft_inverse(w),
            col_fwd: planner.plan_fft_forward(h),
            col_inv: planner.plan_fft_inverse(h),
        })
    }

    pub fn filter(&self) -> Butterworth {
        self.filter
    }

    fn transform(&self, buf: &mut [Complex64], inverse: bool) {
        let (h, w) = (self.h, self.w);
        let (row, col) = if inverse {
            (&self.row_inv, &self.col_inv)
        } else {
            (&self.row_fwd, &self.col_fwd)
        };
        row.process(buf);
        let mut column = vec![Complex64::default(); h];
        for x in 0..w {
            for y in 0..h {
                column[y] = buf[y * w + x];
            }
            col.process(&mut column);
            for y in 0..h {
                buf[y * w + x] = column[y];
            }
        }
        if inverse {
            let inv = 1.0 / (h * w) as f64;
            for c in buf.iter_mut() {
                *c *= inv;
            }
        }
    }

    /// Spectrum of a real map.
    pub fn forward(&self, values: &[f64]) -> Vec<Complex64> {
        let mut buf: Vec<Complex64> = values.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.transform(&mut buf, false);
        buf
    }

    /// Real part of the inverse transform.
    pub fn inverse(&self, spectrum: &[Complex64]) -> Vec<f64> {
        let mut buf = spectrum.to_vec();
        self.transform(&mut buf, true);
        buf.into_iter().map(|c| c.re).collect()
    }

    /// Filter one map (row-major `h`×`w`).
    pub fn apply(&self, values: &[f64]) -> Result<Vec<f64>> {
        if values.len() != self.h * self.w {
            return Err(Error::dim("map size", self.h * self.w, values.len()));
        }
        let mut spec = self.forward(values);
        for (c, &g) in spec.iter_mut().zip(&self.gain) {
            *c *= g;
        }
        Ok(self.inverse(&spec))
    }
}

/// High-pass filtered map.
#[derive(Debug, Clone, PartialEq)]
pub struct FilteredMap {
    pub values: Vec<f64>,
    pub h: usize,
    pub w: usize,
    pub filter: Butterworth,
}

/// Butterworth high-pass of a single `h`×`w` map (FFT path).
pub fn highpass_filter(values: &[f64], h: usize, w: usize, filter: Butterworth) -> Result<FilteredMap> {
    let hp = HighPass::new(h, w, filter)?;
    Ok(FilteredMap {
        values: hp.apply(values)?,
        h,
        w,
        filter,
    })
}

/// Same filter through the direct DFT; the reference for the FFT path.
pub fn highpass_filter_direct(values: &[f64], h: usize, w: usize, filter: Butterworth) -> Result<FilteredMap> {
    filter.validate()?;
    if values.len() != h * w {
        return Err(Error::dim("map size", h * w, values.len()));
    }
    let input: Vec<Complex64> = values.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    let mut spec = dft2_direct(&input, h, w, false);
    for (c, g) in spec.iter_mut().zip(gain_mask(h, w, &filter)) {
        *c *= g;
    }
    let out = dft2_direct(&spec, h, w, true);
    Ok(FilteredMap {
        values: out.into_iter().map(|c| c.re).collect(),
        h,
        w,
        filter,
    })
}

fn check_kernel(k: usize) -> Result<()> {
    if k < 1 || k.is_multiple_of(2) {
        return Err(Error::config(format!("kernel size must be odd and positive, got {k}")));
    }
    Ok(())
}

/// Clipped window of odd size `k` around `(qy, qx)`: inclusive-exclusive rows and columns.
fn window(h: usize, w: usize, (qy, qx): (usize, usize), k: usize) -> (usize, usize, usize, usize) {
    let r = k / 2;
    (
        qy.saturating_sub(r),
        (qy + r + 1).min(h),
        qx.saturating_sub(r),
        (qx + r + 1).min(w),
    )
}

/// Mass of a single-query map inside the K×K window centered on `query`.
pub fn asm(values: &[f64], h: usize, w: usize, query: (usize, usize), k: usize) -> Result<f64> {
    check_kernel(k)?;
    if values.len() != h * w {
        return Err(Error::dim("map size", h * w, values.len()));
    }
    if query.0 >= h || query.1 >= w {
        return Err(Error::usage(format!("query {query:?} outside a {h}x{w} map")));
    }
    let (y0, y1, x0, x1) = window(h, w, query, k);
    let mut s = 0.0;
    for y in y0..y1 {
        for x in x0..x1 {
            s += values[y * w + x];
        }
    }
    Ok(s)
}

/// Largest useful kernel size: one covering the whole map from any query.
pub fn full_kernel(h: usize, w: usize) -> usize {
    2 * h.max(w) - 1
}

/// Odd kernel sizes `1, 3, …, k_max`.
pub fn kernel_sizes(k_max: usize) -> Vec<usize> {
    (1..=k_max).step_by(2).collect()
}

/// Window sums for every kernel size in `kernel_sizes(k_max)`, via a summed-area table.
fn window_curve(values: &[f64], h: usize, w: usize, query: (usize, usize), k_max: usize, out: &mut Vec<f64>, sat: &mut Vec<f64>) {
    sat.clear();
    sat.resize((h + 1) * (w + 1), 0.0);
    for y in 0..h {
        let mut row = 0.0;
        for x in 0..w {
            row += values[y * w + x];
            sat[(y + 1) * (w + 1) + x + 1] = sat[y * (w + 1) + x + 1] + row;
        }
    }
    out.clear();
    for k in kernel_sizes(k_max) {
        let (y0, y1, x0, x1) = window(h, w, query, k);
        let at = |y: usize, x: usize| sat[y * (w + 1) + x];
        out.push(at(y1, x1) - at(y0, x1) - at(y1, x0) + at(y0, x0));
    }
}

/// Whether ASM is computed on raw maps or on their high-pass residual.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "mode")]
pub enum Mode {
    Raw,
    Filtered(Butterworth),
}

impl Mode {
    pub fn label(&self) -> &'static str {
        match self {
            Mode::Raw => "raw",
            Mode::Filtered(_) => "filtered",
        }
    }
}

/// Level at which an ASM profile was averaged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scope {
    PerQuery,
    PerLayer,
    Aggregated,
}

impl Scope {
    pub fn label(&self) -> &'static str {
        match self {
            Scope::PerQuery => "per-query",
            Scope::PerLayer => "per-layer",
            Scope::Aggregated => "aggregated",
        }
    }
}

/// ASM as a function of kernel size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AsmProfile {
    pub scope: Scope,
    pub mode: Mode,
    pub layer: Option<usize>,
    /// (H', W') of the maps; `None` when maps of several sizes were pooled.
    pub scale: Option<(usize, usize)>,
    pub kernel_sizes: Vec<usize>,
    pub asm: Vec<f64>,
    /// `asm[0]`, then differences between consecutive kernel sizes.
    pub gradient: Vec<f64>,
}

impl AsmProfile {
    fn from_curve(scope: Scope, mode: Mode, layer: Option<usize>, scale: Option<(usize, usize)>, asm: Vec<f64>) -> Self {
        let kernel_sizes = kernel_sizes(2 * asm.len() - 1);
        let gradient = asm
            .iter()
            .enumerate()
            .map(|(i, &a)| if i == 0 { a } else { a - asm[i - 1] })
            .collect();
        AsmProfile {
            scope,
            mode,
            layer,
            scale,
            kernel_sizes,
            asm,
            gradient,
        }
    }

    pub fn at(&self, k: usize) -> Option<f64> {
        self.kernel_sizes.iter().position(|&x| x == k).map(|i| self.asm[i])
    }
}

/// Relative residue below which a filtered map counts as empty.
pub const NO_RESIDUE: f64 = 1e-12;

/// Per-query ASM curves of one map, each of length `(k_max + 1) / 2`.
///
/// In filtered mode each query map is filtered and normalized by its total
/// absolute mass. A map whose residue is below [`NO_RESIDUE`] of its raw mass
/// (no high-frequency content) keeps its unnormalized, vanishing curve.
pub struct CurveIter<'a> {
    map: &'a AttentionMap,
    hp: Option<HighPass>,
    h: usize,
    w: usize,
    k_max: usize,
    queries: Vec<usize>,
    next: usize,
    sat: Vec<f64>,
}

impl<'a> CurveIter<'a> {
    pub fn new(map: &'a AttentionMap, mode: Mode, k_max: usize, query_stride: usize) -> Result<Self> {
        let (h, w) = map.grid()?;
        let hp = match mode {
            Mode::Raw => None,
            Mode::Filtered(f) => Some(HighPass::new(h, w, f)?),
        };
        let stride = query_stride.max(1);
        let queries = (0..h)
            .step_by(stride)
            .flat_map(|y| (0..w).step_by(stride).map(move |x| y * w + x))
            .collect();
        Ok(CurveIter {
            map,
            hp,
            h,
            w,
            k_max,
            queries,
            next: 0,
            sat: Vec::new(),
        })
    }

    pub fn query_count(&self) -> usize {
        self.queries.len()
    }
}

impl Iterator for CurveIter<'_> {
    type Item = Result<(usize, Vec<f64>)>;

    fn next(&mut self) -> Option<Self::Item> {
        let q = *self.queries.get(self.next)?;
        self.next += 1;
        let raw = self.map.query(q);
        let pos = (q / self.w, q % self.w);
        let mut curve = Vec::new();
        match &self.hp {
            None => window_curve(raw, self.h, self.w, pos, self.k_max, &mut curve, &mut self.sat),
            Some(hp) => {
                let f = match hp.apply(raw) {
                    Ok(f) => f,
                    Err(e) => return Some(Err(e)),
                };
                let abs: Vec<f64> = f.iter().map(|v| v.abs()).collect();
                let total: f64 = abs.iter().sum();
                let raw_mass: f64 = raw.iter().map(|v| v.abs()).sum();
                window_curve(&abs, self.h, self.w, pos, self.k_max, &mut curve, &mut self.sat);
                if total > NO_RESIDUE * raw_mass {
                    for c in &mut curve {
                        *c /= total;
                    }
                }
            }
        }
        Some(Ok((q, curve)))
    }
}

/// Profile of one layer's map, averaged over (strided) queries.
pub fn layer_profile(map: &AttentionMap, mode: Mode, query_stride: usize) -> Result<AsmProfile> {
    let (h, w) = map.grid()?;
    let k_max = full_kernel(h, w);
    let mut sum = vec![0.0; k_max.div_ceil(2)];
    let it = CurveIter::new(map, mode, k_max, query_stride)?;
    let n = it.query_count();
    for r in it {
        let (_, c) = r?;
        for (s, v) in sum.iter_mut().zip(c) {
            *s += v;
        }
    }
    let mean = sum.into_iter().map(|s| s / n as f64).collect();
    Ok(AsmProfile::from_curve(Scope::PerLayer, mode, Some(map.meta.layer), Some((h, w)), mean))
}

/// Profile averaged over every query of every layer.
///
/// Maps of different sizes share the kernel range of the largest; smaller
/// maps keep their full-coverage value beyond their own range.
pub fn asm_aggregate(maps: &[AttentionMap], mode: Mode, query_stride: usize) -> Result<AsmProfile> {
    if maps.is_empty() {
        return Err(Error::usage("no attention maps to aggregate"));
    }
    let mut grids = Vec::with_capacity(maps.len());
    for m in maps {
        grids.push(m.grid()?);
    }
    let k_max = grids.iter().map(|&(h, w)| full_kernel(h, w)).max().unwrap_or(1);
    let len = k_max.div_ceil(2);
    let mut sum = vec![0.0; len];
    let mut count = 0usize;
    for (m, &(h, w)) in maps.iter().zip(&grids) {
        for r in CurveIter::new(m, mode, full_kernel(h, w), query_stride)? {
            let (_, c) = r?;
            let last = *c.last().unwrap_or(&0.0);
            for (i, s) in sum.iter_mut().enumerate() {
                *s += c.get(i).copied().unwrap_or(last);
            }
            count += 1;
        }
    }
    let scale = if grids.iter().all(|g| *g == grids[0]) {
        Some(grids[0])
    } else {
        None
    };
    let mean = sum.into_iter().map(|s| s / count as f64).collect();
    Ok(AsmProfile::from_curve(Scope::Aggregated, mode, None, scale, mean))
}

/// Smallest kernel size in `profile` whose ASM reaches `threshold`.
/// Returns the largest kernel size and `false` when none does.
pub fn erf(profile: &AsmProfile, threshold: f64) -> Result<(usize, bool)> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::config(format!("threshold must lie in (0, 1], got {threshold}")));
    }
    // Tolerate the rounding of a full-map value that should be exactly one.
    let tol = 1e-12;
    for (&k, &a) in profile.kernel_sizes.iter().zip(&profile.asm) {
        if a + tol >= threshold {
            return Ok((k, true));
        }
    }
    Ok((*profile.kernel_sizes.last().unwrap_or(&1), false))
}

/// Effective receptive field of one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErfReport {
    pub layer: usize,
    pub model_name: String,
    pub scale: (usize, usize),
    pub k_hat: usize,
    /// False when no kernel size reached the threshold and `k_hat` is the full-map size.
    pub reached: bool,
    pub threshold: f64,
    pub mode: Mode,
    pub scope: Scope,
    /// Per-query values when computed per query; `k_hat` is then their median.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub per_query: Option<Vec<usize>>,
}

/// ERF of the layer-averaged profile.
pub fn layer_erf(map: &AttentionMap, mode: Mode, threshold: f64, query_stride: usize) -> Result<ErfReport> {
    let profile = layer_profile(map, mode, query_stride)?;
    let (k_hat, reached) = erf(&profile, threshold)?;
    Ok(ErfReport {
        layer: map.meta.layer,
        model_name: map.meta.model_name.clone(),
        scale: map.grid()?,
        k_hat,
        reached,
        threshold,
        mode,
        scope: Scope::PerLayer,
        per_query: None,
    })
}

/// ERF of every query separately; the report's `k_hat` is the median.
pub fn query_erf(map: &AttentionMap, mode: Mode, threshold: f64, query_stride: usize) -> Result<ErfReport> {
    let (h, w) = map.grid()?;
    let k_max = full_kernel(h, w);
    let mut ks = Vec::new();
    let mut all_reached = true;
    for r in CurveIter::new(map, mode, k_max, query_stride)? {
        let (_, c) = r?;
        let p = AsmProfile::from_curve(Scope::PerQuery, mode, Some(map.meta.layer), Some((h, w)), c);
        let (k, ok) = erf(&p, threshold)?;
        all_reached &= ok;
        ks.push(k);
    }
    let mut sorted = ks.clone();
    sorted.sort_unstable();
    Ok(ErfReport {
        layer: map.meta.layer,
        model_name: map.meta.model_name.clone(),
        scale: (h, w),
        k_hat: sorted[sorted.len() / 2],
        reached: all_reached,
        threshold,
        mode,
        scope: Scope::PerQuery,
        per_query: Some(ks),
    })
}

/// Outcome of the attention-sink check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SinkReport {
    pub layer: usize,
    pub detected: bool,
    /// (row, column) of the most frequent off-query peak.
    pub location: Option<(usize, usize)>,
    /// Fraction of queries whose peak sits at `location` and exceeds the mass fraction.
    pub query_share: f64,
    pub mass_fraction: f64,
}

/// Flags a single off-query pixel that holds more than `mass_fraction` of
/// the mass for a majority of queries.
pub fn detect_sink_artifact(map: &AttentionMap, mass_fraction: f64) -> Result<SinkReport> {
    let (_, w) = map.grid()?;
    let n = map.query_count();
    let mut votes = vec![0usize; n];
    for q in 0..n {
        let row = map.query(q);
        let total: f64 = row.iter().map(|v| v.abs()).sum();
        let (arg, peak) = row
            .iter()
            .enumerate()
            .fold((0, f64::MIN), |b, (i, &v)| if v > b.1 { (i, v) } else { b });
        if arg != q && total > 0.0 && peak > mass_fraction * total {
            votes[arg] += 1;
        }
    }
    let (best, &count) = votes
        .iter()
        .enumerate()
        .max_by_key(|&(i, c)| (*c, std::cmp::Reverse(i)))
        .expect("non-empty map");
    let share = count as f64 / n as f64;
    Ok(SinkReport {
        layer: map.meta.layer,
        detected: count * 2 > n,
        location: (count > 0).then_some((best / w, best % w)),
        query_share: share,
        mass_fraction,
    })
}

/// CSV header for [`write_profiles_csv`].
pub const PROFILE_CSV_HEADER: &str = "scope,layer,scale,K,asm,asm_gradient";

/// One row per kernel size per profile. The `scope` column carries the mode
/// as a suffix (`per-layer/filtered`); `layer` is empty for aggregates.
pub fn write_profiles_csv<W: Write>(out: &mut W, profiles: &[AsmProfile]) -> Result<()> {
    writeln!(out, "{PROFILE_CSV_HEADER}")?;
    for p in profiles {
        let layer = p.layer.map(|l| l.to_string()).unwrap_or_default();
        let scale = p.scale.map(|(h, w)| format!("{h}x{w}")).unwrap_or_else(|| "mixed".into());
        for ((k, a), g) in p.kernel_sizes.iter().zip(&p.asm).zip(&p.gradient) {
            writeln!(
                out,
                "{}/{},{layer},{scale},{k},{a:.12},{g:.12}",
                p.scope.label(),
                p.mode.label()
            )?;
        }
    }
    Ok(())
}
