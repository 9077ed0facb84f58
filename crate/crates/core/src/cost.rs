//! Analytic FLOPs for self-attention, neighborhood attention and ΔConvBlock.
//!
//! Self-attention (N = H'·W'):
//!
//! ```text
//! 4·N·C² + 4·N²·C + 4·N²
//! ```
//!
//! i.e. one FLOP per multiply-accumulate in the four projections (q, k, v,
//! output), two per multiply-accumulate in QKᵀ and AV, and four per score for
//! scaling and softmax. The instrumented counterpart is
//! `projection muls + 2 · spatial muls + 4 · exps` (see [`attention_counted_flops`]).
//!
//! Neighborhood attention replaces N² by N·K².
//!
//! ΔConvBlock counts every arithmetic operation the forward pass performs
//! (a multiply-accumulate is two FLOPs). With `C_m = C/n`, `C_g = C_m/2` and
//! stage factors `f` (pooled grid `Hf × Wf`, `Nf = Hf·Wf`, ceil-divided):
//!
//! ```text
//! layer norm        N·(7C + 5)
//! ψ_in              2·N·C·C_m
//! per stage, f > 1  Nf·C_m·(f² + 1)              average pool
//!                   2·C_m·taps(Hf, k)·taps(Wf, k) depthwise, valid taps only
//!                   2·Nf·C_g                      scaled gate (Nf·C_g unscaled)
//!                   7·N·C_g                       bilinear upsample
//! per stage, f = 1  2·C_m·taps(H, k)·taps(W, k) + 2·N·C_g
//! stage sum         (stages − 1)·N·C_g
//! ψ_out             2·N·C_g·C
//! pooling branch    C·(N + 1) + 2·C² + N·C
//! ```
//!
//! where `taps(L, k) = Σ_{|o| ≤ k/2} max(0, L − |o|)`.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::counting::{CounterSnapshot, OpCategory};
use crate::error::{Error, Result};

/// Kind of block at an attention site.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "params", rename_all = "kebab-case")]
pub enum BlockKind {
    SelfAttention,
    Neighborhood { k: usize },
    DeltaConv(DeltaParams),
}

/// ΔConvBlock hyperparameters relevant to cost.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaParams {
    pub n_stages: u32,
    pub stage_kernels: Vec<usize>,
    #[serde(default)]
    pub include_stage0: bool,
    #[serde(default = "yes")]
    pub pooling_branch: bool,
    #[serde(default = "yes")]
    pub scaled_gate: bool,
}

fn yes() -> bool {
    true
}

impl DeltaParams {
    pub fn factors(&self) -> Vec<usize> {
        let first = if self.include_stage0 { 0 } else { 1 };
        (first..=self.n_stages).map(|i| 1usize << i).collect()
    }

    pub fn from_block(config: &crate::delta_conv::BlockConfig) -> Self {
        DeltaParams {
            n_stages: config.n_stages,
            stage_kernels: config.stage_kernels.clone(),
            include_stage0: config.include_stage0,
            pooling_branch: config.pooling_branch,
            scaled_gate: config.gate.scaled,
        }
    }
}

/// One attention site at a concrete resolution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    #[serde(flatten)]
    pub kind: BlockKind,
}

impl LayerSpec {
    pub fn new(h: usize, w: usize, c: usize, kind: BlockKind) -> Result<Self> {
        let s = LayerSpec { h, w, c, kind };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.h == 0 || self.w == 0 || self.c == 0 {
            return Err(Error::config(format!(
                "layer dims must be positive, got {}x{}x{}",
                self.h, self.w, self.c
            )));
        }
        match &self.kind {
            BlockKind::Neighborhood { k } if k % 2 == 0 => {
                Err(Error::config(format!("neighborhood size must be odd, got {k}")))
            }
            BlockKind::DeltaConv(p) => {
                let n = p.n_stages.max(1) as usize;
                if !self.c.is_multiple_of(n) || !(self.c / n).is_multiple_of(2) {
                    return Err(Error::config(format!(
                        "{} channels cannot feed {} stages",
                        self.c, p.n_stages
                    )));
                }
                if p.stage_kernels.len() != p.factors().len() {
                    return Err(Error::dim("stage kernel count", p.factors().len(), p.stage_kernels.len()));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    pub fn pixels(&self) -> u128 {
        (self.h * self.w) as u128
    }

    /// FLOPs of whatever block this site holds.
    pub fn flops(&self) -> Result<u128> {
        match self.kind {
            BlockKind::SelfAttention => attn_flops(self),
            BlockKind::Neighborhood { .. } => na_flops(self),
            BlockKind::DeltaConv(_) => delta_flops(self),
        }
    }

    pub fn with_kind(&self, kind: BlockKind) -> Self {
        LayerSpec { kind, ..self.clone() }
    }
}

/// `4·N·C² + 4·N²·C + 4·N²`.
pub fn attn_flops(spec: &LayerSpec) -> Result<u128> {
    if spec.kind != BlockKind::SelfAttention {
        return Err(Error::usage("attn_flops needs a self-attention layer"));
    }
    let (n, c) = (spec.pixels(), spec.c as u128);
    Ok(4 * n * c * c + 4 * n * n * c + 4 * n * n)
}

/// `4·N·C² + 4·N·K²·C + 4·N·K²`.
pub fn na_flops(spec: &LayerSpec) -> Result<u128> {
    let BlockKind::Neighborhood { k } = spec.kind else {
        return Err(Error::usage("na_flops needs a neighborhood-attention layer"));
    };
    let (n, c, k2) = (spec.pixels(), spec.c as u128, (k * k) as u128);
    Ok(4 * n * c * c + 4 * n * k2 * c + 4 * n * k2)
}

/// Valid taps of an odd kernel `k` sliding over a zero-padded axis of length `len`.
pub fn valid_taps(len: usize, k: usize) -> u128 {
    let r = (k / 2) as i64;
    (-r..=r).map(|o| (len as i64 - o.abs()).max(0) as u128).sum()
}

/// Itemized ΔConvBlock FLOPs.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct DeltaBreakdown {
    pub layer_norm: u128,
    pub psi_in: u128,
    pub pool: u128,
    pub depthwise: u128,
    pub gate: u128,
    pub upsample: u128,
    pub stage_sum: u128,
    pub psi_out: u128,
    pub pooling_branch: u128,
}

impl DeltaBreakdown {
    pub fn total(&self) -> u128 {
        self.layer_norm
            + self.psi_in
            + self.pool
            + self.depthwise
            + self.gate
            + self.upsample
            + self.stage_sum
            + self.psi_out
            + self.pooling_branch
    }
}

pub fn delta_breakdown(spec: &LayerSpec) -> Result<DeltaBreakdown> {
    spec.validate()?;
    let BlockKind::DeltaConv(p) = &spec.kind else {
        return Err(Error::usage("delta_flops needs a delta-conv layer"));
    };
    let n = spec.pixels();
    let c = spec.c as u128;
    let cm = (spec.c / p.n_stages.max(1) as usize) as u128;
    let cg = cm / 2;
    let mut b = DeltaBreakdown {
        layer_norm: n * (7 * c + 5),
        psi_in: 2 * n * c * cm,
        psi_out: 2 * n * cg * c,
        ..Default::default()
    };
    let factors = p.factors();
    for (&f, &k) in factors.iter().zip(&p.stage_kernels) {
        let (hf, wf) = (spec.h.div_ceil(f), spec.w.div_ceil(f));
        let nf = (hf * wf) as u128;
        b.depthwise += 2 * cm * valid_taps(hf, k) * valid_taps(wf, k);
        b.gate += if p.scaled_gate { 2 } else { 1 } * nf * cg;
        if f > 1 {
            b.pool += nf * cm * ((f * f) as u128 + 1);
            b.upsample += 7 * n * cg;
        }
    }
    b.stage_sum = (factors.len() as u128 - 1) * n * cg;
    if p.pooling_branch {
        b.pooling_branch = c * (n + 1) + 2 * c * c + n * c;
    }
    Ok(b)
}

pub fn delta_flops(spec: &LayerSpec) -> Result<u128> {
    Ok(delta_breakdown(spec)?.total())
}

/// Attention FLOPs from instrumented counts under the closed form's convention.
pub fn attention_counted_flops(s: &CounterSnapshot) -> u64 {
    s.category(OpCategory::Projection).muls
        + 2 * s.category(OpCategory::Spatial).muls
        + 4 * s.category(OpCategory::Softmax).exps
}

/// ΔConvBlock FLOPs from instrumented counts: every counted operation.
pub fn delta_counted_flops(s: &CounterSnapshot) -> u64 {
    s.total().flops()
}

/// Attention site as written in a model config: dims at the reference resolution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteSpec {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    #[serde(flatten)]
    pub kind: BlockKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
}

/// Attention-site inventory of a diffusion backbone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub name: String,
    /// Image pixels per latent pixel.
    pub downscale: usize,
    /// Image resolution (height, width) at which the site dims are given.
    pub reference: (usize, usize),
    /// ΔConvBlock that replaces each attention site.
    pub replacement: DeltaParams,
    /// Divisor turning totals into the reported per-model mean (1 = plain totals).
    #[serde(default = "one")]
    pub mean_divisor: u32,
    #[serde(default)]
    pub notes: Vec<String>,
    pub layers: Vec<SiteSpec>,
}

fn one() -> u32 {
    1
}

/// Named image resolutions, as (height, width).
pub const RESOLUTION_PRESETS: [(&str, (usize, usize)); 6] = [
    ("512", (512, 512)),
    ("1024", (1024, 1024)),
    ("2K", (1440, 2560)),
    ("4K", (2160, 3840)),
    ("8K", (4320, 7680)),
    ("16K", (8640, 15360)),
];

/// A resolution label plus its image size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Resolution {
    pub label: String,
    pub h: usize,
    pub w: usize,
}

impl Resolution {
    /// Parses a preset name (`512`, `2K`, …) or `WIDTHxHEIGHT`.
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        if let Some((_, (h, w))) = RESOLUTION_PRESETS.iter().find(|(n, _)| n.eq_ignore_ascii_case(s)) {
            return Ok(Resolution { label: s.to_uppercase(), h: *h, w: *w });
        }
        let parse = |v: &str| v.parse::<usize>().ok().filter(|&v| v > 0);
        if let Some((w, h)) = s.split_once(['x', 'X']) {
            if let (Some(w), Some(h)) = (parse(w), parse(h)) {
                return Ok(Resolution { label: s.to_string(), h, w });
            }
        }
        if let Some(v) = parse(s) {
            return Ok(Resolution { label: s.to_string(), h: v, w: v });
        }
        Err(Error::usage(format!(
            "cannot parse resolution {s:?}; use a preset (512, 1024, 2K, 4K, 8K, 16K), a side length, or WIDTHxHEIGHT"
        )))
    }

    pub fn presets() -> Vec<Resolution> {
        RESOLUTION_PRESETS
            .iter()
            .map(|(n, (h, w))| Resolution { label: n.to_string(), h: *h, w: *w })
            .collect()
    }
}

impl ModelConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let c: ModelConfig = serde_json::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    /// SD1.5-like U-Net inventory shipped with the crate.
    pub fn sd15_like() -> Self {
        Self::from_json(include_str!("../data/sd15_like.json")).expect("bundled config is valid")
    }

    /// PixArt-like transformer inventory shipped with the crate.
    pub fn pixart_like() -> Self {
        Self::from_json(include_str!("../data/pixart_like.json")).expect("bundled config is valid")
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::config(format!("model {:?} has no layers", self.name)));
        }
        if self.downscale == 0 || self.mean_divisor == 0 {
            return Err(Error::config("downscale and mean divisor must be positive"));
        }
        self.reference_latent()?;
        for (i, site) in self.layers.iter().enumerate() {
            self.stride(i)?;
            LayerSpec::new(site.h, site.w, site.c, site.kind.clone())?;
            LayerSpec::new(site.h, site.w, site.c, BlockKind::DeltaConv(self.replacement.clone()))?;
        }
        Ok(())
    }

    fn latent(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if !h.is_multiple_of(self.downscale) || !w.is_multiple_of(self.downscale) {
            return Err(Error::config(format!(
                "{w}x{h} is not divisible by the latent downscale factor {}",
                self.downscale
            )));
        }
        Ok((h / self.downscale, w / self.downscale))
    }

    fn reference_latent(&self) -> Result<(usize, usize)> {
        self.latent(self.reference.0, self.reference.1)
    }

    /// Integer downsampling of site `i` relative to the latent grid.
    fn stride(&self, i: usize) -> Result<(usize, usize)> {
        let (lh, lw) = self.reference_latent()?;
        let s = &self.layers[i];
        if s.h == 0 || s.w == 0 || lh % s.h != 0 || lw % s.w != 0 {
            return Err(Error::config(format!(
                "layer {i} ({}x{}) is not an integer subsampling of the {lw}x{lh} reference latent",
                s.w, s.h
            )));
        }
        Ok((lh / s.h, lw / s.w))
    }

    /// Site specs at image resolution `h`×`w`; strided dims round up as padded
    /// stride-2 convolutions do.
    pub fn layers_at(&self, h: usize, w: usize) -> Result<Vec<LayerSpec>> {
        let (lh, lw) = self.latent(h, w)?;
        (0..self.layers.len())
            .map(|i| {
                let (sh, sw) = self.stride(i)?;
                let s = &self.layers[i];
                LayerSpec::new(lh.div_ceil(sh), lw.div_ceil(sw), s.c, s.kind.clone())
            })
            .collect()
    }
}

/// Cost of one model at one resolution.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub resolution: Resolution,
    pub latent: (usize, usize),
    /// Per-site FLOPs of the original attention blocks.
    pub attention: Vec<u128>,
    /// Per-site FLOPs of the ΔConvBlock replacements.
    pub delta: Vec<u128>,
    pub attention_total: u128,
    pub delta_total: u128,
    pub mean_divisor: u32,
}

impl SweepRow {
    pub fn attention_mean(&self) -> f64 {
        self.attention_total as f64 / self.mean_divisor as f64
    }

    pub fn delta_mean(&self) -> f64 {
        self.delta_total as f64 / self.mean_divisor as f64
    }

    /// Attention / ΔConv; independent of the divisor and the FLOPs unit.
    pub fn ratio(&self) -> f64 {
        self.attention_total as f64 / self.delta_total as f64
    }
}

/// Resolution sweep of one model.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostReport {
    pub model: String,
    pub rows: Vec<SweepRow>,
}

/// Per-site and total FLOPs of attention and its ΔConv replacement at every resolution.
pub fn model_sweep(config: &ModelConfig, resolutions: &[Resolution]) -> Result<CostReport> {
    config.validate()?;
    if resolutions.is_empty() {
        return Err(Error::usage("no resolutions given"));
    }
    let rows = resolutions
        .iter()
        .map(|r| {
            let layers = config.layers_at(r.h, r.w)?;
            let attention = layers.iter().map(|l| l.flops()).collect::<Result<Vec<_>>>()?;
            let delta = layers
                .iter()
                .map(|l| delta_flops(&l.with_kind(BlockKind::DeltaConv(config.replacement.clone()))))
                .collect::<Result<Vec<_>>>()?;
            Ok(SweepRow {
                resolution: r.clone(),
                latent: config.latent(r.h, r.w)?,
                attention_total: attention.iter().sum(),
                delta_total: delta.iter().sum(),
                attention,
                delta,
                mean_divisor: config.mean_divisor,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CostReport { model: config.name.clone(), rows })
}

/// Square resolutions doubling in side from 256 to 16384, for scaling curves.
pub fn doubling_resolutions() -> Vec<Resolution> {
    (8..=14)
        .map(|e| {
            let s = 1usize << e;
            Resolution { label: s.to_string(), h: s, w: s }
        })
        .collect()
}

const GIGA: f64 = 1e9;

impl CostReport {
    pub const HEADER: &'static str = "resolution,image_w,image_h,latent_w,latent_h,attention_gflops,deltaconv_gflops,attention_total_gflops,deltaconv_total_gflops,ratio";

    pub const LAYER_HEADER: &'static str = "resolution,layer,h,w,c,attention_flops,deltaconv_flops,ratio";

    /// Table-shaped CSV: one row per resolution.
    pub fn write_csv<W: Write>(&self, out: &mut W) -> Result<()> {
        writeln!(out, "{}", Self::HEADER)?;
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{},{:.2},{:.2},{:.2},{:.2},{:.1}",
                r.resolution.label,
                r.resolution.w,
                r.resolution.h,
                r.latent.1,
                r.latent.0,
                r.attention_mean() / GIGA,
                r.delta_mean() / GIGA,
                r.attention_total as f64 / GIGA,
                r.delta_total as f64 / GIGA,
                r.ratio()
            )?;
        }
        Ok(())
    }

    /// One row per site per resolution, exact integer FLOPs.
    pub fn write_layer_csv<W: Write>(&self, config: &ModelConfig, out: &mut W) -> Result<()> {
        writeln!(out, "{}", Self::LAYER_HEADER)?;
        for r in &self.rows {
            let layers = config.layers_at(r.resolution.h, r.resolution.w)?;
            for (i, l) in layers.iter().enumerate() {
                writeln!(
                    out,
                    "{},{i},{},{},{},{},{},{:.3}",
                    r.resolution.label,
                    l.h,
                    l.w,
                    l.c,
                    r.attention[i],
                    r.delta[i],
                    r.attention[i] as f64 / r.delta[i] as f64
                )?;
            }
        }
        Ok(())
    }
}
