//! ΔConvBlock: a pyramid of depthwise convolutions for local mixing plus a
//! global-average-pooling branch for the low-frequency component.
//!
//! ```text
//! zₙ  = LN(z)
//! out = ψ_out( Σᵢ Δᵢ(ψ_in(zₙ)) ) + broadcast(ψ_p(GAP(zₙ)))
//! Δᵢ(x) = up_{2^i}( ρ( dwconv_{kᵢ}( down_{2^i}(x) ) ) )
//! ```
//!
//! Channel bookkeeping: ψ_in maps C to `C_mid = C/n`, each stage keeps
//! `C_mid` through its depthwise conv, the gate ρ halves it to `C/(2n)`,
//! stage outputs are summed and ψ_out maps `C/(2n)` back to C. The residual
//! connection around the block belongs to the caller.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::Linear;
use crate::dtf;
use crate::error::{Error, Result};
use crate::ops::{self, LAYER_NORM_EPS};
use crate::scalar::{DType, Scalar};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Gate variant: `scaled` divides the product of the halves by √C.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GateConfig {
    pub scaled: bool,
}

impl Default for GateConfig {
    fn default() -> Self {
        GateConfig { scaled: true }
    }
}

/// ρ(f) = f_{<C/2} · f_{≥C/2} / √C.
pub fn scaled_simple_gate<T: Scalar>(f: &Tensor<T>) -> Result<Tensor<T>> {
    ops::simple_gate(f, true)
}

fn check_divisible(h: usize, w: usize, factor: usize) -> Result<()> {
    if !h.is_multiple_of(factor) {
        return Err(Error::dim(format!("height (divisible by {factor})"), h.div_ceil(factor) * factor, h));
    }
    if !w.is_multiple_of(factor) {
        return Err(Error::dim(format!("width (divisible by {factor})"), w.div_ceil(factor) * factor, w));
    }
    Ok(())
}

/// One pyramid stage at resampling factor `2^i`; halves the channel count.
pub fn pyramid_stage<T: Scalar>(z_in: &Tensor<T>, i: u32, kernels: &Tensor<T>, gate: GateConfig) -> Result<Tensor<T>> {
    let (_, _, h, w) = z_in.dims4()?;
    let f = 1usize << i;
    check_divisible(h, w, f)?;
    let down = ops::avg_pool(z_in, f)?;
    let conv = ops::depthwise_conv(&down, kernels)?;
    let gated = ops::simple_gate(&conv, gate.scaled)?;
    ops::bilinear_upsample(&gated, f)
}

/// ψ_p(GAP(z_norm)) broadcast over the spatial grid.
pub fn pooling_branch<T: Scalar>(z_norm: &Tensor<T>, psi_p: &Linear<T>) -> Result<Tensor<T>> {
    let (_, _, h, w) = z_norm.dims4()?;
    let pooled = ops::global_avg_pool(z_norm)?;
    ops::broadcast_spatial(&psi_p.apply(&pooled)?, h, w)
}

/// GAP(ψ_p(z_norm)) broadcast; the same map with the operations swapped.
pub fn pooling_branch_conv_first<T: Scalar>(z_norm: &Tensor<T>, psi_p: &Linear<T>) -> Result<Tensor<T>> {
    let (_, _, h, w) = z_norm.dims4()?;
    ops::broadcast_spatial(&ops::global_avg_pool(&psi_p.apply(z_norm)?)?, h, w)
}

/// Architecture of a block; serialized as the checkpoint manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub channels: usize,
    /// Number of resampled stages n; stages use factors 2, 4, …, 2^n.
    pub n_stages: u32,
    /// Depthwise kernel size of every stage, in factor order.
    pub stage_kernels: Vec<usize>,
    /// Adds an unresampled stage (factor 1) in front of the pyramid.
    #[serde(default)]
    pub include_stage0: bool,
    #[serde(default)]
    pub gate: GateConfig,
    #[serde(default = "yes")]
    pub pooling_branch: bool,
    /// Receptive field the kernels were calibrated for, if any.
    #[serde(default)]
    pub target_k: Option<usize>,
    /// Initial ψ_in bias of the second gate half, so every stage starts as a
    /// linear filter scaled by this value.
    #[serde(default = "one")]
    pub gate_bias_init: f64,
}

fn yes() -> bool {
    true
}

fn one() -> f64 {
    1.0
}

impl BlockConfig {
    pub fn new(channels: usize, n_stages: u32, stage_kernels: Vec<usize>) -> Result<Self> {
        let c = BlockConfig {
            channels,
            n_stages,
            stage_kernels,
            include_stage0: false,
            gate: GateConfig::default(),
            pooling_branch: true,
            target_k: None,
            gate_bias_init: 1.0,
        };
        c.validate()?;
        Ok(c)
    }

    /// Kernels calibrated for receptive field `target_k`.
    pub fn calibrated(channels: usize, n_stages: u32, target_k: usize) -> Result<Self> {
        let mut c = Self::new(channels, n_stages, calibrate_kernel_sizes(target_k, n_stages, false)?)?;
        c.target_k = Some(target_k);
        Ok(c)
    }

    pub fn mid_channels(&self) -> usize {
        self.channels / self.n_stages.max(1) as usize
    }

    pub fn gate_channels(&self) -> usize {
        self.mid_channels() / 2
    }

    /// Resampling factor of every stage, in order.
    pub fn factors(&self) -> Vec<usize> {
        let first = if self.include_stage0 { 0 } else { 1 };
        (first..=self.n_stages).map(|i| 1usize << i).collect()
    }

    /// Largest factor; spatial dims must be divisible by it.
    pub fn max_factor(&self) -> usize {
        1 << self.n_stages
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_stages == 0 && !self.include_stage0 {
            return Err(Error::config("a block needs at least one stage"));
        }
        let n = self.n_stages.max(1) as usize;
        if self.channels == 0 || !self.channels.is_multiple_of(n) || !(self.channels / n).is_multiple_of(2) {
            return Err(Error::config(format!(
                "channels ({}) must be a positive multiple of 2·n ({})",
                self.channels,
                2 * n
            )));
        }
        if self.stage_kernels.len() != self.factors().len() {
            return Err(Error::dim("stage kernel count", self.factors().len(), self.stage_kernels.len()));
        }
        if let Some(&k) = self.stage_kernels.iter().find(|&&k| k % 2 == 0) {
            return Err(Error::config(format!("depthwise kernel size must be odd, got {k}")));
        }
        Ok(())
    }
}

/// Trainable block parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaConvBlock<T> {
    pub config: BlockConfig,
    pub ln_gain: Tensor<T>,
    pub ln_bias: Tensor<T>,
    pub psi_in: Linear<T>,
    /// One (C_mid, k, k) tensor per stage.
    pub kernels: Vec<Tensor<T>>,
    pub psi_out: Linear<T>,
    pub psi_p: Linear<T>,
}

/// Tape handles for every parameter of a block.
#[derive(Debug, Clone)]
pub struct BlockVars {
    pub ln_gain: Var,
    pub ln_bias: Var,
    pub in_w: Var,
    pub in_b: Var,
    pub kernels: Vec<Var>,
    pub out_w: Var,
    pub out_b: Var,
    pub p_w: Var,
    pub p_b: Var,
}

impl BlockVars {
    /// Handles in [`DeltaConvBlock::named_params`] order.
    pub fn all(&self) -> Vec<Var> {
        let mut v = vec![self.ln_gain, self.ln_bias, self.in_w, self.in_b];
        v.extend(&self.kernels);
        v.extend([self.out_w, self.out_b, self.p_w, self.p_b]);
        v
    }
}

impl<T: Scalar> DeltaConvBlock<T> {
    /// Seeded initialization: near-delta depthwise kernels, variance-scaled 1×1 convs.
    pub fn init(config: BlockConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (c, cm, cg) = (config.channels, config.mid_channels(), config.gate_channels());
        let kernels = config
            .stage_kernels
            .iter()
            .map(|&k| {
                let noise = Tensor::<T>::randn(vec![cm, k, k], 0.1 / k as f64, &mut rng);
                let center = (k / 2) * k + k / 2;
                noise.into_data()
                    .into_iter()
                    .enumerate()
                    .map(|(i, v)| if i % (k * k) == center { v + T::one() } else { v })
                    .collect::<Vec<_>>()
            })
            .zip(&config.stage_kernels)
            .map(|(d, &k)| Tensor::new(vec![cm, k, k], d))
            .collect::<Result<Vec<_>>>()?;
        let mut psi_in = Linear::random(cm, c, &mut rng);
        for b in &mut psi_in.bias.data_mut()[cg..] {
            *b = T::of(config.gate_bias_init);
        }
        Ok(DeltaConvBlock {
            ln_gain: Tensor::full(vec![c], T::one()),
            ln_bias: Tensor::zeros(vec![c]),
            psi_in,
            kernels,
            psi_out: Linear::random(c, cg, &mut rng),
            psi_p: Linear::random(c, c, &mut rng),
            config,
        })
    }

    /// Every parameter with a stable name.
    pub fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut v = vec![
            ("ln_gain".to_string(), &self.ln_gain),
            ("ln_bias".to_string(), &self.ln_bias),
            ("psi_in.weight".to_string(), &self.psi_in.weight),
            ("psi_in.bias".to_string(), &self.psi_in.bias),
        ];
        for (i, k) in self.kernels.iter().enumerate() {
            v.push((format!("stage{i}.kernel"), k));
        }
        v.extend([
            ("psi_out.weight".to_string(), &self.psi_out.weight),
            ("psi_out.bias".to_string(), &self.psi_out.bias),
            ("psi_p.weight".to_string(), &self.psi_p.weight),
            ("psi_p.bias".to_string(), &self.psi_p.bias),
        ]);
        v
    }

    /// Mutable parameters in [`Self::named_params`] order.
    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut v = vec![
            &mut self.ln_gain,
            &mut self.ln_bias,
            &mut self.psi_in.weight,
            &mut self.psi_in.bias,
        ];
        v.extend(self.kernels.iter_mut());
        v.extend([
            &mut self.psi_out.weight,
            &mut self.psi_out.bias,
            &mut self.psi_p.weight,
            &mut self.psi_p.bias,
        ]);
        v
    }

    pub fn parameter_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.named_params().iter().all(|(_, t)| t.is_finite())
    }

    /// Put the parameters on `tape`, trainable or frozen.
    pub fn register(&self, tape: &mut Tape<T>, trainable: bool) -> BlockVars {
        let mut leaf = |t: &Tensor<T>| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        BlockVars {
            ln_gain: leaf(&self.ln_gain),
            ln_bias: leaf(&self.ln_bias),
            in_w: leaf(&self.psi_in.weight),
            in_b: leaf(&self.psi_in.bias),
            kernels: self.kernels.iter().map(&mut leaf).collect(),
            out_w: leaf(&self.psi_out.weight),
            out_b: leaf(&self.psi_out.bias),
            p_w: leaf(&self.psi_p.weight),
            p_b: leaf(&self.psi_p.bias),
        }
    }

    /// Record the block on `tape` for input `z`.
    pub fn record(&self, tape: &mut Tape<T>, z: Var, vars: &BlockVars) -> Result<Var> {
        let (_, c, h, w) = tape.value(z).dims4()?;
        if c != self.config.channels {
            return Err(Error::dim("block input channels", self.config.channels, c));
        }
        check_divisible(h, w, self.config.max_factor())?;
        let zn = tape.layer_norm(z, vars.ln_gain, vars.ln_bias, LAYER_NORM_EPS)?;
        let mid = tape.conv1x1(zn, vars.in_w, vars.in_b)?;
        let mut acc: Option<Var> = None;
        for (&f, &kv) in self.config.factors().iter().zip(&vars.kernels) {
            let down = if f > 1 { tape.avg_pool(mid, f)? } else { mid };
            let conv = tape.depthwise_conv(down, kv)?;
            let gated = tape.simple_gate(conv, self.config.gate.scaled)?;
            let up = if f > 1 { tape.bilinear_upsample(gated, f)? } else { gated };
            acc = Some(match acc {
                None => up,
                Some(a) => tape.add(a, up)?,
            });
        }
        let summed = acc.expect("validated block has a stage");
        let mut out = tape.conv1x1(summed, vars.out_w, vars.out_b)?;
        if self.config.pooling_branch {
            let pooled = tape.global_avg_pool(zn)?;
            let proj = tape.conv1x1(pooled, vars.p_w, vars.p_b)?;
            let wide = tape.broadcast_spatial(proj, h, w)?;
            out = tape.add(out, wide)?;
        }
        Ok(out)
    }

    /// Plain forward pass.
    pub fn forward(&self, z: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, false);
        let x = tape.constant(z.clone());
        let out = self.record(&mut tape, x, &vars)?;
        Ok(tape.value(out).clone())
    }

    pub fn cast<U: Scalar>(&self) -> DeltaConvBlock<U> {
        let lin = |l: &Linear<T>| Linear {
            weight: l.weight.cast(),
            bias: l.bias.cast(),
        };
        DeltaConvBlock {
            config: self.config.clone(),
            ln_gain: self.ln_gain.cast(),
            ln_bias: self.ln_bias.cast(),
            psi_in: lin(&self.psi_in),
            kernels: self.kernels.iter().map(|k| k.cast()).collect(),
            psi_out: lin(&self.psi_out),
            psi_p: lin(&self.psi_p),
        }
    }

    /// Write `manifest.json` and one DTF file per parameter into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let mut files = Vec::new();
        for (name, t) in self.named_params() {
            let file = format!("{name}.dtf");
            dtf::write_native(dir.join(&file), t)?;
            files.push(file);
        }
        let manifest = BlockManifest {
            config: self.config.clone(),
            mid_channels: self.config.mid_channels(),
            gate_channels: self.config.gate_channels(),
            dtype: T::DTYPE,
            files,
        };
        fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    /// Load a block written by [`Self::save`].
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let mpath = dir.join(MANIFEST);
        let manifest: BlockManifest = serde_json::from_str(&fs::read_to_string(&mpath)?).map_err(|e| Error::Format {
            path: mpath.clone(),
            offset: 0,
            reason: e.to_string(),
        })?;
        manifest.config.validate()?;
        let mut block = DeltaConvBlock::<T>::init(manifest.config, 0)?;
        let names: Vec<String> = block.named_params().into_iter().map(|(n, _)| n).collect();
        for (name, slot) in names.iter().zip(block.params_mut()) {
            let path = dir.join(format!("{name}.dtf"));
            let t = dtf::read::<T>(&path)?;
            if t.shape() != slot.shape() {
                return Err(Error::Format {
                    path,
                    offset: 4,
                    reason: format!("shape {:?}, expected {:?}", t.shape(), slot.shape()),
                });
            }
            *slot = t;
        }
        Ok(block)
    }
}

const MANIFEST: &str = "manifest.json";

#[derive(Debug, Serialize, Deserialize)]
struct BlockManifest {
    #[serde(flatten)]
    config: BlockConfig,
    mid_channels: usize,
    gate_channels: usize,
    dtype: DType,
    files: Vec<String>,
}

/// Bounding-box extent (max of height and width, in pixels) of the region
/// where `response` differs from `baseline` by more than `tol`; 0 if nowhere.
pub fn support_extent(response: &[f64], baseline: &[f64], h: usize, w: usize, tol: f64) -> usize {
    let (mut y0, mut y1, mut x0, mut x1) = (usize::MAX, 0, usize::MAX, 0);
    for y in 0..h {
        for x in 0..w {
            if (response[y * w + x] - baseline[y * w + x]).abs() > tol {
                y0 = y0.min(y);
                y1 = y1.max(y);
                x0 = x0.min(x);
                x1 = x1.max(x);
            }
        }
    }
    if y0 == usize::MAX {
        0
    } else {
        (y1 - y0 + 1).max(x1 - x0 + 1)
    }
}

/// Impulse-response support of a block: the largest [`support_extent`] of
/// the output's channel-summed absolute change over every impulse phase
/// modulo the largest resampling factor. Uses an impulse of unit height in
/// channel 0 on a zero background.
pub fn impulse_support(block: &DeltaConvBlock<f64>) -> Result<usize> {
    let cfg = &block.config;
    let f = cfg.max_factor();
    let reach = cfg
        .factors()
        .iter()
        .zip(&cfg.stage_kernels)
        .map(|(&fa, &k)| fa * (k + 2))
        .max()
        .unwrap_or(1);
    let side = (2 * reach + 2 * f).div_ceil(f) * f;
    let c = cfg.channels;
    let zero = Tensor::<f64>::zeros(vec![1, c, side, side]);
    let base = block.forward(&zero)?.into_data();
    let mut best = 0;
    for py in 0..f {
        for px in 0..f {
            let mut z = zero.clone();
            let (cy, cx) = (side / 2 - f + py, side / 2 - f + px);
            z.data_mut()[cy * side + cx] = 1.0;
            let resp = block.forward(&z)?;
            let out = resp.data();
            let plane = side * side;
            let mut diff = vec![0.0; plane];
            for ch in 0..c {
                for p in 0..plane {
                    diff[p] += (out[ch * plane + p] - base[ch * plane + p]).abs();
                }
            }
            let scale = diff.iter().cloned().fold(0.0, f64::max);
            best = best.max(support_extent(&diff, &vec![0.0; plane], side, side, 1e-12 * scale.max(1e-300)));
        }
    }
    Ok(best)
}

/// Block whose response to a non-negative impulse cannot cancel: positive
/// ψ_in from channel 0, positive kernels, zero biases, pooling branch off.
pub fn probe_block(n_stages: u32, stage_kernels: Vec<usize>, include_stage0: bool) -> Result<DeltaConvBlock<f64>> {
    let n = n_stages.max(1) as usize;
    let mut config = BlockConfig {
        channels: 2 * n,
        n_stages,
        stage_kernels,
        include_stage0,
        gate: GateConfig::default(),
        pooling_branch: false,
        target_k: None,
        gate_bias_init: 0.0,
    };
    config.validate()?;
    let mut b = DeltaConvBlock::<f64>::init(config.clone(), 0)?;
    let (c, cm, cg) = (config.channels, config.mid_channels(), config.gate_channels());
    b.psi_in.weight = Tensor::from_fn(vec![cm, c], |i| if i % c == 0 { 1.0 } else { 0.0 });
    b.psi_in.bias = Tensor::zeros(vec![cm]);
    b.kernels = config
        .stage_kernels
        .iter()
        .map(|&k| Tensor::full(vec![cm, k, k], 1.0 / (k * k) as f64))
        .collect();
    b.psi_out.weight = Tensor::full(vec![c, cg], 1.0);
    b.psi_out.bias = Tensor::zeros(vec![c]);
    config.pooling_branch = false;
    b.config = config;
    Ok(b)
}

/// Largest depthwise kernel considered during calibration.
pub const MAX_CALIBRATION_KERNEL: usize = 15;

/// Per-stage depthwise kernel sizes for a block with `n_stages` resampled
/// stages (plus an unresampled one if `include_stage0`) whose measured
/// impulse support is the smallest value ≥ `target_k`. Ties go to the
/// smallest total kernel area, then lexicographically smallest sizes.
pub fn calibrate_kernel_sizes(target_k: usize, n_stages: u32, include_stage0: bool) -> Result<Vec<usize>> {
    if target_k.is_multiple_of(2) || target_k == 0 {
        return Err(Error::config(format!("target receptive field must be odd, got {target_k}")));
    }
    if n_stages == 0 && !include_stage0 {
        return Err(Error::config("calibration needs at least one stage"));
    }
    let stages = n_stages as usize + usize::from(include_stage0);
    let sizes: Vec<usize> = (1..=MAX_CALIBRATION_KERNEL).step_by(2).collect();
    let mut best: Option<(usize, usize, Vec<usize>)> = None;
    let mut idx = vec![0usize; stages];
    loop {
        let ks: Vec<usize> = idx.iter().map(|&i| sizes[i]).collect();
        let support = impulse_support(&probe_block(n_stages, ks.clone(), include_stage0)?)?;
        if support >= target_k {
            let area: usize = ks.iter().map(|k| k * k).sum();
            let key = (support, area, ks);
            if best.as_ref().is_none_or(|b| key < *b) {
                best = Some(key);
            }
        }
        let mut d = 0;
        while d < stages {
            idx[d] += 1;
            if idx[d] < sizes.len() {
                break;
            }
            idx[d] = 0;
            d += 1;
        }
        if d == stages {
            break;
        }
    }
    best.map(|(_, _, ks)| ks).ok_or_else(|| {
        Error::config(format!(
            "receptive field {target_k} is out of reach with {n_stages} stages and kernels up to {MAX_CALIBRATION_KERNEL}; use more stages"
        ))
    })
}
