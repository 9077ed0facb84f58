//! Wall-clock micro-benchmarks of single blocks and log-log scaling fits.

use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attention::{neighborhood_attention, self_attention, AttentionParams};
use crate::cost::{BlockKind, DeltaParams, LayerSpec};
use crate::delta_conv::{BlockConfig, DeltaConvBlock};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Block under test.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum BenchBlock {
    Attention,
    Neighborhood { k: usize },
    DeltaConv,
}

impl BenchBlock {
    pub fn label(&self) -> String {
        match self {
            BenchBlock::Attention => "attention".into(),
            BenchBlock::Neighborhood { k } => format!("neighborhood-{k}"),
            BenchBlock::DeltaConv => "delta-conv".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub block: BenchBlock,
    /// Square latent side lengths.
    pub sizes: Vec<usize>,
    pub repeats: usize,
    pub channels: usize,
    pub seed: u64,
    /// Kernels for the ΔConv case; defaults to the K=9 calibration.
    #[serde(default)]
    pub delta: Option<BlockConfig>,
}

impl BenchConfig {
    pub fn new(block: BenchBlock, sizes: Vec<usize>, repeats: usize) -> Self {
        BenchConfig {
            block,
            sizes,
            repeats,
            channels: 8,
            seed: 0,
            delta: None,
        }
    }

    fn delta_config(&self) -> Result<BlockConfig> {
        match &self.delta {
            Some(c) => Ok(c.clone()),
            None => BlockConfig::new(self.channels, 2, vec![3, 1]),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sizes.is_empty() {
            return Err(Error::usage("no benchmark sizes given"));
        }
        if self.repeats == 0 {
            return Err(Error::usage("repeats must be at least 1"));
        }
        if self.channels == 0 {
            return Err(Error::config("channels must be positive"));
        }
        if let BenchBlock::Neighborhood { k } = self.block {
            if k % 2 == 0 {
                return Err(Error::config(format!("neighborhood window must be odd, got {k}")));
            }
        }
        if self.block == BenchBlock::DeltaConv {
            let f = self.delta_config()?.max_factor();
            if let Some(s) = self.sizes.iter().find(|&&s| s == 0 || s % f != 0) {
                return Err(Error::config(format!("size {s} is not a positive multiple of {f}")));
            }
        } else if self.sizes.contains(&0) {
            return Err(Error::config("sizes must be positive"));
        }
        Ok(())
    }
}

/// Timings for one size, in seconds.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub size: usize,
    pub pixels: usize,
    pub flops: u128,
    pub repeats: usize,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
}

impl BenchRow {
    pub fn iqr(&self) -> f64 {
        self.q3 - self.q1
    }
}

/// Linear-interpolated quantile of sorted samples.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn fit_exponent(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::usage("exponent fit needs at least two paired points"));
    }
    if x.iter().chain(y).any(|v| !(*v > 0.0)) {
        return Err(Error::Numerical("exponent fit needs positive values".into()));
    }
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::usage("exponent fit needs at least two distinct sizes"));
    }
    Ok(sxy / sxx)
}

/// Scaling exponent of median time against pixel count.
pub fn time_exponent(rows: &[BenchRow]) -> Result<f64> {
    let x: Vec<f64> = rows.iter().map(|r| r.pixels as f64).collect();
    let y: Vec<f64> = rows.iter().map(|r| r.median).collect();
    fit_exponent(&x, &y)
}

/// Scaling exponent of analytic FLOPs against pixel count.
pub fn flops_exponent(rows: &[BenchRow]) -> Result<f64> {
    let x: Vec<f64> = rows.iter().map(|r| r.pixels as f64).collect();
    let y: Vec<f64> = rows.iter().map(|r| r.flops as f64).collect();
    fit_exponent(&x, &y)
}

/// Time the block at every size in single precision; one untimed warm-up run per size.
pub fn run_bench(config: &BenchConfig) -> Result<Vec<BenchRow>> {
    config.validate()?;
    let c = config.channels;
    let params = AttentionParams::<f32>::random(c, 1, config.seed)?;
    let dconf = config.delta_config()?;
    let block = DeltaConvBlock::<f64>::init(dconf.clone(), config.seed)?.cast::<f32>();
    let kind = match config.block {
        BenchBlock::Attention => BlockKind::SelfAttention,
        BenchBlock::Neighborhood { k } => BlockKind::Neighborhood { k },
        BenchBlock::DeltaConv => BlockKind::DeltaConv(DeltaParams::from_block(&dconf)),
    };
    let mut rows = Vec::with_capacity(config.sizes.len());
    for &s in &config.sizes {
        let z = Tensor::<f32>::from_fn(vec![1, c, s, s], |i| ((i as f32) * 0.618_034).sin());
        let run = || -> Result<Tensor<f32>> {
            match config.block {
                BenchBlock::Attention => Ok(self_attention(&z, &params, false)?.out),
                BenchBlock::Neighborhood { k } => Ok(neighborhood_attention(&z, &params, k, false)?.out),
                BenchBlock::DeltaConv => block.forward(&z),
            }
        };
        std::hint::black_box(run()?);
        let mut times = Vec::with_capacity(config.repeats);
        for _ in 0..config.repeats {
            let t0 = Instant::now();
            std::hint::black_box(run()?);
            times.push(t0.elapsed().as_secs_f64());
        }
        times.sort_by(f64::total_cmp);
        rows.push(BenchRow {
            size: s,
            pixels: s * s,
            flops: LayerSpec::new(s, s, c, kind.clone())?.flops()?,
            repeats: config.repeats,
            median: quantile(&times, 0.5),
            q1: quantile(&times, 0.25),
            q3: quantile(&times, 0.75),
        });
    }
    Ok(rows)
}

pub const HEADER: &str = "block,size,pixels,flops,repeats,median_s,q1_s,q3_s,iqr_s";

pub fn write_csv<W: Write>(out: &mut W, block: BenchBlock, rows: &[BenchRow]) -> Result<()> {
    writeln!(out, "{HEADER}")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{:e},{:e},{:e},{:e}",
            block.label(),
            r.size,
            r.pixels,
            r.flops,
            r.repeats,
            r.median,
            r.q1,
            r.q3,
            r.iqr()
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantiles_interpolate() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile(&v, 0.5), 2.5);
        assert_eq!(quantile(&v, 0.25), 1.75);
        assert_eq!(quantile(&[7.0], 0.75), 7.0);
    }

    #[test]
    fn exponent_of_power_law() {
        let x = [1.0, 2.0, 4.0, 8.0];
        let y: Vec<f64> = x.iter().map(|v: &f64| 3.0 * v.powf(1.5)).collect();
        assert!((fit_exponent(&x, &y).unwrap() - 1.5).abs() < 1e-12);
        assert!(fit_exponent(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn size_columns_do_not_depend_on_repeats() {
        let a = run_bench(&BenchConfig::new(BenchBlock::DeltaConv, vec![8, 16], 1)).unwrap();
        let b = run_bench(&BenchConfig::new(BenchBlock::DeltaConv, vec![8, 16], 9)).unwrap();
        let cols = |r: &[BenchRow]| r.iter().map(|r| (r.size, r.pixels, r.flops)).collect::<Vec<_>>();
        assert_eq!(cols(&a), cols(&b));
        assert_eq!(a[0].iqr(), 0.0);
        assert!(run_bench(&BenchConfig::new(BenchBlock::DeltaConv, vec![6], 1)).is_err());
        assert!(run_bench(&BenchConfig::new(BenchBlock::Attention, vec![], 1)).is_err());
    }
}
