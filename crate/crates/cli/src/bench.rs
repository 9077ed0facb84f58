use std::path::PathBuf;

use clap::ValueEnum;
use deltaconv::bench::{flops_exponent, run_bench, time_exponent, write_csv as write_rows, BenchBlock, BenchConfig};
use deltaconv::delta_conv::BlockConfig;
use deltaconv::Result;

use crate::manifest::{parse_list, write_csv, RunManifest};

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Block {
    Attention,
    Neighborhood,
    DeltaConv,
}

#[derive(Debug, clap::Args)]
pub struct Args {
    #[arg(long, value_enum)]
    pub block: Block,
    /// Window of the neighborhood block.
    #[arg(long, default_value_t = 9)]
    pub k: usize,
    /// Comma-separated square latent sides.
    #[arg(long)]
    pub sizes: String,
    #[arg(long, default_value_t = 5)]
    pub repeats: usize,
    #[arg(long, default_value_t = 8)]
    pub channels: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, env = crate::OUT_ENV, default_value = crate::DEFAULT_OUT)]
    pub out: PathBuf,
}

pub fn run(args: Args) -> Result<()> {
    let block = match args.block {
        Block::Attention => BenchBlock::Attention,
        Block::Neighborhood => BenchBlock::Neighborhood { k: args.k },
        Block::DeltaConv => BenchBlock::DeltaConv,
    };
    let sizes = parse_list(&args.sizes, "size", |s| {
        s.parse::<usize>().map_err(|e| deltaconv::Error::Usage(format!("bad size {s:?}: {e}")))
    })?;
    let delta = match block {
        BenchBlock::DeltaConv => Some(BlockConfig::new(args.channels, 2, vec![3, 1])?),
        _ => None,
    };
    let config =
        BenchConfig { channels: args.channels, seed: args.seed, delta, ..BenchConfig::new(block, sizes, args.repeats) };
    config.validate()?;
    let mut manifest = RunManifest::new("bench", &config, vec![args.seed], &args.out)?;
    let path = manifest.output("bench.csv");
    let hash = manifest.write()?;
    let rows = run_bench(&config)?;
    write_csv(&path, &hash, |out| write_rows(out, block, &rows))?;
    for r in &rows {
        println!("{:>5}: median {:.3e} s  iqr {:.3e} s  flops {}", r.size, r.median, r.iqr(), r.flops);
    }
    if rows.len() >= 2 {
        println!("fitted exponent in pixels: time {:.3}, flops {:.3}", time_exponent(&rows)?, flops_exponent(&rows)?);
    }
    Ok(())
}
