use std::path::{Path, PathBuf};

use deltaconv::cost::{model_sweep, ModelConfig, Resolution};
use deltaconv::Result;
use serde::Serialize;

use crate::manifest::{parse_list, read_config, write_csv, RunManifest};

#[derive(Debug, clap::Args)]
pub struct Args {
    /// Model configuration JSON, or a built-in name (`sd15-like`, `pixart-like`).
    pub config: String,
    /// Comma-separated resolutions: presets (512, 1024, 2K, 4K, 8K, 16K), side lengths or WIDTHxHEIGHT.
    #[arg(long, default_value = "512,1024,2K,4K,8K,16K")]
    pub resolutions: String,
    #[arg(long, env = crate::OUT_ENV, default_value = crate::DEFAULT_OUT)]
    pub out: PathBuf,
}

#[derive(Debug, Serialize)]
struct Resolved {
    model: ModelConfig,
    resolutions: Vec<Resolution>,
}

pub fn run(args: Args) -> Result<()> {
    let resolutions = parse_list(&args.resolutions, "resolution", Resolution::parse)?;
    let (model, source) = match args.config.as_str() {
        "sd15-like" => (ModelConfig::sd15_like(), None),
        "pixart-like" => (ModelConfig::pixart_like(), None),
        path => {
            let path = Path::new(path);
            let model: ModelConfig = read_config(path)?;
            model.validate()?;
            (model, Some(path))
        }
    };
    let resolved = Resolved { model, resolutions };
    let mut manifest = RunManifest::new("cost", &resolved, Vec::new(), &args.out)?;
    if let Some(p) = source {
        manifest.input(p)?;
    }
    let table = manifest.output("cost.csv");
    let per_layer = manifest.output("cost_layers.csv");
    let report = model_sweep(&resolved.model, &resolved.resolutions)?;
    let hash = manifest.write()?;
    write_csv(&table, &hash, |out| report.write_csv(out))?;
    write_csv(&per_layer, &hash, |out| report.write_layer_csv(&resolved.model, out))?;
    for r in &report.rows {
        println!(
            "{:>6}: attention {:.4e}  delta-conv {:.4e}  ratio {:.1}",
            r.resolution.label,
            r.attention_mean(),
            r.delta_mean(),
            r.ratio()
        );
    }
    Ok(())
}
