use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;

use deltaconv::attention::AttentionMap;
use deltaconv::locality::{
    asm_aggregate, detect_sink_artifact, erf, layer_profile, write_profiles_csv, AsmProfile, Butterworth, ErfReport,
    Mode, Scope, SinkReport,
};
use deltaconv::{Error, Result};
use serde::Serialize;

use crate::manifest::{write_csv, write_json, RunManifest};

#[derive(Debug, clap::Args)]
pub struct Args {
    /// Directory of attention maps (`.dtf` plus `.json` sidecar per map).
    pub maps_dir: PathBuf,
    /// Butterworth cutoff in frequency bins.
    #[arg(long, default_value_t = 4.0)]
    pub d0: f64,
    /// Butterworth order.
    #[arg(long, default_value_t = 2)]
    pub order: u32,
    /// ASM level that defines the effective receptive field.
    #[arg(long, default_value_t = 0.8)]
    pub threshold: f64,
    /// Use every n-th query when averaging profiles.
    #[arg(long, default_value_t = 1)]
    pub query_stride: usize,
    /// Mass share above which an off-query peak counts as a sink.
    #[arg(long, default_value_t = 0.5)]
    pub sink_fraction: f64,
    #[arg(long, env = crate::OUT_ENV, default_value = crate::DEFAULT_OUT)]
    pub out: PathBuf,
}

#[derive(Debug, Serialize)]
struct Settings {
    maps_dir: PathBuf,
    filter: Butterworth,
    threshold: f64,
    query_stride: usize,
    sink_fraction: f64,
}

#[derive(Debug, Serialize)]
struct LayerReport {
    layer: usize,
    timesteps: Vec<Option<u32>>,
    raw: ErfReport,
    filtered: ErfReport,
    sink: SinkReport,
}

#[derive(Debug, Serialize)]
struct Report {
    manifest_sha256: String,
    filter: Butterworth,
    threshold: f64,
    layers: Vec<LayerReport>,
    /// Layers whose maps show an attention sink.
    sink_layers: Vec<usize>,
    /// Filtered ERF of the profile averaged over all layers.
    aggregated_k_hat: usize,
    aggregated_reached: bool,
}

fn report(map: &AttentionMap, profile: &AsmProfile, threshold: f64) -> Result<ErfReport> {
    let (k_hat, reached) = erf(profile, threshold)?;
    Ok(ErfReport {
        layer: map.meta.layer,
        model_name: map.meta.model_name.clone(),
        scale: map.grid()?,
        k_hat,
        reached,
        threshold,
        mode: profile.mode,
        scope: Scope::PerLayer,
        per_query: None,
    })
}

pub fn run(args: Args) -> Result<()> {
    let filter = Butterworth { d0: args.d0, order: args.order };
    filter.validate()?;
    if !(args.threshold > 0.0 && args.threshold <= 1.0) {
        return Err(Error::Usage(format!("--threshold must lie in (0, 1], got {}", args.threshold)));
    }
    if args.query_stride == 0 {
        return Err(Error::Usage("--query-stride must be at least 1".into()));
    }
    let mut files: Vec<PathBuf> = fs::read_dir(&args.maps_dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .filter(|p| p.extension().is_some_and(|e| e == "dtf"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Usage(format!("no .dtf attention maps in {}", args.maps_dir.display())));
    }

    let settings = Settings {
        maps_dir: args.maps_dir.clone(),
        filter,
        threshold: args.threshold,
        query_stride: args.query_stride,
        sink_fraction: args.sink_fraction,
    };
    let mut manifest = RunManifest::new("analyze", &settings, Vec::new(), &args.out)?;
    for f in &files {
        manifest.input(f)?;
        manifest.input(&f.with_extension("json"))?;
    }
    let profiles_path = manifest.output("profiles.csv");
    let report_path = manifest.output("report.json");
    let hash = manifest.write()?;

    let mut by_layer: BTreeMap<usize, Vec<AttentionMap>> = BTreeMap::new();
    for f in &files {
        let map = AttentionMap::load(f)?;
        by_layer.entry(map.meta.layer).or_default().push(map);
    }

    let filtered_mode = Mode::Filtered(filter);
    let mut profiles = Vec::new();
    let mut layers = Vec::new();
    let mut aggregated_maps = Vec::new();
    for (layer, maps) in by_layer {
        let timesteps = maps.iter().map(|m| m.meta.timestep).collect();
        let map = AttentionMap::aggregate(&maps)?;
        let raw = layer_profile(&map, Mode::Raw, args.query_stride)?;
        let filtered = layer_profile(&map, filtered_mode, args.query_stride)?;
        layers.push(LayerReport {
            layer,
            timesteps,
            raw: report(&map, &raw, args.threshold)?,
            filtered: report(&map, &filtered, args.threshold)?,
            sink: detect_sink_artifact(&map, args.sink_fraction)?,
        });
        profiles.push(raw);
        profiles.push(filtered);
        aggregated_maps.push(map);
    }
    let mut aggregated = Vec::new();
    for mode in [Mode::Raw, filtered_mode] {
        aggregated.push(asm_aggregate(&aggregated_maps, mode, args.query_stride)?);
    }
    let (aggregated_k_hat, aggregated_reached) = erf(&aggregated[1], args.threshold)?;
    profiles.extend(aggregated);

    write_csv(&profiles_path, &hash, |out| write_profiles_csv(out, &profiles))?;
    let report = Report {
        manifest_sha256: hash,
        filter,
        threshold: args.threshold,
        sink_layers: layers.iter().filter(|l| l.sink.detected).map(|l| l.layer).collect(),
        layers,
        aggregated_k_hat,
        aggregated_reached,
    };
    write_json(&report_path, &report)?;
    for l in &report.layers {
        println!("layer {:>3}: k_hat raw {:>3}, filtered {:>3}{}", l.layer, l.raw.k_hat, l.filtered.k_hat, if l.sink.detected { " (sink)" } else { "" });
    }
    println!("aggregated filtered k_hat {aggregated_k_hat}; wrote {}", args.out.display());
    Ok(())
}
