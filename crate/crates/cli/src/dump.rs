use std::path::PathBuf;

use clap::ValueEnum;
use deltaconv::attention::{synthetic_stack, AttentionMap, MapMeta, StackKind};
use deltaconv::distill::{localized_teacher, smooth_latents, DiffusionSchedule, ScheduleSpec};
use deltaconv::{Error, Result};
use serde::Serialize;

use crate::manifest::{parse_list, RunManifest};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Source {
    /// Synthetic transformer-like stack.
    DitLike,
    /// Synthetic U-Net-like stack.
    UnetLike,
    /// Neighborhood-attention teacher on noised synthetic latents.
    Teacher,
}

#[derive(Debug, clap::Args)]
pub struct Args {
    #[arg(long, value_enum, default_value = "teacher")]
    pub source: Source,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 8)]
    pub channels: usize,
    #[arg(long, default_value_t = 2)]
    pub layers: usize,
    /// Neighborhood window of the teacher.
    #[arg(long, default_value_t = 9)]
    pub k: usize,
    #[arg(long, default_value_t = deltaconv::distill::TEACHER_QK_GAIN)]
    pub qk_gain: f64,
    /// Latent side length for the teacher source.
    #[arg(long, default_value_t = 16)]
    pub size: usize,
    /// Comma-separated diffusion timesteps for the teacher source.
    #[arg(long, default_value = "100,500,900")]
    pub timesteps: String,
    #[arg(long, env = crate::OUT_ENV, default_value = crate::DEFAULT_OUT)]
    pub out: PathBuf,
}

#[derive(Debug, Serialize)]
struct Resolved {
    source: Source,
    seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    teacher: Option<TeacherSettings>,
}

#[derive(Debug, Serialize)]
struct TeacherSettings {
    channels: usize,
    layers: usize,
    k: usize,
    qk_gain: f64,
    size: usize,
    timesteps: Vec<usize>,
    schedule: ScheduleSpec,
    /// Clean latent uses this seed with smoothing 1; noise uses `seed + 1` unsmoothed.
    latent_seed: u64,
}

pub fn run(args: Args) -> Result<()> {
    let teacher = match args.source {
        Source::Teacher => Some(TeacherSettings {
            channels: args.channels,
            layers: args.layers,
            k: args.k,
            qk_gain: args.qk_gain,
            size: args.size,
            timesteps: parse_list(&args.timesteps, "timestep", |s| {
                s.parse::<usize>().map_err(|e| Error::Usage(format!("bad timestep {s:?}: {e}")))
            })?,
            schedule: ScheduleSpec::default(),
            latent_seed: args.seed,
        }),
        _ => None,
    };
    let resolved = Resolved { source: args.source, seed: args.seed, teacher };

    let maps: Vec<(String, AttentionMap)> = match (&resolved.teacher, args.source) {
        (Some(t), _) => {
            let model = localized_teacher(t.channels, t.layers, t.k, t.qk_gain, args.seed)?;
            let schedule = DiffusionSchedule::new(&t.schedule)?;
            let z0 = smooth_latents(1, t.channels, t.size, t.size, 1, t.latent_seed)?.remove(0);
            let eps = smooth_latents(1, t.channels, t.size, t.size, 0, t.latent_seed + 1)?.remove(0);
            let mut out = Vec::new();
            for &step in &t.timesteps {
                let z_t = schedule.noised(&z0, &eps, step)?;
                for (layer, mut per_item) in model.attention_maps(&z_t)? {
                    let meta = MapMeta { layer, timestep: Some(step as u32), model_name: "localized-teacher".into() };
                    out.push((format!("layer{layer:02}_t{step:04}"), AttentionMap::new(meta, per_item.remove(0))?));
                }
            }
            out
        }
        (None, kind) => {
            let kind = if kind == Source::DitLike { StackKind::DitLike } else { StackKind::UnetLike };
            synthetic_stack(kind, args.seed)?
                .into_iter()
                .map(|m| (format!("layer{:02}", m.meta.layer), m))
                .collect()
        }
    };

    let mut manifest = RunManifest::new("dump-teacher", &resolved, vec![args.seed], &args.out)?;
    let dir = args.out.join("maps");
    for (stem, _) in &maps {
        manifest.output(format!("maps/{stem}.dtf"));
        manifest.output(format!("maps/{stem}.json"));
    }
    manifest.write()?;
    std::fs::create_dir_all(&dir)?;
    for (stem, map) in &maps {
        map.save(&dir, stem)?;
    }
    println!("wrote {} maps to {}", maps.len(), dir.display());
    Ok(())
}
