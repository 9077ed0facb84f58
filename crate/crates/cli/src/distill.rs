use std::fs;
use std::path::{Path, PathBuf};

use deltaconv::attention::AttentionParams;
use deltaconv::delta_conv::{BlockConfig, DeltaConvBlock};
use deltaconv::distill::{
    distill_run, init_students, localized_teacher, preflight, smooth_latents, write_eval_csv, write_trace_csv,
    DistillConfig, TeacherLayer, TeacherModel, TEACHER_QK_GAIN,
};
use deltaconv::{dtf, Error, Result, Tensor};
use serde::{Deserialize, Serialize};

use crate::manifest::{write_csv, write_json, RunManifest};

#[derive(Debug, clap::Args)]
pub struct Args {
    /// Distillation manifest (or the `manifest.json` of an earlier distill run).
    pub manifest: PathBuf,
    #[arg(long, env = crate::OUT_ENV, default_value = crate::DEFAULT_OUT)]
    pub out: PathBuf,
}

fn default_qk_gain() -> f64 {
    TEACHER_QK_GAIN
}

/// Frozen teacher stack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TeacherSpec {
    /// Neighborhood-attention layers with tied query/key projections.
    Localized {
        channels: usize,
        layers: usize,
        k: usize,
        #[serde(default = "default_qk_gain")]
        qk_gain: f64,
        seed: u64,
    },
    /// Dense self-attention layers; layer `l` uses `seed + l`.
    Attention { channels: usize, layers: usize, heads: usize, seed: u64 },
    /// ΔConv blocks, for self-distillation.
    Delta { blocks: Vec<BlockConfig>, seeds: Vec<u64> },
}

impl TeacherSpec {
    pub fn build(&self) -> Result<TeacherModel> {
        match self {
            TeacherSpec::Localized { channels, layers, k, qk_gain, seed } => {
                localized_teacher(*channels, *layers, *k, *qk_gain, *seed)
            }
            TeacherSpec::Attention { channels, layers, heads, seed } => {
                let layers = (0..*layers as u64)
                    .map(|l| Ok(TeacherLayer::Attention(AttentionParams::random(*channels, *heads, seed + l)?)))
                    .collect::<Result<_>>()?;
                Ok(TeacherModel { layers })
            }
            TeacherSpec::Delta { blocks, seeds } => {
                if blocks.len() != seeds.len() {
                    return Err(Error::Dimension { axis: "teacher seeds".into(), expected: blocks.len(), got: seeds.len() });
                }
                let layers = blocks
                    .iter()
                    .zip(seeds)
                    .map(|(b, s)| Ok(TeacherLayer::Delta(DeltaConvBlock::init(b.clone(), *s)?)))
                    .collect::<Result<_>>()?;
                Ok(TeacherModel { layers })
            }
        }
    }

    fn seed(&self) -> Vec<u64> {
        match self {
            TeacherSpec::Localized { seed, .. } | TeacherSpec::Attention { seed, .. } => vec![*seed],
            TeacherSpec::Delta { seeds, .. } => seeds.clone(),
        }
    }
}

/// One student per teacher layer, initialized with consecutive seeds from `init_seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudentSpec {
    pub block: BlockConfig,
    pub init_seed: u64,
}

/// Training latents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DataSpec {
    /// Standardized box-blurred Gaussian fields.
    Synthetic { count: usize, channels: usize, h: usize, w: usize, smoothing: usize, seed: u64 },
    /// DTF tensors of shape (B, C, H, W), split along the batch axis.
    Dtf { paths: Vec<PathBuf> },
}

impl DataSpec {
    fn load(&self) -> Result<Vec<Tensor<f64>>> {
        match self {
            DataSpec::Synthetic { count, channels, h, w, smoothing, seed } => {
                smooth_latents(*count, *channels, *h, *w, *smoothing, *seed)
            }
            DataSpec::Dtf { paths } => {
                let mut out = Vec::new();
                for p in paths {
                    let t = dtf::read::<f64>(p)?;
                    let (b, c, h, w) = t.dims4().map_err(|e| Error::Format {
                        path: p.clone(),
                        offset: 0,
                        reason: e.to_string(),
                    })?;
                    let n = c * h * w;
                    for i in 0..b {
                        out.push(Tensor::new(vec![1, c, h, w], t.data()[i * n..(i + 1) * n].to_vec())?);
                    }
                }
                Ok(out)
            }
        }
    }
}

/// Complete description of a distillation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillManifest {
    pub teacher: TeacherSpec,
    pub student: StudentSpec,
    pub data: DataSpec,
    pub config: DistillConfig,
}

#[derive(Debug, Serialize)]
struct Summary {
    manifest_sha256: String,
    /// Feature targets are the teacher sub-module outputs before the residual add.
    feature_target: &'static str,
    steps: usize,
    teacher_hash_before: String,
    teacher_hash_after: String,
    teacher_frozen: bool,
    initial_eval_l_f: Option<f64>,
    final_eval_l_f: Option<f64>,
    feature_reduction: Option<f64>,
    checkpoints: Vec<PathBuf>,
}

/// Accepts a distillation manifest or the run manifest of a previous distill run.
pub fn load_manifest(path: &Path) -> Result<DistillManifest> {
    let text = fs::read_to_string(path)?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let inner = match value.get("subcommand").and_then(|s| s.as_str()) {
        Some("distill") => value["config"].clone(),
        Some(other) => return Err(Error::Config(format!("{} is a manifest of a `{other}` run", path.display()))),
        None => value,
    };
    serde_json::from_value(inner).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

pub fn run(args: Args) -> Result<()> {
    let spec = load_manifest(&args.manifest)?;
    spec.config.validate()?;
    let teacher = spec.teacher.build()?;
    let students = init_students(&spec.student.block, teacher.layers.len(), spec.student.init_seed)?;
    let data = spec.data.load()?;
    preflight(&teacher, &students, &data)?;

    let mut seeds = vec![spec.config.seed, spec.student.init_seed];
    seeds.extend(spec.teacher.seed());
    if let DataSpec::Synthetic { seed, .. } = spec.data {
        seeds.push(seed);
    }
    let mut manifest = RunManifest::new("distill", &spec, seeds, &args.out)?;
    manifest.input(&args.manifest)?;
    if let DataSpec::Dtf { paths } = &spec.data {
        for p in paths {
            manifest.input(p)?;
        }
    }
    let trace_path = manifest.output("trace.csv");
    let eval_path = manifest.output("eval.csv");
    let summary_path = manifest.output("summary.json");
    let checkpoints: Vec<PathBuf> =
        (0..students.len()).map(|l| manifest.output(format!("checkpoints/student_{l:02}"))).collect();
    let hash = manifest.write()?;

    let result = distill_run(&teacher, students, &spec.config, &data)?;
    write_csv(&trace_path, &hash, |out| write_trace_csv(out, &result.trace))?;
    write_csv(&eval_path, &hash, |out| write_eval_csv(out, &result.eval))?;
    for (block, dir) in result.students.iter().zip(&checkpoints) {
        block.save(dir)?;
    }
    let has_eval = result.eval.len() >= 2;
    let summary = Summary {
        manifest_sha256: hash,
        feature_target: "sub-module output before the residual add",
        steps: spec.config.steps,
        teacher_frozen: result.teacher_hash_before == result.teacher_hash_after,
        teacher_hash_before: result.teacher_hash_before.clone(),
        teacher_hash_after: result.teacher_hash_after.clone(),
        initial_eval_l_f: result.eval.first().map(|r| r.l_f),
        final_eval_l_f: result.eval.last().map(|r| r.l_f),
        feature_reduction: has_eval.then(|| result.feature_reduction()),
        checkpoints,
    };
    write_json(&summary_path, &summary)?;
    if let (Some(a), Some(b)) = (summary.initial_eval_l_f, summary.final_eval_l_f) {
        println!("eval L_f {a:.4e} -> {b:.4e} over {} steps", summary.steps);
    }
    println!("teacher frozen: {}; wrote {}", summary.teacher_frozen, args.out.display());
    Ok(())
}
