//! Two-level distillation of ΔConvBlocks from a frozen attention teacher.
//!
//! * Feature level: every student block sees the input of the matching
//!   teacher sub-module and is pulled toward that sub-module's output,
//!   taken before the surrounding residual addition.
//! * Output level: the student stack runs on its own and its final output ε̂
//!   is pulled toward the teacher's ε̃ and the true noise ε, weighted by
//!   Min-SNR.
//!
//! `L = L_z + β·L_f`, optimized with AdamW. Only student parameters are ever
//! placed on the tape as trainable leaves.

use std::fmt::Write as _;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attention::{neighborhood_attention, self_attention, tied_attention, AttentionParams};
use crate::delta_conv::{BlockConfig, DeltaConvBlock};
use crate::dtf;
use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Variance-preserving schedule, indexed 0..=T (index 0 is the clean latent).
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    sigma_z: Vec<f64>,
    sigma_eps: Vec<f64>,
}

/// Serializable description of a schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ScheduleSpec {
    /// β_t linear from `beta_start` to `beta_end` over `t_max` steps; ᾱ_t = Π(1 − β).
    LinearBeta { beta_start: f64, beta_end: f64, t_max: usize },
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        ScheduleSpec::LinearBeta {
            beta_start: 1e-4,
            beta_end: 0.02,
            t_max: 1000,
        }
    }
}

impl DiffusionSchedule {
    pub fn new(spec: &ScheduleSpec) -> Result<Self> {
        let ScheduleSpec::LinearBeta { beta_start, beta_end, t_max } = *spec;
        if t_max == 0 || !(0.0..1.0).contains(&beta_start) || !(0.0..1.0).contains(&beta_end) {
            return Err(Error::config("schedule needs t_max ≥ 1 and betas in [0, 1)"));
        }
        let mut alpha_bar = 1.0;
        let mut sigma_z = vec![1.0];
        let mut sigma_eps = vec![0.0];
        for t in 1..=t_max {
            let frac = if t_max == 1 { 0.0 } else { (t - 1) as f64 / (t_max - 1) as f64 };
            alpha_bar *= 1.0 - (beta_start + frac * (beta_end - beta_start));
            sigma_z.push(alpha_bar.sqrt());
            sigma_eps.push((1.0 - alpha_bar).sqrt());
        }
        Ok(DiffusionSchedule { sigma_z, sigma_eps })
    }

    pub fn t_max(&self) -> usize {
        self.sigma_z.len() - 1
    }

    pub fn sigma_z(&self, t: usize) -> f64 {
        self.sigma_z[t]
    }

    pub fn sigma_eps(&self, t: usize) -> f64 {
        self.sigma_eps[t]
    }

    fn check(&self, t: usize) -> Result<()> {
        if t > self.t_max() {
            return Err(Error::usage(format!("timestep {t} beyond schedule length {}", self.t_max())));
        }
        Ok(())
    }

    /// `σ_z·z0 + σ_ε·ε`.
    pub fn noised(&self, z0: &Tensor<f64>, eps: &Tensor<f64>, t: usize) -> Result<Tensor<f64>> {
        self.check(t)?;
        let (a, b) = (self.sigma_z[t], self.sigma_eps[t]);
        z0.zip_map(eps, |z, e| a * z + b * e)
    }
}

/// `min(γ·(σ_z/σ_ε)², 1)`; one where σ_ε = 0.
pub fn min_snr_weight(t: usize, schedule: &DiffusionSchedule, gamma: f64) -> Result<f64> {
    schedule.check(t)?;
    Ok(snr_weight(schedule.sigma_z(t), schedule.sigma_eps(t), gamma))
}

/// Min-SNR weight from the two noise coefficients.
pub fn snr_weight(sigma_z: f64, sigma_eps: f64, gamma: f64) -> f64 {
    if sigma_eps == 0.0 {
        1.0
    } else {
        (gamma * (sigma_z / sigma_eps).powi(2)).min(1.0)
    }
}

/// Normalization of squared norms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Reduction {
    /// Sum of squares divided by the element count.
    #[default]
    Mean,
    /// Plain sum of squares.
    Sum,
}

impl Reduction {
    fn apply(&self, sq_sum: f64, n: usize) -> f64 {
        match self {
            Reduction::Mean => sq_sum / n as f64,
            Reduction::Sum => sq_sum,
        }
    }

    fn record(&self, tape: &mut Tape<f64>, x: Var) -> Var {
        match self {
            Reduction::Mean => tape.mean(x),
            Reduction::Sum => tape.sum(x),
        }
    }
}

fn squared_norm(a: &Tensor<f64>, b: &Tensor<f64>, r: Reduction) -> Result<f64> {
    a.ensure_same_shape(b)?;
    let s = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(r.apply(s, a.len()))
}

/// `Σ_l ‖student_l − teacher_l‖²` under `reduction`.
pub fn feature_loss(student: &[Tensor<f64>], teacher: &[Tensor<f64>], reduction: Reduction) -> Result<f64> {
    if student.len() != teacher.len() {
        return Err(Error::dim("feature layer count", teacher.len(), student.len()));
    }
    student
        .iter()
        .zip(teacher)
        .enumerate()
        .map(|(l, (s, t))| {
            squared_norm(s, t, reduction).map_err(|e| match e {
                Error::Dimension { axis, expected, got } => Error::Dimension {
                    axis: format!("layer {l} {axis}"),
                    expected,
                    got,
                },
                e => e,
            })
        })
        .sum()
}

/// `w(t)·(‖ε̃ − ε̂‖² + ‖ε − ε̂‖²)`.
pub fn output_loss(
    eps_hat: &Tensor<f64>,
    eps_teacher: &Tensor<f64>,
    eps_true: &Tensor<f64>,
    t: usize,
    schedule: &DiffusionSchedule,
    gamma: f64,
    reduction: Reduction,
) -> Result<f64> {
    let w = min_snr_weight(t, schedule, gamma)?;
    Ok(w * (squared_norm(eps_teacher, eps_hat, reduction)? + squared_norm(eps_true, eps_hat, reduction)?))
}

pub fn total_loss(l_z: f64, l_f: f64, beta: f64) -> f64 {
    l_z + beta * l_f
}

/// AdamW hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW {
            lr: 3e-4,
            betas: (0.9, 0.99),
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// First and second moments per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor<f64>>,
    pub v: Vec<Tensor<f64>>,
}

impl AdamState {
    pub fn new(params: &[&Tensor<f64>]) -> Self {
        AdamState {
            step: 0,
            m: params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect(),
        }
    }
}

/// One decoupled-weight-decay Adam update. Nothing changes if any gradient
/// is non-finite; the error names the offending parameter.
pub fn adamw_step(
    params: &mut [&mut Tensor<f64>],
    grads: &[Tensor<f64>],
    names: &[String],
    state: &mut AdamState,
    opt: &AdamW,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::dim("optimizer parameter count", params.len(), grads.len()));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        p.ensure_same_shape(g)?;
        if !g.is_finite() {
            let name = names.get(i).cloned().unwrap_or_else(|| format!("#{i}"));
            return Err(Error::Numerical(format!("non-finite gradient for parameter {name}")));
        }
    }
    state.step += 1;
    let (b1, b2) = opt.betas;
    let bc1 = 1.0 - b1.powi(state.step as i32);
    let bc2 = 1.0 - b2.powi(state.step as i32);
    for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        let (pd, gd) = (p.data_mut(), g.data());
        let (md, vd) = (m.data_mut(), v.data_mut());
        for j in 0..pd.len() {
            md[j] = b1 * md[j] + (1.0 - b1) * gd[j];
            vd[j] = b2 * vd[j] + (1.0 - b2) * gd[j] * gd[j];
            let mhat = md[j] / bc1;
            let vhat = vd[j] / bc2;
            pd[j] -= opt.lr * (mhat / (vhat.sqrt() + opt.eps) + opt.weight_decay * pd[j]);
        }
    }
    Ok(())
}

/// One frozen sub-module of the teacher stack.
#[derive(Debug, Clone, PartialEq)]
pub enum TeacherLayer {
    Attention(AttentionParams<f64>),
    Neighborhood(AttentionParams<f64>, usize),
    Delta(DeltaConvBlock<f64>),
}

impl TeacherLayer {
    pub fn forward(&self, z: &Tensor<f64>) -> Result<Tensor<f64>> {
        match self {
            TeacherLayer::Attention(p) => Ok(self_attention(z, p, false)?.out),
            TeacherLayer::Neighborhood(p, k) => Ok(neighborhood_attention(z, p, *k, false)?.out),
            TeacherLayer::Delta(b) => b.forward(z),
        }
    }

    fn tensors(&self) -> Vec<&Tensor<f64>> {
        match self {
            TeacherLayer::Attention(p) | TeacherLayer::Neighborhood(p, _) => p.tensors(),
            TeacherLayer::Delta(b) => b.named_params().into_iter().map(|(_, t)| t).collect(),
        }
    }

    fn channels(&self) -> usize {
        match self {
            TeacherLayer::Attention(p) | TeacherLayer::Neighborhood(p, _) => p.channels(),
            TeacherLayer::Delta(b) => b.config.channels,
        }
    }
}

/// Residual stack `z_{l+1} = z_l + layer_l(z_l)`; the final state is ε̃.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherModel {
    pub layers: Vec<TeacherLayer>,
}

/// Default query/key gain of [`localized_teacher`].
pub const TEACHER_QK_GAIN: f64 = 0.25;

/// Residual stack of `layers` neighborhood-attention layers (window `k`)
/// with tied query/key projections; layer `l` is seeded with `seed + l`.
pub fn localized_teacher(channels: usize, layers: usize, k: usize, qk_gain: f64, seed: u64) -> Result<TeacherModel> {
    if layers == 0 {
        return Err(Error::config("teacher needs at least one layer"));
    }
    if k.is_multiple_of(2) {
        return Err(Error::config(format!("neighborhood window must be odd, got {k}")));
    }
    let layers = (0..layers as u64)
        .map(|l| Ok(TeacherLayer::Neighborhood(tied_attention(seed.wrapping_add(l), channels, qk_gain)?, k)))
        .collect::<Result<Vec<_>>>()?;
    Ok(TeacherModel { layers })
}

/// Every sub-module input and output of one teacher pass.
#[derive(Debug, Clone)]
pub struct TeacherTrace {
    pub inputs: Vec<Tensor<f64>>,
    pub outputs: Vec<Tensor<f64>>,
    pub eps: Tensor<f64>,
}

impl TeacherModel {
    pub fn forward(&self, z: &Tensor<f64>) -> Result<TeacherTrace> {
        let mut x = z.clone();
        let (mut inputs, mut outputs) = (Vec::new(), Vec::new());
        for layer in &self.layers {
            let y = layer.forward(&x)?;
            let next = x.zip_map(&y, |a, b| a + b)?;
            inputs.push(std::mem::replace(&mut x, next));
            outputs.push(y);
        }
        Ok(TeacherTrace { inputs, outputs, eps: x })
    }

    /// Attention maps of every attention layer along the residual stack,
    /// `(layer index, one (Q, H, W) map per batch item)`.
    pub fn attention_maps(&self, z: &Tensor<f64>) -> Result<Vec<(usize, Vec<Tensor<f64>>)>> {
        let mut x = z.clone();
        let mut maps = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            let y = match layer {
                TeacherLayer::Attention(p) => {
                    let o = self_attention(&x, p, true)?;
                    maps.push((l, o.maps));
                    o.out
                }
                TeacherLayer::Neighborhood(p, k) => {
                    let o = neighborhood_attention(&x, p, *k, true)?;
                    maps.push((l, o.maps));
                    o.out
                }
                TeacherLayer::Delta(b) => b.forward(&x)?,
            };
            x = x.zip_map(&y, |a, b| a + b)?;
        }
        Ok(maps)
    }

    /// SHA-256 over the DTF encoding of every parameter tensor, in order.
    pub fn param_hash(&self) -> String {
        let mut h = Sha256::new();
        for layer in &self.layers {
            for t in layer.tensors() {
                h.update(dtf::encode(t, crate::DType::F64));
            }
        }
        h.finalize().iter().fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }

    pub fn channels(&self) -> Option<usize> {
        self.layers.first().map(|l| l.channels())
    }
}

/// Which losses drive the update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Objective {
    /// `L_z + β·L_f`.
    #[default]
    Full,
    /// `L_f` alone.
    FeatureOnly,
}

/// Learning-rate multiplier over the run.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Half-cosine from 1 down to `floor` at the last step.
    Cosine { floor: f64 },
}

impl LrSchedule {
    pub fn factor(&self, step: usize, steps: usize) -> f64 {
        match *self {
            LrSchedule::Constant => 1.0,
            LrSchedule::Cosine { floor } => {
                let p = if steps <= 1 { 0.0 } else { step as f64 / (steps - 1) as f64 };
                floor + (1.0 - floor) * 0.5 * (1.0 + (std::f64::consts::PI * p).cos())
            }
        }
    }
}

/// Distillation hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    pub gamma: f64,
    pub beta: f64,
    pub optimizer: AdamW,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    #[serde(default)]
    pub reduction: Reduction,
    #[serde(default)]
    pub objective: Objective,
    #[serde(default)]
    pub schedule: ScheduleSpec,
    #[serde(default)]
    pub lr_schedule: LrSchedule,
    /// Evaluate the feature loss on a fixed set every this many steps (0 = only at the ends).
    #[serde(default)]
    pub eval_every: usize,
    /// Fixed (latent index, timestep, noise seed) triples for evaluation.
    #[serde(default = "default_eval_samples")]
    pub eval_samples: usize,
}

fn default_eval_samples() -> usize {
    8
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            gamma: 5.0,
            beta: 0.001,
            optimizer: AdamW::default(),
            batch_size: 4,
            steps: 2000,
            seed: 0,
            reduction: Reduction::Mean,
            objective: Objective::Full,
            schedule: ScheduleSpec::default(),
            lr_schedule: LrSchedule::Constant,
            eval_every: 100,
            eval_samples: default_eval_samples(),
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0) || !(self.beta >= 0.0) {
            return Err(Error::config("distillation needs γ > 0 and β ≥ 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be positive"));
        }
        if !(self.optimizer.lr > 0.0) {
            return Err(Error::config("learning rate must be positive"));
        }
        DiffusionSchedule::new(&self.schedule)?;
        Ok(())
    }
}

/// One row of the loss trace (per-step batch means).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TraceRow {
    pub step: usize,
    pub l_f: f64,
    pub l_z: f64,
    pub total: f64,
}

/// Feature loss on the fixed evaluation set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EvalRow {
    pub step: usize,
    pub l_f: f64,
}

#[derive(Debug, Clone)]
pub struct DistillResult {
    pub students: Vec<DeltaConvBlock<f64>>,
    pub trace: Vec<TraceRow>,
    pub eval: Vec<EvalRow>,
    pub teacher_hash_before: String,
    pub teacher_hash_after: String,
}

impl DistillResult {
    /// Initial over final evaluation feature loss.
    pub fn feature_reduction(&self) -> f64 {
        match (self.eval.first(), self.eval.last()) {
            (Some(a), Some(b)) => a.l_f / b.l_f,
            _ => 1.0,
        }
    }

    pub fn final_feature_loss(&self) -> f64 {
        self.eval.last().map_or(f64::NAN, |e| e.l_f)
    }
}

/// Seeded latents: white noise blurred by a separable box of radius
/// `smoothing`, then standardized per sample to zero mean and unit variance.
pub fn smooth_latents(count: usize, c: usize, h: usize, w: usize, smoothing: usize, seed: u64) -> Result<Vec<Tensor<f64>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let raw = Tensor::<f64>::randn(vec![1, c, h, w], 1.0, &mut rng);
            let mut d = raw.into_data();
            let r = smoothing as isize;
            let mut tmp = vec![0.0; h * w];
            for plane in d.chunks_mut(h * w) {
                for y in 0..h {
                    for x in 0..w {
                        let mut s = 0.0;
                        for dx in -r..=r {
                            s += plane[y * w + (x as isize + dx).rem_euclid(w as isize) as usize];
                        }
                        tmp[y * w + x] = s;
                    }
                }
                for y in 0..h {
                    for x in 0..w {
                        let mut s = 0.0;
                        for dy in -r..=r {
                            s += tmp[(y as isize + dy).rem_euclid(h as isize) as usize * w + x];
                        }
                        plane[y * w + x] = s;
                    }
                }
            }
            let n = d.len() as f64;
            let mean = d.iter().sum::<f64>() / n;
            let std = (d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt().max(1e-12);
            Tensor::new(vec![1, c, h, w], d.into_iter().map(|v| (v - mean) / std).collect())
        })
        .collect()
}

/// One training or evaluation example.
#[derive(Debug, Clone)]
struct Sample {
    z_t: Tensor<f64>,
    eps: Tensor<f64>,
    t: usize,
}

fn draw_sample(data: &[Tensor<f64>], schedule: &DiffusionSchedule, rng: &mut ChaCha8Rng) -> Result<Sample> {
    let idx = rng.random_range(0..data.len());
    let t = rng.random_range(1..=schedule.t_max());
    let z0 = &data[idx];
    let eps = Tensor::from_fn(z0.shape().to_vec(), |_| StandardNormal.sample(rng));
    Ok(Sample {
        z_t: schedule.noised(z0, &eps, t)?,
        eps,
        t,
    })
}

/// Checks that teacher and students can be paired, before any training.
pub fn preflight(teacher: &TeacherModel, students: &[DeltaConvBlock<f64>], data: &[Tensor<f64>]) -> Result<()> {
    if teacher.layers.len() != students.len() {
        return Err(Error::dim("student count", teacher.layers.len(), students.len()));
    }
    if data.is_empty() {
        return Err(Error::usage("no training latents"));
    }
    let (_, c, h, w) = data[0].dims4()?;
    for (l, (tl, s)) in teacher.layers.iter().zip(students).enumerate() {
        if tl.channels() != c || s.config.channels != c {
            return Err(Error::dim(format!("layer {l} channels"), c, s.config.channels));
        }
        let f = s.config.max_factor();
        if h % f != 0 || w % f != 0 {
            return Err(Error::dim(format!("layer {l} latent height (divisible by {f})"), h.div_ceil(f) * f, h));
        }
    }
    for z in data {
        if z.shape() != data[0].shape() {
            return Err(Error::dim("latent size", data[0].len(), z.len()));
        }
    }
    Ok(())
}

/// Feature loss of `students` against `teacher` on the given examples (mean over examples).
fn eval_feature_loss(teacher: &TeacherModel, students: &[DeltaConvBlock<f64>], samples: &[(Sample, TeacherTrace)], r: Reduction) -> Result<f64> {
    let mut total = 0.0;
    for (_, tr) in samples {
        let outs = students
            .iter()
            .zip(&tr.inputs)
            .map(|(s, x)| s.forward(x))
            .collect::<Result<Vec<_>>>()?;
        total += feature_loss(&outs, &tr.outputs, r)?;
    }
    let _ = teacher;
    Ok(total / samples.len() as f64)
}

/// Train `students` (one per teacher layer) against the frozen `teacher`.
pub fn distill_run(
    teacher: &TeacherModel,
    mut students: Vec<DeltaConvBlock<f64>>,
    config: &DistillConfig,
    data: &[Tensor<f64>],
) -> Result<DistillResult> {
    config.validate()?;
    preflight(teacher, &students, data)?;
    let schedule = DiffusionSchedule::new(&config.schedule)?;
    let hash_before = teacher.param_hash();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut eval_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_e7a1);
    let eval_set = (0..config.eval_samples.max(1))
        .map(|_| {
            let s = draw_sample(data, &schedule, &mut eval_rng)?;
            let tr = teacher.forward(&s.z_t)?;
            Ok((s, tr))
        })
        .collect::<Result<Vec<_>>>()?;

    let names: Vec<String> = students
        .iter()
        .enumerate()
        .flat_map(|(l, s)| s.named_params().into_iter().map(move |(n, _)| format!("block{l}.{n}")))
        .collect();
    let mut state = {
        let all: Vec<&Tensor<f64>> = students.iter().flat_map(|s| s.named_params().into_iter().map(|(_, t)| t)).collect();
        AdamState::new(&all)
    };

    let mut trace = Vec::with_capacity(config.steps);
    let mut eval = vec![EvalRow {
        step: 0,
        l_f: eval_feature_loss(teacher, &students, &eval_set, config.reduction)?,
    }];

    for step in 0..config.steps {
        let mut tape = Tape::new();
        let vars: Vec<_> = students.iter().map(|s| s.register(&mut tape, true)).collect();
        let mut lf_terms = Vec::new();
        let mut lz_terms = Vec::new();
        let (mut lf_sum, mut lz_sum) = (0.0, 0.0);
        for _ in 0..config.batch_size {
            let sample = draw_sample(data, &schedule, &mut rng)?;
            let tr = teacher.forward(&sample.z_t)?;
            for (l, s) in students.iter().enumerate() {
                let x = tape.constant(tr.inputs[l].clone());
                let y = s.record(&mut tape, x, &vars[l])?;
                let target = tape.constant(tr.outputs[l].clone());
                let d = tape.sub(y, target)?;
                let sq = tape.square(d);
                let term = config.reduction.record(&mut tape, sq);
                lf_sum += tape.value(term).item()?;
                lf_terms.push(term);
            }
            if config.objective == Objective::Full {
                let mut x = tape.constant(sample.z_t.clone());
                for (l, s) in students.iter().enumerate() {
                    let y = s.record(&mut tape, x, &vars[l])?;
                    x = tape.add(x, y)?;
                }
                let weight = min_snr_weight(sample.t, &schedule, config.gamma)?;
                let mut pair = Vec::new();
                for target in [&tr.eps, &sample.eps] {
                    let tv = tape.constant(target.clone());
                    let d = tape.sub(tv, x)?;
                    let sq = tape.square(d);
                    pair.push(config.reduction.record(&mut tape, sq));
                }
                let both = tape.add(pair[0], pair[1])?;
                let term = tape.scale(both, weight);
                lz_sum += tape.value(term).item()?;
                lz_terms.push(term);
            }
        }
        let inv_b = 1.0 / config.batch_size as f64;
        let sum_all = |tape: &mut Tape<f64>, terms: &[Var]| -> Result<Option<Var>> {
            let mut acc: Option<Var> = None;
            for &t in terms {
                acc = Some(match acc {
                    None => t,
                    Some(a) => tape.add(a, t)?,
                });
            }
            Ok(acc)
        };
        let lf = sum_all(&mut tape, &lf_terms)?.expect("batch is non-empty");
        let loss = match (config.objective, sum_all(&mut tape, &lz_terms)?) {
            (Objective::Full, Some(lz)) => {
                let weighted = tape.scale(lf, config.beta);
                let both = tape.add(lz, weighted)?;
                tape.scale(both, inv_b)
            }
            _ => tape.scale(lf, inv_b),
        };
        let (l_f, l_z) = (lf_sum * inv_b, lz_sum * inv_b);
        let total = tape.value(loss).item()?;
        trace.push(TraceRow { step, l_f, l_z, total });
        if !total.is_finite() {
            return Err(Error::Numerical(format!(
                "loss became non-finite at step {step} (L_f = {l_f}, L_z = {l_z})"
            )));
        }
        let mut grads = tape.backward(loss)?;
        let grad_list: Vec<Tensor<f64>> = vars
            .iter()
            .flat_map(|v| v.all())
            .map(|v| grads.take(v).expect("student leaves are trainable"))
            .collect();
        let mut params: Vec<&mut Tensor<f64>> = students.iter_mut().flat_map(|s| s.params_mut()).collect();
        let opt = AdamW {
            lr: config.optimizer.lr * config.lr_schedule.factor(step, config.steps),
            ..config.optimizer
        };
        adamw_step(&mut params, &grad_list, &names, &mut state, &opt)?;
        let done = step + 1;
        if (config.eval_every > 0 && done % config.eval_every == 0) || done == config.steps {
            eval.push(EvalRow {
                step: done,
                l_f: eval_feature_loss(teacher, &students, &eval_set, config.reduction)?,
            });
        }
    }
    if let Some(bad) = students.iter().position(|s| !s.is_finite()) {
        return Err(Error::Numerical(format!("block {bad} has non-finite parameters")));
    }
    Ok(DistillResult {
        students,
        trace,
        eval,
        teacher_hash_before: hash_before,
        teacher_hash_after: teacher.param_hash(),
    })
}

/// Students with consecutive seeds.
pub fn init_students(config: &BlockConfig, layers: usize, seed: u64) -> Result<Vec<DeltaConvBlock<f64>>> {
    (0..layers)
        .map(|l| DeltaConvBlock::init(config.clone(), seed.wrapping_add(l as u64)))
        .collect()
}

pub const TRACE_HEADER: &str = "step,L_f,L_z,total";

pub fn write_trace_csv<W: Write>(out: &mut W, trace: &[TraceRow]) -> Result<()> {
    writeln!(out, "{TRACE_HEADER}")?;
    for r in trace {
        writeln!(out, "{},{:e},{:e},{:e}", r.step, r.l_f, r.l_z, r.total)?;
    }
    Ok(())
}

pub const EVAL_HEADER: &str = "step,L_f_eval";

pub fn write_eval_csv<W: Write>(out: &mut W, eval: &[EvalRow]) -> Result<()> {
    writeln!(out, "{EVAL_HEADER}")?;
    for r in eval {
        writeln!(out, "{},{:e}", r.step, r.l_f)?;
    }
    Ok(())
}
