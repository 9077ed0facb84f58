use deltaconv::delta_conv::{BlockConfig, BlockVars, DeltaConvBlock};
use deltaconv::distill::*;
use deltaconv::gradcheck::{check, STEP};
use deltaconv::{Error, Tape, Tensor, Var};
use proptest::prelude::*;

fn setup() -> (TeacherModel, Vec<DeltaConvBlock<f64>>, Vec<Tensor<f64>>) {
    let teacher = localized_teacher(8, 2, 9, TEACHER_QK_GAIN, 100).unwrap();
    let students = init_students(&BlockConfig::calibrated(8, 2, 9).unwrap(), 2, 1).unwrap();
    let data = smooth_latents(4, 8, 8, 8, 1, 0).unwrap();
    (teacher, students, data)
}

fn short(steps: usize) -> DistillConfig {
    DistillConfig { steps, batch_size: 2, eval_every: 0, eval_samples: 2, ..Default::default() }
}

#[test]
fn identical_runs_are_bit_identical_and_teacher_is_frozen() {
    let (teacher, students, data) = setup();
    let a = distill_run(&teacher, students.clone(), &short(5), &data).unwrap();
    let b = distill_run(&teacher, students.clone(), &short(5), &data).unwrap();
    assert_eq!(a.students, b.students);
    assert_eq!(a.trace, b.trace);
    assert_eq!(a.teacher_hash_before, a.teacher_hash_after);
    assert_eq!(a.teacher_hash_before.len(), 64);
    assert_ne!(a.students, students);
    assert_eq!(a.trace.len(), 5);
    assert!(a.students.iter().all(|s| s.is_finite()));
}

#[test]
fn beta_only_matters_from_the_first_update() {
    let (teacher, students, data) = setup();
    let zero_beta = DistillConfig { beta: 0.0, ..short(1) };
    let a = distill_run(&teacher, students.clone(), &zero_beta, &data).unwrap();
    let b = distill_run(&teacher, students.clone(), &short(1), &data).unwrap();
    assert_eq!(a.trace[0].l_f, b.trace[0].l_f);
    assert_eq!(a.trace[0].l_z, b.trace[0].l_z);
    assert_ne!(a.students, b.students);
    let a0 = distill_run(&teacher, students.clone(), &DistillConfig { beta: 0.0, ..short(0) }, &data).unwrap();
    let b0 = distill_run(&teacher, students, &short(0), &data).unwrap();
    assert_eq!(a0.students, b0.students);
}

#[test]
fn trace_totals_follow_the_loss_composition() {
    let (teacher, students, data) = setup();
    let run = distill_run(&teacher, students.clone(), &short(3), &data).unwrap();
    for r in &run.trace {
        assert!((r.total - total_loss(r.l_z, r.l_f, 0.001)).abs() < 1e-12 * r.total.abs().max(1.0));
    }
    let feat = DistillConfig { objective: Objective::FeatureOnly, ..short(3) };
    let run = distill_run(&teacher, students, &feat, &data).unwrap();
    for r in &run.trace {
        assert_eq!(r.l_z, 0.0);
        assert!((r.total - r.l_f).abs() < 1e-12);
    }
}

fn vars_for(v: &[Var], stages: usize) -> BlockVars {
    BlockVars {
        ln_gain: v[0],
        ln_bias: v[1],
        in_w: v[2],
        in_b: v[3],
        kernels: v[4..4 + stages].to_vec(),
        out_w: v[4 + stages],
        out_b: v[5 + stages],
        p_w: v[6 + stages],
        p_b: v[7 + stages],
    }
}

#[test]
fn total_loss_gradient_matches_finite_differences() {
    let (teacher, students, data) = setup();
    let schedule = DiffusionSchedule::new(&ScheduleSpec::default()).unwrap();
    let eps = smooth_latents(1, 8, 8, 8, 0, 42).unwrap().remove(0);
    let t = 300;
    let z_t = schedule.noised(&data[0], &eps, t).unwrap();
    let trace = teacher.forward(&z_t).unwrap();
    let w = min_snr_weight(t, &schedule, 5.0).unwrap();
    let block = &students[0];
    let stages = block.kernels.len();
    let inputs: Vec<Tensor<f64>> = block.named_params().into_iter().map(|(_, p)| p.clone()).collect();
    for beta in [0.0, 0.001, 1.0] {
        let errs = check(
            |tape: &mut Tape<f64>, v: &[Var]| {
                let vars = vars_for(v, stages);
                let x = tape.constant(trace.inputs[0].clone());
                let y = block.record(tape, x, &vars)?;
                let target = tape.constant(trace.outputs[0].clone());
                let d = tape.sub(y, target)?;
                let sq = tape.square(d);
                let lf = tape.mean(sq);
                let z = tape.constant(z_t.clone());
                let out = tape.add(z, y)?;
                let mut pair = Vec::new();
                for tgt in [&trace.eps, &eps] {
                    let c = tape.constant(tgt.clone());
                    let d = tape.sub(c, out)?;
                    let sq = tape.square(d);
                    pair.push(tape.mean(sq));
                }
                let both = tape.add(pair[0], pair[1])?;
                let lz = tape.scale(both, w);
                let weighted = tape.scale(lf, beta);
                tape.add(lz, weighted)
            },
            &inputs,
            STEP,
        )
        .unwrap();
        assert!(errs.iter().all(|e| *e < 1e-4), "beta {beta}: {errs:?}");
    }
}

#[test]
fn teacher_parameters_never_receive_gradients() {
    let teacher_block = DeltaConvBlock::<f64>::init(BlockConfig::new(8, 2, vec![3, 1]).unwrap(), 3).unwrap();
    let student = DeltaConvBlock::<f64>::init(BlockConfig::new(8, 2, vec![3, 1]).unwrap(), 4).unwrap();
    let z = smooth_latents(1, 8, 8, 8, 1, 0).unwrap().remove(0);
    let mut tape = Tape::new();
    let tv = teacher_block.register(&mut tape, false);
    let sv = student.register(&mut tape, true);
    let x = tape.constant(z);
    let target = teacher_block.record(&mut tape, x, &tv).unwrap();
    let y = student.record(&mut tape, x, &sv).unwrap();
    let d = tape.sub(y, target).unwrap();
    let sq = tape.square(d);
    let loss = tape.mean(sq);
    let grads = tape.backward(loss).unwrap();
    assert!(tv.all().into_iter().all(|v| grads.get(v).is_none()));
    assert!(sv.all().into_iter().all(|v| grads.get(v).is_some()));
}

#[test]
fn self_distillation_drives_feature_loss_down() {
    let cfg = BlockConfig::calibrated(8, 2, 9).unwrap();
    let teacher_cfg = BlockConfig { gate_bias_init: 0.0, ..cfg.clone() };
    let teacher = TeacherModel { layers: vec![TeacherLayer::Delta(DeltaConvBlock::init(teacher_cfg, 50).unwrap())] };
    let data = smooth_latents(2, 8, 8, 8, 1, 0).unwrap();
    let config = DistillConfig {
        objective: Objective::FeatureOnly,
        optimizer: AdamW { lr: 1e-2, ..AdamW::default() },
        lr_schedule: LrSchedule::Cosine { floor: 0.0 },
        ..short(2000)
    };
    let run = distill_run(&teacher, init_students(&cfg, 1, 1).unwrap(), &config, &data).unwrap();
    assert!(run.final_feature_loss() < 1e-6, "final {}", run.final_feature_loss());
}

#[test]
fn preflight_catches_incompatible_shapes() {
    let (teacher, students, _) = setup();
    let odd = smooth_latents(1, 8, 6, 6, 1, 0).unwrap();
    assert!(matches!(distill_run(&teacher, students.clone(), &short(1), &odd), Err(Error::Dimension { .. })));
    let wrong_channels = smooth_latents(1, 4, 8, 8, 1, 0).unwrap();
    assert!(distill_run(&teacher, students.clone(), &short(1), &wrong_channels).is_err());
    assert!(distill_run(&teacher, students[..1].to_vec(), &short(1), &smooth_latents(1, 8, 8, 8, 1, 0).unwrap()).is_err());
    assert!(distill_run(&teacher, students, &short(1), &[]).is_err());
    let bad = DistillConfig { gamma: 0.0, ..short(1) };
    assert!(matches!(bad.validate(), Err(Error::Config(_))));
}

#[test]
fn trace_csv_layout() {
    let rows = [TraceRow { step: 0, l_f: 1.5, l_z: 0.25, total: 0.2515 }];
    let mut out = Vec::new();
    write_trace_csv(&mut out, &rows).unwrap();
    let text = String::from_utf8(out).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("step,L_f,L_z,total"));
    let fields: Vec<f64> = lines.next().unwrap().split(',').map(|f| f.parse().unwrap()).collect();
    assert_eq!(fields, vec![0.0, 1.5, 0.25, 0.2515]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn min_snr_weight_is_bounded_and_monotone(t1 in 1usize..=1000, t2 in 1usize..=1000, gamma in 0.1f64..20.0) {
        let s = DiffusionSchedule::new(&ScheduleSpec::default()).unwrap();
        let (w1, w2) = (min_snr_weight(t1, &s, gamma).unwrap(), min_snr_weight(t2, &s, gamma).unwrap());
        prop_assert!(w1 > 0.0 && w1 <= 1.0);
        let snr = |t: usize| (s.sigma_z(t) / s.sigma_eps(t)).powi(2);
        if snr(t1) <= snr(t2) {
            prop_assert!(w1 <= w2);
        }
    }

    #[test]
    fn feature_loss_ignores_layer_order(seed in 0u64..1000) {
        let a = smooth_latents(3, 2, 4, 4, 0, seed).unwrap();
        let b = smooth_latents(3, 2, 4, 4, 0, seed + 1).unwrap();
        let fwd = feature_loss(&a, &b, Reduction::Sum).unwrap();
        let ra: Vec<_> = a.iter().rev().cloned().collect();
        let rb: Vec<_> = b.iter().rev().cloned().collect();
        prop_assert!((fwd - feature_loss(&ra, &rb, Reduction::Sum).unwrap()).abs() < 1e-9 * fwd.max(1.0));
    }
}
