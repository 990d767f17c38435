//! End-to-end acceptance run. Every criterion prints one PASS/FAIL line;
//! the test fails at the end if any criterion failed. Lines go straight to
//! stderr so they show up without `--nocapture`.
//!
//! Takes roughly 35 minutes on one core in the default (optimized) test
//! profile.

use std::io::Write;
use std::time::Instant;

use nalgebra::{Rotation3, Unit, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sonoglove::geometry::{default_platform, platform_experiment, trilaterate, TriangleFrame};
use sonoglove::kinematics::{
    default_skeleton, forward_kinematics, normalize_pose, pairwise_distances, JointAngles, NormalizationFrame,
};
use sonoglove::nn::gradcheck::{projection_loss, random_tensor};
use sonoglove::nn::{
    grad_check, linear_backward, linear_forward, lstm_sequence, lstm_sequence_backward, mha_backward, mha_forward,
    softmax_rows, softmax_rows_backward, FnModule, GradCheckConfig, GradCheckable, LstmParams, MhaParams, Tensor,
};
use sonoglove::pipeline::{
    encode_stream, evaluate, evaluate_baseline, finetune, gen_human_dataset, gen_mech_dataset, pretrain,
    stream_infer, AblationRow, AblationTable, DomainConfig, SensorRow, SensorTable, FINETUNE_LR,
};
use sonoglove::posenet::{HeadKind, ModelConfig, ModelGradCheck, ModelState, TrainConfig, Variant};
use sonoglove::sensorsim::DEFAULT_D_MAX;

const GRAD_TOL: f64 = 1e-4;
const HUMAN_POSES: usize = 20_000;
const MECH_FRAMES: usize = 30_000;
const REFERENCE_LADDER: [(usize, f64); 4] = [(5, 1.24), (6, 1.07), (7, 0.85), (8, 0.82)];

struct Outcome {
    id: usize,
    name: &'static str,
    passed: bool,
    detail: String,
}

macro_rules! say {
    ($($arg:tt)*) => {{
        let _ = writeln!(std::io::stderr(), $($arg)*);
    }};
}

fn report(id: usize, name: &'static str, passed: bool, detail: String, t0: Instant) -> Outcome {
    say!(
        "[{}] {id:>2} {name}: {detail} ({:.0} s)",
        if passed { "PASS" } else { "FAIL" },
        t0.elapsed().as_secs_f64()
    );
    Outcome { id, name, passed, detail }
}

fn check(m: &mut dyn GradCheckable) -> f64 {
    let cfg = GradCheckConfig { tolerance: GRAD_TOL, ..GradCheckConfig::default() };
    let rep = grad_check(m, &cfg).expect("grad check runs");
    rep.max_rel_error
}

fn gradient_integrity() -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut out = Vec::new();

    let x = random_tensor(&[6, 7], 1.0, &mut rng);
    let w = random_tensor(&[7, 8], 1.0, &mut rng);
    let b = random_tensor(&[1, 8], 1.0, &mut rng);
    let r = random_tensor(&[6, 8], 1.0, &mut rng);
    let mut m = FnModule::new(vec![x, w, b], move |l: &[Tensor]| {
        let y = linear_forward(&l[0], &l[1], &l[2])?;
        let g = linear_backward(&l[0], &l[1], &r)?;
        Ok((projection_loss(&y, &r), vec![g.dx, g.dw, g.db]))
    });
    out.push(("linear", check(&mut m)));

    let x = random_tensor(&[5, 8], 2.0, &mut rng);
    let r = random_tensor(&[5, 8], 1.0, &mut rng);
    let mut m = FnModule::new(vec![x], move |l: &[Tensor]| {
        let y = softmax_rows(&l[0]);
        Ok((projection_loss(&y, &r), vec![softmax_rows_backward(&y, &r)]))
    });
    out.push(("softmax", check(&mut m)));

    let (dk, heads, n) = (16, 2, 7);
    let z1 = random_tensor(&[2 * n, 8], 1.0, &mut rng);
    let mut leaves = vec![z1];
    for _ in 0..3 * heads {
        leaves.push(random_tensor(&[8, dk], 0.4, &mut rng));
    }
    leaves.push(random_tensor(&[heads * dk, 8], 0.4, &mut rng));
    let r = random_tensor(&[2 * n, 8], 1.0, &mut rng);
    let mut m = FnModule::new(leaves, move |l: &[Tensor]| {
        let p = MhaParams {
            wq: &l[1..1 + heads],
            wk: &l[1 + heads..1 + 2 * heads],
            wv: &l[1 + 2 * heads..1 + 3 * heads],
            wo: &l[1 + 3 * heads],
        };
        let (z2, cache) = mha_forward(&l[0], n, &p)?;
        let g = mha_backward(&cache, &p, &r)?;
        let mut grads = vec![g.dz1];
        grads.extend(g.dwq);
        grads.extend(g.dwk);
        grads.extend(g.dwv);
        grads.push(g.dwo);
        Ok((projection_loss(&z2, &r), grads))
    });
    out.push(("attention", check(&mut m)));

    let (hid, t) = (16, 5);
    let mut leaves: Vec<Tensor> = (0..t).map(|_| random_tensor(&[3, 8], 1.0, &mut rng)).collect();
    leaves.push(random_tensor(&[8, 4 * hid], 0.5, &mut rng));
    leaves.push(random_tensor(&[hid, 4 * hid], 0.5, &mut rng));
    leaves.push(random_tensor(&[1, 4 * hid], 0.5, &mut rng));
    let r = random_tensor(&[3, hid], 1.0, &mut rng);
    let mut m = FnModule::new(leaves, move |l: &[Tensor]| {
        let p = LstmParams { wx: &l[t], wh: &l[t + 1], b: &l[t + 2] };
        let (h, cache) = lstm_sequence(&l[..t], &p)?;
        let g = lstm_sequence_backward(&cache, &p, &r)?;
        let mut grads = g.dxs;
        grads.extend([g.dwx, g.dwh, g.db]);
        Ok((projection_loss(&h, &r), grads))
    });
    out.push(("lstm", check(&mut m)));

    let cfg = ModelConfig {
        enc_hidden: 8,
        enc_out: 8,
        head_dim: 8,
        attn_out: 8,
        dec_hidden: 16,
        dec_out: 16,
        lstm_hidden: 16,
        head_hidden: 16,
        seed: 3,
        ..ModelConfig::servo()
    };
    let model = ModelState::new(cfg, None).expect("model");
    let windows: Vec<Vec<Vec<f64>>> = (0..2)
        .map(|_| (0..5).map(|_| (0..49).map(|_| rng.random_range(0.0..1.0)).collect()).collect())
        .collect();
    let targets: Vec<Vec<f64>> = (0..2).map(|_| (0..5).map(|_| rng.random_range(-0.5..0.5)).collect()).collect();
    let w: Vec<&[Vec<f64>]> = windows.iter().map(Vec::as_slice).collect();
    let tg: Vec<&[f64]> = targets.iter().map(Vec::as_slice).collect();
    let mut m = ModelGradCheck::new(model, &w, &tg, 1.0).expect("model check");
    out.push(("full model", check(&mut m)));
    out
}

fn trilateration_exactness() -> f64 {
    let frame = TriangleFrame::new(0.08).expect("frame");
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let p = Vector3::new(
            rng.random_range(-0.25..0.25),
            rng.random_range(-0.25..0.25),
            rng.random_range(0.0..0.25),
        );
        let (a, b, c) = frame.ranges(&p);
        let q = trilaterate(&frame, a, b, c).expect("consistent ranges");
        worst = worst.max((q - p).norm());
    }
    worst
}

fn random_rotation(rng: &mut ChaCha8Rng) -> Rotation3<f64> {
    let axis = Vector3::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5);
    Rotation3::from_axis_angle(&Unit::new_normalize(axis), rng.random_range(0.0..std::f64::consts::TAU))
}

/// Worst idempotence, invariance and distance-preservation errors.
fn normalization_suite() -> [f64; 3] {
    let skel = default_skeleton();
    let nf = NormalizationFrame::for_skeleton(&skel).expect("frame");
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst = [0.0f64; 3];
    for _ in 0..10_000 {
        let theta = JointAngles(skel.dofs().iter().map(|d| d.min + rng.random::<f64>() * d.span()).collect());
        let t0 = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let pose = forward_kinematics(&skel, &theta).expect("fk").transformed(&random_rotation(&mut rng), &t0);
        let n1 = normalize_pose(&pose, nf).expect("normalize");
        let n2 = normalize_pose(&n1, nf).expect("normalize");
        let t = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let n3 = normalize_pose(&pose.transformed(&random_rotation(&mut rng), &t), nf).expect("normalize");
        for l in 0..n1.len() {
            worst[0] = worst[0].max((n1.points[l] - n2.points[l]).norm());
            worst[1] = worst[1].max((n1.points[l] - n3.points[l]).norm());
        }
        let dd = pairwise_distances(&pose)
            .iter()
            .zip(pairwise_distances(&n1))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        worst[2] = worst[2].max(dd);
    }
    worst
}

fn train_config(epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs,
        windows_per_epoch: Some(6000),
        final_lr_scale: 0.05,
        seed,
        ..TrainConfig::default()
    }
}

#[test]
fn acceptance() {
    let t0 = Instant::now();
    let mut results = Vec::new();

    let grads = gradient_integrity();
    let worst = grads.iter().map(|g| g.1).fold(0.0, f64::max);
    let detail = grads.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect::<Vec<_>>().join(", ");
    results.push(report(1, "gradient integrity", worst < GRAD_TOL, format!("{detail} (tol {GRAD_TOL:.0e})"), t0));

    let err = trilateration_exactness();
    results.push(report(2, "trilateration exactness", err < 1e-9, format!("worst {err:.2e} m over 1000 points"), t0));

    let (frame, d) = default_platform();
    let noisy = platform_experiment(&frame, d, 1000, 0.0005, 3).expect("platform").mean_error * 1000.0;
    let clean = platform_experiment(&frame, d, 1000, 0.0, 3).expect("platform").mean_error;
    results.push(report(
        3,
        "platform bracket",
        (0.2..=1.5).contains(&noisy) && clean < 1e-9,
        format!("noisy residual {noisy:.3} mm, noiseless {clean:.1e} m"),
        t0,
    ));

    let mech = gen_mech_dataset(&DomainConfig::mechanical(), MECH_FRAMES, 1).expect("mech data");
    let (mtrain, _, mtest) = mech.split(0);
    let (state, _) = pretrain(&mtrain, None, &ModelConfig::servo(), &train_config(10, 0), DEFAULT_D_MAX).expect("train");
    let mech_mae = evaluate(&state, &mtest, DEFAULT_D_MAX).expect("eval").mean;
    results.push(report(
        4,
        "mechanical hand",
        mech_mae < 0.05,
        format!("test MAE {mech_mae:.4} on {MECH_FRAMES} frames, {} parameters", state.param_count()),
        t0,
    ));

    // ablations on the rig at recorded-session noise, 128-wide decoder and
    // LSTM to afford a longer schedule
    let recorded = gen_mech_dataset(&DomainConfig::mechanical_recorded(), MECH_FRAMES, 1).expect("mech data");
    let (atrain, _, atest) = recorded.split(0);
    let base = ModelConfig { dec_hidden: 128, dec_out: 128, lstm_hidden: 128, ..ModelConfig::servo() };
    let seeds = [0u64, 1, 2];
    let mut rows = Vec::new();
    for v in Variant::ALL {
        let mut losses = Vec::new();
        let mut params = 0;
        for &seed in &seeds {
            let mc = ModelConfig { seed, ..v.apply(&base) };
            let (state, _) = pretrain(&atrain, None, &mc, &train_config(30, seed), DEFAULT_D_MAX).expect("train");
            let mae = evaluate(&state, &atest, DEFAULT_D_MAX).expect("eval").mean;
            params = state.param_count();
            say!("  {} seed {seed}: {mae:.5}", v.name());
            losses.push(mae);
        }
        let mean = losses.iter().sum::<f64>() / losses.len() as f64;
        rows.push(AblationRow { variant: v, params, losses, mean });
    }
    let ablation = AblationTable { seeds: seeds.to_vec(), rows };
    say!("{}", ablation.table().to_text().trim_end());
    let detail = ablation
        .rows
        .iter()
        .map(|r| format!("{} {:.4}", r.variant.name(), r.mean))
        .collect::<Vec<_>>()
        .join(", ");
    results.push(report(5, "ablation ordering", ablation.check().is_ok(), detail, t0));

    // sensor-count ladder on one pose corpus; the 7-sensor model and data
    // feed the baseline and fine-tuning checks
    let domain = DomainConfig::default();
    let mut srows = Vec::new();
    let mut seven = None;
    for (n, _) in REFERENCE_LADDER {
        let dom = DomainConfig { n_sensors: n, ..domain.clone() };
        let data = gen_human_dataset(&dom, HUMAN_POSES, 0).expect("human data");
        let (train, _, test) = data.split(0);
        let (state, _) = pretrain(&train, None, &ModelConfig::default(), &train_config(15, 0), dom.d_max).expect("train");
        let e = evaluate(&state, &test, dom.d_max).expect("eval").mean;
        say!("  {n} sensors: {e:.3} cm");
        srows.push(SensorRow { n, pairs: n * (n - 1) / 2, errors: vec![e], mean: e });
        if n == 7 {
            seven = Some((state, train, test, e));
        }
    }
    let ladder = SensorTable { seeds: vec![0], rows: srows };
    say!("{}", ladder.table().to_text().trim_end());
    let within = REFERENCE_LADDER.iter().all(|&(n, p)| {
        let e = ladder.mean_of(n);
        e > p / 2.0 && e < p * 2.0
    });
    let shape = ladder.check();
    let detail = format!(
        "{} cm; {}; {}",
        REFERENCE_LADDER.iter().map(|&(n, _)| format!("{:.3}", ladder.mean_of(n))).collect::<Vec<_>>().join(" / "),
        shape.as_ref().map_or_else(|e| e.clone(), |_| "ordering and plateau hold".into()),
        if within { "within 2x of reference" } else { "outside 2x of reference" }
    );
    results.push(report(6, "sensor ladder", shape.is_ok() && within, detail, t0));

    let (mut state, train, test, model_err) = seven.expect("7-sensor run");
    let baseline = evaluate_baseline(&train, &test, state.config.window).expect("baseline").mean;
    let ratio = baseline / model_err;
    results.push(report(
        7,
        "baseline gap",
        ratio >= 2.0,
        format!("nearest neighbor {baseline:.3} cm vs model {model_err:.3} cm, ratio {ratio:.2}"),
        t0,
    ));

    let shifted = domain.shifted();
    let real = gen_human_dataset(&shifted, 5000, 0).expect("shifted data");
    let (rtrain, rval, rtest) = real.split(0);
    let before = evaluate(&state, &rtest, shifted.d_max).expect("eval").mean;
    let cfg = TrainConfig {
        lr: FINETUNE_LR,
        ..train_config(10, 0)
    };
    finetune(&mut state, &rtrain, Some(&rval), &TrainConfig { windows_per_epoch: Some(3000), ..cfg }, shifted.d_max)
        .expect("finetune");
    let after = evaluate(&state, &rtest, shifted.d_max).expect("eval").mean;
    let reduction = 1.0 - after / before;
    results.push(report(
        8,
        "fine-tune benefit",
        reduction >= 0.10,
        format!("shifted domain {before:.3} -> {after:.3} cm ({:.1}% lower)", 100.0 * reduction),
        t0,
    ));

    let norm = normalization_suite();
    results.push(report(
        9,
        "normalization suite",
        norm.iter().all(|&e| e < 1e-9),
        format!(
            "idempotence {:.1e}, invariance {:.1e}, distances {:.1e} m over 10000 poses",
            norm[0], norm[1], norm[2]
        ),
        t0,
    ));

    // full-size model, replayed twice
    let frames = gen_human_dataset(&domain, 1000, 5).expect("stream data");
    let mut wire = Vec::new();
    let ms: Vec<_> = frames.records.iter().map(|r| r.matrix().expect("matrix")).collect();
    encode_stream(&ms, &mut wire).expect("encode");
    let replay = || {
        let mut out = Vec::new();
        let stats = stream_infer(wire.as_slice(), &state, domain.d_max, &mut out).expect("stream");
        (stats, out)
    };
    let (s1, o1) = replay();
    let (_, o2) = replay();
    let lines = o1.iter().filter(|&&b| b == b'\n').count();
    let ok = s1.frames_per_second >= 10.0 && o1 == o2 && lines == 1000 && state.config.head == HeadKind::PoseBasis;
    results.push(report(
        10,
        "streaming",
        ok,
        format!(
            "{:.0} frames/s, mean latency {:.2} ms, {} outputs, replays {}",
            s1.frames_per_second,
            s1.mean_latency_ms,
            lines,
            if o1 == o2 { "identical" } else { "differ" }
        ),
        t0,
    ));

    say!();
    let failed: Vec<&Outcome> = results.iter().filter(|r| !r.passed).collect();
    for r in &results {
        say!("{:>2} {:<24} {}", r.id, r.name, if r.passed { "pass" } else { "FAIL" });
    }
    assert!(
        failed.is_empty(),
        "failed criteria: {}",
        failed.iter().map(|r| format!("{} ({})", r.id, r.detail)).collect::<Vec<_>>().join("; ")
    );
}
