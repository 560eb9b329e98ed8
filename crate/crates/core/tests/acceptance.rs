//! Acceptance suite: kernel correctness, format round-trips and the
//! desk-scale experiments, each reported as one PASS/FAIL line.
//!
//! Runs without the libtest harness so the report is always printed.
//! Criteria run one after another; the experiments are CPU-bound and the
//! datasets are dropped as soon as their criteria are decided.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use common::*;
use resframe::evalfuse::{evaluate, fuse_all, pearson_correlation, predict_videos, EvalReport, Prediction};
use resframe::framestore::{read_packed, write_packed, MemoryVideo, PackedClips, PackedData, PackedDtype, VideoFrames};
use resframe::models::{
    build, load_params, save_params, Downsample, Dtype, ModelConfig, Network, TensorFile,
};
use resframe::motioninput::{residual_clip, ClipMode, ClipSpec, FrameSize};
use resframe::neuralcore::{Activation, DiffKind};
use resframe::synthgen::{generate, AppearanceFamily, MotionFamily, Shape, SynthConfig, Task};
use resframe::trainer::{
    fit, init_rng, load_checkpoint, run_epoch, save_checkpoint, EpochRecord, Split, TrainConfig, TrainState,
};
use resframe::Tensor;

/// Epochs of every 3D run on the motion-gap dataset.
const MOTION_EPOCHS: usize = 20;
/// Epochs of the runs on the appearance and mixed datasets. The single-frame
/// path sees one frame per video per epoch and needs the longer schedule.
const APPEARANCE_2D_EPOCHS: usize = 60;
const APPEARANCE_3D_EPOCHS: usize = 60;
const MIXED_3D_EPOCHS: usize = 20;
const TEST_CLIPS: usize = 5;
const MIXED_CLASSES: usize = 8;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------------------
// experiment plumbing

fn clip_spec(mode: ClipMode) -> ClipSpec {
    ClipSpec {
        frames: 8,
        crop: FrameSize::new(24, 24),
        resize: FrameSize::new(32, 32),
        mode,
        train_augment: true,
        residual_kind: DiffKind::Absolute,
    }
}

fn frame_spec() -> ClipSpec {
    ClipSpec::single_frame(FrameSize::new(24, 24), FrameSize::new(32, 32))
}

fn motion_model(classes: usize, activation: Activation) -> ModelConfig {
    ModelConfig {
        downsample: Downsample::Stride,
        activation,
        input_shape: vec![3, 8, 24, 24],
        ..ModelConfig::desk_motion(classes)
    }
}

fn appearance_model(classes: usize) -> ModelConfig {
    ModelConfig {
        input_shape: vec![3, 24, 24],
        ..ModelConfig::desk_appearance(classes)
    }
}

fn recipe(epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs,
        seed,
        ..TrainConfig::default()
    }
}

struct Run {
    history: Vec<EpochRecord>,
    params_sha256: String,
    predictions: Vec<Prediction>,
    report: EvalReport,
    seconds: f64,
}

fn params_sha256(net: &Network) -> String {
    let file = TensorFile {
        config_hash: net.config().hash(),
        dtype: Dtype::F64,
        metadata: serde_json::Value::Null,
        tensors: net.export_tensors(),
    };
    hex::encode(Sha256::digest(file.encode().unwrap()))
}

fn labels(videos: &[MemoryVideo]) -> Vec<(String, usize)> {
    videos.iter().map(|v| (v.id().to_string(), v.label())).collect()
}

fn train_and_score(
    train: &[MemoryVideo],
    val: &[MemoryVideo],
    model: ModelConfig,
    spec: &ClipSpec,
    config: &TrainConfig,
) -> Run {
    let start = Instant::now();
    let classes = model.num_classes;
    let mut net = build(model, &mut init_rng(config.seed)).unwrap();
    let mut state = TrainState::new(&net, config.seed);
    fit(&mut net, &mut state, train, val, spec, config, |_, _, _| Ok(())).unwrap();
    let test = ClipSpec {
        train_augment: false,
        ..spec.clone()
    };
    let predictions = predict_videos(&net, val, &test, TEST_CLIPS).unwrap();
    let report = evaluate(&predictions, &labels(val), classes).unwrap();
    Run {
        history: state.history,
        params_sha256: params_sha256(&net),
        predictions,
        report,
        seconds: start.elapsed().as_secs_f64(),
    }
}

fn pts(x: f64) -> String {
    format!("{:.1}", 100.0 * x)
}

// ---------------------------------------------------------------------------
// datasets

/// 4 motion classes, randomized looks, 100 train / 25 val videos per class,
/// 24 frames of 32x32 each.
fn motion_gap_dataset() -> SynthConfig {
    SynthConfig::new(Task::MotionLabels, 4, 125, 1)
}

fn red() -> AppearanceFamily {
    AppearanceFamily::new("red_square", Shape::Square, [0.85, 0.1, 0.1])
}

fn green() -> AppearanceFamily {
    AppearanceFamily::new("green_circle", Shape::Circle, [0.15, 0.8, 0.2])
}

/// Looks told apart by absolute color only: each pair shares a shape and
/// has colors mirrored about the background mid level, so their absolute
/// residuals are identically distributed.
fn mirrored_pairs() -> Vec<AppearanceFamily> {
    vec![red(), red().mirrored("cyan_square"), green(), green().mirrored("magenta_circle")]
}

fn appearance_dataset() -> SynthConfig {
    SynthConfig {
        appearance_families: Some(mirrored_pairs()),
        ..SynthConfig::new(Task::AppearanceLabels, 4, 125, 2)
    }
}

/// Eight (motion, look) classes of two kinds. Four share a look in pairs
/// and differ only in direction (up or down); four share the horizontal
/// oscillation and differ only in look, as two mirrored pairs.
fn mixed_dataset() -> SynthConfig {
    let mut looks = vec![
        AppearanceFamily::new("yellow_cross", Shape::Cross, [0.95, 0.9, 0.1]),
        AppearanceFamily::new("blue_triangle", Shape::Triangle, [0.2, 0.3, 0.95]),
    ];
    looks.extend(mirrored_pairs());
    SynthConfig {
        motion_families: Some(vec![MotionFamily::UpSlow, MotionFamily::DownSlow, MotionFamily::OscillateHorizontal]),
        appearance_families: Some(looks),
        mixed_pairs: Some(vec![[0, 0], [1, 0], [0, 1], [1, 1], [2, 2], [2, 3], [2, 4], [2, 5]]),
        ..SynthConfig::new(Task::MixedLabels, MIXED_CLASSES, 200, 3)
    }
}

fn splits(config: &SynthConfig) -> (Vec<MemoryVideo>, Vec<MemoryVideo>) {
    let ds = generate(config).unwrap();
    (ds.split(Split::Train), ds.split(Split::Val))
}

// ---------------------------------------------------------------------------
// criteria 1-3, 9, 11: kernels, transforms, formats

fn c1_gradients() -> Outcome {
    const CONFIGS: u64 = 20;
    let mut worst = (0.0f64, "");
    for (name, f) in gradient_checks() {
        for seed in 0..CONFIGS {
            let err = f(seed);
            if err > worst.0 {
                worst = (err, name);
            }
        }
    }
    check(
        worst.0 <= GRAD_REL_TOL,
        format!(
            "{CONFIGS} configurations per layer, step {FD_STEP:e}; worst relative error {:.2e} ({})",
            worst.0, worst.1
        ),
    )
}

fn c2_oracles() -> Outcome {
    let mut worst: f64 = 0.0;
    for seed in 0..3 {
        worst = worst
            .max(oracle_sweep_conv3d(seed))
            .max(oracle_sweep_conv2d(seed))
            .max(oracle_sweep_maxpool(seed));
    }
    check(
        worst <= ORACLE_TOL,
        format!("conv3d, conv2d, maxpool3d on extents 1..=6; worst |diff| {worst:.2e}"),
    )
}

fn c3_residual_properties() -> Outcome {
    let mut g = ChaCha8Rng::seed_from_u64(33);
    let mut failures = Vec::new();
    for case in 0..50 {
        let (t, h, w) = (g.random_range(2..=9), g.random_range(1..=8), g.random_range(1..=8));
        let frames = Tensor::from_fn(&[t, h, w, 3], |_| g.random_range(0.0..1.0));
        let res = residual_clip(&frames).unwrap();
        let frame = h * w * 3;
        let fd = frames.data();
        let recomputed: Vec<f64> = (0..(t - 1) * frame).map(|i| (fd[i] - fd[i + frame]).abs()).collect();
        if res.data() != recomputed.as_slice() {
            failures.push(format!("case {case}: recomputation"));
        }
        if res.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            failures.push(format!("case {case}: range"));
        }
        let reverse = |x: &Tensor| {
            let n = x.shape()[0];
            let len = x.len() / n;
            let data: Vec<f64> = (0..n).rev().flat_map(|i| x.data()[i * len..(i + 1) * len].to_vec()).collect();
            Tensor::new(x.shape().to_vec(), data).unwrap()
        };
        if residual_clip(&reverse(&frames)).unwrap() != reverse(&res) {
            failures.push(format!("case {case}: reversal"));
        }
        let still = Tensor::from_fn(&[t, h, w, 3], |i| fd[i % frame]);
        if residual_clip(&still).unwrap().data().iter().any(|&v| v != 0.0) {
            failures.push(format!("case {case}: identical frames"));
        }
    }
    check(
        failures.is_empty(),
        if failures.is_empty() {
            "50 random clips: zero on identical frames, |a-b| recomputation, reversal symmetry, range".into()
        } else {
            failures.join(", ")
        },
    )
}

fn c9_parameter_parity() -> Outcome {
    let count = |c: &ModelConfig| -> usize { build(c.clone(), &mut init_rng(0)).unwrap().num_params() };
    let mut lines = Vec::new();
    let mut ok = true;
    for (name, base) in [
        ("full-size", ModelConfig::full_motion(101)),
        // the pooled variant needs more than the 24x24 training crop
        ("desk", ModelConfig::desk_motion(4)),
    ] {
        let stride = count(&ModelConfig { downsample: Downsample::Stride, ..base.clone() });
        let pool = count(&ModelConfig { downsample: Downsample::Pool, ..base });
        let rel = (stride as f64 - pool as f64).abs() / stride.max(pool) as f64;
        ok &= rel < 0.01;
        lines.push(format!("{name}: stride {stride} vs pool {pool} ({:.3}%)", 100.0 * rel));
    }
    check(ok, lines.join("; "))
}

fn c11_round_trips() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut failures = Vec::new();
    let mut g = ChaCha8Rng::seed_from_u64(11);

    // packed clip files, both dtypes
    for dtype in [PackedDtype::U8, PackedDtype::F32] {
        let mut clips = PackedClips::new([3, 4, 5, 3], dtype);
        for _ in 0..100 {
            let clip = Tensor::from_fn(&[3, 4, 5, 3], |_| match dtype {
                PackedDtype::U8 => g.random_range(0..=255u8) as f64 / 255.0,
                PackedDtype::F32 => g.random_range(0.0f32..1.0) as f64,
            });
            clips.push(&clip, g.random_range(0..7)).unwrap();
        }
        let path = dir.path().join("clips.rmc");
        write_packed(&path, &clips).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let back = read_packed(&path).unwrap();
        if back != clips || back.encode().unwrap() != bytes {
            failures.push(format!("packed {dtype:?}"));
        }
        if matches!(back.data, PackedData::U8(_)) != (dtype == PackedDtype::U8) {
            failures.push(format!("packed {dtype:?} dtype tag"));
        }
    }

    // parameter files
    let model = ModelConfig {
        input_shape: vec![3, 4, 16, 16],
        ..motion_model(3, Activation::Elu)
    };
    let net = build(model.clone(), &mut init_rng(4)).unwrap();
    let path = dir.path().join("params.rmp");
    save_params(&net, &path, Dtype::F64).unwrap();
    let loaded = load_params(&path, &model).unwrap();
    let again = dir.path().join("params2.rmp");
    save_params(&loaded, &again, Dtype::F64).unwrap();
    if std::fs::read(&path).unwrap() != std::fs::read(&again).unwrap()
        || loaded.export_tensors() != net.export_tensors()
    {
        failures.push("parameter file".into());
    }

    // checkpoint resume against an uninterrupted run
    let mut data_rng = ChaCha8Rng::seed_from_u64(12);
    let mut videos = |n: usize, tag: &str| -> Vec<MemoryVideo> {
        (0..n)
            .map(|i| {
                let frames = Tensor::from_fn(&[9, 18, 18, 3], |_| data_rng.random_range(0.0..1.0));
                MemoryVideo::new(format!("{tag}{i:02}"), i % 3, frames).unwrap()
            })
            .collect()
    };
    let (train, val) = (videos(12, "t"), videos(6, "v"));
    let spec = ClipSpec {
        frames: 4,
        crop: FrameSize::new(16, 16),
        resize: FrameSize::new(18, 18),
        ..clip_spec(ClipMode::Residual)
    };
    let config = TrainConfig {
        batch_size: 4,
        initial_lr: 0.05,
        epochs: 3,
        val_clips: 2,
        seed: 5,
        ..TrainConfig::default()
    };
    let fresh = || {
        let net = build(model.clone(), &mut init_rng(config.seed)).unwrap();
        let state = TrainState::new(&net, config.seed);
        (net, state)
    };
    let (mut full, mut full_state) = fresh();
    fit(&mut full, &mut full_state, &train, &val, &spec, &config, |_, _, _| Ok(())).unwrap();
    let (mut net, mut state) = fresh();
    run_epoch(&mut net, &mut state, &train, &val, &spec, &config).unwrap();
    let ckpt = dir.path().join("checkpoint.rmp");
    save_checkpoint(&ckpt, &net, &state, &config).unwrap();
    drop((net, state));
    let (mut net, mut state, saved) = load_checkpoint(&ckpt, &model).unwrap();
    let ckpt2 = dir.path().join("checkpoint2.rmp");
    save_checkpoint(&ckpt2, &net, &state, &saved).unwrap();
    if std::fs::read(&ckpt).unwrap() != std::fs::read(&ckpt2).unwrap() {
        failures.push("checkpoint file".into());
    }
    fit(&mut net, &mut state, &train, &val, &spec, &saved, |_, _, _| Ok(())).unwrap();
    if net.export_tensors() != full.export_tensors()
        || state.history != full_state.history
        || state.momentum != full_state.momentum
        || state.rng != full_state.rng
    {
        failures.push("resumed trajectory".into());
    }

    check(
        failures.is_empty(),
        if failures.is_empty() {
            "packed u8/f32 (100 clips), parameter file, checkpoint file bit-exact; 1+2 resumed epochs == 3 uninterrupted".into()
        } else {
            format!("mismatch: {}", failures.join(", "))
        },
    )
}

// ---------------------------------------------------------------------------
// criteria 4, 7, 10: motion-gap dataset

struct MotionGap {
    c4: Outcome,
    c7: Outcome,
    c10: Outcome,
}

fn motion_gap_criteria() -> MotionGap {
    let (train, val) = splits(&motion_gap_dataset());
    let run = |mode, activation, seed| {
        train_and_score(
            &train,
            &val,
            motion_model(4, activation),
            &clip_spec(mode),
            &recipe(MOTION_EPOCHS, seed),
        )
    };

    let residual = run(ClipMode::Residual, Activation::Elu, 0);
    let rgb = run(ClipMode::Rgb, Activation::Elu, 0);
    let gap = residual.report.top1 - rgb.report.top1;
    let c4 = check(
        gap >= 0.10,
        format!(
            "val top-1 residual {} vs rgb {} (gap {} pts, need >= 10); {} epochs, {:.0}+{:.0} s",
            pts(residual.report.top1),
            pts(rgb.report.top1),
            pts(gap),
            MOTION_EPOCHS,
            residual.seconds,
            rgb.seconds
        ),
    );

    let residual_again = run(ClipMode::Residual, Activation::Elu, 0);
    let rgb_again = run(ClipMode::Rgb, Activation::Elu, 0);
    let same = |a: &Run, b: &Run| a.history == b.history && a.params_sha256 == b.params_sha256;
    let c10 = check(
        same(&residual, &residual_again) && same(&rgb, &rgb_again),
        format!(
            "repeat runs: identical logs and parameter hashes (residual {}..., rgb {}...)",
            &residual.params_sha256[..12],
            &rgb.params_sha256[..12]
        ),
    );

    let mut elu = vec![residual.report.top1];
    let mut relu = Vec::new();
    for seed in 0..3 {
        if seed > 0 {
            elu.push(run(ClipMode::Residual, Activation::Elu, seed).report.top1);
        }
        relu.push(run(ClipMode::Residual, Activation::Relu, seed).report.top1);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let c7 = check(
        mean(&elu) >= mean(&relu) - 0.01,
        format!(
            "residual input, seeds 0-2: ELU {:?} mean {} vs ReLU {:?} mean {} (need ELU >= ReLU - 1 pt)",
            elu.iter().map(|&x| pts(x)).collect::<Vec<_>>(),
            pts(mean(&elu)),
            relu.iter().map(|&x| pts(x)).collect::<Vec<_>>(),
            pts(mean(&relu))
        ),
    );
    MotionGap { c4, c7, c10 }
}

// ---------------------------------------------------------------------------
// criterion 5: appearance dataset

fn c5_appearance() -> Outcome {
    let (train, val) = splits(&appearance_dataset());
    let frame = train_and_score(&train, &val, appearance_model(4), &frame_spec(), &recipe(APPEARANCE_2D_EPOCHS, 0));
    let residual = train_and_score(
        &train,
        &val,
        motion_model(4, Activation::Elu),
        &clip_spec(ClipMode::Residual),
        &recipe(APPEARANCE_3D_EPOCHS, 0),
    );
    let gap = frame.report.top1 - residual.report.top1;
    check(
        gap >= 0.10,
        format!(
            "val top-1 appearance2d {} vs residual3d {} (gap {} pts, need >= 10); {:.0}+{:.0} s",
            pts(frame.report.top1),
            pts(residual.report.top1),
            pts(gap),
            frame.seconds,
            residual.seconds
        ),
    )
}

// ---------------------------------------------------------------------------
// criteria 6, 8: mixed dataset

fn mixed_criteria() -> (Outcome, Outcome) {
    let (train, val) = splits(&mixed_dataset());
    let classes = MIXED_CLASSES;
    let frame = train_and_score(&train, &val, appearance_model(classes), &frame_spec(), &recipe(APPEARANCE_2D_EPOCHS, 0));
    let residual = train_and_score(
        &train,
        &val,
        motion_model(classes, Activation::Elu),
        &clip_spec(ClipMode::Residual),
        &recipe(MIXED_3D_EPOCHS, 0),
    );
    let rgb = train_and_score(
        &train,
        &val,
        motion_model(classes, Activation::Elu),
        &clip_spec(ClipMode::Rgb),
        &recipe(MIXED_3D_EPOCHS, 0),
    );
    let fused = fuse_all(&residual.predictions, &frame.predictions).unwrap();
    let fused = evaluate(&fused, &labels(&val), classes).unwrap();
    let (m, a) = (&residual.report, &frame.report);
    let c6 = check(
        fused.top1 >= m.top1.max(a.top1) - 0.01 && fused.top5 >= m.top5 - 0.01 && fused.top5 >= a.top5 - 0.01,
        format!(
            "top-1 fused {} vs residual3d {} / appearance2d {}; top-5 fused {} vs {} / {}",
            pts(fused.top1),
            pts(m.top1),
            pts(a.top1),
            pts(fused.top5),
            pts(m.top5),
            pts(a.top5)
        ),
    );

    let x = [0.1, 0.5, 0.2, 0.9, 0.4];
    let neg: Vec<f64> = x.iter().map(|v| -v).collect();
    let unit_ok = (pearson_correlation(&x, &x).unwrap() - 1.0).abs() < 1e-12
        && (pearson_correlation(&x, &neg).unwrap() + 1.0).abs() < 1e-12;
    let r_rgb = pearson_correlation(&a.per_category_acc, &rgb.report.per_category_acc);
    let r_res = pearson_correlation(&a.per_category_acc, &m.per_category_acc);
    let c8 = match (r_rgb, r_res) {
        (Ok(r_rgb), Ok(r_res)) => check(
            unit_ok && r_rgb > r_res,
            format!(
                "r(appearance2d, rgb3d) = {r_rgb:.3} vs r(appearance2d, residual3d) = {r_res:.3}; \
                 corr(x,x) = 1 and corr(x,-x) = -1 {}",
                if unit_ok { "hold" } else { "FAIL" }
            ),
        ),
        (a, b) => Err(format!("correlation undefined: {a:?} / {b:?}")),
    };
    (c6, c8)
}

// ---------------------------------------------------------------------------

fn guarded(f: impl FnOnce() -> Outcome) -> Outcome {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    })
}

fn main() {
    let mut results: Vec<(u32, &str, Outcome, f64)> = Vec::new();
    let mut record = |id: u32, name: &'static str, outcome: Outcome, secs: f64| {
        let (tag, detail) = match &outcome {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        println!("{tag} criterion {id:>2} {name}: {detail} [{secs:.1} s]");
        results.push((id, name, outcome, secs));
    };

    let timed = |f: &dyn Fn() -> Outcome| {
        let t = Instant::now();
        let out = guarded(f);
        (out, t.elapsed().as_secs_f64())
    };

    let (o, s) = timed(&c1_gradients);
    record(1, "gradient correctness", o, s);
    let (o, s) = timed(&c2_oracles);
    record(2, "oracle equivalence", o, s);
    let (o, s) = timed(&c3_residual_properties);
    record(3, "residual transform", o, s);

    let t = Instant::now();
    let gap = catch_unwind(motion_gap_criteria).map_err(|_| ());
    let secs = t.elapsed().as_secs_f64();
    match gap {
        Ok(g) => {
            record(4, "motion gap", g.c4, secs);
            record(7, "ELU recipe direction", g.c7, secs);
            record(10, "determinism", g.c10, secs);
        }
        Err(()) => {
            for (id, name) in [(4, "motion gap"), (7, "ELU recipe direction"), (10, "determinism")] {
                record(id, name, Err("experiment panicked".into()), secs);
            }
        }
    }

    let (o, s) = timed(&c5_appearance);
    record(5, "appearance experiment", o, s);

    let t = Instant::now();
    let mixed = catch_unwind(mixed_criteria).map_err(|_| ());
    let secs = t.elapsed().as_secs_f64();
    match mixed {
        Ok((c6, c8)) => {
            record(6, "fusion gain", c6, secs);
            record(8, "correlation ordering", c8, secs);
        }
        Err(()) => {
            record(6, "fusion gain", Err("experiment panicked".into()), secs);
            record(8, "correlation ordering", Err("experiment panicked".into()), secs);
        }
    }

    let (o, s) = timed(&c9_parameter_parity);
    record(9, "parameter parity", o, s);
    let (o, s) = timed(&c11_round_trips);
    record(11, "format round-trips", o, s);

    results.sort_by_key(|r| r.0);
    let failed: Vec<u32> = results.iter().filter(|r| r.2.is_err()).map(|r| r.0).collect();
    println!(
        "acceptance: {} of {} criteria passed",
        results.len() - failed.len(),
        results.len()
    );
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
