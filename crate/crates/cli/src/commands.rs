use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use resframe::evalfuse::{
    accuracy_difference_report, default_class_names, evaluate, fuse_all, pearson_correlation,
    predict_videos, read_predictions, read_report, write_difference_report, write_predictions,
    write_report, write_report_table, EvalReport, Prediction,
};
use resframe::framestore::{scan_dataset, write_packed, PackedClips, VideoFrames, VideoRecord};
use resframe::models::{build, load_params_embedded, save_params, Dtype, ModelConfig, PathKind};
use resframe::motioninput::{sample_test_clips, ClipMode, ClipSpec};
use resframe::synthgen::{export, generate, SynthConfig};
use resframe::trainer::{
    fit, init_rng, load_checkpoint, save_checkpoint, write_log_lines, Split, TrainConfig,
    TrainState,
};

use crate::config::{self, AblateFile, CorrelateFile, EvalFile, FuseFile, PackConfig, TrainFile};
use crate::manifest::Recorder;
use crate::{Cli, CliError, Command};

pub const PARAMS_FILE: &str = "params.rmp";
pub const CHECKPOINT_FILE: &str = "checkpoint.rmp";
pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";

pub fn run(cli: &Cli) -> Result<(), CliError> {
    let cfg_path = cli
        .config
        .as_deref()
        .ok_or_else(|| CliError::Config("--config is required".into()))?;
    let out = cli
        .out
        .as_deref()
        .ok_or_else(|| CliError::Config("--out is required".into()))?;
    let resume = matches!(cli.command, Command::Train { resume: true });
    if out.exists() && !resume && fs::read_dir(out).map_err(|e| CliError::io(out, e))?.next().is_some() {
        return Err(CliError::Config(format!(
            "output directory {} is not empty",
            out.display()
        )));
    }
    fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    let rec = Recorder::start(cli.command.name());
    let ctx = Ctx { cfg_path, out, seed: cli.seed, deterministic: cli.deterministic };
    match cli.command {
        Command::Synth => synth(&ctx, rec),
        Command::Pack => pack(&ctx, rec),
        Command::Train { resume } => train(&ctx, rec, resume),
        Command::Eval => eval(&ctx, rec),
        Command::Fuse => fuse(&ctx, rec),
        Command::Correlate => correlate(&ctx, rec),
        Command::Ablate => ablate(&ctx, rec),
    }
}

struct Ctx<'a> {
    cfg_path: &'a Path,
    out: &'a Path,
    seed: Option<u64>,
    deterministic: bool,
}

impl Ctx<'_> {
    fn path(&self, p: &Path) -> PathBuf {
        config::resolve(self.cfg_path, p)
    }

    fn train_config(&self, mut train: TrainConfig) -> TrainConfig {
        if let Some(seed) = self.seed {
            train.seed = seed;
        }
        train.deterministic |= self.deterministic;
        train
    }
}

fn synth(ctx: &Ctx, rec: Recorder) -> Result<(), CliError> {
    let mut cfg: SynthConfig = config::load(ctx.cfg_path)?;
    if let Some(seed) = ctx.seed {
        cfg.seed = seed;
    }
    let ds = generate(&cfg)?;
    export(&ds, ctx.out)?;
    eprintln!("wrote {} videos in {} classes", ds.videos.len(), ds.class_names.len());
    rec.finish(ctx.out, &cfg, Some(cfg.seed), vec![ctx.cfg_path.to_path_buf()])?;
    Ok(())
}

fn scan(dataset: &Path, manifest: &Path) -> Result<Vec<VideoRecord>, CliError> {
    Ok(scan_dataset(dataset, &dataset.join(manifest))?)
}

fn pack(ctx: &Ctx, rec: Recorder) -> Result<(), CliError> {
    let cfg: PackConfig = config::load(ctx.cfg_path)?;
    let dataset = ctx.path(&cfg.dataset);
    let videos = scan(&dataset, &cfg.manifest)?;
    let [t, h, w, c] = cfg.clip.clip_shape();
    let mut packed = PackedClips::new([t, h, w, c], cfg.dtype.into());
    for v in &videos {
        for clip in sample_test_clips(v, &cfg.clip, cfg.clips_per_video)? {
            packed.push(&clip.data, v.label() as u32)?;
        }
    }
    let file = ctx.out.join("clips.rmc");
    write_packed(&file, &packed)?;
    eprintln!("packed {} clips of shape {:?}", packed.len(), [t, h, w, c]);
    rec.finish(ctx.out, &cfg, None, vec![ctx.cfg_path.to_path_buf(), dataset])?;
    Ok(())
}

/// Trains `model` under `out`, writing per-epoch checkpoints, the log and
/// the final parameters.
fn train_into(
    out: &Path,
    model: &ModelConfig,
    clip: &ClipSpec,
    train: &TrainConfig,
    train_set: &[VideoRecord],
    val_set: &[VideoRecord],
    resume: bool,
) -> Result<(), CliError> {
    let ckpt = out.join(CHECKPOINT_FILE);
    let (mut net, mut state) = if resume {
        let (net, state, saved) = load_checkpoint(&ckpt, model)?;
        if saved.seed != train.seed || saved.batch_size != train.batch_size {
            return Err(CliError::Config(
                "checkpoint was written under a different seed or batch size".into(),
            ));
        }
        eprintln!("resuming after epoch {}", state.epoch);
        (net, state)
    } else {
        let net = build(model.clone(), &mut init_rng(train.seed))?;
        let state = TrainState::new(&net, train.seed);
        (net, state)
    };
    let log = out.join(TRAIN_LOG_FILE);
    fit(&mut net, &mut state, train_set, val_set, clip, train, |net, state, records| {
        let mut text = Vec::new();
        write_log_lines(&mut text, &state.history).map_err(|e| resframe::Error::io(&log, e))?;
        fs::write(&log, text).map_err(|e| resframe::Error::io(&log, e))?;
        save_checkpoint(&ckpt, net, state, train)?;
        let mut line = String::new();
        for r in records {
            let split = match r.split {
                Split::Train => "train",
                Split::Val => "val",
            };
            let _ = write!(line, " {split} loss {:.4} top1 {:.3}", r.loss, r.top1);
        }
        eprintln!("epoch {}{line} lr {:.4}", records[0].epoch, records[0].lr);
        Ok(())
    })?;
    save_params(&net, &out.join(PARAMS_FILE), Dtype::F64)?;
    Ok(())
}

#[derive(Serialize)]
struct ResolvedTrain<'a> {
    file: &'a TrainFile,
    train: &'a TrainConfig,
}

fn train(ctx: &Ctx, rec: Recorder, resume: bool) -> Result<(), CliError> {
    let file: TrainFile = config::load(ctx.cfg_path)?;
    let train = ctx.train_config(file.train.clone());
    train.validate()?;
    file.model.validate()?;
    file.clip.validate()?;
    let dataset = ctx.path(&file.dataset);
    let train_set = scan(&dataset, &file.train_manifest)?;
    let val_set = match &file.val_manifest {
        Some(m) => scan(&dataset, m)?,
        None => Vec::new(),
    };
    train_into(ctx.out, &file.model, &file.clip, &train, &train_set, &val_set, resume)?;
    let resolved = ResolvedTrain { file: &file, train: &train };
    rec.finish(ctx.out, &resolved, Some(train.seed), vec![ctx.cfg_path.to_path_buf(), dataset])?;
    Ok(())
}

fn class_names(dataset: &Path, k: usize) -> Result<Vec<String>, CliError> {
    let path = dataset.join("classes.txt");
    if !path.exists() {
        return Ok(default_class_names(k));
    }
    let text = fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
    let names: Vec<String> = text.lines().filter(|l| !l.is_empty()).map(str::to_string).collect();
    if names.len() != k {
        return Err(CliError::Core(resframe::Error::format(
            "classes.txt",
            format!("{} names for {k} classes", names.len()),
        )));
    }
    Ok(names)
}

fn labels(videos: &[VideoRecord]) -> Vec<(String, usize)> {
    videos.iter().map(|v| (v.id().to_string(), v.label())).collect()
}

fn write_scored(
    out: &Path,
    preds: &[Prediction],
    labels: &[(String, usize)],
    names: &[String],
) -> Result<EvalReport, CliError> {
    let report = evaluate(preds, labels, names.len())?;
    write_predictions(&out.join("predictions.jsonl"), preds)?;
    write_report(&out.join("report.toml"), &report)?;
    write_report_table(&out.join("report.txt"), &report, names)?;
    eprintln!(
        "{} videos: top-1 {:.4} top-5 {:.4}",
        report.num_videos, report.top1, report.top5
    );
    Ok(report)
}

fn eval(ctx: &Ctx, rec: Recorder) -> Result<(), CliError> {
    let file: EvalFile = config::load(ctx.cfg_path)?;
    let params = ctx.path(&file.params);
    let dataset = ctx.path(&file.dataset);
    let net = load_params_embedded(&params)?;
    let videos = scan(&dataset, &file.manifest)?;
    let spec = ClipSpec { train_augment: false, ..file.clip.clone() };
    let preds = predict_videos(&net, &videos, &spec, file.num_clips)?;
    let names = class_names(&dataset, net.config().num_classes)?;
    write_scored(ctx.out, &preds, &labels(&videos), &names)?;
    rec.finish(ctx.out, &file, None, vec![ctx.cfg_path.to_path_buf(), params, dataset])?;
    Ok(())
}

fn fuse(ctx: &Ctx, rec: Recorder) -> Result<(), CliError> {
    let file: FuseFile = config::load(ctx.cfg_path)?;
    let (pa, pb) = (ctx.path(&file.predictions_a), ctx.path(&file.predictions_b));
    let dataset = ctx.path(&file.dataset);
    let fused = fuse_all(&read_predictions(&pa)?, &read_predictions(&pb)?)?;
    let k = fused.first().map_or(0, |p| p.probs.len());
    let videos = scan(&dataset, &file.manifest)?;
    let names = class_names(&dataset, k)?;
    write_scored(ctx.out, &fused, &labels(&videos), &names)?;
    rec.finish(ctx.out, &file, None, vec![ctx.cfg_path.to_path_buf(), pa, pb, dataset])?;
    Ok(())
}

#[derive(Serialize)]
struct Correlation {
    pearson: f64,
}

fn correlate(ctx: &Ctx, rec: Recorder) -> Result<(), CliError> {
    let file: CorrelateFile = config::load(ctx.cfg_path)?;
    let (ra, rb) = (ctx.path(&file.report_a), ctx.path(&file.report_b));
    let (a, b) = (read_report(&ra)?, read_report(&rb)?);
    let mut inputs = vec![ctx.cfg_path.to_path_buf(), ra, rb];
    let names = match &file.classes {
        Some(p) => {
            let p = ctx.path(p);
            let text = fs::read_to_string(&p).map_err(|e| CliError::io(&p, e))?;
            inputs.push(p);
            text.lines().filter(|l| !l.is_empty()).map(str::to_string).collect()
        }
        None => default_class_names(a.per_category_acc.len()),
    };
    let r = pearson_correlation(&a.per_category_acc, &b.per_category_acc)?;
    let diff = accuracy_difference_report(&a, &b, &names)?;
    let path = ctx.out.join("correlation.toml");
    let text = toml::to_string(&Correlation { pearson: r }).expect("correlation serializes");
    fs::write(&path, text).map_err(|e| CliError::io(&path, e))?;
    write_difference_report(&ctx.out.join("differences.txt"), &diff, r)?;
    eprintln!("pearson r = {r:.6}");
    rec.finish(ctx.out, &file, None, inputs)?;
    Ok(())
}

#[derive(Serialize)]
struct AblationRow {
    name: String,
    mode: ClipMode,
    downsample: resframe::models::Downsample,
    activation: resframe::neuralcore::Activation,
    fea_diff: bool,
    num_params: usize,
    val_top1: f64,
    val_top5: f64,
}

#[derive(Serialize)]
struct AblationTable {
    rows: Vec<AblationRow>,
}

fn ablate(ctx: &Ctx, rec: Recorder) -> Result<(), CliError> {
    let file: AblateFile = config::load(ctx.cfg_path)?;
    if file.model.path != PathKind::Motion3d {
        return Err(CliError::Config("ablation grids apply to the motion3d path".into()));
    }
    let train = ctx.train_config(file.train.clone());
    train.validate()?;
    let dataset = ctx.path(&file.dataset);
    let train_set = scan(&dataset, &file.train_manifest)?;
    let val_set = scan(&dataset, &file.val_manifest)?;
    let g = &file.grid;
    let mut rows = Vec::new();
    for &mode in &g.mode {
        for &downsample in &g.downsample {
            for &activation in &g.activation {
                for &fea_diff in &g.fea_diff {
                    let model = ModelConfig { downsample, activation, fea_diff, ..file.model.clone() };
                    model.validate()?;
                    let clip = ClipSpec { mode, ..file.clip.clone() };
                    let name = format!(
                        "{}_{}_{}{}",
                        serde_plain(&mode),
                        serde_plain(&downsample),
                        serde_plain(&activation),
                        if fea_diff { "_feadiff" } else { "" }
                    );
                    eprintln!("== {name}");
                    let dir = ctx.out.join(&name);
                    fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
                    train_into(&dir, &model, &clip, &train, &train_set, &val_set, false)?;
                    let net = load_params_embedded(&dir.join(PARAMS_FILE))?;
                    let test = ClipSpec { train_augment: false, ..clip };
                    let preds = predict_videos(&net, &val_set, &test, file.num_clips)?;
                    let report = evaluate(&preds, &labels(&val_set), model.num_classes)?;
                    rows.push(AblationRow {
                        name,
                        mode,
                        downsample,
                        activation,
                        fea_diff,
                        num_params: net.num_params(),
                        val_top1: report.top1,
                        val_top5: report.top5,
                    });
                }
            }
        }
    }
    let mut table = format!(
        "{:<32} {:>10} {:>8} {:>8}\n",
        "setting", "params", "top-1", "top-5"
    );
    for r in &rows {
        let _ = writeln!(
            table,
            "{:<32} {:>10} {:>8.4} {:>8.4}",
            r.name, r.num_params, r.val_top1, r.val_top5
        );
    }
    let path = ctx.out.join("ablation.txt");
    fs::write(&path, &table).map_err(|e| CliError::io(&path, e))?;
    let path = ctx.out.join("ablation.toml");
    let text = toml::to_string(&AblationTable { rows }).expect("table serializes");
    fs::write(&path, text).map_err(|e| CliError::io(&path, e))?;
    eprint!("{table}");
    rec.finish(ctx.out, &file, Some(train.seed), vec![ctx.cfg_path.to_path_buf(), dataset])?;
    Ok(())
}

/// The lowercase name a unit enum variant serializes to.
fn serde_plain<T: Serialize>(v: &T) -> String {
    serde_json::to_value(v)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default()
}
