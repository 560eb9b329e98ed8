//! Synthetic labeled videos of one moving sprite over a background.
//!
//! Motion-labeled datasets tie the label to the sprite trajectory and draw
//! the sprite's look at random; appearance-labeled datasets do the
//! opposite; mixed datasets label the (trajectory, look) pair. Every video
//! carries a trace that regenerates its frames exactly.

mod render;

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::framestore::{write_frames, MemoryVideo};
use crate::neuralcore::Tensor;
use crate::trainer::Split;

pub use render::{BackgroundTrace, Shape, SpriteTrace, Trajectory};

/// Pixels per frame of the slow and fast linear families.
pub const SLOW_SPEED: f64 = 0.5;
pub const FAST_SPEED: f64 = 1.0;
/// Frames per cycle of the oscillation families.
pub const OSCILLATION_PERIOD: f64 = 8.0;
/// Per-channel color jitter of the fixed appearance families.
const COLOR_JITTER: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    MotionLabels,
    AppearanceLabels,
    MixedLabels,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Background {
    Plain,
    Textured,
    /// Textures from a shared pool, picked independently of the label.
    ShuffledAcrossClasses,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotionFamily {
    Static,
    UpSlow,
    DownSlow,
    OscillateHorizontal,
    OscillateVertical,
    UpFast,
    DownFast,
    LeftSlow,
    RightSlow,
    LeftFast,
    RightFast,
}

impl MotionFamily {
    /// Label order of the motion classes. The first six are unchanged by a
    /// horizontal flip, so flip augmentation never turns one into another.
    pub const LABELED: [MotionFamily; 10] = [
        MotionFamily::UpSlow,
        MotionFamily::DownSlow,
        MotionFamily::OscillateHorizontal,
        MotionFamily::OscillateVertical,
        MotionFamily::UpFast,
        MotionFamily::DownFast,
        MotionFamily::LeftSlow,
        MotionFamily::RightSlow,
        MotionFamily::LeftFast,
        MotionFamily::RightFast,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MotionFamily::Static => "static",
            MotionFamily::UpSlow => "up_slow",
            MotionFamily::DownSlow => "down_slow",
            MotionFamily::OscillateHorizontal => "oscillate_horizontal",
            MotionFamily::OscillateVertical => "oscillate_vertical",
            MotionFamily::UpFast => "up_fast",
            MotionFamily::DownFast => "down_fast",
            MotionFamily::LeftSlow => "left_slow",
            MotionFamily::RightSlow => "right_slow",
            MotionFamily::LeftFast => "left_fast",
            MotionFamily::RightFast => "right_fast",
        }
    }

    /// `(vx, vy)` of the linear families, image `y` pointing down.
    fn velocity(self) -> Option<(f64, f64)> {
        Some(match self {
            MotionFamily::Static => (0.0, 0.0),
            MotionFamily::UpSlow => (0.0, -SLOW_SPEED),
            MotionFamily::DownSlow => (0.0, SLOW_SPEED),
            MotionFamily::UpFast => (0.0, -FAST_SPEED),
            MotionFamily::DownFast => (0.0, FAST_SPEED),
            MotionFamily::LeftSlow => (-SLOW_SPEED, 0.0),
            MotionFamily::RightSlow => (SLOW_SPEED, 0.0),
            MotionFamily::LeftFast => (-FAST_SPEED, 0.0),
            MotionFamily::RightFast => (FAST_SPEED, 0.0),
            MotionFamily::OscillateHorizontal | MotionFamily::OscillateVertical => return None,
        })
    }
}

/// Default looks of the appearance classes, in label order. Classes 0 and 4
/// (red and orange squares) are deliberately close.
pub const APPEARANCE_FAMILIES: [(Shape, [f64; 3], &str); 8] = [
    (Shape::Square, [0.9, 0.15, 0.15], "red_square"),
    (Shape::Circle, [0.15, 0.8, 0.2], "green_circle"),
    (Shape::Triangle, [0.2, 0.3, 0.95], "blue_triangle"),
    (Shape::Cross, [0.95, 0.9, 0.1], "yellow_cross"),
    (Shape::Square, [0.95, 0.5, 0.1], "orange_square"),
    (Shape::Diamond, [0.1, 0.85, 0.85], "cyan_diamond"),
    (Shape::Ring, [0.85, 0.2, 0.85], "magenta_ring"),
    (Shape::Circle, [0.95, 0.95, 0.95], "white_circle"),
];

/// Center of the range textured backgrounds draw their base level from.
/// Two sprite colors mirrored about it leave identically distributed
/// absolute residuals over such backgrounds.
pub const BACKGROUND_MID_LEVEL: f64 = 0.45;

/// Fixed shape and base color of one appearance class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AppearanceFamily {
    pub name: String,
    pub shape: Shape,
    pub color: [f64; 3],
}

impl AppearanceFamily {
    pub fn new(name: impl Into<String>, shape: Shape, color: [f64; 3]) -> Self {
        AppearanceFamily {
            name: name.into(),
            shape,
            color,
        }
    }

    pub fn defaults() -> Vec<AppearanceFamily> {
        APPEARANCE_FAMILIES
            .iter()
            .map(|&(shape, color, name)| AppearanceFamily::new(name, shape, color))
            .collect()
    }

    /// Same shape, color reflected channel-wise about [`BACKGROUND_MID_LEVEL`].
    pub fn mirrored(&self, name: impl Into<String>) -> Self {
        AppearanceFamily::new(
            name,
            self.shape,
            self.color.map(|c| (2.0 * BACKGROUND_MID_LEVEL - c).clamp(0.0, 1.0)),
        )
    }
}

/// Textures in the shared pool of [`Background::ShuffledAcrossClasses`].
const BACKGROUND_POOL: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub task: Task,
    /// For mixed labels this is `motion_classes * appearance classes`.
    pub num_classes: usize,
    /// Motion factor of a mixed-label dataset laid out as a full grid.
    #[serde(default)]
    pub motion_classes: Option<usize>,
    /// Explicit `[motion index, appearance index]` per mixed label, in label
    /// order; overrides the grid given by `motion_classes`.
    #[serde(default)]
    pub mixed_pairs: Option<Vec<[usize; 2]>>,
    pub videos_per_class: usize,
    pub frames_per_video: usize,
    /// Frames are square.
    pub frame_size: usize,
    pub background: Background,
    #[serde(default)]
    pub camera_jitter_px: u32,
    /// Sprite diameter; defaults to a fifth of the frame, at least 3.
    #[serde(default)]
    pub sprite_size: Option<usize>,
    /// Shapes drawn for randomized sprites; all shapes when empty.
    #[serde(default)]
    pub shapes: Vec<Shape>,
    /// Motion classes in label order; the flip-safe default order when unset.
    #[serde(default)]
    pub motion_families: Option<Vec<MotionFamily>>,
    /// Appearance classes in label order; [`APPEARANCE_FAMILIES`] when unset.
    #[serde(default)]
    pub appearance_families: Option<Vec<AppearanceFamily>>,
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
    pub seed: u64,
}

fn default_val_fraction() -> f64 {
    0.2
}

impl SynthConfig {
    pub fn new(task: Task, num_classes: usize, videos_per_class: usize, seed: u64) -> Self {
        SynthConfig {
            task,
            num_classes,
            motion_classes: None,
            mixed_pairs: None,
            videos_per_class,
            frames_per_video: 24,
            frame_size: 32,
            background: Background::Textured,
            camera_jitter_px: 0,
            sprite_size: None,
            shapes: Vec::new(),
            motion_families: None,
            appearance_families: None,
            val_fraction: default_val_fraction(),
            seed,
        }
    }

    pub fn sprite_diameter(&self) -> usize {
        self.sprite_size
            .unwrap_or_else(|| ((self.frame_size as f64 / 5.0).round() as usize).max(3))
    }

    fn oscillation_amplitude(&self) -> f64 {
        (self.frame_size as f64 / 8.0).max(2.0)
    }

    /// `(motion factor, appearance factor)` of the label space.
    fn factors(&self) -> Result<(usize, usize)> {
        let k = self.num_classes;
        Ok(match self.task {
            Task::MotionLabels => (k, 1),
            Task::AppearanceLabels => (1, k),
            Task::MixedLabels if self.mixed_pairs.is_some() => {
                let pairs = self.mixed_pairs.as_deref().unwrap_or_default();
                if pairs.len() != k {
                    return Err(Error::Config(format!(
                        "num_classes {k} but {} mixed_pairs",
                        pairs.len()
                    )));
                }
                let mut sorted = pairs.to_vec();
                sorted.sort_unstable();
                if sorted.windows(2).any(|w| w[0] == w[1]) {
                    return Err(Error::Config("mixed_pairs must be unique".into()));
                }
                let m = pairs.iter().map(|p| p[0] + 1).max().unwrap_or(0);
                let a = pairs.iter().map(|p| p[1] + 1).max().unwrap_or(0);
                (m, a)
            }
            Task::MixedLabels => {
                let m = self.motion_classes.ok_or_else(|| {
                    Error::Config("mixed_labels needs motion_classes".into())
                })?;
                if m == 0 || k % m != 0 {
                    return Err(Error::Config(format!(
                        "num_classes {k} is not a multiple of motion_classes {m}"
                    )));
                }
                (m, k / m)
            }
        })
    }

    /// `[motion, appearance]` indices of every mixed label.
    fn pairs(&self) -> Result<Vec<[usize; 2]>> {
        let (_, a) = self.factors()?;
        Ok(match &self.mixed_pairs {
            Some(p) => p.clone(),
            None => (0..self.num_classes).map(|c| [c / a, c % a]).collect(),
        })
    }

    fn families(&self) -> Vec<MotionFamily> {
        self.motion_families
            .clone()
            .unwrap_or_else(|| MotionFamily::LABELED.to_vec())
    }

    fn looks(&self) -> Vec<AppearanceFamily> {
        self.appearance_families
            .clone()
            .unwrap_or_else(AppearanceFamily::defaults)
    }

    fn shape_pool(&self) -> Vec<Shape> {
        if self.shapes.is_empty() {
            Shape::ALL.to_vec()
        } else {
            self.shapes.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.num_classes < 1 || self.videos_per_class < 1 {
            return fail("num_classes and videos_per_class must be at least 1".into());
        }
        if self.frames_per_video < 17 {
            return fail(format!("frames_per_video {} < 17", self.frames_per_video));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return fail(format!("val_fraction {} outside [0, 1)", self.val_fraction));
        }
        let (m, a) = self.factors()?;
        let families = self.families();
        if m > families.len() {
            return fail(format!("{m} motion classes but only {} families", families.len()));
        }
        let looks = self.looks();
        if self.task != Task::MotionLabels && a > looks.len() {
            return fail(format!("{a} appearance classes but only {} families", looks.len()));
        }
        for f in &looks {
            if f.color.iter().any(|c| !(0.0..=1.0).contains(c)) {
                return fail(format!("appearance family {} has a color outside [0, 1]", f.name));
            }
        }
        let mut names: Vec<&str> = looks[..a.min(looks.len())].iter().map(|f| f.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return fail("appearance family names must be unique".into());
        }
        // the fastest linear family and the oscillations must fit in the frame
        let room = self.frame_size as f64 - self.sprite_diameter() as f64;
        let travel = FAST_SPEED * (self.frames_per_video - 1) as f64;
        let needs = travel.max(2.0 * self.oscillation_amplitude());
        if room < needs || self.sprite_diameter() < 2 {
            return fail(format!(
                "frame size {} too small for a {} px sprite over {} frames",
                self.frame_size,
                self.sprite_diameter(),
                self.frames_per_video
            ));
        }
        Ok(())
    }

    pub fn class_names(&self) -> Result<Vec<String>> {
        let (m, a) = self.factors()?;
        let families = self.families();
        Ok(match self.task {
            Task::MotionLabels => families[..m].iter().map(|f| f.name().to_string()).collect(),
            Task::AppearanceLabels => self.looks()[..a].iter().map(|f| f.name.clone()).collect(),
            Task::MixedLabels => self
                .pairs()?
                .into_iter()
                .map(|[i, j]| format!("{}+{}", families[i].name(), self.looks()[j].name))
                .collect(),
        })
    }

    /// Training videos per class; the rest go to validation.
    pub fn train_per_class(&self) -> usize {
        ((1.0 - self.val_fraction) * self.videos_per_class as f64).round() as usize
    }
}

/// Everything needed to redraw one video.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoTrace {
    pub motion: MotionFamily,
    pub trajectory: Trajectory,
    pub sprite: SpriteTrace,
    pub background: BackgroundTrace,
    /// Per-frame camera offset `(dx, dy)`.
    pub jitter: Vec<(i32, i32)>,
    pub frame_size: usize,
}

impl VideoTrace {
    pub fn render(&self) -> Tensor {
        render::render(
            &self.background,
            &self.sprite,
            &self.trajectory,
            &self.jitter,
            self.frame_size,
            self.frame_size,
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthVideo {
    pub id: String,
    pub label: usize,
    pub split: Split,
    /// `[F, H, W, 3]` in `[0, 1]`.
    pub frames: Tensor,
    pub trace: VideoTrace,
}

#[derive(Clone, Debug)]
pub struct SynthDataset {
    pub config: SynthConfig,
    pub class_names: Vec<String>,
    pub videos: Vec<SynthVideo>,
}

impl SynthDataset {
    /// In-memory videos of one split, in id order.
    pub fn split(&self, split: Split) -> Vec<MemoryVideo> {
        self.videos
            .iter()
            .filter(|v| v.split == split)
            .map(|v| MemoryVideo::new(v.id.clone(), v.label, v.frames.clone()).expect("rendered shape"))
            .collect()
    }
}

/// Trajectory of `family` with a random placement that keeps the sprite
/// inside the frame for every frame.
fn sample_trajectory(family: MotionFamily, config: &SynthConfig, rng: &mut ChaCha8Rng) -> Trajectory {
    let size = config.frame_size as f64;
    let r = config.sprite_diameter() as f64 / 2.0;
    let span = (config.frames_per_video - 1) as f64;
    let mut coord = |lo: f64, hi: f64| if hi > lo { rng.random_range(lo..=hi) } else { lo };
    match family.velocity() {
        Some((vx, vy)) => {
            // start range along an axis shrinks by the distance travelled
            let start = |v: f64, c: &mut dyn FnMut(f64, f64) -> f64| {
                let travel = v * span;
                c(r - travel.min(0.0), size - r - travel.max(0.0))
            };
            let x0 = start(vx, &mut coord);
            let y0 = start(vy, &mut coord);
            Trajectory::Linear { x0, y0, vx, vy }
        }
        None => {
            let amplitude = config.oscillation_amplitude();
            let horizontal = family == MotionFamily::OscillateHorizontal;
            let (ax, ay) = if horizontal { (amplitude, 0.0) } else { (0.0, amplitude) };
            let cx = coord(r + ax, size - r - ax);
            let cy = coord(r + ay, size - r - ay);
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            Trajectory::Oscillation {
                cx,
                cy,
                amplitude,
                period: OSCILLATION_PERIOD,
                phase,
                horizontal,
            }
        }
    }
}

fn random_sprite(config: &SynthConfig, rng: &mut ChaCha8Rng) -> SpriteTrace {
    let pool = config.shape_pool();
    SpriteTrace {
        shape: pool[rng.random_range(0..pool.len())],
        color: [0; 3].map(|_| rng.random_range(0.05..0.95)),
        size: config.sprite_diameter() as f64,
    }
}

fn family_sprite(index: usize, config: &SynthConfig, rng: &mut ChaCha8Rng) -> SpriteTrace {
    let family = &config.looks()[index];
    SpriteTrace {
        shape: family.shape,
        color: family.color.map(|c| (c + rng.random_range(-COLOR_JITTER..=COLOR_JITTER)).clamp(0.0, 1.0)),
        size: config.sprite_diameter() as f64,
    }
}

fn sample_background(config: &SynthConfig, pool: &[u64], rng: &mut ChaCha8Rng) -> BackgroundTrace {
    match config.background {
        Background::Plain => BackgroundTrace::Plain {
            color: [0; 3].map(|_| rng.random_range(0.1..0.9)),
        },
        Background::Textured => BackgroundTrace::Textured { seed: rng.random() },
        Background::ShuffledAcrossClasses => BackgroundTrace::Textured {
            seed: pool[rng.random_range(0..pool.len())],
        },
    }
}

fn sample_trace(label: usize, config: &SynthConfig, pool: &[u64], seed: u64) -> Result<VideoTrace> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pair = match config.task {
        Task::MixedLabels => config.pairs()?[label],
        _ => [0, 0],
    };
    let families = config.families();
    let motion = match config.task {
        Task::MotionLabels => families[label],
        // static sprites are allowed when motion carries no label
        Task::AppearanceLabels => {
            let i = rng.random_range(0..=MotionFamily::LABELED.len());
            if i == 0 { MotionFamily::Static } else { MotionFamily::LABELED[i - 1] }
        }
        Task::MixedLabels => families[pair[0]],
    };
    let trajectory = sample_trajectory(motion, config, &mut rng);
    let sprite = match config.task {
        Task::MotionLabels => random_sprite(config, &mut rng),
        Task::AppearanceLabels => family_sprite(label, config, &mut rng),
        Task::MixedLabels => family_sprite(pair[1], config, &mut rng),
    };
    let background = sample_background(config, pool, &mut rng);
    let j = config.camera_jitter_px as i32;
    let jitter = (0..config.frames_per_video)
        .map(|_| {
            if j == 0 {
                (0, 0)
            } else {
                (rng.random_range(-j..=j), rng.random_range(-j..=j))
            }
        })
        .collect();
    Ok(VideoTrace {
        motion,
        trajectory,
        sprite,
        background,
        jitter,
        frame_size: config.frame_size,
    })
}

/// Generates the whole dataset. Classes are exactly balanced; within each
/// class the first `train_per_class` videos are training videos.
pub fn generate(config: &SynthConfig) -> Result<SynthDataset> {
    config.validate()?;
    let mut master = ChaCha8Rng::seed_from_u64(config.seed);
    let pool: Vec<u64> = (0..BACKGROUND_POOL).map(|_| master.random()).collect();
    let n_train = config.train_per_class();
    let jobs: Vec<(usize, usize, u64)> = (0..config.num_classes)
        .flat_map(|c| (0..config.videos_per_class).map(move |i| (c, i)))
        .map(|(c, i)| (c, i, master.random()))
        .collect();
    let videos = jobs
        .par_iter()
        .map(|&(label, i, seed)| {
            let trace = sample_trace(label, config, &pool, seed)?;
            Ok(SynthVideo {
                id: format!("c{label:02}_v{i:04}"),
                label,
                split: if i < n_train { Split::Train } else { Split::Val },
                frames: trace.render(),
                trace,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SynthDataset {
        config: config.clone(),
        class_names: config.class_names()?,
        videos,
    })
}

/// Writes `videos/<id>/frame_*.png`, the manifests `manifest.tsv` (all),
/// `train.tsv` and `val.tsv`, `classes.txt` and `traces.jsonl`.
pub fn export(dataset: &SynthDataset, root: &Path) -> Result<()> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    dataset
        .videos
        .par_iter()
        .map(|v| write_frames(&root.join("videos").join(&v.id), &v.frames))
        .collect::<Result<Vec<_>>>()?;
    let line = |v: &SynthVideo| format!("videos/{}\t{}\n", v.id, v.label);
    let manifest = |filter: &dyn Fn(&SynthVideo) -> bool| -> String {
        dataset.videos.iter().filter(|v| filter(v)).map(line).collect()
    };
    let files = [
        ("manifest.tsv", manifest(&|_| true)),
        ("train.tsv", manifest(&|v| v.split == Split::Train)),
        ("val.tsv", manifest(&|v| v.split == Split::Val)),
        ("classes.txt", dataset.class_names.iter().map(|n| format!("{n}\n")).collect()),
        (
            "traces.jsonl",
            dataset
                .videos
                .iter()
                .map(|v| {
                    let rec = serde_json::json!({ "id": v.id, "label": v.label, "trace": v.trace });
                    format!("{rec}\n")
                })
                .collect(),
        ),
    ];
    for (name, text) in files {
        let path = root.join(name);
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}
