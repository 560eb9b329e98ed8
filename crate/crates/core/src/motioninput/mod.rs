//! Residual frames, clip sampling and augmentation.
//!
//! Training pipeline order: random start frame, load and resize, residual
//! transform, random crop, random horizontal flip. Test clips use evenly
//! spaced starts, a center crop and no flip.

mod resize;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::framestore::VideoFrames;
use crate::neuralcore::{DiffKind, Tensor};

pub use resize::resize_bilinear;

/// Default number of test clips per video.
pub const DEFAULT_TEST_CLIPS: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClipMode {
    Rgb,
    Residual,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FrameSize {
    pub height: usize,
    pub width: usize,
}

impl FrameSize {
    pub fn new(height: usize, width: usize) -> Self {
        FrameSize { height, width }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClipSpec {
    /// Frames per clip (`T`).
    pub frames: usize,
    pub crop: FrameSize,
    pub resize: FrameSize,
    pub mode: ClipMode,
    pub train_augment: bool,
    /// Residual form; the signed one exists for ablations.
    pub residual_kind: DiffKind,
}

impl Default for ClipSpec {
    fn default() -> Self {
        ClipSpec {
            frames: 16,
            crop: FrameSize::new(112, 112),
            resize: FrameSize::new(128, 170),
            mode: ClipMode::Residual,
            train_augment: true,
            residual_kind: DiffKind::Absolute,
        }
    }
}

impl ClipSpec {
    /// Single RGB frames for the appearance path.
    pub fn single_frame(crop: FrameSize, resize: FrameSize) -> Self {
        ClipSpec {
            frames: 1,
            crop,
            resize,
            mode: ClipMode::Rgb,
            train_augment: true,
            residual_kind: DiffKind::Absolute,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 {
            return Err(Error::Config("clip frames must be at least 1".into()));
        }
        let (c, r) = (self.crop, self.resize);
        if c.height == 0 || c.width == 0 || c.height > r.height || c.width > r.width {
            return Err(Error::Config(format!(
                "crop {}x{} does not fit in resize {}x{}",
                c.height, c.width, r.height, r.width
            )));
        }
        Ok(())
    }

    /// Source frames consumed per clip: `T + 1` for residual clips.
    pub fn source_frames(&self) -> usize {
        match self.mode {
            ClipMode::Rgb => self.frames,
            ClipMode::Residual => self.frames + 1,
        }
    }

    /// Output clip shape `[T, crop_h, crop_w, 3]`.
    pub fn clip_shape(&self) -> [usize; 4] {
        [self.frames, self.crop.height, self.crop.width, 3]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentLog {
    pub crop_y: usize,
    pub crop_x: usize,
    pub flipped: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampledClip {
    /// `[T, crop_h, crop_w, 3]`
    pub data: Tensor,
    pub video_id: String,
    pub label: usize,
    pub start_frame: usize,
    pub augment: AugmentLog,
}

/// `out[t] = |frames[t] - frames[t + 1]|` over a `[T + 1, H, W, C]` stack.
pub fn residual_clip(frames: &Tensor) -> Result<Tensor> {
    residual_clip_with(frames, DiffKind::Absolute)
}

pub fn residual_clip_with(frames: &Tensor, kind: DiffKind) -> Result<Tensor> {
    if frames.ndim() == 0 || frames.dim(0) < 2 {
        return Err(Error::InvalidShape {
            op: "residual_clip",
            detail: format!("need at least 2 frames, got shape {:?}", frames.shape()),
        });
    }
    let n = frames.dim(0);
    let frame = frames.len() / n;
    let d = frames.data();
    let data = d[..(n - 1) * frame]
        .iter()
        .zip(&d[frame..])
        .map(|(a, b)| match kind {
            DiffKind::Absolute => (a - b).abs(),
            DiffKind::Signed => a - b,
        })
        .collect();
    let mut shape = frames.shape().to_vec();
    shape[0] = n - 1;
    Tensor::new(shape, data)
}

/// Frames `start..start + count`, repeating the last frame past the end.
fn load_padded(video: &dyn VideoFrames, start: usize, count: usize) -> Result<Tensor> {
    let available = video.frame_count();
    let end = (start + count).min(available);
    let loaded = video.load_frames(start, end)?;
    if end - start == count {
        return Ok(loaded);
    }
    let frame = loaded.len() / (end - start);
    let mut shape = loaded.shape().to_vec();
    shape[0] = count;
    let mut data = loaded.into_data();
    let last = data[data.len() - frame..].to_vec();
    while data.len() < count * frame {
        data.extend_from_slice(&last);
    }
    Tensor::new(shape, data)
}

/// `[N, H, W, C]` window at `(y, x)`, optionally mirrored left to right.
fn crop_flip(frames: &Tensor, y: usize, x: usize, size: FrameSize, flip: bool) -> Result<Tensor> {
    let s = frames.shape();
    let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
    let d = frames.data();
    let mut out = Vec::with_capacity(n * size.height * size.width * c);
    for f in 0..n {
        for row in y..y + size.height {
            let base = (f * h + row) * w;
            for col in 0..size.width {
                let src = if flip { x + size.width - 1 - col } else { x + col };
                let p = (base + src) * c;
                out.extend_from_slice(&d[p..p + c]);
            }
        }
    }
    Tensor::new(vec![n, size.height, size.width, c], out)
}

fn build_clip(
    video: &dyn VideoFrames,
    spec: &ClipSpec,
    start: usize,
    choose: impl FnOnce(usize, usize) -> AugmentLog,
) -> Result<SampledClip> {
    spec.validate()?;
    let frames = load_padded(video, start, spec.source_frames())?;
    let frames = resize::resize_frames(frames, spec.resize.height, spec.resize.width)?;
    let frames = match spec.mode {
        ClipMode::Rgb => frames,
        ClipMode::Residual => residual_clip_with(&frames, spec.residual_kind)?,
    };
    let augment = choose(
        spec.resize.height - spec.crop.height,
        spec.resize.width - spec.crop.width,
    );
    let data = crop_flip(&frames, augment.crop_y, augment.crop_x, spec.crop, augment.flipped)?;
    Ok(SampledClip {
        data,
        video_id: video.id().to_string(),
        label: video.label(),
        start_frame: start,
        augment,
    })
}

/// Largest valid start frame; 0 when the video is shorter than a clip.
pub fn max_start(frame_count: usize, source_frames: usize) -> usize {
    frame_count.saturating_sub(source_frames)
}

/// One augmented training clip. Draws, in order: start frame, crop row,
/// crop column, flip.
pub fn sample_training_clip<R: Rng + ?Sized>(
    video: &dyn VideoFrames,
    spec: &ClipSpec,
    rng: &mut R,
) -> Result<SampledClip> {
    if !spec.train_augment {
        return Err(Error::InvalidArgument(
            "training clips need a spec with train_augment enabled".into(),
        ));
    }
    if video.frame_count() == 0 {
        return Err(Error::RangeOutOfBounds { start: 0, end: 1, len: 0 });
    }
    let start = rng.random_range(0..=max_start(video.frame_count(), spec.source_frames()));
    build_clip(video, spec, start, |max_y, max_x| {
        let crop_y = rng.random_range(0..=max_y);
        let crop_x = rng.random_range(0..=max_x);
        let flipped = rng.random_bool(0.5);
        AugmentLog { crop_y, crop_x, flipped }
    })
}

/// Evenly spaced starts: `round(k * R / (n - 1))` for `k` in `0..n`, or
/// `round(R / 2)` for a single clip, where `R` is the largest valid start.
pub fn test_clip_starts(frame_count: usize, source_frames: usize, num_clips: usize) -> Vec<usize> {
    let range = max_start(frame_count, source_frames) as f64;
    if num_clips == 1 {
        return vec![(range / 2.0).round() as usize];
    }
    (0..num_clips)
        .map(|k| (k as f64 * range / (num_clips - 1) as f64).round() as usize)
        .collect()
}

/// Deterministic test clips: evenly spaced starts, center crop, no flip.
pub fn sample_test_clips(
    video: &dyn VideoFrames,
    spec: &ClipSpec,
    num_clips: usize,
) -> Result<Vec<SampledClip>> {
    if num_clips == 0 {
        return Err(Error::InvalidArgument("num_clips must be at least 1".into()));
    }
    if video.frame_count() == 0 {
        return Err(Error::RangeOutOfBounds { start: 0, end: 1, len: 0 });
    }
    test_clip_starts(video.frame_count(), spec.source_frames(), num_clips)
        .into_iter()
        .map(|start| {
            build_clip(video, spec, start, |max_y, max_x| AugmentLog {
                crop_y: max_y / 2,
                crop_x: max_x / 2,
                flipped: false,
            })
        })
        .collect()
}

/// Stacks `[T, H, W, C]` clips into a `[N, C, T, H, W]` network batch.
pub fn clips_to_batch<'a>(clips: impl IntoIterator<Item = &'a Tensor>) -> Result<Tensor> {
    let clips: Vec<&Tensor> = clips.into_iter().collect();
    let first = clips.first().ok_or_else(|| Error::InvalidShape {
        op: "clips_to_batch",
        detail: "no clips".into(),
    })?;
    first.expect_rank("clips_to_batch", 4)?;
    let s = first.shape().to_vec();
    let (t, h, w, c) = (s[0], s[1], s[2], s[3]);
    let plane = t * h * w;
    let mut out = vec![0.0; clips.len() * c * plane];
    for (n, clip) in clips.iter().enumerate() {
        if clip.shape() != s.as_slice() {
            return Err(Error::InvalidShape {
                op: "clips_to_batch",
                detail: format!("clip {n} has shape {:?}, expected {s:?}", clip.shape()),
            });
        }
        let dst = &mut out[n * c * plane..(n + 1) * c * plane];
        for (p, px) in clip.data().chunks_exact(c).enumerate() {
            for (ch, &v) in px.iter().enumerate() {
                dst[ch * plane + p] = v;
            }
        }
    }
    Tensor::new(vec![clips.len(), c, t, h, w], out)
}

/// Like [`clips_to_batch`] for single-frame clips, giving `[N, C, H, W]`.
pub fn frames_to_batch<'a>(clips: impl IntoIterator<Item = &'a Tensor>) -> Result<Tensor> {
    let batch = clips_to_batch(clips)?;
    let s = batch.shape().to_vec();
    if s[2] != 1 {
        return Err(Error::InvalidShape {
            op: "frames_to_batch",
            detail: format!("clips hold {} frames, expected 1", s[2]),
        });
    }
    batch.reshape(&[s[0], s[1], s[3], s[4]])
}
