//! Videos stored as directories of frame images, and packed clip files.
//!
//! A dataset root holds one directory per video plus a manifest whose lines
//! read `relative_path<TAB>label`. Frames are the PNG or PNM files of a
//! directory in file-name order.

mod packed;

use std::collections::{BTreeSet, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::neuralcore::Tensor;

pub use packed::{read_packed, write_packed, PackedClips, PackedData, PackedDtype};

const FRAME_EXTENSIONS: [&str; 4] = ["png", "ppm", "pnm", "pgm"];

/// Anything that can hand out RGB frames scaled to `[0, 1]`.
pub trait VideoFrames: Sync {
    fn id(&self) -> &str;
    fn label(&self) -> usize;
    fn frame_count(&self) -> usize;
    /// Frames `start..end` as `[end - start, H, W, 3]`.
    fn load_frames(&self, start: usize, end: usize) -> Result<Tensor>;
}

pub(crate) fn check_range(start: usize, end: usize, len: usize) -> Result<()> {
    if start >= end || end > len {
        return Err(Error::RangeOutOfBounds { start, end, len });
    }
    Ok(())
}

/// One video of an on-disk dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoRecord {
    pub id: String,
    pub label: usize,
    pub frame_count: usize,
    /// Frame directory.
    pub source: PathBuf,
    /// `(H, W)` shared by every frame.
    pub frame_size: (usize, usize),
    frames: Vec<PathBuf>,
}

impl VideoRecord {
    /// Lists and header-checks the frames of `dir`.
    pub fn open(id: impl Into<String>, label: usize, dir: &Path) -> Result<Self> {
        if !dir.is_dir() {
            return Err(Error::MissingDirectory(dir.to_path_buf()));
        }
        let mut frames: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .map(|entry| entry.map(|e| e.path()).map_err(|e| Error::io(dir, e)))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .filter(|p| {
                p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| FRAME_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
            })
            .collect();
        frames.sort();
        let mut size = None;
        for path in &frames {
            let dims = image::ImageReader::open(path)
                .and_then(|r| r.with_guessed_format())
                .map_err(|e| unreadable(path, e))?
                .into_dimensions()
                .map_err(|e| unreadable(path, e))?;
            let hw = (dims.1 as usize, dims.0 as usize);
            match size {
                None => size = Some(hw),
                Some(s) if s != hw => {
                    return Err(Error::UnreadableFrame {
                        path: path.clone(),
                        reason: format!("size {}x{} differs from {}x{}", hw.1, hw.0, s.1, s.0),
                    })
                }
                _ => {}
            }
        }
        let frame_size = size.ok_or_else(|| Error::UnreadableFrame {
            path: dir.to_path_buf(),
            reason: "directory holds no frames".into(),
        })?;
        Ok(VideoRecord {
            id: id.into(),
            label,
            frame_count: frames.len(),
            source: dir.to_path_buf(),
            frame_size,
            frames,
        })
    }
}

fn unreadable(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::UnreadableFrame {
        path: path.to_path_buf(),
        reason: e.to_string(),
    }
}

fn decode_rgb(path: &Path, expected: (usize, usize)) -> Result<Vec<f64>> {
    let img = image::ImageReader::open(path)
        .and_then(|r| r.with_guessed_format())
        .map_err(|e| unreadable(path, e))?
        .decode()
        .map_err(|e| unreadable(path, e))?
        .into_rgb8();
    if (img.height() as usize, img.width() as usize) != expected {
        return Err(unreadable(path, "frame size changed since the dataset was scanned"));
    }
    Ok(img.into_raw().into_iter().map(|b| b as f64 / 255.0).collect())
}

impl VideoFrames for VideoRecord {
    fn id(&self) -> &str {
        &self.id
    }

    fn label(&self) -> usize {
        self.label
    }

    fn frame_count(&self) -> usize {
        self.frame_count
    }

    fn load_frames(&self, start: usize, end: usize) -> Result<Tensor> {
        check_range(start, end, self.frame_count)?;
        let frames: Vec<Vec<f64>> = self.frames[start..end]
            .par_iter()
            .map(|p| decode_rgb(p, self.frame_size))
            .collect::<Result<_>>()?;
        let (h, w) = self.frame_size;
        Tensor::new(vec![end - start, h, w, 3], frames.concat())
    }
}

/// A video held in memory as `[F, H, W, 3]` frames.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryVideo {
    pub id: String,
    pub label: usize,
    pub frames: Tensor,
}

impl MemoryVideo {
    pub fn new(id: impl Into<String>, label: usize, frames: Tensor) -> Result<Self> {
        frames.expect_rank("MemoryVideo", 4)?;
        if frames.dim(3) != 3 || frames.dim(0) == 0 {
            return Err(Error::InvalidShape {
                op: "MemoryVideo",
                detail: format!("expected [F>0, H, W, 3], got {:?}", frames.shape()),
            });
        }
        Ok(MemoryVideo {
            id: id.into(),
            label,
            frames,
        })
    }
}

impl VideoFrames for MemoryVideo {
    fn id(&self) -> &str {
        &self.id
    }

    fn label(&self) -> usize {
        self.label
    }

    fn frame_count(&self) -> usize {
        self.frames.dim(0)
    }

    fn load_frames(&self, start: usize, end: usize) -> Result<Tensor> {
        check_range(start, end, self.frame_count())?;
        let frame = self.frames.len() / self.frame_count();
        let mut shape = self.frames.shape().to_vec();
        shape[0] = end - start;
        Tensor::new(shape, self.frames.data()[start * frame..end * frame].to_vec())
    }
}

/// Parses the manifest and opens every listed video. Records come back
/// sorted by id; labels must cover `0..K` without gaps.
pub fn scan_dataset(root: &Path, manifest: &Path) -> Result<Vec<VideoRecord>> {
    if !root.is_dir() {
        return Err(Error::MissingDirectory(root.to_path_buf()));
    }
    let text = fs::read_to_string(manifest).map_err(|e| Error::io(manifest, e))?;
    let mut entries = Vec::new();
    let mut seen = HashSet::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let bad = |detail: &str| {
            Error::format("manifest", format!("line {}: {detail}: {line:?}", lineno + 1))
        };
        let (rel, label) = line.split_once('\t').ok_or_else(|| bad("expected path<TAB>label"))?;
        let label: usize = label.trim().parse().map_err(|_| bad("label is not a non-negative integer"))?;
        if rel.is_empty() {
            return Err(bad("empty path"));
        }
        if !seen.insert(rel.to_string()) {
            return Err(bad("duplicate path"));
        }
        entries.push((rel.to_string(), label));
    }
    check_contiguous(entries.iter().map(|(_, l)| *l))?;
    entries.sort();
    entries
        .par_iter()
        .map(|(rel, label)| VideoRecord::open(rel.clone(), *label, &root.join(rel)))
        .collect()
}

/// Errors unless the labels form exactly `0..K`.
pub fn check_contiguous(labels: impl IntoIterator<Item = usize>) -> Result<()> {
    let set: BTreeSet<usize> = labels.into_iter().collect();
    if set.iter().enumerate().any(|(i, &l)| i != l) {
        return Err(Error::NonContiguousLabels {
            expected: set.len(),
            found: set.into_iter().collect(),
        });
    }
    Ok(())
}

/// Writes RGB frames (`[F, H, W, 3]` in `[0, 1]`) as 8-bit PNG files named
/// `frame_00000.png`, ... into `dir`.
pub fn write_frames(dir: &Path, frames: &Tensor) -> Result<()> {
    frames.expect_rank("write_frames", 4)?;
    let [f, h, w, c] = [frames.dim(0), frames.dim(1), frames.dim(2), frames.dim(3)];
    if c != 3 {
        return Err(Error::ShapeMismatch {
            op: "write_frames",
            axis: "C".into(),
            expected: 3,
            got: c,
        });
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let per_frame = h * w * 3;
    (0..f).into_par_iter().try_for_each(|i| {
        let bytes: Vec<u8> = frames.data()[i * per_frame..(i + 1) * per_frame]
            .iter()
            .map(|&v| quantize_u8(v))
            .collect();
        let path = dir.join(format!("frame_{i:05}.png"));
        image::save_buffer(&path, &bytes, w as u32, h as u32, image::ExtendedColorType::Rgb8)
            .map_err(|e| Error::io(&path, std::io::Error::other(e)))
    })
}

/// Nearest 8-bit level of a `[0, 1]` value (clamped).
pub fn quantize_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}
