//! Video-level prediction, two-path fusion, top-k scoring and the
//! per-category comparison tools.
//!
//! Ties in top-k ranking go to the lowest class index.

mod io;

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::framestore::VideoFrames;
use crate::models::{Network, PathKind};
use crate::motioninput::{clips_to_batch, frames_to_batch, sample_test_clips, ClipSpec};
use crate::neuralcore::{softmax, Tensor};

pub use io::{
    read_predictions, read_report, write_difference_report, write_predictions, write_report,
    write_report_table,
};

/// Videos per inference batch in [`predict_videos`].
const VIDEOS_PER_BATCH: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PathTag {
    Motion,
    Appearance,
    Fused,
}

impl From<PathKind> for PathTag {
    fn from(kind: PathKind) -> Self {
        match kind {
            PathKind::Motion3d => PathTag::Motion,
            PathKind::Appearance2d => PathTag::Appearance,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub video_id: String,
    pub tag: PathTag,
    pub probs: Vec<f64>,
    pub clips_aggregated: usize,
}

impl Prediction {
    /// Checks nonnegativity and a sum of 1 within 1e-6.
    pub fn validate(&self) -> Result<()> {
        let sum: f64 = self.probs.iter().sum();
        if self.probs.is_empty() || self.probs.iter().any(|p| !(*p >= 0.0)) || (sum - 1.0).abs() > 1e-6 {
            return Err(Error::format(
                "prediction",
                format!("{}: probabilities do not form a distribution (sum {sum})", self.video_id),
            ));
        }
        Ok(())
    }

    pub fn argmax(&self) -> usize {
        ranked(&self.probs)[0]
    }
}

/// Class indices by descending probability, lowest index first among ties.
pub fn ranked(probs: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    order
}

fn to_batch(net: &Network, clips: &[&Tensor]) -> Result<Tensor> {
    match net.config().path {
        PathKind::Motion3d => clips_to_batch(clips.iter().copied()),
        PathKind::Appearance2d => frames_to_batch(clips.iter().copied()),
    }
}

/// Mean softmax over rows of `probs`, split into consecutive groups of `group`.
fn average_groups(probs: &Tensor, group: usize) -> Vec<Vec<f64>> {
    let k = probs.dim(1);
    probs
        .data()
        .chunks(group * k)
        .map(|rows| {
            let mut mean = vec![0.0; k];
            for row in rows.chunks(k) {
                mean.iter_mut().zip(row).for_each(|(m, p)| *m += p);
            }
            mean.iter_mut().for_each(|m| *m /= group as f64);
            mean
        })
        .collect()
}

/// Softmax averaged over the evenly spaced test clips of one video (single
/// frames for the appearance path, whose spec has `frames = 1`).
pub fn predict_video(
    net: &Network,
    video: &dyn VideoFrames,
    spec: &ClipSpec,
    num_clips: usize,
) -> Result<Prediction> {
    let clips = sample_test_clips(video, spec, num_clips)?;
    let batch = to_batch(net, &clips.iter().map(|c| &c.data).collect::<Vec<_>>())?;
    let probs = softmax(&net.infer(&batch)?)?;
    Ok(Prediction {
        video_id: video.id().to_string(),
        tag: net.config().path.into(),
        probs: average_groups(&probs, num_clips).remove(0),
        clips_aggregated: num_clips,
    })
}

/// [`predict_video`] over many videos, batching several videos per forward
/// pass. Output order follows `videos`.
pub fn predict_videos<V: VideoFrames>(
    net: &Network,
    videos: &[V],
    spec: &ClipSpec,
    num_clips: usize,
) -> Result<Vec<Prediction>> {
    let mut out = Vec::with_capacity(videos.len());
    for chunk in videos.chunks(VIDEOS_PER_BATCH) {
        let clips = chunk
            .par_iter()
            .map(|v| sample_test_clips(v, spec, num_clips))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Tensor> = clips.iter().flatten().map(|c| &c.data).collect();
        let probs = softmax(&net.infer(&to_batch(net, &refs)?)?)?;
        for (v, p) in chunk.iter().zip(average_groups(&probs, num_clips)) {
            out.push(Prediction {
                video_id: v.id().to_string(),
                tag: net.config().path.into(),
                probs: p,
                clips_aggregated: num_clips,
            });
        }
    }
    Ok(out)
}

/// Unweighted average of two paths' probabilities for the same video.
pub fn fuse(a: &Prediction, b: &Prediction) -> Result<Prediction> {
    if a.video_id != b.video_id {
        return Err(Error::InvalidArgument(format!(
            "cannot fuse predictions for {} and {}",
            a.video_id, b.video_id
        )));
    }
    if a.probs.len() != b.probs.len() {
        return Err(Error::InvalidArgument(format!(
            "{}: class counts differ ({} vs {})",
            a.video_id,
            a.probs.len(),
            b.probs.len()
        )));
    }
    Ok(Prediction {
        video_id: a.video_id.clone(),
        tag: PathTag::Fused,
        probs: a.probs.iter().zip(&b.probs).map(|(x, y)| (x + y) / 2.0).collect(),
        clips_aggregated: a.clips_aggregated + b.clips_aggregated,
    })
}

/// Fuses two prediction sets video by video; `b` may be in any order.
pub fn fuse_all(a: &[Prediction], b: &[Prediction]) -> Result<Vec<Prediction>> {
    let by_id: HashMap<&str, &Prediction> = b.iter().map(|p| (p.video_id.as_str(), p)).collect();
    if by_id.len() != a.len() || b.len() != a.len() {
        return Err(Error::InvalidArgument(format!(
            "prediction sets cover different videos ({} vs {})",
            a.len(),
            b.len()
        )));
    }
    a.iter()
        .map(|p| {
            let q = by_id
                .get(p.video_id.as_str())
                .ok_or_else(|| Error::MissingPrediction(p.video_id.clone()))?;
            fuse(p, q)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub top1: f64,
    pub top5: f64,
    pub num_videos: usize,
    /// Top-1 accuracy per true class; 0 for classes without videos.
    pub per_category_acc: Vec<f64>,
    pub category_counts: Vec<usize>,
    /// `confusion[true][predicted]`
    pub confusion: Vec<Vec<usize>>,
}

/// Scores one prediction per labeled video. `labels` maps video ids to
/// classes `0..num_classes`.
pub fn evaluate(
    predictions: &[Prediction],
    labels: &[(String, usize)],
    num_classes: usize,
) -> Result<EvalReport> {
    let mut by_id: HashMap<&str, &Prediction> = HashMap::new();
    for p in predictions {
        if by_id.insert(p.video_id.as_str(), p).is_some() {
            return Err(Error::InvalidArgument(format!(
                "duplicate prediction for video {}",
                p.video_id
            )));
        }
        if p.probs.len() != num_classes {
            return Err(Error::InvalidArgument(format!(
                "{}: {} probabilities for {num_classes} classes",
                p.video_id,
                p.probs.len()
            )));
        }
    }
    let mut confusion = vec![vec![0usize; num_classes]; num_classes];
    let mut counts = vec![0usize; num_classes];
    let (mut hit1, mut hit5) = (0usize, 0usize);
    for (id, label) in labels {
        let label = *label;
        if label >= num_classes {
            return Err(Error::LabelOutOfRange { label, num_classes });
        }
        let p = by_id.get(id.as_str()).ok_or_else(|| Error::MissingPrediction(id.clone()))?;
        let order = ranked(&p.probs);
        confusion[label][order[0]] += 1;
        counts[label] += 1;
        hit1 += (order[0] == label) as usize;
        hit5 += order.iter().take(5).any(|&c| c == label) as usize;
    }
    let n = labels.len();
    if n == 0 {
        return Err(Error::InvalidArgument("no labeled videos to evaluate".into()));
    }
    let per_category_acc = (0..num_classes)
        .map(|c| if counts[c] == 0 { 0.0 } else { confusion[c][c] as f64 / counts[c] as f64 })
        .collect();
    Ok(EvalReport {
        top1: hit1 as f64 / n as f64,
        top5: hit5 as f64 / n as f64,
        num_videos: n,
        per_category_acc,
        category_counts: counts,
        confusion,
    })
}

/// Pearson correlation of two equally long vectors. Fails when either is
/// constant, since the coefficient is then undefined.
pub fn pearson_correlation(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "correlation needs two vectors of equal length >= 2, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::UndefinedCorrelation(
            "one of the vectors is constant".into(),
        ));
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryDifference {
    pub name: String,
    pub difference: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DifferenceReport {
    /// `acc_a - acc_b` per category, largest first; equal values keep class order.
    pub ranked: Vec<CategoryDifference>,
    pub best: Vec<CategoryDifference>,
    /// The five most negative differences, most negative first.
    pub worst: Vec<CategoryDifference>,
}

pub fn accuracy_difference_report(
    a: &EvalReport,
    b: &EvalReport,
    class_names: &[String],
) -> Result<DifferenceReport> {
    let k = class_names.len();
    if a.per_category_acc.len() != k || b.per_category_acc.len() != k {
        return Err(Error::InvalidArgument(format!(
            "category mismatch: {} names, reports cover {} and {}",
            k,
            a.per_category_acc.len(),
            b.per_category_acc.len()
        )));
    }
    let mut ranked: Vec<CategoryDifference> = class_names
        .iter()
        .zip(a.per_category_acc.iter().zip(&b.per_category_acc))
        .map(|(name, (x, y))| CategoryDifference {
            name: name.clone(),
            difference: x - y,
        })
        .collect();
    ranked.sort_by(|p, q| q.difference.total_cmp(&p.difference));
    let best = ranked.iter().take(5).cloned().collect();
    let worst = ranked.iter().rev().take(5).cloned().collect();
    Ok(DifferenceReport { ranked, best, worst })
}

/// Default class names `class_0 .. class_{k-1}`.
pub fn default_class_names(k: usize) -> Vec<String> {
    (0..k).map(|c| format!("class_{c}")).collect()
}
