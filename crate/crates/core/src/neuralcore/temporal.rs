//! Differences of adjacent time steps over `[N, C, T, H, W]` tensors.

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DiffKind {
    /// `|x[t] - x[t+1]|`
    #[default]
    Absolute,
    /// `x[t] - x[t+1]`
    Signed,
}

fn dims(x: &Tensor) -> Result<(usize, usize, usize)> {
    x.expect_rank("temporal_diff", 5)?;
    let s = x.shape();
    if s[2] < 2 {
        return Err(Error::InvalidShape {
            op: "temporal_diff",
            detail: format!("temporal extent {} < 2", s[2]),
        });
    }
    Ok((s[0] * s[1], s[2], s[3] * s[4]))
}

/// Output has temporal extent `T - 1`.
pub fn temporal_diff_forward(x: &Tensor, kind: DiffKind) -> Result<Tensor> {
    let (planes, t, frame) = dims(x)?;
    let xs = x.data();
    let mut out = Vec::with_capacity(planes * (t - 1) * frame);
    for p in 0..planes {
        let base = p * t * frame;
        for step in 0..t - 1 {
            let a = &xs[base + step * frame..base + (step + 1) * frame];
            let b = &xs[base + (step + 1) * frame..base + (step + 2) * frame];
            out.extend(a.iter().zip(b).map(|(u, v)| match kind {
                DiffKind::Absolute => (u - v).abs(),
                DiffKind::Signed => u - v,
            }));
        }
    }
    let s = x.shape();
    Tensor::new(vec![s[0], s[1], t - 1, s[3], s[4]], out)
}

/// For the absolute form the derivative at a zero difference is taken as 0.
pub fn temporal_diff_backward(x: &Tensor, kind: DiffKind, upstream: &Tensor) -> Result<Tensor> {
    let (planes, t, frame) = dims(x)?;
    if upstream.len() != planes * (t - 1) * frame {
        return Err(Error::ShapeMismatch {
            op: "temporal_diff backward",
            axis: "T".into(),
            expected: t - 1,
            got: upstream.shape().get(2).copied().unwrap_or(0),
        });
    }
    let xs = x.data();
    let dy = upstream.data();
    let mut dx = vec![0.0; x.len()];
    for p in 0..planes {
        let base = p * t * frame;
        let obase = p * (t - 1) * frame;
        for step in 0..t - 1 {
            for i in 0..frame {
                let a = base + step * frame + i;
                let b = a + frame;
                let g = dy[obase + step * frame + i];
                let s = match kind {
                    DiffKind::Signed => 1.0,
                    DiffKind::Absolute => {
                        let d = xs[a] - xs[b];
                        if d > 0.0 {
                            1.0
                        } else if d < 0.0 {
                            -1.0
                        } else {
                            0.0
                        }
                    }
                };
                dx[a] += s * g;
                dx[b] -= s * g;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), dx)
}
