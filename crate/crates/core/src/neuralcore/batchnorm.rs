//! Per-channel batch normalization over `[N, C, ...]` tensors.

use serde::{Deserialize, Serialize};

use super::{LayerGrad, Tensor};
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
/// Weight kept on the old running statistic at each update.
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Values saved by the forward pass for the backward pass.
#[derive(Clone, Debug)]
pub enum BnCache {
    Train { x_hat: Tensor, inv_std: Vec<f64> },
    Eval { inv_std: Vec<f64> },
}

fn layout(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<(usize, usize, usize)> {
    if x.ndim() < 2 {
        return Err(Error::InvalidShape {
            op: "batchnorm",
            detail: format!("need at least [N, C], got {:?}", x.shape()),
        });
    }
    let c = x.dim(1);
    for p in [gamma, beta] {
        if p.shape() != [c] {
            return Err(Error::ShapeMismatch {
                op: "batchnorm",
                axis: "C (channels)".into(),
                expected: c,
                got: p.len(),
            });
        }
    }
    Ok((x.dim(0), c, x.shape()[2..].iter().product()))
}

/// Normalizes `x`. In train mode batch statistics are used and `stats` is
/// updated (initialized to zero mean and unit variance on first use); in eval
/// mode `stats` must already exist.
pub fn batchnorm_forward(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    stats: &mut Option<RunningStats>,
    mode: Mode,
) -> Result<(Tensor, BnCache)> {
    let (n, c, inner) = layout(x, gamma, beta)?;
    let count = (n * inner) as f64;
    let xs = x.data();
    let (mean, var) = match mode {
        Mode::Eval => {
            let s = stats.as_ref().ok_or(Error::MissingRunningStats)?;
            (s.mean.clone(), s.var.clone())
        }
        Mode::Train => {
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for b in 0..n {
                for (ch, m) in mean.iter_mut().enumerate() {
                    let off = (b * c + ch) * inner;
                    *m += xs[off..off + inner].iter().sum::<f64>();
                }
            }
            mean.iter_mut().for_each(|m| *m /= count);
            for b in 0..n {
                for ch in 0..c {
                    let off = (b * c + ch) * inner;
                    var[ch] += xs[off..off + inner]
                        .iter()
                        .map(|v| (v - mean[ch]).powi(2))
                        .sum::<f64>();
                }
            }
            var.iter_mut().for_each(|v| *v /= count);

            let running = stats.get_or_insert_with(|| RunningStats {
                mean: vec![0.0; c],
                var: vec![1.0; c],
            });
            let unbias = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
            for ch in 0..c {
                running.mean[ch] = BN_MOMENTUM * running.mean[ch] + (1.0 - BN_MOMENTUM) * mean[ch];
                running.var[ch] =
                    BN_MOMENTUM * running.var[ch] + (1.0 - BN_MOMENTUM) * var[ch] * unbias;
            }
            (mean, var)
        }
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let mut x_hat = vec![0.0; x.len()];
    let mut y = vec![0.0; x.len()];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * inner;
            let (g, bt) = (gamma.data()[ch], beta.data()[ch]);
            for i in off..off + inner {
                let h = (xs[i] - mean[ch]) * inv_std[ch];
                x_hat[i] = h;
                y[i] = g * h + bt;
            }
        }
    }
    let cache = match mode {
        Mode::Train => BnCache::Train {
            x_hat: Tensor::new(x.shape().to_vec(), x_hat)?,
            inv_std,
        },
        Mode::Eval => BnCache::Eval { inv_std },
    };
    Ok((Tensor::new(x.shape().to_vec(), y)?, cache))
}

/// Gradients `[d_gamma, d_beta]` and the input gradient. For an eval-mode
/// cache `x` is needed to rebuild the normalized input.
pub fn batchnorm_backward(
    x: &Tensor,
    gamma: &Tensor,
    stats: Option<&RunningStats>,
    cache: &BnCache,
    upstream: &Tensor,
) -> Result<LayerGrad> {
    let (n, c, inner) = layout(x, gamma, gamma)?;
    x.expect_same_shape("batchnorm backward", upstream)?;
    let dy = upstream.data();
    let mut d_gamma = vec![0.0; c];
    let mut d_beta = vec![0.0; c];
    let mut dx = vec![0.0; x.len()];
    match cache {
        BnCache::Train { x_hat, inv_std } => {
            let xh = x_hat.data();
            let count = (n * inner) as f64;
            for b in 0..n {
                for ch in 0..c {
                    let off = (b * c + ch) * inner;
                    for i in off..off + inner {
                        d_gamma[ch] += dy[i] * xh[i];
                        d_beta[ch] += dy[i];
                    }
                }
            }
            for b in 0..n {
                for ch in 0..c {
                    let off = (b * c + ch) * inner;
                    let k = gamma.data()[ch] * inv_std[ch] / count;
                    for i in off..off + inner {
                        dx[i] = k * (count * dy[i] - d_beta[ch] - xh[i] * d_gamma[ch]);
                    }
                }
            }
        }
        BnCache::Eval { inv_std } => {
            let s = stats.ok_or(Error::MissingRunningStats)?;
            let xs = x.data();
            for b in 0..n {
                for ch in 0..c {
                    let off = (b * c + ch) * inner;
                    for i in off..off + inner {
                        let h = (xs[i] - s.mean[ch]) * inv_std[ch];
                        d_gamma[ch] += dy[i] * h;
                        d_beta[ch] += dy[i];
                        dx[i] = dy[i] * gamma.data()[ch] * inv_std[ch];
                    }
                }
            }
        }
    }
    Ok(LayerGrad {
        param_grads: vec![Tensor::new(vec![c], d_gamma)?, Tensor::new(vec![c], d_beta)?],
        input_grad: Tensor::new(x.shape().to_vec(), dx)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standardized_input_passes_through() {
        // Per channel: values {-1, 1} have mean 0 and biased variance 1.
        let x = Tensor::new(vec![2, 1, 2], vec![-1.0, 1.0, 1.0, -1.0]).unwrap();
        let mut stats = None;
        let (y, _) = batchnorm_forward(
            &x,
            &Tensor::full(&[1], 1.0),
            &Tensor::zeros(&[1]),
            &mut stats,
            Mode::Train,
        )
        .unwrap();
        assert!(y.max_abs_diff(&x) < 1e-4);
    }

    #[test]
    fn zero_gamma_outputs_beta() {
        let x = Tensor::from_fn(&[3, 2, 4], |i| (i as f64).sin());
        let beta = Tensor::new(vec![2], vec![0.25, -2.0]).unwrap();
        let (y, _) =
            batchnorm_forward(&x, &Tensor::zeros(&[2]), &beta, &mut None, Mode::Train).unwrap();
        for b in 0..3 {
            for ch in 0..2 {
                for i in 0..4 {
                    assert_eq!(y.data()[(b * 2 + ch) * 4 + i], beta.data()[ch]);
                }
            }
        }
    }

    #[test]
    fn eval_without_stats_errors() {
        let x = Tensor::zeros(&[1, 1, 1]);
        let err = batchnorm_forward(
            &x,
            &Tensor::full(&[1], 1.0),
            &Tensor::zeros(&[1]),
            &mut None,
            Mode::Eval,
        )
        .unwrap_err();
        assert!(matches!(err, Error::MissingRunningStats));
    }

    #[test]
    fn running_stats_follow_momentum() {
        let x = Tensor::new(vec![2, 1, 1], vec![1.0, 3.0]).unwrap();
        let mut stats = None;
        let g = Tensor::full(&[1], 1.0);
        let b = Tensor::zeros(&[1]);
        batchnorm_forward(&x, &g, &b, &mut stats, Mode::Train).unwrap();
        let s = stats.as_ref().unwrap();
        // mean 2, unbiased variance 2
        assert!((s.mean[0] - 0.2).abs() < 1e-12);
        assert!((s.var[0] - (0.9 + 0.1 * 2.0)).abs() < 1e-12);
        let (y, _) = batchnorm_forward(&x, &g, &b, &mut stats, Mode::Eval).unwrap();
        let expected = (1.0 - 0.2) / (1.1f64 + BN_EPS).sqrt();
        assert!((y.data()[0] - expected).abs() < 1e-12);
    }
}
