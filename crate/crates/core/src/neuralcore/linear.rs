//! Classifier head: fully connected layer, global average pooling, softmax
//! and cross-entropy.

use super::gemm::{gemm, MatRef};
use super::{LayerGrad, Tensor};
use crate::error::{Error, Result};

/// `y = x W^T + b` with `x: [N, in]`, `W: [out, in]`, `b: [out]`.
pub fn linear_forward(x: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    x.expect_rank("linear", 2)?;
    weights.expect_rank("linear weights", 2)?;
    let (n, fin) = (x.dim(0), x.dim(1));
    let fout = weights.dim(0);
    if weights.dim(1) != fin {
        return Err(Error::ShapeMismatch {
            op: "linear",
            axis: "in_features".into(),
            expected: weights.dim(1),
            got: fin,
        });
    }
    if bias.shape() != [fout] {
        return Err(Error::ShapeMismatch {
            op: "linear bias",
            axis: "out_features".into(),
            expected: fout,
            got: bias.len(),
        });
    }
    let mut y: Vec<f64> = (0..n).flat_map(|_| bias.data().iter().copied()).collect();
    gemm(
        1.0,
        MatRef::new(x.data(), n, fin),
        MatRef::new(weights.data(), fout, fin).t(),
        1.0,
        &mut y,
    );
    Tensor::new(vec![n, fout], y)
}

/// `param_grads` is `[d_weights, d_bias]`.
pub fn linear_backward(x: &Tensor, weights: &Tensor, upstream: &Tensor) -> Result<LayerGrad> {
    let (n, fin) = (x.dim(0), x.dim(1));
    let fout = weights.dim(0);
    if upstream.shape() != [n, fout] {
        return Err(Error::ShapeMismatch {
            op: "linear backward",
            axis: "out_features".into(),
            expected: fout,
            got: upstream.shape().last().copied().unwrap_or(0),
        });
    }
    let dy = MatRef::new(upstream.data(), n, fout);
    let mut dw = vec![0.0; fout * fin];
    gemm(1.0, dy.t(), MatRef::new(x.data(), n, fin), 0.0, &mut dw);
    let mut dx = vec![0.0; n * fin];
    gemm(1.0, dy, MatRef::new(weights.data(), fout, fin), 0.0, &mut dx);
    let mut db = vec![0.0; fout];
    for row in upstream.data().chunks(fout) {
        db.iter_mut().zip(row).for_each(|(a, b)| *a += b);
    }
    Ok(LayerGrad {
        param_grads: vec![Tensor::new(vec![fout, fin], dw)?, Tensor::new(vec![fout], db)?],
        input_grad: Tensor::new(vec![n, fin], dx)?,
    })
}

/// Mean over every axis after the channel axis: `[N, C, ...] -> [N, C]`.
pub fn global_avgpool3d(x: &Tensor) -> Result<Tensor> {
    if x.ndim() < 3 {
        return Err(Error::InvalidShape {
            op: "global_avgpool3d",
            detail: format!("need [N, C, ...], got {:?}", x.shape()),
        });
    }
    let (n, c) = (x.dim(0), x.dim(1));
    let inner: usize = x.shape()[2..].iter().product();
    let data = x
        .data()
        .chunks(inner)
        .map(|ch| ch.iter().sum::<f64>() / inner as f64)
        .collect();
    Tensor::new(vec![n, c], data)
}

pub fn global_avgpool3d_backward(input_shape: &[usize], upstream: &Tensor) -> Result<Tensor> {
    let inner: usize = input_shape[2..].iter().product();
    let scale = 1.0 / inner as f64;
    let data = upstream
        .data()
        .iter()
        .flat_map(|&g| std::iter::repeat_n(g * scale, inner))
        .collect();
    Tensor::new(input_shape.to_vec(), data)
}

/// Row-wise softmax of `[N, K]` logits.
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    logits.expect_rank("softmax", 2)?;
    let k = logits.dim(1);
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.data().chunks(k) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let start = out.len();
        out.extend(row.iter().map(|v| (v - m).exp()));
        let z: f64 = out[start..].iter().sum();
        out[start..].iter_mut().for_each(|v| *v /= z);
    }
    Tensor::new(logits.shape().to_vec(), out)
}

/// Mean cross-entropy over the batch and its gradient with respect to the
/// logits, `(softmax - onehot) / N`.
pub fn cross_entropy_loss(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let probs = softmax(logits)?;
    let (n, k) = (logits.dim(0), logits.dim(1));
    if labels.len() != n {
        return Err(Error::ShapeMismatch {
            op: "cross_entropy_loss",
            axis: "N (labels)".into(),
            expected: n,
            got: labels.len(),
        });
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::LabelOutOfRange {
            label,
            num_classes: k,
        });
    }
    let mut grad = probs.clone();
    let mut loss = 0.0;
    for (i, &label) in labels.iter().enumerate() {
        // log-sum-exp form keeps the loss finite for saturated softmax rows
        let row = &logits.data()[i * k..(i + 1) * k];
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        loss += lse - row[label];
        grad.data_mut()[i * k + label] -= 1.0;
    }
    grad.scale(1.0 / n as f64);
    Ok((loss / n as f64, grad))
}
