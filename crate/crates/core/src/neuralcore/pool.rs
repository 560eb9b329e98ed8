//! Max pooling over the `(T, H, W)` axes of `[N, C, T, H, W]` tensors.

use super::conv::window_extent;
use super::Tensor;
use crate::error::Result;

/// Pooled output plus the flat input index that produced each output element.
pub struct PoolOutput {
    pub output: Tensor,
    pub argmax: Vec<usize>,
}

pub fn maxpool3d_forward_indexed(
    input: &Tensor,
    window: [usize; 3],
    stride: [usize; 3],
) -> Result<PoolOutput> {
    input.expect_rank("maxpool3d", 5)?;
    let s = input.shape();
    let (planes, dims) = (s[0] * s[1], [s[2], s[3], s[4]]);
    let mut out_dims = [0; 3];
    for ax in 0..3 {
        out_dims[ax] = window_extent(
            "maxpool3d",
            ["T", "H", "W"][ax],
            dims[ax],
            window[ax],
            stride[ax],
            0,
        )?;
    }
    let [it, ih, iw] = dims;
    let [ot, oh, ow] = out_dims;
    let volume = it * ih * iw;
    let x = input.data();
    let mut out = Vec::with_capacity(planes * ot * oh * ow);
    let mut argmax = Vec::with_capacity(out.capacity());
    for plane in 0..planes {
        let base = plane * volume;
        for t in 0..ot {
            for h in 0..oh {
                for w in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = usize::MAX;
                    for dt in 0..window[0] {
                        for dh in 0..window[1] {
                            for dw in 0..window[2] {
                                let idx = base
                                    + ((t * stride[0] + dt) * ih + h * stride[1] + dh) * iw
                                    + w * stride[2]
                                    + dw;
                                // Strict comparison keeps the lowest flat index on ties.
                                if best_idx == usize::MAX || x[idx] > best {
                                    best = x[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                    }
                    out.push(best);
                    argmax.push(best_idx);
                }
            }
        }
    }
    Ok(PoolOutput {
        output: Tensor::new(vec![s[0], s[1], ot, oh, ow], out)?,
        argmax,
    })
}

pub fn maxpool3d_forward(input: &Tensor, window: [usize; 3], stride: [usize; 3]) -> Result<Tensor> {
    Ok(maxpool3d_forward_indexed(input, window, stride)?.output)
}

/// Routes each upstream gradient to its window's argmax.
pub fn maxpool_scatter(input_shape: &[usize], argmax: &[usize], upstream: &Tensor) -> Result<Tensor> {
    let mut grad = Tensor::zeros(input_shape);
    let g = grad.data_mut();
    for (&idx, &dy) in argmax.iter().zip(upstream.data()) {
        g[idx] += dy;
    }
    Ok(grad)
}

pub fn maxpool3d_backward(
    input: &Tensor,
    window: [usize; 3],
    stride: [usize; 3],
    upstream: &Tensor,
) -> Result<Tensor> {
    let fwd = maxpool3d_forward_indexed(input, window, stride)?;
    fwd.output.expect_same_shape("maxpool3d backward", upstream)?;
    maxpool_scatter(input.shape(), &fwd.argmax, upstream)
}
