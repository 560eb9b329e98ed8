//! 3D and 2D convolution via im2col + GEMM.
//!
//! Layouts: input `[N, C, T, H, W]`, weights `[C_out, C_in, k_T, k_H, k_W]`,
//! bias `[C_out]`. The 2D ops run through the 3D kernel with a unit temporal
//! axis.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use std::borrow::Cow;

use super::gemm::{gemm, MatRef};
use super::{LayerGrad, Tensor};
use crate::error::{Error, Result};

const AXES: [&str; 3] = ["T", "H", "W"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    pub in_channels: usize,
    pub out_channels: usize,
}

impl ConvSpec {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: [usize; 3],
        stride: [usize; 3],
        padding: [usize; 3],
    ) -> Self {
        ConvSpec {
            kernel,
            stride,
            padding,
            in_channels,
            out_channels,
        }
    }

    /// Output extent per axis: `floor((in + 2p - k) / s) + 1`.
    pub fn output_extent(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        let mut out = [0; 3];
        for ax in 0..3 {
            out[ax] = window_extent(
                "conv3d",
                AXES[ax],
                input[ax],
                self.kernel[ax],
                self.stride[ax],
                self.padding[ax],
            )?;
        }
        Ok(out)
    }

    pub fn weight_shape(&self) -> [usize; 5] {
        let [kt, kh, kw] = self.kernel;
        [self.out_channels, self.in_channels, kt, kh, kw]
    }

    pub fn fan_in(&self) -> usize {
        self.in_channels * self.kernel.iter().product::<usize>()
    }

    fn validate(&self) -> Result<()> {
        if self.in_channels == 0
            || self.out_channels == 0
            || self.kernel.contains(&0)
            || self.stride.contains(&0)
        {
            return Err(Error::InvalidArgument(format!(
                "conv spec needs positive channels, kernel and stride: {self:?}"
            )));
        }
        Ok(())
    }
}

/// 2D convolution parameters over `(H, W)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conv2dSpec {
    pub kernel: [usize; 2],
    pub stride: [usize; 2],
    pub padding: [usize; 2],
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Conv2dSpec {
    pub fn to_3d(self) -> ConvSpec {
        ConvSpec {
            kernel: [1, self.kernel[0], self.kernel[1]],
            stride: [1, self.stride[0], self.stride[1]],
            padding: [0, self.padding[0], self.padding[1]],
            in_channels: self.in_channels,
            out_channels: self.out_channels,
        }
    }
}

pub(crate) fn window_extent(
    op: &'static str,
    axis: &str,
    input: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Result<usize> {
    let span = input + 2 * padding;
    if kernel > span {
        return Err(Error::InvalidShape {
            op,
            detail: format!(
                "window {kernel} exceeds padded extent {span} along axis {axis}"
            ),
        });
    }
    Ok((span - kernel) / stride + 1)
}

struct Geometry {
    batch: usize,
    in_dims: [usize; 3],
    out_dims: [usize; 3],
    in_volume: usize,
    /// Rows of the im2col matrix: `C_in * k_T * k_H * k_W`.
    patch: usize,
    /// Output positions per sample: `T_out * H_out * W_out`.
    positions: usize,
}

fn geometry(input: &Tensor, spec: &ConvSpec) -> Result<Geometry> {
    spec.validate()?;
    input.expect_rank("conv3d", 5)?;
    let s = input.shape();
    if s[1] != spec.in_channels {
        return Err(Error::ShapeMismatch {
            op: "conv3d",
            axis: "C (input channels)".into(),
            expected: spec.in_channels,
            got: s[1],
        });
    }
    let in_dims = [s[2], s[3], s[4]];
    let out_dims = spec.output_extent(in_dims)?;
    Ok(Geometry {
        batch: s[0],
        in_dims,
        out_dims,
        in_volume: in_dims.iter().product(),
        patch: spec.fan_in(),
        positions: out_dims.iter().product(),
    })
}

fn check_weights(weights: &Tensor, spec: &ConvSpec) -> Result<()> {
    let expected = spec.weight_shape();
    weights.expect_rank("conv3d weights", 5)?;
    for (ax, (&e, &g)) in expected.iter().zip(weights.shape()).enumerate() {
        if e != g {
            return Err(Error::ShapeMismatch {
                op: "conv3d weights",
                axis: ["C_out", "C_in", "k_T", "k_H", "k_W"][ax].into(),
                expected: e,
                got: g,
            });
        }
    }
    Ok(())
}

/// Unfolds one sample (`C_in x T x H x W`) into a `patch x positions` matrix.
/// Output columns per GEMM tile. Columns run over (sample, position) pairs,
/// so layers with few positions still pack their weights once per batch.
const TILE: usize = 128;

/// Tiles handed to the thread pool at once in the backward pass; bounds the
/// memory held by per-tile gradients.
const TILE_GROUP: usize = 16;

/// Zero-padded copy of the batch plus index arithmetic that lets the column
/// gather skip bounds tests: column `j` of patch row `r` reads
/// `padded[row_offsets[r] + origin(j)]`.
struct Lowering {
    dims: [usize; 3],
    volume: usize,
    sample_len: usize,
    row_offsets: Vec<usize>,
}

impl Lowering {
    fn new(g: &Geometry, spec: &ConvSpec) -> Self {
        let dims = [0, 1, 2].map(|a| g.in_dims[a] + 2 * spec.padding[a]);
        let volume = dims.iter().product();
        let [kt, kh, kw] = spec.kernel;
        let mut row_offsets = Vec::with_capacity(g.patch);
        for c in 0..spec.in_channels {
            for dt in 0..kt {
                for dh in 0..kh {
                    for dw in 0..kw {
                        row_offsets.push(c * volume + (dt * dims[1] + dh) * dims[2] + dw);
                    }
                }
            }
        }
        Lowering {
            dims,
            volume,
            sample_len: spec.in_channels * volume,
            row_offsets,
        }
    }

    /// Maps each unpadded row `(n, c, t, h)` to its start in the padded
    /// buffer, calling `f(unpadded_start, padded_start, width)`.
    fn for_each_line(&self, g: &Geometry, channels: usize, mut f: impl FnMut(usize, usize, usize)) {
        let [it, ih, iw] = g.in_dims;
        let [pt, ph, pw] = [0, 1, 2].map(|a| (self.dims[a] - g.in_dims[a]) / 2);
        for nc in 0..g.batch * channels {
            for t in 0..it {
                for h in 0..ih {
                    let from = ((nc * it + t) * ih + h) * iw;
                    let to = nc * self.volume + ((t + pt) * self.dims[1] + h + ph) * self.dims[2] + pw;
                    f(from, to, iw);
                }
            }
        }
    }

    fn pad<'a>(&self, g: &Geometry, channels: usize, src: &'a [f64]) -> Cow<'a, [f64]> {
        if self.dims == g.in_dims {
            return Cow::Borrowed(src);
        }
        let mut dst = vec![0.0; g.batch * channels * self.volume];
        self.for_each_line(g, channels, |from, to, w| {
            dst[to..to + w].copy_from_slice(&src[from..from + w])
        });
        Cow::Owned(dst)
    }

    fn unpad(&self, g: &Geometry, channels: usize, src: Vec<f64>) -> Vec<f64> {
        if self.dims == g.in_dims {
            return src;
        }
        let mut dst = vec![0.0; g.batch * channels * g.in_volume];
        self.for_each_line(g, channels, |from, to, w| {
            dst[from..from + w].copy_from_slice(&src[to..to + w])
        });
        dst
    }

    /// Padded-buffer offset of the window corner for batch columns
    /// `[j0, j0 + len)`.
    fn origins(&self, g: &Geometry, spec: &ConvSpec, j0: usize, len: usize) -> Vec<usize> {
        let [_, oh, ow] = g.out_dims;
        (j0..j0 + len)
            .map(|j| {
                let (n, p) = (j / g.positions, j % g.positions);
                let (t, h, w) = (p / (oh * ow), (p / ow) % oh, p % ow);
                n * self.sample_len
                    + (t * spec.stride[0] * self.dims[1] + h * spec.stride[1]) * self.dims[2]
                    + w * spec.stride[2]
            })
            .collect()
    }

    fn im2col(&self, padded: &[f64], origins: &[usize], dst: &mut [f64]) {
        let len = origins.len();
        for (row, &ro) in dst.chunks_mut(len).zip(&self.row_offsets) {
            let src = &padded[ro..];
            for (d, &o) in row.iter_mut().zip(origins) {
                *d = src[o];
            }
        }
    }

    fn col2im(&self, cols: &[f64], origins: &[usize], padded: &mut [f64]) {
        let len = origins.len();
        for (row, &ro) in cols.chunks(len).zip(&self.row_offsets) {
            let dst = &mut padded[ro..];
            for (&v, &o) in row.iter().zip(origins) {
                dst[o] += v;
            }
        }
    }
}

fn tiles(columns: usize) -> Vec<(usize, usize)> {
    (0..columns)
        .step_by(TILE)
        .map(|j0| (j0, TILE.min(columns - j0)))
        .collect()
}

/// Walks batch columns `[j0, j0 + len)` as runs inside one sample, calling
/// `f(tile_offset, sample, position, run_len)`.
fn for_each_run(g: &Geometry, j0: usize, len: usize, mut f: impl FnMut(usize, usize, usize, usize)) {
    let mut k = 0;
    while k < len {
        let j = j0 + k;
        let (n, p) = (j / g.positions, j % g.positions);
        let run = (len - k).min(g.positions - p);
        f(k, n, p, run);
        k += run;
    }
}

pub fn conv3d_forward(
    input: &Tensor,
    weights: &Tensor,
    bias: &Tensor,
    spec: &ConvSpec,
) -> Result<Tensor> {
    let g = geometry(input, spec)?;
    check_weights(weights, spec)?;
    if bias.shape() != [spec.out_channels] {
        return Err(Error::ShapeMismatch {
            op: "conv3d bias",
            axis: "C_out".into(),
            expected: spec.out_channels,
            got: bias.len(),
        });
    }
    let cout = spec.out_channels;
    let w = MatRef::new(weights.data(), cout, g.patch);
    let low = Lowering::new(&g, spec);
    let padded = low.pad(&g, spec.in_channels, input.data());
    let tiles = tiles(g.batch * g.positions);
    let products: Vec<Vec<f64>> = tiles
        .par_iter()
        .map(|&(j0, len)| {
            let origins = low.origins(&g, spec, j0, len);
            let mut cols = vec![0.0; g.patch * len];
            low.im2col(&padded, &origins, &mut cols);
            let mut y = vec![0.0; cout * len];
            gemm(1.0, w, MatRef::new(&cols, g.patch, len), 0.0, &mut y);
            y
        })
        .collect();

    let mut out = vec![0.0; g.batch * cout * g.positions];
    for (&(j0, len), y) in tiles.iter().zip(&products) {
        for_each_run(&g, j0, len, |k, n, p, run| {
            for c in 0..cout {
                let dst = (n * cout + c) * g.positions + p;
                let b = bias.data()[c];
                out[dst..dst + run]
                    .iter_mut()
                    .zip(&y[c * len + k..c * len + k + run])
                    .for_each(|(o, v)| *o = v + b);
            }
        });
    }
    let [ot, oh, ow] = g.out_dims;
    Tensor::new(vec![g.batch, cout, ot, oh, ow], out)
}

pub fn conv3d_backward(
    input: &Tensor,
    weights: &Tensor,
    spec: &ConvSpec,
    upstream: &Tensor,
) -> Result<LayerGrad> {
    let g = geometry(input, spec)?;
    check_weights(weights, spec)?;
    let cout = spec.out_channels;
    let [ot, oh, ow] = g.out_dims;
    let expected = [g.batch, cout, ot, oh, ow];
    upstream.expect_rank("conv3d backward", 5)?;
    for (ax, (&e, &got)) in expected.iter().zip(upstream.shape()).enumerate() {
        if e != got {
            return Err(Error::ShapeMismatch {
                op: "conv3d backward",
                axis: ["N", "C_out", "T", "H", "W"][ax].into(),
                expected: e,
                got,
            });
        }
    }

    let dy = upstream.data();
    let w = MatRef::new(weights.data(), cout, g.patch);
    let low = Lowering::new(&g, spec);
    let padded = low.pad(&g, spec.in_channels, input.data());
    let mut dx_pad = vec![0.0; g.batch * low.sample_len];
    let mut d_weights = vec![0.0; cout * g.patch];
    let tiles = tiles(g.batch * g.positions);
    // Per-tile weight gradients are summed in tile order, so the result does
    // not depend on the thread count.
    for group in tiles.chunks(TILE_GROUP) {
        let parts: Vec<(Vec<usize>, Vec<f64>, Vec<f64>)> = group
            .par_iter()
            .map(|&(j0, len)| {
                let origins = low.origins(&g, spec, j0, len);
                let mut dy_t = vec![0.0; cout * len];
                for_each_run(&g, j0, len, |k, n, p, run| {
                    for c in 0..cout {
                        let src = (n * cout + c) * g.positions + p;
                        dy_t[c * len + k..c * len + k + run].copy_from_slice(&dy[src..src + run]);
                    }
                });
                let dy_m = MatRef::new(&dy_t, cout, len);
                let mut cols = vec![0.0; g.patch * len];
                low.im2col(&padded, &origins, &mut cols);
                let mut dw = vec![0.0; cout * g.patch];
                gemm(1.0, dy_m, MatRef::new(&cols, g.patch, len).t(), 0.0, &mut dw);
                gemm(1.0, w.t(), dy_m, 0.0, &mut cols);
                (origins, dw, cols)
            })
            .collect();
        for (origins, dw, dcols) in parts {
            d_weights.iter_mut().zip(&dw).for_each(|(a, b)| *a += b);
            low.col2im(&dcols, &origins, &mut dx_pad);
        }
    }
    let mut d_bias = vec![0.0; cout];
    for (i, chunk) in dy.chunks(g.positions).enumerate() {
        d_bias[i % cout] += chunk.iter().sum::<f64>();
    }
    let d_input = low.unpad(&g, spec.in_channels, dx_pad);
    Ok(LayerGrad {
        param_grads: vec![
            Tensor::new(weights.shape().to_vec(), d_weights)?,
            Tensor::new(vec![cout], d_bias)?,
        ],
        input_grad: Tensor::new(input.shape().to_vec(), d_input)?,
    })
}

fn lift_2d(op: &'static str, t: &Tensor) -> Result<Tensor> {
    t.expect_rank(op, 4)?;
    let s = t.shape();
    t.clone().reshape(&[s[0], s[1], 1, s[2], s[3]])
}

fn drop_time(t: Tensor) -> Result<Tensor> {
    let s = t.shape().to_vec();
    t.reshape(&[s[0], s[1], s[3], s[4]])
}

/// 2D convolution over `[N, C, H, W]` with weights `[C_out, C_in, k_H, k_W]`.
pub fn conv2d_forward(
    input: &Tensor,
    weights: &Tensor,
    bias: &Tensor,
    spec: &Conv2dSpec,
) -> Result<Tensor> {
    let x = lift_2d("conv2d", input)?;
    let w = lift_2d("conv2d weights", weights)?;
    drop_time(conv3d_forward(&x, &w, bias, &spec.to_3d())?)
}

pub fn conv2d_backward(
    input: &Tensor,
    weights: &Tensor,
    spec: &Conv2dSpec,
    upstream: &Tensor,
) -> Result<LayerGrad> {
    let x = lift_2d("conv2d", input)?;
    let w = lift_2d("conv2d weights", weights)?;
    let dy = lift_2d("conv2d backward", upstream)?;
    let LayerGrad {
        mut param_grads,
        input_grad,
    } = conv3d_backward(&x, &w, &spec.to_3d(), &dy)?;
    param_grads[0] = drop_time(param_grads[0].clone())?;
    Ok(LayerGrad {
        param_grads,
        input_grad: drop_time(input_grad)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(cin: usize, cout: usize, k: usize, s: usize, p: usize) -> ConvSpec {
        ConvSpec::new(cin, cout, [k; 3], [s; 3], [p; 3])
    }

    #[test]
    fn scalar_product() {
        let x = Tensor::full(&[1, 1, 1, 1, 1], 2.0);
        let w = Tensor::full(&[1, 1, 1, 1, 1], 3.0);
        let b = Tensor::zeros(&[1]);
        let y = conv3d_forward(&x, &w, &b, &spec(1, 1, 1, 1, 0)).unwrap();
        assert_eq!(y.data(), &[6.0]);

        let g = conv3d_backward(&x, &w, &spec(1, 1, 1, 1, 0), &Tensor::full(&[1; 5], 0.5))
            .unwrap();
        assert_eq!(g.param_grads[0].data(), &[2.0 * 0.5]);
        assert_eq!(g.param_grads[1].data(), &[0.5]);
        assert_eq!(g.input_grad.data(), &[3.0 * 0.5]);
    }

    #[test]
    fn centered_delta_kernel_is_identity() {
        let x = Tensor::from_fn(&[2, 1, 4, 5, 3], |i| (i as f64 * 0.37).sin());
        let mut w = Tensor::zeros(&[1, 1, 3, 3, 3]);
        w.data_mut()[13] = 1.0;
        let y = conv3d_forward(&x, &w, &Tensor::zeros(&[1]), &spec(1, 1, 3, 1, 1)).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let x = Tensor::from_fn(&[1, 2, 3, 3, 3], |i| i as f64);
        let w = Tensor::from_fn(&[2, 2, 2, 2, 2], |i| i as f64 * 0.1);
        let sp = spec(2, 2, 2, 1, 0);
        let dy = Tensor::zeros(&[1, 2, 2, 2, 2]);
        let g = conv3d_backward(&x, &w, &sp, &dy).unwrap();
        assert!(g.param_grads.iter().all(|t| t.data().iter().all(|&v| v == 0.0)));
        assert!(g.input_grad.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn channel_mismatch_names_axis() {
        let x = Tensor::zeros(&[1, 3, 2, 2, 2]);
        let w = Tensor::zeros(&[1, 2, 1, 1, 1]);
        let err = conv3d_forward(&x, &w, &Tensor::zeros(&[1]), &spec(2, 1, 1, 1, 0)).unwrap_err();
        assert!(err.to_string().contains("input channels"), "{err}");
    }

    #[test]
    fn oversized_kernel_is_rejected_with_axis() {
        let x = Tensor::zeros(&[1, 1, 2, 8, 8]);
        let w = Tensor::zeros(&[1, 1, 3, 3, 3]);
        let err = conv3d_forward(&x, &w, &Tensor::zeros(&[1]), &spec(1, 1, 3, 1, 0)).unwrap_err();
        assert!(err.to_string().contains("axis T"), "{err}");
    }

    #[test]
    fn conv2d_identity_and_scalar() {
        let x = Tensor::from_fn(&[1, 1, 4, 4], |i| i as f64);
        let mut w = Tensor::zeros(&[1, 1, 3, 3]);
        w.data_mut()[4] = 1.0;
        let sp = Conv2dSpec {
            kernel: [3, 3],
            stride: [1, 1],
            padding: [1, 1],
            in_channels: 1,
            out_channels: 1,
        };
        assert_eq!(conv2d_forward(&x, &w, &Tensor::zeros(&[1]), &sp).unwrap(), x);

        let one = Conv2dSpec {
            kernel: [1, 1],
            padding: [0, 0],
            ..sp
        };
        let y = conv2d_forward(
            &Tensor::full(&[1, 1, 1, 1], 2.0),
            &Tensor::full(&[1, 1, 1, 1], 3.0),
            &Tensor::zeros(&[1]),
            &one,
        )
        .unwrap();
        assert_eq!(y.data(), &[6.0]);
    }
}
