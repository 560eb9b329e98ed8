//! Bilinear resizing with half-pixel centers.

use crate::error::{Error, Result};
use crate::neuralcore::Tensor;

/// Source taps `(i0, i1, w1)` for each output index along one axis.
fn taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|i| {
            let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

fn check_extents(h: usize, w: usize, out_h: usize, out_w: usize) -> Result<()> {
    if h == 0 || w == 0 || out_h == 0 || out_w == 0 {
        return Err(Error::InvalidArgument(format!(
            "resize {h}x{w} -> {out_h}x{out_w}: extents must be at least 1"
        )));
    }
    Ok(())
}

/// Resizes an `[H, W, C]` frame to `[out_h, out_w, C]`.
pub fn resize_bilinear(frame: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    frame.expect_rank("resize_bilinear", 3)?;
    let s = frame.shape();
    let (h, w, c) = (s[0], s[1], s[2]);
    check_extents(h, w, out_h, out_w)?;
    let mut out = Vec::with_capacity(out_h * out_w * c);
    resize_into(frame.data(), h, w, c, out_h, out_w, &mut out);
    Tensor::new(vec![out_h, out_w, c], out)
}

/// Resizes every frame of an `[N, H, W, C]` stack.
pub(crate) fn resize_frames(frames: Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    frames.expect_rank("resize_bilinear", 4)?;
    let s = frames.shape().to_vec();
    let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
    check_extents(h, w, out_h, out_w)?;
    if (h, w) == (out_h, out_w) {
        return Ok(frames);
    }
    let mut out = Vec::with_capacity(n * out_h * out_w * c);
    for f in frames.data().chunks_exact(h * w * c) {
        resize_into(f, h, w, c, out_h, out_w, &mut out);
    }
    Tensor::new(vec![n, out_h, out_w, c], out)
}

fn resize_into(src: &[f64], h: usize, w: usize, c: usize, out_h: usize, out_w: usize, out: &mut Vec<f64>) {
    let rows = taps(h, out_h);
    let cols = taps(w, out_w);
    let at = |y: usize, x: usize, ch: usize| src[(y * w + x) * c + ch];
    for &(y0, y1, wy) in &rows {
        for &(x0, x1, wx) in &cols {
            for ch in 0..c {
                let top = at(y0, x0, ch) * (1.0 - wx) + at(y0, x1, ch) * wx;
                let bottom = at(y1, x0, ch) * (1.0 - wx) + at(y1, x1, ch) * wx;
                out.push(top * (1.0 - wy) + bottom * wy);
            }
        }
    }
}
