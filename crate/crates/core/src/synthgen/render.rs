//! Sprite, background and camera-shake rendering from a video trace.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::neuralcore::Tensor;

/// Sub-pixel samples per axis when computing sprite coverage.
const SUPERSAMPLE: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Square,
    Circle,
    Triangle,
    Cross,
    Diamond,
    Ring,
}

impl Shape {
    pub const ALL: [Shape; 6] = [
        Shape::Square,
        Shape::Circle,
        Shape::Triangle,
        Shape::Cross,
        Shape::Diamond,
        Shape::Ring,
    ];

    /// Membership test in sprite coordinates scaled to `[-1, 1]`, `v` pointing down.
    fn contains(self, u: f64, v: f64) -> bool {
        match self {
            Shape::Square => u.abs() <= 1.0 && v.abs() <= 1.0,
            Shape::Circle => u * u + v * v <= 1.0,
            Shape::Triangle => v <= 1.0 && u.abs() <= (v + 1.0) / 2.0,
            Shape::Cross => {
                (u.abs() <= 1.0 && v.abs() <= 0.35) || (v.abs() <= 1.0 && u.abs() <= 0.35)
            }
            Shape::Diamond => u.abs() + v.abs() <= 1.0,
            Shape::Ring => (0.45..=1.0).contains(&(u * u + v * v)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpriteTrace {
    pub shape: Shape,
    pub color: [f64; 3],
    /// Side length (diameter) in pixels.
    pub size: f64,
}

/// Sprite center as a closed-form function of the frame index.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Trajectory {
    /// `(x0 + vx t, y0 + vy t)`
    Linear { x0: f64, y0: f64, vx: f64, vy: f64 },
    /// `center + amplitude * sin(2 pi t / period + phase) * axis`
    Oscillation {
        cx: f64,
        cy: f64,
        amplitude: f64,
        period: f64,
        phase: f64,
        horizontal: bool,
    },
}

impl Trajectory {
    pub fn center(&self, t: usize) -> (f64, f64) {
        let t = t as f64;
        match *self {
            Trajectory::Linear { x0, y0, vx, vy } => (x0 + vx * t, y0 + vy * t),
            Trajectory::Oscillation {
                cx,
                cy,
                amplitude,
                period,
                phase,
                horizontal,
            } => {
                let d = amplitude * (2.0 * std::f64::consts::PI * t / period + phase).sin();
                if horizontal {
                    (cx + d, cy)
                } else {
                    (cx, cy + d)
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BackgroundTrace {
    Plain { color: [f64; 3] },
    /// Blocky texture regenerated from `seed`.
    Textured { seed: u64 },
}

impl BackgroundTrace {
    pub fn render(&self, h: usize, w: usize) -> Vec<f64> {
        match self {
            BackgroundTrace::Plain { color } => (0..h * w).flat_map(|_| *color).collect(),
            BackgroundTrace::Textured { seed } => texture(*seed, h, w),
        }
    }
}

/// Gray base level with blocks of independent color offsets; block size
/// is 2 to 4 pixels.
fn texture(seed: u64, h: usize, w: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let block = rng.random_range(2..=4usize);
    let base: f64 = rng.random_range(0.25..0.65);
    let (bh, bw) = (h.div_ceil(block), w.div_ceil(block));
    let offsets: Vec<[f64; 3]> = (0..bh * bw)
        .map(|_| {
            let shared: f64 = rng.random_range(-0.2..0.2);
            [0; 3].map(|_| (base + shared + rng.random_range(-0.08..0.08)).clamp(0.0, 1.0))
        })
        .collect();
    let mut out = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            out.extend_from_slice(&offsets[(y / block) * bw + x / block]);
        }
    }
    out
}

/// Blends the sprite into `frame` (`[H, W, 3]`, row-major) by area coverage.
fn draw_sprite(frame: &mut [f64], h: usize, w: usize, sprite: &SpriteTrace, cx: f64, cy: f64) {
    let r = sprite.size / 2.0;
    let y_lo = ((cy - r).floor().max(0.0)) as usize;
    let y_hi = ((cy + r).ceil().min(h as f64)) as usize;
    let x_lo = ((cx - r).floor().max(0.0)) as usize;
    let x_hi = ((cx + r).ceil().min(w as f64)) as usize;
    let step = 1.0 / SUPERSAMPLE as f64;
    for y in y_lo..y_hi {
        for x in x_lo..x_hi {
            let mut hits = 0;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let px = x as f64 + (sx as f64 + 0.5) * step;
                    let py = y as f64 + (sy as f64 + 0.5) * step;
                    hits += sprite.shape.contains((px - cx) / r, (py - cy) / r) as usize;
                }
            }
            if hits > 0 {
                let a = hits as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64;
                let p = &mut frame[(y * w + x) * 3..(y * w + x) * 3 + 3];
                for c in 0..3 {
                    p[c] = p[c] * (1.0 - a) + sprite.color[c] * a;
                }
            }
        }
    }
}

/// Index reflection without repeating the edge: `-1 -> 1`, `n -> n - 2`.
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - m }) as usize
}

/// Whole-frame integer translation by `(dx, dy)` with reflected borders.
fn translate(frame: &[f64], h: usize, w: usize, dx: i32, dy: i32) -> Vec<f64> {
    if dx == 0 && dy == 0 {
        return frame.to_vec();
    }
    let mut out = Vec::with_capacity(frame.len());
    for y in 0..h {
        let sy = reflect(y as isize - dy as isize, h);
        for x in 0..w {
            let sx = reflect(x as isize - dx as isize, w);
            out.extend_from_slice(&frame[(sy * w + sx) * 3..(sy * w + sx) * 3 + 3]);
        }
    }
    out
}

/// Renders `[frames, h, w, 3]`.
pub(crate) fn render(
    background: &BackgroundTrace,
    sprite: &SpriteTrace,
    trajectory: &Trajectory,
    jitter: &[(i32, i32)],
    h: usize,
    w: usize,
) -> Tensor {
    let bg = background.render(h, w);
    let mut data = Vec::with_capacity(jitter.len() * h * w * 3);
    for (t, &(dx, dy)) in jitter.iter().enumerate() {
        let mut frame = bg.clone();
        let (cx, cy) = trajectory.center(t);
        draw_sprite(&mut frame, h, w, sprite, cx, cy);
        data.extend(translate(&frame, h, w, dx, dy));
    }
    Tensor::new(vec![jitter.len(), h, w, 3], data).expect("frame buffer matches shape")
}
