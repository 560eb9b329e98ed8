//! Independent oracles shared by the integration tests: nested-loop reference
//! kernels and central finite differences. Nothing here calls the GEMM path.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use resframe::neuralcore::{
    activation_backward, activation_forward, batchnorm_backward, batchnorm_forward,
    conv2d_backward, conv2d_forward, conv3d_backward, conv3d_forward, cross_entropy_loss,
    global_avgpool3d, global_avgpool3d_backward, linear_backward, linear_forward,
    maxpool3d_backward, maxpool3d_forward, temporal_diff_backward, temporal_diff_forward,
    Activation, Conv2dSpec, ConvSpec, DiffKind, Mode, Tensor,
};

pub const FD_STEP: f64 = 1e-3;
pub const GRAD_REL_TOL: f64 = 1e-4;
pub const ORACLE_TOL: f64 = 1e-10;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Distinct values spaced well beyond the finite-difference step, in random
/// order, so max-pool argmax never flips under perturbation.
pub fn spaced_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.01 - 0.5).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        vals.swap(i, j);
    }
    Tensor::new(shape.to_vec(), vals).unwrap()
}

/// Values bounded away from zero by more than the finite-difference step.
pub fn off_kink_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.05..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

// ---------------------------------------------------------------------------
// nested-loop reference kernels

pub fn naive_conv3d(x: &Tensor, w: &Tensor, b: &Tensor, spec: &ConvSpec) -> Tensor {
    let s = x.shape();
    let (n, cin, it, ih, iw) = (s[0], s[1], s[2], s[3], s[4]);
    let [kt, kh, kw] = spec.kernel;
    let [st, sh, sw] = spec.stride;
    let [pt, ph, pw] = spec.padding;
    let ot = (it + 2 * pt - kt) / st + 1;
    let oh = (ih + 2 * ph - kh) / sh + 1;
    let ow = (iw + 2 * pw - kw) / sw + 1;
    let cout = spec.out_channels;
    let at = |bn: usize, c: usize, t: isize, h: isize, ww: isize| -> f64 {
        if t < 0 || h < 0 || ww < 0 || t >= it as isize || h >= ih as isize || ww >= iw as isize {
            return 0.0;
        }
        x.data()[(((bn * cin + c) * it + t as usize) * ih + h as usize) * iw + ww as usize]
    };
    let mut out = Tensor::zeros(&[n, cout, ot, oh, ow]);
    let mut idx = 0;
    for bn in 0..n {
        for co in 0..cout {
            for t in 0..ot {
                for h in 0..oh {
                    for ww in 0..ow {
                        let mut acc = b.data()[co];
                        for ci in 0..cin {
                            for dt in 0..kt {
                                for dh in 0..kh {
                                    for dw in 0..kw {
                                        let wv = w.data()
                                            [(((co * cin + ci) * kt + dt) * kh + dh) * kw + dw];
                                        acc += wv
                                            * at(
                                                bn,
                                                ci,
                                                (t * st + dt) as isize - pt as isize,
                                                (h * sh + dh) as isize - ph as isize,
                                                (ww * sw + dw) as isize - pw as isize,
                                            );
                                    }
                                }
                            }
                        }
                        out.data_mut()[idx] = acc;
                        idx += 1;
                    }
                }
            }
        }
    }
    out
}

pub fn naive_conv2d(x: &Tensor, w: &Tensor, b: &Tensor, spec: &Conv2dSpec) -> Tensor {
    let s = x.shape();
    let (n, cin, ih, iw) = (s[0], s[1], s[2], s[3]);
    let [kh, kw] = spec.kernel;
    let [sh, sw] = spec.stride;
    let [ph, pw] = spec.padding;
    let oh = (ih + 2 * ph - kh) / sh + 1;
    let ow = (iw + 2 * pw - kw) / sw + 1;
    let cout = spec.out_channels;
    let mut out = Tensor::zeros(&[n, cout, oh, ow]);
    let mut idx = 0;
    for bn in 0..n {
        for co in 0..cout {
            for h in 0..oh {
                for ww in 0..ow {
                    let mut acc = b.data()[co];
                    for ci in 0..cin {
                        for dh in 0..kh {
                            for dw in 0..kw {
                                let hi = (h * sh + dh) as isize - ph as isize;
                                let wi = (ww * sw + dw) as isize - pw as isize;
                                if hi < 0 || wi < 0 || hi >= ih as isize || wi >= iw as isize {
                                    continue;
                                }
                                acc += w.data()[((co * cin + ci) * kh + dh) * kw + dw]
                                    * x.data()
                                        [((bn * cin + ci) * ih + hi as usize) * iw + wi as usize];
                            }
                        }
                    }
                    out.data_mut()[idx] = acc;
                    idx += 1;
                }
            }
        }
    }
    out
}

pub fn naive_maxpool3d(x: &Tensor, win: [usize; 3], stride: [usize; 3]) -> Tensor {
    let s = x.shape();
    let (n, c, it, ih, iw) = (s[0], s[1], s[2], s[3], s[4]);
    let ot = (it - win[0]) / stride[0] + 1;
    let oh = (ih - win[1]) / stride[1] + 1;
    let ow = (iw - win[2]) / stride[2] + 1;
    let mut out = Vec::new();
    for bn in 0..n {
        for ch in 0..c {
            for t in 0..ot {
                for h in 0..oh {
                    for w in 0..ow {
                        let mut m = f64::NEG_INFINITY;
                        for dt in 0..win[0] {
                            for dh in 0..win[1] {
                                for dw in 0..win[2] {
                                    let v = x.data()[(((bn * c + ch) * it + t * stride[0] + dt)
                                        * ih
                                        + h * stride[1]
                                        + dh)
                                        * iw
                                        + w * stride[2]
                                        + dw];
                                    m = m.max(v);
                                }
                            }
                        }
                        out.push(m);
                    }
                }
            }
        }
    }
    Tensor::new(vec![n, c, ot, oh, ow], out).unwrap()
}

// ---------------------------------------------------------------------------
// finite differences

/// Central differences of a scalar function at `x`.
pub fn numeric_grad(x: &Tensor, h: f64, mut f: impl FnMut(&Tensor) -> f64) -> Tensor {
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (up - down) / (2.0 * h);
    }
    grad
}

/// Largest elementwise `|a - n| / max(|a|, |n|)`; where both magnitudes are
/// below 1e-7 the absolute error is used instead.
pub fn max_rel_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape());
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| {
            let scale = a.abs().max(n.abs());
            if scale < 1e-7 {
                (a - n).abs()
            } else {
                (a - n).abs() / scale
            }
        })
        .fold(0.0, f64::max)
}

/// Weighted-sum probe loss `L(y) = sum(y * r)`, whose upstream gradient is `r`.
pub fn probe_loss(y: &Tensor, r: &Tensor) -> f64 {
    y.dot(r).unwrap()
}

// ---------------------------------------------------------------------------
// per-layer gradient checks, each returning the worst relative error over
// every differentiated quantity

pub fn check_conv3d(seed: u64) -> f64 {
    let mut g = rng(seed);
    let cin = g.random_range(1..=2);
    let cout = g.random_range(1..=3);
    let kernel = [g.random_range(1..=3), g.random_range(1..=3), g.random_range(1..=3)];
    let stride = [g.random_range(1..=2), g.random_range(1..=2), g.random_range(1..=2)];
    let padding = [g.random_range(0..=1), g.random_range(0..=1), g.random_range(0..=1)];
    let dims = [
        g.random_range(kernel[0]..=4),
        g.random_range(kernel[1]..=4),
        g.random_range(kernel[2]..=4),
    ];
    let spec = ConvSpec::new(cin, cout, kernel, stride, padding);
    let x = random_tensor(&[2, cin, dims[0], dims[1], dims[2]], &mut g);
    let w = random_tensor(&spec.weight_shape(), &mut g);
    let b = random_tensor(&[cout], &mut g);
    let y = conv3d_forward(&x, &w, &b, &spec).unwrap();
    let r = random_tensor(y.shape(), &mut g);
    let grads = conv3d_backward(&x, &w, &spec, &r).unwrap();

    let nx = numeric_grad(&x, FD_STEP, |x| probe_loss(&conv3d_forward(x, &w, &b, &spec).unwrap(), &r));
    let nw = numeric_grad(&w, FD_STEP, |w| probe_loss(&conv3d_forward(&x, w, &b, &spec).unwrap(), &r));
    let nb = numeric_grad(&b, FD_STEP, |b| probe_loss(&conv3d_forward(&x, &w, b, &spec).unwrap(), &r));
    max_rel_error(&grads.input_grad, &nx)
        .max(max_rel_error(&grads.param_grads[0], &nw))
        .max(max_rel_error(&grads.param_grads[1], &nb))
}

pub fn check_conv2d(seed: u64) -> f64 {
    let mut g = rng(seed);
    let cin = g.random_range(1..=3);
    let cout = g.random_range(1..=3);
    let kernel = [g.random_range(1..=3), g.random_range(1..=3)];
    let spec = Conv2dSpec {
        kernel,
        stride: [g.random_range(1..=2), g.random_range(1..=2)],
        padding: [g.random_range(0..=1), g.random_range(0..=1)],
        in_channels: cin,
        out_channels: cout,
    };
    let x = random_tensor(&[2, cin, g.random_range(kernel[0]..=5), g.random_range(kernel[1]..=5)], &mut g);
    let w = random_tensor(&[cout, cin, kernel[0], kernel[1]], &mut g);
    let b = random_tensor(&[cout], &mut g);
    let y = conv2d_forward(&x, &w, &b, &spec).unwrap();
    let r = random_tensor(y.shape(), &mut g);
    let grads = conv2d_backward(&x, &w, &spec, &r).unwrap();
    let nx = numeric_grad(&x, FD_STEP, |x| probe_loss(&conv2d_forward(x, &w, &b, &spec).unwrap(), &r));
    let nw = numeric_grad(&w, FD_STEP, |w| probe_loss(&conv2d_forward(&x, w, &b, &spec).unwrap(), &r));
    let nb = numeric_grad(&b, FD_STEP, |b| probe_loss(&conv2d_forward(&x, &w, b, &spec).unwrap(), &r));
    max_rel_error(&grads.input_grad, &nx)
        .max(max_rel_error(&grads.param_grads[0], &nw))
        .max(max_rel_error(&grads.param_grads[1], &nb))
}

pub fn check_maxpool(seed: u64) -> f64 {
    let mut g = rng(seed);
    let win = [g.random_range(1..=2), g.random_range(1..=3), g.random_range(1..=3)];
    let stride = [g.random_range(1..=2), g.random_range(1..=2), g.random_range(1..=2)];
    let shape = [
        2,
        g.random_range(1..=2),
        g.random_range(win[0]..=4),
        g.random_range(win[1]..=5),
        g.random_range(win[2]..=5),
    ];
    let x = spaced_tensor(&shape, &mut g);
    let y = maxpool3d_forward(&x, win, stride).unwrap();
    let r = random_tensor(y.shape(), &mut g);
    let dx = maxpool3d_backward(&x, win, stride, &r).unwrap();
    let nx = numeric_grad(&x, FD_STEP, |x| probe_loss(&maxpool3d_forward(x, win, stride).unwrap(), &r));
    max_rel_error(&dx, &nx)
}

pub fn check_activation(seed: u64, kind: Activation) -> f64 {
    let mut g = rng(seed);
    let shape = [g.random_range(1..=4), g.random_range(1..=6)];
    let x = off_kink_tensor(&shape, &mut g);
    let r = random_tensor(&shape, &mut g);
    let dx = activation_backward(&x, kind, &r).unwrap();
    let nx = numeric_grad(&x, FD_STEP, |x| probe_loss(&activation_forward(x, kind), &r));
    max_rel_error(&dx, &nx)
}

pub fn check_batchnorm(seed: u64) -> f64 {
    let mut g = rng(seed);
    let c = g.random_range(1..=3);
    // at least four values per channel; with two the batch variance can sit
    // near eps and the curvature swamps a 1e-3 step
    let shape = [g.random_range(2..=3), c, g.random_range(2..=3), g.random_range(1..=3)];
    let x = random_tensor(&shape, &mut g);
    let gamma = Tensor::from_fn(&[c], |_| g.random_range(0.5..1.5));
    let beta = random_tensor(&[c], &mut g);
    let r = random_tensor(&shape, &mut g);
    let run = |x: &Tensor, gamma: &Tensor, beta: &Tensor| {
        batchnorm_forward(x, gamma, beta, &mut None, Mode::Train).unwrap().0
    };
    let (_, cache) = batchnorm_forward(&x, &gamma, &beta, &mut None, Mode::Train).unwrap();
    let grads = batchnorm_backward(&x, &gamma, None, &cache, &r).unwrap();
    let nx = numeric_grad(&x, FD_STEP, |x| probe_loss(&run(x, &gamma, &beta), &r));
    let ng = numeric_grad(&gamma, FD_STEP, |gm| probe_loss(&run(&x, gm, &beta), &r));
    let nb = numeric_grad(&beta, FD_STEP, |bt| probe_loss(&run(&x, &gamma, bt), &r));
    max_rel_error(&grads.input_grad, &nx)
        .max(max_rel_error(&grads.param_grads[0], &ng))
        .max(max_rel_error(&grads.param_grads[1], &nb))
}

pub fn check_linear(seed: u64) -> f64 {
    let mut g = rng(seed);
    let (n, fin, fout) = (g.random_range(1..=4), g.random_range(1..=6), g.random_range(1..=5));
    let x = random_tensor(&[n, fin], &mut g);
    let w = random_tensor(&[fout, fin], &mut g);
    let b = random_tensor(&[fout], &mut g);
    let r = random_tensor(&[n, fout], &mut g);
    let grads = linear_backward(&x, &w, &r).unwrap();
    let nx = numeric_grad(&x, FD_STEP, |x| probe_loss(&linear_forward(x, &w, &b).unwrap(), &r));
    let nw = numeric_grad(&w, FD_STEP, |w| probe_loss(&linear_forward(&x, w, &b).unwrap(), &r));
    let nb = numeric_grad(&b, FD_STEP, |b| probe_loss(&linear_forward(&x, &w, b).unwrap(), &r));
    max_rel_error(&grads.input_grad, &nx)
        .max(max_rel_error(&grads.param_grads[0], &nw))
        .max(max_rel_error(&grads.param_grads[1], &nb))
}

pub fn check_avgpool(seed: u64) -> f64 {
    let mut g = rng(seed);
    let shape = [g.random_range(1..=3), g.random_range(1..=3), g.random_range(1..=3), 2, 2];
    let x = random_tensor(&shape, &mut g);
    let r = random_tensor(&shape[..2], &mut g);
    let dx = global_avgpool3d_backward(&shape, &r).unwrap();
    let nx = numeric_grad(&x, FD_STEP, |x| probe_loss(&global_avgpool3d(x).unwrap(), &r));
    max_rel_error(&dx, &nx)
}

pub fn check_cross_entropy(seed: u64) -> f64 {
    let mut g = rng(seed);
    let (n, k) = (g.random_range(1..=4), g.random_range(2..=6));
    let logits = Tensor::from_fn(&[n, k], |_| g.random_range(-3.0..3.0));
    let labels: Vec<usize> = (0..n).map(|_| g.random_range(0..k)).collect();
    let (_, grad) = cross_entropy_loss(&logits, &labels).unwrap();
    let num = numeric_grad(&logits, FD_STEP, |z| cross_entropy_loss(z, &labels).unwrap().0);
    max_rel_error(&grad, &num)
}

pub fn check_temporal_diff(seed: u64) -> f64 {
    let mut g = rng(seed);
    let shape = [
        g.random_range(1..=2),
        g.random_range(1..=2),
        g.random_range(2..=4),
        g.random_range(1..=3),
        g.random_range(1..=3),
    ];
    // spaced values keep every difference far from the |.| kink
    let x = spaced_tensor(&shape, &mut g);
    let r = random_tensor(&[shape[0], shape[1], shape[2] - 1, shape[3], shape[4]], &mut g);
    let mut worst: f64 = 0.0;
    for kind in [DiffKind::Absolute, DiffKind::Signed] {
        let dx = temporal_diff_backward(&x, kind, &r).unwrap();
        let nx = numeric_grad(&x, FD_STEP, |x| probe_loss(&temporal_diff_forward(x, kind).unwrap(), &r));
        worst = worst.max(max_rel_error(&dx, &nx));
    }
    worst
}

/// conv3d -> batchnorm -> ELU -> global average pool -> linear -> softmax
/// cross-entropy, differentiated end to end with respect to every parameter
/// and the input.
pub fn check_three_layer_network(seed: u64) -> f64 {
    let mut g = rng(seed);
    let spec = ConvSpec::new(2, 3, [2, 3, 3], [1, 2, 1], [0, 1, 1]);
    let x = random_tensor(&[2, 2, 3, 4, 4], &mut g);
    let w = random_tensor(&spec.weight_shape(), &mut g);
    let b = random_tensor(&[3], &mut g);
    let gamma = Tensor::from_fn(&[3], |_| g.random_range(0.5..1.5));
    let beta = random_tensor(&[3], &mut g);
    let fw = random_tensor(&[4, 3], &mut g);
    let fb = random_tensor(&[4], &mut g);
    let labels = [g.random_range(0..4), g.random_range(0..4)];

    let loss = |x: &Tensor, w: &Tensor, gamma: &Tensor, fw: &Tensor| -> f64 {
        let c = conv3d_forward(x, w, &b, &spec).unwrap();
        let (n, _) = batchnorm_forward(&c, gamma, &beta, &mut None, Mode::Train).unwrap();
        let a = activation_forward(&n, Activation::Elu);
        let p = global_avgpool3d(&a).unwrap();
        let z = linear_forward(&p, fw, &fb).unwrap();
        cross_entropy_loss(&z, &labels).unwrap().0
    };

    let c = conv3d_forward(&x, &w, &b, &spec).unwrap();
    let (n, cache) = batchnorm_forward(&c, &gamma, &beta, &mut None, Mode::Train).unwrap();
    let a = activation_forward(&n, Activation::Elu);
    let p = global_avgpool3d(&a).unwrap();
    let z = linear_forward(&p, &fw, &fb).unwrap();
    let (_, dz) = cross_entropy_loss(&z, &labels).unwrap();
    let lg = linear_backward(&p, &fw, &dz).unwrap();
    let dp = global_avgpool3d_backward(a.shape(), &lg.input_grad).unwrap();
    let dn = activation_backward(&n, Activation::Elu, &dp).unwrap();
    let bg = batchnorm_backward(&c, &gamma, None, &cache, &dn).unwrap();
    let cg = conv3d_backward(&x, &w, &spec, &bg.input_grad).unwrap();

    let nx = numeric_grad(&x, FD_STEP, |x| loss(x, &w, &gamma, &fw));
    let nw = numeric_grad(&w, FD_STEP, |w| loss(&x, w, &gamma, &fw));
    let ng = numeric_grad(&gamma, FD_STEP, |gm| loss(&x, &w, gm, &fw));
    let nf = numeric_grad(&fw, FD_STEP, |f| loss(&x, &w, &gamma, f));
    max_rel_error(&cg.input_grad, &nx)
        .max(max_rel_error(&cg.param_grads[0], &nw))
        .max(max_rel_error(&bg.param_grads[0], &ng))
        .max(max_rel_error(&lg.param_grads[0], &nf))
}

/// Named gradient checks, each to be run over many seeds.
pub fn gradient_checks() -> Vec<(&'static str, Box<dyn Fn(u64) -> f64>)> {
    vec![
        ("conv3d", Box::new(check_conv3d)),
        ("conv2d", Box::new(check_conv2d)),
        ("maxpool3d", Box::new(check_maxpool)),
        ("relu", Box::new(|s| check_activation(s, Activation::Relu))),
        ("elu", Box::new(|s| check_activation(s, Activation::Elu))),
        ("batchnorm", Box::new(check_batchnorm)),
        ("linear", Box::new(check_linear)),
        ("global_avgpool3d", Box::new(check_avgpool)),
        ("cross_entropy", Box::new(check_cross_entropy)),
        ("temporal_diff", Box::new(check_temporal_diff)),
    ]
}

// ---------------------------------------------------------------------------
// forward-oracle sweeps over small extents; returns the worst |diff|

pub fn oracle_sweep_conv3d(seed: u64) -> f64 {
    let mut g = rng(seed);
    let mut worst: f64 = 0.0;
    for t in 1..=6 {
        for hw in 1..=6 {
            let k = [g.random_range(1..=t.min(3)), g.random_range(1..=hw.min(3)), g.random_range(1..=hw.min(3))];
            let spec = ConvSpec::new(
                g.random_range(1..=3),
                g.random_range(1..=3),
                k,
                [g.random_range(1..=2), g.random_range(1..=2), g.random_range(1..=2)],
                [g.random_range(0..=1), g.random_range(0..=1), g.random_range(0..=1)],
            );
            let w_extent = g.random_range(k[2]..=6);
            let x = random_tensor(&[g.random_range(1..=2), spec.in_channels, t, hw, w_extent], &mut g);
            let w = random_tensor(&spec.weight_shape(), &mut g);
            let b = random_tensor(&[spec.out_channels], &mut g);
            let fast = conv3d_forward(&x, &w, &b, &spec).unwrap();
            worst = worst.max(fast.max_abs_diff(&naive_conv3d(&x, &w, &b, &spec)));
        }
    }
    worst
}

pub fn oracle_sweep_conv2d(seed: u64) -> f64 {
    let mut g = rng(seed);
    let mut worst: f64 = 0.0;
    for h in 1..=6 {
        for w_extent in 1..=6 {
            let k = [g.random_range(1..=h.min(3)), g.random_range(1..=w_extent.min(3))];
            let spec = Conv2dSpec {
                kernel: k,
                stride: [g.random_range(1..=2), g.random_range(1..=2)],
                padding: [g.random_range(0..=1), g.random_range(0..=1)],
                in_channels: g.random_range(1..=3),
                out_channels: g.random_range(1..=3),
            };
            let x = random_tensor(&[2, spec.in_channels, h, w_extent], &mut g);
            let w = random_tensor(&[spec.out_channels, spec.in_channels, k[0], k[1]], &mut g);
            let b = random_tensor(&[spec.out_channels], &mut g);
            let fast = conv2d_forward(&x, &w, &b, &spec).unwrap();
            worst = worst.max(fast.max_abs_diff(&naive_conv2d(&x, &w, &b, &spec)));
        }
    }
    worst
}

pub fn oracle_sweep_maxpool(seed: u64) -> f64 {
    let mut g = rng(seed);
    let mut worst: f64 = 0.0;
    for t in 1..=6 {
        for hw in 1..=6 {
            let win = [g.random_range(1..=t.min(3)), g.random_range(1..=hw.min(3)), g.random_range(1..=hw.min(3))];
            let stride = [g.random_range(1..=3), g.random_range(1..=3), g.random_range(1..=3)];
            let x = random_tensor(&[2, 2, t, hw, hw], &mut g);
            let fast = maxpool3d_forward(&x, win, stride).unwrap();
            worst = worst.max(fast.max_abs_diff(&naive_maxpool3d(&x, win, stride)));
        }
    }
    worst
}
