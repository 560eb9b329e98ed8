//! ResNet-style networks for both paths.
//!
//! Layout: stem conv (+BN, activation) -> optional temporal differencing ->
//! 2x2 spatial max-pool -> four stages of basic residual blocks -> global average pool -> linear.
//! The appearance path is the same graph with a unit temporal axis and
//! `1 x k x k` kernels.

use rand::Rng;

use super::config::{Downsample, ModelConfig, PathKind};
use super::layers::{ActivationLayer, BatchNormLayer, ConvUnit, MaxPoolLayer, Param};
use crate::error::{Error, Result};
use crate::neuralcore::{
    global_avgpool3d, global_avgpool3d_backward, init, linear_backward, linear_forward,
    conv::window_extent, temporal_diff_backward, temporal_diff_forward, ConvSpec,
    RunningStats, Tensor,
};

/// Non-overlapping spatial max-pool after the stem.
const STEM_POOL: [usize; 3] = [1, 2, 2];

/// Stem kernel, stride and padding as `(k, s, p)` per path.
fn stem_geometry(path: PathKind) -> ([usize; 3], [usize; 3], [usize; 3]) {
    match path {
        PathKind::Motion3d => ([3, 7, 7], [1, 2, 2], [1, 3, 3]),
        PathKind::Appearance2d => ([1, 7, 7], [1, 2, 2], [0, 3, 3]),
    }
}

fn block_geometry(path: PathKind) -> ([usize; 3], [usize; 3], [usize; 3]) {
    // (kernel, padding, downsampling factor)
    match path {
        PathKind::Motion3d => ([3, 3, 3], [1, 1, 1], [2, 2, 2]),
        PathKind::Appearance2d => ([1, 3, 3], [0, 1, 1], [1, 2, 2]),
    }
}

struct BlockPlan {
    name: String,
    in_channels: usize,
    out_channels: usize,
    stride: [usize; 3],
    pool: Option<[usize; 3]>,
}

fn plan_blocks(config: &ModelConfig) -> Vec<BlockPlan> {
    let widths = config.stage_widths();
    let (_, _, factor) = block_geometry(config.path);
    let mut plans = Vec::new();
    let mut in_ch = config.stem_width();
    for (stage, &width) in widths.iter().enumerate() {
        let downsamples = stage > 0;
        for b in 0..config.blocks_per_stage {
            let first = b == 0;
            let last = b + 1 == config.blocks_per_stage;
            let stride = if downsamples && first && config.downsample == Downsample::Stride {
                factor
            } else {
                [1; 3]
            };
            let pool = (downsamples && last && config.downsample == Downsample::Pool).then_some(factor);
            plans.push(BlockPlan {
                name: format!("layer{}.{b}", stage + 1),
                in_channels: in_ch,
                out_channels: width,
                stride,
                pool,
            });
            in_ch = width;
        }
    }
    plans
}

/// Basic residual block: two convolutions with a projection shortcut when
/// the shape changes, activation after the sum, optional trailing max-pool.
#[derive(Clone, Debug)]
pub struct ResBlock {
    conv1: ConvUnit,
    act1: ActivationLayer,
    conv2: ConvUnit,
    shortcut: Option<ConvUnit>,
    act_out: ActivationLayer,
    pool: Option<MaxPoolLayer>,
}

impl ResBlock {
    fn new(config: &ModelConfig, plan: &BlockPlan, rng: &mut impl Rng) -> Self {
        let (kernel, padding, _) = block_geometry(config.path);
        let bn = config.batchnorm;
        let spec1 = ConvSpec::new(plan.in_channels, plan.out_channels, kernel, plan.stride, padding);
        let spec2 = ConvSpec::new(plan.out_channels, plan.out_channels, kernel, [1; 3], padding);
        let needs_projection = plan.stride != [1; 3] || plan.in_channels != plan.out_channels;
        let shortcut = needs_projection.then(|| {
            let spec = ConvSpec::new(plan.in_channels, plan.out_channels, [1; 3], plan.stride, [0; 3]);
            ConvUnit::new(&format!("{}.shortcut", plan.name), spec, bn, rng)
        });
        ResBlock {
            conv1: ConvUnit::new(&format!("{}.conv1", plan.name), spec1, bn, rng),
            act1: ActivationLayer::new(config.activation),
            conv2: ConvUnit::new(&format!("{}.conv2", plan.name), spec2, bn, rng),
            shortcut,
            act_out: ActivationLayer::new(config.activation),
            pool: plan.pool.map(MaxPoolLayer::new),
        }
    }

    fn infer(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.act1.infer(&self.conv1.infer(x)?);
        let mut z = self.conv2.infer(&h)?;
        match &self.shortcut {
            Some(s) => z.add_assign(&s.infer(x)?)?,
            None => z.add_assign(x)?,
        }
        let y = self.act_out.infer(&z);
        match &self.pool {
            Some(p) => p.infer(&y),
            None => Ok(y),
        }
    }

    fn forward(&mut self, x: Tensor) -> Result<Tensor> {
        let skip = match &mut self.shortcut {
            Some(s) => s.forward(x.clone())?,
            None => x.clone(),
        };
        let h = self.conv1.forward(x)?;
        let h = self.act1.forward(h);
        let mut z = self.conv2.forward(h)?;
        z.add_assign(&skip)?;
        let y = self.act_out.forward(z);
        match &mut self.pool {
            Some(p) => p.forward(y),
            None => Ok(y),
        }
    }

    fn backward(&mut self, dy: &Tensor) -> Result<Tensor> {
        let dy = match &mut self.pool {
            Some(p) => p.backward(dy)?,
            None => dy.clone(),
        };
        let dz = self.act_out.backward(&dy)?;
        let dh = self.conv2.backward(&dz)?;
        let dh = self.act1.backward(&dh)?;
        let mut dx = self.conv1.backward(&dh)?;
        match &mut self.shortcut {
            Some(s) => dx.add_assign(&s.backward(&dz)?)?,
            None => dx.add_assign(&dz)?,
        }
        Ok(dx)
    }

    fn collect<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        self.conv1.collect(out);
        self.conv2.collect(out);
        if let Some(s) = &mut self.shortcut {
            s.collect(out);
        }
    }

    fn collect_ref<'a>(&'a self, out: &mut Vec<&'a Param>) {
        self.conv1.collect_ref(out);
        self.conv2.collect_ref(out);
        if let Some(s) = &self.shortcut {
            s.collect_ref(out);
        }
    }

    fn collect_bn_ref<'a>(&'a self, out: &mut Vec<&'a BatchNormLayer>) {
        self.conv1.collect_bn_ref(out);
        self.conv2.collect_bn_ref(out);
        if let Some(s) = &self.shortcut {
            s.collect_bn_ref(out);
        }
    }

    fn collect_bn<'a>(&'a mut self, out: &mut Vec<&'a mut BatchNormLayer>) {
        self.conv1.collect_bn(out);
        self.conv2.collect_bn(out);
        if let Some(s) = &mut self.shortcut {
            s.collect_bn(out);
        }
    }
}

/// A motion-path or appearance-path classifier.
#[derive(Clone, Debug)]
pub struct Network {
    config: ModelConfig,
    stem: ConvUnit,
    stem_act: ActivationLayer,
    diff_input: Option<Tensor>,
    stem_pool: MaxPoolLayer,
    blocks: Vec<ResBlock>,
    fc_weight: Param,
    fc_bias: Param,
    head_cache: Option<(Vec<usize>, Tensor)>,
}

impl Network {
    /// Builds a freshly initialized network after checking that the whole
    /// kernel/stride chain fits the configured input shape.
    pub fn new(config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        layer_shapes(&config)?;
        let (k, s, p) = stem_geometry(config.path);
        let cin = config.input_cthw()[0];
        let stem = ConvUnit::new(
            "stem",
            ConvSpec::new(cin, config.stem_width(), k, s, p),
            config.batchnorm,
            rng,
        );
        let blocks = plan_blocks(&config)
            .iter()
            .map(|plan| ResBlock::new(&config, plan, rng))
            .collect();
        let feat = config.stage_widths()[3];
        let fc_w = init::he_normal(&[config.num_classes, feat], feat, rng);
        Ok(Network {
            stem,
            stem_act: ActivationLayer::new(config.activation),
            diff_input: None,
            stem_pool: MaxPoolLayer::new(STEM_POOL),
            blocks,
            fc_weight: Param {
                name: "fc.weight".into(),
                grad: Tensor::zeros(fc_w.shape()),
                value: fc_w,
                decay: true,
            },
            fc_bias: Param {
                name: "fc.bias".into(),
                value: Tensor::zeros(&[config.num_classes]),
                grad: Tensor::zeros(&[config.num_classes]),
                decay: false,
            },
            head_cache: None,
            config,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.value.len()).sum()
    }

    /// Accepts `[N, C, T, H, W]` (motion) or `[N, C, H, W]` (appearance) and
    /// returns the 5D view used internally.
    fn lift_input(&self, x: &Tensor) -> Result<Tensor> {
        let expected = &self.config.input_shape;
        if x.ndim() != expected.len() + 1 {
            return Err(Error::ShapeMismatch {
                op: "network input",
                axis: "rank".into(),
                expected: expected.len() + 1,
                got: x.ndim(),
            });
        }
        let names: &[&str] = match self.config.path {
            PathKind::Motion3d => &["C", "T", "H", "W"],
            PathKind::Appearance2d => &["C", "H", "W"],
        };
        for (i, (&e, &g)) in expected.iter().zip(&x.shape()[1..]).enumerate() {
            if e != g {
                return Err(Error::ShapeMismatch {
                    op: "network input",
                    axis: names[i].into(),
                    expected: e,
                    got: g,
                });
            }
        }
        let [c, t, h, w] = self.config.input_cthw();
        x.clone().reshape(&[x.dim(0), c, t, h, w])
    }

    /// Eval-mode logits `[N, num_classes]`; requires running statistics when
    /// batch normalization is enabled.
    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        let x = self.lift_input(x)?;
        let mut h = self.stem_act.infer(&self.stem.infer(&x)?);
        if self.config.fea_diff {
            h = temporal_diff_forward(&h, self.config.fea_diff_kind)?;
        }
        let mut h = self.stem_pool.infer(&h)?;
        for b in &self.blocks {
            h = b.infer(&h)?;
        }
        let pooled = global_avgpool3d(&h)?;
        linear_forward(&pooled, &self.fc_weight.value, &self.fc_bias.value)
    }

    /// Training-mode forward: batch statistics, caches kept for [`backward`].
    ///
    /// [`backward`]: Network::backward
    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let x = self.lift_input(x)?;
        let h = self.stem.forward(x)?;
        let mut h = self.stem_act.forward(h);
        if self.config.fea_diff {
            let d = temporal_diff_forward(&h, self.config.fea_diff_kind)?;
            self.diff_input = Some(h);
            h = d;
        }
        let mut h = self.stem_pool.forward(h)?;
        for b in &mut self.blocks {
            h = b.forward(h)?;
        }
        let pooled = global_avgpool3d(&h)?;
        let logits = linear_forward(&pooled, &self.fc_weight.value, &self.fc_bias.value)?;
        self.head_cache = Some((h.shape().to_vec(), pooled));
        Ok(logits)
    }

    /// Back-propagates `d loss / d logits`, storing every parameter gradient,
    /// and returns the gradient with respect to the network input.
    pub fn backward(&mut self, dlogits: &Tensor) -> Result<Tensor> {
        let (feat_shape, pooled) = self
            .head_cache
            .take()
            .ok_or_else(|| Error::InvalidArgument("backward without a training forward".into()))?;
        let g = linear_backward(&pooled, &self.fc_weight.value, dlogits)?;
        self.fc_weight.grad = g.param_grads[0].clone();
        self.fc_bias.grad = g.param_grads[1].clone();
        let mut d = global_avgpool3d_backward(&feat_shape, &g.input_grad)?;
        for b in self.blocks.iter_mut().rev() {
            d = b.backward(&d)?;
        }
        d = self.stem_pool.backward(&d)?;
        if self.config.fea_diff {
            let h = self.diff_input.take().expect("cached stem output");
            d = temporal_diff_backward(&h, self.config.fea_diff_kind, &d)?;
        }
        let d = self.stem_act.backward(&d)?;
        let d = self.stem.backward(&d)?;
        let mut shape = vec![d.dim(0)];
        shape.extend_from_slice(&self.config.input_shape);
        d.reshape(&shape)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = Vec::new();
        self.stem.collect(&mut out);
        for b in &mut self.blocks {
            b.collect(&mut out);
        }
        out.push(&mut self.fc_weight);
        out.push(&mut self.fc_bias);
        out
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut out = Vec::new();
        self.stem.collect_ref(&mut out);
        for b in &self.blocks {
            b.collect_ref(&mut out);
        }
        out.push(&self.fc_weight);
        out.push(&self.fc_bias);
        out
    }

    fn find_param(&self, name: &str) -> Option<&Param> {
        self.params().into_iter().find(|p| p.name == name)
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.find_param(name).map(|p| &p.value)
    }

    pub fn batchnorm_layers_mut(&mut self) -> Vec<&mut BatchNormLayer> {
        let mut out = Vec::new();
        self.stem.collect_bn(&mut out);
        for b in &mut self.blocks {
            b.collect_bn(&mut out);
        }
        out
    }

    pub fn batchnorm_layers(&self) -> Vec<&BatchNormLayer> {
        let mut out = Vec::new();
        self.stem.collect_bn_ref(&mut out);
        for b in &self.blocks {
            b.collect_bn_ref(&mut out);
        }
        out
    }

    /// Every learnable tensor followed by the BN running statistics
    /// (`<bn>.running_mean`, `<bn>.running_var`) that exist so far.
    pub fn export_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = self
            .params()
            .into_iter()
            .map(|p| (p.name.clone(), p.value.clone()))
            .collect();
        for bn in self.batchnorm_layers() {
            if let Some(st) = &bn.stats {
                let c = st.mean.len();
                let mean = Tensor::new(vec![c], st.mean.clone()).expect("channel vector");
                let var = Tensor::new(vec![c], st.var.clone()).expect("channel vector");
                out.push((format!("{}.running_mean", bn.name), mean));
                out.push((format!("{}.running_var", bn.name), var));
            }
        }
        out
    }

    /// Inverse of [`export_tensors`]: every parameter must be present with
    /// its exact shape; running statistics are optional per layer.
    ///
    /// [`export_tensors`]: Network::export_tensors
    pub fn import_tensors(&mut self, tensors: &[(String, Tensor)]) -> Result<()> {
        let lookup = |name: &str| tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t);
        let known: usize = self.params().len();
        for p in self.params_mut() {
            let t = lookup(&p.name)
                .ok_or_else(|| Error::format("parameter file", format!("missing tensor {}", p.name)))?;
            if t.shape() != p.value.shape() {
                return Err(Error::format(
                    "parameter file",
                    format!("{}: shape {:?}, expected {:?}", p.name, t.shape(), p.value.shape()),
                ));
            }
            p.value = t.clone();
            p.grad = Tensor::zeros(t.shape());
        }
        let mut stats_seen = 0;
        for bn in self.batchnorm_layers_mut() {
            let mean = lookup(&format!("{}.running_mean", bn.name));
            let var = lookup(&format!("{}.running_var", bn.name));
            bn.stats = match (mean, var) {
                (Some(m), Some(v)) if m.len() == bn.gamma.value.len() && v.len() == m.len() => {
                    stats_seen += 2;
                    Some(RunningStats {
                        mean: m.data().to_vec(),
                        var: v.data().to_vec(),
                    })
                }
                (None, None) => None,
                _ => {
                    return Err(Error::format(
                        "parameter file",
                        format!("{}: incomplete or mis-sized running statistics", bn.name),
                    ))
                }
            };
        }
        if tensors.len() != known + stats_seen {
            return Err(Error::format(
                "parameter file",
                format!("{} tensors present, {} recognised", tensors.len(), known + stats_seen),
            ));
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for p in self.params_mut() {
            p.grad = Tensor::zeros(p.value.shape());
        }
    }
}

/// Shapes `[N=1, C, T, H, W]` after the stem, the differencing op and every
/// block, then `[1, num_classes]` for the logits. Fails with the offending
/// axis when a kernel or pooling window does not fit.
pub fn layer_shapes(config: &ModelConfig) -> Result<Vec<(String, Vec<usize>)>> {
    config.validate()?;
    let [c, t, h, w] = config.input_cthw();
    let (k, s, p) = stem_geometry(config.path);
    let stem = ConvSpec::new(c, config.stem_width(), k, s, p);
    let mut dims = stem.output_extent([t, h, w])?;
    let shape = |ch: usize, d: [usize; 3]| vec![1, ch, d[0], d[1], d[2]];
    let mut shapes = vec![("stem".to_string(), shape(stem.out_channels, dims))];
    if config.fea_diff {
        if dims[0] < 2 {
            return Err(Error::InvalidShape {
                op: "fea_diff",
                detail: format!("temporal extent {} after the stem is below 2", dims[0]),
            });
        }
        dims[0] -= 1;
        shapes.push(("fea_diff".into(), shape(stem.out_channels, dims)));
    }
    dims = pool_extent(dims, STEM_POOL)?;
    shapes.push(("stem_pool".into(), shape(stem.out_channels, dims)));
    let (kernel, padding, _) = block_geometry(config.path);
    for plan in plan_blocks(config) {
        let spec = ConvSpec::new(plan.in_channels, plan.out_channels, kernel, plan.stride, padding);
        dims = spec.output_extent(dims)?;
        if let Some(win) = plan.pool {
            dims = pool_extent(dims, win)?;
        }
        shapes.push((plan.name, shape(plan.out_channels, dims)));
    }
    shapes.push(("logits".into(), vec![1, config.num_classes]));
    Ok(shapes)
}

fn pool_extent(dims: [usize; 3], window: [usize; 3]) -> Result<[usize; 3]> {
    let mut out = [0; 3];
    for ax in 0..3 {
        out[ax] = window_extent("maxpool3d", ["T", "H", "W"][ax], dims[ax], window[ax], window[ax], 0)?;
    }
    Ok(out)
}

/// Builds the 3D motion path (RGB or residual clips).
pub fn build_motion3d(config: ModelConfig, rng: &mut impl Rng) -> Result<Network> {
    if config.path != PathKind::Motion3d || config.fea_diff {
        return Err(Error::Config(
            "build_motion3d needs path = motion3d without fea_diff".into(),
        ));
    }
    Network::new(config, rng)
}

/// Builds the motion path with temporal feature differencing after the stem.
pub fn build_fea_diff(mut config: ModelConfig, rng: &mut impl Rng) -> Result<Network> {
    if config.path != PathKind::Motion3d {
        return Err(Error::Config("fea_diff requires path = motion3d".into()));
    }
    config.fea_diff = true;
    Network::new(config, rng)
}

/// Builds the single-frame 2D appearance path.
pub fn build_appearance2d(config: ModelConfig, rng: &mut impl Rng) -> Result<Network> {
    if config.path != PathKind::Appearance2d {
        return Err(Error::Config("build_appearance2d needs path = appearance2d".into()));
    }
    Network::new(config, rng)
}

/// Builds whichever network the configuration describes.
pub fn build(config: ModelConfig, rng: &mut impl Rng) -> Result<Network> {
    Network::new(config, rng)
}
