//! Stateful layers: parameters plus whatever the backward pass needs from
//! the last training-mode forward.

use rand::Rng;

use crate::error::{Error, Result};
use crate::neuralcore::{
    activation_backward, activation_forward, batchnorm_backward, batchnorm_forward,
    conv3d_backward, conv3d_forward, init, pool::maxpool3d_forward_indexed,
    pool::maxpool_scatter, Activation, BnCache, ConvSpec, Mode, RunningStats, Tensor,
};

/// A learnable tensor and its most recent gradient.
#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    /// Whether weight decay applies (weights yes; biases and norm params no).
    pub decay: bool,
}

impl Param {
    fn new(name: String, value: Tensor, decay: bool) -> Self {
        let grad = Tensor::zeros(value.shape());
        Param {
            name,
            value,
            grad,
            decay,
        }
    }
}

fn stale(layer: &str) -> Error {
    Error::InvalidArgument(format!("{layer}: backward called without a training forward"))
}

#[derive(Clone, Debug)]
pub struct ConvLayer {
    pub spec: ConvSpec,
    pub weight: Param,
    pub bias: Param,
    input: Option<Tensor>,
}

impl ConvLayer {
    pub fn new(name: &str, spec: ConvSpec, rng: &mut impl Rng) -> Self {
        let w = init::he_normal(&spec.weight_shape(), spec.fan_in(), rng);
        ConvLayer {
            spec,
            weight: Param::new(format!("{name}.weight"), w, true),
            bias: Param::new(format!("{name}.bias"), Tensor::zeros(&[spec.out_channels]), false),
            input: None,
        }
    }

    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        conv3d_forward(x, &self.weight.value, &self.bias.value, &self.spec)
    }

    pub fn forward(&mut self, x: Tensor) -> Result<Tensor> {
        let y = self.infer(&x)?;
        self.input = Some(x);
        Ok(y)
    }

    pub fn backward(&mut self, dy: &Tensor) -> Result<Tensor> {
        let x = self.input.take().ok_or_else(|| stale(&self.weight.name))?;
        let g = conv3d_backward(&x, &self.weight.value, &self.spec, dy)?;
        let mut grads = g.param_grads.into_iter();
        self.weight.grad = grads.next().expect("weight grad");
        self.bias.grad = grads.next().expect("bias grad");
        Ok(g.input_grad)
    }

    fn collect<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        out.push(&mut self.weight);
        out.push(&mut self.bias);
    }

    fn collect_ref<'a>(&'a self, out: &mut Vec<&'a Param>) {
        out.push(&self.weight);
        out.push(&self.bias);
    }
}

#[derive(Clone, Debug)]
pub struct BatchNormLayer {
    pub name: String,
    pub gamma: Param,
    pub beta: Param,
    pub stats: Option<RunningStats>,
    cache: Option<(Tensor, BnCache)>,
}

impl BatchNormLayer {
    pub fn new(name: &str, channels: usize) -> Self {
        BatchNormLayer {
            name: name.to_string(),
            gamma: Param::new(format!("{name}.gamma"), Tensor::full(&[channels], 1.0), false),
            beta: Param::new(format!("{name}.beta"), Tensor::zeros(&[channels]), false),
            stats: None,
            cache: None,
        }
    }

    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        let mut stats = self.stats.clone();
        Ok(batchnorm_forward(x, &self.gamma.value, &self.beta.value, &mut stats, Mode::Eval)?.0)
    }

    pub fn forward(&mut self, x: Tensor) -> Result<Tensor> {
        let (y, cache) = batchnorm_forward(
            &x,
            &self.gamma.value,
            &self.beta.value,
            &mut self.stats,
            Mode::Train,
        )?;
        self.cache = Some((x, cache));
        Ok(y)
    }

    pub fn backward(&mut self, dy: &Tensor) -> Result<Tensor> {
        let (x, cache) = self.cache.take().ok_or_else(|| stale(&self.name))?;
        let g = batchnorm_backward(&x, &self.gamma.value, self.stats.as_ref(), &cache, dy)?;
        let mut grads = g.param_grads.into_iter();
        self.gamma.grad = grads.next().expect("gamma grad");
        self.beta.grad = grads.next().expect("beta grad");
        Ok(g.input_grad)
    }

    fn collect<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        out.push(&mut self.gamma);
        out.push(&mut self.beta);
    }

    fn collect_ref<'a>(&'a self, out: &mut Vec<&'a Param>) {
        out.push(&self.gamma);
        out.push(&self.beta);
    }
}

#[derive(Clone, Debug)]
pub struct ActivationLayer {
    pub kind: Activation,
    input: Option<Tensor>,
}

impl ActivationLayer {
    pub fn new(kind: Activation) -> Self {
        ActivationLayer { kind, input: None }
    }

    pub fn infer(&self, x: &Tensor) -> Tensor {
        activation_forward(x, self.kind)
    }

    pub fn forward(&mut self, x: Tensor) -> Tensor {
        let y = self.infer(&x);
        self.input = Some(x);
        y
    }

    pub fn backward(&mut self, dy: &Tensor) -> Result<Tensor> {
        let x = self.input.take().ok_or_else(|| stale("activation"))?;
        activation_backward(&x, self.kind, dy)
    }
}

#[derive(Clone, Debug)]
pub struct MaxPoolLayer {
    pub window: [usize; 3],
    cache: Option<(Vec<usize>, Vec<usize>)>,
}

impl MaxPoolLayer {
    pub fn new(window: [usize; 3]) -> Self {
        MaxPoolLayer {
            window,
            cache: None,
        }
    }

    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        Ok(maxpool3d_forward_indexed(x, self.window, self.window)?.output)
    }

    pub fn forward(&mut self, x: Tensor) -> Result<Tensor> {
        let out = maxpool3d_forward_indexed(&x, self.window, self.window)?;
        self.cache = Some((x.shape().to_vec(), out.argmax));
        Ok(out.output)
    }

    pub fn backward(&mut self, dy: &Tensor) -> Result<Tensor> {
        let (shape, argmax) = self.cache.take().ok_or_else(|| stale("maxpool"))?;
        maxpool_scatter(&shape, &argmax, dy)
    }
}

/// Convolution optionally followed by batch normalization.
#[derive(Clone, Debug)]
pub struct ConvUnit {
    pub conv: ConvLayer,
    pub bn: Option<BatchNormLayer>,
}

impl ConvUnit {
    pub fn new(name: &str, spec: ConvSpec, batchnorm: bool, rng: &mut impl Rng) -> Self {
        ConvUnit {
            conv: ConvLayer::new(&format!("{name}.conv"), spec, rng),
            bn: batchnorm.then(|| BatchNormLayer::new(&format!("{name}.bn"), spec.out_channels)),
        }
    }

    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        let y = self.conv.infer(x)?;
        match &self.bn {
            Some(bn) => bn.infer(&y),
            None => Ok(y),
        }
    }

    pub fn forward(&mut self, x: Tensor) -> Result<Tensor> {
        let y = self.conv.forward(x)?;
        match &mut self.bn {
            Some(bn) => bn.forward(y),
            None => Ok(y),
        }
    }

    pub fn backward(&mut self, dy: &Tensor) -> Result<Tensor> {
        match &mut self.bn {
            Some(bn) => {
                let d = bn.backward(dy)?;
                self.conv.backward(&d)
            }
            None => self.conv.backward(dy),
        }
    }

    pub fn collect<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        self.conv.collect(out);
        if let Some(bn) = &mut self.bn {
            bn.collect(out);
        }
    }

    pub fn collect_ref<'a>(&'a self, out: &mut Vec<&'a Param>) {
        self.conv.collect_ref(out);
        if let Some(bn) = &self.bn {
            bn.collect_ref(out);
        }
    }

    pub fn collect_bn<'a>(&'a mut self, out: &mut Vec<&'a mut BatchNormLayer>) {
        if let Some(bn) = &mut self.bn {
            out.push(bn);
        }
    }

    pub fn collect_bn_ref<'a>(&'a self, out: &mut Vec<&'a BatchNormLayer>) {
        if let Some(bn) = &self.bn {
            out.push(bn);
        }
    }
}
