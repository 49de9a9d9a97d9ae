use rand::Rng;

use crate::error::Result;
use crate::rng;
use crate::tensor::{BnMode, Graph, ParamId, ParamStore, Scalar, Tensor, Var};

/// Whether batchnorm layers use batch statistics (and update running ones).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Kaiming-normal weights scaled for a leaky-relu of the given slope; `gain_slope = None` means linear.
fn kaiming<R: Rng>(shape: [usize; 4], fan_in: usize, gain_slope: Option<f32>, rng: &mut R) -> Tensor<f32> {
    let gain = match gain_slope {
        Some(a) => 2.0 / (1.0 + (a as f64).powi(2)),
        None => 1.0,
    };
    let std = (gain / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| (std * rng::normal(rng)) as f32)
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub pad: usize,
}

impl Conv {
    /// Odd square kernel with "same" padding.
    pub fn new<R: Rng>(
        store: &mut ParamStore<f32>,
        name: &str,
        (cin, cout, k): (usize, usize, usize),
        gain_slope: Option<f32>,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), kaiming([cout, cin, k, k], cin * k * k, gain_slope, rng));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros([cout]));
        Conv {
            weight,
            bias,
            pad: (k - 1) / 2,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, s: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(s, self.weight);
        let b = g.param(s, self.bias);
        g.conv2d(x, w, b, 1, self.pad)
    }
}

#[derive(Clone, Debug)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
    /// Running mean buffer; the running variance is the next buffer.
    pub running: usize,
}

impl Norm {
    pub fn new(store: &mut ParamStore<f32>, name: &str, c: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::full([c], 1.0));
        let beta = store.add(format!("{name}.beta"), Tensor::zeros([c]));
        let running = store.add_buffer(format!("{name}.running_mean"), vec![0.0; c]);
        store.add_buffer(format!("{name}.running_var"), vec![1.0; c]);
        Norm { gamma, beta, running }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, s: &ParamStore<T>, x: Var, mode: Mode) -> Result<Var> {
        let gamma = g.param(s, self.gamma);
        let beta = g.param(s, self.beta);
        let bn = match mode {
            Mode::Train => BnMode::Train {
                running: Some(self.running),
            },
            Mode::Eval => BnMode::Eval {
                mean: s.buffer(self.running),
                var: s.buffer(self.running + 1),
            },
        };
        g.batchnorm(x, Some(gamma), Some(beta), bn)
    }
}

#[derive(Clone, Debug)]
pub struct UpConv {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl UpConv {
    pub fn new<R: Rng>(store: &mut ParamStore<f32>, name: &str, cin: usize, cout: usize, slope: f32, rng: &mut R) -> Self {
        let weight = store.add(format!("{name}.weight"), kaiming([cin, cout, 2, 2], cin, Some(slope), rng));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros([cout]));
        UpConv { weight, bias }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, s: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(s, self.weight);
        let b = g.param(s, self.bias);
        g.upsample2(x, w, b)
    }
}

/// conv -> batchnorm -> leaky-relu
#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub conv: Conv,
    pub norm: Norm,
    pub slope: f32,
}

impl ConvBlock {
    pub fn new<R: Rng>(store: &mut ParamStore<f32>, name: &str, cin: usize, cout: usize, slope: f32, rng: &mut R) -> Self {
        ConvBlock {
            conv: Conv::new(store, &format!("{name}.conv"), (cin, cout, 3), Some(slope), rng),
            norm: Norm::new(store, &format!("{name}.bn"), cout),
            slope,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, s: &ParamStore<T>, x: Var, mode: Mode) -> Result<Var> {
        let y = self.conv.forward(g, s, x)?;
        let y = self.norm.forward(g, s, y, mode)?;
        g.leaky_relu(y, T::lit(self.slope as f64))
    }
}
