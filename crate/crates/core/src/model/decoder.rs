use rand::Rng;

use super::layers::{Conv, Mode, Norm};
use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamStore, Scalar, Var};

/// `leaky_relu(x + bn(conv(leaky_relu(bn(conv(x))))))`
pub struct ResidualBlock {
    conv1: Conv,
    norm1: Norm,
    conv2: Conv,
    norm2: Norm,
    slope: f32,
}

impl ResidualBlock {
    fn new<R: Rng>(store: &mut ParamStore<f32>, name: &str, c: usize, slope: f32, rng: &mut R) -> Self {
        ResidualBlock {
            conv1: Conv::new(store, &format!("{name}.conv1"), (c, c, 3), Some(slope), rng),
            norm1: Norm::new(store, &format!("{name}.bn1"), c),
            conv2: Conv::new(store, &format!("{name}.conv2"), (c, c, 3), Some(slope), rng),
            norm2: Norm::new(store, &format!("{name}.bn2"), c),
            slope,
        }
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<T>, s: &ParamStore<T>, x: Var, mode: Mode) -> Result<Var> {
        let slope = T::lit(self.slope as f64);
        let y = self.conv1.forward(g, s, x)?;
        let y = self.norm1.forward(g, s, y, mode)?;
        let y = g.leaky_relu(y, slope)?;
        let y = self.conv2.forward(g, s, y)?;
        let y = self.norm2.forward(g, s, y, mode)?;
        let y = g.add(x, y)?;
        g.leaky_relu(y, slope)
    }
}

/// Shallow image-synthesis decoder: residual blocks then a linear 1x1 convolution to one channel.
pub struct SynthesisDecoder {
    channels: usize,
    blocks: Vec<ResidualBlock>,
    head: Conv,
}

impl SynthesisDecoder {
    pub fn new<R: Rng>(
        store: &mut ParamStore<f32>,
        name: &str,
        channels: usize,
        blocks: usize,
        slope: f32,
        rng: &mut R,
    ) -> Self {
        SynthesisDecoder {
            channels,
            blocks: (0..blocks)
                .map(|b| ResidualBlock::new(store, &format!("{name}.res{b}"), channels, slope, rng))
                .collect(),
            head: Conv::new(store, &format!("{name}.out"), (channels, 1, 1), None, rng),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, s: &ParamStore<T>, x: Var, mode: Mode) -> Result<Var> {
        let c = g.shape(x).get(1).copied().unwrap_or(0);
        if c != self.channels {
            return Err(Error::shape("synthesis_decoder", "input channels", self.channels, c));
        }
        let mut h = x;
        for b in &self.blocks {
            h = b.forward(g, s, h, mode)?;
        }
        self.head.forward(g, s, h)
    }

    pub fn head(&self) -> &Conv {
        &self.head
    }
}
