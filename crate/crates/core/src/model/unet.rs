use rand::Rng;

use super::layers::{Conv, ConvBlock, Mode, UpConv};
use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamStore, Scalar, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Resolution levels including the bottleneck.
    pub levels: usize,
    /// Channels at the top level; doubled at every level below.
    pub base_width: usize,
    pub leaky_slope: f32,
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels < 2 {
            return Err(Error::Config(format!("U-net needs at least 2 levels, got {}", self.levels)));
        }
        if self.in_channels == 0 || self.out_channels == 0 || self.base_width == 0 {
            return Err(Error::Config("U-net channel counts must be positive".into()));
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return Err(Error::Config("leaky slope must lie in (0, 1)".into()));
        }
        Ok(())
    }

    pub fn width(&self, level: usize) -> usize {
        self.base_width << level
    }

    /// Spatial extents must be divisible by this.
    pub fn divisor(&self) -> usize {
        1 << (self.levels - 1)
    }
}

struct UpLevel {
    up: UpConv,
    block: ConvBlock,
}

/// One 3x3 conv + batchnorm + leaky-relu per level, 2x2 max pooling down,
/// stride-2 transposed convolution up, skip connections by concatenation,
/// and a linear 1x1 convolution to the output channels.
pub struct UNet {
    cfg: UNetConfig,
    down: Vec<ConvBlock>,
    up: Vec<UpLevel>,
    head: Conv,
}

impl UNet {
    pub fn new<R: Rng>(cfg: UNetConfig, store: &mut ParamStore<f32>, name: &str, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let slope = cfg.leaky_slope;
        let mut down = Vec::with_capacity(cfg.levels);
        let mut cin = cfg.in_channels;
        for l in 0..cfg.levels {
            down.push(ConvBlock::new(store, &format!("{name}.down{l}"), cin, cfg.width(l), slope, rng));
            cin = cfg.width(l);
        }
        let mut up = Vec::with_capacity(cfg.levels - 1);
        for l in (0..cfg.levels - 1).rev() {
            let w = cfg.width(l);
            up.push(UpLevel {
                up: UpConv::new(store, &format!("{name}.up{l}.upconv"), cfg.width(l + 1), w, slope, rng),
                block: ConvBlock::new(store, &format!("{name}.up{l}"), 2 * w, w, slope, rng),
            });
        }
        let head = Conv::new(store, &format!("{name}.out"), (cfg.width(0), cfg.out_channels, 1), None, rng);
        Ok(UNet { cfg, down, up, head })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.cfg
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, s: &ParamStore<T>, x: Var, mode: Mode) -> Result<Var> {
        const OP: &str = "unet";
        let shape = g.shape(x).to_vec();
        if shape.len() != 4 {
            return Err(Error::shape(OP, "rank", 4, shape.len()));
        }
        if shape[1] != self.cfg.in_channels {
            return Err(Error::shape(OP, "input channels", self.cfg.in_channels, shape[1]));
        }
        let d = self.cfg.divisor();
        for (axis, &e) in ["height", "width"].iter().zip(&shape[2..]) {
            if e % d != 0 {
                return Err(Error::invalid(OP, format!("{axis} {e} is not divisible by {d}")));
            }
        }
        let mut skips = Vec::with_capacity(self.cfg.levels - 1);
        let mut h = x;
        for (l, block) in self.down.iter().enumerate() {
            h = block.forward(g, s, h, mode)?;
            if l + 1 < self.cfg.levels {
                skips.push(h);
                h = g.max_pool2(h)?;
            }
        }
        for level in &self.up {
            let skip = skips.pop().expect("one skip per upsampling level");
            let u = level.up.forward(g, s, h)?;
            let cat = g.concat(&[skip, u], 1)?;
            h = level.block.forward(g, s, cat, mode)?;
        }
        self.head.forward(g, s, h)
    }
}
