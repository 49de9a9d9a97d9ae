//! Networks: the plain U-net baseline and the unified representation network.

mod checkpoint;
mod decoder;
mod layers;
mod unet;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use decoder::SynthesisDecoder;
pub use layers::{Conv, ConvBlock, Mode, Norm, UpConv};
pub use unet::{UNet, UNetConfig};

use crate::data::{modality_index, CLASSES};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{BnMode, Graph, ParamId, ParamStore, Scalar, Var};
use crate::urn::FusionF;

/// Hyperparameters shared by both architectures.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Canonical modality names the network accepts, in canonical order.
    pub modalities: Vec<String>,
    pub classes: usize,
    pub levels: usize,
    pub base_width: usize,
    pub leaky_slope: f32,
    /// Channels of the unified representation.
    pub rep_channels: usize,
    pub decoder_blocks: usize,
    pub fusion: FusionF,
    pub variance_weight: f32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            modalities: crate::data::MODALITIES.iter().map(|s| s.to_string()).collect(),
            classes: CLASSES,
            levels: 4,
            base_width: 16,
            leaky_slope: 0.2,
            rep_channels: 16,
            decoder_blocks: 2,
            fusion: FusionF::Identity,
            variance_weight: 1e-4,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.modalities.is_empty() {
            return Err(Error::Config("model needs at least one modality".into()));
        }
        let mut last = None;
        for m in &self.modalities {
            let i = modality_index(m).ok_or_else(|| Error::Config(format!("unknown modality {m:?}")))?;
            if last.is_some_and(|l| l >= i) {
                return Err(Error::Config("model modalities must be distinct and in canonical order".into()));
            }
            last = Some(i);
        }
        if self.classes < 2 {
            return Err(Error::Config("need at least two classes".into()));
        }
        if self.rep_channels == 0 {
            return Err(Error::Config("representation needs at least one channel".into()));
        }
        if !(self.variance_weight >= 0.0 && self.variance_weight.is_finite()) {
            return Err(Error::Config("variance weight must be a non-negative number".into()));
        }
        self.unet(1, 1).validate()
    }

    pub fn unet(&self, in_channels: usize, out_channels: usize) -> UNetConfig {
        UNetConfig {
            in_channels,
            out_channels,
            levels: self.levels,
            base_width: self.base_width,
            leaky_slope: self.leaky_slope,
        }
    }

    /// Position of a canonical modality name within this model's inputs.
    pub fn position(&self, name: &str) -> Option<usize> {
        self.modalities.iter().position(|m| m == name)
    }
}

/// Single U-net over all modalities stacked as channels.
pub struct BaselineModel {
    cfg: ModelConfig,
    pub store: ParamStore<f32>,
    net: UNet,
}

impl BaselineModel {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = rng::stream(seed, "init", 0, 0);
        let net = UNet::new(cfg.unet(cfg.modalities.len(), cfg.classes), &mut store, "seg", &mut rng)?;
        Ok(BaselineModel { cfg, store, net })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// `x` is `[N, M, H, W]` with missing modalities already zeroed.
    pub fn forward_with<T: Scalar>(&self, g: &mut Graph<T>, s: &ParamStore<T>, x: Var, mode: Mode) -> Result<Var> {
        self.net.forward(g, s, x, mode)
    }
}

/// Per-modality encoders, fusion into one representation, and decoders on it.
pub struct UrnModel {
    cfg: ModelConfig,
    pub store: ParamStore<f32>,
    encoders: Vec<UNet>,
    decoders: Vec<SynthesisDecoder>,
    head: UNet,
    encoder_probe: ParamId,
}

/// Parameter-free standardization of each `[sample, channel]` plane.
fn standardize<T: Scalar>(g: &mut Graph<T>, e: Var) -> Result<Var> {
    let shape = g.shape(e).to_vec();
    let planes = g.reshape(e, &[1, shape[0] * shape[1], shape[2], shape[3]])?;
    let z = g.batchnorm(planes, None, None, BnMode::Fixed)?;
    g.reshape(z, &shape)
}

impl UrnModel {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = rng::stream(seed, "init", 0, 0);
        let enc_cfg = cfg.unet(1, cfg.rep_channels);
        let encoders = cfg
            .modalities
            .iter()
            .map(|m| UNet::new(enc_cfg.clone(), &mut store, &format!("enc.{m}"), &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let decoders = cfg
            .modalities
            .iter()
            .map(|m| {
                SynthesisDecoder::new(
                    &mut store,
                    &format!("dec.{m}"),
                    cfg.rep_channels,
                    cfg.decoder_blocks,
                    cfg.leaky_slope,
                    &mut rng,
                )
            })
            .collect();
        let head = UNet::new(cfg.unet(cfg.rep_channels, cfg.classes), &mut store, "seg", &mut rng)?;
        let encoder_probe = store.ids().next().expect("encoders own parameters");
        Ok(UrnModel {
            cfg,
            store,
            encoders,
            decoders,
            head,
            encoder_probe,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn modality_count(&self) -> usize {
        self.cfg.modalities.len()
    }

    /// Frozen encoders stop receiving updates and run batchnorm on running statistics.
    pub fn freeze_encoders(&mut self) -> usize {
        self.store.freeze_prefix("enc.")
    }

    pub fn encoders_frozen<T: Scalar>(&self, s: &ParamStore<T>) -> bool {
        s.get(self.encoder_probe).frozen
    }

    /// Encoder output with every channel of every sample standardized to zero
    /// mean and unit variance over its pixels.
    pub fn encode_with<T: Scalar>(&self, g: &mut Graph<T>, s: &ParamStore<T>, i: usize, x: Var, mode: Mode) -> Result<Var> {
        let enc = self
            .encoders
            .get(i)
            .ok_or_else(|| Error::invalid("encode", format!("no encoder {i}")))?;
        let mode = if self.encoders_frozen(s) { Mode::Eval } else { mode };
        let e = enc.forward(g, s, x, mode)?;
        standardize(g, e)
    }

    pub fn synthesize_with<T: Scalar>(&self, g: &mut Graph<T>, s: &ParamStore<T>, i: usize, z: Var, mode: Mode) -> Result<Var> {
        self.decoders
            .get(i)
            .ok_or_else(|| Error::invalid("synthesize", format!("no decoder {i}")))?
            .forward(g, s, z, mode)
    }

    pub fn segment_with<T: Scalar>(&self, g: &mut Graph<T>, s: &ParamStore<T>, z: Var, mode: Mode) -> Result<Var> {
        self.head.forward(g, s, z, mode)
    }
}

pub enum Model {
    Baseline(BaselineModel),
    Urn(UrnModel),
}

impl Model {
    pub fn kind(&self) -> &'static str {
        match self {
            Model::Baseline(_) => "baseline",
            Model::Urn(_) => "urn",
        }
    }

    pub fn config(&self) -> &ModelConfig {
        match self {
            Model::Baseline(m) => m.config(),
            Model::Urn(m) => m.config(),
        }
    }

    pub fn store(&self) -> &ParamStore<f32> {
        match self {
            Model::Baseline(m) => &m.store,
            Model::Urn(m) => &m.store,
        }
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<f32> {
        match self {
            Model::Baseline(m) => &mut m.store,
            Model::Urn(m) => &mut m.store,
        }
    }
}
