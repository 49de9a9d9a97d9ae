//! Training loops, evaluation metrics and the modality-combination sweep.

mod eval;
mod metrics;
mod plot;
mod report;

pub use eval::{data_ranges, evaluate, mean_image_psnr, predict, sweep, Prediction};
pub use metrics::{dice, mse, psnr, psnr_from_mse, PSNR_CAP};
pub use plot::render_svg;
pub use report::{ReportRow, SweepReport, CSV_HEADER};

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{BaselineModel, Mode, Model, ModelConfig, UrnModel};
use crate::moddrop::{DropConfig, ModalityMask};
use crate::rng;
use crate::tensor::{Adam, Graph, Tensor, Var};
use crate::urn::{fuse_and_decode, urn_forward, UrnRequest};

pub const BN_MOMENTUM: f32 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Scenario {
    Baseline,
    BaselineMd,
    UrnMd,
    UrnMdPretrained,
}

impl Scenario {
    pub const ALL: [Scenario; 4] = [
        Scenario::Baseline,
        Scenario::BaselineMd,
        Scenario::UrnMd,
        Scenario::UrnMdPretrained,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::Baseline => "baseline",
            Scenario::BaselineMd => "baseline-md",
            Scenario::UrnMd => "urn-md",
            Scenario::UrnMdPretrained => "urn-md-pretrained",
        }
    }

    pub fn is_urn(self) -> bool {
        matches!(self, Scenario::UrnMd | Scenario::UrnMdPretrained)
    }

    pub fn uses_dropout(self) -> bool {
        self != Scenario::Baseline
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scenario::ALL
            .into_iter()
            .find(|sc| sc.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown scenario {s:?} (expected baseline, baseline-md, urn-md or urn-md-pretrained)"
                ))
            })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub scenario: Scenario,
    pub batch_size: usize,
    pub lr_seg: f64,
    pub lr_pre: f64,
    pub theta_seg: f64,
    pub theta_pre: f64,
    pub epochs_seg: usize,
    pub pretrain_max_epochs: usize,
    /// Pre-training stops once the validation loss has failed to improve by
    /// `pretrain_tolerance` (relative) for this many consecutive epochs.
    pub pretrain_patience: usize,
    pub pretrain_tolerance: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            scenario: Scenario::UrnMd,
            batch_size: 4,
            lr_seg: 1e-4,
            lr_pre: 3e-5,
            theta_seg: 0.5,
            theta_pre: 0.8,
            epochs_seg: 50,
            pretrain_max_epochs: 200,
            pretrain_patience: 5,
            pretrain_tolerance: 0.005,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        for (name, lr) in [("lr_seg", self.lr_seg), ("lr_pre", self.lr_pre)] {
            if !(lr >= 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!("{name} must be a non-negative number")));
            }
        }
        for (name, t) in [("theta_seg", self.theta_seg), ("theta_pre", self.theta_pre)] {
            if !(t > 0.0 && t < 1.0) {
                return Err(Error::Config(format!("{name} must lie in (0, 1)")));
            }
        }
        if self.pretrain_patience == 0 || !(self.pretrain_tolerance >= 0.0) {
            return Err(Error::Config("pre-training stopping rule needs patience >= 1 and tolerance >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Pretrain,
    Segment,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Segment => "segment",
        }
    }
}

/// One entry of the loss trace: a training batch or an epoch's validation loss.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub stage: Stage,
    pub epoch: usize,
    pub step: usize,
    pub validation: bool,
    pub loss: f64,
}

pub fn trace_csv(rows: &[TraceRow]) -> String {
    let mut out = String::from("stage,epoch,step,split,loss\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.stage.name(),
            r.epoch,
            r.step,
            if r.validation { "val" } else { "train" },
            r.loss
        ));
    }
    out
}

/// Images of a set of samples laid out per model modality.
pub(crate) struct Batch {
    /// `[N, 1, H, W]` per model modality; zeros where the dataset lacks it.
    pub images: Vec<Tensor<f32>>,
    /// Whether each model modality exists in the source dataset.
    pub present: Vec<bool>,
    pub labels: Vec<u8>,
    pub n: usize,
    pub hw: (usize, usize),
}

pub(crate) fn make_batch(ds: &Dataset, samples: &[usize], modalities: &[String]) -> Batch {
    let (h, w) = ds.hw();
    let n = samples.len();
    let local: Vec<Option<usize>> = modalities
        .iter()
        .map(|m| ds.manifest.modalities.iter().position(|d| d == m))
        .collect();
    let images = local
        .iter()
        .map(|&l| {
            let mut data = Vec::with_capacity(n * h * w);
            for &s in samples {
                match l {
                    Some(k) => data.extend_from_slice(&ds.samples[s].images[k]),
                    None => data.resize(data.len() + h * w, 0.0),
                }
            }
            Tensor::new([n, 1, h, w], data).expect("sizes agree")
        })
        .collect();
    let labels = samples.iter().flat_map(|&s| ds.samples[s].labels.iter().copied()).collect();
    Batch {
        images,
        present: local.iter().map(Option::is_some).collect(),
        labels,
        n,
        hw: (h, w),
    }
}

/// Stacks modalities as channels, zeroing unavailable ones: `[N, M, H, W]`.
pub(crate) fn stacked_input(batch: &Batch, masks: &[ModalityMask]) -> Tensor<f32> {
    let m = batch.images.len();
    let per = batch.hw.0 * batch.hw.1;
    let mut data = vec![0.0; batch.n * m * per];
    for s in 0..batch.n {
        for c in 0..m {
            if masks[s].is_available(c) && batch.present[c] {
                data[(s * m + c) * per..(s * m + c + 1) * per]
                    .copy_from_slice(&batch.images[c].data()[s * per..(s + 1) * per]);
            }
        }
    }
    Tensor::new([batch.n, m, batch.hw.0, batch.hw.1], data).expect("sizes agree")
}

/// Draws a mask over the dataset's own modalities and lifts it to the model's.
fn sample_mask(drop: Option<&DropConfig>, present: &[bool], rng: &mut rng::Stream) -> ModalityMask {
    let local = match drop {
        Some(d) => d.sample_mask(rng),
        None => ModalityMask::all(present.iter().filter(|&&p| p).count()),
    };
    let mut it = local.available().iter();
    ModalityMask::new(present.iter().map(|&p| p && *it.next().unwrap()).collect())
}

fn batch_masks(drop: Option<&DropConfig>, present: &[bool], batch_seed: u64, samples: &[usize]) -> Vec<ModalityMask> {
    samples
        .iter()
        .map(|&s| sample_mask(drop, present, &mut rng::stream(batch_seed, "mask", s as u64, 0)))
        .collect()
}

fn epoch_batches(samples: &[usize], batch_size: usize, seed: u64, label: &str, epoch: usize) -> Vec<Vec<usize>> {
    let mut order = samples.to_vec();
    order.shuffle(&mut rng::stream(seed, label, epoch as u64, 0));
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

fn diverged(e: Error, step: usize, lr: f64, batch_seed: u64) -> Error {
    match e {
        Error::NonFinite { .. } => Error::Diverged {
            step,
            lr: lr as f32,
            batch_seed,
            loss: f32::NAN,
        },
        other => other,
    }
}

fn check_loss(loss: f64, step: usize, lr: f64, batch_seed: u64) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged {
            step,
            lr: lr as f32,
            batch_seed,
            loss: loss as f32,
        })
    }
}

/// Segmentation loss of one batch; for the URN the variance penalty is added
/// unless the encoders are frozen.
fn segmentation_loss(g: &mut Graph<f32>, model: &Model, batch: &Batch, masks: &[ModalityMask], mode: Mode) -> Result<Var> {
    match model {
        Model::Baseline(b) => {
            let x = g.input(stacked_input(batch, masks));
            let logits = b.forward_with(g, &b.store, x, mode)?;
            g.softmax_cross_entropy(logits, &batch.labels)
        }
        Model::Urn(u) => {
            let weight = u.config().variance_weight;
            let penalty = weight > 0.0 && !u.encoders_frozen(&u.store) && masks.iter().all(|m| m.count() >= 2);
            let out = urn_forward(
                g,
                u,
                &u.store,
                &batch.images,
                masks,
                &UrnRequest {
                    mode,
                    penalty,
                    synthesize: Vec::new(),
                    segment: true,
                },
            )?;
            let ce = g.softmax_cross_entropy(out.logits.expect("requested"), &batch.labels)?;
            match out.variance_penalty {
                Some(p) => {
                    let p = g.mul_scalar(p, weight)?;
                    g.add(ce, p)
                }
                None => Ok(ce),
            }
        }
    }
}

/// Encodings of frozen encoders, computed once per training sample.
struct EncodingCache {
    /// `planes[modality][row]` is one `[C, H, W]` encoding.
    planes: Vec<Vec<Vec<f32>>>,
    row: HashMap<usize, usize>,
    shape: [usize; 3],
}

impl EncodingCache {
    fn build(model: &UrnModel, ds: &Dataset, samples: &[usize]) -> Result<Self> {
        let modalities = &model.config().modalities;
        let mut planes = vec![Vec::with_capacity(samples.len()); modalities.len()];
        let mut shape = [0; 3];
        for chunk in samples.chunks(16) {
            let batch = make_batch(ds, chunk, modalities);
            for (i, images) in batch.images.iter().enumerate() {
                let mut g = Graph::new();
                let x = g.input(images.clone());
                let e = model.encode_with(&mut g, &model.store, i, x, Mode::Eval)?;
                let s = g.shape(e);
                shape = [s[1], s[2], s[3]];
                planes[i].extend(g.value(e).data().chunks(s[1] * s[2] * s[3]).map(<[f32]>::to_vec));
            }
        }
        let row = samples.iter().enumerate().map(|(r, &s)| (s, r)).collect();
        Ok(EncodingCache { planes, row, shape })
    }

    fn loss(&self, g: &mut Graph<f32>, model: &UrnModel, samples: &[usize], labels: &[u8], masks: &[ModalityMask]) -> Result<Var> {
        let n = samples.len();
        let [c, h, w] = self.shape;
        let per = c * h * w;
        let contributing: Vec<usize> = masks.iter().map(ModalityMask::count).collect();
        let mut encoded = Vec::new();
        for (i, planes) in self.planes.iter().enumerate() {
            if masks.iter().all(|m| !m.is_available(i)) {
                continue;
            }
            let mut data = vec![0.0; n * per];
            let mut weights = vec![0.0; n];
            for (s, &sample) in samples.iter().enumerate() {
                if masks[s].is_available(i) {
                    data[s * per..(s + 1) * per].copy_from_slice(&planes[self.row[&sample]]);
                    weights[s] = 1.0 / contributing[s] as f32;
                }
            }
            encoded.push((g.input(Tensor::new([n, c, h, w], data)?), weights));
        }
        let req = UrnRequest {
            mode: Mode::Train,
            penalty: false,
            synthesize: Vec::new(),
            segment: true,
        };
        let out = fuse_and_decode(g, model, &model.store, &encoded, contributing, &req)?;
        g.softmax_cross_entropy(out.logits.expect("requested"), labels)
    }
}

fn segmentation_dropout(scenario: Scenario, theta: f64, m: usize) -> Result<Option<DropConfig>> {
    Ok(match scenario {
        Scenario::Baseline => None,
        Scenario::BaselineMd => Some(DropConfig::widest(theta, 1, m)?),
        Scenario::UrnMd | Scenario::UrnMdPretrained => Some(DropConfig::widest(theta, 2, m)?),
    })
}

/// Trains the segmentation path on `train` samples of `ds`, appending to `trace`.
pub fn train_segmentation(
    model: &mut Model,
    ds: &Dataset,
    train: &[usize],
    cfg: &TrainConfig,
    trace: &mut Vec<TraceRow>,
) -> Result<()> {
    cfg.validate()?;
    let modalities = model.config().modalities.clone();
    let probe = make_batch(ds, &[], &modalities);
    if let Some(missing) = modalities.iter().zip(&probe.present).find(|(_, &p)| !p) {
        return Err(Error::Config(format!("dataset {} lacks modality {}", ds.manifest.name, missing.0)));
    }
    let drop = segmentation_dropout(cfg.scenario, cfg.theta_seg, modalities.len())?;
    let adam = Adam::new(cfg.lr_seg);
    let cache = match &*model {
        Model::Urn(u) if u.encoders_frozen(&u.store) && cfg.epochs_seg > 0 => Some(EncodingCache::build(u, ds, train)?),
        _ => None,
    };
    let mut step = 0;
    for epoch in 0..cfg.epochs_seg {
        for (b, samples) in epoch_batches(train, cfg.batch_size, cfg.seed, "segment-order", epoch)
            .into_iter()
            .enumerate()
        {
            let batch_seed = rng::derive(cfg.seed, "segment-batch", epoch as u64, b as u64);
            let batch = make_batch(ds, &samples, &modalities);
            let masks = batch_masks(drop.as_ref(), &batch.present, batch_seed, &samples);
            let mut g = Graph::new();
            let loss = match (&cache, &*model) {
                (Some(c), Model::Urn(u)) => c.loss(&mut g, u, &samples, &batch.labels, &masks),
                _ => segmentation_loss(&mut g, model, &batch, &masks, Mode::Train),
            }
            .map_err(|e| diverged(e, step, cfg.lr_seg, batch_seed))?;
            let value = g.value(loss).item() as f64;
            check_loss(value, step, cfg.lr_seg, batch_seed)?;
            let grads = g.backward(loss)?;
            let store = model.store_mut();
            adam.step(store, &grads);
            store.apply_stat_updates(g.take_stat_updates(), BN_MOMENTUM);
            trace.push(TraceRow {
                stage: Stage::Segment,
                epoch,
                step,
                validation: false,
                loss: value,
            });
            step += 1;
        }
    }
    Ok(())
}

/// Training and validation samples of one pre-training dataset.
pub struct PretrainSet<'a> {
    pub data: &'a Dataset,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

impl<'a> PretrainSet<'a> {
    /// Uses the dataset's own train/validation split.
    pub fn split(data: &'a Dataset) -> Self {
        let (train, val) = data.manifest.split();
        PretrainSet { data, train, val }
    }
}

/// Synthesis loss of one batch: the per-voxel MSE of every modality the
/// dataset provides (dropped ones included) plus the weighted variance penalty.
fn synthesis_loss(g: &mut Graph<f32>, model: &UrnModel, batch: &Batch, masks: &[ModalityMask], mode: Mode) -> Result<Var> {
    let weight = model.config().variance_weight;
    let targets: Vec<usize> = (0..batch.present.len()).filter(|&j| batch.present[j]).collect();
    let out = urn_forward(
        g,
        model,
        &model.store,
        &batch.images,
        masks,
        &UrnRequest {
            mode,
            penalty: weight > 0.0,
            synthesize: targets,
            segment: false,
        },
    )?;
    let mut total: Option<Var> = None;
    for (j, synth) in out.syntheses {
        let gt = g.input(batch.images[j].clone());
        let d = g.sub(synth, gt)?;
        let sq = g.square(d)?;
        let term = g.mean_all(sq)?;
        total = Some(match total {
            Some(t) => g.add(t, term)?,
            None => term,
        });
    }
    let mut total = total.expect("every dataset provides at least two modalities");
    if let Some(p) = out.variance_penalty {
        let p = g.mul_scalar(p, weight)?;
        total = g.add(total, p)?;
    }
    Ok(total)
}

/// Interleaves per-dataset batch lists so each dataset's batches are spread
/// evenly through the epoch, in proportion to its size.
fn interleave(lists: Vec<Vec<Vec<usize>>>) -> Vec<(usize, Vec<usize>)> {
    let mut keyed = Vec::new();
    for (d, list) in lists.into_iter().enumerate() {
        let len = list.len() as f64;
        for (k, b) in list.into_iter().enumerate() {
            keyed.push(((k as f64 + 0.5) / len, d, b));
        }
    }
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    keyed.into_iter().map(|(_, d, b)| (d, b)).collect()
}

fn pretrain_dropout(theta: f64, ds: &Dataset) -> Result<DropConfig> {
    let m = ds.manifest.modalities.len();
    if m < 2 {
        return Err(Error::Config(format!(
            "pre-training dataset {} has {m} modality; at least two are required",
            ds.manifest.name
        )));
    }
    DropConfig::widest(theta, 2, m)
}

/// Mean synthesis loss over the validation samples with fixed masks.
fn pretrain_validation(model: &UrnModel, sets: &[PretrainSet], drops: &[DropConfig], cfg: &TrainConfig) -> Result<f64> {
    let modalities = &model.config().modalities;
    let (mut sum, mut count) = (0.0, 0usize);
    for (d, set) in sets.iter().enumerate() {
        let val_seed = rng::derive(cfg.seed, "pretrain-val", d as u64, 0);
        for samples in set.val.chunks(cfg.batch_size) {
            let batch = make_batch(set.data, samples, modalities);
            let masks = batch_masks(Some(&drops[d]), &batch.present, val_seed, samples);
            let mut g = Graph::new();
            let loss = synthesis_loss(&mut g, model, &batch, &masks, Mode::Eval)?;
            sum += g.value(loss).item() as f64 * samples.len() as f64;
            count += samples.len();
        }
    }
    if count == 0 {
        return Err(Error::Config("pre-training needs validation samples".into()));
    }
    Ok(sum / count as f64)
}

/// Unsupervised synthesis pre-training of encoders and decoders, pooled over
/// datasets with possibly different modality subsets. Returns epochs run.
pub fn pretrain_synthesis(model: &mut UrnModel, sets: &[PretrainSet], cfg: &TrainConfig, trace: &mut Vec<TraceRow>) -> Result<usize> {
    cfg.validate()?;
    if sets.is_empty() {
        return Err(Error::Config("pre-training needs at least one dataset".into()));
    }
    let modalities = model.config().modalities.clone();
    for set in sets {
        if let Some(m) = set.data.manifest.modalities.iter().find(|m| !modalities.contains(m)) {
            return Err(Error::Config(format!("model has no encoder for modality {m} of {}", set.data.manifest.name)));
        }
    }
    let drops = sets
        .iter()
        .map(|s| pretrain_dropout(cfg.theta_pre, s.data))
        .collect::<Result<Vec<_>>>()?;
    let adam = Adam::new(cfg.lr_pre);
    let mut best = f64::INFINITY;
    let mut stale = 0;
    let mut step = 0;
    let mut epochs = 0;
    for epoch in 0..cfg.pretrain_max_epochs {
        let lists = sets
            .iter()
            .enumerate()
            .map(|(d, s)| epoch_batches(&s.train, cfg.batch_size, cfg.seed, &format!("pretrain-order-{d}"), epoch))
            .collect();
        for (b, (d, samples)) in interleave(lists).into_iter().enumerate() {
            let batch_seed = rng::derive(cfg.seed, "pretrain-batch", epoch as u64, b as u64);
            let batch = make_batch(sets[d].data, &samples, &modalities);
            let masks = batch_masks(Some(&drops[d]), &batch.present, batch_seed, &samples);
            let mut g = Graph::new();
            let loss = synthesis_loss(&mut g, model, &batch, &masks, Mode::Train)
                .map_err(|e| diverged(e, step, cfg.lr_pre, batch_seed))?;
            let value = g.value(loss).item() as f64;
            check_loss(value, step, cfg.lr_pre, batch_seed)?;
            let grads = g.backward(loss)?;
            adam.step(&mut model.store, &grads);
            model.store.apply_stat_updates(g.take_stat_updates(), BN_MOMENTUM);
            trace.push(TraceRow {
                stage: Stage::Pretrain,
                epoch,
                step,
                validation: false,
                loss: value,
            });
            step += 1;
        }
        let val = pretrain_validation(model, sets, &drops, cfg)?;
        trace.push(TraceRow {
            stage: Stage::Pretrain,
            epoch,
            step,
            validation: true,
            loss: val,
        });
        epochs = epoch + 1;
        if best.is_infinite() || val < best * (1.0 - cfg.pretrain_tolerance) {
            best = val;
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.pretrain_patience {
                break;
            }
        }
    }
    Ok(epochs)
}

pub struct TrainedModel {
    pub model: Model,
    pub trace: Vec<TraceRow>,
    pub pretrain_epochs: usize,
}

/// Builds the scenario's network and runs its full training schedule on the
/// training split of `seg`.
pub fn train_scenario(cfg: &TrainConfig, model_cfg: &ModelConfig, seg: &Dataset, pretrain: &[&Dataset]) -> Result<TrainedModel> {
    cfg.validate()?;
    let (train, _) = seg.manifest.split();
    let mut model_cfg = model_cfg.clone();
    model_cfg.modalities = seg.manifest.modalities.clone();
    let mut trace = Vec::new();
    let mut pretrain_epochs = 0;
    let mut model = match cfg.scenario {
        Scenario::Baseline | Scenario::BaselineMd => Model::Baseline(BaselineModel::new(model_cfg, cfg.seed)?),
        Scenario::UrnMd => Model::Urn(UrnModel::new(model_cfg, cfg.seed)?),
        Scenario::UrnMdPretrained => {
            if pretrain.is_empty() {
                return Err(Error::Config("urn-md-pretrained needs pre-training data".into()));
            }
            let mut urn = UrnModel::new(model_cfg, cfg.seed)?;
            let sets: Vec<PretrainSet> = pretrain.iter().map(|d| PretrainSet::split(d)).collect();
            pretrain_epochs = pretrain_synthesis(&mut urn, &sets, cfg, &mut trace)?;
            urn.freeze_encoders();
            Model::Urn(urn)
        }
    };
    train_segmentation(&mut model, seg, &train, cfg, &mut trace)?;
    Ok(TrainedModel {
        model,
        trace,
        pretrain_epochs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::DatasetManifest;

    fn tiny_cfg(variance_weight: f32) -> ModelConfig {
        ModelConfig {
            levels: 2,
            base_width: 4,
            rep_channels: 4,
            decoder_blocks: 1,
            variance_weight,
            ..ModelConfig::default()
        }
    }

    fn dataset(name: &str, modalities: &[&str], samples: usize) -> Dataset {
        let mods = modalities.iter().map(|s| s.to_string()).collect();
        Dataset::generate(DatasetManifest::new(name, mods, samples, 8, 3).unwrap()).unwrap()
    }

    fn encoder_grad(weight: f32) -> Vec<f32> {
        let ds = dataset("b", &["F", "T1", "T1c", "T2"], 4);
        let model = UrnModel::new(tiny_cfg(weight), 5).unwrap();
        let batch = make_batch(&ds, &[0, 1, 2, 3], &model.config().modalities);
        let masks = vec![ModalityMask::new(vec![true, true, false, true]); 4];
        let mut g = Graph::new();
        let loss = synthesis_loss(&mut g, &model, &batch, &masks, Mode::Train).unwrap();
        let grads = g.backward(loss).unwrap();
        let id = model.store.find("enc.T1.down0.conv.weight").unwrap();
        grads.param(id).unwrap().to_vec()
    }

    #[test]
    fn variance_penalty_reaches_encoder_gradients() {
        let with = encoder_grad(1e-4);
        let without = encoder_grad(0.0);
        let diff: f32 = with.iter().zip(&without).map(|(a, b)| (a - b).abs()).sum();
        assert!(diff > 0.0);
    }

    #[test]
    fn pooled_batches_only_score_present_modalities() {
        let hcp = dataset("h", &["T1", "T2"], 4);
        let model = UrnModel::new(tiny_cfg(1e-4), 5).unwrap();
        let batch = make_batch(&hcp, &[0, 1, 2, 3], &model.config().modalities);
        assert_eq!(batch.present, vec![false, true, false, true]);
        let drop = pretrain_dropout(0.8, &hcp).unwrap();
        for seed in 0..20 {
            let masks = batch_masks(Some(&drop), &batch.present, seed, &[0, 1, 2, 3]);
            for m in &masks {
                assert!(!m.is_available(0) && !m.is_available(2));
                assert_eq!(m.count(), 2);
            }
            let mut g = Graph::new();
            let loss = synthesis_loss(&mut g, &model, &batch, &masks, Mode::Train).unwrap();
            let grads = g.backward(loss).unwrap();
            for absent in ["F", "T1c"] {
                for p in model.store.params() {
                    if p.name.starts_with(&format!("dec.{absent}.")) || p.name.starts_with(&format!("enc.{absent}.")) {
                        assert!(grads.param(model.store.find(&p.name).unwrap()).is_none(), "{}", p.name);
                    }
                }
            }
        }
    }

    #[test]
    fn cached_encodings_give_the_same_loss() {
        let ds = dataset("b", &["F", "T1", "T1c", "T2"], 6);
        let mut model = UrnModel::new(tiny_cfg(1e-4), 5).unwrap();
        model.freeze_encoders();
        let samples = [4, 1, 3];
        let cache = EncodingCache::build(&model, &ds, &[0, 1, 2, 3, 4, 5]).unwrap();
        let batch = make_batch(&ds, &samples, &model.config().modalities);
        let drop = DropConfig::widest(0.5, 2, 4).unwrap();
        let wrapped = Model::Urn(model);
        let Model::Urn(model) = &wrapped else { unreachable!() };
        for seed in 0..5 {
            let masks = batch_masks(Some(&drop), &batch.present, seed, &samples);
            let mut g = Graph::new();
            let a = segmentation_loss(&mut g, &wrapped, &batch, &masks, Mode::Train).unwrap();
            let mut h = Graph::new();
            let b = cache.loss(&mut h, model, &samples, &batch.labels, &masks).unwrap();
            let (a, b) = (g.value(a).item(), h.value(b).item());
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn single_modality_datasets_cannot_pretrain() {
        let one = dataset("t", &["T1"], 4);
        assert!(pretrain_dropout(0.8, &one).is_err());
    }

    #[test]
    fn interleave_spreads_batches_proportionally() {
        let lists = vec![vec![vec![0]; 4], vec![vec![1]; 2]];
        let order: Vec<usize> = interleave(lists).into_iter().map(|(d, _)| d).collect();
        assert_eq!(order, vec![0, 1, 0, 0, 1, 0]);
    }
}
