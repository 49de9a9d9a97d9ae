use super::metrics::{dice, psnr_from_mse};
use super::report::{ReportRow, SweepReport};
use super::{make_batch, stacked_input};
use crate::data::{Dataset, RegionMap};
use crate::error::{Error, Result};
use crate::model::{Mode, Model, UrnModel};
use crate::moddrop::ModalityMask;
use crate::tensor::{Graph, Tensor, Var};
use crate::urn::{fuse_weighted, urn_forward, UrnRequest};

/// Inference result for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub labels: Vec<u8>,
    /// Synthesized images of the unavailable modalities (URN only).
    pub syntheses: Vec<(usize, Vec<f32>)>,
}

fn argmax_labels(logits: &Tensor<f32>) -> Vec<u8> {
    let (_, k, h, w) = logits.dims4("argmax").expect("4-d logits");
    let per = h * w;
    let d = logits.data();
    (0..d.len() / k)
        .map(|i| {
            let (n, p) = (i / per, i % per);
            let mut best = 0;
            for c in 1..k {
                if d[(n * k + c) * per + p] > d[(n * k + best) * per + p] {
                    best = c;
                }
            }
            best as u8
        })
        .collect()
}

fn check_mask(model: &Model, mask: &ModalityMask) -> Result<()> {
    let m = model.config().modalities.len();
    if mask.len() != m {
        return Err(Error::shape("predict", "mask length", m, mask.len()));
    }
    if mask.count() == 0 {
        return Err(Error::invalid("predict", "no available modality"));
    }
    Ok(())
}

/// Segments one sample using only the modalities `mask` marks available.
pub fn predict(model: &Model, ds: &Dataset, sample: usize, mask: &ModalityMask) -> Result<Prediction> {
    check_mask(model, mask)?;
    let batch = make_batch(ds, &[sample], &model.config().modalities);
    if let Some(i) = mask.indices().find(|&i| !batch.present[i]) {
        return Err(Error::invalid(
            "predict",
            format!("modality {} is not in dataset {}", model.config().modalities[i], ds.manifest.name),
        ));
    }
    let masks = std::slice::from_ref(mask);
    let mut g = Graph::new();
    match model {
        Model::Baseline(b) => {
            let x = g.input(stacked_input(&batch, masks));
            let logits = b.forward_with(&mut g, &b.store, x, Mode::Eval)?;
            Ok(Prediction {
                labels: argmax_labels(g.value(logits)),
                syntheses: Vec::new(),
            })
        }
        Model::Urn(u) => {
            let absent = (0..mask.len()).filter(|&j| !mask.is_available(j)).collect();
            let out = urn_forward(
                &mut g,
                u,
                &u.store,
                &batch.images,
                masks,
                &UrnRequest {
                    mode: Mode::Eval,
                    penalty: false,
                    synthesize: absent,
                    segment: true,
                },
            )?;
            Ok(Prediction {
                labels: argmax_labels(g.value(out.logits.expect("requested"))),
                syntheses: out
                    .syntheses
                    .into_iter()
                    .map(|(j, v)| (j, g.value(v).data().to_vec()))
                    .collect(),
            })
        }
    }
}

/// Mean per-sample Dice of each region for one availability mask.
pub fn evaluate(model: &Model, ds: &Dataset, samples: &[usize], mask: &ModalityMask, regions: &RegionMap) -> Result<Vec<(String, f64)>> {
    let mut sums = vec![0.0; regions.regions.len()];
    for &s in samples {
        let p = predict(model, ds, s, mask)?;
        for (acc, (_, classes)) in sums.iter_mut().zip(&regions.regions) {
            *acc += dice(&p.labels, &ds.samples[s].labels, classes)?;
        }
    }
    Ok(regions
        .regions
        .iter()
        .zip(sums)
        .map(|((name, _), sum)| (name.clone(), sum / samples.len() as f64))
        .collect())
}

/// `max - min` of each model modality's ground truth over `samples`.
pub fn data_ranges(ds: &Dataset, samples: &[usize], modalities: &[String]) -> Vec<Option<f64>> {
    modalities
        .iter()
        .map(|m| {
            let k = ds.manifest.modalities.iter().position(|d| d == m)?;
            let (mut lo, mut hi) = (f32::INFINITY, f32::NEG_INFINITY);
            for &s in samples {
                for &v in &ds.samples[s].images[k] {
                    lo = lo.min(v);
                    hi = hi.max(v);
                }
            }
            Some(hi as f64 - lo as f64)
        })
        .collect()
}

/// PSNR over `eval` of a predictor that always outputs the voxel-wise mean
/// image of `modality` over `train`.
pub fn mean_image_psnr(ds: &Dataset, train: &[usize], eval: &[usize], modality: &str) -> Result<f64> {
    let k = ds
        .manifest
        .modalities
        .iter()
        .position(|d| d == modality)
        .ok_or_else(|| Error::invalid("mean_image_psnr", format!("dataset lacks {modality}")))?;
    if train.is_empty() || eval.is_empty() {
        return Err(Error::invalid("mean_image_psnr", "empty sample list"));
    }
    let (h, w) = ds.hw();
    let mut mean = vec![0.0f64; h * w];
    for &s in train {
        for (m, &v) in mean.iter_mut().zip(&ds.samples[s].images[k]) {
            *m += v as f64;
        }
    }
    let mean: Vec<f32> = mean.iter().map(|&m| (m / train.len() as f64) as f32).collect();
    let range = data_ranges(ds, eval, &[modality.to_string()])[0].expect("present");
    let mut sq = 0.0;
    for &s in eval {
        sq += super::mse(&mean, &ds.samples[s].images[k])? * (h * w) as f64;
    }
    psnr_from_mse(sq / (eval.len() * h * w) as f64, range)
}

struct PatternAcc {
    dice: Vec<f64>,
    sq_err: Vec<f64>,
}

/// Encodings of every modality of one sample, computed once and reused for all patterns.
fn encode_all(g: &mut Graph<f32>, u: &UrnModel, ds: &Dataset, sample: usize) -> Result<Vec<Var>> {
    let batch = make_batch(ds, &[sample], &u.config().modalities);
    (0..batch.images.len())
        .map(|i| {
            let x = g.input(batch.images[i].clone());
            u.encode_with(g, &u.store, i, x, Mode::Eval)
        })
        .collect()
}

/// Evaluates every nonempty availability pattern on `samples`: mean Dice per
/// region, and for the URN the pooled PSNR of each unavailable modality.
pub fn sweep(model: &Model, ds: &Dataset, samples: &[usize], regions: &RegionMap) -> Result<SweepReport> {
    let modalities = model.config().modalities.clone();
    let m = modalities.len();
    if let Some(missing) = modalities.iter().find(|x| !ds.manifest.modalities.contains(x)) {
        return Err(Error::Config(format!("dataset {} lacks modality {missing}", ds.manifest.name)));
    }
    if samples.is_empty() {
        return Err(Error::Config("sweep needs at least one sample".into()));
    }
    let patterns = ModalityMask::all_nonempty(m);
    let mut acc: Vec<PatternAcc> = patterns
        .iter()
        .map(|_| PatternAcc {
            dice: vec![0.0; regions.regions.len()],
            sq_err: vec![0.0; m],
        })
        .collect();
    for &s in samples {
        let gt = &ds.samples[s];
        match model {
            Model::Baseline(_) => {
                for (p, mask) in patterns.iter().enumerate() {
                    let pred = predict(model, ds, s, mask)?;
                    for (r, (_, classes)) in regions.regions.iter().enumerate() {
                        acc[p].dice[r] += dice(&pred.labels, &gt.labels, classes)?;
                    }
                }
            }
            Model::Urn(u) => {
                let mut g = Graph::new();
                let enc = encode_all(&mut g, u, ds, s)?;
                for (p, mask) in patterns.iter().enumerate() {
                    let w = 1.0 / mask.count() as f32;
                    let inputs: Vec<(Var, Vec<f32>)> = mask.indices().map(|i| (enc[i], vec![w])).collect();
                    let z = fuse_weighted(&mut g, u.config().fusion, &inputs)?;
                    let logits = u.segment_with(&mut g, &u.store, z, Mode::Eval)?;
                    let labels = argmax_labels(g.value(logits));
                    for (r, (_, classes)) in regions.regions.iter().enumerate() {
                        acc[p].dice[r] += dice(&labels, &gt.labels, classes)?;
                    }
                    for j in (0..m).filter(|&j| !mask.is_available(j)) {
                        let synth = u.synthesize_with(&mut g, &u.store, j, z, Mode::Eval)?;
                        let k = ds.manifest.modalities.iter().position(|d| *d == modalities[j]).expect("checked");
                        let n = gt.images[k].len() as f64;
                        acc[p].sq_err[j] += super::mse(g.value(synth).data(), &gt.images[k])? * n;
                    }
                }
            }
        }
    }
    let ranges = data_ranges(ds, samples, &modalities);
    let voxels = (samples.len() * ds.hw().0 * ds.hw().1) as f64;
    let mut rows = Vec::new();
    for (mask, a) in patterns.iter().zip(acc) {
        let pattern = mask.pattern();
        for ((name, _), sum) in regions.regions.iter().zip(&a.dice) {
            rows.push(ReportRow {
                pattern: pattern.clone(),
                key: name.clone(),
                metric: "dice".into(),
                value: sum / samples.len() as f64,
            });
        }
        if matches!(model, Model::Urn(_)) {
            for j in (0..m).filter(|&j| !mask.is_available(j)) {
                rows.push(ReportRow {
                    pattern: pattern.clone(),
                    key: modalities[j].clone(),
                    metric: "psnr".into(),
                    value: psnr_from_mse(a.sq_err[j] / voxels, ranges[j].expect("checked"))?,
                });
            }
        }
    }
    Ok(SweepReport { rows })
}
