use std::f64::consts::TAU;

use rand::Rng;

use super::{
    Cohort, DatasetManifest, PhantomSample, LABEL_BACKGROUND, LABEL_EDEMA, LABEL_ENHANCING,
    LABEL_NECROTIC,
};
use crate::error::{Error, Result};
use crate::rng::{self, Stream};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Tissue {
    Outside,
    Healthy,
    Csf,
    Edema,
    Necrotic,
    Enhancing,
}

/// Mean intensity of each tissue (rows: healthy, CSF, edema, necrotic,
/// enhancing) in each canonical modality (columns: F, T1, T1c, T2).
///
/// Edema is far brighter than healthy tissue only in F; T2 shows it at lower
/// contrast and confounds it with CSF. Enhancing tumor stands out only in T1c.
pub const CONTRAST: [[f64; 4]; 5] = [
    [1.00, 1.00, 1.00, 1.00],
    [0.25, 0.35, 0.35, 1.70],
    [2.20, 0.85, 0.90, 1.35],
    [1.30, 0.55, 0.60, 1.60],
    [1.50, 0.90, 2.30, 1.30],
];

const TEXTURE_GAIN: [f64; 4] = [0.10, 0.15, 0.15, -0.12];
const BIAS_GAIN: f64 = 0.12;
const NOISE_SIGMA: f64 = 0.12;

fn contrast(t: Tissue, modality: usize) -> f64 {
    let row = match t {
        Tissue::Outside => return 0.0,
        Tissue::Healthy => 0,
        Tissue::Csf => 1,
        Tissue::Edema => 2,
        Tissue::Necrotic => 3,
        Tissue::Enhancing => 4,
    };
    CONTRAST[row][modality]
}

/// Low-frequency field in roughly [-1, 1] built from a few random plane waves.
struct SmoothField {
    waves: Vec<(f64, f64, f64)>,
}

impl SmoothField {
    fn new(rng: &mut Stream, waves: usize, max_freq: f64) -> Self {
        SmoothField {
            waves: (0..waves)
                .map(|_| {
                    let angle = rng.gen_range(0.0..TAU);
                    let freq = rng.gen_range(0.5..max_freq) * std::f64::consts::PI;
                    let phase = rng.gen_range(0.0..TAU);
                    (freq * angle.cos(), freq * angle.sin(), phase)
                })
                .collect(),
        }
    }

    fn at(&self, u: f64, v: f64) -> f64 {
        let n = self.waves.len() as f64;
        self.waves
            .iter()
            .map(|&(fu, fv, p)| (fu * u + fv * v + p).cos())
            .sum::<f64>()
            / n
    }
}

/// An ellipse with a wobbly outline.
struct Blob {
    cu: f64,
    cv: f64,
    ru: f64,
    rv: f64,
    rot: f64,
    wobble: [(f64, f64); 2],
}

impl Blob {
    fn new(rng: &mut Stream, (cu, cv): (f64, f64), (ru, rv): (f64, f64), wobble: f64) -> Self {
        Blob {
            cu,
            cv,
            ru,
            rv,
            rot: rng.gen_range(0.0..TAU),
            wobble: [
                (rng.gen_range(0.0..wobble), rng.gen_range(0.0..TAU)),
                (rng.gen_range(0.0..wobble), rng.gen_range(0.0..TAU)),
            ],
        }
    }

    fn contains(&self, u: f64, v: f64) -> bool {
        let (du, dv) = (u - self.cu, v - self.cv);
        let (c, s) = (self.rot.cos(), self.rot.sin());
        let (a, b) = ((c * du + s * dv) / self.ru, (-s * du + c * dv) / self.rv);
        let rho = (a * a + b * b).sqrt();
        let phi = b.atan2(a);
        let edge = 1.0
            + self.wobble[0].0 * (3.0 * phi + self.wobble[0].1).sin()
            + self.wobble[1].0 * (5.0 * phi + self.wobble[1].1).sin();
        rho < edge
    }
}

struct Anatomy {
    brain: Blob,
    ventricles: [Blob; 2],
    edema: Option<Blob>,
    core: Option<Blob>,
    necrosis: Option<Blob>,
    texture: SmoothField,
}

impl Anatomy {
    fn sample(rng: &mut Stream, cohort: Cohort) -> Self {
        let (bu, bv) = (rng.gen_range(-0.05..0.05), rng.gen_range(-0.05..0.05));
        let (ru, rv) = (rng.gen_range(0.76..0.90), rng.gen_range(0.68..0.86));
        let brain = Blob::new(rng, (bu, bv), (ru, rv), 0.04);
        let vent = |rng: &mut Stream, side: f64| {
            let size = (rng.gen_range(0.06..0.09), rng.gen_range(0.13..0.19));
            Blob::new(rng, (bu + side * 0.13 * ru, bv - 0.05), size, 0.05)
        };
        let ventricles = [vent(rng, -1.0), vent(rng, 1.0)];
        let (edema, core, necrosis) = match cohort {
            Cohort::Healthy => (None, None, None),
            Cohort::Tumor => {
                let r = rng.gen_range(0.0..0.42);
                let a = rng.gen_range(0.0..TAU);
                let (tu, tv) = (bu + r * ru * a.cos(), bv + r * rv * a.sin());
                let re = (rng.gen_range(0.22..0.40), rng.gen_range(0.22..0.40));
                let edema = Blob::new(rng, (tu, tv), re, 0.12);
                let shrink = rng.gen_range(0.45..0.65);
                let off = (rng.gen_range(-0.03..0.03), rng.gen_range(-0.03..0.03));
                let core = Blob::new(rng, (tu + off.0, tv + off.1), (re.0 * shrink, re.1 * shrink), 0.08);
                let necrosis = if rng.gen_bool(0.75) {
                    let k = rng.gen_range(0.35..0.6);
                    Some(Blob::new(
                        rng,
                        (core.cu, core.cv),
                        (core.ru * k, core.rv * k),
                        0.05,
                    ))
                } else {
                    None
                };
                (Some(edema), Some(core), necrosis)
            }
        };
        let texture = SmoothField::new(rng, 4, 3.0);
        Anatomy {
            brain,
            ventricles,
            edema,
            core,
            necrosis,
            texture,
        }
    }

    fn tissue(&self, u: f64, v: f64) -> Tissue {
        if !self.brain.contains(u, v) {
            return Tissue::Outside;
        }
        let inside = |b: &Option<Blob>| b.as_ref().is_some_and(|b| b.contains(u, v));
        if inside(&self.necrosis) {
            Tissue::Necrotic
        } else if inside(&self.core) {
            Tissue::Enhancing
        } else if inside(&self.edema) {
            Tissue::Edema
        } else if self.ventricles.iter().any(|b| b.contains(u, v)) {
            Tissue::Csf
        } else {
            Tissue::Healthy
        }
    }
}

fn label_of(t: Tissue) -> u8 {
    match t {
        Tissue::Necrotic => LABEL_NECROTIC,
        Tissue::Edema => LABEL_EDEMA,
        Tissue::Enhancing => LABEL_ENHANCING,
        _ => LABEL_BACKGROUND,
    }
}

/// Renders subject `index` of the dataset; deterministic in `(seed, index)`.
pub fn generate_phantom(manifest: &DatasetManifest, index: usize) -> Result<PhantomSample> {
    if index >= manifest.samples {
        return Err(Error::invalid(
            "generate_phantom",
            format!("index {index} out of range for {} samples", manifest.samples),
        ));
    }
    let (h, w) = (manifest.height, manifest.width);
    let mut anatomy_rng = rng::stream(manifest.seed, "anatomy", index as u64, 0);
    let anatomy = Anatomy::sample(&mut anatomy_rng, manifest.cohort);

    let mut tissues = Vec::with_capacity(h * w);
    let mut coords = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let u = 2.0 * (x as f64 + 0.5) / w as f64 - 1.0;
            let v = 2.0 * (y as f64 + 0.5) / h as f64 - 1.0;
            tissues.push(anatomy.tissue(u, v));
            coords.push((u, v));
        }
    }
    let brain_mask: Vec<bool> = tissues.iter().map(|&t| t != Tissue::Outside).collect();
    let labels: Vec<u8> = tissues.iter().map(|&t| label_of(t)).collect();

    let mut images = Vec::with_capacity(manifest.modalities.len());
    for g in manifest.global_indices() {
        let mut bias_rng = rng::stream(manifest.seed, "bias", index as u64, g as u64);
        let bias = SmoothField::new(&mut bias_rng, 2, 1.5);
        let mut noise_rng = rng::stream(manifest.seed, "noise", index as u64, g as u64);
        let raw: Vec<f32> = tissues
            .iter()
            .zip(&coords)
            .map(|(&t, &(u, v))| {
                if t == Tissue::Outside {
                    return 0.0;
                }
                let mut val = contrast(t, g);
                if t == Tissue::Healthy {
                    val *= 1.0 + TEXTURE_GAIN[g] * anatomy.texture.at(u, v);
                }
                val *= 1.0 + BIAS_GAIN * bias.at(u, v);
                (val + NOISE_SIGMA * rng::normal(&mut noise_rng)) as f32
            })
            .collect();
        images.push(normalize_in_mask(&raw, &brain_mask)?);
    }
    Ok(PhantomSample {
        images,
        labels,
        brain_mask,
    })
}

/// Zero mean and unit variance inside the mask; zero outside.
pub fn normalize_in_mask(image: &[f32], mask: &[bool]) -> Result<Vec<f32>> {
    const OP: &str = "normalize_in_mask";
    if image.len() != mask.len() {
        return Err(Error::shape(OP, "mask length", image.len(), mask.len()));
    }
    let vals: Vec<f64> = image
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&v, _)| v as f64)
        .collect();
    if vals.is_empty() {
        return Err(Error::invalid(OP, "brain mask is empty"));
    }
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    if var <= 0.0 {
        return Err(Error::invalid(OP, "image is constant inside the mask"));
    }
    let inv = 1.0 / var.sqrt();
    Ok(image
        .iter()
        .zip(mask)
        .map(|(&v, &m)| if m { ((v as f64 - mean) * inv) as f32 } else { 0.0 })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::parse_modalities;

    fn brats(samples: usize) -> DatasetManifest {
        DatasetManifest::new("brats-toy", parse_modalities("F,T1,T1c,T2").unwrap(), samples, 32, 7).unwrap()
    }

    fn moments(img: &[f32], mask: &[bool]) -> (f64, f64) {
        let v: Vec<f64> = img.iter().zip(mask).filter(|(_, &m)| m).map(|(&x, _)| x as f64).collect();
        let m = v.iter().sum::<f64>() / v.len() as f64;
        (m, v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64)
    }

    #[test]
    fn two_point_standardization() {
        let out = normalize_in_mask(&[1.0, 3.0, 9.0], &[true, true, false]).unwrap();
        assert_eq!(out, vec![-1.0, 1.0, 0.0]);
    }

    #[test]
    fn standardization_is_idempotent() {
        let img = [0.3f32, -1.2, 2.5, 0.7, -0.1, 5.0];
        let mask = [true, true, true, true, true, false];
        let once = normalize_in_mask(&img, &mask).unwrap();
        let twice = normalize_in_mask(&once, &mask).unwrap();
        for (a, b) in once.iter().zip(&twice) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn normalization_errors() {
        assert!(normalize_in_mask(&[1.0, 2.0], &[false, false]).is_err());
        assert!(normalize_in_mask(&[4.0, 4.0, 1.0], &[true, true, false]).is_err());
    }

    #[test]
    fn generation_is_deterministic() {
        let m = brats(3);
        assert_eq!(generate_phantom(&m, 2).unwrap(), generate_phantom(&m, 2).unwrap());
        assert_ne!(generate_phantom(&m, 1).unwrap(), generate_phantom(&m, 2).unwrap());
        assert!(generate_phantom(&m, 3).is_err());
    }

    #[test]
    fn labels_lie_in_mask_and_images_are_standardized() {
        let m = brats(20);
        for i in 0..20 {
            let s = generate_phantom(&m, i).unwrap();
            for (l, &inside) in s.labels.iter().zip(&s.brain_mask) {
                assert!(inside || *l == LABEL_BACKGROUND);
            }
            for img in &s.images {
                let (mean, var) = moments(img, &s.brain_mask);
                assert!(mean.abs() < 1e-3 && (var - 1.0).abs() < 1e-3);
                assert!(img.iter().zip(&s.brain_mask).all(|(&v, &m)| m || v == 0.0));
            }
        }
    }

    #[test]
    fn healthy_cohort_has_only_background() {
        let m = DatasetManifest::new("hcp-toy", parse_modalities("T1,T2").unwrap(), 10, 32, 3).unwrap();
        for i in 0..10 {
            let s = generate_phantom(&m, i).unwrap();
            assert_eq!(s.images.len(), 2);
            assert!(s.labels.iter().all(|&l| l == LABEL_BACKGROUND));
        }
    }

    #[test]
    fn tumor_cohort_contains_lesions() {
        let m = brats(10);
        for i in 0..10 {
            let s = generate_phantom(&m, i).unwrap();
            assert!(s.labels.iter().any(|&l| l == LABEL_EDEMA));
            assert!(s.labels.iter().any(|&l| l == LABEL_ENHANCING));
        }
    }
}
