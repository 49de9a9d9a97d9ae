//! Synthetic multimodal phantoms and their on-disk format.

pub(crate) mod io;
mod phantom;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub use io::{load_dataset, save_dataset, DATASET_FORMAT, DATASET_VERSION};
pub use phantom::{generate_phantom, normalize_in_mask, Tissue, CONTRAST};

/// Canonical modality order: FLAIR, T1, contrast-enhanced T1, T2 analogs.
pub const MODALITIES: [&str; 4] = ["F", "T1", "T1c", "T2"];

/// Number of label classes: background, necrotic core, edema, enhancing tumor.
pub const CLASSES: usize = 4;

pub const LABEL_BACKGROUND: u8 = 0;
pub const LABEL_NECROTIC: u8 = 1;
pub const LABEL_EDEMA: u8 = 2;
pub const LABEL_ENHANCING: u8 = 3;

pub fn modality_index(name: &str) -> Option<usize> {
    MODALITIES.iter().position(|m| m.eq_ignore_ascii_case(name))
}

/// Parses a comma-separated modality list into canonical order.
pub fn parse_modalities(list: &str) -> Result<Vec<String>> {
    let mut idx = Vec::new();
    for part in list.split(',').map(str::trim) {
        let i = modality_index(part)
            .ok_or_else(|| Error::Config(format!("unknown modality {part:?} (known: {})", MODALITIES.join(","))))?;
        if idx.contains(&i) {
            return Err(Error::Config(format!("modality {part:?} listed twice")));
        }
        idx.push(i);
    }
    if idx.is_empty() {
        return Err(Error::Config("empty modality list".into()));
    }
    idx.sort_unstable();
    Ok(idx.into_iter().map(|i| MODALITIES[i].to_string()).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Cohort {
    /// Subjects with a lesion; all four label classes occur.
    Tumor,
    /// Healthy subjects; every label is background.
    Healthy,
}

impl Cohort {
    /// Contrast agent is only part of the lesion protocol, so a modality set
    /// without the contrast-enhanced T1 analog describes the healthy cohort.
    pub fn default_for(modalities: &[String]) -> Self {
        if modalities.iter().any(|m| m == "T1c") {
            Cohort::Tumor
        } else {
            Cohort::Healthy
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub version: u32,
    pub name: String,
    pub modalities: Vec<String>,
    pub cohort: Cohort,
    pub samples: usize,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub seed: u64,
    pub train_fraction: f64,
}

impl DatasetManifest {
    pub fn new(name: &str, modalities: Vec<String>, samples: usize, size: usize, seed: u64) -> Result<Self> {
        let cohort = Cohort::default_for(&modalities);
        let m = DatasetManifest {
            format: DATASET_FORMAT.to_string(),
            version: DATASET_VERSION,
            name: name.to_string(),
            modalities,
            cohort,
            samples,
            height: size,
            width: size,
            classes: CLASSES,
            seed,
            train_fraction: 0.7,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.modalities.is_empty() {
            return Err(Error::Config("dataset needs at least one modality".into()));
        }
        let mut last = None;
        for m in &self.modalities {
            let i = modality_index(m).ok_or_else(|| Error::Config(format!("unknown modality {m:?}")))?;
            if last.is_some_and(|l| i <= l) {
                return Err(Error::Config("modalities must be distinct and in canonical order".into()));
            }
            last = Some(i);
        }
        if self.height < 8 || self.width < 8 {
            return Err(Error::Config("images must be at least 8x8".into()));
        }
        if self.classes != CLASSES {
            return Err(Error::Config(format!("class count must be {CLASSES}")));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            return Err(Error::Config("train_fraction must lie in (0, 1]".into()));
        }
        Ok(())
    }

    /// Global (canonical) index of each dataset modality.
    pub fn global_indices(&self) -> Vec<usize> {
        self.modalities
            .iter()
            .map(|m| modality_index(m).expect("validated"))
            .collect()
    }

    /// Disjoint, exhaustive train/validation split; a pure function of seed and fraction.
    pub fn split(&self) -> (Vec<usize>, Vec<usize>) {
        let mut order: Vec<usize> = (0..self.samples).collect();
        order.shuffle(&mut rng::stream(self.seed, "split", 0, 0));
        let n_train = ((self.samples as f64) * self.train_fraction).round() as usize;
        let mut train = order[..n_train.min(self.samples)].to_vec();
        let mut val = order[n_train.min(self.samples)..].to_vec();
        train.sort_unstable();
        val.sort_unstable();
        (train, val)
    }
}

/// One subject: `images[k]` belongs to the k-th dataset modality.
#[derive(Clone, Debug, PartialEq)]
pub struct PhantomSample {
    pub images: Vec<Vec<f32>>,
    pub labels: Vec<u8>,
    pub brain_mask: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub samples: Vec<PhantomSample>,
}

impl Dataset {
    pub fn generate(manifest: DatasetManifest) -> Result<Self> {
        manifest.validate()?;
        let samples = (0..manifest.samples)
            .map(|i| generate_phantom(&manifest, i))
            .collect::<Result<_>>()?;
        Ok(Dataset { manifest, samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Dataset-local position of a canonical modality, if present.
    pub fn local_index(&self, global: usize) -> Option<usize> {
        self.manifest.global_indices().iter().position(|&g| g == global)
    }

    pub fn hw(&self) -> (usize, usize) {
        (self.manifest.height, self.manifest.width)
    }
}

/// Named evaluation regions, each a set of label classes.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionMap {
    pub regions: Vec<(String, Vec<u8>)>,
}

impl Default for RegionMap {
    fn default() -> Self {
        RegionMap {
            regions: vec![
                ("ET".into(), vec![LABEL_ENHANCING]),
                ("TC".into(), vec![LABEL_NECROTIC, LABEL_ENHANCING]),
                ("WT".into(), vec![LABEL_NECROTIC, LABEL_EDEMA, LABEL_ENHANCING]),
            ],
        }
    }
}

impl RegionMap {
    pub fn get(&self, name: &str) -> Option<&[u8]> {
        self.regions
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, c)| c.as_slice())
    }
}
