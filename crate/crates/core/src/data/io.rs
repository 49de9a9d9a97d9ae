// Directory layout:
//
//   <dir>/manifest.json
//   <dir>/samples/<index:06>/<modality>.f32   little-endian f32, row-major H x W
//   <dir>/samples/<index:06>/labels.u8        one byte per voxel
//   <dir>/samples/<index:06>/mask.u8          0 or 1 per voxel

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use super::{Dataset, DatasetManifest, PhantomSample};
use crate::error::{Error, Result};

pub const DATASET_FORMAT: &str = "urnet-dataset";
pub const DATASET_VERSION: u32 = 1;

const MANIFEST: &str = "manifest.json";
const LABELS: &str = "labels.u8";
const MASK: &str = "mask.u8";

fn sample_dir(root: &Path, index: usize) -> PathBuf {
    root.join("samples").join(format!("{index:06}"))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub(crate) fn f32_bytes(data: &[f32]) -> Vec<u8> {
    data.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub(crate) fn read_f32(path: &Path, expected: usize) -> Result<Vec<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != expected * 4 {
        return Err(Error::format(
            path,
            format!("expected {} bytes, found {}", expected * 4, bytes.len()),
        ));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

fn read_u8(path: &Path, expected: usize) -> Result<Vec<u8>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != expected {
        return Err(Error::format(
            path,
            format!("expected {expected} bytes, found {}", bytes.len()),
        ));
    }
    Ok(bytes)
}

pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    ds.manifest.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let json = serde_json::to_string_pretty(&ds.manifest).expect("manifest serializes");
    write(&dir.join(MANIFEST), format!("{json}\n").as_bytes())?;
    for (i, s) in ds.samples.iter().enumerate() {
        let sd = sample_dir(dir, i);
        fs::create_dir_all(&sd).map_err(|e| Error::io(&sd, e))?;
        for (name, img) in ds.manifest.modalities.iter().zip(&s.images) {
            write(&sd.join(format!("{name}.f32")), &f32_bytes(img))?;
        }
        write(&sd.join(LABELS), &s.labels)?;
        let mask: Vec<u8> = s.brain_mask.iter().map(|&m| m as u8).collect();
        write(&sd.join(MASK), &mask)?;
    }
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let raw: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
    let format = raw.get("format").and_then(|v| v.as_str()).unwrap_or_default();
    if format != DATASET_FORMAT {
        return Err(Error::format(&path, format!("not a dataset manifest (format {format:?})")));
    }
    let version = raw.get("version").map(|v| v.to_string()).unwrap_or_default();
    if version != DATASET_VERSION.to_string() {
        return Err(Error::Version {
            path,
            found: version,
            expected: DATASET_VERSION.to_string(),
        });
    }
    let manifest: DatasetManifest =
        serde_json::from_value(raw).map_err(|e| Error::format(&path, e.to_string()))?;
    manifest.validate().map_err(|e| Error::format(&path, e.to_string()))?;

    let hw = manifest.height * manifest.width;
    let expected: BTreeSet<String> = manifest
        .modalities
        .iter()
        .map(|m| format!("{m}.f32"))
        .chain([LABELS.to_string(), MASK.to_string()])
        .collect();
    let samples_root = dir.join("samples");
    let present = list_dir(&samples_root)?;
    if present.len() != manifest.samples {
        return Err(Error::format(
            &samples_root,
            format!("manifest declares {} samples, found {}", manifest.samples, present.len()),
        ));
    }
    let mut samples = Vec::with_capacity(manifest.samples);
    for i in 0..manifest.samples {
        let sd = sample_dir(dir, i);
        let files = list_dir(&sd)?;
        if let Some(extra) = files.difference(&expected).next() {
            return Err(Error::format(
                sd.join(extra),
                format!(
                    "unexpected file; manifest declares {} modalities ({})",
                    manifest.modalities.len(),
                    manifest.modalities.join(",")
                ),
            ));
        }
        let images = manifest
            .modalities
            .iter()
            .map(|m| read_f32(&sd.join(format!("{m}.f32")), hw))
            .collect::<Result<Vec<_>>>()?;
        let labels = read_u8(&sd.join(LABELS), hw)?;
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= manifest.classes) {
            return Err(Error::format(sd.join(LABELS), format!("label {bad} out of range")));
        }
        let mask_path = sd.join(MASK);
        let brain_mask = read_u8(&mask_path, hw)?
            .into_iter()
            .map(|b| match b {
                0 => Ok(false),
                1 => Ok(true),
                other => Err(Error::format(&mask_path, format!("mask byte {other} is not 0 or 1"))),
            })
            .collect::<Result<Vec<_>>>()?;
        samples.push(PhantomSample {
            images,
            labels,
            brain_mask,
        });
    }
    Ok(Dataset { manifest, samples })
}

fn list_dir(dir: &Path) -> Result<BTreeSet<String>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut names = BTreeSet::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        names.insert(entry.file_name().to_string_lossy().into_owned());
    }
    Ok(names)
}
