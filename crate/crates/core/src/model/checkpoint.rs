// Directory layout:
//
//   <dir>/checkpoint.txt           key=value lines
//   <dir>/params/<index:04>.f32    little-endian f32, row-major
//   <dir>/buffers/<index:04>.f32

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::{BaselineModel, Model, ModelConfig, UrnModel};
use crate::data::io::{f32_bytes, read_f32};
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "urnet-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

const MANIFEST: &str = "checkpoint.txt";

fn shape_str(shape: &[usize]) -> String {
    shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
}

pub fn save_checkpoint(model: &Model, dir: &Path) -> Result<()> {
    let cfg = model.config();
    let store = model.store();
    let mut lines = vec![
        format!("format={CHECKPOINT_FORMAT}"),
        format!("version={CHECKPOINT_VERSION}"),
        format!("kind={}", model.kind()),
        format!("modalities={}", cfg.modalities.join(",")),
        format!("classes={}", cfg.classes),
        format!("levels={}", cfg.levels),
        format!("base_width={}", cfg.base_width),
        format!("leaky_slope={}", cfg.leaky_slope),
        format!("rep_channels={}", cfg.rep_channels),
        format!("decoder_blocks={}", cfg.decoder_blocks),
        format!("fusion={}", cfg.fusion),
        format!("variance_weight={}", cfg.variance_weight),
        format!("params={}", store.params().len()),
        format!("buffers={}", store.buffers().len()),
    ];
    for (i, p) in store.params().iter().enumerate() {
        lines.push(format!(
            "param.{i:04}={} {} {}",
            p.name,
            shape_str(p.value.shape()),
            if p.frozen { "frozen" } else { "trainable" }
        ));
    }
    for (i, b) in store.buffers().iter().enumerate() {
        lines.push(format!("buffer.{i:04}={} {}", b.name, b.value.len()));
    }

    for sub in ["params", "buffers"] {
        let d = dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let write = |path: &Path, bytes: &[u8]| fs::write(path, bytes).map_err(|e| Error::io(path, e));
    for (i, p) in store.params().iter().enumerate() {
        write(&dir.join("params").join(format!("{i:04}.f32")), &f32_bytes(p.value.data()))?;
    }
    for (i, b) in store.buffers().iter().enumerate() {
        write(&dir.join("buffers").join(format!("{i:04}.f32")), &f32_bytes(&b.value))?;
    }
    write(&dir.join(MANIFEST), (lines.join("\n") + "\n").as_bytes())
}

struct Manifest<'a> {
    path: &'a Path,
    entries: BTreeMap<String, String>,
}

impl Manifest<'_> {
    fn get(&self, key: &str) -> Result<&str> {
        self.entries
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::format(self.path, format!("missing key {key:?}")))
    }

    fn parse<V: std::str::FromStr>(&self, key: &str) -> Result<V> {
        let raw = self.get(key)?;
        raw.parse()
            .map_err(|_| Error::format(self.path, format!("bad value {raw:?} for {key:?}")))
    }
}

pub fn load_checkpoint(dir: &Path) -> Result<Model> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut entries = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::format(&path, format!("line {} is not key=value", n + 1)))?;
        entries.insert(k.trim().to_string(), v.trim().to_string());
    }
    let man = Manifest { path: &path, entries };
    if man.get("format")? != CHECKPOINT_FORMAT {
        return Err(Error::format(&path, "not a checkpoint manifest"));
    }
    let version = man.get("version")?;
    if version != CHECKPOINT_VERSION.to_string() {
        return Err(Error::Version {
            path: path.clone(),
            found: version.to_string(),
            expected: CHECKPOINT_VERSION.to_string(),
        });
    }
    let cfg = ModelConfig {
        modalities: man.get("modalities")?.split(',').map(str::to_string).collect(),
        classes: man.parse("classes")?,
        levels: man.parse("levels")?,
        base_width: man.parse("base_width")?,
        leaky_slope: man.parse("leaky_slope")?,
        rep_channels: man.parse("rep_channels")?,
        decoder_blocks: man.parse("decoder_blocks")?,
        fusion: man
            .get("fusion")?
            .parse()
            .map_err(|e: Error| Error::format(&path, e.to_string()))?,
        variance_weight: man.parse("variance_weight")?,
    };
    cfg.validate().map_err(|e| Error::format(&path, e.to_string()))?;
    let mut model = match man.get("kind")? {
        "baseline" => Model::Baseline(BaselineModel::new(cfg, 0)?),
        "urn" => Model::Urn(UrnModel::new(cfg, 0)?),
        other => return Err(Error::format(&path, format!("unknown model kind {other:?}"))),
    };
    let store = model.store_mut();
    let n_params: usize = man.parse("params")?;
    let n_buffers: usize = man.parse("buffers")?;
    if n_params != store.params().len() || n_buffers != store.buffers().len() {
        return Err(Error::format(
            &path,
            format!(
                "configuration implies {} parameters and {} buffers, manifest lists {n_params} and {n_buffers}",
                store.params().len(),
                store.buffers().len()
            ),
        ));
    }
    let ids: Vec<_> = store.ids().collect();
    for (i, id) in ids.into_iter().enumerate() {
        let entry = man.get(&format!("param.{i:04}"))?;
        let fields: Vec<&str> = entry.split_whitespace().collect();
        let p = store.get_mut(id);
        let expected_shape = shape_str(p.value.shape());
        if fields.len() != 3 || fields[0] != p.name || fields[1] != expected_shape {
            return Err(Error::format(
                &path,
                format!("param.{i:04} is {entry:?}, expected {} {expected_shape}", p.name),
            ));
        }
        p.frozen = match fields[2] {
            "frozen" => true,
            "trainable" => false,
            other => return Err(Error::format(&path, format!("bad flag {other:?} on param.{i:04}"))),
        };
        let values = read_f32(&dir.join("params").join(format!("{i:04}.f32")), p.value.len())?;
        p.value.data_mut().copy_from_slice(&values);
    }
    for i in 0..n_buffers {
        let entry = man.get(&format!("buffer.{i:04}"))?;
        let b = store.buffer_mut(i);
        if entry != format!("{} {}", b.name, b.value.len()) {
            return Err(Error::format(&path, format!("buffer.{i:04} is {entry:?}, expected {}", b.name)));
        }
        let len = b.value.len();
        b.value = read_f32(&dir.join("buffers").join(format!("{i:04}.f32")), len)?;
    }
    Ok(model)
}
