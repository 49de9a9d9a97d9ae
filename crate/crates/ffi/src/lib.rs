//! C ABI over the `urnet` library.
//!
//! Every function returns a [`UrnStatus`]; results are written through out
//! pointers. Objects are opaque handles released with their `_free`
//! function. After a failure, [`urn_last_error`] describes it until the next
//! call on the same thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::slice;

use urnet::data::{load_dataset, parse_modalities, save_dataset, Dataset, DatasetManifest};
use urnet::harness::{dice, predict, psnr};
use urnet::model::{load_checkpoint, save_checkpoint, Model};
use urnet::moddrop::{DropConfig, ModalityMask};
use urnet::rng::{self, Stream};
use urnet::tensor::{Graph, Tensor};
use urnet::urn::{fuse, FusionF};
use urnet::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UrnStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    NonFinite = 4,
    Config = 5,
    Io = 6,
    Format = 7,
    Version = 8,
    Diverged = 9,
    Panic = 10,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UrnFusion {
    Identity = 0,
    Exp = 1,
}

/// Modality-dropout sampler with its own random stream.
pub struct UrnSampler {
    config: DropConfig,
    rng: Stream,
}

pub struct UrnDataset {
    inner: Dataset,
}

pub struct UrnModel {
    inner: Model,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> UrnStatus {
    match e {
        Error::Shape { .. } => UrnStatus::Shape,
        Error::InvalidArgument { .. } => UrnStatus::InvalidArgument,
        Error::NonFinite { .. } => UrnStatus::NonFinite,
        Error::Config(_) => UrnStatus::Config,
        Error::Io { .. } => UrnStatus::Io,
        Error::Format { .. } => UrnStatus::Format,
        Error::Version { .. } => UrnStatus::Version,
        Error::Diverged { .. } => UrnStatus::Diverged,
    }
}

enum Fail {
    Null(&'static str),
    Arg(String),
    Lib(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Lib(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> UrnStatus {
    set_error("");
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => UrnStatus::Ok,
        Ok(Err(Fail::Null(what))) => {
            set_error(&format!("{what} is null"));
            UrnStatus::NullPointer
        }
        Ok(Err(Fail::Arg(msg))) => {
            set_error(&msg);
            UrnStatus::InvalidArgument
        }
        Ok(Err(Fail::Lib(e))) => {
            set_error(&e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic");
            UrnStatus::Panic
        }
    }
}

unsafe fn as_ref<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or(Fail::Null(what))
}

unsafe fn as_mut<'a, T>(p: *mut T, what: &'static str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or(Fail::Null(what))
}

unsafe fn input<'a, T>(p: *const T, len: usize, what: &'static str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    Ok(slice::from_raw_parts(p, len))
}

unsafe fn output<'a, T>(p: *mut T, len: usize, what: &'static str) -> Result<&'a mut [T], Fail> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    Ok(slice::from_raw_parts_mut(p, len))
}

unsafe fn text<'a>(p: *const c_char, what: &'static str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail::Arg(format!("{what} is not valid UTF-8")))
}

fn check_len(what: &str, expected: usize, got: usize) -> Result<(), Fail> {
    if expected != got {
        return Err(Fail::Arg(format!("{what}: expected length {expected}, got {got}")));
    }
    Ok(())
}

/// Message describing the last failure on this thread; empty after success.
/// Valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn urn_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn urn_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Probability of dropping exactly `k` modalities.
///
/// # Safety
/// `out` must be valid for one write.
#[no_mangle]
pub unsafe extern "C" fn urn_drop_pmf(
    theta: f64,
    n_max: usize,
    min_available: usize,
    modality_count: usize,
    k: usize,
    out: *mut f64,
) -> UrnStatus {
    guard(|| {
        let out = as_mut(out, "out")?;
        *out = DropConfig::new(theta, n_max, min_available, modality_count)?.pmf(k)?;
        Ok(())
    })
}

/// # Safety
/// `out` must be valid for one write; the handle must be released with [`urn_sampler_free`].
#[no_mangle]
pub unsafe extern "C" fn urn_sampler_new(
    theta: f64,
    n_max: usize,
    min_available: usize,
    modality_count: usize,
    seed: u64,
    out: *mut *mut UrnSampler,
) -> UrnStatus {
    guard(|| {
        let out = as_mut(out, "out")?;
        let config = DropConfig::new(theta, n_max, min_available, modality_count)?;
        *out = Box::into_raw(Box::new(UrnSampler {
            config,
            rng: rng::stream(seed, "ffi-sampler", 0, 0),
        }));
        Ok(())
    })
}

/// Draws one availability mask: `mask[i]` is 1 if modality `i` is kept.
///
/// # Safety
/// `sampler` must come from [`urn_sampler_new`]; `mask` must hold `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn urn_sampler_sample(sampler: *mut UrnSampler, mask: *mut u8, len: usize) -> UrnStatus {
    guard(|| {
        let s = as_mut(sampler, "sampler")?;
        check_len("mask", s.config.modality_count(), len)?;
        let out = output(mask, len, "mask")?;
        let m = s.config.sample_mask(&mut s.rng);
        for (o, &a) in out.iter_mut().zip(m.available()) {
            *o = a as u8;
        }
        Ok(())
    })
}

/// # Safety
/// `sampler` must come from [`urn_sampler_new`] or be null.
#[no_mangle]
pub unsafe extern "C" fn urn_sampler_free(sampler: *mut UrnSampler) {
    if !sampler.is_null() {
        drop(Box::from_raw(sampler));
    }
}

/// Voxel-wise f-mean of `count` arrays of `len` floats stored back to back.
///
/// # Safety
/// `inputs` must hold `count * len` floats and `out` `len` floats.
#[no_mangle]
pub unsafe extern "C" fn urn_fuse(
    inputs: *const f32,
    count: usize,
    len: usize,
    fusion: UrnFusion,
    out: *mut f32,
) -> UrnStatus {
    guard(|| {
        let data = input(inputs, count * len, "inputs")?;
        let out = output(out, len, "out")?;
        let f = match fusion {
            UrnFusion::Identity => FusionF::Identity,
            UrnFusion::Exp => FusionF::Exp,
        };
        let mut g = Graph::<f32>::new();
        let vars: Vec<_> = (0..count)
            .map(|i| g.input(Tensor::new([len], data[i * len..(i + 1) * len].to_vec()).expect("sized")))
            .collect();
        let z = fuse(&mut g, &vars, f)?;
        out.copy_from_slice(g.value(z).data());
        Ok(())
    })
}

/// Dice overlap of the voxels whose label is one of `region[..region_len]`.
///
/// # Safety
/// `pred` and `gt` must hold `len` bytes, `region` `region_len` bytes, `out` one double.
#[no_mangle]
pub unsafe extern "C" fn urn_dice(
    pred: *const u8,
    gt: *const u8,
    len: usize,
    region: *const u8,
    region_len: usize,
    out: *mut f64,
) -> UrnStatus {
    guard(|| {
        let out = as_mut(out, "out")?;
        *out = dice(input(pred, len, "pred")?, input(gt, len, "gt")?, input(region, region_len, "region")?)?;
        Ok(())
    })
}

/// Peak signal-to-noise ratio in dB, capped at 99.
///
/// # Safety
/// `synth` and `gt` must hold `len` floats, `out` one double.
#[no_mangle]
pub unsafe extern "C" fn urn_psnr(synth: *const f32, gt: *const f32, len: usize, data_range: f64, out: *mut f64) -> UrnStatus {
    guard(|| {
        let out = as_mut(out, "out")?;
        *out = psnr(input(synth, len, "synth")?, input(gt, len, "gt")?, data_range)?;
        Ok(())
    })
}

/// Generates a phantom dataset in memory.
///
/// # Safety
/// `name` and `modalities` (comma-separated) must be NUL-terminated; `out` valid for one write.
#[no_mangle]
pub unsafe extern "C" fn urn_dataset_generate(
    name: *const c_char,
    modalities: *const c_char,
    samples: usize,
    size: usize,
    seed: u64,
    out: *mut *mut UrnDataset,
) -> UrnStatus {
    guard(|| {
        let out = as_mut(out, "out")?;
        let mods = parse_modalities(text(modalities, "modalities")?)?;
        let manifest = DatasetManifest::new(text(name, "name")?, mods, samples, size, seed)?;
        *out = Box::into_raw(Box::new(UrnDataset {
            inner: Dataset::generate(manifest)?,
        }));
        Ok(())
    })
}

/// # Safety
/// `path` must be NUL-terminated; `out` valid for one write.
#[no_mangle]
pub unsafe extern "C" fn urn_dataset_load(path: *const c_char, out: *mut *mut UrnDataset) -> UrnStatus {
    guard(|| {
        let out = as_mut(out, "out")?;
        let inner = load_dataset(Path::new(text(path, "path")?))?;
        *out = Box::into_raw(Box::new(UrnDataset { inner }));
        Ok(())
    })
}

/// # Safety
/// `dataset` must be a live handle; `path` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn urn_dataset_save(dataset: *const UrnDataset, path: *const c_char) -> UrnStatus {
    guard(|| {
        let ds = as_ref(dataset, "dataset")?;
        save_dataset(&ds.inner, Path::new(text(path, "path")?))?;
        Ok(())
    })
}

/// Sample count, image height and width, and modality count.
///
/// # Safety
/// `dataset` must be a live handle; each out pointer valid for one write.
#[no_mangle]
pub unsafe extern "C" fn urn_dataset_info(
    dataset: *const UrnDataset,
    samples: *mut usize,
    height: *mut usize,
    width: *mut usize,
    modalities: *mut usize,
) -> UrnStatus {
    guard(|| {
        let ds = &as_ref(dataset, "dataset")?.inner;
        *as_mut(samples, "samples")? = ds.len();
        *as_mut(height, "height")? = ds.manifest.height;
        *as_mut(width, "width")? = ds.manifest.width;
        *as_mut(modalities, "modalities")? = ds.manifest.modalities.len();
        Ok(())
    })
}

fn sample_of(ds: &Dataset, sample: usize) -> Result<&urnet::data::PhantomSample, Fail> {
    ds.samples
        .get(sample)
        .ok_or_else(|| Fail::Arg(format!("sample {sample} out of range ({} samples)", ds.len())))
}

/// Copies one normalized image (`height * width` floats) of dataset modality `modality`.
///
/// # Safety
/// `dataset` must be a live handle; `out` must hold `len` floats.
#[no_mangle]
pub unsafe extern "C" fn urn_dataset_image(
    dataset: *const UrnDataset,
    sample: usize,
    modality: usize,
    out: *mut f32,
    len: usize,
) -> UrnStatus {
    guard(|| {
        let ds = &as_ref(dataset, "dataset")?.inner;
        let s = sample_of(ds, sample)?;
        let img = s
            .images
            .get(modality)
            .ok_or_else(|| Fail::Arg(format!("modality {modality} out of range")))?;
        check_len("out", img.len(), len)?;
        output(out, len, "out")?.copy_from_slice(img);
        Ok(())
    })
}

/// Copies one label map (`height * width` bytes).
///
/// # Safety
/// `dataset` must be a live handle; `out` must hold `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn urn_dataset_labels(dataset: *const UrnDataset, sample: usize, out: *mut u8, len: usize) -> UrnStatus {
    guard(|| {
        let ds = &as_ref(dataset, "dataset")?.inner;
        let s = sample_of(ds, sample)?;
        check_len("out", s.labels.len(), len)?;
        output(out, len, "out")?.copy_from_slice(&s.labels);
        Ok(())
    })
}

/// # Safety
/// `dataset` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn urn_dataset_free(dataset: *mut UrnDataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset));
    }
}

/// Loads a checkpoint directory.
///
/// # Safety
/// `path` must be NUL-terminated; `out` valid for one write.
#[no_mangle]
pub unsafe extern "C" fn urn_model_load(path: *const c_char, out: *mut *mut UrnModel) -> UrnStatus {
    guard(|| {
        let out = as_mut(out, "out")?;
        let inner = load_checkpoint(Path::new(text(path, "path")?))?;
        *out = Box::into_raw(Box::new(UrnModel { inner }));
        Ok(())
    })
}

/// # Safety
/// `model` must be a live handle; `path` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn urn_model_save(model: *const UrnModel, path: *const c_char) -> UrnStatus {
    guard(|| {
        let m = as_ref(model, "model")?;
        save_checkpoint(&m.inner, Path::new(text(path, "path")?))?;
        Ok(())
    })
}

/// Number of input modalities the model expects.
///
/// # Safety
/// `model` must be a live handle; `out` valid for one write.
#[no_mangle]
pub unsafe extern "C" fn urn_model_modality_count(model: *const UrnModel, out: *mut usize) -> UrnStatus {
    guard(|| {
        *as_mut(out, "out")? = as_ref(model, "model")?.inner.config().modalities.len();
        Ok(())
    })
}

/// Segments one dataset sample using the modalities marked 1 in `mask`.
///
/// # Safety
/// Handles must be live; `mask` must hold `mask_len` bytes and `labels` `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn urn_model_predict(
    model: *const UrnModel,
    dataset: *const UrnDataset,
    sample: usize,
    mask: *const u8,
    mask_len: usize,
    labels: *mut u8,
    len: usize,
) -> UrnStatus {
    guard(|| {
        let m = &as_ref(model, "model")?.inner;
        let ds = &as_ref(dataset, "dataset")?.inner;
        sample_of(ds, sample)?;
        let mask = ModalityMask::new(input(mask, mask_len, "mask")?.iter().map(|&b| b != 0).collect());
        let p = predict(m, ds, sample, &mask)?;
        check_len("labels", p.labels.len(), len)?;
        output(labels, len, "labels")?.copy_from_slice(&p.labels);
        Ok(())
    })
}

/// # Safety
/// `model` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn urn_model_free(model: *mut UrnModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}
