//! Fusion of a variable number of modality encodings into one unified
//! representation, and the similarity regularizer that keeps the encoders
//! aligned.
//!
//! The fused value is a generalized f-mean, `f⁻¹(mean_i f(z̃_i))`, computed
//! voxel-wise. Encodings are always summed in canonical modality order so the
//! result does not depend on the order in which inputs are supplied.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::{Mode, UrnModel};
use crate::moddrop::ModalityMask;
use crate::tensor::{Graph, ParamStore, Scalar, Tensor, Var};

/// Inputs to `exp` are clamped to this range.
pub const EXP_CLAMP: f64 = 20.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum FusionF {
    /// Arithmetic mean.
    #[default]
    Identity,
    /// Log-mean-exp.
    Exp,
}

impl FusionF {
    pub fn apply<T: Scalar>(self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        match self {
            FusionF::Identity => Ok(x),
            FusionF::Exp => {
                let c = T::lit(EXP_CLAMP);
                let x = g.clamp(x, -c, c)?;
                g.exp(x)
            }
        }
    }

    pub fn invert<T: Scalar>(self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        match self {
            FusionF::Identity => Ok(x),
            FusionF::Exp => g.log(x),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            FusionF::Identity => "identity",
            FusionF::Exp => "exp",
        }
    }
}

impl fmt::Display for FusionF {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FusionF {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" | "mean" => Ok(FusionF::Identity),
            "exp" => Ok(FusionF::Exp),
            other => Err(Error::Config(format!("unknown fusion function {other:?}"))),
        }
    }
}

fn check_same_shape<T: Scalar>(g: &Graph<T>, op: &'static str, inputs: &[Var]) -> Result<()> {
    let first = inputs.first().ok_or_else(|| Error::invalid(op, "no inputs"))?;
    let base = g.shape(*first);
    for &v in &inputs[1..] {
        let s = g.shape(v);
        if s.len() != base.len() {
            return Err(Error::shape(op, "rank", base.len(), s.len()));
        }
        if let Some(d) = (0..s.len()).find(|&d| s[d] != base[d]) {
            return Err(Error::shape(op, format!("axis {d}"), base[d], s[d]));
        }
    }
    Ok(())
}

fn weighted_sum<T: Scalar>(g: &mut Graph<T>, terms: &[Var], weight: T) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for &t in terms {
        let s = g.mul_scalar(t, weight)?;
        acc = Some(match acc {
            Some(a) => g.add(a, s)?,
            None => s,
        });
    }
    Ok(acc.expect("nonempty"))
}

/// `f⁻¹((1/n) Σ f(z̃_i))`, summed in the given order.
pub fn fuse<T: Scalar>(g: &mut Graph<T>, inputs: &[Var], f: FusionF) -> Result<Var> {
    check_same_shape(g, "fuse", inputs)?;
    let weight = T::one() / T::from_usize(inputs.len()).unwrap();
    let mapped = inputs
        .iter()
        .map(|&x| f.apply(g, x))
        .collect::<Result<Vec<_>>>()?;
    let mean = weighted_sum(g, &mapped, weight)?;
    f.invert(g, mean)
}

/// [`fuse`] over `(modality index, encoding)` pairs, summed in modality order.
pub fn fuse_canonical<T: Scalar>(g: &mut Graph<T>, inputs: &[(usize, Var)], f: FusionF) -> Result<Var> {
    let mut sorted = inputs.to_vec();
    sorted.sort_by_key(|&(i, _)| i);
    let vars: Vec<Var> = sorted.into_iter().map(|(_, v)| v).collect();
    fuse(g, &vars, f)
}

/// Mean over voxels and channels of the across-input population variance.
pub fn variance_penalty<T: Scalar>(g: &mut Graph<T>, inputs: &[Var]) -> Result<Var> {
    check_same_shape(g, "variance_penalty", inputs)?;
    if inputs.len() < 2 {
        return Err(Error::invalid(
            "variance_penalty",
            format!("needs at least two inputs, got {}", inputs.len()),
        ));
    }
    let w = T::one() / T::from_usize(inputs.len()).unwrap();
    let mean = weighted_sum(g, inputs, w)?;
    let sq = inputs
        .iter()
        .map(|&x| {
            let d = g.sub(x, mean)?;
            g.square(d)
        })
        .collect::<Result<Vec<_>>>()?;
    let var = weighted_sum(g, &sq, w)?;
    g.mean_all(var)
}

fn sum_scaled<T: Scalar>(g: &mut Graph<T>, terms: &[(Var, Vec<T>)]) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for (x, w) in terms {
        let t = g.scale_batch(*x, w)?;
        acc = Some(match acc {
            Some(a) => g.add(a, t)?,
            None => t,
        });
    }
    acc.ok_or_else(|| Error::invalid("fuse", "no inputs"))
}

/// Batched fusion: `encoded` holds full-batch encodings in modality order, each
/// with per-sample weights `1/n_s` where available and `0` elsewhere.
pub(crate) fn fuse_weighted<T: Scalar>(g: &mut Graph<T>, f: FusionF, encoded: &[(Var, Vec<T>)]) -> Result<Var> {
    let mapped = encoded
        .iter()
        .map(|(e, w)| Ok((f.apply(g, *e)?, w.clone())))
        .collect::<Result<Vec<_>>>()?;
    let mean = sum_scaled(g, &mapped)?;
    f.invert(g, mean)
}

pub(crate) fn penalty_weighted<T: Scalar>(g: &mut Graph<T>, encoded: &[(Var, Vec<T>)]) -> Result<Var> {
    let mean = sum_scaled(g, encoded)?;
    let sq = encoded
        .iter()
        .map(|(e, w)| {
            let d = g.sub(*e, mean)?;
            Ok((g.square(d)?, w.clone()))
        })
        .collect::<Result<Vec<_>>>()?;
    let var = sum_scaled(g, &sq)?;
    g.mean_all(var)
}

/// What [`urn_forward`] should compute besides the fused representation.
#[derive(Clone, Debug)]
pub struct UrnRequest {
    pub mode: Mode,
    pub penalty: bool,
    /// Canonical modality indices whose synthesis decoder runs on `z`.
    pub synthesize: Vec<usize>,
    pub segment: bool,
}

pub struct UrnOutput {
    pub z: Var,
    pub variance_penalty: Option<Var>,
    pub syntheses: Vec<(usize, Var)>,
    pub logits: Option<Var>,
    /// Number of encoder passes (one per modality available in any sample).
    pub encoder_calls: usize,
    /// Fused modality count per sample.
    pub contributing: Vec<usize>,
}

/// Encodes the available modalities of every sample, fuses them per sample
/// and runs the requested decoders on the unified representation.
///
/// `images[i]` is the `[N, 1, H, W]` batch of canonical modality `i`; values
/// of samples where `masks[s]` marks it unavailable are never read.
pub fn urn_forward<T: Scalar>(
    g: &mut Graph<T>,
    model: &UrnModel,
    store: &ParamStore<T>,
    images: &[Tensor<T>],
    masks: &[ModalityMask],
    req: &UrnRequest,
) -> Result<UrnOutput> {
    const OP: &str = "urn_forward";
    let m = model.modality_count();
    if images.len() != m {
        return Err(Error::shape(OP, "modality count", m, images.len()));
    }
    let (n, c, h, w) = images[0].dims4(OP)?;
    if c != 1 {
        return Err(Error::shape(OP, "image channels", 1, c));
    }
    if masks.len() != n {
        return Err(Error::shape(OP, "mask count", n, masks.len()));
    }
    let contributing: Vec<usize> = masks.iter().map(ModalityMask::count).collect();
    if let Some(s) = contributing.iter().position(|&k| k == 0) {
        return Err(Error::invalid(OP, format!("sample {s} has no available modality")));
    }
    if req.penalty {
        if let Some(s) = contributing.iter().position(|&k| k < 2) {
            return Err(Error::invalid(
                OP,
                format!("variance penalty needs two modalities; sample {s} has one"),
            ));
        }
    }
    let per = h * w;
    let inv_n: Vec<T> = contributing
        .iter()
        .map(|&k| T::one() / T::from_usize(k).unwrap())
        .collect();

    let mut encoded = Vec::new();
    for i in 0..m {
        let idx: Vec<usize> = (0..n).filter(|&s| masks[s].is_available(i)).collect();
        if idx.is_empty() {
            continue;
        }
        if images[i].shape() != [n, 1, h, w] {
            return Err(Error::shape(OP, format!("modality {i} batch"), n * per, images[i].len()));
        }
        let mut sub = Vec::with_capacity(idx.len() * per);
        for &s in &idx {
            sub.extend_from_slice(&images[i].data()[s * per..(s + 1) * per]);
        }
        let x = g.input(Tensor::new([idx.len(), 1, h, w], sub)?);
        let e = model.encode_with(g, store, i, x, req.mode)?;
        let full = if idx.len() == n {
            e
        } else {
            g.scatter_batch(e, &idx, n)?
        };
        let weights: Vec<T> = (0..n)
            .map(|s| if masks[s].is_available(i) { inv_n[s] } else { T::zero() })
            .collect();
        encoded.push((full, weights));
    }

    fuse_and_decode(g, model, store, &encoded, contributing, req)
}

/// Second half of [`urn_forward`], starting from full-batch encodings with
/// their per-sample fusion weights.
pub(crate) fn fuse_and_decode<T: Scalar>(
    g: &mut Graph<T>,
    model: &UrnModel,
    store: &ParamStore<T>,
    encoded: &[(Var, Vec<T>)],
    contributing: Vec<usize>,
    req: &UrnRequest,
) -> Result<UrnOutput> {
    let z = fuse_weighted(g, model.config().fusion, encoded)?;
    let variance_penalty = if req.penalty {
        Some(penalty_weighted(g, encoded)?)
    } else {
        None
    };

    let syntheses = req
        .synthesize
        .iter()
        .map(|&j| model.synthesize_with(g, store, j, z, req.mode).map(|v| (j, v)))
        .collect::<Result<Vec<_>>>()?;
    let logits = if req.segment {
        Some(model.segment_with(g, store, z, req.mode)?)
    } else {
        None
    };
    Ok(UrnOutput {
        z,
        variance_penalty,
        syntheses,
        logits,
        encoder_calls: encoded.len(),
        contributing,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(g: &mut Graph<f64>, v: f64) -> Var {
        g.input(Tensor::new([1], vec![v]).unwrap())
    }

    #[test]
    fn exp_fusion_closed_form() {
        let mut g = Graph::<f64>::new();
        let a = scalar(&mut g, 0.0);
        let b = scalar(&mut g, 3f64.ln());
        let z = fuse(&mut g, &[a, b], FusionF::Exp).unwrap();
        assert!((g.value(z).item() - 2f64.ln()).abs() < 1e-12);
        assert!((g.value(z).item() - 0.6931).abs() < 1e-4);
    }

    #[test]
    fn identity_fusion_of_opposites_cancels() {
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::new([3], vec![1.5, -2.0, 0.25]).unwrap());
        let nx = g.mul_scalar(x, -1.0).unwrap();
        let z = fuse(&mut g, &[x, nx], FusionF::Identity).unwrap();
        assert!(g.value(z).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn two_point_population_variance() {
        let mut g = Graph::<f64>::new();
        let a = scalar(&mut g, 0.0);
        let b = scalar(&mut g, 2.0);
        let p = variance_penalty(&mut g, &[a, b]).unwrap();
        assert_eq!(g.value(p).item(), 1.0);
    }

    #[test]
    fn penalty_needs_two_inputs() {
        let mut g = Graph::<f64>::new();
        let a = scalar(&mut g, 1.0);
        assert!(variance_penalty(&mut g, &[a]).is_err());
        assert!(fuse(&mut g, &[], FusionF::Identity).is_err());
    }

    #[test]
    fn fusion_rejects_mismatched_shapes() {
        let mut g = Graph::<f32>::new();
        let a = g.input(Tensor::zeros([1, 2, 2, 2]));
        let b = g.input(Tensor::zeros([1, 3, 2, 2]));
        assert!(matches!(fuse(&mut g, &[a, b], FusionF::Identity), Err(Error::Shape { .. })));
    }

    #[test]
    fn parses_fusion_names() {
        assert_eq!("exp".parse::<FusionF>().unwrap(), FusionF::Exp);
        assert_eq!("identity".parse::<FusionF>().unwrap(), FusionF::Identity);
        assert!("max".parse::<FusionF>().is_err());
    }
}
