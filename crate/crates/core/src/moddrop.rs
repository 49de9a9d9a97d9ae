//! Modality dropout: how many modalities to drop follows a truncated
//! geometric law, which ones is uniform over subsets of that size.

use std::fmt;

use rand::Rng;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct DropConfig {
    theta: f64,
    n_max: usize,
    min_available: usize,
    modality_count: usize,
    cdf: Vec<f64>,
}

impl DropConfig {
    pub fn new(theta: f64, n_max: usize, min_available: usize, modality_count: usize) -> Result<Self> {
        if !(theta > 0.0 && theta < 1.0) {
            return Err(Error::Config(format!("theta must lie in (0, 1), got {theta}")));
        }
        if min_available == 0 {
            return Err(Error::Config("min_available must be at least 1".into()));
        }
        if min_available > modality_count || n_max > modality_count - min_available {
            return Err(Error::Config(format!(
                "cannot drop up to {n_max} of {modality_count} modalities while keeping {min_available} available"
            )));
        }
        let mut cdf = Vec::with_capacity(n_max + 1);
        let mut acc = 0.0;
        for k in 0..=n_max {
            acc += pmf_value(theta, n_max, k);
            cdf.push(acc);
        }
        Ok(DropConfig {
            theta,
            n_max,
            min_available,
            modality_count,
            cdf,
        })
    }

    /// The widest dropout the constraints allow: `n_max = M - min_available`.
    pub fn widest(theta: f64, min_available: usize, modality_count: usize) -> Result<Self> {
        let n_max = modality_count.checked_sub(min_available).ok_or_else(|| {
            Error::Config(format!(
                "{modality_count} modalities cannot keep {min_available} available"
            ))
        })?;
        Self::new(theta, n_max, min_available, modality_count)
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    pub fn n_max(&self) -> usize {
        self.n_max
    }

    pub fn min_available(&self) -> usize {
        self.min_available
    }

    pub fn modality_count(&self) -> usize {
        self.modality_count
    }

    /// `P(k) = (1 - theta) theta^k / (1 - theta^(n_max + 1))` for `k` in `0..=n_max`.
    pub fn pmf(&self, k: usize) -> Result<f64> {
        if k > self.n_max {
            return Err(Error::invalid("pmf", format!("k = {k} exceeds n_max = {}", self.n_max)));
        }
        Ok(pmf_value(self.theta, self.n_max, k))
    }

    /// Inverse transform sampling on the cumulative distribution.
    pub fn sample_drop_count<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.gen();
        self.cdf
            .iter()
            .position(|&c| u < c)
            .unwrap_or(self.n_max)
    }

    /// Drops `k ~ pmf` modalities chosen uniformly among all subsets of size `k`.
    pub fn sample_mask<R: Rng + ?Sized>(&self, rng: &mut R) -> ModalityMask {
        let k = self.sample_drop_count(rng);
        ModalityMask::drop_uniform(self.modality_count, k, rng)
    }
}

fn pmf_value(theta: f64, n_max: usize, k: usize) -> f64 {
    (1.0 - theta) * theta.powi(k as i32) / (1.0 - theta.powi(n_max as i32 + 1))
}

/// Per-sample availability of each modality, in canonical modality order.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ModalityMask {
    available: Vec<bool>,
}

impl ModalityMask {
    pub fn new(available: Vec<bool>) -> Self {
        ModalityMask { available }
    }

    pub fn all(m: usize) -> Self {
        ModalityMask {
            available: vec![true; m],
        }
    }

    /// Mask with exactly `k` unavailable entries, uniform over the `C(m, k)` choices.
    pub fn drop_uniform<R: Rng + ?Sized>(m: usize, k: usize, rng: &mut R) -> Self {
        let mut order: Vec<usize> = (0..m).collect();
        // partial Fisher-Yates: the first k positions are a uniform k-subset
        for i in 0..k.min(m) {
            let j = rng.gen_range(i..m);
            order.swap(i, j);
        }
        let mut available = vec![true; m];
        for &i in &order[..k.min(m)] {
            available[i] = false;
        }
        ModalityMask { available }
    }

    /// Parses a pattern such as `1011` (one digit per modality).
    pub fn from_pattern(p: &str) -> Result<Self> {
        p.chars()
            .map(|c| match c {
                '1' => Ok(true),
                '0' => Ok(false),
                other => Err(Error::Config(format!("invalid pattern character {other:?} in {p:?}"))),
            })
            .collect::<Result<Vec<_>>>()
            .map(Self::new)
    }

    /// Every nonempty subset of `m` modalities, ordered by subset bits with
    /// modality 0 as the most significant digit, from all-available downward.
    pub fn all_nonempty(m: usize) -> Vec<Self> {
        (1..(1u32 << m))
            .rev()
            .map(|bits| ModalityMask {
                available: (0..m).map(|i| bits & (1 << (m - 1 - i)) != 0).collect(),
            })
            .collect()
    }

    pub fn len(&self) -> usize {
        self.available.len()
    }

    pub fn is_empty(&self) -> bool {
        self.available.is_empty()
    }

    pub fn is_available(&self, i: usize) -> bool {
        self.available[i]
    }

    pub fn available(&self) -> &[bool] {
        &self.available
    }

    pub fn count(&self) -> usize {
        self.available.iter().filter(|&&a| a).count()
    }

    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.available.iter().enumerate().filter(|(_, &a)| a).map(|(i, _)| i)
    }

    pub fn pattern(&self) -> String {
        self.available.iter().map(|&a| if a { '1' } else { '0' }).collect()
    }
}

impl fmt::Display for ModalityMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.pattern())
    }
}
