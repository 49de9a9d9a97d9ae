//! Central finite-difference gradient checking in 64-bit.
//!
//! Used by the test suites as an oracle that is independent of the
//! reverse-mode implementation: it only ever evaluates the forward pass.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{Graph, Tensor, Var};

/// Builds a graph from input values; returns it, the scalar loss, and the
/// variable standing for each input (in the same order).
pub trait Builder: Fn(&[Tensor<f64>]) -> Result<(Graph<f64>, Var, Vec<Var>)> {}
impl<F> Builder for F where F: Fn(&[Tensor<f64>]) -> Result<(Graph<f64>, Var, Vec<Var>)> {}

#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    pub eps: f64,
    /// Coordinates probed per input; larger inputs are subsampled.
    pub max_coords: usize,
    pub seed: u64,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            eps: 1e-3,
            max_coords: 96,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Report {
    /// Norm-wise relative error `|a - n| / max(|a|, |n|)` per input over the probed coordinates.
    pub rel_err: Vec<f64>,
}

impl Report {
    pub fn max(&self) -> f64 {
        self.rel_err.iter().copied().fold(0.0, f64::max)
    }
}

impl GradCheck {
    pub fn run(&self, inputs: &[Tensor<f64>], build: impl Builder) -> Result<Report> {
        let (g, loss, vars) = build(inputs)?;
        let grads = g.backward(loss)?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut rel_err = Vec::with_capacity(inputs.len());
        for (k, input) in inputs.iter().enumerate() {
            let analytic = grads
                .wrt(vars[k])
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; input.len()]);
            let coords: Vec<usize> = if input.len() <= self.max_coords {
                (0..input.len()).collect()
            } else {
                (0..self.max_coords).map(|_| rng.gen_range(0..input.len())).collect()
            };
            let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
            for &c in &coords {
                let numeric = self.probe(inputs, k, c, &build)?;
                let a = analytic[c];
                diff += (a - numeric).powi(2);
                na += a * a;
                nn += numeric * numeric;
            }
            let scale = na.sqrt().max(nn.sqrt());
            rel_err.push(if scale == 0.0 { 0.0 } else { diff.sqrt() / scale });
        }
        Ok(Report { rel_err })
    }

    fn probe(&self, inputs: &[Tensor<f64>], k: usize, c: usize, build: &impl Builder) -> Result<f64> {
        let mut shifted = inputs.to_vec();
        let orig = inputs[k].data()[c];
        shifted[k].data_mut()[c] = orig + self.eps;
        let (g, up, _) = build(&shifted)?;
        let up = g.value(up).item();
        shifted[k].data_mut()[c] = orig - self.eps;
        let (g, down, _) = build(&shifted)?;
        let down = g.value(down).item();
        Ok((up - down) / (2.0 * self.eps))
    }
}

/// Reduces `out` to a scalar through a fixed random linear functional, so
/// every output element contributes a distinct weight to the checked gradient.
pub fn project(g: &mut Graph<f64>, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let shape = g.shape(out).to_vec();
    let weights = Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0));
    let w = g.input(weights);
    let prod = g.mul(out, w)?;
    g.mean_all(prod)
}

/// Uniform random tensor in `[lo, hi)`.
pub fn uniform(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(lo..hi))
}
