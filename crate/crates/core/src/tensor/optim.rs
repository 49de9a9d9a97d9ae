use super::graph::{Gradients, StatUpdate};
use super::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A learnable tensor with its Adam moment estimates.
#[derive(Clone, Debug)]
pub struct Parameter<T = f32> {
    pub name: String,
    pub value: Tensor<T>,
    pub adam_m: Vec<T>,
    pub adam_v: Vec<T>,
    pub step_count: u64,
    pub frozen: bool,
}

/// Non-learnable per-channel state (batchnorm running statistics).
#[derive(Clone, Debug)]
pub struct Buffer<T = f32> {
    pub name: String,
    pub value: Vec<T>,
}

/// Owns every parameter and buffer of a model; layers refer to entries by id.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T = f32> {
    params: Vec<Parameter<T>>,
    buffers: Vec<Buffer<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            buffers: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let len = value.len();
        self.params.push(Parameter {
            name: name.into(),
            value,
            adam_m: vec![T::zero(); len],
            adam_v: vec![T::zero(); len],
            step_count: 0,
            frozen: false,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Vec<T>) -> usize {
        self.buffers.push(Buffer {
            name: name.into(),
            value,
        });
        self.buffers.len() - 1
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn buffer(&self, id: usize) -> &[T] {
        &self.buffers[id].value
    }

    pub fn buffer_mut(&mut self, id: usize) -> &mut Buffer<T> {
        &mut self.buffers[id]
    }

    pub fn params(&self) -> &[Parameter<T>] {
        &self.params
    }

    pub fn buffers(&self) -> &[Buffer<T>] {
        &self.buffers
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Freezes every parameter whose name starts with `prefix`; returns how many matched.
    pub fn freeze_prefix(&mut self, prefix: &str) -> usize {
        let mut n = 0;
        for p in self.params.iter_mut().filter(|p| p.name.starts_with(prefix)) {
            p.frozen = true;
            n += 1;
        }
        n
    }

    /// Momentum update of running statistics: `r = (1 - momentum) r + momentum * batch`.
    /// Buffer `id` holds the mean and `id + 1` the variance.
    pub fn apply_stat_updates(&mut self, updates: Vec<StatUpdate<T>>, momentum: T) {
        let keep = T::one() - momentum;
        for u in updates {
            for (r, &b) in self.buffers[u.buffer].value.iter_mut().zip(&u.mean) {
                *r = keep * *r + momentum * b;
            }
            for (r, &b) in self.buffers[u.buffer + 1].value.iter_mut().zip(&u.var) {
                *r = keep * *r + momentum * b;
            }
        }
    }

    /// Copies every value into another scalar type (moments and flags carried over).
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        let conv = |v: &[T]| -> Vec<U> {
            v.iter()
                .map(|x| U::from_f64(x.to_f64().unwrap()).unwrap())
                .collect()
        };
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    adam_m: conv(&p.adam_m),
                    adam_v: conv(&p.adam_v),
                    step_count: p.step_count,
                    frozen: p.frozen,
                })
                .collect(),
            buffers: self
                .buffers
                .iter()
                .map(|b| Buffer {
                    name: b.name.clone(),
                    value: conv(&b.value),
                })
                .collect(),
        }
    }
}

/// Adam with bias-corrected moment estimates.
#[derive(Clone, Copy, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// Updates every non-frozen parameter that received a gradient.
    pub fn step<T: Scalar>(&self, store: &mut ParamStore<T>, grads: &Gradients<T>) {
        for (id, g) in grads.params() {
            self.update(store.get_mut(id), g);
        }
    }

    pub fn update<T: Scalar>(&self, p: &mut Parameter<T>, grad: &[T]) {
        if p.frozen {
            return;
        }
        p.step_count += 1;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let t = p.step_count as i32;
        let c1 = T::one() - T::lit(self.beta1.powi(t));
        let c2 = T::one() - T::lit(self.beta2.powi(t));
        let (lr, eps) = (T::lit(self.lr), T::lit(self.eps));
        for (((w, m), v), &g) in p
            .value
            .data_mut()
            .iter_mut()
            .zip(p.adam_m.iter_mut())
            .zip(p.adam_v.iter_mut())
            .zip(grad)
        {
            *m = b1 * *m + (T::one() - b1) * g;
            *v = b2 * *v + (T::one() - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *w -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}
