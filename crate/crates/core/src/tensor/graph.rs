use super::ops::{self, BnSaved, ConvGeom};
use super::optim::{ParamId, ParamStore};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Normalization statistics source for [`Graph::batchnorm`].
#[derive(Clone, Copy, Debug)]
pub enum BnMode<'a, T> {
    /// Batch statistics; `running` names the buffer pair that receives a
    /// momentum update once the step is committed.
    Train { running: Option<usize> },
    /// Stored running statistics.
    Eval { mean: &'a [T], var: &'a [T] },
    /// Batch statistics with unit scale and zero shift, no learnable parameters.
    Fixed,
}

/// Batch statistics observed by a training-mode batchnorm.
#[derive(Clone, Debug)]
pub struct StatUpdate<T> {
    pub buffer: usize,
    pub mean: Vec<T>,
    /// Unbiased batch variance.
    pub var: Vec<T>,
}

pub const BN_EPS: f64 = 1e-5;

enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
        cols: Vec<T>,
    },
    Upsample2 {
        x: Var,
        w: Var,
        b: Var,
    },
    MaxPool2 {
        x: Var,
        arg: Vec<usize>,
    },
    BatchNorm {
        x: Var,
        gamma: Option<Var>,
        beta: Option<Var>,
        saved: BnSaved<T>,
        batch_stats: bool,
    },
    LeakyRelu {
        x: Var,
        slope: T,
    },
    SoftmaxXent {
        logits: Var,
        labels: Vec<u8>,
        probs: Vec<T>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale {
        x: Var,
        factor: T,
    },
    Offset {
        x: Var,
    },
    Exp {
        x: Var,
    },
    Log {
        x: Var,
    },
    Square {
        x: Var,
    },
    Clamp {
        x: Var,
        lo: T,
        hi: T,
    },
    MeanOver {
        x: Var,
        axes: Vec<usize>,
    },
    VarianceOver {
        x: Var,
        axes: Vec<usize>,
    },
    Concat {
        xs: Vec<Var>,
        axis: usize,
    },
    MaskChannels {
        x: Var,
        keep: Vec<bool>,
    },
    ScaleBatch {
        x: Var,
        weights: Vec<T>,
    },
    GatherBatch {
        x: Var,
        index: Vec<usize>,
    },
    ScatterBatch {
        x: Var,
        index: Vec<usize>,
    },
    Reshape {
        x: Var,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records a forward computation so it can be differentiated in reverse.
///
/// Nodes are appended in evaluation order, so walking them backwards is a
/// valid topological order for backpropagation.
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    params: Vec<(ParamId, Var)>,
    stat_updates: Vec<StatUpdate<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: Vec::new(),
            stat_updates: Vec::new(),
        }
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A constant input.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t, false)
    }

    /// A leaf whose gradient is tracked.
    pub fn variable(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t, true)
    }

    /// Leaf for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&(_, v)) = self.params.iter().find(|(p, _)| *p == id) {
            return v;
        }
        let p = store.get(id);
        let v = self.leaf(p.value.clone(), !p.frozen);
        self.params.push((id, v));
        v
    }

    pub fn take_stat_updates(&mut self) -> Vec<StatUpdate<T>> {
        std::mem::take(&mut self.stat_updates)
    }

    fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        const OP: &str = "conv2d";
        let (n, cin, h, wd) = self.value(x).dims4(OP)?;
        let (cout, wcin, kh, kw) = self.value(w).dims4(OP)?;
        if wcin != cin {
            return Err(Error::shape(OP, "input channels", wcin, cin));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::invalid(OP, format!("kernel extents must be odd, got {kh}x{kw}")));
        }
        if self.value(b).len() != cout {
            return Err(Error::shape(OP, "bias length", cout, self.value(b).len()));
        }
        if stride == 0 {
            return Err(Error::invalid(OP, "stride must be positive"));
        }
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(Error::invalid(OP, "kernel larger than padded input"));
        }
        let geom = ConvGeom {
            n,
            cin,
            h,
            w: wd,
            cout,
            kh,
            kw,
            stride,
            pad,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (wd + 2 * pad - kw) / stride + 1,
        };
        let (out, cols) = ops::conv2d_forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
        );
        let value = Tensor::new([n, cout, geom.ho, geom.wo], out)?;
        self.push(OP, value, Op::Conv2d { x, w, b, geom, cols }, &[x, w, b])
    }

    /// Doubles H and W with a stride-2 transposed convolution; kernel is `[cin, cout, 2, 2]`.
    pub fn upsample2(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        const OP: &str = "upsample2";
        let (n, cin, h, wd) = self.value(x).dims4(OP)?;
        let (kcin, cout, kh, kw) = self.value(w).dims4(OP)?;
        if kcin != cin {
            return Err(Error::shape(OP, "input channels", kcin, cin));
        }
        if kh != 2 || kw != 2 {
            return Err(Error::invalid(OP, format!("kernel must be 2x2, got {kh}x{kw}")));
        }
        if self.value(b).len() != cout {
            return Err(Error::shape(OP, "bias length", cout, self.value(b).len()));
        }
        let out = ops::upsample2_forward(
            (n, cin, h, wd),
            cout,
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
        );
        let value = Tensor::new([n, cout, 2 * h, 2 * wd], out)?;
        self.push(OP, value, Op::Upsample2 { x, w, b }, &[x, w, b])
    }

    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        const OP: &str = "max_pool2";
        let (n, c, h, w) = self.value(x).dims4(OP)?;
        if h % 2 != 0 {
            return Err(Error::invalid(OP, format!("height {h} is odd")));
        }
        if w % 2 != 0 {
            return Err(Error::invalid(OP, format!("width {w} is odd")));
        }
        let (out, arg) = ops::maxpool2_forward(self.value(x));
        let value = Tensor::new([n, c, h / 2, w / 2], out)?;
        self.push(OP, value, Op::MaxPool2 { x, arg }, &[x])
    }

    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Option<Var>,
        beta: Option<Var>,
        mode: BnMode<'_, T>,
    ) -> Result<Var> {
        const OP: &str = "batchnorm";
        let (n, c, h, w) = self.value(x).dims4(OP)?;
        for p in [gamma, beta].into_iter().flatten() {
            if self.value(p).len() != c {
                return Err(Error::shape(OP, "affine parameter length", c, self.value(p).len()));
            }
        }
        let hw = h * w;
        let eps = T::lit(BN_EPS);
        let (mean, var, batch_stats) = match mode {
            BnMode::Train { .. } | BnMode::Fixed => {
                let (m, v) = ops::channel_stats(self.value(x).data(), n, c, hw);
                (m, v, true)
            }
            BnMode::Eval { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::shape(OP, "running statistics length", c, mean.len()));
                }
                (mean.to_vec(), var.to_vec(), false)
            }
        };
        let (gamma, beta) = match mode {
            BnMode::Fixed => (None, None),
            _ => (gamma, beta),
        };
        let (out, saved) = ops::bn_normalize(
            self.value(x).data(),
            (n, c, hw),
            &mean,
            &var,
            eps,
            gamma.map(|g| self.value(g).data()),
            beta.map(|b| self.value(b).data()),
        );
        if let BnMode::Train { running: Some(buffer) } = mode {
            let count = n * hw;
            let unbias = if count > 1 {
                T::from_usize(count).unwrap() / T::from_usize(count - 1).unwrap()
            } else {
                T::one()
            };
            self.stat_updates.push(StatUpdate {
                buffer,
                mean: mean.clone(),
                var: var.iter().map(|&v| v * unbias).collect(),
            });
        }
        let value = Tensor::new([n, c, h, w], out)?;
        let inputs: Vec<Var> = [Some(x), gamma, beta].into_iter().flatten().collect();
        self.push(
            OP,
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                saved,
                batch_stats,
            },
            &inputs,
        )
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Result<Var> {
        if !(slope > T::zero() && slope < T::one()) {
            return Err(Error::invalid("leaky_relu", "slope must lie in (0, 1)"));
        }
        let value = self
            .value(x)
            .map(|v| if v >= T::zero() { v } else { v * slope });
        self.push("leaky_relu", value, Op::LeakyRelu { x, slope }, &[x])
    }

    /// Mean over all voxels of `-log softmax(logits)[label]`; `labels` is `[N, H, W]` flattened.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[u8]) -> Result<Var> {
        const OP: &str = "softmax_cross_entropy";
        let (n, k, h, w) = self.value(logits).dims4(OP)?;
        if labels.len() != n * h * w {
            return Err(Error::shape(OP, "label count", n * h * w, labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= k) {
            return Err(Error::invalid(OP, format!("label {bad} out of range for {k} classes")));
        }
        let (loss, probs) = ops::softmax_xent_forward(self.value(logits).data(), labels, (n, k, h * w));
        self.push(
            OP,
            Tensor::scalar(loss),
            Op::SoftmaxXent {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        )
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != sb.len() {
            return Err(Error::shape(op, "rank", sa.len(), sb.len()));
        }
        for (i, (&x, &y)) in sa.iter().zip(sb).enumerate() {
            if x != y {
                return Err(Error::shape(op, format!("axis {i}"), x, y));
            }
        }
        Ok(())
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (ta, tb) = (self.value(a), self.value(b));
        Tensor {
            shape: ta.shape().to_vec(),
            data: ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect(),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.zip(a, b, |x, y| x + y);
        self.push("add", v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.zip(a, b, |x, y| x - y);
        self.push("sub", v, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.zip(a, b, |x, y| x * y);
        self.push("mul", v, Op::Mul(a, b), &[a, b])
    }

    pub fn mul_scalar(&mut self, x: Var, factor: T) -> Result<Var> {
        let v = self.value(x).map(|e| e * factor);
        self.push("mul_scalar", v, Op::Scale { x, factor }, &[x])
    }

    pub fn add_scalar(&mut self, x: Var, offset: T) -> Result<Var> {
        let v = self.value(x).map(|e| e + offset);
        self.push("add_scalar", v, Op::Offset { x }, &[x])
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(|e| e.exp());
        self.push("exp", v, Op::Exp { x }, &[x])
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if self.value(x).data().iter().any(|&e| e <= T::zero()) {
            return Err(Error::invalid("log", "input must be strictly positive"));
        }
        let v = self.value(x).map(|e| e.ln());
        self.push("log", v, Op::Log { x }, &[x])
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(|e| e * e);
        self.push("square", v, Op::Square { x }, &[x])
    }

    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Result<Var> {
        let v = self.value(x).map(|e| e.max(lo).min(hi));
        self.push("clamp", v, Op::Clamp { x, lo, hi }, &[x])
    }

    fn reduce_layout(shape: &[usize], axes: &[usize]) -> Result<(Vec<usize>, Vec<usize>)> {
        let mut reduced = vec![false; shape.len()];
        for &a in axes {
            if a >= shape.len() {
                return Err(Error::shape("reduce", "axis", shape.len() - 1, a));
            }
            reduced[a] = true;
        }
        let out_shape: Vec<usize> = shape
            .iter()
            .zip(&reduced)
            .map(|(&s, &r)| if r { 1 } else { s })
            .collect();
        // Map every input element to its output slot.
        let len: usize = shape.iter().product();
        let mut slot = Vec::with_capacity(len);
        let mut idx = vec![0usize; shape.len()];
        for _ in 0..len {
            let mut o = 0;
            for d in 0..shape.len() {
                o = o * out_shape[d] + if reduced[d] { 0 } else { idx[d] };
            }
            slot.push(o);
            for d in (0..shape.len()).rev() {
                idx[d] += 1;
                if idx[d] < shape[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        Ok((out_shape, slot))
    }

    /// Mean over `axes`, keeping reduced axes with extent 1.
    pub fn mean_over(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (out_shape, slot) = Self::reduce_layout(&shape, axes)?;
        let out_len: usize = out_shape.iter().product();
        let count = T::from_usize(self.value(x).len() / out_len.max(1)).unwrap();
        let mut acc = vec![T::zero(); out_len];
        for (&v, &s) in self.value(x).data().iter().zip(&slot) {
            acc[s] += v;
        }
        acc.iter_mut().for_each(|v| *v = *v / count);
        let value = Tensor::new(out_shape, acc)?;
        self.push(
            "mean_over",
            value,
            Op::MeanOver {
                x,
                axes: axes.to_vec(),
            },
            &[x],
        )
    }

    /// Mean of every element, as a `[1]` scalar.
    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(x).len()).collect();
        let data = self.value(x).data();
        let mut acc = T::zero();
        for &v in data {
            acc += v;
        }
        let mean = acc / T::from_usize(data.len().max(1)).unwrap();
        self.push("mean_all", Tensor::scalar(mean), Op::MeanOver { x, axes }, &[x])
    }

    /// Population variance over `axes`, keeping reduced axes with extent 1.
    pub fn variance_over(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (out_shape, slot) = Self::reduce_layout(&shape, axes)?;
        let out_len: usize = out_shape.iter().product();
        let count = T::from_usize(self.value(x).len() / out_len.max(1)).unwrap();
        let data = self.value(x).data();
        let mut mean = vec![T::zero(); out_len];
        for (&v, &s) in data.iter().zip(&slot) {
            mean[s] += v;
        }
        mean.iter_mut().for_each(|v| *v = *v / count);
        let mut var = vec![T::zero(); out_len];
        for (&v, &s) in data.iter().zip(&slot) {
            var[s] += (v - mean[s]) * (v - mean[s]);
        }
        var.iter_mut().for_each(|v| *v = *v / count);
        let value = Tensor::new(out_shape, var)?;
        self.push(
            "variance_over",
            value,
            Op::VarianceOver {
                x,
                axes: axes.to_vec(),
            },
            &[x],
        )
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        const OP: &str = "concat";
        let first = xs.first().ok_or_else(|| Error::invalid(OP, "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape(OP, "axis", base.len() - 1, axis));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            if s.len() != base.len() {
                return Err(Error::shape(OP, "rank", base.len(), s.len()));
            }
            for d in 0..s.len() {
                if d != axis && s[d] != base[d] {
                    return Err(Error::shape(OP, format!("axis {d}"), base[d], s[d]));
                }
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let t = self.value(v);
                let chunk = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::new(shape, out)?;
        self.push(
            OP,
            value,
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
            xs,
        )
    }

    /// Zeroes whole channels; `keep` is indexed `[sample * C + channel]`.
    pub fn zero_channels(&mut self, x: Var, keep: &[bool]) -> Result<Var> {
        const OP: &str = "zero_channels";
        let (n, c, h, w) = self.value(x).dims4(OP)?;
        if keep.len() != n * c {
            return Err(Error::shape(OP, "mask length", n * c, keep.len()));
        }
        let hw = h * w;
        let mut v = self.value(x).clone();
        for (plane, &k) in v.data_mut().chunks_mut(hw).zip(keep) {
            if !k {
                plane.iter_mut().for_each(|e| *e = T::zero());
            }
        }
        self.push(
            OP,
            v,
            Op::MaskChannels {
                x,
                keep: keep.to_vec(),
            },
            &[x],
        )
    }

    /// Same data under a new shape with equal element count.
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let len: usize = shape.iter().product();
        if len != self.value(x).len() {
            return Err(Error::shape("reshape", "element count", self.value(x).len(), len));
        }
        let value = Tensor::new(shape.to_vec(), self.value(x).data().to_vec())?;
        self.push("reshape", value, Op::Reshape { x }, &[x])
    }

    /// Multiplies each sample of the leading axis by its own weight.
    pub fn scale_batch(&mut self, x: Var, weights: &[T]) -> Result<Var> {
        const OP: &str = "scale_batch";
        let n = self.shape(x)[0];
        if weights.len() != n {
            return Err(Error::shape(OP, "weight count", n, weights.len()));
        }
        let per = self.value(x).len() / n.max(1);
        let mut v = self.value(x).clone();
        for (chunk, &wt) in v.data_mut().chunks_mut(per.max(1)).zip(weights) {
            chunk.iter_mut().for_each(|e| *e *= wt);
        }
        self.push(
            OP,
            v,
            Op::ScaleBatch {
                x,
                weights: weights.to_vec(),
            },
            &[x],
        )
    }

    /// Selects samples of the leading axis.
    pub fn gather_batch(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        const OP: &str = "gather_batch";
        let shape = self.shape(x).to_vec();
        let per: usize = shape[1..].iter().product();
        let mut out = Vec::with_capacity(index.len() * per);
        for &i in index {
            if i >= shape[0] {
                return Err(Error::shape(OP, "batch index", shape[0], i));
            }
            out.extend_from_slice(&self.value(x).data()[i * per..(i + 1) * per]);
        }
        let mut s = shape;
        s[0] = index.len();
        let value = Tensor::new(s, out)?;
        self.push(
            OP,
            value,
            Op::GatherBatch {
                x,
                index: index.to_vec(),
            },
            &[x],
        )
    }

    /// Places sample `k` of `x` at position `index[k]` of a zero batch of size `batch`.
    pub fn scatter_batch(&mut self, x: Var, index: &[usize], batch: usize) -> Result<Var> {
        const OP: &str = "scatter_batch";
        let shape = self.shape(x).to_vec();
        if index.len() != shape[0] {
            return Err(Error::shape(OP, "index count", shape[0], index.len()));
        }
        let per: usize = shape[1..].iter().product();
        let mut out = vec![T::zero(); batch * per];
        for (k, &i) in index.iter().enumerate() {
            if i >= batch {
                return Err(Error::shape(OP, "batch index", batch, i));
            }
            out[i * per..(i + 1) * per].copy_from_slice(&self.value(x).data()[k * per..(k + 1) * per]);
        }
        let mut s = shape;
        s[0] = batch;
        let value = Tensor::new(s, out)?;
        self.push(
            OP,
            value,
            Op::ScatterBatch {
                x,
                index: index.to_vec(),
            },
            &[x],
        )
    }

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape("backward", "loss element count", 1, self.value(loss).len()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.propagate(&node.op, &node.value, &dy, &mut grads);
            grads[i] = Some(dy);
        }
        Ok(Gradients {
            grads,
            params: self.params.clone(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, g: Vec<T>) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += *b),
            slot => *slot = Some(g),
        }
    }

    fn propagate(&self, op: &Op<T>, out: &Tensor<T>, dy: &[T], grads: &mut [Option<Vec<T>>]) {
        match op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom, cols } => {
                let r = ops::conv2d_backward(
                    geom,
                    cols,
                    self.value(*w).data(),
                    dy,
                    (self.needs(*x), self.needs(*w), self.needs(*b)),
                );
                self.accumulate_conv(grads, (*x, *w, *b), r);
            }
            Op::Upsample2 { x, w, b } => {
                let s = self.value(*x).shape();
                let cout = self.value(*w).shape()[1];
                let r = ops::upsample2_backward(
                    (s[0], s[1], s[2], s[3]),
                    cout,
                    self.value(*x).data(),
                    self.value(*w).data(),
                    dy,
                    (self.needs(*x), self.needs(*w), self.needs(*b)),
                );
                self.accumulate_conv(grads, (*x, *w, *b), r);
            }
            Op::MaxPool2 { x, arg } => {
                let mut dx = vec![T::zero(); self.value(*x).len()];
                for (&a, &d) in arg.iter().zip(dy) {
                    dx[a] += d;
                }
                self.accumulate(grads, *x, dx);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                saved,
                batch_stats,
            } => {
                let s = out.shape();
                let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
                let gdata = gamma.map(|g| self.value(g).data());
                if let Some(g) = gamma {
                    let mut dg = vec![T::zero(); c];
                    for (i, (&d, &xh)) in dy.iter().zip(&saved.xhat).enumerate() {
                        dg[(i / hw) % c] += d * xh;
                    }
                    self.accumulate(grads, *g, dg);
                }
                if let Some(b) = beta {
                    let mut db = vec![T::zero(); c];
                    for (i, &d) in dy.iter().enumerate() {
                        db[(i / hw) % c] += d;
                    }
                    self.accumulate(grads, *b, db);
                }
                if self.needs(*x) {
                    let dx = if *batch_stats {
                        ops::bn_backward_batch(dy, saved, (n, c, hw), gdata)
                    } else {
                        dy.iter()
                            .enumerate()
                            .map(|(i, &d)| {
                                let ch = (i / hw) % c;
                                d * gdata.map_or(T::one(), |g| g[ch]) * saved.inv_std[ch]
                            })
                            .collect()
                    };
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::LeakyRelu { x, slope } => {
                let dx = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(dy)
                    .map(|(&v, &d)| if v >= T::zero() { d } else { d * *slope })
                    .collect();
                self.accumulate(grads, *x, dx);
            }
            Op::SoftmaxXent {
                logits,
                labels,
                probs,
            } => {
                let s = self.value(*logits).shape();
                let (n, k, hw) = (s[0], s[1], s[2] * s[3]);
                let scale = dy[0] / T::from_usize(n * hw).unwrap();
                let mut dx: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for smp in 0..n {
                    for p in 0..hw {
                        let l = labels[smp * hw + p] as usize;
                        dx[(smp * k + l) * hw + p] -= scale;
                    }
                }
                self.accumulate(grads, *logits, dx);
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, dy.to_vec());
                self.accumulate(grads, *b, dy.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, dy.to_vec());
                self.accumulate(grads, *b, dy.iter().map(|&d| -d).collect());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if self.needs(*a) {
                    self.accumulate(grads, *a, dy.iter().zip(vb).map(|(&d, &y)| d * y).collect());
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, dy.iter().zip(va).map(|(&d, &x)| d * x).collect());
                }
            }
            Op::Scale { x, factor } => {
                self.accumulate(grads, *x, dy.iter().map(|&d| d * *factor).collect());
            }
            Op::Offset { x } => self.accumulate(grads, *x, dy.to_vec()),
            Op::Exp { x } => {
                let dx = out.data().iter().zip(dy).map(|(&e, &d)| e * d).collect();
                self.accumulate(grads, *x, dx);
            }
            Op::Log { x } => {
                let dx = self.value(*x).data().iter().zip(dy).map(|(&v, &d)| d / v).collect();
                self.accumulate(grads, *x, dx);
            }
            Op::Square { x } => {
                let two = T::lit(2.0);
                let dx = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(dy)
                    .map(|(&v, &d)| two * v * d)
                    .collect();
                self.accumulate(grads, *x, dx);
            }
            Op::Clamp { x, lo, hi } => {
                let dx = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(dy)
                    .map(|(&v, &d)| if v < *lo || v > *hi { T::zero() } else { d })
                    .collect();
                self.accumulate(grads, *x, dx);
            }
            Op::MeanOver { x, axes } => {
                let shape = self.shape(*x);
                let (_, slot) = Self::reduce_layout(shape, axes).expect("validated in forward");
                let count = T::from_usize(self.value(*x).len() / out.len().max(1)).unwrap();
                let dx = slot.iter().map(|&s| dy[s] / count).collect();
                self.accumulate(grads, *x, dx);
            }
            Op::VarianceOver { x, axes } => {
                let shape = self.shape(*x);
                let (_, slot) = Self::reduce_layout(shape, axes).expect("validated in forward");
                let count = T::from_usize(self.value(*x).len() / out.len().max(1)).unwrap();
                let data = self.value(*x).data();
                let mut mean = vec![T::zero(); out.len()];
                for (&v, &s) in data.iter().zip(&slot) {
                    mean[s] += v;
                }
                mean.iter_mut().for_each(|m| *m = *m / count);
                let two = T::lit(2.0);
                let dx = data
                    .iter()
                    .zip(&slot)
                    .map(|(&v, &s)| two * (v - mean[s]) / count * dy[s])
                    .collect();
                self.accumulate(grads, *x, dx);
            }
            Op::Concat { xs, axis } => {
                let shape = out.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for &v in xs {
                    let chunk = self.shape(v)[*axis] * inner;
                    if self.needs(v) {
                        let mut dx = Vec::with_capacity(outer * chunk);
                        for o in 0..outer {
                            dx.extend_from_slice(&dy[o * total + offset..o * total + offset + chunk]);
                        }
                        self.accumulate(grads, v, dx);
                    }
                    offset += chunk;
                }
            }
            Op::MaskChannels { x, keep } => {
                let s = out.shape();
                let hw = s[2] * s[3];
                let mut dx = dy.to_vec();
                for (plane, &k) in dx.chunks_mut(hw).zip(keep) {
                    if !k {
                        plane.iter_mut().for_each(|e| *e = T::zero());
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Reshape { x } => self.accumulate(grads, *x, dy.to_vec()),
            Op::ScaleBatch { x, weights } => {
                let per = out.len() / weights.len().max(1);
                let mut dx = dy.to_vec();
                for (chunk, &wt) in dx.chunks_mut(per.max(1)).zip(weights) {
                    chunk.iter_mut().for_each(|e| *e *= wt);
                }
                self.accumulate(grads, *x, dx);
            }
            Op::GatherBatch { x, index } => {
                let per = out.len() / index.len().max(1);
                let mut dx = vec![T::zero(); self.value(*x).len()];
                for (k, &i) in index.iter().enumerate() {
                    for (a, &b) in dx[i * per..(i + 1) * per].iter_mut().zip(&dy[k * per..(k + 1) * per]) {
                        *a += b;
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::ScatterBatch { x, index } => {
                let per = self.value(*x).len() / index.len().max(1);
                let mut dx = Vec::with_capacity(self.value(*x).len());
                for &i in index {
                    dx.extend_from_slice(&dy[i * per..(i + 1) * per]);
                }
                self.accumulate(grads, *x, dx);
            }
        }
    }

    fn accumulate_conv(&self, grads: &mut [Option<Vec<T>>], (x, w, b): (Var, Var, Var), r: ops::ConvGrads<T>) {
        if let Some(dx) = r.dx {
            self.accumulate(grads, x, dx);
        }
        if let Some(dw) = r.dw {
            self.accumulate(grads, w, dw);
        }
        if let Some(db) = r.db {
            self.accumulate(grads, b, db);
        }
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    params: Vec<(ParamId, Var)>,
}

impl<T: Scalar> Gradients<T> {
    pub fn wrt(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn param(&self, id: ParamId) -> Option<&[T]> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|(_, v)| self.wrt(*v))
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[T])> + '_ {
        self.params
            .iter()
            .filter_map(|(p, v)| self.wrt(*v).map(|g| (*p, g)))
    }
}
