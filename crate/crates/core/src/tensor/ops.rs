// Forward and backward kernels. All loops run in a fixed order so results
// are bit-identical across runs.

use super::{Scalar, Tensor};

pub(super) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Output columns `lo..hi` whose input column `ox + kj - pad` is in bounds (stride 1).
fn valid_cols(g: &ConvGeom, kj: usize) -> (usize, usize) {
    let lo = g.pad.saturating_sub(kj).min(g.wo);
    let hi = (g.w + g.pad).saturating_sub(kj).min(g.wo).max(lo);
    (lo, hi)
}

/// Patch matrix `[K, N * P]` of the whole batch, built row by row.
fn im2col<T: Scalar>(g: &ConvGeom, x: &[T]) -> Vec<T> {
    let (p, hw) = (g.p(), g.h * g.w);
    let mut cols = Vec::with_capacity(g.k() * g.n * p);
    for ci in 0..g.cin {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let (lo, hi) = valid_cols(g, kj);
                for n in 0..g.n {
                    let plane = &x[(n * g.cin + ci) * hw..][..hw];
                    for oy in 0..g.ho {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            cols.resize(cols.len() + g.wo, T::zero());
                            continue;
                        }
                        let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                        if g.stride == 1 {
                            cols.resize(cols.len() + lo, T::zero());
                            cols.extend_from_slice(&src[lo + kj - g.pad..hi + kj - g.pad]);
                            cols.resize(cols.len() + g.wo - hi, T::zero());
                            continue;
                        }
                        cols.extend((0..g.wo).map(|ox| {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix < 0 || ix >= g.w as isize {
                                T::zero()
                            } else {
                                src[ix as usize]
                            }
                        }));
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: accumulates columns `off..off + P` into one sample's input gradient.
fn col2im<T: Scalar>(g: &ConvGeom, cols: &[T], ld: usize, off: usize, dx: &mut [T]) {
    let p = g.p();
    for ci in 0..g.cin {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = &cols[((ci * g.kh + ki) * g.kw + kj) * ld + off..][..p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    if g.stride == 1 {
                        let (lo, hi) = valid_cols(g, kj);
                        let src = &row[oy * g.wo + lo..oy * g.wo + hi];
                        for (d, &v) in dst[lo + kj - g.pad..hi + kj - g.pad].iter_mut().zip(src) {
                            *d += v;
                        }
                        continue;
                    }
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += row[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `[N, C, P]` to `[C, N * P]`.
fn to_channel_major<T: Scalar>(x: &[T], n: usize, c: usize, p: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(x.len());
    for ch in 0..c {
        for s in 0..n {
            out.extend_from_slice(&x[(s * c + ch) * p..][..p]);
        }
    }
    out
}

/// `[C, N * P]` to `[N, C, P]`.
fn to_sample_major<T: Scalar>(x: &[T], n: usize, c: usize, p: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(x.len());
    for s in 0..n {
        for ch in 0..c {
            out.extend_from_slice(&x[(ch * n + s) * p..][..p]);
        }
    }
    out
}

/// Returns the output and the `[K, N * P]` patch matrix kept for the backward pass.
///
/// The whole batch goes through one matrix product.
pub(super) fn conv2d_forward<T: Scalar>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    b: &[T],
) -> (Vec<T>, Vec<T>) {
    let (k, p) = (g.k(), g.p());
    let np = g.n * p;
    let cols = if g.is_pointwise() {
        to_channel_major(x, g.n, g.cin, p)
    } else {
        im2col(g, x)
    };
    let mut out: Vec<T> = b.iter().flat_map(|&v| std::iter::repeat(v).take(np)).collect();
    T::gemm(g.cout, k, np, w, (k as isize, 1), &cols, (np as isize, 1), T::one(), &mut out);
    (to_sample_major(&out, g.n, g.cout, p), cols)
}

pub(super) struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw: Option<Vec<T>>,
    pub db: Option<Vec<T>>,
}

pub(super) fn conv2d_backward<T: Scalar>(
    g: &ConvGeom,
    cols: &[T],
    w: &[T],
    dout: &[T],
    need: (bool, bool, bool),
) -> ConvGrads<T> {
    let (k, p) = (g.k(), g.p());
    let np = g.n * p;
    let d = to_channel_major(dout, g.n, g.cout, p);
    let dw = need.1.then(|| {
        let mut dw = vec![T::zero(); g.cout * k];
        T::gemm(g.cout, np, k, &d, (np as isize, 1), cols, (1, np as isize), T::zero(), &mut dw);
        dw
    });
    let db = need.2.then(|| d.chunks(np).map(|row| row.iter().copied().sum::<T>()).collect());
    let dx = need.0.then(|| {
        let mut dcols = vec![T::zero(); k * np];
        T::gemm(k, g.cout, np, w, (1, k as isize), &d, (np as isize, 1), T::zero(), &mut dcols);
        if g.is_pointwise() {
            return to_sample_major(&dcols, g.n, g.cin, p);
        }
        let mut dx = vec![T::zero(); g.n * g.cin * g.h * g.w];
        for n in 0..g.n {
            col2im(g, &dcols, np, n * p, &mut dx[n * g.cin * g.h * g.w..(n + 1) * g.cin * g.h * g.w]);
        }
        dx
    });
    ConvGrads { dx, dw, db }
}

/// Stride-2, 2x2 transposed convolution. Kernel layout `[cin, cout, 2, 2]`.
pub(super) fn upsample2_forward<T: Scalar>(
    (n, cin, h, w): (usize, usize, usize, usize),
    cout: usize,
    x: &[T],
    kernel: &[T],
    bias: &[T],
) -> Vec<T> {
    let hw = h * w;
    let rows = cout * 4;
    let mut tmp = vec![T::zero(); rows * hw];
    let (h2, w2) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); n * cout * h2 * w2];
    for s in 0..n {
        let xs = &x[s * cin * hw..(s + 1) * cin * hw];
        T::gemm(rows, cin, hw, kernel, (1, rows as isize), xs, (hw as isize, 1), T::zero(), &mut tmp);
        let o = &mut out[s * cout * h2 * w2..(s + 1) * cout * h2 * w2];
        for co in 0..cout {
            for a in 0..2 {
                for b in 0..2 {
                    let src = &tmp[(co * 4 + a * 2 + b) * hw..][..hw];
                    for i in 0..h {
                        for j in 0..w {
                            o[(co * h2 + 2 * i + a) * w2 + 2 * j + b] = src[i * w + j] + bias[co];
                        }
                    }
                }
            }
        }
    }
    out
}

pub(super) fn upsample2_backward<T: Scalar>(
    (n, cin, h, w): (usize, usize, usize, usize),
    cout: usize,
    x: &[T],
    kernel: &[T],
    dout: &[T],
    need: (bool, bool, bool),
) -> ConvGrads<T> {
    let hw = h * w;
    let rows = cout * 4;
    let (h2, w2) = (2 * h, 2 * w);
    let mut dx = need.0.then(|| vec![T::zero(); x.len()]);
    let mut dw = need.1.then(|| vec![T::zero(); cin * rows]);
    let mut db = need.2.then(|| vec![T::zero(); cout]);
    let mut gathered = vec![T::zero(); rows * hw];
    for s in 0..n {
        let d = &dout[s * cout * h2 * w2..(s + 1) * cout * h2 * w2];
        for co in 0..cout {
            for a in 0..2 {
                for b in 0..2 {
                    let dst = &mut gathered[(co * 4 + a * 2 + b) * hw..][..hw];
                    for i in 0..h {
                        for j in 0..w {
                            dst[i * w + j] = d[(co * h2 + 2 * i + a) * w2 + 2 * j + b];
                        }
                    }
                }
            }
        }
        if let Some(db) = db.as_mut() {
            for (co, plane) in d.chunks(h2 * w2).enumerate() {
                db[co] += plane.iter().copied().sum::<T>();
            }
        }
        let xs = &x[s * cin * hw..(s + 1) * cin * hw];
        if let Some(dw) = dw.as_mut() {
            T::gemm(cin, hw, rows, xs, (hw as isize, 1), &gathered, (1, hw as isize), T::one(), dw);
        }
        if let Some(dx) = dx.as_mut() {
            let dxs = &mut dx[s * cin * hw..(s + 1) * cin * hw];
            T::gemm(cin, rows, hw, kernel, (rows as isize, 1), &gathered, (hw as isize, 1), T::zero(), dxs);
        }
    }
    ConvGrads { dx, dw, db }
}

/// 2x2 max pooling. Returns output and the flat input index of each maximum;
/// ties go to the first element in row-major block order.
pub(super) fn maxpool2_forward<T: Scalar>(x: &Tensor<T>) -> (Vec<T>, Vec<usize>) {
    let s = x.shape();
    let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(nc * ho * wo);
    let mut arg = Vec::with_capacity(nc * ho * wo);
    let d = x.data();
    for plane in 0..nc {
        let base = plane * h * w;
        for i in 0..ho {
            for j in 0..wo {
                let mut best = base + 2 * i * w + 2 * j;
                for (a, b) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * i + a) * w + 2 * j + b;
                    if d[idx] > d[best] {
                        best = idx;
                    }
                }
                out.push(d[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}

pub(super) struct BnSaved<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
}

/// Per-channel statistics over (batch, H, W): biased mean and variance.
pub(super) fn channel_stats<T: Scalar>(x: &[T], n: usize, c: usize, hw: usize) -> (Vec<T>, Vec<T>) {
    let count = T::from_usize(n * hw).unwrap();
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let mut acc = T::zero();
        for s in 0..n {
            acc += x[(s * c + ch) * hw..][..hw].iter().copied().sum::<T>();
        }
        let first = x[ch * hw];
        let constant = (0..n).all(|s| x[(s * c + ch) * hw..][..hw].iter().all(|&v| v == first));
        if constant {
            // exact mean so the normalized channel is exactly zero
            mean[ch] = first;
            continue;
        }
        let m = acc / count;
        let mut sq = T::zero();
        for s in 0..n {
            for &v in &x[(s * c + ch) * hw..][..hw] {
                sq += (v - m) * (v - m);
            }
        }
        mean[ch] = m;
        var[ch] = sq / count;
    }
    (mean, var)
}

pub(super) fn bn_normalize<T: Scalar>(
    x: &[T],
    (n, c, hw): (usize, usize, usize),
    mean: &[T],
    var: &[T],
    eps: T,
    gamma: Option<&[T]>,
    beta: Option<&[T]>,
) -> (Vec<T>, BnSaved<T>) {
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = vec![T::zero(); x.len()];
    let mut y = vec![T::zero(); x.len()];
    for s in 0..n {
        for ch in 0..c {
            let g = gamma.map_or(T::one(), |g| g[ch]);
            let b = beta.map_or(T::zero(), |b| b[ch]);
            let off = (s * c + ch) * hw;
            for i in off..off + hw {
                let xh = (x[i] - mean[ch]) * inv_std[ch];
                xhat[i] = xh;
                y[i] = g * xh + b;
            }
        }
    }
    (y, BnSaved { xhat, inv_std })
}

/// Gradient of batch-statistics normalization with respect to its input.
pub(super) fn bn_backward_batch<T: Scalar>(
    dy: &[T],
    saved: &BnSaved<T>,
    (n, c, hw): (usize, usize, usize),
    gamma: Option<&[T]>,
) -> Vec<T> {
    let m = T::from_usize(n * hw).unwrap();
    let mut dx = vec![T::zero(); dy.len()];
    for ch in 0..c {
        let g = gamma.map_or(T::one(), |g| g[ch]);
        let mut sum_d = T::zero();
        let mut sum_dx = T::zero();
        for s in 0..n {
            let off = (s * c + ch) * hw;
            for i in off..off + hw {
                let d = dy[i] * g;
                sum_d += d;
                sum_dx += d * saved.xhat[i];
            }
        }
        let k = saved.inv_std[ch] / m;
        for s in 0..n {
            let off = (s * c + ch) * hw;
            for i in off..off + hw {
                let d = dy[i] * g;
                dx[i] = k * (m * d - sum_d - saved.xhat[i] * sum_dx);
            }
        }
    }
    dx
}

/// Mean cross-entropy over all voxels. Returns the loss and the softmax probabilities.
pub(super) fn softmax_xent_forward<T: Scalar>(
    logits: &[T],
    labels: &[u8],
    (n, k, hw): (usize, usize, usize),
) -> (T, Vec<T>) {
    let mut probs = vec![T::zero(); logits.len()];
    let mut total = T::zero();
    for s in 0..n {
        for p in 0..hw {
            let at = |c: usize| (s * k + c) * hw + p;
            let mut mx = logits[at(0)];
            for c in 1..k {
                mx = mx.max(logits[at(c)]);
            }
            let mut z = T::zero();
            for c in 0..k {
                let e = (logits[at(c)] - mx).exp();
                probs[at(c)] = e;
                z += e;
            }
            for c in 0..k {
                probs[at(c)] = probs[at(c)] / z;
            }
            let label = labels[s * hw + p] as usize;
            total += z.ln() + mx - logits[at(label)];
        }
    }
    (total / T::from_usize(n * hw).unwrap(), probs)
}
