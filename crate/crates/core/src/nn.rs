//! Forward/backward kernels for the five layer types plus the SGD step.
//!
//! Layouts are NCHW for feature maps, `[O, I, K, K]` for conv weights and
//! `[O, I]` for fully-connected weights. Convolutions are lowered to one
//! GEMM per call over an im2col buffer spanning the whole batch, so the
//! reduction order is fixed and results are bit-deterministic.

use std::ops::Range;

use crate::error::{Error, Result};
use crate::tensor::{gemm, Layout, Scalar, Tensor};

/// Convolution parameters: weights `[O, I, K, K]`, bias `[O]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams<T = f32> {
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Scalar> ConvParams<T> {
    pub fn new(weights: Tensor<T>, bias: Tensor<T>, stride: usize, padding: usize) -> Result<Self> {
        let p = Self {
            weights,
            bias,
            stride,
            padding,
        };
        p.check()?;
        Ok(p)
    }

    pub fn out_channels(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn kernel(&self) -> usize {
        self.weights.shape()[2]
    }

    pub(crate) fn check(&self) -> Result<()> {
        let s = self.weights.shape();
        if s.len() != 4 || s[2] != s[3] {
            return Err(Error::dim(format!(
                "conv weights must be [O, I, K, K] with a square kernel, got {s:?}"
            )));
        }
        if self.bias.shape() != [s[0]] {
            return Err(Error::dim(format!(
                "conv bias shape {:?} does not match {} output channels",
                self.bias.shape(),
                s[0]
            )));
        }
        if self.stride == 0 {
            return Err(Error::geometry("stride must be positive"));
        }
        Ok(())
    }

    /// Output extent for one spatial axis.
    pub fn output_extent(&self, input: usize) -> Result<usize> {
        conv_output_extent(input, self.kernel(), self.stride, self.padding)
    }
}

/// `(input + 2*padding - kernel) / stride + 1`, rejecting non-integer or empty results.
pub fn conv_output_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    let padded = input + 2 * padding;
    if stride == 0 || kernel == 0 || padded < kernel {
        return Err(Error::geometry(format!(
            "kernel {kernel} does not fit input {input} with padding {padding}"
        )));
    }
    if !(padded - kernel).is_multiple_of(stride) {
        return Err(Error::geometry(format!(
            "({input} + 2*{padding} - {kernel}) is not divisible by stride {stride}"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

/// Fully-connected parameters: weights `[O, I]`, bias `[O]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FcParams<T = f32> {
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> FcParams<T> {
    pub fn new(weights: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        let p = Self { weights, bias };
        p.check()?;
        Ok(p)
    }

    pub fn outputs(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn inputs(&self) -> usize {
        self.weights.shape()[1]
    }

    pub(crate) fn check(&self) -> Result<()> {
        let s = self.weights.shape();
        if s.len() != 2 {
            return Err(Error::dim(format!("fc weights must be [O, I], got {s:?}")));
        }
        if self.bias.shape() != [s[0]] {
            return Err(Error::dim(format!(
                "fc bias shape {:?} does not match {} outputs",
                self.bias.shape(),
                s[0]
            )));
        }
        Ok(())
    }
}

/// Gradients of a parameterized layer, shaped like input, weights and bias.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle<T = f32> {
    pub d_input: Tensor<T>,
    pub d_weights: Tensor<T>,
    pub d_bias: Tensor<T>,
}

/// Per-weight activity flags. A cleared position is pinned to `0.0`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WeightMask {
    shape: Vec<usize>,
    bits: Vec<bool>,
}

impl WeightMask {
    pub fn all_active(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            bits: vec![true; shape.iter().product()],
        }
    }

    pub fn from_bits(shape: &[usize], bits: Vec<bool>) -> Result<Self> {
        if shape.iter().product::<usize>() != bits.len() {
            return Err(Error::dim(format!(
                "mask of {} bits does not match shape {shape:?}",
                bits.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            bits,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn is_active(&self, i: usize) -> bool {
        self.bits[i]
    }

    pub fn clear(&mut self, i: usize) {
        self.bits[i] = false;
    }

    pub fn active_count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub(crate) fn slice_axis(&self, axis: usize, at: usize) -> Result<Vec<bool>> {
        crate::tensor::axis_slice(&self.shape, &self.bits, axis, at)
    }

    pub(crate) fn insert_axis(&mut self, axis: usize, at: usize, slab: &[bool]) -> Result<()> {
        crate::tensor::axis_insert(&mut self.shape, &mut self.bits, axis, at, slab)
    }

    pub(crate) fn remove_axis(&mut self, axis: usize, at: usize) -> Result<()> {
        crate::tensor::axis_remove(&mut self.shape, &mut self.bits, axis, at)
    }

    /// Zeroes every masked position of `values`.
    pub fn apply<T: Scalar>(&self, values: &mut [T]) {
        for (v, &b) in values.iter_mut().zip(&self.bits) {
            if !b {
                *v = T::ZERO;
            }
        }
    }
}

fn shape4(x: &Tensor<impl Scalar>, what: &str) -> Result<[usize; 4]> {
    match *x.shape() {
        [a, b, c, d] => Ok([a, b, c, d]),
        ref s => Err(Error::dim(format!("{what} must be 4-dimensional, got {s:?}"))),
    }
}

fn shape2(x: &Tensor<impl Scalar>, what: &str) -> Result<[usize; 2]> {
    match *x.shape() {
        [a, b] => Ok([a, b]),
        ref s => Err(Error::dim(format!("{what} must be 2-dimensional, got {s:?}"))),
    }
}

struct ConvGeometry {
    n: usize,
    i: usize,
    h: usize,
    w: usize,
    o: usize,
    k: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeometry {
    fn new<T: Scalar>(x: &Tensor<T>, p: &ConvParams<T>) -> Result<Self> {
        p.check()?;
        let [n, i, h, w] = shape4(x, "conv input")?;
        if i != p.in_channels() {
            return Err(Error::dim(format!(
                "conv input has {i} channels, weights expect {}",
                p.in_channels()
            )));
        }
        Ok(Self {
            n,
            i,
            h,
            w,
            o: p.out_channels(),
            k: p.kernel(),
            ho: p.output_extent(h)?,
            wo: p.output_extent(w)?,
            stride: p.stride,
            pad: p.padding,
        })
    }

    fn patch(&self) -> usize {
        self.i * self.k * self.k
    }

    fn plane(&self) -> usize {
        self.ho * self.wo
    }

    /// Maps an output position and kernel tap to the input coordinate, or
    /// `None` inside the zero padding.
    #[inline]
    fn source(&self, out: usize, tap: usize, extent: usize) -> Option<usize> {
        (out * self.stride + tap).checked_sub(self.pad).filter(|&v| v < extent)
    }

    /// Output columns `[lo, hi)` whose tap `q` lands inside the input row.
    fn valid_cols(&self, q: usize) -> (usize, usize) {
        let lo = (0..self.wo).find(|&c| self.source(c, q, self.w).is_some());
        match lo {
            Some(lo) => {
                let hi = (lo..self.wo)
                    .take_while(|&c| self.source(c, q, self.w).is_some())
                    .last()
                    .map_or(lo, |c| c + 1);
                (lo, hi)
            }
            None => (0, 0),
        }
    }

    /// Visits every (im2col row segment, input row segment) pair for the
    /// samples `batch`: `f(dst_offset, src_offset, len, src_step)`. The
    /// destination is a `[I*K*K, len(batch)*Ho*Wo]` buffer; the source is
    /// the full NCHW input.
    fn for_each_segment(&self, batch: Range<usize>, mut f: impl FnMut(usize, usize, usize, usize)) {
        let cols_n = batch.len() * self.plane();
        for ch in 0..self.i {
            for m in 0..self.k {
                for q in 0..self.k {
                    let row = (ch * self.k + m) * self.k + q;
                    let (lo, hi) = self.valid_cols(q);
                    if lo >= hi {
                        continue;
                    }
                    let wc0 = lo * self.stride + q - self.pad;
                    for (slot, b) in batch.clone().enumerate() {
                        let src_plane = (b * self.i + ch) * self.h * self.w;
                        for r in 0..self.ho {
                            let Some(hr) = self.source(r, m, self.h) else { continue };
                            let dst = row * cols_n + slot * self.plane() + r * self.wo + lo;
                            f(dst, src_plane + hr * self.w + wc0, hi - lo, self.stride);
                        }
                    }
                }
            }
        }
    }

    /// im2col of the samples `batch` into `cols` (`[I*K*K, len*Ho*Wo]`, fully overwritten).
    fn im2col<T: Scalar>(&self, x: &[T], batch: Range<usize>, cols: &mut [T]) {
        cols.fill(T::ZERO);
        self.for_each_segment(batch, |dst, src, len, step| {
            if step == 1 {
                cols[dst..dst + len].copy_from_slice(&x[src..src + len]);
            } else {
                for (d, s) in cols[dst..dst + len].iter_mut().zip(x[src..].iter().step_by(step)) {
                    *d = *s;
                }
            }
        });
    }

    /// Scatter-add of a chunk's `[I*K*K, len*Ho*Wo]` buffer back onto the NCHW input gradient.
    fn col2im<T: Scalar>(&self, cols: &[T], batch: Range<usize>, dx: &mut [T]) {
        self.for_each_segment(batch, |dst, src, len, step| {
            let from = &cols[dst..dst + len];
            if step == 1 {
                for (d, &s) in dx[src..src + len].iter_mut().zip(from) {
                    *d += s;
                }
            } else {
                for (d, &s) in dx[src..].iter_mut().step_by(step).zip(from) {
                    *d += s;
                }
            }
        });
    }

    /// Sample chunks whose im2col buffer stays around `CHUNK_ELEMS` elements.
    fn chunks(&self) -> impl Iterator<Item = Range<usize>> {
        let per = (self.patch() * self.plane()).max(1);
        let step = (CHUNK_ELEMS / per).clamp(1, self.n.max(1));
        let n = self.n;
        (0..n).step_by(step).map(move |b| b..(b + step).min(n))
    }
}

/// Working-set target for one im2col chunk (elements), sized to stay cache resident.
const CHUNK_ELEMS: usize = 1 << 16;

/// 2D convolution `y[n,o,r,c] = b[o] + sum w[o,i,m,q] * xpad[n,i,r*s+m,c*s+q]`.
pub fn conv2d_forward<T: Scalar>(x: &Tensor<T>, p: &ConvParams<T>) -> Result<Tensor<T>> {
    let g = ConvGeometry::new(x, p)?;
    let plane = g.plane();
    let mut y = vec![T::ZERO; g.n * g.o * plane];
    let mut cols = Vec::new();
    let mut tmp = Vec::new();
    for batch in g.chunks() {
        let cols_n = batch.len() * plane;
        cols.resize(g.patch() * cols_n, T::ZERO);
        tmp.resize(g.o * cols_n, T::ZERO);
        g.im2col(x.data(), batch.clone(), &mut cols);
        gemm(
            g.o,
            g.patch(),
            cols_n,
            p.weights.data(),
            Layout::Normal,
            &cols,
            Layout::Normal,
            T::ZERO,
            &mut tmp,
        );
        for (slot, b) in batch.enumerate() {
            for o in 0..g.o {
                let bias = p.bias.data()[o];
                let src = &tmp[o * cols_n + slot * plane..o * cols_n + (slot + 1) * plane];
                let dst = &mut y[(b * g.o + o) * plane..(b * g.o + o + 1) * plane];
                for (d, &v) in dst.iter_mut().zip(src) {
                    *d = v + bias;
                }
            }
        }
    }
    Tensor::from_vec(&[g.n, g.o, g.ho, g.wo], y)
}

/// Adjoint of [`conv2d_forward`].
pub fn conv2d_backward<T: Scalar>(x: &Tensor<T>, p: &ConvParams<T>, dy: &Tensor<T>) -> Result<GradientBundle<T>> {
    conv2d_backward_opt(x, p, dy, true)
}

/// As [`conv2d_backward`]; with `input_grad == false` the `d_input` field is
/// left as zeros (used for the first layer, whose input gradient is never read).
pub(crate) fn conv2d_backward_opt<T: Scalar>(
    x: &Tensor<T>,
    p: &ConvParams<T>,
    dy: &Tensor<T>,
    input_grad: bool,
) -> Result<GradientBundle<T>> {
    let g = ConvGeometry::new(x, p)?;
    let expected = [g.n, g.o, g.ho, g.wo];
    if dy.shape() != expected {
        return Err(Error::dim(format!(
            "conv output gradient has shape {:?}, expected {expected:?}",
            dy.shape()
        )));
    }
    let plane = g.plane();
    let mut d_bias = vec![T::ZERO; g.o];
    for (idx, row) in dy.data().chunks_exact(plane).enumerate() {
        let db = &mut d_bias[idx % g.o];
        for &v in row {
            *db += v;
        }
    }

    let mut d_w = vec![T::ZERO; g.o * g.patch()];
    let mut d_x = vec![T::ZERO; x.len()];
    let (mut cols, mut dyp) = (Vec::new(), Vec::new());
    for batch in g.chunks() {
        let cols_n = batch.len() * plane;
        // dy of this chunk as [O, len*Ho*Wo]
        dyp.resize(g.o * cols_n, T::ZERO);
        for (slot, b) in batch.clone().enumerate() {
            for o in 0..g.o {
                let src = &dy.data()[(b * g.o + o) * plane..(b * g.o + o + 1) * plane];
                dyp[o * cols_n + slot * plane..o * cols_n + (slot + 1) * plane].copy_from_slice(src);
            }
        }
        cols.resize(g.patch() * cols_n, T::ZERO);
        g.im2col(x.data(), batch.clone(), &mut cols);
        gemm(
            g.o,
            cols_n,
            g.patch(),
            &dyp,
            Layout::Normal,
            &cols,
            Layout::Transposed,
            T::ONE,
            &mut d_w,
        );
        if input_grad {
            gemm(
                g.patch(),
                g.o,
                cols_n,
                p.weights.data(),
                Layout::Transposed,
                &dyp,
                Layout::Normal,
                T::ZERO,
                &mut cols,
            );
            g.col2im(&cols, batch, &mut d_x);
        }
    }

    Ok(GradientBundle {
        d_input: Tensor::from_vec(x.shape(), d_x)?,
        d_weights: Tensor::from_vec(p.weights.shape(), d_w)?,
        d_bias: Tensor::from_vec(p.bias.shape(), d_bias)?,
    })
}

/// `y = x * W^T + b`.
pub fn fc_forward<T: Scalar>(x: &Tensor<T>, p: &FcParams<T>) -> Result<Tensor<T>> {
    p.check()?;
    let [n, i] = shape2(x, "fc input")?;
    if i != p.inputs() {
        return Err(Error::dim(format!(
            "fc input has {i} columns, weights expect {}",
            p.inputs()
        )));
    }
    let o = p.outputs();
    let mut y = Vec::with_capacity(n * o);
    for _ in 0..n {
        y.extend_from_slice(p.bias.data());
    }
    gemm(
        n,
        i,
        o,
        x.data(),
        Layout::Normal,
        p.weights.data(),
        Layout::Transposed,
        T::ONE,
        &mut y,
    );
    Tensor::from_vec(&[n, o], y)
}

/// `dW = dy^T x`, `dx = dy W`, `db = column sums of dy`.
pub fn fc_backward<T: Scalar>(x: &Tensor<T>, p: &FcParams<T>, dy: &Tensor<T>) -> Result<GradientBundle<T>> {
    p.check()?;
    let [n, i] = shape2(x, "fc input")?;
    let o = p.outputs();
    if i != p.inputs() || dy.shape() != [n, o] {
        return Err(Error::dim(format!(
            "fc backward: input {:?}, output gradient {:?}, weights {:?} disagree",
            x.shape(),
            dy.shape(),
            p.weights.shape()
        )));
    }
    let mut d_w = vec![T::ZERO; o * i];
    gemm(
        o,
        n,
        i,
        dy.data(),
        Layout::Transposed,
        x.data(),
        Layout::Normal,
        T::ZERO,
        &mut d_w,
    );
    let mut d_x = vec![T::ZERO; n * i];
    gemm(
        n,
        o,
        i,
        dy.data(),
        Layout::Normal,
        p.weights.data(),
        Layout::Normal,
        T::ZERO,
        &mut d_x,
    );
    let mut d_b = vec![T::ZERO; o];
    for row in dy.data().chunks_exact(o) {
        for (acc, &v) in d_b.iter_mut().zip(row) {
            *acc += v;
        }
    }
    Ok(GradientBundle {
        d_input: Tensor::from_vec(x.shape(), d_x)?,
        d_weights: Tensor::from_vec(p.weights.shape(), d_w)?,
        d_bias: Tensor::from_vec(p.bias.shape(), d_b)?,
    })
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::ZERO { v } else { T::ZERO })
}

/// `dx = dy * 1[x > 0]`.
pub fn relu_backward<T: Scalar>(x: &Tensor<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
    if x.shape() != dy.shape() {
        return Err(Error::dim(format!(
            "relu backward: input {:?} vs gradient {:?}",
            x.shape(),
            dy.shape()
        )));
    }
    let data = x
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&v, &g)| if v > T::ZERO { g } else { T::ZERO })
        .collect();
    Tensor::from_vec(x.shape(), data)
}

/// Argmax bookkeeping recorded by [`maxpool2`] for the backward pass.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PoolIndices {
    input_shape: [usize; 4],
    /// Flat input offset of each output element's window maximum.
    argmax: Vec<usize>,
}

impl PoolIndices {
    pub fn argmax(&self) -> &[usize] {
        &self.argmax
    }
}

/// 2x2 max pooling with stride 2. Ties go to the first maximum in row-major window order.
pub fn maxpool2<T: Scalar>(x: &Tensor<T>) -> Result<(Tensor<T>, PoolIndices)> {
    let [n, c, h, w] = shape4(x, "pool input")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::geometry(format!("2x2 pooling needs even extents, got {h}x{w}")));
    }
    let (ho, wo) = (h / 2, w / 2);
    let src = x.data();
    let mut y = Vec::with_capacity(n * c * ho * wo);
    let mut argmax = Vec::with_capacity(n * c * ho * wo);
    for plane in 0..n * c {
        let base = plane * h * w;
        for r in 0..ho {
            let top = base + 2 * r * w;
            let upper = &src[top..top + w];
            let lower = &src[top + w..top + 2 * w];
            for q in 0..wo {
                let mut best = upper[2 * q];
                let mut at = top + 2 * q;
                for (v, pos) in [
                    (upper[2 * q + 1], top + 2 * q + 1),
                    (lower[2 * q], top + w + 2 * q),
                    (lower[2 * q + 1], top + w + 2 * q + 1),
                ] {
                    let better = v > best;
                    best = if better { v } else { best };
                    at = if better { pos } else { at };
                }
                y.push(best);
                argmax.push(at);
            }
        }
    }
    Ok((
        Tensor::from_vec(&[n, c, ho, wo], y)?,
        PoolIndices {
            input_shape: [n, c, h, w],
            argmax,
        },
    ))
}

/// Routes `dy` to the recorded argmax positions; everything else gets zero.
pub fn maxpool2_backward<T: Scalar>(dy: &Tensor<T>, idx: &PoolIndices) -> Result<Tensor<T>> {
    if dy.len() != idx.argmax.len() {
        return Err(Error::dim(format!(
            "pool backward: gradient has {} elements, forward produced {}",
            dy.len(),
            idx.argmax.len()
        )));
    }
    let mut dx = Tensor::zeros(&idx.input_shape);
    let out = dx.data_mut();
    for (&pos, &g) in idx.argmax.iter().zip(dy.data()) {
        out[pos] += g;
    }
    Ok(dx)
}

/// Mean softmax cross-entropy over the batch and its gradient `(softmax - onehot) / N`.
pub fn softmax_cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)> {
    let [n, c] = shape2(logits, "logits")?;
    if labels.len() != n {
        return Err(Error::InvalidInput(format!(
            "{} labels for a batch of {n}",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::InvalidInput(format!("label {bad} out of range for {c} classes")));
    }
    let inv_n = T::ONE / T::from_f64(n as f64);
    let mut loss = T::ZERO;
    let mut grad = Vec::with_capacity(n * c);
    for (row, &label) in logits.data().chunks_exact(c).zip(labels) {
        let max = row.iter().copied().fold(row[0], |m, v| if v > m { v } else { m });
        let mut sum = T::ZERO;
        let start = grad.len();
        for &v in row {
            let e = (v - max).exp();
            sum += e;
            grad.push(e);
        }
        loss += sum.ln() - (row[label] - max);
        for g in &mut grad[start..] {
            *g = *g / sum * inv_n;
        }
        grad[start + label] = grad[start + label] - inv_n;
    }
    Ok((loss * inv_n, Tensor::from_vec(&[n, c], grad)?))
}

/// Classical momentum SGD with weight decay folded into the gradient:
/// `v = momentum*v + grad + wd*param; param -= lr*v`. Masked entries are
/// pinned at exactly zero (parameter and velocity).
pub fn sgd_update<T: Scalar>(
    param: &mut Tensor<T>,
    grad: &Tensor<T>,
    velocity: &mut Tensor<T>,
    lr: T,
    momentum: T,
    weight_decay: T,
    mask: Option<&WeightMask>,
) -> Result<()> {
    if param.shape() != grad.shape() || param.shape() != velocity.shape() {
        return Err(Error::dim(format!(
            "sgd: param {:?}, grad {:?}, velocity {:?} disagree",
            param.shape(),
            grad.shape(),
            velocity.shape()
        )));
    }
    if let Some(m) = mask {
        if m.len() != param.len() {
            return Err(Error::dim(format!(
                "sgd: mask of {} bits for {} parameters",
                m.len(),
                param.len()
            )));
        }
    }
    let g = grad.data();
    let v = velocity.data_mut();
    let p = param.data_mut();
    for idx in 0..p.len() {
        if mask.is_some_and(|m| !m.is_active(idx)) {
            p[idx] = T::ZERO;
            v[idx] = T::ZERO;
            continue;
        }
        v[idx] = momentum * v[idx] + g[idx] + weight_decay * p[idx];
        p[idx] = p[idx] - lr * v[idx];
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f32]) -> Tensor<f32> {
        Tensor::from_vec(shape, data.to_vec()).unwrap()
    }

    fn conv(w: Tensor<f32>, stride: usize, padding: usize) -> ConvParams<f32> {
        let o = w.shape()[0];
        ConvParams::new(w, Tensor::zeros(&[o]), stride, padding).unwrap()
    }

    /// Direct quadruple-loop convolution, written independently of the im2col path.
    fn naive_conv(x: &Tensor<f64>, p: &ConvParams<f64>) -> Tensor<f64> {
        let [n, ci, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
        let (o, k, s, pad) = (p.out_channels(), p.kernel(), p.stride, p.padding as isize);
        let ho = (h + 2 * p.padding - k) / s + 1;
        let wo = (w + 2 * p.padding - k) / s + 1;
        let mut y = Tensor::zeros(&[n, o, ho, wo]);
        for b in 0..n {
            for oc in 0..o {
                for r in 0..ho {
                    for c in 0..wo {
                        let mut acc = p.bias.data()[oc];
                        for ic in 0..ci {
                            for m in 0..k {
                                for q in 0..k {
                                    let hr = (r * s + m) as isize - pad;
                                    let wc = (c * s + q) as isize - pad;
                                    if hr < 0 || wc < 0 || hr >= h as isize || wc >= w as isize {
                                        continue;
                                    }
                                    acc += p.weights.at(&[oc, ic, m, q]) * x.at(&[b, ic, hr as usize, wc as usize]);
                                }
                            }
                        }
                        y.set(&[b, oc, r, c], acc);
                    }
                }
            }
        }
        y
    }

    #[test]
    fn conv_all_ones() {
        let x = Tensor::filled(&[1, 1, 3, 3], 1.0f32);
        let p = conv(Tensor::filled(&[1, 1, 2, 2], 1.0), 1, 0);
        let y = conv2d_forward(&x, &p).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert_eq!(y.data(), &[4.0; 4]);
    }

    #[test]
    fn conv_hand_expanded() {
        let x = t(&[1, 1, 3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]);
        let p = conv(t(&[1, 1, 2, 2], &[1., 0., 0., -1.]), 1, 0);
        let y = conv2d_forward(&x, &p).unwrap();
        assert_eq!(y.data(), &[-4.0; 4]);
    }

    #[test]
    fn conv_matches_naive_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &(k, stride, pad, h) in &[(3, 1, 0, 7), (1, 1, 0, 4), (2, 2, 0, 8), (5, 1, 2, 8), (3, 1, 1, 5)] {
            let x = Tensor::<f64>::uniform(&[2, 3, h, h], 1.0, &mut rng);
            let w = Tensor::<f64>::uniform(&[4, 3, k, k], 1.0, &mut rng);
            let b = Tensor::<f64>::uniform(&[4], 1.0, &mut rng);
            let p = ConvParams::new(w, b, stride, pad).unwrap();
            let fast = conv2d_forward(&x, &p).unwrap();
            let slow = naive_conv(&x, &p);
            assert_eq!(fast.shape(), slow.shape());
            for (a, e) in fast.data().iter().zip(slow.data()) {
                assert!((a - e).abs() <= 1e-5 * e.abs().max(1.0), "{a} vs {e}");
            }
        }
    }

    #[test]
    fn conv_rejects_bad_shapes() {
        let p = conv(Tensor::filled(&[1, 2, 2, 2], 1.0), 1, 0);
        let x = Tensor::<f32>::zeros(&[1, 1, 3, 3]);
        assert!(matches!(conv2d_forward(&x, &p), Err(Error::Dimension(_))));
        let p = conv(Tensor::filled(&[1, 1, 2, 2], 1.0), 2, 0);
        assert!(matches!(conv2d_forward(&x, &p), Err(Error::Geometry(_))));
        let p = conv(Tensor::filled(&[1, 1, 5, 5], 1.0), 1, 0);
        assert!(matches!(conv2d_forward(&x, &p), Err(Error::Geometry(_))));
    }

    #[test]
    fn conv_backward_scalar_product_rule() {
        let x = t(&[1, 1, 1, 1], &[2.0]);
        let p = conv(t(&[1, 1, 1, 1], &[3.0]), 1, 0);
        assert_eq!(conv2d_forward(&x, &p).unwrap().data(), &[6.0]);
        let g = conv2d_backward(&x, &p, &t(&[1, 1, 1, 1], &[1.0])).unwrap();
        assert_eq!(g.d_weights.data(), &[2.0]);
        assert_eq!(g.d_input.data(), &[3.0]);
        assert_eq!(g.d_bias.data(), &[1.0]);
    }

    #[test]
    fn conv_backward_zero_upstream() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f32>::uniform(&[2, 2, 5, 5], 1.0, &mut rng);
        let p = ConvParams::new(
            Tensor::uniform(&[3, 2, 3, 3], 1.0, &mut rng),
            Tensor::uniform(&[3], 1.0, &mut rng),
            1,
            1,
        )
        .unwrap();
        let g = conv2d_backward(&x, &p, &Tensor::zeros(&[2, 3, 5, 5])).unwrap();
        assert!(g.d_input.data().iter().all(|&v| v == 0.0));
        assert!(g.d_weights.data().iter().all(|&v| v == 0.0));
        assert!(g.d_bias.data().iter().all(|&v| v == 0.0));
        assert!(conv2d_backward(&x, &p, &Tensor::zeros(&[2, 3, 4, 4])).is_err());
    }

    #[test]
    fn fc_small_cases() {
        let p = FcParams::new(t(&[2, 2], &[1., 2., 3., 4.]), Tensor::zeros(&[2])).unwrap();
        assert_eq!(fc_forward(&t(&[1, 2], &[1., 1.]), &p).unwrap().data(), &[3.0, 7.0]);

        let id = FcParams::new(t(&[3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]), Tensor::zeros(&[3])).unwrap();
        let x = t(&[2, 3], &[0.5, -1.0, 2.0, 3.0, 0.0, -4.0]);
        assert_eq!(fc_forward(&x, &id).unwrap(), x);

        let g = fc_backward(&t(&[1, 2], &[1., 0.]), &p, &t(&[1, 2], &[1., 0.])).unwrap();
        assert_eq!(g.d_weights.data(), &[1., 0., 0., 0.]);

        let z = fc_backward(&x, &id, &Tensor::zeros(&[2, 3])).unwrap();
        assert!(z
            .d_input
            .data()
            .iter()
            .chain(z.d_weights.data())
            .chain(z.d_bias.data())
            .all(|&v| v == 0.0));

        assert!(matches!(
            fc_forward(&t(&[1, 3], &[1., 1., 1.]), &p),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn fc_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::<f64>::uniform(&[3, 7], 1.0, &mut rng);
        let p = FcParams::new(
            Tensor::uniform(&[5, 7], 1.0, &mut rng),
            Tensor::uniform(&[5], 1.0, &mut rng),
        )
        .unwrap();
        let y = fc_forward(&x, &p).unwrap();
        for n in 0..3 {
            for o in 0..5 {
                let mut acc = p.bias.data()[o];
                for i in 0..7 {
                    acc += p.weights.at(&[o, i]) * x.at(&[n, i]);
                }
                assert!((y.at(&[n, o]) - acc).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn relu_cases() {
        assert_eq!(relu(&t(&[3], &[-1., 0., 2.])).data(), &[0., 0., 2.]);
        let dx = relu_backward(&t(&[2], &[-1., 2.]), &t(&[2], &[5., 5.])).unwrap();
        assert_eq!(dx.data(), &[0., 5.]);
        assert!(relu_backward(&t(&[2], &[1., 1.]), &t(&[3], &[1., 1., 1.])).is_err());
    }

    #[test]
    fn maxpool_cases() {
        let (y, _) = maxpool2(&t(&[1, 1, 2, 2], &[1., 2., 3., 4.])).unwrap();
        assert_eq!(y.data(), &[4.0]);

        let x = t(&[1, 1, 2, 2], &[7., 7., 7., 7.]);
        let (y, idx) = maxpool2(&x).unwrap();
        assert_eq!(y.data(), &[7.0]);
        let dx = maxpool2_backward(&t(&[1, 1, 1, 1], &[1.0]), &idx).unwrap();
        assert_eq!(dx.data(), &[1., 0., 0., 0.]);

        assert!(matches!(
            maxpool2(&Tensor::<f32>::zeros(&[1, 1, 3, 2])),
            Err(Error::Geometry(_))
        ));
    }

    #[test]
    fn maxpool_matches_window_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::<f32>::uniform(&[2, 3, 6, 4], 1.0, &mut rng);
        let (y, _) = maxpool2(&x).unwrap();
        for b in 0..2 {
            for c in 0..3 {
                for r in 0..3 {
                    for q in 0..2 {
                        let m = [(0, 0), (0, 1), (1, 0), (1, 1)]
                            .iter()
                            .map(|&(dr, dq)| x.at(&[b, c, 2 * r + dr, 2 * q + dq]))
                            .fold(f32::NEG_INFINITY, f32::max);
                        assert_eq!(y.at(&[b, c, r, q]), m);
                    }
                }
            }
        }
    }

    #[test]
    fn softmax_ce_values() {
        let (loss, _) = softmax_cross_entropy(&t(&[1, 2], &[0., 0.]), &[0]).unwrap();
        assert!((loss - std::f32::consts::LN_2).abs() < 1e-6);
        let (loss, g) = softmax_cross_entropy(&t(&[1, 2], &[1000., -1000.]), &[0]).unwrap();
        assert!(loss.abs() < 1e-6 && loss.is_finite());
        assert!(g.all_finite());
        assert!(matches!(
            softmax_cross_entropy(&t(&[1, 2], &[0., 0.]), &[2]),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn sgd_plain_step() {
        let mut p = t(&[1], &[1.0]);
        let mut v = Tensor::zeros(&[1]);
        sgd_update(&mut p, &t(&[1], &[1.0]), &mut v, 0.1, 0.0, 0.0, None).unwrap();
        assert!((p.data()[0] - 0.9).abs() < 1e-7);
    }

    #[test]
    fn sgd_momentum_two_steps_closed_form() {
        // v1 = g, v2 = 0.9 g + g; total change = -lr (g + 1.9 g)
        let (lr, g) = (0.05f64, 0.7f64);
        let mut p = Tensor::<f64>::from_vec(&[1], vec![0.0]).unwrap();
        let mut v = Tensor::zeros(&[1]);
        let grad = Tensor::from_vec(&[1], vec![g]).unwrap();
        for _ in 0..2 {
            sgd_update(&mut p, &grad, &mut v, lr, 0.9, 0.0, None).unwrap();
        }
        assert!((p.data()[0] - (-lr * (g + 1.9 * g))).abs() < 1e-12);
    }

    #[test]
    fn sgd_mask_pins_zero() {
        let mut p = t(&[2], &[0.0, 1.0]);
        let mut v = Tensor::zeros(&[2]);
        let mut mask = WeightMask::all_active(&[2]);
        mask.clear(0);
        for _ in 0..100 {
            sgd_update(&mut p, &t(&[2], &[123.0, 0.5]), &mut v, 0.1, 0.9, 5e-4, Some(&mask)).unwrap();
        }
        assert_eq!(p.data()[0].to_bits(), 0.0f32.to_bits());
        assert!(p.data()[1] != 1.0);
        assert!(sgd_update(&mut p, &t(&[1], &[0.0]), &mut v, 0.1, 0.9, 0.0, None).is_err());
    }
}
