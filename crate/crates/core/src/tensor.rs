//! Dense row-major tensors.
//!
//! Training runs in `f32`; the kernels are generic over [`Scalar`] so the
//! gradient checks can run the exact same code paths in `f64`.

use std::fmt::Debug;
use std::ops::{AddAssign, MulAssign};

use rand::Rng;

use crate::error::{Error, Result};

/// Floating-point element type usable by the kernels.
pub trait Scalar:
    Copy
    + Debug
    + Default
    + PartialOrd
    + AddAssign
    + MulAssign
    + Send
    + Sync
    + 'static
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
{
    const ZERO: Self;
    const ONE: Self;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn is_finite(self) -> bool;
    fn exp(self) -> Self;
    fn ln(self) -> Self;

    /// `c = alpha * a * b + beta * c` with explicit strides (see [`matrixmultiply`]).
    ///
    /// # Safety
    ///
    /// The pointers and strides must describe `m x k`, `k x n` and `m x n`
    /// matrices lying inside live allocations, and `c` must not alias `a` or `b`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

macro_rules! impl_scalar {
    ($t:ty, $gemm:path) => {
        impl Scalar for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;

            #[inline]
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            #[inline]
            fn to_f64(self) -> f64 {
                self as f64
            }
            #[inline]
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }
            #[inline]
            fn exp(self) -> Self {
                <$t>::exp(self)
            }
            #[inline]
            fn ln(self) -> Self {
                <$t>::ln(self)
            }

            unsafe fn gemm_raw(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: *const Self,
                rsa: isize,
                csa: isize,
                b: *const Self,
                rsb: isize,
                csb: isize,
                beta: Self,
                c: *mut Self,
                rsc: isize,
                csc: isize,
            ) {
                $gemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

/// Storage order of a matrix operand passed to [`gemm`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Layout {
    /// Stored as given, row-major `rows x cols`.
    Normal,
    /// The operand is the transpose of a row-major buffer.
    Transposed,
}

/// Row-major GEMM on flat slices: `c[m x n] = a[m x k] * b[k x n] + beta * c`.
///
/// `a_layout`/`b_layout` say how the slices are stored: `Transposed` means the
/// slice holds the `k x m` (resp. `n x k`) matrix and the transpose is used.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    a_layout: Layout,
    b: &[T],
    b_layout: Layout,
    beta: T,
    c: &mut [T],
) {
    assert!(a.len() >= m * k, "gemm: lhs too short");
    assert!(b.len() >= k * n, "gemm: rhs too short");
    assert!(c.len() >= m * n, "gemm: output too short");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = match a_layout {
        Layout::Normal => (k as isize, 1),
        Layout::Transposed => (1, m as isize),
    };
    let (rsb, csb) = match b_layout {
        Layout::Normal => (n as isize, 1),
        Layout::Transposed => (1, k as isize),
    };
    // SAFETY: the asserts above guarantee every index touched by the strides
    // (max offset (m-1)*rs + (k-1)*cs < m*k etc.) lies inside the slices.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::ONE,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Dense N-dimensional array in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![T::ZERO; len],
        }
    }

    pub fn filled(shape: &[usize], value: T) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    /// Builds a tensor, checking that `shape` and `data` agree and every extent is positive.
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::dim(format!("shape {shape:?} has a zero extent")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::dim(format!(
                "shape {shape:?} needs {expected} elements, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Uniform random values in `[-bound, bound)`.
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Self {
        let len: usize = shape.iter().product();
        let data = (0..len)
            .map(|_| T::from_f64(bound * (2.0 * rng.gen::<f64>() - 1.0)))
            .collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Same data, new shape. Element count must be preserved.
    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(Error::dim(format!("cannot reshape {:?} into {shape:?}", self.shape)));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Flat offset of a multi-index. Panics on rank or bounds violations.
    pub fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len(), "index rank mismatch");
        index.iter().zip(&self.shape).fold(0, |acc, (&i, &d)| {
            assert!(i < d, "index {index:?} out of bounds for {:?}", self.shape);
            acc * d + i
        })
    }

    pub fn at(&self, index: &[usize]) -> T {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: T) {
        let o = self.offset(index);
        self.data[o] = value;
    }

    pub fn map<U: Scalar>(&self, f: impl Fn(T) -> U) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Copies the hyper-slab at position `at` along `axis` into a new tensor
    /// whose shape has extent 1 on that axis.
    pub fn slice_axis(&self, axis: usize, at: usize) -> Result<Tensor<T>> {
        let data = axis_slice(&self.shape, &self.data, axis, at)?;
        let mut shape = self.shape.clone();
        shape[axis] = 1;
        Ok(Tensor { shape, data })
    }

    /// Inserts `slab` (extent 1 on `axis`, other extents equal) at position `at`.
    pub fn insert_axis(&mut self, axis: usize, at: usize, slab: &[T]) -> Result<()> {
        axis_insert(&mut self.shape, &mut self.data, axis, at, slab)
    }

    /// Removes position `at` along `axis`. Refuses to empty the axis.
    pub fn remove_axis(&mut self, axis: usize, at: usize) -> Result<()> {
        axis_remove(&mut self.shape, &mut self.data, axis, at)
    }

    /// Overwrites the slab at `at` along `axis`.
    pub fn write_axis(&mut self, axis: usize, at: usize, slab: &[T]) -> Result<()> {
        axis_write(&self.shape, &mut self.data, axis, at, slab)
    }
}

fn axis_extents(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::dim(format!("axis {axis} out of range for {shape:?}")));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

pub(crate) fn axis_slice<T: Copy>(shape: &[usize], data: &[T], axis: usize, at: usize) -> Result<Vec<T>> {
    let (outer, extent, inner) = axis_extents(shape, axis)?;
    if at >= extent {
        return Err(Error::dim(format!(
            "slice {at} on axis {axis} out of bounds for {shape:?}"
        )));
    }
    let mut out = Vec::with_capacity(outer * inner);
    for o in 0..outer {
        let start = (o * extent + at) * inner;
        out.extend_from_slice(&data[start..start + inner]);
    }
    Ok(out)
}

pub(crate) fn axis_insert<T: Copy>(
    shape: &mut [usize],
    data: &mut Vec<T>,
    axis: usize,
    at: usize,
    slab: &[T],
) -> Result<()> {
    let (outer, extent, inner) = axis_extents(shape, axis)?;
    if at > extent {
        return Err(Error::dim(format!(
            "insert position {at} on axis {axis} out of bounds for {shape:?}"
        )));
    }
    if slab.len() != outer * inner {
        return Err(Error::dim(format!(
            "slab of {} elements does not fit axis {axis} of {shape:?} (needs {})",
            slab.len(),
            outer * inner
        )));
    }
    let mut out = Vec::with_capacity(data.len() + slab.len());
    for o in 0..outer {
        let base = o * extent * inner;
        out.extend_from_slice(&data[base..base + at * inner]);
        out.extend_from_slice(&slab[o * inner..(o + 1) * inner]);
        out.extend_from_slice(&data[base + at * inner..base + extent * inner]);
    }
    *data = out;
    shape[axis] += 1;
    Ok(())
}

pub(crate) fn axis_remove<T: Copy>(shape: &mut [usize], data: &mut Vec<T>, axis: usize, at: usize) -> Result<()> {
    let (_, extent, inner) = axis_extents(shape, axis)?;
    if at >= extent {
        return Err(Error::dim(format!(
            "remove position {at} on axis {axis} out of bounds for {shape:?}"
        )));
    }
    if extent == 1 {
        return Err(Error::structural(format!(
            "removing the last entry of axis {axis} would empty {shape:?}"
        )));
    }
    let mut idx = 0usize;
    data.retain(|_| {
        let keep = (idx / inner) % extent != at;
        idx += 1;
        keep
    });
    shape[axis] -= 1;
    Ok(())
}

pub(crate) fn axis_write<T: Copy>(shape: &[usize], data: &mut [T], axis: usize, at: usize, slab: &[T]) -> Result<()> {
    let (outer, extent, inner) = axis_extents(shape, axis)?;
    if at >= extent || slab.len() != outer * inner {
        return Err(Error::dim(format!(
            "cannot write slab of {} at {at} on axis {axis} of {shape:?}",
            slab.len()
        )));
    }
    for o in 0..outer {
        let start = (o * extent + at) * inner;
        data[start..start + inner].copy_from_slice(&slab[o * inner..(o + 1) * inner]);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_length() {
        assert!(Tensor::<f32>::from_vec(&[2, 3], vec![0.0; 6]).is_ok());
        assert!(matches!(
            Tensor::<f32>::from_vec(&[2, 3], vec![0.0; 5]),
            Err(Error::Dimension(_))
        ));
        assert!(Tensor::<f32>::from_vec(&[0, 3], vec![]).is_err());
    }

    #[test]
    fn slice_insert_remove_axis() {
        let t = Tensor::<f32>::from_vec(&[2, 3, 2], (0..12).map(|v| v as f32).collect()).unwrap();
        let s = t.slice_axis(1, 1).unwrap();
        assert_eq!(s.shape(), &[2, 1, 2]);
        assert_eq!(s.data(), &[2.0, 3.0, 8.0, 9.0]);

        let mut u = t.clone();
        u.insert_axis(1, 3, &[-1.0, -2.0, -3.0, -4.0]).unwrap();
        assert_eq!(u.shape(), &[2, 4, 2]);
        assert_eq!(u.at(&[0, 3, 1]), -2.0);
        assert_eq!(u.at(&[1, 3, 0]), -3.0);
        u.remove_axis(1, 3).unwrap();
        assert_eq!(u, t);

        let mut w = t.clone();
        w.remove_axis(0, 0).unwrap();
        assert_eq!(w.data(), &t.data()[6..]);
    }

    #[test]
    fn remove_refuses_last_entry() {
        let mut t = Tensor::<f32>::zeros(&[1, 4]);
        assert!(matches!(t.remove_axis(0, 0), Err(Error::Structural(_))));
    }

    #[test]
    fn gemm_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let b = [5.0f64, 6.0, 7.0, 8.0];
        let mut c = [0.0f64; 4];
        gemm(2, 2, 2, &a, Layout::Normal, &b, Layout::Normal, 0.0, &mut c);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        gemm(2, 2, 2, &a, Layout::Transposed, &b, Layout::Normal, 0.0, &mut c);
        // aT = [[1,3],[2,4]]
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        gemm(2, 2, 2, &a, Layout::Normal, &b, Layout::Transposed, 0.0, &mut c);
        // bT = [[5,7],[6,8]]
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }
}
