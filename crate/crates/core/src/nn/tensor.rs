use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Result, SrnrError};

/// Floating-point element type of tensors and network parameters.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    fn of(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("f64 converts to every Real")
    }

    fn f64(self) -> f64 {
        ToPrimitive::to_f64(&self).expect("every Real converts to f64")
    }

    /// `C = alpha * A * B + beta * C` for strided row/column-major views.
    ///
    /// # Safety
    /// Every element addressed by the dimensions and strides must lie inside
    /// the corresponding allocation, and `c` must not alias `a` or `b`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
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

impl Real for f32 {
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Real for f64 {
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// Dense 5D tensor laid out as `(batch, channels, x, y, z)`, `z` fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor5<T> {
    shape: [usize; 5],
    data: Vec<T>,
}

impl<T: Real> Tensor5<T> {
    pub fn zeros(shape: [usize; 5]) -> Self {
        Tensor5 {
            shape,
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 5], data: Vec<T>) -> Result<Self> {
        if data.len() != shape.iter().product::<usize>() {
            return Err(SrnrError::Shape(format!(
                "tensor data length {} does not match shape {shape:?}",
                data.len()
            )));
        }
        Ok(Tensor5 { shape, data })
    }

    pub fn shape(&self) -> [usize; 5] {
        self.shape
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    pub fn spatial(&self) -> [usize; 3] {
        [self.shape[2], self.shape[3], self.shape[4]]
    }

    pub fn plane_len(&self) -> usize {
        self.shape[2] * self.shape[3] * self.shape[4]
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// The spatial volume of batch item `b`, channel `c`.
    pub fn plane(&self, b: usize, c: usize) -> &[T] {
        let s = self.plane_len();
        let start = (b * self.shape[1] + c) * s;
        &self.data[start..start + s]
    }

    pub fn plane_mut(&mut self, b: usize, c: usize) -> &mut [T] {
        let s = self.plane_len();
        let start = (b * self.shape[1] + c) * s;
        &mut self.data[start..start + s]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn scale(&self, factor: T) -> Self {
        Tensor5 {
            shape: self.shape,
            data: self.data.iter().map(|&v| v * factor).collect(),
        }
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        if self.shape != other.shape {
            return Err(SrnrError::Shape(format!(
                "cannot add tensors of shape {:?} and {:?}",
                self.shape, other.shape
            )));
        }
        Ok(Tensor5 {
            shape: self.shape,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| a + b).collect(),
        })
    }

    pub(crate) fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor5<U> {
        Tensor5 {
            shape: self.shape,
            data: self.data.iter().map(|v| U::of(v.f64())).collect(),
        }
    }
}

pub fn relu_forward<T: Real>(x: &Tensor5<T>) -> Tensor5<T> {
    Tensor5 {
        shape: x.shape,
        data: x.data.iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect(),
    }
}

/// Gradient of ReLU; the subgradient at exactly zero is taken as zero.
/// `x` may be either the pre-activation or the ReLU output: both are
/// positive at the same positions.
pub fn relu_backward<T: Real>(x: &Tensor5<T>, grad_out: &Tensor5<T>) -> Result<Tensor5<T>> {
    if x.shape != grad_out.shape {
        return Err(SrnrError::Shape(format!(
            "relu_backward: {:?} vs {:?}",
            x.shape, grad_out.shape
        )));
    }
    Ok(Tensor5 {
        shape: x.shape,
        data: x
            .data
            .iter()
            .zip(&grad_out.data)
            .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
            .collect(),
    })
}

/// Concatenates along the channel axis.
pub fn concat_channels<T: Real>(a: &Tensor5<T>, b: &Tensor5<T>) -> Result<Tensor5<T>> {
    if a.batch() != b.batch() || a.spatial() != b.spatial() {
        return Err(SrnrError::Shape(format!(
            "concat_channels: {:?} vs {:?}",
            a.shape, b.shape
        )));
    }
    let (ca, cb) = (a.channels(), b.channels());
    let mut shape = a.shape;
    shape[1] = ca + cb;
    let s = a.plane_len();
    let mut data = Vec::with_capacity(shape.iter().product());
    for n in 0..a.batch() {
        data.extend_from_slice(&a.data[n * ca * s..(n + 1) * ca * s]);
        data.extend_from_slice(&b.data[n * cb * s..(n + 1) * cb * s]);
    }
    Ok(Tensor5 { shape, data })
}

/// Backward of [`concat_channels`]: splits the gradient after the first
/// `channels_a` channels.
pub fn split_channels<T: Real>(
    grad: &Tensor5<T>,
    channels_a: usize,
) -> Result<(Tensor5<T>, Tensor5<T>)> {
    let c = grad.channels();
    if channels_a > c {
        return Err(SrnrError::Shape(format!(
            "cannot split {channels_a} channels from a {c}-channel tensor"
        )));
    }
    let cb = c - channels_a;
    let s = grad.plane_len();
    let mut a = Vec::with_capacity(grad.batch() * channels_a * s);
    let mut b = Vec::with_capacity(grad.batch() * cb * s);
    for n in 0..grad.batch() {
        let base = n * c * s;
        a.extend_from_slice(&grad.data[base..base + channels_a * s]);
        b.extend_from_slice(&grad.data[base + channels_a * s..base + c * s]);
    }
    let mut sa = grad.shape;
    sa[1] = channels_a;
    let mut sb = grad.shape;
    sb[1] = cb;
    Ok((Tensor5 { shape: sa, data: a }, Tensor5 { shape: sb, data: b }))
}
