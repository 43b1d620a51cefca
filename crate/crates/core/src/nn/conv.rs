//! 3x3x3 convolution (cross-correlation) with zero "same" padding.
//!
//! Each batch item is unfolded slab by slab along `x` into a column matrix
//! (`c_in * 27` rows, one column per voxel) and multiplied with the weight
//! matrix by a packed GEMM. The input gradient is the forward convolution of
//! the upstream gradient with flipped, transposed weights. Batch items run in
//! parallel and partial weight gradients are summed in batch order, so
//! results do not depend on the thread count.

use rayon::prelude::*;

use super::tensor::{Real, Tensor5};
use crate::error::{Result, SrnrError};

pub const KERNEL: usize = 3;
pub const TAPS: usize = KERNEL * KERNEL * KERNEL;

/// One convolution layer: weights `(c_out, c_in, 3, 3, 3)` and a bias per
/// output channel.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer<T> {
    pub c_out: usize,
    pub c_in: usize,
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> ConvLayer<T> {
    pub fn zeros(c_out: usize, c_in: usize) -> Self {
        ConvLayer {
            c_out,
            c_in,
            weights: vec![T::zero(); c_out * c_in * TAPS],
            bias: vec![T::zero(); c_out],
        }
    }

    /// Index of tap `(dx, dy, dz)`, offsets in `-1..=1`.
    #[inline]
    pub fn tap(dx: isize, dy: isize, dz: isize) -> usize {
        ((dx + 1) * 9 + (dy + 1) * 3 + (dz + 1)) as usize
    }

    #[inline]
    pub fn weight_index(&self, co: usize, ci: usize, tap: usize) -> usize {
        (co * self.c_in + ci) * TAPS + tap
    }

    pub fn kernel(&self, co: usize, ci: usize) -> &[T] {
        let s = self.weight_index(co, ci, 0);
        &self.weights[s..s + TAPS]
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    pub fn all_finite(&self) -> bool {
        self.weights.iter().chain(&self.bias).all(|v| v.is_finite())
    }
}

/// Upper bound on elements in one column buffer.
const COL_BUDGET: usize = 1 << 21;

/// Number of `x` planes unfolded at once for a column matrix of `rows` rows.
fn slab_width(rows: usize, dims: [usize; 3]) -> usize {
    (COL_BUDGET / (rows * dims[1] * dims[2]).max(1)).clamp(1, dims[0])
}

/// Copies `src` shifted by `dz` along the row into `dst`, zero-filling the
/// position that falls outside.
#[inline]
fn shift_copy<T: Real>(dst: &mut [T], src: &[T], dz: isize) {
    let n = dst.len();
    match dz {
        0 => dst.copy_from_slice(src),
        -1 => {
            dst[0] = T::zero();
            dst[1..].copy_from_slice(&src[..n - 1]);
        }
        _ => {
            dst[..n - 1].copy_from_slice(&src[1..]);
            dst[n - 1] = T::zero();
        }
    }
}

/// Unfolds planes `x0..x1` of a `channels x nx x ny x nz` block into `col`,
/// laid out as `(channels * 27) x n` with `n = (x1 - x0) * ny * nz`.
fn im2col<T: Real>(src: &[T], channels: usize, dims: [usize; 3], x0: usize, x1: usize, col: &mut [T]) {
    let [nx, ny, nz] = dims;
    let s = nx * ny * nz;
    let n = (x1 - x0) * ny * nz;
    for ci in 0..channels {
        let plane = &src[ci * s..(ci + 1) * s];
        for dx in -1isize..=1 {
            for dy in -1isize..=1 {
                for dz in -1isize..=1 {
                    let row = &mut col[(ci * TAPS + ConvLayer::<T>::tap(dx, dy, dz)) * n..][..n];
                    for i in x0..x1 {
                        let si = i as isize + dx;
                        for j in 0..ny {
                            let sj = j as isize + dy;
                            let dst = &mut row[((i - x0) * ny + j) * nz..][..nz];
                            if si < 0 || si >= nx as isize || sj < 0 || sj >= ny as isize {
                                dst.fill(T::zero());
                            } else {
                                let o = (si as usize * ny + sj as usize) * nz;
                                shift_copy(dst, &plane[o..o + nz], dz);
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `out += W * unfold(src)` for one batch item. `weights` is
/// `c_out x (c_in * 27)` row-major, `src` is `c_in` planes and `out` is
/// `c_out` planes.
fn correlate_item<T: Real>(
    out: &mut [T],
    src: &[T],
    weights: &[T],
    c_out: usize,
    c_in: usize,
    dims: [usize; 3],
) {
    let k = c_in * TAPS;
    let s = dims[0] * dims[1] * dims[2];
    let row = dims[1] * dims[2];
    let width = slab_width(k, dims);
    let mut col = vec![T::zero(); k * width * row];
    let mut x0 = 0;
    while x0 < dims[0] {
        let x1 = (x0 + width).min(dims[0]);
        let n = (x1 - x0) * row;
        im2col(src, c_in, dims, x0, x1, &mut col);
        let c = &mut out[x0 * row..];
        debug_assert!(c.len() >= (c_out - 1) * s + n);
        // SAFETY: A spans c_out * k elements of `weights`, B spans k * n of
        // `col`, and C addresses rows `co * s + (0..n)` of `out[x0 * row..]`,
        // all within bounds; `out` is disjoint from both inputs.
        unsafe {
            T::gemm(
                c_out,
                k,
                n,
                T::one(),
                weights.as_ptr(),
                k as isize,
                1,
                col.as_ptr(),
                n as isize,
                1,
                T::one(),
                c.as_mut_ptr(),
                s as isize,
                1,
            );
        }
        x0 = x1;
    }
}

fn check_input<T: Real>(x: &Tensor5<T>, layer: &ConvLayer<T>) -> Result<()> {
    if x.channels() != layer.c_in {
        return Err(SrnrError::Shape(format!(
            "conv3d: input has {} channels, layer expects {}",
            x.channels(),
            layer.c_in
        )));
    }
    if x.spatial().iter().any(|&d| d == 0) {
        return Err(SrnrError::Shape(format!("conv3d: empty spatial dims {:?}", x.spatial())));
    }
    if layer.weights.len() != layer.c_out * layer.c_in * TAPS || layer.bias.len() != layer.c_out {
        return Err(SrnrError::Shape("conv3d: malformed layer parameters".into()));
    }
    Ok(())
}

pub fn conv3d_forward<T: Real>(x: &Tensor5<T>, layer: &ConvLayer<T>) -> Result<Tensor5<T>> {
    check_input(x, layer)?;
    let dims = x.spatial();
    let s = x.plane_len();
    let mut out = Tensor5::zeros([x.batch(), layer.c_out, dims[0], dims[1], dims[2]]);
    let item_in = layer.c_in * s;
    out.data_mut()
        .par_chunks_mut(layer.c_out * s)
        .enumerate()
        .for_each(|(b, item)| {
            for (co, plane) in item.chunks_mut(s).enumerate() {
                plane.fill(layer.bias[co]);
            }
            let src = &x.data()[b * item_in..(b + 1) * item_in];
            correlate_item(item, src, &layer.weights, layer.c_out, layer.c_in, dims);
        });
    Ok(out)
}

/// Parameter gradient of a single convolution layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvGrads<T> {
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

/// Weights of the transposed operation: `W'[ci][co][t] = W[co][ci][26 - t]`.
fn flipped_weights<T: Real>(layer: &ConvLayer<T>) -> Vec<T> {
    let mut w = vec![T::zero(); layer.weights.len()];
    for ci in 0..layer.c_in {
        for co in 0..layer.c_out {
            let src = layer.kernel(co, ci);
            let dst = &mut w[(ci * layer.c_out + co) * TAPS..][..TAPS];
            for t in 0..TAPS {
                dst[t] = src[TAPS - 1 - t];
            }
        }
    }
    w
}

/// `dW += g * unfold(x)^T` for one batch item.
fn weight_grad_item<T: Real>(
    acc: &mut [T],
    g: &[T],
    src: &[T],
    c_out: usize,
    c_in: usize,
    dims: [usize; 3],
) {
    let k = c_in * TAPS;
    let s = dims[0] * dims[1] * dims[2];
    let row = dims[1] * dims[2];
    let width = slab_width(k, dims);
    let mut col = vec![T::zero(); k * width * row];
    let mut x0 = 0;
    while x0 < dims[0] {
        let x1 = (x0 + width).min(dims[0]);
        let n = (x1 - x0) * row;
        im2col(src, c_in, dims, x0, x1, &mut col);
        let a = &g[x0 * row..];
        debug_assert!(a.len() >= (c_out - 1) * s + n);
        // SAFETY: A addresses rows `co * s + (0..n)` of `g[x0 * row..]`, B is
        // the transpose view of the k x n block of `col`, and C is the
        // c_out x k accumulator; `acc` is disjoint from both inputs.
        unsafe {
            T::gemm(
                c_out,
                n,
                k,
                T::one(),
                a.as_ptr(),
                s as isize,
                1,
                col.as_ptr(),
                1,
                n as isize,
                T::one(),
                acc.as_mut_ptr(),
                k as isize,
                1,
            );
        }
        x0 = x1;
    }
}

/// Returns `(grad_x, grads)` for upstream gradient `grad_out`.
pub fn conv3d_backward<T: Real>(
    x: &Tensor5<T>,
    layer: &ConvLayer<T>,
    grad_out: &Tensor5<T>,
) -> Result<(Tensor5<T>, ConvGrads<T>)> {
    check_input(x, layer)?;
    let expected = [x.batch(), layer.c_out, x.shape()[2], x.shape()[3], x.shape()[4]];
    if grad_out.shape() != expected {
        return Err(SrnrError::Shape(format!(
            "conv3d_backward: grad_out shape {:?}, expected {expected:?}",
            grad_out.shape()
        )));
    }
    let dims = x.spatial();
    let s = x.plane_len();
    let (c_in, c_out) = (layer.c_in, layer.c_out);

    let bias: Vec<T> = (0..c_out)
        .map(|co| {
            let mut acc = T::zero();
            for b in 0..x.batch() {
                acc += lane_sum(grad_out.plane(b, co));
            }
            acc
        })
        .collect();

    let flipped = flipped_weights(layer);
    let mut grad_x = Tensor5::zeros(x.shape());
    let partials: Vec<Vec<T>> = grad_x
        .data_mut()
        .par_chunks_mut(c_in * s)
        .enumerate()
        .map(|(b, gx)| {
            let g = &grad_out.data()[b * c_out * s..(b + 1) * c_out * s];
            let src = &x.data()[b * c_in * s..(b + 1) * c_in * s];
            correlate_item(gx, g, &flipped, c_in, c_out, dims);
            let mut dw = vec![T::zero(); layer.weights.len()];
            weight_grad_item(&mut dw, g, src, c_out, c_in, dims);
            dw
        })
        .collect();

    let mut weights = vec![T::zero(); layer.weights.len()];
    for p in &partials {
        for (w, &v) in weights.iter_mut().zip(p) {
            *w += v;
        }
    }
    Ok((grad_x, ConvGrads { weights, bias }))
}

/// Eight-lane summation; deterministic and vectorizable.
#[inline]
fn lane_sum<T: Real>(v: &[T]) -> T {
    let mut lanes = [T::zero(); 8];
    let chunks = v.chunks_exact(8);
    let rem = chunks.remainder();
    for c in chunks {
        for l in 0..8 {
            lanes[l] += c[l];
        }
    }
    let mut total = lanes.iter().fold(T::zero(), |a, &b| a + b);
    for &r in rem {
        total += r;
    }
    total
}
