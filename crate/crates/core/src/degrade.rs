//! Acquisition simulator: thick-slice downsampling, natural cubic spline
//! upsampling back to the fine grid, and calibrated Gaussian noise.

use crate::error::{Result, SrnrError};
use crate::rng::{derive_seed, standard_normal_at};
use crate::volume::{average_volumes, axis_stride, check_axis, masked_stats, BrainMask, Volume3D};

/// Thick-slice geometry: `factor` fine slices along `slice_axis` collapse
/// into one thick slice.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DegradeSpec {
    pub slice_axis: usize,
    pub factor: usize,
}

impl Default for DegradeSpec {
    /// 0.7 mm to 3.5 mm along the last axis.
    fn default() -> Self {
        DegradeSpec {
            slice_axis: 2,
            factor: 5,
        }
    }
}

impl DegradeSpec {
    pub fn validate(&self) -> Result<()> {
        check_axis(self.slice_axis)?;
        if self.factor < 2 {
            return Err(SrnrError::InvalidArgument(format!(
                "downsampling factor must be >= 2, got {}",
                self.factor
            )));
        }
        Ok(())
    }

    /// Largest multiple of `factor` not exceeding `extent`.
    pub fn cropped_extent(&self, extent: usize) -> usize {
        extent - extent % self.factor
    }
}

/// Additive Gaussian noise with standard deviation `sigma_rel` times the
/// masked intensity standard deviation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseSpec {
    pub mu: f64,
    pub sigma_rel: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn clean(seed: u64) -> Self {
        NoiseSpec {
            mu: 0.0,
            sigma_rel: 0.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_rel.is_finite() && self.sigma_rel >= 0.0) || !self.mu.is_finite() {
            return Err(SrnrError::InvalidArgument(format!(
                "noise needs finite mu and sigma_rel >= 0, got mu={} sigma_rel={}",
                self.mu, self.sigma_rel
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Downsampled {
    pub volume: Volume3D,
    /// Trailing fine slices discarded so the extent divides evenly.
    pub dropped_slices: usize,
}

/// Block mean of `factor` consecutive slices along the slice axis.
pub fn downsample_slices(vol: &Volume3D, spec: &DegradeSpec) -> Result<Downsampled> {
    spec.validate()?;
    let axis = spec.slice_axis;
    let dims = vol.dims();
    let extent = dims[axis];
    if extent < spec.factor {
        return Err(SrnrError::Shape(format!(
            "slice-axis extent {extent} is smaller than the factor {}",
            spec.factor
        )));
    }
    let kept = spec.cropped_extent(extent);
    let mut out_dims = dims;
    out_dims[axis] = kept / spec.factor;
    let mut spacing = vol.spacing();
    spacing[axis] *= spec.factor as f64;

    let in_stride = axis_stride(dims, axis);
    let out_stride = axis_stride(out_dims, axis);
    let inv = 1.0 / spec.factor as f64;
    let mut data = vec![0.0; out_dims.iter().product()];
    for_each_profile(dims, axis, |in_base, lane| {
        let out_base = lane_base(out_dims, axis, lane);
        for t in 0..out_dims[axis] {
            let mut s = 0.0;
            for f in 0..spec.factor {
                s += vol.data()[in_base + (t * spec.factor + f) * in_stride];
            }
            data[out_base + t * out_stride] = s * inv;
        }
    });
    Ok(Downsampled {
        volume: Volume3D::from_parts(out_dims, spacing, data),
        dropped_slices: extent - kept,
    })
}

/// Iterates over every 1D line along `axis`, passing the linear index of its
/// first voxel and the line's (u, v) coordinates in the other two axes.
fn for_each_profile(dims: [usize; 3], axis: usize, mut f: impl FnMut(usize, (usize, usize))) {
    let (a, b) = other_axes(axis);
    for u in 0..dims[a] {
        for v in 0..dims[b] {
            let mut idx = [0usize; 3];
            idx[a] = u;
            idx[b] = v;
            f((idx[0] * dims[1] + idx[1]) * dims[2] + idx[2], (u, v));
        }
    }
}

fn lane_base(dims: [usize; 3], axis: usize, (u, v): (usize, usize)) -> usize {
    let (a, b) = other_axes(axis);
    let mut idx = [0usize; 3];
    idx[a] = u;
    idx[b] = v;
    (idx[0] * dims[1] + idx[1]) * dims[2] + idx[2]
}

fn other_axes(axis: usize) -> (usize, usize) {
    match axis {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Interpolation {
    NaturalCubic,
    /// Fewer than four knots.
    Linear,
    /// A single knot.
    Constant,
}

#[derive(Clone, Debug)]
pub struct Upsampled {
    pub volume: Volume3D,
    pub method: Interpolation,
}

/// Fine-grid coordinate of thick slice `i` for a scale factor `scale`.
#[inline]
pub fn knot_position(i: usize, scale: f64) -> f64 {
    (i as f64 + 0.5) * scale - 0.5
}

/// Second derivatives of the natural cubic spline through equally spaced
/// `values` with spacing `h` (Thomas algorithm).
fn natural_second_derivatives(values: &[f64], h: f64) -> Vec<f64> {
    let n = values.len();
    let mut m = vec![0.0; n];
    if n < 3 {
        return m;
    }
    let interior = n - 2;
    // Rows: m[i-1] + 4 m[i] + m[i+1] = 6 (y[i+1] - 2 y[i] + y[i-1]) / h^2
    let mut c_prime = vec![0.0; interior];
    let mut d_prime = vec![0.0; interior];
    for r in 0..interior {
        let i = r + 1;
        let rhs = 6.0 * (values[i + 1] - 2.0 * values[i] + values[i - 1]) / (h * h);
        if r == 0 {
            c_prime[r] = 1.0 / 4.0;
            d_prime[r] = rhs / 4.0;
        } else {
            let denom = 4.0 - c_prime[r - 1];
            c_prime[r] = 1.0 / denom;
            d_prime[r] = (rhs - d_prime[r - 1]) / denom;
        }
    }
    for r in (0..interior).rev() {
        let next = if r + 1 < interior { m[r + 2] } else { 0.0 };
        m[r + 1] = d_prime[r] - c_prime[r] * next;
    }
    m
}

/// Interpolation weights `w[x][j]` so that `out[x] = sum_j w[x][j] * knot[j]`.
/// Both the natural spline and the linear fallback are linear in the knot
/// values, so the matrix is built by interpolating unit vectors.
fn interpolation_matrix(n: usize, target: usize, scale: f64) -> (Vec<Vec<f64>>, Interpolation) {
    let method = match n {
        1 => Interpolation::Constant,
        2 | 3 => Interpolation::Linear,
        _ => Interpolation::NaturalCubic,
    };
    let mut w = vec![vec![0.0; n]; target];
    let first = knot_position(0, scale);
    let last = knot_position(n - 1, scale);
    for j in 0..n {
        let mut unit = vec![0.0; n];
        unit[j] = 1.0;
        let m = match method {
            Interpolation::NaturalCubic => natural_second_derivatives(&unit, scale),
            _ => vec![0.0; n],
        };
        for (x, row) in w.iter_mut().enumerate() {
            let xf = x as f64;
            row[j] = if n == 1 || xf <= first {
                unit[0]
            } else if xf >= last {
                unit[n - 1]
            } else {
                let seg = (((xf - first) / scale).floor() as usize).min(n - 2);
                let x0 = knot_position(seg, scale);
                let x1 = knot_position(seg + 1, scale);
                let a = (x1 - xf) / scale;
                let b = (xf - x0) / scale;
                let h2 = scale * scale / 6.0;
                a * unit[seg]
                    + b * unit[seg + 1]
                    + ((a * a * a - a) * m[seg] + (b * b * b - b) * m[seg + 1]) * h2
            };
        }
    }
    (w, method)
}

/// Natural cubic spline interpolation along `slice_axis` onto
/// `target_extent` fine slices. Knot `i` sits at `(i + 0.5) * s - 0.5`
/// with `s = target_extent / n`; samples outside the end knots take the end
/// knot value.
pub fn upsample_cubic(vol: &Volume3D, target_extent: usize, slice_axis: usize) -> Result<Upsampled> {
    check_axis(slice_axis)?;
    let dims = vol.dims();
    let n = dims[slice_axis];
    if target_extent < n {
        return Err(SrnrError::InvalidArgument(format!(
            "target extent {target_extent} is smaller than the input extent {n}"
        )));
    }
    let scale = target_extent as f64 / n as f64;
    let (w, method) = interpolation_matrix(n, target_extent, scale);

    let mut out_dims = dims;
    out_dims[slice_axis] = target_extent;
    let mut spacing = vol.spacing();
    spacing[slice_axis] /= scale;
    let in_stride = axis_stride(dims, slice_axis);
    let out_stride = axis_stride(out_dims, slice_axis);
    let mut data = vec![0.0; out_dims.iter().product()];
    let mut knots = vec![0.0; n];
    for_each_profile(dims, slice_axis, |in_base, lane| {
        for (j, k) in knots.iter_mut().enumerate() {
            *k = vol.data()[in_base + j * in_stride];
        }
        let out_base = lane_base(out_dims, slice_axis, lane);
        for (x, row) in w.iter().enumerate() {
            data[out_base + x * out_stride] = row.iter().zip(&knots).map(|(a, b)| a * b).sum();
        }
    });
    Ok(Upsampled {
        volume: Volume3D::from_parts(out_dims, spacing, data),
        method,
    })
}

/// Adds iid `Normal(mu, (sigma_rel * masked_std)^2)` noise to every voxel.
/// Voxel `i` uses sample `i` of the counter-based field `spec.seed`.
pub fn add_gaussian_noise(vol: &Volume3D, mask: &BrainMask, spec: &NoiseSpec) -> Result<Volume3D> {
    spec.validate()?;
    mask.check_pair(vol)?;
    if spec.sigma_rel == 0.0 {
        return Ok(vol.clone());
    }
    let (_, std) = masked_stats(vol, mask)?;
    let sigma = spec.sigma_rel * std;
    let data = vol
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| v + spec.mu + sigma * standard_normal_at(spec.seed, i as u64))
        .collect();
    Volume3D::new(vol.dims(), vol.spacing(), data)
}

/// One simulated subject: the network input and its regression target.
#[derive(Clone, Debug)]
pub struct TrainingPair {
    /// Ground truth cropped to a whole number of thick slices.
    pub ground_truth: Volume3D,
    pub mask: BrainMask,
    pub low_res: Volume3D,
    /// Low-res volume interpolated back to the fine grid.
    pub input: Volume3D,
    /// Noisy (or averaged) high-resolution reference.
    pub reference: Volume3D,
    /// `reference - input`.
    pub target_residual: Volume3D,
    pub dropped_slices: usize,
    pub interpolation: Interpolation,
}

/// Seed of noise realization `r`; realization 0 uses the spec seed itself.
pub fn realization_seed(seed: u64, r: usize) -> u64 {
    if r == 0 {
        seed
    } else {
        derive_seed(seed, r as u64)
    }
}

pub fn make_training_pair(
    hr: &Volume3D,
    mask: &BrainMask,
    dspec: &DegradeSpec,
    nspec: &NoiseSpec,
) -> Result<TrainingPair> {
    make_averaged_pair(hr, mask, dspec, nspec, 1)
}

/// Like [`make_training_pair`] but the reference is the mean of `k`
/// independent noisy realizations of the ground truth.
pub fn make_averaged_pair(
    hr: &Volume3D,
    mask: &BrainMask,
    dspec: &DegradeSpec,
    nspec: &NoiseSpec,
    k: usize,
) -> Result<TrainingPair> {
    dspec.validate()?;
    nspec.validate()?;
    mask.check_pair(hr)?;
    if k == 0 {
        return Err(SrnrError::InvalidArgument("need at least one realization".into()));
    }
    let axis = dspec.slice_axis;
    let extent = hr.dims()[axis];
    if extent < dspec.factor {
        return Err(SrnrError::Shape(format!(
            "slice-axis extent {extent} is smaller than the factor {}",
            dspec.factor
        )));
    }
    let kept = dspec.cropped_extent(extent);
    let ground_truth = hr.crop_axis(axis, kept)?;
    let mask = mask.crop_axis(axis, kept)?;

    let down = downsample_slices(&ground_truth, dspec)?;
    let up = upsample_cubic(&down.volume, kept, axis)?;
    let input = up.volume.with_spacing(ground_truth.spacing())?;

    let realizations = (0..k)
        .map(|r| {
            let spec = NoiseSpec {
                seed: realization_seed(nspec.seed, r),
                ..*nspec
            };
            add_gaussian_noise(&ground_truth, &mask, &spec)
        })
        .collect::<Result<Vec<_>>>()?;
    let reference = average_volumes(&realizations)?;
    let target_residual = reference.sub(&input)?;
    Ok(TrainingPair {
        ground_truth,
        mask,
        low_res: down.volume,
        input,
        reference,
        target_residual,
        dropped_slices: extent - kept,
        interpolation: up.method,
    })
}
