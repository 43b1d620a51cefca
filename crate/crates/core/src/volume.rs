//! Volumetric data model: dense scalar grids, brain masks, intensity
//! normalization and the procedural phantoms used as ground truth.
//!
//! Voxel `(i, j, k)` of a volume with dims `[nx, ny, nz]` lives at linear
//! index `(i * ny + j) * nz + k`, so the last axis is contiguous.

use std::collections::VecDeque;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Result, SrnrError};
use crate::rng::seeded_rng;

pub type Dims = [usize; 3];
pub type Spacing = [f64; 3];

#[inline]
pub fn voxel_count(dims: Dims) -> usize {
    dims[0] * dims[1] * dims[2]
}

/// Element stride of `axis` in the linear layout.
#[inline]
pub fn axis_stride(dims: Dims, axis: usize) -> usize {
    match axis {
        0 => dims[1] * dims[2],
        1 => dims[2],
        _ => 1,
    }
}

/// Dense 3D scalar image with per-axis voxel spacing in millimetres.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume3D {
    dims: Dims,
    spacing: Spacing,
    data: Vec<f64>,
}

impl Volume3D {
    pub fn new(dims: Dims, spacing: Spacing, data: Vec<f64>) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(SrnrError::Shape(format!("dims must be positive, got {dims:?}")));
        }
        if spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(SrnrError::InvalidArgument(format!(
                "spacing must be finite and positive, got {spacing:?}"
            )));
        }
        if data.len() != voxel_count(dims) {
            return Err(SrnrError::Shape(format!(
                "data length {} does not match dims {dims:?}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(SrnrError::NonFinite(format!("volume data at index {pos}")));
        }
        Ok(Volume3D { dims, spacing, data })
    }

    pub fn zeros(dims: Dims, spacing: Spacing) -> Result<Self> {
        Self::filled(dims, spacing, 0.0)
    }

    pub fn filled(dims: Dims, spacing: Spacing, value: f64) -> Result<Self> {
        Self::new(dims, spacing, vec![value; voxel_count(dims)])
    }

    pub fn from_fn(
        dims: Dims,
        spacing: Spacing,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(voxel_count(dims));
        for i in 0..dims[0] {
            for j in 0..dims[1] {
                for k in 0..dims[2] {
                    data.push(f(i, j, k));
                }
            }
        }
        Self::new(dims, spacing, data)
    }

    /// Internal constructor for results of operations on valid volumes.
    pub(crate) fn from_parts(dims: Dims, spacing: Spacing, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), voxel_count(dims));
        debug_assert!(data.iter().all(|v| v.is_finite()));
        Volume3D { dims, spacing, data }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.dims[1] + j) * self.dims[2] + k
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[self.index(i, j, k)]
    }

    pub fn with_spacing(mut self, spacing: Spacing) -> Result<Self> {
        if spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(SrnrError::InvalidArgument(format!(
                "spacing must be finite and positive, got {spacing:?}"
            )));
        }
        self.spacing = spacing;
        Ok(self)
    }

    pub fn same_grid(&self, other: &Volume3D) -> bool {
        self.dims == other.dims
    }

    pub(crate) fn check_same_dims(&self, other: &Volume3D, what: &str) -> Result<()> {
        if self.dims != other.dims {
            return Err(SrnrError::Shape(format!(
                "{what}: dims {:?} vs {:?}",
                self.dims, other.dims
            )));
        }
        Ok(())
    }

    /// Voxelwise `f(self, other)`; the result keeps `self`'s spacing.
    pub fn zip_map(&self, other: &Volume3D, f: impl Fn(f64, f64) -> f64) -> Result<Volume3D> {
        self.check_same_dims(other, "zip_map")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Volume3D::new(self.dims, self.spacing, data)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Volume3D> {
        Volume3D::new(self.dims, self.spacing, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn sub(&self, other: &Volume3D) -> Result<Volume3D> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn add(&self, other: &Volume3D) -> Result<Volume3D> {
        self.zip_map(other, |a, b| a + b)
    }

    /// Keeps the first `extent` slices along `axis`.
    pub fn crop_axis(&self, axis: usize, extent: usize) -> Result<Volume3D> {
        check_axis(axis)?;
        if extent == 0 || extent > self.dims[axis] {
            return Err(SrnrError::Shape(format!(
                "cannot crop axis {axis} of extent {} to {extent}",
                self.dims[axis]
            )));
        }
        if extent == self.dims[axis] {
            return Ok(self.clone());
        }
        let mut dims = self.dims;
        dims[axis] = extent;
        let out = Volume3D::from_fn(dims, self.spacing, |i, j, k| self.get(i, j, k))?;
        Ok(out)
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }
}

pub(crate) fn check_axis(axis: usize) -> Result<()> {
    if axis > 2 {
        return Err(SrnrError::InvalidArgument(format!("axis must be 0, 1 or 2, got {axis}")));
    }
    Ok(())
}

/// Boolean voxel selection paired with a volume; never empty.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BrainMask {
    dims: Dims,
    bits: Vec<bool>,
    count: usize,
}

impl BrainMask {
    pub fn new(dims: Dims, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != voxel_count(dims) {
            return Err(SrnrError::Shape(format!(
                "mask length {} does not match dims {dims:?}",
                bits.len()
            )));
        }
        let count = bits.iter().filter(|&&b| b).count();
        if count == 0 {
            return Err(SrnrError::EmptyMask);
        }
        Ok(BrainMask { dims, bits, count })
    }

    /// Mask selecting every voxel.
    pub fn full(dims: Dims) -> Result<Self> {
        Self::new(dims, vec![true; voxel_count(dims)])
    }

    /// Mask of the nonzero voxels of a volume (e.g. a mask read from NIfTI).
    pub fn from_nonzero(vol: &Volume3D) -> Result<Self> {
        Self::new(vol.dims(), vol.data().iter().map(|&v| v != 0.0).collect())
    }

    /// Brain mask for ingested volumes: voxels above 10% of the 99th
    /// percentile intensity, reduced to the largest 6-connected component.
    pub fn from_threshold(vol: &Volume3D) -> Result<Self> {
        let mut sorted = vol.data().to_vec();
        sorted.sort_by(f64::total_cmp);
        let threshold = 0.1 * percentile_sorted(&sorted, 99.0);
        let above: Vec<bool> = vol.data().iter().map(|&v| v > threshold).collect();
        let bits = largest_component(vol.dims(), &above);
        Self::new(vol.dims(), bits)
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn fraction(&self) -> f64 {
        self.count as f64 / self.bits.len() as f64
    }

    pub fn check_pair(&self, vol: &Volume3D) -> Result<()> {
        if self.dims != vol.dims() {
            return Err(SrnrError::Shape(format!(
                "mask dims {:?} do not match volume dims {:?}",
                self.dims,
                vol.dims()
            )));
        }
        Ok(())
    }

    /// Keeps the first `extent` slices along `axis`.
    pub fn crop_axis(&self, axis: usize, extent: usize) -> Result<BrainMask> {
        check_axis(axis)?;
        if extent == 0 || extent > self.dims[axis] {
            return Err(SrnrError::Shape(format!(
                "cannot crop mask axis {axis} of extent {} to {extent}",
                self.dims[axis]
            )));
        }
        let mut dims = self.dims;
        dims[axis] = extent;
        let mut bits = Vec::with_capacity(voxel_count(dims));
        for i in 0..dims[0] {
            for j in 0..dims[1] {
                for k in 0..dims[2] {
                    bits.push(self.bits[(i * self.dims[1] + j) * self.dims[2] + k]);
                }
            }
        }
        Self::new(dims, bits)
    }

    pub fn to_volume(&self, spacing: Spacing) -> Result<Volume3D> {
        Volume3D::new(
            self.dims,
            spacing,
            self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        )
    }

    /// Values of `vol` at the selected voxels, in storage order.
    pub fn masked<'a>(&'a self, vol: &'a Volume3D) -> impl Iterator<Item = f64> + 'a {
        vol.data()
            .iter()
            .zip(&self.bits)
            .filter_map(|(&v, &b)| b.then_some(v))
    }
}

fn largest_component(dims: Dims, on: &[bool]) -> Vec<bool> {
    let n = on.len();
    let mut label = vec![0u32; n];
    let mut best = (0u32, 0usize);
    let mut next = 0u32;
    let mut queue = VecDeque::new();
    for seed in 0..n {
        if !on[seed] || label[seed] != 0 {
            continue;
        }
        next += 1;
        label[seed] = next;
        queue.push_back(seed);
        let mut size = 0usize;
        while let Some(idx) = queue.pop_front() {
            size += 1;
            let k = idx % dims[2];
            let j = (idx / dims[2]) % dims[1];
            let i = idx / (dims[1] * dims[2]);
            let mut visit = |nb: usize| {
                if on[nb] && label[nb] == 0 {
                    label[nb] = next;
                    queue.push_back(nb);
                }
            };
            let sj = dims[2];
            let si = dims[1] * dims[2];
            if i > 0 {
                visit(idx - si);
            }
            if i + 1 < dims[0] {
                visit(idx + si);
            }
            if j > 0 {
                visit(idx - sj);
            }
            if j + 1 < dims[1] {
                visit(idx + sj);
            }
            if k > 0 {
                visit(idx - 1);
            }
            if k + 1 < dims[2] {
                visit(idx + 1);
            }
        }
        if size > best.1 {
            best = (next, size);
        }
    }
    label.iter().map(|&l| l != 0 && l == best.0).collect()
}

/// Linearly interpolated percentile (`q` in [0, 100]) of ascending data.
pub fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty());
    let pos = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    if lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + (sorted[hi] - sorted[lo]) * frac
    }
}

/// Affine intensity map `y = (x - offset) / scale`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormParams {
    pub offset: f64,
    pub scale: f64,
}

pub const NORM_CLAMP_MAX: f64 = 1.5;

impl NormParams {
    pub fn apply(&self, x: f64) -> f64 {
        ((x - self.offset) / self.scale).clamp(0.0, NORM_CLAMP_MAX)
    }

    pub fn invert(&self, y: f64) -> f64 {
        y * self.scale + self.offset
    }

    pub fn denormalize(&self, vol: &Volume3D) -> Result<Volume3D> {
        vol.map(|y| self.invert(y))
    }
}

/// Maps the 1st percentile of masked intensities to 0 and the 99th to 1,
/// clamping the result to `[0, 1.5]`.
pub fn normalize(vol: &Volume3D, mask: &BrainMask) -> Result<(Volume3D, NormParams)> {
    mask.check_pair(vol)?;
    let mut values: Vec<f64> = mask.masked(vol).collect();
    values.sort_by(f64::total_cmp);
    let p1 = percentile_sorted(&values, 1.0);
    let p99 = percentile_sorted(&values, 99.0);
    if p99 <= p1 {
        return Err(SrnrError::DegenerateIntensity(p1));
    }
    let params = NormParams {
        offset: p1,
        scale: p99 - p1,
    };
    let out = Volume3D::from_parts(
        vol.dims(),
        vol.spacing(),
        vol.data().iter().map(|&x| params.apply(x)).collect(),
    );
    Ok((out, params))
}

/// Population mean and standard deviation over masked voxels.
pub fn masked_stats(vol: &Volume3D, mask: &BrainMask) -> Result<(f64, f64)> {
    mask.check_pair(vol)?;
    // Welford
    let mut n = 0.0;
    let mut mean = 0.0;
    let mut m2 = 0.0;
    for x in mask.masked(vol) {
        n += 1.0;
        let delta = x - mean;
        mean += delta / n;
        m2 += delta * (x - mean);
    }
    Ok((mean, (m2 / n).max(0.0).sqrt()))
}

/// Voxelwise mean of aligned volumes, computed as `v0 + sum(vi - v0) / K`
/// so that averaging identical inputs returns them bit for bit.
pub fn average_volumes(vols: &[Volume3D]) -> Result<Volume3D> {
    let first = vols
        .first()
        .ok_or_else(|| SrnrError::InvalidArgument("cannot average an empty list".into()))?;
    for v in &vols[1..] {
        first.check_same_dims(v, "average_volumes")?;
        if v.spacing() != first.spacing() {
            return Err(SrnrError::Shape(format!(
                "average_volumes: spacing {:?} vs {:?}",
                first.spacing(),
                v.spacing()
            )));
        }
    }
    let k = vols.len() as f64;
    let mut acc = vec![0.0; first.len()];
    for v in &vols[1..] {
        for ((a, &x), &x0) in acc.iter_mut().zip(v.data()).zip(first.data()) {
            *a += x - x0;
        }
    }
    let data = acc
        .iter()
        .zip(first.data())
        .map(|(&a, &x0)| x0 + a / k)
        .collect();
    Ok(Volume3D::from_parts(first.dims(), first.spacing(), data))
}

/// Parameters of a procedural head phantom.
#[derive(Clone, Debug, PartialEq)]
pub struct PhantomSpec {
    pub dims: Dims,
    pub spacing: Spacing,
    pub seed: u64,
    /// Total ellipsoid count including the enclosing "head" ellipsoid.
    pub n_ellipsoids: usize,
    /// Thickness of the bright boundary shell of the inner ellipsoids;
    /// `None` disables shells.
    pub shell_thickness_vox: Option<usize>,
    pub intensity_levels: Vec<f64>,
}

impl PhantomSpec {
    /// Brain-like phantom on a 0.7 mm isotropic grid.
    pub fn brain_like(dims: Dims, seed: u64) -> Self {
        PhantomSpec {
            dims,
            spacing: [0.7, 0.7, 0.7],
            seed,
            n_ellipsoids: 12,
            shell_thickness_vox: Some(1),
            intensity_levels: vec![0.35, 0.5, 0.65, 0.8],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d < 8) {
            return Err(SrnrError::InvalidSpec(format!(
                "phantom dims must all be >= 8, got {:?}",
                self.dims
            )));
        }
        if self.spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(SrnrError::InvalidSpec(format!("bad spacing {:?}", self.spacing)));
        }
        if self.n_ellipsoids == 0 {
            return Err(SrnrError::InvalidSpec("n_ellipsoids must be >= 1".into()));
        }
        if self.shell_thickness_vox == Some(0) {
            return Err(SrnrError::InvalidSpec("shell thickness must be >= 1".into()));
        }
        if self.intensity_levels.is_empty()
            || self
                .intensity_levels
                .iter()
                .any(|l| !(0.0..=1.0).contains(l))
        {
            return Err(SrnrError::InvalidSpec(
                "intensity_levels must be nonempty and within [0, 1]".into(),
            ));
        }
        Ok(())
    }
}

const SHELL_INTENSITY: f64 = 1.0;
/// Ellipsoids thinner than this multiple of the shell thickness get no
/// shell, so that shells stay thin rims instead of filling small blobs.
const MIN_SHELLED_RADIUS_RATIO: f64 = 4.0;

struct Ellipsoid {
    center: [f64; 3],
    radii: [f64; 3],
    // Rows are the ellipsoid's principal axes in voxel coordinates.
    axes: [[f64; 3]; 3],
    level: f64,
}

impl Ellipsoid {
    /// Normalized radius: < 1 inside, 1 on the surface.
    fn rho(&self, p: [f64; 3]) -> f64 {
        let d = [p[0] - self.center[0], p[1] - self.center[1], p[2] - self.center[2]];
        let mut s = 0.0;
        for (axis, r) in self.axes.iter().zip(self.radii) {
            let t = (axis[0] * d[0] + axis[1] * d[1] + axis[2] * d[2]) / r;
            s += t * t;
        }
        s.sqrt()
    }

    fn min_radius(&self) -> f64 {
        self.radii.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

fn random_rotation(rng: &mut impl Rng) -> [[f64; 3]; 3] {
    let mut q = [0.0f64; 4];
    for c in q.iter_mut() {
        *c = StandardNormal.sample(rng);
    }
    let norm = q.iter().map(|c| c * c).sum::<f64>().sqrt().max(1e-12);
    let [w, x, y, z] = q.map(|c| c / norm);
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

fn layout_ellipsoids(spec: &PhantomSpec) -> Vec<Ellipsoid> {
    let mut rng = seeded_rng(spec.seed);
    let levels = &spec.intensity_levels;
    let d = spec.dims.map(|n| n as f64);
    let mut out = Vec::with_capacity(spec.n_ellipsoids);

    let head_center = [0, 1, 2].map(|a| (d[a] - 1.0) / 2.0 + rng.random_range(-0.03..0.03) * d[a]);
    let head_radii = [0, 1, 2].map(|a| rng.random_range(0.36..0.42) * d[a]);
    out.push(Ellipsoid {
        center: head_center,
        radii: head_radii,
        axes: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        level: levels[0],
    });

    for _ in 1..spec.n_ellipsoids {
        // Uniform point in the inner part of the head.
        let dir: [f64; 3] = [0; 3].map(|_| StandardNormal.sample(&mut rng));
        let norm = dir.iter().map(|c| c * c).sum::<f64>().sqrt().max(1e-12);
        let radial = 0.7 * rng.random::<f64>().cbrt();
        let center = [0, 1, 2].map(|a| head_center[a] + dir[a] / norm * radial * head_radii[a]);
        let radii = [0, 1, 2].map(|a| (rng.random_range(0.08..0.32) * head_radii[a]).max(1.5));
        let axes = random_rotation(&mut rng);
        let level = levels[rng.random_range(0..levels.len())];
        out.push(Ellipsoid {
            center,
            radii,
            axes,
            level,
        });
    }
    out
}

/// Builds a deterministic phantom: an axis-aligned head ellipsoid holding
/// overlapping rotated ellipsoids, the inner ones optionally outlined by a
/// thin bright shell. The mask is the union of ellipsoid interiors.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<(Volume3D, BrainMask)> {
    spec.validate()?;
    let ellipsoids = layout_ellipsoids(spec);
    let n = voxel_count(spec.dims);
    let mut data = vec![0.0; n];
    let mut bits = vec![false; n];
    let mut idx = 0;
    for i in 0..spec.dims[0] {
        for j in 0..spec.dims[1] {
            for k in 0..spec.dims[2] {
                let p = [i as f64, j as f64, k as f64];
                let mut value = 0.0;
                for (n, e) in ellipsoids.iter().enumerate() {
                    let rho = e.rho(p);
                    if rho <= 1.0 {
                        bits[idx] = true;
                        value = e.level;
                        if let Some(t) = spec.shell_thickness_vox {
                            let t = t as f64;
                            let r = e.min_radius();
                            if n > 0 && r >= MIN_SHELLED_RADIUS_RATIO * t && (1.0 - rho) * r < t {
                                value = SHELL_INTENSITY;
                            }
                        }
                    }
                }
                data[idx] = value;
                idx += 1;
            }
        }
    }
    let vol = Volume3D::new(spec.dims, spec.spacing, data)?;
    let mask = BrainMask::new(spec.dims, bits).map_err(|_| {
        SrnrError::InvalidSpec("phantom has no voxel inside any ellipsoid".into())
    })?;
    Ok((vol, mask))
}
