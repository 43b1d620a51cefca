//! Patch-based training of the residual network with L2 loss and Adam,
//! tiled inference, and a closed-form least-squares check of noisy-target
//! regression.
//!
//! Training draws patches whose brain-mask coverage is at least
//! [`MIN_MASK_COVERAGE`], runs minibatches through the network and applies
//! bias-corrected Adam. Every random choice derives from `TrainConfig::seed`,
//! and all reductions run in a fixed order, so identical configurations
//! produce bitwise-identical parameters.

use log::warn;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::degrade::{make_averaged_pair, upsample_cubic, DegradeSpec, NoiseSpec, TrainingPair};
use crate::error::{Result, SrnrError};
use crate::nn::{init_params, munet_backward, munet_forward, MuNet, NetShape, Real, Tensor5};
use crate::rng::{derive_seed, derive_seed_str, seeded_rng};
use crate::volume::{BrainMask, Dims, Volume3D};

/// Minimum fraction of brain voxels in an accepted training patch.
pub const MIN_MASK_COVERAGE: f64 = 0.3;
/// Rejected corners per patch before the coverage rule is relaxed.
pub const MAX_PATCH_TRIES: usize = 100;

/// Arithmetic used for training and inference.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn as_str(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }
}

impl std::str::FromStr for Precision {
    type Err = SrnrError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(SrnrError::InvalidArgument(format!(
                "precision must be f32 or f64, got {other:?}"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub patch_size: [usize; 3],
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub epochs: usize,
    pub patches_per_volume: usize,
    pub seed: u64,
    pub precision: Precision,
    /// Multiplier on the He-normal weights of the output layer. 1.0 keeps
    /// the plain initialization; 0.0 starts training from the identity map
    /// (zero residual).
    pub final_layer_gain: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            patch_size: [32, 32, 32],
            batch_size: 4,
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            epochs: 5,
            patches_per_volume: 8,
            seed: 0,
            precision: Precision::F32,
            final_layer_gain: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(SrnrError::InvalidArgument(msg));
        if self.patch_size.iter().any(|&p| p == 0) {
            return bad(format!("patch size {:?} has a zero extent", self.patch_size));
        }
        if self.batch_size == 0 || self.patches_per_volume == 0 {
            return bad("batch_size and patches_per_volume must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.learning_rate));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return bad(format!("{name} must lie in (0, 1), got {b}"));
            }
        }
        if !(self.adam_eps > 0.0 && self.adam_eps.is_finite()) {
            return bad(format!("adam_eps must be positive, got {}", self.adam_eps));
        }
        if !(self.final_layer_gain >= 0.0 && self.final_layer_gain.is_finite()) {
            return bad(format!("final_layer_gain must be finite and non-negative, got {}", self.final_layer_gain));
        }
        Ok(())
    }

    /// Checks that a patch fits inside volumes of shape `dims`.
    pub fn check_volume(&self, dims: Dims) -> Result<()> {
        if self.patch_size.iter().zip(dims.iter()).any(|(&p, &d)| p > d) {
            return Err(SrnrError::Shape(format!(
                "patch {:?} does not fit in volume {dims:?}",
                self.patch_size
            )));
        }
        Ok(())
    }
}

/// `init_params` with the output-layer weights scaled by
/// `cfg.final_layer_gain`.
pub fn initial_net<T: Real>(shape: NetShape, cfg: &TrainConfig) -> Result<MuNet<T>> {
    let mut net = init_params::<T>(shape, cfg.seed)?;
    if cfg.final_layer_gain != 1.0 {
        let gain = T::of(cfg.final_layer_gain);
        if let Some(last) = net.layers_mut().last_mut() {
            last.weights.iter_mut().for_each(|w| *w = *w * gain);
        }
    }
    Ok(net)
}

/// Adam moments, kept in double precision for every parameter type.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(n_params: usize) -> Self {
        AdamState {
            t: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
        }
    }
}

/// Mean squared error and its gradient `2 (pred - target) / N`.
pub fn l2_loss<T: Real>(pred: &Tensor5<T>, target: &Tensor5<T>) -> Result<(f64, Tensor5<T>)> {
    if pred.shape() != target.shape() {
        return Err(SrnrError::Shape(format!(
            "l2_loss: {:?} vs {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let n = pred.len();
    if n == 0 {
        return Err(SrnrError::Shape("l2_loss on empty tensors".into()));
    }
    let scale = T::of(2.0 / n as f64);
    let mut sum = 0.0;
    let mut grad = Vec::with_capacity(n);
    for (&p, &t) in pred.data().iter().zip(target.data()) {
        let d = p - t;
        sum += d.f64() * d.f64();
        grad.push(d * scale);
    }
    Ok((sum / n as f64, Tensor5::from_vec(pred.shape(), grad)?))
}

/// One bias-corrected Adam update in place. Rejects non-finite gradients
/// before touching any state.
pub fn adam_step<T: Real>(
    params: &mut [T],
    grads: &[T],
    state: &mut AdamState,
    cfg: &TrainConfig,
) -> Result<()> {
    if params.len() != grads.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(SrnrError::Shape(format!(
            "adam_step: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(SrnrError::TrainingDivergence(format!(
            "non-finite gradient {} at parameter {i} (step {})",
            grads[i],
            state.t + 1
        )));
    }
    state.t += 1;
    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    for i in 0..params.len() {
        let g = grads[i].f64();
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g;
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        let step = cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.adam_eps);
        params[i] = T::of(params[i].f64() - step);
    }
    Ok(())
}

/// One training patch: interpolated input and target residual, shape
/// `[1, 1, px, py, pz]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSample {
    pub input: Tensor5<f64>,
    pub target: Tensor5<f64>,
    pub volume: usize,
    pub corner: [usize; 3],
    /// Fraction of patch voxels inside the brain mask.
    pub coverage: f64,
}

/// Summed-volume table of a mask for constant-time box counts.
struct MaskIntegral {
    dims: Dims,
    table: Vec<u32>,
}

impl MaskIntegral {
    fn new(mask: &BrainMask) -> Self {
        let [nx, ny, nz] = mask.dims();
        let (sy, sz) = (ny + 1, nz + 1);
        let mut table = vec![0u32; (nx + 1) * sy * sz];
        let at = |i: usize, j: usize, k: usize| (i * sy + j) * sz + k;
        let bits = mask.bits();
        for i in 0..nx {
            for j in 0..ny {
                for k in 0..nz {
                    let b = bits[(i * ny + j) * nz + k] as u32;
                    table[at(i + 1, j + 1, k + 1)] = b
                        .wrapping_add(table[at(i, j + 1, k + 1)])
                        .wrapping_add(table[at(i + 1, j, k + 1)])
                        .wrapping_add(table[at(i + 1, j + 1, k)])
                        .wrapping_sub(table[at(i, j, k + 1)])
                        .wrapping_sub(table[at(i, j + 1, k)])
                        .wrapping_sub(table[at(i + 1, j, k)])
                        .wrapping_add(table[at(i, j, k)]);
                }
            }
        }
        MaskIntegral {
            dims: mask.dims(),
            table,
        }
    }

    fn count(&self, lo: [usize; 3], size: [usize; 3]) -> u32 {
        let (sy, sz) = (self.dims[1] + 1, self.dims[2] + 1);
        let at = |i: usize, j: usize, k: usize| self.table[(i * sy + j) * sz + k];
        let [a, b, c] = lo;
        let [x, y, z] = [a + size[0], b + size[1], c + size[2]];
        at(x, y, z)
            .wrapping_sub(at(a, y, z))
            .wrapping_sub(at(x, b, z))
            .wrapping_sub(at(x, y, c))
            .wrapping_add(at(a, b, z))
            .wrapping_add(at(a, y, c))
            .wrapping_add(at(x, b, c))
            .wrapping_sub(at(a, b, c))
    }
}

fn extract_patch(vol: &Volume3D, corner: [usize; 3], size: [usize; 3]) -> Vec<f64> {
    let [_, ny, nz] = vol.dims();
    let mut out = Vec::with_capacity(size.iter().product());
    for i in corner[0]..corner[0] + size[0] {
        for j in corner[1]..corner[1] + size[1] {
            let s = (i * ny + j) * nz + corner[2];
            out.extend_from_slice(&vol.data()[s..s + size[2]]);
        }
    }
    out
}

/// Draws `patches_per_volume` patches from every pair and shuffles them.
/// Corners are uniform subject to the mask-coverage floor; after
/// [`MAX_PATCH_TRIES`] rejections the best candidate seen is used and a
/// warning is logged.
pub fn sample_patches(pairs: &[TrainingPair], cfg: &TrainConfig, seed: u64) -> Result<Vec<TrainSample>> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(SrnrError::EmptyStream("no training volumes to sample from".into()));
    }
    let p = cfg.patch_size;
    let patch_len = p.iter().product::<usize>() as f64;
    let mut rng = seeded_rng(seed);
    let mut samples = Vec::with_capacity(pairs.len() * cfg.patches_per_volume);
    for (v, pair) in pairs.iter().enumerate() {
        let dims = pair.input.dims();
        cfg.check_volume(dims)?;
        pair.mask.check_pair(&pair.input)?;
        let integral = MaskIntegral::new(&pair.mask);
        for _ in 0..cfg.patches_per_volume {
            let mut best: Option<([usize; 3], f64)> = None;
            for _ in 0..MAX_PATCH_TRIES {
                let corner = [0, 1, 2].map(|a| rng.random_range(0..=dims[a] - p[a]));
                let coverage = integral.count(corner, p) as f64 / patch_len;
                if best.is_none_or(|(_, c)| coverage > c) {
                    best = Some((corner, coverage));
                }
                if coverage >= MIN_MASK_COVERAGE {
                    break;
                }
            }
            let (corner, coverage) = best.expect("at least one try");
            if coverage < MIN_MASK_COVERAGE {
                warn!(
                    "volume {v}: no patch with {MIN_MASK_COVERAGE} mask coverage after \
                     {MAX_PATCH_TRIES} tries, using coverage {coverage:.3}"
                );
            }
            let shape = [1, 1, p[0], p[1], p[2]];
            samples.push(TrainSample {
                input: Tensor5::from_vec(shape, extract_patch(&pair.input, corner, p))?,
                target: Tensor5::from_vec(shape, extract_patch(&pair.target_residual, corner, p))?,
                volume: v,
                corner,
                coverage,
            });
        }
    }
    samples.shuffle(&mut rng);
    Ok(samples)
}

/// Per-epoch mean losses; the validation loss is `None` without a held-out
/// volume.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochLoss {
    pub epoch: usize,
    pub train: f64,
    pub validation: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub net: MuNet<f32>,
    pub loss_curve: Vec<EpochLoss>,
}

fn stack<T: Real>(parts: &[&Tensor5<f64>]) -> Result<Tensor5<T>> {
    let mut shape = parts[0].shape();
    shape[0] = parts.len();
    let data = parts
        .iter()
        .flat_map(|t| t.data().iter().map(|&v| T::of(v)))
        .collect();
    Tensor5::from_vec(shape, data)
}

fn batch_loss<T: Real>(net: &MuNet<T>, batch: &[TrainSample]) -> Result<f64> {
    let x = stack::<T>(&batch.iter().map(|s| &s.input).collect::<Vec<_>>())?;
    let y = stack::<T>(&batch.iter().map(|s| &s.target).collect::<Vec<_>>())?;
    let (r, _) = munet_forward(net, &x)?;
    Ok(l2_loss(&r, &y)?.0)
}

/// Mean loss over `samples`, evaluated in minibatches.
fn mean_loss<T: Real>(net: &MuNet<T>, samples: &[TrainSample], batch_size: usize) -> Result<f64> {
    let mut total = 0.0;
    for chunk in samples.chunks(batch_size) {
        total += batch_loss(net, chunk)? * chunk.len() as f64;
    }
    Ok(total / samples.len() as f64)
}

fn train_typed<T: Real>(
    train: &[TrainingPair],
    validation: Option<&TrainingPair>,
    shape: NetShape,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    let mut net = initial_net::<T>(shape, cfg)?;
    let mut params = net.params();
    let mut adam = AdamState::new(params.len());
    let val_samples = match validation {
        Some(pair) => Some(sample_patches(
            std::slice::from_ref(pair),
            cfg,
            derive_seed_str(cfg.seed, "validation"),
        )?),
        None => None,
    };
    let patch_seed = derive_seed_str(cfg.seed, "patches");
    let mut loss_curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let samples = sample_patches(train, cfg, derive_seed(patch_seed, epoch as u64))?;
        let mut total = 0.0;
        for batch in samples.chunks(cfg.batch_size) {
            let x = stack::<T>(&batch.iter().map(|s| &s.input).collect::<Vec<_>>())?;
            let y = stack::<T>(&batch.iter().map(|s| &s.target).collect::<Vec<_>>())?;
            let (r, tape) = munet_forward(&net, &x)?;
            let (loss, grad) = l2_loss(&r, &y)?;
            if !loss.is_finite() {
                return Err(SrnrError::TrainingDivergence(format!(
                    "non-finite loss at epoch {} step {}",
                    epoch + 1,
                    adam.t + 1
                )));
            }
            total += loss * batch.len() as f64;
            let grads = munet_backward(&net, &tape, &grad)?;
            adam_step(&mut params.values, &grads.params.values, &mut adam, cfg)?;
            net.set_params(&params)?;
        }
        let validation = match &val_samples {
            Some(v) => Some(mean_loss(&net, v, cfg.batch_size)?),
            None => None,
        };
        let train_loss = total / samples.len() as f64;
        log::info!("epoch {}: train loss {train_loss:.6e}", epoch + 1);
        loss_curve.push(EpochLoss {
            epoch: epoch + 1,
            train: train_loss,
            validation,
        });
    }
    Ok(TrainOutcome {
        net: net.cast(),
        loss_curve,
    })
}

/// Trains on prepared pairs. With two or more pairs the last one is held out
/// and only used for the validation loss.
pub fn train_on_pairs(pairs: &[TrainingPair], shape: NetShape, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    shape.validate()?;
    if pairs.is_empty() {
        return Err(SrnrError::InvalidArgument("need at least one training volume".into()));
    }
    for pair in pairs {
        cfg.check_volume(pair.input.dims())?;
    }
    let (train, validation) = if pairs.len() >= 2 {
        (&pairs[..pairs.len() - 1], pairs.last())
    } else {
        (pairs, None)
    };
    match cfg.precision {
        Precision::F32 => train_typed::<f32>(train, validation, shape, cfg),
        Precision::F64 => train_typed::<f64>(train, validation, shape, cfg),
    }
}

/// Noise seed of training volume `v`.
pub fn volume_noise_seed(nspec: &NoiseSpec, v: usize) -> u64 {
    derive_seed(nspec.seed, v as u64)
}

/// Builds one training pair per volume, with `k` averaged noise
/// realizations in each reference. The noise of each volume is drawn once.
pub fn build_pairs(
    hr_volumes: &[Volume3D],
    masks: &[BrainMask],
    dspec: &DegradeSpec,
    nspec: &NoiseSpec,
    k: usize,
) -> Result<Vec<TrainingPair>> {
    if hr_volumes.len() != masks.len() {
        return Err(SrnrError::InvalidArgument(format!(
            "{} volumes but {} masks",
            hr_volumes.len(),
            masks.len()
        )));
    }
    hr_volumes
        .iter()
        .zip(masks)
        .enumerate()
        .map(|(v, (hr, mask))| {
            let spec = NoiseSpec {
                seed: volume_noise_seed(nspec, v),
                ..*nspec
            };
            make_averaged_pair(hr, mask, dspec, &spec, k)
        })
        .collect()
}

pub fn train_model(
    hr_volumes: &[Volume3D],
    masks: &[BrainMask],
    dspec: &DegradeSpec,
    nspec: &NoiseSpec,
    shape: NetShape,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    let pairs = build_pairs(hr_volumes, masks, dspec, nspec, 1)?;
    train_on_pairs(&pairs, shape, cfg)
}

/// Least-squares fits of `y = X theta*` against clean and noisy targets.
#[derive(Clone, Debug, PartialEq)]
pub struct N2nFit {
    pub theta_clean: Vec<f64>,
    pub theta_noisy: Vec<f64>,
}

/// Solves the normal equations `X^T X theta = X^T y` by Cholesky
/// factorization. `x` is row-major with `p` columns.
pub fn least_squares(x: &[f64], p: usize, y: &[f64]) -> Result<Vec<f64>> {
    if p == 0 || x.len() != y.len() * p {
        return Err(SrnrError::Shape(format!(
            "design of {} entries does not match {} rows x {p} columns",
            x.len(),
            y.len()
        )));
    }
    let mut a = vec![0.0; p * p];
    let mut b = vec![0.0; p];
    for (row, &yi) in x.chunks_exact(p).zip(y) {
        for r in 0..p {
            b[r] += row[r] * yi;
            for c in 0..=r {
                a[r * p + c] += row[r] * row[c];
            }
        }
    }
    let scale = (0..p).map(|i| a[i * p + i]).fold(0.0, f64::max);
    for j in 0..p {
        let mut d = a[j * p + j];
        for k in 0..j {
            d -= a[j * p + k] * a[j * p + k];
        }
        if !(d > 1e-12 * scale) {
            return Err(SrnrError::DegenerateDesign(format!(
                "normal matrix is singular at column {j}"
            )));
        }
        let d = d.sqrt();
        a[j * p + j] = d;
        for i in j + 1..p {
            let mut s = a[i * p + j];
            for k in 0..j {
                s -= a[i * p + k] * a[j * p + k];
            }
            a[i * p + j] = s / d;
        }
    }
    for i in 0..p {
        let mut s = b[i];
        for k in 0..i {
            s -= a[i * p + k] * b[k];
        }
        b[i] = s / a[i * p + i];
    }
    for i in (0..p).rev() {
        let mut s = b[i];
        for k in i + 1..p {
            s -= a[k * p + i] * b[k];
        }
        b[i] = s / a[i * p + i];
    }
    Ok(b)
}

/// Scalar mean estimation (`X` a column of ones, `theta* = 1`): fits
/// against clean targets and against targets with iid `N(0, sigma^2)` noise.
pub fn n2n_closed_form_oracle(n_samples: usize, noise_sigma: f64, seed: u64) -> Result<N2nFit> {
    let design = vec![1.0; n_samples];
    n2n_fit(&design, 1, &[1.0], noise_sigma, seed)
}

/// General form of [`n2n_closed_form_oracle`] for an arbitrary row-major
/// design with `p` columns and true parameters `theta_star`.
pub fn n2n_fit(design: &[f64], p: usize, theta_star: &[f64], noise_sigma: f64, seed: u64) -> Result<N2nFit> {
    if theta_star.len() != p || p == 0 || design.len() % p != 0 {
        return Err(SrnrError::Shape("design and parameter lengths disagree".into()));
    }
    let n = design.len() / p;
    if n < 10 {
        return Err(SrnrError::InvalidArgument(format!("need at least 10 samples, got {n}")));
    }
    if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
        return Err(SrnrError::InvalidArgument(format!("invalid noise sigma {noise_sigma}")));
    }
    let y: Vec<f64> = design
        .chunks_exact(p)
        .map(|row| row.iter().zip(theta_star).map(|(a, b)| a * b).sum())
        .collect();
    let theta_clean = least_squares(design, p, &y)?;
    if noise_sigma == 0.0 {
        return Ok(N2nFit {
            theta_noisy: theta_clean.clone(),
            theta_clean,
        });
    }
    let normal = Normal::new(0.0, noise_sigma).expect("valid sigma");
    let mut rng = seeded_rng(seed);
    let noisy: Vec<f64> = y.iter().map(|&v| v + normal.sample(&mut rng)).collect();
    let theta_noisy = least_squares(design, p, &noisy)?;
    Ok(N2nFit {
        theta_clean,
        theta_noisy,
    })
}

/// Tile start positions along one axis of length `n` for patch `p` and
/// stride `p / 2`; the last tile is flush with the end.
pub fn tile_starts(n: usize, p: usize) -> Vec<usize> {
    if p >= n {
        return vec![0];
    }
    let stride = (p / 2).max(1);
    let mut starts: Vec<usize> = (0..=n - p).step_by(stride).collect();
    if *starts.last().expect("nonempty") != n - p {
        starts.push(n - p);
    }
    starts
}

/// Raised-cosine window `sin^2(pi (t + 0.5) / p)`, strictly positive.
pub fn cosine_window(p: usize) -> Vec<f64> {
    (0..p)
        .map(|t| {
            let s = (std::f64::consts::PI * (t as f64 + 0.5) / p as f64).sin();
            s * s
        })
        .collect()
}

/// Sum of the tile windows covering every voxel; blending divides by it.
pub fn blend_weight_sum(dims: Dims, patch: [usize; 3]) -> Vec<f64> {
    let p = [0, 1, 2].map(|a| patch[a].min(dims[a]));
    let axes = [0, 1, 2].map(|a| {
        let w = cosine_window(p[a]);
        let mut acc = vec![0.0; dims[a]];
        for s in tile_starts(dims[a], p[a]) {
            for t in 0..p[a] {
                acc[s + t] += w[t];
            }
        }
        acc
    });
    let [nx, ny, nz] = dims;
    let mut out = Vec::with_capacity(nx * ny * nz);
    for i in 0..nx {
        for j in 0..ny {
            for k in 0..nz {
                out.push(axes[0][i] * axes[1][j] * axes[2][k]);
            }
        }
    }
    out
}

/// Number of tiles evaluated together during inference.
const INFER_BATCH: usize = 4;

/// Prediction `input + residual` over a whole interpolated volume. The
/// residual is evaluated on overlapping tiles and blended with separable
/// raised-cosine windows normalized by their sum. Volumes no larger than
/// one patch are processed in a single pass.
pub fn predict_volume<T: Real>(net: &MuNet<T>, input: &Volume3D, patch: [usize; 3]) -> Result<Volume3D> {
    if patch.iter().any(|&p| p == 0) {
        return Err(SrnrError::InvalidArgument("patch extents must be positive".into()));
    }
    let dims = input.dims();
    let p = [0, 1, 2].map(|a| patch[a].min(dims[a]));
    if p == dims {
        let x = Tensor5::from_vec([1, 1, dims[0], dims[1], dims[2]], input.data().iter().map(|&v| T::of(v)).collect())?;
        let (r, _) = munet_forward(net, &x)?;
        let data = input.data().iter().zip(r.data()).map(|(&a, &b)| a + b.f64()).collect();
        return Volume3D::new(dims, input.spacing(), data);
    }

    let windows = [0, 1, 2].map(|a| cosine_window(p[a]));
    let mut corners = Vec::new();
    for &i in &tile_starts(dims[0], p[0]) {
        for &j in &tile_starts(dims[1], p[1]) {
            for &k in &tile_starts(dims[2], p[2]) {
                corners.push([i, j, k]);
            }
        }
    }
    let [_, ny, nz] = dims;
    let mut acc = vec![0.0; input.len()];
    for chunk in corners.chunks(INFER_BATCH) {
        let mut data = Vec::with_capacity(chunk.len() * p.iter().product::<usize>());
        for &c in chunk {
            data.extend(extract_patch(input, c, p).into_iter().map(T::of));
        }
        let x = Tensor5::from_vec([chunk.len(), 1, p[0], p[1], p[2]], data)?;
        let (r, _) = munet_forward(net, &x)?;
        for (b, &c) in chunk.iter().enumerate() {
            let tile = r.plane(b, 0);
            for a in 0..p[0] {
                for bb in 0..p[1] {
                    let wab = windows[0][a] * windows[1][bb];
                    let dst = ((c[0] + a) * ny + c[1] + bb) * nz + c[2];
                    let src = (a * p[1] + bb) * p[2];
                    for t in 0..p[2] {
                        acc[dst + t] += wab * windows[2][t] * tile[src + t].f64();
                    }
                }
            }
        }
    }
    let weights = blend_weight_sum(dims, p);
    let data = input
        .data()
        .iter()
        .zip(acc.iter().zip(&weights))
        .map(|(&v, (&r, &w))| v + r / w)
        .collect();
    Volume3D::new(dims, input.spacing(), data)
}

/// Interpolates a thick-slice volume to the fine grid and applies the
/// network.
pub fn infer_volume<T: Real>(
    net: &MuNet<T>,
    low_res: &Volume3D,
    dspec: &DegradeSpec,
    patch: [usize; 3],
) -> Result<Volume3D> {
    dspec.validate()?;
    let axis = dspec.slice_axis;
    let target = low_res.dims()[axis] * dspec.factor;
    let up = upsample_cubic(low_res, target, axis)?;
    predict_volume(net, &up.volume, patch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{generate_phantom, PhantomSpec};

    fn tensor(v: Vec<f64>) -> Tensor5<f64> {
        Tensor5::from_vec([1, 1, 1, 1, v.len()], v).unwrap()
    }

    #[test]
    fn l2_hand_values() {
        let (loss, grad) = l2_loss(&tensor(vec![1.0, 1.0]), &tensor(vec![0.0, 2.0])).unwrap();
        assert_eq!(loss, 1.0);
        assert_eq!(grad.data(), &[1.0, -1.0]);
        let (loss, grad) = l2_loss(&tensor(vec![0.3, -2.0]), &tensor(vec![0.3, -2.0])).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.data().iter().all(|&g| g == 0.0));
        assert!(matches!(l2_loss(&tensor(vec![1.0]), &tensor(vec![1.0, 2.0])), Err(SrnrError::Shape(_))));
    }

    #[test]
    fn adam_first_step_and_zero_gradient() {
        let cfg = TrainConfig {
            learning_rate: 0.1,
            ..TrainConfig::default()
        };
        let mut p = [0.5f64];
        let mut s = AdamState::new(1);
        adam_step(&mut p, &[1.0], &mut s, &cfg).unwrap();
        assert!((p[0] - (0.5 - 0.1 / (1.0 + 1e-8))).abs() < 1e-15);

        let mut q = [0.25f64, -3.0];
        let mut s = AdamState::new(2);
        for _ in 0..5 {
            adam_step(&mut q, &[0.0, 0.0], &mut s, &cfg).unwrap();
        }
        assert_eq!(q, [0.25, -3.0]);
    }

    #[test]
    fn adam_rejects_non_finite_gradient() {
        let cfg = TrainConfig::default();
        let mut p = [1.0f32, 2.0];
        let mut s = AdamState::new(2);
        let err = adam_step(&mut p, &[0.0, f32::NAN], &mut s, &cfg);
        assert!(matches!(err, Err(SrnrError::TrainingDivergence(_))));
        assert_eq!(s.t, 0);
        assert_eq!(p, [1.0, 2.0]);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            adam_beta2: 1.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        assert!(TrainConfig::default().check_volume([31, 64, 64]).is_err());
        assert_eq!("f64".parse::<Precision>().unwrap(), Precision::F64);
        assert!("half".parse::<Precision>().is_err());
    }

    #[test]
    fn mask_integral_matches_brute_force() {
        let (_, mask) = generate_phantom(&PhantomSpec::brain_like([20, 18, 16], 3)).unwrap();
        let integral = MaskIntegral::new(&mask);
        for (lo, size) in [([0, 0, 0], [20, 18, 16]), ([3, 5, 2], [7, 4, 9]), ([10, 1, 0], [1, 1, 1])] {
            let mut n = 0;
            for i in lo[0]..lo[0] + size[0] {
                for j in lo[1]..lo[1] + size[1] {
                    for k in lo[2]..lo[2] + size[2] {
                        n += mask.bits()[(i * 18 + j) * 16 + k] as u32;
                    }
                }
            }
            assert_eq!(integral.count(lo, size), n);
        }
    }

    #[test]
    fn tiles_cover_every_axis_position() {
        assert_eq!(tile_starts(10, 16), vec![0]);
        assert_eq!(tile_starts(64, 32), vec![0, 16, 32]);
        assert_eq!(tile_starts(60, 32), vec![0, 16, 28]);
        assert_eq!(tile_starts(5, 1), vec![0, 1, 2, 3, 4]);
        let w = cosine_window(8);
        assert!(w.iter().all(|&v| v > 0.0 && v <= 1.0));
        assert!((w[0] - w[7]).abs() < 1e-15);
    }

    #[test]
    fn least_squares_recovers_exact_solution() {
        let x = [1.0, 0.0, 1.0, 1.0, 1.0, 2.0, 1.0, 3.0];
        let y = [1.0, 3.0, 5.0, 7.0];
        let theta = least_squares(&x, 2, &y).unwrap();
        assert!((theta[0] - 1.0).abs() < 1e-12 && (theta[1] - 2.0).abs() < 1e-12);
        let singular = [1.0, 2.0, 2.0, 4.0, 3.0, 6.0];
        assert!(matches!(least_squares(&singular, 2, &[1.0, 2.0, 3.0]), Err(SrnrError::DegenerateDesign(_))));
    }

    #[test]
    fn n2n_zero_noise_is_the_same_solve() {
        let fit = n2n_closed_form_oracle(100, 0.0, 9).unwrap();
        assert_eq!(fit.theta_clean, fit.theta_noisy);
        assert!(n2n_closed_form_oracle(9, 1.0, 9).is_err());
    }
}
