//! Independent reference implementations shared by the integration tests.
//!
//! Every oracle here is written directly from its textbook definition with
//! plain loops, without calling the library routine it checks.

#![allow(dead_code)]

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use srnr::nn::{ConvLayer, MuNet, Tensor5, TAPS};
use srnr::volume::{BrainMask, Volume3D};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

pub fn random_volume(rng: &mut ChaCha8Rng, dims: [usize; 3]) -> Volume3D {
    let n = dims.iter().product();
    Volume3D::new(dims, [1.0; 3], uniform_vec(rng, n, 0.0, 1.0)).unwrap()
}

/// Random mask with roughly `p` of the voxels set and at least one set.
pub fn random_mask(rng: &mut ChaCha8Rng, dims: [usize; 3], p: f64) -> BrainMask {
    let n: usize = dims.iter().product();
    let mut bits: Vec<bool> = (0..n).map(|_| rng.random::<f64>() < p).collect();
    bits[rng.random_range(0..n)] = true;
    BrainMask::new(dims, bits).unwrap()
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: [usize; 5]) -> Tensor5<f64> {
    let n = shape.iter().product();
    Tensor5::from_vec(shape, uniform_vec(rng, n, -1.0, 1.0)).unwrap()
}

pub fn random_layer(rng: &mut ChaCha8Rng, c_out: usize, c_in: usize) -> ConvLayer<f64> {
    let mut l = ConvLayer::zeros(c_out, c_in);
    l.weights = uniform_vec(rng, c_out * c_in * TAPS, -0.5, 0.5);
    l.bias = uniform_vec(rng, c_out, -0.5, 0.5);
    l
}

/// Fills every parameter of `net` with uniform values in `[-a, a]`.
pub fn randomize_net(rng: &mut ChaCha8Rng, net: &mut MuNet<f64>, a: f64) {
    for layer in net.layers_mut() {
        for w in layer.weights.iter_mut().chain(layer.bias.iter_mut()) {
            *w = rng.random_range(-a..a);
        }
    }
}

/// Direct 3x3x3 "same" cross-correlation with zero padding.
pub fn naive_conv(x: &Tensor5<f64>, layer: &ConvLayer<f64>) -> Tensor5<f64> {
    let [nb, ci_n, nx, ny, nz] = x.shape();
    assert_eq!(ci_n, layer.c_in);
    let mut out = Tensor5::zeros([nb, layer.c_out, nx, ny, nz]);
    let xi = |b: usize, c: usize, i: usize, j: usize, k: usize| x.data()[(((b * ci_n + c) * nx + i) * ny + j) * nz + k];
    for b in 0..nb {
        for co in 0..layer.c_out {
            for i in 0..nx {
                for j in 0..ny {
                    for k in 0..nz {
                        let mut s = layer.bias[co];
                        for ci in 0..ci_n {
                            for dx in -1isize..=1 {
                                for dy in -1isize..=1 {
                                    for dz in -1isize..=1 {
                                        let (p, q, r) = (i as isize + dx, j as isize + dy, k as isize + dz);
                                        if p < 0 || q < 0 || r < 0 || p >= nx as isize || q >= ny as isize || r >= nz as isize {
                                            continue;
                                        }
                                        let t = ((dx + 1) * 9 + (dy + 1) * 3 + (dz + 1)) as usize;
                                        let w = layer.weights[(co * ci_n + ci) * TAPS + t];
                                        s += w * xi(b, ci, p as usize, q as usize, r as usize);
                                    }
                                }
                            }
                        }
                        out.data_mut()[(((b * layer.c_out + co) * nx + i) * ny + j) * nz + k] = s;
                    }
                }
            }
        }
    }
    out
}

/// Largest `|a - b| / max(1, |a|, |b|)` over paired slices.
pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1.0))
        .fold(0.0, f64::max)
}

/// Central finite-difference gradient of `f` at `x`.
pub fn fd_gradient(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Solves `A x = b` by Gaussian elimination with partial pivoting.
pub fn gauss_solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&r, &s| a[r][col].abs().total_cmp(&a[s][col].abs()))
            .unwrap();
        a.swap(col, pivot);
        b.swap(col, pivot);
        for r in col + 1..n {
            let f = a[r][col] / a[col][col];
            for c in col..n {
                a[r][c] -= f * a[col][c];
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|c| a[r][c] * x[c]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    x
}

/// Natural cubic spline through knots at `(i + 0.5) * scale - 0.5`,
/// evaluated at `0..target`, clamped to the end values outside the knots.
/// The second derivatives come from a dense linear solve.
pub fn naive_spline(values: &[f64], target: usize) -> Vec<f64> {
    let n = values.len();
    let scale = target as f64 / n as f64;
    let pos = |i: usize| (i as f64 + 0.5) * scale - 0.5;
    if n == 1 {
        return vec![values[0]; target];
    }
    let mut m = vec![0.0; n];
    if n >= 4 {
        let mut a = vec![vec![0.0; n]; n];
        let mut rhs = vec![0.0; n];
        a[0][0] = 1.0;
        a[n - 1][n - 1] = 1.0;
        let h = scale;
        for i in 1..n - 1 {
            a[i][i - 1] = h / 6.0;
            a[i][i] = 2.0 * h / 3.0;
            a[i][i + 1] = h / 6.0;
            rhs[i] = (values[i + 1] - values[i]) / h - (values[i] - values[i - 1]) / h;
        }
        m = gauss_solve(a, rhs);
    }
    (0..target)
        .map(|x| {
            let x = x as f64;
            if x <= pos(0) {
                return values[0];
            }
            if x >= pos(n - 1) {
                return values[n - 1];
            }
            let seg = (0..n - 1).find(|&s| x >= pos(s) && x <= pos(s + 1)).unwrap();
            let (x0, x1) = (pos(seg), pos(seg + 1));
            let h = x1 - x0;
            let a = (x1 - x) / h;
            let b = (x - x0) / h;
            a * values[seg]
                + b * values[seg + 1]
                + ((a.powi(3) - a) * m[seg] + (b.powi(3) - b) * m[seg + 1]) * h * h / 6.0
        })
        .collect()
}

/// Block mean along `axis` over whole blocks of `factor` slices.
pub fn naive_downsample(vol: &Volume3D, axis: usize, factor: usize) -> Vec<f64> {
    let d = vol.dims();
    let mut od = d;
    od[axis] = d[axis] / factor;
    let mut out = Vec::new();
    for i in 0..od[0] {
        for j in 0..od[1] {
            for k in 0..od[2] {
                let mut s = 0.0;
                for f in 0..factor {
                    let mut p = [i, j, k];
                    p[axis] = p[axis] * factor + f;
                    s += vol.get(p[0], p[1], p[2]);
                }
                out.push(s / factor as f64);
            }
        }
    }
    out
}

pub fn naive_mae(a: &Volume3D, b: &Volume3D, m: &BrainMask) -> f64 {
    let (mut s, mut n) = (0.0, 0.0);
    for i in 0..a.len() {
        if m.bits()[i] {
            s += (a.data()[i] - b.data()[i]).abs();
            n += 1.0;
        }
    }
    s / n
}

pub fn naive_psnr(a: &Volume3D, b: &Volume3D, m: &BrainMask) -> f64 {
    let (mut s, mut n) = (0.0, 0.0);
    for i in 0..a.len() {
        if m.bits()[i] {
            s += (a.data()[i] - b.data()[i]).powi(2);
            n += 1.0;
        }
    }
    10.0 * (1.0 / (s / n)).log10()
}

/// Masked mean of the local SSIM map computed with an explicit 3D window
/// sum. Taps outside the volume are dropped and the remaining weights
/// renormalized.
pub fn naive_ssim(a: &Volume3D, b: &Volume3D, m: &BrainMask) -> f64 {
    let d = a.dims();
    let smallest = *d.iter().min().unwrap();
    let size = if smallest >= 11 { 11 } else if smallest % 2 == 1 { smallest } else { smallest - 1 };
    let r = (size / 2) as isize;
    let g = |t: isize| (-(t * t) as f64 / (2.0 * 1.5 * 1.5)).exp();
    let (c1, c2) = (1e-4, 9e-4);
    let mut total = 0.0;
    let mut count = 0.0;
    for i in 0..d[0] {
        for j in 0..d[1] {
            for k in 0..d[2] {
                if !m.bits()[a.index(i, j, k)] {
                    continue;
                }
                let (mut w_sum, mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
                for dx in -r..=r {
                    for dy in -r..=r {
                        for dz in -r..=r {
                            let (p, q, s) = (i as isize + dx, j as isize + dy, k as isize + dz);
                            if p < 0 || q < 0 || s < 0 || p >= d[0] as isize || q >= d[1] as isize || s >= d[2] as isize {
                                continue;
                            }
                            let w = g(dx) * g(dy) * g(dz);
                            let x = a.get(p as usize, q as usize, s as usize);
                            let y = b.get(p as usize, q as usize, s as usize);
                            w_sum += w;
                            sa += w * x;
                            sb += w * y;
                            saa += w * x * x;
                            sbb += w * y * y;
                            sab += w * x * y;
                        }
                    }
                }
                let (ma, mb) = (sa / w_sum, sb / w_sum);
                let va = saa / w_sum - ma * ma;
                let vb = sbb / w_sum - mb * mb;
                let cov = sab / w_sum - ma * mb;
                let v = ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                total += v.clamp(-1.0, 1.0);
                count += 1.0;
            }
        }
    }
    total / count
}

/// Two-pass mean and sample standard deviation.
pub fn two_pass(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
    (mean, (ss / (n - 1.0)).sqrt())
}

/// Scalar Adam trajectory for a gradient sequence.
pub fn adam_scalar(theta0: f64, grads: &[f64], lr: f64, b1: f64, b2: f64, eps: f64) -> Vec<f64> {
    let (mut theta, mut m, mut v) = (theta0, 0.0, 0.0);
    let mut out = Vec::new();
    for (t, &g) in grads.iter().enumerate() {
        let t = (t + 1) as i32;
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let mh = m / (1.0 - b1.powi(t));
        let vh = v / (1.0 - b2.powi(t));
        theta -= lr * mh / (vh.sqrt() + eps);
        out.push(theta);
    }
    out
}

/// Relative error with a floor on the denominator, so that gradients that
/// are zero up to rounding compare absolutely.
pub fn grad_rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_REL_FLOOR)
}

pub const GRAD_REL_FLOOR: f64 = 1e-3;
pub const FD_STEP: f64 = 1e-5;

/// Outcome of a finite-difference check over every parameter and input voxel.
#[derive(Debug)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub checked: usize,
    /// Coordinates whose perturbation flipped a ReLU, where the loss is not
    /// differentiable at the scale of the step.
    pub skipped_kinks: usize,
}

fn relu_pattern(tape: &srnr::nn::Tape<f64>) -> Vec<bool> {
    let outs = tape.outputs();
    outs[..outs.len() - 1]
        .iter()
        .flat_map(|t| t.data().iter().map(|&v| v > 0.0))
        .collect()
}

/// L2 loss `mean((residual - target)^2)` of a network.
pub fn net_loss(net: &MuNet<f64>, x: &Tensor5<f64>, target: &Tensor5<f64>) -> (f64, Vec<bool>) {
    let (r, tape) = srnr::nn::munet_forward(net, x).unwrap();
    let n = r.len() as f64;
    let loss = r.data().iter().zip(target.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n;
    (loss, relu_pattern(&tape))
}

/// Compares analytic gradients of the L2 loss with central differences for
/// a random network of `shape` on a random input of spatial size `dims`.
pub fn munet_gradient_check(seed: u64, shape: srnr::nn::NetShape, dims: [usize; 3]) -> GradCheck {
    use srnr::nn::{munet_backward, munet_forward};
    let mut r = rng(seed);
    let mut net = MuNet::<f64>::zeros(shape).unwrap();
    randomize_net(&mut r, &mut net, 0.4);
    let x = random_tensor(&mut r, [1, 1, dims[0], dims[1], dims[2]]);
    let target = random_tensor(&mut r, [1, 1, dims[0], dims[1], dims[2]]);

    let (res, tape) = munet_forward(&net, &x).unwrap();
    let n = res.len() as f64;
    let g: Vec<f64> = res.data().iter().zip(target.data()).map(|(a, b)| 2.0 * (a - b) / n).collect();
    let g = Tensor5::from_vec(res.shape(), g).unwrap();
    let grads = munet_backward(&net, &tape, &g).unwrap();
    let base_pattern = relu_pattern(&tape);

    let mut out = GradCheck {
        max_rel_err: 0.0,
        checked: 0,
        skipped_kinks: 0,
    };
    let mut record = |analytic: f64, up: (f64, Vec<bool>), down: (f64, Vec<bool>)| {
        if up.1 != base_pattern || down.1 != base_pattern {
            out.skipped_kinks += 1;
            return;
        }
        let numeric = (up.0 - down.0) / (2.0 * FD_STEP);
        out.max_rel_err = out.max_rel_err.max(grad_rel_err(analytic, numeric));
        out.checked += 1;
    };

    let params = net.params();
    let mut probe = net.clone();
    let mut p = params.clone();
    for i in 0..params.len() {
        let orig = p.values[i];
        p.values[i] = orig + FD_STEP;
        probe.set_params(&p).unwrap();
        let up = net_loss(&probe, &x, &target);
        p.values[i] = orig - FD_STEP;
        probe.set_params(&p).unwrap();
        let down = net_loss(&probe, &x, &target);
        p.values[i] = orig;
        record(grads.params.values[i], up, down);
    }
    let mut xp = x.clone();
    for i in 0..x.len() {
        let orig = xp.data()[i];
        xp.data_mut()[i] = orig + FD_STEP;
        let up = net_loss(&net, &xp, &target);
        xp.data_mut()[i] = orig - FD_STEP;
        let down = net_loss(&net, &xp, &target);
        xp.data_mut()[i] = orig;
        record(grads.input.data()[i], up, down);
    }
    out
}

/// Direct loops for the gradients of `sum(g * conv(x))` with respect to the
/// input, the weights and the bias.
pub fn naive_conv_backward(
    x: &Tensor5<f64>,
    layer: &ConvLayer<f64>,
    g: &Tensor5<f64>,
) -> (Tensor5<f64>, Vec<f64>, Vec<f64>) {
    let [nb, ci_n, nx, ny, nz] = x.shape();
    let co_n = layer.c_out;
    let xi = |b: usize, c: usize, i: usize, j: usize, k: usize| (((b * ci_n + c) * nx + i) * ny + j) * nz + k;
    let gi = |b: usize, c: usize, i: usize, j: usize, k: usize| (((b * co_n + c) * nx + i) * ny + j) * nz + k;
    let mut gx = Tensor5::zeros(x.shape());
    let mut gw = vec![0.0; layer.weights.len()];
    let mut gb = vec![0.0; co_n];
    for b in 0..nb {
        for co in 0..co_n {
            for i in 0..nx {
                for j in 0..ny {
                    for k in 0..nz {
                        let up = g.data()[gi(b, co, i, j, k)];
                        gb[co] += up;
                        for ci in 0..ci_n {
                            for dx in -1isize..=1 {
                                for dy in -1isize..=1 {
                                    for dz in -1isize..=1 {
                                        let (p, q, r) = (i as isize + dx, j as isize + dy, k as isize + dz);
                                        if p < 0 || q < 0 || r < 0 || p >= nx as isize || q >= ny as isize || r >= nz as isize {
                                            continue;
                                        }
                                        let t = ((dx + 1) * 9 + (dy + 1) * 3 + (dz + 1)) as usize;
                                        let w = (co * ci_n + ci) * TAPS + t;
                                        let at = xi(b, ci, p as usize, q as usize, r as usize);
                                        gw[w] += up * x.data()[at];
                                        gx.data_mut()[at] += up * layer.weights[w];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (gx, gw, gb)
}

/// Every file below `dir` as `(relative path, bytes)`, sorted by path.
pub fn snapshot_dir(dir: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    fn walk(root: &std::path::Path, dir: &std::path::Path, out: &mut Vec<(String, Vec<u8>)>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.push((rel, std::fs::read(&path).unwrap()));
            }
        }
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out);
    out.sort();
    out
}
