//! Masked image-quality metrics: MAE, PSNR and 3D SSIM, plus group
//! aggregation and the CSV row format.
//!
//! SSIM uses a separable Gaussian window (11 voxels per axis, sigma 1.5).
//! Near the borders the window is truncated to the volume and renormalized.
//! The local SSIM map is clamped to `[-1, 1]` and averaged over the mask.

use std::io::{Read, Write};

use crate::error::{Result, SrnrError};
use crate::volume::{BrainMask, Volume3D};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
/// Dynamic range of normalized intensities.
pub const DYNAMIC_RANGE: f64 = 1.0;

fn check_inputs(a: &Volume3D, b: &Volume3D, mask: &BrainMask) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(SrnrError::Shape(format!(
            "metric inputs differ in shape: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    mask.check_pair(a)
}

fn masked_mean(values: impl Iterator<Item = f64>, mask: &BrainMask) -> f64 {
    let mut sum = 0.0;
    for (v, &m) in values.zip(mask.bits()) {
        if m {
            sum += v;
        }
    }
    sum / mask.count() as f64
}

/// Mean absolute difference over masked voxels.
pub fn mae(a: &Volume3D, b: &Volume3D, mask: &BrainMask) -> Result<f64> {
    check_inputs(a, b, mask)?;
    Ok(masked_mean(a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()), mask))
}

/// Mean squared difference over masked voxels.
pub fn mse(a: &Volume3D, b: &Volume3D, mask: &BrainMask) -> Result<f64> {
    check_inputs(a, b, mask)?;
    Ok(masked_mean(
        a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)),
        mask,
    ))
}

/// `10 log10(peak^2 / MSE)` in dB; `+inf` when the volumes agree on the mask.
pub fn psnr(a: &Volume3D, b: &Volume3D, mask: &BrainMask, peak: f64) -> Result<f64> {
    if !(peak > 0.0 && peak.is_finite()) {
        return Err(SrnrError::InvalidArgument(format!("PSNR peak must be positive, got {peak}")));
    }
    let m = mse(a, b, mask)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / m).log10())
}

/// Normalized 1D Gaussian of odd length `size`.
pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size / 2) as f64;
    let w: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - c;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|v| v / total).collect()
}

/// Window size actually used for a volume: the default, or the largest odd
/// size not exceeding the smallest dimension.
pub fn ssim_window_size(dims: [usize; 3]) -> usize {
    let smallest = dims.iter().copied().min().unwrap_or(1);
    if smallest >= SSIM_WINDOW {
        SSIM_WINDOW
    } else if smallest % 2 == 1 {
        smallest
    } else {
        smallest - 1
    }
}

/// SSIM value with the window that produced it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SsimResult {
    pub value: f64,
    pub window: usize,
    /// The volume was smaller than the default window.
    pub shrunk: bool,
}

/// Filters `data` along `axis` with `w`, renormalizing the taps that fall
/// inside the volume.
fn filter_axis(data: &[f64], dims: [usize; 3], axis: usize, w: &[f64]) -> Vec<f64> {
    let n = dims[axis];
    let stride = match axis {
        0 => dims[1] * dims[2],
        1 => dims[2],
        _ => 1,
    };
    let half = (w.len() / 2) as isize;
    let mut out = vec![0.0; data.len()];
    for (base, o) in out.iter_mut().enumerate() {
        let pos = (base / stride) % n;
        let line = base - pos * stride;
        let mut acc = 0.0;
        let mut norm = 0.0;
        for (t, &wt) in w.iter().enumerate() {
            let q = pos as isize + t as isize - half;
            if q >= 0 && (q as usize) < n {
                acc += wt * data[line + q as usize * stride];
                norm += wt;
            }
        }
        *o = acc / norm;
    }
    out
}

fn local_mean(data: &[f64], dims: [usize; 3], w: &[f64]) -> Vec<f64> {
    let x = filter_axis(data, dims, 0, w);
    let y = filter_axis(&x, dims, 1, w);
    filter_axis(&y, dims, 2, w)
}

/// Masked mean SSIM with window metadata.
pub fn ssim_detailed(a: &Volume3D, b: &Volume3D, mask: &BrainMask) -> Result<SsimResult> {
    check_inputs(a, b, mask)?;
    let dims = a.dims();
    let window = ssim_window_size(dims);
    let w = gaussian_window(window, SSIM_SIGMA);
    let c1 = (SSIM_K1 * DYNAMIC_RANGE).powi(2);
    let c2 = (SSIM_K2 * DYNAMIC_RANGE).powi(2);

    let (da, db) = (a.data(), b.data());
    let mu_a = local_mean(da, dims, &w);
    let mu_b = local_mean(db, dims, &w);
    let sq = |x: &[f64], y: &[f64]| -> Vec<f64> { x.iter().zip(y).map(|(p, q)| p * q).collect() };
    let e_aa = local_mean(&sq(da, da), dims, &w);
    let e_bb = local_mean(&sq(db, db), dims, &w);
    let e_ab = local_mean(&sq(da, db), dims, &w);

    let map = (0..da.len()).map(|i| {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let var_a = e_aa[i] - ma * ma;
        let var_b = e_bb[i] - mb * mb;
        let cov = e_ab[i] - ma * mb;
        let s = ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (var_a + var_b + c2));
        s.clamp(-1.0, 1.0)
    });
    Ok(SsimResult {
        value: masked_mean(map, mask),
        window,
        shrunk: window < SSIM_WINDOW,
    })
}

pub fn ssim(a: &Volume3D, b: &Volume3D, mask: &BrainMask) -> Result<f64> {
    Ok(ssim_detailed(a, b, mask)?.value)
}

/// Metrics of one volume against its reference.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub label: String,
    pub mae: f64,
    pub psnr_db: f64,
    pub ssim: f64,
}

impl MetricsRow {
    /// All three metrics with unit peak.
    pub fn compute(label: impl Into<String>, a: &Volume3D, b: &Volume3D, mask: &BrainMask) -> Result<Self> {
        Ok(MetricsRow {
            label: label.into(),
            mae: mae(a, b, mask)?,
            psnr_db: psnr(a, b, mask, DYNAMIC_RANGE)?,
            ssim: ssim(a, b, mask)?,
        })
    }
}

/// Mean and sample standard deviation of one metric.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
}

/// Group statistics across subjects. Infinite PSNRs are excluded from the
/// PSNR summary and `psnr_finite` counts the rows that remain.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroupMetrics {
    pub n: usize,
    pub mae: Summary,
    pub psnr_db: Summary,
    pub psnr_finite: usize,
    pub ssim: Summary,
}

/// Welford mean and sample standard deviation; zero spread for one value.
pub fn summarize(values: &[f64]) -> Summary {
    let mut mean = 0.0;
    let mut m2 = 0.0;
    for (i, &v) in values.iter().enumerate() {
        let d = v - mean;
        mean += d / (i + 1) as f64;
        m2 += d * (v - mean);
    }
    let std = if values.len() > 1 {
        (m2 / (values.len() - 1) as f64).sqrt()
    } else {
        0.0
    };
    Summary { mean, std }
}

pub fn group_metrics(rows: &[MetricsRow]) -> Result<GroupMetrics> {
    if rows.is_empty() {
        return Err(SrnrError::InvalidArgument("group metrics of an empty list".into()));
    }
    let pick = |f: fn(&MetricsRow) -> f64| rows.iter().map(f).collect::<Vec<_>>();
    let finite: Vec<f64> = rows.iter().map(|r| r.psnr_db).filter(|p| p.is_finite()).collect();
    let psnr_db = if finite.is_empty() {
        Summary {
            mean: f64::INFINITY,
            std: 0.0,
        }
    } else {
        summarize(&finite)
    };
    Ok(GroupMetrics {
        n: rows.len(),
        mae: summarize(&pick(|r| r.mae)),
        psnr_db,
        psnr_finite: finite.len(),
        ssim: summarize(&pick(|r| r.ssim)),
    })
}

pub const ROW_HEADER: [&str; 4] = ["label", "mae", "psnr_db", "ssim"];

/// Writes rows as CSV with header `label,mae,psnr_db,ssim`. Floats use the
/// shortest representation that parses back exactly; infinity is `inf`.
pub fn write_rows_csv<W: Write>(rows: &[MetricsRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| SrnrError::Config(format!("CSV write failed: {e}"));
    w.write_record(ROW_HEADER).map_err(io)?;
    for r in rows {
        w.write_record([r.label.clone(), r.mae.to_string(), r.psnr_db.to_string(), r.ssim.to_string()])
            .map_err(io)?;
    }
    w.flush().map_err(|e| SrnrError::Config(format!("CSV write failed: {e}")))?;
    Ok(())
}

pub fn read_rows_csv<R: Read>(input: R) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_reader(input);
    let bad = |msg: String| SrnrError::Config(format!("malformed metrics CSV: {msg}"));
    let header = r.headers().map_err(|e| bad(e.to_string()))?.clone();
    if header.iter().ne(ROW_HEADER) {
        return Err(bad(format!("unexpected header {header:?}")));
    }
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let num = |i: usize| -> Result<f64> { rec[i].parse::<f64>().map_err(|e| bad(format!("{:?}: {e}", &rec[i]))) };
        rows.push(MetricsRow {
            label: rec[0].to_string(),
            mae: num(1)?,
            psnr_db: num(2)?,
            ssim: num(3)?,
        });
    }
    Ok(rows)
}
