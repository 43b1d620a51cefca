use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use log::info;
use srnr::config::{parse_triple, KeyValues};
use srnr::degrade::{make_averaged_pair, DegradeSpec, NoiseSpec};
use srnr::experiment::{emit_report, run_average_study, run_noise_sweep, SweepSpec};
use srnr::metrics::{write_rows_csv, MetricsRow};
use srnr::nifti::{read_nifti, write_nifti};
use srnr::nn::{Checkpoint, NetShape};
use srnr::rng::{derive_seed, derive_seed_str};
use srnr::train::{infer_volume, predict_volume, train_model, Precision, TrainConfig};
use srnr::volume::{generate_phantom, normalize, BrainMask, PhantomSpec, Volume3D};
use srnr::SrnrError;

use crate::{CliError, EvaluateArgs, InferArgs, SimulateArgs, SweepArgs, TrainArgs};

/// Errors found while validating arguments, before any heavy work.
fn usage(e: SrnrError) -> CliError {
    if e.is_io() {
        CliError::Core(e)
    } else {
        CliError::Usage(e.to_string())
    }
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let mut f = fs::File::create(path).map_err(|e| SrnrError::io(path, e))?;
    f.write_all(bytes).map_err(|e| SrnrError::io(path, e))?;
    Ok(())
}

fn read_mask(path: &Path) -> Result<BrainMask, CliError> {
    Ok(BrainMask::from_nonzero(&read_nifti(path)?)?)
}

/// Reads a high-resolution volume and normalizes it over its mask.
fn load_normalized(path: &Path, mask: Option<&Path>) -> Result<(Volume3D, BrainMask), CliError> {
    let vol = read_nifti(path)?;
    let mask = match mask {
        Some(m) => read_mask(m)?,
        None => BrainMask::from_threshold(&vol)?,
    };
    let (normalized, _) = normalize(&vol, &mask)?;
    Ok((normalized, mask))
}

fn noise_seed(seed: u64) -> u64 {
    derive_seed_str(seed, "noise")
}

pub fn simulate(a: &SimulateArgs) -> Result<(), CliError> {
    let dspec = DegradeSpec {
        slice_axis: a.degrade.slice_axis,
        factor: a.degrade.factor,
    };
    dspec.validate().map_err(usage)?;
    let nspec = NoiseSpec {
        mu: a.mu,
        sigma_rel: a.sigma_rel,
        seed: noise_seed(a.seed),
    };
    nspec.validate().map_err(usage)?;
    if a.k == 0 {
        return Err(CliError::Usage("--k must be at least 1".into()));
    }
    let (hr, mask) = match &a.input {
        Some(path) => load_normalized(path, a.mask.as_deref())?,
        None => {
            let dims = parse_triple::<usize>(&a.dims).map_err(usage)?;
            let spec = PhantomSpec::brain_like(dims, a.seed);
            spec.validate().map_err(usage)?;
            generate_phantom(&spec)?
        }
    };
    let pair = make_averaged_pair(&hr, &mask, &dspec, &nspec, a.k)?;
    fs::create_dir_all(&a.out_dir).map_err(|e| SrnrError::io(&a.out_dir, e))?;
    let spacing = pair.ground_truth.spacing();
    let outputs = [
        ("low_res.nii", pair.low_res.clone()),
        ("input.nii", pair.input.clone()),
        ("reference.nii", pair.reference.clone()),
        ("ground_truth.nii", pair.ground_truth.clone()),
        ("mask.nii", pair.mask.to_volume(spacing)?),
    ];
    for (name, vol) in &outputs {
        let path = a.out_dir.join(name);
        write_nifti(vol, &path)?;
        info!("wrote {}", path.display());
    }
    if pair.dropped_slices > 0 {
        log::warn!("cropped {} trailing slices to a whole number of thick slices", pair.dropped_slices);
    }
    Ok(())
}

const TRAIN_KEYS: &[&str] = &[
    "seed",
    "dims",
    "phantoms",
    "sigma_rel",
    "noise_mu",
    "slice_axis",
    "factor",
    "depth",
    "width",
    "epochs",
    "patch",
    "batch",
    "patches_per_volume",
    "learning_rate",
    "adam_beta1",
    "adam_beta2",
    "adam_eps",
    "precision",
    "final_layer_gain",
];

struct TrainSettings {
    seed: u64,
    dims: [usize; 3],
    phantoms: usize,
    nspec: NoiseSpec,
    dspec: DegradeSpec,
    shape: NetShape,
    cfg: TrainConfig,
}

fn read_config(path: Option<&PathBuf>) -> Result<KeyValues, CliError> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| SrnrError::io(p, e))?;
            KeyValues::parse(&text).map_err(usage)
        }
        None => Ok(KeyValues::new()),
    }
}

fn train_settings(kv: &KeyValues) -> Result<TrainSettings, SrnrError> {
    kv.check_known(TRAIN_KEYS)?;
    let d = TrainConfig::default();
    let seed = kv.get_or("seed", 0u64)?;
    let triple = |key: &str, default: [usize; 3]| -> Result<[usize; 3], SrnrError> {
        kv.raw(key).map(parse_triple::<usize>).transpose().map(|v| v.unwrap_or(default))
    };
    let s = TrainSettings {
        seed,
        dims: triple("dims", [64, 64, 60])?,
        phantoms: kv.get_or("phantoms", 4)?,
        nspec: NoiseSpec {
            mu: kv.get_or("noise_mu", 0.0)?,
            sigma_rel: kv.get_or("sigma_rel", 0.0)?,
            seed: noise_seed(seed),
        },
        dspec: DegradeSpec {
            slice_axis: kv.get_or("slice_axis", 2)?,
            factor: kv.get_or("factor", 5)?,
        },
        shape: NetShape {
            depth: kv.get_or("depth", 6)?,
            width: kv.get_or("width", 16)?,
        },
        cfg: TrainConfig {
            patch_size: triple("patch", d.patch_size)?,
            batch_size: kv.get_or("batch", d.batch_size)?,
            learning_rate: kv.get_or("learning_rate", d.learning_rate)?,
            adam_beta1: kv.get_or("adam_beta1", d.adam_beta1)?,
            adam_beta2: kv.get_or("adam_beta2", d.adam_beta2)?,
            adam_eps: kv.get_or("adam_eps", d.adam_eps)?,
            epochs: kv.get_or("epochs", d.epochs)?,
            patches_per_volume: kv.get_or("patches_per_volume", d.patches_per_volume)?,
            seed,
            precision: kv.get_or::<Precision>("precision", d.precision)?,
            final_layer_gain: kv.get_or("final_layer_gain", d.final_layer_gain)?,
        },
    };
    s.dspec.validate()?;
    s.nspec.validate()?;
    s.shape.validate()?;
    s.cfg.validate()?;
    if s.phantoms == 0 {
        return Err(SrnrError::InvalidArgument("need at least one phantom".into()));
    }
    Ok(s)
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.as_os_str().to_os_string();
    name.push(suffix);
    PathBuf::from(name)
}

pub fn train(a: &TrainArgs) -> Result<(), CliError> {
    let mut kv = read_config(a.config.as_ref())?;
    if let Some(v) = a.seed {
        kv.set("seed", v);
    }
    if let Some(v) = &a.dims {
        kv.set("dims", v);
    }
    if let Some(v) = a.phantoms {
        kv.set("phantoms", v);
    }
    if let Some(v) = a.sigma_rel {
        kv.set("sigma_rel", v);
    }
    if let Some(v) = a.epochs {
        kv.set("epochs", v);
    }
    if let Some(v) = a.learning_rate {
        kv.set("learning_rate", v);
    }
    if let Some(v) = a.batch {
        kv.set("batch", v);
    }
    if let Some(v) = &a.patch {
        kv.set("patch", v);
    }
    if let Some(v) = a.patches_per_volume {
        kv.set("patches_per_volume", v);
    }
    if let Some(v) = a.depth {
        kv.set("depth", v);
    }
    if let Some(v) = a.width {
        kv.set("width", v);
    }
    if let Some(v) = &a.precision {
        kv.set("precision", v);
    }
    if let Some(v) = a.final_layer_gain {
        kv.set("final_layer_gain", v);
    }
    if let Some(v) = a.factor {
        kv.set("factor", v);
    }
    if let Some(v) = a.slice_axis {
        kv.set("slice_axis", v);
    }
    let s = train_settings(&kv).map_err(usage)?;
    if !a.masks.is_empty() && a.masks.len() != a.hr.len() {
        return Err(CliError::Usage(format!(
            "{} --mask files for {} --hr volumes",
            a.masks.len(),
            a.hr.len()
        )));
    }

    let (vols, masks): (Vec<Volume3D>, Vec<BrainMask>) = if a.hr.is_empty() {
        let base = derive_seed_str(s.seed, "train-phantoms");
        (0..s.phantoms)
            .map(|i| generate_phantom(&PhantomSpec::brain_like(s.dims, derive_seed(base, i as u64))))
            .collect::<Result<Vec<_>, _>>()?
            .into_iter()
            .unzip()
    } else {
        a.hr
            .iter()
            .enumerate()
            .map(|(i, p)| load_normalized(p, a.masks.get(i).map(PathBuf::as_path)))
            .collect::<Result<Vec<_>, _>>()?
            .into_iter()
            .unzip()
    };
    let outcome = train_model(&vols, &masks, &s.dspec, &s.nspec, s.shape, &s.cfg)?;

    Checkpoint::new(&outcome.net, s.seed).save(&a.out)?;
    let mut run = String::from("# srnr training run\n");
    run.push_str(&kv.to_text());
    run.push_str(&format!("config_sha256={}\n", kv.hash()));
    let sources: Vec<String> = a.hr.iter().map(|p| p.display().to_string()).collect();
    if !sources.is_empty() {
        run.push_str(&format!("hr_volumes={}\n", sources.join(",")));
    }
    write_bytes(&sibling(&a.out, ".cfg"), run.as_bytes())?;
    let mut loss = String::from("epoch,mean_train_loss,mean_val_loss\n");
    for e in &outcome.loss_curve {
        let val = e.validation.map(|v| v.to_string()).unwrap_or_default();
        loss.push_str(&format!("{},{},{val}\n", e.epoch, e.train));
    }
    write_bytes(&sibling(&a.out, ".loss.csv"), loss.as_bytes())?;
    info!("wrote {}", a.out.display());
    Ok(())
}

pub fn infer(a: &InferArgs) -> Result<(), CliError> {
    let dspec = DegradeSpec {
        slice_axis: a.degrade.slice_axis,
        factor: a.degrade.factor,
    };
    dspec.validate().map_err(usage)?;
    let patch = parse_triple::<usize>(&a.patch).map_err(usage)?;
    if patch.contains(&0) {
        return Err(CliError::Usage("--patch extents must be positive".into()));
    }
    let precision: Precision = a.precision.parse().map_err(usage)?;
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let input = read_nifti(&a.input)?;
    let out = match (precision, a.upsampled) {
        (Precision::F32, true) => predict_volume(&ckpt.net, &input, patch)?,
        (Precision::F32, false) => infer_volume(&ckpt.net, &input, &dspec, patch)?,
        (Precision::F64, true) => predict_volume(&ckpt.net.cast::<f64>(), &input, patch)?,
        (Precision::F64, false) => infer_volume(&ckpt.net.cast::<f64>(), &input, &dspec, patch)?,
    };
    write_nifti(&out, &a.output)?;
    info!("wrote {}", a.output.display());
    Ok(())
}

pub fn evaluate(a: &EvaluateArgs) -> Result<(), CliError> {
    let va = read_nifti(&a.a)?;
    let vb = read_nifti(&a.b)?;
    let mask = match &a.mask {
        Some(p) => read_mask(p)?,
        None => BrainMask::full(va.dims())?,
    };
    let row = MetricsRow::compute(a.label.clone(), &va, &vb, &mask)?;
    let stdout = std::io::stdout();
    write_rows_csv(&[row], stdout.lock())?;
    Ok(())
}

pub fn sweep(a: &SweepArgs) -> Result<(), CliError> {
    let mut kv = read_config(a.config.as_ref())?;
    if let Some(seed) = a.seed {
        kv.set("seed", seed);
    }
    let spec = SweepSpec::from_config(&kv).map_err(usage)?;
    spec.validate().map_err(usage)?;
    let report = match a.study.as_str() {
        "average" => run_average_study(&spec)?,
        _ => run_noise_sweep(&spec)?,
    };
    emit_report(&report, &a.out_dir)?;
    for row in &report.table_d {
        info!(
            "{}: MAE {:.5} PSNR {:.3} dB SSIM {:.4}",
            row.label, row.group.mae.mean, row.group.psnr_db.mean, row.group.ssim.mean
        );
    }
    if !report.is_complete() {
        let failed: Vec<&str> = report.failures.iter().map(|f| f.label.as_str()).collect();
        return Err(CliError::Core(SrnrError::TrainingDivergence(format!(
            "partial report written to {}; failed levels: {}",
            a.out_dir.display(),
            failed.join(", ")
        ))));
    }
    Ok(())
}
