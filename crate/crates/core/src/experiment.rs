//! The two desk-scale studies: a sweep over reference-noise levels and a
//! comparison of targets averaged over K noisy realizations. Both train one
//! model per level on phantoms, evaluate on a disjoint phantom set and
//! tabulate group metrics against the ground truth (`table_d`) and against
//! the reference model's outputs (`table_e`).
//!
//! Seeds are split from the master seed by name: training and evaluation
//! phantoms use separate streams, and the noise seed of a level is derived
//! from the level value itself, so adding a level leaves the data of the
//! other levels unchanged. All models share one initialization and patch
//! order.

use std::fs;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;

use crate::config::{parse_triple, KeyValues};
use crate::degrade::{make_training_pair, DegradeSpec, NoiseSpec, TrainingPair};
use crate::error::{Result, SrnrError};
use crate::metrics::{group_metrics, GroupMetrics, MetricsRow};
use crate::nifti::write_nifti;
use crate::nn::{MuNet, NetShape};
use crate::rng::{derive_seed, derive_seed_str};
use crate::train::{build_pairs, predict_volume, train_on_pairs, EpochLoss, Precision, TrainConfig};
use crate::volume::{generate_phantom, BrainMask, Dims, PhantomSpec, Volume3D};

/// Everything that defines a study run.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepSpec {
    /// Noise levels (multiples of the masked intensity std); the first is 0.
    pub sigma_levels: Vec<f64>,
    /// Realization counts of the averaging study, ascending.
    pub k_values: Vec<usize>,
    /// Noise level of every realization in the averaging study.
    pub average_sigma: f64,
    pub noise_mu: f64,
    pub n_train_volumes: usize,
    pub n_eval_volumes: usize,
    pub dims: Dims,
    pub dspec: DegradeSpec,
    pub net_shape: NetShape,
    pub train_cfg: TrainConfig,
    pub master_seed: u64,
}

impl Default for SweepSpec {
    fn default() -> Self {
        SweepSpec {
            sigma_levels: (0..=8).map(|i| (2 * i) as f64 / 10.0).collect(),
            k_values: vec![1, 10],
            average_sigma: 1.0,
            noise_mu: 0.0,
            n_train_volumes: 4,
            n_eval_volumes: 4,
            dims: [64, 64, 60],
            dspec: DegradeSpec::default(),
            net_shape: NetShape { depth: 6, width: 16 },
            train_cfg: TrainConfig {
                seed: 7,
                final_layer_gain: 0.0,
                ..TrainConfig::default()
            },
            master_seed: 7,
        }
    }
}

pub const CONFIG_KEYS: &[&str] = &[
    "seed",
    "train_seed",
    "dims",
    "n_train",
    "n_eval",
    "sigma_levels",
    "k_values",
    "average_sigma",
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

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(SrnrError::InvalidSpec(msg));
        if self.sigma_levels.first() != Some(&0.0) {
            return bad("sigma_levels must start with 0".into());
        }
        if self.sigma_levels.iter().any(|s| !(s.is_finite() && *s >= 0.0))
            || self.sigma_levels.windows(2).any(|w| w[0] >= w[1])
        {
            return bad(format!("sigma_levels must be strictly ascending: {:?}", self.sigma_levels));
        }
        if self.k_values.is_empty() || self.k_values[0] != 1 || self.k_values.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!("k_values must be strictly ascending from 1: {:?}", self.k_values));
        }
        if !(self.average_sigma.is_finite() && self.average_sigma >= 0.0) || !self.noise_mu.is_finite() {
            return bad("noise parameters must be finite and average_sigma non-negative".into());
        }
        if self.n_train_volumes == 0 || self.n_eval_volumes == 0 {
            return bad("need at least one training and one evaluation volume".into());
        }
        self.dspec.validate()?;
        self.net_shape.validate()?;
        self.train_cfg.validate()?;
        let cropped = {
            let mut d = self.dims;
            d[self.dspec.slice_axis] = self.dspec.cropped_extent(d[self.dspec.slice_axis]);
            d
        };
        self.train_cfg.check_volume(cropped)?;
        let probe = PhantomSpec::brain_like(self.dims, 0);
        probe.validate()
    }

    pub fn train_phantom_seeds(&self) -> Vec<u64> {
        let base = derive_seed_str(self.master_seed, "train-phantoms");
        (0..self.n_train_volumes).map(|i| derive_seed(base, i as u64)).collect()
    }

    pub fn eval_phantom_seeds(&self) -> Vec<u64> {
        let base = derive_seed_str(self.master_seed, "eval-phantoms");
        (0..self.n_eval_volumes).map(|i| derive_seed(base, i as u64)).collect()
    }

    /// Noise seed of sweep level `sigma`, keyed by the value's bits.
    pub fn sigma_noise_seed(&self, sigma: f64) -> u64 {
        derive_seed(derive_seed_str(self.master_seed, "sweep-noise"), sigma.to_bits())
    }

    /// Noise seed shared by every K of the averaging study, so that the
    /// first realizations coincide across K.
    pub fn average_noise_seed(&self) -> u64 {
        derive_seed_str(self.master_seed, "average-noise")
    }

    pub fn to_config(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        let c = &self.train_cfg;
        kv.set("seed", self.master_seed);
        kv.set("train_seed", c.seed);
        kv.set_list("dims", &self.dims);
        kv.set("n_train", self.n_train_volumes);
        kv.set("n_eval", self.n_eval_volumes);
        kv.set_list("sigma_levels", &self.sigma_levels);
        kv.set_list("k_values", &self.k_values);
        kv.set("average_sigma", self.average_sigma);
        kv.set("noise_mu", self.noise_mu);
        kv.set("slice_axis", self.dspec.slice_axis);
        kv.set("factor", self.dspec.factor);
        kv.set("depth", self.net_shape.depth);
        kv.set("width", self.net_shape.width);
        kv.set("epochs", c.epochs);
        kv.set_list("patch", &c.patch_size);
        kv.set("batch", c.batch_size);
        kv.set("patches_per_volume", c.patches_per_volume);
        kv.set("learning_rate", c.learning_rate);
        kv.set("adam_beta1", c.adam_beta1);
        kv.set("adam_beta2", c.adam_beta2);
        kv.set("adam_eps", c.adam_eps);
        kv.set("precision", c.precision.as_str());
        kv.set("final_layer_gain", c.final_layer_gain);
        kv
    }

    /// Reads a configuration; missing keys keep their [`Default`] values
    /// and `train_seed` defaults to `seed`.
    pub fn from_config(kv: &KeyValues) -> Result<Self> {
        kv.check_known(CONFIG_KEYS)?;
        let d = SweepSpec::default();
        let dc = &d.train_cfg;
        let master_seed = kv.get_or("seed", d.master_seed)?;
        let triple = |key: &str, default: [usize; 3]| -> Result<[usize; 3]> {
            kv.raw(key).map(parse_triple::<usize>).transpose().map(|v| v.unwrap_or(default))
        };
        let spec = SweepSpec {
            sigma_levels: kv.get_list("sigma_levels")?.unwrap_or(d.sigma_levels.clone()),
            k_values: kv.get_list("k_values")?.unwrap_or(d.k_values.clone()),
            average_sigma: kv.get_or("average_sigma", d.average_sigma)?,
            noise_mu: kv.get_or("noise_mu", d.noise_mu)?,
            n_train_volumes: kv.get_or("n_train", d.n_train_volumes)?,
            n_eval_volumes: kv.get_or("n_eval", d.n_eval_volumes)?,
            dims: triple("dims", d.dims)?,
            dspec: DegradeSpec {
                slice_axis: kv.get_or("slice_axis", d.dspec.slice_axis)?,
                factor: kv.get_or("factor", d.dspec.factor)?,
            },
            net_shape: NetShape {
                depth: kv.get_or("depth", d.net_shape.depth)?,
                width: kv.get_or("width", d.net_shape.width)?,
            },
            train_cfg: TrainConfig {
                patch_size: triple("patch", dc.patch_size)?,
                batch_size: kv.get_or("batch", dc.batch_size)?,
                learning_rate: kv.get_or("learning_rate", dc.learning_rate)?,
                adam_beta1: kv.get_or("adam_beta1", dc.adam_beta1)?,
                adam_beta2: kv.get_or("adam_beta2", dc.adam_beta2)?,
                adam_eps: kv.get_or("adam_eps", dc.adam_eps)?,
                epochs: kv.get_or("epochs", dc.epochs)?,
                patches_per_volume: kv.get_or("patches_per_volume", dc.patches_per_volume)?,
                seed: kv.get_or("train_seed", master_seed)?,
                precision: kv.get_or("precision", dc.precision)?,
                final_layer_gain: kv.get_or("final_layer_gain", dc.final_layer_gain)?,
            },
            master_seed,
        };
        Ok(spec)
    }
}

fn phantoms(spec: &SweepSpec, seeds: &[u64]) -> Result<Vec<(Volume3D, BrainMask)>> {
    seeds
        .iter()
        .map(|&s| generate_phantom(&PhantomSpec::brain_like(spec.dims, s)))
        .collect()
}

/// Which study produced a report.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Study {
    NoiseSweep,
    Average,
}

impl Study {
    pub fn as_str(self) -> &'static str {
        match self {
            Study::NoiseSweep => "noise_sweep",
            Study::Average => "average",
        }
    }
}

/// One table row: per-subject metrics and their group summary. The level is
/// `None` for the interpolation baseline.
#[derive(Clone, Debug, PartialEq)]
pub struct TableRow {
    pub label: String,
    pub level: Option<f64>,
    pub subjects: Vec<MetricsRow>,
    pub group: GroupMetrics,
}

impl TableRow {
    fn new(label: String, level: Option<f64>, subjects: Vec<MetricsRow>) -> Result<Self> {
        let group = group_metrics(&subjects)?;
        Ok(TableRow {
            label,
            level,
            subjects,
            group,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossCurve {
    pub label: String,
    pub level: f64,
    pub epochs: Vec<EpochLoss>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Failure {
    pub label: String,
    pub message: String,
}

/// A named difference volume `prediction - ground truth`.
#[derive(Clone, Debug, PartialEq)]
pub struct DifferenceMap {
    pub name: String,
    pub volume: Volume3D,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepReport {
    pub study: Study,
    /// Baseline row first, then one row per trained level.
    pub table_d: Vec<TableRow>,
    /// One row per level except the reference level.
    pub table_e: Vec<TableRow>,
    pub loss_curves: Vec<LossCurve>,
    pub failures: Vec<Failure>,
    pub difference_maps: Vec<DifferenceMap>,
    pub config: KeyValues,
    /// Seeds and other derived run facts, in output order.
    pub metadata: Vec<(String, String)>,
}

impl SweepReport {
    pub fn table_d_row(&self, level: f64) -> Option<&TableRow> {
        self.table_d.iter().find(|r| r.level == Some(level))
    }

    pub fn table_e_row(&self, level: f64) -> Option<&TableRow> {
        self.table_e.iter().find(|r| r.level == Some(level))
    }

    pub fn baseline(&self) -> &TableRow {
        &self.table_d[0]
    }

    pub fn is_complete(&self) -> bool {
        self.failures.is_empty()
    }
}

pub const BASELINE_LABEL: &str = "upsampled";

/// Label of a level in the tables, e.g. `sigma_0.4` or `k_10`.
pub fn level_label(study: Study, level: f64) -> String {
    match study {
        Study::NoiseSweep => format!("sigma_{level}"),
        Study::Average => format!("k_{level}"),
    }
}

fn predict(net: &MuNet<f32>, input: &Volume3D, cfg: &TrainConfig) -> Result<Volume3D> {
    match cfg.precision {
        Precision::F32 => predict_volume(net, input, cfg.patch_size),
        Precision::F64 => predict_volume(&net.cast::<f64>(), input, cfg.patch_size),
    }
}

struct LevelRun {
    level: f64,
    outcome: Result<(Vec<EpochLoss>, Vec<Volume3D>)>,
}

/// Trains one model on `pairs` and predicts every evaluation volume.
fn run_level(
    level: f64,
    pairs: Result<Vec<TrainingPair>>,
    spec: &SweepSpec,
    eval: &[TrainingPair],
) -> LevelRun {
    let outcome = pairs.and_then(|pairs| {
        let trained = train_on_pairs(&pairs, spec.net_shape, &spec.train_cfg)?;
        let preds = eval
            .iter()
            .map(|p| predict(&trained.net, &p.input, &spec.train_cfg))
            .collect::<Result<Vec<_>>>()?;
        Ok((trained.loss_curve, preds))
    });
    LevelRun { level, outcome }
}

fn assemble(
    study: Study,
    spec: &SweepSpec,
    eval: &[TrainingPair],
    runs: Vec<LevelRun>,
    reference_level: f64,
    mut metadata: Vec<(String, String)>,
) -> Result<SweepReport> {
    let baseline = eval
        .iter()
        .enumerate()
        .map(|(i, p)| MetricsRow::compute(format!("subject_{i}"), &p.input, &p.ground_truth, &p.mask))
        .collect::<Result<Vec<_>>>()?;
    let mut difference_maps = Vec::new();
    for (i, p) in eval.iter().enumerate() {
        difference_maps.push(DifferenceMap {
            name: format!("{BASELINE_LABEL}_subject_{i}"),
            volume: p.input.sub(&p.ground_truth)?,
        });
    }
    let mut table_d = vec![TableRow::new(BASELINE_LABEL.into(), None, baseline)?];
    let mut loss_curves = Vec::new();
    let mut failures = Vec::new();
    let mut predictions = Vec::new();
    for run in runs {
        let label = level_label(study, run.level);
        match run.outcome {
            Ok((curve, preds)) => {
                let rows = eval
                    .iter()
                    .zip(&preds)
                    .enumerate()
                    .map(|(i, (p, pred))| MetricsRow::compute(format!("subject_{i}"), pred, &p.ground_truth, &p.mask))
                    .collect::<Result<Vec<_>>>()?;
                for (i, (p, pred)) in eval.iter().zip(&preds).enumerate() {
                    difference_maps.push(DifferenceMap {
                        name: format!("{label}_subject_{i}"),
                        volume: pred.sub(&p.ground_truth)?,
                    });
                }
                table_d.push(TableRow::new(label.clone(), Some(run.level), rows)?);
                loss_curves.push(LossCurve {
                    label,
                    level: run.level,
                    epochs: curve,
                });
                predictions.push((run.level, preds));
            }
            Err(e) => {
                log::error!("{label}: {e}");
                failures.push(Failure {
                    label,
                    message: e.to_string(),
                });
            }
        }
    }

    let mut table_e = Vec::new();
    if let Some((_, reference)) = predictions.iter().find(|(l, _)| *l == reference_level) {
        for (level, preds) in predictions.iter().filter(|(l, _)| *l != reference_level) {
            let rows = eval
                .iter()
                .zip(preds.iter().zip(reference))
                .enumerate()
                .map(|(i, (p, (pred, r)))| MetricsRow::compute(format!("subject_{i}"), pred, r, &p.mask))
                .collect::<Result<Vec<_>>>()?;
            table_e.push(TableRow::new(level_label(study, *level), Some(*level), rows)?);
        }
    }
    metadata.push(("reference_level".into(), reference_level.to_string()));
    Ok(SweepReport {
        study,
        table_d,
        table_e,
        loss_curves,
        failures,
        difference_maps,
        config: spec.to_config(),
        metadata,
    })
}

fn seeds_text(seeds: &[u64]) -> String {
    seeds.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(",")
}

fn prepare(spec: &SweepSpec) -> Result<(Vec<(Volume3D, BrainMask)>, Vec<TrainingPair>, Vec<(String, String)>)> {
    spec.validate()?;
    let train_seeds = spec.train_phantom_seeds();
    let eval_seeds = spec.eval_phantom_seeds();
    if train_seeds.iter().any(|s| eval_seeds.contains(s)) {
        return Err(SrnrError::InvalidSpec("training and evaluation phantom seeds collide".into()));
    }
    let train = phantoms(spec, &train_seeds)?;
    let eval = phantoms(spec, &eval_seeds)?
        .iter()
        .map(|(gt, mask)| make_training_pair(gt, mask, &spec.dspec, &NoiseSpec::clean(0)))
        .collect::<Result<Vec<_>>>()?;
    let metadata = vec![
        ("train_phantom_seeds".into(), seeds_text(&train_seeds)),
        ("eval_phantom_seeds".into(), seeds_text(&eval_seeds)),
    ];
    Ok((train, eval, metadata))
}

fn split(train: &[(Volume3D, BrainMask)]) -> (Vec<Volume3D>, Vec<BrainMask>) {
    train.iter().cloned().unzip()
}

/// Trains one model per noise level and compares the outputs with the
/// ground truth and with the clean-target model.
pub fn run_noise_sweep(spec: &SweepSpec) -> Result<SweepReport> {
    let (train, eval, mut metadata) = prepare(spec)?;
    let (vols, masks) = split(&train);
    let seeds: Vec<u64> = spec.sigma_levels.iter().map(|&s| spec.sigma_noise_seed(s)).collect();
    metadata.push(("level_noise_seeds".into(), seeds_text(&seeds)));
    let runs: Vec<LevelRun> = spec
        .sigma_levels
        .par_iter()
        .zip(&seeds)
        .map(|(&sigma, &seed)| {
            let nspec = NoiseSpec {
                mu: spec.noise_mu,
                sigma_rel: sigma,
                seed,
            };
            run_level(sigma, build_pairs(&vols, &masks, &spec.dspec, &nspec, 1), spec, &eval)
        })
        .collect();
    assemble(Study::NoiseSweep, spec, &eval, runs, 0.0, metadata)
}

/// Trains one model per K on targets averaged over K noisy realizations and
/// compares the outputs with the ground truth and with the largest-K model.
pub fn run_average_study(spec: &SweepSpec) -> Result<SweepReport> {
    let (train, eval, mut metadata) = prepare(spec)?;
    let (vols, masks) = split(&train);
    let seed = spec.average_noise_seed();
    metadata.push(("average_noise_seed".into(), seed.to_string()));
    let nspec = NoiseSpec {
        mu: spec.noise_mu,
        sigma_rel: spec.average_sigma,
        seed,
    };
    let runs: Vec<LevelRun> = spec
        .k_values
        .par_iter()
        .map(|&k| run_level(k as f64, build_pairs(&vols, &masks, &spec.dspec, &nspec, k), spec, &eval))
        .collect();
    let reference = *spec.k_values.last().expect("validated nonempty") as f64;
    assemble(Study::Average, spec, &eval, runs, reference, metadata)
}

pub const TABLE_HEADER: [&str; 10] = [
    "label",
    "level",
    "n",
    "mae_mean",
    "mae_std",
    "psnr_db_mean",
    "psnr_db_std",
    "psnr_finite",
    "ssim_mean",
    "ssim_std",
];

fn csv_err(e: impl std::fmt::Display) -> SrnrError {
    SrnrError::Config(format!("CSV error: {e}"))
}

fn level_text(level: Option<f64>) -> String {
    level.map(|l| l.to_string()).unwrap_or_default()
}

/// Group table CSV; the baseline row has an empty level.
pub fn table_csv(rows: &[TableRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(TABLE_HEADER).map_err(csv_err)?;
    for r in rows {
        let g = &r.group;
        w.write_record([
            r.label.clone(),
            level_text(r.level),
            g.n.to_string(),
            g.mae.mean.to_string(),
            g.mae.std.to_string(),
            g.psnr_db.mean.to_string(),
            g.psnr_db.std.to_string(),
            g.psnr_finite.to_string(),
            g.ssim.mean.to_string(),
            g.ssim.std.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.into_inner().map_err(csv_err)
}

/// Long-format per-subject metrics: `table,label,level,metric,value,subject`.
pub fn curves_csv(report: &SweepReport) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["table", "label", "level", "metric", "value", "subject"])
        .map_err(csv_err)?;
    for (table, rows) in [("d", &report.table_d), ("e", &report.table_e)] {
        for r in rows {
            for s in &r.subjects {
                for (metric, value) in [("mae", s.mae), ("psnr_db", s.psnr_db), ("ssim", s.ssim)] {
                    w.write_record([
                        table.to_string(),
                        r.label.clone(),
                        level_text(r.level),
                        metric.to_string(),
                        value.to_string(),
                        s.label.clone(),
                    ])
                    .map_err(csv_err)?;
                }
            }
        }
    }
    w.into_inner().map_err(csv_err)
}

/// Per-epoch losses of every trained level; a missing validation loss is
/// an empty field.
pub fn loss_csv(report: &SweepReport) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["label", "level", "epoch", "mean_train_loss", "mean_val_loss"])
        .map_err(csv_err)?;
    for c in &report.loss_curves {
        for e in &c.epochs {
            w.write_record([
                c.label.clone(),
                c.level.to_string(),
                e.epoch.to_string(),
                e.train.to_string(),
                e.validation.map(|v| v.to_string()).unwrap_or_default(),
            ])
            .map_err(csv_err)?;
        }
    }
    w.into_inner().map_err(csv_err)
}

/// `run_config.txt`: the canonical configuration, its hash, derived seeds
/// and the completion status.
pub fn run_config_text(report: &SweepReport) -> String {
    let mut out = String::from("# srnr run configuration\n");
    out.push_str(&format!("study={}\n", report.study.as_str()));
    out.push_str(&report.config.to_text());
    out.push_str(&format!("config_sha256={}\n", report.config.hash()));
    for (k, v) in &report.metadata {
        out.push_str(&format!("{k}={v}\n"));
    }
    let status = if report.is_complete() { "complete" } else { "partial" };
    out.push_str(&format!("status={status}\n"));
    for f in &report.failures {
        out.push_str(&format!("failure_{}={}\n", f.label.replace('.', "_"), f.message.replace('\n', " ")));
    }
    out
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| SrnrError::io(path, e))?;
    f.write_all(bytes).map_err(|e| SrnrError::io(path, e))
}

/// Writes the report directory:
/// `table_d.csv`, `table_e.csv`, `curves.csv`, `loss.csv`, `run_config.txt`
/// and `volumes/<name>.nii` difference maps.
pub fn emit_report(report: &SweepReport, out_dir: impl AsRef<Path>) -> Result<()> {
    let dir = out_dir.as_ref();
    let volumes = dir.join("volumes");
    fs::create_dir_all(&volumes).map_err(|e| SrnrError::io(&volumes, e))?;
    write_file(&dir.join("table_d.csv"), &table_csv(&report.table_d)?)?;
    write_file(&dir.join("table_e.csv"), &table_csv(&report.table_e)?)?;
    write_file(&dir.join("curves.csv"), &curves_csv(report)?)?;
    write_file(&dir.join("loss.csv"), &loss_csv(report)?)?;
    write_file(&dir.join("run_config.txt"), run_config_text(report).as_bytes())?;
    for m in &report.difference_maps {
        write_nifti(&m.volume, volumes.join(format!("{}.nii", m.name)))?;
    }
    Ok(())
}

/// A parsed row of `table_d.csv` or `table_e.csv`.
#[derive(Clone, Debug, PartialEq)]
pub struct TableCsvRow {
    pub label: String,
    pub level: Option<f64>,
    pub group: GroupMetrics,
}

pub fn read_table_csv(bytes: &[u8]) -> Result<Vec<TableCsvRow>> {
    use crate::metrics::Summary;
    let mut r = csv::Reader::from_reader(bytes);
    let header = r.headers().map_err(csv_err)?.clone();
    if header.iter().ne(TABLE_HEADER) {
        return Err(SrnrError::Config(format!("unexpected table header {header:?}")));
    }
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(csv_err)?;
        let f = |i: usize| rec[i].parse::<f64>().map_err(csv_err);
        let u = |i: usize| rec[i].parse::<usize>().map_err(csv_err);
        out.push(TableCsvRow {
            label: rec[0].to_string(),
            level: if rec[1].is_empty() { None } else { Some(f(1)?) },
            group: GroupMetrics {
                n: u(2)?,
                mae: Summary { mean: f(3)?, std: f(4)? },
                psnr_db: Summary { mean: f(5)?, std: f(6)? },
                psnr_finite: u(7)?,
                ssim: Summary { mean: f(8)?, std: f(9)? },
            },
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_spec_round_trips_through_config() {
        let spec = SweepSpec::default();
        assert_eq!(spec.sigma_levels, vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0, 1.2, 1.4, 1.6]);
        spec.validate().unwrap();
        let text = spec.to_config().to_text();
        let back = SweepSpec::from_config(&KeyValues::parse(&text).unwrap()).unwrap();
        assert_eq!(back, spec);
    }

    #[test]
    fn config_overrides_and_rejections() {
        let kv = KeyValues::parse("seed=11\nsigma_levels=0,0.5\nwidth=4\n").unwrap();
        let spec = SweepSpec::from_config(&kv).unwrap();
        assert_eq!(spec.master_seed, 11);
        assert_eq!(spec.train_cfg.seed, 11);
        assert_eq!(spec.sigma_levels, vec![0.0, 0.5]);
        assert_eq!(spec.net_shape.width, 4);
        assert!(SweepSpec::from_config(&KeyValues::parse("colour=red").unwrap()).is_err());

        let bad = SweepSpec {
            sigma_levels: vec![0.4, 0.8],
            ..SweepSpec::default()
        };
        assert!(bad.validate().is_err());
        let bad = SweepSpec {
            sigma_levels: vec![0.0, 0.8, 0.4],
            ..SweepSpec::default()
        };
        assert!(bad.validate().is_err());
        let bad = SweepSpec {
            k_values: vec![2, 10],
            ..SweepSpec::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn level_seeds_do_not_depend_on_the_level_list() {
        let a = SweepSpec::default();
        let b = SweepSpec {
            sigma_levels: vec![0.0, 1.6],
            ..SweepSpec::default()
        };
        assert_eq!(a.sigma_noise_seed(1.6), b.sigma_noise_seed(1.6));
        assert_ne!(a.sigma_noise_seed(0.4), a.sigma_noise_seed(0.8));
        let train = a.train_phantom_seeds();
        assert!(a.eval_phantom_seeds().iter().all(|s| !train.contains(s)));
    }
}
