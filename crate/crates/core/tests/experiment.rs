mod common;

use common::snapshot_dir;
use srnr::config::KeyValues;
use srnr::experiment::*;
use srnr::nifti::read_nifti;
use srnr::nn::NetShape;
use srnr::train::TrainConfig;

fn tiny_spec() -> SweepSpec {
    SweepSpec {
        sigma_levels: vec![0.0],
        k_values: vec![1, 2],
        average_sigma: 0.0,
        n_train_volumes: 1,
        n_eval_volumes: 1,
        dims: [16, 16, 20],
        net_shape: NetShape { depth: 2, width: 2 },
        train_cfg: TrainConfig {
            patch_size: [8, 8, 8],
            batch_size: 2,
            epochs: 1,
            patches_per_volume: 2,
            seed: 3,
            final_layer_gain: 0.0,
            ..TrainConfig::default()
        },
        master_seed: 3,
        ..SweepSpec::default()
    }
}

#[test]
fn degenerate_sweep_has_baseline_and_clean_rows_only() {
    let report = run_noise_sweep(&tiny_spec()).unwrap();
    assert!(report.is_complete());
    let labels: Vec<&str> = report.table_d.iter().map(|r| r.label.as_str()).collect();
    assert_eq!(labels, [BASELINE_LABEL, "sigma_0"]);
    assert!(report.table_e.is_empty());
    assert_eq!(report.baseline().level, None);
    assert_eq!(report.table_d_row(0.0).unwrap().group.n, 1);
    assert_eq!(report.loss_curves.len(), 1);
    assert_eq!(report.difference_maps.len(), 2);

    let csv = table_csv(&report.table_e).unwrap();
    assert_eq!(csv, format!("{}\n", TABLE_HEADER.join(",")).into_bytes());
}

#[test]
fn report_files_are_byte_stable_and_round_trip() {
    let spec = SweepSpec { sigma_levels: vec![0.0, 0.5], ..tiny_spec() };
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        emit_report(&run_noise_sweep(&spec).unwrap(), d.path()).unwrap();
    }
    let a = snapshot_dir(dirs[0].path());
    assert_eq!(a, snapshot_dir(dirs[1].path()));
    let names: Vec<&str> = a.iter().map(|(n, _)| n.as_str()).collect();
    for want in ["table_d.csv", "table_e.csv", "curves.csv", "loss.csv", "run_config.txt"] {
        assert!(names.contains(&want), "{want} missing from {names:?}");
    }
    assert!(names.iter().any(|n| n.starts_with("volumes/sigma_0.5_subject_0")));

    let report = run_noise_sweep(&spec).unwrap();
    let parsed = read_table_csv(&table_csv(&report.table_d).unwrap()).unwrap();
    assert_eq!(parsed.len(), report.table_d.len());
    for (p, r) in parsed.iter().zip(&report.table_d) {
        assert_eq!(p.label, r.label);
        assert_eq!(p.level, r.level);
        assert_eq!(p.group.n, r.group.n);
        for (x, y) in [
            (p.group.mae.mean, r.group.mae.mean),
            (p.group.psnr_db.mean, r.group.psnr_db.mean),
            (p.group.ssim.mean, r.group.ssim.mean),
            (p.group.ssim.std, r.group.ssim.std),
        ] {
            assert!((x - y).abs() <= 1e-12 * y.abs().max(1.0));
        }
    }
    assert_eq!(report.table_e.len(), 1);
    assert_eq!(report.table_e[0].label, "sigma_0.5");

    let text = String::from_utf8(a.iter().find(|(n, _)| n == "run_config.txt").unwrap().1.clone()).unwrap();
    assert!(text.contains("status=complete"));
    assert!(text.contains(&format!("config_sha256={}", spec.to_config().hash())));
}

#[test]
fn clean_averages_give_identical_models() {
    let report = run_average_study(&tiny_spec()).unwrap();
    assert!(report.is_complete());
    let row = report.table_e_row(1.0).unwrap();
    assert_eq!(row.group.mae.mean, 0.0);
    assert_eq!(row.group.psnr_finite, 0);
    assert_eq!(row.group.ssim.mean, 1.0);
    let map = |name: &str| &report.difference_maps.iter().find(|m| m.name == name).unwrap().volume;
    assert_eq!(map("k_1_subject_0"), map("k_2_subject_0"));
}

#[test]
fn difference_map_of_identical_volumes_is_zero() {
    let spec = SweepSpec { average_sigma: 0.0, ..tiny_spec() };
    let report = run_average_study(&spec).unwrap();
    let dir = tempfile::tempdir().unwrap();
    emit_report(&report, dir.path()).unwrap();
    let k1 = read_nifti(dir.path().join("volumes/k_1_subject_0.nii")).unwrap();
    let k2 = read_nifti(dir.path().join("volumes/k_2_subject_0.nii")).unwrap();
    assert!(k1.sub(&k2).unwrap().data().iter().all(|&x| x == 0.0));
}

#[test]
fn adding_a_level_leaves_other_levels_unchanged() {
    let a = SweepSpec { sigma_levels: vec![0.0, 0.5], ..tiny_spec() };
    let b = SweepSpec { sigma_levels: vec![0.0, 0.3, 0.5], ..tiny_spec() };
    assert_eq!(a.sigma_noise_seed(0.5), b.sigma_noise_seed(0.5));
    let ra = run_noise_sweep(&a).unwrap();
    let rb = run_noise_sweep(&b).unwrap();
    assert_eq!(ra.table_d_row(0.5).unwrap().group, rb.table_d_row(0.5).unwrap().group);
}

#[test]
fn config_text_round_trips_and_rejects_unknown_keys() {
    let spec = tiny_spec();
    let kv = KeyValues::parse(&spec.to_config().to_text()).unwrap();
    assert_eq!(SweepSpec::from_config(&kv).unwrap(), spec);
    let bad = KeyValues::parse("sigma_level=0\n").unwrap();
    assert!(SweepSpec::from_config(&bad).is_err());
    let unsorted = SweepSpec { sigma_levels: vec![0.0, 0.8, 0.4], ..tiny_spec() };
    assert!(unsorted.validate().is_err());
    let oversized = SweepSpec { train_cfg: TrainConfig { patch_size: [32, 8, 8], ..tiny_spec().train_cfg }, ..tiny_spec() };
    assert!(oversized.validate().is_err());
}
