use std::fs;
use std::path::Path;

use odesr::data::{write_synthetic_fixture, Dataset};
use odesr::harness::*;
use odesr::model::{Generator, GeneratorConfig, PixelLoss};
use odesr::sensitivity::Method;
use odesr::solver::SolverConfig;
use odesr::{Error, Precision};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn toy_dataset(dir: &Path) -> Dataset<f32> {
    write_synthetic_fixture(dir, 10, 32, 11).unwrap();
    Dataset::open(dir).unwrap()
}

fn toy_config() -> TrainConfig {
    TrainConfig {
        max_epochs: 2,
        batch_size: 4,
        patch_size: 16,
        patches_per_image: 2,
        learning_rate: 1e-3,
        loss: PixelLoss::L1,
        generator: GeneratorConfig {
            augment_channels: 2,
            solver: SolverConfig::with_tolerances(1e-3, 1e-3),
            ..GeneratorConfig::ode(4, 2)
        },
        ..TrainConfig::default()
    }
}

fn metrics_rows(dir: &Path) -> Vec<Vec<String>> {
    let text = fs::read_to_string(dir.join(METRICS_FILE)).unwrap();
    text.lines()
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn buckets_follow_mode_arithmetic() {
    // Counts: 5 ×1, 7 ×2, 9 ×3, 12 ×1, so the mode is 9.
    let steps = vec![7, 9, 7, 9, 9, 5, 12];
    let ids: Vec<String> = (0..steps.len()).map(|i| format!("im{i}")).collect();
    let psnrs: Vec<Vec<f64>> = (0..steps.len())
        .map(|i| vec![20.0 + i as f64, 21.0 + i as f64])
        .collect();
    let report = NfeReport::from_parts(vec![1, 2], ids, steps, psnrs).unwrap();
    let got: Vec<Bucket> = report.rows.iter().map(|r| r.bucket).collect();
    use Bucket::*;
    assert_eq!(got, [Low, Medium, Low, Medium, Medium, Low, High]);

    let means = report.bucket_means();
    assert_eq!(
        means[&Low],
        vec![(20.0 + 22.0 + 25.0) / 3.0, (21.0 + 23.0 + 26.0) / 3.0]
    );
    assert_eq!(
        means[&Medium],
        vec![(21.0 + 23.0 + 24.0) / 3.0, (22.0 + 24.0 + 25.0) / 3.0]
    );
    assert_eq!(means[&High], vec![26.0, 27.0]);
}

#[test]
fn mode_ties_resolve_to_smaller_count() {
    assert_eq!(step_mode(&[9, 7, 9, 7]), Some(7));
    assert_eq!(step_mode(&[]), None);
    assert_eq!(
        bucket_by_mode(&[9, 7, 9, 7]),
        [Bucket::High, Bucket::Medium, Bucket::High, Bucket::Medium]
    );
}

#[test]
fn uniform_step_counts_give_one_bucket() {
    let report = NfeReport::from_parts(
        vec![1, 3],
        vec!["a".into(), "b".into()],
        vec![4, 4],
        vec![vec![1.0, 2.0], vec![3.0, 4.0]],
    )
    .unwrap();
    let means = report.bucket_means();
    assert_eq!(means.len(), 1);
    assert_eq!(means[&Bucket::Medium], vec![2.0, 3.0]);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join(NFE_REPORT_FILE);
    report.write_csv(&path).unwrap();
    let text = fs::read_to_string(path).unwrap();
    assert_eq!(
        text,
        "image_id,steps,bucket,psnr_b1,psnr_b3\na,4,medium,1,2\nb,4,medium,3,4\n"
    );
}

#[test]
fn report_rejects_mismatched_columns() {
    let err = NfeReport::from_parts(vec![1, 2], vec!["a".into()], vec![3], vec![vec![1.0]]).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
}

#[test]
fn difficulty_report_requires_increasing_depth() {
    let dir = tempfile::tempdir().unwrap();
    let data = toy_dataset(dir.path());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let ode = Generator::<f32>::new(toy_config().generator, &mut rng).unwrap();
    let rrdb =
        |blocks| Generator::<f32>::new(GeneratorConfig::rrdb(4, blocks, 2), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();

    let err = nfe_difficulty_report(&ode, &[rrdb(2), rrdb(1)], &data.val).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
    assert!(nfe_difficulty_report(&ode, &[rrdb(1)], &data.val).is_err());

    let report = nfe_difficulty_report(&ode, &[rrdb(1), rrdb(2)], &data.train).unwrap();
    assert_eq!(report.blocks, [1, 2]);
    assert_eq!(report.rows.len(), 9);
    assert!(report.rows.iter().all(|r| r.psnr.len() == 2 && r.steps >= 1));
}

#[test]
fn neutral_field_agrees_and_never_diverges() {
    let rows = run_scenario(&Scenario {
        lambda: 0.0,
        tolerance: 1e-3,
        budget: 10_000,
    })
    .unwrap();
    assert_eq!(rows.len(), 3);
    for r in &rows {
        assert!(!r.diverged, "{:?}", r.method);
        // d x(1) / d(−λ) = x(1) = 1 at λ = 0.
        assert!((r.gradient.unwrap() - 1.0).abs() < 1e-9, "{:?}", r);
        assert!(r.grad_error.unwrap() < 1e-9);
    }
}

#[test]
fn stability_grid_properties() {
    let table = stability_bench(&Scenario::default_grid()).unwrap();
    assert_eq!(table.rows.len(), 8 * 2 * 3);
    for r in table.rows.iter().filter(|r| r.method == Method::Discrete) {
        assert!(!r.diverged);
        assert_eq!(r.backward_nfe, 0);
    }
    for tol in [1e-3, 1e-6] {
        let flags: Vec<bool> = table
            .rows
            .iter()
            .filter(|r| r.method == Method::Adjoint && r.tolerance == tol)
            .map(|r| r.diverged)
            .collect();
        assert!(flags.windows(2).all(|w| w[0] <= w[1]), "tolerance {tol}: {flags:?}");
    }
    assert_eq!(table.adjoint_boundary().len(), 2);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join(STABILITY_FILE);
    table.write_csv(&path).unwrap();
    let text = fs::read_to_string(path).unwrap();
    assert_eq!(text.lines().count(), 1 + table.rows.len());
    assert!(text.starts_with("lambda,tolerance,method,forward_nfe,backward_nfe,diverged,grad_error\n0,0.001,adjoint,"));
}

#[test]
fn seeded_runs_write_identical_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let data = toy_dataset(&dir.path().join("data"));
    let cfg = toy_config();
    train(&cfg, &data, &dir.path().join("a")).unwrap();
    train(&cfg, &data, &dir.path().join("b")).unwrap();
    let a = fs::read(dir.path().join("a").join(METRICS_FILE)).unwrap();
    let b = fs::read(dir.path().join("b").join(METRICS_FILE)).unwrap();
    assert!(!a.is_empty());
    assert_eq!(a, b);
}

#[test]
fn metrics_have_one_val_row_per_epoch_and_falling_lr() {
    let dir = tempfile::tempdir().unwrap();
    let data = toy_dataset(&dir.path().join("data"));
    let cfg = TrainConfig {
        max_epochs: 5,
        patience: 1,
        learning_rate: 5e-3,
        ..toy_config()
    };
    let out = train(&cfg, &data, &dir.path().join("run")).unwrap();
    let rows = metrics_rows(&dir.path().join("run"));
    assert_eq!(rows[0], ["epoch", "split", "psnr", "nfe_mean", "nfe_std", "lr"]);
    let val: Vec<&Vec<String>> = rows.iter().filter(|r| r[1] == "val").collect();
    assert_eq!(val.len(), out.epochs.len());
    for (i, r) in val.iter().enumerate() {
        assert_eq!(r[0], (i + 1).to_string());
        assert!(!r[2].is_empty() && !r[3].is_empty());
    }
    let lrs: Vec<f64> = rows[1..].iter().map(|r| r[5].parse().unwrap()).collect();
    assert!(lrs.windows(2).all(|w| w[1] <= w[0]), "{lrs:?}");
    for dir_file in [GRAD_REPORTS_FILE, BEST_CHECKPOINT, LAST_CHECKPOINT] {
        assert!(dir.path().join("run").join(dir_file).is_file());
    }
}

#[test]
fn diverged_batches_leave_parameters_untouched() {
    let dir = tempfile::tempdir().unwrap();
    let data = toy_dataset(&dir.path().join("data"));
    let mut cfg = toy_config();
    cfg.max_epochs = 1;
    cfg.generator.backend = Method::Adjoint;
    cfg.backward_budget = 1;
    let out = train(&cfg, &data, &dir.path().join("run")).unwrap();
    let fresh = Generator::<f32>::new(cfg.generator.clone(), &mut ChaCha8Rng::seed_from_u64(cfg.seed)).unwrap();
    assert_eq!(out.epochs[0].skipped_batches, 5);
    for (a, b) in out.generator.params().iter().zip(fresh.params()) {
        assert_eq!(a.data(), b.data());
    }
    let lines = fs::read_to_string(dir.path().join("run").join(GRAD_REPORTS_FILE)).unwrap();
    assert_eq!(lines.lines().count(), 5);
    assert!(lines.lines().all(|l| l.contains("\"diverged\":true")));
}

#[test]
fn rrdb_validation_has_no_nfe() {
    let dir = tempfile::tempdir().unwrap();
    let data = toy_dataset(dir.path());
    let g = Generator::<f32>::new(GeneratorConfig::rrdb(4, 1, 2), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let stats = validate(&g, &data.val).unwrap();
    assert!(stats.nfe.is_none());
    assert!(stats.images.iter().all(|e| e.nfe.is_none() && e.steps.is_none()));
    assert!(stats.psnr_mean.is_finite());
}

#[test]
fn identity_initialized_ode_uses_minimal_nfe() {
    let dir = tempfile::tempdir().unwrap();
    let data = toy_dataset(dir.path());
    let g = Generator::<f32>::new(toy_config().generator, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let stats = validate(&g, &data.train).unwrap();
    for e in &stats.images {
        let steps = e.steps.unwrap();
        assert!(steps <= 2, "{}: {steps} steps", e.id);
        assert_eq!(e.nfe.unwrap(), 6 * steps + 1);
    }
    let nfe = stats.nfe.unwrap();
    assert_eq!(nfe.calls, 9);
    assert_eq!(nfe.std, 0.0);
}

#[test]
fn nfe_stats_use_population_deviation() {
    let s = NfeStats::from_counts(&[7, 13, 13, 19]).unwrap();
    assert_eq!(s.mean, 13.0);
    assert!((s.std - 18f64.sqrt()).abs() < 1e-12);
    assert!(NfeStats::from_counts(&[]).is_none());
}

#[test]
fn config_files_reject_unknown_fields_and_name_missing_paths() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cfg.json");
    fs::write(&path, r#"{"learning_rate": 1e-3, "generator": {"filters": 8}}"#).unwrap();
    let cfg = TrainConfig::load(&path).unwrap();
    assert_eq!(cfg.learning_rate, 1e-3);
    assert_eq!(cfg.generator.filters, 8);
    assert_eq!(cfg.batch_size, 16);

    fs::write(&path, r#"{"learning_rat": 1e-3}"#).unwrap();
    let err = TrainConfig::load(&path).unwrap_err();
    assert!(
        matches!(err, Error::Config(_)) && err.to_string().contains("cfg.json"),
        "{err}"
    );

    let missing = dir.path().join("missing.json");
    let err = TrainConfig::load(&missing).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    assert!(err.to_string().contains("missing.json"));
}

fn covers_all_cells(cells: &[GradCheckCell]) {
    assert_eq!(cells.len(), 12);
    for m in Method::ALL {
        for td in [false, true] {
            for aug in [false, true] {
                let n = cells
                    .iter()
                    .filter(|c| c.method == m && c.time_dependent == td && (c.augment > 0) == aug)
                    .count();
                assert_eq!(n, 1, "{m} td={td} aug={aug}");
            }
        }
    }
}

#[test]
fn grad_check_suite_discrete_backends_pass() {
    let cfg = GradCheckConfig::new(Precision::F64);
    let cells = grad_check_suite(&cfg).unwrap();
    covers_all_cells(&cells);
    for c in cells.iter().filter(|c| c.method != Method::Adjoint) {
        assert!(c.passed, "{c:?}");
        assert!(c.max_rel_error < 1e-4, "{c:?}");
    }
    for c in cells.iter().filter(|c| c.method == Method::Adjoint) {
        assert!(c.backward_nfe > 0 && c.max_rel_error.is_finite(), "{c:?}");
    }
}

/// Every cell, adjoint included, against the pass threshold. The adjoint
/// misses it on LeakyReLU fields, whose Jacobian jumps at the kink.
#[test]
#[ignore]
fn grad_check_suite_all_cells_pass() {
    let cells = grad_check_suite(&GradCheckConfig::new(Precision::F64)).unwrap();
    covers_all_cells(&cells);
    let failed: Vec<_> = cells.iter().filter(|c| !c.passed).collect();
    assert!(failed.is_empty(), "{failed:#?}");
}
