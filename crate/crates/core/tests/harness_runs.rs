//! End-to-end runner behavior on a small, fast configuration: artifact
//! layout, determinism, resume, access tracing, and the follow-up reports.
//! Accuracy-level properties that need real training budgets live in the
//! acceptance suite.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use sitestream_core::harness::{
    compare_report, read_alignment, run_ft_reference, run_stream, sequence_length_study, Method,
    RunConfig, RunOptions,
};
use sitestream_core::metrics::{backward_measure, forward_measure, Split};
use sitestream_core::sitegen::{default_stream, export_site, generate_site};
use sitestream_core::EngineError;

/// Three training sites, one held out, a handful of iterations: enough to
/// exercise every code path without real training time.
fn small_config(method: Method) -> RunConfig {
    RunConfig {
        method,
        stream: vec![1, 2, 3],
        held_out: 0,
        n_sites: 4,
        iterations_per_round: 40,
        ..RunConfig::default()
    }
}

fn checkpoint_bytes(dir: &Path, rounds: usize) -> Vec<Vec<u8>> {
    (0..=rounds)
        .map(|t| fs::read(dir.join(format!("checkpoints/round_{t:03}.bin"))).unwrap())
        .collect()
}

#[test]
fn run_produces_all_artifacts_and_full_matrix_coverage() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(Method::Sga);
    let outcome = run_stream(&config, dir.path(), &RunOptions::default()).unwrap();

    for name in ["config.json", "manifest.json", "metrics.csv", "alignment.csv"] {
        assert!(dir.path().join(name).exists(), "{name} missing");
    }
    assert_eq!(outcome.manifest.rounds.len(), 3);
    // every round evaluates every site on both splits
    assert_eq!(outcome.matrix.entries.len(), 3 * 4 * 2);
    for t in 1..=3 {
        for site in 0..4 {
            for split in [Split::Val, Split::Test] {
                assert!(outcome.matrix.get(t, site, split).is_some());
            }
        }
    }
    // buffer grows by n_exemplars per round
    let rounds = &outcome.manifest.rounds;
    for (i, r) in rounds.iter().enumerate() {
        let total: usize = r.buffer.sites.iter().map(|s| s.exemplars.len()).sum();
        assert_eq!(total, (i + 1) * config.n_exemplars);
    }
    // alignment log: one row per iteration per round; buffer-dependent
    // fields appear exactly from round 2 on
    let alignment = read_alignment(&dir.path().join("alignment.csv")).unwrap();
    assert_eq!(alignment.len(), 3 * config.iterations_per_round);
    for row in &alignment {
        assert_eq!(row.dp_inner.is_some(), row.round >= 2, "round {}", row.round);
    }
}

#[test]
fn identical_configs_produce_identical_artifacts() {
    let config = small_config(Method::SgaC);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run_stream(&config, a.path(), &RunOptions::default()).unwrap();
    run_stream(&config, b.path(), &RunOptions::default()).unwrap();
    assert_eq!(
        fs::read(a.path().join("metrics.csv")).unwrap(),
        fs::read(b.path().join("metrics.csv")).unwrap()
    );
    assert_eq!(checkpoint_bytes(a.path(), 3), checkpoint_bytes(b.path(), 3));
}

#[test]
fn resumed_runs_reproduce_uninterrupted_artifacts() {
    let config = small_config(Method::Sga);
    let straight = tempfile::tempdir().unwrap();
    run_stream(&config, straight.path(), &RunOptions::default()).unwrap();

    let split = tempfile::tempdir().unwrap();
    let partial = run_stream(
        &config,
        split.path(),
        &RunOptions {
            stop_after_round: Some(2),
            ..RunOptions::default()
        },
    )
    .unwrap();
    assert_eq!(partial.manifest.rounds.len(), 2);
    let resumed = run_stream(
        &config,
        split.path(),
        &RunOptions {
            resume: true,
            ..RunOptions::default()
        },
    )
    .unwrap();
    assert_eq!(resumed.manifest.rounds.len(), 3);
    // only round 3 was executed by the resuming invocation
    assert_eq!(resumed.round_logs.len(), 1);
    assert_eq!(resumed.round_logs[0].0, 3);

    assert_eq!(
        fs::read(straight.path().join("metrics.csv")).unwrap(),
        fs::read(split.path().join("metrics.csv")).unwrap()
    );
    assert_eq!(
        checkpoint_bytes(straight.path(), 3),
        checkpoint_bytes(split.path(), 3)
    );
    // alignment rows match except for wall time
    let rows_a = read_alignment(&straight.path().join("alignment.csv")).unwrap();
    let rows_b = read_alignment(&split.path().join("alignment.csv")).unwrap();
    assert_eq!(rows_a.len(), rows_b.len());
    for (a, b) in rows_a.iter().zip(&rows_b) {
        assert_eq!(
            (a.round, a.iteration, a.loss_d, a.dp_inner, a.grad_norm),
            (b.round, b.iteration, b.loss_d, b.dp_inner, b.grad_norm)
        );
    }

    // resuming a finished run is a no-op
    let again = run_stream(
        &config,
        split.path(),
        &RunOptions {
            resume: true,
            ..RunOptions::default()
        },
    )
    .unwrap();
    assert_eq!(again.round_logs.len(), 0);

    // resuming under a different config is refused
    let mut other = config.clone();
    other.train_seed += 1;
    let err = run_stream(
        &other,
        split.path(),
        &RunOptions {
            resume: true,
            ..RunOptions::default()
        },
    )
    .unwrap_err();
    assert!(matches!(err, EngineError::Config(_)));
}

#[test]
fn finetune_never_reads_previous_sites() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = small_config(Method::Finetune);
    config.stream = vec![1, 2];
    let outcome = run_stream(&config, dir.path(), &RunOptions::default()).unwrap();
    for r in &outcome.manifest.rounds {
        assert!(
            r.previous_reads.is_empty(),
            "round {} read {:?}",
            r.round,
            r.previous_reads
        );
    }
    // its alignment log carries no buffer diagnostics
    let alignment = read_alignment(&dir.path().join("alignment.csv")).unwrap();
    assert!(alignment.iter().all(|r| r.dp_inner.is_none()));
}

#[test]
fn buffered_methods_read_exactly_the_buffered_exemplars() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(Method::Jm);
    let outcome = run_stream(&config, dir.path(), &RunOptions::default()).unwrap();
    let rounds = &outcome.manifest.rounds;
    for t in 2..=3 {
        let allowed: BTreeSet<(u32, u32)> = rounds[t - 2]
            .buffer
            .sites
            .iter()
            .flat_map(|s| s.exemplars.iter().map(|e| (s.site_id, e.subject_id)))
            .collect();
        let read: BTreeSet<(u32, u32)> = rounds[t - 1]
            .previous_reads
            .iter()
            .map(|r| (r.site_id, r.subject_id))
            .collect();
        assert_eq!(read, allowed, "round {t}");
        // payload accounting: each 16x16 subject is 4*256 + 256 bytes
        let bytes: u64 = rounds[t - 1].previous_reads.iter().map(|r| r.bytes).sum();
        assert_eq!(bytes, allowed.len() as u64 * 1280);
    }
}

#[test]
fn ft_reference_with_zero_iterations_equals_forward_measure() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(Method::Sga);
    let outcome = run_stream(&config, dir.path(), &RunOptions::default()).unwrap();
    let fm = forward_measure(&outcome.matrix, &config.stream, config.held_out, 3).unwrap();
    let reference = run_ft_reference(dir.path(), Some(0)).unwrap();
    assert_eq!(reference.dsc, fm.dsc);
    assert_eq!(reference.asd, fm.asd);
    assert!(dir.path().join("ft_reference.json").exists());
    assert!(dir.path().join("checkpoints/ft_reference.bin").exists());

    // a real reference round trains and stays deterministic
    let trained = run_ft_reference(dir.path(), Some(40)).unwrap();
    let trained_again = run_ft_reference(dir.path(), Some(40)).unwrap();
    assert_eq!(trained, trained_again);
}

#[test]
fn ft_reference_requires_a_completed_stream() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(Method::Sga);
    run_stream(
        &config,
        dir.path(),
        &RunOptions {
            stop_after_round: Some(1),
            ..RunOptions::default()
        },
    )
    .unwrap();
    assert!(matches!(
        run_ft_reference(dir.path(), Some(0)),
        Err(EngineError::Config(_))
    ));
}

#[test]
fn seq_study_extracts_one_row_per_round() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(Method::Finetune);
    let rows = sequence_length_study(&config, dir.path(), &RunOptions::default()).unwrap();
    assert_eq!(rows.len(), 3);
    assert!(dir.path().join("seq_study.csv").exists());
    // at t=1 the first-site curve is by definition BM at t=1
    let matrix = sitestream_core::AccuracyMatrix::from_csv(&dir.path().join("metrics.csv")).unwrap();
    let bm1 = backward_measure(&matrix, &config.stream, 1).unwrap();
    assert_eq!(rows[0].first_site_dsc, bm1.dsc);

    let mut short = config.clone();
    short.stream = vec![1, 2];
    let err = sequence_length_study(&short, dir.path(), &RunOptions::default()).unwrap_err();
    assert!(matches!(err, EngineError::Config(_)));
}

#[test]
fn compare_builds_one_row_per_run_and_rejects_mixed_data() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    let config = small_config(Method::Sga);
    run_stream(&config, a.path(), &RunOptions::default()).unwrap();
    run_ft_reference(a.path(), Some(10)).unwrap();
    let mut ft_config = small_config(Method::Finetune);
    ft_config.log_buffer_alignment = true;
    run_stream(&ft_config, b.path(), &RunOptions::default()).unwrap();

    let csv_path = out.path().join("table.csv");
    let report = compare_report(
        &[a.path().to_path_buf(), b.path().to_path_buf()],
        &csv_path,
    )
    .unwrap();
    assert_eq!(report.rows.len(), 2);
    assert_eq!(report.data_seed, config.data_seed);
    assert!(csv_path.exists());
    assert!(out.path().join("table.json").exists());

    let sga_row = &report.rows[0];
    assert_eq!(sga_row.method, Method::Sga);
    assert!(sga_row.bt_dsc.is_some());
    assert!(sga_row.ft_dsc.is_some(), "ft-reference ran for this row");
    assert!(sga_row.mean_dp_inner.is_some());
    let ft_row = &report.rows[1];
    assert!(ft_row.ft_dsc.is_none(), "no ft-reference for this row");
    assert!(
        ft_row.mean_dp_inner.is_some(),
        "explicit alignment logging fills the diagnostic"
    );

    // identical duplicate runs give identical rows
    let dup = compare_report(
        &[a.path().to_path_buf(), a.path().to_path_buf()],
        &csv_path,
    )
    .unwrap();
    assert_eq!(dup.rows[0], dup.rows[1]);

    // a run on different data is rejected
    let c = tempfile::tempdir().unwrap();
    let mut other_data = small_config(Method::Jm);
    other_data.data_seed += 1;
    run_stream(&other_data, c.path(), &RunOptions::default()).unwrap();
    let err = compare_report(
        &[a.path().to_path_buf(), c.path().to_path_buf()],
        &csv_path,
    )
    .unwrap_err();
    assert!(matches!(err, EngineError::Config(_)));
}

#[test]
fn runs_from_exported_data_match_in_memory_generation() {
    let data = tempfile::tempdir().unwrap();
    let config = small_config(Method::Sga);
    for spec in default_stream(config.n_sites, config.data_seed) {
        let ds = generate_site(&spec, 16, 16).unwrap();
        export_site(
            &data.path().join(format!("site_{}.bin", spec.site_id)),
            &ds,
        )
        .unwrap();
    }
    let from_disk = tempfile::tempdir().unwrap();
    let mut disk_config = config.clone();
    disk_config.data_dir = Some(data.path().to_path_buf());
    run_stream(&disk_config, from_disk.path(), &RunOptions::default()).unwrap();

    let in_memory = tempfile::tempdir().unwrap();
    run_stream(&config, in_memory.path(), &RunOptions::default()).unwrap();

    assert_eq!(
        fs::read(from_disk.path().join("metrics.csv")).unwrap(),
        fs::read(in_memory.path().join("metrics.csv")).unwrap()
    );
    assert_eq!(
        checkpoint_bytes(from_disk.path(), 3),
        checkpoint_bytes(in_memory.path(), 3)
    );

    // a data directory from a different seed is refused
    let mut wrong = disk_config.clone();
    wrong.data_seed += 1;
    let err = run_stream(&wrong, from_disk.path(), &RunOptions::default()).unwrap_err();
    assert!(matches!(err, EngineError::Config(_)));
}
