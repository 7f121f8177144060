//! End-to-end surface tests of the command layer on tiny datasets: artifact
//! formats, determinism, split discipline, and error classification.

use std::path::Path;

use neurovol_cli::commands::*;
use neurovol_cli::config::ExperimentConfig;
use neurovol_cli::CliError;
use neurovol_models::{load_checkpoint, OptimizerConfig};
use neurovol_phantom::{DatasetManifest, ImagesPerPatient, Split};
use neurovol_tensor::Volume;

fn tiny_config(root: &Path) -> ExperimentConfig {
    let mut config = ExperimentConfig::desk_default();
    config.data_dir = root.join("data");
    config.out_dir = root.join("out");
    config.n_patients = 24;
    config.master_seed = 7;
    config.phantom.volume_shape = [20, 24, 20];
    config.phantom.images_per_patient = ImagesPerPatient { ranges: [(1, 1); 5] };
    for spec in [&mut config.vae, &mut config.ivae] {
        spec.train.epochs = 2;
        spec.train.batch_size = 4;
        spec.train.kl_weight = 1e-4;
        spec.train.optimizer = OptimizerConfig::adam(1e-3);
        spec.train.checkpoint_every = 1;
        spec.arch.dropout_rate = 0.0;
    }
    config
}

#[test]
fn generate_is_deterministic_and_guarded() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path());
    cmd_generate(&config, false).unwrap();
    let manifest_a = std::fs::read(config.data_dir.join("manifest.jsonl")).unwrap();

    // second run without --force refuses
    let err = cmd_generate(&config, false).unwrap_err();
    assert_eq!(err.exit_code(), 1);

    // forced rerun is byte-identical
    cmd_generate(&config, true).unwrap();
    let manifest_b = std::fs::read(config.data_dir.join("manifest.jsonl")).unwrap();
    assert_eq!(manifest_a, manifest_b);
}

#[test]
fn train_split_discipline_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path());
    cmd_generate(&config, false).unwrap();

    let summary1 = cmd_train(&config, ModelKind::Vae, None, Some(&dir.path().join("t1"))).unwrap();
    let summary2 = cmd_train(&config, ModelKind::Vae, None, Some(&dir.path().join("t2"))).unwrap();

    // identical config + seed -> bitwise identical checkpoints and loss CSVs
    let ck1 = std::fs::read(&summary1.final_checkpoint).unwrap();
    let ck2 = std::fs::read(&summary2.final_checkpoint).unwrap();
    assert_eq!(ck1, ck2);
    let csv1 = std::fs::read(&summary1.loss_csv).unwrap();
    let csv2 = std::fs::read(&summary2.loss_csv).unwrap();
    assert_eq!(csv1, csv2);

    // loss CSV data row count equals epochs
    let text = String::from_utf8(csv1).unwrap();
    let data_rows = text
        .lines()
        .filter(|l| !l.starts_with('#') && !l.starts_with("epoch"))
        .count();
    assert_eq!(data_rows, config.vae.train.epochs);

    // the train-image log never mentions a test-split id
    let manifest = DatasetManifest::read_jsonl(&config.data_dir.join("manifest.jsonl")).unwrap();
    let train_log = std::fs::read_to_string(dir.path().join("t1/train_images.txt")).unwrap();
    let logged: std::collections::HashSet<&str> = train_log.lines().collect();
    for rec in manifest.records_in_split(Split::Test) {
        assert!(
            !logged.contains(rec.image_id.as_str()),
            "test image {} appeared in the training log",
            rec.image_id
        );
    }
    for rec in manifest.records_in_split(Split::Train) {
        assert!(logged.contains(rec.image_id.as_str()));
    }
}

#[test]
fn reconstruct_and_sample_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path());
    cmd_generate(&config, false).unwrap();
    let trained = cmd_train(&config, ModelKind::Vae, None, None).unwrap();

    // reconstructions are deterministic (posterior mean path)
    let r1 = cmd_reconstruct(
        &config,
        ModelKind::Vae,
        &trained.final_checkpoint,
        None,
        Some(&dir.path().join("r1")),
        2,
    )
    .unwrap();
    cmd_reconstruct(
        &config,
        ModelKind::Vae,
        &trained.final_checkpoint,
        None,
        Some(&dir.path().join("r2")),
        2,
    )
    .unwrap();
    for path in r1.iter().filter(|p| p.extension().is_some_and(|e| e == "v3f")) {
        let twin = dir
            .path()
            .join("r2")
            .join(path.file_name().unwrap());
        assert_eq!(std::fs::read(path).unwrap(), std::fs::read(&twin).unwrap());
    }

    // sample n=5 -> 5 volumes and 15 slice images
    let written = cmd_sample(
        &config,
        ModelKind::Vae,
        &trained.final_checkpoint,
        Some(&dir.path().join("s")),
        5,
    )
    .unwrap();
    let vols = written
        .iter()
        .filter(|p| p.extension().is_some_and(|e| e == "v3f"))
        .count();
    let pgms = written
        .iter()
        .filter(|p| p.extension().is_some_and(|e| e == "pgm"))
        .count();
    assert_eq!((vols, pgms), (5, 15));

    // PGM dimensions match the sliced plane of a 20x24x20 volume
    let axial = written
        .iter()
        .find(|p| p.to_string_lossy().contains("axial"))
        .unwrap();
    let bytes = std::fs::read(axial).unwrap();
    let text = String::from_utf8_lossy(&bytes[..120.min(bytes.len())]);
    assert!(text.contains("20 24"), "{text}");
    assert!(text.contains("config_digest="), "{text}");
}

#[test]
fn checkpoint_architecture_mismatch_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path());
    cmd_generate(&config, false).unwrap();
    let trained = cmd_train(&config, ModelKind::Vae, None, None).unwrap();
    // loading the vae checkpoint as the ivae spec (latent 32) must fail loudly
    let err = cmd_sample(
        &config,
        ModelKind::Ivae,
        &trained.final_checkpoint,
        Some(&dir.path().join("bad")),
        1,
    )
    .unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("digest"), "{msg}");
    assert_eq!(err.exit_code(), 1);
}

#[test]
fn analyze_writes_consistent_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = tiny_config(dir.path());
    config.n_patients = 40;
    config.analysis.merge_grades_projection = true;
    cmd_generate(&config, false).unwrap();
    let trained = cmd_train(&config, ModelKind::Vae, None, None).unwrap();
    let summary = cmd_analyze(&config, ModelKind::Vae, &trained.final_checkpoint, None, None).unwrap();

    // metrics recomputed from the emitted per-image predictions match exactly
    let out = &summary.out_dir;
    let pred_text = std::fs::read_to_string(out.join("predictions.csv")).unwrap();
    let mut n = 0usize;
    let mut correct = 0usize;
    let mut per_class_tp = std::collections::HashMap::new();
    for line in pred_text.lines().skip(2) {
        let mut parts = line.split(',');
        let _id = parts.next().unwrap();
        let actual = parts.next().unwrap();
        let predicted = parts.next().unwrap();
        n += 1;
        if actual == predicted {
            correct += 1;
            *per_class_tp.entry(actual.to_string()).or_insert(0usize) += 1;
        }
    }
    assert_eq!(n, summary.metrics.test_samples);
    let recomputed = correct as f64 / n as f64;
    assert_eq!(recomputed, summary.metrics.accuracy);
    for m in &summary.metrics.per_class {
        assert_eq!(m.tp, per_class_tp.get(&m.class).copied().unwrap_or(0), "{}", m.class);
        assert_eq!(m.tp + m.fp + m.fn_ + m.tn, n);
    }

    // metrics.json round-trips to the same values
    let metrics_text = std::fs::read_to_string(out.join("metrics.json")).unwrap();
    let metrics: MetricsJson = serde_json::from_str(&metrics_text).unwrap();
    assert_eq!(metrics.accuracy, summary.metrics.accuracy);
    assert_eq!(metrics.config_digest, config.digest());

    // merged projection file has at most two coordinate columns (3 classes)
    let merged = std::fs::read_to_string(out.join("projections_merged.csv")).unwrap();
    let header = merged.lines().nth(1).unwrap();
    let coord_cols = header.split(',').filter(|c| c.starts_with("ld")).count();
    assert!(coord_cols <= 2, "{header}");

    // bias report flags the configured TE/TR/bandwidth offsets for ms
    let bias_text = std::fs::read_to_string(out.join("bias_report.json")).unwrap();
    assert!(bias_text.contains("te_ms"));

    // traversal artifacts exist for the configured values
    let traversal = out.join("traversal");
    let entries = std::fs::read_dir(&traversal).unwrap().count();
    assert!(entries > 0);
}

#[test]
fn traverse_emits_requested_values() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path());
    cmd_generate(&config, false).unwrap();
    let trained = cmd_train(&config, ModelKind::Vae, None, None).unwrap();
    let written = cmd_traverse(
        &config,
        ModelKind::Vae,
        &trained.final_checkpoint,
        3,
        Some(vec![-1.25, 0.0, 1.25]),
        None,
    )
    .unwrap();
    let vols: Vec<_> = written
        .iter()
        .filter(|p| p.extension().is_some_and(|e| e == "v3f"))
        .collect();
    assert_eq!(vols.len(), 3);
    // dim out of range is a validation error
    let err = cmd_traverse(
        &config,
        ModelKind::Vae,
        &trained.final_checkpoint,
        99,
        None,
        Some(&dir.path().join("bad")),
    )
    .unwrap_err();
    assert_eq!(err.exit_code(), 1);
}

#[test]
fn preprocess_handles_corrupt_files() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = tiny_config(dir.path());
    // raw-mode volumes so the pipeline has work to do; tiny patient count
    config.phantom.volume_shape = [182, 218, 182];
    config.n_patients = 5;
    cmd_generate(&config, false).unwrap();

    // corrupt one volume file
    let manifest = DatasetManifest::read_jsonl(&config.data_dir.join("manifest.jsonl")).unwrap();
    let victim = config
        .data_dir
        .join(format!("{}.v3f", manifest.records[1].image_id));
    std::fs::write(&victim, b"JUNKJUNKJUNK").unwrap();

    let err = cmd_preprocess(&config, None, None).unwrap_err();
    // I/O failure reported, but the run continued
    assert_eq!(err.exit_code(), 2);
    let processed_dir = config.out_dir.join("processed");
    let processed: Vec<_> = std::fs::read_dir(&processed_dir)
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.path().extension().is_some_and(|x| x == "v3f"))
        .collect();
    assert_eq!(processed.len(), manifest.records.len() - 1);

    // all processed outputs are 40x48x40 in [0,1]
    for entry in processed {
        let v = Volume::read_from(&entry.path()).unwrap();
        assert_eq!(v.shape(), (40, 48, 40));
        let (lo, hi) = v.min_max();
        assert!(lo >= 0.0 && hi <= 1.0);
    }

    // report count equals successful input count
    let reports = std::fs::read_to_string(processed_dir.join("preprocess_reports.jsonl")).unwrap();
    assert_eq!(reports.lines().count(), manifest.records.len() - 1);
}

#[test]
fn checkpoints_embed_digests() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path());
    cmd_generate(&config, false).unwrap();
    let trained = cmd_train(&config, ModelKind::Vae, None, None).unwrap();
    let (header, _) = load_checkpoint(&trained.final_checkpoint).unwrap();
    assert_eq!(header.experiment_digest, config.digest());
    assert_eq!(header.train_digest, config.vae.train.content_digest());
    assert_eq!(header.epoch, config.vae.train.epochs);
}

#[test]
fn error_kinds_map_to_exit_codes() {
    assert_eq!(CliError::Validation("x".into()).exit_code(), 1);
    assert_eq!(CliError::Io("x".into()).exit_code(), 2);
}
