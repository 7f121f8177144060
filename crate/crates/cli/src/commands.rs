//! The seven subcommands. Each writes its artifacts under the experiment's
//! output directory with the config digest stamped into every file that has
//! room for one.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use neurovol_analysis as analysis;
use neurovol_models as models;
use neurovol_models::{
    check_architecture, load_checkpoint, ArchitectureConfig, CheckpointHeader, ParameterStore,
};
use neurovol_phantom::{
    generate_dataset, split_by_patient, ClassLabel, DatasetManifest, Split,
};
use neurovol_preprocess as preprocess;
use neurovol_tensor::{derive_seed, RngStream, Volume};

use crate::config::ExperimentConfig;
use crate::pgm::write_slice_set;
use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Vae,
    Ivae,
}

impl ModelKind {
    pub fn label(self) -> &'static str {
        match self {
            ModelKind::Vae => "vae",
            ModelKind::Ivae => "ivae",
        }
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::Io(format!("{}: {e}", path.display()))
}

fn ensure_dir(path: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(path).map_err(io_err(path))
}

fn write_run_stamp(dir: &Path, command: &str, config: &ExperimentConfig) -> Result<(), CliError> {
    #[derive(Serialize)]
    struct RunStamp<'a> {
        command: &'a str,
        config_digest: String,
        master_seed: u64,
    }
    let stamp = RunStamp {
        command,
        config_digest: config.digest(),
        master_seed: config.master_seed,
    };
    let body = serde_json::to_string_pretty(&stamp).map_err(|e| CliError::Validation(e.to_string()))?;
    let path = dir.join(format!("run_{command}.json"));
    std::fs::write(&path, body).map_err(io_err(&path))
}

fn load_manifest(dir: &Path) -> Result<DatasetManifest, CliError> {
    let path = dir.join("manifest.jsonl");
    DatasetManifest::read_jsonl(&path).map_err(|e| match e {
        neurovol_phantom::PhantomError::Io { path, source } => {
            CliError::Io(format!("{path}: {source}"))
        }
        other => CliError::Validation(other.to_string()),
    })
}

fn read_volume(dir: &Path, image_id: &str) -> Result<Volume, CliError> {
    let path = dir.join(format!("{image_id}.v3f"));
    Volume::read_from(&path).map_err(|e| match e {
        neurovol_tensor::TensorError::VolumeIo { path, source } => {
            CliError::Io(format!("{path}: {source}"))
        }
        other => CliError::Validation(other.to_string()),
    })
}

// ---------------------------------------------------------------- generate

#[derive(Debug, Serialize)]
pub struct GenerateSummary {
    pub patients: usize,
    pub images: usize,
    pub per_class_patients: Vec<(String, usize)>,
    pub data_dir: PathBuf,
    pub config_digest: String,
}

/// Builds the phantom dataset, assigns the patient-level split, and writes
/// manifest + volumes + run stamp.
pub fn cmd_generate(config: &ExperimentConfig, force: bool) -> Result<GenerateSummary, CliError> {
    let out = &config.data_dir;
    if out.exists() && out.join("manifest.jsonl").exists() && !force {
        return Err(CliError::Validation(format!(
            "{} already holds a dataset; pass --force to overwrite",
            out.display()
        )));
    }
    ensure_dir(out)?;
    let manifest = generate_dataset(&config.phantom, config.n_patients, config.master_seed, out)
        .map_err(|e| match e {
            neurovol_phantom::PhantomError::Io { path, source } => {
                CliError::Io(format!("{path}: {source}"))
            }
            other => CliError::Validation(other.to_string()),
        })?;
    let (split, warnings) = split_by_patient(
        &manifest,
        config.train_fraction,
        derive_seed(config.master_seed, 0x5B117),
    )
    .map_err(|e| CliError::Validation(e.to_string()))?;
    for w in &warnings {
        eprintln!("warning: {w}");
    }
    split
        .write_jsonl(&out.join("manifest.jsonl"))
        .map_err(|e| CliError::Io(e.to_string()))?;
    split
        .write_meta(&out.join("manifest_meta.json"))
        .map_err(|e| CliError::Io(e.to_string()))?;
    write_run_stamp(out, "generate", config)?;

    let patients = split.patients();
    let mut per_class = Vec::new();
    for class in ClassLabel::ALL {
        let n = patients.iter().filter(|(_, c)| *c == class).count();
        per_class.push((class.name().to_string(), n));
    }
    Ok(GenerateSummary {
        patients: patients.len(),
        images: split.records.len(),
        per_class_patients: per_class,
        data_dir: out.clone(),
        config_digest: config.digest(),
    })
}

// -------------------------------------------------------------- preprocess

#[derive(Debug, Serialize)]
pub struct PreprocessSummary {
    pub processed: usize,
    pub failed: Vec<String>,
    pub mean_sharpness: Option<f64>,
    pub out_dir: PathBuf,
}

/// Runs trim -> downsample -> bound/normalize over every manifest volume.
/// Corrupt volume files are reported and skipped; the run continues.
pub fn cmd_preprocess(
    config: &ExperimentConfig,
    data: Option<&Path>,
    out: Option<&Path>,
) -> Result<PreprocessSummary, CliError> {
    let data_dir = data.unwrap_or(&config.data_dir);
    let out_dir = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| config.out_dir.join("processed"));
    ensure_dir(&out_dir)?;
    let manifest = load_manifest(data_dir)?;
    let digest = config.digest();

    let mut failed = Vec::new();
    let mut reports = String::new();
    let mut processed = 0usize;
    let mut mean_acc: Option<Vec<f64>> = None;
    let mut mean_shape = (0usize, 0usize, 0usize);

    for rec in &manifest.records {
        let volume = match read_volume(data_dir, &rec.image_id) {
            Ok(v) => v,
            Err(e) => {
                eprintln!("error: {}: {e}", rec.image_id);
                failed.push(rec.image_id.clone());
                continue;
            }
        };
        let (out_vol, report) = preprocess::run_pipeline(&volume, &config.preprocess)
            .map_err(|e| CliError::Validation(format!("{}: {e}", rec.image_id)))?;
        let path = out_dir.join(format!("{}.v3f", rec.image_id));
        out_vol
            .write_to(&path)
            .map_err(|e| CliError::Io(e.to_string()))?;

        #[derive(Serialize)]
        struct ReportLine<'a> {
            image_id: &'a str,
            config_digest: &'a str,
            #[serde(flatten)]
            report: &'a preprocess::PreprocessReport,
        }
        let line = serde_json::to_string(&ReportLine {
            image_id: &rec.image_id,
            config_digest: &digest,
            report: &report,
        })
        .map_err(|e| CliError::Validation(e.to_string()))?;
        reports.push_str(&line);
        reports.push('\n');

        match &mut mean_acc {
            None => {
                mean_shape = out_vol.shape();
                mean_acc = Some(out_vol.data.iter().map(|&v| v as f64).collect());
            }
            Some(acc) => {
                for (a, &v) in acc.iter_mut().zip(&out_vol.data) {
                    *a += v as f64;
                }
            }
        }
        processed += 1;
    }

    let reports_path = out_dir.join("preprocess_reports.jsonl");
    std::fs::write(&reports_path, reports).map_err(io_err(&reports_path))?;

    // quality measure: sharpness of the mean image over the processed set
    let mean_sharpness = mean_acc.map(|acc| {
        let inv = 1.0 / processed as f64;
        let data: Vec<f32> = acc.iter().map(|&a| (a * inv) as f32).collect();
        let mean_vol = Volume::from_data(mean_shape.0, mean_shape.1, mean_shape.2, data)
            .expect("mean volume shape");
        preprocess::sharpness_score(&mean_vol)
    });

    // processed volumes keep the manifest (same records, new directory)
    manifest
        .write_jsonl(&out_dir.join("manifest.jsonl"))
        .map_err(|e| CliError::Io(e.to_string()))?;
    manifest
        .write_meta(&out_dir.join("manifest_meta.json"))
        .map_err(|e| CliError::Io(e.to_string()))?;

    #[derive(Serialize)]
    struct Summary<'a> {
        config_digest: &'a str,
        processed: usize,
        failed: &'a [String],
        mean_sharpness: Option<f64>,
    }
    let summary_path = out_dir.join("preprocess_summary.json");
    let body = serde_json::to_string_pretty(&Summary {
        config_digest: &digest,
        processed,
        failed: &failed,
        mean_sharpness,
    })
    .map_err(|e| CliError::Validation(e.to_string()))?;
    std::fs::write(&summary_path, body).map_err(io_err(&summary_path))?;
    write_run_stamp(&out_dir, "preprocess", config)?;

    if processed == 0 {
        return Err(CliError::Validation("no volume could be processed".into()));
    }
    if !failed.is_empty() {
        return Err(CliError::Io(format!(
            "{} volume file(s) unreadable (see stderr); {processed} processed",
            failed.len()
        )));
    }
    Ok(PreprocessSummary {
        processed,
        failed,
        mean_sharpness,
        out_dir,
    })
}

// ------------------------------------------------------------------ train

#[derive(Debug)]
pub struct TrainSummary {
    pub model: ModelKind,
    pub final_checkpoint: PathBuf,
    pub loss_csv: PathBuf,
    pub curve: Vec<models::EpochStats>,
    pub out_dir: PathBuf,
}

/// Trains the selected model on the train split only.
pub fn cmd_train(
    config: &ExperimentConfig,
    model: ModelKind,
    data: Option<&Path>,
    out: Option<&Path>,
) -> Result<TrainSummary, CliError> {
    let data_dir = data.unwrap_or(&config.data_dir);
    let out_dir = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| config.out_dir.join("models").join(model.label()));
    ensure_dir(&out_dir)?;
    let manifest = load_manifest(data_dir)?;
    let spec = match model {
        ModelKind::Vae => &config.vae,
        ModelKind::Ivae => &config.ivae,
    };

    let train_records: Vec<_> = manifest.records_in_split(Split::Train).collect();
    if train_records.is_empty() {
        return Err(CliError::Validation("train split is empty".into()));
    }
    let mut volumes = Vec::with_capacity(train_records.len());
    let mut train_ids = String::new();
    for rec in &train_records {
        volumes.push(read_volume(data_dir, &rec.image_id)?);
        train_ids.push_str(&rec.image_id);
        train_ids.push('\n');
    }
    let ids_path = out_dir.join("train_images.txt");
    std::fs::write(&ids_path, train_ids).map_err(io_err(&ids_path))?;

    let digest = config.digest();
    let result = match model {
        ModelKind::Vae => {
            models::train_vae(&volumes, &spec.arch, &spec.train, Some(&out_dir), &digest)
        }
        ModelKind::Ivae => {
            models::train_ivae(&volumes, &spec.arch, &spec.train, Some(&out_dir), &digest)
        }
    }
    .map_err(|e| match e {
        models::ModelError::Io { path, source } => CliError::Io(format!("{path}: {source}")),
        other => CliError::Validation(other.to_string()),
    })?;

    for e in &result.curve {
        match (e.encoder_loss, e.generator_loss) {
            (Some(le), Some(lg)) => println!(
                "epoch {:4}  recon {:.6}  kl {:.4}  L_E {:.4}  L_G {:.4}",
                e.epoch, e.recon, e.kl, le, lg
            ),
            _ => println!(
                "epoch {:4}  total {:.6}  recon {:.6}  kl {:.4}",
                e.epoch, e.total, e.recon, e.kl
            ),
        }
    }

    let loss_csv = out_dir.join(format!("loss_{}.csv", model.label()));
    std::fs::write(&loss_csv, models::curve_to_csv(&result.curve, &digest))
        .map_err(io_err(&loss_csv))?;
    write_run_stamp(&out_dir, &format!("train_{}", model.label()), config)?;

    let final_checkpoint = result
        .checkpoints
        .last()
        .cloned()
        .ok_or_else(|| CliError::Validation("no checkpoint written".into()))?;
    Ok(TrainSummary {
        model,
        final_checkpoint,
        loss_csv,
        curve: result.curve,
        out_dir,
    })
}

// ------------------------------------------------------- checkpoint loading

fn load_model(
    checkpoint: &Path,
    expected_arch: &ArchitectureConfig,
) -> Result<(CheckpointHeader, ParameterStore), CliError> {
    let (header, store) = load_checkpoint(checkpoint).map_err(|e| match e {
        models::ModelError::Io { path, source } => CliError::Io(format!("{path}: {source}")),
        other => CliError::Validation(other.to_string()),
    })?;
    check_architecture(&header, expected_arch).map_err(|e| CliError::Validation(e.to_string()))?;
    Ok((header, store))
}

fn spec_of(config: &ExperimentConfig, model: ModelKind) -> &crate::config::ModelSpec {
    match model {
        ModelKind::Vae => &config.vae,
        ModelKind::Ivae => &config.ivae,
    }
}

// ------------------------------------------------------------- reconstruct

/// Reconstructs the first n test-split images (posterior mean, deterministic)
/// and writes volumes plus center-slice views.
pub fn cmd_reconstruct(
    config: &ExperimentConfig,
    model: ModelKind,
    checkpoint: &Path,
    data: Option<&Path>,
    out: Option<&Path>,
    n: usize,
) -> Result<Vec<PathBuf>, CliError> {
    let data_dir = data.unwrap_or(&config.data_dir);
    let out_dir = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| config.out_dir.join("reconstructions").join(model.label()));
    ensure_dir(&out_dir)?;
    let spec = spec_of(config, model);
    let (_, store) = load_model(checkpoint, &spec.arch)?;
    let manifest = load_manifest(data_dir)?;
    let digest = config.digest();

    let mut written = Vec::new();
    let mut rng = RngStream::new(derive_seed(config.master_seed, 0x2EC0));
    for rec in manifest.records_in_split(Split::Test).take(n) {
        let volume = read_volume(data_dir, &rec.image_id)?;
        let recon = models::reconstruct(&volume, &store, &spec.arch, true, &mut rng)
            .map_err(|e| CliError::Validation(e.to_string()))?;
        let vol_path = out_dir.join(format!("{}_recon.v3f", rec.image_id));
        recon
            .write_to(&vol_path)
            .map_err(|e| CliError::Io(e.to_string()))?;
        written.push(vol_path);
        written.extend(write_slice_set(
            &out_dir,
            &format!("{}_recon", rec.image_id),
            &recon,
            &digest,
        )?);
        written.extend(write_slice_set(
            &out_dir,
            &format!("{}_orig", rec.image_id),
            &volume,
            &digest,
        )?);
    }
    if written.is_empty() {
        return Err(CliError::Validation("test split is empty".into()));
    }
    write_run_stamp(&out_dir, &format!("reconstruct_{}", model.label()), config)?;
    Ok(written)
}

// ------------------------------------------------------------------ sample

/// Draws n prior samples and writes volumes plus center-slice views.
pub fn cmd_sample(
    config: &ExperimentConfig,
    model: ModelKind,
    checkpoint: &Path,
    out: Option<&Path>,
    n: usize,
) -> Result<Vec<PathBuf>, CliError> {
    let out_dir = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| config.out_dir.join("samples").join(model.label()));
    ensure_dir(&out_dir)?;
    let spec = spec_of(config, model);
    let (_, store) = load_model(checkpoint, &spec.arch)?;
    let digest = config.digest();

    let mut rng = RngStream::new(derive_seed(config.master_seed, 0x5A3));
    let samples = models::sample_prior(&store, &spec.arch, n, &mut rng)
        .map_err(|e| CliError::Validation(e.to_string()))?;
    let mut written = Vec::new();
    for (i, volume) in samples.iter().enumerate() {
        let stem = format!("sample_{i:03}");
        let vol_path = out_dir.join(format!("{stem}.v3f"));
        volume
            .write_to(&vol_path)
            .map_err(|e| CliError::Io(e.to_string()))?;
        written.push(vol_path);
        written.extend(write_slice_set(&out_dir, &stem, volume, &digest)?);
    }
    write_run_stamp(&out_dir, &format!("sample_{}", model.label()), config)?;
    Ok(written)
}

// ----------------------------------------------------------------- analyze

#[derive(Debug, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: String,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct MetricsJson {
    pub config_digest: String,
    pub model: String,
    pub test_samples: usize,
    pub per_class: Vec<ClassMetrics>,
    pub accuracy: f64,
    pub ms_vs_rest_accuracy: f64,
}

#[derive(Debug)]
pub struct AnalyzeSummary {
    pub metrics: MetricsJson,
    pub fisher_scores: Vec<f64>,
    pub ranked_dims: Vec<usize>,
    pub projection_dims: usize,
    pub out_dir: PathBuf,
}

fn encode_mu_all(
    manifest: &DatasetManifest,
    data_dir: &Path,
    store: &ParameterStore,
    arch: &ArchitectureConfig,
) -> Result<Vec<Vec<f64>>, CliError> {
    let mut rng = RngStream::new(1); // eval-mode encoding is deterministic
    let mut out = Vec::with_capacity(manifest.records.len());
    let chunk = 32;
    let mut batch = Vec::with_capacity(chunk);
    let flush = |batch: &mut Vec<Volume>,
                 out: &mut Vec<Vec<f64>>,
                 rng: &mut RngStream|
     -> Result<(), CliError> {
        if batch.is_empty() {
            return Ok(());
        }
        let refs: Vec<&Volume> = batch.iter().collect();
        let codes = models::encode_batch(&refs, store, arch, rng)
            .map_err(|e| CliError::Validation(e.to_string()))?;
        for code in codes {
            out.push(code.mu.iter().map(|&v| v as f64).collect());
        }
        batch.clear();
        Ok(())
    };
    for rec in &manifest.records {
        batch.push(read_volume(data_dir, &rec.image_id)?);
        if batch.len() == chunk {
            flush(&mut batch, &mut out, &mut rng)?;
        }
    }
    flush(&mut batch, &mut out, &mut rng)?;
    Ok(out)
}

fn rank_dims_by_score(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order
}

/// Encodes every image, fits the discriminant model on the train split,
/// classifies the test split, and writes projections, metrics, per-image
/// predictions, dimension scores, traversals, and the bias report.
pub fn cmd_analyze(
    config: &ExperimentConfig,
    model: ModelKind,
    checkpoint: &Path,
    data: Option<&Path>,
    out: Option<&Path>,
) -> Result<AnalyzeSummary, CliError> {
    let data_dir = data.unwrap_or(&config.data_dir);
    let out_dir = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| config.out_dir.join("analysis").join(model.label()));
    ensure_dir(&out_dir)?;
    let spec = spec_of(config, model);
    let (_, store) = load_model(checkpoint, &spec.arch)?;
    let manifest = load_manifest(data_dir)?;
    let digest = config.digest();

    let latents = encode_mu_all(&manifest, data_dir, &store, &spec.arch)?;
    let labels: Vec<usize> = manifest
        .records
        .iter()
        .map(|r| r.class_label.index())
        .collect();
    let is_train: Vec<bool> = manifest
        .records
        .iter()
        .map(|r| r.split == Split::Train)
        .collect();

    let train_x: Vec<Vec<f64>> = latents
        .iter()
        .zip(&is_train)
        .filter(|(_, &t)| t)
        .map(|(x, _)| x.clone())
        .collect();
    let train_y: Vec<usize> = labels
        .iter()
        .zip(&is_train)
        .filter(|(_, &t)| t)
        .map(|(&l, _)| l)
        .collect();
    if train_x.is_empty() {
        return Err(CliError::Validation("train split is empty".into()));
    }
    let lda = analysis::lda_fit(&train_x, &train_y, 5, config.analysis.lda_epsilon)
        .map_err(|e| CliError::Validation(e.to_string()))?;

    // projections CSV over all images, at most three coordinates
    let k = lda.projection_dims().min(3);
    let mut csv = format!("# config_digest={digest}\n");
    csv.push_str("image_id,class_label");
    for j in 1..=k {
        csv.push_str(&format!(",ld{j}"));
    }
    csv.push('\n');
    for (rec, x) in manifest.records.iter().zip(&latents) {
        let p = lda
            .project(x)
            .map_err(|e| CliError::Validation(e.to_string()))?;
        csv.push_str(&format!("{},{}", rec.image_id, rec.class_label.name()));
        for v in p.iter().take(k) {
            csv.push_str(&format!(",{v}"));
        }
        csv.push('\n');
    }
    let proj_path = out_dir.join("projections.csv");
    std::fs::write(&proj_path, csv).map_err(io_err(&proj_path))?;

    // optional display variant with the three severity grades merged
    if config.analysis.merge_grades_projection {
        let merge = |c: ClassLabel| -> usize {
            match c {
                ClassLabel::Healthy => 0,
                ClassLabel::Ms => 1,
                _ => 2,
            }
        };
        let merged_y: Vec<usize> = manifest
            .records
            .iter()
            .zip(&is_train)
            .filter(|(_, &t)| t)
            .map(|(r, _)| merge(r.class_label))
            .collect();
        let merged_lda = analysis::lda_fit(&train_x, &merged_y, 3, config.analysis.lda_epsilon)
            .map_err(|e| CliError::Validation(e.to_string()))?;
        let mk = merged_lda.projection_dims().min(3);
        let mut mcsv = format!("# config_digest={digest}\n");
        mcsv.push_str("image_id,class_label");
        for j in 1..=mk {
            mcsv.push_str(&format!(",ld{j}"));
        }
        mcsv.push('\n');
        for (rec, x) in manifest.records.iter().zip(&latents) {
            let p = merged_lda
                .project(x)
                .map_err(|e| CliError::Validation(e.to_string()))?;
            let name = match merge(rec.class_label) {
                0 => "healthy",
                1 => "ms",
                _ => "leuk",
            };
            mcsv.push_str(&format!("{},{name}", rec.image_id));
            for v in p.iter().take(mk) {
                mcsv.push_str(&format!(",{v}"));
            }
            mcsv.push('\n');
        }
        let mpath = out_dir.join("projections_merged.csv");
        std::fs::write(&mpath, mcsv).map_err(io_err(&mpath))?;
    }

    // classify the test split
    let mut predictions = format!("# config_digest={digest}\nimage_id,actual,predicted\n");
    let mut test_actual = Vec::new();
    let mut test_predicted = Vec::new();
    for ((rec, x), &train) in manifest.records.iter().zip(&latents).zip(&is_train) {
        if train {
            continue;
        }
        let pred = lda
            .classify(x)
            .map_err(|e| CliError::Validation(e.to_string()))?;
        predictions.push_str(&format!(
            "{},{},{}\n",
            rec.image_id,
            rec.class_label.name(),
            ClassLabel::ALL[pred].name()
        ));
        test_actual.push(rec.class_label.index());
        test_predicted.push(pred);
    }
    if test_actual.is_empty() {
        return Err(CliError::Validation("test split is empty".into()));
    }
    let pred_path = out_dir.join("predictions.csv");
    std::fs::write(&pred_path, predictions).map_err(io_err(&pred_path))?;

    let stats = analysis::confusion_stats(&test_predicted, &test_actual, 5)
        .map_err(|e| CliError::Validation(e.to_string()))?;
    let correct = test_predicted
        .iter()
        .zip(&test_actual)
        .filter(|(p, a)| p == a)
        .count();
    let accuracy = correct as f64 / test_actual.len() as f64;
    let ms = ClassLabel::Ms.index();
    let ms_correct = test_predicted
        .iter()
        .zip(&test_actual)
        .filter(|(&p, &a)| (p == ms) == (a == ms))
        .count();
    let ms_vs_rest_accuracy = ms_correct as f64 / test_actual.len() as f64;

    let per_class = ClassLabel::ALL
        .iter()
        .map(|class| {
            let c = stats.per_class[class.index()];
            ClassMetrics {
                class: class.name().to_string(),
                tp: c.tp,
                fp: c.fp,
                fn_: c.fn_,
                tn: c.tn,
                precision: c.precision(),
                recall: c.recall(),
            }
        })
        .collect();
    let metrics = MetricsJson {
        config_digest: digest.clone(),
        model: model.label().to_string(),
        test_samples: test_actual.len(),
        per_class,
        accuracy,
        ms_vs_rest_accuracy,
    };
    let metrics_path = out_dir.join("metrics.json");
    let body =
        serde_json::to_string_pretty(&metrics).map_err(|e| CliError::Validation(e.to_string()))?;
    std::fs::write(&metrics_path, body).map_err(io_err(&metrics_path))?;

    // dimension scores on the train split, then traverse the leaders
    let fisher = analysis::fisher_score_per_dim(&train_x, &train_y, 5)
        .map_err(|e| CliError::Validation(e.to_string()))?;
    let ranked = rank_dims_by_score(&fisher);
    #[derive(Serialize)]
    struct FisherJson<'a> {
        config_digest: &'a str,
        scores: &'a [f64],
        ranked_dims: &'a [usize],
    }
    let fisher_path = out_dir.join("fisher.json");
    let body = serde_json::to_string_pretty(&FisherJson {
        config_digest: &digest,
        scores: &fisher,
        ranked_dims: &ranked,
    })
    .map_err(|e| CliError::Validation(e.to_string()))?;
    std::fs::write(&fisher_path, body).map_err(io_err(&fisher_path))?;

    let traversal_dir = out_dir.join("traversal");
    ensure_dir(&traversal_dir)?;
    for &dim in ranked.iter().take(config.analysis.traversal_top_k) {
        let volumes = analysis::latent_traversal(
            |z| models::decode(z, &store, &spec.arch),
            spec.arch.latent_dim,
            dim,
            &config.analysis.traversal_values,
        )
        .map_err(|e| CliError::Validation(e.to_string()))?;
        for (value, volume) in config.analysis.traversal_values.iter().zip(&volumes) {
            let stem = format!("dim{dim:03}_value_{value:+.2}");
            let vol_path = traversal_dir.join(format!("{stem}.v3f"));
            volume
                .write_to(&vol_path)
                .map_err(|e| CliError::Io(e.to_string()))?;
            write_slice_set(&traversal_dir, &stem, volume, &digest)?;
        }
    }

    let bias = analysis::metadata_bias_report(
        &manifest,
        config.analysis.bias_flag_threshold,
        config.analysis.bias_histogram_bins,
    )
    .map_err(|e| CliError::Validation(e.to_string()))?;
    #[derive(Serialize)]
    struct BiasJson<'a> {
        config_digest: &'a str,
        #[serde(flatten)]
        report: &'a analysis::BiasReport,
    }
    let bias_path = out_dir.join("bias_report.json");
    let body = serde_json::to_string_pretty(&BiasJson {
        config_digest: &digest,
        report: &bias,
    })
    .map_err(|e| CliError::Validation(e.to_string()))?;
    std::fs::write(&bias_path, body).map_err(io_err(&bias_path))?;

    write_run_stamp(&out_dir, &format!("analyze_{}", model.label()), config)?;
    Ok(AnalyzeSummary {
        metrics,
        fisher_scores: fisher,
        ranked_dims: ranked,
        projection_dims: lda.projection_dims(),
        out_dir,
    })
}

// ---------------------------------------------------------------- traverse

/// Decodes a sweep over one latent dimension.
pub fn cmd_traverse(
    config: &ExperimentConfig,
    model: ModelKind,
    checkpoint: &Path,
    dim: usize,
    values: Option<Vec<f64>>,
    out: Option<&Path>,
) -> Result<Vec<PathBuf>, CliError> {
    let out_dir = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| config.out_dir.join("traversal").join(model.label()));
    ensure_dir(&out_dir)?;
    let spec = spec_of(config, model);
    let (_, store) = load_model(checkpoint, &spec.arch)?;
    let digest = config.digest();
    let values = values.unwrap_or_else(|| config.analysis.traversal_values.clone());

    let volumes = analysis::latent_traversal(
        |z| models::decode(z, &store, &spec.arch),
        spec.arch.latent_dim,
        dim,
        &values,
    )
    .map_err(|e| CliError::Validation(e.to_string()))?;
    let mut written = Vec::new();
    for (value, volume) in values.iter().zip(&volumes) {
        let stem = format!("dim{dim:03}_value_{value:+.2}");
        let vol_path = out_dir.join(format!("{stem}.v3f"));
        volume
            .write_to(&vol_path)
            .map_err(|e| CliError::Io(e.to_string()))?;
        written.push(vol_path);
        written.extend(write_slice_set(&out_dir, &stem, volume, &digest)?);
    }
    write_run_stamp(&out_dir, &format!("traverse_{}", model.label()), config)?;
    Ok(written)
}

/// Disjointness of the ids used in training and the ids analyzed as test.
pub fn split_ids(manifest: &DatasetManifest) -> (HashSet<String>, HashSet<String>) {
    let train = manifest
        .records_in_split(Split::Train)
        .map(|r| r.image_id.clone())
        .collect();
    let test = manifest
        .records_in_split(Split::Test)
        .map(|r| r.image_id.clone())
        .collect();
    (train, test)
}
