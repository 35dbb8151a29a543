//! `mamapp` — command-line front end for the leaf-disease classifier.
//!
//! Subcommands: `split`, `train`, `eval`, `predict`, `features`, `params`.
//! Exit codes: 0 success, 2 usage/config/data error, 3 numerical failure
//! (non-finite loss, failed eigendecomposition).

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use mamapp::data::{self, DatasetIndex, Split};
use mamapp::eval;
use mamapp::model::{self, MamAppConfig, MamAppModel};
use mamapp::tensor::{Tape, Tensor};
use mamapp::train::{self, TrainOptions};

mod config_file;

use config_file::RunConfigFile;

#[derive(Parser)]
#[command(
    name = "mamapp",
    version,
    about = "Train and evaluate a small state-space image classifier"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Index a dataset directory and write a stratified 70/15/15 split manifest.
    Split {
        /// Dataset root: one subdirectory per class.
        #[arg(long)]
        data: PathBuf,
        /// Split seed (default: MAMAPP_SEED env var, then 42).
        #[arg(long)]
        seed: Option<u64>,
        /// Manifest CSV to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model from a run-config file.
    Train {
        /// Run-config file (key = value lines, `#` comments).
        #[arg(long)]
        config: PathBuf,
        /// Continue from this checkpoint instead of starting fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Override the config file's dataset root.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Override the config file's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the seed (priority: flag > file > MAMAPP_SEED > 42).
        #[arg(long)]
        seed: Option<u64>,
        /// Override the epoch count.
        #[arg(long)]
        epochs: Option<usize>,
        /// Data-loading threads; 1 guarantees bit-exact reproducibility.
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Evaluate a checkpoint on one split; writes metrics JSON + confusion CSV.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Which split to evaluate: train, val, or test.
        #[arg(long, default_value = "test")]
        split: String,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Classify a single image and print per-class probabilities.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
    },
    /// Export penultimate features (and optionally a PCA projection) to CSV.
    Features {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Also write a PCA projection with this many components (2 or 3).
        #[arg(long)]
        pca: Option<usize>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Print trainable-parameter counts for a config (defaults if omitted).
    Params {
        /// Run-config file; omitted means the default architecture.
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

/// Error carrying the process exit code.
struct CliError {
    message: String,
    code: u8,
}

impl CliError {
    fn usage(message: impl Into<String>) -> Self {
        CliError {
            message: message.into(),
            code: 2,
        }
    }
}

impl From<mamapp::Error> for CliError {
    fn from(e: mamapp::Error) -> Self {
        CliError {
            code: if e.is_numeric() { 3 } else { 2 },
            message: e.to_string(),
        }
    }
}

impl From<model::ModelError> for CliError {
    fn from(e: model::ModelError) -> Self {
        mamapp::Error::from(e).into()
    }
}

impl From<data::DataError> for CliError {
    fn from(e: data::DataError) -> Self {
        mamapp::Error::from(e).into()
    }
}

impl From<eval::EvalError> for CliError {
    fn from(e: eval::EvalError) -> Self {
        mamapp::Error::from(e).into()
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Split { data, seed, out } => cmd_split(&data, seed, &out),
        Command::Train {
            config,
            resume,
            data,
            out,
            seed,
            epochs,
            workers,
        } => cmd_train(&config, resume, data, out, seed, epochs, workers),
        Command::Eval {
            ckpt,
            data,
            split,
            out,
            workers,
        } => cmd_eval(&ckpt, &data, &split, &out, workers),
        Command::Predict { ckpt, image } => cmd_predict(&ckpt, &image),
        Command::Features {
            ckpt,
            data,
            split,
            pca,
            out,
            workers,
        } => cmd_features(&ckpt, &data, &split, pca, &out, workers),
        Command::Params { config } => cmd_params(config.as_deref()),
    }
}

/// Seed fallback chain: explicit value, then MAMAPP_SEED, then 42.
fn env_seed() -> Option<u64> {
    std::env::var("MAMAPP_SEED").ok().and_then(|v| v.parse().ok())
}

fn parse_split(name: &str) -> Result<Split, CliError> {
    match name {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        other => Err(CliError::usage(format!(
            "unknown split '{other}' (expected train, val, or test)"
        ))),
    }
}

fn print_warnings(index: &DatasetIndex) {
    for w in &index.warnings {
        eprintln!("warning: {w}");
    }
}

/// Indexes and splits a dataset with one seed (used by every data command).
fn indexed_split(root: &Path, seed: u64) -> Result<DatasetIndex, CliError> {
    let mut index = data::index_dataset(root)?;
    print_warnings(&index);
    data::stratified_split(&mut index, seed);
    Ok(index)
}

fn write_run_manifest(out_dir: &Path, files: &[&Path]) -> Result<PathBuf, CliError> {
    let names: Vec<String> = files
        .iter()
        .map(|p| {
            p.strip_prefix(out_dir)
                .unwrap_or(p)
                .to_string_lossy()
                .to_string()
        })
        .collect();
    let path = out_dir.join("manifest.json");
    let body = serde_json::json!({ "files": names });
    std::fs::write(&path, serde_json::to_string_pretty(&body).expect("serializes"))
        .map_err(|e| CliError::usage(format!("writing {}: {e}", path.display())))?;
    Ok(path)
}

fn ensure_out_dir(out: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(out)
        .map_err(|e| CliError::usage(format!("creating {}: {e}", out.display())))
}

// ---- split ----

fn cmd_split(data: &Path, seed: Option<u64>, out: &Path) -> Result<(), CliError> {
    let seed = seed.or_else(env_seed).unwrap_or(42);
    let index = indexed_split(data, seed)?;
    data::write_manifest(&index, out)?;

    let width = index
        .classes
        .iter()
        .map(|c| c.len())
        .max()
        .unwrap_or(5)
        .max("total".len());
    println!("{:<width$}  {:>6} {:>6} {:>6} {:>6}", "class", "train", "val", "test", "total");
    let mut totals = [0usize; 4];
    for (class_id, name) in index.classes.iter().enumerate() {
        let mut row = [0usize; 3];
        for split in Split::ALL {
            let n = index
                .split_indices(split)
                .iter()
                .filter(|&&i| index.samples[i].class_id == class_id)
                .count();
            row[split as usize] = n;
        }
        let class_total: usize = row.iter().sum();
        println!(
            "{:<width$}  {:>6} {:>6} {:>6} {:>6}",
            name, row[0], row[1], row[2], class_total
        );
        for (t, v) in totals.iter_mut().zip(row.iter().chain([&class_total])) {
            *t += v;
        }
    }
    println!(
        "{:<width$}  {:>6} {:>6} {:>6} {:>6}",
        "total", totals[0], totals[1], totals[2], totals[3]
    );
    println!("manifest: {}", out.display());
    Ok(())
}

// ---- train ----

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    config_path: &Path,
    resume: Option<PathBuf>,
    data_override: Option<PathBuf>,
    out_override: Option<PathBuf>,
    seed_override: Option<u64>,
    epochs_override: Option<usize>,
    workers_override: Option<usize>,
) -> Result<(), CliError> {
    let file = RunConfigFile::parse_file(config_path).map_err(CliError::usage)?;
    let mut config = file.config;
    if let Some(seed) = seed_override {
        config.seed = seed;
    } else if !file.seed_from_file {
        if let Some(seed) = env_seed() {
            config.seed = seed;
        }
    }
    if let Some(epochs) = epochs_override {
        config.epochs = epochs;
    }
    let data_dir = data_override
        .or(file.data)
        .ok_or_else(|| CliError::usage("dataset root missing: set `data = DIR` or pass --data"))?;
    let out_dir = out_override
        .or(file.out)
        .ok_or_else(|| CliError::usage("output dir missing: set `out = DIR` or pass --out"))?;
    let workers = workers_override.or(file.workers).unwrap_or(1).max(1);

    ensure_out_dir(&out_dir)?;
    let index = indexed_split(&data_dir, config.seed)?;
    if config.num_classes != index.num_classes() {
        // A config written for a different dataset; surface before training.
        return Err(CliError::usage(format!(
            "config expects {} classes but {} has {} ({})",
            config.num_classes,
            data_dir.display(),
            index.num_classes(),
            index.classes.join(", ")
        )));
    }
    let manifest_csv = out_dir.join("split.csv");
    data::write_manifest(&index, &manifest_csv)?;

    let opts = TrainOptions { workers, resume };
    let arts = train::train(&config, &index, &out_dir, &opts)?;

    for rec in &arts.log {
        println!(
            "epoch {:>3}  train_loss {:.4}  val_loss {:.4}  val_acc {:.4}  ({:.1}s)",
            rec.epoch, rec.train_loss, rec.val_loss, rec.val_acc, rec.seconds
        );
    }
    match arts.best_epoch {
        Some(epoch) => println!(
            "best epoch {epoch}: val_acc {:.4}, val_loss {:.4}",
            arts.best_val_acc, arts.best_val_loss
        ),
        None => println!("no epochs ran"),
    }

    let mut files: Vec<&Path> = vec![&manifest_csv, &arts.last_path, &arts.log_path, &arts.summary_path];
    if arts.best_epoch.is_some() {
        files.insert(1, &arts.best_path);
    }
    let manifest = write_run_manifest(&out_dir, &files)?;
    println!("artifacts: {}", manifest.display());
    Ok(())
}

// ---- eval ----

/// Loads a checkpoint and checks its head against the dataset's class count.
fn load_for_data(ckpt: &Path, index: &DatasetIndex) -> Result<MamAppModel<f32>, CliError> {
    let (model, _extras) = model::load_checkpoint::<f32>(ckpt)?;
    let expected = model.config().num_classes;
    if expected != index.num_classes() {
        return Err(CliError::usage(format!(
            "checkpoint head.weight expects {} classes but the dataset has {} ({})",
            expected,
            index.num_classes(),
            index.classes.join(", ")
        )));
    }
    if let Some(names) = &model.config().class_names {
        if *names != index.classes {
            eprintln!(
                "warning: checkpoint classes {:?} differ from dataset classes {:?}; label ids follow the dataset",
                names, index.classes
            );
        }
    }
    Ok(model)
}

fn cmd_eval(ckpt: &Path, data: &Path, split: &str, out: &Path, workers: usize) -> Result<(), CliError> {
    let split = parse_split(split)?;
    ensure_out_dir(out)?;
    let (model_probe, _) = model::load_checkpoint::<f32>(ckpt)?;
    let config = model_probe.config().clone();
    let index = indexed_split(data, config.seed)?;
    let mut model = load_for_data(ckpt, &index)?;

    let cm = eval::confusion_over_split(&mut model, &index, split, &config, workers.max(1))?;
    let report = eval::metrics(&cm)?;

    let metrics_path = out.join("metrics.json");
    std::fs::write(
        &metrics_path,
        serde_json::to_string_pretty(&report).expect("serializes"),
    )
    .map_err(|e| CliError::usage(format!("writing {}: {e}", metrics_path.display())))?;

    let confusion_path = out.join("confusion.csv");
    write_confusion_csv(&cm, &confusion_path)?;

    let manifest = write_run_manifest(out, &[&metrics_path, &confusion_path])?;
    println!(
        "split {}: accuracy {:.4}, macro F1 {:.4} over {} samples",
        split.as_str(),
        report.accuracy,
        report.macro_.f1,
        cm.total()
    );
    println!("artifacts: {}", manifest.display());
    Ok(())
}

/// First column is the true class, remaining columns are predicted counts.
fn write_confusion_csv(cm: &eval::ConfusionMatrix, path: &Path) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| CliError::usage(format!("writing {}: {e}", path.display())))?;
    let mut header = vec!["true_class".to_string()];
    header.extend(cm.classes().iter().cloned());
    let rows = cm.rows();
    w.write_record(&header)
        .and_then(|()| {
            cm.classes().iter().enumerate().try_for_each(|(t, name)| {
                let mut record = vec![name.clone()];
                record.extend(rows[t].iter().map(|n| n.to_string()));
                w.write_record(&record)
            })
        })
        .map_err(|e| CliError::usage(format!("writing {}: {e}", path.display())))?;
    w.flush()
        .map_err(|e| CliError::usage(format!("writing {}: {e}", path.display())))?;
    Ok(())
}

// ---- predict ----

fn cmd_predict(ckpt: &Path, image: &Path) -> Result<(), CliError> {
    let (mut model, _) = model::load_checkpoint::<f32>(ckpt)?;
    let config = model.config().clone();
    let mut img = data::load_and_preprocess(image, config.img_size)?;
    if let (Some(mean), Some(std)) = (&config.normalize_mean, &config.normalize_std) {
        data::normalize_in_place(&mut img, mean, std);
    }
    let n = img.numel();
    let batch = Tensor::new(
        vec![1, config.in_channels, config.img_size, config.img_size],
        img.data().to_vec(),
    )
    .map_err(|_| CliError::usage(format!("image tensor had {n} values, expected a full frame")))?;

    let mut tape = Tape::new();
    let pass = model.forward(&mut tape, &batch, model::Mode::Eval)?;
    let logits = tape.value(pass.logits).data().to_vec();

    let probs = softmax(&logits);
    let fallback: Vec<String> = (0..config.num_classes).map(|i| format!("class_{i}")).collect();
    let names = config.class_names.as_ref().unwrap_or(&fallback);
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].partial_cmp(&probs[a]).expect("finite probabilities"));
    for &i in &order {
        println!("{:<24} {:.4}", names[i], probs[i]);
    }
    let top = order[0];
    println!("prediction: {} (p={:.4})", names[top], probs[top]);
    Ok(())
}

fn softmax(logits: &[f32]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
    let exps: Vec<f64> = logits.iter().map(|&v| (v as f64 - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

// ---- features ----

fn cmd_features(
    ckpt: &Path,
    data: &Path,
    split: &str,
    pca_components: Option<usize>,
    out: &Path,
    workers: usize,
) -> Result<(), CliError> {
    let split = parse_split(split)?;
    if let Some(m) = pca_components {
        if !(2..=3).contains(&m) {
            return Err(CliError::usage(format!("--pca must be 2 or 3, got {m}")));
        }
    }
    ensure_out_dir(out)?;
    let (model_probe, _) = model::load_checkpoint::<f32>(ckpt)?;
    let config = model_probe.config().clone();
    let index = indexed_split(data, config.seed)?;
    let mut model = load_for_data(ckpt, &index)?;

    let features_path = out.join("features.csv");
    let rows = eval::export_features(
        &mut model,
        &index,
        split,
        &config,
        &features_path,
        workers.max(1),
    )?;
    println!("wrote {rows} feature rows to {}", features_path.display());

    let mut files: Vec<PathBuf> = vec![features_path.clone()];
    if let Some(m) = pca_components {
        let (matrix, labels) = read_feature_csv(&features_path, config.d_model)?;
        let projection = eval::pca(&matrix, m)?;
        let pca_path = out.join(format!("pca{m}.csv"));
        let sidecar = eval::write_pca_outputs(&projection, &labels, &pca_path)?;
        println!(
            "pca{m}: explained variance {:?}",
            projection
                .explained
                .iter()
                .map(|r| (r * 1e4).round() / 1e4)
                .collect::<Vec<_>>()
        );
        files.push(pca_path);
        files.push(sidecar);
    }
    let file_refs: Vec<&Path> = files.iter().map(PathBuf::as_path).collect();
    let manifest = write_run_manifest(out, &file_refs)?;
    println!("artifacts: {}", manifest.display());
    Ok(())
}

/// Reads a feature CSV back into an f64 matrix plus (path, class) labels.
fn read_feature_csv(path: &Path, d: usize) -> Result<(Tensor<f64>, Vec<(String, String)>), CliError> {
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| CliError::usage(format!("reading {}: {e}", path.display())))?;
    let mut values = Vec::new();
    let mut labels = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| CliError::usage(format!("reading {}: {e}", path.display())))?;
        if record.len() != d + 2 {
            return Err(CliError::usage(format!(
                "{}: expected {} columns, found {}",
                path.display(),
                d + 2,
                record.len()
            )));
        }
        labels.push((record[0].to_string(), record[1].to_string()));
        for i in 0..d {
            let v: f64 = record[i + 2].parse().map_err(|_| {
                CliError::usage(format!("{}: bad float '{}'", path.display(), &record[i + 2]))
            })?;
            values.push(v);
        }
    }
    let rows = labels.len();
    let matrix = Tensor::new(vec![rows, d], values)
        .map_err(|_| CliError::usage("feature matrix shape mismatch".to_string()))?;
    Ok((matrix, labels))
}

// ---- params ----

fn cmd_params(config_path: Option<&Path>) -> Result<(), CliError> {
    let config = match config_path {
        Some(path) => RunConfigFile::parse_file(path).map_err(CliError::usage)?.config,
        None => MamAppConfig::default(),
    };
    let model = model::build::<f32>(&config, config.seed)?;
    let count = model.count_params();

    let width = count
        .by_module
        .iter()
        .map(|(name, _)| name.len())
        .max()
        .unwrap_or(6)
        .max("module".len());
    println!("{:<width$}  {:>8}", "module", "params");
    let module_names: BTreeSet<&String> = count.by_module.iter().map(|(n, _)| n).collect();
    for name in module_names {
        let n: usize = count
            .by_module
            .iter()
            .filter(|(m, _)| m == name)
            .map(|(_, c)| c)
            .sum();
        println!("{:<width$}  {:>8}", name, n);
    }
    println!("{:<width$}  {:>8}", "total", count.total);
    println!("reference: 51000, budget: 60000 ({})", if count.total <= 60_000 { "within budget" } else { "OVER BUDGET" });
    Ok(())
}
