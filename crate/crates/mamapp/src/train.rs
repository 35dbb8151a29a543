//! Loss, optimizer, and the epoch loop.
//!
//! Training runs at a constant learning rate with label-smoothed
//! cross-entropy and AdamW (decoupled weight decay; norm gains/shifts and
//! biases exempt). Every epoch evaluates on the validation split and the
//! best checkpoint is kept by highest validation accuracy, ties broken by
//! lower validation loss, then by earlier epoch. `last.ckpt` additionally
//! carries the optimizer state so interrupted runs can resume with the step
//! counter and moments intact.
//!
//! Everything is deterministic given `(config.seed, worker count = any)`:
//! batch order, augmentation draws, and parameter updates replay exactly.

use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::data::{self, AugmentStream, DatasetIndex, LoadOptions, Split};
use crate::model::{self, MamAppConfig, MamAppModel, Mode, ParamStore};
use crate::tensor::{Element, NodeId, Tape, Tensor, TensorError};
use crate::{fnv1a64, Error};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("label {label} out of range [0,{num_classes}) at sample {index}")]
    LabelOutOfRange {
        index: usize,
        label: usize,
        num_classes: usize,
    },
    #[error("non-finite loss at epoch {epoch}, batch {batch}: {detail}")]
    NonFinite {
        epoch: usize,
        batch: usize,
        detail: String,
    },
    #[error("split '{0}' is empty")]
    EmptySplit(String),
    #[error("optimizer: {0}")]
    Optim(String),
    #[error("resume: {0}")]
    Resume(String),
    #[error("writing {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

/// Entropy of the smoothed target distribution — the lowest loss any model
/// can reach at the given class count and smoothing.
pub fn smoothing_floor(num_classes: usize, smoothing: f64) -> f64 {
    if smoothing == 0.0 {
        return 0.0;
    }
    let correct = 1.0 - smoothing;
    let other = smoothing / (num_classes as f64 - 1.0);
    -(correct * correct.ln() + smoothing * other.ln())
}

/// Mean label-smoothed cross-entropy over the batch, recorded on the tape.
///
/// The target distribution puts `1 − s` on the correct class and spreads `s`
/// uniformly over the other `K−1`; the loss is computed through a stable
/// log-softmax. At `s = 0` this is plain cross-entropy.
pub fn smoothed_cross_entropy<T: Element>(
    tape: &mut Tape<T>,
    logits: NodeId,
    labels: &[usize],
    smoothing: f64,
) -> Result<NodeId, Error> {
    let shape = tape.value(logits).shape().to_vec();
    if shape.len() != 2 {
        return Err(TensorError::ShapeMismatch {
            op: "smoothed_cross_entropy",
            detail: format!("logits must be [B,K], got {shape:?}"),
        }
        .into());
    }
    let (b, k) = (shape[0], shape[1]);
    if labels.len() != b {
        return Err(TensorError::ShapeMismatch {
            op: "smoothed_cross_entropy",
            detail: format!("{b} logit rows but {} labels", labels.len()),
        }
        .into());
    }
    if k < 2 {
        return Err(TrainError::Optim(format!("need ≥ 2 classes, got {k}")).into());
    }
    let correct = T::from_f64(1.0 - smoothing);
    let other = T::from_f64(smoothing / (k as f64 - 1.0));
    let mut q = vec![other; b * k];
    for (i, &label) in labels.iter().enumerate() {
        if label >= k {
            return Err(TrainError::LabelOutOfRange {
                index: i,
                label,
                num_classes: k,
            }
            .into());
        }
        q[i * k + label] = correct;
    }
    let q = tape.constant(Tensor::new(vec![b, k], q).expect("length matches"));
    let logp = tape.log_softmax_last(logits)?;
    let weighted = tape.mul(logp, q)?;
    let total = tape.sum_all(weighted)?;
    Ok(tape.scale(total, T::from_f64(-1.0 / b as f64))?)
}

/// AdamW: bias-corrected Adam moments plus decoupled weight decay.
///
/// Moments are stored per parameter slot in the same order as the
/// [`ParamStore`]; element math runs in `f64` regardless of the parameter
/// precision.
pub struct AdamW<T> {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Element> AdamW<T> {
    pub fn new(store: &ParamStore<T>, lr: f64, weight_decay: f64) -> Self {
        let zeros = |i: usize| Tensor::zeros(store.value(i).shape().to_vec());
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: (0..store.len()).map(zeros).collect(),
            v: (0..store.len()).map(&zeros).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over every parameter. A `None` gradient is treated as zero
    /// (the moments still decay and weight decay still applies).
    pub fn step(
        &mut self,
        store: &mut ParamStore<T>,
        grads: &[Option<Tensor<T>>],
    ) -> Result<(), TrainError> {
        if grads.len() != store.len() {
            return Err(TrainError::Optim(format!(
                "{} gradient slots for {} parameters",
                grads.len(),
                store.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for i in 0..store.len() {
            if let Some(g) = &grads[i] {
                if g.shape() != store.value(i).shape() {
                    return Err(TrainError::Optim(format!(
                        "gradient shape {:?} does not match parameter '{}' {:?}",
                        g.shape(),
                        store.name(i),
                        store.value(i).shape()
                    )));
                }
            }
            let decay = store.decay(i);
            let lr = self.lr;
            let wd = self.weight_decay;
            let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let theta = store.value_mut(i).data_mut();
            for j in 0..theta.len() {
                let g = grads[i]
                    .as_ref()
                    .map(|g| g.data()[j].as_f64())
                    .unwrap_or(0.0);
                let mj = b1 * m[j].as_f64() + (1.0 - b1) * g;
                let vj = b2 * v[j].as_f64() + (1.0 - b2) * g * g;
                m[j] = T::from_f64(mj);
                v[j] = T::from_f64(vj);
                let m_hat = mj / bc1;
                let v_hat = vj / bc2;
                let mut update = lr * m_hat / (v_hat.sqrt() + eps);
                if decay {
                    update += lr * wd * theta[j].as_f64();
                }
                theta[j] = T::from_f64(theta[j].as_f64() - update);
            }
        }
        Ok(())
    }

    /// Serializes step counter and moments as named tensors for a checkpoint.
    pub fn export_state(&self, store: &ParamStore<T>) -> Vec<(String, Tensor<T>)> {
        let mut out = vec![(
            "optim.step".to_string(),
            Tensor::new(vec![1], vec![T::from_f64(self.step as f64)]).expect("length"),
        )];
        for i in 0..store.len() {
            out.push((format!("optim.m.{}", store.name(i)), self.m[i].clone()));
            out.push((format!("optim.v.{}", store.name(i)), self.v[i].clone()));
        }
        out
    }

    /// Restores what [`AdamW::export_state`] wrote.
    pub fn import_state(
        &mut self,
        store: &ParamStore<T>,
        extras: &[(String, Tensor<T>)],
    ) -> Result<(), TrainError> {
        for (name, tensor) in extras {
            if name == "optim.step" {
                self.step = tensor.data()[0].as_f64() as u64;
                continue;
            }
            let (slot, which) = if let Some(param) = name.strip_prefix("optim.m.") {
                (param, &mut self.m)
            } else if let Some(param) = name.strip_prefix("optim.v.") {
                (param, &mut self.v)
            } else {
                continue;
            };
            let idx = store
                .index_of(slot)
                .ok_or_else(|| TrainError::Optim(format!("moment for unknown parameter '{slot}'")))?;
            if tensor.shape() != store.value(idx).shape() {
                return Err(TrainError::Optim(format!(
                    "moment shape {:?} does not match parameter '{slot}' {:?}",
                    tensor.shape(),
                    store.value(idx).shape()
                )));
            }
            which[idx] = tensor.clone();
        }
        Ok(())
    }
}

/// One completed epoch in the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based epoch number.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub seconds: f64,
}

/// Where a finished (or degenerate) run left its artifacts.
#[derive(Clone, Debug)]
pub struct TrainArtifacts {
    pub log: Vec<EpochRecord>,
    /// `None` when zero epochs ran.
    pub best_epoch: Option<usize>,
    pub best_val_acc: f64,
    pub best_val_loss: f64,
    pub best_path: PathBuf,
    pub last_path: PathBuf,
    pub log_path: PathBuf,
    pub summary_path: PathBuf,
}

/// Knobs that are per-invocation rather than part of the model config.
#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    pub workers: usize,
    /// Continue from this checkpoint (restores parameters, optimizer
    /// moments, step counter, and the completed-epoch count).
    pub resume: Option<PathBuf>,
}

/// Mean loss and top-1 accuracy of `model` over one split, eval mode.
pub fn evaluate_epoch(
    model: &mut MamAppModel<f32>,
    index: &DatasetIndex,
    split: Split,
    config: &MamAppConfig,
    workers: usize,
) -> Result<(f64, f64), Error> {
    let batches = data::make_batches(index, split, config.batch_size, config.seed, 0);
    if batches.is_empty() {
        return Err(TrainError::EmptySplit(split.as_str().to_string()).into());
    }
    let normalize = normalize_of(config);
    let opts = LoadOptions {
        img_size: config.img_size,
        augment: None,
        normalize: normalize
            .as_ref()
            .map(|(mean, std)| (mean, std)),
        workers,
    };
    let mut total_loss = 0.0;
    let mut correct = 0usize;
    let mut n = 0usize;
    for batch in &batches {
        let batch = data::load_batch(index, batch, &opts)?;
        let mut tape = Tape::new();
        let pass = model.forward(&mut tape, &batch.images, Mode::Eval)?;
        let loss = smoothed_cross_entropy(&mut tape, pass.logits, &batch.labels, config.label_smoothing)?;
        let b = batch.labels.len();
        total_loss += tape.value(loss).item().as_f64() * b as f64;
        let logits = tape.value(pass.logits);
        for (row, &label) in batch.labels.iter().enumerate() {
            if argmax(&logits.data()[row * config.num_classes..(row + 1) * config.num_classes])
                == label
            {
                correct += 1;
            }
        }
        n += b;
    }
    Ok((total_loss / n as f64, correct as f64 / n as f64))
}

/// First index of the maximum value (ties go to the earlier class).
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn normalize_of(config: &MamAppConfig) -> Option<([f64; 3], [f64; 3])> {
    match (config.normalize_mean, config.normalize_std) {
        (Some(mean), Some(std)) => Some((mean, std)),
        _ => None,
    }
}

/// FNV-1a hash of the JSON-serialized config, hex-encoded. Stamped into the
/// run summary so logs can be matched to the exact configuration.
pub fn config_hash(config: &MamAppConfig) -> String {
    let json = serde_json::to_string(config).expect("config serializes");
    format!("{:016x}", fnv1a64(json.as_bytes()))
}

/// Runs the full training loop and writes `trainlog.csv`, `summary.json`,
/// `best.ckpt`, and `last.ckpt` under `out_dir`.
pub fn train(
    config: &MamAppConfig,
    index: &DatasetIndex,
    out_dir: &Path,
    opts: &TrainOptions,
) -> Result<TrainArtifacts, Error> {
    config.validate().map_err(Error::Model)?;
    if index.assignment.is_none() {
        return Err(TrainError::EmptySplit("train (split not assigned)".to_string()).into());
    }
    if index.num_classes() != config.num_classes {
        return Err(model::ModelError::Config(format!(
            "config expects {} classes but the dataset has {} ({:?})",
            config.num_classes,
            index.num_classes(),
            index.classes
        ))
        .into());
    }
    std::fs::create_dir_all(out_dir).map_err(|e| TrainError::Io {
        path: out_dir.to_path_buf(),
        source: e,
    })?;

    let mut config = config.clone();
    if config.class_names.is_none() {
        config.class_names = Some(index.classes.clone());
    }

    let (mut model, mut optim, start_epoch) = match &opts.resume {
        None => {
            let model = model::build::<f32>(&config, config.seed)?;
            let optim = AdamW::new(model.params(), config.lr, config.weight_decay);
            (model, optim, 0usize)
        }
        Some(path) => {
            let (model, extras) = model::load_checkpoint::<f32>(path)?;
            let mut stored = model.config().clone();
            let mut target = config.clone();
            for cfg in [&mut stored, &mut target] {
                cfg.epochs = 0;
                cfg.early_stop_val_acc = None;
                cfg.early_stop_train_loss = None;
            }
            if stored != target {
                return Err(TrainError::Resume(format!(
                    "checkpoint {} was trained with a different configuration",
                    path.display()
                ))
                .into());
            }
            let mut optim = AdamW::new(model.params(), config.lr, config.weight_decay);
            optim.import_state(model.params(), &extras)?;
            let epochs_done = extras
                .iter()
                .find(|(name, _)| name == "train.epochs_done")
                .map(|(_, t)| t.data()[0] as usize)
                .unwrap_or(0);
            (model, optim, epochs_done)
        }
    };

    let best_path = out_dir.join("best.ckpt");
    let last_path = out_dir.join("last.ckpt");
    let log_path = out_dir.join("trainlog.csv");
    let summary_path = out_dir.join("summary.json");

    let normalize = normalize_of(&config);
    let run_start = Instant::now();
    let mut log: Vec<EpochRecord> = Vec::new();
    let mut best_epoch: Option<usize> = None;
    let mut best_val_acc = f64::NEG_INFINITY;
    let mut best_val_loss = f64::INFINITY;

    write_log(&log_path, &log)?;

    for epoch in start_epoch..config.epochs {
        let epoch_start = Instant::now();
        let batches = data::make_batches(index, Split::Train, config.batch_size, config.seed, epoch as u64);
        if batches.is_empty() {
            return Err(TrainError::EmptySplit("train".to_string()).into());
        }
        let load_opts = LoadOptions {
            img_size: config.img_size,
            augment: config.augment.then_some(AugmentStream {
                seed: config.seed,
                epoch: epoch as u64,
            }),
            normalize: normalize.as_ref().map(|(mean, std)| (mean, std)),
            workers: opts.workers,
        };

        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for (batch_idx, batch_indices) in batches.iter().enumerate() {
            let batch = data::load_batch(index, batch_indices, &load_opts)?;
            let mut step = || -> Result<f64, Error> {
                let mut tape = Tape::new();
                let pass = model.forward(&mut tape, &batch.images, Mode::Train)?;
                let loss = smoothed_cross_entropy(
                    &mut tape,
                    pass.logits,
                    &batch.labels,
                    config.label_smoothing,
                )?;
                let loss_value = tape.value(loss).item().as_f64();
                if !loss_value.is_finite() {
                    return Err(TensorError::NonFinite {
                        op: "loss",
                        detail: format!("loss is {loss_value}"),
                    }
                    .into());
                }
                let grads = tape.backward(loss)?;
                let grad_vec: Vec<Option<Tensor<f32>>> = (0..model.params().len())
                    .map(|i| grads.grad(pass.param_node(i)).cloned())
                    .collect();
                optim.step(model.params_mut(), &grad_vec).map_err(Error::Train)?;
                Ok(loss_value)
            };
            let loss_value = step().map_err(|e| tag_non_finite(e, epoch, batch_idx))?;
            loss_sum += loss_value * batch.labels.len() as f64;
            seen += batch.labels.len();
        }
        let train_loss = loss_sum / seen as f64;

        let (val_loss, val_acc) = evaluate_epoch(&mut model, index, Split::Val, &config, opts.workers)?;
        let record = EpochRecord {
            epoch: epoch + 1,
            train_loss,
            val_loss,
            val_acc,
            seconds: epoch_start.elapsed().as_secs_f64(),
        };
        log.push(record);
        write_log(&log_path, &log)?;

        let improved = val_acc > best_val_acc
            || (val_acc == best_val_acc && val_loss < best_val_loss);
        if improved {
            best_val_acc = val_acc;
            best_val_loss = val_loss;
            best_epoch = Some(epoch + 1);
            model::save_checkpoint(&model, &best_path, &[])?;
        }
        let mut extras = optim.export_state(model.params());
        extras.push((
            "train.epochs_done".to_string(),
            Tensor::new(vec![1], vec![(epoch + 1) as f32]).expect("length"),
        ));
        model::save_checkpoint(&model, &last_path, &extras)?;

        if let Some(target) = config.early_stop_val_acc {
            if val_acc >= target {
                break;
            }
        }
        if let Some(target) = config.early_stop_train_loss {
            if train_loss <= target {
                break;
            }
        }
    }

    if log.is_empty() && opts.resume.is_none() {
        // Zero-epoch run still leaves a loadable model behind.
        model::save_checkpoint(&model, &last_path, &[])?;
    }

    let summary = serde_json::json!({
        "seed": config.seed,
        "config_hash": config_hash(&config),
        "epochs_run": log.len(),
        "best_epoch": best_epoch,
        "best_val_acc": if best_epoch.is_some() { Some(best_val_acc) } else { None },
        "best_val_loss": if best_epoch.is_some() { Some(best_val_loss) } else { None },
        "total_seconds": run_start.elapsed().as_secs_f64(),
    });
    let summary_text = serde_json::to_string_pretty(&summary).expect("summary serializes");
    std::fs::write(&summary_path, summary_text).map_err(|e| TrainError::Io {
        path: summary_path.clone(),
        source: e,
    })?;

    Ok(TrainArtifacts {
        log,
        best_epoch,
        best_val_acc,
        best_val_loss,
        best_path,
        last_path,
        log_path,
        summary_path,
    })
}

/// Rewrites the whole log; called after every epoch so a crash loses at most
/// the in-flight epoch.
fn write_log(path: &Path, log: &[EpochRecord]) -> Result<(), TrainError> {
    let mut text = String::from("epoch,train_loss,val_loss,val_acc,seconds\n");
    for r in log {
        text.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.3}\n",
            r.epoch, r.train_loss, r.val_loss, r.val_acc, r.seconds
        ));
    }
    std::fs::write(path, text).map_err(|e| TrainError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Rewraps a non-finite tensor failure with its training coordinates.
fn tag_non_finite(e: Error, epoch: usize, batch: usize) -> Error {
    if e.is_numeric() {
        TrainError::NonFinite {
            epoch,
            batch,
            detail: e.to_string(),
        }
        .into()
    } else {
        e
    }
}
