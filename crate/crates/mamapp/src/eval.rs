//! Confusion-matrix metrics, penultimate-feature export, and a small exact
//! PCA for projecting those features to 2–3 components.
//!
//! Metric conventions, spelled out because they differ:
//!
//! - `accuracy` is trace/total — the fraction of correctly labeled samples.
//! - `micro` precision/recall/F1 aggregate TP/FP/FN over classes before
//!   dividing. For single-label classification ΣFP = ΣFN = total − ΣTP, so
//!   micro precision = micro recall = micro F1 = accuracy, always.
//! - `macro` metrics are unweighted means of the per-class values, so
//!   minority classes weigh as much as majority ones.
//! - `micro_jaccard` is ΣTP / Σ(TP+FP+FN). It counts every error twice
//!   (once as FP, once as FN) and therefore sits below accuracy whenever any
//!   error exists; it is reported alongside accuracy rather than silently
//!   substituted for it.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{self, DatasetIndex, LoadOptions, Split};
use crate::model::{MamAppConfig, MamAppModel};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("class {value} out of range [0,{num_classes}) at sample {index}")]
    OutOfRange {
        index: usize,
        value: usize,
        num_classes: usize,
    },
    #[error("nothing to evaluate: {0}")]
    Empty(String),
    #[error("numerical failure: {0}")]
    Numeric(String),
    #[error("writing {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

/// K×K counts; rows are the true class, columns the predicted class.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: Vec<String>,
    counts: Vec<usize>,
}

impl ConfusionMatrix {
    /// Builds the matrix from parallel truth/prediction vectors.
    pub fn from_pairs(
        truth: &[usize],
        pred: &[usize],
        classes: Vec<String>,
    ) -> Result<Self, EvalError> {
        let k = classes.len();
        if truth.len() != pred.len() {
            return Err(EvalError::Empty(format!(
                "{} truth labels vs {} predictions",
                truth.len(),
                pred.len()
            )));
        }
        let mut counts = vec![0usize; k * k];
        for (i, (&t, &p)) in truth.iter().zip(pred).enumerate() {
            for value in [t, p] {
                if value >= k {
                    return Err(EvalError::OutOfRange {
                        index: i,
                        value,
                        num_classes: k,
                    });
                }
            }
            counts[t * k + p] += 1;
        }
        Ok(ConfusionMatrix { classes, counts })
    }

    pub fn from_counts(classes: Vec<String>, counts: Vec<usize>) -> Result<Self, EvalError> {
        let k = classes.len();
        if counts.len() != k * k {
            return Err(EvalError::Empty(format!(
                "{} cells for a {k}×{k} matrix",
                counts.len()
            )));
        }
        Ok(ConfusionMatrix { classes, counts })
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn count(&self, truth: usize, pred: usize) -> usize {
        self.counts[truth * self.classes.len() + pred]
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> usize {
        (0..self.classes.len()).map(|i| self.count(i, i)).sum()
    }

    fn row_sum(&self, i: usize) -> usize {
        (0..self.classes.len()).map(|p| self.count(i, p)).sum()
    }

    fn col_sum(&self, i: usize) -> usize {
        (0..self.classes.len()).map(|t| self.count(t, i)).sum()
    }

    pub fn rows(&self) -> Vec<Vec<usize>> {
        let k = self.classes.len();
        (0..k).map(|t| self.counts[t * k..(t + 1) * k].to_vec()).collect()
    }
}

/// Precision/recall/F1 bundle.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricTriple {
    pub p: f64,
    pub r: f64,
    pub f1: f64,
}

/// One class's metrics; a `false` flag means the ratio was 0/0 and the value
/// was pinned to 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerClassMetrics {
    pub class: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub precision_defined: bool,
    pub recall_defined: bool,
    pub f1_defined: bool,
}

/// Full metric report; serializes to the run's `metrics.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub micro: MetricTriple,
    #[serde(rename = "macro")]
    pub macro_: MetricTriple,
    pub per_class: Vec<PerClassMetrics>,
    pub confusion: Vec<Vec<usize>>,
    /// ΣTP / Σ(TP+FP+FN); below `accuracy` whenever any error exists.
    pub micro_jaccard: f64,
    pub classes: Vec<String>,
}

fn ratio(num: f64, den: f64) -> (f64, bool) {
    if den == 0.0 {
        (0.0, false)
    } else {
        (num / den, true)
    }
}

/// Harmonic mean 2pr/(p+r). Equal inputs return that value directly so the
/// result is bit-exact (the round trip through 2p²/2p can lose an ulp).
fn harmonic(p: f64, r: f64) -> f64 {
    if p == r {
        p
    } else if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Computes every metric from a confusion matrix.
pub fn metrics(cm: &ConfusionMatrix) -> Result<EvalReport, EvalError> {
    let total = cm.total();
    if total == 0 {
        return Err(EvalError::Empty(
            "confusion matrix counts no samples".to_string(),
        ));
    }
    let k = cm.num_classes();
    let mut per_class = Vec::with_capacity(k);
    let (mut tp_sum, mut fp_sum, mut fn_sum) = (0usize, 0usize, 0usize);
    let (mut macro_p, mut macro_r, mut macro_f1) = (0.0, 0.0, 0.0);
    for i in 0..k {
        let tp = cm.count(i, i);
        let fp = cm.col_sum(i) - tp;
        let fn_ = cm.row_sum(i) - tp;
        tp_sum += tp;
        fp_sum += fp;
        fn_sum += fn_;
        let (p, p_def) = ratio(tp as f64, (tp + fp) as f64);
        let (r, r_def) = ratio(tp as f64, (tp + fn_) as f64);
        let (f1, f1_def) = if p + r == 0.0 {
            (0.0, false)
        } else {
            (harmonic(p, r), true)
        };
        macro_p += p;
        macro_r += r;
        macro_f1 += f1;
        per_class.push(PerClassMetrics {
            class: cm.classes()[i].clone(),
            precision: p,
            recall: r,
            f1,
            precision_defined: p_def,
            recall_defined: r_def,
            f1_defined: f1_def,
        });
    }
    let micro_p = tp_sum as f64 / (tp_sum + fp_sum) as f64;
    let micro_r = tp_sum as f64 / (tp_sum + fn_sum) as f64;
    let micro_f1 = harmonic(micro_p, micro_r);
    Ok(EvalReport {
        accuracy: cm.trace() as f64 / total as f64,
        micro: MetricTriple {
            p: micro_p,
            r: micro_r,
            f1: micro_f1,
        },
        macro_: MetricTriple {
            p: macro_p / k as f64,
            r: macro_r / k as f64,
            f1: macro_f1 / k as f64,
        },
        per_class,
        confusion: cm.rows(),
        micro_jaccard: tp_sum as f64 / (tp_sum + fp_sum + fn_sum) as f64,
        classes: cm.classes().to_vec(),
    })
}

/// Runs the model over one split and returns its confusion matrix.
///
/// Batches follow ascending dataset order (no shuffle, no augmentation), so
/// repeated invocations with the same checkpoint are identical.
pub fn confusion_over_split(
    model: &mut MamAppModel<f32>,
    index: &DatasetIndex,
    split: Split,
    config: &MamAppConfig,
    workers: usize,
) -> Result<ConfusionMatrix, crate::Error> {
    let mut truth = Vec::new();
    let mut pred = Vec::new();
    for_each_eval_batch(model, index, split, config, workers, |batch, _, logits| {
        let k = logits.dim(1);
        for (row, &label) in batch.labels.iter().enumerate() {
            truth.push(label);
            pred.push(crate::train::argmax(&logits.data()[row * k..(row + 1) * k]));
        }
        Ok(())
    })?;
    Ok(ConfusionMatrix::from_pairs(
        &truth,
        &pred,
        index.classes.clone(),
    )?)
}

/// Writes `path,class_name,f0..f{D-1}` rows for every sample of the split.
pub fn export_features(
    model: &mut MamAppModel<f32>,
    index: &DatasetIndex,
    split: Split,
    config: &MamAppConfig,
    out_path: &Path,
    workers: usize,
) -> Result<usize, crate::Error> {
    let io_err = |source: std::io::Error| EvalError::Io {
        path: out_path.to_path_buf(),
        source,
    };
    let mut w =
        csv::Writer::from_path(out_path).map_err(|e| io_err(std::io::Error::other(e)))?;
    let d = config.d_model;
    let mut header = vec!["path".to_string(), "class_name".to_string()];
    header.extend((0..d).map(|i| format!("f{i}")));
    w.write_record(&header)
        .map_err(|e| io_err(std::io::Error::other(e)))?;

    let mut rows = 0usize;
    for_each_eval_batch(model, index, split, config, workers, |batch, features, _| {
        for (row, &sample_idx) in batch.indices.iter().enumerate() {
            let sample = &index.samples[sample_idx];
            let mut record = vec![
                sample.rel_path.to_string_lossy().to_string(),
                index.classes[sample.class_id].clone(),
            ];
            record.extend(features.data()[row * d..(row + 1) * d].iter().map(|v| v.to_string()));
            w.write_record(&record)
                .map_err(|e| io_err(std::io::Error::other(e)))?;
            rows += 1;
        }
        Ok(())
    })?;
    w.flush().map_err(io_err)?;
    Ok(rows)
}

/// Shared eval-mode loop: loads fixed-order batches, runs the model, and
/// hands (batch, features, logits) to the callback.
fn for_each_eval_batch(
    model: &mut MamAppModel<f32>,
    index: &DatasetIndex,
    split: Split,
    config: &MamAppConfig,
    workers: usize,
    mut visit: impl FnMut(&data::Batch, &Tensor<f32>, &Tensor<f32>) -> Result<(), crate::Error>,
) -> Result<(), crate::Error> {
    let indices = index.split_indices(split);
    if indices.is_empty() {
        return Err(EvalError::Empty(format!("split '{}' has no samples", split.as_str())).into());
    }
    let normalize = match (config.normalize_mean, config.normalize_std) {
        (Some(mean), Some(std)) => Some((mean, std)),
        _ => None,
    };
    let opts = LoadOptions {
        img_size: config.img_size,
        augment: None,
        normalize: normalize.as_ref().map(|(mean, std)| (mean, std)),
        workers,
    };
    for chunk in indices.chunks(config.batch_size) {
        let batch = data::load_batch(index, chunk, &opts)?;
        let mut tape = crate::tensor::Tape::new();
        let pass = model.forward(&mut tape, &batch.images, crate::model::Mode::Eval)?;
        let features = tape.value(pass.features).clone();
        let logits = tape.value(pass.logits).clone();
        visit(&batch, &features, &logits)?;
    }
    Ok(())
}

/// Principal components of a feature matrix, with projections.
#[derive(Clone, Debug)]
pub struct PCAProjection {
    /// `[D, m]`; column j is the j-th component, unit length, sign fixed so
    /// its largest-magnitude coordinate is positive.
    pub components: Tensor<f64>,
    /// Top-m eigenvalues of the sample covariance, descending.
    pub eigenvalues: Vec<f64>,
    /// `eigenvalue / total variance` per kept component.
    pub explained: Vec<f64>,
    /// `[M, m]` centered data times components.
    pub projected: Tensor<f64>,
    /// Column means used for centering, length D.
    pub mean: Vec<f64>,
}

/// PCA via eigendecomposition of the sample covariance.
///
/// Centering uses column means; the covariance divides by `M−1`. The
/// decomposition is a cyclic Jacobi iteration — exact for symmetric
/// matrices, no rank assumptions, so rank-deficient inputs simply report
/// zero eigenvalues for the flat directions.
pub fn pca(features: &Tensor<f64>, m: usize) -> Result<PCAProjection, EvalError> {
    if features.rank() != 2 {
        return Err(EvalError::Empty(format!(
            "feature matrix must be [M,D], got {:?}",
            features.shape()
        )));
    }
    let (rows, d) = (features.dim(0), features.dim(1));
    if m == 0 || m > d {
        return Err(EvalError::Empty(format!(
            "cannot keep {m} of {d} components"
        )));
    }
    if rows <= m {
        return Err(EvalError::Empty(format!(
            "{rows} samples cannot support {m} components"
        )));
    }

    let x = features.data();
    let mut mean = vec![0.0f64; d];
    for row in 0..rows {
        for j in 0..d {
            mean[j] += x[row * d + j];
        }
    }
    for v in &mut mean {
        *v /= rows as f64;
    }
    let mut centered = vec![0.0f64; rows * d];
    for row in 0..rows {
        for j in 0..d {
            centered[row * d + j] = x[row * d + j] - mean[j];
        }
    }

    // Sample covariance, upper triangle mirrored.
    let mut cov = vec![0.0f64; d * d];
    for i in 0..d {
        for j in i..d {
            let mut acc = 0.0;
            for row in 0..rows {
                acc += centered[row * d + i] * centered[row * d + j];
            }
            let c = acc / (rows as f64 - 1.0);
            cov[i * d + j] = c;
            cov[j * d + i] = c;
        }
    }

    let (eigvals, eigvecs) = jacobi_eigen(cov, d)?;
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eigvals[b].partial_cmp(&eigvals[a]).expect("finite eigenvalues"));

    let total_variance: f64 = eigvals.iter().map(|&v| v.max(0.0)).sum();
    let mut components = vec![0.0f64; d * m];
    let mut kept_vals = Vec::with_capacity(m);
    let mut explained = Vec::with_capacity(m);
    for (out_col, &src) in order.iter().take(m).enumerate() {
        let val = eigvals[src].max(0.0);
        kept_vals.push(val);
        explained.push(if total_variance > 0.0 {
            val / total_variance
        } else {
            0.0
        });
        // Column src of eigvecs → column out_col of components.
        let mut col: Vec<f64> = (0..d).map(|i| eigvecs[i * d + src]).collect();
        let largest = col
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().partial_cmp(&b.1.abs()).expect("finite"))
            .map(|(i, _)| i)
            .unwrap_or(0);
        if col[largest] < 0.0 {
            for v in &mut col {
                *v = -*v;
            }
        }
        for i in 0..d {
            components[i * m + out_col] = col[i];
        }
    }

    let mut projected = vec![0.0f64; rows * m];
    for row in 0..rows {
        for c in 0..m {
            let mut acc = 0.0;
            for j in 0..d {
                acc += centered[row * d + j] * components[j * m + c];
            }
            projected[row * m + c] = acc;
        }
    }

    Ok(PCAProjection {
        components: Tensor::new(vec![d, m], components).expect("length"),
        eigenvalues: kept_vals,
        explained,
        projected: Tensor::new(vec![rows, m], projected).expect("length"),
        mean,
    })
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix (row-major).
/// Returns (eigenvalues, eigenvector matrix with eigenvector j in column j).
fn jacobi_eigen(mut a: Vec<f64>, n: usize) -> Result<(Vec<f64>, Vec<f64>), EvalError> {
    let mut v = vec![0.0f64; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let scale: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(1.0);
    for _sweep in 0..100 {
        let mut off = 0.0f64;
        for p in 0..n {
            for q in (p + 1)..n {
                off += a[p * n + q] * a[p * n + q];
            }
        }
        if off.sqrt() <= 1e-13 * scale {
            let vals = (0..n).map(|i| a[i * n + i]).collect();
            return Ok((vals, v));
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for i in 0..n {
                    let aip = a[i * n + p];
                    let aiq = a[i * n + q];
                    a[i * n + p] = c * aip - s * aiq;
                    a[i * n + q] = s * aip + c * aiq;
                }
                for j in 0..n {
                    let apj = a[p * n + j];
                    let aqj = a[q * n + j];
                    a[p * n + j] = c * apj - s * aqj;
                    a[q * n + j] = s * apj + c * aqj;
                }
                for i in 0..n {
                    let vip = v[i * n + p];
                    let viq = v[i * n + q];
                    v[i * n + p] = c * vip - s * viq;
                    v[i * n + q] = s * vip + c * viq;
                }
            }
        }
    }
    Err(EvalError::Numeric(
        "eigendecomposition did not converge in 100 sweeps".to_string(),
    ))
}

/// Writes `path,class_name,pc1..pcm` plus a sidecar JSON with the
/// explained-variance ratios next to it (same stem, `.json` extension).
pub fn write_pca_outputs(
    projection: &PCAProjection,
    labels: &[(String, String)],
    out_csv: &Path,
) -> Result<PathBuf, EvalError> {
    let m = projection.projected.dim(1);
    let rows = projection.projected.dim(0);
    if labels.len() != rows {
        return Err(EvalError::Empty(format!(
            "{} labels for {rows} projected rows",
            labels.len()
        )));
    }
    let io_err = |source: std::io::Error| EvalError::Io {
        path: out_csv.to_path_buf(),
        source,
    };
    let mut w = csv::Writer::from_path(out_csv).map_err(|e| io_err(std::io::Error::other(e)))?;
    let mut header = vec!["path".to_string(), "class_name".to_string()];
    header.extend((1..=m).map(|i| format!("pc{i}")));
    w.write_record(&header)
        .map_err(|e| io_err(std::io::Error::other(e)))?;
    for (row, (path, class)) in labels.iter().enumerate() {
        let mut record = vec![path.clone(), class.clone()];
        record.extend(
            projection.projected.data()[row * m..(row + 1) * m]
                .iter()
                .map(|v| v.to_string()),
        );
        w.write_record(&record)
            .map_err(|e| io_err(std::io::Error::other(e)))?;
    }
    w.flush().map_err(io_err)?;

    let sidecar = out_csv.with_extension("json");
    let body = serde_json::json!({
        "explained_variance_ratios": projection.explained,
        "eigenvalues": projection.eigenvalues,
    });
    std::fs::write(&sidecar, serde_json::to_string_pretty(&body).expect("serializes")).map_err(
        |source| EvalError::Io {
            path: sidecar.clone(),
            source,
        },
    )?;
    Ok(sidecar)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn names(k: usize) -> Vec<String> {
        (0..k).map(|i| format!("c{i}")).collect()
    }

    #[test]
    fn counting_matches_the_hand_example() {
        let cm = ConfusionMatrix::from_pairs(&[0, 0, 1, 1], &[0, 1, 1, 1], names(2)).unwrap();
        assert_eq!(cm.rows(), vec![vec![1, 1], vec![0, 2]]);
        assert_eq!(cm.total(), 4);
        assert_eq!(cm.trace(), 3);
    }

    #[test]
    fn perfect_predictions_are_diagonal() {
        let truth = [0, 1, 2, 1, 0, 2, 2];
        let cm = ConfusionMatrix::from_pairs(&truth, &truth, names(3)).unwrap();
        for t in 0..3 {
            for p in 0..3 {
                if t != p {
                    assert_eq!(cm.count(t, p), 0);
                }
            }
        }
        assert_eq!(cm.trace(), truth.len());
    }

    #[test]
    fn out_of_range_entries_name_the_sample() {
        let err = ConfusionMatrix::from_pairs(&[0, 1], &[0, 5], names(2)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("class 5") && msg.contains("sample 1"), "{msg}");
    }

    #[test]
    fn hand_example_metrics_are_exact() {
        let cm = ConfusionMatrix::from_counts(names(2), vec![1, 1, 0, 2]).unwrap();
        let report = metrics(&cm).unwrap();
        assert_eq!(report.accuracy, 0.75);
        assert_eq!(report.micro.p, 0.75);
        assert_eq!(report.micro.r, 0.75);
        assert_eq!(report.micro.f1, 0.75);
        assert!((report.macro_.r - 0.75).abs() < 1e-12);
        assert!((report.macro_.p - 5.0 / 6.0).abs() < 1e-12);
        // ΣTP=3, ΣFP=1, ΣFN=1 → 3/5.
        assert!((report.micro_jaccard - 0.6).abs() < 1e-12);
    }

    #[test]
    fn perfect_diagonal_scores_ones_everywhere() {
        let cm = ConfusionMatrix::from_counts(names(3), vec![4, 0, 0, 0, 2, 0, 0, 0, 5]).unwrap();
        let report = metrics(&cm).unwrap();
        assert_eq!(report.accuracy, 1.0);
        assert_eq!(report.micro.f1, 1.0);
        assert_eq!(report.macro_.f1, 1.0);
        assert_eq!(report.micro_jaccard, 1.0);
        assert!(report.per_class.iter().all(|c| c.f1 == 1.0 && c.f1_defined));
    }

    #[test]
    fn absent_class_pins_to_zero_with_flags() {
        // Class 2 never occurs and is never predicted: 0/0 everywhere.
        let cm =
            ConfusionMatrix::from_counts(names(3), vec![3, 0, 0, 1, 2, 0, 0, 0, 0]).unwrap();
        let report = metrics(&cm).unwrap();
        let absent = &report.per_class[2];
        assert_eq!((absent.precision, absent.recall, absent.f1), (0.0, 0.0, 0.0));
        assert!(!absent.precision_defined && !absent.recall_defined && !absent.f1_defined);
        assert!(report.per_class[0].precision_defined);
    }

    #[test]
    fn all_zero_matrix_is_an_error() {
        let cm = ConfusionMatrix::from_counts(names(2), vec![0; 4]).unwrap();
        assert!(matches!(metrics(&cm).unwrap_err(), EvalError::Empty(_)));
    }

    #[test]
    fn report_serializes_with_the_documented_keys() {
        let cm = ConfusionMatrix::from_counts(names(2), vec![1, 1, 0, 2]).unwrap();
        let report = metrics(&cm).unwrap();
        let value: serde_json::Value =
            serde_json::from_str(&serde_json::to_string(&report).unwrap()).unwrap();
        for key in ["accuracy", "micro", "macro", "per_class", "confusion", "micro_jaccard"] {
            assert!(value.get(key).is_some(), "missing key {key}");
        }
        assert!(value["macro"]["p"].is_f64() && value["micro"]["f1"].is_f64());
        assert_eq!(value["confusion"][0][1], 1);
        assert_eq!(value["per_class"][0]["class"], "c0");
    }

    proptest! {
        #[test]
        fn micro_metrics_equal_accuracy_for_any_matrix(
            k in 2usize..6,
            cells in proptest::collection::vec(0usize..40, 36),
        ) {
            let counts: Vec<usize> = cells[..k * k].to_vec();
            prop_assume!(counts.iter().sum::<usize>() > 0);
            let cm = ConfusionMatrix::from_counts(names(k), counts).unwrap();
            let report = metrics(&cm).unwrap();
            prop_assert_eq!(report.micro.p, report.accuracy);
            prop_assert_eq!(report.micro.r, report.accuracy);
            prop_assert_eq!(report.micro.f1, report.accuracy);
        }
    }

    #[test]
    fn macro_metrics_survive_class_relabeling() {
        let counts = vec![5, 2, 1, 0, 7, 3, 2, 0, 9];
        let cm = ConfusionMatrix::from_counts(names(3), counts.clone()).unwrap();
        let report = metrics(&cm).unwrap();
        // Relabel classes by the permutation (0,1,2) → (2,0,1).
        let perm = [2usize, 0, 1];
        let mut permuted = vec![0usize; 9];
        for t in 0..3 {
            for p in 0..3 {
                permuted[perm[t] * 3 + perm[p]] = counts[t * 3 + p];
            }
        }
        let cm2 = ConfusionMatrix::from_counts(names(3), permuted).unwrap();
        let report2 = metrics(&cm2).unwrap();
        assert!((report.macro_.p - report2.macro_.p).abs() < 1e-12);
        assert!((report.macro_.r - report2.macro_.r).abs() < 1e-12);
        assert!((report.macro_.f1 - report2.macro_.f1).abs() < 1e-12);
        assert_eq!(report.accuracy, report2.accuracy);
    }

    fn random_matrix(rows: usize, d: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::new(vec![rows, d], data).unwrap()
    }

    #[test]
    fn data_on_a_line_is_rank_one() {
        let d = 8;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let direction: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let rows = 50;
        let mut data = vec![0.0; rows * d];
        let mut ts = Vec::new();
        for row in 0..rows {
            let t: f64 = rng.random_range(-3.0..3.0);
            ts.push(t);
            for j in 0..d {
                data[row * d + j] = t * direction[j] + 0.7;
            }
        }
        let features = Tensor::new(vec![rows, d], data).unwrap();
        let proj = pca(&features, 2).unwrap();
        assert!(proj.explained[0] > 0.999, "{:?}", proj.explained);
        // pc1 recovers the parameter up to sign and scale.
        let pc1: Vec<f64> = (0..rows).map(|r| proj.projected.data()[r * 2]).collect();
        let corr = correlation(&pc1, &ts);
        assert!(corr.abs() > 0.999, "correlation {corr}");
    }

    fn correlation(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let ma = a.iter().sum::<f64>() / n;
        let mb = b.iter().sum::<f64>() / n;
        let mut num = 0.0;
        let mut va = 0.0;
        let mut vb = 0.0;
        for (&x, &y) in a.iter().zip(b) {
            num += (x - ma) * (y - mb);
            va += (x - ma) * (x - ma);
            vb += (y - mb) * (y - mb);
        }
        num / (va.sqrt() * vb.sqrt())
    }

    #[test]
    fn isotropic_noise_spreads_variance_evenly() {
        let d = 8;
        let features = random_matrix(4000, d, 11);
        let proj = pca(&features, 3).unwrap();
        for &ratio in &proj.explained {
            assert!(
                (ratio - 1.0 / d as f64).abs() < 0.03,
                "ratio {ratio} far from 1/{d}"
            );
        }
    }

    #[test]
    fn keeping_every_component_reconstructs_the_centered_data() {
        let d = 6;
        let rows = 40;
        let features = random_matrix(rows, d, 3);
        let proj = pca(&features, d).unwrap();
        let comp = proj.components.data();
        for row in 0..rows {
            for j in 0..d {
                let centered = features.data()[row * d + j] - proj.mean[j];
                let mut rec = 0.0;
                for c in 0..d {
                    rec += proj.projected.data()[row * d + c] * comp[j * d + c];
                }
                assert!((rec - centered).abs() < 1e-5, "row {row} col {j}");
            }
        }
    }

    #[test]
    fn components_are_orthonormal() {
        let features = random_matrix(100, 8, 9);
        let proj = pca(&features, 3).unwrap();
        let comp = proj.components.data();
        for a in 0..3 {
            for b in 0..3 {
                let dot: f64 = (0..8).map(|i| comp[i * 3 + a] * comp[i * 3 + b]).sum();
                let expected = if a == b { 1.0 } else { 0.0 };
                assert!((dot - expected).abs() < 1e-6, "({a},{b}) dot {dot}");
            }
        }
    }

    #[test]
    fn explained_ratios_are_sorted_and_bounded() {
        let features = random_matrix(200, 10, 21);
        let proj = pca(&features, 3).unwrap();
        assert!(proj.explained.windows(2).all(|w| w[0] >= w[1]));
        assert!(proj.explained.iter().sum::<f64>() <= 1.0 + 1e-12);
    }

    #[test]
    fn row_order_does_not_change_the_projection_geometry() {
        let d = 5;
        let rows = 30;
        let features = random_matrix(rows, d, 17);
        let proj = pca(&features, 2).unwrap();
        // Reverse the rows.
        let mut reversed = vec![0.0; rows * d];
        for row in 0..rows {
            reversed[(rows - 1 - row) * d..(rows - row) * d]
                .copy_from_slice(&features.data()[row * d..(row + 1) * d]);
        }
        let proj_rev = pca(&Tensor::new(vec![rows, d], reversed).unwrap(), 2).unwrap();
        for (a, b) in proj.components.data().iter().zip(proj_rev.components.data()) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
        for row in 0..rows {
            for c in 0..2 {
                let a = proj.projected.data()[row * 2 + c];
                let b = proj_rev.projected.data()[(rows - 1 - row) * 2 + c];
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn rank_deficient_input_reports_zero_tail_eigenvalues() {
        // 2-D structure embedded in 6-D: eigenvalues 3..6 are ~0.
        let rows = 30;
        let d = 6;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut data = vec![0.0; rows * d];
        for row in 0..rows {
            let (a, b): (f64, f64) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            data[row * d] = a;
            data[row * d + 1] = 0.5 * a + b;
            data[row * d + 2] = a - b;
            // Columns 3..6 stay 0.
        }
        let proj = pca(&Tensor::new(vec![rows, d], data).unwrap(), 4).unwrap();
        assert!(proj.eigenvalues[2] >= 0.0);
        assert!(proj.eigenvalues[3].abs() < 1e-9, "{:?}", proj.eigenvalues);
        assert!((proj.explained.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn too_few_samples_is_an_error() {
        let features = random_matrix(2, 5, 1);
        assert!(pca(&features, 2).is_err());
    }

    #[test]
    fn feature_export_is_deterministic_with_counted_rows() {
        use crate::synth::{self, SynthSpec};

        let data_dir = tempfile::tempdir().unwrap();
        synth::generate(&SynthSpec::balanced(2, 6, 16, 3), data_dir.path()).unwrap();
        let mut index = data::index_dataset(data_dir.path()).unwrap();
        data::stratified_split(&mut index, 3);
        let config = MamAppConfig {
            img_size: 16,
            stem_channels: (4, 8),
            d_model: 8,
            d_inner: 8,
            d_state: 4,
            num_blocks: 1,
            num_classes: 2,
            batch_size: 4,
            ..MamAppConfig::default()
        };
        let mut model = crate::model::build::<f32>(&config, 1).unwrap();
        let out_a = data_dir.path().join("features_a.csv");
        let out_b = data_dir.path().join("features_b.csv");
        let rows =
            export_features(&mut model, &index, Split::Train, &config, &out_a, 1).unwrap();
        export_features(&mut model, &index, Split::Train, &config, &out_b, 2).unwrap();
        assert_eq!(rows, index.split_indices(Split::Train).len());
        let text_a = std::fs::read_to_string(&out_a).unwrap();
        let text_b = std::fs::read_to_string(&out_b).unwrap();
        assert_eq!(text_a, text_b, "re-export is byte-identical");
        let lines: Vec<&str> = text_a.lines().collect();
        assert_eq!(lines.len(), 1 + rows);
        assert_eq!(lines[0].split(',').count(), 2 + config.d_model);
        assert!(lines[0].starts_with("path,class_name,f0,"));
    }

    #[test]
    fn pca_csv_and_sidecar_have_expected_shape() {
        let features = random_matrix(20, 6, 8);
        let proj = pca(&features, 3).unwrap();
        let labels: Vec<(String, String)> = (0..20)
            .map(|i| (format!("img{i}.png"), format!("c{}", i % 2)))
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let csv_path = dir.path().join("pca3.csv");
        let sidecar = write_pca_outputs(&proj, &labels, &csv_path).unwrap();
        let text = std::fs::read_to_string(&csv_path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "path,class_name,pc1,pc2,pc3");
        assert_eq!(lines.len(), 21);
        let meta: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&sidecar).unwrap()).unwrap();
        assert_eq!(meta["explained_variance_ratios"].as_array().unwrap().len(), 3);
    }
}
