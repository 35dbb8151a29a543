//! Dataset ingestion, deterministic stratified splitting, image loading,
//! train-time augmentation, and batch planning.
//!
//! A dataset is a directory tree `root/<class_name>/*.{jpg,jpeg,png}`.
//! Class ids follow lexicographic directory order so label axes are stable
//! across runs and machines. Splitting is per-class: shuffle each class with
//! its own derived seed, then hand the first `floor(0.70·n)` samples to
//! train, the next `floor(0.15·n)` to val, and the remainder to test.
//!
//! All randomness is derived from the run seed through fixed stream ids, so
//! every (seed, epoch, sample) triple maps to the same augmentation no
//! matter how many workers decode the batch.

use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::tensor::Tensor;
use crate::util::derive_seed;

/// Seed-stream ids keeping split shuffles, batch shuffles, and per-sample
/// augmentation draws statistically independent of one another.
const STREAM_SPLIT: u64 = 1;
const STREAM_BATCH: u64 = 2;
const STREAM_AUG: u64 = 3;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("dataset ingestion: {0}")]
    Ingest(String),
    #[error("reading {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("decoding {path}: {detail}")]
    Decode { path: PathBuf, detail: String },
}

/// Which partition a sample belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];
}

/// One indexed image: path relative to the dataset root plus its label.
#[derive(Clone, Debug)]
pub struct Sample {
    pub rel_path: PathBuf,
    pub class_id: usize,
}

/// The ingested dataset: classes, samples, and (once assigned) the split.
#[derive(Clone, Debug)]
pub struct DatasetIndex {
    pub root: PathBuf,
    /// Class names in lexicographic directory order; index = class id.
    pub classes: Vec<String>,
    pub samples: Vec<Sample>,
    /// Parallel to `samples`; `None` until [`stratified_split`] runs.
    pub assignment: Option<Vec<Split>>,
    pub split_seed: Option<u64>,
    /// Human-readable notes accumulated while indexing/splitting
    /// (skipped files, undersized classes).
    pub warnings: Vec<String>,
}

impl DatasetIndex {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn class_count(&self, class_id: usize) -> usize {
        self.samples.iter().filter(|s| s.class_id == class_id).count()
    }

    pub fn abs_path(&self, sample: &Sample) -> PathBuf {
        self.root.join(&sample.rel_path)
    }

    /// Sample indices of one split, in ascending dataset order.
    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        match &self.assignment {
            Some(tags) => tags
                .iter()
                .enumerate()
                .filter(|(_, &t)| t == split)
                .map(|(i, _)| i)
                .collect(),
            None => Vec::new(),
        }
    }
}

fn has_image_extension(path: &Path) -> bool {
    matches!(
        path.extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase())
            .as_deref(),
        Some("jpg") | Some("jpeg") | Some("png")
    )
}

/// Walks `root/<class>/*.{jpg,jpeg,png}` into a [`DatasetIndex`].
///
/// Classes are the immediate subdirectories, sorted lexicographically;
/// files sort lexicographically within each class. Files whose header will
/// not decode are skipped with a warning; a class directory with no usable
/// image at all is an error, as is a root with fewer than two classes.
pub fn index_dataset(root: &Path) -> Result<DatasetIndex, DataError> {
    let read_dir = |dir: &Path| -> Result<Vec<PathBuf>, DataError> {
        let entries = fs::read_dir(dir).map_err(|e| {
            DataError::Ingest(format!("cannot read directory {}: {e}", dir.display()))
        })?;
        let mut paths = Vec::new();
        for entry in entries {
            let entry = entry.map_err(|e| {
                DataError::Ingest(format!("cannot read directory {}: {e}", dir.display()))
            })?;
            paths.push(entry.path());
        }
        paths.sort();
        Ok(paths)
    };

    let mut classes = Vec::new();
    for path in read_dir(root)? {
        if path.is_dir() {
            let name = path
                .file_name()
                .and_then(|n| n.to_str())
                .ok_or_else(|| {
                    DataError::Ingest(format!("class directory {} is not UTF-8", path.display()))
                })?
                .to_string();
            classes.push(name);
        }
    }
    classes.sort();
    if classes.len() < 2 {
        return Err(DataError::Ingest(format!(
            "{} contains {} class directories; at least 2 are required",
            root.display(),
            classes.len()
        )));
    }

    let mut samples = Vec::new();
    let mut warnings = Vec::new();
    for (class_id, class) in classes.iter().enumerate() {
        let dir = root.join(class);
        let mut found = 0usize;
        for path in read_dir(&dir)? {
            if !path.is_file() || !has_image_extension(&path) {
                continue;
            }
            match image::image_dimensions(&path) {
                Ok(_) => {
                    samples.push(Sample {
                        rel_path: PathBuf::from(class).join(path.file_name().unwrap()),
                        class_id,
                    });
                    found += 1;
                }
                Err(e) => {
                    warnings.push(format!("skipping undecodable {}: {e}", path.display()));
                }
            }
        }
        if found == 0 {
            return Err(DataError::Ingest(format!(
                "class directory {} has no decodable image",
                dir.display()
            )));
        }
    }

    Ok(DatasetIndex {
        root: root.to_path_buf(),
        classes,
        samples,
        assignment: None,
        split_seed: None,
        warnings,
    })
}

/// Assigns every sample to train/val/test with the per-class floor rule.
///
/// Each class is shuffled with its own seed derived from `(seed, class_id)`,
/// then cut at `floor(0.70·n)` and `floor(0.15·n)`. The counts are exact
/// integer arithmetic (`n·70/100`, `n·15/100`), so they cannot drift with
/// float rounding. A class with fewer than 3 samples cannot populate all
/// three splits and gets a warning.
pub fn stratified_split(index: &mut DatasetIndex, seed: u64) {
    let n = index.samples.len();
    let mut tags = vec![Split::Test; n];
    for class_id in 0..index.classes.len() {
        let mut members: Vec<usize> = (0..n)
            .filter(|&i| index.samples[i].class_id == class_id)
            .collect();
        let n_c = members.len();
        if n_c < 3 {
            index.warnings.push(format!(
                "class '{}' has only {n_c} samples; not every split will contain it",
                index.classes[class_id]
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_SPLIT, &[class_id as u64]));
        members.shuffle(&mut rng);
        let n_train = n_c * 70 / 100;
        let n_val = n_c * 15 / 100;
        for (pos, &sample_idx) in members.iter().enumerate() {
            tags[sample_idx] = if pos < n_train {
                Split::Train
            } else if pos < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
        }
    }
    index.assignment = Some(tags);
    index.split_seed = Some(seed);
}

/// Writes the split as a `path,class,split` CSV next to the run outputs.
pub fn write_manifest(index: &DatasetIndex, path: &Path) -> Result<(), DataError> {
    let tags = index.assignment.as_ref().ok_or_else(|| {
        DataError::Ingest("cannot write a manifest before the split is assigned".to_string())
    })?;
    let mut w = csv::Writer::from_path(path).map_err(|e| DataError::Ingest(e.to_string()))?;
    w.write_record(["path", "class", "split"])
        .map_err(|e| DataError::Ingest(e.to_string()))?;
    for (sample, tag) in index.samples.iter().zip(tags) {
        w.write_record([
            sample.rel_path.to_string_lossy().as_ref(),
            &index.classes[sample.class_id],
            tag.as_str(),
        ])
        .map_err(|e| DataError::Ingest(e.to_string()))?;
    }
    w.flush().map_err(|e| DataError::Ingest(e.to_string()))?;
    Ok(())
}

/// Decodes one image to a `[3, img_size, img_size]` tensor scaled to [0,1].
///
/// Non-square or differently sized inputs are bilinearly resized; an input
/// already at the target size is passed through untouched. Grayscale and
/// paletted images expand to three identical/decoded RGB channels. Alpha is
/// dropped.
pub fn load_and_preprocess(path: &Path, img_size: usize) -> Result<Tensor<f32>, DataError> {
    let decode_err = |detail: String| DataError::Decode {
        path: path.to_path_buf(),
        detail,
    };
    let img = image::open(path).map_err(|e| decode_err(e.to_string()))?;
    let img = if img.width() as usize == img_size && img.height() as usize == img_size {
        img
    } else {
        img.resize_exact(img_size as u32, img_size as u32, FilterType::Triangle)
    };
    let rgb = img.to_rgb8();
    let hw = img_size * img_size;
    let mut data = vec![0.0f32; 3 * hw];
    for (y, row) in rgb.rows().enumerate() {
        for (x, px) in row.enumerate() {
            for c in 0..3 {
                data[c * hw + y * img_size + x] = px.0[c] as f32 / 255.0;
            }
        }
    }
    Ok(Tensor::new(vec![3, img_size, img_size], data).expect("length matches shape"))
}

/// Scales and shifts channels in place: `(v − mean[c]) / std[c]`.
pub fn normalize_in_place(img: &mut Tensor<f32>, mean: &[f64; 3], std: &[f64; 3]) {
    let hw = img.dim(1) * img.dim(2);
    let data = img.data_mut();
    for c in 0..3 {
        let (m, s) = (mean[c] as f32, std[c] as f32);
        for v in &mut data[c * hw..(c + 1) * hw] {
            *v = (*v - m) / s;
        }
    }
}

/// One concrete augmentation: the four jitter decisions, fully determined.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentParams {
    pub hflip: bool,
    pub vflip: bool,
    pub angle_deg: f64,
    pub brightness: f64,
}

impl AugmentParams {
    /// The do-nothing augmentation.
    pub fn identity() -> Self {
        AugmentParams {
            hflip: false,
            vflip: false,
            angle_deg: 0.0,
            brightness: 1.0,
        }
    }

    /// Draws one augmentation. The draw order (hflip coin, vflip coin,
    /// angle, brightness) is part of the determinism contract — reordering
    /// it would change every augmented pixel under a fixed seed.
    pub fn sample(rng: &mut ChaCha8Rng) -> Self {
        AugmentParams {
            hflip: rng.random::<f64>() < 0.5,
            vflip: rng.random::<f64>() < 0.5,
            angle_deg: rng.random_range(-10.0..10.0),
            brightness: rng.random_range(0.7..1.3),
        }
    }
}

/// Applies jitter in fixed order: horizontal flip, vertical flip, rotation
/// (bilinear, zero fill outside the frame), brightness scale with clamp back
/// to [0,1].
pub fn augment_with(img: &Tensor<f32>, p: &AugmentParams) -> Tensor<f32> {
    let (c_n, s) = (img.dim(0), img.dim(1));
    debug_assert_eq!(img.dim(1), img.dim(2), "augmentation expects square images");
    let hw = s * s;
    let mut data = img.data().to_vec();

    if p.hflip {
        for c in 0..c_n {
            for y in 0..s {
                data[c * hw + y * s..c * hw + (y + 1) * s].reverse();
            }
        }
    }
    if p.vflip {
        for c in 0..c_n {
            for y in 0..s / 2 {
                let (top, rest) = data[c * hw..(c + 1) * hw].split_at_mut((s - 1 - y) * s);
                top[y * s..(y + 1) * s].swap_with_slice(&mut rest[..s]);
            }
        }
    }
    if p.angle_deg != 0.0 {
        let rad = p.angle_deg.to_radians();
        let (sin, cos) = rad.sin_cos();
        let center = (s as f64 - 1.0) / 2.0;
        let src = data.clone();
        for c in 0..c_n {
            let plane = &src[c * hw..(c + 1) * hw];
            for yo in 0..s {
                let dy = yo as f64 - center;
                for xo in 0..s {
                    let dx = xo as f64 - center;
                    // Inverse-rotate the output coordinate into the source.
                    let xs = center + cos * dx + sin * dy;
                    let ys = center - sin * dx + cos * dy;
                    let x0 = xs.floor();
                    let y0 = ys.floor();
                    let fx = (xs - x0) as f32;
                    let fy = (ys - y0) as f32;
                    let mut acc = 0.0f32;
                    for (ty, wy) in [(y0 as i64, 1.0 - fy), (y0 as i64 + 1, fy)] {
                        for (tx, wx) in [(x0 as i64, 1.0 - fx), (x0 as i64 + 1, fx)] {
                            if (0..s as i64).contains(&ty) && (0..s as i64).contains(&tx) {
                                acc += wy * wx * plane[ty as usize * s + tx as usize];
                            }
                        }
                    }
                    data[c * hw + yo * s + xo] = acc;
                }
            }
        }
    }
    if p.brightness != 1.0 {
        let b = p.brightness as f32;
        for v in &mut data {
            *v = (*v * b).clamp(0.0, 1.0);
        }
    }

    Tensor::new(img.shape().to_vec(), data).expect("length matches shape")
}

/// Samples jitter from `rng` and applies it.
pub fn augment(img: &Tensor<f32>, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    augment_with(img, &AugmentParams::sample(rng))
}

/// Plans one epoch's batches as lists of dataset indices.
///
/// Train batches reshuffle every epoch with a seed derived from
/// `(shuffle_seed, epoch)`; val/test keep their fixed dataset order. The
/// final partial batch is kept.
pub fn make_batches(
    index: &DatasetIndex,
    split: Split,
    batch_size: usize,
    shuffle_seed: u64,
    epoch: u64,
) -> Vec<Vec<usize>> {
    assert!(batch_size > 0, "batch_size must be positive");
    let mut order = index.split_indices(split);
    if split == Split::Train {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(shuffle_seed, STREAM_BATCH, &[epoch]));
        order.shuffle(&mut rng);
    }
    order.chunks(batch_size).map(|c| c.to_vec()).collect()
}

/// When set, [`load_batch`] jitters each sample with a seed derived from
/// `(seed, epoch, sample_index)` — reproducible for any worker count.
#[derive(Clone, Copy, Debug)]
pub struct AugmentStream {
    pub seed: u64,
    pub epoch: u64,
}

/// Everything [`load_batch`] needs besides the indices.
#[derive(Clone, Copy, Debug)]
pub struct LoadOptions<'a> {
    pub img_size: usize,
    pub augment: Option<AugmentStream>,
    pub normalize: Option<(&'a [f64; 3], &'a [f64; 3])>,
    /// Decode threads; 1 means inline.
    pub workers: usize,
}

/// A loaded batch: stacked images plus labels and the source indices.
#[derive(Clone, Debug)]
pub struct Batch {
    /// `[B, 3, img_size, img_size]`
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub indices: Vec<usize>,
}

/// Decodes, augments, and normalizes `batch_indices` into one stacked batch.
pub fn load_batch(
    index: &DatasetIndex,
    batch_indices: &[usize],
    opts: &LoadOptions,
) -> Result<Batch, DataError> {
    assert!(!batch_indices.is_empty(), "a batch cannot be empty");
    let b = batch_indices.len();
    let sample_len = 3 * opts.img_size * opts.img_size;
    let mut images = vec![0.0f32; b * sample_len];

    let load_one = |sample_idx: usize, out: &mut [f32]| -> Result<(), DataError> {
        let sample = &index.samples[sample_idx];
        let mut img = load_and_preprocess(&index.abs_path(sample), opts.img_size)?;
        if let Some(stream) = opts.augment {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                stream.seed,
                STREAM_AUG,
                &[stream.epoch, sample_idx as u64],
            ));
            img = augment(&img, &mut rng);
        }
        if let Some((mean, std)) = opts.normalize {
            normalize_in_place(&mut img, mean, std);
        }
        out.copy_from_slice(img.data());
        Ok(())
    };

    let workers = opts.workers.max(1).min(b);
    if workers == 1 {
        for (slot, &sample_idx) in batch_indices.iter().enumerate() {
            load_one(sample_idx, &mut images[slot * sample_len..(slot + 1) * sample_len])?;
        }
    } else {
        // Contiguous slabs per worker; sample→pixel mapping is independent of
        // the partitioning, so any worker count produces identical bytes.
        let per = b.div_ceil(workers);
        let mut results: Vec<Result<(), DataError>> = Vec::new();
        std::thread::scope(|scope| {
            let mut handles = Vec::new();
            for (idx_chunk, img_chunk) in batch_indices
                .chunks(per)
                .zip(images.chunks_mut(per * sample_len))
            {
                let load_one = &load_one;
                handles.push(scope.spawn(move || {
                    for (slot, &sample_idx) in idx_chunk.iter().enumerate() {
                        load_one(sample_idx, &mut img_chunk[slot * sample_len..(slot + 1) * sample_len])?;
                    }
                    Ok(())
                }));
            }
            for handle in handles {
                results.push(handle.join().expect("decode worker panicked"));
            }
        });
        for r in results {
            r?;
        }
    }

    Ok(Batch {
        images: Tensor::new(vec![b, 3, opts.img_size, opts.img_size], images)
            .expect("length matches shape"),
        labels: batch_indices
            .iter()
            .map(|&i| index.samples[i].class_id)
            .collect(),
        indices: batch_indices.to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Index with fabricated paths, for split arithmetic without any files.
    fn synthetic_index(class_sizes: &[usize]) -> DatasetIndex {
        let classes: Vec<String> = (0..class_sizes.len()).map(|c| format!("class{c}")).collect();
        let mut samples = Vec::new();
        for (class_id, &n) in class_sizes.iter().enumerate() {
            for i in 0..n {
                samples.push(Sample {
                    rel_path: PathBuf::from(&classes[class_id]).join(format!("img{i:05}.png")),
                    class_id,
                });
            }
        }
        DatasetIndex {
            root: PathBuf::from("."),
            classes,
            samples,
            assignment: None,
            split_seed: None,
            warnings: Vec::new(),
        }
    }

    fn split_counts(index: &DatasetIndex) -> Vec<[usize; 3]> {
        let tags = index.assignment.as_ref().unwrap();
        let mut counts = vec![[0usize; 3]; index.classes.len()];
        for (sample, tag) in index.samples.iter().zip(tags) {
            let k = match tag {
                Split::Train => 0,
                Split::Val => 1,
                Split::Test => 2,
            };
            counts[sample.class_id][k] += 1;
        }
        counts
    }

    #[test]
    fn floor_rule_reproduces_published_split_tables() {
        // (class sizes, expected per-class [train, val, test])
        let tables: [(&[usize], &[[usize; 3]]); 3] = [
            (
                &[630, 621, 275, 1645],
                &[[441, 94, 95], [434, 93, 94], [192, 41, 42], [1151, 246, 248]],
            ),
            (
                &[513, 1192, 985, 1162],
                &[[359, 76, 78], [834, 178, 180], [689, 147, 149], [813, 174, 175]],
            ),
            (
                &[1000, 1000, 152],
                &[[700, 150, 150], [700, 150, 150], [106, 22, 24]],
            ),
        ];
        for (sizes, expected) in tables {
            let mut index = synthetic_index(sizes);
            stratified_split(&mut index, 42);
            assert_eq!(split_counts(&index), expected, "class sizes {sizes:?}");
        }
    }

    #[test]
    fn apple_split_totals_match() {
        let mut index = synthetic_index(&[630, 621, 275, 1645]);
        stratified_split(&mut index, 7);
        let totals = Split::ALL.map(|s| index.split_indices(s).len());
        assert_eq!(totals, [2218, 474, 479]);
        assert_eq!(index.samples.len(), 3171);
    }

    #[test]
    fn ten_samples_split_7_1_2() {
        let mut index = synthetic_index(&[10, 10]);
        stratified_split(&mut index, 0);
        assert_eq!(split_counts(&index), vec![[7, 1, 2], [7, 1, 2]]);
    }

    #[test]
    fn splits_partition_the_dataset() {
        let mut index = synthetic_index(&[17, 93, 4, 256]);
        stratified_split(&mut index, 11);
        let (train, val, test) = (
            index.split_indices(Split::Train),
            index.split_indices(Split::Val),
            index.split_indices(Split::Test),
        );
        let mut all: Vec<usize> = train.iter().chain(&val).chain(&test).copied().collect();
        all.sort_unstable();
        let expected: Vec<usize> = (0..index.samples.len()).collect();
        assert_eq!(all, expected, "every sample lands in exactly one split");
    }

    #[test]
    fn same_seed_same_split_different_seed_differs() {
        let mut a = synthetic_index(&[100, 100]);
        let mut b = synthetic_index(&[100, 100]);
        let mut c = synthetic_index(&[100, 100]);
        stratified_split(&mut a, 1);
        stratified_split(&mut b, 1);
        stratified_split(&mut c, 2);
        assert_eq!(a.assignment, b.assignment);
        assert_ne!(a.assignment, c.assignment);
    }

    #[test]
    fn undersized_class_warns_but_still_partitions() {
        let mut index = synthetic_index(&[2, 50]);
        stratified_split(&mut index, 3);
        assert!(index.warnings.iter().any(|w| w.contains("class0")));
        assert_eq!(split_counts(&index)[0], [1, 0, 1]);
    }

    #[test]
    fn class_imbalance_ratios_match_known_datasets() {
        for (sizes, expected) in [
            (vec![630usize, 621, 275, 1645], 5.98),
            (vec![513, 1192, 985, 1162], 2.32),
            (vec![1000, 1000, 152], 6.58),
        ] {
            let max = *sizes.iter().max().unwrap() as f64;
            let min = *sizes.iter().min().unwrap() as f64;
            assert!((max / min - expected).abs() < 0.01, "{sizes:?}");
        }
    }

    #[test]
    fn apple_train_batches_at_32_are_70_with_partial_tail() {
        let mut index = synthetic_index(&[630, 621, 275, 1645]);
        stratified_split(&mut index, 42);
        let batches = make_batches(&index, Split::Train, 32, 42, 0);
        assert_eq!(batches.len(), 70);
        assert!(batches[..69].iter().all(|b| b.len() == 32));
        assert_eq!(batches[69].len(), 10);
    }

    #[test]
    fn train_batches_reshuffle_per_epoch_and_replay_per_seed() {
        let mut index = synthetic_index(&[40, 40]);
        stratified_split(&mut index, 5);
        let e0 = make_batches(&index, Split::Train, 8, 5, 0);
        let e0_again = make_batches(&index, Split::Train, 8, 5, 0);
        let e1 = make_batches(&index, Split::Train, 8, 5, 1);
        assert_eq!(e0, e0_again);
        assert_ne!(e0, e1);
        let mut flat: Vec<usize> = e0.concat();
        flat.sort_unstable();
        let mut flat1: Vec<usize> = e1.concat();
        flat1.sort_unstable();
        assert_eq!(flat, flat1, "epochs permute the same sample set");
    }

    #[test]
    fn val_and_test_batches_ignore_the_epoch() {
        let mut index = synthetic_index(&[40, 40]);
        stratified_split(&mut index, 5);
        for split in [Split::Val, Split::Test] {
            let a = make_batches(&index, split, 8, 5, 0);
            let b = make_batches(&index, split, 8, 5, 99);
            assert_eq!(a, b);
        }
    }

    #[test]
    fn identity_params_change_nothing() {
        let img = Tensor::new(vec![3, 4, 4], (0..48).map(|v| v as f32 / 47.0).collect()).unwrap();
        let out = augment_with(&img, &AugmentParams::identity());
        assert_eq!(out.data(), img.data());
    }

    #[test]
    fn flips_are_involutions() {
        let img = Tensor::new(vec![3, 6, 6], (0..108).map(|v| (v as f32).sin().abs()).collect())
            .unwrap();
        for params in [
            AugmentParams { hflip: true, ..AugmentParams::identity() },
            AugmentParams { vflip: true, ..AugmentParams::identity() },
            AugmentParams { hflip: true, vflip: true, ..AugmentParams::identity() },
        ] {
            let twice = augment_with(&augment_with(&img, &params), &params);
            assert_eq!(twice.data(), img.data(), "{params:?}");
        }
    }

    #[test]
    fn hflip_mirrors_columns() {
        let img = Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let out = augment_with(&img, &AugmentParams { hflip: true, ..AugmentParams::identity() });
        assert_eq!(out.data(), &[2.0, 1.0, 4.0, 3.0]);
    }

    #[test]
    fn brightness_clamps_at_one() {
        let img = Tensor::new(vec![3, 2, 2], vec![0.9; 12]).unwrap();
        let out = augment_with(
            &img,
            &AugmentParams { brightness: 1.3, ..AugmentParams::identity() },
        );
        assert!(out.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn rotation_preserves_shape_and_center_pixel() {
        let mut data = vec![0.0f32; 3 * 5 * 5];
        for c in 0..3 {
            data[c * 25 + 2 * 5 + 2] = 1.0;
        }
        let img = Tensor::new(vec![3, 5, 5], data).unwrap();
        let out = augment_with(
            &img,
            &AugmentParams { angle_deg: 10.0, ..AugmentParams::identity() },
        );
        assert_eq!(out.shape(), img.shape());
        // The rotation center is a fixed point of the resampling.
        for c in 0..3 {
            assert!((out.data()[c * 25 + 2 * 5 + 2] - 1.0).abs() < 1e-6);
        }
    }

    proptest! {
        #[test]
        fn augmentation_keeps_shape_and_unit_range(
            pixels in proptest::collection::vec(0.0f32..=1.0, 3 * 8 * 8),
            hflip: bool,
            vflip: bool,
            angle in -10.0f64..10.0,
            brightness in 0.7f64..1.3,
        ) {
            let img = Tensor::new(vec![3, 8, 8], pixels).unwrap();
            let params = AugmentParams { hflip, vflip, angle_deg: angle, brightness };
            let out = augment_with(&img, &params);
            prop_assert_eq!(out.shape(), img.shape());
            for &v in out.data() {
                prop_assert!((0.0..=1.0).contains(&v), "pixel {} out of range", v);
            }
        }

        #[test]
        fn sampled_params_stay_in_contract_ranges(seed: u64) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = AugmentParams::sample(&mut rng);
            prop_assert!((-10.0..10.0).contains(&p.angle_deg));
            prop_assert!((0.7..1.3).contains(&p.brightness));
        }
    }

    // ---- filesystem-backed tests ----

    fn write_png(path: &Path, w: u32, h: u32, color: [u8; 3]) {
        let img = image::RgbImage::from_pixel(w, h, image::Rgb(color));
        img.save(path).unwrap();
    }

    fn sample_tree(root: &Path) {
        for (class, color) in [("blight", [200, 40, 40]), ("healthy", [40, 200, 40])] {
            let dir = root.join(class);
            fs::create_dir(&dir).unwrap();
            for i in 0..3 {
                write_png(&dir.join(format!("leaf{i}.png")), 8, 8, color);
            }
        }
    }

    #[test]
    fn indexing_is_lexicographic_and_stable() {
        let dir = tempfile::tempdir().unwrap();
        sample_tree(dir.path());
        let index = index_dataset(dir.path()).unwrap();
        assert_eq!(index.classes, vec!["blight", "healthy"]);
        assert_eq!(index.samples.len(), 6);
        assert_eq!(index.samples[0].rel_path, PathBuf::from("blight/leaf0.png"));
        assert!(index.samples[..3].iter().all(|s| s.class_id == 0));
        let again = index_dataset(dir.path()).unwrap();
        assert_eq!(
            index.samples.iter().map(|s| &s.rel_path).collect::<Vec<_>>(),
            again.samples.iter().map(|s| &s.rel_path).collect::<Vec<_>>(),
        );
    }

    #[test]
    fn undecodable_file_is_skipped_with_warning() {
        let dir = tempfile::tempdir().unwrap();
        sample_tree(dir.path());
        fs::write(dir.path().join("blight/broken.png"), b"not a png").unwrap();
        fs::write(dir.path().join("blight/notes.txt"), b"ignored, not an image").unwrap();
        let index = index_dataset(dir.path()).unwrap();
        assert_eq!(index.samples.len(), 6);
        assert_eq!(index.warnings.len(), 1);
        assert!(index.warnings[0].contains("broken.png"));
    }

    #[test]
    fn empty_class_directory_is_an_error_naming_it() {
        let dir = tempfile::tempdir().unwrap();
        sample_tree(dir.path());
        fs::create_dir(dir.path().join("mystery")).unwrap();
        let err = index_dataset(dir.path()).unwrap_err();
        assert!(err.to_string().contains("mystery"), "{err}");
    }

    #[test]
    fn single_class_root_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let class = dir.path().join("healthy");
        fs::create_dir(&class).unwrap();
        write_png(&class.join("leaf.png"), 8, 8, [0, 255, 0]);
        let err = index_dataset(dir.path()).unwrap_err();
        assert!(err.to_string().contains("at least 2"), "{err}");
    }

    #[test]
    fn loading_scales_bytes_to_unit_range_without_resampling() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("px.png");
        write_png(&path, 4, 4, [255, 128, 0]);
        let img = load_and_preprocess(&path, 4).unwrap();
        assert_eq!(img.shape(), &[3, 4, 4]);
        assert_eq!(img.data()[0], 1.0);
        assert!((img.data()[16] - 128.0 / 255.0).abs() < 1e-7);
        assert_eq!(img.data()[32], 0.0);
    }

    #[test]
    fn loading_resizes_other_sizes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("big.png");
        write_png(&path, 500, 375, [10, 20, 30]);
        let img = load_and_preprocess(&path, 16).unwrap();
        assert_eq!(img.shape(), &[3, 16, 16]);
        // A constant image stays constant under bilinear resampling.
        assert!(img.data().iter().take(256).all(|&v| (v - 10.0 / 255.0).abs() < 1e-6));
    }

    #[test]
    fn grayscale_replicates_to_three_channels() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gray.png");
        image::GrayImage::from_fn(4, 4, |x, y| image::Luma([(x * 4 + y) as u8 * 10]))
            .save(&path)
            .unwrap();
        let img = load_and_preprocess(&path, 4).unwrap();
        let hw = 16;
        for i in 0..hw {
            assert_eq!(img.data()[i], img.data()[hw + i]);
            assert_eq!(img.data()[i], img.data()[2 * hw + i]);
        }
    }

    #[test]
    fn explicit_load_of_garbage_is_a_hard_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.png");
        fs::write(&path, b"zzz").unwrap();
        assert!(load_and_preprocess(&path, 4).is_err());
    }

    #[test]
    fn worker_count_does_not_change_batch_bytes() {
        let dir = tempfile::tempdir().unwrap();
        sample_tree(dir.path());
        let mut index = index_dataset(dir.path()).unwrap();
        stratified_split(&mut index, 9);
        let all: Vec<usize> = (0..index.samples.len()).collect();
        let mk = |workers: usize| {
            load_batch(
                &index,
                &all,
                &LoadOptions {
                    img_size: 8,
                    augment: Some(AugmentStream { seed: 9, epoch: 2 }),
                    normalize: Some((&[0.5, 0.5, 0.5], &[0.25, 0.25, 0.25])),
                    workers,
                },
            )
            .unwrap()
        };
        let one = mk(1);
        let four = mk(4);
        assert_eq!(one.images.data(), four.images.data());
        assert_eq!(one.labels, four.labels);
        assert_eq!(one.labels, vec![0, 0, 0, 1, 1, 1]);
    }

    #[test]
    fn augmentation_depends_on_epoch_and_sample_not_position() {
        let dir = tempfile::tempdir().unwrap();
        sample_tree(dir.path());
        let index = index_dataset(dir.path()).unwrap();
        let opts = |epoch| LoadOptions {
            img_size: 8,
            augment: Some(AugmentStream { seed: 4, epoch }),
            normalize: None,
            workers: 1,
        };
        // Same sample in different batch positions: identical pixels.
        let a = load_batch(&index, &[0, 1], &opts(0)).unwrap();
        let b = load_batch(&index, &[1, 0], &opts(0)).unwrap();
        let n = 3 * 64;
        assert_eq!(a.images.data()[..n], b.images.data()[n..2 * n]);
        // Different epoch: different jitter for at least one sample.
        let c = load_batch(&index, &[0, 1], &opts(1)).unwrap();
        assert_ne!(a.images.data(), c.images.data());
    }

    #[test]
    fn manifest_lists_every_sample_with_split_tags() {
        let dir = tempfile::tempdir().unwrap();
        sample_tree(dir.path());
        let mut index = index_dataset(dir.path()).unwrap();
        stratified_split(&mut index, 1);
        let manifest = dir.path().join("split.csv");
        write_manifest(&index, &manifest).unwrap();
        let text = fs::read_to_string(&manifest).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "path,class,split");
        assert_eq!(lines.len(), 1 + 6);
        assert!(lines[1].starts_with("blight/leaf0.png,blight,"));
        for line in &lines[1..] {
            let split = line.rsplit(',').next().unwrap();
            assert!(["train", "val", "test"].contains(&split), "{line}");
        }
    }
}
