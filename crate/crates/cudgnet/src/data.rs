//! Dataset ingestion: CIFAR-10 training source (binary batches), CIFAR-10-C
//! evaluation (per-corruption NPY stacks, 19 corruptions x 5 severities),
//! deterministic class-balanced subsetting, and the evaluation report
//! arithmetic (category means, overall mean).

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::Read;
use std::path::{Path, PathBuf};

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_pcg::Pcg64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::npy::{read_npy, read_npy_range, NpyData};
use crate::tape::Arr;

pub const IMG_CHANNELS: usize = 3;
pub const IMG_SIDE: usize = 32;
pub const IMG_BYTES: usize = IMG_CHANNELS * IMG_SIDE * IMG_SIDE;
pub const NUM_CLASSES: usize = 10;
const CIFAR10C_ROWS_PER_SEVERITY: usize = 10_000;

/// Per-channel normalization constants, fixed in config so training and
/// corruption evaluation always agree.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Normalization {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for Normalization {
    fn default() -> Self {
        Self {
            mean: [0.4914, 0.4822, 0.4465],
            std: [0.2470, 0.2435, 0.2616],
        }
    }
}

impl Normalization {
    /// Normalize a (B, 3, H, W) batch in place.
    pub fn apply(&self, batch: &mut Arr) {
        let shape = batch.shape().to_vec();
        debug_assert_eq!(shape[1], 3);
        for c in 0..3 {
            let m = self.mean[c];
            let s = self.std[c];
            batch
                .index_axis_mut(ndarray::Axis(1), c)
                .mapv_inplace(|v| (v - m) / s);
        }
    }
}

/// In-memory dataset: raw u8 pixels (CHW planar per image) plus labels.
#[derive(Debug, Clone)]
pub struct Dataset {
    images: Vec<u8>,
    pub labels: Vec<u8>,
}

impl Dataset {
    pub fn new(images: Vec<u8>, labels: Vec<u8>) -> Result<Self> {
        if images.len() != labels.len() * IMG_BYTES {
            return Err(Error::Dataset(format!(
                "images/labels mismatch: {} bytes vs {} labels",
                images.len(),
                labels.len()
            )));
        }
        Ok(Self { images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Assemble a (B, 3, 32, 32) float batch in [0, 1] for the given indices.
    pub fn batch(&self, idxs: &[usize]) -> (Arr, Vec<u8>) {
        let b = idxs.len();
        let mut out = ArrayD::zeros(IxDyn(&[b, IMG_CHANNELS, IMG_SIDE, IMG_SIDE]));
        {
            let flat = out.as_slice_mut().unwrap();
            for (bi, &i) in idxs.iter().enumerate() {
                let src = &self.images[i * IMG_BYTES..(i + 1) * IMG_BYTES];
                let dst = &mut flat[bi * IMG_BYTES..(bi + 1) * IMG_BYTES];
                for (d, &s) in dst.iter_mut().zip(src.iter()) {
                    *d = s as f64 / 255.0;
                }
            }
        }
        let labels = idxs.iter().map(|&i| self.labels[i]).collect();
        (out, labels)
    }

    pub fn select(&self, idxs: &[usize]) -> Dataset {
        let mut images = Vec::with_capacity(idxs.len() * IMG_BYTES);
        let mut labels = Vec::with_capacity(idxs.len());
        for &i in idxs {
            images.extend_from_slice(&self.images[i * IMG_BYTES..(i + 1) * IMG_BYTES]);
            labels.push(self.labels[i]);
        }
        Dataset { images, labels }
    }
}

/// One-hot label distributions for a batch.
pub fn onehot_labels(labels: &[u8], num_classes: usize) -> ndarray::Array2<f64> {
    let mut y = ndarray::Array2::<f64>::zeros((labels.len(), num_classes));
    for (i, &l) in labels.iter().enumerate() {
        y[[i, l as usize]] = 1.0;
    }
    y
}

fn cifar_dir(root: &Path) -> PathBuf {
    let nested = root.join("cifar-10-batches-bin");
    if nested.join("data_batch_1.bin").exists() {
        nested
    } else {
        root.to_path_buf()
    }
}

fn missing_cifar_error(root: &Path) -> Error {
    Error::Dataset(format!(
        "CIFAR-10 binary batches not found under {}.\n\
         Fetch with:\n\
         curl -LO https://www.cs.toronto.edu/~kriz/cifar-10-binary.tar.gz\n\
         tar xzf cifar-10-binary.tar.gz -C <data-root>\n\
         (expects <data-root>/cifar-10-batches-bin/data_batch_[1-5].bin and test_batch.bin)",
        root.display()
    ))
}

fn read_cifar_bin(path: &Path) -> Result<(Vec<u8>, Vec<u8>)> {
    let mut raw = Vec::new();
    File::open(path)?.read_to_end(&mut raw)?;
    let rec = IMG_BYTES + 1;
    if raw.len() % rec != 0 {
        return Err(Error::Dataset(format!(
            "{}: size {} is not a multiple of {rec}",
            path.display(),
            raw.len()
        )));
    }
    let n = raw.len() / rec;
    let mut images = Vec::with_capacity(n * IMG_BYTES);
    let mut labels = Vec::with_capacity(n);
    for r in raw.chunks_exact(rec) {
        labels.push(r[0]);
        images.extend_from_slice(&r[1..]);
    }
    Ok((images, labels))
}

/// Load the CIFAR-10 training split, optionally as a deterministic
/// class-balanced subset. Within each class, selection order is a seeded
/// shuffle, so the same (subset_size, seed) always picks the same images.
pub fn load_source(root: &Path, subset_size: Option<usize>, seed: u64) -> Result<Dataset> {
    let dir = cifar_dir(root);
    if !dir.join("data_batch_1.bin").exists() {
        return Err(missing_cifar_error(root));
    }
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for i in 1..=5 {
        let (im, lb) = read_cifar_bin(&dir.join(format!("data_batch_{i}.bin")))?;
        images.extend(im);
        labels.extend(lb);
    }
    let full = Dataset::new(images, labels)?;
    match subset_size {
        None => Ok(full),
        Some(n) => {
            let idxs = balanced_subset_indices(&full.labels, n, seed)?;
            Ok(full.select(&idxs))
        }
    }
}

/// Load the clean CIFAR-10 test split (also the source validation split).
pub fn load_test(root: &Path) -> Result<Dataset> {
    let dir = cifar_dir(root);
    let path = dir.join("test_batch.bin");
    if !path.exists() {
        return Err(missing_cifar_error(root));
    }
    let (images, labels) = read_cifar_bin(&path)?;
    Dataset::new(images, labels)
}

/// Deterministic class-balanced index selection: per-class pools shuffled by
/// seed, then round-robin across classes so any prefix stays near-balanced.
pub fn balanced_subset_indices(labels: &[u8], n: usize, seed: u64) -> Result<Vec<usize>> {
    if n > labels.len() {
        return Err(Error::Dataset(format!(
            "subset of {n} requested from {} examples",
            labels.len()
        )));
    }
    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); NUM_CLASSES];
    for (i, &l) in labels.iter().enumerate() {
        per_class[l as usize].push(i);
    }
    let mut rng = Pcg64::new(
        (seed as u128) << 64 | 0x853c49e6748fea9b,
        0xda3e39cb94b95bdb | 1,
    );
    for pool in per_class.iter_mut() {
        for i in (1..pool.len()).rev() {
            let j = rng.gen_range(0..=i);
            pool.swap(i, j);
        }
    }
    let mut out = Vec::with_capacity(n);
    let mut cursor = [0usize; NUM_CLASSES];
    let mut class = 0usize;
    while out.len() < n {
        let pool = &per_class[class];
        if cursor[class] < pool.len() {
            out.push(pool[cursor[class]]);
            cursor[class] += 1;
        }
        class = (class + 1) % NUM_CLASSES;
        if cursor.iter().zip(per_class.iter()).all(|(c, p)| *c >= p.len()) {
            break;
        }
    }
    Ok(out)
}

// ---- CIFAR-10-C ----

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Weather,
    Blur,
    Noise,
    Digital,
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Category::Weather => "weather",
            Category::Blur => "blur",
            Category::Noise => "noise",
            Category::Digital => "digital",
        };
        write!(f, "{s}")
    }
}

pub const CATEGORIES: [Category; 4] = [
    Category::Weather,
    Category::Blur,
    Category::Noise,
    Category::Digital,
];

/// The 19 published CIFAR-10-C corruptions grouped by visual family
/// (standard 15 plus the 4 extra corruptions shipped with the dataset).
pub const CORRUPTIONS: [(&str, Category); 19] = [
    ("snow", Category::Weather),
    ("frost", Category::Weather),
    ("fog", Category::Weather),
    ("brightness", Category::Weather),
    ("spatter", Category::Weather),
    ("defocus_blur", Category::Blur),
    ("glass_blur", Category::Blur),
    ("motion_blur", Category::Blur),
    ("zoom_blur", Category::Blur),
    ("gaussian_blur", Category::Blur),
    ("gaussian_noise", Category::Noise),
    ("shot_noise", Category::Noise),
    ("impulse_noise", Category::Noise),
    ("speckle_noise", Category::Noise),
    ("contrast", Category::Digital),
    ("elastic_transform", Category::Digital),
    ("pixelate", Category::Digital),
    ("jpeg_compression", Category::Digital),
    ("saturate", Category::Digital),
];

pub fn all_corruption_names() -> Vec<&'static str> {
    CORRUPTIONS.iter().map(|(n, _)| *n).collect()
}

pub fn category_of(name: &str) -> Result<Category> {
    CORRUPTIONS
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, c)| *c)
        .ok_or_else(|| Error::UnknownCorruption {
            name: name.to_string(),
            valid: all_corruption_names().join(", "),
        })
}

/// One corruption at one severity.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub name: String,
    pub category: Category,
    pub severity: u8,
}

impl CorruptionSpec {
    pub fn new(name: &str, severity: u8) -> Result<Self> {
        let category = category_of(name)?;
        if !(1..=5).contains(&severity) {
            return Err(Error::InvalidParam(format!(
                "severity {severity} outside [1,5]"
            )));
        }
        Ok(Self {
            name: name.to_string(),
            category,
            severity,
        })
    }

    /// Cross product of corruption names and severities.
    pub fn grid(names: &[&str], severities: &[u8]) -> Result<Vec<CorruptionSpec>> {
        let mut out = Vec::new();
        for name in names {
            for &s in severities {
                out.push(CorruptionSpec::new(name, s)?);
            }
        }
        Ok(out)
    }
}

fn cifar10c_dir(root: &Path) -> PathBuf {
    let nested = root.join("CIFAR-10-C");
    if nested.join("labels.npy").exists() {
        nested
    } else {
        root.to_path_buf()
    }
}

fn missing_cifar10c_error(root: &Path) -> Error {
    Error::Dataset(format!(
        "CIFAR-10-C arrays not found under {}.\n\
         Fetch from https://zenodo.org/records/2535967 and unpack so that\n\
         <data-root>/CIFAR-10-C/<corruption>.npy and labels.npy exist.",
        root.display()
    ))
}

/// Labels shared by every corruption file (identical to the clean test set).
pub fn cifar10c_labels(root: &Path) -> Result<Vec<u8>> {
    let dir = cifar10c_dir(root);
    let path = dir.join("labels.npy");
    if !path.exists() {
        return Err(missing_cifar10c_error(root));
    }
    let arr = read_npy(&path)?;
    let labels: Vec<u8> = match arr.data {
        NpyData::I64(v) => v.iter().map(|&x| x as u8).collect(),
        NpyData::U8(v) => v,
    };
    Ok(labels)
}

/// Load one (corruption, severity) slice from the published layout:
/// severity s occupies rows [(s-1)*10000, s*10000) of the 50000-row stack.
pub fn load_cifar10c_slice(root: &Path, name: &str, severity: u8) -> Result<Dataset> {
    load_cifar10c_slice_rows(root, name, severity, CIFAR10C_ROWS_PER_SEVERITY)
}

/// Same slicing arithmetic with a non-standard stack height (subsampled
/// mirrors ship fewer rows per severity; the published dataset uses 10000).
pub fn load_cifar10c_slice_rows(
    root: &Path,
    name: &str,
    severity: u8,
    rows_per_severity: usize,
) -> Result<Dataset> {
    let spec = CorruptionSpec::new(name, severity)?;
    let dir = cifar10c_dir(root);
    let path = dir.join(format!("{}.npy", spec.name));
    if !path.exists() {
        return Err(missing_cifar10c_error(root));
    }
    let r0 = (severity as usize - 1) * rows_per_severity;
    let r1 = severity as usize * rows_per_severity;
    let arr = read_npy_range(&path, Some((r0, r1)))?;
    if arr.shape.len() != 4
        || arr.shape[1] != IMG_SIDE
        || arr.shape[2] != IMG_SIDE
        || arr.shape[3] != IMG_CHANNELS
    {
        return Err(Error::Dataset(format!(
            "{}: expected (N, 32, 32, 3) u8 stack, got {:?}",
            path.display(),
            arr.shape
        )));
    }
    let raw = match arr.data {
        NpyData::U8(v) => v,
        _ => {
            return Err(Error::Dataset(format!(
                "{}: expected u8 image data",
                path.display()
            )))
        }
    };
    // HWC -> CHW
    let n = arr.shape[0];
    let mut images = vec![0u8; n * IMG_BYTES];
    for i in 0..n {
        let src = &raw[i * IMG_BYTES..(i + 1) * IMG_BYTES];
        let dst = &mut images[i * IMG_BYTES..(i + 1) * IMG_BYTES];
        for h in 0..IMG_SIDE {
            for w in 0..IMG_SIDE {
                for c in 0..IMG_CHANNELS {
                    dst[c * IMG_SIDE * IMG_SIDE + h * IMG_SIDE + w] =
                        src[h * IMG_SIDE * IMG_CHANNELS + w * IMG_CHANNELS + c];
                }
            }
        }
    }
    let all_labels = cifar10c_labels(root)?;
    if all_labels.len() < r1 {
        return Err(Error::Dataset(format!(
            "labels.npy has {} rows, need {r1} for severity {severity}",
            all_labels.len()
        )));
    }
    Dataset::new(images, all_labels[r0..r1].to_vec())
}

// ---- evaluation report ----

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalRow {
    pub corruption: String,
    pub category: Category,
    pub severity: u8,
    /// Accuracy in percent.
    pub accuracy: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    /// Mean over evaluated severities, per corruption.
    pub per_corruption: BTreeMap<String, f64>,
    /// Unweighted mean of member corruptions, per category.
    pub per_category: BTreeMap<String, f64>,
    /// Mean of the category means (the headline Avg convention).
    pub overall: f64,
    /// Mean over per-corruption means, reported alongside.
    pub per_corruption_avg: f64,
    pub clean_accuracy: Option<f64>,
}

/// Category means are unweighted arithmetic means of their member
/// corruptions (each first averaged over its evaluated severities); the
/// overall score is the mean of the category means.
pub fn aggregate(rows: Vec<EvalRow>) -> Result<EvalReport> {
    if rows.is_empty() {
        return Err(Error::Dataset("aggregate: no evaluation rows".into()));
    }
    let mut by_corruption: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for row in &rows {
        // surfaces typos early
        let cat = category_of(&row.corruption)?;
        if cat != row.category {
            return Err(Error::Dataset(format!(
                "corruption {} tagged {} but belongs to {}",
                row.corruption, row.category, cat
            )));
        }
        by_corruption
            .entry(row.corruption.clone())
            .or_default()
            .push(row.accuracy);
    }
    let per_corruption: BTreeMap<String, f64> = by_corruption
        .iter()
        .map(|(k, v)| (k.clone(), v.iter().sum::<f64>() / v.len() as f64))
        .collect();

    let mut per_category = BTreeMap::new();
    let mut cat_means = Vec::new();
    for cat in CATEGORIES {
        let members: Vec<f64> = per_corruption
            .iter()
            .filter(|(name, _)| category_of(name).unwrap() == cat)
            .map(|(_, &v)| v)
            .collect();
        if !members.is_empty() {
            let mean = members.iter().sum::<f64>() / members.len() as f64;
            per_category.insert(cat.to_string(), mean);
            cat_means.push(mean);
        }
    }
    let overall = cat_means.iter().sum::<f64>() / cat_means.len() as f64;
    let per_corruption_avg =
        per_corruption.values().sum::<f64>() / per_corruption.len() as f64;
    Ok(EvalReport {
        rows,
        per_corruption,
        per_category,
        overall,
        per_corruption_avg,
        clean_accuracy: None,
    })
}

/// Aggregate and insist that every requested (corruption, severity) pair is
/// present exactly once.
pub fn aggregate_requested(rows: Vec<EvalRow>, requested: &[CorruptionSpec]) -> Result<EvalReport> {
    for spec in requested {
        let found = rows
            .iter()
            .any(|r| r.corruption == spec.name && r.severity == spec.severity);
        if !found {
            return Err(Error::Dataset(format!(
                "missing evaluation for {} severity {}",
                spec.name, spec.severity
            )));
        }
    }
    aggregate(rows)
}

impl EvalReport {
    /// Category-summary CSV (one row, columns like the headline table).
    pub fn summary_csv(&self) -> String {
        let mut s = String::from("weather,blur,noise,digital,avg\n");
        let get = |c: &str| {
            self.per_category
                .get(c)
                .map(|v| format!("{v:.2}"))
                .unwrap_or_default()
        };
        s.push_str(&format!(
            "{},{},{},{},{:.2}\n",
            get("weather"),
            get("blur"),
            get("noise"),
            get("digital"),
            self.overall
        ));
        s
    }

    /// Per-row detail CSV.
    pub fn detail_csv(&self) -> String {
        let mut s = String::from("corruption,category,severity,accuracy\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{:.4}\n",
                r.corruption, r.category, r.severity, r.accuracy
            ));
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(name: &str, severity: u8, acc: f64) -> EvalRow {
        EvalRow {
            corruption: name.into(),
            category: category_of(name).unwrap(),
            severity,
            accuracy: acc,
        }
    }

    #[test]
    fn corruption_registry_is_complete() {
        assert_eq!(CORRUPTIONS.len(), 19);
        let weather = CORRUPTIONS.iter().filter(|(_, c)| *c == Category::Weather).count();
        let blur = CORRUPTIONS.iter().filter(|(_, c)| *c == Category::Blur).count();
        let noise = CORRUPTIONS.iter().filter(|(_, c)| *c == Category::Noise).count();
        let digital = CORRUPTIONS.iter().filter(|(_, c)| *c == Category::Digital).count();
        assert_eq!((weather, blur, noise, digital), (5, 5, 4, 5));
        assert!(category_of("nonexistent_blur").is_err());
    }

    #[test]
    fn single_corruption_drives_its_category() {
        let report = aggregate(vec![row("snow", 1, 100.0)]).unwrap();
        assert_eq!(report.per_category["weather"], 100.0);
        assert_eq!(report.overall, 100.0);
    }

    #[test]
    fn four_row_table_matches_hand_computed_means() {
        let rows = vec![
            row("snow", 1, 80.0),
            row("snow", 3, 60.0),
            row("defocus_blur", 1, 70.0),
            row("gaussian_noise", 1, 50.0),
            row("contrast", 1, 90.0),
        ];
        let report = aggregate(rows).unwrap();
        assert!((report.per_corruption["snow"] - 70.0).abs() < 1e-12);
        assert!((report.per_category["weather"] - 70.0).abs() < 1e-12);
        assert!((report.per_category["blur"] - 70.0).abs() < 1e-12);
        assert!((report.per_category["noise"] - 50.0).abs() < 1e-12);
        assert!((report.per_category["digital"] - 90.0).abs() < 1e-12);
        let expect = (70.0 + 70.0 + 50.0 + 90.0) / 4.0;
        assert!((report.overall - expect).abs() < 1e-12);
    }

    #[test]
    fn overall_mean_matches_published_table_convention() {
        // the published headline row: Avg 85.53 is the mean of the four
        // category scores 89.13 / 82.94 / 85.62 / 84.43
        let rows = vec![
            row("snow", 1, 89.13),
            row("defocus_blur", 1, 82.94),
            row("gaussian_noise", 1, 85.62),
            row("contrast", 1, 84.43),
        ];
        let report = aggregate(rows).unwrap();
        assert!((report.overall - 85.53).abs() < 0.005);
    }

    #[test]
    fn aggregate_requested_flags_missing() {
        let requested = CorruptionSpec::grid(&["snow", "fog"], &[1]).unwrap();
        let rows = vec![row("snow", 1, 50.0)];
        assert!(aggregate_requested(rows, &requested).is_err());
    }

    #[test]
    fn balanced_subset_is_deterministic_and_balanced() {
        // synthetic labels: 100 per class
        let mut labels = Vec::new();
        for i in 0..1000u32 {
            labels.push((i % 10) as u8);
        }
        let a = balanced_subset_indices(&labels, 200, 9).unwrap();
        let b = balanced_subset_indices(&labels, 200, 9).unwrap();
        assert_eq!(a, b);
        let c = balanced_subset_indices(&labels, 200, 10).unwrap();
        assert_ne!(a, c, "different seeds should pick different subsets");
        let mut hist = [0usize; 10];
        for &i in &a {
            hist[labels[i] as usize] += 1;
        }
        assert!(hist.iter().all(|&h| h == 20), "{hist:?}");
    }

    #[test]
    fn missing_source_mentions_fetch_instructions() {
        let err = load_source(Path::new("/nonexistent-data-root"), None, 0).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("cifar-10-binary.tar.gz"), "{msg}");
    }

    #[test]
    fn unknown_corruption_lists_valid_names() {
        let err = CorruptionSpec::new("warp_speed", 1).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("warp_speed") && msg.contains("gaussian_noise"));
    }

    #[test]
    fn cifar10c_hwc_to_chw_transpose_is_exact() {
        // stack with a distinct value per (h, w, c) so any transpose bug is
        // visible pixel by pixel
        let dir = tempfile::tempdir().unwrap();
        let c10c = dir.path().join("CIFAR-10-C");
        std::fs::create_dir_all(&c10c).unwrap();
        let rows = 2usize;
        let mut raw = vec![0u8; 5 * rows * IMG_BYTES];
        for img in 0..5 * rows {
            for h in 0..IMG_SIDE {
                for w in 0..IMG_SIDE {
                    for c in 0..3 {
                        raw[img * IMG_BYTES + h * IMG_SIDE * 3 + w * 3 + c] =
                            ((img + h * 7 + w * 3 + c * 11) % 251) as u8;
                    }
                }
            }
        }
        crate::npy::write_npy_u8(
            &c10c.join("fog.npy"),
            &[5 * rows, IMG_SIDE, IMG_SIDE, 3],
            &raw,
        )
        .unwrap();
        crate::npy::write_npy_i64(
            &c10c.join("labels.npy"),
            &[5 * rows],
            &vec![1i64; 5 * rows],
        )
        .unwrap();

        let ds = load_cifar10c_slice_rows(dir.path(), "fog", 3, rows).unwrap();
        assert_eq!(ds.len(), rows);
        let (batch, labels) = ds.batch(&[0, 1]);
        assert_eq!(labels, vec![1, 1]);
        for bi in 0..rows {
            let img = (3 - 1) * rows + bi; // severity-3 block
            for c in 0..3 {
                for h in 0..IMG_SIDE {
                    for w in 0..IMG_SIDE {
                        let want = ((img + h * 7 + w * 3 + c * 11) % 251) as f64 / 255.0;
                        let got = batch[[bi, c, h, w]];
                        assert!(
                            (got - want).abs() < 1e-12,
                            "mismatch at b{bi} c{c} h{h} w{w}: {got} vs {want}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn normalization_roundtrip_against_constants() {
        let norm = Normalization::default();
        let mut batch = ArrayD::from_elem(IxDyn(&[1, 3, 2, 2]), 0.5);
        norm.apply(&mut batch);
        for c in 0..3 {
            let want = (0.5 - norm.mean[c]) / norm.std[c];
            assert!((batch[[0, c, 0, 0]] - want).abs() < 1e-12);
        }
    }
}
