//! Category-discovery datasets: synthetic Gaussian problems, embedding-file
//! ingestion (csv / jsonl / bin), the labeled/unlabeled split protocol, and
//! paired stochastic views.

use std::collections::BTreeSet;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{GcdError, Result};
use crate::numeric::Mat64;
use crate::rng::Rng;

pub const BIN_MAGIC: &[u8; 4] = b"GCDE";
pub const BIN_VERSION: u16 = 1;

/// Label value for rows whose ground truth is unknown.
pub const UNKNOWN_LABEL: i32 = -1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FileFormat {
    Csv,
    Jsonl,
    Bin,
}

impl std::str::FromStr for FileFormat {
    type Err = GcdError;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(FileFormat::Csv),
            "jsonl" => Ok(FileFormat::Jsonl),
            "bin" => Ok(FileFormat::Bin),
            other => Err(GcdError::Config(format!("unknown format {other:?} (expected csv, jsonl or bin)"))),
        }
    }
}

/// A category-discovery problem: points with partial labels, where labels are
/// only ever given for a subset of the "old" classes.
#[derive(Debug, Clone, PartialEq)]
pub struct GcdDataset {
    /// N x D feature matrix.
    pub points: Mat64,
    /// Ground-truth class per row, in [0, k_total); -1 when unknown.
    pub true_labels: Vec<i32>,
    /// Whether the row's label is visible to training.
    pub labeled_mask: Vec<bool>,
    /// Classes present in the labeled set.
    pub old_classes: BTreeSet<u32>,
    /// Total number of classes, old and novel.
    pub k_total: usize,
}

impl GcdDataset {
    pub fn len(&self) -> usize {
        self.points.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.points.cols()
    }

    pub fn labeled_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labeled_mask[i]).collect()
    }

    pub fn unlabeled_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| !self.labeled_mask[i]).collect()
    }

    pub fn is_old_class(&self, class: i32) -> bool {
        class >= 0 && self.old_classes.contains(&(class as u32))
    }

    /// Enforces the split protocol and basic shape invariants.
    pub fn validate(&self) -> Result<()> {
        let n = self.points.rows();
        if n == 0 {
            return Err(GcdError::EmptyInput("dataset"));
        }
        if self.true_labels.len() != n || self.labeled_mask.len() != n {
            return Err(GcdError::LengthMismatch { left: self.true_labels.len(), right: n });
        }
        if !self.points.is_finite() {
            return Err(GcdError::InvariantViolation("non-finite feature value".into()));
        }
        if self.old_classes.is_empty() {
            return Err(GcdError::InvariantViolation("old class set is empty".into()));
        }
        if self.k_total < self.old_classes.len() {
            return Err(GcdError::InvariantViolation(format!(
                "k_total = {} smaller than |old classes| = {}",
                self.k_total,
                self.old_classes.len()
            )));
        }
        if let Some(&c) = self.old_classes.iter().next_back() {
            if c as usize >= self.k_total {
                return Err(GcdError::InvariantViolation(format!(
                    "old class id {c} outside [0, {})",
                    self.k_total
                )));
            }
        }
        for (i, (&label, &labeled)) in self.true_labels.iter().zip(&self.labeled_mask).enumerate() {
            if label >= self.k_total as i32 {
                return Err(GcdError::InvariantViolation(format!(
                    "row {i}: label {label} outside [0, {})",
                    self.k_total
                )));
            }
            if label < UNKNOWN_LABEL {
                return Err(GcdError::InvariantViolation(format!("row {i}: label {label} invalid")));
            }
            if labeled {
                if label < 0 {
                    return Err(GcdError::InvariantViolation(format!("row {i}: labeled but no ground truth")));
                }
                if !self.old_classes.contains(&(label as u32)) {
                    return Err(GcdError::InvariantViolation(format!(
                        "row {i}: labeled point of novel class {label}"
                    )));
                }
            }
        }
        if self.labeled_mask.iter().all(|&m| m) {
            return Err(GcdError::InvariantViolation("no unlabeled point".into()));
        }
        Ok(())
    }
}

/// Synthetic-problem generation settings.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct GenConfig {
    pub k_total: usize,
    pub k_old: usize,
    pub dim: usize,
    pub n_per_class: usize,
    pub class_sep: f64,
    pub sigma: f64,
    pub labeled_ratio: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            k_total: 6,
            k_old: 3,
            dim: 16,
            n_per_class: 100,
            class_sep: 8.0,
            sigma: 1.0,
            labeled_ratio: 0.5,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_old == 0 || self.k_old > self.k_total {
            return Err(GcdError::Config(format!(
                "k_old must satisfy 1 <= k_old <= k_total, got k_old={} k_total={}",
                self.k_old, self.k_total
            )));
        }
        if self.dim == 0 || self.n_per_class == 0 {
            return Err(GcdError::Config("dim and n_per_class must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.labeled_ratio) {
            return Err(GcdError::Config(format!("labeled_ratio {} outside [0, 1]", self.labeled_ratio)));
        }
        if self.sigma < 0.0 || self.class_sep < 0.0 {
            return Err(GcdError::Config("sigma and class_sep must be nonnegative".into()));
        }
        if self.k_old == self.k_total && self.labeled_ratio >= 1.0 {
            return Err(GcdError::Config(
                "k_old == k_total with labeled_ratio 1.0 leaves no unlabeled data".into(),
            ));
        }
        Ok(())
    }
}

const MEAN_PLACEMENT_ATTEMPTS: usize = 1000;

/// Draws class means uniformly on a sphere of radius `class_sep`, rejecting
/// candidates closer than `class_sep` to an already-placed mean.
fn place_class_means(cfg: &GenConfig, rng: &mut Rng) -> Result<Vec<Vec<f64>>> {
    let radius = cfg.class_sep.max(1e-12);
    let mut means: Vec<Vec<f64>> = Vec::with_capacity(cfg.k_total);
    for _ in 0..cfg.k_total {
        let mut placed = false;
        for _ in 0..MEAN_PLACEMENT_ATTEMPTS {
            let raw = rng.normal_vec(cfg.dim, 0.0, 1.0);
            let n = crate::numeric::norm(&raw);
            if n <= 1e-12 {
                continue;
            }
            let candidate: Vec<f64> = raw.iter().map(|x| x * radius / n).collect();
            let ok = means.iter().all(|m| {
                let d2: f64 = m.iter().zip(&candidate).map(|(a, b)| (a - b) * (a - b)).sum();
                d2.sqrt() >= cfg.class_sep
            });
            if ok {
                means.push(candidate);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(GcdError::InfeasibleSeparation {
                k: cfg.k_total,
                sep: cfg.class_sep,
                attempts: MEAN_PLACEMENT_ATTEMPTS,
            });
        }
    }
    Ok(means)
}

/// Generates a synthetic Gaussian-mixture discovery problem. The first
/// `k_old` classes are the labeled ("old") ones; within each, a
/// `labeled_ratio` fraction of points (rounded) is marked labeled, sampled
/// uniformly per class.
pub fn gen_gaussian_gcd(cfg: &GenConfig, rng: &Rng) -> Result<GcdDataset> {
    cfg.validate()?;
    let mut mean_rng = rng.split(0);
    let mut noise_rng = rng.split(1);
    let mut label_rng = rng.split(2);

    let means = place_class_means(cfg, &mut mean_rng)?;
    let n = cfg.k_total * cfg.n_per_class;
    let mut points = Mat64::zeros(n, cfg.dim);
    let mut true_labels = Vec::with_capacity(n);
    let mut labeled_mask = vec![false; n];

    for class in 0..cfg.k_total {
        for j in 0..cfg.n_per_class {
            let row = class * cfg.n_per_class + j;
            let dst = points.row_mut(row);
            for (d, &m) in means[class].iter().enumerate() {
                dst[d] = m + cfg.sigma * noise_rng.normal();
            }
            true_labels.push(class as i32);
        }
    }

    let per_class_labeled = (cfg.labeled_ratio * cfg.n_per_class as f64).round() as usize;
    for class in 0..cfg.k_old {
        let picks = label_rng.sample_without_replacement(cfg.n_per_class, per_class_labeled.min(cfg.n_per_class));
        for j in picks {
            labeled_mask[class * cfg.n_per_class + j] = true;
        }
    }

    let dataset = GcdDataset {
        points,
        true_labels,
        labeled_mask,
        old_classes: (0..cfg.k_old as u32).collect(),
        k_total: cfg.k_total,
    };
    dataset.validate()?;
    Ok(dataset)
}

// ---------------------------------------------------------------------------
// File formats
// ---------------------------------------------------------------------------

fn derive_metadata(true_labels: &[i32], labeled_mask: &[bool]) -> (BTreeSet<u32>, usize) {
    let old: BTreeSet<u32> = true_labels
        .iter()
        .zip(labeled_mask)
        .filter(|(&l, &m)| m && l >= 0)
        .map(|(&l, _)| l as u32)
        .collect();
    let k_total = true_labels
        .iter()
        .filter(|&&l| l >= 0)
        .map(|&l| l as usize + 1)
        .max()
        .unwrap_or(0)
        .max(old.iter().next_back().map_or(0, |&c| c as usize + 1));
    (old, k_total)
}

pub fn save_embeddings(dataset: &GcdDataset, path: &Path, format: FileFormat) -> Result<()> {
    match format {
        FileFormat::Csv => save_csv(dataset, path),
        FileFormat::Jsonl => save_jsonl(dataset, path),
        FileFormat::Bin => save_bin(dataset, path),
    }
}

pub fn load_embeddings(path: &Path, format: FileFormat) -> Result<GcdDataset> {
    let dataset = match format {
        FileFormat::Csv => load_csv(path)?,
        FileFormat::Jsonl => load_jsonl(path)?,
        FileFormat::Bin => load_bin(path)?,
    };
    dataset.validate()?;
    Ok(dataset)
}

fn save_csv(dataset: &GcdDataset, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["label".to_string(), "is_labeled".to_string()];
    header.extend((0..dataset.dim()).map(|d| format!("f{d}")));
    w.write_record(&header).map_err(csv_io)?;
    for i in 0..dataset.len() {
        let mut record = vec![dataset.true_labels[i].to_string(), u8::from(dataset.labeled_mask[i]).to_string()];
        record.extend(dataset.points.row(i).iter().map(|v| format!("{v}")));
        w.write_record(&record).map_err(csv_io)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_io(e: csv::Error) -> GcdError {
    GcdError::ParseError { line: 0, msg: e.to_string() }
}

fn load_csv(path: &Path) -> Result<GcdDataset> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let headers = reader.headers().map_err(csv_io)?.clone();
    if headers.len() < 3 || &headers[0] != "label" || &headers[1] != "is_labeled" {
        return Err(GcdError::ParseError {
            line: 1,
            msg: "expected header label,is_labeled,f0,...".into(),
        });
    }
    let dim = headers.len() - 2;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut true_labels = Vec::new();
    let mut labeled_mask = Vec::new();
    for (idx, record) in reader.records().enumerate() {
        let line = idx + 2; // 1-based, after the header
        let record = record.map_err(|e| GcdError::ParseError { line, msg: e.to_string() })?;
        if record.len() != dim + 2 {
            return Err(GcdError::ParseError {
                line,
                msg: format!("expected {} fields, got {}", dim + 2, record.len()),
            });
        }
        let label: i32 = record[0]
            .trim()
            .parse()
            .map_err(|e| GcdError::ParseError { line, msg: format!("label: {e}") })?;
        let is_labeled: u8 = record[1]
            .trim()
            .parse()
            .map_err(|e| GcdError::ParseError { line, msg: format!("is_labeled: {e}") })?;
        if is_labeled > 1 {
            return Err(GcdError::ParseError { line, msg: format!("is_labeled must be 0 or 1, got {is_labeled}") });
        }
        let mut row = Vec::with_capacity(dim);
        for d in 0..dim {
            let v: f64 = record[d + 2]
                .trim()
                .parse()
                .map_err(|e| GcdError::ParseError { line, msg: format!("f{d}: {e}") })?;
            row.push(v);
        }
        true_labels.push(label);
        labeled_mask.push(is_labeled == 1);
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(GcdError::EmptyInput("csv dataset"));
    }
    let (old_classes, k_total) = derive_metadata(&true_labels, &labeled_mask);
    Ok(GcdDataset { points: Mat64::from_rows(&rows)?, true_labels, labeled_mask, old_classes, k_total })
}

#[derive(Serialize, Deserialize)]
struct JsonlRow {
    label: i32,
    is_labeled: u8,
    features: Vec<f64>,
}

fn save_jsonl(dataset: &GcdDataset, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for i in 0..dataset.len() {
        let row = JsonlRow {
            label: dataset.true_labels[i],
            is_labeled: u8::from(dataset.labeled_mask[i]),
            features: dataset.points.row(i).to_vec(),
        };
        serde_json::to_writer(&mut w, &row)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn load_jsonl(path: &Path) -> Result<GcdDataset> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut true_labels = Vec::new();
    let mut labeled_mask = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row: JsonlRow = serde_json::from_str(&line)
            .map_err(|e| GcdError::ParseError { line: line_no, msg: e.to_string() })?;
        if row.is_labeled > 1 {
            return Err(GcdError::ParseError { line: line_no, msg: format!("is_labeled must be 0 or 1, got {}", row.is_labeled) });
        }
        if let Some(prev) = rows.first() {
            if prev.len() != row.features.len() {
                return Err(GcdError::ParseError {
                    line: line_no,
                    msg: format!("dimension {} differs from first row's {}", row.features.len(), prev.len()),
                });
            }
        }
        true_labels.push(row.label);
        labeled_mask.push(row.is_labeled == 1);
        rows.push(row.features);
    }
    if rows.is_empty() {
        return Err(GcdError::EmptyInput("jsonl dataset"));
    }
    let (old_classes, k_total) = derive_metadata(&true_labels, &labeled_mask);
    Ok(GcdDataset { points: Mat64::from_rows(&rows)?, true_labels, labeled_mask, old_classes, k_total })
}

fn save_bin(dataset: &GcdDataset, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    w.write_all(BIN_MAGIC)?;
    w.write_all(&BIN_VERSION.to_le_bytes())?;
    w.write_all(&(dataset.len() as u64).to_le_bytes())?;
    w.write_all(&(dataset.dim() as u64).to_le_bytes())?;
    w.write_all(&(dataset.k_total as u32).to_le_bytes())?;
    w.write_all(&(dataset.old_classes.len() as u32).to_le_bytes())?;
    for &c in &dataset.old_classes {
        w.write_all(&c.to_le_bytes())?;
    }
    for i in 0..dataset.len() {
        w.write_all(&dataset.true_labels[i].to_le_bytes())?;
        w.write_all(&[u8::from(dataset.labeled_mask[i])])?;
        for &v in dataset.points.row(i) {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn bin_err(msg: impl Into<String>) -> GcdError {
    GcdError::ParseError { line: 0, msg: msg.into() }
}

fn load_bin(path: &Path) -> Result<GcdDataset> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != BIN_MAGIC {
        return Err(bin_err("bad magic bytes (expected GCDE)"));
    }
    let mut u16buf = [0u8; 2];
    r.read_exact(&mut u16buf)?;
    let version = u16::from_le_bytes(u16buf);
    if version != BIN_VERSION {
        return Err(bin_err(format!("unsupported version {version}")));
    }
    let mut u64buf = [0u8; 8];
    r.read_exact(&mut u64buf)?;
    let n = u64::from_le_bytes(u64buf) as usize;
    r.read_exact(&mut u64buf)?;
    let dim = u64::from_le_bytes(u64buf) as usize;
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf)?;
    let k_total = u32::from_le_bytes(u32buf) as usize;
    r.read_exact(&mut u32buf)?;
    let k_old = u32::from_le_bytes(u32buf) as usize;
    let mut old_classes = BTreeSet::new();
    for _ in 0..k_old {
        r.read_exact(&mut u32buf)?;
        old_classes.insert(u32::from_le_bytes(u32buf));
    }
    if n == 0 || dim == 0 {
        return Err(bin_err(format!("degenerate shape {n}x{dim}")));
    }
    let mut points = Mat64::zeros(n, dim);
    let mut true_labels = Vec::with_capacity(n);
    let mut labeled_mask = Vec::with_capacity(n);
    let mut f32buf = [0u8; 4];
    for i in 0..n {
        r.read_exact(&mut u32buf).map_err(|_| bin_err(format!("truncated at record {i}")))?;
        true_labels.push(i32::from_le_bytes(u32buf));
        let mut flag = [0u8; 1];
        r.read_exact(&mut flag)?;
        if flag[0] > 1 {
            return Err(bin_err(format!("record {i}: is_labeled must be 0 or 1")));
        }
        labeled_mask.push(flag[0] == 1);
        let row = points.row_mut(i);
        for v in row.iter_mut() {
            r.read_exact(&mut f32buf).map_err(|_| bin_err(format!("truncated features at record {i}")))?;
            *v = f32::from_le_bytes(f32buf) as f64;
        }
    }
    Ok(GcdDataset { points, true_labels, labeled_mask, old_classes, k_total })
}

// ---------------------------------------------------------------------------
// Stochastic views
// ---------------------------------------------------------------------------

/// Vector-domain analogue of paired image augmentations: additive Gaussian
/// noise plus independent coordinate dropout.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    pub noise_sigma: f64,
    pub dropout_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig { noise_sigma: 0.1, dropout_prob: 0.05 }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.noise_sigma < 0.0 {
            return Err(GcdError::Config(format!("noise_sigma {} negative", self.noise_sigma)));
        }
        if !(0.0..1.0).contains(&self.dropout_prob) {
            return Err(GcdError::Config(format!("dropout_prob {} outside [0, 1)", self.dropout_prob)));
        }
        Ok(())
    }
}

/// Two stochastic views of the same rows, with their dataset indices.
#[derive(Debug, Clone)]
pub struct ViewPair {
    pub view_a: Mat64,
    pub view_b: Mat64,
    pub source_indices: Vec<usize>,
}

fn perturb(rows: &Mat64, cfg: &AugmentConfig, rng: &mut Rng) -> Mat64 {
    let mut out = rows.clone();
    for v in out.data_mut() {
        if cfg.noise_sigma > 0.0 {
            *v += cfg.noise_sigma * rng.normal();
        }
        if cfg.dropout_prob > 0.0 && rng.next_f64() < cfg.dropout_prob {
            *v = 0.0;
        }
    }
    out
}

/// Produces two independently perturbed views of `rows`.
pub fn augment_pair(rows: &Mat64, source_indices: &[usize], cfg: &AugmentConfig, rng: &Rng) -> ViewPair {
    let mut rng_a = rng.split(0);
    let mut rng_b = rng.split(1);
    ViewPair {
        view_a: perturb(rows, cfg, &mut rng_a),
        view_b: perturb(rows, cfg, &mut rng_b),
        source_indices: source_indices.to_vec(),
    }
}
