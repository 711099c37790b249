//! Labeled datasets: synthetic 2-D/low-dimensional generators and small image
//! loaders (IDX and CSV, pixel values scaled to [0, 1]).

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: Split,
    /// Where the data came from, e.g. `two_gaussians(seed=7)` or a file path.
    pub origin: String,
}

impl Dataset {
    pub fn new(features: Tensor, labels: Vec<usize>, num_classes: usize, split: Split) -> Result<Self> {
        if features.shape().len() != 2 || features.rows() != labels.len() {
            return Err(Error::shape(
                "dataset",
                format!("{} labels for features {:?}", labels.len(), features.shape()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::Config(format!("label {bad} >= {num_classes} classes")));
        }
        Ok(Dataset {
            features,
            labels,
            num_classes,
            split,
            origin: String::from("in-memory"),
        })
    }

    pub fn with_origin(mut self, origin: impl Into<String>) -> Self {
        self.origin = origin.into();
        self
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    /// Rows `idx` as a new dataset in the given order.
    pub fn subset(&self, idx: &[usize]) -> Result<Dataset> {
        if idx.is_empty() {
            return Err(Error::EmptyDataset);
        }
        Ok(Dataset {
            features: self.features.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            split: self.split,
            origin: self.origin.clone(),
        })
    }

    /// Consecutive chunks of at most `size` rows.
    pub fn chunks(&self, size: usize) -> Vec<Vec<usize>> {
        let idx: Vec<usize> = (0..self.len()).collect();
        idx.chunks(size.max(1)).map(|c| c.to_vec()).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// Max L2 norm over samples (`C_x`).
    pub fn max_norm(&self) -> f64 {
        (0..self.len())
            .map(|i| self.features.row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
            .fold(0.0, f64::max)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    TwoGaussians,
    Moons,
    Spirals,
    XorGrid,
}

/// Synthetic generator parameters.
///
/// `two_gaussians` places the class means at `±separation·noise/2` on the
/// first axis; the remaining `dim − 1` axes are isotropic noise. Optional
/// `nonrobust_dims` append features whose class means sit at `±nonrobust_shift`
/// with spread `nonrobust_noise`: highly predictive but flippable by a small
/// L∞ perturbation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorParams {
    pub kind: DatasetKind,
    pub noise: f64,
    pub separation: f64,
    pub dim: usize,
    pub classes: usize,
    pub nonrobust_dims: usize,
    pub nonrobust_shift: f64,
    pub nonrobust_noise: f64,
}

impl Default for GeneratorParams {
    fn default() -> Self {
        GeneratorParams {
            kind: DatasetKind::TwoGaussians,
            noise: 1.0,
            separation: 4.0,
            dim: 2,
            classes: 2,
            nonrobust_dims: 0,
            nonrobust_shift: 0.4,
            nonrobust_noise: 0.15,
        }
    }
}

/// Generates `n` samples with exactly balanced (up to remainder) classes in a
/// seeded random order.
pub fn generate_dataset(params: &GeneratorParams, n: usize, seed: u64) -> Result<Dataset> {
    if n < 100 {
        return Err(Error::Config(format!("generated datasets need n >= 100, got {n}")));
    }
    if params.noise < 0.0 || !params.noise.is_finite() {
        return Err(Error::Config("noise must be finite and >= 0".into()));
    }
    let classes = match params.kind {
        DatasetKind::Spirals => params.classes,
        _ => 2,
    };
    if classes < 2 {
        return Err(Error::Config("need at least two classes".into()));
    }
    let mut rng = rng::seeded(rng::derive(seed, rng::stream::DATA));
    let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    labels.shuffle(&mut rng);
    let mut rows = Vec::with_capacity(n);
    for &y in &labels {
        let mut row = match params.kind {
            DatasetKind::TwoGaussians => two_gaussians_row(params, y, &mut rng)?,
            DatasetKind::Moons => moons_row(params.noise, y, &mut rng),
            DatasetKind::Spirals => spirals_row(params.noise, y, classes, &mut rng),
            DatasetKind::XorGrid => xor_row(params.noise, y, &mut rng),
        };
        let sign = if y == 1 { 1.0 } else { -1.0 };
        for _ in 0..params.nonrobust_dims {
            let z: f64 = StandardNormal.sample(&mut rng);
            row.push(sign * params.nonrobust_shift + params.nonrobust_noise * z);
        }
        rows.push(row);
    }
    let kind = serde_json::to_value(params.kind)?;
    Ok(Dataset::new(Tensor::from_rows(&rows)?, labels, classes, Split::Train)?
        .with_origin(format!("{}(seed={seed})", kind.as_str().unwrap_or("generated"))))
}

/// Disjoint train/test splits drawn from one seeded stream.
pub fn generate_split(params: &GeneratorParams, n_train: usize, n_test: usize, seed: u64) -> Result<(Dataset, Dataset)> {
    let all = generate_dataset(params, n_train + n_test, seed)?;
    if n_train == 0 || n_test == 0 {
        return Err(Error::EmptyDataset);
    }
    let mut train = all.subset(&(0..n_train).collect::<Vec<_>>())?;
    let mut test = all.subset(&(n_train..n_train + n_test).collect::<Vec<_>>())?;
    train.split = Split::Train;
    test.split = Split::Test;
    Ok((train, test))
}

fn gauss<R: Rng>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

fn two_gaussians_row<R: Rng>(p: &GeneratorParams, y: usize, rng: &mut R) -> Result<Vec<f64>> {
    if p.dim == 0 {
        return Err(Error::Config("two_gaussians needs dim >= 1".into()));
    }
    let sign = if y == 1 { 1.0 } else { -1.0 };
    let mut row = Vec::with_capacity(p.dim);
    row.push(sign * p.separation * p.noise / 2.0 + p.noise * gauss(rng));
    for _ in 1..p.dim {
        row.push(p.noise * gauss(rng));
    }
    Ok(row)
}

fn moons_row<R: Rng>(noise: f64, y: usize, rng: &mut R) -> Vec<f64> {
    let t = rng.random_range(0.0..std::f64::consts::PI);
    let (x0, x1) = if y == 0 {
        (t.cos(), t.sin())
    } else {
        (1.0 - t.cos(), 0.5 - t.sin())
    };
    vec![x0 + noise * gauss(rng), x1 + noise * gauss(rng)]
}

fn spirals_row<R: Rng>(noise: f64, y: usize, classes: usize, rng: &mut R) -> Vec<f64> {
    let t: f64 = rng.random_range(0.1..1.0);
    let angle = 3.0 * std::f64::consts::PI * t + 2.0 * std::f64::consts::PI * y as f64 / classes as f64;
    vec![t * angle.cos() + noise * gauss(rng), t * angle.sin() + noise * gauss(rng)]
}

fn xor_row<R: Rng>(noise: f64, y: usize, rng: &mut R) -> Vec<f64> {
    // label 1 iff exactly one coordinate is positive
    let first_pos = rng.random_bool(0.5);
    let second_pos = if y == 1 { !first_pos } else { first_pos };
    let c = |pos: bool| if pos { 1.0 } else { -1.0 };
    vec![c(first_pos) + noise * gauss(rng), c(second_pos) + noise * gauss(rng)]
}

/// On-disk image source.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "format", deny_unknown_fields)]
pub enum ImageSource {
    /// IDX pair: images (magic 0x803) and labels (magic 0x801).
    Idx { images: PathBuf, labels: PathBuf },
    /// One sample per line: `label,p0,p1,...` with pixels in 0..=255.
    Csv { path: PathBuf },
}

/// Loads at most `limit` images (file order), scaling pixels by 1/255.
pub fn load_small_images(source: &ImageSource, limit: Option<usize>) -> Result<Dataset> {
    let (features, labels, origin) = match source {
        ImageSource::Idx { images, labels } => {
            let (px, n_img, dim) = read_idx_images(images, limit)?;
            let ys = read_idx_labels(labels, limit)?;
            if ys.len() != n_img {
                return Err(malformed(labels, format!("{} labels for {n_img} images", ys.len())));
            }
            (Tensor::matrix(n_img, dim, px)?, ys, images.display().to_string())
        }
        ImageSource::Csv { path } => {
            let (rows, ys) = read_csv(path, limit)?;
            (Tensor::from_rows(&rows)?, ys, path.display().to_string())
        }
    };
    let classes = labels.iter().copied().max().unwrap_or(0) + 1;
    Ok(Dataset::new(features, labels, classes, Split::Train)?.with_origin(origin))
}

fn malformed(path: &Path, detail: impl Into<String>) -> Error {
    Error::Malformed {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| malformed(path, "truncated header"))
}

fn read_idx_images(path: &Path, limit: Option<usize>) -> Result<(Vec<f64>, usize, usize)> {
    let bytes = fs::read(path)?;
    if be_u32(&bytes, 0, path)? != 0x0000_0803 {
        return Err(malformed(path, "bad image magic (expected 0x00000803)"));
    }
    let n = be_u32(&bytes, 4, path)? as usize;
    let rows = be_u32(&bytes, 8, path)? as usize;
    let cols = be_u32(&bytes, 12, path)? as usize;
    let dim = rows * cols;
    if dim == 0 {
        return Err(malformed(path, "zero-sized images"));
    }
    let take = limit.map_or(n, |l| l.min(n));
    let payload = &bytes[16..];
    if payload.len() < n * dim {
        return Err(malformed(
            path,
            format!("truncated payload: {} bytes for {n} images of {dim} pixels", payload.len()),
        ));
    }
    let px = payload[..take * dim].iter().map(|&b| f64::from(b) / 255.0).collect();
    Ok((px, take, dim))
}

fn read_idx_labels(path: &Path, limit: Option<usize>) -> Result<Vec<usize>> {
    let bytes = fs::read(path)?;
    if be_u32(&bytes, 0, path)? != 0x0000_0801 {
        return Err(malformed(path, "bad label magic (expected 0x00000801)"));
    }
    let n = be_u32(&bytes, 4, path)? as usize;
    let payload = &bytes[8..];
    if payload.len() < n {
        return Err(malformed(path, "truncated label payload"));
    }
    let take = limit.map_or(n, |l| l.min(n));
    Ok(payload[..take].iter().map(|&b| b as usize).collect())
}

fn read_csv(path: &Path, limit: Option<usize>) -> Result<(Vec<Vec<f64>>, Vec<usize>)> {
    let text = fs::read_to_string(path)?;
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if limit.is_some_and(|l| rows.len() >= l) {
            break;
        }
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split(',').map(str::trim);
        let first = fields.next().unwrap_or_default();
        let Ok(label) = first.parse::<usize>() else {
            if lineno == 0 {
                continue; // header
            }
            return Err(malformed(path, format!("line {}: bad label {first:?}", lineno + 1)));
        };
        let px = fields
            .map(|f| {
                f.parse::<f64>()
                    .ok()
                    .filter(|v| (0.0..=255.0).contains(v))
                    .map(|v| v / 255.0)
                    .ok_or_else(|| malformed(path, format!("line {}: bad pixel {f:?}", lineno + 1)))
            })
            .collect::<Result<Vec<_>>>()?;
        if let Some(prev) = rows.first().map(|r: &Vec<f64>| r.len()) {
            if prev != px.len() {
                return Err(malformed(path, format!("line {}: ragged row", lineno + 1)));
            }
        }
        rows.push(px);
        labels.push(label);
    }
    if rows.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok((rows, labels))
}
