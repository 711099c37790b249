//! Hash-based mutual information in the EDGE style.
//!
//! Each variable is (optionally) randomly projected, rescaled per dimension
//! by its interquartile range, and hashed onto a randomly shifted grid. The
//! plug-in estimate on the joint bucket histogram is averaged over a ladder
//! of bandwidths. The same histogram also yields the likelihood-ratio
//! expectation `Û = Σ (N_ij/n)·(n·N_ij/(N_i·M_j))`. X and Y share the
//! projection seed and, on each rung, the grid-offset draw.

use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HashConfig {
    /// Grid cell width `ε_h` in the (rescaled) coordinates being hashed.
    pub bandwidth: f64,
    /// Draw the grid offset uniformly from `[0, ε_h)^d`; zero offset otherwise.
    pub random_shift: bool,
    /// Project to this many dimensions with a seeded Gaussian matrix when wider.
    pub projection_dim: Option<usize>,
    pub seed: u64,
}

/// Grid cell of every row: `floor((P x + shift) / ε_h)` per coordinate.
pub fn hash_samples(x: &Tensor, cfg: &HashConfig) -> Result<Vec<Vec<i64>>> {
    if !(cfg.bandwidth > 0.0 && cfg.bandwidth.is_finite()) {
        return Err(Error::Config(format!("hash bandwidth must be > 0, got {}", cfg.bandwidth)));
    }
    if let Some(p) = cfg.projection_dim {
        if p == 0 {
            return Err(Error::Config("projection_dim must be >= 1".into()));
        }
    }
    x.check_finite("hash_samples")?;
    let z = match cfg.projection_dim {
        Some(p) if p < x.cols() => project(x, p, cfg.seed),
        _ => x.clone(),
    };
    let shift = grid_shift(z.cols(), cfg.bandwidth, cfg.random_shift, cfg.seed);
    Ok(cells(&z, cfg.bandwidth, &shift))
}

fn project(x: &Tensor, p: usize, seed: u64) -> Tensor {
    let d = x.cols();
    let mut r = rng::seeded(rng::derive(seed, 0x5052_4f4a));
    let scale = 1.0 / (p as f64).sqrt();
    let m: Vec<f64> = (0..d * p)
        .map(|_| {
            let v: f64 = StandardNormal.sample(&mut r);
            v * scale
        })
        .collect();
    let m = Tensor::from_parts(vec![d, p], m);
    x.matmul(&m).expect("projection shapes agree")
}

fn grid_shift(d: usize, eps: f64, random: bool, seed: u64) -> Vec<f64> {
    if !random {
        return vec![0.0; d];
    }
    let mut r = rng::seeded(rng::derive(seed, 0x5348_4946));
    (0..d).map(|_| r.random_range(0.0..eps)).collect()
}

fn cells(z: &Tensor, eps: f64, shift: &[f64]) -> Vec<Vec<i64>> {
    (0..z.rows())
        .map(|i| {
            z.row(i)
                .iter()
                .zip(shift)
                .map(|(&v, &s)| ((v + s) / eps).floor() as i64)
                .collect()
        })
        .collect()
}

/// Dense ids `0..k` for bucket keys, in order of first appearance.
fn intern<K: std::hash::Hash + Eq + Clone>(keys: &[K]) -> (Vec<usize>, usize) {
    let mut map: HashMap<K, usize> = HashMap::new();
    let ids = keys
        .iter()
        .map(|k| {
            let next = map.len();
            *map.entry(k.clone()).or_insert(next)
        })
        .collect();
    (ids, map.len())
}

#[derive(Clone, Debug, PartialEq)]
pub struct JointHistogram {
    pub n: usize,
    /// `N_i`
    pub x_counts: Vec<usize>,
    /// `M_j`
    pub y_counts: Vec<usize>,
    /// Nonzero `N_ij`.
    pub joint: BTreeMap<(usize, usize), usize>,
}

impl JointHistogram {
    /// Histogram of paired bucket ids.
    pub fn from_ids(x: &[usize], y: &[usize]) -> Result<Self> {
        if x.len() != y.len() {
            return Err(Error::shape("joint histogram", format!("{} vs {} samples", x.len(), y.len())));
        }
        if x.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let kx = x.iter().max().map_or(0, |m| m + 1);
        let ky = y.iter().max().map_or(0, |m| m + 1);
        let mut x_counts = vec![0; kx];
        let mut y_counts = vec![0; ky];
        let mut joint = BTreeMap::new();
        for (&a, &b) in x.iter().zip(y) {
            x_counts[a] += 1;
            y_counts[b] += 1;
            *joint.entry((a, b)).or_insert(0) += 1;
        }
        Ok(JointHistogram {
            n: x.len(),
            x_counts,
            y_counts,
            joint,
        })
    }

    /// Histogram from a dense count matrix `counts[i][j] = N_ij`.
    pub fn from_counts(counts: &[Vec<usize>]) -> Result<Self> {
        let cols = counts.first().map_or(0, |r| r.len());
        if counts.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("joint histogram", "ragged count matrix"));
        }
        let mut x_counts = vec![0; counts.len()];
        let mut y_counts = vec![0; cols];
        let mut joint = BTreeMap::new();
        for (i, row) in counts.iter().enumerate() {
            for (j, &c) in row.iter().enumerate() {
                if c > 0 {
                    x_counts[i] += c;
                    y_counts[j] += c;
                    joint.insert((i, j), c);
                }
            }
        }
        let n = x_counts.iter().sum();
        if n == 0 {
            return Err(Error::EmptyDataset);
        }
        Ok(JointHistogram {
            n,
            x_counts,
            y_counts,
            joint,
        })
    }

    /// Occupied `x` and `y` buckets.
    pub fn occupied(&self) -> (usize, usize) {
        (
            self.x_counts.iter().filter(|&&c| c > 0).count(),
            self.y_counts.iter().filter(|&&c| c > 0).count(),
        )
    }
}

/// Plug-in MI `Σ (N_ij/n)·ln(n·N_ij/(N_i·M_j))` in nats.
pub fn base_mi(h: &JointHistogram) -> f64 {
    let n = h.n as f64;
    h.joint
        .iter()
        .map(|(&(i, j), &c)| {
            let c = c as f64;
            (c / n) * (n * c / (h.x_counts[i] as f64 * h.y_counts[j] as f64)).ln()
        })
        .sum()
}

/// Plug-in likelihood-ratio expectation `Σ (N_ij/n)·(n·N_ij/(N_i·M_j))`; at least 1.
pub fn ratio_expectation(h: &JointHistogram) -> f64 {
    let n = h.n as f64;
    h.joint
        .iter()
        .map(|(&(i, j), &c)| {
            let c = c as f64;
            (c / n) * (n * c / (h.x_counts[i] as f64 * h.y_counts[j] as f64))
        })
        .sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MiConfig {
    /// Number of ladder rungs `T`.
    pub ladder: usize,
    /// Bandwidth multiplier between rungs.
    pub ladder_ratio: f64,
    /// Per-dimension base scale is IQR / `iqr_divisor`.
    pub iqr_divisor: f64,
    /// The base bandwidth grows by 25% until each variable occupies at most
    /// `max(1, cell_budget·√n)` cells.
    pub cell_budget: f64,
    pub projection_dim: usize,
    /// Ensemble weights, one per rung; uniform when absent.
    pub weights: Option<Vec<f64>>,
    /// Classes with fewer samples are skipped by [`conditional_mi`].
    pub min_class_samples: usize,
    pub seed: u64,
}

impl Default for MiConfig {
    fn default() -> Self {
        MiConfig {
            ladder: 4,
            ladder_ratio: 2.0,
            iqr_divisor: 8.0,
            cell_budget: 0.35,
            projection_dim: 8,
            weights: None,
            min_class_samples: 50,
            seed: 0,
        }
    }
}

impl MiConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ladder == 0 {
            return Err(Error::Config("mi ladder needs at least one bandwidth".into()));
        }
        if !(self.ladder_ratio > 0.0 && self.iqr_divisor > 0.0 && self.cell_budget > 0.0) || self.projection_dim == 0 {
            return Err(Error::Config("mi ladder_ratio, iqr_divisor, cell_budget and projection_dim must be positive".into()));
        }
        self.ensemble_weights().map(|_| ())
    }

    pub fn ensemble_weights(&self) -> Result<Vec<f64>> {
        match &self.weights {
            None => Ok(vec![1.0 / self.ladder as f64; self.ladder]),
            Some(w) => {
                let s: f64 = w.iter().sum();
                if w.len() != self.ladder || (s - 1.0).abs() > 1e-9 {
                    return Err(Error::Config(format!(
                        "{} ensemble weights summing to {s}; need {} summing to 1",
                        w.len(),
                        self.ladder
                    )));
                }
                Ok(w.clone())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MIEstimate {
    /// `max(0, raw_value)`.
    pub value_nats: f64,
    pub raw_value: f64,
    /// Bandwidth of each rung for X and Y, in IQR-scaled units.
    pub bandwidths: Vec<(f64, f64)>,
    pub weights: Vec<f64>,
    pub base_values: Vec<f64>,
    /// Weighted `Û` over the rungs.
    pub ratio_expectation: f64,
    pub ratio_values: Vec<f64>,
    pub samples: usize,
}

/// One variable prepared for hashing: projected, rescaled to unit base scale
/// and anchored at its per-dimension minimum.
struct Prepared {
    z: Tensor,
    base: f64,
}

fn prepare(x: &Tensor, cfg: &MiConfig) -> Prepared {
    let x = if x.cols() > cfg.projection_dim {
        project(x, cfg.projection_dim, cfg.seed)
    } else {
        x.clone()
    };
    let (n, d) = (x.rows(), x.cols());
    let mut scale = Vec::with_capacity(d);
    let mut lo = Vec::with_capacity(d);
    for c in 0..d {
        let mut col: Vec<f64> = (0..n).map(|r| x.get2(r, c)).collect();
        col.sort_by(f64::total_cmp);
        let iqr = quantile(&col, 0.75) - quantile(&col, 0.25);
        let range = col[n - 1] - col[0];
        let s = if iqr > 0.0 {
            iqr / cfg.iqr_divisor
        } else if range > 0.0 {
            range / cfg.iqr_divisor
        } else {
            1.0
        };
        scale.push(s);
        lo.push(col[0]);
    }
    let data = x
        .data()
        .chunks(d)
        .flat_map(|row| row.iter().zip(&lo).zip(&scale).map(|((v, l), s)| (v - l) / s).collect::<Vec<_>>())
        .collect();
    let z = Tensor::from_parts(vec![n, d], data);
    let budget = (cfg.cell_budget * (n as f64).sqrt()).max(1.0);
    let zero = vec![0.0; d];
    let mut base = 1.0;
    while intern(&cells(&z, base, &zero)).1 as f64 > budget {
        base *= 1.25;
    }
    Prepared { z, base }
}

/// Linear-interpolated quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (i, frac) = (pos.floor() as usize, pos - pos.floor());
    if i + 1 < sorted.len() {
        sorted[i] + frac * (sorted[i + 1] - sorted[i])
    } else {
        sorted[i]
    }
}

/// Ensemble estimate of `I(X; Y)` over the bandwidth ladder, clamped at 0.
pub fn edge_mi(x: &Tensor, y: &Tensor, cfg: &MiConfig) -> Result<MIEstimate> {
    cfg.validate()?;
    if x.rows() != y.rows() {
        return Err(Error::shape("edge_mi", format!("{} vs {} samples", x.rows(), y.rows())));
    }
    if x.rows() == 0 {
        return Err(Error::EmptyDataset);
    }
    x.check_finite("edge_mi")?;
    y.check_finite("edge_mi")?;
    let weights = cfg.ensemble_weights()?;
    let px = prepare(x, cfg);
    let py = prepare(y, cfg);
    let mut bandwidths = Vec::with_capacity(cfg.ladder);
    let mut base_values = Vec::with_capacity(cfg.ladder);
    let mut ratio_values = Vec::with_capacity(cfg.ladder);
    for k in 0..cfg.ladder {
        let f = cfg.ladder_ratio.powi(k as i32);
        let (ex, ey) = (px.base * f, py.base * f);
        let hx = HashConfig {
            bandwidth: ex,
            random_shift: true,
            projection_dim: None,
            seed: rng::derive(cfg.seed, 16 + k as u64),
        };
        let hy = HashConfig {
            bandwidth: ey,
            ..hx.clone()
        };
        let (ix, _) = intern(&hash_samples(&px.z, &hx)?);
        let (iy, _) = intern(&hash_samples(&py.z, &hy)?);
        let h = JointHistogram::from_ids(&ix, &iy)?;
        bandwidths.push((ex, ey));
        base_values.push(base_mi(&h));
        ratio_values.push(ratio_expectation(&h));
    }
    let raw: f64 = weights.iter().zip(&base_values).map(|(w, v)| w * v).sum();
    let ratio: f64 = weights.iter().zip(&ratio_values).map(|(w, v)| w * v).sum();
    Ok(MIEstimate {
        value_nats: raw.max(0.0),
        raw_value: raw,
        bandwidths,
        weights,
        base_values,
        ratio_expectation: ratio,
        ratio_values,
        samples: x.rows(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionalMi {
    /// Estimate per retained class.
    pub per_class: BTreeMap<usize, MIEstimate>,
    /// Classes with fewer than `min_class_samples` rows.
    pub skipped: Vec<usize>,
    /// Empirical priors of the retained classes, renormalized to sum to 1.
    pub priors: BTreeMap<usize, f64>,
    /// `Σ_y π̂(y)·I_y` over clamped per-class values.
    pub total: f64,
    /// Same weighting over raw per-class values.
    pub raw_total: f64,
    /// Prior-weighted `Û`.
    pub ratio_expectation: f64,
}

/// Class-conditional MI `Σ_y π̂(y)·I(X; Y | y)`.
pub fn conditional_mi(x: &Tensor, y: &Tensor, labels: &[usize], cfg: &MiConfig) -> Result<ConditionalMi> {
    if x.rows() != y.rows() || x.rows() != labels.len() {
        return Err(Error::shape("conditional_mi", "rows of X, Y and labels differ"));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &c) in labels.iter().enumerate() {
        by_class.entry(c).or_default().push(i);
    }
    let mut skipped = Vec::new();
    let mut retained = Vec::new();
    for (&c, idx) in &by_class {
        if idx.len() < cfg.min_class_samples {
            log::warn!("class {c} has {} samples (< {}), skipped", idx.len(), cfg.min_class_samples);
            skipped.push(c);
        } else {
            retained.push(c);
        }
    }
    if retained.is_empty() {
        return Err(Error::SparseClasses { min: cfg.min_class_samples });
    }
    let kept: usize = retained.iter().map(|c| by_class[c].len()).sum();
    let mut per_class = BTreeMap::new();
    let mut priors = BTreeMap::new();
    let (mut total, mut raw_total, mut ratio) = (0.0, 0.0, 0.0);
    for c in retained {
        let idx = &by_class[&c];
        let class_cfg = MiConfig {
            seed: rng::derive(cfg.seed, 1000 + c as u64),
            ..cfg.clone()
        };
        let est = edge_mi(&x.select_rows(idx), &y.select_rows(idx), &class_cfg)?;
        let p = idx.len() as f64 / kept as f64;
        total += p * est.value_nats;
        raw_total += p * est.raw_value;
        ratio += p * est.ratio_expectation;
        priors.insert(c, p);
        per_class.insert(c, est);
    }
    Ok(ConditionalMi {
        per_class,
        skipped,
        priors,
        total,
        raw_total,
        ratio_expectation: ratio,
    })
}
