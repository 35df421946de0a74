//! Rank metrics (AUC and pseudo-label AUC), Fréchet distance between
//! feature sets, checkpoint selection, and metric/AUC correlation.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::detection::ScoreTable;
use crate::data::SetId;
use crate::error::{ensure, Error, Result};
use crate::io::Plane;
use crate::ops::{leaky, Conv2d, Geometry};
use crate::tensor::Tensor;

/// Mann–Whitney AUC: the fraction of (positive, negative) pairs ranked
/// correctly, ties counting one half. Computed from mid-ranks.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    ensure!(scores.len() == labels.len(), "{} scores but {} labels", scores.len(), labels.len());
    ensure!(labels.iter().all(|&l| l <= 1), "labels must be 0 or 1");
    ensure!(scores.iter().all(|s| !s.is_nan()), "scores must not be NaN");
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    ensure!(n_pos > 0 && n_neg > 0, "AUC needs both classes (got {n_pos} positive, {n_neg} negative)");
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the rank sum of positives, so mid-ranks stay integral.
    let mut twice_rank_sum: u64 = 0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start;
        while end + 1 < order.len() && scores[order[end + 1]] == scores[order[start]] {
            end += 1;
        }
        let twice_mid = (start + end + 2) as u64;
        let pos = order[start..=end].iter().filter(|&&i| labels[i] == 1).count() as u64;
        twice_rank_sum += twice_mid * pos;
        start = end + 1;
    }
    let (p, n) = (n_pos as u64, n_neg as u64);
    let twice_u = twice_rank_sum - p * (p + 1);
    Ok(twice_u as f64 / (2 * p * n) as f64)
}

/// AUC with H rows as negatives and M rows as positives. Holdout rows are
/// ignored.
pub fn aucp(table: &ScoreTable) -> Result<f64> {
    let rows: Vec<_> = table.rows.iter().filter(|r| r.source_set != SetId::Holdout).collect();
    ensure!(rows.iter().any(|r| r.source_set == SetId::H), "AUCp needs rows from H");
    ensure!(rows.iter().any(|r| r.source_set == SetId::M), "AUCp needs rows from M");
    let scores: Vec<f64> = rows.iter().map(|r| r.score).collect();
    let labels: Vec<u8> = rows.iter().map(|r| r.pseudo_label).collect();
    auc(&scores, &labels)
}

/// AUC against ground truth; every row must carry a true label.
pub fn true_auc(table: &ScoreTable) -> Result<f64> {
    let labels = table
        .rows
        .iter()
        .map(|r| r.true_label.ok_or_else(|| Error::validation(format!("subject {} has no true label", r.subject_id))))
        .collect::<Result<Vec<_>>>()?;
    auc(&table.scores(), &labels)
}

/// Model-selection criterion.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Criterion {
    /// Highest AUCp.
    #[default]
    Aucp,
    /// Lowest Fréchet distance.
    Fid,
}

impl std::str::FromStr for Criterion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "aucp" => Ok(Criterion::Aucp),
            "fid" => Ok(Criterion::Fid),
            other => Err(Error::validation(format!("unknown selection criterion '{other}'"))),
        }
    }
}

impl std::fmt::Display for Criterion {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Criterion::Aucp => "aucp",
            Criterion::Fid => "fid",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRecord {
    pub iteration: usize,
    pub weights_path: std::path::PathBuf,
    pub aucp: Option<f64>,
    pub fid: Option<f64>,
    /// Inductive AUC on the labelled holdout, when a manifest is available.
    pub true_auc: Option<f64>,
}

/// Index of the best record: highest AUCp or lowest FID, ties going to the
/// later iteration.
pub fn select_best(records: &[CheckpointRecord], criterion: Criterion) -> Result<usize> {
    ensure!(!records.is_empty(), "no checkpoints to select from");
    let values = records
        .iter()
        .map(|r| {
            let v = match criterion {
                Criterion::Aucp => r.aucp,
                Criterion::Fid => r.fid.map(|f| -f),
            };
            v.filter(|v| !v.is_nan())
                .ok_or_else(|| Error::validation(format!("checkpoint {} lacks a {criterion} value", r.iteration)))
        })
        .collect::<Result<Vec<f64>>>()?;
    let mut best = 0;
    for i in 1..records.len() {
        let better = values[i] > values[best]
            || (values[i] == values[best] && records[i].iteration > records[best].iteration);
        if better {
            best = i;
        }
    }
    Ok(best)
}

fn mean_and_covariance(x: &[Vec<f64>]) -> (DVector<f64>, DMatrix<f64>) {
    let n = x.len();
    let d = x[0].len();
    let m = DMatrix::from_fn(n, d, |i, j| x[i][j]);
    let mu = m.row_mean().transpose();
    let centered = DMatrix::from_fn(n, d, |i, j| m[(i, j)] - mu[j]);
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    (mu, cov)
}

/// Symmetric PSD square root with negative eigenvalues clamped at zero.
fn sqrt_psd(a: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (a + a.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// `‖μ_A − μ_B‖² + tr(Σ_A + Σ_B − 2(Σ_A Σ_B)^{1/2})` using sample
/// covariances (divisor `n − 1`). The trace of the cross term is computed as
/// `tr((√Σ_A Σ_B √Σ_A)^{1/2})`, which has the same eigenvalues and stays
/// symmetric.
pub fn frechet_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    ensure!(a.len() >= 2 && b.len() >= 2, "Fréchet distance needs at least 2 vectors per set");
    let d = a[0].len();
    ensure!(d > 0, "feature vectors must be nonempty");
    ensure!(
        a.iter().chain(b).all(|v| v.len() == d),
        "feature dimensionality differs between or within sets"
    );
    let (mu_a, cov_a) = mean_and_covariance(a);
    let (mu_b, cov_b) = mean_and_covariance(b);
    let root_a = sqrt_psd(&cov_a);
    let cross = sqrt_psd(&(&root_a * &cov_b * &root_a));
    let dist = (mu_a - mu_b).norm_squared() + cov_a.trace() + cov_b.trace() - 2.0 * cross.trace();
    Ok(dist.max(0.0))
}

/// Maps single-channel images to fixed-length feature vectors.
pub trait FeatureExtractor {
    fn dim(&self) -> usize;
    fn features(&self, images: &[&Plane]) -> Result<Vec<Vec<f64>>>;
}

/// A fixed random convolutional embedding: three stride-2 4×4 convolutions
/// with leaky ReLU, then global average pooling. Weights are He-scaled
/// normals drawn from `seed`.
#[derive(Clone, Debug)]
pub struct RandomConvEmbedding {
    layers: Vec<Conv2d>,
}

impl RandomConvEmbedding {
    pub const DIM: usize = 64;

    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let widths = [1, 16, 32, Self::DIM];
        let layers = widths
            .windows(2)
            .map(|w| {
                let std = (2.0 / (w[0] * 16) as f32).sqrt();
                Conv2d::new(Geometry::new(w[0], w[1], 4, 2, 1), true, std, &mut rng)
            })
            .collect();
        RandomConvEmbedding { layers }
    }
}

impl Default for RandomConvEmbedding {
    fn default() -> Self {
        RandomConvEmbedding::new(0xF1D)
    }
}

impl FeatureExtractor for RandomConvEmbedding {
    fn dim(&self) -> usize {
        Self::DIM
    }

    fn features(&self, images: &[&Plane]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(64) {
            let (h, w) = (chunk[0].height, chunk[0].width);
            ensure!(chunk.iter().all(|p| p.height == h && p.width == w), "feature inputs differ in size");
            ensure!(h >= 8 && w >= 8, "feature inputs must be at least 8x8");
            let planes: Vec<&[f32]> = chunk.iter().map(|p| p.data.as_slice()).collect();
            let mut x = Tensor::stack_planes(&planes, h, w)?;
            for layer in &self.layers {
                x = layer.forward(&x, false, true)?.0.map(|v| leaky(v, 0.2));
            }
            let pix = x.height() * x.width();
            for i in 0..x.batch() {
                let s = x.sample(i);
                out.push((0..Self::DIM).map(|c| s[c * pix..(c + 1) * pix].iter().map(|&v| v as f64).sum::<f64>() / pix as f64).collect());
            }
        }
        Ok(out)
    }
}

/// A metric and the true AUC aligned by checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricSeries {
    pub iterations: Vec<usize>,
    pub metric: Vec<f64>,
    pub true_auc: Vec<f64>,
}

impl MetricSeries {
    /// Builds the series for `criterion` from records carrying both values.
    pub fn from_records(records: &[CheckpointRecord], criterion: Criterion) -> Result<Self> {
        let mut s = MetricSeries { iterations: Vec::new(), metric: Vec::new(), true_auc: Vec::new() };
        for r in records {
            let m = match criterion {
                Criterion::Aucp => r.aucp,
                Criterion::Fid => r.fid,
            };
            let (Some(m), Some(t)) = (m, r.true_auc) else {
                return Err(Error::validation(format!("checkpoint {} lacks {criterion} or true AUC", r.iteration)));
            };
            s.iterations.push(r.iteration);
            s.metric.push(m);
            s.true_auc.push(t);
        }
        Ok(s)
    }
}

/// `|Pearson r|` between the metric and the true AUC.
pub fn metric_auc_correlation(series: &MetricSeries) -> Result<f64> {
    let n = series.metric.len();
    ensure!(n >= 3, "correlation needs at least 3 checkpoints, got {n}");
    ensure!(series.true_auc.len() == n && series.iterations.len() == n, "series lengths differ");
    ensure!(series.iterations.windows(2).all(|w| w[0] < w[1]), "iterations must be strictly increasing");
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (mx, my) = (mean(&series.metric), mean(&series.true_auc));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&x, &y) in series.metric.iter().zip(&series.true_auc) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx).powi(2);
        syy += (y - my).powi(2);
    }
    ensure!(sxx > 0.0, "the metric has zero variance across checkpoints");
    ensure!(syy > 0.0, "the true AUC has zero variance across checkpoints");
    Ok((sxy / (sxx * syy).sqrt()).abs().min(1.0))
}

/// `iteration,aucp,fid,true_auc` rows followed by one
/// `selected_iteration,<criterion>,<iteration>` line per criterion that can be
/// evaluated.
pub fn selection_report(records: &[CheckpointRecord]) -> String {
    let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
    let mut out = String::from("iteration,aucp,fid,true_auc\n");
    for r in records {
        let _ = writeln!(out, "{},{},{},{}", r.iteration, opt(r.aucp), opt(r.fid), opt(r.true_auc));
    }
    for c in [Criterion::Aucp, Criterion::Fid] {
        if let Ok(i) = select_best(records, c) {
            let _ = writeln!(out, "selected_iteration,{c},{}", records[i].iteration);
        }
    }
    out
}
