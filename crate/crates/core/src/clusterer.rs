//! Threshold-based agglomerative clustering of attention (or feature) rows,
//! and the video segmentation pipeline built on it.
//!
//! Each sweep walks the surviving clusters in ascending position. The current
//! cluster absorbs every surviving cluster closer than `tau`, and the group is
//! replaced by the plain mean of its centroids at the position of its lowest
//! member. Sweeps repeat until one leaves the cluster count unchanged. Every
//! input row is then assigned to its nearest centroid.

use std::str::FromStr;

use rayon::prelude::*;

use crate::correlator::{cross_attention, forward, CorrelatorParams};
use crate::dataio::VideoFeatures;
use crate::error::{Error, Result};
use crate::metrics::{greedy_foreground_labels, LabelVolume};
use crate::numerics::{prepare_kl_row, sym_kl_prepared, Matrix, Real, KL_EPS};

/// Default threshold for multi-object segmentation.
pub const TAU_MULTI: f64 = 1.0;
/// Default threshold when all foreground objects should merge.
pub const TAU_SINGLE: f64 = 0.6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    /// Symmetric KL divergence between probability rows.
    SymKl,
    /// `1 − cos` between feature rows.
    Cosine,
}

impl Metric {
    pub fn name(&self) -> &'static str {
        match self {
            Metric::SymKl => "sym-kl",
            Metric::Cosine => "cosine",
        }
    }
}

/// A row cached in the form its metric needs.
#[derive(Debug, Clone)]
struct PreparedRow {
    values: Vec<f64>,
    /// Floored values and their logs (KL) or the Euclidean norm (cosine).
    floored: Vec<f64>,
    logs: Vec<f64>,
    norm: f64,
}

impl PreparedRow {
    fn new(values: Vec<f64>, metric: Metric) -> Result<Self> {
        match metric {
            Metric::SymKl => {
                let (floored, logs) = prepare_kl_row(&values, KL_EPS);
                Ok(Self {
                    values,
                    floored,
                    logs,
                    norm: 0.0,
                })
            }
            Metric::Cosine => {
                let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm == 0.0 {
                    return Err(Error::ZeroNorm);
                }
                Ok(Self {
                    values,
                    floored: Vec::new(),
                    logs: Vec::new(),
                    norm,
                })
            }
        }
    }

    #[inline]
    fn distance(&self, other: &Self, metric: Metric) -> f64 {
        match metric {
            Metric::SymKl => sym_kl_prepared(&self.floored, &self.logs, &other.floored, &other.logs),
            Metric::Cosine => {
                let dot: f64 = self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum();
                1.0 - (dot / (self.norm * other.norm)).clamp(-1.0, 1.0)
            }
        }
    }
}

/// Cluster counts around one sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SweepTrace {
    pub before: usize,
    pub after: usize,
}

/// Output of [`hierarchical_cluster`].
#[derive(Debug, Clone, PartialEq)]
pub struct Clustering {
    /// `[K, M]` centroids in final order.
    pub centroids: Matrix<f64>,
    /// Original row indices merged into each centroid, ascending.
    pub members: Vec<Vec<usize>>,
    pub trace: Vec<SweepTrace>,
}

impl Clustering {
    pub fn num_clusters(&self) -> usize {
        self.members.len()
    }
}

fn to_f64_rows<T: Real>(rows: &Matrix<T>) -> Vec<Vec<f64>> {
    rows.row_iter()
        .map(|r| r.iter().map(|v| v.as_f64()).collect())
        .collect()
}

fn validate_rows<T: Real>(rows: &Matrix<T>, tau: f64) -> Result<()> {
    if rows.rows() == 0 || rows.cols() == 0 {
        return Err(Error::Empty("cluster input"));
    }
    if !(tau >= 0.0) || !tau.is_finite() {
        return Err(Error::InvalidArgument(format!("threshold {tau} must be finite and >= 0")));
    }
    if !rows.is_finite() {
        return Err(Error::NonFinite("cluster input".into()));
    }
    Ok(())
}

/// Agglomerates rows until no surviving pair is closer than `tau`.
pub fn hierarchical_cluster<T: Real>(rows: &Matrix<T>, tau: f64, metric: Metric) -> Result<Clustering> {
    validate_rows(rows, tau)?;
    let mut clusters: Vec<Option<(PreparedRow, Vec<usize>)>> = to_f64_rows(rows)
        .into_iter()
        .enumerate()
        .map(|(i, r)| PreparedRow::new(r, metric).map(|p| Some((p, vec![i]))))
        .collect::<Result<_>>()?;
    let mut trace = Vec::new();
    loop {
        let before = clusters.len();
        let mut next = Vec::new();
        for x in 0..before {
            let Some((anchor, _)) = &clusters[x] else {
                continue;
            };
            let group: Vec<usize> = (x..before)
                .into_par_iter()
                .filter(|&y| match &clusters[y] {
                    Some((row, _)) => y == x || anchor.distance(row, metric) < tau,
                    None => false,
                })
                .collect();
            let taken: Vec<_> = group.iter().filter_map(|&y| clusters[y].take()).collect();
            if taken.len() == 1 {
                next.extend(taken);
                continue;
            }
            let mut mean = vec![0.0f64; rows.cols()];
            let mut members = Vec::new();
            for (row, mem) in &taken {
                for (a, &v) in mean.iter_mut().zip(&row.values) {
                    *a += v;
                }
                members.extend_from_slice(mem);
            }
            let count = taken.len() as f64;
            mean.iter_mut().for_each(|v| *v /= count);
            if metric == Metric::SymKl {
                let s: f64 = mean.iter().sum();
                if s > 0.0 {
                    mean.iter_mut().for_each(|v| *v /= s);
                }
            }
            members.sort_unstable();
            next.push((PreparedRow::new(mean, metric)?, members));
        }
        trace.push(SweepTrace {
            before,
            after: next.len(),
        });
        log::debug!("sweep {}: {before} -> {} clusters", trace.len(), next.len());
        let done = next.len() == before;
        clusters = next.into_iter().map(Some).collect();
        if done {
            break;
        }
    }
    let m = rows.cols();
    let mut data = Vec::with_capacity(clusters.len() * m);
    let mut members = Vec::with_capacity(clusters.len());
    for (row, mem) in clusters.into_iter().flatten() {
        data.extend(row.values);
        members.push(mem);
    }
    Ok(Clustering {
        centroids: Matrix::new(members.len(), m, data)?,
        members,
        trace,
    })
}

/// Nearest-centroid labels in `1..=K`; ties go to the lower centroid.
pub fn assign<T: Real>(rows: &Matrix<T>, centroids: &Matrix<f64>, metric: Metric) -> Result<Vec<u32>> {
    if centroids.rows() == 0 {
        return Err(Error::Empty("centroid set"));
    }
    if rows.cols() != centroids.cols() {
        return Err(Error::shape(format!(
            "rows have {} columns, centroids {}",
            rows.cols(),
            centroids.cols()
        )));
    }
    let prepared: Vec<PreparedRow> = to_f64_rows(centroids)
        .into_iter()
        .map(|r| PreparedRow::new(r, metric))
        .collect::<Result<_>>()?;
    (0..rows.rows())
        .into_par_iter()
        .map(|i| {
            let row = PreparedRow::new(rows.row(i).iter().map(|v| v.as_f64()).collect(), metric)?;
            let mut best = (f64::INFINITY, 0usize);
            for (k, c) in prepared.iter().enumerate() {
                let d = row.distance(c, metric);
                if d < best.0 {
                    best = (d, k);
                }
            }
            Ok(best.1 as u32 + 1)
        })
        .collect()
}

/// A fitted clustering with its assignments.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterModel {
    pub clustering: Clustering,
    pub tau: f64,
    pub metric: Metric,
    /// 1-based centroid index per input row.
    pub assignments: Vec<u32>,
}

impl ClusterModel {
    pub fn fit<T: Real>(rows: &Matrix<T>, tau: f64, metric: Metric) -> Result<Self> {
        let clustering = hierarchical_cluster(rows, tau, metric)?;
        let assignments = assign(rows, &clustering.centroids, metric)?;
        Ok(Self {
            clustering,
            tau,
            metric,
            assignments,
        })
    }

    pub fn num_clusters(&self) -> usize {
        self.clustering.num_clusters()
    }
}

/// Which per-token representation is clustered.
#[derive(Debug, Clone, Copy)]
pub enum RowSource<'a> {
    /// Spatio-temporal attention of a trained correlator (symmetric KL).
    Correlator(&'a CorrelatorParams<f32>),
    /// The frozen features themselves (cosine).
    Features,
    /// Per-frame backbone attention, `[T·HW, HW]` (symmetric KL).
    BackboneAttention(&'a Matrix<f32>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SourceKind {
    Correlator,
    Features,
    BackboneAttention,
}

impl FromStr for SourceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "correlator-attention" | "correlator" => Ok(SourceKind::Correlator),
            "raw-features" | "features" => Ok(SourceKind::Features),
            "backbone-attention" | "backbone" => Ok(SourceKind::BackboneAttention),
            other => Err(Error::InvalidArgument(format!("unknown metric source {other:?}"))),
        }
    }
}

impl SourceKind {
    pub fn name(&self) -> &'static str {
        match self {
            SourceKind::Correlator => "correlator-attention",
            SourceKind::Features => "raw-features",
            SourceKind::BackboneAttention => "backbone-attention",
        }
    }
}

impl RowSource<'_> {
    pub fn kind(&self) -> SourceKind {
        match self {
            RowSource::Correlator(_) => SourceKind::Correlator,
            RowSource::Features => SourceKind::Features,
            RowSource::BackboneAttention(_) => SourceKind::BackboneAttention,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegmentOptions {
    pub tau: f64,
    /// Fraction of frames used as attention keys, in `(0, 1]`.
    pub key_ratio: f64,
}

impl Default for SegmentOptions {
    fn default() -> Self {
        Self {
            tau: TAU_MULTI,
            key_ratio: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationResult {
    /// Labels in `1..=num_clusters`, shared across frames.
    pub labels: LabelVolume,
    pub num_clusters: usize,
    pub centroids: Matrix<f64>,
    pub metric: Metric,
    pub key_frames: Vec<usize>,
    pub trace: Vec<SweepTrace>,
}

/// `⌈ratio·frames⌉` frames spread evenly over the sequence.
pub fn uniform_key_frames(frames: usize, ratio: f64) -> Result<Vec<usize>> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::InvalidArgument(format!("key ratio {ratio} outside (0, 1]")));
    }
    if frames == 0 {
        return Err(Error::Empty("video"));
    }
    let n = ((ratio * frames as f64).ceil() as usize).clamp(1, frames);
    Ok((0..n)
        .map(|i| (((2 * i + 1) * frames) / (2 * n)).min(frames - 1))
        .collect())
}

/// The rows to cluster for a video, their metric and the key frames used.
pub fn clustering_rows(
    features: &VideoFeatures,
    source: RowSource<'_>,
    key_ratio: f64,
) -> Result<(Matrix<f32>, Metric, Vec<usize>)> {
    let frames = features.frames();
    if frames == 0 {
        return Err(Error::Empty("video"));
    }
    let keys = uniform_key_frames(frames, key_ratio)?;
    match source {
        RowSource::Correlator(params) => {
            let clip = features.full_clip()?;
            let attention = if keys.len() == frames {
                forward(&clip, params)?.1
            } else {
                cross_attention(&clip, &keys, params)?
            };
            Ok((attention.probs, Metric::SymKl, keys))
        }
        RowSource::Features => Ok((features.data.clone(), Metric::Cosine, (0..frames).collect())),
        RowSource::BackboneAttention(att) => {
            let hw = features.tokens_per_frame();
            if att.shape() != (frames * hw, hw) {
                return Err(Error::shape(format!(
                    "backbone attention is {:?}, expected ({}, {hw})",
                    att.shape(),
                    frames * hw
                )));
            }
            Ok((att.clone(), Metric::SymKl, (0..frames).collect()))
        }
    }
}

/// Clusters every token of the video jointly and reshapes the assignments to
/// `[T, H, W]`.
pub fn segment_video(
    features: &VideoFeatures,
    source: RowSource<'_>,
    options: &SegmentOptions,
) -> Result<SegmentationResult> {
    let (rows, metric, key_frames) = clustering_rows(features, source, options.key_ratio)?;
    let model = ClusterModel::fit(&rows, options.tau, metric)?;
    Ok(SegmentationResult {
        labels: LabelVolume::new(
            features.frames(),
            features.height,
            features.width,
            model.assignments,
        )?,
        num_clusters: model.clustering.num_clusters(),
        centroids: model.clustering.centroids,
        metric,
        key_frames,
        trace: model.clustering.trace,
    })
}

/// Binary foreground (labels 0/1) made of the clusters whose union best
/// overlaps the ground-truth foreground. Ground truth is used only to pick
/// clusters, as in evaluation.
pub fn merge_to_foreground(result: &SegmentationResult, gt: &LabelVolume) -> Result<LabelVolume> {
    let pred = if (result.labels.height, result.labels.width) != (gt.height, gt.width) {
        result.labels.upsample_nearest(gt.height, gt.width)
    } else {
        result.labels.clone()
    };
    if pred.dims() != gt.dims() {
        return Err(Error::shape(format!(
            "segmentation {:?} vs ground truth {:?}",
            pred.dims(),
            gt.dims()
        )));
    }
    let chosen = greedy_foreground_labels(&pred.labels, &gt.foreground());
    let labels = pred
        .labels
        .iter()
        .map(|l| chosen.binary_search(l).is_ok() as u32)
        .collect();
    LabelVolume::new(pred.frames, pred.height, pred.width, labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(data: &[&[f64]]) -> Matrix<f64> {
        Matrix::from_fn(data.len(), data[0].len(), |r, c| data[r][c])
    }

    #[test]
    fn identical_rows_form_one_cluster() {
        let m = rows(&[&[0.2, 0.8], &[0.2, 0.8], &[0.2, 0.8]]);
        let c = hierarchical_cluster(&m, 1.0, Metric::SymKl).unwrap();
        assert_eq!(c.num_clusters(), 1);
        assert_eq!(c.members, vec![vec![0, 1, 2]]);
    }

    #[test]
    fn zero_threshold_keeps_every_row() {
        let m = rows(&[&[0.2, 0.8], &[0.3, 0.7], &[0.9, 0.1]]);
        let c = hierarchical_cluster(&m, 0.0, Metric::SymKl).unwrap();
        assert_eq!(c.num_clusters(), 3);
        assert_eq!(c.trace.len(), 1);
    }

    #[test]
    fn two_groups() {
        let m = rows(&[
            &[0.90, 0.05, 0.05],
            &[0.05, 0.05, 0.90],
            &[0.88, 0.06, 0.06],
            &[0.06, 0.06, 0.88],
        ]);
        let c = hierarchical_cluster(&m, 0.5, Metric::SymKl).unwrap();
        assert_eq!(c.members, vec![vec![0, 2], vec![1, 3]]);
        let z = assign(&m, &c.centroids, Metric::SymKl).unwrap();
        assert_eq!(z, vec![1, 2, 1, 2]);
        for row in c.centroids.row_iter() {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_input_and_bad_tau() {
        assert!(hierarchical_cluster(&Matrix::<f64>::zeros(0, 3), 1.0, Metric::SymKl).is_err());
        let m = rows(&[&[0.5, 0.5]]);
        assert!(hierarchical_cluster(&m, -1.0, Metric::SymKl).is_err());
        assert!(hierarchical_cluster(&m, f64::NAN, Metric::SymKl).is_err());
    }

    #[test]
    fn assign_examples() {
        let m = rows(&[&[0.2, 0.8], &[0.5, 0.5], &[0.7, 0.3]]);
        let one = rows(&[&[0.4, 0.6]]);
        assert_eq!(assign(&m, &one, Metric::SymKl).unwrap(), vec![1, 1, 1]);
        assert_eq!(assign(&m, &m, Metric::SymKl).unwrap(), vec![1, 2, 3]);
        // Equidistant centroids tie toward the lower index.
        let tie = rows(&[&[0.5, 0.5]]);
        let cents = rows(&[&[0.3, 0.7], &[0.7, 0.3]]);
        assert_eq!(assign(&tie, &cents, Metric::SymKl).unwrap(), vec![1]);
    }

    #[test]
    fn assign_matches_exhaustive_table() {
        let m = rows(&[&[0.1, 0.9], &[0.45, 0.55], &[0.8, 0.2]]);
        let cents = rows(&[&[0.25, 0.75], &[0.6, 0.4]]);
        let z = assign(&m, &cents, Metric::SymKl).unwrap();
        for (i, &label) in z.iter().enumerate() {
            let d: Vec<f64> = (0..2)
                .map(|k| crate::numerics::sym_kl(m.row(i), cents.row(k), KL_EPS).unwrap())
                .collect();
            let best = if d[0] <= d[1] { 1 } else { 2 };
            assert_eq!(label, best);
        }
        assert_eq!(z, vec![1, 2, 2]);
    }

    #[test]
    fn cosine_metric_clusters_directions() {
        let m = rows(&[&[1.0, 0.0], &[0.0, 2.0], &[3.0, 0.1], &[0.1, 1.0]]);
        let model = ClusterModel::fit(&m, 0.1, Metric::Cosine).unwrap();
        assert_eq!(model.num_clusters(), 2);
        assert_eq!(model.assignments, vec![1, 2, 1, 2]);
        let zero = rows(&[&[0.0, 0.0]]);
        assert!(matches!(hierarchical_cluster(&zero, 0.1, Metric::Cosine), Err(Error::ZeroNorm)));
    }

    #[test]
    fn key_frame_sampling() {
        assert_eq!(uniform_key_frames(4, 1.0).unwrap(), vec![0, 1, 2, 3]);
        assert_eq!(uniform_key_frames(4, 0.5).unwrap(), vec![1, 3]);
        assert_eq!(uniform_key_frames(10, 0.1).unwrap(), vec![5]);
        assert_eq!(uniform_key_frames(3, 0.01).unwrap().len(), 1);
        assert!(uniform_key_frames(4, 0.0).is_err());
        assert!(uniform_key_frames(4, 1.5).is_err());
    }

    #[test]
    fn merge_picks_covering_clusters() {
        let labels = LabelVolume::new(1, 1, 6, vec![1, 1, 2, 2, 3, 3]).unwrap();
        let result = SegmentationResult {
            labels,
            num_clusters: 3,
            centroids: Matrix::zeros(3, 1),
            metric: Metric::SymKl,
            key_frames: vec![0],
            trace: vec![],
        };
        let gt = LabelVolume::new(1, 1, 6, vec![1, 1, 2, 2, 0, 0]).unwrap();
        let fg = merge_to_foreground(&result, &gt).unwrap();
        assert_eq!(fg.labels, vec![1, 1, 1, 1, 0, 0]);
        let gt = LabelVolume::new(1, 1, 6, vec![0, 0, 0, 0, 1, 1]).unwrap();
        assert_eq!(merge_to_foreground(&result, &gt).unwrap().labels, vec![0, 0, 0, 0, 1, 1]);
    }
}
