//! Grouping workers into a fast and a slow cluster from their runtime
//! traces, plus the metrics used to compare clusterings over time.
//!
//! Clustering is density-based so the number of groups does not have to be
//! known up front; the caller then keeps the two largest groups and treats
//! everything else as outliers.

use crate::stats::{fit_mixture, MixtureModel, StatsError};
use thiserror::Error;

pub type WorkerId = usize;

/// Label given to points that belong to no cluster.
pub const NOISE: i32 = -1;

#[derive(Debug, Error, PartialEq)]
pub enum ClusteringError {
    #[error("trace window must contain at least one worker")]
    EmptyWindow,
    #[error("all trace rows must share one dimension of at least 1")]
    RaggedWindow,
    #[error("worker ids must be unique")]
    DuplicateWorker,
    #[error("trace values must be finite")]
    NonFiniteValue,
    #[error("eps must be positive and finite, got {0}")]
    InvalidEps(f64),
    #[error("min_pts must be at least 1")]
    InvalidMinPts,
    #[error("labelings must be non-empty and equally sized")]
    LabelMismatch,
    #[error("no non-noise cluster to measure")]
    AllNoise,
    #[error("need at least two clusters, found {0}")]
    Degenerate(usize),
    #[error(transparent)]
    Stats(#[from] StatsError),
}

/// A window of recent traces: one row of per-iteration runtimes per worker.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceWindow {
    worker_ids: Vec<WorkerId>,
    points: Vec<Vec<f64>>,
}

impl TraceWindow {
    pub fn new(worker_ids: Vec<WorkerId>, points: Vec<Vec<f64>>) -> Result<Self, ClusteringError> {
        if worker_ids.is_empty() || worker_ids.len() != points.len() {
            return Err(ClusteringError::EmptyWindow);
        }
        let dim = points[0].len();
        if dim == 0 || points.iter().any(|p| p.len() != dim) {
            return Err(ClusteringError::RaggedWindow);
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(ClusteringError::NonFiniteValue);
        }
        let mut seen = worker_ids.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != worker_ids.len() {
            return Err(ClusteringError::DuplicateWorker);
        }
        Ok(TraceWindow { worker_ids, points })
    }

    pub fn worker_ids(&self) -> &[WorkerId] {
        &self.worker_ids
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    pub fn dim(&self) -> usize {
        self.points[0].len()
    }
}

/// Result of one clustering pass: `labels[i]` is the cluster id of point
/// `i` (0-based) or [`NOISE`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Clustering {
    pub labels: Vec<i32>,
    pub num_clusters: usize,
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Density-based clustering. A point's eps-neighborhood includes the point
/// itself; a point is core when that neighborhood holds at least `min_pts`
/// points. Points are scanned in ascending index order, so border points
/// shared between clusters go to whichever core point reaches them first
/// in that order, and labels are deterministic.
pub fn dbscan(points: &[Vec<f64>], eps: f64, min_pts: usize) -> Result<Clustering, ClusteringError> {
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(ClusteringError::InvalidEps(eps));
    }
    if min_pts == 0 {
        return Err(ClusteringError::InvalidMinPts);
    }
    if points.is_empty() {
        return Ok(Clustering {
            labels: Vec::new(),
            num_clusters: 0,
        });
    }
    let dim = points[0].len();
    if dim == 0 || points.iter().any(|p| p.len() != dim) {
        return Err(ClusteringError::RaggedWindow);
    }

    const UNLABELED: i32 = -2;
    let n = points.len();
    let neighborhood = |i: usize| -> Vec<usize> {
        (0..n)
            .filter(|&j| euclidean(&points[i], &points[j]) <= eps)
            .collect()
    };

    let mut labels = vec![UNLABELED; n];
    let mut next_cluster = 0i32;
    for i in 0..n {
        if labels[i] != UNLABELED {
            continue;
        }
        let seeds = neighborhood(i);
        if seeds.len() < min_pts {
            labels[i] = NOISE;
            continue;
        }
        labels[i] = next_cluster;
        let mut queue: std::collections::VecDeque<usize> = seeds.into();
        while let Some(j) = queue.pop_front() {
            if labels[j] == NOISE {
                labels[j] = next_cluster; // noise becomes a border point
            }
            if labels[j] != UNLABELED {
                continue;
            }
            labels[j] = next_cluster;
            let reach = neighborhood(j);
            if reach.len() >= min_pts {
                queue.extend(reach);
            }
        }
        next_cluster += 1;
    }

    Ok(Clustering {
        labels,
        num_clusters: next_cluster as usize,
    })
}

fn comb2(n: u64) -> f64 {
    (n * n.saturating_sub(1)) as f64 / 2.0
}

/// Pair-counting agreement between two labelings of the same points,
/// corrected for chance: 1 for identical partitions, around 0 for
/// independent ones, negative for systematic disagreement. Noise labels
/// are compared like any other label.
pub fn adjusted_rand_index(a: &[i32], b: &[i32]) -> Result<f64, ClusteringError> {
    if a.is_empty() || a.len() != b.len() {
        return Err(ClusteringError::LabelMismatch);
    }
    let n = a.len() as u64;
    let mut cells = std::collections::BTreeMap::<(i32, i32), u64>::new();
    let mut rows = std::collections::BTreeMap::<i32, u64>::new();
    let mut cols = std::collections::BTreeMap::<i32, u64>::new();
    for (&x, &y) in a.iter().zip(b) {
        *cells.entry((x, y)).or_default() += 1;
        *rows.entry(x).or_default() += 1;
        *cols.entry(y).or_default() += 1;
    }

    let index: f64 = cells.values().map(|&c| comb2(c)).sum();
    let sum_rows: f64 = rows.values().map(|&c| comb2(c)).sum();
    let sum_cols: f64 = cols.values().map(|&c| comb2(c)).sum();
    let total = comb2(n);
    if total == 0.0 {
        return Ok(1.0); // single point: partitions are trivially identical
    }
    let expected = sum_rows * sum_cols / total;
    let max_index = 0.5 * (sum_rows + sum_cols);
    if (max_index - expected).abs() < 1e-12 {
        // Both partitions are all-singletons or both one block: identical.
        return Ok(1.0);
    }
    Ok((index - expected) / (max_index - expected))
}

/// Mean pairwise agreement over every unordered pair of clusterings.
pub fn ari_all_pairs(clusterings: &[Clustering]) -> Result<Option<f64>, ClusteringError> {
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..clusterings.len() {
        for j in (i + 1)..clusterings.len() {
            total += adjusted_rand_index(&clusterings[i].labels, &clusterings[j].labels)?;
            count += 1;
        }
    }
    Ok((count > 0).then(|| total / count as f64))
}

/// Mean agreement between consecutive clusterings.
pub fn ari_consecutive(clusterings: &[Clustering]) -> Result<Option<f64>, ClusteringError> {
    let mut total = 0.0;
    let mut count = 0usize;
    for pair in clusterings.windows(2) {
        total += adjusted_rand_index(&pair[0].labels, &pair[1].labels)?;
        count += 1;
    }
    Ok((count > 0).then(|| total / count as f64))
}

/// Spread measures for a clustering: `intra` is the mean cluster diameter
/// (largest member-to-member distance), `inter` the mean distance between
/// cluster centroids. With a single cluster `inter` has no meaning; it is
/// reported as 0 with `inter_defined` unset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClusterDistances {
    pub intra: f64,
    pub inter: f64,
    pub inter_defined: bool,
}

pub fn cluster_distances(
    points: &[Vec<f64>],
    clustering: &Clustering,
) -> Result<ClusterDistances, ClusteringError> {
    if points.len() != clustering.labels.len() {
        return Err(ClusteringError::LabelMismatch);
    }
    let members: Vec<Vec<usize>> = (0..clustering.num_clusters)
        .map(|c| {
            (0..points.len())
                .filter(|&i| clustering.labels[i] == c as i32)
                .collect()
        })
        .filter(|m: &Vec<usize>| !m.is_empty())
        .collect();
    if members.is_empty() {
        return Err(ClusteringError::AllNoise);
    }

    let mut intra = 0.0;
    for m in &members {
        let mut diameter: f64 = 0.0;
        for (k, &i) in m.iter().enumerate() {
            for &j in &m[k + 1..] {
                diameter = diameter.max(euclidean(&points[i], &points[j]));
            }
        }
        intra += diameter;
    }
    intra /= members.len() as f64;

    let centroids: Vec<Vec<f64>> = members
        .iter()
        .map(|m| {
            let dim = points[0].len();
            let mut c = vec![0.0; dim];
            for &i in m {
                for (acc, v) in c.iter_mut().zip(&points[i]) {
                    *acc += v;
                }
            }
            c.iter().map(|v| v / m.len() as f64).collect()
        })
        .collect();

    let mut inter = 0.0;
    let mut pairs = 0usize;
    for i in 0..centroids.len() {
        for j in (i + 1)..centroids.len() {
            inter += euclidean(&centroids[i], &centroids[j]);
            pairs += 1;
        }
    }
    if pairs == 0 {
        return Ok(ClusterDistances {
            intra,
            inter: 0.0,
            inter_defined: false,
        });
    }
    Ok(ClusterDistances {
        intra,
        inter: inter / pairs as f64,
        inter_defined: true,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ClusterRole {
    Fast,
    Slow,
}

/// One of the two kept clusters, with the runtime model fitted from its
/// members' trace values.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterModel {
    pub members: Vec<WorkerId>,
    pub size: usize,
    pub model: MixtureModel,
    pub role: ClusterRole,
}

/// Outcome of [`form_two_clusters`].
#[derive(Debug, Clone, PartialEq)]
pub struct TwoClusters {
    pub fast: ClusterModel,
    pub slow: ClusterModel,
    /// Workers in no kept cluster: noise plus members of dropped clusters.
    pub outliers: Vec<WorkerId>,
}

/// Clusters the window and reduces the result to a fast/slow pair.
///
/// When more than two clusters emerge the two largest are kept (ties going
/// to the one with the lower mean runtime, then the lower cluster id); the
/// rest join the noise points as outliers. The cluster with the smaller
/// mean runtime becomes [`ClusterRole::Fast`], ties broken by cluster id.
/// Fewer than two clusters is an error — callers typically retry with a
/// wider `eps` before giving up on the iteration.
pub fn form_two_clusters(
    window: &TraceWindow,
    eps: f64,
    min_pts: usize,
) -> Result<TwoClusters, ClusteringError> {
    let clustering = dbscan(window.points(), eps, min_pts)?;
    if clustering.num_clusters < 2 {
        return Err(ClusteringError::Degenerate(clustering.num_clusters));
    }

    struct Candidate {
        id: i32,
        members: Vec<usize>,
        mean: f64,
    }
    let mut candidates: Vec<Candidate> = (0..clustering.num_clusters as i32)
        .map(|id| {
            let members: Vec<usize> = (0..window.points().len())
                .filter(|&i| clustering.labels[i] == id)
                .collect();
            let mut sum = 0.0;
            let mut count = 0usize;
            for &i in &members {
                for &v in &window.points()[i] {
                    sum += v;
                    count += 1;
                }
            }
            Candidate {
                id,
                mean: sum / count as f64,
                members,
            }
        })
        .collect();

    candidates.sort_by(|a, b| {
        b.members
            .len()
            .cmp(&a.members.len())
            .then(a.mean.total_cmp(&b.mean))
            .then(a.id.cmp(&b.id))
    });
    let kept = &candidates[..2];

    let mut outliers: Vec<WorkerId> = (0..window.points().len())
        .filter(|&i| {
            clustering.labels[i] == NOISE
                || (clustering.labels[i] != kept[0].id && clustering.labels[i] != kept[1].id)
        })
        .map(|i| window.worker_ids()[i])
        .collect();
    outliers.sort_unstable();

    let build = |c: &Candidate, role: ClusterRole| -> Result<ClusterModel, ClusteringError> {
        let samples: Vec<f64> = c
            .members
            .iter()
            .flat_map(|&i| window.points()[i].iter().copied())
            .collect();
        Ok(ClusterModel {
            members: c.members.iter().map(|&i| window.worker_ids()[i]).collect(),
            size: c.members.len(),
            model: fit_mixture(&samples)?,
            role,
        })
    };

    // Fast role goes to the smaller mean runtime; cluster id breaks ties.
    let fast_first = kept[0].mean < kept[1].mean
        || (kept[0].mean == kept[1].mean && kept[0].id < kept[1].id);
    let (fast_c, slow_c) = if fast_first {
        (&kept[0], &kept[1])
    } else {
        (&kept[1], &kept[0])
    };

    Ok(TwoClusters {
        fast: build(fast_c, ClusterRole::Fast)?,
        slow: build(slow_c, ClusterRole::Slow)?,
        outliers,
    })
}
