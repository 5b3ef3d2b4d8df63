//! Lloyd's k-means with k-means++ seeding and seeded restarts, plus medoid
//! selection and the silhouette score used to measure domain separation.

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::matrix::squared_distance;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansConfig {
    pub seed: u64,
    pub max_iter: usize,
    pub tol: f64,
    pub restarts: usize,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            max_iter: 100,
            tol: 1e-6,
            restarts: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterModel {
    pub k: usize,
    pub centroids: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    pub wcss: f64,
    /// WCSS after every assignment step of the returned restart.
    pub wcss_history: Vec<f64>,
}

impl ClusterModel {
    pub fn members(&self, cluster: usize) -> impl Iterator<Item = usize> + '_ {
        self.assignments
            .iter()
            .enumerate()
            .filter(move |(_, &c)| c == cluster)
            .map(|(i, _)| i)
    }
}

/// Number of bitwise-distinct points.
pub fn distinct_count(points: &[Vec<f64>]) -> usize {
    points
        .iter()
        .map(|p| p.iter().map(|v| v.to_bits()).collect::<Vec<u64>>())
        .collect::<HashSet<_>>()
        .len()
}

/// Nearest centroid, lowest index on ties.
fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = squared_distance(point, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn assign(points: &[Vec<f64>], centroids: &[Vec<f64>], assignments: &mut [usize], dists: &mut [f64]) -> f64 {
    let mut wcss = 0.0;
    for (i, p) in points.iter().enumerate() {
        let (j, d) = nearest(p, centroids);
        assignments[i] = j;
        dists[i] = d;
        wcss += d;
    }
    wcss
}

fn plus_plus_init<R: Rng>(points: &[Vec<f64>], k: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let mut centroids = vec![points[rng.random_range(0..points.len())].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| squared_distance(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = None;
            for (i, &d) in d2.iter().enumerate() {
                acc += d;
                if d > 0.0 && acc > target {
                    chosen = Some(i);
                    break;
                }
            }
            // rounding can leave `target` at the very end of the scan
            chosen.unwrap_or_else(|| d2.iter().rposition(|&d| d > 0.0).expect("total > 0"))
        } else {
            0
        };
        let c = points[pick].clone();
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(squared_distance(p, &c));
        }
        centroids.push(c);
    }
    centroids
}

fn lloyd(points: &[Vec<f64>], mut centroids: Vec<Vec<f64>>, config: &KMeansConfig) -> ClusterModel {
    let k = centroids.len();
    let dim = points[0].len();
    let n = points.len();
    let mut assignments = vec![0; n];
    let mut dists = vec![0.0; n];
    let mut history = Vec::new();
    for _ in 0..config.max_iter {
        history.push(assign(points, &centroids, &mut assignments, &mut dists));

        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &j) in points.iter().zip(&assignments) {
            counts[j] += 1;
            sums[j].iter_mut().zip(p).for_each(|(s, v)| *s += v);
        }
        let mut next = Vec::with_capacity(k);
        for (j, (sum, count)) in sums.into_iter().zip(&counts).enumerate() {
            if *count > 0 {
                next.push(sum.into_iter().map(|s| s / *count as f64).collect());
            } else {
                // re-seed at the point currently worst served by its centroid
                let far = (0..n).fold(0, |best, i| if dists[i] > dists[best] { i } else { best });
                dists[far] = 0.0;
                log::debug!("k-means: cluster {j} empty, re-seeding at point {far}");
                next.push(points[far].clone());
            }
        }
        let shift: f64 = centroids
            .iter()
            .zip(&next)
            .map(|(a, b)| squared_distance(a, b).sqrt())
            .sum();
        centroids = next;
        if shift <= config.tol {
            break;
        }
    }
    let wcss = assign(points, &centroids, &mut assignments, &mut dists);
    history.push(wcss);
    ClusterModel {
        k,
        centroids,
        assignments,
        wcss,
        wcss_history: history,
    }
}

/// Best-of-`restarts` k-means. Deterministic for a given seed.
pub fn kmeans(points: &[Vec<f64>], k: usize, config: &KMeansConfig) -> Result<ClusterModel> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be >= 1".into()));
    }
    if points.is_empty() {
        return Err(Error::InvalidArgument("k-means on an empty point set".into()));
    }
    let dim = points[0].len();
    if let Some(p) = points.iter().find(|p| p.len() != dim) {
        return Err(Error::shape("kmeans", dim, p.len()));
    }
    let distinct = distinct_count(points);
    if k > distinct {
        return Err(Error::InvalidArgument(format!(
            "k = {k} exceeds the {distinct} distinct points"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut best: Option<ClusterModel> = None;
    for _ in 0..config.restarts.max(1) {
        let init = plus_plus_init(points, k, &mut rng);
        let model = lloyd(points, init, config);
        if best.as_ref().is_none_or(|b| model.wcss < b.wcss) {
            best = Some(model);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// For each non-empty cluster, the member point closest to its centroid
/// (lowest index on ties). Empty clusters are skipped.
pub fn medoids(cluster: &ClusterModel, points: &[Vec<f64>]) -> Vec<usize> {
    (0..cluster.k)
        .filter_map(|j| {
            cluster.members(j).fold(None, |best: Option<(usize, f64)>, i| {
                let d = squared_distance(&points[i], &cluster.centroids[j]);
                match best {
                    Some((_, bd)) if bd <= d => best,
                    _ => Some((i, d)),
                }
            })
        })
        .map(|(i, _)| i)
        .collect()
}

/// Mean silhouette coefficient under Euclidean distance. Points in singleton
/// clusters contribute 0; with fewer than two labels the score is 0.
pub fn silhouette_score(points: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if points.len() != labels.len() {
        return Err(Error::shape("silhouette_score", points.len(), labels.len()));
    }
    let n_labels = labels.iter().max().map_or(0, |m| m + 1);
    let present: HashSet<usize> = labels.iter().copied().collect();
    if present.len() < 2 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (i, p) in points.iter().enumerate() {
        let mut sums = vec![0.0; n_labels];
        let mut counts = vec![0usize; n_labels];
        for (j, q) in points.iter().enumerate() {
            if i != j {
                sums[labels[j]] += squared_distance(p, q).sqrt();
                counts[labels[j]] += 1;
            }
        }
        let own = labels[i];
        if counts[own] == 0 {
            continue;
        }
        let a = sums[own] / counts[own] as f64;
        let b = (0..n_labels)
            .filter(|&l| l != own && counts[l] > 0)
            .map(|l| sums[l] / counts[l] as f64)
            .fold(f64::INFINITY, f64::min);
        let denom = a.max(b);
        if denom > 0.0 {
            total += (b - a) / denom;
        }
    }
    Ok(total / points.len() as f64)
}
