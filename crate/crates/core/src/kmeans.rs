//! Lloyd's k-means with k-means++ seeding.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KMeansParams {
    pub max_iters: usize,
    /// Stop once the relative WCSS decrease between iterations falls below this.
    pub rel_tol: f64,
    pub seed: u64,
}

impl Default for KMeansParams {
    fn default() -> Self {
        Self {
            max_iters: 100,
            rel_tol: 1e-4,
            seed: 0,
        }
    }
}

impl KMeansParams {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 || !(self.rel_tol > 0.0) {
            return Err(Error::InvalidConfig("k-means needs max_iters >= 1 and rel_tol > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    /// Clusters that ended without members; their centroids are meaningless.
    pub empty: Vec<bool>,
    /// Within-cluster sum of squares after each Lloyd iteration.
    pub wcss_history: Vec<f64>,
}

impl KMeansResult {
    pub fn wcss(&self) -> f64 {
        self.wcss_history.last().copied().unwrap_or(0.0)
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.centroids.len()];
        for &a in &self.assignments {
            sizes[a] += 1;
        }
        sizes
    }
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centroids.iter().enumerate() {
        let d = sq_dist(p, c);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

/// Clusters `points` into `k` groups. With `points.len() <= k` every point
/// becomes its own cluster and the remaining clusters are flagged empty.
pub fn kmeans(points: &[Vec<f64>], k: usize, params: &KMeansParams) -> Result<KMeansResult> {
    params.validate()?;
    if k == 0 {
        return Err(Error::InvalidConfig("k-means needs k >= 1".into()));
    }
    let Some(first) = points.first() else {
        return Err(Error::InvalidConfig("k-means needs at least one point".into()));
    };
    let dim = first.len();
    if let Some(bad) = points.iter().find(|p| p.len() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            found: bad.len(),
        });
    }

    let n = points.len();
    if n <= k {
        let mut centroids: Vec<Vec<f64>> = points.to_vec();
        centroids.resize(k, vec![0.0; dim]);
        return Ok(KMeansResult {
            assignments: (0..n).collect(),
            centroids,
            empty: (0..k).map(|i| i >= n).collect(),
            wcss_history: vec![0.0],
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut centroids = seed_plus_plus(points, k, &mut rng);
    let mut assignments = vec![0usize; n];
    let mut dists = vec![0.0f64; n];
    let mut history: Vec<f64> = Vec::new();

    for _ in 0..params.max_iters {
        for (i, p) in points.iter().enumerate() {
            let (c, d) = nearest(p, &centroids);
            assignments[i] = c;
            dists[i] = d;
        }
        let mut counts = vec![0usize; k];
        for &a in &assignments {
            counts[a] += 1;
        }

        // Move the point farthest from its centroid into each empty cluster.
        for c in 0..k {
            if counts[c] > 0 {
                continue;
            }
            let mut far: Option<(usize, f64)> = None;
            for i in 0..n {
                if counts[assignments[i]] > 1 && dists[i] > 0.0 && far.is_none_or(|(_, d)| dists[i] > d) {
                    far = Some((i, dists[i]));
                }
            }
            if let Some((i, _)) = far {
                counts[assignments[i]] -= 1;
                assignments[i] = c;
                counts[c] = 1;
                dists[i] = 0.0;
                centroids[c] = points[i].clone();
            }
        }

        let mut sums = vec![vec![0.0; dim]; k];
        for (p, &a) in points.iter().zip(&assignments) {
            for (s, v) in sums[a].iter_mut().zip(p) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                let inv = 1.0 / counts[c] as f64;
                centroids[c] = sums[c].iter().map(|s| s * inv).collect();
            }
        }

        let wcss: f64 = points
            .iter()
            .zip(&assignments)
            .map(|(p, &a)| sq_dist(p, &centroids[a]))
            .sum();
        let prev = history.last().copied();
        history.push(wcss);
        if let Some(prev) = prev {
            if prev <= 0.0 || (prev - wcss) / prev < params.rel_tol {
                break;
            }
        } else if wcss == 0.0 {
            break;
        }
    }

    let mut empty = vec![true; k];
    for &a in &assignments {
        empty[a] = false;
    }
    Ok(KMeansResult {
        assignments,
        centroids,
        empty,
        wcss_history: history,
    })
}

/// k-means++: first center uniform, then each next center drawn with
/// probability proportional to squared distance to the nearest chosen one.
/// When every point coincides with a chosen center the rest reuse the first.
fn seed_plus_plus(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut centroids = Vec::with_capacity(k);
    centroids.push(points[rng.random_range(0..n)].clone());
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        if total <= 0.0 {
            centroids.push(centroids[0].clone());
            continue;
        }
        let target = rng.random::<f64>() * total;
        let mut acc = 0.0;
        let mut pick = n - 1;
        for (i, &d) in d2.iter().enumerate() {
            acc += d;
            if d > 0.0 && acc > target {
                pick = i;
                break;
            }
        }
        // Guard against rounding landing on an already-chosen point.
        if d2[pick] <= 0.0 {
            pick = d2.iter().rposition(|&d| d > 0.0).expect("total > 0");
        }
        let c = points[pick].clone();
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &c));
        }
        centroids.push(c);
    }
    centroids
}
