//! K-means on representation vectors, cluster separation, nearest neighbours
//! and the adjusted Rand index.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, LabError, Result};
use crate::seed::rng_for;
use crate::stats::{cosine, sq_dist};

pub const MAX_LLOYD_ITERATIONS: usize = 300;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Clustering {
    pub k: usize,
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub wcss: f64,
    /// WCSS after each assignment step of the winning restart.
    pub wcss_history: Vec<f64>,
    pub seed: u64,
    pub restarts: usize,
    /// Index of the restart that produced this result.
    pub best_restart: usize,
}

/// k-means++ seeding, Lloyd iterations to a fixed point (or 300 rounds), best
/// of `restarts` by WCSS with ties going to the earlier restart.
pub fn kmeans(vectors: &[Vec<f64>], k: usize, restarts: usize, seed: u64) -> Result<Clustering> {
    let n = vectors.len();
    if k == 0 {
        return invalid("k must be positive");
    }
    if k > n {
        return invalid(format!("k = {k} exceeds the {n} vectors"));
    }
    if restarts == 0 {
        return invalid("at least one restart is required");
    }
    let d = vectors[0].len();
    if d == 0 || vectors.iter().any(|v| v.len() != d) {
        return invalid("vectors must be nonempty and equally long");
    }
    if vectors.iter().flatten().any(|x| !x.is_finite()) {
        return invalid("vectors contain non-finite values");
    }
    let mut best: Option<Clustering> = None;
    for r in 0..restarts {
        let mut rng = rng_for(seed, &format!("kmeans.{r}"));
        let mut centroids = plus_plus_seeds(vectors, k, &mut rng);
        let mut assignments = vec![usize::MAX; n];
        let mut history = Vec::new();
        for _ in 0..MAX_LLOYD_ITERATIONS {
            let (next, wcss) = assign(vectors, &centroids);
            if let Some(&prev) = history.last() {
                if wcss > prev * (1.0 + 1e-12) + 1e-300 {
                    return Err(LabError::Numeric(format!(
                        "Lloyd iteration increased WCSS from {prev} to {wcss}"
                    )));
                }
            }
            history.push(wcss);
            if next == assignments {
                break;
            }
            assignments = next;
            centroids = update_centroids(vectors, &assignments, k, d);
            reseed_empty(vectors, &mut assignments, &mut centroids);
        }
        if hartigan_refine(vectors, &mut assignments, &mut centroids) {
            let (_, wcss) = assign(vectors, &centroids);
            history.push(wcss);
        }
        let (_, wcss) = assign(vectors, &centroids);
        let better = best.as_ref().is_none_or(|b| wcss < b.wcss);
        if better {
            best = Some(Clustering {
                k,
                assignments,
                centroids,
                wcss,
                wcss_history: history,
                seed,
                restarts,
                best_restart: r,
            });
        }
    }
    Ok(best.expect("at least one restart ran"))
}

fn plus_plus_seeds(vectors: &[Vec<f64>], k: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let n = vectors.len();
    let mut centroids = vec![vectors[rng.random_range(0..n)].clone()];
    let mut nearest: Vec<f64> = vectors.iter().map(|v| sq_dist(v, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in nearest.iter().enumerate() {
                if u < w {
                    chosen = i;
                    break;
                }
                u -= w;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centroids.push(vectors[pick].clone());
        let c = centroids.last().expect("just pushed");
        for (m, v) in nearest.iter_mut().zip(vectors) {
            *m = m.min(sq_dist(v, c));
        }
    }
    centroids
}

/// Nearest centroid per vector (lowest index on ties) and the resulting WCSS.
fn assign(vectors: &[Vec<f64>], centroids: &[Vec<f64>]) -> (Vec<usize>, f64) {
    let mut wcss = 0.0;
    let a = vectors
        .iter()
        .map(|v| {
            let mut best = (0, f64::INFINITY);
            for (j, c) in centroids.iter().enumerate() {
                let dist = sq_dist(v, c);
                if dist < best.1 {
                    best = (j, dist);
                }
            }
            wcss += best.1;
            best.0
        })
        .collect();
    (a, wcss)
}

fn update_centroids(vectors: &[Vec<f64>], assignments: &[usize], k: usize, d: usize) -> Vec<Vec<f64>> {
    let mut sums = vec![vec![0.0; d]; k];
    let mut counts = vec![0usize; k];
    for (v, &a) in vectors.iter().zip(assignments) {
        counts[a] += 1;
        for (s, x) in sums[a].iter_mut().zip(v) {
            *s += x;
        }
    }
    for (s, &c) in sums.iter_mut().zip(&counts) {
        if c > 0 {
            for x in s.iter_mut() {
                *x /= c as f64;
            }
        } else {
            s.iter_mut().for_each(|x| *x = f64::NAN);
        }
    }
    sums
}

/// Single-point transfers that lower WCSS, applied until none is left.
///
/// Moving `x` from cluster `a` to `b` changes WCSS by
/// `n_b/(n_b+1)·‖x−μ_b‖² − n_a/(n_a−1)·‖x−μ_a‖²`. Lloyd fixed points can still
/// admit such moves; the result of this pass is also a Lloyd fixed point.
/// Returns whether any point moved.
fn hartigan_refine(vectors: &[Vec<f64>], assignments: &mut [usize], centroids: &mut [Vec<f64>]) -> bool {
    let k = centroids.len();
    let mut counts = vec![0usize; k];
    for &a in assignments.iter() {
        counts[a] += 1;
    }
    let mut moved_any = false;
    for _ in 0..MAX_LLOYD_ITERATIONS {
        let mut moved = false;
        for (i, v) in vectors.iter().enumerate() {
            let a = assignments[i];
            if counts[a] < 2 {
                continue;
            }
            let na = counts[a] as f64;
            let leave = na / (na - 1.0) * sq_dist(v, &centroids[a]);
            let mut best = (a, 0.0);
            for b in (0..k).filter(|&b| b != a) {
                let nb = counts[b] as f64;
                let delta = nb / (nb + 1.0) * sq_dist(v, &centroids[b]) - leave;
                if delta < best.1 - 1e-12 * leave.max(1e-300) {
                    best = (b, delta);
                }
            }
            let b = best.0;
            if b == a {
                continue;
            }
            let (na, nb) = (counts[a] as f64, counts[b] as f64);
            for (m, x) in centroids[a].iter_mut().zip(v) {
                *m = (*m * na - x) / (na - 1.0);
            }
            for (m, x) in centroids[b].iter_mut().zip(v) {
                *m = (*m * nb + x) / (nb + 1.0);
            }
            counts[a] -= 1;
            counts[b] += 1;
            assignments[i] = b;
            moved = true;
        }
        if !moved {
            break;
        }
        moved_any = true;
    }
    if moved_any {
        let d = vectors[0].len();
        let fresh = update_centroids(vectors, assignments, k, d);
        centroids.clone_from_slice(&fresh);
    }
    moved_any
}

/// Moves each empty cluster onto the point farthest from its own centroid.
fn reseed_empty(vectors: &[Vec<f64>], assignments: &mut [usize], centroids: &mut [Vec<f64>]) {
    for j in 0..centroids.len() {
        if !centroids[j][0].is_nan() {
            continue;
        }
        let far = (0..vectors.len())
            .filter(|&i| !centroids[assignments[i]][0].is_nan())
            .max_by(|&a, &b| {
                let da = sq_dist(&vectors[a], &centroids[assignments[a]]);
                let db = sq_dist(&vectors[b], &centroids[assignments[b]]);
                da.total_cmp(&db).then(b.cmp(&a))
            })
            .expect("some cluster is nonempty");
        centroids[j] = vectors[far].clone();
        assignments[far] = j;
    }
}

/// Separation of one cluster pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairSeparation {
    pub a: usize,
    pub b: usize,
    pub centroid_distance: f64,
    /// `sqrt` of the mean of the two clusters' variances along the centroid axis.
    pub spread: f64,
    pub ratio: Separation,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "lowercase")]
pub enum Separation {
    Finite(f64),
    /// Distinct centroids, zero spread.
    Infinite,
    /// Coincident centroids: no axis to project on.
    Undefined,
}

impl Separation {
    pub fn exceeds(&self, threshold: f64) -> bool {
        match self {
            Separation::Finite(r) => *r > threshold,
            Separation::Infinite => true,
            Separation::Undefined => false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeparationReport {
    pub pairs: Vec<PairSeparation>,
}

impl SeparationReport {
    pub fn fraction_exceeding(&self, threshold: f64) -> f64 {
        let hits = self.pairs.iter().filter(|p| p.ratio.exceeds(threshold)).count();
        hits as f64 / self.pairs.len() as f64
    }
}

/// All pairs among clusters with at least two members.
pub fn cluster_separation(vectors: &[Vec<f64>], clustering: &Clustering) -> Result<SeparationReport> {
    if vectors.len() != clustering.assignments.len() {
        return invalid("clustering does not match the vectors");
    }
    let members: Vec<Vec<&Vec<f64>>> = (0..clustering.k)
        .map(|j| {
            vectors
                .iter()
                .zip(&clustering.assignments)
                .filter(|(_, &a)| a == j)
                .map(|(v, _)| v)
                .collect()
        })
        .collect();
    let eligible: Vec<usize> = (0..clustering.k).filter(|&j| members[j].len() >= 2).collect();
    if eligible.len() < 2 {
        return invalid("separation needs two clusters with at least two members");
    }
    let mut pairs = Vec::new();
    for (i, &a) in eligible.iter().enumerate() {
        for &b in &eligible[i + 1..] {
            let (ca, cb) = (&clustering.centroids[a], &clustering.centroids[b]);
            let dist = sq_dist(ca, cb).sqrt();
            if dist == 0.0 {
                pairs.push(PairSeparation {
                    a,
                    b,
                    centroid_distance: 0.0,
                    spread: f64::NAN,
                    ratio: Separation::Undefined,
                });
                continue;
            }
            let axis: Vec<f64> = cb.iter().zip(ca).map(|(y, x)| (y - x) / dist).collect();
            let proj_var = |pts: &[&Vec<f64>]| {
                let p: Vec<f64> = pts.iter().map(|v| v.iter().zip(&axis).map(|(x, u)| x * u).sum()).collect();
                let m = p.iter().sum::<f64>() / p.len() as f64;
                p.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / p.len() as f64
            };
            let spread = ((proj_var(&members[a]) + proj_var(&members[b])) / 2.0).sqrt();
            let ratio = if spread > 0.0 {
                Separation::Finite(dist / spread)
            } else {
                Separation::Infinite
            };
            pairs.push(PairSeparation {
                a,
                b,
                centroid_distance: dist,
                spread,
                ratio,
            });
        }
    }
    Ok(SeparationReport { pairs })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Cosine,
    Euclidean,
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::Cosine => "cosine",
            Metric::Euclidean => "euclidean",
        })
    }
}

impl FromStr for Metric {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(Metric::Cosine),
            "euclidean" => Ok(Metric::Euclidean),
            _ => invalid(format!("unknown metric '{s}'")),
        }
    }
}

/// The `k` corpus entries closest to `target`: `(id, score)` where the score is
/// the cosine similarity (descending) or the Euclidean distance (ascending).
/// Ties go to the lower id.
pub fn nearest_neighbors(target: &[f64], corpus: &[Vec<f64>], metric: Metric, k: usize) -> Result<Vec<(usize, f64)>> {
    if corpus.is_empty() {
        return invalid("nearest-neighbour corpus is empty");
    }
    if corpus.iter().any(|v| v.len() != target.len()) {
        return invalid("corpus vectors differ in length from the target");
    }
    let mut scored: Vec<(usize, f64)> = corpus
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let s = match metric {
                Metric::Cosine => cosine(target, v),
                Metric::Euclidean => sq_dist(target, v).sqrt(),
            };
            (i, s)
        })
        .collect();
    scored.sort_by(|a, b| {
        let ord = match metric {
            Metric::Cosine => b.1.total_cmp(&a.1),
            Metric::Euclidean => a.1.total_cmp(&b.1),
        };
        ord.then(a.0.cmp(&b.0))
    });
    scored.truncate(k.min(corpus.len()));
    Ok(scored)
}

fn comb2(n: usize) -> f64 {
    (n as f64) * (n as f64 - 1.0) / 2.0
}

/// Adjusted Rand index.
///
/// When the expected index equals its maximum (both partitions trivial), the
/// ratio is 0/0; the result is then 1 for identical partitions and 0 otherwise.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return invalid("partitions differ in length");
    }
    let n = a.len();
    let relabel = |p: &[usize]| -> (Vec<usize>, usize) {
        let mut map = std::collections::BTreeMap::new();
        let out = p
            .iter()
            .map(|x| {
                let next = map.len();
                *map.entry(*x).or_insert(next)
            })
            .collect();
        (out, map.len())
    };
    let (ra, ka) = relabel(a);
    let (rb, kb) = relabel(b);
    let mut table = vec![vec![0usize; kb]; ka];
    for (&x, &y) in ra.iter().zip(&rb) {
        table[x][y] += 1;
    }
    let index: f64 = table.iter().flatten().map(|&c| comb2(c)).sum();
    let sa: f64 = table.iter().map(|row| comb2(row.iter().sum())).sum();
    let sb: f64 = (0..kb).map(|j| comb2(table.iter().map(|r| r[j]).sum())).sum();
    let expected = if n < 2 { 0.0 } else { sa * sb / comb2(n) };
    let max = (sa + sb) / 2.0;
    if max == expected {
        return Ok(if ra == rb { 1.0 } else { 0.0 });
    }
    Ok((index - expected) / (max - expected))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_points_single_cluster() {
        let v = vec![vec![2.0, -1.0]; 5];
        let c = kmeans(&v, 1, 3, 0).unwrap();
        assert_eq!(c.wcss, 0.0);
        assert_eq!(c.centroids[0], vec![2.0, -1.0]);
    }

    #[test]
    fn k_out_of_range_is_an_error() {
        let v = vec![vec![0.0]; 3];
        assert!(kmeans(&v, 0, 1, 0).is_err());
        assert!(kmeans(&v, 4, 1, 0).is_err());
    }

    #[test]
    fn separation_hand_cases() {
        let v = vec![vec![-1.0], vec![1.0], vec![9.0], vec![11.0]];
        let c = Clustering {
            k: 2,
            assignments: vec![0, 0, 1, 1],
            centroids: vec![vec![0.0], vec![10.0]],
            wcss: 4.0,
            wcss_history: vec![],
            seed: 0,
            restarts: 1,
            best_restart: 0,
        };
        let r = cluster_separation(&v, &c).unwrap();
        assert_eq!(r.pairs[0].centroid_distance, 10.0);
        assert_eq!(r.pairs[0].spread, 1.0);
        assert_eq!(r.pairs[0].ratio, Separation::Finite(10.0));

        let v = vec![vec![0.0], vec![0.0], vec![10.0], vec![10.0]];
        let c = Clustering {
            centroids: vec![vec![0.0], vec![10.0]],
            ..c
        };
        let r = cluster_separation(&v, &c).unwrap();
        assert_eq!(r.pairs[0].spread, 0.0);
        assert_eq!(r.pairs[0].ratio, Separation::Infinite);
    }

    #[test]
    fn ari_degenerate_cases() {
        assert_eq!(adjusted_rand_index(&[0, 0, 1, 1], &[5, 5, 7, 7]).unwrap(), 1.0);
        assert_eq!(adjusted_rand_index(&[0; 6], &[0, 0, 1, 1, 2, 2]).unwrap(), 0.0);
        assert_eq!(adjusted_rand_index(&[3; 4], &[1; 4]).unwrap(), 1.0);
    }
}
