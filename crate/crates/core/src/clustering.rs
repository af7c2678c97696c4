//! Attribute partitions: manual partition files, K-Means over attribute
//! semantic vectors, and cluster-count halving.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dedn::ClusterPartition;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KmeansConfig {
    pub k: usize,
    pub seed: u64,
    pub max_iters: usize,
    /// Stop once no centroid moves further than this.
    pub tol: f64,
    /// Scale every attribute vector to unit length first.
    pub unit_norm: bool,
}

impl KmeansConfig {
    pub fn new(k: usize, seed: u64) -> Self {
        Self {
            k,
            seed,
            max_iters: 100,
            tol: 1e-6,
            unit_norm: false,
        }
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        if self.k == 0 {
            return Err(Error::config("k must be at least 1"));
        }
        if self.k > d {
            return Err(Error::config(format!("k = {} exceeds the {d} attributes", self.k)));
        }
        if self.max_iters == 0 {
            return Err(Error::config("max_iters must be positive"));
        }
        if self.tol.is_nan() || self.tol < 0.0 {
            return Err(Error::config("tol must be >= 0"));
        }
        Ok(())
    }
}

/// Outcome of a Lloyd run.
#[derive(Clone, Debug, PartialEq)]
pub struct KmeansFit {
    pub assignment: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    /// Inertia after every centroid update, in iteration order.
    pub inertia_history: Vec<f64>,
    pub iterations: usize,
}

impl KmeansFit {
    pub fn inertia(&self) -> f64 {
        self.inertia_history.last().copied().unwrap_or(0.0)
    }
}

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid; ties go to the lowest index.
fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let dist = sq_dist(p, c);
        if dist < best.1 {
            best = (j, dist);
        }
    }
    best
}

fn kmeans_pp_init(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut chosen = vec![rng.random_range(0..n)];
    let mut dist: Vec<f64> = points.iter().map(|p| sq_dist(p, &points[chosen[0]])).collect();
    while chosen.len() < k {
        let total: f64 = dist.iter().sum();
        let next = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &w) in dist.iter().enumerate() {
                acc += w;
                if w > 0.0 && acc > target {
                    pick = Some(i);
                    break;
                }
            }
            // rounding can leave target at the very end of the mass
            pick.unwrap_or_else(|| dist.iter().rposition(|&w| w > 0.0).expect("positive mass"))
        } else {
            (0..n).find(|i| !chosen.contains(i)).expect("k <= n")
        };
        chosen.push(next);
        for (dd, p) in dist.iter_mut().zip(points) {
            *dd = dd.min(sq_dist(p, &points[next]));
        }
    }
    chosen.into_iter().map(|i| points[i].clone()).collect()
}

fn assign(points: &[Vec<f64>], centroids: &mut [Vec<f64>]) -> Vec<usize> {
    let k = centroids.len();
    let mut assignment: Vec<usize> = points.iter().map(|p| nearest(p, centroids).0).collect();
    // an empty cluster takes the point farthest from its centroid among
    // clusters that can spare one
    for j in 0..k {
        let mut counts = vec![0usize; k];
        assignment.iter().for_each(|&a| counts[a] += 1);
        if counts[j] > 0 {
            continue;
        }
        let victim = (0..points.len())
            .filter(|&i| counts[assignment[i]] > 1)
            .map(|i| (i, sq_dist(&points[i], &centroids[assignment[i]])))
            .fold(None::<(usize, f64)>, |best, cur| match best {
                Some(b) if b.1 >= cur.1 => Some(b),
                _ => Some(cur),
            })
            .map(|(i, _)| i)
            .expect("k <= n leaves a donor cluster");
        assignment[victim] = j;
        centroids[j] = points[victim].clone();
    }
    assignment
}

fn means(points: &[Vec<f64>], assignment: &[usize], k: usize) -> Vec<Vec<f64>> {
    let dim = points[0].len();
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (p, &a) in points.iter().zip(assignment) {
        counts[a] += 1;
        for (s, x) in sums[a].iter_mut().zip(p) {
            *s += x;
        }
    }
    for (s, &c) in sums.iter_mut().zip(&counts) {
        s.iter_mut().for_each(|x| *x /= c as f64);
    }
    sums
}

pub fn inertia(points: &[Vec<f64>], assignment: &[usize], centroids: &[Vec<f64>]) -> f64 {
    points
        .iter()
        .zip(assignment)
        .map(|(p, &a)| sq_dist(p, &centroids[a]))
        .sum()
}

/// Lloyd's algorithm from a k-means++ start.
pub fn kmeans(points: &[Vec<f64>], cfg: &KmeansConfig) -> Result<KmeansFit> {
    cfg.validate(points.len())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut centroids = kmeans_pp_init(points, cfg.k, &mut rng);
    let mut assignment = assign(points, &mut centroids);
    let mut history = Vec::new();
    let mut iterations = 0;
    while iterations < cfg.max_iters {
        iterations += 1;
        let updated = means(points, &assignment, cfg.k);
        let shift = centroids
            .iter()
            .zip(&updated)
            .map(|(a, b)| sq_dist(a, b).sqrt())
            .fold(0.0, f64::max);
        centroids = updated;
        history.push(inertia(points, &assignment, &centroids));
        let next = assign(points, &mut centroids);
        if next == assignment {
            break;
        }
        assignment = next;
        if shift <= cfg.tol {
            centroids = means(points, &assignment, cfg.k);
            history.push(inertia(points, &assignment, &centroids));
            break;
        }
    }
    Ok(KmeansFit {
        assignment,
        centroids,
        inertia_history: history,
        iterations,
    })
}

/// Groups attributes by K-Means over the rows of `v` (`D × G`). Clusters are
/// ordered by their smallest member; members ascend.
pub fn kmeans_partition(v: &Tensor, cfg: &KmeansConfig) -> Result<ClusterPartition> {
    let (d, _) = v.dim2();
    cfg.validate(d)?;
    if !v.is_finite() {
        return Err(Error::contract("attribute vectors hold non-finite values"));
    }
    let mut points: Vec<Vec<f64>> = (0..d)
        .map(|i| v.row_slice(i).iter().map(|&x| x as f64).collect())
        .collect();
    if cfg.unit_norm {
        for p in &mut points {
            let norm = p.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 0.0 {
                p.iter_mut().for_each(|x| *x /= norm);
            }
        }
    }
    let fit = kmeans(&points, cfg)?;
    partition_from_assignment(&fit.assignment, cfg.k)
}

pub fn partition_from_assignment(assignment: &[usize], k: usize) -> Result<ClusterPartition> {
    let mut clusters = vec![Vec::new(); k];
    for (i, &a) in assignment.iter().enumerate() {
        clusters[a].push(i);
    }
    clusters.sort_by_key(|c| c.first().copied().unwrap_or(usize::MAX));
    Ok(ClusterPartition::new(clusters, assignment.len())?)
}

/// Reads a JSON array of arrays of attribute indices and validates it as a
/// partition of `0..d`.
pub fn load_manual_partition(path: impl AsRef<Path>, d: usize) -> Result<ClusterPartition> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let clusters: Vec<Vec<usize>> = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
    Ok(ClusterPartition::new(clusters, d)?)
}

pub fn save_partition(p: &ClusterPartition, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string(p).expect("partition serializes") + "\n";
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Merges clusters `2i` and `2i+1`; with an odd count the trailing cluster
/// joins the last pair.
pub fn halve_partition(p: &ClusterPartition) -> Result<ClusterPartition> {
    let q = p.q();
    if q < 2 {
        return Err(Error::contract(format!("cannot halve a partition of {q} cluster")));
    }
    let mut merged: Vec<Vec<usize>> = p
        .clusters()
        .chunks(2)
        .map(|pair| pair.concat())
        .collect();
    if q % 2 == 1 {
        let tail = merged.pop().expect("odd count leaves a tail");
        merged.last_mut().expect("q >= 3 leaves a pair").extend(tail);
    }
    Ok(ClusterPartition::new(merged, p.d())?)
}
