//! KMeans++ seeding and Lloyd refinement.
//!
//! Assignment runs row-parallel; every reduction (centroid sums, inertia)
//! walks rows in ascending index order so results are identical for a fixed
//! seed regardless of thread count.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ivf::IvfError;
use crate::linalg::{squared_l2, Matrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Centroids {
    pub vectors: Matrix,
}

impl Centroids {
    pub fn new(vectors: Matrix) -> Result<Self, IvfError> {
        if vectors.rows() == 0 {
            return Err(IvfError::InvalidParam("at least one centroid required".into()));
        }
        if vectors.as_slice().iter().any(|x| x.is_nan()) {
            return Err(IvfError::InvalidParam("centroid contains NaN".into()));
        }
        Ok(Self { vectors })
    }

    pub fn n_clusters(&self) -> usize {
        self.vectors.rows()
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub centroids: Centroids,
    pub assignment: Vec<u32>,
    pub inertia: f64,
    /// Inertia after seeding, then after each Lloyd iteration.
    pub inertia_history: Vec<f64>,
    pub iterations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KMeansConfig {
    pub k: usize,
    pub max_iters: usize,
    pub tol: f64,
    pub seed: u64,
}

impl KMeansConfig {
    pub fn new(k: usize, seed: u64) -> Self {
        Self {
            k,
            max_iters: 25,
            tol: 1e-4,
            seed,
        }
    }
}

fn check_k(data: &Matrix, k: usize) -> Result<(), IvfError> {
    if k == 0 {
        return Err(IvfError::InvalidParam("k must be at least 1".into()));
    }
    if k > data.rows() {
        return Err(IvfError::KTooLarge { k, n: data.rows() });
    }
    Ok(())
}

/// Greedy D² seeding: first center uniform; each round draws
/// `2 + floor(ln k)` candidates with probability proportional to squared
/// distance from the nearest chosen center and keeps the one that lowers the
/// total potential most.
pub fn kmeans_pp_init(data: &Matrix, k: usize, seed: u64) -> Result<Centroids, IvfError> {
    check_k(data, k)?;
    let n = data.rows();
    let trials = 2 + (k as f64).ln().floor() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = Vec::with_capacity(k);
    let mut is_chosen = vec![false; n];
    let first = rng.gen_range(0..n);
    chosen.push(first);
    is_chosen[first] = true;
    let mut d2 = dist_to(data, first, None);
    d2[first] = 0.0;
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut best: Option<(f64, usize, Vec<f64>)> = None;
            for _ in 0..trials {
                let cand = sample_d2(&d2, total, &mut rng);
                let nd = dist_to(data, cand, Some(&d2));
                let pot: f64 = nd.iter().sum();
                if best.as_ref().is_none_or(|b| pot < b.0) {
                    best = Some((pot, cand, nd));
                }
            }
            let (_, cand, nd) = best.expect("at least one trial");
            d2 = nd;
            cand
        } else {
            // all remaining points coincide with chosen centers
            let free: Vec<usize> = (0..n).filter(|&i| !is_chosen[i]).collect();
            free[rng.gen_range(0..free.len())]
        };
        chosen.push(next);
        is_chosen[next] = true;
        d2[next] = 0.0;
    }
    let rows: Vec<&[f32]> = chosen.iter().map(|&i| data.row(i)).collect();
    Centroids::new(Matrix::from_rows(&rows, data.cols()))
}

fn sample_d2(d2: &[f64], total: f64, rng: &mut ChaCha8Rng) -> usize {
    let r = rng.gen::<f64>() * total;
    let mut acc = 0.0;
    for (i, &w) in d2.iter().enumerate() {
        acc += w;
        if w > 0.0 && acc > r {
            return i;
        }
    }
    // rounding can leave r just past the final sum
    d2.iter().rposition(|&w| w > 0.0).expect("positive total")
}

/// Squared distance to row `c`, capped by `prev` when given.
fn dist_to(data: &Matrix, c: usize, prev: Option<&[f64]>) -> Vec<f64> {
    let center = data.row(c);
    (0..data.rows())
        .into_par_iter()
        .map(|i| {
            let d = squared_l2(data.row(i), center) as f64;
            prev.map_or(d, |p| d.min(p[i]))
        })
        .collect()
}

/// Nearest centroid per row (ties to lower centroid index) and its distance.
fn assign(data: &Matrix, centroids: &Matrix) -> (Vec<u32>, Vec<f64>) {
    (0..data.rows())
        .into_par_iter()
        .map(|i| {
            let x = data.row(i);
            let mut best = (0u32, f32::INFINITY);
            for c in 0..centroids.rows() {
                let d = squared_l2(x, centroids.row(c));
                if d < best.1 {
                    best = (c as u32, d);
                }
            }
            (best.0, best.1 as f64)
        })
        .unzip()
}

pub fn kmeans_train(data: &Matrix, cfg: &KMeansConfig) -> Result<KMeansResult, IvfError> {
    if cfg.max_iters == 0 {
        return Err(IvfError::InvalidParam("max_iters must be at least 1".into()));
    }
    let init = kmeans_pp_init(data, cfg.k, cfg.seed)?;
    let mut centroids = init.vectors;
    let (mut assignment, mut dists) = assign(data, &centroids);
    let mut inertia: f64 = dists.iter().sum();
    let mut history = vec![inertia];
    let mut iterations = 0;
    let dim = data.cols();
    let k = cfg.k;

    while iterations < cfg.max_iters {
        iterations += 1;
        reseed_empty_clusters(data, &centroids, &mut assignment, &mut dists, k);

        let mut sums = vec![0f64; k * dim];
        let mut counts = vec![0usize; k];
        for (i, &a) in assignment.iter().enumerate() {
            let a = a as usize;
            counts[a] += 1;
            for (s, x) in sums[a * dim..(a + 1) * dim].iter_mut().zip(data.row(i)) {
                *s += *x as f64;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                let inv = 1.0 / counts[c] as f64;
                for (dst, s) in centroids.row_mut(c).iter_mut().zip(&sums[c * dim..(c + 1) * dim]) {
                    *dst = (s * inv) as f32;
                }
            }
        }

        let (a, d) = assign(data, &centroids);
        assignment = a;
        dists = d;
        let next: f64 = dists.iter().sum();
        history.push(next);
        let improvement = if inertia > 0.0 {
            (inertia - next) / inertia
        } else {
            0.0
        };
        inertia = next;
        if improvement < cfg.tol {
            break;
        }
    }

    Ok(KMeansResult {
        centroids: Centroids::new(centroids)?,
        assignment,
        inertia,
        inertia_history: history,
        iterations,
    })
}

/// Moves the farthest member of the largest cluster into each empty cluster.
fn reseed_empty_clusters(
    data: &Matrix,
    centroids: &Matrix,
    assignment: &mut [u32],
    dists: &mut [f64],
    k: usize,
) {
    let mut counts = vec![0usize; k];
    for &a in assignment.iter() {
        counts[a as usize] += 1;
    }
    for empty in 0..k {
        if counts[empty] > 0 {
            continue;
        }
        let largest = (0..k)
            .max_by(|&a, &b| counts[a].cmp(&counts[b]).then(b.cmp(&a)))
            .expect("k >= 1");
        if counts[largest] < 2 {
            break;
        }
        let far = (0..assignment.len())
            .filter(|&i| assignment[i] as usize == largest)
            .max_by(|&a, &b| {
                let da = squared_l2(data.row(a), centroids.row(largest));
                let db = squared_l2(data.row(b), centroids.row(largest));
                da.total_cmp(&db).then(b.cmp(&a))
            })
            .expect("largest cluster is nonempty");
        assignment[far] = empty as u32;
        dists[far] = 0.0;
        counts[largest] -= 1;
        counts[empty] += 1;
    }
}

/// Sum of squared distances from each row to its assigned centroid.
pub fn inertia(data: &Matrix, centroids: &Matrix, assignment: &[u32]) -> f64 {
    assignment
        .iter()
        .enumerate()
        .map(|(i, &a)| squared_l2(data.row(i), centroids.row(a as usize)) as f64)
        .sum()
}
