//! Style extraction: encode a token set, normalize it, seed centroids by
//! greedy farthest-point selection and refine them with Lloyd's K-means.
//! The resulting centroids act as style-level tokens.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{transformer_layer_forward, TransformerLayerParams};
use crate::error::{Error, Result};
use crate::interaction::Side;
use crate::numgraph::{Mask, Matrix, Real, NORM_EPS};

/// Lloyd iteration limits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KMeansConfig {
    pub max_iter: usize,
    /// Stop once no centroid moves farther than this (L2).
    pub tol: f64,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            max_iter: 100,
            tol: 1e-6,
        }
    }
}

/// How initial centroids are picked.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CentroidInit {
    Greedy,
    /// Distinct points drawn uniformly with the given seed.
    Random { seed: u64 },
}

/// Number of clusters for `n` tokens at ratio `k`: `max(floor(k n), 1)`.
pub fn cluster_count(n: usize, k: f64) -> usize {
    // The small offset keeps exact multiples (e.g. 9 * 1/3) from rounding
    // down to the next integer.
    ((k * n as f64 + 1e-9).floor() as usize).max(1)
}

fn sq_dist<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum()
}

/// Seed rows chosen by greedy farthest-point selection.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GreedySeeds {
    pub indices: Vec<usize>,
    /// Set when a seed had to be picked at zero distance from the existing
    /// ones (duplicate points).
    pub degenerate: bool,
}

/// The first seed maximizes the summed distance to all other rows; each
/// further seed maximizes its distance to the nearest seed chosen so far.
/// Ties go to the lowest row index and seeds are always distinct rows.
pub fn greedy_init<T: Real>(x: &Matrix<T>, c: usize) -> Result<GreedySeeds> {
    let n = x.rows();
    if c == 0 || c > n {
        return Err(Error::InvalidArgument(format!(
            "cannot seed {c} centroids from {n} points"
        )));
    }
    let mut total = vec![T::zero(); n];
    for i in 0..n {
        for j in (i + 1)..n {
            let d = sq_dist(x.row(i), x.row(j)).sqrt();
            total[i] = total[i] + d;
            total[j] = total[j] + d;
        }
    }
    let first = argmax(&total, |_| true);
    let mut chosen = vec![first];
    let mut nearest: Vec<T> = (0..n)
        .map(|i| sq_dist(x.row(i), x.row(first)).sqrt())
        .collect();
    let mut degenerate = false;
    while chosen.len() < c {
        let next = argmax(&nearest, |i| !chosen.contains(&i));
        if nearest[next] == T::zero() {
            degenerate = true;
        }
        chosen.push(next);
        for (i, m) in nearest.iter_mut().enumerate() {
            let d = sq_dist(x.row(i), x.row(next)).sqrt();
            if d < *m {
                *m = d;
            }
        }
    }
    Ok(GreedySeeds {
        indices: chosen,
        degenerate,
    })
}

fn argmax<T: Real>(v: &[T], eligible: impl Fn(usize) -> bool) -> usize {
    let mut best: Option<usize> = None;
    for (i, &val) in v.iter().enumerate() {
        if !eligible(i) {
            continue;
        }
        if best.is_none_or(|b| val > v[b]) {
            best = Some(i);
        }
    }
    best.expect("at least one eligible index")
}

/// `c` distinct row indices drawn uniformly.
pub fn random_init(n: usize, c: usize, seed: u64) -> Result<Vec<usize>> {
    if c == 0 || c > n {
        return Err(Error::InvalidArgument(format!(
            "cannot seed {c} centroids from {n} points"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = sample(&mut rng, n, c).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

/// Outcome of Lloyd's iterations.
#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult<T> {
    pub centroids: Matrix<T>,
    pub assignments: Vec<usize>,
    /// Updates that moved at least one centroid.
    pub iterations: usize,
    /// Sum of squared distances to assigned centroids after each update.
    pub objective: Vec<T>,
}

fn nearest_assignments<T: Real>(x: &Matrix<T>, centroids: &Matrix<T>) -> Vec<usize> {
    (0..x.rows())
        .map(|i| {
            let d: Vec<T> = centroids
                .iter_rows()
                .map(|c| sq_dist(x.row(i), c))
                .collect();
            d.iter()
                .enumerate()
                .fold(0, |best, (k, &v)| if v < d[best] { k } else { best })
        })
        .collect()
}

/// Hands every empty cluster the point lying farthest from its current
/// centroid, taken only from clusters that keep at least one member.
fn repair_empty<T: Real>(x: &Matrix<T>, centroids: &Matrix<T>, assign: &mut [usize]) {
    let c = centroids.rows();
    loop {
        let mut sizes = vec![0usize; c];
        for &a in assign.iter() {
            sizes[a] += 1;
        }
        let Some(empty) = sizes.iter().position(|&s| s == 0) else {
            return;
        };
        let mut best: Option<(usize, T)> = None;
        for (i, &a) in assign.iter().enumerate() {
            if sizes[a] < 2 {
                continue;
            }
            let d = sq_dist(x.row(i), centroids.row(a));
            if best.is_none_or(|(_, bd)| d > bd) {
                best = Some((i, d));
            }
        }
        match best {
            Some((i, _)) => assign[i] = empty,
            None => return,
        }
    }
}

fn cluster_means<T: Real>(x: &Matrix<T>, assign: &[usize], c: usize) -> Matrix<T> {
    let mut out = Matrix::zeros(c, x.cols());
    let mut sizes = vec![0usize; c];
    for (i, &a) in assign.iter().enumerate() {
        sizes[a] += 1;
        for (o, &v) in out.row_mut(a).iter_mut().zip(x.row(i)) {
            *o = *o + v;
        }
    }
    for (k, &s) in sizes.iter().enumerate() {
        let inv = T::one() / T::lit(s.max(1) as f64);
        for o in out.row_mut(k) {
            *o = *o * inv;
        }
    }
    out
}

fn objective<T: Real>(x: &Matrix<T>, centroids: &Matrix<T>, assign: &[usize]) -> T {
    assign
        .iter()
        .enumerate()
        .map(|(i, &a)| sq_dist(x.row(i), centroids.row(a)))
        .sum()
}

/// Lloyd's algorithm from the given initial centroids. Each returned
/// centroid is the mean of the rows assigned to it.
pub fn kmeans<T: Real>(
    x: &Matrix<T>,
    init: &Matrix<T>,
    cfg: &KMeansConfig,
) -> Result<KMeansResult<T>> {
    if init.cols() != x.cols() || init.rows() == 0 || init.rows() > x.rows() {
        return Err(Error::shape(
            "kmeans",
            format!("{:?} initial centroids for {:?} points", init.shape(), x.shape()),
        ));
    }
    let c = init.rows();
    let tol = T::lit(cfg.tol);
    let mut centroids = init.clone();
    let mut assignments = Vec::new();
    let mut iterations = 0;
    let mut history = Vec::new();
    for _ in 0..cfg.max_iter.max(1) {
        let mut assign = nearest_assignments(x, &centroids);
        repair_empty(x, &centroids, &mut assign);
        let updated = cluster_means(x, &assign, c);
        let shift = centroids
            .iter_rows()
            .zip(updated.iter_rows())
            .map(|(a, b)| sq_dist(a, b).sqrt())
            .fold(T::zero(), T::max);
        history.push(objective(x, &updated, &assign));
        centroids = updated;
        assignments = assign;
        if shift > T::zero() {
            iterations += 1;
        }
        if shift < tol {
            break;
        }
    }
    Ok(KMeansResult {
        centroids,
        assignments,
        iterations,
        objective: history,
    })
}

/// Centroids over a normalized token set, with the owning centroid of each
/// active token.
#[derive(Debug, Clone, PartialEq)]
pub struct StyleTokens<T> {
    pub centroids: Matrix<T>,
    /// Cluster index per active input token.
    pub assignments: Vec<usize>,
    /// Row indices (among active tokens) used as initial seeds.
    pub seeds: Vec<usize>,
    pub source: Side,
}

impl<T: Real> StyleTokens<T> {
    pub fn count(&self) -> usize {
        self.centroids.rows()
    }

    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut m = vec![Vec::new(); self.count()];
        for (i, &a) in self.assignments.iter().enumerate() {
            m[a].push(i);
        }
        m
    }
}

/// Assignments for one normalized token set: seeds by `init`, then K-means.
pub fn cluster_tokens<T: Real>(
    unit_rows: &Matrix<T>,
    ratio: f64,
    init: CentroidInit,
    cfg: &KMeansConfig,
) -> Result<(Vec<usize>, KMeansResult<T>)> {
    let c = cluster_count(unit_rows.rows(), ratio).min(unit_rows.rows());
    let seeds = match init {
        CentroidInit::Greedy => greedy_init(unit_rows, c)?.indices,
        CentroidInit::Random { seed } => random_init(unit_rows.rows(), c, seed)?,
    };
    let km = kmeans(unit_rows, &unit_rows.select_rows(&seeds), cfg)?;
    Ok((seeds, km))
}

/// Encodes one token set, normalizes the encoded rows and clusters them.
pub fn style_tokens<T: Real>(
    e: &Matrix<T>,
    encoder: &TransformerLayerParams<T>,
    ratio: f64,
    mask: &Mask,
    init: CentroidInit,
    cfg: &KMeansConfig,
    source: Side,
) -> Result<StyleTokens<T>> {
    let encoded = transformer_layer_forward(e, encoder, mask)?;
    let active = encoded.select_rows(&mask.active_indices());
    let unit = active.rows_normalized(T::lit(NORM_EPS));
    let (seeds, km) = cluster_tokens(&unit, ratio, init, cfg)?;
    Ok(StyleTokens {
        centroids: km.centroids,
        assignments: km.assignments,
        seeds,
        source,
    })
}
