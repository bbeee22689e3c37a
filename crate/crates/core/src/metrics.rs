//! Fidelity and memorization metrics over feature sets.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::canvas::LatentCanvas;
use crate::error::{Error, Result};
use crate::rng::{normals, stream, Domain};

/// Non-empty set of equal-length feature vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    vectors: Vec<Vec<f64>>,
}

impl FeatureSet {
    pub fn new(vectors: Vec<Vec<f64>>) -> Result<Self> {
        let Some(first) = vectors.first() else {
            return Err(Error::InsufficientSamples("feature set is empty".into()));
        };
        let dim = first.len();
        if dim == 0 {
            return Err(Error::InvalidArgument("feature vectors are empty".into()));
        }
        if let Some(v) = vectors.iter().find(|v| v.len() != dim) {
            return Err(Error::shape(&[dim], &[v.len()]));
        }
        Ok(FeatureSet { vectors })
    }

    /// One-dimensional features.
    pub fn from_scalars(values: &[f64]) -> Result<Self> {
        Self::new(values.iter().map(|&v| vec![v]).collect())
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors[0].len()
    }

    pub fn vectors(&self) -> &[Vec<f64>] {
        &self.vectors
    }

    pub fn get(&self, i: usize) -> &[f64] {
        &self.vectors[i]
    }

    fn check_dim(&self, other: &FeatureSet) -> Result<()> {
        if self.dim() != other.dim() {
            return Err(Error::shape(&[self.dim()], &[other.dim()]));
        }
        Ok(())
    }
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn distance(a: &[f64], b: &[f64]) -> f64 {
    squared_distance(a, b).sqrt()
}

/// Pearson correlation of two equal-length samples.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape(&[a.len()], &[b.len()]));
    }
    if a.len() < 2 {
        return Err(Error::InsufficientSamples(
            "correlation needs at least 2 samples".into(),
        ));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::Degenerate("zero variance".into()));
    }
    Ok(sab / (saa * sbb).sqrt())
}

/// Distance from each point to its `k`-th nearest other point.
pub fn knn_radius(fs: &FeatureSet, k: usize) -> Result<Vec<f64>> {
    if k == 0 || k >= fs.len() {
        return Err(Error::InsufficientSamples(format!(
            "k = {k} needs 1 <= k < {} points",
            fs.len()
        )));
    }
    Ok((0..fs.len())
        .into_par_iter()
        .map(|i| {
            let mut d: Vec<f64> = (0..fs.len())
                .filter(|&j| j != i)
                .map(|j| distance(fs.get(i), fs.get(j)))
                .collect();
            let (_, kth, _) = d.select_nth_unstable_by(k - 1, f64::total_cmp);
            *kth
        })
        .collect())
}

/// Fraction of `queries` inside at least one `k`-NN ball of `manifold`.
fn coverage(queries: &FeatureSet, manifold: &FeatureSet, radii: &[f64]) -> f64 {
    let hits = queries
        .vectors()
        .par_iter()
        .filter(|q| manifold.vectors().iter().zip(radii).any(|(m, &r)| distance(q, m) <= r))
        .count();
    hits as f64 / queries.len() as f64
}

/// Improved precision and recall with `k`-NN manifolds.
pub fn improved_precision_recall(real: &FeatureSet, gen: &FeatureSet, k: usize) -> Result<(f64, f64)> {
    real.check_dim(gen)?;
    let real_r = knn_radius(real, k)?;
    let gen_r = knn_radius(gen, k)?;
    Ok((coverage(gen, real, &real_r), coverage(real, gen, &gen_r)))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AuthenticityReport {
    pub authenticity: f64,
    pub flagged: usize,
    /// Every training point coincides with another, so no gap is positive.
    pub degenerate: bool,
}

/// Fraction of generated samples that are not closer to their nearest
/// training point than that point is to its own nearest neighbour.
pub fn authenticity(train: &FeatureSet, gen: &FeatureSet) -> Result<AuthenticityReport> {
    train.check_dim(gen)?;
    if train.len() < 2 {
        return Err(Error::InsufficientSamples(
            "authenticity needs at least 2 training points".into(),
        ));
    }
    let gaps = knn_radius(train, 1)?;
    let degenerate = gaps.iter().all(|&g| g == 0.0);
    if degenerate {
        log::warn!("authenticity: all training points coincide");
    }
    let flagged = gen
        .vectors()
        .par_iter()
        .filter(|g| {
            let (best, d) = nearest(train, g);
            d < gaps[best]
        })
        .count();
    Ok(AuthenticityReport {
        authenticity: 1.0 - flagged as f64 / gen.len() as f64,
        flagged,
        degenerate,
    })
}

/// Index and distance of the nearest point; ties go to the lower index.
fn nearest(fs: &FeatureSet, q: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, v) in fs.vectors().iter().enumerate() {
        let d = squared_distance(q, v);
        if d < best.1 {
            best = (i, d);
        }
    }
    (best.0, best.1.sqrt())
}

/// z-scored Mann-Whitney U of `b` against `a` (midranks, no tie
/// correction). Negative when `b` is systematically smaller.
pub fn mann_whitney_z(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InsufficientSamples(
            "Mann-Whitney needs two non-empty samples".into(),
        ));
    }
    let mut all: Vec<(f64, bool)> = a
        .iter()
        .map(|&v| (v, false))
        .chain(b.iter().map(|&v| (v, true)))
        .collect();
    all.sort_by(|x, y| x.0.total_cmp(&y.0));
    let mut rank_sum_b = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum_b += midrank * all[i..=j].iter().filter(|e| e.1).count() as f64;
        i = j + 1;
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let u = rank_sum_b - nb * (nb + 1.0) / 2.0;
    let mu = na * nb / 2.0;
    let sd = (na * nb * (na + nb + 1.0) / 12.0).sqrt();
    Ok((u - mu) / sd)
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    pub centroids: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    pub inertia: f64,
}

impl KMeans {
    /// Nearest centroid; ties go to the lower index.
    pub fn assign(&self, x: &[f64]) -> usize {
        nearest_centroid(&self.centroids, x).0
    }
}

fn nearest_centroid(centroids: &[Vec<f64>], x: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centroids.iter().enumerate() {
        let d = squared_distance(x, c);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

pub const KMEANS_ITERATIONS: usize = 50;
pub const KMEANS_RESTARTS: usize = 5;

/// Seeded k-means++ with Lloyd iterations; best inertia over restarts.
pub fn kmeans(points: &FeatureSet, k: usize, seed: u64) -> Result<KMeans> {
    if k == 0 || k > points.len() {
        return Err(Error::InsufficientSamples(format!(
            "k-means with {k} cells needs at least {k} points, got {}",
            points.len()
        )));
    }
    let mut best: Option<KMeans> = None;
    for restart in 0..KMEANS_RESTARTS {
        let run = lloyd(points, k, seed, restart as u64);
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

fn lloyd(points: &FeatureSet, k: usize, seed: u64, restart: u64) -> KMeans {
    let mut rng = stream(seed, Domain::KMeans, restart, 0);
    let n = points.len();
    let mut centroids = vec![points.get(rng.random_range(0..n)).to_vec()];
    let mut d2: Vec<f64> = points
        .vectors()
        .iter()
        .map(|p| squared_distance(p, &centroids[0]))
        .collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            d2.iter()
                .position(|&d| {
                    u -= d;
                    u < 0.0
                })
                .unwrap_or_else(|| d2.iter().rposition(|&d| d > 0.0).unwrap_or(n - 1))
        } else {
            rng.random_range(0..n)
        };
        centroids.push(points.get(pick).to_vec());
        for (d, p) in d2.iter_mut().zip(points.vectors()) {
            *d = d.min(squared_distance(p, centroids.last().unwrap()));
        }
    }
    let dim = points.dim();
    let mut assignments = vec![usize::MAX; n];
    for _ in 0..KMEANS_ITERATIONS {
        let next: Vec<usize> = points
            .vectors()
            .iter()
            .map(|p| nearest_centroid(&centroids, p).0)
            .collect();
        if next == assignments {
            break;
        }
        assignments = next;
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.vectors().iter().zip(&assignments) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(p) {
                *s += v;
            }
        }
        for ((c, s), &m) in centroids.iter_mut().zip(sums).zip(&counts) {
            // an emptied cell keeps its previous centre
            if m > 0 {
                *c = s.into_iter().map(|v| v / m as f64).collect();
            }
        }
    }
    let inertia = points.vectors().iter().map(|p| nearest_centroid(&centroids, p).1).sum();
    let assignments = points
        .vectors()
        .iter()
        .map(|p| nearest_centroid(&centroids, p).0)
        .collect();
    KMeans {
        centroids,
        assignments,
        inertia,
    }
}

/// Per-cell data-copying diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellStat {
    pub cell: usize,
    pub p_n: f64,
    pub q_m: f64,
    pub retained: bool,
    pub z: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CtReport {
    pub ct: f64,
    pub tau: f64,
    pub cells: Vec<CellStat>,
}

impl CtReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("cell,P_n,Q_m,z\n");
        for c in &self.cells {
            let z = c.z.map(|z| z.to_string()).unwrap_or_default();
            out.push_str(&format!("{},{},{},{}\n", c.cell, c.p_n, c.q_m, z));
        }
        out
    }
}

/// Default retention threshold: cells with fewer than 20 generated samples drop out.
pub fn default_tau(gen_len: usize) -> f64 {
    20.0 / gen_len as f64
}

/// Data-copying score: the `P_n`-weighted mean over retained cells of the
/// z-scored Mann-Whitney statistic of generated-to-train against
/// test-to-train squared distances.
pub fn ct_score(
    train: &FeatureSet,
    test: &FeatureSet,
    gen: &FeatureSet,
    cells: usize,
    tau: Option<f64>,
    seed: u64,
) -> Result<CtReport> {
    train.check_dim(test)?;
    train.check_dim(gen)?;
    let tau = tau.unwrap_or_else(|| default_tau(gen.len()));
    let km = kmeans(train, cells, seed)?;
    let min_d2 = |y: &Vec<f64>| -> f64 {
        train
            .vectors()
            .iter()
            .map(|x| squared_distance(x, y))
            .fold(f64::INFINITY, f64::min)
    };
    let split = |fs: &FeatureSet| -> Vec<Vec<f64>> {
        let d: Vec<(usize, f64)> = fs.vectors().par_iter().map(|y| (km.assign(y), min_d2(y))).collect();
        let mut per = vec![Vec::new(); cells];
        for (c, v) in d {
            per[c].push(v);
        }
        per
    };
    let test_cells = split(test);
    let gen_cells = split(gen);
    let mut stats = Vec::with_capacity(cells);
    let (mut num, mut den) = (0.0, 0.0);
    for c in 0..cells {
        let p_n = test_cells[c].len() as f64 / test.len() as f64;
        let q_m = gen_cells[c].len() as f64 / gen.len() as f64;
        let retained = q_m >= tau && !gen_cells[c].is_empty();
        let z = if retained {
            if test_cells[c].is_empty() {
                return Err(Error::InsufficientSamples(format!(
                    "retained cell {c} has no test samples"
                )));
            }
            let z = mann_whitney_z(&test_cells[c], &gen_cells[c])?;
            num += p_n * z;
            den += p_n;
            Some(z)
        } else {
            None
        };
        stats.push(CellStat {
            cell: c,
            p_n,
            q_m,
            retained,
            z,
        });
    }
    if !stats.iter().any(|s| s.retained) {
        return Err(Error::InsufficientSamples(format!("no cell reaches tau = {tau}")));
    }
    Ok(CtReport {
        ct: num / den,
        tau,
        cells: stats,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CorrEstimate {
    pub r: f64,
    pub se: f64,
    pub n: usize,
}

/// Correlation across samples between channel-0 pixels `p1` and `p2`.
pub fn cross_boundary_corr(samples: &[LatentCanvas], p1: (usize, usize), p2: (usize, usize)) -> Result<CorrEstimate> {
    if samples.len() < 30 {
        return Err(Error::InsufficientSamples(format!(
            "need at least 30 samples, got {}",
            samples.len()
        )));
    }
    let pick = |p: (usize, usize)| -> Result<Vec<f64>> {
        samples
            .iter()
            .map(|s| {
                s.get([0, p.0, p.1])
                    .copied()
                    .ok_or_else(|| Error::InvalidArgument(format!("pixel {p:?} outside a {:?} canvas", s.dim())))
            })
            .collect()
    };
    let n = samples.len();
    Ok(CorrEstimate {
        r: pearson(&pick(p1)?, &pick(p2)?)?,
        se: 1.0 / (n as f64).sqrt(),
        n,
    })
}

/// Feature extractor for canvases.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(tag = "mode", rename_all = "kebab-case", deny_unknown_fields)]
pub enum EmbedMode {
    /// Row-major flattening.
    #[default]
    Raw,
    /// Seeded Gaussian projection to `dim` features, scaled by `1/sqrt(dim)`.
    RandomProjection { dim: usize, seed: u64 },
}

pub fn embed_features(canvases: &[LatentCanvas], mode: EmbedMode) -> Result<FeatureSet> {
    let Some(first) = canvases.first() else {
        return Err(Error::InsufficientSamples("no canvases to embed".into()));
    };
    if let Some(c) = canvases.iter().find(|c| c.dim() != first.dim()) {
        return Err(Error::shape(first.shape(), c.shape()));
    }
    let flat: Vec<Vec<f64>> = canvases.iter().map(|c| c.iter().copied().collect()).collect();
    match mode {
        EmbedMode::Raw => FeatureSet::new(flat),
        EmbedMode::RandomProjection { dim, seed } => {
            if dim == 0 {
                return Err(Error::InvalidArgument("projection dim must be positive".into()));
            }
            let d = first.len();
            let mut rng = stream(seed, Domain::Embed, d as u64, dim as u64);
            let scale = 1.0 / (dim as f64).sqrt();
            let matrix: Vec<f64> = normals(&mut rng, dim * d).into_iter().map(|v| v * scale).collect();
            let projected = flat
                .par_iter()
                .map(|x| {
                    matrix
                        .chunks_exact(d)
                        .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
                        .collect()
                })
                .collect();
            FeatureSet::new(projected)
        }
    }
}
