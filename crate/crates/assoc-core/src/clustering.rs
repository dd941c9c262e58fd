//! k-means over unit-norm rows at multiple granularities, with per-cluster
//! diagnostics and book-diversity quality filtering.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::ChunkMeta;
use crate::error::{Error, FormatErrorKind, Result};
use crate::util::derive_seed;

pub const DEFAULT_KS: [usize; 6] = [50, 100, 250, 500, 1000, 2000];
pub const ASSIGNMENTS_MAGIC: [u8; 4] = *b"PAMA";
pub const ASSIGNMENTS_VERSION: u32 = 1;

/// Which embedding space a clustering was fit on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SourceTag {
    Association,
    Raw,
    Context,
    RandomMlp,
}

impl SourceTag {
    pub fn as_str(&self) -> &'static str {
        match self {
            SourceTag::Association => "association",
            SourceTag::Raw => "raw",
            SourceTag::Context => "context",
            SourceTag::RandomMlp => "random-mlp",
        }
    }
}

impl std::str::FromStr for SourceTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "association" => Ok(SourceTag::Association),
            "raw" => Ok(SourceTag::Raw),
            "context" => Ok(SourceTag::Context),
            "random" | "random-mlp" => Ok(SourceTag::RandomMlp),
            other => Err(Error::Config(format!("unknown cluster source {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KMeansConfig {
    pub k: usize,
    pub seed: u64,
    pub max_iter: usize,
    pub tol: f64,
}

impl KMeansConfig {
    pub fn new(k: usize, seed: u64) -> Self {
        KMeansConfig {
            k,
            seed,
            max_iter: 100,
            tol: 1e-4,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ClusterModel {
    pub k: usize,
    pub centroids: Array2<f32>,
    pub assignments: Vec<u32>,
    pub inertia: f64,
    pub iterations: usize,
    pub source: SourceTag,
}

/// Squared Euclidean distances from every row to every centroid, computed
/// via `|x|^2 + |c|^2 - 2 x.c` in fixed-size row blocks. Results do not
/// depend on thread count.
fn distance_block(
    rows: &ArrayView2<'_, f32>,
    centroids: &Array2<f32>,
    centroid_sq: &Array1<f32>,
) -> Vec<(u32, f64)> {
    const BLOCK: usize = 2048;
    let n = rows.nrows();
    let blocks: Vec<usize> = (0..n.div_ceil(BLOCK)).collect();
    let mut out = vec![(0u32, 0.0f64); n];
    let chunks: Vec<Vec<(u32, f64)>> = blocks
        .par_iter()
        .map(|&b| {
            let lo = b * BLOCK;
            let hi = ((b + 1) * BLOCK).min(n);
            let view = rows.slice(ndarray::s![lo..hi, ..]);
            let dots = view.dot(&centroids.t()); // (hi-lo) x k
            let mut part = Vec::with_capacity(hi - lo);
            for (r, dot_row) in dots.axis_iter(Axis(0)).enumerate() {
                let row_sq: f32 = view.row(r).iter().map(|v| v * v).sum();
                let mut best = 0u32;
                let mut best_d = f64::INFINITY;
                for (c, &dot) in dot_row.iter().enumerate() {
                    let d = (row_sq + centroid_sq[c] - 2.0 * dot) as f64;
                    // Strict less keeps the lowest cluster id on ties.
                    if d < best_d {
                        best_d = d;
                        best = c as u32;
                    }
                }
                part.push((best, best_d.max(0.0)));
            }
            part
        })
        .collect();
    let mut cursor = 0usize;
    for part in chunks {
        for item in part {
            out[cursor] = item;
            cursor += 1;
        }
    }
    out
}

fn centroid_norms_sq(centroids: &Array2<f32>) -> Array1<f32> {
    Array1::from_iter(
        centroids
            .axis_iter(Axis(0))
            .map(|c| c.iter().map(|v| v * v).sum::<f32>()),
    )
}

/// Assign every row to its nearest centroid (ties to the lowest id).
pub fn assign_nearest(rows: &ArrayView2<'_, f32>, centroids: &Array2<f32>) -> Vec<u32> {
    let sq = centroid_norms_sq(centroids);
    distance_block(rows, centroids, &sq)
        .into_iter()
        .map(|(a, _)| a)
        .collect()
}

/// k-means++ seeding: first center uniform, then D^2 sampling.
fn kmeanspp_init(rows: &ArrayView2<'_, f32>, k: usize, seed: u64) -> Array2<f32> {
    let n = rows.nrows();
    let dim = rows.ncols();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = Array2::<f32>::zeros((k, dim));
    let first = rng.gen_range(0..n);
    centroids.row_mut(0).assign(&rows.row(first));

    let mut d2 = vec![0.0f64; n];
    for (i, row) in rows.axis_iter(Axis(0)).enumerate() {
        d2[i] = row
            .iter()
            .zip(centroids.row(0).iter())
            .map(|(&a, &b)| (a - b) as f64 * (a - b) as f64)
            .sum();
    }

    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.gen_range(0.0..total);
            let mut acc = 0.0f64;
            let mut chosen = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                acc += d;
                if acc > target {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            // All remaining mass at existing centers (duplicate points).
            rng.gen_range(0..n)
        };
        centroids.row_mut(c).assign(&rows.row(pick));
        for (i, row) in rows.axis_iter(Axis(0)).enumerate() {
            let d: f64 = row
                .iter()
                .zip(centroids.row(c).iter())
                .map(|(&a, &b)| (a - b) as f64 * (a - b) as f64)
                .sum();
            if d < d2[i] {
                d2[i] = d;
            }
        }
    }
    centroids
}

/// Mean of each cluster's members in f64, written back as f32 centroids.
/// Returns the ids of empty clusters.
fn recompute_centroids(
    rows: &ArrayView2<'_, f32>,
    assignments: &[u32],
    k: usize,
    centroids: &mut Array2<f32>,
) -> Vec<usize> {
    let dim = rows.ncols();
    let mut sums = vec![0.0f64; k * dim];
    let mut counts = vec![0u64; k];
    for (i, row) in rows.axis_iter(Axis(0)).enumerate() {
        let c = assignments[i] as usize;
        counts[c] += 1;
        let base = c * dim;
        for (d, &v) in row.iter().enumerate() {
            sums[base + d] += v as f64;
        }
    }
    let mut empty = Vec::new();
    for c in 0..k {
        if counts[c] == 0 {
            empty.push(c);
            continue;
        }
        let inv = 1.0 / counts[c] as f64;
        for d in 0..dim {
            centroids[[c, d]] = (sums[c * dim + d] * inv) as f32;
        }
    }
    empty
}

/// Lloyd iterations with k-means++ init. Empty clusters are re-seeded at the
/// point farthest from its current centroid; inertia must not increase
/// between iterations.
pub fn kmeans_fit(rows: &ArrayView2<'_, f32>, config: KMeansConfig, source: SourceTag) -> Result<ClusterModel> {
    let n = rows.nrows();
    if config.k == 0 || config.k > n {
        return Err(Error::Config(format!(
            "k = {} out of range for {n} rows",
            config.k
        )));
    }
    if rows.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite rows in clustering input".into()));
    }

    let mut centroids = kmeanspp_init(rows, config.k, config.seed);
    let mut assignments = vec![0u32; n];
    let mut prev_inertia = f64::INFINITY;
    let mut iterations = 0usize;

    for iter in 0..config.max_iter {
        iterations = iter + 1;
        let sq = centroid_norms_sq(&centroids);
        let assigned = distance_block(rows, &centroids, &sq);
        let inertia: f64 = assigned.iter().map(|&(_, d)| d).sum();
        for (i, &(a, _)) in assigned.iter().enumerate() {
            assignments[i] = a;
        }

        // Assignment minimizes distances given centroids, update minimizes
        // given assignments; allow only float-noise increases.
        if inertia > prev_inertia * (1.0 + 1e-9) + 1e-12 {
            return Err(Error::Numeric(format!(
                "k-means inertia increased at iteration {iter}: {prev_inertia} -> {inertia}"
            )));
        }
        let converged = prev_inertia.is_finite()
            && (prev_inertia - inertia).abs() <= config.tol * prev_inertia.max(1e-30);
        prev_inertia = inertia;

        let empty = recompute_centroids(rows, &assignments, config.k, &mut centroids);
        if !empty.is_empty() {
            // Re-seed each empty cluster at the point farthest from its
            // assigned centroid, excluding points already used.
            let mut dists = distance_block(rows, &centroids, &centroid_norms_sq(&centroids));
            for c in empty {
                let (far_idx, _) = dists
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1 .1.partial_cmp(&b.1 .1).unwrap())
                    .map(|(i, &(_, d))| (i, d))
                    .unwrap();
                centroids.row_mut(c).assign(&rows.row(far_idx));
                dists[far_idx].1 = 0.0;
            }
            prev_inertia = f64::INFINITY; // geometry changed; restart descent check
            continue;
        }

        if converged {
            break;
        }
    }

    // Final assignment against the final centroids.
    let sq = centroid_norms_sq(&centroids);
    let assigned = distance_block(rows, &centroids, &sq);
    let inertia: f64 = assigned.iter().map(|&(_, d)| d).sum();
    for (i, &(a, _)) in assigned.iter().enumerate() {
        assignments[i] = a;
    }

    Ok(ClusterModel {
        k: config.k,
        centroids,
        assignments,
        inertia,
        iterations,
        source,
    })
}

/// Mini-batch variant for corpora that do not fit the plain Lloyd budget.
/// Seeded and deterministic; per-center learning-rate updates.
pub fn minibatch_kmeans_fit(
    rows: &ArrayView2<'_, f32>,
    config: KMeansConfig,
    batch_size: usize,
    source: SourceTag,
) -> Result<ClusterModel> {
    let n = rows.nrows();
    if config.k == 0 || config.k > n {
        return Err(Error::Config(format!(
            "k = {} out of range for {n} rows",
            config.k
        )));
    }
    let batch = batch_size.max(config.k).min(n);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 0x6b6d)); // "km"
    let mut centroids = kmeanspp_init(rows, config.k, config.seed);
    let mut counts = vec![1.0f64; config.k];
    let dim = rows.ncols();

    for _ in 0..config.max_iter {
        let sample: Vec<usize> = (0..batch).map(|_| rng.gen_range(0..n)).collect();
        let mut mini = Array2::<f32>::zeros((batch, dim));
        for (r, &idx) in sample.iter().enumerate() {
            mini.row_mut(r).assign(&rows.row(idx));
        }
        let sq = centroid_norms_sq(&centroids);
        let assigned = distance_block(&mini.view(), &centroids, &sq);
        for (r, &(c, _)) in assigned.iter().enumerate() {
            let c = c as usize;
            counts[c] += 1.0;
            let eta = (1.0 / counts[c]) as f32;
            let row = mini.row(r);
            for d in 0..dim {
                centroids[[c, d]] = (1.0 - eta) * centroids[[c, d]] + eta * row[d];
            }
        }
    }

    let assignments = assign_nearest(rows, &centroids);
    let sq = centroid_norms_sq(&centroids);
    let inertia = distance_block(rows, &centroids, &sq)
        .iter()
        .map(|&(_, d)| d)
        .sum();
    Ok(ClusterModel {
        k: config.k,
        centroids,
        assignments,
        inertia,
        iterations: config.max_iter,
        source,
    })
}

/// Per-cluster diagnostics mirroring the stats table: size, book diversity,
/// dominance, cohesion, and positional/length distributions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterRecord {
    pub cluster: u32,
    pub size: u64,
    pub n_books: u64,
    pub dominance: f64,
    pub mean_intra_cosine: f64,
    pub mean_position: f64,
    pub position_std: f64,
    pub mean_tokens: f64,
    pub passing: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterStats {
    pub k: usize,
    pub source: SourceTag,
    pub clusters: Vec<ClusterRecord>,
    pub passing: usize,
    /// Means over passing clusters, for the summary table.
    pub mean_cosine: f64,
    pub mean_books: f64,
    pub mean_dominance: f64,
}

/// Compute per-cluster statistics; `passing` flags are filled later by
/// [`apply_quality_filter`].
pub fn compute_stats(
    model: &ClusterModel,
    meta: &[ChunkMeta],
    rows: &ArrayView2<'_, f32>,
) -> Result<ClusterStats> {
    if meta.len() != model.assignments.len() || rows.nrows() != meta.len() {
        return Err(Error::Data(
            "metadata, assignments, and rows must be row-aligned".into(),
        ));
    }
    let k = model.k;

    // Normalized centroid directions for the cosine diagnostic.
    let mut unit_centroids = model.centroids.clone();
    for mut c in unit_centroids.axis_iter_mut(Axis(0)) {
        let norm = c.iter().map(|v| (v * v) as f64).sum::<f64>().sqrt() as f32;
        if norm > 0.0 {
            c.mapv_inplace(|v| v / norm);
        }
    }

    let mut size = vec![0u64; k];
    let mut book_counts: Vec<BTreeMap<u32, u64>> = vec![BTreeMap::new(); k];
    let mut cos_sum = vec![0.0f64; k];
    let mut pos_sum = vec![0.0f64; k];
    let mut pos_sq_sum = vec![0.0f64; k];
    let mut tok_sum = vec![0.0f64; k];

    for (i, (&a, m)) in model.assignments.iter().zip(meta.iter()).enumerate() {
        let c = a as usize;
        if c >= k {
            return Err(Error::Data(format!("assignment {a} out of range at row {i}")));
        }
        size[c] += 1;
        *book_counts[c].entry(m.book).or_insert(0) += 1;
        let cos: f64 = rows
            .row(i)
            .iter()
            .zip(unit_centroids.row(c).iter())
            .map(|(&x, &u)| (x * u) as f64)
            .sum();
        cos_sum[c] += cos;
        let p = m.normalized_position as f64;
        pos_sum[c] += p;
        pos_sq_sum[c] += p * p;
        tok_sum[c] += m.token_count as f64;
    }

    let clusters: Vec<ClusterRecord> = (0..k)
        .map(|c| {
            let s = size[c].max(1) as f64;
            let max_book = book_counts[c].values().max().copied().unwrap_or(0);
            let mean_pos = pos_sum[c] / s;
            let var = (pos_sq_sum[c] / s - mean_pos * mean_pos).max(0.0);
            ClusterRecord {
                cluster: c as u32,
                size: size[c],
                n_books: book_counts[c].len() as u64,
                dominance: if size[c] > 0 {
                    max_book as f64 / size[c] as f64
                } else {
                    0.0
                },
                mean_intra_cosine: cos_sum[c] / s,
                mean_position: mean_pos,
                position_std: var.sqrt(),
                mean_tokens: tok_sum[c] / s,
                passing: true,
            }
        })
        .collect();

    Ok(ClusterStats {
        k,
        source: model.source,
        clusters,
        passing: k,
        mean_cosine: 0.0,
        mean_books: 0.0,
        mean_dominance: 0.0,
    })
}

/// Default book-diversity thresholds per granularity.
pub fn default_thresholds() -> BTreeMap<usize, u64> {
    BTreeMap::from([(50, 50), (100, 100), (250, 200), (500, 500), (1000, 500), (2000, 1000)])
}

/// Flag clusters whose book diversity falls below the threshold for this k,
/// and recompute the summary means over passing clusters.
pub fn apply_quality_filter(stats: &mut ClusterStats, thresholds: &BTreeMap<usize, u64>) -> Result<()> {
    let threshold = *thresholds
        .get(&stats.k)
        .ok_or_else(|| Error::Config(format!("no book-diversity threshold configured for k = {}", stats.k)))?;
    let mut passing = 0usize;
    let mut cos = 0.0;
    let mut books = 0.0;
    let mut dom = 0.0;
    for c in &mut stats.clusters {
        c.passing = c.n_books >= threshold;
        if c.passing {
            passing += 1;
            cos += c.mean_intra_cosine;
            books += c.n_books as f64;
            dom += c.dominance;
        }
    }
    stats.passing = passing;
    let denom = passing.max(1) as f64;
    stats.mean_cosine = cos / denom;
    stats.mean_books = books / denom;
    stats.mean_dominance = dom / denom;
    Ok(())
}

/// Write assignments in the fixed binary layout: magic, version, n, k,
/// u32-LE ids, CRC32 footer over the id payload.
pub fn write_assignments(path: &Path, k: usize, assignments: &[u32]) -> Result<()> {
    let mut payload = Vec::with_capacity(assignments.len() * 4);
    for &a in assignments {
        payload.extend_from_slice(&a.to_le_bytes());
    }
    let crc = crc32fast::hash(&payload);
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&ASSIGNMENTS_MAGIC).map_err(|e| Error::io(path, e))?;
    file.write_all(&ASSIGNMENTS_VERSION.to_le_bytes())
        .map_err(|e| Error::io(path, e))?;
    file.write_all(&(assignments.len() as u64).to_le_bytes())
        .map_err(|e| Error::io(path, e))?;
    file.write_all(&(k as u32).to_le_bytes()).map_err(|e| Error::io(path, e))?;
    file.write_all(&payload).map_err(|e| Error::io(path, e))?;
    file.write_all(&crc.to_le_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_assignments(path: &Path) -> Result<(usize, Vec<u32>)> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .map_err(|e| Error::io(path, e))?
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < 24 {
        return Err(Error::format(path, FormatErrorKind::Header, "file too short"));
    }
    if bytes[0..4] != ASSIGNMENTS_MAGIC {
        return Err(Error::format(path, FormatErrorKind::Magic, "not an assignments file"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != ASSIGNMENTS_VERSION {
        return Err(Error::format(path, FormatErrorKind::Version, format!("version {version}")));
    }
    let n = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let k = u32::from_le_bytes(bytes[16..20].try_into().unwrap()) as usize;
    let expect = 20 + n * 4 + 4;
    if bytes.len() < expect {
        return Err(Error::format(path, FormatErrorKind::TruncatedRows, format!("expected {n} ids")));
    }
    let payload = &bytes[20..20 + n * 4];
    let stored = u32::from_le_bytes(bytes[20 + n * 4..24 + n * 4].try_into().unwrap());
    let actual = crc32fast::hash(payload);
    if stored != actual {
        return Err(Error::format(
            path,
            FormatErrorKind::Checksum,
            format!("stored {stored:#010x}, computed {actual:#010x}"),
        ));
    }
    let assignments = payload
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((k, assignments))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn meta_for(books: &[(u32, u32)]) -> Vec<ChunkMeta> {
        // (book, n_chunks) pairs expanded into ordered metadata.
        let mut out = Vec::new();
        for &(book, n) in books {
            for p in 0..n {
                out.push(ChunkMeta {
                    book,
                    position: p,
                    token_start: p as u64 * 35,
                    token_end: p as u64 * 35 + 50,
                    token_count: 50,
                    normalized_position: p as f32 / (n.saturating_sub(1).max(1)) as f32,
                });
            }
        }
        out
    }

    #[test]
    fn four_points_on_unit_circle() {
        // Angles 0, 10, 180, 190 degrees; brute force over all 2-partitions
        // puts {0,10} and {180,190} together.
        let pts: Vec<[f32; 2]> = [0.0f32, 10.0, 180.0, 190.0]
            .iter()
            .map(|deg| {
                let r = deg.to_radians();
                [r.cos(), r.sin()]
            })
            .collect();
        let rows = arr2(&[pts[0], pts[1], pts[2], pts[3]]);
        let model = kmeans_fit(&rows.view(), KMeansConfig::new(2, 1), SourceTag::Raw).unwrap();
        assert_eq!(model.assignments[0], model.assignments[1]);
        assert_eq!(model.assignments[2], model.assignments[3]);
        assert_ne!(model.assignments[0], model.assignments[2]);
        // Centroid directions at 5 and 185 degrees.
        let c0 = model.assignments[0] as usize;
        let want = 5.0f32.to_radians();
        let centroid = model.centroids.row(c0);
        let angle = centroid[1].atan2(centroid[0]);
        assert!((angle - want).abs() < 1e-4, "centroid angle {angle}");
    }

    #[test]
    fn identical_points_k1() {
        let rows = Array2::from_shape_fn((8, 3), |(_, c)| if c == 0 { 1.0 } else { 0.0 });
        let model = kmeans_fit(&rows.view(), KMeansConfig::new(1, 3), SourceTag::Raw).unwrap();
        assert!(model.inertia < 1e-12);
        assert!((model.centroids[[0, 0]] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn k_equals_distinct_points_gives_zero_inertia() {
        let rows = arr2(&[
            [1.0f32, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [0.0, 0.0, 1.0],
            [-1.0, 0.0, 0.0],
        ]);
        let model = kmeans_fit(&rows.view(), KMeansConfig::new(4, 5), SourceTag::Raw).unwrap();
        assert!(model.inertia < 1e-12, "inertia {}", model.inertia);
    }

    #[test]
    fn k_larger_than_rows_is_error() {
        let rows = arr2(&[[1.0f32, 0.0], [0.0, 1.0]]);
        assert!(kmeans_fit(&rows.view(), KMeansConfig::new(3, 0), SourceTag::Raw).is_err());
    }

    #[test]
    fn non_finite_rows_are_rejected() {
        let rows = arr2(&[[f32::NAN, 0.0], [0.0, 1.0]]);
        assert!(kmeans_fit(&rows.view(), KMeansConfig::new(1, 0), SourceTag::Raw).is_err());
    }

    #[test]
    fn assign_nearest_ties_break_low() {
        let centroids = arr2(&[[1.0f32, 0.0], [1.0, 0.0], [0.0, 1.0]]);
        let rows = arr2(&[[1.0f32, 0.0], [0.0, 1.0], [0.70710678f32, 0.70710678]]);
        let got = assign_nearest(&rows.view(), &centroids);
        assert_eq!(got[0], 0); // exact tie between centroids 0 and 1
        assert_eq!(got[1], 2);
        // Equidistant to centroid 0/1 and 2: lowest id wins.
        assert_eq!(got[2], 0);
    }

    #[test]
    fn training_assignments_match_assign_nearest() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let rows = Array2::from_shape_fn((60, 4), |_| rng.gen_range(-1.0f32..1.0));
        let model = kmeans_fit(&rows.view(), KMeansConfig::new(5, 2), SourceTag::Raw).unwrap();
        let again = assign_nearest(&rows.view(), &model.centroids);
        assert_eq!(model.assignments, again);
    }

    #[test]
    fn permuted_rows_cluster_identically_up_to_relabeling() {
        // Well-separated groups: every init converges to the same partition,
        // so a row permutation changes labels at most.
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let n = 48;
        let mut rows = Array2::<f32>::zeros((n, 4));
        for r in 0..n {
            rows[[r, r % 4]] = 1.0;
            for d in 0..4 {
                rows[[r, d]] += rng.gen_range(-0.02f32..0.02);
            }
        }
        let base = kmeans_fit(&rows.view(), KMeansConfig::new(4, 9), SourceTag::Raw).unwrap();

        let perm: Vec<usize> = (0..n).rev().collect();
        let permuted = Array2::from_shape_fn((n, 4), |(r, c)| rows[[perm[r], c]]);
        let other = kmeans_fit(&permuted.view(), KMeansConfig::new(4, 9), SourceTag::Raw).unwrap();

        assert!((base.inertia - other.inertia).abs() < 1e-6 * base.inertia.max(1e-9));

        // Same-partition check through the relabeling map.
        let mut mapping = std::collections::HashMap::new();
        for r in 0..n {
            let a = base.assignments[perm[r]];
            let b = other.assignments[r];
            let e = mapping.entry(a).or_insert(b);
            assert_eq!(*e, b, "partition mismatch at permuted row {r}");
        }
    }

    #[test]
    fn stats_arithmetic() {
        // One cluster with book multiset {A:5, B:3, C:2}.
        let meta = meta_for(&[(0, 5), (1, 3), (2, 2)]);
        let rows = Array2::from_elem((10, 2), 0.70710678f32);
        let model = ClusterModel {
            k: 1,
            centroids: arr2(&[[0.70710678f32, 0.70710678]]),
            assignments: vec![0; 10],
            inertia: 0.0,
            iterations: 1,
            source: SourceTag::Raw,
        };
        let stats = compute_stats(&model, &meta, &rows.view()).unwrap();
        let c = &stats.clusters[0];
        assert_eq!(c.size, 10);
        assert_eq!(c.n_books, 3);
        assert!((c.dominance - 0.5).abs() < 1e-12);
        assert!((c.mean_intra_cosine - 1.0).abs() < 1e-6);
        assert!((c.mean_tokens - 50.0).abs() < 1e-12);
    }

    #[test]
    fn stats_uniform_position_moments() {
        let n = 2001u32;
        let meta = meta_for(&[(0, n)]);
        let rows = Array2::from_elem((n as usize, 2), 0.70710678f32);
        let model = ClusterModel {
            k: 1,
            centroids: arr2(&[[1.0f32, 0.0]]),
            assignments: vec![0; n as usize],
            inertia: 0.0,
            iterations: 1,
            source: SourceTag::Raw,
        };
        let stats = compute_stats(&model, &meta, &rows.view()).unwrap();
        let c = &stats.clusters[0];
        assert!((c.mean_position - 0.5).abs() < 1e-3);
        assert!((c.position_std - 0.2887).abs() < 1e-3);
    }

    #[test]
    fn quality_filter_thresholds() {
        let mut records = Vec::new();
        for (i, books) in [150u64, 200, 250].iter().enumerate() {
            records.push(ClusterRecord {
                cluster: i as u32,
                size: 1000,
                n_books: *books,
                dominance: 0.05,
                mean_intra_cosine: 0.4,
                mean_position: 0.5,
                position_std: 0.28,
                mean_tokens: 50.0,
                passing: true,
            });
        }
        let mut stats = ClusterStats {
            k: 250,
            source: SourceTag::Association,
            clusters: records,
            passing: 0,
            mean_cosine: 0.0,
            mean_books: 0.0,
            mean_dominance: 0.0,
        };
        apply_quality_filter(&mut stats, &default_thresholds()).unwrap();
        // Threshold at k=250 is 200 books: the 150-book cluster fails.
        assert!(!stats.clusters[0].passing);
        assert!(stats.clusters[1].passing);
        assert!(stats.clusters[2].passing);
        assert_eq!(stats.passing, 2);

        // Unknown k without a threshold is a config error.
        stats.k = 333;
        assert!(apply_quality_filter(&mut stats, &default_thresholds()).is_err());

        // Threshold 0 passes everything.
        stats.k = 250;
        let mut all = BTreeMap::new();
        all.insert(250usize, 0u64);
        apply_quality_filter(&mut stats, &all).unwrap();
        assert_eq!(stats.passing, 3);
    }

    #[test]
    fn inertia_non_increasing_on_random_instances() {
        // kmeans_fit errors internally if inertia ever increases; fitting a
        // batch of random instances exercises that assertion.
        let mut rng = ChaCha8Rng::seed_from_u64(1000);
        for trial in 0..100 {
            let n = rng.gen_range(20..120);
            let d = rng.gen_range(2..10);
            let k = rng.gen_range(2..8).min(n);
            let rows = Array2::from_shape_fn((n, d), |_| rng.gen_range(-1.0f32..1.0));
            kmeans_fit(&rows.view(), KMeansConfig::new(k, trial), SourceTag::Raw)
                .unwrap_or_else(|e| panic!("trial {trial}: {e}"));
        }
    }

    #[test]
    fn assignments_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.pama");
        let ids: Vec<u32> = (0..257).map(|i| i % 7).collect();
        write_assignments(&path, 7, &ids).unwrap();
        let (k, back) = read_assignments(&path).unwrap();
        assert_eq!(k, 7);
        assert_eq!(back, ids);

        let mut bytes = fs::read(&path).unwrap();
        bytes[40] ^= 1;
        fs::write(&path, bytes).unwrap();
        assert_eq!(
            read_assignments(&path).unwrap_err().format_kind(),
            Some(FormatErrorKind::Checksum)
        );
    }

    #[test]
    fn minibatch_recovers_well_separated_clusters() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mut rows = Array2::<f32>::zeros((300, 4));
        for r in 0..300 {
            let c = r % 3;
            rows[[r, c]] = 1.0;
            for d in 0..4 {
                rows[[r, d]] += rng.gen_range(-0.05f32..0.05);
            }
        }
        let model =
            minibatch_kmeans_fit(&rows.view(), KMeansConfig::new(3, 4), 64, SourceTag::Raw).unwrap();
        // All three planted groups end up in distinct clusters.
        let a = model.assignments[0];
        let b = model.assignments[1];
        let c = model.assignments[2];
        assert!(a != b && b != c && a != c);
        for r in 0..300 {
            assert_eq!(model.assignments[r], model.assignments[r % 3]);
        }
    }
}
