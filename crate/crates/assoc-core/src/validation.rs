//! Confound controls and baseline transforms: positional/length/dominance
//! flags, the temporal-shuffle control with cross-boundary recall, the
//! context-averaging baseline, and the untrained-model baseline.

use ndarray::{Array2, ArrayView2};
use rand::{seq::SliceRandom, Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::clustering::ClusterStats;
use crate::embedding::{l2_normalize, EmbeddingStore};
use crate::error::{Error, Result};
use crate::model::{AssociationModel, ModelShape};
use crate::pairs::PairSpace;
use crate::util::{derive_seed, percentile};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlThresholds {
    pub position_mean_low: f64,
    pub position_mean_high: f64,
    pub position_std_min: f64,
    pub token_sigma: f64,
    pub dominance_limit: f64,
}

impl Default for ControlThresholds {
    fn default() -> Self {
        ControlThresholds {
            position_mean_low: 0.3,
            position_mean_high: 0.7,
            position_std_min: 0.15,
            token_sigma: 3.0,
            dominance_limit: 0.10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterFlags {
    pub cluster: u32,
    pub position: bool,
    pub token: bool,
    pub dominance: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlReport {
    pub k: usize,
    pub thresholds: ControlThresholds,
    pub corpus_token_mean: f64,
    pub corpus_token_std: f64,
    pub flags: Vec<ClusterFlags>,
    pub position_flagged: usize,
    pub token_flagged: usize,
    pub dominance_flagged: usize,
}

/// Flag clusters whose mean position leaves `[low, high]` or whose position
/// spread collapses below the minimum.
pub fn position_control(stats: &ClusterStats, t: &ControlThresholds) -> Vec<bool> {
    stats
        .clusters
        .iter()
        .map(|c| {
            c.mean_position < t.position_mean_low
                || c.mean_position > t.position_mean_high
                || c.position_std < t.position_std_min
        })
        .collect()
}

/// Flag clusters whose mean token count sits more than `token_sigma` corpus
/// standard deviations from the corpus mean. A constant-length corpus
/// (sigma = 0) flags nothing.
pub fn token_control(
    stats: &ClusterStats,
    corpus_token_mean: f64,
    corpus_token_std: f64,
    t: &ControlThresholds,
) -> Vec<bool> {
    stats
        .clusters
        .iter()
        .map(|c| {
            corpus_token_std > 0.0
                && (c.mean_tokens - corpus_token_mean).abs() > t.token_sigma * corpus_token_std
        })
        .collect()
}

/// Flag clusters where a single book contributes strictly more than the
/// dominance limit.
pub fn dominance_control(stats: &ClusterStats, t: &ControlThresholds) -> Vec<bool> {
    stats
        .clusters
        .iter()
        .map(|c| c.dominance > t.dominance_limit)
        .collect()
}

/// Run all three controls and assemble the per-cluster report.
pub fn control_report(
    stats: &ClusterStats,
    corpus_token_mean: f64,
    corpus_token_std: f64,
    t: &ControlThresholds,
) -> ControlReport {
    let position = position_control(stats, t);
    let token = token_control(stats, corpus_token_mean, corpus_token_std, t);
    let dominance = dominance_control(stats, t);
    let flags: Vec<ClusterFlags> = stats
        .clusters
        .iter()
        .enumerate()
        .map(|(i, c)| ClusterFlags {
            cluster: c.cluster,
            position: position[i],
            token: token[i],
            dominance: dominance[i],
        })
        .collect();
    ControlReport {
        k: stats.k,
        thresholds: *t,
        corpus_token_mean,
        corpus_token_std,
        position_flagged: flags.iter().filter(|f| f.position).count(),
        token_flagged: flags.iter().filter(|f| f.token).count(),
        dominance_flagged: flags.iter().filter(|f| f.dominance).count(),
        flags,
    }
}

/// Per-book seeded permutation of chunk positions: `order[p]` is the
/// embedding row that sits at global position index `p` in the shuffled
/// view. Embeddings are untouched; only temporal order changes.
pub fn shuffled_row_order(chunk_counts: &[u64], seed: u64) -> Vec<u32> {
    let total: u64 = chunk_counts.iter().sum();
    let mut order = Vec::with_capacity(total as usize);
    let mut offset = 0u32;
    for (book, &n) in chunk_counts.iter().enumerate() {
        let mut rows: Vec<u32> = (offset..offset + n as u32).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x5348 + book as u64));
        rows.shuffle(&mut rng);
        order.extend(rows);
        offset += n as u32;
    }
    order
}

/// Cross-boundary recall configuration. Defaults match the pipeline config.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecallConfig {
    /// Percentile of raw pair cosine below which a pair counts as
    /// cross-boundary.
    pub sim_percentile: f64,
    pub top_k: usize,
    /// Co-occurring pairs sampled to build the subset.
    pub sample_size: usize,
    /// Fixed candidate pool size shared by all queries.
    pub pool_size: usize,
    pub seed: u64,
}

impl Default for RecallConfig {
    fn default() -> Self {
        RecallConfig {
            sim_percentile: 10.0,
            top_k: 10,
            sample_size: 2000,
            pool_size: 2048,
            seed: 42,
        }
    }
}

/// Recall of co-occurring but raw-dissimilar associates among a query's
/// nearest neighbors in transformed space.
///
/// A seeded sample of co-occurring pairs is thinned to those whose raw
/// cosine falls at or below the `sim_percentile` percentile of the sample.
/// For each surviving pair, the associate competes against a fixed seeded
/// pool of corpus rows; the pair scores when the associate's transformed
/// embedding ranks in the query's `top_k` by cosine.
pub fn cross_boundary_recall(
    model: &AssociationModel<f32>,
    space: &PairSpace,
    rows: &ArrayView2<'_, f32>,
    config: &RecallConfig,
) -> Result<f64> {
    let total = space.total_pairs();
    if total == 0 {
        return Err(Error::Data("no pairs to sample".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    // Sample pairs and their raw cosine.
    let mut sampled: Vec<(u64, u64, f64)> = Vec::with_capacity(config.sample_size);
    for _ in 0..config.sample_size {
        let g = rng.gen_range(0..total);
        let (i, j) = space.pair_at(g)?;
        let cos: f64 = rows
            .row(i as usize)
            .iter()
            .zip(rows.row(j as usize).iter())
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum();
        sampled.push((i, j, cos));
    }
    let cosines: Vec<f64> = sampled.iter().map(|&(_, _, c)| c).collect();
    let threshold = percentile(&cosines, config.sim_percentile);
    let cross: Vec<(u64, u64)> = sampled
        .iter()
        .filter(|&&(_, _, c)| c <= threshold)
        .map(|&(i, j, _)| (i, j))
        .collect();
    if cross.is_empty() {
        return Err(Error::Data(format!(
            "cross-boundary subset is empty at percentile {}; lower the percentile",
            config.sim_percentile
        )));
    }

    // Fixed candidate pool, shared across queries.
    let n = rows.nrows();
    let pool: Vec<usize> = (0..config.pool_size.min(n))
        .map(|_| rng.gen_range(0..n))
        .collect();
    let mut pool_rows = Array2::<f32>::zeros((pool.len(), rows.ncols()));
    for (r, &idx) in pool.iter().enumerate() {
        pool_rows.row_mut(r).assign(&rows.row(idx));
    }
    let pool_f = model.transform(&pool_rows.view(), 8192)?;

    // Transform queries and associates.
    let mut query_rows = Array2::<f32>::zeros((cross.len(), rows.ncols()));
    let mut assoc_rows = Array2::<f32>::zeros((cross.len(), rows.ncols()));
    for (r, &(i, j)) in cross.iter().enumerate() {
        query_rows.row_mut(r).assign(&rows.row(i as usize));
        assoc_rows.row_mut(r).assign(&rows.row(j as usize));
    }
    let query_f = model.transform(&query_rows.view(), 8192)?;
    let assoc_f = model.transform(&assoc_rows.view(), 8192)?;

    // Rank the associate against the pool per query.
    let sims = query_f.dot(&pool_f.t()); // n_cross x pool
    let mut hits = 0usize;
    for r in 0..cross.len() {
        let target: f32 = query_f
            .row(r)
            .iter()
            .zip(assoc_f.row(r).iter())
            .map(|(&a, &b)| a * b)
            .sum();
        let better = sims.row(r).iter().filter(|&&s| s > target).count();
        if better < config.top_k {
            hits += 1;
        }
    }
    Ok(hits as f64 / cross.len() as f64)
}

/// Context-enriched baseline: each row becomes the normalized mean of the
/// raw rows within `window` positions in the same book.
pub fn context_enriched(store: &EmbeddingStore, window: usize) -> Result<EmbeddingStore> {
    let meta = store.meta();
    let dim = store.dim();
    let n = store.count();

    // Book extents in row space; metadata is ordered by (book, position).
    let mut book_start = vec![0usize; n];
    let mut book_end = vec![0usize; n];
    let mut start = 0usize;
    while start < n {
        let book = meta[start].book;
        let mut end = start;
        while end < n && meta[end].book == book {
            end += 1;
        }
        for i in start..end {
            book_start[i] = start;
            book_end[i] = end;
        }
        start = end;
    }

    let mut rows = Vec::with_capacity(n * dim);
    for i in 0..n {
        let lo = book_start[i].max(i.saturating_sub(window));
        let hi = book_end[i].min(i + window + 1);
        let mut mean = vec![0.0f64; dim];
        for r in lo..hi {
            for (d, &v) in store.row(r).iter().enumerate() {
                mean[d] += v as f64;
            }
        }
        let count = (hi - lo) as f64;
        let mut v: Vec<f32> = mean.into_iter().map(|s| (s / count) as f32).collect();
        l2_normalize(&mut v).map_err(|_| {
            Error::Numeric(format!("context window around row {i} averages to zero"))
        })?;
        rows.extend_from_slice(&v);
    }
    store.with_rows(rows)
}

/// Untrained model with the standard initialization; clustering its outputs
/// tests what the architecture alone imposes.
pub fn random_model(dim: usize, n_blocks: usize, hidden_multiplier: usize, seed: u64) -> AssociationModel<f32> {
    AssociationModel::init(
        ModelShape {
            dim,
            n_blocks,
            hidden_multiplier,
        },
        seed,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clustering::{ClusterRecord, SourceTag};
    use crate::corpus::ChunkMeta;

    fn stats_with(clusters: Vec<ClusterRecord>) -> ClusterStats {
        ClusterStats {
            k: clusters.len(),
            source: SourceTag::Association,
            clusters,
            passing: 0,
            mean_cosine: 0.0,
            mean_books: 0.0,
            mean_dominance: 0.0,
        }
    }

    fn record(mean_position: f64, position_std: f64, mean_tokens: f64, dominance: f64) -> ClusterRecord {
        ClusterRecord {
            cluster: 0,
            size: 100,
            n_books: 50,
            dominance,
            mean_intra_cosine: 0.5,
            mean_position,
            position_std,
            mean_tokens,
            passing: true,
        }
    }

    #[test]
    fn position_control_rules() {
        let stats = stats_with(vec![
            record(0.50, 0.29, 50.0, 0.05), // clean
            record(0.25, 0.30, 50.0, 0.05), // mean out of range
            record(0.50, 0.10, 50.0, 0.05), // std collapsed
        ]);
        let flags = position_control(&stats, &ControlThresholds::default());
        assert_eq!(flags, vec![false, true, true]);
    }

    #[test]
    fn token_control_rules() {
        let stats = stats_with(vec![
            record(0.5, 0.3, 57.0, 0.05),  // 3.5 sigma
            record(0.5, 0.3, 55.9, 0.05),  // 2.95 sigma
        ]);
        let t = ControlThresholds::default();
        let flags = token_control(&stats, 50.0, 2.0, &t);
        assert_eq!(flags, vec![true, false]);
        // Constant-length corpus: sigma = 0 flags nothing.
        let none = token_control(&stats, 50.0, 0.0, &t);
        assert_eq!(none, vec![false, false]);
    }

    #[test]
    fn dominance_control_rules() {
        let stats = stats_with(vec![
            record(0.5, 0.3, 50.0, 0.15),
            record(0.5, 0.3, 50.0, 0.10), // boundary: strict greater-than
            record(0.5, 0.3, 50.0, 0.09),
        ]);
        let flags = dominance_control(&stats, &ControlThresholds::default());
        assert_eq!(flags, vec![true, false, false]);
    }

    #[test]
    fn controls_are_idempotent() {
        let stats = stats_with(vec![record(0.4, 0.2, 50.0, 0.2)]);
        let t = ControlThresholds::default();
        let a = control_report(&stats, 50.0, 1.0, &t);
        let b = control_report(&stats, 50.0, 1.0, &t);
        assert_eq!(a, b);
    }

    #[test]
    fn shuffle_is_per_book_bijection() {
        let counts = vec![5u64, 1, 8];
        let order = shuffled_row_order(&counts, 11);
        assert_eq!(order.len(), 14);
        // Book ranges hold exactly their own rows.
        let mut sorted0: Vec<u32> = order[0..5].to_vec();
        sorted0.sort_unstable();
        assert_eq!(sorted0, vec![0, 1, 2, 3, 4]);
        assert_eq!(order[5], 5); // single-chunk book unchanged
        let mut sorted2: Vec<u32> = order[6..14].to_vec();
        sorted2.sort_unstable();
        assert_eq!(sorted2, (6..14).collect::<Vec<u32>>());
        // Deterministic per seed.
        assert_eq!(order, shuffled_row_order(&counts, 11));
        assert_ne!(order, shuffled_row_order(&counts, 12));
    }

    #[test]
    fn shuffle_preserves_pair_total() {
        let counts = vec![40u64, 25, 33];
        let space = PairSpace::new(&counts, 15).unwrap();
        // Pair counts depend only on chunk counts, which a within-book
        // permutation cannot change.
        let space_after = PairSpace::new(&counts, 15).unwrap();
        assert_eq!(space.total_pairs(), space_after.total_pairs());
    }

    fn tiny_store(seed: u64, books: &[(u32, u32)], dim: usize) -> EmbeddingStore {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows = Vec::new();
        let mut meta = Vec::new();
        for &(book, count) in books {
            for p in 0..count {
                let mut v: Vec<f32> = (0..dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
                l2_normalize(&mut v).unwrap();
                rows.extend_from_slice(&v);
                meta.push(ChunkMeta {
                    book,
                    position: p,
                    token_start: p as u64 * 35,
                    token_end: p as u64 * 35 + 50,
                    token_count: 50,
                    normalized_position: p as f32 / (count.saturating_sub(1).max(1)) as f32,
                });
            }
        }
        EmbeddingStore::new(dim, rows, meta).unwrap()
    }

    #[test]
    fn context_enriched_single_chunk_book_unchanged() {
        let store = tiny_store(1, &[(0, 1), (1, 4)], 6);
        let enriched = context_enriched(&store, 15).unwrap();
        for (a, b) in store.row(0).iter().zip(enriched.row(0).iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn context_enriched_three_chunk_book_full_window() {
        // Window 15 covers the whole 3-chunk book: every row becomes the
        // normalized mean of all three.
        let store = tiny_store(2, &[(0, 3)], 6);
        let enriched = context_enriched(&store, 15).unwrap();
        let mut mean = vec![0.0f64; 6];
        for r in 0..3 {
            for (d, &v) in store.row(r).iter().enumerate() {
                mean[d] += v as f64 / 3.0;
            }
        }
        let mut expect: Vec<f32> = mean.iter().map(|&v| v as f32).collect();
        l2_normalize(&mut expect).unwrap();
        for r in 0..3 {
            for (a, b) in enriched.row(r).iter().zip(expect.iter()) {
                assert!((a - b).abs() < 1e-6, "row {r}");
            }
        }
    }

    #[test]
    fn context_enriched_constant_book_is_identity() {
        // All chunks share one embedding: the mean is that embedding.
        let dim = 4;
        let mut v = vec![0.3f32, -0.4, 0.5, 0.1];
        l2_normalize(&mut v).unwrap();
        let mut rows = Vec::new();
        let mut meta = Vec::new();
        for p in 0..5u32 {
            rows.extend_from_slice(&v);
            meta.push(ChunkMeta {
                book: 0,
                position: p,
                token_start: 0,
                token_end: 50,
                token_count: 50,
                normalized_position: p as f32 / 4.0,
            });
        }
        let store = EmbeddingStore::new(dim, rows, meta).unwrap();
        let enriched = context_enriched(&store, 2).unwrap();
        for r in 0..5 {
            for (a, b) in enriched.row(r).iter().zip(v.iter()) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn context_window_respects_book_boundaries() {
        let store = tiny_store(3, &[(0, 3), (1, 3)], 8);
        let enriched = context_enriched(&store, 15).unwrap();
        // Row 0's window is rows 0..3 only (book 0); verify against a
        // hand-computed mean of book 0 rows.
        let mut mean = vec![0.0f64; 8];
        for r in 0..3 {
            for (d, &v) in store.row(r).iter().enumerate() {
                mean[d] += v as f64 / 3.0;
            }
        }
        let mut expect: Vec<f32> = mean.iter().map(|&v| v as f32).collect();
        l2_normalize(&mut expect).unwrap();
        for (a, b) in enriched.row(0).iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn random_model_is_seed_deterministic_with_unit_outputs() {
        let a = random_model(8, 4, 1, 33);
        let b = random_model(8, 4, 1, 33);
        assert_eq!(a.flatten(), b.flatten());
        let store = tiny_store(4, &[(0, 6)], 8);
        let out = a.transform(&store.view(), 16).unwrap();
        for row in out.axis_iter(ndarray::Axis(0)) {
            let norm: f32 = row.iter().map(|v| v * v).sum::<f32>().sqrt();
            assert!((norm - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn recall_degenerate_pool_is_certain() {
        // pool_size 0 leaves only the associate in the candidate set, so
        // every cross-boundary pair scores.
        let store = tiny_store(5, &[(0, 40), (1, 40)], 8);
        let space = PairSpace::new(&[40, 40], 5).unwrap();
        let model = random_model(8, 4, 1, 1);
        let cfg = RecallConfig {
            pool_size: 0,
            sample_size: 200,
            ..RecallConfig::default()
        };
        let recall = cross_boundary_recall(&model, &space, &store.view(), &cfg).unwrap();
        assert_eq!(recall, 1.0);
    }

    #[test]
    fn recall_identity_transform_near_chance() {
        // Identity transform: the associate is raw-dissimilar by
        // construction of the subset, so it ranks roughly uniformly among
        // the pool.
        let store = tiny_store(6, &[(0, 150), (1, 150)], 16);
        let space = PairSpace::new(&[150, 150], 10).unwrap();
        let mut model = random_model(16, 4, 1, 2);
        model.alpha_raw = f32::INFINITY; // alpha = 1: f(x) = x
        let cfg = RecallConfig {
            pool_size: 100,
            top_k: 10,
            sample_size: 1000,
            ..RecallConfig::default()
        };
        let recall = cross_boundary_recall(&model, &space, &store.view(), &cfg).unwrap();
        // Expect about top_k / pool ~= 0.10 for the dissimilar tail; allow a
        // generous band since the tail is not exactly uniform.
        assert!(recall < 0.35, "identity recall {recall}");
    }
}
