//! Planted-structure synthetic corpora and pipeline scoring.
//!
//! Each book carries one latent topic; its chunk sequence follows a shared
//! function Markov chain. Raw similarity is dominated by topic while
//! temporal co-occurrence is dominated by function, so a pipeline that
//! clusters by co-occurrence-trained geometry should recover the function
//! partition that raw clustering cannot see. Labels are held out of the
//! pipeline and used only for scoring.

use ndarray::{Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::clustering::{kmeans_fit, KMeansConfig, SourceTag};
use crate::corpus::ChunkMeta;
use crate::embedding::{l2_normalize, EmbeddingProvider, EmbeddingStore};
use crate::error::{Error, Result};
use crate::model::{train, RowGather, TrainConfig, TrainOutcome};
use crate::pairs::PairSpace;
use crate::util::derive_seed;
use crate::validation::{cross_boundary_recall, shuffled_row_order, RecallConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedConfig {
    pub n_books: usize,
    pub chunks_per_book: usize,
    pub n_functions: usize,
    pub n_topics: usize,
    pub dim: usize,
    /// Row-stochastic function transition matrix, shared across books.
    /// When absent, a sticky near-cyclic default is built.
    #[serde(default)]
    pub transition: Option<Vec<Vec<f64>>>,
    pub topic_weight: f64,
    pub function_weight: f64,
    pub noise_scale: f64,
    pub seed: u64,
    /// Co-occurrence window used by the benchmark pair space.
    #[serde(default = "default_window")]
    pub window: u64,
}

fn default_window() -> u64 {
    crate::pairs::DEFAULT_WINDOW
}

impl Default for PlantedConfig {
    fn default() -> Self {
        PlantedConfig {
            n_books: 200,
            chunks_per_book: 300,
            n_functions: 8,
            n_topics: 40,
            dim: 64,
            transition: None,
            topic_weight: 1.0,
            function_weight: 0.35,
            noise_scale: 0.15,
            seed: 42,
            window: 15,
        }
    }
}

impl PlantedConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_functions < 2 || self.n_topics < 2 {
            return Err(Error::Config(
                "planted corpus needs at least 2 functions and 2 topics".into(),
            ));
        }
        if self.dim < self.n_functions + self.n_topics {
            return Err(Error::Config(format!(
                "dim {} too small for {} orthonormal directions",
                self.dim,
                self.n_functions + self.n_topics
            )));
        }
        if self.topic_weight <= 0.0 || self.function_weight <= 0.0 || self.noise_scale <= 0.0 {
            return Err(Error::Config("planted weights must be positive".into()));
        }
        if self.n_books < 1 || self.chunks_per_book < 2 {
            return Err(Error::Config("planted corpus too small".into()));
        }
        if let Some(t) = &self.transition {
            if t.len() != self.n_functions {
                return Err(Error::Config("transition matrix rank != n_functions".into()));
            }
            for row in t {
                if row.len() != self.n_functions {
                    return Err(Error::Config("transition matrix is not square".into()));
                }
                let sum: f64 = row.iter().sum();
                if (sum - 1.0).abs() > 1e-9 || row.iter().any(|&p| p < 0.0) {
                    return Err(Error::Config("transition rows must be stochastic".into()));
                }
            }
        }
        Ok(())
    }

    /// Sticky near-cyclic default: mostly stay, drift to the next function,
    /// small uniform leak to the rest.
    pub fn default_transition(n_functions: usize) -> Vec<Vec<f64>> {
        let stay = 0.88;
        let next = 0.08;
        let rest = (1.0 - stay - next) / (n_functions as f64 - 2.0).max(1.0);
        (0..n_functions)
            .map(|f| {
                (0..n_functions)
                    .map(|g| {
                        if g == f {
                            stay
                        } else if g == (f + 1) % n_functions {
                            next
                        } else {
                            rest
                        }
                    })
                    .collect()
            })
            .collect()
    }
}

/// Generator sanity statistics, checked on every generated corpus.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GeneratorDiagnostics {
    pub same_topic_cosine: f64,
    pub diff_topic_cosine: f64,
    pub window_same_function_rate: f64,
    pub stationary_same_function_rate: f64,
}

#[derive(Debug, Clone)]
pub struct PlantedCorpus {
    pub store: EmbeddingStore,
    /// Per-chunk latent function id; scoring only.
    pub function_labels: Vec<u32>,
    /// Per-book latent topic id; scoring only.
    pub topic_labels: Vec<u32>,
    pub diagnostics: GeneratorDiagnostics,
}

impl PlantedCorpus {
    pub fn chunk_counts(&self) -> Vec<u64> {
        let mut counts: Vec<u64> = Vec::new();
        for m in self.store.meta() {
            if m.book as usize >= counts.len() {
                counts.push(0);
            }
            counts[m.book as usize] += 1;
        }
        counts
    }

    /// Per-chunk topic id (each book has one topic).
    pub fn chunk_topic_labels(&self) -> Vec<u32> {
        self.store
            .meta()
            .iter()
            .map(|m| self.topic_labels[m.book as usize])
            .collect()
    }
}

/// Orthonormal direction set: QR of a seeded Gaussian matrix via modified
/// Gram-Schmidt with one re-orthogonalization pass.
fn orthonormal_directions(dim: usize, count: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dirs = Array2::<f64>::zeros((count, dim));
    for mut row in dirs.axis_iter_mut(Axis(0)) {
        for v in row.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
    }
    for i in 0..count {
        for _pass in 0..2 {
            for j in 0..i {
                let dot: f64 = dirs.row(i).dot(&dirs.row(j));
                let prev = dirs.row(j).to_owned();
                let mut row = dirs.row_mut(i);
                row.zip_mut_with(&prev, |a, &b| *a -= dot * b);
            }
        }
        let norm: f64 = dirs.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
        dirs.row_mut(i).mapv_inplace(|v| v / norm);
    }
    dirs
}

fn sample_categorical(rng: &mut ChaCha8Rng, probs: &[f64]) -> usize {
    let draw: f64 = rng.gen_range(0.0..1.0);
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if draw < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Generate a planted corpus. Deterministic given the config (including its
/// seed); the sanity invariants are recomputed and enforced on every call.
pub fn generate(config: &PlantedConfig) -> Result<PlantedCorpus> {
    config.validate()?;
    let transition = config
        .transition
        .clone()
        .unwrap_or_else(|| PlantedConfig::default_transition(config.n_functions));

    let n_dirs = config.n_topics + config.n_functions;
    let dirs = orthonormal_directions(config.dim, n_dirs, derive_seed(config.seed, 1));
    let topic_dirs = dirs.slice(ndarray::s![0..config.n_topics, ..]);
    let function_dirs = dirs.slice(ndarray::s![config.n_topics..n_dirs, ..]);

    let n = config.n_books * config.chunks_per_book;
    let mut rows = Vec::with_capacity(n * config.dim);
    let mut meta = Vec::with_capacity(n);
    let mut function_labels = Vec::with_capacity(n);
    let mut topic_labels = Vec::with_capacity(config.n_books);

    for book in 0..config.n_books {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 1000 + book as u64));
        let topic = rng.gen_range(0..config.n_topics);
        topic_labels.push(topic as u32);

        let mut function = rng.gen_range(0..config.n_functions);
        let denom = (config.chunks_per_book - 1).max(1) as f32;
        for pos in 0..config.chunks_per_book {
            if pos > 0 {
                function = sample_categorical(&mut rng, &transition[function]);
            }
            function_labels.push(function as u32);

            let mut v = vec![0.0f32; config.dim];
            for (d, val) in v.iter_mut().enumerate() {
                let noise: f64 = rng.sample(StandardNormal);
                let raw = config.topic_weight * topic_dirs[[topic, d]]
                    + config.function_weight * function_dirs[[function, d]]
                    + config.noise_scale * noise;
                *val = raw as f32;
            }
            l2_normalize(&mut v)?;
            rows.extend_from_slice(&v);

            meta.push(ChunkMeta {
                book: book as u32,
                position: pos as u32,
                token_start: pos as u64 * 35,
                token_end: pos as u64 * 35 + 50,
                token_count: 50,
                normalized_position: pos as f32 / denom,
            });
        }
    }

    let store = EmbeddingStore::new(config.dim, rows, meta)?;
    let diagnostics = compute_diagnostics(config, &store, &function_labels, &topic_labels)?;
    Ok(PlantedCorpus {
        store,
        function_labels,
        topic_labels,
        diagnostics,
    })
}

fn compute_diagnostics(
    config: &PlantedConfig,
    store: &EmbeddingStore,
    function_labels: &[u32],
    topic_labels: &[u32],
) -> Result<GeneratorDiagnostics> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 2));
    let n = store.count();
    let meta = store.meta();

    let mut same_sum = 0.0f64;
    let mut same_n = 0u64;
    let mut diff_sum = 0.0f64;
    let mut diff_n = 0u64;
    let samples = 4000usize.min(n * (n - 1) / 2);
    for _ in 0..samples {
        let a = rng.gen_range(0..n);
        let b = rng.gen_range(0..n);
        if a == b {
            continue;
        }
        let cos: f64 = store
            .row(a)
            .iter()
            .zip(store.row(b).iter())
            .map(|(&x, &y)| x as f64 * y as f64)
            .sum();
        let ta = topic_labels[meta[a].book as usize];
        let tb = topic_labels[meta[b].book as usize];
        if ta == tb {
            same_sum += cos;
            same_n += 1;
        } else {
            diff_sum += cos;
            diff_n += 1;
        }
    }
    if same_n == 0 || diff_n == 0 {
        return Err(Error::Data("diagnostic sample missed a topic class".into()));
    }
    let same_topic_cosine = same_sum / same_n as f64;
    let diff_topic_cosine = diff_sum / diff_n as f64;

    // Within-window same-function rate vs the stationary rate.
    let counts = {
        let mut c = vec![0u64; config.n_functions];
        for &f in function_labels {
            c[f as usize] += 1;
        }
        c
    };
    let total = function_labels.len() as f64;
    let stationary: f64 = counts.iter().map(|&c| (c as f64 / total).powi(2)).sum();

    let space = PairSpace::new(
        &vec![config.chunks_per_book as u64; config.n_books],
        config.window,
    )?;
    let mut window_same = 0u64;
    let mut window_total = 0u64;
    for _ in 0..samples {
        let g = rng.gen_range(0..space.total_pairs());
        let (i, j) = space.pair_at(g)?;
        window_total += 1;
        if function_labels[i as usize] == function_labels[j as usize] {
            window_same += 1;
        }
    }
    let window_rate = window_same as f64 / window_total as f64;

    if same_topic_cosine <= diff_topic_cosine {
        return Err(Error::Data(format!(
            "generator sanity: same-topic cosine {same_topic_cosine:.4} \
             not above different-topic {diff_topic_cosine:.4}"
        )));
    }
    if window_rate <= stationary {
        return Err(Error::Data(format!(
            "generator sanity: window same-function rate {window_rate:.4} \
             not above stationary {stationary:.4}"
        )));
    }

    Ok(GeneratorDiagnostics {
        same_topic_cosine,
        diff_topic_cosine,
        window_same_function_rate: window_rate,
        stationary_same_function_rate: stationary,
    })
}

/// Text-hash provider: deterministic pseudo-embeddings for plumbing tests
/// and synthetic end-to-end runs over real text files.
pub struct SyntheticTextProvider {
    dim: usize,
}

impl SyntheticTextProvider {
    pub fn new(dim: usize) -> Self {
        SyntheticTextProvider { dim }
    }
}

impl EmbeddingProvider for SyntheticTextProvider {
    fn dim(&self) -> usize {
        self.dim
    }

    fn kind(&self) -> &'static str {
        "synthetic"
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f32>>> {
        texts
            .iter()
            .map(|t| {
                use sha2::{Digest, Sha256};
                let digest = Sha256::digest(t.as_bytes());
                let seed = u64::from_le_bytes(digest[0..8].try_into().unwrap());
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut v: Vec<f32> = (0..self.dim)
                    .map(|_| rng.sample::<f64, _>(StandardNormal) as f32)
                    .collect();
                l2_normalize(&mut v)?;
                Ok(v)
            })
            .collect()
    }
}

/// Normalized mutual information with arithmetic-mean normalization.
/// A partition with zero entropy scores 0 against anything.
pub fn nmi(a: &[u32], b: &[u32]) -> Result<f64> {
    if a.is_empty() || a.len() != b.len() {
        return Err(Error::Data("nmi needs two equal-length non-empty labelings".into()));
    }
    let n = a.len() as f64;
    let mut joint: std::collections::HashMap<(u32, u32), u64> = std::collections::HashMap::new();
    let mut ca: std::collections::HashMap<u32, u64> = std::collections::HashMap::new();
    let mut cb: std::collections::HashMap<u32, u64> = std::collections::HashMap::new();
    for (&x, &y) in a.iter().zip(b.iter()) {
        *joint.entry((x, y)).or_insert(0) += 1;
        *ca.entry(x).or_insert(0) += 1;
        *cb.entry(y).or_insert(0) += 1;
    }
    let h = |counts: &std::collections::HashMap<u32, u64>| -> f64 {
        counts
            .values()
            .map(|&c| {
                let p = c as f64 / n;
                -p * p.ln()
            })
            .sum()
    };
    let ha = h(&ca);
    let hb = h(&cb);
    if ha == 0.0 || hb == 0.0 {
        return Ok(0.0);
    }
    let mut mi = 0.0f64;
    for (&(x, y), &c) in &joint {
        let pxy = c as f64 / n;
        let px = ca[&x] as f64 / n;
        let py = cb[&y] as f64 / n;
        mi += pxy * (pxy / (px * py)).ln();
    }
    Ok((mi / ((ha + hb) / 2.0)).clamp(0.0, 1.0))
}

/// Adjusted Rand index.
pub fn ari(a: &[u32], b: &[u32]) -> Result<f64> {
    if a.is_empty() || a.len() != b.len() {
        return Err(Error::Data("ari needs two equal-length non-empty labelings".into()));
    }
    let mut joint: std::collections::HashMap<(u32, u32), u64> = std::collections::HashMap::new();
    let mut ca: std::collections::HashMap<u32, u64> = std::collections::HashMap::new();
    let mut cb: std::collections::HashMap<u32, u64> = std::collections::HashMap::new();
    for (&x, &y) in a.iter().zip(b.iter()) {
        *joint.entry((x, y)).or_insert(0) += 1;
        *ca.entry(x).or_insert(0) += 1;
        *cb.entry(y).or_insert(0) += 1;
    }
    let choose2 = |c: u64| -> f64 { (c as f64) * (c as f64 - 1.0) / 2.0 };
    let sum_joint: f64 = joint.values().map(|&c| choose2(c)).sum();
    let sum_a: f64 = ca.values().map(|&c| choose2(c)).sum();
    let sum_b: f64 = cb.values().map(|&c| choose2(c)).sum();
    let total = choose2(a.len() as u64);
    let expected = sum_a * sum_b / total;
    let max = (sum_a + sum_b) / 2.0;
    if (max - expected).abs() < 1e-12 {
        return Ok(0.0);
    }
    Ok((sum_joint - expected) / (max - expected))
}

/// Desk-scale training defaults for the benchmark: the planted corpus
/// converges in a few epochs, so the full-scale epoch counts are replaced
/// with short phases and a faster peak rate.
pub fn bench_train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        batch_size: 512,
        temperature: 0.05,
        epochs_phase1: 6,
        epochs_phase2: 3,
        learning_rate: 1e-3,
        lr_floor: 1e-5,
        weight_decay: 0.01,
        seed,
        checkpoint_interval: 0,
        n_blocks: 4,
        hidden_multiplier: 1,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineScore {
    pub nmi_vs_functions: f64,
    pub ari_vs_functions: f64,
    pub final_accuracy: Option<f64>,
    pub final_loss: Option<f64>,
    pub alpha: Option<f32>,
}

/// Benchmark report: raw clustering, association-trained clustering, and
/// shuffled-order training, all scored against the planted function labels,
/// plus cross-boundary recall for the trained and shuffled models.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub config: PlantedConfig,
    pub train_config: TrainConfig,
    pub diagnostics: GeneratorDiagnostics,
    pub raw: PipelineScore,
    pub association: PipelineScore,
    pub shuffled: PipelineScore,
    pub nmi_margin: f64,
    pub recall_trained: f64,
    pub recall_shuffled: f64,
    pub recall_relative_drop: f64,
}

fn score_clustering(
    rows: &ArrayView2<'_, f32>,
    k: usize,
    seed: u64,
    source: SourceTag,
    labels: &[u32],
) -> Result<(f64, f64)> {
    let model = kmeans_fit(rows, KMeansConfig::new(k, seed), source)?;
    Ok((nmi(&model.assignments, labels)?, ari(&model.assignments, labels)?))
}

/// Run the full planted benchmark: generate, score raw clustering, train on
/// true order, train on shuffled order, cluster everything at `k =
/// n_functions`, and compare cross-boundary recall across the two models.
pub fn run_benchmark(
    config: &PlantedConfig,
    train_config: &TrainConfig,
    recall: &RecallConfig,
) -> Result<BenchmarkReport> {
    let corpus = generate(config)?;
    let rows = corpus.store.view();
    let k = config.n_functions;
    let cluster_seed = derive_seed(config.seed, 3);

    // Pipeline A: raw-embedding clustering.
    let (nmi_raw, ari_raw) =
        score_clustering(&rows, k, cluster_seed, SourceTag::Raw, &corpus.function_labels)?;

    let space = PairSpace::new(&corpus.chunk_counts(), config.window)?;

    // Pipeline B: train on the true temporal order.
    let TrainOutcome { model, metrics } = train(&space, &rows, &RowGather::Identity, train_config)?;
    let assoc_rows = model.transform(&rows, 8192)?;
    let (nmi_assoc, ari_assoc) = score_clustering(
        &assoc_rows.view(),
        k,
        cluster_seed,
        SourceTag::Association,
        &corpus.function_labels,
    )?;

    // Pipeline C: identical config, shuffled chunk order within each book.
    let order = shuffled_row_order(&corpus.chunk_counts(), derive_seed(config.seed, 4));
    let shuffled_out = train(&space, &rows, &RowGather::Mapped(&order), train_config)?;
    let shuf_rows = shuffled_out.model.transform(&rows, 8192)?;
    let (nmi_shuf, ari_shuf) = score_clustering(
        &shuf_rows.view(),
        k,
        cluster_seed,
        SourceTag::Association,
        &corpus.function_labels,
    )?;

    // Recall for both models over the true pair space.
    let recall_trained = cross_boundary_recall(&model, &space, &rows, recall)?;
    let recall_shuffled = cross_boundary_recall(&shuffled_out.model, &space, &rows, recall)?;
    let drop = if recall_trained > 0.0 {
        (recall_trained - recall_shuffled) / recall_trained
    } else {
        0.0
    };

    let last = metrics.last();
    let last_shuf = shuffled_out.metrics.last();
    Ok(BenchmarkReport {
        config: config.clone(),
        train_config: train_config.clone(),
        diagnostics: corpus.diagnostics.clone(),
        raw: PipelineScore {
            nmi_vs_functions: nmi_raw,
            ari_vs_functions: ari_raw,
            final_accuracy: None,
            final_loss: None,
            alpha: None,
        },
        association: PipelineScore {
            nmi_vs_functions: nmi_assoc,
            ari_vs_functions: ari_assoc,
            final_accuracy: last.map(|m| m.mean_accuracy),
            final_loss: last.map(|m| m.mean_loss),
            alpha: last.map(|m| m.alpha),
        },
        shuffled: PipelineScore {
            nmi_vs_functions: nmi_shuf,
            ari_vs_functions: ari_shuf,
            final_accuracy: last_shuf.map(|m| m.mean_accuracy),
            final_loss: last_shuf.map(|m| m.mean_loss),
            alpha: last_shuf.map(|m| m.alpha),
        },
        nmi_margin: nmi_assoc - nmi_raw,
        recall_trained,
        recall_shuffled,
        recall_relative_drop: drop,
    })
}

/// Expected distinct books per cluster under uniform random assignment of
/// rows to `k` clusters, estimated by seeded Monte Carlo.
pub fn uniform_assignment_expected_books(meta: &[ChunkMeta], k: usize, seed: u64, trials: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0f64;
    for _ in 0..trials {
        let mut books_per_cluster: Vec<std::collections::HashSet<u32>> =
            vec![std::collections::HashSet::new(); k];
        for m in meta {
            let c = rng.gen_range(0..k);
            books_per_cluster[c].insert(m.book);
        }
        let mean: f64 =
            books_per_cluster.iter().map(|s| s.len() as f64).sum::<f64>() / k as f64;
        total += mean;
    }
    total / trials as f64
}
