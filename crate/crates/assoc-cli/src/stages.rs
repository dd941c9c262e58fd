//! Pipeline stage orchestration over a workspace directory.
//!
//! Stages run in a fixed order, record completion markers tagged with the
//! config hash they ran under, and skip themselves when already complete.
//! Every clustering source materializes its rows through the same transform
//! machinery, so the raw source is exactly the identity transform.

use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView2};

use assoc_core::clustering::{
    apply_quality_filter, compute_stats, kmeans_fit, minibatch_kmeans_fit, write_assignments,
    ClusterModel, KMeansConfig, SourceTag,
};
use assoc_core::corpus::{book_chunk_texts, ingest_directory, CorpusManifest};
use assoc_core::embedding::{
    embed_corpus, read_f32_matrix, write_f32_matrix, EmbeddingProvider, EmbeddingStore,
    RemoteProvider,
};
use assoc_core::error::{Error, Result};
use assoc_core::inference::{profile_unseen, selectivity_compare, NovelProfile};
use assoc_core::model::{load_checkpoint, train_resumable, AssociationModel, Checkpoint, RowGather};
use assoc_core::pairs::{pair_count, PairSpace};
use assoc_core::report::ProfileSection;
use assoc_core::synthbench::SyntheticTextProvider;
use assoc_core::validation::{
    context_enriched, control_report, cross_boundary_recall, random_model, shuffled_row_order,
};
use assoc_core::workspace::{Stage, Workspace};

pub fn ingest(ws: &Workspace) -> Result<()> {
    if ws.stage_complete(Stage::Ingest) {
        println!("ingest: already complete");
        return Ok(());
    }
    let input = input_dir(ws)?;
    let ingest = ingest_directory(&input, ws.config.corpus.chunk_params(), ws.config.corpus.strip_boilerplate)?;
    if ingest.manifest.books.is_empty() {
        return Err(Error::Data("every input file was excluded".into()));
    }
    ingest.manifest.save(&ws.manifest_path())?;
    for ex in &ingest.manifest.excluded {
        eprintln!("excluded {}: {}", ex.source_name, ex.reason);
    }
    println!(
        "ingest: {} books, {} chunks ({} excluded)",
        ingest.manifest.books.len(),
        ingest.manifest.total_chunks,
        ingest.manifest.excluded.len()
    );
    ws.write_marker(
        Stage::Ingest,
        &format!(
            "{} books, {} chunks",
            ingest.manifest.books.len(),
            ingest.manifest.total_chunks
        ),
    )
}

fn input_dir(ws: &Workspace) -> Result<PathBuf> {
    if ws.config.corpus.input.is_empty() {
        return Err(Error::Config(
            "no input directory configured; pass --input or set [corpus].input".into(),
        ));
    }
    Ok(PathBuf::from(&ws.config.corpus.input))
}

fn load_manifest(ws: &Workspace) -> Result<CorpusManifest> {
    CorpusManifest::load(&ws.manifest_path())
}

pub fn embed(ws: &Workspace) -> Result<()> {
    ws.require_upstream(Stage::Embed)?;
    if ws.stage_complete(Stage::Embed) {
        println!("embed: already complete");
        return Ok(());
    }
    let manifest = load_manifest(ws)?;
    let store_path = ws.store_path(SourceTag::Raw);

    // Idempotent resume: a finished store matching the manifest is kept.
    if let Ok(existing) = EmbeddingStore::read(&store_path) {
        if existing.count() as u64 == manifest.total_chunks
            && existing.dim() == ws.config.embedding.dim
        {
            println!("embed: store already complete ({} rows)", existing.count());
            return ws.write_marker(Stage::Embed, "reused existing store");
        }
    }

    let store = match ws.config.embedding.provider.as_str() {
        "precomputed" => {
            if ws.config.embedding.store.is_empty() {
                return Err(Error::Config(
                    "precomputed provider needs [embedding].store".into(),
                ));
            }
            let store = EmbeddingStore::read(Path::new(&ws.config.embedding.store))?;
            if store.count() as u64 != manifest.total_chunks {
                return Err(Error::Config(format!(
                    "precomputed store has {} rows, manifest expects {}",
                    store.count(),
                    manifest.total_chunks
                )));
            }
            if store.dim() != ws.config.embedding.dim {
                return Err(Error::Config(format!(
                    "precomputed store dim {} != configured dim {}",
                    store.dim(),
                    ws.config.embedding.dim
                )));
            }
            store
        }
        provider_name @ ("synthetic" | "remote") => {
            let provider: Box<dyn EmbeddingProvider> = if provider_name == "synthetic" {
                Box::new(SyntheticTextProvider::new(ws.config.embedding.dim))
            } else {
                if ws.config.embedding.endpoint.is_empty() {
                    return Err(Error::Config("remote provider needs [embedding].endpoint".into()));
                }
                Box::new(RemoteProvider::new(
                    &ws.config.embedding.endpoint,
                    ws.config.embedding.dim,
                ))
            };
            // Re-derive chunk metadata deterministically from the input.
            let input = input_dir(ws)?;
            let ingest = ingest_directory(
                &input,
                ws.config.corpus.chunk_params(),
                ws.config.corpus.strip_boilerplate,
            )?;
            if ingest.manifest != manifest {
                return Err(Error::Data(
                    "input directory changed since ingest; re-run ingest".into(),
                ));
            }
            let params = ws.config.corpus.chunk_params();
            let strip = ws.config.corpus.strip_boilerplate;
            let texts = manifest.books.iter().map(|b| {
                book_chunk_texts(&input.join(&b.file_name), params, strip)
            });
            embed_corpus(provider.as_ref(), &ingest.chunks, texts)?
        }
        other => {
            return Err(Error::Config(format!(
                "unknown embedding provider {other:?} (expected precomputed|remote|synthetic)"
            )))
        }
    };

    store.write(&store_path)?;
    println!("embed: wrote {} rows of dim {}", store.count(), store.dim());
    ws.write_marker(Stage::Embed, &format!("{} rows", store.count()))
}

pub fn pair_space(ws: &Workspace, manifest: &CorpusManifest) -> Result<PairSpace> {
    PairSpace::new(&manifest.chunk_counts(), ws.config.pairs.window)
}

pub fn pairs_stats(ws: &Workspace) -> Result<()> {
    ws.require_upstream(Stage::Pairs)?;
    let manifest = load_manifest(ws)?;
    let space = pair_space(ws, &manifest)?;
    let w = ws.config.pairs.window;

    let per_book: Vec<serde_json::Value> = manifest
        .books
        .iter()
        .map(|b| {
            serde_json::json!({
                "id": b.id,
                "source_name": b.source_name,
                "n_chunks": b.n_chunks,
                "pairs": pair_count(b.n_chunks, w),
            })
        })
        .collect();
    let stats = serde_json::json!({
        "window": w,
        "total_pairs": space.total_pairs(),
        "per_book": per_book,
    });
    let path = ws.pair_stats_path();
    std::fs::write(&path, serde_json::to_string_pretty(&stats).unwrap())
        .map_err(|e| Error::io(&path, e))?;

    for b in &manifest.books {
        println!("book {:>6} {:<40} chunks {:>8} pairs {:>12}", b.id, b.source_name, b.n_chunks, pair_count(b.n_chunks, w));
    }
    println!("total pairs: {}", space.total_pairs());
    ws.write_marker(Stage::Pairs, &format!("{} pairs", space.total_pairs()))
}

/// Latest checkpoint in the workspace matching the train-stage hash.
fn latest_checkpoint(ws: &Workspace) -> Option<(PathBuf, Checkpoint)> {
    let hash = ws.stage_hash_bytes(Stage::Train);
    let mut best: Option<(u32, PathBuf, Checkpoint)> = None;
    let entries = std::fs::read_dir(ws.checkpoints_dir()).ok()?;
    for entry in entries.flatten() {
        let path = entry.path();
        if path.extension().and_then(|e| e.to_str()) != Some("pamm") {
            continue;
        }
        if let Ok(ckpt) = load_checkpoint(&path) {
            if ckpt.config_hash == hash {
                let epoch = ckpt.next_epoch;
                if best.as_ref().map(|(e, _, _)| epoch > *e).unwrap_or(true) {
                    best = Some((epoch, path, ckpt));
                }
            }
        }
    }
    best.map(|(_, p, c)| (p, c))
}

pub fn train_stage(ws: &Workspace) -> Result<()> {
    ws.require_upstream(Stage::Train)?;
    if ws.stage_complete(Stage::Train) {
        println!("train: already complete");
        return Ok(());
    }
    let manifest = load_manifest(ws)?;
    let store = EmbeddingStore::read(&ws.store_path(SourceTag::Raw))?;
    let space = pair_space(ws, &manifest)?;

    let mut config = ws.config.train.clone();
    config.n_blocks = config.n_blocks.max(1);

    let resume = latest_checkpoint(ws);
    if let Some((path, ckpt)) = &resume {
        println!(
            "train: resuming from {} (next epoch {})",
            path.display(),
            ckpt.next_epoch
        );
    }
    let hash = ws.stage_hash_bytes(Stage::Train);
    let outcome = train_resumable(
        &space,
        &store.view(),
        &RowGather::Identity,
        &config,
        Some(&ws.checkpoints_dir()),
        resume.map(|(_, c)| c),
        hash,
    )?;

    // Append this run's epochs to the training log.
    let mut log = String::new();
    for m in &outcome.metrics {
        log.push_str(&serde_json::to_string(m).unwrap());
        log.push('\n');
    }
    let log_path = ws.train_log_path();
    use std::io::Write;
    let mut file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    file.write_all(log.as_bytes()).map_err(|e| Error::io(&log_path, e))?;

    if let Some(last) = outcome.metrics.last() {
        println!(
            "train: epoch {} loss {:.4} accuracy {:.4} alpha {:.3}",
            last.epoch, last.mean_loss, last.mean_accuracy, last.alpha
        );
    }
    ws.write_marker(
        Stage::Train,
        &format!("{} epochs", config.total_epochs()),
    )
}

/// Final trained model from the checkpoint directory.
pub fn trained_model(ws: &Workspace) -> Result<AssociationModel<f32>> {
    let (_, ckpt) = latest_checkpoint(ws).ok_or_else(|| {
        Error::Config("no checkpoint matches the current config; run train first".into())
    })?;
    if ckpt.next_epoch < ws.config.train.epochs_phase1 + ws.config.train.epochs_phase2 {
        return Err(Error::Config(format!(
            "training incomplete: checkpoint stops at epoch {}",
            ckpt.next_epoch
        )));
    }
    Ok(ckpt.model())
}

/// Identity transform: the raw source goes through the same machinery as
/// every other source, which keeps raw vs alpha=1 clustering bit-identical.
pub fn identity_model(dim: usize) -> AssociationModel<f32> {
    let mut m = random_model(dim, 1, 1, 0);
    m.alpha_raw = f32::INFINITY;
    m
}

/// Materialize (and cache) the row matrix for one clustering source.
pub fn source_rows(ws: &Workspace, source: SourceTag) -> Result<EmbeddingStore> {
    let path = ws.store_path(source);
    if let Ok(store) = EmbeddingStore::read(&path) {
        return Ok(store);
    }
    let raw = EmbeddingStore::read(&ws.store_path(SourceTag::Raw))?;
    let store = match source {
        SourceTag::Raw => unreachable!("raw store is written by the embed stage"),
        SourceTag::Association => {
            let model = trained_model(ws)?;
            let rows = model.transform(&raw.view(), 8192)?;
            raw.with_rows(rows.into_raw_vec_and_offset().0)?
        }
        SourceTag::Context => context_enriched(&raw, ws.config.validation.context_window)?,
        SourceTag::RandomMlp => {
            let model = random_model(
                raw.dim(),
                ws.config.train.n_blocks,
                ws.config.train.hidden_multiplier,
                ws.config.train.seed,
            );
            let rows = model.transform(&raw.view(), 8192)?;
            raw.with_rows(rows.into_raw_vec_and_offset().0)?
        }
    };
    store.write(&path)?;
    Ok(store)
}

/// Rows a clustering runs on: the raw source is the identity transform of
/// the raw store (renormalization through the shared code path).
fn clustering_rows(ws: &Workspace, source: SourceTag) -> Result<Array2<f32>> {
    let raw = EmbeddingStore::read(&ws.store_path(SourceTag::Raw))?;
    if source == SourceTag::Raw {
        let identity = identity_model(raw.dim());
        return identity.transform(&raw.view(), 8192);
    }
    let store = source_rows(ws, source)?;
    Ok(store.view().to_owned())
}

pub fn cluster_one(
    ws: &Workspace,
    source: SourceTag,
    rows: &ArrayView2<'_, f32>,
    meta: &[assoc_core::corpus::ChunkMeta],
    k: usize,
) -> Result<ClusterModel> {
    let cfg = KMeansConfig {
        k,
        seed: ws.config.clustering.seed,
        max_iter: ws.config.clustering.max_iter,
        tol: ws.config.clustering.tol,
    };
    let model = if ws.config.clustering.mini_batch {
        minibatch_kmeans_fit(rows, cfg, ws.config.clustering.mini_batch_size, source)?
    } else {
        kmeans_fit(rows, cfg, source)?
    };

    write_assignments(&ws.assignments_path(source, k), k, &model.assignments)?;
    write_f32_matrix(
        &ws.centroids_path(source, k),
        model.centroids.ncols(),
        model.centroids.as_slice().expect("contiguous centroids"),
    )?;

    let mut stats = compute_stats(&model, meta, rows)?;
    apply_quality_filter(&mut stats, &ws.config.clustering.thresholds()?)?;
    let stats_path = ws.stats_path(source, k);
    std::fs::write(&stats_path, serde_json::to_string_pretty(&stats).unwrap())
        .map_err(|e| Error::io(&stats_path, e))?;
    println!(
        "cluster {} k={k}: passing {}/{k}, mean cosine {:.3}, mean books {:.1}, mean dominance {:.1}%",
        source.as_str(),
        stats.passing,
        stats.mean_cosine,
        stats.mean_books,
        stats.mean_dominance * 100.0
    );
    Ok(model)
}

pub fn cluster_stage(ws: &Workspace, sources: &[SourceTag], ks: Option<Vec<usize>>) -> Result<()> {
    ws.require_upstream(Stage::Cluster)?;
    let raw = EmbeddingStore::read(&ws.store_path(SourceTag::Raw))?;
    let meta = raw.meta().to_vec();
    let ks = ks.unwrap_or_else(|| ws.config.clustering.ks.clone());
    for &source in sources {
        let rows = clustering_rows(ws, source)?;
        for &k in &ks {
            if k > rows.nrows() {
                return Err(Error::Config(format!(
                    "k = {k} exceeds {} rows; adjust [clustering].ks",
                    rows.nrows()
                )));
            }
            cluster_one(ws, source, &rows.view(), &meta, k)?;
        }
    }
    Ok(())
}

pub fn mark_cluster_complete(ws: &Workspace) -> Result<()> {
    ws.write_marker(Stage::Cluster, "association + raw sources")
}

pub fn validate_controls(ws: &Workspace, ks: Option<Vec<usize>>) -> Result<()> {
    ws.require_upstream(Stage::Validate)?;
    let raw = EmbeddingStore::read(&ws.store_path(SourceTag::Raw))?;
    let tokens: Vec<f64> = raw.meta().iter().map(|m| m.token_count as f64).collect();
    let mean = tokens.iter().sum::<f64>() / tokens.len().max(1) as f64;
    let std = assoc_core::util::std_dev(tokens.iter().copied());

    for k in ks.unwrap_or_else(|| ws.config.clustering.ks.clone()) {
        let stats_path = ws.stats_path(SourceTag::Association, k);
        let text = std::fs::read_to_string(&stats_path).map_err(|e| Error::io(&stats_path, e))?;
        let stats = serde_json::from_str(&text)
            .map_err(|e| Error::Data(format!("{}: {e}", stats_path.display())))?;
        let report = control_report(&stats, mean, std, &ws.config.validation.controls);
        let out = ws.controls_path(k);
        std::fs::write(&out, serde_json::to_string_pretty(&report).unwrap())
            .map_err(|e| Error::io(&out, e))?;
        println!(
            "controls k={k}: position {} token {} dominance {} (of {k})",
            report.position_flagged, report.token_flagged, report.dominance_flagged
        );
    }
    Ok(())
}

pub fn validate_shuffle(ws: &Workspace, seed_override: Option<u64>) -> Result<()> {
    ws.require_upstream(Stage::Validate)?;
    let manifest = load_manifest(ws)?;
    let raw = EmbeddingStore::read(&ws.store_path(SourceTag::Raw))?;
    let space = pair_space(ws, &manifest)?;
    let model = trained_model(ws)?;

    let seed = seed_override.unwrap_or(ws.config.validation.shuffle_seed);
    let order = shuffled_row_order(&manifest.chunk_counts(), seed);
    println!("shuffle: retraining on shuffled chunk order (seed {seed})");
    let shuffled = assoc_core::model::train(
        &space,
        &raw.view(),
        &RowGather::Mapped(&order),
        &ws.config.train,
    )?;

    let recall_cfg = ws.config.validation.recall;
    let recall_true = cross_boundary_recall(&model, &space, &raw.view(), &recall_cfg)?;
    let recall_shuffled =
        cross_boundary_recall(&shuffled.model, &space, &raw.view(), &recall_cfg)?;
    let drop = if recall_true > 0.0 {
        (recall_true - recall_shuffled) / recall_true
    } else {
        0.0
    };
    let report = serde_json::json!({
        "seed": seed,
        "recall_trained": recall_true,
        "recall_shuffled": recall_shuffled,
        "relative_drop": drop,
    });
    let path = ws.shuffle_report_path();
    std::fs::write(&path, serde_json::to_string_pretty(&report).unwrap())
        .map_err(|e| Error::io(&path, e))?;
    println!(
        "shuffle: recall {recall_true:.3} -> {recall_shuffled:.3} (relative drop {:.1}%)",
        drop * 100.0
    );
    Ok(())
}

pub fn validate_baseline(ws: &Workspace, source: SourceTag) -> Result<()> {
    ws.require_upstream(Stage::Validate)?;
    if source != SourceTag::Context && source != SourceTag::RandomMlp {
        return Err(Error::Config("baseline source must be context or random".into()));
    }
    cluster_stage(ws, &[source], None)?;
    // Assemble the comparison against raw and association where present.
    let mut comparison = Vec::new();
    for &k in &ws.config.clustering.ks {
        let mut row = serde_json::Map::new();
        row.insert("k".into(), serde_json::json!(k));
        for s in [SourceTag::Raw, SourceTag::Association, source] {
            if let Ok(text) = std::fs::read_to_string(ws.stats_path(s, k)) {
                if let Ok(stats) = serde_json::from_str::<assoc_core::clustering::ClusterStats>(&text)
                {
                    row.insert(
                        s.as_str().replace('-', "_"),
                        serde_json::json!({
                            "passing": stats.passing,
                            "mean_cosine": stats.mean_cosine,
                            "mean_books": stats.mean_books,
                            "mean_dominance": stats.mean_dominance,
                        }),
                    );
                }
            }
        }
        comparison.push(serde_json::Value::Object(row));
    }
    let path = ws.baseline_report_path(source);
    std::fs::write(&path, serde_json::to_string_pretty(&comparison).unwrap())
        .map_err(|e| Error::io(&path, e))?;
    println!("baseline {}: wrote {}", source.as_str(), path.display());
    Ok(())
}

fn centroid_model(ws: &Workspace, source: SourceTag, k: usize) -> Result<ClusterModel> {
    let path = ws.centroids_path(source, k);
    let (dim, values) = read_f32_matrix(&path)?;
    let rows = values.len() / dim;
    Ok(ClusterModel {
        k: rows,
        centroids: Array2::from_shape_vec((rows, dim), values)
            .map_err(|e| Error::Data(format!("centroid shape: {e}")))?,
        assignments: Vec::new(),
        inertia: 0.0,
        iterations: 0,
        source,
    })
}

pub fn assign(
    ws: &Workspace,
    text_path: &Path,
    ks: Option<Vec<usize>>,
    compare_raw: bool,
    name: Option<String>,
) -> Result<()> {
    ws.require_upstream(Stage::Validate)?; // needs cluster artifacts
    let text = std::fs::read_to_string(text_path).map_err(|e| Error::io(text_path, e))?;
    let model = trained_model(ws)?;
    let params = ws.config.corpus.chunk_params();

    let provider: Box<dyn EmbeddingProvider> = match ws.config.embedding.provider.as_str() {
        "remote" => Box::new(RemoteProvider::new(
            &ws.config.embedding.endpoint,
            ws.config.embedding.dim,
        )),
        "synthetic" => Box::new(SyntheticTextProvider::new(ws.config.embedding.dim)),
        other => {
            return Err(Error::Config(format!(
                "assign needs a text-capable provider (remote or synthetic), not {other:?}"
            )))
        }
    };

    let ks = ks.unwrap_or_else(|| ws.config.clustering.ks.clone());
    let mut profiles: Vec<NovelProfile> = Vec::new();
    let mut raw_profiles: Vec<NovelProfile> = Vec::new();
    for &k in &ks {
        let clusters = centroid_model(ws, SourceTag::Association, k)?;
        let profile = profile_unseen(&text, params, provider.as_ref(), Some(&model), &clusters)?;
        println!(
            "assign k={k}: activation {}/{k}, top-5 {:.1}%",
            profile.activation,
            profile.top5_concentration * 100.0
        );
        if compare_raw {
            let raw_clusters = centroid_model(ws, SourceTag::Raw, k)?;
            let identity = identity_model(ws.config.embedding.dim);
            let raw_profile =
                profile_unseen(&text, params, provider.as_ref(), Some(&identity), &raw_clusters)?;
            let cmp = selectivity_compare(&profile, &raw_profile)?;
            println!(
                "        raw: activation {}/{k}, top-5 {:.1}% (delta {:+.1} points)",
                cmp.activation_b,
                cmp.top5_b * 100.0,
                cmp.top5_delta * 100.0
            );
            raw_profiles.push(raw_profile);
        }
        profiles.push(profile);
    }

    let stem = name.unwrap_or_else(|| {
        text_path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "novel".into())
    });
    let section = ProfileSection {
        name: stem.clone(),
        profiles,
        raw_profiles,
    };
    let path = ws.profile_path(&stem);
    std::fs::write(&path, serde_json::to_string_pretty(&section).unwrap())
        .map_err(|e| Error::io(&path, e))?;
    println!("assign: wrote {}", path.display());
    Ok(())
}

/// Full pipeline: ingest, embed, pairs, train, cluster (association + raw),
/// validate (controls at every configured k). Completed stages are skipped.
pub fn run_pipeline(ws: &Workspace) -> Result<()> {
    ingest(ws)?;
    embed(ws)?;
    if ws.stage_complete(Stage::Pairs) {
        println!("pairs: already complete");
    } else {
        pairs_stats(ws)?;
    }
    train_stage(ws)?;
    if ws.stage_complete(Stage::Cluster) {
        println!("cluster: already complete");
    } else {
        cluster_stage(ws, &[SourceTag::Association, SourceTag::Raw], None)?;
        mark_cluster_complete(ws)?;
    }
    if ws.stage_complete(Stage::Validate) {
        println!("validate: already complete");
    } else {
        validate_controls(ws, None)?;
        ws.write_marker(Stage::Validate, "controls")?;
    }
    Ok(())
}
