//! Assignment of unseen texts to existing concept clusters, with
//! selectivity and timeline diagnostics. No retraining occurs.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::clustering::{assign_nearest, ClusterModel};
use crate::corpus::{chunk_windows, token_spans, ChunkParams};
use crate::embedding::{l2_normalize, EmbeddingProvider};
use crate::error::{Error, Result};
use crate::model::AssociationModel;

/// How an unseen text distributes over one clustering's concepts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NovelProfile {
    pub k: usize,
    /// Clusters with at least one assigned passage.
    pub activation: usize,
    /// Fraction of passages in the five most frequent clusters.
    pub top5_concentration: f64,
    /// Passage counts per cluster id; sums to the chunk count.
    pub histogram: Vec<u64>,
    pub assignments: Vec<u32>,
    pub positions: Vec<f64>,
    pub n_chunks: usize,
}

impl NovelProfile {
    fn from_assignments(k: usize, assignments: Vec<u32>, positions: Vec<f64>) -> Self {
        let mut histogram = vec![0u64; k];
        for &a in &assignments {
            histogram[a as usize] += 1;
        }
        let activation = histogram.iter().filter(|&&c| c > 0).count();
        // Rank by count descending; ties at the cut go to the lower id.
        let mut order: Vec<usize> = (0..k).collect();
        order.sort_by(|&a, &b| histogram[b].cmp(&histogram[a]).then(a.cmp(&b)));
        let top5: u64 = order.iter().take(5).map(|&c| histogram[c]).sum();
        let n = assignments.len();
        NovelProfile {
            k,
            activation,
            top5_concentration: top5 as f64 / n.max(1) as f64,
            histogram,
            assignments,
            positions,
            n_chunks: n,
        }
    }
}

/// Embed an unseen text's chunks, optionally transform them, and return the
/// transformed (or raw) row matrix plus chunk positions.
pub fn embed_unseen(
    text: &str,
    params: ChunkParams,
    provider: &dyn EmbeddingProvider,
    model: Option<&AssociationModel<f32>>,
) -> Result<(Array2<f32>, Vec<f64>)> {
    let spans = token_spans(text);
    let windows = chunk_windows(spans.len(), params)?;
    if windows.is_empty() {
        return Err(Error::Data(
            "text yields zero chunks; nothing to assign".into(),
        ));
    }
    let texts: Vec<String> = windows
        .iter()
        .map(|&(a, b)| text[spans[a].0..spans[b - 1].1].to_owned())
        .collect();
    let vectors = provider.embed_batch(&texts)?;
    let dim = provider.dim();
    let mut rows = Vec::with_capacity(vectors.len() * dim);
    for mut v in vectors {
        if v.len() != dim {
            return Err(Error::Config(format!(
                "provider returned dim {}, expected {dim}",
                v.len()
            )));
        }
        l2_normalize(&mut v)?;
        rows.extend_from_slice(&v);
    }
    let raw = Array2::from_shape_vec((windows.len(), dim), rows)
        .expect("row buffer matches window count");
    let out = match model {
        Some(m) => m.transform(&raw.view(), 8192)?,
        None => raw,
    };
    let denom = (windows.len() - 1).max(1) as f64;
    let positions: Vec<f64> = (0..windows.len()).map(|i| i as f64 / denom).collect();
    Ok((out, positions))
}

/// Profile an unseen text against one fitted clustering.
pub fn profile_unseen(
    text: &str,
    params: ChunkParams,
    provider: &dyn EmbeddingProvider,
    model: Option<&AssociationModel<f32>>,
    clusters: &ClusterModel,
) -> Result<NovelProfile> {
    let (rows, positions) = embed_unseen(text, params, provider, model)?;
    if rows.ncols() != clusters.centroids.ncols() {
        return Err(Error::Config(format!(
            "embedding dim {} does not match centroid dim {}",
            rows.ncols(),
            clusters.centroids.ncols()
        )));
    }
    let assignments = assign_nearest(&rows.view(), &clusters.centroids);
    Ok(NovelProfile::from_assignments(
        clusters.k,
        assignments,
        positions,
    ))
}

/// Activation and concentration deltas between two profiles at the same k.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectivityComparison {
    pub k: usize,
    pub activation_a: usize,
    pub activation_b: usize,
    pub activation_delta: i64,
    pub top5_a: f64,
    pub top5_b: f64,
    pub top5_delta: f64,
}

/// Compare two profiles (reporting only; no judgment thresholds).
pub fn selectivity_compare(a: &NovelProfile, b: &NovelProfile) -> Result<SelectivityComparison> {
    if a.k != b.k {
        return Err(Error::Config(format!(
            "profiles are at different k: {} vs {}",
            a.k, b.k
        )));
    }
    Ok(SelectivityComparison {
        k: a.k,
        activation_a: a.activation,
        activation_b: b.activation,
        activation_delta: a.activation as i64 - b.activation as i64,
        top5_a: a.top5_concentration,
        top5_b: b.top5_concentration,
        top5_delta: a.top5_concentration - b.top5_concentration,
    })
}

/// Ordered (normalized position, cluster id) sequence for the timeline view.
pub fn timeline(profile: &NovelProfile) -> Vec<(f64, u32)> {
    profile
        .positions
        .iter()
        .copied()
        .zip(profile.assignments.iter().copied())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clustering::SourceTag;
    use crate::synthbench::SyntheticTextProvider;
    use ndarray::arr2;

    fn cluster_model(centroids: Array2<f32>) -> ClusterModel {
        ClusterModel {
            k: centroids.nrows(),
            centroids,
            assignments: Vec::new(),
            inertia: 0.0,
            iterations: 0,
            source: SourceTag::Raw,
        }
    }

    fn words(n: usize) -> String {
        (0..n).map(|i| format!("w{i}")).collect::<Vec<_>>().join(" ")
    }

    #[test]
    fn zero_chunk_text_is_error() {
        let provider = SyntheticTextProvider::new(4);
        let clusters = cluster_model(arr2(&[[1.0f32, 0.0, 0.0, 0.0]]));
        let err = profile_unseen(
            "tiny",
            ChunkParams::default(),
            &provider,
            None,
            &clusters,
        )
        .unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn histogram_conserves_chunks() {
        let provider = SyntheticTextProvider::new(6);
        let centroids = Array2::from_shape_fn((4, 6), |(r, c)| if r == c { 1.0 } else { 0.0 });
        let clusters = cluster_model(centroids);
        let text = words(50 + 35 * 7);
        let profile =
            profile_unseen(&text, ChunkParams::default(), &provider, None, &clusters).unwrap();
        assert_eq!(profile.histogram.iter().sum::<u64>(), profile.n_chunks as u64);
        assert!(profile.activation <= 4);
        assert!(profile.top5_concentration > 0.0 && profile.top5_concentration <= 1.0);
    }

    #[test]
    fn three_chunk_timeline_positions() {
        let provider = SyntheticTextProvider::new(4);
        let clusters = cluster_model(Array2::eye(4));
        let text = words(120); // exactly 3 chunks
        let profile =
            profile_unseen(&text, ChunkParams::default(), &provider, None, &clusters).unwrap();
        let tl = timeline(&profile);
        assert_eq!(tl.len(), 3);
        assert_eq!(tl[0].0, 0.0);
        assert_eq!(tl[1].0, 0.5);
        assert_eq!(tl[2].0, 1.0);
    }

    #[test]
    fn identity_transform_profile_equals_raw_profile() {
        let provider = SyntheticTextProvider::new(8);
        let mut centroids = Array2::zeros((3, 8));
        for c in 0..3 {
            centroids[[c, c]] = 1.0;
        }
        let clusters = cluster_model(centroids);
        let text = words(400);
        let mut identity = crate::validation::random_model(8, 4, 1, 7);
        identity.alpha_raw = f32::INFINITY;
        let raw =
            profile_unseen(&text, ChunkParams::default(), &provider, None, &clusters).unwrap();
        let via_model = profile_unseen(
            &text,
            ChunkParams::default(),
            &provider,
            Some(&identity),
            &clusters,
        )
        .unwrap();
        assert_eq!(raw, via_model);
    }

    #[test]
    fn constant_assignment_is_single_activation() {
        // One centroid exactly matching every chunk cannot happen with the
        // hash provider, but a single-cluster model forces activation 1 and
        // top-5 concentration 1.0.
        let provider = SyntheticTextProvider::new(4);
        let clusters = cluster_model(arr2(&[[1.0f32, 0.0, 0.0, 0.0]]));
        let text = words(300);
        let profile =
            profile_unseen(&text, ChunkParams::default(), &provider, None, &clusters).unwrap();
        assert_eq!(profile.activation, 1);
        assert_eq!(profile.top5_concentration, 1.0);
    }

    #[test]
    fn selectivity_compare_requires_matching_k() {
        let a = NovelProfile::from_assignments(3, vec![0, 1], vec![0.0, 1.0]);
        let b = NovelProfile::from_assignments(4, vec![0, 1], vec![0.0, 1.0]);
        assert!(selectivity_compare(&a, &b).is_err());
        let c = NovelProfile::from_assignments(3, vec![0, 1], vec![0.0, 1.0]);
        let cmp = selectivity_compare(&a, &c).unwrap();
        assert_eq!(cmp.activation_delta, 0);
        assert_eq!(cmp.top5_delta, 0.0);
    }

    #[test]
    fn activation_nondecreasing_in_prefix_length() {
        let provider = SyntheticTextProvider::new(6);
        let centroids = Array2::from_shape_fn((6, 6), |(r, c)| if r == c { 1.0 } else { 0.0 });
        let clusters = cluster_model(centroids);
        let long = words(2000);
        let tokens: Vec<&str> = long.split(' ').collect();
        let mut prev_activation = 0usize;
        for prefix_tokens in [300usize, 800, 2000] {
            let text = tokens[0..prefix_tokens].join(" ");
            let profile =
                profile_unseen(&text, ChunkParams::default(), &provider, None, &clusters).unwrap();
            assert!(
                profile.activation >= prev_activation,
                "activation dropped on longer prefix"
            );
            prev_activation = profile.activation;
        }
    }

    #[test]
    fn top5_tie_at_fifth_rank_prefers_lower_id() {
        // Counts: cluster 0..6 = [3,2,2,2,2,2,1]; the 5th slot ties among
        // ids 1..5 at count 2; lower ids win, so top5 = 3+2+2+2+2 = 11 of 14.
        let assignments = vec![0, 0, 0, 1, 1, 2, 2, 3, 3, 4, 4, 5, 5, 6];
        let positions: Vec<f64> = (0..14).map(|i| i as f64 / 13.0).collect();
        let profile = NovelProfile::from_assignments(7, assignments, positions);
        assert!((profile.top5_concentration - 11.0 / 14.0).abs() < 1e-12);
    }
}
