//! Workspace directory layout, pipeline configuration, and stage gating.
//!
//! Every stage records the hash of the config sections it depends on
//! (its own section plus everything upstream); a stage is considered
//! complete only when its marker carries the current hash, so changing any
//! upstream parameter invalidates all downstream markers.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::clustering::SourceTag;
use crate::corpus::ChunkParams;
use crate::error::{Error, Result};
use crate::model::TrainConfig;
use crate::validation::{ControlThresholds, RecallConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusSection {
    pub input: String,
    pub chunk_len: usize,
    pub overlap: usize,
    pub strip_boilerplate: bool,
}

impl Default for CorpusSection {
    fn default() -> Self {
        CorpusSection {
            input: String::new(),
            chunk_len: 50,
            overlap: 15,
            strip_boilerplate: false,
        }
    }
}

impl CorpusSection {
    pub fn chunk_params(&self) -> ChunkParams {
        ChunkParams {
            chunk_len: self.chunk_len,
            overlap: self.overlap,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbeddingSection {
    /// precomputed | remote | synthetic
    pub provider: String,
    pub dim: usize,
    pub endpoint: String,
    /// Path of an existing store for the precomputed provider.
    pub store: String,
    pub max_retries: u32,
}

impl Default for EmbeddingSection {
    fn default() -> Self {
        EmbeddingSection {
            provider: "synthetic".into(),
            dim: 1024,
            endpoint: String::new(),
            store: String::new(),
            max_retries: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PairsSection {
    pub window: u64,
}

impl Default for PairsSection {
    fn default() -> Self {
        PairsSection { window: 15 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClusteringSection {
    pub ks: Vec<usize>,
    pub seed: u64,
    pub max_iter: usize,
    pub tol: f64,
    pub mini_batch: bool,
    pub mini_batch_size: usize,
    /// Book-diversity thresholds per k (string keys for TOML).
    pub book_thresholds: BTreeMap<String, u64>,
}

impl Default for ClusteringSection {
    fn default() -> Self {
        let thresholds = crate::clustering::default_thresholds()
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect();
        ClusteringSection {
            ks: crate::clustering::DEFAULT_KS.to_vec(),
            seed: 42,
            max_iter: 100,
            tol: 1e-4,
            mini_batch: false,
            mini_batch_size: 4096,
            book_thresholds: thresholds,
        }
    }
}

impl ClusteringSection {
    pub fn thresholds(&self) -> Result<BTreeMap<usize, u64>> {
        self.book_thresholds
            .iter()
            .map(|(k, &v)| {
                k.parse::<usize>()
                    .map(|k| (k, v))
                    .map_err(|_| Error::Config(format!("bad threshold key {k:?}")))
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ValidationSection {
    pub controls: ControlThresholds,
    pub recall: RecallConfig,
    pub context_window: usize,
    pub shuffle_seed: u64,
}

impl Default for ValidationSection {
    fn default() -> Self {
        ValidationSection {
            controls: ControlThresholds::default(),
            recall: RecallConfig::default(),
            context_window: 15,
            shuffle_seed: 42,
        }
    }
}

/// Full pipeline configuration; the TOML file mirrors these sections and
/// spells out every default.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub corpus: CorpusSection,
    pub embedding: EmbeddingSection,
    pub pairs: PairsSection,
    pub train: TrainConfig,
    pub clustering: ClusteringSection,
    pub validation: ValidationSection,
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("config parse: {e}")))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_toml()).map_err(|e| Error::io(path, e))
    }
}

/// Pipeline stages in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Ingest,
    Embed,
    Pairs,
    Train,
    Cluster,
    Validate,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::Ingest,
        Stage::Embed,
        Stage::Pairs,
        Stage::Train,
        Stage::Cluster,
        Stage::Validate,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Embed => "embed",
            Stage::Pairs => "pairs",
            Stage::Train => "train",
            Stage::Cluster => "cluster",
            Stage::Validate => "validate",
        }
    }

    /// The stage immediately upstream, if any.
    pub fn upstream(&self) -> Option<Stage> {
        match self {
            Stage::Ingest => None,
            Stage::Embed => Some(Stage::Ingest),
            Stage::Pairs => Some(Stage::Embed),
            Stage::Train => Some(Stage::Pairs),
            Stage::Cluster => Some(Stage::Train),
            Stage::Validate => Some(Stage::Cluster),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageMarker {
    pub stage: Stage,
    pub config_hash: String,
    pub completed_unix_secs: u64,
    pub detail: String,
}

/// A pipeline workspace rooted at one directory.
#[derive(Debug, Clone)]
pub struct Workspace {
    root: PathBuf,
    pub config: PipelineConfig,
}

impl Workspace {
    /// Create or open a workspace. A fresh root gets the config written as
    /// its snapshot; an existing root loads its snapshot unless `config`
    /// overrides it.
    pub fn open(root: &Path, config: Option<PipelineConfig>) -> Result<Self> {
        fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        let config_path = root.join("config.toml");
        let config = match (config, config_path.exists()) {
            (Some(c), _) => {
                c.save(&config_path)?;
                c
            }
            (None, true) => PipelineConfig::load(&config_path)?,
            (None, false) => {
                let c = PipelineConfig::default();
                c.save(&config_path)?;
                c
            }
        };
        let ws = Workspace {
            root: root.to_path_buf(),
            config,
        };
        for dir in [
            ws.markers_dir(),
            ws.store_dir(),
            ws.checkpoints_dir(),
            ws.clusters_dir(),
            ws.reports_dir(),
        ] {
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        Ok(ws)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config_path(&self) -> PathBuf {
        self.root.join("config.toml")
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.root.join("manifest.json")
    }

    pub fn store_dir(&self) -> PathBuf {
        self.root.join("store")
    }

    /// Embedding store per source space.
    pub fn store_path(&self, source: SourceTag) -> PathBuf {
        self.store_dir().join(format!("{}.pamc", source.as_str()))
    }

    pub fn pair_stats_path(&self) -> PathBuf {
        self.root.join("pair_stats.json")
    }

    pub fn checkpoints_dir(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn train_log_path(&self) -> PathBuf {
        self.root.join("train_log.jsonl")
    }

    pub fn clusters_dir(&self) -> PathBuf {
        self.root.join("clusters")
    }

    pub fn assignments_path(&self, source: SourceTag, k: usize) -> PathBuf {
        self.clusters_dir()
            .join(format!("{}_k{k}.pama", source.as_str()))
    }

    pub fn centroids_path(&self, source: SourceTag, k: usize) -> PathBuf {
        self.clusters_dir()
            .join(format!("{}_k{k}_centroids.pamc", source.as_str()))
    }

    pub fn stats_path(&self, source: SourceTag, k: usize) -> PathBuf {
        self.clusters_dir()
            .join(format!("{}_k{k}_stats.json", source.as_str()))
    }

    pub fn controls_path(&self, k: usize) -> PathBuf {
        self.reports_dir().join(format!("controls_k{k}.json"))
    }

    pub fn shuffle_report_path(&self) -> PathBuf {
        self.reports_dir().join("shuffle.json")
    }

    pub fn baseline_report_path(&self, source: SourceTag) -> PathBuf {
        self.reports_dir()
            .join(format!("baseline_{}.json", source.as_str()))
    }

    pub fn profile_path(&self, name: &str) -> PathBuf {
        self.reports_dir().join(format!("profile_{name}.json"))
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn markers_dir(&self) -> PathBuf {
        self.root.join("markers")
    }

    fn marker_path(&self, stage: Stage) -> PathBuf {
        self.markers_dir().join(format!("{}.json", stage.name()))
    }

    /// Hash of the config sections a stage depends on: its own section and
    /// every upstream section, in stage order.
    pub fn stage_hash(&self, stage: Stage) -> String {
        let mut hasher = Sha256::new();
        let c = &self.config;
        let mut feed = |label: &str, json: String| {
            hasher.update(label.as_bytes());
            hasher.update(json.as_bytes());
        };
        // Ordered by stage; falls through on purpose up to the target.
        let order: &[Stage] = &Stage::ALL;
        for s in order {
            let json = match s {
                Stage::Ingest => serde_json::to_string(&c.corpus),
                Stage::Embed => serde_json::to_string(&c.embedding),
                Stage::Pairs => serde_json::to_string(&c.pairs),
                Stage::Train => serde_json::to_string(&c.train),
                Stage::Cluster => serde_json::to_string(&c.clustering),
                Stage::Validate => serde_json::to_string(&c.validation),
            }
            .expect("config section serializes");
            feed(s.name(), json);
            if s == &stage {
                break;
            }
        }
        hex(&hasher.finalize())
    }

    /// 32-byte stage hash for embedding into binary artifacts.
    pub fn stage_hash_bytes(&self, stage: Stage) -> [u8; 32] {
        let hexstr = self.stage_hash(stage);
        let mut out = [0u8; 32];
        for (i, byte) in out.iter_mut().enumerate() {
            *byte = u8::from_str_radix(&hexstr[2 * i..2 * i + 2], 16).unwrap();
        }
        out
    }

    pub fn write_marker(&self, stage: Stage, detail: &str) -> Result<()> {
        let marker = StageMarker {
            stage,
            config_hash: self.stage_hash(stage),
            completed_unix_secs: std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            detail: detail.to_owned(),
        };
        let path = self.marker_path(stage);
        let json = serde_json::to_string_pretty(&marker)
            .map_err(|e| Error::Data(format!("marker encode: {e}")))?;
        fs::write(&path, json).map_err(|e| Error::io(&path, e))
    }

    pub fn read_marker(&self, stage: Stage) -> Option<StageMarker> {
        let path = self.marker_path(stage);
        let text = fs::read_to_string(path).ok()?;
        serde_json::from_str(&text).ok()
    }

    /// A stage is complete when its marker exists and carries the current
    /// stage hash.
    pub fn stage_complete(&self, stage: Stage) -> bool {
        self.read_marker(stage)
            .map(|m| m.config_hash == self.stage_hash(stage))
            .unwrap_or(false)
    }

    /// Stages refuse to run when any upstream stage is missing or ran under
    /// a different configuration.
    pub fn require_upstream(&self, stage: Stage) -> Result<()> {
        let mut cursor = stage.upstream();
        while let Some(s) = cursor {
            if !self.stage_complete(s) {
                return Err(Error::Config(format!(
                    "stage {} requires {} to be complete under the current config; \
                     run it first",
                    stage.name(),
                    s.name()
                )));
            }
            cursor = s.upstream();
        }
        Ok(())
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_round_trips_and_lists_defaults() {
        let config = PipelineConfig::default();
        let toml_text = config.to_toml();
        // Spot-check that the canonical defaults are spelled out.
        for needle in [
            "chunk_len = 50",
            "overlap = 15",
            "window = 15",
            "batch_size = 512",
            "temperature = 0.05",
            "epochs_phase1 = 100",
            "epochs_phase2 = 50",
            "weight_decay = 0.01",
            "dominance_limit = 0.1",
            "sim_percentile = 10.0",
        ] {
            assert!(toml_text.contains(needle), "missing {needle:?} in:\n{toml_text}");
        }
        let back = PipelineConfig::from_toml(&toml_text).unwrap();
        assert_eq!(config, back);
    }

    #[test]
    fn stage_hash_changes_only_downstream() {
        let dir = tempfile::tempdir().unwrap();
        let ws = Workspace::open(dir.path(), None).unwrap();
        let ingest_hash = ws.stage_hash(Stage::Ingest);
        let train_hash = ws.stage_hash(Stage::Train);

        let mut changed = ws.config.clone();
        changed.train.learning_rate = 9e-4;
        let ws2 = Workspace::open(dir.path(), Some(changed)).unwrap();
        assert_eq!(ws2.stage_hash(Stage::Ingest), ingest_hash);
        assert_ne!(ws2.stage_hash(Stage::Train), train_hash);
        // Downstream of train changes too.
        assert_ne!(ws2.stage_hash(Stage::Cluster), ws.stage_hash(Stage::Cluster));
    }

    #[test]
    fn markers_gate_on_config_hash() {
        let dir = tempfile::tempdir().unwrap();
        let ws = Workspace::open(dir.path(), None).unwrap();
        assert!(!ws.stage_complete(Stage::Ingest));
        ws.write_marker(Stage::Ingest, "2 books").unwrap();
        assert!(ws.stage_complete(Stage::Ingest));

        // Upstream gating: embed requires ingest.
        ws.require_upstream(Stage::Embed).unwrap();
        assert!(ws.require_upstream(Stage::Train).is_err());

        // Changing the corpus section invalidates the ingest marker.
        let mut changed = ws.config.clone();
        changed.corpus.chunk_len = 40;
        let ws2 = Workspace::open(dir.path(), Some(changed)).unwrap();
        assert!(!ws2.stage_complete(Stage::Ingest));
        assert!(ws2.require_upstream(Stage::Embed).is_err());
    }

    #[test]
    fn reopen_loads_saved_snapshot() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = PipelineConfig::default();
        config.embedding.dim = 64;
        Workspace::open(dir.path(), Some(config.clone())).unwrap();
        let ws = Workspace::open(dir.path(), None).unwrap();
        assert_eq!(ws.config, config);
    }
}
