//! Unit-norm passage embeddings: binary store format and providers.
//!
//! The store is a fixed-stride row-major f32 matrix with a small header and
//! a CRC32 footer, plus a JSON-lines metadata sidecar (one [`ChunkMeta`] per
//! row). Providers turn passage text into vectors; all providers must be
//! deterministic for identical text.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::corpus::ChunkMeta;
use crate::error::{Error, FormatErrorKind, Result};

pub const STORE_MAGIC: [u8; 4] = *b"PAMC";
pub const STORE_VERSION: u32 = 1;
const DTYPE_F32_LE: u8 = 0;
const HEADER_LEN: usize = 4 + 4 + 8 + 4 + 1 + 15;

/// Tolerance on the unit-norm invariant of stored rows.
pub const NORM_TOLERANCE: f32 = 1e-3;

/// Normalize `v` to unit L2 norm in place. A zero vector is an error.
pub fn l2_normalize(v: &mut [f32]) -> Result<()> {
    let norm_sq: f64 = v.iter().map(|&x| x as f64 * x as f64).sum();
    if norm_sq <= 0.0 || !norm_sq.is_finite() {
        return Err(Error::Numeric("cannot normalize zero or non-finite vector".into()));
    }
    let inv = 1.0 / norm_sq.sqrt();
    for x in v.iter_mut() {
        *x = (*x as f64 * inv) as f32;
    }
    Ok(())
}

/// Dense row-major matrix of unit-norm vectors with row-aligned metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    dim: usize,
    rows: Vec<f32>,
    meta: Vec<ChunkMeta>,
}

impl EmbeddingStore {
    /// Build a store from raw rows, validating shape, norms, and row order.
    pub fn new(dim: usize, rows: Vec<f32>, meta: Vec<ChunkMeta>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("embedding dim must be positive".into()));
        }
        if rows.len() != dim * meta.len() {
            return Err(Error::Data(format!(
                "row buffer holds {} values, expected {} ({} rows x dim {})",
                rows.len(),
                dim * meta.len(),
                meta.len(),
                dim
            )));
        }
        let store = EmbeddingStore { dim, rows, meta };
        store.validate()?;
        Ok(store)
    }

    fn validate(&self) -> Result<()> {
        for (i, row) in self.rows.chunks_exact(self.dim).enumerate() {
            let norm_sq: f64 = row.iter().map(|&x| x as f64 * x as f64).sum();
            let norm = norm_sq.sqrt() as f32;
            if (norm - 1.0).abs() > NORM_TOLERANCE {
                return Err(Error::Data(format!(
                    "row {i} has norm {norm}, outside the unit tolerance"
                )));
            }
        }
        for w in self.meta.windows(2) {
            let order_ok = w[0].book < w[1].book
                || (w[0].book == w[1].book && w[0].position < w[1].position);
            if !order_ok {
                return Err(Error::Data(format!(
                    "metadata out of order at book {} position {}",
                    w[1].book, w[1].position
                )));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn count(&self) -> usize {
        self.meta.len()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.rows[i * self.dim..(i + 1) * self.dim]
    }

    pub fn meta(&self) -> &[ChunkMeta] {
        &self.meta
    }

    pub fn raw(&self) -> &[f32] {
        &self.rows
    }

    pub fn view(&self) -> ArrayView2<'_, f32> {
        ArrayView2::from_shape((self.count(), self.dim), &self.rows)
            .expect("store buffer matches shape by construction")
    }

    /// Replace the rows while keeping metadata (derived stores share it).
    pub fn with_rows(&self, rows: Vec<f32>) -> Result<Self> {
        EmbeddingStore::new(self.dim, rows, self.meta.clone())
    }

    /// Sidecar path convention: `<store>.meta.jsonl` next to the store file.
    pub fn sidecar_path(store_path: &Path) -> PathBuf {
        let mut os = store_path.as_os_str().to_owned();
        os.push(".meta.jsonl");
        PathBuf::from(os)
    }

    /// Write the store and its metadata sidecar.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut payload = Vec::with_capacity(self.rows.len() * 4);
        for &v in &self.rows {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        let crc = crc32fast::hash(&payload);

        let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut header = Vec::with_capacity(HEADER_LEN);
        header.extend_from_slice(&STORE_MAGIC);
        header.extend_from_slice(&STORE_VERSION.to_le_bytes());
        header.extend_from_slice(&(self.count() as u64).to_le_bytes());
        header.extend_from_slice(&(self.dim as u32).to_le_bytes());
        header.push(DTYPE_F32_LE);
        header.extend_from_slice(&[0u8; 15]);
        file.write_all(&header).map_err(|e| Error::io(path, e))?;
        file.write_all(&payload).map_err(|e| Error::io(path, e))?;
        file.write_all(&crc.to_le_bytes()).map_err(|e| Error::io(path, e))?;

        let sidecar = Self::sidecar_path(path);
        let mut lines = String::new();
        for m in &self.meta {
            lines.push_str(
                &serde_json::to_string(m).map_err(|e| Error::Data(format!("metadata encode: {e}")))?,
            );
            lines.push('\n');
        }
        fs::write(&sidecar, lines).map_err(|e| Error::io(&sidecar, e))
    }

    /// Read a store written by [`EmbeddingStore::write`], verifying magic,
    /// version, payload length, and checksum.
    pub fn read(path: &Path) -> Result<Self> {
        let mut file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut header = [0u8; HEADER_LEN];
        file.read_exact(&mut header)
            .map_err(|_| Error::format(path, FormatErrorKind::Header, "file shorter than header"))?;
        if header[0..4] != STORE_MAGIC {
            return Err(Error::format(path, FormatErrorKind::Magic, "not an embedding store"));
        }
        let version = u32::from_le_bytes(header[4..8].try_into().unwrap());
        if version != STORE_VERSION {
            return Err(Error::format(
                path,
                FormatErrorKind::Version,
                format!("version {version}"),
            ));
        }
        let count = u64::from_le_bytes(header[8..16].try_into().unwrap()) as usize;
        let dim = u32::from_le_bytes(header[16..20].try_into().unwrap()) as usize;
        let dtype = header[20];
        if dtype != DTYPE_F32_LE {
            return Err(Error::format(
                path,
                FormatErrorKind::Header,
                format!("unsupported dtype tag {dtype}"),
            ));
        }
        let payload_len = count
            .checked_mul(dim)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::format(path, FormatErrorKind::Header, "count*dim overflow"))?;
        let mut payload = vec![0u8; payload_len];
        file.read_exact(&mut payload).map_err(|_| {
            Error::format(
                path,
                FormatErrorKind::TruncatedRows,
                format!("expected {count} rows of dim {dim}"),
            )
        })?;
        let mut crc_bytes = [0u8; 4];
        file.read_exact(&mut crc_bytes)
            .map_err(|_| Error::format(path, FormatErrorKind::TruncatedRows, "missing checksum footer"))?;
        let stored_crc = u32::from_le_bytes(crc_bytes);
        let actual_crc = crc32fast::hash(&payload);
        if stored_crc != actual_crc {
            return Err(Error::format(
                path,
                FormatErrorKind::Checksum,
                format!("stored {stored_crc:#010x}, computed {actual_crc:#010x}"),
            ));
        }

        let mut rows = Vec::with_capacity(count * dim);
        for chunk in payload.chunks_exact(4) {
            rows.push(f32::from_le_bytes(chunk.try_into().unwrap()));
        }

        let sidecar = Self::sidecar_path(path);
        let raw = fs::read_to_string(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
        let mut meta = Vec::with_capacity(count);
        for (ln, line) in raw.lines().enumerate() {
            let m: ChunkMeta = serde_json::from_str(line)
                .map_err(|e| Error::Data(format!("{}:{}: {e}", sidecar.display(), ln + 1)))?;
            meta.push(m);
        }
        if meta.len() != count {
            return Err(Error::Data(format!(
                "metadata sidecar has {} records, store has {count} rows",
                meta.len()
            )));
        }
        EmbeddingStore::new(dim, rows, meta)
    }
}

/// Write a bare f32 matrix in the store's binary layout (no metadata
/// sidecar, no norm invariant). Used for centroid matrices.
pub fn write_f32_matrix(path: &Path, dim: usize, rows: &[f32]) -> Result<()> {
    if dim == 0 || rows.len() % dim != 0 {
        return Err(Error::Data(format!(
            "matrix buffer of {} values does not divide dim {dim}",
            rows.len()
        )));
    }
    let mut payload = Vec::with_capacity(rows.len() * 4);
    for &v in rows {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    let crc = crc32fast::hash(&payload);
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut header = Vec::with_capacity(HEADER_LEN);
    header.extend_from_slice(&STORE_MAGIC);
    header.extend_from_slice(&STORE_VERSION.to_le_bytes());
    header.extend_from_slice(&((rows.len() / dim) as u64).to_le_bytes());
    header.extend_from_slice(&(dim as u32).to_le_bytes());
    header.push(DTYPE_F32_LE);
    header.extend_from_slice(&[0u8; 15]);
    file.write_all(&header).map_err(|e| Error::io(path, e))?;
    file.write_all(&payload).map_err(|e| Error::io(path, e))?;
    file.write_all(&crc.to_le_bytes()).map_err(|e| Error::io(path, e))
}

/// Read a matrix written by [`write_f32_matrix`]. Returns `(dim, values)`.
pub fn read_f32_matrix(path: &Path) -> Result<(usize, Vec<f32>)> {
    let mut file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut header = [0u8; HEADER_LEN];
    file.read_exact(&mut header)
        .map_err(|_| Error::format(path, FormatErrorKind::Header, "file shorter than header"))?;
    if header[0..4] != STORE_MAGIC {
        return Err(Error::format(path, FormatErrorKind::Magic, "not a matrix file"));
    }
    let count = u64::from_le_bytes(header[8..16].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(header[16..20].try_into().unwrap()) as usize;
    let mut payload = vec![0u8; count * dim * 4];
    file.read_exact(&mut payload)
        .map_err(|_| Error::format(path, FormatErrorKind::TruncatedRows, "short payload"))?;
    let mut crc_bytes = [0u8; 4];
    file.read_exact(&mut crc_bytes)
        .map_err(|_| Error::format(path, FormatErrorKind::TruncatedRows, "missing checksum"))?;
    if u32::from_le_bytes(crc_bytes) != crc32fast::hash(&payload) {
        return Err(Error::format(path, FormatErrorKind::Checksum, "matrix payload"));
    }
    let values = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((dim, values))
}

/// A source of passage embeddings. Implementations must be deterministic:
/// identical text yields identical vectors.
pub trait EmbeddingProvider {
    fn dim(&self) -> usize;
    fn kind(&self) -> &'static str;
    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f32>>>;
}

/// Env var holding the bearer token for the remote embedding endpoint.
pub const EMBED_TOKEN_ENV: &str = "ASSOC_EMBED_TOKEN";

/// Maximum passages per remote request.
pub const REMOTE_BATCH_LIMIT: usize = 64;

#[derive(Serialize)]
struct RemoteRequest<'a> {
    texts: &'a [String],
}

#[derive(Deserialize)]
struct RemoteResponse {
    vectors: Vec<Vec<f32>>,
}

/// Transport for the remote provider, separated so retry/batching logic is
/// testable without a live endpoint.
pub trait RemoteTransport: Send + Sync {
    fn post_texts(&self, texts: &[String]) -> Result<Vec<Vec<f32>>>;
}

pub struct HttpTransport {
    endpoint: String,
    client: reqwest::blocking::Client,
    token: Option<String>,
}

impl HttpTransport {
    pub fn new(endpoint: &str) -> Self {
        HttpTransport {
            endpoint: endpoint.to_owned(),
            client: reqwest::blocking::Client::new(),
            token: std::env::var(EMBED_TOKEN_ENV).ok(),
        }
    }
}

impl RemoteTransport for HttpTransport {
    fn post_texts(&self, texts: &[String]) -> Result<Vec<Vec<f32>>> {
        let mut req = self.client.post(&self.endpoint).json(&RemoteRequest { texts });
        if let Some(token) = &self.token {
            req = req.bearer_auth(token);
        }
        let resp = req
            .send()
            .map_err(|e| Error::Data(format!("embedding endpoint: {e}")))?;
        if !resp.status().is_success() {
            return Err(Error::Data(format!(
                "embedding endpoint returned {}",
                resp.status()
            )));
        }
        let body: RemoteResponse = resp
            .json()
            .map_err(|e| Error::Data(format!("embedding endpoint body: {e}")))?;
        Ok(body.vectors)
    }
}

/// Client for an external embedding service speaking
/// `{"texts": [...]}` -> `{"vectors": [[...]]}`. Requests are capped at
/// [`REMOTE_BATCH_LIMIT`] passages and retried with exponential backoff.
pub struct RemoteProvider {
    transport: Box<dyn RemoteTransport>,
    dim: usize,
    max_retries: u32,
    backoff_ms: u64,
}

impl RemoteProvider {
    pub fn new(endpoint: &str, dim: usize) -> Self {
        RemoteProvider {
            transport: Box::new(HttpTransport::new(endpoint)),
            dim,
            max_retries: 4,
            backoff_ms: 250,
        }
    }

    pub fn with_transport(transport: Box<dyn RemoteTransport>, dim: usize, max_retries: u32) -> Self {
        RemoteProvider {
            transport,
            dim,
            max_retries,
            backoff_ms: 0,
        }
    }

    fn request_with_retry(&self, texts: &[String]) -> Result<Vec<Vec<f32>>> {
        let mut attempt = 0u32;
        loop {
            match self.transport.post_texts(texts) {
                Ok(vectors) => return Ok(vectors),
                Err(e) if attempt < self.max_retries => {
                    attempt += 1;
                    let wait = self.backoff_ms.saturating_mul(1 << (attempt - 1).min(6));
                    if wait > 0 {
                        std::thread::sleep(std::time::Duration::from_millis(wait));
                    }
                    let _ = e;
                }
                Err(e) => return Err(e),
            }
        }
    }
}

impl EmbeddingProvider for RemoteProvider {
    fn dim(&self) -> usize {
        self.dim
    }

    fn kind(&self) -> &'static str {
        "remote"
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f32>>> {
        let mut out = Vec::with_capacity(texts.len());
        for sub in texts.chunks(REMOTE_BATCH_LIMIT) {
            let vectors = self.request_with_retry(sub)?;
            if vectors.len() != sub.len() {
                return Err(Error::Data(format!(
                    "endpoint returned {} vectors for {} texts",
                    vectors.len(),
                    sub.len()
                )));
            }
            for v in &vectors {
                if v.len() != self.dim {
                    return Err(Error::Config(format!(
                        "endpoint dim {} does not match configured dim {}",
                        v.len(),
                        self.dim
                    )));
                }
            }
            out.extend(vectors);
        }
        Ok(out)
    }
}

/// Embed every chunk of a corpus in global row order and return the store.
///
/// Rows are normalized regardless of provider output. `texts_by_book` must
/// yield one `Vec<String>` per manifest book, in book-id order.
pub fn embed_corpus<I>(
    provider: &dyn EmbeddingProvider,
    meta: &[ChunkMeta],
    texts_by_book: I,
) -> Result<EmbeddingStore>
where
    I: IntoIterator<Item = Result<Vec<String>>>,
{
    let dim = provider.dim();
    let mut rows: Vec<f32> = Vec::with_capacity(meta.len() * dim);
    for book_texts in texts_by_book {
        let texts = book_texts?;
        let vectors = provider.embed_batch(&texts)?;
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
    }
    EmbeddingStore::new(dim, rows, meta.to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn meta_row(book: u32, position: u32, n_in_book: u32) -> ChunkMeta {
        ChunkMeta {
            book,
            position,
            token_start: position as u64 * 35,
            token_end: position as u64 * 35 + 50,
            token_count: 50,
            normalized_position: position as f32 / (n_in_book.saturating_sub(1).max(1)) as f32,
        }
    }

    fn random_store(seed: u64, count: usize, dim: usize) -> EmbeddingStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows = Vec::with_capacity(count * dim);
        for _ in 0..count {
            let mut v: Vec<f32> = (0..dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
            l2_normalize(&mut v).unwrap();
            rows.extend_from_slice(&v);
        }
        let meta: Vec<ChunkMeta> = (0..count as u32).map(|i| meta_row(0, i, count as u32)).collect();
        EmbeddingStore::new(dim, rows, meta).unwrap()
    }

    #[test]
    fn l2_normalize_three_four_five() {
        let mut v = vec![3.0f32, 4.0];
        l2_normalize(&mut v).unwrap();
        assert!((v[0] - 0.6).abs() < 1e-6);
        assert!((v[1] - 0.8).abs() < 1e-6);
    }

    #[test]
    fn l2_normalize_idempotent_on_unit() {
        let mut v = vec![0.6f32, 0.8];
        l2_normalize(&mut v).unwrap();
        assert!((v[0] - 0.6).abs() < 1e-6 && (v[1] - 0.8).abs() < 1e-6);
    }

    #[test]
    fn l2_normalize_zero_is_error() {
        let mut v = vec![0.0f32, 0.0];
        assert!(l2_normalize(&mut v).is_err());
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        // Several shapes, including dim 1 and a single row.
        for (seed, count, dim) in [(1u64, 17usize, 8usize), (2, 1, 4), (3, 5, 1), (4, 64, 33)] {
            let store = random_store(seed, count, dim);
            let path = dir.path().join(format!("s{seed}.pamc"));
            store.write(&path).unwrap();
            let back = EmbeddingStore::read(&path).unwrap();
            assert_eq!(store.raw(), back.raw(), "payload differs for seed {seed}");
            assert_eq!(store.meta(), back.meta(), "metadata differs for seed {seed}");
        }
    }

    #[test]
    fn read_rejects_wrong_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.pamc");
        let store = random_store(9, 3, 4);
        store.write(&path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[0] = b'X';
        fs::write(&path, bytes).unwrap();
        let err = EmbeddingStore::read(&path).unwrap_err();
        assert_eq!(err.format_kind(), Some(FormatErrorKind::Magic));
    }

    #[test]
    fn read_rejects_truncated_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trunc.pamc");
        let store = random_store(10, 6, 8);
        store.write(&path).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 40]).unwrap();
        let err = EmbeddingStore::read(&path).unwrap_err();
        assert_eq!(err.format_kind(), Some(FormatErrorKind::TruncatedRows));
    }

    #[test]
    fn read_rejects_corrupt_payload() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("crc.pamc");
        let store = random_store(11, 6, 8);
        store.write(&path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        let mid = HEADER_LEN + 12;
        bytes[mid] ^= 0x40;
        fs::write(&path, bytes).unwrap();
        let err = EmbeddingStore::read(&path).unwrap_err();
        // Either the checksum catches it or the perturbed row fails the norm
        // invariant; the checksum must catch it first.
        assert_eq!(err.format_kind(), Some(FormatErrorKind::Checksum));
    }

    #[test]
    fn store_rejects_out_of_order_metadata() {
        let dim = 2;
        let mut rows = Vec::new();
        for _ in 0..2 {
            rows.extend_from_slice(&[1.0f32, 0.0]);
        }
        let meta = vec![meta_row(1, 0, 1), meta_row(0, 0, 1)];
        assert!(EmbeddingStore::new(dim, rows, meta).is_err());
    }

    #[test]
    fn store_rejects_non_unit_rows() {
        let rows = vec![0.5f32, 0.0];
        let meta = vec![meta_row(0, 0, 1)];
        assert!(EmbeddingStore::new(2, rows, meta).is_err());
    }

    struct FlakyTransport {
        dim: usize,
        failures_left: std::sync::Mutex<u32>,
        calls: std::sync::Arc<std::sync::Mutex<Vec<usize>>>,
    }

    impl RemoteTransport for FlakyTransport {
        fn post_texts(&self, texts: &[String]) -> Result<Vec<Vec<f32>>> {
            self.calls.lock().unwrap().push(texts.len());
            let mut left = self.failures_left.lock().unwrap();
            if *left > 0 {
                *left -= 1;
                return Err(Error::Data("transient failure".into()));
            }
            Ok(texts
                .iter()
                .map(|t| {
                    let mut v = vec![0.0f32; self.dim];
                    v[t.len() % self.dim] = 1.0;
                    v
                })
                .collect())
        }
    }

    #[test]
    fn remote_provider_batches_and_retries() {
        let calls = std::sync::Arc::new(std::sync::Mutex::new(Vec::new()));
        let transport = FlakyTransport {
            dim: 4,
            failures_left: std::sync::Mutex::new(2),
            calls: calls.clone(),
        };
        let provider = RemoteProvider::with_transport(Box::new(transport), 4, 3);
        let texts: Vec<String> = (0..130).map(|i| format!("passage {i}")).collect();
        let vectors = provider.embed_batch(&texts).unwrap();
        assert_eq!(vectors.len(), 130);
        // 130 texts -> batches of 64, 64, 2; the first batch is retried twice.
        let calls = calls.lock().unwrap();
        assert_eq!(calls.iter().filter(|&&n| n == 64).count(), 4);
        assert_eq!(*calls.last().unwrap(), 2);
    }

    #[test]
    fn remote_provider_exhausts_retries() {
        let transport = FlakyTransport {
            dim: 4,
            failures_left: std::sync::Mutex::new(100),
            calls: std::sync::Arc::new(std::sync::Mutex::new(Vec::new())),
        };
        let provider = RemoteProvider::with_transport(Box::new(transport), 4, 2);
        assert!(provider.embed_batch(&["x".to_owned()]).is_err());
    }

    struct WrongDimTransport;

    impl RemoteTransport for WrongDimTransport {
        fn post_texts(&self, texts: &[String]) -> Result<Vec<Vec<f32>>> {
            Ok(texts.iter().map(|_| vec![1.0f32; 3]).collect())
        }
    }

    #[test]
    fn remote_provider_rejects_wrong_dim() {
        let provider = RemoteProvider::with_transport(Box::new(WrongDimTransport), 8, 0);
        let err = provider.embed_batch(&["x".to_owned()]).unwrap_err();
        assert_eq!(err.exit_code(), 1);
    }
}
