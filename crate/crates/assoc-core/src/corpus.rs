//! Text ingestion and deterministic overlapping-window chunking.
//!
//! Files are ingested in sorted file-name order; each book is tokenized and
//! cut into fixed-length token windows with a fixed overlap. Books that yield
//! zero chunks are excluded from the corpus but recorded in the manifest.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_CHUNK_LEN: usize = 50;
pub const DEFAULT_OVERLAP: usize = 15;
/// A final partial chunk is kept only if it has at least this many tokens.
pub const TAIL_MIN_TOKENS: usize = 10;

pub const MANIFEST_VERSION: u32 = 1;

/// Per-passage metadata, row-aligned with the embedding store.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChunkMeta {
    pub book: u32,
    pub position: u32,
    pub token_start: u64,
    pub token_end: u64,
    pub token_count: u32,
    pub normalized_position: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BookEntry {
    pub id: u32,
    /// File stem; the ingestion sort key.
    pub source_name: String,
    /// Full file name, kept so later stages can re-read the source.
    pub file_name: String,
    pub n_chunks: u64,
    pub n_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExcludedFile {
    pub source_name: String,
    pub reason: String,
}

/// Deterministic description of an ingested corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub version: u32,
    pub chunk_len: u32,
    pub overlap: u32,
    pub books: Vec<BookEntry>,
    pub excluded: Vec<ExcludedFile>,
    pub total_chunks: u64,
}

impl CorpusManifest {
    pub fn chunk_counts(&self) -> Vec<u64> {
        self.books.iter().map(|b| b.n_chunks).collect()
    }

    /// Row offset of each book's first chunk in global chunk order.
    pub fn book_row_offsets(&self) -> Vec<u64> {
        let mut offsets = Vec::with_capacity(self.books.len());
        let mut acc = 0u64;
        for b in &self.books {
            offsets.push(acc);
            acc += b.n_chunks;
        }
        offsets
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Data(format!("manifest encode: {e}")))?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&raw).map_err(|e| Error::Data(format!("manifest parse: {e}")))
    }
}

/// Window geometry for chunking. `overlap` must be smaller than `chunk_len`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkParams {
    pub chunk_len: usize,
    pub overlap: usize,
}

impl Default for ChunkParams {
    fn default() -> Self {
        ChunkParams {
            chunk_len: DEFAULT_CHUNK_LEN,
            overlap: DEFAULT_OVERLAP,
        }
    }
}

impl ChunkParams {
    pub fn validate(&self) -> Result<()> {
        if self.chunk_len == 0 || self.overlap >= self.chunk_len {
            return Err(Error::Config(format!(
                "invalid chunk geometry: chunk_len={} overlap={} (need 0 <= overlap < chunk_len)",
                self.chunk_len, self.overlap
            )));
        }
        Ok(())
    }

    pub fn stride(&self) -> usize {
        self.chunk_len - self.overlap
    }
}

/// Byte spans of tokens in `text`: maximal runs of word characters
/// (alphanumeric or underscore) or single non-whitespace punctuation marks.
pub fn token_spans(text: &str) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    let mut word_start: Option<usize> = None;
    for (i, ch) in text.char_indices() {
        if ch.is_alphanumeric() || ch == '_' {
            if word_start.is_none() {
                word_start = Some(i);
            }
        } else {
            if let Some(start) = word_start.take() {
                spans.push((start, i));
            }
            if !ch.is_whitespace() {
                spans.push((i, i + ch.len_utf8()));
            }
        }
    }
    if let Some(start) = word_start {
        spans.push((start, text.len()));
    }
    spans
}

/// Tokenize into string slices; whitespace never appears in the output.
pub fn tokenize(text: &str) -> Vec<&str> {
    token_spans(text)
        .into_iter()
        .map(|(a, b)| &text[a..b])
        .collect()
}

/// Half-open token ranges of the chunk windows over `n_tokens` tokens.
///
/// Windows start every `stride = chunk_len - overlap` tokens. A final tail
/// window shorter than `chunk_len` is kept only if it spans at least
/// [`TAIL_MIN_TOKENS`] tokens.
pub fn chunk_windows(n_tokens: usize, params: ChunkParams) -> Result<Vec<(usize, usize)>> {
    params.validate()?;
    let stride = params.stride();
    let mut windows = Vec::new();
    let mut start = 0usize;
    loop {
        let remaining = n_tokens.saturating_sub(start);
        if remaining >= params.chunk_len {
            windows.push((start, start + params.chunk_len));
        } else {
            if remaining >= TAIL_MIN_TOKENS {
                windows.push((start, start + remaining));
            }
            break;
        }
        if start + params.chunk_len == n_tokens {
            break; // exact fit: no tail
        }
        start += stride;
    }
    Ok(windows)
}

/// Chunk a tokenized book into positional metadata records.
pub fn chunk_text(n_tokens: usize, book: u32, params: ChunkParams) -> Result<Vec<ChunkMeta>> {
    let windows = chunk_windows(n_tokens, params)?;
    let n_chunks = windows.len();
    let denom = (n_chunks.saturating_sub(1)).max(1) as f32;
    Ok(windows
        .into_iter()
        .enumerate()
        .map(|(pos, (a, b))| ChunkMeta {
            book,
            position: pos as u32,
            token_start: a as u64,
            token_end: b as u64,
            token_count: (b - a) as u32,
            normalized_position: pos as f32 / denom,
        })
        .collect())
}

/// Strip leading/trailing boilerplate delimited by `*** START ...` /
/// `*** END ...` marker lines. Returns the original text when no markers
/// are present. Off by default in the pipeline.
pub fn strip_boilerplate(text: &str) -> &str {
    let mut body_start = 0usize;
    let mut body_end = text.len();
    for line in text.lines() {
        let off = line.as_ptr() as usize - text.as_ptr() as usize;
        if line.contains("*** START") || line.contains("***START") {
            body_start = off + line.len();
        }
        if line.contains("*** END") || line.contains("***END") {
            body_end = off;
            break;
        }
    }
    if body_start < body_end {
        &text[body_start..body_end]
    } else {
        text
    }
}

/// Result of ingesting a directory: manifest plus row-ordered chunk metadata.
#[derive(Debug, Clone)]
pub struct CorpusIngest {
    pub manifest: CorpusManifest,
    pub chunks: Vec<ChunkMeta>,
}

fn read_book_text(path: &Path, strip: bool) -> std::io::Result<String> {
    let bytes = fs::read(path)?;
    let text = String::from_utf8_lossy(&bytes).into_owned();
    Ok(if strip {
        strip_boilerplate(&text).to_owned()
    } else {
        text
    })
}

/// Ingest every regular file in `dir` (sorted by file name) into a corpus.
///
/// Unreadable files and books that yield zero chunks are excluded with a
/// reason; an empty or fully-excluded directory is fatal.
pub fn ingest_directory(dir: &Path, params: ChunkParams, strip: bool) -> Result<CorpusIngest> {
    params.validate()?;
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files: Vec<(String, String, std::path::PathBuf)> = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if path.is_file() {
            let stem = path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| path.to_string_lossy().into_owned());
            let file_name = path
                .file_name()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| stem.clone());
            files.push((stem, file_name, path));
        }
    }
    if files.is_empty() {
        return Err(Error::Data(format!(
            "no input files found in {}",
            dir.display()
        )));
    }
    files.sort_by(|a, b| a.0.cmp(&b.0));

    // Per-book work is independent; order is restored by the indexed collect.
    type BookOutcome = std::result::Result<(u64, Vec<ChunkMeta>), String>;
    let tokenized: Vec<(String, String, BookOutcome)> = files
        .par_iter()
        .map(|(stem, file_name, path)| {
            let outcome = match read_book_text(path, strip) {
                Ok(text) => {
                    let n_tokens = token_spans(&text).len() as u64;
                    match chunk_text(n_tokens as usize, 0, params) {
                        Ok(chunks) => Ok((n_tokens, chunks)),
                        Err(e) => Err(e.to_string()),
                    }
                }
                Err(e) => Err(format!("unreadable: {e}")),
            };
            (stem.clone(), file_name.clone(), outcome)
        })
        .collect();

    let mut books = Vec::new();
    let mut excluded = Vec::new();
    let mut chunks = Vec::new();
    for (stem, file_name, outcome) in tokenized {
        match outcome {
            Ok((n_tokens, book_chunks)) if !book_chunks.is_empty() => {
                let id = books.len() as u32;
                books.push(BookEntry {
                    id,
                    source_name: stem,
                    file_name,
                    n_chunks: book_chunks.len() as u64,
                    n_tokens,
                });
                chunks.extend(book_chunks.into_iter().map(|mut c| {
                    c.book = id;
                    c
                }));
            }
            Ok(_) => excluded.push(ExcludedFile {
                source_name: stem,
                reason: "yields zero chunks".to_owned(),
            }),
            Err(reason) => excluded.push(ExcludedFile {
                source_name: stem,
                reason,
            }),
        }
    }

    let total_chunks = chunks.len() as u64;
    Ok(CorpusIngest {
        manifest: CorpusManifest {
            version: MANIFEST_VERSION,
            chunk_len: params.chunk_len as u32,
            overlap: params.overlap as u32,
            books,
            excluded,
            total_chunks,
        },
        chunks,
    })
}

/// Chunk texts of one already-ingested book, for the embedding stage.
pub fn book_chunk_texts(path: &Path, params: ChunkParams, strip: bool) -> Result<Vec<String>> {
    let text = read_book_text(path, strip).map_err(|e| Error::io(path, e))?;
    let spans = token_spans(&text);
    let windows = chunk_windows(spans.len(), params)?;
    Ok(windows
        .into_iter()
        .map(|(a, b)| text[spans[a].0..spans[b - 1].1].to_owned())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> ChunkParams {
        ChunkParams::default()
    }

    #[test]
    fn tokenize_words_and_punctuation() {
        assert_eq!(tokenize("It was dark."), vec!["It", "was", "dark", "."]);
        assert_eq!(tokenize(""), Vec::<&str>::new());
    }

    #[test]
    fn tokenize_apostrophe_golden() {
        // Enumerated by hand from the tokenizer rule: word runs split at the
        // apostrophe, which is its own single-character token.
        assert_eq!(tokenize("don't stop"), vec!["don", "'", "t", "stop"]);
    }

    #[test]
    fn tokenize_never_emits_whitespace() {
        for tok in tokenize("a  b\t\nc -- d") {
            assert!(!tok.chars().any(char::is_whitespace), "token {tok:?}");
        }
    }

    #[test]
    fn chunk_windows_exact_fit() {
        assert_eq!(chunk_windows(50, params()).unwrap(), vec![(0, 50)]);
    }

    #[test]
    fn chunk_windows_stride_35() {
        // 120 tokens: windows at 0, 35, 70; 70 + 50 = 120 exactly.
        assert_eq!(
            chunk_windows(120, params()).unwrap(),
            vec![(0, 50), (35, 85), (70, 120)]
        );
    }

    #[test]
    fn chunk_windows_tail_rule() {
        assert_eq!(chunk_windows(9, params()).unwrap(), Vec::<(usize, usize)>::new());
        assert_eq!(chunk_windows(10, params()).unwrap(), vec![(0, 10)]);
        // 94 tokens: full windows at 0 and 35, then a 24-token tail.
        assert_eq!(
            chunk_windows(94, params()).unwrap(),
            vec![(0, 50), (35, 85), (70, 94)]
        );
        // A tail shorter than the minimum is dropped (7 tokens remain after
        // the first full window with a 45/5 geometry).
        let narrow = ChunkParams { chunk_len: 45, overlap: 5 };
        assert_eq!(chunk_windows(47, narrow).unwrap(), vec![(0, 45)]);
    }

    #[test]
    fn chunk_windows_invalid_geometry() {
        let bad = ChunkParams {
            chunk_len: 10,
            overlap: 10,
        };
        assert!(chunk_windows(100, bad).is_err());
    }

    #[test]
    fn coverage_and_multiplicity() {
        // Every token below the last window's end is in one or two windows.
        for n in [50usize, 85, 120, 200, 1000, 37, 64] {
            let windows = chunk_windows(n, params()).unwrap();
            if windows.is_empty() {
                continue;
            }
            let covered_end = windows.last().unwrap().1;
            let mut counts = vec![0u32; covered_end];
            for (a, b) in &windows {
                for c in counts.iter_mut().take(*b).skip(*a) {
                    *c += 1;
                }
            }
            assert!(
                counts.iter().all(|&c| c >= 1 && c <= 2),
                "n={n}: token multiplicity out of range"
            );
        }
    }

    #[test]
    fn normalized_position_endpoints() {
        let chunks = chunk_text(500, 3, params()).unwrap();
        assert!(chunks.len() >= 2);
        assert_eq!(chunks.first().unwrap().normalized_position, 0.0);
        assert_eq!(chunks.last().unwrap().normalized_position, 1.0);
        let single = chunk_text(50, 0, params()).unwrap();
        assert_eq!(single[0].normalized_position, 0.0);
    }

    #[test]
    fn ingest_two_files() {
        let dir = tempfile::tempdir().unwrap();
        let fifty = vec!["tok"; 50].join(" ");
        let one_twenty = vec!["tok"; 120].join(" ");
        fs::write(dir.path().join("a.txt"), &fifty).unwrap();
        fs::write(dir.path().join("b.txt"), &one_twenty).unwrap();
        let ingest = ingest_directory(dir.path(), params(), false).unwrap();
        assert_eq!(ingest.manifest.books.len(), 2);
        assert_eq!(ingest.manifest.chunk_counts(), vec![1, 3]);
        assert_eq!(ingest.manifest.total_chunks, 4);
        assert_eq!(ingest.chunks.len(), 4);
    }

    #[test]
    fn ingest_excludes_empty_file() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("empty.txt"), "").unwrap();
        let ingest = ingest_directory(dir.path(), params(), false).unwrap();
        assert_eq!(ingest.manifest.books.len(), 0);
        assert_eq!(ingest.manifest.excluded.len(), 1);
    }

    #[test]
    fn ingest_empty_dir_is_fatal() {
        let dir = tempfile::tempdir().unwrap();
        assert!(ingest_directory(dir.path(), params(), false).is_err());
    }

    #[test]
    fn ingest_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        for (name, len) in [("x", 200usize), ("m", 75), ("a", 500)] {
            let text = (0..len).map(|i| format!("w{i}")).collect::<Vec<_>>().join(" ");
            fs::write(dir.path().join(format!("{name}.txt")), text).unwrap();
        }
        let one = ingest_directory(dir.path(), params(), false).unwrap();
        let two = ingest_directory(dir.path(), params(), false).unwrap();
        assert_eq!(one.manifest, two.manifest);
        assert_eq!(one.chunks, two.chunks);
        // Ingestion order is sorted file-name order.
        let names: Vec<&str> = one.manifest.books.iter().map(|b| b.source_name.as_str()).collect();
        assert_eq!(names, vec!["a", "m", "x"]);
    }

    #[test]
    fn book_chunk_texts_align_with_windows() {
        let dir = tempfile::tempdir().unwrap();
        let text = (0..120).map(|i| format!("w{i}")).collect::<Vec<_>>().join(" ");
        let path = dir.path().join("b.txt");
        fs::write(&path, &text).unwrap();
        let texts = book_chunk_texts(&path, params(), false).unwrap();
        assert_eq!(texts.len(), 3);
        assert!(texts[0].starts_with("w0 "));
        assert!(texts[1].starts_with("w35 "));
        assert!(texts[2].ends_with("w119"));
    }

    #[test]
    fn strip_boilerplate_markers() {
        let text = "junk header\n*** START OF THE BOOK ***\nbody text here\n*** END OF THE BOOK ***\njunk footer\n";
        let body = strip_boilerplate(text);
        assert!(body.contains("body text here"));
        assert!(!body.contains("junk header"));
        assert!(!body.contains("junk footer"));
        assert_eq!(strip_boilerplate("plain text"), "plain text");
    }
}
