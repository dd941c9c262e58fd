//! Within-book temporal co-occurrence pairs as an implicit index space.
//!
//! Pairs are never materialized: a single global index addresses every
//! unordered within-window pair across the corpus, and epochs walk a seeded
//! O(1)-memory permutation of that index range.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::splitmix64;

pub const DEFAULT_WINDOW: u64 = 15;
pub const DEFAULT_BATCH_SIZE: usize = 512;

/// Unordered within-window pairs in a book of `n` chunks.
///
/// Every chunk pairs with the chunks up to `w` positions away, so for
/// `n > w + 1` the count is `n*w - w*(w+1)/2`; smaller books contain all
/// `n*(n-1)/2` pairs.
pub fn pair_count(n: u64, w: u64) -> u64 {
    assert!(w >= 1, "window must be >= 1");
    if n < 2 {
        0
    } else if n <= w + 1 {
        n * (n - 1) / 2
    } else {
        n * w - w * (w + 1) / 2
    }
}

/// Implicit enumeration of all within-book co-occurrence pairs, addressable
/// by one global index in `[0, total_pairs)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairSpace {
    window: u64,
    chunk_counts: Vec<u64>,
    row_offsets: Vec<u64>,
    pair_prefix: Vec<u64>,
}

impl PairSpace {
    pub fn new(chunk_counts: &[u64], window: u64) -> Result<Self> {
        if window < 1 {
            return Err(Error::Config("pair window must be >= 1".into()));
        }
        let mut row_offsets = Vec::with_capacity(chunk_counts.len());
        let mut pair_prefix = Vec::with_capacity(chunk_counts.len() + 1);
        pair_prefix.push(0);
        let mut rows = 0u64;
        let mut pairs = 0u64;
        for &n in chunk_counts {
            row_offsets.push(rows);
            rows += n;
            pairs += pair_count(n, window);
            pair_prefix.push(pairs);
        }
        Ok(PairSpace {
            window,
            chunk_counts: chunk_counts.to_vec(),
            row_offsets,
            pair_prefix,
        })
    }

    pub fn window(&self) -> u64 {
        self.window
    }

    pub fn total_pairs(&self) -> u64 {
        *self.pair_prefix.last().unwrap_or(&0)
    }

    pub fn total_rows(&self) -> u64 {
        self.row_offsets.last().copied().unwrap_or(0)
            + self.chunk_counts.last().copied().unwrap_or(0)
    }

    pub fn n_books(&self) -> usize {
        self.chunk_counts.len()
    }

    pub fn book_pair_count(&self, book: usize) -> u64 {
        self.pair_prefix[book + 1] - self.pair_prefix[book]
    }

    /// Local pairs with left index `< i`, in closed form. Position `i` has
    /// `min(w, n-1-i)` pairs ahead of it.
    fn local_prefix(n: u64, w: u64, i: u64) -> u64 {
        let full = n.saturating_sub(w + 1); // positions with a full window ahead
        if i <= full {
            i * w
        } else {
            let tail = i - full;
            // Sum of (n-1-t) for t in [full, i).
            full * w + tail * (n - 1) - (full * tail + tail * (tail - 1) / 2)
        }
    }

    fn local_pair_at(n: u64, w: u64, local: u64) -> (u64, u64) {
        // Binary search for the left index i with prefix(i) <= local < prefix(i+1).
        let mut lo = 0u64;
        let mut hi = n - 1;
        while lo < hi {
            let mid = (lo + hi + 1) / 2;
            if Self::local_prefix(n, w, mid) <= local {
                lo = mid;
            } else {
                hi = mid - 1;
            }
        }
        let i = lo;
        let j = i + 1 + (local - Self::local_prefix(n, w, i));
        (i, j)
    }

    /// Resolve a global pair index to global chunk rows `(i, j)`, `i < j`.
    pub fn pair_at(&self, global: u64) -> Result<(u64, u64)> {
        if global >= self.total_pairs() {
            return Err(Error::Data(format!(
                "pair index {global} out of range (total {})",
                self.total_pairs()
            )));
        }
        // Last book whose prefix is <= global.
        let book = match self.pair_prefix.binary_search(&global) {
            Ok(idx) => {
                // Exact prefix hit: first non-empty book at or after idx.
                let mut b = idx;
                while self.pair_prefix[b + 1] == self.pair_prefix[b] {
                    b += 1;
                }
                b
            }
            Err(idx) => idx - 1,
        };
        let local = global - self.pair_prefix[book];
        let n = self.chunk_counts[book];
        let (i, j) = Self::local_pair_at(n, self.window, local);
        debug_assert!(j - i <= self.window && j < n);
        Ok((self.row_offsets[book] + i, self.row_offsets[book] + j))
    }

    /// Inverse of [`PairSpace::pair_at`] for valid within-window pairs.
    pub fn index_of(&self, row_i: u64, row_j: u64) -> Option<u64> {
        let (a, b) = if row_i < row_j { (row_i, row_j) } else { (row_j, row_i) };
        let book = match self.row_offsets.binary_search(&a) {
            Ok(idx) => {
                // Skip empty books sharing the same offset.
                let mut k = idx;
                while k + 1 < self.chunk_counts.len()
                    && self.row_offsets[k + 1] == self.row_offsets[k]
                {
                    k += 1;
                }
                k
            }
            Err(idx) => idx - 1,
        };
        let n = self.chunk_counts[book];
        let off = self.row_offsets[book];
        let (i, j) = (a - off, b - off);
        if i == j || j >= n || j - i > self.window {
            return None;
        }
        Some(self.pair_prefix[book] + Self::local_prefix(n, self.window, i) + (j - i - 1))
    }
}

/// Seeded bijection on `[0, total)` built from a 4-round Feistel network
/// over the enclosing power-of-two domain, with cycle-walking back into
/// range. O(1) memory regardless of `total`.
#[derive(Debug, Clone)]
pub struct IndexPermutation {
    total: u64,
    half_bits: u32,
    keys: [u64; 4],
}

impl IndexPermutation {
    pub fn new(total: u64, seed: u64) -> Self {
        assert!(total > 0, "permutation over empty range");
        // Even bit budget covering total, at least 2 bits.
        let bits = (64 - (total - 1).leading_zeros()).max(1);
        let half_bits = bits.div_ceil(2).max(1);
        let mut keys = [0u64; 4];
        let mut s = seed;
        for k in keys.iter_mut() {
            s = splitmix64(s ^ 0x6a09_e667_f3bc_c908);
            *k = s;
        }
        IndexPermutation {
            total,
            half_bits,
            keys,
        }
    }

    fn feistel(&self, x: u64) -> u64 {
        let mask = (1u64 << self.half_bits) - 1;
        let mut left = (x >> self.half_bits) & mask;
        let mut right = x & mask;
        for &key in &self.keys {
            let next = left ^ (splitmix64(right ^ key) & mask);
            left = right;
            right = next;
        }
        (left << self.half_bits) | right
    }

    /// Image of `x` under the permutation; `x` must be below `total`.
    pub fn apply(&self, x: u64) -> u64 {
        debug_assert!(x < self.total);
        let mut y = self.feistel(x);
        while y >= self.total {
            y = self.feistel(y);
        }
        y
    }
}

/// One epoch of shuffled pair batches: a seeded permutation of all pair
/// indices, cut into `batch_size` pairs per batch; the final ragged batch
/// is dropped.
pub struct EpochSampler<'a> {
    space: &'a PairSpace,
    perm: IndexPermutation,
    batch_size: usize,
    n_batches: u64,
    next_batch: u64,
}

impl<'a> EpochSampler<'a> {
    pub fn n_batches(&self) -> u64 {
        self.n_batches
    }
}

impl<'a> Iterator for EpochSampler<'a> {
    type Item = Vec<(u64, u64)>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.next_batch >= self.n_batches {
            return None;
        }
        let start = self.next_batch * self.batch_size as u64;
        let mut batch = Vec::with_capacity(self.batch_size);
        for t in 0..self.batch_size as u64 {
            let g = self.perm.apply(start + t);
            let rows = self
                .space
                .pair_at(g)
                .expect("permutation stays within pair range");
            batch.push(rows);
        }
        self.next_batch += 1;
        Some(batch)
    }
}

/// Stream one epoch of row-pair batches over `space`.
pub fn sample_epoch(space: &PairSpace, batch_size: usize, seed: u64) -> Result<EpochSampler<'_>> {
    if batch_size < 1 {
        return Err(Error::Config("batch_size must be >= 1".into()));
    }
    let total = space.total_pairs();
    if total < batch_size as u64 {
        return Err(Error::Config(format!(
            "cannot sample batches of {batch_size} from {total} pairs"
        )));
    }
    Ok(EpochSampler {
        space,
        perm: IndexPermutation::new(total, seed),
        batch_size,
        n_batches: total / batch_size as u64,
        next_batch: 0,
    })
}

/// Brute-force pair enumeration for one book; test oracle for the closed
/// form and the bijection.
pub fn enumerate_pairs(n: u64, w: u64) -> Vec<(u64, u64)> {
    let mut out = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n.min(i + w + 1) {
            out.push((i, j));
        }
    }
    out
}
