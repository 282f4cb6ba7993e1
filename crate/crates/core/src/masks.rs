//! Block-granular attention patterns.
//!
//! A [`BlockMask`] decides, per `(query block, key block)` tile, whether that
//! tile's scores are computed. Tokens in a ragged final block inherit the
//! block's decision. Baselines here are bidirectional: no causal constraint.

use std::ops::Range;

use crate::error::{Error, Result};
use crate::numerics::{Matrix, MASKED};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockMask {
    seq_len: usize,
    block_size: usize,
    prefill_len: usize,
    n_blocks: usize,
    keep: Vec<bool>,
}

fn check_geometry(seq_len: usize, block_size: usize, prefill_len: usize) -> Result<()> {
    if block_size == 0 {
        return Err(Error::InvalidBlockSize);
    }
    if seq_len == 0 {
        return Err(Error::InvalidConfig(
            "sequence length must be at least 1".into(),
        ));
    }
    if prefill_len > seq_len {
        return Err(Error::InvalidConfig(format!(
            "prefill length {prefill_len} exceeds sequence length {seq_len}"
        )));
    }
    Ok(())
}

impl BlockMask {
    /// Wraps a row-major keep grid of `n × n` tiles, `n = ⌈seq_len / block_size⌉`.
    pub fn from_keep(
        seq_len: usize,
        block_size: usize,
        prefill_len: usize,
        keep: Vec<bool>,
    ) -> Result<Self> {
        check_geometry(seq_len, block_size, prefill_len)?;
        let n_blocks = seq_len.div_ceil(block_size);
        if keep.len() != n_blocks * n_blocks {
            return Err(Error::ShapeMismatch(format!(
                "keep grid has {} cells, expected {n_blocks}x{n_blocks}",
                keep.len()
            )));
        }
        for qb in 0..n_blocks {
            if !keep[qb * n_blocks..(qb + 1) * n_blocks].iter().any(|&k| k) {
                return Err(Error::FullyMaskedRow { row: qb });
            }
        }
        Ok(Self {
            seq_len,
            block_size,
            prefill_len,
            n_blocks,
            keep,
        })
    }

    pub fn from_fn(
        seq_len: usize,
        block_size: usize,
        prefill_len: usize,
        mut keep: impl FnMut(usize, usize) -> bool,
    ) -> Result<Self> {
        check_geometry(seq_len, block_size, prefill_len)?;
        let n = seq_len.div_ceil(block_size);
        let grid = (0..n * n).map(|i| keep(i / n, i % n)).collect();
        Self::from_keep(seq_len, block_size, prefill_len, grid)
    }

    #[inline]
    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    #[inline]
    pub fn block_size(&self) -> usize {
        self.block_size
    }

    #[inline]
    pub fn prefill_len(&self) -> usize {
        self.prefill_len
    }

    #[inline]
    pub fn n_query_blocks(&self) -> usize {
        self.n_blocks
    }

    #[inline]
    pub fn n_key_blocks(&self) -> usize {
        self.n_blocks
    }

    #[inline]
    pub fn is_kept(&self, query_block: usize, key_block: usize) -> bool {
        self.keep[query_block * self.n_blocks + key_block]
    }

    pub fn keep_grid(&self) -> &[bool] {
        &self.keep
    }

    pub fn row(&self, query_block: usize) -> &[bool] {
        &self.keep[query_block * self.n_blocks..(query_block + 1) * self.n_blocks]
    }

    /// Kept key-block indices of one query-block row, ascending.
    pub fn kept_blocks(&self, query_block: usize) -> Vec<usize> {
        self.row(query_block)
            .iter()
            .enumerate()
            .filter_map(|(j, &k)| k.then_some(j))
            .collect()
    }

    /// Token range covered by block `b` (same for query and key axes).
    #[inline]
    pub fn block_range(&self, b: usize) -> Range<usize> {
        let start = b * self.block_size;
        start..(start + self.block_size).min(self.seq_len)
    }

    pub fn kept_count(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }

    /// Kept tiles over total tiles.
    pub fn density(&self) -> f64 {
        self.kept_count() as f64 / self.keep.len() as f64
    }

    /// Number of `(query, key)` token pairs inside kept tiles.
    pub fn kept_pairs(&self) -> usize {
        let mut pairs = 0;
        for qb in 0..self.n_blocks {
            let rows = self.block_range(qb).len();
            for kb in 0..self.n_blocks {
                if self.is_kept(qb, kb) {
                    pairs += rows * self.block_range(kb).len();
                }
            }
        }
        pairs
    }

    /// Expands to an `l × l` additive bias: 0 inside kept tiles, [`MASKED`] elsewhere.
    pub fn to_dense_bias(&self) -> Matrix {
        let bs = self.block_size;
        Matrix::from_fn(self.seq_len, self.seq_len, |i, j| {
            if self.is_kept(i / bs, j / bs) {
                0.0
            } else {
                MASKED
            }
        })
    }

    /// One line per query block, `0`/`1` per key block, comma separated.
    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(self.keep.len() * 2);
        for qb in 0..self.n_blocks {
            for (j, &k) in self.row(qb).iter().enumerate() {
                if j > 0 {
                    out.push(',');
                }
                out.push(if k { '1' } else { '0' });
            }
            out.push('\n');
        }
        out
    }

    /// Parses the grid written by [`BlockMask::to_csv`].
    pub fn from_csv(
        text: &str,
        seq_len: usize,
        block_size: usize,
        prefill_len: usize,
    ) -> Result<Self> {
        let mut keep = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            for cell in line.split(',') {
                keep.push(match cell.trim() {
                    "1" => true,
                    "0" => false,
                    other => {
                        return Err(Error::Parse(format!(
                            "line {}: bad mask cell {other:?}",
                            ln + 1
                        )))
                    }
                });
            }
        }
        Self::from_keep(seq_len, block_size, prefill_len, keep)
    }
}

/// Every tile kept.
pub fn full_mask(seq_len: usize, block_size: usize, prefill_len: usize) -> Result<BlockMask> {
    BlockMask::from_fn(seq_len, block_size, prefill_len, |_, _| true)
}

/// Smallest `|q - k|` between two token ranges.
fn interval_gap(a: &Range<usize>, b: &Range<usize>) -> usize {
    if a.end <= b.start {
        b.start - (a.end - 1)
    } else if b.end <= a.start {
        a.start - (b.end - 1)
    } else {
        0
    }
}

/// Keeps tile `(i, j)` iff some pair in it satisfies `|q - k| < window_size`.
pub fn sliding_window_mask(
    seq_len: usize,
    block_size: usize,
    prefill_len: usize,
    window_size: usize,
) -> Result<BlockMask> {
    if window_size == 0 {
        return Err(Error::EmptyWindow);
    }
    check_geometry(seq_len, block_size, prefill_len)?;
    let range = |b: usize| b * block_size..((b + 1) * block_size).min(seq_len);
    BlockMask::from_fn(seq_len, block_size, prefill_len, |i, j| {
        interval_gap(&range(i), &range(j)) < window_size
    })
}

/// Sliding window plus every key block touching the first
/// `⌈sink_fraction · seq_len⌉` tokens.
pub fn streaming_mask(
    seq_len: usize,
    block_size: usize,
    prefill_len: usize,
    window_size: usize,
    sink_fraction: f64,
) -> Result<BlockMask> {
    if !(0.0..=1.0).contains(&sink_fraction) {
        return Err(Error::InvalidConfig(format!(
            "sink fraction {sink_fraction} outside [0, 1]"
        )));
    }
    let window = sliding_window_mask(seq_len, block_size, prefill_len, window_size)?;
    let sink_tokens = crate::pattern::ceil_count(sink_fraction, seq_len);
    BlockMask::from_fn(seq_len, block_size, prefill_len, |i, j| {
        window.is_kept(i, j) || j * block_size < sink_tokens
    })
}
