//! Sparse-pattern capture.
//!
//! Attention probabilities of one head are pooled to a block grid, a query
//! chunk at a time, and each query-block row keeps its highest-scoring key
//! blocks. Prefill and generation key regions are ranked separately with the
//! same ratio. Captured masks live in a [`PatternCache`] that is written once
//! and only read afterwards.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::attention::HeadInputs;
use crate::error::{Error, Result};
use crate::kernels::{pack_key_panels, probability_rows, PROBABILITY_ROWS};
use crate::masks::BlockMask;
use crate::numerics::Matrix;

const POOL_KEY_TILE: usize = 128;

/// Slack applied before rounding `ratio · n` up, so that e.g. `0.3 · 10`
/// counts as 3 and not 4.
const CEIL_SLACK: f64 = 1e-9;

/// `⌈ratio · n⌉`, clamped to `0..=n`.
pub fn ceil_count(ratio: f64, n: usize) -> usize {
    let raw = (ratio * n as f64 - CEIL_SLACK).ceil();
    if raw <= 0.0 {
        0
    } else {
        (raw as usize).min(n)
    }
}

/// Blocks kept out of a region of `n` blocks: `⌈rho · n⌉`, at least one
/// when the region is non-empty.
pub fn region_keep_count(rho: f64, n: usize) -> usize {
    if n == 0 {
        0
    } else {
        ceil_count(rho, n).max(1)
    }
}

fn check_rho(rho: f64) -> Result<()> {
    if rho > 0.0 && rho <= 1.0 {
        Ok(())
    } else {
        Err(Error::EmptySelection(rho))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SparseDConfig {
    /// Fraction of blocks kept per region, in `(0, 1]`.
    pub rho: f64,
    /// Fraction of steps run densely before switching, in `[0, 1)`.
    pub skip: f64,
    pub block_size: usize,
    pub total_steps: usize,
}

impl SparseDConfig {
    pub fn new(rho: f64, skip: f64, block_size: usize, total_steps: usize) -> Result<Self> {
        let cfg = Self {
            rho,
            skip,
            block_size,
            total_steps,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        check_rho(self.rho)?;
        if !(0.0..1.0).contains(&self.skip) {
            return Err(Error::InvalidConfig(format!(
                "skip {} outside [0, 1)",
                self.skip
            )));
        }
        if self.block_size == 0 {
            return Err(Error::InvalidBlockSize);
        }
        if self.total_steps == 0 {
            return Err(Error::InvalidConfig(
                "total steps must be at least 1".into(),
            ));
        }
        Ok(())
    }

    /// Step at which patterns are captured: `max(1, round_half_up(T · skip))`.
    pub fn capture_step(&self) -> usize {
        let s = (self.total_steps as f64 * self.skip + 0.5 + CEIL_SLACK).floor() as usize;
        s.clamp(1, self.total_steps)
    }
}

/// Block-averaged attention probabilities for one head.
#[derive(Clone, Debug, PartialEq)]
pub struct PooledScores {
    pub grid: Matrix,
    pub block_size: usize,
    /// Number of key blocks owned by the prefill region (those starting before `p`).
    pub prefill_boundary_block: usize,
}

/// Key blocks whose first token lies in the prefill.
pub fn prefill_boundary_block(prefill_len: usize, block_size: usize) -> usize {
    prefill_len.div_ceil(block_size)
}

/// Pooled scores computed `chunk_blocks` query blocks at a time. Only a
/// `chunk_blocks · block_size × l` slab of probabilities exists at once.
pub fn pooled_scores_chunked(
    q: &Matrix,
    k: &Matrix,
    prefill_len: usize,
    block_size: usize,
    chunk_blocks: usize,
) -> Result<PooledScores> {
    let (l, d) = q.shape();
    if d == 0 {
        return Err(Error::EmptyHeadDimension);
    }
    if k.shape() != (l, d) {
        return Err(Error::ShapeMismatch(format!(
            "q is {l}x{d} but k is {}x{}",
            k.rows(),
            k.cols()
        )));
    }
    if block_size == 0 {
        return Err(Error::InvalidBlockSize);
    }
    if chunk_blocks == 0 {
        return Err(Error::InvalidConfig(
            "chunk_blocks must be at least 1".into(),
        ));
    }
    if prefill_len > l {
        return Err(Error::InvalidConfig(format!(
            "prefill length {prefill_len} exceeds sequence length {l}"
        )));
    }
    let n = l.div_ceil(block_size);
    let scale = 1.0 / (d as f64).sqrt();
    let mut grid = Matrix::zeros(n, n);
    let panels = pack_key_panels(k, POOL_KEY_TILE);

    let mut slab = Vec::new();
    for chunk_start in (0..n).step_by(chunk_blocks) {
        let chunk_end = (chunk_start + chunk_blocks).min(n);
        let r0 = chunk_start * block_size;
        let r1 = (chunk_end * block_size).min(l);
        slab.resize((r1 - r0) * l, 0.0);
        slab.par_chunks_mut(PROBABILITY_ROWS * l)
            .enumerate()
            .for_each(|(t, out)| {
                probability_rows(
                    q,
                    r0 + t * PROBABILITY_ROWS,
                    &panels,
                    POOL_KEY_TILE,
                    scale,
                    out,
                )
            });

        for qb in chunk_start..chunk_end {
            let qr0 = qb * block_size;
            let qr1 = (qr0 + block_size).min(l);
            for kb in 0..n {
                let c0 = kb * block_size;
                let c1 = (c0 + block_size).min(l);
                let mut sum = 0.0;
                for r in qr0..qr1 {
                    let row = &slab[(r - r0) * l..(r - r0 + 1) * l];
                    for &v in &row[c0..c1] {
                        sum += v;
                    }
                }
                grid.set(qb, kb, sum / ((qr1 - qr0) * (c1 - c0)) as f64);
            }
        }
    }
    Ok(PooledScores {
        grid,
        block_size,
        prefill_boundary_block: prefill_boundary_block(prefill_len, block_size),
    })
}

/// Indices (offset by `base`) of the `count` largest scores; ties go to the
/// lower index.
fn top_indices(scores: &[f64], base: usize, count: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(count);
    order.into_iter().map(|i| i + base).collect()
}

/// Top `⌈rho · n⌉` key blocks chosen separately in the prefill region
/// (`..boundary`) and the generation region (`boundary..`). Sorted ascending.
pub fn isolated_topk_row(pooled_row: &[f64], boundary: usize, rho: f64) -> Result<Vec<usize>> {
    check_rho(rho)?;
    if boundary > pooled_row.len() {
        return Err(Error::ShapeMismatch(format!(
            "boundary {boundary} beyond row of {} blocks",
            pooled_row.len()
        )));
    }
    let (pre, gen) = pooled_row.split_at(boundary);
    let mut kept = top_indices(pre, 0, region_keep_count(rho, pre.len()));
    kept.extend(top_indices(
        gen,
        boundary,
        region_keep_count(rho, gen.len()),
    ));
    kept.sort_unstable();
    Ok(kept)
}

/// Top `⌈rho · n⌉` key blocks over the whole row, ignoring the prefill split.
pub fn joint_topk_row(pooled_row: &[f64], rho: f64) -> Result<Vec<usize>> {
    check_rho(rho)?;
    let mut kept = top_indices(pooled_row, 0, region_keep_count(rho, pooled_row.len()));
    kept.sort_unstable();
    Ok(kept)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum SelectionRule {
    #[default]
    Isolated,
    Joint,
}

/// Turns pooled scores into a mask, one selection per query-block row.
pub fn select_pattern(
    pooled: &PooledScores,
    seq_len: usize,
    prefill_len: usize,
    rho: f64,
    rule: SelectionRule,
) -> Result<BlockMask> {
    let n = pooled.grid.rows();
    let mut keep = vec![false; n * n];
    for qb in 0..n {
        let row = pooled.grid.row(qb);
        let kept = match rule {
            SelectionRule::Isolated => isolated_topk_row(row, pooled.prefill_boundary_block, rho)?,
            SelectionRule::Joint => joint_topk_row(row, rho)?,
        };
        for kb in kept {
            keep[qb * n + kb] = true;
        }
    }
    BlockMask::from_keep(seq_len, pooled.block_size, prefill_len, keep)
}

/// Default query-chunk width used when capturing patterns.
pub const DEFAULT_CHUNK_BLOCKS: usize = 1;

pub fn build_pattern(
    q: &Matrix,
    k: &Matrix,
    prefill_len: usize,
    config: &SparseDConfig,
    chunk_blocks: usize,
) -> Result<BlockMask> {
    build_pattern_with(
        q,
        k,
        prefill_len,
        config,
        chunk_blocks,
        SelectionRule::Isolated,
    )
}

pub fn build_pattern_with(
    q: &Matrix,
    k: &Matrix,
    prefill_len: usize,
    config: &SparseDConfig,
    chunk_blocks: usize,
    rule: SelectionRule,
) -> Result<BlockMask> {
    config.validate()?;
    let pooled = pooled_scores_chunked(q, k, prefill_len, config.block_size, chunk_blocks)?;
    select_pattern(&pooled, q.rows(), prefill_len, config.rho, rule)
}

/// Per-`(layer, head)` masks, populated by exactly one capture event.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PatternCache {
    entries: BTreeMap<(usize, usize), BlockMask>,
    captured_at_step: Option<usize>,
}

impl PatternCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_captured(&self) -> bool {
        self.captured_at_step.is_some()
    }

    pub fn captured_at_step(&self) -> Option<usize> {
        self.captured_at_step
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, layer: usize, head: usize) -> Option<&BlockMask> {
        self.entries.get(&(layer, head))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&(usize, usize), &BlockMask)> {
        self.entries.iter()
    }

    /// Builds one mask per head of every layer and seals the cache.
    pub fn capture(
        &mut self,
        layers: &[Vec<HeadInputs>],
        prefill_len: usize,
        config: &SparseDConfig,
        step: usize,
        chunk_blocks: usize,
    ) -> Result<()> {
        if self.is_captured() {
            return Err(Error::PatternAlreadyCaptured);
        }
        let masks = layers
            .iter()
            .map(|heads| {
                heads
                    .par_iter()
                    .map(|h| build_pattern(&h.q, &h.k, prefill_len, config, chunk_blocks))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        self.install(masks, step)
    }

    /// Seals the cache with masks built elsewhere, indexed `[layer][head]`.
    pub fn install(&mut self, masks: Vec<Vec<BlockMask>>, step: usize) -> Result<()> {
        if self.is_captured() {
            return Err(Error::PatternAlreadyCaptured);
        }
        let heads = masks.first().map_or(0, Vec::len);
        if masks.iter().any(|m| m.len() != heads) {
            return Err(Error::ShapeMismatch("layers disagree on head count".into()));
        }
        for (layer, per_head) in masks.into_iter().enumerate() {
            for (head, mask) in per_head.into_iter().enumerate() {
                self.entries.insert((layer, head), mask);
            }
        }
        self.captured_at_step = Some(step);
        Ok(())
    }
}
