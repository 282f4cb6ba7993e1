//! Attention executors.
//!
//! * [`dense_attention`] computes `softmax(QKᵀ/√d)·V`.
//! * [`masked_dense_attention`] does the same with an explicit `l × l` additive
//!   bias. This is the reference the sparse kernel is checked against.
//! * [`block_sparse_attention`] visits only the kept tiles of a
//!   [`BlockMask`], normalizing with a running max and running sum so no
//!   score row is ever materialized in full.
//!
//! Work is split across query rows or query blocks; every output element is
//! accumulated in a fixed order, so results do not depend on thread count.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kernels::{
    pack_key_panels, probability_rows, score_panel, score_rows, weighted_sum_panel,
    PROBABILITY_ROWS,
};
use crate::masks::BlockMask;
use crate::numerics::{softmax_in_place, Matrix, MASKED};

/// Query rows handled together by the dense executors so each key/value
/// tile is reused from cache.
const DENSE_QUERY_TILE: usize = 16;
const DENSE_KEY_TILE: usize = 128;

/// Per-head projections, each `l × d`.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadInputs {
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
}

impl HeadInputs {
    pub fn new(q: Matrix, k: Matrix, v: Matrix) -> Result<Self> {
        if q.cols() == 0 {
            return Err(Error::EmptyHeadDimension);
        }
        if q.shape() != k.shape() || q.shape() != v.shape() {
            return Err(Error::ShapeMismatch(format!(
                "q {:?}, k {:?}, v {:?}",
                q.shape(),
                k.shape(),
                v.shape()
            )));
        }
        Ok(Self { q, k, v })
    }

    #[inline]
    pub fn seq_len(&self) -> usize {
        self.q.rows()
    }

    #[inline]
    pub fn head_dim(&self) -> usize {
        self.q.cols()
    }

    fn scale(&self) -> f64 {
        1.0 / (self.head_dim() as f64).sqrt()
    }
}

/// Multiply-add counts for the two quadratic attention products.
///
/// A dense call over `l` tokens with head width `d` adds `2·l²·d` to each of
/// `score_flops` and `weighted_sum_flops`; a sparse call adds the same for
/// kept token pairs only. Pooling work during pattern capture is tracked in
/// `pooling_flops` and stays out of attention totals.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct FlopCounter {
    pub score_flops: u64,
    pub weighted_sum_flops: u64,
    pub pooling_flops: u64,
}

impl FlopCounter {
    pub fn new() -> Self {
        Self::default()
    }

    /// Charges `pairs` query–key pairs of width `d` to both products.
    pub fn charge_pairs(&mut self, pairs: u64, head_dim: usize) {
        let f = 2 * pairs * head_dim as u64;
        self.score_flops += f;
        self.weighted_sum_flops += f;
    }

    pub fn charge_dense(&mut self, seq_len: usize, head_dim: usize) {
        self.charge_pairs((seq_len * seq_len) as u64, head_dim);
    }

    /// A score-only pass over all pairs plus tile-mean pooling (one add per
    /// probability).
    pub fn charge_capture(&mut self, seq_len: usize, head_dim: usize) {
        let pairs = (seq_len * seq_len) as u64;
        self.score_flops += 2 * pairs * head_dim as u64;
        self.pooling_flops += pairs;
    }

    pub fn attention_total(&self) -> u64 {
        self.score_flops + self.weighted_sum_flops
    }

    pub fn merge(&mut self, other: &FlopCounter) {
        self.score_flops += other.score_flops;
        self.weighted_sum_flops += other.weighted_sum_flops;
        self.pooling_flops += other.pooling_flops;
    }
}

fn check_bias(h: &HeadInputs, bias: &Matrix) -> Result<()> {
    let l = h.seq_len();
    if bias.shape() != (l, l) {
        return Err(Error::ShapeMismatch(format!(
            "bias {:?} for sequence length {l}",
            bias.shape()
        )));
    }
    Ok(())
}

/// Two-pass softmax attention over query tiles. `bias`, when given, is added
/// to every scaled score.
fn attend_rows(h: &HeadInputs, bias: Option<&Matrix>) -> Result<Matrix> {
    let (l, d) = h.q.shape();
    let scale = h.scale();
    let panels = pack_key_panels(&h.k, DENSE_KEY_TILE);
    let mut out = Matrix::zeros(l, d);
    out.data_mut()
        .par_chunks_mut(DENSE_QUERY_TILE * d)
        .enumerate()
        .try_for_each(|(tile, out_tile)| {
            let r0 = tile * DENSE_QUERY_TILE;
            let rows = out_tile.len() / d;
            let mut scores = vec![0.0; rows * l];
            score_rows(&h.q, r0, rows, &panels, DENSE_KEY_TILE, scale, &mut scores);
            for r in 0..rows {
                let s_row = &mut scores[r * l..(r + 1) * l];
                if let Some(b) = bias {
                    for (s, bv) in s_row.iter_mut().zip(b.row(r0 + r)) {
                        *s += bv;
                    }
                }
                if !softmax_in_place(s_row) {
                    return Err(Error::FullyMaskedRow { row: r0 + r });
                }
            }
            for k0 in (0..l).step_by(DENSE_KEY_TILE) {
                let w = DENSE_KEY_TILE.min(l - k0);
                weighted_sum_panel(&scores[k0..], l, rows, &h.v, k0, w, out_tile);
            }
            Ok::<(), Error>(())
        })?;
    Ok(out)
}

/// Full attention. Charges `2·l²·d` to each product.
pub fn dense_attention(h: &HeadInputs, counter: &mut FlopCounter) -> Result<Matrix> {
    let out = attend_rows(h, None)?;
    counter.charge_dense(h.seq_len(), h.head_dim());
    Ok(out)
}

/// `softmax(QKᵀ/√d + bias)·V`, materializing every score. Reference path.
pub fn masked_dense_attention(h: &HeadInputs, bias: &Matrix) -> Result<Matrix> {
    check_bias(h, bias)?;
    attend_rows(h, Some(bias))
}

/// Full `l × l` probability map `softmax(QKᵀ/√d)`, for inspection and analysis.
pub fn attention_probabilities(q: &Matrix, k: &Matrix) -> Result<Matrix> {
    let (l, d) = q.shape();
    if d == 0 {
        return Err(Error::EmptyHeadDimension);
    }
    if k.shape() != (l, d) {
        return Err(Error::ShapeMismatch("q and k shapes differ".into()));
    }
    let scale = 1.0 / (d as f64).sqrt();
    let panels = pack_key_panels(k, DENSE_KEY_TILE);
    let mut probs = Matrix::zeros(l, l);
    probs
        .data_mut()
        .par_chunks_mut(PROBABILITY_ROWS * l)
        .enumerate()
        .for_each(|(t, slab)| {
            probability_rows(
                q,
                t * PROBABILITY_ROWS,
                &panels,
                DENSE_KEY_TILE,
                scale,
                slab,
            )
        });
    Ok(probs)
}

/// Running softmax state for one query row.
struct RowState {
    max: f64,
    sum: f64,
}

/// Attention restricted to the kept tiles of `mask`, with online softmax
/// across a query block's kept key blocks. Charges only kept token pairs.
pub fn block_sparse_attention(
    h: &HeadInputs,
    mask: &BlockMask,
    counter: &mut FlopCounter,
) -> Result<Matrix> {
    let (l, d) = h.q.shape();
    if mask.seq_len() != l {
        return Err(Error::MaskShapeMismatch {
            mask_len: mask.seq_len(),
            input_len: l,
        });
    }
    let bs = mask.block_size();
    let scale = h.scale();
    let panels = pack_key_panels(&h.k, bs);
    let mut out = Matrix::zeros(l, d);

    out.data_mut()
        .par_chunks_mut(bs * d)
        .enumerate()
        .for_each(|(qb, out_block)| {
            let r0 = qb * bs;
            let rows = out_block.len() / d;
            let mut state: Vec<RowState> = (0..rows)
                .map(|_| RowState {
                    max: MASKED,
                    sum: 0.0,
                })
                .collect();
            let mut tile = vec![0.0; rows * bs];

            for kb in mask.kept_blocks(qb) {
                let keys = mask.block_range(kb);
                let w = keys.len();
                score_panel(
                    &h.q,
                    r0,
                    rows,
                    &panels[keys.start * d..],
                    w,
                    scale,
                    &mut tile,
                    w,
                );
                for (r, st) in state.iter_mut().enumerate() {
                    let scores = &mut tile[r * w..(r + 1) * w];
                    let tile_max = scores.iter().copied().fold(MASKED, f64::max);
                    if tile_max > st.max {
                        let correction = (st.max - tile_max).exp();
                        st.sum *= correction;
                        for a in &mut out_block[r * d..(r + 1) * d] {
                            *a *= correction;
                        }
                        st.max = tile_max;
                    }
                    for s in scores.iter_mut() {
                        *s = (*s - st.max).exp();
                        st.sum += *s;
                    }
                }
                weighted_sum_panel(&tile, w, rows, &h.v, keys.start, w, out_block);
            }
            for (r, st) in state.iter().enumerate() {
                let inv = 1.0 / st.sum;
                for a in &mut out_block[r * d..(r + 1) * d] {
                    *a *= inv;
                }
            }
        });

    counter.charge_pairs(mask.kept_pairs() as u64, d);
    Ok(out)
}

/// Runs every head, densely or with its own mask, and returns outputs in
/// head order. Counter totals are merged in head order.
pub fn multi_head_attention(
    heads: &[HeadInputs],
    masks: Option<&[&BlockMask]>,
    counter: &mut FlopCounter,
) -> Result<Vec<Matrix>> {
    if let Some(m) = masks {
        if m.len() != heads.len() {
            return Err(Error::MaskCountMismatch {
                masks: m.len(),
                heads: heads.len(),
            });
        }
    }
    let results: Vec<Result<(Matrix, FlopCounter)>> = heads
        .par_iter()
        .enumerate()
        .map(|(i, h)| {
            let mut local = FlopCounter::new();
            let out = match masks {
                Some(m) => block_sparse_attention(h, m[i], &mut local)?,
                None => dense_attention(h, &mut local)?,
            };
            Ok((out, local))
        })
        .collect();
    let mut outputs = Vec::with_capacity(heads.len());
    for r in results {
        let (out, local) = r?;
        counter.merge(&local);
        outputs.push(out);
    }
    Ok(outputs)
}

/// Where a model sends each layer's per-head projections.
pub trait AttentionHook {
    fn attend(&mut self, layer: usize, heads: &[HeadInputs]) -> Result<Vec<Matrix>>;
}

/// Hook that always runs dense attention.
#[derive(Debug, Default)]
pub struct DenseHook {
    pub counter: FlopCounter,
}

impl AttentionHook for DenseHook {
    fn attend(&mut self, _layer: usize, heads: &[HeadInputs]) -> Result<Vec<Matrix>> {
        multi_head_attention(heads, None, &mut self.counter)
    }
}
