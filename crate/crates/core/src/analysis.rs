//! Error, retained-mass, similarity and FLOP-ratio metrics, plus the CSV and
//! PGM writers used to emit them.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::masks::BlockMask;
use crate::numerics::{cosine_similarity, Matrix};
use crate::pattern::SparseDConfig;
use crate::scheduler::StepTrace;
use crate::toydlm::AttentionDump;

/// `‖sparse − dense‖_F / ‖dense‖_F`.
pub fn output_error(sparse: &Matrix, dense: &Matrix) -> Result<f64> {
    if sparse.shape() != dense.shape() {
        return Err(Error::ShapeMismatch(format!(
            "{:?} vs {:?}",
            sparse.shape(),
            dense.shape()
        )));
    }
    let denom = dense.frobenius_norm();
    if denom == 0.0 {
        return Err(Error::ZeroDenominator);
    }
    let num = sparse
        .data()
        .iter()
        .zip(dense.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    Ok(num / denom)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetainedMass {
    /// Mean over each query block's rows of the probability inside kept tiles.
    pub per_query_block: Vec<f64>,
    /// Mean over all query rows.
    pub global: f64,
}

/// Fraction of each row's attention probability that falls in kept tiles.
pub fn retained_mass(probs: &Matrix, mask: &BlockMask) -> Result<RetainedMass> {
    let l = mask.seq_len();
    if probs.shape() != (l, l) {
        return Err(Error::ShapeMismatch(format!(
            "probabilities {:?} for a mask over {l} tokens",
            probs.shape()
        )));
    }
    let mut per_query_block = Vec::with_capacity(mask.n_query_blocks());
    let mut total = 0.0;
    for qb in 0..mask.n_query_blocks() {
        let kept = mask.kept_blocks(qb);
        let rows = mask.block_range(qb);
        let n_rows = rows.len();
        let mut block_sum = 0.0;
        for i in rows {
            let row = probs.row(i);
            for &kb in &kept {
                block_sum += row[mask.block_range(kb)].iter().sum::<f64>();
            }
        }
        total += block_sum;
        per_query_block.push(block_sum / n_rows as f64);
    }
    Ok(RetainedMass {
        per_query_block,
        global: total / l as f64,
    })
}

/// Mean over a query block's rows of the probability in the given key blocks.
pub fn block_row_mass(
    probs: &Matrix,
    mask_geometry: &BlockMask,
    query_block: usize,
    key_blocks: &[usize],
) -> f64 {
    let rows = mask_geometry.block_range(query_block);
    let n = rows.len();
    let mut sum = 0.0;
    for i in rows {
        let row = probs.row(i);
        for &kb in key_blocks {
            sum += row[mask_geometry.block_range(kb)].iter().sum::<f64>();
        }
    }
    sum / n as f64
}

/// Cosine similarity between every pair of flattened maps. Symmetric by
/// construction.
pub fn step_similarity(maps: &[&Matrix]) -> Result<Matrix> {
    if maps.len() < 2 {
        return Err(Error::InvalidConfig(
            "similarity needs at least two steps".into(),
        ));
    }
    let shape = maps[0].shape();
    if maps.iter().any(|m| m.shape() != shape) {
        return Err(Error::ShapeMismatch(
            "attention maps differ in shape".into(),
        ));
    }
    let n = maps.len();
    let mut out = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let s = cosine_similarity(maps[i].data(), maps[j].data())?;
            out.set(i, j, s);
            out.set(j, i, s);
        }
    }
    Ok(out)
}

/// Step-by-step similarity matrices for every `(layer, head)` in a dump.
#[derive(Clone, Debug, Default)]
pub struct SimilarityReport {
    pub steps: Vec<usize>,
    pub per_head: BTreeMap<(usize, usize), Matrix>,
}

impl SimilarityReport {
    pub fn from_dumps(dumps: &[AttentionDump]) -> Result<Self> {
        let mut grouped: BTreeMap<(usize, usize), Vec<&AttentionDump>> = BTreeMap::new();
        for d in dumps {
            grouped.entry((d.layer, d.head)).or_default().push(d);
        }
        let mut report = SimilarityReport::default();
        for (key, mut ds) in grouped {
            ds.sort_by_key(|d| d.step);
            let steps: Vec<usize> = ds.iter().map(|d| d.step).collect();
            if report.steps.is_empty() {
                report.steps = steps;
            } else if report.steps != steps {
                return Err(Error::ShapeMismatch(format!(
                    "layer {} head {} was dumped at different steps",
                    key.0, key.1
                )));
            }
            let maps: Vec<&Matrix> = ds.iter().map(|d| &d.probs).collect();
            report.per_head.insert(key, step_similarity(&maps)?);
        }
        Ok(report)
    }

    /// Mean off-diagonal similarity per `(layer, head)`.
    pub fn mean_off_diagonal(&self) -> BTreeMap<(usize, usize), f64> {
        self.per_head
            .iter()
            .map(|(&k, m)| {
                let n = m.rows();
                let mut sum = 0.0;
                for i in 0..n {
                    for j in 0..n {
                        if i != j {
                            sum += m.get(i, j);
                        }
                    }
                }
                (k, sum / (n * (n - 1)) as f64)
            })
            .collect()
    }
}

/// Predicted attention FLOPs of a skip-then-reuse run relative to dense:
/// `(s + (T − s)·density + 0.5) / T`, `s` the capture step. The `0.5` is the
/// capture step's extra score-only pass.
pub fn flop_ratio_model(config: &SparseDConfig, density: f64) -> f64 {
    let t = config.total_steps as f64;
    let s = config.capture_step() as f64;
    (s + (t - s) * density + 0.5) / t
}

/// Sum of attention FLOPs of `run` over those of `dense`.
pub fn measured_flop_ratio(run: &[StepTrace], dense: &[StepTrace]) -> f64 {
    let a: u64 = run.iter().map(StepTrace::attention_flops).sum();
    let b: u64 = dense.iter().map(StepTrace::attention_flops).sum();
    a as f64 / b as f64
}

/// Fraction of positions `prefill_len..` where `a` and `b` agree.
pub fn token_agreement(a: &[u32], b: &[u32], prefill_len: usize) -> f64 {
    let n = a.len().min(b.len());
    if n <= prefill_len {
        return 1.0;
    }
    let same = (prefill_len..n).filter(|&i| a[i] == b[i]).count();
    same as f64 / (n - prefill_len) as f64
}

/// Mean of per-step [`output_error`] over paired logit matrices.
pub fn mean_logit_error(run: &[Matrix], reference: &[Matrix]) -> Result<f64> {
    if run.len() != reference.len() || run.is_empty() {
        return Err(Error::ShapeMismatch(
            "logit histories differ in length".into(),
        ));
    }
    let mut sum = 0.0;
    for (a, b) in run.iter().zip(reference) {
        sum += output_error(a, b)?;
    }
    Ok(sum / run.len() as f64)
}

/// Comma-separated rows with six decimals.
pub fn matrix_to_csv(m: &Matrix) -> String {
    let mut out = String::new();
    for r in 0..m.rows() {
        for (c, v) in m.row(r).iter().enumerate() {
            if c > 0 {
                out.push(',');
            }
            let _ = write!(out, "{v:.6}");
        }
        out.push('\n');
    }
    out
}

fn pgm_header(width: usize, height: usize) -> Vec<u8> {
    format!("P5\n{width} {height}\n255\n").into_bytes()
}

fn to_gray(v: f64, max: f64) -> u8 {
    if max <= 0.0 || v <= 0.0 {
        0
    } else {
        (v / max * 255.0).round().clamp(0.0, 255.0) as u8
    }
}

/// Binary 8-bit PGM of `m`, each value scaled by the map's maximum.
/// Negative values render black.
pub fn matrix_pgm(m: &Matrix) -> Vec<u8> {
    let max = m.data().iter().copied().fold(0.0, f64::max);
    let mut out = pgm_header(m.cols(), m.rows());
    out.extend(m.data().iter().map(|&v| to_gray(v, max)));
    out
}

/// Attention heatmap as binary PGM. A one-pixel white column is inserted
/// before key column `prefill_len` to mark the prefill/generation split, so
/// the image is `l + 1` pixels wide.
pub fn attention_pgm(probs: &Matrix, prefill_len: usize) -> Result<Vec<u8>> {
    if prefill_len > probs.cols() {
        return Err(Error::InvalidConfig(format!(
            "prefill boundary {prefill_len} beyond {} columns",
            probs.cols()
        )));
    }
    let max = probs.data().iter().copied().fold(0.0, f64::max);
    let mut out = pgm_header(probs.cols() + 1, probs.rows());
    for r in 0..probs.rows() {
        let row = probs.row(r);
        out.extend(row[..prefill_len].iter().map(|&v| to_gray(v, max)));
        out.push(255);
        out.extend(row[prefill_len..].iter().map(|&v| to_gray(v, max)));
    }
    Ok(out)
}
