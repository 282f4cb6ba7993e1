//! Register-blocked building blocks shared by the attention executors.
//!
//! Every output element is accumulated sequentially from zero (scores over
//! the head dimension, weighted sums over keys), so the blocked fast paths
//! and the scalar edge paths produce identical bits. The AVX2 variants are
//! the same code compiled wider; without fused multiply-add they round
//! exactly like the baseline build.

use crate::numerics::{softmax_in_place, Matrix};

const MR: usize = 4;
const NR: usize = 8;

/// Transposes `k` tile by tile: the panel for keys `k0..k1` occupies
/// `d × (k1 - k0)` values starting at `k0 * d`, row `c` holding feature `c`
/// of every key in the tile.
pub(crate) fn pack_key_panels(k: &Matrix, tile: usize) -> Vec<f64> {
    let (l, d) = k.shape();
    let mut out = vec![0.0; l * d];
    for k0 in (0..l).step_by(tile) {
        let w = tile.min(l - k0);
        let panel = &mut out[k0 * d..(k0 + w) * d];
        for j in 0..w {
            for (c, &v) in k.row(k0 + j).iter().enumerate() {
                panel[c * w + j] = v;
            }
        }
    }
    out
}

/// `out[r·stride + j] = scale · Σ_c q[r0 + r][c] · panel[c·w + j]`
/// for `r < rows`, `j < w`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn score_panel(
    q: &Matrix,
    r0: usize,
    rows: usize,
    panel: &[f64],
    w: usize,
    scale: f64,
    out: &mut [f64],
    stride: usize,
) {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: the feature was detected at runtime.
        return unsafe { score_panel_avx2(q, r0, rows, panel, w, scale, out, stride) };
    }
    score_panel_body(q, r0, rows, panel, w, scale, out, stride)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
#[allow(clippy::too_many_arguments)]
unsafe fn score_panel_avx2(
    q: &Matrix,
    r0: usize,
    rows: usize,
    panel: &[f64],
    w: usize,
    scale: f64,
    out: &mut [f64],
    stride: usize,
) {
    score_panel_body(q, r0, rows, panel, w, scale, out, stride)
}

#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn score_panel_body(
    q: &Matrix,
    r0: usize,
    rows: usize,
    panel: &[f64],
    w: usize,
    scale: f64,
    out: &mut [f64],
    stride: usize,
) {
    let d = q.cols();
    let mut rb = 0;
    while rb < rows {
        let mr = MR.min(rows - rb);
        let mut jb = 0;
        while jb < w {
            let nr = NR.min(w - jb);
            if mr == MR && nr == NR {
                let q0 = q.row(r0 + rb);
                let q1 = q.row(r0 + rb + 1);
                let q2 = q.row(r0 + rb + 2);
                let q3 = q.row(r0 + rb + 3);
                let mut acc = [[0.0f64; NR]; MR];
                for c in 0..d {
                    let kv: &[f64; NR] = panel[c * w + jb..c * w + jb + NR].try_into().unwrap();
                    let qs = [q0[c], q1[c], q2[c], q3[c]];
                    for r in 0..MR {
                        for j in 0..NR {
                            acc[r][j] += qs[r] * kv[j];
                        }
                    }
                }
                for r in 0..MR {
                    let o = &mut out[(rb + r) * stride + jb..(rb + r) * stride + jb + NR];
                    for j in 0..NR {
                        o[j] = acc[r][j] * scale;
                    }
                }
            } else {
                for r in 0..mr {
                    let qr = q.row(r0 + rb + r);
                    for j in 0..nr {
                        let mut acc = 0.0;
                        for (c, &qv) in qr.iter().enumerate() {
                            acc += qv * panel[c * w + jb + j];
                        }
                        out[(rb + r) * stride + jb + j] = acc * scale;
                    }
                }
            }
            jb += NR;
        }
        rb += MR;
    }
}

/// Scaled scores of `rows` queries from `r0` against every key, written
/// row-major with stride `l` into `out`.
pub(crate) fn score_rows(
    q: &Matrix,
    r0: usize,
    rows: usize,
    panels: &[f64],
    tile: usize,
    scale: f64,
    out: &mut [f64],
) {
    let d = q.cols();
    let l = panels.len() / d;
    for k0 in (0..l).step_by(tile) {
        let w = tile.min(l - k0);
        score_panel(q, r0, rows, &panels[k0 * d..], w, scale, &mut out[k0..], l);
    }
}

/// Query rows per work item when whole probability rows are materialized.
pub(crate) const PROBABILITY_ROWS: usize = 16;

/// Softmax-normalized score rows for queries `r0..r0 + out.len() / l`.
/// Rows carry no masked entries.
pub(crate) fn probability_rows(
    q: &Matrix,
    r0: usize,
    panels: &[f64],
    tile: usize,
    scale: f64,
    out: &mut [f64],
) {
    let l = panels.len() / q.cols();
    let rows = out.len() / l;
    score_rows(q, r0, rows, panels, tile, scale, out);
    for row in out.chunks_mut(l) {
        softmax_in_place(row);
    }
}

/// `acc[r·d + c] += Σ_j p[r·stride + j] · v[k0 + j][c]` for `r < rows`,
/// `j < w`, summed in ascending `j`.
pub(crate) fn weighted_sum_panel(
    p: &[f64],
    stride: usize,
    rows: usize,
    v: &Matrix,
    k0: usize,
    w: usize,
    acc: &mut [f64],
) {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: the feature was detected at runtime.
        return unsafe { weighted_sum_panel_avx2(p, stride, rows, v, k0, w, acc) };
    }
    weighted_sum_panel_body(p, stride, rows, v, k0, w, acc)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn weighted_sum_panel_avx2(
    p: &[f64],
    stride: usize,
    rows: usize,
    v: &Matrix,
    k0: usize,
    w: usize,
    acc: &mut [f64],
) {
    weighted_sum_panel_body(p, stride, rows, v, k0, w, acc)
}

#[inline(always)]
fn weighted_sum_panel_body(
    p: &[f64],
    stride: usize,
    rows: usize,
    v: &Matrix,
    k0: usize,
    w: usize,
    acc: &mut [f64],
) {
    let d = v.cols();
    let mut rb = 0;
    while rb < rows {
        let mr = MR.min(rows - rb);
        let mut cb = 0;
        while cb < d {
            let nr = NR.min(d - cb);
            if mr == MR && nr == NR {
                let mut a = [[0.0f64; NR]; MR];
                for r in 0..MR {
                    a[r].copy_from_slice(&acc[(rb + r) * d + cb..(rb + r) * d + cb + NR]);
                }
                for j in 0..w {
                    let vv: &[f64; NR] = v.row(k0 + j)[cb..cb + NR].try_into().unwrap();
                    let ps = [
                        p[rb * stride + j],
                        p[(rb + 1) * stride + j],
                        p[(rb + 2) * stride + j],
                        p[(rb + 3) * stride + j],
                    ];
                    for r in 0..MR {
                        for c in 0..NR {
                            a[r][c] += ps[r] * vv[c];
                        }
                    }
                }
                for r in 0..MR {
                    acc[(rb + r) * d + cb..(rb + r) * d + cb + NR].copy_from_slice(&a[r]);
                }
            } else {
                for r in 0..mr {
                    for c in cb..cb + nr {
                        let mut a = acc[(rb + r) * d + c];
                        for j in 0..w {
                            a += p[(rb + r) * stride + j] * v.get(k0 + j, c);
                        }
                        acc[(rb + r) * d + c] = a;
                    }
                }
            }
            cb += NR;
        }
        rb += MR;
    }
}
