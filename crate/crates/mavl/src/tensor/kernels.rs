//! Raw compute kernels.
//!
//! Every kernel is deterministic: parallel variants split work over disjoint
//! output ranges and each output element is accumulated in a fixed sequential
//! order, so results are bit-identical for any thread count.

use rayon::prelude::*;

/// Below this many multiply-accumulates a matmul stays single-threaded.
const PAR_MM_THRESHOLD: usize = 64 * 64 * 64;
/// Row block for the register-tiled matmul kernel.
const ROW_BLOCK: usize = 4;

pub fn all_finite(data: &[f64]) -> bool {
    if data.len() >= 1 << 16 {
        data.par_chunks(1 << 14).all(|c| c.iter().all(|v| v.is_finite()))
    } else {
        data.iter().all(|v| v.is_finite())
    }
}

/// c = a @ b for row-major a[m,k], b[k,n]; c is overwritten.
/// Four output rows are accumulated together so the inner loop keeps eight
/// FMA chains in flight while streaming each row of b exactly once per block.
fn mm_block(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    c.iter_mut().for_each(|x| *x = 0.0);
    let mut i = 0;
    while i + ROW_BLOCK <= m {
        let (c01, c23) = c[i * n..(i + 4) * n].split_at_mut(2 * n);
        let (c0, c1) = c01.split_at_mut(n);
        let (c2, c3) = c23.split_at_mut(n);
        for p in 0..k {
            let a0 = a[i * k + p];
            let a1 = a[(i + 1) * k + p];
            let a2 = a[(i + 2) * k + p];
            let a3 = a[(i + 3) * k + p];
            let brow = &b[p * n..p * n + n];
            for j in 0..n {
                let bj = brow[j];
                c0[j] = a0.mul_add(bj, c0[j]);
                c1[j] = a1.mul_add(bj, c1[j]);
                c2[j] = a2.mul_add(bj, c2[j]);
                c3[j] = a3.mul_add(bj, c3[j]);
            }
        }
        i += ROW_BLOCK;
    }
    while i < m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] = av.mul_add(brow[j], crow[j]);
            }
        }
        i += 1;
    }
}

/// Parallel matmul: rows of the output are partitioned across threads.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    if m * k * n < PAR_MM_THRESHOLD || m < 2 * ROW_BLOCK {
        mm_block(a, b, &mut c, m, k, n);
        return c;
    }
    // Chunk size is a fixed function of the problem, not the thread count.
    let rows_per = ((m / 8).max(ROW_BLOCK) + ROW_BLOCK - 1) / ROW_BLOCK * ROW_BLOCK;
    c.par_chunks_mut(rows_per * n)
        .enumerate()
        .for_each(|(blk, cc)| {
            let i0 = blk * rows_per;
            let rows = cc.len() / n;
            mm_block(&a[i0 * k..(i0 + rows) * k], b, cc, rows, k, n);
        });
    c
}

/// Batched matmul over g groups: a[g,m,k] @ b[g,k,n].
pub fn bmm(a: &[f64], b: &[f64], g: usize, m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; g * m * n];
    let work = m * k * n;
    if g == 1 {
        return matmul(a, b, m, k, n);
    }
    if g * work < PAR_MM_THRESHOLD {
        for gi in 0..g {
            mm_block(
                &a[gi * m * k..(gi + 1) * m * k],
                &b[gi * k * n..(gi + 1) * k * n],
                &mut c[gi * m * n..(gi + 1) * m * n],
                m,
                k,
                n,
            );
        }
    } else {
        c.par_chunks_mut(m * n).enumerate().for_each(|(gi, cc)| {
            mm_block(
                &a[gi * m * k..(gi + 1) * m * k],
                &b[gi * k * n..(gi + 1) * k * n],
                cc,
                m,
                k,
                n,
            );
        });
    }
    c
}

/// Transpose a row-major [m,n] matrix into [n,m].
pub fn transpose(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &a[i * n..(i + 1) * n];
        for j in 0..n {
            out[j * m + i] = row[j];
        }
    }
    out
}

/// Per-group transpose of the last two axes: [g,m,n] -> [g,n,m].
pub fn batch_transpose(a: &[f64], g: usize, m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; g * m * n];
    for gi in 0..g {
        let src = &a[gi * m * n..(gi + 1) * m * n];
        let dst = &mut out[gi * m * n..(gi + 1) * m * n];
        for i in 0..m {
            for j in 0..n {
                dst[j * m + i] = src[i * n + j];
            }
        }
    }
    out
}

pub fn add_assign(dst: &mut [f64], src: &[f64]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Row-wise softmax with max-subtraction; rows are independent.
pub fn softmax_rows(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    let body = |(r, orow): (usize, &mut [f64])| {
        let xrow = &x[r * cols..(r + 1) * cols];
        let mx = xrow.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (o, &v) in orow.iter_mut().zip(xrow) {
            let e = (v - mx).exp();
            *o = e;
            z += e;
        }
        let inv = 1.0 / z;
        for o in orow.iter_mut() {
            *o *= inv;
        }
    };
    if rows * cols >= 1 << 15 {
        out.par_chunks_mut(cols).enumerate().for_each(body);
    } else {
        out.chunks_mut(cols).enumerate().for_each(body);
    }
    out
}

/// Row-wise log-softmax (stable form).
pub fn log_softmax_rows(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let xrow = &x[r * cols..(r + 1) * cols];
        let orow = &mut out[r * cols..(r + 1) * cols];
        let mx = xrow.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for &v in xrow {
            z += (v - mx).exp();
        }
        let lz = z.ln() + mx;
        for (o, &v) in orow.iter_mut().zip(xrow) {
            *o = v - lz;
        }
    }
    out
}
