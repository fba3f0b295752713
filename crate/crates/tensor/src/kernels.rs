//! Flat-slice numeric kernels shared by the tape operations.
//!
//! Parallel kernels only ever split work into disjoint output regions whose
//! contents do not depend on the split, so results are bitwise identical
//! regardless of thread count or scheduling.

use rayon::prelude::*;

/// Rows below this stay single-threaded; spawning costs more than it saves.
const PAR_ROW_THRESHOLD: usize = 8;

/// C(m,n) = A(m,k) * B(k,n), all row-major.
pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![0.0; m * n];
    let body = |(row, out_row): (usize, &mut [f64])| {
        let a_row = &a[row * k..(row + 1) * k];
        for (kk, &a_val) in a_row.iter().enumerate() {
            if a_val == 0.0 {
                continue;
            }
            let b_row = &b[kk * n..(kk + 1) * n];
            for (o, &b_val) in out_row.iter_mut().zip(b_row) {
                *o += a_val * b_val;
            }
        }
    };
    if m >= PAR_ROW_THRESHOLD && m * k * n > 1 << 16 {
        out.par_chunks_mut(n).enumerate().for_each(body);
    } else {
        out.chunks_mut(n).enumerate().for_each(body);
    }
    out
}

/// C(m,n) = A(m,k) * B(n,k)^T. Row-by-row dot products.
pub(crate) fn matmul_bt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    let mut out = vec![0.0; m * n];
    let body = |(row, out_row): (usize, &mut [f64])| {
        let a_row = &a[row * k..(row + 1) * k];
        for (col, o) in out_row.iter_mut().enumerate() {
            let b_row = &b[col * k..(col + 1) * k];
            let mut acc = 0.0;
            for (&x, &y) in a_row.iter().zip(b_row) {
                acc += x * y;
            }
            *o = acc;
        }
    };
    if m >= PAR_ROW_THRESHOLD && m * k * n > 1 << 16 {
        out.par_chunks_mut(n).enumerate().for_each(body);
    } else {
        out.chunks_mut(n).enumerate().for_each(body);
    }
    out
}

/// B(c,r) = A(r,c)^T.
pub(crate) fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), rows * cols);
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// Output spatial side for a conv/pool window: floor((s + 2p - k)/stride) + 1.
pub(crate) fn out_side(side: usize, kernel: usize, stride: usize, padding: usize) -> usize {
    (side + 2 * padding - kernel) / stride + 1
}

/// Unroll one C*H*W image into a (C*K*K) x (OH*OW) patch matrix, zero padding.
pub(crate) fn im2col(
    img: &[f64],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    padding: usize,
    out: &mut [f64],
) {
    let oh = out_side(h, k, stride, padding);
    let ow = out_side(w, k, stride, padding);
    debug_assert_eq!(out.len(), c * k * k * oh * ow);
    let patches = oh * ow;
    for ch in 0..c {
        let img_ch = &img[ch * h * w..(ch + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut out[(ch * k * k + ky * k + kx) * patches..][..patches];
                let mut idx = 0;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        row[idx..idx + ow].fill(0.0);
                        idx += ow;
                        continue;
                    }
                    let img_row = &img_ch[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        row[idx] = if ix < 0 || ix >= w as isize {
                            0.0
                        } else {
                            img_row[ix as usize]
                        };
                        idx += 1;
                    }
                }
            }
        }
    }
}

/// Scatter-accumulate a patch matrix back onto a C*H*W image (adjoint of im2col).
pub(crate) fn col2im(
    col: &[f64],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    padding: usize,
    img: &mut [f64],
) {
    let oh = out_side(h, k, stride, padding);
    let ow = out_side(w, k, stride, padding);
    debug_assert_eq!(col.len(), c * k * k * oh * ow);
    debug_assert_eq!(img.len(), c * h * w);
    let patches = oh * ow;
    for ch in 0..c {
        let img_ch = &mut img[ch * h * w..(ch + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &col[(ch * k * k + ky * k + kx) * patches..][..patches];
                let mut idx = 0;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        idx += ow;
                        continue;
                    }
                    let base = iy as usize * w;
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        if ix >= 0 && ix < w as isize {
                            img_ch[base + ix as usize] += row[idx];
                        }
                        idx += 1;
                    }
                }
            }
        }
    }
}
