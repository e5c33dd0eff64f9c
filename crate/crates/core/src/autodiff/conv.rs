//! im2col lowering for same-padded 3D cross-correlation.

use super::{gemm, MatLayout, Scalar};

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub c_out: usize,
    pub in_dims: [usize; 3],
    pub out_dims: [usize; 3],
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn new(c_in: usize, c_out: usize, in_dims: [usize; 3], k: usize, stride: usize) -> Self {
        let pad = (k - 1) / 2;
        let out = |d: usize| (d + 2 * pad - k) / stride + 1;
        Self {
            c_in,
            c_out,
            in_dims,
            out_dims: [out(in_dims[0]), out(in_dims[1]), out(in_dims[2])],
            k,
            stride,
            pad,
        }
    }

    pub fn in_len(&self) -> usize {
        self.c_in * self.in_dims.iter().product::<usize>()
    }

    pub fn out_spatial(&self) -> usize {
        self.out_dims.iter().product()
    }

    pub fn patch_len(&self) -> usize {
        self.c_in * self.k * self.k * self.k
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1
    }
}

/// Range of output x positions whose input tap `ox * s + kx - pad` is valid.
#[inline]
fn valid_range(out: usize, inp: usize, kx: usize, s: usize, pad: usize) -> (usize, usize) {
    let off = kx as isize - pad as isize;
    let mut lo = 0usize;
    while lo < out && (lo as isize * s as isize + off) < 0 {
        lo += 1;
    }
    let mut hi = out;
    while hi > lo && ((hi - 1) as isize * s as isize + off) >= inp as isize {
        hi -= 1;
    }
    (lo, hi)
}

/// Output rows (one `(oz, oy)` pair each, `ow` columns) per im2col tile;
/// keeps the lowered patch matrix cache-resident.
fn tile_rows(g: &ConvGeom) -> usize {
    const TILE_ELEMS: usize = 1 << 16;
    (TILE_ELEMS / (g.patch_len() * g.out_dims[0]).max(1)).max(1)
}

/// Visits every (row segment of `cols`, matching input run) pair for the
/// output rows `rows` (flattened `oz * oh + oy`); `cols` holds just those
/// rows. `f(col_offset, in_offset, len, step)`; a `None` input offset means
/// the taps fall in the zero padding.
#[inline]
fn for_each_run(g: &ConvGeom, rows: std::ops::Range<usize>, mut f: impl FnMut(usize, Option<usize>, usize, usize)) {
    let [iw, ih, id] = g.in_dims;
    let [ow, oh, _] = g.out_dims;
    let (k, s, pad) = (g.k, g.stride, g.pad);
    let tp = rows.len() * ow;
    for ci in 0..g.c_in {
        for kz in 0..k {
            for ky in 0..k {
                for kx in 0..k {
                    let row = ((ci * k + kz) * k + ky) * k + kx;
                    let (xlo, xhi) = valid_range(ow, iw, kx, s, pad);
                    for (t, r) in rows.clone().enumerate() {
                        let (oz, oy) = (r / oh, r % oh);
                        let iz = (oz * s + kz) as isize - pad as isize;
                        let iy = (oy * s + ky) as isize - pad as isize;
                        let col = row * tp + t * ow;
                        if iz < 0 || iz >= id as isize || iy < 0 || iy >= ih as isize {
                            f(col, None, ow, 0);
                            continue;
                        }
                        let base = (ci * id + iz as usize) * ih * iw + iy as usize * iw;
                        if xlo > 0 {
                            f(col, None, xlo, 0);
                        }
                        if xhi > xlo {
                            let ix0 = (xlo * s + kx) - pad;
                            f(col + xlo, Some(base + ix0), xhi - xlo, s);
                        }
                        if xhi < ow {
                            f(col + xhi.max(xlo), None, ow - xhi.max(xlo), 0);
                        }
                    }
                }
            }
        }
    }
}

fn im2col<T: Scalar>(g: &ConvGeom, rows: std::ops::Range<usize>, input: &[T], cols: &mut [T]) {
    for_each_run(g, rows, |col, src, len, step| match src {
        None => cols[col..col + len].fill(T::ZERO),
        Some(s0) if step == 1 => cols[col..col + len].copy_from_slice(&input[s0..s0 + len]),
        Some(s0) => {
            for (i, c) in cols[col..col + len].iter_mut().enumerate() {
                *c = input[s0 + i * step];
            }
        }
    });
}

fn col2im<T: Scalar>(g: &ConvGeom, rows: std::ops::Range<usize>, cols: &[T], grad_in: &mut [T]) {
    for_each_run(g, rows, |col, src, len, step| match src {
        None => {}
        Some(s0) if step == 1 => {
            for (d, &c) in grad_in[s0..s0 + len].iter_mut().zip(&cols[col..col + len]) {
                *d += c;
            }
        }
        Some(s0) => {
            for i in 0..len {
                grad_in[s0 + i * step] += cols[col + i];
            }
        }
    });
}

/// Column block `[c0, c0 + n)` of a row-major matrix with `p` columns.
fn col_block(rows: usize, p: usize, n: usize) -> MatLayout {
    MatLayout {
        rows,
        cols: n,
        rs: p,
        cs: 1,
    }
}

/// Yields `(row range, first column, column count)` per tile.
fn tiles(g: &ConvGeom) -> impl Iterator<Item = (std::ops::Range<usize>, usize, usize)> {
    let [ow, oh, od] = g.out_dims;
    let total = od * oh;
    let step = tile_rows(g);
    (0..total).step_by(step).map(move |r0| {
        let r1 = (r0 + step).min(total);
        (r0..r1, r0 * ow, (r1 - r0) * ow)
    })
}

/// Dot product with eight independent accumulators (vectorizes without
/// reassociating a single sum, so results stay reproducible).
#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::ZERO; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for j in 0..8 {
            acc[j] += x[j] * y[j];
        }
    }
    let mut tail = T::ZERO;
    for (x, y) in ra.iter().zip(rb) {
        tail += *x * *y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// Blocked out-of-place transpose of a row-major `rows x cols` matrix.
fn transpose_into<T: Scalar>(src: &[T], rows: usize, cols: usize, dst: &mut Vec<T>) {
    const B: usize = 16;
    dst.clear();
    dst.resize(rows * cols, T::ZERO);
    for r0 in (0..rows).step_by(B) {
        for c0 in (0..cols).step_by(B) {
            for r in r0..(r0 + B).min(rows) {
                for c in c0..(c0 + B).min(cols) {
                    dst[c * rows + r] = src[r * cols + c];
                }
            }
        }
    }
}

#[inline]
fn axpy<T: Scalar>(a: T, x: &[T], y: &mut [T]) {
    for (d, &v) in y.iter_mut().zip(x) {
        *d += a * v;
    }
}

/// Forward for one batch item. `out` has `c_out * out_spatial` elements.
pub(crate) fn forward<T: Scalar>(
    g: &ConvGeom,
    input: &[T],
    weight: &[T],
    bias: Option<&[T]>,
    out: &mut [T],
    scratch: &mut Vec<T>,
) {
    let p = g.out_spatial();
    let kk = g.patch_len();
    let lw = MatLayout::row_major(g.c_out, kk);
    if g.is_pointwise() {
        gemm(
            weight,
            lw,
            input,
            MatLayout::row_major(kk, p),
            out,
            MatLayout::row_major(g.c_out, p),
            T::ZERO,
        );
    } else {
        for (rows, c0, n) in tiles(g) {
            scratch.clear();
            scratch.resize(kk * n, T::ZERO);
            im2col(g, rows, input, scratch);
            gemm(
                weight,
                lw,
                scratch,
                MatLayout::row_major(kk, n),
                &mut out[c0..],
                col_block(g.c_out, p, n),
                T::ZERO,
            );
        }
    }
    if let Some(b) = bias {
        for (co, row) in out.chunks_exact_mut(p).enumerate() {
            let bv = b[co];
            row.iter_mut().for_each(|v| *v += bv);
        }
    }
}

/// Backward for one batch item; accumulates into whichever gradient
/// buffers are supplied.
#[allow(clippy::too_many_arguments)]
pub(crate) fn backward<T: Scalar>(
    g: &ConvGeom,
    input: &[T],
    weight: &[T],
    grad_out: &[T],
    grad_in: Option<&mut [T]>,
    mut grad_w: Option<&mut [T]>,
    grad_b: Option<&mut [T]>,
    scratch: &mut Vec<T>,
) {
    let p = g.out_spatial();
    let kk = g.patch_len();
    let l_w = MatLayout::row_major(g.c_out, kk);

    if let Some(gb) = grad_b {
        for (co, row) in grad_out.chunks_exact(p).enumerate() {
            let mut acc = T::ZERO;
            for &v in row {
                acc += v;
            }
            gb[co] += acc;
        }
    }

    if g.is_pointwise() {
        // skinny products (one side is a channel count): plain loops win
        if let Some(gw) = grad_w {
            for co in 0..g.c_out {
                let d = &grad_out[co * p..(co + 1) * p];
                for ci in 0..g.c_in {
                    gw[co * kk + ci] += dot(d, &input[ci * p..(ci + 1) * p]);
                }
            }
        }
        if let Some(gi) = grad_in {
            for ci in 0..g.c_in {
                let dst = &mut gi[ci * p..(ci + 1) * p];
                for co in 0..g.c_out {
                    axpy(weight[co * kk + ci], &grad_out[co * p..(co + 1) * p], dst);
                }
            }
        }
        return;
    }

    let mut grad_in = grad_in;
    let mut dcols: Vec<T> = Vec::new();
    let mut cols_t: Vec<T> = Vec::new();
    for (rows, c0, n) in tiles(g) {
        let l_out = col_block(g.c_out, p, n);
        let d_out = &grad_out[c0..];
        if let Some(gw) = grad_w.as_deref_mut() {
            scratch.clear();
            scratch.resize(kk * n, T::ZERO);
            im2col(g, rows.clone(), input, scratch);
            // dW += dOut * cols^T; the GEMM packs a row-major right operand
            // far faster than a transposed view, so transpose explicitly
            transpose_into(scratch, kk, n, &mut cols_t);
            gemm(d_out, l_out, &cols_t, MatLayout::row_major(n, kk), gw, l_w, T::ONE);
        }
        if let Some(gi) = grad_in.as_deref_mut() {
            dcols.clear();
            dcols.resize(kk * n, T::ZERO);
            gemm(
                weight,
                l_w.t(),
                d_out,
                l_out,
                &mut dcols,
                MatLayout::row_major(kk, n),
                T::ZERO,
            );
            col2im(g, rows, &dcols, gi);
        }
    }
}
