//! im2col based convolution kernels.
//!
//! Every kernel processes one sample and one group at a time and tiles the
//! output rows so the column buffer stays bounded for large images. Tiles are
//! visited in a fixed order, which keeps accumulation bit-reproducible.

use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use crate::tensor::Scalar;

/// Upper bound on the column-buffer size, in elements.
const TILE_ELEMS: usize = 1 << 21;

/// Geometry of a convolution from an image of `c x h x w` to `ho x wo`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Geom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    pub ph: usize,
    pub pw: usize,
    pub dh: usize,
    pub dw: usize,
    pub ho: usize,
    pub wo: usize,
}

impl Geom {
    pub fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn tiles(&self) -> impl Iterator<Item = Range<usize>> {
        let rows = (TILE_ELEMS / (self.patch() * self.wo).max(1)).clamp(1, self.ho);
        let ho = self.ho;
        (0..ho).step_by(rows).map(move |r| r..(r + rows).min(ho))
    }

    /// Valid output columns `[lo, hi)` for kernel column `kj` when `sw == 1`.
    #[inline]
    fn col_range_unit_stride(&self, kj: usize) -> (usize, usize) {
        let off = (kj * self.dw) as isize - self.pw as isize;
        let lo = (-off).max(0) as usize;
        let hi = ((self.w as isize - off).max(0) as usize).min(self.wo);
        (lo.min(hi), hi)
    }
}

/// Output extent of a convolution along one axis, `None` when empty.
pub(crate) fn out_extent(input: usize, k: usize, stride: usize, pad: usize, dil: usize) -> Option<usize> {
    let span = dil * (k - 1) + 1;
    let padded = input + 2 * pad;
    if padded < span {
        None
    } else {
        Some((padded - span) / stride + 1)
    }
}

pub(crate) fn im2col<T: Scalar>(x: &[T], g: &Geom, rows: Range<usize>, col: &mut [T]) {
    let ncols = rows.len() * g.wo;
    for ci in 0..g.c {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let dst = &mut col[row * ncols..(row + 1) * ncols];
                for (ri, r) in rows.clone().enumerate() {
                    let out = &mut dst[ri * g.wo..(ri + 1) * g.wo];
                    let ih = (r * g.sh + ki * g.dh) as isize - g.ph as isize;
                    if ih < 0 || ih >= g.h as isize {
                        out.fill(T::ZERO);
                        continue;
                    }
                    let src = &plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                    if g.sw == 1 {
                        let (lo, hi) = g.col_range_unit_stride(kj);
                        out[..lo].fill(T::ZERO);
                        out[hi..].fill(T::ZERO);
                        if hi > lo {
                            let start = (lo + kj * g.dw) - g.pw;
                            out[lo..hi].copy_from_slice(&src[start..start + (hi - lo)]);
                        }
                    } else {
                        for (oc, o) in out.iter_mut().enumerate() {
                            let iw = (oc * g.sw + kj * g.dw) as isize - g.pw as isize;
                            *o = if iw >= 0 && iw < g.w as isize {
                                src[iw as usize]
                            } else {
                                T::ZERO
                            };
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-and-adds `col` back into `x`.
pub(crate) fn col2im<T: Scalar>(col: &[T], g: &Geom, rows: Range<usize>, x: &mut [T]) {
    let ncols = rows.len() * g.wo;
    for ci in 0..g.c {
        let plane = &mut x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let srcrow = &col[row * ncols..(row + 1) * ncols];
                for (ri, r) in rows.clone().enumerate() {
                    let ih = (r * g.sh + ki * g.dh) as isize - g.ph as isize;
                    if ih < 0 || ih >= g.h as isize {
                        continue;
                    }
                    let src = &srcrow[ri * g.wo..(ri + 1) * g.wo];
                    let dst = &mut plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                    if g.sw == 1 {
                        let (lo, hi) = g.col_range_unit_stride(kj);
                        if hi > lo {
                            let start = (lo + kj * g.dw) - g.pw;
                            for (d, &s) in dst[start..start + (hi - lo)].iter_mut().zip(&src[lo..hi]) {
                                *d += s;
                            }
                        }
                    } else {
                        for (oc, &s) in src.iter().enumerate() {
                            let iw = (oc * g.sw + kj * g.dw) as isize - g.pw as isize;
                            if iw >= 0 && iw < g.w as isize {
                                dst[iw as usize] += s;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Layout of a grouped convolution over a batch.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvLayout {
    pub n: usize,
    pub groups: usize,
    /// Output channels per group.
    pub cout_g: usize,
    /// Per-group geometry; `geom.c` is the input channels per group.
    pub geom: Geom,
}

impl ConvLayout {
    fn cin(&self) -> usize {
        self.groups * self.geom.c
    }
    fn cout(&self) -> usize {
        self.groups * self.cout_g
    }
    fn in_len(&self) -> usize {
        self.cin() * self.geom.h * self.geom.w
    }
    fn out_plane(&self) -> usize {
        self.geom.ho * self.geom.wo
    }
    fn out_len(&self) -> usize {
        self.cout() * self.out_plane()
    }
}

pub(crate) fn conv2d_forward<T: Scalar>(x: &[T], w: &[T], b: Option<&[T]>, l: &ConvLayout) -> Vec<T> {
    let g = &l.geom;
    let k = g.patch();
    let plane = l.out_plane();
    let mut y = vec![T::ZERO; l.n * l.out_len()];
    let mut col = Vec::new();
    for n in 0..l.n {
        let xn = &x[n * l.in_len()..(n + 1) * l.in_len()];
        let yn = &mut y[n * l.out_len()..(n + 1) * l.out_len()];
        for grp in 0..l.groups {
            let xg = &xn[grp * g.c * g.h * g.w..(grp + 1) * g.c * g.h * g.w];
            let wg = &w[grp * l.cout_g * k..(grp + 1) * l.cout_g * k];
            for rows in g.tiles() {
                let p = rows.len() * g.wo;
                col.resize(k * p, T::ZERO);
                im2col(xg, g, rows.clone(), &mut col);
                let off = grp * l.cout_g * plane + rows.start * g.wo;
                T::gemm(
                    l.cout_g,
                    k,
                    p,
                    (wg, k as isize, 1),
                    (&col, p as isize, 1),
                    (&mut yn[off..], plane as isize, 1),
                    false,
                );
            }
        }
        if let Some(b) = b {
            for (co, &bv) in b.iter().enumerate() {
                for v in &mut yn[co * plane..(co + 1) * plane] {
                    *v += bv;
                }
            }
        }
    }
    y
}

/// Gradients of [`conv2d_forward`]. Each output is produced only when asked.
pub(crate) fn conv2d_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    dy: &[T],
    l: &ConvLayout,
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
    db: Option<&mut [T]>,
) {
    let g = &l.geom;
    let k = g.patch();
    let plane = l.out_plane();
    let mut col = Vec::new();
    let mut dcol = Vec::new();
    if dx.is_some() || dw.is_some() {
        for n in 0..l.n {
            let xn = &x[n * l.in_len()..(n + 1) * l.in_len()];
            let dyn_ = &dy[n * l.out_len()..(n + 1) * l.out_len()];
            for grp in 0..l.groups {
                let xrange = grp * g.c * g.h * g.w..(grp + 1) * g.c * g.h * g.w;
                let wg = &w[grp * l.cout_g * k..(grp + 1) * l.cout_g * k];
                for rows in g.tiles() {
                    let p = rows.len() * g.wo;
                    let off = grp * l.cout_g * plane + rows.start * g.wo;
                    let dyt = (&dyn_[off..], plane as isize, 1);
                    if let Some(dw) = dw.as_deref_mut() {
                        col.resize(k * p, T::ZERO);
                        im2col(&xn[xrange.clone()], g, rows.clone(), &mut col);
                        let dwg = &mut dw[grp * l.cout_g * k..(grp + 1) * l.cout_g * k];
                        T::gemm(l.cout_g, p, k, dyt, (&col, 1, p as isize), (dwg, k as isize, 1), true);
                    }
                    if let Some(dx) = dx.as_deref_mut() {
                        dcol.resize(k * p, T::ZERO);
                        T::gemm(
                            k,
                            l.cout_g,
                            p,
                            (wg, 1, k as isize),
                            dyt,
                            (&mut dcol, p as isize, 1),
                            false,
                        );
                        let dxn = &mut dx[n * l.in_len()..(n + 1) * l.in_len()];
                        col2im(&dcol, g, rows.clone(), &mut dxn[xrange.clone()]);
                    }
                }
            }
        }
    }
    if let Some(db) = db {
        accumulate_bias_grad(dy, l.n, l.cout(), plane, db);
    }
}

pub(crate) fn accumulate_bias_grad<T: Scalar>(dy: &[T], n: usize, c: usize, plane: usize, db: &mut [T]) {
    for ni in 0..n {
        for (co, d) in db.iter_mut().enumerate().take(c) {
            let start = (ni * c + co) * plane;
            *d += dy[start..start + plane].iter().fold(T::ZERO, |a, &v| a + v);
        }
    }
}

/// Transposed convolution as the adjoint of a forward convolution.
///
/// `adj` describes the forward convolution from the transposed output
/// (`cout` channels, `ho x wo` in `adj.geom.h x adj.geom.w`) back to the
/// transposed input (`cin` channels, `adj.geom.ho x adj.geom.wo`). The weight
/// is laid out `[cin, cout, kh, kw]`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct TransposeLayout {
    pub n: usize,
    pub cin: usize,
    pub adj: Geom,
}

impl TransposeLayout {
    fn in_len(&self) -> usize {
        self.cin * self.adj.ho * self.adj.wo
    }
    fn out_plane(&self) -> usize {
        self.adj.h * self.adj.w
    }
    fn out_len(&self) -> usize {
        self.adj.c * self.out_plane()
    }
}

pub(crate) fn conv_transpose2d_forward<T: Scalar>(x: &[T], w: &[T], b: Option<&[T]>, l: &TransposeLayout) -> Vec<T> {
    let g = &l.adj;
    let k = g.patch();
    let in_plane = g.ho * g.wo;
    let mut y = vec![T::ZERO; l.n * l.out_len()];
    let mut col = Vec::new();
    for n in 0..l.n {
        let xn = &x[n * l.in_len()..(n + 1) * l.in_len()];
        let yn = &mut y[n * l.out_len()..(n + 1) * l.out_len()];
        for rows in g.tiles() {
            let p = rows.len() * g.wo;
            col.resize(k * p, T::ZERO);
            // col[k, p] = W^T[k, cin] · x[cin, p]
            T::gemm(
                k,
                l.cin,
                p,
                (w, 1, k as isize),
                (&xn[rows.start * g.wo..], in_plane as isize, 1),
                (&mut col, p as isize, 1),
                false,
            );
            col2im(&col, g, rows, yn);
        }
        if let Some(b) = b {
            let plane = l.out_plane();
            for (co, &bv) in b.iter().enumerate() {
                for v in &mut yn[co * plane..(co + 1) * plane] {
                    *v += bv;
                }
            }
        }
    }
    y
}

pub(crate) fn conv_transpose2d_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    dy: &[T],
    l: &TransposeLayout,
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
    db: Option<&mut [T]>,
) {
    let g = &l.adj;
    let k = g.patch();
    let in_plane = g.ho * g.wo;
    let mut col = Vec::new();
    if dx.is_some() || dw.is_some() {
        for n in 0..l.n {
            let xn = &x[n * l.in_len()..(n + 1) * l.in_len()];
            let dyn_ = &dy[n * l.out_len()..(n + 1) * l.out_len()];
            for rows in g.tiles() {
                let p = rows.len() * g.wo;
                col.resize(k * p, T::ZERO);
                im2col(dyn_, g, rows.clone(), &mut col);
                if let Some(dx) = dx.as_deref_mut() {
                    // dx[cin, p] = W[cin, k] · col[k, p]
                    let dxn = &mut dx[n * l.in_len()..(n + 1) * l.in_len()];
                    T::gemm(
                        l.cin,
                        k,
                        p,
                        (w, k as isize, 1),
                        (&col, p as isize, 1),
                        (&mut dxn[rows.start * g.wo..], in_plane as isize, 1),
                        true,
                    );
                }
                if let Some(dw) = dw.as_deref_mut() {
                    // dW[cin, k] += x[cin, p] · col^T[p, k]
                    T::gemm(
                        l.cin,
                        p,
                        k,
                        (&xn[rows.start * g.wo..], in_plane as isize, 1),
                        (&col, 1, p as isize),
                        (dw, k as isize, 1),
                        true,
                    );
                }
            }
        }
    }
    if let Some(db) = db {
        accumulate_bias_grad(dy, l.n, g.c, l.out_plane(), db);
    }
}
