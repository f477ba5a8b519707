//! Raw buffer kernels: matrix products and im2col convolution.
//!
//! All products accumulate each output element over the reduction index in
//! ascending order, with plain multiply-then-add (no fused multiply-add), so
//! results do not depend on the [`Exec`] variant or on tiling.

use super::{Exec, Real};
use crate::error::{Error, Result};

const COL_TILE: usize = 512;

fn rows_per_task(m: usize) -> usize {
    m.div_ceil(16).max(1)
}

/// `c[m,n] = a[m,k] · b[k,n]`.
pub fn matmul<T: Real>(exec: Exec, a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut c = vec![T::zero(); m * n];
    let rpt = rows_per_task(m);
    exec.for_each_chunk_mut(&mut c, rpt * n, |ci, chunk| {
        let i0 = ci * rpt;
        let rows = chunk.len() / n;
        for j0 in (0..n).step_by(COL_TILE) {
            let j1 = (j0 + COL_TILE).min(n);
            for r in 0..rows {
                let arow = &a[(i0 + r) * k..(i0 + r + 1) * k];
                let crow = &mut chunk[r * n + j0..r * n + j1];
                for (p, &av) in arow.iter().enumerate() {
                    let brow = &b[p * n + j0..p * n + j1];
                    for (cv, &bv) in crow.iter_mut().zip(brow) {
                        *cv += av * bv;
                    }
                }
            }
        }
    });
    c
}

/// `c[m,n] = a[k,m]ᵀ · b[k,n]`.
pub fn matmul_tn<T: Real>(exec: Exec, a: &[T], b: &[T], k: usize, m: usize, n: usize) -> Vec<T> {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    let mut c = vec![T::zero(); m * n];
    let rpt = rows_per_task(m);
    exec.for_each_chunk_mut(&mut c, rpt * n, |ci, chunk| {
        let i0 = ci * rpt;
        let rows = chunk.len() / n;
        for j0 in (0..n).step_by(COL_TILE) {
            let j1 = (j0 + COL_TILE).min(n);
            for r in 0..rows {
                let crow = &mut chunk[r * n + j0..r * n + j1];
                for p in 0..k {
                    let av = a[p * m + i0 + r];
                    let brow = &b[p * n + j0..p * n + j1];
                    for (cv, &bv) in crow.iter_mut().zip(brow) {
                        *cv += av * bv;
                    }
                }
            }
        }
    });
    c
}

/// `c[m,n] = a[m,k] · b[n,k]ᵀ`.
pub fn matmul_nt<T: Real>(exec: Exec, a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    let mut c = vec![T::zero(); m * n];
    let rpt = rows_per_task(m);
    exec.for_each_chunk_mut(&mut c, rpt * n, |ci, chunk| {
        let i0 = ci * rpt;
        for (r, crow) in chunk.chunks_mut(n).enumerate() {
            let arow = &a[(i0 + r) * k..(i0 + r + 1) * k];
            for (j, cv) in crow.iter_mut().enumerate() {
                let brow = &b[j * k..(j + 1) * k];
                let mut acc = T::zero();
                for (&x, &y) in arow.iter().zip(brow) {
                    acc += x * y;
                }
                *cv = acc;
            }
        }
    });
    c
}

pub fn transpose<T: Real>(a: &[T], m: usize, n: usize) -> Vec<T> {
    let mut t = vec![T::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            t[j * m + i] = a[i * n + j];
        }
    }
    t
}

/// Geometry of a 2-D cross-correlation over a `[cin, h, w]` input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
    pub hout: usize,
    pub wout: usize,
}

impl ConvGeom {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        cin: usize,
        h: usize,
        w: usize,
        cout: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> Result<Self> {
        if groups == 0 || !cin.is_multiple_of(groups) || !cout.is_multiple_of(groups) {
            return Err(Error::dim(format!(
                "channels {cin}->{cout} not divisible by groups {groups}"
            )));
        }
        if stride == 0 {
            return Err(Error::dim("stride must be positive"));
        }
        let span_h = h + 2 * pad;
        let span_w = w + 2 * pad;
        if span_h < kh || span_w < kw {
            return Err(Error::dim(format!(
                "kernel {kh}x{kw} larger than padded input {span_h}x{span_w}: non-positive output size"
            )));
        }
        Ok(Self {
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            stride,
            pad,
            groups,
            hout: (span_h - kh) / stride + 1,
            wout: (span_w - kw) / stride + 1,
        })
    }

    pub fn cin_per_group(&self) -> usize {
        self.cin / self.groups
    }

    pub fn cout_per_group(&self) -> usize {
        self.cout / self.groups
    }

    /// Rows of one group's column matrix: `cin_g · kh · kw`.
    pub fn col_rows(&self) -> usize {
        self.cin_per_group() * self.kh * self.kw
    }

    pub fn out_positions(&self) -> usize {
        self.hout * self.wout
    }

    /// Multiply-accumulate count of the forward pass.
    pub fn macs(&self) -> u64 {
        (self.kh * self.kw * self.cin_per_group() * self.cout * self.hout * self.wout) as u64
    }
}

/// Unfolds one group of `x` into a `[col_rows, hout·wout]` matrix.
pub fn im2col<T: Real>(x: &[T], g: &ConvGeom, group: usize) -> Vec<T> {
    let cin_g = g.cin_per_group();
    let p = g.out_positions();
    let mut cols = vec![T::zero(); g.col_rows() * p];
    for icl in 0..cin_g {
        let ic = group * cin_g + icl;
        let plane = &x[ic * g.h * g.w..(ic + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (icl * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.hout {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wout {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[oy * g.wout + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: accumulates `cols` back into group `group` of `x`.
pub fn col2im<T: Real>(cols: &[T], g: &ConvGeom, group: usize, x: &mut [T]) {
    let cin_g = g.cin_per_group();
    let p = g.out_positions();
    for icl in 0..cin_g {
        let ic = group * cin_g + icl;
        let plane = &mut x[ic * g.h * g.w..(ic + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (icl * g.kh + ky) * g.kw + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.hout {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wout {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.wout + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Forward cross-correlation. `w` is `[cout, cin/groups, kh, kw]`.
pub fn conv2d_forward<T: Real>(
    exec: Exec,
    x: &[T],
    w: &[T],
    bias: Option<&[T]>,
    g: &ConvGeom,
) -> Vec<T> {
    let p = g.out_positions();
    let k = g.col_rows();
    let cout_g = g.cout_per_group();
    let mut out = if g.groups == 1 {
        let cols = im2col(x, g, 0);
        matmul(exec, w, &cols, g.cout, k, p)
    } else {
        let per_group = exec.map(g.groups, |grp| {
            let cols = im2col(x, g, grp);
            let wg = &w[grp * cout_g * k..(grp + 1) * cout_g * k];
            matmul(Exec::Sequential, wg, &cols, cout_g, k, p)
        });
        per_group.concat()
    };
    if let Some(b) = bias {
        for (oc, row) in out.chunks_mut(p).enumerate() {
            for v in row {
                *v += b[oc];
            }
        }
    }
    out
}

/// Gradients of [`conv2d_forward`] w.r.t. input, weight and bias.
pub fn conv2d_backward<T: Real>(
    exec: Exec,
    x: &[T],
    w: &[T],
    dout: &[T],
    g: &ConvGeom,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let p = g.out_positions();
    let k = g.col_rows();
    let cout_g = g.cout_per_group();
    let dbias: Vec<T> = dout.chunks(p).map(|row| row.iter().copied().sum()).collect();
    let per_group = exec.map(g.groups, |grp| {
        let inner = if g.groups == 1 { exec } else { Exec::Sequential };
        let cols = im2col(x, g, grp);
        let wg = &w[grp * cout_g * k..(grp + 1) * cout_g * k];
        let dg = &dout[grp * cout_g * p..(grp + 1) * cout_g * p];
        let dw = matmul_nt(inner, dg, &cols, cout_g, p, k);
        let dcols = matmul_tn(inner, wg, dg, cout_g, k, p);
        (dw, dcols)
    });
    let mut dx = vec![T::zero(); x.len()];
    let mut dw = Vec::with_capacity(w.len());
    for (grp, (dwg, dcols)) in per_group.into_iter().enumerate() {
        col2im(&dcols, g, grp, &mut dx);
        dw.extend(dwg);
    }
    (dx, dw, dbias)
}

/// Geometry of a transposed convolution `[cin, h, w] -> [cout, hout, wout]`
/// with `hout = (h-1)·stride - 2·pad + k + output_pad`.
///
/// Stored as the adjoint cross-correlation that maps `[cout, hout, wout]`
/// back to `[cin, h, w]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvTransposeGeom {
    pub adjoint: ConvGeom,
}

impl ConvTransposeGeom {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        cin: usize,
        h: usize,
        w: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        output_pad: usize,
    ) -> Result<Self> {
        if output_pad >= stride {
            return Err(Error::dim("output padding must be smaller than stride"));
        }
        let grow = |n: usize| ((n - 1) * stride + k + output_pad).checked_sub(2 * pad);
        let (hout, wout) = match (grow(h), grow(w)) {
            (Some(a), Some(b)) if a > 0 && b > 0 => (a, b),
            _ => return Err(Error::dim("transposed convolution has non-positive output size")),
        };
        let adjoint = ConvGeom::new(cout, hout, wout, cin, k, k, stride, pad, 1)?;
        if adjoint.hout != h || adjoint.wout != w {
            return Err(Error::dim("inconsistent transposed convolution geometry"));
        }
        Ok(Self { adjoint })
    }

    #[allow(clippy::misnamed_getters)]
    pub fn cin(&self) -> usize {
        self.adjoint.cout
    }

    #[allow(clippy::misnamed_getters)]
    pub fn cout(&self) -> usize {
        self.adjoint.cin
    }

    pub fn out_hw(&self) -> (usize, usize) {
        (self.adjoint.h, self.adjoint.w)
    }

    pub fn macs(&self) -> u64 {
        self.adjoint.macs()
    }
}

/// Forward transposed convolution. `w` is `[cin, cout, k, k]`.
pub fn conv_transpose2d_forward<T: Real>(
    exec: Exec,
    x: &[T],
    w: &[T],
    bias: Option<&[T]>,
    g: &ConvTransposeGeom,
) -> Vec<T> {
    let a = &g.adjoint;
    let k = a.col_rows();
    let p = a.out_positions();
    let cols = matmul_tn(exec, w, x, g.cin(), k, p);
    let (ho, wo) = g.out_hw();
    let mut out = vec![T::zero(); g.cout() * ho * wo];
    col2im(&cols, a, 0, &mut out);
    if let Some(b) = bias {
        for (oc, plane) in out.chunks_mut(ho * wo).enumerate() {
            for v in plane {
                *v += b[oc];
            }
        }
    }
    out
}

pub fn conv_transpose2d_backward<T: Real>(
    exec: Exec,
    x: &[T],
    w: &[T],
    dout: &[T],
    g: &ConvTransposeGeom,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let a = &g.adjoint;
    let k = a.col_rows();
    let p = a.out_positions();
    let (ho, wo) = g.out_hw();
    let dbias: Vec<T> = dout
        .chunks(ho * wo)
        .map(|plane| plane.iter().copied().sum())
        .collect();
    let dcols = im2col(dout, a, 0);
    let dx = matmul(exec, w, &dcols, g.cin(), k, p);
    let dw = matmul_nt(exec, x, &dcols, g.cin(), p, k);
    (dx, dw, dbias)
}
