//! Slice-level kernels behind the graph ops. Everything here works on one
//! batch item at a time so results never depend on how a batch is composed.

use crate::tensor::{gemm, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        (
            (self.h + 2 * self.pad - self.k) / self.stride + 1,
            (self.w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    pub fn patch_len(&self) -> usize {
        self.c_in * self.k * self.k
    }

    /// Pointwise convolutions read the input directly instead of a patch matrix.
    pub fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    /// Valid output range `[lo, hi)` along one axis for kernel offset `kk`
    /// when the stride is 1.
    fn unit_stride_range(&self, extent: usize, kk: usize, out: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(kk);
        let hi = (extent + self.pad).saturating_sub(kk).min(out);
        (lo.min(hi), hi)
    }
}

/// Unfolds one `c×h×w` image into a `(c·k·k) × (ho·wo)` patch matrix.
/// Sum with eight independent accumulators so the loop vectorizes; the
/// reduction order is fixed, so results are deterministic.
pub fn sum<T: Scalar>(x: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let mut chunks = x.chunks_exact(8);
    for ch in &mut chunks {
        for (a, &v) in acc.iter_mut().zip(ch) {
            *a += v;
        }
    }
    let tail: T = chunks.remainder().iter().copied().sum();
    acc.iter().copied().sum::<T>() + tail
}

pub fn im2col<T: Scalar>(g: &ConvGeom, x: &[T], col: &mut [T]) {
    let (ho, wo) = g.out_hw();
    let hwo = ho * wo;
    let (k, s, p) = (g.k, g.stride, g.pad);
    for ci in 0..g.c_in {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut col[row * hwo..(row + 1) * hwo];
                for oy in 0..ho {
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    let iy = (oy * s + ky) as isize - p as isize;
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    if s == 1 {
                        let (lo, hi) = g.unit_stride_range(g.w, kx, wo);
                        line[..lo].fill(T::zero());
                        line[hi..].fill(T::zero());
                        if hi > lo {
                            let off = lo + kx - p;
                            line[lo..hi].copy_from_slice(&src[off..off + (hi - lo)]);
                        }
                    } else {
                        for (ox, v) in line.iter_mut().enumerate() {
                            let ix = (ox * s + kx) as isize - p as isize;
                            *v = if ix < 0 || ix >= g.w as isize { T::zero() } else { src[ix as usize] };
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates a patch matrix back into an image.
pub fn col2im_add<T: Scalar>(g: &ConvGeom, col: &[T], dx: &mut [T]) {
    let (ho, wo) = g.out_hw();
    let hwo = ho * wo;
    let (k, s, p) = (g.k, g.stride, g.pad);
    for ci in 0..g.c_in {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &col[row * hwo..(row + 1) * hwo];
                for oy in 0..ho {
                    let line = &src[oy * wo..(oy + 1) * wo];
                    let iy = (oy * s + ky) as isize - p as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    if s == 1 {
                        let (lo, hi) = g.unit_stride_range(g.w, kx, wo);
                        if hi > lo {
                            let off = lo + kx - p;
                            for (d, &v) in dst[off..off + (hi - lo)].iter_mut().zip(&line[lo..hi]) {
                                *d += v;
                            }
                        }
                    } else {
                        for (ox, &v) in line.iter().enumerate() {
                            let ix = (ox * s + kx) as isize - p as isize;
                            if ix >= 0 && (ix as usize) < g.w {
                                dst[ix as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Forward convolution of a single image. `out` is `c_out × ho·wo`.
pub fn conv2d_item<T: Scalar>(
    g: &ConvGeom,
    x: &[T],
    weight: &[T],
    bias: Option<&[T]>,
    col: &mut Vec<T>,
    out: &mut [T],
) {
    let (ho, wo) = g.out_hw();
    let hwo = ho * wo;
    let kk = g.patch_len();
    let patches: &[T] = if g.is_pointwise() {
        x
    } else {
        col.resize(kk * hwo, T::zero());
        im2col(g, x, col);
        col
    };
    gemm(g.c_out, kk, hwo, T::one(), weight, (kk, 1), patches, (hwo, 1), T::zero(), out, (hwo, 1));
    if let Some(b) = bias {
        for (o, &bv) in b.iter().enumerate() {
            for v in &mut out[o * hwo..(o + 1) * hwo] {
                *v += bv;
            }
        }
    }
}

/// Backward convolution of a single image. Accumulates into whichever of the
/// input, weight and bias gradients are requested.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_item_backward<T: Scalar>(
    g: &ConvGeom,
    x: &[T],
    weight: &[T],
    dout: &[T],
    dx: Option<&mut [T]>,
    dw: Option<&mut [T]>,
    db: Option<&mut [T]>,
    col: &mut Vec<T>,
) {
    let (ho, wo) = g.out_hw();
    let hwo = ho * wo;
    let kk = g.patch_len();
    if let Some(db) = db {
        for (o, d) in db.iter_mut().enumerate() {
            *d += dout[o * hwo..(o + 1) * hwo].iter().copied().sum::<T>();
        }
    }
    if let Some(dw) = dw {
        let patches: &[T] = if g.is_pointwise() {
            x
        } else {
            col.resize(kk * hwo, T::zero());
            im2col(g, x, col);
            col
        };
        gemm(g.c_out, hwo, kk, T::one(), dout, (hwo, 1), patches, (1, hwo), T::one(), dw, (kk, 1));
    }
    if let Some(dx) = dx {
        if g.is_pointwise() {
            gemm(kk, g.c_out, hwo, T::one(), weight, (1, kk), dout, (hwo, 1), T::one(), dx, (hwo, 1));
        } else {
            col.resize(kk * hwo, T::zero());
            gemm(kk, g.c_out, hwo, T::one(), weight, (1, kk), dout, (hwo, 1), T::zero(), col, (hwo, 1));
            col2im_add(g, col, dx);
        }
    }
}

/// Valid-mode separable correlation of one plane: `out[i][j] = Σ th[a]·tw[b]·x[i+a][j+b]`.
pub fn filter_plane<T: Scalar>(x: &[T], h: usize, w: usize, th: &[T], tw: &[T], tmp: &mut Vec<T>, out: &mut [T]) {
    let wo = w + 1 - tw.len();
    let ho = h + 1 - th.len();
    tmp.resize(h * wo, T::zero());
    for i in 0..h {
        let row = &x[i * w..(i + 1) * w];
        let trow = &mut tmp[i * wo..(i + 1) * wo];
        for (j, t) in trow.iter_mut().enumerate() {
            let mut acc = T::zero();
            for (b, &tb) in tw.iter().enumerate() {
                acc += tb * row[j + b];
            }
            *t = acc;
        }
    }
    for i in 0..ho {
        let orow = &mut out[i * wo..(i + 1) * wo];
        orow.fill(T::zero());
        for (a, &ta) in th.iter().enumerate() {
            let trow = &tmp[(i + a) * wo..(i + a + 1) * wo];
            for (o, &t) in orow.iter_mut().zip(trow) {
                *o += ta * t;
            }
        }
    }
}

/// Adjoint of [`filter_plane`], accumulating into `dx`.
pub fn filter_plane_backward<T: Scalar>(
    dout: &[T],
    h: usize,
    w: usize,
    th: &[T],
    tw: &[T],
    tmp: &mut Vec<T>,
    dx: &mut [T],
) {
    let wo = w + 1 - tw.len();
    let ho = h + 1 - th.len();
    tmp.clear();
    tmp.resize(h * wo, T::zero());
    for i in 0..ho {
        let orow = &dout[i * wo..(i + 1) * wo];
        for (a, &ta) in th.iter().enumerate() {
            let trow = &mut tmp[(i + a) * wo..(i + a + 1) * wo];
            for (t, &o) in trow.iter_mut().zip(orow) {
                *t += ta * o;
            }
        }
    }
    for i in 0..h {
        let trow = &tmp[i * wo..(i + 1) * wo];
        let drow = &mut dx[i * w..(i + 1) * w];
        for (j, &t) in trow.iter().enumerate() {
            for (b, &tb) in tw.iter().enumerate() {
                drow[j + b] += tb * t;
            }
        }
    }
}

/// Channel permutation for space-to-depth with block `r`: returns, for every
/// output element of one item, the index of the input element it copies.
pub fn space_to_depth_index(c: usize, h: usize, w: usize, r: usize) -> Vec<usize> {
    let (ho, wo) = (h / r, w / r);
    let mut idx = Vec::with_capacity(c * h * w);
    for ci in 0..c {
        for dy in 0..r {
            for dx in 0..r {
                for i in 0..ho {
                    for j in 0..wo {
                        idx.push(ci * h * w + (i * r + dy) * w + j * r + dx);
                    }
                }
            }
        }
    }
    idx
}
