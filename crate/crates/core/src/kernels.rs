//! Raw NHWC kernels used by the graph ops: convolution via im2col + GEMM,
//! nearest and bilinear upsampling, and their adjoints.

use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub cout: usize,
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

    fn patch_len(&self) -> usize {
        self.k * self.k * self.cin
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Writes the patch matrix of one image into `col`, which must be zeroed.
/// In NHWC the `k` horizontal taps of one kernel row are contiguous, so
/// interior rows are a single copy.
fn im2col<T: Real>(g: &ConvGeom, x: &[T], col: &mut [T]) {
    let (ho, wo) = g.out_hw();
    let pl = g.patch_len();
    let span = g.k * g.cin;
    for oy in 0..ho {
        for ox in 0..wo {
            let row = &mut col[(oy * wo + ox) * pl..(oy * wo + ox + 1) * pl];
            let x0 = (ox * g.stride) as isize - g.pad as isize;
            let interior = x0 >= 0 && x0 as usize + g.k <= g.w;
            for ky in 0..g.k {
                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                let base = iy as usize * g.w;
                let dst = &mut row[ky * span..(ky + 1) * span];
                if interior {
                    let src = (base + x0 as usize) * g.cin;
                    dst.copy_from_slice(&x[src..src + span]);
                } else {
                    for kx in 0..g.k {
                        let ix = x0 + kx as isize;
                        if ix >= 0 && ix < g.w as isize {
                            let src = (base + ix as usize) * g.cin;
                            dst[kx * g.cin..(kx + 1) * g.cin].copy_from_slice(&x[src..src + g.cin]);
                        }
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Real>(g: &ConvGeom, col: &[T], dx: &mut [T]) {
    let (ho, wo) = g.out_hw();
    let pl = g.patch_len();
    for oy in 0..ho {
        for ox in 0..wo {
            let row = &col[(oy * wo + ox) * pl..(oy * wo + ox + 1) * pl];
            for ky in 0..g.k {
                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                for kx in 0..g.k {
                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                    if ix < 0 || ix >= g.w as isize {
                        continue;
                    }
                    let src = &row[(ky * g.k + kx) * g.cin..(ky * g.k + kx + 1) * g.cin];
                    let d = (iy as usize * g.w + ix as usize) * g.cin;
                    for (o, &v) in dx[d..d + g.cin].iter_mut().zip(src) {
                        *o += v;
                    }
                }
            }
        }
    }
}

/// Patch matrix of the whole batch, `[n * ho * wo, k * k * cin]`.
fn batch_im2col<T: Real>(g: &ConvGeom, x: &[T]) -> Vec<T> {
    let (ho, wo) = g.out_hw();
    let block = ho * wo * g.patch_len();
    let in_sz = g.h * g.w * g.cin;
    let mut col = vec![T::zero(); g.n * block];
    for (c, xn) in col.chunks_exact_mut(block).zip(x.chunks_exact(in_sz)) {
        im2col(g, xn, c);
    }
    col
}

/// `weight` is laid out `[k, k, cin, cout]`.
pub fn conv2d_forward<T: Real>(g: &ConvGeom, x: &[T], weight: &[T], bias: &[T]) -> Vec<T> {
    let (ho, wo) = g.out_hw();
    let rows = ho * wo;
    let pl = g.patch_len();
    let mut out = vec![T::zero(); g.n * rows * g.cout];
    for row in out.chunks_exact_mut(g.cout) {
        row.copy_from_slice(bias);
    }
    let ld = |c: usize| (c as isize, 1isize);
    if g.is_pointwise() {
        T::gemm(
            g.n * rows,
            pl,
            g.cout,
            T::one(),
            x,
            ld(pl),
            weight,
            ld(g.cout),
            T::one(),
            &mut out,
            ld(g.cout),
        );
        return out;
    }
    let col = batch_im2col(g, x);
    T::gemm(
        g.n * rows,
        pl,
        g.cout,
        T::one(),
        &col,
        ld(pl),
        weight,
        ld(g.cout),
        T::one(),
        &mut out,
        ld(g.cout),
    );
    out
}

/// Accumulates input, weight and bias gradients. Any of the outputs may be
/// skipped by passing `None`.
pub fn conv2d_backward<T: Real>(
    g: &ConvGeom,
    x: &[T],
    weight: &[T],
    dout: &[T],
    dx: Option<&mut [T]>,
    dw: Option<&mut [T]>,
    db: Option<&mut [T]>,
) {
    let (ho, wo) = g.out_hw();
    let rows = ho * wo;
    let pl = g.patch_len();
    let ld = |c: usize| (c as isize, 1isize);
    if let Some(db) = db {
        for row in dout.chunks_exact(g.cout) {
            for (d, &v) in db.iter_mut().zip(row) {
                *d += v;
            }
        }
    }
    if g.is_pointwise() {
        let m = g.n * rows;
        if let Some(dw) = dw {
            // dW += X^T dOut
            T::gemm(pl, m, g.cout, T::one(), x, (1, pl as isize), dout, ld(g.cout), T::one(), dw, ld(g.cout));
        }
        if let Some(dx) = dx {
            // dX += dOut W^T
            T::gemm(m, g.cout, pl, T::one(), dout, ld(g.cout), weight, (1, g.cout as isize), T::one(), dx, ld(pl));
        }
        return;
    }
    let m = g.n * rows;
    if let Some(dw) = dw {
        let col = batch_im2col(g, x);
        T::gemm(pl, m, g.cout, T::one(), &col, (1, pl as isize), dout, ld(g.cout), T::one(), dw, ld(g.cout));
    }
    if let Some(dx) = dx {
        let mut dcol = vec![T::zero(); m * pl];
        T::gemm(m, g.cout, pl, T::one(), dout, ld(g.cout), weight, (1, g.cout as isize), T::zero(), &mut dcol, ld(pl));
        let in_sz = g.h * g.w * g.cin;
        for (dc, dxn) in dcol.chunks_exact(rows * pl).zip(dx.chunks_exact_mut(in_sz)) {
            col2im_add(g, dc, dxn);
        }
    }
}

/// Nearest-neighbour upsampling by an integer factor.
pub fn upsample_nearest<T: Real>(x: &[T], n: usize, h: usize, w: usize, c: usize, f: usize) -> Vec<T> {
    let (ho, wo) = (h * f, w * f);
    let mut out = vec![T::zero(); n * ho * wo * c];
    for b in 0..n {
        for oy in 0..ho {
            for ox in 0..wo {
                let s = ((b * h + oy / f) * w + ox / f) * c;
                let d = ((b * ho + oy) * wo + ox) * c;
                out[d..d + c].copy_from_slice(&x[s..s + c]);
            }
        }
    }
    out
}

pub fn upsample_nearest_backward<T: Real>(dout: &[T], dx: &mut [T], n: usize, h: usize, w: usize, c: usize, f: usize) {
    let (ho, wo) = (h * f, w * f);
    for b in 0..n {
        for oy in 0..ho {
            for ox in 0..wo {
                let s = ((b * h + oy / f) * w + ox / f) * c;
                let d = ((b * ho + oy) * wo + ox) * c;
                for i in 0..c {
                    dx[s + i] += dout[d + i];
                }
            }
        }
    }
}

/// Source taps for half-pixel-centred bilinear interpolation along one axis.
fn bilinear_taps(len: usize, f: usize) -> Vec<(usize, usize, f64)> {
    (0..len * f)
        .map(|o| {
            let src = ((o as f64 + 0.5) / f as f64 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(len - 1);
            let i1 = (i0 + 1).min(len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

pub fn upsample_bilinear<T: Real>(x: &[T], n: usize, h: usize, w: usize, c: usize, f: usize) -> Vec<T> {
    let ty = bilinear_taps(h, f);
    let tx = bilinear_taps(w, f);
    let (ho, wo) = (h * f, w * f);
    let mut out = vec![T::zero(); n * ho * wo * c];
    for b in 0..n {
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let wts = [
                    (y0, x0, (1.0 - fy) * (1.0 - fx)),
                    (y0, x1, (1.0 - fy) * fx),
                    (y1, x0, fy * (1.0 - fx)),
                    (y1, x1, fy * fx),
                ];
                let d = ((b * ho + oy) * wo + ox) * c;
                for &(yy, xx, wt) in &wts {
                    let wt = T::lit(wt);
                    let s = ((b * h + yy) * w + xx) * c;
                    for i in 0..c {
                        out[d + i] += wt * x[s + i];
                    }
                }
            }
        }
    }
    out
}

pub fn upsample_bilinear_backward<T: Real>(dout: &[T], dx: &mut [T], n: usize, h: usize, w: usize, c: usize, f: usize) {
    let ty = bilinear_taps(h, f);
    let tx = bilinear_taps(w, f);
    let (ho, wo) = (h * f, w * f);
    for b in 0..n {
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let wts = [
                    (y0, x0, (1.0 - fy) * (1.0 - fx)),
                    (y0, x1, (1.0 - fy) * fx),
                    (y1, x0, fy * (1.0 - fx)),
                    (y1, x1, fy * fx),
                ];
                let d = ((b * ho + oy) * wo + ox) * c;
                for &(yy, xx, wt) in &wts {
                    let wt = T::lit(wt);
                    let s = ((b * h + yy) * w + xx) * c;
                    for i in 0..c {
                        dx[s + i] += wt * dout[d + i];
                    }
                }
            }
        }
    }
}
