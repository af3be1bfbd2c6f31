//! Convolutions expressed as patch unfolding plus matrix products. The
//! unfold/fold pair are adjoint linear maps, so each one's backward pass is
//! the other.

use candle_core::{CpuStorage, CustomOp1, Layout, Shape, Tensor};

use crate::error::Result;

/// Patch geometry over an `N x C x H x W` image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Geom {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
}

impl Geom {
    fn ho(&self) -> usize {
        (self.h + 2 * self.pad - self.k) / self.stride + 1
    }

    fn wo(&self) -> usize {
        (self.w + 2 * self.pad - self.k) / self.stride + 1
    }

    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    /// Calls `f(image_index, column_index)` for every in-bounds tap, per
    /// batch item offset by the caller.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize)) {
        let (ho, wo, k, s, p) = (self.ho(), self.wo(), self.k, self.stride, self.pad);
        let l = ho * wo;
        for ci in 0..self.c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    for oy in 0..ho {
                        let iy = (oy * s + ky) as isize - p as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let img_row = (ci * self.h + iy as usize) * self.w;
                        let col_row = row * l + oy * wo;
                        for ox in 0..wo {
                            let ix = (ox * s + kx) as isize - p as isize;
                            if ix >= 0 && ix < self.w as isize {
                                f(img_row + ix as usize, col_row + ox);
                            }
                        }
                    }
                }
            }
        }
    }
}

fn unfold_slice<T: Copy + Default>(src: &[T], g: &Geom) -> Vec<T> {
    let img = g.c * g.h * g.w;
    let cols = g.rows() * g.ho() * g.wo();
    let n = src.len() / img;
    let mut out = vec![T::default(); n * cols];
    for b in 0..n {
        let (s, o) = (&src[b * img..(b + 1) * img], &mut out[b * cols..(b + 1) * cols]);
        g.for_each_tap(|i, j| o[j] = s[i]);
    }
    out
}

fn fold_slice<T: Copy + Default + std::ops::AddAssign>(src: &[T], g: &Geom) -> Vec<T> {
    let img = g.c * g.h * g.w;
    let cols = g.rows() * g.ho() * g.wo();
    let n = src.len() / cols;
    let mut out = vec![T::default(); n * img];
    for b in 0..n {
        let (s, o) = (&src[b * cols..(b + 1) * cols], &mut out[b * img..(b + 1) * img]);
        g.for_each_tap(|i, j| o[i] += s[j]);
    }
    out
}

fn contiguous<'a>(storage: &'a CpuStorage, layout: &Layout) -> candle_core::Result<(&'a CpuStorage, usize, usize)> {
    let (a, b) = layout
        .contiguous_offsets()
        .ok_or_else(|| candle_core::Error::Msg("unfold ops need contiguous inputs".into()))?;
    Ok((storage, a, b))
}

struct Unfold(Geom);
struct Fold(Geom);

impl CustomOp1 for Unfold {
    fn name(&self) -> &'static str {
        "unfold"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = &self.0;
        let n = layout.dims()[0];
        let (s, a, b) = contiguous(storage, layout)?;
        let out = match s {
            CpuStorage::F32(v) => CpuStorage::F32(unfold_slice(&v[a..b], g)),
            CpuStorage::F64(v) => CpuStorage::F64(unfold_slice(&v[a..b], g)),
            _ => return Err(candle_core::Error::Msg("unfold supports f32 and f64".into())),
        };
        Ok((out, Shape::from((n, g.rows(), g.ho() * g.wo()))))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1(Fold(self.0))?))
    }
}

impl CustomOp1 for Fold {
    fn name(&self) -> &'static str {
        "fold"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = &self.0;
        let n = layout.dims()[0];
        let (s, a, b) = contiguous(storage, layout)?;
        let out = match s {
            CpuStorage::F32(v) => CpuStorage::F32(fold_slice(&v[a..b], g)),
            CpuStorage::F64(v) => CpuStorage::F64(fold_slice(&v[a..b], g)),
            _ => return Err(candle_core::Error::Msg("fold supports f32 and f64".into())),
        };
        Ok((out, Shape::from((n, g.c, g.h, g.w))))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1(Unfold(self.0))?))
    }
}

/// Cross-correlation of `x` (`N x C x H x W`) with `w` (`O x C x k x k`).
pub(crate) fn conv2d(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let (n, c, h, wd) = x.dims4()?;
    let (o, _, k, _) = w.dims4()?;
    let g = Geom {
        c,
        h,
        w: wd,
        k,
        stride,
        pad,
    };
    let cols = x.contiguous()?.apply_op1(Unfold(g))?;
    let y = w.reshape((o, g.rows()))?.broadcast_matmul(&cols)?;
    Ok(y.reshape((n, o, g.ho(), g.wo()))?)
}

/// Transposed convolution of `x` (`N x C x H x W`) with `w` (`C x O x k x k`);
/// the output side is `(H - 1) * stride - 2 * pad + k`.
pub(crate) fn conv_transpose2d(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let (n, c, h, wd) = x.dims4()?;
    let (_, o, k, _) = w.dims4()?;
    let g = Geom {
        c: o,
        h: (h - 1) * stride + k - 2 * pad,
        w: (wd - 1) * stride + k - 2 * pad,
        k,
        stride,
        pad,
    };
    let wm = w.reshape((c, o * k * k))?.t()?.contiguous()?;
    let cols = wm.broadcast_matmul(&x.reshape((n, c, h * wd))?)?;
    Ok(cols.contiguous()?.apply_op1(Fold(g))?)
}
