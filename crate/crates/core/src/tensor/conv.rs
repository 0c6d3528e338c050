//! im2col lowering for 2-D cross-correlation.

use crate::scalar::Real;

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(cin: usize, h: usize, w: usize, kh: usize, kw: usize, stride: usize, pad: usize) -> Option<Self> {
        if stride == 0 || h + 2 * pad < kh || w + 2 * pad < kw {
            return None;
        }
        Some(Self {
            cin,
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (w + 2 * pad - kw) / stride + 1,
        })
    }

    pub fn patch(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    pub fn positions(&self) -> usize {
        self.ho * self.wo
    }

    /// Input coordinate touched by output `(oy, ox)` at kernel tap `(ky, kx)`.
    #[inline]
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
        let ix = (ox * self.stride + kx) as isize - self.pad as isize;
        if iy < 0 || ix < 0 || iy >= self.h as isize || ix >= self.w as isize {
            None
        } else {
            Some((iy as usize, ix as usize))
        }
    }
}

/// Lays input patches out as a `[cin*kh*kw, ho*wo]` matrix.
pub(crate) fn im2col<T: Real>(g: &ConvGeom, x: &[T]) -> Vec<T> {
    let p = g.positions();
    let mut cols = vec![T::zero(); g.patch() * p];
    for c in 0..g.cin {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    for ox in 0..g.wo {
                        if let Some((iy, ix)) = g.source(oy, ox, ky, kx) {
                            dst[oy * g.wo + ox] = x[(c * g.h + iy) * g.w + ix];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-adds a column matrix back onto the input layout.
pub(crate) fn col2im_add<T: Real>(g: &ConvGeom, cols: &[T], dx: &mut [T]) {
    let p = g.positions();
    for c in 0..g.cin {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    for ox in 0..g.wo {
                        if let Some((iy, ix)) = g.source(oy, ox, ky, kx) {
                            dx[(c * g.h + iy) * g.w + ix] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}
