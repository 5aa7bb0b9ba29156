//! Convolution lowering (im2col / col2im) and other hot inner loops.

use crate::scalar::Scalar;

/// Geometry of a 2-D convolution on one sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(c: usize, h: usize, w: usize, kh: usize, kw: usize, stride: usize, pad: usize) -> Option<Self> {
        if h + 2 * pad < kh || w + 2 * pad < kw || stride == 0 {
            return None;
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        Some(Self { c, h, w, kh, kw, stride, pad, oh, ow })
    }

    pub fn col_rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    pub fn col_cols(&self) -> usize {
        self.oh * self.ow
    }

    pub fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    /// Range of output columns whose input column `ox*stride + kx - pad`
    /// lies inside the image.
    #[inline]
    fn valid_ox(&self, kx: usize) -> (usize, usize) {
        let s = self.stride;
        // smallest ox with ox*s + kx >= pad
        let lo = if kx >= self.pad { 0 } else { (self.pad - kx).div_ceil(s) };
        // largest ox with ox*s + kx - pad <= w - 1
        let hi = if self.w + self.pad > kx { (self.w + self.pad - kx - 1) / s + 1 } else { 0 };
        (lo.min(self.ow), hi.min(self.ow).max(lo.min(self.ow)))
    }
}

/// Lowers one `[c, h, w]` sample into a `[c*kh*kw, oh*ow]` matrix.
pub(crate) fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, col: &mut [T]) {
    let ncols = g.col_cols();
    debug_assert_eq!(col.len(), g.col_rows() * ncols);
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut col[row * ncols..(row + 1) * ncols];
                let (lo, hi) = g.valid_ox(kx);
                for oy in 0..g.oh {
                    let out = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy as usize >= g.h {
                        out.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    out[..lo].fill(T::zero());
                    out[hi..].fill(T::zero());
                    if g.stride == 1 {
                        let start = lo + kx - g.pad;
                        out[lo..hi].copy_from_slice(&src[start..start + (hi - lo)]);
                    } else {
                        for (ox, o) in out[lo..hi].iter_mut().enumerate() {
                            *o = src[(ox + lo) * g.stride + kx - g.pad];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-and-adds a column matrix into `dx`.
pub(crate) fn col2im<T: Scalar>(col: &[T], g: &ConvGeom, dx: &mut [T]) {
    let ncols = g.col_cols();
    for c in 0..g.c {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &col[row * ncols..(row + 1) * ncols];
                let (lo, hi) = g.valid_ox(kx);
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy as usize >= g.h {
                        continue;
                    }
                    let s = &src[oy * g.ow..(oy + 1) * g.ow];
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    if g.stride == 1 {
                        let start = lo + kx - g.pad;
                        for (d, &v) in dst[start..start + (hi - lo)].iter_mut().zip(&s[lo..hi]) {
                            *d += v;
                        }
                    } else {
                        for ox in lo..hi {
                            dst[ox * g.stride + kx - g.pad] += s[ox];
                        }
                    }
                }
            }
        }
    }
}

/// Nearest-neighbour x2 upsampling of `planes` planes of `h x w`.
pub(crate) fn upsample2x<T: Scalar>(x: &[T], planes: usize, h: usize, w: usize, out: &mut [T]) {
    let (oh, ow) = (2 * h, 2 * w);
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for y in 0..h {
            let srow = &src[y * w..(y + 1) * w];
            let (r0, r1) = dst[2 * y * ow..(2 * y + 2) * ow].split_at_mut(ow);
            for (x, &v) in srow.iter().enumerate() {
                r0[2 * x] = v;
                r0[2 * x + 1] = v;
            }
            r1.copy_from_slice(r0);
        }
    }
}

pub(crate) fn upsample2x_backward<T: Scalar>(gy: &[T], planes: usize, h: usize, w: usize, gx: &mut [T]) {
    let (oh, ow) = (2 * h, 2 * w);
    for p in 0..planes {
        let src = &gy[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut gx[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            let r0 = &src[2 * y * ow..(2 * y + 1) * ow];
            let r1 = &src[(2 * y + 1) * ow..(2 * y + 2) * ow];
            for x in 0..w {
                dst[y * w + x] += r0[2 * x] + r0[2 * x + 1] + r1[2 * x] + r1[2 * x + 1];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use alloc::vec::Vec;

    fn im2col_naive(x: &[f64], g: &ConvGeom) -> Vec<f64> {
        let mut col = vec![0.0; g.col_rows() * g.col_cols()];
        for c in 0..g.c {
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let row = (c * g.kh + ky) * g.kw + kx;
                    for oy in 0..g.oh {
                        for ox in 0..g.ow {
                            let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if iy >= 0 && ix >= 0 && (iy as usize) < g.h && (ix as usize) < g.w {
                                col[row * g.col_cols() + oy * g.ow + ox] =
                                    x[(c * g.h + iy as usize) * g.w + ix as usize];
                            }
                        }
                    }
                }
            }
        }
        col
    }

    #[test]
    fn im2col_matches_naive_over_geometries() {
        for &(h, w, k, s, p) in &[(5, 7, 3, 1, 1), (8, 8, 4, 2, 1), (4, 4, 4, 1, 0), (6, 5, 3, 2, 1), (3, 3, 1, 1, 0)] {
            let g = ConvGeom::new(2, h, w, k, k, s, p).unwrap();
            let x: Vec<f64> = (0..2 * h * w).map(|i| i as f64 * 0.5 - 3.0).collect();
            let mut col = vec![f64::NAN; g.col_rows() * g.col_cols()];
            im2col(&x, &g, &mut col);
            assert_eq!(col, im2col_naive(&x, &g), "geometry {:?}", (h, w, k, s, p));
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)>
        for &(h, w, k, s, p) in &[(5, 7, 3, 1, 1), (8, 8, 4, 2, 1), (6, 5, 3, 2, 1)] {
            let g = ConvGeom::new(3, h, w, k, k, s, p).unwrap();
            let x: Vec<f64> = (0..3 * h * w).map(|i| ((i * 7919) % 13) as f64 - 6.0).collect();
            let y: Vec<f64> = (0..g.col_rows() * g.col_cols()).map(|i| ((i * 104729) % 11) as f64 - 5.0).collect();
            let mut col = vec![0.0; y.len()];
            im2col(&x, &g, &mut col);
            let lhs: f64 = col.iter().zip(&y).map(|(a, b)| a * b).sum();
            let mut dx = vec![0.0; x.len()];
            col2im(&y, &g, &mut dx);
            let rhs: f64 = x.iter().zip(&dx).map(|(a, b)| a * b).sum();
            assert_eq!(lhs, rhs);
        }
    }

    #[test]
    fn upsample_roundtrip_sums_blocks() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let mut up = [0.0; 16];
        upsample2x(&x, 1, 2, 2, &mut up);
        assert_eq!(up[..4], [1.0, 1.0, 2.0, 2.0]);
        assert_eq!(up[12..], [3.0, 3.0, 4.0, 4.0]);
        let mut gx = [0.0; 4];
        upsample2x_backward(&up, 1, 2, 2, &mut gx);
        assert_eq!(gx, [4.0, 8.0, 12.0, 16.0]);
    }
}
