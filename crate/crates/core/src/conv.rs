//! im2col / col2im lowering used by the convolution op.

use crate::scalar::Scalar;

/// Output extent of a strided window; floor convention.
pub fn conv_out_size(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Lowers `x: [c, h, w]` into `[c*kh*kw, oh*ow]` patch columns.
pub fn im2col<T: Scalar>(
    x: &[T],
    (c, h, w): (usize, usize, usize),
    (kh, kw): (usize, usize),
    stride: usize,
    pad: usize,
    (oh, ow): (usize, usize),
) -> Vec<T> {
    let p = oh * ow;
    let mut cols = vec![T::zero(); c * kh * kw * p];
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ch * kh + ky) * kw + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let drow = &mut dst[oy * ow..(oy + 1) * ow];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            *d = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the image.
pub fn col2im<T: Scalar>(
    cols: &[T],
    (c, h, w): (usize, usize, usize),
    (kh, kw): (usize, usize),
    stride: usize,
    pad: usize,
    (oh, ow): (usize, usize),
) -> Vec<T> {
    let p = oh * ow;
    let mut x = vec![T::zero(); c * h * w];
    for ch in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ch * kh + ky) * kw + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = ch * h * w + iy as usize * w;
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            x[base + ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
    x
}
