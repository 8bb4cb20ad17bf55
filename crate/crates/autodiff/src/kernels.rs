//! Raw loops behind the graph operators. Everything here is shape-checked by
//! the caller.

use crate::float::Float;

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn col_rows(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Input coordinate sampled by output `o` and tap `t`, or `None` inside padding.
    #[inline]
    fn src(&self, o: usize, t: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.stride + t * self.dilation) as isize - self.padding as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }
}

pub(crate) fn im2col<T: Float>(input: &[T], g: &ConvGeom) -> Vec<T> {
    let n = g.col_cols();
    let mut col = vec![T::zero(); g.col_rows() * n];
    for c in 0..g.c_in {
        let plane = &input[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut col[row * n..(row + 1) * n];
                for oy in 0..g.out_h {
                    let Some(iy) = g.src(oy, ki, g.h) else { continue };
                    let src_row = &plane[iy * g.w..(iy + 1) * g.w];
                    let dst_row = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    for (ox, d) in dst_row.iter_mut().enumerate() {
                        if let Some(ix) = g.src(ox, kj, g.w) {
                            *d = src_row[ix];
                        }
                    }
                }
            }
        }
    }
    col
}

/// Transpose of [`im2col`]: scatters column gradients back onto the input.
pub(crate) fn col2im<T: Float>(col: &[T], g: &ConvGeom) -> Vec<T> {
    let n = g.col_cols();
    let mut out = vec![T::zero(); g.c_in * g.h * g.w];
    for c in 0..g.c_in {
        let plane = &mut out[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &col[row * n..(row + 1) * n];
                for oy in 0..g.out_h {
                    let Some(iy) = g.src(oy, ki, g.h) else { continue };
                    for ox in 0..g.out_w {
                        if let Some(ix) = g.src(ox, kj, g.w) {
                            plane[iy * g.w + ix] = plane[iy * g.w + ix] + src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Corner-aligned sampling table for one axis: (lower index, upper index, weight of upper).
pub(crate) fn bilinear_table(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    (0..output)
        .map(|o| {
            if input == 1 || output == 1 {
                return (0, 0, 0.0);
            }
            let pos = o as f64 * (input - 1) as f64 / (output - 1) as f64;
            let lo = (pos.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            (lo, hi, pos - lo as f64)
        })
        .collect()
}

pub(crate) fn upsample<T: Float>(
    x: &[T],
    c: usize,
    (h, w): (usize, usize),
    rows: &[(usize, usize, f64)],
    cols: &[(usize, usize, f64)],
) -> Vec<T> {
    let (oh, ow) = (rows.len(), cols.len());
    let mut out = vec![T::zero(); c * oh * ow];
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        let dst = &mut out[ch * oh * ow..(ch + 1) * oh * ow];
        for (oy, &(y0, y1, fy)) in rows.iter().enumerate() {
            let fy = T::from_f64_lossy(fy);
            let gy = T::one() - fy;
            for (ox, &(x0, x1, fx)) in cols.iter().enumerate() {
                let fx = T::from_f64_lossy(fx);
                let gx = T::one() - fx;
                let top = plane[y0 * w + x0] * gx + plane[y0 * w + x1] * fx;
                let bot = plane[y1 * w + x0] * gx + plane[y1 * w + x1] * fx;
                dst[oy * ow + ox] = top * gy + bot * fy;
            }
        }
    }
    out
}

pub(crate) fn upsample_transpose<T: Float>(
    grad: &[T],
    c: usize,
    (h, w): (usize, usize),
    rows: &[(usize, usize, f64)],
    cols: &[(usize, usize, f64)],
) -> Vec<T> {
    let (oh, ow) = (rows.len(), cols.len());
    let mut out = vec![T::zero(); c * h * w];
    for ch in 0..c {
        let src = &grad[ch * oh * ow..(ch + 1) * oh * ow];
        let plane = &mut out[ch * h * w..(ch + 1) * h * w];
        for (oy, &(y0, y1, fy)) in rows.iter().enumerate() {
            let fy = T::from_f64_lossy(fy);
            let gy = T::one() - fy;
            for (ox, &(x0, x1, fx)) in cols.iter().enumerate() {
                let fx = T::from_f64_lossy(fx);
                let gx = T::one() - fx;
                let v = src[oy * ow + ox];
                plane[y0 * w + x0] = plane[y0 * w + x0] + v * gy * gx;
                plane[y0 * w + x1] = plane[y0 * w + x1] + v * gy * fx;
                plane[y1 * w + x0] = plane[y1 * w + x0] + v * fy * gx;
                plane[y1 * w + x1] = plane[y1 * w + x1] + v * fy * fx;
            }
        }
    }
    out
}
