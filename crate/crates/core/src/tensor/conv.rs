//! 3-D cross-correlation and its adjoint via im2col / col2im and GEMM.
//!
//! Activations are `[batch, channels, d, h, w]`; kernels are
//! `[c_out, c_in, k, k, k]` for both directions. The transposed convolution
//! reads the kernel with its first two axes exchanged, so a kernel used by
//! `conv3d` can be handed unchanged to `conv_transpose3d` to get the adjoint.

use super::gemm::{gemm, Mat};

/// Output extent of a strided, padded window: `floor((n + 2p - k) / s) + 1`,
/// or `None` when it would be non-positive.
pub fn conv_out_dim(n: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    if stride == 0 || n + 2 * pad < k {
        return None;
    }
    Some((n + 2 * pad - k) / stride + 1)
}

/// Geometry of one forward convolution from `in_dims` to `out_dims`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub in_dims: [usize; 3],
    pub out_dims: [usize; 3],
}

impl ConvGeom {
    pub fn in_vol(&self) -> usize {
        self.in_dims.iter().product()
    }

    pub fn out_vol(&self) -> usize {
        self.out_dims.iter().product()
    }

    pub fn col_rows(&self) -> usize {
        self.c_in * self.k * self.k * self.k
    }
}

/// Unfolds one batch item `x` (`c_in x in_vol`) into `cols`
/// (`c_in*k^3 x out_vol`).
pub(crate) fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let [di, hi, wi] = g.in_dims;
    let [do_, ho, wo] = g.out_dims;
    let out_vol = g.out_vol();
    let k = g.k;
    let (s, p) = (g.stride as isize, g.pad as isize);
    let mut row = 0;
    for c in 0..g.c_in {
        let xc = &x[c * di * hi * wi..(c + 1) * di * hi * wi];
        for kd in 0..k {
            for kh in 0..k {
                for kw in 0..k {
                    let dst = &mut cols[row * out_vol..(row + 1) * out_vol];
                    for od in 0..do_ {
                        let id = od as isize * s + kd as isize - p;
                        for oh in 0..ho {
                            let ih = oh as isize * s + kh as isize - p;
                            let base = (od * ho + oh) * wo;
                            if id < 0 || id >= di as isize || ih < 0 || ih >= hi as isize {
                                dst[base..base + wo].iter_mut().for_each(|v| *v = 0.0);
                                continue;
                            }
                            let src = (id as usize * hi + ih as usize) * wi;
                            for ow in 0..wo {
                                let iw = ow as isize * s + kw as isize - p;
                                dst[base + ow] = if iw < 0 || iw >= wi as isize {
                                    0.0
                                } else {
                                    xc[src + iw as usize]
                                };
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters `cols` back onto `x`, accumulating.
pub(crate) fn col2im(cols: &[f64], g: &ConvGeom, x: &mut [f64]) {
    let [di, hi, wi] = g.in_dims;
    let [do_, ho, wo] = g.out_dims;
    let out_vol = g.out_vol();
    let k = g.k;
    let (s, p) = (g.stride as isize, g.pad as isize);
    let mut row = 0;
    for c in 0..g.c_in {
        let xc = &mut x[c * di * hi * wi..(c + 1) * di * hi * wi];
        for kd in 0..k {
            for kh in 0..k {
                for kw in 0..k {
                    let src = &cols[row * out_vol..(row + 1) * out_vol];
                    for od in 0..do_ {
                        let id = od as isize * s + kd as isize - p;
                        if id < 0 || id >= di as isize {
                            continue;
                        }
                        for oh in 0..ho {
                            let ih = oh as isize * s + kh as isize - p;
                            if ih < 0 || ih >= hi as isize {
                                continue;
                            }
                            let base = (od * ho + oh) * wo;
                            let dst = (id as usize * hi + ih as usize) * wi;
                            for ow in 0..wo {
                                let iw = ow as isize * s + kw as isize - p;
                                if iw >= 0 && iw < wi as isize {
                                    xc[dst + iw as usize] += src[base + ow];
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Forward cross-correlation over `batch` items. `bias` has `c_out` entries.
pub(crate) fn conv3d_forward(
    x: &[f64],
    kernel: &[f64],
    bias: Option<&[f64]>,
    g: &ConvGeom,
    batch: usize,
) -> Vec<f64> {
    let (in_vol, out_vol, rows) = (g.in_vol(), g.out_vol(), g.col_rows());
    let mut out = vec![0.0; batch * g.c_out * out_vol];
    let mut cols = vec![0.0; rows * out_vol];
    let km = Mat::new(kernel, g.c_out, rows);
    for b in 0..batch {
        im2col(&x[b * g.c_in * in_vol..(b + 1) * g.c_in * in_vol], g, &mut cols);
        let ob = &mut out[b * g.c_out * out_vol..(b + 1) * g.c_out * out_vol];
        gemm(km, Mat::new(&cols, rows, out_vol), ob, 0.0);
        if let Some(bias) = bias {
            for (co, chunk) in ob.chunks_mut(out_vol).enumerate() {
                chunk.iter_mut().for_each(|v| *v += bias[co]);
            }
        }
    }
    out
}

/// Gradients of [`conv3d_forward`]. Each returned buffer is `None` when not
/// requested.
pub(crate) fn conv3d_backward(
    x: &[f64],
    kernel: &[f64],
    dout: &[f64],
    g: &ConvGeom,
    batch: usize,
    want: [bool; 3],
) -> (Option<Vec<f64>>, Option<Vec<f64>>, Option<Vec<f64>>) {
    let (in_vol, out_vol, rows) = (g.in_vol(), g.out_vol(), g.col_rows());
    let mut dx = want[0].then(|| vec![0.0; batch * g.c_in * in_vol]);
    let mut dk = want[1].then(|| vec![0.0; kernel.len()]);
    let mut db = want[2].then(|| vec![0.0; g.c_out]);
    let mut cols = vec![0.0; rows * out_vol];
    let km = Mat::new(kernel, g.c_out, rows);
    for b in 0..batch {
        let dob = &dout[b * g.c_out * out_vol..(b + 1) * g.c_out * out_vol];
        let dom = Mat::new(dob, g.c_out, out_vol);
        if let Some(dk) = dk.as_mut() {
            im2col(&x[b * g.c_in * in_vol..(b + 1) * g.c_in * in_vol], g, &mut cols);
            gemm(dom, Mat::new(&cols, rows, out_vol).t(), dk, 1.0);
        }
        if let Some(db) = db.as_mut() {
            for (co, chunk) in dob.chunks(out_vol).enumerate() {
                db[co] += chunk.iter().sum::<f64>();
            }
        }
        if let Some(dx) = dx.as_mut() {
            gemm(km.t(), dom, &mut cols, 0.0);
            col2im(&cols, g, &mut dx[b * g.c_in * in_vol..(b + 1) * g.c_in * in_vol]);
        }
    }
    (dx, dk, db)
}

/// Transposed convolution: the adjoint of `conv3d_forward` with geometry `g`
/// (maps `c_out x out_dims` back to `c_in x in_dims`). `bias` has `c_in`
/// entries.
pub(crate) fn conv_t3d_forward(
    y: &[f64],
    kernel: &[f64],
    bias: Option<&[f64]>,
    g: &ConvGeom,
    batch: usize,
) -> Vec<f64> {
    let (in_vol, out_vol, rows) = (g.in_vol(), g.out_vol(), g.col_rows());
    let mut out = vec![0.0; batch * g.c_in * in_vol];
    let mut cols = vec![0.0; rows * out_vol];
    let km = Mat::new(kernel, g.c_out, rows);
    for b in 0..batch {
        let yb = &y[b * g.c_out * out_vol..(b + 1) * g.c_out * out_vol];
        gemm(km.t(), Mat::new(yb, g.c_out, out_vol), &mut cols, 0.0);
        let ob = &mut out[b * g.c_in * in_vol..(b + 1) * g.c_in * in_vol];
        col2im(&cols, g, ob);
        if let Some(bias) = bias {
            for (ci, chunk) in ob.chunks_mut(in_vol).enumerate() {
                chunk.iter_mut().for_each(|v| *v += bias[ci]);
            }
        }
    }
    out
}

pub(crate) fn conv_t3d_backward(
    y: &[f64],
    kernel: &[f64],
    dout: &[f64],
    g: &ConvGeom,
    batch: usize,
    want: [bool; 3],
) -> (Option<Vec<f64>>, Option<Vec<f64>>, Option<Vec<f64>>) {
    let (in_vol, out_vol, rows) = (g.in_vol(), g.out_vol(), g.col_rows());
    let mut dy = want[0].then(|| vec![0.0; batch * g.c_out * out_vol]);
    let mut dk = want[1].then(|| vec![0.0; kernel.len()]);
    let mut db = want[2].then(|| vec![0.0; g.c_in]);
    let mut cols = vec![0.0; rows * out_vol];
    let km = Mat::new(kernel, g.c_out, rows);
    for b in 0..batch {
        let dob = &dout[b * g.c_in * in_vol..(b + 1) * g.c_in * in_vol];
        if let Some(db) = db.as_mut() {
            for (ci, chunk) in dob.chunks(in_vol).enumerate() {
                db[ci] += chunk.iter().sum::<f64>();
            }
        }
        if dy.is_none() && dk.is_none() {
            continue;
        }
        im2col(dob, g, &mut cols);
        let cm = Mat::new(&cols, rows, out_vol);
        if let Some(dy) = dy.as_mut() {
            gemm(km, cm, &mut dy[b * g.c_out * out_vol..(b + 1) * g.c_out * out_vol], 0.0);
        }
        if let Some(dk) = dk.as_mut() {
            let yb = &y[b * g.c_out * out_vol..(b + 1) * g.c_out * out_vol];
            gemm(Mat::new(yb, g.c_out, out_vol), cm.t(), dk, 1.0);
        }
    }
    (dy, dk, db)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn out_dims() {
        assert_eq!(conv_out_dim(32, 3, 2, 1), Some(16));
        assert_eq!(conv_out_dim(4, 2, 2, 0), Some(2));
        assert_eq!(conv_out_dim(2, 5, 1, 1), None);
        assert_eq!(conv_out_dim(8, 4, 2, 1), Some(4));
    }

    #[test]
    fn im2col_col2im_are_adjoint() {
        let g = ConvGeom {
            c_in: 2,
            c_out: 1,
            k: 3,
            stride: 2,
            pad: 1,
            in_dims: [5, 4, 3],
            out_dims: [3, 2, 2],
        };
        let x: Vec<f64> = (0..g.c_in * g.in_vol()).map(|i| (i as f64 * 0.37).sin()).collect();
        let c: Vec<f64> = (0..g.col_rows() * g.out_vol())
            .map(|i| (i as f64 * 0.11).cos())
            .collect();
        let mut cols = vec![0.0; c.len()];
        im2col(&x, &g, &mut cols);
        let lhs: f64 = cols.iter().zip(&c).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; x.len()];
        col2im(&c, &g, &mut back);
        let rhs: f64 = back.iter().zip(&x).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
