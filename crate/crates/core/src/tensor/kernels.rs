//! Raw numeric kernels shared by the tape and by the plain-tensor entry points.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Stored layout of a matrix operand.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Layout {
    /// Stored as the logical `rows x cols` matrix.
    Normal,
    /// Stored as `cols x rows`; used as its transpose.
    Transposed,
}

/// `c (m x n) = a (m x k) * b (k x n)`, optionally accumulating into `c`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_layout: Layout,
    b: &[f64],
    b_layout: Layout,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = match a_layout {
        Layout::Normal => (k as isize, 1),
        Layout::Transposed => (1, m as isize),
    };
    let (rsb, csb) = match b_layout {
        Layout::Normal => (n as isize, 1),
        Layout::Transposed => (1, k as isize),
    };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the slices cover the strided extents computed above (checked in
    // debug builds) and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Numerically stable softmax of each contiguous row of length `cols`.
pub(crate) fn softmax_rows_into(x: &[f64], cols: usize, out: &mut [f64]) {
    for (row, out_row) in x.chunks_exact(cols).zip(out.chunks_exact_mut(cols)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (o, &v) in out_row.iter_mut().zip(row) {
            *o = (v - max).exp();
            sum += *o;
        }
        let inv = 1.0 / sum;
        out_row.iter_mut().for_each(|o| *o *= inv);
    }
}

/// Row-wise `log(sum(exp(x)))` with the maximum subtracted before exponentiation.
pub(crate) fn logsumexp_rows(x: &[f64], cols: usize) -> Vec<f64> {
    x.chunks_exact(cols)
        .map(|row| {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return f64::NEG_INFINITY;
            }
            max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln()
        })
        .collect()
}

/// Geometry of the stride-2, 3x3, padding-1 convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_height: usize,
    pub out_width: usize,
}

pub(crate) const KERNEL: usize = 3;
pub(crate) const STRIDE: usize = 2;
pub(crate) const PAD: usize = 1;

impl ConvGeometry {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        ConvGeometry {
            channels,
            height,
            width,
            out_height: conv_out_len(height),
            out_width: conv_out_len(width),
        }
    }

    pub fn col_rows(&self) -> usize {
        self.channels * KERNEL * KERNEL
    }

    pub fn col_cols(&self) -> usize {
        self.out_height * self.out_width
    }
}

pub fn conv_out_len(len: usize) -> usize {
    (len + 2 * PAD - KERNEL) / STRIDE + 1
}

/// Unfold one `[C, H, W]` image into `[C*9, Ho*Wo]` patch columns.
pub(crate) fn im2col(img: &[f64], g: &ConvGeometry, cols: &mut [f64]) {
    let hw_out = g.col_cols();
    for c in 0..g.channels {
        let plane = &img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let row = (c * KERNEL + ky) * KERNEL + kx;
                let dst = &mut cols[row * hw_out..(row + 1) * hw_out];
                for oy in 0..g.out_height {
                    let iy = (oy * STRIDE + ky) as isize - PAD as isize;
                    for ox in 0..g.out_width {
                        let ix = (ox * STRIDE + kx) as isize - PAD as isize;
                        dst[oy * g.out_width + ox] =
                            if iy < 0 || ix < 0 || iy as usize >= g.height || ix as usize >= g.width {
                                0.0
                            } else {
                                plane[iy as usize * g.width + ix as usize]
                            };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add patch columns back into an image.
pub(crate) fn col2im(cols: &[f64], g: &ConvGeometry, img: &mut [f64]) {
    let hw_out = g.col_cols();
    for c in 0..g.channels {
        let plane = &mut img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let row = (c * KERNEL + ky) * KERNEL + kx;
                let src = &cols[row * hw_out..(row + 1) * hw_out];
                for oy in 0..g.out_height {
                    let iy = (oy * STRIDE + ky) as isize - PAD as isize;
                    if iy < 0 || iy as usize >= g.height {
                        continue;
                    }
                    for ox in 0..g.out_width {
                        let ix = (ox * STRIDE + kx) as isize - PAD as isize;
                        if ix < 0 || ix as usize >= g.width {
                            continue;
                        }
                        plane[iy as usize * g.width + ix as usize] += src[oy * g.out_width + ox];
                    }
                }
            }
        }
    }
}

/// Row-wise softmax over the last axis of a rank-2 (or higher) tensor.
///
/// Rejects non-finite input, naming the flat index of the first offending element.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    if x.rank() == 0 {
        return Err(Error::invalid("softmax_rows needs at least one axis"));
    }
    x.ensure_finite("softmax_rows")?;
    let cols = *x.shape().last().unwrap();
    let mut out = vec![0.0; x.len()];
    softmax_rows_into(x.data(), cols, &mut out);
    Tensor::new(x.shape(), out)
}

/// Layer normalization over the last axis with a learned gain and bias.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    let d = x.shape().last().copied().unwrap_or(0);
    if d == 0 {
        return Err(Error::invalid("layer_norm over a zero-length feature axis"));
    }
    if eps <= 0.0 {
        return Err(Error::invalid("layer_norm eps must be positive"));
    }
    if gain.shape() != [d] || bias.shape() != [d] {
        return Err(Error::shape("layer_norm", x.shape(), gain.shape()));
    }
    let (out, _, _) = layer_norm_forward(x.data(), d, gain.data(), bias.data(), eps);
    Tensor::new(x.shape(), out)
}

/// Returns `(output, normalized, inverse_std_per_row)`.
pub(crate) fn layer_norm_forward(
    x: &[f64],
    d: usize,
    gain: &[f64],
    bias: &[f64],
    eps: f64,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let rows = x.len() / d;
    let mut out = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut inv_std = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + eps).sqrt();
        inv_std.push(inv);
        for j in 0..d {
            let h = (row[j] - mean) * inv;
            xhat[r * d + j] = h;
            out[r * d + j] = h * gain[j] + bias[j];
        }
    }
    (out, xhat, inv_std)
}
