//! Low-level numeric kernels shared by the graph ops.

/// `c = alpha * op(a) * op(b) + beta * c` with `op(a)` of shape `[m, k]` and
/// `op(b)` of shape `[k, n]`, all row-major.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_transposed: bool,
    b: &[f64],
    b_transposed: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_transposed { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_transposed { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: slice lengths are checked above and the strides describe
    // row-major (or transposed row-major) layouts that stay within them.
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

/// Geometry of a 2-D convolution over one sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_height: usize,
    pub out_width: usize,
}

impl ConvGeometry {
    pub fn cols_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn cols_cols(&self) -> usize {
        self.out_height * self.out_width
    }
}

/// Unfolds one `[C, H, W]` sample into `[C*K*K, Ho*Wo]` patches.
pub(crate) fn im2col(x: &[f64], g: &ConvGeometry, cols: &mut [f64]) {
    let ow = g.out_width;
    let npos = g.cols_cols();
    for c in 0..g.channels {
        for ki in 0..g.kernel {
            for kj in 0..g.kernel {
                let row = (c * g.kernel + ki) * g.kernel + kj;
                let dst = &mut cols[row * npos..(row + 1) * npos];
                for oi in 0..g.out_height {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    for oj in 0..ow {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        dst[oi * ow + oj] = if ii >= 0 && (ii as usize) < g.height && jj >= 0 && (jj as usize) < g.width
                        {
                            x[(c * g.height + ii as usize) * g.width + jj as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patches back, accumulating into `x`.
pub(crate) fn col2im(cols: &[f64], g: &ConvGeometry, x: &mut [f64]) {
    let ow = g.out_width;
    let npos = g.cols_cols();
    for c in 0..g.channels {
        for ki in 0..g.kernel {
            for kj in 0..g.kernel {
                let row = (c * g.kernel + ki) * g.kernel + kj;
                let src = &cols[row * npos..(row + 1) * npos];
                for oi in 0..g.out_height {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    if ii < 0 || ii as usize >= g.height {
                        continue;
                    }
                    for oj in 0..ow {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        if jj < 0 || jj as usize >= g.width {
                            continue;
                        }
                        x[(c * g.height + ii as usize) * g.width + jj as usize] += src[oi * ow + oj];
                    }
                }
            }
        }
    }
}

/// Output size of a strided convolution: `floor((n + 2p - k) / s) + 1`.
pub fn conv_output_size(n: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = n + 2 * pad;
    if padded < kernel || stride == 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Output size of a transposed convolution: `(n - 1) s - 2p + k`.
pub fn conv_transpose_output_size(n: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    ((n - 1) * stride + kernel).checked_sub(2 * pad).filter(|&v| v > 0)
}
