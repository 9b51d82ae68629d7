//! Raw slice kernels shared by the graph operators.

use super::Element;

/// `c (+)= op(a) * op(b)` for row-major buffers.
///
/// `a` holds an `m x k` matrix (stored `k x m` when `trans_a`), `b` holds a
/// `k x n` matrix (stored `n x k` when `trans_b`), and `c` is `m x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn matmul_into<T: Element>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    trans_a: bool,
    b: &[T],
    trans_b: bool,
    c: &mut [T],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if trans_b {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: bounds asserted above; `c` is a distinct mutable slice.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
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

/// Geometry of a 3x3, padding-1 convolution window sweep.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub stride: usize,
}

impl ConvGeom {
    pub fn new(batch: usize, channels: usize, in_h: usize, in_w: usize, stride: usize) -> Self {
        // 3x3 kernel, padding 1
        let out_h = (in_h + 2 - 3) / stride + 1;
        let out_w = (in_w + 2 - 3) / stride + 1;
        ConvGeom {
            batch,
            channels,
            in_h,
            in_w,
            out_h,
            out_w,
            stride,
        }
    }

    pub fn col_rows(&self) -> usize {
        self.channels * 9
    }

    pub fn col_cols(&self) -> usize {
        self.batch * self.out_h * self.out_w
    }

    /// Output columns `lo..hi` whose kernel tap `kx` lands inside the input row.
    fn valid_cols(&self, kx: usize) -> (usize, usize) {
        let lo = if kx == 0 { 1 } else { 0 };
        let hi = ((self.in_w + 1 - kx).div_ceil(self.stride)).min(self.out_w);
        (lo.min(hi), hi)
    }

    /// Splits the batch into runs of images whose unfolded columns stay
    /// around 64k elements, yielding `(first image, geometry of the run)`.
    pub fn chunks(&self) -> impl Iterator<Item = (usize, ConvGeom)> + '_ {
        let per_image = (self.col_rows() * self.out_h * self.out_w).max(1);
        let step = (COL_BUDGET / per_image).clamp(1, self.batch.max(1));
        (0..self.batch).step_by(step).map(move |start| {
            let batch = step.min(self.batch - start);
            (start, ConvGeom { batch, ..*self })
        })
    }
}

const COL_BUDGET: usize = 1 << 17;

/// Unfolds `x[batch, channels, in_h, in_w]` into `[channels*9, batch*out_h*out_w]`.
pub(crate) fn im2col<T: Element>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let cols_n = g.col_cols();
    let plane_out = g.out_h * g.out_w;
    let mut cols = vec![T::zero(); g.col_rows() * cols_n];
    for c in 0..g.channels {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (c * 9 + ky * 3 + kx) * cols_n;
                let (lo, hi) = g.valid_cols(kx);
                for b in 0..g.batch {
                    let src = &x[(b * g.channels + c) * g.in_h * g.in_w..][..g.in_h * g.in_w];
                    let dst = &mut cols[row + b * plane_out..][..plane_out];
                    for oy in 0..g.out_h {
                        let iy = (oy * g.stride + ky) as isize - 1;
                        if iy < 0 || iy >= g.in_h as isize {
                            continue;
                        }
                        let src_row = &src[iy as usize * g.in_w..][..g.in_w];
                        let dst_row = &mut dst[oy * g.out_w..][..g.out_w];
                        if g.stride == 1 {
                            dst_row[lo..hi].copy_from_slice(&src_row[lo + kx - 1..hi + kx - 1]);
                        } else {
                            for ox in lo..hi {
                                dst_row[ox] = src_row[ox * g.stride + kx - 1];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters columns back onto `[batch, channels, in_h, in_w]`.
#[cfg(test)]
pub(crate) fn col2im<T: Element>(cols: &[T], g: &ConvGeom) -> Vec<T> {
    let mut x = vec![T::zero(); g.batch * g.channels * g.in_h * g.in_w];
    col2im_into(cols, g, &mut x);
    x
}

/// [`col2im`] that adds into an existing `[batch, channels, in_h, in_w]` buffer.
pub(crate) fn col2im_into<T: Element>(cols: &[T], g: &ConvGeom, x: &mut [T]) {
    let cols_n = g.col_cols();
    let plane_out = g.out_h * g.out_w;
    for c in 0..g.channels {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (c * 9 + ky * 3 + kx) * cols_n;
                let (lo, hi) = g.valid_cols(kx);
                for b in 0..g.batch {
                    let dst = &mut x[(b * g.channels + c) * g.in_h * g.in_w..][..g.in_h * g.in_w];
                    let src = &cols[row + b * plane_out..][..plane_out];
                    for oy in 0..g.out_h {
                        let iy = (oy * g.stride + ky) as isize - 1;
                        if iy < 0 || iy >= g.in_h as isize {
                            continue;
                        }
                        let dst_row = &mut dst[iy as usize * g.in_w..][..g.in_w];
                        let src_row = &src[oy * g.out_w..][..g.out_w];
                        for (ox, &v) in src_row.iter().enumerate().take(hi).skip(lo) {
                            let ix = ox * g.stride + kx - 1;
                            dst_row[ix] = dst_row[ix] + v;
                        }
                    }
                }
            }
        }
    }
}

/// `[a, b, inner] -> [b, a, inner]`.
#[cfg(test)]
pub(crate) fn swap_outer<T: Element>(x: &[T], a: usize, b: usize, inner: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    swap_outer_into(x, a, b, inner, &mut out);
    out
}

pub(crate) fn swap_outer_into<T: Element>(
    x: &[T],
    a: usize,
    b: usize,
    inner: usize,
    out: &mut [T],
) {
    for i in 0..a {
        for j in 0..b {
            out[(j * a + i) * inner..][..inner].copy_from_slice(&x[(i * b + j) * inner..][..inner]);
        }
    }
}

/// Row-major strides for `shape`.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Materialises `x` permuted so that output axis `i` is input axis `perm[i]`.
pub(crate) fn permute<T: Element>(x: &[T], shape: &[usize], perm: &[usize]) -> Vec<T> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let rank = shape.len();
    let mut out = Vec::with_capacity(x.len());
    if rank == 0 {
        return x.to_vec();
    }
    let inner = out_shape[rank - 1];
    let inner_stride = src_strides[rank - 1];
    let mut idx = vec![0usize; rank];
    loop {
        let base: usize = idx[..rank - 1]
            .iter()
            .zip(&src_strides[..rank - 1])
            .map(|(i, s)| i * s)
            .sum();
        if inner_stride == 1 {
            out.extend_from_slice(&x[base..base + inner]);
        } else {
            out.extend((0..inner).map(|j| x[base + j * inner_stride]));
        }
        // advance the outer multi-index
        let mut axis = rank - 1;
        loop {
            if axis == 0 {
                return out;
            }
            axis -= 1;
            idx[axis] += 1;
            if idx[axis] < out_shape[axis] {
                break;
            }
            idx[axis] = 0;
        }
    }
}
