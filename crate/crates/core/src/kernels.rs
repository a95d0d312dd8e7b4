//! Raw dense kernels on flat row-major slices.
//!
//! Convolutions are lowered to column buffers and small matrix products.
//! Every reduction runs in a fixed order, so results are bitwise
//! reproducible for identical inputs.

use alloc::vec;
use alloc::vec::Vec;

use crate::Real;

/// Geometry of a strided, zero-padded 2-D convolution for one sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
}

/// `floor((size + 2*padding - kernel) / stride) + 1`, or `None` when the
/// padded input is smaller than the kernel.
pub fn conv_out_len(size: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = size + 2 * padding;
    if stride == 0 || kernel == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// `(size - 1) * stride - 2*padding + kernel`, or `None` when that is not
/// positive.
pub fn conv_transpose_out_len(size: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    if stride == 0 || size == 0 || kernel == 0 {
        return None;
    }
    let full = (size - 1) * stride + kernel;
    (full > 2 * padding).then(|| full - 2 * padding)
}

impl ConvGeometry {
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    pub fn out_pixels(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn in_pixels(&self) -> usize {
        self.in_h * self.in_w
    }
}

/// Unfolds one `[C, H, W]` image into a `[C*kh*kw, H'*W']` column buffer.
pub fn im2col<T: Real>(input: &[T], g: &ConvGeometry, col: &mut [T]) {
    let p = g.out_pixels();
    let mut row = 0;
    for c in 0..g.in_channels {
        let plane = &input[c * g.in_pixels()..(c + 1) * g.in_pixels()];
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let dst = &mut col[row * p..(row + 1) * p];
                for oh in 0..g.out_h {
                    let ih = (oh * g.stride + ki) as isize - g.padding as isize;
                    let out_row = &mut dst[oh * g.out_w..(oh + 1) * g.out_w];
                    if ih < 0 || ih >= g.in_h as isize {
                        out_row.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[ih as usize * g.in_w..(ih as usize + 1) * g.in_w];
                    for (ow, v) in out_row.iter_mut().enumerate() {
                        let iw = (ow * g.stride + kj) as isize - g.padding as isize;
                        *v = if iw < 0 || iw >= g.in_w as isize { T::zero() } else { src[iw as usize] };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Scatter-adds a column buffer back into a `[C, H, W]` image; the adjoint
/// of [`im2col`].
pub fn col2im<T: Real>(col: &[T], g: &ConvGeometry, image: &mut [T]) {
    let p = g.out_pixels();
    let mut row = 0;
    for c in 0..g.in_channels {
        let plane = &mut image[c * g.in_pixels()..(c + 1) * g.in_pixels()];
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let src = &col[row * p..(row + 1) * p];
                for oh in 0..g.out_h {
                    let ih = (oh * g.stride + ki) as isize - g.padding as isize;
                    if ih < 0 || ih >= g.in_h as isize {
                        continue;
                    }
                    let dst = &mut plane[ih as usize * g.in_w..(ih as usize + 1) * g.in_w];
                    for ow in 0..g.out_w {
                        let iw = (ow * g.stride + kj) as isize - g.padding as isize;
                        if iw >= 0 && (iw as usize) < g.in_w {
                            dst[iw as usize] += src[oh * g.out_w + ow];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

#[inline]
fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    y.iter_mut().zip(x).for_each(|(y, &x)| *y += alpha * x);
}

/// Dot product with eight fixed partial sums.
#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

/// `c[m,n] += a[m,k] * b[k,n]`
pub fn matmul_acc<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let alpha = a[i * k + p];
            if alpha != T::zero() {
                axpy(alpha, &b[p * n..(p + 1) * n], c_row);
            }
        }
    }
}

/// `c[m,n] += a[k,m]^T * b[k,n]`
pub fn matmul_at_b_acc<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let b_row = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let alpha = a[p * m + i];
            if alpha != T::zero() {
                axpy(alpha, b_row, &mut c[i * n..(i + 1) * n]);
            }
        }
    }
}

/// `c[m,n] += a[m,k] * b[n,k]^T`
pub fn matmul_a_bt_acc<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            c[i * n + j] += dot(a_row, &b[j * k..(j + 1) * k]);
        }
    }
}

/// Batched convolution forward. `input` is `[N, C, H, W]`, `kernel` is
/// `[F, C, kh, kw]`, output is `[N, F, H', W']`.
pub fn conv2d_forward<T: Real>(input: &[T], kernel: &[T], bias: &[T], batch: usize, g: &ConvGeometry) -> Vec<T> {
    let (in_len, out_len) = (g.in_channels * g.in_pixels(), g.out_channels * g.out_pixels());
    let mut out = vec![T::zero(); batch * out_len];
    let mut col = vec![T::zero(); g.patch_len() * g.out_pixels()];
    for n in 0..batch {
        im2col(&input[n * in_len..(n + 1) * in_len], g, &mut col);
        let y = &mut out[n * out_len..(n + 1) * out_len];
        for (f, plane) in y.chunks_exact_mut(g.out_pixels()).enumerate() {
            plane.iter_mut().for_each(|v| *v = bias[f]);
        }
        matmul_acc(kernel, &col, y, g.out_channels, g.patch_len(), g.out_pixels());
    }
    out
}

/// Gradients of [`conv2d_forward`]; each `d_*` buffer is accumulated into
/// when present.
pub fn conv2d_backward<T: Real>(
    input: &[T],
    kernel: &[T],
    upstream: &[T],
    batch: usize,
    g: &ConvGeometry,
    mut d_input: Option<&mut [T]>,
    mut d_kernel: Option<&mut [T]>,
    mut d_bias: Option<&mut [T]>,
) {
    let (in_len, out_len) = (g.in_channels * g.in_pixels(), g.out_channels * g.out_pixels());
    let mut col = vec![T::zero(); g.patch_len() * g.out_pixels()];
    for n in 0..batch {
        let dy = &upstream[n * out_len..(n + 1) * out_len];
        if let Some(db) = d_bias.as_deref_mut() {
            for (f, plane) in dy.chunks_exact(g.out_pixels()).enumerate() {
                db[f] += plane.iter().fold(T::zero(), |a, &v| a + v);
            }
        }
        if let Some(dk) = d_kernel.as_deref_mut() {
            im2col(&input[n * in_len..(n + 1) * in_len], g, &mut col);
            matmul_a_bt_acc(dy, &col, dk, g.out_channels, g.out_pixels(), g.patch_len());
        }
        if let Some(dx) = d_input.as_deref_mut() {
            col.iter_mut().for_each(|v| *v = T::zero());
            matmul_at_b_acc(kernel, dy, &mut col, g.patch_len(), g.out_channels, g.out_pixels());
            col2im(&col, g, &mut dx[n * in_len..(n + 1) * in_len]);
        }
    }
}

/// Batched transposed convolution forward, the adjoint of a convolution
/// with geometry `g` (which maps the `[F, H', W']` output of this op back to
/// its `[C, H, W]` input). `kernel` is `[C, F, kh, kw]`.
pub fn conv_transpose2d_forward<T: Real>(input: &[T], kernel: &[T], bias: &[T], batch: usize, g: &ConvGeometry) -> Vec<T> {
    let (x_len, y_len) = (g.out_channels * g.out_pixels(), g.in_channels * g.in_pixels());
    let mut out = vec![T::zero(); batch * y_len];
    let mut col = vec![T::zero(); g.patch_len() * g.out_pixels()];
    for n in 0..batch {
        col.iter_mut().for_each(|v| *v = T::zero());
        matmul_at_b_acc(kernel, &input[n * x_len..(n + 1) * x_len], &mut col, g.patch_len(), g.out_channels, g.out_pixels());
        let y = &mut out[n * y_len..(n + 1) * y_len];
        col2im(&col, g, y);
        for (f, plane) in y.chunks_exact_mut(g.in_pixels()).enumerate() {
            plane.iter_mut().for_each(|v| *v += bias[f]);
        }
    }
    out
}

pub fn conv_transpose2d_backward<T: Real>(
    input: &[T],
    kernel: &[T],
    upstream: &[T],
    batch: usize,
    g: &ConvGeometry,
    mut d_input: Option<&mut [T]>,
    mut d_kernel: Option<&mut [T]>,
    mut d_bias: Option<&mut [T]>,
) {
    let (x_len, y_len) = (g.out_channels * g.out_pixels(), g.in_channels * g.in_pixels());
    let mut col = vec![T::zero(); g.patch_len() * g.out_pixels()];
    for n in 0..batch {
        let dy = &upstream[n * y_len..(n + 1) * y_len];
        if let Some(db) = d_bias.as_deref_mut() {
            for (f, plane) in dy.chunks_exact(g.in_pixels()).enumerate() {
                db[f] += plane.iter().fold(T::zero(), |a, &v| a + v);
            }
        }
        if d_input.is_none() && d_kernel.is_none() {
            continue;
        }
        im2col(dy, g, &mut col);
        if let Some(dx) = d_input.as_deref_mut() {
            matmul_acc(kernel, &col, &mut dx[n * x_len..(n + 1) * x_len], g.out_channels, g.patch_len(), g.out_pixels());
        }
        if let Some(dk) = d_kernel.as_deref_mut() {
            matmul_a_bt_acc(&input[n * x_len..(n + 1) * x_len], &col, dk, g.out_channels, g.out_pixels(), g.patch_len());
        }
    }
}
