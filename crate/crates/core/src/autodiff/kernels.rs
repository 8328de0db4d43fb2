//! Dense CPU kernels shared by the forward and backward passes.
//!
//! All loops run single-threaded in a fixed order, so every result is
//! reproducible bit for bit.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dot product with eight independent partial sums.
#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
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

#[inline]
fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

/// `c[m×n] += a[m×k] · b[k×n]`
pub fn matmul_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av != T::zero() {
                axpy(av, &b[p * n..(p + 1) * n], c_row);
            }
        }
    }
}

/// `c[m×n] += aᵀ · b` with `a` stored as `k×m` and `b` as `k×n`.
pub fn matmul_at_b_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let b_row = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av != T::zero() {
                axpy(av, b_row, &mut c[i * n..(i + 1) * n]);
            }
        }
    }
}

/// `c[m×n] += a · bᵀ` with `a` stored as `m×k` and `b` as `n×k`.
pub fn matmul_a_bt_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            c[i * n + j] += dot(a_row, &b[j * k..(j + 1) * k]);
        }
    }
}

/// Geometry of a 2-D convolution over an NCHW batch with square kernels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_height: usize,
    pub out_width: usize,
}

impl ConvGeom {
    pub fn new(x_shape: &[usize], w_shape: &[usize], stride: usize, padding: usize) -> Result<Self> {
        if x_shape.len() != 4 || w_shape.len() != 4 {
            return Err(Error::shape(
                "conv2d",
                format!("expected NCHW input and OCKK weight, got {x_shape:?} and {w_shape:?}"),
            ));
        }
        let (batch, in_channels, height, width) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
        let (out_channels, wc, kh, kw) = (w_shape[0], w_shape[1], w_shape[2], w_shape[3]);
        if wc != in_channels || kh != kw {
            return Err(Error::shape(
                "conv2d",
                format!("input {x_shape:?} incompatible with weight {w_shape:?}"),
            ));
        }
        if stride == 0 {
            return Err(Error::shape("conv2d", "stride must be at least 1"));
        }
        let kernel = kh;
        if height + 2 * padding < kernel || width + 2 * padding < kernel {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {kernel} larger than padded input {height}x{width} (pad {padding})"),
            ));
        }
        Ok(Self {
            batch,
            in_channels,
            height,
            width,
            out_channels,
            kernel,
            stride,
            padding,
            out_height: (height + 2 * padding - kernel) / stride + 1,
            out_width: (width + 2 * padding - kernel) / stride + 1,
        })
    }

    pub fn out_shape(&self) -> [usize; 4] {
        [self.batch, self.out_channels, self.out_height, self.out_width]
    }

    /// Rows of the unfolded patch matrix.
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    /// Columns of the unfolded patch matrix for one sample.
    pub fn positions(&self) -> usize {
        self.out_height * self.out_width
    }

    /// Source coordinate for output position `o` and kernel tap `t`, if it
    /// lands inside the unpadded input.
    #[inline]
    fn source(&self, o: usize, t: usize, extent: usize) -> Option<usize> {
        let s = (o * self.stride + t) as isize - self.padding as isize;
        (s >= 0 && (s as usize) < extent).then_some(s as usize)
    }
}

/// Unfolds one CHW sample into a `patch_len × positions` matrix.
pub fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let (k, oh, ow) = (g.kernel, g.out_height, g.out_width);
    let p = g.positions();
    for c in 0..g.in_channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    match g.source(oy, ky, g.height) {
                        None => line.fill(T::zero()),
                        Some(iy) => {
                            for (ox, v) in line.iter_mut().enumerate() {
                                *v = match g.source(ox, kx, g.width) {
                                    Some(ix) => plane[iy * g.width + ix],
                                    None => T::zero(),
                                };
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Folds a patch matrix back onto one CHW sample, accumulating overlaps.
pub fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let (k, oh, ow) = (g.kernel, g.out_height, g.out_width);
    let p = g.positions();
    for c in 0..g.in_channels {
        let plane = &mut dx[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let Some(iy) = g.source(oy, ky, g.height) else {
                        continue;
                    };
                    for ox in 0..ow {
                        if let Some(ix) = g.source(ox, kx, g.width) {
                            plane[iy * g.width + ix] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// im2col convolution. Returns the output and the unfolded patches of every
/// sample, which the backward pass reuses.
pub fn conv2d_forward<T: Scalar>(x: &[T], w: &[T], b: Option<&[T]>, g: &ConvGeom) -> (Vec<T>, Vec<T>) {
    let (pl, p) = (g.patch_len(), g.positions());
    let in_len = g.in_channels * g.height * g.width;
    let out_len = g.out_channels * p;
    let mut cols = vec![T::zero(); g.batch * pl * p];
    let mut y = vec![T::zero(); g.batch * out_len];
    for n in 0..g.batch {
        let cols_n = &mut cols[n * pl * p..(n + 1) * pl * p];
        im2col(&x[n * in_len..(n + 1) * in_len], g, cols_n);
        let y_n = &mut y[n * out_len..(n + 1) * out_len];
        if let Some(b) = b {
            for (o, &bv) in b.iter().enumerate() {
                y_n[o * p..(o + 1) * p].fill(bv);
            }
        }
        matmul_acc(w, cols_n, y_n, g.out_channels, pl, p);
    }
    (y, cols)
}

/// Gradients of an im2col convolution: `(dx, dw, db)`.
pub fn conv2d_backward<T: Scalar>(
    dy: &[T],
    w: &[T],
    cols: &[T],
    g: &ConvGeom,
    need_dx: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    let (pl, p) = (g.patch_len(), g.positions());
    let in_len = g.in_channels * g.height * g.width;
    let out_len = g.out_channels * p;
    let mut dw = vec![T::zero(); g.out_channels * pl];
    let mut db = vec![T::zero(); g.out_channels];
    let mut dx = need_dx.then(|| vec![T::zero(); g.batch * in_len]);
    let mut dcols = vec![T::zero(); pl * p];
    for n in 0..g.batch {
        let dy_n = &dy[n * out_len..(n + 1) * out_len];
        let cols_n = &cols[n * pl * p..(n + 1) * pl * p];
        for (o, dbv) in db.iter_mut().enumerate() {
            *dbv += dy_n[o * p..(o + 1) * p].iter().fold(T::zero(), |a, &v| a + v);
        }
        matmul_a_bt_acc(dy_n, cols_n, &mut dw, g.out_channels, p, pl);
        if let Some(dx) = dx.as_mut() {
            dcols.fill(T::zero());
            matmul_at_b_acc(w, dy_n, &mut dcols, pl, g.out_channels, p);
            col2im(&dcols, g, &mut dx[n * in_len..(n + 1) * in_len]);
        }
    }
    (dx, dw, db)
}

/// Direct nested-loop convolution; same math as [`conv2d_forward`].
pub fn conv2d_direct<T: Scalar>(x: &[T], w: &[T], b: Option<&[T]>, g: &ConvGeom) -> Vec<T> {
    let k = g.kernel;
    let mut y = vec![T::zero(); g.batch * g.out_channels * g.positions()];
    for n in 0..g.batch {
        for o in 0..g.out_channels {
            for oy in 0..g.out_height {
                for ox in 0..g.out_width {
                    let mut acc = b.map_or(T::zero(), |b| b[o]);
                    for c in 0..g.in_channels {
                        for ky in 0..k {
                            let Some(iy) = g.source(oy, ky, g.height) else {
                                continue;
                            };
                            for kx in 0..k {
                                if let Some(ix) = g.source(ox, kx, g.width) {
                                    acc += w[((o * g.in_channels + c) * k + ky) * k + kx]
                                        * x[((n * g.in_channels + c) * g.height + iy) * g.width + ix];
                                }
                            }
                        }
                    }
                    y[((n * g.out_channels + o) * g.out_height + oy) * g.out_width + ox] = acc;
                }
            }
        }
    }
    y
}

/// Geometry of an unpadded max-pool over an NCHW batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolGeom {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub out_height: usize,
    pub out_width: usize,
}

impl PoolGeom {
    pub fn new(x_shape: &[usize], kernel: usize, stride: usize) -> Result<Self> {
        if x_shape.len() != 4 {
            return Err(Error::shape("maxpool2d", format!("expected NCHW input, got {x_shape:?}")));
        }
        if kernel == 0 || stride == 0 {
            return Err(Error::shape("maxpool2d", "kernel and stride must be at least 1"));
        }
        let (batch, channels, height, width) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
        if height < kernel || width < kernel {
            return Err(Error::shape(
                "maxpool2d",
                format!("kernel {kernel} larger than input {height}x{width}"),
            ));
        }
        Ok(Self {
            batch,
            channels,
            height,
            width,
            kernel,
            stride,
            out_height: (height - kernel) / stride + 1,
            out_width: (width - kernel) / stride + 1,
        })
    }

    pub fn out_shape(&self) -> [usize; 4] {
        [self.batch, self.channels, self.out_height, self.out_width]
    }
}

/// Max-pool forward. Returns the pooled values and, per output element, the
/// flat input offset of the winning element (first maximum in scan order).
pub fn maxpool2d_forward<T: Scalar>(x: &[T], g: &PoolGeom) -> (Vec<T>, Vec<usize>) {
    let out_len = g.batch * g.channels * g.out_height * g.out_width;
    let mut y = Vec::with_capacity(out_len);
    let mut arg = Vec::with_capacity(out_len);
    for plane in 0..g.batch * g.channels {
        let base = plane * g.height * g.width;
        for oy in 0..g.out_height {
            for ox in 0..g.out_width {
                let mut best = base + oy * g.stride * g.width + ox * g.stride;
                for ky in 0..g.kernel {
                    let row = base + (oy * g.stride + ky) * g.width + ox * g.stride;
                    for idx in row..row + g.kernel {
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                }
                y.push(x[best]);
                arg.push(best);
            }
        }
    }
    (y, arg)
}

pub fn maxpool2d_backward<T: Scalar>(dy: &[T], arg: &[usize], input_len: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); input_len];
    for (&g, &i) in dy.iter().zip(arg) {
        dx[i] += g;
    }
    dx
}
