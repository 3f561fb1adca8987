//! Dense row-major `f32` tensors and the few kernels the layers need.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    /// Builds a tensor, checking the element count and that every element is finite.
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let t = Self::from_parts(shape, data)?;
        if let Some(bad) = t.data.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(*bad as f64));
        }
        Ok(t)
    }

    /// Like [`Tensor::new`] without the finiteness scan.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::DataLength {
                len: data.len(),
                shape,
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f32) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(&[n, n], |i| if i / n == i % n { 1.0 } else { 0.0 })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::ShapeMismatch(format!(
                "cannot reshape {:?} to {:?}",
                self.shape, shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }

    /// Slice of the leading axis, `[start, end)`.
    pub fn slice_outer(&self, start: usize, end: usize) -> Result<Tensor> {
        let outer = *self.shape.first().ok_or(Error::Empty("tensor"))?;
        if start > end || end > outer {
            return Err(Error::ShapeMismatch(format!(
                "outer slice {start}..{end} of extent {outer}"
            )));
        }
        let inner: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Ok(Tensor {
            shape,
            data: self.data[start * inner..end * inner].to_vec(),
        })
    }
}

/// `c = alpha * a * b + beta * c` over strided row/column views.
///
/// `a` is `m x k`, `b` is `k x n`, `c` is `m x n`; strides are in elements.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (usize, usize),
    b: &[f32],
    (rsb, csb): (usize, usize),
    beta: f32,
    c: &mut [f32],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |r: usize, cs: usize, rows: usize, cols: usize| {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * r + (cols - 1) * cs + 1
        }
    };
    assert!(a.len() >= last(rsa, csa, m, k));
    assert!(b.len() >= last(rsb, csb, k, n));
    assert!(c.len() >= last(rsc, csc, m, n));
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.shape[1] != b.shape[0] {
        return Err(Error::ShapeMismatch(format!(
            "matmul {:?} x {:?}",
            a.shape, b.shape
        )));
    }
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut out = Tensor::zeros(&[m, n]);
    gemm(
        m,
        k,
        n,
        &a.data,
        (k, 1),
        &b.data,
        (n, 1),
        0.0,
        &mut out.data,
        (n, 1),
    );
    Ok(out)
}

/// Geometry of a 2-D sliding window over a `C x H x W` input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl WindowGeometry {
    pub fn new(
        [channels, height, width]: [usize; 3],
        (kernel_h, kernel_w): (usize, usize),
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let degenerate = || {
            Error::DegenerateOutput(format!(
                "{kernel_h}x{kernel_w} window, stride {stride}, pad {pad} over {channels}x{height}x{width}"
            ))
        };
        if stride == 0 || kernel_h == 0 || kernel_w == 0 || channels == 0 {
            return Err(degenerate());
        }
        let (ph, pw) = (height + 2 * pad, width + 2 * pad);
        if ph < kernel_h || pw < kernel_w {
            return Err(degenerate());
        }
        Ok(Self {
            channels,
            height,
            width,
            kernel_h,
            kernel_w,
            stride,
            pad,
            out_h: (ph - kernel_h) / stride + 1,
            out_w: (pw - kernel_w) / stride + 1,
        })
    }

    /// Rows of the column matrix: `C * kh * kw`.
    pub fn patch_len(&self) -> usize {
        self.channels * self.kernel_h * self.kernel_w
    }

    pub fn out_positions(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn input_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    /// Input index feeding `(row, output position)` of the column matrix, or
    /// `None` for padding.
    #[inline]
    fn source(&self, c: usize, ky: usize, kx: usize, oy: usize, ox: usize) -> Option<usize> {
        let y = (oy * self.stride + ky).checked_sub(self.pad)?;
        let x = (ox * self.stride + kx).checked_sub(self.pad)?;
        (y < self.height && x < self.width).then(|| (c * self.height + y) * self.width + x)
    }
}

/// Unfolds a batch of inputs into one column matrix of shape
/// `patch_len x (batch * out_positions)`; column `n * P + p` is output
/// position `p` of image `n`.
pub(crate) fn im2col_batch(input: &[f32], batch: usize, g: &WindowGeometry, cols: &mut [f32]) {
    let p_len = g.out_positions();
    let row_len = batch * p_len;
    debug_assert_eq!(cols.len(), g.patch_len() * row_len);
    for c in 0..g.channels {
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let row = (c * g.kernel_h + ky) * g.kernel_w + kx;
                let dst_row = &mut cols[row * row_len..(row + 1) * row_len];
                for n in 0..batch {
                    let src = &input[n * g.input_len()..(n + 1) * g.input_len()];
                    let dst = &mut dst_row[n * p_len..(n + 1) * p_len];
                    for oy in 0..g.out_h {
                        for ox in 0..g.out_w {
                            dst[oy * g.out_w + ox] =
                                g.source(c, ky, kx, oy, ox).map_or(0.0, |i| src[i]);
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col_batch`]: scatters-adds columns back into `grad_input`.
pub(crate) fn col2im_batch_add(cols: &[f32], batch: usize, g: &WindowGeometry, grad_input: &mut [f32]) {
    let p_len = g.out_positions();
    let row_len = batch * p_len;
    for c in 0..g.channels {
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let row = (c * g.kernel_h + ky) * g.kernel_w + kx;
                let src_row = &cols[row * row_len..(row + 1) * row_len];
                for n in 0..batch {
                    let dst = &mut grad_input[n * g.input_len()..(n + 1) * g.input_len()];
                    let src = &src_row[n * p_len..(n + 1) * p_len];
                    for oy in 0..g.out_h {
                        for ox in 0..g.out_w {
                            if let Some(i) = g.source(c, ky, kx, oy, ox) {
                                dst[i] += src[oy * g.out_w + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Column matrix `(C*kh*kw) x (out_h*out_w)` of a single `C x H x W` input.
pub fn im2col(input: &Tensor, kernel: (usize, usize), stride: usize, pad: usize) -> Result<Tensor> {
    let [c, h, w] = <[usize; 3]>::try_from(input.shape()).map_err(|_| {
        Error::ShapeMismatch(format!("im2col expects CHW input, got {:?}", input.shape()))
    })?;
    let g = WindowGeometry::new([c, h, w], kernel, stride, pad)?;
    let mut cols = vec![0.0; g.patch_len() * g.out_positions()];
    im2col_batch(input.data(), 1, &g, &mut cols);
    Tensor::from_parts(vec![g.patch_len(), g.out_positions()], cols)
}
