//! Dense f32 tensors and the handful of ops the networks need.
//!
//! Everything is stored row-major in a contiguous `Vec<f32>`. The op set is
//! deliberately small: matrix multiply, 2-D cross-correlation, 2x2 max-pool,
//! ReLU, and a few elementwise/reduction helpers, each with a hand-written
//! backward counterpart. Matrix products are delegated to `matrixmultiply`;
//! shape checking happens here at the API boundary.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: left {left:?}, right {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("data length {len} does not match shape {shape:?}")]
    BadLength { shape: Vec<usize>, len: usize },
    #[error("{op} expects {expected}, got shape {got:?}")]
    BadRank {
        op: &'static str,
        expected: &'static str,
        got: Vec<usize>,
    },
    #[error("kernel {k}x{k} larger than padded input {h}x{w}")]
    KernelTooLarge { k: usize, h: usize, w: usize },
}

/// Zero-padding policy for [`conv2d`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// No padding; output shrinks by `k - 1`.
    Valid,
    /// Zero-pad so that `out = ceil(in / stride)`. When the total padding is
    /// odd the extra pixel goes on the bottom/right.
    Same,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self, TensorError> {
        let n: usize = shape.iter().product();
        if n != data.len() || shape.iter().any(|&d| d == 0) {
            return Err(TensorError::BadLength {
                shape,
                len: data.len(),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], value: f32) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    /// Reinterprets the buffer under a new shape of the same total size.
    pub fn reshape(mut self, shape: &[usize]) -> Result<Self, TensorError> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(TensorError::BadLength {
                shape: shape.to_vec(),
                len: self.data.len(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Rows `lo..hi` of a tensor whose leading axis is the batch.
    pub fn slice_rows(&self, lo: usize, hi: usize) -> Tensor {
        assert!(self.shape.len() >= 2 && hi <= self.shape[0] && lo < hi);
        let row: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = hi - lo;
        Tensor {
            shape,
            data: self.data[lo * row..hi * row].to_vec(),
        }
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch {
                op: "mul",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a * b)
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn scale(&self, a: f32) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| v * a).collect(),
        }
    }

    pub fn scale_in_place(&mut self, a: f32) {
        for v in &mut self.data {
            *v *= a;
        }
    }

    /// Sum of all elements, accumulated in f64.
    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }

    /// Index of the first maximum over the flattened buffer.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.data.iter().enumerate() {
            if v > self.data[best] {
                best = i;
            }
        }
        best
    }

    /// Per-row argmax of a `[batch, n]` tensor; ties go to the lowest index.
    pub fn argmax_rows(&self) -> Vec<usize> {
        assert_eq!(self.shape.len(), 2);
        let n = self.shape[1];
        self.data
            .chunks_exact(n)
            .map(|row| {
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }

    /// 2-D transpose.
    pub fn transpose(&self) -> Result<Tensor, TensorError> {
        if self.shape.len() != 2 {
            return Err(TensorError::BadRank {
                op: "transpose",
                expected: "a 2-D tensor",
                got: self.shape.clone(),
            });
        }
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Tensor {
            shape: vec![n, m],
            data,
        })
    }

    pub fn relu(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| v.max(0.0)).collect(),
        }
    }
}

// Trivial backward counterparts. `upstream` is dL/d(output); each returns
// dL/d(input).

pub fn add_backward(upstream: &Tensor) -> (Tensor, Tensor) {
    (upstream.clone(), upstream.clone())
}

pub fn scale_backward(upstream: &Tensor, a: f32) -> Tensor {
    upstream.scale(a)
}

pub fn transpose_backward(upstream: &Tensor) -> Result<Tensor, TensorError> {
    upstream.transpose()
}

pub fn sum_backward(upstream: f32, input_shape: &[usize]) -> Tensor {
    Tensor::filled(input_shape, upstream)
}

/// Gradient through ReLU, gated by the forward *output* (`y > 0` iff `z > 0`).
pub fn relu_backward(upstream: &Tensor, output: &Tensor) -> Result<Tensor, TensorError> {
    if upstream.shape != output.shape {
        return Err(TensorError::ShapeMismatch {
            op: "relu_backward",
            left: upstream.shape.clone(),
            right: output.shape.clone(),
        });
    }
    let data = upstream
        .data
        .iter()
        .zip(&output.data)
        .map(|(&g, &y)| if y > 0.0 { g } else { 0.0 })
        .collect();
    Ok(Tensor {
        shape: upstream.shape.clone(),
        data,
    })
}

/// `[batch, m] x [m, n] -> [batch, n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
    if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
        return Err(TensorError::ShapeMismatch {
            op: "matmul",
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut c = Tensor::zeros(&[m, n]);
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            k as isize,
            1,
            b.data.as_ptr(),
            n as isize,
            1,
            0.0,
            c.data.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    Ok(c)
}

/// `a^T x b` for `a: [k, m]`, `b: [k, n]`, without materializing the transpose.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
    if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[0] != b.shape[0] {
        return Err(TensorError::ShapeMismatch {
            op: "matmul_tn",
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    let (k, m, n) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut c = Tensor::zeros(&[m, n]);
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            1,
            m as isize,
            b.data.as_ptr(),
            n as isize,
            1,
            0.0,
            c.data.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    Ok(c)
}

/// `a x b^T` for `a: [m, k]`, `b: [n, k]`.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
    if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[1] {
        return Err(TensorError::ShapeMismatch {
            op: "matmul_nt",
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[0]);
    let mut c = Tensor::zeros(&[m, n]);
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            k as isize,
            1,
            b.data.as_ptr(),
            1,
            k as isize,
            0.0,
            c.data.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    Ok(c)
}

/// Output spatial extent and top/left padding for one axis.
fn conv_extent(input: usize, k: usize, stride: usize, padding: Padding) -> (usize, usize) {
    match padding {
        Padding::Valid => ((input - k) / stride + 1, 0),
        Padding::Same => {
            let out = input.div_ceil(stride);
            let pad_total = ((out - 1) * stride + k).saturating_sub(input);
            (out, pad_total / 2)
        }
    }
}

/// Geometry of one conv application, shared by forward and backward.
struct ConvGeom {
    batch: usize,
    in_ch: usize,
    h: usize,
    w: usize,
    filters: usize,
    k: usize,
    stride: usize,
    out_h: usize,
    out_w: usize,
    pad_top: usize,
    pad_left: usize,
}

fn conv_geometry(
    input: &Tensor,
    kernels: &Tensor,
    stride: usize,
    padding: Padding,
) -> Result<ConvGeom, TensorError> {
    if input.shape.len() != 4 {
        return Err(TensorError::BadRank {
            op: "conv2d",
            expected: "input [batch, C, H, W]",
            got: input.shape.clone(),
        });
    }
    if kernels.shape.len() != 4 || kernels.shape[2] != kernels.shape[3] {
        return Err(TensorError::BadRank {
            op: "conv2d",
            expected: "kernels [F, C, k, k]",
            got: kernels.shape.clone(),
        });
    }
    if input.shape[1] != kernels.shape[1] {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d",
            left: input.shape.clone(),
            right: kernels.shape.clone(),
        });
    }
    let (h, w, k) = (input.shape[2], input.shape[3], kernels.shape[2]);
    if padding == Padding::Valid && (k > h || k > w) {
        return Err(TensorError::KernelTooLarge { k, h, w });
    }
    let (out_h, pad_top) = conv_extent(h, k, stride, padding);
    let (out_w, pad_left) = conv_extent(w, k, stride, padding);
    Ok(ConvGeom {
        batch: input.shape[0],
        in_ch: input.shape[1],
        h,
        w,
        filters: kernels.shape[0],
        k,
        stride,
        out_h,
        out_w,
        pad_top,
        pad_left,
    })
}

/// Unrolls one sample into a `[C*k*k, out_h*out_w]` column matrix.
fn im2col(g: &ConvGeom, sample: &[f32], col: &mut [f32]) {
    let positions = g.out_h * g.out_w;
    debug_assert_eq!(col.len(), g.in_ch * g.k * g.k * positions);
    col.fill(0.0);
    for c in 0..g.in_ch {
        let plane = &sample[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = ((c * g.k + ky) * g.k + kx) * positions;
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad_top as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let dst = &mut col[row + oy * g.out_w..row + (oy + 1) * g.out_w];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kx) as isize - g.pad_left as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-adds a column-matrix gradient back onto one input sample.
fn col2im(g: &ConvGeom, col: &[f32], sample_grad: &mut [f32]) {
    let positions = g.out_h * g.out_w;
    for c in 0..g.in_ch {
        let plane = &mut sample_grad[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = ((c * g.k + ky) * g.k + kx) * positions;
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad_top as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let src = &col[row + oy * g.out_w..row + (oy + 1) * g.out_w];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kx) as isize - g.pad_left as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[ox];
                        }
                    }
                }
            }
        }
    }
}

/// Batched 2-D cross-correlation: `[B, C, H, W] * [F, C, k, k] -> [B, F, H', W']`.
pub fn conv2d(
    input: &Tensor,
    kernels: &Tensor,
    stride: usize,
    padding: Padding,
) -> Result<Tensor, TensorError> {
    let g = conv_geometry(input, kernels, stride, padding)?;
    let positions = g.out_h * g.out_w;
    let ckk = g.in_ch * g.k * g.k;
    let mut out = Tensor::zeros(&[g.batch, g.filters, g.out_h, g.out_w]);
    let mut col = vec![0.0f32; ckk * positions];
    let in_stride = g.in_ch * g.h * g.w;
    let out_stride = g.filters * positions;
    for b in 0..g.batch {
        im2col(&g, &input.data[b * in_stride..(b + 1) * in_stride], &mut col);
        unsafe {
            matrixmultiply::sgemm(
                g.filters,
                ckk,
                positions,
                1.0,
                kernels.data.as_ptr(),
                ckk as isize,
                1,
                col.as_ptr(),
                positions as isize,
                1,
                0.0,
                out.data[b * out_stride..].as_mut_ptr(),
                positions as isize,
                1,
            );
        }
    }
    Ok(out)
}

/// Gradients of [`conv2d`] w.r.t. its input and kernels.
pub fn conv2d_backward(
    input: &Tensor,
    kernels: &Tensor,
    stride: usize,
    padding: Padding,
    upstream: &Tensor,
) -> Result<(Tensor, Tensor), TensorError> {
    let g = conv_geometry(input, kernels, stride, padding)?;
    let positions = g.out_h * g.out_w;
    if upstream.shape != [g.batch, g.filters, g.out_h, g.out_w] {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d_backward",
            left: upstream.shape.clone(),
            right: vec![g.batch, g.filters, g.out_h, g.out_w],
        });
    }
    let ckk = g.in_ch * g.k * g.k;
    let mut dinput = Tensor::zeros(input.shape());
    let mut dkernels = Tensor::zeros(kernels.shape());
    let mut col = vec![0.0f32; ckk * positions];
    let mut dcol = vec![0.0f32; ckk * positions];
    let in_stride = g.in_ch * g.h * g.w;
    let out_stride = g.filters * positions;
    for b in 0..g.batch {
        let sample = &input.data[b * in_stride..(b + 1) * in_stride];
        let up = &upstream.data[b * out_stride..(b + 1) * out_stride];
        im2col(&g, sample, &mut col);
        unsafe {
            // dK += up x col^T, accumulated across the batch
            matrixmultiply::sgemm(
                g.filters,
                positions,
                ckk,
                1.0,
                up.as_ptr(),
                positions as isize,
                1,
                col.as_ptr(),
                1,
                positions as isize,
                1.0,
                dkernels.data.as_mut_ptr(),
                ckk as isize,
                1,
            );
            // dcol = K^T x up
            matrixmultiply::sgemm(
                ckk,
                g.filters,
                positions,
                1.0,
                kernels.data.as_ptr(),
                1,
                ckk as isize,
                up.as_ptr(),
                positions as isize,
                1,
                0.0,
                dcol.as_mut_ptr(),
                positions as isize,
                1,
            );
        }
        col2im(&g, &dcol, &mut dinput.data[b * in_stride..(b + 1) * in_stride]);
    }
    Ok((dinput, dkernels))
}

/// 2x2 max-pool with stride 2 on `[B, C, H, W]`; ties resolve to the first
/// (lowest-index) element so the backward routing is deterministic. Also
/// returns the flat input index chosen per output cell.
pub fn maxpool2x2_with_indices(input: &Tensor) -> Result<(Tensor, Vec<u32>), TensorError> {
    if input.shape.len() != 4 {
        return Err(TensorError::BadRank {
            op: "maxpool2x2",
            expected: "input [batch, C, H, W]",
            got: input.shape.clone(),
        });
    }
    let (batch, ch, h, w) = (
        input.shape[0],
        input.shape[1],
        input.shape[2],
        input.shape[3],
    );
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[batch, ch, oh, ow]);
    let mut idx = vec![0u32; batch * ch * oh * ow];
    let mut o = 0;
    for bc in 0..batch * ch {
        let plane = &input.data[bc * h * w..(bc + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = (2 * oy) * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let cand = (2 * oy + dy) * w + (2 * ox + dx);
                    if plane[cand] > plane[best] {
                        best = cand;
                    }
                }
                out.data[o] = plane[best];
                idx[o] = (bc * h * w + best) as u32;
                o += 1;
            }
        }
    }
    Ok((out, idx))
}

pub fn maxpool2x2(input: &Tensor) -> Result<Tensor, TensorError> {
    maxpool2x2_with_indices(input).map(|(t, _)| t)
}

/// Routes the upstream gradient back to the positions selected in the
/// forward pass.
pub fn maxpool2x2_backward(upstream: &Tensor, indices: &[u32], input_shape: &[usize]) -> Tensor {
    assert_eq!(upstream.len(), indices.len());
    let mut out = Tensor::zeros(input_shape);
    for (&g, &i) in upstream.data.iter().zip(indices) {
        out.data[i as usize] += g;
    }
    out
}
