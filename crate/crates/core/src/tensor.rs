//! Dense row-major `f64` tensors and the handful of kernels the layers need.
//!
//! Every reduction here accumulates in a fixed, documented order. The sparse
//! execution path relies on that order to reproduce dense results bit for bit.

use std::fmt;

use crate::error::{Error, Result};

/// A dense n-dimensional array stored row-major.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::shape(format!("extents must be positive, got {shape:?}")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::data(format!("non-finite value at flat index {i}")));
        }
        Ok(Tensor { shape, data })
    }

    /// Builds a tensor without validation. Callers guarantee the invariants.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor::from_parts(shape.to_vec(), vec![0.0; n])
    }

    pub fn from_vec(data: Vec<f64>) -> Result<Self> {
        let n = data.len();
        Tensor::new(vec![n], data)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let m = rows.len();
        let n = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::shape("ragged rows"));
        }
        Tensor::new(vec![m, n], rows.concat())
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.contains(&0) {
            return Err(Error::shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        Ok(Tensor { shape, data: self.data })
    }

    pub fn flatten(self) -> Self {
        let n = self.data.len();
        Tensor { shape: vec![n], data: self.data }
    }

    pub fn zeros_like(&self) -> Self {
        Tensor::zeros(&self.shape)
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    pub fn get2(&self, i: usize, j: usize) -> f64 {
        debug_assert_eq!(self.rank(), 2);
        self.data[i * self.shape[1] + j]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Tensor::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|v| v * s)
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        self.check_same(other)?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Ok(Tensor::from_parts(self.shape.clone(), data))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Self> {
        self.check_same(other)?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Ok(Tensor::from_parts(self.shape.clone(), data))
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        self.check_same(other)?;
        self.data.iter_mut().zip(&other.data).for_each(|(a, b)| *a += b);
        Ok(())
    }

    pub fn transpose(&self) -> Result<Self> {
        if self.rank() != 2 {
            return Err(Error::shape("transpose needs a matrix"));
        }
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Tensor::from_parts(vec![n, m], out))
    }

    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.data.iter().enumerate() {
            if v > self.data[best] {
                best = i;
            }
        }
        best
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Bitwise equality, distinguishing `-0.0` from `0.0`.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    fn check_same(&self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "shape mismatch {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    /// `(C, H, W)` view of a rank-3 tensor.
    pub fn chw(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(Error::shape(format!("expected C×H×W, got {:?}", self.shape))),
        }
    }
}

/// `C = A·B` with each entry summed over the inner index in ascending order.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 {
        return Err(Error::shape("matmul needs two matrices"));
    }
    let (m, k) = (a.shape[0], a.shape[1]);
    let (k2, n) = (b.shape[0], b.shape[1]);
    if k != k2 {
        return Err(Error::shape(format!(
            "inner dimensions differ: {m}×{k} · {k2}×{n}"
        )));
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &a.data[i * k..(i + 1) * k];
        for j in 0..n {
            let mut acc = 0.0;
            for (t, &av) in row.iter().enumerate() {
                acc += av * b.data[t * n + j];
            }
            out[i * n + j] = acc;
        }
    }
    Ok(Tensor::from_parts(vec![m, n], out))
}

/// `y = W·x` for a matrix `W` (m×d) and a flat vector of length d.
pub fn matvec(w: &Tensor, x: &[f64]) -> Result<Vec<f64>> {
    if w.rank() != 2 || w.shape[1] != x.len() {
        return Err(Error::shape(format!(
            "matvec: {:?} against length {}",
            w.shape,
            x.len()
        )));
    }
    let d = w.shape[1];
    Ok(w.data
        .chunks_exact(d)
        .map(|row| {
            let mut acc = 0.0;
            for (wv, xv) in row.iter().zip(x) {
                acc += wv * xv;
            }
            acc
        })
        .collect())
}

fn conv_out_dim(input: usize, kernel: usize, stride: usize) -> usize {
    (input - kernel) / stride + 1
}

fn conv_geometry(
    input: &Tensor,
    filters: &Tensor,
    stride: usize,
) -> Result<(usize, usize, usize, usize, usize, usize, usize, usize)> {
    let (c, h, w) = input.chw()?;
    let (f, fc, kh, kw) = match filters.shape[..] {
        [f, fc, kh, kw] => (f, fc, kh, kw),
        _ => return Err(Error::shape("filters must be F×C×kh×kw")),
    };
    if fc != c {
        return Err(Error::shape(format!("filters expect {fc} channels, input has {c}")));
    }
    if stride == 0 {
        return Err(Error::shape("stride must be positive"));
    }
    if kh > h || kw > w {
        return Err(Error::shape(format!(
            "filter {kh}×{kw} larger than input {h}×{w}"
        )));
    }
    Ok((c, h, w, f, kh, kw, conv_out_dim(h, kh, stride), conv_out_dim(w, kw, stride)))
}

/// Valid (unpadded) cross-correlation. Each output sums over channel, then
/// filter row, then filter column.
pub fn conv2d(input: &Tensor, filters: &Tensor, stride: usize) -> Result<Tensor> {
    let (c, h, w, f, kh, kw, oh, ow) = conv_geometry(input, filters, stride)?;
    let x = &input.data;
    let k = &filters.data;
    let mut out = vec![0.0; f * oh * ow];
    for fi in 0..f {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for ci in 0..c {
                    for r in 0..kh {
                        let xrow = (ci * h + oy * stride + r) * w + ox * stride;
                        let krow = ((fi * c + ci) * kh + r) * kw;
                        for s in 0..kw {
                            acc += k[krow + s] * x[xrow + s];
                        }
                    }
                }
                out[(fi * oh + oy) * ow + ox] = acc;
            }
        }
    }
    Ok(Tensor::from_parts(vec![f, oh, ow], out))
}

/// Accumulates the conv2d gradients into `grad_input` and `grad_filters`.
///
/// Filter gradients accumulate over output positions in row-major order;
/// input gradients over (filter, output position, channel, row, col).
pub fn conv2d_backward(
    input: &Tensor,
    filters: &Tensor,
    stride: usize,
    grad_out: &Tensor,
    grad_input: Option<&mut Tensor>,
    grad_filters: &mut Tensor,
) -> Result<()> {
    let (c, h, w, f, kh, kw, oh, ow) = conv_geometry(input, filters, stride)?;
    if grad_out.shape != [f, oh, ow] {
        return Err(Error::shape("conv2d_backward: grad_out shape"));
    }
    let x = &input.data;
    let g = &grad_out.data;
    let gf = &mut grad_filters.data;
    for fi in 0..f {
        for oy in 0..oh {
            for ox in 0..ow {
                let gv = g[(fi * oh + oy) * ow + ox];
                for ci in 0..c {
                    for r in 0..kh {
                        let xrow = (ci * h + oy * stride + r) * w + ox * stride;
                        let krow = ((fi * c + ci) * kh + r) * kw;
                        for s in 0..kw {
                            gf[krow + s] += gv * x[xrow + s];
                        }
                    }
                }
            }
        }
    }
    if let Some(gi) = grad_input {
        let k = &filters.data;
        let gi = &mut gi.data;
        for fi in 0..f {
            for oy in 0..oh {
                for ox in 0..ow {
                    let gv = g[(fi * oh + oy) * ow + ox];
                    for ci in 0..c {
                        for r in 0..kh {
                            let xrow = (ci * h + oy * stride + r) * w + ox * stride;
                            let krow = ((fi * c + ci) * kh + r) * kw;
                            for s in 0..kw {
                                gi[xrow + s] += k[krow + s] * gv;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(())
}

/// Lowers a C×H×W input into a `(C·kh·kw) × (H'·W')` patch matrix whose row
/// order (channel, filter row, filter col) matches the conv2d summation order.
pub fn im2col(input: &Tensor, kh: usize, kw: usize, stride: usize) -> Result<Tensor> {
    let (c, h, w) = input.chw()?;
    if kh > h || kw > w || stride == 0 {
        return Err(Error::shape("im2col: window does not fit the input"));
    }
    let (oh, ow) = (conv_out_dim(h, kh, stride), conv_out_dim(w, kw, stride));
    let cols = oh * ow;
    let mut out = vec![0.0; c * kh * kw * cols];
    for ci in 0..c {
        for r in 0..kh {
            for s in 0..kw {
                let row = (ci * kh + r) * kw + s;
                for oy in 0..oh {
                    for ox in 0..ow {
                        out[row * cols + oy * ow + ox] =
                            input.data[(ci * h + oy * stride + r) * w + ox * stride + s];
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![c * kh * kw, cols], out))
}

/// Flat input positions of the winners recorded by [`maxpool2d`].
pub type ArgIndices = Vec<usize>;

/// Spatial max pooling per channel. Ties resolve to the lowest flat index.
pub fn maxpool2d(input: &Tensor, window: usize, stride: usize) -> Result<(Tensor, ArgIndices)> {
    let (c, h, w) = input.chw()?;
    if window == 0 || stride == 0 {
        return Err(Error::shape("pool window and stride must be positive"));
    }
    if window > h || window > w {
        return Err(Error::shape(format!(
            "pool window {window} exceeds input {h}×{w}"
        )));
    }
    let (oh, ow) = (conv_out_dim(h, window, stride), conv_out_dim(w, window, stride));
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut arg = Vec::with_capacity(c * oh * ow);
    for ci in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best_idx = (ci * h + oy * stride) * w + ox * stride;
                let mut best = input.data[best_idx];
                for r in 0..window {
                    for s in 0..window {
                        let idx = (ci * h + oy * stride + r) * w + ox * stride + s;
                        if input.data[idx] > best {
                            best = input.data[idx];
                            best_idx = idx;
                        }
                    }
                }
                out.push(best);
                arg.push(best_idx);
            }
        }
    }
    Ok((Tensor::from_parts(vec![c, oh, ow], out), arg))
}

/// Routes each pooled gradient to its recorded winner.
pub fn maxpool2d_backward(input_shape: &[usize], arg: &[usize], grad_out: &Tensor) -> Result<Tensor> {
    if arg.len() != grad_out.len() {
        return Err(Error::internal("maxpool backward: trace/gradient size mismatch"));
    }
    let mut gi = Tensor::zeros(input_shape);
    for (&idx, &g) in arg.iter().zip(&grad_out.data) {
        gi.data[idx] += g;
    }
    Ok(gi)
}
