//! Sparse execution of the layer that follows a channel-out group.
//!
//! A channel-out layer with a scalar selector leaves one of every k channels
//! open. The next linear layer only needs the columns of its weight matrix
//! that meet an open channel, so its work shrinks to `l/k` of the dense cost.
//! The kernels here skip closed channels, count multiply-adds, and accumulate
//! in the same ascending order as the dense kernels so both paths agree bit
//! for bit.

use std::hint::black_box;
use std::time::Instant;

use crate::error::{Error, Result};
use crate::layers::{channel_out_forward, GroupTrace};
use crate::rng::Rng;
use crate::selection::ChannelSelector;
use crate::tensor::{self, Tensor};

/// Multiply-add tally for one kernel call (or a sum of calls).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct OpCounter {
    pub multiply_adds: u64,
}

impl OpCounter {
    pub fn add(&mut self, n: usize) {
        self.multiply_adds += n as u64;
    }

    pub fn merge(&mut self, other: OpCounter) {
        self.multiply_adds += other.multiply_adds;
    }
}

/// The open entries of a channel-out output.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseActivation {
    dense_shape: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl SparseActivation {
    /// `indices` must be strictly ascending flat positions into `dense_shape`.
    pub fn new(dense_shape: Vec<usize>, indices: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let total: usize = dense_shape.iter().product();
        if indices.len() != values.len() {
            return Err(Error::internal("sparse activation: index/value length mismatch"));
        }
        if indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::internal("sparse activation: indices not strictly ascending"));
        }
        if indices.last().is_some_and(|&i| i >= total) {
            return Err(Error::internal("sparse activation: index out of range"));
        }
        Ok(SparseActivation { dense_shape, indices, values })
    }

    /// Collects the channels a channel-out trace left open.
    pub fn from_channel_out(output: &Tensor, trace: &GroupTrace) -> Result<Self> {
        if output.len() != trace.input_shape().iter().product::<usize>() {
            return Err(Error::internal("sparse activation: output does not match trace"));
        }
        let mut indices = trace.open_positions();
        indices.sort_unstable();
        let values = indices.iter().map(|&i| output.data()[i]).collect();
        Ok(SparseActivation { dense_shape: output.shape().to_vec(), indices, values })
    }

    pub fn dense_shape(&self) -> &[usize] {
        &self.dense_shape
    }

    pub fn dense_len(&self) -> usize {
        self.dense_shape.iter().product()
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn densify(&self) -> Tensor {
        let mut t = Tensor::zeros(&self.dense_shape);
        for (&i, &v) in self.indices.iter().zip(&self.values) {
            t.data_mut()[i] = v;
        }
        t
    }
}

fn check_linear(w: &Tensor, b: Option<&Tensor>, d: usize) -> Result<(usize, usize)> {
    let (m, wd) = match w.shape()[..] {
        [m, wd] => (m, wd),
        _ => return Err(Error::shape("weights must be a matrix")),
    };
    if wd != d {
        return Err(Error::shape(format!("weights expect {wd} inputs, got {d}")));
    }
    if let Some(b) = b {
        if b.len() != m {
            return Err(Error::shape(format!("bias has {} entries, need {m}", b.len())));
        }
    }
    Ok((m, wd))
}

/// `y = W·x + b` over every column.
pub fn dense_forward(w: &Tensor, b: &Tensor, x: &[f64]) -> Result<(Vec<f64>, OpCounter)> {
    let (m, d) = check_linear(w, Some(b), x.len())?;
    let mut y = tensor::matvec(w, x)?;
    for (yi, bi) in y.iter_mut().zip(b.data()) {
        *yi += bi;
    }
    let mut counter = OpCounter::default();
    counter.add(m * d);
    Ok((y, counter))
}

/// `y = W·densify(x) + b` touching only the open columns, in ascending order.
pub fn sparse_dense_forward(
    w: &Tensor,
    b: &Tensor,
    x: &SparseActivation,
) -> Result<(Vec<f64>, OpCounter)> {
    let (m, d) = check_linear(w, Some(b), x.dense_len())?;
    let wd = w.data();
    let mut y = Vec::with_capacity(m);
    for i in 0..m {
        let row = &wd[i * d..(i + 1) * d];
        let mut acc = 0.0;
        for (&j, &v) in x.indices.iter().zip(&x.values) {
            acc += row[j] * v;
        }
        y.push(acc + b.data()[i]);
    }
    let mut counter = OpCounter::default();
    counter.add(m * x.nnz());
    Ok((y, counter))
}

/// Accumulates `grad_w += grad_y ⊗ x` and returns `Wᵀ·grad_y`.
///
/// Rows with a zero output gradient contribute nothing and are skipped.
pub fn dense_backward(
    w: &Tensor,
    x: &[f64],
    grad_y: &[f64],
    grad_w: &mut Tensor,
) -> Result<(Vec<f64>, OpCounter)> {
    let (m, d) = check_linear(w, None, x.len())?;
    if grad_y.len() != m || grad_w.shape() != w.shape() {
        return Err(Error::shape("dense backward: gradient shapes"));
    }
    let mut counter = OpCounter::default();
    let wd = w.data();
    let gw = grad_w.data_mut();
    let mut grad_x = vec![0.0; d];
    for (i, &g) in grad_y.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        let row = &wd[i * d..(i + 1) * d];
        let grow = &mut gw[i * d..(i + 1) * d];
        for j in 0..d {
            grow[j] += g * x[j];
            grad_x[j] += row[j] * g;
        }
        counter.add(2 * d);
    }
    Ok((grad_x, counter))
}

/// Sparse counterpart of [`dense_backward`]. Weight-gradient columns of
/// closed channels are left untouched; the input gradient is returned only for
/// the open entries, in the order of `x.indices()`.
pub fn sparse_dense_backward(
    w: &Tensor,
    x: &SparseActivation,
    grad_y: &[f64],
    grad_w: &mut Tensor,
) -> Result<(Vec<f64>, OpCounter)> {
    let (m, d) = check_linear(w, None, x.dense_len())?;
    if grad_y.len() != m || grad_w.shape() != w.shape() {
        return Err(Error::shape("sparse backward: gradient shapes"));
    }
    let mut counter = OpCounter::default();
    let wd = w.data();
    let gw = grad_w.data_mut();
    let mut grad_x = vec![0.0; x.nnz()];
    for (i, &g) in grad_y.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        let row = &wd[i * d..(i + 1) * d];
        let grow = &mut gw[i * d..(i + 1) * d];
        for (slot, (&j, &v)) in x.indices.iter().zip(&x.values).enumerate() {
            grow[j] += g * v;
            grad_x[slot] += row[j] * g;
        }
        counter.add(2 * x.nnz());
    }
    Ok((grad_x, counter))
}

fn open_mask(x: &SparseActivation) -> Vec<bool> {
    let mut mask = vec![false; x.dense_len()];
    for &i in &x.indices {
        mask[i] = true;
    }
    mask
}

/// Convolution over a sparse C×H×W input, lowered to per-position sparse
/// matrix-vector products over the im2col patch matrix.
pub fn sparse_conv_forward(
    filters: &Tensor,
    bias: &Tensor,
    stride: usize,
    x: &SparseActivation,
) -> Result<(Tensor, OpCounter)> {
    let (f, c, kh, kw) = match filters.shape()[..] {
        [f, c, kh, kw] => (f, c, kh, kw),
        _ => return Err(Error::shape("filters must be F×C×kh×kw")),
    };
    let dense = x.densify();
    let patches = tensor::im2col(&dense, kh, kw, stride)?;
    let mask = tensor::im2col(
        &Tensor::from_parts(
            x.dense_shape.clone(),
            open_mask(x).into_iter().map(|o| if o { 1.0 } else { 0.0 }).collect(),
        ),
        kh,
        kw,
        stride,
    )?;
    let rows = c * kh * kw;
    let cols = patches.shape()[1];
    let w = filters.clone().reshape(vec![f, rows])?;
    let (_, h, wd) = dense.chw()?;
    let (oh, ow) = ((h - kh) / stride + 1, (wd - kw) / stride + 1);
    let mut out = vec![0.0; f * cols];
    let mut counter = OpCounter::default();
    for p in 0..cols {
        let mut idx = Vec::new();
        let mut vals = Vec::new();
        for r in 0..rows {
            if mask.data()[r * cols + p] != 0.0 {
                idx.push(r);
                vals.push(patches.data()[r * cols + p]);
            }
        }
        let column = SparseActivation { dense_shape: vec![rows], indices: idx, values: vals };
        let (y, ops) = sparse_dense_forward(&w, bias, &column)?;
        counter.merge(ops);
        for (fi, v) in y.into_iter().enumerate() {
            out[fi * cols + p] = v;
        }
    }
    Ok((Tensor::from_parts(vec![f, oh, ow], out), counter))
}

/// Sparse counterpart of [`tensor::conv2d_backward`]: only open input
/// positions contribute to the filter gradient, and the input gradient is
/// accumulated only at open positions (the rest of `grad_input` is untouched).
pub fn sparse_conv_backward(
    filters: &Tensor,
    stride: usize,
    x: &SparseActivation,
    grad_out: &Tensor,
    grad_input: &mut Tensor,
    grad_filters: &mut Tensor,
) -> Result<OpCounter> {
    let (f, c, kh, kw) = match filters.shape()[..] {
        [f, c, kh, kw] => (f, c, kh, kw),
        _ => return Err(Error::shape("filters must be F×C×kh×kw")),
    };
    let (xc, h, w) = match x.dense_shape[..] {
        [xc, h, w] => (xc, h, w),
        _ => return Err(Error::shape("sparse conv input must be C×H×W")),
    };
    if xc != c || kh > h || kw > w || stride == 0 {
        return Err(Error::shape("sparse conv backward: geometry"));
    }
    let (oh, ow) = ((h - kh) / stride + 1, (w - kw) / stride + 1);
    if grad_out.shape() != [f, oh, ow] || grad_input.shape() != x.dense_shape() {
        return Err(Error::shape("sparse conv backward: gradient shapes"));
    }
    let mask = open_mask(x);
    let dense = x.densify();
    let xv = dense.data();
    let g = grad_out.data();
    let k = filters.data();
    let mut counter = OpCounter::default();
    {
        let gf = grad_filters.data_mut();
        for fi in 0..f {
            for oy in 0..oh {
                for ox in 0..ow {
                    let gv = g[(fi * oh + oy) * ow + ox];
                    for ci in 0..c {
                        for r in 0..kh {
                            let xrow = (ci * h + oy * stride + r) * w + ox * stride;
                            let krow = ((fi * c + ci) * kh + r) * kw;
                            for s in 0..kw {
                                if mask[xrow + s] {
                                    gf[krow + s] += gv * xv[xrow + s];
                                    counter.add(1);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    let gi = grad_input.data_mut();
    for fi in 0..f {
        for oy in 0..oh {
            for ox in 0..ow {
                let gv = g[(fi * oh + oy) * ow + ox];
                for ci in 0..c {
                    for r in 0..kh {
                        let xrow = (ci * h + oy * stride + r) * w + ox * stride;
                        let krow = ((fi * c + ci) * kh + r) * kw;
                        for s in 0..kw {
                            if mask[xrow + s] {
                                gi[xrow + s] += k[krow + s] * gv;
                                counter.add(1);
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(counter)
}

/// One row of the sparse-vs-dense benchmark.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchReport {
    pub m: usize,
    pub d: usize,
    pub k: usize,
    pub l: usize,
    pub madds_dense: u64,
    pub madds_sparse: u64,
    pub ratio: f64,
    pub time_dense_ns: u128,
    pub time_sparse_ns: u128,
}

impl BenchReport {
    pub const CSV_HEADER: &'static str =
        "m,d,k,l,madds_dense,madds_sparse,ratio,time_dense_ns,time_sparse_ns";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.m,
            self.d,
            self.k,
            self.l,
            self.madds_dense,
            self.madds_sparse,
            self.ratio,
            self.time_dense_ns,
            self.time_sparse_ns
        )
    }
}

/// Times an `m×d` dense layer fed by a channel-out group of size `k`, on the
/// dense and sparse paths. Operation counts are exact; times are as measured.
pub fn bench_sparse_vs_dense(
    m: usize,
    d: usize,
    k: usize,
    selector: ChannelSelector,
    trials: usize,
    rng: &mut Rng,
) -> Result<BenchReport> {
    if trials == 0 {
        return Err(Error::config("bench needs at least one trial"));
    }
    if m == 0 || d == 0 || !d.is_multiple_of(k) {
        return Err(Error::config(format!(
            "bench dims: m={m}, d={d} must be positive with d divisible by k={k}"
        )));
    }
    let w_data = (0..m * d).map(|_| rng.uniform(-1.0, 1.0)).collect();
    let w = Tensor::new(vec![m, d], w_data)?;
    let b = Tensor::new(vec![m], (0..m).map(|_| rng.uniform(-1.0, 1.0)).collect())?;
    let a = Tensor::new(vec![d], (0..d).map(|_| rng.standard_normal()).collect())?;
    let (h, trace) = channel_out_forward(&a, k, selector)?;
    let sparse = SparseActivation::from_channel_out(&h, &trace)?;

    let mut madds_dense = 0;
    let mut madds_sparse = 0;
    let start = Instant::now();
    for _ in 0..trials {
        let (y, ops) = dense_forward(&w, &b, black_box(h.data()))?;
        black_box(y);
        madds_dense = ops.multiply_adds;
    }
    let time_dense_ns = start.elapsed().as_nanos() / trials as u128;
    let start = Instant::now();
    for _ in 0..trials {
        let (y, ops) = sparse_dense_forward(&w, &b, black_box(&sparse))?;
        black_box(y);
        madds_sparse = ops.multiply_adds;
    }
    let time_sparse_ns = start.elapsed().as_nanos() / trials as u128;
    Ok(BenchReport {
        m,
        d,
        k,
        l: selector.l(),
        madds_dense,
        madds_sparse,
        ratio: madds_sparse as f64 / madds_dense as f64,
        time_dense_ns,
        time_sparse_ns,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_tensor(shape: &[usize], rng: &mut Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap()
    }

    #[test]
    fn full_density_matches_dense() {
        let mut rng = Rng::new(3);
        let w = random_tensor(&[4, 6], &mut rng);
        let b = random_tensor(&[4], &mut rng);
        let x: Vec<f64> = (0..6).map(|_| rng.standard_normal()).collect();
        let sx = SparseActivation::new(vec![6], (0..6).collect(), x.clone()).unwrap();
        let (yd, cd) = dense_forward(&w, &b, &x).unwrap();
        let (ys, cs) = sparse_dense_forward(&w, &b, &sx).unwrap();
        assert_eq!(yd, ys);
        assert_eq!(cd, cs);
        assert_eq!(cs.multiply_adds, 24);
    }

    #[test]
    fn empty_index_set_yields_bias() {
        let mut rng = Rng::new(4);
        let w = random_tensor(&[3, 5], &mut rng);
        let b = random_tensor(&[3], &mut rng);
        let sx = SparseActivation::new(vec![5], vec![], vec![]).unwrap();
        let (y, c) = sparse_dense_forward(&w, &b, &sx).unwrap();
        assert_eq!(y, b.data());
        assert_eq!(c.multiply_adds, 0);
    }

    #[test]
    fn half_work_after_k2_argmax() {
        let mut rng = Rng::new(5);
        let w = random_tensor(&[8, 16], &mut rng);
        let b = random_tensor(&[8], &mut rng);
        let a = random_tensor(&[16], &mut rng);
        let (h, trace) = channel_out_forward(&a, 2, ChannelSelector::ArgMax).unwrap();
        let sx = SparseActivation::from_channel_out(&h, &trace).unwrap();
        assert_eq!(sx.nnz(), 8);
        assert_eq!(sx.densify(), h);
        // oracle: plain matrix product plus bias
        let col = h.clone().reshape(vec![16, 1]).unwrap();
        let oracle: Vec<f64> = tensor::matmul(&w, &col)
            .unwrap()
            .data()
            .iter()
            .zip(b.data())
            .map(|(v, bi)| v + bi)
            .collect();
        let (y, c) = sparse_dense_forward(&w, &b, &sx).unwrap();
        assert!(y.iter().zip(&oracle).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert_eq!(c.multiply_adds, 64);
    }

    #[test]
    fn backward_zero_grad_counts_nothing() {
        let mut rng = Rng::new(6);
        let w = random_tensor(&[3, 4], &mut rng);
        let sx = SparseActivation::new(vec![4], vec![1, 3], vec![0.5, -2.0]).unwrap();
        let mut gw = w.zeros_like();
        let (gx, c) = sparse_dense_backward(&w, &sx, &[0.0; 3], &mut gw).unwrap();
        assert_eq!(gx, vec![0.0, 0.0]);
        assert_eq!(c.multiply_adds, 0);
        assert!(gw.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_matches_dense_on_open_entries() {
        let mut rng = Rng::new(7);
        let w = random_tensor(&[5, 9], &mut rng);
        let a = random_tensor(&[9], &mut rng);
        let (h, trace) = channel_out_forward(&a, 3, ChannelSelector::ArgMax).unwrap();
        let sx = SparseActivation::from_channel_out(&h, &trace).unwrap();
        let gy: Vec<f64> = (0..5).map(|_| rng.standard_normal()).collect();
        let mut gw_d = w.zeros_like();
        let mut gw_s = w.zeros_like();
        let (gx_d, cd) = dense_backward(&w, h.data(), &gy, &mut gw_d).unwrap();
        let (gx_s, cs) = sparse_dense_backward(&w, &sx, &gy, &mut gw_s).unwrap();
        assert!(gw_d.bit_eq(&gw_s));
        for (slot, &j) in sx.indices().iter().enumerate() {
            assert_eq!(gx_d[j].to_bits(), gx_s[slot].to_bits());
        }
        assert_eq!(cs.multiply_adds * 3, cd.multiply_adds);
    }

    #[test]
    fn sparse_conv_matches_dense() {
        let mut rng = Rng::new(8);
        let a = random_tensor(&[4, 5, 5], &mut rng);
        let (h, trace) = channel_out_forward(&a, 2, ChannelSelector::ArgMax).unwrap();
        let sx = SparseActivation::from_channel_out(&h, &trace).unwrap();
        let filt = random_tensor(&[3, 4, 2, 2], &mut rng);
        let bias = random_tensor(&[3], &mut rng);
        let mut dense = tensor::conv2d(&h, &filt, 1).unwrap();
        for fi in 0..3 {
            for v in &mut dense.data_mut()[fi * 16..(fi + 1) * 16] {
                *v += bias.data()[fi];
            }
        }
        let (sparse, c) = sparse_conv_forward(&filt, &bias, 1, &sx).unwrap();
        assert!(dense.bit_eq(&sparse));
        // every output reads half of its 16 receptive-field entries
        assert_eq!(c.multiply_adds, 3 * 16 * 8);
    }

    #[test]
    fn bench_ratios() {
        let mut rng = Rng::new(9);
        for (k, sel, want) in [
            (2, ChannelSelector::ArgMax, 0.5),
            (5, ChannelSelector::ArgMax, 0.2),
            (4, ChannelSelector::TopL(2), 0.5),
        ] {
            let r = bench_sparse_vs_dense(8, 20, k, sel, 3, &mut rng).unwrap();
            assert_eq!(r.ratio, want);
        }
    }
}
