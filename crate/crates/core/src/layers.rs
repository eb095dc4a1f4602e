//! Layers, selection traces, and backpropagation through a layer stack.
//!
//! Channel-out and maxout layers group consecutive channels (the leading axis)
//! in blocks of `k`. For `C×H×W` activations the selection runs independently
//! at every spatial position. Every forward pass returns a [`Trace`] that holds
//! exactly what backward needs: the open channels of each group, pool winners,
//! dropout masks, and the inputs of the parametric layers.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::selection::{ChannelSelector, IndexSet};
use crate::sparse_exec::{self, OpCounter, SparseActivation};
use crate::tensor::{self, ArgIndices, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Which kernels run the linear layers that sit directly after a channel-out layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Exec {
    #[default]
    Dense,
    Sparse,
}

/// Fully connected layer; any input is flattened first.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    /// `out × in`
    pub weights: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv2D {
    /// `F × C × kh × kw`
    pub filters: Tensor,
    pub bias: Tensor,
    pub stride: usize,
}

fn glorot(fan_in: usize, fan_out: usize, n: usize, rng: &mut Rng) -> Vec<f64> {
    let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..n).map(|_| rng.uniform(-s, s)).collect()
}

impl Dense {
    pub fn init(inputs: usize, outputs: usize, rng: &mut Rng) -> Self {
        Dense {
            weights: Tensor::from_parts(
                vec![outputs, inputs],
                glorot(inputs, outputs, inputs * outputs, rng),
            ),
            bias: Tensor::zeros(&[outputs]),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn outputs(&self) -> usize {
        self.weights.shape()[0]
    }
}

impl Conv2D {
    pub fn init(
        channels: usize,
        filters: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        rng: &mut Rng,
    ) -> Self {
        let n = filters * channels * kh * kw;
        Conv2D {
            filters: Tensor::from_parts(
                vec![filters, channels, kh, kw],
                glorot(channels * kh * kw, filters * kh * kw, n, rng),
            ),
            bias: Tensor::zeros(&[filters]),
            stride,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Dense(Dense),
    Conv2D(Conv2D),
    MaxPool { window: usize, stride: usize },
    ChannelOut { k: usize, selector: ChannelSelector },
    Maxout { k: usize },
    Dropout { p: f64 },
    /// Loss head; the network output is the logits fed into it.
    SoftmaxXent,
}

impl Layer {
    pub fn name(&self) -> &'static str {
        match self {
            Layer::Dense(_) => "dense",
            Layer::Conv2D(_) => "conv",
            Layer::MaxPool { .. } => "maxpool",
            Layer::ChannelOut { .. } => "channelout",
            Layer::Maxout { .. } => "maxout",
            Layer::Dropout { .. } => "dropout",
            Layer::SoftmaxXent => "softmax",
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            Layer::Dense(d) => d.weights.len() + d.bias.len(),
            Layer::Conv2D(c) => c.filters.len() + c.bias.len(),
            _ => 0,
        }
    }

    fn params(&self) -> Vec<&Tensor> {
        match self {
            Layer::Dense(d) => vec![&d.weights, &d.bias],
            Layer::Conv2D(c) => vec![&c.filters, &c.bias],
            _ => Vec::new(),
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Layer::Dense(d) => vec![&mut d.weights, &mut d.bias],
            Layer::Conv2D(c) => vec![&mut c.filters, &mut c.bias],
            _ => Vec::new(),
        }
    }

    /// Output shape for a given input shape, or a configuration error.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match self {
            Layer::Dense(d) => {
                let n: usize = input.iter().product();
                if n != d.inputs() {
                    return Err(Error::config(format!(
                        "dense layer expects {} inputs, got {n}",
                        d.inputs()
                    )));
                }
                Ok(vec![d.outputs()])
            }
            Layer::Conv2D(c) => {
                let (f, fc, kh, kw) = match c.filters.shape()[..] {
                    [f, fc, kh, kw] => (f, fc, kh, kw),
                    _ => return Err(Error::config("conv filters must be F×C×kh×kw")),
                };
                match input[..] {
                    [ch, h, w] if ch == fc && kh <= h && kw <= w && c.stride > 0 => {
                        Ok(vec![f, (h - kh) / c.stride + 1, (w - kw) / c.stride + 1])
                    }
                    _ => Err(Error::config(format!(
                        "conv {fc}×{kh}×{kw} (stride {}) does not fit input {input:?}",
                        c.stride
                    ))),
                }
            }
            Layer::MaxPool { window, stride } => match input[..] {
                [ch, h, w] if *window > 0 && *stride > 0 && *window <= h && *window <= w => {
                    Ok(vec![ch, (h - window) / stride + 1, (w - window) / stride + 1])
                }
                _ => Err(Error::config(format!(
                    "pool window {window} stride {stride} does not fit input {input:?}"
                ))),
            },
            Layer::ChannelOut { k, selector } => {
                check_groups(input, *k)?;
                if *k > 1 {
                    selector.validate(*k)?;
                }
                Ok(input.to_vec())
            }
            Layer::Maxout { k } => {
                check_groups(input, *k)?;
                let mut out = input.to_vec();
                out[0] /= k;
                Ok(out)
            }
            Layer::Dropout { p } => {
                check_drop_probability(*p)?;
                Ok(input.to_vec())
            }
            Layer::SoftmaxXent => {
                if input.len() != 1 || input[0] < 2 {
                    return Err(Error::config(format!(
                        "softmax needs a flat input with at least 2 classes, got {input:?}"
                    )));
                }
                Ok(input.to_vec())
            }
        }
    }
}

fn check_groups(shape: &[usize], k: usize) -> Result<()> {
    if k == 0 || !shape[0].is_multiple_of(k) {
        return Err(Error::config(format!(
            "feature dimension {} is not divisible by group size {k}",
            shape[0]
        )));
    }
    Ok(())
}

fn check_drop_probability(p: f64) -> Result<()> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::config(format!("dropout probability must be in [0, 1), got {p}")));
    }
    Ok(())
}

/// Selections of one channel-out or maxout layer.
///
/// Groups are ordered channel-group major, then spatial position.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GroupTrace {
    input_shape: Vec<usize>,
    k: usize,
    groups: Vec<IndexSet>,
}

impl GroupTrace {
    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn groups(&self) -> &[IndexSet] {
        &self.groups
    }

    fn spatial(&self) -> usize {
        self.input_shape[1..].iter().product()
    }

    /// Flat input position of channel `j` in group `g`.
    pub fn position(&self, g: usize, j: usize) -> usize {
        let spatial = self.spatial();
        let (cg, pos) = (g / spatial, g % spatial);
        (cg * self.k + j) * spatial + pos
    }

    /// Flat positions of every open channel, in group order.
    pub fn open_positions(&self) -> Vec<usize> {
        self.groups
            .iter()
            .enumerate()
            .flat_map(|(g, set)| set.indices().iter().map(move |&j| self.position(g, j)))
            .collect()
    }
}

fn for_each_group(
    x: &Tensor,
    k: usize,
    mut f: impl FnMut(usize, &[f64]) -> Result<()>,
) -> Result<()> {
    check_groups(x.shape(), k)?;
    let spatial: usize = x.shape()[1..].iter().product();
    let cgroups = x.shape()[0] / k;
    let mut buf = vec![0.0; k];
    for cg in 0..cgroups {
        for pos in 0..spatial {
            for (j, slot) in buf.iter_mut().enumerate() {
                *slot = x.data()[(cg * k + j) * spatial + pos];
            }
            f(cg * spatial + pos, &buf)?;
        }
    }
    Ok(())
}

/// Channel-out activation: within each group only the selected channels pass.
pub fn channel_out_forward(
    input: &Tensor,
    k: usize,
    selector: ChannelSelector,
) -> Result<(Tensor, GroupTrace)> {
    check_groups(input.shape(), k)?;
    if k > 1 {
        selector.validate(k)?;
    }
    let mut groups = Vec::with_capacity(input.len() / k);
    for_each_group(input, k, |_, a| {
        let set = if k == 1 {
            IndexSet::single(0)
        } else {
            selector.select(a)?
        };
        groups.push(set);
        Ok(())
    })?;
    let trace = GroupTrace { input_shape: input.shape().to_vec(), k, groups };
    let mut out = Tensor::zeros(input.shape());
    for p in trace.open_positions() {
        out.data_mut()[p] = input.data()[p];
    }
    Ok((out, trace))
}

/// Passes gradient only through the channels opened in the forward pass.
pub fn channel_out_backward(trace: &GroupTrace, grad_out: &Tensor) -> Result<Tensor> {
    if grad_out.shape() != trace.input_shape() {
        return Err(Error::internal(format!(
            "channel-out backward: gradient {:?} does not match trace {:?}",
            grad_out.shape(),
            trace.input_shape()
        )));
    }
    let mut gi = Tensor::zeros(grad_out.shape());
    for p in trace.open_positions() {
        gi.data_mut()[p] = grad_out.data()[p];
    }
    Ok(gi)
}

/// Maxout: each group collapses to its maximum.
pub fn maxout_forward(input: &Tensor, k: usize) -> Result<(Tensor, GroupTrace)> {
    check_groups(input.shape(), k)?;
    let mut groups = Vec::with_capacity(input.len() / k);
    let mut values = Vec::with_capacity(input.len() / k);
    for_each_group(input, k, |_, a| {
        let set = if k == 1 {
            IndexSet::single(0)
        } else {
            ChannelSelector::ArgMax.select_unchecked(a)
        };
        values.push(a[set.indices()[0]]);
        groups.push(set);
        Ok(())
    })?;
    let mut shape = input.shape().to_vec();
    shape[0] /= k;
    let trace = GroupTrace { input_shape: input.shape().to_vec(), k, groups };
    Ok((Tensor::from_parts(shape, values), trace))
}

pub fn maxout_backward(trace: &GroupTrace, grad_out: &Tensor) -> Result<Tensor> {
    if grad_out.len() != trace.groups.len() {
        return Err(Error::internal("maxout backward: gradient does not match trace"));
    }
    let mut gi = Tensor::zeros(&trace.input_shape);
    for (g, set) in trace.groups.iter().enumerate() {
        gi.data_mut()[trace.position(g, set.indices()[0])] = grad_out.data()[g];
    }
    Ok(gi)
}

/// Per-unit multipliers of a dropout pass: 0 for dropped units, `1/(1-p)` for survivors.
#[derive(Clone, Debug, PartialEq)]
pub struct DropoutMask(pub Option<Vec<f64>>);

/// Inverted dropout. Inference (and `p == 0`) is the identity.
pub fn dropout_forward(
    input: &Tensor,
    p: f64,
    mode: Mode,
    rng: &mut Rng,
) -> Result<(Tensor, DropoutMask)> {
    check_drop_probability(p)?;
    if mode == Mode::Infer || p == 0.0 {
        return Ok((input.clone(), DropoutMask(None)));
    }
    let keep = 1.0 / (1.0 - p);
    let mask: Vec<f64> = (0..input.len())
        .map(|_| if rng.bernoulli(p) { 0.0 } else { keep })
        .collect();
    let out = input.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
    Ok((Tensor::from_parts(input.shape().to_vec(), out), DropoutMask(Some(mask))))
}

pub fn dropout_backward(mask: &DropoutMask, grad_out: &Tensor) -> Result<Tensor> {
    match &mask.0 {
        None => Ok(grad_out.clone()),
        Some(m) if m.len() == grad_out.len() => Ok(Tensor::from_parts(
            grad_out.shape().to_vec(),
            grad_out.data().iter().zip(m).map(|(g, m)| g * m).collect(),
        )),
        Some(_) => Err(Error::internal("dropout backward: mask size mismatch")),
    }
}

/// Cross-entropy of the softmax of `logits` against `label`, with its gradient.
pub fn softmax_xent(logits: &Tensor, label: usize) -> Result<(f64, Tensor)> {
    let z = logits.data();
    if label >= z.len() {
        return Err(Error::data(format!("label {label} out of range for {} classes", z.len())));
    }
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let loss = sum.ln() - (z[label] - max);
    let mut grad: Vec<f64> = exps.iter().map(|e| e / sum).collect();
    grad[label] -= 1.0;
    Ok((loss, Tensor::from_parts(logits.shape().to_vec(), grad)))
}

/// What one layer recorded during forward.
#[derive(Clone, Debug, PartialEq)]
pub enum LayerTrace {
    Dense { input: Tensor },
    Conv { input: Tensor },
    Pool { input_shape: Vec<usize>, winners: ArgIndices },
    ChannelOut(GroupTrace),
    Maxout(GroupTrace),
    Dropout(DropoutMask),
    Passthrough,
}

/// Everything recorded by one forward pass through a [`Network`].
#[derive(Clone, Debug, PartialEq)]
pub struct Trace {
    pub layers: Vec<LayerTrace>,
}

impl Trace {
    /// Channel-out and maxout selections, in network order.
    pub fn group_traces(&self) -> impl Iterator<Item = &GroupTrace> {
        self.layers.iter().filter_map(|t| match t {
            LayerTrace::ChannelOut(g) | LayerTrace::Maxout(g) => Some(g),
            _ => None,
        })
    }

    /// Every discrete routing decision (group selections and pool winners) as a flat vector.
    pub fn routing(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for t in &self.layers {
            match t {
                LayerTrace::ChannelOut(g) | LayerTrace::Maxout(g) => {
                    out.extend(g.groups.iter().map(|s| s.code(g.k)));
                }
                LayerTrace::Pool { winners, .. } => out.extend_from_slice(winners),
                _ => {}
            }
        }
        out
    }
}

/// Gradient buffers aligned with [`Network::params`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub tensors: Vec<Tensor>,
}

impl Gradients {
    pub fn zero(&mut self) {
        self.tensors.iter_mut().for_each(|t| t.fill(0.0));
    }

    pub fn scale(&mut self, s: f64) {
        for t in &mut self.tensors {
            t.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn bit_eq(&self, other: &Gradients) -> bool {
        self.tensors.len() == other.tensors.len()
            && self.tensors.iter().zip(&other.tensors).all(|(a, b)| a.bit_eq(b))
    }
}

/// A shape-checked layer stack.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    input_shape: Vec<usize>,
    layers: Vec<Layer>,
    shapes: Vec<Vec<usize>>,
}

impl Network {
    pub fn new(input_shape: Vec<usize>, layers: Vec<Layer>) -> Result<Self> {
        if input_shape.is_empty() || input_shape.contains(&0) {
            return Err(Error::config(format!("bad input shape {input_shape:?}")));
        }
        let mut shapes = vec![input_shape.clone()];
        for (i, layer) in layers.iter().enumerate() {
            if matches!(layer, Layer::SoftmaxXent) && i + 1 != layers.len() {
                return Err(Error::config(format!("layer {i}: softmax must be the last layer")));
            }
            let next = layer
                .output_shape(shapes.last().unwrap())
                .map_err(|e| Error::config(format!("layer {i} ({}): {e}", layer.name())))?;
            shapes.push(next);
        }
        Ok(Network { input_shape, layers, shapes })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> &[usize] {
        self.shapes.last().unwrap()
    }

    /// Input shape of layer `i`; index `layers().len()` gives the output shape.
    pub fn shape_at(&self, i: usize) -> &[usize] {
        &self.shapes[i]
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(Layer::params).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(Layer::params_mut).collect()
    }

    /// Layer index owning each entry of [`Network::params`].
    pub fn param_owners(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| std::iter::repeat_n(i, l.params().len()))
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    pub fn zero_grads(&self) -> Gradients {
        Gradients { tensors: self.params().into_iter().map(Tensor::zeros_like).collect() }
    }

    /// Number of channel-out/maxout groups per sample, in network order.
    pub fn group_count(&self) -> usize {
        self.layers
            .iter()
            .zip(&self.shapes)
            .map(|(l, s)| match l {
                Layer::ChannelOut { k, .. } | Layer::Maxout { k } => s.iter().product::<usize>() / k,
                _ => 0,
            })
            .sum()
    }

    pub fn forward(&self, x: &Tensor, mode: Mode, rng: &mut Rng) -> Result<(Tensor, Trace)> {
        let mut counter = OpCounter::default();
        self.forward_exec(x, mode, rng, Exec::Dense, &mut counter)
    }

    fn sparse_input(&self, i: usize, input: &Tensor, traces: &[LayerTrace], exec: Exec) -> Result<Option<SparseActivation>> {
        if exec == Exec::Sparse && i > 0 {
            if let LayerTrace::ChannelOut(g) = &traces[i - 1] {
                return SparseActivation::from_channel_out(input, g).map(Some);
            }
        }
        Ok(None)
    }

    /// Forward pass returning the logits. With [`Exec::Sparse`], linear layers
    /// fed directly by a channel-out layer skip the closed channels.
    pub fn forward_exec(
        &self,
        x: &Tensor,
        mode: Mode,
        rng: &mut Rng,
        exec: Exec,
        counter: &mut OpCounter,
    ) -> Result<(Tensor, Trace)> {
        if x.shape() != self.input_shape.as_slice() {
            return Err(Error::shape(format!(
                "network expects input {:?}, got {:?}",
                self.input_shape,
                x.shape()
            )));
        }
        let mut traces: Vec<LayerTrace> = Vec::with_capacity(self.layers.len());
        let mut act = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let (next, trace) = match layer {
                Layer::Dense(d) => {
                    let flat = act.clone().flatten();
                    let (y, ops) = match self.sparse_input(i, &flat, &traces, exec)? {
                        Some(sx) => sparse_exec::sparse_dense_forward(&d.weights, &d.bias, &sx)?,
                        None => sparse_exec::dense_forward(&d.weights, &d.bias, flat.data())?,
                    };
                    counter.merge(ops);
                    (Tensor::from_parts(vec![y.len()], y), LayerTrace::Dense { input: act })
                }
                Layer::Conv2D(c) => {
                    let y = match self.sparse_input(i, &act, &traces, exec)? {
                        Some(sx) => {
                            let (y, ops) = sparse_exec::sparse_conv_forward(&c.filters, &c.bias, c.stride, &sx)?;
                            counter.merge(ops);
                            y
                        }
                        None => {
                            let mut y = tensor::conv2d(&act, &c.filters, c.stride)?;
                            let per_map = y.len() / c.bias.len();
                            for (fi, chunk) in y.data_mut().chunks_mut(per_map).enumerate() {
                                let b = c.bias.data()[fi];
                                chunk.iter_mut().for_each(|v| *v += b);
                            }
                            counter.add(c.filters.len() * per_map);
                            y
                        }
                    };
                    (y, LayerTrace::Conv { input: act })
                }
                Layer::MaxPool { window, stride } => {
                    let (y, winners) = tensor::maxpool2d(&act, *window, *stride)?;
                    (y, LayerTrace::Pool { input_shape: act.shape().to_vec(), winners })
                }
                Layer::ChannelOut { k, selector } => {
                    let (y, g) = channel_out_forward(&act, *k, *selector)?;
                    (y, LayerTrace::ChannelOut(g))
                }
                Layer::Maxout { k } => {
                    let (y, g) = maxout_forward(&act, *k)?;
                    (y, LayerTrace::Maxout(g))
                }
                Layer::Dropout { p } => {
                    let (y, m) = dropout_forward(&act, *p, mode, rng)?;
                    (y, LayerTrace::Dropout(m))
                }
                Layer::SoftmaxXent => (act, LayerTrace::Passthrough),
            };
            traces.push(trace);
            act = next;
        }
        Ok((act, Trace { layers: traces }))
    }

    /// Backpropagates `grad_out` (gradient w.r.t. the logits), accumulating
    /// parameter gradients into `grads`. Returns the input gradient.
    pub fn backward(&self, trace: &Trace, grad_out: &Tensor, grads: &mut Gradients) -> Result<Tensor> {
        let mut counter = OpCounter::default();
        self.backward_exec(trace, grad_out, grads, Exec::Dense, &mut counter)
    }

    pub fn backward_exec(
        &self,
        trace: &Trace,
        grad_out: &Tensor,
        grads: &mut Gradients,
        exec: Exec,
        counter: &mut OpCounter,
    ) -> Result<Tensor> {
        if trace.layers.len() != self.layers.len() {
            return Err(Error::internal("trace does not belong to this network"));
        }
        if grads.tensors.len() != self.params().len() {
            return Err(Error::internal("gradient buffers do not match the network"));
        }
        let mut slot = grads.tensors.len();
        let mut g = grad_out.clone();
        for i in (0..self.layers.len()).rev() {
            let layer = &self.layers[i];
            slot -= layer.params().len();
            g = match (layer, &trace.layers[i]) {
                (Layer::Dense(d), LayerTrace::Dense { input }) => {
                    let (gw, rest) = grads.tensors[slot..].split_at_mut(1);
                    let gb = &mut rest[0];
                    for (b, v) in gb.data_mut().iter_mut().zip(g.data()) {
                        *b += v;
                    }
                    let flat = input.clone().flatten();
                    let gx = match self.sparse_input(i, &flat, &trace.layers, exec)? {
                        Some(sx) => {
                            let (open, ops) =
                                sparse_exec::sparse_dense_backward(&d.weights, &sx, g.data(), &mut gw[0])?;
                            counter.merge(ops);
                            let mut full = vec![0.0; flat.len()];
                            for (&j, v) in sx.indices().iter().zip(open) {
                                full[j] = v;
                            }
                            full
                        }
                        None => {
                            let (gx, ops) =
                                sparse_exec::dense_backward(&d.weights, flat.data(), g.data(), &mut gw[0])?;
                            counter.merge(ops);
                            gx
                        }
                    };
                    Tensor::from_parts(input.shape().to_vec(), gx)
                }
                (Layer::Conv2D(c), LayerTrace::Conv { input }) => {
                    let (gf, rest) = grads.tensors[slot..].split_at_mut(1);
                    let gb = &mut rest[0];
                    let per_map = g.len() / c.bias.len();
                    for (fi, chunk) in g.data().chunks(per_map).enumerate() {
                        for v in chunk {
                            gb.data_mut()[fi] += v;
                        }
                    }
                    let mut gi = input.zeros_like();
                    match self.sparse_input(i, input, &trace.layers, exec)? {
                        Some(sx) => {
                            let ops = sparse_exec::sparse_conv_backward(
                                &c.filters, c.stride, &sx, &g, &mut gi, &mut gf[0],
                            )?;
                            counter.merge(ops);
                        }
                        None => {
                            tensor::conv2d_backward(input, &c.filters, c.stride, &g, Some(&mut gi), &mut gf[0])?;
                            counter.add(2 * c.filters.len() * per_map);
                        }
                    }
                    gi
                }
                (Layer::MaxPool { .. }, LayerTrace::Pool { input_shape, winners }) => {
                    tensor::maxpool2d_backward(input_shape, winners, &g)?
                }
                (Layer::ChannelOut { .. }, LayerTrace::ChannelOut(t)) => channel_out_backward(t, &g)?,
                (Layer::Maxout { .. }, LayerTrace::Maxout(t)) => maxout_backward(t, &g)?,
                (Layer::Dropout { .. }, LayerTrace::Dropout(m)) => dropout_backward(m, &g)?,
                (Layer::SoftmaxXent, LayerTrace::Passthrough) => g,
                _ => return Err(Error::internal(format!("trace kind mismatch at layer {i}"))),
            };
        }
        Ok(g)
    }

    /// Forward, loss, and backward for one labelled sample. Gradients accumulate.
    pub fn loss_and_grad(
        &self,
        x: &Tensor,
        label: usize,
        mode: Mode,
        rng: &mut Rng,
        grads: &mut Gradients,
    ) -> Result<(f64, Tensor)> {
        let (logits, trace) = self.forward(x, mode, rng)?;
        let (loss, g) = softmax_xent(&logits, label)?;
        self.backward(&trace, &g, grads)?;
        Ok((loss, logits))
    }

    /// Inference-mode loss.
    pub fn loss(&self, x: &Tensor, label: usize) -> Result<f64> {
        let mut rng = Rng::new(0);
        let (logits, _) = self.forward(x, Mode::Infer, &mut rng)?;
        Ok(softmax_xent(&logits, label)?.0)
    }

    pub fn predict(&self, x: &Tensor) -> Result<usize> {
        let mut rng = Rng::new(0);
        Ok(self.forward(x, Mode::Infer, &mut rng)?.0.argmax())
    }
}

/// Result of a finite-difference gradient check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Some probe changed a routing decision; those entries were skipped.
    pub boundary_flag: bool,
    pub checked: usize,
    pub skipped: usize,
    pub per_layer: Vec<LayerCheck>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerCheck {
    pub layer: usize,
    pub kind: &'static str,
    pub max_rel_err: f64,
    pub checked: usize,
    pub skipped: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Entries probed per parameter tensor (all entries when the tensor is smaller).
    pub per_tensor: usize,
    /// Floor on the denominator of the relative error.
    pub denom_floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions { eps: 1e-5, per_tensor: 20, denom_floor: 1e-4 }
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares backprop gradients against central differences on a random
/// subset of parameters. A probe that changes any routing decision straddles a
/// kink of the piecewise-linear network; that entry is skipped and flagged.
pub fn grad_check(
    net: &Network,
    input: &Tensor,
    label: usize,
    opts: GradCheckOptions,
    rng: &mut Rng,
) -> Result<GradCheckReport> {
    if opts.eps <= 0.0 {
        return Err(Error::config("grad_check eps must be positive"));
    }
    let mut scratch = Rng::new(0);
    let mut grads = net.zero_grads();
    let (logits, base_trace) = net.forward(input, Mode::Infer, &mut scratch)?;
    let (_, g) = softmax_xent(&logits, label)?;
    net.backward(&base_trace, &g, &mut grads)?;
    let base_routing = base_trace.routing();

    let owners = net.param_owners();
    let mut probe = net.clone();
    let mut per_layer: Vec<LayerCheck> = Vec::new();
    for (t, analytic) in grads.tensors.iter().enumerate() {
        let n = analytic.len();
        let mut picks: Vec<usize> = (0..n).collect();
        if n > opts.per_tensor {
            rng.shuffle(&mut picks);
            picks.truncate(opts.per_tensor);
            picks.sort_unstable();
        }
        let layer = owners[t];
        if per_layer.last().is_none_or(|l| l.layer != layer) {
            per_layer.push(LayerCheck {
                layer,
                kind: net.layers[layer].name(),
                max_rel_err: 0.0,
                checked: 0,
                skipped: 0,
            });
        }
        let entry = per_layer.last_mut().unwrap();
        for idx in picks {
            let orig = probe.params()[t].data()[idx];
            let mut eval = |value: f64| -> Result<(f64, Vec<usize>)> {
                probe.params_mut()[t].data_mut()[idx] = value;
                let (z, tr) = probe.forward(input, Mode::Infer, &mut scratch)?;
                Ok((softmax_xent(&z, label)?.0, tr.routing()))
            };
            let (lp, rp) = eval(orig + opts.eps)?;
            let (lm, rm) = eval(orig - opts.eps)?;
            probe.params_mut()[t].data_mut()[idx] = orig;
            if rp != base_routing || rm != base_routing {
                entry.skipped += 1;
                continue;
            }
            let numeric = (lp - lm) / (2.0 * opts.eps);
            let err = relative_error(analytic.data()[idx], numeric, opts.denom_floor);
            entry.max_rel_err = entry.max_rel_err.max(err);
            entry.checked += 1;
        }
    }
    Ok(GradCheckReport {
        max_rel_err: per_layer.iter().map(|l| l.max_rel_err).fold(0.0, f64::max),
        boundary_flag: per_layer.iter().any(|l| l.skipped > 0),
        checked: per_layer.iter().map(|l| l.checked).sum(),
        skipped: per_layer.iter().map(|l| l.skipped).sum(),
        per_layer,
    })
}
