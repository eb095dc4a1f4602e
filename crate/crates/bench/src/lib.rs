//! Shared fixtures for the benchmarks.

use channelout_core::layers::{channel_out_forward, Conv2D, Dense};
use channelout_core::sparse_exec::SparseActivation;
use channelout_core::{ChannelSelector, Rng, Tensor};

/// A dense layer fed by a channel-out activation of width `d`.
pub struct LinearFixture {
    pub layer: Dense,
    pub masked: Tensor,
    pub sparse: SparseActivation,
}

pub fn linear_fixture(m: usize, d: usize, k: usize, selector: ChannelSelector, seed: u64) -> LinearFixture {
    let mut rng = Rng::new(seed);
    let layer = Dense::init(d, m, &mut rng);
    let x = gaussian(&[d], &mut rng);
    let (masked, trace) = channel_out_forward(&x, k, selector).expect("valid grouping");
    let sparse = SparseActivation::from_channel_out(&masked, &trace).expect("trace matches");
    LinearFixture { layer, masked, sparse }
}

/// A 3×3 convolution fed by a channel-out activation of shape `c×side×side`.
pub struct ConvFixture {
    pub layer: Conv2D,
    pub input: Tensor,
    pub masked: Tensor,
    pub sparse: SparseActivation,
}

pub fn conv_fixture(c: usize, side: usize, filters: usize, k: usize, seed: u64) -> ConvFixture {
    let mut rng = Rng::new(seed);
    let layer = Conv2D::init(c, filters, 3, 3, 1, &mut rng);
    let input = gaussian(&[c, side, side], &mut rng);
    let (masked, trace) = channel_out_forward(&input, k, ChannelSelector::ArgMax).expect("valid grouping");
    let sparse = SparseActivation::from_channel_out(&masked, &trace).expect("trace matches");
    ConvFixture { layer, input, masked, sparse }
}

pub fn gaussian(shape: &[usize], rng: &mut Rng) -> Tensor {
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = rng.standard_normal();
    }
    t
}
