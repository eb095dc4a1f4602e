//! Network construction from a config, minibatch SGD with momentum,
//! evaluation, ZCA whitening, and flip augmentation.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::config::{DataSource, DataSpec, LayerSpec, NetworkConfig, TrainConfig};
use crate::data::{load_csv_dataset, make_synthetic, Dataset};
use crate::error::{Error, Result};
use crate::layers::{Conv2D, Dense, Gradients, Layer, Mode, Network};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Parameter count of one config layer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerReport {
    pub index: usize,
    pub kind: &'static str,
    pub output_shape: Vec<usize>,
    pub params: usize,
}

#[derive(Clone, Debug)]
pub struct BuiltNetwork {
    pub network: Network,
    pub report: Vec<LayerReport>,
}

impl BuiltNetwork {
    pub fn param_count(&self) -> usize {
        self.report.iter().map(|r| r.params).sum()
    }

    pub fn report_csv(&self) -> String {
        let mut out = String::from("layer,kind,output_shape,params\n");
        for r in &self.report {
            let shape: Vec<String> = r.output_shape.iter().map(|d| d.to_string()).collect();
            out.push_str(&format!("{},{},{},{}\n", r.index, r.kind, shape.join("x"), r.params));
        }
        out.push_str(&format!("total,,,{}\n", self.param_count()));
        out
    }
}

/// Total candidate units produced by hidden weight layers (the classifier excluded).
pub fn feature_map_count(cfg: &NetworkConfig) -> usize {
    cfg.layers
        .iter()
        .map(|l| match l {
            LayerSpec::Dense { units } => *units,
            LayerSpec::Conv { filters, .. } => *filters,
            _ => 0,
        })
        .sum()
}

/// Builds and shape-checks the layer stack. Weights come from the `init`
/// sub-stream of `rng`.
pub fn build_network(
    cfg: &NetworkConfig,
    input_shape: &[usize],
    classes: usize,
    rng: &Rng,
) -> Result<BuiltNetwork> {
    let mut init = rng.substream("init");
    let mut layers = Vec::new();
    let mut report = Vec::new();
    let mut shape = input_shape.to_vec();
    let push = |layers: &mut Vec<Layer>, shape: &mut Vec<usize>, layer: Layer, index: usize| -> Result<()> {
        let next = layer.output_shape(shape).map_err(|e| {
            Error::config(format!("layer {index} ({}): {}", layer.name(), strip_prefix(&e)))
        })?;
        layers.push(layer);
        *shape = next;
        Ok(())
    };
    if cfg.dropout_input > 0.0 {
        push(&mut layers, &mut shape, Layer::Dropout { p: cfg.dropout_input }, 0)?;
    }
    let mut weight_layers_seen = 0;
    for (index, spec) in cfg.layers.iter().enumerate() {
        let is_weight = matches!(spec, LayerSpec::Dense { .. } | LayerSpec::Conv { .. });
        if is_weight && weight_layers_seen > 0 && cfg.dropout_hidden > 0.0 {
            push(&mut layers, &mut shape, Layer::Dropout { p: cfg.dropout_hidden }, index)?;
        }
        let before = layers.len();
        match spec {
            LayerSpec::Dense { units } => {
                let inputs = shape.iter().product();
                push(&mut layers, &mut shape, Layer::Dense(Dense::init(inputs, *units, &mut init)), index)?;
            }
            LayerSpec::Conv { filters, kernel, stride } => {
                let channels = match shape[..] {
                    [c, _, _] => c,
                    _ => {
                        return Err(Error::config(format!(
                            "layer {index} (conv): needs C×H×W input, got {shape:?}"
                        )))
                    }
                };
                let conv = Conv2D::init(channels, *filters, kernel.0, kernel.1, *stride, &mut init);
                push(&mut layers, &mut shape, Layer::Conv2D(conv), index)?;
            }
            LayerSpec::MaxPool { window, stride } => {
                push(&mut layers, &mut shape, Layer::MaxPool { window: *window, stride: *stride }, index)?
            }
            LayerSpec::ChannelOut { k, selector } => {
                push(&mut layers, &mut shape, Layer::ChannelOut { k: *k, selector: *selector }, index)?
            }
            LayerSpec::Maxout { k } => push(&mut layers, &mut shape, Layer::Maxout { k: *k }, index)?,
            LayerSpec::Dropout { p } => push(&mut layers, &mut shape, Layer::Dropout { p: *p }, index)?,
            LayerSpec::Softmax => {
                let inputs = shape.iter().product();
                push(&mut layers, &mut shape, Layer::Dense(Dense::init(inputs, classes, &mut init)), index)?;
                push(&mut layers, &mut shape, Layer::SoftmaxXent, index)?;
            }
        }
        if is_weight {
            weight_layers_seen += 1;
        }
        report.push(LayerReport {
            index,
            kind: spec.kind(),
            output_shape: shape.clone(),
            params: layers[before..].iter().map(Layer::param_count).sum(),
        });
    }
    if !matches!(layers.last(), Some(Layer::SoftmaxXent)) {
        return Err(Error::config("the last layer must be softmax"));
    }
    let network = Network::new(input_shape.to_vec(), layers)?;
    Ok(BuiltNetwork { network, report })
}

fn strip_prefix(e: &Error) -> String {
    match e {
        Error::Config(m) => m.clone(),
        other => other.to_string(),
    }
}

/// Momentum buffers, one per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct SgdState {
    velocity: Vec<Tensor>,
}

impl SgdState {
    pub fn new(net: &Network) -> Self {
        SgdState { velocity: net.params().into_iter().map(Tensor::zeros_like).collect() }
    }

    pub fn for_shapes(params: &[&Tensor]) -> Self {
        SgdState { velocity: params.iter().map(|t| t.zeros_like()).collect() }
    }
}

/// Classical momentum: `v ← μ·v − η·g`, then `w ← w + v`.
pub fn sgd_step(
    params: Vec<&mut Tensor>,
    grads: &Gradients,
    state: &mut SgdState,
    learning_rate: f64,
    momentum: f64,
) -> Result<()> {
    if learning_rate < 0.0 || !(0.0..1.0).contains(&momentum) {
        return Err(Error::config(format!(
            "need learning_rate >= 0 and momentum in [0, 1), got {learning_rate}, {momentum}"
        )));
    }
    if params.len() != grads.tensors.len() || params.len() != state.velocity.len() {
        return Err(Error::internal("optimizer state does not match parameters"));
    }
    for ((w, g), v) in params.into_iter().zip(&grads.tensors).zip(&mut state.velocity) {
        for ((wi, gi), vi) in w.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vi = momentum * *vi - learning_rate * gi;
            *wi += *vi;
        }
    }
    Ok(())
}

/// One row of training history.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_acc: f64,
}

pub const METRICS_HEADER: &str = "epoch,train_loss,train_acc,test_acc";

pub fn metrics_csv(history: &[EpochMetrics]) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for m in history {
        out.push_str(&format!("{},{},{},{}\n", m.epoch, m.train_loss, m.train_acc, m.test_acc));
    }
    out
}

/// Inference-mode mean loss and accuracy.
pub fn evaluate(net: &Network, data: &Dataset) -> Result<(f64, f64)> {
    let mut rng = Rng::new(0);
    let mut loss = 0.0;
    let mut correct = 0;
    for s in data.samples() {
        let (logits, _) = net.forward(&s.features, Mode::Infer, &mut rng)?;
        loss += crate::layers::softmax_xent(&logits, s.label)?.0;
        correct += usize::from(logits.argmax() == s.label);
    }
    let n = data.len() as f64;
    Ok((loss / n, correct as f64 / n))
}

/// Minibatch SGD. `train_loss` and `train_acc` are running averages over the
/// epoch's training passes; `test_acc` is measured in inference mode after it.
pub fn train(
    net: &mut Network,
    train_set: &Dataset,
    test_set: &Dataset,
    cfg: &TrainConfig,
    rng: &Rng,
) -> Result<Vec<EpochMetrics>> {
    train_with_observer(net, train_set, test_set, cfg, rng, |_, _| Ok(()))
}

/// [`train`] with a callback invoked after every epoch.
pub fn train_with_observer(
    net: &mut Network,
    train_set: &Dataset,
    test_set: &Dataset,
    cfg: &TrainConfig,
    rng: &Rng,
    mut observer: impl FnMut(usize, &Network) -> Result<()>,
) -> Result<Vec<EpochMetrics>> {
    if train_set.is_empty() {
        return Err(Error::data("training set is empty"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::config("batch_size must be positive"));
    }
    let mut shuffle = rng.substream("shuffle");
    let mut dropout = rng.substream("dropout");
    let mut augment = rng.substream("augment");
    let mut state = SgdState::new(net);
    let mut grads = net.zero_grads();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        shuffle.shuffle(&mut order);
        let mut loss_sum = 0.0;
        let mut correct = 0;
        for batch in order.chunks(cfg.batch_size) {
            grads.zero();
            for &i in batch {
                let s = &train_set.samples()[i];
                let x = if cfg.flip && s.features.rank() == 3 {
                    augment_flip(&s.features, &mut augment, 0.5)?
                } else {
                    s.features.clone()
                };
                let (loss, logits) = net.loss_and_grad(&x, s.label, Mode::Train, &mut dropout, &mut grads)?;
                loss_sum += loss;
                correct += usize::from(logits.argmax() == s.label);
            }
            grads.scale(1.0 / batch.len() as f64);
            sgd_step(net.params_mut(), &grads, &mut state, cfg.learning_rate, cfg.momentum)?;
        }
        let n = train_set.len() as f64;
        let test_acc = if test_set.is_empty() { 0.0 } else { evaluate(net, test_set)?.1 };
        history.push(EpochMetrics {
            epoch,
            train_loss: loss_sum / n,
            train_acc: correct as f64 / n,
            test_acc,
        });
        observer(epoch, net)?;
    }
    Ok(history)
}

/// Mean-centering plus the symmetric whitening matrix `E (D + εI)^{-1/2} Eᵀ`.
#[derive(Clone, Debug, PartialEq)]
pub struct ZcaTransform {
    pub mean: Vec<f64>,
    pub matrix: Tensor,
}

pub const ZCA_EPSILON: f64 = 1e-2;

impl ZcaTransform {
    pub fn fit(data: &Dataset) -> Result<Self> {
        if data.len() < 2 {
            return Err(Error::data("whitening needs at least 2 samples"));
        }
        let d = data.feature_len();
        let n = data.len() as f64;
        let mut mean = vec![0.0; d];
        for s in data.samples() {
            for (m, v) in mean.iter_mut().zip(s.features.data()) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut cov = DMatrix::<f64>::zeros(d, d);
        for s in data.samples() {
            let x: Vec<f64> = s.features.data().iter().zip(&mean).map(|(v, m)| v - m).collect();
            for i in 0..d {
                for j in i..d {
                    cov[(i, j)] += x[i] * x[j];
                }
            }
        }
        for i in 0..d {
            for j in i..d {
                cov[(i, j)] /= n;
                cov[(j, i)] = cov[(i, j)];
            }
        }
        let eig = SymmetricEigen::new(cov);
        let scale = eig.eigenvalues.map(|l| 1.0 / (l.max(0.0) + ZCA_EPSILON).sqrt());
        let w = &eig.eigenvectors * DMatrix::from_diagonal(&scale) * eig.eigenvectors.transpose();
        let mut matrix = Vec::with_capacity(d * d);
        for i in 0..d {
            for j in 0..d {
                matrix.push(w[(i, j)]);
            }
        }
        Ok(ZcaTransform { mean, matrix: Tensor::new(vec![d, d], matrix)? })
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let centered: Vec<f64> = x.data().iter().zip(&self.mean).map(|(v, m)| v - m).collect();
        let y = crate::tensor::matvec(&self.matrix, &centered)?;
        Tensor::new(x.shape().to_vec(), y)
    }
}

/// Fits ZCA on `data` and returns the whitened copy with the transform.
pub fn zca_whiten(data: &Dataset) -> Result<(Dataset, ZcaTransform)> {
    let t = ZcaTransform::fit(data)?;
    Ok((data.map_features(|x| t.apply(x))?, t))
}

/// Reverses the column order of every channel with probability `p`.
pub fn augment_flip(image: &Tensor, rng: &mut Rng, p: f64) -> Result<Tensor> {
    let (c, h, w) = image
        .chw()
        .map_err(|_| Error::config(format!("flip needs a C×H×W image, got {:?}", image.shape())))?;
    if !rng.bernoulli(p) {
        return Ok(image.clone());
    }
    let src = image.data();
    let mut out = Vec::with_capacity(src.len());
    for row in 0..c * h {
        out.extend(src[row * w..(row + 1) * w].iter().rev());
    }
    Tensor::new(vec![c, h, w], out)
}

/// Loads or generates the data described by `spec`, splits it, and applies
/// ZCA (fitted on the training split) when requested.
pub fn prepare_data(spec: &DataSpec, train_cfg: &TrainConfig, rng: &Rng) -> Result<(Dataset, Dataset)> {
    let (train, test) = match &spec.source {
        DataSource::Synthetic { kind, classes, samples_per_class, noise } => {
            let all = make_synthetic(*kind, *classes, *samples_per_class, *noise, rng.substream("data").next_u64())?;
            all.split(spec.test_fraction, &mut rng.substream("split"))?
        }
        DataSource::Csv { path, test_path } => {
            let train = load_csv_dataset(path)?.dataset;
            match test_path {
                Some(t) => {
                    let test = load_csv_dataset(t)?.dataset;
                    if test.feature_shape() != train.feature_shape() {
                        return Err(Error::data("train and test CSVs have different feature shapes"));
                    }
                    let classes = train.classes().max(test.classes());
                    (
                        Dataset::new(train.samples().to_vec(), classes)?,
                        Dataset::new(test.samples().to_vec(), classes)?,
                    )
                }
                None => train.split(spec.test_fraction, &mut rng.substream("split"))?,
            }
        }
    };
    if train_cfg.zca {
        let (white, t) = zca_whiten(&train)?;
        let test = test.map_features(|x| t.apply(x))?;
        return Ok((white, test));
    }
    Ok((train, test))
}

/// How two builds are claimed to relate in a maxout-vs-channel-out comparison.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Matching {
    /// Parameter counts within 5%.
    Parameters,
    /// Identical hidden feature-map counts.
    FeatureMaps,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonRow {
    pub name: String,
    pub params: usize,
    pub feature_maps: usize,
    pub final_train_loss: f64,
    pub final_test_acc: f64,
    pub best_test_acc: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    pub matching: Matching,
    /// The claimed relationship holds.
    pub verified: bool,
    pub rows: Vec<ComparisonRow>,
}

impl Comparison {
    pub fn csv(&self) -> String {
        let mut out = String::from("name,params,feature_maps,final_train_loss,final_test_acc,best_test_acc\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.name, r.params, r.feature_maps, r.final_train_loss, r.final_test_acc, r.best_test_acc
            ));
        }
        out
    }
}

/// Builds both networks, checks the claimed matching, trains both on the same
/// split with the same seed, and tabulates the results.
pub fn compare_networks(
    a: (&str, &NetworkConfig),
    b: (&str, &NetworkConfig),
    matching: Matching,
    train_set: &Dataset,
    test_set: &Dataset,
    cfg: &TrainConfig,
    rng: &Rng,
) -> Result<Comparison> {
    let mut rows = Vec::new();
    let mut counts = Vec::new();
    for (name, net_cfg) in [a, b] {
        let built = build_network(net_cfg, train_set.feature_shape(), train_set.classes(), rng)?;
        counts.push((built.param_count(), feature_map_count(net_cfg)));
        let mut net = built.network;
        let history = train(&mut net, train_set, test_set, cfg, rng)?;
        let last = history.last().ok_or_else(|| Error::config("need at least one epoch"))?;
        rows.push(ComparisonRow {
            name: name.to_string(),
            params: counts.last().unwrap().0,
            feature_maps: counts.last().unwrap().1,
            final_train_loss: last.train_loss,
            final_test_acc: last.test_acc,
            best_test_acc: history.iter().map(|m| m.test_acc).fold(0.0, f64::max),
        });
    }
    let verified = match matching {
        Matching::Parameters => {
            let (pa, pb) = (counts[0].0 as f64, counts[1].0 as f64);
            (pa - pb).abs() <= 0.05 * pa.max(pb)
        }
        Matching::FeatureMaps => counts[0].1 == counts[1].1,
    };
    Ok(Comparison { matching, verified, rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::parse_config;
    use crate::data::{Sample, SyntheticKind};
    use crate::selection::ChannelSelector;

    fn mlp(layers: Vec<LayerSpec>) -> NetworkConfig {
        NetworkConfig { layers, dropout_input: 0.0, dropout_hidden: 0.0 }
    }

    #[test]
    fn sgd_two_steps_on_square() {
        let mut w = Tensor::from_vec(vec![1.0]).unwrap();
        let mut state = SgdState::for_shapes(&[&w]);
        let mut expected = [0.8, 0.46].into_iter();
        for _ in 0..2 {
            let g = Gradients { tensors: vec![w.scale(2.0)] };
            sgd_step(vec![&mut w], &g, &mut state, 0.1, 0.9).unwrap();
            assert!((w.data()[0] - expected.next().unwrap()).abs() < 1e-15);
        }
    }

    #[test]
    fn sgd_null_and_plain_steps() {
        let mut w = Tensor::from_vec(vec![1.0, -2.0]).unwrap();
        let g = Gradients { tensors: vec![Tensor::from_vec(vec![0.5, 0.25]).unwrap()] };
        let mut state = SgdState::for_shapes(&[&w]);
        sgd_step(vec![&mut w], &g, &mut state, 0.0, 0.9).unwrap();
        assert_eq!(w.data(), &[1.0, -2.0]);
        let mut state = SgdState::for_shapes(&[&w]);
        sgd_step(vec![&mut w], &g, &mut state, 0.1, 0.0).unwrap();
        sgd_step(vec![&mut w], &g, &mut state, 0.1, 0.0).unwrap();
        assert!((w.data()[0] - 0.9).abs() < 1e-15);
        assert!((w.data()[1] + 2.05).abs() < 1e-15);
    }

    #[test]
    fn builds_mlp_with_param_report() {
        let cfg = mlp(vec![
            LayerSpec::Dense { units: 8 },
            LayerSpec::ChannelOut { k: 2, selector: ChannelSelector::ArgMax },
            LayerSpec::Softmax,
        ]);
        let built = build_network(&cfg, &[2], 2, &Rng::new(1)).unwrap();
        let params: Vec<usize> = built.report.iter().map(|r| r.params).collect();
        assert_eq!(params, vec![8 * 2 + 8, 0, 8 * 2 + 2]);
        assert_eq!(built.network.param_count(), 42);
    }

    #[test]
    fn indivisible_group_is_config_error() {
        let cfg = mlp(vec![
            LayerSpec::Dense { units: 8 },
            LayerSpec::ChannelOut { k: 5, selector: ChannelSelector::ArgMax },
            LayerSpec::Softmax,
        ]);
        let err = build_network(&cfg, &[2], 2, &Rng::new(1)).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(err.to_string().contains("layer 1"), "{err}");
    }

    #[test]
    fn param_counts_match_closed_form() {
        // conv: F·C·kh·kw + F ; dense: in·out + out
        let conv = mlp(vec![
            LayerSpec::Conv { filters: 6, kernel: (3, 3), stride: 1 },
            LayerSpec::ChannelOut { k: 2, selector: ChannelSelector::ArgMax },
            LayerSpec::MaxPool { window: 2, stride: 2 },
            LayerSpec::Dense { units: 10 },
            LayerSpec::Maxout { k: 5 },
            LayerSpec::Softmax,
        ]);
        let built = build_network(&conv, &[3, 8, 8], 4, &Rng::new(2)).unwrap();
        let expect = (6 * 3 * 9 + 6) + (6 * 3 * 3 * 10 + 10) + (2 * 4 + 4);
        assert_eq!(built.param_count(), expect);

        let deep = mlp(vec![
            LayerSpec::Dense { units: 12 },
            LayerSpec::Maxout { k: 3 },
            LayerSpec::Dense { units: 6 },
            LayerSpec::ChannelOut { k: 3, selector: ChannelSelector::TopL(2) },
            LayerSpec::Softmax,
        ]);
        let built = build_network(&deep, &[5], 3, &Rng::new(2)).unwrap();
        assert_eq!(built.param_count(), (5 * 12 + 12) + (4 * 6 + 6) + (6 * 3 + 3));

        let dropout = NetworkConfig { dropout_input: 0.2, dropout_hidden: 0.5, ..deep.clone() };
        let built = build_network(&dropout, &[5], 3, &Rng::new(2)).unwrap();
        assert_eq!(built.param_count(), (5 * 12 + 12) + (4 * 6 + 6) + (6 * 3 + 3));
        let drops: Vec<f64> = built
            .network
            .layers()
            .iter()
            .filter_map(|l| match l {
                Layer::Dropout { p } => Some(*p),
                _ => None,
            })
            .collect();
        assert_eq!(drops, vec![0.2, 0.5]);
    }

    #[test]
    fn cifar_style_config_builds_at_reduced_size() {
        // 64-192-192 conv channel-out layers, 1210-unit fully connected group, groups 2-2-2-5
        let text = "dataset = csv\ncsv_path = unused.csv\ngroup_sizes = 2-2-2-5\n\
                    dropout_input = 0.2\ndropout_hidden = 0.5\n\
                    [layer]\ntype = conv\nfilters = 64\nkernel = 3\n[layer]\ntype = channelout\n\
                    [layer]\ntype = maxpool\nwindow = 2\n\
                    [layer]\ntype = conv\nfilters = 192\nkernel = 3\n[layer]\ntype = channelout\n\
                    [layer]\ntype = conv\nfilters = 192\nkernel = 2\n[layer]\ntype = channelout\n\
                    [layer]\ntype = dense\nunits = 1210\n[layer]\ntype = channelout\n\
                    [layer]\ntype = softmax\n";
        let cfg = parse_config(text).unwrap();
        let built = build_network(&cfg.network, &[3, 12, 12], 10, &Rng::new(0)).unwrap();
        let groups: Vec<usize> = built
            .network
            .layers()
            .iter()
            .filter_map(|l| match l {
                Layer::ChannelOut { k, .. } => Some(*k),
                _ => None,
            })
            .collect();
        assert_eq!(groups, vec![2, 2, 2, 5]);
        assert_eq!(built.report.last().unwrap().output_shape, vec![10]);
    }

    #[test]
    fn zca_whitens_gaussian_data() {
        let mut rng = Rng::new(5);
        // correlated 10-d Gaussian: x = A z, A well conditioned so ε is negligible
        let a: Vec<f64> = (0..100)
            .map(|i| rng.uniform(-1.0, 1.0) + if i % 11 == 0 { 4.0 } else { 0.0 })
            .collect();
        let samples = (0..500)
            .map(|_| {
                let z: Vec<f64> = (0..10).map(|_| rng.standard_normal()).collect();
                let x = (0..10).map(|i| (0..10).map(|j| a[i * 10 + j] * z[j]).sum::<f64>() + 3.0).collect();
                Sample { features: Tensor::from_vec(x).unwrap(), label: 0 }
            })
            .collect();
        let data = Dataset::new(samples, 1).unwrap();
        let (white, _) = zca_whiten(&data).unwrap();
        // covariance oracle computed directly from the whitened samples
        let n = white.len() as f64;
        let mut mean = [0.0; 10];
        for s in white.samples() {
            for i in 0..10 {
                mean[i] += s.features.data()[i] / n;
            }
        }
        let mut worst: f64 = 0.0;
        for i in 0..10 {
            for j in 0..10 {
                let c: f64 = white
                    .samples()
                    .iter()
                    .map(|s| (s.features.data()[i] - mean[i]) * (s.features.data()[j] - mean[j]))
                    .sum::<f64>()
                    / n;
                worst = worst.max((c - if i == j { 1.0 } else { 0.0 }).abs());
            }
        }
        assert!(worst < 0.05, "max |cov - I| = {worst}");
    }

    #[test]
    fn zca_on_white_data_is_near_identity_and_constant_column_stays_small() {
        let mut rng = Rng::new(6);
        let samples = (0..4000)
            .map(|_| {
                let x = vec![rng.standard_normal(), rng.standard_normal(), 5.0];
                Sample { features: Tensor::from_vec(x).unwrap(), label: 0 }
            })
            .collect();
        let data = Dataset::new(samples, 1).unwrap();
        let (white, t) = zca_whiten(&data).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let want = if i == j { 1.0 / (1.0 + ZCA_EPSILON).sqrt() } else { 0.0 };
                assert!((t.matrix.get2(i, j) - want).abs() < 0.05);
            }
        }
        assert!(white.samples().iter().all(|s| s.features.data()[2].abs() < 1e-9));
    }

    #[test]
    fn flip_cases() {
        let img = Tensor::new(vec![1, 2, 2], vec![1., 2., 3., 4.]).unwrap();
        let mut rng = Rng::new(1);
        assert_eq!(augment_flip(&img, &mut rng, 0.0).unwrap(), img);
        let f = augment_flip(&img, &mut rng, 1.0).unwrap();
        assert_eq!(f.data(), &[2., 1., 4., 3.]);
        assert_eq!(augment_flip(&f, &mut rng, 1.0).unwrap(), img);
        assert!(matches!(
            augment_flip(&Tensor::from_vec(vec![1., 2.]).unwrap(), &mut rng, 1.0),
            Err(Error::Config(_))
        ));
    }

    fn blobs_split() -> (Dataset, Dataset) {
        let d = make_synthetic(SyntheticKind::Blobs, 2, 100, 0.5, 3).unwrap();
        d.split(0.25, &mut Rng::new(4)).unwrap()
    }

    #[test]
    fn separable_blobs_reach_full_accuracy() {
        let (train_set, test_set) = blobs_split();
        let cfg = mlp(vec![LayerSpec::Softmax]);
        let mut net = build_network(&cfg, &[2], 2, &Rng::new(1)).unwrap().network;
        let tc = TrainConfig { epochs: 50, batch_size: 16, ..TrainConfig::default() };
        let history = train(&mut net, &train_set, &test_set, &tc, &Rng::new(1)).unwrap();
        assert_eq!(evaluate(&net, &train_set).unwrap().1, 1.0);
        assert!(history[5].train_loss < history[0].train_loss);
    }

    #[test]
    fn zero_learning_rate_freezes_accuracy() {
        let (train_set, test_set) = blobs_split();
        let cfg = mlp(vec![LayerSpec::Dense { units: 4 }, LayerSpec::Maxout { k: 2 }, LayerSpec::Softmax]);
        let mut net = build_network(&cfg, &[2], 2, &Rng::new(1)).unwrap().network;
        let before = net.clone();
        let tc = TrainConfig { epochs: 3, learning_rate: 0.0, ..TrainConfig::default() };
        let h = train(&mut net, &train_set, &test_set, &tc, &Rng::new(1)).unwrap();
        assert_eq!(net, before);
        assert!(h.windows(2).all(|w| w[0].train_acc == w[1].train_acc && w[0].test_acc == w[1].test_acc));
    }

    #[test]
    fn empty_training_set_is_data_error() {
        let (_, test_set) = blobs_split();
        let empty = Dataset::new(Vec::new(), 2);
        assert!(empty.is_err());
        let mut net = build_network(&mlp(vec![LayerSpec::Softmax]), &[2], 2, &Rng::new(1)).unwrap().network;
        let one = test_set.subset(&[0]).unwrap();
        assert!(train(&mut net, &one, &test_set, &TrainConfig { epochs: 1, ..Default::default() }, &Rng::new(0)).is_ok());
    }

    #[test]
    fn untrained_net_is_at_chance_on_uninformative_labels() {
        let mut rng = Rng::new(8);
        let classes = 4;
        let samples = (0..2000)
            .map(|_| Sample {
                features: Tensor::from_vec(vec![rng.standard_normal(), rng.standard_normal()]).unwrap(),
                label: rng.below(classes),
            })
            .collect();
        let data = Dataset::new(samples, classes).unwrap();
        let cfg = mlp(vec![LayerSpec::Dense { units: 8 }, LayerSpec::ChannelOut { k: 2, selector: ChannelSelector::ArgMax }, LayerSpec::Softmax]);
        let net = build_network(&cfg, &[2], classes, &Rng::new(9)).unwrap().network;
        let acc = evaluate(&net, &data).unwrap().1;
        assert!((acc - 0.25).abs() < 0.05, "acc {acc}");
    }

    #[test]
    fn k1_channel_out_is_identity() {
        let with = mlp(vec![
            LayerSpec::Dense { units: 6 },
            LayerSpec::ChannelOut { k: 1, selector: ChannelSelector::ArgMax },
            LayerSpec::Dense { units: 4 },
            LayerSpec::ChannelOut { k: 1, selector: ChannelSelector::ArgMax },
            LayerSpec::Softmax,
        ]);
        let without = mlp(vec![LayerSpec::Dense { units: 6 }, LayerSpec::Dense { units: 4 }, LayerSpec::Softmax]);
        let a = build_network(&with, &[2], 3, &Rng::new(3)).unwrap().network;
        let b = build_network(&without, &[2], 3, &Rng::new(3)).unwrap().network;
        let (train_set, _) = blobs_split();
        let mut r = Rng::new(0);
        for s in train_set.samples().iter().take(20) {
            let ya = a.forward(&s.features, Mode::Infer, &mut r).unwrap().0;
            let yb = b.forward(&s.features, Mode::Infer, &mut r).unwrap().0;
            assert!(ya.bit_eq(&yb));
        }
    }

    #[test]
    fn training_is_deterministic() {
        let (train_set, test_set) = blobs_split();
        let cfg = NetworkConfig {
            layers: vec![LayerSpec::Dense { units: 8 }, LayerSpec::ChannelOut { k: 2, selector: ChannelSelector::ArgMax }, LayerSpec::Softmax],
            dropout_input: 0.0,
            dropout_hidden: 0.0,
        };
        let tc = TrainConfig { epochs: 3, ..TrainConfig::default() };
        let run = || {
            let mut net = build_network(&cfg, &[2], 2, &Rng::new(5)).unwrap().network;
            let h = train(&mut net, &train_set, &test_set, &tc, &Rng::new(5)).unwrap();
            (net, metrics_csv(&h))
        };
        assert_eq!(run(), run());
    }
}
