//! Pathway patterns: which channel each group opened for each sample, and
//! the statistics built on them.

use crate::config::TrainConfig;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::layers::{Mode, Network};
use crate::rng::Rng;
use crate::trainer::{train_with_observer, EpochMetrics};

/// One row per sample, one column per channel-out or maxout group in
/// network order. Entries are the selected index (or, for top-l selection,
/// the rank of the selected index set among all `C(k, l)` sets).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PathwayMatrix {
    pub rows: Vec<Vec<usize>>,
    pub labels: Vec<usize>,
    /// Group size of each column.
    pub group_sizes: Vec<usize>,
}

impl PathwayMatrix {
    pub fn columns(&self) -> usize {
        self.group_sizes.len()
    }

    /// `label,g0,g1,...`
    pub fn csv(&self) -> String {
        let mut out = String::from("label");
        for g in 0..self.columns() {
            out.push_str(&format!(",g{g}"));
        }
        out.push('\n');
        for (row, label) in self.rows.iter().zip(&self.labels) {
            out.push_str(&label.to_string());
            for v in row {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }

    pub fn as_f64(&self) -> Vec<Vec<f64>> {
        self.rows.iter().map(|r| r.iter().map(|&v| v as f64).collect()).collect()
    }
}

/// The pathway pattern of one sample, evaluated in inference mode.
pub fn pathway_row(net: &Network, x: &crate::tensor::Tensor) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut rng = Rng::new(0);
    let (_, trace) = net.forward(x, Mode::Infer, &mut rng)?;
    let mut codes = Vec::new();
    let mut sizes = Vec::new();
    for g in trace.group_traces() {
        for set in g.groups() {
            codes.push(set.code(g.k()));
            sizes.push(g.k());
        }
    }
    Ok((codes, sizes))
}

pub fn record_pathways(net: &Network, data: &Dataset) -> Result<PathwayMatrix> {
    if net.group_count() == 0 {
        return Err(Error::config("network has no channel-out or maxout groups"));
    }
    let mut rows = Vec::with_capacity(data.len());
    let mut group_sizes = Vec::new();
    for s in data.samples() {
        let (codes, sizes) = pathway_row(net, &s.features)?;
        group_sizes = sizes;
        rows.push(codes);
    }
    Ok(PathwayMatrix { rows, labels: data.labels(), group_sizes })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    /// Rows × dims coordinates.
    pub coords: Vec<Vec<f64>>,
    /// Unit eigenvectors, one per output dimension.
    pub components: Vec<Vec<f64>>,
    pub eigenvalues: Vec<f64>,
    /// Each eigenvalue over the total variance (0 when all rows coincide).
    pub variance_share: Vec<f64>,
}

impl Projection {
    /// `label,x,y,z` (further dimensions get `d3`, `d4`, ...).
    pub fn csv(&self, labels: &[usize]) -> String {
        const NAMES: [&str; 3] = ["x", "y", "z"];
        let dims = self.components.len();
        let mut out = String::from("label");
        for d in 0..dims {
            match NAMES.get(d) {
                Some(n) => out.push_str(&format!(",{n}")),
                None => out.push_str(&format!(",d{d}")),
            }
        }
        out.push('\n');
        for (row, label) in self.coords.iter().zip(labels) {
            out.push_str(&label.to_string());
            for v in row {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }
}

pub const POWER_TOL: f64 = 1e-10;
pub const POWER_MAX_ITERS: usize = 10_000;

/// Projects mean-centered rows onto the top `dims` covariance eigenvectors,
/// found by power iteration with deflation. Each eigenvector's
/// largest-magnitude component is made positive. Dimensions beyond the
/// column count come out as zero.
pub fn pca_project(rows: &[Vec<f64>], dims: usize) -> Result<Projection> {
    let n = rows.len();
    if n < dims + 1 {
        return Err(Error::data(format!("need at least {} samples for {dims} components, got {n}", dims + 1)));
    }
    let d = rows[0].len();
    if rows.iter().any(|r| r.len() != d) {
        return Err(Error::data("rows have different lengths"));
    }
    let mut mean = vec![0.0; d];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v / n as f64;
        }
    }
    let centered: Vec<Vec<f64>> =
        rows.iter().map(|r| r.iter().zip(&mean).map(|(v, m)| v - m).collect()).collect();
    let mut cov = vec![vec![0.0; d]; d];
    for r in &centered {
        for i in 0..d {
            for j in i..d {
                cov[i][j] += r[i] * r[j];
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            cov[i][j] /= n as f64;
            cov[j][i] = cov[i][j];
        }
    }
    let total: f64 = (0..d).map(|i| cov[i][i]).sum();

    let mut rng = Rng::new(0x9ca);
    let mut components: Vec<Vec<f64>> = Vec::with_capacity(dims);
    let mut eigenvalues = Vec::with_capacity(dims);
    for _ in 0..dims.min(d) {
        let mut v: Vec<f64> = (0..d).map(|_| rng.uniform(-1.0, 1.0)).collect();
        orthonormalize(&mut v, &components);
        let mut lambda = 0.0;
        for _ in 0..POWER_MAX_ITERS {
            let mut w = mat_vec(&cov, &v);
            orthonormalize_raw(&mut w, &components);
            let norm = dot(&w, &w).sqrt();
            if norm <= 1e-14 * total.max(f64::MIN_POSITIVE) {
                lambda = 0.0;
                break;
            }
            w.iter_mut().for_each(|x| *x /= norm);
            let delta = w.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            v = w;
            lambda = norm;
            if delta < POWER_TOL {
                break;
            }
        }
        let cv = mat_vec(&cov, &v);
        if lambda > 0.0 {
            lambda = dot(&v, &cv);
        }
        fix_sign(&mut v);
        // deflate
        for i in 0..d {
            for j in 0..d {
                cov[i][j] -= lambda * v[i] * v[j];
            }
        }
        components.push(v);
        eigenvalues.push(lambda);
    }
    while components.len() < dims {
        components.push(vec![0.0; d]);
        eigenvalues.push(0.0);
    }
    let coords = centered.iter().map(|r| components.iter().map(|c| dot(r, c)).collect()).collect();
    let variance_share = eigenvalues.iter().map(|l| if total > 0.0 { l / total } else { 0.0 }).collect();
    Ok(Projection { coords, components, eigenvalues, variance_share })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn mat_vec(m: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    m.iter().map(|row| dot(row, v)).collect()
}

fn orthonormalize_raw(v: &mut [f64], basis: &[Vec<f64>]) {
    for b in basis {
        let p = dot(v, b);
        v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
    }
}

fn orthonormalize(v: &mut [f64], basis: &[Vec<f64>]) {
    orthonormalize_raw(v, basis);
    let norm = dot(v, v).sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
}

fn fix_sign(v: &mut [f64]) {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    if v[best] < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

/// Mean normalized Hamming distance within and across classes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Separation {
    pub intra: f64,
    pub inter: f64,
    /// `inter / intra`, or `+∞` when `intra == 0`.
    pub ratio: f64,
}

/// Entries are compared categorically: any mismatch counts 1, and the count
/// is divided by the row length.
pub fn cluster_separation(rows: &[Vec<usize>], labels: &[usize]) -> Result<Separation> {
    if rows.len() != labels.len() {
        return Err(Error::data(format!("{} rows but {} labels", rows.len(), labels.len())));
    }
    let mut counts = std::collections::BTreeMap::new();
    for &l in labels {
        *counts.entry(l).or_insert(0usize) += 1;
    }
    if counts.len() < 2 {
        return Err(Error::data("cluster separation needs at least 2 classes"));
    }
    if let Some((class, n)) = counts.iter().find(|(_, &n)| n < 2) {
        return Err(Error::data(format!("class {class} has {n} sample, need at least 2")));
    }
    let width = rows[0].len().max(1) as f64;
    let (mut intra, mut inter) = ((0.0, 0u64), (0.0, 0u64));
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            let h = rows[i].iter().zip(&rows[j]).filter(|(a, b)| a != b).count() as f64 / width;
            let acc = if labels[i] == labels[j] { &mut intra } else { &mut inter };
            acc.0 += h;
            acc.1 += 1;
        }
    }
    let intra = intra.0 / intra.1 as f64;
    let inter = inter.0 / inter.1 as f64;
    let ratio = if intra == 0.0 { f64::INFINITY } else { inter / intra };
    Ok(Separation { intra, inter, ratio })
}

/// Per-epoch selection changes on a fixed probe set.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SwitchLog {
    /// `(epoch, probe, group, switched)` for every epoch after the first.
    pub events: Vec<(usize, usize, usize, bool)>,
    /// Total switches per probe and group.
    pub counts: Vec<Vec<usize>>,
}

impl SwitchLog {
    /// `epoch,probe,group,switched`
    pub fn csv(&self) -> String {
        let mut out = String::from("epoch,probe,group,switched\n");
        for &(e, p, g, s) in &self.events {
            out.push_str(&format!("{e},{p},{g},{}\n", u8::from(s)));
        }
        out
    }

    /// Number of switches that happened at each epoch, starting with epoch 2.
    pub fn per_epoch(&self) -> Vec<(usize, usize)> {
        let mut out: Vec<(usize, usize)> = Vec::new();
        for &(e, _, _, s) in &self.events {
            match out.last_mut() {
                Some((last, n)) if *last == e => *n += usize::from(s),
                _ => out.push((e, usize::from(s))),
            }
        }
        out
    }

    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }
}

/// Trains `net` while recording the probe pathways after every epoch.
pub fn track_switches(
    net: &mut Network,
    train_set: &Dataset,
    test_set: &Dataset,
    cfg: &TrainConfig,
    rng: &Rng,
    probes: &Dataset,
) -> Result<(Vec<EpochMetrics>, SwitchLog)> {
    let groups = net.group_count();
    let mut log = SwitchLog { events: Vec::new(), counts: vec![vec![0; groups]; probes.len()] };
    let mut previous: Option<Vec<Vec<usize>>> = None;
    let history = train_with_observer(net, train_set, test_set, cfg, rng, |epoch, net| {
        let current = if groups == 0 { vec![Vec::new(); probes.len()] } else { record_pathways(net, probes)?.rows };
        if let Some(prev) = &previous {
            for (p, (a, b)) in prev.iter().zip(&current).enumerate() {
                for (g, (x, y)) in a.iter().zip(b).enumerate() {
                    let switched = x != y;
                    log.counts[p][g] += usize::from(switched);
                    log.events.push((epoch, p, g, switched));
                }
            }
        }
        previous = Some(current);
        Ok(())
    })?;
    Ok((history, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{LayerSpec, NetworkConfig};
    use crate::data::{make_synthetic, SyntheticKind};
    use crate::selection::ChannelSelector;
    use crate::trainer::build_network;
    use nalgebra::{DMatrix, SymmetricEigen};
    use proptest::prelude::*;
    use crate::rng::Rng;

    fn net(layers: Vec<LayerSpec>) -> Network {
        let cfg = NetworkConfig { layers, dropout_input: 0.0, dropout_hidden: 0.0 };
        build_network(&cfg, &[2], 2, &Rng::new(4)).unwrap().network
    }

    fn three_groups() -> Network {
        net(vec![
            LayerSpec::Dense { units: 6 },
            LayerSpec::ChannelOut { k: 2, selector: ChannelSelector::ArgMax },
            LayerSpec::Softmax,
        ])
    }

    fn blobs() -> Dataset {
        make_synthetic(SyntheticKind::Blobs, 2, 30, 0.5, 1).unwrap()
    }

    #[test]
    fn record_shapes_and_determinism() {
        let n = three_groups();
        let d = blobs();
        let m = record_pathways(&n, &d).unwrap();
        assert_eq!(m.rows.len(), 60);
        assert!(m.rows.iter().all(|r| r.len() == 3 && r.iter().all(|&v| v < 2)));
        assert_eq!(m, record_pathways(&n, &d).unwrap());
        assert!(m.csv().starts_with("label,g0,g1,g2\n"));
    }

    #[test]
    fn topl_codes_stay_in_range() {
        let n = net(vec![
            LayerSpec::Dense { units: 8 },
            LayerSpec::ChannelOut { k: 4, selector: ChannelSelector::TopL(2) },
            LayerSpec::Softmax,
        ]);
        let m = record_pathways(&n, &blobs()).unwrap();
        assert!(m.rows.iter().flatten().all(|&v| v < 6));
    }

    #[test]
    fn record_without_groups_is_config_error() {
        let n = net(vec![LayerSpec::Dense { units: 4 }, LayerSpec::Softmax]);
        assert!(matches!(record_pathways(&n, &blobs()), Err(Error::Config(_))));
    }

    #[test]
    fn pca_matches_dense_eigensolver() {
        let mut rng = Rng::new(11);
        let rows: Vec<Vec<f64>> = (0..200)
            .map(|_| (0..10).map(|j| rng.standard_normal() * (10 - j) as f64).collect())
            .collect();
        let p = pca_project(&rows, 3).unwrap();
        // oracle: full symmetric eigendecomposition of the same covariance
        let n = rows.len() as f64;
        let mean: Vec<f64> = (0..10).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n).collect();
        let x = DMatrix::from_fn(200, 10, |i, j| rows[i][j] - mean[j]);
        let cov = x.transpose() * &x / n;
        let mut ev: Vec<f64> = SymmetricEigen::new(cov).eigenvalues.iter().copied().collect();
        ev.sort_by(|a, b| b.partial_cmp(a).unwrap());
        for i in 0..3 {
            assert!((p.eigenvalues[i] - ev[i]).abs() < 1e-8 * ev[0], "{i}: {} vs {}", p.eigenvalues[i], ev[i]);
        }
        let projected: f64 = (0..3)
            .map(|d| p.coords.iter().map(|c| c[d] * c[d]).sum::<f64>() / n)
            .sum();
        let top3: f64 = ev[..3].iter().sum();
        assert!((projected - top3).abs() < 1e-8 * top3);
    }

    #[test]
    fn pca_rank_one() {
        let rows: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64, 2.0 * i as f64, -(i as f64), 0.5]).collect();
        let p = pca_project(&rows, 3).unwrap();
        assert!((p.variance_share[0] - 1.0).abs() < 1e-12);
        assert!(p.variance_share[1] < 1e-8 && p.variance_share[2] < 1e-8);
        assert!(p.components[0][1] > 0.0);
    }

    #[test]
    fn pca_of_3d_data_preserves_distances() {
        let mut rng = Rng::new(2);
        let rows: Vec<Vec<f64>> = (0..30).map(|_| (0..3).map(|_| rng.standard_normal()).collect()).collect();
        let p = pca_project(&rows, 3).unwrap();
        for i in 0..30 {
            for j in 0..30 {
                let dist = |v: &[Vec<f64>]| v[i].iter().zip(&v[j]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                assert!((dist(&rows) - dist(&p.coords)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn pca_needs_enough_rows() {
        let rows = vec![vec![1.0, 2.0]; 3];
        assert!(matches!(pca_project(&rows, 3), Err(Error::Data(_))));
    }

    #[test]
    fn separation_constructed_case() {
        let a = vec![0; 10];
        let mut b = vec![0; 10];
        b[1] = 1;
        b[4] = 1;
        b[7] = 1;
        let rows = vec![a.clone(), a, b.clone(), b];
        let s = cluster_separation(&rows, &[0, 0, 1, 1]).unwrap();
        assert_eq!(s.intra, 0.0);
        assert!((s.inter - 0.3).abs() < 1e-15);
        assert!(s.ratio.is_infinite());
    }

    #[test]
    fn separation_errors() {
        let rows = vec![vec![0, 1]; 3];
        assert!(matches!(cluster_separation(&rows, &[0, 0, 0]), Err(Error::Data(_))));
        let err = cluster_separation(&rows, &[0, 0, 5]).unwrap_err();
        assert!(err.to_string().contains("class 5"), "{err}");
    }

    #[test]
    fn separation_of_permuted_labels_is_near_one() {
        let mut rng = Rng::new(3);
        // rows with real class structure
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for i in 0..200 {
            let c = i % 2;
            rows.push((0..20).map(|j| usize::from(rng.bernoulli(if (j + c) % 2 == 0 { 0.8 } else { 0.2 }))).collect());
            labels.push(c);
        }
        assert!(cluster_separation(&rows, &labels).unwrap().ratio > 1.2);
        rng.shuffle(&mut labels);
        let r = cluster_separation(&rows, &labels).unwrap().ratio;
        assert!((r - 1.0).abs() < 0.1, "{r}");
    }

    #[test]
    fn switches_frozen_and_single_epoch() {
        let d = blobs();
        let (train_set, test_set) = d.split(0.25, &mut Rng::new(1)).unwrap();
        let probes = test_set.subset(&[0, 1, 2, 3]).unwrap();
        let mut n = three_groups();
        let cfg = TrainConfig { epochs: 4, learning_rate: 0.0, ..TrainConfig::default() };
        let (_, log) = track_switches(&mut n, &train_set, &test_set, &cfg, &Rng::new(1), &probes).unwrap();
        assert_eq!(log.total(), 0);
        assert_eq!(log.events.len(), 3 * 4 * 3);

        let cfg = TrainConfig { epochs: 1, ..TrainConfig::default() };
        let (_, log) = track_switches(&mut n, &train_set, &test_set, &cfg, &Rng::new(1), &probes).unwrap();
        assert!(log.events.is_empty() && log.total() == 0);
        assert_eq!(log.csv(), "epoch,probe,group,switched\n");
    }

    #[test]
    fn switch_counts_bounded_by_epochs() {
        let d = make_synthetic(SyntheticKind::Spirals, 2, 60, 0.1, 1).unwrap();
        let (train_set, test_set) = d.split(0.25, &mut Rng::new(1)).unwrap();
        let probes = test_set.subset(&(0..10).collect::<Vec<_>>()).unwrap();
        let mut n = net(vec![
            LayerSpec::Dense { units: 16 },
            LayerSpec::ChannelOut { k: 2, selector: ChannelSelector::ArgMax },
            LayerSpec::Softmax,
        ]);
        let cfg = TrainConfig { epochs: 6, learning_rate: 0.05, batch_size: 8, ..TrainConfig::default() };
        let (_, log) = track_switches(&mut n, &train_set, &test_set, &cfg, &Rng::new(1), &probes).unwrap();
        assert!(log.counts.iter().flatten().all(|&c| c <= 5));
        assert!(log.total() > 0);
        assert_eq!(log.per_epoch().len(), 5);
    }

    proptest! {
        #[test]
        fn pca_ignores_constant_shift(seed in 0u64..500, shift in -50.0f64..50.0) {
            let mut rng = Rng::new(seed);
            let rows: Vec<Vec<f64>> = (0..12)
                .map(|_| (0..4).map(|j| rng.standard_normal() * (4 - j) as f64).collect())
                .collect();
            let shifted: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|v| v + shift).collect()).collect();
            let a = pca_project(&rows, 3).unwrap();
            let b = pca_project(&shifted, 3).unwrap();
            for (ra, rb) in a.coords.iter().zip(&b.coords) {
                for (x, y) in ra.iter().zip(rb) {
                    prop_assert!((x - y).abs() < 1e-6, "{} vs {}", x, y);
                }
            }
        }

        #[test]
        fn separation_symmetries(seed in 0u64..500) {
            let mut rng = Rng::new(seed);
            let rows: Vec<Vec<usize>> = (0..16).map(|_| (0..6).map(|_| rng.below(3)).collect()).collect();
            let labels: Vec<usize> = (0..16).map(|i| i % 3).collect();
            let base = cluster_separation(&rows, &labels).unwrap();
            let relabeled: Vec<usize> = labels.iter().map(|l| (l + 1) % 3 + 10).collect();
            prop_assert_eq!(base, cluster_separation(&rows, &relabeled).unwrap());
            let mut perm: Vec<usize> = (0..6).collect();
            rng.shuffle(&mut perm);
            let permuted: Vec<Vec<usize>> = rows.iter().map(|r| perm.iter().map(|&j| r[j]).collect()).collect();
            prop_assert_eq!(base, cluster_separation(&permuted, &labels).unwrap());
        }
    }
}
