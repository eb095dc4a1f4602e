//! Labelled datasets: synthetic generators and a CSV loader.

use std::f64::consts::TAU;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub features: Tensor,
    pub label: usize,
}

/// Samples with a uniform feature shape and labels in `0..classes`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    samples: Vec<Sample>,
    classes: usize,
    feature_shape: Vec<usize>,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>, classes: usize) -> Result<Self> {
        let first = samples.first().ok_or_else(|| Error::data("dataset is empty"))?;
        let feature_shape = first.features.shape().to_vec();
        for (i, s) in samples.iter().enumerate() {
            if s.features.shape() != feature_shape.as_slice() {
                return Err(Error::data(format!(
                    "sample {i} has shape {:?}, expected {feature_shape:?}",
                    s.features.shape()
                )));
            }
            if s.label >= classes {
                return Err(Error::data(format!(
                    "sample {i} has label {} outside 0..{classes}",
                    s.label
                )));
            }
        }
        Ok(Dataset { samples, classes, feature_shape })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn feature_shape(&self) -> &[usize] {
        &self.feature_shape
    }

    pub fn feature_len(&self) -> usize {
        self.feature_shape.iter().product()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        Dataset::new(indices.iter().map(|&i| self.samples[i].clone()).collect(), self.classes)
    }

    /// Shuffled split into `(train, test)`; `test_fraction` of the samples go to test.
    pub fn split(&self, test_fraction: f64, rng: &mut Rng) -> Result<(Dataset, Dataset)> {
        if !(0.0..1.0).contains(&test_fraction) || test_fraction == 0.0 {
            return Err(Error::config(format!("test fraction must be in (0, 1), got {test_fraction}")));
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        rng.shuffle(&mut idx);
        let n_test = ((self.len() as f64) * test_fraction).round() as usize;
        if n_test == 0 || n_test == self.len() {
            return Err(Error::data("split leaves an empty side"));
        }
        let (test, train) = idx.split_at(n_test);
        Ok((self.subset(train)?, self.subset(test)?))
    }

    /// Applies `f` to every feature tensor.
    pub fn map_features(&self, f: impl Fn(&Tensor) -> Result<Tensor>) -> Result<Dataset> {
        let samples = self
            .samples
            .iter()
            .map(|s| Ok(Sample { features: f(&s.features)?, label: s.label }))
            .collect::<Result<Vec<_>>>()?;
        Dataset::new(samples, self.classes)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SyntheticKind {
    /// Isotropic Gaussians around centers spaced on a circle of radius 3.
    Blobs,
    /// Interleaved spiral arms, one per class, with angular noise.
    Spirals,
}

impl FromStr for SyntheticKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "blobs" => Ok(SyntheticKind::Blobs),
            "spirals" => Ok(SyntheticKind::Spirals),
            other => Err(Error::config(format!("unknown synthetic dataset {other:?}"))),
        }
    }
}

/// Number of turns each spiral arm makes.
pub const SPIRAL_TURNS: f64 = 2.5;

/// Deterministic 2-D classification data.
pub fn make_synthetic(
    kind: SyntheticKind,
    classes: usize,
    samples_per_class: usize,
    noise: f64,
    seed: u64,
) -> Result<Dataset> {
    if classes < 2 {
        return Err(Error::config(format!("need at least 2 classes, got {classes}")));
    }
    if samples_per_class == 0 {
        return Err(Error::config("samples_per_class must be positive"));
    }
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(Error::config(format!("noise must be non-negative, got {noise}")));
    }
    let mut rng = Rng::new(seed);
    let mut samples = Vec::with_capacity(classes * samples_per_class);
    for c in 0..classes {
        let phase = TAU * c as f64 / classes as f64;
        for _ in 0..samples_per_class {
            let (x, y) = match kind {
                SyntheticKind::Blobs => (
                    3.0 * phase.cos() + noise * rng.standard_normal(),
                    3.0 * phase.sin() + noise * rng.standard_normal(),
                ),
                SyntheticKind::Spirals => {
                    let t = rng.unit();
                    let r = 0.1 + 0.9 * t;
                    let theta = phase + TAU * SPIRAL_TURNS * t + noise * rng.standard_normal();
                    (r * theta.cos(), r * theta.sin())
                }
            };
            samples.push(Sample { features: Tensor::from_parts(vec![2], vec![x, y]), label: c });
        }
    }
    Dataset::new(samples, classes)
}

/// A CSV-loaded dataset along with the original label of each dense class index.
#[derive(Clone, Debug, PartialEq)]
pub struct CsvDataset {
    pub dataset: Dataset,
    pub label_map: Vec<i64>,
}

pub fn load_csv_dataset(path: impl AsRef<Path>) -> Result<CsvDataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)
        .map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
    parse_csv_dataset(&text)
}

/// Rows are `label,f1,f2,...`. An optional first line `label,c,h,w` declares
/// image dimensions.
pub fn parse_csv_dataset(text: &str) -> Result<CsvDataset> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty())
        .peekable();
    let mut image: Option<Vec<usize>> = None;
    if let Some(&(row, first)) = lines.peek() {
        if first.starts_with("label") {
            let dims = first
                .split(',')
                .skip(1)
                .map(|f| f.trim().parse::<usize>().ok().filter(|&d| d > 0))
                .collect::<Option<Vec<_>>>()
                .filter(|d| d.len() == 3)
                .ok_or_else(|| Error::data(format!("row {row}: header must be label,c,h,w")))?;
            image = Some(dims);
            lines.next();
        }
    }
    let mut raw: Vec<(i64, Vec<f64>)> = Vec::new();
    let mut width = None;
    for (row, line) in lines {
        let mut fields = line.split(',').map(str::trim);
        let label_field = fields.next().unwrap_or_default();
        let label = label_field
            .parse::<i64>()
            .map_err(|_| Error::data(format!("row {row}: label {label_field:?} is not an integer")))?;
        let feats = fields
            .map(|f| {
                f.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| Error::data(format!("row {row}: field {f:?} is not a number")))
            })
            .collect::<Result<Vec<_>>>()?;
        if feats.is_empty() {
            return Err(Error::data(format!("row {row}: no features")));
        }
        match width {
            None => width = Some(feats.len()),
            Some(w) if w != feats.len() => {
                return Err(Error::data(format!(
                    "row {row}: ragged row with {} features, expected {w}",
                    feats.len()
                )))
            }
            _ => {}
        }
        raw.push((label, feats));
    }
    let width = width.ok_or_else(|| Error::data("empty file"))?;
    let shape = match image {
        Some(dims) => {
            if dims.iter().product::<usize>() != width {
                return Err(Error::data(format!(
                    "header declares {dims:?} but rows have {width} features"
                )));
            }
            dims
        }
        None => vec![width],
    };
    let mut label_map: Vec<i64> = raw.iter().map(|(l, _)| *l).collect();
    label_map.sort_unstable();
    label_map.dedup();
    let samples = raw
        .into_iter()
        .map(|(l, f)| Sample {
            features: Tensor::from_parts(shape.clone(), f),
            label: label_map.binary_search(&l).unwrap(),
        })
        .collect();
    let classes = label_map.len();
    Ok(CsvDataset { dataset: Dataset::new(samples, classes)?, label_map })
}
