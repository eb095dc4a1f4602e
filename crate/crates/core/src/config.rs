//! Plain-text run configuration.
//!
//! ```text
//! # comments start with '#'
//! dataset = spirals
//! epochs = 300
//! group_sizes = 2-2
//!
//! [layer]
//! type = dense
//! units = 32
//! [layer]
//! type = channelout
//! ```
//!
//! Global keys come first; each `[layer]` section describes one layer in order.
//! Parsing reports every problem found, each with its line number.

use std::fmt;
use std::str::FromStr;

use crate::data::SyntheticKind;
use crate::error::Error;
use crate::selection::ChannelSelector;

#[derive(Clone, Debug, PartialEq)]
pub enum LayerSpec {
    Dense { units: usize },
    Conv { filters: usize, kernel: (usize, usize), stride: usize },
    MaxPool { window: usize, stride: usize },
    ChannelOut { k: usize, selector: ChannelSelector },
    Maxout { k: usize },
    Dropout { p: f64 },
    /// Fully connected classifier onto the class logits, followed by softmax cross-entropy.
    Softmax,
}

impl LayerSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Conv { .. } => "conv",
            LayerSpec::MaxPool { .. } => "maxpool",
            LayerSpec::ChannelOut { .. } => "channelout",
            LayerSpec::Maxout { .. } => "maxout",
            LayerSpec::Dropout { .. } => "dropout",
            LayerSpec::Softmax => "softmax",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkConfig {
    pub layers: Vec<LayerSpec>,
    /// Dropout applied to the network input.
    pub dropout_input: f64,
    /// Dropout applied to the input of every hidden weight layer after the first.
    pub dropout_hidden: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub flip: bool,
    pub zca: bool,
    /// Probe samples whose pathways are tracked across epochs.
    pub probes: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.01,
            momentum: 0.9,
            batch_size: 64,
            epochs: 100,
            seed: 42,
            flip: false,
            zca: false,
            probes: 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Synthetic { kind: SyntheticKind, classes: usize, samples_per_class: usize, noise: f64 },
    Csv { path: String, test_path: Option<String> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataSpec {
    pub source: DataSource,
    /// Held-out share when no separate test file is given.
    pub test_fraction: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub data: DataSpec,
}

/// One problem found while parsing.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfigIssue {
    pub line: usize,
    pub message: String,
}

/// Every problem found in a config file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfigErrors(pub Vec<ConfigIssue>);

impl fmt::Display for ConfigErrors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, issue) in self.0.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            if issue.line == 0 {
                write!(f, "{}", issue.message)?;
            } else {
                write!(f, "line {}: {}", issue.line, issue.message)?;
            }
        }
        Ok(())
    }
}

impl std::error::Error for ConfigErrors {}

impl From<ConfigErrors> for Error {
    fn from(e: ConfigErrors) -> Self {
        Error::Config(e.to_string())
    }
}

/// Parses `2-2-2-5` style group size lists.
pub fn parse_group_sizes(s: &str) -> Option<Vec<usize>> {
    s.split('-')
        .map(|p| p.trim().parse::<usize>().ok().filter(|&k| k > 0))
        .collect()
}

struct Entry {
    line: usize,
    key: String,
    value: String,
}

struct Section {
    line: usize,
    entries: Vec<Entry>,
}

struct Collector {
    issues: Vec<ConfigIssue>,
}

impl Collector {
    fn push(&mut self, line: usize, message: impl Into<String>) {
        self.issues.push(ConfigIssue { line, message: message.into() });
    }

    fn parse<T: FromStr>(&mut self, e: &Entry, what: &str) -> Option<T> {
        match e.value.parse::<T>() {
            Ok(v) => Some(v),
            Err(_) => {
                self.push(e.line, format!("{}: expected {what}, got {:?}", e.key, e.value));
                None
            }
        }
    }

    fn probability(&mut self, e: &Entry) -> Option<f64> {
        let p: f64 = self.parse(e, "a number")?;
        if !(0.0..1.0).contains(&p) {
            self.push(e.line, format!("{}: probability must be in [0, 1), got {p}", e.key));
            return None;
        }
        Some(p)
    }

    fn positive(&mut self, e: &Entry) -> Option<usize> {
        let v: usize = self.parse(e, "a positive integer")?;
        if v == 0 {
            self.push(e.line, format!("{}: must be positive", e.key));
            return None;
        }
        Some(v)
    }

    fn boolean(&mut self, e: &Entry) -> Option<bool> {
        match e.value.as_str() {
            "true" | "yes" | "1" => Some(true),
            "false" | "no" | "0" => Some(false),
            _ => {
                self.push(e.line, format!("{}: expected true or false, got {:?}", e.key, e.value));
                None
            }
        }
    }
}

fn split_sections(text: &str, c: &mut Collector) -> (Vec<Entry>, Vec<Section>) {
    let mut globals = Vec::new();
    let mut sections: Vec<Section> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        if content.starts_with('[') {
            if content == "[layer]" {
                sections.push(Section { line, entries: Vec::new() });
            } else {
                c.push(line, format!("unknown section {content}"));
            }
            continue;
        }
        let Some((key, value)) = content.split_once('=') else {
            c.push(line, format!("expected `key = value`, got {content:?}"));
            continue;
        };
        let entry = Entry { line, key: key.trim().to_string(), value: value.trim().to_string() };
        match sections.last_mut() {
            Some(s) => s.entries.push(entry),
            None => globals.push(entry),
        }
    }
    (globals, sections)
}

/// Parses and validates a config, collecting every error.
pub fn parse_config(text: &str) -> std::result::Result<Config, ConfigErrors> {
    let mut c = Collector { issues: Vec::new() };
    let (globals, sections) = split_sections(text, &mut c);

    let mut train = TrainConfig::default();
    let mut dropout_input = 0.0;
    let mut dropout_hidden = 0.0;
    let mut group_sizes: Option<(usize, Vec<usize>)> = None;
    let mut default_selector = ChannelSelector::ArgMax;
    let mut dataset: Option<(usize, String)> = None;
    let mut classes = 2;
    let mut samples_per_class = 500;
    let mut noise = 0.2;
    let mut csv_path = None;
    let mut csv_test_path = None;
    let mut test_fraction = 0.2;

    let mut seen: Vec<&str> = Vec::new();
    for e in &globals {
        if seen.contains(&e.key.as_str()) {
            c.push(e.line, format!("duplicate key {}", e.key));
            continue;
        }
        seen.push(&e.key);
        match e.key.as_str() {
            "dataset" => dataset = Some((e.line, e.value.clone())),
            "classes" => classes = c.parse(e, "an integer").unwrap_or(classes),
            "samples_per_class" => samples_per_class = c.positive(e).unwrap_or(samples_per_class),
            "noise" => noise = c.parse(e, "a number").unwrap_or(noise),
            "csv_path" => csv_path = Some(e.value.clone()),
            "csv_test_path" => csv_test_path = Some(e.value.clone()),
            "test_fraction" => test_fraction = c.probability(e).unwrap_or(test_fraction),
            "learning_rate" => train.learning_rate = c.parse(e, "a number").unwrap_or(train.learning_rate),
            "momentum" => train.momentum = c.probability(e).unwrap_or(train.momentum),
            "batch_size" => train.batch_size = c.positive(e).unwrap_or(train.batch_size),
            "epochs" => train.epochs = c.positive(e).unwrap_or(train.epochs),
            "seed" => train.seed = c.parse(e, "an integer").unwrap_or(train.seed),
            "flip" => train.flip = c.boolean(e).unwrap_or(train.flip),
            "zca" => train.zca = c.boolean(e).unwrap_or(train.zca),
            "probes" => train.probes = c.positive(e).unwrap_or(train.probes),
            "dropout_input" => dropout_input = c.probability(e).unwrap_or(0.0),
            "dropout_hidden" => dropout_hidden = c.probability(e).unwrap_or(0.0),
            "selector" => match e.value.parse() {
                Ok(s) => default_selector = s,
                Err(err) => c.push(e.line, format!("selector: {err}")),
            },
            "group_sizes" => match parse_group_sizes(&e.value) {
                Some(g) => group_sizes = Some((e.line, g)),
                None => c.push(e.line, format!("group_sizes: expected a list like 2-2-2-5, got {:?}", e.value)),
            },
            other => c.push(e.line, format!("unknown key {other}")),
        }
    }
    if train.learning_rate < 0.0 {
        c.push(0, "learning_rate must be non-negative");
    }

    let source = match dataset {
        None => {
            c.push(0, "missing required key dataset");
            None
        }
        Some((line, name)) if name == "csv" => match csv_path {
            Some(path) => Some(DataSource::Csv { path, test_path: csv_test_path }),
            None => {
                c.push(line, "dataset = csv needs csv_path");
                None
            }
        },
        Some((line, name)) => match name.parse::<SyntheticKind>() {
            Ok(kind) => {
                if classes < 2 {
                    c.push(line, format!("classes must be at least 2, got {classes}"));
                }
                if noise < 0.0 {
                    c.push(line, "noise must be non-negative");
                }
                Some(DataSource::Synthetic { kind, classes, samples_per_class, noise })
            }
            Err(_) => {
                c.push(line, format!("unknown dataset {name:?} (expected blobs, spirals or csv)"));
                None
            }
        },
    };

    // layers
    let mut layers = Vec::new();
    let mut group_layers: Vec<(usize, usize)> = Vec::new(); // (layer slot, section line)
    for s in &sections {
        if let Some((layer, needs_k)) = parse_layer(s, default_selector, &mut c) {
            if needs_k {
                group_layers.push((layers.len(), s.line));
            }
            layers.push(layer);
        }
    }
    if sections.is_empty() {
        c.push(0, "no [layer] sections");
    }
    let group_slots: Vec<usize> = layers
        .iter()
        .enumerate()
        .filter(|(_, l)| matches!(l, LayerSpec::ChannelOut { .. } | LayerSpec::Maxout { .. }))
        .map(|(i, _)| i)
        .collect();
    match &group_sizes {
        Some((line, sizes)) => {
            if sizes.len() != group_slots.len() {
                c.push(
                    *line,
                    format!(
                        "group_sizes lists {} sizes but there are {} channelout/maxout layers",
                        sizes.len(),
                        group_slots.len()
                    ),
                );
            } else {
                for (&slot, &k) in group_slots.iter().zip(sizes) {
                    let explicit = !group_layers.iter().any(|&(i, _)| i == slot);
                    match &mut layers[slot] {
                        LayerSpec::ChannelOut { k: lk, .. } | LayerSpec::Maxout { k: lk } => {
                            if explicit && *lk != k {
                                c.push(*line, format!("group_sizes gives {k} for layer {slot} which sets k = {lk}"));
                            }
                            *lk = k;
                        }
                        _ => unreachable!(),
                    }
                }
            }
        }
        None => {
            for &(_, line) in &group_layers {
                c.push(line, "missing required key k (or a global group_sizes)");
            }
        }
    }
    match layers.iter().position(|l| *l == LayerSpec::Softmax) {
        Some(i) if i + 1 == layers.len() => {}
        Some(_) => c.push(0, "softmax must be the last layer"),
        None if !sections.is_empty() => c.push(0, "the last layer must be softmax"),
        None => {}
    }

    if !c.issues.is_empty() {
        c.issues.sort_by_key(|i| i.line);
        return Err(ConfigErrors(c.issues));
    }
    Ok(Config {
        network: NetworkConfig { layers, dropout_input, dropout_hidden },
        train,
        data: DataSpec { source: source.unwrap(), test_fraction },
    })
}

fn parse_kernel(v: &str) -> Option<(usize, usize)> {
    let mut parts = v.split('x').map(|p| p.trim().parse::<usize>().ok().filter(|&d| d > 0));
    let kh = parts.next()??;
    let kw = match parts.next() {
        Some(p) => p?,
        None => kh,
    };
    if parts.next().is_some() {
        return None;
    }
    Some((kh, kw))
}

// Returns the layer and whether its group size still has to come from group_sizes.
fn parse_layer(s: &Section, default_selector: ChannelSelector, c: &mut Collector) -> Option<(LayerSpec, bool)> {
    let Some(ty) = s.entries.iter().find(|e| e.key == "type") else {
        c.push(s.line, "layer is missing required key type");
        return None;
    };
    let allowed: &[&str] = match ty.value.as_str() {
        "dense" => &["units"],
        "conv" => &["filters", "kernel", "stride"],
        "maxpool" => &["window", "stride"],
        "channelout" => &["k", "selector"],
        "maxout" => &["k"],
        "dropout" => &["p"],
        "softmax" => &[],
        other => {
            c.push(ty.line, format!("unknown layer type {other:?}"));
            return None;
        }
    };
    let mut ok = true;
    for e in &s.entries {
        if e.key != "type" && !allowed.contains(&e.key.as_str()) {
            c.push(e.line, format!("unknown key {} for {} layer", e.key, ty.value));
            ok = false;
        }
    }
    let get = |key: &str| s.entries.iter().find(|e| e.key == key);
    let required = |key: &str, c: &mut Collector| -> Option<usize> {
        match get(key) {
            Some(e) => c.positive(e),
            None => {
                c.push(s.line, format!("{} layer is missing required key {key}", ty.value));
                None
            }
        }
    };
    let optional = |key: &str, default: usize, c: &mut Collector| -> Option<usize> {
        get(key).map_or(Some(default), |e| c.positive(e))
    };
    let layer = match ty.value.as_str() {
        "dense" => LayerSpec::Dense { units: required("units", c)? },
        "conv" => {
            let filters = required("filters", c);
            let kernel = match get("kernel") {
                Some(e) => parse_kernel(&e.value).or_else(|| {
                    c.push(e.line, format!("kernel: expected N or HxW, got {:?}", e.value));
                    None
                }),
                None => {
                    c.push(s.line, "conv layer is missing required key kernel");
                    None
                }
            };
            let stride = optional("stride", 1, c);
            LayerSpec::Conv { filters: filters?, kernel: kernel?, stride: stride? }
        }
        "maxpool" => {
            let window = required("window", c);
            let stride = optional("stride", window.unwrap_or(1), c);
            LayerSpec::MaxPool { window: window?, stride: stride? }
        }
        "channelout" | "maxout" => {
            let k = match get("k") {
                Some(e) => Some(c.positive(e)?),
                None => None,
            };
            let layer = if ty.value == "channelout" {
                let selector = match get("selector") {
                    Some(e) => match e.value.parse() {
                        Ok(sel) => sel,
                        Err(err) => {
                            c.push(e.line, format!("selector: {err}"));
                            return None;
                        }
                    },
                    None => default_selector,
                };
                LayerSpec::ChannelOut { k: k.unwrap_or(0), selector }
            } else {
                LayerSpec::Maxout { k: k.unwrap_or(0) }
            };
            return ok.then_some((layer, k.is_none()));
        }
        "dropout" => match get("p") {
            Some(e) => LayerSpec::Dropout { p: c.probability(e)? },
            None => {
                c.push(s.line, "dropout layer is missing required key p");
                return None;
            }
        },
        _ => LayerSpec::Softmax,
    };
    ok.then_some((layer, false))
}

/// Canonical text form; `parse_config(&render(c))` reproduces `c`.
pub fn render(config: &Config) -> String {
    let mut out = String::new();
    let mut kv = |k: &str, v: String| out.push_str(&format!("{k} = {v}\n"));
    match &config.data.source {
        DataSource::Synthetic { kind, classes, samples_per_class, noise } => {
            let name = match kind {
                SyntheticKind::Blobs => "blobs",
                SyntheticKind::Spirals => "spirals",
            };
            kv("dataset", name.into());
            kv("classes", classes.to_string());
            kv("samples_per_class", samples_per_class.to_string());
            kv("noise", noise.to_string());
        }
        DataSource::Csv { path, test_path } => {
            kv("dataset", "csv".into());
            kv("csv_path", path.clone());
            if let Some(t) = test_path {
                kv("csv_test_path", t.clone());
            }
        }
    }
    kv("test_fraction", config.data.test_fraction.to_string());
    let t = &config.train;
    kv("learning_rate", t.learning_rate.to_string());
    kv("momentum", t.momentum.to_string());
    kv("batch_size", t.batch_size.to_string());
    kv("epochs", t.epochs.to_string());
    kv("seed", t.seed.to_string());
    kv("flip", t.flip.to_string());
    kv("zca", t.zca.to_string());
    kv("probes", t.probes.to_string());
    kv("dropout_input", config.network.dropout_input.to_string());
    kv("dropout_hidden", config.network.dropout_hidden.to_string());
    for layer in &config.network.layers {
        out.push_str("\n[layer]\n");
        out.push_str(&format!("type = {}\n", layer.kind()));
        match layer {
            LayerSpec::Dense { units } => out.push_str(&format!("units = {units}\n")),
            LayerSpec::Conv { filters, kernel, stride } => out.push_str(&format!(
                "filters = {filters}\nkernel = {}x{}\nstride = {stride}\n",
                kernel.0, kernel.1
            )),
            LayerSpec::MaxPool { window, stride } => {
                out.push_str(&format!("window = {window}\nstride = {stride}\n"))
            }
            LayerSpec::ChannelOut { k, selector } => {
                out.push_str(&format!("k = {k}\nselector = {selector}\n"))
            }
            LayerSpec::Maxout { k } => out.push_str(&format!("k = {k}\n")),
            LayerSpec::Dropout { p } => out.push_str(&format!("p = {p}\n")),
            LayerSpec::Softmax => {}
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    const MLP: &str = "\
dataset = spirals
[layer]
type = dense
units = 8
[layer]
type = channelout
k = 2
[layer]
type = softmax
";

    #[test]
    fn minimal_mlp_fills_defaults() {
        let cfg = parse_config(MLP).unwrap();
        assert_eq!(cfg.train, TrainConfig::default());
        assert_eq!(cfg.network.layers.len(), 3);
        assert_eq!(
            cfg.network.layers[1],
            LayerSpec::ChannelOut { k: 2, selector: ChannelSelector::ArgMax }
        );
        assert_eq!(
            cfg.data.source,
            DataSource::Synthetic {
                kind: SyntheticKind::Spirals,
                classes: 2,
                samples_per_class: 500,
                noise: 0.2
            }
        );
    }

    #[test]
    fn group_sizes_notation() {
        assert_eq!(parse_group_sizes("2-2-2-5"), Some(vec![2, 2, 2, 5]));
        assert_eq!(parse_group_sizes("2-x"), None);
        let text = "dataset = blobs\ngroup_sizes = 2-5\ndropout_input = 0.2\ndropout_hidden = 0.5\n\
                    [layer]\ntype = dense\nunits = 10\n[layer]\ntype = channelout\n\
                    [layer]\ntype = dense\nunits = 10\n[layer]\ntype = maxout\n[layer]\ntype = softmax\n";
        let cfg = parse_config(text).unwrap();
        assert_eq!(cfg.network.dropout_input, 0.2);
        assert_eq!(cfg.network.dropout_hidden, 0.5);
        assert_eq!(cfg.network.layers[1], LayerSpec::ChannelOut { k: 2, selector: ChannelSelector::ArgMax });
        assert_eq!(cfg.network.layers[3], LayerSpec::Maxout { k: 5 });
    }

    #[test]
    fn reports_all_errors_with_lines() {
        let text = "dataset = spirals\nepochs = ten\nbogus = 1\n[layer]\ntype = dense\n[layer]\ntype = softmax\n";
        let errs = parse_config(text).unwrap_err();
        let lines: Vec<usize> = errs.0.iter().map(|i| i.line).collect();
        assert_eq!(lines, vec![2, 3, 4], "{errs}");
        assert!(errs.to_string().contains("unknown key bogus"));
        assert!(errs.to_string().contains("units"));
    }

    #[test]
    fn missing_dataset_and_group_size() {
        let text = "[layer]\ntype = dense\nunits = 4\n[layer]\ntype = channelout\n[layer]\ntype = softmax\n";
        let errs = parse_config(text).unwrap_err();
        assert_eq!(errs.0.len(), 2, "{errs}");
    }

    #[test]
    fn group_sizes_count_mismatch() {
        let text = format!("group_sizes = 2-2\n{MLP}");
        assert!(parse_config(&text).is_err());
    }

    #[test]
    fn render_round_trips() {
        let text = "dataset = csv\ncsv_path = data/train.csv\nflip = true\nzca = true\nseed = 7\nlearning_rate = 0.05\n\
                    [layer]\ntype = conv\nfilters = 4\nkernel = 3x2\n[layer]\ntype = channelout\nk = 2\nselector = topl:1\n\
                    [layer]\ntype = maxpool\nwindow = 2\n[layer]\ntype = dropout\np = 0.5\n[layer]\ntype = softmax\n";
        let cfg = parse_config(text).unwrap();
        assert_eq!(parse_config(&render(&cfg)).unwrap(), cfg);
        let mlp = parse_config(MLP).unwrap();
        assert_eq!(parse_config(&render(&mlp)).unwrap(), mlp);
    }
}
