//! Command-line front end: config loading, subcommand dispatch, and CSV output.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use channelout_core::approximator::{
    build_prototype, l2_error, network_agreement, region_consistency, reports_csv, ApproxParams, ApproxReport,
    Domain, Target,
};
use channelout_core::config::{parse_config, Config, DataSource, NetworkConfig};
use channelout_core::data::Dataset;
use channelout_core::layers::{grad_check, GradCheckOptions};
use channelout_core::pathway::{
    cluster_separation, pca_project, record_pathways, track_switches, PathwayMatrix, Projection, Separation, SwitchLog,
};
use channelout_core::sparse_exec::{bench_sparse_vs_dense, BenchReport};
use channelout_core::trainer::{
    build_network, compare_networks, metrics_csv, prepare_data, train, BuiltNetwork, Comparison, EpochMetrics, Matching,
};
use channelout_core::{ChannelSelector, Rng};
use clap::{Args, Parser, Subcommand, ValueEnum};

pub const DEFAULT_SEED: u64 = 42;

#[derive(Debug, Parser)]
#[command(name = "channelout", version, about = "Train and analyze channel-out networks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the configured network and write per-epoch metrics.
    Train(RunArgs),
    /// Compare backprop gradients against finite differences.
    Gradcheck(GradcheckArgs),
    /// Train while tracking pathway switches, then analyze the pathway patterns.
    Pathways(RunArgs),
    /// Build lattice approximators of a target at several pitches.
    Approx(ApproxArgs),
    /// Time a dense layer fed by channel-out activations, dense vs sparse.
    Bench(BenchArgs),
    /// Train two configs on the same data and tabulate the results.
    Compare(CompareArgs),
}

#[derive(Clone, Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the config's seed (42 when neither is given).
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = "out")]
    pub out_dir: PathBuf,
}

#[derive(Clone, Debug, Args)]
pub struct GradcheckArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Training samples to check at.
    #[arg(long, default_value_t = 3)]
    pub samples: usize,
    #[arg(long, default_value_t = 20)]
    pub per_tensor: usize,
    #[arg(long, default_value_t = 1e-5)]
    pub tolerance: f64,
}

#[derive(Clone, Debug, Args)]
pub struct ApproxArgs {
    #[arg(long, default_value = "quadratic")]
    pub target: String,
    #[arg(long, default_value_t = 1)]
    pub n: usize,
    #[arg(long, value_delimiter = ',', default_value = "0.5,0.25,0.125")]
    pub deltas: Vec<f64>,
    #[arg(long, default_value_t = 1.0)]
    pub radius: f64,
    /// Probe points per cell and axis.
    #[arg(long, default_value_t = 64)]
    pub grid: usize,
    /// Use [-R, R]^n instead of [0, R]^n.
    #[arg(long)]
    pub symmetric: bool,
    #[arg(long, default_value = "out")]
    pub out_dir: PathBuf,
}

#[derive(Clone, Debug, Args)]
pub struct BenchArgs {
    #[arg(long, default_value_t = 256)]
    pub m: usize,
    #[arg(long, default_value_t = 512)]
    pub d: usize,
    #[arg(long, value_delimiter = ',', default_value = "2,4,8")]
    pub k: Vec<usize>,
    #[arg(long, default_value = "argmax")]
    pub selector: String,
    #[arg(long, default_value_t = 50)]
    pub trials: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = "out")]
    pub out_dir: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum MatchingArg {
    /// Parameter counts within 5%.
    Params,
    /// Equal hidden feature-map counts.
    Maps,
}

#[derive(Clone, Debug, Args)]
pub struct CompareArgs {
    /// First network; its data and training settings are used for both runs.
    #[arg(long)]
    pub config: PathBuf,
    /// Second network.
    #[arg(long)]
    pub against: PathBuf,
    #[arg(long, value_enum)]
    pub matching: MatchingArg,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = "out")]
    pub out_dir: PathBuf,
}

/// Reads a config file. Relative CSV paths are taken relative to the file.
pub fn load_config(path: &Path) -> Result<Config> {
    let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let mut cfg = parse_config(&text).map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))?;
    let base = path.parent().unwrap_or(Path::new(""));
    if let DataSource::Csv { path: p, test_path } = &mut cfg.data.source {
        let resolve = |s: &mut String| {
            if Path::new(s.as_str()).is_relative() {
                *s = base.join(s.as_str()).to_string_lossy().into_owned();
            }
        };
        resolve(p);
        if let Some(t) = test_path {
            resolve(t);
        }
    }
    Ok(cfg)
}

fn write_artifact(dir: &Path, name: &str, contents: &str) -> Result<PathBuf> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(name);
    fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

struct Prepared {
    cfg: Config,
    rng: Rng,
    train: Dataset,
    test: Dataset,
}

fn prepare(args: &RunArgs) -> Result<Prepared> {
    let mut cfg = load_config(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    let rng = Rng::new(cfg.train.seed);
    let (train, test) = prepare_data(&cfg.data, &cfg.train, &rng).context("preparing data")?;
    Ok(Prepared { cfg, rng, train, test })
}

fn build(p: &Prepared, net: &NetworkConfig) -> Result<BuiltNetwork> {
    Ok(build_network(net, p.train.feature_shape(), p.train.classes(), &p.rng)?)
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub history: Vec<EpochMetrics>,
    pub param_count: usize,
    /// Test-set pathways, when the network has groups.
    pub pathways: Option<PathwayMatrix>,
    pub files: Vec<PathBuf>,
}

/// Writes `metrics.csv`, `params.csv`, and (for networks with groups) `pathways.csv`.
pub fn train_cmd(args: &RunArgs) -> Result<TrainOutcome> {
    let p = prepare(args)?;
    let built = build(&p, &p.cfg.network)?;
    let param_count = built.param_count();
    let mut files = vec![write_artifact(&args.out_dir, "params.csv", &built.report_csv())?];
    let mut net = built.network;
    let history = train(&mut net, &p.train, &p.test, &p.cfg.train, &p.rng)?;
    files.push(write_artifact(&args.out_dir, "metrics.csv", &metrics_csv(&history))?);
    let pathways = if net.group_count() > 0 {
        let m = record_pathways(&net, &p.test)?;
        files.push(write_artifact(&args.out_dir, "pathways.csv", &m.csv())?);
        Some(m)
    } else {
        None
    };
    Ok(TrainOutcome { history, param_count, pathways, files })
}

#[derive(Debug)]
pub struct GradcheckOutcome {
    /// `(layer, kind, max_rel_err, checked, skipped)` aggregated over samples.
    pub rows: Vec<(usize, &'static str, f64, usize, usize)>,
    pub max_rel_err: f64,
    pub files: Vec<PathBuf>,
}

/// Writes `gradcheck.csv`; fails when any checked entry exceeds the tolerance.
pub fn gradcheck_cmd(args: &GradcheckArgs) -> Result<GradcheckOutcome> {
    let p = prepare(&args.run)?;
    let net = build(&p, &p.cfg.network)?.network;
    let opts = GradCheckOptions { per_tensor: args.per_tensor, ..GradCheckOptions::default() };
    let mut rng = p.rng.substream("gradcheck");
    let mut rows: Vec<(usize, &'static str, f64, usize, usize)> = Vec::new();
    for s in p.train.samples().iter().take(args.samples.max(1)) {
        let report = grad_check(&net, &s.features, s.label, opts, &mut rng)?;
        for l in report.per_layer {
            match rows.iter_mut().find(|r| r.0 == l.layer) {
                Some(r) => {
                    r.2 = r.2.max(l.max_rel_err);
                    r.3 += l.checked;
                    r.4 += l.skipped;
                }
                None => rows.push((l.layer, l.kind, l.max_rel_err, l.checked, l.skipped)),
            }
        }
    }
    let mut csv = String::from("layer,kind,max_rel_err,checked,skipped\n");
    for r in &rows {
        writeln!(csv, "{},{},{:e},{},{}", r.0, r.1, r.2, r.3, r.4).unwrap();
    }
    let files = vec![write_artifact(&args.run.out_dir, "gradcheck.csv", &csv)?];
    let max_rel_err = rows.iter().map(|r| r.2).fold(0.0, f64::max);
    if !(max_rel_err < args.tolerance) {
        bail!("gradient check failed: max relative error {max_rel_err:e} >= {:e}", args.tolerance);
    }
    Ok(GradcheckOutcome { rows, max_rel_err, files })
}

#[derive(Debug)]
pub struct PathwaysOutcome {
    pub history: Vec<EpochMetrics>,
    pub matrix: PathwayMatrix,
    pub projection: Projection,
    pub separation: Separation,
    pub switches: SwitchLog,
    pub files: Vec<PathBuf>,
}

/// Writes `metrics.csv`, `switches.csv`, `pathways.csv`, `pca.csv` and `pathway_summary.csv`.
pub fn pathways_cmd(args: &RunArgs) -> Result<PathwaysOutcome> {
    let p = prepare(args)?;
    let mut net = build(&p, &p.cfg.network)?.network;
    if net.group_count() == 0 {
        bail!("pathway analysis needs at least one channel-out or maxout layer");
    }
    let probe_idx: Vec<usize> = (0..p.cfg.train.probes.min(p.test.len())).collect();
    let probes = p.test.subset(&probe_idx)?;
    let (history, switches) = track_switches(&mut net, &p.train, &p.test, &p.cfg.train, &p.rng, &probes)?;
    let matrix = record_pathways(&net, &p.test)?;
    let projection = pca_project(&matrix.as_f64(), 3)?;
    let separation = cluster_separation(&matrix.rows, &matrix.labels)?;

    let mut summary = String::from("metric,value\n");
    writeln!(summary, "intra,{}", separation.intra).unwrap();
    writeln!(summary, "inter,{}", separation.inter).unwrap();
    writeln!(summary, "ratio,{}", separation.ratio).unwrap();
    for (i, s) in projection.variance_share.iter().enumerate() {
        writeln!(summary, "variance_share_{},{s}", i + 1).unwrap();
    }
    writeln!(summary, "switches_total,{}", switches.total()).unwrap();

    let files = vec![
        write_artifact(&args.out_dir, "metrics.csv", &metrics_csv(&history))?,
        write_artifact(&args.out_dir, "switches.csv", &switches.csv())?,
        write_artifact(&args.out_dir, "pathways.csv", &matrix.csv())?,
        write_artifact(&args.out_dir, "pca.csv", &projection.csv(&matrix.labels))?,
        write_artifact(&args.out_dir, "pathway_summary.csv", &summary)?,
    ];
    Ok(PathwaysOutcome { history, matrix, projection, separation, switches, files })
}

#[derive(Debug)]
pub struct ApproxOutcome {
    pub reports: Vec<ApproxReport>,
    /// Positive-orthant consistency per δ.
    pub consistent: Vec<bool>,
    /// Largest difference between the approximator and its network form, per δ.
    pub network_gap: Vec<f64>,
    pub files: Vec<PathBuf>,
}

/// Writes `approx.csv`.
pub fn approx_cmd(args: &ApproxArgs) -> Result<ApproxOutcome> {
    let target: Target = args.target.parse()?;
    if args.deltas.is_empty() {
        bail!("need at least one delta");
    }
    let f = target.as_fn();
    let mut reports = Vec::new();
    let mut consistent = Vec::new();
    let mut network_gap = Vec::new();
    let mut rng = Rng::new(DEFAULT_SEED);
    for &delta in &args.deltas {
        let mut params = ApproxParams::new(args.n, delta, args.radius);
        if args.symmetric {
            params.domain = Domain::Symmetric;
        }
        let a = build_prototype(&f, &params).with_context(|| format!("delta {delta}"))?;
        reports.push(l2_error(&a, &f, args.grid)?);
        consistent.push(region_consistency(&a).consistent);
        network_gap.push(network_agreement(&a, 200, &mut rng)?);
    }
    let files = vec![write_artifact(&args.out_dir, "approx.csv", &reports_csv(&reports))?];
    Ok(ApproxOutcome { reports, consistent, network_gap, files })
}

#[derive(Debug)]
pub struct BenchOutcome {
    pub reports: Vec<BenchReport>,
    pub files: Vec<PathBuf>,
}

/// Writes `bench.csv`, one row per group size.
pub fn bench_cmd(args: &BenchArgs) -> Result<BenchOutcome> {
    let selector: ChannelSelector = args.selector.parse()?;
    let mut rng = Rng::new(args.seed.unwrap_or(DEFAULT_SEED));
    let mut reports = Vec::new();
    for &k in &args.k {
        selector.validate(k)?;
        reports.push(bench_sparse_vs_dense(args.m, args.d, k, selector, args.trials, &mut rng)?);
    }
    let mut csv = format!("{}\n", BenchReport::CSV_HEADER);
    for r in &reports {
        csv.push_str(&r.csv_row());
        csv.push('\n');
    }
    let files = vec![write_artifact(&args.out_dir, "bench.csv", &csv)?];
    Ok(BenchOutcome { reports, files })
}

#[derive(Debug)]
pub struct CompareOutcome {
    pub comparison: Comparison,
    pub files: Vec<PathBuf>,
}

/// Writes `comparison.csv`; fails when the claimed matching does not hold.
pub fn compare_cmd(args: &CompareArgs) -> Result<CompareOutcome> {
    let run = RunArgs { config: args.config.clone(), seed: args.seed, out_dir: args.out_dir.clone() };
    let p = prepare(&run)?;
    let other = load_config(&args.against)?;
    let name = |path: &Path| path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let matching = match args.matching {
        MatchingArg::Params => Matching::Parameters,
        MatchingArg::Maps => Matching::FeatureMaps,
    };
    let comparison = compare_networks(
        (&name(&args.config), &p.cfg.network),
        (&name(&args.against), &other.network),
        matching,
        &p.train,
        &p.test,
        &p.cfg.train,
        &p.rng,
    )?;
    let files = vec![write_artifact(&args.out_dir, "comparison.csv", &comparison.csv())?];
    if !comparison.verified {
        let counts: Vec<String> =
            comparison.rows.iter().map(|r| format!("{}: {} params, {} maps", r.name, r.params, r.feature_maps)).collect();
        bail!("the configs are not matched by {:?} ({})", args.matching, counts.join("; "));
    }
    Ok(CompareOutcome { comparison, files })
}

/// Runs one subcommand and returns a short human-readable summary.
pub fn run(cli: &Cli) -> Result<String> {
    let mut out = String::new();
    let files = match &cli.command {
        Command::Train(a) => {
            let o = train_cmd(a)?;
            if let Some(last) = o.history.last() {
                writeln!(
                    out,
                    "{} parameters; epoch {}: train loss {:.4}, train acc {:.4}, test acc {:.4}",
                    o.param_count, last.epoch, last.train_loss, last.train_acc, last.test_acc
                )?;
            }
            o.files
        }
        Command::Gradcheck(a) => {
            let o = gradcheck_cmd(a)?;
            for r in &o.rows {
                writeln!(out, "layer {} {}: max rel err {:.3e} ({} checked, {} skipped)", r.0, r.1, r.2, r.3, r.4)?;
            }
            o.files
        }
        Command::Pathways(a) => {
            let o = pathways_cmd(a)?;
            let s = o.separation;
            writeln!(out, "separation: intra {:.4}, inter {:.4}, ratio {:.4}", s.intra, s.inter, s.ratio)?;
            let shares: Vec<String> = o.projection.variance_share.iter().map(|v| format!("{v:.4}")).collect();
            writeln!(out, "top-3 variance share: {}", shares.join(", "))?;
            writeln!(out, "switches per epoch: {:?}", o.switches.per_epoch())?;
            o.files
        }
        Command::Approx(a) => {
            let o = approx_cmd(a)?;
            for ((r, c), g) in o.reports.iter().zip(&o.consistent).zip(&o.network_gap) {
                writeln!(
                    out,
                    "delta {}: l2 error {:.6e}, anchor error {:.1e}, consistent {c}, network gap {g:.1e}",
                    r.delta, r.l2_error, r.anchor_max_abs_err
                )?;
            }
            o.files
        }
        Command::Bench(a) => {
            let o = bench_cmd(a)?;
            for r in &o.reports {
                writeln!(
                    out,
                    "k={} l={}: madds {} vs {} (ratio {}), time {} ns vs {} ns",
                    r.k, r.l, r.madds_sparse, r.madds_dense, r.ratio, r.time_sparse_ns, r.time_dense_ns
                )?;
            }
            o.files
        }
        Command::Compare(a) => {
            let o = compare_cmd(a)?;
            for r in &o.comparison.rows {
                writeln!(
                    out,
                    "{}: {} params, {} maps, final test acc {:.4}, best {:.4}",
                    r.name, r.params, r.feature_maps, r.final_test_acc, r.best_test_acc
                )?;
            }
            o.files
        }
    };
    for f in files {
        writeln!(out, "wrote {}", f.display())?;
    }
    Ok(out)
}
