//! `mrri`: simulate, partition, fit, integrate and test from the command line.

use std::collections::BTreeSet;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};
use mrri::inference::{wald_interval, z_contrast, Interval, TestResult};
use mrri::integration::{EstimateRecord, RidgePolicy};
use mrri::likelihood::{fit_local_mle, initial_theta};
use mrri::runtime::{read_dataset, read_header, write_dataset, DatasetHeader, MAGIC};
use mrri::simulator::{run_study_with, simulate_dataset, EstimatorSelection, SimConfig};
use mrri::{
    build_partition, recursive_integrate, sequential_integrate, DataSource, Error, FitOptions, IntegrateOptions,
    MeanKind, MetaEstimate, Method, ModelSpec, NodePath, PartitionStrategy, PartitionTree, TauStructure,
};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

#[derive(Parser, Debug)]
#[command(name = "mrri", version, about = "Multi-resolution recursive integration for spatial Gaussian processes")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Serialize)]
struct Global {
    /// Random seed (overrides a preset's seed).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,
    /// Largest ridge added to a singular variability matrix.
    #[arg(long, global = true, default_value_t = RidgePolicy::default().max_epsilon)]
    ridge_max: f64,
    /// Scaled gradient tolerance of the leaf optimizer.
    #[arg(long, global = true, default_value_t = FitOptions::default().grad_tol)]
    tol: f64,
    #[arg(long, global = true, default_value_t = FitOptions::default().max_iter)]
    max_iter: usize,
    #[arg(long, global = true, default_value_t = mrri::domain::DEFAULT_MIN_LEAF_SIZE)]
    min_leaf_size: usize,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Draw one replicate of a simulation design into a dataset container.
    Simulate(SimulateArgs),
    /// Split a dataset's domain into a partition tree.
    Partition(PartitionArgs),
    /// Maximum-likelihood fit on one partition node.
    Fit(FitArgs),
    /// Combine leaf fits up the partition tree.
    Integrate(IntegrateArgs),
    /// Two-sided test of a difference between two estimate components.
    Test(TestArgs),
    /// Monte Carlo study over a simulation design.
    Study(StudyArgs),
    /// Print the header or provenance of an output file.
    Info(InfoArgs),
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[arg(long)]
    preset: String,
    /// Observations per replicate (overrides the preset).
    #[arg(long)]
    n: Option<usize>,
    #[arg(long, default_value_t = 0)]
    replicate: u64,
    #[arg(long, short)]
    output: PathBuf,
}

#[derive(Args, Debug)]
struct PartitionArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Children per node at each resolution, e.g. `2,2`.
    #[arg(long, value_delimiter = ',', required = true)]
    branching: Vec<usize>,
    #[arg(long, value_enum, default_value_t = StrategyArg::Coordinate)]
    strategy: StrategyArg,
    #[arg(long, short)]
    output: PathBuf,
}

#[derive(Args, Debug, Clone, Serialize)]
struct ModelArgs {
    /// Covariance kernel; `auto` picks nonstationary when the domain has several ROIs.
    #[arg(long, value_enum, default_value_t = KernelArg::Auto)]
    kernel: KernelArg,
    /// Mean model; defaults to linear for the stationary kernel and constant otherwise.
    #[arg(long, value_enum)]
    mean: Option<MeanArg>,
    #[arg(long, value_enum, default_value_t = TauArg::Single)]
    tau: TauArg,
}

#[derive(Args, Debug)]
struct FitArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    partition: PathBuf,
    /// Node path such as `2.1`; `0` is the root.
    #[arg(long, default_value = "0")]
    node: String,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, short)]
    output: PathBuf,
}

#[derive(Args, Debug)]
#[command(group(ArgGroup::new("method").required(true).args(["recursive", "sequential"])))]
struct IntegrateArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    partition: PathBuf,
    #[arg(long)]
    recursive: bool,
    #[arg(long)]
    sequential: bool,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, short)]
    output: PathBuf,
}

#[derive(Args, Debug)]
struct TestArgs {
    /// Estimate file written by `integrate` or `fit`.
    #[arg(long)]
    estimate: PathBuf,
    /// Two components by index or name, e.g. `3,6` or `rho1[0],rho2[0]`.
    #[arg(long, value_delimiter = ',', required = true)]
    contrast: Vec<String>,
    /// Hypothesized difference of the two components.
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    null: f64,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    #[arg(long, short)]
    output: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct StudyArgs {
    #[arg(long)]
    preset: String,
    #[arg(long)]
    replicates: Option<usize>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long, value_enum)]
    estimator: Option<EstimatorArg>,
    /// Writes the full report as JSON here.
    #[arg(long, short)]
    output: Option<PathBuf>,
    /// One line per finished replicate on stderr.
    #[arg(long)]
    progress: bool,
}

#[derive(Args, Debug)]
struct InfoArgs {
    file: PathBuf,
}

#[derive(ValueEnum, Debug, Clone, Copy, Serialize)]
#[serde(rename_all = "kebab-case")]
enum StrategyArg {
    Coordinate,
    RoiBalanced,
}

#[derive(ValueEnum, Debug, Clone, Copy, Serialize)]
#[serde(rename_all = "kebab-case")]
enum KernelArg {
    Auto,
    Stationary,
    Nonstationary,
}

#[derive(ValueEnum, Debug, Clone, Copy, Serialize)]
#[serde(rename_all = "kebab-case")]
enum MeanArg {
    Constant,
    Linear,
}

#[derive(ValueEnum, Debug, Clone, Copy, Serialize)]
#[serde(rename_all = "kebab-case")]
enum TauArg {
    Single,
    PerRoi,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum EstimatorArg {
    Recursive,
    Sequential,
    Both,
}

/// Attached to every output so a run can be traced and repeated.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct ProvenanceRecord {
    tool: String,
    version: String,
    command: String,
    seed: Option<u64>,
    config: Value,
    /// SHA-256 of the serialized `config`.
    config_hash: String,
}

impl ProvenanceRecord {
    fn new(command: &str, seed: Option<u64>, config: Value) -> Self {
        let bytes = serde_json::to_vec(&config).expect("json value serializes");
        let config_hash = Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect();
        ProvenanceRecord {
            tool: "mrri".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            seed,
            config,
            config_hash,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct PartitionFile {
    provenance: ProvenanceRecord,
    dataset: PathBuf,
    min_leaf_size: usize,
    strategy: PartitionStrategy,
    tree: PartitionTree,
}

#[derive(Serialize, Deserialize)]
struct EstimateFile {
    provenance: ProvenanceRecord,
    estimate: EstimateRecord,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    loglik: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    iterations: Option<usize>,
}

#[derive(Serialize)]
struct TestFile {
    provenance: ProvenanceRecord,
    test: TestResult,
    rejects: bool,
    alpha: f64,
    intervals: Vec<Interval>,
}

/// Usage problems detected after parsing; these exit with status 2.
struct Usage(String);

enum Failure {
    Usage(Usage),
    Run(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Run(Error::Io(e))
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Run(Error::Json(e))
    }
}

fn usage<T>(msg: impl Into<String>) -> Result<T, Failure> {
    Err(Failure::Usage(Usage(msg.into())))
}

type CliResult<T> = Result<T, Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(Usage(msg))) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Run(e)) => {
            let body = json!({
                "error": {
                    "kind": e.kind(),
                    "message": e.to_string(),
                    "node": e.node_path().map(|p| p.to_string()),
                }
            });
            eprintln!("{body}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: &Cli) -> CliResult<()> {
    let g = &cli.global;
    if g.workers == 0 {
        return usage("--workers must be at least 1");
    }
    if !(g.tol > 0.0) || !(g.ridge_max >= 0.0) {
        return usage("--tol must be positive and --ridge-max non-negative");
    }
    match &cli.command {
        Command::Simulate(a) => simulate(g, a),
        Command::Partition(a) => partition(g, a),
        Command::Fit(a) => fit(g, a),
        Command::Integrate(a) => integrate(g, a),
        Command::Test(a) => test(g, a),
        Command::Study(a) => study(g, a),
        Command::Info(a) => info(a),
    }
}

fn fit_options(g: &Global) -> FitOptions {
    FitOptions {
        grad_tol: g.tol,
        max_iter: g.max_iter,
        ..FitOptions::default()
    }
}

fn ridge_policy(g: &Global) -> RidgePolicy {
    RidgePolicy {
        max_epsilon: g.ridge_max,
        ..RidgePolicy::default()
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<T> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".provenance.json");
    PathBuf::from(s)
}

fn preset(name: &str, g: &Global) -> CliResult<SimConfig> {
    let mut c = match SimConfig::preset(name) {
        Ok(c) => c,
        Err(e) => return usage(e.to_string()),
    };
    if let Some(seed) = g.seed {
        c.seed = seed;
    }
    c.workers = g.workers;
    c.fit = fit_options(g);
    c.ridge = ridge_policy(g);
    Ok(c)
}

fn simulate(g: &Global, a: &SimulateArgs) -> CliResult<()> {
    let mut c = preset(&a.preset, g)?;
    if let Some(n) = a.n {
        c.n = n;
    }
    let data = simulate_dataset(&c, a.replicate)?;
    write_dataset(&a.output, &data)?;
    let prov = ProvenanceRecord::new(
        "simulate",
        Some(c.seed),
        json!({ "sim": c, "replicate": a.replicate }),
    );
    // the container layout is fixed, so provenance goes alongside it
    write_json(&sidecar(&a.output), &prov)?;
    println!("{}", serde_json::to_string_pretty(&prov)?);
    Ok(())
}

fn strategy(s: StrategyArg) -> PartitionStrategy {
    match s {
        StrategyArg::Coordinate => PartitionStrategy::CoordinateSplit,
        StrategyArg::RoiBalanced => PartitionStrategy::RoiBalancedCoordinateSplit,
    }
}

fn partition(g: &Global, a: &PartitionArgs) -> CliResult<()> {
    let file = read_dataset(&a.dataset)?;
    let strat = strategy(a.strategy);
    let tree = build_partition(file.domain(), &a.branching, strat, g.min_leaf_size)?;
    let header = *file.header();
    let prov = ProvenanceRecord::new(
        "partition",
        g.seed,
        json!({
            "dataset_header": header,
            "branching": a.branching,
            "strategy": strat,
            "min_leaf_size": g.min_leaf_size,
        }),
    );
    let leaves = tree.leaves().len();
    write_json(
        &a.output,
        &PartitionFile {
            provenance: prov,
            dataset: a.dataset.clone(),
            min_leaf_size: g.min_leaf_size,
            strategy: strat,
            tree,
        },
    )?;
    println!("{leaves} leaves written to {}", a.output.display());
    Ok(())
}

fn model_spec(m: &ModelArgs, header: &DatasetHeader, data: &dyn DataSource) -> CliResult<ModelSpec> {
    let rois: BTreeSet<u32> = data.domain().roi_labels().into_iter().collect();
    let nonstationary = match m.kernel {
        KernelArg::Auto => rois.len() > 1,
        KernelArg::Stationary => false,
        KernelArg::Nonstationary => true,
    };
    let mean = match m.mean.unwrap_or(if nonstationary { MeanArg::Constant } else { MeanArg::Linear }) {
        MeanArg::Constant => MeanKind::ConstantIntercept,
        MeanArg::Linear => MeanKind::LinearInX,
    };
    let q = header.q as usize;
    let spec = if nonstationary {
        let tau = match m.tau {
            TauArg::Single => TauStructure::SingleTau2,
            TauArg::PerRoi => TauStructure::PerRoiTau2,
        };
        ModelSpec::nonstationary(mean, q, rois.len().max(1), tau)
    } else {
        ModelSpec::stationary(mean, q)
    };
    if let Err(e) = spec.validate() {
        return usage(e.to_string());
    }
    Ok(spec)
}

fn load_partition(path: &Path, dataset: &Path) -> CliResult<PartitionFile> {
    let p: PartitionFile = read_json(path)?;
    let n = read_header(dataset)?.s as usize;
    p.tree.validate(n, 1)?;
    Ok(p)
}

fn fit(g: &Global, a: &FitArgs) -> CliResult<()> {
    let file = read_dataset(&a.dataset)?;
    let part = load_partition(&a.partition, &a.dataset)?;
    let node: NodePath = match a.node.parse() {
        Ok(p) => p,
        Err(e) => return usage(format!("--node: {e}")),
    };
    let Some(idx) = part.tree.indices(&node) else {
        return usage(format!("node {node} is not in the partition"));
    };
    let spec = model_spec(&a.model, file.header(), &file)?;
    let block = file.block(&node, idx)?;
    let init = initial_theta(&block, &spec)?;
    let f = fit_local_mle(&block, &spec, &init, &fit_options(g)).map_err(|e| e.at(&node, mrri::Stage::LeafFit))?;
    let prov = ProvenanceRecord::new(
        "fit",
        g.seed,
        json!({
            "dataset_header": file.header(),
            "partition_hash": part.provenance.config_hash,
            "node": node,
            "model": spec,
            "fit": fit_options(g),
        }),
    );
    write_json(
        &a.output,
        &EstimateFile {
            provenance: prov,
            estimate: f.estimate.to_record(&spec)?,
            loglik: Some(f.loglik),
            iterations: Some(f.iterations),
        },
    )?;
    print_estimate(&f.estimate, &spec)?;
    Ok(())
}

fn print_estimate(e: &MetaEstimate, spec: &ModelSpec) -> CliResult<()> {
    let rec = e.to_record(spec)?;
    println!("{:<14} {:>12} {:>12}", "parameter", "estimate", "std.error");
    for c in &rec.components {
        let se = c.std_error.map(|s| format!("{s:12.6}")).unwrap_or_else(|| format!("{:>12}", "-"));
        println!("{:<14} {:>12.6} {se}", c.name, c.value);
    }
    Ok(())
}

fn integrate(g: &Global, a: &IntegrateArgs) -> CliResult<()> {
    let file = read_dataset(&a.dataset)?;
    let part = load_partition(&a.partition, &a.dataset)?;
    let spec = model_spec(&a.model, file.header(), &file)?;
    let opts = IntegrateOptions {
        fit: fit_options(g),
        ridge: ridge_policy(g),
        init: None,
        workers: g.workers,
    };
    let (method, est) = if a.recursive {
        (Method::Recursive, recursive_integrate(&part.tree, &file, &spec, &opts)?)
    } else {
        (Method::Sequential, sequential_integrate(&part.tree, &file, &spec, &opts)?)
    };
    // worker count is excluded: it does not change the output
    let prov = ProvenanceRecord::new(
        "integrate",
        g.seed,
        json!({
            "dataset_header": file.header(),
            "partition_hash": part.provenance.config_hash,
            "method": method,
            "model": spec,
            "fit": opts.fit,
            "ridge": opts.ridge,
        }),
    );
    write_json(
        &a.output,
        &EstimateFile {
            provenance: prov,
            estimate: est.to_record(&spec)?,
            loglik: None,
            iterations: None,
        },
    )?;
    print_estimate(&est, &spec)?;
    Ok(())
}

fn component(spec: &ModelSpec, key: &str) -> CliResult<usize> {
    let names = spec.param_names();
    if let Ok(k) = key.trim().parse::<usize>() {
        if k < names.len() {
            return Ok(k);
        }
        return usage(format!("component {k} out of range (p = {})", names.len()));
    }
    match names.iter().position(|n| n == key.trim()) {
        Some(k) => Ok(k),
        None => usage(format!("unknown component '{key}' (known: {})", names.join(", "))),
    }
}

fn test(g: &Global, a: &TestArgs) -> CliResult<()> {
    if !(a.alpha > 0.0 && a.alpha < 1.0) {
        return usage("--alpha must lie in (0, 1)");
    }
    if a.contrast.len() != 2 {
        return usage("--contrast takes exactly two components");
    }
    let f: EstimateFile = read_json(&a.estimate)?;
    let est = MetaEstimate::from_record(&f.estimate)?;
    let spec = &f.estimate.spec;
    let q1 = component(spec, &a.contrast[0])?;
    let q2 = component(spec, &a.contrast[1])?;
    if q1 == q2 {
        return usage("--contrast needs two distinct components");
    }
    let mut result = z_contrast(&est, q1, q2, a.null)?;
    let names = spec.param_names();
    result.contrast.description = format!("{} - {}", names[q1], names[q2]);
    let level = 1.0 - a.alpha;
    let intervals = vec![wald_interval(&est, q1, level)?, wald_interval(&est, q2, level)?];
    let prov = ProvenanceRecord::new(
        "test",
        g.seed,
        json!({
            "estimate_hash": f.provenance.config_hash,
            "components": [q1, q2],
            "null": a.null,
            "alpha": a.alpha,
        }),
    );
    let out = TestFile {
        provenance: prov,
        rejects: result.rejects(a.alpha),
        test: result,
        alpha: a.alpha,
        intervals,
    };
    match &a.output {
        Some(p) => {
            write_json(p, &out)?;
            println!(
                "{}: z = {:.4}, p = {:.4e}, {}",
                out.test.contrast.description,
                out.test.statistic,
                out.test.p_value,
                if out.rejects { "reject" } else { "do not reject" }
            );
        }
        None => println!("{}", serde_json::to_string_pretty(&out)?),
    }
    Ok(())
}

fn study(g: &Global, a: &StudyArgs) -> CliResult<()> {
    let mut c = preset(&a.preset, g)?;
    if let Some(r) = a.replicates {
        c.replicates = r;
    }
    if let Some(n) = a.n {
        c.n = n;
    }
    if let Some(e) = a.estimator {
        c.estimator = match e {
            EstimatorArg::Recursive => EstimatorSelection::Recursive,
            EstimatorArg::Sequential => EstimatorSelection::Sequential,
            EstimatorArg::Both => EstimatorSelection::Both,
        };
    }
    let progress = a.progress;
    let report = run_study_with(&c, |r| {
        if progress {
            let failed = r.outcomes.iter().filter(|o| o.error.is_some()).count();
            eprintln!("replicate {} done ({failed} failed)", r.replicate);
        }
    })?;
    let mut cfg = c.clone();
    // the pool size does not affect results
    cfg.workers = 0;
    let prov = ProvenanceRecord::new("study", Some(c.seed), serde_json::to_value(&cfg)?);
    print!("{}", report.to_text());
    println!("config hash: {}", prov.config_hash);
    if let Some(p) = &a.output {
        write_json(p, &json!({ "provenance": prov, "report": report }))?;
    }
    Ok(())
}

fn info(a: &InfoArgs) -> CliResult<()> {
    let mut head = [0u8; 8];
    let is_container = std::fs::File::open(&a.file)
        .and_then(|mut f| f.read_exact(&mut head))
        .map(|_| &head == MAGIC)
        .unwrap_or(false);
    if is_container {
        let h = read_header(&a.file)?;
        let file = read_dataset(&a.file)?;
        let prov: Option<Value> = std::fs::read_to_string(sidecar(&a.file))
            .ok()
            .and_then(|t| serde_json::from_str(&t).ok());
        let out = json!({
            "kind": "dataset",
            "header": h,
            "has_roi": h.has_roi(),
            "roi_labels": file.domain().roi_labels().into_iter().collect::<BTreeSet<_>>(),
            "provenance": prov,
        });
        println!("{}", serde_json::to_string_pretty(&out)?);
        return Ok(());
    }
    let v: Value = read_json(&a.file)?;
    let keys: Vec<&String> = v.as_object().map(|o| o.keys().collect()).unwrap_or_default();
    let out = json!({
        "kind": "json",
        "fields": keys,
        "provenance": v.get("provenance"),
    });
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(())
}
