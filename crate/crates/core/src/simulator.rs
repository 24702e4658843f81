//! Synthetic datasets for the simulation designs and Monte Carlo metrics.

use std::fmt::Write as _;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::{build_partition, PartitionStrategy, PartitionTree, SpatialDomain, DEFAULT_MIN_LEAF_SIZE};
use crate::error::{Error, Result};
use crate::inference::{wald_interval, z_contrast, TestResult};
use crate::integration::{
    recursive_integrate, sequential_integrate, EstimateRecord, IntegrateOptions, MetaEstimate, Method, RidgePolicy,
};
use crate::likelihood::{Dataset, FitOptions};
use crate::linalg::SpdFactor;
use crate::model::{build_cov_matrix, mean_value, CovKind, MeanKind, ModelSpec, TauStructure, ThetaParams};

/// Largest domain the simulator factorizes densely.
pub const MAX_DENSE_LOCATIONS: usize = 1600;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DomainConfig {
    /// `[1, nx] x [1, ny]`.
    Grid { nx: usize, ny: usize },
    /// Two `n x n` grids labelled ROI 1 and ROI 2, the second shifted by `n`
    /// along both axes.
    TwoRoi { n: usize },
}

impl DomainConfig {
    pub fn build(&self) -> Result<SpatialDomain> {
        match *self {
            DomainConfig::Grid { nx, ny } => SpatialDomain::grid(nx, ny),
            DomainConfig::TwoRoi { n } => {
                let a = SpatialDomain::grid_with_offset(n, n, 0.0, 0.0, Some(1))?;
                let b = SpatialDomain::grid_with_offset(n, n, n as f64, n as f64, Some(2))?;
                SpatialDomain::concat(&[a, b])
            }
        }
    }

    pub fn n_locations(&self) -> usize {
        match *self {
            DomainConfig::Grid { nx, ny } => nx * ny,
            DomainConfig::TwoRoi { n } => 2 * n * n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionConfig {
    pub branching: Vec<usize>,
    pub strategy: PartitionStrategy,
    pub min_leaf_size: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimatorSelection {
    Recursive,
    Sequential,
    Both,
}

impl EstimatorSelection {
    pub fn methods(self) -> Vec<Method> {
        match self {
            EstimatorSelection::Recursive => vec![Method::Recursive],
            EstimatorSelection::Sequential => vec![Method::Sequential],
            EstimatorSelection::Both => vec![Method::Recursive, Method::Sequential],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub name: String,
    pub domain: DomainConfig,
    pub spec: ModelSpec,
    pub theta_true: ThetaParams,
    #[serde(rename = "N")]
    pub n: usize,
    pub replicates: usize,
    pub seed: u64,
    pub partition: PartitionConfig,
    pub estimator: EstimatorSelection,
    /// Variance of the continuous covariates (the first column is an intercept).
    pub covariate_variance: f64,
    /// Covariates are drawn afresh for every replicate.
    pub redraw_covariates: bool,
    pub workers: usize,
    pub fit: FitOptions,
    pub ridge: RidgePolicy,
    pub max_dense_locations: usize,
}

pub const PRESETS: [&str; 7] = [
    "sim1",
    "sim1-desk",
    "sim2",
    "sim2-n2000",
    "sim2-desk",
    "sim3",
    "sim3-desk",
];

fn stationary_truth() -> ThetaParams {
    ThetaParams::new(
        vec![0.3, 0.6, 0.8],
        vec![3f64.ln(), 0.5f64.ln()],
        1.6f64.ln(),
    )
}

fn two_roi_truth() -> ThetaParams {
    ThetaParams::new(
        vec![0.0],
        vec![3f64.ln(), 0.5, 0.5, 0.5, 0.6, 0.6, 0.6],
        1.6f64.ln(),
    )
}

impl SimConfig {
    /// Named simulation designs. `-desk` variants are reduced for a single machine.
    pub fn preset(name: &str) -> Result<Self> {
        let stationary = ModelSpec::stationary(MeanKind::LinearInX, 3);
        let two_roi = ModelSpec::nonstationary(MeanKind::ConstantIntercept, 3, 2, TauStructure::SingleTau2);
        let part = |branching: &[usize], strategy, min_leaf_size| PartitionConfig {
            branching: branching.to_vec(),
            strategy,
            min_leaf_size,
        };
        let base = |domain, spec: &ModelSpec, theta, n, replicates, partition, estimator, var| SimConfig {
            name: name.to_string(),
            domain,
            spec: spec.clone(),
            theta_true: theta,
            n,
            replicates,
            seed: 20_240_601,
            partition,
            estimator,
            covariate_variance: var,
            redraw_covariates: true,
            workers: 1,
            fit: FitOptions::default(),
            ridge: RidgePolicy::default(),
            max_dense_locations: MAX_DENSE_LOCATIONS,
        };
        use EstimatorSelection::*;
        use PartitionStrategy::*;
        let cfg = match name {
            "sim1" => base(
                DomainConfig::Grid { nx: 20, ny: 20 },
                &stationary,
                stationary_truth(),
                10_000,
                500,
                part(&[4, 2, 2], CoordinateSplit, DEFAULT_MIN_LEAF_SIZE),
                Both,
                4.0,
            ),
            "sim1-desk" => base(
                DomainConfig::Grid { nx: 10, ny: 10 },
                &stationary,
                stationary_truth(),
                2000,
                200,
                part(&[2, 2], CoordinateSplit, DEFAULT_MIN_LEAF_SIZE),
                Both,
                4.0,
            ),
            "sim2" | "sim2-n2000" => base(
                DomainConfig::Grid { nx: 160, ny: 160 },
                &stationary,
                stationary_truth(),
                if name == "sim2" { 5000 } else { 2000 },
                500,
                part(&[4, 4, 4, 4], CoordinateSplit, DEFAULT_MIN_LEAF_SIZE),
                Both,
                4.0,
            ),
            "sim2-desk" => base(
                DomainConfig::Grid { nx: 32, ny: 32 },
                &stationary,
                stationary_truth(),
                1000,
                100,
                part(&[4, 4, 4], CoordinateSplit, 16),
                Both,
                4.0,
            ),
            "sim3" => base(
                DomainConfig::TwoRoi { n: 20 },
                &two_roi,
                two_roi_truth(),
                10_000,
                500,
                part(&[2, 2, 4], RoiBalancedCoordinateSplit, DEFAULT_MIN_LEAF_SIZE),
                Sequential,
                1.0,
            ),
            "sim3-desk" => base(
                DomainConfig::TwoRoi { n: 10 },
                &two_roi,
                two_roi_truth(),
                2000,
                200,
                part(&[2, 2], RoiBalancedCoordinateSplit, DEFAULT_MIN_LEAF_SIZE),
                Sequential,
                1.0,
            ),
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "unknown preset '{name}' (known: {})",
                    PRESETS.join(", ")
                )))
            }
        };
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        self.theta_true.check(&self.spec)?;
        if self.replicates == 0 {
            return Err(Error::InvalidArgument("study needs at least one replicate".into()));
        }
        if self.n == 0 {
            return Err(Error::InvalidArgument("N must be positive".into()));
        }
        if self.spec.q == 0 || !(self.covariate_variance >= 0.0) {
            return Err(Error::InvalidArgument("bad covariate settings".into()));
        }
        Ok(())
    }

    pub fn integrate_options(&self) -> IntegrateOptions {
        IntegrateOptions {
            fit: self.fit,
            ridge: self.ridge,
            init: None,
            workers: 1,
        }
    }

    pub fn build_partition(&self, domain: &SpatialDomain) -> Result<PartitionTree> {
        build_partition(
            domain,
            &self.partition.branching,
            self.partition.strategy,
            self.partition.min_leaf_size,
        )
    }
}

fn replicate_rng(seed: u64, stream: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn draw_covariates(rng: &mut ChaCha20Rng, n: usize, q: usize, var: f64) -> DMatrix<f64> {
    let sd = var.sqrt();
    let mut x = DMatrix::zeros(n, q);
    for i in 0..n {
        x[(i, 0)] = 1.0;
        for k in 1..q {
            let z: f64 = rng.sample(StandardNormal);
            x[(i, k)] = sd * z;
        }
    }
    x
}

/// Draws one replicate. The generator is ChaCha20 keyed by `seed` on stream
/// `replicate_id`, so replicates are reproducible independently of each other.
pub fn simulate_dataset(config: &SimConfig, replicate_id: u64) -> Result<Dataset> {
    config.validate()?;
    let s = config.domain.n_locations();
    if s > config.max_dense_locations {
        return Err(Error::Capacity(format!(
            "simulating {s} locations needs a dense {s}x{s} factorization; the cap is {} \
             (use a -desk preset)",
            config.max_dense_locations
        )));
    }
    let domain = config.domain.build()?;
    let spec = &config.spec;
    let theta = &config.theta_true;
    let (n, q) = (config.n, spec.q);

    let mut rng = replicate_rng(config.seed, replicate_id);
    let x = if config.redraw_covariates {
        draw_covariates(&mut rng, n, q, config.covariate_variance)
    } else {
        let mut fixed = replicate_rng(config.seed, u64::MAX);
        draw_covariates(&mut fixed, n, q, config.covariate_variance)
    };

    let mut y = DMatrix::zeros(n, s);
    let shared = match spec.cov_kind {
        CovKind::StationaryGaussian => Some(SpdFactor::new(build_cov_matrix(domain.locations(), x.row(0).clone_owned().as_slice(), theta, spec)?)?.l()),
        CovKind::NonstationaryPs => None,
    };
    let mut z = DVector::zeros(s);
    for i in 0..n {
        let xi: Vec<f64> = x.row(i).iter().copied().collect();
        let owned;
        let l = match &shared {
            Some(l) => l,
            None => {
                owned = SpdFactor::new(build_cov_matrix(domain.locations(), &xi, theta, spec)?)?.l();
                &owned
            }
        };
        for v in z.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        let mu = mean_value(spec, &xi, &theta.beta)?;
        let draw = l * &z;
        for j in 0..s {
            y[(i, j)] = mu + draw[j];
        }
    }
    Dataset::new(y, x, domain)
}

/// Outcome of one estimator on one replicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodOutcome {
    pub method: Method,
    pub estimate: Option<EstimateRecord>,
    pub error: Option<String>,
    pub seconds: f64,
}

impl MethodOutcome {
    pub fn meta_estimate(&self) -> Option<MetaEstimate> {
        self.estimate.as_ref().and_then(|r| MetaEstimate::from_record(r).ok())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateOutcome {
    pub replicate: u64,
    pub outcomes: Vec<MethodOutcome>,
}

impl ReplicateOutcome {
    pub fn estimate(&self, method: Method) -> Option<MetaEstimate> {
        self.outcomes
            .iter()
            .find(|o| o.method == method)
            .and_then(MethodOutcome::meta_estimate)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub parameter: String,
    pub truth: f64,
    pub rmse: f64,
    pub ese: f64,
    pub ase: f64,
    pub bias: f64,
    /// Coverage of the 95% Wald interval, as a fraction.
    pub cp: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub mean_seconds: f64,
    pub sd_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsTable {
    pub method: Method,
    pub rows: Vec<MetricsRow>,
    pub replicates_used: usize,
    pub failures: usize,
    pub timing: Timing,
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let sd = if v.len() > 1 {
        (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, sd)
}

impl MetricsTable {
    /// Aggregates replicate estimates; ESE uses the `R - 1` denominator.
    pub fn from_estimates(
        method: Method,
        spec: &ModelSpec,
        truth: &ThetaParams,
        estimates: &[(MetaEstimate, f64)],
        failures: usize,
    ) -> Result<Self> {
        if estimates.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "no successful replicates for {method} ({failures} failures)"
            )));
        }
        let names = spec.param_names();
        let t = truth.to_vec();
        let r = estimates.len() as f64;
        let mut rows = Vec::with_capacity(t.len());
        for (k, name) in names.into_iter().enumerate() {
            let vals: Vec<f64> = estimates.iter().map(|(e, _)| e.theta.to_vec()[k]).collect();
            let (mean, ese) = mean_sd(&vals);
            let rmse = (vals.iter().map(|v| (v - t[k]).powi(2)).sum::<f64>() / r).sqrt();
            let mut ase = 0.0;
            let mut hits = 0usize;
            for (e, _) in estimates {
                ase += e.std_errors()?[k];
                if wald_interval(e, k, 0.95)?.contains(t[k]) {
                    hits += 1;
                }
            }
            rows.push(MetricsRow {
                parameter: name,
                truth: t[k],
                rmse,
                ese,
                ase: ase / r,
                bias: mean - t[k],
                cp: hits as f64 / r,
            });
        }
        let secs: Vec<f64> = estimates.iter().map(|(_, s)| *s).collect();
        let (mean_seconds, sd_seconds) = mean_sd(&secs);
        Ok(MetricsTable {
            method,
            rows,
            replicates_used: estimates.len(),
            failures,
            timing: Timing {
                mean_seconds,
                sd_seconds,
            },
        })
    }

    /// Plain-text table with metrics scaled by `10^4` (BIAS unscaled) as in
    /// the usual simulation tables.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "estimator: {}   replicates: {}   failures: {}   time: {:.3} ({:.3}) s",
            self.method, self.replicates_used, self.failures, self.timing.mean_seconds, self.timing.sd_seconds
        );
        let _ = writeln!(
            out,
            "{:<14} {:>10} {:>12} {:>12} {:>12} {:>12} {:>7}",
            "parameter", "truth", "RMSE x1e4", "ESE x1e4", "ASE x1e4", "BIAS", "CP(%)"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<14} {:>10.4} {:>12.2} {:>12.2} {:>12.2} {:>12.2e} {:>7.1}",
                r.parameter,
                r.truth,
                r.rmse * 1e4,
                r.ese * 1e4,
                r.ase * 1e4,
                r.bias,
                r.cp * 100.0
            );
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub config: SimConfig,
    pub tables: Vec<MetricsTable>,
    pub replicates: Vec<ReplicateOutcome>,
}

impl StudyReport {
    pub fn table(&self, method: Method) -> Option<&MetricsTable> {
        self.tables.iter().find(|t| t.method == method)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "study {}: S = {}, N = {}, replicates = {}, partition {:?}\n",
            self.config.name,
            self.config.domain.n_locations(),
            self.config.n,
            self.config.replicates,
            self.config.partition.branching
        );
        for t in &self.tables {
            out.push('\n');
            out.push_str(&t.to_text());
        }
        out
    }
}

/// Simulates, partitions and integrates one replicate with every selected estimator.
pub fn run_replicate(config: &SimConfig, tree: &PartitionTree, replicate_id: u64) -> ReplicateOutcome {
    let opts = config.integrate_options();
    let data = simulate_dataset(config, replicate_id);
    let outcomes = config
        .estimator
        .methods()
        .into_iter()
        .map(|method| {
            let started = Instant::now();
            let result = data.as_ref().map_err(|e| e.to_string()).and_then(|d| {
                let r = match method {
                    Method::Recursive => recursive_integrate(tree, d, &config.spec, &opts),
                    _ => sequential_integrate(tree, d, &config.spec, &opts),
                };
                r.and_then(|e| e.to_record(&config.spec)).map_err(|e| e.to_string())
            });
            let seconds = started.elapsed().as_secs_f64();
            match result {
                Ok(rec) => MethodOutcome {
                    method,
                    estimate: Some(rec),
                    error: None,
                    seconds,
                },
                Err(e) => MethodOutcome {
                    method,
                    estimate: None,
                    error: Some(e),
                    seconds,
                },
            }
        })
        .collect();
    ReplicateOutcome {
        replicate: replicate_id,
        outcomes,
    }
}

/// Runs every replicate (concurrently over `config.workers`) and aggregates
/// in replicate order. Failed replicates are excluded and counted.
pub fn run_study(config: &SimConfig) -> Result<StudyReport> {
    run_study_with(config, |_| {})
}

/// As [`run_study`], calling `progress` after each finished replicate.
pub fn run_study_with<P>(config: &SimConfig, progress: P) -> Result<StudyReport>
where
    P: Fn(&ReplicateOutcome) + Sync,
{
    config.validate()?;
    let domain = config.domain.build()?;
    if domain.len() > config.max_dense_locations {
        return Err(Error::Capacity(format!(
            "{} locations exceed the simulation cap of {} (use a -desk preset)",
            domain.len(),
            config.max_dense_locations
        )));
    }
    let tree = config.build_partition(&domain)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers.max(1))
        .build()
        .map_err(|e| Error::InvalidArgument(format!("worker pool: {e}")))?;
    let replicates: Vec<ReplicateOutcome> = pool.install(|| {
        (0..config.replicates as u64)
            .into_par_iter()
            .map(|r| {
                let out = run_replicate(config, &tree, r);
                progress(&out);
                out
            })
            .collect()
    });
    let mut tables = Vec::new();
    for method in config.estimator.methods() {
        let mut ok = Vec::new();
        let mut failures = 0;
        for rep in &replicates {
            let o = rep.outcomes.iter().find(|o| o.method == method);
            match o.and_then(|o| o.meta_estimate().map(|e| (e, o.seconds))) {
                Some(pair) => ok.push(pair),
                None => failures += 1,
            }
        }
        tables.push(MetricsTable::from_estimates(
            method,
            &config.spec,
            &config.theta_true,
            &ok,
            failures,
        )?);
    }
    Ok(StudyReport {
        config: config.clone(),
        tables,
        replicates,
    })
}

/// Two-sided contrast tests on every successful replicate of one estimator.
pub fn contrast_tests(
    report: &StudyReport,
    method: Method,
    q1: usize,
    q2: usize,
    null_value: f64,
) -> Vec<TestResult> {
    report
        .replicates
        .iter()
        .filter_map(|r| r.estimate(method))
        .filter_map(|e| z_contrast(&e, q1, q2, null_value).ok())
        .collect()
}
