//! Staged execution of the integrators and the binary dataset container.
//!
//! A [`TaskPlan`] lists stages separated by barriers. Tasks within a stage are
//! independent and run on a worker pool; their outputs are keyed by node path
//! and evaluation point and consumed in child-index order, so the result does
//! not depend on the number of workers.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::{Location, NodePath, PartitionTree, SpatialDomain};
use crate::error::{Error, Result, Stage};
use crate::integration::{
    combine, meta_estimator, weighted_scores, IntegrateOptions, MetaEstimate, Method, Provenance, RidgePolicy,
    RidgeRecord,
};
use crate::likelihood::{
    fit_local_mle, initial_theta, per_observation_scores, DataBlock, DataSource, Dataset, FitOptions, LocalFit,
    ScoreMatrix,
};
use crate::model::{ModelSpec, ThetaParams};

/// Which estimate a task's scores are evaluated at.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalPoint {
    /// The node's own estimate (leaf MLE, or the node's combined estimate).
    Own,
    /// The combined estimate of the given enclosing node.
    At(NodePath),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Task {
    pub node: NodePath,
    pub at: EvalPoint,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StagePlan {
    pub kind: Stage,
    pub tasks: Vec<Task>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskPlan {
    pub method: Method,
    pub stages: Vec<StagePlan>,
    pub worker_count: usize,
}

impl TaskPlan {
    fn count(&self, kind: Stage) -> usize {
        self.stages.iter().filter(|s| s.kind == kind).map(|s| s.tasks.len()).sum()
    }

    pub fn leaf_fits(&self) -> usize {
        self.count(Stage::LeafFit)
    }

    /// Leaf score evaluations the plan performs, counting those produced by the fits.
    pub fn score_evaluations(&self) -> usize {
        self.count(Stage::LeafFit) + self.count(Stage::ScoreEval)
    }

    pub fn projections(&self) -> usize {
        self.count(Stage::Project)
    }

    pub fn reductions(&self) -> usize {
        self.count(Stage::Reduce)
    }
}

fn own(nodes: Vec<NodePath>) -> Vec<Task> {
    nodes.into_iter().map(|node| Task { node, at: EvalPoint::Own }).collect()
}

/// Builds the stage schedule for an integrator.
pub fn plan(tree: &PartitionTree, method: Method, workers: usize) -> Result<TaskPlan> {
    if workers == 0 {
        return Err(Error::InvalidArgument("worker count must be at least 1".into()));
    }
    if !matches!(method, Method::Recursive | Method::Sequential) {
        return Err(Error::InvalidArgument(format!("no plan for method {method}")));
    }
    let depth = tree.depth();
    let mut stages = vec![StagePlan {
        kind: Stage::LeafFit,
        tasks: own(tree.leaves()),
    }];
    for m in (0..depth).rev() {
        match method {
            Method::Recursive => {
                if m + 1 < depth {
                    let targets = tree.nodes_at(m + 1);
                    let mut evals = Vec::new();
                    for c in &targets {
                        for leaf in tree.leaves_under(c) {
                            evals.push(Task {
                                node: leaf,
                                at: EvalPoint::At(c.clone()),
                            });
                        }
                    }
                    stages.push(StagePlan {
                        kind: Stage::ScoreEval,
                        tasks: evals,
                    });
                    for r in (m + 1..depth).rev() {
                        let mut tasks = Vec::new();
                        for c in &targets {
                            for n in tree.nodes_at(r).into_iter().filter(|n| n.is_descendant_of(c)) {
                                tasks.push(Task {
                                    node: n,
                                    at: EvalPoint::At(c.clone()),
                                });
                            }
                        }
                        stages.push(StagePlan {
                            kind: Stage::Project,
                            tasks,
                        });
                    }
                }
                stages.push(StagePlan {
                    kind: Stage::Reduce,
                    tasks: own(tree.nodes_at(m)),
                });
            }
            _ => {
                stages.push(StagePlan {
                    kind: Stage::Reduce,
                    tasks: own(tree.nodes_at(m)),
                });
                if m > 0 {
                    stages.push(StagePlan {
                        kind: Stage::Project,
                        tasks: own(tree.nodes_at(m)),
                    });
                }
            }
        }
    }
    Ok(TaskPlan {
        method,
        stages,
        worker_count: workers,
    })
}

#[derive(Debug, Clone, Default)]
pub struct ExecOptions {
    pub fit: FitOptions,
    pub ridge: RidgePolicy,
    pub init: Option<ThetaParams>,
    /// Makes every task on this node fail (fault-path testing).
    pub inject_failure: Option<NodePath>,
    /// Writes every produced score block here as a dataset container.
    pub spill_dir: Option<PathBuf>,
}

impl From<&IntegrateOptions> for ExecOptions {
    fn from(o: &IntegrateOptions) -> Self {
        ExecOptions {
            fit: o.fit,
            ridge: o.ridge,
            init: o.init.clone(),
            inject_failure: None,
            spill_dir: None,
        }
    }
}

/// Wall-clock time per executed stage.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ExecutionReport {
    pub stage_seconds: Vec<(Stage, f64)>,
}

impl ExecutionReport {
    pub fn seconds(&self, kind: Stage) -> f64 {
        self.stage_seconds.iter().filter(|(k, _)| *k == kind).map(|(_, s)| s).sum()
    }
}

pub fn execute(
    planned: &TaskPlan,
    tree: &PartitionTree,
    data: &dyn DataSource,
    spec: &ModelSpec,
    opts: &ExecOptions,
) -> Result<MetaEstimate> {
    execute_with_report(planned, tree, data, spec, opts).map(|(e, _)| e)
}

struct State {
    fits: BTreeMap<NodePath, LocalFit>,
    estimates: BTreeMap<NodePath, MetaEstimate>,
    blocks: BTreeMap<(NodePath, EvalPoint), ScoreMatrix>,
    ridge: Vec<RidgeRecord>,
}

impl State {
    fn block(&self, node: &NodePath, at: &EvalPoint) -> Result<&ScoreMatrix> {
        let found = match at {
            EvalPoint::Own => self
                .fits
                .get(node)
                .map(|f| &f.scores)
                .or_else(|| self.blocks.get(&(node.clone(), EvalPoint::Own))),
            _ => self.blocks.get(&(node.clone(), at.clone())),
        };
        found.ok_or_else(|| Error::InvalidArgument(format!("score block for {node} at {at:?} not available")))
    }

    fn theta(&self, node: &NodePath) -> Result<&ThetaParams> {
        self.estimates
            .get(node)
            .map(|e| &e.theta)
            .ok_or_else(|| Error::InvalidArgument(format!("no estimate for {node}")))
    }

    fn record_ridge(&mut self, node: &NodePath, evaluated_at: &NodePath, epsilon: f64) {
        if epsilon > 0.0
            && !self
                .ridge
                .iter()
                .any(|r| &r.node_path == node && &r.evaluated_at == evaluated_at)
        {
            self.ridge.push(RidgeRecord {
                node_path: node.clone(),
                evaluated_at: evaluated_at.clone(),
                epsilon,
            });
        }
    }
}

fn load_block(tree: &PartitionTree, data: &dyn DataSource, node: &NodePath) -> Result<DataBlock> {
    let idx = tree
        .indices(node)
        .ok_or_else(|| Error::InvalidArgument(format!("node {node} is not in the partition")))?;
    data.block(node, idx)
}

enum Output {
    Fit(Box<LocalFit>),
    Scores(ScoreMatrix, f64),
    Estimate(Box<MetaEstimate>, f64),
}

/// Runs the plan stage by stage and also reports per-stage timing.
pub fn execute_with_report(
    planned: &TaskPlan,
    tree: &PartitionTree,
    data: &dyn DataSource,
    spec: &ModelSpec,
    opts: &ExecOptions,
) -> Result<(MetaEstimate, ExecutionReport)> {
    spec.validate()?;
    if data.covariates().ncols() != spec.q {
        return Err(Error::Dimension(format!(
            "dataset has {} covariates, spec expects {}",
            data.covariates().ncols(),
            spec.q
        )));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(planned.worker_count.max(1))
        .build()
        .map_err(|e| Error::InvalidArgument(format!("worker pool: {e}")))?;
    let mut state = State {
        fits: BTreeMap::new(),
        estimates: BTreeMap::new(),
        blocks: BTreeMap::new(),
        ridge: Vec::new(),
    };
    let mut report = ExecutionReport::default();
    let mut score_evaluations = 0;

    for stage in &planned.stages {
        let started = Instant::now();
        let run = |task: &Task| -> Result<Output> {
            if opts.inject_failure.as_ref() == Some(&task.node) {
                return Err(Error::InvalidArgument("injected failure".into()).at(&task.node, stage.kind));
            }
            run_task(stage.kind, planned.method, task, tree, data, spec, opts, &state)
                .map_err(|e| e.at(&task.node, stage.kind))
        };
        let outputs: Vec<Result<Output>> = pool.install(|| stage.tasks.par_iter().map(run).collect());
        report.stage_seconds.push((stage.kind, started.elapsed().as_secs_f64()));

        let mut done = Vec::with_capacity(outputs.len());
        for out in outputs {
            done.push(out?);
        }
        for (task, out) in stage.tasks.iter().zip(done) {
            match out {
                Output::Fit(fit) => {
                    score_evaluations += 1;
                    spill(opts, &task.node, &task.at, &fit.scores)?;
                    state.estimates.insert(task.node.clone(), fit.estimate.clone());
                    state.fits.insert(task.node.clone(), *fit);
                }
                Output::Scores(scores, eps) => {
                    if stage.kind == Stage::ScoreEval {
                        score_evaluations += 1;
                    }
                    let at_node = match &task.at {
                        EvalPoint::Own => task.node.clone(),
                        EvalPoint::At(c) => c.clone(),
                    };
                    state.record_ridge(&task.node, &at_node, eps);
                    spill(opts, &task.node, &task.at, &scores)?;
                    state.blocks.insert((task.node.clone(), task.at.clone()), scores);
                }
                Output::Estimate(est, eps) => {
                    state.record_ridge(&task.node, &task.node, eps);
                    state.estimates.insert(task.node.clone(), *est);
                }
            }
        }
    }

    let root = NodePath::root();
    let mut est = state
        .estimates
        .remove(&root)
        .ok_or_else(|| Error::InvalidArgument("plan produced no root estimate".into()))?;
    est.method = planned.method;
    est.provenance = Provenance {
        ridge: state.ridge,
        leaf_fits: state.fits.len(),
        score_evaluations,
        projections: planned.projections(),
    };
    Ok((est, report))
}

#[allow(clippy::too_many_arguments)]
fn run_task(
    kind: Stage,
    method: Method,
    task: &Task,
    tree: &PartitionTree,
    data: &dyn DataSource,
    spec: &ModelSpec,
    opts: &ExecOptions,
    state: &State,
) -> Result<Output> {
    let node = &task.node;
    match kind {
        Stage::LeafFit => {
            let block = load_block(tree, data, node)?;
            let init = match &opts.init {
                Some(t) => t.clone(),
                None => initial_theta(&block, spec)?,
            };
            Ok(Output::Fit(Box::new(fit_local_mle(&block, spec, &init, &opts.fit)?)))
        }
        Stage::ScoreEval => {
            let EvalPoint::At(c) = &task.at else {
                return Err(Error::InvalidArgument("score evaluation needs an evaluation point".into()));
            };
            let block = load_block(tree, data, node)?;
            let scores = per_observation_scores(&block, state.theta(c)?, spec)?;
            Ok(Output::Scores(scores, 0.0))
        }
        Stage::Project => {
            let children = tree.children(node);
            let blocks = children
                .iter()
                .map(|c| state.block(c, &task.at).cloned())
                .collect::<Result<Vec<_>>>()?;
            let comb = combine(&blocks, &opts.ridge)?;
            let theta_at = match &task.at {
                EvalPoint::Own => state.theta(node)?,
                EvalPoint::At(c) => state.theta(c)?,
            };
            let proj = weighted_scores(&comb.s, &comb.v, &comb.stacked, &theta_at.to_vec(), node)?;
            Ok(Output::Scores(proj, comb.v.epsilon))
        }
        Stage::Reduce => {
            let children = tree.children(node);
            let mut blocks = Vec::with_capacity(children.len());
            let mut thetas = Vec::with_capacity(children.len());
            for c in &children {
                let at = if tree.is_leaf(c) || method == Method::Sequential {
                    EvalPoint::Own
                } else {
                    EvalPoint::At(c.clone())
                };
                blocks.push(state.block(c, &at)?.clone());
                thetas.push(state.theta(c)?.clone());
            }
            let comb = combine(&blocks, &opts.ridge)?;
            let est = meta_estimator(&comb.s, &comb.v, &thetas, node)?;
            Ok(Output::Estimate(Box::new(est), comb.v.epsilon))
        }
    }
}

fn spill(opts: &ExecOptions, node: &NodePath, at: &EvalPoint, scores: &ScoreMatrix) -> Result<()> {
    let Some(dir) = &opts.spill_dir else {
        return Ok(());
    };
    let at_name = match at {
        EvalPoint::Own => "own".to_string(),
        EvalPoint::At(c) => format!("at-{c}"),
    };
    let path = dir.join(format!("scores-{node}-{at_name}.mrri"));
    write_matrix_container(&path, &scores.values)
}

/// Directly runs the depth-0 case (the root is the only leaf).
pub fn fit_root(data: &dyn DataSource, spec: &ModelSpec, opts: &ExecOptions) -> Result<LocalFit> {
    let idx: Vec<usize> = (0..data.domain().len()).collect();
    let block = data.block(&NodePath::root(), &idx)?;
    let init = match &opts.init {
        Some(t) => t.clone(),
        None => initial_theta(&block, spec)?,
    };
    fit_local_mle(&block, spec, &init, &opts.fit).map_err(|e| e.at(&NodePath::root(), Stage::LeafFit))
}

pub const MAGIC: &[u8; 8] = b"MRRIDATA";
pub const FORMAT_VERSION: u32 = 1;
pub const HEADER_LEN: u64 = 40;
const FLAG_ROI: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub version: u32,
    pub n: u64,
    pub s: u64,
    pub q: u32,
    pub d: u32,
    pub flags: u32,
}

impl DatasetHeader {
    pub fn has_roi(&self) -> bool {
        self.flags & FLAG_ROI != 0
    }

    fn payload_len(&self) -> Result<u64> {
        let (n, s, q, d) = (self.n, self.s, self.q as u64, self.d as u64);
        let floats = n
            .checked_mul(s)
            .and_then(|a| a.checked_add(n.checked_mul(q)?))
            .and_then(|a| a.checked_add(s.checked_mul(d)?))
            .and_then(|a| a.checked_mul(8))
            .ok_or_else(|| Error::Format("header sizes overflow".into()))?;
        Ok(floats + if self.has_roi() { 4 * s } else { 0 })
    }

    fn to_bytes(self) -> [u8; HEADER_LEN as usize] {
        let mut b = [0u8; HEADER_LEN as usize];
        b[..8].copy_from_slice(MAGIC);
        b[8..12].copy_from_slice(&self.version.to_le_bytes());
        b[12..20].copy_from_slice(&self.n.to_le_bytes());
        b[20..28].copy_from_slice(&self.s.to_le_bytes());
        b[28..32].copy_from_slice(&self.q.to_le_bytes());
        b[32..36].copy_from_slice(&self.d.to_le_bytes());
        b[36..40].copy_from_slice(&self.flags.to_le_bytes());
        b
    }

    fn parse(b: &[u8]) -> Result<Self> {
        if b.len() < HEADER_LEN as usize {
            return Err(Error::Format("file shorter than the header".into()));
        }
        if &b[..8] != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let u32_at = |o: usize| u32::from_le_bytes(b[o..o + 4].try_into().expect("4 bytes"));
        let u64_at = |o: usize| u64::from_le_bytes(b[o..o + 8].try_into().expect("8 bytes"));
        let version = u32_at(8);
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let flags = u32_at(36);
        if flags & !FLAG_ROI != 0 {
            return Err(Error::Format(format!("unknown flags {flags:#x}")));
        }
        Ok(DatasetHeader {
            version,
            n: u64_at(12),
            s: u64_at(20),
            q: u32_at(28),
            d: u32_at(32),
            flags,
        })
    }
}

fn write_f64s(w: &mut impl Write, values: impl Iterator<Item = f64>) -> Result<()> {
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_f64s(r: &mut impl Read, count: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; count * 8];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect())
}

/// Writes a dataset in the binary container format.
pub fn write_dataset(path: impl AsRef<Path>, data: &Dataset) -> Result<()> {
    let domain = &data.domain;
    let has_roi = domain.locations().iter().any(|l| l.roi.is_some());
    let header = DatasetHeader {
        version: FORMAT_VERSION,
        n: data.y.nrows() as u64,
        s: data.y.ncols() as u64,
        q: data.x.ncols() as u32,
        d: domain.dim() as u32,
        flags: if has_roi { FLAG_ROI } else { 0 },
    };
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&header.to_bytes())?;
    let (n, s, q) = (data.y.nrows(), data.y.ncols(), data.x.ncols());
    write_f64s(&mut w, (0..n).flat_map(|i| (0..s).map(move |j| data.y[(i, j)])))?;
    write_f64s(&mut w, (0..n).flat_map(|i| (0..q).map(move |k| data.x[(i, k)])))?;
    write_f64s(&mut w, domain.locations().iter().flat_map(|l| l.coords.iter().copied()))?;
    if has_roi {
        for l in domain.locations() {
            w.write_all(&l.roi_index().to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn write_matrix_container(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    let header = DatasetHeader {
        version: FORMAT_VERSION,
        n: m.nrows() as u64,
        s: m.ncols() as u64,
        q: 0,
        d: 0,
        flags: 0,
    };
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&header.to_bytes())?;
    write_f64s(&mut w, (0..m.nrows()).flat_map(|i| (0..m.ncols()).map(move |j| m[(i, j)])))?;
    w.flush()?;
    Ok(())
}

/// Reads only the header.
pub fn read_header(path: impl AsRef<Path>) -> Result<DatasetHeader> {
    let mut f = File::open(path)?;
    let mut b = [0u8; HEADER_LEN as usize];
    f.read_exact(&mut b)
        .map_err(|_| Error::Format("file shorter than the header".into()))?;
    DatasetHeader::parse(&b)
}

/// A dataset on disk; outcomes are read per node, covariates and locations
/// are held in memory.
#[derive(Debug, Clone)]
pub struct DatasetFile {
    path: PathBuf,
    header: DatasetHeader,
    x: DMatrix<f64>,
    domain: SpatialDomain,
}

/// Opens a dataset container and validates its size against the header.
pub fn read_dataset(path: impl AsRef<Path>) -> Result<DatasetFile> {
    DatasetFile::open(path)
}

impl DatasetFile {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let header = read_header(&path)?;
        let len = std::fs::metadata(&path)?.len();
        let expected = HEADER_LEN + header.payload_len()?;
        if len < expected {
            return Err(Error::Format(format!("truncated payload: {len} bytes, expected {expected}")));
        }
        if len > expected {
            return Err(Error::Format(format!("trailing bytes: {len} bytes, expected {expected}")));
        }
        if header.d == 0 || header.s == 0 {
            return Err(Error::Format("container holds no locations".into()));
        }
        let (n, s, q, d) = (header.n as usize, header.s as usize, header.q as usize, header.d as usize);
        let mut r = BufReader::new(File::open(&path)?);
        r.seek(SeekFrom::Start(HEADER_LEN + 8 * (n * s) as u64))?;
        let xs = read_f64s(&mut r, n * q)?;
        let coords = read_f64s(&mut r, s * d)?;
        let rois = if header.has_roi() {
            let mut buf = vec![0u8; 4 * s];
            r.read_exact(&mut buf)?;
            Some(
                buf.chunks_exact(4)
                    .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect::<Vec<_>>(),
            )
        } else {
            None
        };
        let locations = (0..s)
            .map(|j| {
                let c = coords[j * d..(j + 1) * d].to_vec();
                match &rois {
                    Some(r) => Location::with_roi(c, r[j]),
                    None => Location::new(c),
                }
            })
            .collect();
        let domain = SpatialDomain::new(locations).map_err(|e| Error::Format(format!("locations: {e}")))?;
        Ok(DatasetFile {
            path,
            header,
            x: DMatrix::from_row_slice(n, q, &xs),
            domain,
        })
    }

    pub fn header(&self) -> &DatasetHeader {
        &self.header
    }

    /// Reads the outcome columns at `indices` for every observation (`N x len`).
    pub fn read_columns(&self, indices: &[usize]) -> Result<DMatrix<f64>> {
        let (n, s) = (self.header.n as usize, self.header.s as usize);
        if let Some(&bad) = indices.iter().find(|&&j| j >= s) {
            return Err(Error::Dimension(format!("location index {bad} out of range")));
        }
        let mut out = DMatrix::zeros(n, indices.len());
        if indices.is_empty() {
            return Ok(out);
        }
        let lo = *indices.iter().min().expect("non-empty");
        let hi = *indices.iter().max().expect("non-empty");
        let span = hi - lo + 1;
        let mut r = BufReader::new(File::open(&self.path)?);
        let mut buf = vec![0u8; span * 8];
        for i in 0..n {
            r.seek(SeekFrom::Start(HEADER_LEN + 8 * (i * s + lo) as u64))?;
            r.read_exact(&mut buf)?;
            for (c, &j) in indices.iter().enumerate() {
                let o = (j - lo) * 8;
                out[(i, c)] = f64::from_le_bytes(buf[o..o + 8].try_into().expect("8 bytes"));
            }
        }
        Ok(out)
    }

    /// Loads the whole dataset into memory.
    pub fn load(&self) -> Result<Dataset> {
        let all: Vec<usize> = (0..self.header.s as usize).collect();
        Dataset::new(self.read_columns(&all)?, self.x.clone(), self.domain.clone())
    }
}

impl DataSource for DatasetFile {
    fn n_obs(&self) -> usize {
        self.header.n as usize
    }

    fn domain(&self) -> &SpatialDomain {
        &self.domain
    }

    fn covariates(&self) -> &DMatrix<f64> {
        &self.x
    }

    fn block(&self, path: &NodePath, indices: &[usize]) -> Result<DataBlock> {
        let y = self.read_columns(indices)?;
        DataBlock::new(&y, &self.x, self.domain.subset(indices), path.clone())
    }
}
