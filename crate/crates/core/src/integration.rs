//! Combination of estimating functions across partition levels.
//!
//! Conventions: variability `V`, sensitivity `S` and Godambe information `J`
//! are sums over observations, so `J^{-1}` estimates the covariance of the
//! estimate directly. Sensitivities are Bartlett estimates `sum psi psi^T`
//! unless supplied otherwise.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::domain::{NodePath, PartitionTree};
use crate::error::{Error, Result};
use crate::likelihood::{score, sensitivity_block, DataBlock, DataSource, FitOptions, ScoreMatrix};
use crate::linalg::{column_sums_invariant, max_abs, outer_sum, symmetrize_lower, SpdFactor};
use crate::model::{ModelSpec, ThetaParams};
use crate::runtime::{execute, plan};

/// Child score blocks side by side, `N x (p K)`.
#[derive(Debug, Clone)]
pub struct StackedScores {
    pub values: DMatrix<f64>,
    pub child_paths: Vec<NodePath>,
    pub theta_at: Vec<Vec<f64>>,
}

impl StackedScores {
    pub fn from_children(children: &[ScoreMatrix]) -> Result<Self> {
        let first = children
            .first()
            .ok_or_else(|| Error::InvalidArgument("no child score blocks".into()))?;
        let (n, p) = (first.n_obs(), first.p());
        for c in children {
            if c.n_obs() != n || c.p() != p {
                return Err(Error::Dimension(format!(
                    "child {} has scores {}x{}, expected {n}x{p}",
                    c.node_path,
                    c.n_obs(),
                    c.p()
                )));
            }
        }
        let mut values = DMatrix::zeros(n, p * children.len());
        for (k, c) in children.iter().enumerate() {
            values.view_mut((0, k * p), (n, p)).copy_from(&c.values);
        }
        Ok(StackedScores {
            values,
            child_paths: children.iter().map(|c| c.node_path.clone()).collect(),
            theta_at: children.iter().map(|c| c.theta_at.clone()).collect(),
        })
    }

    pub fn n_children(&self) -> usize {
        self.child_paths.len()
    }

    pub fn p(&self) -> usize {
        self.values.ncols() / self.n_children().max(1)
    }

    pub fn n_obs(&self) -> usize {
        self.values.nrows()
    }
}

/// Diagonal ridge escalation for the variability matrix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RidgePolicy {
    /// Largest relative ridge `epsilon` tried (ridge = `epsilon * tr(V) / dim`).
    pub max_epsilon: f64,
    /// Factorizations whose squared-pivot ratio falls below this are treated as singular.
    pub min_pivot_ratio: f64,
}

impl Default for RidgePolicy {
    fn default() -> Self {
        RidgePolicy {
            max_epsilon: 1e-6,
            min_pivot_ratio: 1e-13,
        }
    }
}

impl RidgePolicy {
    fn levels(&self) -> Vec<f64> {
        let mut out = Vec::new();
        let mut eps = 1e-10;
        while eps <= self.max_epsilon * (1.0 + 1e-9) {
            out.push(eps);
            eps *= 100.0;
        }
        out
    }
}

/// Variability matrix together with the factorization used for solves.
#[derive(Debug, Clone)]
pub struct Variability {
    /// `sum_i row_i row_i^T`, before any ridge.
    pub matrix: DMatrix<f64>,
    /// Relative ridge applied (0 when none).
    pub epsilon: f64,
    factor: SpdFactor,
}

impl Variability {
    pub fn from_matrix(matrix: DMatrix<f64>, policy: &RidgePolicy) -> Result<Self> {
        let dim = matrix.nrows();
        if dim == 0 || matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::SingularVariability { max_ridge: 0.0 });
        }
        if let Some(f) = SpdFactor::exact(matrix.clone()) {
            if f.pivot_ratio() >= policy.min_pivot_ratio {
                return Ok(Variability {
                    matrix,
                    epsilon: 0.0,
                    factor: f,
                });
            }
        }
        let scale = matrix.trace() / dim as f64;
        if scale <= 0.0 {
            return Err(Error::SingularVariability { max_ridge: 0.0 });
        }
        for eps in policy.levels() {
            let mut m = matrix.clone();
            for i in 0..dim {
                m[(i, i)] += eps * scale;
            }
            if let Some(f) = SpdFactor::exact(m) {
                if f.pivot_ratio() >= policy.min_pivot_ratio {
                    return Ok(Variability {
                        matrix,
                        epsilon: eps,
                        factor: f,
                    });
                }
            }
        }
        Err(Error::SingularVariability {
            max_ridge: policy.max_epsilon,
        })
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    /// `V^{-1} b` with the (possibly ridged) factorization.
    pub fn solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.factor.solve_mat(b)
    }

    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        self.factor.solve_vec(b)
    }
}

/// Variability of stacked scores with the ridge policy applied.
pub fn variability(stacked: &StackedScores, policy: &RidgePolicy) -> Result<Variability> {
    Variability::from_matrix(outer_sum(&stacked.values), policy)
}

/// `[S_1, ..., S_K]`, each block the Bartlett sensitivity of one child.
pub fn stacked_sensitivity(children: &[ScoreMatrix]) -> DMatrix<f64> {
    let p = children.first().map_or(0, |c| c.p());
    let mut s = DMatrix::zeros(p, p * children.len());
    for (k, c) in children.iter().enumerate() {
        s.view_mut((0, k * p), (p, p)).copy_from(&sensitivity_block(c));
    }
    s
}

/// Sensitivity `-dPsi/dtheta` of one block by central differences of the
/// analytic score, symmetrized.
pub fn jacobian_sensitivity(block: &DataBlock, theta: &ThetaParams, spec: &ModelSpec) -> Result<DMatrix<f64>> {
    let x = theta.to_vec();
    let p = x.len();
    let mut g = DMatrix::zeros(p, p);
    for j in 0..p {
        let h = 1e-5 * x[j].abs().max(1.0);
        let mut up = x.clone();
        let mut dn = x.clone();
        up[j] += h;
        dn[j] -= h;
        let su = score(block, &ThetaParams::from_slice(spec, &up)?, spec)?;
        let sd = score(block, &ThetaParams::from_slice(spec, &dn)?, spec)?;
        g.set_column(j, &((su - sd) / (2.0 * h)));
    }
    let s = -(&g + g.transpose()) * 0.5;
    Ok(s)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    LeafMle,
    Meta,
    Recursive,
    Sequential,
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::LeafMle => "leaf-mle",
            Method::Meta => "meta",
            Method::Recursive => "recursive",
            Method::Sequential => "sequential",
        })
    }
}

/// A ridge applied while combining children of `node_path`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RidgeRecord {
    pub node_path: NodePath,
    /// Node whose estimate the child scores were evaluated at.
    pub evaluated_at: NodePath,
    pub epsilon: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub ridge: Vec<RidgeRecord>,
    pub leaf_fits: usize,
    /// Leaf score-matrix evaluations, including those at the leaf estimates.
    pub score_evaluations: usize,
    /// Projections of stacked child scores to a parent block.
    pub projections: usize,
}

/// An estimate with its Godambe information.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaEstimate {
    pub theta: ThetaParams,
    /// Sum-scale information; `J^{-1}` estimates the covariance of `theta`.
    pub j: DMatrix<f64>,
    pub node_path: NodePath,
    pub method: Method,
    pub provenance: Provenance,
}

impl MetaEstimate {
    pub fn covariance(&self) -> Result<DMatrix<f64>> {
        SpdFactor::exact(self.j.clone())
            .map(|f| f.inverse())
            .ok_or_else(|| Error::Conditioning(format!("information at {} is not positive definite", self.node_path)))
    }

    pub fn std_errors(&self) -> Result<Vec<f64>> {
        let c = self.covariance()?;
        Ok((0..c.nrows()).map(|i| c[(i, i)].sqrt()).collect())
    }

    pub fn to_record(&self, spec: &ModelSpec) -> Result<EstimateRecord> {
        let theta = self.theta.to_vec();
        let names = spec.param_names();
        if names.len() != theta.len() {
            return Err(Error::Dimension("estimate does not match the spec layout".into()));
        }
        let se = self.std_errors().ok();
        Ok(EstimateRecord {
            node_path: self.node_path.clone(),
            method: self.method,
            spec: spec.clone(),
            components: names
                .into_iter()
                .zip(&theta)
                .enumerate()
                .map(|(k, (name, &value))| NamedValue {
                    name,
                    value,
                    std_error: se.as_ref().map(|s| s[k]),
                })
                .collect(),
            theta,
            j: (0..self.j.nrows()).map(|r| self.j.row(r).iter().copied().collect()).collect(),
            provenance: self.provenance.clone(),
        })
    }

    pub fn from_record(rec: &EstimateRecord) -> Result<Self> {
        let p = rec.theta.len();
        if rec.j.len() != p || rec.j.iter().any(|r| r.len() != p) {
            return Err(Error::Dimension("J does not match theta".into()));
        }
        Ok(MetaEstimate {
            theta: ThetaParams::from_slice(&rec.spec, &rec.theta)?,
            j: DMatrix::from_fn(p, p, |r, c| rec.j[r][c]),
            node_path: rec.node_path.clone(),
            method: rec.method,
            provenance: rec.provenance.clone(),
        })
    }

    pub fn to_json(&self, spec: &ModelSpec) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_record(spec)?)?)
    }

    pub fn from_json(s: &str) -> Result<(Self, ModelSpec)> {
        let rec: EstimateRecord = serde_json::from_str(s)?;
        Ok((Self::from_record(&rec)?, rec.spec))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedValue {
    pub name: String,
    pub value: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub std_error: Option<f64>,
}

/// Serialized form of a [`MetaEstimate`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateRecord {
    pub node_path: NodePath,
    pub method: Method,
    pub spec: ModelSpec,
    pub components: Vec<NamedValue>,
    pub theta: Vec<f64>,
    /// Row-major.
    #[serde(rename = "J")]
    pub j: Vec<Vec<f64>>,
    pub provenance: Provenance,
}

/// Closed-form combination `J^{-1} S V^{-1} T` with `T_k = S_k theta_k`.
pub fn meta_estimator(
    s: &DMatrix<f64>,
    v: &Variability,
    child_estimates: &[ThetaParams],
    node_path: &NodePath,
) -> Result<MetaEstimate> {
    let p = s.nrows();
    let k = child_estimates.len();
    if k == 0 || s.ncols() != p * k || v.dim() != p * k {
        return Err(Error::Dimension(format!(
            "S is {}x{}, V is {}x{}, {} child estimates",
            s.nrows(),
            s.ncols(),
            v.dim(),
            v.dim(),
            k
        )));
    }
    let mut t = DVector::zeros(p * k);
    for (c, th) in child_estimates.iter().enumerate() {
        if th.len() != p {
            return Err(Error::Dimension(format!("child estimate {c} has length {}", th.len())));
        }
        let sk = s.view((0, c * p), (p, p));
        t.rows_mut(c * p, p).copy_from(&(sk.transpose() * th.to_vector()));
    }
    let w = v.solve(&s.transpose());
    let mut j = s * &w;
    symmetrize_lower(&mut j);
    let rhs = w.transpose() * t;
    let jf = SpdFactor::exact(j.clone())
        .ok_or_else(|| Error::Conditioning(format!("combined information at {node_path} is not positive definite")))?;
    let theta = jf.solve_vec(&rhs);
    if theta.iter().any(|v| !v.is_finite()) {
        return Err(Error::Conditioning(format!("non-finite combined estimate at {node_path}")));
    }
    let layout = &child_estimates[0];
    let q1 = layout.beta.len();
    let q2 = layout.gamma.len();
    let tv = theta.as_slice();
    Ok(MetaEstimate {
        theta: ThetaParams::new(tv[..q1].to_vec(), tv[q1..q1 + q2].to_vec(), tv[q1 + q2]),
        j,
        node_path: node_path.clone(),
        method: Method::Meta,
        provenance: Provenance::default(),
    })
}

/// Projects stacked scores to width `p`: `psi~_i = -S V^{-1} psi_i`.
pub fn weighted_scores(
    s: &DMatrix<f64>,
    v: &Variability,
    stacked: &StackedScores,
    theta_at: &[f64],
    node_path: &NodePath,
) -> Result<ScoreMatrix> {
    if stacked.values.ncols() != s.ncols() || v.dim() != s.ncols() {
        return Err(Error::Dimension("stacked scores do not match S and V".into()));
    }
    let w = v.solve(&s.transpose());
    let values = -(&stacked.values * w);
    Ok(ScoreMatrix {
        values,
        theta_at: theta_at.to_vec(),
        node_path: node_path.clone(),
    })
}

/// S and V assembled from one node's children.
pub(crate) struct Combined {
    pub s: DMatrix<f64>,
    pub v: Variability,
    pub stacked: StackedScores,
}

pub(crate) fn combine(blocks: &[ScoreMatrix], ridge: &RidgePolicy) -> Result<Combined> {
    let stacked = StackedScores::from_children(blocks)?;
    let v = variability(&stacked, ridge)?;
    Ok(Combined {
        s: stacked_sensitivity(blocks),
        v,
        stacked,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct IntegrateOptions {
    pub fit: FitOptions,
    pub ridge: RidgePolicy,
    /// Starting point for every leaf fit; method of moments when `None`.
    pub init: Option<ThetaParams>,
    pub workers: usize,
}

impl Default for IntegrateOptions {
    fn default() -> Self {
        IntegrateOptions {
            fit: FitOptions::default(),
            ridge: RidgePolicy::default(),
            init: None,
            workers: 1,
        }
    }
}

/// Recursive integration: every descent re-evaluates the leaf scores at the
/// newly combined estimate and re-projects them through the subtree.
pub fn recursive_integrate(
    tree: &PartitionTree,
    data: &dyn DataSource,
    spec: &ModelSpec,
    opts: &IntegrateOptions,
) -> Result<MetaEstimate> {
    let p = plan(tree, Method::Recursive, opts.workers)?;
    execute(&p, tree, data, spec, &opts.into())
}

/// Sequential integration: weights fixed at the estimates from each child's
/// own subtree, one upward pass.
pub fn sequential_integrate(
    tree: &PartitionTree,
    data: &dyn DataSource,
    spec: &ModelSpec,
    opts: &IntegrateOptions,
) -> Result<MetaEstimate> {
    let p = plan(tree, Method::Sequential, opts.workers)?;
    execute(&p, tree, data, spec, &opts.into())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GmmOptions {
    pub tol: f64,
    pub max_iter: usize,
    /// Relative finite-difference step for the Jacobian of the stacked score sums.
    pub fd_step: f64,
}

impl Default for GmmOptions {
    fn default() -> Self {
        GmmOptions {
            tol: 1e-10,
            max_iter: 100,
            fd_step: 1e-5,
        }
    }
}

/// Gauss-Newton minimization of `Psi(theta)^T V^{-1} Psi(theta)` with `V` held
/// fixed. `producer` returns the stacked child scores at a common `theta`.
pub fn gmm_oracle<F>(
    producer: F,
    v: &Variability,
    init: &ThetaParams,
    spec: &ModelSpec,
    opts: &GmmOptions,
) -> Result<ThetaParams>
where
    F: Fn(&ThetaParams) -> Result<StackedScores>,
{
    let psi = |x: &[f64]| -> Result<DVector<f64>> {
        let st = producer(&ThetaParams::from_slice(spec, x)?)?;
        if st.values.ncols() != v.dim() {
            return Err(Error::Dimension("stacked scores do not match V".into()));
        }
        Ok(column_sums_invariant(&st.values))
    };
    let objective = |g: &DVector<f64>| g.dot(&v.solve_vec(g));

    let mut x = init.to_vec();
    let p = x.len();
    let mut g = psi(&x)?;
    let mut q = objective(&g);
    for iter in 0..opts.max_iter {
        let mut jac = DMatrix::zeros(v.dim(), p);
        for j in 0..p {
            let h = opts.fd_step * x[j].abs().max(1.0);
            let mut up = x.clone();
            let mut dn = x.clone();
            up[j] += h;
            dn[j] -= h;
            jac.set_column(j, &((psi(&up)? - psi(&dn)?) / (2.0 * h)));
        }
        let vj = v.solve(&jac);
        let mut normal = jac.transpose() * &vj;
        symmetrize_lower(&mut normal);
        let grad = vj.transpose() * &g;
        let step = SpdFactor::new(normal)
            .map_err(|_| Error::Conditioning("GMM normal matrix is singular".into()))?
            .solve_vec(&grad);
        let mut t = 1.0;
        let mut moved = false;
        for _ in 0..40 {
            let trial: Vec<f64> = x.iter().zip(step.iter()).map(|(a, d)| a - t * d).collect();
            if let Ok(gt) = psi(&trial) {
                let qt = objective(&gt);
                if qt <= q {
                    x = trial;
                    g = gt;
                    q = qt;
                    moved = true;
                    break;
                }
            }
            t *= 0.5;
        }
        let size = t * max_abs(step.as_slice());
        if !moved || size <= opts.tol * (1.0 + max_abs(&x)) {
            return ThetaParams::from_slice(spec, &x);
        }
        if iter + 1 == opts.max_iter {
            break;
        }
    }
    Err(Error::NonConvergence {
        iterations: opts.max_iter,
        grad_norm: q,
        best: x,
    })
}

/// GMM objective `Psi^T V^{-1} Psi` for column sums `psi_sums`.
pub fn gmm_objective(psi_sums: &DVector<f64>, v: &Variability) -> f64 {
    psi_sums.dot(&v.solve_vec(psi_sums))
}
