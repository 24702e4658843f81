//! Local Gaussian likelihood on one partition node.
//!
//! Observations are independent across rows. Row `i` is an `S_block`-variate
//! Gaussian with mean `mu(x_i)` at every location and covariance `C(x_i)`.
//! When the kernel does not depend on the covariates, one factorization
//! serves every row; otherwise factorizations are shared between rows with
//! bit-identical covariates.
//!
//! Per-row contributions are computed independently of the row position and
//! summed with an order-invariant summation, so permuting observations leaves
//! the log-likelihood, the score and the fitted estimate unchanged exactly.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::domain::{Location, NodePath, SpatialDomain};
use crate::error::{Error, Result};
use crate::integration::{MetaEstimate, Method, Provenance};
use crate::linalg::{column_sums_invariant, order_invariant_sum, outer_sum, SpdFactor};
use crate::model::{
    build_cov_matrix, cov_with_derivatives, mean_gradient, mean_value, CovKind, DerivBasis,
    MeanKind, ModelSpec, ThetaParams,
};
use crate::optim::{bfgs, BfgsOptions};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Outcomes and covariates of one partition node.
#[derive(Debug)]
pub struct DataBlock {
    /// Observations as columns: `S_block x N`.
    obs: DMatrix<f64>,
    /// Covariates as columns: `q x N`.
    cov: DMatrix<f64>,
    locations: Vec<Location>,
    path: NodePath,
    groups: OnceLock<Vec<Vec<usize>>>,
}

impl Clone for DataBlock {
    fn clone(&self) -> Self {
        DataBlock {
            obs: self.obs.clone(),
            cov: self.cov.clone(),
            locations: self.locations.clone(),
            path: self.path.clone(),
            groups: OnceLock::new(),
        }
    }
}

impl DataBlock {
    /// `y` is `N x S_block`, `x` is `N x q`.
    pub fn new(y: &DMatrix<f64>, x: &DMatrix<f64>, locations: Vec<Location>, path: NodePath) -> Result<Self> {
        if y.nrows() != x.nrows() {
            return Err(Error::Dimension(format!(
                "Y has {} rows, X has {}",
                y.nrows(),
                x.nrows()
            )));
        }
        if y.ncols() != locations.len() {
            return Err(Error::Dimension(format!(
                "Y has {} columns for {} locations",
                y.ncols(),
                locations.len()
            )));
        }
        Ok(Self::from_columns(y.transpose(), x.transpose(), locations, path))
    }

    /// Builds from column-per-observation storage (`S x N` and `q x N`).
    pub fn from_columns(obs: DMatrix<f64>, cov: DMatrix<f64>, locations: Vec<Location>, path: NodePath) -> Self {
        DataBlock {
            obs,
            cov,
            locations,
            path,
            groups: OnceLock::new(),
        }
    }

    pub fn n_obs(&self) -> usize {
        self.obs.ncols()
    }

    pub fn n_locations(&self) -> usize {
        self.obs.nrows()
    }

    pub fn q(&self) -> usize {
        self.cov.nrows()
    }

    pub fn locations(&self) -> &[Location] {
        &self.locations
    }

    pub fn path(&self) -> &NodePath {
        &self.path
    }

    /// Outcomes as an `N x S_block` matrix.
    pub fn y(&self) -> DMatrix<f64> {
        self.obs.transpose()
    }

    /// Covariates as an `N x q` matrix.
    pub fn x(&self) -> DMatrix<f64> {
        self.cov.transpose()
    }

    pub fn x_row(&self, i: usize) -> &[f64] {
        let q = self.cov.nrows();
        &self.cov.as_slice()[i * q..(i + 1) * q]
    }

    pub fn y_row(&self, i: usize) -> &[f64] {
        let s = self.obs.nrows();
        &self.obs.as_slice()[i * s..(i + 1) * s]
    }

    /// Rows grouped by identical covariates (bitwise), in order of first key.
    fn covariate_groups(&self) -> &[Vec<usize>] {
        self.groups.get_or_init(|| {
            let mut map: BTreeMap<Vec<u64>, Vec<usize>> = BTreeMap::new();
            for i in 0..self.n_obs() {
                let key = self.x_row(i).iter().map(|v| (v + 0.0).to_bits()).collect();
                map.entry(key).or_default().push(i);
            }
            map.into_values().collect()
        })
    }

    fn check(&self, spec: &ModelSpec, theta: &ThetaParams) -> Result<()> {
        theta.check(spec)?;
        if self.q() != spec.q {
            return Err(Error::Dimension(format!(
                "block has {} covariates, spec expects {}",
                self.q(),
                spec.q
            )));
        }
        if self.n_obs() == 0 || self.n_locations() == 0 {
            return Err(Error::InvalidArgument(format!("block {} is empty", self.path)));
        }
        Ok(())
    }
}

/// Read access to a full dataset, one partition node at a time.
pub trait DataSource: Sync {
    fn n_obs(&self) -> usize;
    fn domain(&self) -> &SpatialDomain;
    /// Covariates, `N x q`.
    fn covariates(&self) -> &DMatrix<f64>;
    /// Outcomes at the given location indices for every observation.
    fn block(&self, path: &NodePath, indices: &[usize]) -> Result<DataBlock>;
}

/// Full-domain data held in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `N x S`.
    pub y: DMatrix<f64>,
    /// `N x q`.
    pub x: DMatrix<f64>,
    pub domain: SpatialDomain,
}

impl Dataset {
    pub fn new(y: DMatrix<f64>, x: DMatrix<f64>, domain: SpatialDomain) -> Result<Self> {
        if y.nrows() != x.nrows() || y.ncols() != domain.len() {
            return Err(Error::Dimension(format!(
                "Y is {}x{}, X has {} rows, domain has {} locations",
                y.nrows(),
                y.ncols(),
                x.nrows(),
                domain.len()
            )));
        }
        Ok(Dataset { y, x, domain })
    }

    /// Keeps the observations in `rows` (in that order).
    pub fn select_rows(&self, rows: &[usize]) -> Dataset {
        Dataset {
            y: self.y.select_rows(rows.iter()),
            x: self.x.select_rows(rows.iter()),
            domain: self.domain.clone(),
        }
    }
}

impl DataSource for Dataset {
    fn n_obs(&self) -> usize {
        self.y.nrows()
    }

    fn domain(&self) -> &SpatialDomain {
        &self.domain
    }

    fn covariates(&self) -> &DMatrix<f64> {
        &self.x
    }

    fn block(&self, path: &NodePath, indices: &[usize]) -> Result<DataBlock> {
        if let Some(&bad) = indices.iter().find(|&&j| j >= self.domain.len()) {
            return Err(Error::Dimension(format!("location index {bad} out of range")));
        }
        let n = self.y.nrows();
        let obs = DMatrix::from_fn(indices.len(), n, |r, i| self.y[(i, indices[r])]);
        Ok(DataBlock::from_columns(
            obs,
            self.x.transpose(),
            self.domain.subset(indices),
            path.clone(),
        ))
    }
}

/// Per-observation score contributions `psi_i(theta)` of one block.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoreMatrix {
    /// `N x p`; row `i` is observation `i`'s score.
    pub values: DMatrix<f64>,
    pub theta_at: Vec<f64>,
    pub node_path: NodePath,
}

impl ScoreMatrix {
    pub fn n_obs(&self) -> usize {
        self.values.nrows()
    }

    pub fn p(&self) -> usize {
        self.values.ncols()
    }

    pub fn column_sums(&self) -> DVector<f64> {
        column_sums_invariant(&self.values)
    }
}

struct Evaluation {
    loglik: f64,
    scores: Option<DMatrix<f64>>,
}

fn evaluate(block: &DataBlock, theta: &ThetaParams, spec: &ModelSpec, with_scores: bool) -> Result<Evaluation> {
    block.check(spec, theta)?;
    let n = block.n_obs();
    let s = block.n_locations();
    let p = spec.p();
    let q1 = spec.q1();
    let mut ll = vec![0.0; n];
    let mut scores = with_scores.then(|| DMatrix::zeros(n, p));

    let shared = spec.cov_kind == CovKind::StationaryGaussian;
    let all_rows: Vec<usize>;
    let groups: &[Vec<usize>] = if shared {
        all_rows = (0..n).collect();
        std::slice::from_ref(&all_rows)
    } else {
        block.covariate_groups()
    };

    let mut resid = DVector::zeros(s);
    for rows in groups {
        let x_rep = block.x_row(rows[0]);
        let (factor, derivs) = if with_scores {
            let cw = cov_with_derivatives(block.locations(), x_rep, theta, spec)?;
            let f = SpdFactor::new(cw.cov)?;
            (f, Some((cw.bases, cw.params)))
        } else {
            let c = build_cov_matrix(block.locations(), x_rep, theta, spec)?;
            (SpdFactor::new(c)?, None)
        };
        let log_det = factor.log_det();

        // tr(C^{-1} B) for every derivative basis
        let traces: Option<Vec<f64>> = derivs.as_ref().map(|(bases, _)| {
            let inv = factor.inverse();
            bases
                .iter()
                .map(|b| match b {
                    DerivBasis::Dense(m) => inv.component_mul(m).sum(),
                    DerivBasis::Signal(v) => s as f64 - v * inv.trace(),
                    DerivBasis::Identity(v) => v * inv.trace(),
                    DerivBasis::Zero => 0.0,
                })
                .collect()
        });

        for &i in rows {
            let xi = block.x_row(i);
            let mu = mean_value(spec, xi, &theta.beta)?;
            for (r, y) in resid.iter_mut().zip(block.y_row(i)) {
                *r = y - mu;
            }
            let alpha = factor.solve_vec(&resid);
            let quad = resid.dot(&alpha);
            ll[i] = -0.5 * (s as f64 * LN_2PI + log_det + quad);

            if let (Some(sc), Some((bases, params)), Some(tr)) = (scores.as_mut(), derivs.as_ref(), traces.as_ref()) {
                let a_sum = alpha.sum();
                for (k, g) in mean_gradient(spec, xi).into_iter().enumerate() {
                    sc[(i, k)] = g * a_sum;
                }
                let quads: Vec<f64> = bases
                    .iter()
                    .map(|b| match b {
                        DerivBasis::Dense(m) => alpha.dot(&(m * &alpha)),
                        DerivBasis::Signal(v) => quad - v * alpha.dot(&alpha),
                        DerivBasis::Identity(v) => v * alpha.dot(&alpha),
                        DerivBasis::Zero => 0.0,
                    })
                    .collect();
                for &(k, b, coef) in params {
                    sc[(i, k)] = 0.5 * coef * (quads[b] - tr[b]);
                }
            }
        }
    }
    debug_assert!(q1 <= p);
    Ok(Evaluation {
        loglik: order_invariant_sum(&mut ll),
        scores,
    })
}

/// Log-likelihood of the block's data.
pub fn log_likelihood(block: &DataBlock, theta: &ThetaParams, spec: &ModelSpec) -> Result<f64> {
    Ok(evaluate(block, theta, spec, false)?.loglik)
}

/// Per-observation scores; their column sums are [`score`].
pub fn per_observation_scores(block: &DataBlock, theta: &ThetaParams, spec: &ModelSpec) -> Result<ScoreMatrix> {
    let ev = evaluate(block, theta, spec, true)?;
    Ok(ScoreMatrix {
        values: ev.scores.expect("scores requested"),
        theta_at: theta.to_vec(),
        node_path: block.path().clone(),
    })
}

/// Analytic gradient of [`log_likelihood`].
pub fn score(block: &DataBlock, theta: &ThetaParams, spec: &ModelSpec) -> Result<DVector<f64>> {
    Ok(per_observation_scores(block, theta, spec)?.column_sums())
}

/// Bartlett estimate of the block sensitivity, `sum_i psi_i psi_i^T`.
pub fn sensitivity_block(scores: &ScoreMatrix) -> DMatrix<f64> {
    outer_sum(&scores.values)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    /// Scaled gradient tolerance: stop when `|grad|_inf <= tol * max(1, |loglik|)`.
    pub grad_tol: f64,
    pub step_tol: f64,
    pub max_iter: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            grad_tol: 1e-6,
            step_tol: 1e-9,
            max_iter: 500,
        }
    }
}

/// Result of a leaf maximum-likelihood fit.
#[derive(Debug, Clone)]
pub struct LocalFit {
    pub estimate: MetaEstimate,
    /// Per-observation scores at the estimate.
    pub scores: ScoreMatrix,
    pub loglik: f64,
    pub iterations: usize,
    pub evaluations: usize,
}

/// Largest magnitude any unconstrained parameter may reach.
const PARAM_BOUND: f64 = 30.0;

/// Maximizes the block log-likelihood with BFGS on the analytic score.
///
/// The starting inverse Hessian is the inverse outer-product (BHHH) matrix at
/// the initial point.
pub fn fit_local_mle(block: &DataBlock, spec: &ModelSpec, init: &ThetaParams, opts: &FitOptions) -> Result<LocalFit> {
    init.check(spec)?;
    let opt = BfgsOptions {
        grad_tol: opts.grad_tol,
        step_tol: opts.step_tol,
        max_iter: opts.max_iter,
        max_step: 2.0,
        bound: PARAM_BOUND,
        refresh_each_iter: false,
    };
    let eval = |x: &DVector<f64>| -> Result<(f64, DVector<f64>, DMatrix<f64>)> {
        let th = ThetaParams::from_vector(spec, x)?;
        let ev = evaluate(block, &th, spec, true)?;
        let sc = ev.scores.expect("scores requested");
        let g = -column_sums_invariant(&sc);
        Ok((-ev.loglik, g, sc))
    };
    let bhhh = |_: &DVector<f64>, sc: &DMatrix<f64>| -> Option<DMatrix<f64>> {
        let info = invariant_outer_sum(sc);
        SpdFactor::exact(info).map(|f| f.inverse())
    };
    let min = bfgs(init.to_vector(), eval, bhhh, opt)?;

    let theta = ThetaParams::from_vector(spec, &min.x)?;
    check_interior(spec, &theta)?;
    let scores = ScoreMatrix {
        values: min.aux,
        theta_at: theta.to_vec(),
        node_path: block.path().clone(),
    };
    let j = sensitivity_block(&scores);
    Ok(LocalFit {
        estimate: MetaEstimate {
            theta,
            j,
            node_path: block.path().clone(),
            method: Method::LeafMle,
            provenance: Provenance {
                leaf_fits: 1,
                ..Provenance::default()
            },
        },
        scores,
        loglik: -min.f,
        iterations: min.iterations,
        evaluations: min.evaluations,
    })
}

/// Outer-product sum over rows taken in a canonical (sorted) order.
fn invariant_outer_sum(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut order: Vec<usize> = (0..m.nrows()).collect();
    order.sort_by(|&a, &b| {
        for j in 0..m.ncols() {
            let o = m[(a, j)].total_cmp(&m[(b, j)]);
            if o.is_ne() {
                return o;
            }
        }
        std::cmp::Ordering::Equal
    });
    let sorted = DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(order[i], j)]);
    outer_sum(&sorted)
}

/// Rejects estimates whose variance components collapsed to the boundary.
fn check_interior(spec: &ModelSpec, theta: &ThetaParams) -> Result<()> {
    const LOG_VAR_FLOOR: f64 = -20.0;
    if theta.log_sigma2 < LOG_VAR_FLOOR {
        return Err(Error::Boundary(format!(
            "log sigma2 = {:.3} (nugget collapsed)",
            theta.log_sigma2
        )));
    }
    let n_tau = match spec.cov_kind {
        CovKind::StationaryGaussian => 1,
        CovKind::NonstationaryPs => spec.n_tau(),
    };
    for (k, v) in theta.gamma[..n_tau].iter().enumerate() {
        if *v < LOG_VAR_FLOOR {
            return Err(Error::Boundary(format!("log tau2 component {k} = {v:.3}")));
        }
    }
    Ok(())
}

/// Method-of-moments starting point.
///
/// Beta by least squares on the row means (or the grand mean), 80/20 split of
/// the residual variance between the spatial variance and the nugget, range
/// from the median pairwise squared distance, ROI coefficients zero except
/// the intercept.
pub fn initial_theta(block: &DataBlock, spec: &ModelSpec) -> Result<ThetaParams> {
    let n = block.n_obs();
    let s = block.n_locations();
    if n == 0 || s == 0 {
        return Err(Error::InvalidArgument("empty block".into()));
    }
    let row_means: Vec<f64> = (0..n).map(|i| block.y_row(i).iter().sum::<f64>() / s as f64).collect();
    let beta = match spec.mean_kind {
        MeanKind::ConstantIntercept => vec![row_means.iter().sum::<f64>() / n as f64],
        MeanKind::LinearInX => {
            let x = block.x();
            let ym = DVector::from_vec(row_means.clone());
            let xtx = x.tr_mul(&x);
            let xty = x.tr_mul(&ym);
            match xtx.clone().cholesky() {
                Some(c) => c.solve(&xty).as_slice().to_vec(),
                None => xtx
                    .svd(true, true)
                    .solve(&xty, 1e-12)
                    .map_err(|e| Error::Conditioning(e.to_string()))?
                    .as_slice()
                    .to_vec(),
            }
        }
    };
    let mut ss = 0.0;
    for i in 0..n {
        let mu = mean_value(spec, block.x_row(i), &beta)?;
        ss += block.y_row(i).iter().map(|y| (y - mu) * (y - mu)).sum::<f64>();
    }
    let var = (ss / (n * s) as f64).max(1e-12);
    let log_tau2 = (0.8 * var).ln();
    let log_sigma2 = (0.2 * var).ln();

    let mut d2: Vec<f64> = Vec::new();
    let locs = block.locations();
    for a in 0..s {
        for b in 0..a {
            if locs[a].roi_index() == locs[b].roi_index() {
                d2.push(locs[a].sq_dist(&locs[b]));
            }
        }
    }
    d2.sort_by(|a, b| a.total_cmp(b));
    let median = if d2.is_empty() { 1.0 } else { d2[d2.len() / 2].max(1e-8) };

    let gamma = match spec.cov_kind {
        CovKind::StationaryGaussian => vec![log_tau2, (1.0 / median).ln()],
        CovKind::NonstationaryPs => {
            let mut g = vec![log_tau2; spec.n_tau()];
            let x = block.x();
            let intercept = (0..spec.q).find(|&k| x.column(k).iter().all(|&v| v == 1.0));
            for _ in 0..spec.roi_count {
                let mut coef = vec![0.0; spec.q];
                if let Some(k) = intercept {
                    coef[k] = median.ln();
                }
                g.extend(coef);
            }
            g
        }
    };
    let start = ThetaParams::new(beta, gamma, log_sigma2);
    profile_range(block, spec, start)
}

/// Coarse search over a common shift of the log range, keeping the best
/// starting point by log-likelihood.
fn profile_range(block: &DataBlock, spec: &ModelSpec, start: ThetaParams) -> Result<ThetaParams> {
    let x = block.x();
    let intercept = (0..spec.q).find(|&k| x.column(k).iter().all(|&v| v == 1.0));
    let shifted = |shift: f64| -> Option<ThetaParams> {
        let mut t = start.clone();
        match spec.cov_kind {
            CovKind::StationaryGaussian => t.gamma[1] -= shift,
            CovKind::NonstationaryPs => {
                let k = intercept?;
                for r in 1..=spec.roi_count {
                    t.gamma[spec.rho_offset(r) - spec.q1() + k] += shift;
                }
            }
        }
        Some(t)
    };
    let mut best = (log_likelihood(block, &start, spec).unwrap_or(f64::NEG_INFINITY), start.clone());
    for shift in [-4.0, -3.0, -2.0, -1.0, 1.0] {
        if let Some(t) = shifted(shift) {
            if let Ok(ll) = log_likelihood(block, &t, spec) {
                if ll > best.0 {
                    best = (ll, t);
                }
            }
        }
    }
    Ok(best.1)
}
