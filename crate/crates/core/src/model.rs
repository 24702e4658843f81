//! Parameter layout, mean functions and covariance kernels.
//!
//! Two kernel families are supported. The stationary Gaussian kernel is
//! `tau2 * exp(-rho2 * |s - s'|^2)`. The nonstationary kernel lets observation
//! covariates move the range of each location:
//!
//! ```text
//! 2^{d/2} tau(s, s') { r r' / (r + r')^2 }^{d/4} exp{ -2 |s - s'|^2 / (r + r') }
//! ```
//!
//! with `r = exp(x' rho_k)` for a location in ROI `k` and `tau(s, s')` the
//! geometric mean of the two ROI variances. Variance parameters live on the
//! log scale; ROI range coefficients are unconstrained.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::domain::Location;
use crate::error::{Error, Result};

pub const LAYOUT_VERSION: u32 = 1;

fn layout_version() -> u32 {
    LAYOUT_VERSION
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MeanKind {
    ConstantIntercept,
    LinearInX,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CovKind {
    StationaryGaussian,
    NonstationaryPs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TauStructure {
    SingleTau2,
    PerRoiTau2,
}

/// Model specification; fixes the parameter layout.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    #[serde(default = "layout_version")]
    pub layout_version: u32,
    pub mean_kind: MeanKind,
    pub cov_kind: CovKind,
    /// Number of covariates per observation (columns of X, intercept included).
    pub q: usize,
    pub roi_count: usize,
    pub tau_structure: TauStructure,
}

impl ModelSpec {
    pub fn stationary(mean_kind: MeanKind, q: usize) -> Self {
        ModelSpec {
            layout_version: LAYOUT_VERSION,
            mean_kind,
            cov_kind: CovKind::StationaryGaussian,
            q,
            roi_count: 1,
            tau_structure: TauStructure::SingleTau2,
        }
    }

    pub fn nonstationary(
        mean_kind: MeanKind,
        q: usize,
        roi_count: usize,
        tau_structure: TauStructure,
    ) -> Self {
        ModelSpec {
            layout_version: LAYOUT_VERSION,
            mean_kind,
            cov_kind: CovKind::NonstationaryPs,
            q,
            roi_count,
            tau_structure,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layout_version != LAYOUT_VERSION {
            return Err(Error::InvalidArgument(format!(
                "unsupported layout version {}",
                self.layout_version
            )));
        }
        if self.q == 0 {
            return Err(Error::InvalidArgument("q must be at least 1".into()));
        }
        if self.roi_count == 0 {
            return Err(Error::InvalidArgument("roi_count must be at least 1".into()));
        }
        if self.cov_kind == CovKind::StationaryGaussian
            && (self.roi_count != 1 || self.tau_structure != TauStructure::SingleTau2)
        {
            return Err(Error::InvalidArgument(
                "stationary kernel requires a single ROI and a single tau2".into(),
            ));
        }
        Ok(())
    }

    /// Length of the mean coefficient vector.
    pub fn q1(&self) -> usize {
        match self.mean_kind {
            MeanKind::ConstantIntercept => 1,
            MeanKind::LinearInX => self.q,
        }
    }

    pub fn n_tau(&self) -> usize {
        match self.tau_structure {
            TauStructure::SingleTau2 => 1,
            TauStructure::PerRoiTau2 => self.roi_count,
        }
    }

    /// Length of the covariance parameter vector.
    pub fn q2(&self) -> usize {
        match self.cov_kind {
            CovKind::StationaryGaussian => 2,
            CovKind::NonstationaryPs => self.n_tau() + self.roi_count * self.q,
        }
    }

    pub fn p(&self) -> usize {
        self.q1() + self.q2() + 1
    }

    /// Offset of the ROI-`r` (1-based) range coefficients within theta.
    pub fn rho_offset(&self, roi: usize) -> usize {
        self.q1() + self.n_tau() + (roi - 1) * self.q
    }

    /// Names of the theta components in layout order.
    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::with_capacity(self.p());
        match self.mean_kind {
            MeanKind::ConstantIntercept => names.push("beta".to_string()),
            MeanKind::LinearInX => {
                names.extend((0..self.q).map(|k| format!("beta[{k}]")));
            }
        }
        match self.cov_kind {
            CovKind::StationaryGaussian => {
                names.push("log_tau2".into());
                names.push("log_rho2".into());
            }
            CovKind::NonstationaryPs => {
                if self.n_tau() == 1 {
                    names.push("log_tau2".into());
                } else {
                    names.extend((1..=self.n_tau()).map(|r| format!("log_tau2[{r}]")));
                }
                for r in 1..=self.roi_count {
                    names.extend((0..self.q).map(|k| format!("rho{r}[{k}]")));
                }
            }
        }
        names.push("log_sigma2".into());
        names
    }
}

/// Full parameter vector `(beta, gamma, log sigma2)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThetaParams {
    #[serde(default = "layout_version")]
    pub layout_version: u32,
    pub beta: Vec<f64>,
    pub gamma: Vec<f64>,
    pub log_sigma2: f64,
}

impl ThetaParams {
    pub fn new(beta: Vec<f64>, gamma: Vec<f64>, log_sigma2: f64) -> Self {
        ThetaParams {
            layout_version: LAYOUT_VERSION,
            beta,
            gamma,
            log_sigma2,
        }
    }

    pub fn from_slice(spec: &ModelSpec, v: &[f64]) -> Result<Self> {
        if v.len() != spec.p() {
            return Err(Error::Dimension(format!(
                "theta has length {}, layout expects {}",
                v.len(),
                spec.p()
            )));
        }
        let q1 = spec.q1();
        let q2 = spec.q2();
        Ok(ThetaParams::new(
            v[..q1].to_vec(),
            v[q1..q1 + q2].to_vec(),
            v[q1 + q2],
        ))
    }

    pub fn from_vector(spec: &ModelSpec, v: &DVector<f64>) -> Result<Self> {
        Self::from_slice(spec, v.as_slice())
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.len());
        v.extend_from_slice(&self.beta);
        v.extend_from_slice(&self.gamma);
        v.push(self.log_sigma2);
        v
    }

    pub fn to_vector(&self) -> DVector<f64> {
        DVector::from_vec(self.to_vec())
    }

    pub fn len(&self) -> usize {
        self.beta.len() + self.gamma.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn check(&self, spec: &ModelSpec) -> Result<()> {
        if self.beta.len() != spec.q1() || self.gamma.len() != spec.q2() {
            return Err(Error::Dimension(format!(
                "theta layout ({}, {}) does not match spec ({}, {})",
                self.beta.len(),
                self.gamma.len(),
                spec.q1(),
                spec.q2()
            )));
        }
        if self.to_vec().iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("theta has non-finite entries".into()));
        }
        Ok(())
    }

    pub fn sigma2(&self) -> f64 {
        self.log_sigma2.exp()
    }
}

/// Mean of every location for an observation with covariates `x`.
pub fn mean_value(spec: &ModelSpec, x: &[f64], beta: &[f64]) -> Result<f64> {
    if beta.len() != spec.q1() {
        return Err(Error::Dimension(format!(
            "beta has length {}, expected {}",
            beta.len(),
            spec.q1()
        )));
    }
    match spec.mean_kind {
        MeanKind::ConstantIntercept => Ok(beta[0]),
        MeanKind::LinearInX => {
            if x.len() != beta.len() {
                return Err(Error::Dimension(format!(
                    "x has length {}, beta has length {}",
                    x.len(),
                    beta.len()
                )));
            }
            Ok(x.iter().zip(beta).map(|(a, b)| a * b).sum())
        }
    }
}

/// Gradient of the mean with respect to beta.
pub(crate) fn mean_gradient(spec: &ModelSpec, x: &[f64]) -> Vec<f64> {
    match spec.mean_kind {
        MeanKind::ConstantIntercept => vec![1.0],
        MeanKind::LinearInX => x.to_vec(),
    }
}

fn check_dims(a: &Location, b: &Location) -> Result<()> {
    if a.coords.len() != b.coords.len() {
        return Err(Error::Dimension(format!(
            "locations of dimension {} and {}",
            a.coords.len(),
            b.coords.len()
        )));
    }
    Ok(())
}

pub fn cov_stationary(a: &Location, b: &Location, tau2: f64, rho2: f64) -> Result<f64> {
    check_dims(a, b)?;
    Ok(tau2 * (-rho2 * a.sq_dist(b)).exp())
}

/// Per-location quantities of the nonstationary kernel for one covariate row.
struct NsTerms {
    /// log of the location range `r_j`
    log_range: Vec<f64>,
    range: Vec<f64>,
    /// `log tau_j`, so that `tau(s_j, s_j') = exp(log_tau_j + log_tau_j')`
    log_tau: Vec<f64>,
    /// 0-based ROI of each location
    roi: Vec<usize>,
    n_roi: usize,
    /// amplitude and `1 / (r + r')` for each ROI pair, row-major
    pair_amp: Vec<f64>,
    pair_inv_sum: Vec<f64>,
}

impl NsTerms {
    #[inline]
    fn kernel(&self, j: usize, k: usize, sq: f64) -> f64 {
        let idx = self.roi[j] * self.n_roi + self.roi[k];
        self.pair_amp[idx] * (-2.0 * sq * self.pair_inv_sum[idx]).exp()
    }
}

fn ns_terms(locations: &[Location], x: &[f64], gamma: &[f64], spec: &ModelSpec) -> Result<NsTerms> {
    if x.len() != spec.q {
        return Err(Error::Dimension(format!(
            "x has length {}, expected {}",
            x.len(),
            spec.q
        )));
    }
    if gamma.len() != spec.q2() {
        return Err(Error::Dimension(format!(
            "gamma has length {}, expected {}",
            gamma.len(),
            spec.q2()
        )));
    }
    let n_tau = spec.n_tau();
    let mut log_range = Vec::with_capacity(locations.len());
    let mut log_tau = Vec::with_capacity(locations.len());
    for loc in locations {
        let r = loc.roi_index() as usize;
        if r == 0 || r > spec.roi_count {
            return Err(Error::InvalidArgument(format!(
                "location ROI {r} outside 1..={}",
                spec.roi_count
            )));
        }
        let off = n_tau + (r - 1) * spec.q;
        let lr: f64 = x.iter().zip(&gamma[off..off + spec.q]).map(|(a, b)| a * b).sum();
        log_range.push(lr);
        let t = if n_tau == 1 { gamma[0] } else { gamma[r - 1] };
        log_tau.push(0.5 * t);
    }
    let range = log_range.iter().map(|v| v.exp()).collect();
    let n_roi = spec.roi_count;
    let d = locations.first().map_or(0, |l| l.coords.len());
    let mut pair_amp = vec![0.0; n_roi * n_roi];
    let mut pair_inv_sum = vec![0.0; n_roi * n_roi];
    let per_roi: Vec<(f64, f64)> = (0..n_roi)
        .map(|r| {
            let off = n_tau + r * spec.q;
            let lr: f64 = x.iter().zip(&gamma[off..off + spec.q]).map(|(a, b)| a * b).sum();
            let t = if n_tau == 1 { gamma[0] } else { gamma[r] };
            (lr, 0.5 * t)
        })
        .collect();
    for a in 0..n_roi {
        for b in 0..n_roi {
            let (lra, ta) = per_roi[a];
            let (lrb, tb) = per_roi[b];
            let (ra, rb) = (lra.exp(), lrb.exp());
            pair_amp[a * n_roi + b] = ns_kernel(d, ta + tb, ra, rb, lra, lrb, 0.0);
            pair_inv_sum[a * n_roi + b] = 1.0 / (ra + rb);
        }
    }
    let roi = locations.iter().map(|l| l.roi_index() as usize - 1).collect();
    Ok(NsTerms {
        log_range,
        range,
        log_tau,
        roi,
        n_roi,
        pair_amp,
        pair_inv_sum,
    })
}

fn flat_coords(locations: &[Location]) -> Vec<f64> {
    locations.iter().flat_map(|l| l.coords.iter().copied()).collect()
}

#[inline]
fn ns_kernel(d: usize, log_tau_sum: f64, ra: f64, rb: f64, lra: f64, lrb: f64, sq: f64) -> f64 {
    let s = ra + rb;
    let df = d as f64;
    let log_amp = 0.5 * df * std::f64::consts::LN_2 + log_tau_sum + 0.25 * df * (lra + lrb)
        - 0.5 * df * s.ln();
    (log_amp - 2.0 * sq / s).exp()
}

/// Nonstationary kernel between two locations for covariate row `x`.
pub fn cov_nonstationary(
    a: &Location,
    b: &Location,
    x: &[f64],
    gamma: &[f64],
    spec: &ModelSpec,
) -> Result<f64> {
    check_dims(a, b)?;
    let t = ns_terms(&[a.clone(), b.clone()], x, gamma, spec)?;
    Ok(ns_kernel(
        a.coords.len(),
        t.log_tau[0] + t.log_tau[1],
        t.range[0],
        t.range[1],
        t.log_range[0],
        t.log_range[1],
        a.sq_dist(b),
    ))
}

/// Covariance matrix of one observation vector over `locations`, nugget included.
pub fn build_cov_matrix(
    locations: &[Location],
    x: &[f64],
    theta: &ThetaParams,
    spec: &ModelSpec,
) -> Result<DMatrix<f64>> {
    if locations.is_empty() {
        return Err(Error::InvalidArgument("empty location list".into()));
    }
    theta.check(spec)?;
    let d = locations[0].coords.len();
    if locations.iter().any(|l| l.coords.len() != d) {
        return Err(Error::Dimension("mixed location dimensions".into()));
    }
    let n = locations.len();
    let mut c = DMatrix::zeros(n, n);
    match spec.cov_kind {
        CovKind::StationaryGaussian => {
            let tau2 = theta.gamma[0].exp();
            let rho2 = theta.gamma[1].exp();
            for j in 0..n {
                for k in 0..=j {
                    let v = tau2 * (-rho2 * locations[j].sq_dist(&locations[k])).exp();
                    c[(j, k)] = v;
                    c[(k, j)] = v;
                }
            }
        }
        CovKind::NonstationaryPs => {
            let t = ns_terms(locations, x, &theta.gamma, spec)?;
            let flat = flat_coords(locations);
            let cs = c.as_mut_slice();
            for j in 0..n {
                let pj = &flat[j * d..j * d + d];
                for k in j..n {
                    let sq: f64 = pj.iter().zip(&flat[k * d..k * d + d]).map(|(a, b)| (a - b) * (a - b)).sum();
                    cs[j * n + k] = t.kernel(k, j, sq);
                }
            }
            crate::linalg::symmetrize_lower(&mut c);
        }
    }
    let s2 = theta.sigma2();
    for j in 0..n {
        c[(j, j)] += s2;
    }
    Ok(c)
}

/// One distinct derivative matrix of the covariance.
#[derive(Debug, Clone)]
pub enum DerivBasis {
    Dense(DMatrix<f64>),
    /// `C - value * I`, the covariance without its nugget.
    Signal(f64),
    /// `value * I`
    Identity(f64),
    Zero,
}

/// Covariance matrix with its derivatives with respect to the covariance
/// parameters. Every covariance parameter `theta_k` satisfies
/// `dC/dtheta_k = coef * bases[basis]` for one entry `(k, basis, coef)` of
/// `params`, which keeps the ROI range coefficients (whose derivatives differ
/// only by the covariate value) down to one matrix per ROI.
#[derive(Debug, Clone)]
pub struct CovWithDerivs {
    pub cov: DMatrix<f64>,
    pub bases: Vec<DerivBasis>,
    pub params: Vec<(usize, usize, f64)>,
}

pub fn cov_with_derivatives(
    locations: &[Location],
    x: &[f64],
    theta: &ThetaParams,
    spec: &ModelSpec,
) -> Result<CovWithDerivs> {
    let n = locations.len();
    if n == 0 {
        return Err(Error::InvalidArgument("empty location list".into()));
    }
    let d = locations[0].coords.len();
    let q1 = spec.q1();
    let p = spec.p();
    let s2 = theta.sigma2();
    let mut cov = DMatrix::zeros(n, n);
    let mut bases = Vec::new();
    let mut params = Vec::new();

    match spec.cov_kind {
        CovKind::StationaryGaussian => {
            let tau2 = theta.gamma[0].exp();
            let rho2 = theta.gamma[1].exp();
            let mut d_rho = DMatrix::zeros(n, n);
            for j in 0..n {
                for k in 0..=j {
                    let sq = locations[j].sq_dist(&locations[k]);
                    let v = tau2 * (-rho2 * sq).exp();
                    let dr = -rho2 * sq * v;
                    cov[(j, k)] = v;
                    cov[(k, j)] = v;
                    d_rho[(j, k)] = dr;
                    d_rho[(k, j)] = dr;
                }
            }
            bases.push(DerivBasis::Signal(s2));
            bases.push(DerivBasis::Dense(d_rho));
            params.push((q1, 0, 1.0));
            params.push((q1 + 1, 1, 1.0));
        }
        CovKind::NonstationaryPs => {
            let t = ns_terms(locations, x, &theta.gamma, spec)?;
            let n_roi = spec.roi_count;
            let n_tau = spec.n_tau();
            let mut d_range: Vec<DMatrix<f64>> = (0..n_roi).map(|_| DMatrix::zeros(n, n)).collect();
            let mut d_tau: Vec<DMatrix<f64>> = if n_tau > 1 {
                (0..n_tau).map(|_| DMatrix::zeros(n, n)).collect()
            } else {
                Vec::new()
            };
            let df = d as f64;
            let flat = flat_coords(locations);
            for j in 0..n {
                let pj = &flat[j * d..j * d + d];
                for k in j..n {
                    let sq: f64 = pj.iter().zip(&flat[k * d..k * d + d]).map(|(a, b)| (a - b) * (a - b)).sum();
                    let (ra, rb) = (t.range[k], t.range[j]);
                    let v = t.kernel(k, j, sq);
                    let at = j * n + k;
                    cov.as_mut_slice()[at] = v;
                    let s = ra + rb;
                    let common = 2.0 * sq / (s * s);
                    // d log K / d log r_k and d log K / d log r_j
                    let ga = 0.25 * df - 0.5 * df * ra / s + common * ra;
                    let gb = 0.25 * df - 0.5 * df * rb / s + common * rb;
                    let (rk, rj) = (t.roi[k], t.roi[j]);
                    if rj == rk {
                        d_range[rk].as_mut_slice()[at] = v * (ga + gb);
                    } else {
                        d_range[rk].as_mut_slice()[at] = v * ga;
                        d_range[rj].as_mut_slice()[at] = v * gb;
                    }
                    if n_tau > 1 {
                        d_tau[rk].as_mut_slice()[at] += 0.5 * v;
                        d_tau[rj].as_mut_slice()[at] += 0.5 * v;
                    }
                }
            }
            crate::linalg::symmetrize_lower(&mut cov);
            for m in d_range.iter_mut().chain(d_tau.iter_mut()) {
                crate::linalg::symmetrize_lower(m);
            }
            if n_tau == 1 {
                bases.push(DerivBasis::Signal(s2));
                params.push((q1, 0, 1.0));
            } else {
                for (r, m) in d_tau.into_iter().enumerate() {
                    bases.push(DerivBasis::Dense(m));
                    params.push((q1 + r, r, 1.0));
                }
            }
            let present: Vec<bool> = (0..n_roi).map(|r| t.roi.contains(&r)).collect();
            for (r, m) in d_range.into_iter().enumerate() {
                let b = bases.len();
                bases.push(if present[r] { DerivBasis::Dense(m) } else { DerivBasis::Zero });
                let off = spec.rho_offset(r + 1);
                for (k, &xk) in x.iter().enumerate() {
                    params.push((off + k, b, xk));
                }
            }
        }
    }
    for j in 0..n {
        cov[(j, j)] += s2;
    }
    let b = bases.len();
    bases.push(DerivBasis::Identity(s2));
    params.push((p - 1, b, 1.0));
    Ok(CovWithDerivs { cov, bases, params })
}

/// Zero-distance covariance amplitude and exponential decay rate between two ROIs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrelationSummary {
    pub amplitude: f64,
    /// Coefficient of `-d` in the exponent, `d` the squared distance.
    pub decay_rate: f64,
}

/// Implied covariance between ROIs `roi_pair` for an observation with
/// covariates `x_profile`, in `dim` spatial dimensions.
///
/// The amplitude is the kernel at zero distance without the nugget.
pub fn implied_correlation_summary(
    theta: &ThetaParams,
    spec: &ModelSpec,
    x_profile: &[f64],
    roi_pair: (usize, usize),
    dim: usize,
) -> Result<CorrelationSummary> {
    if spec.cov_kind != CovKind::NonstationaryPs {
        return Err(Error::InvalidArgument(
            "correlation summaries need the nonstationary kernel".into(),
        ));
    }
    theta.check(spec)?;
    for r in [roi_pair.0, roi_pair.1] {
        if r == 0 || r > spec.roi_count {
            return Err(Error::InvalidArgument(format!(
                "ROI index {r} out of range 1..={}",
                spec.roi_count
            )));
        }
    }
    let origin = vec![0.0; dim];
    let a = Location::with_roi(origin.clone(), roi_pair.0 as u32);
    let b = Location::with_roi(origin, roi_pair.1 as u32);
    let t = ns_terms(&[a, b], x_profile, &theta.gamma, spec)?;
    let amplitude = ns_kernel(
        dim,
        t.log_tau[0] + t.log_tau[1],
        t.range[0],
        t.range[1],
        t.log_range[0],
        t.log_range[1],
        0.0,
    );
    Ok(CorrelationSummary {
        amplitude,
        decay_rate: 2.0 / (t.range[0] + t.range[1]),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn two_roi_spec(tau: TauStructure) -> ModelSpec {
        ModelSpec::nonstationary(MeanKind::ConstantIntercept, 3, 2, tau)
    }

    #[test]
    fn mean_examples() {
        let lin = ModelSpec::stationary(MeanKind::LinearInX, 3);
        assert_relative_eq!(
            mean_value(&lin, &[1.0, 2.0, 3.0], &[0.3, 0.6, 0.8]).unwrap(),
            3.9,
            epsilon = 1e-14
        );
        assert_eq!(mean_value(&lin, &[1.0, 5.0, 7.0], &[0.0; 3]).unwrap(), 0.0);
        let c = ModelSpec::stationary(MeanKind::ConstantIntercept, 3);
        assert_eq!(mean_value(&c, &[1.0, 9.0, 9.0], &[0.0]).unwrap(), 0.0);
        assert!(mean_value(&lin, &[1.0], &[0.3, 0.6, 0.8]).is_err());
    }

    #[test]
    fn stationary_examples() {
        let a = Location::new(vec![1.0, 1.0]);
        let b = Location::new(vec![2.0, 1.0]);
        assert_eq!(cov_stationary(&a, &a, 3.0, 0.5).unwrap(), 3.0);
        assert_relative_eq!(
            cov_stationary(&a, &b, 3.0, 0.5).unwrap(),
            3.0 * (-0.5f64).exp(),
            epsilon = 1e-15
        );
        assert_relative_eq!(cov_stationary(&a, &b, 3.0, 0.5).unwrap(), 1.81959, epsilon = 1e-5);
        assert_eq!(cov_stationary(&a, &b, 3.0, 0.0).unwrap(), 3.0);
        assert!(cov_stationary(&a, &Location::new(vec![1.0]), 1.0, 1.0).is_err());
    }

    #[test]
    fn single_location_matrix() {
        let spec = ModelSpec::stationary(MeanKind::LinearInX, 3);
        let theta = ThetaParams::new(vec![0.3, 0.6, 0.8], vec![3f64.ln(), 0.5f64.ln()], 1.6f64.ln());
        let c = build_cov_matrix(&[Location::new(vec![1.0, 1.0])], &[1.0, 0.0, 0.0], &theta, &spec)
            .unwrap();
        assert_relative_eq!(c[(0, 0)], 4.6, epsilon = 1e-12);
    }

    #[test]
    fn flat_kernel_matrix() {
        let spec = ModelSpec::stationary(MeanKind::LinearInX, 1);
        let theta = ThetaParams::new(vec![0.0], vec![2f64.ln(), -800.0], 0.0);
        let locs = [Location::new(vec![0.0]), Location::new(vec![3.0])];
        let c = build_cov_matrix(&locs, &[1.0], &theta, &spec).unwrap();
        assert_relative_eq!(c[(0, 1)], 2.0, epsilon = 1e-12);
        assert_relative_eq!(c[(0, 0)], 3.0, epsilon = 1e-12);
    }

    #[test]
    fn nonstationary_zero_distance_is_roi_variance() {
        let spec = two_roi_spec(TauStructure::PerRoiTau2);
        let gamma = vec![0.2, -0.4, 0.5, 0.1, 0.3, 0.6, -0.2, 0.1];
        let a = Location::with_roi(vec![2.0, 3.0], 2);
        let v = cov_nonstationary(&a, &a, &[1.0, 0.4, -1.2], &gamma, &spec).unwrap();
        assert_relative_eq!(v, (-0.4f64).exp(), epsilon = 1e-14);
    }

    #[test]
    fn symmetric_in_arguments() {
        let spec = two_roi_spec(TauStructure::PerRoiTau2);
        let gamma = vec![0.2, -0.4, 0.5, 0.1, 0.3, 0.6, -0.2, 0.1];
        let a = Location::with_roi(vec![2.0, 3.0], 1);
        let b = Location::with_roi(vec![4.0, 1.5], 2);
        let x = [1.0, 0.7, -0.3];
        assert_eq!(
            cov_nonstationary(&a, &b, &x, &gamma, &spec).unwrap(),
            cov_nonstationary(&b, &a, &x, &gamma, &spec).unwrap()
        );
    }

    #[test]
    fn roi_out_of_range() {
        let spec = two_roi_spec(TauStructure::SingleTau2);
        let theta = ThetaParams::new(vec![0.0], vec![0.0; 7], 0.0);
        assert!(implied_correlation_summary(&theta, &spec, &[1.0, 0.0, 0.0], (1, 3), 2).is_err());
        let flat = ModelSpec::stationary(MeanKind::ConstantIntercept, 3);
        let t2 = ThetaParams::new(vec![0.0], vec![0.0; 2], 0.0);
        assert!(implied_correlation_summary(&t2, &flat, &[1.0, 0.0, 0.0], (1, 1), 2).is_err());
    }

    #[test]
    fn equal_rois_give_within_variance() {
        let spec = two_roi_spec(TauStructure::PerRoiTau2);
        let gamma = vec![0.3, 0.3, 0.5, 0.0, 0.0, 0.5, 0.0, 0.0];
        let theta = ThetaParams::new(vec![0.0], gamma, 0.0);
        let s = implied_correlation_summary(&theta, &spec, &[1.0, 0.0, 0.0], (1, 2), 3).unwrap();
        assert_relative_eq!(s.amplitude, 0.3f64.exp(), epsilon = 1e-14);
    }

    #[test]
    fn param_layout() {
        let spec = two_roi_spec(TauStructure::SingleTau2);
        assert_eq!(spec.p(), 1 + 1 + 6 + 1);
        assert_eq!(
            spec.param_names(),
            ["beta", "log_tau2", "rho1[0]", "rho1[1]", "rho1[2]", "rho2[0]", "rho2[1]", "rho2[2]", "log_sigma2"]
        );
        let st = ModelSpec::stationary(MeanKind::LinearInX, 3);
        assert_eq!(st.p(), 6);
        let bad = ModelSpec {
            roi_count: 2,
            ..ModelSpec::stationary(MeanKind::LinearInX, 3)
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn spec_json_has_version() {
        let spec = two_roi_spec(TauStructure::PerRoiTau2);
        let json = serde_json::to_string(&spec).unwrap();
        assert!(json.contains("\"layout_version\":1"));
        assert!(json.contains("nonstationary-ps"));
        let back: ModelSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(back, spec);
    }
}
