//! Wald intervals, contrast tests and agreement metrics.

use serde::{Deserialize, Serialize};
use libm::erfc;

use crate::error::{Error, Result};
use crate::integration::MetaEstimate;

/// Standard normal distribution function, `erfc(-z / sqrt 2) / 2`.
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

/// Upper tail `1 - Phi(z)` without cancellation.
pub fn normal_sf(z: f64) -> f64 {
    0.5 * erfc(z / std::f64::consts::SQRT_2)
}

/// Standard normal quantile.
pub fn normal_quantile(p: f64) -> f64 {
    if p <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    let mut x = -std::f64::consts::SQRT_2 * statrs::function::erf::erfc_inv(2.0 * p);
    // polish with Newton steps against the accurate distribution function
    for _ in 0..2 {
        let density = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
        if density == 0.0 {
            break;
        }
        let err = if x < 0.0 { normal_cdf(x) - p } else { (1.0 - p) - normal_sf(x) };
        x -= err / density;
    }
    x
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub component: usize,
    pub estimate: f64,
    pub lo: f64,
    pub hi: f64,
    pub level: f64,
}

impl Interval {
    pub fn contains(&self, v: f64) -> bool {
        self.lo <= v && v <= self.hi
    }
}

fn covariance_entry(est: &MetaEstimate, a: usize, b: usize) -> Result<f64> {
    let p = est.theta.len();
    if a >= p || b >= p {
        return Err(Error::InvalidArgument(format!("component index out of range for p = {p}")));
    }
    Ok(est.covariance()?[(a, b)])
}

/// `theta_q +/- z_{(1+level)/2} sqrt((J^{-1})_qq)`.
pub fn wald_interval(est: &MetaEstimate, component: usize, level: f64) -> Result<Interval> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidArgument(format!("level {level} not in (0, 1)")));
    }
    let var = covariance_entry(est, component, component)?;
    if var <= 0.0 {
        return Err(Error::Conditioning(format!("non-positive variance for component {component}")));
    }
    let z = normal_quantile(0.5 * (1.0 + level));
    let center = est.theta.to_vec()[component];
    let half = z * var.sqrt();
    Ok(Interval {
        component,
        estimate: center,
        lo: center - half,
        hi: center + half,
        level,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Contrast {
    pub first: usize,
    pub second: usize,
    pub description: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub statistic: f64,
    pub p_value: f64,
    pub null_value: f64,
    pub contrast: Contrast,
}

impl TestResult {
    pub fn rejects(&self, alpha: f64) -> bool {
        self.p_value < alpha
    }
}

/// Two-sided test of `theta_{q1} - theta_{q2} = null_value`.
pub fn z_contrast(est: &MetaEstimate, q1: usize, q2: usize, null_value: f64) -> Result<TestResult> {
    if q1 == q2 {
        return Err(Error::InvalidArgument("contrast needs two distinct components".into()));
    }
    let v11 = covariance_entry(est, q1, q1)?;
    let v22 = covariance_entry(est, q2, q2)?;
    let v12 = covariance_entry(est, q1, q2)?;
    let var = v11 + v22 - 2.0 * v12;
    if !(var > 0.0) {
        return Err(Error::Conditioning(format!("contrast variance {var:e} is not positive")));
    }
    let theta = est.theta.to_vec();
    let statistic = (theta[q1] - theta[q2] - null_value) / var.sqrt();
    Ok(TestResult {
        statistic,
        p_value: (2.0 * normal_sf(statistic.abs())).min(1.0),
        null_value,
        contrast: Contrast {
            first: q1,
            second: q2,
            description: format!("theta[{q1}] - theta[{q2}]"),
        },
    })
}

/// Cosine of the angle between the standardized estimate vectors.
pub fn cosine_agreement(a: &MetaEstimate, b: &MetaEstimate) -> Result<f64> {
    if a.theta.len() != b.theta.len() {
        return Err(Error::Dimension("estimates have different layouts".into()));
    }
    let za = standardized(a)?;
    let zb = standardized(b)?;
    let na = za.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = zb.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::InvalidArgument("zero standardized vector".into()));
    }
    Ok(za.iter().zip(&zb).map(|(x, y)| x * y).sum::<f64>() / (na * nb))
}

fn standardized(e: &MetaEstimate) -> Result<Vec<f64>> {
    let se = e.std_errors()?;
    Ok(e.theta.to_vec().iter().zip(se).map(|(t, s)| t / s).collect())
}

/// Data-driven critical value from two-sample `|Z|` values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibratedThreshold {
    /// The `alpha`-quantile of the supplied `|Z|` values.
    pub quantile: f64,
    /// Critical value: the `(1 - alpha)`-quantile, i.e. the value exceeded by
    /// a fraction `alpha` of the null statistics.
    pub critical_value: f64,
    pub alpha: f64,
}

/// Calibrates a critical value from statistics computed under a null
/// (for example, comparisons between two samples expected to agree).
pub fn calibrated_critical_value(abs_z: &[f64], alpha: f64) -> Result<CalibratedThreshold> {
    if abs_z.is_empty() || !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidArgument("need statistics and alpha in (0, 1)".into()));
    }
    let mut v: Vec<f64> = abs_z.iter().map(|z| z.abs()).collect();
    v.sort_by(|a, b| a.total_cmp(b));
    let q = |p: f64| {
        let pos = p * (v.len() - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
    };
    Ok(CalibratedThreshold {
        quantile: q(alpha),
        critical_value: q(1.0 - alpha),
        alpha,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::NodePath;
    use crate::integration::{Method, Provenance};
    use crate::model::ThetaParams;
    use nalgebra::DMatrix;

    fn est(theta: Vec<f64>, j: DMatrix<f64>) -> MetaEstimate {
        let n = theta.len();
        MetaEstimate {
            theta: ThetaParams::new(theta[..1].to_vec(), theta[1..n - 1].to_vec(), theta[n - 1]),
            j,
            node_path: NodePath::root(),
            method: Method::Meta,
            provenance: Provenance::default(),
        }
    }

    #[test]
    fn quantile_at_975() {
        assert!((normal_quantile(0.975) - 1.959963984540054).abs() < 1e-12);
        assert!((normal_quantile(0.025) + 1.959963984540054).abs() < 1e-12);
        assert_eq!(normal_quantile(0.5), 0.0);
    }

    #[test]
    fn half_width_from_information() {
        let e = est(vec![1.0, 2.0, 3.0], DMatrix::identity(3, 3) * 4.0);
        let ci = wald_interval(&e, 1, 0.95).unwrap();
        assert!(((ci.hi - ci.lo) / 2.0 - 1.959963984540054 * 0.5).abs() < 1e-12);
        assert!(wald_interval(&e, 3, 0.95).is_err());
    }

    #[test]
    fn equal_components_give_zero() {
        let e = est(vec![0.5, 0.5, 1.0], DMatrix::identity(3, 3));
        let t = z_contrast(&e, 0, 1, 0.0).unwrap();
        assert_eq!(t.statistic, 0.0);
        assert_eq!(t.p_value, 1.0);
    }

    #[test]
    fn cosine_extremes() {
        let e = est(vec![0.5, -1.0, 2.0], DMatrix::identity(3, 3));
        let neg = est(vec![-0.5, 1.0, -2.0], DMatrix::identity(3, 3));
        assert!((cosine_agreement(&e, &e).unwrap() - 1.0).abs() < 1e-15);
        assert!((cosine_agreement(&e, &neg).unwrap() + 1.0).abs() < 1e-15);
    }
}
