//! Quasi-Newton minimizer used by the leaf likelihood fits.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::max_abs;

#[derive(Debug, Clone, Copy)]
pub(crate) struct BfgsOptions {
    /// Converged when `|g|_inf <= grad_tol * max(1, |f|)`.
    pub grad_tol: f64,
    pub step_tol: f64,
    pub max_iter: usize,
    /// Largest allowed change of any coordinate in one iteration.
    pub max_step: f64,
    /// Abort when any coordinate leaves `[-bound, bound]`.
    pub bound: f64,
    /// Re-seed the inverse Hessian from `init_inv_hessian` at every iterate
    /// instead of applying the BFGS update.
    pub refresh_each_iter: bool,
}

pub(crate) struct Minimum<A> {
    pub x: DVector<f64>,
    pub f: f64,
    pub aux: A,
    pub iterations: usize,
    pub evaluations: usize,
}

const ARMIJO: f64 = 1e-4;
const MAX_HALVINGS: usize = 60;

fn converged(f: f64, g: &DVector<f64>, tol: f64) -> bool {
    max_abs(g.as_slice()) <= tol * f.abs().max(1.0)
}

/// BFGS with backtracking line search on the inverse-Hessian form.
///
/// `init_inv_hessian` supplies the starting inverse Hessian from the auxiliary
/// output of an evaluation; it is also used to restart after a failed descent
/// direction. Non-positive-definite evaluations during the line search count
/// as infeasible trial points.
pub(crate) fn bfgs<A, F, H>(
    x0: DVector<f64>,
    mut eval: F,
    init_inv_hessian: H,
    opts: BfgsOptions,
) -> Result<Minimum<A>>
where
    F: FnMut(&DVector<f64>) -> Result<(f64, DVector<f64>, A)>,
    H: Fn(&DVector<f64>, &A) -> Option<DMatrix<f64>>,
{
    let n = x0.len();
    let (mut f, mut g, mut aux) = eval(&x0)?;
    let mut evaluations = 1;
    let mut x = x0;
    if !f.is_finite() {
        return Err(Error::InvalidArgument("objective not finite at start".into()));
    }
    let restart = |x: &DVector<f64>, g: &DVector<f64>, aux: &A| -> DMatrix<f64> {
        init_inv_hessian(x, aux).unwrap_or_else(|| {
            let scale = 1.0 / max_abs(g.as_slice()).max(1.0);
            DMatrix::identity(n, n) * scale
        })
    };
    let mut h = restart(&x, &g, &aux);

    for iter in 0..opts.max_iter {
        if converged(f, &g, opts.grad_tol) {
            return Ok(Minimum {
                x,
                f,
                aux,
                iterations: iter,
                evaluations,
            });
        }
        let mut d = -(&h * &g);
        let mut slope = g.dot(&d);
        if slope >= 0.0 || !slope.is_finite() {
            h = restart(&x, &g, &aux);
            d = -(&h * &g);
            slope = g.dot(&d);
            if slope >= 0.0 || !slope.is_finite() {
                h = DMatrix::identity(n, n) / max_abs(g.as_slice()).max(1.0);
                d = -(&h * &g);
                slope = g.dot(&d);
            }
        }
        let big = max_abs(d.as_slice());
        if big > opts.max_step {
            d *= opts.max_step / big;
            slope = g.dot(&d);
        }

        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..MAX_HALVINGS {
            let trial = &x + &d * t;
            evaluations += 1;
            match eval(&trial) {
                Ok((ft, gt, at)) if ft.is_finite() && ft <= f + ARMIJO * t * slope => {
                    accepted = Some((trial, ft, gt, at));
                    break;
                }
                Ok(_) | Err(Error::NonPositiveDefinite { .. }) => t *= 0.5,
                Err(e) => return Err(e),
            }
        }
        let Some((xn, fnew, gn, an)) = accepted else {
            // stalled line search: accept only if we are numerically at the optimum
            if converged(f, &g, opts.grad_tol * 1e3) {
                return Ok(Minimum {
                    x,
                    f,
                    aux,
                    iterations: iter,
                    evaluations,
                });
            }
            return Err(Error::NonConvergence {
                iterations: iter,
                grad_norm: max_abs(g.as_slice()),
                best: x.as_slice().to_vec(),
            });
        };

        let s = &xn - &x;
        let y = &gn - &g;
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() {
            let rho = 1.0 / sy;
            let hy = &h * &y;
            let yhy = y.dot(&hy);
            // H+ = H - rho (H y s' + s y' H) + (rho^2 y'Hy + rho) s s'
            h -= (&hy * s.transpose() + &s * hy.transpose()) * rho;
            h += (&s * s.transpose()) * (rho * rho * yhy + rho);
        }

        let step = max_abs(s.as_slice());
        x = xn;
        f = fnew;
        g = gn;
        aux = an;
        if opts.refresh_each_iter {
            h = restart(&x, &g, &aux);
        }

        if max_abs(x.as_slice()) > opts.bound {
            return Err(Error::Boundary(format!(
                "iterate left [-{b}, {b}]: {:?}",
                x.as_slice(),
                b = opts.bound
            )));
        }
        if step <= opts.step_tol * (1.0 + max_abs(x.as_slice())) {
            if converged(f, &g, opts.grad_tol * 1e3) {
                return Ok(Minimum {
                    x,
                    f,
                    aux,
                    iterations: iter + 1,
                    evaluations,
                });
            }
            return Err(Error::NonConvergence {
                iterations: iter + 1,
                grad_norm: max_abs(g.as_slice()),
                best: x.as_slice().to_vec(),
            });
        }
    }
    if converged(f, &g, opts.grad_tol) {
        return Ok(Minimum {
            x,
            f,
            aux,
            iterations: opts.max_iter,
            evaluations,
        });
    }
    Err(Error::NonConvergence {
        iterations: opts.max_iter,
        grad_norm: max_abs(g.as_slice()),
        best: x.as_slice().to_vec(),
    })
}
