//! Dense SPD factorization with jitter escalation, and truncated conjugate
//! gradient. Every linear solve in the crate goes through this module.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Jitter levels, relative to the mean diagonal, tried after a failed
/// factorization.
pub const JITTER_LEVELS: [f64; 5] = [1e-10, 1e-8, 1e-6, 1e-4, 1e-2];

const ASYMMETRY_WARN: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Converged,
    MaxIters,
    NegativeCurvature,
}

/// Outcome of a linear solve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub iterations: usize,
    pub final_relative_residual: f64,
    pub termination: Termination,
    /// Absolute diagonal shift added before the factorization succeeded.
    pub jitter_applied: f64,
}

/// Lower-triangular Cholesky factor `L` with `A = L Lᵀ`.
///
/// Only the lower triangle of `a` is read. Fails with the order of the first
/// leading minor whose pivot is not strictly positive.
pub fn cholesky(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::Dimension {
            expected: n,
            found: a.ncols(),
        });
    }
    let mut l = a.lower_triangle();
    for j in 0..n {
        // column j of the lower triangle minus Σ_k l_jk l_{·k}, by contiguous axpys
        for k in 0..j {
            let ljk = l[(j, k)];
            if ljk != 0.0 {
                let (left, mut right) = l.columns_range_pair_mut(k, j);
                right.rows_range_mut(j..).axpy(-ljk, &left.rows_range(j..), 1.0);
            }
        }
        let diag = l[(j, j)];
        if !(diag > 0.0) || !diag.is_finite() {
            return Err(Error::NotPositiveDefinite { minor: j + 1 });
        }
        let ljj = diag.sqrt();
        l.column_mut(j).rows_range_mut(j..).scale_mut(1.0 / ljj);
    }
    Ok(l)
}

/// Solves `L Lᵀ x = b` given the lower factor.
pub fn cholesky_solve(l: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let n = l.nrows();
    let mut y = b.clone();
    for k in 0..n {
        y[k] /= l[(k, k)];
        let yk = y[k];
        y.rows_range_mut(k + 1..).axpy(-yk, &l.column(k).rows_range(k + 1..), 1.0);
    }
    for i in (0..n).rev() {
        let s = y[i] - l.column(i).rows_range(i + 1..).dot(&y.rows_range(i + 1..));
        y[i] = s / l[(i, i)];
    }
    y
}

fn symmetrized(a: &DMatrix<f64>) -> DMatrix<f64> {
    let scale = a.amax().max(1.0);
    let mut worst = 0.0_f64;
    let n = a.nrows();
    let mut s = a.clone();
    for i in 0..n {
        for j in (i + 1)..n {
            let (u, v) = (a[(i, j)], a[(j, i)]);
            worst = worst.max((u - v).abs());
            let m = 0.5 * (u + v);
            s[(i, j)] = m;
            s[(j, i)] = m;
        }
    }
    if worst > ASYMMETRY_WARN * scale {
        log::warn!("spd_solve: input asymmetric by {worst:e}; using (A + Aᵀ)/2");
    }
    s
}

/// Cholesky factorization with diagonal jitter escalation.
///
/// Returns the factor together with the absolute shift that was applied.
pub fn factor_with_jitter(a: &DMatrix<f64>) -> Result<(DMatrix<f64>, f64)> {
    match cholesky(a) {
        Ok(l) => return Ok((l, 0.0)),
        Err(Error::NotPositiveDefinite { .. }) => {}
        Err(e) => return Err(e),
    }
    let n = a.nrows();
    let mean_diag = (0..n).map(|i| a[(i, i)].abs()).sum::<f64>() / n.max(1) as f64;
    let base = if mean_diag > 0.0 && mean_diag.is_finite() {
        mean_diag
    } else {
        1.0
    };
    let mut last = 0.0;
    for tau in JITTER_LEVELS {
        last = tau * base;
        let mut shifted = a.clone();
        for i in 0..n {
            shifted[(i, i)] += last;
        }
        if let Ok(l) = cholesky(&shifted) {
            log::debug!("factor_with_jitter: succeeded with shift {last:e}");
            return Ok((l, last));
        }
    }
    Err(Error::Singular { jitter: last })
}

pub(crate) fn relative_residual(a: &DMatrix<f64>, x: &DVector<f64>, b: &DVector<f64>) -> f64 {
    let bn = b.norm();
    let r = (a * x - b).norm();
    if bn > 0.0 {
        r / bn
    } else {
        r
    }
}

/// Solves a symmetric positive definite system.
pub fn spd_solve(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<(DVector<f64>, SolveReport)> {
    if a.nrows() != b.len() {
        return Err(Error::Dimension {
            expected: a.nrows(),
            found: b.len(),
        });
    }
    let sym = symmetrized(a);
    let (l, jitter) = factor_with_jitter(&sym)?;
    let x = cholesky_solve(&l, b);
    let res = relative_residual(&sym, &x, b);
    if !res.is_finite() {
        return Err(Error::NonFinite("spd_solve residual"));
    }
    Ok((
        x,
        SolveReport {
            iterations: 1,
            final_relative_residual: res,
            termination: Termination::Converged,
            jitter_applied: jitter,
        },
    ))
}

/// Conjugate gradient from a zero initial iterate with Steihaug-style
/// termination.
///
/// Stops when the relative residual drops to `tol`, after `max_iters`
/// iterations, or when a search direction with `pᵀAp <= 0` appears. In the
/// last case the current iterate is returned, or `b` itself if that happens
/// on the first iteration, so the result is always a descent direction.
pub fn truncated_cg<F>(
    mut apply: F,
    b: &DVector<f64>,
    tol: f64,
    max_iters: usize,
) -> Result<(DVector<f64>, SolveReport)>
where
    F: FnMut(&DVector<f64>) -> DVector<f64>,
{
    let n = b.len();
    let bnorm = b.norm();
    if !bnorm.is_finite() {
        return Err(Error::NonFinite("cg right-hand side"));
    }
    let mut x = DVector::<f64>::zeros(n);
    if bnorm == 0.0 {
        return Ok((
            x,
            SolveReport {
                iterations: 0,
                final_relative_residual: 0.0,
                termination: Termination::Converged,
                jitter_applied: 0.0,
            },
        ));
    }
    let mut r = b.clone();
    let mut p = r.clone();
    let mut rr = r.dot(&r);
    for it in 0..max_iters {
        let ap = apply(&p);
        let pap = p.dot(&ap);
        if !pap.is_finite() {
            return Err(Error::NonFinite("cg curvature"));
        }
        if pap <= 0.0 {
            let (x, res) = if it == 0 {
                // p == b here, so A b is already available.
                ((*b).clone(), (b - &ap).norm() / bnorm)
            } else {
                (x, rr.sqrt() / bnorm)
            };
            return Ok((
                x,
                SolveReport {
                    iterations: it,
                    final_relative_residual: res,
                    termination: Termination::NegativeCurvature,
                    jitter_applied: 0.0,
                },
            ));
        }
        let alpha = rr / pap;
        x.axpy(alpha, &p, 1.0);
        r.axpy(-alpha, &ap, 1.0);
        let rr_new = r.dot(&r);
        let rel = rr_new.sqrt() / bnorm;
        if rel <= tol {
            return Ok((
                x,
                SolveReport {
                    iterations: it + 1,
                    final_relative_residual: rel,
                    termination: Termination::Converged,
                    jitter_applied: 0.0,
                },
            ));
        }
        let beta = rr_new / rr;
        rr = rr_new;
        p *= beta;
        p += &r;
    }
    Ok((
        x,
        SolveReport {
            iterations: max_iters,
            final_relative_residual: rr.sqrt() / bnorm,
            termination: Termination::MaxIters,
            jitter_applied: 0.0,
        },
    ))
}
