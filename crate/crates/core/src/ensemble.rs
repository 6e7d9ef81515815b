//! Particle ensembles, seeded randomness, and the target-model contract.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linsolve::cholesky;

/// Portable generator used everywhere randomness is needed.
pub type Rng = ChaCha20Rng;

/// Independent ChaCha streams derived from one run seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    /// Data realizations: true parameters, noise, problem constants.
    Data = 0,
    /// Initial particle draws.
    Particles = 1,
}

pub fn seeded_rng(seed: u64, stream: Stream) -> Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

/// Draws a vector of i.i.d. standard normals in index order.
pub fn standard_normals(rng: &mut Rng, len: usize) -> DVector<f64> {
    DVector::from_iterator(len, (0..len).map(|_| StandardNormal.sample(rng)))
}

/// A set of `n` particles in `d` dimensions.
///
/// Positions are stored one particle per column (`d × n`), so that a particle
/// is a contiguous slice. Row/column naming elsewhere in the crate follows
/// the usual "particle i" convention regardless of storage.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleEnsemble {
    positions: DMatrix<f64>,
    iteration: usize,
}

impl ParticleEnsemble {
    /// Builds an ensemble from a `d × n` matrix (one column per particle).
    pub fn from_columns(positions: DMatrix<f64>) -> Result<Self> {
        if positions.nrows() == 0 || positions.ncols() == 0 {
            return Err(Error::InvalidArgument(
                "ensemble needs at least one particle and one dimension".into(),
            ));
        }
        if let Some(i) = (0..positions.ncols()).find(|&i| positions.column(i).iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFiniteParticle {
                what: "coordinate",
                index: i,
            });
        }
        Ok(Self {
            positions,
            iteration: 0,
        })
    }

    /// Builds an ensemble from particle rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let d = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != d) {
            return Err(Error::Dimension {
                expected: d,
                found: bad.len(),
            });
        }
        Self::from_columns(DMatrix::from_fn(d, n, |i, j| rows[j][i]))
    }

    pub fn with_iteration(mut self, iteration: usize) -> Self {
        self.iteration = iteration;
        self
    }

    pub fn len(&self) -> usize {
        self.positions.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.ncols() == 0
    }

    pub fn dim(&self) -> usize {
        self.positions.nrows()
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    /// `d × n` positions, one column per particle.
    pub fn positions(&self) -> &DMatrix<f64> {
        &self.positions
    }

    pub fn particle(&self, i: usize) -> DVector<f64> {
        self.positions.column(i).into_owned()
    }

    pub fn particles(&self) -> impl Iterator<Item = DVector<f64>> + '_ {
        self.positions.column_iter().map(|c| c.into_owned())
    }

    /// Applies `x_i + step * direction_i` to every particle and advances the
    /// iteration counter.
    pub fn advanced(&self, direction: &DMatrix<f64>, step: f64) -> Result<Self> {
        if direction.shape() != self.positions.shape() {
            return Err(Error::Dimension {
                expected: self.positions.len(),
                found: direction.len(),
            });
        }
        let mut positions = self.positions.clone();
        if step != 0.0 {
            positions += direction * step;
        }
        if let Some(i) = (0..positions.ncols()).find(|&i| positions.column(i).iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFiniteParticle {
                what: "position after update",
                index: i,
            });
        }
        Ok(Self {
            positions,
            iteration: self.iteration + 1,
        })
    }

    /// Ensemble mean, summed in particle order.
    pub fn mean(&self) -> DVector<f64> {
        let mut m = DVector::zeros(self.dim());
        for c in self.positions.column_iter() {
            m += c;
        }
        m / self.len() as f64
    }
}

/// Multivariate normal specification holding both covariance and precision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianSpec {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
    pub precision: DMatrix<f64>,
}

impl GaussianSpec {
    pub fn from_covariance(mean: DVector<f64>, covariance: DMatrix<f64>) -> Result<Self> {
        check_square(&mean, &covariance)?;
        let l = cholesky(&covariance)?;
        let precision = spd_inverse_from_factor(&l);
        Ok(Self {
            mean,
            covariance,
            precision,
        })
    }

    pub fn from_precision(mean: DVector<f64>, precision: DMatrix<f64>) -> Result<Self> {
        check_square(&mean, &precision)?;
        let l = cholesky(&precision)?;
        let covariance = spd_inverse_from_factor(&l);
        Ok(Self {
            mean,
            covariance,
            precision,
        })
    }

    pub fn standard(d: usize) -> Self {
        Self {
            mean: DVector::zeros(d),
            covariance: DMatrix::identity(d, d),
            precision: DMatrix::identity(d, d),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn sample(&self, rng: &mut Rng) -> Result<DVector<f64>> {
        let l = cholesky(&self.covariance)?;
        Ok(&self.mean + l * standard_normals(rng, self.dim()))
    }
}

fn check_square(mean: &DVector<f64>, m: &DMatrix<f64>) -> Result<()> {
    if m.nrows() != mean.len() || m.ncols() != mean.len() {
        return Err(Error::Dimension {
            expected: mean.len(),
            found: m.nrows(),
        });
    }
    Ok(())
}

pub(crate) fn spd_inverse_from_factor(l: &DMatrix<f64>) -> DMatrix<f64> {
    let n = l.nrows();
    let mut inv = DMatrix::zeros(n, n);
    for j in 0..n {
        let mut e = DVector::zeros(n);
        e[j] = 1.0;
        inv.set_column(j, &crate::linsolve::cholesky_solve(l, &e));
    }
    // exact symmetry
    for i in 0..n {
        for j in (i + 1)..n {
            let m = 0.5 * (inv[(i, j)] + inv[(j, i)]);
            inv[(i, j)] = m;
            inv[(j, i)] = m;
        }
    }
    inv
}

/// Which curvature a model should return from [`TargetModel::neg_hessian`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Curvature {
    /// `C_pr⁻¹ + JᵀJ/σ²`; symmetric positive definite by construction.
    #[default]
    GaussNewton,
    /// The exact negative Hessian of the log-density, where derived.
    Exact,
}

/// Per-particle quantities needed by one sampler iteration.
#[derive(Debug, Clone)]
pub struct PointEval {
    pub grad: DVector<f64>,
    pub neg_hessian: Option<DMatrix<f64>>,
}

/// An unnormalized log-density with hand-coded derivatives.
pub trait TargetModel: Send + Sync {
    fn dim(&self) -> usize;

    /// `log π(x)` up to an additive constant.
    fn log_density(&self, x: &DVector<f64>) -> Result<f64>;

    fn grad_log_density(&self, x: &DVector<f64>) -> Result<DVector<f64>>;

    /// Symmetric `d × d` approximation of `−∇² log π(x)`.
    fn neg_hessian(&self, x: &DVector<f64>, curvature: Curvature) -> Result<DMatrix<f64>>;

    /// Gradient and curvature together; models override this when both share
    /// an expensive forward solve.
    fn grad_and_neg_hessian(
        &self,
        x: &DVector<f64>,
        curvature: Curvature,
    ) -> Result<(DVector<f64>, DMatrix<f64>)> {
        Ok((self.grad_log_density(x)?, self.neg_hessian(x, curvature)?))
    }

    /// The curvature when it does not depend on `x` (linear-Gaussian models).
    fn constant_neg_hessian(&self, _curvature: Curvature) -> Option<DMatrix<f64>> {
        None
    }
}

/// Draws `n` i.i.d. particles from a Gaussian via its Cholesky factor.
pub fn init_ensemble(prior: &GaussianSpec, n: usize, rng: &mut Rng) -> Result<ParticleEnsemble> {
    if n == 0 {
        return Err(Error::InvalidArgument("particle count must be positive".into()));
    }
    let d = prior.dim();
    let l = cholesky(&prior.covariance)?;
    let mut z = DMatrix::<f64>::zeros(d, n);
    for j in 0..n {
        for i in 0..d {
            z[(i, j)] = StandardNormal.sample(rng);
        }
    }
    let mut x = l * z;
    for mut c in x.column_iter_mut() {
        c += &prior.mean;
    }
    ParticleEnsemble::from_columns(x)
}

/// Evaluates per-particle gradients and (optionally) curvature in parallel.
///
/// Results are collected in particle order, so the output does not depend on
/// the thread count.
pub fn evaluate_particles(
    ensemble: &ParticleEnsemble,
    model: &dyn TargetModel,
    curvature: Option<Curvature>,
) -> Result<Vec<PointEval>> {
    if model.dim() != ensemble.dim() {
        return Err(Error::Dimension {
            expected: model.dim(),
            found: ensemble.dim(),
        });
    }
    let constant = curvature.and_then(|c| model.constant_neg_hessian(c));
    (0..ensemble.len())
        .into_par_iter()
        .map(|i| {
            let x = ensemble.particle(i);
            let (grad, h) = match (curvature, &constant) {
                (Some(_), Some(_)) | (None, _) => (model.grad_log_density(&x)?, None),
                (Some(c), None) => {
                    let (g, h) = model.grad_and_neg_hessian(&x, c)?;
                    (g, Some(h))
                }
            };
            if grad.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteParticle {
                    what: "log-density gradient",
                    index: i,
                });
            }
            if h.as_ref().is_some_and(|h| h.iter().any(|v| !v.is_finite())) {
                return Err(Error::NonFiniteParticle {
                    what: "curvature",
                    index: i,
                });
            }
            Ok(PointEval { grad, neg_hessian: h })
        })
        .collect()
}

/// Largest relative discrepancy between `grad_log_density` and central finite
/// differences of `log_density` with step `h`.
///
/// Each coordinate's error is scaled by `max(|g_fd|, |g|, 1)`, which makes
/// the measure relative for large gradients and absolute near zero.
pub fn grad_check(model: &dyn TargetModel, x: &DVector<f64>, h: f64) -> Result<f64> {
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!("step must be positive, got {h}")));
    }
    let g = model.grad_log_density(x)?;
    if g.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("gradient"));
    }
    let mut worst = 0.0_f64;
    for i in 0..x.len() {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[i] += h;
        xm[i] -= h;
        let (fp, fm) = (model.log_density(&xp)?, model.log_density(&xm)?);
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite("log-density on finite-difference stencil"));
        }
        let fd = (fp - fm) / (2.0 * h);
        let scale = fd.abs().max(g[i].abs()).max(1.0);
        worst = worst.max((fd - g[i]).abs() / scale);
    }
    Ok(worst)
}
