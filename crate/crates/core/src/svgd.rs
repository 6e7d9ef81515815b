//! Stein variational gradient descent.

use nalgebra::{DMatrix, DVector};

use crate::ensemble::{evaluate_particles, ParticleEnsemble, TargetModel};
use crate::error::{Error, Result};
use crate::kernels::{GramMatrix, MetricState};

/// Update directions evaluated at the particles, one column per particle
/// (`d × n`, the same layout as [`ParticleEnsemble::positions`]).
#[derive(Debug, Clone, PartialEq)]
pub struct DirectionField {
    values: DMatrix<f64>,
}

impl DirectionField {
    pub(crate) fn new(values: DMatrix<f64>) -> Result<Self> {
        if let Some(i) = (0..values.ncols()).find(|&i| values.column(i).iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFiniteParticle {
                what: "update direction",
                index: i,
            });
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn at(&self, i: usize) -> DVector<f64> {
        self.values.column(i).into_owned()
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.values
    }
}

/// Stacks per-particle gradients into a `d × n` matrix.
pub(crate) fn gradient_matrix(grads: impl ExactSizeIterator<Item = DVector<f64>>, d: usize) -> DMatrix<f64> {
    let n = grads.len();
    let mut m = DMatrix::zeros(d, n);
    for (j, g) in grads.enumerate() {
        m.set_column(j, &g);
    }
    m
}

/// `G(x_s) = (1/n) Σ_j [k_js ∇log π(x_j) + ∇ₓk(x_j, x_s)]` for every `s`.
///
/// With `∇ₓk(x_j, x_s) = −(k_js/g)(z_j − z_s)` the sum becomes
/// `(1/n)[∇log π · K − (1/g)(Z K − Z diag(1ᵀK))]`.
pub(crate) fn stein_direction(grads: &DMatrix<f64>, gram: &GramMatrix) -> DMatrix<f64> {
    let n = gram.len();
    let k = gram.values();
    let z = gram.mapped();
    let col_sums = DVector::from_iterator(n, k.column_iter().map(|c| c.sum()));
    let mut repulsion = z * k;
    for (s, mut c) in repulsion.column_iter_mut().enumerate() {
        c.axpy(-col_sums[s], &z.column(s), 1.0);
    }
    let mut g = grads * k;
    g -= repulsion / gram.scale();
    g / n as f64
}

pub(crate) fn check_sampler_dims(ensemble: &ParticleEnsemble, model: &dyn TargetModel, metric: &MetricState) -> Result<()> {
    for found in [model.dim(), metric.dim()] {
        if found != ensemble.dim() {
            return Err(Error::Dimension {
                expected: ensemble.dim(),
                found,
            });
        }
    }
    Ok(())
}

/// The empirical Stein variational gradient at each particle.
pub fn svgd_direction(
    ensemble: &ParticleEnsemble,
    model: &dyn TargetModel,
    metric: &MetricState,
) -> Result<DirectionField> {
    check_sampler_dims(ensemble, model, metric)?;
    let evals = evaluate_particles(ensemble, model, None)?;
    let grads = gradient_matrix(evals.into_iter().map(|e| e.grad), ensemble.dim());
    let gram = GramMatrix::new(metric, ensemble);
    DirectionField::new(stein_direction(&grads, &gram))
}

/// One SVGD iteration, `x_i ← x_i + ε G(x_i)`, all from the same snapshot.
pub fn svgd_step(
    ensemble: &ParticleEnsemble,
    model: &dyn TargetModel,
    metric: &MetricState,
    step: f64,
) -> Result<ParticleEnsemble> {
    if !step.is_finite() || step < 0.0 {
        return Err(Error::InvalidArgument(format!("step size must be finite and non-negative, got {step}")));
    }
    let dir = svgd_direction(ensemble, model, metric)?;
    ensemble.advanced(dir.values(), step)
}
