//! Gaussian kernels with a per-iteration metric.
//!
//! Both kernel families share one form,
//! `k(x, x') = exp(−(x − x')ᵀ M (x − x') / (2g))`:
//!
//! * isotropic: `M = (2/h) I`, `g = 1`, with `h` from the median heuristic,
//!   which gives `exp(−‖x − x'‖² / h)`;
//! * scaled Hessian: `M` is the ensemble average of the Gauss-Newton
//!   curvature and `g = g(d)` (the dimension by default).

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ensemble::{Curvature, ParticleEnsemble, PointEval, TargetModel};
use crate::error::{Error, Result};
use crate::linsolve::cholesky;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KernelVariant {
    Isotropic { bandwidth: f64 },
    ScaledHessian,
}

/// The scaling `g(d)` applied to the metric distance.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum Scaling {
    /// `g(d) = d`
    #[default]
    Dimension,
    Constant(f64),
}

impl Scaling {
    pub fn value(self, d: usize) -> f64 {
        match self {
            Scaling::Dimension => d as f64,
            Scaling::Constant(g) => g,
        }
    }
}

/// Kernel state for one iteration. Immutable once built.
#[derive(Debug, Clone)]
pub struct MetricState {
    metric: DMatrix<f64>,
    factor: DMatrix<f64>,
    scale: f64,
    variant: KernelVariant,
}

impl MetricState {
    /// Isotropic kernel `exp(−‖x − x'‖² / h)`.
    pub fn isotropic(bandwidth: f64, dim: usize) -> Result<Self> {
        if !(bandwidth > 0.0) || !bandwidth.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "bandwidth must be positive and finite, got {bandwidth}"
            )));
        }
        let c = 2.0 / bandwidth;
        Ok(Self {
            metric: DMatrix::identity(dim, dim) * c,
            factor: DMatrix::identity(dim, dim) * c.sqrt(),
            scale: 1.0,
            variant: KernelVariant::Isotropic { bandwidth },
        })
    }

    /// Anisotropic kernel with SPD metric `m` and scaling `g`.
    pub fn scaled_hessian(metric: DMatrix<f64>, g: f64) -> Result<Self> {
        if !(g > 0.0) || !g.is_finite() {
            return Err(Error::InvalidArgument(format!("kernel scaling must be positive, got {g}")));
        }
        let mut metric = metric;
        let n = metric.nrows();
        for i in 0..n {
            for j in (i + 1)..n {
                let m = 0.5 * (metric[(i, j)] + metric[(j, i)]);
                metric[(i, j)] = m;
                metric[(j, i)] = m;
            }
        }
        let factor = cholesky(&metric)?;
        Ok(Self {
            metric,
            factor,
            scale: g,
            variant: KernelVariant::ScaledHessian,
        })
    }

    pub fn metric(&self) -> &DMatrix<f64> {
        &self.metric
    }

    /// Lower Cholesky factor of the metric.
    pub fn factor(&self) -> &DMatrix<f64> {
        &self.factor
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn variant(&self) -> KernelVariant {
        self.variant
    }

    pub fn dim(&self) -> usize {
        self.metric.nrows()
    }
}

/// Kernel value and its gradient in the first argument.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelEval {
    pub value: f64,
    pub grad1: DVector<f64>,
}

pub fn evaluate(metric: &MetricState, x: &DVector<f64>, y: &DVector<f64>) -> KernelEval {
    let r = x - y;
    let mr = &metric.metric * &r;
    let value = (-r.dot(&mr) / (2.0 * metric.scale)).exp();
    let grad1 = mr * (-value / metric.scale);
    KernelEval { value, grad1 }
}

/// Median heuristic bandwidth `h = med² / ln n` over all pairwise distances.
pub fn median_bandwidth(ensemble: &ParticleEnsemble) -> Result<f64> {
    let n = ensemble.len();
    if n < 2 {
        return Err(Error::InvalidArgument(
            "median heuristic needs at least two particles".into(),
        ));
    }
    let x = ensemble.positions();
    let mut dists: Vec<f64> = (0..n)
        .into_par_iter()
        .flat_map_iter(|i| {
            (i + 1..n).map(move |j| {
                x.column(i)
                    .iter()
                    .zip(x.column(j).iter())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt()
            })
        })
        .collect();
    let m = dists.len();
    let med = if m % 2 == 1 {
        *dists.select_nth_unstable_by(m / 2, f64::total_cmp).1
    } else {
        let hi = *dists.select_nth_unstable_by(m / 2, f64::total_cmp).1;
        let lo = dists[..m / 2].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lo + hi)
    };
    if !(med > 0.0) {
        return Err(Error::DegenerateBandwidth);
    }
    Ok(med * med / (n as f64).ln())
}

/// Ensemble average of Gauss-Newton curvature, `M = (1/n) Σ A(x_i)`.
pub fn compute_metric(
    ensemble: &ParticleEnsemble,
    model: &dyn TargetModel,
    scaling: Scaling,
) -> Result<MetricState> {
    let g = scaling.value(ensemble.dim());
    if let Some(a) = model.constant_neg_hessian(Curvature::GaussNewton) {
        return MetricState::scaled_hessian(a, g);
    }
    let evals = crate::ensemble::evaluate_particles(ensemble, model, Some(Curvature::GaussNewton))?;
    metric_from_evals(&evals, None, ensemble.dim(), g)
}

/// Builds the scaled-Hessian metric from curvature already evaluated at each
/// particle, or from a model-wide constant curvature.
pub(crate) fn metric_from_evals(
    evals: &[PointEval],
    constant: Option<&DMatrix<f64>>,
    dim: usize,
    g: f64,
) -> Result<MetricState> {
    if let Some(a) = constant {
        return MetricState::scaled_hessian(a.clone(), g);
    }
    let mut m = DMatrix::zeros(dim, dim);
    for (i, e) in evals.iter().enumerate() {
        let a = e.neg_hessian.as_ref().ok_or(Error::NonFiniteParticle {
            what: "curvature (missing)",
            index: i,
        })?;
        m += a;
    }
    m /= evals.len() as f64;
    MetricState::scaled_hessian(m, g)
}

/// Pairwise kernel values over an ensemble, plus the metric-mapped,
/// centered positions `z_j = M (x_j − x̄)` used by gradient terms:
/// `∇ₓk(x_j, x_s) = −(1/g) k_js (z_j − z_s)`.
#[derive(Debug, Clone)]
pub struct GramMatrix {
    values: DMatrix<f64>,
    mapped: DMatrix<f64>,
    scale: f64,
}

impl GramMatrix {
    pub fn new(metric: &MetricState, ensemble: &ParticleEnsemble) -> Self {
        let n = ensemble.len();
        let mut centered = ensemble.positions().clone();
        let mean = ensemble.mean();
        for mut c in centered.column_iter_mut() {
            c -= &mean;
        }
        // ‖x − x'‖²_M = ‖Lᵀ(x − x')‖²
        let y = metric.factor.transpose() * &centered;
        let g = metric.scale;
        let rows: Vec<Vec<f64>> = (0..n)
            .into_par_iter()
            .map(|i| {
                let yi = y.column(i);
                (i + 1..n)
                    .map(|j| {
                        let d2: f64 = yi
                            .iter()
                            .zip(y.column(j).iter())
                            .map(|(a, b)| (a - b) * (a - b))
                            .sum();
                        (-d2 / (2.0 * g)).exp()
                    })
                    .collect()
            })
            .collect();
        let mut values = DMatrix::identity(n, n);
        for (i, row) in rows.iter().enumerate() {
            for (off, &v) in row.iter().enumerate() {
                let j = i + 1 + off;
                values[(i, j)] = v;
                values[(j, i)] = v;
            }
        }
        let mapped = &metric.metric * centered;
        Self {
            values,
            mapped,
            scale: g,
        }
    }

    /// Symmetric `n × n` matrix of `k(x_i, x_j)`.
    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    /// `d × n` matrix of `M (x_j − x̄)`.
    pub fn mapped(&self) -> &DMatrix<f64> {
        &self.mapped
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.nrows() == 0
    }

    /// `∇ₓ k(x_j, x_s)` from the cached values.
    pub fn grad1(&self, j: usize, s: usize) -> DVector<f64> {
        (self.mapped.column(j) - self.mapped.column(s)) * (-self.values[(j, s)] / self.scale)
    }
}
