//! Benchmark posteriors with Gaussian priors and additive Gaussian noise,
//!
//! `log π(x) = −½(x − m)ᵀC⁻¹(x − m) − ‖y − F(x)‖²/(2σ²)`,
//!
//! where the normalizing constant is dropped.

mod banana;
mod diffusion;
mod linear;
mod regression;

use std::collections::BTreeMap;
use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::ensemble::{Curvature, GaussianSpec, TargetModel};
use crate::error::{Error, Result};

pub use banana::{double_banana, double_banana_with_data, LogRosenbrock, ROSENBROCK_FLOOR};
pub use diffusion::{conditioned_diffusion, LangevinObservation};
pub use linear::{linear_gaussian, linear_gaussian_from_parts, AnalyticPosterior, LinearForward, LinearVariant};
pub use regression::{nonlinear_regression, nonlinear_regression_with, CubicRegression};

/// A differentiable parameter-to-observable map `F: Rᵈ → Rᵐ`.
pub trait ForwardMap: Send + Sync + fmt::Debug {
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn eval(&self, x: &DVector<f64>) -> Result<DVector<f64>>;
    /// `F(x)` and the `m × d` Jacobian.
    fn eval_with_jacobian(&self, x: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)>;
    /// Hessians `∇²F_i(x)` of each output, for maps where they are derived.
    fn output_hessians(&self, _x: &DVector<f64>) -> Option<Result<Vec<DMatrix<f64>>>> {
        None
    }
    fn constant_jacobian(&self) -> Option<DMatrix<f64>> {
        None
    }
}

/// The data realization behind a problem instance. Stored in run reports.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DataRealization {
    pub x_true: Vec<f64>,
    pub y: Vec<f64>,
    /// Problem-specific constants such as regression coefficients.
    #[serde(default)]
    pub constants: BTreeMap<String, Vec<f64>>,
}

/// Gaussian prior, forward map, noise level, and observed data.
#[derive(Debug)]
pub struct BayesModel {
    prior: GaussianSpec,
    forward: Box<dyn ForwardMap>,
    noise_sd: f64,
    data: DVector<f64>,
    realization: DataRealization,
}

impl BayesModel {
    pub fn new(
        prior: GaussianSpec,
        forward: Box<dyn ForwardMap>,
        noise_sd: f64,
        data: DVector<f64>,
        realization: DataRealization,
    ) -> Result<Self> {
        if forward.input_dim() != prior.dim() {
            return Err(Error::Dimension {
                expected: prior.dim(),
                found: forward.input_dim(),
            });
        }
        if forward.output_dim() != data.len() {
            return Err(Error::Dimension {
                expected: forward.output_dim(),
                found: data.len(),
            });
        }
        if !(noise_sd > 0.0) {
            return Err(Error::InvalidArgument(format!("noise sd must be positive, got {noise_sd}")));
        }
        Ok(Self {
            prior,
            forward,
            noise_sd,
            data,
            realization,
        })
    }

    pub fn prior(&self) -> &GaussianSpec {
        &self.prior
    }

    pub fn forward(&self) -> &dyn ForwardMap {
        self.forward.as_ref()
    }

    pub fn noise_sd(&self) -> f64 {
        self.noise_sd
    }

    pub fn data(&self) -> &DVector<f64> {
        &self.data
    }

    pub fn realization(&self) -> &DataRealization {
        &self.realization
    }

    fn check(&self, x: &DVector<f64>) -> Result<()> {
        if x.len() != self.prior.dim() {
            return Err(Error::Dimension {
                expected: self.prior.dim(),
                found: x.len(),
            });
        }
        Ok(())
    }

    fn gauss_newton(&self, jac: &DMatrix<f64>) -> DMatrix<f64> {
        let s2 = self.noise_sd * self.noise_sd;
        &self.prior.precision + jac.tr_mul(jac) / s2
    }
}

impl TargetModel for BayesModel {
    fn dim(&self) -> usize {
        self.prior.dim()
    }

    fn log_density(&self, x: &DVector<f64>) -> Result<f64> {
        self.check(x)?;
        let dx = x - &self.prior.mean;
        let prior = -0.5 * dx.dot(&(&self.prior.precision * &dx));
        let r = &self.data - self.forward.eval(x)?;
        Ok(prior - r.norm_squared() / (2.0 * self.noise_sd * self.noise_sd))
    }

    fn grad_log_density(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.check(x)?;
        let (f, jac) = self.forward.eval_with_jacobian(x)?;
        let r = &self.data - f;
        let s2 = self.noise_sd * self.noise_sd;
        Ok(-(&self.prior.precision * (x - &self.prior.mean)) + jac.tr_mul(&r) / s2)
    }

    fn neg_hessian(&self, x: &DVector<f64>, curvature: Curvature) -> Result<DMatrix<f64>> {
        Ok(self.grad_and_neg_hessian(x, curvature)?.1)
    }

    fn grad_and_neg_hessian(
        &self,
        x: &DVector<f64>,
        curvature: Curvature,
    ) -> Result<(DVector<f64>, DMatrix<f64>)> {
        self.check(x)?;
        let (f, jac) = self.forward.eval_with_jacobian(x)?;
        let r = &self.data - f;
        let s2 = self.noise_sd * self.noise_sd;
        let grad = -(&self.prior.precision * (x - &self.prior.mean)) + jac.tr_mul(&r) / s2;
        let mut h = self.gauss_newton(&jac);
        if curvature == Curvature::Exact && self.forward.constant_jacobian().is_none() {
            let hessians = self
                .forward
                .output_hessians(x)
                .ok_or(Error::Unsupported("exact Hessian"))??;
            for (ri, hi) in r.iter().zip(&hessians) {
                h -= hi * (*ri / s2);
            }
        }
        Ok((grad, h))
    }

    fn constant_neg_hessian(&self, _curvature: Curvature) -> Option<DMatrix<f64>> {
        self.forward.constant_jacobian().map(|j| self.gauss_newton(&j))
    }
}

/// A Gaussian target `N(μ, Σ)`.
#[derive(Debug, Clone)]
pub struct GaussianTarget {
    spec: GaussianSpec,
}

impl GaussianTarget {
    pub fn new(spec: GaussianSpec) -> Self {
        Self { spec }
    }

    pub fn spec(&self) -> &GaussianSpec {
        &self.spec
    }
}

impl TargetModel for GaussianTarget {
    fn dim(&self) -> usize {
        self.spec.dim()
    }

    fn log_density(&self, x: &DVector<f64>) -> Result<f64> {
        let dx = x - &self.spec.mean;
        Ok(-0.5 * dx.dot(&(&self.spec.precision * &dx)))
    }

    fn grad_log_density(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(-(&self.spec.precision * (x - &self.spec.mean)))
    }

    fn neg_hessian(&self, _x: &DVector<f64>, _curvature: Curvature) -> Result<DMatrix<f64>> {
        Ok(self.spec.precision.clone())
    }

    fn constant_neg_hessian(&self, _curvature: Curvature) -> Option<DMatrix<f64>> {
        Some(self.spec.precision.clone())
    }
}

#[cfg(test)]
pub(crate) mod test_util {
    use super::*;
    use crate::ensemble::grad_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    /// Central-difference Jacobian of a forward map.
    pub fn fd_jacobian(f: &dyn ForwardMap, x: &DVector<f64>, h: f64) -> DMatrix<f64> {
        let m = f.output_dim();
        let mut jac = DMatrix::zeros(m, x.len());
        for j in 0..x.len() {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp[j] += h;
            xm[j] -= h;
            let col = (f.eval(&xp).unwrap() - f.eval(&xm).unwrap()) / (2.0 * h);
            jac.set_column(j, &col);
        }
        jac
    }

    /// Max relative error over random points, skipping points rejected by `keep`.
    pub fn worst_grad_error(
        model: &dyn TargetModel,
        points: usize,
        spread: f64,
        seed: u64,
        keep: impl Fn(&DVector<f64>) -> bool,
    ) -> f64 {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut worst = 0.0_f64;
        let mut tested = 0;
        while tested < points {
            let x = DVector::from_fn(model.dim(), |_, _| rng.gen_range(-spread..spread));
            if !keep(&x) {
                continue;
            }
            tested += 1;
            worst = worst.max(grad_check(model, &x, 1e-5).unwrap());
        }
        worst
    }

    pub fn assert_spd(a: &DMatrix<f64>) {
        assert!((a - a.transpose()).amax() <= 1e-12 * a.amax().max(1.0));
        crate::linsolve::cholesky(a).expect("SPD");
    }
}
