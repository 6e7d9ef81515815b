use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use super::{BayesModel, DataRealization, ForwardMap};
use crate::ensemble::{seeded_rng, spd_inverse_from_factor, standard_normals, GaussianSpec, Stream};
use crate::error::{Error, Result};
use crate::linsolve::{cholesky, cholesky_solve};

const NOISE_SD: f64 = 0.3;

/// Prior family for the linear-Gaussian problem.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LinearVariant {
    /// Precision is the Dirichlet finite-difference Laplacian on `[0, 1]`.
    LaplacePrior,
    /// Standard normal prior with a random observation vector.
    IdentityPrior,
}

/// `F(x) = aᵀx`.
#[derive(Debug, Clone)]
pub struct LinearForward {
    pub a: DVector<f64>,
}

impl LinearForward {
    fn row(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(1, self.a.len(), self.a.as_slice())
    }
}

impl ForwardMap for LinearForward {
    fn input_dim(&self) -> usize {
        self.a.len()
    }

    fn output_dim(&self) -> usize {
        1
    }

    fn eval(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(DVector::from_element(1, self.a.dot(x)))
    }

    fn eval_with_jacobian(&self, x: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
        Ok((self.eval(x)?, self.row()))
    }

    fn output_hessians(&self, _x: &DVector<f64>) -> Option<Result<Vec<DMatrix<f64>>>> {
        let d = self.a.len();
        Some(Ok(vec![DMatrix::zeros(d, d)]))
    }

    fn constant_jacobian(&self) -> Option<DMatrix<f64>> {
        Some(self.row())
    }
}

/// Closed-form Gaussian posterior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyticPosterior {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
}

impl AnalyticPosterior {
    pub fn trace(&self) -> f64 {
        self.covariance.trace()
    }
}

fn laplacian(d: usize) -> DMatrix<f64> {
    let h = 1.0 / (d + 1) as f64;
    let mut k = DMatrix::zeros(d, d);
    for i in 0..d {
        k[(i, i)] = 2.0 / (h * h);
        if i + 1 < d {
            k[(i, i + 1)] = -1.0 / (h * h);
            k[(i + 1, i)] = -1.0 / (h * h);
        }
    }
    k
}

/// Linear-Gaussian problem with a seed-drawn data realization.
///
/// Data-stream draws, in order: the observation vector (identity prior
/// only), the true parameter, the observation noise.
pub fn linear_gaussian(variant: LinearVariant, d: usize, seed: u64) -> Result<(BayesModel, AnalyticPosterior)> {
    if d < 2 {
        return Err(Error::InvalidArgument(format!("linear-gaussian needs d >= 2, got {d}")));
    }
    let mut rng = seeded_rng(seed, Stream::Data);
    let (precision, a) = match variant {
        LinearVariant::LaplacePrior => {
            let h = 1.0 / (d + 1) as f64;
            (laplacian(d), DVector::from_fn(d, |i, _| (PI * (i + 1) as f64 * h).sin()))
        }
        LinearVariant::IdentityPrior => {
            let u = Uniform::new(2.0, 10.0);
            let a = DVector::from_iterator(d, (0..d).map(|_| u.sample(&mut rng)));
            (DMatrix::identity(d, d), a)
        }
    };
    let prior = GaussianSpec::from_precision(DVector::zeros(d), precision)?;
    let x_true = prior.sample(&mut rng)?;
    let y = a.dot(&x_true) + NOISE_SD * standard_normals(&mut rng, 1)[0];
    let mut realization = DataRealization {
        x_true: x_true.iter().copied().collect(),
        y: vec![y],
        ..Default::default()
    };
    realization.constants.insert("a".into(), a.iter().copied().collect());
    linear_gaussian_from_parts(prior, a, NOISE_SD, y, realization)
}

/// Linear-Gaussian problem from explicit parts. The posterior is formed in
/// precision form, `C_pos = (C_pr⁻¹ + aaᵀ/σ²)⁻¹`, `m_pos = C_pos(C_pr⁻¹m_pr + ya/σ²)`.
pub fn linear_gaussian_from_parts(
    prior: GaussianSpec,
    a: DVector<f64>,
    noise_sd: f64,
    y: f64,
    realization: DataRealization,
) -> Result<(BayesModel, AnalyticPosterior)> {
    let s2 = noise_sd * noise_sd;
    let q = &prior.precision + &a * a.transpose() / s2;
    let l = cholesky(&q)?;
    let rhs = &prior.precision * &prior.mean + &a * (y / s2);
    let posterior = AnalyticPosterior {
        mean: cholesky_solve(&l, &rhs),
        covariance: spd_inverse_from_factor(&l),
    };
    let model = BayesModel::new(
        prior,
        Box::new(LinearForward { a }),
        noise_sd,
        DVector::from_element(1, y),
        realization,
    )?;
    Ok((model, posterior))
}
