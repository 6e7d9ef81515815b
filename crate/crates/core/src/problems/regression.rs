use nalgebra::{DMatrix, DVector};

use super::{BayesModel, DataRealization, ForwardMap};
use crate::ensemble::{seeded_rng, standard_normals, GaussianSpec, Stream};
use crate::error::Result;

const NOISE_SD: f64 = 0.3;

/// `F(x) = c₁x₁³ + c₂x₂`.
#[derive(Debug, Clone, Copy)]
pub struct CubicRegression {
    pub c: [f64; 2],
}

impl ForwardMap for CubicRegression {
    fn input_dim(&self) -> usize {
        2
    }

    fn output_dim(&self) -> usize {
        1
    }

    fn eval(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(DVector::from_element(1, self.c[0] * x[0].powi(3) + self.c[1] * x[1]))
    }

    fn eval_with_jacobian(&self, x: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let jac = DMatrix::from_row_slice(1, 2, &[3.0 * self.c[0] * x[0] * x[0], self.c[1]]);
        Ok((self.eval(x)?, jac))
    }

    fn output_hessians(&self, x: &DVector<f64>) -> Option<Result<Vec<DMatrix<f64>>>> {
        let mut h = DMatrix::zeros(2, 2);
        h[(0, 0)] = 6.0 * self.c[0] * x[0];
        Some(Ok(vec![h]))
    }
}

/// Cubic regression with coefficients, true parameter, and noise all drawn
/// from the data stream (in that order).
pub fn nonlinear_regression(seed: u64) -> Result<BayesModel> {
    let mut rng = seeded_rng(seed, Stream::Data);
    let c = standard_normals(&mut rng, 2);
    let x_true = standard_normals(&mut rng, 2);
    let map = CubicRegression { c: [c[0], c[1]] };
    let y = map.eval(&x_true)?[0] + NOISE_SD * standard_normals(&mut rng, 1)[0];
    let mut realization = DataRealization {
        x_true: x_true.iter().copied().collect(),
        y: vec![y],
        ..Default::default()
    };
    realization.constants.insert("c".into(), vec![c[0], c[1]]);
    nonlinear_regression_with(map.c, y, realization)
}

/// Cubic regression with explicit coefficients and observation.
pub fn nonlinear_regression_with(c: [f64; 2], y: f64, realization: DataRealization) -> Result<BayesModel> {
    BayesModel::new(
        GaussianSpec::standard(2),
        Box::new(CubicRegression { c }),
        NOISE_SD,
        DVector::from_element(1, y),
        realization,
    )
}
