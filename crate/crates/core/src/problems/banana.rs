use nalgebra::{DMatrix, DVector};

use super::{BayesModel, DataRealization, ForwardMap};
use crate::ensemble::{seeded_rng, standard_normals, GaussianSpec, Stream};
use crate::error::{Error, Result};

/// Floor added inside the logarithm so that `F` stays finite at `(1, 1)`.
pub const ROSENBROCK_FLOOR: f64 = 1e-12;

const NOISE_SD: f64 = 0.3;

/// `F(x) = log((1 − x₁)² + 100(x₂ − x₁²)² + δ)`.
#[derive(Debug, Clone, Copy, Default)]
pub struct LogRosenbrock;

impl LogRosenbrock {
    fn parts(x: &DVector<f64>) -> (f64, [f64; 2]) {
        let (a, b) = (x[0], x[1]);
        let w = b - a * a;
        let q = (1.0 - a).powi(2) + 100.0 * w * w + ROSENBROCK_FLOOR;
        let grad = [-2.0 * (1.0 - a) - 400.0 * a * w, 200.0 * w];
        (q, grad)
    }
}

impl ForwardMap for LogRosenbrock {
    fn input_dim(&self) -> usize {
        2
    }

    fn output_dim(&self) -> usize {
        1
    }

    fn eval(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let (q, _) = Self::parts(x);
        Ok(DVector::from_element(1, q.ln()))
    }

    fn eval_with_jacobian(&self, x: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let (q, g) = Self::parts(x);
        Ok((
            DVector::from_element(1, q.ln()),
            DMatrix::from_row_slice(1, 2, &[g[0] / q, g[1] / q]),
        ))
    }

    fn output_hessians(&self, x: &DVector<f64>) -> Option<Result<Vec<DMatrix<f64>>>> {
        let (a, b) = (x[0], x[1]);
        let (q, g) = Self::parts(x);
        let r11 = 2.0 - 400.0 * (b - a * a) + 800.0 * a * a;
        let r12 = -400.0 * a;
        let r22 = 200.0;
        let h = DMatrix::from_row_slice(
            2,
            2,
            &[
                r11 / q - g[0] * g[0] / (q * q),
                r12 / q - g[0] * g[1] / (q * q),
                r12 / q - g[1] * g[0] / (q * q),
                r22 / q - g[1] * g[1] / (q * q),
            ],
        );
        Some(Ok(vec![h]))
    }
}

/// Bimodal, banana-shaped posterior: standard normal prior, one
/// observation of the log-Rosenbrock function with noise sd 0.3.
pub fn double_banana(seed: u64) -> Result<BayesModel> {
    let mut rng = seeded_rng(seed, Stream::Data);
    let x_true = standard_normals(&mut rng, 2);
    let noise = standard_normals(&mut rng, 1)[0] * NOISE_SD;
    let y = LogRosenbrock.eval(&x_true)?[0] + noise;
    let realization = DataRealization {
        x_true: x_true.iter().copied().collect(),
        y: vec![y],
        ..Default::default()
    };
    double_banana_with_data(y, realization)
}

/// Double banana with an explicit observation.
pub fn double_banana_with_data(y: f64, realization: DataRealization) -> Result<BayesModel> {
    if !y.is_finite() {
        return Err(Error::NonFinite("observation"));
    }
    BayesModel::new(
        GaussianSpec::standard(2),
        Box::new(LogRosenbrock),
        NOISE_SD,
        DVector::from_element(1, y),
        realization,
    )
}
