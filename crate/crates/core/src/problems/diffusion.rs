use nalgebra::{DMatrix, DVector};

use super::{BayesModel, DataRealization, ForwardMap};
use crate::ensemble::{seeded_rng, standard_normals, GaussianSpec, Stream};
use crate::error::{Error, Result};

/// Discretized double-well Langevin path observed at regular intervals.
///
/// The parameter is the vector of Brownian increments `x_k`; the state
/// starts at `u₀ = 0` and evolves as `u_{k+1} = u_k + f(u_k)Δt + x_k` with
/// drift `f(u) = βu(1 − u²)/(1 + u²)`.
#[derive(Debug, Clone, Copy)]
pub struct LangevinObservation {
    pub beta: f64,
    pub dt: f64,
    pub steps: usize,
    pub observe_every: usize,
}

impl Default for LangevinObservation {
    fn default() -> Self {
        Self {
            beta: 10.0,
            dt: 0.01,
            steps: 100,
            observe_every: 5,
        }
    }
}

impl LangevinObservation {
    fn drift(&self, u: f64) -> f64 {
        let u2 = u * u;
        self.beta * u * (1.0 - u2) / (1.0 + u2)
    }

    fn drift_prime(&self, u: f64) -> f64 {
        let u2 = u * u;
        self.beta * (1.0 - 4.0 * u2 - u2 * u2) / ((1.0 + u2) * (1.0 + u2))
    }

    fn check(&self, x: &DVector<f64>) -> Result<()> {
        if x.len() != self.steps {
            return Err(Error::Dimension {
                expected: self.steps,
                found: x.len(),
            });
        }
        Ok(())
    }

    /// The full state path `u₀, …, u_steps`.
    pub fn path(&self, x: &DVector<f64>) -> Result<Vec<f64>> {
        self.check(x)?;
        let mut u = Vec::with_capacity(self.steps + 1);
        u.push(0.0);
        for k in 0..self.steps {
            let next = u[k] + self.drift(u[k]) * self.dt + x[k];
            if !next.is_finite() {
                return Err(Error::NonFiniteState { step: k + 1 });
            }
            u.push(next);
        }
        Ok(u)
    }

    /// Step indices at which the state is observed.
    pub fn observation_steps(&self) -> Vec<usize> {
        (1..=self.output_dim()).map(|i| i * self.observe_every).collect()
    }
}

impl ForwardMap for LangevinObservation {
    fn input_dim(&self) -> usize {
        self.steps
    }

    fn output_dim(&self) -> usize {
        self.steps / self.observe_every
    }

    fn eval(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let path = self.path(x)?;
        Ok(DVector::from_iterator(
            self.output_dim(),
            self.observation_steps().into_iter().map(|k| path[k]),
        ))
    }

    fn eval_with_jacobian(&self, x: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let path = self.path(x)?;
        let m = self.output_dim();
        let mut jac = DMatrix::zeros(m, self.steps);
        // sensitivity ∂u_k/∂x, nonzero only in the first k entries
        let mut s = vec![0.0; self.steps];
        let mut row = 0;
        for k in 0..self.steps {
            let a = 1.0 + self.drift_prime(path[k]) * self.dt;
            for v in &mut s[..k] {
                *v *= a;
            }
            s[k] = 1.0;
            if (k + 1) % self.observe_every == 0 && row < m {
                for (j, v) in s[..=k].iter().enumerate() {
                    jac[(row, j)] = *v;
                }
                row += 1;
            }
        }
        let f = DVector::from_iterator(m, self.observation_steps().into_iter().map(|k| path[k]));
        Ok((f, jac))
    }
}

const NOISE_SD: f64 = 0.1;

/// 100-dimensional path reconstruction from 20 noisy observations.
///
/// The prior on increments is `N(0, Δt·I)`, so the prior on paths is
/// Brownian motion started at zero.
pub fn conditioned_diffusion(seed: u64) -> Result<BayesModel> {
    let map = LangevinObservation::default();
    let d = map.steps;
    let mut rng = seeded_rng(seed, Stream::Data);
    let x_true = standard_normals(&mut rng, d) * map.dt.sqrt();
    let noise = standard_normals(&mut rng, map.output_dim()) * NOISE_SD;
    let y = map.eval(&x_true)? + noise;
    let realization = DataRealization {
        x_true: x_true.iter().copied().collect(),
        y: y.iter().copied().collect(),
        ..Default::default()
    };
    let prior = GaussianSpec {
        mean: DVector::zeros(d),
        covariance: DMatrix::identity(d, d) * map.dt,
        precision: DMatrix::identity(d, d) / map.dt,
    };
    BayesModel::new(prior, Box::new(map), NOISE_SD, y, realization)
}
