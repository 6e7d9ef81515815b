//! Ensemble summaries and comparisons against known posteriors.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ensemble::{ParticleEnsemble, TargetModel};
use crate::error::{Error, Result};
use crate::problems::AnalyticPosterior;

/// Empirical 5%, 50%, and 95% quantiles of one coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantileBand {
    pub q05: f64,
    pub q50: f64,
    pub q95: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSummary {
    pub mean: DVector<f64>,
    /// Unbiased sample covariance (divisor `n − 1`).
    pub covariance: DMatrix<f64>,
    /// `(1/d) Σ_i mean_i`
    pub mean_average: f64,
    pub cov_trace: f64,
    pub quantile_bands: Vec<QuantileBand>,
}

/// Linear interpolation between order statistics of sorted data.
///
/// Position `p (m − 1)` in zero-based order-statistic indexing.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of empty data");
    let h = p.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

fn sorted(values: impl Iterator<Item = f64>) -> Vec<f64> {
    let mut v: Vec<f64> = values.collect();
    v.sort_by(f64::total_cmp);
    v
}

pub fn summarize(ensemble: &ParticleEnsemble) -> Result<EnsembleSummary> {
    let n = ensemble.len();
    if n < 2 {
        return Err(Error::InvalidArgument("summary needs at least two particles".into()));
    }
    let d = ensemble.dim();
    let mean = ensemble.mean();
    let mut centered = ensemble.positions().clone();
    for mut c in centered.column_iter_mut() {
        c -= &mean;
    }
    let mut covariance = &centered * centered.transpose() / (n - 1) as f64;
    for i in 0..d {
        for j in (i + 1)..d {
            let v = 0.5 * (covariance[(i, j)] + covariance[(j, i)]);
            covariance[(i, j)] = v;
            covariance[(j, i)] = v;
        }
    }
    let x = ensemble.positions();
    let quantile_bands = (0..d)
        .into_par_iter()
        .map(|i| {
            let s = sorted(x.row(i).iter().copied());
            QuantileBand {
                q05: quantile(&s, 0.05),
                q50: quantile(&s, 0.5),
                q95: quantile(&s, 0.95),
            }
        })
        .collect();
    Ok(EnsembleSummary {
        mean_average: mean.mean(),
        cov_trace: covariance.trace(),
        mean,
        covariance,
        quantile_bands,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PosteriorError {
    /// `|(1/d)Σ m̂_i − (1/d)Σ m_i|`
    pub mean_average_abs_err: f64,
    /// `|tr Ĉ − tr C| / tr C`
    pub trace_rel_err: f64,
    /// `‖m̂ − m‖ / ‖m‖`, or the absolute error when `m = 0`.
    pub mean_l2_rel_err: f64,
}

pub fn posterior_error(summary: &EnsembleSummary, analytic: &AnalyticPosterior) -> Result<PosteriorError> {
    if summary.mean.len() != analytic.mean.len() {
        return Err(Error::Dimension {
            expected: analytic.mean.len(),
            found: summary.mean.len(),
        });
    }
    let tr = analytic.covariance.trace();
    let mnorm = analytic.mean.norm();
    let diff = (&summary.mean - &analytic.mean).norm();
    Ok(PosteriorError {
        mean_average_abs_err: (summary.mean_average - analytic.mean.mean()).abs(),
        trace_rel_err: (summary.cov_trace - tr).abs() / tr,
        mean_l2_rel_err: if mnorm > 0.0 { diff / mnorm } else { diff },
    })
}

/// Fractions of particles with coordinate `axis` at or below / strictly
/// above `threshold`.
pub fn mode_split(ensemble: &ParticleEnsemble, axis: usize, threshold: f64) -> Result<(f64, f64)> {
    if axis >= ensemble.dim() {
        return Err(Error::InvalidArgument(format!(
            "axis {axis} out of range for dimension {}",
            ensemble.dim()
        )));
    }
    let n = ensemble.len() as f64;
    let below = ensemble.positions().row(axis).iter().filter(|&&v| v <= threshold).count() as f64;
    Ok((below / n, 1.0 - below / n))
}

/// Per-output `(q_lo, q_hi)` bands of a pushed-forward ensemble.
pub fn pushforward_bands<F>(ensemble: &ParticleEnsemble, pushforward: F, lo: f64, hi: f64) -> Result<Vec<(f64, f64)>>
where
    F: Fn(&DVector<f64>) -> Result<DVector<f64>> + Sync,
{
    let outputs: Vec<DVector<f64>> = (0..ensemble.len())
        .into_par_iter()
        .map(|i| pushforward(&ensemble.particle(i)))
        .collect::<Result<_>>()?;
    let m = outputs.first().map_or(0, |o| o.len());
    if let Some(bad) = outputs.iter().find(|o| o.len() != m) {
        return Err(Error::Dimension {
            expected: m,
            found: bad.len(),
        });
    }
    Ok((0..m)
        .map(|t| {
            let s = sorted(outputs.iter().map(|o| o[t]));
            (quantile(&s, lo), quantile(&s, hi))
        })
        .collect())
}

/// Fraction of `truth` entries inside the empirical 90% band of the
/// pushed-forward ensemble.
pub fn band_coverage<F>(ensemble: &ParticleEnsemble, pushforward: F, truth: &[f64]) -> Result<f64>
where
    F: Fn(&DVector<f64>) -> Result<DVector<f64>> + Sync,
{
    let bands = pushforward_bands(ensemble, pushforward, 0.05, 0.95)?;
    if bands.len() != truth.len() {
        return Err(Error::Dimension {
            expected: bands.len(),
            found: truth.len(),
        });
    }
    if truth.is_empty() {
        return Ok(1.0);
    }
    let inside = bands
        .iter()
        .zip(truth)
        .filter(|((lo, hi), t)| lo <= *t && *t <= hi)
        .count();
    Ok(inside as f64 / truth.len() as f64)
}

/// Ensemble average of `log π`, summed in particle order.
pub fn mean_log_density(ensemble: &ParticleEnsemble, model: &dyn TargetModel) -> Result<f64> {
    let values: Vec<f64> = (0..ensemble.len())
        .into_par_iter()
        .map(|i| model.log_density(&ensemble.particle(i)))
        .collect::<Result<_>>()?;
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

/// Root-mean-square difference between two equal-length sequences.
pub fn rmse(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Dimension {
            expected: a.len(),
            found: b.len(),
        });
    }
    Ok((a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64).sqrt())
}
