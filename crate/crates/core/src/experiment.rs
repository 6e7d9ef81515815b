//! Experiment orchestration: runs, strategy comparisons, and the
//! discretization study.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use nalgebra::DVector;

use crate::config::{Budget, CompareConfig, KernelConfig, ProblemConfig, RunConfig, SamplerConfig, ValidateConfig};
use crate::diagnostics::{band_coverage, mean_log_density, mode_split, posterior_error, rmse, summarize, EnsembleSummary};
use crate::ensemble::{evaluate_particles, init_ensemble, seeded_rng, Curvature, ParticleEnsemble, Stream, TargetModel};
use crate::error::{Error, Result};
use crate::io::{particles_file_name, save_particles};
use crate::kernels::{compute_metric, median_bandwidth, metric_from_evals, GramMatrix, MetricState, Scaling};
use crate::plot::scatter_svg;
use crate::problems::{
    conditioned_diffusion, double_banana, linear_gaussian, nonlinear_regression, AnalyticPosterior, BayesModel,
};
use crate::report::{
    AnalyticMoments, CheckpointReport, ComparisonReport, IterationReport, MomentDiscrepancy, ProblemInfo, RunReport,
    RunStatus, TableRow, Timing, ValidationTables, VariantSummary, REPORT_VERSION,
};
use crate::svgd::{gradient_matrix, stein_direction, DirectionField};
use crate::svn::{assemble_from_evals, newton_direction};

/// A benchmark model together with its closed-form posterior, when known.
#[derive(Debug)]
pub struct ProblemInstance {
    pub model: BayesModel,
    pub analytic: Option<AnalyticPosterior>,
}

pub fn build_problem(problem: &ProblemConfig, seed: u64) -> Result<ProblemInstance> {
    let (model, analytic) = match *problem {
        ProblemConfig::DoubleBanana => (double_banana(seed)?, None),
        ProblemConfig::NonlinearRegression => (nonlinear_regression(seed)?, None),
        ProblemConfig::ConditionedDiffusion => (conditioned_diffusion(seed)?, None),
        ProblemConfig::LinearGaussian { variant, dim } => {
            let (m, a) = linear_gaussian(variant, dim, seed)?;
            (m, Some(a))
        }
    };
    Ok(ProblemInstance { model, analytic })
}

/// One sampler iteration from `ensemble`, whose iteration counter selects
/// the decayed step size.
pub fn sampler_step(
    ensemble: &ParticleEnsemble,
    model: &dyn TargetModel,
    sampler: &SamplerConfig,
) -> Result<(ParticleEnsemble, IterationReport)> {
    let d = ensemble.dim();
    let step = sampler.step_at(ensemble.iteration());
    let svn = sampler.algorithm.svn_options();
    let eval_curvature = match (svn, sampler.kernel) {
        (Some(o), _) => Some(o.curvature),
        (None, KernelConfig::ScaledHessian { .. }) => Some(Curvature::GaussNewton),
        (None, KernelConfig::Isotropic) => None,
    };
    let evals = evaluate_particles(ensemble, model, eval_curvature)?;
    let (metric, bandwidth) = match sampler.kernel {
        KernelConfig::Isotropic => {
            let h = median_bandwidth(ensemble)?;
            (MetricState::isotropic(h, d)?, Some(h))
        }
        KernelConfig::ScaledHessian { g } => {
            let g = g.unwrap_or(d as f64);
            let constant = model.constant_neg_hessian(Curvature::GaussNewton);
            let metric = if constant.is_some() || eval_curvature == Some(Curvature::GaussNewton) {
                metric_from_evals(&evals, constant.as_ref(), d, g)?
            } else {
                compute_metric(ensemble, model, Scaling::Constant(g))?
            };
            (metric, None)
        }
    };
    let (direction, solve) = match svn {
        None => {
            let grads = gradient_matrix(evals.iter().map(|e| e.grad.clone()), d);
            let gram = GramMatrix::new(&metric, ensemble);
            (DirectionField::new(stein_direction(&grads, &gram))?.into_inner(), None)
        }
        Some(o) => {
            let constant = model.constant_neg_hessian(o.curvature);
            let system = assemble_from_evals(
                ensemble,
                &evals,
                constant.as_ref(),
                &metric,
                o.strategy.system_mode(),
                o.dense_limit,
            )?;
            let (direction, report) = newton_direction(&system, &o)?;
            (direction, Some(report))
        }
    };
    let record = IterationReport {
        iteration: ensemble.iteration(),
        step_size: step,
        bandwidth,
        solve,
    };
    Ok((ensemble.advanced(&direction, step)?, record))
}

fn checkpoint_report(
    ensemble: &ParticleEnsemble,
    problem: &ProblemConfig,
    instance: &ProblemInstance,
) -> Result<CheckpointReport> {
    let model = &instance.model;
    let summary = summarize(ensemble)?;
    let posterior_error = instance
        .analytic
        .as_ref()
        .map(|a| posterior_error(&summary, a))
        .transpose()?;
    let mut diagnostics = BTreeMap::new();
    match problem {
        ProblemConfig::DoubleBanana | ProblemConfig::NonlinearRegression => {
            let (below, above) = mode_split(ensemble, 0, 0.0)?;
            diagnostics.insert("mode_fraction_below".into(), below);
            diagnostics.insert("mode_fraction_above".into(), above);
        }
        ProblemConfig::ConditionedDiffusion => {
            let forward = model.forward();
            let y: Vec<f64> = model.data().iter().copied().collect();
            let coverage = band_coverage(ensemble, |x| forward.eval(x), &y)?;
            let mut predictive = DVector::zeros(y.len());
            for x in ensemble.particles() {
                predictive += forward.eval(&x)?;
            }
            predictive /= ensemble.len() as f64;
            diagnostics.insert("band_coverage".into(), coverage);
            diagnostics.insert("predictive_rmse".into(), rmse(predictive.as_slice(), &y)?);
        }
        ProblemConfig::LinearGaussian { .. } => {}
    }
    Ok(CheckpointReport {
        iteration: ensemble.iteration(),
        particles_file: particles_file_name(ensemble.iteration()),
        summary,
        mean_log_density: mean_log_density(ensemble, model)?,
        posterior_error,
        diagnostics,
    })
}

/// The outcome of [`execute`]; a failed iteration leaves an incomplete
/// report and the last good ensemble.
#[derive(Debug)]
pub struct RunOutcome {
    pub report: RunReport,
    pub final_ensemble: ParticleEnsemble,
}

impl RunOutcome {
    pub fn is_complete(&self) -> bool {
        self.report.status == RunStatus::Complete
    }
}

/// Runs a configuration, handing every checkpointed ensemble to `sink`.
///
/// Iterations run sequentially. Under a wall-clock budget the in-flight
/// iteration always completes. The final state is always checkpointed.
pub fn execute(config: &RunConfig, sink: &mut dyn FnMut(&ParticleEnsemble) -> Result<()>) -> Result<RunOutcome> {
    config.validate()?;
    let instance = build_problem(&config.problem, config.seed)?;
    let model = &instance.model;
    let sampler = config.sampler();
    let start = Instant::now();
    let mut ensemble = init_ensemble(model.prior(), config.n, &mut seeded_rng(config.seed, Stream::Particles))?;
    let wanted = config.checkpoint_list();
    let mut checkpoints = Vec::new();
    let mut iterations = Vec::new();
    let mut per_iteration_seconds = Vec::new();
    let mut error = None;

    let mut record = |e: &ParticleEnsemble, checkpoints: &mut Vec<CheckpointReport>| -> Result<()> {
        checkpoints.push(checkpoint_report(e, &config.problem, &instance)?);
        sink(e)
    };

    let outcome: Result<()> = (|| {
        if wanted.binary_search(&0).is_ok() {
            record(&ensemble, &mut checkpoints)?;
        }
        loop {
            let done = match config.budget {
                Budget::Iterations(k) => ensemble.iteration() >= k,
                Budget::WallclockSeconds(t) => start.elapsed().as_secs_f64() >= t,
            };
            if done {
                break;
            }
            let t0 = Instant::now();
            let (next, info) = sampler_step(&ensemble, model, &sampler)?;
            per_iteration_seconds.push(t0.elapsed().as_secs_f64());
            iterations.push(info);
            ensemble = next;
            log::debug!("iteration {} done", ensemble.iteration());
            if wanted.binary_search(&ensemble.iteration()).is_ok() {
                record(&ensemble, &mut checkpoints)?;
            }
        }
        Ok(())
    })();
    if let Err(e) = outcome {
        if matches!(e, Error::Io(_)) {
            return Err(e);
        }
        log::warn!("run stopped at iteration {}: {e}", ensemble.iteration());
        error = Some(e.to_string());
    }
    if checkpoints.last().map(|c| c.iteration) != Some(ensemble.iteration()) {
        if let Err(e) = record(&ensemble, &mut checkpoints) {
            if matches!(e, Error::Io(_)) {
                return Err(e);
            }
            error.get_or_insert(e.to_string());
        }
    }
    let report = RunReport {
        report_version: REPORT_VERSION,
        config: config.clone(),
        status: if error.is_none() {
            RunStatus::Complete
        } else {
            RunStatus::Incomplete
        },
        error,
        problem: ProblemInfo {
            name: config.problem.name().into(),
            dim: model.dim(),
            data: model.realization().clone(),
            analytic: instance.analytic.as_ref().map(|a| AnalyticMoments {
                mean_average: a.mean.mean(),
                cov_trace: a.trace(),
            }),
        },
        iterations_completed: ensemble.iteration(),
        checkpoints,
        iterations,
        timing: Timing {
            total_seconds: start.elapsed().as_secs_f64(),
            per_iteration_seconds,
        },
    };
    Ok(RunOutcome {
        report,
        final_ensemble: ensemble,
    })
}

pub fn write_json<T: serde::Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

/// Runs and writes `particles_<iter>.csv`, `report.json`, and, for
/// two-dimensional problems when `plots` is set, `scatter_<iter>.svg`.
pub fn run_to_dir(config: &RunConfig, out_dir: &Path, plots: bool) -> Result<RunOutcome> {
    std::fs::create_dir_all(out_dir)?;
    let plot = plots && config.problem.dim() == 2;
    let title = config.problem.name();
    let outcome = execute(config, &mut |e| {
        save_particles(e, out_dir)?;
        if plot {
            std::fs::write(out_dir.join(format!("scatter_{}.svg", e.iteration())), scatter_svg(e, title))?;
        }
        Ok(())
    })?;
    write_json(&outcome.report, &out_dir.join("report.json"))?;
    Ok(outcome)
}

fn rel_diff(a: f64, b: f64) -> f64 {
    let scale = 0.5 * (a.abs() + b.abs());
    if scale > 0.0 {
        (a - b).abs() / scale
    } else {
        0.0
    }
}

pub fn moment_discrepancy(a: &EnsembleSummary, b: &EnsembleSummary) -> MomentDiscrepancy {
    let fro = (&a.covariance - &b.covariance).norm();
    let fro_scale = 0.5 * (a.covariance.norm() + b.covariance.norm());
    let mean = (&a.mean - &b.mean).norm();
    let mean_scale = 0.5 * (a.mean.norm() + b.mean.norm());
    MomentDiscrepancy {
        a: String::new(),
        b: String::new(),
        mean_rel_diff: if mean_scale > 0.0 { mean / mean_scale } else { 0.0 },
        cov_trace_rel_diff: rel_diff(a.cov_trace, b.cov_trace),
        cov_frobenius_rel_diff: if fro_scale > 0.0 { fro / fro_scale } else { 0.0 },
    }
}

/// Runs every variant serially, each into `out_dir/<label>/` when a
/// directory is given, and compares final moments pairwise.
pub fn compare(config: &CompareConfig, out_dir: Option<&Path>) -> Result<ComparisonReport> {
    config.validate()?;
    let mut variants = Vec::new();
    let mut timing = BTreeMap::new();
    for v in &config.variants {
        log::info!("running variant {}", v.label);
        let outcome = match out_dir {
            Some(dir) => run_to_dir(&v.config, &dir.join(&v.label), false)?,
            None => execute(&v.config, &mut |_| Ok(()))?,
        };
        let report = outcome.report;
        timing.insert(v.label.clone(), report.timing.total_seconds);
        let last = report.checkpoints.last();
        variants.push(VariantSummary {
            label: v.label.clone(),
            status: report.status,
            error: report.error.clone(),
            iterations_completed: report.iterations_completed,
            summary: last.map(|c| c.summary.clone()),
            posterior_error: last.and_then(|c| c.posterior_error),
        });
    }
    let mut pairwise = Vec::new();
    for (i, a) in variants.iter().enumerate() {
        for b in &variants[i + 1..] {
            if let (Some(sa), Some(sb)) = (&a.summary, &b.summary) {
                pairwise.push(MomentDiscrepancy {
                    a: a.label.clone(),
                    b: b.label.clone(),
                    ..moment_discrepancy(sa, sb)
                });
            }
        }
    }
    let report = ComparisonReport {
        report_version: REPORT_VERSION,
        variants,
        pairwise,
        timing,
    };
    if let Some(dir) = out_dir {
        write_json(&report, &dir.join("comparison.json"))?;
    }
    Ok(report)
}

/// Runs each sampler at each dimension and tabulates estimated against
/// analytic posterior moments. Failed runs leave `null` entries and are
/// listed under `failures`.
pub fn validate(config: &ValidateConfig, out_dir: Option<&Path>) -> Result<ValidationTables> {
    config.validate()?;
    let mut theo_mean = Vec::new();
    let mut theo_trace = Vec::new();
    for &d in &config.dims {
        let (_, post) = linear_gaussian(config.variant, d, config.seed)?;
        theo_mean.push(Some(post.mean.mean()));
        theo_trace.push(Some(post.trace()));
    }
    let mut mean_average = vec![TableRow {
        label: "theoretical".into(),
        values: theo_mean,
    }];
    let mut trace = vec![TableRow {
        label: "theoretical".into(),
        values: theo_trace,
    }];
    let mut errors = BTreeMap::new();
    let mut failures = Vec::new();
    let mut timing = BTreeMap::new();
    for s in &config.samplers {
        let mut means = Vec::new();
        let mut traces = Vec::new();
        let mut errs = Vec::new();
        let mut seconds = 0.0;
        for &d in &config.dims {
            log::info!("validating {} at d = {d}", s.label);
            let outcome = execute(&config.run_config(&s.sampler(), d), &mut |_| Ok(()))?;
            let report = outcome.report;
            seconds += report.timing.total_seconds;
            let last = report.checkpoints.last().filter(|_| report.status == RunStatus::Complete);
            if let Some(e) = &report.error {
                failures.push(format!("{} d={d}: {e}", s.label));
            }
            means.push(last.map(|c| c.summary.mean_average));
            traces.push(last.map(|c| c.summary.cov_trace));
            errs.push(last.and_then(|c| c.posterior_error));
        }
        mean_average.push(TableRow {
            label: s.label.clone(),
            values: means,
        });
        trace.push(TableRow {
            label: s.label.clone(),
            values: traces,
        });
        errors.insert(s.label.clone(), errs);
        timing.insert(s.label.clone(), seconds);
    }
    let tables = ValidationTables {
        report_version: REPORT_VERSION,
        variant: config.variant,
        dims: config.dims.clone(),
        n: config.n,
        iterations: config.iterations,
        seed: config.seed,
        mean_average,
        trace,
        errors,
        failures,
        timing,
    };
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        write_json(&tables, &dir.join("tables.json"))?;
    }
    Ok(tables)
}
