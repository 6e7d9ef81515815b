//! Stein variational Newton: the Galerkin Newton system over kernel
//! sections and its three solution strategies.
//!
//! Unknowns are flattened particle-major: `α¹` first, then `α²`, and so on.
//! A `d × n` coefficient matrix in column-major storage has exactly this
//! layout, so `alpha.as_slice()` is the flattened vector.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ensemble::{evaluate_particles, Curvature, ParticleEnsemble, PointEval, TargetModel};
use crate::error::{Error, Result};
use crate::kernels::{evaluate, GramMatrix, MetricState};
use crate::linsolve::{factor_with_jitter, cholesky_solve, spd_solve, truncated_cg, SolveReport, Termination};
use crate::svgd::{check_sampler_dims, gradient_matrix, stein_direction, DirectionField};

/// Default limit on `n·d` for the dense full system.
pub const DENSE_LIMIT: usize = 5000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    /// Dense solve of the coupled `nd × nd` system.
    Full,
    /// Independent `d × d` solves of the diagonal blocks.
    #[serde(rename = "bd")]
    BlockDiagonal,
    /// Truncated conjugate gradient on the matrix-free operator.
    Ncg,
}

impl Strategy {
    pub fn system_mode(self) -> SystemMode {
        match self {
            Strategy::Full => SystemMode::FullDense,
            Strategy::BlockDiagonal => SystemMode::BlockDiagonal,
            Strategy::Ncg => SystemMode::Operator,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SystemMode {
    FullDense,
    BlockDiagonal,
    Operator,
}

/// How block-diagonal coefficients become a particle update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BlockUpdate {
    /// `x_s ← x_s + ε α^s`.
    #[default]
    Direct,
    /// `x_s ← x_s + ε Σ_k α^k k(x_k, x_s)`, as for the coupled strategies.
    KernelSum,
}

/// Settings for one SVN iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SvnOptions {
    pub strategy: Strategy,
    pub curvature: Curvature,
    pub cg_tol: f64,
    /// Defaults to `min(nd, 100)`.
    pub max_cg_iters: Option<usize>,
    pub dense_limit: usize,
    pub block_update: BlockUpdate,
}

impl Default for SvnOptions {
    fn default() -> Self {
        Self {
            strategy: Strategy::BlockDiagonal,
            curvature: Curvature::GaussNewton,
            cg_tol: 1e-3,
            max_cg_iters: None,
            dense_limit: DENSE_LIMIT,
            block_update: BlockUpdate::Direct,
        }
    }
}

/// Per-particle curvature `A(x_j)`, or one matrix shared by all particles.
#[derive(Debug, Clone)]
enum CurvatureData {
    Constant(DMatrix<f64>),
    PerParticle(Vec<DMatrix<f64>>),
}

impl CurvatureData {
    fn from_evals(evals: &[PointEval], constant: Option<&DMatrix<f64>>) -> Result<Self> {
        if let Some(a) = constant {
            return Ok(Self::Constant(a.clone()));
        }
        evals
            .iter()
            .enumerate()
            .map(|(i, e)| {
                e.neg_hessian.clone().ok_or(Error::NonFiniteParticle {
                    what: "curvature (missing)",
                    index: i,
                })
            })
            .collect::<Result<Vec<_>>>()
            .map(Self::PerParticle)
    }

    fn at(&self, j: usize) -> &DMatrix<f64> {
        match self {
            Self::Constant(a) => a,
            Self::PerParticle(v) => &v[j],
        }
    }
}

/// Matrix-free application of the full Newton matrix.
///
/// Stores the kernel matrix, the mapped positions, and the curvature, and
/// applies `H v` in `O(n²d + nd²)`.
#[derive(Debug, Clone)]
pub struct NewtonOperator {
    kernel: DMatrix<f64>,
    mapped: DMatrix<f64>,
    scale: f64,
    curvature: CurvatureData,
}

impl NewtonOperator {
    pub fn unknowns(&self) -> usize {
        self.kernel.nrows() * self.mapped.nrows()
    }

    /// `H v` for a `d × n` coefficient block.
    pub fn apply_block(&self, v: &DMatrix<f64>) -> DMatrix<f64> {
        let n = self.kernel.nrows();
        let k = &self.kernel;
        let z = &self.mapped;
        let inv_g = 1.0 / self.scale;
        // u_j = Σ_k k_jk v_k
        let u = v * k;
        // t_j = Σ_k ∇k_jkᵀ v_k = −(1/g)[z_j·u_j − Σ_k k_jk (z_k·v_k)]
        let zv = DVector::from_iterator(n, (0..n).map(|j| z.column(j).dot(&v.column(j))));
        let kzv = k * zv;
        let t = DVector::from_iterator(n, (0..n).map(|j| -inv_g * (z.column(j).dot(&u.column(j)) - kzv[j])));
        // curvature part: Σ_j k_js A_j u_j
        let mut out = match &self.curvature {
            CurvatureData::Constant(a) => a * &u * k,
            CurvatureData::PerParticle(list) => {
                let mut au = DMatrix::zeros(u.nrows(), n);
                for (j, a) in list.iter().enumerate() {
                    au.set_column(j, &(a * u.column(j)));
                }
                au * k
            }
        };
        // gradient part: Σ_j ∇k_js t_j = −(1/g)[Σ_j k_js t_j z_j − (Σ_j k_js t_j) z_s]
        let mut zt = z.clone();
        for (j, mut c) in zt.column_iter_mut().enumerate() {
            c *= t[j];
        }
        let mut grad = zt * k;
        let kt = k * &t;
        for (s, mut c) in grad.column_iter_mut().enumerate() {
            c.axpy(-kt[s], &z.column(s), 1.0);
        }
        out -= grad * inv_g;
        out / n as f64
    }

    /// `H v` on the flattened vector.
    pub fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        let (d, n) = self.mapped.shape();
        let block = DMatrix::from_column_slice(d, n, v.as_slice());
        let out = self.apply_block(&block);
        DVector::from_column_slice(out.as_slice())
    }
}

#[derive(Debug, Clone)]
enum Blocks {
    Full(DMatrix<f64>),
    Diagonal(Vec<DMatrix<f64>>),
    Operator(NewtonOperator),
}

/// The Newton system `Σ_k H^{s,k} α^k = G(x_s)`.
#[derive(Debug, Clone)]
pub struct NewtonSystem {
    rhs: DMatrix<f64>,
    kernel: DMatrix<f64>,
    blocks: Blocks,
}

impl NewtonSystem {
    pub fn mode(&self) -> SystemMode {
        match self.blocks {
            Blocks::Full(_) => SystemMode::FullDense,
            Blocks::Diagonal(_) => SystemMode::BlockDiagonal,
            Blocks::Operator(_) => SystemMode::Operator,
        }
    }

    /// Right-hand side, `d × n`; identical to the SVGD direction.
    pub fn rhs(&self) -> &DMatrix<f64> {
        &self.rhs
    }

    pub fn dim(&self) -> usize {
        self.rhs.nrows()
    }

    pub fn len(&self) -> usize {
        self.rhs.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.rhs.ncols() == 0
    }

    /// The flattened `nd × nd` matrix, in full-dense mode.
    pub fn dense(&self) -> Option<&DMatrix<f64>> {
        match &self.blocks {
            Blocks::Full(h) => Some(h),
            _ => None,
        }
    }

    /// Block `H^{s,k}`, when stored.
    pub fn block(&self, s: usize, k: usize) -> Option<DMatrix<f64>> {
        let d = self.dim();
        match &self.blocks {
            Blocks::Full(h) => Some(h.view((s * d, k * d), (d, d)).into_owned()),
            Blocks::Diagonal(b) if s == k => Some(b[s].clone()),
            _ => None,
        }
    }

    pub fn operator(&self) -> Option<&NewtonOperator> {
        match &self.blocks {
            Blocks::Operator(op) => Some(op),
            _ => None,
        }
    }

    fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        let d = self.dim();
        match &self.blocks {
            Blocks::Full(h) => h * v,
            Blocks::Operator(op) => op.apply(v),
            Blocks::Diagonal(b) => {
                let mut out = DVector::zeros(v.len());
                for (s, hs) in b.iter().enumerate() {
                    let r = hs * v.rows(s * d, d);
                    out.rows_mut(s * d, d).copy_from(&r);
                }
                out
            }
        }
    }

    fn flat_rhs(&self) -> DVector<f64> {
        DVector::from_column_slice(self.rhs.as_slice())
    }
}

/// Solved Newton coefficients `α`, `d × n` with one column per particle.
#[derive(Debug, Clone)]
pub struct NewtonCoefficients {
    pub alpha: DMatrix<f64>,
    pub report: SolveReport,
}

/// One block `H^{s,k}`, computed directly from pairwise kernel evaluations:
/// `(1/n) Σ_j [A(x_j) k(x_j, x_s) k(x_j, x_k) + ∇k(x_j, x_s) ∇k(x_j, x_k)ᵀ]`.
pub fn h_block(
    ensemble: &ParticleEnsemble,
    model: &dyn TargetModel,
    metric: &MetricState,
    curvature: Curvature,
    s: usize,
    k: usize,
) -> Result<DMatrix<f64>> {
    check_sampler_dims(ensemble, model, metric)?;
    let n = ensemble.len();
    if s >= n || k >= n {
        return Err(Error::InvalidArgument(format!("block ({s}, {k}) out of range for {n} particles")));
    }
    let d = ensemble.dim();
    let (xs, xk) = (ensemble.particle(s), ensemble.particle(k));
    let mut h = DMatrix::zeros(d, d);
    for j in 0..n {
        let x = ensemble.particle(j);
        let a = model.neg_hessian(&x, curvature)?;
        if a.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteParticle {
                what: "curvature",
                index: j,
            });
        }
        let ks = evaluate(metric, &x, &xs);
        let kk = evaluate(metric, &x, &xk);
        h += a * (ks.value * kk.value) + &ks.grad1 * kk.grad1.transpose();
    }
    Ok(h / n as f64)
}

/// Packs the upper triangle (row-major over `a ≤ b`) of symmetric matrices
/// into rows of an `n × d(d+1)/2` matrix.
fn pack_upper<'a>(mats: impl ExactSizeIterator<Item = &'a DMatrix<f64>>, d: usize) -> DMatrix<f64> {
    let n = mats.len();
    let p = d * (d + 1) / 2;
    let mut out = DMatrix::zeros(n, p);
    for (j, m) in mats.enumerate() {
        let mut idx = 0;
        for a in 0..d {
            for b in a..d {
                out[(j, idx)] = m[(a, b)];
                idx += 1;
            }
        }
    }
    out
}

fn unpack_upper(row: impl Iterator<Item = f64>, d: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(d, d);
    let mut it = row;
    for a in 0..d {
        for b in a..d {
            let v = it.next().unwrap_or(0.0);
            m[(a, b)] = v;
            m[(b, a)] = v;
        }
    }
    m
}

/// All diagonal blocks in `O(n²d²)` using two matrix products.
///
/// With `w_js = k_js²` and the mapped positions `z`,
/// `g² Σ_j ∇k_js ∇k_jsᵀ = Σ_j w_js z_j z_jᵀ − m_s z_sᵀ − z_s m_sᵀ + c_s z_s z_sᵀ`,
/// where `m_s = Σ_j w_js z_j` and `c_s = Σ_j w_js`.
fn diagonal_blocks(gram: &GramMatrix, curvature: &CurvatureData) -> Vec<DMatrix<f64>> {
    let n = gram.len();
    let z = gram.mapped();
    let d = z.nrows();
    let g = gram.scale();
    let w = gram.values().component_mul(gram.values());
    let c = DVector::from_iterator(n, w.column_iter().map(|col| col.sum()));
    let outer: Vec<DMatrix<f64>> = (0..n)
        .map(|j| {
            let zj = z.column(j);
            zj * zj.transpose()
        })
        .collect();
    let second = &w * pack_upper(outer.iter(), d);
    drop(outer);
    let m = z * &w;
    let first = match curvature {
        CurvatureData::Constant(_) => None,
        CurvatureData::PerParticle(list) => Some(&w * pack_upper(list.iter(), d)),
    };
    (0..n)
        .into_par_iter()
        .map(|s| {
            let zs = z.column(s);
            let ms = m.column(s);
            let mut grad = unpack_upper(second.row(s).iter().copied(), d);
            grad -= ms * zs.transpose() + zs * ms.transpose();
            grad += (zs * zs.transpose()) * c[s];
            let curv = match (&first, curvature) {
                (Some(f), _) => unpack_upper(f.row(s).iter().copied(), d),
                (None, CurvatureData::Constant(a)) => a * c[s],
                (None, CurvatureData::PerParticle(_)) => unreachable!(),
            };
            (curv + grad / (g * g)) / n as f64
        })
        .collect()
}

/// The full `nd × nd` matrix from cached kernel values.
fn dense_matrix(gram: &GramMatrix, curvature: &CurvatureData) -> DMatrix<f64> {
    let n = gram.len();
    let z = gram.mapped();
    let d = z.nrows();
    let k = gram.values();
    let g = gram.scale();
    let mut h = DMatrix::zeros(n * d, n * d);
    // curvature part: block (s, k) entry (a, b) is Σ_j k_js A_j[a, b] k_jk
    for a in 0..d {
        for b in a..d {
            let mut scaled = k.clone();
            for j in 0..n {
                let v = curvature.at(j)[(a, b)];
                scaled.row_mut(j).scale_mut(v);
            }
            let prod = symmetric_product(k, &scaled);
            for q in 0..n {
                for s in 0..n {
                    h[(s * d + a, q * d + b)] = prod[(s, q)];
                    h[(s * d + b, q * d + a)] = prod[(s, q)];
                }
            }
        }
    }
    // gradient part: row j of `grads` holds ∇k(x_j, x_s) in columns s*d..s*d+d
    let mut grads = DMatrix::zeros(n, n * d);
    for s in 0..n {
        for i in 0..d {
            let zs = z[(i, s)];
            let mut col = grads.column_mut(s * d + i);
            for j in 0..n {
                col[j] = -(k[(j, s)] / g) * (z[(i, j)] - zs);
            }
        }
    }
    h += symmetric_product(&grads.transpose(), &grads);
    h /= n as f64;
    let m = h.nrows();
    for j in 0..m {
        for i in (j + 1)..m {
            let v = 0.5 * (h[(i, j)] + h[(j, i)]);
            h[(i, j)] = v;
            h[(j, i)] = v;
        }
    }
    h
}

/// `a · b` for a product known to be symmetric: only the upper triangle is
/// computed, in fixed-width column chunks run in parallel, then mirrored.
/// The chunk width does not depend on the thread count, so the result is the
/// same for any pool size.
fn symmetric_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    const CHUNK: usize = 64;
    let m = b.ncols();
    let parts: Vec<DMatrix<f64>> = (0..m.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let lo = c * CHUNK;
            let w = CHUNK.min(m - lo);
            a.rows(0, lo + w) * b.columns(lo, w)
        })
        .collect();
    let mut out = DMatrix::zeros(m, m);
    for (c, p) in parts.into_iter().enumerate() {
        out.view_mut((0, c * CHUNK), (p.nrows(), p.ncols())).copy_from(&p);
    }
    for j in 0..m {
        for i in (j + 1)..m {
            out[(i, j)] = out[(j, i)];
        }
    }
    out
}

/// Assembles the Newton system from per-particle evaluations.
pub(crate) fn assemble_from_evals(
    ensemble: &ParticleEnsemble,
    evals: &[PointEval],
    constant: Option<&DMatrix<f64>>,
    metric: &MetricState,
    mode: SystemMode,
    dense_limit: usize,
) -> Result<NewtonSystem> {
    let n = ensemble.len();
    let d = ensemble.dim();
    if mode == SystemMode::FullDense && n * d > dense_limit {
        return Err(Error::MemoryGuard {
            unknowns: n * d,
            limit: dense_limit,
        });
    }
    let gram = GramMatrix::new(metric, ensemble);
    let grads = gradient_matrix(evals.iter().map(|e| e.grad.clone()), d);
    let rhs = DirectionField::new(stein_direction(&grads, &gram))?.into_inner();
    let curvature = CurvatureData::from_evals(evals, constant)?;
    let blocks = match mode {
        SystemMode::FullDense => Blocks::Full(dense_matrix(&gram, &curvature)),
        SystemMode::BlockDiagonal => Blocks::Diagonal(diagonal_blocks(&gram, &curvature)),
        SystemMode::Operator => Blocks::Operator(NewtonOperator {
            kernel: gram.values().clone(),
            mapped: gram.mapped().clone(),
            scale: gram.scale(),
            curvature,
        }),
    };
    Ok(NewtonSystem {
        rhs,
        kernel: gram.values().clone(),
        blocks,
    })
}

/// Assembles the Newton system for the current ensemble.
pub fn assemble(
    ensemble: &ParticleEnsemble,
    model: &dyn TargetModel,
    metric: &MetricState,
    mode: SystemMode,
    curvature: Curvature,
    dense_limit: usize,
) -> Result<NewtonSystem> {
    check_sampler_dims(ensemble, model, metric)?;
    if mode == SystemMode::FullDense && ensemble.len() * ensemble.dim() > dense_limit {
        return Err(Error::MemoryGuard {
            unknowns: ensemble.len() * ensemble.dim(),
            limit: dense_limit,
        });
    }
    let constant = model.constant_neg_hessian(curvature);
    let evals = evaluate_particles(ensemble, model, Some(curvature))?;
    assemble_from_evals(ensemble, &evals, constant.as_ref(), metric, mode, dense_limit)
}

fn coefficients(system: &NewtonSystem, flat: DVector<f64>, report: SolveReport) -> Result<NewtonCoefficients> {
    let alpha = DMatrix::from_column_slice(system.dim(), system.len(), flat.as_slice());
    if let Some(i) = (0..alpha.ncols()).find(|&i| alpha.column(i).iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFiniteParticle {
            what: "Newton coefficient",
            index: i,
        });
    }
    Ok(NewtonCoefficients { alpha, report })
}

/// Dense symmetric solve of the coupled system.
pub fn solve_full(system: &NewtonSystem) -> Result<NewtonCoefficients> {
    let h = system
        .dense()
        .ok_or_else(|| Error::InvalidArgument("solve_full needs a full-dense system".into()))?;
    let (x, report) = spd_solve(h, &system.flat_rhs())?;
    coefficients(system, x, report)
}

/// Independent solves `H^{s,s} α^s = G(x_s)`.
pub fn solve_block_diagonal(system: &NewtonSystem) -> Result<NewtonCoefficients> {
    let d = system.dim();
    let n = system.len();
    let blocks: Vec<DMatrix<f64>> = match &system.blocks {
        Blocks::Diagonal(b) => b.clone(),
        Blocks::Full(_) => (0..n).map(|s| system.block(s, s).expect("dense block")).collect(),
        Blocks::Operator(_) => {
            return Err(Error::InvalidArgument(
                "solve_block_diagonal needs stored diagonal blocks".into(),
            ))
        }
    };
    let solved: Vec<(DVector<f64>, f64, f64)> = blocks
        .par_iter()
        .enumerate()
        .map(|(s, hs)| {
            let b = system.rhs.column(s).into_owned();
            let (l, jitter) = factor_with_jitter(hs).map_err(|e| match e {
                Error::Singular { jitter } => Error::SingularBlock { block: s, jitter },
                other => other,
            })?;
            let x = cholesky_solve(&l, &b);
            let bn = b.norm();
            let r = (hs * &x - &b).norm();
            Ok((x, if bn > 0.0 { r / bn } else { r }, jitter))
        })
        .collect::<Result<_>>()?;
    let mut flat = DVector::zeros(n * d);
    let mut report = SolveReport {
        iterations: n,
        final_relative_residual: 0.0,
        termination: Termination::Converged,
        jitter_applied: 0.0,
    };
    for (s, (x, res, jitter)) in solved.into_iter().enumerate() {
        flat.rows_mut(s * d, d).copy_from(&x);
        report.final_relative_residual = report.final_relative_residual.max(res);
        report.jitter_applied = report.jitter_applied.max(jitter);
    }
    coefficients(system, flat, report)
}

/// Truncated CG on the flattened system.
pub fn solve_ncg(system: &NewtonSystem, max_cg_iters: Option<usize>, cg_tol: f64) -> Result<NewtonCoefficients> {
    let nd = system.dim() * system.len();
    let iters = max_cg_iters.unwrap_or(nd.min(100));
    let (x, report) = truncated_cg(|v| system.apply(v), &system.flat_rhs(), cg_tol, iters)?;
    coefficients(system, x, report)
}

/// Solver diagnostics for one SVN iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SvnStepInfo {
    pub solve: SolveReport,
}

/// Solves the system with the chosen strategy and returns the update
/// direction at each particle.
pub fn newton_direction(system: &NewtonSystem, options: &SvnOptions) -> Result<(DMatrix<f64>, SolveReport)> {
    let coeffs = match options.strategy {
        Strategy::Full => solve_full(system)?,
        Strategy::BlockDiagonal => solve_block_diagonal(system)?,
        Strategy::Ncg => solve_ncg(system, options.max_cg_iters, options.cg_tol)?,
    };
    let direction = match (options.strategy, options.block_update) {
        (Strategy::BlockDiagonal, BlockUpdate::Direct) => coeffs.alpha,
        // W(x_s) = Σ_k α^k k(x_k, x_s)
        _ => &coeffs.alpha * &system.kernel,
    };
    Ok((direction, coeffs.report))
}

/// One SVN iteration `x_s ← x_s + ε W(x_s)`.
pub fn svn_step(
    ensemble: &ParticleEnsemble,
    model: &dyn TargetModel,
    metric: &MetricState,
    options: &SvnOptions,
    step: f64,
) -> Result<(ParticleEnsemble, SvnStepInfo)> {
    if !step.is_finite() || step < 0.0 {
        return Err(Error::InvalidArgument(format!("step size must be finite and non-negative, got {step}")));
    }
    let system = assemble(
        ensemble,
        model,
        metric,
        options.strategy.system_mode(),
        options.curvature,
        options.dense_limit,
    )?;
    let (direction, solve) = newton_direction(&system, options)?;
    Ok((ensemble.advanced(&direction, step)?, SvnStepInfo { solve }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ensemble::{seeded_rng, standard_normals, GaussianSpec, Stream};
    use crate::kernels::compute_metric;
    use crate::kernels::Scaling;
    use crate::problems::{nonlinear_regression, GaussianTarget};
    use crate::svgd::svgd_direction;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn random_spd(d: usize, rng: &mut ChaCha20Rng) -> DMatrix<f64> {
        let b = DMatrix::from_fn(d, d, |_, _| rng.gen_range(-1.0..1.0));
        &b * b.transpose() + DMatrix::identity(d, d) * 0.5
    }

    fn gaussian(d: usize, seed: u64) -> GaussianTarget {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mean = DVector::from_fn(d, |_, _| rng.gen_range(-1.0..1.0));
        GaussianTarget::new(GaussianSpec::from_covariance(mean, random_spd(d, &mut rng)).unwrap())
    }

    fn ensemble(n: usize, d: usize, seed: u64) -> ParticleEnsemble {
        let mut rng = seeded_rng(seed, Stream::Particles);
        let z = standard_normals(&mut rng, n * d);
        ParticleEnsemble::from_columns(DMatrix::from_column_slice(d, n, z.as_slice())).unwrap()
    }

    fn options(strategy: Strategy) -> SvnOptions {
        SvnOptions {
            strategy,
            cg_tol: 1e-12,
            ..Default::default()
        }
    }

    /// The flattened matrix built block by block from `h_block`.
    fn oracle_matrix(e: &ParticleEnsemble, model: &dyn TargetModel, m: &MetricState) -> DMatrix<f64> {
        let (n, d) = (e.len(), e.dim());
        let mut h = DMatrix::zeros(n * d, n * d);
        for s in 0..n {
            for k in 0..n {
                let b = h_block(e, model, m, Curvature::GaussNewton, s, k).unwrap();
                h.view_mut((s * d, k * d), (d, d)).copy_from(&b);
            }
        }
        h
    }

    #[test]
    fn single_particle_gaussian_block_is_identity() {
        let e = ParticleEnsemble::from_rows(&[vec![0.0, 0.0]]).unwrap();
        let target = GaussianTarget::new(GaussianSpec::standard(2));
        let m = MetricState::isotropic(1.0, 2).unwrap();
        let h = h_block(&e, &target, &m, Curvature::GaussNewton, 0, 0).unwrap();
        assert_eq!(h, DMatrix::identity(2, 2));
    }

    #[test]
    fn one_step_exactness_for_every_strategy() {
        for d in [1, 2, 5] {
            let target = gaussian(d, d as u64);
            let e = ensemble(1, d, 3);
            let m = compute_metric(&e, &target, Scaling::Dimension).unwrap();
            for strategy in [Strategy::Full, Strategy::BlockDiagonal, Strategy::Ncg] {
                let (next, _) = svn_step(&e, &target, &m, &options(strategy), 1.0).unwrap();
                let err = (next.particle(0) - &target.spec().mean).amax();
                assert!(err <= 1e-10, "{strategy:?} d={d}: {err}");
            }
        }
    }

    #[test]
    fn modes_coincide_for_one_particle() {
        let target = gaussian(3, 8);
        let e = ensemble(1, 3, 4);
        let m = MetricState::isotropic(0.8, 3).unwrap();
        let full = assemble(&e, &target, &m, SystemMode::FullDense, Curvature::GaussNewton, DENSE_LIMIT).unwrap();
        let bd = assemble(&e, &target, &m, SystemMode::BlockDiagonal, Curvature::GaussNewton, DENSE_LIMIT).unwrap();
        let op = assemble(&e, &target, &m, SystemMode::Operator, Curvature::GaussNewton, DENSE_LIMIT).unwrap();
        let hb = full.block(0, 0).unwrap();
        assert!((&hb - bd.block(0, 0).unwrap()).amax() <= 1e-14);
        let v = DVector::from_vec(vec![0.3, -1.0, 2.0]);
        assert!((&hb * &v - op.operator().unwrap().apply(&v)).amax() <= 1e-13);
    }

    #[test]
    fn rhs_is_the_svgd_direction() {
        let target = gaussian(2, 1);
        let e = ensemble(4, 2, 9);
        let m = MetricState::isotropic(1.3, 2).unwrap();
        let sys = assemble(&e, &target, &m, SystemMode::Operator, Curvature::GaussNewton, DENSE_LIMIT).unwrap();
        let g = svgd_direction(&e, &target, &m).unwrap();
        assert_eq!(sys.rhs(), g.values());
    }

    #[test]
    fn dense_assembly_matches_blockwise_oracle() {
        let target = gaussian(2, 5);
        let e = ensemble(3, 2, 5);
        for m in [
            MetricState::isotropic(1.1, 2).unwrap(),
            compute_metric(&e, &target, Scaling::Dimension).unwrap(),
        ] {
            let sys = assemble(&e, &target, &m, SystemMode::FullDense, Curvature::GaussNewton, DENSE_LIMIT).unwrap();
            let oracle = oracle_matrix(&e, &target, &m);
            let diff = (sys.dense().unwrap() - &oracle).amax();
            assert!(diff <= 1e-12 * oracle.amax(), "{diff}");
        }
    }

    #[test]
    fn blocks_are_transposes_and_diagonal_blocks_spd() {
        let model = nonlinear_regression(2).unwrap();
        let e = ensemble(4, 2, 1);
        let m = compute_metric(&e, &model, Scaling::Dimension).unwrap();
        for s in 0..4 {
            for k in 0..4 {
                let a = h_block(&e, &model, &m, Curvature::GaussNewton, s, k).unwrap();
                let b = h_block(&e, &model, &m, Curvature::GaussNewton, k, s).unwrap();
                assert!((a - b.transpose()).amax() <= 1e-12);
            }
            crate::linsolve::cholesky(&h_block(&e, &model, &m, Curvature::GaussNewton, s, s).unwrap()).unwrap();
        }
    }

    #[test]
    fn diagonal_blocks_match_oracle() {
        let target = gaussian(3, 2);
        let model = nonlinear_regression(6).unwrap();
        let e3 = ensemble(5, 3, 2);
        let e2 = ensemble(5, 2, 2);
        let cases: Vec<(&dyn TargetModel, &ParticleEnsemble)> = vec![(&target, &e3), (&model, &e2)];
        for (t, e) in cases {
            let m = compute_metric(e, t, Scaling::Dimension).unwrap();
            let sys = assemble(e, t, &m, SystemMode::BlockDiagonal, Curvature::GaussNewton, DENSE_LIMIT).unwrap();
            for s in 0..5 {
                let oracle = h_block(e, t, &m, Curvature::GaussNewton, s, s).unwrap();
                let diff = (sys.block(s, s).unwrap() - &oracle).amax();
                assert!(diff <= 1e-12 * oracle.amax(), "{diff}");
            }
            let coeffs = solve_block_diagonal(&sys).unwrap();
            for s in 0..5 {
                let oracle = h_block(e, t, &m, Curvature::GaussNewton, s, s).unwrap();
                let x = oracle.lu().solve(&sys.rhs().column(s).into_owned()).unwrap();
                assert!((coeffs.alpha.column(s) - x).amax() <= 1e-10);
            }
        }
    }

    #[test]
    fn operator_matches_dense_product() {
        let model = nonlinear_regression(3).unwrap();
        let e = ensemble(3, 2, 7);
        let m = compute_metric(&e, &model, Scaling::Dimension).unwrap();
        let dense = assemble(&e, &model, &m, SystemMode::FullDense, Curvature::GaussNewton, DENSE_LIMIT).unwrap();
        let op = assemble(&e, &model, &m, SystemMode::Operator, Curvature::GaussNewton, DENSE_LIMIT).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        for _ in 0..10 {
            let v = DVector::from_fn(6, |_, _| rng.gen_range(-1.0..1.0));
            let a = dense.dense().unwrap() * &v;
            let b = op.operator().unwrap().apply(&v);
            assert!((&a - &b).amax() <= 1e-12 * a.amax().max(1.0));
        }
    }

    #[test]
    fn full_solve_matches_flattened_oracle() {
        let target = gaussian(2, 11);
        let e = ensemble(3, 2, 11);
        let m = compute_metric(&e, &target, Scaling::Dimension).unwrap();
        let sys = assemble(&e, &target, &m, SystemMode::FullDense, Curvature::GaussNewton, DENSE_LIMIT).unwrap();
        let coeffs = solve_full(&sys).unwrap();
        assert!(coeffs.report.final_relative_residual <= 1e-8);
        let oracle = oracle_matrix(&e, &target, &m);
        let rhs = DVector::from_column_slice(sys.rhs().as_slice());
        let x = oracle.clone().lu().solve(&rhs).unwrap();
        assert!((DVector::from_column_slice(coeffs.alpha.as_slice()) - &x).amax() <= 1e-10 * x.amax().max(1.0));
        // step through the same oracle
        let (next, _) = svn_step(&e, &target, &m, &options(Strategy::Full), 1.0).unwrap();
        let kernel = GramMatrix::new(&m, &e);
        let w = DMatrix::from_column_slice(2, 3, x.as_slice()) * kernel.values();
        assert!((next.positions() - (e.positions() + w)).amax() <= 1e-8);
    }

    #[test]
    fn ncg_matches_dense_solve() {
        let model = nonlinear_regression(3).unwrap();
        let e = ensemble(5, 2, 3);
        let m = compute_metric(&e, &model, Scaling::Dimension).unwrap();
        let dense = assemble(&e, &model, &m, SystemMode::FullDense, Curvature::GaussNewton, DENSE_LIMIT).unwrap();
        let op = assemble(&e, &model, &m, SystemMode::Operator, Curvature::GaussNewton, DENSE_LIMIT).unwrap();
        let a = solve_full(&dense).unwrap();
        let b = solve_ncg(&op, Some(100), 1e-12).unwrap();
        assert!((&a.alpha - &b.alpha).amax() <= 1e-8 * a.alpha.amax().max(1.0));
    }

    #[test]
    fn memory_guard_refuses_large_dense_systems() {
        let target = GaussianTarget::new(GaussianSpec::standard(2));
        let e = ensemble(10, 2, 0);
        let m = MetricState::isotropic(1.0, 2).unwrap();
        let err = assemble(&e, &target, &m, SystemMode::FullDense, Curvature::GaussNewton, 15).unwrap_err();
        assert!(matches!(err, Error::MemoryGuard { unknowns: 20, limit: 15 }));
        assert!(err.to_string().contains("operator"));
    }

    #[test]
    fn zero_step_keeps_positions() {
        let target = gaussian(2, 1);
        let e = ensemble(3, 2, 1);
        let m = MetricState::isotropic(1.0, 2).unwrap();
        let (next, _) = svn_step(&e, &target, &m, &options(Strategy::BlockDiagonal), 0.0).unwrap();
        assert_eq!(next.positions(), e.positions());
    }

    #[test]
    fn packed_layout_is_row_major_upper() {
        let m = DMatrix::from_row_slice(3, 3, &[1.0, 2.0, 3.0, 2.0, 4.0, 5.0, 3.0, 5.0, 6.0]);
        let p = pack_upper([&m].into_iter(), 3);
        assert_eq!(p.row(0).iter().copied().collect::<Vec<_>>(), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(unpack_upper(p.row(0).iter().copied(), 3), m);
    }
}
