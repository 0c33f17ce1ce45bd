//! Mean-convergence machinery for PSO-Fed.
//!
//! The server model and the `K` client models are stacked into one extended
//! vector of length `(K + 1) D`. One round is then
//!
//! ```text
//! w_e(n+1) = B(n+1) [ A(n) w_e(n) + mu Z_e(n) eps_e(n) ]
//! ```
//!
//! where `A` blends the downloaded coordinates into participating clients and
//! `B` performs the masked server aggregation. Taking expectations of the
//! error recursion gives `E[B] (I - mu R_e) E[A]`, which contracts whenever
//! `0 < mu < 2 / max_k lambda_max(R_k)`.
//!
//! Dense block matrices are only built at desk scale, see
//! [`MAX_EXTENDED_DIM`].

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{draw_client_params, ClientDataSource, ParamRanges, Range, DEFAULT_WARMUP};
use crate::error::{Error, Result};
use crate::fed::{Algorithm, Federation, Sample};
use crate::masks::{self, Scheme, SelectionMask};
use crate::rff::RffMapper;
use crate::seeds::{self, Stream};

/// Largest extended dimension `(K + 1) D` for which dense matrices are built.
pub const MAX_EXTENDED_DIM: usize = 4096;

const EIGEN_REL_TOL: f64 = 1e-8;
const POWER_MAX_ITERS: usize = 100_000;

fn extended_dim(clients: usize, dim: usize) -> Result<usize> {
    let n = (clients + 1) * dim;
    if n > MAX_EXTENDED_DIM {
        return Err(Error::TooLarge(n));
    }
    Ok(n)
}

fn check_masks(masks: &[SelectionMask], participation: &[bool]) -> Result<usize> {
    Error::check_len("participation flags", masks.len(), participation.len())?;
    let dim = masks
        .first()
        .map(SelectionMask::dim)
        .ok_or_else(|| Error::invalid("at least one client mask is required"))?;
    for m in masks {
        Error::check_len("client mask", dim, m.dim())?;
    }
    Ok(dim)
}

/// Blending matrix `A`: identity server row, client row `k` is
/// `[a_k S_k, 0, ..., I - a_k S_k, ..., 0]`.
pub fn build_a(masks: &[SelectionMask], participation: &[bool]) -> Result<DMatrix<f64>> {
    let dim = check_masks(masks, participation)?;
    let n = extended_dim(masks.len(), dim)?;
    let mut a = DMatrix::identity(n, n);
    for (k, (mask, &part)) in masks.iter().zip(participation).enumerate() {
        if !part {
            continue;
        }
        let base = (k + 1) * dim;
        for &i in mask.active() {
            a[(base + i, i)] = 1.0;
            a[(base + i, base + i)] = 0.0;
        }
    }
    Ok(a)
}

/// Aggregation matrix `B` built from the post-shift masks: server row
/// `[I - sum_k a_k S_k / c, a_1 S_1 / c, ..., a_K S_K / c]`, identity elsewhere.
pub fn build_b(masks: &[SelectionMask], participation: &[bool], count: usize) -> Result<DMatrix<f64>> {
    let dim = check_masks(masks, participation)?;
    if count == 0 {
        return Err(Error::invalid("aggregation needs at least one participant"));
    }
    let participants = participation.iter().filter(|&&p| p).count();
    if participants != count {
        return Err(Error::invalid(format!(
            "participant count {count} disagrees with {participants} participation flags"
        )));
    }
    let n = extended_dim(masks.len(), dim)?;
    let weight = 1.0 / count as f64;
    let mut shared = vec![0usize; dim];
    let mut b = DMatrix::identity(n, n);
    for (k, (mask, &part)) in masks.iter().zip(participation).enumerate() {
        if !part {
            continue;
        }
        let base = (k + 1) * dim;
        for &i in mask.active() {
            b[(i, base + i)] = weight;
            shared[i] += 1;
        }
    }
    for (i, &s) in shared.iter().enumerate() {
        b[(i, i)] = 1.0 - s as f64 * weight;
    }
    Ok(b)
}

/// `blockdiag{0, R_1, ..., R_K}`.
pub fn extended_correlation(r_blocks: &[DMatrix<f64>]) -> Result<DMatrix<f64>> {
    let dim = check_blocks(r_blocks)?;
    let n = extended_dim(r_blocks.len(), dim)?;
    let mut r_e = DMatrix::zeros(n, n);
    for (k, r) in r_blocks.iter().enumerate() {
        let base = (k + 1) * dim;
        r_e.view_mut((base, base), (dim, dim)).copy_from(r);
    }
    Ok(r_e)
}

fn check_blocks(r_blocks: &[DMatrix<f64>]) -> Result<usize> {
    let dim = r_blocks
        .first()
        .map(|r| r.nrows())
        .ok_or_else(|| Error::invalid("at least one correlation block is required"))?;
    for r in r_blocks {
        Error::check_len("correlation rows", dim, r.nrows())?;
        Error::check_len("correlation columns", dim, r.ncols())?;
    }
    Ok(dim)
}

/// Symmetric within `1e-12` (relative) and minimum eigenvalue `>= -1e-10`.
pub fn check_psd(r: &DMatrix<f64>) -> Result<()> {
    if !r.is_square() {
        return Err(Error::invalid("correlation matrix must be square"));
    }
    let scale = r.amax().max(1.0);
    if (r - r.transpose()).amax() > 1e-12 * scale {
        return Err(Error::invalid("correlation matrix is not symmetric"));
    }
    let min = r.clone().symmetric_eigenvalues().min();
    if min < -1e-10 {
        return Err(Error::invalid(format!("correlation matrix has eigenvalue {min}")));
    }
    Ok(())
}

/// Largest eigenvalue of a symmetric PSD matrix by power iteration, stopped
/// once the residual `|R v - lambda v|` is below `1e-8 lambda`.
pub fn max_eigenvalue(r: &DMatrix<f64>) -> f64 {
    let n = r.nrows();
    if n == 0 || r.amax() == 0.0 {
        return 0.0;
    }
    let mut rng = seeds::rng(0, Stream::TargetModel);
    let mut v = DVector::from_fn(n, |_, _| {
        let g: f64 = StandardNormal.sample(&mut rng);
        1.0 + 0.1 * g
    });
    v.normalize_mut();
    let mut rv = r * &v;
    for _ in 0..POWER_MAX_ITERS {
        let lambda = v.dot(&rv);
        let norm = rv.norm();
        if norm == 0.0 {
            return 0.0;
        }
        let residual = (&rv - lambda * &v).norm();
        if residual <= EIGEN_REL_TOL * lambda.abs() {
            return lambda;
        }
        v = rv / norm;
        rv = r * &v;
    }
    // Nearly degenerate leading eigenvalues: fall back to a full decomposition.
    r.clone().symmetric_eigenvalues().max()
}

/// Result of the first-order step-size condition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepSizeBound {
    Finite(f64),
    /// Every correlation block is zero, so any step size keeps the mean fixed.
    Unbounded,
}

impl StepSizeBound {
    pub fn value(self) -> f64 {
        match self {
            StepSizeBound::Finite(v) => v,
            StepSizeBound::Unbounded => f64::INFINITY,
        }
    }

    pub fn admits(self, step: f64) -> bool {
        step > 0.0 && step < self.value()
    }
}

/// `2 / max_k lambda_max(R_k)`.
pub fn step_size_bound(r_blocks: &[DMatrix<f64>]) -> Result<StepSizeBound> {
    check_blocks(r_blocks)?;
    let mut lambda = 0.0f64;
    for r in r_blocks {
        check_psd(r)?;
        lambda = lambda.max(max_eigenvalue(r));
    }
    Ok(if lambda > 0.0 {
        StepSizeBound::Finite(2.0 / lambda)
    } else {
        StepSizeBound::Unbounded
    })
}

fn check_square(m: &DMatrix<f64>, n: usize, context: &'static str) -> Result<()> {
    Error::check_len(context, n, m.nrows())?;
    Error::check_len(context, n, m.ncols())
}

/// One step of the mean error recursion, `E[B] (I - mu R_e) E[A] w`.
pub fn mean_recursion_step(
    expected_a: &DMatrix<f64>,
    expected_b: &DMatrix<f64>,
    r_e: &DMatrix<f64>,
    step: f64,
    w_tilde: &DVector<f64>,
) -> Result<DVector<f64>> {
    let n = w_tilde.len();
    check_square(expected_a, n, "E[A]")?;
    check_square(expected_b, n, "E[B]")?;
    check_square(r_e, n, "R_e")?;
    let v = expected_a * w_tilde;
    let v = &v - step * (r_e * &v);
    Ok(expected_b * v)
}

/// The matrix `E[B] (I - mu R_e) E[A]` itself.
pub fn recursion_matrix(
    expected_a: &DMatrix<f64>,
    expected_b: &DMatrix<f64>,
    r_e: &DMatrix<f64>,
    step: f64,
) -> Result<DMatrix<f64>> {
    let n = r_e.nrows();
    check_square(expected_a, n, "E[A]")?;
    check_square(expected_b, n, "E[B]")?;
    check_square(r_e, n, "R_e")?;
    let middle = DMatrix::identity(n, n) - step * r_e;
    Ok(expected_b * middle * expected_a)
}

pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    m.clone().complex_eigenvalues().iter().map(|c| c.norm()).fold(0.0, f64::max)
}

pub fn two_norm(m: &DMatrix<f64>) -> f64 {
    m.clone().singular_values().max()
}

/// Closed-form `E[A]` and `E[B]` when participation (probability
/// `count / clients`) and coordinate sharing (probability `shared / dim`) are
/// independent. Both schemes and every shift give the same marginals, so
/// `scheme` and `shift` are only validated.
pub fn expected_matrices(
    scheme: Scheme,
    dim: usize,
    shared: usize,
    shift: usize,
    clients: usize,
    count: usize,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let _ = scheme;
    if dim == 0 || clients == 0 {
        return Err(Error::invalid("dimension and client count must be positive"));
    }
    if shared > dim {
        return Err(Error::invalid(format!("shared count {shared} exceeds D = {dim}")));
    }
    if shift == 0 || shift > dim {
        return Err(Error::invalid(format!("shift must lie in [1, {dim}]")));
    }
    if count == 0 || count > clients {
        return Err(Error::invalid(format!("cannot select {count} of {clients} clients")));
    }
    let n = extended_dim(clients, dim)?;
    let p = (count as f64 / clients as f64) * (shared as f64 / dim as f64);
    let mut ea = DMatrix::identity(n, n);
    let mut eb = DMatrix::identity(n, n);
    let server_keep = 1.0 - clients as f64 * p / count as f64;
    for i in 0..dim {
        eb[(i, i)] = server_keep;
    }
    for k in 0..clients {
        let base = (k + 1) * dim;
        for i in 0..dim {
            ea[(base + i, i)] = p;
            ea[(base + i, base + i)] = 1.0 - p;
            eb[(i, base + i)] = p / count as f64;
        }
    }
    Ok((ea, eb))
}

/// `Z_e = blockdiag{0, z_1, ..., z_K}`, of shape `(K + 1) D x (K + 1)`.
pub fn extended_inputs(features: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let dim = features
        .first()
        .map(Vec::len)
        .ok_or_else(|| Error::invalid("at least one feature vector is required"))?;
    let n = extended_dim(features.len(), dim)?;
    let mut z_e = DMatrix::zeros(n, features.len() + 1);
    for (k, z) in features.iter().enumerate() {
        Error::check_len("feature vector", dim, z.len())?;
        for (i, &v) in z.iter().enumerate() {
            z_e[((k + 1) * dim + i, k + 1)] = v;
        }
    }
    Ok(z_e)
}

/// One step of the instantaneous error recursion,
/// `B (I - mu Z_e Z_e^T) A w - mu B Z_e nu_e`, with `noise` holding the `K`
/// client noise samples.
pub fn error_recursion_step(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    z_e: &DMatrix<f64>,
    noise: &[f64],
    step: f64,
    w_tilde: &DVector<f64>,
) -> Result<DVector<f64>> {
    let n = w_tilde.len();
    check_square(a, n, "A")?;
    check_square(b, n, "B")?;
    Error::check_len("Z_e rows", n, z_e.nrows())?;
    Error::check_len("noise", z_e.ncols() - 1, noise.len())?;
    let mut nu_e = DVector::zeros(z_e.ncols());
    nu_e.rows_mut(1, noise.len()).copy_from_slice(noise);
    let v = a * w_tilde;
    let v = &v - step * (z_e * (z_e.transpose() * &v));
    Ok(b * (v - step * (z_e * nu_e)))
}

/// Stacked `w*` and the correlation blocks of one federation.
#[derive(Debug, Clone)]
pub struct ExtendedSystem {
    pub clients: usize,
    pub dim: usize,
    pub w_star: DVector<f64>,
    /// `1_{K+1} (x) w*`.
    pub w_e_star: DVector<f64>,
    pub r_blocks: Vec<DMatrix<f64>>,
    pub r_e: DMatrix<f64>,
}

impl ExtendedSystem {
    pub fn new(w_star: DVector<f64>, r_blocks: Vec<DMatrix<f64>>) -> Result<Self> {
        let dim = check_blocks(&r_blocks)?;
        Error::check_len("w*", dim, w_star.len())?;
        for r in &r_blocks {
            check_psd(r)?;
        }
        let clients = r_blocks.len();
        let r_e = extended_correlation(&r_blocks)?;
        let w_e_star = DVector::from_fn((clients + 1) * dim, |i, _| w_star[i % dim]);
        Ok(Self { clients, dim, w_star, w_e_star, r_blocks, r_e })
    }

    pub fn step_size_bound(&self) -> Result<StepSizeBound> {
        step_size_bound(&self.r_blocks)
    }

    /// `w_e* - col{w, w_1, ..., w_K}`.
    pub fn error_vector(&self, global: &[f64], locals: &[&[f64]]) -> Result<DVector<f64>> {
        Error::check_len("client models", self.clients, locals.len())?;
        Error::check_len("global model", self.dim, global.len())?;
        let mut out = self.w_e_star.clone();
        for (k, w) in std::iter::once(global).chain(locals.iter().copied()).enumerate() {
            Error::check_len("client model", self.dim, w.len())?;
            for (i, v) in w.iter().enumerate() {
                out[k * self.dim + i] -= v;
            }
        }
        Ok(out)
    }
}

/// Sample estimate of `E[z z^T]` from `samples` windows of `source`.
pub fn estimate_correlation(
    source: &mut ClientDataSource,
    mapper: &RffMapper,
    samples: usize,
) -> Result<DMatrix<f64>> {
    if samples == 0 {
        return Err(Error::invalid("correlation estimate needs at least one sample"));
    }
    const BATCH: usize = 256;
    let dim = mapper.dim_out();
    let mut acc = DMatrix::zeros(dim, dim);
    let mut batch = DMatrix::zeros(BATCH, dim);
    let mut z = vec![0.0; dim];
    let mut remaining = samples;
    while remaining > 0 {
        let rows = remaining.min(BATCH);
        if rows < BATCH {
            batch = DMatrix::zeros(rows, dim);
        }
        for r in 0..rows {
            mapper.map_into(&source.next_window(), &mut z)?;
            for (c, &v) in z.iter().enumerate() {
                batch[(r, c)] = v;
            }
        }
        acc.gemm_tr(1.0, &batch, &batch, 1.0);
        remaining -= rows;
    }
    acc /= samples as f64;
    let sym = (&acc + acc.transpose()) * 0.5;
    Ok(sym)
}

/// Desk-scale scenario for checking mean convergence by Monte-Carlo.
/// Targets are linear in feature space, `y = w*^T z + noise`, so `w*` is known.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConvergenceConfig {
    pub clients: usize,
    pub dim: usize,
    pub window: usize,
    pub shared: usize,
    pub shift: usize,
    pub per_round: usize,
    pub scheme: Scheme,
    pub bandwidth: f64,
    pub rounds: usize,
    pub correlation_samples: usize,
    pub ranges: ParamRanges,
    pub seed: u64,
}

impl Default for ConvergenceConfig {
    fn default() -> Self {
        Self {
            clients: 10,
            dim: 16,
            window: 4,
            shared: 4,
            shift: 4,
            per_round: 4,
            scheme: Scheme::Coordinated,
            bandwidth: 1.25,
            rounds: 2000,
            correlation_samples: 100_000,
            ranges: ParamRanges { noise_var: Range::new(0.001, 0.005), ..ParamRanges::default() },
            seed: 1,
        }
    }
}

/// Fixed part of the convergence scenario: the client distributions, the
/// shared feature map, the true model and the estimated correlations.
#[derive(Debug, Clone)]
pub struct ConvergenceSetup {
    pub config: ConvergenceConfig,
    pub mapper: RffMapper,
    pub params: Vec<crate::data::ClientParams>,
    pub system: ExtendedSystem,
    pub bound: StepSizeBound,
}

impl ConvergenceSetup {
    pub fn new(config: &ConvergenceConfig) -> Result<Self> {
        let c = config;
        if c.clients == 0 || c.rounds == 0 {
            return Err(Error::invalid("clients and rounds must be positive"));
        }
        if c.per_round == 0 || c.per_round > c.clients {
            return Err(Error::invalid(format!("cannot select {} of {} clients", c.per_round, c.clients)));
        }
        extended_dim(c.clients, c.dim)?;
        let mapper = RffMapper::new(c.window, c.dim, c.bandwidth, c.seed)?;
        let params = draw_client_params(c.clients, &c.ranges, c.seed)?;
        let mut rng = seeds::rng(c.seed, Stream::TargetModel);
        let w_star = DVector::from_fn(c.dim, |_, _| StandardNormal.sample(&mut rng));
        let r_blocks = params
            .iter()
            .enumerate()
            .map(|(k, p)| {
                let mut src = ClientDataSource::test(*p, c.window, c.seed, k)?;
                estimate_correlation(&mut src, &mapper, c.correlation_samples)
            })
            .collect::<Result<Vec<_>>>()?;
        let system = ExtendedSystem::new(w_star, r_blocks)?;
        let bound = system.step_size_bound()?;
        Ok(Self { config: c.clone(), mapper, params, system, bound })
    }

    /// `E[B] (I - mu R_e) E[A]` for this scenario.
    pub fn expected_recursion(&self, step: f64) -> Result<DMatrix<f64>> {
        let c = &self.config;
        let (ea, eb) = expected_matrices(c.scheme, c.dim, c.shared, c.shift, c.clients, c.per_round)?;
        recursion_matrix(&ea, &eb, &self.system.r_e, step)
    }

    /// Runs one PSO-Fed simulation and calls `observe(round, w_tilde)` after
    /// every round. Returns `Err(Diverged)` if the models blow up.
    pub fn simulate(
        &self,
        step: f64,
        trial_seed: u64,
        mut observe: impl FnMut(usize, &DVector<f64>),
    ) -> Result<()> {
        let c = &self.config;
        let masks = masks::init(c.scheme, c.dim, c.shared, c.shift, c.clients, trial_seed)?;
        let mut fed = Federation::with_masks(Algorithm::PsoFed, masks, step, c.per_round, trial_seed)?;
        let mut sources = self
            .params
            .iter()
            .enumerate()
            .map(|(k, p)| ClientDataSource::new(*p, c.window, DEFAULT_WARMUP, seeds::rng(trial_seed, Stream::Training(k))))
            .collect::<Result<Vec<_>>>()?;
        let w_star = self.system.w_star.as_slice();
        for n in 0..c.rounds {
            let samples = sources
                .iter_mut()
                .map(|src| {
                    let z = self.mapper.map(&src.next_window())?;
                    let clean: f64 = z.iter().zip(w_star).map(|(a, b)| a * b).sum();
                    Ok(Sample { y: clean + src.noise(), z })
                })
                .collect::<Result<Vec<_>>>()?;
            fed.run_round(&samples)?;
            let locals: Vec<&[f64]> = fed.clients().iter().map(|cl| cl.w_local.as_slice()).collect();
            observe(n, &self.system.error_vector(fed.global_model(), &locals)?);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceReport {
    pub step: f64,
    pub bound: f64,
    pub trials: usize,
    pub diverged_trials: usize,
    /// Norm of the mean extended error before the first round.
    pub initial_norm: f64,
    pub final_norm: f64,
    /// Norm of the trial-averaged extended error after every round.
    pub trajectory: Vec<f64>,
    pub converged: bool,
    pub diverged: bool,
}

impl ConvergenceReport {
    pub fn verdict(&self) -> &'static str {
        if self.converged {
            "converged"
        } else if self.diverged {
            "diverged"
        } else {
            "inconclusive"
        }
    }
}

/// Averages the extended error over `trials` independent simulations and
/// classifies the final mean error: below 1% of the initial norm is
/// converged, above 10x (or any trial blowing up) is diverged.
pub fn verify_mean_convergence(
    config: &ConvergenceConfig,
    step: f64,
    trials: usize,
) -> Result<ConvergenceReport> {
    let setup = ConvergenceSetup::new(config)?;
    verify_with_setup(&setup, step, trials)
}

pub fn verify_with_setup(setup: &ConvergenceSetup, step: f64, trials: usize) -> Result<ConvergenceReport> {
    if trials == 0 {
        return Err(Error::invalid("at least one trial is required"));
    }
    if !(step >= 0.0 && step.is_finite()) {
        return Err(Error::invalid(format!("step size must be finite and non-negative, got {step}")));
    }
    let rounds = setup.config.rounds;
    let n = setup.system.w_e_star.len();
    let mut sums = vec![DVector::<f64>::zeros(n); rounds];
    let mut completed = 0usize;
    let mut diverged_trials = 0usize;
    for t in 0..trials {
        let mut local = vec![DVector::<f64>::zeros(n); rounds];
        match setup.simulate(step, seeds::run_seed(setup.config.seed, t), |r, e| local[r].copy_from(e)) {
            Ok(()) => {
                completed += 1;
                for (s, l) in sums.iter_mut().zip(&local) {
                    *s += l;
                }
            }
            Err(Error::Diverged { .. }) => diverged_trials += 1,
            Err(e) => return Err(e),
        }
    }
    let initial_norm = setup.system.w_e_star.norm();
    let trajectory: Vec<f64> = if completed > 0 {
        sums.iter().map(|s| s.norm() / completed as f64).collect()
    } else {
        Vec::new()
    };
    let final_norm = trajectory.last().copied().unwrap_or(f64::INFINITY);
    let diverged = diverged_trials > 0 || final_norm > 10.0 * initial_norm;
    let converged = !diverged && final_norm < 0.01 * initial_norm;
    Ok(ConvergenceReport {
        step,
        bound: setup.bound.value(),
        trials,
        diverged_trials,
        initial_norm,
        final_norm,
        trajectory,
        converged,
        diverged,
    })
}
