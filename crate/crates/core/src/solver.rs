//! Short-step path-following interior-point method.
//!
//! Minimizes `f(w; t) = t * R_n(w) + F(w)` along the central path, where
//! `R_n` is the empirical log-loss risk and `F` the polytope barrier. Each
//! iteration raises `t` by `gamma / ||grad R_n(w)||*_{w,t}` and then takes
//! one full Newton step at the new `t`. With the default constants the
//! local norm of the gradient stays below `beta` after every Newton step and
//! below `tau` after every increase of `t`, which is what makes the
//! functional-gap certificate valid.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::barrier::{self, BarrierError, BarrierEval, Constraint, Polytope};
use crate::data::Sample;
use crate::linalg::CholeskyFactor;
use crate::objective::{self, ObjectiveError, RiskEval};

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("Hessian is not numerically positive definite (pivot {pivot}, value {value:e})")]
    Conditioning { pivot: usize, value: f64 },
    #[error("iterate left the feasible region at iteration {iteration}: violates {constraint}")]
    Infeasible { iteration: usize, constraint: Constraint, trace: Vec<TraceRecord> },
    #[error(transparent)]
    Barrier(#[from] BarrierError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error("sample has {sample} points but the polytope has dimension {polytope}")]
    Dimension { sample: usize, polytope: usize },
    #[error("epsilon must be positive and finite, got {0}")]
    Epsilon(f64),
    #[error("invalid path constants: {0}")]
    Constants(String),
    #[error("the certificate is undefined at t = 0")]
    UndefinedCertificate,
}

impl From<crate::linalg::NotPositiveDefinite> for SolverError {
    fn from(e: crate::linalg::NotPositiveDefinite) -> Self {
        SolverError::Conditioning { pivot: e.pivot, value: e.value }
    }
}

pub type Result<T> = std::result::Result<T, SolverError>;

/// Step constants of the path-following scheme.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathConstants {
    pub tau: f64,
    pub gamma: f64,
    pub beta: f64,
}

impl Default for PathConstants {
    fn default() -> Self {
        Self { tau: 0.2291, gamma: 0.14, beta: 0.088 }
    }
}

impl PathConstants {
    /// Accepts constants for which one Newton step maps a local norm of at
    /// most `beta + gamma <= tau` back below `beta`.
    pub fn new(tau: f64, gamma: f64, beta: f64) -> Result<Self> {
        let c = Self { tau, gamma, beta };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let Self { tau, gamma, beta } = *self;
        if !(tau > 0.0 && tau <= 0.5) {
            return Err(SolverError::Constants(format!("tau = {tau} must lie in (0, 1/2]")));
        }
        if !(beta > 0.0 && gamma > 0.0) {
            return Err(SolverError::Constants("beta and gamma must be positive".into()));
        }
        if beta + gamma > tau {
            return Err(SolverError::Constants(format!(
                "beta + gamma = {} exceeds tau = {tau}",
                beta + gamma
            )));
        }
        let lam = beta + gamma;
        let contracted = (lam / (1.0 - lam)).powi(2);
        if contracted > beta {
            return Err(SolverError::Constants(format!(
                "a Newton step from local norm {lam} only guarantees {contracted}, above beta = {beta}"
            )));
        }
        Ok(())
    }
}

/// Current iterate of the path-following scheme.
#[derive(Debug, Clone, PartialEq)]
pub struct SolverState {
    pub w: DVector<f64>,
    pub t: f64,
    pub k: usize,
    /// Local dual norm of `grad f(w; t)`.
    pub lambda: f64,
    pub cert_gap: Option<f64>,
}

/// One line of the iteration trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub k: usize,
    pub t: f64,
    /// Local norm right after the increase of `t`, before the Newton step.
    pub lambda_increase: f64,
    /// Local norm after the Newton step.
    pub lambda: f64,
    pub objective: f64,
    pub certificate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub w_star: DVector<f64>,
    pub iterations: usize,
    /// Certified bound on `R_n(w_star) - min R_n`, in nats.
    pub epsilon_cert: f64,
    /// False when the iteration limit was hit or the local-norm contract
    /// failed at the final iterate.
    pub certified: bool,
    pub t: f64,
    pub lambda: f64,
    pub objective: f64,
    /// Number of iterations where `lambda > beta` after the Newton step or
    /// `lambda > tau` after the increase of `t`.
    pub contract_violations: usize,
    pub trace: Option<Vec<TraceRecord>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveOptions {
    pub constants: PathConstants,
    pub epsilon: f64,
    /// Defaults to [`default_max_iter`].
    pub max_iter: Option<usize>,
    pub record_trace: bool,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self { constants: PathConstants::default(), epsilon: 1e-4, max_iter: None, record_trace: false }
    }
}

impl SolveOptions {
    pub fn with_epsilon(epsilon: f64) -> Self {
        Self { epsilon, ..Self::default() }
    }
}

/// `ceil(64 sqrt(nu) ln(nu n / eps))`.
pub fn default_max_iter(nu: f64, n: usize, epsilon: f64) -> usize {
    let arg = (nu * n as f64 / epsilon).max(std::f64::consts::E);
    (64.0 * nu.sqrt() * arg.ln()).ceil() as usize
}

/// `sqrt(gᵀ H⁻¹ g)` through a Cholesky factorization of `H`.
pub fn local_dual_norm(g: &DVector<f64>, h: &DMatrix<f64>) -> Result<f64> {
    Ok(CholeskyFactor::new(h)?.dual_norm(g))
}

/// `(1/t) (nu + beta (beta + sqrt nu) / (1 - beta))`.
pub fn certificate_bound(t: f64, nu: f64, beta: f64) -> Result<f64> {
    if !(t > 0.0) {
        return Err(SolverError::UndefinedCertificate);
    }
    Ok(gap_numerator(nu, beta) / t)
}

/// Certified gap for a state whose local norm is at most `beta`.
pub fn certificate(state: &SolverState, nu: f64, c: &PathConstants) -> Result<f64> {
    certificate_bound(state.t, nu, c.beta)
}

fn gap_numerator(nu: f64, beta: f64) -> f64 {
    nu + beta * (beta + nu.sqrt()) / (1.0 - beta)
}

/// Path parameter at which the certificate drops to `epsilon`.
pub fn stopping_threshold(nu: f64, c: &PathConstants, epsilon: f64) -> f64 {
    gap_numerator(nu, c.beta) / epsilon
}

/// Derivatives of the objective and the barrier at one point.
struct Derivs {
    risk: RiskEval,
    barrier: BarrierEval,
}

impl Derivs {
    fn at(w: &DVector<f64>, sample: &Sample, p: &Polytope) -> Result<Self> {
        let barrier = barrier::barrier_eval(w, p)?;
        let risk = objective::risk(w, sample)?;
        Ok(Self { risk, barrier })
    }

    fn hessian(&self, t: f64) -> DMatrix<f64> {
        let mut h = self.barrier.hessian.clone();
        if t != 0.0 {
            for i in 0..h.nrows() {
                h[(i, i)] += t * self.risk.hessian_diag[i];
            }
        }
        h
    }

    fn gradient(&self, t: f64) -> DVector<f64> {
        &self.barrier.gradient + &self.risk.gradient * t
    }
}

fn check_dims(sample: &Sample, p: &Polytope) -> Result<()> {
    if sample.len() != p.dim() {
        return Err(SolverError::Dimension { sample: sample.len(), polytope: p.dim() });
    }
    Ok(())
}

/// Full Newton step on `f(.; t)` at fixed `t`.
pub fn newton_step(state: &SolverState, sample: &Sample, p: &Polytope) -> Result<SolverState> {
    check_dims(sample, p)?;
    let d = Derivs::at(&state.w, sample, p)?;
    let factor = CholeskyFactor::new(&d.hessian(state.t))?;
    let step = factor.solve(&d.gradient(state.t));
    let w = &state.w - step;
    if let Some((constraint, _)) = p.first_violation(&w) {
        return Err(SolverError::Infeasible { iteration: state.k + 1, constraint, trace: Vec::new() });
    }
    let d = Derivs::at(&w, sample, p)?;
    let lambda = CholeskyFactor::new(&d.hessian(state.t))?.dual_norm(&d.gradient(state.t));
    Ok(SolverState { w, t: state.t, k: state.k + 1, lambda, cert_gap: None })
}

/// Outcome of raising the path parameter.
#[derive(Debug, Clone, PartialEq)]
pub enum PathUpdate {
    Advanced(SolverState),
    /// `grad R_n(w) = 0`: `w` is the unconstrained minimizer and lies inside
    /// the polytope, so it is exactly optimal.
    Optimal(SolverState),
}

/// Raises `t` by `gamma / ||grad R_n(w)||*_{w,t}` and recomputes the local norm.
pub fn increase_t(
    state: &SolverState,
    sample: &Sample,
    p: &Polytope,
    c: &PathConstants,
) -> Result<PathUpdate> {
    check_dims(sample, p)?;
    let d = Derivs::at(&state.w, sample, p)?;
    let norm = CholeskyFactor::new(&d.hessian(state.t))?.dual_norm(&d.risk.gradient);
    if norm == 0.0 {
        return Ok(PathUpdate::Optimal(SolverState { cert_gap: Some(0.0), ..state.clone() }));
    }
    let t = state.t + c.gamma / norm;
    let lambda = CholeskyFactor::new(&d.hessian(t))?.dual_norm(&d.gradient(t));
    Ok(PathUpdate::Advanced(SolverState { t, lambda, cert_gap: None, ..state.clone() }))
}

/// Starting state: analytic center at `t = 0`.
pub fn initial_state(p: &Polytope) -> SolverState {
    SolverState { w: barrier::analytic_center(p), t: 0.0, k: 0, lambda: 0.0, cert_gap: None }
}

/// Runs the path-following scheme until the certificate is at most
/// `opts.epsilon`.
///
/// Each iterate carries the factorization of `grad² f(w; t)`; it yields the
/// post-step local norm and is reused for the next increase of `t`.
pub fn fit(sample: &Sample, p: &Polytope, opts: &SolveOptions) -> Result<FitResult> {
    check_dims(sample, p)?;
    opts.constants.validate()?;
    if !(opts.epsilon > 0.0 && opts.epsilon.is_finite()) {
        return Err(SolverError::Epsilon(opts.epsilon));
    }
    let c = opts.constants;
    let nu = barrier::barrier_parameter(p);
    let t_stop = stopping_threshold(nu, &c, opts.epsilon);
    let max_iter = opts.max_iter.unwrap_or_else(|| default_max_iter(nu, p.dim(), opts.epsilon));

    let mut w = barrier::analytic_center(p);
    let mut d = Derivs::at(&w, sample, p)?;
    let mut t = 0.0;
    let mut factor = CholeskyFactor::new(&d.hessian(t))?;
    let mut lambda = factor.dual_norm(&d.gradient(t));
    let mut k = 0;
    let mut violations = 0;
    let mut trace = Vec::new();

    let finish = |w: DVector<f64>,
                  d: &Derivs,
                  k: usize,
                  t: f64,
                  lambda: f64,
                  violations: usize,
                  trace: Vec<TraceRecord>,
                  gap: f64,
                  reached: bool| FitResult {
        w_star: w,
        iterations: k,
        epsilon_cert: gap,
        certified: reached && lambda <= c.beta,
        t,
        lambda,
        objective: d.risk.value,
        contract_violations: violations,
        trace: opts.record_trace.then_some(trace),
    };

    loop {
        let grad_norm = factor.dual_norm(&d.risk.gradient);
        if grad_norm == 0.0 {
            return Ok(finish(w, &d, k, t, lambda, violations, trace, 0.0, true));
        }
        t += c.gamma / grad_norm;

        let newton = CholeskyFactor::new(&d.hessian(t))?;
        let g = d.gradient(t);
        let step = newton.solve(&g);
        let lambda_increase = g.dot(&step).max(0.0).sqrt();
        let next = &w - &step;
        k += 1;
        if let Some((constraint, _)) = p.first_violation(&next) {
            return Err(SolverError::Infeasible { iteration: k, constraint, trace });
        }
        w = next;
        d = Derivs::at(&w, sample, p)?;
        factor = CholeskyFactor::new(&d.hessian(t))?;
        lambda = factor.dual_norm(&d.gradient(t));
        if lambda > c.beta || lambda_increase > c.tau {
            violations += 1;
        }

        let gap = gap_numerator(nu, c.beta) / t;
        if opts.record_trace {
            trace.push(TraceRecord {
                k,
                t,
                lambda_increase,
                lambda,
                objective: d.risk.value,
                certificate: gap,
            });
        }
        if t >= t_stop {
            return Ok(finish(w, &d, k, t, lambda, violations, trace, gap, true));
        }
        if k >= max_iter {
            return Ok(finish(w, &d, k, t, lambda, violations, trace, gap, false));
        }
    }
}

/// Writes trace records as line-delimited JSON.
pub fn write_trace<W: Write>(records: &[TraceRecord], mut sink: W) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut sink, r)?;
        sink.write_all(b"\n")?;
    }
    sink.flush()
}
