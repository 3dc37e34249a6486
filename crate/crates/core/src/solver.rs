//! Exact single-level kernel quantile regression.
//!
//! For a decreasing sequence of smoothing widths γ the smoothed problem is
//! minimized by accelerated proximal gradient steps, the singular set is grown
//! by set expansion, and the nonsmooth problem restricted to that set is solved
//! exactly and checked against its KKT conditions.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::backend::{Backend, DenseBackend, SpectralBackend, StepDirection};
use crate::error::{check_len, Error, Result};
use crate::kernel::{EigenDecomposition, KernelMatrix, KernelModel};
use crate::linalg::{compensated_sum, matvec};
use crate::loss::{kqr_objective, smoothed_check_deriv, QuantileLevel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub gamma_init: f64,
    pub gamma_shrink: f64,
    pub eta_floor: f64,
    pub max_outer_gamma_steps: usize,
    pub max_apgd_iters: usize,
    /// Max-norm change of the fitted values that ends an APGD run.
    pub apgd_tol: f64,
    pub kkt_tol: f64,
    pub singular_band_tol: f64,
    pub ridge_eps: f64,
    /// Project onto the singular-set constraints after every APGD step
    /// instead of once per expansion round.
    pub project_every_iteration: bool,
    /// Reset the momentum sequence when the step opposes the previous one.
    pub adaptive_restart: bool,
    /// Attempt certification at doubling iteration counts instead of only
    /// after APGD converges.
    pub early_certify: bool,
    /// Keep every set-expansion sequence in the returned solution.
    pub record_trace: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            gamma_init: 1.0,
            gamma_shrink: 0.25,
            eta_floor: 1e-5,
            max_outer_gamma_steps: 12,
            max_apgd_iters: 20_000,
            apgd_tol: 1e-8,
            kkt_tol: 1e-5,
            singular_band_tol: 1e-8,
            ridge_eps: 1e-3,
            project_every_iteration: false,
            adaptive_restart: true,
            early_certify: true,
            record_trace: false,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("gamma_init", self.gamma_init),
            ("eta_floor", self.eta_floor),
            ("apgd_tol", self.apgd_tol),
            ("kkt_tol", self.kkt_tol),
            ("singular_band_tol", self.singular_band_tol),
            ("ridge_eps", self.ridge_eps),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::invalid(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.gamma_shrink > 0.0 && self.gamma_shrink < 1.0) {
            return Err(Error::invalid("gamma_shrink must lie in (0, 1)"));
        }
        if self.max_outer_gamma_steps == 0 || self.max_apgd_iters == 0 {
            return Err(Error::invalid("iteration budgets must be positive"));
        }
        Ok(())
    }
}

/// `c_{k+1} = (1 + √(1 + 4c_k²)) / 2`.
pub fn momentum_next(c: f64) -> f64 {
    0.5 * (1.0 + (1.0 + 4.0 * c * c).sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ApgdState {
    pub b_prev: f64,
    pub b_curr: f64,
    pub alpha_prev: DVector<f64>,
    pub alpha_curr: DVector<f64>,
    pub c_k: f64,
    pub iter: usize,
}

impl ApgdState {
    pub fn new(b: f64, alpha: DVector<f64>) -> Self {
        Self {
            b_prev: b,
            b_curr: b,
            alpha_prev: alpha.clone(),
            alpha_curr: alpha,
            c_k: 1.0,
            iter: 0,
        }
    }
}

/// One accelerated step on the smoothed objective over the kernel held in
/// `eig`.
pub fn apgd_step(
    state: &ApgdState,
    eig: &EigenDecomposition,
    y: &DVector<f64>,
    tau: QuantileLevel,
    gamma: f64,
    lambda: f64,
) -> Result<ApgdState> {
    let n = eig.n();
    check_len(n, y.len())?;
    check_len(n, state.alpha_curr.len())?;
    check_len(n, state.alpha_prev.len())?;
    if !(gamma > 0.0) || !(lambda > 0.0) {
        return Err(Error::invalid("gamma and lambda must be positive"));
    }
    let backend = SpectralBackend::new(eig);
    let step = backend.prepare(1.0, 0.0, gamma, lambda)?;
    let c_next = momentum_next(state.c_k);
    let m = (state.c_k - 1.0) / c_next;
    let b_bar = state.b_curr + m * (state.b_curr - state.b_prev);
    let alpha_bar = &state.alpha_curr + (&state.alpha_curr - &state.alpha_prev) * m;
    let coef = backend.from_alpha(&alpha_bar);
    let kpart = backend.kernel_part(&coef);
    let t = tau.value();
    let z = DVector::from_fn(n, |i, _| smoothed_check_deriv(y[i] - b_bar - kpart[i], t, gamma));
    let (db, dcoef) = step.direction(&z, &coef);
    let b_new = b_bar + 2.0 * gamma * db;
    let alpha_new = alpha_bar + backend.to_alpha(&dcoef) * (2.0 * gamma);
    if !b_new.is_finite() || alpha_new.iter().any(|v| !v.is_finite()) {
        return Err(Error::numerical("APGD iterate diverged"));
    }
    Ok(ApgdState {
        b_prev: state.b_curr,
        b_curr: b_new,
        alpha_prev: state.alpha_curr.clone(),
        alpha_curr: alpha_new,
        c_k: c_next,
        iter: state.iter + 1,
    })
}

/// Closest point (in intercept and fitted values) satisfying
/// `y_i = b + K_iᵀα` for `i ∈ S`. Coefficients are recovered through the
/// floored eigenbasis.
pub fn project_onto_constraints(
    b: f64,
    alpha: &DVector<f64>,
    k: &DMatrix<f64>,
    eig: &EigenDecomposition,
    set: &[usize],
    y: &DVector<f64>,
) -> Result<(f64, DVector<f64>)> {
    let n = y.len();
    check_len(n, alpha.len())?;
    check_len(n, k.nrows())?;
    check_len(n, eig.n())?;
    if let Some(&i) = set.iter().find(|&&i| i >= n) {
        return Err(Error::invalid(format!("constraint index {i} out of range")));
    }
    if set.is_empty() {
        return Ok((b, alpha.clone()));
    }
    let kpart = matvec(k, alpha);
    let (b_new, theta) = project_parts(b, &kpart, set, y);
    let backend = SpectralBackend::new(eig);
    Ok((b_new, backend.to_alpha(&backend.solve_kernel(&theta))))
}

pub(crate) fn project_parts(b: f64, kpart: &DVector<f64>, set: &[usize], y: &DVector<f64>) -> (f64, DVector<f64>) {
    let shift = compensated_sum(set.iter().map(|&i| y[i] - b - kpart[i])) / (set.len() as f64 + 1.0);
    let b_new = b + shift;
    let mut theta = kpart.clone();
    for &i in set {
        theta[i] = y[i] - b_new;
    }
    (b_new, theta)
}

/// `{i : |r_i| ≤ γ}`, zero-based and sorted.
pub fn expand_singular_set(residuals: &DVector<f64>, gamma: f64) -> Vec<usize> {
    residuals
        .iter()
        .enumerate()
        .filter(|(_, r)| r.abs() <= gamma)
        .map(|(i, _)| i)
        .collect()
}

/// Largest violation of the optimality system of the nonsmooth problem at
/// `(b, α)`, minimized over admissible subgradients of residuals within
/// `band` of zero.
pub fn kkt_residual(
    b: f64,
    alpha: &DVector<f64>,
    y: &DVector<f64>,
    k: &DMatrix<f64>,
    lambda: f64,
    tau: QuantileLevel,
    band: f64,
) -> Result<f64> {
    let n = y.len();
    check_len(n, alpha.len())?;
    check_len(n, k.nrows())?;
    check_len(n, k.ncols())?;
    if !(band > 0.0) {
        return Err(Error::invalid("band must be positive"));
    }
    let kalpha = matvec(k, alpha);
    let r = DVector::from_fn(n, |i, _| y[i] - b - kalpha[i]);
    let shift = DVector::zeros(n);
    Ok(kkt_core(k, &r, &kalpha, alpha, &shift, lambda, tau.value(), band, true))
}

/// Stationarity residual for the system
/// `K(s/n − shift − λα) = 0`, `Σ s_i = n Σ shift_i`,
/// with `s_i = ρ′_τ(r_i)` off the band and `s_i ∈ [τ−1, τ]` on it. `shift`
/// carries the crossing-penalty coupling of the multi-level problem.
#[allow(clippy::too_many_arguments)]
pub(crate) fn kkt_core(
    k: &DMatrix<f64>,
    r: &DVector<f64>,
    kalpha: &DVector<f64>,
    alpha: &DVector<f64>,
    shift: &DVector<f64>,
    lambda: f64,
    tau: f64,
    band: f64,
    full: bool,
) -> f64 {
    let n = r.len();
    let nf = n as f64;
    let mut s = DVector::zeros(n);
    let mut active = Vec::new();
    for i in 0..n {
        s[i] = if r[i] > band {
            tau
        } else if r[i] < -band {
            tau - 1.0
        } else {
            active.push(i);
            (nf * (lambda * alpha[i] + shift[i])).clamp(tau - 1.0, tau)
        };
    }
    let kshift = matvec(k, shift);
    let target = kalpha * lambda + &kshift;
    let sum_shift = compensated_sum(shift.iter().copied());
    let eval = |s: &DVector<f64>| {
        let ks = matvec(k, s) / nf;
        let stat = ks
            .iter()
            .zip(target.iter())
            .fold(0.0_f64, |acc, (a, t)| acc.max((a - t).abs()));
        stat.max((compensated_sum(s.iter().copied()) / nf - sum_shift).abs())
    };
    let mut best = eval(&s);
    if full && !active.is_empty() && best > 0.0 {
        if let Some(s_ls) = least_squares_subgradient(k, &s, &active, &target, sum_shift, tau) {
            best = best.min(eval(&s_ls));
        }
    }
    best
}

/// Box-constrained least squares over the active subgradients: clipped
/// normal-equation solution polished by projected gradient steps.
fn least_squares_subgradient(
    k: &DMatrix<f64>,
    s: &DVector<f64>,
    active: &[usize],
    target: &DVector<f64>,
    sum_shift: f64,
    tau: f64,
) -> Option<DVector<f64>> {
    let n = k.nrows();
    let nf = n as f64;
    let m = active.len();
    let mut fixed = s.clone();
    for &i in active {
        fixed[i] = 0.0;
    }
    let mut t = DVector::zeros(n + 1);
    let kf = matvec(k, &fixed) / nf;
    for i in 0..n {
        t[i] = target[i] - kf[i];
    }
    t[n] = sum_shift - fixed.sum() / nf;
    let mut mat = DMatrix::zeros(n + 1, m);
    for (c, &j) in active.iter().enumerate() {
        for i in 0..n {
            mat[(i, c)] = k[(i, j)] / nf;
        }
        mat[(n, c)] = 1.0 / nf;
    }
    let mut gram = mat.tr_mul(&mat);
    let rhs = mat.tr_mul(&t);
    let scale = gram.diagonal().max().max(f64::MIN_POSITIVE);
    for i in 0..m {
        gram[(i, i)] += 1e-13 * scale;
    }
    let chol = gram.clone().cholesky()?;
    let mut x = chol.solve(&rhs);
    let clip = |x: &mut DVector<f64>| {
        for v in x.iter_mut() {
            *v = v.clamp(tau - 1.0, tau);
        }
    };
    clip(&mut x);
    // Step size from a power-iteration estimate of the largest eigenvalue.
    let mut v = DVector::from_element(m, 1.0 / (m as f64).sqrt());
    let mut l = scale;
    for _ in 0..30 {
        let gv = &gram * &v;
        l = gv.norm();
        if l == 0.0 {
            break;
        }
        v = gv / l;
    }
    let step = 1.0 / (1.05 * l.max(f64::MIN_POSITIVE));
    for _ in 0..200 {
        let grad = &gram * &x - &rhs;
        x -= grad * step;
        clip(&mut x);
    }
    let mut out = fixed;
    for (c, &i) in active.iter().enumerate() {
        out[i] = x[c];
    }
    Some(out)
}

/// Exact solution of the nonsmooth problem under the hypothesis that the
/// residuals in `set` vanish and all others keep the signs in `signs`.
/// Violating indices are pivoted in or out a bounded number of times.
pub(crate) fn exact_refit(
    k: &DMatrix<f64>,
    y: &DVector<f64>,
    tau: f64,
    lambda: f64,
    set: &[usize],
    signs: &DVector<f64>,
    band: f64,
) -> Option<(f64, DVector<f64>)> {
    const MAX_PIVOTS: usize = 20;
    const BOX_TOL: f64 = 1e-10;
    let n = y.len();
    let nl = n as f64 * lambda;
    let mut in_set = vec![false; n];
    for &i in set {
        in_set[i] = true;
    }
    let mut s = DVector::from_fn(n, |i, _| if signs[i] > 0.0 { tau } else { tau - 1.0 });
    // K·u restricted to the free coordinates, kept up to date column by column.
    let mut u_out = DVector::from_fn(n, |i, _| if in_set[i] { 0.0 } else { s[i] / nl });
    let mut ku_out = matvec(k, &u_out);
    let set_free = |i: usize, value: f64, u_out: &mut DVector<f64>, ku_out: &mut DVector<f64>| {
        let delta = value - u_out[i];
        if delta != 0.0 {
            ku_out.axpy(delta, &k.column(i), 1.0);
            u_out[i] = value;
        }
    };
    for _ in 0..MAX_PIVOTS {
        if !in_set.iter().any(|&b| b) {
            let i = (0..n).min_by(|&a, &b| signs[a].abs().total_cmp(&signs[b].abs()))?;
            in_set[i] = true;
            set_free(i, 0.0, &mut u_out, &mut ku_out);
        }
        let idx: Vec<usize> = (0..n).filter(|&i| in_set[i]).collect();
        let m = idx.len();
        let mut a = DMatrix::zeros(m + 1, m + 1);
        let mut rhs = DVector::zeros(m + 1);
        for (p, &i) in idx.iter().enumerate() {
            for (q, &j) in idx.iter().enumerate() {
                a[(p, q)] = k[(i, j)];
            }
            a[(p, m)] = 1.0;
            a[(m, p)] = 1.0;
            rhs[p] = y[i] - ku_out[i];
        }
        rhs[m] = -u_out.sum();
        let sol = a.lu().solve(&rhs)?;
        if sol.iter().any(|v| !v.is_finite()) {
            return None;
        }
        let b = sol[m];
        let mut ku = ku_out.clone();
        for (p, &i) in idx.iter().enumerate() {
            s[i] = nl * sol[p];
            ku.axpy(sol[p], &k.column(i), 1.0);
        }
        let mut changed = false;
        for i in 0..n {
            let r = y[i] - b - ku[i];
            if in_set[i] {
                if s[i] > tau + BOX_TOL {
                    in_set[i] = false;
                    s[i] = tau;
                    set_free(i, tau / nl, &mut u_out, &mut ku_out);
                    changed = true;
                } else if s[i] < tau - 1.0 - BOX_TOL {
                    in_set[i] = false;
                    s[i] = tau - 1.0;
                    set_free(i, (tau - 1.0) / nl, &mut u_out, &mut ku_out);
                    changed = true;
                }
            } else if (s[i] == tau && r < -band) || (s[i] == tau - 1.0 && r > band) {
                in_set[i] = true;
                set_free(i, 0.0, &mut u_out, &mut ku_out);
                changed = true;
            }
        }
        if !changed {
            let mut u = u_out;
            for (p, &i) in idx.iter().enumerate() {
                u[i] = sol[p];
            }
            return Some((b, u));
        }
    }
    None
}

/// Set-expansion sequence observed at one smoothing width.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpansionRecord {
    pub gamma: f64,
    pub sets: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KqrSolution {
    pub b: f64,
    pub alpha: DVector<f64>,
    pub tau: QuantileLevel,
    pub lambda: f64,
    pub singular_set: Vec<usize>,
    pub kkt_residual: f64,
    pub final_gamma: f64,
    pub iterations: usize,
    pub objective: f64,
    pub certified: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub trace: Vec<ExpansionRecord>,
}

impl KqrSolution {
    /// `b·1 + Kα` on the training rows.
    pub fn fitted(&self, k: &DMatrix<f64>) -> DVector<f64> {
        let mut f = matvec(k, &self.alpha);
        f.add_scalar_mut(self.b);
        f
    }
}

#[derive(Clone)]
pub(crate) struct Point {
    pub(crate) b: f64,
    pub(crate) coef: DVector<f64>,
    pub(crate) kpart: DVector<f64>,
}

impl Point {
    pub(crate) fn fitted(&self, i: usize) -> f64 {
        self.b + self.kpart[i]
    }
}

struct ApgdRun {
    x: Point,
    x_prev: Point,
    c: f64,
    iter: usize,
}

impl ApgdRun {
    fn new(x: Point) -> Self {
        Self {
            x_prev: x.clone(),
            x,
            c: 1.0,
            iter: 0,
        }
    }

    /// Runs until `until` total iterations or convergence; returns whether
    /// the fitted-value change fell below the tolerance.
    #[allow(clippy::too_many_arguments)]
    fn advance<B: Backend>(
        &mut self,
        backend: &B,
        step: &B::Step,
        y: &DVector<f64>,
        tau: f64,
        gamma: f64,
        cfg: &SolverConfig,
        constraint: &[usize],
        until: usize,
    ) -> Result<bool> {
        let n = y.len();
        while self.iter < until {
            self.iter += 1;
            let c_next = momentum_next(self.c);
            let m = (self.c - 1.0) / c_next;
            let bar = if m == 0.0 {
                self.x.clone()
            } else {
                Point {
                    b: self.x.b + m * (self.x.b - self.x_prev.b),
                    coef: &self.x.coef + (&self.x.coef - &self.x_prev.coef) * m,
                    kpart: &self.x.kpart + (&self.x.kpart - &self.x_prev.kpart) * m,
                }
            };
            let z = DVector::from_fn(n, |i, _| smoothed_check_deriv(y[i] - bar.fitted(i), tau, gamma));
            let (db, dcoef) = step.direction(&z, &bar.coef);
            let coef = &bar.coef + dcoef * (2.0 * gamma);
            let mut next = Point {
                b: bar.b + 2.0 * gamma * db,
                kpart: backend.kernel_part(&coef),
                coef,
            };
            if !constraint.is_empty() {
                next = project_point(backend, &next, constraint, y);
            }
            if !next.b.is_finite() || next.kpart.iter().any(|v| !v.is_finite()) {
                return Err(Error::numerical("APGD iterate diverged"));
            }
            let mut change = 0.0_f64;
            let mut align = 0.0;
            for i in 0..n {
                let d = next.fitted(i) - self.x.fitted(i);
                change = change.max(d.abs());
                align += (bar.fitted(i) - next.fitted(i)) * d;
            }
            self.c = if cfg.adaptive_restart && align > 0.0 {
                1.0
            } else {
                c_next
            };
            self.x_prev = std::mem::replace(&mut self.x, next);
            if change <= cfg.apgd_tol {
                return Ok(true);
            }
        }
        Ok(false)
    }
}

pub(crate) fn project_point<B: Backend>(backend: &B, x: &Point, set: &[usize], y: &DVector<f64>) -> Point {
    if set.is_empty() {
        return x.clone();
    }
    let (b, theta) = project_parts(x.b, &x.kpart, set, y);
    Point {
        b,
        coef: backend.solve_kernel(&theta),
        kpart: theta,
    }
}

struct Problem<'a> {
    k: &'a DMatrix<f64>,
    y: &'a DVector<f64>,
    tau: f64,
    lambda: f64,
}

struct Candidate {
    b: f64,
    alpha: DVector<f64>,
    kkt: f64,
}

impl Problem<'_> {
    fn candidate(&self, b: f64, alpha: DVector<f64>, band: f64, full: bool) -> Candidate {
        let kalpha = matvec(self.k, &alpha);
        let r = DVector::from_fn(self.y.len(), |i, _| self.y[i] - b - kalpha[i]);
        let shift = DVector::zeros(r.len());
        let kkt = kkt_core(self.k, &r, &kalpha, &alpha, &shift, self.lambda, self.tau, band, full);
        Candidate { b, alpha, kkt }
    }
}

/// Last exact refit, keyed by the hypothesis it was computed under. The
/// refit depends on the iterate only through the set and residual signs,
/// so repeated checkpoints that land on the same hypothesis reuse it.
struct RefitMemo {
    set: Vec<usize>,
    positive: Vec<bool>,
    result: Option<(f64, DVector<f64>)>,
}

/// Set expansion from the empty set around `x`, then an exact refit on the
/// stabilized set.
#[allow(clippy::too_many_arguments)]
fn certify_attempt<B: Backend>(
    backend: &B,
    step: &B::Step,
    prob: &Problem<'_>,
    x: &Point,
    gamma: f64,
    cfg: &SolverConfig,
    trace: &mut Vec<ExpansionRecord>,
    memo: &mut Option<RefitMemo>,
) -> Result<Candidate> {
    let n = prob.y.len();
    let mut set: Vec<usize> = Vec::new();
    let mut sets = Vec::new();
    let mut proj = x.clone();
    for _ in 0..=n {
        proj = if cfg.project_every_iteration && !set.is_empty() {
            let mut run = ApgdRun::new(project_point(backend, &proj, &set, prob.y));
            run.advance(backend, step, prob.y, prob.tau, gamma, cfg, &set, cfg.max_apgd_iters)?;
            run.x
        } else {
            project_point(backend, x, &set, prob.y)
        };
        let r = DVector::from_fn(n, |i, _| prob.y[i] - proj.fitted(i));
        let next = expand_singular_set(&r, gamma);
        let stable = next == set;
        if cfg.record_trace {
            sets.push(next.clone());
        }
        set = next;
        if stable {
            break;
        }
    }
    if cfg.record_trace {
        trace.push(ExpansionRecord { gamma, sets });
    }
    let r = DVector::from_fn(n, |i, _| prob.y[i] - proj.fitted(i));
    let positive: Vec<bool> = r.iter().map(|&v| v > 0.0).collect();
    let refit = match memo {
        Some(m) if !set.is_empty() && m.set == set && m.positive == positive => m.result.clone(),
        _ => {
            let result = exact_refit(prob.k, prob.y, prob.tau, prob.lambda, &set, &r, cfg.singular_band_tol);
            *memo = Some(RefitMemo {
                set: set.clone(),
                positive,
                result: result.clone(),
            });
            result
        }
    };
    Ok(match refit {
        Some((b, alpha)) => prob.candidate(b, alpha, cfg.singular_band_tol, false),
        None => prob.candidate(x.b, backend.to_alpha(&x.coef), cfg.singular_band_tol, false),
    })
}

#[derive(Debug, Clone, Copy)]
struct WarmStart<'a> {
    b: f64,
    alpha: &'a DVector<f64>,
    gamma: f64,
}

fn solve_with<B: Backend>(
    backend: &B,
    k: &DMatrix<f64>,
    y: &DVector<f64>,
    tau: QuantileLevel,
    lambda: f64,
    cfg: &SolverConfig,
    warm: Option<WarmStart<'_>>,
) -> Result<KqrSolution> {
    let n = y.len();
    let prob = Problem {
        k,
        y,
        tau: tau.value(),
        lambda,
    };
    let zeros = DVector::zeros(n);
    let start = warm.unwrap_or(WarmStart {
        b: 0.0,
        alpha: &zeros,
        gamma: cfg.gamma_init,
    });
    let coef = backend.from_alpha(start.alpha);
    let mut x = Point {
        b: start.b,
        kpart: backend.kernel_part(&coef),
        coef,
    };
    let mut gamma = start.gamma.min(cfg.gamma_init);
    let mut iterations = 0;
    let mut trace = Vec::new();
    let mut best: Option<(Candidate, f64)> = None;
    let mut certified = None;
    let mut memo = None;
    'outer: for _ in 0..cfg.max_outer_gamma_steps {
        let step = backend.prepare(1.0, 0.0, gamma, lambda)?;
        let mut run = ApgdRun::new(x.clone());
        let mut checkpoint = 4;
        loop {
            let until = if cfg.early_certify {
                checkpoint.min(cfg.max_apgd_iters)
            } else {
                cfg.max_apgd_iters
            };
            let converged = run.advance(backend, &step, y, prob.tau, gamma, cfg, &[], until)?;
            let cand = certify_attempt(backend, &step, &prob, &run.x, gamma, cfg, &mut trace, &mut memo)?;
            if cand.kkt <= cfg.kkt_tol {
                iterations += run.iter;
                certified = Some((cand, gamma));
                break 'outer;
            }
            if best.as_ref().is_none_or(|(c, _)| cand.kkt < c.kkt) {
                best = Some((cand, gamma));
            }
            if converged || run.iter >= cfg.max_apgd_iters {
                break;
            }
            checkpoint *= 2;
        }
        iterations += run.iter;
        x = run.x;
        gamma *= cfg.gamma_shrink;
    }
    let (cand, final_gamma, ok) = match certified {
        Some((c, g)) => (c, g, true),
        None => {
            let (c, g) = best.ok_or_else(|| Error::numerical("no candidate produced"))?;
            let full = prob.candidate(c.b, c.alpha, cfg.singular_band_tol, true);
            let ok = full.kkt <= cfg.kkt_tol;
            (full, g, ok)
        }
    };
    let kalpha = matvec(k, &cand.alpha);
    let singular_set = (0..n)
        .filter(|&i| (y[i] - cand.b - kalpha[i]).abs() <= cfg.singular_band_tol)
        .collect();
    let objective = kqr_objective(cand.b, &cand.alpha, y, k, lambda, tau)?;
    Ok(KqrSolution {
        b: cand.b,
        alpha: cand.alpha,
        tau,
        lambda,
        singular_set,
        kkt_residual: cand.kkt,
        final_gamma,
        iterations,
        objective,
        certified: ok,
        trace,
    })
}

fn check_inputs(y: &DVector<f64>, n: usize, lambda: f64, cfg: &SolverConfig) -> Result<()> {
    check_len(n, y.len())?;
    cfg.validate()?;
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(Error::invalid(format!("lambda must be positive, got {lambda}")));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("response contains non-finite values"));
    }
    Ok(())
}

/// Exact KQR fit at one λ.
pub fn solve_kqr(
    y: &DVector<f64>,
    model: &KernelModel,
    tau: QuantileLevel,
    lambda: f64,
    config: &SolverConfig,
    warm_start: Option<&KqrSolution>,
) -> Result<KqrSolution> {
    check_inputs(y, model.n(), lambda, config)?;
    let backend = SpectralBackend::new(&model.eig);
    let warm = warm_start.map(|w| WarmStart {
        b: w.b,
        alpha: &w.alpha,
        gamma: w.final_gamma,
    });
    if let Some(w) = warm {
        check_len(model.n(), w.alpha.len())?;
    }
    solve_with(&backend, model.k(), y, tau, lambda, config, warm)
}

fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::invalid("lambda grid is empty"));
    }
    if grid.iter().any(|l| !(*l > 0.0) || !l.is_finite()) {
        return Err(Error::invalid("lambda grid values must be positive"));
    }
    if grid.windows(2).any(|w| w[0] <= w[1]) {
        return Err(Error::invalid("lambda grid must be strictly decreasing"));
    }
    Ok(())
}

fn path_with<B: Backend>(
    backend: &B,
    k: &DMatrix<f64>,
    y: &DVector<f64>,
    tau: QuantileLevel,
    grid: &[f64],
    config: &SolverConfig,
) -> Result<Vec<KqrSolution>> {
    let mut out: Vec<KqrSolution> = Vec::with_capacity(grid.len());
    for &lambda in grid {
        let warm = out.last().map(|w| WarmStart {
            b: w.b,
            alpha: &w.alpha,
            gamma: w.final_gamma,
        });
        let sol = solve_with(backend, k, y, tau, lambda, config, warm)?;
        out.push(sol);
    }
    Ok(out)
}

/// Warm-started path over a strictly decreasing λ grid, sharing one
/// eigendecomposition.
pub fn solve_kqr_path(
    y: &DVector<f64>,
    model: &KernelModel,
    tau: QuantileLevel,
    lambda_grid: &[f64],
    config: &SolverConfig,
) -> Result<Vec<KqrSolution>> {
    check_grid(lambda_grid)?;
    check_inputs(y, model.n(), lambda_grid[0], config)?;
    let backend = SpectralBackend::new(&model.eig);
    path_with(&backend, model.k(), y, tau, lambda_grid, config)
}

/// The same path algorithm with the step matrix factorized densely for
/// every (λ, γ) instead of through the eigendecomposition. Kept as the
/// comparison point for benchmarks.
pub fn solve_kqr_path_dense(
    y: &DVector<f64>,
    k: &KernelMatrix,
    tau: QuantileLevel,
    lambda_grid: &[f64],
    config: &SolverConfig,
) -> Result<Vec<KqrSolution>> {
    check_grid(lambda_grid)?;
    check_inputs(y, k.n(), lambda_grid[0], config)?;
    let m = k.as_matrix();
    let lmax = m.diagonal().max().max(f64::MIN_POSITIVE);
    let backend = DenseBackend::new(m, crate::kernel::EIGEN_FLOOR * lmax);
    path_with(&backend, m, y, tau, lambda_grid, config)
}

/// `count` log-spaced values from `max` down to `min`.
pub fn log_lambda_grid(max: f64, min: f64, count: usize) -> Result<Vec<f64>> {
    if !(max > 0.0) || !(min > 0.0) || min >= max || count < 2 {
        if count == 1 && max > 0.0 {
            return Ok(vec![max]);
        }
        return Err(Error::invalid("need max > min > 0 and count >= 1"));
    }
    let (lo, hi) = (min.ln(), max.ln());
    Ok((0..count)
        .map(|i| (hi + (lo - hi) * i as f64 / (count - 1) as f64).exp())
        .collect())
}

/// 50 values from 1 down to 1e-4.
pub fn default_lambda_grid() -> Vec<f64> {
    log_lambda_grid(1.0, 1e-4, 50).expect("constant grid is valid")
}

/// Wall-clock helper for benchmark callers.
pub fn timed<T>(f: impl FnOnce() -> T) -> (T, f64) {
    let t = Instant::now();
    let out = f();
    (out, t.elapsed().as_secs_f64())
}

#[cfg(test)]
pub(crate) fn residual_max(y: &DVector<f64>, k: &DMatrix<f64>, b: f64, alpha: &DVector<f64>, set: &[usize]) -> f64 {
    let f = matvec(k, alpha);
    let r = DVector::from_fn(set.len(), |p, _| y[set[p]] - b - f[set[p]]);
    crate::linalg::max_abs(&r)
}
