//! Joint fitting of several quantile levels with a smooth penalty on
//! crossings between adjacent levels.
//!
//! Each MM step majorizes the smoothed objective by a separable quadratic, so
//! every level is updated independently with the same `Σ⁻¹`. Exactness is
//! obtained as in the single-level solver: multi-level set expansion, an exact
//! refit of the piecewise-quadratic problem, and a KKT check.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::backend::{Backend, SpectralBackend, StepDirection};
use crate::error::{check_len, Error, Result};
use crate::kernel::{EigenDecomposition, KernelModel};
use crate::linalg::{compensated_sum, matvec};
use crate::loss::{
    nckqr_objective, smooth_relu, smooth_relu_deriv, smoothed_check, smoothed_check_deriv,
    smoothed_nckqr_objective, Coefficients, MultiLevelParams, QuantileLevel,
};
use crate::solver::{
    expand_singular_set, kkt_core, solve_kqr, project_point, ExpansionRecord, Point,
    SolverConfig,
};
use crate::spectral::sigma_factors;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NckqrProblem {
    pub taus: Vec<QuantileLevel>,
    pub lambda1: f64,
    pub lambda2: f64,
    pub eta: f64,
}

impl NckqrProblem {
    pub fn new(taus: Vec<QuantileLevel>, lambda1: f64, lambda2: f64, eta: f64) -> Result<Self> {
        let p = Self {
            taus,
            lambda1,
            lambda2,
            eta,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        self.params().validate()?;
        if !(self.lambda2 > 0.0) || !self.lambda2.is_finite() || !self.lambda1.is_finite() {
            return Err(Error::invalid("lambda2 must be positive and penalties finite"));
        }
        Ok(())
    }

    pub fn params(&self) -> MultiLevelParams<'_> {
        MultiLevelParams {
            taus: &self.taus,
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            eta: self.eta,
        }
    }

    pub fn levels(&self) -> usize {
        self.taus.len()
    }
}

/// `Σ_t Σ_i max(f_{t,i} − f_{t+1,i}, 0)`.
pub fn crossing_magnitude(fitted: &[DVector<f64>]) -> f64 {
    compensated_sum(fitted.windows(2).flat_map(|w| {
        w[0].iter()
            .zip(w[1].iter())
            .map(|(a, b)| (a - b).max(0.0))
            .collect::<Vec<_>>()
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NckqrSolution {
    pub levels: Vec<Coefficients>,
    pub problem: NckqrProblem,
    pub singular_sets: Vec<Vec<usize>>,
    pub kkt_residual: f64,
    pub crossing_magnitude: f64,
    pub objective: f64,
    pub final_gamma: f64,
    pub iterations: usize,
    pub certified: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub trace: Vec<ExpansionRecord>,
    /// Smoothed objective after every MM step, one vector per smoothing stage.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub objective_trace: Vec<Vec<f64>>,
}

impl NckqrSolution {
    pub fn fitted(&self, k: &DMatrix<f64>) -> Vec<DVector<f64>> {
        self.levels.iter().map(|c| c.fitted(k)).collect()
    }
}

/// Per-level vectors entering one MM step.
#[derive(Debug, Clone, PartialEq)]
pub struct MmWorkspace {
    /// `H′_{γ,τ_t}(y − f_t)`.
    pub z: Vec<DVector<f64>>,
    /// `V′(f_t − f_{t+1})` for `t < T`.
    pub q: Vec<DVector<f64>>,
    /// `(1ᵀw_t; K(w_t − nλ₂α_t))` with `w_t = z_t − nλ₁(q_t − q_{t−1})`.
    pub rho: Vec<DVector<f64>>,
}

fn check_levels(levels: &[Coefficients], n: usize, problem: &NckqrProblem) -> Result<()> {
    problem.validate()?;
    check_len(problem.levels(), levels.len())?;
    for c in levels {
        check_len(n, c.alpha.len())?;
    }
    Ok(())
}

fn gap_derivs(fitted: &[DVector<f64>], eta: f64) -> Vec<DVector<f64>> {
    fitted
        .windows(2)
        .map(|w| DVector::from_fn(w[0].len(), |i, _| smooth_relu_deriv(w[0][i] - w[1][i], eta)))
        .collect()
}

/// `w_t = z_t − nλ₁(q_t − q_{t−1})` with `q_0 = q_T = 0`.
fn coupled(z: &[DVector<f64>], q: &[DVector<f64>], n_lambda1: f64) -> Vec<DVector<f64>> {
    let t_count = z.len();
    (0..t_count)
        .map(|t| {
            let mut w = z[t].clone();
            if n_lambda1 != 0.0 {
                if t < t_count - 1 {
                    w -= &q[t] * n_lambda1;
                }
                if t > 0 {
                    w += &q[t - 1] * n_lambda1;
                }
            }
            w
        })
        .collect()
}

pub fn compute_mm_vectors(
    levels: &[Coefficients],
    y: &DVector<f64>,
    model: &KernelModel,
    problem: &NckqrProblem,
    gamma: f64,
) -> Result<MmWorkspace> {
    let n = model.n();
    check_len(n, y.len())?;
    check_levels(levels, n, problem)?;
    if !(gamma > 0.0) || gamma > problem.eta {
        return Err(Error::invalid(format!(
            "MM steps need 0 < gamma <= eta (gamma = {gamma}, eta = {})",
            problem.eta
        )));
    }
    let k = model.k();
    let fitted: Vec<DVector<f64>> = levels.iter().map(|c| c.fitted(k)).collect();
    let z: Vec<DVector<f64>> = fitted
        .iter()
        .zip(&problem.taus)
        .map(|(f, tau)| DVector::from_fn(n, |i, _| smoothed_check_deriv(y[i] - f[i], tau.value(), gamma)))
        .collect();
    let q = gap_derivs(&fitted, problem.eta);
    let nf = n as f64;
    let w = coupled(&z, &q, nf * problem.lambda1);
    let rho = w
        .iter()
        .zip(levels)
        .map(|(w, c)| {
            let mut r = DVector::zeros(n + 1);
            r[0] = w.sum();
            let inner = w - &c.alpha * (nf * problem.lambda2);
            r.rows_mut(1, n).copy_from(&matvec(k, &inner));
            r
        })
        .collect();
    Ok(MmWorkspace { z, q, rho })
}

/// Applies `(b_t, α_t) += 2γ Σ⁻¹ϱ_t` to every level and checks that the
/// smoothed objective did not increase.
pub fn mm_step(
    levels: &[Coefficients],
    workspace: &MmWorkspace,
    y: &DVector<f64>,
    model: &KernelModel,
    problem: &NckqrProblem,
    gamma: f64,
    config: &SolverConfig,
) -> Result<Vec<Coefficients>> {
    let n = model.n();
    check_levels(levels, n, problem)?;
    check_len(problem.levels(), workspace.rho.len())?;
    if !(gamma > 0.0) || gamma > problem.eta {
        return Err(Error::invalid("MM steps need 0 < gamma <= eta"));
    }
    let mut next = Vec::with_capacity(levels.len());
    for (c, rho) in levels.iter().zip(&workspace.rho) {
        let (db, da) = crate::spectral::sigma_apply_inverse(
            &model.eig,
            gamma,
            problem.lambda1,
            problem.lambda2,
            rho,
            config.ridge_eps,
        )?;
        next.push(Coefficients {
            b: c.b + 2.0 * gamma * db,
            alpha: &c.alpha + da * (2.0 * gamma),
        });
    }
    let params = problem.params();
    let before = smoothed_nckqr_objective(levels, y, model.k(), &params, gamma)?;
    let after = smoothed_nckqr_objective(&next, y, model.k(), &params, gamma)?;
    if after > before + 1e-10 * (1.0 + before.abs()) {
        return Err(Error::MajorizationViolation { before, after });
    }
    Ok(next)
}

/// Per-level projection onto `y_i = b_t + K_iᵀα_t`, `i ∈ S_t`.
pub fn project_multi(
    levels: &[Coefficients],
    k: &DMatrix<f64>,
    eig: &EigenDecomposition,
    sets: &[Vec<usize>],
    y: &DVector<f64>,
) -> Result<Vec<Coefficients>> {
    check_len(levels.len(), sets.len())?;
    levels
        .iter()
        .zip(sets)
        .map(|(c, s)| {
            crate::solver::project_onto_constraints(c.b, &c.alpha, k, eig, s, y)
                .map(|(b, alpha)| Coefficients { b, alpha })
        })
        .collect()
}

/// `E_t = {i : |y_i − f_{t,i}| ≤ γ}` for every level.
pub fn expand_sets_multi(
    levels: &[Coefficients],
    y: &DVector<f64>,
    k: &DMatrix<f64>,
    gamma: f64,
) -> Result<Vec<Vec<usize>>> {
    levels
        .iter()
        .map(|c| {
            check_len(y.len(), c.alpha.len())?;
            Ok(expand_singular_set(&(y - c.fitted(k)), gamma))
        })
        .collect()
}

/// Largest stationarity violation over levels, including the crossing
/// coupling `λ₁(q_t − q_{t−1})`.
pub fn nckqr_kkt_residual(
    levels: &[Coefficients],
    y: &DVector<f64>,
    k: &DMatrix<f64>,
    problem: &NckqrProblem,
    band: f64,
) -> Result<f64> {
    let n = y.len();
    check_len(n, k.nrows())?;
    check_levels(levels, n, problem)?;
    if !(band > 0.0) {
        return Err(Error::invalid("band must be positive"));
    }
    Ok(multi_kkt(levels, y, k, problem, band, true))
}

fn multi_kkt(
    levels: &[Coefficients],
    y: &DVector<f64>,
    k: &DMatrix<f64>,
    problem: &NckqrProblem,
    band: f64,
    full: bool,
) -> f64 {
    let kalpha: Vec<DVector<f64>> = levels.iter().map(|c| matvec(k, &c.alpha)).collect();
    let fitted: Vec<DVector<f64>> = kalpha
        .iter()
        .zip(levels)
        .map(|(ka, c)| ka.add_scalar(c.b))
        .collect();
    let q = gap_derivs(&fitted, problem.eta);
    let t_count = levels.len();
    let mut worst = 0.0_f64;
    for t in 0..t_count {
        let mut shift = DVector::zeros(y.len());
        if problem.lambda1 != 0.0 {
            if t < t_count - 1 {
                shift += &q[t] * problem.lambda1;
            }
            if t > 0 {
                shift -= &q[t - 1] * problem.lambda1;
            }
        }
        let r = y - &fitted[t];
        let v = kkt_core(
            k,
            &r,
            &kalpha[t],
            &levels[t].alpha,
            &shift,
            problem.lambda2,
            problem.taus[t].value(),
            band,
            full,
        );
        worst = worst.max(v);
    }
    worst
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum Gap {
    Left,
    Band,
    Right,
}

/// Bound on the KKT residual caused by rounding in the fitted values alone.
/// The crossing derivative turns an error `δ` in a gap into `λ₁ δ / 2η`, which
/// dominates when `λ₁ / η` is large.
fn rounding_floor(levels: &[Coefficients], k: &DMatrix<f64>, problem: &NckqrProblem) -> f64 {
    if problem.lambda1 == 0.0 || levels.len() < 2 {
        return 0.0;
    }
    let n = k.nrows();
    let fit_scale = levels.iter().map(|c| c.fitted(k).amax()).fold(1.0, f64::max);
    let row_sum = (0..n).map(|i| k.row(i).iter().map(|v| v.abs()).sum::<f64>()).fold(1.0, f64::max);
    16.0 * f64::EPSILON * problem.lambda1 * fit_scale * row_sum / problem.eta
}

/// Dense solve with row and column equilibration and two rounds of
/// iterative refinement.
fn solve_equilibrated(a: DMatrix<f64>, rhs: &DVector<f64>) -> Option<DVector<f64>> {
    let m = a.nrows();
    let row: Vec<f64> = (0..m)
        .map(|i| {
            let s = a.row(i).amax();
            if s > 0.0 { 1.0 / s } else { 1.0 }
        })
        .collect();
    let col: Vec<f64> = (0..m)
        .map(|j| {
            let s = (0..m).map(|i| (a[(i, j)] * row[i]).abs()).fold(0.0, f64::max);
            if s > 0.0 { 1.0 / s } else { 1.0 }
        })
        .collect();
    let scaled = DMatrix::from_fn(m, m, |i, j| a[(i, j)] * row[i] * col[j]);
    let lu = scaled.lu();
    let solve = |r: &DVector<f64>| {
        lu.solve(&DVector::from_fn(m, |i, _| r[i] * row[i]))
            .map(|z| DVector::from_fn(m, |j, _| z[j] * col[j]))
    };
    let mut x = solve(rhs)?;
    for _ in 0..2 {
        let res = rhs - &a * &x;
        x += solve(&res)?;
    }
    // Singular structures show up as a residual far above rounding.
    let res = rhs - &a * &x;
    let scale = (0..m)
        .map(|i| rhs[i].abs() + (0..m).map(|j| (a[(i, j)] * x[j]).abs()).sum::<f64>())
        .fold(f64::MIN_POSITIVE, f64::max);
    (res.amax() <= 1e-8 * scale).then_some(x)
}

/// Piece of the objective being modelled: zero residuals on `in_set`,
/// fixed subgradients `s` elsewhere, and a fixed piece of the crossing
/// penalty for every adjacent-level gap.
struct Structure {
    in_set: Vec<Vec<bool>>,
    s: Vec<DVector<f64>>,
    class: Vec<Vec<Gap>>,
    q: Vec<DVector<f64>>,
}

/// Minimizer of the quadratic model on one piece, with the multipliers of
/// the zero-residual constraints written into `st.s` and the band gap
/// derivatives into `st.q`.
fn solve_structure(
    k: &DMatrix<f64>,
    y: &DVector<f64>,
    problem: &NckqrProblem,
    st: &mut Structure,
) -> Option<Vec<Coefficients>> {
    let n = y.len();
    let nf = n as f64;
    let t_count = problem.levels();
    let (l1, l2, eta) = (problem.lambda1, problem.lambda2, problem.eta);
    let pairs = st.class.len();
    let Structure { in_set, s, class, q } = st;
    // Column layout: b_t, then s_{t,i} for i ∈ S_t, then band q_{p,i}.
    let mut col_b = vec![0; t_count];
    let mut col_s = vec![vec![usize::MAX; n]; t_count];
    let mut col_q = vec![vec![usize::MAX; n]; pairs];
    let mut m = 0;
    for t in 0..t_count {
        col_b[t] = m;
        m += 1;
        for i in 0..n {
            if in_set[t][i] {
                col_s[t][i] = m;
                m += 1;
            }
        }
    }
    for p in 0..pairs {
        for i in 0..n {
            if class[p][i] == Gap::Band {
                col_q[p][i] = m;
                m += 1;
            }
        }
    }
    let s_cols: Vec<Vec<(usize, usize)>> = (0..t_count)
        .map(|t| (0..n).filter(|&i| in_set[t][i]).map(|i| (i, col_s[t][i])).collect())
        .collect();
    let q_cols: Vec<Vec<(usize, usize)>> = (0..pairs)
        .map(|p| (0..n).filter(|&i| class[p][i] == Gap::Band).map(|i| (i, col_q[p][i])).collect())
        .collect();
    // Known parts of α_t = (s_t/n − λ₁(q_t − q_{t−1}))/λ₂.
    let known_kalpha: Vec<DVector<f64>> = (0..t_count)
        .map(|t| {
            let mut a = DVector::from_fn(n, |i, _| if in_set[t][i] { 0.0 } else { s[t][i] / nf });
            if t < pairs {
                for i in 0..n {
                    if class[t][i] != Gap::Band {
                        a[i] -= l1 * q[t][i];
                    }
                }
            }
            if t > 0 && t - 1 < pairs {
                for i in 0..n {
                    if class[t - 1][i] != Gap::Band {
                        a[i] += l1 * q[t - 1][i];
                    }
                }
            }
            matvec(k, &(a / l2))
        })
        .collect();
    let mut a = DMatrix::zeros(m, m);
    let mut rhs = DVector::zeros(m);
    // Adds `weight·(b_t + K_iᵀα_t)` to row `row`.
    let add_fitted = |a: &mut DMatrix<f64>, rhs: &mut DVector<f64>, row: usize, t: usize, i: usize, weight: f64| {
        a[(row, col_b[t])] += weight;
        rhs[row] -= weight * known_kalpha[t][i];
        for &(j, c) in &s_cols[t] {
            a[(row, c)] += weight * k[(i, j)] / (nf * l2);
        }
        if t < pairs {
            for &(j, c) in &q_cols[t] {
                a[(row, c)] -= weight * l1 * k[(i, j)] / l2;
            }
        }
        if t > 0 && t - 1 < pairs {
            for &(j, c) in &q_cols[t - 1] {
                a[(row, c)] += weight * l1 * k[(i, j)] / l2;
            }
        }
    };
    for t in 0..t_count {
        // Intercept stationarity: 1ᵀα_t = 0.
        let row = col_b[t];
        let mut known = 0.0;
        for i in 0..n {
            if !in_set[t][i] {
                known += s[t][i] / nf;
            }
        }
        for &(_, c) in &s_cols[t] {
            a[(row, c)] += 1.0 / nf;
        }
        if t < pairs {
            for i in 0..n {
                if class[t][i] == Gap::Band {
                    a[(row, col_q[t][i])] -= l1;
                } else {
                    known -= l1 * q[t][i];
                }
            }
        }
        if t > 0 && t - 1 < pairs {
            for i in 0..n {
                if class[t - 1][i] == Gap::Band {
                    a[(row, col_q[t - 1][i])] += l1;
                } else {
                    known += l1 * q[t - 1][i];
                }
            }
        }
        rhs[row] = -known;
        for &(i, row) in &s_cols[t] {
            add_fitted(&mut a, &mut rhs, row, t, i, 1.0);
            rhs[row] += y[i];
        }
    }
    for p in 0..pairs {
        // 2η q − (f_p − f_{p+1}) = η on the quadratic piece.
        for &(i, row) in &q_cols[p] {
            a[(row, row)] += 2.0 * eta;
            add_fitted(&mut a, &mut rhs, row, p, i, -1.0);
            add_fitted(&mut a, &mut rhs, row, p + 1, i, 1.0);
            rhs[row] += eta;
        }
    }
    let sol = solve_equilibrated(a, &rhs)?;
    if sol.iter().any(|v| !v.is_finite()) {
        return None;
    }
    for t in 0..t_count {
        for &(i, c) in &s_cols[t] {
            s[t][i] = sol[c];
        }
    }
    for p in 0..pairs {
        for &(i, c) in &q_cols[p] {
            q[p][i] = sol[c];
        }
    }
    let levels: Vec<Coefficients> = (0..t_count)
        .map(|t| {
            let mut alpha = &s[t] / nf;
            if t < pairs {
                alpha -= &q[t] * l1;
            }
            if t > 0 && t - 1 < pairs {
                alpha += &q[t - 1] * l1;
            }
            Coefficients {
                b: sol[col_b[t]],
                alpha: alpha / l2,
            }
        })
        .collect();
    Some(levels)
}

/// Exact solution by a primal active-set method on the piecewise-quadratic
/// objective, started from `start` with zero-residual sets `sets`.
///
/// Each iteration minimizes the model of the current piece and moves toward
/// it until a residual reaches zero or a gap leaves its piece of the
/// crossing penalty. At a model minimizer, zero-residual constraints whose
/// multipliers leave `[τ − 1, τ]` are released.
fn exact_refit_multi(
    k: &DMatrix<f64>,
    y: &DVector<f64>,
    problem: &NckqrProblem,
    start: &[Coefficients],
    sets: &[Vec<usize>],
    accept: &dyn Fn(&[Coefficients]) -> bool,
) -> Option<Vec<Coefficients>> {
    const TOL: f64 = 1e-10;
    let n = y.len();
    let t_count = problem.levels();
    let eta = problem.eta;
    let taus: Vec<f64> = problem.taus.iter().map(|t| t.value()).collect();
    let pairs = if problem.lambda1 != 0.0 && t_count > 1 { t_count - 1 } else { 0 };
    let max_iter = 10 * t_count * n + 100;

    let mut x: Vec<Coefficients> = start.to_vec();
    let mut f: Vec<DVector<f64>> = x.iter().map(|c| c.fitted(k)).collect();
    let mut st = Structure {
        in_set: vec![vec![false; n]; t_count],
        s: vec![DVector::zeros(n); t_count],
        class: vec![vec![Gap::Left; n]; pairs],
        q: vec![DVector::zeros(n); pairs],
    };
    for t in 0..t_count {
        for &i in &sets[t] {
            st.in_set[t][i] = true;
        }
        if sets[t].is_empty() {
            let i = (0..n).min_by(|&a, &b| (y[a] - f[t][a]).abs().total_cmp(&(y[b] - f[t][b]).abs()))?;
            let shift = y[i] - f[t][i];
            x[t].b += shift;
            f[t].add_scalar_mut(shift);
            st.in_set[t][i] = true;
        }
        for i in 0..n {
            st.s[t][i] = if y[i] - f[t][i] >= 0.0 { taus[t] } else { taus[t] - 1.0 };
        }
    }
    for p in 0..pairs {
        for i in 0..n {
            let d = f[p][i] - f[p + 1][i];
            st.class[p][i] = if d < -eta {
                Gap::Left
            } else if d > eta {
                Gap::Right
            } else {
                Gap::Band
            };
            st.q[p][i] = if st.class[p][i] == Gap::Right { 1.0 } else { 0.0 };
        }
    }

    let mut last_release = None;
    for _ in 0..max_iter {
        let target = solve_structure(k, y, problem, &mut st)?;
        let ft: Vec<DVector<f64>> = target.iter().map(|c| c.fitted(k)).collect();
        let df: Vec<DVector<f64>> = (0..t_count).map(|t| &ft[t] - &f[t]).collect();
        let scale = 1.0 + f.iter().map(|v| v.amax()).fold(0.0, f64::max);
        let moved = df.iter().map(|v| v.amax()).fold(0.0, f64::max) > 1e-12 * scale;
        let mut limit = 1.0;
        let mut join = None;
        for t in 0..t_count {
            for i in 0..n {
                if !moved || st.in_set[t][i] {
                    continue;
                }
                let (r0, r1) = (y[i] - f[t][i], y[i] - ft[t][i]);
                let wrong = if st.s[t][i] == taus[t] { r1 < 0.0 } else { r1 > 0.0 };
                if wrong {
                    let a = (r0 / (r0 - r1)).clamp(0.0, 1.0);
                    if a < limit {
                        limit = a;
                        join = Some((t, i));
                    }
                }
            }
        }
        // The objective is C¹ across the pieces of the crossing penalty, so
        // those are handled by an exact line search up to the first kink.
        let mut slope0 = 0.0;
        let mut curv = 0.0;
        for t in 0..t_count {
            let da = &target[t].alpha - &x[t].alpha;
            let db = target[t].b - x[t].b;
            slope0 += problem.lambda2 * da.dot(&f[t].add_scalar(-x[t].b));
            curv += problem.lambda2 * da.dot(&df[t].add_scalar(-db));
        }
        let slope = |a: f64| {
            let mut g = slope0 + a * curv;
            for t in 0..t_count {
                for i in 0..n {
                    let dfi = df[t][i];
                    if dfi != 0.0 {
                        let r = y[i] - f[t][i] - a * dfi;
                        let sub = if st.in_set[t][i] && r == 0.0 {
                            0.0
                        } else if r > 0.0 || (r == 0.0 && st.s[t][i] == taus[t]) {
                            taus[t]
                        } else {
                            taus[t] - 1.0
                        };
                        g -= sub * dfi / n as f64;
                    }
                }
            }
            for p in 0..pairs {
                for i in 0..n {
                    let dd = df[p][i] - df[p + 1][i];
                    if dd != 0.0 {
                        let d = f[p][i] - f[p + 1][i] + a * dd;
                        g += problem.lambda1 * smooth_relu_deriv(d, eta) * dd;
                    }
                }
            }
            g
        };
        let step = if slope(limit) <= 0.0 {
            limit
        } else {
            join = None;
            let (mut lo, mut hi) = (0.0, limit);
            for _ in 0..100 {
                let mid = 0.5 * (lo + hi);
                if mid <= lo || mid >= hi {
                    break;
                }
                if slope(mid) > 0.0 {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            if limit == 1.0 && lo > 1.0 - 1e-6 {
                1.0
            } else {
                lo
            }
        };
        for t in 0..t_count {
            x[t].b += step * (target[t].b - x[t].b);
            let da = (&target[t].alpha - &x[t].alpha) * step;
            x[t].alpha += da;
            f[t] += &df[t] * step;
        }
        let mut reclassified = false;
        for p in 0..pairs {
            for i in 0..n {
                let d = f[p][i] - f[p + 1][i];
                let g = if d < -eta {
                    Gap::Left
                } else if d > eta {
                    Gap::Right
                } else {
                    Gap::Band
                };
                if g != st.class[p][i] {
                    st.class[p][i] = g;
                    st.q[p][i] = if g == Gap::Right { 1.0 } else { 0.0 };
                    reclassified = true;
                }
            }
        }
        // A step that neither reaches the target nor changes the piece means
        // the target is the model minimizer up to rounding.
        let at_target = join.is_none() && (step >= 1.0 - 1e-12 || !reclassified);
        match join {
            Some((t, i)) => {
                if step == 0.0 && last_release == Some((t, i)) {
                    return None;
                }
                st.in_set[t][i] = true;
            }
            None if !at_target => {}
            None => {
                let mut release = Vec::new();
                for t in 0..t_count {
                    let tau = taus[t];
                    for i in 0..n {
                        if st.in_set[t][i] {
                            let v = st.s[t][i];
                            let excess = (v - tau).max(tau - 1.0 - v);
                            if excess > TOL {
                                release.push((excess, t, i, if v > tau { tau } else { tau - 1.0 }));
                            }
                        }
                    }
                }
                if release.is_empty() || accept(&x) {
                    return Some(x);
                }
                release.sort_by(|a, b| b.0.total_cmp(&a.0));
                let mut released = false;
                for (_, t, i, v) in release {
                    if st.in_set[t].iter().filter(|&&b| b).count() > 1 {
                        st.in_set[t][i] = false;
                        last_release = Some((t, i));
                        st.s[t][i] = v;
                        released = true;
                        break;
                    }
                }
                if !released {
                    return None;
                }
            }
        }
    }
    None
}

/// Smoothed objective over the floored kernel, from per-level points held in
/// eigen coordinates.
fn surrogate_value(pts: &[Point], y: &DVector<f64>, values: &DVector<f64>, problem: &NckqrProblem, gamma: f64, eta: f64) -> f64 {
    let n = y.len();
    let nf = n as f64;
    let mut total = 0.0;
    for (x, tau) in pts.iter().zip(&problem.taus) {
        total += compensated_sum((0..n).map(|i| smoothed_check(y[i] - x.fitted(i), tau.value(), gamma))) / nf;
        let ridge: f64 = x.coef.iter().zip(values.iter()).map(|(a, l)| a * a * l).sum();
        total += 0.5 * problem.lambda2 * ridge;
    }
    if problem.lambda1 != 0.0 {
        let pen = compensated_sum(pts.windows(2).flat_map(|w| {
            (0..n).map(|i| smooth_relu(w[0].fitted(i) - w[1].fitted(i), eta)).collect::<Vec<_>>()
        }));
        total += problem.lambda1 * pen;
    }
    total
}

struct Ctx<'a> {
    backend: SpectralBackend<'a>,
    k: &'a DMatrix<f64>,
    values: &'a DVector<f64>,
    y: &'a DVector<f64>,
    problem: &'a NckqrProblem,
    cfg: &'a SolverConfig,
}

struct Candidate {
    levels: Vec<Coefficients>,
    kkt: f64,
    tol: f64,
}

impl Candidate {
    fn ok(&self) -> bool {
        self.kkt <= self.tol
    }
}

impl Ctx<'_> {
    fn candidate(&self, levels: Vec<Coefficients>, full: bool) -> Candidate {
        let kkt = multi_kkt(&levels, self.y, self.k, self.problem, self.cfg.singular_band_tol, full);
        let tol = self.cfg.kkt_tol + rounding_floor(&levels, self.k, self.problem);
        Candidate { levels, kkt, tol }
    }

    fn to_levels(&self, pts: &[Point]) -> Vec<Coefficients> {
        pts.iter()
            .map(|x| Coefficients {
                b: x.b,
                alpha: self.backend.to_alpha(&x.coef),
            })
            .collect()
    }

    fn certify_attempt(&self, pts: &[Point], gamma: f64, trace: &mut Vec<ExpansionRecord>) -> Candidate {
        let n = self.y.len();
        let t_count = pts.len();
        let mut sets: Vec<Vec<usize>> = vec![Vec::new(); t_count];
        let mut history: Vec<Vec<Vec<usize>>> = vec![Vec::new(); t_count];
        let mut proj: Vec<Point> = pts.to_vec();
        for _ in 0..=n {
            proj = pts
                .iter()
                .zip(&sets)
                .map(|(x, s)| project_point(&self.backend, x, s, self.y))
                .collect();
            let next: Vec<Vec<usize>> = proj
                .iter()
                .map(|x| expand_singular_set(&DVector::from_fn(n, |i, _| self.y[i] - x.fitted(i)), gamma))
                .collect();
            let stable = next == sets;
            if self.cfg.record_trace {
                for (h, s) in history.iter_mut().zip(&next) {
                    h.push(s.clone());
                }
            }
            sets = next;
            if stable {
                break;
            }
        }
        if self.cfg.record_trace {
            trace.extend(history.into_iter().map(|sets| ExpansionRecord { gamma, sets }));
        }
        let accept = |levels: &[Coefficients]| self.candidate(levels.to_vec(), true).ok();
        match exact_refit_multi(self.k, self.y, self.problem, &self.to_levels(&proj), &sets, &accept) {
            Some(levels) => self.candidate(levels, true),
            None => self.candidate(self.to_levels(pts), false),
        }
    }
}

/// Runs MM steps at fixed `(γ, η)` until `until` total iterations or
/// convergence of the fitted values.
struct MmRun {
    pts: Vec<Point>,
    iter: usize,
    last_value: f64,
    values: Vec<f64>,
}

impl MmRun {
    #[allow(clippy::too_many_arguments)]
    fn advance<S: StepDirection>(
        &mut self,
        ctx: &Ctx<'_>,
        step: &S,
        gamma: f64,
        eta: f64,
        until: usize,
    ) -> Result<bool> {
        let y = ctx.y;
        let n = y.len();
        let nf = n as f64;
        let problem = ctx.problem;
        let t_count = self.pts.len();
        while self.iter < until {
            self.iter += 1;
            let z: Vec<DVector<f64>> = self
                .pts
                .iter()
                .zip(&problem.taus)
                .map(|(x, tau)| DVector::from_fn(n, |i, _| smoothed_check_deriv(y[i] - x.fitted(i), tau.value(), gamma)))
                .collect();
            let q: Vec<DVector<f64>> = self
                .pts
                .windows(2)
                .map(|w| DVector::from_fn(n, |i, _| smooth_relu_deriv(w[0].fitted(i) - w[1].fitted(i), eta)))
                .collect();
            let w = coupled(&z, &q, nf * problem.lambda1);
            let mut change = 0.0_f64;
            let mut next = Vec::with_capacity(t_count);
            for (x, w) in self.pts.iter().zip(&w) {
                let (db, dc) = step.direction(w, &x.coef);
                let coef = &x.coef + dc * (2.0 * gamma);
                let p = Point {
                    b: x.b + 2.0 * gamma * db,
                    kpart: ctx.backend.kernel_part(&coef),
                    coef,
                };
                for i in 0..n {
                    change = change.max((p.fitted(i) - x.fitted(i)).abs());
                }
                next.push(p);
            }
            if next.iter().any(|p| !p.b.is_finite() || p.kpart.iter().any(|v| !v.is_finite())) {
                return Err(Error::numerical("MM iterate diverged"));
            }
            let value = surrogate_value(&next, y, ctx.values, problem, gamma, eta);
            if value > self.last_value + 1e-10 * (1.0 + self.last_value.abs()) {
                return Err(Error::MajorizationViolation {
                    before: self.last_value,
                    after: value,
                });
            }
            self.last_value = value;
            if ctx.cfg.record_trace {
                self.values.push(value);
            }
            self.pts = next;
            if change <= ctx.cfg.apgd_tol {
                return Ok(true);
            }
        }
        Ok(false)
    }
}

/// Exact non-crossing fit for one `(λ₁, λ₂)`.
pub fn solve_nckqr(
    y: &DVector<f64>,
    model: &KernelModel,
    problem: &NckqrProblem,
    config: &SolverConfig,
    warm_start: Option<&NckqrSolution>,
) -> Result<NckqrSolution> {
    let n = model.n();
    check_len(n, y.len())?;
    problem.validate()?;
    config.validate()?;
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("response contains non-finite values"));
    }
    let t_count = problem.levels();
    let ctx = Ctx {
        backend: SpectralBackend::new(&model.eig),
        k: model.k(),
        values: &model.eig.values,
        y,
        problem,
        cfg: config,
    };
    let mut kqr_iterations = 0;
    let mut independent = Vec::with_capacity(t_count);
    // Cold starts begin from the independent fits, which are exact when λ₁ = 0.
    let start: Vec<Coefficients> = match warm_start {
        Some(w) => {
            check_len(t_count, w.levels.len())?;
            for c in &w.levels {
                check_len(n, c.alpha.len())?;
            }
            w.levels.clone()
        }
        None => {
            for tau in &problem.taus {
                let sol = solve_kqr(y, model, *tau, problem.lambda2, config, None)?;
                kqr_iterations += sol.iterations;
                independent.push(Coefficients {
                    b: sol.b,
                    alpha: sol.alpha,
                });
            }
            std::mem::take(&mut independent)
        }
    };
    let mut pts: Vec<Point> = start
        .iter()
        .map(|c| {
            let coef = ctx.backend.from_alpha(&c.alpha);
            Point {
                b: c.b,
                kpart: ctx.backend.kernel_part(&coef),
                coef,
            }
        })
        .collect();
    let mut gamma = warm_start
        .map(|w| w.final_gamma)
        .unwrap_or(config.gamma_init)
        .min(config.gamma_init);
    let nf = n as f64;
    let (c, e) = sigma_factors(nf, problem.lambda1, config.ridge_eps);
    let mut iterations = kqr_iterations;
    let mut trace = Vec::new();
    let mut objective_trace = Vec::new();
    let mut best: Option<(Candidate, f64)> = None;
    let mut certified = None;
    let first = ctx.certify_attempt(&pts, config.singular_band_tol * 100.0, &mut trace);
    if first.ok() {
        certified = Some((first, gamma));
    } else {
        best = Some((first, gamma));
    }
    'outer: for _ in 0..config.max_outer_gamma_steps {
        if certified.is_some() {
            break;
        }
        let eta = gamma.max(problem.eta);
        let step = ctx.backend.prepare(c, e, gamma, problem.lambda2)?;
        let mut run = MmRun {
            last_value: surrogate_value(&pts, y, ctx.values, problem, gamma, eta),
            pts: pts.clone(),
            iter: 0,
            values: Vec::new(),
        };
        if config.record_trace {
            run.values.push(run.last_value);
        }
        let mut checkpoint = 4;
        loop {
            let until = if config.early_certify {
                checkpoint.min(config.max_apgd_iters)
            } else {
                config.max_apgd_iters
            };
            let converged = run.advance(&ctx, &step, gamma, eta, until)?;
            let cand = ctx.certify_attempt(&run.pts, gamma, &mut trace);
            if cand.ok() {
                certified = Some((cand, gamma));
                break;
            }
            if best.as_ref().is_none_or(|(b, _)| cand.kkt < b.kkt) {
                best = Some((cand, gamma));
            }
            if converged || run.iter >= config.max_apgd_iters {
                break;
            }
            checkpoint *= 2;
        }
        iterations += run.iter;
        if config.record_trace {
            objective_trace.push(std::mem::take(&mut run.values));
        }
        if certified.is_some() {
            break 'outer;
        }
        pts = run.pts;
        gamma *= config.gamma_shrink;
    }
    let (cand, final_gamma, ok) = match certified {
        Some((c, g)) => (c, g, true),
        None => {
            let (c, g) = best.ok_or_else(|| Error::numerical("no candidate produced"))?;
            let full = ctx.candidate(c.levels, true);
            let ok = full.ok();
            (full, g, ok)
        }
    };
    let fitted: Vec<DVector<f64>> = cand.levels.iter().map(|c| c.fitted(model.k())).collect();
    let singular_sets = fitted
        .iter()
        .map(|f| (0..n).filter(|&i| (y[i] - f[i]).abs() <= config.singular_band_tol).collect())
        .collect();
    let objective = nckqr_objective(&cand.levels, y, model.k(), &problem.params())?;
    Ok(NckqrSolution {
        crossing_magnitude: crossing_magnitude(&fitted),
        levels: cand.levels,
        problem: problem.clone(),
        singular_sets,
        kkt_residual: cand.kkt,
        objective,
        final_gamma,
        iterations,
        certified: ok,
        trace,
        objective_trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{simulate_friedman, simulate_heteroscedastic};
    use crate::kernel::{median_heuristic_bandwidth, KernelSpec};
    use crate::oracle::{reference_smoothed_optimum, OracleObjective};
    use crate::solver::solve_kqr;
    use proptest::prelude::*;

    fn taus(ts: &[f64]) -> Vec<QuantileLevel> {
        ts.iter().map(|&t| QuantileLevel::new(t).unwrap()).collect()
    }

    fn instance(n: usize, seed: u64) -> (DVector<f64>, KernelModel) {
        let mut ds = simulate_friedman(n, 5, 0.1, 3.0, seed).unwrap();
        ds.standardize();
        let sigma = median_heuristic_bandwidth(&ds.x).unwrap();
        let model = KernelModel::new(&ds.x, KernelSpec::rbf(sigma).unwrap()).unwrap();
        (ds.y, model)
    }

    #[test]
    fn problem_validation() {
        assert!(NckqrProblem::new(taus(&[0.2, 0.8]), 1.0, 0.1, 1e-5).is_ok());
        assert!(NckqrProblem::new(taus(&[0.2, 0.8]), 1.0, 0.0, 1e-5).is_err());
        assert!(NckqrProblem::new(taus(&[0.8, 0.2]), 1.0, 0.1, 1e-5).is_err());
        assert!(NckqrProblem::new(taus(&[0.2, 0.8]), -1.0, 0.1, 1e-5).is_err());
        assert!(NckqrProblem::new(taus(&[0.2, 0.8]), 1.0, 0.1, 0.0).is_err());
    }

    #[test]
    fn crossing_magnitude_counts_positive_gaps() {
        let f = vec![
            DVector::from_vec(vec![1.0, 0.0, 2.0]),
            DVector::from_vec(vec![0.0, 1.0, 2.0]),
            DVector::from_vec(vec![0.5, 0.5, 1.5]),
        ];
        assert_eq!(crossing_magnitude(&f), 1.0 + 0.5 + 0.5);
        assert_eq!(crossing_magnitude(&f[..1]), 0.0);
    }

    #[test]
    fn mm_vectors_at_zero() {
        let model = KernelModel::from_matrix(
            crate::kernel::KernelMatrix::from_matrix(DMatrix::identity(3, 3)).unwrap(),
            KernelSpec::linear(),
        )
        .unwrap();
        let y = DVector::from_vec(vec![2.0, -2.0, 0.25]);
        let problem = NckqrProblem::new(taus(&[0.25, 0.75]), 0.5, 0.1, 1.0).unwrap();
        let levels = vec![Coefficients::zeros(3); 2];
        let ws = compute_mm_vectors(&levels, &y, &model, &problem, 0.5).unwrap();
        // H′ is τ above γ, τ − 1 below −γ and linear in between.
        assert_eq!(ws.z[0].as_slice(), &[0.25, -0.75, 0.0]);
        assert_eq!(ws.z[1].as_slice(), &[0.75, -0.25, 0.5]);
        // Zero gaps sit in the middle of the quadratic piece.
        assert_eq!(ws.q[0].as_slice(), &[0.5, 0.5, 0.5]);
        // w_1 = z_1 − nλ₁q_1 and w_2 = z_2 + nλ₁q_1 with nλ₁ = 1.5.
        let w1 = [0.25 - 0.75, -0.75 - 0.75, -0.75];
        assert!((ws.rho[0][0] - w1.iter().sum::<f64>()).abs() < 1e-15);
        for i in 0..3 {
            assert!((ws.rho[0][i + 1] - w1[i]).abs() < 1e-15);
        }
        assert!(compute_mm_vectors(&levels, &y, &model, &problem, 2.0).is_err());
        assert!(compute_mm_vectors(&levels[..1], &y, &model, &problem, 0.5).is_err());
    }

    #[test]
    fn mm_steps_descend() {
        let (y, model) = instance(12, 3);
        let problem = NckqrProblem::new(taus(&[0.3, 0.5, 0.7]), 2.0, 0.05, 0.5).unwrap();
        let cfg = SolverConfig::default();
        let mut levels = vec![Coefficients::zeros(12); 3];
        for gamma in [0.5, 0.1] {
            let mut prev = smoothed_nckqr_objective(&levels, &y, model.k(), &problem.params(), gamma).unwrap();
            for _ in 0..50 {
                let ws = compute_mm_vectors(&levels, &y, &model, &problem, gamma).unwrap();
                levels = mm_step(&levels, &ws, &y, &model, &problem, gamma, &cfg).unwrap();
                let q = smoothed_nckqr_objective(&levels, &y, model.k(), &problem.params(), gamma).unwrap();
                assert!(q <= prev + 1e-10 * (1.0 + prev.abs()));
                prev = q;
            }
        }
    }

    #[test]
    fn zero_coupling_matches_independent_fits() {
        let (y, model) = instance(20, 5);
        let ts = taus(&[0.2, 0.5, 0.8]);
        let problem = NckqrProblem::new(ts.clone(), 0.0, 0.05, 1e-5).unwrap();
        let cfg = SolverConfig::default();
        let sol = solve_nckqr(&y, &model, &problem, &cfg, None).unwrap();
        assert!(sol.certified);
        for (level, tau) in sol.levels.iter().zip(ts) {
            let single = solve_kqr(&y, &model, tau, 0.05, &cfg, None).unwrap();
            let a = crate::loss::kqr_objective(level.b, &level.alpha, &y, model.k(), 0.05, tau).unwrap();
            assert!((a - single.objective).abs() < 1e-9);
        }
    }

    #[test]
    fn matches_reference_optimum() {
        for (seed, lambda1) in [(1, 1.0), (2, 10.0), (3, 0.1)] {
            let (y, model) = instance(12, seed);
            let ts = taus(&[0.25, 0.75]);
            let problem = NckqrProblem::new(ts.clone(), lambda1, 0.1, 1e-5).unwrap();
            let sol = solve_nckqr(&y, &model, &problem, &SolverConfig::default(), None).unwrap();
            assert!(sol.certified);
            assert!(sol.kkt_residual <= 1e-5);
            let oracle = OracleObjective::Nckqr { taus: ts, lambda1, lambda2: 0.1, eta: 1e-5 };
            let rep = reference_smoothed_optimum(&oracle, &y, model.k(), 1e-10).unwrap();
            assert!((sol.objective - rep.exact_objective).abs() < 1e-6);
        }
    }

    #[test]
    fn strong_coupling_removes_crossings() {
        let ds = simulate_heteroscedastic(40, 1).unwrap();
        let sigma = median_heuristic_bandwidth(&ds.x).unwrap();
        let model = KernelModel::new(&ds.x, KernelSpec::rbf(sigma).unwrap()).unwrap();
        let ts = taus(&[0.1, 0.3, 0.5, 0.7, 0.9]);
        let cfg = SolverConfig::default();
        let mut prev = f64::INFINITY;
        for lambda1 in [0.0, 1.0, 1e2, 1e4] {
            let problem = NckqrProblem::new(ts.clone(), lambda1, 1e-4, 1e-5).unwrap();
            let sol = solve_nckqr(&ds.y, &model, &problem, &cfg, None).unwrap();
            assert!(sol.certified);
            if lambda1 == 0.0 {
                assert!(sol.crossing_magnitude > 0.0);
            }
            assert!(sol.crossing_magnitude <= prev);
            prev = sol.crossing_magnitude;
        }
        assert!(prev < 1e-6);
    }

    #[test]
    fn kkt_detects_perturbation() {
        let (y, model) = instance(15, 4);
        let problem = NckqrProblem::new(taus(&[0.3, 0.7]), 1.0, 0.1, 1e-5).unwrap();
        let sol = solve_nckqr(&y, &model, &problem, &SolverConfig::default(), None).unwrap();
        let k = model.k();
        assert!(nckqr_kkt_residual(&sol.levels, &y, k, &problem, 1e-8).unwrap() <= 1e-5);
        let mut bad = sol.levels.clone();
        bad[0].b += 0.3;
        assert!(nckqr_kkt_residual(&bad, &y, k, &problem, 1e-8).unwrap() > 1e-3);
        assert!(nckqr_kkt_residual(&bad, &y, k, &problem, 0.0).is_err());
    }

    #[test]
    fn expansion_and_projection_per_level() {
        let k = DMatrix::identity(3, 3);
        let y = DVector::from_vec(vec![1.0, 0.1, -1.0]);
        let levels = vec![Coefficients::zeros(3), Coefficients { b: 1.0, alpha: DVector::zeros(3) }];
        let sets = expand_sets_multi(&levels, &y, &k, 0.5).unwrap();
        assert_eq!(sets, vec![vec![1], vec![0]]);
        let eig = crate::kernel::eigendecompose(&crate::kernel::KernelMatrix::from_matrix(k.clone()).unwrap()).unwrap();
        let projected = project_multi(&levels, &k, &eig, &sets, &y).unwrap();
        for (c, s) in projected.iter().zip(&sets) {
            let f = c.fitted(&k);
            for &i in s {
                assert!((y[i] - f[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn warm_start_dimensions_checked() {
        let (y, model) = instance(10, 2);
        let problem = NckqrProblem::new(taus(&[0.3, 0.7]), 1.0, 0.1, 1e-5).unwrap();
        let cfg = SolverConfig::default();
        let sol = solve_nckqr(&y, &model, &problem, &cfg, None).unwrap();
        let other = NckqrProblem::new(taus(&[0.2, 0.5, 0.7]), 1.0, 0.1, 1e-5).unwrap();
        assert!(solve_nckqr(&y, &model, &other, &cfg, Some(&sol)).is_err());
        let again = solve_nckqr(&y, &model, &problem, &cfg, Some(&sol)).unwrap();
        assert!((again.objective - sol.objective).abs() < 1e-9);
        assert!(solve_nckqr(&y.rows(0, 9).into_owned(), &model, &problem, &cfg, None).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn mm_descent_random(seed in 0u64..1000, l1 in 0.0f64..5.0, gamma in 0.01f64..1.0) {
            let (y, model) = instance(8, seed);
            let problem = NckqrProblem::new(taus(&[0.2, 0.6]), l1, 0.1, 1.0).unwrap();
            let cfg = SolverConfig::default();
            let mut levels = vec![Coefficients::zeros(8); 2];
            let mut prev = smoothed_nckqr_objective(&levels, &y, model.k(), &problem.params(), gamma).unwrap();
            for _ in 0..20 {
                let ws = compute_mm_vectors(&levels, &y, &model, &problem, gamma).unwrap();
                levels = mm_step(&levels, &ws, &y, &model, &problem, gamma, &cfg).unwrap();
                let q = smoothed_nckqr_objective(&levels, &y, model.k(), &problem.params(), gamma).unwrap();
                prop_assert!(q <= prev + 1e-10 * (1.0 + prev.abs()));
                prev = q;
            }
        }
    }
}
