//! Slow reference implementations for tests and benchmarks. Linear systems
//! here go through Householder QR, which the production solvers never use.

use nalgebra::{DMatrix, DVector};

use crate::error::{check_len, Error, Result};
use crate::loss::{
    smooth_relu_deriv, smoothed_check_deriv, smoothed_kqr_objective, smoothed_nckqr_objective,
    kqr_objective, nckqr_objective, Coefficients, MultiLevelParams, QuantileLevel,
};

/// Solves `A x = rhs` by Householder QR; rejects results whose residual
/// exceeds `1e-9·(1 + ‖rhs‖∞)`.
pub fn dense_solve(a: &DMatrix<f64>, rhs: &DVector<f64>) -> Result<DVector<f64>> {
    if !a.is_square() {
        return Err(Error::invalid("dense_solve needs a square matrix"));
    }
    check_len(a.nrows(), rhs.len())?;
    let x = a
        .clone()
        .qr()
        .solve(rhs)
        .ok_or_else(|| Error::numerical("matrix is singular to working precision"))?;
    let resid = (a * &x - rhs).amax();
    if !resid.is_finite() || resid > 1e-9 * (1.0 + rhs.amax()) {
        return Err(Error::numerical(format!(
            "dense solve residual {resid:e} too large"
        )));
    }
    Ok(x)
}

/// Which smoothed objective the oracle minimizes.
#[derive(Debug, Clone, PartialEq)]
pub enum OracleObjective {
    Kqr {
        tau: QuantileLevel,
        lambda: f64,
    },
    Nckqr {
        taus: Vec<QuantileLevel>,
        lambda1: f64,
        lambda2: f64,
        eta: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleReport {
    /// Smoothed objective at the final γ.
    pub objective: f64,
    /// Nonsmooth objective at the returned point.
    pub exact_objective: f64,
    pub levels: Vec<Coefficients>,
    pub gradient_norm: f64,
    /// `−gᵀd` for the last Newton direction `d`.
    pub newton_decrement: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Set when Newton failed and gradient descent took over.
    pub first_order_fallback: bool,
}

struct Spec<'a> {
    y: &'a DVector<f64>,
    k: &'a DMatrix<f64>,
    taus: Vec<f64>,
    levels_q: Vec<QuantileLevel>,
    lambda1: f64,
    lambda2: f64,
    eta: f64,
}

impl Spec<'_> {
    fn n(&self) -> usize {
        self.y.len()
    }

    fn levels(&self) -> usize {
        self.taus.len()
    }

    fn unpack(&self, x: &DVector<f64>) -> Vec<Coefficients> {
        let n = self.n();
        (0..self.levels())
            .map(|t| {
                let o = t * (n + 1);
                Coefficients {
                    b: x[o],
                    alpha: x.rows(o + 1, n).into_owned(),
                }
            })
            .collect()
    }

    fn fitted(&self, x: &DVector<f64>) -> Vec<DVector<f64>> {
        self.unpack(x).iter().map(|c| c.fitted(self.k)).collect()
    }

    fn value(&self, x: &DVector<f64>, gamma: f64) -> f64 {
        let levels = self.unpack(x);
        let taus = &self.levels_q;
        if self.levels() == 1 {
            smoothed_kqr_objective(levels[0].b, &levels[0].alpha, self.y, self.k, self.lambda2, taus[0], gamma)
                .unwrap_or(f64::INFINITY)
        } else {
            let params = MultiLevelParams {
                taus,
                lambda1: self.lambda1,
                lambda2: self.lambda2,
                eta: self.eta,
            };
            smoothed_nckqr_objective(&levels, self.y, self.k, &params, gamma).unwrap_or(f64::INFINITY)
        }
    }

    /// Derivative of the objective with respect to each fitted vector.
    fn fitted_grads(&self, f: &[DVector<f64>], gamma: f64) -> Vec<DVector<f64>> {
        let n = self.n();
        let nf = n as f64;
        let t_count = self.levels();
        let mut out: Vec<DVector<f64>> = (0..t_count)
            .map(|t| DVector::from_fn(n, |i, _| -smoothed_check_deriv(self.y[i] - f[t][i], self.taus[t], gamma) / nf))
            .collect();
        if self.lambda1 > 0.0 {
            for t in 0..t_count - 1 {
                for i in 0..n {
                    let q = self.lambda1 * smooth_relu_deriv(f[t][i] - f[t + 1][i], self.eta);
                    out[t][i] += q;
                    out[t + 1][i] -= q;
                }
            }
        }
        out
    }

    fn gradient(&self, x: &DVector<f64>, gamma: f64) -> DVector<f64> {
        let n = self.n();
        let f = self.fitted(x);
        let d = self.fitted_grads(&f, gamma);
        let mut g = DVector::zeros(x.len());
        for t in 0..self.levels() {
            let o = t * (n + 1);
            let alpha = x.rows(o + 1, n);
            g[o] = d[t].sum();
            let inner = &d[t] + alpha * self.lambda2;
            g.rows_mut(o + 1, n).copy_from(&(self.k * inner));
        }
        g
    }

    /// Newton direction from the kernel-factored system: coefficient rows of
    /// the Hessian are divided through by `K`, then every row is equilibrated.
    fn newton_direction(&self, x: &DVector<f64>, gamma: f64, f: &[DVector<f64>]) -> Option<DVector<f64>> {
        let n = self.n();
        let nf = n as f64;
        let tc = self.levels();
        let m = tc * (n + 1);
        let d = self.fitted_grads(f, gamma);
        // Curvatures of the loss and crossing terms in fitted-value space.
        let data: Vec<DVector<f64>> = (0..tc)
            .map(|t| {
                DVector::from_fn(n, |i, _| {
                    if (self.y[i] - f[t][i]).abs() <= gamma {
                        1.0 / (2.0 * gamma * nf)
                    } else {
                        0.0
                    }
                })
            })
            .collect();
        let cross: Vec<DVector<f64>> = (0..tc.saturating_sub(1))
            .map(|t| {
                DVector::from_fn(n, |i, _| {
                    if self.lambda1 > 0.0 && (f[t][i] - f[t + 1][i]).abs() <= self.eta {
                        self.lambda1 / (2.0 * self.eta)
                    } else {
                        0.0
                    }
                })
            })
            .collect();
        // A_{ts} entries as diagonal n-vectors.
        let block = |t: usize, s: usize| -> Option<DVector<f64>> {
            if t == s {
                let mut v = data[t].clone();
                if t > 0 {
                    v += &cross[t - 1];
                }
                if t + 1 < tc {
                    v += &cross[t];
                }
                Some(v)
            } else if s == t + 1 {
                Some(-&cross[t])
            } else if t == s + 1 {
                Some(-&cross[s])
            } else {
                None
            }
        };
        let mut h = DMatrix::zeros(m, m);
        let mut rhs = DVector::zeros(m);
        for t in 0..tc {
            let ot = t * (n + 1);
            let alpha_t = x.rows(ot + 1, n);
            rhs[ot] = -d[t].sum();
            for i in 0..n {
                rhs[ot + 1 + i] = -(d[t][i] + self.lambda2 * alpha_t[i]);
            }
            for s in 0..tc {
                let Some(a) = block(t, s) else { continue };
                let os = s * (n + 1);
                // Row b_t: 1ᵀ A (δb_s 1 + K δα_s).
                h[(ot, os)] += a.sum();
                for j in 0..n {
                    let mut acc = 0.0;
                    for i in 0..n {
                        acc += a[i] * self.k[(i, j)];
                    }
                    h[(ot, os + 1 + j)] += acc;
                }
                // Rows α_t: A (δb_s 1 + K δα_s).
                for i in 0..n {
                    h[(ot + 1 + i, os)] += a[i];
                    if a[i] != 0.0 {
                        for j in 0..n {
                            h[(ot + 1 + i, os + 1 + j)] += a[i] * self.k[(i, j)];
                        }
                    }
                }
            }
            for i in 0..n {
                h[(ot + 1 + i, ot + 1 + i)] += self.lambda2;
            }
            if h.row(ot).amax() == 0.0 {
                // Objective is linear in this intercept; regularize it.
                h[(ot, ot)] = 1.0;
            }
        }
        for r in 0..m {
            let s = h.row(r).amax();
            if s > 0.0 {
                h.row_mut(r).scale_mut(1.0 / s);
                rhs[r] /= s;
            }
        }
        let sol = h.qr().solve(&rhs)?;
        sol.iter().all(|v| v.is_finite()).then_some(sol)
    }
}

fn spec_from<'a>(objective: &OracleObjective, y: &'a DVector<f64>, k: &'a DMatrix<f64>) -> Result<Spec<'a>> {
    let n = y.len();
    check_len(n, k.nrows())?;
    check_len(n, k.ncols())?;
    if n == 0 || n > 100 {
        return Err(Error::invalid("reference oracle supports 1 <= n <= 100"));
    }
    Ok(match objective {
        OracleObjective::Kqr { tau, lambda } => {
            if !(*lambda > 0.0) {
                return Err(Error::invalid("lambda must be positive"));
            }
            Spec {
                y,
                k,
                taus: vec![tau.value()],
                levels_q: vec![*tau],
                lambda1: 0.0,
                lambda2: *lambda,
                eta: 1.0,
            }
        }
        OracleObjective::Nckqr {
            taus,
            lambda1,
            lambda2,
            eta,
        } => {
            let params = MultiLevelParams {
                taus,
                lambda1: *lambda1,
                lambda2: *lambda2,
                eta: *eta,
            };
            params.validate()?;
            if !(*lambda2 > 0.0) {
                return Err(Error::invalid("lambda2 must be positive"));
            }
            Spec {
                y,
                k,
                taus: taus.iter().map(|t| t.value()).collect(),
                levels_q: taus.clone(),
                lambda1: *lambda1,
                lambda2: *lambda2,
                eta: *eta,
            }
        }
    })
}

/// Minimizes the smoothed objective by damped Newton steps along the
/// continuation `γ = 1, 1/4, …` down to `gamma_final`.
pub fn reference_smoothed_optimum(
    objective: &OracleObjective,
    y: &DVector<f64>,
    k: &DMatrix<f64>,
    gamma_final: f64,
) -> Result<OracleReport> {
    if !(gamma_final > 0.0) {
        return Err(Error::invalid("gamma_final must be positive"));
    }
    let spec = spec_from(objective, y, k)?;
    let n = spec.n();
    let mut x = DVector::zeros(spec.levels() * (n + 1));
    let mut schedule = Vec::new();
    let mut g = 1.0_f64.max(gamma_final);
    while g > gamma_final {
        schedule.push(g);
        g *= 0.25;
    }
    schedule.push(gamma_final);

    let mut iterations = 0;
    let mut decrement = f64::INFINITY;
    let mut converged = false;
    let mut fallback = false;
    for (level, &gamma) in schedule.iter().enumerate() {
        let last = level + 1 == schedule.len();
        let (dec, ok, its) = newton_level(&spec, &mut x, gamma, if last { 200 } else { 60 });
        iterations += its;
        decrement = dec;
        if last {
            converged = ok;
        }
    }
    if !converged {
        fallback = true;
        iterations += gradient_fallback(&spec, &mut x, gamma_final, 1_000_000);
        let f = spec.fitted(&x);
        decrement = spec
            .newton_direction(&x, gamma_final, &f)
            .map(|d| -spec.gradient(&x, gamma_final).dot(&d))
            .unwrap_or(f64::INFINITY);
        converged = decrement <= newton_tol(spec.value(&x, gamma_final));
    }
    let levels = spec.unpack(&x);
    let value = spec.value(&x, gamma_final);
    let exact = exact_value(&spec, &levels)?;
    Ok(OracleReport {
        objective: value,
        exact_objective: exact,
        gradient_norm: spec.gradient(&x, gamma_final).amax(),
        levels,
        newton_decrement: decrement,
        iterations,
        converged,
        first_order_fallback: fallback,
    })
}

fn exact_value(spec: &Spec<'_>, levels: &[Coefficients]) -> Result<f64> {
    let taus = &spec.levels_q;
    if spec.levels() == 1 {
        kqr_objective(levels[0].b, &levels[0].alpha, spec.y, spec.k, spec.lambda2, taus[0])
    } else {
        let params = MultiLevelParams {
            taus,
            lambda1: spec.lambda1,
            lambda2: spec.lambda2,
            eta: spec.eta,
        };
        nckqr_objective(levels, spec.y, spec.k, &params)
    }
}

fn newton_tol(value: f64) -> f64 {
    1e-13 * (1.0 + value.abs())
}

/// Damped Newton at one γ; returns (last decrement, converged, iterations).
fn newton_level(spec: &Spec<'_>, x: &mut DVector<f64>, gamma: f64, max_iter: usize) -> (f64, bool, usize) {
    let mut dec = f64::INFINITY;
    for it in 1..=max_iter {
        let f = spec.fitted(x);
        let grad = spec.gradient(x, gamma);
        let Some(d) = spec.newton_direction(x, gamma, &f) else {
            return (dec, false, it);
        };
        dec = -grad.dot(&d);
        let v0 = spec.value(x, gamma);
        if dec <= newton_tol(v0) {
            return (dec.max(0.0), true, it);
        }
        if dec < 0.0 {
            return (dec, false, it);
        }
        let mut t = 1.0;
        loop {
            let trial = &*x + &d * t;
            let v = spec.value(&trial, gamma);
            if v <= v0 - 1e-4 * t * dec {
                *x = trial;
                break;
            }
            t *= 0.5;
            if t < 1e-12 {
                // No measurable decrease: at the resolution limit of the objective.
                return (dec, dec <= 1e-10 * (1.0 + v0.abs()), it);
            }
        }
    }
    (dec, false, max_iter)
}

/// Backtracking gradient descent; returns iterations used.
fn gradient_fallback(spec: &Spec<'_>, x: &mut DVector<f64>, gamma: f64, max_iter: usize) -> usize {
    let mut step = 1.0;
    for it in 1..=max_iter {
        let g = spec.gradient(x, gamma);
        let gg = g.norm_squared();
        if gg.sqrt() <= 1e-10 {
            return it;
        }
        let v0 = spec.value(x, gamma);
        loop {
            let trial = &*x - &g * step;
            if spec.value(&trial, gamma) <= v0 - 0.5 * step * gg {
                *x = trial;
                step *= 2.0;
                break;
            }
            step *= 0.5;
            if step < 1e-30 {
                return it;
            }
        }
    }
    max_iter
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_solve() {
        let rhs = DVector::from_vec(vec![1.0, -2.0, 3.0]);
        assert!((dense_solve(&DMatrix::identity(3, 3), &rhs).unwrap() - &rhs).amax() < 1e-15);
    }

    #[test]
    fn worked_step_matrix() {
        let p = DMatrix::from_row_slice(3, 3, &[2.0, 1.0, 1.0, 1.0, 1.5, 0.0, 1.0, 0.0, 1.5]);
        let x = dense_solve(&p, &DVector::from_vec(vec![1.0, 1.0, 0.0])).unwrap();
        assert!((x[0] - 0.5).abs() < 1e-14);
        assert!((x[1] - 1.0 / 3.0).abs() < 1e-14);
        assert!((x[2] + 1.0 / 3.0).abs() < 1e-14);
        assert!((&p * &x - DVector::from_vec(vec![1.0, 1.0, 0.0])).amax() < 1e-14);
    }

    #[test]
    fn diagonal_solve() {
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 4.0, -0.5]));
        let x = dense_solve(&a, &DVector::from_vec(vec![1.0, 1.0, 1.0])).unwrap();
        assert!((x - DVector::from_vec(vec![0.5, 0.25, -2.0])).amax() < 1e-15);
    }

    #[test]
    fn singular_solve_fails() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.0]);
        assert!(dense_solve(&a, &DVector::from_vec(vec![1.0, 0.0])).is_err());
    }

    #[test]
    fn trivial_optimum() {
        let obj = OracleObjective::Kqr {
            tau: QuantileLevel::new(0.5).unwrap(),
            lambda: 1.0,
        };
        let r = reference_smoothed_optimum(&obj, &DVector::zeros(1), &DMatrix::identity(1, 1), 1e-10).unwrap();
        assert!(r.converged && !r.first_order_fallback);
        assert!(r.exact_objective.abs() < 1e-9);
        assert!(r.levels[0].b.abs() < 1e-6 && r.levels[0].alpha[0].abs() < 1e-6);
    }
}
