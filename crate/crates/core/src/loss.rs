//! Check loss, its γ-smoothed surrogate, the smooth ReLU crossing penalty and
//! the single- and multi-level objectives built from them.
//!
//! Branch boundaries (`t = ±γ`, `t = ±η`) are evaluated with the quadratic
//! middle piece; all pieces agree there.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::linalg::{compensated_sum, matvec};

/// A quantile level in the open interval (0, 1).
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct QuantileLevel(f64);

impl QuantileLevel {
    pub fn new(tau: f64) -> Result<Self> {
        if tau > 0.0 && tau < 1.0 {
            Ok(Self(tau))
        } else {
            Err(Error::invalid(format!(
                "quantile level must lie in (0, 1), got {tau}"
            )))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for QuantileLevel {
    type Error = Error;
    fn try_from(v: f64) -> Result<Self> {
        Self::new(v)
    }
}

impl From<QuantileLevel> for f64 {
    fn from(q: QuantileLevel) -> f64 {
        q.0
    }
}

/// Smoothing widths for the check loss (`gamma`) and the crossing penalty (`eta`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmoothingParams {
    pub gamma: f64,
    pub eta: f64,
}

impl SmoothingParams {
    pub fn new(gamma: f64, eta: f64) -> Result<Self> {
        if !(gamma > 0.0) || !(eta > 0.0) {
            return Err(Error::invalid(format!(
                "smoothing widths must be positive (gamma = {gamma}, eta = {eta})"
            )));
        }
        Ok(Self { gamma, eta })
    }
}

/// `ρ_τ(t) = t (τ − 1{t < 0})`.
#[inline]
pub fn check_loss(t: f64, tau: f64) -> f64 {
    if t < 0.0 {
        (tau - 1.0) * t
    } else {
        tau * t
    }
}

/// Huberized check loss `H_{γ,τ}`.
#[inline]
pub fn smoothed_check(t: f64, tau: f64, gamma: f64) -> f64 {
    if t < -gamma {
        (tau - 1.0) * t
    } else if t > gamma {
        tau * t
    } else {
        t * t / (4.0 * gamma) + t * (tau - 0.5) + gamma / 4.0
    }
}

/// `H'_{γ,τ}`, a `1/(2γ)`-Lipschitz map into `[τ − 1, τ]`.
#[inline]
pub fn smoothed_check_deriv(t: f64, tau: f64, gamma: f64) -> f64 {
    if t < -gamma {
        tau - 1.0
    } else if t > gamma {
        tau
    } else {
        t / (2.0 * gamma) + tau - 0.5
    }
}

/// Smooth ReLU `V_η`.
#[inline]
pub fn smooth_relu(t: f64, eta: f64) -> f64 {
    if t < -eta {
        0.0
    } else if t > eta {
        t
    } else {
        t * t / (4.0 * eta) + t / 2.0 + eta / 4.0
    }
}

#[inline]
pub fn smooth_relu_deriv(t: f64, eta: f64) -> f64 {
    if t < -eta {
        0.0
    } else if t > eta {
        1.0
    } else {
        t / (2.0 * eta) + 0.5
    }
}

/// Intercept and kernel expansion coefficients of one fitted quantile function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coefficients {
    pub b: f64,
    pub alpha: DVector<f64>,
}

impl Coefficients {
    pub fn zeros(n: usize) -> Self {
        Self {
            b: 0.0,
            alpha: DVector::zeros(n),
        }
    }

    /// `b·1 + K α`.
    pub fn fitted(&self, k: &DMatrix<f64>) -> DVector<f64> {
        let mut f = matvec(k, &self.alpha);
        f.add_scalar_mut(self.b);
        f
    }
}

fn check_dims(y: &DVector<f64>, k: &DMatrix<f64>, alpha: &DVector<f64>) -> Result<()> {
    check_len(y.len(), k.nrows())?;
    check_len(y.len(), k.ncols())?;
    check_len(y.len(), alpha.len())
}

fn ridge(k: &DMatrix<f64>, alpha: &DVector<f64>) -> f64 {
    alpha.dot(&matvec(k, alpha))
}

/// `(1/n) Σ ρ_τ(y_i − f_i)` for precomputed fitted values.
pub fn mean_check_loss(y: &DVector<f64>, fitted: &DVector<f64>, tau: f64) -> f64 {
    let n = y.len() as f64;
    compensated_sum(y.iter().zip(fitted.iter()).map(|(a, f)| check_loss(a - f, tau))) / n
}

/// `(1/n) Σ H_{γ,τ}(y_i − f_i)` for precomputed fitted values.
pub fn mean_smoothed_loss(y: &DVector<f64>, fitted: &DVector<f64>, tau: f64, gamma: f64) -> f64 {
    let n = y.len() as f64;
    compensated_sum(
        y.iter()
            .zip(fitted.iter())
            .map(|(a, f)| smoothed_check(a - f, tau, gamma)),
    ) / n
}

/// Exact KQR objective `(1/n) Σ ρ_τ(y_i − b − K_iᵀα) + (λ/2) αᵀKα`.
pub fn kqr_objective(
    b: f64,
    alpha: &DVector<f64>,
    y: &DVector<f64>,
    k: &DMatrix<f64>,
    lambda: f64,
    tau: QuantileLevel,
) -> Result<f64> {
    check_dims(y, k, alpha)?;
    if lambda < 0.0 {
        return Err(Error::invalid("lambda must be nonnegative"));
    }
    let fitted = Coefficients {
        b,
        alpha: alpha.clone(),
    }
    .fitted(k);
    Ok(mean_check_loss(y, &fitted, tau.value()) + 0.5 * lambda * ridge(k, alpha))
}

/// Smoothed KQR objective with `H_{γ,τ}` in place of `ρ_τ`.
pub fn smoothed_kqr_objective(
    b: f64,
    alpha: &DVector<f64>,
    y: &DVector<f64>,
    k: &DMatrix<f64>,
    lambda: f64,
    tau: QuantileLevel,
    gamma: f64,
) -> Result<f64> {
    check_dims(y, k, alpha)?;
    if !(gamma > 0.0) {
        return Err(Error::invalid("gamma must be positive"));
    }
    let fitted = Coefficients {
        b,
        alpha: alpha.clone(),
    }
    .fitted(k);
    Ok(mean_smoothed_loss(y, &fitted, tau.value(), gamma) + 0.5 * lambda * ridge(k, alpha))
}

/// Parameters of the joint multi-level objective.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiLevelParams<'a> {
    pub taus: &'a [QuantileLevel],
    pub lambda1: f64,
    pub lambda2: f64,
    pub eta: f64,
}

impl MultiLevelParams<'_> {
    pub fn validate(&self) -> Result<()> {
        if self.taus.is_empty() {
            return Err(Error::invalid("at least one quantile level is required"));
        }
        if self.taus.windows(2).any(|w| w[0].value() >= w[1].value()) {
            return Err(Error::invalid("quantile levels must be strictly increasing"));
        }
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 || !(self.eta > 0.0) {
            return Err(Error::invalid(
                "penalties must be nonnegative and eta positive",
            ));
        }
        Ok(())
    }
}

/// `λ₁ Σ_t Σ_i V(f_{t,i} − f_{t+1,i})` for precomputed fitted values.
pub fn crossing_penalty(fitted: &[DVector<f64>], lambda1: f64, eta: f64) -> f64 {
    if lambda1 == 0.0 {
        return 0.0;
    }
    let terms = fitted.windows(2).flat_map(|w| {
        w[0].iter()
            .zip(w[1].iter())
            .map(|(a, b)| smooth_relu(a - b, eta))
            .collect::<Vec<_>>()
    });
    lambda1 * compensated_sum(terms)
}

fn multi_level(
    levels: &[Coefficients],
    y: &DVector<f64>,
    k: &DMatrix<f64>,
    params: &MultiLevelParams<'_>,
    gamma: Option<f64>,
) -> Result<f64> {
    params.validate()?;
    check_len(params.taus.len(), levels.len())?;
    let mut fitted = Vec::with_capacity(levels.len());
    let mut total = 0.0;
    for (c, tau) in levels.iter().zip(params.taus) {
        check_dims(y, k, &c.alpha)?;
        let f = c.fitted(k);
        total += match gamma {
            Some(g) => mean_smoothed_loss(y, &f, tau.value(), g),
            None => mean_check_loss(y, &f, tau.value()),
        };
        total += 0.5 * params.lambda2 * ridge(k, &c.alpha);
        fitted.push(f);
    }
    Ok(total + crossing_penalty(&fitted, params.lambda1, params.eta))
}

/// Non-crossing objective with exact check losses.
pub fn nckqr_objective(
    levels: &[Coefficients],
    y: &DVector<f64>,
    k: &DMatrix<f64>,
    params: &MultiLevelParams<'_>,
) -> Result<f64> {
    multi_level(levels, y, k, params, None)
}

/// Non-crossing objective with γ-smoothed check losses.
pub fn smoothed_nckqr_objective(
    levels: &[Coefficients],
    y: &DVector<f64>,
    k: &DMatrix<f64>,
    params: &MultiLevelParams<'_>,
    gamma: f64,
) -> Result<f64> {
    if !(gamma > 0.0) {
        return Err(Error::invalid("gamma must be positive"));
    }
    multi_level(levels, y, k, params, Some(gamma))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn check_loss_values() {
        assert_eq!(check_loss(0.0, 0.3), 0.0);
        assert!((check_loss(2.0, 0.9) - 1.8).abs() < 1e-15);
        assert!((check_loss(-2.0, 0.9) - 0.2).abs() < 1e-15);
    }

    #[test]
    fn smoothed_check_values() {
        assert!((smoothed_check(0.0, 0.5, 0.1) - 0.025).abs() < 1e-15);
        assert!((smoothed_check(0.1, 0.5, 0.1) - 0.05).abs() < 1e-15);
        assert!((smoothed_check(-0.2, 0.5, 0.1) - 0.1).abs() < 1e-15);
    }

    #[test]
    fn smoothed_derivative_values() {
        assert!((smoothed_check_deriv(0.0, 0.3, 0.1) - (0.3 - 0.5)).abs() < 1e-15);
        assert_eq!(smoothed_check_deriv(0.2, 0.3, 0.1), 0.3);
        let (t, g, tau, h) = (0.03, 0.1, 0.3, 1e-6);
        let fd = (smoothed_check(t + h, tau, g) - smoothed_check(t - h, tau, g)) / (2.0 * h);
        assert!((fd - smoothed_check_deriv(t, tau, g)).abs() < 1e-8);
    }

    #[test]
    fn derivative_is_continuous_at_band_edges() {
        let (tau, g) = (0.37, 0.02);
        assert_eq!(smoothed_check_deriv(g, tau, g), tau);
        assert_eq!(smoothed_check_deriv(-g, tau, g), tau - 1.0);
        assert_eq!(smooth_relu_deriv(1e-5, 1e-5), 1.0);
        assert_eq!(smooth_relu_deriv(-1e-5, 1e-5), 0.0);
    }

    #[test]
    fn smooth_relu_values() {
        let eta = 1e-5;
        assert!((smooth_relu(0.0, eta) - 2.5e-6).abs() < 1e-20);
        assert_eq!(smooth_relu(-eta, eta), 0.0);
        assert!((smooth_relu(eta, eta) - eta).abs() < 1e-20);
        assert_eq!(smooth_relu(1.0, eta), 1.0);
    }

    #[test]
    fn kqr_objective_small_cases() {
        let k = DMatrix::from_element(1, 1, 1.0);
        let y = DVector::from_element(1, 1.0);
        let tau = QuantileLevel::new(0.5).unwrap();
        let v = kqr_objective(0.0, &DVector::zeros(1), &y, &k, 1.0, tau).unwrap();
        assert!((v - 0.5).abs() < 1e-15);

        // y = Kα exactly: only the ridge term remains.
        let k = DMatrix::identity(2, 2);
        let alpha = DVector::from_vec(vec![1.0, -1.0]);
        let y = alpha.clone();
        let v = kqr_objective(0.0, &alpha, &y, &k, 0.7, tau).unwrap();
        assert!((v - 0.7).abs() < 1e-15);
    }

    #[test]
    fn kqr_objective_at_sample_quantile() {
        let y = DVector::from_vec(vec![3.0, -1.0, 0.5, 2.0, 7.0]);
        let k = DMatrix::identity(5, 5);
        let tau = QuantileLevel::new(0.4).unwrap();
        // sample 0.4-quantile of {-1, 0.5, 2, 3, 7} is 0.5
        let b = 0.5;
        let direct: f64 = y.iter().map(|v| check_loss(v - b, 0.4)).sum::<f64>() / 5.0;
        let v = kqr_objective(b, &DVector::zeros(5), &y, &k, 3.0, tau).unwrap();
        assert!((v - direct).abs() < 1e-15);
    }

    #[test]
    fn objective_rejects_dimension_mismatch() {
        let k = DMatrix::identity(2, 2);
        let tau = QuantileLevel::new(0.5).unwrap();
        let r = kqr_objective(0.0, &DVector::zeros(3), &DVector::zeros(2), &k, 1.0, tau);
        assert!(matches!(r, Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn multi_level_without_penalty_is_sum_of_levels() {
        let k = DMatrix::from_row_slice(3, 3, &[1.0, 0.5, 0.2, 0.5, 1.0, 0.4, 0.2, 0.4, 1.0]);
        let y = DVector::from_vec(vec![0.3, -0.2, 1.1]);
        let taus = [QuantileLevel::new(0.2).unwrap(), QuantileLevel::new(0.7).unwrap()];
        let levels = vec![
            Coefficients {
                b: 0.1,
                alpha: DVector::from_vec(vec![0.5, -0.3, 0.2]),
            },
            Coefficients {
                b: -0.4,
                alpha: DVector::from_vec(vec![1.0, 0.0, -0.6]),
            },
        ];
        let params = MultiLevelParams {
            taus: &taus,
            lambda1: 0.0,
            lambda2: 0.8,
            eta: 1e-5,
        };
        let q = nckqr_objective(&levels, &y, &k, &params).unwrap();
        let g1 = kqr_objective(0.1, &levels[0].alpha, &y, &k, 0.8, taus[0]).unwrap();
        let g2 = kqr_objective(-0.4, &levels[1].alpha, &y, &k, 0.8, taus[1]).unwrap();
        assert_eq!(q, g1 + g2);
    }

    #[test]
    fn multi_level_rejects_unordered_levels() {
        let taus = [QuantileLevel::new(0.7).unwrap(), QuantileLevel::new(0.2).unwrap()];
        let params = MultiLevelParams {
            taus: &taus,
            lambda1: 1.0,
            lambda2: 1.0,
            eta: 1e-5,
        };
        let levels = vec![Coefficients::zeros(1), Coefficients::zeros(1)];
        let k = DMatrix::identity(1, 1);
        let y = DVector::zeros(1);
        assert!(nckqr_objective(&levels, &y, &k, &params).is_err());
    }

    proptest! {
        #[test]
        fn check_loss_is_convex(a in -10.0..10.0f64, b in -10.0..10.0f64, tau in 0.01..0.99f64) {
            let mid = check_loss(0.5 * (a + b), tau);
            prop_assert!(mid <= 0.5 * (check_loss(a, tau) + check_loss(b, tau)) + 1e-12);
        }

        #[test]
        fn smoothing_sandwich(t in -3.0..3.0f64, tau in 0.01..0.99f64, gamma in 1e-6..2.0f64) {
            let gap = smoothed_check(t, tau, gamma) - check_loss(t, tau);
            prop_assert!(gap >= -1e-15 && gap <= gamma / 4.0 + 1e-15);
        }

        #[test]
        fn smoothed_derivative_is_lipschitz(a in -2.0..2.0f64, b in -2.0..2.0f64,
                                            tau in 0.01..0.99f64, gamma in 1e-3..1.0f64) {
            let d = (smoothed_check_deriv(a, tau, gamma) - smoothed_check_deriv(b, tau, gamma)).abs();
            prop_assert!(d <= (a - b).abs() / (2.0 * gamma) + 1e-12);
        }

        #[test]
        fn relu_sandwich_and_monotone(t in -1.0..1.0f64, s in 0.0..0.5f64, eta in 1e-6..0.5f64) {
            let v = smooth_relu(t, eta);
            let gap = v - t.max(0.0);
            prop_assert!(gap >= -1e-15 && gap <= eta / 4.0 + 1e-15);
            prop_assert!(smooth_relu(t + s, eta) >= v);
            let d = smooth_relu_deriv(t, eta);
            prop_assert!((0.0..=1.0).contains(&d));
        }
    }
}
