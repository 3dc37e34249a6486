//! O(n²) application of the inverse of the bordered step matrix
//!
//! ```text
//! Σ = c·[n, 1ᵀK; K1, KK] + 2nγλ₂·diag(0, K) + e·I
//! ```
//!
//! through one eigendecomposition `K = UΛUᵀ`. The single-level matrix `P`
//! is the case `c = 1`, `e = 0`; the non-crossing majorizer uses
//! `c = 1 + 4nλ₁` and `e = λ₁εn`.

use nalgebra::DVector;

use crate::error::{check_len, Error, Result};
use crate::kernel::EigenDecomposition;
use crate::linalg::{compensated_sum, matvec_t};

/// Precomputed Schur-complement data for one `(c, e, 2nγλ₂)` triple.
#[derive(Debug, Clone)]
pub struct SpectralInverse {
    pi: DVector<f64>,
    vhat: DVector<f64>,
    g: f64,
}

impl SpectralInverse {
    /// `u1` must be `Uᵀ1` for the same decomposition.
    pub fn new(eig: &EigenDecomposition, u1: &DVector<f64>, c: f64, e: f64, ridge: f64) -> Result<Self> {
        let n = eig.n();
        check_len(n, u1.len())?;
        let lam = &eig.values;
        let pi = DVector::from_fn(n, |i, _| c * lam[i] * lam[i] + ridge * lam[i] + e);
        if pi.iter().any(|p| !(*p > 0.0)) {
            return Err(Error::numerical("step matrix is singular in the eigenbasis"));
        }
        let vhat = DVector::from_fn(n, |i, _| c * lam[i] * u1[i] / pi[i]);
        // cn − c²Σλ²u²/Π rewritten without cancellation, using Σu² = n.
        let denom = e + compensated_sum(
            (0..n).map(|i| c * u1[i] * u1[i] * (ridge * lam[i] + e) / pi[i]),
        );
        if !(denom > 1e-12 * n as f64) {
            return Err(Error::numerical(format!(
                "Schur complement {denom:e} below floor; kernel is degenerate"
            )));
        }
        Ok(Self {
            pi,
            vhat,
            g: 1.0 / denom,
        })
    }

    /// Solves in eigen coordinates: `rhs0` is the intercept entry and
    /// `rho_hat = Uᵀ rhs₁`. Returns the intercept and `Uᵀ x_α`.
    pub fn apply_eigen(&self, rhs0: f64, rho_hat: &DVector<f64>) -> (f64, DVector<f64>) {
        let xb = self.g * (rhs0 - self.vhat.dot(rho_hat));
        let xa = rho_hat.component_div(&self.pi) - &self.vhat * xb;
        (xb, xa)
    }
}

fn ones_in_eigenbasis(eig: &EigenDecomposition) -> DVector<f64> {
    matvec_t(&eig.vectors, &DVector::from_element(eig.n(), 1.0))
}

/// `P⁻¹ζ` with `ζ = (1ᵀz; K(z − nλα))` and `P = [n, 1ᵀK; K1, KK + 2nγλK]`,
/// where `K` is the (floored) kernel represented by `eig`.
pub fn spectral_apply_inverse(
    eig: &EigenDecomposition,
    gamma: f64,
    lambda: f64,
    z: &DVector<f64>,
    alpha: &DVector<f64>,
) -> Result<(f64, DVector<f64>)> {
    let n = eig.n();
    check_len(n, z.len())?;
    check_len(n, alpha.len())?;
    if !(gamma > 0.0) || !(lambda > 0.0) {
        return Err(Error::invalid("gamma and lambda must be positive"));
    }
    let nf = n as f64;
    let inv = SpectralInverse::new(eig, &ones_in_eigenbasis(eig), 1.0, 0.0, 2.0 * nf * gamma * lambda)?;
    let w = z - alpha * (nf * lambda);
    let rho_hat = eig.to_eigen(&w).component_mul(&eig.values);
    let (xb, xa) = inv.apply_eigen(z.sum(), &rho_hat);
    Ok((xb, eig.from_eigen(&xa)))
}

/// `Σ⁻¹ϱ` for the non-crossing majorizer; `rho` stacks the intercept entry
/// on top of the `n` coefficient entries.
pub fn sigma_apply_inverse(
    eig: &EigenDecomposition,
    gamma: f64,
    lambda1: f64,
    lambda2: f64,
    rho: &DVector<f64>,
    ridge_eps: f64,
) -> Result<(f64, DVector<f64>)> {
    let n = eig.n();
    check_len(n + 1, rho.len())?;
    if !(gamma > 0.0) || !(lambda2 > 0.0) || lambda1 < 0.0 || ridge_eps < 0.0 {
        return Err(Error::invalid(
            "need gamma > 0, lambda2 > 0, lambda1 >= 0, ridge_eps >= 0",
        ));
    }
    let nf = n as f64;
    let (c, e) = sigma_factors(nf, lambda1, ridge_eps);
    let inv = SpectralInverse::new(eig, &ones_in_eigenbasis(eig), c, e, 2.0 * nf * gamma * lambda2)?;
    let rho1 = rho.rows(1, n).into_owned();
    let (xb, xa) = inv.apply_eigen(rho[0], &eig.to_eigen(&rho1));
    Ok((xb, eig.from_eigen(&xa)))
}

/// `(c, e) = (1 + 4nλ₁, λ₁εn)`.
pub(crate) fn sigma_factors(n: f64, lambda1: f64, ridge_eps: f64) -> (f64, f64) {
    (1.0 + 4.0 * n * lambda1, lambda1 * ridge_eps * n)
}
