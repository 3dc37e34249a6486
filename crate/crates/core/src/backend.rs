//! Coordinate systems the iterative solvers run in. The spectral backend keeps
//! coefficients in the eigenbasis of the floored kernel and applies step
//! inverses in O(n²); the dense backend keeps raw coefficients and factorizes
//! the step matrix for every (λ, γ), which is the naive comparison point.

use nalgebra::{DMatrix, DVector, Dyn, LU};

use crate::error::{Error, Result};
use crate::kernel::EigenDecomposition;
use crate::linalg::{matvec, matvec_t};
use crate::spectral::SpectralInverse;

pub(crate) trait StepDirection {
    /// `Σ⁻¹ϱ` with `ϱ = (1ᵀw; K(w − nλ·α))`, in backend coordinates.
    fn direction(&self, w: &DVector<f64>, coef: &DVector<f64>) -> (f64, DVector<f64>);
}

pub(crate) trait Backend {
    type Step: StepDirection;

    fn n(&self) -> usize;
    /// Setup for one `(c, e, γ, λ)`; the ridge block is `2nγλ·K`.
    fn prepare(&self, c: f64, e: f64, gamma: f64, lambda: f64) -> Result<Self::Step>;
    /// `K·α` for coefficients held in backend coordinates.
    fn kernel_part(&self, coef: &DVector<f64>) -> DVector<f64>;
    /// Coefficients whose kernel part is `theta`.
    fn solve_kernel(&self, theta: &DVector<f64>) -> DVector<f64>;
    fn to_alpha(&self, coef: &DVector<f64>) -> DVector<f64>;
    fn from_alpha(&self, alpha: &DVector<f64>) -> DVector<f64>;
}

pub(crate) struct SpectralBackend<'a> {
    eig: &'a EigenDecomposition,
    u1: DVector<f64>,
}

impl<'a> SpectralBackend<'a> {
    pub(crate) fn new(eig: &'a EigenDecomposition) -> Self {
        let u1 = matvec_t(&eig.vectors, &DVector::from_element(eig.n(), 1.0));
        Self { eig, u1 }
    }
}

pub(crate) struct SpectralStep<'a> {
    eig: &'a EigenDecomposition,
    inv: SpectralInverse,
    n_lambda: f64,
}

impl StepDirection for SpectralStep<'_> {
    fn direction(&self, w: &DVector<f64>, coef: &DVector<f64>) -> (f64, DVector<f64>) {
        let mut rho_hat = matvec_t(&self.eig.vectors, w);
        for i in 0..rho_hat.len() {
            rho_hat[i] = self.eig.values[i] * (rho_hat[i] - self.n_lambda * coef[i]);
        }
        self.inv.apply_eigen(w.sum(), &rho_hat)
    }
}

impl<'a> Backend for SpectralBackend<'a> {
    type Step = SpectralStep<'a>;

    fn n(&self) -> usize {
        self.eig.n()
    }

    fn prepare(&self, c: f64, e: f64, gamma: f64, lambda: f64) -> Result<SpectralStep<'a>> {
        let n = self.n() as f64;
        Ok(SpectralStep {
            eig: self.eig,
            inv: SpectralInverse::new(self.eig, &self.u1, c, e, 2.0 * n * gamma * lambda)?,
            n_lambda: n * lambda,
        })
    }

    fn kernel_part(&self, coef: &DVector<f64>) -> DVector<f64> {
        matvec(&self.eig.vectors, &coef.component_mul(&self.eig.values))
    }

    fn solve_kernel(&self, theta: &DVector<f64>) -> DVector<f64> {
        matvec_t(&self.eig.vectors, theta).component_div(&self.eig.values)
    }

    fn to_alpha(&self, coef: &DVector<f64>) -> DVector<f64> {
        matvec(&self.eig.vectors, coef)
    }

    fn from_alpha(&self, alpha: &DVector<f64>) -> DVector<f64> {
        matvec_t(&self.eig.vectors, alpha)
    }
}

/// Raw-coordinate backend on `K + floor·I`, refactorizing per (λ, γ).
pub(crate) struct DenseBackend {
    k: DMatrix<f64>,
    k_lu: LU<f64, Dyn, Dyn>,
}

impl DenseBackend {
    pub(crate) fn new(k: &DMatrix<f64>, floor: f64) -> Self {
        let mut k = k.clone();
        for i in 0..k.nrows() {
            k[(i, i)] += floor;
        }
        let k_lu = k.clone().lu();
        Self { k, k_lu }
    }
}

pub(crate) struct DenseStep {
    lu: LU<f64, Dyn, Dyn>,
    n_lambda: f64,
}

impl StepDirection for DenseStep {
    fn direction(&self, w: &DVector<f64>, coef: &DVector<f64>) -> (f64, DVector<f64>) {
        let n = w.len();
        let mut rhs = DVector::zeros(n + 1);
        rhs[0] = w.sum();
        for i in 0..n {
            rhs[i + 1] = w[i] - self.n_lambda * coef[i];
        }
        // `new` guarantees invertibility; a failed solve yields a zero step.
        let x = self.lu.solve(&rhs).unwrap_or_else(|| DVector::zeros(n + 1));
        (x[0], x.rows(1, n).into_owned())
    }
}

impl Backend for DenseBackend {
    type Step = DenseStep;

    fn n(&self) -> usize {
        self.k.nrows()
    }

    /// Factorizes `[cn, c1ᵀK; c1, cK + 2nγλI]`, the step matrix with its
    /// coefficient rows divided through by `K`.
    fn prepare(&self, c: f64, e: f64, gamma: f64, lambda: f64) -> Result<DenseStep> {
        if e != 0.0 {
            return Err(Error::invalid(
                "dense backend supports only the single-level step matrix",
            ));
        }
        let n = self.n();
        let nf = n as f64;
        let mut m = DMatrix::zeros(n + 1, n + 1);
        m[(0, 0)] = c * nf;
        for j in 0..n {
            m[(0, j + 1)] = c * self.k.column(j).sum();
            m[(j + 1, 0)] = c;
        }
        m.view_mut((1, 1), (n, n)).copy_from(&(&self.k * c));
        for i in 0..n {
            m[(i + 1, i + 1)] += 2.0 * nf * gamma * lambda;
        }
        let lu = m.lu();
        if !lu.is_invertible() {
            return Err(Error::numerical("dense step matrix is singular"));
        }
        Ok(DenseStep {
            lu,
            n_lambda: nf * lambda,
        })
    }

    fn kernel_part(&self, coef: &DVector<f64>) -> DVector<f64> {
        matvec(&self.k, coef)
    }

    fn solve_kernel(&self, theta: &DVector<f64>) -> DVector<f64> {
        self.k_lu
            .solve(theta)
            .unwrap_or_else(|| DVector::zeros(theta.len()))
    }

    fn to_alpha(&self, coef: &DVector<f64>) -> DVector<f64> {
        coef.clone()
    }

    fn from_alpha(&self, alpha: &DVector<f64>) -> DVector<f64> {
        alpha.clone()
    }
}
