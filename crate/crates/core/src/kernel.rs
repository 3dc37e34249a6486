//! Kernel functions, Gram matrices and the one-time spectral factorization
//! that every solve in the crate reuses.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

/// Relative floor applied to eigenvalues: `λ_i ← max(λ_i, EIGEN_FLOOR · λ_max)`.
pub const EIGEN_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelKind {
    Rbf,
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub kind: KernelKind,
    /// RBF bandwidth. Ignored by the linear kernel.
    pub sigma: f64,
}

impl KernelSpec {
    pub fn rbf(sigma: f64) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::invalid(format!(
                "rbf bandwidth must be positive and finite, got {sigma}"
            )));
        }
        Ok(Self {
            kind: KernelKind::Rbf,
            sigma,
        })
    }

    pub fn linear() -> Self {
        Self {
            kind: KernelKind::Linear,
            sigma: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            KernelKind::Rbf => Self::rbf(self.sigma).map(|_| ()),
            KernelKind::Linear => Ok(()),
        }
    }

    /// Evaluate the kernel on two points given as slices.
    pub fn eval(&self, x: &[f64], x_prime: &[f64]) -> Result<f64> {
        check_len(x.len(), x_prime.len())?;
        Ok(self.eval_unchecked(x.iter().copied(), x_prime.iter().copied()))
    }

    fn eval_unchecked<A, B>(&self, x: A, x_prime: B) -> f64
    where
        A: Iterator<Item = f64>,
        B: Iterator<Item = f64>,
    {
        match self.kind {
            KernelKind::Rbf => {
                let d2: f64 = x.zip(x_prime).map(|(a, b)| (a - b) * (a - b)).sum();
                (-d2 / (2.0 * self.sigma * self.sigma)).exp()
            }
            KernelKind::Linear => x.zip(x_prime).map(|(a, b)| a * b).sum(),
        }
    }
}

/// `exp(-‖x - x'‖² / (2σ²))`.
pub fn rbf_kernel(x: &[f64], x_prime: &[f64], sigma: f64) -> Result<f64> {
    KernelSpec::rbf(sigma)?.eval(x, x_prime)
}

/// Symmetric `n × n` Gram matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelMatrix(DMatrix<f64>);

impl KernelMatrix {
    /// Wrap an existing symmetric matrix (used by tests and the reference oracle).
    pub fn from_matrix(m: DMatrix<f64>) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(Error::invalid("kernel matrix must be square"));
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("kernel matrix has non-finite entries"));
        }
        let n = m.nrows();
        for i in 0..n {
            for j in 0..i {
                if (m[(i, j)] - m[(j, i)]).abs() > 1e-12 {
                    return Err(Error::invalid(format!(
                        "kernel matrix is not symmetric at ({i}, {j})"
                    )));
                }
            }
        }
        Ok(Self(m))
    }

    pub fn n(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }

    /// Row `i` of the matrix (equal to column `i`).
    pub fn row(&self, i: usize) -> DVector<f64> {
        self.0.column(i).into_owned()
    }
}

impl std::ops::Index<(usize, usize)> for KernelMatrix {
    type Output = f64;
    fn index(&self, idx: (usize, usize)) -> &f64 {
        &self.0[idx]
    }
}

fn check_finite(x: &DMatrix<f64>) -> Result<()> {
    if let Some(pos) = x.iter().position(|v| !v.is_finite()) {
        let (r, c) = (pos % x.nrows(), pos / x.nrows());
        return Err(Error::invalid(format!(
            "non-finite covariate at row {r}, column {c}"
        )));
    }
    Ok(())
}

/// Gram matrix over the rows of `x` (`n × p`). Only the upper triangle is
/// evaluated; the lower triangle is a mirror, so symmetry is exact.
pub fn build_kernel_matrix(x: &DMatrix<f64>, spec: &KernelSpec) -> Result<KernelMatrix> {
    spec.validate()?;
    let n = x.nrows();
    if n == 0 {
        return Err(Error::invalid("kernel matrix needs at least one row"));
    }
    check_finite(x)?;
    let mut k = DMatrix::zeros(n, n);
    for j in 0..n {
        for i in 0..=j {
            let v = if i == j && spec.kind == KernelKind::Rbf {
                1.0
            } else {
                spec.eval_unchecked(x.row(i).iter().copied(), x.row(j).iter().copied())
            };
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    Ok(KernelMatrix(k))
}

/// `m × n` matrix of kernel values between new rows and training rows.
pub fn cross_kernel(
    x_new: &DMatrix<f64>,
    x_train: &DMatrix<f64>,
    spec: &KernelSpec,
) -> Result<DMatrix<f64>> {
    spec.validate()?;
    check_len(x_train.ncols(), x_new.ncols())?;
    check_finite(x_new)?;
    let mut out = DMatrix::zeros(x_new.nrows(), x_train.nrows());
    for j in 0..x_train.nrows() {
        for i in 0..x_new.nrows() {
            out[(i, j)] =
                spec.eval_unchecked(x_new.row(i).iter().copied(), x_train.row(j).iter().copied());
        }
    }
    Ok(out)
}

/// Median of all pairwise Euclidean distances between rows.
pub fn median_heuristic_bandwidth(x: &DMatrix<f64>) -> Result<f64> {
    let n = x.nrows();
    if n < 2 {
        return Err(Error::invalid("median heuristic needs at least two rows"));
    }
    check_finite(x)?;
    let mut d = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            d.push((x.row(i) - x.row(j)).norm());
        }
    }
    d.sort_by(|a, b| a.total_cmp(b));
    let m = d.len();
    let median = if m % 2 == 1 {
        d[m / 2]
    } else {
        0.5 * (d[m / 2 - 1] + d[m / 2])
    };
    if median > 0.0 {
        Ok(median)
    } else if d[m - 1] > 0.0 {
        // More than half the pairs coincide; fall back to the mean positive distance.
        let pos: Vec<f64> = d.into_iter().filter(|v| *v > 0.0).collect();
        Ok(pos.iter().sum::<f64>() / pos.len() as f64)
    } else {
        Err(Error::DegenerateData(
            "all rows are identical; bandwidth is undefined".into(),
        ))
    }
}

/// `K = U Λ Uᵀ` with eigenvalues sorted non-increasing and floored.
#[derive(Debug, Clone)]
pub struct EigenDecomposition {
    pub vectors: DMatrix<f64>,
    pub values: DVector<f64>,
    /// Smallest eigenvalue before flooring.
    pub raw_min: f64,
    /// The floor that was applied.
    pub floor: f64,
}

impl EigenDecomposition {
    pub fn n(&self) -> usize {
        self.values.len()
    }

    /// `U diag(values) Uᵀ`.
    pub fn reconstruct(&self) -> DMatrix<f64> {
        let mut scaled = self.vectors.clone();
        for (j, mut col) in scaled.column_iter_mut().enumerate() {
            col *= self.values[j];
        }
        &scaled * self.vectors.transpose()
    }

    /// `Uᵀ x`.
    pub fn to_eigen(&self, x: &DVector<f64>) -> DVector<f64> {
        crate::linalg::matvec_t(&self.vectors, x)
    }

    /// `U c`.
    pub fn from_eigen(&self, c: &DVector<f64>) -> DVector<f64> {
        crate::linalg::matvec(&self.vectors, c)
    }
}

pub fn eigendecompose(k: &KernelMatrix) -> Result<EigenDecomposition> {
    let n = k.n();
    let eig = SymmetricEigen::try_new(k.as_matrix().clone(), f64::EPSILON, 0).ok_or_else(|| {
        Error::numerical(format!("symmetric eigensolver did not converge (n = {n})"))
    })?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut vectors = DMatrix::zeros(n, n);
    let mut values = DVector::zeros(n);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &eig.eigenvectors.column(src));
        values[dst] = eig.eigenvalues[src];
    }
    let raw_min = values[n - 1];
    let lmax = values[0].max(0.0);
    let floor = if lmax > 0.0 {
        EIGEN_FLOOR * lmax
    } else {
        EIGEN_FLOOR
    };
    for v in values.iter_mut() {
        *v = v.max(floor);
    }
    Ok(EigenDecomposition {
        vectors,
        values,
        raw_min,
        floor,
    })
}

/// Kernel specification, Gram matrix and its factorization, built once and
/// shared read-only by every solve on the same training rows.
#[derive(Debug, Clone)]
pub struct KernelModel {
    pub spec: KernelSpec,
    pub matrix: KernelMatrix,
    pub eig: EigenDecomposition,
}

impl KernelModel {
    pub fn new(x: &DMatrix<f64>, spec: KernelSpec) -> Result<Self> {
        let matrix = build_kernel_matrix(x, &spec)?;
        Self::from_matrix(matrix, spec)
    }

    pub fn from_matrix(matrix: KernelMatrix, spec: KernelSpec) -> Result<Self> {
        let eig = eigendecompose(&matrix)?;
        Ok(Self { spec, matrix, eig })
    }

    pub fn n(&self) -> usize {
        self.matrix.n()
    }

    pub fn k(&self) -> &DMatrix<f64> {
        self.matrix.as_matrix()
    }
}
