//! Small dense helpers shared by the solvers.

use nalgebra::{DMatrix, DVector};

/// Neumaier-compensated sum. Path solvers compare objective deltas close to
/// their tolerances, so long sums are not accumulated naively.
pub fn compensated_sum<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let mut sum = 0.0_f64;
    let mut comp = 0.0_f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// `y = m * x`, allocating.
pub fn matvec(m: &DMatrix<f64>, x: &DVector<f64>) -> DVector<f64> {
    let mut out = DVector::zeros(m.nrows());
    out.gemv(1.0, m, x, 0.0);
    out
}

/// `y = mᵀ * x`, allocating.
pub fn matvec_t(m: &DMatrix<f64>, x: &DVector<f64>) -> DVector<f64> {
    let mut out = DVector::zeros(m.ncols());
    out.gemv_tr(1.0, m, x, 0.0);
    out
}

pub fn max_abs(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0_f64, |acc, x| acc.max(x.abs()))
}

pub fn max_abs_diff(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .fold(0.0_f64, |acc, (x, y)| acc.max((x - y).abs()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn compensated_sum_recovers_cancelled_terms() {
        let values = [1e16, 1.0, -1e16, 1.0];
        assert_eq!(compensated_sum(values), 2.0);
    }

    #[test]
    fn transposed_product_matches_explicit_transpose() {
        let m = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let x = DVector::from_vec(vec![1.0, -1.0]);
        assert_eq!(matvec_t(&m, &x), m.transpose() * &x);
    }
}
