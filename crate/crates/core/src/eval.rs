//! Prediction, pinball-loss evaluation and k-fold cross-validation.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::error::{check_len, Error, Result};
use crate::kernel::{cross_kernel, KernelModel, KernelSpec};
use crate::linalg::matvec;
use crate::loss::{mean_check_loss, Coefficients, QuantileLevel};
use crate::nckqr::{solve_nckqr, NckqrProblem, NckqrSolution};
use crate::solver::{solve_kqr_path, KqrSolution, SolverConfig};

/// `b + Σ_i α_i K(x_i, x)` for every row of `x_new`.
pub fn predict(solution: &KqrSolution, x_train: &DMatrix<f64>, x_new: &DMatrix<f64>, spec: &KernelSpec) -> Result<DVector<f64>> {
    predict_coefficients(solution.b, &solution.alpha, x_train, x_new, spec)
}

/// Per-level predictions of a joint fit.
pub fn predict_levels(
    solution: &NckqrSolution,
    x_train: &DMatrix<f64>,
    x_new: &DMatrix<f64>,
    spec: &KernelSpec,
) -> Result<Vec<DVector<f64>>> {
    let cross = cross_matrix(solution.levels.first().map_or(0, |c| c.alpha.len()), x_train, x_new, spec)?;
    Ok(solution.levels.iter().map(|c| apply(&cross, c)).collect())
}

fn predict_coefficients(
    b: f64,
    alpha: &DVector<f64>,
    x_train: &DMatrix<f64>,
    x_new: &DMatrix<f64>,
    spec: &KernelSpec,
) -> Result<DVector<f64>> {
    let cross = cross_matrix(alpha.len(), x_train, x_new, spec)?;
    Ok(apply(&cross, &Coefficients { b, alpha: alpha.clone() }))
}

fn cross_matrix(n: usize, x_train: &DMatrix<f64>, x_new: &DMatrix<f64>, spec: &KernelSpec) -> Result<DMatrix<f64>> {
    check_len(x_train.nrows(), n)?;
    cross_kernel(x_new, x_train, spec)
}

fn apply(cross: &DMatrix<f64>, c: &Coefficients) -> DVector<f64> {
    let mut f = matvec(cross, &c.alpha);
    f.add_scalar_mut(c.b);
    f
}

/// Mean check loss `(1/m) Σ ρ_τ(y_i − ŷ_i)`.
///
/// Panics if the vectors differ in length.
pub fn pinball_loss(y_true: &DVector<f64>, y_pred: &DVector<f64>, tau: QuantileLevel) -> f64 {
    assert_eq!(y_true.len(), y_pred.len(), "pinball_loss needs equal lengths");
    mean_check_loss(y_true, y_pred, tau.value())
}

/// Sample τ-quantile: the order statistic of rank `⌈nτ⌉`, a minimizer of the
/// mean check loss over constants.
pub fn empirical_quantile(y: &DVector<f64>, tau: QuantileLevel) -> Result<f64> {
    if y.is_empty() {
        return Err(Error::invalid("empirical quantile of an empty sample"));
    }
    let mut v: Vec<f64> = y.iter().copied().collect();
    v.sort_by(f64::total_cmp);
    let rank = (v.len() as f64 * tau.value()).ceil() as usize;
    Ok(v[rank.clamp(1, v.len()) - 1])
}

/// Seeded shuffle of `0..n` dealt round-robin into `k` folds.
pub fn fold_assignment(n: usize, k: usize, seed: u64) -> Result<Vec<usize>> {
    if k < 2 || k > n {
        return Err(Error::invalid(format!("fold count must be in 2..={n}, got {k}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut folds = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        folds[i] = pos % k;
    }
    Ok(folds)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvResult {
    pub lambda_grid: Vec<f64>,
    pub mean_loss: Vec<f64>,
    pub std_error: Vec<f64>,
    pub best_lambda: f64,
    pub fold_assignment: Vec<usize>,
    pub seed: u64,
}

impl CvResult {
    pub fn best_index(&self) -> usize {
        self.lambda_grid
            .iter()
            .position(|&l| l == self.best_lambda)
            .expect("best_lambda is taken from the grid")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NckqrCvResult {
    pub lambda1_grid: Vec<f64>,
    pub lambda2_grid: Vec<f64>,
    /// Row-major over `(λ₁, λ₂)`: entry `i * lambda2_grid.len() + j`.
    pub mean_loss: Vec<f64>,
    pub std_error: Vec<f64>,
    pub best_lambda1: f64,
    pub best_lambda2: f64,
    pub fold_assignment: Vec<usize>,
    pub seed: u64,
}

struct Split {
    train: Dataset,
    test: Dataset,
}

fn splits(data: &Dataset, folds: &[usize], k: usize) -> Result<Vec<Split>> {
    (0..k)
        .map(|f| {
            let train: Vec<usize> = (0..data.n()).filter(|&i| folds[i] != f).collect();
            let test: Vec<usize> = (0..data.n()).filter(|&i| folds[i] == f).collect();
            if train.len() < 2 {
                return Err(Error::invalid(format!("fold {f} leaves {} training points", train.len())));
            }
            Ok(Split {
                train: data.subset(&train),
                test: data.subset(&test),
            })
        })
        .collect()
}

/// Runs `job` over every fold on a small thread pool; results keep fold order.
fn per_fold<T: Send>(splits: &[Split], job: impl Fn(&Split) -> Result<T> + Sync) -> Result<Vec<T>> {
    let workers = std::thread::available_parallelism()
        .map_or(1, |n| n.get())
        .min(splits.len())
        .max(1);
    let next = AtomicUsize::new(0);
    let out: Mutex<Vec<Option<Result<T>>>> = Mutex::new((0..splits.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let f = next.fetch_add(1, Ordering::Relaxed);
                if f >= splits.len() {
                    break;
                }
                let r = job(&splits[f]);
                out.lock().expect("fold results lock")[f] = Some(r);
            });
        }
    });
    out.into_inner()
        .expect("fold results lock")
        .into_iter()
        .map(|r| r.expect("every fold ran"))
        .collect()
}

fn mean_and_se(losses: &[Vec<f64>], j: usize) -> (f64, f64) {
    let k = losses.len() as f64;
    let mean = losses.iter().map(|l| l[j]).sum::<f64>() / k;
    let var = losses.iter().map(|l| (l[j] - mean).powi(2)).sum::<f64>() / (k - 1.0);
    (mean, (var / k).sqrt())
}

/// k-fold cross-validation of the warm-started λ path. The kernel model is
/// rebuilt on each fold's training rows with `spec` held fixed.
pub fn cross_validate(
    data: &Dataset,
    spec: &KernelSpec,
    tau: QuantileLevel,
    lambda_grid: &[f64],
    k: usize,
    seed: u64,
    config: &SolverConfig,
) -> Result<CvResult> {
    let folds = fold_assignment(data.n(), k, seed)?;
    let parts = splits(data, &folds, k)?;
    let losses = per_fold(&parts, |s| {
        let model = KernelModel::new(&s.train.x, *spec)?;
        let cross = cross_kernel(&s.test.x, &s.train.x, spec)?;
        let path = solve_kqr_path(&s.train.y, &model, tau, lambda_grid, config)?;
        Ok(path
            .iter()
            .map(|sol| {
                let c = Coefficients { b: sol.b, alpha: sol.alpha.clone() };
                pinball_loss(&s.test.y, &apply(&cross, &c), tau)
            })
            .collect::<Vec<f64>>())
    })?;
    let (mean_loss, std_error): (Vec<f64>, Vec<f64>) = (0..lambda_grid.len()).map(|j| mean_and_se(&losses, j)).unzip();
    let mut best = 0;
    for j in 1..lambda_grid.len() {
        let better = mean_loss[j] < mean_loss[best] || (mean_loss[j] == mean_loss[best] && lambda_grid[j] > lambda_grid[best]);
        if better {
            best = j;
        }
    }
    Ok(CvResult {
        lambda_grid: lambda_grid.to_vec(),
        mean_loss,
        std_error,
        best_lambda: lambda_grid[best],
        fold_assignment: folds,
        seed,
    })
}

/// Cross-validation of the joint fit over a `(λ₁, λ₂)` grid. The held-out
/// loss is the pinball loss averaged over levels. Along each λ₁ row the fits
/// are warm-started down the λ₂ grid.
#[allow(clippy::too_many_arguments)]
pub fn cross_validate_nckqr(
    data: &Dataset,
    spec: &KernelSpec,
    taus: &[QuantileLevel],
    lambda1_grid: &[f64],
    lambda2_grid: &[f64],
    eta: f64,
    k: usize,
    seed: u64,
    config: &SolverConfig,
) -> Result<NckqrCvResult> {
    if lambda1_grid.is_empty() || lambda2_grid.is_empty() {
        return Err(Error::invalid("lambda grids must be non-empty"));
    }
    for &l1 in lambda1_grid {
        for &l2 in lambda2_grid {
            NckqrProblem::new(taus.to_vec(), l1, l2, eta)?;
        }
    }
    let folds = fold_assignment(data.n(), k, seed)?;
    let parts = splits(data, &folds, k)?;
    let losses = per_fold(&parts, |s| {
        let model = KernelModel::new(&s.train.x, *spec)?;
        let cross = cross_kernel(&s.test.x, &s.train.x, spec)?;
        let mut row = Vec::with_capacity(lambda1_grid.len() * lambda2_grid.len());
        for &l1 in lambda1_grid {
            let mut warm: Option<NckqrSolution> = None;
            for &l2 in lambda2_grid {
                let problem = NckqrProblem::new(taus.to_vec(), l1, l2, eta)?;
                let sol = solve_nckqr(&s.train.y, &model, &problem, config, warm.as_ref())?;
                let loss = sol
                    .levels
                    .iter()
                    .zip(taus)
                    .map(|(c, &tau)| pinball_loss(&s.test.y, &apply(&cross, c), tau))
                    .sum::<f64>()
                    / taus.len() as f64;
                row.push(loss);
                warm = Some(sol);
            }
        }
        Ok(row)
    })?;
    let cells = lambda1_grid.len() * lambda2_grid.len();
    let (mean_loss, std_error): (Vec<f64>, Vec<f64>) = (0..cells).map(|j| mean_and_se(&losses, j)).unzip();
    let at = |j: usize| (lambda1_grid[j / lambda2_grid.len()], lambda2_grid[j % lambda2_grid.len()]);
    let mut best = 0;
    for j in 1..cells {
        let (a, b) = (at(j), at(best));
        let larger = (a.1, a.0) > (b.1, b.0);
        if mean_loss[j] < mean_loss[best] || (mean_loss[j] == mean_loss[best] && larger) {
            best = j;
        }
    }
    let (best_lambda1, best_lambda2) = at(best);
    Ok(NckqrCvResult {
        lambda1_grid: lambda1_grid.to_vec(),
        lambda2_grid: lambda2_grid.to_vec(),
        mean_loss,
        std_error,
        best_lambda1,
        best_lambda2,
        fold_assignment: folds,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::simulate_friedman;
    use crate::kernel::median_heuristic_bandwidth;
    use crate::solver::solve_kqr;
    use proptest::prelude::*;

    fn q(t: f64) -> QuantileLevel {
        QuantileLevel::new(t).unwrap()
    }

    #[test]
    fn predict_on_training_rows_is_fitted() {
        let ds = simulate_friedman(20, 3, 0.1, 3.0, 1).unwrap();
        let spec = KernelSpec::rbf(median_heuristic_bandwidth(&ds.x).unwrap()).unwrap();
        let model = KernelModel::new(&ds.x, spec).unwrap();
        let sol = solve_kqr(&ds.y, &model, q(0.3), 0.1, &SolverConfig::default(), None).unwrap();
        let pred = predict(&sol, &ds.x, &ds.x, &spec).unwrap();
        assert!((pred - sol.fitted(model.k())).amax() <= 1e-10);
    }

    #[test]
    fn zero_alpha_predicts_intercept() {
        let x = DMatrix::from_row_slice(3, 1, &[0.0, 1.0, 2.0]);
        let sol = KqrSolution {
            b: 1.5,
            alpha: DVector::zeros(3),
            tau: q(0.5),
            lambda: 1.0,
            singular_set: vec![],
            kkt_residual: 0.0,
            final_gamma: 1.0,
            iterations: 0,
            objective: 0.0,
            certified: true,
            trace: vec![],
        };
        let pred = predict(&sol, &x, &DMatrix::from_row_slice(2, 1, &[7.0, -3.0]), &KernelSpec::rbf(1.0).unwrap()).unwrap();
        assert_eq!(pred.as_slice(), &[1.5, 1.5]);
    }

    #[test]
    fn single_point_rbf_closed_form() {
        let x = DMatrix::from_row_slice(1, 2, &[0.5, -1.0]);
        let x_new = DMatrix::from_row_slice(1, 2, &[1.5, 0.0]);
        let sigma = 0.7;
        let got = predict_coefficients(0.25, &DVector::from_vec(vec![2.0]), &x, &x_new, &KernelSpec::rbf(sigma).unwrap()).unwrap();
        let want = 0.25 + 2.0 * (-2.0 / (2.0 * sigma * sigma)).exp();
        assert!((got[0] - want).abs() < 1e-15);
    }

    #[test]
    fn prediction_dimension_mismatch() {
        let x = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        let bad = DMatrix::from_row_slice(1, 2, &[0.0, 1.0]);
        let alpha = DVector::zeros(2);
        let spec = KernelSpec::rbf(1.0).unwrap();
        assert!(predict_coefficients(0.0, &alpha, &x, &bad, &spec).is_err());
        assert!(predict_coefficients(0.0, &DVector::zeros(3), &x, &x, &spec).is_err());
    }

    #[test]
    fn pinball_examples() {
        let y = DVector::from_vec(vec![1.0, -2.0, 3.0]);
        assert_eq!(pinball_loss(&y, &y, q(0.3)), 0.0);
        let pred = DVector::from_vec(vec![0.0, 0.0, 0.0]);
        let mae = y.abs().sum() / 3.0;
        assert!((pinball_loss(&y, &pred, q(0.5)) - mae / 2.0).abs() < 1e-15);
        let t = DVector::from_vec(vec![1.0, -1.0]);
        assert!((pinball_loss(&t, &DVector::zeros(2), q(0.9)) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn empirical_quantile_minimizes_check_loss() {
        let y = DVector::from_vec(vec![3.0, 1.0, 4.0, 1.5, 9.0, 2.6]);
        for t in [0.1, 0.3, 0.5, 0.77, 0.9] {
            let c = empirical_quantile(&y, q(t)).unwrap();
            let at = |v: f64| pinball_loss(&y, &DVector::from_element(6, v), q(t));
            for &other in y.iter() {
                assert!(at(c) <= at(other) + 1e-15);
            }
        }
    }

    #[test]
    fn folds_are_balanced_and_seeded() {
        let a = fold_assignment(23, 5, 11).unwrap();
        assert_eq!(a, fold_assignment(23, 5, 11).unwrap());
        assert_ne!(a, fold_assignment(23, 5, 12).unwrap());
        let sizes: Vec<usize> = (0..5).map(|f| a.iter().filter(|&&v| v == f).count()).collect();
        assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        assert!(fold_assignment(5, 1, 0).is_err());
        assert!(fold_assignment(5, 6, 0).is_err());
    }

    #[test]
    fn leave_one_out_runs() {
        let ds = simulate_friedman(10, 2, 0.1, 3.0, 5).unwrap();
        let spec = KernelSpec::rbf(1.0).unwrap();
        let grid = [1.0, 0.1, 0.01];
        let cv = cross_validate(&ds, &spec, q(0.5), &grid, 10, 3, &SolverConfig::default()).unwrap();
        assert!(cv.mean_loss.iter().chain(&cv.std_error).all(|v| v.is_finite()));
        assert!(grid.contains(&cv.best_lambda));
    }

    #[test]
    fn too_few_training_points() {
        let ds = simulate_friedman(2, 2, 0.1, 3.0, 5).unwrap();
        let err = cross_validate(&ds, &KernelSpec::linear(), q(0.5), &[1.0], 2, 0, &SolverConfig::default());
        assert!(matches!(err, Err(Error::InvalidInput(_))));
    }

    #[test]
    fn cv_is_deterministic_and_ties_prefer_larger_lambda() {
        let ds = simulate_friedman(30, 3, 0.1, 3.0, 8).unwrap();
        let spec = KernelSpec::rbf(median_heuristic_bandwidth(&ds.x).unwrap()).unwrap();
        let cfg = SolverConfig::default();
        let grid = [1.0, 0.3, 0.1, 0.03];
        let a = cross_validate(&ds, &spec, q(0.5), &grid, 4, 9, &cfg).unwrap();
        let b = cross_validate(&ds, &spec, q(0.5), &grid, 4, 9, &cfg).unwrap();
        assert_eq!(a, b);
        let best = a.best_index();
        for j in 0..grid.len() {
            assert!(a.mean_loss[best] < a.mean_loss[j] || (a.mean_loss[best] == a.mean_loss[j] && grid[best] >= grid[j]));
        }
    }

    #[test]
    fn cv_invariant_to_sample_order() {
        let ds = simulate_friedman(24, 2, 0.1, 3.0, 4).unwrap();
        let spec = KernelSpec::rbf(1.2).unwrap();
        let grid = [0.5, 0.05];
        let cfg = SolverConfig::default();
        let cv = cross_validate(&ds, &spec, q(0.7), &grid, 3, 1, &cfg).unwrap();
        // Reverse the rows and carry the fold ids along.
        let rev: Vec<usize> = (0..24).rev().collect();
        let permuted = ds.subset(&rev);
        let folds: Vec<usize> = rev.iter().map(|&i| cv.fold_assignment[i]).collect();
        let parts = splits(&permuted, &folds, 3).unwrap();
        let losses = per_fold(&parts, |s| {
            let model = KernelModel::new(&s.train.x, spec)?;
            let path = solve_kqr_path(&s.train.y, &model, q(0.7), &grid, &cfg)?;
            path.iter()
                .map(|sol| Ok(pinball_loss(&s.test.y, &predict(sol, &s.train.x, &s.test.x, &spec)?, q(0.7))))
                .collect::<Result<Vec<f64>>>()
        })
        .unwrap();
        for j in 0..grid.len() {
            assert!((mean_and_se(&losses, j).0 - cv.mean_loss[j]).abs() < 1e-8);
        }
    }

    #[test]
    fn nckqr_cv_picks_from_grid() {
        let ds = simulate_friedman(24, 2, 0.1, 3.0, 2).unwrap();
        let spec = KernelSpec::rbf(1.0).unwrap();
        let taus = [q(0.25), q(0.75)];
        let cfg = SolverConfig::default();
        let cv = cross_validate_nckqr(&ds, &spec, &taus, &[0.0, 1.0], &[0.5, 0.05], 1e-5, 3, 6, &cfg).unwrap();
        assert_eq!(cv.mean_loss.len(), 4);
        assert!([0.0, 1.0].contains(&cv.best_lambda1));
        assert!([0.5, 0.05].contains(&cv.best_lambda2));
        let again = cross_validate_nckqr(&ds, &spec, &taus, &[0.0, 1.0], &[0.5, 0.05], 1e-5, 3, 6, &cfg).unwrap();
        assert_eq!(cv, again);
    }

    proptest! {
        #[test]
        fn fold_sizes_balanced(n in 2usize..200, k in 2usize..20, seed in any::<u64>()) {
            prop_assume!(k <= n);
            let a = fold_assignment(n, k, seed).unwrap();
            let sizes: Vec<usize> = (0..k).map(|f| a.iter().filter(|&&v| v == f).count()).collect();
            prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        }

        #[test]
        fn pinball_nonnegative(v in proptest::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 1..30), t in 0.01f64..0.99) {
            let y = DVector::from_iterator(v.len(), v.iter().map(|p| p.0));
            let f = DVector::from_iterator(v.len(), v.iter().map(|p| p.1));
            prop_assert!(pinball_loss(&y, &f, q(t)) >= 0.0);
        }
    }
}
