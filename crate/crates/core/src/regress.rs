//! Regression primitives for nuisance models: weighted linear/ridge least
//! squares, IRLS logistic regression, and k-fold cross-validated
//! regularization selection.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;

use crate::error::Error;
use crate::linalg;
use crate::rng::StreamKey;
use crate::Result;

/// A fitted (possibly ridge-penalized, possibly weighted) linear model.
#[derive(Debug, Clone)]
pub struct LinearFit {
    pub coef: DVector<f64>,
    pub lambda: f64,
    pub penalty_mask: Vec<f64>,
    pub n_fitted: usize,
}

/// A fitted logistic regression.
#[derive(Debug, Clone)]
pub struct LogisticFit {
    pub coef: DVector<f64>,
    pub converged: bool,
    pub iterations: usize,
}

/// Minimizes `sum_i w_i (y_i - d_i' beta)^2 + lambda * beta' diag(mask) beta`.
///
/// The normal equations are formed on raw sums, so `lambda` is on the same
/// scale as `D'D`. A zero `lambda` with a singular normal matrix produces a
/// rank-deficiency error naming the offending columns.
pub fn fit_linear(
    design: &DMatrix<f64>,
    response: &DVector<f64>,
    weights: Option<&[f64]>,
    lambda: f64,
    penalty_mask: Option<&[f64]>,
) -> Result<LinearFit> {
    let (n, k) = design.shape();
    if response.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "design has {n} rows but response has {}",
            response.len()
        )));
    }
    if let Some(w) = weights {
        if w.len() != n {
            return Err(Error::DimensionMismatch("weights length".into()));
        }
        if w.iter().any(|&v| v < 0.0) {
            return Err(Error::Config("weights must be nonnegative".into()));
        }
    }
    let mask: Vec<f64> = match penalty_mask {
        Some(m) => {
            if m.len() != k {
                return Err(Error::DimensionMismatch("penalty mask length".into()));
            }
            m.to_vec()
        }
        None => vec![1.0; k],
    };

    let mut dtd = DMatrix::<f64>::zeros(k, k);
    let mut dty = DVector::<f64>::zeros(k);
    for i in 0..n {
        let wi = weights.map_or(1.0, |w| w[i]);
        if wi == 0.0 {
            continue;
        }
        let row = design.row(i);
        let yi = response[i];
        for a in 0..k {
            let da = row[a] * wi;
            dty[a] += da * yi;
            for b in a..k {
                dtd[(a, b)] += da * row[b];
            }
        }
    }
    for a in 0..k {
        for b in 0..a {
            dtd[(a, b)] = dtd[(b, a)];
        }
    }
    if lambda == 0.0 {
        let offending = linalg::deficient_columns(&dtd);
        if !offending.is_empty() {
            return Err(Error::RankDeficient { columns: offending });
        }
    }
    let mut normal = dtd.clone();
    for j in 0..k {
        normal[(j, j)] += lambda * mask[j];
    }
    let coef = match linalg::solve_spd(&normal, &dty) {
        Some(c) if c.iter().all(|v| v.is_finite()) => c,
        _ => return Err(linalg::rank_deficiency_error(&dtd)),
    };
    // Reject solutions produced by a numerically singular factorization.
    let resid = (&normal * &coef - &dty).norm();
    if resid > 1e-8 * dty.norm().max(1.0) {
        return Err(linalg::rank_deficiency_error(&dtd));
    }
    Ok(LinearFit {
        coef,
        lambda,
        penalty_mask: mask,
        n_fitted: n,
    })
}

impl LinearFit {
    pub fn predict_matrix(&self, design: &DMatrix<f64>) -> Result<Vec<f64>> {
        if design.ncols() != self.coef.len() {
            return Err(Error::ColumnCountMismatch {
                expected: self.coef.len(),
                got: design.ncols(),
            });
        }
        Ok((design * &self.coef).iter().copied().collect())
    }

    pub fn predict_row(&self, row: &[f64]) -> f64 {
        row.iter().zip(self.coef.iter()).map(|(a, b)| a * b).sum()
    }
}

pub fn expit(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// Log-likelihood of a logistic model.
pub fn logistic_log_likelihood(
    design: &DMatrix<f64>,
    response: &[f64],
    coef: &DVector<f64>,
) -> f64 {
    let eta = design * coef;
    let mut ll = 0.0;
    for (i, &y) in response.iter().enumerate() {
        let t = eta[i];
        // log p = -log(1 + e^{-t}), log(1-p) = -t - log(1 + e^{-t})
        let log1pe = if t > 0.0 {
            t + (-t).exp().ln_1p()
        } else {
            (t.exp()).ln_1p()
        };
        ll += y * t - log1pe;
    }
    ll
}

/// Score (gradient of the log-likelihood) of a logistic model.
pub fn logistic_score(design: &DMatrix<f64>, response: &[f64], coef: &DVector<f64>) -> DVector<f64> {
    let k = design.ncols();
    let mut score = DVector::zeros(k);
    for i in 0..design.nrows() {
        let p = expit(design.row(i).iter().zip(coef.iter()).map(|(a, b)| a * b).sum());
        let r = response[i] - p;
        for j in 0..k {
            score[j] += design[(i, j)] * r;
        }
    }
    score
}

/// Newton/IRLS logistic regression with step-halving on likelihood decrease.
///
/// Iterates until the score max-norm drops below `tol` (default 1e-10) or
/// `max_iter` (default 100). Coefficient blow-up past max-norm 1e3 is treated
/// as separation and reported as non-convergence.
pub fn fit_logistic_irls(
    design: &DMatrix<f64>,
    response: &[f64],
    max_iter: usize,
    tol: f64,
) -> Result<LogisticFit> {
    let (n, k) = design.shape();
    if response.len() != n {
        return Err(Error::DimensionMismatch("logistic response length".into()));
    }
    let ones = response.iter().filter(|&&y| y == 1.0).count();
    if ones == 0 || ones == n {
        return Err(Error::ClassAbsent);
    }

    let mut coef = DVector::<f64>::zeros(k);
    let mut ll = logistic_log_likelihood(design, response, &coef);
    let mut iterations = 0;
    loop {
        let score = logistic_score(design, response, &coef);
        if score.amax() < tol {
            return Ok(LogisticFit {
                coef,
                converged: true,
                iterations,
            });
        }
        if iterations >= max_iter {
            return Err(Error::LogisticNonConvergence {
                reason: format!(
                    "score max-norm {:.3e} after {max_iter} iterations",
                    score.amax()
                ),
            });
        }
        iterations += 1;

        // Observed-information Newton step.
        let mut info = DMatrix::<f64>::zeros(k, k);
        for i in 0..n {
            let eta: f64 = design.row(i).iter().zip(coef.iter()).map(|(a, b)| a * b).sum();
            let p = expit(eta);
            let w = (p * (1.0 - p)).max(1e-12);
            for a in 0..k {
                let da = design[(i, a)] * w;
                for b in a..k {
                    info[(a, b)] += da * design[(i, b)];
                }
            }
        }
        for a in 0..k {
            for b in 0..a {
                info[(a, b)] = info[(b, a)];
            }
        }
        let step = linalg::solve_spd(&info, &score).ok_or(Error::LogisticNonConvergence {
            reason: "singular information matrix".into(),
        })?;

        // Step-halving on likelihood decrease.
        let mut factor = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let candidate = &coef + &step * factor;
            let cand_ll = logistic_log_likelihood(design, response, &candidate);
            if cand_ll >= ll - 1e-12 {
                coef = candidate;
                ll = cand_ll;
                accepted = true;
                break;
            }
            factor *= 0.5;
        }
        if !accepted {
            return Err(Error::LogisticNonConvergence {
                reason: "step-halving failed to improve the likelihood".into(),
            });
        }
        if coef.amax() > 1e3 {
            return Err(Error::LogisticNonConvergence {
                reason: format!("separation detected: coefficient max-norm {:.3e}", coef.amax()),
            });
        }
    }
}

impl LogisticFit {
    pub fn predict_matrix(&self, design: &DMatrix<f64>) -> Result<Vec<f64>> {
        if design.ncols() != self.coef.len() {
            return Err(Error::ColumnCountMismatch {
                expected: self.coef.len(),
                got: design.ncols(),
            });
        }
        Ok((design * &self.coef).iter().map(|&t| expit(t)).collect())
    }

    pub fn predict_row(&self, row: &[f64]) -> f64 {
        expit(row.iter().zip(self.coef.iter()).map(|(a, b)| a * b).sum())
    }
}

// ---------------------------------------------------------------------------
// Cross-validated regularization selection
// ---------------------------------------------------------------------------

/// A moment problem whose ridge weight is selected by cross validation.
///
/// `fit` estimates parameters on the training rows at the given lambda;
/// `violation` evaluates the squared norm of the held-out sample moments at
/// those parameters.
pub trait CvMomentProblem {
    fn n_rows(&self) -> usize;
    fn fit(&self, train_rows: &[usize], lambda: f64) -> Result<Vec<f64>>;
    fn violation(&self, test_rows: &[usize], params: &[f64]) -> f64;
}

/// Picks the ridge weight minimizing the mean held-out moment-violation norm
/// over `k_folds` folds. Ties break toward the largest lambda among the
/// minimizers; fold assignment is deterministic in `seed`. Grid duplicates
/// are removed before the search. Folds where the fit fails are skipped; a
/// lambda with no surviving fold is discarded, and if every lambda is
/// discarded an error is returned.
pub fn select_lambda_cv(
    problem: &impl CvMomentProblem,
    grid: &[f64],
    k_folds: usize,
    seed: u64,
) -> Result<f64> {
    if grid.is_empty() {
        return Err(Error::CvEmptyGrid);
    }
    let mut grid: Vec<f64> = grid.to_vec();
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    let n = problem.n_rows();
    let k_folds = k_folds.min(n).max(2);

    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = StreamKey::new(seed, 0, 0xCF).rng();
    order.shuffle(&mut rng);
    let folds: Vec<Vec<usize>> = (0..k_folds)
        .map(|f| {
            let mut fold: Vec<usize> = order
                .iter()
                .enumerate()
                .filter(|(pos, _)| pos % k_folds == f)
                .map(|(_, &i)| i)
                .collect();
            fold.sort_unstable();
            fold
        })
        .collect();

    let mut best: Option<(f64, f64)> = None; // (criterion, lambda)
    for &lambda in &grid {
        let mut total = 0.0;
        let mut used = 0usize;
        for fold in &folds {
            let train: Vec<usize> = {
                let mut t: Vec<usize> = (0..n).filter(|i| !fold.contains(i)).collect();
                t.sort_unstable();
                t
            };
            match problem.fit(&train, lambda) {
                Ok(params) => {
                    total += problem.violation(fold, &params);
                    used += 1;
                }
                Err(_) => continue,
            }
        }
        if used == 0 {
            continue;
        }
        let criterion = total / used as f64;
        best = match best {
            None => Some((criterion, lambda)),
            Some((c, l)) => {
                if criterion < c || (criterion == c && lambda > l) {
                    Some((criterion, lambda))
                } else {
                    Some((c, l))
                }
            }
        };
    }
    best.map(|(_, l)| l).ok_or(Error::CvAllFoldsFailed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn identity_design_recovers_response() {
        let d = DMatrix::<f64>::identity(3, 3);
        let y = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let fit = fit_linear(&d, &y, None, 0.0, None).unwrap();
        assert_abs_diff_eq!(fit.coef[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(fit.coef[1], 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(fit.coef[2], 3.0, epsilon = 1e-12);
    }

    #[test]
    fn intercept_only_gives_mean_and_ridge_shrinks() {
        let d = DMatrix::from_element(4, 1, 1.0);
        let y = DVector::from_vec(vec![1.0, 1.0, 3.0, 3.0]);
        let fit = fit_linear(&d, &y, None, 0.0, None).unwrap();
        assert_abs_diff_eq!(fit.coef[0], 2.0, epsilon = 1e-12);
        // (D'D + lambda) beta = D'y  =>  (4 + 4) beta = 8
        let fit = fit_linear(&d, &y, None, 4.0, Some(&[1.0])).unwrap();
        assert_abs_diff_eq!(fit.coef[0], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn residuals_orthogonal_to_design() {
        let n = 40;
        let mut d = DMatrix::<f64>::zeros(n, 3);
        let mut y = DVector::<f64>::zeros(n);
        for i in 0..n {
            let t = i as f64 / n as f64;
            d[(i, 0)] = 1.0;
            d[(i, 1)] = t;
            d[(i, 2)] = (5.0 * t).sin();
            y[i] = 2.0 - t + 0.3 * (5.0 * t).sin() + ((i * 2654435761) % 97) as f64 / 97.0;
        }
        let fit = fit_linear(&d, &y, None, 0.0, None).unwrap();
        let resid = &y - &d * &fit.coef;
        let dtr = d.transpose() * resid;
        assert!(dtr.amax() / (n as f64) < 1e-8);
    }

    #[test]
    fn weighted_fit_with_unit_weights_matches_unweighted() {
        let d = DMatrix::from_row_slice(4, 2, &[1.0, 0.5, 1.0, 1.5, 1.0, 2.5, 1.0, 3.5]);
        let y = DVector::from_vec(vec![0.9, 2.1, 2.9, 4.2]);
        let a = fit_linear(&d, &y, None, 0.0, None).unwrap();
        let b = fit_linear(&d, &y, Some(&[1.0; 4]), 0.0, None).unwrap();
        assert_eq!(a.coef, b.coef);
    }

    #[test]
    fn ridge_is_continuous_in_lambda() {
        let d = DMatrix::from_row_slice(4, 2, &[1.0, 0.5, 1.0, 1.5, 1.0, 2.5, 1.0, 3.5]);
        let y = DVector::from_vec(vec![0.9, 2.1, 2.9, 4.2]);
        let a = fit_linear(&d, &y, None, 0.0, None).unwrap();
        let b = fit_linear(&d, &y, None, 1e-12, None).unwrap();
        for j in 0..2 {
            assert_abs_diff_eq!(a.coef[j], b.coef[j], epsilon = 1e-6);
        }
    }

    #[test]
    fn rank_deficiency_names_columns() {
        // Column 2 duplicates column 1.
        let d = DMatrix::from_row_slice(3, 3, &[1.0, 2.0, 2.0, 1.0, 3.0, 3.0, 1.0, 5.0, 5.0]);
        let y = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let err = fit_linear(&d, &y, None, 0.0, None).unwrap_err();
        match err {
            Error::RankDeficient { columns } => assert!(columns.contains(&2)),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn logistic_intercept_only_is_logit_of_mean() {
        let d = DMatrix::from_element(4, 1, 1.0);
        let y = vec![1.0, 1.0, 1.0, 0.0];
        let fit = fit_logistic_irls(&d, &y, 100, 1e-10).unwrap();
        assert!(fit.converged);
        assert_abs_diff_eq!(fit.coef[0], 3.0_f64.ln(), epsilon = 1e-8);
        assert_abs_diff_eq!(fit.predict_row(&[1.0]), 0.75, epsilon = 1e-8);
    }

    #[test]
    fn logistic_all_equal_response_errors() {
        let d = DMatrix::from_element(4, 1, 1.0);
        let err = fit_logistic_irls(&d, &[1.0; 4], 100, 1e-10).unwrap_err();
        assert!(matches!(err, Error::ClassAbsent));
    }

    #[test]
    fn logistic_symmetric_design_has_zero_intercept() {
        // (x, -x) pairs with flipped labels; the mixed pairs keep the two
        // classes overlapping so the likelihood has an interior maximum.
        let pairs = [(0.3, 1.0), (0.9, 1.0), (0.6, 0.0), (1.4, 0.0)];
        let mut d = DMatrix::<f64>::zeros(8, 2);
        let mut y = Vec::new();
        for (i, &(x, label)) in pairs.iter().enumerate() {
            d[(2 * i, 0)] = 1.0;
            d[(2 * i, 1)] = x;
            y.push(label);
            d[(2 * i + 1, 0)] = 1.0;
            d[(2 * i + 1, 1)] = -x;
            y.push(1.0 - label);
        }
        let fit = fit_logistic_irls(&d, &y, 100, 1e-10).unwrap();
        assert!(fit.coef[0].abs() < 1e-8, "intercept {}", fit.coef[0]);
    }

    #[test]
    fn logistic_score_matches_finite_differences() {
        let d = DMatrix::from_row_slice(
            6,
            2,
            &[1.0, -1.0, 1.0, -0.4, 1.0, 0.1, 1.0, 0.6, 1.0, 1.3, 1.0, 2.0],
        );
        let y = vec![0.0, 0.0, 1.0, 0.0, 1.0, 1.0];
        // Check away from the optimum where the score is O(1).
        let coef = DVector::from_vec(vec![0.3, -0.7]);
        let analytic = logistic_score(&d, &y, &coef);
        let h = 1e-6;
        for j in 0..2 {
            let mut cp = coef.clone();
            let mut cm = coef.clone();
            cp[j] += h;
            cm[j] -= h;
            let fd = (logistic_log_likelihood(&d, &y, &cp) - logistic_log_likelihood(&d, &y, &cm))
                / (2.0 * h);
            let rel = (analytic[j] - fd).abs() / fd.abs().max(1e-8);
            assert!(rel < 1e-4, "component {j}: analytic {} fd {fd}", analytic[j]);
        }
        // And at the solution both are below the convergence tolerance.
        let fit = fit_logistic_irls(&d, &y, 100, 1e-10).unwrap();
        let score = logistic_score(&d, &y, &fit.coef);
        assert!(score.amax() < 1e-8);
    }

    struct ToyProblem {
        xs: Vec<f64>,
        ys: Vec<f64>,
    }

    // One-parameter ridge mean problem: moment = mean(y - m).
    impl CvMomentProblem for ToyProblem {
        fn n_rows(&self) -> usize {
            self.xs.len()
        }
        fn fit(&self, rows: &[usize], lambda: f64) -> Result<Vec<f64>> {
            let sum: f64 = rows.iter().map(|&i| self.ys[i]).sum();
            Ok(vec![sum / (rows.len() as f64 + lambda)])
        }
        fn violation(&self, rows: &[usize], params: &[f64]) -> f64 {
            let m: f64 =
                rows.iter().map(|&i| self.ys[i] - params[0]).sum::<f64>() / rows.len() as f64;
            m * m
        }
    }

    #[test]
    fn cv_single_grid_point_returned_and_dupes_deduped() {
        let p = ToyProblem {
            xs: (0..40).map(|i| i as f64).collect(),
            ys: (0..40).map(|i| (i % 5) as f64).collect(),
        };
        assert_eq!(select_lambda_cv(&p, &[0.25], 10, 1).unwrap(), 0.25);
        let l = select_lambda_cv(&p, &[0.1, 0.1, 0.1], 10, 1).unwrap();
        assert_eq!(l, 0.1);
    }

    #[test]
    fn cv_fold_assignment_deterministic_in_seed() {
        let p = ToyProblem {
            xs: (0..60).map(|i| i as f64).collect(),
            ys: (0..60).map(|i| ((i * 7) % 11) as f64).collect(),
        };
        let a = select_lambda_cv(&p, &[0.0, 0.5, 2.0], 10, 42).unwrap();
        let b = select_lambda_cv(&p, &[0.0, 0.5, 2.0], 10, 42).unwrap();
        assert_eq!(a, b);
    }
}
