//! Bridge-function fitting by the generalized method of moments.
//!
//! The outcome bridge `h(W,X)` solves the moment restriction that the
//! transformed outcome minus `h` is orthogonal to an instrument `b(Z,X)` on
//! the source trial; the trial bridge `q(Z,X)` matches source-trial mass,
//! reweighted by `q`, against target-trial mass under an instrument `c(W,X)`.
//! Linear-in-parameter systems are solved in closed form; the exp-linear
//! trial bridge is fit by damped Gauss-Newton (Levenberg-Marquardt). Both
//! fits accept an optional ridge penalty that conventionally leaves the
//! intercept unpenalized.

use nalgebra::{DMatrix, DVector};

use crate::data::{Dataset, FittedBasis};
use crate::error::Error;
use crate::linalg;
use crate::Result;

/// Exponent clip bound for exp-linear bridge evaluation.
pub const EXP_CLIP: f64 = 50.0;

/// Functional form of a bridge.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BridgeForm {
    Linear,
    ExpLinear,
}

/// Which moment restriction the bridge solves.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BridgeTarget {
    OutcomeBridgeH,
    TrialBridgeQ,
}

/// Solver diagnostics recorded with every fit.
#[derive(Debug, Clone, Default)]
pub struct BridgeDiagnostics {
    pub converged: bool,
    pub iterations: usize,
    pub grad_norm: f64,
    /// Exponent hit the clip bound during fitting or evaluation.
    pub clipped: bool,
    /// Jacobian condition number at the solution exceeded 1e8.
    pub near_singular: bool,
    pub condition: f64,
    /// Objective at each accepted step (exp-linear fits only).
    pub objective_path: Vec<f64>,
}

/// A fitted bridge function: coefficients plus the basis they apply to.
#[derive(Debug, Clone)]
pub struct BridgeModel {
    pub form: BridgeForm,
    pub coef: DVector<f64>,
    pub basis: FittedBasis,
    pub target: BridgeTarget,
    pub diagnostics: BridgeDiagnostics,
}

impl BridgeModel {
    /// Evaluates the bridge at one row.
    pub fn eval_row(&self, ds: &Dataset, i: usize, buf: &mut Vec<f64>) -> Result<f64> {
        self.basis.eval_row(ds, i, buf)?;
        let lin: f64 = buf.iter().zip(self.coef.iter()).map(|(a, b)| a * b).sum();
        Ok(match self.form {
            BridgeForm::Linear => lin,
            BridgeForm::ExpLinear => lin.clamp(-EXP_CLIP, EXP_CLIP).exp(),
        })
    }

    /// Evaluates the bridge over `rows`, counting exponent clips.
    pub fn eval_rows_counting(&self, ds: &Dataset, rows: &[usize]) -> Result<(Vec<f64>, usize)> {
        let mut buf = Vec::with_capacity(self.basis.ncols());
        let mut out = Vec::with_capacity(rows.len());
        let mut clips = 0usize;
        for &i in rows {
            self.basis.eval_row(ds, i, &mut buf)?;
            let lin: f64 = buf.iter().zip(self.coef.iter()).map(|(a, b)| a * b).sum();
            out.push(match self.form {
                BridgeForm::Linear => lin,
                BridgeForm::ExpLinear => {
                    if lin.abs() > EXP_CLIP {
                        clips += 1;
                    }
                    lin.clamp(-EXP_CLIP, EXP_CLIP).exp()
                }
            });
        }
        Ok((out, clips))
    }

    pub fn eval_rows(&self, ds: &Dataset, rows: &[usize]) -> Result<Vec<f64>> {
        self.eval_rows_counting(ds, rows).map(|(v, _)| v)
    }

    /// Evaluates over all rows in order.
    pub fn eval_all(&self, ds: &Dataset) -> Result<Vec<f64>> {
        let rows: Vec<usize> = (0..ds.n_rows()).collect();
        self.eval_rows(ds, &rows)
    }
}

/// Evaluates a bridge model at a single row (basis inputs must be present).
pub fn eval_bridge(model: &BridgeModel, ds: &Dataset, row: usize) -> Result<f64> {
    let mut buf = Vec::new();
    model.eval_row(ds, row, &mut buf)
}

/// Transformed outcome (2A - 1) Y / e(A | X).
pub fn transformed_outcome(y: f64, a: i8, e1: f64) -> f64 {
    let a = f64::from(a);
    (2.0 * a - 1.0) * y / (a * e1 + (1.0 - a) * (1.0 - e1))
}

/// Ridge penalty: weight and per-coefficient mask (0 = unpenalized).
#[derive(Debug, Clone)]
pub struct Ridge {
    pub lambda: f64,
    pub mask: Vec<f64>,
}

impl Ridge {
    pub fn none() -> Self {
        Self {
            lambda: 0.0,
            mask: Vec::new(),
        }
    }

    /// Identity penalty with the first (intercept) entry zeroed.
    pub fn intercept_free(lambda: f64, k: usize) -> Self {
        let mut mask = vec![1.0; k];
        if k > 0 {
            mask[0] = 0.0;
        }
        Self { lambda, mask }
    }

    fn mask_for(&self, k: usize) -> Vec<f64> {
        if self.mask.is_empty() {
            vec![1.0; k]
        } else {
            self.mask.clone()
        }
    }
}

/// Per-row pseudo-outcome of the missing-at-random moment function:
/// `(2A-1)/e(A|X) * Delta/pi * (Y - mu_obs) + mu1 - mu0`.
pub fn mar_pseudo_outcome(
    ds: &Dataset,
    i: usize,
    pi: f64,
    mu1: f64,
    mu0: f64,
    mu_obs: f64,
) -> f64 {
    let a = f64::from(ds.a(i).unwrap_or(0));
    let e = ds.e1(i);
    let ipw = if ds.delta(i) == 1 {
        let y = ds.y(i).unwrap_or(0.0);
        (2.0 * a - 1.0) / (a * e + (1.0 - a) * (1.0 - e)) * (y - mu_obs) / pi
    } else {
        0.0
    };
    ipw + mu1 - mu0
}

/// Nuisance inputs for the MAR bridge fit, row-aligned to the full dataset.
#[derive(Debug, Clone)]
pub struct MarNuisance<'a> {
    pub pi: &'a [f64],
    pub mu1: &'a [f64],
    pub mu0: &'a [f64],
    pub mu_obs: &'a [f64],
}

/// Fitting mode for the outcome bridge.
pub enum OutcomeBridgeMode<'a> {
    /// Complete-outcome moments on source rows with delta = 1.
    CompleteData,
    /// Moments built from the MAR moment function on all source rows.
    Mar(MarNuisance<'a>),
}

/// Sample moments of the outcome bridge: average over the fitting rows of
/// `b(Z,X) * (target - h_eta(W,X))`. Affine in eta for the linear form.
pub fn h_moments(
    ds: &Dataset,
    eta: &DVector<f64>,
    basis: &FittedBasis,
    instrument: &FittedBasis,
) -> Result<DVector<f64>> {
    let rows = complete_source_rows(ds);
    h_moments_on(ds, &rows, eta, basis, instrument, &OutcomeBridgeMode::CompleteData)
}

/// As [`h_moments`] but over explicit rows and an explicit mode.
pub fn h_moments_on(
    ds: &Dataset,
    rows: &[usize],
    eta: &DVector<f64>,
    basis: &FittedBasis,
    instrument: &FittedBasis,
    mode: &OutcomeBridgeMode,
) -> Result<DVector<f64>> {
    let m = instrument.ncols();
    let mut acc = DVector::<f64>::zeros(m);
    let mut cbuf = Vec::new();
    let mut bbuf = Vec::new();
    for &i in rows {
        basis.eval_row(ds, i, &mut cbuf)?;
        instrument.eval_row(ds, i, &mut bbuf)?;
        let target = outcome_target(ds, i, mode)?;
        let h: f64 = cbuf.iter().zip(eta.iter()).map(|(a, b)| a * b).sum();
        let r = target - h;
        for (j, b) in bbuf.iter().enumerate() {
            acc[j] += b * r;
        }
    }
    Ok(acc / rows.len().max(1) as f64)
}

/// Sample moments of the trial bridge: average over all rows of
/// `c(W,X) * (S q_xi(Z,X) - (1 - S))`.
pub fn q_moments(
    ds: &Dataset,
    xi: &DVector<f64>,
    form: BridgeForm,
    basis: &FittedBasis,
    instrument: &FittedBasis,
) -> Result<DVector<f64>> {
    let rows: Vec<usize> = (0..ds.n_rows()).collect();
    q_moments_on(ds, &rows, xi, form, basis, instrument)
}

/// As [`q_moments`] but over explicit rows.
pub fn q_moments_on(
    ds: &Dataset,
    rows: &[usize],
    xi: &DVector<f64>,
    form: BridgeForm,
    basis: &FittedBasis,
    instrument: &FittedBasis,
) -> Result<DVector<f64>> {
    let m = instrument.ncols();
    let mut acc = DVector::<f64>::zeros(m);
    let mut cbuf = Vec::new();
    let mut bbuf = Vec::new();
    for &i in rows {
        instrument.eval_row(ds, i, &mut cbuf)?;
        let factor = if ds.is_source(i) {
            basis.eval_row(ds, i, &mut bbuf)?;
            let lin: f64 = bbuf.iter().zip(xi.iter()).map(|(a, b)| a * b).sum();
            match form {
                BridgeForm::Linear => lin,
                BridgeForm::ExpLinear => lin.clamp(-EXP_CLIP, EXP_CLIP).exp(),
            }
        } else {
            -1.0
        };
        for (j, c) in cbuf.iter().enumerate() {
            acc[j] += c * factor;
        }
    }
    Ok(acc / rows.len().max(1) as f64)
}

fn outcome_target(ds: &Dataset, i: usize, mode: &OutcomeBridgeMode) -> Result<f64> {
    match mode {
        OutcomeBridgeMode::CompleteData => ds
            .ytilde(i)
            .ok_or_else(|| Error::Config(format!("row {i} lacks a complete outcome"))),
        OutcomeBridgeMode::Mar(nu) => {
            if nu.pi[i] <= 0.0 {
                return Err(Error::NonPositivePi(nu.pi[i]));
            }
            Ok(mar_pseudo_outcome(
                ds, i, nu.pi[i], nu.mu1[i], nu.mu0[i], nu.mu_obs[i],
            ))
        }
    }
}

/// Source rows with an observed outcome.
pub fn complete_source_rows(ds: &Dataset) -> Vec<usize> {
    (0..ds.n_rows())
        .filter(|&i| ds.is_source(i) && ds.delta(i) == 1)
        .collect()
}

/// Fits the outcome bridge `h` (linear form) by GMM.
///
/// Both modes are linear-in-eta moment systems: the stacked normal equations
/// `(G'G + lambda D) eta = G'g` are solved in closed form, or `G eta = g`
/// directly when the system is exactly identified and unridged.
pub fn fit_outcome_bridge(
    ds: &Dataset,
    basis: &FittedBasis,
    instrument: &FittedBasis,
    ridge: &Ridge,
    mode: OutcomeBridgeMode<'_>,
) -> Result<BridgeModel> {
    let rows = match mode {
        OutcomeBridgeMode::CompleteData => complete_source_rows(ds),
        OutcomeBridgeMode::Mar(_) => ds.source_rows(),
    };
    fit_outcome_bridge_on(ds, &rows, basis, instrument, ridge, &mode)
}

/// As [`fit_outcome_bridge`] over explicit fitting rows (used by CV folds).
pub fn fit_outcome_bridge_on(
    ds: &Dataset,
    rows: &[usize],
    basis: &FittedBasis,
    instrument: &FittedBasis,
    ridge: &Ridge,
    mode: &OutcomeBridgeMode<'_>,
) -> Result<BridgeModel> {
    if rows.is_empty() {
        return Err(Error::NoSourceRows);
    }
    let k = basis.ncols();
    let m = instrument.ncols();
    if m < k {
        return Err(Error::DimensionMismatch(format!(
            "instrument dimension {m} below parameter dimension {k}"
        )));
    }
    let n = rows.len() as f64;
    let mut g_mat = DMatrix::<f64>::zeros(m, k);
    let mut g_vec = DVector::<f64>::zeros(m);
    let mut cbuf = Vec::new();
    let mut bbuf = Vec::new();
    for &i in rows {
        basis.eval_row(ds, i, &mut cbuf)?;
        instrument.eval_row(ds, i, &mut bbuf)?;
        let target = outcome_target(ds, i, mode)?;
        for (r, b) in bbuf.iter().enumerate() {
            g_vec[r] += b * target / n;
            for (c, cv) in cbuf.iter().enumerate() {
                g_mat[(r, c)] += b * cv / n;
            }
        }
    }
    let coef = solve_affine_moments(&g_mat, &g_vec, ridge)?;
    let condition = linalg::condition_number(&g_mat);
    Ok(BridgeModel {
        form: BridgeForm::Linear,
        coef,
        basis: basis.clone(),
        target: BridgeTarget::OutcomeBridgeH,
        diagnostics: BridgeDiagnostics {
            converged: true,
            condition,
            near_singular: condition > 1e8,
            ..Default::default()
        },
    })
}

/// Fits the trial bridge `q` by GMM.
///
/// The linear form reduces to one linear solve. The exp-linear form runs
/// Levenberg-Marquardt from `init` (zero when absent): damping starts at
/// 1e-3, multiplied by 10 on a rejected step and divided by 10 on an
/// accepted one; iteration stops when the objective gradient max-norm drops
/// below 1e-10 or after 500 iterations, in which case the model is returned
/// with non-convergence diagnostics.
pub fn fit_trial_bridge(
    ds: &Dataset,
    form: BridgeForm,
    basis: &FittedBasis,
    instrument: &FittedBasis,
    ridge: &Ridge,
    init: Option<&DVector<f64>>,
) -> Result<BridgeModel> {
    let rows: Vec<usize> = (0..ds.n_rows()).collect();
    fit_trial_bridge_on(ds, &rows, form, basis, instrument, ridge, init)
}

/// As [`fit_trial_bridge`] over explicit fitting rows (used by CV folds).
pub fn fit_trial_bridge_on(
    ds: &Dataset,
    rows: &[usize],
    form: BridgeForm,
    basis: &FittedBasis,
    instrument: &FittedBasis,
    ridge: &Ridge,
    init: Option<&DVector<f64>>,
) -> Result<BridgeModel> {
    let k = basis.ncols();
    let m = instrument.ncols();
    if m < k {
        return Err(Error::DimensionMismatch(format!(
            "instrument dimension {m} below parameter dimension {k}"
        )));
    }
    match form {
        BridgeForm::Linear => fit_trial_bridge_linear(ds, rows, basis, instrument, ridge),
        BridgeForm::ExpLinear => fit_trial_bridge_lm(ds, rows, basis, instrument, ridge, init),
    }
}

fn fit_trial_bridge_linear(
    ds: &Dataset,
    rows: &[usize],
    basis: &FittedBasis,
    instrument: &FittedBasis,
    ridge: &Ridge,
) -> Result<BridgeModel> {
    let k = basis.ncols();
    let m = instrument.ncols();
    let n = rows.len() as f64;
    let mut g_mat = DMatrix::<f64>::zeros(m, k);
    let mut g_vec = DVector::<f64>::zeros(m);
    let mut cbuf = Vec::new();
    let mut bbuf = Vec::new();
    for &i in rows {
        instrument.eval_row(ds, i, &mut cbuf)?;
        if ds.is_source(i) {
            basis.eval_row(ds, i, &mut bbuf)?;
            for (r, c) in cbuf.iter().enumerate() {
                for (j, b) in bbuf.iter().enumerate() {
                    g_mat[(r, j)] += c * b / n;
                }
            }
        } else {
            for (r, c) in cbuf.iter().enumerate() {
                g_vec[r] += c / n;
            }
        }
    }
    let coef = solve_affine_moments(&g_mat, &g_vec, ridge)?;
    let condition = linalg::condition_number(&g_mat);
    Ok(BridgeModel {
        form: BridgeForm::Linear,
        coef,
        basis: basis.clone(),
        target: BridgeTarget::TrialBridgeQ,
        diagnostics: BridgeDiagnostics {
            converged: true,
            condition,
            near_singular: condition > 1e8,
            ..Default::default()
        },
    })
}

/// Moment residual and objective for the exp-linear trial bridge at `xi`.
/// Exposed for gradient checks against finite differences.
pub fn trial_bridge_objective(
    ds: &Dataset,
    rows: &[usize],
    basis: &FittedBasis,
    instrument: &FittedBasis,
    ridge: &Ridge,
    xi: &DVector<f64>,
) -> Result<(f64, DVector<f64>)> {
    let work = LmWorkspace::build(ds, rows, basis, instrument)?;
    let mask = ridge.mask_for(xi.len());
    let (residual, jac, _) = work.residual_and_jacobian(xi);
    let objective = residual.norm_squared()
        + ridge.lambda * xi.iter().zip(&mask).map(|(v, m)| v * v * m).sum::<f64>();
    let mut grad = jac.transpose() * &residual * 2.0;
    for j in 0..xi.len() {
        grad[j] += 2.0 * ridge.lambda * mask[j] * xi[j];
    }
    Ok((objective, grad))
}

struct LmWorkspace {
    b_src: DMatrix<f64>,
    c_src: DMatrix<f64>,
    /// Mean over all rows of (1 - S) c_i.
    target_term: DVector<f64>,
    n_total: f64,
}

impl LmWorkspace {
    fn build(
        ds: &Dataset,
        rows: &[usize],
        basis: &FittedBasis,
        instrument: &FittedBasis,
    ) -> Result<Self> {
        let src: Vec<usize> = rows.iter().copied().filter(|&i| ds.is_source(i)).collect();
        let n_total = rows.len() as f64;
        let b_src = basis.eval_rows(ds, &src)?;
        let c_src = instrument.eval_rows(ds, &src)?;
        let mut target_term = DVector::<f64>::zeros(instrument.ncols());
        let mut cbuf = Vec::new();
        for &i in rows {
            if !ds.is_source(i) {
                instrument.eval_row(ds, i, &mut cbuf)?;
                for (j, c) in cbuf.iter().enumerate() {
                    target_term[j] += c / n_total;
                }
            }
        }
        Ok(Self {
            b_src,
            c_src,
            target_term,
            n_total,
        })
    }

    /// Returns (residual m-vector, Jacobian m x k, clip flag).
    fn residual_and_jacobian(&self, xi: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>, bool) {
        let m = self.c_src.ncols();
        let k = self.b_src.ncols();
        let n1 = self.b_src.nrows();
        let mut residual = -self.target_term.clone();
        let mut jac = DMatrix::<f64>::zeros(m, k);
        let mut clipped = false;
        for i in 0..n1 {
            let mut u: f64 = 0.0;
            for j in 0..k {
                u += self.b_src[(i, j)] * xi[j];
            }
            if u.abs() > EXP_CLIP {
                clipped = true;
                u = u.clamp(-EXP_CLIP, EXP_CLIP);
            }
            let q = u.exp();
            for r in 0..m {
                let c = self.c_src[(i, r)] / self.n_total;
                residual[r] += c * q;
                let cq = c * q;
                for j in 0..k {
                    jac[(r, j)] += cq * self.b_src[(i, j)];
                }
            }
        }
        (residual, jac, clipped)
    }

    fn residual_only(&self, xi: &DVector<f64>) -> (DVector<f64>, bool) {
        let m = self.c_src.ncols();
        let k = self.b_src.ncols();
        let n1 = self.b_src.nrows();
        let mut residual = -self.target_term.clone();
        let mut clipped = false;
        for i in 0..n1 {
            let mut u: f64 = 0.0;
            for j in 0..k {
                u += self.b_src[(i, j)] * xi[j];
            }
            if u.abs() > EXP_CLIP {
                clipped = true;
                u = u.clamp(-EXP_CLIP, EXP_CLIP);
            }
            let q = u.exp();
            for r in 0..m {
                residual[r] += self.c_src[(i, r)] * q / self.n_total;
            }
        }
        (residual, clipped)
    }
}

fn fit_trial_bridge_lm(
    ds: &Dataset,
    rows: &[usize],
    basis: &FittedBasis,
    instrument: &FittedBasis,
    ridge: &Ridge,
    init: Option<&DVector<f64>>,
) -> Result<BridgeModel> {
    let k = basis.ncols();
    let mask = ridge.mask_for(k);
    let work = LmWorkspace::build(ds, rows, basis, instrument)?;

    let mut xi = init.cloned().unwrap_or_else(|| DVector::zeros(k));
    let penalty = |v: &DVector<f64>| -> f64 {
        ridge.lambda * v.iter().zip(&mask).map(|(a, m)| a * a * m).sum::<f64>()
    };
    let (mut residual, mut jac, mut any_clip) = work.residual_and_jacobian(&xi);
    let mut objective = residual.norm_squared() + penalty(&xi);
    let mut path = vec![objective];

    let mut nu = 1e-3;
    let mut iterations = 0usize;
    let max_iter = 500;
    let mut grad_norm = f64::INFINITY;
    let mut converged = false;

    while iterations < max_iter {
        let mut grad = jac.transpose() * &residual * 2.0;
        for j in 0..k {
            grad[j] += 2.0 * ridge.lambda * mask[j] * xi[j];
        }
        grad_norm = grad.amax();
        if grad_norm < 1e-10 {
            converged = true;
            break;
        }

        // (J'J + lambda D + nu I) delta = -(J'R + lambda D xi)
        let jtj = jac.transpose() * &jac;
        let mut rhs = jac.transpose() * &residual;
        for j in 0..k {
            rhs[j] += ridge.lambda * mask[j] * xi[j];
        }
        rhs.neg_mut();

        let mut accepted = false;
        while nu < 1e12 {
            let mut lhs = jtj.clone();
            for j in 0..k {
                lhs[(j, j)] += ridge.lambda * mask[j] + nu;
            }
            if let Some(delta) = linalg::solve_spd(&lhs, &rhs) {
                let candidate = &xi + &delta;
                let (cand_res, clip) = work.residual_only(&candidate);
                let cand_obj = cand_res.norm_squared() + penalty(&candidate);
                if cand_obj.is_finite() && cand_obj < objective {
                    xi = candidate;
                    any_clip |= clip;
                    objective = cand_obj;
                    path.push(objective);
                    nu = (nu / 10.0).max(1e-15);
                    accepted = true;
                    break;
                }
            }
            nu *= 10.0;
        }
        iterations += 1;
        if !accepted {
            break; // damping exhausted; report current point
        }
        let (r, j2, clip) = work.residual_and_jacobian(&xi);
        residual = r;
        jac = j2;
        any_clip |= clip;
    }

    let condition = linalg::condition_number(&jac);
    Ok(BridgeModel {
        form: BridgeForm::ExpLinear,
        coef: xi,
        basis: basis.clone(),
        target: BridgeTarget::TrialBridgeQ,
        diagnostics: BridgeDiagnostics {
            converged,
            iterations,
            grad_norm,
            clipped: any_clip,
            near_singular: condition > 1e8,
            condition,
            objective_path: path,
        },
    })
}

/// Solves `min ||g - G p||^2 + lambda p' D p`; exactly identified unridged
/// systems use a direct LU solve of `G p = g`.
fn solve_affine_moments(
    g_mat: &DMatrix<f64>,
    g_vec: &DVector<f64>,
    ridge: &Ridge,
) -> Result<DVector<f64>> {
    let (m, k) = g_mat.shape();
    let mask = ridge.mask_for(k);
    if ridge.lambda == 0.0 && m == k {
        if let Some(sol) = linalg::solve_square(g_mat, g_vec) {
            if sol.iter().all(|v| v.is_finite()) {
                return Ok(sol);
            }
        }
        return Err(Error::MomentRankDeficient);
    }
    let mut normal = g_mat.transpose() * g_mat;
    for j in 0..k {
        normal[(j, j)] += ridge.lambda * mask[j];
    }
    let rhs = g_mat.transpose() * g_vec;
    match linalg::solve_spd(&normal, &rhs) {
        Some(sol) if sol.iter().all(|v| v.is_finite()) => Ok(sol),
        _ => Err(Error::MomentRankDeficient),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{BasisSpec, Block};
    use approx::assert_abs_diff_eq;

    #[test]
    fn transformed_outcome_matches_hand_values() {
        assert_abs_diff_eq!(transformed_outcome(3.0, 1, 0.5), 6.0);
        assert_abs_diff_eq!(transformed_outcome(3.0, 0, 0.5), -6.0);
        assert_abs_diff_eq!(transformed_outcome(1.0, 1, 0.25), 4.0);
    }

    fn tiny_dataset() -> Dataset {
        // 4 source rows + 2 target rows, scalar proxies.
        Dataset::from_parts(
            vec![1, 1, 1, 1, 0, 0],
            vec![Some(1), Some(0), Some(1), Some(0), None, None],
            vec![1; 6],
            vec![Some(2.0), Some(1.0), Some(0.5), Some(-1.0), None, None],
            Block::new(
                vec!["x_1".into()],
                vec![0.2, 0.4, 0.6, 0.8, 0.3, 0.5],
            ),
            Block::new(
                vec!["w_1".into()],
                vec![0.1, -0.2, 0.4, 0.3, 0.2, -0.1],
            ),
            Block::new(
                vec!["z_1".into()],
                vec![0.5, 0.1, -0.3, 0.2, 0.0, 0.0],
            ),
            vec![true, true, true, true, false, false],
            vec![0.5; 6],
        )
        .unwrap()
    }

    fn bases(ds: &Dataset) -> (FittedBasis, FittedBasis, FittedBasis) {
        let rows: Vec<usize> = (0..ds.n_rows()).collect();
        let c = FittedBasis::fit(ds, &BasisSpec::linear_wc(), &rows).unwrap();
        let b = FittedBasis::fit(ds, &BasisSpec::linear_zb(), &rows).unwrap();
        let c3 = FittedBasis::fit(ds, &BasisSpec::cubed_wc(), &rows).unwrap();
        (c, b, c3)
    }

    #[test]
    fn h_moments_zero_at_interpolating_eta_and_reduce_at_zero() {
        let ds = tiny_dataset();
        let (c, b, _) = bases(&ds);
        // eta = 0: moments reduce to the sample average of b * ytilde.
        let eta0 = DVector::zeros(3);
        let m0 = h_moments(&ds, &eta0, &c, &b).unwrap();
        let rows = complete_source_rows(&ds);
        let mut expect = DVector::zeros(3);
        let mut bbuf = Vec::new();
        for &i in &rows {
            b.eval_row(&ds, i, &mut bbuf).unwrap();
            let yt = ds.ytilde(i).unwrap();
            for (j, v) in bbuf.iter().enumerate() {
                expect[j] += v * yt / rows.len() as f64;
            }
        }
        for j in 0..3 {
            assert_abs_diff_eq!(m0[j], expect[j], epsilon = 1e-14);
        }
        // Single-row fit where h interpolates ytilde exactly: zero moments.
        let one = ds.subset(&[0, 4]);
        let rows1: Vec<usize> = (0..2).collect();
        let c1 = FittedBasis::fit(&one, &BasisSpec::linear_wc(), &rows1).unwrap();
        let b1 = FittedBasis::fit(&one, &BasisSpec::linear_zb(), &rows1).unwrap();
        // h(w, x) = ytilde(0) via intercept alone.
        let eta = DVector::from_vec(vec![one.ytilde(0).unwrap(), 0.0, 0.0]);
        let m = h_moments(&one, &eta, &c1, &b1).unwrap();
        assert!(m.amax() < 1e-12);
    }

    #[test]
    fn q_moments_balance_and_limit() {
        let ds = tiny_dataset();
        let (c, b, _) = bases(&ds);
        let _ = c;
        // alpha-hat = 1/3 here, so build a balanced subset: 2 source, 2 target.
        let bal = ds.subset(&[0, 1, 4, 5]);
        let rows: Vec<usize> = (0..4).collect();
        let b_bal = FittedBasis::fit(&bal, &BasisSpec::linear_zb(), &rows).unwrap();
        // Constant instrument: a 1-column basis is easiest to fake with the
        // cubed intercept of a degenerate design; use LinearWc and read the
        // intercept coordinate instead.
        let instr = FittedBasis::fit(&bal, &BasisSpec::linear_wc(), &rows).unwrap();
        // xi = 0 makes q identically 1 under the exp-linear form.
        let xi = DVector::zeros(3);
        let m = q_moments(&bal, &xi, BridgeForm::ExpLinear, &b_bal, &instr).unwrap();
        assert_abs_diff_eq!(m[0], 0.0, epsilon = 1e-14);
        // xi -> -inf direction: moments tend to -mean((1-S) instr).
        let xi_neg = DVector::from_vec(vec![-1e4, 0.0, 0.0]);
        let m_neg = q_moments(&bal, &xi_neg, BridgeForm::ExpLinear, &b_bal, &instr).unwrap();
        let mut expect = DVector::zeros(instr.ncols());
        let mut cbuf = Vec::new();
        for i in 0..4 {
            if !bal.is_source(i) {
                instr.eval_row(&bal, i, &mut cbuf).unwrap();
                for (j, v) in cbuf.iter().enumerate() {
                    expect[j] -= v / 4.0;
                }
            }
        }
        for j in 0..instr.ncols() {
            assert_abs_diff_eq!(m_neg[j], expect[j], epsilon = 1e-10);
        }
        let _ = b;
    }

    #[test]
    fn exactly_identified_fits_zero_their_moments() {
        let ds = tiny_dataset();
        let (c, b, c3) = bases(&ds);
        let h = fit_outcome_bridge(&ds, &c, &b, &Ridge::none(), OutcomeBridgeMode::CompleteData)
            .unwrap();
        let m = h_moments(&ds, &h.coef, &c, &b).unwrap();
        assert!(m.amax() < 1e-10, "h moments {:.3e}", m.amax());

        let q = fit_trial_bridge(&ds, BridgeForm::Linear, &b, &c3, &Ridge::none(), None).unwrap();
        let m = q_moments(&ds, &q.coef, BridgeForm::Linear, &b, &c3).unwrap();
        assert!(m.amax() < 1e-10, "q moments {:.3e}", m.amax());
    }

    #[test]
    fn mar_mode_with_unit_pi_zero_mu_equals_complete_data() {
        let ds = tiny_dataset();
        let (c, b, _) = bases(&ds);
        let n = ds.n_rows();
        let zeros = vec![0.0; n];
        let ones = vec![1.0; n];
        let mar = fit_outcome_bridge(
            &ds,
            &c,
            &b,
            &Ridge::none(),
            OutcomeBridgeMode::Mar(MarNuisance {
                pi: &ones,
                mu1: &zeros,
                mu0: &zeros,
                mu_obs: &zeros,
            }),
        )
        .unwrap();
        let complete =
            fit_outcome_bridge(&ds, &c, &b, &Ridge::none(), OutcomeBridgeMode::CompleteData)
                .unwrap();
        for j in 0..3 {
            assert_abs_diff_eq!(mar.coef[j], complete.coef[j], epsilon = 1e-12);
        }
    }

    #[test]
    fn ridge_continuity_near_zero() {
        let ds = tiny_dataset();
        let (c, b, _) = bases(&ds);
        let a = fit_outcome_bridge(&ds, &c, &b, &Ridge::none(), OutcomeBridgeMode::CompleteData)
            .unwrap();
        let r = Ridge::intercept_free(1e-13, 3);
        let b2 =
            fit_outcome_bridge(&ds, &c, &b, &r, OutcomeBridgeMode::CompleteData).unwrap();
        for j in 0..3 {
            assert_abs_diff_eq!(a.coef[j], b2.coef[j], epsilon = 1e-6);
        }
    }

    #[test]
    fn eval_bridge_forms() {
        let ds = tiny_dataset();
        let (c, b, _) = bases(&ds);
        let model = BridgeModel {
            form: BridgeForm::ExpLinear,
            coef: DVector::zeros(3),
            basis: b,
            target: BridgeTarget::TrialBridgeQ,
            diagnostics: BridgeDiagnostics::default(),
        };
        assert_abs_diff_eq!(eval_bridge(&model, &ds, 0).unwrap(), 1.0);
        let model = BridgeModel {
            form: BridgeForm::Linear,
            coef: DVector::from_vec(vec![1.0, 0.0, 0.0]),
            basis: c,
            target: BridgeTarget::OutcomeBridgeH,
            diagnostics: BridgeDiagnostics::default(),
        };
        assert_abs_diff_eq!(eval_bridge(&model, &ds, 0).unwrap(), 1.0);
    }

    #[test]
    fn lm_objective_monotone_and_gradient_matches_fd() {
        let ds = tiny_dataset();
        let (_, b, c3) = bases(&ds);
        let ridge = Ridge::intercept_free(1e-3, 3);
        let fit =
            fit_trial_bridge(&ds, BridgeForm::ExpLinear, &b, &c3, &ridge, None).unwrap();
        let path = &fit.diagnostics.objective_path;
        assert!(path.windows(2).all(|w| w[1] <= w[0] + 1e-15));

        // Gradient check away from the optimum.
        let rows: Vec<usize> = (0..ds.n_rows()).collect();
        let xi = DVector::from_vec(vec![0.2, -0.1, 0.3]);
        let (_, grad) = trial_bridge_objective(&ds, &rows, &b, &c3, &ridge, &xi).unwrap();
        let h = 1e-6;
        for j in 0..3 {
            let mut p = xi.clone();
            let mut m = xi.clone();
            p[j] += h;
            m[j] -= h;
            let (fp, _) = trial_bridge_objective(&ds, &rows, &b, &c3, &ridge, &p).unwrap();
            let (fm, _) = trial_bridge_objective(&ds, &rows, &b, &c3, &ridge, &m).unwrap();
            let fd = (fp - fm) / (2.0 * h);
            assert!(
                (grad[j] - fd).abs() <= 1e-4 * fd.abs().max(1e-6),
                "component {j}: {} vs {fd}",
                grad[j]
            );
        }
    }
}
