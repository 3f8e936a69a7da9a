//! Point estimators, influence-function standard errors, and confidence
//! intervals for the target contrast psi and the indirect comparison theta.
//!
//! All estimators are pure functions of the dataset and row-aligned nuisance
//! values (bridge evaluations, regression predictions). Sums accumulate in
//! fixed row order, so results do not depend on thread scheduling.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};

use crate::bridge::mar_pseudo_outcome;
use crate::data::Dataset;
use crate::error::Error;
use crate::linalg;
use crate::Result;

/// z-multiplier for 95% confidence intervals.
pub const Z95: f64 = 1.96;

/// Clip range for the trial-membership probability in odds weights.
pub const P_CLIP: f64 = 1e-6;

/// One estimate with its influence-function standard error.
#[derive(Debug, Clone)]
pub struct EstimateReport {
    pub estimand: String,
    pub point: f64,
    pub se: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub n_used: usize,
    pub diagnostics: BTreeMap<String, String>,
}

impl EstimateReport {
    pub fn new(estimand: impl Into<String>, point: f64, se: f64, n_used: usize) -> Self {
        Self {
            estimand: estimand.into(),
            point,
            se,
            ci_low: point - Z95 * se,
            ci_high: point + Z95 * se,
            n_used,
            diagnostics: BTreeMap::new(),
        }
    }

    pub fn with_diag(mut self, key: &str, value: impl ToString) -> Self {
        self.diagnostics.insert(key.into(), value.to_string());
        self
    }
}

/// Standard error from per-row influence values: sqrt(mean(phi^2) / n).
pub fn se_from_influence(phi: &[f64]) -> f64 {
    let n = phi.len() as f64;
    (phi.iter().map(|v| v * v).sum::<f64>() / n / n).sqrt()
}

fn require_both_trials(ds: &Dataset) -> Result<f64> {
    let alpha = ds.alpha_hat();
    if alpha == 0.0 {
        return Err(Error::NoTargetRows);
    }
    if alpha == 1.0 {
        return Err(Error::NoSourceRows);
    }
    Ok(alpha)
}

/// Outcome-bridge estimator: mean of h over target-trial rows.
pub fn psi_h(ds: &Dataset, h: &[f64]) -> Result<f64> {
    let targets = ds.target_rows();
    if targets.is_empty() {
        return Err(Error::NoTargetRows);
    }
    Ok(targets.iter().map(|&i| h[i]).sum::<f64>() / targets.len() as f64)
}

/// Trial-bridge estimator: (1/alpha-hat) mean of S q Ytilde.
pub fn psi_q(ds: &Dataset, q: &[f64]) -> Result<f64> {
    let alpha = require_both_trials(ds)?;
    let n = ds.n_rows();
    let mut acc = 0.0;
    for i in 0..n {
        if ds.is_source(i) {
            acc += q[i] * ds.ytilde(i).ok_or_else(|| {
                Error::Config(format!("row {i}: outcome required for the q estimator"))
            })?;
        }
    }
    Ok(acc / n as f64 / alpha)
}

/// Doubly robust estimator:
/// (1/alpha-hat) mean of [S q (Ytilde - h) + (1 - S) h].
pub fn psi_dr(ds: &Dataset, h: &[f64], q: &[f64]) -> Result<f64> {
    let alpha = require_both_trials(ds)?;
    let n = ds.n_rows();
    let mut acc = 0.0;
    for i in 0..n {
        if ds.is_source(i) {
            let yt = ds.ytilde(i).ok_or_else(|| {
                Error::Config(format!("row {i}: outcome required for the dr estimator"))
            })?;
            acc += q[i] * (yt - h[i]);
        } else {
            acc += h[i];
        }
    }
    Ok(acc / n as f64 / alpha)
}

/// Row-aligned nuisance predictions for the missing-outcome estimator.
#[derive(Debug, Clone, Copy)]
pub struct MarValues<'a> {
    /// P(Delta = 1 | Z, W, A, X, S=1) at the observed arm.
    pub pi: &'a [f64],
    pub mu1: &'a [f64],
    pub mu0: &'a [f64],
    /// mu at the observed arm.
    pub mu_obs: &'a [f64],
}

impl MarValues<'_> {
    fn check_positive(&self, ds: &Dataset) -> Result<()> {
        let bad = ds
            .source_rows()
            .into_iter()
            .map(|i| self.pi[i])
            .fold(f64::INFINITY, f64::min);
        if bad <= 0.0 {
            return Err(Error::NonPositivePi(bad));
        }
        Ok(())
    }
}

/// Multiply robust estimator under missing-at-random outcomes:
/// (1/alpha-hat) mean of [S zeta(h, q, pi, mu) + (1 - S) h].
pub fn psi_mar(ds: &Dataset, h: &[f64], q: &[f64], nu: &MarValues) -> Result<f64> {
    let alpha = require_both_trials(ds)?;
    nu.check_positive(ds)?;
    let n = ds.n_rows();
    let mut acc = 0.0;
    for i in 0..n {
        if ds.is_source(i) {
            let t = mar_pseudo_outcome(ds, i, nu.pi[i], nu.mu1[i], nu.mu0[i], nu.mu_obs[i]);
            acc += q[i] * (t - h[i]);
        } else {
            acc += h[i];
        }
    }
    Ok(acc / n as f64 / alpha)
}

/// Per-row plug-in influence values of the doubly robust estimator:
/// `(S/alpha) q (Ytilde - h) + ((1-S)/alpha) (h - point)`.
pub fn influence_psi_dr(ds: &Dataset, h: &[f64], q: &[f64], point: f64) -> Vec<f64> {
    let alpha = ds.alpha_hat();
    (0..ds.n_rows())
        .map(|i| {
            if ds.is_source(i) {
                q[i] * (ds.ytilde(i).unwrap_or(0.0) - h[i]) / alpha
            } else {
                (h[i] - point) / alpha
            }
        })
        .collect()
}

/// Plug-in standard error of the doubly robust estimator.
pub fn se_psi_dr(ds: &Dataset, h: &[f64], q: &[f64], point: f64) -> f64 {
    se_from_influence(&influence_psi_dr(ds, h, q, point))
}

/// Per-row plug-in influence values of the MAR estimator (the efficient
/// influence function with all nuisances plugged in).
pub fn influence_psi_mar(
    ds: &Dataset,
    h: &[f64],
    q: &[f64],
    nu: &MarValues,
    point: f64,
) -> Vec<f64> {
    let alpha = ds.alpha_hat();
    (0..ds.n_rows())
        .map(|i| {
            if ds.is_source(i) {
                let t = mar_pseudo_outcome(ds, i, nu.pi[i], nu.mu1[i], nu.mu0[i], nu.mu_obs[i]);
                q[i] * (t - h[i]) / alpha
            } else {
                (h[i] - point) / alpha
            }
        })
        .collect()
}

/// Plug-in standard error of the MAR estimator.
pub fn se_psi_mar(ds: &Dataset, h: &[f64], q: &[f64], nu: &MarValues, point: f64) -> f64 {
    se_from_influence(&influence_psi_mar(ds, h, q, nu, point))
}

/// Parametric-bridge influence values for psi_h: the oracle term plus the
/// nuisance correction routed through the M matrix of the estimating
/// equation. The correction multiplier is the target-population mean of the
/// bridge gradient, E[d h / d eta | S = 0]. `grad` holds the per-row bridge
/// gradient (n x k); `instr` holds the instrument rows (n x k).
pub fn influence_psi_h_parametric(
    ds: &Dataset,
    h: &[f64],
    grad: &DMatrix<f64>,
    instr: &DMatrix<f64>,
    point: f64,
) -> Result<Vec<f64>> {
    let n = ds.n_rows();
    let k = grad.ncols();
    if instr.ncols() != k {
        return Err(Error::DimensionMismatch(
            "parametric h standard error needs a square M matrix".into(),
        ));
    }
    let alpha = require_both_trials(ds)?;
    // v = E[grad | S = 0]; M = mean of S instr grad'.
    let mut v = DVector::<f64>::zeros(k);
    let mut m_mat = DMatrix::<f64>::zeros(k, k);
    for i in 0..n {
        if ds.is_source(i) {
            for a in 0..k {
                for b in 0..k {
                    m_mat[(a, b)] += instr[(i, a)] * grad[(i, b)] / n as f64;
                }
            }
        } else {
            for a in 0..k {
                v[a] += grad[(i, a)] / (n as f64 * alpha);
            }
        }
    }
    let cond = linalg::condition_number(&m_mat);
    if cond > 1e10 {
        return Err(Error::SingularM(cond));
    }
    let u = linalg::solve_square(&m_mat.transpose(), &v).ok_or(Error::SingularM(cond))?;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let phi = if ds.is_source(i) {
            let resid = ds.ytilde(i).unwrap_or(0.0) - h[i];
            let ub: f64 = (0..k).map(|j| u[j] * instr[(i, j)]).sum();
            ub * resid
        } else {
            (h[i] - point) / alpha
        };
        out.push(phi);
    }
    Ok(out)
}

/// Parametric plug-in standard error for psi_h.
pub fn se_psi_h_parametric(
    ds: &Dataset,
    h: &[f64],
    grad: &DMatrix<f64>,
    instr: &DMatrix<f64>,
    point: f64,
) -> Result<f64> {
    Ok(se_from_influence(&influence_psi_h_parametric(
        ds, h, grad, instr, point,
    )?))
}

/// Parametric-bridge influence values for psi_q. `grad` holds d q / d xi per
/// row; `instr` holds the instrument rows.
pub fn influence_psi_q_parametric(
    ds: &Dataset,
    q: &[f64],
    grad: &DMatrix<f64>,
    instr: &DMatrix<f64>,
    point: f64,
) -> Result<Vec<f64>> {
    let n = ds.n_rows();
    let k = grad.ncols();
    if instr.ncols() != k {
        return Err(Error::DimensionMismatch(
            "parametric q standard error needs a square M matrix".into(),
        ));
    }
    let alpha = require_both_trials(ds)?;
    // v = mean of S * Ytilde * grad rows; M = mean of S * instr grad'.
    let mut v = DVector::<f64>::zeros(k);
    let mut m_mat = DMatrix::<f64>::zeros(k, k);
    for i in 0..n {
        if ds.is_source(i) {
            let yt = ds.ytilde(i).unwrap_or(0.0);
            for a in 0..k {
                v[a] += yt * grad[(i, a)] / n as f64;
                for b in 0..k {
                    m_mat[(a, b)] += instr[(i, a)] * grad[(i, b)] / n as f64;
                }
            }
        }
    }
    let cond = linalg::condition_number(&m_mat);
    if cond > 1e10 {
        return Err(Error::SingularM(cond));
    }
    let u = linalg::solve_square(&m_mat.transpose(), &v).ok_or(Error::SingularM(cond))?;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let s = ds.s(i);
        let oracle = if ds.is_source(i) {
            q[i] * ds.ytilde(i).unwrap_or(0.0)
        } else {
            -point
        };
        let ub: f64 = (0..k).map(|j| u[j] * instr[(i, j)]).sum();
        let correction = ub * ((1.0 - s) - s * q[i]);
        out.push((oracle + correction) / alpha);
    }
    Ok(out)
}

/// Parametric plug-in standard error for psi_q.
pub fn se_psi_q_parametric(
    ds: &Dataset,
    q: &[f64],
    grad: &DMatrix<f64>,
    instr: &DMatrix<f64>,
    point: f64,
) -> Result<f64> {
    Ok(se_from_influence(&influence_psi_q_parametric(
        ds, q, grad, instr, point,
    )?))
}


// ---------------------------------------------------------------------------
// Standard (non-proximal) comparison estimators
// ---------------------------------------------------------------------------

/// Row-aligned inputs for [`dr_transport_standard`].
#[derive(Debug, Clone, Copy)]
pub struct TransportValues<'a> {
    /// Outcome-model predictions from the source-trial fits evaluated at
    /// every row: arm 1, arm 0, and the observed arm.
    pub m1: &'a [f64],
    pub m0: &'a [f64],
    pub m_obs: &'a [f64],
    /// P(S = 1 | X) per row.
    pub p_hat: &'a [f64],
    /// P(Delta = 1 | A, S) at the observed arm, per row.
    pub pi: &'a [f64],
    /// e(A | S) at the observed arm, per row.
    pub e_obs: &'a [f64],
}

/// An estimate together with its per-row influence values.
#[derive(Debug, Clone)]
pub struct EstimateWithInfluence {
    pub report: EstimateReport,
    pub influence: Vec<f64>,
}

/// Standard doubly robust transport estimator of psi (no proxies): odds
/// weighting by (1 - p(X)) / p(X) on source-trial residuals plus the
/// target-trial g-formula term. p-hat is clipped to [1e-6, 1 - 1e-6] with a
/// diagnostic count.
pub fn dr_transport_standard(ds: &Dataset, v: &TransportValues) -> Result<EstimateReport> {
    dr_transport_standard_full(ds, v).map(|w| w.report)
}

/// As [`dr_transport_standard`], also returning the influence values.
pub fn dr_transport_standard_full(
    ds: &Dataset,
    v: &TransportValues,
) -> Result<EstimateWithInfluence> {
    let alpha = require_both_trials(ds)?;
    let n = ds.n_rows();
    let mut clip_count = 0usize;
    let mut summands = Vec::with_capacity(n);
    for i in 0..n {
        let mut val = 0.0;
        if ds.is_source(i) {
            if ds.delta(i) == 1 {
                let a = f64::from(ds.a(i).unwrap_or(0));
                let mut p = v.p_hat[i];
                if p < P_CLIP || p > 1.0 - P_CLIP {
                    clip_count += 1;
                    p = p.clamp(P_CLIP, 1.0 - P_CLIP);
                }
                if v.pi[i] <= 0.0 {
                    return Err(Error::NonPositivePi(v.pi[i]));
                }
                let odds = (1.0 - p) / p;
                let y = ds.y(i).unwrap_or(0.0);
                val += (2.0 * a - 1.0) / (v.e_obs[i] * v.pi[i]) * odds * (y - v.m_obs[i]);
            }
        } else {
            val += v.m1[i] - v.m0[i];
        }
        summands.push(val / alpha);
    }
    let point = summands.iter().sum::<f64>() / n as f64;
    let influence: Vec<f64> = (0..n)
        .map(|i| summands[i] - if ds.is_source(i) { 0.0 } else { point / alpha })
        .collect();
    let se = se_from_influence(&influence);
    let report = EstimateReport::new("psi_standard", point, se, n)
        .with_diag("p_hat_clips", clip_count);
    Ok(EstimateWithInfluence { report, influence })
}

/// Trial selector for [`dr_ate_standard`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Trial {
    Source,
    Target,
}

/// Row-aligned inputs for [`dr_ate_standard`]: within-trial outcome-model
/// predictions at the two contrast arms and the observed arm.
#[derive(Debug, Clone, Copy)]
pub struct AteValues<'a> {
    pub m_a1: &'a [f64],
    pub m_a0: &'a [f64],
    pub m_obs: &'a [f64],
    /// P(Delta = 1 | A, trial) at the observed arm.
    pub pi: &'a [f64],
    /// e(A | trial) at the observed arm.
    pub e_obs: &'a [f64],
}

/// Within-trial AIPW estimator of E[Y(a1) - Y(a0) | trial].
pub fn dr_ate_standard(
    ds: &Dataset,
    trial: Trial,
    contrast: (i8, i8),
    v: &AteValues,
) -> Result<EstimateReport> {
    dr_ate_standard_full(ds, trial, contrast, v).map(|w| w.report)
}

/// As [`dr_ate_standard`], also returning the influence values.
pub fn dr_ate_standard_full(
    ds: &Dataset,
    trial: Trial,
    contrast: (i8, i8),
    v: &AteValues,
) -> Result<EstimateWithInfluence> {
    let n = ds.n_rows();
    let in_trial = |i: usize| match trial {
        Trial::Source => ds.is_source(i),
        Trial::Target => !ds.is_source(i),
    };
    let trial_rows: Vec<usize> = (0..n).filter(|&i| in_trial(i)).collect();
    if trial_rows.is_empty() {
        return Err(match trial {
            Trial::Source => Error::NoSourceRows,
            Trial::Target => Error::NoTargetRows,
        });
    }
    for arm in [contrast.0, contrast.1] {
        if !trial_rows.iter().any(|&i| ds.a(i) == Some(arm)) {
            return Err(Error::EmptyArm { arm });
        }
    }
    let p_trial = trial_rows.len() as f64 / n as f64;
    let mut summands = vec![0.0; n];
    for &i in &trial_rows {
        let sign = match ds.a(i) {
            Some(a) if a == contrast.0 => 1.0,
            Some(a) if a == contrast.1 => -1.0,
            _ => 0.0,
        };
        let mut val = v.m_a1[i] - v.m_a0[i];
        if sign != 0.0 && ds.delta(i) == 1 {
            if v.pi[i] <= 0.0 {
                return Err(Error::NonPositivePi(v.pi[i]));
            }
            let y = ds.y(i).unwrap_or(0.0);
            val += sign / (v.e_obs[i] * v.pi[i]) * (y - v.m_obs[i]);
        }
        summands[i] = val / p_trial;
    }
    let point = summands.iter().sum::<f64>() / n as f64;
    let influence: Vec<f64> = (0..n)
        .map(|i| summands[i] - if in_trial(i) { point / p_trial } else { 0.0 })
        .collect();
    let se = se_from_influence(&influence);
    let label = format!(
        "ate_{}({} vs {})",
        match trial {
            Trial::Source => "source",
            Trial::Target => "target",
        },
        contrast.0,
        contrast.1
    );
    Ok(EstimateWithInfluence {
        report: EstimateReport::new(label, point, se, trial_rows.len()),
        influence,
    })
}

/// Indirect comparison: point is exactly `ate.point - psi.point`; the
/// variance combines the two influence functions through their empirical
/// cross-moment `cov_term`.
pub fn theta_indirect(
    ate: &EstimateReport,
    psi: &EstimateReport,
    cov_term: f64,
) -> EstimateReport {
    let point = ate.point - psi.point;
    let var = (ate.se * ate.se + psi.se * psi.se - 2.0 * cov_term).max(0.0);
    EstimateReport::new("theta_indirect", point, var.sqrt(), ate.n_used)
        .with_diag("cov_term", format!("{cov_term:.6e}"))
        .with_diag(
            "sign_convention",
            "reported as E[Y(a1)-Y(a0)|target] - psi; negate for the opposite convention",
        )
}

/// Empirical cross-moment of two influence-value vectors, scaled like the
/// squared standard errors: mean(phi1 * phi2) / n.
pub fn influence_cov(phi1: &[f64], phi2: &[f64]) -> f64 {
    let n = phi1.len() as f64;
    phi1.iter().zip(phi2).map(|(a, b)| a * b).sum::<f64>() / n / n
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Block;
    use approx::assert_abs_diff_eq;

    fn toy() -> Dataset {
        Dataset::from_parts(
            vec![1, 0],
            vec![Some(1), None],
            vec![1, 1],
            vec![Some(2.0), None],
            Block::new(vec!["x_1".into()], vec![0.1, 0.2]),
            Block::new(vec!["w_1".into()], vec![0.3, 0.4]),
            Block::new(vec!["z_1".into()], vec![0.5, 0.0]),
            vec![true, false],
            vec![0.5, 0.5],
        )
        .unwrap()
    }

    #[test]
    fn psi_h_means_target_rows() {
        let ds = toy();
        assert_abs_diff_eq!(psi_h(&ds, &[9.0, 3.0]).unwrap(), 3.0);
        // Two target rows with h values 1 and 3 average to 2.
        let ds2 = Dataset::from_parts(
            vec![1, 0, 0],
            vec![Some(1), None, None],
            vec![1, 1, 1],
            vec![Some(2.0), None, None],
            Block::new(vec!["x_1".into()], vec![0.1, 0.2, 0.3]),
            Block::new(vec!["w_1".into()], vec![0.3, 0.4, 0.5]),
            Block::new(vec!["z_1".into()], vec![0.5, 0.0, 0.0]),
            vec![true, false, false],
            vec![0.5; 3],
        )
        .unwrap();
        assert_abs_diff_eq!(psi_h(&ds2, &[0.0, 1.0, 3.0]).unwrap(), 2.0);
    }

    #[test]
    fn psi_q_hand_computed() {
        let ds = toy();
        // Ytilde = 2 * 2 = 4 at e1 = 0.5... wait: y=2, a=1 -> 2*2=4.
        // (1/alpha) * mean(S q Ytilde) = 2 * (1*4)/2 = 4 for q = 1.
        assert_abs_diff_eq!(psi_q(&ds, &[1.0, 0.0]).unwrap(), 4.0);
        assert_abs_diff_eq!(psi_q(&ds, &[0.0, 0.0]).unwrap(), 0.0);
    }

    #[test]
    fn psi_dr_structural_reductions() {
        let ds = toy();
        let h = vec![0.7, 1.3];
        let q = vec![1.1, 0.0];
        let zero = vec![0.0, 0.0];
        assert_abs_diff_eq!(
            psi_dr(&ds, &h, &zero).unwrap(),
            psi_h(&ds, &h).unwrap(),
            epsilon = 1e-15
        );
        assert_abs_diff_eq!(
            psi_dr(&ds, &zero, &q).unwrap(),
            psi_q(&ds, &q).unwrap(),
            epsilon = 1e-15
        );
    }

    #[test]
    fn psi_mar_collapses_to_dr_under_complete_outcomes() {
        let ds = toy();
        let h = vec![0.7, 1.3];
        let q = vec![1.1, 0.0];
        let ones = vec![1.0; 2];
        let zeros = vec![0.0; 2];
        let nu = MarValues {
            pi: &ones,
            mu1: &zeros,
            mu0: &zeros,
            mu_obs: &zeros,
        };
        assert_abs_diff_eq!(
            psi_mar(&ds, &h, &q, &nu).unwrap(),
            psi_dr(&ds, &h, &q).unwrap(),
            epsilon = 1e-15
        );
    }

    #[test]
    fn influence_functions_are_mean_zero_at_the_estimate() {
        let ds = toy();
        let h = vec![0.7, 1.3];
        let q = vec![1.1, 0.0];
        let point = psi_dr(&ds, &h, &q).unwrap();
        let phi = influence_psi_dr(&ds, &h, &q, point);
        let mean = phi.iter().sum::<f64>() / phi.len() as f64;
        assert!(mean.abs() < 1e-12);

        let ones = vec![1.0; 2];
        let zeros = vec![0.0; 2];
        let nu = MarValues {
            pi: &ones,
            mu1: &zeros,
            mu0: &zeros,
            mu_obs: &zeros,
        };
        let point = psi_mar(&ds, &h, &q, &nu).unwrap();
        let phi = influence_psi_mar(&ds, &h, &q, &nu, point);
        let mean = phi.iter().sum::<f64>() / phi.len() as f64;
        assert!(mean.abs() < 1e-12);
    }

    #[test]
    fn constant_outcome_gives_zero_ate() {
        // Target trial with arms -1/0 and constant outcome.
        let ds = Dataset::from_parts(
            vec![1, 0, 0, 0, 0],
            vec![Some(1), Some(-1), Some(0), Some(-1), Some(0)],
            vec![1; 5],
            vec![Some(3.0), Some(3.0), Some(3.0), Some(3.0), Some(3.0)],
            Block::new(vec!["x_1".into()], vec![0.1, 0.2, 0.3, 0.4, 0.5]),
            Block::new(vec!["w_1".into()], vec![0.0; 5]),
            Block::new(vec!["z_1".into()], vec![0.5, 0.0, 0.0, 0.0, 0.0]),
            vec![true, false, false, false, false],
            vec![0.5; 5],
        )
        .unwrap();
        let consts = vec![3.0; 5];
        let half = vec![0.5; 5];
        let one = vec![1.0; 5];
        let v = AteValues {
            m_a1: &consts,
            m_a0: &consts,
            m_obs: &consts,
            pi: &one,
            e_obs: &half,
        };
        let rep = dr_ate_standard(&ds, Trial::Target, (-1, 0), &v).unwrap();
        assert_abs_diff_eq!(rep.point, 0.0, epsilon = 1e-12);
        // Empty arm detection.
        let err = dr_ate_standard(&ds, Trial::Target, (1, 0), &v).unwrap_err();
        assert!(matches!(err, Error::EmptyArm { arm: 1 }));
    }

    #[test]
    fn theta_is_exact_difference() {
        let ate = EstimateReport::new("ate", -7.04, 0.4, 100);
        let psi = EstimateReport::new("psi", -3.62, 0.5, 100);
        let th = theta_indirect(&ate, &psi, 0.0);
        assert_abs_diff_eq!(th.point, -3.42, epsilon = 1e-12);
        assert_abs_diff_eq!(th.se, (0.16f64 + 0.25).sqrt(), epsilon = 1e-12);
        let th0 = theta_indirect(&psi, &psi, 0.0);
        assert_abs_diff_eq!(th0.point, 0.0);
    }

    #[test]
    fn report_ci_invariant() {
        let r = EstimateReport::new("x", 1.0, 0.5, 10);
        assert_abs_diff_eq!(r.ci_low, 1.0 - 1.96 * 0.5);
        assert_abs_diff_eq!(r.ci_high, 1.0 + 1.96 * 0.5);
    }
}
