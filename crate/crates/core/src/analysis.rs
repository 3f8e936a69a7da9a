//! Two-trial CSV analysis pipeline.
//!
//! Produces the indirect-comparison report: the standard (covariate-only)
//! doubly robust transport estimate of psi, the proximal multiply robust
//! estimate, the within-trial direct comparisons, and the indirect contrast
//! theta for both routes. Bridge functions are linear in an orthogonal
//! quadratic expansion of the numeric baseline covariates and fit by
//! ridge-regularized GMM with the ridge weight chosen by 10-fold cross
//! validation.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};

use crate::bridge::{
    fit_outcome_bridge_on, fit_trial_bridge_on, h_moments_on, q_moments_on, BridgeForm,
    MarNuisance, OutcomeBridgeMode, Ridge,
};
use crate::data::{BasisSpec, Dataset, FittedBasis, Proxy};
use crate::error::Error;
use crate::estimate::{
    dr_ate_standard_full, dr_transport_standard_full, influence_cov, influence_psi_mar, psi_mar,
    se_from_influence, theta_indirect, AteValues, EstimateReport, MarValues, TransportValues,
    Trial,
};
use crate::regress::{fit_linear, fit_logistic_irls, select_lambda_cv, CvMomentProblem};
use crate::Result;

/// Configuration of one analysis run.
#[derive(Debug, Clone)]
pub struct AnalysisConfig {
    /// Randomization probability of the missing-treatment arm in the source
    /// trial, e(1 | S = 1).
    pub e_source: f64,
    /// Randomization probability of the target trial's own active arm,
    /// e(-1 | S = 0).
    pub e_target: f64,
    /// Ridge grid searched by cross validation.
    pub lambda_grid: Vec<f64>,
    pub cv_folds: usize,
    pub seed: u64,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            e_source: 0.5,
            e_target: 0.5,
            lambda_grid: vec![0.0, 1e-6, 1e-4, 1e-2, 1.0],
            cv_folds: 10,
            seed: 0,
        }
    }
}

/// The assembled indirect-comparison report.
#[derive(Debug, Clone)]
pub struct AnalysisReport {
    /// psi standard, psi proximal, theta standard, theta proximal, plus the
    /// two direct within-trial comparisons.
    pub rows: Vec<EstimateReport>,
    pub diagnostics: BTreeMap<String, String>,
    /// Per-row influence values of the two psi estimators (kept for joint
    /// inference on derived contrasts).
    pub psi_standard_influence: Vec<f64>,
    pub psi_proximal_influence: Vec<f64>,
}

impl AnalysisReport {
    pub fn row(&self, estimand: &str) -> Option<&EstimateReport> {
        self.rows.iter().find(|r| r.estimand == estimand)
    }

    /// CSV rendering: one row per estimand.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("estimand,point,se,ci_low,ci_high,n_used\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{:.6},{:.6},{:.6},{:.6},{}\n",
                r.estimand, r.point, r.se, r.ci_low, r.ci_high, r.n_used
            ));
        }
        out
    }

    pub fn to_text_table(&self) -> String {
        let mut out = format!(
            "{:<26} {:>10} {:>9} {:>10} {:>10}\n",
            "estimand", "point", "se", "ci_low", "ci_high"
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{:<26} {:>10.4} {:>9.4} {:>10.4} {:>10.4}\n",
                r.estimand, r.point, r.se, r.ci_low, r.ci_high
            ));
        }
        out.push('\n');
        for (k, v) in &self.diagnostics {
            out.push_str(&format!("# {k} = {v}\n"));
        }
        out
    }
}

/// Empirical nonmissing proportion per (trial, arm).
fn empirical_pi(ds: &Dataset) -> BTreeMap<(u8, i8), f64> {
    let mut counts: BTreeMap<(u8, i8), (usize, usize)> = BTreeMap::new();
    for i in 0..ds.n_rows() {
        if let Some(a) = ds.a(i) {
            let e = counts.entry((ds.s(i) as u8, a)).or_insert((0, 0));
            e.1 += 1;
            if ds.delta(i) == 1 {
                e.0 += 1;
            }
        }
    }
    counts
        .into_iter()
        .map(|(k, (obs, tot))| (k, obs as f64 / tot.max(1) as f64))
        .collect()
}

/// Per-(trial, arm) linear outcome fits m(a, x, s) on observed rows.
struct OutcomeModels {
    fits: BTreeMap<(u8, i8), crate::regress::LinearFit>,
}

impl OutcomeModels {
    fn fit(ds: &Dataset) -> Result<Self> {
        let mut fits = BTreeMap::new();
        let mut arms: Vec<(u8, i8)> = Vec::new();
        for i in 0..ds.n_rows() {
            if let Some(a) = ds.a(i) {
                let key = (ds.s(i) as u8, a);
                if !arms.contains(&key) {
                    arms.push(key);
                }
            }
        }
        for key in arms {
            let rows: Vec<usize> = (0..ds.n_rows())
                .filter(|&i| {
                    ds.s(i) as u8 == key.0
                        && ds.a(i) == Some(key.1)
                        && ds.delta(i) == 1
                        && ds.y(i).is_some()
                })
                .collect();
            if rows.is_empty() {
                continue;
            }
            let design = m_design(ds, &rows);
            let resp = DVector::from_iterator(rows.len(), rows.iter().map(|&i| ds.y(i).unwrap()));
            fits.insert(key, fit_linear(&design, &resp, None, 0.0, None)?);
        }
        Ok(Self { fits })
    }

    fn predict(&self, ds: &Dataset, trial: u8, arm: i8) -> Result<Vec<f64>> {
        let fit = self
            .fits
            .get(&(trial, arm))
            .ok_or(Error::EmptyArm { arm })?;
        let rows: Vec<usize> = (0..ds.n_rows()).collect();
        let design = m_design(ds, &rows);
        fit.predict_matrix(&design)
    }
}

/// Outcome-model design (1, X).
fn m_design(ds: &Dataset, rows: &[usize]) -> DMatrix<f64> {
    let p = ds.p_x();
    let mut m = DMatrix::zeros(rows.len(), 1 + p);
    for (r, &i) in rows.iter().enumerate() {
        m[(r, 0)] = 1.0;
        for (j, v) in ds.x_row(i).iter().enumerate() {
            m[(r, 1 + j)] = *v;
        }
    }
    m
}

struct QBridgeProblem<'a> {
    ds: &'a Dataset,
    basis: &'a FittedBasis,
    instr: &'a FittedBasis,
}

impl CvMomentProblem for QBridgeProblem<'_> {
    fn n_rows(&self) -> usize {
        self.ds.n_rows()
    }
    fn fit(&self, train: &[usize], lambda: f64) -> Result<Vec<f64>> {
        let ridge = Ridge::intercept_free(lambda, self.basis.ncols());
        let model = fit_trial_bridge_on(
            self.ds,
            train,
            BridgeForm::Linear,
            self.basis,
            self.instr,
            &ridge,
            None,
        )?;
        Ok(model.coef.iter().copied().collect())
    }
    fn violation(&self, test: &[usize], params: &[f64]) -> f64 {
        let xi = DVector::from_column_slice(params);
        match q_moments_on(self.ds, test, &xi, BridgeForm::Linear, self.basis, self.instr) {
            Ok(m) => m.norm_squared(),
            Err(_) => f64::INFINITY,
        }
    }
}

struct HBridgeProblem<'a> {
    ds: &'a Dataset,
    basis: &'a FittedBasis,
    instr: &'a FittedBasis,
    nuisance: MarNuisance<'a>,
    /// Source rows, the CV population for the outcome bridge.
    rows: Vec<usize>,
}

impl CvMomentProblem for HBridgeProblem<'_> {
    fn n_rows(&self) -> usize {
        self.rows.len()
    }
    fn fit(&self, train: &[usize], lambda: f64) -> Result<Vec<f64>> {
        let rows: Vec<usize> = train.iter().map(|&t| self.rows[t]).collect();
        let ridge = Ridge::intercept_free(lambda, self.basis.ncols());
        let model = fit_outcome_bridge_on(
            self.ds,
            &rows,
            self.basis,
            self.instr,
            &ridge,
            &OutcomeBridgeMode::Mar(self.nuisance.clone()),
        )?;
        Ok(model.coef.iter().copied().collect())
    }
    fn violation(&self, test: &[usize], params: &[f64]) -> f64 {
        let rows: Vec<usize> = test.iter().map(|&t| self.rows[t]).collect();
        let eta = DVector::from_column_slice(params);
        match h_moments_on(
            self.ds,
            &rows,
            &eta,
            self.basis,
            self.instr,
            &OutcomeBridgeMode::Mar(self.nuisance.clone()),
        ) {
            Ok(m) => m.norm_squared(),
            Err(_) => f64::INFINITY,
        }
    }
}

/// Runs the full indirect-comparison analysis on a validated two-trial
/// dataset. Source arms are (1, 0); target arms are (-1, 0).
pub fn analyze(ds: &Dataset, cfg: &AnalysisConfig) -> Result<AnalysisReport> {
    let n = ds.n_rows();
    let mut diagnostics = BTreeMap::new();
    diagnostics.insert("alpha_hat".into(), format!("{:.6}", ds.alpha_hat()));

    // --- shared nuisances -------------------------------------------------
    let pi_by_arm = empirical_pi(ds);
    let pi_of = |i: usize| -> f64 {
        match ds.a(i) {
            Some(a) => *pi_by_arm.get(&(ds.s(i) as u8, a)).unwrap_or(&1.0),
            None => 1.0,
        }
    };
    let e_of = |i: usize| -> f64 {
        match (ds.is_source(i), ds.a(i)) {
            (true, Some(1)) => cfg.e_source,
            (true, Some(0)) => 1.0 - cfg.e_source,
            (false, Some(-1)) => cfg.e_target,
            (false, Some(0)) => 1.0 - cfg.e_target,
            _ => 1.0,
        }
    };
    let pi_vec: Vec<f64> = (0..n).map(pi_of).collect();
    let e_vec: Vec<f64> = (0..n).map(e_of).collect();

    let outcome_models = OutcomeModels::fit(ds)?;

    // --- standard transport estimator of psi ------------------------------
    let m1_src = outcome_models.predict(ds, 1, 1)?;
    let m0_src = outcome_models.predict(ds, 1, 0)?;
    let m_obs_src: Vec<f64> = (0..n)
        .map(|i| match ds.a(i) {
            Some(1) => m1_src[i],
            _ => m0_src[i],
        })
        .collect();
    let p_design = {
        let rows: Vec<usize> = (0..n).collect();
        m_design(ds, &rows)
    };
    let p_resp: Vec<f64> = (0..n).map(|i| ds.s(i)).collect();
    let p_fit = fit_logistic_irls(&p_design, &p_resp, 100, 1e-8)?;
    let p_hat = p_fit.predict_matrix(&p_design)?;
    let psi_std = dr_transport_standard_full(
        ds,
        &TransportValues {
            m1: &m1_src,
            m0: &m0_src,
            m_obs: &m_obs_src,
            p_hat: &p_hat,
            pi: &pi_vec,
            e_obs: &e_vec,
        },
    )?;

    // --- direct within-trial comparisons ----------------------------------
    let m_neg1_tgt = outcome_models.predict(ds, 0, -1)?;
    let m0_tgt = outcome_models.predict(ds, 0, 0)?;
    let m_obs_tgt: Vec<f64> = (0..n)
        .map(|i| match ds.a(i) {
            Some(-1) => m_neg1_tgt[i],
            _ => m0_tgt[i],
        })
        .collect();
    let ate_target = dr_ate_standard_full(
        ds,
        Trial::Target,
        (-1, 0),
        &AteValues {
            m_a1: &m_neg1_tgt,
            m_a0: &m0_tgt,
            m_obs: &m_obs_tgt,
            pi: &pi_vec,
            e_obs: &e_vec,
        },
    )?;
    let ate_source = dr_ate_standard_full(
        ds,
        Trial::Source,
        (1, 0),
        &AteValues {
            m_a1: &m1_src,
            m_a0: &m0_src,
            m_obs: &m_obs_src,
            pi: &pi_vec,
            e_obs: &e_vec,
        },
    )?;

    // --- proximal pipeline -------------------------------------------------
    let all_rows: Vec<usize> = (0..n).collect();
    let basis_c = FittedBasis::fit(ds, &BasisSpec::ortho_quad(Proxy::W), &all_rows)?;
    let basis_b = FittedBasis::fit(ds, &BasisSpec::ortho_quad(Proxy::Z), &all_rows)?;

    // Trial bridge: linear form, instrumented by the W-side basis.
    let q_problem = QBridgeProblem {
        ds,
        basis: &basis_b,
        instr: &basis_c,
    };
    let lambda_q = select_lambda_cv(&q_problem, &cfg.lambda_grid, cfg.cv_folds, cfg.seed)?;
    let q_model = fit_trial_bridge_on(
        ds,
        &all_rows,
        BridgeForm::Linear,
        &basis_b,
        &basis_c,
        &Ridge::intercept_free(lambda_q, basis_b.ncols()),
        None,
    )?;
    let src_rows = ds.source_rows();
    let (q_src, q_clips) = q_model.eval_rows_counting(ds, &src_rows)?;
    let mut q_vals = vec![0.0; n];
    for (pos, &i) in src_rows.iter().enumerate() {
        q_vals[i] = q_src[pos];
    }

    // Source-trial outcome regression per arm on observed rows: mu(Z, W, A, X).
    let mut mu1 = vec![0.0; n];
    let mut mu0 = vec![0.0; n];
    let mut mu_obs = vec![0.0; n];
    for arm in [0i8, 1i8] {
        let rows: Vec<usize> = src_rows
            .iter()
            .copied()
            .filter(|&i| ds.a(i) == Some(arm) && ds.delta(i) == 1)
            .collect();
        if rows.is_empty() {
            return Err(Error::EmptyArm { arm });
        }
        let design = mu_design(ds, &rows)?;
        let resp = DVector::from_iterator(rows.len(), rows.iter().map(|&i| ds.y(i).unwrap()));
        let fit = fit_linear(&design, &resp, None, 0.0, None)?;
        let src_design = mu_design(ds, &src_rows)?;
        let preds = fit.predict_matrix(&src_design)?;
        for (pos, &i) in src_rows.iter().enumerate() {
            if arm == 1 {
                mu1[i] = preds[pos];
            } else {
                mu0[i] = preds[pos];
            }
        }
    }
    for &i in &src_rows {
        mu_obs[i] = if ds.a(i) == Some(1) { mu1[i] } else { mu0[i] };
    }

    let nuisance = MarNuisance {
        pi: &pi_vec,
        mu1: &mu1,
        mu0: &mu0,
        mu_obs: &mu_obs,
    };
    let h_problem = HBridgeProblem {
        ds,
        basis: &basis_c,
        instr: &basis_b,
        nuisance: nuisance.clone(),
        rows: src_rows.clone(),
    };
    let lambda_h = select_lambda_cv(&h_problem, &cfg.lambda_grid, cfg.cv_folds, cfg.seed)?;
    let h_model = fit_outcome_bridge_on(
        ds,
        &src_rows,
        &basis_c,
        &basis_b,
        &Ridge::intercept_free(lambda_h, basis_c.ncols()),
        &OutcomeBridgeMode::Mar(nuisance.clone()),
    )?;
    let h_vals = h_model.eval_all(ds)?;

    let mar_values = MarValues {
        pi: &pi_vec,
        mu1: &mu1,
        mu0: &mu0,
        mu_obs: &mu_obs,
    };
    let psi_prox_point = psi_mar(ds, &h_vals, &q_vals, &mar_values)?;
    let psi_prox_if = influence_psi_mar(ds, &h_vals, &q_vals, &mar_values, psi_prox_point);
    let psi_prox_se = se_from_influence(&psi_prox_if);
    let psi_prox = EstimateReport::new("psi_proximal", psi_prox_point, psi_prox_se, n)
        .with_diag("lambda_h", format!("{lambda_h:e}"))
        .with_diag("lambda_q", format!("{lambda_q:e}"))
        .with_diag("q_clips", q_clips);

    // --- indirect contrasts -------------------------------------------------
    let mut psi_std_report = psi_std.report.clone();
    psi_std_report.estimand = "psi_standard".into();
    let theta_std = {
        let cov = influence_cov(&ate_target.influence, &psi_std.influence);
        let mut t = theta_indirect(&ate_target.report, &psi_std_report, cov);
        t.estimand = "theta_standard".into();
        t
    };
    let theta_prox = {
        let cov = influence_cov(&ate_target.influence, &psi_prox_if);
        let mut t = theta_indirect(&ate_target.report, &psi_prox, cov);
        t.estimand = "theta_proximal".into();
        t
    };

    diagnostics.insert("lambda_h".into(), format!("{lambda_h:e}"));
    diagnostics.insert("lambda_q".into(), format!("{lambda_q:e}"));
    diagnostics.insert("q_clips".into(), q_clips.to_string());
    diagnostics.insert(
        "h_converged".into(),
        h_model.diagnostics.converged.to_string(),
    );
    diagnostics.insert(
        "q_near_singular".into(),
        q_model.diagnostics.near_singular.to_string(),
    );
    let mut ate_tgt_report = ate_target.report.clone();
    ate_tgt_report.estimand = "ate_target(-1 vs 0)".into();
    let mut ate_src_report = ate_source.report.clone();
    ate_src_report.estimand = "ate_source(1 vs 0)".into();

    Ok(AnalysisReport {
        rows: vec![
            psi_std_report,
            psi_prox,
            theta_std,
            theta_prox,
            ate_tgt_report,
            ate_src_report,
        ],
        diagnostics,
        psi_standard_influence: psi_std.influence,
        psi_proximal_influence: psi_prox_if,
    })
}

/// Bridge-nuisance design (1, Z, W, X) used for the mu regressions.
fn mu_design(ds: &Dataset, rows: &[usize]) -> Result<DMatrix<f64>> {
    let k = 1 + ds.p_z() + ds.p_w() + ds.p_x();
    let mut m = DMatrix::zeros(rows.len(), k);
    for (r, &i) in rows.iter().enumerate() {
        let z = ds.z_row(i).ok_or(Error::ZMissingForBasis { row: i })?;
        let mut c = 0;
        m[(r, c)] = 1.0;
        c += 1;
        for v in z {
            m[(r, c)] = *v;
            c += 1;
        }
        for v in ds.w_row(i) {
            m[(r, c)] = *v;
            c += 1;
        }
        for v in ds.x_row(i) {
            m[(r, c)] = *v;
            c += 1;
        }
    }
    Ok(m)
}
