//! Replication runner and Monte-Carlo summary aggregation.
//!
//! One replication generates a dataset, routes deliberately misspecified
//! copies (square-root-absolute proxies) into the flagged nuisance fits, fits
//! the bridges, and evaluates the experiment's estimators with their plug-in
//! standard errors. Replications run in parallel and are reduced in
//! replication order, so experiment output is a pure function of the
//! configuration and seed.

use nalgebra::{DMatrix, DVector};

use super::dgp::{generate_full_data, monte_carlo_truth};
use super::experiments::ExperimentConfig;
use crate::bridge::{
    fit_outcome_bridge, fit_trial_bridge, BridgeForm, MarNuisance, OutcomeBridgeMode, Ridge,
};
use crate::data::{misspecify_proxies, BasisSpec, Dataset, FittedBasis};
use crate::error::Error;
use crate::estimate::{
    psi_dr, psi_h, psi_mar, psi_q, se_psi_dr, se_psi_h_parametric, se_psi_mar,
    se_psi_q_parametric, MarValues,
};
use crate::regress::{fit_linear, fit_logistic_irls};
use crate::Result;

/// Default number of draws for the Monte-Carlo ground truth.
pub const DEFAULT_TRUTH_DRAWS: usize = 4_000_000;

/// One estimator's output within a replication.
#[derive(Debug, Clone, Copy)]
pub struct EstimatePoint {
    pub point: f64,
    pub se: f64,
    pub converged: bool,
    pub clipped: bool,
}

impl EstimatePoint {
    fn failed() -> Self {
        Self {
            point: f64::NAN,
            se: f64::NAN,
            converged: false,
            clipped: false,
        }
    }
}

/// Per-replication results, ordered as in `ExperimentConfig::estimator_labels`.
#[derive(Debug, Clone)]
pub struct RepResult {
    pub estimates: Vec<EstimatePoint>,
}

/// Per-estimator Monte-Carlo summary over converged replications.
#[derive(Debug, Clone)]
pub struct EstimatorSummary {
    pub estimator: String,
    pub mean: f64,
    /// Mean minus the Monte-Carlo truth.
    pub bias: f64,
    pub rmse: f64,
    pub mean_se: f64,
    /// Fraction of converged replications with |point - truth| <= 1.96 se
    /// (boundary inclusive).
    pub coverage: f64,
    pub converged: usize,
    pub total: usize,
}

/// Summary across estimators plus the truth it was measured against.
#[derive(Debug, Clone)]
pub struct MonteCarloSummary {
    pub truth: f64,
    pub truth_mc_se: f64,
    pub estimators: Vec<EstimatorSummary>,
}

impl MonteCarloSummary {
    /// CSV rendering in the tables' scaled units: bias x 1e-3, RMSE and SE
    /// x 1e-1, coverage in percent.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "estimator,mean,bias_1e-3,rmse_1e-1,se_1e-1,coverage_pct,converged,total\n",
        );
        for e in &self.estimators {
            out.push_str(&format!(
                "{},{:.4},{:.2},{:.2},{:.2},{:.2},{},{}\n",
                e.estimator,
                e.mean,
                e.bias * 1e3,
                e.rmse * 1e1,
                e.mean_se * 1e1,
                e.coverage * 100.0,
                e.converged,
                e.total
            ));
        }
        out
    }

    /// Aligned text table in the same scaled units.
    pub fn to_text_table(&self) -> String {
        let mut out = format!(
            "truth = {:.4} (mc se {:.5})\n{:<8} {:>9} {:>10} {:>10} {:>10} {:>10} {:>10}\n",
            self.truth, self.truth_mc_se, "estimator", "mean", "bias(1e-3)", "rmse(1e-1)",
            "se(1e-1)", "cover(%)", "conv/total"
        );
        for e in &self.estimators {
            out.push_str(&format!(
                "{:<8} {:>9.4} {:>10.2} {:>10.2} {:>10.2} {:>10.2} {:>7}/{}\n",
                e.estimator,
                e.mean,
                e.bias * 1e3,
                e.rmse * 1e1,
                e.mean_se * 1e1,
                e.coverage * 100.0,
                e.converged,
                e.total
            ));
        }
        out
    }
}

/// Full experiment output: per-replication estimates plus the summary.
#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub labels: Vec<&'static str>,
    pub truth: f64,
    pub truth_mc_se: f64,
    pub reps: Vec<RepResult>,
    pub summary: MonteCarloSummary,
}

impl ExperimentResult {
    /// Raw per-replication CSV (unscaled units).
    pub fn reps_to_csv(&self) -> String {
        let mut out = String::from("rep,estimator,point,se,converged,clipped\n");
        for (r, rep) in self.reps.iter().enumerate() {
            for (label, est) in self.labels.iter().zip(&rep.estimates) {
                out.push_str(&format!(
                    "{},{},{},{},{},{}\n",
                    r, label, est.point, est.se, est.converged, est.clipped
                ));
            }
        }
        out
    }
}

/// Runs every replication (in parallel when enabled) and aggregates.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    run_experiment_with_truth_draws(cfg, DEFAULT_TRUTH_DRAWS)
}

/// As [`run_experiment`] with an explicit truth-draw budget.
pub fn run_experiment_with_truth_draws(
    cfg: &ExperimentConfig,
    truth_draws: usize,
) -> Result<ExperimentResult> {
    cfg.dgp.validate()?;
    let (truth, truth_mc_se) = monte_carlo_truth(&cfg.dgp, truth_draws, cfg.base_seed)?;
    let reps: Vec<RepResult> =
        crate::map_indexed(cfg.reps, |r| run_replication(cfg, r as u64));
    let labels = cfg.estimator_labels();
    let summary = aggregate_summary(&reps, &labels, truth, truth_mc_se)?;
    Ok(ExperimentResult {
        labels,
        truth,
        truth_mc_se,
        reps,
        summary,
    })
}

/// Statistics over converged replications only; errors when an estimator has
/// zero converged replications.
pub fn aggregate_summary(
    reps: &[RepResult],
    labels: &[&'static str],
    truth: f64,
    truth_mc_se: f64,
) -> Result<MonteCarloSummary> {
    let mut estimators = Vec::with_capacity(labels.len());
    for (j, label) in labels.iter().enumerate() {
        let total = reps.len();
        let pts: Vec<&EstimatePoint> = reps
            .iter()
            .map(|r| &r.estimates[j])
            .filter(|e| e.converged && e.point.is_finite() && e.se.is_finite())
            .collect();
        if pts.is_empty() {
            return Err(Error::ZeroConverged(label.to_string()));
        }
        let m = pts.len() as f64;
        let mean = pts.iter().map(|e| e.point).sum::<f64>() / m;
        let bias = mean - truth;
        let rmse = (pts
            .iter()
            .map(|e| (e.point - truth) * (e.point - truth))
            .sum::<f64>()
            / m)
            .sqrt();
        let mean_se = pts.iter().map(|e| e.se).sum::<f64>() / m;
        let covered = pts
            .iter()
            .filter(|e| (e.point - truth).abs() <= 1.96 * e.se)
            .count();
        estimators.push(EstimatorSummary {
            estimator: label.to_string(),
            mean,
            bias,
            rmse,
            mean_se,
            coverage: covered as f64 / m,
            converged: pts.len(),
            total,
        });
    }
    Ok(MonteCarloSummary {
        truth,
        truth_mc_se,
        estimators,
    })
}

/// Runs one replication; failures surface as non-converged estimates, never
/// as errors.
pub fn run_replication(cfg: &ExperimentConfig, rep_index: u64) -> RepResult {
    match run_replication_inner(cfg, rep_index) {
        Ok(r) => r,
        Err(_) => RepResult {
            estimates: vec![EstimatePoint::failed(); cfg.estimator_labels().len()],
        },
    }
}

fn run_replication_inner(cfg: &ExperimentConfig, rep_index: u64) -> Result<RepResult> {
    let full = generate_full_data(&cfg.dgp, cfg.n, cfg.mar_enabled, cfg.base_seed, rep_index)?;
    let ds = full.dataset;
    let needs_mis =
        cfg.misspecify_h || cfg.misspecify_q || cfg.misspecify_pi || cfg.misspecify_mu;
    let ds_mis = if needs_mis {
        Some(misspecify_proxies(&ds))
    } else {
        None
    };
    if cfg.mar_enabled {
        let est =
            mar_estimate(cfg, &ds, ds_mis.as_ref()).unwrap_or_else(|_| EstimatePoint::failed());
        Ok(RepResult {
            estimates: vec![est],
        })
    } else {
        Ok(RepResult {
            estimates: complete_data_estimates(cfg, &ds, ds_mis.as_ref()),
        })
    }
}

struct HSide {
    values: Vec<f64>,
    grad: DMatrix<f64>,
    instr: DMatrix<f64>,
}

struct QSide {
    values: Vec<f64>,
    grad: DMatrix<f64>,
    instr: DMatrix<f64>,
    clipped: bool,
    converged: bool,
}

fn fit_h_side(
    ds_h: &Dataset,
    ridge_h: f64,
    mode: OutcomeBridgeMode<'_>,
) -> Result<HSide> {
    let rows_all: Vec<usize> = (0..ds_h.n_rows()).collect();
    let basis = FittedBasis::fit(ds_h, &BasisSpec::linear_wc(), &rows_all)?;
    let instr = FittedBasis::fit(ds_h, &BasisSpec::linear_zb(), &rows_all)?;
    let ridge = if ridge_h > 0.0 {
        Ridge::intercept_free(ridge_h, basis.ncols())
    } else {
        Ridge::none()
    };
    let model = fit_outcome_bridge(ds_h, &basis, &instr, &ridge, mode)?;
    let values = model.eval_all(ds_h)?;
    let grad = basis.eval_rows(ds_h, &rows_all)?;
    let instr_m = source_rows_matrix(ds_h, &instr)?;
    Ok(HSide {
        values,
        grad,
        instr: instr_m,
    })
}

fn fit_q_side(ds_q: &Dataset, ridge_q: f64) -> Result<QSide> {
    let rows_all: Vec<usize> = (0..ds_q.n_rows()).collect();
    let basis = FittedBasis::fit(ds_q, &BasisSpec::linear_zb(), &rows_all)?;
    let instr = FittedBasis::fit(ds_q, &BasisSpec::cubed_wc(), &rows_all)?;
    let ridge = if ridge_q > 0.0 {
        Ridge::intercept_free(ridge_q, basis.ncols())
    } else {
        Ridge::none()
    };
    let model = fit_trial_bridge(ds_q, BridgeForm::ExpLinear, &basis, &instr, &ridge, None)?;

    let src = ds_q.source_rows();
    let (vals_src, clips) = model.eval_rows_counting(ds_q, &src)?;
    let n = ds_q.n_rows();
    let mut values = vec![0.0; n];
    let k = basis.ncols();
    let mut grad = DMatrix::<f64>::zeros(n, k);
    let mut buf = Vec::with_capacity(k);
    for (pos, &i) in src.iter().enumerate() {
        values[i] = vals_src[pos];
        basis.eval_row(ds_q, i, &mut buf)?;
        for (j, b) in buf.iter().enumerate() {
            grad[(i, j)] = vals_src[pos] * b; // d q / d xi = q * b
        }
    }
    let instr_m = {
        let mut m = DMatrix::<f64>::zeros(n, instr.ncols());
        let mut cbuf = Vec::with_capacity(instr.ncols());
        for i in 0..n {
            instr.eval_row(ds_q, i, &mut cbuf)?;
            for (j, c) in cbuf.iter().enumerate() {
                m[(i, j)] = *c;
            }
        }
        m
    };
    Ok(QSide {
        values,
        grad,
        instr: instr_m,
        clipped: clips > 0 || model.diagnostics.clipped,
        converged: model.diagnostics.converged,
    })
}

/// Instrument rows for source rows, zero-padded elsewhere (target rows never
/// enter the S-weighted moments).
fn source_rows_matrix(ds: &Dataset, basis: &FittedBasis) -> Result<DMatrix<f64>> {
    let n = ds.n_rows();
    let mut m = DMatrix::<f64>::zeros(n, basis.ncols());
    let mut buf = Vec::with_capacity(basis.ncols());
    for i in 0..n {
        if ds.is_source(i) {
            basis.eval_row(ds, i, &mut buf)?;
            for (j, v) in buf.iter().enumerate() {
                m[(i, j)] = *v;
            }
        }
    }
    Ok(m)
}

fn complete_data_estimates(
    cfg: &ExperimentConfig,
    ds: &Dataset,
    ds_mis: Option<&Dataset>,
) -> Vec<EstimatePoint> {
    let pick = |flag: bool| -> &Dataset {
        if flag {
            ds_mis.unwrap()
        } else {
            ds
        }
    };
    let h_side = fit_h_side(pick(cfg.misspecify_h), cfg.ridge_h, OutcomeBridgeMode::CompleteData);
    let q_side = fit_q_side(pick(cfg.misspecify_q), cfg.ridge_q);

    let psi_h_est = h_side.as_ref().ok().and_then(|h| {
        let point = psi_h(ds, &h.values).ok()?;
        let se = se_psi_h_parametric(ds, &h.values, &h.grad, &h.instr, point).ok()?;
        Some(EstimatePoint {
            point,
            se,
            converged: true,
            clipped: false,
        })
    });
    let psi_q_est = q_side.as_ref().ok().and_then(|q| {
        let point = psi_q(ds, &q.values).ok()?;
        let se = se_psi_q_parametric(ds, &q.values, &q.grad, &q.instr, point).ok()?;
        Some(EstimatePoint {
            point,
            se,
            converged: q.converged,
            clipped: q.clipped,
        })
    });
    let psi_dr_est = match (&h_side, &q_side) {
        (Ok(h), Ok(q)) => {
            let clipped = q.clipped;
            psi_dr(ds, &h.values, &q.values).ok().map(|point| {
                let se = se_psi_dr(ds, &h.values, &q.values, point);
                EstimatePoint {
                    point,
                    se,
                    converged: q.converged,
                    clipped,
                }
            })
        }
        _ => None,
    };
    vec![
        psi_h_est.unwrap_or_else(EstimatePoint::failed),
        psi_q_est.unwrap_or_else(EstimatePoint::failed),
        psi_dr_est.unwrap_or_else(EstimatePoint::failed),
    ]
}

fn mar_estimate(
    cfg: &ExperimentConfig,
    ds: &Dataset,
    ds_mis: Option<&Dataset>,
) -> Result<EstimatePoint> {
    let pick = |flag: bool| -> &Dataset {
        if flag {
            ds_mis.unwrap()
        } else {
            ds
        }
    };
    let n = ds.n_rows();
    let src = ds.source_rows();

    // Dropout model: logistic regression linear in all covariates.
    let ds_pi = pick(cfg.misspecify_pi);
    let pi_design = stack_rows(ds_pi, &src, |ds, i, out| {
        out.push(1.0);
        out.extend_from_slice(ds.z_row(i).unwrap());
        out.extend_from_slice(ds.w_row(i));
        out.push(f64::from(ds.a(i).unwrap()));
        out.extend_from_slice(ds.x_row(i));
    })?;
    let pi_resp: Vec<f64> = src.iter().map(|&i| f64::from(ds_pi.delta(i))).collect();
    let pi_fit = fit_logistic_irls(&pi_design, &pi_resp, 100, 1e-10)?;
    let mut pi = vec![1.0; n];
    for (pos, &i) in src.iter().enumerate() {
        pi[i] = pi_fit.predict_row(pi_design.row(pos).transpose().as_slice());
    }

    // Outcome model with full treatment interaction, fit on observed rows.
    let ds_mu = pick(cfg.misspecify_mu);
    let observed: Vec<usize> = src.iter().copied().filter(|&i| ds.delta(i) == 1).collect();
    let mu_design = stack_rows(ds_mu, &observed, |ds, i, out| {
        mu_row(ds, i, f64::from(ds.a(i).unwrap()), out);
    })?;
    let mu_resp =
        DVector::from_iterator(observed.len(), observed.iter().map(|&i| ds.y(i).unwrap()));
    let mu_fit = fit_linear(&mu_design, &mu_resp, None, 0.0, None)?;
    let mut mu1 = vec![0.0; n];
    let mut mu0 = vec![0.0; n];
    let mut mu_obs = vec![0.0; n];
    let mut buf = Vec::new();
    for &i in &src {
        mu_row(ds_mu, i, 1.0, &mut buf);
        mu1[i] = mu_fit.predict_row(&buf);
        mu_row(ds_mu, i, 0.0, &mut buf);
        mu0[i] = mu_fit.predict_row(&buf);
        mu_row(ds_mu, i, f64::from(ds_mu.a(i).unwrap()), &mut buf);
        mu_obs[i] = mu_fit.predict_row(&buf);
    }

    let q_side = fit_q_side(pick(cfg.misspecify_q), cfg.ridge_q)?;
    let h_side = fit_h_side(
        pick(cfg.misspecify_h),
        cfg.ridge_h,
        OutcomeBridgeMode::Mar(MarNuisance {
            pi: &pi,
            mu1: &mu1,
            mu0: &mu0,
            mu_obs: &mu_obs,
        }),
    )?;

    let nu = MarValues {
        pi: &pi,
        mu1: &mu1,
        mu0: &mu0,
        mu_obs: &mu_obs,
    };
    let point = psi_mar(ds, &h_side.values, &q_side.values, &nu)?;
    let se = se_psi_mar(ds, &h_side.values, &q_side.values, &nu, point);
    Ok(EstimatePoint {
        point,
        se,
        converged: q_side.converged && pi_fit.converged,
        clipped: q_side.clipped,
    })
}

/// Design row (1, Z, W, X, a, aZ, aW, aX) for the interacted outcome model.
fn mu_row(ds: &Dataset, i: usize, a: f64, out: &mut Vec<f64>) {
    out.clear();
    out.push(1.0);
    let z = ds.z_row(i).unwrap();
    out.extend_from_slice(z);
    out.extend_from_slice(ds.w_row(i));
    out.extend_from_slice(ds.x_row(i));
    out.push(a);
    for v in z {
        out.push(a * v);
    }
    for v in ds.w_row(i) {
        out.push(a * v);
    }
    for v in ds.x_row(i) {
        out.push(a * v);
    }
}

fn stack_rows(
    ds: &Dataset,
    rows: &[usize],
    fill: impl Fn(&Dataset, usize, &mut Vec<f64>),
) -> Result<DMatrix<f64>> {
    let mut buf = Vec::new();
    fill(ds, rows[0], &mut buf);
    let k = buf.len();
    let mut m = DMatrix::<f64>::zeros(rows.len(), k);
    for (pos, &i) in rows.iter().enumerate() {
        buf.clear();
        fill(ds, i, &mut buf);
        debug_assert_eq!(buf.len(), k);
        for (j, v) in buf.iter().enumerate() {
            m[(pos, j)] = *v;
        }
    }
    Ok(m)
}
