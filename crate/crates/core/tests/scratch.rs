// Temporary debugging probes. Deleted before release.

use nalgebra::DVector;
use proxidc::bridge::{
    fit_outcome_bridge, fit_trial_bridge, BridgeForm, OutcomeBridgeMode, Ridge,
};
use proxidc::data::{BasisSpec, FittedBasis};
use proxidc::sim::{closed_form_bridges, generate_full_data, DgpParams, ExperimentConfig};

#[test]
#[ignore]
fn probe_marginals() {
    let p = DgpParams::defaults();
    let full = generate_full_data(&p, 100_000, true, 1, 0).unwrap();
    let ds = &full.dataset;
    let n = ds.n_rows();
    let n0 = ds.target_rows().len();
    let src = ds.source_rows();
    let miss = src.iter().filter(|&&i| ds.delta(i) == 0).count();
    println!("P(S=0) = {:.4}", n0 as f64 / n as f64);
    println!("P(delta=0 | S=1) = {:.4}", miss as f64 / src.len() as f64);
    // mean of X, W over all rows
    let mx: f64 = (0..n).map(|i| ds.x_row(i).iter().sum::<f64>()).sum::<f64>() / n as f64;
    let mw: f64 = (0..n).map(|i| ds.w_row(i).iter().sum::<f64>()).sum::<f64>() / n as f64;
    println!("mean sum X = {mx:.4} (expect 1.5), mean sum W = {mw:.4} (expect ~0)");
}

#[test]
#[ignore]
fn probe_bridge_fits_large_n() {
    let cfg = ExperimentConfig::for_experiment(1, 1_000_000, 1, 2024).unwrap();
    let full = generate_full_data(&cfg.dgp, cfg.n, false, cfg.base_seed, 0).unwrap();
    let ds = &full.dataset;
    let rows: Vec<usize> = (0..ds.n_rows()).collect();
    let c = FittedBasis::fit(ds, &BasisSpec::linear_wc(), &rows).unwrap();
    let b = FittedBasis::fit(ds, &BasisSpec::linear_zb(), &rows).unwrap();
    let c3 = FittedBasis::fit(ds, &BasisSpec::cubed_wc(), &rows).unwrap();

    let (eta_star, xi_star) = closed_form_bridges(&cfg.dgp).unwrap();
    let h = fit_outcome_bridge(ds, &c, &b, &Ridge::none(), OutcomeBridgeMode::CompleteData)
        .unwrap();
    println!("eta_hat  = {:?}", h.coef.as_slice());
    println!("eta_star = {:?}", eta_star.as_slice());
    let q = fit_trial_bridge(ds, BridgeForm::ExpLinear, &b, &c3, &Ridge::none(), None).unwrap();
    println!("xi_hat  = {:?}", q.coef.as_slice());
    println!("xi_star = {:?}", xi_star.as_slice());
    println!(
        "q diag: converged {} iters {} grad {:.2e} cond {:.2e}",
        q.diagnostics.converged,
        q.diagnostics.iterations,
        q.diagnostics.grad_norm,
        q.diagnostics.condition
    );
    let dh: f64 = (0..7)
        .map(|j| (h.coef[j] - eta_star[j]).abs())
        .fold(0.0, f64::max);
    let dq: f64 = (0..7)
        .map(|j| (q.coef[j] - xi_star[j]).abs())
        .fold(0.0, f64::max);
    println!("max|eta-eta*| = {dh:.4}, max|xi-xi*| = {dq:.4}");
}

#[test]
#[ignore]
fn probe_one_replication() {
    let cfg = ExperimentConfig::for_experiment(1, 1000, 1, 7).unwrap();
    for rep in 0..5u64 {
        let full = generate_full_data(&cfg.dgp, cfg.n, false, cfg.base_seed, rep).unwrap();
        let ds = &full.dataset;
        let rows: Vec<usize> = (0..ds.n_rows()).collect();
        let c = FittedBasis::fit(ds, &BasisSpec::linear_wc(), &rows).unwrap();
        let b = FittedBasis::fit(ds, &BasisSpec::linear_zb(), &rows).unwrap();
        let c3 = FittedBasis::fit(ds, &BasisSpec::cubed_wc(), &rows).unwrap();
        let h =
            fit_outcome_bridge(ds, &c, &b, &Ridge::none(), OutcomeBridgeMode::CompleteData)
                .unwrap();
        let q =
            fit_trial_bridge(ds, BridgeForm::ExpLinear, &b, &c3, &Ridge::none(), None).unwrap();
        let h_vals = h.eval_all(ds).unwrap();
        let src = ds.source_rows();
        let (qv, _) = q.eval_rows_counting(ds, &src).unwrap();
        let mut q_vals = vec![0.0; ds.n_rows()];
        for (p, &i) in src.iter().enumerate() {
            q_vals[i] = qv[p];
        }
        let psi_h = proxidc::estimate::psi_h(ds, &h_vals).unwrap();
        let psi_q = proxidc::estimate::psi_q(ds, &q_vals).unwrap();
        let psi_dr = proxidc::estimate::psi_dr(ds, &h_vals, &q_vals).unwrap();
        println!(
            "rep {rep}: psi_h {psi_h:.4} psi_q {psi_q:.4} psi_dr {psi_dr:.4} | eta0 {:.3} | q conv {} iters {} grad {:.1e}",
            h.coef[0],
            q.diagnostics.converged,
            q.diagnostics.iterations,
            q.diagnostics.grad_norm
        );
        let eta = DVector::from_column_slice(h.coef.as_slice());
        let m = proxidc::bridge::h_moments(ds, &eta, &c, &b).unwrap();
        println!("   h moments at fit: {:.2e}", m.amax());
    }
}

#[test]
#[ignore]
fn probe_bad_rep() {
    let cfg = ExperimentConfig::for_experiment(1, 1000, 1, 3).unwrap();
    let full = generate_full_data(&cfg.dgp, cfg.n, false, cfg.base_seed, 186).unwrap();
    let ds = &full.dataset;
    let rows: Vec<usize> = (0..ds.n_rows()).collect();
    let b = FittedBasis::fit(ds, &BasisSpec::linear_zb(), &rows).unwrap();
    let c3 = FittedBasis::fit(ds, &BasisSpec::cubed_wc(), &rows).unwrap();
    let q = fit_trial_bridge(ds, BridgeForm::ExpLinear, &b, &c3, &Ridge::none(), None).unwrap();
    println!("xi_hat = {:?}", q.coef.as_slice());
    println!(
        "converged {} iters {} grad {:.2e} cond(J) {:.2e} clipped {} near_singular {}",
        q.diagnostics.converged,
        q.diagnostics.iterations,
        q.diagnostics.grad_norm,
        q.diagnostics.condition,
        q.diagnostics.clipped,
        q.diagnostics.near_singular
    );
    let src = ds.source_rows();
    let (qv, clips) = q.eval_rows_counting(ds, &src).unwrap();
    let qmax = qv.iter().cloned().fold(0.0f64, f64::max);
    let qmin = qv.iter().cloned().fold(f64::INFINITY, f64::min);
    println!("q range [{qmin:.3e}, {qmax:.3e}], clips {clips}");
    // Examine the M matrix condition used by the SE
    use nalgebra::DMatrix;
    let n = ds.n_rows();
    let mut grad = DMatrix::<f64>::zeros(n, 7);
    let mut instr = DMatrix::<f64>::zeros(n, 7);
    let mut buf = Vec::new();
    for (pos, &i) in src.iter().enumerate() {
        b.eval_row(ds, i, &mut buf).unwrap();
        for j in 0..7 {
            grad[(i, j)] = qv[pos] * buf[j];
        }
    }
    for i in 0..n {
        c3.eval_row(ds, i, &mut buf).unwrap();
        for j in 0..7 {
            instr[(i, j)] = buf[j];
        }
    }
    let mut m = DMatrix::<f64>::zeros(7, 7);
    for &i in &src {
        for a in 0..7 {
            for bb in 0..7 {
                m[(a, bb)] += instr[(i, a)] * grad[(i, bb)] / n as f64;
            }
        }
    }
    let svd = m.clone().svd(false, false);
    println!("cond(M_xi) = {:.3e}", svd.singular_values.max() / svd.singular_values.min());
}
