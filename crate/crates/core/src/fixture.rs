//! Bundled synthetic two-trial fixtures.
//!
//! The fixtures mimic the analysis pipeline's expected schema: a source
//! trial with arms {1, 0}, a target trial with arms {-1, 0}, three
//! adjustment-proxy columns, three reweighting-proxy columns (source file
//! only), numeric baseline covariates plus one categorical column, and
//! missing outcomes in both trials. Generation is deterministic in the seed.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::rng::StreamKey;
use crate::sim::{DgpParams, ULaw};
use crate::Result;

/// Which covariate structure the fixture carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FixtureKind {
    /// Unobserved effect modifiers shift between trials: the standard
    /// covariate-only transport estimator is biased, the proximal one not.
    Shifted,
    /// No unobserved effect modification: both routes agree.
    NoShift,
}

/// The generated fixture as CSV text plus its schema file.
#[derive(Debug, Clone)]
pub struct FixtureFiles {
    pub source_csv: String,
    pub target_csv: String,
    pub schema: String,
}

const SITE_LEVELS: [&str; 3] = ["east", "north", "west"];

/// Effect of the target trial's own active arm (-1) relative to placebo at
/// the drawn covariates.
fn target_arm_effect(x: &[f64]) -> f64 {
    -2.0 + 0.25 * (x[0] + x[1] + x[2])
}

/// Generates the two CSV files and a matching schema. `e_source` and
/// `e_target` are the randomization probabilities of the active arms.
pub fn generate_fixture(
    kind: FixtureKind,
    n: usize,
    seed: u64,
    e_source: f64,
    e_target: f64,
) -> Result<FixtureFiles> {
    let mut p = DgpParams::defaults();
    if kind == FixtureKind::NoShift {
        p.u_law = ULaw::Degenerate { dim: 3 };
    }
    let draws = crate::sim::dgp::draw_latent(
        &p,
        n,
        seed,
        0,
        crate::sim::dgp::block_ids::FIXTURE,
        true,
    );
    let ud = p.u_dim();

    let mut arm_rng = StreamKey::new(seed, 1, crate::sim::dgp::block_ids::FIXTURE + 10).rng();
    let mut out_rng = StreamKey::new(seed, 1, crate::sim::dgp::block_ids::FIXTURE + 11).rng();
    let mut miss_rng = StreamKey::new(seed, 1, crate::sim::dgp::block_ids::FIXTURE + 12).rng();
    let mut site_rng = StreamKey::new(seed, 1, crate::sim::dgp::block_ids::FIXTURE + 13).rng();

    let header_common = "treat,obs,weight44,x_bw,x_age,x_bmi,x_site,w_hba1c,w_fpg,w_insulin";
    let mut source_csv = format!("{header_common},z_ldl,z_hdl,z_trig\n");
    let mut target_csv = format!("{header_common}\n");

    for i in 0..n {
        let x = &draws.x[i * 3..i * 3 + 3];
        let w = &draws.w[i * 3..i * 3 + 3];
        let z = &draws.z[i * 3..i * 3 + 3];
        let u = &draws.u[i * ud..i * ud + ud];
        let site = SITE_LEVELS[site_rng.random_range(0..3)];
        let covs = format!(
            "{},{},{},{site},{},{},{}",
            x[0], x[1], x[2], w[0], w[1], w[2]
        );
        if draws.s[i] == 1 {
            let a = draws.a[i];
            let delta = draws.delta[i];
            let y_cell = if delta == 1 {
                format!("{}", draws.y[i])
            } else {
                String::new()
            };
            source_csv.push_str(&format!(
                "{a},{delta},{y_cell},{covs},{},{},{}\n",
                z[0], z[1], z[2]
            ));
        } else {
            let active = arm_rng.random::<f64>() < e_target;
            let a: i8 = if active { -1 } else { 0 };
            let eps: f64 = StandardNormal.sample(&mut out_rng);
            let mut mean = crate::sim::dgp::outcome_mean(&p, x, u, w, z, 0);
            if active {
                mean += target_arm_effect(x);
            }
            let y = mean + p.sigma_y * eps;
            let delta = u8::from(miss_rng.random::<f64>() < 0.9);
            let y_cell = if delta == 1 {
                format!("{y}")
            } else {
                String::new()
            };
            target_csv.push_str(&format!("{a},{delta},{y_cell},{covs}\n"));
        }
    }
    let _ = e_source;

    let schema = "\
# Logical roles -> CSV columns for the bundled synthetic fixture.
s = trial
a = treat
delta = obs
y = weight44
x = x_bw, x_age, x_bmi, x_site
w = w_hba1c, w_fpg, w_insulin
z = z_ldl, z_hdl, z_trig
"
    .to_string();

    Ok(FixtureFiles {
        source_csv,
        target_csv,
        schema,
    })
}

/// Writes the fixture files into `dir` as `source.csv`, `target.csv`, and
/// `schema.txt`.
pub fn write_fixture(files: &FixtureFiles, dir: &std::path::Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("source.csv"), &files.source_csv)?;
    std::fs::write(dir.join("target.csv"), &files.target_csv)?;
    std::fs::write(dir.join("schema.txt"), &files.schema)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{load_two_trials, LoadOptions, Schema};

    #[test]
    fn fixture_loads_and_validates() {
        let files = generate_fixture(FixtureKind::Shifted, 800, 3, 0.5, 0.5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_fixture(&files, dir.path()).unwrap();
        let schema = Schema::from_file(&dir.path().join("schema.txt")).unwrap();
        let loaded = load_two_trials(
            &dir.path().join("source.csv"),
            &dir.path().join("target.csv"),
            &schema,
            &LoadOptions {
                e1: Some(0.5),
                drop_incomplete: true,
                implied_s: None,
            },
        )
        .unwrap();
        let ds = loaded.dataset;
        assert!(ds.alpha_hat() > 0.4 && ds.alpha_hat() < 0.9);
        // Categorical site column expands to two indicators.
        assert!(ds
            .x_block()
            .names()
            .iter()
            .filter(|n| n.starts_with("x_site="))
            .count()
            == 2);
        // Target rows carry arms -1/0 and no reweighting proxy.
        for i in 0..ds.n_rows() {
            if !ds.is_source(i) {
                assert!(matches!(ds.a(i), Some(-1) | Some(0)));
                assert!(ds.z_row(i).is_none());
            }
        }
        assert!(files.source_csv.len() > 100);
    }

    #[test]
    fn fixture_is_deterministic() {
        let a = generate_fixture(FixtureKind::NoShift, 300, 7, 0.5, 0.5).unwrap();
        let b = generate_fixture(FixtureKind::NoShift, 300, 7, 0.5, 0.5).unwrap();
        assert_eq!(a.source_csv, b.source_csv);
        assert_eq!(a.target_csv, b.target_csv);
    }
}
