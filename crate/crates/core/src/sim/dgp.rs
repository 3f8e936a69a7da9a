//! Data-generating process for the simulation lab: sequential draws of
//! (X, U, S, A, Z, W, Y, Delta), the closed-form bridge oracle, and the
//! Monte-Carlo ground truth obtained by static treatment interventions on
//! target-trial draws.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::data::{Block, Dataset};
use crate::error::Error;
use crate::regress::expit;
use crate::rng::StreamKey;
use crate::Result;

/// Law of the unobserved effect modifiers U.
#[derive(Debug, Clone, PartialEq)]
pub enum ULaw {
    /// Independent Uniform(-1, 0) coordinates.
    UniformBox { dim: usize },
    /// Identically zero (no unmeasured effect modification).
    Degenerate { dim: usize },
}

impl ULaw {
    pub fn dim(&self) -> usize {
        match self {
            ULaw::UniformBox { dim } | ULaw::Degenerate { dim } => *dim,
        }
    }
}

/// Full parameterization of the data-generating process.
///
/// Scalars are `b_*`, vectors `beta_*`, matrices `mat_*`. Proxy blocks are
/// three-dimensional; U may be three-dimensional, scalar, or degenerate.
#[derive(Debug, Clone, PartialEq)]
pub struct DgpParams {
    pub u_law: ULaw,
    /// Off-diagonal correlation of the Gaussian copula behind X.
    pub copula_rho: f64,

    // Trial selection model.
    pub b_s: f64,
    pub beta_sx: DVector<f64>,
    pub beta_su: DVector<f64>,

    /// Treated-arm probability in the source trial.
    pub b_a: f64,

    // Reweighting proxy model.
    pub beta_z: DVector<f64>,
    pub mat_zu: DMatrix<f64>,
    pub mat_zx: DMatrix<f64>,
    pub sigma_z: DMatrix<f64>,

    // Adjustment proxy model. `b_ws` shifts the mean by S (zero by default).
    pub beta_w: DVector<f64>,
    pub b_ws: f64,
    pub mat_wu: DMatrix<f64>,
    pub mat_wx: DMatrix<f64>,
    pub sigma_w: DMatrix<f64>,

    // Outcome model.
    pub b_y: f64,
    pub b_ya: f64,
    pub beta_yu: DVector<f64>,
    pub beta_yau: DVector<f64>,
    pub beta_yx: DVector<f64>,
    pub beta_yw: DVector<f64>,
    pub beta_yaw: DVector<f64>,
    pub beta_yz: DVector<f64>,
    pub beta_yaz: DVector<f64>,
    pub sigma_y: f64,

    // Missingness model coefficients on (Z, W, A, X).
    pub miss_z: f64,
    pub miss_w: f64,
    pub miss_a: f64,
    pub miss_x: f64,
}

impl DgpParams {
    /// Default parameterization used by the main experiments.
    ///
    /// The proxy noise is 0.25 per coordinate on the standard-deviation
    /// scale (covariance 0.0625 I), which is the scale the reference
    /// experiments' summary statistics correspond to.
    pub fn defaults() -> Self {
        let ones3 = DVector::from_element(3, 1.0);
        let half3 = DVector::from_element(3, 0.5);
        let zeros3 = DVector::zeros(3);
        let eye = DMatrix::<f64>::identity(3, 3);
        Self {
            u_law: ULaw::UniformBox { dim: 3 },
            copula_rho: 0.25,
            b_s: -0.625,
            beta_sx: half3.clone(),
            beta_su: half3,
            b_a: 0.5,
            beta_z: zeros3.clone(),
            mat_zu: eye.clone(),
            mat_zx: eye.clone(),
            sigma_z: &eye * 0.0625,
            beta_w: zeros3,
            b_ws: 0.0,
            mat_wu: eye.clone(),
            mat_wx: eye.clone(),
            sigma_w: &eye * 0.0625,
            b_y: 0.5,
            b_ya: -1.0,
            beta_yu: ones3.clone(),
            beta_yau: ones3.clone(),
            beta_yx: ones3.clone(),
            beta_yw: ones3.clone(),
            beta_yaw: ones3,
            beta_yz: DVector::zeros(3),
            beta_yaz: DVector::zeros(3),
            sigma_y: 0.5,
            miss_z: 0.1,
            miss_w: 0.1,
            miss_a: 0.7,
            miss_x: 0.3,
        }
    }

    pub fn u_dim(&self) -> usize {
        self.u_law.dim()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.b_a > 0.0 && self.b_a < 1.0) {
            return Err(Error::InvalidPropensity(self.b_a));
        }
        for (name, m) in [("sigma_z", &self.sigma_z), ("sigma_w", &self.sigma_w)] {
            if m.clone().cholesky().is_none() {
                return Err(Error::Config(format!("{name} is not positive definite")));
            }
        }
        Ok(())
    }
}

/// Draw-site identifiers within a replication stream.
pub(crate) mod block_ids {
    pub const X: u64 = 0;
    pub const U: u64 = 1;
    pub const S: u64 = 2;
    pub const A: u64 = 3;
    pub const Z: u64 = 4;
    pub const W: u64 = 5;
    pub const Y: u64 = 6;
    pub const DELTA: u64 = 7;
    /// Offset separating truth-calculation streams from replication streams.
    pub const TRUTH: u64 = 100;
    /// Offset for the bundled synthetic fixtures.
    pub const FIXTURE: u64 = 200;
}

/// A generated dataset plus the latent effect modifiers (diagnostics only).
#[derive(Debug, Clone)]
pub struct FullData {
    pub dataset: Dataset,
    /// Row-major n x u_dim latent draws.
    pub latent_u: Vec<f64>,
}

pub(crate) struct LatentDraws {
    pub(crate) x: Vec<f64>,
    pub(crate) u: Vec<f64>,
    pub(crate) s: Vec<u8>,
    pub(crate) a: Vec<i8>,
    pub(crate) z: Vec<f64>,
    pub(crate) w: Vec<f64>,
    pub(crate) y: Vec<f64>,
    pub(crate) delta: Vec<u8>,
}

fn copula_chol(rho: f64) -> DMatrix<f64> {
    let mut sigma = DMatrix::from_element(3, 3, rho);
    for i in 0..3 {
        sigma[(i, i)] = 1.0;
    }
    sigma.cholesky().expect("copula correlation matrix").l()
}

pub(crate) fn draw_latent(
    p: &DgpParams,
    n: usize,
    seed: u64,
    rep: u64,
    block_offset: u64,
    mar_enabled: bool,
) -> LatentDraws {
    let ud = p.u_dim();
    let lx = copula_chol(p.copula_rho);
    let lz = p.sigma_z.clone().cholesky().expect("sigma_z").l();
    let lw = p.sigma_w.clone().cholesky().expect("sigma_w").l();
    let std_norm = Normal::standard();

    // X: Gaussian copula, componentwise standard normal CDF.
    let mut x = vec![0.0; n * 3];
    {
        let mut rng = StreamKey::new(seed, rep, block_offset + block_ids::X).rng();
        let mut g = [0.0f64; 3];
        for i in 0..n {
            for gj in g.iter_mut() {
                *gj = StandardNormal.sample(&mut rng);
            }
            for j in 0..3 {
                let mut v = 0.0;
                for t in 0..=j {
                    v += lx[(j, t)] * g[t];
                }
                x[i * 3 + j] = std_norm.cdf(v);
            }
        }
    }

    // U.
    let mut u = vec![0.0; n * ud];
    if let ULaw::UniformBox { .. } = p.u_law {
        let mut rng = StreamKey::new(seed, rep, block_offset + block_ids::U).rng();
        for v in u.iter_mut() {
            *v = rng.random::<f64>() - 1.0; // Uniform(-1, 0)
        }
    }

    // S | (X, U).
    let mut s = vec![0u8; n];
    {
        let mut rng = StreamKey::new(seed, rep, block_offset + block_ids::S).rng();
        for i in 0..n {
            let mut lin = p.b_s;
            for j in 0..3 {
                lin += p.beta_sx[j] * x[i * 3 + j];
            }
            for j in 0..ud {
                lin += p.beta_su[j] * u[i * ud + j];
            }
            s[i] = u8::from(rng.random::<f64>() < expit(lin));
        }
    }

    // A: Bernoulli(b_a), drawn for every row, observed only in the source.
    let mut a = vec![0i8; n];
    {
        let mut rng = StreamKey::new(seed, rep, block_offset + block_ids::A).rng();
        for ai in a.iter_mut() {
            *ai = i8::from(rng.random::<f64>() < p.b_a);
        }
    }

    // Z | (X, U): latent everywhere, recorded only in the source.
    let mut z = vec![0.0; n * 3];
    {
        let mut rng = StreamKey::new(seed, rep, block_offset + block_ids::Z).rng();
        let mut g = [0.0f64; 3];
        for i in 0..n {
            for gj in g.iter_mut() {
                *gj = StandardNormal.sample(&mut rng);
            }
            for j in 0..3 {
                let mut mean = p.beta_z[j];
                for t in 0..ud {
                    mean += p.mat_zu[(j, t)] * u[i * ud + t];
                }
                for t in 0..3 {
                    mean += p.mat_zx[(j, t)] * x[i * 3 + t];
                }
                let mut noise = 0.0;
                for t in 0..=j {
                    noise += lz[(j, t)] * g[t];
                }
                z[i * 3 + j] = mean + noise;
            }
        }
    }

    // W | (X, U, S).
    let mut w = vec![0.0; n * 3];
    {
        let mut rng = StreamKey::new(seed, rep, block_offset + block_ids::W).rng();
        let mut g = [0.0f64; 3];
        for i in 0..n {
            for gj in g.iter_mut() {
                *gj = StandardNormal.sample(&mut rng);
            }
            for j in 0..3 {
                let mut mean = p.beta_w[j] + p.b_ws * f64::from(s[i]);
                for t in 0..ud {
                    mean += p.mat_wu[(j, t)] * u[i * ud + t];
                }
                for t in 0..3 {
                    mean += p.mat_wx[(j, t)] * x[i * 3 + t];
                }
                let mut noise = 0.0;
                for t in 0..=j {
                    noise += lw[(j, t)] * g[t];
                }
                w[i * 3 + j] = mean + noise;
            }
        }
    }

    // Y | (Z, W, A, X, U).
    let mut y = vec![0.0; n];
    {
        let mut rng = StreamKey::new(seed, rep, block_offset + block_ids::Y).rng();
        for i in 0..n {
            let eps: f64 = StandardNormal.sample(&mut rng);
            y[i] = outcome_mean(p, &x[i * 3..i * 3 + 3], &u[i * ud..i * ud + ud],
                &w[i * 3..i * 3 + 3], &z[i * 3..i * 3 + 3], a[i]) + p.sigma_y * eps;
        }
    }

    // Delta | (Z, W, A, X) in the source trial.
    let mut delta = vec![1u8; n];
    if mar_enabled {
        let mut rng = StreamKey::new(seed, rep, block_offset + block_ids::DELTA).rng();
        for i in 0..n {
            let mut lin = p.miss_a * f64::from(a[i]);
            for j in 0..3 {
                lin += p.miss_z * z[i * 3 + j] + p.miss_w * w[i * 3 + j] + p.miss_x * x[i * 3 + j];
            }
            delta[i] = u8::from(rng.random::<f64>() < expit(lin));
        }
    }

    LatentDraws {
        x,
        u,
        s,
        a,
        z,
        w,
        y,
        delta,
    }
}

/// Conditional mean of Y given proxies, covariates, latent U, and arm.
pub(crate) fn outcome_mean(p: &DgpParams, x: &[f64], u: &[f64], w: &[f64], z: &[f64], a: i8) -> f64 {
    let af = f64::from(a);
    let mut m = p.b_y + p.b_ya * af;
    for j in 0..u.len() {
        m += (p.beta_yu[j] + af * p.beta_yau[j]) * u[j];
    }
    for j in 0..3 {
        m += p.beta_yx[j] * x[j];
        m += (p.beta_yw[j] + af * p.beta_yaw[j]) * w[j];
        m += (p.beta_yz[j] + af * p.beta_yaz[j]) * z[j];
    }
    m
}

/// Difference in outcome means between arms 1 and 0 at the drawn covariates.
fn conditional_effect(p: &DgpParams, u: &[f64], w: &[f64], z: &[f64]) -> f64 {
    let mut c = p.b_ya;
    for j in 0..u.len() {
        c += p.beta_yau[j] * u[j];
    }
    for j in 0..3 {
        c += p.beta_yaw[j] * w[j] + p.beta_yaz[j] * z[j];
    }
    c
}

/// Generates one observed-data replication: the observed columns follow
/// (S, S Delta, S A, X, W, S Z, S Delta Y); target rows blank out a, y, z.
/// Output is bitwise-deterministic in `(base_seed, rep_index)`.
pub fn generate_full_data(
    p: &DgpParams,
    n: usize,
    mar_enabled: bool,
    base_seed: u64,
    rep_index: u64,
) -> Result<FullData> {
    if n < 50 {
        return Err(Error::SampleTooSmall(n));
    }
    p.validate()?;
    let draws = draw_latent(p, n, base_seed, rep_index, 0, mar_enabled);

    let names = |prefix: &str| -> Vec<String> {
        (1..=3).map(|j| format!("{prefix}_{j}")).collect()
    };
    let mut a = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    let mut delta = Vec::with_capacity(n);
    let mut z_present = Vec::with_capacity(n);
    let mut z_data = Vec::with_capacity(n * 3);
    for i in 0..n {
        if draws.s[i] == 1 {
            a.push(Some(draws.a[i]));
            delta.push(draws.delta[i]);
            y.push((draws.delta[i] == 1).then_some(draws.y[i]));
            z_present.push(true);
        } else {
            a.push(None);
            delta.push(1);
            y.push(None);
            z_present.push(false);
        }
        z_data.extend_from_slice(&draws.z[i * 3..i * 3 + 3]);
    }
    // Blank latent z on target rows.
    for i in 0..n {
        if draws.s[i] == 0 {
            for j in 0..3 {
                z_data[i * 3 + j] = 0.0;
            }
        }
    }

    let dataset = Dataset::from_parts(
        draws.s.clone(),
        a,
        delta,
        y,
        Block::new(names("x"), draws.x),
        Block::new(names("w"), draws.w),
        Block::new(names("z"), z_data),
        z_present,
        vec![p.b_a; n],
    )?;
    Ok(FullData {
        dataset,
        latent_u: draws.u,
    })
}

/// Monte-Carlo ground truth: draws the full covariate layer, restricts to
/// target-trial members, and averages the effect of switching the arm from
/// 0 to 1 in the outcome mean. Returns the mean and its Monte-Carlo
/// standard error.
pub fn monte_carlo_truth(p: &DgpParams, n_mc: usize, base_seed: u64) -> Result<(f64, f64)> {
    if n_mc < 1_000_000 {
        return Err(Error::TruthTooFewDraws(n_mc));
    }
    p.validate()?;
    const CHUNK: usize = 1 << 16;
    let n_chunks = n_mc.div_ceil(CHUNK);
    let partials: Vec<(f64, f64, usize)> = crate::map_indexed(n_chunks, |c| {
        let size = CHUNK.min(n_mc - c * CHUNK);
        let draws = draw_latent(p, size, base_seed, c as u64, block_ids::TRUTH, false);
        let ud = p.u_dim();
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        let mut count = 0usize;
        for i in 0..size {
            if draws.s[i] == 0 {
                let eff = conditional_effect(
                    p,
                    &draws.u[i * ud..i * ud + ud],
                    &draws.w[i * 3..i * 3 + 3],
                    &draws.z[i * 3..i * 3 + 3],
                );
                sum += eff;
                sumsq += eff * eff;
                count += 1;
            }
        }
        (sum, sumsq, count)
    });
    let (sum, sumsq, count) = partials
        .into_iter()
        .fold((0.0, 0.0, 0usize), |acc, p| (acc.0 + p.0, acc.1 + p.1, acc.2 + p.2));
    if count == 0 {
        return Err(Error::NoTargetRows);
    }
    let mean = sum / count as f64;
    let var = (sumsq / count as f64 - mean * mean).max(0.0);
    Ok((mean, (var / count as f64).sqrt()))
}

/// Closed-form bridge parameters implied by the data-generating process.
///
/// Returns `eta* = (eta_0, eta_w, eta_x)` for the linear outcome bridge on
/// the basis (1, W, X) and `xi* = (xi_0, xi_z, xi_x)` for the exp-linear
/// trial bridge on the basis (1, Z, X). Requires the proxy loading matrices
/// on U to be square and invertible; otherwise the bridge is not uniquely
/// identified by a closed form.
pub fn closed_form_bridges(p: &DgpParams) -> Result<(DVector<f64>, DVector<f64>)> {
    let ud = p.u_dim();
    if !p.mat_wu.is_square() || p.mat_wu.ncols() != ud {
        return Err(Error::NoClosedFormBridge("mat_wu"));
    }
    if !p.mat_zu.is_square() || p.mat_zu.ncols() != ud {
        return Err(Error::NoClosedFormBridge("mat_zu"));
    }
    let wu_t = p.mat_wu.transpose();
    let v = wu_t
        .lu()
        .solve(&p.beta_yau)
        .filter(|v| v.iter().all(|t| t.is_finite()))
        .ok_or(Error::NoClosedFormBridge("mat_wu"))?;
    let zu_t = p.mat_zu.transpose();
    let t = zu_t
        .lu()
        .solve(&p.beta_su)
        .filter(|v| v.iter().all(|t| t.is_finite()))
        .ok_or(Error::NoClosedFormBridge("mat_zu"))?;

    let p_w = p.mat_wu.nrows();
    let p_z = p.mat_zu.nrows();
    let mut eta = DVector::zeros(1 + p_w + 3);
    eta[0] = p.b_ya - p.beta_w.dot(&v);
    for j in 0..p_w {
        eta[1 + j] = v[j] + p.beta_yaw[j];
    }
    let eta_x = -(p.mat_wx.transpose() * &v);
    for j in 0..3 {
        eta[1 + p_w + j] = eta_x[j];
    }

    let mut xi = DVector::zeros(1 + p_z + 3);
    xi[0] = -p.b_s + p.beta_z.dot(&t) - 0.5 * (&t.transpose() * &p.sigma_z * &t)[(0, 0)];
    for j in 0..p_z {
        xi[1 + j] = -t[j];
    }
    let xi_x = &p.mat_zx.transpose() * &t - &p.beta_sx;
    for j in 0..3 {
        xi[1 + p_z + j] = xi_x[j];
    }
    Ok((eta, xi))
}
