//! Gaussian variational EM.
//!
//! Each person gets a Gaussian posterior `q_i = N(mu_i, Sigma_i)`; the
//! logistic term of the joint density is replaced by its quadratic local
//! bound, which makes every coordinate update closed form. One iteration
//! runs: local parameters `xi`, item parameters `(A, B)`, the latent
//! covariance (confirmatory mode only), then the per-person posteriors.
//! Every step exactly maximizes the bound in its block, so
//! [`expected_elbo`] never decreases.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{self, CholFactor};
use crate::model::{dot, LoadingStructure, ModelParams, ResponseMatrix, VariationalState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Confirmatory,
    Exploratory,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Confirmatory => "confirmatory",
            Mode::Exploratory => "exploratory",
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GvemConfig {
    /// Stop when `|dA| + |dB| + |dSigma| <= tol` (Euclidean norms).
    pub tol: f64,
    pub max_iter: usize,
    pub mode: Mode,
}

impl Default for GvemConfig {
    fn default() -> Self {
        Self {
            tol: 1e-4,
            max_iter: 500,
            mode: Mode::Confirmatory,
        }
    }
}

impl GvemConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) {
            return Err(Error::Config(format!("gvem tol must be positive, got {}", self.tol)));
        }
        if self.max_iter == 0 {
            return Err(Error::Config("gvem max_iter must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct GvemFit {
    pub params: ModelParams,
    pub vstate: VariationalState,
    pub n_iters: usize,
    pub converged: bool,
    /// Bound value after initialization and after every iteration.
    pub elbo_trace: Vec<f64>,
}

/// Closed-form Gaussian posterior for one person given local parameters `xi`:
/// precision `Sigma_theta^{-1} + 2 sum_j eta(xi_j) a_j a_j^T`, mean
/// `Sigma_i sum_j (2 eta(xi_j) b_j + y_j - 1/2) a_j`.
pub fn estep_person(
    y: &[u8],
    params: &ModelParams,
    xi: &[f64],
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if y.len() != params.n_items() || xi.len() != params.n_items() {
        return Err(Error::Dimension(format!(
            "{} responses and {} local parameters for {} items",
            y.len(),
            xi.len(),
            params.n_items()
        )));
    }
    let prior_precision = math::spd_inverse(&params.sigma_theta)?;
    let a = params.a_row_major();
    let (mu, sigma) = estep_core(y, &a, params.b.as_slice(), &prior_precision, xi)?;
    Ok((DVector::from_vec(mu), sigma))
}

fn estep_core(
    y: &[u8],
    a: &[f64],
    b: &[f64],
    prior_precision: &DMatrix<f64>,
    xi: &[f64],
) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let k = prior_precision.nrows();
    let mut precision = prior_precision.clone();
    let mut rhs = vec![0.0; k];
    for (j, (&yj, &x)) in y.iter().zip(xi).enumerate() {
        if x < 0.0 {
            return Err(Error::Domain(format!("negative local parameter {x}")));
        }
        let alpha = &a[j * k..(j + 1) * k];
        let e = math::eta(x);
        let w = 2.0 * e * b[j] + f64::from(yj) - 0.5;
        for r in 0..k {
            rhs[r] += w * alpha[r];
            let s = 2.0 * e * alpha[r];
            if s != 0.0 {
                for c in 0..k {
                    precision[(r, c)] += s * alpha[c];
                }
            }
        }
    }
    let chol = CholFactor::new(&precision)
        .map_err(|_| Error::Singular("posterior precision is not positive definite".into()))?;
    let sigma = chol.inverse();
    chol.solve_in_place(&mut rhs);
    Ok((rhs, sigma))
}

/// Optimal local parameters for one person:
/// `xi_j^2 = E_q[(b_j - a_j . theta)^2] = (b_j - a_j . mu)^2 + a_j^T Sigma_i a_j`.
pub fn update_xi(
    mu: &DVector<f64>,
    sigma: &DMatrix<f64>,
    params: &ModelParams,
) -> Result<DVector<f64>> {
    let a = params.a_row_major();
    update_xi_core(mu.as_slice(), sigma, &a, params.b.as_slice()).map(DVector::from_vec)
}

fn update_xi_core(mu: &[f64], sigma: &DMatrix<f64>, a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    let k = mu.len();
    b.iter()
        .enumerate()
        .map(|(j, &bj)| {
            let alpha = &a[j * k..(j + 1) * k];
            let resid = bj - dot(alpha, mu);
            let mut quad = 0.0;
            for r in 0..k {
                for c in 0..k {
                    quad += alpha[r] * sigma[(r, c)] * alpha[c];
                }
            }
            let sq = resid * resid + quad;
            if sq < -1e-12 {
                return Err(Error::Consistency(format!(
                    "negative squared local parameter {sq} for item {j}"
                )));
            }
            Ok(sq.max(0.0).sqrt())
        })
        .collect()
}

/// `E_q[theta theta^T] = Sigma_i + mu_i mu_i^T` for every person.
fn second_moments(vstate: &VariationalState) -> Vec<DMatrix<f64>> {
    (0..vstate.n_persons())
        .map(|i| {
            let mu = vstate.mu.row(i).transpose();
            &vstate.sigma[i] + &mu * mu.transpose()
        })
        .collect()
}

/// Item-parameter update maximizing the expected bound for fixed `q` and `xi`.
///
/// For item `j` with free factors `r`, the expected bound is a concave
/// quadratic in `(a_jr, b_j)`; this solves its stationarity system jointly,
/// so at the returned values both
/// `b_j = [sum_i (1/2 - y_ij) + 2 sum_i eta_ij a_j . mu_i] / (2 sum_i eta_ij)` and
/// `[2 sum_i eta_ij E(theta theta^T)]_rr a_jr = sum_i (y_ij - 1/2 + 2 eta_ij b_j) mu_ir`
/// hold. Constrained entries are written as exact zeros.
pub fn mstep_item(
    responses: &ResponseMatrix,
    vstate: &VariationalState,
    structure: &LoadingStructure,
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let n = responses.n_persons();
    let j_items = responses.n_items();
    let k = structure.n_factors();
    if vstate.n_persons() != n || vstate.xi.ncols() != j_items || structure.n_items() != j_items {
        return Err(Error::Dimension("variational state does not match responses".into()));
    }
    let moments = second_moments(vstate);
    let eta: Vec<f64> = vstate.xi.iter().map(|&x| math::eta(x)).collect();
    // xi is column-major N x J: eta for (i, j) lives at j * n + i.
    let rows: Vec<(Vec<f64>, f64)> = (0..j_items)
        .into_par_iter()
        .map(|j| {
            let free = structure.free_factors(j);
            let d = free.len() + 1;
            let mut h = DMatrix::<f64>::zeros(d, d);
            let mut g = vec![0.0; d];
            for i in 0..n {
                let e2 = 2.0 * eta[j * n + i];
                let yc = f64::from(responses.get(i, j)) - 0.5;
                let m2 = &moments[i];
                for (p, &fp) in free.iter().enumerate() {
                    let mp = vstate.mu[(i, fp)];
                    g[p] += yc * mp;
                    for (q, &fq) in free.iter().enumerate() {
                        h[(p, q)] += e2 * m2[(fp, fq)];
                    }
                    h[(p, d - 1)] -= e2 * mp;
                }
                g[d - 1] -= yc;
                h[(d - 1, d - 1)] += e2;
            }
            for p in 0..d - 1 {
                h[(d - 1, p)] = h[(p, d - 1)];
            }
            let chol = CholFactor::new(&h).map_err(|_| {
                Error::Singular(format!("item {j}: restricted M-step system is rank deficient"))
            })?;
            chol.solve_in_place(&mut g);
            let mut row = vec![0.0; k];
            for (p, &fp) in free.iter().enumerate() {
                row[fp] = g[p];
            }
            Ok((row, g[d - 1]))
        })
        .collect::<Result<_>>()?;
    let mut a = DMatrix::zeros(j_items, k);
    let mut b = DVector::zeros(j_items);
    for (j, (row, bj)) in rows.into_iter().enumerate() {
        for c in 0..k {
            a[(j, c)] = row[c];
        }
        b[j] = bj;
    }
    Ok((a, b))
}

/// `(1/N) sum_i (Sigma_i + mu_i mu_i^T)`.
pub fn update_sigma_theta(vstate: &VariationalState) -> Result<DMatrix<f64>> {
    let n = vstate.n_persons();
    if n == 0 {
        return Err(Error::InvalidData("no persons".into()));
    }
    let k = vstate.n_factors();
    let mut acc = DMatrix::zeros(k, k);
    for m in second_moments(vstate) {
        acc += m;
    }
    acc /= n as f64;
    math::symmetrize(&mut acc);
    Ok(acc)
}

fn scale_factors(sigma_theta: &DMatrix<f64>) -> Result<Vec<f64>> {
    sigma_theta
        .diagonal()
        .iter()
        .map(|&d| {
            if d > 0.0 && d.is_finite() {
                Ok(d.sqrt())
            } else {
                Err(Error::Domain(format!("nonpositive latent variance {d}")))
            }
        })
        .collect()
}

/// Rescales to unit latent variances: `Sigma* = D^{-1/2} Sigma D^{-1/2}` and
/// `a*_jk = a_jk sqrt(D_kk)`, leaving every linear predictor's distribution
/// unchanged.
pub fn rescale_identification(params: &ModelParams) -> Result<ModelParams> {
    let s = scale_factors(&params.sigma_theta)?;
    let k = s.len();
    let mut out = params.clone();
    for r in 0..k {
        for c in 0..k {
            out.sigma_theta[(r, c)] = params.sigma_theta[(r, c)] / (s[r] * s[c]);
        }
        out.sigma_theta[(r, r)] = 1.0;
    }
    for j in 0..params.n_items() {
        for c in 0..k {
            out.a[(j, c)] = params.a[(j, c)] * s[c];
        }
    }
    Ok(out)
}

/// Applies the latent rescaling of [`rescale_identification`] to the
/// posteriors (`theta* = D^{-1/2} theta`). Local parameters are unchanged
/// since every linear predictor is.
pub fn rescale_variational_state(
    vstate: &VariationalState,
    sigma_theta: &DMatrix<f64>,
) -> Result<VariationalState> {
    let s = scale_factors(sigma_theta)?;
    let k = s.len();
    let mut out = vstate.clone();
    for i in 0..vstate.n_persons() {
        for r in 0..k {
            out.mu[(i, r)] /= s[r];
            for c in 0..k {
                out.sigma[i][(r, c)] /= s[r] * s[c];
            }
        }
    }
    Ok(out)
}

/// The GVEM objective: `sum_i E_q[bound - log q_i]`, in closed form.
pub fn expected_elbo(
    responses: &ResponseMatrix,
    vstate: &VariationalState,
    params: &ModelParams,
) -> Result<f64> {
    let prior = CholFactor::new(&params.sigma_theta)?;
    let prior_precision = prior.inverse();
    let a = params.a_row_major();
    let b = params.b.as_slice();
    let k = params.n_factors();
    let terms: Vec<f64> = (0..responses.n_persons())
        .into_par_iter()
        .map(|i| {
            let mu = vstate.mu_row(i);
            let sigma = &vstate.sigma[i];
            let y = responses.row(i);
            let mut acc = 0.0;
            for j in 0..y.len() {
                let x = vstate.xi[(i, j)];
                let alpha = &a[j * k..(j + 1) * k];
                let lin = dot(alpha, &mu) - b[j];
                let mut quad = 0.0;
                for r in 0..k {
                    for c in 0..k {
                        quad += alpha[r] * sigma[(r, c)] * alpha[c];
                    }
                }
                let ex2 = lin * lin + quad;
                acc += math::log_sigmoid(x) + f64::from(y[j]) * lin + 0.5 * (-lin - x)
                    - math::eta(x) * (ex2 - x * x);
            }
            // -KL(q_i || N(0, Sigma_theta))
            let log_det_q = CholFactor::new(sigma)?.log_det();
            let mut trace = 0.0;
            for r in 0..k {
                for c in 0..k {
                    trace += prior_precision[(r, c)] * (sigma[(c, r)] + mu[c] * mu[r]);
                }
            }
            acc += 0.5 * (k as f64 + log_det_q - prior.log_det() - trace);
            Ok(acc)
        })
        .collect::<Result<_>>()?;
    Ok(terms.iter().sum())
}

/// E-step for every person, in person order.
pub(crate) fn estep_all(
    responses: &ResponseMatrix,
    params: &ModelParams,
    xi: &DMatrix<f64>,
) -> Result<VariationalState> {
    let n = responses.n_persons();
    let k = params.n_factors();
    let prior_precision = math::spd_inverse(&params.sigma_theta)?;
    let a = params.a_row_major();
    let b = params.b.as_slice();
    let per: Vec<(Vec<f64>, DMatrix<f64>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let xi_i: Vec<f64> = xi.row(i).iter().copied().collect();
            estep_core(responses.row(i), &a, b, &prior_precision, &xi_i)
        })
        .collect::<Result<_>>()?;
    let mut mu = DMatrix::zeros(n, k);
    let mut sigma = Vec::with_capacity(n);
    for (i, (m, s)) in per.into_iter().enumerate() {
        for c in 0..k {
            mu[(i, c)] = m[c];
        }
        sigma.push(s);
    }
    Ok(VariationalState {
        mu,
        sigma,
        xi: xi.clone(),
    })
}

pub(crate) fn update_xi_all(
    vstate: &VariationalState,
    params: &ModelParams,
) -> Result<DMatrix<f64>> {
    let n = vstate.n_persons();
    let a = params.a_row_major();
    let b = params.b.as_slice();
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| update_xi_core(&vstate.mu_row(i), &vstate.sigma[i], &a, b))
        .collect::<Result<_>>()?;
    Ok(DMatrix::from_fn(n, params.n_items(), |i, j| rows[i][j]))
}

/// Alternates local-parameter and posterior updates with the item
/// parameters held fixed, starting from `xi = 1`.
pub fn converge_posteriors(
    responses: &ResponseMatrix,
    params: &ModelParams,
    max_iter: usize,
    tol: f64,
) -> Result<VariationalState> {
    let xi = DMatrix::from_element(responses.n_persons(), params.n_items(), 1.0);
    let mut vstate = estep_all(responses, params, &xi)?;
    for _ in 0..max_iter {
        let xi = update_xi_all(&vstate, params)?;
        let change = math::diff_norm(xi.as_slice(), vstate.xi.as_slice());
        vstate = estep_all(responses, params, &xi)?;
        if change <= tol {
            break;
        }
    }
    Ok(vstate)
}

/// Runs GVEM to convergence (or `max_iter`).
///
/// Without `init`, starts from free loadings 1, intercepts 0, identity
/// covariance and `xi = 1`. With `init`, the posteriors are first converged
/// at the supplied parameters. Confirmatory fits are rescaled to unit latent
/// variances after the loop; exploratory fits keep the covariance at the
/// identity throughout.
pub fn fit_gvem(
    responses: &ResponseMatrix,
    structure: &LoadingStructure,
    config: &GvemConfig,
    init: Option<&ModelParams>,
) -> Result<GvemFit> {
    config.validate()?;
    if responses.n_items() != structure.n_items() {
        return Err(Error::Dimension(format!(
            "responses have {} items, structure has {}",
            responses.n_items(),
            structure.n_items()
        )));
    }
    if config.mode == Mode::Exploratory && structure.n_free() != structure.mask().len() {
        return Err(Error::Config(
            "exploratory mode requires every loading to be free".into(),
        ));
    }
    let k = structure.n_factors();
    let mut params = match init {
        Some(p) => {
            p.validate(structure)?;
            p.clone()
        }
        None => ModelParams::initial(structure),
    };
    if config.mode == Mode::Exploratory {
        params.sigma_theta = DMatrix::identity(k, k);
    }
    let mut vstate = match init {
        Some(_) => converge_posteriors(responses, &params, 500, 1e-10)?,
        None => {
            let xi = DMatrix::from_element(responses.n_persons(), structure.n_items(), 1.0);
            estep_all(responses, &params, &xi)?
        }
    };
    let mut trace = vec![expected_elbo(responses, &vstate, &params)?];
    let mut converged = false;
    let mut n_iters = 0;
    while n_iters < config.max_iter {
        n_iters += 1;
        vstate.xi = update_xi_all(&vstate, &params)?;
        let (a, b) = mstep_item(responses, &vstate, structure)?;
        let sigma_theta = match config.mode {
            Mode::Confirmatory => update_sigma_theta(&vstate)?,
            Mode::Exploratory => params.sigma_theta.clone(),
        };
        let change = math::diff_norm(a.as_slice(), params.a.as_slice())
            + math::diff_norm(b.as_slice(), params.b.as_slice())
            + math::diff_norm(sigma_theta.as_slice(), params.sigma_theta.as_slice());
        params = ModelParams { a, b, sigma_theta };
        vstate = estep_all(responses, &params, &vstate.xi)?;
        trace.push(expected_elbo(responses, &vstate, &params)?);
        if change <= config.tol {
            converged = true;
            break;
        }
    }
    if config.mode == Mode::Confirmatory {
        vstate = rescale_variational_state(&vstate, &params.sigma_theta)?;
        params = rescale_identification(&params)?;
    }
    Ok(GvemFit {
        params,
        vstate,
        n_iters,
        converged,
        elbo_trace: trace,
    })
}
