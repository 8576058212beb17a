//! Importance-weighted ELBO with the converged GVEM posteriors as fixed
//! proposals.
//!
//! For person `i`, `S` independent blocks of `M` draws from
//! `q_i = N(mu_i, Sigma_i)` give log weights
//! `log w = log p(y_i, theta) - log q_i(theta)`; the estimate is
//! `sum_i (1/S) sum_s log((1/M) sum_m w)`. Because `q_i` does not depend on
//! the item parameters, the gradient of the estimate with respect to them is
//! the self-normalized weighted average of the complete-data gradient.
//!
//! The latent-covariance direction is parametrized by the precision matrix
//! `P = Sigma_theta^{-1}`: `(1/2) Sigma_theta - (1/2) theta theta^T` is the
//! derivative of the Gaussian log prior with respect to `P`, not with
//! respect to `Sigma_theta` (see [`precision_to_covariance_gradient`]).

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{self, CholFactor};
use crate::model::{dot, log_lik_residuals, log_lik_row, LoadingStructure, ModelParams, ResponseMatrix, VariationalState};
use crate::rng::{self, tag};

/// Persons per reduction chunk. Fixed so that floating-point summation order
/// does not depend on the number of worker threads.
const CHUNK: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IwConfig {
    /// Outer replications `S`.
    pub n_outer: usize,
    /// Inner importance samples `M`.
    pub n_inner: usize,
    pub seed: u64,
}

impl Default for IwConfig {
    fn default() -> Self {
        Self {
            n_outer: 10,
            n_inner: 10,
            seed: 0,
        }
    }
}

impl IwConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_outer == 0 || self.n_inner == 0 {
            return Err(Error::Config(format!(
                "importance sampling needs S >= 1 and M >= 1, got S = {}, M = {}",
                self.n_outer, self.n_inner
            )));
        }
        Ok(())
    }
}

/// The frozen proposal: posterior means and Cholesky factors per person.
#[derive(Debug, Clone)]
pub struct Proposal {
    mu: Vec<Vec<f64>>,
    chol: Vec<CholFactor>,
}

impl Proposal {
    pub fn new(vstate: &VariationalState) -> Result<Self> {
        let chol = vstate
            .sigma
            .iter()
            .enumerate()
            .map(|(i, s)| {
                CholFactor::new(s).map_err(|_| {
                    Error::NotPositiveDefinite(format!("posterior covariance of person {i}"))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mu = (0..vstate.n_persons()).map(|i| vstate.mu_row(i)).collect();
        Ok(Self { mu, chol })
    }

    pub fn n_persons(&self) -> usize {
        self.mu.len()
    }

    pub fn n_factors(&self) -> usize {
        self.mu.first().map_or(0, Vec::len)
    }

    fn draw_into(&self, person: usize, rng: &mut impl Rng, z: &mut [f64], out: &mut [f64]) {
        for v in z.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        self.chol[person].mul_lower(z, out);
        for (o, m) in out.iter_mut().zip(&self.mu[person]) {
            *o += m;
        }
    }

    #[inline]
    fn log_density(&self, person: usize, theta: &[f64]) -> f64 {
        self.chol[person].log_normal_density(theta, &self.mu[person])
    }
}

/// Draws `theta[i][s][m]`, a K-vector each.
#[derive(Debug, Clone, PartialEq)]
pub struct ThetaSamples {
    n_persons: usize,
    n_outer: usize,
    n_inner: usize,
    n_factors: usize,
    draws: Vec<f64>,
}

impl ThetaSamples {
    pub fn n_persons(&self) -> usize {
        self.n_persons
    }

    pub fn n_outer(&self) -> usize {
        self.n_outer
    }

    pub fn n_inner(&self) -> usize {
        self.n_inner
    }

    pub fn n_factors(&self) -> usize {
        self.n_factors
    }

    #[inline]
    pub fn draw(&self, person: usize, outer: usize, inner: usize) -> &[f64] {
        let k = self.n_factors;
        let idx = ((person * self.n_outer + outer) * self.n_inner + inner) * k;
        &self.draws[idx..idx + k]
    }

    fn person_block(&self, person: usize) -> &[f64] {
        let len = self.n_outer * self.n_inner * self.n_factors;
        &self.draws[person * len..(person + 1) * len]
    }
}

fn block_rng(seed: u64, iteration: u64, person: usize, outer: usize) -> rand_chacha::ChaCha8Rng {
    rng::stream(seed, &[tag::IW_SAMPLES, iteration, person as u64, outer as u64])
}

/// Draws `theta = mu_i + L_i z` with `L_i L_i^T = Sigma_i` and standard normal
/// `z`. Each `(person, outer)` block has its own stream derived from
/// `(cfg.seed, iteration, person, outer)`, so a block of `M` draws is a
/// prefix of the same block drawn with any larger `M`.
pub fn draw_samples(vstate: &VariationalState, cfg: &IwConfig, iteration: u64) -> Result<ThetaSamples> {
    cfg.validate()?;
    let proposal = Proposal::new(vstate)?;
    Ok(draw_from(&proposal, cfg, iteration))
}

pub(crate) fn draw_from(proposal: &Proposal, cfg: &IwConfig, iteration: u64) -> ThetaSamples {
    let n = proposal.n_persons();
    let k = proposal.n_factors();
    let (s_n, m_n) = (cfg.n_outer, cfg.n_inner);
    let per_person = s_n * m_n * k;
    let mut draws = vec![0.0; n * per_person];
    draws
        .par_chunks_mut(per_person.max(1))
        .enumerate()
        .for_each(|(i, block)| {
            let mut z = vec![0.0; k];
            for s in 0..s_n {
                let mut rng = block_rng(cfg.seed, iteration, i, s);
                for m in 0..m_n {
                    let off = (s * m_n + m) * k;
                    proposal.draw_into(i, &mut rng, &mut z, &mut block[off..off + k]);
                }
            }
        });
    ThetaSamples {
        n_persons: n,
        n_outer: s_n,
        n_inner: m_n,
        n_factors: k,
        draws,
    }
}

/// Log importance weights and their within-block normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightBlock {
    n_persons: usize,
    n_outer: usize,
    n_inner: usize,
    /// `log w[i][s][m]`.
    pub log_raw: Vec<f64>,
    /// `w[i][s][m] / sum_m' w[i][s][m']`.
    pub normalized: Vec<f64>,
    /// `log sum_m w[i][s][m]`, one per `(i, s)`.
    pub log_scale: Vec<f64>,
}

impl WeightBlock {
    pub fn n_persons(&self) -> usize {
        self.n_persons
    }

    pub fn n_outer(&self) -> usize {
        self.n_outer
    }

    pub fn n_inner(&self) -> usize {
        self.n_inner
    }

    #[inline]
    fn index(&self, person: usize, outer: usize, inner: usize) -> usize {
        (person * self.n_outer + outer) * self.n_inner + inner
    }

    /// Raw weight; may underflow to zero for long tests.
    pub fn raw(&self, person: usize, outer: usize, inner: usize) -> f64 {
        self.log_raw[self.index(person, outer, inner)].exp()
    }

    #[inline]
    pub fn normalized(&self, person: usize, outer: usize, inner: usize) -> f64 {
        self.normalized[self.index(person, outer, inner)]
    }

    /// `log((1/M) sum_m w[i][s][m])`.
    pub fn log_mean(&self, person: usize, outer: usize) -> f64 {
        self.log_scale[person * self.n_outer + outer] - (self.n_inner as f64).ln()
    }

    /// The IW-ELBO estimate these weights define.
    pub fn estimate(&self) -> IwEstimate {
        let per_person: Vec<Vec<f64>> = (0..self.n_persons)
            .map(|i| (0..self.n_outer).map(|s| self.log_mean(i, s)).collect())
            .collect();
        IwEstimate::from_blocks(&per_person)
    }
}

/// A Monte Carlo estimate of the IW-ELBO with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IwEstimate {
    pub value: f64,
    /// `None` when `S = 1`.
    pub std_error: Option<f64>,
}

impl IwEstimate {
    /// `blocks[i][s]` are independent per-person block values.
    fn from_blocks(blocks: &[Vec<f64>]) -> Self {
        let mut value = 0.0;
        let mut var = 0.0;
        let mut have_var = true;
        for b in blocks {
            let s = b.len() as f64;
            let mean = b.iter().sum::<f64>() / s;
            value += mean;
            if b.len() > 1 {
                let ss: f64 = b.iter().map(|v| (v - mean) * (v - mean)).sum();
                var += ss / (s - 1.0) / s;
            } else {
                have_var = false;
            }
        }
        Self {
            value,
            std_error: have_var.then(|| var.sqrt()),
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn person_log_weights(
    y: &[u8],
    draws: &[f64],
    person: usize,
    a: &[f64],
    b: &[f64],
    prior: &CholFactor,
    proposal: &Proposal,
    out: &mut [f64],
) {
    let k = prior.dim();
    for (m, lw) in out.iter_mut().enumerate() {
        let theta = &draws[m * k..(m + 1) * k];
        *lw = log_lik_row(y, theta, a, b) + prior.log_normal_density_centered(theta)
            - proposal.log_density(person, theta);
    }
}

fn normalize_block(log_raw: &[f64], norm: &mut [f64]) -> Option<f64> {
    let max = log_raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return None;
    }
    let mut sum = 0.0;
    for (n, &l) in norm.iter_mut().zip(log_raw) {
        *n = (l - max).exp();
        sum += *n;
    }
    for n in norm.iter_mut() {
        *n /= sum;
    }
    Some(max + sum.ln())
}

/// Log weights `log p(y_i, theta) - log q_i(theta)` for every draw, normalized
/// in log space within each `(i, s)` block after subtracting the block max.
pub fn compute_weights(
    responses: &ResponseMatrix,
    samples: &ThetaSamples,
    params: &ModelParams,
    vstate: &VariationalState,
) -> Result<WeightBlock> {
    let proposal = Proposal::new(vstate)?;
    weights_with(responses, samples, params, &proposal)
}

pub(crate) fn weights_with(
    responses: &ResponseMatrix,
    samples: &ThetaSamples,
    params: &ModelParams,
    proposal: &Proposal,
) -> Result<WeightBlock> {
    let n = responses.n_persons();
    if samples.n_persons() != n || proposal.n_persons() != n {
        return Err(Error::Dimension(format!(
            "{} persons in responses, {} in samples, {} in proposal",
            n,
            samples.n_persons(),
            proposal.n_persons()
        )));
    }
    if samples.n_factors() != params.n_factors() || responses.n_items() != params.n_items() {
        return Err(Error::Dimension("samples or responses do not match parameters".into()));
    }
    let prior = CholFactor::new(&params.sigma_theta)?;
    let a = params.a_row_major();
    let b = params.b.as_slice();
    let (s_n, m_n, k) = (samples.n_outer(), samples.n_inner(), samples.n_factors());
    let per = s_n * m_n;
    let mut log_raw = vec![0.0; n * per];
    let mut normalized = vec![0.0; n * per];
    let mut log_scale = vec![0.0; n * s_n];
    log_raw
        .par_chunks_mut(per)
        .zip(normalized.par_chunks_mut(per))
        .zip(log_scale.par_chunks_mut(s_n))
        .enumerate()
        .try_for_each(|(i, ((lr, nr), ls))| {
            let draws = samples.person_block(i);
            let y = responses.row(i);
            for s in 0..s_n {
                let blk = s * m_n..(s + 1) * m_n;
                person_log_weights(
                    y,
                    &draws[s * m_n * k..(s + 1) * m_n * k],
                    i,
                    &a,
                    b,
                    &prior,
                    proposal,
                    &mut lr[blk.clone()],
                );
                ls[s] = normalize_block(&lr[blk.clone()], &mut nr[blk])
                    .ok_or(Error::DegenerateWeights { person: i, draw: s })?;
            }
            Ok(())
        })?;
    Ok(WeightBlock {
        n_persons: n,
        n_outer: s_n,
        n_inner: m_n,
        log_raw,
        normalized,
        log_scale,
    })
}

/// IW-ELBO estimate from fresh draws; deterministic in `(cfg, iteration)`.
pub fn iw_elbo(
    responses: &ResponseMatrix,
    vstate: &VariationalState,
    params: &ModelParams,
    cfg: &IwConfig,
    iteration: u64,
) -> Result<IwEstimate> {
    cfg.validate()?;
    let proposal = Proposal::new(vstate)?;
    let samples = draw_from(&proposal, cfg, iteration);
    Ok(weights_with(responses, &samples, params, &proposal)?.estimate())
}

/// IW-ELBO estimate on supplied draws (common random numbers).
pub fn iw_elbo_on_samples(
    responses: &ResponseMatrix,
    samples: &ThetaSamples,
    params: &ModelParams,
    vstate: &VariationalState,
) -> Result<IwEstimate> {
    Ok(compute_weights(responses, samples, params, vstate)?.estimate())
}

/// Gradient of the IW-ELBO estimate with respect to the free loadings, the
/// intercepts and the latent precision matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct IwGradient {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    /// Symmetrized; see the module docs for the parametrization.
    pub precision: DMatrix<f64>,
}

/// Self-normalized gradient estimates:
/// `g_a_j = sum_i (1/S) sum_s sum_m w~ [y_ij - 1 + 1/(1 + exp(a_j.theta - b_j))] theta`,
/// `g_b_j = sum_i (1/S) sum_s sum_m w~ [1 - y_ij - 1/(1 + exp(a_j.theta - b_j))]`,
/// `g_P = sum_i (1/S) sum_s sum_m w~ (Sigma_theta - theta theta^T) / 2`.
/// Constrained loadings get exactly zero gradient.
pub fn gradients(
    responses: &ResponseMatrix,
    samples: &ThetaSamples,
    weights: &WeightBlock,
    params: &ModelParams,
    structure: &LoadingStructure,
) -> Result<IwGradient> {
    let n = responses.n_persons();
    let (j_n, k) = (params.n_items(), params.n_factors());
    if weights.n_persons() != n
        || weights.n_outer() != samples.n_outer()
        || weights.n_inner() != samples.n_inner()
        || samples.n_persons() != n
    {
        return Err(Error::Dimension("weights were not computed from these samples".into()));
    }
    if structure.n_items() != j_n || structure.n_factors() != k {
        return Err(Error::Dimension("structure does not match parameters".into()));
    }
    let a = params.a_row_major();
    let b = params.b.as_slice();
    let (s_n, m_n) = (samples.n_outer(), samples.n_inner());
    let inv_s = 1.0 / s_n as f64;
    // layout: [g_a (J*K, row-major) | g_b (J) | sum of w~ theta theta^T (K*K)]
    let width = j_n * k + j_n + k * k;
    let chunk_sums: Vec<Vec<f64>> = (0..n.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut acc = vec![0.0; width];
            for i in c * CHUNK..((c + 1) * CHUNK).min(n) {
                let y = responses.row(i);
                for s in 0..s_n {
                    for m in 0..m_n {
                        let w = weights.normalized(i, s, m) * inv_s;
                        if w == 0.0 {
                            continue;
                        }
                        let theta = samples.draw(i, s, m);
                        for j in 0..j_n {
                            let z = dot(&a[j * k..(j + 1) * k], theta) - b[j];
                            // y - sigmoid(z)
                            let r = f64::from(y[j]) - math::sigmoid(z);
                            let wr = w * r;
                            for c2 in 0..k {
                                acc[j * k + c2] += wr * theta[c2];
                            }
                            acc[j_n * k + j] -= wr;
                        }
                        let off = j_n * k + j_n;
                        for r in 0..k {
                            for c2 in 0..k {
                                acc[off + r * k + c2] += w * theta[r] * theta[c2];
                            }
                        }
                    }
                }
            }
            acc
        })
        .collect();
    let mut total = vec![0.0; width];
    for cs in &chunk_sums {
        for (t, v) in total.iter_mut().zip(cs) {
            *t += v;
        }
    }
    Ok(assemble_gradient(&total, params, structure, n))
}

/// Chain rule from the precision gradient to the covariance gradient:
/// `G_Sigma = -P G_P P` with `P = Sigma_theta^{-1}`.
pub fn precision_to_covariance_gradient(
    g_precision: &DMatrix<f64>,
    sigma_theta: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let p = math::spd_inverse(sigma_theta)?;
    Ok(-(&p * g_precision * &p))
}

/// One IW iteration: draws, weights, estimate and gradient in a single pass.
///
/// Equivalent to [`draw_samples`], [`compute_weights`] and [`gradients`] in
/// sequence (same streams, same chunked reduction order) but never
/// materializes the `N x S x M` arrays and evaluates each linear predictor
/// once.
pub(crate) fn objective_and_gradient(
    responses: &ResponseMatrix,
    proposal: &Proposal,
    params: &ModelParams,
    structure: &LoadingStructure,
    cfg: &IwConfig,
    iteration: u64,
) -> Result<(IwEstimate, IwGradient)> {
    let n = responses.n_persons();
    let (j_n, k) = (params.n_items(), params.n_factors());
    if proposal.n_persons() != n || proposal.n_factors() != k || responses.n_items() != j_n {
        return Err(Error::Dimension("proposal or responses do not match parameters".into()));
    }
    let prior = CholFactor::new(&params.sigma_theta)?;
    let a = params.a_row_major();
    let b = params.b.as_slice();
    let (s_n, m_n) = (cfg.n_outer, cfg.n_inner);
    let inv_s = 1.0 / s_n as f64;
    let log_m = (m_n as f64).ln();
    let width = j_n * k + j_n + k * k;
    let chunks: Vec<(Vec<f64>, Vec<Vec<f64>>)> = (0..n.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut acc = vec![0.0; width];
            let mut blocks = Vec::with_capacity(CHUNK);
            let mut draws = vec![0.0; m_n * k];
            let mut resid = vec![0.0; m_n * j_n];
            let mut lw = vec![0.0; m_n];
            let mut wn = vec![0.0; m_n];
            let mut z = vec![0.0; k];
            for i in c * CHUNK..((c + 1) * CHUNK).min(n) {
                let y = responses.row(i);
                let mut person = Vec::with_capacity(s_n);
                for s in 0..s_n {
                    let mut rng = block_rng(cfg.seed, iteration, i, s);
                    for m in 0..m_n {
                        let theta = &mut draws[m * k..(m + 1) * k];
                        proposal.draw_into(i, &mut rng, &mut z, theta);
                        let theta = &draws[m * k..(m + 1) * k];
                        lw[m] = log_lik_residuals(y, theta, &a, b, Some(&mut resid[m * j_n..(m + 1) * j_n]))
                            + prior.log_normal_density_centered(theta)
                            - proposal.log_density(i, theta);
                    }
                    let log_sum = normalize_block(&lw, &mut wn)
                        .ok_or(Error::DegenerateWeights { person: i, draw: s })?;
                    person.push(log_sum - log_m);
                    for m in 0..m_n {
                        let w = wn[m] * inv_s;
                        if w == 0.0 {
                            continue;
                        }
                        let theta = &draws[m * k..(m + 1) * k];
                        let (acc_a, rest) = acc.split_at_mut(j_n * k);
                        accumulate_item_gradients(
                            acc_a,
                            &mut rest[..j_n],
                            &resid[m * j_n..(m + 1) * j_n],
                            theta,
                            w,
                        );
                        let off = j_n * k + j_n;
                        for r in 0..k {
                            for c2 in 0..k {
                                acc[off + r * k + c2] += w * theta[r] * theta[c2];
                            }
                        }
                    }
                }
                blocks.push(person);
            }
            Ok((acc, blocks))
        })
        .collect::<Result<_>>()?;
    let mut total = vec![0.0; width];
    let mut blocks = Vec::with_capacity(n);
    for (cs, bl) in chunks {
        for (t, v) in total.iter_mut().zip(&cs) {
            *t += v;
        }
        blocks.extend(bl);
    }
    Ok((IwEstimate::from_blocks(&blocks), assemble_gradient(&total, params, structure, n)))
}

/// `g_a[j] += w r_j theta`, `g_b[j] -= w r_j`.
#[inline]
fn accumulate_item_gradients(g_a: &mut [f64], g_b: &mut [f64], resid: &[f64], theta: &[f64], w: f64) {
    #[inline(always)]
    fn fixed<const K: usize>(g_a: &mut [f64], g_b: &mut [f64], resid: &[f64], theta: &[f64], w: f64) {
        let th: &[f64; K] = theta.try_into().expect("theta has K entries");
        for ((ga, gb), &r) in g_a.chunks_exact_mut(K).zip(g_b.iter_mut()).zip(resid) {
            let wr = w * r;
            for c in 0..K {
                ga[c] += wr * th[c];
            }
            *gb -= wr;
        }
    }
    match theta.len() {
        1 => fixed::<1>(g_a, g_b, resid, theta, w),
        2 => fixed::<2>(g_a, g_b, resid, theta, w),
        3 => fixed::<3>(g_a, g_b, resid, theta, w),
        4 => fixed::<4>(g_a, g_b, resid, theta, w),
        5 => fixed::<5>(g_a, g_b, resid, theta, w),
        k => {
            for (j, &r) in resid.iter().enumerate() {
                let wr = w * r;
                for c in 0..k {
                    g_a[j * k + c] += wr * theta[c];
                }
                g_b[j] -= wr;
            }
        }
    }
}

fn assemble_gradient(total: &[f64], params: &ModelParams, structure: &LoadingStructure, n: usize) -> IwGradient {
    let (j_n, k) = (params.n_items(), params.n_factors());
    let mut g_a = DMatrix::from_fn(j_n, k, |r, c| total[r * k + c]);
    structure.apply(&mut g_a);
    let g_b = DVector::from_fn(j_n, |r, _| total[j_n * k + r]);
    // Each person's normalized weights sum to one per block, so the Sigma
    // term contributes N * Sigma_theta / 2.
    let off = j_n * k + j_n;
    let mut g_p = DMatrix::from_fn(k, k, |r, c| {
        0.5 * (n as f64 * params.sigma_theta[(r, c)] - total[off + r * k + c])
    });
    math::symmetrize(&mut g_p);
    IwGradient {
        a: g_a,
        b: g_b,
        precision: g_p,
    }
}

/// IW-ELBO estimates for each `M` in `m_grid`, all from the same `S` outer
/// blocks: the estimate at `M` uses the first `M` draws of each block.
pub fn check_monotone_in_m(
    responses: &ResponseMatrix,
    vstate: &VariationalState,
    params: &ModelParams,
    m_grid: &[usize],
    n_outer: usize,
    seed: u64,
) -> Result<Vec<IwEstimate>> {
    if m_grid.is_empty() || m_grid.contains(&0) || n_outer == 0 {
        return Err(Error::Config("m_grid entries and S must be positive".into()));
    }
    if m_grid.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::Config("m_grid must be ascending".into()));
    }
    let proposal = Proposal::new(vstate)?;
    let m_max = *m_grid.last().unwrap_or(&1);
    let prior = CholFactor::new(&params.sigma_theta)?;
    let a = params.a_row_major();
    let b = params.b.as_slice();
    let k = params.n_factors();
    let n = responses.n_persons();
    // blocks[i][g][s]
    let blocks: Vec<Vec<Vec<f64>>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut out = vec![vec![0.0; n_outer]; m_grid.len()];
            let mut draws = vec![0.0; m_max * k];
            let mut z = vec![0.0; k];
            let mut lw = vec![0.0; m_max];
            for s in 0..n_outer {
                let mut rng = block_rng(seed, 0, i, s);
                for m in 0..m_max {
                    proposal.draw_into(i, &mut rng, &mut z, &mut draws[m * k..(m + 1) * k]);
                }
                person_log_weights(responses.row(i), &draws, i, &a, b, &prior, &proposal, &mut lw);
                for (g, &mm) in m_grid.iter().enumerate() {
                    let v = math::log_sum_exp(&lw[..mm]) - (mm as f64).ln();
                    if !v.is_finite() {
                        return Err(Error::DegenerateWeights { person: i, draw: s });
                    }
                    out[g][s] = v;
                }
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    Ok((0..m_grid.len())
        .map(|g| {
            let per: Vec<Vec<f64>> = blocks.iter().map(|bl| bl[g].clone()).collect();
            IwEstimate::from_blocks(&per)
        })
        .collect())
}
