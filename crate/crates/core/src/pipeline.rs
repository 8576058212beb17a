//! The two-phase fit: GVEM warm start, then Adam ascent on the
//! importance-weighted ELBO with the GVEM posteriors frozen as proposals,
//! then identification (confirmatory) or promax rotation (exploratory).

use std::time::Instant;

use log::{debug, warn};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::adam::{self, AdamConfig, AdamState, GroupValues, LrSelection, ParamGroup};
use crate::error::{Error, Result};
use crate::gvem::{self, GvemConfig, GvemFit, Mode};
use crate::iw::{self, IwConfig, Proposal};
use crate::math;
use crate::model::{LoadingStructure, ModelParams, ResponseMatrix, VariationalState};
use crate::rng::{self, tag};
use crate::rotation::{self, PromaxConfig, RotationResult};
use crate::simstudy;

/// Eigenvalue floor applied to the latent precision/covariance.
const EIGEN_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitConfig {
    pub mode: Mode,
    pub gvem: GvemConfig,
    /// `n_outer`/`n_inner` are used; the seed is derived from the fit seed.
    pub iw: IwConfig,
    /// `base_lr` is replaced by the selected rate.
    pub adam: AdamConfig,
    /// Stop when `max(|dA|, |dB|, |dSigma|) <= iw_tol`.
    pub iw_tol: f64,
    pub iw_max_iter: usize,
    pub lr_candidates: Vec<f64>,
    /// IW steps per candidate during the learning-rate search.
    pub lr_budget: usize,
    /// Redraw the importance samples every iteration (otherwise reuse the
    /// first draw throughout).
    pub redraw_samples: bool,
    pub promax: PromaxConfig,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Confirmatory,
            gvem: GvemConfig::default(),
            iw: IwConfig::default(),
            adam: AdamConfig::default(),
            iw_tol: 1e-4,
            iw_max_iter: 200,
            lr_candidates: vec![0.01, 0.05, 0.1, 0.5],
            lr_budget: 30,
            redraw_samples: true,
            promax: PromaxConfig::default(),
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        self.gvem.validate()?;
        self.iw.validate()?;
        self.adam.validate()?;
        if !(self.iw_tol > 0.0) {
            return Err(Error::Config(format!("iw_tol must be positive, got {}", self.iw_tol)));
        }
        if self.lr_candidates.is_empty() || self.lr_candidates.iter().any(|&c| !(c > 0.0)) {
            return Err(Error::Config("learning-rate candidates must be positive and non-empty".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseTimings {
    pub gvem: f64,
    pub lr_search: f64,
    pub iw: f64,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    /// Final estimates. Confirmatory: unit-diagonal covariance. Exploratory:
    /// unrotated loadings with identity covariance; see `rotation`.
    pub params: ModelParams,
    pub gvem_fit: GvemFit,
    pub rotation: Option<RotationResult>,
    /// Promax of the GVEM loadings (exploratory only).
    pub gvem_rotation: Option<RotationResult>,
    pub chosen_lr: f64,
    pub lr_selection: Option<LrSelection>,
    pub iw_iters: usize,
    pub converged: bool,
    /// IW-ELBO estimate at the start of every IW iteration.
    pub iw_elbo_trace: Vec<f64>,
    pub timings: PhaseTimings,
}

struct IwRun {
    params: ModelParams,
    iters: usize,
    converged: bool,
    trace: Vec<f64>,
}

fn flatten_row_major(m: &DMatrix<f64>) -> Vec<f64> {
    let (r, c) = m.shape();
    let mut out = Vec::with_capacity(r * c);
    for i in 0..r {
        for j in 0..c {
            out.push(m[(i, j)]);
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn run_iw(
    responses: &ResponseMatrix,
    structure: &LoadingStructure,
    proposal: &Proposal,
    start: &ModelParams,
    mode: Mode,
    adam_cfg: &AdamConfig,
    iw_cfg: &IwConfig,
    max_iter: usize,
    tol: f64,
    redraw: bool,
) -> Result<IwRun> {
    let (j_n, k) = (start.n_items(), start.n_factors());
    let update_cov = mode == Mode::Confirmatory;
    let mut params = start.clone();
    let mut precision = math::spd_inverse(&params.sigma_theta)?;
    let mut state = AdamState::new([j_n * k, j_n, if update_cov { k * k } else { 0 }]);
    let mut trace = Vec::new();
    let mut converged = false;
    let mut iters = 0;
    while iters < max_iter {
        iters += 1;
        let draw_index = if redraw { iters as u64 } else { 0 };
        let (est, grad) =
            iw::objective_and_gradient(responses, proposal, &params, structure, iw_cfg, draw_index)?;
        trace.push(est.value);
        let grads = GroupValues::new(
            flatten_row_major(&grad.a),
            grad.b.as_slice().to_vec(),
            if update_cov {
                flatten_row_major(&grad.precision)
            } else {
                Vec::new()
            },
        );
        let step = adam::adam_step(&mut state, &grads, adam_cfg)?;
        let da = step.get(ParamGroup::Discrimination);
        let db = step.get(ParamGroup::Intercept);
        let mut a_change = 0.0;
        for r in 0..j_n {
            for c in 0..k {
                let d = da[r * k + c];
                params.a[(r, c)] += d;
                a_change += d * d;
            }
        }
        let mut b_change = 0.0;
        for (r, d) in db.iter().enumerate() {
            params.b[r] += d;
            b_change += d * d;
        }
        let mut s_change = 0.0;
        if update_cov {
            let dp = step.get(ParamGroup::Precision);
            for r in 0..k {
                for c in 0..k {
                    precision[(r, c)] += dp[r * k + c];
                }
            }
            math::symmetrize(&mut precision);
            if math::CholFactor::new(&precision).is_err() {
                debug!("iteration {iters}: clipping indefinite latent precision");
                math::clip_eigenvalues(&mut precision, EIGEN_FLOOR);
            }
            let sigma = math::spd_inverse(&precision)?;
            s_change = math::diff_norm(sigma.as_slice(), params.sigma_theta.as_slice()).powi(2);
            params.sigma_theta = sigma;
        }
        let change = a_change.sqrt().max(b_change.sqrt()).max(s_change.sqrt());
        if !change.is_finite() {
            return Err(Error::Consistency(format!(
                "non-finite parameter update at IW iteration {iters}"
            )));
        }
        if change <= tol {
            converged = true;
            break;
        }
    }
    Ok(IwRun {
        params,
        iters,
        converged,
        trace,
    })
}

/// Symmetrize, floor the eigenvalues, and rescale to unit latent variances.
fn identify(params: &ModelParams, mode: Mode) -> Result<ModelParams> {
    let mut out = params.clone();
    match mode {
        Mode::Confirmatory => {
            math::clip_eigenvalues(&mut out.sigma_theta, EIGEN_FLOOR);
            gvem::rescale_identification(&out)
        }
        Mode::Exploratory => {
            let k = out.n_factors();
            out.sigma_theta = DMatrix::identity(k, k);
            Ok(out)
        }
    }
}

struct Holdout {
    responses: ResponseMatrix,
    vstate: VariationalState,
}

fn make_holdout(gvem_params: &ModelParams, n: usize, seed: u64) -> Result<Holdout> {
    let mut rng = rng::stream(seed, &[tag::LR_HOLDOUT]);
    let (responses, _) = simstudy::simulate_responses(gvem_params, n, &mut rng)?;
    let vstate = gvem::converge_posteriors(&responses, gvem_params, 200, 1e-6)?;
    Ok(Holdout { responses, vstate })
}

/// Runs the full two-phase estimator. All randomness derives from `seed`.
pub fn fit(
    responses: &ResponseMatrix,
    structure: &LoadingStructure,
    config: &FitConfig,
    seed: u64,
) -> Result<FitResult> {
    config.validate()?;
    if config.mode == Mode::Exploratory && structure.n_free() != structure.mask().len() {
        return Err(Error::Config("exploratory mode requires an all-free loading structure".into()));
    }
    let total_start = Instant::now();
    let mode = config.mode;

    let t0 = Instant::now();
    let gvem_cfg = GvemConfig {
        mode,
        ..config.gvem.clone()
    };
    let gvem_fit = gvem::fit_gvem(responses, structure, &gvem_cfg, None)?;
    if !gvem_fit.converged {
        warn!(
            "GVEM stopped after {} iterations without meeting tol {}",
            gvem_fit.n_iters, gvem_cfg.tol
        );
    }
    let gvem_secs = t0.elapsed().as_secs_f64();

    let proposal = Proposal::new(&gvem_fit.vstate)?;
    let iw_cfg = IwConfig {
        seed: rng::derive_seed(seed, &[tag::IW_SAMPLES]),
        ..config.iw
    };

    let t1 = Instant::now();
    let (chosen_lr, lr_selection) = if config.iw_max_iter == 0 {
        (config.adam.base_lr, None)
    } else if let [only] = config.lr_candidates.as_slice() {
        (*only, None)
    } else {
        let holdout = make_holdout(&gvem_fit.params, responses.n_persons(), seed)?;
        let search_cfg = IwConfig {
            seed: rng::derive_seed(seed, &[tag::LR_SEARCH]),
            ..config.iw
        };
        let eval_cfg = IwConfig {
            seed: rng::derive_seed(seed, &[tag::ELBO_EVAL]),
            ..config.iw
        };
        let sel = adam::select_learning_rate(&config.lr_candidates, |lr| {
            let adam_cfg = AdamConfig {
                base_lr: lr,
                ..config.adam
            };
            let run = run_iw(
                responses,
                structure,
                &proposal,
                &gvem_fit.params,
                mode,
                &adam_cfg,
                &search_cfg,
                config.lr_budget,
                config.iw_tol,
                config.redraw_samples,
            )?;
            let candidate = identify(&run.params, mode)?;
            Ok(iw::iw_elbo(&holdout.responses, &holdout.vstate, &candidate, &eval_cfg, 0)?.value)
        })?;
        (sel.chosen, Some(sel))
    };
    let lr_secs = t1.elapsed().as_secs_f64();

    let t2 = Instant::now();
    let adam_cfg = AdamConfig {
        base_lr: chosen_lr,
        ..config.adam
    };
    let run = run_iw(
        responses,
        structure,
        &proposal,
        &gvem_fit.params,
        mode,
        &adam_cfg,
        &iw_cfg,
        config.iw_max_iter,
        config.iw_tol,
        config.redraw_samples,
    )?;
    let params = identify(&run.params, mode)?;
    let iw_secs = t2.elapsed().as_secs_f64();

    let (rotation, gvem_rotation) = match mode {
        Mode::Confirmatory => (None, None),
        Mode::Exploratory => (
            Some(rotation::promax(&params.a, &config.promax)?),
            Some(rotation::promax(&gvem_fit.params.a, &config.promax)?),
        ),
    };

    Ok(FitResult {
        params,
        gvem_fit,
        rotation,
        gvem_rotation,
        chosen_lr,
        lr_selection,
        iw_iters: run.iters,
        converged: run.converged,
        iw_elbo_trace: run.trace,
        timings: PhaseTimings {
            gvem: gvem_secs,
            lr_search: lr_secs,
            iw: iw_secs,
            total: total_start.elapsed().as_secs_f64(),
        },
    })
}

/// Approximate EAP scores: posterior means from the GVEM E-step with the
/// local parameters converged at the given item parameters.
pub fn score_persons(responses: &ResponseMatrix, params: &ModelParams) -> Result<DMatrix<f64>> {
    if responses.n_items() != params.n_items() {
        return Err(Error::Dimension(format!(
            "responses have {} items, parameters {}",
            responses.n_items(),
            params.n_items()
        )));
    }
    Ok(gvem::converge_posteriors(responses, params, 500, 1e-8)?.mu)
}
