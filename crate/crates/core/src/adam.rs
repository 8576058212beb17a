//! Adam with bias-corrected moments, per-group learning rates and a
//! learning-rate search driven by held-out IW-ELBO values.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Parameter groups that get their own learning rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamGroup {
    Discrimination,
    Intercept,
    /// The latent precision matrix.
    Precision,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 3] = [
        ParamGroup::Discrimination,
        ParamGroup::Intercept,
        ParamGroup::Precision,
    ];

    fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub base_lr: f64,
    /// Multiplier on `base_lr` for the latent covariance group.
    pub sigma_lr_factor: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-3,
            base_lr: 0.1,
            sigma_lr_factor: 0.1,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config(format!(
                "Adam decay rates must lie in [0, 1), got {} and {}",
                self.beta1, self.beta2
            )));
        }
        if !(self.epsilon > 0.0) || !(self.base_lr > 0.0) || !(self.sigma_lr_factor > 0.0) {
            return Err(Error::Config(
                "Adam epsilon, learning rate and covariance factor must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn lr_for(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Precision => self.base_lr * self.sigma_lr_factor,
            _ => self.base_lr,
        }
    }
}

/// Gradient or step values per parameter group, flattened.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GroupValues([Vec<f64>; 3]);

impl GroupValues {
    pub fn new(discrimination: Vec<f64>, intercept: Vec<f64>, precision: Vec<f64>) -> Self {
        Self([discrimination, intercept, precision])
    }

    pub fn get(&self, group: ParamGroup) -> &[f64] {
        &self.0[group.index()]
    }

    pub fn shapes(&self) -> [usize; 3] {
        [self.0[0].len(), self.0[1].len(), self.0[2].len()]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    v: [Vec<f64>; 3],
    r: [Vec<f64>; 3],
    t: u64,
}

impl AdamState {
    /// Zero moments for groups of the given flattened sizes.
    pub fn new(shapes: [usize; 3]) -> Self {
        Self {
            v: shapes.map(|n| vec![0.0; n]),
            r: shapes.map(|n| vec![0.0; n]),
            t: 0,
        }
    }

    pub fn t(&self) -> u64 {
        self.t
    }

    pub fn first_moment(&self, group: ParamGroup) -> &[f64] {
        &self.v[group.index()]
    }

    pub fn second_moment(&self, group: ParamGroup) -> &[f64] {
        &self.r[group.index()]
    }
}

/// One ascent step. Returns the increments to add to each group:
/// `lr * v_hat / (sqrt(r_hat) + eps)` with `v_hat = v / (1 - beta1^t)` and
/// `r_hat = r / (1 - beta2^t)`.
pub fn adam_step(state: &mut AdamState, grads: &GroupValues, cfg: &AdamConfig) -> Result<GroupValues> {
    let expected = [state.v[0].len(), state.v[1].len(), state.v[2].len()];
    if grads.shapes() != expected {
        return Err(Error::Dimension(format!(
            "gradient group sizes {:?} do not match optimizer state {:?}",
            grads.shapes(),
            expected
        )));
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let mut out = GroupValues::default();
    for group in ParamGroup::ALL {
        let gi = group.index();
        let lr = cfg.lr_for(group);
        let g = &grads.0[gi];
        let v = &mut state.v[gi];
        let r = &mut state.r[gi];
        out.0[gi] = g
            .iter()
            .zip(v.iter_mut().zip(r.iter_mut()))
            .map(|(&g, (v, r))| {
                *v = cfg.beta1 * *v + (1.0 - cfg.beta1) * g;
                *r = cfg.beta2 * *r + (1.0 - cfg.beta2) * g * g;
                let v_hat = *v / c1;
                let r_hat = *r / c2;
                lr * v_hat / (r_hat.sqrt() + cfg.epsilon)
            })
            .collect();
    }
    Ok(out)
}

/// Outcome of a learning-rate search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrSelection {
    pub chosen: f64,
    /// Held-out score per candidate; `None` when the run failed or diverged.
    pub scores: Vec<(f64, Option<f64>)>,
}

/// Evaluates `score(lr)` for every candidate (concurrently) and returns the
/// one with the largest finite score; ties go to the smaller rate.
pub fn select_learning_rate<F>(candidates: &[f64], score: F) -> Result<LrSelection>
where
    F: Fn(f64) -> Result<f64> + Sync,
{
    if candidates.is_empty() {
        return Err(Error::Selection("no candidate learning rates".into()));
    }
    if candidates.iter().any(|&c| !(c > 0.0)) {
        return Err(Error::Config("learning rates must be positive".into()));
    }
    if let [only] = candidates {
        return Ok(LrSelection {
            chosen: *only,
            scores: vec![(*only, None)],
        });
    }
    let scores: Vec<(f64, Option<f64>)> = candidates
        .par_iter()
        .map(|&lr| (lr, score(lr).ok().filter(|v| v.is_finite())))
        .collect();
    let mut best: Option<(f64, f64)> = None;
    for &(lr, s) in &scores {
        let Some(s) = s else { continue };
        best = match best {
            Some((blr, bs)) if s < bs || (s == bs && lr > blr) => Some((blr, bs)),
            _ => Some((lr, s)),
        };
    }
    let (chosen, _) =
        best.ok_or_else(|| Error::Selection("every candidate produced a non-finite ELBO".into()))?;
    Ok(LrSelection { chosen, scores })
}
