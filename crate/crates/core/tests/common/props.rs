//! Property checks shared by the proptest suite and the acceptance run.
//! Each takes a seed plus sizes and reports the first violation.

use super::{random_instance, rng};
use iwgvem::gvem::{self, GvemConfig};
use iwgvem::iw::{self, IwConfig};
use iwgvem::rotation::{promax, varimax};
use iwgvem::{DMatrix, PromaxConfig};
use rand::Rng;

pub type Check = Result<(), String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Check {
    if cond { Ok(()) } else { Err(msg()) }
}

pub fn weight_normalization(seed: u64, n: usize, j: usize, k: usize, s: usize, m: usize) -> Check {
    let inst = random_instance(&mut rng(seed), n, j, k, false);
    let cfg = IwConfig {
        n_outer: s,
        n_inner: m,
        seed,
    };
    let samples = iw::draw_samples(&inst.vstate, &cfg, seed % 7).map_err(|e| e.to_string())?;
    let w = iw::compute_weights(&inst.responses, &samples, &inst.params, &inst.vstate).map_err(|e| e.to_string())?;
    for i in 0..n {
        for o in 0..s {
            let mut sum = 0.0;
            for d in 0..m {
                let v = w.normalized(i, o, d);
                ensure((0.0..=1.0).contains(&v), || format!("weight {v} outside [0, 1]"))?;
                sum += v;
            }
            ensure((sum - 1.0).abs() < 1e-12, || format!("block ({i}, {o}) sums to {sum}"))?;
        }
    }
    Ok(())
}

/// Masked loadings stay exactly zero through the GVEM M-step, a GVEM fit and
/// the IW gradient.
pub fn mask_preservation(seed: u64, n: usize, j: usize, k: usize) -> Check {
    let inst = random_instance(&mut rng(seed), n, j, k, false);
    let masked = |a: &DMatrix<f64>, what: &str| -> Check {
        for r in 0..j {
            for c in 0..k {
                if !inst.structure.is_free(r, c) {
                    ensure(a[(r, c)].to_bits() == 0, || format!("{what}: entry ({r}, {c}) = {}", a[(r, c)]))?;
                }
            }
        }
        Ok(())
    };
    let (a, _) = gvem::mstep_item(&inst.responses, &inst.vstate, &inst.structure).map_err(|e| e.to_string())?;
    masked(&a, "M-step")?;
    let cfg = GvemConfig {
        max_iter: 20,
        ..GvemConfig::default()
    };
    let fit = gvem::fit_gvem(&inst.responses, &inst.structure, &cfg, None).map_err(|e| e.to_string())?;
    masked(&fit.params.a, "GVEM fit")?;
    let iw_cfg = IwConfig {
        n_outer: 2,
        n_inner: 3,
        seed,
    };
    let samples = iw::draw_samples(&inst.vstate, &iw_cfg, 0).map_err(|e| e.to_string())?;
    let w = iw::compute_weights(&inst.responses, &samples, &inst.params, &inst.vstate).map_err(|e| e.to_string())?;
    let g = iw::gradients(&inst.responses, &samples, &w, &inst.params, &inst.structure).map_err(|e| e.to_string())?;
    masked(&g.a, "IW gradient")
}

/// `alpha_j' Sigma alpha_l` is unchanged by the identification rescaling.
pub fn rescale_invariance(seed: u64, j: usize, k: usize) -> Check {
    let mut r = rng(seed);
    let mut inst = random_instance(&mut r, 1, j, k, false);
    // widen the variances so the rescaling is far from the identity
    for c in 0..k {
        inst.params.sigma_theta[(c, c)] *= r.random_range(0.2..5.0);
    }
    let out = gvem::rescale_identification(&inst.params).map_err(|e| e.to_string())?;
    let before = &inst.params.a * &inst.params.sigma_theta * inst.params.a.transpose();
    let after = &out.a * &out.sigma_theta * out.a.transpose();
    let err = (&before - &after).abs().max() / before.abs().max().max(1.0);
    ensure(err < 1e-12, || format!("implied covariance changed by {err}"))?;
    for c in 0..k {
        ensure(out.sigma_theta[(c, c)] == 1.0, || "diagonal is not unit".into())?;
    }
    Ok(())
}

/// `L* Phi L*' = L L'` for promax output, and varimax is orthogonal.
pub fn rotation_factorization(seed: u64, j: usize, k: usize) -> Check {
    let mut r = rng(seed);
    let l = DMatrix::from_fn(j, k, |_, _| r.random_range(-2.0..2.0));
    let (_, t, _) = varimax(&l).map_err(|e| e.to_string())?;
    let orth = (t.transpose() * &t - DMatrix::identity(k, k)).abs().max();
    ensure(orth < 1e-10, || format!("varimax transform off orthogonal by {orth}"))?;
    let res = promax(&l, &PromaxConfig::default()).map_err(|e| e.to_string())?;
    let err = (&res.loadings * &res.phi * res.loadings.transpose() - &l * l.transpose()).abs().max();
    ensure(err < 1e-8, || format!("factorization error {err}"))?;
    for c in 0..k {
        ensure(res.phi[(c, c)] == 1.0, || "phi diagonal is not unit".into())?;
    }
    Ok(())
}
