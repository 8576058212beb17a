//! Varimax and promax rotation of exploratory loadings, and alignment of
//! rotated estimates to known generating loadings.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math;

const VARIMAX_TOL: f64 = 1e-8;
const VARIMAX_MAX_SWEEPS: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RotationResult {
    /// Rotated J x K loadings, `loadings = original * transform`.
    pub loadings: DMatrix<f64>,
    /// K x K factor correlations.
    pub phi: DMatrix<f64>,
    pub transform: DMatrix<f64>,
    pub varimax_iters: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PromaxConfig {
    pub power: u32,
    /// Row-normalize the varimax loadings before building the target.
    pub normalize_target: bool,
}

impl Default for PromaxConfig {
    fn default() -> Self {
        Self {
            power: 4,
            normalize_target: true,
        }
    }
}

fn row_normalized(l: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = l.clone();
    for j in 0..l.nrows() {
        let h = l.row(j).norm();
        if h > 0.0 {
            out.row_mut(j).scale_mut(1.0 / h);
        }
    }
    out
}

/// Raw varimax criterion: sum over columns of the variance of squared
/// loadings, optionally after Kaiser row normalization.
pub fn varimax_criterion(loadings: &DMatrix<f64>, normalize: bool) -> f64 {
    let l = if normalize {
        row_normalized(loadings)
    } else {
        loadings.clone()
    };
    let n = l.nrows() as f64;
    l.column_iter()
        .map(|col| {
            let m2 = col.iter().map(|x| x * x).sum::<f64>() / n;
            let m4 = col.iter().map(|x| x.powi(4)).sum::<f64>() / n;
            m4 - m2 * m2
        })
        .sum()
}

fn check_input(loadings: &DMatrix<f64>) -> Result<()> {
    let (j, k) = loadings.shape();
    if k == 0 {
        return Err(Error::Rotation("no factors".into()));
    }
    if j < k {
        return Err(Error::Rotation(format!("{j} items cannot identify {k} factors")));
    }
    if loadings.iter().any(|v| !v.is_finite()) {
        return Err(Error::Rotation("non-finite loading".into()));
    }
    if loadings.column_iter().any(|c| c.iter().all(|&v| v == 0.0)) && k > 1 {
        return Err(Error::Rotation("a loading column is identically zero".into()));
    }
    Ok(())
}

/// Kaiser-normalized varimax by pairwise planar rotations. Returns the
/// rotated loadings, the orthogonal transform `T` (rotated = input * T) and
/// the number of sweeps.
pub fn varimax(loadings: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>, usize)> {
    check_input(loadings)?;
    let (j_n, k) = loadings.shape();
    let mut t = DMatrix::<f64>::identity(k, k);
    if k == 1 {
        return Ok((loadings.clone(), t, 0));
    }
    let mut x = row_normalized(loadings);
    let n = j_n as f64;
    let mut crit = varimax_criterion(&x, false);
    let mut sweeps = 0;
    while sweeps < VARIMAX_MAX_SWEEPS {
        sweeps += 1;
        for p in 0..k - 1 {
            for q in p + 1..k {
                let (mut a, mut b, mut c, mut d) = (0.0, 0.0, 0.0, 0.0);
                for r in 0..j_n {
                    let (xp, xq) = (x[(r, p)], x[(r, q)]);
                    let u = xp * xp - xq * xq;
                    let v = 2.0 * xp * xq;
                    a += u;
                    b += v;
                    c += u * u - v * v;
                    d += 2.0 * u * v;
                }
                let num = d - 2.0 * a * b / n;
                let den = c - (a * a - b * b) / n;
                let phi = 0.25 * num.atan2(den);
                if phi.abs() < 1e-15 {
                    continue;
                }
                let (s, co) = phi.sin_cos();
                for r in 0..j_n {
                    let (xp, xq) = (x[(r, p)], x[(r, q)]);
                    x[(r, p)] = xp * co + xq * s;
                    x[(r, q)] = -xp * s + xq * co;
                }
                for r in 0..k {
                    let (tp, tq) = (t[(r, p)], t[(r, q)]);
                    t[(r, p)] = tp * co + tq * s;
                    t[(r, q)] = -tp * s + tq * co;
                }
            }
        }
        let next = varimax_criterion(&x, false);
        let change = (next - crit).abs();
        crit = next;
        if change < VARIMAX_TOL {
            break;
        }
    }
    Ok((loadings * &t, t, sweeps))
}

/// Promax: varimax, then a least-squares fit of the varimax loadings to the
/// sign-preserving `power`-th power target, with the transform scaled so the
/// implied factor correlations have unit diagonal. Columns are finally
/// oriented to have nonnegative sums.
pub fn promax(loadings: &DMatrix<f64>, cfg: &PromaxConfig) -> Result<RotationResult> {
    check_input(loadings)?;
    let k = loadings.ncols();
    let (vl, vt, iters) = varimax(loadings)?;
    if k == 1 {
        let mut res = RotationResult {
            loadings: loadings.clone(),
            phi: DMatrix::identity(1, 1),
            transform: DMatrix::identity(1, 1),
            varimax_iters: 0,
        };
        orient(&mut res);
        return Ok(res);
    }
    let base = if cfg.normalize_target {
        row_normalized(&vl)
    } else {
        vl.clone()
    };
    let target = base.map(|x| x.signum() * x.abs().powi(cfg.power as i32));
    let gram = vl.transpose() * &vl;
    let u = gram
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Rotation("varimax loadings are rank deficient".into()))?
        .solve(&(vl.transpose() * &target));
    let utu = u.transpose() * &u;
    let utu_inv = utu
        .try_inverse()
        .ok_or_else(|| Error::Rotation("promax transform is singular".into()))?;
    let scale = DMatrix::from_diagonal(&utu_inv.diagonal().map(f64::sqrt));
    let u = u * scale;
    let transform = vt * &u;
    let tt = transform.transpose() * &transform;
    let mut phi = tt
        .try_inverse()
        .ok_or_else(|| Error::Rotation("promax transform is singular".into()))?;
    math::symmetrize(&mut phi);
    for c in 0..k {
        phi[(c, c)] = 1.0;
    }
    let mut res = RotationResult {
        loadings: loadings * &transform,
        phi,
        transform,
        varimax_iters: iters,
    };
    orient(&mut res);
    Ok(res)
}

fn orient(res: &mut RotationResult) {
    let k = res.loadings.ncols();
    for c in 0..k {
        if res.loadings.column(c).sum() < 0.0 {
            res.loadings.column_mut(c).neg_mut();
            res.transform.column_mut(c).neg_mut();
            for r in 0..k {
                if r != c {
                    res.phi[(r, c)] = -res.phi[(r, c)];
                    res.phi[(c, r)] = -res.phi[(c, r)];
                }
            }
        }
    }
}

/// Column permutation and signs mapping an estimate onto a reference.
/// Aligned column `c` is `signs[c] * estimate column permutation[c]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Alignment {
    pub permutation: Vec<usize>,
    pub signs: Vec<f64>,
    pub loadings: DMatrix<f64>,
}

impl Alignment {
    /// Applies the same permutation and sign flips to a factor correlation
    /// matrix.
    pub fn apply_to_phi(&self, phi: &DMatrix<f64>) -> DMatrix<f64> {
        let k = self.permutation.len();
        DMatrix::from_fn(k, k, |r, c| {
            self.signs[r] * self.signs[c] * phi[(self.permutation[r], self.permutation[c])]
        })
    }
}

fn permutations(k: usize) -> Vec<Vec<usize>> {
    fn rec(cur: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        if cur.len() == used.len() {
            out.push(cur.clone());
            return;
        }
        for i in 0..used.len() {
            if !used[i] {
                used[i] = true;
                cur.push(i);
                rec(cur, used, out);
                cur.pop();
                used[i] = false;
            }
        }
    }
    let mut out = Vec::new();
    rec(&mut Vec::with_capacity(k), &mut vec![false; k], &mut out);
    out
}

/// Exhaustive search over column permutations; for each, the best sign of a
/// column is independent of the others. Ties keep the earliest permutation
/// in lexicographic order (identity first).
pub fn align_to_truth(estimate: &DMatrix<f64>, truth: &DMatrix<f64>) -> Result<Alignment> {
    if estimate.shape() != truth.shape() {
        return Err(Error::Dimension(format!(
            "estimate is {:?}, truth is {:?}",
            estimate.shape(),
            truth.shape()
        )));
    }
    let k = estimate.ncols();
    let mut best: Option<(f64, Vec<usize>, Vec<f64>)> = None;
    for perm in permutations(k) {
        let mut dist = 0.0;
        let mut signs = Vec::with_capacity(k);
        for (c, &p) in perm.iter().enumerate() {
            let e = estimate.column(p);
            let t = truth.column(c);
            let plus = (e - t).norm_squared();
            let minus = (e + t).norm_squared();
            if minus < plus {
                signs.push(-1.0);
                dist += minus;
            } else {
                signs.push(1.0);
                dist += plus;
            }
        }
        if best.as_ref().is_none_or(|(d, _, _)| dist < *d) {
            best = Some((dist, perm, signs));
        }
    }
    let (_, permutation, signs) = best.expect("at least one permutation");
    let loadings = DMatrix::from_fn(estimate.nrows(), k, |r, c| {
        signs[c] * estimate[(r, permutation[c])]
    });
    Ok(Alignment {
        permutation,
        signs,
        loadings,
    })
}
