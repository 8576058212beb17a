//! M2PL model: data containers, the item response function, the joint
//! log-density of responses and traits, and its quadratic local lower bound.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{self, CholFactor};

/// Binary N x J response matrix, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResponseMatrix {
    n_persons: usize,
    n_items: usize,
    data: Vec<u8>,
}

impl ResponseMatrix {
    pub fn new(n_persons: usize, n_items: usize, data: Vec<u8>) -> Result<Self> {
        if n_persons == 0 {
            return Err(Error::InvalidData("response matrix has no persons".into()));
        }
        if data.len() != n_persons * n_items {
            return Err(Error::Dimension(format!(
                "{} values for a {}x{} response matrix",
                data.len(),
                n_persons,
                n_items
            )));
        }
        if let Some(pos) = data.iter().position(|&v| v > 1) {
            return Err(Error::InvalidData(format!(
                "non-binary response {} at row {}, column {}",
                data[pos],
                pos / n_items.max(1),
                pos % n_items.max(1)
            )));
        }
        Ok(Self {
            n_persons,
            n_items,
            data,
        })
    }

    pub fn from_rows(rows: &[Vec<u8>]) -> Result<Self> {
        let n_items = rows.first().map_or(0, Vec::len);
        if let Some(r) = rows.iter().position(|r| r.len() != n_items) {
            return Err(Error::Dimension(format!(
                "row {r} has {} entries, expected {n_items}",
                rows[r].len()
            )));
        }
        Self::new(rows.len(), n_items, rows.concat())
    }

    pub fn n_persons(&self) -> usize {
        self.n_persons
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    #[inline]
    pub fn get(&self, person: usize, item: usize) -> u8 {
        self.data[person * self.n_items + item]
    }

    #[inline]
    pub fn row(&self, person: usize) -> &[u8] {
        &self.data[person * self.n_items..(person + 1) * self.n_items]
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.data
    }

    /// Proportion of ones in each column.
    pub fn item_means(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.n_items];
        for i in 0..self.n_persons {
            for (s, &y) in sums.iter_mut().zip(self.row(i)) {
                *s += f64::from(y);
            }
        }
        sums.iter().map(|s| s / self.n_persons as f64).collect()
    }
}

/// Which discrimination entries are estimated (`true`) and which are fixed
/// at zero (`false`). J x K, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadingStructure {
    n_items: usize,
    n_factors: usize,
    mask: Vec<bool>,
    exploratory: bool,
}

impl LoadingStructure {
    pub fn confirmatory(n_items: usize, n_factors: usize, mask: Vec<bool>) -> Result<Self> {
        if n_factors == 0 {
            return Err(Error::Config("at least one factor is required".into()));
        }
        if mask.len() != n_items * n_factors {
            return Err(Error::Dimension(format!(
                "mask has {} entries, expected {}x{}",
                mask.len(),
                n_items,
                n_factors
            )));
        }
        for j in 0..n_items {
            if !mask[j * n_factors..(j + 1) * n_factors].iter().any(|&f| f) {
                return Err(Error::InvalidData(format!("item {j} loads on no factor")));
            }
        }
        Ok(Self {
            n_items,
            n_factors,
            mask,
            exploratory: false,
        })
    }

    pub fn from_rows(rows: &[Vec<bool>]) -> Result<Self> {
        let k = rows.first().map_or(0, Vec::len);
        if let Some(r) = rows.iter().position(|r| r.len() != k) {
            return Err(Error::Dimension(format!(
                "mask row {r} has {} entries, expected {k}",
                rows[r].len()
            )));
        }
        Self::confirmatory(rows.len(), k, rows.concat())
    }

    pub fn exploratory(n_items: usize, n_factors: usize) -> Result<Self> {
        if n_factors == 0 {
            return Err(Error::Config("at least one factor is required".into()));
        }
        Ok(Self {
            n_items,
            n_factors,
            mask: vec![true; n_items * n_factors],
            exploratory: true,
        })
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn n_factors(&self) -> usize {
        self.n_factors
    }

    pub fn is_exploratory(&self) -> bool {
        self.exploratory
    }

    #[inline]
    pub fn is_free(&self, item: usize, factor: usize) -> bool {
        self.mask[item * self.n_factors + factor]
    }

    pub fn free_factors(&self, item: usize) -> Vec<usize> {
        (0..self.n_factors)
            .filter(|&k| self.is_free(item, k))
            .collect()
    }

    pub fn n_free(&self) -> usize {
        self.mask.iter().filter(|&&f| f).count()
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    /// Zeroes every constrained entry of `a`.
    pub fn apply(&self, a: &mut DMatrix<f64>) {
        for j in 0..self.n_items {
            for k in 0..self.n_factors {
                if !self.is_free(j, k) {
                    a[(j, k)] = 0.0;
                }
            }
        }
    }
}

/// Item parameters and latent covariance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    /// J x K discriminations, one row per item.
    pub a: DMatrix<f64>,
    /// J intercepts.
    pub b: DVector<f64>,
    /// K x K latent covariance.
    pub sigma_theta: DMatrix<f64>,
}

impl ModelParams {
    pub fn new(a: DMatrix<f64>, b: DVector<f64>, sigma_theta: DMatrix<f64>) -> Result<Self> {
        if a.nrows() != b.len() {
            return Err(Error::Dimension(format!(
                "A has {} rows but B has {} entries",
                a.nrows(),
                b.len()
            )));
        }
        if sigma_theta.nrows() != a.ncols() || sigma_theta.ncols() != a.ncols() {
            return Err(Error::Dimension(format!(
                "sigma_theta is {}x{}, expected {}x{}",
                sigma_theta.nrows(),
                sigma_theta.ncols(),
                a.ncols(),
                a.ncols()
            )));
        }
        Ok(Self { a, b, sigma_theta })
    }

    /// Free discriminations at 1, intercepts at 0, identity covariance.
    pub fn initial(structure: &LoadingStructure) -> Self {
        let (j, k) = (structure.n_items(), structure.n_factors());
        let a = DMatrix::from_fn(j, k, |r, c| if structure.is_free(r, c) { 1.0 } else { 0.0 });
        Self {
            a,
            b: DVector::zeros(j),
            sigma_theta: DMatrix::identity(k, k),
        }
    }

    pub fn n_items(&self) -> usize {
        self.a.nrows()
    }

    pub fn n_factors(&self) -> usize {
        self.a.ncols()
    }

    /// Checks shapes against `structure`, exact zeros on constrained entries,
    /// symmetry and positive definiteness of the covariance.
    pub fn validate(&self, structure: &LoadingStructure) -> Result<()> {
        if self.n_items() != structure.n_items() || self.n_factors() != structure.n_factors() {
            return Err(Error::Dimension(format!(
                "parameters are {}x{}, structure is {}x{}",
                self.n_items(),
                self.n_factors(),
                structure.n_items(),
                structure.n_factors()
            )));
        }
        for j in 0..self.n_items() {
            for k in 0..self.n_factors() {
                if !structure.is_free(j, k) && self.a[(j, k)] != 0.0 {
                    return Err(Error::InvalidData(format!(
                        "constrained loading ({j}, {k}) is {}",
                        self.a[(j, k)]
                    )));
                }
            }
        }
        let s = &self.sigma_theta;
        for r in 0..s.nrows() {
            for c in 0..r {
                if (s[(r, c)] - s[(c, r)]).abs() > 1e-12 {
                    return Err(Error::InvalidData("sigma_theta is not symmetric".into()));
                }
            }
        }
        CholFactor::new(s).map(|_| ())
    }

    /// Row-major copy of A, the layout used by the hot loops.
    pub fn a_row_major(&self) -> Vec<f64> {
        let (j, k) = (self.n_items(), self.n_factors());
        let mut out = Vec::with_capacity(j * k);
        for r in 0..j {
            for c in 0..k {
                out.push(self.a[(r, c)]);
            }
        }
        out
    }

    pub fn a_row(&self, item: usize) -> Vec<f64> {
        self.a.row(item).iter().copied().collect()
    }
}

/// Per-person Gaussian variational posteriors and local bound parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct VariationalState {
    /// N x K posterior means.
    pub mu: DMatrix<f64>,
    /// N posterior covariances, each K x K.
    pub sigma: Vec<DMatrix<f64>>,
    /// N x J nonnegative local parameters.
    pub xi: DMatrix<f64>,
}

impl VariationalState {
    pub fn n_persons(&self) -> usize {
        self.mu.nrows()
    }

    pub fn n_factors(&self) -> usize {
        self.mu.ncols()
    }

    pub fn mu_row(&self, person: usize) -> Vec<f64> {
        self.mu.row(person).iter().copied().collect()
    }

    pub fn xi_row(&self, person: usize) -> Vec<f64> {
        self.xi.row(person).iter().copied().collect()
    }
}

fn check_finite(values: &[f64], what: &str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Domain(format!("non-finite {what}")))
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Probability of a correct response, `sigmoid(a . theta - b)`.
pub fn irf_prob(a: &[f64], b: f64, theta: &[f64]) -> Result<f64> {
    if a.len() != theta.len() {
        return Err(Error::Dimension(format!(
            "loading has {} entries, trait has {}",
            a.len(),
            theta.len()
        )));
    }
    check_finite(a, "discrimination")?;
    check_finite(&[b], "intercept")?;
    check_finite(theta, "trait")?;
    Ok(math::sigmoid(dot(a, theta) - b))
}

/// Curvature of the local logistic bound at `xi`; `1/8` at zero.
pub fn eta(xi: f64) -> Result<f64> {
    if !xi.is_finite() {
        return Err(Error::Domain(format!("eta at non-finite xi {xi}")));
    }
    Ok(math::eta(xi))
}

/// Sum over items of `y (a.theta - b) - log(1 + exp(a.theta - b))`, with A row-major.
#[inline]
pub(crate) fn log_lik_row(y: &[u8], theta: &[f64], a_flat: &[f64], b: &[f64]) -> f64 {
    log_lik_residuals(y, theta, a_flat, b, None)
}

/// `log p(y | theta)`, optionally writing the residuals `y_j - P_j(theta)`.
///
/// This is the innermost loop of the importance-weighted phase. Factor
/// counts up to five use the fixed-size kernel below, which multiplies the
/// per-item probabilities instead of summing their logarithms.
pub(crate) fn log_lik_residuals(
    y: &[u8],
    theta: &[f64],
    a_flat: &[f64],
    b: &[f64],
    resid: Option<&mut [f64]>,
) -> f64 {
    debug_assert_eq!(a_flat.len(), y.len() * theta.len());
    debug_assert_eq!(b.len(), y.len());
    macro_rules! dispatch {
        ($($k:literal)*) => {
            match (theta.len(), resid) {
                $(
                    ($k, Some(r)) => lik_kernel::<$k, true>(y, theta, a_flat, b, r),
                    ($k, None) => lik_kernel::<$k, false>(y, theta, a_flat, b, &mut []),
                )*
                (_, r) => lik_kernel_dyn(y, theta, a_flat, b, r),
            }
        };
    }
    dispatch!(1 2 3 4 5)
}

/// Items per stack block in the fixed-size kernels.
const LIK_BLOCK: usize = 64;
/// Below this signed predictor the factor is handled in log space, keeping
/// every multiplied factor above `sigmoid(-30) ~ 9e-14`.
const LOG_TAIL: f64 = -30.0;

/// `log p(y | theta)` for a fixed number of factors. Each block of items
/// goes through separate passes (linear predictors, exponentials, factors,
/// product) so that the passes vectorize; the product runs in four
/// interleaved lanes of at most 16 factors per block, which cannot
/// underflow, and each lane is folded into the log accumulator per block.
fn lik_kernel<const K: usize, const RESID: bool>(
    y: &[u8],
    theta: &[f64],
    a_flat: &[f64],
    b: &[f64],
    resid: &mut [f64],
) -> f64 {
    let th: &[f64; K] = theta.try_into().expect("theta has K entries");
    let n = y.len();
    assert!(a_flat.len() >= n * K && b.len() >= n);
    if RESID {
        assert!(resid.len() >= n);
    }
    let mut log_acc = 0.0;
    let mut t = [0.0f64; LIK_BLOCK];
    let mut e = [0.0f64; LIK_BLOCK];
    let mut fac = [1.0f64; LIK_BLOCK];
    let mut start = 0;
    while start < n {
        let len = LIK_BLOCK.min(n - start);
        let ys = &y[start..start + len];
        // signed predictor: positive when the response agrees with it
        for q in 0..len {
            let j = start + q;
            let row = &a_flat[j * K..j * K + K];
            let mut z = -b[j];
            for c in 0..K {
                z += row[c] * th[c];
            }
            t[q] = if ys[q] == 1 { z } else { -z };
        }
        for q in 0..len {
            e[q] = math::exp_nonpositive(-t[q].abs());
        }
        let mut tail = 0.0;
        for q in 0..len {
            let inv = 1.0 / (1.0 + e[q]);
            let pos = t[q] >= 0.0;
            let f = if pos { inv } else { e[q] * inv };
            let far = t[q] < LOG_TAIL;
            fac[q] = if far { 1.0 } else { f };
            tail += if far { t[q] - e[q] } else { 0.0 };
            if RESID {
                // y - P(y = 1) = +-sigmoid(-t)
                let r = if pos { e[q] * inv } else { inv };
                resid[start + q] = if ys[q] == 1 { r } else { -r };
            }
        }
        let padded = len.div_ceil(4) * 4;
        for v in &mut fac[len..padded] {
            *v = 1.0;
        }
        let mut lanes = [1.0f64; 4];
        for quad in fac[..padded].chunks_exact(4) {
            for l in 0..4 {
                lanes[l] *= quad[l];
            }
        }
        log_acc += tail + (lanes[0] * lanes[1]).ln() + (lanes[2] * lanes[3]).ln();
        start += len;
    }
    log_acc
}

fn lik_kernel_dyn(y: &[u8], theta: &[f64], a_flat: &[f64], b: &[f64], mut resid: Option<&mut [f64]>) -> f64 {
    let k = theta.len();
    let mut acc = 0.0;
    for (j, &yj) in y.iter().enumerate() {
        let z = dot(&a_flat[j * k..(j + 1) * k], theta) - b[j];
        acc += f64::from(yj) * z - math::log1pexp(z);
        if let Some(out) = resid.as_deref_mut() {
            out[j] = f64::from(yj) - math::sigmoid(z);
        }
    }
    acc
}

fn check_person_dims(y: &[u8], theta: &[f64], params: &ModelParams) -> Result<()> {
    if y.len() != params.n_items() {
        return Err(Error::Dimension(format!(
            "{} responses for {} items",
            y.len(),
            params.n_items()
        )));
    }
    if theta.len() != params.n_factors() {
        return Err(Error::Dimension(format!(
            "trait has {} entries for {} factors",
            theta.len(),
            params.n_factors()
        )));
    }
    Ok(())
}

/// `log P(y_i, theta | A, B, Sigma_theta)`: Bernoulli log-likelihood of the
/// responses plus the zero-mean Gaussian log prior of `theta`.
pub fn log_joint(y: &[u8], theta: &[f64], params: &ModelParams) -> Result<f64> {
    check_person_dims(y, theta, params)?;
    check_finite(theta, "trait")?;
    let prior = CholFactor::new(&params.sigma_theta)?;
    let a = params.a_row_major();
    Ok(log_lik_row(y, theta, &a, params.b.as_slice()) + prior.log_normal_density_centered(theta))
}

/// The quadratic local lower bound on [`log_joint`] at local parameters `xi`.
///
/// Tight when `xi_j = |b_j - a_j . theta|` for every item.
pub fn variational_bound_pointwise(
    y: &[u8],
    theta: &[f64],
    xi: &[f64],
    params: &ModelParams,
) -> Result<f64> {
    check_person_dims(y, theta, params)?;
    if xi.len() != y.len() {
        return Err(Error::Dimension(format!(
            "{} local parameters for {} items",
            xi.len(),
            y.len()
        )));
    }
    let prior = CholFactor::new(&params.sigma_theta)?;
    let k = theta.len();
    let a = params.a_row_major();
    let mut acc = 0.0;
    for (j, (&yj, &x)) in y.iter().zip(xi).enumerate() {
        let lin = dot(&a[j * k..(j + 1) * k], theta) - params.b[j];
        let resid = -lin;
        acc += math::log_sigmoid(x) + f64::from(yj) * lin + 0.5 * (resid - x)
            - math::eta(x) * (resid * resid - x * x);
    }
    Ok(acc + prior.log_normal_density_centered(theta))
}
