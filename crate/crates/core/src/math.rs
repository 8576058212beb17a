//! Scalar and small dense-matrix numerics shared by the estimators.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Below this magnitude `eta` switches to its Taylor expansion.
const ETA_TAYLOR_CUTOFF: f64 = 1e-4;

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(x))` without overflow.
#[inline]
pub fn log1pexp(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// `log(sigmoid(x))`.
#[inline]
pub fn log_sigmoid(x: f64) -> f64 {
    -log1pexp(-x)
}

/// Curvature coefficient of the quadratic logistic bound,
/// `(sigmoid(xi) - 1/2) / (2 xi)`, with limit `1/8` at zero.
///
/// Evaluated as `tanh(xi/2) / (4 xi)`, which is algebraically identical and
/// free of cancellation away from zero.
#[inline]
pub fn eta(xi: f64) -> f64 {
    let x = xi.abs();
    if x < ETA_TAYLOR_CUTOFF {
        let x2 = x * x;
        0.125 - x2 / 96.0 + x2 * x2 / 960.0
    } else {
        (0.5 * x).tanh() / (4.0 * x)
    }
}

/// Log-sum-exp of a slice; `-inf` for an empty or all `-inf` slice.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// `2^(j/64)` for `j = 0..64`, correctly rounded.
#[allow(clippy::excessive_precision)]
const EXP2_TABLE: [f64; 64] = [
    1.0, 1.0108892860517005, 1.0218971486541166,
    1.0330248790212284, 1.0442737824274138, 1.0556451783605572,
    1.0671404006768237, 1.0787607977571199, 1.0905077326652577,
    1.102382583307841, 1.1143867425958924, 1.1265216186082418,
    1.1387886347566916, 1.1511892299529827, 1.1637248587775775,
    1.1763969916502812, 1.189207115002721, 1.202156731452703,
    1.215247359980469, 1.22848053610687, 1.241857812073484,
    1.255380757024691, 1.2690509571917332, 1.2828700160787783,
    1.2968395546510096, 1.3109612115247644, 1.3252366431597413,
    1.339667524053303, 1.3542555469368927, 1.3690024229745905,
    1.383909881963832, 1.3989796725383112, std::f64::consts::SQRT_2,
    1.42961333839197, 1.4451808069770467, 1.460917794180647,
    1.4768261459394993, 1.4929077282912648, 1.5091644275934228,
    1.5255981507445384, 1.5422108254079407, 1.559004400237837,
    1.5759808451078865, 1.593142151342267, 1.6104903319492543,
    1.6280274218573478, 1.645755478153965, 1.6636765803267364,
    1.681792830507429, 1.7001063537185235, 1.718619298122478,
    1.7373338352737062, 1.7562521603732995, 1.7753764925265212,
    1.7947090750031072, 1.8142521755003989, 1.8340080864093424,
    1.8539791250833855, 1.8741676341103, 1.8945759815869656,
    1.9152065613971474, 1.9360617934922943, 1.9571441241754002,
    1.978456026387951,
];

/// `exp(x)` for `x <= 0`, for the hot loop of the importance-weighted phase.
///
/// Table-driven: `x = (64 m + j) ln2 / 64 + r` with `|r| <= ln2 / 128`, so
/// `exp(x) = 2^m 2^(j/64) exp(r)` with a degree-5 polynomial for `exp(r)`
/// (relative error below 1e-15). Arguments below -708 return `exp(-708)`
/// rather than a subnormal or zero.
#[inline(always)]
#[allow(clippy::excessive_precision)]
pub fn exp_nonpositive(x: f64) -> f64 {
    // 1.5 * 2^52: adding it rounds to an integer held in the low mantissa bits
    const SHIFTER: f64 = 6_755_399_441_055_744.0;
    const INV_STEP: f64 = 64.0 / std::f64::consts::LN_2;
    const STEP_HI: f64 = 6.931_471_803_691_238_2e-1 / 64.0;
    const STEP_LO: f64 = 1.908_214_929_270_587_7e-10 / 64.0;
    let x = x.clamp(-708.0, 0.0);
    let shifted = x * INV_STEP + SHIFTER;
    let nf = shifted - SHIFTER;
    let n = (shifted.to_bits() as i64).wrapping_sub(SHIFTER.to_bits() as i64);
    let r = (x - nf * STEP_HI) - nf * STEP_LO;
    let p = 1.0 + r * (1.0 + r * (0.5 + r * (1.0 / 6.0 + r * (1.0 / 24.0 + r * (1.0 / 120.0)))));
    let scale = f64::from_bits((((n >> 6) + 1023) as u64) << 52);
    scale * EXP2_TABLE[(n & 63) as usize] * p
}

/// Lower Cholesky factor of a small SPD matrix, stored row-major, with the
/// log-determinant of the original matrix cached.
#[derive(Debug, Clone)]
pub struct CholFactor {
    k: usize,
    l: Vec<f64>,
    log_det: f64,
}

impl CholFactor {
    pub fn new(m: &DMatrix<f64>) -> Result<Self> {
        let k = m.nrows();
        if m.ncols() != k {
            return Err(Error::Dimension(format!(
                "expected a square matrix, got {}x{}",
                k,
                m.ncols()
            )));
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::NotPositiveDefinite("non-finite entry".into()));
        }
        let chol = m
            .clone()
            .cholesky()
            .ok_or_else(|| Error::NotPositiveDefinite(format!("{k}x{k} matrix")))?;
        let lm = chol.l();
        let mut l = vec![0.0; k * k];
        let mut log_det = 0.0;
        for r in 0..k {
            for c in 0..=r {
                l[r * k + c] = lm[(r, c)];
            }
            let d = lm[(r, r)];
            if !(d > 0.0) {
                return Err(Error::NotPositiveDefinite(format!("zero pivot at {r}")));
            }
            log_det += 2.0 * d.ln();
        }
        Ok(Self { k, l, log_det })
    }

    pub fn dim(&self) -> usize {
        self.k
    }

    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    /// `out = L z`.
    #[inline]
    pub fn mul_lower(&self, z: &[f64], out: &mut [f64]) {
        let k = self.k;
        for r in 0..k {
            let row = &self.l[r * k..r * k + r + 1];
            out[r] = row.iter().zip(z).map(|(a, b)| a * b).sum();
        }
    }

    /// `x^T M^{-1} x` where `M = L L^T`.
    #[inline]
    pub fn quad_form(&self, x: &[f64]) -> f64 {
        let k = self.k;
        let mut y = [0.0f64; 16];
        let mut heap;
        let y: &mut [f64] = if k <= 16 {
            &mut y[..k]
        } else {
            heap = vec![0.0; k];
            &mut heap
        };
        let mut acc = 0.0;
        for r in 0..k {
            let mut s = x[r];
            for c in 0..r {
                s -= self.l[r * k + c] * y[c];
            }
            y[r] = s / self.l[r * k + r];
            acc += y[r] * y[r];
        }
        acc
    }

    /// Log density of `N(mean, L L^T)` at `x`.
    #[inline]
    pub fn log_normal_density(&self, x: &[f64], mean: &[f64]) -> f64 {
        let k = self.k;
        let mut d = [0.0f64; 16];
        let mut heap;
        let d: &mut [f64] = if k <= 16 {
            &mut d[..k]
        } else {
            heap = vec![0.0; k];
            &mut heap
        };
        for i in 0..k {
            d[i] = x[i] - mean[i];
        }
        -0.5 * (k as f64 * LN_2PI + self.log_det + self.quad_form(d))
    }

    /// Log density of `N(0, L L^T)` at `x`.
    #[inline]
    pub fn log_normal_density_centered(&self, x: &[f64]) -> f64 {
        -0.5 * (self.k as f64 * LN_2PI + self.log_det + self.quad_form(x))
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        let k = self.k;
        let mut inv = DMatrix::zeros(k, k);
        let mut col = vec![0.0; k];
        for j in 0..k {
            col.iter_mut().for_each(|v| *v = 0.0);
            col[j] = 1.0;
            self.solve_in_place(&mut col);
            for i in 0..k {
                inv[(i, j)] = col[i];
            }
        }
        symmetrize(&mut inv);
        inv
    }

    /// Solves `L L^T x = b` in place.
    pub fn solve_in_place(&self, b: &mut [f64]) {
        let k = self.k;
        for r in 0..k {
            let mut s = b[r];
            for c in 0..r {
                s -= self.l[r * k + c] * b[c];
            }
            b[r] = s / self.l[r * k + r];
        }
        for r in (0..k).rev() {
            let mut s = b[r];
            for c in r + 1..k {
                s -= self.l[c * k + r] * b[c];
            }
            b[r] = s / self.l[r * k + r];
        }
    }
}

/// Replaces `m` by `(m + m^T) / 2`.
pub fn symmetrize(m: &mut DMatrix<f64>) {
    let k = m.nrows();
    for i in 0..k {
        for j in i + 1..k {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Inverse of an SPD matrix via Cholesky.
pub fn spd_inverse(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    Ok(CholFactor::new(m)?.inverse())
}

/// Symmetrizes and raises every eigenvalue to at least `floor`.
/// Returns whether any eigenvalue was clipped.
pub fn clip_eigenvalues(m: &mut DMatrix<f64>, floor: f64) -> bool {
    symmetrize(m);
    let eig = m.clone().symmetric_eigen();
    if eig.eigenvalues.iter().all(|&v| v >= floor) {
        return false;
    }
    let clipped = eig.eigenvalues.map(|v| v.max(floor));
    let q = &eig.eigenvectors;
    *m = q * DMatrix::from_diagonal(&clipped) * q.transpose();
    symmetrize(m);
    true
}

/// Euclidean (Frobenius) norm of `a - b` over matching storage.
pub fn diff_norm(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn eta_limit_and_symmetry() {
        assert_eq!(eta(0.0), 0.125);
        assert_eq!(eta(1.7), eta(-1.7));
        // continuity across the Taylor cutoff
        let below = eta(0.999_999e-4);
        let above = eta(1.000_001e-4);
        assert!((below - above).abs() < 1e-12);
    }

    #[test]
    fn eta_matches_defining_formula() {
        for &xi in &[0.01, 0.3, 1.0, 2.0, 7.5, 30.0] {
            let direct = (sigmoid(xi) - 0.5) / (2.0 * xi);
            assert_relative_eq!(eta(xi), direct, max_relative = 1e-10);
        }
    }

    #[test]
    fn stable_log1pexp_extremes() {
        assert_relative_eq!(log1pexp(700.0), 700.0);
        assert!(log1pexp(-700.0) > 0.0);
        assert!(log1pexp(-700.0) < 1e-300);
        assert_relative_eq!(log1pexp(0.0), std::f64::consts::LN_2);
    }

    #[test]
    fn log_sum_exp_handles_large_offsets() {
        let v = [1000.0, 1000.0];
        assert_relative_eq!(log_sum_exp(&v), 1000.0 + std::f64::consts::LN_2);
        assert_eq!(log_sum_exp(&[]), f64::NEG_INFINITY);
    }

    #[test]
    fn chol_density_matches_nalgebra() {
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 0.5]);
        let f = CholFactor::new(&m).unwrap();
        let x = [0.4, -1.2];
        let mu = [0.1, 0.2];
        let inv = m.clone().try_inverse().unwrap();
        let d = nalgebra::DVector::from_vec(vec![x[0] - mu[0], x[1] - mu[1]]);
        let q = (d.transpose() * &inv * &d)[(0, 0)];
        let expected = -0.5 * (2.0 * LN_2PI + m.determinant().ln() + q);
        assert_relative_eq!(f.log_normal_density(&x, &mu), expected, epsilon = 1e-12);
        let prod = &m * f.inverse();
        assert_relative_eq!(prod, DMatrix::identity(2, 2), epsilon = 1e-12);
    }

    #[test]
    fn chol_rejects_indefinite() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(
            CholFactor::new(&m),
            Err(Error::NotPositiveDefinite(_))
        ));
    }

    #[test]
    fn eigen_clip_restores_definiteness() {
        let mut m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(clip_eigenvalues(&mut m, 1e-6));
        assert!(CholFactor::new(&m).is_ok());
    }

    #[test]
    fn vectorizable_exp_matches_libm() {
        let mut worst: f64 = 0.0;
        for i in 0..=2_000_000 {
            let x = -(i as f64) * 0.00035;
            let want = x.exp();
            let got = exp_nonpositive(x);
            worst = worst.max(((got - want) / want).abs());
        }
        assert!(worst < 1e-15, "max relative error {worst}");
        assert_eq!(exp_nonpositive(0.0), 1.0);
        assert!(exp_nonpositive(-1e6) > 0.0);
    }
}
