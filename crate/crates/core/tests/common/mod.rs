//! Shared fixtures and independent numerical oracles for the integration
//! tests. The oracles here are written from the model definition and do not
//! call the library kernels; `props` holds property checks on the library.
#![allow(dead_code)]

pub mod props;

use iwgvem::{DMatrix, DVector, LoadingStructure, ModelParams, ResponseMatrix, VariationalState};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(rng: &mut impl Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// `G G^T + ridge I` with standard normal `G`, scaled by `scale`.
pub fn random_spd(rng: &mut impl Rng, k: usize, scale: f64, ridge: f64) -> DMatrix<f64> {
    let g = DMatrix::from_fn(k, k, |_, _| normal(rng));
    (&g * g.transpose() / k as f64 + DMatrix::identity(k, k) * ridge) * scale
}

pub struct Instance {
    pub responses: ResponseMatrix,
    pub structure: LoadingStructure,
    pub params: ModelParams,
    pub vstate: VariationalState,
}

/// Random small problem. With `dense = false` every item gets a random
/// non-empty subset of factors; otherwise every loading is free.
pub fn random_instance(rng: &mut impl Rng, n: usize, j: usize, k: usize, dense: bool) -> Instance {
    let mut mask = vec![false; j * k];
    for item in 0..j {
        loop {
            for c in 0..k {
                mask[item * k + c] = dense || rng.random_bool(0.6);
            }
            if (0..k).any(|c| mask[item * k + c]) {
                break;
            }
        }
    }
    let structure = LoadingStructure::confirmatory(j, k, mask.clone()).unwrap();
    let a = DMatrix::from_fn(j, k, |r, c| {
        if mask[r * k + c] {
            rng.random_range(0.5..2.0)
        } else {
            0.0
        }
    });
    let b = DVector::from_fn(j, |_, _| normal(rng));
    let sigma_theta = random_spd(rng, k, 1.0, 0.5);
    let params = ModelParams::new(a, b, sigma_theta).unwrap();
    let data = (0..n * j).map(|_| u8::from(rng.random_bool(0.5))).collect();
    let responses = ResponseMatrix::new(n, j, data).unwrap();
    let vstate = VariationalState {
        mu: DMatrix::from_fn(n, k, |_, _| 0.7 * normal(rng)),
        sigma: (0..n).map(|_| random_spd(rng, k, 0.3, 0.3)).collect(),
        xi: DMatrix::from_fn(n, j, |_, _| rng.random_range(0.1..3.0)),
    };
    Instance {
        responses,
        structure,
        params,
        vstate,
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn quad(m: &DMatrix<f64>, x: &[f64]) -> f64 {
    let k = x.len();
    let mut s = 0.0;
    for r in 0..k {
        for c in 0..k {
            s += x[r] * m[(r, c)] * x[c];
        }
    }
    s
}

fn eta_ref(xi: f64) -> f64 {
    if xi.abs() < 1e-3 {
        0.125 - xi * xi / 96.0
    } else {
        (xi / 2.0).tanh() / (4.0 * xi)
    }
}

fn log_sigmoid_ref(x: f64) -> f64 {
    if x > 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// `E_q` of the quadratic local bound on `log p(y | theta)` for one response.
///
/// With `x = a . theta - b`: `log p(y|theta) = (y - 1/2) x - log(2 cosh(x/2))`
/// and `-log(2 cosh(x/2)) >= log sigmoid(xi) - xi/2 - eta(xi) (x^2 - xi^2)`.
pub fn expected_bound_term(y: u8, alpha: &[f64], b: f64, mu: &[f64], sigma: &DMatrix<f64>, xi: f64) -> f64 {
    let lin = dot(alpha, mu) - b;
    let ex2 = lin * lin + quad(sigma, alpha);
    let e = eta_ref(xi);
    log_sigmoid_ref(xi) - xi / 2.0 + e * xi * xi + (f64::from(y) - 0.5) * lin - e * ex2
}

/// Expected bound summed over persons for item `j` at `(alpha, b)`.
pub fn item_objective(inst: &Instance, j: usize, alpha: &[f64], b: f64) -> f64 {
    let k = alpha.len();
    (0..inst.responses.n_persons())
        .map(|i| {
            let mu: Vec<f64> = (0..k).map(|c| inst.vstate.mu[(i, c)]).collect();
            expected_bound_term(
                inst.responses.get(i, j),
                alpha,
                b,
                &mu,
                &inst.vstate.sigma[i],
                inst.vstate.xi[(i, j)],
            )
        })
        .sum()
}

/// Maximizer of a unimodal function on `[lo, hi]`.
pub fn golden_max(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64, tol: f64) -> f64 {
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = hi - g * (hi - lo);
    let mut x2 = lo + g * (hi - lo);
    let (mut f1, mut f2) = (f(x1), f(x2));
    while hi - lo > tol {
        if f1 < f2 {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + g * (hi - lo);
            f2 = f(x2);
        } else {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - g * (hi - lo);
            f1 = f(x1);
        }
    }
    0.5 * (lo + hi)
}

/// Newton iterations with central-difference gradient and Hessian. Exact
/// (up to rounding) for quadratic objectives.
pub fn fd_newton_argmax(f: impl Fn(&[f64]) -> f64, x0: &[f64], h: f64, iters: usize) -> Vec<f64> {
    let d = x0.len();
    let mut x = x0.to_vec();
    for _ in 0..iters {
        let at = |dx: &[(usize, f64)]| {
            let mut y = x.clone();
            for &(p, v) in dx {
                y[p] += v;
            }
            f(&y)
        };
        let g = DVector::from_fn(d, |p, _| (at(&[(p, h)]) - at(&[(p, -h)])) / (2.0 * h));
        let hess = DMatrix::from_fn(d, d, |p, q| {
            if p == q {
                (at(&[(p, h)]) - 2.0 * f(&x) + at(&[(p, -h)])) / (h * h)
            } else {
                (at(&[(p, h), (q, h)]) - at(&[(p, h), (q, -h)]) - at(&[(p, -h), (q, h)])
                    + at(&[(p, -h), (q, -h)]))
                    / (4.0 * h * h)
            }
        });
        let step = hess.lu().solve(&(-g)).expect("non-singular Hessian");
        // backtrack so that a poor quadratic model cannot throw us away
        let f0 = f(&x);
        let mut scale = 1.0;
        for _ in 0..30 {
            let trial: Vec<f64> = (0..d).map(|p| x[p] + scale * step[p]).collect();
            if f(&trial) >= f0 {
                x = trial;
                break;
            }
            scale *= 0.5;
        }
    }
    x
}

/// Gauss-Hermite nodes and weights (weight function `exp(-x^2)`) via the
/// eigen-decomposition of the Jacobi matrix.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    let jac = DMatrix::from_fn(n, n, |r, c| {
        if r + 1 == c || c + 1 == r {
            (r.max(c) as f64 / 2.0).sqrt()
        } else {
            0.0
        }
    });
    let eig = jac.symmetric_eigen();
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|p| {
            let v0 = eig.eigenvectors[(0, p)];
            (eig.eigenvalues[p], std::f64::consts::PI.sqrt() * v0 * v0)
        })
        .collect();
    pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    pairs.into_iter().unzip()
}

/// Exact `sum_i log p(y_i)` for a one-factor model by quadrature:
/// `p(y_i) = pi^{-1/2} sum_k w_k prod_j p(y_ij | sqrt(2) sigma x_k)`.
pub fn log_marginal_1d(responses: &ResponseMatrix, params: &ModelParams, nodes: usize) -> f64 {
    assert_eq!(params.a.ncols(), 1);
    let (x, w) = gauss_hermite(nodes);
    let sd = params.sigma_theta[(0, 0)].sqrt();
    (0..responses.n_persons())
        .map(|i| {
            let terms: Vec<f64> = x
                .iter()
                .zip(&w)
                .map(|(&xk, &wk)| {
                    let theta = std::f64::consts::SQRT_2 * sd * xk;
                    let ll: f64 = (0..responses.n_items())
                        .map(|j| {
                            let z = params.a[(j, 0)] * theta - params.b[j];
                            if responses.get(i, j) == 1 {
                                log_sigmoid_ref(z)
                            } else {
                                log_sigmoid_ref(-z)
                            }
                        })
                        .sum();
                    wk.ln() + ll
                })
                .collect();
            let m = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln() - 0.5 * std::f64::consts::PI.ln()
        })
        .sum()
}

/// Log density of `N(mean, cov)` at `x` for `K <= 2`, written out by hand.
pub fn log_normal_small(x: &[f64], mean: &[f64], cov: &DMatrix<f64>) -> f64 {
    let k = x.len();
    let d: Vec<f64> = x.iter().zip(mean).map(|(a, b)| a - b).collect();
    let (det, q) = match k {
        1 => (cov[(0, 0)], d[0] * d[0] / cov[(0, 0)]),
        2 => {
            let det = cov[(0, 0)] * cov[(1, 1)] - cov[(0, 1)] * cov[(1, 0)];
            let q = (cov[(1, 1)] * d[0] * d[0] - 2.0 * cov[(0, 1)] * d[0] * d[1]
                + cov[(0, 0)] * d[1] * d[1])
                / det;
            (det, q)
        }
        _ => panic!("log_normal_small supports K <= 2"),
    };
    -0.5 * (k as f64 * (2.0 * std::f64::consts::PI).ln() + det.ln() + q)
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
