//! Simulation harness: generating designs, replicated fits, bias/RMSE
//! evaluation, and the IW-ELBO tightness experiment.

use std::fmt;
use std::io::Write;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gvem::{self, Mode};
use crate::iw::{self, IwEstimate};
use crate::math::{self, CholFactor};
use crate::model::{dot, LoadingStructure, ModelParams, ResponseMatrix};
use crate::pipeline::{self, FitConfig};
use crate::rng::{self, tag};
use crate::rotation::{self, RotationResult};

const MAX_COVARIANCE_ATTEMPTS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ItemStructure {
    /// Every item loads on exactly one factor.
    Between,
    /// Items load on one, two or three factors.
    Within,
}

impl fmt::Display for ItemStructure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ItemStructure::Between => "between",
            ItemStructure::Within => "within",
        })
    }
}

/// Off-diagonal latent correlations are drawn uniformly from `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrelationBand {
    pub lo: f64,
    pub hi: f64,
}

impl CorrelationBand {
    pub const LOW: Self = Self { lo: 0.1, hi: 0.3 };
    pub const HIGH: Self = Self { lo: 0.5, hi: 0.7 };

    pub fn point(r: f64) -> Self {
        Self { lo: r, hi: r }
    }

    pub fn label(&self) -> String {
        if *self == Self::LOW {
            "low".into()
        } else if *self == Self::HIGH {
            "high".into()
        } else {
            format!("{}-{}", self.lo, self.hi)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyDesign {
    pub n: usize,
    pub k: usize,
    pub j: usize,
    pub structure: ItemStructure,
    pub correlation: CorrelationBand,
    pub mode: Mode,
    pub reps: usize,
    pub base_seed: u64,
}

impl StudyDesign {
    /// Test length paired with the number of factors: 30 items for two
    /// factors, 55 for five; otherwise 15 per factor.
    pub fn default_items(k: usize) -> usize {
        match k {
            2 => 30,
            5 => 55,
            _ => 15 * k,
        }
    }

    pub fn new(
        n: usize,
        k: usize,
        structure: ItemStructure,
        correlation: CorrelationBand,
        mode: Mode,
    ) -> Self {
        Self {
            n,
            k,
            j: Self::default_items(k),
            structure,
            correlation,
            mode,
            reps: 100,
            base_seed: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.k == 0 || self.j == 0 || self.reps == 0 {
            return Err(Error::Design("n, k, j and reps must be positive".into()));
        }
        let CorrelationBand { lo, hi } = self.correlation;
        if !(lo <= hi) || lo <= -1.0 || hi >= 1.0 {
            return Err(Error::Design(format!("invalid correlation band [{lo}, {hi}]")));
        }
        generate_structure(self.k, self.j, self.structure).map(|_| ())
    }

    /// The full factorial grid: N in {200, 500}, K in {2, 5}, both item
    /// structures, both correlation bands, both modes (32 cells).
    pub fn full_grid(reps: usize, base_seed: u64) -> Vec<StudyDesign> {
        let mut out = Vec::new();
        for mode in [Mode::Confirmatory, Mode::Exploratory] {
            for k in [2, 5] {
                for n in [200, 500] {
                    for correlation in [CorrelationBand::LOW, CorrelationBand::HIGH] {
                        for structure in [ItemStructure::Between, ItemStructure::Within] {
                            out.push(StudyDesign {
                                reps,
                                base_seed,
                                ..StudyDesign::new(n, k, structure, correlation, mode)
                            });
                        }
                    }
                }
            }
        }
        out
    }

    pub fn rep_seed(&self, rep: usize) -> u64 {
        self.base_seed.wrapping_add(rep as u64)
    }
}

/// Generating parameters, pattern, and latent traits of one dataset.
#[derive(Debug, Clone)]
pub struct TrueModel {
    pub params: ModelParams,
    pub structure: LoadingStructure,
    pub thetas: DMatrix<f64>,
}

/// Near-equal split of `total` into `parts`, larger parts first.
fn partition(total: usize, parts: usize) -> Vec<usize> {
    (0..parts)
        .map(|p| total / parts + usize::from(p < total % parts))
        .collect()
}

/// All `size`-subsets of `0..k` in lexicographic order.
fn combinations(k: usize, size: usize) -> Vec<Vec<usize>> {
    fn rec(start: usize, k: usize, size: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == size {
            out.push(cur.clone());
            return;
        }
        for i in start..k {
            cur.push(i);
            rec(i + 1, k, size, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(0, k, size, &mut Vec::new(), &mut out);
    out
}

/// Loading pattern for a simulation design.
///
/// Between: consecutive near-equal blocks of items on factors 1..K.
/// Within with K = 2: thirds on factor 1 only, factor 2 only, both.
/// Within with K >= 3: thirds (sizes split larger-first, e.g. 19/18/18 of
/// 55) on one, two and three factors; inside each third the items cycle
/// through that size's factor subsets in lexicographic order.
pub fn generate_structure(k: usize, j: usize, kind: ItemStructure) -> Result<LoadingStructure> {
    if k == 0 {
        return Err(Error::Design("at least one factor is required".into()));
    }
    let mut mask = vec![false; j * k];
    let within = kind == ItemStructure::Within && k > 1;
    if !within {
        if j < k {
            return Err(Error::Design(format!("{j} items cannot cover {k} factors")));
        }
        let mut item = 0;
        for (f, &count) in partition(j, k).iter().enumerate() {
            for _ in 0..count {
                mask[item * k + f] = true;
                item += 1;
            }
        }
    } else {
        if j < 3 {
            return Err(Error::Design(format!("within-item design needs at least 3 items, got {j}")));
        }
        let groups: Vec<Vec<Vec<usize>>> = if k == 2 {
            vec![vec![vec![0]], vec![vec![1]], vec![vec![0, 1]]]
        } else {
            (1..=3).map(|size| combinations(k, size)).collect()
        };
        let mut item = 0;
        for (group, &count) in groups.iter().zip(&partition(j, 3)) {
            for r in 0..count {
                for &f in &group[r % group.len()] {
                    mask[item * k + f] = true;
                }
                item += 1;
            }
        }
        for f in 0..k {
            if !(0..j).any(|i| mask[i * k + f]) {
                return Err(Error::Design(format!(
                    "within-item pattern with {j} items leaves factor {f} unused"
                )));
            }
        }
    }
    LoadingStructure::confirmatory(j, k, mask)
}

/// Draws `n` traits from `N(0, Sigma_theta)` and Bernoulli responses.
pub fn simulate_responses(
    params: &ModelParams,
    n: usize,
    rng: &mut impl Rng,
) -> Result<(ResponseMatrix, DMatrix<f64>)> {
    let k = params.n_factors();
    let j_n = params.n_items();
    let chol = CholFactor::new(&params.sigma_theta)?;
    let a = params.a_row_major();
    let mut thetas = DMatrix::zeros(n, k);
    let mut data = Vec::with_capacity(n * j_n);
    let mut z = vec![0.0; k];
    let mut theta = vec![0.0; k];
    for i in 0..n {
        for v in z.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        chol.mul_lower(&z, &mut theta);
        for c in 0..k {
            thetas[(i, c)] = theta[c];
        }
        for j in 0..j_n {
            let p = math::sigmoid(dot(&a[j * k..(j + 1) * k], &theta) - params.b[j]);
            data.push(u8::from(rng.random::<f64>() < p));
        }
    }
    Ok((ResponseMatrix::new(n, j_n, data)?, thetas))
}

fn draw_correlation(k: usize, band: CorrelationBand, rng: &mut impl Rng) -> Result<DMatrix<f64>> {
    for _ in 0..MAX_COVARIANCE_ATTEMPTS {
        let mut s = DMatrix::identity(k, k);
        for r in 0..k {
            for c in r + 1..k {
                let v = if band.lo == band.hi {
                    band.lo
                } else {
                    rng.random_range(band.lo..band.hi)
                };
                s[(r, c)] = v;
                s[(c, r)] = v;
            }
        }
        if CholFactor::new(&s).is_ok() {
            return Ok(s);
        }
    }
    Err(Error::Design(format!(
        "no positive definite correlation matrix after {MAX_COVARIANCE_ATTEMPTS} draws"
    )))
}

/// One synthetic dataset: free loadings ~ U[1, 2], intercepts ~ N(0, 1),
/// correlations ~ U(band), traits ~ N(0, Sigma), Bernoulli responses.
pub fn generate_dataset(design: &StudyDesign, rep_seed: u64) -> Result<(ResponseMatrix, TrueModel)> {
    design.validate()?;
    let structure = generate_structure(design.k, design.j, design.structure)?;
    let mut rng = rng::stream(rep_seed, &[tag::DATA]);
    let unif = Uniform::new_inclusive(1.0, 2.0).expect("valid range");
    let a = DMatrix::from_fn(design.j, design.k, |_, _| 0.0);
    let mut a = a;
    for r in 0..design.j {
        for c in 0..design.k {
            if structure.is_free(r, c) {
                a[(r, c)] = unif.sample(&mut rng);
            }
        }
    }
    let b = DVector::from_fn(design.j, |_, _| rng.sample::<f64, _>(StandardNormal));
    let sigma_theta = draw_correlation(design.k, design.correlation, &mut rng)?;
    let params = ModelParams::new(a, b, sigma_theta)?;
    let (responses, thetas) = simulate_responses(&params, design.n, &mut rng)?;
    Ok((
        responses,
        TrueModel {
            params,
            structure,
            thetas,
        },
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlockMetric {
    pub bias: f64,
    pub rmse: f64,
    pub count: usize,
}

impl BlockMetric {
    pub fn from_errors(errors: &[f64]) -> Self {
        if errors.is_empty() {
            return Self {
                bias: 0.0,
                rmse: 0.0,
                count: 0,
            };
        }
        let n = errors.len() as f64;
        Self {
            bias: errors.iter().sum::<f64>() / n,
            rmse: (errors.iter().map(|e| e * e).sum::<f64>() / n).sqrt(),
            count: errors.len(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub alpha: BlockMetric,
    pub b: BlockMetric,
    pub sigma: BlockMetric,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamBlock {
    Alpha,
    B,
    Sigma,
}

impl ParamBlock {
    pub const ALL: [ParamBlock; 3] = [ParamBlock::Alpha, ParamBlock::B, ParamBlock::Sigma];

    pub fn name(self) -> &'static str {
        match self {
            ParamBlock::Alpha => "alpha",
            ParamBlock::B => "b",
            ParamBlock::Sigma => "sigma",
        }
    }
}

impl Evaluation {
    pub fn block(&self, block: ParamBlock) -> BlockMetric {
        match block {
            ParamBlock::Alpha => self.alpha,
            ParamBlock::B => self.b,
            ParamBlock::Sigma => self.sigma,
        }
    }
}

fn off_diagonal_errors(est: &DMatrix<f64>, truth: &DMatrix<f64>) -> Vec<f64> {
    let k = truth.nrows();
    let mut out = Vec::new();
    for r in 0..k {
        for c in r + 1..k {
            out.push(est[(r, c)] - truth[(r, c)]);
        }
    }
    out
}

/// Bias and RMSE against the generating values.
///
/// Confirmatory: loadings over the free entries of the true pattern only,
/// all intercepts, off-diagonal covariances. Exploratory: the rotated
/// loadings and factor correlations (from `rotation`) are first aligned to
/// the truth by column permutation and sign; loadings are compared over
/// every entry since none were constrained during estimation.
pub fn evaluate(
    estimate: &ModelParams,
    rotation: Option<&RotationResult>,
    truth: &TrueModel,
    mode: Mode,
) -> Result<Evaluation> {
    let tp = &truth.params;
    if estimate.a.shape() != tp.a.shape() {
        return Err(Error::Dimension(format!(
            "estimate is {:?}, truth is {:?}",
            estimate.a.shape(),
            tp.a.shape()
        )));
    }
    let b_err: Vec<f64> = (0..tp.b.len()).map(|j| estimate.b[j] - tp.b[j]).collect();
    let (alpha_err, sigma_err) = match mode {
        Mode::Confirmatory => {
            let mut errs = Vec::new();
            for j in 0..tp.n_items() {
                for c in 0..tp.n_factors() {
                    if truth.structure.is_free(j, c) {
                        errs.push(estimate.a[(j, c)] - tp.a[(j, c)]);
                    }
                }
            }
            (errs, off_diagonal_errors(&estimate.sigma_theta, &tp.sigma_theta))
        }
        Mode::Exploratory => {
            let rot = rotation.ok_or_else(|| {
                Error::Config("exploratory evaluation requires a rotation".into())
            })?;
            let al = rotation::align_to_truth(&rot.loadings, &tp.a)?;
            let phi = al.apply_to_phi(&rot.phi);
            let errs = al
                .loadings
                .iter()
                .zip(tp.a.iter())
                .map(|(e, t)| e - t)
                .collect();
            (errs, off_diagonal_errors(&phi, &tp.sigma_theta))
        }
    };
    Ok(Evaluation {
        alpha: BlockMetric::from_errors(&alpha_err),
        b: BlockMetric::from_errors(&b_err),
        sigma: BlockMetric::from_errors(&sigma_err),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Gvem,
    IwGvem,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Gvem => "gvem",
            Method::IwGvem => "iw_gvem",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationRecord {
    pub rep: usize,
    pub seed: u64,
    pub method: Method,
    pub evaluation: Option<Evaluation>,
    /// Wall time of the method; IW-GVEM includes its GVEM warm start.
    pub seconds: f64,
    pub converged: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodAggregate {
    pub method: Method,
    pub n_ok: usize,
    pub n_failed: usize,
    pub mean_bias: [f64; 3],
    pub mean_rmse: [f64; 3],
    pub mean_seconds: f64,
}

impl MethodAggregate {
    pub fn bias(&self, block: ParamBlock) -> f64 {
        self.mean_bias[block as usize]
    }

    pub fn rmse(&self, block: ParamBlock) -> f64 {
        self.mean_rmse[block as usize]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyResult {
    pub design: StudyDesign,
    pub records: Vec<ReplicationRecord>,
    pub aggregates: Vec<MethodAggregate>,
}

/// Means over successful replications, per method in first-seen order.
pub fn aggregate(records: &[ReplicationRecord]) -> Vec<MethodAggregate> {
    let mut methods: Vec<Method> = Vec::new();
    for r in records {
        if !methods.contains(&r.method) {
            methods.push(r.method);
        }
    }
    methods
        .into_iter()
        .map(|m| {
            let ok: Vec<(&ReplicationRecord, &Evaluation)> = records
                .iter()
                .filter(|r| r.method == m)
                .filter_map(|r| r.evaluation.as_ref().map(|e| (r, e)))
                .collect();
            let n_failed = records
                .iter()
                .filter(|r| r.method == m && r.evaluation.is_none())
                .count();
            let n = ok.len() as f64;
            let mut mean_bias = [f64::NAN; 3];
            let mut mean_rmse = [f64::NAN; 3];
            let mut mean_seconds = f64::NAN;
            if !ok.is_empty() {
                for blk in ParamBlock::ALL {
                    mean_bias[blk as usize] = ok.iter().map(|(_, e)| e.block(blk).bias).sum::<f64>() / n;
                    mean_rmse[blk as usize] = ok.iter().map(|(_, e)| e.block(blk).rmse).sum::<f64>() / n;
                }
                mean_seconds = ok.iter().map(|(r, _)| r.seconds).sum::<f64>() / n;
            }
            MethodAggregate {
                method: m,
                n_ok: ok.len(),
                n_failed,
                mean_bias,
                mean_rmse,
                mean_seconds,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StudyOptions {
    pub methods: Vec<Method>,
    pub fit: FitConfig,
    /// Run replications concurrently. Turn off for timing comparisons.
    pub parallel_replications: bool,
}

impl Default for StudyOptions {
    fn default() -> Self {
        Self {
            methods: vec![Method::Gvem, Method::IwGvem],
            fit: FitConfig::default(),
            parallel_replications: true,
        }
    }
}

fn failed(rep: usize, seed: u64, method: Method, err: &Error) -> ReplicationRecord {
    ReplicationRecord {
        rep,
        seed,
        method,
        evaluation: None,
        seconds: f64::NAN,
        converged: false,
        error: Some(err.to_string()),
    }
}

fn run_replication(design: &StudyDesign, opts: &StudyOptions, rep: usize) -> Vec<ReplicationRecord> {
    let seed = design.rep_seed(rep);
    let (responses, truth) = match generate_dataset(design, seed) {
        Ok(d) => d,
        Err(e) => return opts.methods.iter().map(|&m| failed(rep, seed, m, &e)).collect(),
    };
    let structure = match design.mode {
        Mode::Confirmatory => truth.structure.clone(),
        Mode::Exploratory => match LoadingStructure::exploratory(design.j, design.k) {
            Ok(s) => s,
            Err(e) => return opts.methods.iter().map(|&m| failed(rep, seed, m, &e)).collect(),
        },
    };
    let fit_cfg = FitConfig {
        mode: design.mode,
        ..opts.fit.clone()
    };
    let fit_seed = rng::derive_seed(seed, &[tag::FIT]);

    if !opts.methods.contains(&Method::IwGvem) {
        let start = Instant::now();
        let gcfg = gvem::GvemConfig {
            mode: design.mode,
            ..fit_cfg.gvem.clone()
        };
        let res = gvem::fit_gvem(&responses, &structure, &gcfg, None).and_then(|g| {
            let rot = match design.mode {
                Mode::Exploratory => Some(rotation::promax(&g.params.a, &fit_cfg.promax)?),
                Mode::Confirmatory => None,
            };
            let secs = start.elapsed().as_secs_f64();
            Ok((evaluate(&g.params, rot.as_ref(), &truth, design.mode)?, secs, g.converged))
        });
        return opts
            .methods
            .iter()
            .map(|&m| match &res {
                Ok((ev, secs, conv)) => ReplicationRecord {
                    rep,
                    seed,
                    method: m,
                    evaluation: Some(*ev),
                    seconds: *secs,
                    converged: *conv,
                    error: None,
                },
                Err(e) => failed(rep, seed, m, e),
            })
            .collect();
    }

    let fit = pipeline::fit(&responses, &structure, &fit_cfg, fit_seed);
    opts.methods
        .iter()
        .map(|&m| {
            let fit = match &fit {
                Ok(f) => f,
                Err(e) => return failed(rep, seed, m, e),
            };
            let (params, rot, secs, conv) = match m {
                Method::Gvem => (
                    &fit.gvem_fit.params,
                    fit.gvem_rotation.as_ref(),
                    fit.timings.gvem,
                    fit.gvem_fit.converged,
                ),
                Method::IwGvem => (&fit.params, fit.rotation.as_ref(), fit.timings.total, fit.converged),
            };
            match evaluate(params, rot, &truth, design.mode) {
                Ok(ev) => ReplicationRecord {
                    rep,
                    seed,
                    method: m,
                    evaluation: Some(ev),
                    seconds: secs,
                    converged: conv,
                    error: None,
                },
                Err(e) => failed(rep, seed, m, &e),
            }
        })
        .collect()
}

/// Runs every replication of `design`. Replication `r` uses seed
/// `base_seed + r`; records are ordered by replication then method, so the
/// result does not depend on scheduling. Per-replication failures are
/// recorded, not propagated.
pub fn run_study(design: &StudyDesign, opts: &StudyOptions) -> Result<StudyResult> {
    design.validate()?;
    opts.fit.validate()?;
    if opts.methods.is_empty() {
        return Err(Error::Config("no methods selected".into()));
    }
    let per_rep: Vec<Vec<ReplicationRecord>> = if opts.parallel_replications {
        (0..design.reps)
            .into_par_iter()
            .map(|r| run_replication(design, opts, r))
            .collect()
    } else {
        (0..design.reps).map(|r| run_replication(design, opts, r)).collect()
    };
    let records: Vec<ReplicationRecord> = per_rep.into_iter().flatten().collect();
    let aggregates = aggregate(&records);
    Ok(StudyResult {
        design: design.clone(),
        records,
        aggregates,
    })
}

/// Column order of the replication CSV.
pub const RECORD_COLUMNS: [&str; 14] = [
    "n",
    "k",
    "j",
    "structure",
    "correlation",
    "mode",
    "rep",
    "seed",
    "method",
    "block",
    "bias",
    "rmse",
    "seconds",
    "converged",
];

fn fmt_f64(v: f64) -> String {
    if v.is_nan() {
        "NaN".into()
    } else {
        format!("{v}")
    }
}

/// One row per replication, method and parameter block. With
/// `include_seconds = false` the timing column is written as empty so that
/// reruns are byte-identical.
pub fn write_records_csv<W: Write>(
    results: &[StudyResult],
    out: W,
    include_seconds: bool,
) -> Result<()> {
    let io = |e: csv::Error| Error::InvalidData(format!("writing CSV: {e}"));
    let mut w = csv::Writer::from_writer(out);
    w.write_record(RECORD_COLUMNS).map_err(io)?;
    for res in results {
        let d = &res.design;
        for r in &res.records {
            for blk in ParamBlock::ALL {
                let (bias, rmse) = r
                    .evaluation
                    .map_or((f64::NAN, f64::NAN), |e| (e.block(blk).bias, e.block(blk).rmse));
                w.write_record([
                    d.n.to_string(),
                    d.k.to_string(),
                    d.j.to_string(),
                    d.structure.to_string(),
                    d.correlation.label(),
                    d.mode.to_string(),
                    r.rep.to_string(),
                    r.seed.to_string(),
                    r.method.name().to_string(),
                    blk.name().to_string(),
                    fmt_f64(bias),
                    fmt_f64(rmse),
                    if include_seconds { fmt_f64(r.seconds) } else { String::new() },
                    r.converged.to_string(),
                ])
                .map_err(io)?;
            }
        }
    }
    w.flush().map_err(|e| Error::InvalidData(format!("writing CSV: {e}")))?;
    Ok(())
}

/// JSON summary: per design cell, the aggregates per method.
pub fn summary_json(results: &[StudyResult]) -> serde_json::Value {
    let cells: Vec<serde_json::Value> = results
        .iter()
        .map(|r| {
            let methods: Vec<serde_json::Value> = r
                .aggregates
                .iter()
                .map(|a| {
                    let mut blocks = serde_json::Map::new();
                    for blk in ParamBlock::ALL {
                        blocks.insert(
                            blk.name().into(),
                            serde_json::json!({
                                "mean_bias": finite_or_null(a.bias(blk)),
                                "mean_rmse": finite_or_null(a.rmse(blk)),
                            }),
                        );
                    }
                    serde_json::json!({
                        "method": a.method.name(),
                        "n_ok": a.n_ok,
                        "n_failed": a.n_failed,
                        "mean_seconds": finite_or_null(a.mean_seconds),
                        "blocks": blocks,
                    })
                })
                .collect();
            serde_json::json!({
                "design": {
                    "n": r.design.n,
                    "k": r.design.k,
                    "j": r.design.j,
                    "structure": r.design.structure.to_string(),
                    "correlation": r.design.correlation.label(),
                    "mode": r.design.mode.to_string(),
                    "reps": r.design.reps,
                    "base_seed": r.design.base_seed,
                },
                "methods": methods,
                "errors": r.records.iter().filter_map(|x| x.error.clone()).collect::<Vec<_>>(),
            })
        })
        .collect();
    serde_json::json!({ "cells": cells })
}

fn finite_or_null(v: f64) -> serde_json::Value {
    if v.is_finite() {
        serde_json::json!(v)
    } else {
        serde_json::Value::Null
    }
}

/// One replication of the ELBO tightness experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElboRow {
    pub rep: usize,
    pub seed: u64,
    pub gvem_elbo: f64,
    pub iw: Vec<IwEstimate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElboTable {
    pub m_grid: Vec<usize>,
    pub n_outer: usize,
    pub rows: Vec<ElboRow>,
}

impl ElboTable {
    /// Mean over replications of each IW column.
    pub fn column_means(&self) -> Vec<f64> {
        let n = self.rows.len() as f64;
        (0..self.m_grid.len())
            .map(|g| self.rows.iter().map(|r| r.iw[g].value).sum::<f64>() / n)
            .collect()
    }

    pub fn gvem_mean(&self) -> f64 {
        self.rows.iter().map(|r| r.gvem_elbo).sum::<f64>() / self.rows.len() as f64
    }

    /// Columns `rep, seed, gvem_elbo, iw_m<M>...`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let io = |e: csv::Error| Error::InvalidData(format!("writing CSV: {e}"));
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["rep".to_string(), "seed".into(), "gvem_elbo".into()];
        header.extend(self.m_grid.iter().map(|m| format!("iw_m{m}")));
        w.write_record(&header).map_err(io)?;
        for r in &self.rows {
            let mut rec = vec![r.rep.to_string(), r.seed.to_string(), fmt_f64(r.gvem_elbo)];
            rec.extend(r.iw.iter().map(|e| fmt_f64(e.value)));
            w.write_record(&rec).map_err(io)?;
        }
        w.flush().map_err(|e| Error::InvalidData(format!("writing CSV: {e}")))?;
        Ok(())
    }
}

/// For each replication: fit GVEM, record its bound, then estimate the
/// IW-ELBO at the GVEM solution for every `M` in `m_grid` from shared outer
/// blocks of draws.
pub fn elbo_experiment(design: &StudyDesign, m_grid: &[usize], n_outer: usize) -> Result<ElboTable> {
    design.validate()?;
    let gcfg = gvem::GvemConfig {
        mode: design.mode,
        ..gvem::GvemConfig::default()
    };
    let rows: Vec<ElboRow> = (0..design.reps)
        .into_par_iter()
        .map(|rep| {
            let seed = design.rep_seed(rep);
            let (responses, truth) = generate_dataset(design, seed)?;
            let structure = match design.mode {
                Mode::Confirmatory => truth.structure.clone(),
                Mode::Exploratory => LoadingStructure::exploratory(design.j, design.k)?,
            };
            let fit = gvem::fit_gvem(&responses, &structure, &gcfg, None)?;
            let gvem_elbo = gvem::expected_elbo(&responses, &fit.vstate, &fit.params)?;
            let iw = iw::check_monotone_in_m(
                &responses,
                &fit.vstate,
                &fit.params,
                m_grid,
                n_outer,
                rng::derive_seed(seed, &[tag::ELBO_EVAL]),
            )?;
            Ok(ElboRow {
                rep,
                seed,
                gvem_elbo,
                iw,
            })
        })
        .collect::<Result<_>>()?;
    Ok(ElboTable {
        m_grid: m_grid.to_vec(),
        n_outer,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn count_rows(s: &LoadingStructure, pattern: &[bool]) -> usize {
        (0..s.n_items())
            .filter(|&j| (0..s.n_factors()).all(|c| s.is_free(j, c) == pattern[c]))
            .count()
    }

    #[test]
    fn between_two_factors() {
        let s = generate_structure(2, 30, ItemStructure::Between).unwrap();
        for j in 0..15 {
            assert!(s.is_free(j, 0) && !s.is_free(j, 1));
        }
        for j in 15..30 {
            assert!(!s.is_free(j, 0) && s.is_free(j, 1));
        }
    }

    #[test]
    fn within_two_factors() {
        let s = generate_structure(2, 30, ItemStructure::Within).unwrap();
        assert_eq!(count_rows(&s, &[true, false]), 10);
        assert_eq!(count_rows(&s, &[false, true]), 10);
        assert_eq!(count_rows(&s, &[true, true]), 10);
    }

    #[test]
    fn within_five_factors() {
        let s = generate_structure(5, 55, ItemStructure::Within).unwrap();
        let mut by_size = [0usize; 6];
        for j in 0..55 {
            by_size[s.free_factors(j).len()] += 1;
        }
        assert_eq!(&by_size[1..4], &[19, 18, 18]);
        for f in 0..5 {
            assert!((0..55).any(|j| s.is_free(j, f)));
        }
    }

    #[test]
    fn infeasible_structures() {
        assert!(generate_structure(5, 3, ItemStructure::Between).is_err());
        assert!(generate_structure(2, 2, ItemStructure::Within).is_err());
        // three items on seven factors cannot cover every factor
        assert!(generate_structure(7, 3, ItemStructure::Within).is_err());
    }

    #[test]
    fn full_grid_has_32_cells() {
        let g = StudyDesign::full_grid(1, 0);
        assert_eq!(g.len(), 32);
        assert!(g.iter().all(|d| d.j == if d.k == 2 { 30 } else { 55 }));
    }

    #[test]
    fn point_band_gives_identity() {
        let d = StudyDesign {
            n: 20,
            ..StudyDesign::new(20, 3, ItemStructure::Between, CorrelationBand::point(0.0), Mode::Confirmatory)
        };
        let (_, t) = generate_dataset(&d, 4).unwrap();
        assert_eq!(t.params.sigma_theta, DMatrix::identity(3, 3));
    }

    #[test]
    fn dataset_is_deterministic() {
        let d = StudyDesign::new(50, 2, ItemStructure::Within, CorrelationBand::HIGH, Mode::Confirmatory);
        let (y1, t1) = generate_dataset(&d, 9).unwrap();
        let (y2, t2) = generate_dataset(&d, 9).unwrap();
        assert_eq!(y1, y2);
        assert_eq!(t1.params, t2.params);
        let (y3, _) = generate_dataset(&d, 10).unwrap();
        assert_ne!(y1, y3);
    }

    #[test]
    fn generated_values_in_range() {
        let d = StudyDesign::new(10, 5, ItemStructure::Within, CorrelationBand::HIGH, Mode::Confirmatory);
        let (_, t) = generate_dataset(&d, 2).unwrap();
        for j in 0..55 {
            for c in 0..5 {
                let v = t.params.a[(j, c)];
                if t.structure.is_free(j, c) {
                    assert!((1.0..=2.0).contains(&v));
                } else {
                    assert_eq!(v, 0.0);
                }
            }
        }
        for r in 0..5 {
            assert_eq!(t.params.sigma_theta[(r, r)], 1.0);
            for c in 0..5 {
                if r != c {
                    assert!((0.5..0.7).contains(&t.params.sigma_theta[(r, c)]));
                }
            }
        }
    }

    #[test]
    fn block_metric_of_constant_shift() {
        let m = BlockMetric::from_errors(&[0.1; 7]);
        assert!((m.bias - 0.1).abs() < 1e-15);
        assert!((m.rmse - 0.1).abs() < 1e-15);
    }
}
