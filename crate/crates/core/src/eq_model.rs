//! Generative Gaussian mixture over sub-band EQ vectors.
//!
//! The mixture lives in the 7-dimensional free space of [`SubBandEq`] (the
//! 1 kHz entry is pinned to 0 dB and never modelled). Gains are in dB and
//! covariances are full.

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::{SMatrix, SVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed::{item_rng, ItemRng};
use crate::spectral::{SubBandEq, EQ_FREQUENCIES_HZ, FREE_DIM, REFERENCE_INDEX};

pub type EqVector = SVector<f64, FREE_DIM>;
pub type EqMatrix = SMatrix<f64, FREE_DIM, FREE_DIM>;

/// Component count used by default.
pub const DEFAULT_COMPONENTS: usize = 7;
pub const MODEL_FORMAT_VERSION: u32 = 1;

const WEIGHT_SUM_TOL: f64 = 1e-9;
const SYMMETRY_TOL: f64 = 1e-9;

#[derive(Error, Debug)]
pub enum GmmError {
    #[error("need at least {needed} EQ vectors for {k} components, got {got}")]
    TooFewSamples { k: usize, needed: usize, got: usize },
    #[error("component count must be positive")]
    ZeroComponents,
    #[error("singular covariance: {0}")]
    SingularCovariance(String),
    #[error("non-finite training value in vector {0}")]
    NonFinite(usize),
    #[error("invalid weights: {0}")]
    InvalidWeights(String),
    #[error("covariance {0} is not symmetric")]
    Asymmetric(usize),
    #[error("covariance {0} is not positive definite")]
    NotPositiveDefinite(usize),
    #[error("malformed model file: {0}")]
    Malformed(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq)]
struct Component {
    weight: f64,
    mean: EqVector,
    covariance: EqMatrix,
    /// Lower Cholesky factor of `covariance`.
    chol: EqMatrix,
    /// `-0.5 * (d ln 2π + ln |Σ|)`
    log_norm: f64,
}

impl Component {
    fn new(weight: f64, mean: EqVector, covariance: EqMatrix) -> Option<Self> {
        let chol = covariance.cholesky()?.l();
        if (0..FREE_DIM).any(|i| !(chol[(i, i)] > 0.0)) {
            return None;
        }
        let log_det: f64 = (0..FREE_DIM).map(|i| 2.0 * chol[(i, i)].ln()).sum();
        let log_norm = -0.5 * (FREE_DIM as f64 * (2.0 * PI).ln() + log_det);
        Some(Self {
            weight,
            mean,
            covariance,
            chol,
            log_norm,
        })
    }

    fn log_density(&self, x: &EqVector) -> f64 {
        // Forward substitution L y = x - mu.
        let d = x - self.mean;
        let mut y = [0.0; FREE_DIM];
        let mut maha = 0.0;
        for i in 0..FREE_DIM {
            let mut s = d[i];
            for (j, yj) in y.iter().enumerate().take(i) {
                s -= self.chol[(i, j)] * yj;
            }
            y[i] = s / self.chol[(i, i)];
            maha += y[i] * y[i];
        }
        self.log_norm - 0.5 * maha
    }
}

/// Gaussian mixture over free EQ vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct EqGmm {
    components: Vec<Component>,
}

impl EqGmm {
    /// Build and validate a mixture.
    pub fn new(
        weights: Vec<f64>,
        means: Vec<EqVector>,
        covariances: Vec<EqMatrix>,
    ) -> Result<Self, GmmError> {
        let k = weights.len();
        if k == 0 {
            return Err(GmmError::ZeroComponents);
        }
        if means.len() != k || covariances.len() != k {
            return Err(GmmError::Malformed(format!(
                "{k} weights, {} means, {} covariances",
                means.len(),
                covariances.len()
            )));
        }
        if let Some(w) = weights.iter().find(|w| !(**w >= 0.0) || !w.is_finite()) {
            return Err(GmmError::InvalidWeights(format!(
                "weight {w} is negative or not finite"
            )));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(GmmError::InvalidWeights(format!("weights sum to {sum}")));
        }
        let mut components = Vec::with_capacity(k);
        for (i, ((w, m), c)) in weights.into_iter().zip(means).zip(covariances).enumerate() {
            if m.iter().any(|x| !x.is_finite()) {
                return Err(GmmError::Malformed(format!("mean {i} is not finite")));
            }
            if (c - c.transpose()).amax() > SYMMETRY_TOL {
                return Err(GmmError::Asymmetric(i));
            }
            components.push(Component::new(w, m, c).ok_or(GmmError::NotPositiveDefinite(i))?);
        }
        Ok(Self { components })
    }

    pub fn k(&self) -> usize {
        self.components.len()
    }

    pub fn weights(&self) -> Vec<f64> {
        self.components.iter().map(|c| c.weight).collect()
    }

    pub fn means(&self) -> Vec<EqVector> {
        self.components.iter().map(|c| c.mean).collect()
    }

    pub fn covariances(&self) -> Vec<EqMatrix> {
        self.components.iter().map(|c| c.covariance).collect()
    }

    /// Mixture mean and per-dimension standard deviation (marginals).
    pub fn marginal_moments(&self) -> (EqVector, EqVector) {
        let mean: EqVector = self
            .components
            .iter()
            .map(|c| c.mean * c.weight)
            .fold(EqVector::zeros(), |a, b| a + b);
        let mut var = EqVector::zeros();
        for c in &self.components {
            let d = c.mean - mean;
            for i in 0..FREE_DIM {
                var[i] += c.weight * (c.covariance[(i, i)] + d[i] * d[i]);
            }
        }
        (mean, var.map(f64::sqrt))
    }

    fn log_likelihood_free(&self, x: &EqVector) -> f64 {
        log_sum_exp(
            self.components
                .iter()
                .map(|c| c.weight.ln() + c.log_density(x)),
        )
    }
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn free_vector(eq: &SubBandEq) -> EqVector {
    EqVector::from(eq.free())
}

/// Log mixture density at the free part of `eq`.
pub fn log_likelihood(model: &EqGmm, eq: &SubBandEq) -> f64 {
    model.log_likelihood_free(&free_vector(eq))
}

/// Draw one EQ vector: pick a component by weight, then `mean + L z`.
pub fn sample_eq<R: Rng + ?Sized>(model: &EqGmm, rng: &mut R) -> SubBandEq {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut chosen = &model.components[model.k() - 1];
    for c in &model.components {
        acc += c.weight;
        if u < acc {
            chosen = c;
            break;
        }
    }
    let z = EqVector::from_fn(|_, _| rng.sample(StandardNormal));
    let x = chosen.mean + chosen.chol * z;
    let eq = SubBandEq::from_free(x.into());
    debug_assert_eq!(eq.gains_db()[REFERENCE_INDEX], 0.0);
    eq
}

/// EM settings.
#[derive(Debug, Clone)]
pub struct FitOptions {
    pub k: usize,
    pub seed: u64,
    pub restarts: usize,
    pub max_iter: usize,
    /// Stop when the mean per-sample log-likelihood improves by less than this.
    pub tol: f64,
    /// Added to each covariance diagonal on every M-step.
    pub reg: f64,
}

impl FitOptions {
    pub fn new(k: usize, seed: u64) -> Self {
        Self {
            k,
            seed,
            restarts: 10,
            max_iter: 200,
            tol: 1e-6,
            reg: 1e-6,
        }
    }
}

/// A fitted model with the training curve of its winning restart.
#[derive(Debug, Clone)]
pub struct GmmFit {
    pub model: EqGmm,
    /// Mean per-sample log-likelihood after each EM step.
    pub trace: Vec<f64>,
    pub converged: bool,
}

impl GmmFit {
    pub fn final_log_likelihood(&self) -> f64 {
        *self.trace.last().expect("trace is never empty")
    }
}

pub fn fit_gmm(eqs: &[SubBandEq], k: usize, seed: u64) -> Result<GmmFit, GmmError> {
    fit_gmm_with(eqs, &FitOptions::new(k, seed))
}

/// EM from k-means++ seeding, best of `restarts` by final log-likelihood.
///
/// Input vectors are put into a canonical (lexicographic) order first, so the
/// result depends on the multiset of inputs and the seed, not on input order.
pub fn fit_gmm_with(eqs: &[SubBandEq], opts: &FitOptions) -> Result<GmmFit, GmmError> {
    let k = opts.k;
    if k == 0 {
        return Err(GmmError::ZeroComponents);
    }
    let needed = 10 * k;
    if eqs.len() < needed {
        return Err(GmmError::TooFewSamples {
            k,
            needed,
            got: eqs.len(),
        });
    }
    let mut data: Vec<EqVector> = eqs.iter().map(free_vector).collect();
    if let Some(i) = data.iter().position(|x| x.iter().any(|v| !v.is_finite())) {
        return Err(GmmError::NonFinite(i));
    }
    data.sort_by(|a, b| {
        a.iter()
            .zip(b.iter())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    if data.iter().all(|x| *x == data[0]) {
        return Err(GmmError::SingularCovariance(
            "all training points are identical".into(),
        ));
    }

    let runs: Vec<Result<GmmFit, GmmError>> = (0..opts.restarts.max(1))
        .into_par_iter()
        .map(|r| {
            let mut rng = item_rng(opts.seed, &format!("gmm-restart-{r}"));
            run_em(&data, opts, &mut rng)
        })
        .collect();

    let mut best: Option<GmmFit> = None;
    let mut last_err = None;
    for run in runs {
        match run {
            Ok(fit) => {
                let better = best
                    .as_ref()
                    .is_none_or(|b| fit.final_log_likelihood() > b.final_log_likelihood());
                if better {
                    best = Some(fit);
                }
            }
            Err(e) => last_err = Some(e),
        }
    }
    best.ok_or_else(|| last_err.expect("at least one restart ran"))
}

fn kmeans_pp(data: &[EqVector], k: usize, rng: &mut ItemRng) -> Vec<EqVector> {
    let n = data.len();
    let mut centers = vec![data[rng.random_range(0..n)]];
    let mut d2: Vec<f64> = data
        .iter()
        .map(|x| (x - centers[0]).norm_squared())
        .collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let idx = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            d2.iter()
                .position(|&d| {
                    acc += d;
                    acc > target
                })
                .unwrap_or(n - 1)
        } else {
            rng.random_range(0..n)
        };
        let c = data[idx];
        for (d, x) in d2.iter_mut().zip(data) {
            *d = d.min((x - c).norm_squared());
        }
        centers.push(c);
    }
    centers
}

fn m_step(
    data: &[EqVector],
    resp: &[f64],
    k: usize,
    reg: f64,
    previous: Option<&[Component]>,
) -> Result<Vec<Component>, GmmError> {
    let n = data.len();
    let mut out = Vec::with_capacity(k);
    for j in 0..k {
        let nk: f64 = (0..n).map(|i| resp[i * k + j]).sum();
        let weight = nk / n as f64;
        if nk < 1e-10 {
            // Collapsed component: keep its shape, it carries no weight.
            let prev = previous
                .map(|p| p[j].clone())
                .ok_or_else(|| GmmError::SingularCovariance("empty initial cluster".into()))?;
            out.push(Component { weight, ..prev });
            continue;
        }
        let mean = data
            .iter()
            .enumerate()
            .fold(EqVector::zeros(), |acc, (i, x)| acc + x * resp[i * k + j])
            / nk;
        let mut cov = EqMatrix::zeros();
        for (i, x) in data.iter().enumerate() {
            let d = x - mean;
            cov += (d * d.transpose()) * resp[i * k + j];
        }
        cov /= nk;
        cov = (cov + cov.transpose()) * 0.5;
        for i in 0..FREE_DIM {
            cov[(i, i)] += reg;
        }
        out.push(Component::new(weight, mean, cov).ok_or_else(|| {
            GmmError::SingularCovariance(format!("component {j} lost positive definiteness"))
        })?);
    }
    // Renormalize against rounding.
    let total: f64 = out.iter().map(|c| c.weight).sum();
    for c in &mut out {
        c.weight /= total;
    }
    Ok(out)
}

/// E-step: fills responsibilities, returns mean per-sample log-likelihood.
fn e_step(data: &[EqVector], comps: &[Component], resp: &mut [f64]) -> f64 {
    let k = comps.len();
    let mut total = 0.0;
    for (i, x) in data.iter().enumerate() {
        let row = &mut resp[i * k..(i + 1) * k];
        for (r, c) in row.iter_mut().zip(comps) {
            *r = c.weight.ln() + c.log_density(x);
        }
        let lse = log_sum_exp(row.iter().copied());
        for r in row.iter_mut() {
            *r = (*r - lse).exp();
        }
        total += lse;
    }
    total / data.len() as f64
}

fn run_em(data: &[EqVector], opts: &FitOptions, rng: &mut ItemRng) -> Result<GmmFit, GmmError> {
    let k = opts.k;
    let n = data.len();
    let centers = kmeans_pp(data, k, rng);
    let mut resp = vec![0.0; n * k];
    for (i, x) in data.iter().enumerate() {
        let nearest = (0..k)
            .min_by(|&a, &b| {
                (x - centers[a])
                    .norm_squared()
                    .total_cmp(&(x - centers[b]).norm_squared())
            })
            .expect("k > 0");
        resp[i * k + nearest] = 1.0;
    }
    // Empty hard clusters start from their seed point with the global spread.
    let mut comps = match m_step(data, &resp, k, opts.reg, None) {
        Ok(c) => c,
        Err(_) => {
            let global = m_step(data, &vec![1.0; n], 1, opts.reg, None)?;
            let seeded: Vec<Component> = centers
                .iter()
                .map(|c| {
                    Component::new(1.0 / k as f64, *c, global[0].covariance)
                        .expect("global covariance is positive definite")
                })
                .collect();
            m_step(data, &resp, k, opts.reg, Some(&seeded))?
        }
    };

    let mut trace = Vec::new();
    let mut converged = false;
    for _ in 0..opts.max_iter {
        let ll = e_step(data, &comps, &mut resp);
        if let Some(&prev) = trace.last() {
            if ll - prev < opts.tol {
                trace.push(ll);
                converged = true;
                break;
            }
        }
        trace.push(ll);
        comps = m_step(data, &resp, k, opts.reg, Some(&comps))?;
    }
    if !converged {
        // Score the final parameters so the trace ends on the returned model.
        let ll = e_step(data, &comps, &mut resp);
        trace.push(ll);
    }
    Ok(GmmFit {
        model: EqGmm { components: comps },
        trace,
        converged,
    })
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format_version: u32,
    k: usize,
    dim: usize,
    frequencies_hz: Vec<f64>,
    reference_hz: f64,
    gain_unit: String,
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    covariances: Vec<Vec<Vec<f64>>>,
}

/// Serialize to the JSON model format.
pub fn model_to_json(model: &EqGmm) -> String {
    let file = ModelFile {
        format_version: MODEL_FORMAT_VERSION,
        k: model.k(),
        dim: FREE_DIM,
        frequencies_hz: EQ_FREQUENCIES_HZ.to_vec(),
        reference_hz: EQ_FREQUENCIES_HZ[REFERENCE_INDEX],
        gain_unit: "dB".into(),
        weights: model.weights(),
        means: model
            .means()
            .iter()
            .map(|m| m.iter().copied().collect())
            .collect(),
        covariances: model
            .covariances()
            .iter()
            .map(|c| {
                (0..FREE_DIM)
                    .map(|i| c.row(i).iter().copied().collect())
                    .collect()
            })
            .collect(),
    };
    let mut s = serde_json::to_string_pretty(&file).expect("model serializes");
    s.push('\n');
    s
}

/// Parse and validate the JSON model format.
pub fn model_from_json(text: &str) -> Result<EqGmm, GmmError> {
    let file: ModelFile =
        serde_json::from_str(text).map_err(|e| GmmError::Malformed(e.to_string()))?;
    if file.format_version != MODEL_FORMAT_VERSION {
        return Err(GmmError::Malformed(format!(
            "unsupported format_version {}",
            file.format_version
        )));
    }
    if file.dim != FREE_DIM {
        return Err(GmmError::Malformed(format!(
            "dim {} != {FREE_DIM}",
            file.dim
        )));
    }
    if file.frequencies_hz != EQ_FREQUENCIES_HZ {
        return Err(GmmError::Malformed("unexpected frequencies_hz".into()));
    }
    if file.gain_unit != "dB" {
        return Err(GmmError::Malformed(format!(
            "gain_unit {:?}",
            file.gain_unit
        )));
    }
    if file.weights.len() != file.k {
        return Err(GmmError::Malformed(format!(
            "k = {} but {} weights",
            file.k,
            file.weights.len()
        )));
    }
    let means = file
        .means
        .iter()
        .map(|m| {
            if m.len() != FREE_DIM {
                return Err(GmmError::Malformed(format!("mean of length {}", m.len())));
            }
            Ok(EqVector::from_column_slice(m))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let covariances = file
        .covariances
        .iter()
        .map(|rows| {
            if rows.len() != FREE_DIM || rows.iter().any(|r| r.len() != FREE_DIM) {
                return Err(GmmError::Malformed("covariance is not 7x7".into()));
            }
            Ok(EqMatrix::from_fn(|i, j| rows[i][j]))
        })
        .collect::<Result<Vec<_>, _>>()?;
    EqGmm::new(file.weights, means, covariances)
}

pub fn save_model(model: &EqGmm, path: impl AsRef<Path>) -> Result<(), GmmError> {
    let path = path.as_ref();
    std::fs::write(path, model_to_json(model)).map_err(|source| GmmError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_model(path: impl AsRef<Path>) -> Result<EqGmm, GmmError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| GmmError::Io {
        path: path.display().to_string(),
        source,
    })?;
    model_from_json(&text)
}
