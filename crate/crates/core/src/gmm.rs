//! Gaussian mixture over observation vectors.
//!
//! Components of the mixture are the latent physiological states: the
//! posterior `P(s | o)` drives belief tracking and transition estimation.
//! Fitting is plain EM with k-means++ seeding and random restarts; the
//! component count is chosen by a cross-validated BIC.

use std::f64::consts::PI;

use log::warn;
use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use thiserror::Error;

use crate::seed;
use crate::textfmt::{FormatError, Provenance, TextReader, TextWriter};

#[derive(Debug, Error)]
pub enum GmmError {
    #[error("need at least {k} observations for {k} components, got {n}")]
    TooFewObservations { n: usize, k: usize },
    #[error("observation {index} has dimension {found}, expected {expected}")]
    Dimension {
        index: usize,
        expected: usize,
        found: usize,
    },
    #[error("component count must be positive")]
    ZeroComponents,
    #[error("covariance of component {0} is not positive definite")]
    NotPositiveDefinite(usize),
    #[error("mixture weights must be non-negative and sum to 1")]
    InvalidWeights,
    #[error("empty K range")]
    EmptyRange,
    #[error("EM failed for every K in the range")]
    NoValidK,
    #[error("EM produced a non-finite log-likelihood")]
    NonFinite,
    #[error(transparent)]
    Format(#[from] FormatError),
}

pub type Result<T> = std::result::Result<T, GmmError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CovarianceKind {
    Full,
    Diagonal,
}

impl CovarianceKind {
    pub fn as_str(self) -> &'static str {
        match self {
            CovarianceKind::Full => "full",
            CovarianceKind::Diagonal => "diagonal",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "full" => Some(CovarianceKind::Full),
            "diagonal" => Some(CovarianceKind::Diagonal),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EmConfig {
    /// Stop once the mean per-observation log-likelihood improves by less than this.
    pub tol: f64,
    pub max_iter: usize,
    pub n_init: usize,
    /// Lower bound on every covariance eigenvalue.
    pub cov_floor: f64,
    pub covariance: CovarianceKind,
}

impl Default for EmConfig {
    fn default() -> Self {
        EmConfig {
            tol: 1e-5,
            max_iter: 300,
            n_init: 5,
            cov_floor: 1e-6,
            covariance: CovarianceKind::Full,
        }
    }
}

/// Cached Cholesky data of one component: `L^{-1}` (row-major, lower
/// triangular) and the log normalizing constant.
#[derive(Debug, Clone)]
struct Factor {
    inv_chol: Vec<f64>,
    chol: Vec<f64>,
    log_norm: f64,
}

impl Factor {
    fn new(cov: &DMatrix<f64>) -> Option<Factor> {
        let d = cov.nrows();
        let chol = cov.clone().cholesky()?;
        let l = chol.l();
        let inv = l.clone().try_inverse()?;
        let log_det: f64 = 2.0 * (0..d).map(|i| l[(i, i)].ln()).sum::<f64>();
        let mut inv_chol = vec![0.0; d * d];
        let mut chol_flat = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..=i {
                inv_chol[i * d + j] = inv[(i, j)];
                chol_flat[i * d + j] = l[(i, j)];
            }
        }
        Some(Factor {
            inv_chol,
            chol: chol_flat,
            log_norm: -0.5 * (d as f64 * (2.0 * PI).ln() + log_det),
        })
    }

    fn log_density(&self, x: &[f64], mean: &[f64]) -> f64 {
        let d = mean.len();
        let mut maha = 0.0;
        for i in 0..d {
            let row = &self.inv_chol[i * d..i * d + i + 1];
            let y: f64 = row.iter().enumerate().map(|(j, l)| l * (x[j] - mean[j])).sum();
            maha += y * y;
        }
        self.log_norm - 0.5 * maha
    }
}

/// Fitted mixture. Component `s` is latent state `s`.
#[derive(Debug, Clone)]
pub struct GmmModel {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub covariances: Vec<DMatrix<f64>>,
    pub kind: CovarianceKind,
    /// Training-data log-likelihood of these exact parameters.
    pub log_likelihood: f64,
    factors: Vec<Factor>,
}

impl PartialEq for GmmModel {
    fn eq(&self, other: &Self) -> bool {
        self.weights == other.weights
            && self.means == other.means
            && self.covariances == other.covariances
            && self.kind == other.kind
            && (self.log_likelihood == other.log_likelihood
                || (self.log_likelihood.is_nan() && other.log_likelihood.is_nan()))
    }
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

impl GmmModel {
    pub fn new(
        weights: Vec<f64>,
        means: Vec<Vec<f64>>,
        covariances: Vec<DMatrix<f64>>,
        kind: CovarianceKind,
        log_likelihood: f64,
    ) -> Result<Self> {
        let k = weights.len();
        if k == 0 {
            return Err(GmmError::ZeroComponents);
        }
        let sum: f64 = weights.iter().sum();
        if weights.iter().any(|&w| !(w >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return Err(GmmError::InvalidWeights);
        }
        let d = means[0].len();
        let factors = covariances
            .iter()
            .enumerate()
            .map(|(i, c)| {
                if c.nrows() != d || c.ncols() != d || means[i].len() != d {
                    return Err(GmmError::Dimension {
                        index: i,
                        expected: d,
                        found: c.nrows(),
                    });
                }
                Factor::new(c).ok_or(GmmError::NotPositiveDefinite(i))
            })
            .collect::<Result<Vec<_>>>()?;
        if means.len() != k || covariances.len() != k {
            return Err(GmmError::InvalidWeights);
        }
        Ok(GmmModel {
            weights,
            means,
            covariances,
            kind,
            log_likelihood,
            factors,
        })
    }

    pub fn k(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    /// `ln w_s + ln N(o; mu_s, Sigma_s)` for every component.
    pub fn joint_log_densities(&self, o: &[f64]) -> Vec<f64> {
        self.factors
            .iter()
            .zip(&self.means)
            .zip(&self.weights)
            .map(|((f, m), w)| w.ln() + f.log_density(o, m))
            .collect()
    }

    pub fn component_log_density(&self, s: usize, o: &[f64]) -> f64 {
        self.factors[s].log_density(o, &self.means[s])
    }

    /// `P(s | o)`, normalized in log space.
    pub fn posterior(&self, o: &[f64]) -> Vec<f64> {
        let logs = self.joint_log_densities(o);
        let lse = log_sum_exp(&logs);
        logs.iter().map(|l| (l - lse).exp()).collect()
    }

    /// Index of the most probable component (lowest index on ties).
    pub fn map_component(&self, o: &[f64]) -> usize {
        let logs = self.joint_log_densities(o);
        let mut best = 0;
        for (i, &l) in logs.iter().enumerate() {
            if l > logs[best] {
                best = i;
            }
        }
        best
    }

    pub fn log_density(&self, o: &[f64]) -> f64 {
        log_sum_exp(&self.joint_log_densities(o))
    }

    pub fn loglik(&self, obs: &[Vec<f64>]) -> f64 {
        obs.iter().map(|o| self.log_density(o)).sum()
    }

    pub fn sample<R: Rng + ?Sized>(&self, s: usize, rng: &mut R) -> Vec<f64> {
        let d = self.dim();
        let z: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let l = &self.factors[s].chol;
        (0..d)
            .map(|i| self.means[s][i] + (0..=i).map(|j| l[i * d + j] * z[j]).sum::<f64>())
            .collect()
    }

    pub fn to_text(&self, prov: &Provenance) -> String {
        let d = self.dim();
        let mut w = TextWriter::new("astc-gmm", 1);
        prov.write(&mut w);
        w.scalar("k", self.k())
            .scalar("d", d)
            .scalar("covariance", self.kind.as_str())
            .scalar("log_likelihood", self.log_likelihood)
            .vector("weights", &self.weights);
        for (m, c) in self.means.iter().zip(&self.covariances) {
            w.vector("mean", m);
            let flat: Vec<f64> = (0..d).flat_map(|i| (0..d).map(move |j| c[(i, j)])).collect();
            w.matrix("cov", d, d, &flat);
        }
        w.finish()
    }

    pub fn from_text(text: &str) -> Result<(Self, Provenance)> {
        let mut r = TextReader::new(text, "astc-gmm", 1)?;
        let prov = Provenance::read(&mut r)?;
        let k: usize = r.scalar("k")?;
        let d: usize = r.scalar("d")?;
        let kind_s: String = r.scalar("covariance")?;
        let kind = CovarianceKind::parse(&kind_s).ok_or_else(|| FormatError::Malformed {
            line: 0,
            msg: format!("unknown covariance kind `{kind_s}`"),
        })?;
        let ll: f64 = r.scalar("log_likelihood")?;
        let weights: Vec<f64> = r.vector("weights")?;
        let mut means = Vec::with_capacity(k);
        let mut covs = Vec::with_capacity(k);
        for _ in 0..k {
            means.push(r.vector::<f64>("mean")?);
            let (rows, cols, data) = r.matrix("cov")?;
            if rows != d || cols != d {
                return Err(GmmError::Dimension {
                    index: covs.len(),
                    expected: d,
                    found: rows,
                });
            }
            covs.push(DMatrix::from_row_slice(d, d, &data));
        }
        Ok((GmmModel::new(weights, means, covs, kind, ll)?, prov))
    }
}

/// Clips covariance eigenvalues from below and re-symmetrizes.
pub fn floor_covariance(cov: &DMatrix<f64>, floor: f64, kind: CovarianceKind) -> DMatrix<f64> {
    let d = cov.nrows();
    match kind {
        CovarianceKind::Diagonal => {
            DMatrix::from_fn(d, d, |i, j| if i == j { cov[(i, i)].max(floor) } else { 0.0 })
        }
        CovarianceKind::Full => {
            let sym = (cov + cov.transpose()) * 0.5;
            let eig = SymmetricEigen::new(sym);
            let clipped = eig.eigenvalues.map(|l| l.max(floor));
            let v = &eig.eigenvectors;
            let out = v * DMatrix::from_diagonal(&clipped) * v.transpose();
            (&out + out.transpose()) * 0.5
        }
    }
}

/// Free parameters of a K-component mixture in `d` dimensions.
pub fn parameter_count(k: usize, d: usize, kind: CovarianceKind) -> usize {
    let cov = match kind {
        CovarianceKind::Full => d * (d + 1) / 2,
        CovarianceKind::Diagonal => d,
    };
    (k - 1) + k * d + k * cov
}

fn check_obs(obs: &[Vec<f64>], k: usize) -> Result<usize> {
    if k == 0 {
        return Err(GmmError::ZeroComponents);
    }
    if obs.len() < k || obs.is_empty() {
        return Err(GmmError::TooFewObservations { n: obs.len(), k });
    }
    let d = obs[0].len();
    for (i, o) in obs.iter().enumerate() {
        if o.len() != d || d == 0 {
            return Err(GmmError::Dimension {
                index: i,
                expected: d,
                found: o.len(),
            });
        }
    }
    Ok(d)
}

fn weighted_moments(obs: &[Vec<f64>], resp: &[f64], k: usize, comp: usize, d: usize) -> (f64, Vec<f64>, DMatrix<f64>) {
    let mass: f64 = obs.iter().enumerate().map(|(i, _)| resp[i * k + comp]).sum();
    let mut mean = vec![0.0; d];
    for (i, o) in obs.iter().enumerate() {
        let r = resp[i * k + comp];
        for j in 0..d {
            mean[j] += r * o[j];
        }
    }
    if mass > 0.0 {
        mean.iter_mut().for_each(|m| *m /= mass);
    }
    let mut cov = DMatrix::zeros(d, d);
    for (i, o) in obs.iter().enumerate() {
        let r = resp[i * k + comp];
        if r == 0.0 {
            continue;
        }
        for a in 0..d {
            let da = o[a] - mean[a];
            for b in 0..=a {
                cov[(a, b)] += r * da * (o[b] - mean[b]);
            }
        }
    }
    for a in 0..d {
        for b in 0..a {
            cov[(b, a)] = cov[(a, b)];
        }
    }
    if mass > 0.0 {
        cov /= mass;
    }
    (mass, mean, cov)
}

struct EmState<'a> {
    obs: &'a [Vec<f64>],
    k: usize,
    d: usize,
    config: &'a EmConfig,
    global_cov: DMatrix<f64>,
}

impl EmState<'_> {
    /// Log-likelihood and responsibilities (row-major n x k).
    fn e_step(&self, model: &GmmModel) -> (f64, Vec<f64>) {
        let k = self.k;
        let mut resp = vec![0.0; self.obs.len() * k];
        let mut total = 0.0;
        for (i, o) in self.obs.iter().enumerate() {
            let logs = model.joint_log_densities(o);
            let lse = log_sum_exp(&logs);
            total += lse;
            for (s, l) in logs.iter().enumerate() {
                resp[i * k + s] = (l - lse).exp();
            }
        }
        (total, resp)
    }

    fn m_step<R: Rng>(&self, resp: &[f64], rng: &mut R) -> Result<GmmModel> {
        let n = self.obs.len() as f64;
        let mut weights = Vec::with_capacity(self.k);
        let mut means = Vec::with_capacity(self.k);
        let mut covs = Vec::with_capacity(self.k);
        for comp in 0..self.k {
            let (mass, mean, cov) = weighted_moments(self.obs, resp, self.k, comp, self.d);
            if mass < 1e-8 {
                warn!("EM component {comp} lost all responsibility; reinitializing at a random observation");
                let pick = rng.random_range(0..self.obs.len());
                weights.push(1.0 / self.k as f64);
                means.push(self.obs[pick].clone());
                covs.push(self.global_cov.clone());
            } else {
                weights.push(mass / n);
                means.push(mean);
                covs.push(floor_covariance(&cov, self.config.cov_floor, self.config.covariance));
            }
        }
        // reseeding breaks the sum; rounding can too
        let s: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= s);
        GmmModel::new(weights, means, covs, self.config.covariance, f64::NAN)
    }

    fn kmeans_pp_seeds<R: Rng>(&self, rng: &mut R) -> Vec<usize> {
        let n = self.obs.len();
        let mut seeds = vec![rng.random_range(0..n)];
        let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
        let mut dist: Vec<f64> = self.obs.iter().map(|o| sq(o, &self.obs[seeds[0]])).collect();
        while seeds.len() < self.k {
            let total: f64 = dist.iter().sum();
            let next = if total > 0.0 {
                let mut u = rng.random::<f64>() * total;
                let mut pick = n - 1;
                for (i, &dv) in dist.iter().enumerate() {
                    if u < dv {
                        pick = i;
                        break;
                    }
                    u -= dv;
                }
                pick
            } else {
                rng.random_range(0..n)
            };
            seeds.push(next);
            for (i, o) in self.obs.iter().enumerate() {
                dist[i] = dist[i].min(sq(o, &self.obs[next]));
            }
        }
        seeds
    }

    fn run<R: Rng>(&self, rng: &mut R) -> Result<(GmmModel, Vec<f64>)> {
        let seeds = self.kmeans_pp_seeds(rng);
        let k = self.k;
        let mut resp = vec![0.0; self.obs.len() * k];
        for (i, o) in self.obs.iter().enumerate() {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (c, &s) in seeds.iter().enumerate() {
                let dist: f64 = o.iter().zip(&self.obs[s]).map(|(a, b)| (a - b) * (a - b)).sum();
                if dist < best_d {
                    best_d = dist;
                    best = c;
                }
            }
            resp[i * k + best] = 1.0;
        }
        let mut model = self.m_step(&resp, rng)?;
        let mut history = Vec::new();
        let n = self.obs.len() as f64;
        loop {
            let (ll, r) = self.e_step(&model);
            if !ll.is_finite() {
                return Err(GmmError::NonFinite);
            }
            model.log_likelihood = ll;
            let converged = history
                .last()
                .is_some_and(|&prev: &f64| (ll - prev) / n < self.config.tol);
            history.push(ll);
            if converged || history.len() >= self.config.max_iter {
                break;
            }
            model = self.m_step(&r, rng)?;
        }
        Ok((model, history))
    }
}

fn global_covariance(obs: &[Vec<f64>], d: usize, config: &EmConfig) -> DMatrix<f64> {
    let ones = vec![1.0; obs.len()];
    let (_, _, cov) = weighted_moments(obs, &ones, 1, 0, d);
    floor_covariance(&cov, config.cov_floor, config.covariance)
}

/// EM fit; returns the best restart plus the log-likelihood trace of every restart.
pub fn fit_em_traced(obs: &[Vec<f64>], k: usize, seed: u64, config: &EmConfig) -> Result<(GmmModel, Vec<Vec<f64>>)> {
    let d = check_obs(obs, k)?;
    let state = EmState {
        obs,
        k,
        d,
        config,
        global_cov: global_covariance(obs, d, config),
    };
    let mut best: Option<GmmModel> = None;
    let mut traces = Vec::new();
    let mut last_err = None;
    for restart in 0..config.n_init.max(1) {
        let mut rng = seed::rng(seed, &[restart as u64]);
        match state.run(&mut rng) {
            Ok((model, hist)) => {
                traces.push(hist);
                if best.as_ref().is_none_or(|b| model.log_likelihood > b.log_likelihood) {
                    best = Some(model);
                }
            }
            Err(e) => last_err = Some(e),
        }
    }
    match best {
        Some(m) => Ok((m, traces)),
        None => Err(last_err.unwrap_or(GmmError::NonFinite)),
    }
}

pub fn fit_em(obs: &[Vec<f64>], k: usize, seed: u64, config: &EmConfig) -> Result<GmmModel> {
    fit_em_traced(obs, k, seed, config).map(|(m, _)| m)
}

#[derive(Debug, Clone)]
pub struct BicConfig {
    pub n_folds: usize,
    pub seed: u64,
    pub em: EmConfig,
}

impl Default for BicConfig {
    fn default() -> Self {
        BicConfig {
            n_folds: 5,
            seed: 0,
            em: EmConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BicRow {
    pub k: usize,
    /// Held-out log-likelihood, averaged per observation over folds and scaled to `n`.
    pub log_likelihood: f64,
    pub parameter_count: usize,
    pub bic: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BicReport {
    pub rows: Vec<BicRow>,
    pub selected_k: usize,
}

impl BicReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("k,log_likelihood,parameter_count,bic\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{},{}\n", r.k, r.log_likelihood, r.parameter_count, r.bic));
        }
        out
    }
}

/// Cross-validated BIC over a range of component counts.
///
/// `score = p ln n - 2 * (mean held-out log-likelihood per observation) * n`;
/// ties go to the smaller K. A K whose EM fails on any fold is dropped.
pub fn select_k_bic(obs: &[Vec<f64>], k_range: std::ops::RangeInclusive<usize>, config: &BicConfig) -> Result<BicReport> {
    let ks: Vec<usize> = k_range.filter(|&k| k > 0).collect();
    if ks.is_empty() {
        return Err(GmmError::EmptyRange);
    }
    let d = check_obs(obs, 1)?;
    let n = obs.len();
    let folds = config.n_folds.clamp(2, n.max(2));
    let mut order: Vec<usize> = (0..n).collect();
    {
        use rand::seq::SliceRandom;
        order.shuffle(&mut seed::rng(config.seed, &[u64::MAX]));
    }
    let fold_of: Vec<usize> = {
        let mut f = vec![0; n];
        for (pos, &i) in order.iter().enumerate() {
            f[i] = pos % folds;
        }
        f
    };

    let jobs: Vec<(usize, usize)> = ks.iter().flat_map(|&k| (0..folds).map(move |f| (k, f))).collect();
    let results: Vec<Option<f64>> = jobs
        .par_iter()
        .map(|&(k, fold)| {
            let (train, test): (Vec<_>, Vec<_>) = obs
                .iter()
                .zip(&fold_of)
                .partition(|(_, &f)| f != fold);
            let train: Vec<Vec<f64>> = train.into_iter().map(|(o, _)| o.clone()).collect();
            let test: Vec<Vec<f64>> = test.into_iter().map(|(o, _)| o.clone()).collect();
            let em_seed = seed::derive(config.seed, &[k as u64, fold as u64]);
            match fit_em(&train, k, em_seed, &config.em) {
                Ok(model) if !test.is_empty() => {
                    let ll = model.loglik(&test) / test.len() as f64;
                    ll.is_finite().then_some(ll)
                }
                Ok(_) => None,
                Err(e) => {
                    warn!("EM failed for K={k}, fold {fold}: {e}");
                    None
                }
            }
        })
        .collect();

    let mut rows = Vec::new();
    for (ki, &k) in ks.iter().enumerate() {
        let fold_lls = &results[ki * folds..(ki + 1) * folds];
        if fold_lls.iter().any(Option::is_none) {
            warn!("excluding K={k} from BIC selection");
            continue;
        }
        let mean_ll = fold_lls.iter().flatten().sum::<f64>() / folds as f64;
        let scaled = mean_ll * n as f64;
        let p = parameter_count(k, d, config.em.covariance);
        rows.push(BicRow {
            k,
            log_likelihood: scaled,
            parameter_count: p,
            bic: p as f64 * (n as f64).ln() - 2.0 * scaled,
        });
    }
    let best = rows
        .iter()
        .fold(None::<&BicRow>, |acc, r| match acc {
            Some(b) if b.bic <= r.bic => Some(b),
            _ => Some(r),
        })
        .ok_or(GmmError::NoValidK)?;
    let selected_k = best.k;
    Ok(BicReport { rows, selected_k })
}
