//! Discrete POMDP built on top of the fitted mixture, and belief tracking.
//!
//! States are the K mixture components plus two absorbing terminal states
//! (discharge, death). Transition rows are MAP estimates: soft transition
//! counts smoothed by a distance-ranked stick-breaking prior. For planning,
//! continuous observations are discretized into K cells (the MAP component)
//! with a Monte Carlo confusion table.

use log::warn;
use rayon::prelude::*;
use thiserror::Error;

use crate::episode_store::{ActionBinning, Dataset, DimBins, Outcome};
use crate::gmm::GmmModel;
use crate::seed;
use crate::textfmt::{FormatError, Provenance, TextReader, TextWriter};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid belief: {0}")]
    InvalidBelief(String),
    #[error("invalid GEM parameters: c1={c1}, c2={c2} (need 0 <= c1 < 1, c2 > -c1)")]
    InvalidGem { c1: f64, c2: f64 },
    #[error("prior strength kappa must be positive, got {0}")]
    InvalidKappa(f64),
    #[error("transition row (action {action}, state {state}) sums to {sum}")]
    NotStochastic { action: usize, state: usize, sum: f64 },
    #[error("observation channel row {0} is not a distribution")]
    BadChannel(usize),
    #[error("{what} has shape mismatch: expected {expected}, found {found}")]
    Shape {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("action bin {action} out of range ({n} bins)")]
    ActionOutOfRange { action: usize, n: usize },
    #[error("observation cell {cell} out of range ({k} cells)")]
    CellOutOfRange { cell: usize, k: usize },
    #[error("branch (action {action}, cell {cell}) has zero probability")]
    ZeroProbabilityBranch { action: usize, cell: usize },
    #[error("discount must lie in [0, 1), got {0}")]
    InvalidGamma(f64),
    #[error(transparent)]
    Format(#[from] FormatError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Probability vector over the K non-terminal latent states.
#[derive(Debug, Clone, PartialEq)]
pub struct Belief(Vec<f64>);

impl Belief {
    /// Validates (non-negative, finite, sums to 1 within 1e-6) and renormalizes.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(ModelError::InvalidBelief("empty".into()));
        }
        if let Some(p) = probs.iter().find(|p| !p.is_finite() || **p < 0.0) {
            return Err(ModelError::InvalidBelief(format!("entry {p} is not a probability")));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(ModelError::InvalidBelief(format!("entries sum to {sum}")));
        }
        Ok(Belief(probs.into_iter().map(|p| p / sum).collect()))
    }

    /// Normalizes a non-negative vector with a positive sum.
    pub fn from_weights(weights: Vec<f64>) -> Option<Self> {
        let sum: f64 = weights.iter().sum();
        if !(sum > 0.0) || !sum.is_finite() {
            return None;
        }
        Some(Belief(weights.into_iter().map(|w| w / sum).collect()))
    }

    pub fn uniform(k: usize) -> Self {
        Belief(vec![1.0 / k as f64; k])
    }

    pub fn one_hot(k: usize, s: usize) -> Self {
        let mut v = vec![0.0; k];
        v[s] = 1.0;
        Belief(v)
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn dot(&self, w: &[f64]) -> f64 {
        self.0.iter().zip(w).map(|(b, w)| b * w).sum()
    }

    pub fn norm_sq(&self) -> f64 {
        self.0.iter().map(|b| b * b).sum()
    }
}

/// Griffiths-Engen-McCloskey prior with pseudo-count strength `kappa`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GemPrior {
    pub c1: f64,
    pub c2: f64,
    pub kappa: f64,
}

impl Default for GemPrior {
    fn default() -> Self {
        GemPrior {
            c1: 0.0,
            c2: 1.0,
            kappa: 1.0,
        }
    }
}

impl GemPrior {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.c1) || !(self.c2 > -self.c1) {
            return Err(ModelError::InvalidGem {
                c1: self.c1,
                c2: self.c2,
            });
        }
        if !(self.kappa > 0.0) {
            return Err(ModelError::InvalidKappa(self.kappa));
        }
        Ok(())
    }
}

/// Expected stick-breaking proportions with `V_k = E[Beta(1-c1, c2+k c1)]`.
/// The stick left after `k-1` breaks becomes the last proportion.
pub fn gem_proportions(c1: f64, c2: f64, k: usize) -> Result<Vec<f64>> {
    if !(0.0..1.0).contains(&c1) || !(c2 > -c1) || k == 0 {
        return Err(ModelError::InvalidGem { c1, c2 });
    }
    let mut p = Vec::with_capacity(k);
    let mut rest = 1.0;
    for i in 1..k {
        let v = (1.0 - c1) / (1.0 - c1 + c2 + i as f64 * c1);
        p.push(rest * v);
        rest *= 1.0 - v;
    }
    p.push(rest);
    Ok(p)
}

/// Prior transition row out of state `s`: GEM mass by ascending centroid
/// distance (self first, ties by index), plus `p_term` per terminal column,
/// renormalized. Length K+2.
pub fn transition_prior(centroids: &[Vec<f64>], s: usize, gem: &GemPrior, p_term: f64) -> Result<Vec<f64>> {
    let k = centroids.len();
    let gem_p = gem_proportions(gem.c1, gem.c2, k)?;
    let dist = |j: usize| -> f64 {
        centroids[s]
            .iter()
            .zip(&centroids[j])
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
    };
    let mut ranked: Vec<usize> = (0..k).collect();
    // self always ranks first, even against coincident centroids
    ranked.sort_by(|&a, &b| {
        (a != s)
            .cmp(&(b != s))
            .then(dist(a).total_cmp(&dist(b)))
            .then(a.cmp(&b))
    });
    let mut row = vec![0.0; k + 2];
    for (rank, &j) in ranked.iter().enumerate() {
        row[j] = gem_p[rank];
    }
    row[k] = p_term;
    row[k + 1] = p_term;
    let total: f64 = row.iter().sum();
    row.iter_mut().for_each(|p| *p /= total);
    Ok(row)
}

/// Dirichlet-MAP style smoothing: `(counts + kappa * prior) / (sum(counts) + kappa)`.
pub fn map_row(counts: &[f64], prior: &[f64], kappa: f64) -> Vec<f64> {
    let total: f64 = counts.iter().sum::<f64>() + kappa;
    counts
        .iter()
        .zip(prior)
        .map(|(c, p)| (c + kappa * p) / total)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RewardMode {
    /// Rewards only on terminal transitions; `R(s,a)` is folded from the terminal columns.
    Medical,
    /// `R(s,a)` is the posterior-weighted mean of observed rewards.
    General,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CountMode {
    Soft,
    Hard,
}

#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub gem: GemPrior,
    pub p_term: f64,
    pub gamma: f64,
    /// `(discharge, death)` rewards.
    pub terminal_rewards: (f64, f64),
    pub reward_mode: RewardMode,
    pub count_mode: CountMode,
    pub m_samples: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            gem: GemPrior::default(),
            p_term: 0.01,
            gamma: 0.99,
            terminal_rewards: (10.0, -10.0),
            reward_mode: RewardMode::Medical,
            count_mode: CountMode::Soft,
            m_samples: 10_000,
            seed: 0,
        }
    }
}

/// One observation branch of a belief under an action.
#[derive(Debug, Clone)]
pub struct CellBranch {
    pub cell: usize,
    /// Joint probability of continuing and observing `cell`.
    pub prob: f64,
    /// Unnormalized next belief; divide by `prob` to get the posterior.
    pub weights: Vec<f64>,
}

impl CellBranch {
    pub fn belief(&self) -> Option<Belief> {
        (self.prob > 0.0).then(|| Belief(self.weights.iter().map(|w| w / self.prob).collect()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PomdpModel {
    pub k: usize,
    pub n_actions: usize,
    /// `[a][s][col]`, columns: K continuation states, discharge, death.
    pub transitions: Vec<f64>,
    /// `[a][s]` expected immediate reward.
    pub rewards: Vec<f64>,
    /// `[s'][cell]` = P(cell | s').
    pub channel: Vec<f64>,
    pub state_prior: Vec<f64>,
    pub gamma: f64,
    pub terminal_rewards: (f64, f64),
    pub binning: ActionBinning,
}

impl PomdpModel {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        k: usize,
        n_actions: usize,
        transitions: Vec<f64>,
        rewards: Vec<f64>,
        channel: Vec<f64>,
        state_prior: Vec<f64>,
        gamma: f64,
        terminal_rewards: (f64, f64),
        binning: ActionBinning,
    ) -> Result<Self> {
        let shape = |what, expected: usize, found: usize| {
            if expected == found {
                Ok(())
            } else {
                Err(ModelError::Shape { what, expected, found })
            }
        };
        shape("transitions", n_actions * k * (k + 2), transitions.len())?;
        shape("rewards", n_actions * k, rewards.len())?;
        shape("channel", k * k, channel.len())?;
        shape("state prior", k, state_prior.len())?;
        shape("action bins", n_actions, binning.n_joint())?;
        if !(0.0..1.0).contains(&gamma) {
            return Err(ModelError::InvalidGamma(gamma));
        }
        for a in 0..n_actions {
            for s in 0..k {
                let row = &transitions[(a * k + s) * (k + 2)..(a * k + s + 1) * (k + 2)];
                let sum: f64 = row.iter().sum();
                if row.iter().any(|p| !(*p >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
                    return Err(ModelError::NotStochastic { action: a, state: s, sum });
                }
            }
        }
        for s in 0..k {
            let row = &channel[s * k..(s + 1) * k];
            if row.iter().any(|p| !(*p >= 0.0)) || (row.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return Err(ModelError::BadChannel(s));
            }
        }
        Belief::new(state_prior.clone())?;
        Ok(PomdpModel {
            k,
            n_actions,
            transitions,
            rewards,
            channel,
            state_prior,
            gamma,
            terminal_rewards,
            binning,
        })
    }

    pub fn transition_row(&self, a: usize, s: usize) -> &[f64] {
        let w = self.k + 2;
        &self.transitions[(a * self.k + s) * w..(a * self.k + s + 1) * w]
    }

    pub fn reward(&self, a: usize, s: usize) -> f64 {
        self.rewards[a * self.k + s]
    }

    pub fn channel_prob(&self, s_next: usize, cell: usize) -> f64 {
        self.channel[s_next * self.k + cell]
    }

    fn check_action(&self, a: usize) -> Result<()> {
        if a >= self.n_actions {
            return Err(ModelError::ActionOutOfRange {
                action: a,
                n: self.n_actions,
            });
        }
        Ok(())
    }

    /// Continuation mass `sum_s T(s', s, a) b(s)` for every s' (not normalized).
    pub fn predict(&self, b: &Belief, a: usize) -> Vec<f64> {
        let k = self.k;
        let mut out = vec![0.0; k];
        for (s, &bs) in b.probs().iter().enumerate() {
            if bs == 0.0 {
                continue;
            }
            let row = self.transition_row(a, s);
            for (o, t) in out.iter_mut().zip(&row[..k]) {
                *o += bs * t;
            }
        }
        out
    }

    /// `(P(discharge | b, a), P(death | b, a))`.
    pub fn termination(&self, b: &Belief, a: usize) -> (f64, f64) {
        let k = self.k;
        b.probs().iter().enumerate().fold((0.0, 0.0), |(d, x), (s, &bs)| {
            let row = self.transition_row(a, s);
            (d + bs * row[k], x + bs * row[k + 1])
        })
    }

    /// Every observation-cell branch of `(b, a)`, including zero-probability ones.
    pub fn branches(&self, b: &Belief, a: usize) -> Vec<CellBranch> {
        let pred = self.predict(b, a);
        (0..self.k)
            .map(|cell| {
                let weights: Vec<f64> = pred
                    .iter()
                    .enumerate()
                    .map(|(s, p)| p * self.channel_prob(s, cell))
                    .collect();
                CellBranch {
                    cell,
                    prob: weights.iter().sum(),
                    weights,
                }
            })
            .collect()
    }

    /// Belief after acting and observing a discretized cell, with the joint
    /// probability of continuing and seeing that cell.
    pub fn belief_update_cell(&self, b: &Belief, a: usize, cell: usize) -> Result<(Belief, f64)> {
        self.check_action(a)?;
        if cell >= self.k {
            return Err(ModelError::CellOutOfRange { cell, k: self.k });
        }
        let pred = self.predict(b, a);
        let weights: Vec<f64> = pred
            .iter()
            .enumerate()
            .map(|(s, p)| p * self.channel_prob(s, cell))
            .collect();
        let p_cell: f64 = weights.iter().sum();
        if !(p_cell > 0.0) {
            return Err(ModelError::ZeroProbabilityBranch { action: a, cell });
        }
        Ok((Belief(weights.into_iter().map(|w| w / p_cell).collect()), p_cell))
    }

    /// Belief update from a continuous observation, weighting the prediction by
    /// `P(s'|o) / P(s')`. Returns the new belief and the continuation probability.
    pub fn belief_update_exact(&self, gmm: &GmmModel, b: &Belief, a: usize, o: &[f64]) -> Result<(Belief, f64)> {
        self.check_action(a)?;
        let ratio: Vec<f64> = gmm
            .posterior(o)
            .iter()
            .zip(&self.state_prior)
            .map(|(p, w)| p / w)
            .collect();
        let (belief, p_continue) = self.update_with_ratio(b, a, &ratio);
        Ok((belief.unwrap_or_else(|| {
            warn!("belief update normalizer underflowed; falling back to the observation posterior");
            Belief(gmm.posterior(o))
        }), p_continue))
    }

    /// Core of [`Self::belief_update_exact`] with the likelihood ratio given directly.
    /// `None` when the normalizer is below 1e-300.
    pub fn update_with_ratio(&self, b: &Belief, a: usize, ratio: &[f64]) -> (Option<Belief>, f64) {
        let pred = self.predict(b, a);
        let p_continue: f64 = pred.iter().sum();
        let weights: Vec<f64> = pred.iter().zip(ratio).map(|(p, r)| p * r).collect();
        let z: f64 = weights.iter().sum();
        if !(z >= 1e-300) {
            return (None, p_continue);
        }
        (Some(Belief(weights.into_iter().map(|w| w / z).collect())), p_continue)
    }

    /// Belief after the first observation of an episode, before any action.
    pub fn observe_first(&self, gmm: &GmmModel, o: &[f64]) -> Belief {
        let post = gmm.posterior(o);
        Belief::from_weights(post.clone()).unwrap_or(Belief(self.state_prior.clone()))
    }

    /// `R_B(b, a) = sum_s R(s, a) b(s)`.
    pub fn expected_reward(&self, b: &Belief, a: usize) -> f64 {
        b.dot(&self.rewards[a * self.k..(a + 1) * self.k])
    }

    pub fn initial_belief(&self) -> Belief {
        Belief(self.state_prior.clone())
    }

    /// Smallest and largest `R(s, a)`.
    pub fn reward_range(&self) -> (f64, f64) {
        self.rewards
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &r| (lo.min(r), hi.max(r)))
    }

    pub fn to_text(&self, prov: &Provenance) -> String {
        let k = self.k;
        let mut w = TextWriter::new("astc-pomdp", 1);
        prov.write(&mut w);
        w.scalar("k", k)
            .scalar("n_actions", self.n_actions)
            .scalar("gamma", self.gamma)
            .scalar("reward_discharge", self.terminal_rewards.0)
            .scalar("reward_death", self.terminal_rewards.1)
            .vector("state_prior", &self.state_prior)
            .scalar("action_dims", self.binning.dims.len());
        for d in &self.binning.dims {
            w.scalar("zero_bin", u8::from(d.zero_bin))
                .vector("edges", &d.edges)
                .vector("representatives", &d.representatives);
        }
        for a in 0..self.n_actions {
            let block = &self.transitions[a * k * (k + 2)..(a + 1) * k * (k + 2)];
            w.matrix("transition", k, k + 2, block);
        }
        w.matrix("rewards", self.n_actions, k, &self.rewards)
            .matrix("channel", k, k, &self.channel);
        w.finish()
    }

    pub fn from_text(text: &str) -> Result<(Self, Provenance)> {
        let mut r = TextReader::new(text, "astc-pomdp", 1)?;
        let prov = Provenance::read(&mut r)?;
        let k: usize = r.scalar("k")?;
        let n_actions: usize = r.scalar("n_actions")?;
        let gamma: f64 = r.scalar("gamma")?;
        let rd: f64 = r.scalar("reward_discharge")?;
        let rx: f64 = r.scalar("reward_death")?;
        let state_prior: Vec<f64> = r.vector("state_prior")?;
        let n_dims: usize = r.scalar("action_dims")?;
        let mut dims = Vec::with_capacity(n_dims);
        for _ in 0..n_dims {
            let zero: u8 = r.scalar("zero_bin")?;
            dims.push(DimBins {
                zero_bin: zero == 1,
                edges: r.vector("edges")?,
                representatives: r.vector("representatives")?,
            });
        }
        let mut transitions = Vec::with_capacity(n_actions * k * (k + 2));
        for _ in 0..n_actions {
            let (_, _, block) = r.matrix("transition")?;
            transitions.extend(block);
        }
        let (_, _, rewards) = r.matrix("rewards")?;
        let (_, _, channel) = r.matrix("channel")?;
        let model = PomdpModel::new(
            k,
            n_actions,
            transitions,
            rewards,
            channel,
            state_prior,
            gamma,
            (rd, rx),
            ActionBinning { dims },
        )?;
        Ok((model, prov))
    }
}

/// `C[s'][cell]` by sampling `m_samples` points from each component and
/// recording the MAP component of every sample.
pub fn build_observation_channel(gmm: &GmmModel, m_samples: usize, seed: u64) -> Vec<f64> {
    let k = gmm.k();
    let rows: Vec<Vec<f64>> = (0..k)
        .into_par_iter()
        .map(|s| {
            let mut rng = seed::rng(seed, &[s as u64]);
            let mut counts = vec![0usize; k];
            for _ in 0..m_samples.max(1) {
                let x = gmm.sample(s, &mut rng);
                counts[gmm.map_component(&x)] += 1;
            }
            let total: usize = counts.iter().sum();
            counts.iter().map(|&c| c as f64 / total as f64).collect()
        })
        .collect();
    rows.concat()
}

/// MAP transition tables, rewards and observation channel from a development set.
pub fn fit_transitions(ds: &Dataset, gmm: &GmmModel, bins: &ActionBinning, config: &ModelConfig) -> Result<PomdpModel> {
    config.gem.validate()?;
    let k = gmm.k();
    let n_actions = bins.n_joint();
    let width = k + 2;

    let state_probs = |o: &[f64]| -> Vec<f64> {
        match config.count_mode {
            CountMode::Soft => gmm.posterior(o),
            CountMode::Hard => {
                let mut v = vec![0.0; k];
                v[gmm.map_component(o)] = 1.0;
                v
            }
        }
    };
    let posteriors: Vec<Vec<Vec<f64>>> = ds
        .episodes
        .par_iter()
        .map(|ep| ep.steps.iter().map(|s| state_probs(&s.obs)).collect())
        .collect();

    let mut counts = vec![0.0; n_actions * k * width];
    let mut reward_sum = vec![0.0; n_actions * k];
    let mut reward_mass = vec![0.0; n_actions * k];
    for (ep, post) in ds.episodes.iter().zip(&posteriors) {
        for (t, step) in ep.steps.iter().enumerate() {
            let a = bins.bin_of(&step.action);
            let cur = &post[t];
            for s in 0..k {
                reward_sum[a * k + s] += cur[s] * step.reward;
                reward_mass[a * k + s] += cur[s];
            }
            let base = a * k * width;
            if !step.is_terminal {
                let next = &post[t + 1];
                for s in 0..k {
                    if cur[s] == 0.0 {
                        continue;
                    }
                    for s2 in 0..k {
                        counts[base + s * width + s2] += cur[s] * next[s2];
                    }
                }
            } else {
                let col = match step.outcome {
                    Outcome::Discharge => k,
                    Outcome::Death => k + 1,
                    // truncated episode: destination unknown
                    Outcome::None => continue,
                };
                for s in 0..k {
                    counts[base + s * width + col] += cur[s];
                }
            }
        }
    }

    let priors: Vec<Vec<f64>> = (0..k)
        .map(|s| transition_prior(&gmm.means, s, &config.gem, config.p_term))
        .collect::<Result<_>>()?;
    let mut transitions = Vec::with_capacity(counts.len());
    for a in 0..n_actions {
        let block = &counts[a * k * width..(a + 1) * k * width];
        if block.iter().sum::<f64>() == 0.0 {
            warn!("action bin {a} has no recorded transitions; its rows equal the prior");
        }
        for s in 0..k {
            transitions.extend(map_row(&block[s * width..(s + 1) * width], &priors[s], config.gem.kappa));
        }
    }

    let (r_dis, r_death) = config.terminal_rewards;
    let rewards: Vec<f64> = match config.reward_mode {
        RewardMode::Medical => (0..n_actions * k)
            .map(|i| {
                let row = &transitions[i * width..(i + 1) * width];
                r_dis * row[k] + r_death * row[k + 1]
            })
            .collect(),
        RewardMode::General => reward_sum
            .iter()
            .zip(&reward_mass)
            .map(|(s, m)| if *m > 0.0 { s / m } else { 0.0 })
            .collect(),
    };

    let channel = build_observation_channel(gmm, config.m_samples, config.seed);
    PomdpModel::new(
        k,
        n_actions,
        transitions,
        rewards,
        channel,
        gmm.weights.clone(),
        config.gamma,
        config.terminal_rewards,
        bins.clone(),
    )
}
