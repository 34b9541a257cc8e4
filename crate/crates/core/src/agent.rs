//! Off-policy actor-critic over belief states.
//!
//! The actor is a Gaussian `N(uᵀb, σ²I)` over continuous action vectors. Two
//! linear critics regress onto the lower and upper root bounds of a search
//! tree grown from each visited belief; the midpoint root value drives the
//! temporal-difference error, and the actor follows an importance-weighted
//! eligibility trace of score vectors.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use log::warn;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::belief_model::{Belief, ModelError, PomdpModel};
use crate::bounded_tree::{search, LeafCritic, SearchBudget, SearchResult, TreeError};
use crate::episode_store::{Dataset, Episode, Outcome};
use crate::gmm::GmmModel;
use crate::textfmt::{FormatError, Provenance, TextReader, TextWriter};

/// Smallest behavior-policy density used in importance ratios.
pub const BEHAVIOR_FLOOR: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("sigma must be positive and finite, got {0}")]
    InvalidSigma(f64),
    #[error("{what} has {found} entries, expected {expected}")]
    Shape {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("no logged behavior probability for episode {episode}, step {step}")]
    MissingBehavior { episode: u64, step: usize },
    #[error("behavior policy fit needs at least one step")]
    EmptyDataset,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error(transparent)]
    Format(#[from] FormatError),
}

pub type Result<T> = std::result::Result<T, AgentError>;

/// Gaussian policy `N(uᵀb, σ²I)`; `u` is K×d_act, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ActorParams {
    pub k: usize,
    pub d_act: usize,
    pub u: Vec<f64>,
    pub sigma: f64,
}

impl ActorParams {
    pub fn new(k: usize, d_act: usize, u: Vec<f64>, sigma: f64) -> Result<Self> {
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(AgentError::InvalidSigma(sigma));
        }
        if u.len() != k * d_act {
            return Err(AgentError::Shape {
                what: "actor mean map",
                expected: k * d_act,
                found: u.len(),
            });
        }
        Ok(ActorParams { k, d_act, u, sigma })
    }

    /// Every belief maps to the same mean action.
    pub fn constant(k: usize, mean_action: &[f64], sigma: f64) -> Result<Self> {
        Self::new(k, mean_action.len(), mean_action.repeat(k), sigma)
    }

    pub fn mean(&self, b: &Belief) -> Vec<f64> {
        let mut m = vec![0.0; self.d_act];
        for (s, &bs) in b.probs().iter().enumerate() {
            for (j, mj) in m.iter_mut().enumerate() {
                *mj += bs * self.u[s * self.d_act + j];
            }
        }
        m
    }

    pub fn log_density(&self, b: &Belief, a: &[f64]) -> f64 {
        let var = self.sigma * self.sigma;
        self.mean(b)
            .iter()
            .zip(a)
            .map(|(m, x)| -0.5 * (x - m) * (x - m) / var - 0.5 * (2.0 * PI * var).ln())
            .sum()
    }

    pub fn density(&self, b: &Belief, a: &[f64]) -> f64 {
        self.log_density(b, a).exp()
    }

    /// `∇_u log π(a | b) = b (a − uᵀb)ᵀ / σ²`, K×d_act row-major.
    pub fn score(&self, b: &Belief, a: &[f64]) -> Vec<f64> {
        let var = self.sigma * self.sigma;
        let resid: Vec<f64> = self.mean(b).iter().zip(a).map(|(m, x)| (x - m) / var).collect();
        b.probs()
            .iter()
            .flat_map(|&bs| resid.iter().map(move |r| bs * r))
            .collect()
    }

    pub fn sample<R: Rng + ?Sized>(&self, b: &Belief, rng: &mut R) -> Vec<f64> {
        self.mean(b)
            .into_iter()
            .map(|m| {
                let z: f64 = StandardNormal.sample(rng);
                m + self.sigma * z
            })
            .collect()
    }
}

fn dot_prefix(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// `(min(0, R_min)/(1−γ), max(0, R_max)/(1−γ))`.
pub fn safe_value_bounds(model: &PomdpModel) -> (f64, f64) {
    let (r_min, r_max) = model.reward_range();
    let scale = 1.0 / (1.0 - model.gamma);
    (r_min.min(0.0) * scale, r_max.max(0.0) * scale)
}

/// Linear lower/upper value bounds with running-mean normalized step sizes.
#[derive(Debug, Clone, PartialEq)]
pub struct CriticParams {
    pub w_lower: Vec<f64>,
    pub w_upper: Vec<f64>,
    /// Running means of `‖b‖²` behind the lower/upper step sizes.
    pub m_lower: f64,
    pub m_upper: f64,
}

impl CriticParams {
    pub fn zeros(k: usize) -> Self {
        CriticParams {
            w_lower: vec![0.0; k],
            w_upper: vec![0.0; k],
            m_lower: 1.0,
            m_upper: 1.0,
        }
    }

    /// Constant bounds `min(0, R_min)/(1−γ)` and `max(0, R_max)/(1−γ)`, which
    /// hold for every belief because terminal states are worth zero.
    pub fn safe_bounds(model: &PomdpModel) -> Self {
        let (lo, hi) = safe_value_bounds(model);
        CriticParams {
            w_lower: vec![lo; model.k],
            w_upper: vec![hi; model.k],
            m_lower: 1.0,
            m_upper: 1.0,
        }
    }

    /// Model-derived linear bounds: the value of the fully observed MDP is an
    /// upper bound on every belief value, and the value of repeating a single
    /// action forever (the best such action for the state prior) is a lower bound.
    pub fn model_bounds(model: &PomdpModel) -> Self {
        let k = model.k;
        let gamma = model.gamma;
        let cont = |a: usize, s: usize, v: &[f64]| -> f64 { dot_prefix(model.transition_row(a, s), v) };
        let mut upper = vec![0.0; k];
        loop {
            let next: Vec<f64> = (0..k)
                .map(|s| {
                    (0..model.n_actions)
                        .map(|a| model.reward(a, s) + gamma * cont(a, s, &upper))
                        .fold(f64::NEG_INFINITY, f64::max)
                })
                .collect();
            let change = max_abs_diff(&next, &upper);
            upper = next;
            if change < 1e-10 {
                break;
            }
        }
        let blind = |a: usize| -> Vec<f64> {
            let mut v = vec![0.0; k];
            loop {
                let next: Vec<f64> = (0..k).map(|s| model.reward(a, s) + gamma * cont(a, s, &v)).collect();
                let change = max_abs_diff(&next, &v);
                v = next;
                if change < 1e-10 {
                    return v;
                }
            }
        };
        let mut lower = blind(0);
        let mut best = dot_prefix(&lower, &model.state_prior);
        for a in 1..model.n_actions {
            let v = blind(a);
            let score = dot_prefix(&v, &model.state_prior);
            if score > best {
                best = score;
                lower = v;
            }
        }
        CriticParams {
            w_lower: lower,
            w_upper: upper,
            m_lower: 1.0,
            m_upper: 1.0,
        }
    }

    pub fn leaf(&self) -> LeafCritic<'_> {
        LeafCritic {
            lower: &self.w_lower,
            upper: &self.w_upper,
        }
    }

    /// One semi-gradient step of each bound toward its target, with step size
    /// `0.1 / m` where `m` tracks the mean squared belief norm.
    pub fn update(&mut self, b: &Belief, target_lower: f64, target_upper: f64) {
        let sq = b.norm_sq();
        for (w, m, target) in [
            (&mut self.w_lower, &mut self.m_lower, target_lower),
            (&mut self.w_upper, &mut self.m_upper, target_upper),
        ] {
            *m = 0.99 * *m + 0.01 * sq;
            if *m < 1e-12 {
                warn!("critic step-size normalizer vanished; skipping update");
                continue;
            }
            let beta = 0.1 / *m;
            let err = target - b.dot(w);
            if !err.is_finite() {
                warn!("non-finite critic error; skipping update");
                continue;
            }
            for (wi, bi) in w.iter_mut().zip(b.probs()) {
                *wi += beta * err * bi;
            }
        }
    }
}

/// Actor eligibility trace, reset at every episode start.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceState {
    pub e: Vec<f64>,
    pub lambda: f64,
    pub alpha: f64,
}

impl TraceState {
    pub fn new(len: usize, lambda: f64, alpha: f64) -> Self {
        TraceState {
            e: vec![0.0; len],
            lambda,
            alpha,
        }
    }

    pub fn reset(&mut self) {
        self.e.iter_mut().for_each(|x| *x = 0.0);
    }
}

/// `e ← ρ(γλe + score)`, then `u ← u + αδe`. Returns false (and leaves both
/// untouched) when `delta` is not finite.
pub fn actor_update(actor: &mut ActorParams, trace: &mut TraceState, gamma: f64, delta: f64, rho: f64, score: &[f64]) -> bool {
    if !delta.is_finite() {
        warn!("non-finite TD error; skipping actor step");
        return false;
    }
    let decay = gamma * trace.lambda;
    for (e, g) in trace.e.iter_mut().zip(score) {
        *e = rho * (decay * *e + g);
    }
    for (u, e) in actor.u.iter_mut().zip(&trace.e) {
        *u += trace.alpha * delta * e;
    }
    true
}

/// `δ = r + γ v' − v`, with `v' = 0` after a terminal step.
pub fn td_error(r: f64, value_next: f64, value_curr: f64, gamma: f64, terminal: bool) -> f64 {
    let next = if terminal { 0.0 } else { value_next };
    r + gamma * next - value_curr
}

/// `min(π / max(π_b, floor), rho_max)`.
pub fn importance_ratio(target_density: f64, behavior_density: f64, rho_max: f64) -> f64 {
    (target_density / behavior_density.max(BEHAVIOR_FLOOR)).clamp(0.0, rho_max)
}

/// The data-generating policy, as needed for importance ratios.
#[derive(Debug, Clone, PartialEq)]
pub enum BehaviorPolicy {
    /// Exact probability of the logged action, per episode id and step.
    KnownDiscrete(BTreeMap<u64, Vec<f64>>),
    /// Independent per-dimension Gaussians with linear-in-belief means.
    FittedGaussian {
        /// K×d_act row-major coefficients.
        coef: Vec<f64>,
        variance: Vec<f64>,
    },
}

impl BehaviorPolicy {
    /// Density (or probability) of the logged action, floored.
    pub fn density(&self, episode: u64, step: usize, b: &Belief, a: &[f64]) -> Result<f64> {
        let p = match self {
            BehaviorPolicy::KnownDiscrete(table) => *table
                .get(&episode)
                .and_then(|v| v.get(step))
                .ok_or(AgentError::MissingBehavior { episode, step })?,
            BehaviorPolicy::FittedGaussian { coef, variance } => {
                let d = variance.len();
                (0..d)
                    .map(|j| {
                        let mean: f64 = b.probs().iter().enumerate().map(|(s, bs)| bs * coef[s * d + j]).sum();
                        let var = variance[j];
                        (-(a[j] - mean).powi(2) / (2.0 * var)).exp() / (2.0 * PI * var).sqrt()
                    })
                    .product()
            }
        };
        Ok(p.max(BEHAVIOR_FLOOR))
    }

    /// Least-squares fit of each action dimension on the belief, with the
    /// residual variance (floored at 1e-6) as the spread.
    pub fn fit_gaussian(beliefs: &[Belief], actions: &[Vec<f64>]) -> Result<Self> {
        let n = beliefs.len();
        if n == 0 {
            return Err(AgentError::EmptyDataset);
        }
        let k = beliefs[0].len();
        let d = actions[0].len();
        let x = DMatrix::from_fn(n, k, |i, s| beliefs[i].probs()[s]);
        let xtx = x.transpose() * &x + DMatrix::identity(k, k) * 1e-9;
        let chol = nalgebra::Cholesky::new(xtx).ok_or(AgentError::EmptyDataset)?;
        let mut coef = vec![0.0; k * d];
        let mut variance = vec![0.0; d];
        for j in 0..d {
            let y = DVector::from_fn(n, |i, _| actions[i][j]);
            let beta = chol.solve(&(x.transpose() * &y));
            let resid = &y - &x * &beta;
            variance[j] = (resid.norm_squared() / n as f64).max(1e-6);
            for s in 0..k {
                coef[s * d + j] = beta[s];
            }
        }
        Ok(BehaviorPolicy::FittedGaussian { coef, variance })
    }
}

/// Filtered beliefs `b_0..b_{T-1}` of an episode under its logged actions.
pub fn episode_beliefs(model: &PomdpModel, gmm: &GmmModel, ep: &Episode) -> Result<Vec<Belief>> {
    let mut out = Vec::with_capacity(ep.steps.len());
    let mut b = model.observe_first(gmm, &ep.steps[0].obs);
    for (t, step) in ep.steps.iter().enumerate() {
        out.push(b.clone());
        if t + 1 < ep.steps.len() {
            let a = model.binning.bin_of(&step.action);
            b = model.belief_update_exact(gmm, &b, a, &ep.steps[t + 1].obs)?.0;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AgentConfig {
    pub alpha: f64,
    pub lambda: f64,
    pub sigma: f64,
    pub rho_max: f64,
    pub budget: SearchBudget,
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig {
            alpha: 0.01,
            lambda: 0.8,
            sigma: 0.1,
            rho_max: 10.0,
            budget: SearchBudget::default(),
        }
    }
}

impl AgentConfig {
    /// Settings tuned for the synthetic benchmark, whose actions are
    /// integer-spaced categories rather than normalized doses: a wider
    /// actor, a small step size (the goal state dominates visitation) and
    /// one-step traces.
    pub fn synthetic() -> Self {
        AgentConfig {
            alpha: 3e-4,
            lambda: 0.0,
            sigma: 0.4,
            ..Default::default()
        }
    }
}

/// How the actor's weights are initialized before training.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum ActorInit {
    /// Every belief maps to the dataset's mean action.
    MeanAction,
    /// Least-squares regression of logged actions on filtered beliefs, so
    /// training starts from the behavior policy's mean.
    #[default]
    BehaviorFit,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Agent {
    pub actor: ActorParams,
    pub critic: CriticParams,
    /// Config hash of the model the agent was trained against.
    pub model_hash: String,
    pub epochs_completed: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProposalMode {
    Mean,
    Sample,
    Tree,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct EpochMetrics {
    pub mean_abs_delta: f64,
    pub mean_root_gap: f64,
    pub mean_rho: f64,
    pub actor_updates: usize,
    pub searches: usize,
    pub skipped_episodes: usize,
}

impl Agent {
    /// Actor mean at `mean_action` for every belief; critics at the model-derived bounds.
    pub fn init(model: &PomdpModel, mean_action: &[f64], sigma: f64, model_hash: impl Into<String>) -> Result<Self> {
        Ok(Agent {
            actor: ActorParams::constant(model.k, mean_action, sigma)?,
            critic: CriticParams::model_bounds(model),
            model_hash: model_hash.into(),
            epochs_completed: 0,
        })
    }

    /// Initialize from a training dataset according to `init`.
    pub fn init_from_data(
        model: &PomdpModel,
        gmm: &GmmModel,
        ds: &Dataset,
        sigma: f64,
        init: ActorInit,
        model_hash: impl Into<String>,
    ) -> Result<Self> {
        if ds.n_steps() == 0 {
            return Err(AgentError::EmptyDataset);
        }
        let n = ds.n_steps() as f64;
        let mean_action: Vec<f64> = (0..ds.d_act).map(|j| ds.steps().map(|s| s.action[j]).sum::<f64>() / n).collect();
        let mut agent = Agent::init(model, &mean_action, sigma, model_hash)?;
        if init == ActorInit::BehaviorFit {
            let mut beliefs = Vec::with_capacity(ds.n_steps());
            let mut actions = Vec::with_capacity(ds.n_steps());
            for ep in &ds.episodes {
                // Episodes whose beliefs cannot be filtered are skipped here as in training.
                let Ok(bs) = episode_beliefs(model, gmm, ep) else { continue };
                for (b, step) in bs.into_iter().zip(&ep.steps) {
                    beliefs.push(b);
                    actions.push(step.action.clone());
                }
            }
            if let BehaviorPolicy::FittedGaussian { coef, .. } = BehaviorPolicy::fit_gaussian(&beliefs, &actions)? {
                agent.actor = ActorParams::new(model.k, ds.d_act, coef, sigma)?;
            }
        }
        Ok(agent)
    }

    pub fn search(&self, model: &PomdpModel, b: &Belief, budget: &SearchBudget) -> Result<SearchResult> {
        Ok(search(model, self.critic.leaf(), b.clone(), budget)?.0)
    }

    pub fn propose_action<R: Rng + ?Sized>(
        &self,
        model: &PomdpModel,
        b: &Belief,
        mode: ProposalMode,
        budget: &SearchBudget,
        rng: &mut R,
    ) -> Result<Vec<f64>> {
        Ok(match mode {
            ProposalMode::Mean => self.actor.mean(b),
            ProposalMode::Sample => self.actor.sample(b, rng),
            ProposalMode::Tree => {
                let r = self.search(model, b, budget)?;
                model.binning.representative(r.best_root_action_bin)
            }
        })
    }

    /// One pass over the episodes in order, updating critic and actor after every step.
    pub fn train_epoch(
        &mut self,
        ds: &Dataset,
        model: &PomdpModel,
        gmm: &GmmModel,
        behavior: &BehaviorPolicy,
        config: &AgentConfig,
    ) -> EpochMetrics {
        let mut trace = TraceState::new(self.actor.u.len(), config.lambda, config.alpha);
        let mut acc = EpochMetrics::default();
        let (mut sum_delta, mut sum_gap, mut sum_rho) = (0.0, 0.0, 0.0);
        for ep in &ds.episodes {
            trace.reset();
            match self.train_episode(ep, model, gmm, behavior, config, &mut trace) {
                Ok(stats) => {
                    sum_delta += stats.sum_abs_delta;
                    sum_gap += stats.sum_gap;
                    sum_rho += stats.sum_rho;
                    acc.actor_updates += stats.updates;
                    acc.searches += stats.searches;
                }
                Err(e) => {
                    warn!("skipping episode {}: {e}", ep.id);
                    acc.skipped_episodes += 1;
                }
            }
        }
        if acc.actor_updates > 0 {
            acc.mean_abs_delta = sum_delta / acc.actor_updates as f64;
            acc.mean_rho = sum_rho / acc.actor_updates as f64;
        }
        if acc.searches > 0 {
            acc.mean_root_gap = sum_gap / acc.searches as f64;
        }
        self.epochs_completed += 1;
        acc
    }

    /// The actor update for step t waits until the search at t+1 provides
    /// `v(b_{t+1})`, so each step needs exactly one search.
    fn train_episode(
        &mut self,
        ep: &Episode,
        model: &PomdpModel,
        gmm: &GmmModel,
        behavior: &BehaviorPolicy,
        config: &AgentConfig,
        trace: &mut TraceState,
    ) -> Result<EpisodeStats> {
        let gamma = model.gamma;
        let mut stats = EpisodeStats::default();
        let mut b = model.observe_first(gmm, &ep.steps[0].obs);
        // (reward, value, rho, score) of the previous step
        let mut pending: Option<(f64, f64, f64, Vec<f64>)> = None;
        for (t, step) in ep.steps.iter().enumerate() {
            let res = self.search(model, &b, &config.budget)?;
            stats.searches += 1;
            stats.sum_gap += res.root_upper - res.root_lower;
            self.critic.update(&b, res.root_lower, res.root_upper);
            if let Some((r, v, rho, score)) = pending.take() {
                let delta = td_error(r, res.root_value, v, gamma, false);
                stats.record(actor_update(&mut self.actor, trace, gamma, delta, rho, &score), delta, rho);
            }

            let target = self.actor.density(&b, &step.action);
            let rho = importance_ratio(target, behavior.density(ep.id, t, &b, &step.action)?, config.rho_max);
            let score = self.actor.score(&b, &step.action);
            if step.is_terminal {
                // a truncated episode has no observed successor value to bootstrap from
                if step.outcome != Outcome::None {
                    let delta = td_error(step.reward, 0.0, res.root_value, gamma, true);
                    stats.record(actor_update(&mut self.actor, trace, gamma, delta, rho, &score), delta, rho);
                }
                break;
            }
            pending = Some((step.reward, res.root_value, rho, score));
            let a = model.binning.bin_of(&step.action);
            b = model.belief_update_exact(gmm, &b, a, &ep.steps[t + 1].obs)?.0;
        }
        Ok(stats)
    }

    pub fn to_text(&self, prov: &Provenance) -> String {
        let mut w = TextWriter::new("astc-agent", 1);
        prov.write(&mut w);
        let hash = if self.model_hash.is_empty() { "-" } else { &self.model_hash };
        w.scalar("model_hash", hash)
            .scalar("epochs_completed", self.epochs_completed)
            .scalar("sigma", self.actor.sigma)
            .matrix("u", self.actor.k, self.actor.d_act, &self.actor.u)
            .vector("w_lower", &self.critic.w_lower)
            .vector("w_upper", &self.critic.w_upper)
            .scalar("m_lower", self.critic.m_lower)
            .scalar("m_upper", self.critic.m_upper);
        w.finish()
    }

    pub fn from_text(text: &str) -> Result<(Self, Provenance)> {
        let mut r = TextReader::new(text, "astc-agent", 1)?;
        let prov = Provenance::read(&mut r)?;
        let hash: String = r.scalar("model_hash")?;
        let epochs_completed = r.scalar("epochs_completed")?;
        let sigma = r.scalar("sigma")?;
        let (k, d, u) = r.matrix("u")?;
        let actor = ActorParams::new(k, d, u, sigma)?;
        let critic = CriticParams {
            w_lower: r.vector("w_lower")?,
            w_upper: r.vector("w_upper")?,
            m_lower: r.scalar("m_lower")?,
            m_upper: r.scalar("m_upper")?,
        };
        for w in [&critic.w_lower, &critic.w_upper] {
            if w.len() != k {
                return Err(AgentError::Shape {
                    what: "critic weights",
                    expected: k,
                    found: w.len(),
                });
            }
        }
        let agent = Agent {
            actor,
            critic,
            model_hash: if hash == "-" { String::new() } else { hash },
            epochs_completed,
        };
        Ok((agent, prov))
    }
}

#[derive(Debug, Default)]
struct EpisodeStats {
    sum_abs_delta: f64,
    sum_gap: f64,
    sum_rho: f64,
    updates: usize,
    searches: usize,
}

impl EpisodeStats {
    fn record(&mut self, applied: bool, delta: f64, rho: f64) {
        if applied {
            self.sum_abs_delta += delta.abs();
            self.sum_rho += rho;
            self.updates += 1;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn actor_1d(u: Vec<f64>, sigma: f64) -> ActorParams {
        ActorParams::new(u.len(), 1, u, sigma).unwrap()
    }

    #[test]
    fn density_at_mean() {
        let a = actor_1d(vec![0.3, 0.3], 1.0);
        let b = Belief::uniform(2);
        assert!((a.density(&b, &[0.3]) - 1.0 / (2.0 * PI).sqrt()).abs() < 1e-15);
        assert!((a.density(&b, &[0.3]) - 0.3989).abs() < 1e-4);
        assert!((a.density(&b, &[1.0]) - a.density(&b, &[-0.4])).abs() < 1e-15);
    }

    #[test]
    fn score_examples() {
        let a = actor_1d(vec![0.0], 1.0);
        let b = Belief::one_hot(1, 0);
        assert_eq!(a.score(&b, &[2.0]), vec![2.0]);
        assert_eq!(a.score(&b, &[0.0]), vec![0.0]);
    }

    #[test]
    fn importance_ratio_examples() {
        assert_eq!(importance_ratio(0.2, 0.1, 10.0), 2.0);
        assert_eq!(importance_ratio(5.0, 0.1, 10.0), 10.0);
        assert_eq!(importance_ratio(0.3, 0.3, 10.0), 1.0);
        assert_eq!(importance_ratio(1e-7, 0.0, 10.0), 0.1);
    }

    #[test]
    fn td_examples() {
        assert_eq!(td_error(10.0, 123.0, 8.0, 0.99, true), 2.0);
        assert!(td_error(0.0, 5.0, 4.95, 0.99, false).abs() < 1e-12);
    }

    #[test]
    fn critic_one_hot_step() {
        let mut c = CriticParams::zeros(2);
        c.update(&Belief::one_hot(2, 0), 1.0, 1.0);
        assert!((c.w_lower[0] - 0.1).abs() < 1e-15);
        assert_eq!(c.w_lower[1], 0.0);
        // zero error leaves weights unchanged
        let before = c.clone();
        c.update(&Belief::one_hot(2, 0), 0.1, 0.1);
        assert_eq!(c.w_lower, before.w_lower);
    }

    #[test]
    fn trace_unrolls_by_hand() {
        let mut actor = actor_1d(vec![0.0], 1.0);
        let mut trace = TraceState::new(1, 0.8, 0.0);
        actor_update(&mut actor, &mut trace, 0.9, 1.0, 1.0, &[1.5]);
        actor_update(&mut actor, &mut trace, 0.9, 1.0, 1.0, &[-0.5]);
        assert!((trace.e[0] - (0.72 * 1.5 - 0.5)).abs() < 1e-15);
    }

    #[test]
    fn rejected_action_clears_trace() {
        let mut actor = actor_1d(vec![0.4], 1.0);
        let mut trace = TraceState::new(1, 0.8, 0.1);
        trace.e[0] = 3.0;
        actor_update(&mut actor, &mut trace, 0.9, 2.0, 0.0, &[1.0]);
        assert_eq!(trace.e[0], 0.0);
        assert_eq!(actor.u[0], 0.4);
        assert!(!actor_update(&mut actor, &mut trace, 0.9, f64::NAN, 1.0, &[1.0]));
    }

    #[test]
    fn checkpoint_round_trip() {
        let agent = Agent {
            actor: ActorParams::new(2, 2, vec![0.1, 0.2, 1.0 / 3.0, -4.0], 0.7).unwrap(),
            critic: CriticParams {
                w_lower: vec![1.5, -2.0],
                w_upper: vec![3.0, 0.1],
                m_lower: 0.75,
                m_upper: 0.5,
            },
            model_hash: "abc".into(),
            epochs_completed: 3,
        };
        let prov = Provenance::new("cfg", 9);
        let (back, p) = Agent::from_text(&agent.to_text(&prov)).unwrap();
        assert_eq!(back, agent);
        assert_eq!(p, prov);
    }

    #[test]
    fn fitted_gaussian_recovers_linear_means() {
        let beliefs: Vec<Belief> = (0..200)
            .map(|i| {
                let p = (i as f64 + 0.5) / 200.0;
                Belief::new(vec![p, 1.0 - p]).unwrap()
            })
            .collect();
        let actions: Vec<Vec<f64>> = beliefs.iter().map(|b| vec![2.0 * b.probs()[0] - b.probs()[1]]).collect();
        match BehaviorPolicy::fit_gaussian(&beliefs, &actions).unwrap() {
            BehaviorPolicy::FittedGaussian { coef, variance } => {
                assert!((coef[0] - 2.0).abs() < 1e-6 && (coef[1] + 1.0).abs() < 1e-6);
                assert_eq!(variance, vec![1e-6]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}
