//! Synthetic benchmark with a known optimal policy.
//!
//! Latent states sit on a line in observation space and emit isotropic
//! Gaussian observations. Each of the discrete actions shifts the intended
//! destination state; continuation probabilities decay with distance from
//! that destination. Episodes end in discharge (+reward), most likely at the
//! goal state, or death (−reward), more likely far from the goal. Aggressive
//! actions raise the discharge odds at the goal and the death odds elsewhere.
//! The optimal policy of the fully observed MDP is found by value iteration,
//! and datasets are logged by an ε-greedy version of it.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

use crate::agent::BehaviorPolicy;
use crate::episode_store::{Dataset, Episode, EpisodeStep, Outcome};
use crate::seed;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("need at least 2 latent states, got {0}")]
    TooFewStates(usize),
    #[error("need at least 1 action")]
    NoActions,
    #[error("epsilon must lie in [0, 1], got {0}")]
    InvalidEpsilon(f64),
    #[error("invalid generator parameter: {0}")]
    InvalidParameter(String),
}

pub type Result<T> = std::result::Result<T, SynthError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub k_true: usize,
    pub d_obs: usize,
    pub n_actions: usize,
    /// Distance between neighbouring state centroids.
    pub spacing: f64,
    /// Standard deviation of the isotropic emission noise.
    pub emission_sd: f64,
    /// Sharpness of the distance softmax over destination states.
    pub temperature: f64,
    pub gamma: f64,
    /// Discharge probability per step at the goal state.
    pub discharge_goal: f64,
    /// Death probability per step at the goal state.
    pub death_base: f64,
    /// Extra death probability per state of distance from the goal.
    pub death_slope: f64,
    /// Aggressive actions (drift of two or more states) add this death
    /// probability away from the goal...
    pub intensity_risk: f64,
    /// ...and multiply the discharge probability at the goal by `1 + intensity_bonus`.
    pub intensity_bonus: f64,
    pub reward_discharge: f64,
    pub reward_death: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            k_true: 5,
            d_obs: 2,
            n_actions: 6,
            spacing: 4.0,
            emission_sd: 0.5,
            temperature: 0.25,
            gamma: 0.8,
            discharge_goal: 0.15,
            death_base: 0.005,
            death_slope: 0.03,
            intensity_risk: 0.01,
            intensity_bonus: 0.1,
            reward_discharge: 10.0,
            reward_death: -10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub config: SynthConfig,
    pub seed: u64,
    pub goal: usize,
    pub centroids: Vec<Vec<f64>>,
    /// `[a][s][col]` over K continuation states, discharge, death.
    pub transitions: Vec<f64>,
}

impl SynthSpec {
    pub fn k(&self) -> usize {
        self.config.k_true
    }

    pub fn n_actions(&self) -> usize {
        self.config.n_actions
    }

    pub fn row(&self, a: usize, s: usize) -> &[f64] {
        let w = self.k() + 2;
        &self.transitions[(a * self.k() + s) * w..(a * self.k() + s + 1) * w]
    }

    /// Offset of the intended destination under action `a`; actions are
    /// centred so that the middle-low action stays put.
    pub fn drift(&self, a: usize) -> i64 {
        a as i64 - ((self.n_actions() as i64 - 1) / 2)
    }
}

/// Builds the generator. The seed fixes the direction of the state line.
pub fn make_spec(config: &SynthConfig, seed_value: u64) -> Result<SynthSpec> {
    let k = config.k_true;
    if k < 2 {
        return Err(SynthError::TooFewStates(k));
    }
    if config.n_actions == 0 {
        return Err(SynthError::NoActions);
    }
    if config.d_obs == 0 || !(config.temperature > 0.0) || !(config.emission_sd > 0.0) {
        return Err(SynthError::InvalidParameter(
            "d_obs, temperature and emission_sd must be positive".into(),
        ));
    }
    if !(0.0..1.0).contains(&config.gamma) {
        return Err(SynthError::InvalidParameter(format!("gamma {}", config.gamma)));
    }
    let mut rng = seed::rng(seed_value, &[0]);
    let mut dir: Vec<f64> = (0..config.d_obs).map(|_| StandardNormal.sample(&mut rng)).collect();
    let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    dir.iter_mut().for_each(|x| *x /= norm);
    let centroids: Vec<Vec<f64>> = (0..k)
        .map(|s| dir.iter().map(|d| d * s as f64 * config.spacing).collect())
        .collect();
    let goal = k / 2;

    let mut spec = SynthSpec {
        config: config.clone(),
        seed: seed_value,
        goal,
        centroids,
        transitions: Vec::with_capacity(config.n_actions * k * (k + 2)),
    };
    for a in 0..config.n_actions {
        let drift = spec.drift(a);
        for s in 0..k {
            let dest = (s as i64 + drift).clamp(0, k as i64 - 1);
            let dist_goal = (s as f64 - goal as f64).abs();
            let aggressive = drift.abs() >= 2;
            let (p_dis, mut p_death) = if s == goal {
                let boost = if aggressive { 1.0 + config.intensity_bonus } else { 1.0 };
                (config.discharge_goal * boost, config.death_base)
            } else {
                (0.0, config.death_base + config.death_slope * dist_goal)
            };
            if aggressive && s != goal {
                p_death += config.intensity_risk;
            }
            let p_cont = 1.0 - p_dis - p_death;
            if !(p_cont > 0.0) || p_death < 0.0 || p_dis < 0.0 {
                return Err(SynthError::InvalidParameter(format!(
                    "terminal probabilities exceed 1 at state {s}, action {a}"
                )));
            }
            let weights: Vec<f64> = (0..k)
                .map(|j| (-((j as i64 - dest).abs() as f64) / config.temperature).exp())
                .collect();
            let z: f64 = weights.iter().sum();
            spec.transitions.extend(weights.iter().map(|w| p_cont * w / z));
            spec.transitions.push(p_dis);
            spec.transitions.push(p_death);
        }
    }
    Ok(spec)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OraclePolicy {
    /// `[s][a]`.
    pub q_table: Vec<Vec<f64>>,
    pub pi_star: Vec<usize>,
    pub bellman_residual: f64,
}

/// Value iteration on the fully observed MDP until the value change drops below 1e-10.
pub fn solve_mdp(spec: &SynthSpec) -> OraclePolicy {
    let k = spec.k();
    let n_a = spec.n_actions();
    let gamma = spec.config.gamma;
    let (r_dis, r_death) = (spec.config.reward_discharge, spec.config.reward_death);
    let q_of = |v: &[f64]| -> Vec<Vec<f64>> {
        (0..k)
            .map(|s| {
                (0..n_a)
                    .map(|a| {
                        let row = spec.row(a, s);
                        let cont: f64 = row[..k].iter().zip(v).map(|(p, v)| p * v).sum();
                        r_dis * row[k] + r_death * row[k + 1] + gamma * cont
                    })
                    .collect()
            })
            .collect()
    };
    let max_of = |q: &[Vec<f64>]| -> Vec<f64> {
        q.iter()
            .map(|row| row.iter().copied().fold(f64::NEG_INFINITY, f64::max))
            .collect()
    };
    let mut v = vec![0.0; k];
    loop {
        let next = max_of(&q_of(&v));
        let change = next.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        v = next;
        if change < 1e-10 {
            break;
        }
    }
    let q_table = q_of(&v);
    let residual = max_of(&q_table)
        .iter()
        .zip(&v)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let pi_star = q_table
        .iter()
        .map(|row| {
            let mut best = 0;
            for (a, &q) in row.iter().enumerate() {
                if q > row[best] {
                    best = a;
                }
            }
            best
        })
        .collect();
    OraclePolicy {
        q_table,
        pi_star,
        bellman_residual: residual,
    }
}

/// ε-greedy probabilities around the optimal action of state `s`.
pub fn behavior_pmf(oracle: &OraclePolicy, n_actions: usize, s: usize, epsilon: f64) -> Vec<f64> {
    let mut pmf = vec![epsilon / n_actions as f64; n_actions];
    pmf[oracle.pi_star[s]] += 1.0 - epsilon;
    pmf
}

/// Latent trajectory and logging policy of one generated episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeTruth {
    pub id: u64,
    pub states: Vec<usize>,
    pub behavior_pmf: Vec<Vec<f64>>,
    /// Ended by the length cap rather than by discharge or death.
    pub truncated: bool,
}

/// Everything the evaluator may know that the learner may not.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub spec: SynthSpec,
    pub oracle: OraclePolicy,
    pub epsilon: f64,
    pub max_len: usize,
    pub episodes: Vec<EpisodeTruth>,
}

impl GroundTruth {
    /// Probability the logging policy gave to each recorded action.
    pub fn behavior_policy(&self, ds: &Dataset) -> BehaviorPolicy {
        let truth: BTreeMap<u64, &EpisodeTruth> = self.episodes.iter().map(|e| (e.id, e)).collect();
        let table = ds
            .episodes
            .iter()
            .filter_map(|ep| {
                let t = truth.get(&ep.id)?;
                let probs = ep
                    .steps
                    .iter()
                    .zip(&t.behavior_pmf)
                    .map(|(step, pmf)| pmf.get(step.action[0].round() as usize).copied().unwrap_or(0.0))
                    .collect();
                Some((ep.id, probs))
            })
            .collect();
        BehaviorPolicy::KnownDiscrete(table)
    }

    pub fn episode(&self, id: u64) -> Option<&EpisodeTruth> {
        self.episodes.iter().find(|e| e.id == id)
    }
}

fn sample_index<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let total: f64 = probs.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, &p) in probs.iter().enumerate() {
        if u < p {
            return i;
        }
        u -= p;
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// Generates `n_episodes` logged episodes with ids `first_id..`. Initial
/// states are uniform; actions follow the ε-greedy oracle.
pub fn generate(
    spec: &SynthSpec,
    oracle: &OraclePolicy,
    n_episodes: usize,
    epsilon: f64,
    max_len: usize,
    seed_value: u64,
    first_id: u64,
) -> Result<(Dataset, GroundTruth)> {
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(SynthError::InvalidEpsilon(epsilon));
    }
    if max_len == 0 {
        return Err(SynthError::InvalidParameter("max_len must be positive".into()));
    }
    let k = spec.k();
    let n_a = spec.n_actions();
    let sd = spec.config.emission_sd;
    let results: Vec<(Episode, EpisodeTruth)> = (0..n_episodes as u64)
        .into_par_iter()
        .map(|i| {
            let id = first_id + i;
            let mut rng = seed::rng(seed_value, &[id]);
            let mut s = rng.random_range(0..k);
            let mut steps = Vec::new();
            let mut truth = EpisodeTruth {
                id,
                states: Vec::new(),
                behavior_pmf: Vec::new(),
                truncated: false,
            };
            for t in 0..max_len {
                let obs: Vec<f64> = spec.centroids[s]
                    .iter()
                    .map(|c| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        c + sd * z
                    })
                    .collect();
                let pmf = behavior_pmf(oracle, n_a, s, epsilon);
                let a = sample_index(&pmf, &mut rng);
                let next = sample_index(spec.row(a, s), &mut rng);
                truth.states.push(s);
                truth.behavior_pmf.push(pmf);
                let (reward, is_terminal, outcome) = if next == k {
                    (spec.config.reward_discharge, true, Outcome::Discharge)
                } else if next == k + 1 {
                    (spec.config.reward_death, true, Outcome::Death)
                } else if t + 1 == max_len {
                    truth.truncated = true;
                    (0.0, true, Outcome::None)
                } else {
                    (0.0, false, Outcome::None)
                };
                steps.push(EpisodeStep {
                    obs,
                    action: vec![a as f64],
                    reward,
                    is_terminal,
                    outcome,
                });
                if is_terminal {
                    break;
                }
                s = next;
            }
            (Episode { id, steps }, truth)
        })
        .collect();
    let (episodes, truths): (Vec<Episode>, Vec<EpisodeTruth>) = results.into_iter().unzip();
    let ds = Dataset::new(episodes, spec.config.d_obs, 1);
    let gt = GroundTruth {
        spec: spec.clone(),
        oracle: oracle.clone(),
        epsilon,
        max_len,
        episodes: truths,
    };
    Ok((ds, gt))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> SynthSpec {
        make_spec(&SynthConfig::default(), 7).unwrap()
    }

    #[test]
    fn rows_are_stochastic() {
        let s = spec();
        for a in 0..s.n_actions() {
            for st in 0..s.k() {
                assert!((s.row(a, st).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn temperature_limits() {
        let cold = make_spec(
            &SynthConfig {
                temperature: 1e-3,
                ..Default::default()
            },
            1,
        )
        .unwrap();
        let row = cold.row(3, 0);
        let p_cont = 1.0 - row[5] - row[6];
        // action 3 shifts state 0 one step up
        assert!((row[1] - p_cont).abs() < 1e-12);
        assert_eq!(row[5], 0.0);
        let hot = make_spec(
            &SynthConfig {
                temperature: 1e6,
                ..Default::default()
            },
            1,
        )
        .unwrap();
        let row = hot.row(0, 4);
        for p in &row[1..5] {
            assert!((p - row[0]).abs() < 1e-5);
        }
    }

    #[test]
    fn value_iteration_converges() {
        let s = spec();
        let o = solve_mdp(&s);
        assert!(o.bellman_residual < 1e-9);
        // the goal is reached by drifting towards it
        assert_eq!(o.pi_star[s.goal], 2);
    }

    #[test]
    fn identical_actions_pick_action_zero() {
        let mut s = spec();
        let block: Vec<f64> = s.transitions[..s.k() * (s.k() + 2)].to_vec();
        s.transitions = block.repeat(s.n_actions());
        let o = solve_mdp(&s);
        assert!(o.pi_star.iter().all(|&a| a == 0));
        for row in &o.q_table {
            assert!(row.iter().all(|q| *q == row[0]));
        }
    }

    #[test]
    fn greedy_logging_follows_the_oracle() {
        let s = spec();
        let o = solve_mdp(&s);
        let (ds, gt) = generate(&s, &o, 50, 0.0, 60, 3, 0).unwrap();
        for (ep, truth) in ds.episodes.iter().zip(&gt.episodes) {
            for (step, &st) in ep.steps.iter().zip(&truth.states) {
                assert_eq!(step.action[0] as usize, o.pi_star[st]);
            }
            assert!(ep.steps.last().unwrap().is_terminal);
        }
    }

    #[test]
    fn generation_is_reproducible() {
        let s = spec();
        let o = solve_mdp(&s);
        let a = generate(&s, &o, 20, 0.3, 60, 11, 0).unwrap();
        let b = generate(&s, &o, 20, 0.3, 60, 11, 0).unwrap();
        assert_eq!(a.0.episodes, b.0.episodes);
        assert_eq!(a.1, b.1);
    }
}
