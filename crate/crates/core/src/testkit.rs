//! Reference fixtures and brute-force oracles for verifying the planner and
//! the belief filter on small models.
//!
//! Everything here favors obviousness over speed: models are tiny, and the
//! oracles enumerate every action/observation sequence explicitly.

use rand::Rng;

use crate::belief_model::{Belief, PomdpModel};
use crate::episode_store::{ActionBinning, DimBins};

/// One action dimension with bins at the integers `0..n`.
pub fn integer_binning(n: usize) -> ActionBinning {
    ActionBinning {
        dims: vec![DimBins {
            zero_bin: false,
            edges: (1..n).map(|i| i as f64 - 0.5).collect(),
            representatives: (0..n).map(|i| i as f64).collect(),
        }],
    }
}

fn random_simplex<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    // Normalized exponentials are uniform on the simplex.
    let w: Vec<f64> = (0..n).map(|_| -rng.random::<f64>().max(1e-300).ln()).collect();
    let z: f64 = w.iter().sum();
    w.into_iter().map(|x| x / z).collect()
}

/// A random POMDP with `k` states and cells and `n_actions` actions.
/// Each transition row puts 0–20 % of its mass on the two terminal
/// outcomes; rewards are uniform in [-1, 1].
pub fn random_model<R: Rng + ?Sized>(rng: &mut R, k: usize, n_actions: usize, gamma: f64) -> PomdpModel {
    let mut transitions = Vec::with_capacity(n_actions * k * (k + 2));
    for _ in 0..n_actions * k {
        let term = 0.2 * rng.random::<f64>();
        let split = rng.random::<f64>();
        let cont = random_simplex(rng, k);
        transitions.extend(cont.into_iter().map(|p| p * (1.0 - term)));
        transitions.push(term * split);
        transitions.push(term * (1.0 - split));
    }
    let rewards: Vec<f64> = (0..n_actions * k).map(|_| rng.random_range(-1.0..1.0)).collect();
    let channel: Vec<f64> = (0..k).flat_map(|_| random_simplex(rng, k)).collect();
    let prior = random_simplex(rng, k);
    PomdpModel::new(
        k,
        n_actions,
        transitions,
        rewards,
        channel,
        prior,
        gamma,
        (0.0, 0.0),
        integer_binning(n_actions),
    )
    .expect("random model is well-formed")
}

/// A uniformly random belief over `k` states.
pub fn random_belief<R: Rng + ?Sized>(rng: &mut R, k: usize) -> Belief {
    Belief::new(random_simplex(rng, k)).expect("simplex sample")
}

/// Parameters of the two-door fixture.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TigerSpec {
    /// Probability that listening reports the true side.
    pub accuracy: f64,
    pub listen_cost: f64,
    pub reward_correct: f64,
    pub reward_wrong: f64,
    pub gamma: f64,
}

impl Default for TigerSpec {
    fn default() -> Self {
        TigerSpec {
            accuracy: 0.85,
            listen_cost: 1.0,
            reward_correct: 10.0,
            reward_wrong: -100.0,
            gamma: 0.95,
        }
    }
}

/// Tiger-style fixture. State 0 = danger behind the left door, state 1 =
/// danger behind the right door. Action 0 listens (state unchanged, noisy
/// cell report), action 1 opens the left door, action 2 opens the right door.
/// Opening ends the episode: the safe door leads to the good terminal, the
/// dangerous door to the bad one.
pub fn tiger(spec: &TigerSpec) -> PomdpModel {
    let k = 2;
    let mut transitions = Vec::new();
    // Listen: stay.
    transitions.extend([1.0, 0.0, 0.0, 0.0]);
    transitions.extend([0.0, 1.0, 0.0, 0.0]);
    // Open left: safe when the danger is on the right.
    transitions.extend([0.0, 0.0, 0.0, 1.0]);
    transitions.extend([0.0, 0.0, 1.0, 0.0]);
    // Open right: safe when the danger is on the left.
    transitions.extend([0.0, 0.0, 1.0, 0.0]);
    transitions.extend([0.0, 0.0, 0.0, 1.0]);
    let rewards = vec![
        -spec.listen_cost,
        -spec.listen_cost,
        spec.reward_wrong,
        spec.reward_correct,
        spec.reward_correct,
        spec.reward_wrong,
    ];
    let q = spec.accuracy;
    let channel = vec![q, 1.0 - q, 1.0 - q, q];
    PomdpModel::new(
        k,
        3,
        transitions,
        rewards,
        channel,
        vec![0.5, 0.5],
        spec.gamma,
        (spec.reward_correct, spec.reward_wrong),
        integer_binning(3),
    )
    .expect("tiger fixture is well-formed")
}

/// Exact optimal action for the Tiger fixture at `P(state 0) = p_left`,
/// with the margin between the best and second-best action values.
///
/// Listening only moves the log-odds by multiples of `ln(q/(1-q))`, so the
/// reachable beliefs form a one-dimensional lattice. Value iteration on a
/// wide truncation of that lattice (edges pinned to the best opening value,
/// which is optimal once the belief is that certain) is exact to 1e-12.
pub fn tiger_oracle(spec: &TigerSpec, p_left: f64) -> (usize, f64) {
    let q = spec.accuracy;
    let step = (q / (1.0 - q)).ln();
    let base = (p_left / (1.0 - p_left)).ln();
    let half = 200i64;
    let n = (2 * half + 1) as usize;
    let prob = |i: usize| -> f64 {
        let z = base + (i as i64 - half) as f64 * step;
        1.0 / (1.0 + (-z).exp())
    };
    let open = |p: f64| -> [f64; 2] {
        [
            p * spec.reward_wrong + (1.0 - p) * spec.reward_correct,
            p * spec.reward_correct + (1.0 - p) * spec.reward_wrong,
        ]
    };
    let q_values = |v: &[f64], i: usize| -> [f64; 3] {
        let p = prob(i);
        let [ol, or] = open(p);
        let listen = if i == 0 || i == n - 1 {
            f64::NEG_INFINITY
        } else {
            // Cell 0 ("left") is reported with probability p·q + (1-p)(1-q)
            // and raises the log-odds of state 0 by one lattice step.
            let p0 = p * q + (1.0 - p) * (1.0 - q);
            -spec.listen_cost + spec.gamma * (p0 * v[i + 1] + (1.0 - p0) * v[i - 1])
        };
        [listen, ol, or]
    };
    let mut v: Vec<f64> = (0..n).map(|i| open(prob(i)).into_iter().fold(f64::NEG_INFINITY, f64::max)).collect();
    loop {
        let next: Vec<f64> = (0..n)
            .map(|i| q_values(&v, i).into_iter().fold(f64::NEG_INFINITY, f64::max))
            .collect();
        let change = next.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        v = next;
        if change < 1e-13 {
            break;
        }
    }
    let qs = q_values(&v, half as usize);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| qs[b].total_cmp(&qs[a]).then(a.cmp(&b)));
    (order[0], qs[order[0]] - qs[order[1]])
}

/// Finite-horizon expectimax over actions and observation cells, starting
/// from an unnormalized belief mass. Leaves at `depth` 0 are valued
/// linearly with `tail`; terminal outcomes are worth nothing beyond the
/// rewards already collected.
pub fn expectimax_mass(model: &PomdpModel, mass: &[f64], depth: usize, tail: &[f64]) -> f64 {
    let k = model.k;
    if depth == 0 {
        return mass.iter().zip(tail).map(|(m, w)| m * w).sum();
    }
    (0..model.n_actions)
        .map(|a| {
            let reward: f64 = (0..k).map(|s| mass[s] * model.reward(a, s)).sum();
            let mut pred = vec![0.0; k];
            for (s, ms) in mass.iter().enumerate() {
                for (sn, p) in pred.iter_mut().enumerate() {
                    *p += ms * model.transition_row(a, s)[sn];
                }
            }
            let future: f64 = (0..k)
                .map(|cell| {
                    let next: Vec<f64> = (0..k).map(|sn| pred[sn] * model.channel_prob(sn, cell)).collect();
                    if next.iter().sum::<f64>() > 0.0 {
                        expectimax_mass(model, &next, depth - 1, tail)
                    } else {
                        0.0
                    }
                })
                .sum();
            reward + model.gamma * future
        })
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Interval `[lo, hi]` containing the optimal value of `b`, from
/// depth-`depth` expectimax with constant leaf values `tail_lower` and
/// `tail_upper` (which must themselves bound every belief value).
pub fn value_bracket(model: &PomdpModel, b: &Belief, depth: usize, tail_lower: f64, tail_upper: f64) -> (f64, f64) {
    let k = model.k;
    let lo = expectimax_mass(model, b.probs(), depth, &vec![tail_lower; k]);
    let hi = expectimax_mass(model, b.probs(), depth, &vec![tail_upper; k]);
    (lo, hi)
}
