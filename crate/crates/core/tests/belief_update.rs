//! Belief filtering against a direct Bayes-rule implementation.

use astc_core::belief_model::{Belief, PomdpModel};
use astc_core::testkit::{random_belief, random_model};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `b'(s') ∝ Ω(cell | s') Σ_s T(s' | s, a) b(s)`, written out with plain loops.
fn bayes(model: &PomdpModel, b: &Belief, a: usize, cell: usize) -> (Vec<f64>, f64) {
    let k = model.k;
    let mut joint = vec![0.0; k];
    for s_next in 0..k {
        let mut mass = 0.0;
        for s in 0..k {
            mass += model.transition_row(a, s)[s_next] * b.probs()[s];
        }
        joint[s_next] = model.channel_prob(s_next, cell) * mass;
    }
    let z: f64 = joint.iter().sum();
    (joint.iter().map(|j| j / z).collect(), z)
}

#[test]
fn cell_update_matches_bayes_rule_on_random_models() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..1000 {
        let k = rng.random_range(2..=6);
        let n_actions = rng.random_range(1..=4);
        let model = random_model(&mut rng, k, n_actions, 0.9);
        let b = random_belief(&mut rng, k);
        let a = rng.random_range(0..n_actions);
        let cell = rng.random_range(0..k);
        let (expected, z) = bayes(&model, &b, a, cell);
        let (got, p) = model.belief_update_cell(&b, a, cell).unwrap();
        assert!((p - z).abs() < 1e-12);
        for (g, e) in got.probs().iter().zip(&expected) {
            assert!((g - e).abs() < 1e-12, "{g} vs {e}");
        }
    }
}

#[test]
fn branch_and_terminal_mass_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..1000 {
        let k = rng.random_range(2..=6);
        let model = random_model(&mut rng, k, 3, 0.9);
        let b = random_belief(&mut rng, k);
        let a = rng.random_range(0..3);
        let cells: f64 = model.branches(&b, a).iter().map(|br| br.prob).sum();
        let (dis, death) = model.termination(&b, a);
        assert!((cells + dis + death - 1.0).abs() < 1e-9);
    }
}

proptest! {
    #[test]
    fn updated_beliefs_are_distributions(seed in any::<u64>(), k in 2usize..6, a in 0usize..3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = random_model(&mut rng, k, 3, 0.9);
        let b = random_belief(&mut rng, k);
        for br in model.branches(&b, a) {
            if br.prob > 0.0 {
                let (nb, p) = model.belief_update_cell(&b, a, br.cell).unwrap();
                prop_assert!((p - br.prob).abs() < 1e-12);
                prop_assert!((nb.probs().iter().sum::<f64>() - 1.0).abs() < 1e-12);
                prop_assert!(nb.probs().iter().all(|x| *x >= 0.0));
            }
        }
    }

    #[test]
    fn uninformative_ratio_gives_normalized_prediction(seed in any::<u64>(), k in 2usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = random_model(&mut rng, k, 2, 0.9);
        let b = random_belief(&mut rng, k);
        let (nb, cont) = model.update_with_ratio(&b, 1, &vec![1.0; k]);
        let pred = model.predict(&b, 1);
        let nb = nb.unwrap();
        for (x, p) in nb.probs().iter().zip(&pred) {
            prop_assert!((x - p / cont).abs() < 1e-12);
        }
    }
}
