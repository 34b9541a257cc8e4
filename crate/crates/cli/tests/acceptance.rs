//! Acceptance checks. Prints one `PASS`/`FAIL` line per criterion and fails
//! if any criterion fails. Criteria 7, 8 and 10 drive the full pipeline
//! (generate, fit, train, evaluate) through the library commands.

use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use astc_cli::commands::{self, load_agent, load_gmm, load_model, load_normalization, load_splits, load_truth};
use astc_cli::config::RunConfig;
use astc_cli::report::{self, start_return, tercile_summary, EpisodeRow};
use astc_core::agent::{episode_beliefs, ActorParams, CriticParams};
use astc_core::belief_model::{gem_proportions, map_row, Belief, PomdpModel};
use astc_core::bounded_tree::{search, SearchBudget, SearchTree};
use astc_core::episode_store::{apply_normalization, Episode, EpisodeStep, Outcome};
use astc_core::gmm::{fit_em_traced, select_k_bic, BicConfig, EmConfig};
use astc_core::testkit::{random_belief, random_model, tiger, tiger_oracle, value_bracket, TigerSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

/// `b'(s') ∝ Ω(cell | s') Σ_s T(s' | s, a) b(s)` with plain loops.
fn bayes(model: &PomdpModel, b: &Belief, a: usize, cell: usize) -> (Vec<f64>, f64) {
    let k = model.k;
    let joint: Vec<f64> = (0..k)
        .map(|sn| model.channel_prob(sn, cell) * (0..k).map(|s| model.transition_row(a, s)[sn] * b.probs()[s]).sum::<f64>())
        .collect();
    let z: f64 = joint.iter().sum();
    (joint.iter().map(|j| j / z).collect(), z)
}

fn belief_update_oracle() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut max_err, mut max_mass_err) = (0.0f64, 0.0f64);
    let mut failures = 0;
    for _ in 0..1000 {
        let k = rng.random_range(2..=6);
        let n_actions = rng.random_range(1..=4);
        let model = random_model(&mut rng, k, n_actions, 0.9);
        let b = random_belief(&mut rng, k);
        let a = rng.random_range(0..n_actions);
        let cell = rng.random_range(0..k);
        let (expected, z) = bayes(&model, &b, a, cell);
        match model.belief_update_cell(&b, a, cell) {
            Ok((got, p)) => {
                max_err = max_err.max((p - z).abs());
                for (g, e) in got.probs().iter().zip(&expected) {
                    max_err = max_err.max((g - e).abs());
                }
            }
            Err(_) => failures += 1,
        }
        let cells: f64 = model.branches(&b, a).iter().map(|br| br.prob).sum();
        let (dis, death) = model.termination(&b, a);
        max_mass_err = max_mass_err.max((cells + dis + death - 1.0).abs());
    }
    verdict(
        failures == 0 && max_err < 1e-12 && max_mass_err < 1e-9,
        format!("max update error {max_err:.1e}, max branch-mass error {max_mass_err:.1e}, {failures} update failures"),
    )
}

fn bound_validity() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let tol = 1e-9;
    let (mut violations, mut gap_rises, mut checks) = (0, 0, 0);
    for _ in 0..50 {
        let k = rng.random_range(2..=3);
        let n_actions = rng.random_range(2..=3);
        let gamma = rng.random_range(0.5..0.9);
        let model = random_model(&mut rng, k, n_actions, gamma);
        let critic = CriticParams::safe_bounds(&model);
        let (l0, u0) = (critic.w_lower[0], critic.w_upper[0]);
        let mut tree = SearchTree::new(&model, critic.leaf(), random_belief(&mut rng, k), 1e-4).unwrap();
        let mut brackets: Vec<(f64, f64)> = Vec::new();
        for _ in 0..30 {
            while brackets.len() < tree.nodes().len() {
                brackets.push(value_bracket(&model, &tree.nodes()[brackets.len()].belief, 4, l0, u0));
            }
            for (node, (lo, hi)) in tree.nodes().iter().zip(&brackets) {
                checks += 1;
                if node.lower > hi + tol || node.upper < lo - tol || node.lower > node.upper + tol {
                    violations += 1;
                }
            }
            if !tree.step() {
                break;
            }
        }
        gap_rises += tree.result().root_gap_history.windows(2).filter(|w| w[1] > w[0] + 1e-12).count();
    }
    verdict(
        violations == 0 && gap_rises == 0,
        format!("{violations} bound violations in {checks} node checks, {gap_rises} root-gap increases"),
    )
}

fn tiger_optimality() -> Verdict {
    let spec = TigerSpec::default();
    let model = tiger(&spec);
    let critic = CriticParams::model_bounds(&model);
    let budget = SearchBudget {
        max_expansions: 200,
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut checked, mut agree) = (0, 0);
    while checked < 20 {
        let p = rng.random_range(0.0..1.0);
        let (oracle, margin) = tiger_oracle(&spec, p);
        // A belief on a decision boundary has no unique best action.
        if margin < 1e-3 {
            continue;
        }
        let r = search(&model, critic.leaf(), Belief::new(vec![p, 1.0 - p]).unwrap(), &budget).unwrap().0;
        agree += usize::from(r.best_root_action_bin == oracle);
        checked += 1;
    }
    verdict(agree == checked, format!("{agree}/{checked} root beliefs match the exact action"))
}

fn gradient_check() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let h = 1e-5;
    let mut max_err = 0.0f64;
    for _ in 0..100 {
        let k = rng.random_range(1..=5);
        let d = rng.random_range(1..=3);
        let u = (0..k * d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let actor = ActorParams::new(k, d, u, rng.random_range(0.2..2.0)).unwrap();
        let b = random_belief(&mut rng, k);
        let a: Vec<f64> = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
        let score = actor.score(&b, &a);
        for (i, s) in score.iter().enumerate() {
            let (mut plus, mut minus) = (actor.clone(), actor.clone());
            plus.u[i] += h;
            minus.u[i] -= h;
            let fd = (plus.log_density(&b, &a) - minus.log_density(&b, &a)) / (2.0 * h);
            max_err = max_err.max((fd - s).abs());
        }
    }
    verdict(max_err < 1e-6, format!("max |score - finite difference| {max_err:.1e}"))
}

fn separated_mixture(k: usize, n: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 1.0).unwrap();
    (0..n)
        .map(|_| {
            let angle = rng.random_range(0..k) as f64 * std::f64::consts::TAU / k as f64;
            vec![8.0 * angle.cos() + noise.sample(&mut rng), 8.0 * angle.sin() + noise.sample(&mut rng)]
        })
        .collect()
}

fn em_and_bic() -> Verdict {
    let mut worst_drop = 0.0f64;
    for seed in 0..10 {
        let obs = separated_mixture(5, 2000, 500 + seed);
        for k in [2, 5, 7] {
            let (_, traces) = fit_em_traced(&obs, k, seed, &EmConfig::default()).unwrap();
            for w in traces.iter().flat_map(|t| t.windows(2)) {
                worst_drop = worst_drop.min(w[1] - w[0]);
            }
        }
    }
    let mut picks = Vec::new();
    for seed in 0..10 {
        let obs = separated_mixture(5, 10_000, 600 + seed);
        let cfg = BicConfig {
            seed,
            ..Default::default()
        };
        picks.push(select_k_bic(&obs, 2..=8, &cfg).unwrap().selected_k);
    }
    let hits = picks.iter().filter(|k| (4..=6).contains(*k)).count();
    verdict(
        worst_drop >= -1e-7 && hits >= 8,
        format!("worst log-likelihood change {worst_drop:.1e}; BIC picks {picks:?} ({hits}/10 within 4..=6)"),
    )
}

fn gem_and_map() -> Verdict {
    let gem = gem_proportions(0.0, 1.0, 4).unwrap();
    let map = map_row(&[8.0, 2.0], &[0.5, 0.5], 2.0);
    let limit = map_row(&[3.0, 1.0, 0.0, 6.0], &[0.25; 4], 1e-8);
    let limit_err = limit.iter().zip([0.3, 0.1, 0.0, 0.6]).map(|(p, e)| (p - e).abs()).fold(0.0, f64::max);
    verdict(
        gem == [0.5, 0.25, 0.125, 0.125] && map == [0.75, 0.25] && limit_err < 1e-6,
        format!("GEM {gem:?}, MAP {map:?}, small-concentration error {limit_err:.1e}"),
    )
}

fn synthetic_config(seed: u64, epsilon: f64, out: &Path) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.seed = seed;
    cfg.paths.out_dir = out.to_path_buf();
    cfg.synth.spec_seed = 7;
    cfg.synth.n_train = 2000;
    cfg.synth.n_test = 200;
    cfg.synth.epsilon = epsilon;
    cfg.gmm.k = Some(5);
    cfg.agent.epochs = 3;
    cfg.eval.svg = false;
    cfg
}

fn run_pipeline(cfg: &RunConfig) {
    commands::synth_gen(cfg).unwrap();
    commands::fit_gmm(cfg).unwrap();
    commands::fit_model(cfg).unwrap();
    commands::train(cfg, None).unwrap();
}

/// Match rates with the optimal policy: (trained, behavior).
fn match_rates(cfg: &RunConfig) -> report::MatchRates {
    let (_, test) = load_splits(cfg).unwrap();
    let test = apply_normalization(&test, &load_normalization(cfg).unwrap());
    let truth = load_truth(&cfg.test_dataset_path().unwrap()).unwrap();
    let agent = load_agent(&cfg.out("agent.txt")).unwrap();
    let (model, _) = load_model(&cfg.out("model.txt")).unwrap();
    let gmm = load_gmm(cfg).unwrap();
    report::evaluate(cfg, &agent, &model, &gmm, &test, Some(&truth)).unwrap().synthetic.unwrap()
}

fn off_policy_recovery() -> Verdict {
    let closed_form = 0.7 + 0.3 / 6.0;
    let mut rates = Vec::new();
    for seed in 1..=5 {
        let dir = tempfile::tempdir().unwrap();
        let cfg = synthetic_config(seed, 0.3, dir.path());
        run_pipeline(&cfg);
        rates.push(match_rates(&cfg));
    }
    let wins = rates.iter().filter(|r| r.proposed >= closed_form + 0.05).count();
    let shown: Vec<String> = rates.iter().map(|r| format!("{:.3}/{:.3}", r.proposed, r.behavior)).collect();
    verdict(
        wins >= 4,
        format!("trained/behavior match per seed {shown:?}; {wins}/5 seeds beat {closed_form:.2} by 0.05"),
    )
}

fn behavior_invariance() -> Verdict {
    let mut lines = Vec::new();
    let mut pass = true;
    for seed in 1..=3 {
        let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
        let cfgs: Vec<RunConfig> = [0.2, 0.4].iter().zip(&dirs).map(|(&e, d)| synthetic_config(seed, e, d.path())).collect();
        cfgs.iter().for_each(run_pipeline);
        // One fixed set of raw test episodes, filtered by each run's own model.
        let (_, test) = load_splits(&cfgs[0]).unwrap();
        let truth = load_truth(&cfgs[0].test_dataset_path().unwrap()).unwrap();
        let n_actions = truth.spec.n_actions();
        let proposals: Vec<Vec<f64>> = cfgs
            .iter()
            .map(|cfg| {
                let test = apply_normalization(&test, &load_normalization(cfg).unwrap());
                let agent = load_agent(&cfg.out("agent.txt")).unwrap();
                let (model, _) = load_model(&cfg.out("model.txt")).unwrap();
                let gmm = load_gmm(cfg).unwrap();
                test.episodes
                    .iter()
                    .flat_map(|ep| episode_beliefs(&model, &gmm, ep).unwrap())
                    .map(|b| agent.actor.mean(&b)[0])
                    .collect()
            })
            .collect();
        let states: Vec<usize> = test.episodes.iter().flat_map(|ep| truth.episode(ep.id).unwrap().states.clone()).collect();
        let mean_abs = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64;
        let between = mean_abs(&proposals[0], &proposals[1]);
        let to_behavior: Vec<f64> = [0.2, 0.4]
            .iter()
            .zip(&proposals)
            .map(|(&eps, p)| {
                let expected: Vec<f64> = states
                    .iter()
                    .map(|&s| {
                        let pmf = astc_core::synth_env::behavior_pmf(&truth.oracle, n_actions, s, eps);
                        pmf.iter().enumerate().map(|(a, q)| a as f64 * q).sum()
                    })
                    .collect();
                mean_abs(p, &expected)
            })
            .collect();
        let ok = to_behavior.iter().all(|&d| between < d);
        pass &= ok;
        lines.push(format!(
            "seed {seed}: between {between:.3} vs to-behavior {:.3}/{:.3}",
            to_behavior[0], to_behavior[1]
        ));
    }
    verdict(pass, lines.join("; "))
}

fn evaluation_protocol() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let gamma = 0.99;
    let step = |a: f64, r: f64, outcome: Outcome| EpisodeStep {
        obs: vec![0.0],
        action: vec![a],
        reward: r,
        is_terminal: outcome != Outcome::None,
        outcome,
    };
    // Deviation from a zero proposal is the mean |logged action|; episodes
    // below the median deviation are discharged, the rest die.
    let rows: Vec<EpisodeRow> = (0..90u64)
        .map(|id| {
            let len = rng.random_range(1..=20);
            let scale = rng.random_range(0.0..3.0);
            let low = scale < 1.5;
            let (r, o) = if low { (10.0, Outcome::Discharge) } else { (-10.0, Outcome::Death) };
            let mut steps: Vec<EpisodeStep> =
                (0..len - 1).map(|_| step(scale * rng.random_range(0.5..1.5), 0.0, Outcome::None)).collect();
            steps.push(step(scale * rng.random_range(0.5..1.5), r, o));
            let ep = Episode { id, steps };
            let dev = ep.steps.iter().map(|s| s.action[0].abs()).sum::<f64>() / ep.steps.len() as f64;
            EpisodeRow {
                id,
                outcome: ep.outcome(),
                length: ep.steps.len(),
                start_return: start_return(&ep, gamma),
                deviation: vec![dev],
            }
        })
        .collect();
    let (_, groups) = tercile_summary(&rows, 0);
    let means: Vec<f64> = groups.iter().map(|g| g.mean_return).collect();
    let ordered = means[0] > means[1] && means[0] > means[2];
    let spot = Episode {
        id: 0,
        steps: vec![step(0.0, 0.0, Outcome::None), step(0.0, 0.0, Outcome::None), step(0.0, 10.0, Outcome::Discharge)],
    };
    let g0 = start_return(&spot, 0.99);
    verdict(
        ordered && (g0 - 9.801).abs() < 1e-12,
        format!("tercile mean returns {means:.3?}; G0 spot check {g0}"),
    )
}

fn read_tree(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn reproducibility() -> Verdict {
    let runs: Vec<Vec<(String, Vec<u8>)>> = (0..2)
        .map(|_| {
            let dir = tempfile::tempdir().unwrap();
            let mut cfg = synthetic_config(11, 0.3, dir.path());
            cfg.synth.n_train = 300;
            cfg.synth.n_test = 60;
            cfg.gmm.k = None;
            cfg.gmm.k_max = 6;
            cfg.eval.svg = true;
            cfg.eval.proposal = "sample".into();
            run_pipeline(&cfg);
            commands::evaluate(&cfg, None).unwrap();
            read_tree(dir.path())
        })
        .collect();
    let differing: Vec<&String> = runs[0].iter().zip(&runs[1]).filter(|(a, b)| a != b).map(|(a, _)| &a.0).collect();
    let same_files = runs[0].len() == runs[1].len() && runs[0].iter().zip(&runs[1]).all(|(a, b)| a.0 == b.0);
    verdict(
        same_files && differing.is_empty(),
        format!("{} files compared, differing: {differing:?}", runs[0].len()),
    )
}

#[test]
fn acceptance() {
    type Check = fn() -> Verdict;
    let criteria: [(&str, Check, Duration); 10] = [
        ("belief update oracle", belief_update_oracle, Duration::from_secs(5)),
        ("bound validity", bound_validity, Duration::from_secs(120)),
        ("planner optimality on the two-door fixture", tiger_optimality, Duration::from_secs(30)),
        ("score gradient", gradient_check, Duration::from_secs(1)),
        ("EM monotonicity and BIC selection", em_and_bic, Duration::from_secs(120)),
        ("GEM and MAP reference values", gem_and_map, Duration::MAX),
        ("off-policy recovery", off_policy_recovery, Duration::from_secs(1800)),
        ("behavior invariance", behavior_invariance, Duration::MAX),
        ("evaluation protocol", evaluation_protocol, Duration::MAX),
        ("reproducibility", reproducibility, Duration::MAX),
    ];
    let mut failed = Vec::new();
    for (i, (name, check, limit)) in criteria.iter().enumerate() {
        let started = Instant::now();
        let r = check();
        let elapsed = started.elapsed();
        let in_time = elapsed <= *limit;
        let pass = r.pass && in_time;
        let limit_note = if *limit == Duration::MAX { String::new() } else { format!(" (limit {} s)", limit.as_secs()) };
        println!(
            "{} {:>2} {name}: {} [{:.1} s{limit_note}]",
            if pass { "PASS" } else { "FAIL" },
            i + 1,
            r.detail,
            elapsed.as_secs_f64()
        );
        if !pass {
            failed.push(i + 1);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
