//! Evaluation on held-out episodes: per-episode deviation between logged and
//! proposed actions, deviation terciles against start-state returns,
//! bootstrapped deviation distributions per outcome cohort, and (for
//! synthetic data) agreement with the optimal policy.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::Result;
use astc_core::agent::{episode_beliefs, Agent, ProposalMode};
use astc_core::belief_model::PomdpModel;
use astc_core::episode_store::{Dataset, Episode, Outcome};
use astc_core::gmm::GmmModel;
use astc_core::seed;
use astc_core::synth_env::GroundTruth;
use rand::Rng;
use rayon::prelude::*;
use serde_json::json;

use crate::commands::{provenance_comment, write_file};
use crate::config::RunConfig;
use crate::svg::{self, Series};

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRow {
    pub id: u64,
    pub outcome: Outcome,
    pub length: usize,
    /// `γ^{T−1} r_{T−1}`.
    pub start_return: f64,
    /// Mean absolute deviation per action dimension.
    pub deviation: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRow {
    pub episode: u64,
    pub t: usize,
    pub logged: Vec<f64>,
    pub proposed: Vec<f64>,
    pub true_state: Option<usize>,
    pub optimal: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub episodes: Vec<EpisodeRow>,
    pub steps: Vec<StepRow>,
    pub d_act: usize,
    pub gamma: f64,
    pub synthetic: Option<MatchRates>,
}

/// Fraction of test steps whose action equals the optimal one.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchRates {
    /// Proposed action rounded to the nearest action index.
    pub proposed: f64,
    pub behavior: f64,
    pub n_steps: usize,
}

/// Return of the start state when only the last step is rewarded.
pub fn start_return(ep: &Episode, gamma: f64) -> f64 {
    let t = ep.steps.len();
    gamma.powi(t as i32 - 1) * ep.steps[t - 1].reward
}

/// Index of the action category nearest to `x` among `0..n`.
pub fn nearest_action(x: f64, n: usize) -> usize {
    x.round().clamp(0.0, (n - 1) as f64) as usize
}

pub fn proposal_mode(name: &str) -> ProposalMode {
    match name {
        "sample" => ProposalMode::Sample,
        "tree" => ProposalMode::Tree,
        _ => ProposalMode::Mean,
    }
}

/// Replays every test episode with its logged actions and records the
/// agent's proposal at each filtered belief. Parallel over episodes; the
/// sampling mode draws from a per-episode seed so results do not depend on
/// scheduling.
pub fn evaluate(
    cfg: &RunConfig,
    agent: &Agent,
    model: &PomdpModel,
    gmm: &GmmModel,
    test: &Dataset,
    truth: Option<&GroundTruth>,
) -> Result<Evaluation> {
    let mode = proposal_mode(&cfg.eval.proposal);
    let budget = cfg.agent_config()?.budget;
    let gamma = model.gamma;
    let per_episode: Vec<Result<(EpisodeRow, Vec<StepRow>)>> = test
        .episodes
        .par_iter()
        .map(|ep| {
            let mut rng = seed::rng(cfg.seed, &[0xe7a1, ep.id]);
            let beliefs = episode_beliefs(model, gmm, ep)?;
            let states = truth.and_then(|t| t.episode(ep.id)).map(|e| e.states.clone());
            let mut steps = Vec::with_capacity(ep.steps.len());
            let mut dev = vec![0.0; test.d_act];
            for (t, (b, step)) in beliefs.iter().zip(&ep.steps).enumerate() {
                let proposed = agent.propose_action(model, b, mode, &budget, &mut rng)?;
                for (d, (p, a)) in dev.iter_mut().zip(proposed.iter().zip(&step.action)) {
                    *d += (p - a).abs();
                }
                let true_state = states.as_ref().map(|s| s[t]);
                steps.push(StepRow {
                    episode: ep.id,
                    t,
                    logged: step.action.clone(),
                    proposed,
                    true_state,
                    optimal: true_state.and_then(|s| truth.map(|tr| tr.oracle.pi_star[s])),
                });
            }
            dev.iter_mut().for_each(|d| *d /= ep.steps.len() as f64);
            Ok((
                EpisodeRow {
                    id: ep.id,
                    outcome: ep.outcome(),
                    length: ep.steps.len(),
                    start_return: start_return(ep, gamma),
                    deviation: dev,
                },
                steps,
            ))
        })
        .collect();
    let mut episodes = Vec::with_capacity(per_episode.len());
    let mut steps = Vec::new();
    for r in per_episode {
        let (row, s) = r?;
        episodes.push(row);
        steps.extend(s);
    }
    let synthetic = truth.map(|tr| match_rates(&steps, tr.spec.n_actions()));
    Ok(Evaluation {
        episodes,
        steps,
        d_act: test.d_act,
        gamma,
        synthetic,
    })
}

pub fn match_rates(steps: &[StepRow], n_actions: usize) -> MatchRates {
    let scored: Vec<(&StepRow, usize)> = steps.iter().filter_map(|s| s.optimal.map(|o| (s, o))).collect();
    let n = scored.len().max(1) as f64;
    let proposed = scored.iter().filter(|(s, o)| nearest_action(s.proposed[0], n_actions) == *o).count() as f64 / n;
    let behavior = scored.iter().filter(|(s, o)| nearest_action(s.logged[0], n_actions) == *o).count() as f64 / n;
    MatchRates {
        proposed,
        behavior,
        n_steps: scored.len(),
    }
}

/// Equal-count split into three groups by ascending value (ties broken by
/// id): group sizes differ by at most one, even when all values coincide.
#[derive(Debug, Clone, PartialEq)]
pub struct Terciles {
    /// Group (0 = lowest values) of each input, in input order.
    pub group: Vec<usize>,
    /// Smallest value in groups 1 and 2.
    pub boundaries: [f64; 2],
}

pub fn terciles(values: &[f64], ids: &[u64]) -> Terciles {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(ids[a].cmp(&ids[b])));
    let mut group = vec![0; n];
    let mut boundaries = [f64::NAN; 2];
    for (rank, &i) in order.iter().enumerate() {
        let g = 3 * rank / n.max(1);
        group[i] = g;
        if g > 0 && boundaries[g - 1].is_nan() {
            boundaries[g - 1] = values[i];
        }
    }
    Terciles { group, boundaries }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupSummary {
    pub n: usize,
    pub mean_return: f64,
    pub discharge_rate: f64,
}

/// Per-tercile return summary along one action dimension.
pub fn tercile_summary(rows: &[EpisodeRow], dim: usize) -> (Terciles, Vec<GroupSummary>) {
    let values: Vec<f64> = rows.iter().map(|r| r.deviation[dim]).collect();
    let ids: Vec<u64> = rows.iter().map(|r| r.id).collect();
    let t = terciles(&values, &ids);
    let summaries = (0..3)
        .map(|g| {
            let members: Vec<&EpisodeRow> = rows.iter().zip(&t.group).filter(|(_, &gg)| gg == g).map(|(r, _)| r).collect();
            let n = members.len();
            let mean = |f: &dyn Fn(&EpisodeRow) -> f64| {
                if n == 0 {
                    f64::NAN
                } else {
                    members.iter().map(|r| f(r)).sum::<f64>() / n as f64
                }
            };
            GroupSummary {
                n,
                mean_return: mean(&|r| r.start_return),
                discharge_rate: mean(&|r| f64::from(u8::from(r.outcome == Outcome::Discharge))),
            }
        })
        .collect();
    (t, summaries)
}

/// Counts over `bins` equal-width bins spanning `[lo, hi]` (the last bin is
/// closed). A degenerate range is widened by 0.5 on each side.
pub fn histogram(values: &[f64], lo: f64, hi: f64, bins: usize) -> (Vec<f64>, Vec<usize>) {
    let (lo, hi) = if hi > lo { (lo, hi) } else { (lo - 0.5, hi + 0.5) };
    let width = (hi - lo) / bins as f64;
    let edges: Vec<f64> = (0..=bins).map(|i| lo + i as f64 * width).collect();
    let mut counts = vec![0; bins];
    for &v in values {
        let i = (((v - lo) / width).floor() as isize).clamp(0, bins as isize - 1) as usize;
        counts[i] += 1;
    }
    (edges, counts)
}

/// Means of `resamples` bootstrap resamples (with replacement) of `values`.
pub fn bootstrap_means<R: Rng + ?Sized>(values: &[f64], resamples: usize, rng: &mut R) -> Vec<f64> {
    if values.is_empty() {
        return Vec::new();
    }
    let n = values.len();
    (0..resamples)
        .map(|_| (0..n).map(|_| values[rng.random_range(0..n)]).sum::<f64>() / n as f64)
        .collect()
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let (i, frac) = (pos.floor() as usize, pos.fract());
    if i + 1 < sorted.len() {
        sorted[i] * (1.0 - frac) + sorted[i + 1] * frac
    } else {
        sorted[i]
    }
}

const COHORTS: [(&str, Option<Outcome>); 3] = [
    ("survivors", Some(Outcome::Discharge)),
    ("non_survivors", Some(Outcome::Death)),
    ("all", None),
];

fn join(v: &[f64]) -> String {
    v.iter().map(f64::to_string).collect::<Vec<_>>().join(",")
}

/// Writes every report file into `dir`.
pub fn write_reports(cfg: &RunConfig, eval: &Evaluation, dir: &Path) -> Result<()> {
    let head = provenance_comment(cfg);
    let d = eval.d_act;
    let rows = &eval.episodes;
    let tercs: Vec<(Terciles, Vec<GroupSummary>)> = (0..d).map(|j| tercile_summary(rows, j)).collect();

    // Per-episode table.
    let mut csv = head.clone();
    let dims = |prefix: &str| (0..d).map(|j| format!("{prefix}{j}")).collect::<Vec<_>>().join(",");
    let _ = writeln!(csv, "episode,outcome,length,start_return,{},{}", dims("deviation_"), dims("tercile_"));
    for (i, r) in rows.iter().enumerate() {
        let groups: Vec<String> = tercs.iter().map(|(t, _)| t.group[i].to_string()).collect();
        let _ = writeln!(csv, "{},{},{},{},{},{}", r.id, r.outcome, r.length, r.start_return, join(&r.deviation), groups.join(","));
    }
    write_file(&dir.join("episodes.csv"), &csv)?;

    // Tercile summaries.
    let mut csv = head.clone();
    csv.push_str("dim,boundary_low_mid,boundary_mid_high,group,n,mean_return,discharge_rate\n");
    for (j, (t, sums)) in tercs.iter().enumerate() {
        for (g, s) in sums.iter().enumerate() {
            let _ = writeln!(csv, "{j},{},{},{g},{},{},{}", t.boundaries[0], t.boundaries[1], s.n, s.mean_return, s.discharge_rate);
        }
    }
    write_file(&dir.join("terciles.csv"), &csv)?;

    // Return histograms per tercile group, over the common observed range.
    let returns: Vec<f64> = rows.iter().map(|r| r.start_return).collect();
    let lo = returns.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = returns.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let bins = cfg.eval.hist_bins;
    let mut csv = head.clone();
    csv.push_str("dim,group,bin_low,bin_high,count\n");
    let mut hist_json = Vec::new();
    for (j, (t, _)) in tercs.iter().enumerate() {
        let mut series = Vec::new();
        for g in 0..3 {
            let vals: Vec<f64> = returns.iter().zip(&t.group).filter(|(_, &gg)| gg == g).map(|(v, _)| *v).collect();
            let (edges, counts) = histogram(&vals, lo, hi, bins);
            for b in 0..bins {
                let _ = writeln!(csv, "{j},{g},{},{},{}", edges[b], edges[b + 1], counts[b]);
            }
            let total = vals.len().max(1) as f64;
            series.push(Series::steps(
                ["low deviation", "middle", "high deviation"][g],
                &edges,
                &counts.iter().map(|&c| c as f64 / total).collect::<Vec<_>>(),
            ));
            hist_json.push(json!({"dim": j, "group": g, "edges": edges, "counts": counts}));
        }
        if cfg.eval.svg && lo.is_finite() {
            let plot = svg::line_plot(&format!("Start-state return by deviation tercile (action dim {j})"), "return", "fraction", &series);
            write_file(&dir.join(format!("returns_dim{j}.svg")), &svg::with_provenance(&plot, &cfg.hash(), cfg.seed))?;
        }
    }
    write_file(&dir.join("histograms.csv"), &csv)?;

    // Bootstrapped mean deviation per outcome cohort.
    let mut csv = head.clone();
    csv.push_str("cohort,dim,resample,mean_deviation\n");
    let mut boot_json = Vec::new();
    for j in 0..d {
        let mut series = Vec::new();
        for (c, (name, outcome)) in COHORTS.iter().enumerate() {
            let vals: Vec<f64> = rows
                .iter()
                .filter(|r| outcome.is_none_or(|o| r.outcome == o))
                .map(|r| r.deviation[j])
                .collect();
            let mut rng = seed::rng(cfg.seed, &[0xb007, j as u64, c as u64]);
            let means = bootstrap_means(&vals, cfg.eval.bootstrap, &mut rng);
            for (i, m) in means.iter().enumerate() {
                let _ = writeln!(csv, "{name},{j},{i},{m}");
            }
            let mut sorted = means.clone();
            sorted.sort_by(f64::total_cmp);
            let mean = if means.is_empty() { f64::NAN } else { means.iter().sum::<f64>() / means.len() as f64 };
            let sd = if means.len() > 1 {
                (means.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / (means.len() - 1) as f64).sqrt()
            } else {
                f64::NAN
            };
            boot_json.push(json!({
                "cohort": name, "dim": j, "episodes": vals.len(), "mean": mean, "sd": sd,
                "q025": quantile(&sorted, 0.025), "q500": quantile(&sorted, 0.5), "q975": quantile(&sorted, 0.975),
            }));
            if !sorted.is_empty() {
                let (edges, counts) = histogram(&sorted, sorted[0], sorted[sorted.len() - 1], bins);
                let total = sorted.len() as f64;
                series.push(Series::steps(name, &edges, &counts.iter().map(|&c| c as f64 / total).collect::<Vec<_>>()));
            }
        }
        if cfg.eval.svg && !series.is_empty() {
            let plot = svg::line_plot(&format!("Bootstrapped mean deviation (action dim {j})"), "mean |deviation|", "fraction", &series);
            write_file(&dir.join(format!("deviation_bootstrap_dim{j}.svg")), &svg::with_provenance(&plot, &cfg.hash(), cfg.seed))?;
        }
    }
    write_file(&dir.join("bootstrap.csv"), &csv)?;

    // Per-step actions.
    let mut csv = head.clone();
    let _ = writeln!(csv, "episode,t,{},{},true_state,optimal", dims("logged_"), dims("proposed_"));
    let opt = |v: Option<usize>| v.map_or(String::new(), |x| x.to_string());
    for s in &eval.steps {
        let _ = writeln!(csv, "{},{},{},{},{},{}", s.episode, s.t, join(&s.logged), join(&s.proposed), opt(s.true_state), opt(s.optimal));
    }
    write_file(&dir.join("actions.csv"), &csv)?;
    if cfg.eval.svg && !eval.steps.is_empty() {
        let shown = &eval.steps[..eval.steps.len().min(cfg.eval.trace_steps)];
        let xs: Vec<f64> = (0..shown.len()).map(|i| i as f64).collect();
        let mut series = vec![
            Series::points("proposed", &xs, &shown.iter().map(|s| s.proposed[0]).collect::<Vec<_>>()),
            Series::points("logged", &xs, &shown.iter().map(|s| s.logged[0]).collect::<Vec<_>>()),
        ];
        if shown.iter().all(|s| s.optimal.is_some()) {
            series.insert(0, Series::points("optimal", &xs, &shown.iter().map(|s| s.optimal.unwrap() as f64).collect::<Vec<_>>()));
        }
        let plot = svg::line_plot("Actions on the first test steps (dim 0)", "step", "action", &series);
        write_file(&dir.join("actions.svg"), &svg::with_provenance(&plot, &cfg.hash(), cfg.seed))?;
    }

    let terc_json: Vec<_> = tercs
        .iter()
        .enumerate()
        .map(|(j, (t, sums))| {
            json!({
                "dim": j,
                "boundaries": t.boundaries,
                "groups": sums.iter().map(|s| json!({"n": s.n, "mean_return": s.mean_return, "discharge_rate": s.discharge_rate})).collect::<Vec<_>>(),
            })
        })
        .collect();
    let summary = json!({
        "config_hash": cfg.hash(),
        "seed": cfg.seed,
        "episodes": rows.len(),
        "steps": eval.steps.len(),
        "gamma": eval.gamma,
        "proposal": cfg.eval.proposal,
        "mean_start_return": returns.iter().sum::<f64>() / returns.len().max(1) as f64,
        "terciles": terc_json,
        "histograms": hist_json,
        "bootstrap": boot_json,
        "optimal_match": eval.synthetic.map(|m| json!({"proposed": m.proposed, "behavior": m.behavior, "steps": m.n_steps})),
    });
    write_file(&dir.join("summary.json"), &(serde_json::to_string_pretty(&summary)? + "\n"))?;
    Ok(())
}
