//! The subcommands. Each one reads its inputs from files named in the
//! configuration and writes its artifacts into the output directory.
//!
//! Artifacts (relative to `paths.out_dir`):
//!
//! | command     | writes                                                           |
//! |-------------|------------------------------------------------------------------|
//! | `synth-gen` | `train.episodes`, `test.episodes`, `*.truth.json`                |
//! | `fit-gmm`   | `normalization.txt`, `bic.csv` (when K is selected), `gmm.txt`  |
//! | `fit-model` | `model.txt`                                                      |
//! | `train`     | `checkpoints/epoch_NNN.txt`, `agent.txt`, `metrics.csv`          |
//! | `evaluate`  | `report/` (CSV tables, `summary.json`, SVG plots)                |
//!
//! Every command also records its effective configuration (without the
//! machine-specific paths) in `configs/<command>.toml`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use astc_core::agent::{episode_beliefs, Agent, BehaviorPolicy, CriticParams};
use astc_core::belief_model::{fit_transitions, Belief, PomdpModel};
use astc_core::bounded_tree::{search, SearchBudget};
use astc_core::episode_store::{
    apply_normalization, fit_action_bins, load_dataset, normalize, save_dataset, split, Dataset, NormalizationBounds,
    SchemaConfig,
};
use astc_core::gmm::{fit_em, select_k_bic, GmmModel};
use astc_core::seed;
use astc_core::synth_env::{generate, make_spec, solve_mdp, GroundTruth};
use astc_core::textfmt::Provenance;
use log::info;
use serde::{Deserialize, Serialize};

use crate::config::{Mode, RunConfig};
use crate::report;
use crate::UsageError;

/// Episode ids of the synthetic test set start here, so they never collide
/// with training ids.
pub const TEST_ID_OFFSET: u64 = 1_000_000;

pub fn provenance(cfg: &RunConfig) -> Provenance {
    Provenance::new(cfg.hash(), cfg.seed)
}

/// `# config_hash=<h> seed=<s>` comment line for CSV outputs.
pub fn provenance_comment(cfg: &RunConfig) -> String {
    format!("# config_hash={} seed={}\n", cfg.hash(), cfg.seed)
}

pub fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).with_context(|| format!("cannot create `{}`", dir.display()))?;
    }
    std::fs::write(path, contents).with_context(|| format!("cannot write `{}`", path.display()))
}

/// Writes the effective configuration of `command` into the output
/// directory. Paths are left out so that identical runs in different
/// directories produce identical files.
pub fn record_config(cfg: &RunConfig, command: &str) -> Result<()> {
    let mut value = toml::Table::try_from(cfg)?;
    value.remove("paths");
    let text = provenance_comment(cfg) + &toml::to_string(&value)?;
    write_file(&cfg.out("configs").join(format!("{command}.toml")), &text)
}

/// Reads an input file; a missing file is an invocation problem (wrong path
/// or a pipeline stage not yet run), reported as a usage error.
pub fn read_input(path: &Path, what: &str) -> Result<String> {
    if !path.exists() {
        return Err(UsageError(format!("{what} `{}` not found", path.display())).into());
    }
    std::fs::read_to_string(path).with_context(|| format!("cannot read {what} `{}`", path.display()))
}

/// Ground-truth sidecar next to a synthetic episode file.
pub fn truth_path(dataset: &Path) -> PathBuf {
    dataset.with_extension("truth.json")
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TruthFile {
    pub config_hash: String,
    pub seed: u64,
    pub truth: GroundTruth,
}

pub fn load_truth(dataset: &Path) -> Result<GroundTruth> {
    let path = truth_path(dataset);
    let text = read_input(&path, "ground-truth file")?;
    let file: TruthFile = serde_json::from_str(&text).with_context(|| format!("malformed `{}`", path.display()))?;
    Ok(file.truth)
}

fn schema(cfg: &RunConfig) -> SchemaConfig {
    SchemaConfig {
        dims: None,
        terminal_reward_magnitude: cfg.data.terminal_reward_magnitude,
    }
}

fn load_episodes(path: &Path, cfg: &RunConfig) -> Result<Dataset> {
    read_input(path, "dataset")?;
    load_dataset(path, &schema(cfg)).with_context(|| format!("loading `{}`", path.display()))
}

/// Raw development and test sets.
pub fn load_splits(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    let dev = load_episodes(&cfg.dataset_path(), cfg)?;
    match cfg.test_dataset_path() {
        Some(p) => Ok((dev, load_episodes(&p, cfg)?)),
        None => Ok(split(&dev, cfg.data.split_ratio, cfg.seed)?),
    }
}

pub fn synth_gen(cfg: &RunConfig) -> Result<()> {
    if cfg.mode != Mode::Synthetic {
        bail!(UsageError("synth-gen needs mode = \"synthetic\"".into()));
    }
    record_config(cfg, "synth-gen")?;
    let spec = make_spec(&cfg.synth_env, cfg.synth.spec_seed)?;
    let oracle = solve_mdp(&spec);
    info!("optimal policy {:?} (Bellman residual {:e})", oracle.pi_star, oracle.bellman_residual);
    let s = &cfg.synth;
    let comments = [format!("config_hash={} seed={}", cfg.hash(), cfg.seed)];
    let train_path = cfg.dataset_path();
    let test_path = cfg.test_dataset_path().expect("synthetic mode always has a test path");
    for (path, n, seed_path, first_id) in [
        (&train_path, s.n_train, 1u64, 0u64),
        (&test_path, s.n_test, 2, TEST_ID_OFFSET),
    ] {
        let (ds, truth) = generate(&spec, &oracle, n, s.epsilon, s.max_len, seed::derive(cfg.seed, &[seed_path]), first_id)?;
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        save_dataset(&ds, path, &comments)?;
        let file = TruthFile {
            config_hash: cfg.hash(),
            seed: cfg.seed,
            truth,
        };
        write_file(&truth_path(path), &serde_json::to_string(&file)?)?;
        info!("wrote {} episodes ({} steps) to {}", ds.episodes.len(), ds.n_steps(), path.display());
    }
    Ok(())
}

pub fn load_normalization(cfg: &RunConfig) -> Result<NormalizationBounds> {
    let text = read_input(&cfg.out("normalization.txt"), "normalization file")?;
    Ok(NormalizationBounds::from_text(&text)?.0)
}

pub fn load_gmm(cfg: &RunConfig) -> Result<GmmModel> {
    let text = read_input(&cfg.out("gmm.txt"), "mixture model")?;
    Ok(GmmModel::from_text(&text)?.0)
}

pub fn load_model(path: &Path) -> Result<(PomdpModel, Provenance)> {
    let text = read_input(path, "POMDP model")?;
    Ok(PomdpModel::from_text(&text)?)
}

pub fn fit_gmm(cfg: &RunConfig) -> Result<()> {
    record_config(cfg, "fit-gmm")?;
    let (dev, _) = load_splits(cfg)?;
    let (dev, bounds) = normalize(&dev);
    let prov = provenance(cfg);
    write_file(&cfg.out("normalization.txt"), &bounds.to_text(&prov))?;
    let obs = dev.observations();
    let k = match cfg.gmm.k {
        Some(k) => k,
        None => {
            let report = select_k_bic(&obs, cfg.gmm.k_min..=cfg.gmm.k_max, &cfg.gmm.bic(cfg.seed)?)?;
            write_file(&cfg.out("bic.csv"), &(provenance_comment(cfg) + &report.to_csv()))?;
            info!("BIC selected K = {}", report.selected_k);
            report.selected_k
        }
    };
    let gmm = fit_em(&obs, k, cfg.seed, &cfg.gmm.em()?)?;
    write_file(&cfg.out("gmm.txt"), &gmm.to_text(&prov))?;
    Ok(())
}

/// Development set normalized with the stored bounds.
fn normalized_dev(cfg: &RunConfig, bounds: &NormalizationBounds) -> Result<Dataset> {
    let (dev, _) = load_splits(cfg)?;
    Ok(apply_normalization(&dev, bounds))
}

pub fn fit_model(cfg: &RunConfig) -> Result<()> {
    record_config(cfg, "fit-model")?;
    let bounds = load_normalization(cfg)?;
    let gmm = load_gmm(cfg)?;
    let dev = normalized_dev(cfg, &bounds)?;
    let (n_bins, zero_bin) = cfg.action_bins();
    let bins = fit_action_bins(&dev, n_bins, zero_bin)?;
    let model = fit_transitions(&dev, &gmm, &bins, &cfg.model_config()?)?;
    write_file(&cfg.out("model.txt"), &model.to_text(&provenance(cfg)))?;
    Ok(())
}

fn behavior_policy(cfg: &RunConfig, dev: &Dataset, model: &PomdpModel, gmm: &GmmModel) -> Result<BehaviorPolicy> {
    match cfg.mode {
        Mode::Synthetic => Ok(load_truth(&cfg.dataset_path())?.behavior_policy(dev)),
        Mode::Medical => {
            let mut beliefs = Vec::new();
            let mut actions = Vec::new();
            for ep in &dev.episodes {
                for (b, step) in episode_beliefs(model, gmm, ep)?.into_iter().zip(&ep.steps) {
                    beliefs.push(b);
                    actions.push(step.action.clone());
                }
            }
            Ok(BehaviorPolicy::fit_gaussian(&beliefs, &actions)?)
        }
    }
}

const METRICS_HEADER: &str = "epoch,mean_abs_delta,mean_root_gap,mean_rho,actor_updates,searches,skipped_episodes\n";

pub fn checkpoint_path(cfg: &RunConfig, epoch: usize) -> PathBuf {
    cfg.out("checkpoints").join(format!("epoch_{epoch:03}.txt"))
}

pub fn train(cfg: &RunConfig, resume: Option<&Path>) -> Result<()> {
    record_config(cfg, "train")?;
    let agent_cfg = cfg.agent_config()?;
    let bounds = load_normalization(cfg)?;
    let gmm = load_gmm(cfg)?;
    let (model, model_prov) = load_model(&cfg.out("model.txt"))?;
    let dev = normalized_dev(cfg, &bounds)?;
    let behavior = behavior_policy(cfg, &dev, &model, &gmm)?;
    let prov = provenance(cfg);
    let metrics_path = cfg.out("metrics.csv");

    let mut agent = match resume {
        Some(path) => {
            let (agent, _) = Agent::from_text(&read_input(path, "checkpoint")?)?;
            if agent.model_hash != model_prov.config_hash {
                bail!("checkpoint was trained against a different model (hash {} vs {})", agent.model_hash, model_prov.config_hash);
            }
            agent
        }
        None => {
            let agent = Agent::init_from_data(&model, &gmm, &dev, agent_cfg.sigma, cfg.actor_init()?, model_prov.config_hash.clone())?;
            write_file(&checkpoint_path(cfg, 0), &agent.to_text(&prov))?;
            agent
        }
    };

    // Keep the metrics of epochs already behind the starting point.
    let mut metrics = provenance_comment(cfg) + METRICS_HEADER;
    if resume.is_some() {
        if let Ok(old) = std::fs::read_to_string(&metrics_path) {
            for line in old.lines().filter(|l| !l.starts_with('#') && !l.starts_with("epoch")) {
                let epoch: usize = line.split(',').next().and_then(|e| e.parse().ok()).unwrap_or(usize::MAX);
                if epoch <= agent.epochs_completed {
                    metrics.push_str(line);
                    metrics.push('\n');
                }
            }
        }
    }
    write_file(&metrics_path, &metrics)?;

    while agent.epochs_completed < cfg.agent.epochs {
        let started = Instant::now();
        let m = agent.train_epoch(&dev, &model, &gmm, &behavior, &agent_cfg);
        let epoch = agent.epochs_completed;
        info!(
            "epoch {epoch}: mean |delta| {:.4}, mean root gap {:.4}, mean rho {:.3}, {:.1} s",
            m.mean_abs_delta,
            m.mean_root_gap,
            m.mean_rho,
            started.elapsed().as_secs_f64()
        );
        let _ = writeln!(
            metrics,
            "{epoch},{},{},{},{},{},{}",
            m.mean_abs_delta, m.mean_root_gap, m.mean_rho, m.actor_updates, m.searches, m.skipped_episodes
        );
        write_file(&metrics_path, &metrics)?;
        write_file(&checkpoint_path(cfg, epoch), &agent.to_text(&prov))?;
    }
    write_file(&cfg.out("agent.txt"), &agent.to_text(&prov))?;
    Ok(())
}

pub fn load_agent(path: &Path) -> Result<Agent> {
    Ok(Agent::from_text(&read_input(path, "checkpoint")?)?.0)
}

pub fn evaluate(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<()> {
    record_config(cfg, "evaluate")?;
    let bounds = load_normalization(cfg)?;
    let gmm = load_gmm(cfg)?;
    let (model, model_prov) = load_model(&cfg.out("model.txt"))?;
    let agent = load_agent(&checkpoint.map(Path::to_path_buf).unwrap_or_else(|| cfg.out("agent.txt")))?;
    if agent.model_hash != model_prov.config_hash {
        bail!(
            "checkpoint belongs to a different model (hash {} vs {}); refusing to evaluate",
            agent.model_hash,
            model_prov.config_hash
        );
    }
    let (_, test) = load_splits(cfg)?;
    let test = apply_normalization(&test, &bounds);
    let truth = match cfg.mode {
        Mode::Synthetic => Some(load_truth(&cfg.test_dataset_path().expect("synthetic test path"))?),
        Mode::Medical => None,
    };
    let eval = report::evaluate(cfg, &agent, &model, &gmm, &test, truth.as_ref())?;
    report::write_reports(cfg, &eval, &cfg.out("report"))
}

/// Input of the `plan` command.
#[derive(Debug, Clone, Default)]
pub struct PlanRequest {
    pub belief: Option<Vec<f64>>,
    /// Raw (unnormalized) observation; its mixture posterior is the root belief.
    pub observation: Option<Vec<f64>>,
    /// Model file; defaults to `model.txt` in the output directory.
    pub model: Option<PathBuf>,
    /// Checkpoint whose critic supplies the leaf bounds; without one the
    /// model-derived bounds are used.
    pub checkpoint: Option<PathBuf>,
    pub budget: Option<usize>,
    /// Where to write the node-by-node tree dump.
    pub dump: Option<PathBuf>,
}

/// Runs one search and returns the printable result.
pub fn plan(cfg: &RunConfig, req: &PlanRequest) -> Result<String> {
    let (model, _) = load_model(&req.model.clone().unwrap_or_else(|| cfg.out("model.txt")))?;
    let root = match (&req.belief, &req.observation) {
        (Some(b), None) => {
            if b.len() != model.k {
                bail!(UsageError(format!("belief has {} entries but the model has {} states", b.len(), model.k)));
            }
            Belief::new(b.clone()).map_err(|e| UsageError(e.to_string()))?
        }
        (None, Some(o)) => {
            let bounds = load_normalization(cfg)?;
            let gmm = load_gmm(cfg)?;
            if o.len() != gmm.dim() {
                bail!(UsageError(format!("observation has {} entries, expected {}", o.len(), gmm.dim())));
            }
            model.observe_first(&gmm, &bounds.apply(o))
        }
        _ => bail!(UsageError("give exactly one of --belief and --observation".into())),
    };
    let critic = match &req.checkpoint {
        Some(p) => load_agent(p)?.critic,
        None => CriticParams::model_bounds(&model),
    };
    let agent_cfg = cfg.agent_config()?;
    let budget = SearchBudget {
        max_expansions: req.budget.unwrap_or(agent_cfg.budget.max_expansions),
        ..agent_cfg.budget
    };
    let (r, tree) = search(&model, critic.leaf(), root.clone(), &budget)?;
    if let Some(path) = &req.dump {
        write_file(path, &(provenance_comment(cfg) + &tree.dump()))?;
    }
    let fmt_vec = |v: &[f64]| v.iter().map(f64::to_string).collect::<Vec<_>>().join(",");
    let mut out = String::new();
    let _ = writeln!(out, "config_hash {}", cfg.hash());
    let _ = writeln!(out, "seed {}", cfg.seed);
    let _ = writeln!(out, "belief {}", fmt_vec(root.probs()));
    let _ = writeln!(out, "root_lower {}", r.root_lower);
    let _ = writeln!(out, "root_upper {}", r.root_upper);
    let _ = writeln!(out, "root_value {}", r.root_value);
    let _ = writeln!(out, "best_action_bin {}", r.best_root_action_bin);
    let _ = writeln!(out, "action {}", fmt_vec(&model.binning.representative(r.best_root_action_bin)));
    let _ = writeln!(out, "expansions_used {}", r.expansions_used);
    Ok(out)
}
