//! Run configuration: a TOML file with one section per pipeline stage.
//!
//! Every key has a default, unknown keys are rejected, and everything except
//! the `[paths]` section feeds the config hash stamped into each output.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use astc_core::agent::{ActorInit, AgentConfig};
use astc_core::belief_model::{CountMode, GemPrior, ModelConfig, RewardMode};
use astc_core::bounded_tree::SearchBudget;
use astc_core::gmm::{BicConfig, CovarianceKind, EmConfig};
use astc_core::synth_env::SynthConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::UsageError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Data from `synth-gen`, evaluated against its ground-truth sidecar.
    Synthetic,
    /// Retrospective data with terminal discharge/death rewards.
    Medical,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub mode: Mode,
    pub paths: PathsConfig,
    pub data: DataConfig,
    pub synth: SynthRunConfig,
    pub synth_env: SynthConfig,
    pub gmm: GmmConfig,
    pub model: ModelSection,
    pub agent: AgentSection,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            mode: Mode::Synthetic,
            paths: PathsConfig::default(),
            data: DataConfig::default(),
            synth: SynthRunConfig::default(),
            synth_env: SynthConfig::default(),
            gmm: GmmConfig::default(),
            model: ModelSection::default(),
            agent: AgentSection::default(),
            eval: EvalConfig::default(),
        }
    }
}

/// File locations. Unset dataset paths default to files inside `out_dir`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub out_dir: PathBuf,
    /// Development (training) episodes.
    pub dataset: Option<PathBuf>,
    /// Test episodes. In medical mode, when unset, the development file is
    /// split by `data.split_ratio` instead.
    pub test_dataset: Option<PathBuf>,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            out_dir: PathBuf::from("out"),
            dataset: None,
            test_dataset: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Fraction of episodes kept for development when splitting one file.
    pub split_ratio: f64,
    /// If set, loading checks zero intermediate rewards and ±this terminal reward.
    pub terminal_reward_magnitude: Option<f64>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            split_ratio: 0.8,
            terminal_reward_magnitude: None,
        }
    }
}

/// Dataset sizes and behavior policy for `synth-gen`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthRunConfig {
    /// Seed of the environment (centroids); data seeds derive from the run seed.
    pub spec_seed: u64,
    pub n_train: usize,
    pub n_test: usize,
    pub epsilon: f64,
    pub max_len: usize,
}

impl Default for SynthRunConfig {
    fn default() -> Self {
        SynthRunConfig {
            spec_seed: 7,
            n_train: 2000,
            n_test: 200,
            epsilon: 0.3,
            max_len: 60,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GmmConfig {
    /// Fixed component count; when unset, chosen by BIC over `k_min..=k_max`.
    pub k: Option<usize>,
    pub k_min: usize,
    pub k_max: usize,
    pub n_folds: usize,
    pub tol: f64,
    pub max_iter: usize,
    pub n_init: usize,
    pub cov_floor: f64,
    /// `full` or `diagonal`.
    pub covariance: String,
}

impl Default for GmmConfig {
    fn default() -> Self {
        let em = EmConfig::default();
        GmmConfig {
            k: None,
            k_min: 1,
            k_max: 10,
            n_folds: 5,
            tol: em.tol,
            max_iter: em.max_iter,
            n_init: em.n_init,
            cov_floor: em.cov_floor,
            covariance: em.covariance.as_str().to_string(),
        }
    }
}

impl GmmConfig {
    pub fn em(&self) -> Result<EmConfig> {
        let covariance = CovarianceKind::parse(&self.covariance)
            .ok_or_else(|| UsageError(format!("gmm.covariance must be `full` or `diagonal`, got `{}`", self.covariance)))?;
        Ok(EmConfig {
            tol: self.tol,
            max_iter: self.max_iter,
            n_init: self.n_init,
            cov_floor: self.cov_floor,
            covariance,
        })
    }

    pub fn bic(&self, seed: u64) -> Result<BicConfig> {
        Ok(BicConfig {
            n_folds: self.n_folds,
            seed,
            em: self.em()?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub gem_c1: f64,
    pub gem_c2: f64,
    pub kappa: f64,
    pub p_term: f64,
    /// Discount factor; in synthetic mode, unset means the generator's.
    pub gamma: Option<f64>,
    pub reward_discharge: f64,
    pub reward_death: f64,
    /// `medical` (terminal rewards only) or `general`.
    pub reward_mode: String,
    /// `soft` (posterior-weighted) or `hard` (MAP-state) transition counts.
    pub count_mode: String,
    /// Monte Carlo draws per state for the observation-cell table.
    pub m_samples: usize,
    pub action_bins: usize,
    /// Reserve a bin for exact zero doses.
    pub zero_bin: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        ModelSection {
            gem_c1: m.gem.c1,
            gem_c2: m.gem.c2,
            kappa: m.gem.kappa,
            p_term: m.p_term,
            gamma: None,
            reward_discharge: m.terminal_rewards.0,
            reward_death: m.terminal_rewards.1,
            reward_mode: "medical".into(),
            count_mode: "soft".into(),
            m_samples: m.m_samples,
            action_bins: 5,
            zero_bin: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AgentSection {
    pub epochs: usize,
    /// Unset learning parameters take the preset for the run mode.
    pub alpha: Option<f64>,
    pub lambda: Option<f64>,
    pub sigma: Option<f64>,
    pub rho_max: Option<f64>,
    /// `behavior` (least-squares fit of logged actions) or `mean` (constant).
    pub actor_init: String,
    pub max_expansions: usize,
    pub eps_gap: f64,
    /// Stop searching once an expansion shrinks the root gap by less than
    /// this; 0 disables the rule.
    pub eps_gap_delta: f64,
    pub p_min: f64,
}

impl Default for AgentSection {
    fn default() -> Self {
        let b = SearchBudget::default();
        AgentSection {
            epochs: 3,
            alpha: None,
            lambda: None,
            sigma: None,
            rho_max: None,
            actor_init: "behavior".into(),
            max_expansions: b.max_expansions,
            eps_gap: b.eps_gap,
            eps_gap_delta: b.eps_gap_delta,
            p_min: b.p_min,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// `mean`, `sample` or `tree`.
    pub proposal: String,
    pub bootstrap: usize,
    pub hist_bins: usize,
    /// Steps shown in the action-trace plot.
    pub trace_steps: usize,
    pub svg: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            proposal: "mean".into(),
            bootstrap: 1000,
            hist_bins: 20,
            trace_steps: 200,
            svg: true,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| UsageError(format!("cannot read config `{}`: {e}", path.display())))?;
        Self::parse(&text).with_context(|| format!("in config `{}`", path.display()))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| UsageError(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| -> Result<()> { Err(UsageError(msg).into()) };
        if !(self.data.split_ratio > 0.0 && self.data.split_ratio < 1.0) {
            return bad(format!("data.split_ratio must lie in (0, 1), got {}", self.data.split_ratio));
        }
        if !(0.0..=1.0).contains(&self.synth.epsilon) {
            return bad(format!("synth.epsilon must lie in [0, 1], got {}", self.synth.epsilon));
        }
        if self.gmm.k == Some(0) || self.gmm.k_min == 0 || self.gmm.k_min > self.gmm.k_max {
            return bad("gmm: component counts must be positive with k_min <= k_max".into());
        }
        self.gmm.em()?;
        self.model_config()?;
        self.agent_config()?;
        self.actor_init()?;
        if !matches!(self.eval.proposal.as_str(), "mean" | "sample" | "tree") {
            return bad(format!("eval.proposal must be mean, sample or tree, got `{}`", self.eval.proposal));
        }
        if self.eval.hist_bins == 0 {
            return bad("eval.hist_bins must be positive".into());
        }
        Ok(())
    }

    /// SHA-256 over every setting except file locations.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(obj) = v.as_object_mut() {
            obj.remove("paths");
        }
        let digest = Sha256::digest(v.to_string().as_bytes());
        hex::encode(digest)[..16].to_string()
    }

    pub fn gamma(&self) -> f64 {
        match (self.model.gamma, self.mode) {
            (Some(g), _) => g,
            (None, Mode::Synthetic) => self.synth_env.gamma,
            (None, Mode::Medical) => ModelConfig::default().gamma,
        }
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let m = &self.model;
        let reward_mode = match m.reward_mode.as_str() {
            "medical" => RewardMode::Medical,
            "general" => RewardMode::General,
            other => return Err(UsageError(format!("model.reward_mode must be medical or general, got `{other}`")).into()),
        };
        let count_mode = match m.count_mode.as_str() {
            "soft" => CountMode::Soft,
            "hard" => CountMode::Hard,
            other => return Err(UsageError(format!("model.count_mode must be soft or hard, got `{other}`")).into()),
        };
        let gem = GemPrior {
            c1: m.gem_c1,
            c2: m.gem_c2,
            kappa: m.kappa,
        };
        gem.validate().map_err(|e| UsageError(format!("model: {e}")))?;
        let gamma = self.gamma();
        if !(0.0..1.0).contains(&gamma) {
            return Err(UsageError(format!("model.gamma must lie in [0, 1), got {gamma}")).into());
        }
        if m.action_bins < 2 {
            return Err(UsageError("model.action_bins must be at least 2".into()).into());
        }
        Ok(ModelConfig {
            gem,
            p_term: m.p_term,
            gamma,
            terminal_rewards: (m.reward_discharge, m.reward_death),
            reward_mode,
            count_mode,
            m_samples: m.m_samples,
            seed: self.seed,
        })
    }

    /// Number of action bins: one per synthetic action, else `model.action_bins`.
    pub fn action_bins(&self) -> (usize, bool) {
        match self.mode {
            Mode::Synthetic => (self.synth_env.n_actions, false),
            Mode::Medical => (self.model.action_bins, self.model.zero_bin),
        }
    }

    pub fn agent_config(&self) -> Result<AgentConfig> {
        let a = &self.agent;
        let preset = match self.mode {
            Mode::Synthetic => AgentConfig::synthetic(),
            Mode::Medical => AgentConfig::default(),
        };
        let cfg = AgentConfig {
            alpha: a.alpha.unwrap_or(preset.alpha),
            lambda: a.lambda.unwrap_or(preset.lambda),
            sigma: a.sigma.unwrap_or(preset.sigma),
            rho_max: a.rho_max.unwrap_or(preset.rho_max),
            budget: SearchBudget {
                max_expansions: a.max_expansions,
                eps_gap: a.eps_gap,
                eps_gap_delta: a.eps_gap_delta,
                p_min: a.p_min,
            },
        };
        if !(cfg.sigma > 0.0) || !(cfg.alpha > 0.0) || !(0.0..=1.0).contains(&cfg.lambda) || !(cfg.rho_max > 0.0) {
            return Err(UsageError("agent: need sigma > 0, alpha > 0, rho_max > 0 and lambda in [0, 1]".into()).into());
        }
        Ok(cfg)
    }

    pub fn actor_init(&self) -> Result<ActorInit> {
        match self.agent.actor_init.as_str() {
            "behavior" => Ok(ActorInit::BehaviorFit),
            "mean" => Ok(ActorInit::MeanAction),
            other => Err(UsageError(format!("agent.actor_init must be behavior or mean, got `{other}`")).into()),
        }
    }

    pub fn out(&self, name: &str) -> PathBuf {
        self.paths.out_dir.join(name)
    }

    pub fn dataset_path(&self) -> PathBuf {
        self.paths.dataset.clone().unwrap_or_else(|| self.out("train.episodes"))
    }

    pub fn test_dataset_path(&self) -> Option<PathBuf> {
        match (&self.paths.test_dataset, self.mode) {
            (Some(p), _) => Some(p.clone()),
            (None, Mode::Synthetic) => Some(self.out("test.episodes")),
            (None, Mode::Medical) => None,
        }
    }
}
