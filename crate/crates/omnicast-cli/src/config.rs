//! Experiment configuration. Every section is plain JSON; unknown keys are
//! rejected so typos fail loudly.

use anyhow::{bail, Context, Result};
use omnicast::audit::Metric;
use omnicast::basis::BasisDescriptor;
use omnicast::domain::{theta_net, ActionSet, LossSpec};
use omnicast::engine::{CandidateSpec, EngineConfig, ForecasterSpec, Mode, Policy};
use omnicast::game::SolverSpec;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_name")]
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    pub horizon: usize,
    /// Size of the context alphabet.
    #[serde(default = "one")]
    pub contexts: usize,
    pub basis: BasisDescriptor,
    pub losses: Vec<LossSpec>,
    pub actions: ActionSpec,
    #[serde(default)]
    pub policies: Vec<PolicySpec>,
    #[serde(default)]
    pub engine: EngineKnobs,
    pub environment: EnvironmentSpec,
    #[serde(default)]
    pub audit: AuditSpec,
    #[serde(default)]
    pub batch: Option<BatchSpec>,
}

fn default_name() -> String {
    "experiment".into()
}

fn one() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ActionSpec {
    ThetaNet { m: usize, theta: f64 },
    Points { points: Vec<Vec<f64>> },
    Labels { labels: Vec<String> },
}

impl ActionSpec {
    pub fn build(&self) -> Result<ActionSet> {
        Ok(match self {
            ActionSpec::ThetaNet { m, theta } => theta_net(*m, *theta)?,
            ActionSpec::Points { points } => ActionSet::finite(points.clone())?,
            ActionSpec::Labels { labels } => ActionSet::labeled(labels.clone())?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum PolicySpec {
    Table { name: String, table: Vec<usize> },
    Constant { name: String, action: usize },
    /// `below` on contexts `< cut`, `at_or_above` otherwise.
    Threshold { name: String, cut: usize, below: usize, at_or_above: usize },
}

impl PolicySpec {
    pub fn build(&self, contexts: usize) -> Result<Policy> {
        Ok(match self {
            PolicySpec::Table { name, table } => {
                if table.len() != contexts {
                    bail!("policy {name} has {} entries for {contexts} contexts", table.len());
                }
                Policy { name: name.clone(), table: table.clone() }
            }
            PolicySpec::Constant { name, action } => Policy::constant(name.clone(), *action, contexts),
            PolicySpec::Threshold { name, cut, below, at_or_above } => {
                Policy::threshold(name.clone(), *cut, *below, *at_or_above, contexts)
            }
        })
    }
}

/// Engine settings; horizon and seed come from the top level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EngineKnobs {
    #[serde(default = "exact")]
    pub mode: Mode,
    #[serde(default)]
    pub grid_step: Option<f64>,
    #[serde(default)]
    pub candidates: CandidateSpec,
    #[serde(default = "one")]
    pub adversary_refine: usize,
    #[serde(default)]
    pub eta_mw: Option<f64>,
    #[serde(default)]
    pub gamma: Option<f64>,
    #[serde(default = "eps")]
    pub eps_solve: f64,
    #[serde(default)]
    pub solver: SolverSpec,
    #[serde(default = "budget")]
    pub candidate_budget: usize,
}

fn exact() -> Mode {
    Mode::Exact
}

fn eps() -> f64 {
    1e-4
}

fn budget() -> usize {
    20_000
}

impl Default for EngineKnobs {
    fn default() -> Self {
        EngineKnobs {
            mode: Mode::Exact,
            grid_step: None,
            candidates: CandidateSpec::Images,
            adversary_refine: 1,
            eta_mw: None,
            gamma: None,
            eps_solve: eps(),
            solver: SolverSpec::Exact,
            candidate_budget: budget(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ContextSpec {
    Uniform,
    Weights { weights: Vec<f64> },
    Cycle,
    Fixed { context: usize },
}

impl Default for ContextSpec {
    fn default() -> Self {
        ContextSpec::Uniform
    }
}

/// Outcome law over a finite support; one weight row per context or a
/// single shared row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutcomeTable {
    pub support: Vec<Vec<f64>>,
    pub weights: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum EnvironmentSpec {
    Iid {
        #[serde(default)]
        contexts: ContextSpec,
        outcomes: OutcomeTable,
        #[serde(default)]
        seed: Option<u64>,
    },
    AdversarialBiasMax {
        #[serde(default = "cycle")]
        contexts: ContextSpec,
        #[serde(default)]
        seed: Option<u64>,
    },
    Replay { path: String },
}

fn cycle() -> ContextSpec {
    ContextSpec::Cycle
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuditSpec {
    #[serde(default = "all_metrics")]
    pub metrics: Vec<Metric>,
    /// Explicit checkpoints; defaults to `T/64, T/32, ..., T`.
    #[serde(default)]
    pub checkpoints: Option<Vec<usize>>,
    #[serde(default)]
    pub assertions: Vec<Assertion>,
    /// Points per axis for `audit-basis`.
    #[serde(default = "grid_points")]
    pub grid_points: usize,
}

fn all_metrics() -> Vec<Metric> {
    Metric::ALL.to_vec()
}

fn grid_points() -> usize {
    101
}

impl Default for AuditSpec {
    fn default() -> Self {
        AuditSpec { metrics: all_metrics(), checkpoints: None, assertions: Vec::new(), grid_points: grid_points() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Assertion {
    /// Final regret of `metric` for loss `loss` at most `max`.
    Regret { metric: Metric, loss: usize, max: f64 },
    /// Max calibration bias over all events divided by T at most `max`.
    NormalizedBias { max: f64 },
    /// Recomputed biases equal the engine's table exactly.
    BiasesMatch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatchSpec {
    /// Training rounds; defaults to the horizon.
    #[serde(default)]
    pub train: Option<usize>,
    pub test: usize,
    /// Flag estimates at or below this value.
    #[serde(default)]
    pub epsilon: Option<f64>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text).context("parsing experiment config")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.losses.is_empty() {
            bail!("config registers no losses");
        }
        if self.contexts == 0 {
            bail!("context alphabet must be nonempty");
        }
        for loss in &self.losses {
            loss.validate()?;
        }
        let actions = self.actions.build()?;
        for policy in self.policies() ? {
            if policy.table.iter().any(|&a| a >= actions.len()) {
                bail!("policy {} names an action outside the action set", policy.name);
            }
        }
        if let EnvironmentSpec::Iid { outcomes, contexts, .. } = &self.environment {
            if outcomes.support.is_empty() {
                bail!("outcome support is empty");
            }
            if outcomes.weights.len() != 1 && outcomes.weights.len() != self.contexts {
                bail!("outcome weights need one row or one row per context");
            }
            if outcomes.weights.iter().any(|w| w.len() != outcomes.support.len() || w.iter().any(|&x| !(x >= 0.0)) || w.iter().sum::<f64>() <= 0.0) {
                bail!("every outcome weight row must be nonnegative, nonzero, and match the support");
            }
            if let ContextSpec::Weights { weights } = contexts {
                if weights.len() != self.contexts {
                    bail!("context weights must have one entry per context");
                }
            }
        }
        if self.policies.is_empty() && self.audit.metrics.iter().any(|m| *m != Metric::Swap) {
            bail!("policy-based metrics need at least one policy");
        }
        Ok(())
    }

    pub fn policies(&self) -> Result<Vec<Policy>> {
        self.policies.iter().map(|p| p.build(self.contexts)).collect()
    }

    pub fn engine_config(&self) -> EngineConfig {
        let k = &self.engine;
        EngineConfig {
            mode: k.mode,
            horizon: self.horizon,
            grid_step: k.grid_step,
            candidates: k.candidates,
            adversary_refine: k.adversary_refine,
            eta_mw: k.eta_mw,
            gamma: k.gamma,
            eps_solve: k.eps_solve,
            solver: k.solver,
            seed: self.seed,
            candidate_budget: k.candidate_budget,
        }
    }

    pub fn forecaster_spec(&self) -> Result<ForecasterSpec> {
        Ok(ForecasterSpec {
            basis: self.basis.clone(),
            losses: self.losses.clone(),
            actions: self.actions.build()?,
            policies: self.policies()?,
            engine: self.engine_config(),
        })
    }

    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed {
            self.seed = s;
            match &mut self.environment {
                EnvironmentSpec::Iid { seed, .. } | EnvironmentSpec::AdversarialBiasMax { seed, .. } => *seed = None,
                EnvironmentSpec::Replay { .. } => {}
            }
        }
        self
    }

    pub fn environment_seed(&self) -> u64 {
        match &self.environment {
            EnvironmentSpec::Iid { seed, .. } | EnvironmentSpec::AdversarialBiasMax { seed, .. } => {
                seed.unwrap_or(self.seed.wrapping_add(0x9E37_79B9))
            }
            EnvironmentSpec::Replay { .. } => 0,
        }
    }

    /// SHA-256 of the canonical JSON of the effective config.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        format!("{:x}", Sha256::digest(canonical.as_bytes()))
    }

    pub fn checkpoints(&self) -> Vec<usize> {
        match &self.audit.checkpoints {
            Some(c) => {
                let mut c: Vec<usize> = c.iter().cloned().filter(|&t| t > 0 && t <= self.horizon).collect();
                c.sort_unstable();
                c.dedup();
                c
            }
            None => omnicast::audit::checkpoints(self.horizon),
        }
    }
}
