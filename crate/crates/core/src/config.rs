//! Run configuration: one TOML file describing environment, data, models,
//! holdout rules and evaluation, plus the large-scale hyperparameter profile.
//!
//! Every key is optional; omitted keys take the desk-scale defaults.
//!
//! ```toml
//! env = "gridscene-5"          # preset id, or an inline [env] table
//! seeds = [0, 1, 2]
//!
//! [dataset]
//! episodes = 500
//! epsilon = 0.2
//! seed = 0
//!
//! [analogy]                    # AnalogyConfig fields
//! steps = 20000
//!
//! [cta]                        # CtaConfig fields
//! variant = "cta"
//!
//! [[holdout]]                  # HoldoutRule fields
//! name = "open-drawer-window-closed-unlocked"
//! factor = "drawer"
//! from = 0
//! to = 1
//! window = 15
//! context = [{ factor = "window", value = 0 }, { factor = "drawer_lock", value = 0 }]
//!
//! [eval]
//! tasks = 20
//! rollouts = 50
//! every = 5000
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analogy::AnalogyConfig;
use crate::cta::{CtaConfig, Variant};
use crate::datagen::HoldoutRule;
use crate::envsim::{EnvSpec, Environment, Family};
use crate::evalkit::SuccessCriterion;
use crate::{Error, Result};

/// A preset id or a full environment specification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EnvChoice {
    Preset(String),
    Inline(EnvSpec),
}

impl EnvChoice {
    pub fn build(&self) -> Result<Environment> {
        match self {
            EnvChoice::Preset(id) => Environment::preset(id),
            EnvChoice::Inline(spec) => Environment::new(spec.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub episodes: usize,
    pub epsilon: f64,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            episodes: 500,
            epsilon: 0.2,
            seed: 0,
        }
    }
}

/// Which goals the evaluator poses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskSuite {
    /// Uniform start/goal pairs that differ in some object.
    #[default]
    Random,
    /// The pair removed by the first holdout rule.
    Holdout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub tasks: usize,
    pub rollouts: usize,
    /// Training steps between evaluated checkpoints.
    pub every: usize,
    pub suite: TaskSuite,
    pub criterion: SuccessCriterion,
    /// Sample actions with the policy noise instead of using the means.
    pub stochastic: bool,
    pub task_seed: u64,
    /// Variants trained and compared by `ooc-holdout`.
    pub compare: Vec<Variant>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            tasks: 20,
            rollouts: 50,
            every: 5_000,
            suite: TaskSuite::Random,
            criterion: SuccessCriterion::Endogenous,
            stochastic: false,
            task_seed: 1_000,
            compare: vec![Variant::Cta, Variant::HiqlDualAnalogy],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub env: EnvChoice,
    pub seeds: Vec<u64>,
    pub dataset: DatasetConfig,
    pub analogy: AnalogyConfig,
    pub cta: CtaConfig,
    pub holdout: Vec<HoldoutRule>,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            env: EnvChoice::Preset("gridscene-5".into()),
            seeds: vec![0, 1, 2],
            dataset: DatasetConfig::default(),
            analogy: AnalogyConfig::default(),
            cta: CtaConfig::default(),
            holdout: Vec::new(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::usage(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Usage(m) => Error::usage(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::usage(format!("config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::spec("seeds", "at least one seed is required"));
        }
        if !(0.0..=1.0).contains(&self.dataset.epsilon) {
            return Err(Error::spec("dataset.epsilon", format!("{} is outside [0, 1]", self.dataset.epsilon)));
        }
        if self.dataset.episodes == 0 {
            return Err(Error::spec("dataset.episodes", "must be positive"));
        }
        for (name, v) in [
            ("eval.tasks", self.eval.tasks),
            ("eval.rollouts", self.eval.rollouts),
            ("eval.every", self.eval.every),
        ] {
            if v == 0 {
                return Err(Error::spec(name, "must be positive"));
            }
        }
        if self.eval.suite == TaskSuite::Holdout && self.holdout.is_empty() {
            return Err(Error::spec("eval.suite", "holdout tasks need at least one [[holdout]] rule"));
        }
        self.analogy.validate()?;
        self.cta.validate()
    }

    /// Large-scale hyperparameters: learning rate, widths, dimensions,
    /// discount, expectiles, temperatures and batch size. Step counts,
    /// seeds, data and evaluation settings are left untouched.
    pub fn paper_scale(mut self) -> Self {
        let a = &mut self.analogy;
        a.lr = 3e-4;
        a.batch_size = 256;
        a.hidden = vec![512, 512, 512];
        a.critic_hidden = vec![512, 512, 512];
        a.layer_norm = true;
        a.d = 256;
        a.gamma = 0.99;
        a.tau = 0.005;
        a.iota = 0.7;
        let c = &mut self.cta;
        c.lr = 3e-4;
        c.batch_size = 256;
        c.eta_hidden = vec![256, 256];
        c.component_hidden = vec![128, 128, 128];
        c.backbone_hidden = vec![128, 128];
        c.monolithic_hidden = vec![512, 512, 512];
        c.layer_norm = true;
        c.b = 8;
        c.e = 32;
        c.gamma = 0.99;
        c.tau = 0.005;
        c.kappa = 0.7;
        c.beta_h = 3.0;
        c.beta_l = 3.0;
        c.k = Some(10);
        self
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Subgoal horizon: the configured `cta.k`, else 4 on chains and 8 on grids.
    pub fn subgoal_steps(&self, env: &Environment) -> usize {
        self.cta.k.unwrap_or(match env.family() {
            Family::FactorChain => 4,
            Family::GridScene => 8,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = RunConfig::from_toml("").unwrap();
        assert_eq!(cfg, RunConfig::default());
    }

    #[test]
    fn toml_round_trip_preserves_hash() {
        let mut cfg = RunConfig::default();
        cfg.holdout.push(HoldoutRule::drawer_with_window_closed());
        cfg.eval.suite = TaskSuite::Holdout;
        let back = RunConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        assert_eq!(cfg.hash().len(), 64);
    }

    #[test]
    fn partial_tables_fill_defaults() {
        let cfg = RunConfig::from_toml(
            "env = \"factorchain-3\"\nseeds = [4]\n[cta]\nvariant = \"hiql-dual\"\nk = 3\n[analogy]\nsteps = 10\n",
        )
        .unwrap();
        assert_eq!(cfg.cta.variant, Variant::HiqlDual);
        assert_eq!(cfg.cta.e, CtaConfig::default().e);
        assert_eq!(cfg.analogy.steps, 10);
        assert_eq!(cfg.seeds, vec![4]);
        let env = cfg.env.build().unwrap();
        assert_eq!(cfg.subgoal_steps(&env), 3);
    }

    #[test]
    fn inline_environment_spec() {
        let spec = EnvSpec::preset("factorchain-3").unwrap();
        let cfg = RunConfig {
            env: EnvChoice::Inline(spec.clone()),
            ..RunConfig::default()
        };
        let back = RunConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back.env, EnvChoice::Inline(spec));
        assert_eq!(back.env.build().unwrap().state_count(), 48);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(RunConfig::from_toml("bogus = 1").is_err());
        assert!(RunConfig::from_toml("[cta]\nbogus = 1").is_err());
        assert!(RunConfig::from_toml("seeds = []").is_err());
        assert!(RunConfig::from_toml("[dataset]\nepsilon = 1.5").is_err());
        assert!(RunConfig::from_toml("[eval]\nsuite = \"holdout\"").is_err());
        assert!(RunConfig::from_toml("[analogy]\niota = 1.0").is_err());
        assert!(RunConfig::from_toml("[cta]\nvariant = \"nope\"").is_err());
    }

    #[test]
    fn default_subgoal_steps_follow_family() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.subgoal_steps(&Environment::preset("factorchain-3").unwrap()), 4);
        assert_eq!(cfg.subgoal_steps(&Environment::preset("gridscene-5").unwrap()), 8);
    }

    #[test]
    fn large_profile_changes_only_hyperparameters() {
        let desk = RunConfig::default();
        let big = desk.clone().paper_scale();
        assert_eq!(big.analogy.d, 256);
        assert_eq!(big.analogy.hidden, vec![512, 512, 512]);
        assert_eq!(big.cta.eta_hidden, vec![256, 256]);
        assert_eq!(big.cta.component_hidden, vec![128, 128, 128]);
        assert_eq!(big.cta.e, 32);
        assert_eq!(big.cta.k, Some(10));
        assert_eq!(big.seeds, desk.seeds);
        assert_eq!(big.analogy.steps, desk.analogy.steps);
        assert_eq!(big.eval, desk.eval);
        assert_ne!(big.hash(), desk.hash());
        big.validate().unwrap();
    }
}
