//! Hierarchical agent with bilinear value and policy heads conditioned on
//! compressed dual analogies, plus the baseline variants.

mod heads;
mod train;

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analogy::{analogy_rows, sidecar, DualAnalogyModel};
use crate::datagen::GoalSamplerConfig;
use crate::tensor::{self, EmaTarget, Matrix, Mlp, ParamStore};
use crate::{Error, Result};

pub use heads::{BilinearHead, Head, MonolithicHead};
pub use train::{awr_weight, train_cta, value_target, CtaBatch, CtaLosses, CtaTrainer, LossVars};

use heads::HeadShape;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// Bilinear heads conditioned on `eta(analogy(s, g))`.
    #[serde(rename = "cta")]
    Cta,
    /// Monolithic heads conditioned on `eta(varphi(g))`.
    #[serde(rename = "hiql-dual")]
    HiqlDual,
    /// Monolithic heads conditioned on `eta(analogy(s, g))`.
    #[serde(rename = "hiql-dual-analogy")]
    HiqlDualAnalogy,
    /// Bilinear value and a single bilinear policy, no subgoals.
    #[serde(rename = "flat-analogy")]
    FlatAnalogy,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Cta,
        Variant::HiqlDual,
        Variant::HiqlDualAnalogy,
        Variant::FlatAnalogy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Cta => "cta",
            Variant::HiqlDual => "hiql-dual",
            Variant::HiqlDualAnalogy => "hiql-dual-analogy",
            Variant::FlatAnalogy => "flat-analogy",
        }
    }

    pub fn hierarchical(self) -> bool {
        self != Variant::FlatAnalogy
    }

    pub fn bilinear(self) -> bool {
        matches!(self, Variant::Cta | Variant::FlatAnalogy)
    }

    /// How raw conditioning vectors are formed before `eta`.
    pub fn conditioning(self) -> Conditioning {
        match self {
            Variant::HiqlDual => Conditioning::GoalEmbedding,
            _ => Conditioning::Analogy,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Variant::ALL.iter().map(|v| v.name()).collect();
                Error::usage(format!("unknown variant `{s}`; expected one of {}", names.join(", ")))
            })
    }
}

/// Input to `eta` for a pair `(s, g)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Conditioning {
    /// `varphi(g) - varphi(s)`
    Analogy,
    /// `varphi(g)`
    GoalEmbedding,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CtaConfig {
    pub variant: Variant,
    pub e: usize,
    pub b: usize,
    pub p: usize,
    pub eta_hidden: Vec<usize>,
    pub component_hidden: Vec<usize>,
    pub backbone_hidden: Vec<usize>,
    pub monolithic_hidden: Vec<usize>,
    pub layer_norm: bool,
    pub gamma: f64,
    pub kappa: f64,
    pub beta_h: f64,
    pub beta_l: f64,
    /// Subgoal horizon; `None` picks the per-family default.
    pub k: Option<usize>,
    pub sigma_h: f64,
    pub sigma_l: f64,
    pub w_max: f64,
    pub tau: f64,
    pub terminal_at_goal: bool,
    pub lr: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub value_goals: GoalSamplerConfig,
    pub actor_goals: GoalSamplerConfig,
}

impl Default for CtaConfig {
    fn default() -> Self {
        CtaConfig {
            variant: Variant::Cta,
            e: 8,
            b: 8,
            p: 8,
            eta_hidden: vec![64, 64],
            component_hidden: vec![64, 64],
            backbone_hidden: vec![64, 64],
            monolithic_hidden: vec![128, 128, 128],
            layer_norm: true,
            gamma: 0.99,
            kappa: 0.7,
            beta_h: 3.0,
            beta_l: 3.0,
            k: None,
            sigma_h: 0.1,
            sigma_l: 0.1,
            w_max: 100.0,
            tau: 0.005,
            terminal_at_goal: true,
            lr: 3e-4,
            batch_size: 128,
            steps: 50_000,
            value_goals: GoalSamplerConfig::VALUE,
            actor_goals: GoalSamplerConfig::ACTOR,
        }
    }
}

impl CtaConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("cta.e", self.e),
            ("cta.b", self.b),
            ("cta.p", self.p),
            ("cta.batch_size", self.batch_size),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::spec(name, "must be positive"));
            }
        }
        if self.k == Some(0) {
            return Err(Error::spec("cta.k", "must be positive"));
        }
        if !(self.kappa > 0.0 && self.kappa < 1.0) {
            return Err(Error::usage(format!("expectile {} is outside (0, 1)", self.kappa)));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::spec("cta.gamma", format!("{} is outside (0, 1)", self.gamma)));
        }
        for (name, v) in [("cta.sigma_h", self.sigma_h), ("cta.sigma_l", self.sigma_l)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::spec(name, "must be positive"));
            }
        }
        if !(self.w_max > 0.0) {
            return Err(Error::spec("cta.w_max", "must be positive"));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::spec("cta.tau", format!("{} is outside (0, 1]", self.tau)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::spec("cta.lr", "must be positive"));
        }
        self.value_goals.validate()?;
        self.actor_goals.validate()
    }
}

/// Stable digest of a parameter store.
pub fn fingerprint(store: &ParamStore) -> String {
    let mut h = Sha256::new();
    for (name, m) in store.iter() {
        h.update(name.as_bytes());
        for v in m.data() {
            h.update(v.to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CtaMeta {
    pub env_id: String,
    pub obs_dim: usize,
    pub action_count: usize,
    pub d: usize,
    pub k: usize,
    pub config: CtaConfig,
    pub steps: u64,
    pub seed: u64,
    pub analogy_fingerprint: String,
    pub config_hash: String,
}

/// Agent with its frozen analogy inputs: the goal-encoder table over all
/// states and the observation table.
#[derive(Debug, Clone)]
pub struct CtaAgent {
    pub meta: CtaMeta,
    pub store: ParamStore,
    pub target: EmaTarget,
    eta: Mlp,
    value: Head,
    high: Option<Head>,
    low: Head,
    varphi: Matrix,
    obs: Matrix,
}

/// Builds an agent for `config.variant` on top of a trained analogy model.
pub fn build_variant(
    config: CtaConfig,
    analogy: &DualAnalogyModel,
    obs: &Matrix,
    k: usize,
    seed: u64,
) -> Result<CtaAgent> {
    config.validate()?;
    if k == 0 {
        return Err(Error::spec("cta.k", "must be positive"));
    }
    if obs.cols() != analogy.meta.obs_dim {
        return Err(Error::usage(format!(
            "observation width {} does not match the analogy model ({})",
            obs.cols(),
            analogy.meta.obs_dim
        )));
    }
    let varphi = analogy.varphi(obs)?;
    let d = analogy.d();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let eta = Mlp::new(&mut store, "eta", d, &config.eta_hidden, config.e, config.layer_norm, &mut rng);
    let shape = |out_dim| HeadShape {
        obs_dim: obs.cols(),
        cond_dim: config.e,
        out_dim,
        b: config.b,
        p: config.p,
        component_hidden: &config.component_hidden,
        backbone_hidden: &config.backbone_hidden,
        monolithic_hidden: &config.monolithic_hidden,
        layer_norm: config.layer_norm,
    };
    let na = analogy.meta.action_count;
    let make = |store: &mut ParamStore, name: &str, out: usize, rng: &mut ChaCha8Rng| {
        if config.variant.bilinear() {
            Head::bilinear(store, name, shape(out), rng)
        } else {
            Head::monolithic(store, name, shape(out), rng)
        }
    };
    let value = make(&mut store, "value", 1, &mut rng);
    let high = config
        .variant
        .hierarchical()
        .then(|| make(&mut store, "high", config.e, &mut rng));
    let low = make(&mut store, "low", na, &mut rng);
    let target = EmaTarget::new(&store, config.tau);
    Ok(CtaAgent {
        meta: CtaMeta {
            env_id: analogy.meta.env_id.clone(),
            obs_dim: obs.cols(),
            action_count: na,
            d,
            k,
            config,
            steps: 0,
            seed,
            analogy_fingerprint: fingerprint(&analogy.store),
            config_hash: String::new(),
        },
        store,
        target,
        eta,
        value,
        high,
        low,
        varphi,
        obs: obs.clone(),
    })
}

impl CtaAgent {
    pub fn variant(&self) -> Variant {
        self.meta.config.variant
    }

    pub fn config(&self) -> &CtaConfig {
        &self.meta.config
    }

    pub fn k(&self) -> usize {
        self.meta.k
    }

    pub fn eta_net(&self) -> &Mlp {
        &self.eta
    }

    pub fn value_head(&self) -> &Head {
        &self.value
    }

    pub fn high_head(&self) -> Option<&Head> {
        self.high.as_ref()
    }

    pub fn low_head(&self) -> &Head {
        &self.low
    }

    pub fn observations(&self) -> &Matrix {
        &self.obs
    }

    pub fn parameter_count(&self) -> usize {
        self.store.scalar_count()
    }

    /// Raw conditioning rows (before `eta`) for pairs `(s_i, g_i)`.
    pub fn raw_conditioning(&self, s: &[usize], g: &[usize]) -> Matrix {
        match self.variant().conditioning() {
            Conditioning::Analogy => analogy_rows(&self.varphi, s, g),
            Conditioning::GoalEmbedding => self.varphi.gather_rows(g),
        }
    }

    /// `eta` applied to rows of `x`.
    pub fn compress(&self, x: &Matrix) -> Result<Matrix> {
        self.eta.eval(&self.store, x)
    }

    fn value_with(&self, params: &ParamStore, s: &[usize], g: &[usize]) -> Result<Vec<f64>> {
        let cond = self.eta.eval(params, &self.raw_conditioning(s, g))?;
        Ok(self.value.eval(params, &self.obs.gather_rows(s), &cond)?.into_vec())
    }

    /// Value evaluator over many pair lists under one parameter set; the
    /// state module runs once over the observation table.
    pub(crate) fn value_evaluator<'a>(&'a self, params: &'a ParamStore) -> Result<ValueEval<'a>> {
        Ok(ValueEval {
            agent: self,
            params,
            table: self.value.anchor_table(params, &self.obs)?,
        })
    }

    /// `V(s_i, g_i)` from the live parameters.
    pub fn value(&self, s: &[usize], g: &[usize]) -> Result<Vec<f64>> {
        self.value_with(&self.store, s, g)
    }

    /// `V(s_i, g_i)` from the EMA target.
    pub fn target_value(&self, s: &[usize], g: &[usize]) -> Result<Vec<f64>> {
        self.value_with(&self.target.shadow, s, g)
    }

    /// Bilinear value features (`p` per row) for pairs.
    pub fn value_features(&self, s: &[usize], g: &[usize]) -> Result<Matrix> {
        let cond = self.compress(&self.raw_conditioning(s, g))?;
        self.value.features(&self.store, &self.obs.gather_rows(s), &cond)
    }

    /// High-level mean for states `s` given compressed conditioning rows.
    pub fn high_mean(&self, s: &[usize], cond: &Matrix) -> Result<Matrix> {
        let high = self
            .high
            .as_ref()
            .ok_or_else(|| Error::usage(format!("variant {} has no high-level policy", self.variant())))?;
        high.eval(&self.store, &self.obs.gather_rows(s), cond)
    }

    /// Low-level (or flat policy) mean for states `s` given conditioning rows.
    pub fn low_mean(&self, s: &[usize], cond: &Matrix) -> Result<Matrix> {
        self.low.eval(&self.store, &self.obs.gather_rows(s), cond)
    }

    /// Actions for a batch of `(s, g)` pairs. With `stochastic`, Gaussian noise
    /// of the configured scales is added to the subgoal and the action mean;
    /// otherwise the means are used directly. Ties go to the lowest index.
    pub fn act(&self, s: &[usize], g: &[usize], stochastic: bool, rng: &mut impl Rng) -> Result<Vec<usize>> {
        let cfg = &self.meta.config;
        let cond = self.compress(&self.raw_conditioning(s, g))?;
        let mut mean = if self.variant().hierarchical() {
            let mut z = self.high_mean(s, &cond)?;
            if stochastic {
                add_noise(&mut z, cfg.sigma_h, rng);
            }
            self.low_mean(s, &z)?
        } else {
            self.low_mean(s, &cond)?
        };
        if stochastic {
            add_noise(&mut mean, cfg.sigma_l, rng);
        }
        Ok((0..mean.rows()).map(|r| argmax(mean.row(r))).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        tensor::write_params(&self.store, &mut w)?;
        tensor::write_params(&self.target.shadow, &mut w)?;
        drop(w);
        std::fs::write(sidecar(path), serde_json::to_string_pretty(&self.meta)?)?;
        Ok(())
    }

    /// Loads an agent saved by [`CtaAgent::save`]; `analogy` must be the model
    /// it was trained on.
    pub fn load(path: &Path, analogy: &DualAnalogyModel, obs: &Matrix) -> Result<Self> {
        let meta: CtaMeta = serde_json::from_str(&std::fs::read_to_string(sidecar(path))?)?;
        if meta.analogy_fingerprint != fingerprint(&analogy.store) {
            return Err(Error::Format(format!(
                "{} was trained on a different analogy model",
                path.display()
            )));
        }
        let mut agent = build_variant(meta.config.clone(), analogy, obs, meta.k, meta.seed)?;
        let mut r = BufReader::new(File::open(path)?);
        tensor::load_params_into(&mut agent.store, &mut r)?;
        tensor::load_params_into(&mut agent.target.shadow, &mut r)?;
        agent.meta = meta;
        Ok(agent)
    }
}

pub(crate) struct ValueEval<'a> {
    agent: &'a CtaAgent,
    params: &'a ParamStore,
    table: Option<Matrix>,
}

impl ValueEval<'_> {
    pub(crate) fn values(&self, s: &[usize], g: &[usize]) -> Result<Vec<f64>> {
        let a = self.agent;
        let cond = a.eta.eval(self.params, &a.raw_conditioning(s, g))?;
        let v = a.value.eval_indexed(self.params, &a.obs, self.table.as_ref(), s, &cond)?;
        Ok(v.into_vec())
    }
}

fn add_noise(m: &mut Matrix, sigma: f64, rng: &mut impl Rng) {
    for v in m.data_mut() {
        let z: f64 = rng.sample(StandardNormal);
        *v += sigma * z;
    }
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}
