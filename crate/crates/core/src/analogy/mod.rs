//! Temporal-distance surrogate `phi(s) . varphi(g)` learned with goal-conditioned
//! IQL, and the dual analogies `varphi(g) - varphi(s)` it induces.

pub(crate) mod train;

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::GoalSamplerConfig;
use crate::tensor::{self, Bind, EmaTarget, Graph, Matrix, Mlp, ParamStore, Var};
use crate::{Error, Result};

pub use train::{train_analogy, AnalogyBatch, AnalogyLosses, TrainLog};

/// Hyperparameters of the analogy model and its training loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalogyConfig {
    pub d: usize,
    pub hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,
    pub layer_norm: bool,
    pub gamma: f64,
    pub iota: f64,
    pub tau: f64,
    /// Stop bootstrapping once `s = g`, making the goal absorbing.
    pub terminal_at_goal: bool,
    pub lr: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub value_goals: GoalSamplerConfig,
}

impl Default for AnalogyConfig {
    fn default() -> Self {
        AnalogyConfig {
            d: 32,
            hidden: vec![64, 64],
            critic_hidden: vec![64, 64],
            layer_norm: true,
            gamma: 0.99,
            iota: 0.7,
            tau: 0.005,
            terminal_at_goal: true,
            lr: 3e-4,
            batch_size: 256,
            steps: 20_000,
            value_goals: GoalSamplerConfig::VALUE,
        }
    }
}

impl AnalogyConfig {
    pub fn validate(&self) -> Result<()> {
        check_expectile(self.iota)?;
        if self.d == 0 {
            return Err(Error::spec("analogy.d", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.gamma) || self.gamma == 0.0 {
            return Err(Error::spec("analogy.gamma", format!("{} is outside (0, 1)", self.gamma)));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::spec("analogy.tau", format!("{} is outside (0, 1]", self.tau)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::spec("analogy.lr", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::spec("analogy.batch_size", "must be positive"));
        }
        self.value_goals.validate()
    }
}

fn check_expectile(iota: f64) -> Result<()> {
    if iota > 0.0 && iota < 1.0 {
        Ok(())
    } else {
        Err(Error::usage(format!("expectile {iota} is outside (0, 1)")))
    }
}

/// `|iota - 1{x < 0}| * x^2`.
pub fn expectile_loss(x: f64, iota: f64) -> Result<f64> {
    check_expectile(iota)?;
    Ok(tensor::expectile(x, iota))
}

/// Inverse of `V = -(1 - gamma^d) / (1 - gamma)`, clipped to `[0, d_max]`.
/// The flag reports whether clipping happened.
pub fn implied_distance(value: f64, gamma: f64, d_max: f64) -> (f64, bool) {
    let arg = 1.0 + (1.0 - gamma) * value;
    if arg <= 0.0 || value.is_nan() {
        return (d_max, true);
    }
    let d = arg.ln() / gamma.ln();
    if d < 0.0 {
        (0.0, true)
    } else if d > d_max {
        (d_max, true)
    } else {
        (d, false)
    }
}

/// Sidecar metadata stored next to a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalogyMeta {
    pub env_id: String,
    pub obs_dim: usize,
    pub action_count: usize,
    pub config: AnalogyConfig,
    pub steps: u64,
    pub seed: u64,
    pub config_hash: String,
}

/// Encoders `phi` (state) and `varphi` (goal), the critic `Q`, and EMA
/// copies of all three.
#[derive(Debug, Clone)]
pub struct DualAnalogyModel {
    pub meta: AnalogyMeta,
    pub store: ParamStore,
    pub target: EmaTarget,
    phi: Mlp,
    varphi: Mlp,
    critic: Mlp,
}

impl DualAnalogyModel {
    pub fn new(
        env_id: &str,
        obs_dim: usize,
        action_count: usize,
        config: AnalogyConfig,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let ln = config.layer_norm;
        let phi = Mlp::new(&mut store, "phi", obs_dim, &config.hidden, config.d, ln, &mut rng);
        let varphi = Mlp::new(&mut store, "varphi", obs_dim, &config.hidden, config.d, ln, &mut rng);
        let critic = Mlp::new(
            &mut store,
            "critic",
            2 * obs_dim + action_count,
            &config.critic_hidden,
            1,
            ln,
            &mut rng,
        );
        let target = EmaTarget::new(&store, config.tau);
        Ok(DualAnalogyModel {
            meta: AnalogyMeta {
                env_id: env_id.to_string(),
                obs_dim,
                action_count,
                config,
                steps: 0,
                seed,
                config_hash: String::new(),
            },
            store,
            target,
            phi,
            varphi,
            critic,
        })
    }

    pub fn config(&self) -> &AnalogyConfig {
        &self.meta.config
    }

    pub fn d(&self) -> usize {
        self.meta.config.d
    }

    pub fn phi_net(&self) -> &Mlp {
        &self.phi
    }

    pub fn varphi_net(&self) -> &Mlp {
        &self.varphi
    }

    pub fn critic_net(&self) -> &Mlp {
        &self.critic
    }

    /// `phi` applied to every row of `obs`.
    pub fn phi(&self, obs: &Matrix) -> Result<Matrix> {
        self.phi.eval(&self.store, obs)
    }

    /// `varphi` applied to every row of `obs`.
    pub fn varphi(&self, obs: &Matrix) -> Result<Matrix> {
        self.varphi.eval(&self.store, obs)
    }

    /// Critic input rows `[obs(s), onehot(a), obs(g)]`.
    pub fn critic_input(&self, obs: &Matrix, s: &[usize], a: &[usize], g: &[usize]) -> Matrix {
        let (o, na) = (self.meta.obs_dim, self.meta.action_count);
        let mut x = Matrix::zeros(s.len(), 2 * o + na);
        for i in 0..s.len() {
            let row = x.row_mut(i);
            row[..o].copy_from_slice(obs.row(s[i]));
            row[o + a[i]] = 1.0;
            row[o + na..].copy_from_slice(obs.row(g[i]));
        }
        x
    }

    /// Tape version of the critic on prepared inputs.
    pub fn critic_forward(&self, g: &mut Graph, store: &ParamStore, x: Var, bind: Bind) -> Result<Var> {
        self.critic.forward(g, store, x, bind)
    }

    /// Every pairwise value `phi(s_i) . varphi(g_j)` for rows of `obs`.
    pub fn value_matrix(&self, obs: &Matrix) -> Result<Matrix> {
        let p = self.phi(obs)?;
        let v = self.varphi(obs)?;
        let mut out = Matrix::zeros(obs.rows(), obs.rows());
        tensor::gemm(1.0, &p, false, &v, true, 0.0, &mut out);
        Ok(out)
    }

    /// Saves parameters and EMA targets, plus a `.json` sidecar.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        tensor::write_params(&self.store, &mut w)?;
        tensor::write_params(&self.target.shadow, &mut w)?;
        drop(w);
        std::fs::write(sidecar(path), serde_json::to_string_pretty(&self.meta)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let meta: AnalogyMeta = serde_json::from_str(&std::fs::read_to_string(sidecar(path))?)?;
        let mut model = DualAnalogyModel::new(
            &meta.env_id,
            meta.obs_dim,
            meta.action_count,
            meta.config.clone(),
            meta.seed,
        )?;
        let mut r = BufReader::new(File::open(path)?);
        tensor::load_params_into(&mut model.store, &mut r)?;
        tensor::load_params_into(&mut model.target.shadow, &mut r)?;
        model.meta = meta;
        Ok(model)
    }
}

pub(crate) fn sidecar(path: &Path) -> std::path::PathBuf {
    path.with_extension("json")
}

/// `phi(s) . varphi(g)` for single embeddings.
pub fn td_value(phi_s: &[f64], varphi_g: &[f64]) -> f64 {
    phi_s.iter().zip(varphi_g).map(|(a, b)| a * b).sum()
}

/// `varphi(g) - varphi(s)`.
pub fn dual_analogy(varphi_s: &[f64], varphi_g: &[f64]) -> Vec<f64> {
    varphi_g.iter().zip(varphi_s).map(|(g, s)| g - s).collect()
}

/// Dual analogies of index pairs against a precomputed `varphi` table.
pub fn analogy_rows(varphi: &Matrix, s: &[usize], g: &[usize]) -> Matrix {
    let d = varphi.cols();
    let mut out = Matrix::zeros(s.len(), d);
    for i in 0..s.len() {
        let (a, b) = (varphi.row(s[i]), varphi.row(g[i]));
        for (o, (x, y)) in out.row_mut(i).iter_mut().zip(b.iter().zip(a)) {
            *o = x - y;
        }
    }
    out
}

/// Cosine similarity; zero vectors give 0.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot = td_value(a, b);
    let na = td_value(a, a).sqrt();
    let nb = td_value(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}
