use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::CtaAgent;
use crate::datagen::{subgoal_index, GoalSampler, TransitionDataset};
use crate::tensor::{Adam, Bind, Graph, Matrix, ParamStore, Var};
use crate::{Error, Result};

/// Transition indices with their value goals, actor goals and `k`-step subgoals.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CtaBatch {
    pub s: Vec<usize>,
    pub a: Vec<usize>,
    pub s_next: Vec<usize>,
    pub subgoal: Vec<usize>,
    pub value_goal: Vec<usize>,
    pub actor_goal: Vec<usize>,
}

impl CtaBatch {
    pub fn sample(
        ds: &TransitionDataset,
        k: usize,
        value: &GoalSampler,
        actor: &GoalSampler,
        size: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let mut b = CtaBatch::default();
        for _ in 0..size {
            let (e, t) = ds.sample_transition(rng);
            let ep = &ds.episodes()[e];
            b.s.push(ep.states[t]);
            b.a.push(ep.actions[t]);
            b.s_next.push(ep.states[t + 1]);
            b.subgoal.push(ep.states[subgoal_index(t, k, ep.len())]);
            b.value_goal.push(value.sample(ds, e, t, rng).0);
            b.actor_goal.push(actor.sample(ds, e, t, rng).0);
        }
        b
    }

    pub fn len(&self) -> usize {
        self.s.len()
    }

    pub fn is_empty(&self) -> bool {
        self.s.is_empty()
    }
}

/// Value loss and the two advantage-weighted log-likelihoods (the latter are
/// maximized; the optimized objective is `value - high - low`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Default)]
pub struct CtaLosses {
    pub value: f64,
    pub high: f64,
    pub low: f64,
}

/// Tape handles of one loss evaluation.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub total: Var,
    pub value: Var,
    pub high: Option<Var>,
    pub low: Var,
}

/// Advantage-weighted regression weight `exp(beta * adv)` clipped to `[0, w_max]`.
pub fn awr_weight(adv: f64, beta: f64, w_max: f64) -> f64 {
    (beta * adv).exp().min(w_max)
}

fn awr_weights(adv: &[f64], beta: f64, w_max: f64) -> Vec<f64> {
    adv.iter().map(|&a| awr_weight(a, beta, w_max)).collect()
}

/// One-step value target for a pair: `-1 + gamma * boot` away from the goal,
/// `0` at the goal when it is absorbing, `gamma * boot` otherwise.
pub fn value_target(at_goal: bool, boot: f64, gamma: f64, terminal_at_goal: bool) -> f64 {
    match (at_goal, terminal_at_goal) {
        (false, _) => -1.0 + gamma * boot,
        (true, true) => 0.0,
        (true, false) => gamma * boot,
    }
}

fn one_hot(a: &[usize], n: usize) -> Matrix {
    let mut m = Matrix::zeros(a.len(), n);
    for (r, &i) in a.iter().enumerate() {
        m.set(r, i, 1.0);
    }
    m
}

impl CtaAgent {
    /// Weighted Gaussian log-likelihood `mean_i w_i log N(target_i; mean_i, sigma^2 I)`.
    pub(crate) fn weighted_log_likelihood(g: &mut Graph, mean: Var, target: Matrix, weights: Vec<f64>, sigma: f64) -> Var {
        let dim = target.cols() as f64;
        let t = g.constant(target);
        let diff = g.sub(t, mean);
        let sq = g.square(diff);
        let sq = g.sum_rows(sq);
        let var = sigma * sigma;
        let logp = g.scale(sq, -0.5 / var);
        let logp = g.offset(logp, -0.5 * dim * (2.0 * std::f64::consts::PI * var).ln());
        let w = g.constant(Matrix::column(weights));
        let wl = g.mul(logp, w);
        g.mean(wl)
    }

    /// Builds every loss with trainable parameters from `params`. Stop-gradient
    /// quantities (compressed targets, policy conditioning, advantages) come
    /// from the agent's own parameters and EMA targets as constants.
    pub fn losses(&self, g: &mut Graph, params: &ParamStore, batch: &CtaBatch) -> Result<LossVars> {
        let cfg = &self.meta.config;
        let n = batch.len();
        let obs = &self.obs;
        let full = (obs.rows() <= 2 * n).then(|| g.constant(obs.clone()));

        // value: expectile regression toward the one-step target
        let raw = g.constant(self.raw_conditioning(&batch.s, &batch.value_goal));
        let cond = self.eta.forward(g, params, raw, Bind::Train)?;
        let v = self.value.forward(g, params, obs, full, &batch.s, cond)?;
        let boot = self.value_evaluator(&self.target.shadow)?.values(&batch.s_next, &batch.value_goal)?;
        let y: Vec<f64> = (0..n)
            .map(|i| value_target(batch.s[i] == batch.value_goal[i], boot[i], cfg.gamma, cfg.terminal_at_goal))
            .collect();
        let y = g.constant(Matrix::column(y));
        let u = g.sub(y, v);
        let lv = g.expectile(u, cfg.kappa);
        let lv = g.mean(lv);

        // live-value advantages, all pairs in one pass:
        // A_high = V(s_k, g) - V(s, g), A_low = V(s', goal_low) - V(s, goal_low)
        let hierarchical = self.high.is_some();
        let low_goal = if hierarchical { &batch.subgoal } else { &batch.actor_goal };
        let mut from_to = [batch.s.as_slice(), &batch.s_next].concat();
        let mut goals = [low_goal.as_slice(), low_goal].concat();
        if hierarchical {
            from_to.extend_from_slice(&batch.s);
            from_to.extend_from_slice(&batch.subgoal);
            goals.extend_from_slice(&batch.actor_goal);
            goals.extend_from_slice(&batch.actor_goal);
        }
        let v = self.value_evaluator(&self.store)?.values(&from_to, &goals)?;
        let adv = |offset: usize| -> Vec<f64> { (0..n).map(|i| v[offset + n + i] - v[offset + i]).collect() };
        let sub_cond = self.compress(&self.raw_conditioning(&batch.s, &batch.subgoal))?;

        let (lh, ll) = if let Some(high) = &self.high {
            let ch = self.compress(&self.raw_conditioning(&batch.s, &batch.actor_goal))?;
            let ch = g.constant(ch);
            let mu_h = high.forward(g, params, obs, full, &batch.s, ch)?;
            let w = awr_weights(&adv(2 * n), cfg.beta_h, cfg.w_max);
            let lh = Self::weighted_log_likelihood(g, mu_h, sub_cond.clone(), w, cfg.sigma_h);

            let cl = g.constant(sub_cond);
            let mu_l = self.low.forward(g, params, obs, full, &batch.s, cl)?;
            let w = awr_weights(&adv(0), cfg.beta_l, cfg.w_max);
            let target = one_hot(&batch.a, self.meta.action_count);
            let ll = Self::weighted_log_likelihood(g, mu_l, target, w, cfg.sigma_l);
            (Some(lh), ll)
        } else {
            let c = self.compress(&self.raw_conditioning(&batch.s, &batch.actor_goal))?;
            let c = g.constant(c);
            let mu = self.low.forward(g, params, obs, full, &batch.s, c)?;
            let w = awr_weights(&adv(0), cfg.beta_l, cfg.w_max);
            let target = one_hot(&batch.a, self.meta.action_count);
            (None, Self::weighted_log_likelihood(g, mu, target, w, cfg.sigma_l))
        };

        let mut total = g.sub(lv, ll);
        if let Some(lh) = lh {
            total = g.sub(total, lh);
        }
        Ok(LossVars {
            total,
            value: lv,
            high: lh,
            low: ll,
        })
    }

    /// One joint Adam step followed by the EMA update of the value target.
    pub fn train_step(&mut self, opt: &mut Adam, batch: &CtaBatch) -> Result<CtaLosses> {
        let mut g = Graph::new();
        let vars = self.losses(&mut g, &self.store, batch)?;
        let losses = CtaLosses {
            value: g.value(vars.value).item(),
            high: vars.high.map_or(0.0, |h| g.value(h).item()),
            low: g.value(vars.low).item(),
        };
        if !g.value(vars.total).item().is_finite() {
            return Err(Error::NonFinite(format!(
                "{} losses {losses:?} at step {}",
                self.variant(),
                self.meta.steps
            )));
        }
        let grads = g.backward(vars.total);
        opt.step(&mut self.store, &grads)?;
        self.target.update(&self.store);
        self.meta.steps += 1;
        Ok(losses)
    }
}

/// Optimizer, samplers and batch generator for one training run.
#[derive(Debug, Clone)]
pub struct CtaTrainer {
    pub opt: Adam,
    rng: ChaCha8Rng,
    value: GoalSampler,
    actor: GoalSampler,
}

impl CtaTrainer {
    pub fn new(agent: &CtaAgent, seed: u64) -> Result<Self> {
        let cfg = &agent.meta.config;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(0xC7A);
        Ok(CtaTrainer {
            opt: Adam::new(&agent.store, cfg.lr),
            rng,
            value: GoalSampler::new(cfg.value_goals, cfg.gamma)?,
            actor: GoalSampler::new(cfg.actor_goals, cfg.gamma)?,
        })
    }

    pub fn sample(&mut self, agent: &CtaAgent, ds: &TransitionDataset) -> CtaBatch {
        let size = agent.meta.config.batch_size;
        CtaBatch::sample(ds, agent.k(), &self.value, &self.actor, size, &mut self.rng)
    }

    pub fn step(&mut self, agent: &mut CtaAgent, ds: &TransitionDataset) -> Result<CtaLosses> {
        let batch = self.sample(agent, ds);
        agent.train_step(&mut self.opt, &batch)
    }
}

/// Trains for `steps` steps. Every `every` steps (and at the end) calls
/// `on_checkpoint` with the agent and the losses averaged since the last call.
pub fn train_cta(
    agent: &mut CtaAgent,
    ds: &TransitionDataset,
    steps: usize,
    seed: u64,
    every: usize,
    mut on_checkpoint: impl FnMut(&CtaAgent, &CtaLosses) -> Result<()>,
) -> Result<()> {
    let mut trainer = CtaTrainer::new(agent, seed)?;
    let mut acc = CtaLosses::default();
    let mut count = 0usize;
    for step in 1..=steps {
        let l = trainer.step(agent, ds)?;
        acc.value += l.value;
        acc.high += l.high;
        acc.low += l.low;
        count += 1;
        if step % every.max(1) == 0 || step == steps {
            let c = count as f64;
            let mean = CtaLosses {
                value: acc.value / c,
                high: acc.high / c,
                low: acc.low / c,
            };
            on_checkpoint(agent, &mean)?;
            acc = CtaLosses::default();
            count = 0;
        }
    }
    Ok(())
}
