use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::DualAnalogyModel;
use crate::datagen::{GoalSampler, TransitionDataset};
use crate::tensor::{Adam, Bind, Graph, Matrix, Mlp, ParamStore, Var};
use crate::{Error, Result};

/// State indices of `(s, a, s', g)` tuples.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct AnalogyBatch {
    pub s: Vec<usize>,
    pub a: Vec<usize>,
    pub s_next: Vec<usize>,
    pub g: Vec<usize>,
}

impl AnalogyBatch {
    pub fn sample(ds: &TransitionDataset, sampler: &GoalSampler, size: usize, rng: &mut impl Rng) -> Self {
        let mut b = AnalogyBatch::default();
        for _ in 0..size {
            let (e, t) = ds.sample_transition(rng);
            let ep = &ds.episodes()[e];
            b.s.push(ep.states[t]);
            b.a.push(ep.actions[t]);
            b.s_next.push(ep.states[t + 1]);
            b.g.push(sampler.sample(ds, e, t, rng).0);
        }
        b
    }

    pub fn len(&self) -> usize {
        self.s.len()
    }

    pub fn is_empty(&self) -> bool {
        self.s.is_empty()
    }

    fn dump(&self) -> String {
        let n = self.len().min(8);
        format!(
            "s={:?} a={:?} s'={:?} g={:?}",
            &self.s[..n],
            &self.a[..n],
            &self.s_next[..n],
            &self.g[..n]
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AnalogyLosses {
    pub representation: f64,
    pub critic: f64,
}

/// One logged training row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TrainLog {
    pub step: u64,
    pub representation: f64,
    pub critic: f64,
}

/// Encodes the rows `idx` of `obs`, running the network over the whole table
/// when that is cheaper than running it over the gathered batch.
pub(crate) fn encode_rows(
    g: &mut Graph,
    net: &Mlp,
    params: &ParamStore,
    obs: &Matrix,
    full: Option<Var>,
    idx: &[usize],
) -> Result<Var> {
    match full {
        Some(all) => {
            let h = net.forward(g, params, all, Bind::Train)?;
            Ok(g.gather(h, idx))
        }
        None => {
            let x = g.constant(obs.gather_rows(idx));
            net.forward(g, params, x, Bind::Train)
        }
    }
}

/// Tape-free counterpart of [`encode_rows`].
pub(crate) fn eval_rows(net: &Mlp, params: &ParamStore, obs: &Matrix, full: bool, idx: &[usize]) -> Result<Matrix> {
    if full {
        Ok(net.eval(params, obs)?.gather_rows(idx))
    } else {
        net.eval(params, &obs.gather_rows(idx))
    }
}

/// Row-wise dot products of two equally shaped matrices.
pub(crate) fn row_dots(a: &Matrix, b: &Matrix) -> Vec<f64> {
    (0..a.rows())
        .map(|i| a.row(i).iter().zip(b.row(i)).map(|(x, y)| x * y).sum())
        .collect()
}

impl DualAnalogyModel {
    /// Builds `(total, representation, critic)` losses with trainable
    /// parameters taken from `params`; targets come from the EMA copy.
    pub fn losses(
        &self,
        g: &mut Graph,
        params: &ParamStore,
        obs: &Matrix,
        batch: &AnalogyBatch,
    ) -> Result<(Var, Var, Var)> {
        let cfg = &self.meta.config;
        let shadow = &self.target.shadow;
        let n = batch.len();

        let full = (obs.rows() <= 2 * n).then(|| g.constant(obs.clone()));
        let ps = encode_rows(g, &self.phi, params, obs, full, &batch.s)?;
        let vg = encode_rows(g, &self.varphi, params, obs, full, &batch.g)?;
        let v = g.row_dot(ps, vg);

        let x = self.critic_input(obs, &batch.s, &batch.a, &batch.g);
        let q_bar = self.critic.eval(shadow, &x)?;
        let q_bar = g.constant(q_bar);
        // upper expectile of the target critic
        let u = g.sub(q_bar, v);
        let rep = g.expectile(u, cfg.iota);
        let rep = g.mean(rep);

        let next = eval_rows(&self.phi, shadow, obs, full.is_some(), &batch.s_next)?;
        let goal = eval_rows(&self.varphi, shadow, obs, full.is_some(), &batch.g)?;
        let boot = row_dots(&next, &goal);
        let y: Vec<f64> = (0..n)
            .map(|i| {
                if batch.s[i] != batch.g[i] {
                    -1.0 + cfg.gamma * boot[i]
                } else if cfg.terminal_at_goal {
                    0.0
                } else {
                    cfg.gamma * boot[i]
                }
            })
            .collect();
        let y = g.constant(Matrix::column(y));
        let xq = g.constant(x);
        let q = self.critic.forward(g, params, xq, Bind::Train)?;
        let diff = g.sub(q, y);
        let sq = g.square(diff);
        let critic = g.mean(sq);

        let total = g.add(rep, critic);
        Ok((total, rep, critic))
    }

    /// One joint Adam step on both losses followed by the EMA update.
    pub fn train_step(&mut self, opt: &mut Adam, obs: &Matrix, batch: &AnalogyBatch) -> Result<AnalogyLosses> {
        let mut g = Graph::new();
        let (total, rep, critic) = self.losses(&mut g, &self.store, obs, batch)?;
        let losses = AnalogyLosses {
            representation: g.value(rep).item(),
            critic: g.value(critic).item(),
        };
        if !g.value(total).item().is_finite() {
            return Err(Error::NonFinite(format!(
                "analogy loss {losses:?} at step {}; batch {}",
                self.meta.steps,
                batch.dump()
            )));
        }
        let grads = g.backward(total);
        opt.step(&mut self.store, &grads)?;
        self.target.update(&self.store);
        self.meta.steps += 1;
        Ok(losses)
    }
}

/// Runs `steps` training steps on relabeled batches from `ds`, calling
/// `on_log` every `log_every` steps (and on the last step).
pub fn train_analogy(
    model: &mut DualAnalogyModel,
    ds: &TransitionDataset,
    obs: &Matrix,
    steps: usize,
    seed: u64,
    log_every: usize,
    mut on_log: impl FnMut(&TrainLog),
) -> Result<Vec<TrainLog>> {
    let cfg = model.meta.config.clone();
    let sampler = GoalSampler::new(cfg.value_goals, cfg.gamma)?;
    let mut opt = Adam::new(&model.store, cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0xA1);
    let mut log = Vec::new();
    let (mut rep_acc, mut q_acc, mut count) = (0.0, 0.0, 0usize);
    for step in 1..=steps {
        let batch = AnalogyBatch::sample(ds, &sampler, cfg.batch_size, &mut rng);
        let l = model.train_step(&mut opt, obs, &batch)?;
        rep_acc += l.representation;
        q_acc += l.critic;
        count += 1;
        if step % log_every.max(1) == 0 || step == steps {
            let row = TrainLog {
                step: model.meta.steps,
                representation: rep_acc / count as f64,
                critic: q_acc / count as f64,
            };
            on_log(&row);
            log.push(row);
            (rep_acc, q_acc, count) = (0.0, 0.0, 0);
        }
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analogy::AnalogyConfig;
    use crate::datagen::{generate_play, GoalSamplerConfig};
    use crate::envsim::Environment;
    use crate::oracle::{solve_distances, value_of, RewardMode};
    use crate::par::Execution;
    use crate::tensor::gradcheck::check_gradients;

    fn small() -> (Environment, Matrix, DualAnalogyModel) {
        let env = Environment::preset("factorchain-3").unwrap();
        let obs = Matrix::from_vec(env.state_count(), env.obs_dim(), env.observation_table());
        let cfg = AnalogyConfig {
            d: 4,
            hidden: vec![8],
            critic_hidden: vec![8],
            ..AnalogyConfig::default()
        };
        let m = DualAnalogyModel::new(env.id(), env.obs_dim(), env.action_count(), cfg, 5).unwrap();
        (env, obs, m)
    }

    #[test]
    fn combined_loss_matches_finite_differences() {
        let (env, obs, m) = small();
        let ds = generate_play(&env, 4, 0.2, 0, Execution::Sequential).unwrap();
        let sampler = GoalSampler::new(GoalSamplerConfig::VALUE, 0.99).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..3 {
            let batch = AnalogyBatch::sample(&ds, &sampler, 6, &mut rng);
            let r = check_gradients(&m.store, 6, 1e-6, &mut rng, |g, p| {
                m.losses(g, p, &obs, &batch).unwrap().0
            });
            assert!(r.max_rel_error <= 1e-4, "{r:?}");
        }
    }

    #[test]
    fn identical_pairs_drop_the_reward_term() {
        let (_, obs, mut m) = small();
        m.meta.config.terminal_at_goal = false;
        let batch = AnalogyBatch {
            s: vec![3, 7],
            a: vec![0, 1],
            s_next: vec![4, 7],
            g: vec![3, 7],
        };
        let mut g = Graph::new();
        let (_, _, critic) = m.losses(&mut g, &m.store, &obs, &batch).unwrap();
        let x = m.critic_input(&obs, &batch.s, &batch.a, &batch.g);
        let q = m.critic.eval(&m.store, &x).unwrap();
        let next = m.phi.eval(&m.store, &obs.gather_rows(&batch.s_next)).unwrap();
        let goal = m.varphi.eval(&m.store, &obs.gather_rows(&batch.g)).unwrap();
        let boot = row_dots(&next, &goal);
        let want = (0..2).map(|i| (q.get(i, 0) - 0.99 * boot[i]).powi(2)).sum::<f64>() / 2.0;
        assert!((g.value(critic).item() - want).abs() < 1e-12);

        // absorbing goals regress Q(g, a, g) to zero
        m.meta.config.terminal_at_goal = true;
        let mut g = Graph::new();
        let (_, _, critic) = m.losses(&mut g, &m.store, &obs, &batch).unwrap();
        let want = (0..2).map(|i| q.get(i, 0).powi(2)).sum::<f64>() / 2.0;
        assert!((g.value(critic).item() - want).abs() < 1e-12);
    }

    #[test]
    fn oracle_critic_drives_representation_loss_to_zero() {
        // Freeze Q-bar at the oracle value by fitting phi . varphi directly
        // to a point-mass target; the expectile of a point mass is the point.
        let (env, obs, _) = small();
        let cfg = AnalogyConfig {
            d: 8,
            hidden: vec![16],
            critic_hidden: vec![8],
            ..AnalogyConfig::default()
        };
        let mut m = DualAnalogyModel::new(env.id(), env.obs_dim(), env.action_count(), cfg, 5).unwrap();
        let table = solve_distances(&env, RewardMode::FullMatch, Execution::Sequential);
        let mut opt = Adam::new(&m.store, 0.01);
        let states = [0, 5, 11, 17, 23, 30, 38, 47];
        let pairs: Vec<(usize, usize)> = states.iter().flat_map(|&s| states.iter().map(move |&g| (s, g))).collect();
        let mut first = None;
        let mut last = 0.0;
        for _ in 0..1500 {
            let mut g = Graph::new();
            let s: Vec<usize> = pairs.iter().map(|p| p.0).collect();
            let gl: Vec<usize> = pairs.iter().map(|p| p.1).collect();
            let ps = encode_rows(&mut g, &m.phi, &m.store, &obs, None, &s).unwrap();
            let vg = encode_rows(&mut g, &m.varphi, &m.store, &obs, None, &gl).unwrap();
            let v = g.row_dot(ps, vg);
            let target: Vec<f64> = pairs
                .iter()
                .map(|&(s, t)| value_of(table.get(s, t), 0.99).modified)
                .collect();
            let t = g.constant(Matrix::column(target));
            let u = g.sub(t, v);
            let l = g.expectile(u, 0.7);
            let l = g.mean(l);
            let val = g.value(l).item();
            first.get_or_insert(val);
            last = val;
            let grads = g.backward(l);
            opt.step(&mut m.store, &grads).unwrap();
        }
        assert!(last < 1e-3 * first.unwrap(), "{first:?} -> {last}");
    }

    #[test]
    fn training_is_reproducible() {
        let (env, obs, m) = small();
        let ds = generate_play(&env, 10, 0.2, 0, Execution::Sequential).unwrap();
        let run = || {
            let mut m = m.clone();
            let log = train_analogy(&mut m, &ds, &obs, 30, 9, 10, |_| {}).unwrap();
            (m.store, log)
        };
        let (a, la) = run();
        let (b, lb) = run();
        assert_eq!(a, b);
        assert_eq!(la, lb);
        assert_eq!(la.len(), 3);
    }
}
