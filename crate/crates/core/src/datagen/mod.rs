//! Scripted play data, hindsight goal sampling and the holdout editor.

mod holdout;
mod io;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Geometric};
use serde::{Deserialize, Serialize};

use crate::envsim::Environment;
use crate::oracle::{bfs_to_set, predecessors, UNREACHABLE};
use crate::par::{self, Execution};
use crate::{Error, Result};

pub use holdout::{apply_holdout, rescan, Condition, HoldoutRule};
pub use io::{read_dataset, read_header_only, write_dataset, DatasetHeader};

/// One trajectory: `states[t]` then `actions[t]` leads to `states[t + 1]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Episode {
    pub states: Vec<usize>,
    pub actions: Vec<usize>,
}

impl Episode {
    /// Number of transitions.
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

/// Record of an edit applied to a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProvenanceEntry {
    pub rule: HoldoutRule,
    pub removed: usize,
    pub overlap: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionDataset {
    pub env_id: String,
    /// `(name, domain size)` per factor.
    pub factors: Vec<(String, usize)>,
    pub seed: u64,
    pub epsilon: f64,
    pub config_hash: String,
    pub provenance: Vec<ProvenanceEntry>,
    episodes: Vec<Episode>,
    #[serde(skip)]
    transitions: Vec<(u32, u32)>,
    #[serde(skip)]
    obs_offsets: Vec<usize>,
}

impl TransitionDataset {
    pub fn new(
        env: &Environment,
        seed: u64,
        epsilon: f64,
        provenance: Vec<ProvenanceEntry>,
        episodes: Vec<Episode>,
    ) -> Result<Self> {
        for (i, ep) in episodes.iter().enumerate() {
            if ep.is_empty() || ep.states.len() != ep.actions.len() + 1 {
                return Err(Error::Format(format!("episode {i} is malformed or shorter than 2 states")));
            }
            if ep.states.iter().any(|&s| s >= env.state_count())
                || ep.actions.iter().any(|&a| a >= env.action_count())
            {
                return Err(Error::Format(format!("episode {i} has out-of-range entries")));
            }
        }
        let factors = env
            .spec()
            .factors
            .iter()
            .map(|f| (f.name.clone(), f.domain_size))
            .collect();
        let mut ds = TransitionDataset {
            env_id: env.id().to_string(),
            factors,
            seed,
            epsilon,
            config_hash: String::new(),
            provenance,
            episodes,
            transitions: Vec::new(),
            obs_offsets: Vec::new(),
        };
        ds.index();
        Ok(ds)
    }

    fn index(&mut self) {
        self.transitions = self
            .episodes
            .iter()
            .enumerate()
            .flat_map(|(e, ep)| (0..ep.len()).map(move |t| (e as u32, t as u32)))
            .collect();
        let mut acc = 0;
        self.obs_offsets = std::iter::once(0)
            .chain(self.episodes.iter().map(|ep| {
                acc += ep.states.len();
                acc
            }))
            .collect();
    }

    pub fn episodes(&self) -> &[Episode] {
        &self.episodes
    }

    pub fn transition_count(&self) -> usize {
        self.transitions.len()
    }

    pub fn observation_count(&self) -> usize {
        *self.obs_offsets.last().unwrap_or(&0)
    }

    /// `(episode, t)` of the `i`-th transition.
    pub fn transition(&self, i: usize) -> (usize, usize) {
        let (e, t) = self.transitions[i];
        (e as usize, t as usize)
    }

    pub fn state(&self, episode: usize, t: usize) -> usize {
        self.episodes[episode].states[t]
    }

    /// Uniformly random transition position.
    pub fn sample_transition(&self, rng: &mut impl Rng) -> (usize, usize) {
        self.transition(rng.random_range(0..self.transitions.len()))
    }

    /// Uniformly random stored observation.
    pub fn sample_state(&self, rng: &mut impl Rng) -> usize {
        let i = rng.random_range(0..self.observation_count());
        let e = self.obs_offsets.partition_point(|&o| o <= i) - 1;
        self.episodes[e].states[i - self.obs_offsets[e]]
    }

    /// Distinct states visited anywhere in the data.
    pub fn coverage(&self, state_count: usize) -> usize {
        let mut seen = vec![false; state_count];
        for ep in &self.episodes {
            for &s in &ep.states {
                seen[s] = true;
            }
        }
        seen.iter().filter(|&&b| b).count()
    }
}

/// Generates `episodes` play trajectories of `max_episode_steps` transitions.
///
/// The collector repeatedly picks a random `(factor, value)` target and walks
/// toward it along shortest paths, taking a uniformly random action with
/// probability `epsilon` instead.
pub fn generate_play(
    env: &Environment,
    episodes: usize,
    epsilon: f64,
    seed: u64,
    exec: Execution,
) -> Result<TransitionDataset> {
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(Error::spec("epsilon", format!("{epsilon} is outside [0, 1]")));
    }
    if episodes == 0 {
        return Err(Error::spec("episodes", "must be positive"));
    }
    let preds = predecessors(env);
    let n = env.state_count();
    // dist_to[f][v][s]: steps from s until factor f takes value v
    let dist_to: Vec<Vec<Vec<u32>>> = env
        .factor_sizes()
        .iter()
        .enumerate()
        .map(|(f, &size)| {
            (0..size)
                .map(|v| bfs_to_set(&preds, (0..n).filter(|&s| env.factor_value(s, f) == v)))
                .collect()
        })
        .collect();
    let eps: Vec<Episode> = par::map_range(exec, episodes, |i| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64 + 1);
        play_episode(env, &dist_to, epsilon, &mut rng)
    });
    TransitionDataset::new(env, seed, epsilon, Vec::new(), eps)
}

fn play_episode(env: &Environment, dist_to: &[Vec<Vec<u32>>], epsilon: f64, rng: &mut impl Rng) -> Episode {
    let mut s = rng.random_range(0..env.state_count());
    let mut states = vec![s];
    let mut actions = Vec::with_capacity(env.max_episode_steps());
    let mut target: Option<(usize, usize)> = None;
    let mut optimal = Vec::with_capacity(env.action_count());
    for _ in 0..env.max_episode_steps() {
        let satisfied = |t: Option<(usize, usize)>| t.is_none_or(|(f, v)| env.factor_value(s, f) == v);
        while satisfied(target) {
            let f = rng.random_range(0..env.factor_count());
            let v = rng.random_range(0..env.factor_sizes()[f]);
            if dist_to[f][v][s] != UNREACHABLE {
                target = Some((f, v));
            }
        }
        let (f, v) = target.expect("target chosen");
        let a = if rng.random::<f64>() < epsilon {
            rng.random_range(0..env.action_count())
        } else {
            let here = dist_to[f][v][s];
            optimal.clear();
            optimal.extend(
                (0..env.action_count()).filter(|&a| dist_to[f][v][env.step_index(s, a)] == here - 1),
            );
            optimal[rng.random_range(0..optimal.len())]
        };
        s = env.step_index(s, a);
        actions.push(a);
        states.push(s);
    }
    Episode { states, actions }
}

/// Mixture weights for hindsight goal relabeling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GoalSamplerConfig {
    pub p_cur: f64,
    pub p_traj: f64,
    pub p_rand: f64,
    /// Future offsets are Geometric(1 - gamma) when set, uniform otherwise.
    pub geometric: bool,
}

impl GoalSamplerConfig {
    pub const VALUE: GoalSamplerConfig = GoalSamplerConfig {
        p_cur: 0.2,
        p_traj: 0.5,
        p_rand: 0.3,
        geometric: true,
    };
    pub const ACTOR: GoalSamplerConfig = GoalSamplerConfig {
        p_cur: 0.0,
        p_traj: 1.0,
        p_rand: 0.0,
        geometric: false,
    };

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("p_cur", self.p_cur), ("p_traj", self.p_traj), ("p_rand", self.p_rand)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::spec(name, format!("{p} is outside [0, 1]")));
            }
        }
        let total = self.p_cur + self.p_traj + self.p_rand;
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::spec("p_cur + p_traj + p_rand", format!("sums to {total}, expected 1")));
        }
        Ok(())
    }
}

/// Which mixture component produced a goal.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GoalSource {
    Current,
    Future,
    Random,
}

/// A goal sampler bound to a dataset, with the geometric law prebuilt.
#[derive(Debug, Clone)]
pub struct GoalSampler {
    config: GoalSamplerConfig,
    geometric: Geometric,
}

impl GoalSampler {
    pub fn new(config: GoalSamplerConfig, gamma: f64) -> Result<Self> {
        config.validate()?;
        if !(0.0..1.0).contains(&gamma) {
            return Err(Error::spec("gamma", format!("{gamma} is outside [0, 1)")));
        }
        let geometric = Geometric::new(1.0 - gamma).map_err(|e| Error::spec("gamma", e.to_string()))?;
        Ok(GoalSampler { config, geometric })
    }

    /// Goal state for `s_t` at `(episode, t)`.
    pub fn sample(&self, ds: &TransitionDataset, episode: usize, t: usize, rng: &mut impl Rng) -> (usize, GoalSource) {
        let ep = &ds.episodes[episode];
        let last = ep.len();
        let u: f64 = rng.random();
        if u < self.config.p_cur {
            (ep.states[t], GoalSource::Current)
        } else if u < self.config.p_cur + self.config.p_traj {
            let idx = if self.config.geometric {
                let delta = 1 + self.geometric.sample(rng) as usize;
                (t.saturating_add(delta)).min(last)
            } else if t >= last {
                last
            } else {
                rng.random_range(t + 1..=last)
            };
            (ep.states[idx], GoalSource::Future)
        } else {
            (ds.sample_state(rng), GoalSource::Random)
        }
    }
}

/// Convenience wrapper returning only the goal state.
pub fn sample_value_goal(
    ds: &TransitionDataset,
    episode: usize,
    t: usize,
    sampler: &GoalSampler,
    rng: &mut impl Rng,
) -> usize {
    sampler.sample(ds, episode, t, rng).0
}

/// Index of the `k`-step subgoal, clipped to the final step `last`.
pub fn subgoal_index(t: usize, k: usize, last: usize) -> usize {
    (t + k).min(last)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{solve_distances, RewardMode};

    fn chain() -> Environment {
        Environment::preset("factorchain-3").unwrap()
    }

    #[test]
    fn greedy_chain_play_never_wastes_a_step() {
        let env = chain();
        let ds = generate_play(&env, 20, 0.0, 3, Execution::Sequential).unwrap();
        let table = solve_distances(&env, RewardMode::FullMatch, Execution::Sequential);
        for ep in ds.episodes() {
            for (t, w) in ep.states.windows(2).enumerate() {
                // greedy moves toward a target never clamp, so every step is a real move
                assert_eq!(table.get(w[0], w[1]), Some(1), "t={t}");
            }
        }
    }

    #[test]
    fn epsilon_one_is_a_uniform_walk() {
        let env = chain();
        let ds = generate_play(&env, 200, 1.0, 5, Execution::Sequential).unwrap();
        let mut counts = vec![0usize; env.action_count()];
        for ep in ds.episodes() {
            for &a in &ep.actions {
                counts[a] += 1;
            }
        }
        let total: usize = counts.iter().sum();
        for c in counts {
            let f = c as f64 / total as f64;
            assert!((f - 1.0 / 6.0).abs() < 0.01, "{f}");
        }
    }

    #[test]
    fn generation_is_deterministic_across_policies() {
        let env = Environment::preset("gridscene-5").unwrap();
        let a = generate_play(&env, 30, 0.2, 9, Execution::Sequential).unwrap();
        let b = generate_play(&env, 30, 0.2, 9, Execution::Parallel).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn subgoal_boundaries() {
        assert_eq!(subgoal_index(0, 4, 10), 4);
        assert_eq!(subgoal_index(9, 4, 10), 10);
        assert_eq!(subgoal_index(10, 4, 10), 10);
    }

    #[test]
    fn bad_sampler_configs_are_rejected() {
        let mut c = GoalSamplerConfig::VALUE;
        c.p_rand = 0.4;
        assert!(c.validate().is_err());
        c.p_rand = -0.1;
        assert!(c.validate().is_err());
        assert!(GoalSampler::new(GoalSamplerConfig::VALUE, 1.0).is_err());
    }

    #[test]
    fn current_only_and_terminal_truncation() {
        let env = chain();
        let ds = generate_play(&env, 4, 0.2, 1, Execution::Sequential).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cur = GoalSampler::new(
            GoalSamplerConfig {
                p_cur: 1.0,
                p_traj: 0.0,
                p_rand: 0.0,
                geometric: true,
            },
            0.99,
        )
        .unwrap();
        let traj = GoalSampler::new(
            GoalSamplerConfig {
                p_cur: 0.0,
                p_traj: 1.0,
                p_rand: 0.0,
                geometric: true,
            },
            0.99,
        )
        .unwrap();
        let ep = &ds.episodes()[0];
        let last = ep.len();
        for t in 0..last {
            assert_eq!(sample_value_goal(&ds, 0, t, &cur, &mut rng), ep.states[t]);
        }
        for _ in 0..50 {
            assert_eq!(sample_value_goal(&ds, 0, last, &traj, &mut rng), ep.states[last]);
        }
    }
}
