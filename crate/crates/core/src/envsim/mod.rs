//! Deterministic, fully enumerable factored environments.
//!
//! Two families are supported. `FactorChain` is an exact product MDP: each
//! action moves one chain factor by one step. `GridScene` couples toggleable
//! objects through a shared agent walking on a grid.

mod label;
mod spec;

pub use label::{EndogenousLabel, FactorMask};
pub use spec::{EnvSpec, Family, FactorKind, FactorSpec, GRID_ACTIONS, MAX_STATES, PRESETS};

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Value of a lock factor that permits toggling the factors it guards.
pub const UNLOCKED: usize = 0;

/// One environment state: a value per factor.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FactoredState(pub Vec<usize>);

impl FactoredState {
    pub fn values(&self) -> &[usize] {
        &self.0
    }
}

impl From<Vec<usize>> for FactoredState {
    fn from(v: Vec<usize>) -> Self {
        FactoredState(v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GridAction {
    Up = 0,
    Down = 1,
    Left = 2,
    Right = 3,
    Interact = 4,
    Noop = 5,
}

impl GridAction {
    pub const ALL: [GridAction; 6] = [
        GridAction::Up,
        GridAction::Down,
        GridAction::Left,
        GridAction::Right,
        GridAction::Interact,
        GridAction::Noop,
    ];

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Action index of a FactorChain move of `factor` by `delta` (+1 or -1).
pub fn chain_action(factor: usize, delta: i8) -> usize {
    2 * factor + usize::from(delta > 0)
}

/// An immutable environment built from a validated [`EnvSpec`].
#[derive(Debug, Clone)]
pub struct Environment {
    spec: EnvSpec,
    sizes: Vec<usize>,
    strides: Vec<usize>,
    n_states: usize,
    agent: Option<usize>,
    guards: Vec<Option<usize>>,
    /// `next[s * action_count + a]`.
    next: Vec<u32>,
    obs_dim: usize,
}

pub fn make_env(spec: EnvSpec) -> Result<Environment> {
    Environment::new(spec)
}

impl Environment {
    pub fn new(spec: EnvSpec) -> Result<Self> {
        spec.validate()?;
        let sizes: Vec<usize> = spec.factors.iter().map(|f| f.domain_size).collect();
        let mut strides = Vec::with_capacity(sizes.len());
        let mut acc = 1;
        for &n in &sizes {
            strides.push(acc);
            acc *= n;
        }
        let agent = spec
            .factors
            .iter()
            .position(|f| f.kind == FactorKind::AgentPosition);
        let guards = spec
            .factors
            .iter()
            .map(|f| f.guard.as_ref().and_then(|g| spec.factor_index(g)))
            .collect();
        let obs_dim = match spec.grid {
            Some([w, h]) => spec
                .factors
                .iter()
                .map(|f| match f.kind {
                    FactorKind::AgentPosition => w + h,
                    _ => f.domain_size,
                })
                .sum(),
            None => sizes.iter().sum(),
        };
        let mut env = Environment {
            n_states: acc,
            spec,
            sizes,
            strides,
            agent,
            guards,
            next: Vec::new(),
            obs_dim,
        };
        let a = env.action_count();
        let mut next = Vec::with_capacity(env.n_states * a);
        for s in 0..env.n_states {
            let state = env.decode(s);
            for action in 0..a {
                next.push(env.encode(&env.transition(&state, action)) as u32);
            }
        }
        env.next = next;
        Ok(env)
    }

    pub fn preset(id: &str) -> Result<Self> {
        Environment::new(EnvSpec::preset(id)?)
    }

    pub fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    pub fn id(&self) -> &str {
        &self.spec.env_id
    }

    pub fn family(&self) -> Family {
        self.spec.family
    }

    pub fn factor_count(&self) -> usize {
        self.sizes.len()
    }

    pub fn factor_sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn action_count(&self) -> usize {
        self.spec.action_count
    }

    pub fn state_count(&self) -> usize {
        self.n_states
    }

    pub fn max_episode_steps(&self) -> usize {
        self.spec.max_episode_steps
    }

    pub fn agent_factor(&self) -> Option<usize> {
        self.agent
    }

    /// The lock factor guarding `factor`, if any.
    pub fn guard_of(&self, factor: usize) -> Option<usize> {
        self.guards[factor]
    }

    pub fn encode(&self, state: &FactoredState) -> usize {
        state
            .0
            .iter()
            .zip(&self.strides)
            .map(|(v, s)| v * s)
            .sum()
    }

    pub fn decode(&self, index: usize) -> FactoredState {
        FactoredState(
            self.sizes
                .iter()
                .zip(&self.strides)
                .map(|(&n, &s)| (index / s) % n)
                .collect(),
        )
    }

    /// Value of `factor` in the state with the given index.
    pub fn factor_value(&self, index: usize, factor: usize) -> usize {
        (index / self.strides[factor]) % self.sizes[factor]
    }

    /// Index of `index` with `factor` replaced by `value`.
    pub fn with_factor(&self, index: usize, factor: usize, value: usize) -> usize {
        let old = self.factor_value(index, factor);
        index - old * self.strides[factor] + value * self.strides[factor]
    }

    pub fn check_state(&self, state: &FactoredState) -> Result<()> {
        if state.0.len() != self.sizes.len() {
            return Err(Error::usage(format!(
                "state has {} factors, environment `{}` has {}",
                state.0.len(),
                self.id(),
                self.sizes.len()
            )));
        }
        for (i, (&v, &n)) in state.0.iter().zip(&self.sizes).enumerate() {
            if v >= n {
                return Err(Error::usage(format!(
                    "factor `{}` value {v} outside [0, {n})",
                    self.spec.factors[i].name
                )));
            }
        }
        Ok(())
    }

    /// All states in index order.
    pub fn enumerate_states(&self) -> Vec<FactoredState> {
        (0..self.n_states).map(|i| self.decode(i)).collect()
    }

    /// Deterministic transition.
    ///
    /// # Panics
    /// If `action` is out of range.
    pub fn step(&self, state: &FactoredState, action: usize) -> FactoredState {
        assert!(action < self.action_count(), "action {action} out of range");
        self.transition(state, action)
    }

    /// Transition on state indices via the precomputed table.
    #[inline]
    pub fn step_index(&self, state: usize, action: usize) -> usize {
        self.next[state * self.action_count() + action] as usize
    }

    fn transition(&self, state: &FactoredState, action: usize) -> FactoredState {
        let mut v = state.0.clone();
        match self.spec.family {
            Family::FactorChain => {
                let f = action / 2;
                if action % 2 == 1 {
                    v[f] = (v[f] + 1).min(self.sizes[f] - 1);
                } else {
                    v[f] = v[f].saturating_sub(1);
                }
            }
            Family::GridScene => {
                let [w, h] = self.spec.grid.expect("validated grid");
                let agent = self.agent.expect("validated agent");
                let (x, y) = (v[agent] % w, v[agent] / w);
                let (nx, ny) = match action {
                    0 => (x, y.saturating_sub(1)),
                    1 => (x, (y + 1).min(h - 1)),
                    2 => (x.saturating_sub(1), y),
                    3 => ((x + 1).min(w - 1), y),
                    _ => (x, y),
                };
                v[agent] = ny * w + nx;
                if action == GridAction::Interact.index() {
                    if let Some(f) = self
                        .spec
                        .factors
                        .iter()
                        .position(|f| f.toggle_cell == Some([x, y]))
                    {
                        let permitted = self.guards[f].is_none_or(|g| v[g] == UNLOCKED);
                        if permitted {
                            v[f] = (v[f] + 1) % self.sizes[f];
                        }
                    }
                }
            }
        }
        FactoredState(v)
    }

    /// Width of the one-hot observation vector.
    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    /// One-hot observation: one block per factor; the agent cell is encoded as
    /// separate x and y one-hots.
    pub fn observe_index(&self, index: usize, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.obs_dim);
        out.iter_mut().for_each(|x| *x = 0.0);
        let mut offset = 0;
        for (f, spec) in self.spec.factors.iter().enumerate() {
            let v = self.factor_value(index, f);
            match (spec.kind, self.spec.grid) {
                (FactorKind::AgentPosition, Some([w, h])) => {
                    out[offset + v % w] = 1.0;
                    out[offset + w + v / w] = 1.0;
                    offset += w + h;
                }
                _ => {
                    out[offset + v] = 1.0;
                    offset += self.sizes[f];
                }
            }
        }
    }

    pub fn observe(&self, state: &FactoredState) -> Vec<f64> {
        let mut out = vec![0.0; self.obs_dim];
        self.observe_index(self.encode(state), &mut out);
        out
    }

    /// Row-major `state_count x obs_dim` table of every observation.
    pub fn observation_table(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.n_states * self.obs_dim];
        for (s, row) in out.chunks_mut(self.obs_dim).enumerate() {
            self.observe_index(s, row);
        }
        out
    }

    /// Endogenous factor mask of the pair, as a bit set over factor indices.
    pub fn endogenous_mask(&self, s: usize, g: usize) -> FactorMask {
        let mut bits = 0u64;
        for f in 0..self.factor_count() {
            if Some(f) == self.agent || self.factor_value(s, f) != self.factor_value(g, f) {
                bits |= 1 << f;
            }
        }
        // Locks guarding an endogenous factor are endogenous too (transitively).
        loop {
            let mut grown = bits;
            for f in 0..self.factor_count() {
                if bits & (1 << f) != 0 {
                    if let Some(lock) = self.guards[f] {
                        grown |= 1 << lock;
                    }
                }
            }
            if grown == bits {
                break;
            }
            bits = grown;
        }
        FactorMask(bits)
    }

    /// Ground-truth task-endogenous labeling of the pair `(s, g)`.
    pub fn ground_truth_label(&self, s: &FactoredState, g: &FactoredState) -> Result<EndogenousLabel> {
        self.check_state(s)?;
        self.check_state(g)?;
        let mask = self.endogenous_mask(self.encode(s), self.encode(g));
        Ok(EndogenousLabel::new(mask, s, g, self.factor_count()))
    }

    /// Index of the state keeping only the factors in `mask` (others set to 0).
    pub fn project(&self, index: usize, mask: FactorMask) -> usize {
        (0..self.factor_count())
            .filter(|&f| mask.contains(f))
            .map(|f| self.factor_value(index, f) * self.strides[f])
            .sum()
    }

    /// Whether `x` agrees with `g` on every factor in `mask`.
    #[inline]
    pub fn matches_on(&self, x: usize, g: usize, mask: FactorMask) -> bool {
        (0..self.factor_count())
            .filter(|&f| mask.contains(f))
            .all(|f| self.factor_value(x, f) == self.factor_value(g, f))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> Environment {
        Environment::preset("gridscene-5").unwrap()
    }

    fn chain() -> Environment {
        Environment::preset("factorchain-3").unwrap()
    }

    #[test]
    fn preset_state_counts() {
        assert_eq!(chain().state_count(), 48);
        assert_eq!(grid().state_count(), 200);
    }

    #[test]
    fn guard_cycle_is_rejected() {
        let mut spec = EnvSpec::preset("gridscene-5").unwrap();
        spec.factors[3].guard = Some("drawer_lock".into());
        let err = Environment::new(spec).unwrap_err();
        assert!(matches!(err, Error::Spec { ref reason, .. } if reason.contains("cycle")), "{err}");
    }

    #[test]
    fn invalid_specs_name_the_field() {
        let mut spec = EnvSpec::preset("gridscene-5").unwrap();
        spec.factors[2].toggle_cell = Some([9, 0]);
        match Environment::new(spec).unwrap_err() {
            Error::Spec { field, .. } => assert_eq!(field, "factors[2].toggle_cell"),
            e => panic!("{e}"),
        }
        let mut spec = EnvSpec::preset("factorchain-3").unwrap();
        spec.action_count = 5;
        match Environment::new(spec).unwrap_err() {
            Error::Spec { field, .. } => assert_eq!(field, "action_count"),
            e => panic!("{e}"),
        }
        let mut spec = EnvSpec::preset("gridscene-5").unwrap();
        spec.factors[1].guard = Some("window".into());
        assert!(Environment::new(spec).is_err());
        let spec = EnvSpec {
            env_id: "big".into(),
            family: Family::FactorChain,
            grid: None,
            factors: (0..6).map(|i| FactorSpec::chain(&format!("f{i}"), 10)).collect(),
            action_count: 12,
            max_episode_steps: 10,
        };
        assert!(Environment::new(spec).is_err());
    }

    #[test]
    fn grid_moves() {
        let env = grid();
        let s = FactoredState(vec![0, 0, 0, 0]);
        let t = env.step(&s, GridAction::Right.index());
        assert_eq!(t, FactoredState(vec![1, 0, 0, 0]));
        // clamped at the border
        assert_eq!(env.step(&s, GridAction::Up.index()), s);
        assert_eq!(env.step(&s, GridAction::Left.index()), s);
        assert_eq!(env.step(&s, GridAction::Noop.index()), s);
        assert_eq!(env.step(&s, GridAction::Down.index()).0[0], 5);
    }

    #[test]
    fn locked_drawer_does_not_toggle() {
        let env = grid();
        let drawer_cell = 3 * 5 + 1;
        let locked = FactoredState(vec![drawer_cell, 0, 0, 1]);
        assert_eq!(env.step(&locked, GridAction::Interact.index()), locked);
        let unlocked = FactoredState(vec![drawer_cell, 0, 0, 0]);
        assert_eq!(
            env.step(&unlocked, GridAction::Interact.index()),
            FactoredState(vec![drawer_cell, 1, 0, 0])
        );
        let window = FactoredState(vec![5 + 3, 0, 0, 1]);
        assert_eq!(env.step(&window, GridAction::Interact.index()).0[2], 1);
        let button = FactoredState(vec![24, 1, 0, 1]);
        assert_eq!(env.step(&button, GridAction::Interact.index()).0[3], 0);
    }

    #[test]
    fn chain_moves() {
        let env = chain();
        let s = FactoredState(vec![2, 3, 0]);
        assert_eq!(env.step(&s, chain_action(0, -1)), FactoredState(vec![1, 3, 0]));
        assert_eq!(env.step(&s, chain_action(1, 1)), s);
        assert_eq!(env.step(&s, chain_action(2, -1)), s);
        assert_eq!(env.step(&s, chain_action(2, 1)), FactoredState(vec![2, 3, 1]));
    }

    #[test]
    fn labels() {
        let env = chain();
        let s = FactoredState(vec![0, 0, 0]);
        let g = FactoredState(vec![3, 0, 2]);
        let l = env.ground_truth_label(&s, &g).unwrap();
        assert_eq!(l.mask, vec![true, false, true]);
        assert_eq!(l.source, vec![0, 0]);
        assert_eq!(l.goal, vec![3, 2]);
        let same = env.ground_truth_label(&s, &s).unwrap();
        assert!(same.mask.iter().all(|m| !m));

        let env = grid();
        let s = FactoredState(vec![7, 0, 0, 1]);
        let same = env.ground_truth_label(&s, &s).unwrap();
        assert_eq!(same.mask, vec![true, false, false, false]);
        let g = FactoredState(vec![7, 1, 0, 1]);
        let l = env.ground_truth_label(&s, &g).unwrap();
        assert_eq!(l.mask, vec![true, true, false, true]);
        let s = FactoredState(vec![7, 0, 0, 0]);
        let g = FactoredState(vec![7, 1, 0, 0]);
        let l = env.ground_truth_label(&s, &g).unwrap();
        assert_eq!(l.mask, vec![true, true, false, true]);
    }

    #[test]
    fn label_rejects_foreign_states() {
        let env = chain();
        let s = FactoredState(vec![0, 0, 0, 0]);
        assert!(env.ground_truth_label(&s, &s).is_err());
        let s = FactoredState(vec![0, 0, 7]);
        assert!(env.ground_truth_label(&s, &s).is_err());
    }

    #[test]
    fn observations_are_one_hot_blocks() {
        let env = grid();
        assert_eq!(env.obs_dim(), 5 + 5 + 2 + 2 + 2);
        let o = env.observe(&FactoredState(vec![7, 1, 0, 1]));
        assert_eq!(o.iter().sum::<f64>(), 5.0);
        assert_eq!(o[2], 1.0); // x = 2
        assert_eq!(o[5 + 1], 1.0); // y = 1
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn encode_decode_roundtrip(i in 0usize..200) {
                let env = grid();
                prop_assert_eq!(env.encode(&env.decode(i)), i);
            }

            #[test]
            fn step_table_matches_step_and_stays_enumerable(i in 0usize..200, a in 0usize..6) {
                let env = grid();
                let next = env.step(&env.decode(i), a);
                prop_assert!(env.check_state(&next).is_ok());
                prop_assert_eq!(env.encode(&next), env.step_index(i, a));
                prop_assert_eq!(env.step(&env.decode(i), a), next);
            }

            #[test]
            fn guarded_object_frozen_while_locked(i in 0usize..200, actions in proptest::collection::vec(0usize..6, 0..40)) {
                let env = grid();
                let mut s = i;
                for a in actions {
                    let n = env.step_index(s, a);
                    if env.factor_value(s, 3) == 1 {
                        prop_assert_eq!(env.factor_value(n, 1), env.factor_value(s, 1));
                    }
                    s = n;
                }
            }

            #[test]
            fn chain_factors_evolve_separately(start in 0usize..48, actions in proptest::collection::vec(0usize..6, 0..30)) {
                let env = chain();
                let mut s = start;
                for &a in &actions {
                    s = env.step_index(s, a);
                }
                for f in 0..3 {
                    // replay only the actions addressing f
                    let mut v = env.factor_value(start, f) as i64;
                    for &a in actions.iter().filter(|&&a| a / 2 == f) {
                        v = if a % 2 == 1 { (v + 1).min(env.factor_sizes()[f] as i64 - 1) } else { (v - 1).max(0) };
                    }
                    prop_assert_eq!(env.factor_value(s, f) as i64, v);
                }
            }
        }
    }
}
