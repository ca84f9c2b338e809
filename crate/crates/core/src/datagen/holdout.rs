use serde::{Deserialize, Serialize};

use super::{Episode, ProvenanceEntry, TransitionDataset};
use crate::envsim::Environment;
use crate::{Error, Result};

/// `factor == value`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Condition {
    pub factor: String,
    pub value: usize,
}

/// Removes the `window` transitions leading up to every `factor: from -> to`
/// change made while all `context` conditions held.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HoldoutRule {
    pub name: String,
    pub context: Vec<Condition>,
    pub factor: String,
    pub from: usize,
    pub to: usize,
    pub window: usize,
}

/// A rule with factor names resolved to indices.
pub(crate) struct Resolved {
    pub(crate) context: Vec<(usize, usize)>,
    pub(crate) factor: usize,
    pub(crate) from: usize,
    pub(crate) to: usize,
    window: usize,
}

impl HoldoutRule {
    /// Opening the drawer while the window is closed and the drawer lock is
    /// open, with a 15-step window.
    pub fn drawer_with_window_closed() -> Self {
        HoldoutRule {
            name: "open-drawer-window-closed-unlocked".into(),
            context: vec![
                Condition {
                    factor: "window".into(),
                    value: 0,
                },
                Condition {
                    factor: "drawer_lock".into(),
                    value: 0,
                },
            ],
            factor: "drawer".into(),
            from: 0,
            to: 1,
            window: 15,
        }
    }

    pub(crate) fn resolve(&self, env: &Environment) -> Result<Resolved> {
        if self.window == 0 {
            return Err(Error::usage(format!("holdout rule {}: window must be at least 1", self.name)));
        }
        let lookup = |name: &str, value: usize| -> Result<(usize, usize)> {
            let f = env.spec().factor_index(name).ok_or_else(|| {
                Error::usage(format!("holdout rule {}: unknown factor `{name}` in {}", self.name, env.id()))
            })?;
            if value >= env.factor_sizes()[f] {
                return Err(Error::usage(format!(
                    "holdout rule {}: value {value} out of range for `{name}`",
                    self.name
                )));
            }
            Ok((f, value))
        };
        let context = self
            .context
            .iter()
            .map(|c| lookup(&c.factor, c.value))
            .collect::<Result<_>>()?;
        let (factor, from) = lookup(&self.factor, self.from)?;
        let (_, to) = lookup(&self.factor, self.to)?;
        Ok(Resolved {
            context,
            factor,
            from,
            to,
            window: self.window,
        })
    }
}

impl Resolved {
    /// Whether the transition `prev -> next` is a completion event in context.
    fn fires(&self, env: &Environment, prev: usize, next: usize) -> bool {
        env.factor_value(prev, self.factor) == self.from
            && env.factor_value(next, self.factor) == self.to
            && self.context.iter().all(|&(f, v)| env.factor_value(prev, f) == v)
    }

    /// Per transition: whether it lies in the window ending at an event.
    fn marks(&self, env: &Environment, ep: &Episode) -> Vec<bool> {
        let mut removed = vec![false; ep.len()];
        for t in 0..ep.len() {
            if self.fires(env, ep.states[t], ep.states[t + 1]) {
                let start = (t + 1).saturating_sub(self.window);
                removed[start..=t].iter_mut().for_each(|r| *r = true);
            }
        }
        removed
    }
}

fn check_env(ds: &TransitionDataset, env: &Environment) -> Result<()> {
    if ds.env_id != env.id() {
        return Err(Error::usage(format!(
            "dataset was generated for {}, not {}",
            ds.env_id,
            env.id()
        )));
    }
    Ok(())
}

/// Deletes every in-context event window and splits episodes at the gaps.
/// Overlapping windows merge into one deletion.
pub fn apply_holdout(
    ds: &TransitionDataset,
    env: &Environment,
    rule: &HoldoutRule,
) -> Result<(TransitionDataset, usize)> {
    check_env(ds, env)?;
    let r = rule.resolve(env)?;
    let mut removed = 0;
    let mut episodes = Vec::new();
    for ep in ds.episodes() {
        let marks = r.marks(env, ep);
        removed += marks.iter().filter(|&&m| m).count();
        let mut t = 0;
        while t < ep.len() {
            if marks[t] {
                t += 1;
                continue;
            }
            let start = t;
            while t < ep.len() && !marks[t] {
                t += 1;
            }
            episodes.push(Episode {
                states: ep.states[start..=t].to_vec(),
                actions: ep.actions[start..t].to_vec(),
            });
        }
    }
    let mut provenance = ds.provenance.clone();
    provenance.push(ProvenanceEntry {
        rule: rule.clone(),
        removed,
        overlap: "merge".into(),
    });
    let mut edited = TransitionDataset::new(env, ds.seed, ds.epsilon, provenance, episodes)?;
    edited.config_hash = ds.config_hash.clone();
    Ok((edited, removed))
}

/// Number of transitions that still fall inside an in-context event window.
pub fn rescan(ds: &TransitionDataset, env: &Environment, rule: &HoldoutRule) -> Result<usize> {
    check_env(ds, env)?;
    let r = rule.resolve(env)?;
    Ok(ds
        .episodes()
        .iter()
        .map(|ep| r.marks(env, ep).iter().filter(|&&m| m).count())
        .sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::generate_play;
    use crate::envsim::{chain_action, FactoredState};
    use crate::par::Execution;

    fn chain_episode(env: &Environment, event_at: usize, len: usize) -> Episode {
        // walk factor 1 back and forth, raise factor 0 to 1 exactly at `event_at`
        let mut s = env.encode(&FactoredState(vec![0, 0, 0]));
        let mut states = vec![s];
        let mut actions = Vec::new();
        for t in 0..len {
            let a = if t + 1 == event_at {
                chain_action(0, 1)
            } else if t % 2 == 0 {
                chain_action(1, 1)
            } else {
                chain_action(1, -1)
            };
            s = env.step_index(s, a);
            actions.push(a);
            states.push(s);
        }
        Episode { states, actions }
    }

    fn chain_rule(window: usize, context_value: usize) -> HoldoutRule {
        HoldoutRule {
            name: "c0-up".into(),
            context: vec![Condition {
                factor: "c2".into(),
                value: context_value,
            }],
            factor: "c0".into(),
            from: 0,
            to: 1,
            window,
        }
    }

    #[test]
    fn single_event_split_arithmetic() {
        let env = Environment::preset("factorchain-3").unwrap();
        let event = 17;
        let ds = TransitionDataset::new(&env, 0, 0.0, vec![], vec![chain_episode(&env, event, 30)]).unwrap();
        let (edited, count) = apply_holdout(&ds, &env, &chain_rule(5, 0)).unwrap();
        assert_eq!(count, 5);
        let lens: Vec<usize> = edited.episodes().iter().map(Episode::len).collect();
        assert_eq!(lens, vec![event - 5, 30 - event]);
        assert_eq!(edited.provenance.len(), 1);
        assert_eq!(rescan(&edited, &env, &chain_rule(5, 0)).unwrap(), 0);
    }

    #[test]
    fn unsatisfied_context_leaves_data_alone() {
        let env = Environment::preset("factorchain-3").unwrap();
        let ds = TransitionDataset::new(&env, 0, 0.0, vec![], vec![chain_episode(&env, 10, 30)]).unwrap();
        let (edited, count) = apply_holdout(&ds, &env, &chain_rule(5, 2)).unwrap();
        assert_eq!(count, 0);
        assert_eq!(edited.episodes(), ds.episodes());
    }

    #[test]
    fn unknown_factor_is_a_usage_error() {
        let env = Environment::preset("factorchain-3").unwrap();
        let ds = TransitionDataset::new(&env, 0, 0.0, vec![], vec![chain_episode(&env, 10, 30)]).unwrap();
        let mut rule = chain_rule(5, 0);
        rule.factor = "drawer".into();
        assert!(matches!(apply_holdout(&ds, &env, &rule), Err(Error::Usage(_))));
    }

    #[test]
    fn gridscene_drawer_holdout_is_complete() {
        let env = Environment::preset("gridscene-5").unwrap();
        let ds = generate_play(&env, 200, 0.2, 7, Execution::Sequential).unwrap();
        let rule = HoldoutRule::drawer_with_window_closed();
        assert!(rescan(&ds, &env, &rule).unwrap() > 0);
        let (edited, count) = apply_holdout(&ds, &env, &rule).unwrap();
        assert!(count > 0);
        assert_eq!(rescan(&edited, &env, &rule).unwrap(), 0);
        assert_eq!(edited.transition_count() + count, ds.transition_count());
    }
}
