//! Exact optimal temporal distances and checks of their structure.
//!
//! Dynamics are deterministic, so optimal distances are shortest-path lengths
//! and are computed by breadth-first search over reversed edges. A value
//! iteration solver is kept alongside as an independent route.

mod io;
mod verify;

pub use io::{read_table, write_table};
pub use verify::{
    verify_endogenous_closure, verify_field_invariance, verify_quasimetric, ClosureReport,
    FieldInvarianceReport, GroupDeviation, QuasimetricReport,
};

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::envsim::{Environment, FactorMask};
use crate::par::{self, Execution};
use crate::{Error, Result};

/// Marker for an unreachable pair.
pub const UNREACHABLE: u32 = u32::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardMode {
    /// Reward `-1` until the exact goal state is reached.
    FullMatch,
    /// Reward `-1` until the goal's task-endogenous factors are matched; the
    /// mask is the one labelled for the pair `(s, g)`.
    EndogenousMatch,
}

impl RewardMode {
    pub fn code(self) -> u8 {
        match self {
            RewardMode::FullMatch => 0,
            RewardMode::EndogenousMatch => 1,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(RewardMode::FullMatch),
            1 => Some(RewardMode::EndogenousMatch),
            _ => None,
        }
    }
}

/// Dense `d[s][g]` table of optimal step counts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DistanceTable {
    pub env_id: String,
    pub reward_mode: RewardMode,
    n: usize,
    d: Vec<u32>,
}

impl DistanceTable {
    pub fn from_raw(env_id: String, reward_mode: RewardMode, n: usize, d: Vec<u32>) -> Result<Self> {
        if d.len() != n * n {
            return Err(Error::Format(format!(
                "distance table has {} entries, expected {}",
                d.len(),
                n * n
            )));
        }
        Ok(DistanceTable {
            env_id,
            reward_mode,
            n,
            d,
        })
    }

    pub fn state_count(&self) -> usize {
        self.n
    }

    /// `None` when `g` is unreachable from `s`.
    #[inline]
    pub fn get(&self, s: usize, g: usize) -> Option<u32> {
        let v = self.d[s * self.n + g];
        (v != UNREACHABLE).then_some(v)
    }

    #[inline]
    pub fn raw(&self, s: usize, g: usize) -> u32 {
        self.d[s * self.n + g]
    }

    pub fn raw_entries(&self) -> &[u32] {
        &self.d
    }

    pub fn unreachable_pairs(&self) -> usize {
        self.d.iter().filter(|&&v| v == UNREACHABLE).count()
    }

    pub fn max_finite(&self) -> u32 {
        self.d
            .iter()
            .copied()
            .filter(|&v| v != UNREACHABLE)
            .max()
            .unwrap_or(0)
    }
}

pub(crate) fn predecessors(env: &Environment) -> Vec<Vec<u32>> {
    let mut preds = vec![Vec::new(); env.state_count()];
    for s in 0..env.state_count() {
        for a in 0..env.action_count() {
            let t = env.step_index(s, a);
            if preds[t].last() != Some(&(s as u32)) {
                preds[t].push(s as u32);
            }
        }
    }
    preds
}

/// Multi-source BFS on reversed edges: distance from every state to the set.
pub(crate) fn bfs_to_set(preds: &[Vec<u32>], sources: impl Iterator<Item = usize>) -> Vec<u32> {
    let mut dist = vec![UNREACHABLE; preds.len()];
    let mut queue = VecDeque::new();
    for s in sources {
        if dist[s] == UNREACHABLE {
            dist[s] = 0;
            queue.push_back(s);
        }
    }
    while let Some(t) = queue.pop_front() {
        let next = dist[t] + 1;
        for &p in &preds[t] {
            let p = p as usize;
            if dist[p] == UNREACHABLE {
                dist[p] = next;
                queue.push_back(p);
            }
        }
    }
    dist
}

/// Solves every pair. Unreachable pairs are recorded as such and logged.
pub fn solve_distances(env: &Environment, mode: RewardMode, exec: Execution) -> DistanceTable {
    let n = env.state_count();
    let preds = predecessors(env);
    let columns: Vec<Vec<u32>> = par::map_range(exec, n, |g| match mode {
        RewardMode::FullMatch => bfs_to_set(&preds, std::iter::once(g)),
        RewardMode::EndogenousMatch => {
            let mut groups: BTreeMap<FactorMask, Vec<usize>> = BTreeMap::new();
            for s in 0..n {
                groups.entry(env.endogenous_mask(s, g)).or_default().push(s);
            }
            let mut col = vec![UNREACHABLE; n];
            for (mask, members) in groups {
                let dist = bfs_to_set(&preds, (0..n).filter(|&x| env.matches_on(x, g, mask)));
                for s in members {
                    col[s] = dist[s];
                }
            }
            col
        }
    });
    let mut d = vec![UNREACHABLE; n * n];
    for (g, col) in columns.iter().enumerate() {
        for (s, &v) in col.iter().enumerate() {
            d[s * n + g] = v;
        }
    }
    let table = DistanceTable {
        env_id: env.id().to_string(),
        reward_mode: mode,
        n,
        d,
    };
    let missing = table.unreachable_pairs();
    if missing > 0 {
        log::warn!(
            "{}: {missing} of {} pairs unreachable under {mode:?}",
            env.id(),
            n * n
        );
    }
    table
}

/// Closed-form optimal values for a distance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OptimalValue {
    /// `gamma^d` under the reward `1{s = g}`.
    pub discounted: f64,
    /// `-(1 - gamma^d) / (1 - gamma)` under the reward `-1{s != g}`.
    pub modified: f64,
    /// False when the distance was infinite; values are then the limits.
    pub finite: bool,
}

pub fn value_of(distance: Option<u32>, gamma: f64) -> OptimalValue {
    match distance {
        Some(d) => {
            let p = gamma.powi(d as i32);
            OptimalValue {
                discounted: p,
                modified: -(1.0 - p) / (1.0 - gamma),
                finite: true,
            }
        }
        None => OptimalValue {
            discounted: 0.0,
            modified: -1.0 / (1.0 - gamma),
            finite: false,
        },
    }
}

/// `x -> d(x, g) - d(x, s)` over every probe state `x`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DistanceField {
    pub values: Vec<i64>,
}

pub fn distance_field(table: &DistanceTable, s: usize, g: usize) -> Result<DistanceField> {
    let values = (0..table.state_count())
        .map(|x| match (table.get(x, g), table.get(x, s)) {
            (Some(a), Some(b)) => Ok(a as i64 - b as i64),
            _ => Err(Error::NonFinite(format!(
                "probe state {x} has an infinite distance in field ({s}, {g})"
            ))),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DistanceField { values })
}

/// Value iteration for `V*(s, g)` with reward `1{s = g}` and `g` absorbing.
/// Returns a row-major `[s][g]` table.
pub fn value_iteration(env: &Environment, gamma: f64, tol: f64, exec: Execution) -> Vec<f64> {
    let n = env.state_count();
    let columns: Vec<Vec<f64>> = par::map_range(exec, n, |g| {
        let mut v = vec![0.0; n];
        v[g] = 1.0;
        loop {
            let mut delta: f64 = 0.0;
            for s in 0..n {
                if s == g {
                    continue;
                }
                let best = (0..env.action_count())
                    .map(|a| v[env.step_index(s, a)])
                    .fold(f64::NEG_INFINITY, f64::max);
                let nv = gamma * best;
                delta = delta.max((nv - v[s]).abs());
                v[s] = nv;
            }
            if delta <= tol {
                break v;
            }
        }
    });
    let mut out = vec![0.0; n * n];
    for (g, col) in columns.iter().enumerate() {
        for (s, &v) in col.iter().enumerate() {
            out[s * n + g] = v;
        }
    }
    out
}

/// Greedy action at probe `x` maximizing `gamma^(alpha(s,g)(x')) * gamma^(d(x', s))`
/// over successors `x'`. Ties go to the lowest action index.
pub fn field_greedy_action(
    env: &Environment,
    table: &DistanceTable,
    s: usize,
    g: usize,
    x: usize,
    gamma: f64,
) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for a in 0..env.action_count() {
        let nx = env.step_index(x, a);
        let (dg, ds) = (table.get(nx, g)?, table.get(nx, s)?);
        let field = dg as f64 - ds as f64;
        let score = gamma.powf(field) * gamma.powi(ds as i32);
        if best.is_none_or(|(_, b)| score > b) {
            best = Some((a, score));
        }
    }
    best.map(|(a, _)| a)
}
