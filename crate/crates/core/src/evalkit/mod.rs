//! Rollout evaluation: tasks with step budgets, success and direct-success
//! scoring, last-checkpoint averaging, CSV / JSON reports and gates.

use std::collections::HashMap;
use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cta::CtaAgent;
use crate::datagen::{HoldoutRule, ProvenanceEntry};
use crate::envsim::{Environment, FactorMask, FactoredState};
use crate::oracle::{bfs_to_set, predecessors, UNREACHABLE};
use crate::par::{self, Execution};
use crate::{Error, Result};

/// Checkpoints averaged into the headline score.
pub const HEADLINE_CHECKPOINTS: usize = 3;

/// What counts as reaching the goal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SuccessCriterion {
    /// Match the goal on the task-endogenous factors of `(s0, g)`.
    #[default]
    Endogenous,
    /// Match every factor of the goal.
    FullState,
}

/// Step budget for a task whose optimal solution takes `optimal` steps.
pub fn budget_for(optimal: u32) -> usize {
    (4 * optimal as usize).max(10)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalTask {
    pub id: usize,
    pub start: usize,
    pub goal: usize,
    /// Factors that must match the goal.
    pub mask: FactorMask,
    /// Optimal number of steps to satisfy `mask`.
    pub optimal: u32,
    pub budget: usize,
    /// Factors whose start value a direct solution never changes.
    pub exogenous: Vec<usize>,
}

impl EvalTask {
    pub fn new(env: &Environment, id: usize, start: usize, goal: usize, criterion: SuccessCriterion) -> Result<Self> {
        let n = env.state_count();
        if start >= n || goal >= n {
            return Err(Error::usage(format!("task {id}: state index out of range for {}", env.id())));
        }
        let label = env.endogenous_mask(start, goal);
        let mask = match criterion {
            SuccessCriterion::Endogenous => label,
            SuccessCriterion::FullState => FactorMask((1u64 << env.factor_count()) - 1),
        };
        let exogenous = (0..env.factor_count()).filter(|&f| !label.contains(f)).collect();
        let dist = goal_distances(env, goal, mask);
        let optimal = dist[start];
        if optimal == UNREACHABLE {
            return Err(Error::usage(format!("task {id}: goal {goal} is unreachable from {start}")));
        }
        Ok(EvalTask {
            id,
            start,
            goal,
            mask,
            optimal,
            budget: budget_for(optimal),
            exogenous,
        })
    }

    pub fn reached(&self, env: &Environment, x: usize) -> bool {
        env.matches_on(x, self.goal, self.mask)
    }
}

/// Distance from every state to the set of states matching `goal` on `mask`.
fn goal_distances(env: &Environment, goal: usize, mask: FactorMask) -> Vec<u32> {
    let preds = predecessors(env);
    bfs_to_set(&preds, (0..env.state_count()).filter(|&x| env.matches_on(x, goal, mask)))
}

/// `count` reproducible tasks with a reachable goal that differs from the
/// start on at least one non-agent factor.
pub fn random_tasks(env: &Environment, count: usize, seed: u64, criterion: SuccessCriterion) -> Result<Vec<EvalTask>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0xE7A1);
    let agent = env.agent_factor();
    let n = env.state_count();
    let mut tasks = Vec::with_capacity(count);
    let mut attempts = 0usize;
    while tasks.len() < count {
        attempts += 1;
        if attempts > 1000 * count.max(1) {
            return Err(Error::usage(format!("could not draw {count} solvable tasks on {}", env.id())));
        }
        let (s, g) = (rng.random_range(0..n), rng.random_range(0..n));
        let differs = (0..env.factor_count()).any(|f| Some(f) != agent && env.factor_value(s, f) != env.factor_value(g, f));
        if !differs {
            continue;
        }
        if let Ok(t) = EvalTask::new(env, tasks.len(), s, g, criterion) {
            tasks.push(t);
        }
    }
    Ok(tasks)
}

/// Tasks for the pair a holdout rule removes: the start satisfies the
/// rule's context with the event factor at its `from` value, the goal
/// differs only in that factor (set to `to`) and in the agent position.
pub fn holdout_tasks(
    env: &Environment,
    rule: &HoldoutRule,
    count: usize,
    seed: u64,
    criterion: SuccessCriterion,
) -> Result<Vec<EvalTask>> {
    let r = rule.resolve(env)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0xE7A2);
    let sizes = env.factor_sizes().to_vec();
    let mut tasks = Vec::with_capacity(count);
    let mut attempts = 0usize;
    while tasks.len() < count {
        attempts += 1;
        if attempts > 1000 * count.max(1) {
            return Err(Error::usage(format!("could not draw {count} solvable holdout tasks for {}", rule.name)));
        }
        let mut s: Vec<usize> = sizes.iter().map(|&k| rng.random_range(0..k)).collect();
        for &(f, v) in &r.context {
            s[f] = v;
        }
        s[r.factor] = r.from;
        let mut g = s.clone();
        g[r.factor] = r.to;
        if let Some(a) = env.agent_factor() {
            g[a] = rng.random_range(0..sizes[a]);
        }
        let (s, g) = (env.encode(&FactoredState(s)), env.encode(&FactoredState(g)));
        if let Ok(t) = EvalTask::new(env, tasks.len(), s, g, criterion) {
            tasks.push(t);
        }
    }
    Ok(tasks)
}

/// Action source for rollouts.
pub trait Policy: Sync {
    /// One action per state in `states`, all pursuing `task`.
    fn act(&self, task: &EvalTask, states: &[usize], rng: &mut ChaCha8Rng) -> Result<Vec<usize>>;
}

/// A trained agent; `stochastic` adds the configured Gaussian noise,
/// otherwise the policy means are used.
pub struct AgentPolicy<'a> {
    pub agent: &'a CtaAgent,
    pub stochastic: bool,
}

impl Policy for AgentPolicy<'_> {
    fn act(&self, task: &EvalTask, states: &[usize], rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
        let goals = vec![task.goal; states.len()];
        self.agent.act(states, &goals, self.stochastic, rng)
    }
}

/// Shortest-path reference policy; ties go to the lowest action index.
pub struct OraclePolicy<'a> {
    env: &'a Environment,
    distances: HashMap<(usize, FactorMask), Vec<u32>>,
}

impl<'a> OraclePolicy<'a> {
    pub fn new(env: &'a Environment, tasks: &[EvalTask]) -> Self {
        let mut distances = HashMap::new();
        for t in tasks {
            distances
                .entry((t.goal, t.mask))
                .or_insert_with(|| goal_distances(env, t.goal, t.mask));
        }
        OraclePolicy { env, distances }
    }
}

impl Policy for OraclePolicy<'_> {
    fn act(&self, task: &EvalTask, states: &[usize], _rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
        let dist = self
            .distances
            .get(&(task.goal, task.mask))
            .ok_or_else(|| Error::usage(format!("oracle policy was not prepared for task {}", task.id)))?;
        Ok(states
            .iter()
            .map(|&x| {
                (0..self.env.action_count())
                    .find(|&a| {
                        let d = dist[self.env.step_index(x, a)];
                        d != UNREACHABLE && d + 1 == dist[x]
                    })
                    .unwrap_or(0)
            })
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Trajectory {
    pub states: Vec<usize>,
    pub actions: Vec<usize>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

/// `n` rollouts of `task` run in lockstep. Each stops at the first state
/// reaching the goal or when the budget is spent. Deterministic given `seed`.
pub fn rollouts(policy: &dyn Policy, env: &Environment, task: &EvalTask, n: usize, seed: u64) -> Result<Vec<Trajectory>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(task.id as u64 + 1);
    let mut trajs: Vec<Trajectory> = (0..n)
        .map(|_| Trajectory {
            states: vec![task.start],
            actions: Vec::new(),
        })
        .collect();
    let mut active: Vec<usize> = if task.reached(env, task.start) { Vec::new() } else { (0..n).collect() };
    for _ in 0..task.budget {
        if active.is_empty() {
            break;
        }
        let states: Vec<usize> = active.iter().map(|&i| *trajs[i].states.last().unwrap()).collect();
        let actions = policy.act(task, &states, &mut rng)?;
        if actions.len() != states.len() || actions.iter().any(|&a| a >= env.action_count()) {
            return Err(Error::usage("policy returned invalid actions"));
        }
        let mut still = Vec::with_capacity(active.len());
        for ((&i, &x), &a) in active.iter().zip(&states).zip(&actions) {
            let next = env.step_index(x, a);
            trajs[i].states.push(next);
            trajs[i].actions.push(a);
            if !task.reached(env, next) {
                still.push(i);
            }
        }
        active = still;
    }
    Ok(trajs)
}

/// A single rollout; see [`rollouts`].
pub fn rollout(policy: &dyn Policy, env: &Environment, task: &EvalTask, seed: u64) -> Result<Trajectory> {
    Ok(rollouts(policy, env, task, 1, seed)?.remove(0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Score {
    pub success: bool,
    /// Success without any exogenous factor leaving its start value.
    pub direct: bool,
}

pub fn score(env: &Environment, traj: &Trajectory, task: &EvalTask) -> Score {
    let horizon = traj.states.len().min(task.budget + 1);
    let hit = traj.states[..horizon].iter().position(|&x| task.reached(env, x));
    let Some(end) = hit else {
        return Score {
            success: false,
            direct: false,
        };
    };
    let direct = traj.states[..=end]
        .iter()
        .all(|&x| task.exogenous.iter().all(|&f| env.factor_value(x, f) == env.factor_value(task.start, f)));
    Score { success: true, direct }
}

/// Rates for one task at one checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub checkpoint: u64,
    pub task: usize,
    pub success: f64,
    pub direct: f64,
    /// Mean number of steps taken.
    pub length: f64,
    pub n: usize,
}

/// Task-averaged rates at one checkpoint. `efficient` is the secondary
/// length-based reading: success within twice the optimal step count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointSummary {
    pub checkpoint: u64,
    pub success: f64,
    pub direct: f64,
    pub length: f64,
    pub efficient: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointEval {
    pub rows: Vec<MetricsRow>,
    pub summary: CheckpointSummary,
}

/// Evaluates every task with `rollouts_per_task` rollouts; tasks may run in
/// parallel, each with its own seeded generator.
pub fn evaluate_checkpoint(
    policy: &dyn Policy,
    env: &Environment,
    tasks: &[EvalTask],
    rollouts_per_task: usize,
    seed: u64,
    checkpoint: u64,
    exec: Execution,
) -> Result<CheckpointEval> {
    if tasks.is_empty() || rollouts_per_task == 0 {
        return Err(Error::usage("evaluation needs at least one task and one rollout"));
    }
    let per_task = par::map_slice(exec, tasks, |t| -> Result<(MetricsRow, f64)> {
        let trajs = rollouts(policy, env, t, rollouts_per_task, seed)?;
        let (mut success, mut direct, mut length, mut efficient) = (0usize, 0usize, 0usize, 0usize);
        for tr in &trajs {
            let sc = score(env, tr, t);
            success += sc.success as usize;
            direct += sc.direct as usize;
            efficient += (sc.success && tr.len() <= 2 * t.optimal as usize) as usize;
            length += tr.len();
        }
        let n = trajs.len() as f64;
        let row = MetricsRow {
            checkpoint,
            task: t.id,
            success: success as f64 / n,
            direct: direct as f64 / n,
            length: length as f64 / n,
            n: trajs.len(),
        };
        Ok((row, efficient as f64 / n))
    });
    let per_task: Vec<(MetricsRow, f64)> = per_task.into_iter().collect::<Result<_>>()?;
    let k = per_task.len() as f64;
    let mean = |f: &dyn Fn(&(MetricsRow, f64)) -> f64| per_task.iter().map(f).sum::<f64>() / k;
    let summary = CheckpointSummary {
        checkpoint,
        success: mean(&|(r, _)| r.success),
        direct: mean(&|(r, _)| r.direct),
        length: mean(&|(r, _)| r.length),
        efficient: mean(&|(_, e)| *e),
    };
    Ok(CheckpointEval {
        rows: per_task.into_iter().map(|(r, _)| r).collect(),
        summary,
    })
}

/// Mean over the last [`HEADLINE_CHECKPOINTS`] checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Headline {
    pub checkpoints: Vec<u64>,
    pub success: f64,
    pub direct: f64,
    pub length: f64,
    pub efficient: f64,
}

/// Headline over checkpoint summaries (in any order). Fewer than three
/// checkpoints are averaged as available, with a warning.
pub fn headline(summaries: &[CheckpointSummary]) -> Result<Headline> {
    if summaries.is_empty() {
        return Err(Error::usage("no checkpoints were evaluated"));
    }
    let mut sorted: Vec<&CheckpointSummary> = summaries.iter().collect();
    sorted.sort_by_key(|s| s.checkpoint);
    let last = &sorted[sorted.len().saturating_sub(HEADLINE_CHECKPOINTS)..];
    if last.len() < HEADLINE_CHECKPOINTS {
        log::warn!(
            "headline averages {} checkpoint(s); {HEADLINE_CHECKPOINTS} expected",
            last.len()
        );
    }
    let k = last.len() as f64;
    let mean = |f: fn(&CheckpointSummary) -> f64| last.iter().map(|s| f(s)).sum::<f64>() / k;
    Ok(Headline {
        checkpoints: last.iter().map(|s| s.checkpoint).collect(),
        success: mean(|s| s.success),
        direct: mean(|s| s.direct),
        length: mean(|s| s.length),
        efficient: mean(|s| s.efficient),
    })
}

/// JSON companion of a metrics CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub variant: String,
    pub env_id: String,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    /// Holdout edits of the training data, copied from the dataset header.
    pub provenance: Vec<ProvenanceEntry>,
    pub checkpoints: Vec<CheckpointSummary>,
    pub headline: Headline,
}

/// Writes rows as CSV (`checkpoint, task, success, direct, length, n`) and
/// the summary as JSON.
pub fn write_report(rows: &[MetricsRow], summary: &ReportSummary, csv_path: &Path, json_path: &Path) -> Result<()> {
    if rows.is_empty() {
        return Err(Error::usage("refusing to write an empty metrics report"));
    }
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(csv_path)?));
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    std::fs::write(json_path, serde_json::to_string_pretty(summary)? + "\n")?;
    Ok(())
}

pub fn read_rows(csv_path: &Path) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(csv_path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GateMetric {
    Success,
    Direct,
    Length,
    Efficient,
}

/// `min <= headline[metric] <= max`, either bound optional.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Gate {
    pub name: String,
    pub metric: GateMetric,
    #[serde(default)]
    pub min: Option<f64>,
    #[serde(default)]
    pub max: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GateManifest {
    #[serde(default)]
    pub gate: Vec<Gate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateOutcome {
    pub name: String,
    pub value: f64,
    pub passed: bool,
}

impl GateManifest {
    /// Reads a TOML manifest (`[[gate]]` tables), or JSON when the file
    /// name ends in `.json`.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let m: GateManifest = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text)?
        } else {
            toml::from_str(&text).map_err(|e| Error::usage(format!("{}: {e}", path.display())))?
        };
        for g in &m.gate {
            if g.min.is_none() && g.max.is_none() {
                return Err(Error::usage(format!("gate {} has neither min nor max", g.name)));
            }
        }
        Ok(m)
    }

    pub fn check(&self, h: &Headline) -> Vec<GateOutcome> {
        self.gate
            .iter()
            .map(|g| {
                let value = match g.metric {
                    GateMetric::Success => h.success,
                    GateMetric::Direct => h.direct,
                    GateMetric::Length => h.length,
                    GateMetric::Efficient => h.efficient,
                };
                let passed = g.min.is_none_or(|m| value >= m) && g.max.is_none_or(|m| value <= m);
                GateOutcome {
                    name: g.name.clone(),
                    value,
                    passed,
                }
            })
            .collect()
    }
}

#[cfg(test)]
mod tests;
