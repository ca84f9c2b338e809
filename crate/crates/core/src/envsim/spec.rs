use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Upper bound on the number of enumerable states.
pub const MAX_STATES: usize = 50_000;

/// Moves, interact and noop.
pub const GRID_ACTIONS: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FactorKind {
    AgentPosition,
    Object,
    Lock,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactorSpec {
    pub name: String,
    pub domain_size: usize,
    pub kind: FactorKind,
    /// Grid cell `[x, y]` where `interact` toggles this factor.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub toggle_cell: Option<[usize; 2]>,
    /// Name of a lock factor; toggling is only permitted while it is unlocked (0).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub guard: Option<String>,
}

impl FactorSpec {
    pub fn chain(name: &str, domain_size: usize) -> Self {
        FactorSpec {
            name: name.to_string(),
            domain_size,
            kind: FactorKind::Object,
            toggle_cell: None,
            guard: None,
        }
    }

    pub fn toggle(name: &str, kind: FactorKind, cell: [usize; 2], guard: Option<&str>) -> Self {
        FactorSpec {
            name: name.to_string(),
            domain_size: 2,
            kind,
            toggle_cell: Some(cell),
            guard: guard.map(str::to_string),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    FactorChain,
    GridScene,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub env_id: String,
    pub family: Family,
    /// `[width, height]`, GridScene only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<[usize; 2]>,
    pub factors: Vec<FactorSpec>,
    pub action_count: usize,
    pub max_episode_steps: usize,
}

pub const PRESETS: [&str; 2] = ["factorchain-3", "gridscene-5"];

impl EnvSpec {
    /// Looks up a built-in preset by id.
    pub fn preset(id: &str) -> Result<EnvSpec> {
        match id {
            "factorchain-3" => Ok(EnvSpec {
                env_id: id.to_string(),
                family: Family::FactorChain,
                grid: None,
                factors: vec![
                    FactorSpec::chain("c0", 4),
                    FactorSpec::chain("c1", 4),
                    FactorSpec::chain("c2", 3),
                ],
                action_count: 6,
                max_episode_steps: 40,
            }),
            "gridscene-5" => Ok(EnvSpec {
                env_id: id.to_string(),
                family: Family::GridScene,
                grid: Some([5, 5]),
                factors: vec![
                    FactorSpec {
                        name: "agent".to_string(),
                        domain_size: 25,
                        kind: FactorKind::AgentPosition,
                        toggle_cell: None,
                        guard: None,
                    },
                    FactorSpec::toggle("drawer", FactorKind::Object, [1, 3], Some("drawer_lock")),
                    FactorSpec::toggle("window", FactorKind::Object, [3, 1], None),
                    FactorSpec::toggle("drawer_lock", FactorKind::Lock, [4, 4], None),
                ],
                action_count: GRID_ACTIONS,
                max_episode_steps: 100,
            }),
            other => Err(Error::usage(format!(
                "unknown environment preset `{other}` (known: {})",
                PRESETS.join(", ")
            ))),
        }
    }

    pub fn state_count(&self) -> usize {
        self.factors
            .iter()
            .fold(1usize, |acc, f| acc.saturating_mul(f.domain_size))
    }

    pub fn factor_index(&self, name: &str) -> Option<usize> {
        self.factors.iter().position(|f| f.name == name)
    }

    /// Checks every structural invariant; the error names the offending field.
    pub fn validate(&self) -> Result<()> {
        if self.env_id.trim().is_empty() {
            return Err(Error::spec("env_id", "must be non-empty"));
        }
        if self.factors.is_empty() {
            return Err(Error::spec("factors", "at least one factor is required"));
        }
        if self.max_episode_steps == 0 {
            return Err(Error::spec("max_episode_steps", "must be positive"));
        }
        let mut names = HashSet::new();
        for (i, f) in self.factors.iter().enumerate() {
            let field = format!("factors[{i}]");
            if !names.insert(f.name.as_str()) {
                return Err(Error::spec(field, format!("duplicate factor name `{}`", f.name)));
            }
            if f.domain_size == 0 {
                return Err(Error::spec(format!("{field}.domain_size"), "must be positive"));
            }
            if f.kind != FactorKind::AgentPosition && f.domain_size < 2 {
                return Err(Error::spec(
                    format!("{field}.domain_size"),
                    "object and lock factors need at least 2 values",
                ));
            }
        }
        let n = self.state_count();
        if n > MAX_STATES {
            return Err(Error::spec(
                "factors",
                format!("state count {n} exceeds the enumerability bound {MAX_STATES}"),
            ));
        }
        self.validate_guards()?;
        match self.family {
            Family::FactorChain => self.validate_chain(),
            Family::GridScene => self.validate_grid(),
        }
    }

    fn validate_guards(&self) -> Result<()> {
        let index: HashMap<&str, usize> = self
            .factors
            .iter()
            .enumerate()
            .map(|(i, f)| (f.name.as_str(), i))
            .collect();
        let mut next = vec![None; self.factors.len()];
        for (i, f) in self.factors.iter().enumerate() {
            if let Some(g) = &f.guard {
                let field = format!("factors[{i}].guard");
                let j = *index
                    .get(g.as_str())
                    .ok_or_else(|| Error::spec(&field, format!("unknown factor `{g}`")))?;
                if self.factors[j].kind != FactorKind::Lock {
                    return Err(Error::spec(field, format!("`{g}` is not a lock factor")));
                }
                next[i] = Some(j);
            }
        }
        for start in 0..next.len() {
            let mut seen = vec![false; next.len()];
            let mut cur = Some(start);
            while let Some(i) = cur {
                if seen[i] {
                    return Err(Error::spec(
                        format!("factors[{start}].guard"),
                        "guard cycle detected",
                    ));
                }
                seen[i] = true;
                cur = next[i];
            }
        }
        Ok(())
    }

    fn validate_chain(&self) -> Result<()> {
        if self.grid.is_some() {
            return Err(Error::spec("grid", "FactorChain environments have no grid"));
        }
        for (i, f) in self.factors.iter().enumerate() {
            if f.kind == FactorKind::AgentPosition {
                return Err(Error::spec(
                    format!("factors[{i}].kind"),
                    "FactorChain has no agent position",
                ));
            }
            if f.toggle_cell.is_some() || f.guard.is_some() {
                return Err(Error::spec(
                    format!("factors[{i}]"),
                    "FactorChain factors take no toggle cell or guard",
                ));
            }
        }
        let expected = 2 * self.factors.len();
        if self.action_count != expected {
            return Err(Error::spec(
                "action_count",
                format!("FactorChain needs {expected} actions (two per factor)"),
            ));
        }
        Ok(())
    }

    fn validate_grid(&self) -> Result<()> {
        let [w, h] = self
            .grid
            .ok_or_else(|| Error::spec("grid", "GridScene requires a grid"))?;
        if w == 0 || h == 0 {
            return Err(Error::spec("grid", "grid dimensions must be positive"));
        }
        if self.action_count != GRID_ACTIONS {
            return Err(Error::spec(
                "action_count",
                format!("GridScene needs {GRID_ACTIONS} actions"),
            ));
        }
        let agents: Vec<usize> = self
            .factors
            .iter()
            .enumerate()
            .filter(|(_, f)| f.kind == FactorKind::AgentPosition)
            .map(|(i, _)| i)
            .collect();
        if agents.len() != 1 {
            return Err(Error::spec("factors", "GridScene needs exactly one agent_position factor"));
        }
        if self.factors[agents[0]].domain_size != w * h {
            return Err(Error::spec(
                format!("factors[{}].domain_size", agents[0]),
                format!("agent position domain must equal grid size {}", w * h),
            ));
        }
        let mut cells = HashSet::new();
        for (i, f) in self.factors.iter().enumerate() {
            if f.kind == FactorKind::AgentPosition {
                continue;
            }
            let field = format!("factors[{i}].toggle_cell");
            let [x, y] = f
                .toggle_cell
                .ok_or_else(|| Error::spec(&field, "GridScene objects need a toggle cell"))?;
            if x >= w || y >= h {
                return Err(Error::spec(field, format!("cell ({x},{y}) outside {w}x{h} grid")));
            }
            if !cells.insert((x, y)) {
                return Err(Error::spec(field, format!("cell ({x},{y}) already used")));
            }
        }
        Ok(())
    }
}
