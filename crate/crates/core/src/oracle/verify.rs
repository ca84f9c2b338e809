use std::collections::BTreeMap;

use serde::Serialize;

use super::DistanceTable;
use crate::envsim::{Environment, FactorMask};
use crate::par::{self, Execution};

/// Task key of a pair: endogenous mask plus the projections of `s` and `g` onto it.
type TaskKey = (FactorMask, usize, usize);

fn group_pairs(env: &Environment) -> BTreeMap<TaskKey, Vec<(usize, usize)>> {
    let n = env.state_count();
    let mut groups: BTreeMap<TaskKey, Vec<(usize, usize)>> = BTreeMap::new();
    for s in 0..n {
        for g in 0..n {
            let m = env.endogenous_mask(s, g);
            groups
                .entry((m, env.project(s, m), env.project(g, m)))
                .or_default()
                .push((s, g));
        }
    }
    groups
}

#[derive(Debug, Clone, Serialize)]
pub struct GroupDeviation {
    pub mask: Vec<bool>,
    pub source: usize,
    pub goal: usize,
    pub members: usize,
    pub max_deviation: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct FieldInvarianceReport {
    pub env_id: String,
    pub groups_total: usize,
    pub groups_compared: usize,
    /// Groups with a single member or a single exogenous context.
    pub groups_skipped: usize,
    pub comparisons: usize,
    pub max_deviation: f64,
    pub groups: Vec<GroupDeviation>,
}

/// Compares distance-difference fields across exogenous contexts of the same task.
///
/// Pairs are grouped by their endogenous projections. For two members with
/// different contexts, the field of the first at probe `x` (in its own
/// context block) is compared with the field of the second at the probe with
/// the same endogenous values transplanted into the second context.
pub fn verify_field_invariance(
    env: &Environment,
    table: &DistanceTable,
    exec: Execution,
) -> FieldInvarianceReport {
    let n = env.state_count();
    let groups: Vec<(TaskKey, Vec<(usize, usize)>)> = group_pairs(env).into_iter().collect();
    let field = |s: usize, g: usize, x: usize| -> Option<f64> {
        Some(table.get(x, g)? as f64 - table.get(x, s)? as f64)
    };
    let results: Vec<Option<(f64, usize)>> = par::map_slice(exec, &groups, |((mask, _, _), members)| {
        let context = |s: usize| s - env.project(s, *mask);
        let distinct = {
            let mut c: Vec<usize> = members.iter().map(|&(s, _)| context(s)).collect();
            c.sort_unstable();
            c.dedup();
            c.len()
        };
        if members.len() < 2 || distinct < 2 {
            return None;
        }
        let mut worst: f64 = 0.0;
        let mut count = 0;
        for (i, &(s1, g1)) in members.iter().enumerate() {
            let c1 = context(s1);
            for &(s2, g2) in &members[i + 1..] {
                let c2 = context(s2);
                if c1 == c2 {
                    continue;
                }
                for x in (0..n).filter(|&x| context_of(env, x, *mask) == c1) {
                    let x2 = env.project(x, *mask) + c2;
                    count += 1;
                    let dev = match (field(s1, g1, x), field(s2, g2, x2)) {
                        (Some(a), Some(b)) => (a - b).abs(),
                        (None, None) => 0.0,
                        _ => f64::INFINITY,
                    };
                    worst = worst.max(dev);
                }
            }
        }
        Some((worst, count))
    });
    let mut report = FieldInvarianceReport {
        env_id: env.id().to_string(),
        groups_total: groups.len(),
        groups_compared: 0,
        groups_skipped: 0,
        comparisons: 0,
        max_deviation: 0.0,
        groups: Vec::new(),
    };
    for (((mask, sp, gp), members), res) in groups.iter().zip(results) {
        match res {
            None => report.groups_skipped += 1,
            Some((dev, count)) => {
                report.groups_compared += 1;
                report.comparisons += count;
                report.max_deviation = report.max_deviation.max(dev);
                report.groups.push(GroupDeviation {
                    mask: mask.to_vec(env.factor_count()),
                    source: *sp,
                    goal: *gp,
                    members: members.len(),
                    max_deviation: dev,
                });
            }
        }
    }
    report
}

fn context_of(env: &Environment, x: usize, mask: FactorMask) -> usize {
    x - env.project(x, mask)
}

#[derive(Debug, Clone, Serialize)]
pub struct ClosureReport {
    pub env_id: String,
    pub groups: usize,
    pub violating_groups: usize,
    pub violating_pairs: usize,
    /// Groups whose endogenous source equals the endogenous goal.
    pub trivial_groups: usize,
    pub trivial_nonzero: usize,
    /// Up to ten `(s, g, d, reference d)` witnesses.
    pub examples: Vec<(usize, usize, Option<u32>, Option<u32>)>,
}

/// Checks that optimal distances depend only on the endogenous pair.
pub fn verify_endogenous_closure(env: &Environment, table: &DistanceTable) -> ClosureReport {
    let groups = group_pairs(env);
    let mut report = ClosureReport {
        env_id: env.id().to_string(),
        groups: groups.len(),
        violating_groups: 0,
        violating_pairs: 0,
        trivial_groups: 0,
        trivial_nonzero: 0,
        examples: Vec::new(),
    };
    for ((_, sp, gp), members) in &groups {
        let (s0, g0) = members[0];
        let reference = table.get(s0, g0);
        if sp == gp {
            report.trivial_groups += 1;
            report.trivial_nonzero += members.iter().filter(|&&(s, g)| table.get(s, g) != Some(0)).count();
        }
        let bad: Vec<_> = members
            .iter()
            .filter(|&&(s, g)| table.get(s, g) != reference)
            .collect();
        if !bad.is_empty() {
            report.violating_groups += 1;
            report.violating_pairs += bad.len();
            for &&(s, g) in bad.iter().take(10 - report.examples.len().min(10)) {
                report.examples.push((s, g, table.get(s, g), reference));
            }
        }
    }
    report
}

#[derive(Debug, Clone, Serialize)]
pub struct QuasimetricReport {
    pub env_id: String,
    pub states: usize,
    pub zero_diagonal_violations: usize,
    pub triples_checked: u64,
    pub triangle_violations: u64,
    /// Pairs with `d(s,g) != d(g,s)`; allowed, listed for inspection.
    pub asymmetric_pairs: usize,
    pub asymmetry_witnesses: Vec<(usize, usize, Option<u32>, Option<u32>)>,
}

impl QuasimetricReport {
    pub fn passed(&self) -> bool {
        self.zero_diagonal_violations == 0 && self.triangle_violations == 0
    }
}

/// Exhaustive identity and triangle-inequality check.
pub fn verify_quasimetric(table: &DistanceTable, exec: Execution) -> QuasimetricReport {
    let n = table.state_count();
    let zero_diagonal_violations = (0..n).filter(|&s| table.get(s, s) != Some(0)).count();
    let per_x: Vec<(u64, u64)> = par::map_range(exec, n, |x| {
        let mut checked = 0;
        let mut bad = 0;
        for y in 0..n {
            let Some(dxy) = table.get(x, y) else { continue };
            for z in 0..n {
                let (Some(dyz), Some(dxz)) = (table.get(y, z), table.get(x, z)) else {
                    // an infinite d(x,z) with finite legs breaks the inequality
                    if table.get(y, z).is_some() {
                        checked += 1;
                        bad += 1;
                    }
                    continue;
                };
                checked += 1;
                if u64::from(dxz) > u64::from(dxy) + u64::from(dyz) {
                    bad += 1;
                }
            }
        }
        (checked, bad)
    });
    let mut witnesses = Vec::new();
    let mut asymmetric = 0;
    for s in 0..n {
        for g in s + 1..n {
            if table.raw(s, g) != table.raw(g, s) {
                asymmetric += 1;
                if witnesses.len() < 10 {
                    witnesses.push((s, g, table.get(s, g), table.get(g, s)));
                }
            }
        }
    }
    QuasimetricReport {
        env_id: table.env_id.clone(),
        states: n,
        zero_diagonal_violations,
        triples_checked: per_x.iter().map(|p| p.0).sum(),
        triangle_violations: per_x.iter().map(|p| p.1).sum(),
        asymmetric_pairs: asymmetric,
        asymmetry_witnesses: witnesses,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{solve_distances, RewardMode, UNREACHABLE};

    #[test]
    fn chain_theory_is_exact() {
        let env = Environment::preset("factorchain-3").unwrap();
        let full = solve_distances(&env, RewardMode::FullMatch, Execution::Parallel);
        let endo = solve_distances(&env, RewardMode::EndogenousMatch, Execution::Parallel);
        let q = verify_quasimetric(&full, Execution::Parallel);
        assert!(q.passed());
        assert_eq!(q.triples_checked, 48 * 48 * 48);
        let c = verify_endogenous_closure(&env, &endo);
        assert_eq!(c.violating_groups, 0);
        assert_eq!(c.trivial_nonzero, 0);
        let f = verify_field_invariance(&env, &full, Execution::Parallel);
        assert_eq!(f.max_deviation, 0.0);
        assert!(f.groups_compared > 0);
        assert!(f.groups_skipped > 0);
    }

    #[test]
    fn grid_reports_are_diagnostics() {
        let env = Environment::preset("gridscene-5").unwrap();
        let full = solve_distances(&env, RewardMode::FullMatch, Execution::Parallel);
        let q = verify_quasimetric(&full, Execution::Parallel);
        assert_eq!(q.zero_diagonal_violations, 0);
        assert!(q.passed());
        let f = verify_field_invariance(&env, &full, Execution::Parallel);
        assert!(f.max_deviation.is_finite());
    }

    #[test]
    fn broken_triangle_is_counted() {
        // d(0,2)=5 but d(0,1)+d(1,2)=2
        let d = vec![0, 1, 5, 1, 0, 1, 1, 1, 0];
        let t = DistanceTable::from_raw("t".into(), RewardMode::FullMatch, 3, d).unwrap();
        let q = verify_quasimetric(&t, Execution::Sequential);
        assert!(q.triangle_violations > 0);
        assert!(q.asymmetric_pairs > 0);
        // finite legs 0->1->2 but 2 unreachable from 0
        let d = vec![0, 1, UNREACHABLE, 1, 0, 1, 1, 1, 0];
        let t = DistanceTable::from_raw("t".into(), RewardMode::FullMatch, 3, d).unwrap();
        assert!(!verify_quasimetric(&t, Execution::Sequential).passed());
    }
}
