//! Diagnostics of a trained analogy model against ground truth: implied
//! distance error, analogy clustering by endogenous task, and a ranked
//! nearest-neighbour table over dual analogies.

use std::collections::{HashMap, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analogy::{analogy_rows, implied_distance, DualAnalogyModel};
use crate::envsim::{EndogenousLabel, Environment};
use crate::oracle::DistanceTable;
use crate::par::{self, Execution};
use crate::tensor::{gemm, Matrix};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceError {
    pub pairs: usize,
    /// Mean `|implied - d*|` over pairs with finite `d*`.
    pub mae: f64,
    pub bias: f64,
    /// Pairs whose implied distance hit the clip.
    pub clipped: usize,
}

/// Compares `implied_distance(phi(s) . varphi(g))` with the oracle table,
/// clipping at the state count.
pub fn distance_error(model: &DualAnalogyModel, obs: &Matrix, table: &DistanceTable) -> Result<DistanceError> {
    let n = obs.rows();
    if table.state_count() != n {
        return Err(Error::usage("distance table and observation table disagree on the state count"));
    }
    let v = model.value_matrix(obs)?;
    let gamma = model.config().gamma;
    let (mut abs, mut signed, mut pairs, mut clipped) = (0.0, 0.0, 0usize, 0usize);
    for s in 0..n {
        for g in 0..n {
            if let Some(d) = table.get(s, g) {
                let (x, clip) = implied_distance(v.get(s, g), gamma, n as f64);
                abs += (x - d as f64).abs();
                signed += x - d as f64;
                pairs += 1;
                clipped += clip as usize;
            }
        }
    }
    if pairs == 0 {
        return Err(Error::usage("distance table has no finite pairs"));
    }
    Ok(DistanceError {
        pairs,
        mae: abs / pairs as f64,
        bias: signed / pairs as f64,
        clipped,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusteringReport {
    pub pairs: usize,
    pub groups: usize,
    /// Mean cosine between analogies of distinct pairs with the same label.
    pub within: f64,
    /// Mean cosine between analogies of pairs with different labels.
    pub across: f64,
    pub gap: f64,
}

/// All `(s, g)` with `s != g`, grouped by their ground-truth endogenous label.
fn labelled_pairs(env: &Environment) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>, usize)> {
    let n = env.state_count();
    let states = env.enumerate_states();
    let mut ids: HashMap<EndogenousLabel, usize> = HashMap::new();
    let (mut s_idx, mut g_idx, mut group) = (Vec::new(), Vec::new(), Vec::new());
    for s in 0..n {
        for g in 0..n {
            if s == g {
                continue;
            }
            let label = env.ground_truth_label(&states[s], &states[g])?;
            let next = ids.len();
            group.push(*ids.entry(label).or_insert(next));
            s_idx.push(s);
            g_idx.push(g);
        }
    }
    Ok((s_idx, g_idx, group, ids.len()))
}

fn unit_rows(m: &mut Matrix) {
    for r in 0..m.rows() {
        let row = m.row_mut(r);
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            row.iter_mut().for_each(|x| *x /= norm);
        }
    }
}

/// Cosine structure of `varphi(g) - varphi(s)` over every pair `s != g`:
/// the mean within-label similarity against the mean across labels.
pub fn analogy_clustering(env: &Environment, model: &DualAnalogyModel, obs: &Matrix, exec: Execution) -> Result<ClusteringReport> {
    let (s, g, group, groups) = labelled_pairs(env)?;
    let varphi = model.varphi(obs)?;
    let mut a = analogy_rows(&varphi, &s, &g);
    unit_rows(&mut a);
    let m = a.rows();
    let block = 256;
    let partial = par::map_range(exec, m.div_ceil(block), |b| {
        let lo = b * block;
        let hi = (lo + block).min(m);
        let rows = Matrix::from_vec(hi - lo, a.cols(), a.data()[lo * a.cols()..hi * a.cols()].to_vec());
        let mut gram = Matrix::zeros(hi - lo, m);
        gemm(1.0, &rows, false, &a, true, 0.0, &mut gram);
        let (mut w, mut wn, mut x, mut xn) = (0.0, 0u64, 0.0, 0u64);
        for i in lo..hi {
            let row = gram.row(i - lo);
            for (j, &c) in row.iter().enumerate() {
                if j == i {
                    continue;
                }
                if group[i] == group[j] {
                    w += c;
                    wn += 1;
                } else {
                    x += c;
                    xn += 1;
                }
            }
        }
        (w, wn, x, xn)
    });
    let (w, wn, x, xn) = partial
        .into_iter()
        .fold((0.0, 0, 0.0, 0), |acc, p| (acc.0 + p.0, acc.1 + p.1, acc.2 + p.2, acc.3 + p.3));
    if wn == 0 || xn == 0 {
        return Err(Error::usage("clustering needs at least two labels with two members"));
    }
    let (within, across) = (w / wn as f64, x / xn as f64);
    Ok(ClusteringReport {
        pairs: m,
        groups,
        within,
        across,
        gap: within - across,
    })
}

/// Human-readable ground-truth label: `factor:from>to` for each endogenous
/// factor that changes, `factor=value` for endogenous factors that hold.
pub fn task_label(env: &Environment, s: usize, g: usize) -> String {
    let mask = env.endogenous_mask(s, g);
    let names = &env.spec().factors;
    (0..env.factor_count())
        .filter(|&f| mask.contains(f))
        .map(|f| {
            let (a, b) = (env.factor_value(s, f), env.factor_value(g, f));
            if a == b {
                format!("{}={a}", names[f].name)
            } else {
                format!("{}:{a}>{b}", names[f].name)
            }
        })
        .collect::<Vec<_>>()
        .join(",")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeighborRow {
    pub query: usize,
    pub s: usize,
    pub g: usize,
    pub label: String,
    pub rank: usize,
    pub neighbor_s: usize,
    pub neighbor_g: usize,
    pub neighbor_label: String,
    pub distance: f64,
    pub same_label: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub env_id: String,
    pub seed: u64,
    pub pairs: usize,
    pub top: usize,
    /// Fraction of listed neighbours sharing the query's label.
    pub label_agreement: f64,
    pub rows: Vec<NeighborRow>,
}

/// Samples `pairs` distinct `(s, g)` with `s != g` and lists, for each, its
/// `top` nearest sampled pairs by Euclidean distance between dual analogies.
/// Ties go to the earlier sample.
pub fn nn_probe(
    env: &Environment,
    model: &DualAnalogyModel,
    obs: &Matrix,
    pairs: usize,
    top: usize,
    seed: u64,
    exec: Execution,
) -> Result<ProbeReport> {
    let n = env.state_count();
    let available = n * (n - 1);
    if pairs < 2 || pairs > available {
        return Err(Error::usage(format!("--pairs must be in [2, {available}] on {}", env.id())));
    }
    if top == 0 || top >= pairs {
        return Err(Error::usage("--top must be in [1, pairs)"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0x9B0);
    let mut seen = HashSet::with_capacity(pairs);
    let (mut s, mut g) = (Vec::with_capacity(pairs), Vec::with_capacity(pairs));
    while s.len() < pairs {
        let (a, b) = (rng.random_range(0..n), rng.random_range(0..n));
        if a != b && seen.insert((a, b)) {
            s.push(a);
            g.push(b);
        }
    }
    let varphi = model.varphi(obs)?;
    let a = analogy_rows(&varphi, &s, &g);
    let labels: Vec<String> = s.iter().zip(&g).map(|(&x, &y)| task_label(env, x, y)).collect();
    let per_query = par::map_range(exec, pairs, |q| {
        let mut d: Vec<(f64, usize)> = (0..pairs)
            .filter(|&j| j != q)
            .map(|j| {
                let dist = a.row(q).iter().zip(a.row(j)).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
                (dist.sqrt(), j)
            })
            .collect();
        d.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
        d.truncate(top);
        d.into_iter()
            .enumerate()
            .map(|(rank, (distance, j))| NeighborRow {
                query: q,
                s: s[q],
                g: g[q],
                label: labels[q].clone(),
                rank: rank + 1,
                neighbor_s: s[j],
                neighbor_g: g[j],
                neighbor_label: labels[j].clone(),
                distance,
                same_label: labels[j] == labels[q],
            })
            .collect::<Vec<_>>()
    });
    let rows: Vec<NeighborRow> = per_query.into_iter().flatten().collect();
    let label_agreement = rows.iter().filter(|r| r.same_label).count() as f64 / rows.len() as f64;
    Ok(ProbeReport {
        env_id: env.id().to_string(),
        seed,
        pairs,
        top,
        label_agreement,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analogy::AnalogyConfig;
    use crate::oracle::{solve_distances, RewardMode};

    fn setup() -> (Environment, Matrix, DualAnalogyModel) {
        let env = Environment::preset("factorchain-3").unwrap();
        let obs = Matrix::from_vec(env.state_count(), env.obs_dim(), env.observation_table());
        let cfg = AnalogyConfig {
            d: 6,
            hidden: vec![8],
            critic_hidden: vec![8],
            ..AnalogyConfig::default()
        };
        let m = DualAnalogyModel::new(env.id(), env.obs_dim(), env.action_count(), cfg, 2).unwrap();
        (env, obs, m)
    }

    #[test]
    fn distance_error_matches_direct_sum() {
        let (env, obs, m) = setup();
        let table = solve_distances(&env, RewardMode::FullMatch, Execution::Sequential);
        let e = distance_error(&m, &obs, &table).unwrap();
        let p = m.phi(&obs).unwrap();
        let v = m.varphi(&obs).unwrap();
        let n = env.state_count();
        let mut total = 0.0;
        for s in 0..n {
            for g in 0..n {
                let dot: f64 = p.row(s).iter().zip(v.row(g)).map(|(a, b)| a * b).sum();
                let (x, _) = implied_distance(dot, 0.99, n as f64);
                total += (x - table.get(s, g).unwrap() as f64).abs();
            }
        }
        assert_eq!(e.pairs, n * n);
        assert!((e.mae - total / (n * n) as f64).abs() < 1e-9);
    }

    #[test]
    fn clustering_matches_brute_force() {
        let (env, obs, m) = setup();
        let r = analogy_clustering(&env, &m, &obs, Execution::Parallel).unwrap();
        let (s, g, group, groups) = labelled_pairs(&env).unwrap();
        assert_eq!(r.groups, groups);
        let varphi = m.varphi(&obs).unwrap();
        let rows: Vec<Vec<f64>> = s
            .iter()
            .zip(&g)
            .map(|(&a, &b)| varphi.row(b).iter().zip(varphi.row(a)).map(|(x, y)| x - y).collect())
            .collect();
        let cos = |a: &[f64], b: &[f64]| {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            dot / (na * nb)
        };
        let (mut w, mut wn, mut x, mut xn) = (0.0, 0, 0.0, 0);
        for i in 0..rows.len() {
            for j in 0..rows.len() {
                if i == j {
                    continue;
                }
                if group[i] == group[j] {
                    w += cos(&rows[i], &rows[j]);
                    wn += 1;
                } else {
                    x += cos(&rows[i], &rows[j]);
                    xn += 1;
                }
            }
        }
        assert!((r.within - w / wn as f64).abs() < 1e-9);
        assert!((r.across - x / xn as f64).abs() < 1e-9);
    }

    #[test]
    fn probe_lists_exact_nearest_neighbors() {
        let (env, obs, m) = setup();
        let rep = nn_probe(&env, &m, &obs, 60, 5, 3, Execution::Parallel).unwrap();
        assert_eq!(rep.rows.len(), 60 * 5);
        let seq = nn_probe(&env, &m, &obs, 60, 5, 3, Execution::Sequential).unwrap();
        assert_eq!(rep, seq);
        let varphi = m.varphi(&obs).unwrap();
        let alpha = |s: usize, g: usize| -> Vec<f64> { varphi.row(g).iter().zip(varphi.row(s)).map(|(a, b)| a - b).collect() };
        let mut queries: Vec<(usize, usize)> = rep.rows.iter().map(|r| (r.s, r.g)).collect();
        queries.dedup();
        assert_eq!(queries.len(), 60);
        for q in rep.rows.chunks(5) {
            let qa = alpha(q[0].s, q[0].g);
            let mut all: Vec<f64> = queries
                .iter()
                .filter(|&&p| p != (q[0].s, q[0].g))
                .map(|&(s, g)| qa.iter().zip(alpha(s, g)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
                .collect();
            all.sort_by(f64::total_cmp);
            for (r, d) in q.iter().zip(&all) {
                assert!((r.distance - d).abs() < 1e-12);
            }
            assert!(q.windows(2).all(|w| w[0].distance <= w[1].distance));
        }
    }

    #[test]
    fn probe_rejects_bad_sizes() {
        let (env, obs, m) = setup();
        assert!(nn_probe(&env, &m, &obs, 1, 1, 0, Execution::Sequential).is_err());
        assert!(nn_probe(&env, &m, &obs, 10, 10, 0, Execution::Sequential).is_err());
        assert!(nn_probe(&env, &m, &obs, 48 * 48, 3, 0, Execution::Sequential).is_err());
    }

    #[test]
    fn labels_name_changing_factors() {
        let env = Environment::preset("factorchain-3").unwrap();
        let s = env.encode(&crate::envsim::FactoredState(vec![0, 1, 2]));
        let g = env.encode(&crate::envsim::FactoredState(vec![3, 1, 2]));
        assert_eq!(task_label(&env, s, g), "c0:0>3");
    }
}
