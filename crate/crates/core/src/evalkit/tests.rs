use super::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};

struct Uniform(usize);

impl Policy for Uniform {
    fn act(&self, _task: &EvalTask, states: &[usize], rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
        Ok(states.iter().map(|_| rng.random_range(0..self.0)).collect())
    }
}

fn grid() -> Environment {
    Environment::preset("gridscene-5").unwrap()
}

fn chains() -> Environment {
    Environment::preset("factorchain-3").unwrap()
}

#[test]
fn budget_is_four_times_optimal_with_floor() {
    assert_eq!(budget_for(0), 10);
    assert_eq!(budget_for(2), 10);
    assert_eq!(budget_for(3), 12);
    assert_eq!(budget_for(11), 44);
}

#[test]
fn oracle_solves_every_task_in_optimal_steps() {
    for env in [grid(), chains()] {
        let tasks = random_tasks(&env, 25, 7, SuccessCriterion::Endogenous).unwrap();
        let oracle = OraclePolicy::new(&env, &tasks);
        for t in &tasks {
            assert!(t.optimal > 0);
            let tr = rollout(&oracle, &env, t, 0).unwrap();
            assert_eq!(tr.len(), t.optimal as usize, "{} task {}", env.id(), t.id);
            let sc = score(&env, &tr, t);
            assert!(sc.success && sc.direct, "{} task {}", env.id(), t.id);
        }
    }
}

#[test]
fn full_state_tasks_need_at_least_as_many_steps() {
    let env = grid();
    let endo = random_tasks(&env, 20, 3, SuccessCriterion::Endogenous).unwrap();
    let full = random_tasks(&env, 20, 3, SuccessCriterion::FullState).unwrap();
    for (a, b) in endo.iter().zip(&full) {
        assert_eq!((a.start, a.goal), (b.start, b.goal));
        assert!(b.optimal >= a.optimal);
        assert_eq!(a.exogenous, b.exogenous);
    }
}

#[test]
fn detour_through_exogenous_factor_is_success_but_not_direct() {
    let env = grid();
    let tasks = random_tasks(&env, 50, 11, SuccessCriterion::Endogenous).unwrap();
    let agent = env.agent_factor();
    let t = tasks
        .iter()
        .find(|t| t.exogenous.iter().any(|&f| Some(f) != agent))
        .expect("some task leaves an object exogenous");
    let f = *t.exogenous.iter().find(|&&f| Some(f) != agent).unwrap();
    let toggled = env.with_factor(t.start, f, 1 - env.factor_value(t.start, f));
    let mut end = t.goal;
    for &e in &t.exogenous {
        end = env.with_factor(end, e, env.factor_value(t.start, e));
    }
    let detour = Trajectory {
        states: vec![t.start, toggled, t.start, end],
        actions: vec![0, 0, 0],
    };
    assert_eq!(
        score(&env, &detour, t),
        Score {
            success: true,
            direct: false
        }
    );
    let straight = Trajectory {
        states: vec![t.start, end],
        actions: vec![0],
    };
    assert_eq!(
        score(&env, &straight, t),
        Score {
            success: true,
            direct: true
        }
    );
}

#[test]
fn zero_budget_fails_unsolved_task() {
    let env = chains();
    let mut t = random_tasks(&env, 1, 0, SuccessCriterion::Endogenous).unwrap().remove(0);
    t.budget = 0;
    let oracle = OraclePolicy::new(&env, std::slice::from_ref(&t));
    let tr = rollout(&oracle, &env, &t, 0).unwrap();
    assert!(tr.is_empty());
    assert!(!score(&env, &tr, &t).success);
}

#[test]
fn goal_reached_beyond_budget_does_not_count() {
    let env = chains();
    let mut t = random_tasks(&env, 1, 5, SuccessCriterion::Endogenous).unwrap().remove(0);
    let oracle = OraclePolicy::new(&env, std::slice::from_ref(&t));
    let tr = rollout(&oracle, &env, &t, 0).unwrap();
    t.budget = tr.len() - 1;
    assert!(!score(&env, &tr, &t).success);
}

#[test]
fn start_at_goal_succeeds_without_acting() {
    let env = chains();
    let t = EvalTask::new(&env, 0, 5, 5, SuccessCriterion::FullState).unwrap();
    assert_eq!(t.optimal, 0);
    let tr = rollout(&Uniform(env.action_count()), &env, &t, 1).unwrap();
    assert!(tr.is_empty());
    assert!(score(&env, &tr, &t).direct);
}

#[test]
fn out_of_range_task_is_rejected() {
    let env = chains();
    assert!(EvalTask::new(&env, 0, 0, env.state_count(), SuccessCriterion::Endogenous).is_err());
}

#[test]
fn rollouts_are_reproducible_and_seed_dependent() {
    let env = grid();
    let tasks = random_tasks(&env, 3, 2, SuccessCriterion::Endogenous).unwrap();
    let p = Uniform(env.action_count());
    let a = rollouts(&p, &env, &tasks[0], 8, 9).unwrap();
    let b = rollouts(&p, &env, &tasks[0], 8, 9).unwrap();
    let c = rollouts(&p, &env, &tasks[0], 8, 10).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    for tr in &a {
        assert!(tr.len() <= tasks[0].budget);
        assert_eq!(tr.states.len(), tr.len() + 1);
        for (w, &act) in tr.states.windows(2).zip(&tr.actions) {
            assert_eq!(env.step_index(w[0], act), w[1]);
        }
    }
}

#[test]
fn sequential_and_parallel_evaluation_agree() {
    let env = grid();
    let tasks = random_tasks(&env, 12, 4, SuccessCriterion::Endogenous).unwrap();
    let p = Uniform(env.action_count());
    let a = evaluate_checkpoint(&p, &env, &tasks, 5, 1, 100, Execution::Sequential).unwrap();
    let b = evaluate_checkpoint(&p, &env, &tasks, 5, 1, 100, Execution::Parallel).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.rows.len(), 12);
    assert!(a.rows.iter().all(|r| r.checkpoint == 100 && r.n == 5));
}

#[test]
fn oracle_evaluation_is_perfect() {
    let env = grid();
    let tasks = random_tasks(&env, 10, 8, SuccessCriterion::Endogenous).unwrap();
    let oracle = OraclePolicy::new(&env, &tasks);
    let ev = evaluate_checkpoint(&oracle, &env, &tasks, 3, 0, 1, Execution::Parallel).unwrap();
    let mean_opt = tasks.iter().map(|t| t.optimal as f64).sum::<f64>() / 10.0;
    assert_eq!(ev.summary.success, 1.0);
    assert_eq!(ev.summary.direct, 1.0);
    assert_eq!(ev.summary.efficient, 1.0);
    assert!((ev.summary.length - mean_opt).abs() < 1e-12);
}

#[test]
fn holdout_tasks_exercise_the_removed_event() {
    let env = grid();
    let rule = HoldoutRule::drawer_with_window_closed();
    let r = rule.resolve(&env).unwrap();
    let tasks = holdout_tasks(&env, &rule, 15, 3, SuccessCriterion::Endogenous).unwrap();
    assert_eq!(tasks.len(), 15);
    for t in &tasks {
        assert_eq!(env.factor_value(t.start, r.factor), r.from);
        assert_eq!(env.factor_value(t.goal, r.factor), r.to);
        for &(f, v) in &r.context {
            assert_eq!(env.factor_value(t.start, f), v);
            assert_eq!(env.factor_value(t.goal, f), v);
        }
        assert!(t.mask.contains(r.factor));
    }
}

fn summary(checkpoint: u64, success: f64) -> CheckpointSummary {
    CheckpointSummary {
        checkpoint,
        success,
        direct: success / 2.0,
        length: 10.0,
        efficient: 0.0,
    }
}

#[test]
fn headline_averages_last_three_checkpoints() {
    let s: Vec<_> = [(5, 0.5), (1, 0.0), (4, 0.4), (2, 0.1), (3, 0.3)]
        .iter()
        .map(|&(c, v)| summary(c, v))
        .collect();
    let h = headline(&s).unwrap();
    assert_eq!(h.checkpoints, vec![3, 4, 5]);
    assert!((h.success - 0.4).abs() < 1e-12);
    assert!((h.direct - 0.2).abs() < 1e-12);
}

#[test]
fn headline_with_few_checkpoints_uses_what_exists() {
    let h = headline(&[summary(7, 0.25)]).unwrap();
    assert_eq!(h.checkpoints, vec![7]);
    assert_eq!(h.success, 0.25);
    assert!(headline(&[]).is_err());
}

#[test]
fn report_round_trips_and_rejects_empty_rows() {
    let dir = tempfile::tempdir().unwrap();
    let (csv_path, json_path) = (dir.path().join("m.csv"), dir.path().join("m.json"));
    let rows = vec![
        MetricsRow {
            checkpoint: 10,
            task: 0,
            success: 0.5,
            direct: 0.25,
            length: 13.125,
            n: 8,
        },
        MetricsRow {
            checkpoint: 10,
            task: 1,
            success: 1.0,
            direct: 1.0,
            length: 4.0,
            n: 8,
        },
    ];
    let sums = vec![summary(10, 0.75)];
    let rep = ReportSummary {
        variant: "cta".into(),
        env_id: "gridscene-5".into(),
        config_hash: "abc".into(),
        seeds: vec![0, 1],
        provenance: Vec::new(),
        headline: headline(&sums).unwrap(),
        checkpoints: sums,
    };
    write_report(&rows, &rep, &csv_path, &json_path).unwrap();
    assert_eq!(read_rows(&csv_path).unwrap(), rows);
    let header = std::fs::read_to_string(&csv_path).unwrap();
    assert!(header.starts_with("checkpoint,task,success,direct,length,n\n"));
    let back: ReportSummary = serde_json::from_str(&std::fs::read_to_string(&json_path).unwrap()).unwrap();
    assert_eq!(back, rep);
    let err = write_report(&[], &rep, &csv_path, &json_path).unwrap_err();
    assert!(matches!(err, Error::Usage(_)));
}

#[test]
fn gates_check_headline_bounds() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("gates.toml");
    std::fs::write(
        &path,
        "[[gate]]\nname = \"solves\"\nmetric = \"success\"\nmin = 0.5\n\n[[gate]]\nname = \"short\"\nmetric = \"length\"\nmax = 8.0\n",
    )
    .unwrap();
    let m = GateManifest::load(&path).unwrap();
    let h = headline(&[summary(1, 0.6)]).unwrap();
    let out = m.check(&h);
    assert_eq!(out.len(), 2);
    assert!(out[0].passed);
    assert!(!out[1].passed);
    assert_eq!(out[1].value, 10.0);

    std::fs::write(&path, "[[gate]]\nname = \"x\"\nmetric = \"direct\"\n").unwrap();
    assert!(GateManifest::load(&path).is_err());
    std::fs::write(&path, "[[gate]]\nname = \"x\"\nmetric = \"bogus\"\nmin = 1.0\n").unwrap();
    assert!(GateManifest::load(&path).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn direct_implies_success(seed in 0u64..10_000, task_seed in 0u64..50) {
        let env = grid();
        let tasks = random_tasks(&env, 2, task_seed, SuccessCriterion::Endogenous).unwrap();
        let p = Uniform(env.action_count());
        for t in &tasks {
            for tr in rollouts(&p, &env, t, 4, seed).unwrap() {
                let sc = score(&env, &tr, t);
                prop_assert!(!sc.direct || sc.success);
                prop_assert_eq!(sc.success, t.reached(&env, *tr.states.last().unwrap()));
            }
        }
    }

    #[test]
    fn random_tasks_are_solvable_and_nontrivial(seed in 0u64..10_000) {
        let env = grid();
        let agent = env.agent_factor();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(1..6);
        for t in random_tasks(&env, n, seed, SuccessCriterion::Endogenous).unwrap() {
            prop_assert!((0..env.factor_count())
                .any(|f| Some(f) != agent && env.factor_value(t.start, f) != env.factor_value(t.goal, f)));
            prop_assert!(t.budget >= 4 * t.optimal as usize);
            prop_assert!(t.budget >= 10);
        }
    }
}
