//! Command implementations shared by the CLI and the tests.
//!
//! Every command reads and writes files under one output directory
//! ([`Layout`]), writes a JSON log named after itself, and returns the same
//! summary as a value.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::analogy::{self, DualAnalogyModel};
use crate::config::{RunConfig, TaskSuite};
use crate::cta::{build_variant, train_cta as run_cta, CtaAgent, Variant};
use crate::datagen::{self, read_dataset, read_header_only, write_dataset, DatasetHeader, TransitionDataset};
use crate::envsim::Environment;
use crate::evalkit::{
    evaluate_checkpoint, headline, holdout_tasks, random_tasks, write_report, AgentPolicy, CheckpointSummary,
    EvalTask, GateManifest, GateOutcome, Headline, MetricsRow, ReportSummary,
};
use crate::oracle::{
    solve_distances, verify_endogenous_closure, verify_field_invariance, verify_quasimetric, ClosureReport,
    FieldInvarianceReport, QuasimetricReport, RewardMode,
};
use crate::par::{self, Execution};
use crate::probe::{self, ClusteringReport, DistanceError, ProbeReport};
use crate::tensor::Matrix;
use crate::{Error, Result};

/// File names under an output root.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Layout { root: root.into() }
    }

    pub fn dataset(&self) -> PathBuf {
        self.root.join("dataset.bin")
    }

    pub fn analogy(&self, seed: u64) -> PathBuf {
        self.root.join(format!("analogy-s{seed}.ckpt"))
    }

    pub fn analogy_log(&self, seed: u64) -> PathBuf {
        self.root.join(format!("analogy-s{seed}.csv"))
    }

    pub fn cta_dir(&self, variant: Variant, seed: u64) -> PathBuf {
        self.root.join(format!("cta-{variant}-s{seed}"))
    }

    pub fn cta_checkpoint(&self, variant: Variant, seed: u64, step: u64) -> PathBuf {
        self.cta_dir(variant, seed).join(format!("step-{step:08}.ckpt"))
    }

    pub fn cta_log(&self, variant: Variant, seed: u64) -> PathBuf {
        self.cta_dir(variant, seed).join("train.csv")
    }

    /// `(csv, json)` of one seed's evaluation.
    pub fn eval_report(&self, variant: Variant, seed: u64) -> (PathBuf, PathBuf) {
        let stem = format!("eval-{variant}-s{seed}");
        (self.root.join(format!("{stem}.csv")), self.root.join(format!("{stem}.json")))
    }

    pub fn eval_summary(&self, variant: Variant) -> PathBuf {
        self.root.join(format!("eval-{variant}.json"))
    }

    pub fn log(&self, command: &str) -> PathBuf {
        self.root.join(format!("{command}.json"))
    }

    fn prepare(&self) -> Result<()> {
        std::fs::create_dir_all(&self.root)?;
        Ok(())
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn require(path: &Path, producer: &'static str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingArtifact {
            path: path.to_path_buf(),
            producer,
        })
    }
}

pub fn observation_matrix(env: &Environment) -> Matrix {
    Matrix::from_vec(env.state_count(), env.obs_dim(), env.observation_table())
}

pub fn load_dataset(env: &Environment, layout: &Layout) -> Result<TransitionDataset> {
    let path = layout.dataset();
    require(&path, "gen-data")?;
    read_dataset(env, BufReader::new(File::open(path)?))
}

pub fn load_analogy(layout: &Layout, seed: u64) -> Result<DualAnalogyModel> {
    let path = layout.analogy(seed);
    require(&path, "train-analogy")?;
    DualAnalogyModel::load(&path)
}

/// Dumps a dataset header.
pub fn describe(path: &Path) -> Result<DatasetHeader> {
    require(path, "gen-data")?;
    read_header_only(BufReader::new(File::open(path)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HoldoutEdit {
    pub rule: String,
    pub removed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenDataSummary {
    pub env_id: String,
    pub config_hash: String,
    pub seed: u64,
    pub episodes: usize,
    pub transitions: usize,
    pub coverage: usize,
    pub holdout: Vec<HoldoutEdit>,
}

/// Play data with every configured holdout rule applied in order.
pub fn gen_data(cfg: &RunConfig, layout: &Layout, exec: Execution) -> Result<GenDataSummary> {
    layout.prepare()?;
    let env = cfg.env.build()?;
    let d = &cfg.dataset;
    let mut ds = datagen::generate_play(&env, d.episodes, d.epsilon, d.seed, exec)?;
    ds.config_hash = cfg.hash();
    let mut holdout = Vec::new();
    for rule in &cfg.holdout {
        let (edited, removed) = datagen::apply_holdout(&ds, &env, rule)?;
        let left = datagen::rescan(&edited, &env, rule)?;
        if left != 0 {
            return Err(Error::usage(format!("holdout {} left {left} in-window transitions", rule.name)));
        }
        ds = edited;
        holdout.push(HoldoutEdit {
            rule: rule.name.clone(),
            removed,
        });
    }
    write_dataset(&ds, &env, BufWriter::new(File::create(layout.dataset())?))?;
    let summary = GenDataSummary {
        env_id: env.id().to_string(),
        config_hash: ds.config_hash.clone(),
        seed: d.seed,
        episodes: ds.episodes().len(),
        transitions: ds.transition_count(),
        coverage: ds.coverage(env.state_count()),
        holdout,
    };
    write_json(&layout.log("gen-data"), &summary)?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalogySummary {
    pub seed: u64,
    pub steps: u64,
    pub representation_loss: f64,
    pub critic_loss: f64,
    /// Against the full-match oracle.
    pub distance: DistanceError,
    pub clustering: ClusteringReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainAnalogyReport {
    pub env_id: String,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub runs: Vec<AnalogySummary>,
}

/// Trains one analogy model per seed and scores it against the oracle.
pub fn train_analogy(cfg: &RunConfig, layout: &Layout, exec: Execution) -> Result<TrainAnalogyReport> {
    layout.prepare()?;
    let env = cfg.env.build()?;
    let ds = load_dataset(&env, layout)?;
    let obs = observation_matrix(&env);
    let table = solve_distances(&env, RewardMode::FullMatch, exec);
    let hash = cfg.hash();
    let runs = par::map_slice(exec, &cfg.seeds, |&seed| -> Result<AnalogySummary> {
        let mut model = DualAnalogyModel::new(env.id(), env.obs_dim(), env.action_count(), cfg.analogy.clone(), seed)?;
        model.meta.config_hash = hash.clone();
        let steps = cfg.analogy.steps;
        let log = analogy::train_analogy(&mut model, &ds, &obs, steps, seed, (steps / 100).max(1), |row| {
            log::debug!("analogy seed {seed} step {} rep {:.4} critic {:.4}", row.step, row.representation, row.critic);
        })?;
        let mut w = csv::Writer::from_path(layout.analogy_log(seed))?;
        for row in &log {
            w.serialize(row)?;
        }
        w.flush()?;
        model.save(&layout.analogy(seed))?;
        let last = log.last().copied();
        Ok(AnalogySummary {
            seed,
            steps: model.meta.steps,
            representation_loss: last.map_or(f64::NAN, |l| l.representation),
            critic_loss: last.map_or(f64::NAN, |l| l.critic),
            distance: probe::distance_error(&model, &obs, &table)?,
            clustering: probe::analogy_clustering(&env, &model, &obs, exec)?,
        })
    });
    let report = TrainAnalogyReport {
        env_id: env.id().to_string(),
        config_hash: hash,
        seeds: cfg.seeds.clone(),
        runs: runs.into_iter().collect::<Result<_>>()?,
    };
    write_json(&layout.log("train-analogy"), &report)?;
    Ok(report)
}

/// The evaluation tasks named by `cfg.eval`.
pub fn eval_tasks(cfg: &RunConfig, env: &Environment) -> Result<Vec<EvalTask>> {
    let e = &cfg.eval;
    match e.suite {
        TaskSuite::Random => random_tasks(env, e.tasks, e.task_seed, e.criterion),
        TaskSuite::Holdout => {
            let rule = cfg
                .holdout
                .first()
                .ok_or_else(|| Error::usage("holdout tasks need a [[holdout]] rule"))?;
            holdout_tasks(env, rule, e.tasks, e.task_seed, e.criterion)
        }
    }
}

/// One row of a training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRow {
    pub step: u64,
    pub value_loss: f64,
    pub high_loss: f64,
    pub low_loss: f64,
    pub eval_success: f64,
    pub eval_direct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CtaRun {
    pub seed: u64,
    pub parameters: usize,
    pub log: Vec<TrainRow>,
    pub headline: Headline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainCtaReport {
    pub env_id: String,
    pub variant: Variant,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub runs: Vec<CtaRun>,
}

fn evaluate_agent(
    cfg: &RunConfig,
    env: &Environment,
    tasks: &[EvalTask],
    agent: &CtaAgent,
    seed: u64,
    exec: Execution,
) -> Result<(Vec<MetricsRow>, CheckpointSummary)> {
    let policy = AgentPolicy {
        agent,
        stochastic: cfg.eval.stochastic,
    };
    let ev = evaluate_checkpoint(&policy, env, tasks, cfg.eval.rollouts, seed, agent.meta.steps, exec)?;
    Ok((ev.rows, ev.summary))
}

/// Trains `cfg.cta.variant` once per seed on top of that seed's analogy
/// model, saving and evaluating a checkpoint every `eval.every` steps.
pub fn train_cta(cfg: &RunConfig, layout: &Layout, exec: Execution) -> Result<TrainCtaReport> {
    layout.prepare()?;
    let env = cfg.env.build()?;
    let ds = load_dataset(&env, layout)?;
    let obs = observation_matrix(&env);
    let tasks = eval_tasks(cfg, &env)?;
    let hash = cfg.hash();
    let variant = cfg.cta.variant;
    let k = cfg.subgoal_steps(&env);
    let runs = par::map_slice(exec, &cfg.seeds, |&seed| -> Result<CtaRun> {
        let analogy = load_analogy(layout, seed)?;
        let mut agent = build_variant(cfg.cta.clone(), &analogy, &obs, k, seed)?;
        agent.meta.config_hash = hash.clone();
        let dir = layout.cta_dir(variant, seed);
        if dir.exists() {
            std::fs::remove_dir_all(&dir)?;
        }
        std::fs::create_dir_all(&dir)?;
        let mut log = Vec::new();
        let mut summaries = Vec::new();
        run_cta(&mut agent, &ds, cfg.cta.steps, seed, cfg.eval.every, |agent, losses| {
            agent.save(&layout.cta_checkpoint(variant, seed, agent.meta.steps))?;
            let (_, summary) = evaluate_agent(cfg, &env, &tasks, agent, seed, exec)?;
            log::info!(
                "{variant} seed {seed} step {}: value {:.4} high {:.4} low {:.4} success {:.3} direct {:.3}",
                agent.meta.steps,
                losses.value,
                losses.high,
                losses.low,
                summary.success,
                summary.direct
            );
            log.push(TrainRow {
                step: agent.meta.steps,
                value_loss: losses.value,
                high_loss: losses.high,
                low_loss: losses.low,
                eval_success: summary.success,
                eval_direct: summary.direct,
            });
            summaries.push(summary);
            Ok(())
        })?;
        let mut w = csv::Writer::from_path(layout.cta_log(variant, seed))?;
        for row in &log {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(CtaRun {
            seed,
            parameters: agent.parameter_count(),
            log,
            headline: headline(&summaries)?,
        })
    });
    let report = TrainCtaReport {
        env_id: env.id().to_string(),
        variant,
        config_hash: hash,
        seeds: cfg.seeds.clone(),
        runs: runs.into_iter().collect::<Result<_>>()?,
    };
    write_json(&layout.log(&format!("train-cta-{variant}")), &report)?;
    Ok(report)
}

/// Mean and sample standard deviation over seeds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub mean: f64,
    pub std: f64,
}

impl Spread {
    pub fn of(xs: &[f64]) -> Spread {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let std = if xs.len() > 1 {
            (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Spread { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantAggregate {
    pub variant: Variant,
    pub env_id: String,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub provenance: Vec<datagen::ProvenanceEntry>,
    pub success: Spread,
    pub direct: Spread,
    pub length: Spread,
    pub efficient: Spread,
    pub per_seed: Vec<Headline>,
    pub gates: Vec<GateOutcome>,
}

impl VariantAggregate {
    /// Seed-averaged headline used for gate checks.
    pub fn mean_headline(&self) -> Headline {
        Headline {
            checkpoints: Vec::new(),
            success: self.success.mean,
            direct: self.direct.mean,
            length: self.length.mean,
            efficient: self.efficient.mean,
        }
    }

    pub fn gates_passed(&self) -> bool {
        self.gates.iter().all(|g| g.passed)
    }
}

fn checkpoints_of(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut found: Vec<PathBuf> = std::fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    found.retain(|p| p.extension().is_some_and(|e| e == "ckpt"));
    found.sort();
    Ok(found)
}

/// Re-evaluates every saved checkpoint of `cfg.cta.variant` for each seed,
/// writes per-seed reports and a seed aggregate, and checks `gates`.
pub fn eval(cfg: &RunConfig, layout: &Layout, gates: Option<&GateManifest>, exec: Execution) -> Result<VariantAggregate> {
    layout.prepare()?;
    let env = cfg.env.build()?;
    let obs = observation_matrix(&env);
    let tasks = eval_tasks(cfg, &env)?;
    let variant = cfg.cta.variant;
    let hash = cfg.hash();
    let header = describe(&layout.dataset())?;
    let mut per_seed = Vec::new();
    for &seed in &cfg.seeds {
        let dir = layout.cta_dir(variant, seed);
        require(&dir, "train-cta")?;
        let analogy = load_analogy(layout, seed)?;
        let mut rows = Vec::new();
        let mut summaries = Vec::new();
        for path in checkpoints_of(&dir)? {
            let agent = CtaAgent::load(&path, &analogy, &obs)?;
            let (r, s) = evaluate_agent(cfg, &env, &tasks, &agent, seed, exec)?;
            rows.extend(r);
            summaries.push(s);
        }
        if summaries.is_empty() {
            return Err(Error::MissingArtifact {
                path: dir.join("step-*.ckpt"),
                producer: "train-cta",
            });
        }
        let h = headline(&summaries)?;
        let report = ReportSummary {
            variant: variant.to_string(),
            env_id: env.id().to_string(),
            config_hash: hash.clone(),
            seeds: vec![seed],
            provenance: header.provenance.clone(),
            checkpoints: summaries,
            headline: h.clone(),
        };
        let (csv_path, json_path) = layout.eval_report(variant, seed);
        write_report(&rows, &report, &csv_path, &json_path)?;
        per_seed.push(h);
    }
    let spread = |f: fn(&Headline) -> f64| Spread::of(&per_seed.iter().map(f).collect::<Vec<_>>());
    let mut agg = VariantAggregate {
        variant,
        env_id: env.id().to_string(),
        config_hash: hash,
        seeds: cfg.seeds.clone(),
        provenance: header.provenance,
        success: spread(|h| h.success),
        direct: spread(|h| h.direct),
        length: spread(|h| h.length),
        efficient: spread(|h| h.efficient),
        per_seed,
        gates: Vec::new(),
    };
    if let Some(m) = gates {
        agg.gates = m.check(&agg.mean_headline());
    }
    write_json(&layout.eval_summary(variant), &agg)?;
    Ok(agg)
}

#[derive(Debug, Clone, Serialize)]
pub struct TheoryReport {
    pub env_id: String,
    pub quasimetric: QuasimetricReport,
    pub closure: ClosureReport,
    pub field_invariance: FieldInvarianceReport,
    pub passed: bool,
}

/// Exact checks of the oracle distances: quasimetric axioms, endogenous
/// closure and context invariance of distance-difference fields.
pub fn verify_theory(env: &Environment, layout: Option<&Layout>, exec: Execution) -> Result<TheoryReport> {
    let full = solve_distances(env, RewardMode::FullMatch, exec);
    let endo = solve_distances(env, RewardMode::EndogenousMatch, exec);
    let quasimetric = verify_quasimetric(&full, exec);
    let closure = verify_endogenous_closure(env, &endo);
    let field_invariance = verify_field_invariance(env, &full, exec);
    let passed = quasimetric.passed()
        && closure.violating_pairs == 0
        && closure.trivial_nonzero == 0
        && field_invariance.max_deviation == 0.0;
    let report = TheoryReport {
        env_id: env.id().to_string(),
        quasimetric,
        closure,
        field_invariance,
        passed,
    };
    if let Some(l) = layout {
        l.prepare()?;
        write_json(&l.log("verify-theory"), &report)?;
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OocReport {
    pub env_id: String,
    pub config_hash: String,
    pub rule: String,
    pub removed: usize,
    pub variants: Vec<VariantAggregate>,
}

/// The out-of-combination protocol: data with the first holdout rule
/// applied, one analogy model per seed, then each compared variant trained
/// and evaluated on the held-out pair.
pub fn ooc_holdout(cfg: &RunConfig, layout: &Layout, gates: Option<&GateManifest>, exec: Execution) -> Result<OocReport> {
    let rule = cfg
        .holdout
        .first()
        .ok_or_else(|| Error::usage("ooc-holdout needs a [[holdout]] rule in the config"))?
        .clone();
    if cfg.eval.compare.is_empty() {
        return Err(Error::spec("eval.compare", "no variants to compare"));
    }
    let mut cfg = cfg.clone();
    cfg.eval.suite = TaskSuite::Holdout;
    let data = gen_data(&cfg, layout, exec)?;
    train_analogy(&cfg, layout, exec)?;
    let mut variants = Vec::new();
    for &v in &cfg.eval.compare {
        let mut c = cfg.clone();
        c.cta.variant = v;
        train_cta(&c, layout, exec)?;
        variants.push(eval(&c, layout, gates, exec)?);
    }
    let report = OocReport {
        env_id: data.env_id,
        config_hash: cfg.hash(),
        rule: rule.name.clone(),
        removed: data.holdout.first().map_or(0, |h| h.removed),
        variants,
    };
    write_json(&layout.log("ooc-holdout"), &report)?;
    Ok(report)
}

/// Nearest-neighbour table of dual analogies for the analogy model of `seed`.
pub fn nn_probe(cfg: &RunConfig, layout: &Layout, seed: u64, pairs: usize, top: usize, exec: Execution) -> Result<ProbeReport> {
    let env = cfg.env.build()?;
    let model = load_analogy(layout, seed)?;
    let obs = observation_matrix(&env);
    let report = probe::nn_probe(&env, &model, &obs, pairs, top, seed, exec)?;
    let mut w = csv::Writer::from_path(layout.root.join(format!("nn-probe-s{seed}.csv")))?;
    for row in &report.rows {
        w.serialize(row)?;
    }
    w.flush()?;
    #[derive(Serialize)]
    struct Log<'a> {
        env_id: &'a str,
        config_hash: String,
        seed: u64,
        pairs: usize,
        top: usize,
        label_agreement: f64,
    }
    write_json(
        &layout.log("nn-probe"),
        &Log {
            env_id: &report.env_id,
            config_hash: cfg.hash(),
            seed,
            pairs,
            top,
            label_agreement: report.label_agreement,
        },
    )?;
    Ok(report)
}
