use std::path::PathBuf;
use std::process::ExitCode;

use analogon::config::{EnvChoice, RunConfig};
use analogon::cta::Variant;
use analogon::evalkit::GateManifest;
use analogon::par::{self, Execution};
use analogon::pipeline::{self, Layout, VariantAggregate};
use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "analogon", version, about = "Offline goal-conditioned RL laboratory")]
struct Cli {
    /// Run configuration (TOML). Omitted keys take desk-scale defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Replace the configured seed list with this single seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory.
    #[arg(long, global = true, env = "ANALOGON_OUT_DIR", default_value = "runs")]
    out: PathBuf,

    /// Worker threads for data-parallel loops; 1 runs sequentially.
    #[arg(long, global = true)]
    jobs: Option<usize>,

    /// Use the large-scale hyperparameter profile.
    #[arg(long, global = true)]
    paper_scale: bool,

    /// Gate manifest checked against evaluation headlines; any failing gate
    /// makes the exit code nonzero.
    #[arg(long, global = true, value_name = "MANIFEST")]
    gate: Option<PathBuf>,

    /// Environment preset, overriding the config.
    #[arg(long, global = true)]
    env: Option<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the play dataset, applying configured holdout rules.
    GenData,
    /// Train one analogy model per seed.
    TrainAnalogy,
    /// Train a hierarchical agent per seed.
    TrainCta {
        #[arg(long)]
        variant: Option<Variant>,
    },
    /// Evaluate every saved checkpoint of a variant.
    Eval {
        #[arg(long)]
        variant: Option<Variant>,
    },
    /// Exact oracle checks of the distance structure.
    VerifyTheory,
    /// Holdout data, training and held-out evaluation of the compared variants.
    OocHoldout,
    /// Nearest-neighbour table of dual analogies.
    NnProbe {
        #[arg(long, default_value_t = 2000)]
        pairs: usize,
        #[arg(long, default_value_t = 10)]
        top: usize,
    },
    /// Print a dataset header as JSON.
    Describe {
        /// Dataset file; defaults to the one under --out.
        path: Option<PathBuf>,
    },
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if cli.paper_scale {
        cfg = cfg.paper_scale();
    }
    if let Some(s) = cli.seed {
        cfg.seeds = vec![s];
    }
    if let Some(e) = &cli.env {
        cfg.env = EnvChoice::Preset(e.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn gates(cli: &Cli) -> Result<Option<GateManifest>> {
    cli.gate
        .as_deref()
        .map(|p| GateManifest::load(p).with_context(|| format!("reading gate manifest {}", p.display())))
        .transpose()
}

fn print_aggregate(a: &VariantAggregate) {
    println!(
        "{} on {}: success {:.3} ± {:.3}, direct {:.3} ± {:.3} over {} seed(s)",
        a.variant,
        a.env_id,
        a.success.mean,
        a.success.std,
        a.direct.mean,
        a.direct.std,
        a.seeds.len()
    );
    for g in &a.gates {
        println!("  gate {}: {:.3} {}", g.name, g.value, if g.passed { "pass" } else { "FAIL" });
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    par::init_workers(cli.jobs);
    let exec = if cli.jobs == Some(1) {
        Execution::Sequential
    } else {
        Execution::Parallel
    };
    let layout = Layout::new(&cli.out);
    let mut cfg = load_config(&cli)?;
    let manifest = gates(&cli)?;
    match &cli.command {
        Command::GenData => {
            let s = pipeline::gen_data(&cfg, &layout, exec)?;
            println!(
                "{}: {} episodes, {} transitions, {} states covered, {} holdout edit(s) -> {}",
                s.env_id,
                s.episodes,
                s.transitions,
                s.coverage,
                s.holdout.len(),
                layout.dataset().display()
            );
        }
        Command::TrainAnalogy => {
            let r = pipeline::train_analogy(&cfg, &layout, exec)?;
            for run in &r.runs {
                println!(
                    "seed {}: {} steps, distance MAE {:.3}, analogy cosine gap {:.3}",
                    run.seed, run.steps, run.distance.mae, run.clustering.gap
                );
            }
        }
        Command::TrainCta { variant } => {
            if let Some(v) = variant {
                cfg.cta.variant = *v;
            }
            let r = pipeline::train_cta(&cfg, &layout, exec)?;
            for run in &r.runs {
                println!(
                    "{} seed {}: {} parameters, success {:.3}, direct {:.3}",
                    r.variant, run.seed, run.parameters, run.headline.success, run.headline.direct
                );
            }
        }
        Command::Eval { variant } => {
            if let Some(v) = variant {
                cfg.cta.variant = *v;
            }
            let a = pipeline::eval(&cfg, &layout, manifest.as_ref(), exec)?;
            print_aggregate(&a);
            if !a.gates_passed() {
                return Ok(ExitCode::from(2));
            }
        }
        Command::VerifyTheory => {
            let env = cfg.env.build()?;
            let r = pipeline::verify_theory(&env, Some(&layout), exec)?;
            println!(
                "{}: {} triangle violations over {} triples, {} closure violations, field deviation {}",
                r.env_id,
                r.quasimetric.triangle_violations,
                r.quasimetric.triples_checked,
                r.closure.violating_pairs,
                r.field_invariance.max_deviation
            );
            if !r.passed {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::OocHoldout => {
            let r = pipeline::ooc_holdout(&cfg, &layout, manifest.as_ref(), exec)?;
            println!("{}: rule {} removed {} transitions", r.env_id, r.rule, r.removed);
            for a in &r.variants {
                print_aggregate(a);
            }
            if !r.variants.iter().all(VariantAggregate::gates_passed) {
                return Ok(ExitCode::from(2));
            }
        }
        Command::NnProbe { pairs, top } => {
            let seed = cfg.seeds[0];
            let r = pipeline::nn_probe(&cfg, &layout, seed, *pairs, *top, exec)?;
            println!(
                "{} pairs, top {}: {:.3} of neighbours share the query's task label",
                r.pairs, r.top, r.label_agreement
            );
        }
        Command::Describe { path } => {
            let p = path.clone().unwrap_or_else(|| layout.dataset());
            let h = pipeline::describe(&p)?;
            println!("{}", serde_json::to_string_pretty(&h)?);
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
