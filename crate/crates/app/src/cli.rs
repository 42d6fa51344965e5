use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use cfsim_core::comparison::{
    evaluate_method, format_table, oracle_holdouts, run_comparison, Benchmark, ComparisonSettings,
    Method, Trained, SPLIT_RATIOS,
};
use cfsim_core::data::{load_sessions, write_sessions, Dataset, Format};
use cfsim_core::discovery::{
    discover, validate_with_interventional, Assumptions, CiTest, LearningLog, PriorKnowledge,
};
use cfsim_core::graph::{CausalGraph, Intervention};
use cfsim_core::model::{load_checkpoint, save_checkpoint, train, ModelConfig, Split, TrainConfig};
use cfsim_core::scm::{fit_scm, FittedScm, ScmSpec, DEFAULT_SMOOTHING};
use cfsim_core::simulate::{simulate_counterfactual, Components, SimulationOptions};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::service::{serve, ServiceState};

/// Name accepted by `--scm` and `--benchmark` in place of a path.
pub const BUNDLED_SCM: &str = "shopsim";

#[derive(Debug, Parser)]
#[command(
    name = "cfsim",
    version,
    about = "Counterfactual simulation of user behavior over a causal graph"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample sessions from a structural causal model.
    GenerateData {
        /// SCM specification JSON, or `shopsim` for the bundled benchmark.
        #[arg(long)]
        scm: String,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Intervention as VAR=LEVEL; repeatable.
        #[arg(long = "do", value_name = "VAR=LEVEL")]
        interventions: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        /// Also write the SCM specification used.
        #[arg(long)]
        spec_out: Option<PathBuf>,
    },
    /// Learn a causal graph from sessions and domain knowledge.
    Discover {
        #[arg(long)]
        data: PathBuf,
        /// Prior knowledge JSON (tiers, required and forbidden edges). Defaults to tiers by variable kind.
        #[arg(long)]
        prior: Option<PathBuf>,
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
        #[arg(long, default_value_t = 3)]
        max_condition_size: usize,
        #[arg(long, value_enum, default_value_t = CiTestArg::GSquared)]
        ci_test: CiTestArg,
        /// Interventional sessions to validate the learned graph against; repeatable.
        #[arg(long)]
        interventional: Vec<PathBuf>,
        #[arg(long, default_value_t = 0.05)]
        tolerance: f64,
        #[arg(long)]
        out: PathBuf,
        /// Write the learning log here instead of standard error.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Estimate conditional probability tables on a fixed graph.
    FitScm {
        #[arg(long)]
        graph: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = DEFAULT_SMOOTHING)]
        smoothing: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the causally conditioned sequence model.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        graph: PathBuf,
        /// Model configuration JSON; omitted fields take their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = TrainConfig::default().lambda)]
        lambda: f64,
        #[arg(long, default_value_t = TrainConfig::default().epochs)]
        epochs: usize,
        #[arg(long, default_value_t = TrainConfig::default().lr)]
        lr: f64,
        #[arg(long, default_value_t = TrainConfig::default().batch_size)]
        batch_size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch loss CSV.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Simulate a counterfactual scenario and print the result as JSON.
    Simulate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        graph: PathBuf,
        #[arg(long)]
        scm_fit: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long = "do", value_name = "VAR=LEVEL", required = true)]
        interventions: Vec<String>,
        #[arg(long, default_value_t = SimulationOptions::default().n)]
        n: usize,
        #[arg(long, default_value_t = SimulationOptions::default().horizon)]
        horizon: usize,
        #[arg(long, default_value_t = 1.0)]
        temperature: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Score a trained model against oracle holdouts, or compare all methods.
    Evaluate {
        #[arg(long, required_unless_present = "compare")]
        model: Option<PathBuf>,
        #[arg(long, required_unless_present = "compare")]
        graph: Option<PathBuf>,
        /// SCM specification JSON, or `shopsim`; supplies the evaluation interventions.
        #[arg(long)]
        benchmark: String,
        /// Observed sessions to anchor simulated states. Defaults to a sample from the benchmark.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Fitted SCM. Defaults to a fit of the graph on the observed sessions.
        #[arg(long)]
        scm_fit: Option<PathBuf>,
        /// Run the full pipeline for every method and print a comparison table.
        #[arg(long)]
        compare: bool,
        /// Comparison settings JSON (with --compare).
        #[arg(long)]
        settings: Option<PathBuf>,
        #[arg(long, default_value_t = 5000)]
        n: usize,
        #[arg(long, default_value_t = 10_000)]
        holdout_n: usize,
        #[arg(long, default_value_t = SimulationOptions::default().horizon)]
        horizon: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
        /// Write the JSON report here as well as to standard output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print a graph as Graphviz DOT or JSON.
    ExportGraph {
        #[arg(long)]
        graph: PathBuf,
        #[arg(long, value_enum, default_value_t = GraphFormat::Dot)]
        format: GraphFormat,
    },
    /// Serve scenarios over HTTP from a state directory.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: std::net::IpAddr,
        /// Directory holding graph.json, scm_fit.json, model.ckpt and data.jsonl.
        #[arg(long)]
        state_dir: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CiTestArg {
    #[value(name = "g2")]
    GSquared,
    #[value(name = "chi2")]
    ChiSquared,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GraphFormat {
    Dot,
    Json,
}

/// Parses `args` (including the program name) and runs the command.
/// Exit codes: 0 success, 1 usage error, 2 runtime failure.
pub fn run<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn print_json<T: Serialize>(value: &T) -> anyhow::Result<()> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

fn load_spec(arg: &str) -> anyhow::Result<ScmSpec> {
    if arg == BUNDLED_SCM && !Path::new(arg).exists() {
        return Ok(ScmSpec::shopsim());
    }
    read_json(Path::new(arg))
}

fn load_data(path: &Path) -> anyhow::Result<Dataset> {
    load_sessions(path, Format::Jsonl).with_context(|| format!("loading {}", path.display()))
}

fn parse_intervention(assignments: &[String], graph: &CausalGraph) -> anyhow::Result<Intervention> {
    let i = Intervention::parse(assignments.iter().map(String::as_str))?;
    i.check(graph)?;
    Ok(i)
}

fn emit_log(log: &LearningLog, path: Option<&Path>) -> anyhow::Result<()> {
    match path {
        Some(p) => {
            fs::write(p, log.to_string()).with_context(|| format!("writing {}", p.display()))
        }
        None => {
            eprint!("{log}");
            Ok(())
        }
    }
}

fn execute(command: Command) -> anyhow::Result<()> {
    match command {
        Command::GenerateData {
            scm,
            n,
            seed,
            interventions,
            out,
            spec_out,
        } => {
            let spec = load_spec(&scm)?;
            let d = if interventions.is_empty() {
                spec.sample_observational(n, seed)?
            } else {
                spec.sample_interventional(
                    &parse_intervention(&interventions, spec.graph())?,
                    n,
                    seed,
                )?
            };
            write_sessions(&d, &out)?;
            if let Some(p) = spec_out {
                write_json(&p, &spec)?;
            }
        }
        Command::Discover {
            data,
            prior,
            alpha,
            max_condition_size,
            ci_test,
            interventional,
            tolerance,
            out,
            log,
        } => {
            let d = load_data(&data)?;
            let k = match prior {
                Some(p) => read_json(&p)?,
                None => PriorKnowledge::from_kinds(d.variables()),
            };
            let ci_test = match ci_test {
                CiTestArg::GSquared => CiTest::GSquared,
                CiTestArg::ChiSquared => CiTest::ChiSquared,
            };
            let a = Assumptions {
                alpha,
                max_condition_size,
                ci_test,
            };
            let found = discover(&d, &k, &a)?;
            let mut graph = found.combined;
            let mut lines = found.log;
            if !interventional.is_empty() {
                let fitted = fit_scm(&graph, &d, DEFAULT_SMOOTHING)?;
                let labelled = interventional
                    .iter()
                    .map(|p| {
                        let di = load_data(p)?;
                        let i = di.intervention().cloned().with_context(|| {
                            format!("{} has no intervention label", p.display())
                        })?;
                        Ok((i, di))
                    })
                    .collect::<anyhow::Result<Vec<_>>>()?;
                let (validated, report) =
                    validate_with_interventional(&graph, &fitted, &labelled, tolerance)?;
                for r in &report.records {
                    lines.push(format!(
                        "validate: {} {} discrepancy {:.4} {}",
                        r.intervention,
                        r.outcome,
                        r.discrepancy,
                        if r.passed { "pass" } else { "fail" }
                    ));
                }
                graph = validated;
            }
            emit_log(&lines, log.as_deref())?;
            write_json(&out, &graph)?;
        }
        Command::FitScm {
            graph,
            data,
            smoothing,
            out,
        } => {
            let g: CausalGraph = read_json(&graph)?;
            let fitted = fit_scm(&g, &load_data(&data)?, smoothing)?;
            write_json(&out, &fitted)?;
        }
        Command::Train {
            data,
            graph,
            config,
            lambda,
            epochs,
            lr,
            batch_size,
            seed,
            out,
            log,
        } => {
            let g: CausalGraph = read_json(&graph)?;
            let cfg: ModelConfig = match config {
                Some(p) => read_json(&p)?,
                None => ModelConfig::default(),
            };
            let d = load_data(&data)?;
            let (tr, va, _) = d.split(SPLIT_RATIOS, seed)?;
            let hyper = TrainConfig {
                lambda,
                lr,
                epochs,
                batch_size,
                seed,
                ..Default::default()
            };
            let (model, training_log) = train(&tr, Some(&va), &g, cfg, &hyper)?;
            save_checkpoint(&model, &out)?;
            if let Some(p) = log {
                fs::write(&p, training_log.to_csv())
                    .with_context(|| format!("writing {}", p.display()))?;
            }
            if let Some(last) = training_log.split(Split::Validation).last() {
                eprintln!(
                    "epoch {}: validation seq NLL {:.4}, causal {:.6}",
                    last.epoch, last.seq, last.causal
                );
            }
        }
        Command::Simulate {
            model,
            graph,
            scm_fit,
            data,
            interventions,
            n,
            horizon,
            temperature,
            seed,
        } => {
            let g: CausalGraph = read_json(&graph)?;
            let fitted: FittedScm = read_json(&scm_fit)?;
            let m = load_checkpoint(&model)?;
            let observed = load_data(&data)?;
            let i = parse_intervention(&interventions, &g)?;
            let c = Components {
                graph: &g,
                model: &m,
                fitted: &fitted,
                observed: &observed,
            };
            let result = simulate_counterfactual(
                &c,
                &i,
                &SimulationOptions {
                    n,
                    horizon,
                    temperature,
                    seed,
                },
            )?;
            print_json(&result)?;
        }
        Command::Evaluate {
            model,
            graph,
            benchmark,
            data,
            scm_fit,
            compare,
            settings,
            n,
            holdout_n,
            horizon,
            seed,
            alpha,
            out,
        } => {
            let spec = load_spec(&benchmark)?;
            let report = if compare {
                let s = match settings {
                    Some(p) => read_json(&p)?,
                    None => ComparisonSettings {
                        sessions: n,
                        holdout_sessions: holdout_n,
                        seed,
                        alpha,
                        simulation: SimulationOptions {
                            horizon,
                            ..ComparisonSettings::default().simulation
                        },
                        ..Default::default()
                    },
                };
                let evals = run_comparison(&spec, &Method::ALL, &s)?;
                let reports: Vec<_> = evals.into_iter().map(|e| e.report).collect();
                eprint!("{}", format_table(&reports));
                serde_json::to_value(reports)?
            } else {
                let (Some(model), Some(graph)) = (model, graph) else {
                    bail!("--model and --graph are required without --compare")
                };
                let g: CausalGraph = read_json(&graph)?;
                let m = load_checkpoint(&model)?;
                let observed = match data {
                    Some(p) => load_data(&p)?,
                    None => spec.sample_observational(n, seed)?,
                };
                let fitted = match scm_fit {
                    Some(p) => read_json(&p)?,
                    None => fit_scm(&g, &observed, DEFAULT_SMOOTHING)?,
                };
                let s = ComparisonSettings {
                    seed,
                    alpha,
                    simulation: SimulationOptions {
                        n,
                        horizon,
                        temperature: 1.0,
                        seed,
                    },
                    ..Default::default()
                };
                let b = Benchmark {
                    holdouts: oracle_holdouts(&spec, holdout_n, seed)?,
                    spec,
                    train: observed.clone(),
                    validation: observed.clone(),
                    test: observed,
                    graph: g,
                    fitted,
                    log: LearningLog::default(),
                };
                serde_json::to_value(evaluate_method(
                    &b,
                    Method::Proposed,
                    &Trained::Neural {
                        model: m,
                        log: Default::default(),
                    },
                    &s,
                )?)?
            };
            if let Some(p) = out {
                write_json(&p, &report)?;
            }
            print_json(&report)?;
        }
        Command::ExportGraph { graph, format } => {
            let g: CausalGraph = read_json(&graph)?;
            match format {
                GraphFormat::Dot => print!("{}", g.export_dot()),
                GraphFormat::Json => print_json(&g)?,
            }
        }
        Command::Serve {
            port,
            host,
            state_dir,
        } => {
            let state = ServiceState::load(&state_dir)?;
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(serve(state, SocketAddr::new(host, port)))?;
        }
    }
    Ok(())
}
