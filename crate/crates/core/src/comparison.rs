//! The proposed model against its ablations and a Markov baseline, all on the
//! same benchmark splits and seeds.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::discovery::{discover, Assumptions, LearningLog, PriorKnowledge};
use crate::error::Result;
use crate::eval::{
    causal_consistency, cf_prediction_error, intervention_divergence, ConsistencyReport,
    EvalReport, MarkovBaseline, MetricsRecord,
};
use crate::graph::{CausalGraph, Intervention};
use crate::model::{train, BehaviorModel, ModelConfig, TrainConfig, TrainingLog};
use crate::scm::{fit_scm, FittedScm, ScmSpec, DEFAULT_SMOOTHING};
use crate::simulate::{anchored_states, simulate_trajectories, Components, SimulationOptions};

pub const SPLIT_RATIOS: (f64, f64, f64) = (0.7, 0.15, 0.15);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Proposed,
    /// Proposed architecture trained with `lambda = 0`.
    AblationNoCausalLoss,
    /// Causal embedding held at zero.
    AblationNoConditioning,
    Markov,
}

impl Method {
    pub const ALL: [Method; 4] = [
        Method::Proposed,
        Method::AblationNoCausalLoss,
        Method::AblationNoConditioning,
        Method::Markov,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Method::Proposed => "proposed",
            Method::AblationNoCausalLoss => "ablation_lambda0",
            Method::AblationNoConditioning => "ablation_no_conditioning",
            Method::Markov => "markov",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ComparisonSettings {
    pub sessions: usize,
    pub holdout_sessions: usize,
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub assumptions: Assumptions,
    pub simulation: SimulationOptions,
    pub alpha: f64,
}

impl Default for ComparisonSettings {
    fn default() -> Self {
        ComparisonSettings {
            sessions: 5000,
            holdout_sessions: 10_000,
            seed: 0,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            assumptions: Assumptions::default(),
            simulation: SimulationOptions {
                n: 5000,
                ..Default::default()
            },
            alpha: 0.05,
        }
    }
}

/// Data, learned graph, fitted SCM and oracle holdouts shared by every method.
#[derive(Debug, Clone)]
pub struct Benchmark {
    pub spec: ScmSpec,
    pub train: Dataset,
    pub validation: Dataset,
    pub test: Dataset,
    pub graph: CausalGraph,
    pub fitted: FittedScm,
    pub holdouts: Vec<(Intervention, Dataset)>,
    pub log: LearningLog,
}

impl Benchmark {
    pub fn prepare(spec: &ScmSpec, s: &ComparisonSettings) -> Result<Self> {
        let data = spec.sample_observational(s.sessions, s.seed)?;
        let (train, validation, test) = data.split(SPLIT_RATIOS, s.seed)?;
        let knowledge = PriorKnowledge::from_kinds(spec.graph().variables());
        let found = discover(&train, &knowledge, &s.assumptions)?;
        let fitted = fit_scm(&found.combined, &train, DEFAULT_SMOOTHING)?;
        let holdouts = oracle_holdouts(spec, s.holdout_sessions, s.seed)?;
        Ok(Benchmark {
            spec: spec.clone(),
            train,
            validation,
            test,
            graph: found.combined,
            fitted,
            holdouts,
            log: found.log,
        })
    }
}

/// `n` sessions per evaluation intervention, sampled from the generator with seed `seed + 1 + k`.
pub fn oracle_holdouts(
    spec: &ScmSpec,
    n: usize,
    seed: u64,
) -> Result<Vec<(Intervention, Dataset)>> {
    spec.evaluation_interventions()
        .iter()
        .enumerate()
        .map(|(k, i)| {
            Ok((
                i.clone(),
                spec.sample_interventional(i, n, seed.wrapping_add(1 + k as u64))?,
            ))
        })
        .collect()
}

#[derive(Debug, Clone)]
pub enum Trained {
    Neural {
        model: BehaviorModel,
        log: TrainingLog,
    },
    Markov(MarkovBaseline),
}

pub fn train_method(b: &Benchmark, method: Method, s: &ComparisonSettings) -> Result<Trained> {
    let (cfg, hyper) = match method {
        Method::Proposed => (s.model.clone(), s.train.clone()),
        Method::AblationNoCausalLoss => (
            s.model.clone(),
            TrainConfig {
                lambda: 0.0,
                ..s.train.clone()
            },
        ),
        Method::AblationNoConditioning => (
            ModelConfig {
                causal_conditioning: false,
                ..s.model.clone()
            },
            s.train.clone(),
        ),
        Method::Markov => {
            return Ok(Trained::Markov(MarkovBaseline::fit(
                &b.train,
                DEFAULT_SMOOTHING,
            )?))
        }
    };
    let (model, log) = train(&b.train, Some(&b.validation), &b.graph, cfg, &hyper)?;
    Ok(Trained::Neural { model, log })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InterventionEval {
    pub intervention: Intervention,
    pub predicted: MetricsRecord,
    pub holdout: MetricsRecord,
    pub cf_error: f64,
    pub divergence: f64,
    pub seq_nll: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MethodEvaluation {
    pub report: EvalReport,
    pub interventions: Vec<InterventionEval>,
    pub consistency: ConsistencyReport,
}

/// Metrics averaged over the benchmark's evaluation interventions, plus the
/// consistency of an observational simulation anchored on the test split.
pub fn evaluate_method(
    b: &Benchmark,
    method: Method,
    trained: &Trained,
    s: &ComparisonSettings,
) -> Result<MethodEvaluation> {
    let opts = SimulationOptions {
        seed: s.seed,
        ..s.simulation
    };
    let vocab = b.test.vocabulary();
    let schema = b.test.schema();
    let mut interventions = Vec::new();
    for (i, holdout) in &b.holdouts {
        let (predicted, seq_nll) = match trained {
            Trained::Neural { model, .. } => {
                let c = Components {
                    graph: &b.graph,
                    model,
                    fitted: &b.fitted,
                    observed: &b.test,
                };
                let t = simulate_trajectories(&c, i, &opts)?;
                (
                    MetricsRecord::from_trajectories(&t, vocab, schema),
                    model.sequence_nll(holdout)?,
                )
            }
            Trained::Markov(m) => {
                let seqs = m.generate(opts.n, opts.horizon, opts.seed);
                (
                    MetricsRecord::from_sequences(&seqs, vocab, schema),
                    m.nll(holdout)?,
                )
            }
        };
        let actual = MetricsRecord::from_dataset(holdout);
        interventions.push(InterventionEval {
            intervention: i.clone(),
            cf_error: cf_prediction_error(&predicted, &actual, opts.horizon),
            divergence: intervention_divergence(
                &predicted.action_frequencies,
                &actual.action_frequencies,
            ),
            predicted,
            holdout: actual,
            seq_nll,
        });
    }

    let empty = Intervention::empty();
    let (seqs, states) = match trained {
        Trained::Neural { model, .. } => {
            let c = Components {
                graph: &b.graph,
                model,
                fitted: &b.fitted,
                observed: &b.test,
            };
            let t = simulate_trajectories(&c, &empty, &opts)?;
            (t.trajectories, t.states)
        }
        Trained::Markov(m) => (
            m.generate(opts.n, opts.horizon, opts.seed),
            anchored_states(&b.fitted, &b.test, &empty, opts.n, opts.seed)?,
        ),
    };
    let consistency = causal_consistency(&seqs, &states, &b.graph, schema, s.alpha)?;

    let k = interventions.len().max(1) as f64;
    let mean = |f: fn(&InterventionEval) -> f64| interventions.iter().map(f).sum::<f64>() / k;
    let report = EvalReport {
        method: method.label().to_string(),
        cf_error: mean(|e| e.cf_error),
        seq_nll: mean(|e| e.seq_nll),
        causal_consistency: consistency.score,
        divergence: mean(|e| e.divergence),
    };
    Ok(MethodEvaluation {
        report,
        interventions,
        consistency,
    })
}

pub fn run_comparison(
    spec: &ScmSpec,
    methods: &[Method],
    s: &ComparisonSettings,
) -> Result<Vec<MethodEvaluation>> {
    let b = Benchmark::prepare(spec, s)?;
    methods
        .iter()
        .map(|&m| {
            log::info!("training {}", m.label());
            let trained = train_method(&b, m, s)?;
            evaluate_method(&b, m, &trained, s)
        })
        .collect()
}

/// Plain-text method-by-metric table.
pub fn format_table(reports: &[EvalReport]) -> String {
    let mut out = format!(
        "{:<26}{:>10}{:>10}{:>13}{:>12}\n",
        "method", "cf_error", "seq_nll", "consistency", "divergence"
    );
    for r in reports {
        out.push_str(&format!(
            "{:<26}{:>10.4}{:>10.4}{:>13.4}{:>12.4}\n",
            r.method, r.cf_error, r.seq_nll, r.causal_consistency, r.divergence
        ));
    }
    out
}
