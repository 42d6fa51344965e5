//! Counterfactual simulation: surgery, affected set, causal-state
//! recomputation from observed sessions, then trajectory generation.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{CausalStateMatrix, Dataset};
use crate::error::{Error, Result};
use crate::eval::{intervention_divergence, MetricsRecord};
use crate::graph::{CausalGraph, Intervention, VariableKind, VariableSet};
use crate::model::{BehaviorModel, TrajectorySet};
use crate::scm::{clamp_vector, sample_categorical, FittedScm};

/// How many generated trajectories a [`ScenarioResult`] carries verbatim.
pub const TRAJECTORY_SAMPLE: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulationOptions {
    pub n: usize,
    pub horizon: usize,
    pub temperature: f64,
    pub seed: u64,
}

impl Default for SimulationOptions {
    fn default() -> Self {
        SimulationOptions {
            n: 1000,
            horizon: 30,
            temperature: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PathEdge {
    pub from: String,
    pub to: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub causal_state: BTreeMap<String, String>,
    pub actions: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioResult {
    pub intervention: Intervention,
    pub affected: VariableSet,
    pub baseline: MetricsRecord,
    pub counterfactual: MetricsRecord,
    pub divergence: f64,
    /// Directed paths in the surgered graph from an intervened variable to a behavioral outcome.
    pub paths: Vec<Vec<PathEdge>>,
    pub trajectories: Vec<TrajectoryRecord>,
    pub options: SimulationOptions,
}

/// Everything a simulation reads; all parts must share one variable set.
#[derive(Debug, Clone, Copy)]
pub struct Components<'a> {
    pub graph: &'a CausalGraph,
    pub model: &'a BehaviorModel,
    pub fitted: &'a FittedScm,
    pub observed: &'a Dataset,
}

impl Components<'_> {
    pub fn check(&self) -> Result<()> {
        let names: Vec<&str> = self.graph.names().collect();
        for (what, other) in [
            ("model", self.model.graph()),
            ("fitted SCM", self.fitted.graph()),
        ] {
            if other.names().collect::<Vec<_>>() != names {
                return Err(Error::InvalidQuery(format!(
                    "the {what} uses a different variable set"
                )));
            }
        }
        if self.model.vocabulary() != self.observed.vocabulary() {
            return Err(Error::InvalidQuery(
                "the model and the observed data use different vocabularies".into(),
            ));
        }
        if self.observed.is_empty() {
            return Err(Error::EmptyData);
        }
        Ok(())
    }
}

fn cycled_states(
    g_mod: &CausalGraph,
    f: &FittedScm,
    obs: &CausalStateMatrix,
    i: &Intervention,
    n: usize,
    seed: u64,
) -> Result<CausalStateMatrix> {
    let g = f.graph();
    let expected = g.apply_intervention(i)?;
    if expected
        .edges()
        .iter()
        .map(|e| (&e.from, &e.to))
        .ne(g_mod.edges().iter().map(|e| (&e.from, &e.to)))
    {
        return Err(Error::InvalidQuery(
            "modified graph is not the fitted graph under this intervention".into(),
        ));
    }
    let clamp = clamp_vector(g, i)?;
    let affected = g.affected_variables(g_mod, i)?;
    let resample: Vec<usize> = g_mod
        .topological_order()
        .into_iter()
        .filter(|&v| clamp[v].is_none() && affected.contains(g.variables()[v].name()))
        .collect();
    if obs.is_empty() && n > 0 {
        return Err(Error::EmptyData);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    let rows = (0..n)
        .map(|r| {
            let mut state = obs.rows()[r % obs.len()].clone();
            for (v, c) in clamp.iter().enumerate() {
                if let Some(level) = c {
                    state[v] = *level;
                }
            }
            for &v in &resample {
                state[v] = sample_categorical(f.conditional(v, &state), &mut rng);
            }
            state
        })
        .collect();
    CausalStateMatrix::new(g.variables().to_vec(), rows)
}

/// `n` recomputed states for `i`, row `r` anchored on observed session `r mod len`.
pub fn anchored_states(
    f: &FittedScm,
    d_obs: &Dataset,
    i: &Intervention,
    n: usize,
    seed: u64,
) -> Result<CausalStateMatrix> {
    let obs = d_obs.state_matrix(f.graph())?;
    cycled_states(&f.graph().apply_intervention(i)?, f, &obs, i, n, seed)
}

/// Per observed session: intervened variables clamped, unaffected variables
/// kept, affected ones resampled in topological order from the fitted CPTs.
pub fn compute_causal_states(
    g_mod: &CausalGraph,
    f: &FittedScm,
    d_obs: &Dataset,
    i: &Intervention,
    seed: u64,
) -> Result<CausalStateMatrix> {
    let obs = d_obs.state_matrix(f.graph())?;
    cycled_states(g_mod, f, &obs, i, obs.len(), seed)
}

/// Surgery, affected set, `n` recomputed states (row `r` anchored on observed
/// session `r mod len`) and generation, packaged with metrics against the
/// observed baseline.
pub fn simulate_counterfactual(
    c: &Components,
    i: &Intervention,
    opts: &SimulationOptions,
) -> Result<ScenarioResult> {
    let t = simulate_trajectories(c, i, opts)?;
    let g_mod = c.graph.apply_intervention(i)?;
    let affected = c.graph.affected_variables(&g_mod, i)?;
    package(c, i, affected, &g_mod, &t, opts)
}

fn package(
    c: &Components,
    i: &Intervention,
    affected: VariableSet,
    g_mod: &CausalGraph,
    t: &TrajectorySet,
    opts: &SimulationOptions,
) -> Result<ScenarioResult> {
    let schema = c.observed.schema();
    let baseline = MetricsRecord::from_dataset(c.observed);
    let counterfactual = MetricsRecord::from_trajectories(t, c.observed.vocabulary(), schema);
    let divergence = intervention_divergence(
        &counterfactual.action_frequencies,
        &baseline.action_frequencies,
    );
    let mut paths = Vec::new();
    for (x, _) in i.iter() {
        for y in g_mod
            .variables()
            .iter()
            .filter(|v| v.kind() == VariableKind::BehavioralOutcome && v.name() != x)
        {
            for p in g_mod.directed_paths(x, y.name())? {
                paths.push(
                    p.into_iter()
                        .map(|(from, to)| PathEdge { from, to })
                        .collect(),
                );
            }
        }
    }
    let trajectories = t
        .trajectories
        .iter()
        .take(TRAJECTORY_SAMPLE)
        .enumerate()
        .map(|(r, a)| TrajectoryRecord {
            causal_state: t.states.labels(r),
            actions: a.clone(),
        })
        .collect();
    Ok(ScenarioResult {
        intervention: i.clone(),
        affected,
        baseline,
        counterfactual,
        divergence,
        paths,
        trajectories,
        options: *opts,
    })
}

/// Generated trajectories for `i` without packaging; used by evaluation.
pub fn simulate_trajectories(
    c: &Components,
    i: &Intervention,
    opts: &SimulationOptions,
) -> Result<TrajectorySet> {
    c.check()?;
    i.check(c.graph)?;
    let states = anchored_states(c.fitted, c.observed, i, opts.n, opts.seed)?;
    let mut t = c
        .model
        .generate(&states, opts.horizon, opts.temperature, opts.seed)?;
    t.intervention = Some(i.clone());
    Ok(t)
}

/// Scenario `k` runs with seed `opts.seed + k`; failures are returned in place.
pub fn run_scenario_suite(
    c: &Components,
    scenarios: &[Intervention],
    opts: &SimulationOptions,
) -> Vec<Result<ScenarioResult>> {
    scenarios
        .iter()
        .enumerate()
        .map(|(k, i)| {
            simulate_counterfactual(
                c,
                i,
                &SimulationOptions {
                    seed: opts.seed.wrapping_add(k as u64),
                    ..*opts
                },
            )
        })
        .collect()
}
