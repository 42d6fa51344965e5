//! Outcome metrics, divergences, an order-1 Markov baseline and the causal
//! consistency score.

use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{ActionSchema, CausalStateMatrix, Dataset, Vocabulary, BOS_ID, EOS_ID};
use crate::discovery::{ci_test, Assumptions};
use crate::error::{Error, Result};
use crate::graph::{CausalGraph, Provenance, Variable, VariableKind};
use crate::model::TrajectorySet;

/// Summary of a set of action sequences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub conversion_rate: f64,
    pub mean_session_length: f64,
    pub engagement_rate: f64,
    /// Share of each non-reserved action among all emitted actions.
    pub action_frequencies: BTreeMap<String, f64>,
}

impl MetricsRecord {
    pub fn from_sequences<'a, S>(
        sequences: impl IntoIterator<Item = &'a S>,
        vocab: &Vocabulary,
        schema: &ActionSchema,
    ) -> Self
    where
        S: AsRef<[String]> + 'a + ?Sized,
    {
        let mut counts: BTreeMap<&str, f64> =
            vocab.actions().iter().map(|a| (a.as_str(), 0.0)).collect();
        let (mut n, mut converted, mut engaged, mut length) = (0usize, 0usize, 0usize, 0usize);
        for seq in sequences {
            let seq = seq.as_ref();
            n += 1;
            length += seq.len();
            if schema
                .conversion_action
                .as_ref()
                .is_some_and(|c| seq.contains(c))
            {
                converted += 1;
            }
            if seq.iter().any(|a| schema.click_actions.contains(a)) {
                engaged += 1;
            }
            for a in seq {
                if let Some(c) = counts.get_mut(a.as_str()) {
                    *c += 1.0;
                }
            }
        }
        let total: f64 = counts.values().sum();
        let k = counts.len().max(1) as f64;
        let action_frequencies = counts
            .into_iter()
            .map(|(a, c)| (a.to_string(), if total > 0.0 { c / total } else { 1.0 / k }))
            .collect();
        let rate = |x: usize| if n == 0 { 0.0 } else { x as f64 / n as f64 };
        MetricsRecord {
            conversion_rate: rate(converted),
            mean_session_length: rate(length),
            engagement_rate: rate(engaged),
            action_frequencies,
        }
    }

    pub fn from_dataset(d: &Dataset) -> Self {
        MetricsRecord::from_sequences(
            d.sessions().iter().map(|s| s.actions.as_slice()),
            d.vocabulary(),
            d.schema(),
        )
    }

    pub fn from_trajectories(t: &TrajectorySet, vocab: &Vocabulary, schema: &ActionSchema) -> Self {
        MetricsRecord::from_sequences(t.trajectories.iter().map(Vec::as_slice), vocab, schema)
    }
}

/// Mean absolute difference of conversion rate, engagement rate and session
/// length divided by `horizon`.
pub fn cf_prediction_error(
    predicted: &MetricsRecord,
    holdout: &MetricsRecord,
    horizon: usize,
) -> f64 {
    let h = horizon.max(1) as f64;
    ((predicted.conversion_rate - holdout.conversion_rate).abs()
        + (predicted.engagement_rate - holdout.engagement_rate).abs()
        + (predicted.mean_session_length - holdout.mean_session_length).abs() / h)
        / 3.0
}

fn kl_to_mixture(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(a, _)| **a > 0.0)
        .map(|(a, b)| a * (2.0 * a / (a + b)).ln())
        .sum()
}

/// Jensen-Shannon divergence in nats, in `[0, ln 2]`.
pub fn jsd(p: &[f64], q: &[f64]) -> f64 {
    assert_eq!(p.len(), q.len(), "distributions must have equal support");
    let a = kl_to_mixture(p, q);
    let b = kl_to_mixture(q, p);
    // add in a fixed order so the result does not depend on argument order
    let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
    (0.5 * (lo + hi)).clamp(0.0, std::f64::consts::LN_2)
}

/// JSD between two action-frequency maps over the union of their keys.
pub fn intervention_divergence(
    predicted: &BTreeMap<String, f64>,
    actual: &BTreeMap<String, f64>,
) -> f64 {
    let keys: BTreeSet<&String> = predicted.keys().chain(actual.keys()).collect();
    let p: Vec<f64> = keys
        .iter()
        .map(|k| predicted.get(*k).copied().unwrap_or(0.0))
        .collect();
    let q: Vec<f64> = keys
        .iter()
        .map(|k| actual.get(*k).copied().unwrap_or(0.0))
        .collect();
    jsd(&p, &q)
}

/// Order-1 Markov chain over actions with Laplace smoothing; ignores causal state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkovBaseline {
    vocabulary: Vocabulary,
    /// `transitions[prev][next]`; the BOS column is always zero.
    transitions: Vec<Vec<f64>>,
    smoothing: f64,
}

impl MarkovBaseline {
    pub fn fit(train: &Dataset, smoothing: f64) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::EmptyData);
        }
        if !(smoothing >= 0.0 && smoothing.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "smoothing must be non-negative, got {smoothing}"
            )));
        }
        let v = train.vocabulary().len();
        let mut counts = vec![vec![0.0; v]; v];
        for s in train.sessions() {
            let ids = train.encode(s)?;
            let mut prev = BOS_ID;
            for &t in ids.iter().chain(std::iter::once(&EOS_ID)) {
                counts[prev][t] += 1.0;
                prev = t;
            }
        }
        let transitions = counts
            .into_iter()
            .map(|row| {
                let total: f64 = row.iter().sum::<f64>() + smoothing * (v - 1) as f64;
                (0..v)
                    .map(|j| match (j, total > 0.0) {
                        (BOS_ID, _) => 0.0,
                        (_, true) => (row[j] + smoothing) / total,
                        (_, false) => 1.0 / (v - 1) as f64,
                    })
                    .collect()
            })
            .collect();
        Ok(MarkovBaseline {
            vocabulary: train.vocabulary().clone(),
            transitions,
            smoothing,
        })
    }

    pub fn transition(&self, prev: usize, next: usize) -> f64 {
        self.transitions[prev][next]
    }

    /// Mean per-token NLL, counting every action and the closing EOS.
    pub fn nll(&self, d: &Dataset) -> Result<f64> {
        if d.vocabulary().tokens() != self.vocabulary.tokens() {
            return Err(Error::InvalidDataset(
                "dataset vocabulary differs from the baseline's".into(),
            ));
        }
        let (mut total, mut n) = (0.0, 0usize);
        for s in d.sessions() {
            let ids = d.encode(s)?;
            let mut prev = BOS_ID;
            for &t in ids.iter().chain(std::iter::once(&EOS_ID)) {
                total -= self.transitions[prev][t].ln();
                n += 1;
                prev = t;
            }
        }
        if n == 0 {
            return Err(Error::EmptyData);
        }
        Ok(total / n as f64)
    }

    /// `n` sequences of at most `horizon` actions; row `r` uses its own stream.
    pub fn generate(&self, n: usize, horizon: usize, seed: u64) -> Vec<Vec<String>> {
        (0..n)
            .map(|r| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(r as u64);
                let mut out = Vec::new();
                let mut prev = BOS_ID;
                while out.len() < horizon {
                    let next = crate::scm::sample_categorical(&self.transitions[prev], &mut rng);
                    if next == EOS_ID {
                        break;
                    }
                    out.push(self.vocabulary.token(next).to_string());
                    prev = next;
                }
                out
            })
            .collect()
    }
}

/// Breakdown of the causal consistency score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    /// Satisfied constraints over tested constraints; 1 when nothing was testable.
    pub score: f64,
    pub tested: usize,
    pub satisfied: usize,
    pub independence_tested: usize,
    pub dependence_tested: usize,
    /// Constraints skipped because no stratum had enough data.
    pub insufficient: usize,
}

/// Checks generated trajectories against the graph. The graph is extended with
/// a purchase indicator and an engagement indicator, each a child of every
/// behavioral outcome. Independence constraints are the d-separations between
/// two nodes (not both indicators) given at most two causal variables; they
/// hold when the CI test does not reject. Dependence constraints are the edges
/// of the extended graph; they hold when the marginal test rejects.
pub fn causal_consistency(
    sequences: &[Vec<String>],
    states: &CausalStateMatrix,
    graph: &CausalGraph,
    schema: &ActionSchema,
    alpha: f64,
) -> Result<ConsistencyReport> {
    if sequences.len() != states.len() {
        return Err(Error::InvalidDataset(
            "one state row per trajectory is required".into(),
        ));
    }
    let a = Assumptions {
        alpha,
        max_condition_size: 2,
        ..Default::default()
    };
    a.check()?;

    let mut vars: Vec<Variable> = Vec::new();
    let mut rows: Vec<Vec<usize>> = vec![Vec::new(); states.len()];
    for v in graph.variables() {
        let c = states.column_index(v.name())?;
        if states.variables()[c].domain() != v.domain() {
            return Err(Error::InvalidDataset(format!(
                "levels of `{}` differ from the graph's",
                v.name()
            )));
        }
        vars.push(v.clone());
        for (row, src) in rows.iter_mut().zip(states.rows()) {
            row.push(src[c]);
        }
    }
    let fresh = |base: &str| {
        let mut name = base.to_string();
        while graph.index_of(&name).is_ok() {
            name.push('_');
        }
        name
    };
    let mut indicators: Vec<(String, Vec<bool>)> = Vec::new();
    if let Some(conv) = &schema.conversion_action {
        indicators.push((
            fresh("purchase"),
            sequences.iter().map(|s| s.contains(conv)).collect(),
        ));
    }
    if !schema.click_actions.is_empty() {
        indicators.push((
            fresh("engaged"),
            sequences
                .iter()
                .map(|s| s.iter().any(|a| schema.click_actions.contains(a)))
                .collect(),
        ));
    }
    let mut m = CausalStateMatrix::new(vars.clone(), rows)?;
    let mut aug_vars = vars;
    for (name, values) in &indicators {
        m = m.with_indicator(name, values)?;
        aug_vars.push(Variable::new(
            name,
            VariableKind::BehavioralOutcome,
            ["0", "1"],
        )?);
    }
    let mut aug = CausalGraph::new(aug_vars)?;
    for e in graph.edges() {
        aug.insert_edge(&e.from, &e.to, e.provenance)?;
    }
    for (name, _) in &indicators {
        for v in graph
            .variables()
            .iter()
            .filter(|v| v.kind() == VariableKind::BehavioralOutcome)
        {
            aug.insert_edge(v.name(), name, Provenance::Prior)?;
        }
    }

    let causal: Vec<usize> = (0..graph.len()).collect();
    let is_indicator = |i: usize| i >= graph.len();
    let names: Vec<String> = aug.names().map(String::from).collect();
    let mut report = ConsistencyReport {
        score: 1.0,
        tested: 0,
        satisfied: 0,
        independence_tested: 0,
        dependence_tested: 0,
        insufficient: 0,
    };

    for x in 0..aug.len() {
        for y in (x + 1)..aug.len() {
            if is_indicator(x) && is_indicator(y) {
                continue;
            }
            let pool: Vec<usize> = causal
                .iter()
                .copied()
                .filter(|&v| v != x && v != y)
                .collect();
            let mut subsets: Vec<Vec<usize>> = vec![vec![]];
            subsets.extend(pool.iter().map(|&a| vec![a]));
            for (i, &a) in pool.iter().enumerate() {
                subsets.extend(pool[i + 1..].iter().map(|&b| vec![a, b]));
            }
            for z in subsets {
                let zset: BTreeSet<usize> = z.iter().copied().collect();
                if !aug.d_separated_idx(x, y, &zset) {
                    continue;
                }
                let zn: Vec<&str> = z.iter().map(|&i| names[i].as_str()).collect();
                let r = ci_test(&m, &names[x], &names[y], &zn, &a)?;
                if r.insufficient {
                    report.insufficient += 1;
                    continue;
                }
                report.independence_tested += 1;
                report.satisfied += usize::from(r.independent);
            }
        }
    }
    for e in aug.edges() {
        let r = ci_test(&m, &e.from, &e.to, &[], &a)?;
        if r.insufficient {
            report.insufficient += 1;
            continue;
        }
        report.dependence_tested += 1;
        report.satisfied += usize::from(!r.independent);
    }
    report.tested = report.independence_tested + report.dependence_tested;
    if report.tested > 0 {
        report.score = report.satisfied as f64 / report.tested as f64;
    }
    Ok(report)
}

/// Per-method evaluation summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub cf_error: f64,
    pub seq_nll: f64,
    pub causal_consistency: f64,
    pub divergence: f64,
}
