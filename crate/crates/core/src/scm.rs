//! Categorical structural causal models.
//!
//! [`ScmSpec`] is the ground-truth generator: CPTs over the causal variables
//! plus a [`TrajectoryMechanism`] that emits action sequences conditioned on a
//! few of those variables. [`FittedScm`] holds Laplace-smoothed CPTs estimated
//! from data. Both answer `P(outcome | do(i))` exactly by summing the truncated
//! factorization over the surgered graph.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{ActionSchema, Dataset, Session, Vocabulary, BOS_ID, EOS_ID};
use crate::error::{Error, Result};
use crate::graph::{CausalGraph, Intervention, Provenance, Variable};

/// Largest joint state space [`exact_interventional`](ScmSpec::exact_interventional) will enumerate.
pub const MAX_JOINT_STATES: u128 = 10_000_000;

const ROW_TOLERANCE: f64 = 1e-9;

/// Conditional probability table of one variable.
///
/// Rows are stored in mixed-radix order over `parents` (sorted by name, first
/// parent most significant).
#[derive(Debug, Clone, PartialEq)]
pub struct Cpt {
    variable: String,
    parents: Vec<String>,
    rows: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct CptRowRepr {
    given: Vec<String>,
    probs: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CptRepr {
    variable: String,
    parents: Vec<String>,
    rows: Vec<CptRowRepr>,
}

impl Cpt {
    /// `rows` in mixed-radix order over `parents`; parents are sorted here.
    pub fn new(variable: impl Into<String>, parents: Vec<String>, rows: Vec<Vec<f64>>) -> Self {
        let mut p = parents.clone();
        p.sort();
        assert_eq!(
            p, parents,
            "CPT parents must be given in lexicographic order"
        );
        Cpt {
            variable: variable.into(),
            parents,
            rows,
        }
    }

    pub fn variable(&self) -> &str {
        &self.variable
    }

    pub fn parents(&self) -> &[String] {
        &self.parents
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    fn to_repr(&self, graph: &CausalGraph) -> CptRepr {
        let cards: Vec<&Variable> = self
            .parents
            .iter()
            .map(|p| graph.variable(p).expect("validated parent"))
            .collect();
        let rows = self
            .rows
            .iter()
            .enumerate()
            .map(|(r, probs)| CptRowRepr {
                given: decode_labels(r, &cards),
                probs: probs.clone(),
            })
            .collect();
        CptRepr {
            variable: self.variable.clone(),
            parents: self.parents.clone(),
            rows,
        }
    }

    fn from_repr(r: CptRepr, variables: &BTreeMap<&str, &Variable>) -> Result<Self> {
        let mut sorted = r.parents.clone();
        sorted.sort();
        sorted.dedup();
        if sorted != r.parents {
            return Err(Error::InvalidSpec(format!(
                "parents of `{}` must be sorted and distinct",
                r.variable
            )));
        }
        let parent_vars = r
            .parents
            .iter()
            .map(|p| {
                variables
                    .get(p.as_str())
                    .copied()
                    .ok_or_else(|| Error::UnknownVariable(p.clone()))
            })
            .collect::<Result<Vec<_>>>()?;
        let n_rows: usize = parent_vars.iter().map(|v| v.cardinality()).product();
        let mut rows: Vec<Option<Vec<f64>>> = vec![None; n_rows];
        for row in r.rows {
            let idx = encode_labels(&row.given, &parent_vars)?;
            if rows[idx].replace(row.probs).is_some() {
                return Err(Error::InvalidSpec(format!(
                    "`{}` repeats row {:?}",
                    r.variable, row.given
                )));
            }
        }
        let rows = rows
            .into_iter()
            .enumerate()
            .map(|(i, row)| {
                row.ok_or_else(|| {
                    Error::InvalidSpec(format!(
                        "`{}` lacks row {:?}",
                        r.variable,
                        decode_labels(i, &parent_vars)
                    ))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Cpt {
            variable: r.variable,
            parents: r.parents,
            rows,
        })
    }
}

fn encode_labels(given: &[String], vars: &[&Variable]) -> Result<usize> {
    if given.len() != vars.len() {
        return Err(Error::InvalidSpec(format!(
            "row key {given:?} has wrong arity"
        )));
    }
    let mut idx = 0;
    for (label, v) in given.iter().zip(vars) {
        idx = idx * v.cardinality() + v.level_index(label)?;
    }
    Ok(idx)
}

fn decode_labels(mut idx: usize, vars: &[&Variable]) -> Vec<String> {
    let mut out = vec![String::new(); vars.len()];
    for (slot, v) in out.iter_mut().zip(vars).rev() {
        *slot = v.domain()[idx % v.cardinality()].clone();
        idx /= v.cardinality();
    }
    out
}

fn check_distribution(what: &str, probs: &[f64], len: usize) -> Result<()> {
    if probs.len() != len {
        return Err(Error::InvalidSpec(format!(
            "{what}: expected {len} probabilities, got {}",
            probs.len()
        )));
    }
    if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(Error::InvalidSpec(format!(
            "{what}: negative or non-finite probability"
        )));
    }
    let sum: f64 = probs.iter().sum();
    if (sum - 1.0).abs() > ROW_TOLERANCE {
        return Err(Error::InvalidSpec(format!("{what}: row sums to {sum}")));
    }
    Ok(())
}

/// Draws an index from a normalized distribution.
pub(crate) fn sample_categorical(probs: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        acc += p;
        last = i;
        if u < acc {
            return i;
        }
    }
    last
}

/// Graph plus one CPT per variable (in graph variable order), with parent
/// indices resolved for fast row lookup.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Factorization {
    graph: CausalGraph,
    cpts: Vec<Cpt>,
    parent_idx: Vec<Vec<usize>>,
}

impl Factorization {
    fn new(graph: CausalGraph, cpts: Vec<Cpt>) -> Result<Self> {
        let mut by_var: BTreeMap<String, Cpt> = BTreeMap::new();
        for c in cpts {
            graph.index_of(&c.variable)?;
            let name = c.variable.clone();
            if by_var.insert(name.clone(), c).is_some() {
                return Err(Error::InvalidSpec(format!("two CPTs for `{name}`")));
            }
        }
        let mut ordered = Vec::with_capacity(graph.len());
        let mut parent_idx = Vec::with_capacity(graph.len());
        for v in graph.variables() {
            let cpt = by_var
                .remove(v.name())
                .ok_or_else(|| Error::InvalidSpec(format!("no CPT for `{}`", v.name())))?;
            if cpt.parents != graph.parents(v.name())? {
                return Err(Error::InvalidSpec(format!(
                    "CPT parents of `{}` disagree with the graph",
                    v.name()
                )));
            }
            let idx = cpt
                .parents
                .iter()
                .map(|p| graph.index_of(p))
                .collect::<Result<Vec<_>>>()?;
            let n_rows: usize = idx
                .iter()
                .map(|&p| graph.variables()[p].cardinality())
                .product();
            if cpt.rows.len() != n_rows {
                return Err(Error::InvalidSpec(format!(
                    "`{}` needs {n_rows} rows",
                    v.name()
                )));
            }
            for (r, row) in cpt.rows.iter().enumerate() {
                check_distribution(&format!("CPT `{}` row {r}", v.name()), row, v.cardinality())?;
            }
            ordered.push(cpt);
            parent_idx.push(idx);
        }
        Ok(Factorization {
            graph,
            cpts: ordered,
            parent_idx,
        })
    }

    fn row_index(&self, v: usize, state: &[usize]) -> usize {
        self.parent_idx[v].iter().fold(0, |acc, &p| {
            acc * self.graph.variables()[p].cardinality() + state[p]
        })
    }

    pub(crate) fn distribution(&self, v: usize, state: &[usize]) -> &[f64] {
        &self.cpts[v].rows[self.row_index(v, state)]
    }

    /// Ancestral sample with `clamp`ed variables fixed (their factors dropped).
    fn sample_state(&self, clamp: &[Option<usize>], rng: &mut impl Rng) -> Vec<usize> {
        let mut state = vec![0; self.graph.len()];
        for v in self.graph.topological_order() {
            state[v] = match clamp[v] {
                Some(level) => level,
                None => sample_categorical(self.distribution(v, &state), rng),
            };
        }
        state
    }

    /// `P(outcome | do(i))` by exhaustive summation over the ancestors of
    /// `outcome` in the surgered graph.
    fn interventional(&self, intervention: &Intervention, outcome: &str) -> Result<Vec<f64>> {
        let clamp = clamp_vector(&self.graph, intervention)?;
        let target = self.graph.index_of(outcome)?;
        let surgered = self.graph.apply_intervention(intervention)?;
        let relevant = surgered.ancestors_of([target]);
        let order: Vec<usize> = surgered
            .topological_order()
            .into_iter()
            .filter(|v| relevant.contains(v))
            .collect();
        let space: u128 = order
            .iter()
            .filter(|&&v| clamp[v].is_none())
            .map(|&v| self.graph.variables()[v].cardinality() as u128)
            .product();
        if space > MAX_JOINT_STATES {
            return Err(Error::StateSpaceTooLarge(space));
        }
        let mut out = vec![0.0; self.graph.variables()[target].cardinality()];
        let mut state = vec![0; self.graph.len()];
        self.enumerate(&order, 0, &clamp, &mut state, 1.0, target, &mut out);
        let total: f64 = out.iter().sum();
        out.iter_mut().for_each(|p| *p /= total);
        Ok(out)
    }

    #[allow(clippy::too_many_arguments)]
    fn enumerate(
        &self,
        order: &[usize],
        pos: usize,
        clamp: &[Option<usize>],
        state: &mut [usize],
        weight: f64,
        target: usize,
        out: &mut [f64],
    ) {
        let Some(&v) = order.get(pos) else {
            out[state[target]] += weight;
            return;
        };
        if let Some(level) = clamp[v] {
            state[v] = level;
            self.enumerate(order, pos + 1, clamp, state, weight, target, out);
            return;
        }
        let dist = self.distribution(v, state).to_vec();
        for (level, p) in dist.into_iter().enumerate() {
            if p == 0.0 {
                continue;
            }
            state[v] = level;
            self.enumerate(order, pos + 1, clamp, state, weight * p, target, out);
        }
    }

    fn cpt_reprs(&self) -> Vec<CptRepr> {
        self.cpts.iter().map(|c| c.to_repr(&self.graph)).collect()
    }
}

pub(crate) fn clamp_vector(
    graph: &CausalGraph,
    intervention: &Intervention,
) -> Result<Vec<Option<usize>>> {
    let mut clamp = vec![None; graph.len()];
    for (v, level) in intervention.resolve(graph)? {
        clamp[v] = Some(level);
    }
    Ok(clamp)
}

/// Markov-chain action generator, one regime per joint level of the
/// conditioning variables.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryMechanism {
    vocabulary: Vocabulary,
    conditioning: Vec<String>,
    max_length: usize,
    schema: ActionSchema,
    regimes: Vec<Regime>,
}

#[derive(Debug, Clone, PartialEq)]
struct Regime {
    initial: Vec<f64>,
    transition: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct RegimeRepr {
    given: Vec<String>,
    initial: Vec<f64>,
    transition: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct MechanismRepr {
    vocabulary: Vocabulary,
    conditioning: Vec<String>,
    max_length: usize,
    #[serde(flatten)]
    schema: ActionSchema,
    regimes: Vec<RegimeRepr>,
}

impl TrajectoryMechanism {
    pub fn vocabulary(&self) -> &Vocabulary {
        &self.vocabulary
    }

    pub fn conditioning(&self) -> &[String] {
        &self.conditioning
    }

    pub fn max_length(&self) -> usize {
        self.max_length
    }

    pub fn schema(&self) -> &ActionSchema {
        &self.schema
    }

    fn from_repr(r: MechanismRepr, variables: &BTreeMap<&str, &Variable>) -> Result<Self> {
        if r.max_length == 0 {
            return Err(Error::InvalidSpec("max_length must be positive".into()));
        }
        r.schema.check(&r.vocabulary)?;
        let cond_vars = r
            .conditioning
            .iter()
            .map(|c| {
                variables
                    .get(c.as_str())
                    .copied()
                    .ok_or_else(|| Error::UnknownVariable(c.clone()))
            })
            .collect::<Result<Vec<_>>>()?;
        let n_regimes: usize = cond_vars.iter().map(|v| v.cardinality()).product();
        let v = r.vocabulary.len();
        let mut regimes: Vec<Option<Regime>> = vec![None; n_regimes];
        for reg in r.regimes {
            let idx = encode_labels(&reg.given, &cond_vars)?;
            let what = format!("regime {:?}", reg.given);
            check_distribution(&format!("{what} initial"), &reg.initial, v)?;
            if reg.initial[BOS_ID] != 0.0 || reg.initial[EOS_ID] != 0.0 {
                return Err(Error::InvalidSpec(format!(
                    "{what}: initial action cannot be reserved"
                )));
            }
            if reg.transition.len() != v {
                return Err(Error::InvalidSpec(format!(
                    "{what}: transition needs {v} rows"
                )));
            }
            for (t, row) in reg.transition.iter().enumerate() {
                check_distribution(&format!("{what} transition row {t}"), row, v)?;
                if row[BOS_ID] != 0.0 {
                    return Err(Error::InvalidSpec(format!(
                        "{what}: transitions into {} are not allowed",
                        crate::data::BOS
                    )));
                }
            }
            if reg.transition[EOS_ID][EOS_ID] != 1.0 {
                return Err(Error::InvalidSpec(format!(
                    "{what}: end-of-session must be absorbing"
                )));
            }
            if regimes[idx]
                .replace(Regime {
                    initial: reg.initial,
                    transition: reg.transition,
                })
                .is_some()
            {
                return Err(Error::InvalidSpec(format!("{what} given twice")));
            }
        }
        let regimes = regimes
            .into_iter()
            .enumerate()
            .map(|(i, r)| {
                r.ok_or_else(|| {
                    Error::InvalidSpec(format!("missing regime {:?}", decode_labels(i, &cond_vars)))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(TrajectoryMechanism {
            vocabulary: r.vocabulary,
            conditioning: r.conditioning,
            max_length: r.max_length,
            schema: r.schema,
            regimes,
        })
    }

    fn to_repr(&self, graph: &CausalGraph) -> MechanismRepr {
        let cond_vars: Vec<&Variable> = self
            .conditioning
            .iter()
            .map(|c| graph.variable(c).expect("validated"))
            .collect();
        MechanismRepr {
            vocabulary: self.vocabulary.clone(),
            conditioning: self.conditioning.clone(),
            max_length: self.max_length,
            schema: self.schema.clone(),
            regimes: self
                .regimes
                .iter()
                .enumerate()
                .map(|(i, r)| RegimeRepr {
                    given: decode_labels(i, &cond_vars),
                    initial: r.initial.clone(),
                    transition: r.transition.clone(),
                })
                .collect(),
        }
    }

    /// Action ids until end-of-session or `max_length` actions.
    fn sample(&self, graph: &CausalGraph, state: &[usize], rng: &mut impl Rng) -> Vec<usize> {
        let regime = self.conditioning.iter().fold(0, |acc, c| {
            let i = graph.index_of(c).expect("validated");
            acc * graph.variables()[i].cardinality() + state[i]
        });
        let regime = &self.regimes[regime];
        let mut actions = Vec::new();
        let mut token = sample_categorical(&regime.initial, rng);
        while token != EOS_ID {
            actions.push(token);
            if actions.len() == self.max_length {
                break;
            }
            token = sample_categorical(&regime.transition[token], rng);
        }
        actions
    }
}

/// Ground-truth synthetic SCM.
#[derive(Debug, Clone, PartialEq)]
pub struct ScmSpec {
    name: String,
    factors: Factorization,
    trajectory: TrajectoryMechanism,
    evaluation_interventions: Vec<Intervention>,
}

#[derive(Serialize, Deserialize)]
struct ScmRepr {
    name: String,
    variables: Vec<Variable>,
    cpts: Vec<CptRepr>,
    trajectory: MechanismRepr,
    #[serde(default)]
    evaluation_interventions: Vec<Intervention>,
}

impl Serialize for ScmSpec {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        ScmRepr {
            name: self.name.clone(),
            variables: self.factors.graph.variables().to_vec(),
            cpts: self.factors.cpt_reprs(),
            trajectory: self.trajectory.to_repr(&self.factors.graph),
            evaluation_interventions: self.evaluation_interventions.clone(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for ScmSpec {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        ScmSpec::from_repr(ScmRepr::deserialize(d)?).map_err(serde::de::Error::custom)
    }
}

impl ScmSpec {
    fn from_repr(r: ScmRepr) -> Result<Self> {
        let by_name: BTreeMap<&str, &Variable> =
            r.variables.iter().map(|v| (v.name(), v)).collect();
        let cpts = r
            .cpts
            .into_iter()
            .map(|c| Cpt::from_repr(c, &by_name))
            .collect::<Result<Vec<_>>>()?;
        let trajectory = TrajectoryMechanism::from_repr(r.trajectory, &by_name)?;
        ScmSpec::new(
            r.name,
            r.variables,
            cpts,
            trajectory,
            r.evaluation_interventions,
        )
    }

    /// The graph is derived from the CPT parent lists (edges carry `Prior` provenance).
    pub fn new(
        name: impl Into<String>,
        variables: Vec<Variable>,
        cpts: Vec<Cpt>,
        trajectory: TrajectoryMechanism,
        evaluation_interventions: Vec<Intervention>,
    ) -> Result<Self> {
        let mut graph = CausalGraph::new(variables)?;
        let mut edges: Vec<(String, String)> = cpts
            .iter()
            .flat_map(|c| c.parents.iter().map(|p| (p.clone(), c.variable.clone())))
            .collect();
        edges.sort();
        for (from, to) in edges {
            graph.insert_edge(&from, &to, Provenance::Prior)?;
        }
        for c in &trajectory.conditioning {
            graph.index_of(c)?;
        }
        for i in &evaluation_interventions {
            i.check(&graph)?;
        }
        Ok(ScmSpec {
            name: name.into(),
            factors: Factorization::new(graph, cpts)?,
            trajectory,
            evaluation_interventions,
        })
    }

    /// Replaces the CPTs, keeping the trajectory mechanism.
    pub fn with_cpts(&self, cpts: Vec<Cpt>) -> Result<Self> {
        ScmSpec::new(
            self.name.clone(),
            self.graph().variables().to_vec(),
            cpts,
            self.trajectory.clone(),
            self.evaluation_interventions.clone(),
        )
    }

    /// The canonical ShopSim benchmark shipped with the crate.
    pub fn shopsim() -> Self {
        serde_json::from_str(include_str!("../assets/shopsim.json"))
            .expect("bundled shopsim.json is valid")
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn graph(&self) -> &CausalGraph {
        &self.factors.graph
    }

    pub fn cpts(&self) -> &[Cpt] {
        &self.factors.cpts
    }

    pub fn trajectory(&self) -> &TrajectoryMechanism {
        &self.trajectory
    }

    pub fn evaluation_interventions(&self) -> &[Intervention] {
        &self.evaluation_interventions
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn fingerprint(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("spec serializes");
        Sha256::digest(&bytes)
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn sample_observational(&self, n: usize, seed: u64) -> Result<Dataset> {
        self.sample(None, n, seed)
    }

    pub fn sample_interventional(
        &self,
        intervention: &Intervention,
        n: usize,
        seed: u64,
    ) -> Result<Dataset> {
        self.sample(Some(intervention), n, seed)
    }

    fn sample(&self, intervention: Option<&Intervention>, n: usize, seed: u64) -> Result<Dataset> {
        let graph = self.graph();
        let empty = Intervention::empty();
        let clamp = clamp_vector(graph, intervention.unwrap_or(&empty))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vocab = &self.trajectory.vocabulary;
        let width = n.max(1).to_string().len();
        let sessions = (0..n)
            .map(|i| {
                let state = self.factors.sample_state(&clamp, &mut rng);
                let actions = self.trajectory.sample(graph, &state, &mut rng);
                Session {
                    session_id: format!("s{i:0width$}"),
                    causal_state: graph
                        .variables()
                        .iter()
                        .zip(&state)
                        .map(|(v, &l)| (v.name().to_string(), v.domain()[l].clone()))
                        .collect(),
                    actions: actions
                        .into_iter()
                        .map(|a| vocab.token(a).to_string())
                        .collect(),
                }
            })
            .collect();
        Ok(
            Dataset::new(vocab.clone(), graph.variables().to_vec(), sessions)?
                .with_intervention(intervention.cloned())
                .with_schema(self.trajectory.schema.clone())?
                .with_provenance(format!("scm:{}:sha256:{}", self.name, self.fingerprint())),
        )
    }

    /// Exact `P(outcome | do(i))`, no sampling.
    pub fn exact_interventional(
        &self,
        intervention: &Intervention,
        outcome: &str,
    ) -> Result<Vec<f64>> {
        self.factors.interventional(intervention, outcome)
    }
}

/// Laplace-smoothed CPTs estimated on a given graph.
#[derive(Debug, Clone, PartialEq)]
pub struct FittedScm {
    factors: Factorization,
    sample_count: usize,
    smoothing: f64,
}

#[derive(Serialize, Deserialize)]
struct FittedRepr {
    graph: CausalGraph,
    cpts: Vec<CptRepr>,
    sample_count: usize,
    smoothing: f64,
}

impl Serialize for FittedScm {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        FittedRepr {
            graph: self.factors.graph.clone(),
            cpts: self.factors.cpt_reprs(),
            sample_count: self.sample_count,
            smoothing: self.smoothing,
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for FittedScm {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let r = FittedRepr::deserialize(d)?;
        let by_name: BTreeMap<&str, &Variable> =
            r.graph.variables().iter().map(|v| (v.name(), v)).collect();
        let cpts = r
            .cpts
            .into_iter()
            .map(|c| Cpt::from_repr(c, &by_name))
            .collect::<Result<Vec<_>>>()
            .map_err(serde::de::Error::custom)?;
        let factors = Factorization::new(r.graph, cpts).map_err(serde::de::Error::custom)?;
        Ok(FittedScm {
            factors,
            sample_count: r.sample_count,
            smoothing: r.smoothing,
        })
    }
}

pub const DEFAULT_SMOOTHING: f64 = 1.0;

/// Each CPT row is `(count + smoothing) / (row_total + smoothing * levels)`;
/// rows with no mass at all fall back to uniform.
pub fn fit_scm(graph: &CausalGraph, data: &Dataset, smoothing: f64) -> Result<FittedScm> {
    if data.is_empty() {
        return Err(Error::EmptyData);
    }
    if !(smoothing >= 0.0 && smoothing.is_finite()) {
        return Err(Error::InvalidSpec(format!(
            "smoothing must be non-negative, got {smoothing}"
        )));
    }
    let states = data.state_matrix(graph)?;
    let mut cpts = Vec::with_capacity(graph.len());
    for (v, var) in graph.variables().iter().enumerate() {
        let parents = graph.parents(var.name())?;
        let pidx: Vec<usize> = parents
            .iter()
            .map(|p| graph.index_of(p))
            .collect::<Result<_>>()?;
        let n_rows: usize = pidx
            .iter()
            .map(|&p| graph.variables()[p].cardinality())
            .product();
        let k = var.cardinality();
        let mut counts = vec![vec![0.0f64; k]; n_rows];
        for row in states.rows() {
            let r = pidx.iter().fold(0, |acc, &p| {
                acc * graph.variables()[p].cardinality() + row[p]
            });
            counts[r][row[v]] += 1.0;
        }
        let rows = counts
            .into_iter()
            .map(|c| {
                let total: f64 = c.iter().sum::<f64>() + smoothing * k as f64;
                if total == 0.0 {
                    vec![1.0 / k as f64; k]
                } else {
                    c.iter().map(|x| (x + smoothing) / total).collect()
                }
            })
            .collect();
        cpts.push(Cpt {
            variable: var.name().to_string(),
            parents,
            rows,
        });
    }
    Ok(FittedScm {
        factors: Factorization::new(graph.clone(), cpts)?,
        sample_count: data.len(),
        smoothing,
    })
}

impl FittedScm {
    pub fn graph(&self) -> &CausalGraph {
        &self.factors.graph
    }

    pub fn cpts(&self) -> &[Cpt] {
        &self.factors.cpts
    }

    pub fn sample_count(&self) -> usize {
        self.sample_count
    }

    pub fn smoothing(&self) -> f64 {
        self.smoothing
    }

    /// The exact oracle applied to the fitted CPTs.
    pub fn estimate_interventional(
        &self,
        intervention: &Intervention,
        outcome: &str,
    ) -> Result<Vec<f64>> {
        self.factors.interventional(intervention, outcome)
    }

    /// `P(v | parents)` for the row selected by `state` (indices in graph order).
    pub fn conditional(&self, v: usize, state: &[usize]) -> &[f64] {
        self.factors.distribution(v, state)
    }

    /// Wraps a ground-truth spec's CPTs as a fitted model.
    pub fn from_spec(spec: &ScmSpec) -> Self {
        FittedScm {
            factors: spec.factors.clone(),
            sample_count: 0,
            smoothing: 0.0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn do_(spec: &ScmSpec, var: &str, level: &str) -> Intervention {
        Intervention::new(spec.graph(), [(var, level)]).unwrap()
    }

    #[test]
    fn shopsim_loads_with_expected_graph() {
        let s = ScmSpec::shopsim();
        let edges: Vec<(String, String)> = s
            .graph()
            .edges()
            .into_iter()
            .map(|e| (e.from, e.to))
            .collect();
        let expect = [("E", "Y"), ("F", "E"), ("U", "E"), ("U", "F"), ("U", "Y")];
        assert_eq!(edges, expect.map(|(a, b)| (a.to_string(), b.to_string())));
        let text = serde_json::to_string(&s).unwrap();
        let back: ScmSpec = serde_json::from_str(&text).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn spec_validation_rejects_bad_rows() {
        let base: serde_json::Value =
            serde_json::from_str(include_str!("../assets/shopsim.json")).unwrap();
        let mut bad = base.clone();
        bad["cpts"][0]["rows"][0]["probs"] = serde_json::json!([0.6, 0.5]);
        assert!(serde_json::from_value::<ScmSpec>(bad).is_err());
        let mut bad = base.clone();
        bad["cpts"][3]["rows"].as_array_mut().unwrap().pop();
        assert!(serde_json::from_value::<ScmSpec>(bad).is_err());
        let mut bad = base.clone();
        bad["trajectory"]["regimes"][0]["transition"][1] = serde_json::json!([0, 0, 1, 0, 0, 0]);
        assert!(serde_json::from_value::<ScmSpec>(bad).is_err());
        let mut bad = base;
        bad["cpts"][1]["parents"] = serde_json::json!([]);
        assert!(serde_json::from_value::<ScmSpec>(bad).is_err());
    }

    #[test]
    fn exact_do_self_is_point_mass() {
        let s = ScmSpec::shopsim();
        assert_eq!(
            s.exact_interventional(&do_(&s, "Y", "yes"), "Y").unwrap(),
            vec![0.0, 1.0]
        );
    }

    #[test]
    fn sampling_is_seeded_and_shaped() {
        let s = ScmSpec::shopsim();
        let a = s.sample_observational(50, 11).unwrap();
        assert_eq!(a, s.sample_observational(50, 11).unwrap());
        assert_ne!(a, s.sample_observational(50, 12).unwrap());
        let one = s.sample_observational(1, 0).unwrap();
        assert_eq!(one.len(), 1);
        assert!(!one.sessions()[0].actions.is_empty() && one.sessions()[0].actions.len() <= 40);
    }

    #[test]
    fn fully_clamped_states_are_identical() {
        let s = ScmSpec::shopsim();
        let i = Intervention::new(
            s.graph(),
            [("U", "power"), ("F", "control"), ("E", "high"), ("Y", "no")],
        )
        .unwrap();
        let d = s.sample_interventional(&i, 200, 5).unwrap();
        let first = &d.sessions()[0].causal_state;
        assert!(d.sessions().iter().all(|x| &x.causal_state == first));
        assert_eq!(d.intervention(), Some(&i));
    }

    #[test]
    fn purchase_iff_conversion() {
        let s = ScmSpec::shopsim();
        let d = s.sample_observational(3000, 2).unwrap();
        for sess in d.sessions() {
            let bought = sess.actions.iter().any(|a| a == "purchase");
            assert_eq!(bought, sess.causal_state["Y"] == "yes", "{sess:?}");
        }
    }

    #[test]
    fn fit_smoothing_limits() {
        let s = ScmSpec::shopsim();
        // F is constant under do(F=treatment): F's row for each U is smoothed, not degenerate
        let d = s
            .sample_interventional(&do_(&s, "F", "treatment"), 500, 1)
            .unwrap();
        let f = fit_scm(s.graph(), &d, 1.0).unwrap();
        let f_cpt = &f.cpts()[s.graph().index_of("F").unwrap()];
        assert!(f_cpt.rows().iter().all(|r| r[0] > 0.0 && r[0] < 0.01));
        let est = f
            .estimate_interventional(&do_(&s, "F", "control"), "Y")
            .unwrap();
        assert!((est.iter().sum::<f64>() - 1.0).abs() < 1e-12);

        // a parent combination never observed gets a uniform row
        let i = Intervention::new(s.graph(), [("U", "casual"), ("F", "control")]).unwrap();
        let d = s.sample_interventional(&i, 100, 1).unwrap();
        let f = fit_scm(s.graph(), &d, 1.0).unwrap();
        let e_cpt = &f.cpts()[s.graph().index_of("E").unwrap()];
        assert_eq!(e_cpt.rows()[3], vec![0.5, 0.5]);

        let empty = d.with_sessions(vec![]).unwrap();
        assert!(matches!(
            fit_scm(s.graph(), &empty, 1.0),
            Err(Error::EmptyData)
        ));
    }

    #[test]
    fn edgeless_fit_is_marginal() {
        let s = ScmSpec::shopsim();
        let g = CausalGraph::new(s.graph().variables().to_vec()).unwrap();
        let d = s.sample_observational(400, 3).unwrap();
        let f = fit_scm(&g, &d, 0.0).unwrap();
        let yes = d
            .sessions()
            .iter()
            .filter(|x| x.causal_state["Y"] == "yes")
            .count() as f64
            / 400.0;
        let y = &f.cpts()[3];
        assert!(y.parents().is_empty());
        assert!((y.rows()[0][1] - yes).abs() < 1e-12);
    }

    #[test]
    fn fitted_round_trips_through_json() {
        let s = ScmSpec::shopsim();
        let d = s.sample_observational(300, 3).unwrap();
        let f = fit_scm(s.graph(), &d, 1.0).unwrap();
        let back: FittedScm = serde_json::from_str(&serde_json::to_string(&f).unwrap()).unwrap();
        assert_eq!(back.graph(), f.graph());
        assert_eq!(back.sample_count(), 300);
    }

    #[test]
    fn state_space_limit() {
        // chain V0 -> V1 -> ... -> V7 with ten levels each: 10^8 joint states
        let vars: Vec<Variable> = (0..8)
            .map(|i| {
                Variable::new(
                    format!("V{i}"),
                    crate::graph::VariableKind::UserContext,
                    (0..10).map(|l| l.to_string()),
                )
                .unwrap()
            })
            .collect();
        let mut cpts = vec![Cpt::new("V0", vec![], vec![vec![0.1; 10]])];
        cpts.extend((1..8).map(|i| {
            Cpt::new(
                format!("V{i}"),
                vec![format!("V{}", i - 1)],
                vec![vec![0.1; 10]; 10],
            )
        }));
        let traj = ScmSpec::shopsim().trajectory.clone();
        let traj = TrajectoryMechanism {
            conditioning: vec![],
            regimes: vec![traj.regimes[0].clone()],
            ..traj
        };
        let spec = ScmSpec::new("big", vars, cpts, traj, vec![]).unwrap();
        let i = Intervention::new(spec.graph(), [("V1", "0")]).unwrap();
        assert!(spec.exact_interventional(&i, "V7").is_ok());
        let i = Intervention::new(spec.graph(), [("V7", "0")]).unwrap();
        assert!(spec.exact_interventional(&i, "V7").is_ok());
        let f = FittedScm::from_spec(&spec);
        assert!(
            matches!(f.estimate_interventional(&Intervention::empty(), "V7"), Err(Error::StateSpaceTooLarge(n)) if n == 100_000_000)
        );
    }
}
