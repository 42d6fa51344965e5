//! Structure learning: a graph from domain knowledge, a PC-style skeleton
//! search with tier orientation, prior-wins integration, and validation of
//! the combined graph against interventional data.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::data::{CausalStateMatrix, Dataset};
use crate::error::{Error, Result};
use crate::graph::{CausalGraph, Intervention, Provenance, Variable, VariableKind};
use crate::scm::FittedScm;

/// Minimum expected count per cell for a stratum to be considered informative.
pub const MIN_EXPECTED_COUNT: f64 = 5.0;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct PriorKnowledge {
    #[serde(default)]
    pub required_edges: Vec<(String, String)>,
    #[serde(default)]
    pub forbidden_edges: Vec<(String, String)>,
    pub tiers: Vec<Vec<String>>,
}

impl PriorKnowledge {
    /// Context, then exposure, then outcome variables; empty tiers dropped.
    pub fn from_kinds(vars: &[Variable]) -> Self {
        let tiers = [
            VariableKind::UserContext,
            VariableKind::FeatureExposure,
            VariableKind::BehavioralOutcome,
        ]
        .into_iter()
        .map(|k| {
            let mut t: Vec<String> = vars
                .iter()
                .filter(|v| v.kind() == k)
                .map(|v| v.name().to_string())
                .collect();
            t.sort();
            t
        })
        .filter(|t| !t.is_empty())
        .collect();
        PriorKnowledge {
            required_edges: vec![],
            forbidden_edges: vec![],
            tiers,
        }
    }

    /// Tier index of every variable, after checking the knowledge is coherent.
    fn tier_map(&self, vars: &[Variable]) -> Result<BTreeMap<String, usize>> {
        let bad = |m: String| Err(Error::InconsistentKnowledge(m));
        let mut tier_of = BTreeMap::new();
        for (t, tier) in self.tiers.iter().enumerate() {
            for name in tier {
                if tier_of.insert(name.clone(), t).is_some() {
                    return bad(format!("`{name}` appears in more than one tier"));
                }
            }
        }
        let declared: BTreeSet<&str> = vars.iter().map(|v| v.name()).collect();
        let tiered: BTreeSet<&str> = tier_of.keys().map(String::as_str).collect();
        if declared != tiered {
            return bad(format!(
                "tiers cover {tiered:?} but the variables are {declared:?}"
            ));
        }
        for (a, b) in self.required_edges.iter().chain(&self.forbidden_edges) {
            for v in [a, b] {
                if !declared.contains(v.as_str()) {
                    return Err(Error::UnknownVariable(v.clone()));
                }
            }
        }
        for (a, b) in &self.required_edges {
            if self.forbidden_edges.contains(&(a.clone(), b.clone())) {
                return bad(format!("{a} -> {b} is both required and forbidden"));
            }
            if tier_of[a] > tier_of[b] {
                return bad(format!(
                    "required edge {a} -> {b} points to an earlier tier"
                ));
            }
        }
        Ok(tier_of)
    }

    fn forbids(&self, from: &str, to: &str) -> bool {
        self.forbidden_edges
            .iter()
            .any(|(a, b)| a == from && b == to)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum CiTest {
    #[default]
    GSquared,
    ChiSquared,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assumptions {
    pub alpha: f64,
    pub max_condition_size: usize,
    #[serde(default)]
    pub ci_test: CiTest,
}

impl Default for Assumptions {
    fn default() -> Self {
        Assumptions {
            alpha: 0.05,
            max_condition_size: 3,
            ci_test: CiTest::GSquared,
        }
    }
}

impl Assumptions {
    pub fn check(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::InvalidAssumptions(format!(
                "alpha must lie in (0, 1), got {}",
                self.alpha
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CiResult {
    pub statistic: f64,
    pub p_value: f64,
    pub dof: f64,
    pub independent: bool,
    /// No stratum had enough data; the test reports independence by default.
    pub insufficient: bool,
}

/// Conditional independence test of `x` and `y` given `z` over the columns of `states`.
pub fn ci_test(
    states: &CausalStateMatrix,
    x: &str,
    y: &str,
    z: &[&str],
    a: &Assumptions,
) -> Result<CiResult> {
    a.check()?;
    if states.is_empty() {
        return Err(Error::EmptyData);
    }
    let xi = states.column_index(x)?;
    let yi = states.column_index(y)?;
    let zi = z
        .iter()
        .map(|v| states.column_index(v))
        .collect::<Result<Vec<_>>>()?;
    if xi == yi || zi.contains(&xi) || zi.contains(&yi) {
        return Err(Error::InvalidQuery(format!(
            "{x} and {y} must be distinct and outside the conditioning set"
        )));
    }
    let vars = states.variables();
    let (kx, ky) = (vars[xi].cardinality(), vars[yi].cardinality());
    let n_strata: usize = zi.iter().map(|&c| vars[c].cardinality()).product();
    let mut counts = vec![0.0f64; n_strata * kx * ky];
    for row in states.rows() {
        let s = zi
            .iter()
            .fold(0, |acc, &c| acc * vars[c].cardinality() + row[c]);
        counts[(s * kx + row[xi]) * ky + row[yi]] += 1.0;
    }

    let mut statistic = 0.0;
    let mut informative = false;
    for table in counts.chunks(kx * ky) {
        let n: f64 = table.iter().sum();
        if n == 0.0 {
            continue;
        }
        if n >= MIN_EXPECTED_COUNT * (kx * ky) as f64 {
            informative = true;
        }
        let row_sum: Vec<f64> = (0..kx)
            .map(|i| table[i * ky..(i + 1) * ky].iter().sum())
            .collect();
        let col_sum: Vec<f64> = (0..ky)
            .map(|j| (0..kx).map(|i| table[i * ky + j]).sum())
            .collect();
        for i in 0..kx {
            for j in 0..ky {
                let expected = row_sum[i] * col_sum[j] / n;
                let observed = table[i * ky + j];
                if expected <= 0.0 {
                    continue;
                }
                statistic += match a.ci_test {
                    CiTest::GSquared if observed > 0.0 => {
                        2.0 * observed * (observed / expected).ln()
                    }
                    CiTest::GSquared => 0.0,
                    CiTest::ChiSquared => (observed - expected).powi(2) / expected,
                };
            }
        }
    }
    let statistic = statistic.max(0.0);
    let dof = ((kx - 1) * (ky - 1) * n_strata) as f64;
    if !informative {
        return Ok(CiResult {
            statistic,
            p_value: 1.0,
            dof,
            independent: true,
            insufficient: true,
        });
    }
    let p_value = ChiSquared::new(dof)
        .map(|d| d.sf(statistic))
        .unwrap_or(1.0)
        .clamp(0.0, 1.0);
    Ok(CiResult {
        statistic,
        p_value,
        dof,
        independent: p_value > a.alpha,
        insufficient: false,
    })
}

/// Line-oriented record of learning and integration decisions.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LearningLog(Vec<String>);

impl LearningLog {
    pub fn push(&mut self, line: impl Into<String>) {
        self.0.push(line.into());
    }

    pub fn lines(&self) -> &[String] {
        &self.0
    }

    pub fn extend(&mut self, other: LearningLog) {
        self.0.extend(other.0);
    }
}

impl fmt::Display for LearningLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.iter().try_for_each(|l| writeln!(f, "{l}"))
    }
}

/// Graph with exactly the required edges, all `Prior`.
pub fn init_from_knowledge(k: &PriorKnowledge, vars: &[Variable]) -> Result<CausalGraph> {
    k.tier_map(vars)?;
    let mut g = CausalGraph::new(vars.to_vec())?;
    let mut required = k.required_edges.clone();
    required.sort();
    for (a, b) in &required {
        g.insert_edge(a, b, Provenance::Prior)
            .map_err(|e| Error::InconsistentKnowledge(e.to_string()))?;
    }
    Ok(g)
}

fn combinations(items: &[usize], k: usize) -> Vec<Vec<usize>> {
    if k == 0 {
        return vec![vec![]];
    }
    if items.len() < k {
        return vec![];
    }
    let mut out = Vec::new();
    for (i, &first) in items.iter().enumerate() {
        for mut rest in combinations(&items[i + 1..], k - 1) {
            rest.insert(0, first);
            out.push(rest);
        }
    }
    out
}

/// PC-stable skeleton search followed by tier orientation. Edges inside a tier
/// point from the lexicographically smaller name. Every learned edge is `Data`.
pub fn learn_structure(
    data: &Dataset,
    a: &Assumptions,
    vars: &[Variable],
    k: &PriorKnowledge,
) -> Result<(CausalGraph, LearningLog)> {
    a.check()?;
    if data.is_empty() {
        return Err(Error::EmptyData);
    }
    let tier_of = k.tier_map(vars)?;
    let skeleton_graph = CausalGraph::new(vars.to_vec())?;
    let states = data.state_matrix(&skeleton_graph)?;
    let names: Vec<&str> = vars.iter().map(|v| v.name()).collect();
    let n = vars.len();
    let mut adj: Vec<BTreeSet<usize>> = (0..n)
        .map(|i| (0..n).filter(|&j| j != i).collect())
        .collect();
    let mut log = LearningLog::default();
    log.push(format!(
        "learn: {} sessions, {} variables, alpha={}, max_condition_size={}",
        data.len(),
        n,
        a.alpha,
        a.max_condition_size
    ));

    for level in 0..=a.max_condition_size {
        let frozen = adj.clone();
        let mut any_testable = false;
        for x in 0..n {
            for y in (x + 1)..n {
                if !frozen[x].contains(&y) {
                    continue;
                }
                let pool: Vec<usize> = frozen[x]
                    .union(&frozen[y])
                    .copied()
                    .filter(|&v| v != x && v != y)
                    .collect();
                if pool.len() < level {
                    continue;
                }
                any_testable = true;
                for z in combinations(&pool, level) {
                    let zn: Vec<&str> = z.iter().map(|&i| names[i]).collect();
                    let r = ci_test(&states, names[x], names[y], &zn, a)?;
                    if r.insufficient {
                        log::warn!(
                            "insufficient data for {} _||_ {} | {:?}",
                            names[x],
                            names[y],
                            zn
                        );
                        log.push(format!(
                            "insufficient: {} _||_ {} | {{{}}} (treated as independent)",
                            names[x],
                            names[y],
                            zn.join(",")
                        ));
                    }
                    if r.independent {
                        log.push(format!(
                            "remove: {} -- {} | {{{}}} p={:.4}",
                            names[x],
                            names[y],
                            zn.join(","),
                            r.p_value
                        ));
                        adj[x].remove(&y);
                        adj[y].remove(&x);
                        break;
                    }
                }
            }
        }
        if !any_testable {
            break;
        }
    }

    let rank = |i: usize| (tier_of[names[i]], names[i]);
    let mut g = skeleton_graph;
    for x in 0..n {
        for &y in adj[x].iter().filter(|&&y| y > x) {
            let (from, to) = if rank(x) < rank(y) { (x, y) } else { (y, x) };
            g.insert_edge(names[from], names[to], Provenance::Data)?;
            log.push(format!("orient: {} -> {}", names[from], names[to]));
        }
    }
    Ok((g, log))
}

/// Prior edges are kept as they are (`Both` when the data agree). Data edges are
/// added in lexicographic order unless forbidden or cycle-creating.
pub fn integrate_graphs(
    prior: &CausalGraph,
    data: &CausalGraph,
    k: Option<&PriorKnowledge>,
) -> Result<(CausalGraph, LearningLog)> {
    let p_names: Vec<&str> = prior.names().collect();
    let d_names: Vec<&str> = data.names().collect();
    if p_names != d_names {
        return Err(Error::InvalidQuery(
            "prior and data graphs have different variables".into(),
        ));
    }
    let mut g = prior.clone();
    let mut log = LearningLog::default();
    for e in data.edges() {
        if g.has_edge(&e.from, &e.to) {
            g.set_provenance(&e.from, &e.to, Provenance::Both)?;
            log.push(format!(
                "integrate: {} -> {} confirmed by data",
                e.from, e.to
            ));
        } else if k.is_some_and(|k| k.forbids(&e.from, &e.to)) {
            log.push(format!(
                "integrate: dropped {} -> {} (forbidden)",
                e.from, e.to
            ));
        } else if g.has_edge(&e.to, &e.from) {
            log.push(format!(
                "integrate: dropped {} -> {} (prior has {} -> {})",
                e.from, e.to, e.to, e.from
            ));
        } else {
            match g.insert_edge(&e.from, &e.to, e.provenance) {
                Ok(()) => log.push(format!("integrate: added {} -> {}", e.from, e.to)),
                Err(Error::Cycle { .. }) => {
                    log.push(format!("integrate: dropped {} -> {} (cycle)", e.from, e.to))
                }
                Err(other) => return Err(other),
            }
        }
    }
    Ok((g, log))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationRecord {
    pub intervention: Intervention,
    pub outcome: String,
    /// `P(outcome | do(i))` from the fitted model, one entry per level.
    pub estimated: Vec<f64>,
    /// Empirical outcome distribution in the interventional data.
    pub observed: Vec<f64>,
    /// Largest absolute difference over levels.
    pub discrepancy: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub records: Vec<ValidationRecord>,
    pub passed: bool,
    pub tolerance: f64,
}

/// Compares fitted interventional estimates with each labeled dataset, one
/// record per non-intervened outcome variable. Edges on directed paths from
/// the intervened variables to a passing outcome become `Validated`.
pub fn validate_with_interventional(
    g: &CausalGraph,
    fitted: &FittedScm,
    d_int: &[(Intervention, Dataset)],
    tolerance: f64,
) -> Result<(CausalGraph, ValidationReport)> {
    let mut out = g.clone();
    let mut records = Vec::new();
    for (i, d) in d_int {
        i.check(g)?;
        let surgered = g.apply_intervention(i)?;
        let states = d.state_matrix(g)?;
        for (v, var) in g.variables().iter().enumerate() {
            if var.kind() != VariableKind::BehavioralOutcome || i.get(var.name()).is_some() {
                continue;
            }
            let estimated = fitted.estimate_interventional(i, var.name())?;
            let mut observed = vec![0.0; var.cardinality()];
            for row in states.rows() {
                observed[row[v]] += 1.0;
            }
            let n = states.len().max(1) as f64;
            observed.iter_mut().for_each(|c| *c /= n);
            let discrepancy = estimated
                .iter()
                .zip(&observed)
                .map(|(e, o)| (e - o).abs())
                .fold(0.0, f64::max);
            let passed = !states.is_empty() && discrepancy <= tolerance;
            if passed {
                for (x, _) in i.iter() {
                    for path in surgered.directed_paths(x, var.name())? {
                        for (a, b) in path {
                            out.set_provenance(&a, &b, Provenance::Validated)?;
                        }
                    }
                }
            }
            records.push(ValidationRecord {
                intervention: i.clone(),
                outcome: var.name().to_string(),
                estimated,
                observed,
                discrepancy,
                passed,
            });
        }
    }
    let passed = records.iter().all(|r| r.passed);
    Ok((
        out,
        ValidationReport {
            records,
            passed,
            tolerance,
        },
    ))
}

/// Output of the knowledge / learn / integrate stages.
#[derive(Debug, Clone)]
pub struct Discovery {
    pub prior: CausalGraph,
    pub learned: CausalGraph,
    pub combined: CausalGraph,
    pub log: LearningLog,
}

pub fn discover(data: &Dataset, k: &PriorKnowledge, a: &Assumptions) -> Result<Discovery> {
    let vars = data.variables().to_vec();
    let prior = init_from_knowledge(k, &vars)?;
    let (learned, mut log) = learn_structure(data, a, &vars, k)?;
    let (combined, ilog) = integrate_graphs(&prior, &learned, Some(k))?;
    log.extend(ilog);
    Ok(Discovery {
        prior,
        learned,
        combined,
        log,
    })
}

/// F1 between the undirected edge sets of two graphs over the same variables.
pub fn skeleton_f1(learned: &CausalGraph, truth: &CausalGraph) -> f64 {
    let undirected = |g: &CausalGraph| -> BTreeSet<(String, String)> {
        g.edges()
            .into_iter()
            .map(|e| {
                if e.from < e.to {
                    (e.from, e.to)
                } else {
                    (e.to, e.from)
                }
            })
            .collect()
    };
    let (l, t) = (undirected(learned), undirected(truth));
    if l.is_empty() && t.is_empty() {
        return 1.0;
    }
    let tp = l.intersection(&t).count() as f64;
    if tp == 0.0 {
        return 0.0;
    }
    let precision = tp / l.len() as f64;
    let recall = tp / t.len() as f64;
    2.0 * precision * recall / (precision + recall)
}
