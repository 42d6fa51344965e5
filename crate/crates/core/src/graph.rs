//! Typed causal DAGs over categorical behavioral variables.
//!
//! A [`CausalGraph`] is an immutable-by-convention value: the public
//! operations ([`CausalGraph::add_edge`], [`CausalGraph::apply_intervention`])
//! return new graphs and leave the receiver untouched. Acyclicity is checked on
//! every insertion, and topological order breaks ties lexicographically by
//! variable name so sampling and export are reproducible.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Role a variable plays in the behavioral causal model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum VariableKind {
    /// Product features and UI elements a user is exposed to.
    FeatureExposure,
    /// User characteristics and historical patterns.
    UserContext,
    /// Measurable actions and engagement metrics.
    BehavioralOutcome,
}

impl VariableKind {
    fn dot_shape(self) -> &'static str {
        match self {
            VariableKind::FeatureExposure => "box",
            VariableKind::UserContext => "ellipse",
            VariableKind::BehavioralOutcome => "diamond",
        }
    }
}

/// Where an edge came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Provenance {
    Prior,
    Data,
    Both,
    Validated,
}

/// A categorical variable.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "VariableRepr")]
pub struct Variable {
    name: String,
    kind: VariableKind,
    domain: Vec<String>,
}

#[derive(Deserialize)]
struct VariableRepr {
    name: String,
    kind: VariableKind,
    domain: Vec<String>,
}

impl TryFrom<VariableRepr> for Variable {
    type Error = Error;

    fn try_from(r: VariableRepr) -> Result<Self> {
        Variable::new(r.name, r.kind, r.domain)
    }
}

pub(crate) fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) if c.is_ascii_alphabetic() || c == '_' => {}
        _ => return false,
    }
    chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

impl Variable {
    pub fn new<S: Into<String>>(
        name: impl Into<String>,
        kind: VariableKind,
        domain: impl IntoIterator<Item = S>,
    ) -> Result<Self> {
        let name = name.into();
        if !is_identifier(&name) {
            return Err(Error::InvalidVariable(format!(
                "`{name}` is not an identifier"
            )));
        }
        let domain: Vec<String> = domain.into_iter().map(Into::into).collect();
        if domain.len() < 2 {
            return Err(Error::InvalidVariable(format!(
                "`{name}` needs at least two levels"
            )));
        }
        let distinct: BTreeSet<&String> = domain.iter().collect();
        if distinct.len() != domain.len() {
            return Err(Error::InvalidVariable(format!(
                "`{name}` has repeated levels"
            )));
        }
        if domain.iter().any(|l| l.is_empty()) {
            return Err(Error::InvalidVariable(format!(
                "`{name}` has an empty level label"
            )));
        }
        Ok(Variable { name, kind, domain })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn kind(&self) -> VariableKind {
        self.kind
    }

    pub fn domain(&self) -> &[String] {
        &self.domain
    }

    pub fn cardinality(&self) -> usize {
        self.domain.len()
    }

    pub fn level_index(&self, level: &str) -> Result<usize> {
        self.domain
            .iter()
            .position(|l| l == level)
            .ok_or_else(|| Error::UnknownLevel {
                variable: self.name.clone(),
                level: level.to_string(),
            })
    }
}

/// A directed edge with its provenance.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Edge {
    pub from: String,
    pub to: String,
    pub provenance: Provenance,
}

/// A set of variable names, ordered lexicographically.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct VariableSet(BTreeSet<String>);

impl VariableSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds a set whose members are all checked against `graph`.
    pub fn of(
        graph: &CausalGraph,
        names: impl IntoIterator<Item = impl Into<String>>,
    ) -> Result<Self> {
        let set: Self = names.into_iter().map(Into::into).collect();
        set.check(graph)?;
        Ok(set)
    }

    pub fn check(&self, graph: &CausalGraph) -> Result<()> {
        for m in &self.0 {
            graph.index_of(m)?;
        }
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.0.contains(name)
    }

    pub fn insert(&mut self, name: impl Into<String>) -> bool {
        self.0.insert(name.into())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.0.iter().map(String::as_str)
    }
}

impl<S: Into<String>> FromIterator<S> for VariableSet {
    fn from_iter<I: IntoIterator<Item = S>>(iter: I) -> Self {
        VariableSet(iter.into_iter().map(Into::into).collect())
    }
}

/// A do-intervention: each named variable is clamped to one level.
///
/// [`Intervention::new`] rejects the empty assignment; [`Intervention::empty`]
/// exists for the observational (no-op) simulation path.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Intervention(BTreeMap<String, String>);

impl Intervention {
    pub fn new(
        graph: &CausalGraph,
        assignments: impl IntoIterator<Item = (impl Into<String>, impl Into<String>)>,
    ) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (var, level) in assignments {
            let var = var.into();
            if map.contains_key(&var) {
                return Err(Error::InvalidIntervention(format!(
                    "`{var}` assigned more than once"
                )));
            }
            map.insert(var, level.into());
        }
        if map.is_empty() {
            return Err(Error::InvalidIntervention("no assignments".into()));
        }
        let i = Intervention(map);
        i.check(graph)?;
        Ok(i)
    }

    pub fn empty() -> Self {
        Self::default()
    }

    /// Parses `VAR=LEVEL` assignments without checking them against a graph.
    pub fn parse<'a>(assignments: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        let mut map = BTreeMap::new();
        for a in assignments {
            let (var, level) = a.split_once('=').ok_or_else(|| {
                Error::InvalidIntervention(format!("expected VAR=LEVEL, got `{a}`"))
            })?;
            let (var, level) = (var.trim(), level.trim());
            if var.is_empty() || level.is_empty() {
                return Err(Error::InvalidIntervention(format!(
                    "expected VAR=LEVEL, got `{a}`"
                )));
            }
            if map.insert(var.to_string(), level.to_string()).is_some() {
                return Err(Error::InvalidIntervention(format!(
                    "`{var}` assigned more than once"
                )));
            }
        }
        Ok(Intervention(map))
    }

    /// Checks every assignment names a variable of `graph` and a level in its domain.
    pub fn check(&self, graph: &CausalGraph) -> Result<()> {
        for (var, level) in &self.0 {
            graph.variable(var)?.level_index(level)?;
        }
        Ok(())
    }

    /// `(variable index, level index)` pairs against `graph`.
    pub fn resolve(&self, graph: &CausalGraph) -> Result<Vec<(usize, usize)>> {
        self.0
            .iter()
            .map(|(var, level)| {
                let i = graph.index_of(var)?;
                Ok((i, graph.variables[i].level_index(level)?))
            })
            .collect()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn get(&self, variable: &str) -> Option<&str> {
        self.0.get(variable).map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.0.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn variables(&self) -> VariableSet {
        self.0.keys().cloned().collect()
    }
}

impl std::fmt::Display for Intervention {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "do(")?;
        for (n, (k, v)) in self.0.iter().enumerate() {
            if n > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{k}={v}")?;
        }
        write!(f, ")")
    }
}

/// Directed acyclic graph over typed categorical variables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GraphRepr", into = "GraphRepr")]
pub struct CausalGraph {
    variables: Vec<Variable>,
    index: HashMap<String, usize>,
    parents: Vec<BTreeSet<usize>>,
    children: Vec<BTreeSet<usize>>,
    provenance: BTreeMap<(usize, usize), Provenance>,
}

#[derive(Serialize, Deserialize)]
struct GraphRepr {
    variables: Vec<Variable>,
    edges: Vec<Edge>,
}

impl TryFrom<GraphRepr> for CausalGraph {
    type Error = Error;

    fn try_from(r: GraphRepr) -> Result<Self> {
        let mut g = CausalGraph::new(r.variables)?;
        for e in r.edges {
            g.insert_edge(&e.from, &e.to, e.provenance)?;
        }
        Ok(g)
    }
}

impl From<CausalGraph> for GraphRepr {
    fn from(g: CausalGraph) -> Self {
        GraphRepr {
            edges: g.edges(),
            variables: g.variables,
        }
    }
}

impl CausalGraph {
    /// Edgeless graph over `variables`.
    pub fn new(variables: Vec<Variable>) -> Result<Self> {
        let mut index = HashMap::with_capacity(variables.len());
        for (i, v) in variables.iter().enumerate() {
            if index.insert(v.name.clone(), i).is_some() {
                return Err(Error::DuplicateVariable(v.name.clone()));
            }
        }
        let n = variables.len();
        Ok(CausalGraph {
            variables,
            index,
            parents: vec![BTreeSet::new(); n],
            children: vec![BTreeSet::new(); n],
            provenance: BTreeMap::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.variables.len()
    }

    pub fn is_empty(&self) -> bool {
        self.variables.is_empty()
    }

    pub fn variables(&self) -> &[Variable] {
        &self.variables
    }

    pub fn variable(&self, name: &str) -> Result<&Variable> {
        Ok(&self.variables[self.index_of(name)?])
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownVariable(name.to_string()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.variables.iter().map(|v| v.name.as_str())
    }

    /// All edges, sorted by `(from, to)` name.
    pub fn edges(&self) -> Vec<Edge> {
        let mut edges: Vec<Edge> = self
            .provenance
            .iter()
            .map(|(&(f, t), &p)| Edge {
                from: self.variables[f].name.clone(),
                to: self.variables[t].name.clone(),
                provenance: p,
            })
            .collect();
        edges.sort();
        edges
    }

    pub fn edge_count(&self) -> usize {
        self.provenance.len()
    }

    pub fn has_edge(&self, from: &str, to: &str) -> bool {
        self.provenance_of(from, to).is_some()
    }

    pub fn provenance_of(&self, from: &str, to: &str) -> Option<Provenance> {
        let f = self.index.get(from)?;
        let t = self.index.get(to)?;
        self.provenance.get(&(*f, *t)).copied()
    }

    pub fn adjacent(&self, a: usize, b: usize) -> bool {
        self.provenance.contains_key(&(a, b)) || self.provenance.contains_key(&(b, a))
    }

    pub fn parent_indices(&self, i: usize) -> &BTreeSet<usize> {
        &self.parents[i]
    }

    pub fn child_indices(&self, i: usize) -> &BTreeSet<usize> {
        &self.children[i]
    }

    /// Parent names of `name`, sorted lexicographically.
    pub fn parents(&self, name: &str) -> Result<Vec<String>> {
        let i = self.index_of(name)?;
        let mut ps: Vec<String> = self.parents[i]
            .iter()
            .map(|&p| self.variables[p].name.clone())
            .collect();
        ps.sort();
        Ok(ps)
    }

    /// Pure edge insertion.
    pub fn add_edge(&self, from: &str, to: &str, provenance: Provenance) -> Result<CausalGraph> {
        let mut g = self.clone();
        g.insert_edge(from, to, provenance)?;
        Ok(g)
    }

    /// In-place edge insertion; the graph is unchanged on error.
    pub fn insert_edge(&mut self, from: &str, to: &str, provenance: Provenance) -> Result<()> {
        let f = self.index_of(from)?;
        let t = self.index_of(to)?;
        if f == t {
            return Err(Error::SelfLoop(from.to_string()));
        }
        if self.provenance.contains_key(&(f, t)) {
            return Err(Error::DuplicateEdge {
                from: from.into(),
                to: to.into(),
            });
        }
        if self.reaches(t, f) {
            return Err(Error::Cycle {
                from: from.into(),
                to: to.into(),
            });
        }
        self.provenance.insert((f, t), provenance);
        self.parents[t].insert(f);
        self.children[f].insert(t);
        Ok(())
    }

    pub fn remove_edge(&mut self, from: &str, to: &str) -> Result<Option<Provenance>> {
        let f = self.index_of(from)?;
        let t = self.index_of(to)?;
        Ok(self.remove_edge_idx(f, t))
    }

    fn remove_edge_idx(&mut self, f: usize, t: usize) -> Option<Provenance> {
        let p = self.provenance.remove(&(f, t));
        if p.is_some() {
            self.parents[t].remove(&f);
            self.children[f].remove(&t);
        }
        p
    }

    pub fn set_provenance(&mut self, from: &str, to: &str, provenance: Provenance) -> Result<()> {
        let key = (self.index_of(from)?, self.index_of(to)?);
        match self.provenance.get_mut(&key) {
            Some(p) => {
                *p = provenance;
                Ok(())
            }
            None => Err(Error::InvalidQuery(format!("no edge {from} -> {to}"))),
        }
    }

    /// Directed reachability `src ->* dst` (true when `src == dst`).
    fn reaches(&self, src: usize, dst: usize) -> bool {
        let mut seen = vec![false; self.len()];
        let mut stack = vec![src];
        while let Some(v) = stack.pop() {
            if v == dst {
                return true;
            }
            if std::mem::replace(&mut seen[v], true) {
                continue;
            }
            stack.extend(self.children[v].iter().copied());
        }
        false
    }

    /// Kahn's algorithm, ready nodes popped in lexicographic name order.
    pub fn topological_order(&self) -> Vec<usize> {
        let mut indegree: Vec<usize> = self.parents.iter().map(BTreeSet::len).collect();
        let mut ready: BTreeSet<(&str, usize)> = indegree
            .iter()
            .enumerate()
            .filter(|(_, &d)| d == 0)
            .map(|(i, _)| (self.variables[i].name.as_str(), i))
            .collect();
        let mut order = Vec::with_capacity(self.len());
        while let Some(first) = ready.pop_first() {
            let v = first.1;
            order.push(v);
            for &c in &self.children[v] {
                indegree[c] -= 1;
                if indegree[c] == 0 {
                    ready.insert((self.variables[c].name.as_str(), c));
                }
            }
        }
        debug_assert_eq!(order.len(), self.len(), "graph invariant: acyclic");
        order
    }

    /// Indices of `seeds` and all their descendants.
    pub fn descendants_of(&self, seeds: impl IntoIterator<Item = usize>) -> BTreeSet<usize> {
        let mut out = BTreeSet::new();
        let mut stack: Vec<usize> = seeds.into_iter().collect();
        while let Some(v) = stack.pop() {
            if out.insert(v) {
                stack.extend(self.children[v].iter().copied());
            }
        }
        out
    }

    /// Indices of `seeds` and all their ancestors.
    pub fn ancestors_of(&self, seeds: impl IntoIterator<Item = usize>) -> BTreeSet<usize> {
        let mut out = BTreeSet::new();
        let mut stack: Vec<usize> = seeds.into_iter().collect();
        while let Some(v) = stack.pop() {
            if out.insert(v) {
                stack.extend(self.parents[v].iter().copied());
            }
        }
        out
    }

    /// True iff every trail between `x` and `y` is blocked by `z`.
    pub fn d_separated(&self, x: &str, y: &str, z: &VariableSet) -> Result<bool> {
        let xi = self.index_of(x)?;
        let yi = self.index_of(y)?;
        if xi == yi {
            return Err(Error::InvalidQuery("x and y must differ".into()));
        }
        if z.contains(x) || z.contains(y) {
            return Err(Error::InvalidQuery(
                "x and y must not be in the conditioning set".into(),
            ));
        }
        let zi = z
            .iter()
            .map(|n| self.index_of(n))
            .collect::<Result<BTreeSet<_>>>()?;
        Ok(!self.active_reachable(xi, &zi)[yi])
    }

    /// Index-based d-separation used by the learners; no precondition checks.
    pub(crate) fn d_separated_idx(&self, x: usize, y: usize, z: &BTreeSet<usize>) -> bool {
        !self.active_reachable(x, z)[y]
    }

    /// Nodes reachable from `x` along active trails given `z` (Koller & Friedman's
    /// reachability procedure). Members of `z` are never marked reachable.
    fn active_reachable(&self, x: usize, z: &BTreeSet<usize>) -> Vec<bool> {
        let n = self.len();
        let conditioned_anc = self.ancestors_of(z.iter().copied());
        let mut reachable = vec![false; n];
        // visited[v][0]: arrived from a child (moving up); [1]: from a parent (moving down)
        let mut visited = vec![[false; 2]; n];
        let mut queue = VecDeque::from([(x, 0usize)]);
        while let Some((v, dir)) = queue.pop_front() {
            if std::mem::replace(&mut visited[v][dir], true) {
                continue;
            }
            let observed = z.contains(&v);
            if !observed {
                reachable[v] = true;
            }
            if dir == 0 {
                if !observed {
                    queue.extend(self.parents[v].iter().map(|&p| (p, 0)));
                    queue.extend(self.children[v].iter().map(|&c| (c, 1)));
                }
            } else {
                if !observed {
                    queue.extend(self.children[v].iter().map(|&c| (c, 1)));
                }
                if conditioned_anc.contains(&v) {
                    queue.extend(self.parents[v].iter().map(|&p| (p, 0)));
                }
            }
        }
        reachable
    }

    /// Graph surgery: removes every edge into an intervened variable.
    pub fn apply_intervention(&self, intervention: &Intervention) -> Result<CausalGraph> {
        let mut g = self.clone();
        for (var, _) in intervention.iter() {
            let t = g.index_of(var)?;
            let incoming: Vec<usize> = g.parents[t].iter().copied().collect();
            for f in incoming {
                g.remove_edge_idx(f, t);
            }
        }
        Ok(g)
    }

    /// Intervened variables and their descendants in `modified` (the surgered graph).
    pub fn affected_variables(
        &self,
        modified: &CausalGraph,
        intervention: &Intervention,
    ) -> Result<VariableSet> {
        let seeds = intervention
            .iter()
            .map(|(v, _)| {
                self.index_of(v)?;
                modified.index_of(v)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(modified
            .descendants_of(seeds)
            .into_iter()
            .map(|i| modified.variables[i].name.clone())
            .collect())
    }

    /// Every directed path from `from` to `to` with at least one edge, as edge lists.
    /// Paths are listed in lexicographic order of their node sequences.
    pub fn directed_paths(&self, from: &str, to: &str) -> Result<Vec<Vec<(String, String)>>> {
        let f = self.index_of(from)?;
        let t = self.index_of(to)?;
        let mut out = Vec::new();
        if f == t {
            return Ok(out);
        }
        let mut path = vec![f];
        self.collect_paths(t, &mut path, &mut out);
        Ok(out)
    }

    fn collect_paths(
        &self,
        target: usize,
        path: &mut Vec<usize>,
        out: &mut Vec<Vec<(String, String)>>,
    ) {
        let last = *path.last().expect("path is never empty");
        let mut next: Vec<usize> = self.children[last].iter().copied().collect();
        next.sort_by(|a, b| self.variables[*a].name.cmp(&self.variables[*b].name));
        for c in next {
            path.push(c);
            if c == target {
                out.push(
                    path.windows(2)
                        .map(|w| {
                            (
                                self.variables[w[0]].name.clone(),
                                self.variables[w[1]].name.clone(),
                            )
                        })
                        .collect(),
                );
            } else {
                self.collect_paths(target, path, out);
            }
            path.pop();
        }
    }

    /// Graphviz rendering. Node shape encodes kind, edge style encodes provenance
    /// (dashed for data-only edges). Nodes and edges appear in lexicographic order.
    pub fn export_dot(&self) -> String {
        let mut out = String::from("digraph G {\n");
        let mut nodes: Vec<&Variable> = self.variables.iter().collect();
        nodes.sort_by(|a, b| a.name.cmp(&b.name));
        for v in nodes {
            let _ = writeln!(out, "  {} [shape={}];", dot_id(&v.name), v.kind.dot_shape());
        }
        for e in self.edges() {
            let style = match e.provenance {
                Provenance::Data => "dashed",
                Provenance::Prior | Provenance::Both | Provenance::Validated => "solid",
            };
            let _ = writeln!(
                out,
                "  {} -> {} [style={}];",
                dot_id(&e.from),
                dot_id(&e.to),
                style
            );
        }
        out.push_str("}\n");
        out
    }
}

fn dot_id(name: &str) -> String {
    const KEYWORDS: [&str; 6] = ["node", "edge", "graph", "digraph", "subgraph", "strict"];
    if KEYWORDS.iter().any(|k| k.eq_ignore_ascii_case(name)) {
        format!("\"{name}\"")
    } else {
        name.to_string()
    }
}
