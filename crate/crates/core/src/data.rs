//! Session datasets, tokenization, splitting and file formats.
//!
//! Session JSONL layout: one header line
//! `{"vocabulary":[...],"variables":[...],"intervention":null|{...}, ...}`
//! followed by one `{"session_id","causal_state":{...},"actions":[...]}` per line.
//! `<bos>`/`<eos>` are part of the vocabulary but never stored in sessions.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{CausalGraph, Intervention, Variable, VariableKind};

pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const BOS_ID: usize = 0;
pub const EOS_ID: usize = 1;

/// Ordered token list: `<bos>`, `<eos>`, then action tokens.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Vocabulary over `actions` with the reserved tokens prepended.
    pub fn with_actions<S: Into<String>>(actions: impl IntoIterator<Item = S>) -> Result<Self> {
        let mut tokens = vec![BOS.to_string(), EOS.to_string()];
        tokens.extend(actions.into_iter().map(Into::into));
        Self::from_tokens(tokens)
    }

    /// Full token list; must start with `<bos>`, `<eos>`.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 2 || tokens[BOS_ID] != BOS || tokens[EOS_ID] != EOS {
            return Err(Error::InvalidDataset(format!(
                "vocabulary must start with {BOS}, {EOS}"
            )));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::InvalidDataset(format!("bad token `{t}`")));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::InvalidDataset(format!("duplicate token `{t}`")));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Non-reserved tokens.
    pub fn actions(&self) -> &[String] {
        &self.tokens[2..]
    }

    pub fn id(&self, token: &str) -> Result<usize> {
        self.index
            .get(token)
            .copied()
            .ok_or_else(|| Error::UnknownToken(token.to_string()))
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    fn action_id(&self, token: &str) -> Result<usize> {
        match self.id(token)? {
            BOS_ID | EOS_ID => Err(Error::UnknownToken(format!("{token} (reserved)"))),
            id => Ok(id),
        }
    }
}

impl TryFrom<Vec<String>> for Vocabulary {
    type Error = Error;

    fn try_from(tokens: Vec<String>) -> Result<Self> {
        Self::from_tokens(tokens)
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

/// Which actions count as conversion and as click-class engagement.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionSchema {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub conversion_action: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub click_actions: Vec<String>,
}

impl ActionSchema {
    pub fn check(&self, vocab: &Vocabulary) -> Result<()> {
        for a in self.conversion_action.iter().chain(&self.click_actions) {
            vocab.action_id(a)?;
        }
        Ok(())
    }
}

/// One user trajectory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Session {
    pub session_id: String,
    pub causal_state: BTreeMap<String, String>,
    pub actions: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    vocabulary: Vocabulary,
    variables: Vec<Variable>,
    intervention: Option<Intervention>,
    #[serde(flatten)]
    schema: ActionSchema,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    provenance: Option<String>,
}

/// A validated collection of sessions over one vocabulary and variable set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    vocabulary: Vocabulary,
    variables: Vec<Variable>,
    intervention: Option<Intervention>,
    schema: ActionSchema,
    provenance: Option<String>,
    sessions: Vec<Session>,
}

impl Dataset {
    pub fn new(
        vocabulary: Vocabulary,
        variables: Vec<Variable>,
        sessions: Vec<Session>,
    ) -> Result<Self> {
        let d = Dataset {
            vocabulary,
            variables,
            intervention: None,
            schema: ActionSchema::default(),
            provenance: None,
            sessions,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn with_intervention(mut self, intervention: Option<Intervention>) -> Self {
        self.intervention = intervention;
        self
    }

    pub fn with_schema(mut self, schema: ActionSchema) -> Result<Self> {
        schema.check(&self.vocabulary)?;
        self.schema = schema;
        Ok(self)
    }

    pub fn with_provenance(mut self, provenance: impl Into<String>) -> Self {
        self.provenance = Some(provenance.into());
        self
    }

    fn validate(&self) -> Result<()> {
        let mut ids = BTreeSet::new();
        let vars: BTreeMap<&str, &Variable> =
            self.variables.iter().map(|v| (v.name(), v)).collect();
        if vars.len() != self.variables.len() {
            return Err(Error::InvalidDataset("duplicate variable".into()));
        }
        for s in &self.sessions {
            if !ids.insert(s.session_id.as_str()) {
                return Err(Error::InvalidDataset(format!(
                    "duplicate session id `{}`",
                    s.session_id
                )));
            }
            if s.actions.is_empty() {
                return Err(Error::InvalidDataset(format!(
                    "session `{}` has no actions",
                    s.session_id
                )));
            }
            for a in &s.actions {
                self.vocabulary.action_id(a)?;
            }
            if s.causal_state.len() != vars.len() {
                return Err(Error::InvalidDataset(format!(
                    "session `{}` assigns {} variables, dataset declares {}",
                    s.session_id,
                    s.causal_state.len(),
                    vars.len()
                )));
            }
            for (name, level) in &s.causal_state {
                let v = vars
                    .get(name.as_str())
                    .ok_or_else(|| Error::UnknownVariable(name.clone()))?;
                v.level_index(level)?;
            }
        }
        self.schema.check(&self.vocabulary)
    }

    pub fn vocabulary(&self) -> &Vocabulary {
        &self.vocabulary
    }

    pub fn variables(&self) -> &[Variable] {
        &self.variables
    }

    pub fn intervention(&self) -> Option<&Intervention> {
        self.intervention.as_ref()
    }

    pub fn schema(&self) -> &ActionSchema {
        &self.schema
    }

    pub fn provenance(&self) -> Option<&str> {
        self.provenance.as_deref()
    }

    pub fn sessions(&self) -> &[Session] {
        &self.sessions
    }

    pub fn len(&self) -> usize {
        self.sessions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sessions.is_empty()
    }

    /// Same metadata, different sessions.
    pub fn with_sessions(&self, sessions: Vec<Session>) -> Result<Self> {
        let d = Dataset {
            sessions,
            ..self.clone_meta()
        };
        d.validate()?;
        Ok(d)
    }

    fn clone_meta(&self) -> Self {
        Dataset {
            vocabulary: self.vocabulary.clone(),
            variables: self.variables.clone(),
            intervention: self.intervention.clone(),
            schema: self.schema.clone(),
            provenance: self.provenance.clone(),
            sessions: Vec::new(),
        }
    }

    /// Action ids of one session (no reserved tokens).
    pub fn encode(&self, session: &Session) -> Result<Vec<usize>> {
        session
            .actions
            .iter()
            .map(|a| self.vocabulary.action_id(a))
            .collect()
    }

    /// Level-index rows over `graph`'s variables, one per session.
    pub fn state_matrix(&self, graph: &CausalGraph) -> Result<CausalStateMatrix> {
        let rows = self
            .sessions
            .iter()
            .map(|s| {
                graph
                    .variables()
                    .iter()
                    .map(|v| {
                        let level = s.causal_state.get(v.name()).ok_or_else(|| {
                            Error::InvalidDataset(format!(
                                "session `{}` lacks variable `{}`",
                                s.session_id,
                                v.name()
                            ))
                        })?;
                        v.level_index(level)
                    })
                    .collect()
            })
            .collect::<Result<Vec<Vec<usize>>>>()?;
        CausalStateMatrix::new(graph.variables().to_vec(), rows)
    }

    /// Shuffles sessions with `seed`, then partitions contiguously. Validation and
    /// test sizes are `floor(n * ratio)`; the remainder goes to train.
    pub fn split(&self, ratios: (f64, f64, f64), seed: u64) -> Result<(Dataset, Dataset, Dataset)> {
        let (tr, va, te) = ratios;
        if [tr, va, te].iter().any(|r| !(0.0..=1.0).contains(r))
            || ((tr + va + te) - 1.0).abs() > 1e-9
        {
            return Err(Error::InvalidRatios(format!(
                "({tr}, {va}, {te}) must be in [0,1] and sum to 1"
            )));
        }
        let n = self.sessions.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_val = ((n as f64) * va + 1e-9).floor() as usize;
        let n_test = ((n as f64) * te + 1e-9).floor() as usize;
        let n_train = n - n_val - n_test;
        let take = |idx: &[usize]| -> Vec<Session> {
            idx.iter().map(|&i| self.sessions[i].clone()).collect()
        };
        let meta = self.clone_meta();
        Ok((
            Dataset {
                sessions: take(&order[..n_train]),
                ..meta.clone()
            },
            Dataset {
                sessions: take(&order[n_train..n_train + n_val]),
                ..meta.clone()
            },
            Dataset {
                sessions: take(&order[n_train + n_val..]),
                ..meta
            },
        ))
    }
}

/// Per-session level assignment of a fixed variable list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CausalStateMatrix {
    variables: Vec<Variable>,
    rows: Vec<Vec<usize>>,
}

impl CausalStateMatrix {
    pub fn new(variables: Vec<Variable>, rows: Vec<Vec<usize>>) -> Result<Self> {
        for (r, row) in rows.iter().enumerate() {
            if row.len() != variables.len() {
                return Err(Error::InvalidDataset(format!(
                    "state row {r} has {} entries, expected {}",
                    row.len(),
                    variables.len()
                )));
            }
            for (v, &level) in variables.iter().zip(row) {
                if level >= v.cardinality() {
                    return Err(Error::UnknownLevel {
                        variable: v.name().to_string(),
                        level: level.to_string(),
                    });
                }
            }
        }
        Ok(CausalStateMatrix { variables, rows })
    }

    pub fn variables(&self) -> &[Variable] {
        &self.variables
    }

    pub fn rows(&self) -> &[Vec<usize>] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn column_index(&self, name: &str) -> Result<usize> {
        self.variables
            .iter()
            .position(|v| v.name() == name)
            .ok_or_else(|| Error::UnknownVariable(name.to_string()))
    }

    pub fn column(&self, c: usize) -> impl Iterator<Item = usize> + '_ {
        self.rows.iter().map(move |r| r[c])
    }

    /// Appends a binary `{"0","1"}` column.
    pub fn with_indicator(mut self, name: &str, values: &[bool]) -> Result<Self> {
        if values.len() != self.rows.len() {
            return Err(Error::InvalidDataset("indicator length mismatch".into()));
        }
        self.variables.push(Variable::new(
            name,
            VariableKind::BehavioralOutcome,
            ["0", "1"],
        )?);
        for (row, &v) in self.rows.iter_mut().zip(values) {
            row.push(usize::from(v));
        }
        Ok(self)
    }

    /// Level labels of row `r`.
    pub fn labels(&self, r: usize) -> BTreeMap<String, String> {
        self.variables
            .iter()
            .zip(&self.rows[r])
            .map(|(v, &l)| (v.name().to_string(), v.domain()[l].clone()))
            .collect()
    }
}

/// Supported input formats.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Jsonl,
    /// MSNBC.com anonymous web data: integer page categories 1–17 per line.
    Msnbc,
}

pub const MSNBC_CATEGORIES: usize = 17;

pub fn load_sessions(path: impl AsRef<Path>, format: Format) -> Result<Dataset> {
    let reader = BufReader::new(File::open(path.as_ref())?);
    match format {
        Format::Jsonl => read_jsonl(reader),
        Format::Msnbc => read_msnbc(reader),
    }
}

pub fn read_jsonl(reader: impl BufRead) -> Result<Dataset> {
    let mut lines = reader.lines().enumerate();
    let header: Header = loop {
        match lines.next() {
            None => {
                log::warn!("empty session file");
                return Dataset::new(
                    Vocabulary::with_actions(Vec::<String>::new())?,
                    Vec::new(),
                    Vec::new(),
                );
            }
            Some((n, line)) => {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                break serde_json::from_str(&line).map_err(|e| Error::Parse {
                    line: n + 1,
                    message: e.to_string(),
                })?;
            }
        }
    };
    let mut sessions = Vec::new();
    for (n, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let s: Session = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: n + 1,
            message: e.to_string(),
        })?;
        for a in &s.actions {
            header.vocabulary.action_id(a).map_err(|e| match e {
                Error::UnknownToken(t) => Error::Parse {
                    line: n + 1,
                    message: format!("unknown token `{t}`"),
                },
                other => other,
            })?;
        }
        sessions.push(s);
    }
    let d = Dataset {
        vocabulary: header.vocabulary,
        variables: header.variables,
        intervention: header.intervention,
        schema: header.schema,
        provenance: header.provenance,
        sessions,
    };
    d.validate()?;
    Ok(d)
}

pub fn read_msnbc(reader: impl BufRead) -> Result<Dataset> {
    let vocabulary = Vocabulary::with_actions((1..=MSNBC_CATEGORIES).map(|c| format!("c{c}")))?;
    let lines: Vec<String> = reader.lines().collect::<std::io::Result<_>>()?;
    // The distributed file carries a preamble ending in "% Sequences:".
    let start = lines
        .iter()
        .position(|l| l.trim_start().starts_with("% Sequences"))
        .map_or(0, |p| p + 1);
    let mut sessions = Vec::new();
    for (n, line) in lines.iter().enumerate().skip(start) {
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('%') {
            continue;
        }
        let actions = trimmed
            .split_whitespace()
            .map(|tok| match tok.parse::<usize>() {
                Ok(c) if (1..=MSNBC_CATEGORIES).contains(&c) => Ok(format!("c{c}")),
                _ => Err(Error::Parse {
                    line: n + 1,
                    message: format!("`{tok}` is not a category code 1-{MSNBC_CATEGORIES}"),
                }),
            })
            .collect::<Result<Vec<_>>>()?;
        sessions.push(Session {
            session_id: format!("msnbc-{}", n + 1),
            causal_state: BTreeMap::new(),
            actions,
        });
    }
    if sessions.is_empty() {
        log::warn!("MSNBC input contained no sequences");
    }
    Ok(Dataset::new(vocabulary, Vec::new(), sessions)?.with_provenance("msnbc"))
}

pub fn write_sessions(d: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path.as_ref())?);
    write_jsonl(d, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn write_jsonl(d: &Dataset, mut w: impl Write) -> Result<()> {
    let header = Header {
        vocabulary: d.vocabulary.clone(),
        variables: d.variables.clone(),
        intervention: d.intervention.clone(),
        schema: d.schema.clone(),
        provenance: d.provenance.clone(),
    };
    serde_json::to_writer(&mut w, &header)?;
    writeln!(w)?;
    for s in &d.sessions {
        serde_json::to_writer(&mut w, s)?;
        writeln!(w)?;
    }
    Ok(())
}
