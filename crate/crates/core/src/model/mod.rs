//! Causally conditioned autoregressive transformer.
//!
//! The causal state of a session is embedded as a sum of per-variable level
//! embeddings, projected into the hidden space and added to the encoder output
//! right before the vocabulary projection. Gradients are derived by hand in
//! [`net`]; the objective is next-token NLL plus `lambda` times a symmetric-KL
//! penalty for reacting to state variables that the graph says cannot matter.

mod checkpoint;
mod generate;
mod net;
mod train;

use std::collections::BTreeSet;

use ndarray::{Array1, Array2, ArrayViewD, ArrayViewMutD};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{CausalStateMatrix, Dataset, Vocabulary, BOS_ID, EOS_ID};
use crate::error::{Error, Result};
use crate::graph::{CausalGraph, Variable, VariableKind};

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC,
};
pub use generate::TrajectorySet;
pub use train::{train, LogEntry, Split, TrainConfig, TrainingLog};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Architecture. `vocab_size` and `causal_state_dims` may be left at zero /
/// empty in a config file and filled in from the data with [`ModelConfig::resolve`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub num_layers: usize,
    pub max_seq_len: usize,
    pub causal_state_dims: Vec<usize>,
    /// Width of the feed-forward block; zero means `4 * hidden_dim`.
    pub ff_dim: usize,
    /// When false the causal embedding is held at zero (the no-conditioning ablation).
    pub causal_conditioning: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 0,
            embed_dim: 32,
            hidden_dim: 32,
            num_heads: 2,
            num_layers: 2,
            max_seq_len: 50,
            causal_state_dims: vec![],
            ff_dim: 0,
            causal_conditioning: true,
        }
    }
}

impl ModelConfig {
    /// Fills in vocabulary size and state dimensions, rejecting values that disagree.
    pub fn resolve(mut self, vocab: &Vocabulary, graph: &CausalGraph) -> Result<Self> {
        let dims: Vec<usize> = graph
            .variables()
            .iter()
            .map(Variable::cardinality)
            .collect();
        if self.vocab_size == 0 {
            self.vocab_size = vocab.len();
        }
        if self.causal_state_dims.is_empty() {
            self.causal_state_dims = dims.clone();
        }
        if self.ff_dim == 0 {
            self.ff_dim = 4 * self.hidden_dim;
        }
        if self.vocab_size != vocab.len() {
            return Err(Error::InvalidConfig(format!(
                "vocab_size {} but the vocabulary has {} tokens",
                self.vocab_size,
                vocab.len()
            )));
        }
        if self.causal_state_dims != dims {
            return Err(Error::InvalidConfig(format!(
                "causal_state_dims {:?} do not match the graph {:?}",
                self.causal_state_dims, dims
            )));
        }
        self.check()?;
        Ok(self)
    }

    pub fn check(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.vocab_size < 3 {
            return bad("vocab_size must be at least 3");
        }
        if [
            self.embed_dim,
            self.hidden_dim,
            self.num_heads,
            self.num_layers,
            self.max_seq_len,
            self.ff_dim,
        ]
        .contains(&0)
        {
            return bad("all dimensions must be at least 1");
        }
        if !self.hidden_dim.is_multiple_of(self.num_heads) {
            return bad("hidden_dim must be divisible by num_heads");
        }
        if self.causal_state_dims.contains(&0) {
            return bad("causal_state_dims entries must be at least 1");
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub ln1_gamma: Array1<f64>,
    pub ln1_beta: Array1<f64>,
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    pub wo: Array2<f64>,
    pub ln2_gamma: Array1<f64>,
    pub ln2_beta: Array1<f64>,
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

/// All trainable arrays. Gradients use the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub causal: Vec<Array2<f64>>,
    pub token: Array2<f64>,
    pub position: Array2<f64>,
    pub layers: Vec<Layer>,
    pub lnf_gamma: Array1<f64>,
    pub lnf_beta: Array1<f64>,
    pub causal_proj: Array2<f64>,
    pub out_weight: Array2<f64>,
    pub out_bias: Array1<f64>,
}

impl Params {
    fn zeros(cfg: &ModelConfig) -> Self {
        let (e, h, f, v) = (cfg.embed_dim, cfg.hidden_dim, cfg.ff_dim, cfg.vocab_size);
        Params {
            causal: cfg
                .causal_state_dims
                .iter()
                .map(|&d| Array2::zeros((d, e)))
                .collect(),
            token: Array2::zeros((v, h)),
            position: Array2::zeros((cfg.max_seq_len, h)),
            layers: (0..cfg.num_layers)
                .map(|_| Layer {
                    ln1_gamma: Array1::zeros(h),
                    ln1_beta: Array1::zeros(h),
                    wq: Array2::zeros((h, h)),
                    wk: Array2::zeros((h, h)),
                    wv: Array2::zeros((h, h)),
                    wo: Array2::zeros((h, h)),
                    ln2_gamma: Array1::zeros(h),
                    ln2_beta: Array1::zeros(h),
                    w1: Array2::zeros((h, f)),
                    b1: Array1::zeros(f),
                    w2: Array2::zeros((f, h)),
                    b2: Array1::zeros(h),
                })
                .collect(),
            lnf_gamma: Array1::zeros(h),
            lnf_beta: Array1::zeros(h),
            causal_proj: Array2::zeros((e, h)),
            out_weight: Array2::zeros((h, v)),
            out_bias: Array1::zeros(v),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.slices_mut().into_iter().for_each(|s| s.fill(0.0));
        z
    }

    fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Params::zeros(cfg);
        let mut fill = |a: &mut [f64], std: f64| {
            let n = Normal::new(0.0, std).expect("positive std");
            a.iter_mut().for_each(|x| *x = n.sample(&mut rng));
        };
        let (h, f, e) = (
            cfg.hidden_dim as f64,
            cfg.ff_dim as f64,
            cfg.embed_dim as f64,
        );
        if cfg.causal_conditioning {
            for t in &mut p.causal {
                fill(t.as_slice_mut().unwrap(), 0.1);
            }
        }
        fill(p.token.as_slice_mut().unwrap(), 0.1);
        fill(p.position.as_slice_mut().unwrap(), 0.1);
        for l in &mut p.layers {
            l.ln1_gamma.fill(1.0);
            l.ln2_gamma.fill(1.0);
            for w in [&mut l.wq, &mut l.wk, &mut l.wv, &mut l.wo] {
                fill(w.as_slice_mut().unwrap(), 1.0 / h.sqrt());
            }
            fill(l.w1.as_slice_mut().unwrap(), 1.0 / h.sqrt());
            fill(l.w2.as_slice_mut().unwrap(), 1.0 / f.sqrt());
        }
        p.lnf_gamma.fill(1.0);
        fill(p.causal_proj.as_slice_mut().unwrap(), 1.0 / e.sqrt());
        fill(p.out_weight.as_slice_mut().unwrap(), 1.0 / h.sqrt());
        p
    }

    /// Parameter names in storage order.
    pub fn names(&self, graph: &CausalGraph) -> Vec<String> {
        let mut out: Vec<String> = graph
            .names()
            .map(|v| format!("causal_embedding.{v}"))
            .collect();
        out.push("token_embedding".into());
        out.push("position_embedding".into());
        for l in 0..self.layers.len() {
            for part in [
                "ln1.gamma",
                "ln1.beta",
                "attn.wq",
                "attn.wk",
                "attn.wv",
                "attn.wo",
                "ln2.gamma",
                "ln2.beta",
                "mlp.w1",
                "mlp.b1",
                "mlp.w2",
                "mlp.b2",
            ] {
                out.push(format!("layers.{l}.{part}"));
            }
        }
        out.extend(
            [
                "final_norm.gamma",
                "final_norm.beta",
                "decoder.causal_proj",
                "decoder.out_weight",
                "decoder.out_bias",
            ]
            .map(String::from),
        );
        out
    }

    /// Views in the order of [`Params::names`].
    pub fn views(&self) -> Vec<ArrayViewD<'_, f64>> {
        let mut out: Vec<ArrayViewD<f64>> =
            self.causal.iter().map(|a| a.view().into_dyn()).collect();
        out.push(self.token.view().into_dyn());
        out.push(self.position.view().into_dyn());
        for l in &self.layers {
            out.extend([
                l.ln1_gamma.view().into_dyn(),
                l.ln1_beta.view().into_dyn(),
                l.wq.view().into_dyn(),
                l.wk.view().into_dyn(),
                l.wv.view().into_dyn(),
                l.wo.view().into_dyn(),
                l.ln2_gamma.view().into_dyn(),
                l.ln2_beta.view().into_dyn(),
                l.w1.view().into_dyn(),
                l.b1.view().into_dyn(),
                l.w2.view().into_dyn(),
                l.b2.view().into_dyn(),
            ]);
        }
        out.extend([
            self.lnf_gamma.view().into_dyn(),
            self.lnf_beta.view().into_dyn(),
            self.causal_proj.view().into_dyn(),
            self.out_weight.view().into_dyn(),
            self.out_bias.view().into_dyn(),
        ]);
        out
    }

    pub fn views_mut(&mut self) -> Vec<ArrayViewMutD<'_, f64>> {
        let mut out: Vec<ArrayViewMutD<f64>> = self
            .causal
            .iter_mut()
            .map(|a| a.view_mut().into_dyn())
            .collect();
        out.push(self.token.view_mut().into_dyn());
        out.push(self.position.view_mut().into_dyn());
        for l in &mut self.layers {
            out.extend([
                l.ln1_gamma.view_mut().into_dyn(),
                l.ln1_beta.view_mut().into_dyn(),
                l.wq.view_mut().into_dyn(),
                l.wk.view_mut().into_dyn(),
                l.wv.view_mut().into_dyn(),
                l.wo.view_mut().into_dyn(),
                l.ln2_gamma.view_mut().into_dyn(),
                l.ln2_beta.view_mut().into_dyn(),
                l.w1.view_mut().into_dyn(),
                l.b1.view_mut().into_dyn(),
                l.w2.view_mut().into_dyn(),
                l.b2.view_mut().into_dyn(),
            ]);
        }
        out.extend([
            self.lnf_gamma.view_mut().into_dyn(),
            self.lnf_beta.view_mut().into_dyn(),
            self.causal_proj.view_mut().into_dyn(),
            self.out_weight.view_mut().into_dyn(),
            self.out_bias.view_mut().into_dyn(),
        ]);
        out
    }

    /// Contiguous row-major storage of every array, in name order.
    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.views_mut()
            .into_iter()
            .map(|v| v.into_slice().expect("parameters are contiguous"))
            .collect()
    }

    pub fn slices(&self) -> Vec<&[f64]> {
        self.views()
            .into_iter()
            .map(|v| v.to_slice().expect("parameters are contiguous"))
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.slices()
            .iter()
            .all(|s| s.iter().all(|x| x.is_finite()))
    }

    pub fn global_norm(&self) -> f64 {
        self.slices()
            .iter()
            .flat_map(|s| s.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }
}

/// One training / scoring example: `input` is BOS followed by the actions,
/// `target` the actions followed by EOS.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub input: Vec<usize>,
    pub target: Vec<usize>,
    /// Level index per graph variable, in graph order.
    pub state: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub seq: f64,
    pub causal: f64,
    pub lambda: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BehaviorModel {
    config: ModelConfig,
    graph: CausalGraph,
    vocabulary: Vocabulary,
    params: Params,
    perturbable: Vec<usize>,
}

impl BehaviorModel {
    /// Randomly initialized model; `config` is resolved against `vocabulary` and `graph`.
    pub fn new(
        config: ModelConfig,
        graph: CausalGraph,
        vocabulary: Vocabulary,
        seed: u64,
    ) -> Result<Self> {
        let config = config.resolve(&vocabulary, &graph)?;
        let params = Params::init(&config, seed);
        BehaviorModel::from_parts(config, graph, vocabulary, params)
    }

    pub(crate) fn from_parts(
        config: ModelConfig,
        graph: CausalGraph,
        vocabulary: Vocabulary,
        params: Params,
    ) -> Result<Self> {
        let config = config.resolve(&vocabulary, &graph)?;
        let perturbable = perturbable_variables(&graph)?;
        Ok(BehaviorModel {
            config,
            graph,
            vocabulary,
            params,
            perturbable,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn graph(&self) -> &CausalGraph {
        &self.graph
    }

    pub fn vocabulary(&self) -> &Vocabulary {
        &self.vocabulary
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    pub fn parameter_names(&self) -> Vec<String> {
        self.params.names(&self.graph)
    }

    /// Graph variables whose perturbation the consistency penalty targets.
    pub fn perturbable_variables(&self) -> Vec<&str> {
        self.perturbable
            .iter()
            .map(|&i| self.graph.variables()[i].name())
            .collect()
    }

    /// Level index per graph variable, in graph order, for every row of `s`.
    fn state_rows(&self, s: &CausalStateMatrix) -> Result<Vec<Vec<usize>>> {
        let cols = self
            .graph
            .variables()
            .iter()
            .map(|v| {
                let c = s.column_index(v.name())?;
                if s.variables()[c].domain() != v.domain() {
                    return Err(Error::InvalidDataset(format!(
                        "levels of `{}` differ from the model's",
                        v.name()
                    )));
                }
                Ok(c)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(s.rows()
            .iter()
            .map(|row| cols.iter().map(|&c| row[c]).collect())
            .collect())
    }

    fn embed_state(&self, state: &[usize]) -> Array1<f64> {
        let mut c = Array1::zeros(self.config.embed_dim);
        if self.config.causal_conditioning {
            for (table, &level) in self.params.causal.iter().zip(state) {
                c += &table.row(level);
            }
        }
        c
    }

    /// Sum of per-variable level embeddings, one vector per row of `s`.
    pub fn causal_embedding(&self, s: &CausalStateMatrix) -> Result<Vec<Array1<f64>>> {
        Ok(self
            .state_rows(s)?
            .iter()
            .map(|st| self.embed_state(st))
            .collect())
    }

    fn check_state(&self, state: &[usize]) -> Result<()> {
        if state.len() != self.graph.len() {
            return Err(Error::InvalidDataset(format!(
                "state has {} entries, the graph {}",
                state.len(),
                self.graph.len()
            )));
        }
        for (v, &l) in self.graph.variables().iter().zip(state) {
            if l >= v.cardinality() {
                return Err(Error::UnknownLevel {
                    variable: v.name().to_string(),
                    level: l.to_string(),
                });
            }
        }
        Ok(())
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.len() > self.config.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: tokens.len(),
                max: self.config.max_seq_len,
            });
        }
        if let Some(t) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::UnknownToken(t.to_string()));
        }
        Ok(())
    }

    /// Next-token distributions (one row per input position) for token ids `tokens`
    /// and a state given as level indices in graph order.
    pub fn forward(&self, tokens: &[usize], state: &[usize]) -> Result<Array2<f64>> {
        self.check_tokens(tokens)?;
        self.check_state(state)?;
        let trunk = net::trunk(&self.params, &self.config, &[tokens]);
        let c = [self.embed_state(state)];
        let mut logits = net::head(&self.params, &trunk, &c);
        net::softmax_rows(&mut logits);
        Ok(logits)
    }

    /// Like [`forward`](Self::forward) with token strings and a labelled state.
    pub fn forward_labels(
        &self,
        tokens: &[&str],
        s: &CausalStateMatrix,
        row: usize,
    ) -> Result<Array2<f64>> {
        let ids = tokens
            .iter()
            .map(|t| self.vocabulary.id(t))
            .collect::<Result<Vec<_>>>()?;
        let states = self.state_rows(s)?;
        let state = states
            .get(row)
            .ok_or_else(|| Error::InvalidQuery(format!("no state row {row}")))?;
        self.forward(&ids, state)
    }

    /// BOS-prefixed inputs and EOS-terminated targets for every session of `d`.
    pub fn encode(&self, d: &Dataset) -> Result<Vec<Example>> {
        if d.vocabulary().tokens() != self.vocabulary.tokens() {
            return Err(Error::InvalidDataset(
                "dataset vocabulary differs from the model's".into(),
            ));
        }
        let states = self.state_rows(&d.state_matrix(&self.graph)?)?;
        d.sessions()
            .iter()
            .zip(states)
            .map(|(s, state)| {
                let actions = d.encode(s)?;
                let mut input = Vec::with_capacity(actions.len() + 1);
                input.push(BOS_ID);
                input.extend(&actions);
                let mut target = actions;
                target.push(EOS_ID);
                self.check_tokens(&input)?;
                Ok(Example {
                    input,
                    target,
                    state,
                })
            })
            .collect()
    }

    /// `L = L_seq + lambda * L_causal` on `batch`, with perturbations drawn from `seed`.
    pub fn loss(&self, batch: &[Example], lambda: f64, seed: u64) -> Result<LossBreakdown> {
        self.objective(batch, lambda, seed, false).map(|(l, _)| l)
    }

    /// Exact gradients of the total loss, in the same layout as the parameters.
    pub fn backward(
        &self,
        batch: &[Example],
        lambda: f64,
        seed: u64,
    ) -> Result<(LossBreakdown, Params)> {
        let (l, g) = self.objective(batch, lambda, seed, true)?;
        if !l.total.is_finite() {
            return Err(Error::NonFiniteLoss);
        }
        Ok((l, g.expect("gradient requested")))
    }

    fn objective(
        &self,
        batch: &[Example],
        lambda: f64,
        seed: u64,
        grad: bool,
    ) -> Result<(LossBreakdown, Option<Params>)> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "lambda must be non-negative, got {lambda}"
            )));
        }
        for ex in batch {
            self.check_tokens(&ex.input)?;
            self.check_tokens(&ex.target)?;
            self.check_state(&ex.state)?;
            if ex.input.len() != ex.target.len() {
                return Err(Error::InvalidDataset(
                    "input and target lengths differ".into(),
                ));
            }
        }
        let perturbed = self.perturb(batch, seed);
        Ok(net::objective(
            self,
            batch,
            perturbed.as_deref(),
            lambda,
            grad,
        ))
    }

    /// One perturbed state per example, or `None` when nothing is perturbable.
    fn perturb(&self, batch: &[Example], seed: u64) -> Option<Vec<Vec<usize>>> {
        if self.perturbable.is_empty() {
            return None;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Some(
            batch
                .iter()
                .map(|ex| {
                    let v = self.perturbable[rng.random_range(0..self.perturbable.len())];
                    let k = self.graph.variables()[v].cardinality();
                    let mut s = ex.state.clone();
                    s[v] = (s[v] + rng.random_range(1..k)) % k;
                    s
                })
                .collect(),
        )
    }

    /// Mean per-token NLL (nats) of `d`, conditioning on each session's state.
    pub fn sequence_nll(&self, d: &Dataset) -> Result<f64> {
        let examples = self.encode(d)?;
        if examples.is_empty() {
            return Err(Error::EmptyData);
        }
        let (mut nll, mut tokens) = (0.0, 0usize);
        for chunk in examples.chunks(256) {
            let n: usize = chunk.iter().map(|e| e.target.len()).sum();
            nll += net::objective(self, chunk, None, 0.0, false).0.seq * n as f64;
            tokens += n;
        }
        Ok(nll / tokens as f64)
    }
}

/// Variables d-separated from the generated sequence given the other state
/// variables, where the sequence is a child of every behavioral outcome.
pub fn perturbable_variables(graph: &CausalGraph) -> Result<Vec<usize>> {
    let mut name = String::from("SEQUENCE");
    while graph.index_of(&name).is_ok() {
        name.push('_');
    }
    let mut vars = graph.variables().to_vec();
    vars.push(Variable::new(
        &name,
        VariableKind::BehavioralOutcome,
        ["0", "1"],
    )?);
    let mut aug = CausalGraph::new(vars)?;
    for e in graph.edges() {
        aug.insert_edge(&e.from, &e.to, e.provenance)?;
    }
    for v in graph
        .variables()
        .iter()
        .filter(|v| v.kind() == VariableKind::BehavioralOutcome)
    {
        aug.insert_edge(v.name(), &name, crate::graph::Provenance::Prior)?;
    }
    let seq = graph.len();
    let mut out = Vec::new();
    for v in 0..graph.len() {
        let rest: BTreeSet<usize> = (0..graph.len()).filter(|&u| u != v).collect();
        if aug.d_separated_idx(v, seq, &rest) {
            out.push(v);
        }
    }
    Ok(out)
}
