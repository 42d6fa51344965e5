use std::fmt;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{BehaviorModel, Example, LossBreakdown, ModelConfig, Params};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::graph::CausalGraph;

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
const EVAL_CHUNK: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lambda: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 0.1,
            lr: 3e-3,
            epochs: 30,
            batch_size: 64,
            seed: 0,
            clip_norm: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Validation => "validation",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub epoch: usize,
    pub split: Split,
    pub total: f64,
    pub seq: f64,
    pub causal: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TrainingLog(pub Vec<LogEntry>);

impl TrainingLog {
    pub fn entries(&self) -> &[LogEntry] {
        &self.0
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &LogEntry> {
        self.0.iter().filter(move |e| e.split == split)
    }

    /// `epoch,split,total,seq,causal` with a header line.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,split,total,seq,causal\n");
        for e in &self.0 {
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                e.epoch, e.split, e.total, e.seq, e.causal
            ));
        }
        s
    }
}

struct Adam {
    m: Params,
    v: Params,
    step: i32,
}

impl Adam {
    fn new(p: &Params) -> Self {
        Adam {
            m: p.zeros_like(),
            v: p.zeros_like(),
            step: 0,
        }
    }

    fn update(&mut self, p: &mut Params, g: &Params, lr: f64) {
        self.step += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(self.step);
        let c2 = 1.0 - ADAM_BETA2.powi(self.step);
        for (((w, gr), m), v) in p
            .slices_mut()
            .into_iter()
            .zip(g.slices())
            .zip(self.m.slices_mut())
            .zip(self.v.slices_mut())
        {
            for i in 0..w.len() {
                m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * gr[i];
                v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * gr[i] * gr[i];
                w[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + ADAM_EPS);
            }
        }
    }
}

fn clip(g: &mut Params, max_norm: f64) {
    let norm = g.global_norm();
    if norm > max_norm {
        let k = max_norm / norm;
        g.slices_mut()
            .into_iter()
            .for_each(|s| s.iter_mut().for_each(|x| *x *= k));
    }
}

/// Token-weighted loss over `examples`, evaluated in chunks with a fixed perturbation seed.
pub(crate) fn evaluate(
    model: &BehaviorModel,
    examples: &[Example],
    lambda: f64,
    seed: u64,
) -> Result<LossBreakdown> {
    let (mut seq, mut causal, mut n) = (0.0, 0.0, 0usize);
    for (i, chunk) in examples.chunks(EVAL_CHUNK).enumerate() {
        let w: usize = chunk.iter().map(|e| e.target.len()).sum();
        let l = model.loss(chunk, lambda, seed.wrapping_add(i as u64))?;
        seq += l.seq * w as f64;
        causal += l.causal * w as f64;
        n += w;
    }
    let n = n.max(1) as f64;
    let (seq, causal) = (seq / n, causal / n);
    Ok(LossBreakdown {
        total: seq + lambda * causal,
        seq,
        causal,
        lambda,
    })
}

/// Mini-batch Adam with a fixed learning rate and global-norm clipping.
/// Returns the model and one log row per epoch and split.
pub fn train(
    train: &Dataset,
    validation: Option<&Dataset>,
    graph: &CausalGraph,
    cfg: ModelConfig,
    hyper: &TrainConfig,
) -> Result<(BehaviorModel, TrainingLog)> {
    if train.is_empty() {
        return Err(Error::EmptyData);
    }
    if hyper.batch_size == 0 || !(hyper.lr > 0.0) || !(hyper.clip_norm > 0.0) {
        return Err(Error::InvalidConfig(
            "batch_size, lr and clip_norm must be positive".into(),
        ));
    }
    let mut model = BehaviorModel::new(cfg, graph.clone(), train.vocabulary().clone(), hyper.seed)?;
    let examples = model.encode(train)?;
    let val = validation
        .map(|v| model.encode(v))
        .transpose()?
        .filter(|v| !v.is_empty());
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    shuffle_rng.set_stream(1);
    let mut perturb_rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    perturb_rng.set_stream(2);
    let mut adam = Adam::new(model.params());
    let mut log = TrainingLog::default();

    for epoch in 1..=hyper.epochs {
        order.shuffle(&mut shuffle_rng);
        let (mut total, mut seq, mut causal, mut batches) = (0.0, 0.0, 0.0, 0usize);
        for idx in order.chunks(hyper.batch_size) {
            let batch: Vec<Example> = idx.iter().map(|&i| examples[i].clone()).collect();
            let (l, mut g) = model
                .backward(&batch, hyper.lambda, perturb_rng.next_u64())
                .map_err(|_| Error::Divergence { epoch })?;
            clip(&mut g, hyper.clip_norm);
            adam.update(model.params_mut(), &g, hyper.lr);
            total += l.total;
            seq += l.seq;
            causal += l.causal;
            batches += 1;
        }
        let b = batches as f64;
        log.0.push(LogEntry {
            epoch,
            split: Split::Train,
            total: total / b,
            seq: seq / b,
            causal: causal / b,
        });
        if !model.params().is_finite() {
            return Err(Error::Divergence { epoch });
        }
        if let Some(val) = &val {
            let l = evaluate(&model, val, hyper.lambda, hyper.seed)?;
            if !l.total.is_finite() {
                return Err(Error::Divergence { epoch });
            }
            log.0.push(LogEntry {
                epoch,
                split: Split::Validation,
                total: l.total,
                seq: l.seq,
                causal: l.causal,
            });
        }
        log::info!("epoch {epoch}: train total {:.4}", total / b);
    }
    Ok((model, log))
}
