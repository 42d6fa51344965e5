use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{net, BehaviorModel};
use crate::data::{CausalStateMatrix, BOS_ID, EOS_ID};
use crate::error::{Error, Result};
use crate::graph::Intervention;

/// Generated action sequences, one per state row.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectorySet {
    /// Action tokens without BOS or EOS.
    pub trajectories: Vec<Vec<String>>,
    /// Whether each trajectory ended with EOS rather than at the horizon.
    pub terminated: Vec<bool>,
    pub states: CausalStateMatrix,
    pub intervention: Option<Intervention>,
    pub seed: u64,
}

impl TrajectorySet {
    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }
}

impl BehaviorModel {
    /// Samples one trajectory per row of `states`, starting from BOS and
    /// stopping at EOS or after `horizon` actions. `temperature == 0` decodes
    /// greedily. Row `r` draws from its own stream of the seeded generator, so
    /// a row's trajectory does not depend on the other rows.
    pub fn generate(
        &self,
        states: &CausalStateMatrix,
        horizon: usize,
        temperature: f64,
        seed: u64,
    ) -> Result<TrajectorySet> {
        if horizon == 0 || horizon > self.config.max_seq_len {
            return Err(Error::InvalidConfig(format!(
                "horizon must lie in 1..={}",
                self.config.max_seq_len
            )));
        }
        if !(temperature >= 0.0 && temperature.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "temperature must be non-negative, got {temperature}"
            )));
        }
        let rows = self.state_rows(states)?;
        let c: Vec<_> = rows.iter().map(|s| self.embed_state(s)).collect();
        let mut rngs: Vec<ChaCha8Rng> = (0..rows.len())
            .map(|r| {
                let mut g = ChaCha8Rng::seed_from_u64(seed);
                g.set_stream(r as u64);
                g
            })
            .collect();
        let mut prefixes: Vec<Vec<usize>> = vec![vec![BOS_ID]; rows.len()];
        let mut terminated = vec![false; rows.len()];
        let mut active: Vec<usize> = (0..rows.len()).collect();
        for _ in 0..horizon {
            if active.is_empty() {
                break;
            }
            let seqs: Vec<&[usize]> = active.iter().map(|&r| prefixes[r].as_slice()).collect();
            let trunk = net::trunk(&self.params, &self.config, &seqs);
            let ca: Vec<_> = active.iter().map(|&r| c[r].clone()).collect();
            let logits = net::last_logits(&self.params, &trunk, &ca);
            let mut still = Vec::with_capacity(active.len());
            for (i, &r) in active.iter().enumerate() {
                let row = logits.row(i);
                let next = if temperature == 0.0 {
                    (0..row.len())
                        .filter(|&k| k != BOS_ID)
                        .fold(EOS_ID, |best, k| if row[k] > row[best] { k } else { best })
                } else {
                    let m = (0..row.len())
                        .filter(|&k| k != BOS_ID)
                        .map(|k| row[k])
                        .fold(f64::NEG_INFINITY, f64::max);
                    let w: Vec<f64> = (0..row.len())
                        .map(|k| {
                            if k == BOS_ID {
                                0.0
                            } else {
                                ((row[k] - m) / temperature).exp()
                            }
                        })
                        .collect();
                    let z: f64 = w.iter().sum();
                    let u: f64 = rngs[r].random::<f64>() * z;
                    let mut acc = 0.0;
                    let mut pick = EOS_ID;
                    for (k, wk) in w.iter().enumerate() {
                        if *wk <= 0.0 {
                            continue;
                        }
                        acc += wk;
                        pick = k;
                        if u < acc {
                            break;
                        }
                    }
                    pick
                };
                if next == EOS_ID {
                    terminated[r] = true;
                } else {
                    prefixes[r].push(next);
                    still.push(r);
                }
            }
            active = still;
        }
        let trajectories = prefixes
            .into_iter()
            .map(|p| {
                p[1..]
                    .iter()
                    .map(|&t| self.vocabulary.token(t).to_string())
                    .collect()
            })
            .collect();
        Ok(TrajectorySet {
            trajectories,
            terminated,
            states: states.clone(),
            intervention: None,
            seed,
        })
    }
}
