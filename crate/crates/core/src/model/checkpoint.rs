//! Binary checkpoints: magic bytes, a little-endian `u64` header length, a
//! JSON header (config, graph, vocabulary, array names and shapes), then every
//! parameter as row-major little-endian `f64`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{BehaviorModel, ModelConfig, Params};
use crate::data::Vocabulary;
use crate::error::{Error, Result};
use crate::graph::CausalGraph;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CFSIMCK1";

const MAX_HEADER: u64 = 64 << 20;

#[derive(Serialize, Deserialize)]
struct ArrayInfo {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    graph: CausalGraph,
    vocabulary: Vocabulary,
    arrays: Vec<ArrayInfo>,
}

pub fn write_checkpoint(m: &BehaviorModel, mut w: impl Write) -> Result<()> {
    let arrays = m
        .parameter_names()
        .into_iter()
        .zip(m.params.views())
        .map(|(name, v)| ArrayInfo {
            name,
            shape: v.shape().to_vec(),
        })
        .collect();
    let header = Header {
        config: m.config.clone(),
        graph: m.graph.clone(),
        vocabulary: m.vocabulary.clone(),
        arrays,
    };
    let json = serde_json::to_vec(&header)?;
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    for s in m.params.slices() {
        for x in s {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint(mut r: impl Read) -> Result<BehaviorModel> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let len = u64::from_le_bytes(len);
    if len > MAX_HEADER {
        return Err(Error::Checkpoint(format!(
            "header of {len} bytes is implausibly large"
        )));
    }
    let mut json = vec![0u8; len as usize];
    r.read_exact(&mut json)?;
    let header: Header = serde_json::from_slice(&json)?;
    let config = header.config.resolve(&header.vocabulary, &header.graph)?;
    let mut params = Params::zeros(&config);
    let names = params.names(&header.graph);
    if header.arrays.len() != names.len() {
        return Err(Error::Checkpoint(format!(
            "expected {} arrays, found {}",
            names.len(),
            header.arrays.len()
        )));
    }
    for ((info, name), view) in header.arrays.iter().zip(&names).zip(params.views()) {
        if &info.name != name || info.shape != view.shape() {
            return Err(Error::Checkpoint(format!(
                "array `{}` {:?} does not match `{name}` {:?}",
                info.name,
                info.shape,
                view.shape()
            )));
        }
    }
    let mut buf = [0u8; 8];
    for s in params.slices_mut() {
        for x in s.iter_mut() {
            r.read_exact(&mut buf)
                .map_err(|_| Error::Checkpoint("truncated parameter data".into()))?;
            *x = f64::from_le_bytes(buf);
        }
    }
    if r.read(&mut buf)? != 0 {
        return Err(Error::Checkpoint(
            "trailing bytes after parameter data".into(),
        ));
    }
    if !params.is_finite() {
        return Err(Error::Checkpoint("non-finite parameter".into()));
    }
    BehaviorModel::from_parts(config, header.graph, header.vocabulary, params)
}

pub fn save_checkpoint(m: &BehaviorModel, path: impl AsRef<Path>) -> Result<()> {
    write_checkpoint(m, BufWriter::new(File::create(path)?))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<BehaviorModel> {
    read_checkpoint(BufReader::new(File::open(path)?))
}
