//! Binary checkpoints: magic, format version, a JSON header with the
//! dimension table, then named parameter blocks (name, shape, f64 LE).

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{MixerError, Result};
use crate::model::{MixerModel, ModelConfig};
use crate::numerics::{DenseTensor, ParamNode, Parameterized};
use crate::proxy_loss::{ProxyStore, ShardLayout, PROXY_PARAM};
use crate::training::{TrainConfig, TrainState};

pub const MAGIC: &[u8; 8] = b"MIXRCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub model: ModelConfig,
    pub iteration: u64,
    pub seed: u64,
    pub shards: usize,
    pub category_ids: Vec<u64>,
    /// Plan phases completed when the checkpoint was taken.
    pub phases_done: usize,
}

/// Model, proxies and the bookkeeping needed to resume training.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub model: MixerModel,
    pub proxies: ProxyStore,
}

impl Checkpoint {
    pub fn from_state(state: &TrainState, phases_done: usize) -> Self {
        Checkpoint {
            header: CheckpointHeader {
                model: state.model.config.clone(),
                iteration: state.iteration,
                seed: state.seed,
                shards: state.proxies.layout.num_shards(),
                category_ids: state.category_ids.clone(),
                phases_done,
            },
            model: state.model.clone(),
            proxies: state.proxies.clone(),
        }
    }

    pub fn into_state(self, config: TrainConfig) -> Result<TrainState> {
        let mut state = TrainState::new(self.model, config, self.header.seed)?;
        state.iteration = self.header.iteration;
        state.category_ids = self.header.category_ids;
        state.proxies = self.proxies;
        Ok(state)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        let header = serde_json::to_vec(&self.header).map_err(|e| MixerError::Format {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        w.write_all(&(header.len() as u64).to_le_bytes())?;
        w.write_all(&header)?;
        let mut blocks: Vec<&ParamNode> = self.model.params();
        blocks.push(&self.proxies.weights);
        w.write_all(&(blocks.len() as u32).to_le_bytes())?;
        for p in blocks {
            write_block(&mut w, p)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bad = |m: String| MixerError::Format {
            path: path.display().to_string(),
            message: m,
        };
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic, path)?;
        if &magic != MAGIC {
            return Err(bad("not a checkpoint file".into()));
        }
        let version = u32::from_le_bytes(read_array(&mut r, path)?);
        if version != FORMAT_VERSION {
            return Err(bad(format!("unsupported format version {version}")));
        }
        let header_len = u64::from_le_bytes(read_array(&mut r, path)?) as usize;
        let mut header = vec![0u8; header_len];
        read_exact(&mut r, &mut header, path)?;
        let header: CheckpointHeader = serde_json::from_slice(&header).map_err(|e| bad(e.to_string()))?;
        let count = u32::from_le_bytes(read_array(&mut r, path)?) as usize;
        let mut blocks = BTreeMap::new();
        for _ in 0..count {
            let (name, shape, trainable, data) = read_block(&mut r, path)?;
            let value = DenseTensor::new(shape, data).map_err(|e| bad(e.to_string()))?;
            if blocks.insert(name.clone(), (value, trainable)).is_some() {
                return Err(bad(format!("duplicate block {name}")));
            }
        }
        let mut extra = [0u8; 1];
        if r.read(&mut extra)? != 0 {
            return Err(bad("trailing bytes after last block".into()));
        }

        let mut model = MixerModel::new(header.model.clone(), 0).map_err(|e| bad(e.to_string()))?;
        for p in model.params_mut() {
            let (value, trainable) = blocks
                .remove(&p.name)
                .ok_or_else(|| bad(format!("missing block {}", p.name)))?;
            if value.shape() != p.value.shape() {
                return Err(MixerError::shape("checkpoint block", value.shape(), p.value.shape()));
            }
            p.grad = DenseTensor::zeros(value.shape());
            p.value = value;
            p.trainable = trainable;
        }
        let (w, trainable) = blocks
            .remove(PROXY_PARAM)
            .ok_or_else(|| bad(format!("missing block {PROXY_PARAM}")))?;
        if let Some(name) = blocks.keys().next() {
            return Err(bad(format!("unexpected block {name}")));
        }
        if w.shape().len() != 2 || w.cols() != header.model.d || w.rows() != header.category_ids.len().max(1) {
            return Err(MixerError::shape("checkpoint proxies", w.shape(), &[header.category_ids.len(), header.model.d]));
        }
        let layout = ShardLayout::even(w.rows(), header.shards)?;
        let proxies = ProxyStore {
            weights: ParamNode::new(PROXY_PARAM, w, trainable),
            layout,
        };
        Ok(Checkpoint { header, model, proxies })
    }
}

fn write_block(w: &mut impl Write, p: &ParamNode) -> Result<()> {
    let name = p.name.as_bytes();
    w.write_all(&(name.len() as u32).to_le_bytes())?;
    w.write_all(name)?;
    w.write_all(&(p.value.shape().len() as u32).to_le_bytes())?;
    for s in p.value.shape() {
        w.write_all(&(*s as u64).to_le_bytes())?;
    }
    w.write_all(&[u8::from(p.trainable)])?;
    for v in p.value.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], path: &Path) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            MixerError::Format {
                path: path.display().to_string(),
                message: "truncated checkpoint".into(),
            }
        } else {
            e.into()
        }
    })
}

fn read_array<const N: usize>(r: &mut impl Read, path: &Path) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    read_exact(r, &mut b, path)?;
    Ok(b)
}

type Block = (String, Vec<usize>, bool, Vec<f64>);

fn read_block(r: &mut impl Read, path: &Path) -> Result<Block> {
    let name_len = u32::from_le_bytes(read_array(r, path)?) as usize;
    let mut name = vec![0u8; name_len];
    read_exact(r, &mut name, path)?;
    let name = String::from_utf8(name).map_err(|e| MixerError::Format {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    let ndim = u32::from_le_bytes(read_array(r, path)?) as usize;
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(u64::from_le_bytes(read_array(r, path)?) as usize);
    }
    let trainable = read_array::<1>(r, path)?[0] != 0;
    let len: usize = shape.iter().product();
    let mut data = Vec::with_capacity(len);
    for _ in 0..len {
        data.push(f64::from_le_bytes(read_array(r, path)?));
    }
    Ok((name, shape, trainable, data))
}
