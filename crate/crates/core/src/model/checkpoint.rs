//! Checkpoint directory: a plain-text manifest plus a little-endian `f64` blob.
//!
//! The blob holds every parameter in store order, followed by the first and
//! second optimizer moments when present. The manifest records the model
//! configuration, step counter and each tensor's shape and element offset.

use std::fs;
use std::path::Path;

use crate::config::{parse_kv, parse_value, ConfigSection};
use crate::error::{Error, Result};
use crate::optim::OptimizerState;
use crate::tensor::Tensor;

use super::{GraphDepthModel, ModelConfig, ParamStore};

pub const MANIFEST_FILE: &str = "checkpoint.manifest";
pub const BLOB_FILE: &str = "checkpoint.bin";
const FORMAT: &str = "graphdepth-checkpoint-1";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    /// Training steps completed.
    pub step: u64,
    pub params: ParamStore,
    pub optimizer: Option<OptimizerState>,
}

impl Checkpoint {
    pub fn into_model(self) -> Result<GraphDepthModel> {
        GraphDepthModel::with_params(self.config, self.params)
    }
}

fn shape_string(shape: &[usize]) -> String {
    shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
}

pub fn save_checkpoint(dir: &Path, ckpt: &Checkpoint) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut manifest = format!("format = {FORMAT}\nstep = {}\n", ckpt.step);
    for (k, v) in ckpt.config.entries() {
        manifest.push_str(&format!("config.{k} = {v}\n"));
    }
    let total = ckpt.params.numel();
    let moments = ckpt.optimizer.as_ref().map_or(0, |_| 2 * total);
    let mut blob = Vec::with_capacity((total + moments) * 8);
    let mut offset = 0usize;
    manifest.push_str(&format!("params = {}\n", ckpt.params.len()));
    for (i, (name, t)) in ckpt.params.names().iter().zip(ckpt.params.tensors()).enumerate() {
        manifest.push_str(&format!(
            "param.{i} = {name} {} {offset} {}\n",
            shape_string(t.shape()),
            t.numel()
        ));
        offset += t.numel();
        blob.extend(t.data().iter().flat_map(|v| v.to_le_bytes()));
    }
    match &ckpt.optimizer {
        Some(state) => {
            if !state.matches(ckpt.params.tensors()) {
                return Err(Error::usage("optimizer state does not mirror the parameters"));
            }
            manifest.push_str(&format!("optimizer = adamw\noptimizer.step = {}\n", state.step));
            manifest.push_str(&format!("optimizer.m_offset = {offset}\noptimizer.v_offset = {}\n", offset + total));
            for moment in [&state.m, &state.v] {
                blob.extend(moment.iter().flatten().flat_map(|v| v.to_le_bytes()));
            }
        }
        None => manifest.push_str("optimizer = none\n"),
    }
    manifest.push_str(&format!("blob = {BLOB_FILE}\nblob.f64_count = {}\n", blob.len() / 8));
    fs::write(dir.join(BLOB_FILE), blob)?;
    fs::write(dir.join(MANIFEST_FILE), manifest)?;
    Ok(())
}

fn bad(file: &str, msg: impl Into<String>) -> Error {
    Error::Parse {
        file: file.to_string(),
        offset: 0,
        msg: msg.into(),
    }
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let mpath = dir.join(MANIFEST_FILE);
    let mname = mpath.display().to_string();
    let text = fs::read_to_string(&mpath)?;
    let kv = parse_kv(&text, &mname)?;
    let get = |key: &str| {
        kv.iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| bad(&mname, format!("missing key `{key}`")))
    };
    if get("format")? != FORMAT {
        return Err(bad(&mname, format!("unsupported format `{}`", get("format")?)));
    }
    let step: u64 = parse_value("step", get("step")?)?;
    let mut config = ModelConfig::default();
    for (k, v) in &kv {
        if let Some(key) = k.strip_prefix("config.") {
            config.set(key, v)?;
        }
    }

    let bpath = dir.join(BLOB_FILE);
    let bname = bpath.display().to_string();
    let bytes = fs::read(&bpath)?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Parse {
            file: bname,
            offset: bytes.len() - bytes.len() % 8,
            msg: "blob length is not a multiple of 8".into(),
        });
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    let expected: usize = parse_value("blob.f64_count", get("blob.f64_count")?)?;
    if values.len() != expected {
        return Err(Error::Parse {
            file: bname,
            offset: bytes.len(),
            msg: format!("expected {expected} values, found {}", values.len()),
        });
    }
    let slice = |offset: usize, len: usize| -> Result<&[f64]> {
        values
            .get(offset..offset + len)
            .ok_or_else(|| bad(&bname, format!("range {offset}..{} outside the blob", offset + len)))
    };

    let count: usize = parse_value("params", get("params")?)?;
    let mut params = ParamStore::default();
    for i in 0..count {
        let key = format!("param.{i}");
        let fields: Vec<&str> = get(&key)?.split_whitespace().collect();
        let [name, shape, offset, len] = fields[..] else {
            return Err(bad(&mname, format!("`{key}` needs name, shape, offset and length")));
        };
        let shape: Vec<usize> = shape
            .split('x')
            .map(|d| parse_value(&key, d))
            .collect::<Result<_>>()?;
        let offset: usize = parse_value(&key, offset)?;
        let len: usize = parse_value(&key, len)?;
        params.push(name, Tensor::new(&shape, slice(offset, len)?.to_vec())?);
    }

    let optimizer = match get("optimizer")? {
        "none" => None,
        "adamw" => {
            let m_off: usize = parse_value("optimizer.m_offset", get("optimizer.m_offset")?)?;
            let v_off: usize = parse_value("optimizer.v_offset", get("optimizer.v_offset")?)?;
            let split = |base: usize| -> Result<Vec<Vec<f64>>> {
                let mut at = base;
                params
                    .tensors()
                    .iter()
                    .map(|t| {
                        let s = slice(at, t.numel())?.to_vec();
                        at += t.numel();
                        Ok(s)
                    })
                    .collect()
            };
            Some(OptimizerState {
                step: parse_value("optimizer.step", get("optimizer.step")?)?,
                m: split(m_off)?,
                v: split(v_off)?,
            })
        }
        other => return Err(bad(&mname, format!("unknown optimizer `{other}`"))),
    };
    Ok(Checkpoint {
        config,
        step,
        params,
        optimizer,
    })
}
