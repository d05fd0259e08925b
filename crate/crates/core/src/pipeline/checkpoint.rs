//! Stage checkpoints: one directory per stage holding each parameter as a
//! tensor file, the ordered parameter list, the model config, an optional
//! bridging matrix and the training log.

use std::fs;
use std::path::Path;

use prnn_tensor::{format, ParameterStore};
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{io_err, Error, Result};
use crate::pipeline::latent::BridgingMatrix;
use crate::pipeline::model::check_shapes;
use crate::pipeline::train::LogEntry;

pub const PARAMS_FILE: &str = "params.json";
pub const MODEL_FILE: &str = "model.json";
pub const BRIDGING_FILE: &str = "bridging_matrix.ptns";
pub const LOG_FILE: &str = "training_log.json";

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

pub(crate) fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}

/// A loaded stage checkpoint.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub params: ParameterStore,
    pub bridging: Option<BridgingMatrix>,
    pub log: Vec<LogEntry>,
}

pub fn save(
    dir: &Path,
    model: &ModelConfig,
    params: &ParameterStore,
    bridging: Option<&BridgingMatrix>,
    log: &[LogEntry],
) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let entries: Vec<ParamEntry> = params
        .iter()
        .map(|(name, t)| ParamEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
        })
        .collect();
    for (name, t) in params.iter() {
        let path = dir.join(format!("{name}.ptns"));
        format::write(&path, t)?;
    }
    write_json(&dir.join(PARAMS_FILE), &entries)?;
    write_json(&dir.join(MODEL_FILE), model)?;
    if let Some(m) = bridging {
        format::write(dir.join(BRIDGING_FILE), &m.to_tensor())?;
    }
    write_json(&dir.join(LOG_FILE), log)
}

pub fn load(dir: &Path) -> Result<Checkpoint> {
    let model: ModelConfig = read_json(&dir.join(MODEL_FILE))?;
    model.validate()?;
    let entries: Vec<ParamEntry> = read_json(&dir.join(PARAMS_FILE))?;
    let mut params = ParameterStore::new();
    for e in entries {
        let t = format::read(dir.join(format!("{}.ptns", e.name)))?;
        if t.shape() != e.shape.as_slice() {
            return Err(Error::Shape(format!("{}: listed {:?}, stored {:?}", e.name, e.shape, t.shape())));
        }
        params.insert(e.name, t)?;
    }
    check_shapes(&params, &model)?;
    let bridging_path = dir.join(BRIDGING_FILE);
    let bridging = if bridging_path.exists() {
        Some(BridgingMatrix::from_tensor(&format::read(&bridging_path)?)?)
    } else {
        None
    };
    let log_path = dir.join(LOG_FILE);
    let log = if log_path.exists() { read_json(&log_path)? } else { Vec::new() };
    Ok(Checkpoint {
        model,
        params,
        bridging,
        log,
    })
}
