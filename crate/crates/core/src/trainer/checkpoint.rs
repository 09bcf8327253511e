//! Checkpoint archive: one safetensors file holding the parameters, optimizer
//! moments and loss history, with a JSON header in the metadata block.
//!
//! Header fields: `format_version`, `model` (denoiser config including the
//! label vocabularies), `schedule`, `step`, `adam`, `rng` and `train`.
//! Tensor names: `param.<name>`, `adam.m.<name>`, `adam.v.<name>`,
//! `history.step`, `history.loss`.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use rand_chacha::ChaCha8Rng;
use safetensors::{Dtype, SafeTensors};
use serde::{Deserialize, Serialize};

use super::adam::{Adam, AdamConfig};
use super::{TrainConfig, TrainState};
use crate::denoiser::{build_denoiser, DenoiserConfig, DenoiserModel};
use crate::error::{Error, Result};
use crate::schedule::ScheduleConfig;

pub const FORMAT_VERSION: u32 = 1;
const HEADER_KEY: &str = "gaitcraft";
pub const LATEST_FILE: &str = "latest";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub model: DenoiserConfig,
    pub schedule: ScheduleConfig,
    pub step: u64,
    pub adam: AdamConfig,
    pub adam_step: u64,
    pub rng: ChaCha8Rng,
    pub train: Option<TrainConfig>,
}

pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub model: DenoiserModel,
    pub optimizer: Adam,
    pub loss_history: Vec<(u64, f64)>,
}

impl Checkpoint {
    pub fn into_state(self) -> TrainState {
        TrainState {
            model: self.model,
            optimizer: self.optimizer,
            step: self.header.step,
            rng: self.header.rng,
            loss_history: self.loss_history,
        }
    }
}

fn tensor_bytes(t: &Tensor) -> Result<(Dtype, Vec<u8>)> {
    let flat = t.flatten_all()?;
    Ok(match t.dtype() {
        DType::F32 => (
            Dtype::F32,
            flat.to_vec1::<f32>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        ),
        _ => (
            Dtype::F64,
            flat.to_dtype(DType::F64)?
                .to_vec1::<f64>()?
                .iter()
                .flat_map(|v| v.to_le_bytes())
                .collect(),
        ),
    })
}

fn read_tensor(st: &SafeTensors, name: &str, path: &Path) -> Result<Tensor> {
    let view = st
        .tensor(name)
        .map_err(|e| Error::checkpoint(path, format!("{name}: {e}")))?;
    let shape = view.shape().to_vec();
    let data = view.data();
    let t = match view.dtype() {
        Dtype::F32 => {
            let v: Vec<f32> = data
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Tensor::from_vec(v, shape, &Device::Cpu)?
        }
        Dtype::F64 => {
            let v: Vec<f64> = data
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Tensor::from_vec(v, shape, &Device::Cpu)?
        }
        other => return Err(Error::checkpoint(path, format!("{name}: unsupported dtype {other:?}"))),
    };
    Ok(t)
}

/// Write the checkpoint to `path` via a temporary file and rename.
pub fn save_checkpoint(
    path: &Path,
    state: &TrainState,
    schedule: &ScheduleConfig,
    train: Option<&TrainConfig>,
) -> Result<()> {
    let header = CheckpointHeader {
        format_version: FORMAT_VERSION,
        model: state.model.config().clone(),
        schedule: *schedule,
        step: state.step,
        adam: state.optimizer.config,
        adam_step: state.optimizer.step_count(),
        rng: state.rng.clone(),
        train: train.cloned(),
    };
    let mut blobs: Vec<(String, Dtype, Vec<usize>, Vec<u8>)> = Vec::new();
    let mut push = |name: String, t: &Tensor| -> Result<()> {
        let (dtype, bytes) = tensor_bytes(t)?;
        blobs.push((name, dtype, t.dims().to_vec(), bytes));
        Ok(())
    };
    for (name, var) in state.model.params().iter() {
        push(format!("param.{name}"), var.as_tensor())?;
    }
    for (name, (m, v)) in state.optimizer.moments() {
        push(format!("adam.m.{name}"), m)?;
        push(format!("adam.v.{name}"), v)?;
    }
    let steps: Vec<f64> = state.loss_history.iter().map(|(s, _)| *s as f64).collect();
    let losses: Vec<f64> = state.loss_history.iter().map(|(_, l)| *l).collect();
    let n = steps.len();
    push("history.step".into(), &Tensor::from_vec(steps, n, &Device::Cpu)?)?;
    push("history.loss".into(), &Tensor::from_vec(losses, n, &Device::Cpu)?)?;

    let views = blobs
        .iter()
        .map(|(name, dtype, shape, bytes)| {
            safetensors::tensor::TensorView::new(*dtype, shape.clone(), bytes)
                .map(|v| (name.clone(), v))
                .map_err(|e| Error::checkpoint(path, e))
        })
        .collect::<Result<Vec<_>>>()?;
    let header_json = serde_json::to_string(&header).map_err(|e| Error::checkpoint(path, e))?;
    let meta = HashMap::from([(HEADER_KEY.to_string(), header_json)]);
    let bytes = safetensors::tensor::serialize(views, Some(meta)).map_err(|e| Error::checkpoint(path, e))?;
    write_atomic(path, &bytes)
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_header(path: &Path) -> Result<CheckpointHeader> {
    let bytes = fs::read(path).map_err(|e| Error::checkpoint(path, e))?;
    header_from_bytes(&bytes, path)
}

fn header_from_bytes(bytes: &[u8], path: &Path) -> Result<CheckpointHeader> {
    let (_, meta) = SafeTensors::read_metadata(bytes).map_err(|e| Error::checkpoint(path, e))?;
    let json = meta
        .metadata()
        .as_ref()
        .and_then(|m| m.get(HEADER_KEY))
        .ok_or_else(|| Error::checkpoint(path, "missing header"))?;
    let header: CheckpointHeader = serde_json::from_str(json).map_err(|e| Error::checkpoint(path, e))?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::checkpoint(
            path,
            format!("format version {} != {FORMAT_VERSION}", header.format_version),
        ));
    }
    Ok(header)
}

/// Load a checkpoint file, or the one named by the `latest` pointer when
/// `path` is a directory.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let path = resolve_checkpoint(path)?;
    let path = path.as_path();
    let bytes = fs::read(path).map_err(|e| Error::checkpoint(path, e))?;
    let header = header_from_bytes(&bytes, path)?;
    let st = SafeTensors::deserialize(&bytes).map_err(|e| Error::checkpoint(path, e))?;

    let mut model = build_denoiser(&header.model, 0)?;
    model.attach_schedule(&header.schedule.build().map_err(|e| Error::checkpoint(path, e))?);
    for (name, _) in model.params().iter() {
        let t = read_tensor(&st, &format!("param.{name}"), path)?;
        model.params().assign(name, &t)?;
    }
    let mut moments = BTreeMap::new();
    let names: Vec<String> = st.names().iter().map(|s| s.to_string()).collect();
    for full in &names {
        if let Some(name) = full.strip_prefix("adam.m.") {
            let m = read_tensor(&st, full, path)?.to_dtype(model.dtype())?;
            let v = read_tensor(&st, &format!("adam.v.{name}"), path)?.to_dtype(model.dtype())?;
            moments.insert(name.to_string(), (m, v));
        }
    }
    let optimizer = Adam::restore(header.adam, header.adam_step, moments);
    let steps = read_tensor(&st, "history.step", path)?.to_vec1::<f64>()?;
    let losses = read_tensor(&st, "history.loss", path)?.to_vec1::<f64>()?;
    let loss_history = steps.into_iter().map(|s| s as u64).zip(losses).collect();
    Ok(Checkpoint {
        header,
        model,
        optimizer,
        loss_history,
    })
}

pub fn checkpoint_name(step: u64) -> String {
    format!("ckpt_{step}.bin")
}

/// Point `<dir>/latest` at `file_name`.
pub fn write_latest(dir: &Path, file_name: &str) -> Result<()> {
    write_atomic(&dir.join(LATEST_FILE), format!("{file_name}\n").as_bytes())
}

/// Directory → file named by its `latest` pointer; file paths pass through.
pub fn resolve_checkpoint(path: &Path) -> Result<PathBuf> {
    if path.is_dir() {
        let pointer = path.join(LATEST_FILE);
        let name = fs::read_to_string(&pointer).map_err(|e| Error::checkpoint(&pointer, e))?;
        Ok(path.join(name.trim()))
    } else {
        Ok(path.to_path_buf())
    }
}
