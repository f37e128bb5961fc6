//! Checkpoint container: a TOML manifest (model config, schedule,
//! normalization statistics, tensor index) plus a raw `f32` payload with a
//! trailing CRC32, in the same conventions as datasets.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use compdiff_core::container::{self, FORMAT_VERSION};
use compdiff_core::ddpm::ParamKind;
use compdiff_core::schedule::ScheduleParams;
use compdiff_core::{Boundary, GridSpec, SystemId};

use crate::fno::FnoConfig;
use crate::unet::UNetConfig;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum ModelConfig {
    UNet(UNetConfig),
    Fno(FnoConfig),
}

/// Everything needed to rebuild a model and map its inputs and outputs to
/// physical units.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub system: SystemId,
    pub grid: GridSpec,
    /// Field predicted by a denoiser; `None` for the operator baseline.
    pub field_index: Option<usize>,
    pub channel_names: Vec<String>,
    pub norm_stats: Vec<(f64, f64)>,
    pub schedule: Option<ScheduleParams>,
    pub train_steps: usize,
    pub seed: u64,
}

impl CheckpointMeta {
    pub fn param_kind(&self) -> Option<ParamKind> {
        match &self.model {
            ModelConfig::UNet(c) => Some(c.param_kind),
            ModelConfig::Fno(_) => None,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestFile {
    format_version: u32,
    model: String,
    system_id: String,
    field_index: i64,
    nx: usize,
    nt: usize,
    x_min: f64,
    x_max: f64,
    t_max: f64,
    bc: String,
    channels: Vec<String>,
    norm_mean: Vec<f64>,
    norm_std: Vec<f64>,
    train_steps: usize,
    seed: u64,
    payload_file: String,
    payload_crc32: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    schedule: Option<ScheduleParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    unet: Option<UNetConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    fno: Option<FnoConfig>,
    tensors: Vec<TensorEntry>,
}

pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: BTreeMap<String, Tensor>,
    /// Hex CRC32 of the payload; identifies the weights.
    pub digest: String,
}

fn manifest_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Core(compdiff_core::Error::Manifest {
        path: path.to_path_buf(),
        msg: msg.into(),
    })
}

/// Writes `tensors` (converted to f32) under `meta`. Returns the digest.
pub fn save(path: &Path, meta: &CheckpointMeta, tensors: &BTreeMap<String, Tensor>) -> Result<String> {
    let mut flat: Vec<f32> = Vec::new();
    let mut index = Vec::with_capacity(tensors.len());
    for (name, t) in tensors {
        index.push(TensorEntry {
            name: name.clone(),
            shape: t.dims().to_vec(),
            offset: flat.len(),
        });
        flat.extend(t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?);
    }
    let payload = container::payload_path_for(path);
    let crc = container::write_payload(&payload, &flat)?;
    let (model, unet, fno) = match &meta.model {
        ModelConfig::UNet(c) => ("unet", Some(c.clone()), None),
        ModelConfig::Fno(c) => ("fno", None, Some(c.clone())),
    };
    let file = ManifestFile {
        format_version: FORMAT_VERSION,
        model: model.into(),
        system_id: meta.system.as_str().into(),
        field_index: meta.field_index.map_or(-1, |i| i as i64),
        nx: meta.grid.nx,
        nt: meta.grid.nt,
        x_min: meta.grid.x_min,
        x_max: meta.grid.x_max,
        t_max: meta.grid.t_max,
        bc: meta.grid.bc.as_str().into(),
        channels: meta.channel_names.clone(),
        norm_mean: meta.norm_stats.iter().map(|s| s.0).collect(),
        norm_std: meta.norm_stats.iter().map(|s| s.1).collect(),
        train_steps: meta.train_steps,
        seed: meta.seed,
        payload_file: payload
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default(),
        payload_crc32: crc,
        schedule: meta.schedule,
        unet,
        fno,
        tensors: index,
    };
    container::write_manifest(path, &file)?;
    Ok(format!("{crc:08x}"))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    container::check_version(path)?;
    let f: ManifestFile = container::read_manifest(path)?;
    let model = match (f.model.as_str(), f.unet, f.fno) {
        ("unet", Some(c), _) => ModelConfig::UNet(c),
        ("fno", _, Some(c)) => ModelConfig::Fno(c),
        (m, _, _) => return Err(manifest_err(path, format!("model '{m}' lacks its config table"))),
    };
    if matches!(model, ModelConfig::UNet(_)) && f.schedule.is_none() {
        return Err(manifest_err(path, "denoiser checkpoint without a noise schedule"));
    }
    if f.norm_mean.len() != f.norm_std.len() || f.norm_mean.len() != f.channels.len() {
        return Err(manifest_err(path, "normalization statistics do not match the channel list"));
    }
    let grid = GridSpec::new(f.nx, f.nt, f.x_min, f.x_max, f.t_max, f.bc.parse::<Boundary>()?)?;
    let total: usize = f.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
    let payload = container::resolve_payload(path, &f.payload_file);
    let flat = container::read_payload(&payload, total, f.payload_crc32)?;
    let mut tensors = BTreeMap::new();
    for e in &f.tensors {
        let n: usize = e.shape.iter().product();
        if e.offset + n > flat.len() {
            return Err(manifest_err(path, format!("tensor '{}' runs past the payload", e.name)));
        }
        let t = Tensor::from_slice(&flat[e.offset..e.offset + n], e.shape.as_slice(), &Device::Cpu)?;
        tensors.insert(e.name.clone(), t);
    }
    Ok(Checkpoint {
        meta: CheckpointMeta {
            model,
            system: f.system_id.parse()?,
            grid,
            field_index: usize::try_from(f.field_index).ok(),
            channel_names: f.channels,
            norm_stats: f.norm_mean.into_iter().zip(f.norm_std).collect(),
            schedule: f.schedule,
            train_steps: f.train_steps,
            seed: f.seed,
        },
        tensors,
        digest: format!("{:08x}", f.payload_crc32),
    })
}
