//! Model checkpoints: a small self-describing binary container holding a
//! JSON header (format version, model kind, construction config, parameter
//! names and shapes) followed by every parameter's values as little-endian
//! f64, in declaration order.
//!
//! Values are copied bit for bit, so a save/load round trip reproduces the
//! model exactly. Loaders validate eagerly and report what is wrong and
//! where: magic, header bounds, JSON syntax, parameter names, shapes, and
//! payload length are all checked before any value is accepted.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::denoiser::{Denoiser, DenoiserConfig};
use crate::error::{Error, Result};
use crate::planner::TaskClassifier;
use crate::tensor::Tensor;

/// First bytes of every checkpoint file; the trailing digits version the
/// container layout.
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"PDCKPT01";

/// Version of the header schema inside the container.
pub const CHECKPOINT_VERSION: u32 = 1;

const KIND_DENOISER: &str = "denoiser";
const KIND_CLASSIFIER: &str = "task_classifier";

/// Name and shape of one serialized parameter, in model order.
#[derive(Debug, Serialize, Deserialize)]
pub struct ParamInfo {
    pub name: String,
    pub shape: Vec<usize>,
}

/// Plain-JSON container header preceding the raw parameter payload.
#[derive(Debug, Serialize, Deserialize)]
pub struct Header {
    pub format_version: u32,
    pub kind: String,
    pub config: serde_json::Value,
    /// Resolved run configuration echoed for reproducibility; loaders do not
    /// interpret it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run: Option<serde_json::Value>,
    pub params: Vec<ParamInfo>,
}

fn data_err(path: &Path, what: impl std::fmt::Display) -> Error {
    Error::Data(format!("{}: {}", path.display(), what))
}

pub fn write_checkpoint(
    path: &Path,
    kind: &str,
    config: serde_json::Value,
    run: Option<&serde_json::Value>,
    params: &[(String, &Tensor)],
) -> Result<()> {
    let header = Header {
        format_version: CHECKPOINT_VERSION,
        kind: kind.to_string(),
        config,
        run: run.cloned(),
        params: params
            .iter()
            .map(|(name, t)| ParamInfo { name: name.clone(), shape: t.shape().to_vec() })
            .collect(),
    };
    let header_bytes = serde_json::to_vec(&header)
        .map_err(|e| Error::Data(format!("checkpoint header: {}", e)))?;
    let payload_len: usize = params.iter().map(|(_, t)| t.numel() * 8).sum();
    let mut bytes =
        Vec::with_capacity(CHECKPOINT_MAGIC.len() + 8 + header_bytes.len() + payload_len);
    bytes.extend_from_slice(CHECKPOINT_MAGIC);
    bytes.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&header_bytes);
    for (_, tensor) in params {
        for v in tensor.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Parses the container and returns the header plus one value buffer per
/// parameter, in header order.
pub fn read_checkpoint(path: &Path, expect_kind: &str) -> Result<(Header, Vec<Vec<f64>>)> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < CHECKPOINT_MAGIC.len() + 8 {
        return Err(data_err(path, format!("only {} bytes, not a checkpoint", bytes.len())));
    }
    if &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(data_err(path, "bad magic, not a checkpoint file"));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let header_end = 16usize.saturating_add(header_len);
    if header_end > bytes.len() {
        return Err(data_err(
            path,
            format!(
                "header claims {} bytes but only {} remain after the magic",
                header_len,
                bytes.len() - 16
            ),
        ));
    }
    let header: Header = serde_json::from_slice(&bytes[16..header_end])
        .map_err(|e| data_err(path, format!("header bytes 16..{}: {}", header_end, e)))?;
    if header.format_version != CHECKPOINT_VERSION {
        return Err(data_err(
            path,
            format!(
                "format version {} unsupported, expected {}",
                header.format_version, CHECKPOINT_VERSION
            ),
        ));
    }
    if header.kind != expect_kind {
        return Err(data_err(
            path,
            format!("holds a {} model, expected {}", header.kind, expect_kind),
        ));
    }
    let mut buffers = Vec::with_capacity(header.params.len());
    let mut offset = header_end;
    for info in &header.params {
        let count: usize = info.shape.iter().product();
        let end = offset + count * 8;
        if end > bytes.len() {
            return Err(data_err(
                path,
                format!(
                    "parameter {} needs bytes {}..{} but the file ends at {}",
                    info.name,
                    offset,
                    end,
                    bytes.len()
                ),
            ));
        }
        let values = bytes[offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        buffers.push(values);
        offset = end;
    }
    if offset != bytes.len() {
        return Err(data_err(
            path,
            format!("{} trailing bytes after the last parameter", bytes.len() - offset),
        ));
    }
    Ok((header, buffers))
}

/// Copies loaded buffers into a freshly built model, insisting that names
/// and shapes line up with the model's own parameter declaration order.
fn apply_params(
    path: &Path,
    header: &Header,
    buffers: Vec<Vec<f64>>,
    params: &mut [(String, &mut Tensor)],
) -> Result<()> {
    if header.params.len() != params.len() {
        return Err(data_err(
            path,
            format!(
                "checkpoint lists {} parameters, model has {}",
                header.params.len(),
                params.len()
            ),
        ));
    }
    for ((info, buffer), (name, tensor)) in
        header.params.iter().zip(buffers).zip(params.iter_mut())
    {
        if &info.name != name {
            return Err(data_err(
                path,
                format!("parameter {} where the model expects {}", info.name, name),
            ));
        }
        if info.shape != tensor.shape() {
            return Err(data_err(
                path,
                format!(
                    "parameter {} has shape {:?}, model expects {:?}",
                    info.name,
                    info.shape,
                    tensor.shape()
                ),
            ));
        }
        tensor.data_mut().copy_from_slice(&buffer);
    }
    Ok(())
}

pub fn save_denoiser(
    net: &Denoiser,
    path: impl AsRef<Path>,
    run: Option<&serde_json::Value>,
) -> Result<()> {
    let config = serde_json::to_value(net.config())
        .map_err(|e| Error::Data(format!("denoiser config: {}", e)))?;
    write_checkpoint(path.as_ref(), KIND_DENOISER, config, run, &net.params())
}

pub fn load_denoiser(path: impl AsRef<Path>) -> Result<Denoiser> {
    let path = path.as_ref();
    let (header, buffers) = read_checkpoint(path, KIND_DENOISER)?;
    let config: DenoiserConfig = serde_json::from_value(header.config.clone())
        .map_err(|e| data_err(path, format!("denoiser config: {}", e)))?;
    let mut net = Denoiser::new(config, 0)?;
    apply_params(path, &header, buffers, &mut net.params_mut())?;
    Ok(net)
}

/// Construction arguments echoed into classifier checkpoints.
#[derive(Debug, Serialize, Deserialize)]
struct ClassifierConfig {
    obs_dim: usize,
    n_tasks: usize,
}

pub fn save_classifier(
    net: &TaskClassifier,
    path: impl AsRef<Path>,
    run: Option<&serde_json::Value>,
) -> Result<()> {
    let config = ClassifierConfig { obs_dim: net.obs_dim(), n_tasks: net.n_tasks() };
    let config = serde_json::to_value(&config)
        .map_err(|e| Error::Data(format!("classifier config: {}", e)))?;
    write_checkpoint(path.as_ref(), KIND_CLASSIFIER, config, run, &net.params())
}

pub fn load_classifier(path: impl AsRef<Path>) -> Result<TaskClassifier> {
    let path = path.as_ref();
    let (header, buffers) = read_checkpoint(path, KIND_CLASSIFIER)?;
    let config: ClassifierConfig = serde_json::from_value(header.config.clone())
        .map_err(|e| data_err(path, format!("classifier config: {}", e)))?;
    let mut net = TaskClassifier::new(config.obs_dim, config.n_tasks, 0)?;
    apply_params(path, &header, buffers, &mut net.params_mut())?;
    Ok(net)
}
