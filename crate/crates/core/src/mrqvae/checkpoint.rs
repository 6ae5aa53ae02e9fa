use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{MrqConfig, MrqModel};
use crate::error::{Error, Result};
use crate::ndmath::Real;
use crate::tensorfile::{self, TensorFile};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"UQTM";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: MrqConfig,
    codebooks_initialized: bool,
}

/// Serializes the model as `f32` tensors; see [`crate::tensorfile`] for the layout.
pub fn encode_checkpoint<T: Real>(model: &MrqModel<T>) -> Result<Vec<u8>> {
    let header = serde_json::to_string(&Header {
        config: model.config.clone(),
        codebooks_initialized: model.codebooks_initialized,
    })?;
    let tensors = model
        .param_names()
        .into_iter()
        .zip(model.params())
        .map(|(n, p)| (n, p.cast::<f32>()))
        .collect();
    Ok(tensorfile::encode(
        CHECKPOINT_MAGIC,
        CHECKPOINT_VERSION,
        &TensorFile { header, tensors },
    ))
}

pub fn decode_checkpoint<T: Real>(bytes: &[u8]) -> Result<MrqModel<T>> {
    let file = tensorfile::decode(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, bytes)?;
    let header: Header = serde_json::from_str(&file.header)?;
    let mut model = MrqModel::<T>::new(header.config)?;
    model.codebooks_initialized = header.codebooks_initialized;
    let names = model.param_names();
    if names.len() != file.tensors.len() {
        return Err(Error::format(
            0,
            format!("checkpoint has {} tensors, config implies {}", file.tensors.len(), names.len()),
        ));
    }
    for ((name, dst), (found, src)) in names.iter().zip(model.params_mut()).zip(&file.tensors) {
        if name != found {
            return Err(Error::format(0, format!("expected tensor {name}, found {found}")));
        }
        if src.shape() != dst.shape() {
            return Err(Error::format(
                0,
                format!("tensor {name} has shape {:?}, expected {:?}", src.shape(), dst.shape()),
            ));
        }
        *dst = src.cast();
    }
    model.codebooks.validate()?;
    Ok(model)
}

pub fn save_checkpoint<T: Real>(model: &MrqModel<T>, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(model)?;
    std::fs::write(path, bytes).map_err(Error::file(path))
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<MrqModel<T>> {
    let bytes = std::fs::read(path).map_err(Error::file(path))?;
    decode_checkpoint(&bytes)
}
