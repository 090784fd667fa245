//! Model checkpoints in the tensor container: the exact f64 parameters
//! (stored as raw little-endian bytes), the model shape and the layout.

use std::path::Path;

use super::model::{Model, ModelConfig};
use crate::container::Container;
use crate::error::{Error, Result};

pub fn checkpoint_container(model: &Model) -> Result<Container> {
    let mut c = Container::new();
    let bytes: Vec<u8> = model.params.iter().flat_map(|p| p.to_le_bytes()).collect();
    c.push_u8("params.f64", &[model.params.len(), 8], bytes)?;
    let cfg = &model.config;
    c.push_i32("model", &[3], vec![cfg.stages as i32, cfg.features as i32, cfg.parts as i32])?;
    let layout: String = model
        .layout()
        .iter()
        .map(|b| {
            let shape: Vec<String> = b.shape.iter().map(|d| d.to_string()).collect();
            format!("{} {} {}\n", b.name, b.offset, shape.join("x"))
        })
        .collect();
    c.push_u8("layout", &[layout.len()], layout.into_bytes())?;
    Ok(c)
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    checkpoint_container(model)?.write(path)
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let c = Container::read(path)?;
    let (_, m) = c.i32("model")?;
    if m.len() != 3 || m.iter().any(|&v| v <= 0) {
        return Err(Error::Format("checkpoint has a malformed model entry".into()));
    }
    let cfg = ModelConfig { stages: m[0] as usize, features: m[1] as usize, parts: m[2] as usize };
    let (dims, bytes) = c.u8("params.f64")?;
    if dims.len() != 2 || dims[1] != 8 {
        return Err(Error::Format("checkpoint parameters are not stored as f64".into()));
    }
    let params = bytes.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))).collect();
    Model::from_params(&cfg, params)
}

/// Loads a checkpoint and checks it against an expected shape.
pub fn load_checkpoint_for(path: &Path, expected: &ModelConfig) -> Result<Model> {
    let model = load_checkpoint(path)?;
    if &model.config != expected {
        let c = &model.config;
        return Err(Error::Format(format!(
            "checkpoint has stages={} features={} parts={} but stages={} features={} parts={} was expected",
            c.stages, c.features, c.parts, expected.stages, expected.features, expected.parts
        )));
    }
    Ok(model)
}
