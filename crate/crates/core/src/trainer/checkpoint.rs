//! Checkpoints: parameters, normalization buffers and optimizer state in a
//! safetensors container, with the training config in its metadata.

use std::collections::HashMap;
use std::path::Path;

use safetensors::tensor::{Dtype, SafeTensors, TensorView};

use crate::error::{bail, Error, Result};
use crate::model::Model;
use crate::trainer::config::TrainConfig;
use crate::trainer::optim::Optimizer;

const FORMAT: &str = "chr-checkpoint-1";

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub model: Model,
    pub optimizer: Optimizer,
    pub epoch: usize,
    pub step: usize,
    pub config_hash: String,
}

fn bytes(v: &[f32]) -> Vec<u8> {
    v.iter().flat_map(|x| x.to_le_bytes()).collect()
}

fn floats(b: &[u8]) -> Vec<f32> {
    b.chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

fn ck(e: impl std::fmt::Display) -> Error {
    Error::Checkpoint(e.to_string())
}

/// Serializes a checkpoint to bytes.
pub fn to_bytes(
    config: &TrainConfig,
    model: &Model,
    optimizer: &Optimizer,
    epoch: usize,
    step: usize,
) -> Result<Vec<u8>> {
    let mut arrays: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::new();
    for p in model.params() {
        arrays.push((p.name.clone(), p.shape.clone(), bytes(&p.value)));
    }
    for b in model.buffers() {
        arrays.push((b.name.clone(), b.shape.clone(), bytes(&b.value)));
    }
    for (p, m) in model.params().iter().zip(&optimizer.m) {
        arrays.push((format!("optim/m/{}", p.name), p.shape.clone(), bytes(m)));
    }
    for (p, v) in model.params().iter().zip(&optimizer.v) {
        arrays.push((format!("optim/v/{}", p.name), p.shape.clone(), bytes(v)));
    }
    let views = arrays
        .iter()
        .map(|(n, s, d)| Ok((n.clone(), TensorView::new(Dtype::F32, s.clone(), d).map_err(ck)?)))
        .collect::<Result<Vec<_>>>()?;
    let mut stored = config.clone();
    stored.stop_after = None;
    let meta = HashMap::from([
        ("format".to_string(), FORMAT.to_string()),
        ("config".to_string(), stored.to_text()),
        ("config_hash".to_string(), config.hash()),
        ("backbone".to_string(), serde_json::to_string(&config.backbone)?),
        ("epoch".to_string(), epoch.to_string()),
        ("step".to_string(), step.to_string()),
        ("optimizer_t".to_string(), optimizer.t.to_string()),
    ]);
    let data = safetensors::serialize(views, Some(meta)).map_err(ck)?;
    canonical_header(data)
}

/// Rewrites the JSON header with sorted keys so equal checkpoints are
/// equal byte for byte. The header length, and so every data offset, is
/// kept by padding with spaces.
fn canonical_header(mut data: Vec<u8>) -> Result<Vec<u8>> {
    let n = u64::from_le_bytes(data[..8].try_into().expect("8 bytes")) as usize;
    let header: serde_json::Value = serde_json::from_slice(&data[8..8 + n])?;
    let mut text = serde_json::to_vec(&header)?;
    if text.len() > n {
        bail!(Checkpoint, "canonical header longer than the original");
    }
    text.resize(n, b' ');
    data[8..8 + n].copy_from_slice(&text);
    Ok(data)
}

pub fn save(
    path: &Path,
    config: &TrainConfig,
    model: &Model,
    optimizer: &Optimizer,
    epoch: usize,
    step: usize,
) -> Result<()> {
    let data = to_bytes(config, model, optimizer, epoch, step)?;
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, data).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn from_bytes(data: &[u8]) -> Result<Checkpoint> {
    let st = SafeTensors::deserialize(data).map_err(ck)?;
    let (_, header) = SafeTensors::read_metadata(data).map_err(ck)?;
    let meta = header
        .metadata()
        .clone()
        .ok_or_else(|| ck("missing metadata"))?;
    let get = |k: &str| meta.get(k).ok_or_else(|| ck(format!("missing metadata key {k:?}")));
    if get("format")? != FORMAT {
        bail!(Checkpoint, "unsupported format {:?}", get("format")?);
    }
    let config = TrainConfig::parse_text(get("config")?)?;
    let config_hash = get("config_hash")?.clone();
    if config.hash() != config_hash {
        bail!(Checkpoint, "config hash does not match stored config");
    }
    let num = |k: &str| -> Result<u64> { get(k)?.parse().map_err(ck) };
    let (epoch, step) = (num("epoch")? as usize, num("step")? as usize);

    let mut model = Model::new(config.model_config(), config.seed)?;
    let load = |name: &str, shape: &[usize]| -> Result<Vec<f32>> {
        let view = st
            .tensor(name)
            .map_err(|_| ck(format!("missing array {name:?}")))?;
        if view.dtype() != Dtype::F32 || view.shape() != shape {
            bail!(
                Checkpoint,
                "{}: stored {:?} {:?}, model expects F32 {:?}",
                name,
                view.dtype(),
                view.shape(),
                shape
            );
        }
        Ok(floats(view.data()))
    };
    for p in model.params_mut() {
        p.value = load(&p.name, &p.shape)?;
    }
    for b in model.buffers_mut() {
        b.value = load(&b.name, &b.shape)?;
    }
    let mut optimizer = Optimizer::new(
        config.optimizer,
        config.momentum,
        config.weight_decay,
        &model.params(),
    );
    optimizer.t = num("optimizer_t")?;
    for (p, m) in model.params().iter().zip(&mut optimizer.m) {
        *m = load(&format!("optim/m/{}", p.name), &p.shape)?;
    }
    for (p, v) in model.params().iter().zip(&mut optimizer.v) {
        *v = load(&format!("optim/v/{}", p.name), &p.shape)?;
    }
    let expected = model.params().len() * (2 + usize::from(!optimizer.v.is_empty()))
        + model.buffers().len();
    if st.len() != expected {
        bail!(
            Checkpoint,
            "{} arrays stored, model uses {}",
            st.len(),
            expected
        );
    }
    Ok(Checkpoint {
        config,
        model,
        optimizer,
        epoch,
        step,
        config_hash,
    })
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let data = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&data).map_err(|e| match e {
        Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {}", path.display(), m)),
        other => other,
    })
}
