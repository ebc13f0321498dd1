//! Single-file checkpoints: magic, manifest length (u64 LE), JSON manifest,
//! then every tensor as little-endian `f64` in manifest order.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{PipelineError, Result, StageRecord, TrainedModel};
use crate::encoders::{EncoderConfig, Model};
use crate::rng;
use crate::synthdata::LabelSpace;

const MAGIC: &[u8; 8] = b"FGDICKPT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub version: u32,
    pub encoder: EncoderConfig,
    /// Raw pid of each identity class.
    pub pids: Vec<usize>,
    /// Raw domain id of each domain class.
    pub source_domains: Vec<usize>,
    pub home_domain_class: Vec<usize>,
    pub text_frozen: bool,
    pub provenance: Vec<StageRecord>,
    pub tensors: Vec<TensorEntry>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn bad(msg: impl Into<String>) -> PipelineError {
    PipelineError::Checkpoint(msg.into())
}

pub fn manifest_of(model: &TrainedModel) -> CheckpointManifest {
    let mut domains: Vec<(usize, usize)> =
        model.labels.domain_class.iter().map(|(&d, &c)| (c, d)).collect();
    domains.sort_unstable();
    CheckpointManifest {
        version: VERSION,
        encoder: model.model.config,
        pids: model.labels.pids.clone(),
        source_domains: domains.into_iter().map(|(_, d)| d).collect(),
        home_domain_class: model.labels.home_domain_class.clone(),
        text_frozen: model.model.text.frozen,
        provenance: model.provenance.clone(),
        tensors: model
            .model
            .named_params()
            .into_iter()
            .map(|(name, _, m)| TensorEntry {
                name,
                rows: m.nrows(),
                cols: m.ncols(),
            })
            .collect(),
    }
}

pub fn to_bytes(model: &TrainedModel) -> Vec<u8> {
    let manifest = serde_json::to_vec(&manifest_of(model)).expect("manifest serializes");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    out.extend_from_slice(&manifest);
    for (_, _, m) in model.model.named_params() {
        for v in m.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn save_checkpoint(model: &TrainedModel, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, to_bytes(model)).map_err(io_err(path))
}

pub fn from_bytes(bytes: &[u8]) -> Result<TrainedModel> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes
        .get(16..16 + len)
        .ok_or_else(|| bad("truncated manifest"))?;
    let manifest: CheckpointManifest =
        serde_json::from_slice(body).map_err(|e| bad(format!("manifest: {e}")))?;
    if manifest.version != VERSION {
        return Err(bad(format!("unsupported version {}", manifest.version)));
    }
    if manifest.home_domain_class.len() != manifest.pids.len()
        || manifest
            .home_domain_class
            .iter()
            .any(|&c| c >= manifest.source_domains.len())
    {
        return Err(bad("label manifest is inconsistent"));
    }
    let mut r = rng::stream(0, &[]);
    let mut model = Model::init(
        manifest.encoder,
        manifest.pids.len(),
        manifest.source_domains.len(),
        &mut r,
    )?;
    model.text.frozen = manifest.text_frozen;
    let mut offset = 16 + len;
    {
        let params = model.named_params_mut();
        if params.len() != manifest.tensors.len() {
            return Err(bad(format!(
                "manifest lists {} tensors, model has {}",
                manifest.tensors.len(),
                params.len()
            )));
        }
        for ((name, _, m), entry) in params.into_iter().zip(&manifest.tensors) {
            if name != entry.name || m.dim() != (entry.rows, entry.cols) {
                return Err(bad(format!(
                    "tensor {} {}x{} does not match model tensor {name} {:?}",
                    entry.name,
                    entry.rows,
                    entry.cols,
                    m.dim()
                )));
            }
            let n = m.len() * 8;
            let chunk = bytes
                .get(offset..offset + n)
                .ok_or_else(|| bad(format!("truncated data for {name}")))?;
            for (v, b) in m.iter_mut().zip(chunk.chunks_exact(8)) {
                *v = f64::from_le_bytes(b.try_into().expect("8 bytes"));
            }
            offset += n;
        }
    }
    if offset != bytes.len() {
        return Err(bad("trailing bytes after tensor data"));
    }
    let class_of: BTreeMap<usize, usize> =
        manifest.pids.iter().enumerate().map(|(k, &p)| (p, k)).collect();
    let domain_class: BTreeMap<usize, usize> = manifest
        .source_domains
        .iter()
        .enumerate()
        .map(|(k, &d)| (d, k))
        .collect();
    Ok(TrainedModel {
        model,
        labels: LabelSpace {
            pids: manifest.pids,
            class_of,
            domain_class,
            home_domain_class: manifest.home_domain_class,
        },
        provenance: manifest.provenance,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<TrainedModel> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    from_bytes(&bytes)
}
