//! Checkpoints: `manifest.json` holds the configuration, seed and tensor
//! index; `tensors.bin` holds the tensor records back to back.

use std::fs;
use std::io::{Cursor, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::nn::{ParamKind, ParamStore};
use crate::tensor::Tensor;

pub const MANIFEST: &str = "manifest.json";
pub const TENSORS: &str = "tensors.bin";
const FORMAT: &str = "spikinghash-checkpoint-v1";

#[derive(Debug, Serialize, Deserialize)]
struct IndexEntry {
    name: String,
    /// `None` for auxiliary tensors that are not model parameters.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    kind: Option<ParamKind>,
    shape: Vec<usize>,
    offset: u64,
    bytes: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    config: ModelConfig,
    seed: u64,
    parameters: Vec<IndexEntry>,
    #[serde(default)]
    extra: Vec<IndexEntry>,
    #[serde(default)]
    state: serde_json::Value,
}

/// Everything needed to rebuild a model, plus optional auxiliary tensors
/// and free-form state for resuming training.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub seed: u64,
    pub params: ParamStore,
    pub extra: Vec<(String, Tensor)>,
    pub state: serde_json::Value,
}

impl Checkpoint {
    pub fn from_model(model: &Model) -> Self {
        Self {
            config: model.config.clone(),
            seed: model.seed,
            params: model.store.clone(),
            extra: Vec::new(),
            state: serde_json::Value::Null,
        }
    }

    /// Rebuilds the architecture from the configuration and installs the
    /// stored tensors.
    pub fn to_model(&self) -> Result<Model> {
        let mut model = Model::build(self.config.clone(), self.seed)?;
        model.store.load_from(&self.params)?;
        Ok(model)
    }

    /// Writes both files into `dir`, creating it if needed. Each file is
    /// written under a temporary name and renamed into place, so an
    /// interrupted save leaves any earlier checkpoint readable.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut blob = Vec::new();
        let mut record = |name: &str, kind: Option<ParamKind>, t: &Tensor| -> Result<IndexEntry> {
            let offset = blob.len() as u64;
            t.write_to(&mut blob)?;
            Ok(IndexEntry {
                name: name.to_string(),
                kind,
                shape: t.shape().to_vec(),
                offset,
                bytes: blob.len() as u64 - offset,
            })
        };
        let parameters = self
            .params
            .entries()
            .iter()
            .map(|e| record(&e.name, Some(e.kind), &e.value))
            .collect::<Result<Vec<_>>>()?;
        let extra = self.extra.iter().map(|(n, t)| record(n, None, t)).collect::<Result<Vec<_>>>()?;
        let manifest = Manifest {
            format: FORMAT.to_string(),
            config: self.config.clone(),
            seed: self.seed,
            parameters,
            extra,
            state: self.state.clone(),
        };
        let mut json = serde_json::to_vec_pretty(&manifest)?;
        json.push(b'\n');
        write_atomic(&dir.join(TENSORS), &blob)?;
        write_atomic(&dir.join(MANIFEST), &json)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST))?)?;
        if manifest.format != FORMAT {
            return Err(Error::Format(format!("unknown checkpoint format {:?}", manifest.format)));
        }
        let blob = fs::read(dir.join(TENSORS))?;
        let read = |e: &IndexEntry| -> Result<Tensor> {
            let end = e.offset.checked_add(e.bytes).filter(|&end| end <= blob.len() as u64);
            let Some(end) = end else {
                return Err(Error::Format(format!("tensor {} lies outside {TENSORS}", e.name)));
            };
            let mut cur = Cursor::new(&blob[e.offset as usize..end as usize]);
            let t = Tensor::read_from(&mut cur)?;
            if t.shape() != e.shape.as_slice() || cur.position() != e.bytes {
                return Err(Error::Format(format!("tensor {} does not match its index entry", e.name)));
            }
            Ok(t)
        };
        let mut params = ParamStore::new();
        for e in &manifest.parameters {
            let kind = e.kind.ok_or_else(|| Error::Format(format!("parameter {} has no kind", e.name)))?;
            params.add(e.name.clone(), kind, read(e)?)?;
        }
        let extra = manifest.extra.iter().map(|e| Ok((e.name.clone(), read(e)?))).collect::<Result<Vec<_>>>()?;
        Ok(Self { config: manifest.config, seed: manifest.seed, params, extra, state: manifest.state })
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = Path::new(&tmp);
    {
        let mut f = fs::File::create(tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(tmp, path)?;
    Ok(())
}
