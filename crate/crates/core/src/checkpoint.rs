//! Named-tensor checkpoint archive.
//!
//! Layout: magic `AUCK`, little-endian u32 version, u32 entry count; per
//! entry a u16 name length + UTF-8 name, u8 rank, rank u32 dims, then the
//! f32 little-endian payload. Entries are written in name order, so
//! save -> load -> save is byte-identical.
//!
//! The config snapshot and epoch counter ride along as reserved entries
//! (`__config__` holds the config JSON bytes widened to f32, `__epoch__`
//! a single counter); reserved names never collide with parameters, which
//! always carry a module prefix. Payloads are f32 regardless of the
//! model's compute precision. Writes go through a temp file + rename.

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::tensor::{Real, Tensor};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

const MAGIC: &[u8; 4] = b"AUCK";
pub const CHECKPOINT_VERSION: u32 = 1;

const CONFIG_ENTRY: &str = "__config__";
const EPOCH_ENTRY: &str = "__epoch__";

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub version: u32,
    pub epoch: u32,
    pub config: ModelConfig,
    /// Parameter name -> tensor, sorted by name.
    pub params: BTreeMap<String, Tensor<f32>>,
}

impl Checkpoint {
    pub fn from_model<T: Real>(model: &Model<T>, epoch: u32) -> Self {
        let mut params = BTreeMap::new();
        for (_, p) in model.store.iter() {
            params.insert(p.name.clone(), p.value.cast::<f32>());
        }
        Checkpoint {
            version: CHECKPOINT_VERSION,
            epoch,
            config: model.cfg.clone(),
            params,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut entries: BTreeMap<String, Tensor<f32>> = self.params.clone();
        let config_json = serde_json::to_string(&self.config).expect("config serializes");
        let config_data: Vec<f32> = config_json.bytes().map(|b| b as f32).collect();
        entries.insert(
            CONFIG_ENTRY.into(),
            Tensor::from_parts(vec![config_data.len().max(1)], if config_data.is_empty() { vec![0.0] } else { config_data }),
        );
        entries.insert(
            EPOCH_ENTRY.into(),
            Tensor::from_parts(vec![1], vec![self.epoch as f32]),
        );

        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
        for (name, tensor) in &entries {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(tensor.rank() as u8);
            for &d in tensor.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        let magic = cur.take(4)?;
        if magic != MAGIC {
            return Err(Error::Checkpoint {
                offset: 0,
                msg: format!("bad magic {magic:?}, expected {MAGIC:?}"),
            });
        }
        let version = cur.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint {
                offset: 4,
                msg: format!("unsupported version {version}, expected {CHECKPOINT_VERSION}"),
            });
        }
        let count = cur.u32()? as usize;
        let mut entries: BTreeMap<String, Tensor<f32>> = BTreeMap::new();
        for _ in 0..count {
            let name_off = cur.pos;
            let name_len = cur.u16()? as usize;
            let name_bytes = cur.take(name_len)?;
            let name = std::str::from_utf8(name_bytes)
                .map_err(|_| Error::Checkpoint {
                    offset: name_off,
                    msg: "entry name is not UTF-8".into(),
                })?
                .to_string();
            let rank = cur.u8()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                let dim_off = cur.pos;
                let d = cur.u32()? as usize;
                if d == 0 {
                    return Err(Error::Checkpoint {
                        offset: dim_off,
                        msg: format!("zero extent in entry `{name}`"),
                    });
                }
                shape.push(d);
            }
            let numel: usize = shape.iter().product();
            let payload_off = cur.pos;
            let mut data = Vec::with_capacity(numel);
            for _ in 0..numel {
                data.push(f32::from_le_bytes(cur.take(4)?.try_into().unwrap()));
            }
            if !data.iter().all(|v| v.is_finite()) {
                return Err(Error::Checkpoint {
                    offset: payload_off,
                    msg: format!("non-finite payload in entry `{name}`"),
                });
            }
            if entries.insert(name.clone(), Tensor::from_parts(shape, data)).is_some() {
                return Err(Error::Checkpoint {
                    offset: name_off,
                    msg: format!("duplicate entry `{name}`"),
                });
            }
        }
        if cur.pos != bytes.len() {
            return Err(Error::Checkpoint {
                offset: cur.pos,
                msg: format!("{} trailing bytes after last entry", bytes.len() - cur.pos),
            });
        }

        let config_entry = entries.remove(CONFIG_ENTRY).ok_or(Error::Checkpoint {
            offset: bytes.len(),
            msg: "missing config entry".into(),
        })?;
        let config_bytes: Vec<u8> = config_entry.data().iter().map(|&v| v as u8).collect();
        let config: ModelConfig =
            serde_json::from_slice(&config_bytes).map_err(|e| Error::Checkpoint {
                offset: bytes.len(),
                msg: format!("config entry does not parse: {e}"),
            })?;
        let epoch_entry = entries.remove(EPOCH_ENTRY).ok_or(Error::Checkpoint {
            offset: bytes.len(),
            msg: "missing epoch entry".into(),
        })?;
        let epoch = epoch_entry.data()[0] as u32;

        Ok(Checkpoint {
            version,
            epoch,
            config,
            params: entries,
        })
    }

    /// Atomic write: temp file in the same directory, then rename.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.encode();
        let dir = path.parent().unwrap_or_else(|| Path::new("."));
        let tmp = dir.join(format!(
            ".{}.tmp",
            path.file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| "checkpoint".into())
        ));
        {
            let mut f = std::fs::File::create(&tmp)
                .map_err(|e| Error::io(tmp.display().to_string(), e))?;
            f.write_all(&bytes)
                .map_err(|e| Error::io(tmp.display().to_string(), e))?;
            f.sync_all()
                .map_err(|e| Error::io(tmp.display().to_string(), e))?;
        }
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes =
            std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::decode(&bytes)
    }

    /// Copy all parameters into an existing model. The name sets must
    /// match exactly; mismatches are reported by name.
    pub fn load_into<T: Real>(&self, model: &mut Model<T>) -> Result<()> {
        let model_names: Vec<String> =
            model.store.iter().map(|(_, p)| p.name.clone()).collect();
        let missing: Vec<&String> = model_names
            .iter()
            .filter(|n| !self.params.contains_key(*n))
            .collect();
        if !missing.is_empty() {
            return Err(Error::Checkpoint {
                offset: 0,
                msg: format!("checkpoint is missing parameters: {missing:?}"),
            });
        }
        let unknown: Vec<&String> = self
            .params
            .keys()
            .filter(|n| !model_names.iter().any(|m| m == *n))
            .collect();
        if !unknown.is_empty() {
            return Err(Error::Checkpoint {
                offset: 0,
                msg: format!("checkpoint has unknown parameters: {unknown:?}"),
            });
        }
        self.copy_params(model, |_| true)
    }

    /// Copy only backbone parameters (for the pretrained-backbone toggle).
    /// The checkpoint must contain every backbone parameter of the model.
    pub fn load_backbone_into<T: Real>(&self, model: &mut Model<T>) -> Result<()> {
        let missing: Vec<String> = model
            .store
            .iter()
            .filter(|(_, p)| p.name.starts_with("backbone."))
            .filter(|(_, p)| !self.params.contains_key(&p.name))
            .map(|(_, p)| p.name.clone())
            .collect();
        if !missing.is_empty() {
            return Err(Error::Checkpoint {
                offset: 0,
                msg: format!("checkpoint is missing backbone parameters: {missing:?}"),
            });
        }
        self.copy_params(model, |name| name.starts_with("backbone."))
    }

    fn copy_params<T: Real>(
        &self,
        model: &mut Model<T>,
        select: impl Fn(&str) -> bool,
    ) -> Result<()> {
        let ids: Vec<(crate::params::ParamId, String, Vec<usize>)> = model
            .store
            .iter()
            .filter(|(_, p)| select(&p.name))
            .map(|(id, p)| (id, p.name.clone(), p.value.shape().to_vec()))
            .collect();
        for (id, name, shape) in ids {
            let tensor = &self.params[&name];
            if tensor.shape() != shape.as_slice() {
                return Err(Error::Checkpoint {
                    offset: 0,
                    msg: format!(
                        "shape mismatch for `{name}`: checkpoint {:?} vs model {:?}",
                        tensor.shape(),
                        shape
                    ),
                });
            }
            model.store.set_value(id, tensor.cast::<T>())?;
        }
        Ok(())
    }

    /// Rebuild a model from the stored config, then load all parameters.
    pub fn into_model<T: Real>(&self) -> Result<Model<T>> {
        let mut cfg = self.config.clone();
        // the stored weights already include any pretraining
        cfg.load_pretrained_backbone = false;
        cfg.pretrained_backbone_path = None;
        let mut model = Model::build(cfg)?;
        let mut full = self.clone();
        full.config = model.cfg.clone();
        full.load_into(&mut model)?;
        Ok(model)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint {
                offset: self.pos,
                msg: format!(
                    "truncated: wanted {n} bytes, {} remain",
                    self.bytes.len() - self.pos
                ),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}
