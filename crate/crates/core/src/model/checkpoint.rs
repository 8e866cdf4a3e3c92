use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, Normalization, TrafficModel};
use crate::autodiff::Tensor;
use crate::dataset::SynthConfig;
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"DYNAFLOW";
const VERSION: u32 = 1;

/// A trained network, or a ground-truth oracle over a synthetic world.
#[derive(Debug, Clone, PartialEq)]
pub enum Checkpoint {
    Network(Box<TrafficModel>),
    Oracle(SynthConfig),
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum Header {
    Network {
        config: ModelConfig,
        normalization: Normalization,
        params: Vec<String>,
    },
    Oracle {
        world: SynthConfig,
    },
}

impl Checkpoint {
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let header = match self {
            Checkpoint::Network(m) => Header::Network {
                config: m.config.clone(),
                normalization: m.norm,
                params: m.params.iter().map(|(_, p)| p.name.clone()).collect(),
            },
            Checkpoint::Oracle(world) => Header::Oracle {
                world: world.clone(),
            },
        };
        let json = serde_json::to_vec(&header)?;
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        if let Checkpoint::Network(m) = self {
            for (_, p) in m.params.iter() {
                p.value.write_to(&mut w)?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = crate::autodiff::read_u32(&mut r)?;
        if version != VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len)?;
        let len = u64::from_le_bytes(len) as usize;
        if len > 1 << 26 {
            return Err(Error::Format("checkpoint header too large".into()));
        }
        let mut json = vec![0u8; len];
        r.read_exact(&mut json)?;
        match serde_json::from_slice(&json)? {
            Header::Oracle { world } => Ok(Checkpoint::Oracle(world)),
            Header::Network {
                config,
                normalization,
                params,
            } => {
                let mut model = TrafficModel::build(&config, 0)?;
                model.norm = normalization;
                if params.len() != model.params.len() {
                    return Err(Error::Format(format!(
                        "checkpoint lists {} tensors, architecture has {}",
                        params.len(),
                        model.params.len()
                    )));
                }
                for name in params {
                    let t = Tensor::read_from(&mut r)?;
                    let id = model
                        .params
                        .id(&name)
                        .ok_or_else(|| Error::Format(format!("unknown tensor {name}")))?;
                    let slot = &mut model.params.get_mut(id).value;
                    if slot.shape() != t.shape() {
                        return Err(Error::Format(format!(
                            "tensor {name} has shape {:?}, expected {:?}",
                            t.shape(),
                            slot.shape()
                        )));
                    }
                    *slot = t;
                }
                Ok(Checkpoint::Network(Box::new(model)))
            }
        }
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    ckpt.write_to(&mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let f = File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingArtifact(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    Checkpoint::read_from(BufReader::new(f))
}
