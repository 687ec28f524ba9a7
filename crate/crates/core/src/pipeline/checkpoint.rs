use std::collections::BTreeMap;
use std::path::PathBuf;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::objectives::Stage;

/// Networks persisted in a checkpoint directory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum NetTag {
    BackgroundGen,
    GlobalCritic,
    BoundaryCritic,
    Inpainter,
    InpaintCritic,
    ObjectGen,
    StyleEncoder,
    CycleEncoder,
    ObjectCritic,
    Fusion,
    FusionCritic,
}

impl NetTag {
    pub const ALL: [NetTag; 11] = [
        NetTag::BackgroundGen,
        NetTag::GlobalCritic,
        NetTag::BoundaryCritic,
        NetTag::Inpainter,
        NetTag::InpaintCritic,
        NetTag::ObjectGen,
        NetTag::StyleEncoder,
        NetTag::CycleEncoder,
        NetTag::ObjectCritic,
        NetTag::Fusion,
        NetTag::FusionCritic,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            NetTag::BackgroundGen => "G_B",
            NetTag::GlobalCritic => "D_G",
            NetTag::BoundaryCritic => "D_BAP",
            NetTag::Inpainter => "G_OI",
            NetTag::InpaintCritic => "D_OI",
            NetTag::ObjectGen => "G_OG",
            NetTag::StyleEncoder => "E_s",
            NetTag::CycleEncoder => "E_s_prime",
            NetTag::ObjectCritic => "D_obj",
            NetTag::Fusion => "F_net",
            NetTag::FusionCritic => "D_F",
        }
    }

    /// Distinct initialization stream per network.
    pub fn seed(self, base: u64) -> u64 {
        let idx = Self::ALL.iter().position(|&t| t == self).expect("listed") as u64;
        base.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(idx + 1)
    }

    pub fn for_stage(stage: Stage) -> &'static [NetTag] {
        match stage {
            Stage::Background => &[NetTag::BackgroundGen, NetTag::GlobalCritic, NetTag::BoundaryCritic],
            Stage::ObjectInpaint => &[NetTag::Inpainter, NetTag::InpaintCritic],
            Stage::ObjectGen => &[NetTag::ObjectGen, NetTag::StyleEncoder, NetTag::CycleEncoder, NetTag::ObjectCritic],
            Stage::Fusion => &[NetTag::Fusion, NetTag::FusionCritic],
        }
    }

    pub fn stage(self) -> Stage {
        *[Stage::Background, Stage::ObjectInpaint, Stage::ObjectGen, Stage::Fusion]
            .iter()
            .find(|&&s| Self::for_stage(s).contains(&self))
            .expect("every tag belongs to a stage")
    }
}

impl std::fmt::Display for NetTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset into the network's `.bin` file.
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkEntry {
    pub file: String,
    pub checksum: String,
    pub tensors: Vec<TensorEntry>,
}

/// `manifest.json` of a checkpoint directory.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub networks: BTreeMap<String, NetworkEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bank: Option<String>,
}

/// A checkpoint directory bound to one architecture hash.
#[derive(Debug, Clone)]
pub struct CheckpointSet {
    pub dir: PathBuf,
    pub config_hash: String,
}

fn dtype_name(d: DType) -> Result<&'static str> {
    match d {
        DType::F32 => Ok("f32"),
        DType::F64 => Ok("f64"),
        other => Err(Error::Checkpoint(format!("unsupported dtype {other:?}"))),
    }
}

impl CheckpointSet {
    pub fn new(dir: impl Into<PathBuf>, config_hash: impl Into<String>) -> Self {
        Self {
            dir: dir.into(),
            config_hash: config_hash.into(),
        }
    }

    fn manifest_path(&self) -> PathBuf {
        self.dir.join("manifest.json")
    }

    /// Reads the manifest; a missing file yields an empty one for this hash.
    pub fn manifest(&self) -> Result<Manifest> {
        let path = self.manifest_path();
        let manifest = match std::fs::read(&path) {
            Ok(bytes) => serde_json::from_slice::<Manifest>(&bytes)?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Ok(Manifest {
                    config_hash: self.config_hash.clone(),
                    ..Default::default()
                })
            }
            Err(e) => return Err(Error::io(&path, e)),
        };
        if manifest.config_hash != self.config_hash {
            return Err(Error::Checkpoint(format!(
                "{} was written for configuration {}, current is {}",
                self.dir.display(),
                manifest.config_hash,
                self.config_hash
            )));
        }
        Ok(manifest)
    }

    fn write_manifest(&self, m: &Manifest) -> Result<()> {
        let path = self.manifest_path();
        let tmp = path.with_extension("json.tmp");
        std::fs::write(&tmp, serde_json::to_vec_pretty(m)?).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))
    }

    pub fn contains(&self, tag: NetTag) -> Result<bool> {
        Ok(self.manifest()?.networks.contains_key(tag.as_str()))
    }

    pub fn save(&self, tag: NetTag, store: &ParamStore) -> Result<()> {
        std::fs::create_dir_all(&self.dir).map_err(|e| Error::io(&self.dir, e))?;
        let mut manifest = self.manifest()?;
        let dtype = dtype_name(store.dtype())?;
        let mut bytes = Vec::new();
        let mut tensors = Vec::new();
        for (name, var) in store.all_named() {
            let t = var.as_tensor().flatten_all()?;
            tensors.push(TensorEntry {
                name: name.clone(),
                shape: var.dims().to_vec(),
                dtype: dtype.to_string(),
                offset: bytes.len() as u64,
            });
            match store.dtype() {
                DType::F64 => t.to_vec1::<f64>()?.iter().for_each(|v| bytes.extend_from_slice(&v.to_le_bytes())),
                _ => t.to_vec1::<f32>()?.iter().for_each(|v| bytes.extend_from_slice(&v.to_le_bytes())),
            }
        }
        let file = format!("{}.bin", tag.as_str());
        let path = self.dir.join(&file);
        std::fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
        manifest.networks.insert(
            tag.as_str().to_string(),
            NetworkEntry {
                file,
                checksum: store.checksum()?,
                tensors,
            },
        );
        self.write_manifest(&manifest)
    }

    /// Overwrites every tensor of `store` from the saved network.
    pub fn load(&self, tag: NetTag, store: &ParamStore) -> Result<()> {
        let manifest = self.manifest()?;
        let entry = manifest.networks.get(tag.as_str()).ok_or_else(|| Error::MissingCheckpoint {
            stage: format!("{} ({})", tag.stage(), tag),
            path: self.manifest_path(),
        })?;
        let path = self.dir.join(&entry.file);
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let mut tensors = BTreeMap::new();
        for t in &entry.tensors {
            let n: usize = t.shape.iter().product();
            let start = t.offset as usize;
            let width = match t.dtype.as_str() {
                "f32" => 4,
                "f64" => 8,
                other => return Err(Error::Checkpoint(format!("tensor {}: unknown dtype {other}", t.name))),
            };
            let raw = bytes
                .get(start..start + n * width)
                .ok_or_else(|| Error::Checkpoint(format!("tensor {} truncated in {}", t.name, path.display())))?;
            let tensor = if width == 4 {
                let v: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
                Tensor::from_vec(v, t.shape.as_slice(), &Device::Cpu)?
            } else {
                let v: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
                Tensor::from_vec(v, t.shape.as_slice(), &Device::Cpu)?
            };
            tensors.insert(t.name.clone(), tensor);
        }
        store.load_from(|name| tensors.get(name).cloned())
    }

    pub fn set_bank(&self, file: &str) -> Result<()> {
        let mut m = self.manifest()?;
        m.bank = Some(file.to_string());
        self.write_manifest(&m)
    }

    pub fn bank_path(&self) -> Result<PathBuf> {
        let m = self.manifest()?;
        let file = m.bank.ok_or_else(|| Error::MissingCheckpoint {
            stage: "bank".into(),
            path: self.manifest_path(),
        })?;
        Ok(self.dir.join(file))
    }

    /// SHA-256 of the manifest bytes; identifies a concrete set of weights.
    pub fn fingerprint(&self) -> Result<String> {
        use sha2::{Digest, Sha256};
        let path = self.manifest_path();
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        Ok(hex::encode(Sha256::digest(bytes)))
    }
}
