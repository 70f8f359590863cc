//! Versioned checkpoint container: magic, format version, a JSON header
//! (config, config hash, iteration, seed, tensor directory) and the tensors
//! as little-endian `f32` blobs in directory order.

use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use indexmap::IndexMap;
use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::encoders::{DistinctiveEncoder, TextureEncoder};
use crate::error::{Error, Result};
use crate::generator::Generator;
use crate::model::StyleModel;
use crate::nn::ParamStore;

pub const MAGIC: &[u8; 8] = b"IDSTYCK\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    Classifier,
    Generator,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SectionEntry {
    pub name: String,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub kind: CheckpointKind,
    pub config_hash: String,
    pub iteration: u64,
    pub seed: u64,
    pub config: TrainConfig,
    pub domain_names: Vec<String>,
    pub sections: Vec<SectionEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: CheckpointKind,
    pub iteration: u64,
    pub config: TrainConfig,
    pub domain_names: Vec<String>,
    /// Named subnetworks: `classifier`, and for generator checkpoints also
    /// `texture`, `generator`, `adapters`.
    pub sections: IndexMap<String, ParamStore>,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::CheckpointIoFailure(msg.into())
}

impl Checkpoint {
    pub fn classifier(config: &TrainConfig, domain_names: &[String], enc: &DistinctiveEncoder, iteration: u64) -> Self {
        let mut sections = IndexMap::new();
        sections.insert("classifier".to_string(), enc.params.clone());
        Self { kind: CheckpointKind::Classifier, iteration, config: config.clone(), domain_names: domain_names.to_vec(), sections }
    }

    pub fn from_model(model: &StyleModel, iteration: u64) -> Self {
        let mut sections = IndexMap::new();
        sections.insert("classifier".to_string(), model.classifier.params.clone());
        sections.insert("texture".to_string(), model.texture.params.clone());
        sections.insert("generator".to_string(), model.generator.params.clone());
        sections.insert("adapters".to_string(), model.adapters.clone());
        Self {
            kind: CheckpointKind::Generator,
            iteration,
            config: model.config.clone(),
            domain_names: model.domain_names.clone(),
            sections,
        }
    }

    fn section(&self, name: &str) -> Result<&ParamStore> {
        self.sections.get(name).ok_or_else(|| corrupt(format!("missing section `{name}`")))
    }

    pub fn classifier_encoder(&self) -> Result<DistinctiveEncoder> {
        let cfg = self.config.classifier_config(self.domain_names.len());
        DistinctiveEncoder::from_params(cfg, self.section("classifier")?.clone())
    }

    /// Rebuilds the full model; classifier-only checkpoints are untrained.
    pub fn to_model(&self) -> Result<StyleModel> {
        if self.kind != CheckpointKind::Generator || self.iteration == 0 {
            return Err(Error::UntrainedCheckpoint);
        }
        let texture = TextureEncoder::from_params(self.config.texture_config(), self.section("texture")?.clone())?;
        let generator = Generator::from_params(self.config.generator_config()?, self.section("generator")?.clone())?;
        StyleModel::from_parts(
            self.config.clone(),
            self.domain_names.clone(),
            texture,
            self.classifier_encoder()?,
            generator,
            self.section("adapters")?.clone(),
        )
    }

    /// Errors when `expected` hashes differently from the stored config,
    /// unless `force`.
    pub fn check_config(&self, expected: &TrainConfig, force: bool) -> Result<()> {
        let (want, have) = (expected.hash(), self.config.hash());
        if want != have && !force {
            return Err(Error::ConfigHashMismatch { expected: want, found: have });
        }
        Ok(())
    }

    pub fn header(&self) -> CheckpointHeader {
        CheckpointHeader {
            format_version: FORMAT_VERSION,
            kind: self.kind,
            config_hash: self.config.hash(),
            iteration: self.iteration,
            seed: self.config.seed,
            config: self.config.clone(),
            domain_names: self.domain_names.clone(),
            sections: self
                .sections
                .iter()
                .map(|(name, store)| SectionEntry {
                    name: name.clone(),
                    tensors: store
                        .iter()
                        .map(|(t, a)| TensorEntry { name: t.clone(), shape: a.shape().to_vec() })
                        .collect(),
                })
                .collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header()).expect("header serialises");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.write_u32::<LittleEndian>(FORMAT_VERSION).expect("vec write");
        out.write_u64::<LittleEndian>(header.len() as u64).expect("vec write");
        out.extend_from_slice(&header);
        for store in self.sections.values() {
            for (_, a) in store.iter() {
                for &v in a.iter() {
                    out.write_f32::<LittleEndian>(v).expect("vec write");
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor::new(bytes);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| corrupt("truncated magic"))?;
        if &magic != MAGIC {
            return Err(corrupt("not a checkpoint (bad magic)"));
        }
        let version = r.read_u32::<LittleEndian>().map_err(|_| corrupt("truncated version"))?;
        if version != FORMAT_VERSION {
            return Err(corrupt(format!("unsupported format version {version}")));
        }
        let len = r.read_u64::<LittleEndian>().map_err(|_| corrupt("truncated header length"))? as usize;
        let start = r.position() as usize;
        let raw = bytes.get(start..start + len).ok_or_else(|| corrupt("truncated header"))?;
        let header: CheckpointHeader = serde_json::from_slice(raw).map_err(|e| corrupt(format!("header: {e}")))?;
        if header.config.hash() != header.config_hash {
            return Err(Error::ConfigHashMismatch { expected: header.config_hash, found: header.config.hash() });
        }
        r.set_position((start + len) as u64);
        let mut sections = IndexMap::new();
        for sec in &header.sections {
            let mut store = ParamStore::new();
            for t in &sec.tensors {
                let n: usize = t.shape.iter().product();
                let mut data = vec![0f32; n];
                r.read_f32_into::<LittleEndian>(&mut data)
                    .map_err(|_| corrupt(format!("truncated tensor `{}/{}`", sec.name, t.name)))?;
                store.insert(t.name.clone(), ArrayD::from_shape_vec(IxDyn(&t.shape), data).expect("sized"));
            }
            sections.insert(sec.name.clone(), store);
        }
        if (r.position() as usize) != bytes.len() {
            return Err(corrupt("trailing bytes after tensors"));
        }
        Ok(Self {
            kind: header.kind,
            iteration: header.iteration,
            config: header.config,
            domain_names: header.domain_names,
            sections,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| corrupt(format!("{}: {e}", parent.display())))?;
        }
        let mut f = std::fs::File::create(path).map_err(|e| corrupt(format!("{}: {e}", path.display())))?;
        f.write_all(&self.to_bytes()).map_err(|e| corrupt(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let bytes = std::fs::read(path).map_err(|e| corrupt(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names() -> Vec<String> {
        vec!["a".into(), "b".into()]
    }

    fn model() -> StyleModel {
        let cfg = TrainConfig::desk();
        let cls = DistinctiveEncoder::new(cfg.classifier_config(2), 4).unwrap();
        StyleModel::new(cfg, names(), cls).unwrap()
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let ck = Checkpoint::from_model(&model(), 7);
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.header().seed, 0);

        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub/m.ckpt");
        ck.save(&p).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), bytes);
        let m = Checkpoint::load(&p).unwrap().to_model().unwrap();
        assert_eq!(m.generator.params, ck.sections["generator"]);
    }

    #[test]
    fn config_hash_is_enforced_unless_forced() {
        let ck = Checkpoint::from_model(&model(), 7);
        let other = TrainConfig { lambda_ccx: 0.1, ..TrainConfig::desk() };
        assert!(matches!(ck.check_config(&other, false), Err(Error::ConfigHashMismatch { .. })));
        ck.check_config(&other, true).unwrap();
        ck.check_config(&TrainConfig::desk(), false).unwrap();

        let bytes = ck.to_bytes();
        let len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let text = String::from_utf8(bytes[20..20 + len].to_vec()).unwrap();
        let tampered = text.replacen("\"lambda_ccx\":0.5", "\"lambda_ccx\":0.7", 1);
        assert_ne!(tampered, text);
        let mut b2 = bytes[..20].to_vec();
        b2.extend_from_slice(tampered.as_bytes());
        b2.extend_from_slice(&bytes[20 + len..]);
        assert!(matches!(Checkpoint::from_bytes(&b2), Err(Error::ConfigHashMismatch { .. })));
    }

    #[test]
    fn corrupt_inputs_and_untrained_checkpoints() {
        let ck = Checkpoint::from_model(&model(), 7);
        let bytes = ck.to_bytes();
        assert!(matches!(Checkpoint::from_bytes(b"nope"), Err(Error::CheckpointIoFailure(_))));
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 4]), Err(Error::CheckpointIoFailure(_))));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
        assert!(matches!(Checkpoint::load(Path::new("/nonexistent/x.ckpt")), Err(Error::MissingFile(_))));

        let cls = Checkpoint::classifier(&TrainConfig::desk(), &names(), &model().classifier, 30);
        assert!(matches!(cls.to_model(), Err(Error::UntrainedCheckpoint)));
        assert_eq!(cls.classifier_encoder().unwrap().params, model().classifier.params);
        assert!(matches!(Checkpoint::from_model(&model(), 0).to_model(), Err(Error::UntrainedCheckpoint)));
    }
}
