//! Bit-exact persistence of named parameter tables: a JSON manifest listing
//! ordered tensor records (name, dtype, shape, offset, length, checksum) and
//! a raw little-endian f32 blob, written as an atomic `.json` + `.bin` pair.

use crate::discriminator::Discriminator;
use crate::error::{Error, Result};
use crate::generator::{Generator, ModelConfig};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};

/// Normative format identifier of manifest/blob pairs.
pub const FORMAT_VERSION: &str = "styletune-ckpt-v1";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub length: u64,
    pub checksum: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: String,
    pub model_config: ModelConfig,
    pub tensors: Vec<TensorRecord>,
}

/// In-memory checkpoint: model config plus the ordered named-tensor table.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

fn tensor_bytes(t: &Tensor<f32>) -> Vec<u8> {
    let mut bytes = Vec::with_capacity(t.numel() * 4);
    for v in t.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    bytes
}

fn checksum(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Resolve the `.json`/`.bin` pair for a checkpoint stem. A trailing `.json`
/// or `.bin` on the given path is ignored.
pub fn pair_paths(path: &Path) -> (PathBuf, PathBuf) {
    let stem = match path.extension().and_then(|e| e.to_str()) {
        Some("json") | Some("bin") => path.with_extension(""),
        _ => path.to_path_buf(),
    };
    (
        stem.with_extension(match stem.extension().and_then(|e| e.to_str()) {
            Some(e) => format!("{e}.json"),
            None => "json".into(),
        }),
        stem.with_extension(match stem.extension().and_then(|e| e.to_str()) {
            Some(e) => format!("{e}.bin"),
            None => "bin".into(),
        }),
    )
}

impl Checkpoint {
    /// Snapshot generator (and optionally discriminator) parameters.
    pub fn from_models(gen: &Generator<f32>, disc: Option<&Discriminator<f32>>) -> Self {
        let mut tensors = gen.list_parameters();
        if let Some(d) = disc {
            tensors.extend(d.list_parameters());
        }
        Self {
            config: gen.config().clone(),
            tensors,
        }
    }

    pub fn names(&self) -> Vec<&str> {
        self.tensors.iter().map(|(n, _)| n.as_str()).collect()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn tensor_map(&self) -> HashMap<&str, &Tensor<f32>> {
        self.tensors
            .iter()
            .map(|(n, t)| (n.as_str(), t))
            .collect()
    }

    pub fn has_discriminator(&self) -> bool {
        self.tensors.iter().any(|(n, _)| n.starts_with("disc."))
    }

    pub fn to_generator(&self) -> Result<Generator<f32>> {
        let table: HashMap<String, Tensor<f32>> = self
            .tensors
            .iter()
            .filter(|(n, _)| !n.starts_with("disc."))
            .map(|(n, t)| (n.clone(), t.clone()))
            .collect();
        Generator::from_table(&self.config, &table)
    }

    pub fn to_discriminator(&self) -> Result<Discriminator<f32>> {
        if !self.has_discriminator() {
            return Err(Error::IncompatibleCheckpoint(
                "checkpoint holds no discriminator tensors".into(),
            ));
        }
        let table: HashMap<String, Tensor<f32>> = self
            .tensors
            .iter()
            .filter(|(n, _)| n.starts_with("disc."))
            .map(|(n, t)| (n.clone(), t.clone()))
            .collect();
        Discriminator::from_table(&self.config, &table)
    }

    /// Error unless this checkpoint was built for exactly `cfg`.
    pub fn ensure_matches(&self, cfg: &ModelConfig) -> Result<()> {
        if &self.config != cfg {
            return Err(Error::IncompatibleCheckpoint(format!(
                "checkpoint config {:?} does not match requested {:?}",
                self.config, cfg
            )));
        }
        Ok(())
    }

    /// True when name/shape tables agree entry for entry (the precondition
    /// for diffing or swapping two checkpoints).
    pub fn same_table(&self, other: &Checkpoint) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|((an, at), (bn, bt))| an == bn && at.shape() == bt.shape())
    }

    /// Write the manifest/blob pair atomically (temp files + rename).
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for (name, _) in &self.tensors {
            if !seen.insert(name) {
                return Err(Error::InvalidArgument(format!(
                    "duplicate tensor name {name}"
                )));
            }
        }
        let (json_path, bin_path) = pair_paths(path);
        if let Some(dir) = json_path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir)?;
            }
        }
        let mut blob = Vec::new();
        let mut records = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            let bytes = tensor_bytes(t);
            records.push(TensorRecord {
                name: name.clone(),
                dtype: "f32".into(),
                shape: t.shape().to_vec(),
                offset: blob.len() as u64,
                length: bytes.len() as u64,
                checksum: checksum(&bytes),
            });
            blob.extend_from_slice(&bytes);
        }
        let manifest = Manifest {
            format_version: FORMAT_VERSION.into(),
            model_config: self.config.clone(),
            tensors: records,
        };
        let json_tmp = json_path.with_extension("json.tmp");
        let bin_tmp = bin_path.with_extension("bin.tmp");
        let write = || -> Result<()> {
            let mut jf = std::fs::File::create(&json_tmp)?;
            serde_json::to_writer_pretty(&mut jf, &manifest)?;
            jf.write_all(b"\n")?;
            jf.sync_all()?;
            let mut bf = std::fs::File::create(&bin_tmp)?;
            bf.write_all(&blob)?;
            bf.sync_all()?;
            std::fs::rename(&json_tmp, &json_path)?;
            std::fs::rename(&bin_tmp, &bin_path)?;
            Ok(())
        };
        write().inspect_err(|_| {
            let _ = std::fs::remove_file(&json_tmp);
            let _ = std::fs::remove_file(&bin_tmp);
        })
    }

    /// Load and fully verify a manifest/blob pair.
    pub fn load(path: &Path) -> Result<Self> {
        let (json_path, bin_path) = pair_paths(path);
        let manifest_text = std::fs::read_to_string(&json_path)?;
        let manifest: Manifest = serde_json::from_str(&manifest_text)
            .map_err(|e| Error::Corruption(format!("manifest unreadable: {e}")))?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::UnsupportedVersion(format!(
                "expected {FORMAT_VERSION}, found {}",
                manifest.format_version
            )));
        }
        let blob = std::fs::read(&bin_path)?;
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        let mut cursor = 0u64;
        let mut seen = std::collections::HashSet::new();
        for rec in &manifest.tensors {
            if !seen.insert(rec.name.clone()) {
                return Err(Error::Corruption(format!(
                    "duplicate tensor name {}",
                    rec.name
                )));
            }
            if rec.dtype != "f32" {
                return Err(Error::UnsupportedVersion(format!(
                    "tensor {} has dtype {}, only f32 is supported",
                    rec.name, rec.dtype
                )));
            }
            if rec.offset != cursor {
                return Err(Error::Corruption(format!(
                    "tensor {} offset {} is not contiguous (expected {})",
                    rec.name, rec.offset, cursor
                )));
            }
            let numel: usize = rec.shape.iter().product();
            if rec.length as usize != numel * 4 {
                return Err(Error::Corruption(format!(
                    "tensor {} length {} does not match shape {:?}",
                    rec.name, rec.length, rec.shape
                )));
            }
            let end = rec.offset + rec.length;
            if end as usize > blob.len() {
                return Err(Error::Corruption(format!(
                    "blob truncated at tensor {} (need {} bytes, have {})",
                    rec.name,
                    end,
                    blob.len()
                )));
            }
            let bytes = &blob[rec.offset as usize..end as usize];
            if checksum(bytes) != rec.checksum {
                return Err(Error::Corruption(format!(
                    "checksum mismatch on tensor {}",
                    rec.name
                )));
            }
            let data: Vec<f32> = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.push((rec.name.clone(), Tensor::new(&rec.shape, data)));
            cursor = end;
        }
        if cursor as usize != blob.len() {
            return Err(Error::Corruption(format!(
                "blob has {} trailing bytes",
                blob.len() - cursor as usize
            )));
        }
        manifest.model_config.validate()?;
        Ok(Self {
            config: manifest.model_config,
            tensors,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn toy_cfg() -> ModelConfig {
        ModelConfig {
            resolution: 8,
            w_dim: 8,
            mapping_depth: 2,
            channel_max: 8,
            channel_floor: 4,
            mbstd: true,
            noise: true,
        }
    }

    fn toy_checkpoint(seed: u64) -> Checkpoint {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let gen = Generator::<f32>::init(toy_cfg(), &mut rng).unwrap();
        let disc = Discriminator::<f32>::init(toy_cfg(), &mut rng).unwrap();
        Checkpoint::from_models(&gen, Some(&disc))
    }

    #[test]
    fn save_load_roundtrip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let ckpt = toy_checkpoint(1);
        let path = dir.path().join("model.ckpt");
        ckpt.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded.config, ckpt.config);
        assert_eq!(loaded.tensors.len(), ckpt.tensors.len());
        for ((n1, t1), (n2, t2)) in ckpt.tensors.iter().zip(&loaded.tensors) {
            assert_eq!(n1, n2);
            assert!(t1.bit_eq(t2), "tensor {n1} changed across roundtrip");
        }
    }

    #[test]
    fn manifest_order_is_table_order() {
        let dir = tempfile::tempdir().unwrap();
        let ckpt = toy_checkpoint(2);
        let path = dir.path().join("m.ckpt");
        ckpt.save(&path).unwrap();
        let manifest: Manifest = serde_json::from_str(
            &std::fs::read_to_string(dir.path().join("m.ckpt.json")).unwrap(),
        )
        .unwrap();
        let manifest_names: Vec<&str> = manifest.tensors.iter().map(|r| r.name.as_str()).collect();
        assert_eq!(manifest_names, ckpt.names());
    }

    #[test]
    fn corrupting_one_byte_names_the_tensor() {
        let dir = tempfile::tempdir().unwrap();
        let ckpt = toy_checkpoint(3);
        let path = dir.path().join("m.ckpt");
        ckpt.save(&path).unwrap();
        let bin = dir.path().join("m.ckpt.bin");
        let mut blob = std::fs::read(&bin).unwrap();
        // flip one byte inside the third tensor
        let manifest: Manifest = serde_json::from_str(
            &std::fs::read_to_string(dir.path().join("m.ckpt.json")).unwrap(),
        )
        .unwrap();
        let rec = &manifest.tensors[2];
        blob[rec.offset as usize] ^= 0x40;
        std::fs::write(&bin, &blob).unwrap();
        let err = Checkpoint::load(&path).unwrap_err();
        assert_eq!(err.class(), "corruption");
        assert!(
            err.to_string().contains(&rec.name),
            "error should name {}: {}",
            rec.name,
            err
        );
    }

    #[test]
    fn truncated_blob_is_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let ckpt = toy_checkpoint(4);
        let path = dir.path().join("m.ckpt");
        ckpt.save(&path).unwrap();
        let bin = dir.path().join("m.ckpt.bin");
        let blob = std::fs::read(&bin).unwrap();
        std::fs::write(&bin, &blob[..blob.len() - 8]).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap_err().class(), "corruption");
    }

    #[test]
    fn version_mismatch_is_unsupported() {
        let dir = tempfile::tempdir().unwrap();
        let ckpt = toy_checkpoint(5);
        let path = dir.path().join("m.ckpt");
        ckpt.save(&path).unwrap();
        let jp = dir.path().join("m.ckpt.json");
        let text = std::fs::read_to_string(&jp)
            .unwrap()
            .replace(FORMAT_VERSION, "styletune-ckpt-v999");
        std::fs::write(&jp, text).unwrap();
        assert_eq!(
            Checkpoint::load(&path).unwrap_err().class(),
            "unsupported-version"
        );
    }

    #[test]
    fn config_mismatch_is_incompatible() {
        let ckpt = toy_checkpoint(6);
        let mut other = toy_cfg();
        other.resolution = 16;
        assert_eq!(
            ckpt.ensure_matches(&other).unwrap_err().class(),
            "incompatible-checkpoint"
        );
    }

    #[test]
    fn models_rebuilt_from_checkpoint_are_identical() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let gen = Generator::<f32>::init(toy_cfg(), &mut rng).unwrap();
        let disc = Discriminator::<f32>::init(toy_cfg(), &mut rng).unwrap();
        let ckpt = Checkpoint::from_models(&gen, Some(&disc));
        let g2 = ckpt.to_generator().unwrap();
        let d2 = ckpt.to_discriminator().unwrap();
        for ((_, a), (_, b)) in gen.list_parameters().iter().zip(g2.list_parameters()) {
            assert!(a.bit_eq(&b));
        }
        for ((_, a), (_, b)) in disc.list_parameters().iter().zip(d2.list_parameters()) {
            assert!(a.bit_eq(&b));
        }
    }
}
