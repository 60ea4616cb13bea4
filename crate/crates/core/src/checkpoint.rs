//! Single-file checkpoint archive.
//!
//! Layout: the 8-byte magic `SFTKCKPT`, a little-endian `u64` header length,
//! a JSON header, then every block's values as little-endian `f32` in header
//! order. The header carries the stage, step counter, resolved config and its
//! hash, free-form metadata (RNG scheme, trainer bookkeeping), and one entry
//! per block with its shape and optional attributes.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::TokenizerModel;
use crate::nn::ParamStore;
use crate::optim::{AdamW, AdamWState, Ema};
use crate::teacher::TeacherTokenizer;

pub const MAGIC: &[u8; 8] = b"SFTKCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub shape: Vec<usize>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub attrs: BTreeMap<String, serde_json::Value>,
    #[serde(skip)]
    pub data: Vec<f32>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    stage: u8,
    step: usize,
    config_hash: String,
    config: RunConfig,
    meta: BTreeMap<String, serde_json::Value>,
    blocks: Vec<(String, Block)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub stage: u8,
    pub step: usize,
    pub config: RunConfig,
    pub meta: BTreeMap<String, serde_json::Value>,
    pub blocks: BTreeMap<String, Block>,
}

impl Checkpoint {
    pub fn new(stage: u8, step: usize, config: RunConfig) -> Self {
        Self {
            stage,
            step,
            config,
            meta: BTreeMap::new(),
            blocks: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Result<&mut Block> {
        let name = name.into();
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::Shape(format!("{name}: {} values for {shape:?}", data.len())));
        }
        let slot = self.blocks.entry(name).or_insert_with(|| Block {
            shape: vec![],
            attrs: BTreeMap::new(),
            data: vec![],
        });
        *slot = Block {
            shape,
            attrs: BTreeMap::new(),
            data,
        };
        Ok(slot)
    }

    pub fn block(&self, name: &str) -> Result<&Block> {
        self.blocks
            .get(name)
            .ok_or_else(|| Error::Format(format!("checkpoint lacks block {name}")))
    }

    pub fn set_meta<T: Serialize>(&mut self, key: &str, value: &T) -> Result<()> {
        self.meta.insert(key.into(), serde_json::to_value(value)?);
        Ok(())
    }

    pub fn meta<T: DeserializeOwned>(&self, key: &str) -> Result<T> {
        let v = self
            .meta
            .get(key)
            .ok_or_else(|| Error::Format(format!("checkpoint lacks metadata {key}")))?;
        Ok(serde_json::from_value(v.clone())?)
    }

    /// Every parameter of `store` as `prefix/<name>`.
    pub fn put_store(&mut self, prefix: &str, store: &ParamStore) -> Result<()> {
        for (name, var) in store.vars() {
            let data = var
                .as_tensor()
                .flatten_all()?
                .to_dtype(candle_core::DType::F32)?
                .to_vec1()?;
            self.insert(format!("{prefix}/{name}"), var.shape().dims().to_vec(), data)?;
        }
        Ok(())
    }

    pub fn load_store(&self, prefix: &str, store: &ParamStore) -> Result<()> {
        let mut values = BTreeMap::new();
        for (name, var) in store.vars() {
            let b = self.block(&format!("{prefix}/{name}"))?;
            if b.shape != var.shape().dims() {
                return Err(Error::Shape(format!(
                    "{name}: checkpoint {:?}, model {:?}",
                    b.shape,
                    var.shape().dims()
                )));
            }
            values.insert(name.clone(), b.data.clone());
        }
        store.load(&values)
    }

    /// Model parameters under `prefix`; the codebook block also records
    /// its size, dimension and normalisation.
    pub fn put_model(&mut self, prefix: &str, model: &TokenizerModel) -> Result<()> {
        for s in model.stores() {
            self.put_store(prefix, s)?;
        }
        let cb = &model.codebook;
        let block = self
            .blocks
            .get_mut(&format!("{prefix}/quantizer.codebook"))
            .ok_or_else(|| Error::Format("model has no codebook parameter".into()))?;
        block.attrs.insert("n".into(), cb.size().into());
        block.attrs.insert("d".into(), cb.dim().into());
        block.attrs.insert("l2".into(), cb.l2_normalized().into());
        Ok(())
    }

    pub fn load_model(&self, prefix: &str, model: &TokenizerModel) -> Result<()> {
        let cb = &model.codebook;
        let b = self.block(&format!("{prefix}/quantizer.codebook"))?;
        let want = [
            ("n", serde_json::Value::from(cb.size())),
            ("d", cb.dim().into()),
            ("l2", cb.l2_normalized().into()),
        ];
        for (k, v) in want {
            if b.attrs.get(k) != Some(&v) {
                return Err(Error::Format(format!(
                    "codebook {k}: checkpoint {:?}, model {v}",
                    b.attrs.get(k)
                )));
            }
        }
        for s in model.stores() {
            self.load_store(prefix, s)?;
        }
        Ok(())
    }

    pub fn put_optimizer(&mut self, prefix: &str, opt: &AdamW) -> Result<()> {
        let s = opt.state()?;
        for (name, m) in s.m {
            let n = m.len();
            self.insert(format!("{prefix}/m/{name}"), vec![n], m)?;
        }
        for (name, v) in s.v {
            let n = v.len();
            self.insert(format!("{prefix}/v/{name}"), vec![n], v)?;
        }
        self.set_meta(&format!("{prefix}/step"), &s.step)
    }

    pub fn load_optimizer(&self, prefix: &str, opt: &mut AdamW) -> Result<()> {
        let mut s = AdamWState {
            step: self.meta(&format!("{prefix}/step"))?,
            ..Default::default()
        };
        for (name, _) in opt.vars() {
            s.m.insert(name.clone(), self.block(&format!("{prefix}/m/{name}"))?.data.clone());
            s.v.insert(name.clone(), self.block(&format!("{prefix}/v/{name}"))?.data.clone());
        }
        opt.load_state(&s)
    }

    pub fn put_ema(&mut self, prefix: &str, ema: &Ema) -> Result<()> {
        for (name, v) in &ema.shadow {
            self.insert(format!("{prefix}/{name}"), vec![v.len()], v.clone())?;
        }
        self.set_meta(&format!("{prefix}/decay"), &ema.decay)
    }

    /// Restores the shadow for exactly the names already present in `ema`.
    pub fn load_ema(&self, prefix: &str, ema: &mut Ema) -> Result<()> {
        ema.decay = self.meta(&format!("{prefix}/decay"))?;
        for (name, v) in ema.shadow.iter_mut() {
            let b = self.block(&format!("{prefix}/{name}"))?;
            if b.data.len() != v.len() {
                return Err(Error::Shape(format!("EMA {name}: {} vs {}", b.data.len(), v.len())));
            }
            v.clone_from(&b.data);
        }
        Ok(())
    }

    pub fn put_teacher(&mut self, t: &TeacherTokenizer) -> Result<()> {
        let b = self.insert("teacher/centroids", vec![t.vocab, t.patch_len()], t.centroids.clone())?;
        b.attrs.insert("patch".into(), t.patch.into());
        b.attrs.insert("image_size".into(), t.image_size.into());
        Ok(())
    }

    pub fn teacher(&self) -> Result<TeacherTokenizer> {
        let b = self.block("teacher/centroids")?;
        let attr = |k: &str| -> Result<usize> {
            b.attrs
                .get(k)
                .and_then(|v| v.as_u64())
                .map(|v| v as usize)
                .ok_or_else(|| Error::Format(format!("teacher block lacks {k}")))
        };
        let t = TeacherTokenizer {
            patch: attr("patch")?,
            image_size: attr("image_size")?,
            vocab: b.shape[0],
            centroids: b.data.clone(),
        };
        if b.shape.len() != 2 || b.shape[1] != t.patch_len() {
            return Err(Error::Format(format!("teacher centroids shape {:?}", b.shape)));
        }
        Ok(t)
    }

    /// Writes atomically via a sibling temporary file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let header = Header {
            version: VERSION,
            stage: self.stage,
            step: self.step,
            config_hash: self.config.hash(),
            config: self.config.clone(),
            meta: self.meta.clone(),
            blocks: self.blocks.iter().map(|(k, b)| (k.clone(), b.clone())).collect(),
        };
        let json = serde_json::to_vec(&header)?;
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir)?;
            }
        }
        let tmp = path.with_extension("tmp");
        {
            let mut w = BufWriter::new(fs::File::create(&tmp)?);
            w.write_all(MAGIC)?;
            w.write_all(&(json.len() as u64).to_le_bytes())?;
            w.write_all(&json)?;
            for b in self.blocks.values() {
                for v in &b.data {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
            w.flush()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingCheckpoint(path.to_path_buf()));
        }
        let mut r = BufReader::new(fs::File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format(format!("{} is not a checkpoint", path.display())));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len)?;
        let len = u64::from_le_bytes(len) as usize;
        let mut json = vec![0u8; len];
        r.read_exact(&mut json)?;
        let header: Header = serde_json::from_slice(&json)?;
        if header.version != VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {}",
                header.version
            )));
        }
        if header.config.hash() != header.config_hash {
            return Err(Error::Format("checkpoint config hash mismatch".into()));
        }
        let mut blocks = BTreeMap::new();
        for (name, mut b) in header.blocks {
            let n: usize = b.shape.iter().product();
            let mut raw = vec![0u8; n * 4];
            r.read_exact(&mut raw)
                .map_err(|_| Error::Format(format!("truncated checkpoint at block {name}")))?;
            b.data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            blocks.insert(name, b);
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(Error::Format("trailing bytes after checkpoint blocks".into()));
        }
        Ok(Self {
            stage: header.stage,
            step: header.step,
            config: header.config,
            meta: header.meta,
            blocks,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Profile;

    #[test]
    fn round_trip_preserves_model_bits() {
        let cfg = RunConfig::defaults(1, Profile::Ci).unwrap();
        let model = TokenizerModel::from_config(&cfg, 3).unwrap();
        let mut ck = Checkpoint::new(1, 17, cfg.clone());
        ck.put_model("model", &model).unwrap();
        ck.set_meta("note", &"x").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        let other = TokenizerModel::from_config(&cfg, 4).unwrap();
        back.load_model("model", &other).unwrap();
        for (s, t) in model.stores().iter().zip(other.stores()) {
            assert_eq!(s.snapshot().unwrap(), t.snapshot().unwrap());
        }
    }

    #[test]
    fn mismatched_codebook_is_rejected() {
        let cfg = RunConfig::defaults(1, Profile::Ci).unwrap();
        let model = TokenizerModel::from_config(&cfg, 0).unwrap();
        let mut ck = Checkpoint::new(1, 0, cfg.clone());
        ck.put_model("model", &model).unwrap();
        let mut big = cfg.clone();
        big.model.vq_model.codebook_size *= 2;
        let other = TokenizerModel::from_config(&big, 0).unwrap();
        assert!(matches!(ck.load_model("model", &other), Err(Error::Format(_))));
    }

    #[test]
    fn corrupt_files_are_errors() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("none.ckpt");
        assert!(matches!(Checkpoint::load(&missing), Err(Error::MissingCheckpoint(_))));
        let junk = dir.path().join("junk.ckpt");
        fs::write(&junk, b"not a checkpoint").unwrap();
        assert!(Checkpoint::load(&junk).is_err());
        let cfg = RunConfig::defaults(1, Profile::Ci).unwrap();
        let mut ck = Checkpoint::new(1, 0, cfg);
        ck.insert("x", vec![2], vec![1.0, 2.0]).unwrap();
        let good = dir.path().join("good.ckpt");
        ck.save(&good).unwrap();
        let bytes = fs::read(&good).unwrap();
        fs::write(&junk, &bytes[..bytes.len() - 2]).unwrap();
        assert!(Checkpoint::load(&junk).is_err());
    }
}
