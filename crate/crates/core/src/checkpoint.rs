//! Single-file model archive: magic, JSON header, raw little-endian tensors.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{Discriminator, Generator, NetConfig, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"DRAECKPT";
const FORMAT: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    format: u32,
    dtype: String,
    net: NetConfig,
    fingerprint: String,
    step: u64,
    epoch: u64,
    train: serde_json::Value,
    metrics: BTreeMap<String, f64>,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

/// Everything needed to resume training or run inference.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub net: NetConfig,
    pub step: u64,
    pub epoch: u64,
    /// Serialized training config (opaque here).
    pub train: serde_json::Value,
    /// Scalar summaries such as validation SSIM.
    pub metrics: BTreeMap<String, f64>,
    /// Named tensors; generator and discriminator entries carry the
    /// `gen.`/`disc.` prefixes, optimizer state anything else.
    pub tensors: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn new(net: NetConfig) -> Self {
        Checkpoint {
            net,
            step: 0,
            epoch: 0,
            train: serde_json::Value::Null,
            metrics: BTreeMap::new(),
            tensors: Vec::new(),
        }
    }

    pub fn push_store(&mut self, store: &ParamStore<T>, prefix: &str) {
        for i in 0..store.len() {
            self.tensors.push((format!("{prefix}{}", store.name(i)), store.value(i).clone()));
        }
    }

    /// Tensors whose names start with `prefix`, with the prefix removed.
    pub fn store(&self, prefix: &str) -> ParamStore<T> {
        let mut s = ParamStore::new();
        for (name, t) in &self.tensors {
            if let Some(rest) = name.strip_prefix(prefix) {
                s.add(rest, t.clone());
            }
        }
        s
    }

    pub fn generator(&self) -> Result<Generator<T>> {
        let mut gen = ParamStore::new();
        for (name, t) in &self.tensors {
            if name.starts_with("gen.") {
                gen.add(name.clone(), t.clone());
            }
        }
        if gen.is_empty() {
            return Err(Error::Model("checkpoint holds no generator".into()));
        }
        Generator::from_params(self.net.clone(), gen)
    }

    pub fn discriminator(&self) -> Result<Discriminator<T>> {
        let mut disc = ParamStore::new();
        for (name, t) in &self.tensors {
            if name.starts_with("disc.") {
                disc.add(name.clone(), t.clone());
            }
        }
        if disc.is_empty() {
            return Err(Error::Model("checkpoint holds no discriminator".into()));
        }
        Discriminator::from_params(self.net.clone(), disc)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            format: FORMAT,
            dtype: T::DTYPE.to_string(),
            net: self.net.clone(),
            fingerprint: self.net.fingerprint(),
            step: self.step,
            epoch: self.epoch,
            train: self.train.clone(),
            metrics: self.metrics.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(name, t)| TensorEntry { name: name.clone(), shape: t.shape().to_vec() })
                .collect(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let payload: usize = self.tensors.iter().map(|(_, t)| t.numel() * T::BYTES).sum();
        let mut out = Vec::with_capacity(MAGIC.len() + 12 + json.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (name, t) in &self.tensors {
            if t.is_meta() {
                return Err(Error::Checkpoint(format!("tensor {name} has no data")));
            }
            for &v in t.data() {
                v.write_le(&mut out);
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let format = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if format != FORMAT {
            return Err(Error::Checkpoint(format!("unsupported format version {format}")));
        }
        let len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = bytes.get(20..20 + len).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if header.dtype != T::DTYPE {
            return Err(Error::Checkpoint(format!("stored as {}, requested {}", header.dtype, T::DTYPE)));
        }
        if header.fingerprint != header.net.fingerprint() {
            return Err(bad("architecture fingerprint mismatch"));
        }
        let mut pos = 20 + len;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            let chunk = bytes.get(pos..pos + n * T::BYTES).ok_or_else(|| bad("truncated tensor data"))?;
            let data = chunk.chunks_exact(T::BYTES).map(T::read_le).collect();
            tensors.push((e.name, Tensor::from_vec(&e.shape, data)?));
            pos += n * T::BYTES;
        }
        if pos != bytes.len() {
            return Err(bad("trailing bytes after tensor data"));
        }
        Ok(Checkpoint {
            net: header.net,
            step: header.step,
            epoch: header.epoch,
            train: header.train,
            metrics: header.metrics,
            tensors,
        })
    }

    /// Writes through a temporary file and renames, so readers never see a
    /// partial archive.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> Checkpoint<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let g = Generator::<f32>::new(NetConfig::toy(), &mut rng).unwrap();
        let d = Discriminator::<f32>::new(NetConfig::toy(), &mut rng).unwrap();
        let mut c = Checkpoint::new(NetConfig::toy());
        c.step = 17;
        c.epoch = 2;
        c.metrics.insert("val_ssim".into(), 0.1 + 0.2);
        c.push_store(g.params(), "");
        c.push_store(d.params(), "");
        c
    }

    #[test]
    fn bytes_round_trip_exactly() {
        let c = sample();
        let b1 = c.to_bytes().unwrap();
        let back = Checkpoint::<f32>::from_bytes(&b1).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes().unwrap(), b1);
    }

    #[test]
    fn restored_models_match() {
        let c = sample();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        c.save(&path).unwrap();
        let back = Checkpoint::<f32>::load(&path).unwrap();
        let x = Tensor::full(&[1, 1, 32, 32], 0.3);
        assert_eq!(
            c.generator().unwrap().reconstruct(&x).unwrap(),
            back.generator().unwrap().reconstruct(&x).unwrap()
        );
        assert_eq!(c.discriminator().unwrap().discriminate(&x).unwrap().0, back.discriminator().unwrap().discriminate(&x).unwrap().0);
    }

    #[test]
    fn corrupt_or_mismatched_files_are_rejected() {
        let b = sample().to_bytes().unwrap();
        assert!(Checkpoint::<f32>::from_bytes(&b[..b.len() - 3]).is_err());
        assert!(Checkpoint::<f32>::from_bytes(b"garbage").is_err());
        assert!(matches!(Checkpoint::<f64>::from_bytes(&b), Err(Error::Checkpoint(_))));
        let mut c = Checkpoint::<f32>::new(NetConfig::desk());
        c.push_store(Generator::<f32>::new(NetConfig::toy(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap().params(), "");
        assert!(matches!(c.generator(), Err(Error::Model(_))));
    }
}
