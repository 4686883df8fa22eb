//! Binary checkpoints.
//!
//! Layout: the 8-byte magic `TRCKPT\0\x01`, a little-endian `u32` header
//! length, a JSON header (format version, vocabulary, architecture, completed
//! stages, array names and shapes), then every array as little-endian `f64`
//! in header order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::config::Stage;
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::policy::{PolicyConfig, PolicyParameters};
use crate::vocab::Vocabulary;

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"TRCKPT\0\x01";

/// Parameters plus the training stages they have been through.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: PolicyParameters,
    pub stages: Vec<Stage>,
}

impl Checkpoint {
    pub fn new(params: PolicyParameters) -> Self {
        Self { params, stages: Vec::new() }
    }

    pub fn has_stage(&self, stage: Stage) -> bool {
        self.stages.contains(&stage)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let p = &self.params;
        let header = Header {
            version: FORMAT_VERSION,
            vocabulary: p.vocab().clone(),
            policy: *p.config(),
            stages: self.stages.clone(),
            arrays: p
                .names()
                .iter()
                .zip(p.arrays())
                .map(|(n, t)| ArraySpec { name: n.clone(), shape: [t.rows, t.cols] })
                .collect(),
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(12 + header.len() + 8 * p.num_parameters());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for t in p.arrays() {
            for x in &t.data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |m: &str| Error::CorruptCheckpoint(m.to_string());
        if bytes.len() < 12 || &bytes[..8] != MAGIC {
            return Err(corrupt("missing magic"));
        }
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let body = bytes.get(12..12 + hlen).ok_or_else(|| corrupt("truncated header"))?;
        let header: Header =
            serde_json::from_slice(body).map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;
        if header.version != FORMAT_VERSION {
            return Err(Error::CorruptCheckpoint(format!("unsupported version {}", header.version)));
        }
        let mut data = &bytes[12 + hlen..];
        let expected: usize = header.arrays.iter().map(|a| a.shape[0] * a.shape[1] * 8).sum();
        if data.len() != expected {
            return Err(Error::CorruptCheckpoint(format!(
                "expected {expected} data bytes, found {}",
                data.len()
            )));
        }
        let mut arrays = Vec::with_capacity(header.arrays.len());
        for spec in &header.arrays {
            let n = spec.shape[0] * spec.shape[1];
            let values = data[..n * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            data = &data[n * 8..];
            arrays.push((spec.name.clone(), Tensor::from_vec(spec.shape[0], spec.shape[1], values)));
        }
        let params = PolicyParameters::from_arrays(header.policy, header.vocabulary, arrays)?;
        if !params.is_finite() {
            return Err(corrupt("non-finite parameter"));
        }
        Ok(Self { params, stages: header.stages })
    }

    /// Atomic write.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Loads and checks that vocabulary and architecture match.
    pub fn load_expecting(path: impl AsRef<Path>, vocab: &Vocabulary, policy: &PolicyConfig) -> Result<Self> {
        let ck = Self::load(path)?;
        if ck.params.vocab() != vocab {
            return Err(Error::ShapeMismatch("checkpoint vocabulary differs".into()));
        }
        if ck.params.config() != policy {
            return Err(Error::ShapeMismatch(format!(
                "checkpoint architecture {:?} differs from {policy:?}",
                ck.params.config()
            )));
        }
        Ok(ck)
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    version: u32,
    vocabulary: Vocabulary,
    policy: PolicyConfig,
    stages: Vec<Stage>,
    arrays: Vec<ArraySpec>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ArraySpec {
    name: String,
    shape: [usize; 2],
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ck() -> Checkpoint {
        let cfg = PolicyConfig { d_model: 4, heads: 2, layers: 2, mlp_hidden: 6, max_positions: 9 };
        let mut c = Checkpoint::new(PolicyParameters::init(cfg, Vocabulary::standard(), 5).unwrap());
        c.stages.push(Stage::Midtrain);
        c
    }

    #[test]
    fn byte_identical_round_trip() {
        let c = ck();
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn truncation_and_vocabulary_mismatch() {
        let bytes = ck().to_bytes();
        for cut in [0, 5, 20, bytes.len() - 1] {
            assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(Error::CorruptCheckpoint(_))));
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ckpt");
        ck().save(&path).unwrap();
        let mut syms: Vec<String> = Vocabulary::standard().symbols().to_vec();
        syms.push("y".into());
        let other = Vocabulary::new(syms).unwrap();
        let cfg = *ck().params.config();
        assert!(matches!(Checkpoint::load_expecting(&path, &other, &cfg), Err(Error::ShapeMismatch(_))));
        assert!(Checkpoint::load_expecting(&path, &Vocabulary::standard(), &cfg).is_ok());
    }
}
