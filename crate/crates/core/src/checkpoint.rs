//! Binary checkpoint files.
//!
//! Layout: the magic bytes `QBM1`, a little-endian u32 format version, a
//! u64 header length and a JSON header, then every parameter array followed
//! by every Adam first-moment array and every second-moment array as
//! little-endian f32, in header order. The last eight bytes are an FNV-1a
//! hash of everything before them.

use std::fs;
use std::hash::Hasher;
use std::io::Write;
use std::path::Path;

use fnv::FnvHasher;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamConfig, AdamState, Tensor};
use crate::error::{QbmError, Result};
use crate::index::TermStats;
use crate::model::{Matcher, ModelConfig, ModelParams};
use crate::text::Vocabulary;

pub const MAGIC: &[u8; 4] = b"QBM1";
pub const FORMAT_VERSION: u32 = 1;

/// A model plus the optimiser state and bookkeeping of the epoch it came from.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub matcher: Matcher,
    pub adam: AdamState<f32>,
    pub epoch: usize,
    pub val_f1: f64,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
struct ArraySpec {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    /// Vocabulary tokens after the two special ones, in id order.
    vocab: Vec<String>,
    term_stats: TermStats,
    params: Vec<ArraySpec>,
    adam: AdamConfig,
    adam_t: u64,
    epoch: usize,
    val_f1: f64,
    seed: u64,
}

fn checksum(bytes: &[u8]) -> u64 {
    let mut h = FnvHasher::default();
    h.write(bytes);
    h.finish()
}

fn corrupt(msg: impl Into<String>) -> QbmError {
    QbmError::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let m = &self.matcher;
        let header = Header {
            config: m.config.clone(),
            vocab: m.vocab.tokens()[2..].to_vec(),
            term_stats: m.term_stats.clone(),
            params: m
                .params
                .names()
                .iter()
                .zip(m.params.tensors())
                .map(|(n, t)| ArraySpec {
                    name: n.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
            adam: self.adam.config,
            adam_t: self.adam.t,
            epoch: self.epoch,
            val_f1: self.val_f1,
            seed: self.seed,
        };
        let json = serde_json::to_vec(&header).map_err(|e| corrupt(format!("header encoding: {e}")))?;
        let mut out = Vec::with_capacity(json.len() + 4 * 3 * m.params.count() + 32);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        let arrays = m
            .params
            .tensors()
            .iter()
            .map(|t| t.data())
            .chain(self.adam.m.iter().map(|v| v.as_slice()))
            .chain(self.adam.v.iter().map(|v| v.as_slice()));
        for a in arrays {
            for x in a {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        let sum = checksum(&out);
        out.extend_from_slice(&sum.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(corrupt("bad magic bytes, not a checkpoint file"));
        }
        if bytes.len() < 8 {
            return Err(corrupt("truncated before the version field"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(QbmError::IncompatibleVersion {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        if bytes.len() < 24 {
            return Err(corrupt("truncated header"));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        let stored = u64::from_le_bytes(tail.try_into().expect("8 bytes"));
        if checksum(body) != stored {
            return Err(corrupt("checksum mismatch (file truncated or modified)"));
        }
        let hlen = u64::from_le_bytes(body[8..16].try_into().expect("8 bytes")) as usize;
        let json = body
            .get(16..16usize.saturating_add(hlen))
            .ok_or_else(|| corrupt("header length exceeds file"))?;
        let header: Header = serde_json::from_slice(json).map_err(|e| corrupt(format!("header: {e}")))?;
        header.config.validate()?;

        let mut floats = body[16 + hlen..].chunks_exact(4);
        if floats.remainder().len() != 0 {
            return Err(corrupt("array section is not a whole number of floats"));
        }
        let mut take = |n: usize| -> Result<Vec<f32>> {
            let v: Vec<f32> = floats
                .by_ref()
                .take(n)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            if v.len() != n {
                return Err(corrupt("array section shorter than the header declares"));
            }
            Ok(v)
        };
        let mut tensors = Vec::with_capacity(header.params.len());
        for spec in &header.params {
            let n = spec.shape.iter().product();
            tensors.push(Tensor::new(spec.shape.clone(), take(n)?)?);
        }
        let sizes: Vec<usize> = tensors.iter().map(|t| t.len()).collect();
        let m = sizes.iter().map(|&n| take(n)).collect::<Result<Vec<_>>>()?;
        let v = sizes.iter().map(|&n| take(n)).collect::<Result<Vec<_>>>()?;
        if floats.next().is_some() {
            return Err(corrupt("trailing data after the declared arrays"));
        }

        let vocab = Vocabulary::from_tokens(header.vocab);
        let params = ModelParams::from_parts(&header.config, vocab.len(), tensors)?;
        for (spec, name) in header.params.iter().zip(params.names()) {
            if &spec.name != name {
                return Err(corrupt(format!("array {} where {name} was expected", spec.name)));
            }
        }
        Ok(Checkpoint {
            matcher: Matcher::new(header.config, vocab, header.term_stats, params)?,
            adam: AdamState {
                config: header.adam,
                m,
                v,
                t: header.adam_t,
            },
            epoch: header.epoch,
            val_f1: header.val_f1,
            seed: header.seed,
        })
    }

    /// Writes to a sibling temporary file and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        let tmp = std::path::PathBuf::from(tmp);
        let write = || -> std::io::Result<()> {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
            fs::rename(&tmp, path)
        };
        write().map_err(|e| QbmError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| QbmError::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            QbmError::Checkpoint(msg) => QbmError::Checkpoint(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::index::InvertedIndex;
    use crate::model::Variant;
    use crate::text::EmbeddingTable;

    fn fixture() -> Checkpoint {
        let texts = ["how to get a refund", "refund not received", "where is my parcel", "parcel lost"];
        let vocab = Vocabulary::build(texts.iter().copied(), 1);
        let stats = InvertedIndex::build(&texts).stats().clone();
        let config = ModelConfig {
            variant: Variant::Qbm,
            ..ModelConfig::tiny(Variant::Qbm)
        };
        let table = EmbeddingTable::random(vocab.len(), config.embed_dim, 1);
        let params = ModelParams::from_embeddings(&config, &table, 1).unwrap();
        let mut adam = AdamState::new(AdamConfig::default(), params.tensors());
        adam.t = 7;
        adam.m[1][0] = 0.25;
        adam.v[2][0] = 1.5;
        Checkpoint {
            matcher: Matcher::new(config, vocab, stats, params).unwrap(),
            adam,
            epoch: 3,
            val_f1: 0.625,
            seed: 11,
        }
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let cp = fixture();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.qbm");
        cp.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.matcher.params, cp.matcher.params);
        assert_eq!(back.adam, cp.adam);
        assert_eq!(back.matcher.vocab, cp.matcher.vocab);
        assert_eq!(back.matcher.term_stats, cp.matcher.term_stats);
        assert_eq!((back.epoch, back.val_f1, back.seed), (3, 0.625, 11));
        assert_eq!(back.to_bytes().unwrap(), cp.to_bytes().unwrap());
        let bag = ["refund not received", "how to get a refund"];
        for q in ["refund", "parcel", "where is my refund", "lost parcel refund"] {
            let a = cp.matcher.score(q, &bag, crate::model::QqMode::Max).unwrap();
            let b = back.matcher.score(q, &bag, crate::model::QqMode::Max).unwrap();
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn awkward_floats_survive_the_header() {
        let mut cp = fixture();
        cp.val_f1 = f64::from_bits((2.0f64 / 3.0).to_bits() + 1);
        cp.adam.config.lr = 0.1 + 0.2;
        let back = Checkpoint::from_bytes(&cp.to_bytes().unwrap()).unwrap();
        assert_eq!(back.val_f1.to_bits(), cp.val_f1.to_bits());
        assert_eq!(back.adam.config.lr.to_bits(), cp.adam.config.lr.to_bits());
        assert_eq!(back.to_bytes().unwrap(), cp.to_bytes().unwrap());
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let bytes = fixture().to_bytes().unwrap();
        let err = Checkpoint::from_bytes(&bytes[..bytes.len() - 100]).unwrap_err();
        assert!(err.to_string().contains("checksum"), "{err}");
        let mut bumped = bytes.clone();
        bumped[4] = 2;
        assert!(matches!(
            Checkpoint::from_bytes(&bumped),
            Err(QbmError::IncompatibleVersion { found: 2, expected: 1 })
        ));
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(Checkpoint::from_bytes(&magic).unwrap_err().to_string().contains("magic"));
        let mut flipped = bytes;
        let mid = flipped.len() / 2;
        flipped[mid] ^= 1;
        assert!(Checkpoint::from_bytes(&flipped).unwrap_err().to_string().contains("checksum"));
    }
}
