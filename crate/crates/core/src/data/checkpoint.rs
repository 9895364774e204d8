//! Versioned little-endian checkpoint files.
//!
//! Layout: magic `WRNC`, u32 version, u32 length + UTF-8 `key=value` lines,
//! u32 record count, then per record a u32-prefixed name, u32 rank, u32
//! extents and the f32 payload. A trailing u64 FNV-1a hash covers every
//! byte before it.

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::error::{Result, TensorError};
use crate::model::ModelConfig;
use crate::optim::OptimizerState;
use crate::scalar::{Precision, Real};
use crate::train::{TrainConfig, Trainer};

pub const MAGIC: &[u8; 4] = b"WRNC";
pub const VERSION: u32 = 1;

pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    /// Ordered `key=value` header entries.
    pub config: Vec<(String, String)>,
    pub records: Vec<Record>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(TensorError::Truncated {
                path: self.path.display().to_string(),
            }),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec()).map_err(|_| TensorError::format(self.path, "invalid UTF-8 string"))
    }
}

impl Checkpoint {
    pub fn get(&self, key: &str) -> Option<&str> {
        self.config.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn record(&self, name: &str) -> Option<&Record> {
        self.records.iter().find(|r| r.name == name)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let blob: String = self.config.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
        out.extend_from_slice(&(blob.len() as u32).to_le_bytes());
        out.extend_from_slice(blob.as_bytes());
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for r in &self.records {
            out.extend_from_slice(&(r.name.len() as u32).to_le_bytes());
            out.extend_from_slice(r.name.as_bytes());
            out.extend_from_slice(&(r.shape.len() as u32).to_le_bytes());
            for &d in &r.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in &r.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let sum = fnv1a(&out);
        out.extend_from_slice(&sum.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let shown = || path.display().to_string();
        if bytes.len() < 8 {
            return Err(TensorError::Truncated { path: shown() });
        }
        if &bytes[..4] != MAGIC {
            return Err(TensorError::format(path, "not a checkpoint (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(TensorError::Version {
                path: shown(),
                found: version,
                supported: VERSION,
            });
        }
        if bytes.len() < 16 {
            return Err(TensorError::Truncated { path: shown() });
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        let stored = u64::from_le_bytes(tail.try_into().unwrap());
        let computed = fnv1a(body);
        if stored != computed {
            return Err(TensorError::Checksum {
                path: shown(),
                stored,
                computed,
            });
        }
        let mut r = Reader {
            bytes: body,
            pos: 8,
            path,
        };
        let blob = r.string()?;
        let mut config = Vec::new();
        for line in blob.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| TensorError::format(path, format!("malformed config line {line:?}")))?;
            config.push((k.to_string(), v.to_string()));
        }
        let count = r.u32()? as usize;
        let mut records: Vec<Record> = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name = r.string()?;
            if records.iter().any(|x| x.name == name) {
                return Err(TensorError::format(path, format!("duplicate record {name}")));
            }
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let len: usize = shape.iter().product();
            let raw = r.take(len.checked_mul(4).ok_or_else(|| TensorError::format(path, "record too large"))?)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            records.push(Record { name, shape, data });
        }
        if r.pos != body.len() {
            return Err(TensorError::format(path, "trailing bytes after the last record"));
        }
        Ok(Self { config, records })
    }

    /// Writes to a sibling temporary file and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        let tmp = std::path::PathBuf::from(tmp);
        std::fs::write(&tmp, self.to_bytes()).map_err(|e| TensorError::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| TensorError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| TensorError::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// The model configuration echoed in the header.
    pub fn model_config(&self) -> Result<ModelConfig> {
        let mut cfg = ModelConfig::desk(0, 1);
        for key in ModelConfig::KEYS {
            let v = self
                .get(&format!("model.{key}"))
                .ok_or_else(|| TensorError::Config(format!("checkpoint lacks model.{key}")))?;
            cfg.set(key, v)?;
        }
        Ok(cfg)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::default();
        for key in TrainConfig::KEYS {
            let v = self
                .get(&format!("train.{key}"))
                .ok_or_else(|| TensorError::Config(format!("checkpoint lacks train.{key}")))?;
            cfg.set(key, v)?;
        }
        Ok(cfg)
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn unhex(s: &str) -> Option<[u8; 32]> {
    if s.len() != 64 {
        return None;
    }
    let mut out = [0u8; 32];
    for (i, o) in out.iter_mut().enumerate() {
        *o = u8::from_str_radix(s.get(2 * i..2 * i + 2)?, 16).ok()?;
    }
    Some(out)
}

fn number<V: std::str::FromStr>(ck: &Checkpoint, key: &str) -> Result<V> {
    ck.get(key)
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| TensorError::Config(format!("checkpoint lacks a valid {key}")))
}

impl<T: Real> Trainer<T> {
    /// Parameters, optimizer moments, counters and shuffle state.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut config: Vec<(String, String)> = Vec::new();
        for (k, v) in self.model.config.to_pairs() {
            config.push((format!("model.{k}"), v));
        }
        for (k, v) in self.config.to_pairs() {
            config.push((format!("train.{k}"), v));
        }
        config.push(("precision".into(), T::PRECISION.to_string()));
        config.push(("epoch".into(), self.epoch.to_string()));
        config.push(("step".into(), self.optimizer.step.to_string()));
        config.push(("last_lr".into(), self.last_lr.to_string()));
        config.push(("rng.seed".into(), hex(&self.rng.get_seed())));
        config.push(("rng.stream".into(), self.rng.get_stream().to_string()));
        config.push(("rng.word_pos".into(), self.rng.get_word_pos().to_string()));
        let f32s = |v: &[T]| v.iter().map(|x| x.f64() as f32).collect::<Vec<f32>>();
        let mut records = Vec::new();
        for (i, (name, t)) in self.params.iter().enumerate() {
            records.push(Record {
                name: format!("param:{name}"),
                shape: t.shape().to_vec(),
                data: f32s(t.data()),
            });
            for (tag, buf) in [("adam_m", &self.optimizer.m[i]), ("adam_v", &self.optimizer.v[i])] {
                records.push(Record {
                    name: format!("{tag}:{name}"),
                    shape: t.shape().to_vec(),
                    data: f32s(buf),
                });
            }
        }
        Checkpoint { config, records }
    }

    /// Rebuilds a trainer. With `expected`, the stored model configuration
    /// must match it exactly.
    pub fn from_checkpoint(ck: &Checkpoint, expected: Option<&ModelConfig>) -> Result<Self> {
        let model = ck.model_config()?;
        if let Some(exp) = expected {
            let diff = exp.diff(&model);
            if !diff.is_empty() {
                return Err(TensorError::ConfigMismatch(diff));
            }
        }
        let train = ck.train_config()?;
        if let Some(p) = ck.get("precision") {
            Precision::parse(p).ok_or_else(|| TensorError::Config(format!("unknown precision {p}")))?;
        }
        let mut trainer = Trainer::<T>::new(&model, &train)?;
        let mut values = Vec::new();
        let mut m = Vec::new();
        let mut v = Vec::new();
        for (name, t) in trainer.params.iter() {
            let fetch = |tag: &str| -> Result<Vec<T>> {
                let key = format!("{tag}:{name}");
                let rec = ck
                    .record(&key)
                    .ok_or_else(|| TensorError::Config(format!("checkpoint lacks record {key}")))?;
                if rec.shape != t.shape() {
                    return Err(TensorError::ShapeMismatch {
                        op: "load_checkpoint",
                        lhs: t.shape().to_vec(),
                        rhs: rec.shape.clone(),
                    });
                }
                Ok(rec.data.iter().map(|&x| T::of(x as f64)).collect())
            };
            values.push((name.to_string(), t.shape().to_vec(), fetch("param")?));
            m.push(fetch("adam_m")?);
            v.push(fetch("adam_v")?);
        }
        let expected_records = 3 * trainer.params.len();
        if ck.records.len() != expected_records {
            return Err(TensorError::Config(format!(
                "checkpoint holds {} records, model needs {expected_records}",
                ck.records.len()
            )));
        }
        trainer
            .params
            .load_values(values.iter().map(|(n, s, d)| (n.as_str(), s.as_slice(), d.as_slice())))?;
        trainer.optimizer = OptimizerState {
            config: train.adamw(),
            step: number(ck, "step")?,
            m,
            v,
        };
        trainer.epoch = number(ck, "epoch")?;
        trainer.last_lr = number(ck, "last_lr")?;
        let seed = ck
            .get("rng.seed")
            .and_then(unhex)
            .ok_or_else(|| TensorError::Config("checkpoint lacks a valid rng.seed".into()))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(number(ck, "rng.stream")?);
        rng.set_word_pos(number(ck, "rng.word_pos")?);
        trainer.rng = rng;
        Ok(trainer)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        Checkpoint {
            config: vec![("a".into(), "1".into()), ("b".into(), "x y".into())],
            records: vec![Record {
                name: "w".into(),
                shape: vec![2, 2],
                data: vec![1.0, -2.5, 0.0, 3.25],
            }],
        }
    }

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a(b"a"), 0xaf63dc4c8601ec8c);
    }

    #[test]
    fn bytes_round_trip() {
        let bytes = sample().to_bytes();
        let back = Checkpoint::from_bytes(&bytes, Path::new("x")).unwrap();
        assert_eq!(back, sample());
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = sample().to_bytes();
        let mut flipped = bytes.clone();
        flipped[20] ^= 0x10;
        assert!(matches!(
            Checkpoint::from_bytes(&flipped, Path::new("x")),
            Err(TensorError::Checksum { .. })
        ));
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 3], Path::new("x")),
            Err(TensorError::Checksum { .. } | TensorError::Truncated { .. })
        ));
        let mut old = bytes.clone();
        old[4] = 9;
        let err = Checkpoint::from_bytes(&old, Path::new("x")).unwrap_err();
        assert!(matches!(err, TensorError::Version { found: 9, .. }));
        assert!(err.to_string().contains("re-save"));
    }

    #[test]
    fn rng_seed_hex_round_trip() {
        let seed: [u8; 32] = std::array::from_fn(|i| (i * 37) as u8);
        assert_eq!(unhex(&hex(&seed)), Some(seed));
        assert_eq!(unhex("zz"), None);
    }
}
