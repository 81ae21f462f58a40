//! Versioned binary checkpoint container.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! magic "SFIRCKPT" | version u32 | config_len u32 | config text (key = value)
//! phase u8 | epoch u64 | best_val f64 | adam_lr f64 | adam_t u64
//! entry_count u32 | entries: name_len u16, name, dtype u8, ndim u8, dims u64*, offset u64, nbytes u64
//! data_len u64 | data | sha256 of every preceding byte
//! ```
//!
//! Optimizer moments are stored as entries named `adam.m/<param>` and
//! `adam.v/<param>`.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::config::{Config, TrainConfig};
use super::ReverbModel;
use crate::autodiff::{AdamState, ParamStore, Real, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SFIRCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Training stage that produced a checkpoint.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Init,
    Pretrain,
    Main,
    Finetune,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Init => "init",
            Phase::Pretrain => "pretrain",
            Phase::Main => "main",
            Phase::Finetune => "finetune",
        }
    }

    fn code(self) -> u8 {
        self as u8
    }

    fn from_code(c: u8) -> Result<Self> {
        Ok(match c {
            0 => Phase::Init,
            1 => Phase::Pretrain,
            2 => Phase::Main,
            3 => Phase::Finetune,
            _ => return Err(Error::Integrity(format!("unknown phase code {c}"))),
        })
    }
}

#[derive(Clone, Debug)]
pub struct Checkpoint<T> {
    pub model: ReverbModel<T>,
    pub train: TrainConfig,
    pub phase: Phase,
    pub epoch: usize,
    pub best_val: f64,
    pub adam: Option<AdamState<T>>,
}

struct Entry {
    name: String,
    dtype: u8,
    dims: Vec<usize>,
    offset: usize,
    nbytes: usize,
}

impl<T: Real> Checkpoint<T> {
    pub fn new(model: ReverbModel<T>, train: TrainConfig, phase: Phase) -> Self {
        Checkpoint { model, train, phase, epoch: 0, best_val: f64::INFINITY, adam: None }
    }

    pub fn config(&self) -> Config {
        Config { model: self.model.config.clone(), train: self.train.clone() }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let params = &self.model.params;
        let mut tensors: Vec<(String, &[usize], &[T])> =
            params.iter().map(|(_, p)| (p.name.clone(), p.value().shape(), p.value().data())).collect();
        let (lr, t) = self.adam.as_ref().map_or((0.0, 0), |a| (a.lr.to_f64().unwrap_or(0.0), a.steps()));
        if let Some(adam) = &self.adam {
            let (m, v) = adam.moments();
            if m.len() == params.len() {
                for (i, (_, p)) in params.iter().enumerate() {
                    tensors.push((format!("adam.m/{}", p.name), p.value().shape(), &m[i]));
                }
                for (i, (_, p)) in params.iter().enumerate() {
                    tensors.push((format!("adam.v/{}", p.name), p.value().shape(), &v[i]));
                }
            }
        }

        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let text = self.config().to_text();
        out.extend_from_slice(&(text.len() as u32).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        out.push(self.phase.code());
        out.extend_from_slice(&(self.epoch as u64).to_le_bytes());
        out.extend_from_slice(&self.best_val.to_le_bytes());
        out.extend_from_slice(&lr.to_le_bytes());
        out.extend_from_slice(&t.to_le_bytes());

        let mut data = Vec::new();
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (name, shape, values) in &tensors {
            let offset = data.len();
            T::to_le_vec(values, &mut data);
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(T::DTYPE);
            out.push(shape.len() as u8);
            for &d in *shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&(offset as u64).to_le_bytes());
            out.extend_from_slice(&((data.len() - offset) as u64).to_le_bytes());
        }
        out.extend_from_slice(&(data.len() as u64).to_le_bytes());
        out.extend_from_slice(&data);
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    /// Checks magic, then version, then the checksum, before parsing anything else.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(Error::Integrity("not a checkpoint file (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version { found: version, expected: CHECKPOINT_VERSION });
        }
        if bytes.len() < 12 + 32 {
            return Err(Error::Integrity("file truncated".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Integrity("checksum mismatch".into()));
        }

        let mut r = Reader { buf: body, pos: 12 };
        let text_len = r.u32()? as usize;
        let text = std::str::from_utf8(r.take(text_len)?).map_err(|_| Error::Integrity("config is not UTF-8".into()))?;
        let config = Config::parse(text)?;
        let phase = Phase::from_code(r.u8()?)?;
        let epoch = r.u64()? as usize;
        let best_val = r.f64()?;
        let lr = r.f64()?;
        let t = r.u64()?;
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|_| Error::Integrity("entry name is not UTF-8".into()))?;
            let dtype = r.u8()?;
            let ndim = r.u8()? as usize;
            let dims = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let offset = r.u64()? as usize;
            let nbytes = r.u64()? as usize;
            entries.push(Entry { name, dtype, dims, offset, nbytes });
        }
        let data_len = r.u64()? as usize;
        let data = r.take(data_len)?;
        if r.pos != body.len() {
            return Err(Error::Integrity("trailing bytes after data".into()));
        }

        let read = |e: &Entry| -> Result<Tensor<T>> {
            let width = match e.dtype {
                1 => 4,
                2 => 8,
                d => return Err(Error::Integrity(format!("{}: unknown dtype {d}", e.name))),
            };
            let n: usize = e.dims.iter().product();
            let end = e.offset.checked_add(e.nbytes).filter(|&end| end <= data.len());
            if n * width != e.nbytes || end.is_none() {
                return Err(Error::Integrity(format!("{}: inconsistent extent", e.name)));
            }
            let raw = &data[e.offset..e.offset + e.nbytes];
            let values: Vec<T> = if e.dtype == 1 {
                f32::from_le_slice(raw).into_iter().map(|v| T::lit(f64::from(v))).collect()
            } else {
                f64::from_le_slice(raw).into_iter().map(T::lit).collect()
            };
            Tensor::new(&e.dims, values)
        };

        let mut params = ParamStore::new();
        let mut m = Vec::new();
        let mut v = Vec::new();
        for e in &entries {
            let tensor = read(e)?;
            if let Some(rest) = e.name.strip_prefix("adam.m/") {
                m.push((rest.to_string(), tensor.into_data()));
            } else if let Some(rest) = e.name.strip_prefix("adam.v/") {
                v.push((rest.to_string(), tensor.into_data()));
            } else {
                params.add(e.name.clone(), crate::autodiff::ParamGroup::Backend, tensor);
            }
        }
        let model = ReverbModel::from_params(config.model, params)?;

        let adam = if t > 0 || !m.is_empty() {
            let order = |list: Vec<(String, Vec<T>)>| -> Result<Vec<Vec<T>>> {
                if list.len() != model.params.len() {
                    return Err(Error::Integrity("optimizer moments do not cover every parameter".into()));
                }
                let mut out = vec![Vec::new(); list.len()];
                for (name, data) in list {
                    let id = model.params.find(&name).ok_or_else(|| Error::Integrity(format!("moment for unknown parameter {name}")))?;
                    out[id.index()] = data;
                }
                Ok(out)
            };
            Some(AdamState::restore(T::lit(lr), t, order(m)?, order(v)?))
        } else {
            None
        };
        Ok(Checkpoint { model, train: config.train, phase, epoch, best_val, adam })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| Error::Integrity("unexpected end of data".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Graph;
    use crate::dsp::FrameStack;
    use crate::model::ModelConfig;

    fn sample() -> Checkpoint<f32> {
        let model = ReverbModel::new(ModelConfig::desk(), 3).unwrap();
        let mut ck = Checkpoint::new(model, TrainConfig::desk(), Phase::Main);
        ck.epoch = 17;
        ck.best_val = 0.125;
        ck
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = sample();
        let back = Checkpoint::<f32>::from_bytes(&ck.to_bytes()).unwrap();
        assert!(back.model.params.bit_identical(&ck.model.params));
        assert_eq!((back.phase, back.epoch, back.best_val), (Phase::Main, 17, 0.125));
        assert_eq!(back.config(), ck.config());
        assert!(back.adam.is_none());

        let stack = FrameStack::zeros(4, 512, 256);
        let run = |m: &ReverbModel<f32>| {
            let g = Graph::new();
            let y = m.forward(&m.infer_ctx(&g), &stack).unwrap();
            g.value(y).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(run(&ck.model), run(&back.model));
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = sample().to_bytes();
        let truncated = &bytes[..bytes.len() / 2];
        assert!(matches!(Checkpoint::<f32>::from_bytes(truncated), Err(Error::Integrity(_))));
        let mut flipped = bytes.clone();
        let mid = flipped.len() / 2;
        flipped[mid] ^= 1;
        assert!(matches!(Checkpoint::<f32>::from_bytes(&flipped), Err(Error::Integrity(_))));
        let mut versioned = bytes.clone();
        versioned[8..12].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(Checkpoint::<f32>::from_bytes(&versioned), Err(Error::Version { found: 7, expected: 1 })));
        assert!(matches!(Checkpoint::<f32>::from_bytes(b"RIFF....WAVE"), Err(Error::Integrity(_))));
    }

    #[test]
    fn f32_file_loads_as_f64() {
        let ck = sample();
        let back = Checkpoint::<f64>::from_bytes(&ck.to_bytes()).unwrap();
        let (_, p) = back.model.params.iter().next().unwrap();
        let (_, q) = ck.model.params.iter().next().unwrap();
        assert_eq!(p.value().data()[0], f64::from(q.value().data()[0]));
    }
}
