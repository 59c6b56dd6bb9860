//! Versioned binary checkpoint container.
//!
//! Little-endian layout: magic `V2P1`, `u32` version, length-prefixed config
//! text and phoneme inventory, `u64` iteration and epoch, the loss history,
//! then four named tensor sections (generator, discriminators, and the two
//! optimizer states). Every tensor is stored as 32-bit floats.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use svs_core::score::PhonemeInventory;

use crate::config::Config;
use crate::gan::LossBreakdown;
use crate::model::Generator;
use crate::optim::{AdamW, Moments};
use crate::params::ParamStore;
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"V2P1";
pub const VERSION: u32 = 1;

/// Shape and values of one stored tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Blob {
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

impl Blob {
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        Ok(Self {
            shape: t.dims().to_vec(),
            values: t.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?,
        })
    }

    pub fn to_tensor(&self, dtype: DType) -> Result<Tensor> {
        Ok(Tensor::from_slice(&self.values, self.shape.as_slice(), &Device::Cpu)?.to_dtype(dtype)?)
    }
}

pub type Section = BTreeMap<String, Blob>;

/// Optimizer step counter plus first/second moments per parameter.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Section,
    pub v: Section,
}

impl OptimizerState {
    pub fn capture(opt: &AdamW) -> Result<Self> {
        let mut s = Self {
            step: opt.step,
            ..Self::default()
        };
        for (name, mom) in &opt.moments {
            s.m.insert(name.clone(), Blob::from_tensor(&mom.m)?);
            s.v.insert(name.clone(), Blob::from_tensor(&mom.v)?);
        }
        Ok(s)
    }

    pub fn restore(&self, opt: &mut AdamW, dtype: DType) -> Result<()> {
        if self.m.len() != opt.moments.len() {
            return Err(Error::Format("optimizer state does not match the model".into()));
        }
        for (name, mom) in opt.moments.iter_mut() {
            let (Some(m), Some(v)) = (self.m.get(name), self.v.get(name)) else {
                return Err(Error::Format(format!("optimizer state lacks {name}")));
            };
            *mom = Moments {
                m: m.to_tensor(dtype)?,
                v: v.to_tensor(dtype)?,
            };
        }
        opt.step = self.step;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: Config,
    pub inventory: PhonemeInventory,
    /// Completed training steps.
    pub iteration: u64,
    pub epoch: u64,
    pub history: Vec<LossBreakdown>,
    pub generator: Section,
    pub discriminators: Section,
    pub gen_opt: OptimizerState,
    pub disc_opt: OptimizerState,
}

pub fn capture_params(store: &ParamStore) -> Result<Section> {
    store
        .iter()
        .map(|(name, var)| Ok((name.to_string(), Blob::from_tensor(var.as_tensor())?)))
        .collect()
}

/// Writes stored values into an already built store; names and shapes must
/// match exactly.
pub fn restore_params(section: &Section, store: &ParamStore) -> Result<()> {
    if section.len() != store.len() {
        return Err(Error::Format(format!(
            "checkpoint has {} tensors, model has {}",
            section.len(),
            store.len()
        )));
    }
    for (name, var) in store.iter() {
        let blob = section
            .get(name)
            .ok_or_else(|| Error::Format(format!("checkpoint lacks parameter {name}")))?;
        if blob.shape != var.dims() {
            return Err(Error::Format(format!(
                "parameter {name}: stored shape {:?}, model shape {:?}",
                blob.shape,
                var.dims()
            )));
        }
        var.set(&blob.to_tensor(store.dtype())?)?;
    }
    Ok(())
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn len(&mut self, n: usize) -> Result<()> {
        self.u32(u32::try_from(n).map_err(|_| Error::Format("length exceeds u32".into()))?);
        Ok(())
    }
    fn str(&mut self, s: &str) -> Result<()> {
        self.len(s.len())?;
        self.0.extend_from_slice(s.as_bytes());
        Ok(())
    }
    fn section(&mut self, s: &Section) -> Result<()> {
        self.len(s.len())?;
        for (name, blob) in s {
            self.str(name)?;
            self.len(blob.shape.len())?;
            for &d in &blob.shape {
                self.len(d)?;
            }
            for v in &blob.values {
                self.0.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("checkpoint is truncated".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
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
    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("invalid UTF-8 string".into()))
    }
    fn section(&mut self) -> Result<Section> {
        let n = self.u32()?;
        let mut out = Section::new();
        for _ in 0..n {
            let name = self.str()?;
            let rank = self.u32()? as usize;
            let shape = (0..rank).map(|_| Ok(self.u32()? as usize)).collect::<Result<Vec<_>>>()?;
            let count: usize = shape.iter().product();
            let raw = self.take(count.checked_mul(4).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
            let values = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            out.insert(name, Blob { shape, values });
        }
        Ok(out)
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(VERSION);
        w.str(&self.config.to_text())?;
        w.str(&self.inventory.to_text())?;
        w.u64(self.iteration);
        w.u64(self.epoch);
        w.len(self.history.len())?;
        for h in &self.history {
            for (_, v) in h.terms() {
                w.f64(v);
            }
        }
        w.section(&self.generator)?;
        w.section(&self.discriminators)?;
        for opt in [&self.gen_opt, &self.disc_opt] {
            w.u64(opt.step);
            w.section(&opt.m)?;
            w.section(&opt.v)?;
        }
        Ok(w.0)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4).ok() != Some(MAGIC.as_slice()) {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let config = Config::from_text(&r.str()?)?;
        let inventory = PhonemeInventory::from_text(&r.str()?)?;
        let iteration = r.u64()?;
        let epoch = r.u64()?;
        let n_hist = r.u32()? as usize;
        let mut history = Vec::with_capacity(n_hist.min(1 << 16));
        for _ in 0..n_hist {
            let mut v = [0.0; 7];
            for slot in &mut v {
                *slot = r.f64()?;
            }
            history.push(LossBreakdown {
                kl: v[0],
                mel_l1: v[1],
                adv_g: v[2],
                adv_d: v[3],
                feat_match: v[4],
                total_g: v[5],
                total_d: v[6],
            });
        }
        let generator = r.section()?;
        let discriminators = r.section()?;
        let mut opts = Vec::new();
        for _ in 0..2 {
            let step = r.u64()?;
            let m = r.section()?;
            let v = r.section()?;
            opts.push(OptimizerState { step, m, v });
        }
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }
        let disc_opt = opts.pop().expect("two optimizers");
        let gen_opt = opts.pop().expect("two optimizers");
        Ok(Self {
            config,
            inventory,
            iteration,
            epoch,
            history,
            generator,
            discriminators,
            gen_opt,
            disc_opt,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        std::fs::File::create(path)
            .and_then(|mut f| f.write_all(&bytes))
            .map_err(|e| Error::file(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::file(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Rebuilds the generator alone, for synthesis.
    pub fn generator(&self, dtype: DType) -> Result<(Generator, ParamStore)> {
        let mut store = ParamStore::new(self.config.train.seed, dtype);
        let g = Generator::new(&self.config, &mut store)?;
        restore_params(&self.generator, &store)?;
        Ok((g, store))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bad_magic() {
        let err = Checkpoint::from_bytes(b"NOPE\x01\0\0\0").unwrap_err();
        assert!(matches!(err, Error::Format(_)), "{err}");
        assert!(Checkpoint::from_bytes(b"V2").is_err());
    }

    #[test]
    fn bytes_round_trip() {
        let mut g = Section::new();
        g.insert(
            "a".into(),
            Blob {
                shape: vec![2, 1],
                values: vec![1.5, -f32::MIN_POSITIVE],
            },
        );
        let ck = Checkpoint {
            config: Config::default(),
            inventory: PhonemeInventory::new(["SP", "a"]).unwrap(),
            iteration: 42,
            epoch: 3,
            history: vec![LossBreakdown {
                kl: 0.1,
                mel_l1: 2.0,
                ..Default::default()
            }],
            generator: g.clone(),
            discriminators: Section::new(),
            gen_opt: OptimizerState {
                step: 42,
                m: g.clone(),
                v: g,
            },
            disc_opt: OptimizerState::default(),
        };
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(back, ck);
        let mut bytes = ck.to_bytes().unwrap();
        bytes.pop();
        assert!(Checkpoint::from_bytes(&bytes).is_err());
    }
}
