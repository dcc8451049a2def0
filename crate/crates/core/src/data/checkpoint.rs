//! Binary training checkpoints.
//!
//! Layout, little-endian: `"MEVCCKPT"`, `u32` version, then the config text,
//! the vocabulary text, the step counter, the named parameter tensors, the
//! optimizer state and the plateau state. Strings are `u32` length plus UTF-8,
//! tensors are `u32` rank, `u64` extents and `f64` values. All randomness of
//! a step is derived from the seed and the step counter, so these two are
//! the complete generator state.

use std::fs;
use std::path::Path;

use super::config::Config;
use super::VideoFeatures;
use crate::autograd::Tensor;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::training::{Optimizer, OptimizerKind, Plateau, Trainer};
use crate::vocab::Vocabulary;

pub const MAGIC: &[u8; 8] = b"MEVCCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: Config,
    pub vocab: Vocabulary,
    pub step: u64,
    pub params: Vec<(String, Tensor)>,
    pub optimizer: Optimizer,
    pub plateau: Plateau,
    pub window_loss: f64,
    pub window_steps: u64,
}

#[derive(Default)]
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
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }
    fn tensor(&mut self, t: &Tensor) {
        self.u32(t.shape().len() as u32);
        for &d in t.shape() {
            self.u64(d as u64);
        }
        for &v in t.data() {
            self.f64(v);
        }
    }
    fn tensors(&mut self, ts: &[Tensor]) {
        self.u32(ts.len() as u32);
        for t in ts {
            self.tensor(t);
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::parse(
                self.pos,
                format!("checkpoint truncated, need {n} more bytes"),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
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
    fn str(&mut self) -> Result<&'a str> {
        let n = self.u32()? as usize;
        let at = self.pos;
        std::str::from_utf8(self.take(n)?).map_err(|_| Error::parse(at, "string is not UTF-8"))
    }
    fn tensor(&mut self) -> Result<Tensor> {
        let at = self.pos;
        let rank = self.u32()? as usize;
        let shape = (0..rank)
            .map(|_| Ok(self.u64()? as usize))
            .collect::<Result<Vec<_>>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|n| n.checked_mul(8).is_some_and(|b| b <= self.bytes.len() - self.pos))
            .ok_or_else(|| Error::parse(at, format!("tensor of shape {shape:?} exceeds the file")))?;
        let data = (0..n).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
        Tensor::new(shape, data).map_err(|e| Error::parse(at, e.to_string()))
    }
    fn tensors(&mut self) -> Result<Vec<Tensor>> {
        let n = self.u32()? as usize;
        (0..n).map(|_| self.tensor()).collect()
    }
}

impl Checkpoint {
    pub fn from_trainer(t: &Trainer, config: &Config) -> Self {
        let store = &t.model.store;
        Checkpoint {
            config: Config {
                model: t.model.config.clone(),
                train: t.config.clone(),
                inference: config.inference.clone(),
            },
            vocab: t.vocab.clone(),
            step: t.step,
            params: store
                .ids()
                .map(|id| (store.name(id).to_string(), store.value(id).clone()))
                .collect(),
            optimizer: t.optimizer.clone(),
            plateau: t.plateau.clone(),
            window_loss: t.window_loss,
            window_steps: t.window_steps,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.0.extend_from_slice(MAGIC);
        w.u32(VERSION);
        w.str(&self.config.to_text());
        w.str(&self.vocab.to_text());
        w.u64(self.step);
        w.u32(self.params.len() as u32);
        for (name, t) in &self.params {
            w.str(name);
            w.tensor(t);
        }
        let o = &self.optimizer;
        w.u32(match o.kind {
            OptimizerKind::Sgd => 0,
            OptimizerKind::Adam => 1,
        });
        w.f64(o.lr);
        w.f64(o.momentum);
        w.f64(o.clip_norm);
        w.u64(o.steps);
        w.tensors(&o.first);
        w.tensors(&o.second);
        let p = &self.plateau;
        w.f64(p.factor);
        w.u32(p.patience);
        w.f64(p.threshold);
        w.f64(p.best);
        w.u32(p.bad_evals);
        w.f64(self.window_loss);
        w.u64(self.window_steps);
        w.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(Error::parse(0, "bad magic, not a checkpoint"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::parse(
                MAGIC.len(),
                format!("checkpoint version {version}, expected {VERSION}"),
            ));
        }
        let config = Config::parse(r.str()?)?;
        let vocab = Vocabulary::from_text(r.str()?)?;
        let step = r.u64()?;
        let n = r.u32()? as usize;
        let params = (0..n)
            .map(|_| Ok((r.str()?.to_string(), r.tensor()?)))
            .collect::<Result<Vec<_>>>()?;
        let at = r.pos;
        let kind = match r.u32()? {
            0 => OptimizerKind::Sgd,
            1 => OptimizerKind::Adam,
            k => return Err(Error::parse(at, format!("unknown optimizer tag {k}"))),
        };
        let optimizer = Optimizer {
            kind,
            lr: r.f64()?,
            momentum: r.f64()?,
            clip_norm: r.f64()?,
            steps: r.u64()?,
            first: r.tensors()?,
            second: r.tensors()?,
        };
        let plateau = Plateau {
            factor: r.f64()?,
            patience: r.u32()?,
            threshold: r.f64()?,
            best: r.f64()?,
            bad_evals: r.u32()?,
        };
        let window_loss = r.f64()?;
        let window_steps = r.u64()?;
        if r.pos != bytes.len() {
            return Err(Error::parse(r.pos, "trailing bytes after checkpoint"));
        }
        Ok(Checkpoint {
            config,
            vocab,
            step,
            params,
            optimizer,
            plateau,
            window_loss,
            window_steps,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Rebuilds the model and installs the stored parameters.
    pub fn model(&self) -> Result<Model> {
        let mut model = Model::new(
            self.config.model.clone(),
            self.vocab.len(),
            self.config.train.seed,
        )?;
        if model.store.len() != self.params.len() {
            return Err(Error::Validation(format!(
                "checkpoint has {} tensors, model expects {}",
                self.params.len(),
                model.store.len()
            )));
        }
        for (name, t) in &self.params {
            let id = model.store.id(name).ok_or_else(|| {
                Error::Validation(format!("checkpoint tensor {name:?} is not a model parameter"))
            })?;
            model.store.set(id, t.clone())?;
        }
        Ok(model)
    }

    /// Restores the full training state over `dataset`.
    pub fn into_trainer(self, dataset: &[VideoFeatures]) -> Result<Trainer> {
        let model = self.model()?;
        let mut t = Trainer::new(model, self.vocab, self.config.train, dataset)?;
        if self.optimizer.first.len() != t.optimizer.first.len() {
            return Err(Error::Validation(
                "optimizer state does not match the model".into(),
            ));
        }
        t.optimizer = self.optimizer;
        t.plateau = self.plateau;
        t.step = self.step;
        t.window_loss = self.window_loss;
        t.window_steps = self.window_steps;
        Ok(t)
    }
}
