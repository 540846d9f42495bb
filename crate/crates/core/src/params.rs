//! Named parameter storage, checkpoint files and the optimizer.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use indexmap::IndexMap;
use soc_tensor::{Gradients, Tensor, Var};

use crate::config::{Config, Optimizer};
use crate::error::{io_err, Result, SocError};

const CHECKPOINT_MAGIC: &[u8; 4] = b"SOCP";
const CHECKPOINT_VERSION: u32 = 1;

/// Parameters keyed by path-like names (`encoders.visual.stage2.weight`),
/// kept in insertion order so iteration and checkpoints are deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: IndexMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, mut t: Tensor) {
        t.requires_grad = true;
        self.params.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn zero_grad(&mut self) {
        self.params.values_mut().for_each(Tensor::zero_grad);
    }

    /// Adds the gradients of every bound parameter into its `grad` field.
    pub fn accumulate_grads(&mut self, bindings: &HashMap<String, Var>, grads: &Gradients) {
        for (name, &var) in bindings {
            if let (Some(t), Some(g)) = (self.params.get_mut(name), grads.get(var)) {
                t.accumulate_grad(g);
            }
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.params
            .values()
            .filter_map(|t| t.grad.as_ref())
            .flat_map(|g| g.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// Checkpoint encoding: magic `SOCP`, `u32` version, `u32` count, then
    /// per entry `u32` name length, UTF-8 name, tensor encoding.
    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(self.params.len() as u32).to_le_bytes())?;
        for (name, t) in &self.params {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            t.write_to(w)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn read_from<R: Read>(r: &mut R, origin: &Path) -> Result<Self> {
        let bad = |reason: String| SocError::Format { path: origin.to_path_buf(), reason };
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(io_err(origin))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(bad("not a parameter checkpoint".into()));
        }
        let version = read_u32(r, origin)?;
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        let count = read_u32(r, origin)?;
        let mut store = Self::new();
        for _ in 0..count {
            let len = read_u32(r, origin)? as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name).map_err(io_err(origin))?;
            let name = String::from_utf8(name).map_err(|_| bad("parameter name is not UTF-8".into()))?;
            let t = Tensor::read_from(r).map_err(|e| bad(format!("{name}: {e}")))?;
            store.insert(name, t);
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(io_err(path))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w).map_err(io_err(path))?;
        w.flush().map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(io_err(path))?;
        Self::read_from(&mut BufReader::new(file), path)
    }

    /// Checks that `self` has exactly the keys and shapes of `expected`.
    pub fn check_compatible(&self, expected: &ParamStore) -> Result<()> {
        for (name, t) in &expected.params {
            match self.params.get(name) {
                None => return Err(SocError::MissingParam(name.clone())),
                Some(found) if found.shape() != t.shape() => {
                    return Err(SocError::CheckpointShape {
                        key: name.clone(),
                        expected: t.shape().to_vec(),
                        found: found.shape().to_vec(),
                    })
                }
                Some(_) => {}
            }
        }
        if let Some(extra) = self.params.keys().find(|k| !expected.params.contains_key(*k)) {
            return Err(SocError::Contract(format!("checkpoint has unexpected parameter `{extra}`")));
        }
        Ok(())
    }
}

fn read_u32<R: Read>(r: &mut R, origin: &Path) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(io_err(origin))?;
    Ok(u32::from_le_bytes(b))
}

/// Adam / AdamW with bias correction, optionally clipping the global
/// gradient norm first.
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    decoupled: bool,
    clip: f64,
    step: u64,
    moments: HashMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            decoupled: false,
            clip: 0.0,
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn from_config(cfg: &Config) -> Self {
        Self {
            weight_decay: cfg.weight_decay,
            decoupled: cfg.optimizer == Optimizer::AdamW,
            clip: cfg.grad_clip,
            ..Self::new(cfg.learning_rate)
        }
    }

    pub fn learning_rate(&self) -> f64 {
        self.lr
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update from the accumulated `grad` fields and clears them.
    pub fn step(&mut self, store: &mut ParamStore) {
        self.step += 1;
        let norm = store.grad_norm();
        let scale = if self.clip > 0.0 && norm > self.clip { self.clip / norm } else { 1.0 };
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (name, t) in store.params.iter_mut() {
            let Some(grad) = t.grad.take() else { continue };
            let n = grad.len();
            let (m, v) = self.moments.entry(name.clone()).or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            let data = t.data_mut();
            for i in 0..n {
                let mut g = grad[i] * scale;
                if !self.decoupled {
                    g += self.weight_decay * data[i];
                }
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let update = (m[i] / bc1) / ((v[i] / bc2).sqrt() + self.eps);
                if self.decoupled {
                    data[i] -= self.lr * self.weight_decay * data[i];
                }
                data[i] -= self.lr * update;
            }
        }
    }
}
