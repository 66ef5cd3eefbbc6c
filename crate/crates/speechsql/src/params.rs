//! Named parameter store, forward-pass binding, Adam, and checkpoint files.
//!
//! Checkpoints are a raw binary tensor dump (`.bin`) plus a JSON sidecar
//! written by the training loop; reloading reproduces forward outputs
//! bit-exactly since values are stored as little-endian f64.

use crate::tensor::{Grads, Tape, Var};
use indexmap::IndexMap;
use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

const CKPT_MAGIC: &[u8; 5] = b"SQLP1";

#[derive(Debug, Error)]
pub enum ParamError {
    #[error("unknown parameter {0:?}")]
    Unknown(String),
    #[error("bad checkpoint file: {0}")]
    BadCheckpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone)]
pub struct Param {
    pub value: ArrayD<f64>,
    pub trainable: bool,
}

/// Ordered map of named tensors. Iteration order is insertion order, which
/// keeps optimizer updates and checkpoints deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: IndexMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: ArrayD<f64>, trainable: bool) {
        let prev = self.entries.insert(name.to_string(), Param { value, trainable });
        assert!(prev.is_none(), "parameter {name} inserted twice");
    }

    pub fn get(&self, name: &str) -> &ArrayD<f64> {
        &self
            .entries
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
            .value
    }

    pub fn get_mut(&mut self, name: &str) -> &mut ArrayD<f64> {
        &mut self
            .entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
            .value
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn n_scalars(&self) -> usize {
        self.entries.values().map(|p| p.value.len()).sum()
    }

    /// Copy every entry of `other` whose name and shape match into `self`.
    /// Returns the copied names; errors if a shared name has mismatched shape.
    pub fn load_matching(&mut self, other: &ParamStore) -> Result<Vec<String>, ParamError> {
        let mut copied = Vec::new();
        for (name, param) in &other.entries {
            if let Some(mine) = self.entries.get_mut(name) {
                if mine.value.shape() != param.value.shape() {
                    return Err(ParamError::BadCheckpoint(format!(
                        "shape mismatch for {name}: {:?} vs {:?}",
                        mine.value.shape(),
                        param.value.shape()
                    )));
                }
                mine.value = param.value.clone();
                copied.push(name.clone());
            }
        }
        Ok(copied)
    }

    // -- initialization helpers --

    pub fn init_xavier(&mut self, name: &str, rows: usize, cols: usize, rng: &mut ChaCha8Rng) {
        let a = (6.0 / (rows + cols) as f64).sqrt();
        let v = ArrayD::from_shape_fn(IxDyn(&[rows, cols]), |_| rng.gen_range(-a..a));
        self.insert(name, v, true);
    }

    pub fn init_conv(
        &mut self,
        name: &str,
        shape: [usize; 4],
        rng: &mut ChaCha8Rng,
    ) {
        let fan_in = shape[1] * shape[2] * shape[3];
        let fan_out = shape[0] * shape[2] * shape[3];
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let v = ArrayD::from_shape_fn(IxDyn(&shape), |_| rng.gen_range(-a..a));
        self.insert(name, v, true);
    }

    /// Uniform init with an explicit amplitude, for bilinear score maps whose
    /// logit variance must stay O(1) at the model width.
    pub fn init_uniform(&mut self, name: &str, rows: usize, cols: usize, amp: f64, rng: &mut ChaCha8Rng) {
        let v = ArrayD::from_shape_fn(IxDyn(&[rows, cols]), |_| rng.gen_range(-amp..amp));
        self.insert(name, v, true);
    }

    pub fn init_zeros(&mut self, name: &str, rows: usize, cols: usize) {
        self.insert(name, ArrayD::zeros(IxDyn(&[rows, cols])), true);
    }

    pub fn init_const(&mut self, name: &str, rows: usize, cols: usize, value: f64) {
        self.insert(name, ArrayD::from_elem(IxDyn(&[rows, cols]), value), true);
    }

    pub fn init_embedding(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        amp: f64,
        rng: &mut ChaCha8Rng,
    ) {
        let v = ArrayD::from_shape_fn(IxDyn(&[rows, cols]), |_| rng.gen_range(-amp..amp));
        self.insert(name, v, true);
    }

    /// Non-trainable running statistic, e.g. batch-norm mean/variance.
    pub fn init_stat(&mut self, name: &str, len: usize, value: f64) {
        self.insert(
            name,
            ArrayD::from_elem(IxDyn(&[1, len]), value),
            false,
        );
    }

    // -- checkpoint I/O --

    pub fn save(&self, path: &Path) -> Result<(), ParamError> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        w.write_all(CKPT_MAGIC)?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for (name, p) in &self.entries {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&[u8::from(p.trainable)])?;
            w.write_all(&(p.value.ndim() as u32).to_le_bytes())?;
            for d in p.value.shape() {
                w.write_all(&(*d as u32).to_le_bytes())?;
            }
            for v in p.value.iter() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ParamError> {
        let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 5];
        r.read_exact(&mut magic)?;
        if &magic != CKPT_MAGIC {
            return Err(ParamError::BadCheckpoint("bad magic".into()));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let n = u32::from_le_bytes(b4) as usize;
        let mut store = ParamStore::new();
        for _ in 0..n {
            r.read_exact(&mut b4)?;
            let name_len = u32::from_le_bytes(b4) as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|e| ParamError::BadCheckpoint(e.to_string()))?;
            let mut b1 = [0u8; 1];
            r.read_exact(&mut b1)?;
            let trainable = b1[0] != 0;
            r.read_exact(&mut b4)?;
            let ndim = u32::from_le_bytes(b4) as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                r.read_exact(&mut b4)?;
                shape.push(u32::from_le_bytes(b4) as usize);
            }
            let len: usize = shape.iter().product();
            let mut data = Vec::with_capacity(len);
            let mut b8 = [0u8; 8];
            for _ in 0..len {
                r.read_exact(&mut b8)?;
                data.push(f64::from_le_bytes(b8));
            }
            let value = ArrayD::from_shape_vec(IxDyn(&shape), data)
                .map_err(|e| ParamError::BadCheckpoint(e.to_string()))?;
            store.insert(&name, value, trainable);
        }
        Ok(store)
    }
}

/// A forward pass: a tape plus lazily bound parameter leaves.
pub struct Session<'p> {
    pub tape: Tape,
    params: &'p ParamStore,
    bound: IndexMap<String, Var>,
}

impl<'p> Session<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            tape: Tape::new(),
            params,
            bound: IndexMap::new(),
        }
    }

    /// Bind a parameter as a tape leaf (once per session).
    pub fn param(&mut self, name: &str) -> Var {
        if let Some(v) = self.bound.get(name) {
            return *v;
        }
        let v = self.tape.leaf(self.params.get(name).clone());
        self.bound.insert(name.to_string(), v);
        v
    }

    pub fn store(&self) -> &ParamStore {
        self.params
    }

    /// Gradients per bound parameter after a backward pass.
    pub fn param_grads(&self, grads: &Grads) -> IndexMap<String, ArrayD<f64>> {
        self.bound
            .iter()
            .map(|(name, var)| {
                let shape = self.params.get(name).shape().to_vec();
                (name.clone(), grads.get(*var, &shape))
            })
            .collect()
    }
}

/// Global-norm gradient clipping; returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut IndexMap<String, ArrayD<f64>>, max_norm: f64) -> f64 {
    let mut sq = 0.0;
    for g in grads.values() {
        sq += g.iter().map(|v| v * v).sum::<f64>();
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            *g *= s;
        }
    }
    norm
}

/// Adam with bias correction.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: IndexMap<String, ArrayD<f64>>,
    v: IndexMap<String, ArrayD<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: IndexMap::new(),
            v: IndexMap::new(),
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &IndexMap<String, ArrayD<f64>>) {
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for (name, g) in grads {
            let p = params.entries.get_mut(name).expect("grad for known param");
            if !p.trainable {
                continue;
            }
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            ndarray::Zip::from(&mut p.value)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|pv, mv, vv, gv| {
                    *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                    *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                    let mhat = *mv / b1t;
                    let vhat = *vv / b2t;
                    *pv -= self.lr * mhat / (vhat.sqrt() + self.eps);
                });
        }
    }
}

/// Deterministic RNG helper for parameter init.
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
