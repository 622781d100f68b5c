//! Named parameter storage shared by every model family.
//!
//! Learnable tensors and non-learnable buffers (batch-norm running statistics)
//! live in two ordered maps so iteration order, and therefore checkpoint layout
//! and optimizer order, is deterministic. Initial values come from a ChaCha
//! stream keyed by `(seed, parameter name)`, so adding a module never changes
//! how the others are initialised.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Mutex;

use candle_core::{DType, Device, Shape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Const(f64),
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`
    FanIn(usize),
}

pub struct ParamStore {
    params: BTreeMap<String, Var>,
    buffers: BTreeMap<String, Var>,
    dtype: DType,
    device: Device,
    seed: u64,
    detached: bool,
    touched: Mutex<BTreeSet<String>>,
}

impl Clone for ParamStore {
    /// Shallow clone: the copy shares tensor storage with `self`.
    fn clone(&self) -> Self {
        Self {
            params: self.params.clone(),
            buffers: self.buffers.clone(),
            dtype: self.dtype,
            device: self.device.clone(),
            seed: self.seed,
            detached: self.detached,
            touched: Mutex::new(self.touched.lock().expect("poisoned").clone()),
        }
    }
}

impl std::fmt::Debug for ParamStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ParamStore")
            .field("params", &self.params.len())
            .field("buffers", &self.buffers.len())
            .field("dtype", &self.dtype)
            .finish()
    }
}

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

impl ParamStore {
    pub fn new(dtype: DType, seed: u64) -> Self {
        Self {
            params: BTreeMap::new(),
            buffers: BTreeMap::new(),
            dtype,
            device: Device::Cpu,
            seed,
            detached: false,
            touched: Mutex::new(BTreeSet::new()),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Seed for tensors created from now on.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
    }

    fn materialize(&self, name: &str, shape: &Shape, init: Init) -> Result<Tensor> {
        let n = shape.elem_count();
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Const(v) => vec![v; n],
            Init::FanIn(fan_in) => {
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a(name));
                (0..n).map(|_| rng.random_range(-bound..bound)).collect()
            }
        };
        Ok(Tensor::from_vec(values, shape.clone(), &self.device)?.to_dtype(self.dtype)?)
    }

    fn claim(
        map: &BTreeMap<String, Var>,
        touched: &Mutex<BTreeSet<String>>,
        name: &str,
        shape: &Shape,
    ) -> Result<Option<Var>> {
        touched.lock().expect("poisoned").insert(name.to_string());
        match map.get(name) {
            Some(v) if v.shape() != shape => Err(Error::Shape(format!(
                "parameter {name} has shape {:?}, module expects {:?}",
                v.shape(),
                shape
            ))),
            Some(v) => Ok(Some(v.clone())),
            None => Ok(None),
        }
    }

    /// When set, [`param`](Self::param) hands out views that share storage
    /// but record no autograd graph, so inference forwards free activations
    /// as they go.
    pub fn set_detached(&mut self, detached: bool) {
        self.detached = detached;
    }

    pub fn is_detached(&self) -> bool {
        self.detached
    }

    fn view(&self, v: &Var) -> Tensor {
        if self.detached {
            v.as_detached_tensor()
        } else {
            v.as_tensor().clone()
        }
    }

    /// Returns the learnable tensor `name`, creating it if absent.
    pub fn param(&mut self, name: &str, shape: impl Into<Shape>, init: Init) -> Result<Tensor> {
        let shape = shape.into();
        if let Some(v) = Self::claim(&self.params, &self.touched, name, &shape)? {
            return Ok(self.view(&v));
        }
        let var = Var::from_tensor(&self.materialize(name, &shape, init)?)?;
        self.params.insert(name.to_string(), var.clone());
        Ok(self.view(&var))
    }

    /// Returns the non-learnable buffer `name`, creating it if absent.
    pub fn buffer(&mut self, name: &str, shape: impl Into<Shape>, init: Init) -> Result<Var> {
        let shape = shape.into();
        if let Some(v) = Self::claim(&self.buffers, &self.touched, name, &shape)? {
            return Ok(v);
        }
        let var = Var::from_tensor(&self.materialize(name, &shape, init)?)?;
        self.buffers.insert(name.to_string(), var.clone());
        Ok(var)
    }

    pub fn insert_param(&mut self, name: &str, value: &Tensor) -> Result<()> {
        let v = Var::from_tensor(&value.to_dtype(self.dtype)?)?;
        self.params.insert(name.to_string(), v);
        Ok(())
    }

    pub fn insert_buffer(&mut self, name: &str, value: &Tensor) -> Result<()> {
        let v = Var::from_tensor(&value.to_dtype(self.dtype)?)?;
        self.buffers.insert(name.to_string(), v);
        Ok(())
    }

    /// Drops every parameter and buffer whose name starts with `prefix.`
    /// (or equals `prefix`).
    pub fn remove_prefix(&mut self, prefix: &str) {
        let dotted = format!("{prefix}.");
        let keep = |k: &String| !(k == prefix || k.starts_with(&dotted));
        self.params.retain(|k, _| keep(k));
        self.buffers.retain(|k, _| keep(k));
    }

    pub fn params(&self) -> &BTreeMap<String, Var> {
        &self.params
    }

    pub fn buffers(&self) -> &BTreeMap<String, Var> {
        &self.buffers
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.params.get(name).or_else(|| self.buffers.get(name))
    }

    pub fn vars(&self) -> Vec<Var> {
        self.params.values().cloned().collect()
    }

    /// Number of learnable scalars.
    pub fn num_params(&self) -> usize {
        self.params.values().map(|v| v.elem_count()).sum()
    }

    pub(crate) fn reset_touched(&self) {
        self.touched.lock().expect("poisoned").clear();
    }

    /// Fails if any stored tensor was not claimed by the module tree built
    /// since the last [`reset_touched`](Self::reset_touched).
    pub(crate) fn check_all_touched(&self) -> Result<()> {
        let touched = self.touched.lock().expect("poisoned");
        let stray: Vec<&String> = self
            .params
            .keys()
            .chain(self.buffers.keys())
            .filter(|k| !touched.contains(*k))
            .collect();
        if stray.is_empty() {
            Ok(())
        } else {
            Err(Error::NameMismatch(format!(
                "tensors not used by the model: {stray:?}"
            )))
        }
    }

    /// Drops every tensor not claimed since the last reset.
    pub(crate) fn retain_touched(&mut self) {
        let touched = self.touched.lock().expect("poisoned");
        self.params.retain(|k, _| touched.contains(k));
        self.buffers.retain(|k, _| touched.contains(k));
    }

    /// Deep copy: new storage, same names and values.
    pub fn deep_clone(&self) -> Result<Self> {
        let copy = |m: &BTreeMap<String, Var>| -> Result<BTreeMap<String, Var>> {
            m.iter()
                .map(|(k, v)| Ok((k.clone(), Var::from_tensor(&v.as_tensor().copy()?)?)))
                .collect()
        };
        Ok(Self {
            params: copy(&self.params)?,
            buffers: copy(&self.buffers)?,
            dtype: self.dtype,
            device: self.device.clone(),
            seed: self.seed,
            detached: false,
            touched: Mutex::new(BTreeSet::new()),
        })
    }

    /// Deep copy converted to `dtype`.
    pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
        let conv = |m: &BTreeMap<String, Var>| -> Result<BTreeMap<String, Var>> {
            m.iter()
                .map(|(k, v)| {
                    Ok((
                        k.clone(),
                        Var::from_tensor(&v.as_tensor().to_dtype(dtype)?.copy()?)?,
                    ))
                })
                .collect()
        };
        Ok(Self {
            params: conv(&self.params)?,
            buffers: conv(&self.buffers)?,
            dtype,
            device: self.device.clone(),
            seed: self.seed,
            detached: false,
            touched: Mutex::new(BTreeSet::new()),
        })
    }
}
