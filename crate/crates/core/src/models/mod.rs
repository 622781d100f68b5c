//! Model families assembled from the shared blocks, plus checkpointing,
//! block-count calibration and training-time surgery.

mod calibrate;
mod checkpoint;
mod config;
mod nafnet;
mod restormer;
mod surgery;

use std::collections::{BTreeMap, BTreeSet};

use candle_core::{DType, Tensor, Var};
use serde::{Deserialize, Serialize};

pub use calibrate::{calibrate_blocks, BlockCosts, CalibrationSpace, CalibrationTarget, Candidate};
pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, WeightSet, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use config::{Family, ModelConfig, ReparamOptions, DEFAULT_GDFN_GAMMA, NAFREPLOCAL_WINDOW};
pub use surgery::Surgery;

use crate::efficiency::{Costed, FeatureShape, LayerCost, MacsPolicy, Profile, Profiler};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::reparam::RepConv;
use nafnet::NafNet;
use restormer::RestormerNet;

/// Anything that maps an `N×3×H×W` batch to a restored batch of the same shape.
pub trait ImageModel: Send + Sync {
    fn forward(&self, x: &Tensor) -> Result<Tensor>;
    /// Spatial divisibility required of the input.
    fn divisor(&self) -> usize {
        16
    }
    fn dtype(&self) -> DType {
        DType::F32
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug)]
enum Network {
    Naf(NafNet),
    Restormer(RestormerNet),
}

/// A built model: its config, named parameters and the module tree over them.
#[derive(Clone, Debug)]
pub struct ModelInstance {
    config: ModelConfig,
    store: ParamStore,
    net: Network,
    mode: Mode,
    fused: bool,
}

fn build_network(store: &mut ParamStore, config: &ModelConfig) -> Result<Network> {
    config.validate()?;
    Ok(if config.family.is_naf() {
        Network::Naf(NafNet::new(store, config)?)
    } else {
        Network::Restormer(RestormerNet::new(store, config)?)
    })
}

impl ModelInstance {
    /// Builds a freshly initialised model. Initial values depend only on
    /// `(seed, parameter name)`.
    pub fn build(config: &ModelConfig, dtype: DType, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new(dtype, seed);
        let net = build_network(&mut store, config)?;
        Ok(Self {
            config: config.clone(),
            store,
            net,
            mode: Mode::Train,
            fused: false,
        })
    }

    /// Builds the module tree over existing tensors. Every tensor must be
    /// consumed and none may be missing.
    pub fn from_store(config: &ModelConfig, mut store: ParamStore, fused: bool) -> Result<Self> {
        let before: BTreeSet<String> = store
            .params()
            .keys()
            .chain(store.buffers().keys())
            .cloned()
            .collect();
        store.reset_touched();
        store.set_detached(true);
        let net = build_network(&mut store, config)?;
        let created: Vec<String> = store
            .params()
            .keys()
            .chain(store.buffers().keys())
            .filter(|k| !before.contains(*k))
            .cloned()
            .collect();
        if !created.is_empty() {
            return Err(Error::NameMismatch(format!(
                "tensors missing for this config: {created:?}"
            )));
        }
        store.check_all_touched()?;
        Ok(Self {
            config: config.clone(),
            store,
            net,
            mode: Mode::Eval,
            fused,
        })
    }

    /// Re-derives the module tree after the config or store changed. New
    /// tensors are initialised; tensors no longer referenced are dropped.
    pub(crate) fn rebuild(&mut self) -> Result<()> {
        self.store.reset_touched();
        self.store.set_detached(self.mode == Mode::Eval);
        self.net = build_network(&mut self.store, &self.config)?;
        self.store.retain_touched();
        Ok(())
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Switches between training and evaluation. Evaluation forwards run on
    /// detached parameter views and record no autograd graph.
    pub fn set_mode(&mut self, mode: Mode) -> Result<()> {
        if mode != self.mode {
            self.mode = mode;
            self.store.set_detached(mode == Mode::Eval);
            self.net = build_network(&mut self.store, &self.config)?;
        }
        Ok(())
    }

    pub fn is_fused(&self) -> bool {
        self.fused
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn parameters(&self) -> &BTreeMap<String, Var> {
        self.store.params()
    }

    pub fn buffers(&self) -> &BTreeMap<String, Var> {
        self.store.buffers()
    }

    pub fn num_params(&self) -> usize {
        self.store.num_params()
    }

    /// Multi-branch convolutions still awaiting fusion.
    pub fn rep_convs(&self) -> Vec<&RepConv> {
        match &self.net {
            Network::Naf(n) => n.rep_convs(),
            Network::Restormer(_) => Vec::new(),
        }
    }

    /// Final projection of the transformer family (zeroing it yields `Î = I`).
    pub fn output_conv_weight(&self) -> Option<&Tensor> {
        match &self.net {
            Network::Restormer(r) => Some(r.output_conv().weight()),
            Network::Naf(_) => None,
        }
    }

    pub fn forward_t(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let (_, c, h, w) = x.dims4()?;
        let d = self.config.divisor();
        if c != 3 || h % d != 0 || w % d != 0 {
            return Err(Error::Shape(format!(
                "{} expects N×3×H×W with H, W divisible by {d}, got {c}×{h}×{w}",
                self.config.label()
            )));
        }
        let x = if x.dtype() == self.dtype() {
            x.clone()
        } else {
            x.to_dtype(self.dtype())?
        };
        match &self.net {
            Network::Naf(n) => n.forward_t(&x, train),
            Network::Restormer(r) => r.forward(&x),
        }
    }

    /// Copies the model with every parameter replaced by `values[name]`.
    pub fn with_parameters(&self, values: &BTreeMap<String, Tensor>) -> Result<Self> {
        let store = self.store.deep_clone()?;
        for (name, var) in store.params() {
            let v = values
                .get(name)
                .ok_or_else(|| Error::NameMismatch(format!("no value for parameter {name}")))?;
            var.set(&v.to_dtype(var.dtype())?)?;
        }
        if let Some(extra) = values.keys().find(|k| store.params().get(*k).is_none()) {
            return Err(Error::NameMismatch(format!(
                "value for unknown parameter {extra}"
            )));
        }
        let mut m = Self::from_store(&self.config, store, self.fused)?;
        m.set_mode(self.mode)?;
        Ok(m)
    }

    /// Deep copy with independent storage.
    pub fn deep_clone(&self) -> Result<Self> {
        let mut m = Self::from_store(&self.config, self.store.deep_clone()?, self.fused)?;
        m.set_mode(self.mode)?;
        Ok(m)
    }

    pub(crate) fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub(crate) fn config_mut(&mut self) -> &mut ModelConfig {
        &mut self.config
    }

    pub(crate) fn set_fused(&mut self, fused: bool) {
        self.fused = fused;
    }
}

impl ImageModel for ModelInstance {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.forward_t(x, self.mode == Mode::Train)
    }

    fn divisor(&self) -> usize {
        self.config.divisor()
    }

    fn dtype(&self) -> DType {
        self.store.dtype()
    }
}

impl Costed for ModelInstance {
    fn label(&self) -> String {
        self.config.label()
    }

    fn divisor(&self) -> usize {
        self.config.divisor()
    }

    fn profile_at(
        &self,
        height: usize,
        width: usize,
        policy: MacsPolicy,
    ) -> Result<Vec<LayerCost>> {
        let mut p = Profiler::new(policy);
        let input = FeatureShape::new(3, height, width);
        match &self.net {
            Network::Naf(n) => n.profile(input, &mut p)?,
            Network::Restormer(r) => r.profile(input, &mut p)?,
        };
        Ok(p.into_layers())
    }
}

/// NAFNet grid point `C{width}-L{last_enc_blocks}`.
pub fn build_nafnet(width: usize, last_enc_blocks: usize) -> Result<ModelInstance> {
    if last_enc_blocks == 0 {
        return Err(Error::Config("last_enc_blocks must be at least 1".into()));
    }
    ModelInstance::build(&ModelConfig::nafnet(width, last_enc_blocks), DType::F32, 0)
}

fn build_family(cfg: &ModelConfig, family: Family) -> Result<ModelInstance> {
    if cfg.family != family {
        return Err(Error::Config(format!(
            "expected a {family} config, got {}",
            cfg.family
        )));
    }
    ModelInstance::build(cfg, DType::F32, 0)
}

pub fn build_nafreplocal(cfg: &ModelConfig) -> Result<ModelInstance> {
    build_family(cfg, Family::Nafreplocal)
}

pub fn build_restormerl(cfg: &ModelConfig) -> Result<ModelInstance> {
    build_family(cfg, Family::Restormerl)
}

pub fn build_sa_nafnet(cfg: &ModelConfig) -> Result<ModelInstance> {
    build_family(cfg, Family::SaNafnet)
}
