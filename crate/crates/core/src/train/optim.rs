//! Adam(W) with name-keyed state, warmup + cosine schedule, and the EMA of
//! weights.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use candle_core::{backprop::GradStore, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{ModelInstance, Surgery};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    /// L2 penalty folded into the gradient.
    Adam,
    /// Decoupled weight decay.
    #[default]
    Adamw,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    #[serde(default)]
    pub kind: OptimizerKind,
    pub lr0: f64,
    pub lr_min: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    #[serde(default = "default_warmup")]
    pub warmup_steps: usize,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_warmup() -> usize {
    2000
}

fn default_eps() -> f64 {
    1e-8
}

impl OptimizerConfig {
    pub fn validation_errors(&self) -> Vec<String> {
        let mut e = Vec::new();
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            e.push(format!("lr0 must be positive, got {}", self.lr0));
        }
        if !(self.lr_min >= 0.0 && self.lr_min <= self.lr0) {
            e.push(format!("lr_min must lie in [0, lr0], got {}", self.lr_min));
        }
        for (n, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                e.push(format!("{n} must lie in (0,1), got {b}"));
            }
        }
        if !(self.weight_decay >= 0.0) {
            e.push(format!(
                "weight_decay must be nonnegative, got {}",
                self.weight_decay
            ));
        }
        if !(self.eps > 0.0) {
            e.push("eps must be positive".into());
        }
        e
    }
}

/// Linear warmup from 0 to `lr0` over `warmup` steps, then cosine decay to
/// `lr_min` at step `total - 1`. Warmup is capped at `total - 1` steps.
pub fn cosine_lr(step: usize, total: usize, lr0: f64, lr_min: f64, warmup: usize) -> Result<f64> {
    if step >= total {
        return Err(Error::StepOutOfRange { step, steps: total });
    }
    let last = total - 1;
    let w = warmup.min(last);
    if step < w {
        return Ok(lr0 * step as f64 / w as f64);
    }
    if last == w {
        return Ok(lr0);
    }
    let t = (step - w) as f64 / (last - w) as f64;
    Ok(lr_min + 0.5 * (lr0 - lr_min) * (1.0 + (PI * t).cos()))
}

/// Learning rate at `step` of a stage, using the stage's own `lr0` when set.
pub fn lr_at(step: usize, stage: &super::Stage, opt: &OptimizerConfig) -> Result<f64> {
    cosine_lr(
        step,
        stage.steps,
        stage.lr0.unwrap_or(opt.lr0),
        opt.lr_min,
        opt.warmup_steps,
    )
}

#[derive(Clone, Debug)]
struct Moments {
    m: Tensor,
    v: Tensor,
    steps: u64,
}

/// Adam(W) whose state is keyed by parameter name, so surgery that adds or
/// removes tensors only resets the affected entries.
#[derive(Clone, Debug)]
pub struct Optimizer {
    config: OptimizerConfig,
    state: BTreeMap<String, Moments>,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Self {
        Self {
            config,
            state: BTreeMap::new(),
        }
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    /// One update at learning rate `lr`. Parameters without a gradient are
    /// left untouched.
    pub fn step(
        &mut self,
        params: &BTreeMap<String, Var>,
        grads: &GradStore,
        lr: f64,
    ) -> Result<()> {
        let c = &self.config;
        for (name, var) in params {
            let Some(g) = grads.get(var) else { continue };
            let p = var.as_detached_tensor();
            let mut g = g.detach();
            if c.kind == OptimizerKind::Adam && c.weight_decay > 0.0 {
                g = (g + (&p * c.weight_decay)?)?;
            }
            let st = match self.state.remove(name) {
                Some(s) if s.m.shape() == p.shape() => s,
                _ => Moments {
                    m: p.zeros_like()?,
                    v: p.zeros_like()?,
                    steps: 0,
                },
            };
            let steps = st.steps + 1;
            let m = ((st.m * c.beta1)? + (&g * (1.0 - c.beta1))?)?;
            let v = ((st.v * c.beta2)? + (g.sqr()? * (1.0 - c.beta2))?)?;
            let bc1 = 1.0 - c.beta1.powi(steps as i32);
            let bc2 = 1.0 - c.beta2.powi(steps as i32);
            let denom = ((&v / bc2)?.sqrt()? + c.eps)?;
            let update = ((&m / bc1)? / denom)?;
            let mut next = p.clone();
            if c.kind == OptimizerKind::Adamw && c.weight_decay > 0.0 {
                next = (next * (1.0 - lr * c.weight_decay))?;
            }
            next = (next - (update * lr)?)?;
            var.set(&next)?;
            self.state.insert(name.clone(), Moments { m, v, steps });
        }
        Ok(())
    }

    /// Drops state for names that no longer exist.
    pub fn resync(&mut self, params: &BTreeMap<String, Var>) {
        self.state.retain(|k, _| params.contains_key(k));
    }

    /// First and second moments as two named sets, plus per-name step counts.
    pub fn export(
        &self,
    ) -> (
        BTreeMap<String, Tensor>,
        BTreeMap<String, Tensor>,
        BTreeMap<String, u64>,
    ) {
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        let mut s = BTreeMap::new();
        for (k, st) in &self.state {
            m.insert(k.clone(), st.m.clone());
            v.insert(k.clone(), st.v.clone());
            s.insert(k.clone(), st.steps);
        }
        (m, v, s)
    }

    pub fn import(
        config: OptimizerConfig,
        m: &BTreeMap<String, Tensor>,
        v: &BTreeMap<String, Tensor>,
        steps: &BTreeMap<String, u64>,
    ) -> Result<Self> {
        let mut state = BTreeMap::new();
        for (k, mt) in m {
            let vt = v.get(k).ok_or_else(|| {
                Error::Checkpoint(format!("optimizer state for {k} lacks a second moment"))
            })?;
            let n = *steps.get(k).ok_or_else(|| {
                Error::Checkpoint(format!("optimizer state for {k} lacks a step count"))
            })?;
            state.insert(
                k.clone(),
                Moments {
                    m: mt.clone(),
                    v: vt.clone(),
                    steps: n,
                },
            );
        }
        Ok(Self { config, state })
    }
}

/// Exponential moving average of the parameters.
#[derive(Clone, Debug)]
pub struct EmaState {
    pub decay: f64,
    pub shadow: BTreeMap<String, Tensor>,
}

fn names_match(shadow: &BTreeMap<String, Tensor>, params: &BTreeMap<String, Var>) -> Result<()> {
    if shadow.len() != params.len() || shadow.keys().zip(params.keys()).any(|(a, b)| a != b) {
        let missing: Vec<&String> = params.keys().filter(|k| !shadow.contains_key(*k)).collect();
        let extra: Vec<&String> = shadow.keys().filter(|k| !params.contains_key(*k)).collect();
        return Err(Error::NameMismatch(format!(
            "EMA shadow differs from the model: missing {missing:?}, extra {extra:?}"
        )));
    }
    Ok(())
}

impl EmaState {
    pub fn new(model: &ModelInstance, decay: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&decay) {
            return Err(Error::Config(format!(
                "EMA decay must lie in [0,1], got {decay}"
            )));
        }
        let shadow = model
            .parameters()
            .iter()
            .map(|(k, v)| Ok((k.clone(), v.as_tensor().copy()?.detach())))
            .collect::<Result<_>>()?;
        Ok(Self { decay, shadow })
    }

    /// `shadow ← decay·shadow + (1−decay)·param` for every parameter.
    pub fn update(&mut self, params: &BTreeMap<String, Var>) -> Result<()> {
        names_match(&self.shadow, params)?;
        let d = self.decay;
        for (k, var) in params {
            let s = &self.shadow[k];
            let p = var.as_detached_tensor();
            let next = if d == 0.0 {
                p.copy()?
            } else if d == 1.0 {
                continue;
            } else {
                ((s * d)? + (p * (1.0 - d))?)?
            };
            self.shadow.insert(k.clone(), next);
        }
        Ok(())
    }

    /// Applies a surgery to the averaged weights by replaying it on a copy of
    /// the model carrying them, so shadow names keep mirroring the model.
    pub fn apply_surgery(&mut self, model_before: &ModelInstance, action: Surgery) -> Result<()> {
        let mut m = model_before.with_parameters(&self.shadow)?;
        m.apply_surgery(action)?;
        self.shadow = m
            .parameters()
            .iter()
            .map(|(k, v)| Ok((k.clone(), v.as_tensor().copy()?.detach())))
            .collect::<Result<_>>()?;
        Ok(())
    }
}

/// Functional form of [`EmaState::update`].
pub fn ema_update(state: &EmaState, model: &ModelInstance) -> Result<EmaState> {
    let mut s = state.clone();
    s.update(model.parameters())?;
    Ok(s)
}
