//! Multi-stage training plans and the shipped recipes.

use serde::{Deserialize, Serialize};

use super::losses::{LossKind, LossTerm};
use super::optim::{OptimizerConfig, OptimizerKind};
use crate::error::{Error, Result};
use crate::models::{Family, ModelConfig, Surgery};

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage {
    #[serde(default)]
    pub name: String,
    pub patch: usize,
    pub batch: usize,
    pub steps: usize,
    /// Overrides the optimizer's initial learning rate for this stage.
    #[serde(default)]
    pub lr0: Option<f64>,
    pub losses: Vec<LossTerm>,
    /// Applied in order before the first step.
    #[serde(default)]
    pub surgery: Vec<Surgery>,
    /// `None` trains without weight averaging.
    #[serde(default)]
    pub ema_decay: Option<f64>,
    #[serde(default = "default_true")]
    pub flips: bool,
    /// Random rescaling by a factor in `[1-s, 1+s]` before cropping.
    #[serde(default)]
    pub scale_jitter: f64,
    /// Ends the stage after this many validations without a new best.
    #[serde(default)]
    pub early_stop_patience: Option<usize>,
}

impl Stage {
    pub fn new(patch: usize, batch: usize, steps: usize, losses: Vec<LossTerm>) -> Self {
        Self {
            name: String::new(),
            patch,
            batch,
            steps,
            lr0: None,
            losses,
            surgery: Vec::new(),
            ema_decay: None,
            flips: true,
            scale_jitter: 0.0,
            early_stop_patience: None,
        }
    }

    fn named(mut self, name: &str) -> Self {
        self.name = name.into();
        self
    }
}

/// How the learning rate schedule spans stages.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleMode {
    /// Every stage restarts warmup + cosine from its own `lr0`.
    #[default]
    PerStage,
    /// One warmup + cosine over the whole plan (progressive patch schedules).
    Continuous,
}

/// Desk-scale overrides; the stage values keep the full recipe.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanScale {
    #[serde(default = "one")]
    pub step_factor: f64,
    /// Replaces every stage's step count (takes precedence over the factor).
    #[serde(default)]
    pub steps: Option<usize>,
    #[serde(default)]
    pub patch: Option<usize>,
    #[serde(default)]
    pub batch: Option<usize>,
}

fn one() -> f64 {
    1.0
}

impl Default for PlanScale {
    fn default() -> Self {
        Self {
            step_factor: 1.0,
            steps: None,
            patch: None,
            batch: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunOptions {
    /// Steps between checkpoints and validations; 0 means once per stage.
    #[serde(default)]
    pub checkpoint_every: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StagePlan {
    pub name: String,
    pub model: ModelConfig,
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub schedule: ScheduleMode,
    #[serde(default)]
    pub scale: PlanScale,
    #[serde(default)]
    pub run: RunOptions,
    pub stages: Vec<Stage>,
}

impl StagePlan {
    /// Stage `i` with desk-scale overrides applied.
    pub fn effective_stage(&self, i: usize) -> Stage {
        let mut s = self.stages[i].clone();
        s.steps = match self.scale.steps {
            Some(n) => n,
            None => ((s.steps as f64 * self.scale.step_factor).round() as usize).max(1),
        };
        if let Some(p) = self.scale.patch {
            s.patch = p;
        }
        if let Some(b) = self.scale.batch {
            s.batch = b;
        }
        s
    }

    /// Optimizer settings for stage `i`, with warmup shrunk in proportion to
    /// the scaled step count.
    pub fn effective_optimizer(&self, i: usize) -> OptimizerConfig {
        let mut o = self.optimizer.clone();
        let full = self.stages[i].steps.max(1) as f64;
        let eff = self.effective_stage(i).steps as f64;
        if eff != full {
            o.warmup_steps = (o.warmup_steps as f64 * eff / full).round() as usize;
        }
        o
    }

    pub fn total_steps(&self) -> usize {
        (0..self.stages.len())
            .map(|i| self.effective_stage(i).steps)
            .sum()
    }

    pub fn validation_errors(&self) -> Vec<String> {
        let mut e: Vec<String> = self
            .model
            .validation_errors()
            .into_iter()
            .map(|m| format!("model: {m}"))
            .collect();
        e.extend(
            self.optimizer
                .validation_errors()
                .into_iter()
                .map(|m| format!("optimizer: {m}")),
        );
        if self.stages.is_empty() {
            e.push("plan has no stages".into());
        }
        if !(self.scale.step_factor > 0.0 && self.scale.step_factor.is_finite()) {
            e.push("scale.step_factor must be positive".into());
        }
        if self.scale.steps == Some(0) {
            e.push("scale.steps must be positive".into());
        }
        let divisor = self.model.divisor();
        let mut cfg = self.model.clone();
        for i in 0..self.stages.len() {
            let raw = &self.stages[i];
            let s = self.effective_stage(i);
            let at = |m: String| format!("stage {} ({}): {m}", i + 1, raw.name);
            if raw.steps == 0 {
                e.push(at("steps must be positive".into()));
            }
            if s.batch == 0 {
                e.push(at("batch must be positive".into()));
            }
            if s.patch == 0 || !s.patch.is_multiple_of(divisor) {
                e.push(at(format!(
                    "patch {} must be a positive multiple of {divisor}",
                    s.patch
                )));
            }
            if let Some(lr) = s.lr0 {
                if !(lr > 0.0) || lr < self.optimizer.lr_min {
                    e.push(at(format!("lr0 {lr} must be positive and at least lr_min")));
                }
            }
            if s.losses.is_empty() || !s.losses.iter().any(|l| l.weight > 0.0) {
                e.push(at("needs at least one loss with positive weight".into()));
            }
            for l in &s.losses {
                if !(l.weight >= 0.0 && l.weight.is_finite()) {
                    e.push(at(format!(
                        "loss weight for {} must be nonnegative",
                        l.kind.as_str()
                    )));
                }
            }
            if let Some(d) = s.ema_decay {
                if !(0.0..1.0).contains(&d) {
                    e.push(at(format!("ema_decay {d} must lie in [0,1)")));
                }
            }
            if !(0.0..1.0).contains(&s.scale_jitter) {
                e.push(at("scale_jitter must lie in [0,1)".into()));
            }
            for a in &s.surgery {
                if let Err(m) = simulate_surgery(&mut cfg, *a) {
                    e.push(at(m));
                }
            }
        }
        e
    }

    pub fn validate(&self) -> Result<()> {
        let e = self.validation_errors();
        if e.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(e.join("; ")))
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_file(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    /// Model configuration after every stage's surgery.
    pub fn final_model(&self) -> Result<ModelConfig> {
        let mut cfg = self.model.clone();
        for s in &self.stages {
            for a in &s.surgery {
                simulate_surgery(&mut cfg, *a).map_err(Error::Config)?;
            }
        }
        Ok(cfg)
    }
}

/// Mirrors the preconditions of the model surgery on a config.
fn simulate_surgery(cfg: &mut ModelConfig, action: Surgery) -> std::result::Result<(), String> {
    if action == Surgery::None {
        return Ok(());
    }
    if cfg.family == Family::Restormerl {
        return Err(format!("surgery {action:?} is not defined for restormerl"));
    }
    match action {
        Surgery::SwapFirstConvK5 | Surgery::SwapFirstConvK3 => {
            if cfg.use_reparam {
                return Err("first-conv swap must precede enable_reparam".into());
            }
            cfg.first_conv_kernel = if action == Surgery::SwapFirstConvK5 {
                5
            } else {
                3
            };
        }
        Surgery::InsertMiddleScag => cfg.use_middle_scag = true,
        Surgery::EnableReparam => cfg.use_reparam = true,
        Surgery::None => {}
    }
    Ok(())
}

fn l1() -> Vec<LossTerm> {
    vec![LossTerm::new(LossKind::L1, 1.0)]
}

/// Four stages: 5×5 stem at 512² → 1024² → 3×3 stem → SCA-G plus
/// reparameterized stems at a lower rate, PSNR loss, EMA and warmup.
pub fn nafreplocal_plan() -> StagePlan {
    let psnr = vec![LossTerm::new(LossKind::Psnr, 1.0)];
    let ema = Some(0.999);
    let mut s1 = Stage::new(512, 8, 400_000, psnr.clone()).named("k5-stem-512");
    s1.surgery = vec![Surgery::SwapFirstConvK5];
    s1.ema_decay = ema;
    let mut s2 = Stage::new(1024, 8, 400_000, psnr.clone()).named("k5-stem-1024");
    s2.ema_decay = ema;
    let mut s3 = Stage::new(1024, 8, 400_000, psnr.clone()).named("k3-stem-1024");
    s3.surgery = vec![Surgery::SwapFirstConvK3];
    s3.ema_decay = ema;
    let mut s4 = Stage::new(1024, 4, 50_000, psnr).named("scag-reparam");
    s4.surgery = vec![Surgery::InsertMiddleScag, Surgery::EnableReparam];
    s4.lr0 = Some(1e-4);
    s4.ema_decay = ema;
    let model = ModelConfig {
        use_middle_scag: false,
        ..ModelConfig::nafreplocal()
    };
    StagePlan {
        name: "nafreplocal".into(),
        model,
        optimizer: OptimizerConfig {
            kind: OptimizerKind::Adamw,
            lr0: 2e-4,
            lr_min: 1e-7,
            beta1: 0.9,
            beta2: 0.9,
            weight_decay: 0.0,
            warmup_steps: 2000,
            eps: 1e-8,
        },
        schedule: ScheduleMode::PerStage,
        scale: PlanScale::default(),
        run: RunOptions {
            checkpoint_every: 5000,
        },
        stages: vec![s1, s2, s3, s4],
    }
}

/// The four-stage recipe at desk scale: tiny width, 32² patches, batch 2,
/// `steps` per stage.
pub fn nafreplocal_desk_plan(steps: usize) -> StagePlan {
    let mut p = nafreplocal_plan();
    p.name = "nafreplocal-desk".into();
    p.model.width = 8;
    p.scale = PlanScale {
        step_factor: 1.0,
        steps: Some(steps),
        patch: Some(32),
        batch: Some(2),
    };
    p.run.checkpoint_every = 0;
    p
}

/// Progressive patches (256²,96) → (384²,64) → (512²,32) at 100K/200K of a
/// single 300K-iteration cosine schedule.
pub fn restormerl_plan() -> StagePlan {
    let stages = vec![
        Stage::new(256, 96, 100_000, l1()).named("256"),
        Stage::new(384, 64, 100_000, l1()).named("384"),
        Stage::new(512, 32, 100_000, l1()).named("512"),
    ];
    StagePlan {
        name: "restormerl".into(),
        model: ModelConfig::restormerl(),
        optimizer: OptimizerConfig {
            kind: OptimizerKind::Adamw,
            lr0: 3e-4,
            lr_min: 1e-6,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 1e-4,
            warmup_steps: 0,
            eps: 1e-8,
        },
        schedule: ScheduleMode::Continuous,
        scale: PlanScale::default(),
        run: RunOptions {
            checkpoint_every: 5000,
        },
        stages,
    }
}

/// Reference grid recipe: 384² crops, batch 32, flips, AdamW, L1, cosine
/// from 1e-3 to 1e-6 over 100 epochs (about 28K iterations).
pub fn nafnet_baseline_plan(width: usize, last_enc_blocks: usize) -> StagePlan {
    StagePlan {
        name: format!("nafnet-c{width}-l{last_enc_blocks}"),
        model: ModelConfig::nafnet(width, last_enc_blocks),
        optimizer: OptimizerConfig {
            kind: OptimizerKind::Adamw,
            lr0: 1e-3,
            lr_min: 1e-6,
            beta1: 0.9,
            beta2: 0.9,
            weight_decay: 1e-3,
            warmup_steps: 0,
            eps: 1e-8,
        },
        schedule: ScheduleMode::PerStage,
        scale: PlanScale::default(),
        run: RunOptions {
            checkpoint_every: 2000,
        },
        stages: vec![Stage::new(384, 32, 28_000, l1()).named("baseline")],
    }
}

/// NAFNet-C16-L28 with crop, scale and flip augmentation and L1 loss.
pub fn ipiu_plan() -> StagePlan {
    let mut s = Stage::new(384, 32, 28_000, l1()).named("scale-aug");
    s.scale_jitter = 0.1;
    StagePlan {
        name: "ipiu".into(),
        optimizer: OptimizerConfig {
            kind: OptimizerKind::Adam,
            weight_decay: 0.0,
            beta2: 0.999,
            ..nafnet_baseline_plan(16, 28).optimizer
        },
        stages: vec![s],
        ..nafnet_baseline_plan(16, 28)
    }
}

/// Five-step curriculum: pixel loss first, then perceptual and edge terms.
pub fn sa_nafnet_plan() -> StagePlan {
    let full = vec![
        LossTerm::new(LossKind::L1, 1.0),
        LossTerm::new(LossKind::Perceptual, 0.1),
        LossTerm::new(LossKind::Edge, 0.05),
    ];
    let stages = (1..=5)
        .map(|i| {
            let losses = if i <= 2 { l1() } else { full.clone() };
            Stage::new(384, 32, 20_000, losses).named(&format!("step{i}"))
        })
        .collect();
    StagePlan {
        name: "sa_nafnet".into(),
        model: ModelConfig::sa_nafnet(),
        optimizer: OptimizerConfig {
            kind: OptimizerKind::Adam,
            lr0: 1e-3,
            lr_min: 1e-6,
            beta1: 0.9,
            beta2: 0.9,
            weight_decay: 1e-3,
            warmup_steps: 0,
            eps: 1e-8,
        },
        schedule: ScheduleMode::PerStage,
        scale: PlanScale::default(),
        run: RunOptions {
            checkpoint_every: 2000,
        },
        stages,
    }
}

/// Every shipped plan by name.
pub fn shipped_plans() -> Vec<StagePlan> {
    vec![
        nafreplocal_plan(),
        nafreplocal_desk_plan(50),
        restormerl_plan(),
        nafnet_baseline_plan(16, 28),
        ipiu_plan(),
        sa_nafnet_plan(),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shipped_plans_validate_and_round_trip() {
        for p in shipped_plans() {
            assert!(
                p.validation_errors().is_empty(),
                "{}: {:?}",
                p.name,
                p.validation_errors()
            );
            let back = StagePlan::from_toml(&p.to_toml().unwrap()).unwrap();
            assert_eq!(back, p);
        }
    }

    #[test]
    fn nafreplocal_plan_ends_at_the_submission_config() {
        let p = nafreplocal_plan();
        let fin = p.final_model().unwrap();
        assert!(fin.use_middle_scag && fin.use_reparam);
        assert_eq!(fin.first_conv_kernel, 3);
        assert_eq!(
            p.stages.iter().map(|s| s.steps).collect::<Vec<_>>(),
            vec![400_000, 400_000, 400_000, 50_000]
        );
    }

    #[test]
    fn desk_scaling_shrinks_steps_and_warmup() {
        let p = nafreplocal_desk_plan(50);
        let s = p.effective_stage(0);
        assert_eq!((s.steps, s.patch, s.batch), (50, 32, 2));
        assert_eq!(p.effective_optimizer(0).warmup_steps, 0);
        assert_eq!(p.stages[0].steps, 400_000);
    }

    #[test]
    fn invalid_plans_list_every_failure() {
        let mut p = restormerl_plan();
        p.stages[0].steps = 0;
        p.stages[1].losses = vec![LossTerm::new(LossKind::L1, 0.0)];
        p.stages[2].surgery = vec![Surgery::SwapFirstConvK5];
        assert_eq!(p.validation_errors().len(), 3);
        let mut q = nafreplocal_plan();
        q.stages.swap(2, 3);
        assert!(q.validation_errors().iter().any(|e| e.contains("precede")));
    }
}
