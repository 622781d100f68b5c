//! Stage execution: surgery, optimisation, EMA, checkpoints, validation and
//! resumption.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::losses::total_loss;
use super::optim::{cosine_lr, lr_at, EmaState, Optimizer, OptimizerConfig};
use super::plan::{ScheduleMode, Stage, StagePlan};
use crate::data_io::{flip_augment, random_crop_pair, ImagePair};
use crate::error::{Error, Result};
use crate::inference::Restorer;
use crate::metrics::{psnr, PerceptualBackend};
use crate::models::{Checkpoint, Mode, ModelInstance, WeightSet};

pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const TRAIN_LOG: &str = "train_log.jsonl";

const SET_ADAM_M: &str = "adam_m";
const SET_ADAM_V: &str = "adam_v";

#[derive(Clone, Default)]
pub struct TrainOptions {
    pub seed: u64,
    /// Checkpoints and the JSON-lines log go here when set.
    pub out_dir: Option<PathBuf>,
    /// Continue from `out_dir/last.ckpt` when it exists.
    pub resume: bool,
    /// Stop after this many global steps (simulates an interruption).
    pub stop_after: Option<usize>,
    pub backend: Option<Arc<dyn PerceptualBackend>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub stage: usize,
    pub step: usize,
    pub global_step: usize,
    pub lr: f64,
    pub losses: BTreeMap<String, f64>,
    pub total: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_psnr: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestRecord {
    pub stage: usize,
    pub step: usize,
    pub global_step: usize,
    pub val_psnr: f64,
}

pub struct PlanOutcome {
    pub model: ModelInstance,
    pub ema: Option<EmaState>,
    pub log: Vec<LogRecord>,
    pub best: Option<BestRecord>,
    /// Eval-mode copy of the deployable weights at the best validation.
    pub best_model: Option<ModelInstance>,
    /// False when `stop_after` interrupted the run.
    pub completed: bool,
}

/// Index of the record with the highest validation PSNR (first on ties).
pub fn select_best(log: &[LogRecord]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, r) in log.iter().enumerate() {
        if let Some(p) = r.val_psnr {
            if best.is_none_or(|(_, b)| p > b) {
                best = Some((i, p));
            }
        }
    }
    best.map(|(i, _)| i)
}

/// Trailing moving average.
pub fn smoothed(values: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    let mut out = Vec::with_capacity(values.len());
    let mut sum = 0.0;
    for (i, v) in values.iter().enumerate() {
        sum += v;
        if i >= window {
            sum -= values[i - window];
        }
        out.push(sum / (i + 1).min(window) as f64);
    }
    out
}

fn step_seed(seed: u64, stage: usize, step: usize) -> u64 {
    let mut h = seed ^ 0x9e37_79b9_7f4a_7c15;
    for v in [stage as u64, step as u64] {
        h = (h ^ v).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        h ^= h >> 31;
    }
    h
}

/// Draws one training batch: random pair, optional rescale, random crop,
/// random flips, all from the per-step stream.
fn sample_batch(
    data: &[ImagePair],
    stage: &Stage,
    rng: &mut ChaCha8Rng,
    dtype: DType,
) -> Result<(Tensor, Tensor)> {
    let mut blur = Vec::with_capacity(stage.batch);
    let mut sharp = Vec::with_capacity(stage.batch);
    for _ in 0..stage.batch {
        let pair = &data[rng.random_range(0..data.len())];
        let scaled;
        let src = if stage.scale_jitter > 0.0 {
            let (h, w) = pair.dims();
            let min_f = stage.patch as f64 / h.min(w) as f64;
            let f = rng
                .random_range(1.0 - stage.scale_jitter..=1.0 + stage.scale_jitter)
                .max(min_f);
            let (nh, nw) = (
                ((h as f64 * f).round() as usize).max(stage.patch),
                ((w as f64 * f).round() as usize).max(stage.patch),
            );
            scaled = ImagePair::new(
                pair.pair_id().to_string(),
                pair.scene_id().to_string(),
                pair.blur().resize_bilinear(nh, nw, true),
                pair.sharp().resize_bilinear(nh, nw, true),
            )?;
            &scaled
        } else {
            pair
        };
        let mut crop = random_crop_pair(src, stage.patch, rng.random())?;
        if stage.flips {
            let (hf, vf) = (rng.random_bool(0.5), rng.random_bool(0.5));
            crop = flip_augment(&crop, hf, vf);
        }
        blur.push(crop.blur().to_tensor(dtype, &Device::Cpu)?);
        sharp.push(crop.sharp().to_tensor(dtype, &Device::Cpu)?);
    }
    Ok((Tensor::cat(&blur, 0)?, Tensor::cat(&sharp, 0)?))
}

/// Eval-mode model carrying the EMA weights when present.
fn deployable(model: &ModelInstance, ema: Option<&EmaState>) -> Result<ModelInstance> {
    let mut m = match ema {
        Some(e) => model.with_parameters(&e.shadow)?,
        None => model.deep_clone()?,
    };
    m.set_mode(Mode::Eval)?;
    Ok(m)
}

/// Mean PSNR of the restored validation blurs against their sharps.
pub fn validation_psnr(model: &ModelInstance, val: &[ImagePair]) -> Result<f64> {
    let r = Restorer::new(model);
    let mut sum = 0.0;
    for p in val {
        sum += psnr(&r.restore(p.blur())?, p.sharp(), 1.0)?.db;
    }
    Ok(sum / val.len() as f64)
}

struct Progress {
    stage: usize,
    step: usize,
    global_step: usize,
    best: Option<BestRecord>,
    stale: usize,
}

fn save_state(
    path: &Path,
    model: &ModelInstance,
    ema: Option<&EmaState>,
    opt: &Optimizer,
    p: &Progress,
    plan: &StagePlan,
    seed: u64,
) -> Result<()> {
    let (m, v, steps) = opt.export();
    let mut ck = Checkpoint::from_model(model)?
        .with_set(SET_ADAM_M, m)
        .with_set(SET_ADAM_V, v);
    if let Some(e) = ema {
        ck = ck.with_ema(e.shadow.clone());
    }
    ck.meta = json!({
        "kind": "train_state",
        "plan": plan.name,
        "seed": seed,
        "stage": p.stage,
        "step": p.step,
        "global_step": p.global_step,
        "best": p.best,
        "stale": p.stale,
        "optimizer_steps": steps,
        "ema_decay": ema.map(|e| e.decay),
    });
    ck.write(path)
}

fn load_state(
    path: &Path,
    plan: &StagePlan,
    seed: u64,
) -> Result<(ModelInstance, Option<EmaState>, Optimizer, Progress)> {
    let ck = Checkpoint::read(path)?;
    let meta = &ck.meta;
    if meta["kind"] != "train_state" {
        return Err(Error::Checkpoint(format!(
            "{} is not a training-state checkpoint",
            path.display()
        )));
    }
    if meta["plan"] != plan.name.as_str() || meta["seed"] != seed {
        return Err(Error::Checkpoint(format!(
            "{} belongs to plan {} with seed {}",
            path.display(),
            meta["plan"],
            meta["seed"]
        )));
    }
    let field = |k: &str| -> Result<usize> {
        meta[k]
            .as_u64()
            .map(|v| v as usize)
            .ok_or_else(|| Error::Checkpoint(format!("training state lacks {k}")))
    };
    let progress = Progress {
        stage: field("stage")?,
        step: field("step")?,
        global_step: field("global_step")?,
        best: serde_json::from_value(meta["best"].clone())
            .map_err(|e| Error::Checkpoint(e.to_string()))?,
        stale: field("stale")?,
    };
    let mut model = ck.instantiate(WeightSet::Raw)?;
    model.store_mut().set_seed(seed);
    model.set_mode(Mode::Train)?;
    let ema = match (ck.set("ema"), meta["ema_decay"].as_f64()) {
        (Some(shadow), Some(decay)) => Some(EmaState {
            decay,
            shadow: shadow.clone(),
        }),
        _ => None,
    };
    let steps: BTreeMap<String, u64> = serde_json::from_value(meta["optimizer_steps"].clone())
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    let empty = BTreeMap::new();
    let opt = Optimizer::import(
        plan.effective_optimizer(progress.stage.min(plan.stages.len() - 1)),
        ck.set(SET_ADAM_M).unwrap_or(&empty),
        ck.set(SET_ADAM_V).unwrap_or(&empty),
        &steps,
    )?;
    Ok((model, ema, opt, progress))
}

fn open_log(dir: &Path) -> Result<File> {
    let path = dir.join(TRAIN_LOG);
    OpenOptions::new()
        .create(true)
        .write(true)
        .truncate(true)
        .open(&path)
        .map_err(|e| Error::io(&path, e))
}

fn write_record(f: &mut File, r: &LogRecord) -> Result<()> {
    let line = serde_json::to_string(r).map_err(|e| Error::Invalid(e.to_string()))?;
    writeln!(f, "{line}").map_err(|e| Error::io(TRAIN_LOG, e))
}

/// Reads a JSON-lines training log.
pub fn read_log(path: &Path) -> Result<Vec<LogRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
        })
        .collect()
}

/// Executes every stage of `plan` in order. `model` defaults to a fresh
/// build of `plan.model` seeded with `opts.seed`.
pub fn run_plan(
    model: Option<ModelInstance>,
    plan: &StagePlan,
    train: &[ImagePair],
    val: &[ImagePair],
    opts: &TrainOptions,
) -> Result<PlanOutcome> {
    plan.validate()?;
    if train.is_empty() {
        return Err(Error::Invalid("training set is empty".into()));
    }
    if let Some(d) = &opts.out_dir {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let last_path = opts.out_dir.as_ref().map(|d| d.join(LAST_CHECKPOINT));
    let resume_from = last_path.as_ref().filter(|p| opts.resume && p.exists());

    let (mut model, mut ema, mut opt, mut prog) = match resume_from {
        Some(p) => {
            let (m, e, o, pr) = load_state(p, plan, opts.seed)?;
            log::info!("resuming at stage {} step {}", pr.stage + 1, pr.step);
            (m, e, o, pr)
        }
        None => {
            let mut m = match model {
                Some(m) => m,
                None => ModelInstance::build(&plan.model, DType::F32, opts.seed)?,
            };
            m.set_mode(Mode::Train)?;
            let o = Optimizer::new(plan.effective_optimizer(0));
            let pr = Progress {
                stage: 0,
                step: 0,
                global_step: 0,
                best: None,
                stale: 0,
            };
            (m, None, o, pr)
        }
    };
    let mut log: Vec<LogRecord> = match (resume_from, &opts.out_dir) {
        (Some(_), Some(d)) if d.join(TRAIN_LOG).exists() => read_log(&d.join(TRAIN_LOG))?
            .into_iter()
            .filter(|r| r.global_step < prog.global_step)
            .collect(),
        _ => Vec::new(),
    };
    // Records written after the last checkpoint are dropped on resume.
    let mut log_file = match &opts.out_dir {
        Some(d) => {
            let mut f = open_log(d)?;
            for r in &log {
                write_record(&mut f, r)?;
            }
            Some(f)
        }
        None => None,
    };
    let mut best_model = match (resume_from, &opts.out_dir) {
        (Some(_), Some(d)) if d.join(BEST_CHECKPOINT).exists() => {
            Some(Checkpoint::read(&d.join(BEST_CHECKPOINT))?.instantiate(WeightSet::Raw)?)
        }
        _ => None,
    };
    let total_steps = plan.total_steps();
    let offsets: Vec<usize> = (0..plan.stages.len())
        .scan(0, |acc, i| {
            let o = *acc;
            *acc += plan.effective_stage(i).steps;
            Some(o)
        })
        .collect();
    let backend = opts.backend.as_deref();

    while prog.stage < plan.stages.len() {
        let si = prog.stage;
        let stage = plan.effective_stage(si);
        let ocfg = plan.effective_optimizer(si);
        if prog.step == 0 {
            for &a in &stage.surgery {
                let before = model.deep_clone()?;
                model.apply_surgery(a)?;
                if let Some(e) = ema.as_mut() {
                    e.apply_surgery(&before, a)?;
                }
                log::info!("stage {}: applied {a:?}", si + 1);
            }
            match plan.schedule {
                ScheduleMode::PerStage => opt = Optimizer::new(ocfg.clone()),
                ScheduleMode::Continuous => opt.resync(model.parameters()),
            }
            ema = match (stage.ema_decay, ema.take()) {
                (None, _) => None,
                (Some(d), Some(mut e)) => {
                    e.decay = d;
                    Some(e)
                }
                (Some(d), None) => Some(EmaState::new(&model, d)?),
            };
            prog.stale = 0;
        }
        let every = if plan.run.checkpoint_every == 0 {
            stage.steps
        } else {
            plan.run.checkpoint_every
        };
        let mut early_stop = false;
        while prog.step < stage.steps {
            if opts.stop_after.is_some_and(|n| prog.global_step >= n) {
                return finish(model, ema, log, prog.best, best_model, false);
            }
            let s = prog.step;
            let lr = match plan.schedule {
                ScheduleMode::PerStage => lr_at(s, &stage, &ocfg)?,
                ScheduleMode::Continuous => cosine_lr(
                    offsets[si] + s,
                    total_steps,
                    plan.optimizer.lr0,
                    plan.optimizer.lr_min,
                    plan.optimizer
                        .warmup_steps
                        .min(total_steps.saturating_sub(1)),
                )?,
            };
            let mut rng = ChaCha8Rng::seed_from_u64(step_seed(opts.seed, si, s));
            let (x, y) = sample_batch(train, &stage, &mut rng, model.dtype())?;
            let pred = model.forward_t(&x, true)?;
            let values = total_loss(&pred, &y, &stage.losses, backend)?;
            let total = values.total.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            if !total.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step: prog.global_step,
                    last_good: last_path.clone().filter(|p| p.exists()),
                });
            }
            let grads = values.total.backward()?;
            opt.step(model.parameters(), &grads, lr)?;
            if let Some(e) = ema.as_mut() {
                e.update(model.parameters())?;
            }
            let mut rec = LogRecord {
                stage: si,
                step: s,
                global_step: prog.global_step,
                lr,
                losses: values.terms,
                total,
                val_psnr: None,
            };
            prog.step += 1;
            prog.global_step += 1;
            let boundary = prog.step % every == 0 || prog.step == stage.steps;
            if boundary && !val.is_empty() {
                let dep = deployable(&model, ema.as_ref())?;
                let v = validation_psnr(&dep, val)?;
                rec.val_psnr = Some(v);
                if prog.best.is_none_or(|b| v > b.val_psnr) {
                    prog.best = Some(BestRecord {
                        stage: si,
                        step: s,
                        global_step: rec.global_step,
                        val_psnr: v,
                    });
                    prog.stale = 0;
                    if let Some(d) = &opts.out_dir {
                        let mut ck = Checkpoint::from_model(&dep)?;
                        ck.meta = json!({ "kind": "best", "val_psnr": v, "global_step": rec.global_step });
                        ck.write(&d.join(BEST_CHECKPOINT))?;
                    }
                    best_model = Some(dep);
                } else {
                    prog.stale += 1;
                }
                early_stop = stage.early_stop_patience.is_some_and(|p| prog.stale >= p);
            }
            if let Some(f) = log_file.as_mut() {
                write_record(f, &rec)?;
            }
            log.push(rec);
            if early_stop {
                log::info!(
                    "stage {}: early stop after {} stale validations",
                    si + 1,
                    prog.stale
                );
                prog.global_step += stage.steps - prog.step;
                prog.step = stage.steps;
            }
            if prog.step == stage.steps {
                prog.stage += 1;
                prog.step = 0;
            }
            if boundary || early_stop {
                if let Some(p) = &last_path {
                    save_state(p, &model, ema.as_ref(), &opt, &prog, plan, opts.seed)?;
                }
            }
            if prog.step == 0 {
                break;
            }
        }
    }
    finish(model, ema, log, prog.best, best_model, true)
}

fn finish(
    model: ModelInstance,
    ema: Option<EmaState>,
    log: Vec<LogRecord>,
    best: Option<BestRecord>,
    best_model: Option<ModelInstance>,
    completed: bool,
) -> Result<PlanOutcome> {
    Ok(PlanOutcome {
        model,
        ema,
        log,
        best,
        best_model,
        completed,
    })
}

/// Trains one stage from scratch state: a one-stage plan without
/// checkpoints or validation.
pub fn run_stage(
    model: ModelInstance,
    stage: &Stage,
    data: &[ImagePair],
    opt: &OptimizerConfig,
    seed: u64,
) -> Result<(ModelInstance, Option<EmaState>, Vec<LogRecord>)> {
    let plan = StagePlan {
        name: "single-stage".into(),
        model: model.config().clone(),
        optimizer: opt.clone(),
        schedule: ScheduleMode::PerStage,
        scale: Default::default(),
        run: Default::default(),
        stages: vec![stage.clone()],
    };
    let out = run_plan(
        Some(model),
        &plan,
        data,
        &[],
        &TrainOptions {
            seed,
            ..Default::default()
        },
    )?;
    Ok((out.model, out.ema, out.log))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(v: Option<f64>) -> LogRecord {
        LogRecord {
            stage: 0,
            step: 0,
            global_step: 0,
            lr: 0.0,
            losses: BTreeMap::new(),
            total: 0.0,
            val_psnr: v,
        }
    }

    #[test]
    fn best_is_argmax_of_logged_psnr() {
        let log = vec![
            rec(None),
            rec(Some(20.0)),
            rec(None),
            rec(Some(23.5)),
            rec(Some(22.0)),
            rec(Some(23.5)),
        ];
        assert_eq!(select_best(&log), Some(3));
        assert_eq!(select_best(&[rec(None)]), None);
    }

    #[test]
    fn smoothing_window() {
        assert_eq!(smoothed(&[2.0, 4.0, 6.0, 8.0], 2), vec![2.0, 3.0, 5.0, 7.0]);
    }

    #[test]
    fn step_seeds_differ() {
        assert_ne!(step_seed(1, 0, 1), step_seed(1, 1, 0));
        assert_ne!(step_seed(1, 0, 0), step_seed(2, 0, 0));
    }
}
