use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use anyhow::{Context, Result};
use candle_core::DType;
use serde_json::json;

use effdeblur::data_io::{build_index, DatasetIndex, Split};
use effdeblur::efficiency::{
    benchmark_runtime, check_gate, count_macs, table_header, EfficiencyReport, GateVerdict,
    MacsPolicy, Resolution, RuntimeStats,
};
use effdeblur::inference::{restore_index, EvalSummary, Restorer, TtaMerge, TtaSpec};
use effdeblur::metrics::{
    leaderboard_header, score_submission, ConvBackend, MetricReport, PerceptualBackend,
    ScoreWeights, StubBackend,
};
use effdeblur::models::{Checkpoint, Family, Mode, ModelConfig, ModelInstance, WeightSet};
use effdeblur::train::{
    nafnet_baseline_plan, run_plan, shipped_plans, LossKind, PlanOutcome, StagePlan, TrainOptions,
};

use crate::manifest::{sibling_manifest, RunManifest, MANIFEST_NAME};
use crate::{
    BenchArgs, CliError, EvalArgs, MergeArg, PolicyArg, ProfileArgs, ScoreArgs, TrainArgs,
    DATA_ROOT_ENV,
};

/// `nafnet-c16-l28` style grid point.
fn parse_grid_point(spec: &str) -> Option<(usize, usize)> {
    let s = spec.to_ascii_lowercase();
    let rest = s.strip_prefix("nafnet-c")?;
    let (w, l) = rest.split_once("-l")?;
    Some((w.parse().ok()?, l.parse().ok()?))
}

/// Model from a TOML file, a NAFNet grid point, or a family default. An
/// unknown name is a usage error; an invalid file is a validation failure.
pub fn resolve_model(spec: &str) -> Result<ModelConfig> {
    let path = Path::new(spec);
    if path.is_file() {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {spec}"))?;
        let cfg = ModelConfig::from_toml(&text)
            .map_err(|e| CliError::Rejected(format!("{spec}: {e}")))?;
        let errs = cfg.validation_errors();
        if !errs.is_empty() {
            return Err(
                CliError::Rejected(format!("{spec} is invalid:\n  {}", errs.join("\n  "))).into(),
            );
        }
        return Ok(cfg);
    }
    if let Some((w, l)) = parse_grid_point(spec) {
        return Ok(ModelConfig::nafnet(w, l));
    }
    match Family::from_str(spec) {
        Ok(f) => Ok(ModelConfig::default_for(f)),
        Err(_) => Err(CliError::Usage(format!(
            "unknown model {spec:?}: expected a config file, nafnet-cW-lL, nafnet, nafreplocal, restormerl or sa_nafnet"
        ))
        .into()),
    }
}

/// Plan from a TOML file or a shipped plan name.
pub fn resolve_plan(spec: &str) -> Result<StagePlan> {
    let path = Path::new(spec);
    if path.is_file() {
        return StagePlan::from_file(path)
            .map_err(|e| CliError::Rejected(format!("{spec}: {e}")).into());
    }
    if let Some(p) = shipped_plans()
        .into_iter()
        .find(|p| p.name.eq_ignore_ascii_case(spec))
    {
        return Ok(p);
    }
    if let Some((w, l)) = parse_grid_point(spec) {
        return Ok(nafnet_baseline_plan(w, l));
    }
    let names: Vec<String> = shipped_plans().into_iter().map(|p| p.name).collect();
    Err(CliError::Usage(format!(
        "unknown plan {spec:?}; shipped plans: {}",
        names.join(", ")
    ))
    .into())
}

fn data_root(arg: &Option<PathBuf>, flag: &str) -> Result<PathBuf> {
    arg.clone().ok_or_else(|| {
        CliError::Usage(format!("no data root: pass {flag} or set {DATA_ROOT_ENV}")).into()
    })
}

fn parse_split(s: &str) -> Result<Split> {
    Split::from_str(s).map_err(|e| CliError::Usage(e.to_string()).into())
}

fn parse_resolution(s: &str) -> Result<Resolution> {
    Resolution::parse_wxh(s).map_err(|e| CliError::Usage(e.to_string()).into())
}

fn policy(p: PolicyArg) -> MacsPolicy {
    match p {
        PolicyArg::Challenge => MacsPolicy::challenge(),
        PolicyArg::Full => MacsPolicy::full(),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum GateStatus {
    Pass,
    Fail(Vec<String>),
    /// The report was not computed at the gate resolution.
    Refused(String),
}

pub struct ProfileOutcome {
    pub report: EfficiencyReport,
    pub verdict: Option<GateVerdict>,
    pub gate: GateStatus,
}

pub fn cmd_profile(args: &ProfileArgs, seed: u64) -> Result<ProfileOutcome> {
    let cfg = resolve_model(&args.model)?;
    let res = parse_resolution(&args.res)?;
    let mut model = ModelInstance::build(&cfg, DType::F32, seed)?;
    model.set_mode(Mode::Eval)?;
    let mut report = count_macs(&model, res.height, res.width, policy(args.policy))?;
    if args.runs > 0 {
        report.runtime = Some(benchmark_runtime(
            &model,
            res.height,
            res.width,
            args.runs,
            args.warmup,
        )?);
    }
    let (verdict, gate) = match check_gate(&report) {
        Ok(v) if v.pass => (Some(v), GateStatus::Pass),
        Ok(v) => {
            let reasons = v.reasons.clone();
            (Some(v), GateStatus::Fail(reasons))
        }
        Err(e) => (None, GateStatus::Refused(e.to_string())),
    };
    println!("{}", table_header());
    println!("{}", report.table_row());
    match &gate {
        GateStatus::Pass => println!("gate: PASS"),
        GateStatus::Fail(r) => println!("gate: FAIL ({})", r.join("; ")),
        GateStatus::Refused(m) => println!("gate: refused ({m})"),
    }
    if let Some(out) = &args.out {
        std::fs::write(out, report.to_json())
            .with_context(|| format!("writing {}", out.display()))?;
        let name = out
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let config = json!({ "model": cfg, "resolution": res, "policy": report.policy, "runs": args.runs, "gate": args.gate });
        RunManifest::start("profile", config, seed)
            .finish(vec![name])
            .write(&sibling_manifest(out))?;
    }
    Ok(ProfileOutcome {
        report,
        verdict,
        gate,
    })
}

pub struct TrainOutcome {
    pub plan: StagePlan,
    pub outcome: PlanOutcome,
    pub manifest: RunManifest,
}

fn load_backend(path: &Path) -> Result<Arc<dyn PerceptualBackend>> {
    Ok(Arc::new(ConvBackend::from_json_file(path)?))
}

pub fn cmd_train(args: &TrainArgs, seed: u64) -> Result<TrainOutcome> {
    let mut plan = resolve_plan(&args.plan)?;
    if let Some(n) = args.steps {
        plan.scale.steps = Some(n);
    }
    let errs = plan.validation_errors();
    if !errs.is_empty() {
        for e in &errs {
            eprintln!("  - {e}");
        }
        return Err(CliError::Rejected(format!(
            "plan {} has {} validation failure(s):\n  {}",
            plan.name,
            errs.len(),
            errs.join("\n  ")
        ))
        .into());
    }
    let root = data_root(&args.data_root, "--data-root")?;
    let train_index = build_index(&root, Split::Train)?;
    let train = train_index.load_all()?;
    let val_root = args.val_root.clone().unwrap_or_else(|| root.clone());
    let val = match build_index(&val_root, Split::Val) {
        Ok(ix) => ix.load_all()?,
        Err(e) if args.val_root.is_some() => return Err(e.into()),
        Err(_) => {
            log::warn!(
                "no val split under {}; validating on the training pairs",
                val_root.display()
            );
            train.clone()
        }
    };
    let needs_perceptual = plan
        .stages
        .iter()
        .flat_map(|s| &s.losses)
        .any(|t| t.kind == LossKind::Perceptual && t.weight != 0.0);
    let backend: Option<Arc<dyn PerceptualBackend>> = match &args.backend {
        Some(p) => Some(load_backend(p)?),
        None if needs_perceptual => {
            log::warn!("plan uses a perceptual loss and no --backend was given; using the pixel-space stub");
            Some(Arc::new(StubBackend))
        }
        None => None,
    };
    let manifest = RunManifest::start(
        "train",
        json!({
            "plan": plan,
            "data_root": root,
            "train_pairs": train.len(),
            "val_pairs": val.len(),
            "resume": args.resume,
            "backend": args.backend,
        }),
        seed,
    );
    std::fs::create_dir_all(&args.out_dir)
        .with_context(|| format!("creating {}", args.out_dir.display()))?;
    std::fs::write(args.out_dir.join("plan.toml"), plan.to_toml()?)?;
    let opts = TrainOptions {
        seed,
        out_dir: Some(args.out_dir.clone()),
        resume: args.resume,
        stop_after: args.stop_after,
        backend,
    };
    let outcome = run_plan(None, &plan, &train, &val, &opts)?;
    let mut outputs: Vec<String> = [
        "plan.toml",
        effdeblur::train::LAST_CHECKPOINT,
        effdeblur::train::TRAIN_LOG,
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    if args
        .out_dir
        .join(effdeblur::train::BEST_CHECKPOINT)
        .exists()
    {
        outputs.push(effdeblur::train::BEST_CHECKPOINT.into());
    }
    let manifest = manifest.finish(outputs);
    manifest.write(&args.out_dir.join(MANIFEST_NAME))?;
    let last_l1 = outcome.log.last().and_then(|r| r.losses.get("l1")).copied();
    println!(
        "{} {}: {} steps logged, final l1 {}, best val PSNR {}",
        plan.name,
        if outcome.completed {
            "completed"
        } else {
            "stopped"
        },
        outcome.log.len(),
        last_l1
            .map(|v| format!("{v:.5}"))
            .unwrap_or_else(|| "-".into()),
        outcome
            .best
            .as_ref()
            .map(|b| format!("{:.3} dB", b.val_psnr))
            .unwrap_or_else(|| "-".into()),
    );
    Ok(TrainOutcome {
        plan,
        outcome,
        manifest,
    })
}

pub struct EvalOutcome {
    pub summary: EvalSummary,
    pub manifest: RunManifest,
}

fn parse_tta(spec: &str, merge: MergeArg) -> Result<TtaSpec> {
    let mut tta = match spec {
        "flips" => TtaSpec::flips(),
        "flips_scale" | "flips+scale" => TtaSpec::flips_and_scale(),
        other => TtaSpec::parse(other).map_err(|e| CliError::Usage(e.to_string()))?,
    };
    tta.merge = match merge {
        MergeArg::Mean => TtaMerge::Mean,
        MergeArg::Median => TtaMerge::Median,
    };
    Ok(tta)
}

pub fn cmd_eval(args: &EvalArgs, seed: u64) -> Result<EvalOutcome> {
    let tta = parse_tta(&args.tta, args.tta_merge)?;
    let split = parse_split(&args.split)?;
    let ck = Checkpoint::read(&args.checkpoint)?;
    let weights = if ck.has_ema() && !args.raw {
        WeightSet::Ema
    } else {
        WeightSet::Raw
    };
    let mut model = ck.instantiate(weights)?;
    model.set_mode(Mode::Eval)?;
    let root = data_root(&args.data_root, "--data-root")?;
    let index = build_index(&root, split)?;
    let mut restorer = Restorer::new(&model).with_max_pixels(args.max_pixels);
    if let Some(t) = args.tile {
        restorer = restorer
            .with_tiling(t, args.overlap)
            .map_err(|e| CliError::Usage(e.to_string()))?;
    }
    let manifest = RunManifest::start(
        "eval",
        json!({
            "checkpoint": args.checkpoint,
            "model": ck.config,
            "weights": weights,
            "data_root": root,
            "split": split.as_str(),
            "tta": tta,
            "tile": args.tile,
            "overlap": args.overlap,
            "max_pixels": args.max_pixels,
        }),
        seed,
    );
    let summary =
        restore_index(&restorer, &index, &args.out_dir, &tta).map_err(|e| match args.tile {
            None => {
                anyhow::Error::from(e).context("restoration failed; large inputs may need --tile")
            }
            Some(_) => e.into(),
        })?;
    let outputs = summary
        .written
        .iter()
        .filter_map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
        .collect();
    let manifest = manifest.finish(outputs);
    manifest.write(&args.out_dir.join(MANIFEST_NAME))?;
    println!(
        "restored {} image(s) with {} forward pass(es); {} value(s) clamped",
        summary.written.len(),
        summary.forward_passes,
        summary.clamped_values
    );
    Ok(EvalOutcome { summary, manifest })
}

pub struct ScoreOutcome {
    pub report: MetricReport,
    pub csv: String,
    pub json: String,
}

pub const SCORES_CSV: &str = "scores.csv";
pub const REPORT_JSON: &str = "report.json";

fn score_backend(spec: &Option<String>) -> Result<Option<Box<dyn PerceptualBackend>>> {
    Ok(match spec.as_deref() {
        None => None,
        Some("stub") => Some(Box::new(StubBackend)),
        Some(p) => Some(Box::new(ConvBackend::from_json_file(Path::new(p))?)),
    })
}

/// Scores a prediction directory against an index. Shared with packaging
/// so an unpacked archive rescored later matches byte for byte.
pub fn score_dir(
    pred_dir: &Path,
    index: &DatasetIndex,
    weights: ScoreWeights,
    backend: Option<&dyn PerceptualBackend>,
) -> Result<ScoreOutcome> {
    let report = score_submission(pred_dir, index, weights, backend)?;
    let csv = report.to_csv()?;
    let json = report.to_json();
    Ok(ScoreOutcome { report, csv, json })
}

pub fn cmd_score(args: &ScoreArgs, seed: u64) -> Result<ScoreOutcome> {
    let weights = ScoreWeights::parse(&args.weights).map_err(|e| CliError::Usage(e.to_string()))?;
    let split = parse_split(&args.split)?;
    let root = data_root(&args.gt_root, "--gt-root")?;
    if !args.pred_dir.is_dir() {
        return Err(CliError::Usage(format!(
            "prediction directory {} does not exist",
            args.pred_dir.display()
        ))
        .into());
    }
    let index = build_index(&root, split)?;
    let backend = score_backend(&args.backend)?;
    let out = score_dir(&args.pred_dir, &index, weights, backend.as_deref())?;
    println!("{}", leaderboard_header());
    println!("{}", out.report.table_row(&args.name));
    if !out.report.missing.is_empty() {
        println!("missing predictions: {}", out.report.missing.join(", "));
    }
    if let Some(dir) = &args.out_dir {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        std::fs::write(dir.join(SCORES_CSV), &out.csv)?;
        std::fs::write(dir.join(REPORT_JSON), &out.json)?;
        RunManifest::start(
            "score",
            json!({
                "pred_dir": args.pred_dir,
                "gt_root": root,
                "split": split.as_str(),
                "weights": weights,
                "backend": args.backend,
            }),
            seed,
        )
        .finish(vec![SCORES_CSV.into(), REPORT_JSON.into()])
        .write(&dir.join(MANIFEST_NAME))?;
    }
    Ok(out)
}

pub fn cmd_bench(args: &BenchArgs, seed: u64) -> Result<RuntimeStats> {
    let cfg = resolve_model(&args.model)?;
    let res = parse_resolution(&args.res)?;
    let mut model = ModelInstance::build(&cfg, DType::F32, seed)?;
    model.set_mode(Mode::Eval)?;
    let stats = benchmark_runtime(&model, res.height, res.width, args.runs, args.warmup)?;
    println!(
        "{} at {}x{}: mean {:.2} ms, p50 {:.2} ms over {} run(s) on {}",
        cfg.label(),
        res.width,
        res.height,
        stats.mean_ms,
        stats.p50_ms,
        args.runs,
        stats.device
    );
    if let Some(out) = &args.out {
        std::fs::write(out, serde_json::to_string_pretty(&stats)?)?;
        let name = out
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        RunManifest::start(
            "bench",
            json!({ "model": cfg, "resolution": res, "runs": args.runs, "warmup": args.warmup }),
            seed,
        )
        .finish(vec![name])
        .write(&sibling_manifest(out))?;
    }
    Ok(stats)
}
