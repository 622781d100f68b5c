//! Submission archives: results, fused checkpoint, efficiency report,
//! factsheet and manifest in one tar with deterministic headers.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde_json::json;

use effdeblur::efficiency::{
    check_gate, count_macs, GateVerdict, MacsPolicy, GATE_HEIGHT, GATE_WIDTH,
};
use effdeblur::models::{Checkpoint, Mode, ModelInstance, WeightSet};
use effdeblur::reparam::convert_model;

use crate::manifest::{sibling_manifest, RunManifest};
use crate::{CliError, PackageArgs};

pub const RESULTS_DIR: &str = "results";
pub const MODEL_ENTRY: &str = "model.ckpt";
pub const EFFICIENCY_ENTRY: &str = "efficiency.json";
pub const FACTSHEET_ENTRY: &str = "factsheet.md";
pub const MANIFEST_ENTRY: &str = "manifest.json";

/// Factsheet keys printed in this order; others follow in the order given.
pub const FACTSHEET_KEYS: [&str; 6] = [
    "team",
    "members",
    "affiliation",
    "contact",
    "method",
    "description",
];

pub struct PackageOutcome {
    pub archive: PathBuf,
    pub entries: Vec<String>,
    pub verdict: GateVerdict,
    pub manifest: RunManifest,
}

pub fn parse_fields(raw: &[String]) -> Result<Vec<(String, String)>> {
    let mut out: Vec<(String, String)> = Vec::new();
    for f in raw {
        let (k, v) = f
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("factsheet field {f:?} is not KEY=VALUE")))?;
        let k = k.trim();
        if k.is_empty() {
            return Err(CliError::Usage(format!("factsheet field {f:?} has an empty key")).into());
        }
        match out.iter_mut().find(|(key, _)| key == k) {
            Some(slot) => slot.1 = v.to_string(),
            None => out.push((k.to_string(), v.to_string())),
        }
    }
    Ok(out)
}

/// Fills the factsheet template. Values are copied verbatim.
pub fn render_factsheet(
    fields: &[(String, String)],
    model: &ModelInstance,
    verdict: &GateVerdict,
    params: u64,
    macs: u64,
) -> String {
    let get = |k: &str| {
        fields
            .iter()
            .find(|(key, _)| key == k)
            .map(|(_, v)| v.as_str())
    };
    let mut s = String::from("# Factsheet\n\n## Submission\n\n");
    for k in FACTSHEET_KEYS {
        s.push_str(&format!("- {k}: {}\n", get(k).unwrap_or("(not provided)")));
    }
    let extra: Vec<_> = fields
        .iter()
        .filter(|(k, _)| !FACTSHEET_KEYS.contains(&k.as_str()))
        .collect();
    if !extra.is_empty() {
        s.push_str("\n## Additional\n\n");
        for (k, v) in extra {
            s.push_str(&format!("- {k}: {v}\n"));
        }
    }
    s.push_str(&format!(
        "\n## Efficiency at {GATE_WIDTH}x{GATE_HEIGHT}\n\n- model: {}\n- parameters: {params} ({:.2}M)\n- MACs: {macs} ({:.2}G)\n- gate: {}\n",
        model.config().label(),
        params as f64 / 1e6,
        macs as f64 / 1e9,
        if verdict.pass { "PASS" } else { "FAIL" }
    ));
    s
}

fn prediction_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(CliError::Usage(format!("no PNG results in {}", dir.display())).into());
    }
    Ok(files)
}

/// Tar with zeroed owners and timestamps so identical content gives
/// identical bytes.
pub fn write_tar(entries: &[(String, Vec<u8>)]) -> Result<Vec<u8>> {
    let mut builder = tar::Builder::new(Vec::new());
    for (name, data) in entries {
        let mut h = tar::Header::new_ustar();
        h.set_entry_type(tar::EntryType::Regular);
        h.set_size(data.len() as u64);
        h.set_mode(0o644);
        h.set_mtime(0);
        h.set_uid(0);
        h.set_gid(0);
        builder.append_data(&mut h, name, data.as_slice())?;
    }
    Ok(builder.into_inner()?)
}

pub fn cmd_package(args: &PackageArgs, seed: u64) -> Result<PackageOutcome> {
    let fields = parse_fields(&args.fields)?;
    let preds = prediction_files(&args.pred_dir)?;
    let ck = Checkpoint::read(&args.checkpoint)?;
    let weights = if ck.has_ema() && !args.raw {
        WeightSet::Ema
    } else {
        WeightSet::Raw
    };
    let mut model = ck.instantiate(weights)?;
    model.set_mode(Mode::Eval)?;
    let fused = convert_model(&model)?;
    let report = count_macs(&fused, GATE_HEIGHT, GATE_WIDTH, MacsPolicy::challenge())?;
    let verdict = check_gate(&report)?;
    if !verdict.pass && !args.force {
        return Err(CliError::Rejected(format!(
            "{} fails the efficiency gate: {}; pass --force to package anyway",
            report.model,
            verdict.reasons.join("; ")
        ))
        .into());
    }

    let mut entries: Vec<(String, Vec<u8>)> = Vec::new();
    for p in &preds {
        let name = p
            .file_name()
            .expect("listed files have names")
            .to_string_lossy();
        let data = std::fs::read(p).with_context(|| format!("reading {}", p.display()))?;
        entries.push((format!("{RESULTS_DIR}/{name}"), data));
    }
    entries.push((
        MODEL_ENTRY.into(),
        Checkpoint::from_model(&fused)?.to_bytes()?,
    ));
    let efficiency = json!({ "report": report, "gate": verdict });
    entries.push((
        EFFICIENCY_ENTRY.into(),
        serde_json::to_string_pretty(&efficiency)?.into_bytes(),
    ));
    let factsheet = render_factsheet(
        &fields,
        &fused,
        &verdict,
        report.params_total,
        report.macs_total,
    );
    entries.push((FACTSHEET_ENTRY.into(), factsheet.into_bytes()));

    let mut names: Vec<String> = entries.iter().map(|(n, _)| n.clone()).collect();
    names.push(MANIFEST_ENTRY.into());
    let manifest = RunManifest::start(
        "package",
        json!({
            "checkpoint": args.checkpoint,
            "pred_dir": args.pred_dir,
            "weights": weights,
            "fields": fields,
            "force": args.force,
            "model": fused.config(),
        }),
        seed,
    )
    .finish(names.clone());
    entries.push((MANIFEST_ENTRY.into(), manifest.to_json().into_bytes()));

    let bytes = write_tar(&entries)?;
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(&args.out, bytes).with_context(|| format!("writing {}", args.out.display()))?;
    manifest.write(&sibling_manifest(&args.out))?;
    println!(
        "packaged {} result(s) into {} (gate {})",
        preds.len(),
        args.out.display(),
        if verdict.pass { "PASS" } else { "FAIL, forced" }
    );
    names.sort();
    Ok(PackageOutcome {
        archive: args.out.clone(),
        entries: names,
        verdict,
        manifest,
    })
}
