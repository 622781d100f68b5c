//! Embedded defaults, dumpable so every shipped setting can be reviewed and
//! edited as text.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;

use effdeblur::efficiency::{MacsPolicy, GATE_HEIGHT, GATE_WIDTH, MACS_BUDGET, PARAMS_BUDGET};
use effdeblur::inference::TtaSpec;
use effdeblur::metrics::ScoreWeights;
use effdeblur::models::{Family, ModelConfig};
use effdeblur::train::shipped_plans;

#[derive(Serialize)]
struct ProfileDefaults {
    resolution: String,
    params_budget: u64,
    macs_budget: u64,
    policy: MacsPolicy,
}

#[derive(Serialize)]
struct EvalDefaults {
    split: String,
    tile_overlap: usize,
    max_pixels: usize,
    tta: TtaSpec,
}

#[derive(Serialize)]
struct ScoreDefaults {
    split: String,
    weights: ScoreWeights,
}

#[derive(Serialize)]
struct ToolDefaults {
    profile: ProfileDefaults,
    eval: EvalDefaults,
    score: ScoreDefaults,
}

fn tool_defaults() -> ToolDefaults {
    ToolDefaults {
        profile: ProfileDefaults {
            resolution: format!("{GATE_WIDTH}x{GATE_HEIGHT}"),
            params_budget: PARAMS_BUDGET,
            macs_budget: MACS_BUDGET,
            policy: MacsPolicy::challenge(),
        },
        eval: EvalDefaults {
            split: "val".into(),
            tile_overlap: 32,
            max_pixels: 8_000_000,
            tta: TtaSpec::identity(),
        },
        score: ScoreDefaults {
            split: "val".into(),
            weights: ScoreWeights::default(),
        },
    }
}

/// `(relative path, TOML text)` for every embedded default.
pub fn default_files() -> Result<Vec<(String, String)>> {
    let mut files = vec![(
        "defaults.toml".to_string(),
        toml::to_string_pretty(&tool_defaults())?,
    )];
    for f in [
        Family::Nafnet,
        Family::Nafreplocal,
        Family::Restormerl,
        Family::SaNafnet,
    ] {
        files.push((
            format!("models/{f}.toml"),
            ModelConfig::default_for(f).to_toml()?,
        ));
    }
    for p in shipped_plans() {
        files.push((format!("plans/{}.toml", p.name), p.to_toml()?));
    }
    Ok(files)
}

pub fn render_defaults() -> Result<String> {
    let mut out = String::new();
    for (name, text) in default_files()? {
        out.push_str(&format!("# ---- {name} ----\n{text}\n"));
    }
    Ok(out)
}

pub fn write_defaults(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    for (name, text) in default_files()? {
        let path = dir.join(&name);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)
                .with_context(|| format!("creating {}", parent.display()))?;
        }
        std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        written.push(path);
    }
    Ok(written)
}
