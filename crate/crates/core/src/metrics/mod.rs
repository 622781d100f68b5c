//! Leaderboard scoring: warp pre-alignment, PSNR, SSIM, perceptual distance
//! and the weighted composite score.

mod perceptual;
mod quality;
mod warp;

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use perceptual::{
    lpips, lpips_tensor, ConvBackend, ConvBackendSpec, ConvLayerSpec, PerceptualBackend,
    StubBackend,
};
pub use quality::{
    psnr, psnr_masked, ssim, Psnr, PSNR_CAP_DB, SSIM_K1, SSIM_K2, SSIM_SIGMA, SSIM_WINDOW,
};
pub use warp::{align_warp, Rect, WarpResult, WARP_MAX_ITERS, WARP_TOL};

use crate::data_io::{read_image, DatasetIndex};
use crate::error::{Error, Result};
use crate::image::Image;

/// Perceptual distance assigned to a missing prediction.
pub const MISSING_LPIPS: f64 = 1.0;

/// `Score = λ1·PSNR + λ2·SSIM + λ3·LPIPS`. LPIPS is lower-is-better, so λ3
/// must not be positive.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
}

impl Default for ScoreWeights {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 0.0,
            lambda3: 0.0,
        }
    }
}

impl ScoreWeights {
    pub fn new(lambda1: f64, lambda2: f64, lambda3: f64) -> Result<Self> {
        let w = Self {
            lambda1,
            lambda2,
            lambda3,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if ![self.lambda1, self.lambda2, self.lambda3]
            .iter()
            .all(|v| v.is_finite())
        {
            return Err(Error::Invalid("score weights must be finite".into()));
        }
        if self.lambda3 > 0.0 {
            return Err(Error::Invalid(
                "lambda3 must be <= 0: a lower perceptual distance may never lower the score"
                    .into(),
            ));
        }
        Ok(())
    }

    /// Parses `a,b,c`.
    pub fn parse(s: &str) -> Result<Self> {
        let parts: Vec<f64> = s
            .split(',')
            .map(|p| p.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Invalid(format!("weights {s:?}: {e}")))?;
        match parts.as_slice() {
            [a, b, c] => Self::new(*a, *b, *c),
            _ => Err(Error::Invalid(format!(
                "expected three comma-separated weights, got {s:?}"
            ))),
        }
    }

    pub fn needs_perceptual(&self) -> bool {
        self.lambda3 != 0.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub pair_id: String,
    pub psnr: f64,
    pub psnr_capped: bool,
    pub ssim: f64,
    pub lpips: Option<f64>,
    pub aligned: bool,
    pub missing: bool,
    pub valid_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub psnr: f64,
    pub ssim: f64,
    pub lpips: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_image: Vec<MetricRow>,
    pub aggregate: Aggregate,
    pub score: f64,
    pub weights: ScoreWeights,
    pub valid_region_fraction: f64,
    /// Name of the perceptual backend, or `None` in no-perceptual mode.
    pub perceptual_backend: Option<String>,
    pub missing: Vec<String>,
    pub verdict: String,
}

/// Arithmetic means over rows (LPIPS only when every row has it).
pub fn aggregate(rows: &[MetricRow]) -> Aggregate {
    let n = rows.len().max(1) as f64;
    let lpips = rows
        .iter()
        .map(|r| r.lpips)
        .collect::<Option<Vec<f64>>>()
        .filter(|v| !v.is_empty())
        .map(|v| v.iter().sum::<f64>() / n);
    Aggregate {
        psnr: rows.iter().map(|r| r.psnr).sum::<f64>() / n,
        ssim: rows.iter().map(|r| r.ssim).sum::<f64>() / n,
        lpips,
    }
}

/// Weighted sum of the aggregate metrics. A missing LPIPS contributes zero
/// (only allowed when `lambda3 == 0`).
pub fn composite_score(agg: &Aggregate, weights: &ScoreWeights) -> f64 {
    weights.lambda1 * agg.psnr
        + weights.lambda2 * agg.ssim
        + weights.lambda3 * agg.lpips.unwrap_or(0.0)
}

fn crop_rect(img: &Image, r: Rect) -> Result<Image> {
    img.crop(r.top, r.left, r.height, r.width)
}

/// Aligns `pred` onto `gt` and measures it. PSNR uses every in-bounds pixel;
/// SSIM and LPIPS use the largest fully valid rectangle.
pub fn score_pair(
    pair_id: &str,
    pred: &Image,
    gt: &Image,
    backend: Option<&dyn PerceptualBackend>,
) -> Result<MetricRow> {
    let warp = align_warp(pred, gt)?;
    let p = psnr_masked(&warp.warped, gt, Some(&warp.mask), 1.0)?;
    let rect = warp
        .valid_rect()
        .ok_or_else(|| Error::Invalid(format!("{pair_id}: no valid region after warp")))?;
    let (a, b) = if rect.height == gt.height() && rect.width == gt.width() {
        (warp.warped.clone(), gt.clone())
    } else {
        (crop_rect(&warp.warped, rect)?, crop_rect(gt, rect)?)
    };
    let s = ssim(&a, &b)?;
    let l = match backend {
        Some(be) => Some(lpips(&a, &b, be)?),
        None => None,
    };
    Ok(MetricRow {
        pair_id: pair_id.to_string(),
        psnr: p.db,
        psnr_capped: p.capped,
        ssim: s,
        lpips: l,
        aligned: warp.success,
        missing: false,
        valid_fraction: warp.valid_fraction(),
    })
}

fn missing_row(pair_id: &str, perceptual: bool) -> MetricRow {
    MetricRow {
        pair_id: pair_id.to_string(),
        psnr: 0.0,
        psnr_capped: false,
        ssim: 0.0,
        lpips: perceptual.then_some(MISSING_LPIPS),
        aligned: false,
        missing: true,
        valid_fraction: 0.0,
    }
}

/// Assembles a report from rows (re-sorted by pair id).
pub fn build_report(
    mut rows: Vec<MetricRow>,
    weights: ScoreWeights,
    backend: Option<&dyn PerceptualBackend>,
) -> MetricReport {
    rows.sort_by(|a, b| a.pair_id.cmp(&b.pair_id));
    let agg = aggregate(&rows);
    let missing: Vec<String> = rows
        .iter()
        .filter(|r| r.missing)
        .map(|r| r.pair_id.clone())
        .collect();
    let n = rows.len().max(1) as f64;
    MetricReport {
        score: composite_score(&agg, &weights),
        valid_region_fraction: rows.iter().map(|r| r.valid_fraction).sum::<f64>() / n,
        aggregate: agg,
        weights,
        perceptual_backend: backend.map(|b| b.name()),
        verdict: if missing.is_empty() {
            "complete".into()
        } else {
            "incomplete submission".into()
        },
        missing,
        per_image: rows,
    }
}

/// Scores `<pred_dir>/<pair_id>.png` against every ground-truth pair in
/// `gt_index`. Missing predictions score 0 dB / 0 SSIM and are listed.
pub fn score_submission(
    pred_dir: &Path,
    gt_index: &DatasetIndex,
    weights: ScoreWeights,
    backend: Option<&dyn PerceptualBackend>,
) -> Result<MetricReport> {
    weights.validate()?;
    if weights.needs_perceptual() && backend.is_none() {
        return Err(Error::NoBackend);
    }
    if !gt_index.has_ground_truth() {
        return Err(Error::Invalid(
            "scoring needs an index with ground truth".into(),
        ));
    }
    let has_png = std::fs::read_dir(pred_dir)
        .map_err(|e| Error::io(pred_dir, e))?
        .filter_map(|e| e.ok())
        .any(|e| {
            e.path()
                .extension()
                .is_some_and(|x| x.eq_ignore_ascii_case("png"))
        });
    if !has_png {
        return Err(Error::Invalid(format!(
            "prediction directory {} is empty",
            pred_dir.display()
        )));
    }
    let rows = gt_index
        .entries()
        .par_iter()
        .map(|e| {
            let path = pred_dir.join(format!("{}.png", e.pair_id));
            if !path.is_file() {
                log::warn!("missing prediction for {}", e.pair_id);
                return Ok(missing_row(&e.pair_id, backend.is_some()));
            }
            let pred = read_image(&path)?;
            let gt = read_image(e.sharp.as_ref().expect("checked above"))?;
            score_pair(&e.pair_id, &pred, &gt, backend)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(build_report(rows, weights, backend))
}

impl MetricReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// `pair_id,psnr,ssim,lpips,aligned` with fixed precision.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let err = |e: csv::Error| Error::Invalid(format!("csv: {e}"));
        w.write_record(["pair_id", "psnr", "ssim", "lpips", "aligned"])
            .map_err(err)?;
        for r in &self.per_image {
            w.write_record([
                r.pair_id.clone(),
                format!("{:.6}", r.psnr),
                format!("{:.6}", r.ssim),
                r.lpips.map(|v| format!("{v:.6}")).unwrap_or_default(),
                r.aligned.to_string(),
            ])
            .map_err(err)?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| Error::Invalid(format!("csv: {e}")))?;
        Ok(String::from_utf8(bytes).expect("ascii"))
    }

    /// Leaderboard-style summary row.
    pub fn table_row(&self, name: &str) -> String {
        let lp = self
            .aggregate
            .lpips
            .map(|v| format!("{v:.4}"))
            .unwrap_or_else(|| "-".into());
        format!(
            "| {:<24} | {:>7.3} | {:>6.4} | {:>6} | {:>9.4} |",
            name, self.aggregate.psnr, self.aggregate.ssim, lp, self.score
        )
    }
}

pub fn leaderboard_header() -> String {
    format!(
        "| {:<24} | {:>7} | {:>6} | {:>6} | {:>9} |",
        "Submission", "PSNR", "SSIM", "LPIPS", "Score"
    )
}

/// Orders submissions by descending score (stable for ties).
pub fn rank_by_score<'a>(reports: &[(&'a str, &MetricReport)]) -> Vec<&'a str> {
    let mut v: Vec<(&str, f64)> = reports.iter().map(|(n, r)| (*n, r.score)).collect();
    v.sort_by(|a, b| b.1.total_cmp(&a.1));
    v.into_iter().map(|(n, _)| n).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(id: &str, psnr: f64, ssim: f64) -> MetricRow {
        MetricRow {
            pair_id: id.into(),
            psnr,
            psnr_capped: false,
            ssim,
            lpips: None,
            aligned: true,
            missing: false,
            valid_fraction: 1.0,
        }
    }

    #[test]
    fn weights_parse_and_sign_rule() {
        assert_eq!(
            ScoreWeights::parse("1,0,0").unwrap(),
            ScoreWeights::default()
        );
        assert!(ScoreWeights::parse("1,0,0.5").is_err());
        assert!(ScoreWeights::parse("1,0").is_err());
    }

    #[test]
    fn composite_follows_weights() {
        let rows = vec![row("b", 30.0, 0.8), row("a", 32.0, 0.9)];
        let r = build_report(rows, ScoreWeights::default(), None);
        assert_eq!(r.per_image[0].pair_id, "a");
        assert_eq!(r.score, 31.0);
        let s = composite_score(&r.aggregate, &ScoreWeights::new(0.0, 1.0, 0.0).unwrap());
        assert!((s - 0.85).abs() < 1e-12);
    }

    #[test]
    fn missing_rows_mark_incomplete() {
        let r = build_report(
            vec![row("a", 30.0, 0.9), missing_row("b", false)],
            ScoreWeights::default(),
            None,
        );
        assert_eq!(r.verdict, "incomplete submission");
        assert_eq!(r.missing, vec!["b".to_string()]);
        assert_eq!(r.aggregate.psnr, 15.0);
    }

    #[test]
    fn csv_layout() {
        let r = build_report(vec![row("a", 30.0, 0.9)], ScoreWeights::default(), None);
        assert_eq!(
            r.to_csv().unwrap(),
            "pair_id,psnr,ssim,lpips,aligned\na,30.000000,0.900000,,true\n"
        );
    }
}
