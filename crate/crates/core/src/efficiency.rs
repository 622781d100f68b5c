//! The efficiency referee: analytic parameter and MACs accounting, wall-clock
//! benchmarking and the challenge budget gate.
//!
//! MACs are counted analytically from layer shapes, never by tracing a forward
//! pass. What counts is governed by [`MacsPolicy`]. The default
//! [`MacsPolicy::challenge`] convention counts
//!
//! * convolutions: `(Cin/groups)·Cout·Kh·Kw·Hout·Wout`, plus `Cout·Hout·Wout` for the bias,
//! * pooling reductions feeding channel attention: one per input element,
//! * attention gating multiplies (`x ⊙ att` in SCA and spatial attention): one per element,
//!
//! and leaves out normalization, residual additions and scales, SimpleGate
//! products and the transposed-attention matrix products. This convention
//! reproduces the published NAFNet efficiency table to two decimals.
//! [`MacsPolicy::full`] turns every optional term on, including
//! `2·heads·(C/heads)²·H·W` for transposed attention.
//!
//! The pooled branch of global SCA is costed at 1×1 resolution; local SCA
//! runs its pointwise conv at every position and is costed at full resolution.

use std::sync::Mutex;
use std::time::Instant;

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::ImageModel;

/// Channel × spatial extent of a single feature map (batch size 1).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FeatureShape {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl FeatureShape {
    pub fn new(c: usize, h: usize, w: usize) -> Self {
        Self { c, h, w }
    }

    pub fn numel(&self) -> u64 {
        (self.c * self.h * self.w) as u64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv,
    Norm,
    Scale,
    Gate,
    Pool,
    Attention,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MacsPolicy {
    pub conv_bias: bool,
    pub pooling: bool,
    pub attention_gating: bool,
    pub attention_products: bool,
    pub residual_scales: bool,
    pub elementwise_gates: bool,
    pub normalization: bool,
}

impl MacsPolicy {
    pub fn challenge() -> Self {
        Self {
            conv_bias: true,
            pooling: true,
            attention_gating: true,
            attention_products: false,
            residual_scales: false,
            elementwise_gates: false,
            normalization: false,
        }
    }

    pub fn full() -> Self {
        Self {
            conv_bias: true,
            pooling: true,
            attention_gating: true,
            attention_products: true,
            residual_scales: true,
            elementwise_gates: true,
            normalization: true,
        }
    }
}

impl Default for MacsPolicy {
    fn default() -> Self {
        Self::challenge()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCost {
    pub name: String,
    pub kind: LayerKind,
    pub params: u64,
    pub macs: u64,
}

/// Accumulates per-layer costs while a module tree describes itself.
#[derive(Clone, Debug)]
pub struct Profiler {
    policy: MacsPolicy,
    layers: Vec<LayerCost>,
}

impl Profiler {
    pub fn new(policy: MacsPolicy) -> Self {
        Self {
            policy,
            layers: Vec::new(),
        }
    }

    pub fn policy(&self) -> &MacsPolicy {
        &self.policy
    }

    pub fn record(&mut self, name: &str, kind: LayerKind, params: usize, macs: u64) {
        self.layers.push(LayerCost {
            name: name.to_string(),
            kind,
            params: params as u64,
            macs,
        });
    }

    pub fn layers(&self) -> &[LayerCost] {
        &self.layers
    }

    pub fn into_layers(self) -> Vec<LayerCost> {
        self.layers
    }

    pub fn params_total(&self) -> u64 {
        self.layers.iter().map(|l| l.params).sum()
    }

    pub fn macs_total(&self) -> u64 {
        self.layers.iter().map(|l| l.macs).sum()
    }
}

/// Static cost description. Implementations record every learnable tensor
/// exactly once and return the output feature shape.
pub trait Profile {
    fn profile(&self, input: FeatureShape, p: &mut Profiler) -> Result<FeatureShape>;
}

pub const PARAMS_BUDGET: u64 = 5_000_000;
pub const MACS_BUDGET: u64 = 200_000_000_000;
pub const GATE_HEIGHT: usize = 1200;
pub const GATE_WIDTH: usize = 1920;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Resolution {
    pub height: usize,
    pub width: usize,
}

impl Resolution {
    pub fn new(height: usize, width: usize) -> Self {
        Self { height, width }
    }

    pub fn gate() -> Self {
        Self::new(GATE_HEIGHT, GATE_WIDTH)
    }

    /// MACs are orientation-invariant, so portrait input is stored landscape.
    pub fn normalized(self) -> Self {
        if self.height > self.width {
            Self::new(self.width, self.height)
        } else {
            self
        }
    }

    pub fn is_gate(&self) -> bool {
        self.normalized() == Self::gate()
    }

    /// Parses `WxH`.
    pub fn parse_wxh(s: &str) -> Result<Self> {
        let (w, h) = s
            .split_once(['x', 'X'])
            .ok_or_else(|| Error::Invalid(format!("resolution {s:?} is not WxH")))?;
        let parse = |v: &str| {
            v.trim()
                .parse::<usize>()
                .map_err(|_| Error::Invalid(format!("resolution {s:?} is not WxH")))
        };
        Ok(Self::new(parse(h)?, parse(w)?))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RuntimeStats {
    pub mean_ms: f64,
    pub std_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub runs: usize,
    pub warmup: usize,
    pub device: String,
    pub resolution: Resolution,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GateFlags {
    pub params_ok: bool,
    pub macs_ok: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyReport {
    pub model: String,
    pub params_total: u64,
    pub macs_total: u64,
    pub resolution: Resolution,
    pub policy: MacsPolicy,
    pub gate: GateFlags,
    pub runtime: Option<RuntimeStats>,
    pub per_layer: Vec<LayerCost>,
}

impl EfficiencyReport {
    pub fn from_layers(
        model: &str,
        resolution: Resolution,
        policy: MacsPolicy,
        per_layer: Vec<LayerCost>,
    ) -> Self {
        let params_total = per_layer.iter().map(|l| l.params).sum();
        let macs_total = per_layer.iter().map(|l| l.macs).sum();
        Self {
            model: model.to_string(),
            params_total,
            macs_total,
            resolution,
            policy,
            gate: GateFlags {
                params_ok: params_total < PARAMS_BUDGET,
                macs_ok: macs_total < MACS_BUDGET,
            },
            runtime: None,
            per_layer,
        }
    }

    pub fn params_m(&self) -> f64 {
        self.params_total as f64 / 1e6
    }

    pub fn macs_g(&self) -> f64 {
        self.macs_total as f64 / 1e9
    }

    /// Pretty JSON; field order is fixed by the struct so output diffs cleanly.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// One table row: name, params (M), MACs (G), runtime (ms), gate.
    pub fn table_row(&self) -> String {
        let runtime = self
            .runtime
            .as_ref()
            .map(|r| format!("{:.2}", r.mean_ms))
            .unwrap_or_else(|| "-".into());
        let gate = if !self.resolution.is_gate() {
            "n/a"
        } else if self.gate.params_ok && self.gate.macs_ok {
            "PASS"
        } else {
            "FAIL"
        };
        format!(
            "| {:<24} | {:>8.2} | {:>9.2} | {:>9} | {:>4} |",
            self.model,
            self.params_m(),
            self.macs_g(),
            runtime,
            gate
        )
    }
}

pub fn table_header() -> String {
    format!(
        "| {:<24} | {:>8} | {:>9} | {:>9} | {:>4} |",
        "Method", "Params(M)", "MACs(G)", "Time(ms)", "Gate"
    )
}

/// Anything the referee can cost.
pub trait Costed {
    fn label(&self) -> String;
    /// Spatial divisibility the model needs; inputs are padded up to it.
    fn divisor(&self) -> usize;
    fn profile_at(&self, height: usize, width: usize, policy: MacsPolicy)
        -> Result<Vec<LayerCost>>;
}

fn pad_to(v: usize, m: usize) -> usize {
    v.div_ceil(m) * m
}

/// Parameter count with per-layer breakdown (resolution-independent).
pub fn count_params<M: Costed + ?Sized>(model: &M) -> Result<(u64, Vec<(String, u64)>)> {
    let d = model.divisor();
    let layers = model.profile_at(d, d, MacsPolicy::challenge())?;
    let per_layer: Vec<(String, u64)> = layers
        .into_iter()
        .filter(|l| l.params > 0)
        .map(|l| (l.name, l.params))
        .collect();
    Ok((per_layer.iter().map(|(_, p)| p).sum(), per_layer))
}

/// Full report at `height × width` (padded up to the model's divisor).
pub fn count_macs<M: Costed + ?Sized>(
    model: &M,
    height: usize,
    width: usize,
    policy: MacsPolicy,
) -> Result<EfficiencyReport> {
    let res = Resolution::new(height, width).normalized();
    let d = model.divisor();
    let layers = model.profile_at(pad_to(res.height, d), pad_to(res.width, d), policy)?;
    Ok(EfficiencyReport::from_layers(
        &model.label(),
        res,
        policy,
        layers,
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateVerdict {
    pub pass: bool,
    pub params_margin: i64,
    pub macs_margin: i64,
    pub reasons: Vec<String>,
}

/// Pass iff params < 5M and MACs < 200G, both at 1920×1200.
pub fn check_gate(report: &EfficiencyReport) -> Result<GateVerdict> {
    if !report.resolution.is_gate() {
        return Err(Error::GateResolution {
            height: report.resolution.height,
            width: report.resolution.width,
        });
    }
    let params_margin = PARAMS_BUDGET as i64 - report.params_total as i64;
    let macs_margin = MACS_BUDGET as i64 - report.macs_total as i64;
    let mut reasons = Vec::new();
    if params_margin <= 0 {
        reasons.push(format!(
            "parameters {:.2}M exceed the 5M budget by {:.2}M",
            report.params_m(),
            -params_margin as f64 / 1e6
        ));
    }
    if macs_margin <= 0 {
        reasons.push(format!(
            "MACs {:.2}G exceed the 200G budget by {:.2}G",
            report.macs_g(),
            -macs_margin as f64 / 1e9
        ));
    }
    Ok(GateVerdict {
        pass: reasons.is_empty(),
        params_margin,
        macs_margin,
        reasons,
    })
}

static DEVICE_LOCK: Mutex<()> = Mutex::new(());

pub fn device_description() -> String {
    let threads = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1);
    format!("cpu ({threads} threads, {})", std::env::consts::ARCH)
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let rank = q * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (rank - lo as f64)
}

/// Summary of timing samples in milliseconds.
pub fn runtime_stats(samples_ms: &[f64], warmup: usize, resolution: Resolution) -> RuntimeStats {
    let n = samples_ms.len();
    let mean = samples_ms.iter().sum::<f64>() / n as f64;
    let var = samples_ms.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n as f64;
    let mut sorted = samples_ms.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    RuntimeStats {
        mean_ms: mean,
        std_ms: var.sqrt(),
        p50_ms: percentile(&sorted, 0.5),
        p95_ms: percentile(&sorted, 0.95),
        runs: n,
        warmup,
        device: device_description(),
        resolution,
    }
}

/// Times `n` forward passes on random input after `warmup` discarded ones.
/// Holds a process-wide lock so concurrent benchmarks do not share the device.
pub fn benchmark_runtime<M: ImageModel + ?Sized>(
    model: &M,
    height: usize,
    width: usize,
    n: usize,
    warmup: usize,
) -> Result<RuntimeStats> {
    if n == 0 {
        return Err(Error::Invalid(
            "benchmark needs at least one timed run".into(),
        ));
    }
    let _guard = DEVICE_LOCK.lock().unwrap_or_else(|e| e.into_inner());
    let d = model.divisor();
    let (ph, pw) = (pad_to(height, d), pad_to(width, d));
    let x = Tensor::rand(0f32, 1f32, (1, 3, ph, pw), &Device::Cpu)?.to_dtype(model.dtype())?;
    let run = |x: &Tensor| -> Result<f64> {
        let t0 = Instant::now();
        model.forward(x).map_err(|e| {
            Error::Invalid(format!(
                "forward at {width}x{height} failed ({e}); retry with a smaller resolution or tiled inference"
            ))
        })?;
        Ok(t0.elapsed().as_secs_f64() * 1e3)
    };
    for _ in 0..warmup {
        run(&x)?;
    }
    let samples = (0..n).map(|_| run(&x)).collect::<Result<Vec<f64>>>()?;
    Ok(runtime_stats(
        &samples,
        warmup,
        Resolution::new(height, width),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(params: u64, macs: u64, res: Resolution) -> EfficiencyReport {
        EfficiencyReport::from_layers(
            "t",
            res,
            MacsPolicy::challenge(),
            vec![LayerCost {
                name: "x".into(),
                kind: LayerKind::Conv,
                params,
                macs,
            }],
        )
    }

    #[test]
    fn gate_budgets_are_strict() {
        let v = check_gate(&report(4_350_000, 146_330_000_000, Resolution::gate())).unwrap();
        assert!(v.pass);
        let v = check_gate(&report(5_980_000, 207_930_000_000, Resolution::gate())).unwrap();
        assert!(!v.pass);
        assert_eq!(v.reasons.len(), 2);
        let v = check_gate(&report(4_760_000, 198_250_000_000, Resolution::gate())).unwrap();
        assert!(v.pass);
        assert_eq!(v.macs_margin, 1_750_000_000);
        let v = check_gate(&report(5_000_000, 1, Resolution::gate())).unwrap();
        assert!(!v.pass);
    }

    #[test]
    fn gate_refuses_other_resolutions() {
        assert!(matches!(
            check_gate(&report(1, 1, Resolution::new(64, 64))),
            Err(Error::GateResolution { .. })
        ));
        assert!(check_gate(&report(1, 1, Resolution::new(1920, 1200).normalized())).is_ok());
    }

    #[test]
    fn single_sample_stats() {
        let s = runtime_stats(&[12.5], 0, Resolution::new(8, 8));
        assert_eq!(s.mean_ms, 12.5);
        assert_eq!(s.p50_ms, 12.5);
        assert_eq!(s.std_ms, 0.0);
        assert_eq!(s.runs, 1);
    }

    #[test]
    fn parse_resolution() {
        assert_eq!(
            Resolution::parse_wxh("1920x1200").unwrap(),
            Resolution::new(1200, 1920)
        );
        assert!(Resolution::parse_wxh("1920").is_err());
    }
}
