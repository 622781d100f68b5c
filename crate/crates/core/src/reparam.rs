//! Structural reparameterization: multi-branch convolutions for training that
//! fold into one convolution for deployment.
//!
//! Each branch is a convolution (optionally followed by batch norm) or an
//! identity mapping (optionally batch-normed). Smaller kernels are embedded in
//! the centre of the main kernel, batch norm folds into a per-channel scale and
//! shift, and the identity becomes a centred Dirac kernel.

use candle_core::{DType, Device, Tensor, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arch::{BatchNorm2d, Conv2d, ConvOpts};
use crate::efficiency::{FeatureShape, LayerKind, Profile, Profiler};
use crate::error::{Error, Result};
use crate::models::{Mode, ModelInstance};
use crate::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BranchKind {
    Kxk,
    #[serde(rename = "1x1")]
    OneByOne,
    #[serde(rename = "1xk")]
    OneByK,
    #[serde(rename = "kx1")]
    KByOne,
    Identity,
}

impl BranchKind {
    fn kernel(&self, k: usize) -> Option<(usize, usize)> {
        match self {
            BranchKind::Kxk => Some((k, k)),
            BranchKind::OneByOne => Some((1, 1)),
            BranchKind::OneByK => Some((1, k)),
            BranchKind::KByOne => Some((k, 1)),
            BranchKind::Identity => None,
        }
    }

    fn tag(&self) -> &'static str {
        match self {
            BranchKind::Kxk => "kxk",
            BranchKind::OneByOne => "conv1x1",
            BranchKind::OneByK => "conv1xk",
            BranchKind::KByOne => "convkx1",
            BranchKind::Identity => "identity",
        }
    }
}

/// Asymmetric-convolution branch set: square, horizontal and vertical kernels.
pub fn default_branches() -> Vec<BranchKind> {
    vec![BranchKind::Kxk, BranchKind::OneByK, BranchKind::KByOne]
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RepConvSpec {
    pub in_ch: usize,
    pub out_ch: usize,
    pub main_kernel: usize,
    pub branches: Vec<BranchKind>,
    pub bn_per_branch: bool,
}

impl RepConvSpec {
    pub fn validate(&self) -> Result<()> {
        if self.main_kernel.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "main kernel must be odd, got {}",
                self.main_kernel
            )));
        }
        if self.branches.is_empty() {
            return Err(Error::Config("a RepConv needs at least one branch".into()));
        }
        if self.branches.contains(&BranchKind::Identity) && self.in_ch != self.out_ch {
            return Err(Error::Config(format!(
                "identity branch needs in_ch == out_ch, got {} -> {}",
                self.in_ch, self.out_ch
            )));
        }
        let mut seen = self.branches.clone();
        seen.sort_by_key(|b| b.tag());
        seen.dedup();
        if seen.len() != self.branches.len() {
            return Err(Error::Config("duplicate branch kinds".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Branch {
    kind: BranchKind,
    conv: Option<Conv2d>,
    bn: Option<BatchNorm2d>,
}

/// Multi-branch convolution whose output is the sum of its branches.
#[derive(Clone, Debug)]
pub struct RepConv {
    name: String,
    spec: RepConvSpec,
    branches: Vec<Branch>,
    // An identity-only spec owns no tensors to read this from.
    dtype: DType,
}

/// Single-convolution equivalent of a [`RepConv`].
#[derive(Clone, Debug)]
pub struct FusedKernel {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl RepConv {
    pub fn new(store: &mut ParamStore, name: &str, spec: RepConvSpec) -> Result<Self> {
        spec.validate()?;
        let k = spec.main_kernel;
        let mut branches = Vec::with_capacity(spec.branches.len());
        for kind in &spec.branches {
            let prefix = format!("{name}.{}", kind.tag());
            let conv = match kind.kernel(k) {
                Some(kernel) => Some(Conv2d::new(
                    store,
                    &format!("{prefix}.conv"),
                    spec.in_ch,
                    spec.out_ch,
                    kernel,
                    ConvOpts {
                        bias: !spec.bn_per_branch,
                        ..ConvOpts::default()
                    },
                )?),
                None => None,
            };
            let bn = if spec.bn_per_branch {
                Some(BatchNorm2d::new(
                    store,
                    &format!("{prefix}.bn"),
                    spec.out_ch,
                )?)
            } else {
                None
            };
            branches.push(Branch {
                kind: *kind,
                conv,
                bn,
            });
        }
        Ok(Self {
            name: name.to_string(),
            spec,
            branches,
            dtype: store.dtype(),
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn spec(&self) -> &RepConvSpec {
        &self.spec
    }

    pub fn has_batch_norm(&self) -> bool {
        self.branches.iter().any(|b| b.bn.is_some())
    }

    /// Parameter name of branch `kind`'s conv weight, if it has one.
    pub fn branch_conv(&self, kind: BranchKind) -> Option<&Conv2d> {
        self.branches
            .iter()
            .find(|b| b.kind == kind)
            .and_then(|b| b.conv.as_ref())
    }

    pub fn branch_bn(&self, kind: BranchKind) -> Option<&BatchNorm2d> {
        self.branches
            .iter()
            .find(|b| b.kind == kind)
            .and_then(|b| b.bn.as_ref())
    }

    pub fn forward_t(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let c = x.dim(1)?;
        if c != self.spec.in_ch {
            return Err(Error::Shape(format!(
                "{} expects {} channels, got {c}",
                self.name, self.spec.in_ch
            )));
        }
        let mut acc: Option<Tensor> = None;
        for b in &self.branches {
            let mut y = match &b.conv {
                Some(conv) => conv.forward(x)?,
                None => x.clone(),
            };
            if let Some(bn) = &b.bn {
                y = bn.forward_t(&y, train)?;
            }
            acc = Some(match acc {
                Some(a) => (a + y)?,
                None => y,
            });
        }
        Ok(acc.expect("spec has at least one branch"))
    }

    /// Folds all branches into one `K×K` kernel and bias. Batch-norm branches
    /// require frozen (eval-mode) statistics.
    pub fn fuse(&self, stats_frozen: bool) -> Result<FusedKernel> {
        if self.has_batch_norm() && !stats_frozen {
            return Err(Error::UnfrozenStatistics(self.name.clone()));
        }
        let k = self.spec.main_kernel;
        let (cin, cout) = (self.spec.in_ch, self.spec.out_ch);
        let mut weight = Tensor::zeros((cout, cin, k, k), self.dtype(), &Device::Cpu)?;
        let mut bias = Tensor::zeros((cout,), self.dtype(), &Device::Cpu)?;
        for b in &self.branches {
            let (w, mut bb) = match &b.conv {
                Some(conv) => {
                    let w = embed_center(&conv.weight().detach(), k)?;
                    let bb = match conv.bias() {
                        Some(v) => v.detach(),
                        None => Tensor::zeros((cout,), w.dtype(), w.device())?,
                    };
                    (w, bb)
                }
                None => (
                    dirac(cout, k, weight.dtype())?,
                    Tensor::zeros((cout,), weight.dtype(), weight.device())?,
                ),
            };
            let mut w = w;
            if let Some(bn) = &b.bn {
                let (scale, shift) = bn.eval_affine()?;
                w = w.broadcast_mul(&scale.reshape(((), 1, 1, 1))?)?;
                bb = ((bb * &scale)? + shift)?;
            }
            weight = (weight + w)?;
            bias = (bias + bb)?;
        }
        Ok(FusedKernel { weight, bias })
    }

    fn dtype(&self) -> DType {
        self.dtype
    }
}

/// Zero-pads a `Cout×Cin×kh×kw` kernel to `K×K`, centred.
pub fn embed_center(w: &Tensor, k: usize) -> Result<Tensor> {
    let (_, _, kh, kw) = w.dims4()?;
    if kh > k || kw > k || !(k - kh).is_multiple_of(2) || !(k - kw).is_multiple_of(2) {
        return Err(Error::Shape(format!(
            "cannot centre a {kh}x{kw} kernel in {k}x{k}"
        )));
    }
    let (ph, pw) = ((k - kh) / 2, (k - kw) / 2);
    Ok(w.pad_with_zeros(D::Minus2, ph, ph)?
        .pad_with_zeros(D::Minus1, pw, pw)?)
}

/// `C×C×K×K` kernel that reproduces its input.
pub fn dirac(channels: usize, k: usize, dtype: DType) -> Result<Tensor> {
    let mut v = vec![0f64; channels * channels * k * k];
    let centre = (k / 2) * k + k / 2;
    for c in 0..channels {
        v[(c * channels + c) * k * k + centre] = 1.0;
    }
    Ok(Tensor::from_vec(v, (channels, channels, k, k), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Applies a fused kernel as a stride-1 "same" convolution.
pub fn apply_fused(x: &Tensor, fused: &FusedKernel) -> Result<Tensor> {
    let k = fused.weight.dim(2)?;
    let y = x.conv2d(&fused.weight, k / 2, 1, 1, 1)?;
    Ok(y.broadcast_add(&fused.bias.reshape((1, (), 1, 1))?)?)
}

/// Per-layer tolerance on the fused vs multi-branch outputs.
pub const LAYER_FUSION_TOL: f64 = 1e-5;
/// Whole-model tolerance on a random `1×3×64×64` input.
pub const MODEL_FUSION_TOL: f64 = 1e-4;

fn probe(shape: (usize, usize, usize, usize), dtype: DType, seed: u64) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.0 * shape.1 * shape.2 * shape.3;
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Ok(Tensor::from_vec(v, shape, &Device::Cpu)?.to_dtype(dtype)?)
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> Result<f64> {
    Ok((a - b)?
        .abs()?
        .flatten_all()?
        .to_dtype(DType::F64)?
        .max(0)?
        .to_scalar::<f64>()?)
}

/// Replaces every multi-branch convolution by its single fused equivalent
/// and verifies the result. The model must be in eval mode so batch-norm
/// statistics are frozen. A model without branches comes back unchanged.
pub fn convert_model(model: &ModelInstance) -> Result<ModelInstance> {
    let reps = model.rep_convs();
    if reps.is_empty() {
        return model.deep_clone();
    }
    if model.mode() != Mode::Eval {
        return Err(Error::UnfrozenStatistics(
            "model is in training mode; switch to eval before fusing".into(),
        ));
    }
    let mut store = model.store().deep_clone()?;
    for rep in &reps {
        let fused = rep.fuse(true)?;
        let x = probe((1, rep.spec().in_ch, 16, 16), model.dtype(), 7)?;
        let err = max_abs_diff(&rep.forward_t(&x, false)?, &apply_fused(&x, &fused)?)?;
        if !(err <= LAYER_FUSION_TOL) {
            return Err(Error::FusionMismatch {
                layer: rep.name().to_string(),
                max_abs_err: err,
            });
        }
        store.remove_prefix(rep.name());
        store.insert_param(&format!("{}.weight", rep.name()), &fused.weight.detach())?;
        store.insert_param(&format!("{}.bias", rep.name()), &fused.bias.detach())?;
    }
    let mut cfg = model.config().clone();
    cfg.use_reparam = false;
    let converted = ModelInstance::from_store(&cfg, store, true)?;
    let x = probe((1, 3, 64, 64), model.dtype(), 11)?;
    let err = max_abs_diff(
        &model.forward_t(&x, false)?,
        &converted.forward_t(&x, false)?,
    )?;
    if !(err <= MODEL_FUSION_TOL) {
        return Err(Error::FusionMismatch {
            layer: "<model>".into(),
            max_abs_err: err,
        });
    }
    Ok(converted)
}

impl Profile for RepConv {
    fn profile(&self, input: FeatureShape, p: &mut Profiler) -> Result<FeatureShape> {
        let mut out = input;
        for b in &self.branches {
            out = match &b.conv {
                Some(c) => c.profile(input, p)?,
                None => input,
            };
            if let Some(bn) = &b.bn {
                bn.profile(out, p)?;
            }
        }
        if self.branches.iter().all(|b| b.conv.is_none()) {
            p.record(&self.name, LayerKind::Conv, 0, 0);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn max_abs(a: &Tensor, b: &Tensor) -> f64 {
        (a - b)
            .unwrap()
            .abs()
            .unwrap()
            .flatten_all()
            .unwrap()
            .max(0)
            .unwrap()
            .to_dtype(DType::F64)
            .unwrap()
            .to_scalar::<f64>()
            .unwrap()
    }

    #[test]
    fn one_by_one_lands_in_the_centre() {
        let mut store = ParamStore::new(DType::F32, 1);
        let spec = RepConvSpec {
            in_ch: 2,
            out_ch: 3,
            main_kernel: 3,
            branches: vec![BranchKind::Kxk, BranchKind::OneByOne],
            bn_per_branch: false,
        };
        let rep = RepConv::new(&mut store, "r", spec).unwrap();
        let fused = rep.fuse(false).unwrap();
        let w3: Vec<f32> = rep
            .branch_conv(BranchKind::Kxk)
            .unwrap()
            .weight()
            .flatten_all()
            .unwrap()
            .to_vec1()
            .unwrap();
        let w1: Vec<f32> = rep
            .branch_conv(BranchKind::OneByOne)
            .unwrap()
            .weight()
            .flatten_all()
            .unwrap()
            .to_vec1()
            .unwrap();
        let f: Vec<f32> = fused.weight.flatten_all().unwrap().to_vec1().unwrap();
        for o in 0..3 {
            for i in 0..2 {
                for y in 0..3 {
                    for x in 0..3 {
                        let idx = ((o * 2 + i) * 3 + y) * 3 + x;
                        let expect = w3[idx] + if y == 1 && x == 1 { w1[o * 2 + i] } else { 0.0 };
                        assert_eq!(f[idx], expect);
                    }
                }
            }
        }
    }

    #[test]
    fn identity_fuses_to_dirac() {
        let mut store = ParamStore::new(DType::F32, 1);
        let spec = RepConvSpec {
            in_ch: 4,
            out_ch: 4,
            main_kernel: 3,
            branches: vec![BranchKind::Identity],
            bn_per_branch: false,
        };
        let rep = RepConv::new(&mut store, "r", spec).unwrap();
        let fused = rep.fuse(true).unwrap();
        assert_eq!(
            max_abs(&fused.weight, &dirac(4, 3, DType::F32).unwrap()),
            0.0
        );
        let x = Tensor::rand(-1f32, 1f32, (1, 4, 5, 5), &Device::Cpu).unwrap();
        assert!(max_abs(&apply_fused(&x, &fused).unwrap(), &x) < 1e-7);
    }

    #[test]
    fn unfrozen_bn_refuses_to_fuse() {
        let mut store = ParamStore::new(DType::F32, 1);
        let spec = RepConvSpec {
            in_ch: 3,
            out_ch: 3,
            main_kernel: 3,
            branches: default_branches(),
            bn_per_branch: true,
        };
        let rep = RepConv::new(&mut store, "r", spec).unwrap();
        assert!(matches!(rep.fuse(false), Err(Error::UnfrozenStatistics(_))));
        assert!(rep.fuse(true).is_ok());
    }

    #[test]
    fn spec_validation() {
        let bad = RepConvSpec {
            in_ch: 3,
            out_ch: 4,
            main_kernel: 3,
            branches: vec![BranchKind::Kxk, BranchKind::Identity],
            bn_per_branch: false,
        };
        assert!(bad.validate().is_err());
        let even = RepConvSpec {
            main_kernel: 4,
            branches: vec![BranchKind::Kxk],
            ..bad.clone()
        };
        assert!(even.validate().is_err());
    }

    fn perturbed_rep_model() -> ModelInstance {
        let mut cfg = crate::models::ModelConfig::nafreplocal();
        cfg.width = 8;
        cfg.use_reparam = true;
        let mut m = ModelInstance::build(&cfg, DType::F32, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for (name, var) in m.store().params().iter().chain(m.store().buffers()) {
            if name.contains(".bn.") {
                let n = var.elem_count();
                let v: Vec<f32> = (0..n).map(|_| rng.random_range(0.5f32..1.5)).collect();
                var.set(&Tensor::from_vec(v, var.shape(), &Device::Cpu).unwrap())
                    .unwrap();
            }
        }
        m.set_mode(Mode::Eval).unwrap();
        m
    }

    #[test]
    fn convert_model_preserves_outputs() {
        let m = perturbed_rep_model();
        let fused = convert_model(&m).unwrap();
        assert!(fused.is_fused());
        assert!(fused.rep_convs().is_empty());
        assert!(!fused.config().use_reparam);
        assert!(fused.parameters().keys().all(|k| !k.contains(".bn.")));
        assert!(fused.buffers().is_empty());
        let x = probe((1, 3, 32, 32), DType::F32, 3).unwrap();
        let err = max_abs(
            &m.forward_t(&x, false).unwrap(),
            &fused.forward_t(&x, false).unwrap(),
        );
        assert!(err < MODEL_FUSION_TOL, "{err}");
    }

    #[test]
    fn convert_model_requires_eval_mode() {
        let mut m = perturbed_rep_model();
        m.set_mode(Mode::Train).unwrap();
        assert!(matches!(
            convert_model(&m),
            Err(Error::UnfrozenStatistics(_))
        ));
    }
}
