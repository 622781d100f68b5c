//! Training objectives on `N×3×H×W` tensors. Every loss returns a scalar
//! tensor that stays on the autograd graph.

use std::collections::BTreeMap;
use std::f64::consts::LN_10;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::PerceptualBackend;
use crate::ops::depthwise_conv2d;

/// MSE floor of the PSNR loss; identical tensors give `-80` dB.
pub const PSNR_LOSS_MSE_FLOOR: f64 = 1e-8;
/// Added under the square root of the Sobel magnitude so its gradient
/// stays finite on flat regions.
pub const EDGE_EPS: f64 = 1e-6;

fn check(pred: &Tensor, gt: &Tensor) -> Result<()> {
    if pred.dims() != gt.dims() {
        return Err(Error::Shape(format!(
            "prediction {:?} vs target {:?}",
            pred.dims(),
            gt.dims()
        )));
    }
    Ok(())
}

pub fn loss_l1(pred: &Tensor, gt: &Tensor) -> Result<Tensor> {
    check(pred, gt)?;
    Ok((pred - gt)?.abs()?.mean_all()?)
}

/// Batch mean of `10·log10(max(MSE_i, 1e-8))`, i.e. negative PSNR at peak 1.
pub fn loss_psnr(pred: &Tensor, gt: &Tensor) -> Result<Tensor> {
    check(pred, gt)?;
    let mse = (pred - gt)?.sqr()?.flatten_from(1)?.mean(1)?;
    let floored = mse.maximum(PSNR_LOSS_MSE_FLOOR)?;
    Ok((floored.log()?.mean_all()? * (10.0 / LN_10))?)
}

fn sobel_kernels(channels: usize, dtype: DType) -> Result<(Tensor, Tensor)> {
    let gx = [-1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0];
    let gy = [-1.0, -2.0, -1.0, 0.0, 0.0, 0.0, 1.0, 2.0, 1.0];
    let rep = |k: &[f64; 9]| -> Result<Tensor> {
        let v: Vec<f64> = (0..channels).flat_map(|_| k.iter().copied()).collect();
        Ok(Tensor::from_vec(v, (channels, 1, 3, 3), &Device::Cpu)?.to_dtype(dtype)?)
    };
    Ok((rep(&gx)?, rep(&gy)?))
}

/// Per-channel Sobel gradient magnitude, valid mode (`H-2 × W-2`).
pub fn sobel_magnitude(x: &Tensor) -> Result<Tensor> {
    let c = x.dim(1)?;
    let (kx, ky) = sobel_kernels(c, x.dtype())?;
    let gx = depthwise_conv2d(x, &kx, 0, 0)?;
    let gy = depthwise_conv2d(x, &ky, 0, 0)?;
    Ok(((gx.sqr()? + gy.sqr()?)? + EDGE_EPS)?.sqrt()?)
}

/// L1 distance between Sobel gradient magnitudes.
pub fn loss_edge(pred: &Tensor, gt: &Tensor) -> Result<Tensor> {
    check(pred, gt)?;
    let (_, _, h, w) = pred.dims4()?;
    if h < 3 || w < 3 {
        return Err(Error::Shape(format!(
            "edge loss needs at least 3x3 inputs, got {h}x{w}"
        )));
    }
    Ok((sobel_magnitude(pred)? - sobel_magnitude(gt)?)?
        .abs()?
        .mean_all()?)
}

/// Sum over backend layers of the feature-space MSE. With the identity stub
/// this is the pixel MSE.
pub fn loss_perceptual(
    pred: &Tensor,
    gt: &Tensor,
    backend: Option<&dyn PerceptualBackend>,
) -> Result<Tensor> {
    check(pred, gt)?;
    let backend = backend.ok_or(Error::NoBackend)?;
    let fa = backend.features(pred)?;
    let fb = backend.features(gt)?;
    let mut total = Tensor::zeros((), pred.dtype(), pred.device())?;
    for (a, b) in fa.iter().zip(&fb) {
        total = (total + (a - b)?.sqr()?.mean_all()?)?;
    }
    Ok(total)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    L1,
    Psnr,
    Edge,
    Perceptual,
}

impl LossKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            LossKind::L1 => "l1",
            LossKind::Psnr => "psnr",
            LossKind::Edge => "edge",
            LossKind::Perceptual => "perceptual",
        }
    }

    pub fn eval(
        &self,
        pred: &Tensor,
        gt: &Tensor,
        backend: Option<&dyn PerceptualBackend>,
    ) -> Result<Tensor> {
        match self {
            LossKind::L1 => loss_l1(pred, gt),
            LossKind::Psnr => loss_psnr(pred, gt),
            LossKind::Edge => loss_edge(pred, gt),
            LossKind::Perceptual => loss_perceptual(pred, gt, backend),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossTerm {
    pub kind: LossKind,
    pub weight: f64,
}

impl LossTerm {
    pub fn new(kind: LossKind, weight: f64) -> Self {
        Self { kind, weight }
    }
}

/// Weighted objective plus the unweighted value of every term. L1 is always
/// reported so runs with different objectives share one progress measure.
pub struct LossValues {
    pub total: Tensor,
    pub terms: BTreeMap<String, f64>,
}

pub fn total_loss(
    pred: &Tensor,
    gt: &Tensor,
    terms: &[LossTerm],
    backend: Option<&dyn PerceptualBackend>,
) -> Result<LossValues> {
    let mut total: Option<Tensor> = None;
    let mut values = BTreeMap::new();
    for t in terms {
        let v = t.kind.eval(pred, gt, backend)?;
        values.insert(
            t.kind.as_str().to_string(),
            v.to_dtype(DType::F64)?.to_scalar::<f64>()?,
        );
        if t.weight == 0.0 {
            continue;
        }
        let w = (v * t.weight)?;
        total = Some(match total {
            Some(acc) => (acc + w)?,
            None => w,
        });
    }
    if !values.contains_key("l1") {
        let l1 = loss_l1(&pred.detach(), &gt.detach())?;
        values.insert("l1".into(), l1.to_dtype(DType::F64)?.to_scalar::<f64>()?);
    }
    let total = total
        .ok_or_else(|| Error::Config("objective needs at least one positive weight".into()))?;
    Ok(LossValues {
        total,
        terms: values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::StubBackend;

    fn scalar(t: &Tensor) -> f64 {
        t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
    }

    fn t(v: Vec<f64>, shape: (usize, usize, usize, usize)) -> Tensor {
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    #[test]
    fn l1_cases() {
        let a = Tensor::rand(0f64, 1f64, (2, 3, 4, 4), &Device::Cpu).unwrap();
        assert_eq!(scalar(&loss_l1(&a, &a).unwrap()), 0.0);
        let b = (&a + 0.1).unwrap();
        assert!((scalar(&loss_l1(&b, &a).unwrap()) - 0.1).abs() < 1e-12);
    }

    #[test]
    fn psnr_loss_cases() {
        let a = Tensor::zeros((1, 3, 4, 4), DType::F64, &Device::Cpu).unwrap();
        assert!((scalar(&loss_psnr(&a, &a).unwrap()) + 80.0).abs() < 1e-9);
        let b = (&a + 0.5).unwrap();
        assert!((scalar(&loss_psnr(&b, &a).unwrap()) + 6.020599913279624).abs() < 1e-9);
        let c = (&a + 0.25).unwrap();
        assert!(scalar(&loss_psnr(&c, &a).unwrap()) < scalar(&loss_psnr(&b, &a).unwrap()));
    }

    #[test]
    fn edge_loss_on_constants_and_step() {
        let a = Tensor::full(0.2f64, (1, 1, 5, 6), &Device::Cpu).unwrap();
        let b = Tensor::full(0.9f64, (1, 1, 5, 6), &Device::Cpu).unwrap();
        assert!(scalar(&loss_edge(&a, &b).unwrap()).abs() < 1e-12);
        // A vertical step at column 3 versus column 4: row-constant, so
        // only gx is nonzero and equals 4 on the two columns the step spans.
        let step = |at: usize| {
            t(
                (0..30)
                    .map(|i| if i % 6 >= at { 1.0 } else { 0.0 })
                    .collect(),
                (1, 1, 5, 6),
            )
        };
        let got = scalar(&loss_edge(&step(3), &step(4)).unwrap());
        // Valid output is 3×4; magnitudes per column: p = [0,4,4,0], q = [0,0,4,4].
        let m = (16.0 + EDGE_EPS).sqrt() - EDGE_EPS.sqrt();
        let expect = 3.0 * 2.0 * m / 12.0;
        assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
    }

    #[test]
    fn perceptual_stub_is_pixel_mse() {
        let a = Tensor::rand(0f64, 1f64, (1, 3, 4, 4), &Device::Cpu).unwrap();
        let b = Tensor::rand(0f64, 1f64, (1, 3, 4, 4), &Device::Cpu).unwrap();
        let mse = scalar(&(&a - &b).unwrap().sqr().unwrap().mean_all().unwrap());
        let got = scalar(&loss_perceptual(&a, &b, Some(&StubBackend)).unwrap());
        assert!((got - mse).abs() < 1e-12);
        assert_eq!(
            got,
            scalar(&loss_perceptual(&b, &a, Some(&StubBackend)).unwrap())
        );
        assert_eq!(
            scalar(&loss_perceptual(&a, &a, Some(&StubBackend)).unwrap()),
            0.0
        );
        assert!(matches!(
            loss_perceptual(&a, &b, None),
            Err(Error::NoBackend)
        ));
    }

    #[test]
    fn total_reports_l1_and_rejects_all_zero() {
        let a = Tensor::zeros((1, 3, 4, 4), DType::F64, &Device::Cpu).unwrap();
        let b = (&a + 0.5).unwrap();
        let v = total_loss(&b, &a, &[LossTerm::new(LossKind::Psnr, 1.0)], None).unwrap();
        assert!((v.terms["l1"] - 0.5).abs() < 1e-12);
        assert!(total_loss(&b, &a, &[LossTerm::new(LossKind::L1, 0.0)], None).is_err());
    }
}
