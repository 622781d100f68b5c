//! Function-preserving model surgery applied between training stages.

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use super::{Family, ModelInstance};
use crate::arch::BATCH_NORM_EPS;
use crate::error::{Error, Result};
use crate::reparam::{embed_center, BranchKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Surgery {
    SwapFirstConvK5,
    SwapFirstConvK3,
    InsertMiddleScag,
    EnableReparam,
    None,
}

impl ModelInstance {
    /// Applies `action` in place. Every action keeps the eval-mode function
    /// unchanged: kernel growth zero-pads, SCA-G is inserted as an identity
    /// gate and reparameterization starts from the current stem weights.
    pub fn apply_surgery(&mut self, action: Surgery) -> Result<()> {
        match action {
            Surgery::None => Ok(()),
            Surgery::SwapFirstConvK5 => self.swap_first_conv(5),
            Surgery::SwapFirstConvK3 => self.swap_first_conv(3),
            Surgery::InsertMiddleScag => self.insert_middle_scag(),
            Surgery::EnableReparam => self.enable_reparam(),
        }
    }

    fn require_naf(&self, what: &str) -> Result<()> {
        if self.config().family == Family::Restormerl {
            return Err(Error::Config(format!(
                "{what} is not defined for restormerl"
            )));
        }
        Ok(())
    }

    /// Resizes the first conv kernel: growing zero-embeds the old kernel in the
    /// centre, shrinking keeps the central crop.
    pub fn swap_first_conv(&mut self, k: usize) -> Result<()> {
        self.require_naf("first-conv swap")?;
        if self.config().use_reparam {
            return Err(Error::Config(
                "swap the first conv before enabling reparameterization".into(),
            ));
        }
        if k.is_multiple_of(2) {
            return Err(Error::Config(format!("kernel {k} must be odd")));
        }
        let cur = self.config().first_conv_kernel;
        if cur == k {
            return Ok(());
        }
        let w = self
            .store()
            .get("intro.weight")
            .ok_or_else(|| Error::NameMismatch("intro.weight".into()))?
            .as_tensor()
            .clone();
        let new_w = if k > cur {
            embed_center(&w, k)?
        } else {
            let off = (cur - k) / 2;
            w.narrow(D::Minus2, off, k)?
                .narrow(D::Minus1, off, k)?
                .contiguous()?
        };
        self.store_mut().remove_prefix("intro.weight");
        self.store_mut().insert_param("intro.weight", &new_w)?;
        self.config_mut().first_conv_kernel = k;
        self.rebuild()
    }

    /// Appends a global SCA after the middle blocks, initialised to the
    /// identity (zero weights, unit bias).
    pub fn insert_middle_scag(&mut self) -> Result<()> {
        self.require_naf("SCA-G insertion")?;
        if self.config().use_middle_scag {
            log::warn!("middle SCA-G already present; surgery skipped");
            return Ok(());
        }
        self.config_mut().use_middle_scag = true;
        self.rebuild()?;
        let store = self.store();
        let w = store.get("middle_sca.conv.weight").expect("just built");
        let b = store.get("middle_sca.conv.bias").expect("just built");
        w.set(&w.zeros_like()?)?;
        b.set(&b.ones_like()?)?;
        Ok(())
    }

    /// Replaces the first and last convs by multi-branch RepConvs whose
    /// main branch carries the current weights and whose other branches
    /// contribute zero.
    pub fn enable_reparam(&mut self) -> Result<()> {
        self.require_naf("reparameterization")?;
        if self.config().use_reparam {
            log::warn!("reparameterization already enabled; surgery skipped");
            return Ok(());
        }
        let mut old = Vec::new();
        for stem in ["intro", "ending"] {
            let get = |n: &str| -> Result<Tensor> {
                Ok(self
                    .store()
                    .get(&format!("{stem}.{n}"))
                    .ok_or_else(|| Error::NameMismatch(format!("{stem}.{n}")))?
                    .as_tensor()
                    .copy()?)
            };
            old.push((stem, get("weight")?, get("bias")?));
        }
        for (stem, _, _) in &old {
            self.store_mut().remove_prefix(stem);
        }
        self.config_mut().use_reparam = true;
        self.rebuild()?;
        let bn = self.config().reparam.bn_per_branch;
        let branches = self.config().reparam.branches.clone();
        for (stem, w, b) in &old {
            for kind in &branches {
                let tag = match kind {
                    BranchKind::Kxk => "kxk",
                    BranchKind::OneByOne => "conv1x1",
                    BranchKind::OneByK => "conv1xk",
                    BranchKind::KByOne => "convkx1",
                    BranchKind::Identity => "identity",
                };
                let p = |n: &str| format!("{stem}.{tag}.{n}");
                let var = |n: &str| {
                    self.store()
                        .get(&p(n))
                        .cloned()
                        .ok_or_else(|| Error::NameMismatch(p(n)))
                };
                let main = *kind == BranchKind::Kxk;
                if main {
                    var("conv.weight")?.set(w)?;
                }
                if bn {
                    let gamma = var("bn.weight")?;
                    let beta = var("bn.bias")?;
                    let rvar = var("bn.running_var")?;
                    var("bn.running_mean")?.set(&b.zeros_like()?)?;
                    if main {
                        gamma.set(&gamma.ones_like()?)?;
                        beta.set(b)?;
                        // sqrt(var + eps) == 1, so the eval-mode BN is x + bias
                        rvar.set(&(rvar.ones_like()? * (1.0 - BATCH_NORM_EPS))?)?;
                    } else {
                        gamma.set(&gamma.zeros_like()?)?;
                        beta.set(&beta.zeros_like()?)?;
                        rvar.set(&rvar.ones_like()?)?;
                    }
                } else if main {
                    var("conv.bias")?.set(b)?;
                } else {
                    let cw = var("conv.weight")?;
                    cw.set(&cw.zeros_like()?)?;
                    let cb = var("conv.bias")?;
                    cb.set(&cb.zeros_like()?)?;
                }
            }
        }
        self.set_fused(false);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::super::{ImageModel, Mode, ModelConfig};
    use super::*;
    use candle_core::{DType, Device};

    fn tiny() -> ModelInstance {
        let mut cfg = ModelConfig::nafreplocal();
        cfg.width = 8;
        cfg.use_middle_scag = false;
        let mut m = ModelInstance::build(&cfg, DType::F64, 3).unwrap();
        m.set_mode(Mode::Eval).unwrap();
        m
    }

    fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
        (a - b)
            .unwrap()
            .abs()
            .unwrap()
            .flatten_all()
            .unwrap()
            .max(0)
            .unwrap()
            .to_scalar::<f64>()
            .unwrap()
    }

    fn perturb_scales(m: &ModelInstance) {
        // residual scales start at zero; make the blocks matter
        for (name, v) in m.parameters() {
            if name.ends_with(".beta") || name.ends_with(".gamma") {
                v.set(&(v.ones_like().unwrap() * 0.3).unwrap()).unwrap();
            }
        }
    }

    #[test]
    fn every_surgery_preserves_eval_function() {
        let mut m = tiny();
        perturb_scales(&m);
        let x = Tensor::rand(0f64, 1f64, (1, 3, 32, 32), &Device::Cpu).unwrap();
        let y0 = m.forward(&x).unwrap();
        for action in [
            Surgery::SwapFirstConvK5,
            Surgery::SwapFirstConvK3,
            Surgery::InsertMiddleScag,
            Surgery::EnableReparam,
        ] {
            m.apply_surgery(action).unwrap();
            let y = m.forward(&x).unwrap();
            assert!(
                max_diff(&y, &y0) < 1e-10,
                "{action:?}: {}",
                max_diff(&y, &y0)
            );
        }
        assert_eq!(m.rep_convs().len(), 2);
        assert!(m.config().use_middle_scag);
    }

    #[test]
    fn kernel_swap_only_touches_intro() {
        let mut m = tiny();
        let names: Vec<String> = m.parameters().keys().cloned().collect();
        m.apply_surgery(Surgery::SwapFirstConvK5).unwrap();
        assert_eq!(m.parameters()["intro.weight"].dims(), &[8, 3, 5, 5]);
        m.apply_surgery(Surgery::SwapFirstConvK3).unwrap();
        let after: Vec<String> = m.parameters().keys().cloned().collect();
        assert_eq!(names, after);
    }

    #[test]
    fn restormer_rejects_surgery() {
        let mut cfg = ModelConfig::restormerl();
        cfg.width = 8;
        let mut m = ModelInstance::build(&cfg, DType::F32, 0).unwrap();
        assert!(m.apply_surgery(Surgery::InsertMiddleScag).is_err());
        assert!(m.apply_surgery(Surgery::None).is_ok());
    }
}
