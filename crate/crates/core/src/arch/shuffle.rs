//! Depth-to-space rearrangements.
//!
//! Layout rule: `out[n, c, h·r + i, w·r + j] = in[n, c·r² + i·r + j, h, w]`.

use candle_core::Tensor;

use crate::error::{Error, Result};

/// `N×(C·r²)×H×W → N×C×(rH)×(rW)`.
pub fn pixel_shuffle(x: &Tensor, r: usize) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    if r == 0 || c % (r * r) != 0 {
        return Err(Error::Shape(format!(
            "{c} channels not divisible by r²={}",
            r * r
        )));
    }
    if r == 1 {
        return Ok(x.clone());
    }
    let oc = c / (r * r);
    Ok(x.reshape((n, oc, r, r, h, w))?
        .permute((0, 1, 4, 2, 5, 3))?
        .reshape((n, oc, h * r, w * r))?)
}

/// `N×C×(rH)×(rW) → N×(C·r²)×H×W`.
pub fn pixel_unshuffle(x: &Tensor, r: usize) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    if r == 0 || h % r != 0 || w % r != 0 {
        return Err(Error::Shape(format!("{h}x{w} not divisible by r={r}")));
    }
    if r == 1 {
        return Ok(x.clone());
    }
    let (oh, ow) = (h / r, w / r);
    Ok(x.reshape((n, c, oh, r, ow, r))?
        .permute((0, 1, 3, 5, 2, 4))?
        .reshape((n, c * r * r, oh, ow))?)
}
