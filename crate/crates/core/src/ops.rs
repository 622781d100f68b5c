//! CPU kernels that candle does not provide in a usable form: a linear-time
//! sliding box mean (for local channel statistics) and a direct depthwise
//! convolution. Both carry hand-written backward passes.

use candle_core::{CpuStorage, CustomOp1, CustomOp2, Layout, Result, Shape, Tensor, WithDType};

fn contiguous<'a, T: WithDType>(s: &'a CpuStorage, l: &Layout) -> Result<&'a [T]> {
    let data = T::cpu_storage_as_slice(s)?;
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&data[a..b]),
        None => candle_core::bail!("custom op requires a contiguous input"),
    }
}

fn dims4(l: &Layout) -> Result<(usize, usize, usize, usize)> {
    l.shape().dims4()
}

/// Mean over every `kh × kw` window that lies fully inside the image
/// ("valid" mode): `N×C×H×W → N×C×(H-kh+1)×(W-kw+1)`.
#[derive(Clone, Copy, Debug)]
struct BoxMean {
    kh: usize,
    kw: usize,
}

fn box_mean_plane<T: WithDType>(
    src: &[T],
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    dst: &mut [T],
) {
    let oh = h - kh + 1;
    let ow = w - kw + 1;
    // integral image in f64 keeps cancellation error negligible for large planes
    let mut integral = vec![0.0f64; (h + 1) * (w + 1)];
    for y in 0..h {
        let mut row = 0.0;
        for x in 0..w {
            row += src[y * w + x].to_f64();
            integral[(y + 1) * (w + 1) + x + 1] = integral[y * (w + 1) + x + 1] + row;
        }
    }
    let inv = 1.0 / (kh * kw) as f64;
    for y in 0..oh {
        for x in 0..ow {
            let s = integral[(y + kh) * (w + 1) + x + kw]
                - integral[y * (w + 1) + x + kw]
                - integral[(y + kh) * (w + 1) + x]
                + integral[y * (w + 1) + x];
            dst[y * ow + x] = T::from_f64(s * inv);
        }
    }
}

/// Adjoint of the valid box mean: scatters each output gradient uniformly over
/// its window. `N×C×oh×ow → N×C×H×W`.
fn box_mean_adjoint_plane<T: WithDType>(
    g: &[T],
    oh: usize,
    ow: usize,
    kh: usize,
    kw: usize,
    dst: &mut [T],
) {
    let h = oh + kh - 1;
    let w = ow + kw - 1;
    let mut integral = vec![0.0f64; (oh + 1) * (ow + 1)];
    for y in 0..oh {
        let mut row = 0.0;
        for x in 0..ow {
            row += g[y * ow + x].to_f64();
            integral[(y + 1) * (ow + 1) + x + 1] = integral[y * (ow + 1) + x + 1] + row;
        }
    }
    let inv = 1.0 / (kh * kw) as f64;
    for y in 0..h {
        // output rows whose window covers input row y
        let y0 = y.saturating_sub(kh - 1);
        let y1 = y.min(oh - 1) + 1;
        for x in 0..w {
            let x0 = x.saturating_sub(kw - 1);
            let x1 = x.min(ow - 1) + 1;
            let s = integral[y1 * (ow + 1) + x1]
                - integral[y0 * (ow + 1) + x1]
                - integral[y1 * (ow + 1) + x0]
                + integral[y0 * (ow + 1) + x0];
            dst[y * w + x] = T::from_f64(s * inv);
        }
    }
}

impl BoxMean {
    fn run<T: WithDType>(&self, s: &CpuStorage, l: &Layout) -> Result<(CpuStorage, Shape)> {
        let (n, c, h, w) = dims4(l)?;
        let src = contiguous::<T>(s, l)?;
        let (oh, ow) = (h - self.kh + 1, w - self.kw + 1);
        let mut dst = vec![T::zero(); n * c * oh * ow];
        for (i, plane) in src.chunks_exact(h * w).enumerate() {
            box_mean_plane(
                plane,
                h,
                w,
                self.kh,
                self.kw,
                &mut dst[i * oh * ow..(i + 1) * oh * ow],
            );
        }
        Ok((T::to_cpu_storage_owned(dst), Shape::from((n, c, oh, ow))))
    }
}

impl CustomOp1 for BoxMean {
    fn name(&self) -> &'static str {
        "box-mean"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> Result<(CpuStorage, Shape)> {
        match s {
            CpuStorage::F32(_) => self.run::<f32>(s, l),
            CpuStorage::F64(_) => self.run::<f64>(s, l),
            _ => candle_core::bail!("box-mean supports f32/f64 only"),
        }
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> Result<Option<Tensor>> {
        let g = grad_res.contiguous()?.apply_op1(BoxMeanAdjoint {
            kh: self.kh,
            kw: self.kw,
        })?;
        Ok(Some(g))
    }
}

#[derive(Clone, Copy, Debug)]
struct BoxMeanAdjoint {
    kh: usize,
    kw: usize,
}

impl BoxMeanAdjoint {
    fn run<T: WithDType>(&self, s: &CpuStorage, l: &Layout) -> Result<(CpuStorage, Shape)> {
        let (n, c, oh, ow) = dims4(l)?;
        let src = contiguous::<T>(s, l)?;
        let (h, w) = (oh + self.kh - 1, ow + self.kw - 1);
        let mut dst = vec![T::zero(); n * c * h * w];
        for (i, plane) in src.chunks_exact(oh * ow).enumerate() {
            box_mean_adjoint_plane(
                plane,
                oh,
                ow,
                self.kh,
                self.kw,
                &mut dst[i * h * w..(i + 1) * h * w],
            );
        }
        Ok((T::to_cpu_storage_owned(dst), Shape::from((n, c, h, w))))
    }
}

impl CustomOp1 for BoxMeanAdjoint {
    fn name(&self) -> &'static str {
        "box-mean-adjoint"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> Result<(CpuStorage, Shape)> {
        match s {
            CpuStorage::F32(_) => self.run::<f32>(s, l),
            CpuStorage::F64(_) => self.run::<f64>(s, l),
            _ => candle_core::bail!("box-mean-adjoint supports f32/f64 only"),
        }
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> Result<Option<Tensor>> {
        let g = grad_res.contiguous()?.apply_op1(BoxMean {
            kh: self.kh,
            kw: self.kw,
        })?;
        Ok(Some(g))
    }
}

/// Valid-mode sliding mean over `kh × kw` windows.
pub fn box_mean_valid(x: &Tensor, kh: usize, kw: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if kh == 0 || kw == 0 || kh > h || kw > w {
        candle_core::bail!("box window {kh}x{kw} does not fit a {h}x{w} plane");
    }
    x.contiguous()?.apply_op1(BoxMean { kh, kw })
}

/// Depthwise (one filter per channel) stride-1 convolution with zero padding.
/// Kernel shape `C×1×kh×kw`.
#[derive(Clone, Copy, Debug)]
struct DepthwiseConv {
    ph: usize,
    pw: usize,
}

struct DwGeometry {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    ph: usize,
    pw: usize,
}

impl DwGeometry {
    fn new(input: &Layout, kernel: &Layout, ph: usize, pw: usize) -> Result<Self> {
        let (n, c, h, w) = dims4(input)?;
        let (kc, one, kh, kw) = dims4(kernel)?;
        if kc != c || one != 1 {
            candle_core::bail!(
                "depthwise kernel {:?} does not match {c} channels",
                kernel.shape()
            );
        }
        if h + 2 * ph < kh || w + 2 * pw < kw {
            candle_core::bail!("depthwise kernel larger than padded input");
        }
        Ok(Self {
            n,
            c,
            h,
            w,
            kh,
            kw,
            oh: h + 2 * ph - kh + 1,
            ow: w + 2 * pw - kw + 1,
            ph,
            pw,
        })
    }
}

fn dw_forward<T: WithDType>(g: &DwGeometry, x: &[T], k: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); g.n * g.c * g.oh * g.ow];
    for n in 0..g.n {
        for c in 0..g.c {
            let xp = &x[(n * g.c + c) * g.h * g.w..][..g.h * g.w];
            let kp = &k[c * g.kh * g.kw..][..g.kh * g.kw];
            let op = &mut out[(n * g.c + c) * g.oh * g.ow..][..g.oh * g.ow];
            for i in 0..g.kh {
                for j in 0..g.kw {
                    let wgt = kp[i * g.kw + j];
                    // output y reads input y + i - ph
                    let y_lo = g.ph.saturating_sub(i);
                    let y_hi = (g.h + g.ph).saturating_sub(i).min(g.oh);
                    let x_lo = g.pw.saturating_sub(j);
                    let x_hi = (g.w + g.pw).saturating_sub(j).min(g.ow);
                    for y in y_lo..y_hi {
                        let sy = y + i - g.ph;
                        let orow = &mut op[y * g.ow..(y + 1) * g.ow];
                        let irow = &xp[sy * g.w..(sy + 1) * g.w];
                        for xx in x_lo..x_hi {
                            orow[xx] += wgt * irow[xx + j - g.pw];
                        }
                    }
                }
            }
        }
    }
    out
}

fn dw_grad_input<T: WithDType>(g: &DwGeometry, go: &[T], k: &[T]) -> Vec<T> {
    let mut gi = vec![T::zero(); g.n * g.c * g.h * g.w];
    for n in 0..g.n {
        for c in 0..g.c {
            let gp = &go[(n * g.c + c) * g.oh * g.ow..][..g.oh * g.ow];
            let kp = &k[c * g.kh * g.kw..][..g.kh * g.kw];
            let ip = &mut gi[(n * g.c + c) * g.h * g.w..][..g.h * g.w];
            for i in 0..g.kh {
                for j in 0..g.kw {
                    let wgt = kp[i * g.kw + j];
                    let y_lo = g.ph.saturating_sub(i);
                    let y_hi = (g.h + g.ph).saturating_sub(i).min(g.oh);
                    let x_lo = g.pw.saturating_sub(j);
                    let x_hi = (g.w + g.pw).saturating_sub(j).min(g.ow);
                    for y in y_lo..y_hi {
                        let sy = y + i - g.ph;
                        for xx in x_lo..x_hi {
                            ip[sy * g.w + xx + j - g.pw] += wgt * gp[y * g.ow + xx];
                        }
                    }
                }
            }
        }
    }
    gi
}

fn dw_grad_kernel<T: WithDType>(g: &DwGeometry, x: &[T], go: &[T]) -> Vec<T> {
    let mut gk = vec![T::zero(); g.c * g.kh * g.kw];
    for n in 0..g.n {
        for c in 0..g.c {
            let xp = &x[(n * g.c + c) * g.h * g.w..][..g.h * g.w];
            let gp = &go[(n * g.c + c) * g.oh * g.ow..][..g.oh * g.ow];
            for i in 0..g.kh {
                for j in 0..g.kw {
                    let y_lo = g.ph.saturating_sub(i);
                    let y_hi = (g.h + g.ph).saturating_sub(i).min(g.oh);
                    let x_lo = g.pw.saturating_sub(j);
                    let x_hi = (g.w + g.pw).saturating_sub(j).min(g.ow);
                    let mut acc = T::zero();
                    for y in y_lo..y_hi {
                        let sy = y + i - g.ph;
                        for xx in x_lo..x_hi {
                            acc += xp[sy * g.w + xx + j - g.pw] * gp[y * g.ow + xx];
                        }
                    }
                    gk[(c * g.kh + i) * g.kw + j] += acc;
                }
            }
        }
    }
    gk
}

impl DepthwiseConv {
    fn run<T: WithDType>(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> Result<(CpuStorage, Shape)> {
        let g = DwGeometry::new(l1, l2, self.ph, self.pw)?;
        let out = dw_forward(&g, contiguous::<T>(s1, l1)?, contiguous::<T>(s2, l2)?);
        Ok((
            T::to_cpu_storage_owned(out),
            Shape::from((g.n, g.c, g.oh, g.ow)),
        ))
    }
}

impl CustomOp2 for DepthwiseConv {
    fn name(&self) -> &'static str {
        "depthwise-conv2d"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> Result<(CpuStorage, Shape)> {
        match (s1, s2) {
            (CpuStorage::F32(_), CpuStorage::F32(_)) => self.run::<f32>(s1, l1, s2, l2),
            (CpuStorage::F64(_), CpuStorage::F64(_)) => self.run::<f64>(s1, l1, s2, l2),
            _ => candle_core::bail!("depthwise-conv2d supports matching f32/f64 operands only"),
        }
    }

    fn bwd(
        &self,
        arg1: &Tensor,
        arg2: &Tensor,
        _res: &Tensor,
        grad_res: &Tensor,
    ) -> Result<(Option<Tensor>, Option<Tensor>)> {
        let grad = grad_res.contiguous()?;
        let gi = grad.apply_op2_no_bwd(
            arg2,
            &DwBackward {
                ph: self.ph,
                pw: self.pw,
                which: DwGrad::Input {
                    h: arg1.dim(2)?,
                    w: arg1.dim(3)?,
                },
            },
        )?;
        let gk = arg1.contiguous()?.apply_op2_no_bwd(
            &grad,
            &DwBackward {
                ph: self.ph,
                pw: self.pw,
                which: DwGrad::Kernel {
                    kh: arg2.dim(2)?,
                    kw: arg2.dim(3)?,
                },
            },
        )?;
        Ok((Some(gi), Some(gk)))
    }
}

#[derive(Clone, Copy, Debug)]
enum DwGrad {
    /// operands: (grad_out, kernel)
    Input { h: usize, w: usize },
    /// operands: (input, grad_out)
    Kernel { kh: usize, kw: usize },
}

#[derive(Clone, Copy, Debug)]
struct DwBackward {
    ph: usize,
    pw: usize,
    which: DwGrad,
}

impl DwBackward {
    fn run<T: WithDType>(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> Result<(CpuStorage, Shape)> {
        match self.which {
            DwGrad::Input { h, w } => {
                let (n, c, oh, ow) = dims4(l1)?;
                let (_, _, kh, kw) = dims4(l2)?;
                let g = DwGeometry {
                    n,
                    c,
                    h,
                    w,
                    kh,
                    kw,
                    oh,
                    ow,
                    ph: self.ph,
                    pw: self.pw,
                };
                let gi = dw_grad_input(&g, contiguous::<T>(s1, l1)?, contiguous::<T>(s2, l2)?);
                Ok((T::to_cpu_storage_owned(gi), Shape::from((n, c, h, w))))
            }
            DwGrad::Kernel { kh, kw } => {
                let (n, c, h, w) = dims4(l1)?;
                let (_, _, oh, ow) = dims4(l2)?;
                let g = DwGeometry {
                    n,
                    c,
                    h,
                    w,
                    kh,
                    kw,
                    oh,
                    ow,
                    ph: self.ph,
                    pw: self.pw,
                };
                let gk = dw_grad_kernel(&g, contiguous::<T>(s1, l1)?, contiguous::<T>(s2, l2)?);
                Ok((T::to_cpu_storage_owned(gk), Shape::from((c, 1, kh, kw))))
            }
        }
    }
}

impl CustomOp2 for DwBackward {
    fn name(&self) -> &'static str {
        "depthwise-conv2d-backward"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> Result<(CpuStorage, Shape)> {
        match (s1, s2) {
            (CpuStorage::F32(_), CpuStorage::F32(_)) => self.run::<f32>(s1, l1, s2, l2),
            (CpuStorage::F64(_), CpuStorage::F64(_)) => self.run::<f64>(s1, l1, s2, l2),
            _ => candle_core::bail!(
                "depthwise-conv2d-backward supports matching f32/f64 operands only"
            ),
        }
    }
}

/// Stride-1 depthwise convolution, zero padding `(ph, pw)`.
pub fn depthwise_conv2d(x: &Tensor, kernel: &Tensor, ph: usize, pw: usize) -> Result<Tensor> {
    x.contiguous()?
        .apply_op2(&kernel.contiguous()?, DepthwiseConv { ph, pw })
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device, Var};

    fn seq(shape: (usize, usize, usize, usize), scale: f64) -> Tensor {
        let n = shape.0 * shape.1 * shape.2 * shape.3;
        let v: Vec<f64> = (0..n)
            .map(|i| ((i * 37 % 23) as f64 - 11.0) * scale)
            .collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    #[test]
    fn box_mean_matches_avg_pool_stride_one() {
        let x = seq((2, 3, 7, 9), 0.1);
        let ours = box_mean_valid(&x, 3, 4).unwrap();
        let reference = x.avg_pool2d_with_stride((3, 4), (1, 1)).unwrap();
        let diff = (ours - reference)
            .unwrap()
            .abs()
            .unwrap()
            .max_all()
            .unwrap();
        assert!(diff.to_scalar::<f64>().unwrap() < 1e-12);
    }

    #[test]
    fn depthwise_matches_grouped_conv() {
        let x = seq((2, 4, 6, 5), 0.05);
        let k = seq((4, 1, 3, 3), 0.2);
        let ours = depthwise_conv2d(&x, &k, 1, 1).unwrap();
        let reference = x.conv2d(&k, 1, 1, 1, 4).unwrap();
        let diff = (ours - reference)
            .unwrap()
            .abs()
            .unwrap()
            .max_all()
            .unwrap();
        assert!(diff.to_scalar::<f64>().unwrap() < 1e-12);
    }

    #[test]
    fn depthwise_gradients_match_grouped_conv() {
        let x = Var::from_tensor(&seq((1, 3, 5, 6), 0.07)).unwrap();
        let k = Var::from_tensor(&seq((3, 1, 1, 3), 0.3)).unwrap();
        let w = seq((1, 3, 5, 6), 0.01);
        // asymmetric padding through explicit zero-pad for the reference path
        let ours = depthwise_conv2d(&x, &k, 0, 1).unwrap();
        let ref_in = x.pad_with_zeros(3, 1, 1).unwrap();
        let reference = ref_in.conv2d(&k, 0, 1, 1, 3).unwrap();
        let g1 = (ours * &w).unwrap().sum_all().unwrap().backward().unwrap();
        let g2 = (reference * &w)
            .unwrap()
            .sum_all()
            .unwrap()
            .backward()
            .unwrap();
        for v in [&x, &k] {
            let d = (g1.get(v).unwrap() - g2.get(v).unwrap())
                .unwrap()
                .abs()
                .unwrap()
                .max_all()
                .unwrap()
                .to_scalar::<f64>()
                .unwrap();
            assert!(d < 1e-12, "gradient mismatch {d}");
        }
    }

    #[test]
    fn box_mean_adjoint_is_transpose() {
        // <A x, y> == <x, A^T y>
        let x = seq((1, 2, 6, 5), 0.1);
        let y = seq((1, 2, 4, 3), 0.3);
        let ax = box_mean_valid(&x, 3, 3).unwrap();
        let aty = y.apply_op1(BoxMeanAdjoint { kh: 3, kw: 3 }).unwrap();
        let lhs = (ax * &y)
            .unwrap()
            .sum_all()
            .unwrap()
            .to_scalar::<f64>()
            .unwrap();
        let rhs = (x * aty)
            .unwrap()
            .sum_all()
            .unwrap()
            .to_scalar::<f64>()
            .unwrap();
        assert!((lhs - rhs).abs() < 1e-10);
        let _ = DType::F64;
    }
}
