//! End-to-end acceptance run. Every criterion is checked in isolation and
//! reported on its own line; the test fails if any of them fails.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::io::{Read, Write};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use effdeblur::arch::{
    BlockConfig, Conv2d, ConvOpts, GdfnLite, LayerNorm2d, Mdta, NafBlock, Sca, ScaMode,
    SpatialAttention, TransformerBlock,
};
use effdeblur::data_io::{build_index, Split};
use effdeblur::efficiency::{
    check_gate, count_macs, EfficiencyReport, FeatureShape, MacsPolicy, Profile, Profiler,
};
use effdeblur::fixtures::{synthetic_pairs, write_split};
use effdeblur::image::Image;
use effdeblur::metrics::{
    align_warp, build_report, lpips, psnr, psnr_masked, rank_by_score, score_pair, ssim,
    ScoreWeights, StubBackend, PSNR_CAP_DB,
};
use effdeblur::models::{save_checkpoint, ImageModel, Mode, ModelConfig, ModelInstance};
use effdeblur::params::ParamStore;
use effdeblur::reparam::{
    apply_fused, convert_model, default_branches, BranchKind, RepConv, RepConvSpec,
};
use effdeblur::train::{
    loss_edge, loss_l1, loss_perceptual, loss_psnr, nafreplocal_desk_plan, run_plan, smoothed,
    TrainOptions,
};
use effdeblur_cli::commands::score_dir;
use effdeblur_cli::package::{FACTSHEET_ENTRY, MANIFEST_ENTRY, MODEL_ENTRY, RESULTS_DIR};
use effdeblur_cli::{
    cmd_eval, cmd_package, cmd_score, EvalArgs, MergeArg, PackageArgs, RunManifest, ScoreArgs,
};

type Check = fn() -> Result<(), String>;
type Probe = Box<dyn Fn(&Tensor) -> Tensor>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !($cond) {
            return Err(format!($($msg)+));
        }
    };
}

fn within(got: f64, want: f64, tol: f64) -> bool {
    ((got - want) / want).abs() <= tol
}

fn gate_report(cfg: &ModelConfig) -> EfficiencyReport {
    let m = ModelInstance::build(cfg, DType::F32, 0).unwrap();
    count_macs(&m, 1200, 1920, MacsPolicy::challenge()).unwrap()
}

fn nafnet_grid() -> Result<(), String> {
    let rows = [
        (16, 14, 2.68, 94.98),
        (16, 28, 4.35, 146.33),
        (24, 14, 5.98, 207.93),
        (32, 14, 10.57, 364.53),
        (32, 28, 17.11, 566.33),
    ];
    for (w, l, p, m) in rows {
        let r = gate_report(&ModelConfig::nafnet(w, l));
        ensure!(
            within(r.params_m(), p, 0.01) && within(r.macs_g(), m, 0.02),
            "C{w}-L{l}: {:.3}M {:.3}G",
            r.params_m(),
            r.macs_g()
        );
    }
    Ok(())
}

fn submissions() -> Result<(), String> {
    let rep = gate_report(&ModelConfig::nafreplocal());
    ensure!(
        within(rep.params_m(), 4.76, 0.02) && within(rep.macs_g(), 198.25, 0.05),
        "{}",
        rep.table_row()
    );
    let rl = gate_report(&ModelConfig::restormerl());
    ensure!(
        within(rl.params_m(), 1.41, 0.02) && within(rl.macs_g(), 199.39, 0.05),
        "{}",
        rl.table_row()
    );
    let sa = gate_report(&ModelConfig::sa_nafnet());
    ensure!(
        sa.params_m() <= 4.51 && sa.macs_g() <= 172.2,
        "{}",
        sa.table_row()
    );
    let base = gate_report(&ModelConfig::nafnet(16, 28));
    for r in [&rep, &rl, &sa, &base] {
        ensure!(
            check_gate(r).unwrap().pass,
            "gate rejects {}",
            r.table_row()
        );
    }
    for (w, l) in [(24, 14), (32, 14), (32, 28)] {
        let r = gate_report(&ModelConfig::nafnet(w, l));
        ensure!(!check_gate(&r).unwrap().pass, "gate accepts C{w}-L{l}");
    }
    Ok(())
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

fn randomize_var(v: &Var, rng: &mut ChaCha8Rng, lo: f64, hi: f64) {
    let t = random(v.dims(), rng, lo, hi).to_dtype(v.dtype()).unwrap();
    v.set(&t).unwrap();
}

fn max_abs(a: &Tensor, b: &Tensor) -> f64 {
    (a - b)
        .unwrap()
        .abs()
        .unwrap()
        .flatten_all()
        .unwrap()
        .to_dtype(DType::F64)
        .unwrap()
        .max(0)
        .unwrap()
        .to_scalar::<f64>()
        .unwrap()
}

fn reparam() -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let kinds = [
        BranchKind::Kxk,
        BranchKind::OneByOne,
        BranchKind::OneByK,
        BranchKind::KByOne,
        BranchKind::Identity,
    ];
    for i in 0..200 {
        let in_ch = rng.random_range(1..=8);
        let out_ch = if rng.random_bool(0.4) {
            in_ch
        } else {
            rng.random_range(1..=8)
        };
        let mut branches: Vec<BranchKind> = kinds
            .iter()
            .copied()
            .filter(|b| rng.random_bool(0.6) && (*b != BranchKind::Identity || in_ch == out_ch))
            .collect();
        if branches.is_empty() {
            branches.push(BranchKind::Kxk);
        }
        let spec = RepConvSpec {
            in_ch,
            out_ch,
            main_kernel: [1, 3, 5][rng.random_range(0..3)],
            branches,
            bn_per_branch: rng.random_bool(0.7),
        };
        let mut store = ParamStore::new(DType::F64, i);
        let rep = RepConv::new(&mut store, "rep", spec.clone()).unwrap();
        for v in store.params().values() {
            randomize_var(v, &mut rng, -0.5, 0.5);
        }
        for (name, v) in store.buffers() {
            let (lo, hi) = if name.ends_with("running_var") {
                (0.2, 2.0)
            } else {
                (-0.5, 0.5)
            };
            randomize_var(v, &mut rng, lo, hi);
        }
        let (h, w) = (rng.random_range(1..=12), rng.random_range(1..=12));
        let x = random(&[2, in_ch, h, w], &mut rng, -1.0, 1.0);
        let err = max_abs(
            &rep.forward_t(&x, false).unwrap(),
            &apply_fused(&x, &rep.fuse(true).unwrap()).unwrap(),
        );
        ensure!(err < 1e-5, "{spec:?}: {err}");
    }

    let cfg = ModelConfig {
        use_reparam: true,
        ..ModelConfig::nafreplocal()
    };
    let mut model = ModelInstance::build(&cfg, DType::F32, 3).unwrap();
    for (name, v) in model.buffers() {
        let (lo, hi) = if name.ends_with("running_var") {
            (0.5, 1.5)
        } else {
            (-0.1, 0.1)
        };
        randomize_var(v, &mut rng, lo, hi);
    }
    model.set_mode(Mode::Eval).unwrap();
    let fused = convert_model(&model).unwrap();
    ensure!(
        fused.rep_convs().is_empty(),
        "branches left after conversion"
    );
    let x = Tensor::rand(0f32, 1f32, (1, 3, 48, 64), &Device::Cpu).unwrap();
    let err = max_abs(&model.forward(&x).unwrap(), &fused.forward(&x).unwrap());
    ensure!(err < 1e-4, "full model: {err}");
    Ok(())
}

fn sca_limit() -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for i in 0..100 {
        let c = rng.random_range(1..=8);
        let (h, w) = (rng.random_range(1..=20), rng.random_range(1..=20));
        let window = h.max(w) + rng.random_range(0..4);
        let mut sa = ParamStore::new(DType::F32, i);
        let mut sb = ParamStore::new(DType::F32, i);
        let local = Sca::new(&mut sa, "sca", c, ScaMode::Local { window }).unwrap();
        let global = Sca::new(&mut sb, "sca", c, ScaMode::Global).unwrap();
        let x = Tensor::rand(-1f32, 1f32, (1, c, h, w), &Device::Cpu).unwrap();
        let err = max_abs(&local.forward(&x).unwrap(), &global.forward(&x).unwrap());
        ensure!(err < 1e-6, "{c}x{h}x{w} window {window}: {err}");
    }
    Ok(())
}

fn texture(h: usize, w: usize, phase: f32) -> Image {
    Image::from_fn(h, w, |y, x, c| {
        let (yf, xf) = (y as f32, x as f32);
        0.5 + 0.2 * (xf * 0.21 + c as f32 + phase).sin() * (yf * 0.17).cos()
            + 0.1 * ((xf + 2.0 * yf) * 0.08).sin()
    })
}

fn shifted(gt: &Image, tx: usize, ty: usize) -> Image {
    let (h, w) = gt.dims();
    Image::from_fn(h, w, |y, x, c| {
        gt.get(y.saturating_sub(ty), x.saturating_sub(tx), c)
    })
}

fn metric_oracles() -> Result<(), String> {
    let zero = Image::filled(4, 4, 0.0);
    let half = Image::filled(4, 4, 0.5);
    let db = psnr(&zero, &half, 1.0).unwrap().db;
    ensure!((db - 6.0206).abs() < 1e-3, "psnr {db}");
    let same = psnr(&half, &half, 1.0).unwrap();
    ensure!(
        same.capped && same.db == PSNR_CAP_DB,
        "identical images not capped"
    );
    let top = Image::from_fn(2, 2, |y, _, _| if y == 0 { 0.5 } else { 0.0 });
    let masked = psnr_masked(
        &Image::filled(2, 2, 0.0),
        &top,
        Some(&[true, true, false, false]),
        1.0,
    )
    .unwrap()
    .db;
    ensure!((masked - 6.0206).abs() < 1e-3, "masked psnr {masked}");

    let a = texture(40, 40, 0.0);
    let s = ssim(&a, &a).unwrap();
    ensure!((s - 1.0).abs() < 1e-9, "ssim(x, x) = {s}");

    let (p, q) = (texture(6, 5, 0.0), texture(6, 5, 1.3));
    let mut want = 0f64;
    for y in 0..6 {
        for x in 0..5 {
            let u: Vec<f64> = (0..3).map(|c| p.get(y, x, c) as f64).collect();
            let v: Vec<f64> = (0..3).map(|c| q.get(y, x, c) as f64).collect();
            let nu = u.iter().map(|t| t * t).sum::<f64>().sqrt() + 1e-10;
            let nv = v.iter().map(|t| t * t).sum::<f64>().sqrt() + 1e-10;
            want += (0..3).map(|c| (u[c] / nu - v[c] / nv).powi(2)).sum::<f64>();
        }
    }
    want /= 30.0;
    let got = lpips(&p, &q, &StubBackend).unwrap();
    ensure!((got - want).abs() < 1e-9, "lpips {got} vs {want}");

    let gt = texture(64, 80, 0.4);
    let pred = shifted(&gt, 3, 2);
    let (dx, dy) = align_warp(&pred, &gt).unwrap().translation();
    ensure!(
        (dx - 3.0).abs() < 0.5 && (dy - 2.0).abs() < 0.5,
        "warp found ({dx}, {dy})"
    );
    let mut last = f64::INFINITY;
    for s in 0..=3 {
        let p = shifted(&gt, s, s);
        let naive = psnr(&p, &gt, 1.0).unwrap().db;
        let aligned = score_pair("p", &p, &gt, None).unwrap().psnr;
        ensure!(naive <= last, "naive psnr not monotone at shift {s}");
        ensure!(
            aligned >= naive - 1e-9,
            "alignment lowered psnr at shift {s}"
        );
        last = naive;
    }
    Ok(())
}

/// Constant chroma offset with zero luminance change and MSE `10^(-db/10)`.
fn at_psnr(gt: &Image, db: f64, sign: f64) -> Image {
    let mse = 10f64.powf(-db / 10.0);
    let dir = [0.587f64, -0.299, 0.0];
    let scale = sign * (3.0 * mse / (dir[0] * dir[0] + dir[1] * dir[1])).sqrt();
    let (h, w) = gt.dims();
    Image::from_fn(h, w, |y, x, c| gt.get(y, x, c) + (dir[c] * scale) as f32)
}

fn ranking() -> Result<(), String> {
    let targets = [
        ("NAFRepLocal", 31.130),
        ("RestormerL", 31.10),
        ("IPIU", 30.492),
        ("SA-NAFNet", 30.189),
    ];
    let gts: Vec<Image> = (0..3).map(|i| texture(40, 56, i as f32 * 0.7)).collect();
    let weights = ScoreWeights::new(1.0, 0.0, 0.0).unwrap();
    let reports: Vec<_> = targets
        .iter()
        .map(|(_, db)| {
            let rows = gts
                .iter()
                .enumerate()
                .map(|(i, gt)| {
                    let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
                    let pred = at_psnr(gt, db + [-0.1, 0.0, 0.1][i], sign);
                    score_pair(&format!("img{i}"), &pred, gt, None).unwrap()
                })
                .collect();
            build_report(rows, weights, None)
        })
        .collect();
    for ((name, db), r) in targets.iter().zip(&reports) {
        ensure!(
            (r.aggregate.psnr - db).abs() < 0.005,
            "{name}: mean {}",
            r.aggregate.psnr
        );
    }
    let named: Vec<(&str, &_)> = targets
        .iter()
        .map(|(n, _)| *n)
        .zip(reports.iter())
        .collect();
    let order = rank_by_score(&named);
    ensure!(
        order == ["NAFRepLocal", "RestormerL", "IPIU", "SA-NAFNet"],
        "order {order:?}"
    );
    Ok(())
}

fn loop_macs(
    cin: usize,
    cout: usize,
    groups: usize,
    k: (usize, usize),
    hw: (usize, usize),
    stride: usize,
) -> (u64, usize, usize) {
    let (ph, pw) = if stride == 1 {
        (k.0 / 2, k.1 / 2)
    } else {
        (0, 0)
    };
    let oh = (hw.0 + 2 * ph - k.0) / stride + 1;
    let ow = (hw.1 + 2 * pw - k.1) / stride + 1;
    let mut n = 0u64;
    for _ in 0..cout * oh * ow {
        for _ in 0..(cin / groups) * k.0 * k.1 {
            n += 1;
        }
    }
    (n, oh, ow)
}

fn analytic_macs() -> Result<(), String> {
    let mut store = ParamStore::new(DType::F32, 0);
    let mut checked = 0usize;
    for cin in 1..=4 {
        for cout in 1..=4 {
            for groups in (1..=4).filter(|g| cin % g == 0 && cout % g == 0) {
                for (kh, kw) in (1..=3).flat_map(|a| (1..=3).map(move |b| (a, b))) {
                    for stride in [1, 2] {
                        let name = format!("c{cin}{cout}{groups}{kh}{kw}{stride}");
                        let opts = ConvOpts {
                            stride,
                            groups,
                            bias: false,
                        };
                        let conv =
                            Conv2d::new(&mut store, &name, cin, cout, (kh, kw), opts).unwrap();
                        let (h0, w0) = if stride == 1 { (1, 1) } else { (kh, kw) };
                        for h in h0..=8 {
                            for w in w0..=8 {
                                let (want, oh, ow) =
                                    loop_macs(cin, cout, groups, (kh, kw), (h, w), stride);
                                let mut p = Profiler::new(MacsPolicy::challenge());
                                let out =
                                    conv.profile(FeatureShape::new(cin, h, w), &mut p).unwrap();
                                ensure!(
                                    p.macs_total() == want,
                                    "{name} at {h}x{w}: {} vs {want}",
                                    p.macs_total()
                                );
                                ensure!((out.h, out.w) == (oh, ow), "{name} at {h}x{w}: shape");
                                checked += 1;
                            }
                        }
                    }
                }
            }
        }
    }
    ensure!(checked > 5000, "only {checked} shapes");
    Ok(())
}

/// Backprop against central differences on a few coordinates of the input
/// and of every parameter.
fn grad_check(
    name: &str,
    f: &dyn Fn(&Tensor) -> Tensor,
    x: &Var,
    params: &[&Var],
    rng: &mut ChaCha8Rng,
) -> Result<(), String> {
    const H: f64 = 1e-5;
    let grads = f(x.as_tensor()).backward().unwrap();
    for var in std::iter::once(x).chain(params.iter().copied()) {
        let analytic: Vec<f64> = match grads.get(var.as_tensor()) {
            Some(g) => g.flatten_all().unwrap().to_vec1().unwrap(),
            None => vec![0.0; var.elem_count()],
        };
        let base: Vec<f64> = var.as_tensor().flatten_all().unwrap().to_vec1().unwrap();
        let put = |v: Vec<f64>| {
            var.set(&Tensor::from_vec(v, var.shape(), &Device::Cpu).unwrap())
                .unwrap()
        };
        for _ in 0..3 {
            let i = rng.random_range(0..base.len());
            let eval = |d: f64| {
                let mut v = base.clone();
                v[i] += d;
                put(v);
                f(x.as_tensor()).to_scalar::<f64>().unwrap()
            };
            let fd = (eval(H) - eval(-H)) / (2.0 * H);
            put(base.clone());
            let a = analytic[i];
            ensure!(
                (a - fd).abs() <= 1e-3 * a.abs().max(fd.abs()) + 1e-8,
                "{name}[{i}]: {a} vs {fd}"
            );
        }
    }
    Ok(())
}

fn block_grad(
    name: &str,
    ch: usize,
    build: &dyn Fn(&mut ParamStore) -> Probe,
) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(name.len() as u64);
    let mut store = ParamStore::new(DType::F64, 1);
    let f = build(&mut store);
    for v in store.params().values() {
        randomize_var(v, &mut rng, -0.6, 0.6);
    }
    let x = Var::from_tensor(&random(&[1, ch, 8, 8], &mut rng, -1.0, 1.0)).unwrap();
    let r = random(&[1, ch, 8, 8], &mut rng, -1.0, 1.0);
    let params: Vec<&Var> = store.params().values().collect();
    grad_check(
        name,
        &|t| (f(t) * &r).unwrap().sum_all().unwrap(),
        &x,
        &params,
        &mut rng,
    )
}

fn identity_and_gradients() -> Result<(), String> {
    for cfg in [
        BlockConfig::new(4),
        BlockConfig::new(4).with_sca(ScaMode::Local { window: 3 }),
        BlockConfig::new(6).with_spatial_attention(true),
    ] {
        let mut store = ParamStore::new(DType::F32, 2);
        let b = NafBlock::new(&mut store, "b", cfg).unwrap();
        let x = Tensor::rand(-1f32, 1f32, (1, cfg.channels, 8, 8), &Device::Cpu).unwrap();
        let y = b.forward(&x).unwrap();
        ensure!(
            max_abs(&x, &y) == 0.0,
            "{cfg:?} is not the identity at init"
        );
    }

    type Build = Box<dyn Fn(&mut ParamStore) -> Probe>;
    let cases: Vec<(&str, usize, Build)> = vec![
        (
            "nafblock",
            4,
            Box::new(|s| {
                let m = NafBlock::new(s, "m", BlockConfig::new(4)).unwrap();
                Box::new(move |x| m.forward(x).unwrap())
            }),
        ),
        (
            "nafblock-local",
            4,
            Box::new(|s| {
                let m = NafBlock::new(
                    s,
                    "m",
                    BlockConfig::new(4).with_sca(ScaMode::Local { window: 3 }),
                )
                .unwrap();
                Box::new(move |x| m.forward(x).unwrap())
            }),
        ),
        (
            "nafblock-sa",
            4,
            Box::new(|s| {
                let m = NafBlock::new(s, "m", BlockConfig::new(4).with_spatial_attention(true))
                    .unwrap();
                Box::new(move |x| m.forward(x).unwrap())
            }),
        ),
        (
            "spatial-attention",
            3,
            Box::new(|s| {
                let m = SpatialAttention::new(s, "m", 7).unwrap();
                Box::new(move |x| m.forward(x).unwrap())
            }),
        ),
        (
            "layernorm",
            4,
            Box::new(|s| {
                let m = LayerNorm2d::new(s, "m", 4).unwrap();
                Box::new(move |x| m.forward(x).unwrap())
            }),
        ),
        (
            "mdta",
            4,
            Box::new(|s| {
                let m = Mdta::new(s, "m", 4, 2).unwrap();
                Box::new(move |x| m.forward(x).unwrap())
            }),
        ),
        (
            "gdfn",
            4,
            Box::new(|s| {
                let m = GdfnLite::new(s, "m", 4, 2.2).unwrap();
                Box::new(move |x| m.forward(x).unwrap())
            }),
        ),
        (
            "transformer",
            4,
            Box::new(|s| {
                let m = TransformerBlock::new(s, "m", 4, 2, 2.2).unwrap();
                Box::new(move |x| m.forward(x).unwrap())
            }),
        ),
        (
            "repconv",
            3,
            Box::new(|s| {
                let spec = RepConvSpec {
                    in_ch: 3,
                    out_ch: 3,
                    main_kernel: 3,
                    branches: default_branches(),
                    bn_per_branch: true,
                };
                let m = RepConv::new(s, "m", spec).unwrap();
                Box::new(move |x| m.forward_t(x, true).unwrap())
            }),
        ),
    ];
    for (name, ch, build) in &cases {
        block_grad(name, *ch, build.as_ref())?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let gt = random(&[1, 3, 8, 8], &mut rng, 0.0, 1.0);
    let pred = Var::from_tensor(&random(&[1, 3, 8, 8], &mut rng, 0.0, 1.0)).unwrap();
    grad_check("l1", &|p| loss_l1(p, &gt).unwrap(), &pred, &[], &mut rng)?;
    grad_check(
        "psnr",
        &|p| loss_psnr(p, &gt).unwrap(),
        &pred,
        &[],
        &mut rng,
    )?;
    grad_check(
        "edge",
        &|p| loss_edge(p, &gt).unwrap(),
        &pred,
        &[],
        &mut rng,
    )?;
    grad_check(
        "perceptual",
        &|p| loss_perceptual(p, &gt, Some(&StubBackend)).unwrap(),
        &pred,
        &[],
        &mut rng,
    )
}

fn smoke_training() -> Result<(), String> {
    let data = synthetic_pairs(8, 64, 64, 1.5, 3).unwrap();
    let plan = nafreplocal_desk_plan(50);
    let opts = TrainOptions {
        seed: 11,
        ..TrainOptions::default()
    };
    let a = run_plan(None, &plan, &data, &data[..2], &opts).unwrap();
    ensure!(
        a.completed && a.log.len() == 200,
        "run stopped after {} steps",
        a.log.len()
    );
    let cfg = a.model.config();
    ensure!(cfg.first_conv_kernel == 3, "k5 stem was not swapped");
    ensure!(cfg.use_middle_scag, "SCA-G was not inserted");
    ensure!(
        cfg.use_reparam && !a.model.rep_convs().is_empty(),
        "reparam not enabled"
    );
    let l1: Vec<f64> = a.log.iter().map(|r| r.losses["l1"]).collect();
    let s = smoothed(&l1, 20);
    ensure!(
        s.last().unwrap() < &s[19],
        "smoothed l1 {} -> {}",
        s[19],
        s.last().unwrap()
    );
    let b = run_plan(None, &plan, &data, &data[..2], &opts).unwrap();
    let l1b: Vec<f64> = b.log.iter().map(|r| r.losses["l1"]).collect();
    ensure!(
        l1.iter()
            .map(|v| v.to_bits())
            .eq(l1b.iter().map(|v| v.to_bits())),
        "rerun losses differ"
    );
    for ((k, va), (_, vb)) in a.model.parameters().iter().zip(b.model.parameters()) {
        ensure!(
            max_abs(va.as_tensor(), vb.as_tensor()) == 0.0,
            "rerun differs at {k}"
        );
    }
    Ok(())
}

/// Tiny NAFNet whose output conv is zeroed, so the global residual makes it
/// the identity map.
fn identity_checkpoint(path: &Path) {
    let mut cfg = ModelConfig::nafnet(8, 1);
    cfg.enc_blocks = vec![1, 1];
    cfg.dec_blocks = vec![1, 1];
    let model = ModelInstance::build(&cfg, DType::F32, 4).unwrap();
    for (name, v) in model.parameters() {
        if name.starts_with("ending.") {
            v.set(&v.as_tensor().zeros_like().unwrap()).unwrap();
        }
    }
    save_checkpoint(&model, None, path).unwrap();
}

fn untar(bytes: &[u8], dest: &Path) -> Vec<String> {
    let mut names = Vec::new();
    let mut archive = tar::Archive::new(bytes);
    for entry in archive.entries().unwrap() {
        let mut e = entry.unwrap();
        let name = e.path().unwrap().to_string_lossy().into_owned();
        let mut data = Vec::new();
        e.read_to_end(&mut data).unwrap();
        let out = dest.join(&name);
        std::fs::create_dir_all(out.parent().unwrap()).unwrap();
        std::fs::write(out, data).unwrap();
        names.push(name);
    }
    names
}

fn round_trip() -> Result<(), String> {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("data");
    let pairs: Vec<_> = synthetic_pairs(3, 40, 56, 1.0, 21)
        .unwrap()
        .into_iter()
        .map(|p| {
            effdeblur::data_io::ImagePair::new(
                p.pair_id().to_string(),
                p.scene_id().to_string(),
                p.sharp().clone(),
                p.sharp().clone(),
            )
            .unwrap()
        })
        .collect();
    write_split(&root, Split::Val, &pairs).unwrap();
    let ckpt = tmp.path().join("identity.ckpt");
    identity_checkpoint(&ckpt);

    let preds = tmp.path().join("preds");
    let eval_args = EvalArgs {
        checkpoint: ckpt.clone(),
        data_root: Some(root.clone()),
        split: "val".into(),
        out_dir: preds.clone(),
        tta: "identity".into(),
        tta_merge: MergeArg::Mean,
        tile: None,
        overlap: 32,
        raw: false,
        max_pixels: 8_000_000,
    };
    let ev = cmd_eval(&eval_args, 0).map_err(|e| format!("eval: {e:#}"))?;
    ensure!(
        ev.summary.written.len() == 3,
        "eval wrote {}",
        ev.summary.written.len()
    );
    let ev2 = cmd_eval(&eval_args, 0).map_err(|e| format!("eval: {e:#}"))?;
    ensure!(
        ev.manifest.without_timestamps() == ev2.manifest.without_timestamps(),
        "eval manifests differ beyond timestamps"
    );

    let score_args = ScoreArgs {
        pred_dir: preds.clone(),
        gt_root: Some(root.clone()),
        split: "val".into(),
        weights: "1,0,0".into(),
        backend: None,
        out_dir: Some(tmp.path().join("scores")),
        name: "identity".into(),
    };
    let scored = cmd_score(&score_args, 0).map_err(|e| format!("score: {e:#}"))?;
    ensure!(
        scored.report.missing.is_empty(),
        "missing {:?}",
        scored.report.missing
    );
    for row in &scored.report.per_image {
        ensure!(
            row.psnr_capped && row.psnr == PSNR_CAP_DB,
            "{}: psnr {}",
            row.pair_id,
            row.psnr
        );
        ensure!(
            (row.ssim - 1.0).abs() < 1e-9,
            "{}: ssim {}",
            row.pair_id,
            row.ssim
        );
    }

    let archive = tmp.path().join("submission.tar");
    let fields = vec![
        "team=Blur Busters".to_string(),
        "method=identity = baseline; 100% exact".to_string(),
    ];
    let pkg = cmd_package(
        &PackageArgs {
            checkpoint: ckpt.clone(),
            pred_dir: preds.clone(),
            fields,
            out: archive.clone(),
            force: false,
            raw: false,
        },
        0,
    )
    .map_err(|e| format!("package: {e:#}"))?;
    ensure!(pkg.verdict.pass, "tiny model fails the gate");

    let unpacked = tmp.path().join("unpacked");
    let names = untar(&std::fs::read(&archive).unwrap(), &unpacked);
    for want in [MODEL_ENTRY, FACTSHEET_ENTRY, MANIFEST_ENTRY] {
        ensure!(names.iter().any(|n| n == want), "archive lacks {want}");
    }
    let index = build_index(&root, Split::Val).unwrap();
    let rescored = score_dir(
        &unpacked.join(RESULTS_DIR),
        &index,
        ScoreWeights::default(),
        None,
    )
    .map_err(|e| format!("rescore: {e:#}"))?;
    ensure!(rescored.json == scored.json, "rescored JSON differs");
    ensure!(rescored.csv == scored.csv, "rescored CSV differs");
    let factsheet = std::fs::read_to_string(unpacked.join(FACTSHEET_ENTRY)).unwrap();
    ensure!(
        factsheet.contains("- team: Blur Busters\n"),
        "team field altered"
    );
    ensure!(
        factsheet.contains("- method: identity = baseline; 100% exact\n"),
        "method field altered"
    );
    let inner = RunManifest::read(&unpacked.join(MANIFEST_ENTRY)).unwrap();
    ensure!(
        inner.without_timestamps() == pkg.manifest.without_timestamps(),
        "archive manifest differs"
    );

    // An oversized model is refused unless forced.
    let big = tmp.path().join("big.ckpt");
    let model = ModelInstance::build(&ModelConfig::nafnet(32, 28), DType::F32, 0).unwrap();
    save_checkpoint(&model, None, &big).unwrap();
    let refused = cmd_package(
        &PackageArgs {
            checkpoint: big,
            pred_dir: preds,
            fields: vec![],
            out: tmp.path().join("big.tar"),
            force: false,
            raw: false,
        },
        0,
    );
    ensure!(refused.is_err(), "gate-failing model was packaged");
    ensure!(
        effdeblur_cli::exit_code(&refused.err().unwrap()) == 1,
        "wrong exit code for refusal"
    );
    Ok(())
}

#[test]
fn acceptance_criteria() {
    let criteria: [(&str, Check); 10] = [
        ("efficiency fixtures, NAFNet grid", nafnet_grid),
        ("efficiency fixtures, submissions and gate", submissions),
        ("reparameterization equivalence", reparam),
        ("local channel attention limit", sca_limit),
        ("metric oracles", metric_oracles),
        ("ranking reproduction", ranking),
        ("analytic vs loop-count MACs", analytic_macs),
        (
            "identity at init and gradient checks",
            identity_and_gradients,
        ),
        ("smoke training", smoke_training),
        ("pipeline round trip", round_trip),
    ];
    let mut failed = Vec::new();
    for (i, (name, check)) in criteria.iter().enumerate() {
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let line = match result {
            Ok(()) => format!("criterion {}: {name}: PASS", i + 1),
            Err(e) => {
                failed.push(i + 1);
                format!("criterion {}: {name}: FAIL ({e})", i + 1)
            }
        };
        // Straight to the handle so the line shows even when output is captured.
        let _ = writeln!(std::io::stderr(), "{line}");
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}

fn run_bin(args: &[&str]) -> i32 {
    Command::new(env!("CARGO_BIN_EXE_effdeblur"))
        .args(args)
        .env_remove("EFFDEBLUR_DEVICE")
        .output()
        .unwrap()
        .status
        .code()
        .unwrap()
}

#[test]
fn binary_exit_codes() {
    assert_eq!(run_bin(&["profile", "nafnet-c16-l28", "--gate"]), 0);
    assert_eq!(run_bin(&["profile", "nafnet-c32-l28", "--gate"]), 1);
    assert_eq!(run_bin(&["profile", "no-such-model"]), 2);
    assert_eq!(run_bin(&["frobnicate"]), 2);
    let code = Command::new(env!("CARGO_BIN_EXE_effdeblur"))
        .args(["profile", "nafnet"])
        .env("EFFDEBLUR_DEVICE", "cuda")
        .status()
        .unwrap()
        .code();
    assert_eq!(code, Some(2));
}

#[test]
fn shipped_configs_match_embedded_defaults() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for (name, text) in effdeblur_cli::defaults::default_files().unwrap() {
        let on_disk = std::fs::read_to_string(dir.join(&name))
            .unwrap_or_else(|e| panic!("configs/{name}: {e}"));
        assert_eq!(
            on_disk, text,
            "configs/{name} is stale; regenerate with --dump-defaults"
        );
    }
}
