use effdeblur::data_io::{build_index, write_png, Split};
use effdeblur::fixtures::{synthetic_pairs, write_split};
use effdeblur::image::Image;
use effdeblur::metrics::{
    align_warp, build_report, lpips, psnr, psnr_masked, rank_by_score, score_pair,
    score_submission, ssim, ScoreWeights, StubBackend, PSNR_CAP_DB,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn texture(h: usize, w: usize, phase: f32) -> Image {
    Image::from_fn(h, w, |y, x, c| {
        let (yf, xf) = (y as f32, x as f32);
        0.5 + 0.2 * (xf * 0.21 + c as f32 + phase).sin() * (yf * 0.17).cos()
            + 0.1 * ((xf + 2.0 * yf) * 0.08).sin()
    })
}

#[test]
fn psnr_hand_cases() {
    let a = Image::filled(4, 4, 0.0);
    let b = Image::filled(4, 4, 0.5);
    assert!((psnr(&a, &b, 1.0).unwrap().db - 6.020599913279624).abs() < 1e-4);
    let c = Image::filled(4, 4, 0.1);
    assert!((psnr(&a, &c, 1.0).unwrap().db - 20.0).abs() < 1e-4);
    let same = psnr(&b, &b, 1.0).unwrap();
    assert!(same.capped && same.db == PSNR_CAP_DB);
    // Only the masked-in half differs.
    let z = Image::filled(2, 2, 0.0);
    let d = Image::from_fn(2, 2, |y, _, _| if y == 0 { 0.5 } else { 0.0 });
    let mask = [true, true, false, false];
    assert!((psnr_masked(&z, &d, Some(&mask), 1.0).unwrap().db - 6.0206).abs() < 1e-3);
}

#[test]
fn ssim_of_identical_images_is_one_and_drops_with_noise() {
    let a = texture(40, 40, 0.0);
    assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-9);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let noisy = Image::from_fn(40, 40, |y, x, c| {
        a.get(y, x, c) + rng.random_range(-0.1..0.1)
    });
    let s = ssim(&noisy, &a).unwrap();
    assert!(s < 0.99 && s > 0.0, "{s}");
    assert!((ssim(&noisy, &a).unwrap() - ssim(&a, &noisy).unwrap()).abs() < 1e-12);
}

#[test]
fn stub_lpips_matches_hand_formula() {
    let a = texture(6, 5, 0.0);
    let b = texture(6, 5, 1.3);
    let mut want = 0f64;
    for y in 0..6 {
        for x in 0..5 {
            let pa: Vec<f64> = (0..3).map(|c| a.get(y, x, c) as f64).collect();
            let pb: Vec<f64> = (0..3).map(|c| b.get(y, x, c) as f64).collect();
            let na = pa.iter().map(|v| v * v).sum::<f64>().sqrt() + 1e-10;
            let nb = pb.iter().map(|v| v * v).sum::<f64>().sqrt() + 1e-10;
            want += (0..3)
                .map(|c| (pa[c] / na - pb[c] / nb).powi(2))
                .sum::<f64>();
        }
    }
    want /= 30.0;
    let got = lpips(&a, &b, &StubBackend).unwrap();
    assert!((got - want).abs() < 1e-9, "{got} vs {want}");
    assert_eq!(lpips(&a, &a, &StubBackend).unwrap(), 0.0);
}

/// `pred(x) = gt(x - t)` with edge replication.
fn shifted(gt: &Image, tx: usize, ty: usize) -> Image {
    let (h, w) = gt.dims();
    Image::from_fn(h, w, |y, x, c| {
        gt.get(y.saturating_sub(ty), x.saturating_sub(tx), c)
    })
}

#[test]
fn warp_recovers_shift_and_improves_psnr_monotonically() {
    let gt = texture(64, 80, 0.4);
    let pred = shifted(&gt, 3, 2);
    let r = align_warp(&pred, &gt).unwrap();
    assert!(r.success);
    let (dx, dy) = r.translation();
    assert!(
        (dx - 3.0).abs() < 0.5 && (dy - 2.0).abs() < 0.5,
        "({dx}, {dy})"
    );
    let naive = psnr(&pred, &gt, 1.0).unwrap().db;
    let aligned = score_pair("p", &pred, &gt, None).unwrap();
    assert!(aligned.psnr > naive + 3.0, "{} vs {naive}", aligned.psnr);

    // A growing misalignment keeps lowering the naive PSNR; alignment
    // recovers each case to at least its naive value.
    let mut last = f64::INFINITY;
    for s in 0..=3 {
        let p = shifted(&gt, s, s);
        let naive = psnr(&p, &gt, 1.0).unwrap().db;
        assert!(naive <= last);
        last = naive;
        assert!(score_pair("p", &p, &gt, None).unwrap().psnr >= naive - 1e-9);
    }
}

/// Shifts chroma by a constant that leaves luminance untouched, so the
/// aligner sees identical images while the MSE is exactly `10^(-db/10)`.
/// Pixel noise would not do: any sub-pixel warp low-passes it and inflates
/// the aligned PSNR.
fn at_psnr(gt: &Image, db: f64, sign: bool) -> Image {
    let mse = 10f64.powf(-db / 10.0);
    let dir = [0.587f64, -0.299, 0.0];
    let scale =
        (3.0 * mse / (dir[0] * dir[0] + dir[1] * dir[1])).sqrt() * if sign { 1.0 } else { -1.0 };
    let (h, w) = gt.dims();
    Image::from_fn(h, w, |y, x, c| gt.get(y, x, c) + (dir[c] * scale) as f32)
}

#[test]
fn reference_ranking_is_reproduced() {
    let targets = [
        ("NAFRepLocal", 31.130),
        ("RestormerL", 31.10),
        ("IPIU", 30.492),
        ("SA-NAFNet", 30.189),
    ];
    let gts: Vec<Image> = (0..3).map(|i| texture(48, 64, i as f32)).collect();
    let reports: Vec<_> = targets
        .iter()
        .enumerate()
        .map(|(k, (_, db))| {
            // Per-image PSNRs spread around the target with zero mean offset.
            let rows = gts
                .iter()
                .enumerate()
                .map(|(i, gt)| {
                    let offset = [-0.2, 0.0, 0.2][i];
                    score_pair(
                        &format!("img{i}"),
                        &at_psnr(gt, db + offset, (k + i) % 2 == 0),
                        gt,
                        None,
                    )
                    .unwrap()
                })
                .collect();
            build_report(rows, ScoreWeights::default(), None)
        })
        .collect();
    for ((name, db), r) in targets.iter().zip(&reports) {
        assert!(
            (r.aggregate.psnr - db).abs() < 0.005,
            "{name}: {}",
            r.aggregate.psnr
        );
        assert_eq!(r.score, r.aggregate.psnr);
    }
    let named: Vec<(&str, &_)> = targets
        .iter()
        .map(|(n, _)| *n)
        .zip(reports.iter())
        .collect();
    assert_eq!(
        rank_by_score(&named),
        vec!["NAFRepLocal", "RestormerL", "IPIU", "SA-NAFNet"]
    );
}

#[test]
fn scoring_a_directory_is_deterministic_and_flags_missing() {
    let root = tempfile::tempdir().unwrap();
    let pairs = synthetic_pairs(3, 32, 40, 1.0, 4).unwrap();
    write_split(root.path(), Split::Val, &pairs).unwrap();
    let index = build_index(root.path(), Split::Val).unwrap();
    let pred = tempfile::tempdir().unwrap();
    for p in &pairs[..2] {
        write_png(p.sharp(), &pred.path().join(format!("{}.png", p.pair_id()))).unwrap();
    }
    let a = score_submission(pred.path(), &index, ScoreWeights::default(), None).unwrap();
    let b = score_submission(pred.path(), &index, ScoreWeights::default(), None).unwrap();
    assert_eq!(a.to_json(), b.to_json());
    assert_eq!(a.to_csv().unwrap(), b.to_csv().unwrap());
    assert_eq!(a.missing, vec![pairs[2].pair_id().to_string()]);
    assert!(a.per_image[0].psnr_capped && (a.per_image[0].ssim - 1.0).abs() < 1e-9);
    let empty = tempfile::tempdir().unwrap();
    assert!(score_submission(empty.path(), &index, ScoreWeights::default(), None).is_err());
}
