use candle_core::{DType, Device, Tensor};
use effdeblur::fixtures::synthetic_scene;
use effdeblur::inference::{feather_coverage, Restorer, TtaSpec};
use effdeblur::models::{ImageModel, Mode, ModelConfig, ModelInstance};

fn tiny_nafnet() -> ModelInstance {
    let mut cfg = ModelConfig::nafnet(8, 1);
    cfg.enc_blocks = vec![1, 1, 1, 1];
    let mut m = ModelInstance::build(&cfg, DType::F32, 1).unwrap();
    m.set_mode(Mode::Eval).unwrap();
    m
}

#[test]
fn odd_sized_input_keeps_its_size() {
    let m = tiny_nafnet();
    let img = synthetic_scene(700, 1000, 3);
    let r = Restorer::new(&m);
    let out = r.restore(&img).unwrap();
    assert_eq!(out.dims(), (700, 1000));
    assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
    assert_eq!(r.passes(), 1);
}

#[test]
fn tiles_agree_with_whole_image_on_a_pointwise_model() {
    struct Gain;
    impl ImageModel for Gain {
        fn forward(&self, x: &Tensor) -> effdeblur::Result<Tensor> {
            Ok(x.affine(0.8, 0.05)?)
        }
    }
    let img = synthetic_scene(70, 100, 9);
    let r = Restorer::new(&Gain);
    let whole = r.restore(&img).unwrap();
    let tiled = r.restore_tiled(&img, 48, 8).unwrap();
    let err = whole
        .data()
        .iter()
        .zip(tiled.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0f32, f32::max);
    assert!(err < 1e-6, "{err}");
    let cov = feather_coverage(70, 100, 48, 8).unwrap();
    assert!(cov.iter().all(|c| (c - 1.0).abs() < 1e-9));
}

#[test]
fn tta_multiplies_forward_passes() {
    let m = tiny_nafnet();
    let img = synthetic_scene(32, 48, 1);
    let one = Restorer::new(&m);
    one.tta_restore(&img, &TtaSpec::identity()).unwrap();
    let three = Restorer::new(&m);
    three.tta_restore(&img, &TtaSpec::flips()).unwrap();
    assert_eq!(three.passes(), 3 * one.passes());
    let _ = Device::Cpu;
}
