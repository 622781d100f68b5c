use effdeblur::fixtures::synthetic_pairs;
use effdeblur::models::{Checkpoint, WeightSet};
use effdeblur::train::{
    nafreplocal_desk_plan, read_log, run_plan, smoothed, TrainOptions, LAST_CHECKPOINT, TRAIN_LOG,
};

fn l1_series(log: &[effdeblur::train::LogRecord]) -> Vec<f64> {
    log.iter().map(|r| r.losses["l1"]).collect()
}

fn params_bits(m: &effdeblur::models::ModelInstance) -> Vec<(String, Vec<u32>)> {
    m.parameters()
        .iter()
        .map(|(k, v)| {
            let flat: Vec<f32> = v.as_tensor().flatten_all().unwrap().to_vec1().unwrap();
            (k.clone(), flat.into_iter().map(f32::to_bits).collect())
        })
        .collect()
}

#[test]
fn desk_plan_runs_every_surgery_and_reduces_l1() {
    let data = synthetic_pairs(8, 64, 64, 1.5, 3).unwrap();
    let plan = nafreplocal_desk_plan(50);
    let opts = TrainOptions {
        seed: 11,
        ..TrainOptions::default()
    };
    let a = run_plan(None, &plan, &data, &data[..2], &opts).unwrap();
    assert!(a.completed);
    assert_eq!(a.log.len(), 200);
    let cfg = a.model.config();
    assert_eq!(cfg.first_conv_kernel, 3);
    assert!(cfg.use_middle_scag);
    assert!(cfg.use_reparam);
    assert!(!a.model.rep_convs().is_empty());

    let s = smoothed(&l1_series(&a.log), 20);
    assert!(
        s.last().unwrap() < &s[19],
        "smoothed l1 {} -> {}",
        s[19],
        s.last().unwrap()
    );

    let b = run_plan(None, &plan, &data, &data[..2], &opts).unwrap();
    assert_eq!(l1_series(&a.log), l1_series(&b.log));
    assert_eq!(params_bits(&a.model), params_bits(&b.model));
}

#[test]
fn interrupted_run_resumes_to_the_same_state() {
    let data = synthetic_pairs(4, 48, 48, 1.5, 5).unwrap();
    let plan = nafreplocal_desk_plan(6);
    let full_dir = tempfile::tempdir().unwrap();
    let part_dir = tempfile::tempdir().unwrap();
    let base = TrainOptions {
        seed: 2,
        ..TrainOptions::default()
    };

    let full = run_plan(
        None,
        &plan,
        &data,
        &data[..1],
        &TrainOptions {
            out_dir: Some(full_dir.path().into()),
            ..base.clone()
        },
    )
    .unwrap();

    // Stop mid-way through the second stage, then resume.
    let part_opts = TrainOptions {
        out_dir: Some(part_dir.path().into()),
        stop_after: Some(9),
        ..base.clone()
    };
    let stopped = run_plan(None, &plan, &data, &data[..1], &part_opts).unwrap();
    assert!(!stopped.completed);
    let resumed = run_plan(
        None,
        &plan,
        &data,
        &data[..1],
        &TrainOptions {
            resume: true,
            stop_after: None,
            ..part_opts
        },
    )
    .unwrap();
    assert!(resumed.completed);
    assert_eq!(params_bits(&full.model), params_bits(&resumed.model));
    assert_eq!(
        read_log(&full_dir.path().join(TRAIN_LOG)).unwrap(),
        read_log(&part_dir.path().join(TRAIN_LOG)).unwrap()
    );
    let a = Checkpoint::read(&full_dir.path().join(LAST_CHECKPOINT))
        .unwrap()
        .instantiate(WeightSet::Ema)
        .unwrap();
    let b = Checkpoint::read(&part_dir.path().join(LAST_CHECKPOINT))
        .unwrap()
        .instantiate(WeightSet::Ema)
        .unwrap();
    assert_eq!(params_bits(&a), params_bits(&b));
}
