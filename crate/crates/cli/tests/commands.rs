use std::io::Read;

use effdeblur::data_io::Split;
use effdeblur::fixtures::{synthetic_pairs, write_split};
use effdeblur::train::{LAST_CHECKPOINT, TRAIN_LOG};
use effdeblur_cli::manifest::sibling_manifest;
use effdeblur_cli::package::{parse_fields, write_tar};
use effdeblur_cli::{
    cmd_profile, cmd_train, exit_code, resolve_model, resolve_plan, GateStatus, PolicyArg,
    ProfileArgs, RunManifest, TrainArgs,
};

fn profile_args(model: &str, res: &str) -> ProfileArgs {
    ProfileArgs {
        model: model.into(),
        res: res.into(),
        runs: 0,
        warmup: 0,
        gate: true,
        policy: PolicyArg::Challenge,
        out: None,
    }
}

#[test]
fn model_specs_resolve_or_report_usage() {
    assert_eq!(resolve_model("nafnet-c24-l14").unwrap().width, 24);
    assert!(resolve_model("sa_nafnet").is_ok());
    let err = resolve_model("unet9000").unwrap_err();
    assert_eq!(exit_code(&err), 2);

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "width = \"wide\"\n").unwrap();
    assert_eq!(
        exit_code(&resolve_model(bad.to_str().unwrap()).unwrap_err()),
        1
    );

    assert!(resolve_plan("nafreplocal-desk").is_ok());
    assert_eq!(exit_code(&resolve_plan("nope").unwrap_err()), 2);
}

#[test]
fn profile_gates_only_at_the_reference_resolution() {
    let out = cmd_profile(&profile_args("nafnet-c16-l14", "1920x1200"), 0).unwrap();
    assert!(matches!(out.gate, GateStatus::Pass));
    let out = cmd_profile(&profile_args("nafnet-c24-l14", "1920x1200"), 0).unwrap();
    assert!(matches!(out.gate, GateStatus::Fail(_)));
    let out = cmd_profile(&profile_args("nafnet-c16-l14", "640x480"), 0).unwrap();
    assert!(matches!(out.gate, GateStatus::Refused(_)));
    assert_eq!(
        exit_code(
            &cmd_profile(&profile_args("nafnet", "big"), 0)
                .err()
                .unwrap()
        ),
        2
    );
}

#[test]
fn factsheet_fields_keep_values_verbatim() {
    let f = parse_fields(&["team=A=B".into(), "contact= x@y.z ".into(), "team=C".into()]).unwrap();
    assert_eq!(
        f,
        vec![
            ("team".into(), "C".into()),
            ("contact".into(), " x@y.z ".into())
        ]
    );
    assert_eq!(
        exit_code(&parse_fields(&["novalue".into()]).unwrap_err()),
        2
    );
    assert_eq!(exit_code(&parse_fields(&["=v".into()]).unwrap_err()), 2);
}

#[test]
fn tar_output_is_byte_stable() {
    let entries = vec![
        ("results/a.png".to_string(), vec![1u8, 2, 3]),
        ("notes.md".to_string(), b"hello".to_vec()),
    ];
    let a = write_tar(&entries).unwrap();
    assert_eq!(a, write_tar(&entries).unwrap());
    let mut archive = tar::Archive::new(a.as_slice());
    let mut seen = Vec::new();
    for e in archive.entries().unwrap() {
        let mut e = e.unwrap();
        assert_eq!(e.header().mtime().unwrap(), 0);
        let mut body = Vec::new();
        e.read_to_end(&mut body).unwrap();
        seen.push((e.path().unwrap().to_string_lossy().into_owned(), body));
    }
    assert_eq!(seen, entries);
}

#[test]
fn sibling_manifest_sits_next_to_the_file() {
    let p = sibling_manifest(std::path::Path::new("out/sub.tar"));
    assert_eq!(p, std::path::Path::new("out/sub.tar.manifest.json"));
}

#[test]
fn short_training_run_writes_artifacts_and_stable_manifest() {
    let data = tempfile::tempdir().unwrap();
    write_split(
        data.path(),
        Split::Train,
        &synthetic_pairs(4, 64, 64, 1.5, 8).unwrap(),
    )
    .unwrap();
    let run = |out: &std::path::Path| {
        cmd_train(
            &TrainArgs {
                plan: "nafreplocal-desk".into(),
                data_root: Some(data.path().into()),
                out_dir: out.into(),
                val_root: None,
                resume: false,
                steps: Some(2),
                backend: None,
                stop_after: None,
            },
            3,
        )
        .unwrap()
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ra = run(a.path());
    let rb = run(b.path());
    assert!(ra.outcome.completed);
    assert_eq!(ra.outcome.log.len(), 8);
    for f in ["plan.toml", LAST_CHECKPOINT, TRAIN_LOG, "manifest.json"] {
        assert!(a.path().join(f).is_file(), "{f}");
    }
    let ma = RunManifest::read(&a.path().join("manifest.json")).unwrap();
    assert_eq!(ma, ra.manifest);
    assert_eq!(ma.seed, 3);
    assert_eq!(
        std::fs::read(a.path().join(TRAIN_LOG)).unwrap(),
        std::fs::read(b.path().join(TRAIN_LOG)).unwrap()
    );
    // Data root is the same, so only timestamps differ.
    assert_eq!(
        ra.manifest.without_timestamps(),
        rb.manifest.without_timestamps()
    );
}
