mod common;

use std::fs;
use std::path::Path;
use std::process::Command;

use common::{checksums, config, lead_rows, with, SMALL_DATA, SMALL_MODEL};
use rainunet::data::{read_dataset, write_dataset, SequenceRecord, MANIFEST_NAME};
use rainunet::model::{load_checkpoint, save_checkpoint};
use rainunet::{RainUNet, Tensor};
use rainunet_cli::commands::{FINAL_CHECKPOINT, LEAD_TIME_CSV, SWA_CHECKPOINT};
use rainunet_cli::{cmd_evaluate, cmd_preprocess, cmd_synth, cmd_train};

fn prepared(
    root: &Path,
    extra: &[(&'static str, &'static str)],
) -> Vec<(&'static str, &'static str)> {
    let pairs = with(&with(SMALL_DATA, SMALL_MODEL), extra);
    let (raw, pre) = (root.join("raw"), root.join("pre"));
    cmd_synth(&config(&pairs, &[("out", &raw)])).unwrap();
    cmd_preprocess(&config(&pairs, &[("data", &raw), ("out", &pre)])).unwrap();
    pairs
}

#[test]
fn synth_writes_one_file_per_sequence_and_reruns_identically() {
    let dir = tempfile::tempdir().unwrap();
    let pairs = [("seed", "7"), ("sequences", "16"), ("size", "12")];
    for run in ["a", "b"] {
        let report = cmd_synth(&config(&pairs, &[("out", &dir.path().join(run))])).unwrap();
        assert_eq!(report.records, 16);
    }
    let (a, b) = (
        checksums(&dir.path().join("a")),
        checksums(&dir.path().join("b")),
    );
    assert_eq!(a, b);
    assert_eq!(a.keys().filter(|k| k.ends_with(".runt")).count(), 16);
    let manifest = fs::read_to_string(dir.path().join("a").join(MANIFEST_NAME)).unwrap();
    assert_eq!(manifest.lines().count(), 17);
}

#[test]
fn zero_epochs_checkpoint_is_the_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let pairs = prepared(dir.path(), &[("epochs", "0"), ("seed", "5")]);
    let cfg = config(
        &pairs,
        &[
            ("data", &dir.path().join("pre")),
            ("out", &dir.path().join("run")),
        ],
    );
    let report = cmd_train(&cfg).unwrap();
    assert_eq!(report.epochs, 0);
    let trained = load_checkpoint::<f32>(&dir.path().join("run").join(FINAL_CHECKPOINT)).unwrap();
    let init = RainUNet::<f32>::new(cfg.model.clone(), 5).unwrap();
    assert_eq!(trained.snapshot(), init.snapshot());
}

#[test]
fn swa_from_the_last_epoch_equals_the_final_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let pairs = prepared(
        dir.path(),
        &[("epochs", "2"), ("swa", "true"), ("swa_start", "2")],
    );
    let run = dir.path().join("run");
    let report = cmd_train(&config(
        &pairs,
        &[("data", &dir.path().join("pre")), ("out", &run)],
    ))
    .unwrap();
    assert_eq!(report.checkpoints.len(), 2);
    let a = fs::read(run.join(FINAL_CHECKPOINT)).unwrap();
    let b = fs::read(run.join(SWA_CHECKPOINT)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn zero_model_predicts_everywhere_so_recall_is_one_and_precision_is_prevalence() {
    let dir = tempfile::tempdir().unwrap();
    let pairs = prepared(dir.path(), &[]);
    let pre = dir.path().join("pre");
    let cfg = config(&pairs, &[("data", &pre), ("out", &dir.path().join("eval"))]);
    let mut model = RainUNet::<f32>::new(cfg.model.clone(), 0).unwrap();
    for p in model.params_mut() {
        p.value = p.value.zeros_like();
    }
    let ckpt = dir.path().join("zero.ckpt");
    save_checkpoint(&model, &ckpt).unwrap();
    let cfg = config(
        &pairs,
        &[
            ("data", &pre),
            ("out", &dir.path().join("eval")),
            ("checkpoint", &ckpt),
        ],
    );
    let report = cmd_evaluate(&cfg).unwrap();

    let records = read_dataset(&pre).unwrap();
    let positives: u64 = records.iter().map(|r| r.positives()).sum();
    let pixels: usize = records.iter().map(|r| r.target.len()).sum();
    assert!(positives > 0);
    assert_eq!(report.metrics.recall.value, 1.0);
    assert_eq!(
        report.metrics.precision.value,
        positives as f64 / pixels as f64
    );
    assert_eq!(report.counts.tn + report.counts.fn_, 0);

    let rows = lead_rows(&dir.path().join("eval").join(LEAD_TIME_CSV));
    assert_eq!(rows.len(), 32);
    for (k, (lead, minutes, iou)) in rows.into_iter().enumerate() {
        assert_eq!((lead, minutes), (k + 1, 15 * (k as i64 + 1)));
        assert!((0.0..=1.0).contains(&iou));
    }
}

fn record_with(positives: usize, side: usize) -> SequenceRecord {
    let mut target = vec![0u8; 32 * side * side];
    target[..positives].iter_mut().for_each(|v| *v = 1);
    let input = (0..11 * 4 * side * side)
        .map(|k| (k % 97) as f32 / 97.0)
        .collect();
    SequenceRecord {
        input: Tensor::from_vec(&[11, 4, side, side], input).unwrap(),
        target: Tensor::from_vec(&[32, side, side], target).unwrap(),
        region: format!("P{positives}"),
        timestamp: 0,
    }
}

#[test]
fn preprocess_drops_the_99_positive_record() {
    let dir = tempfile::tempdir().unwrap();
    let raw = dir.path().join("raw");
    write_dataset(
        &[
            record_with(120, 12),
            record_with(99, 12),
            record_with(100, 12),
        ],
        &raw,
    )
    .unwrap();
    let out = dir.path().join("pre");
    let report = cmd_preprocess(&config(&[], &[("data", &raw), ("out", &out)])).unwrap();
    assert_eq!((report.input, report.kept, report.removed), (3, 2, 1));
    let manifest = fs::read_to_string(out.join(MANIFEST_NAME)).unwrap();
    assert!(!manifest.contains("P99"));
    assert!(manifest.contains("P100") && manifest.contains("P120"));
}

#[test]
fn crop_factor_six_leaves_record_files_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let raw = dir.path().join("raw");
    write_dataset(&[record_with(300, 18), record_with(150, 18)], &raw).unwrap();
    let out = dir.path().join("pre");
    let pairs = [("crop_factor", "6"), ("channels", "ir+vis+wv")];
    cmd_preprocess(&config(&pairs, &[("data", &raw), ("out", &out)])).unwrap();
    for name in ["seq_00000.runt", "seq_00001.runt"] {
        assert_eq!(
            fs::read(raw.join(name)).unwrap(),
            fs::read(out.join(name)).unwrap()
        );
    }
}

#[test]
fn checkpoint_config_mismatch_names_both_shapes() {
    let dir = tempfile::tempdir().unwrap();
    let pairs = prepared(dir.path(), &[("epochs", "0")]);
    let pre = dir.path().join("pre");
    cmd_train(&config(
        &pairs,
        &[("data", &pre), ("out", &dir.path().join("run"))],
    ))
    .unwrap();
    let ckpt = dir.path().join("run").join(FINAL_CHECKPOINT);
    let other = with(&pairs, &[("base_channels", "8")]);
    let cfg = config(
        &other,
        &[
            ("data", &pre),
            ("out", &dir.path().join("eval")),
            ("checkpoint", &ckpt),
        ],
    );
    let msg = format!("{:#}", cmd_evaluate(&cfg).unwrap_err());
    assert!(
        msg.contains("base_channels: config 8, checkpoint 4"),
        "{msg}"
    );
    assert!(
        msg.contains("[8, 9, 1, 1, 1]") && msg.contains("[4, 9, 1, 1, 1]"),
        "{msg}"
    );
}

fn binary() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_rainunet"));
    c.env("RAINUNET_THREADS", "1");
    c
}

#[test]
fn exit_status_reflects_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out = binary()
        .args([
            "synth",
            "--set",
            "sequences=2",
            "--set",
            "size=12",
            "--set",
            "blobs=0,0",
            "--out",
        ])
        .arg(dir.path().join("raw"))
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("cleansing would remove 100%"));

    let bad_crop = binary()
        .args(["preprocess", "--crop-factor", "0"])
        .output()
        .unwrap();
    assert!(!bad_crop.status.success());

    let unknown = binary()
        .args(["synth", "--set", "colour=red"])
        .output()
        .unwrap();
    assert!(!unknown.status.success());
    assert!(String::from_utf8_lossy(&unknown.stderr).contains("unknown configuration key"));

    let strict = binary()
        .args(["gradcheck", "--tol", "0", "--seeds", "1"])
        .output()
        .unwrap();
    assert!(!strict.status.success());
    assert!(String::from_utf8_lossy(&strict.stdout).contains("FAIL"));
}

#[test]
fn binary_runs_the_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = |s: &str| dir.path().join(s).to_str().unwrap().to_string();
    let conf = dir.path().join("run.conf");
    let mut text = String::from("# small run\n");
    for (k, v) in with(
        &with(SMALL_DATA, SMALL_MODEL),
        &[("epochs", "1"), ("batch_size", "2")],
    ) {
        text.push_str(&format!("{k} = {v}\n"));
    }
    fs::write(&conf, text).unwrap();
    let conf = conf.to_str().unwrap().to_string();
    let steps: [&[&str]; 5] = [
        &["synth", "--out", &d("raw")],
        &["preprocess", "--data", &d("raw"), "--out", &d("pre")],
        &[
            "train",
            "--data",
            &d("pre"),
            "--out",
            &d("run"),
            "--swa",
            "--swa-start",
            "1",
        ],
        &[
            "evaluate",
            "--data",
            &d("pre"),
            "--checkpoint",
            &d("run/swa.ckpt"),
            "--out",
            &d("eval"),
        ],
        &[
            "predict",
            "--data",
            &d("pre"),
            "--checkpoint",
            &d("run/final.ckpt"),
            "--out",
            &d("pred"),
        ],
    ];
    for args in steps {
        let out = binary()
            .arg("--config")
            .arg(&conf)
            .args(args)
            .output()
            .unwrap();
        assert!(
            out.status.success(),
            "{args:?}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
    assert_eq!(
        lead_rows(&dir.path().join("eval").join(LEAD_TIME_CSV)).len(),
        32
    );
    let preds = checksums(&dir.path().join("pred"));
    let kept = read_dataset(&dir.path().join("pre")).unwrap().len();
    assert_eq!(
        preds.keys().filter(|k| k.starts_with("pred_")).count(),
        kept
    );
    assert_eq!(
        preds.keys().filter(|k| k.starts_with("mask_")).count(),
        kept
    );
}
