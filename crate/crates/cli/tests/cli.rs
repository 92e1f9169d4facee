use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use pitsep_core::corpus::{manifest_path, read_manifest, Split};
use pitsep_core::dsp::read_wav;
use pitsep_core::training::TrainingCurve;

fn pitsep(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pitsep"))
        .current_dir(dir)
        .env("PITSEP_THREADS", "1")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = pitsep(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(dir: &Path, args: &[&str]) -> i32 {
    pitsep(dir, args).status.code().unwrap()
}

const SMALL: &[&str] = &[
    "--num-train",
    "6",
    "--num-valid",
    "3",
    "--num-test",
    "3",
    "--duration",
    "0.4",
];

fn mixed(dir: &Path, name: &str, seed: &str) -> PathBuf {
    let mut args = vec!["--seed", seed, "mix", "--out", name];
    args.extend_from_slice(SMALL);
    ok(dir, &args);
    dir.join(name)
}

fn trained(dir: &Path, data: &str, out: &str, extra: &[&str]) -> PathBuf {
    trained_window(dir, data, out, "3", extra)
}

fn trained_window(dir: &Path, data: &str, out: &str, m: &str, extra: &[&str]) -> PathBuf {
    let mut args = vec![
        "train",
        "--data",
        data,
        "--out",
        out,
        "--epochs",
        "2",
        "--input-frames",
        "5",
        "--output-frames",
        m,
    ];
    args.extend_from_slice(extra);
    ok(dir, &args);
    dir.join(out)
}

fn tree(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((
                    p.strip_prefix(root).unwrap().to_path_buf(),
                    fs::read(&p).unwrap(),
                ));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn mix_writes_four_manifests_with_requested_counts() {
    let dir = tempfile::tempdir().unwrap();
    let stdout = ok(
        dir.path(),
        &[
            "mix",
            "--out",
            "d",
            "--num-train",
            "12",
            "--num-valid",
            "2",
            "--num-test",
            "1",
            "--duration",
            "0.3",
        ],
    );
    assert!(stdout.contains("train") && stdout.contains("test-oc"));
    let d = dir.path().join("d");
    let counts: Vec<usize> = [Split::Train, Split::Valid, Split::TestCc, Split::TestOc]
        .iter()
        .map(|&s| read_manifest(&manifest_path(&d, s)).unwrap().len())
        .collect();
    assert_eq!(counts, vec![12, 2, 1, 1]);
    assert!(d.join("config.toml").exists());
}

#[test]
fn mix_is_deterministic_for_a_seed() {
    let dir = tempfile::tempdir().unwrap();
    let a = mixed(dir.path(), "a", "5");
    let b = mixed(dir.path(), "b", "5");
    let c = mixed(dir.path(), "c", "6");
    assert_eq!(tree(&a), tree(&b));
    assert_ne!(tree(&a), tree(&c));
}

#[test]
fn train_writes_checkpoint_and_curves_for_both_criteria() {
    let dir = tempfile::tempdir().unwrap();
    mixed(dir.path(), "d", "1");
    for crit in ["pit", "conventional"] {
        let ckpt = trained(
            dir.path(),
            "d",
            &format!("m/{crit}.ckpt"),
            &["--criterion", crit],
        );
        assert!(ckpt.exists());
        let text = fs::read_to_string(dir.path().join(format!("m/{crit}.ckpt.curve.csv"))).unwrap();
        let curve = TrainingCurve::parse_csv(&text).unwrap();
        assert_eq!(curve.len(), 2);
    }
}

#[test]
fn zero_epochs_writes_an_initialized_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    mixed(dir.path(), "d", "1");
    let out = ok(
        dir.path(),
        &[
            "train",
            "--data",
            "d",
            "--out",
            "init.ckpt",
            "--epochs",
            "0",
        ],
    );
    assert!(out.contains("initialized"));
    let m = pitsep_core::model::load_checkpoint(&dir.path().join("init.ckpt")).unwrap();
    assert_eq!(m.epochs_completed, 0);
}

#[test]
fn resume_continues_epoch_numbering() {
    let dir = tempfile::tempdir().unwrap();
    mixed(dir.path(), "d", "1");
    trained(dir.path(), "d", "a.ckpt", &[]);
    ok(
        dir.path(),
        &[
            "train", "--data", "d", "--out", "b.ckpt", "--resume", "a.ckpt", "--epochs", "3",
            "--curve", "b.csv",
        ],
    );
    let curve =
        TrainingCurve::parse_csv(&fs::read_to_string(dir.path().join("b.csv")).unwrap()).unwrap();
    let epochs: Vec<usize> = curve.epochs.iter().map(|r| r.epoch).collect();
    assert_eq!(epochs, vec![3, 4, 5]);
}

#[test]
fn separate_outputs_one_wav_per_stream_of_input_length() {
    let dir = tempfile::tempdir().unwrap();
    let d = mixed(dir.path(), "d", "2");
    trained(dir.path(), "d", "m.ckpt", &[]);
    let record = &read_manifest(&manifest_path(&d, Split::TestCc)).unwrap()[0];
    let wav = d.join(&record.mixture_path);
    ok(
        dir.path(),
        &[
            "separate",
            "--checkpoint",
            "m.ckpt",
            "--wav",
            wav.to_str().unwrap(),
            "--out",
            "sep",
        ],
    );
    let stem = wav.file_stem().unwrap().to_string_lossy().into_owned();
    let len = read_wav(&wav).unwrap().len();
    for s in 1..=2 {
        let out = read_wav(dir.path().join(format!("sep/{stem}.s{s}.wav"))).unwrap();
        assert_eq!(out.len(), len);
    }
    let trace = fs::read_to_string(dir.path().join(format!("sep/{stem}.trace.csv"))).unwrap();
    assert!(trace.starts_with("metaframe_index,perm"));
}

#[test]
fn separate_manifest_in_every_mode() {
    let dir = tempfile::tempdir().unwrap();
    mixed(dir.path(), "d", "2");
    trained(dir.path(), "d", "m.ckpt", &[]);
    for mode in ["default", "optimal", "greedy"] {
        let out = format!("sep-{mode}");
        ok(
            dir.path(),
            &[
                "separate",
                "--checkpoint",
                "m.ckpt",
                "--manifest",
                "d/test-oc.jsonl",
                "--mode",
                mode,
                "--out",
                &out,
            ],
        );
        assert_eq!(fs::read_dir(dir.path().join(&out)).unwrap().count(), 3 * 3);
    }
}

#[test]
fn optimal_mode_without_references_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let d = mixed(dir.path(), "d", "2");
    trained(dir.path(), "d", "m.ckpt", &[]);
    let record = &read_manifest(&manifest_path(&d, Split::TestCc)).unwrap()[0];
    let wav = d.join(&record.mixture_path);
    let out = pitsep(
        dir.path(),
        &[
            "separate",
            "--checkpoint",
            "m.ckpt",
            "--wav",
            wav.to_str().unwrap(),
            "--mode",
            "optimal",
            "--out",
            "s",
        ],
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("references"));
}

#[test]
fn eval_window_sweep_emits_one_row_per_window_plus_oracle() {
    let dir = tempfile::tempdir().unwrap();
    mixed(dir.path(), "d", "3");
    for m in ["5", "3", "1"] {
        trained_window(dir.path(), "d", &format!("w{m}.ckpt"), m, &[]);
    }
    ok(
        dir.path(),
        &[
            "eval",
            "--checkpoint",
            "w5.ckpt",
            "w3.ckpt",
            "w1.ckpt",
            "--manifest",
            "d/test-cc.jsonl",
            "--modes",
            "optimal",
            "--with-irm",
            "--out",
            "rep",
        ],
    );
    let agg = fs::read_to_string(dir.path().join("rep/report.aggregate.csv")).unwrap();
    let rows: Vec<&str> = agg.lines().skip(1).collect();
    assert_eq!(rows.len(), 4, "{agg}");
    for w in ["5,5", "5,3", "5,1"] {
        assert!(
            rows.iter().any(|r| r.contains(&format!("optimal,{w},3,"))),
            "{agg}"
        );
    }
    assert!(rows.iter().any(|r| r.starts_with("test-cc,irm,,,3,")));
    let records = fs::read_to_string(dir.path().join("rep/report.csv")).unwrap();
    assert!(records.starts_with("id,split,mode,in_window,out_window,sdr_s1,sdr_s2,sdri,mse"));
    assert_eq!(records.lines().count(), 1 + 3 * 3 + 3);
}

#[test]
fn eval_fails_with_data_error_on_unreadable_sample() {
    let dir = tempfile::tempdir().unwrap();
    let d = mixed(dir.path(), "d", "4");
    trained(dir.path(), "d", "m.ckpt", &[]);
    let record = &read_manifest(&manifest_path(&d, Split::TestOc)).unwrap()[1];
    fs::write(d.join(&record.reference_paths[0]), b"not a wav").unwrap();
    let out = pitsep(
        dir.path(),
        &[
            "eval",
            "--checkpoint",
            "m.ckpt",
            "--manifest",
            "d/test-oc.jsonl",
            "--out",
            "rep",
        ],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains(&record.id));
}

#[test]
fn usage_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(dir.path(), &["frobnicate"]), 1);
    assert_eq!(code(dir.path(), &["train", "--data", "x"]), 1);
    assert_eq!(code(dir.path(), &["--preset", "huge", "config"]), 1);
    assert_eq!(
        code(
            dir.path(),
            &["train", "--data", "x", "--out", "y", "--criterion", "best"]
        ),
        1
    );
    fs::write(dir.path().join("bad.toml"), "seed = 1\nmystery = 2\n").unwrap();
    assert_eq!(code(dir.path(), &["--config", "bad.toml", "config"]), 1);
    assert_eq!(code(dir.path(), &["--help"]), 0);
}

#[test]
fn missing_inputs_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(
        code(
            dir.path(),
            &["train", "--data", "nowhere", "--out", "m.ckpt"]
        ),
        2
    );
    fs::write(dir.path().join("junk.ckpt"), b"junk").unwrap();
    assert_eq!(
        code(
            dir.path(),
            &[
                "eval",
                "--checkpoint",
                "junk.ckpt",
                "--manifest",
                "m.jsonl",
                "--out",
                "r"
            ]
        ),
        2
    );
}

#[test]
fn divergent_training_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    mixed(dir.path(), "d", "1");
    let out = pitsep(
        dir.path(),
        &[
            "train",
            "--data",
            "d",
            "--out",
            "m.ckpt",
            "--epochs",
            "3",
            "--learning-rate",
            "1e300",
        ],
    );
    assert_eq!(
        out.status.code(),
        Some(3),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn config_round_trips_through_a_file() {
    let dir = tempfile::tempdir().unwrap();
    let text = ok(
        dir.path(),
        &["--seed", "42", "--preset", "full-scale", "config"],
    );
    fs::write(dir.path().join("c.toml"), &text).unwrap();
    assert_eq!(ok(dir.path(), &["--config", "c.toml", "config"]), text);
    assert!(text.contains("seed = 42"));
}
