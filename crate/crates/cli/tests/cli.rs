use std::path::Path;
use std::process::{Command, Output};

const SMALL: [&str; 10] = [
    "--set", "synth.n_subjects=3",
    "--set", "synth.channels=4",
    "--set", "synth.time_len=16",
    "--set", "synth.samples_per_subject=24",
    "--set", "meta.max_epochs=2",
];

fn ssml<S: AsRef<std::ffi::OsStr>>(args: &[S]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ssml")).args(args).output().unwrap()
}

fn ok<S: AsRef<std::ffi::OsStr> + std::fmt::Debug>(args: &[S]) -> String {
    let out = ssml(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn pipeline_from_file() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = d.join("d.mshd");
    ok(&[&["synth", "-o", p(&data), "--labels-csv", p(&d.join("labels.csv"))][..], &SMALL].concat());
    let labels = std::fs::read_to_string(d.join("labels.csv")).unwrap();
    assert_eq!(labels.lines().count(), 1 + 3 * 24);

    let data_str = p(&data).to_string();
    let with_data = |cmd: &[&str]| -> Vec<String> {
        cmd.iter()
            .copied()
            .chain(["--data", &data_str, "--set", "meta.max_epochs=2"])
            .map(String::from)
            .collect()
    };
    ok(&with_data(&["pretrain", "--target", "0", "-o", p(&d.join("ck")), "--history", p(&d.join("h.csv"))]));
    assert!(d.join("ck.manifest").exists() && d.join("ck.bin").exists());
    ok(&with_data(&[
        "adapt", "--checkpoint", p(&d.join("ck")), "--target", "0", "--shots", "2", "-o", p(&d.join("ad")),
        "--report", p(&d.join("r.csv")),
    ]));
    ok(&with_data(&["eval", "--checkpoint", p(&d.join("ad")), "-o", p(&d.join("e.csv"))]));
    let eval = std::fs::read_to_string(d.join("e.csv")).unwrap();
    assert_eq!(eval.lines().next(), Some("subject_id,accuracy"));
    assert_eq!(eval.lines().count(), 4);
    ok(&with_data(&["features", "--checkpoint", p(&d.join("ad")), "-o", p(&d.join("f.csv"))]));
    let header = std::fs::read_to_string(d.join("f.csv")).unwrap();
    assert!(header.starts_with("subject_id,label,h_1,"));

    let out = ssml(&with_data(&[
        "adapt", "--checkpoint", p(&d.join("ck")), "--target", "0", "--method", "wometa", "-o", p(&d.join("x")),
    ]));
    assert!(!out.status.success());
}

#[test]
fn report_rebuilds_the_loso_tables() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let args = [
        &["loso", "-o", p(&run), "--set", "experiment.shots=0,2", "--set", "experiment.seeds=0,1,2"][..],
        &SMALL,
    ]
    .concat();
    let stdout = ok(&args);
    assert!(stdout.contains("SSML"));
    let rebuilt = dir.path().join("rebuilt");
    ok(&["report", "--rows", p(&run.join("rows.csv")), "-o", p(&rebuilt)]);
    for f in ["rows.csv", "summary.csv", "improvements.csv", "tests.csv"] {
        assert_eq!(std::fs::read(run.join(f)).unwrap(), std::fs::read(rebuilt.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn config_file_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "[synth]\nn_subjects = 2\nchannels = 3\ntime_len = 8\n").unwrap();
    let data = dir.path().join("d.mshd");
    ok(&["synth", "--config", p(&cfg), "-o", p(&data)]);

    let bad = ssml(&["synth", "--set", "synth.nope=1", "-o", p(&data)]);
    assert_eq!(bad.status.code(), Some(1));
    let msg = String::from_utf8_lossy(&bad.stderr);
    assert!(msg.starts_with("error:") && msg.contains("synth.nope"), "{msg}");

    std::fs::write(&cfg, "[synth]\nn_subjects 2\n").unwrap();
    let bad = ssml(&["synth", "--config", p(&cfg), "-o", p(&data)]);
    assert!(String::from_utf8_lossy(&bad.stderr).contains("line 2"));

    let missing = ssml(&["eval", "--checkpoint", p(&dir.path().join("none")), "-o", p(&dir.path().join("e.csv"))]);
    assert_eq!(missing.status.code(), Some(1));
}
