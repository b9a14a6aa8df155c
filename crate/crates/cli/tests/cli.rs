use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn densefix(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_densefix"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn densefix")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

#[test]
fn gen_data_and_make_scenario() {
    let dir = tempfile::tempdir().unwrap();
    ok(&densefix(dir.path(), &["gen-data", "--n", "2000", "--side", "64", "--seed", "7", "--out", "data/"]));
    let root = dir.path().join("data");
    for sub in ["images", "masks", "boxes"] {
        assert_eq!(fs::read_dir(root.join(sub)).unwrap().count(), 2000, "{sub}");
    }
    assert!(root.join("manifest.txt").exists());

    let stdout = ok(&densefix(dir.path(), &["make-scenario", "--kind", "b", "--seg", "125", "--det", "125", "--seed", "1"]));
    assert!(stdout.contains("overlap 125"), "{stdout}");
    let manifest = fs::read_to_string(root.join("scenario_b_125_125_s1.txt")).unwrap();
    assert!(manifest.contains("overlap=125"));
}

#[test]
fn train_eval_report_round() {
    let dir = tempfile::tempdir().unwrap();
    ok(&densefix(dir.path(), &["gen-data", "--n", "40", "--side", "32", "--seed", "1", "--out", "train"]));
    ok(&densefix(dir.path(), &["gen-data", "--n", "8", "--side", "32", "--seed", "2", "--out", "eval"]));
    ok(&densefix(
        dir.path(),
        &["make-scenario", "--data", "train", "--kind", "b", "--seg", "10", "--det", "10", "--out", "train/scn.txt"],
    ));
    fs::write(
        dir.path().join("run.cfg"),
        "# tiny run\ndata_root = train\nmanifest = train/scn.txt\neval_root = eval\nout_dir = out\n\
         total_steps = 4\neval_every = 2\ninput_size = 32\nwidths = 4,4,8,8\n",
    )
    .unwrap();
    let stdout = ok(&densefix(
        dir.path(),
        &["train", "--config", "run.cfg", "--method", "dense_fixmatch", "--sampling", "explicit", "--log-every=1"],
    ));
    assert!(stdout.starts_with("best step"), "{stdout}");
    let out = dir.path().join("out");
    assert!(out.join("last.ckpt").exists());
    let records = fs::read_to_string(out.join("metrics.jsonl")).unwrap();
    assert_eq!(records.lines().count(), 3);
    assert_eq!(fs::read_to_string(out.join("train_log.jsonl")).unwrap().lines().count(), 4);

    let stdout = ok(&densefix(dir.path(), &["eval", "--checkpoint", "out/last.ckpt", "--data", "eval"]));
    assert!(stdout.contains("\"step\":4"), "{stdout}");

    let stdout = ok(&densefix(dir.path(), &["report", "out"]));
    assert!(stdout.contains("best step"));
    let csv = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert!(csv.starts_with("step,miou,map,gmean,iou_background"));
    assert_eq!(csv.lines().count(), 4);
}

#[test]
fn failures_exit_nonzero_with_a_diagnostic() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("run.cfg"), "method = supervised\n").unwrap();
    for args in [
        vec!["train", "--config", "run.cfg", "--no-such-key", "1"],
        vec!["train", "--config", "run.cfg", "--l_u_scope", "all_samples"],
        vec!["train", "--config", "missing.cfg"],
        vec!["make-scenario", "--kind", "b", "--seg", "1", "--det", "1"],
        vec!["report", "nowhere"],
    ] {
        let out = densefix(dir.path(), &args);
        assert!(!out.status.success(), "{args:?} succeeded");
        assert!(String::from_utf8_lossy(&out.stderr).contains("error"), "{args:?}");
    }
}
