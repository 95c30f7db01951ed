//! End-to-end runs of the `graphdepth` executable.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn graphdepth(cwd: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_graphdepth"))
        .current_dir(cwd)
        .args(args)
        .output()
        .expect("spawn graphdepth")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn gen_data_train_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let gen = graphdepth(root, &["gen-data", "--out", "d", "--count", "8", "--seed", "7", "--val-count", "2"]);
    assert!(gen.status.success(), "{}", stderr(&gen));
    assert_eq!(fs::read_dir(root.join("d/train")).unwrap().count(), 8 * 4);

    let train = graphdepth(root, &["train", "--data", "d", "--steps", "50"]);
    assert!(train.status.success(), "{}", stderr(&train));
    let log = fs::read_to_string(root.join("run/train.csv")).unwrap();
    assert_eq!(log.lines().count(), 1 + 50);
    assert!(log.lines().skip(1).all(|l| l.split(',').all(|f| !f.contains("NaN"))));
    let conf = fs::read_to_string(root.join("run/run.conf")).unwrap();
    assert!(conf.contains("train.steps = 50"));
    assert!(root.join("run/checkpoint/checkpoint.manifest").is_file());

    let eval = graphdepth(
        root,
        &["eval", "--checkpoint", "run/checkpoint", "--data", "d", "--out", "e", "--save-predictions"],
    );
    assert!(eval.status.success(), "{}", stderr(&eval));
    let metrics = fs::read_to_string(root.join("e/eval_metrics.csv")).unwrap();
    let rows: Vec<&str> = metrics.lines().collect();
    assert_eq!(rows.len(), 2);
    assert!(rows[0].starts_with("split,samples,rmse"));
    assert!(rows[1].starts_with("val,2,"));
    assert!(root.join("e/predictions/00000.sigma.pfm").is_file());
    assert!(root.join("e/predictions/00001.depth.pfm").is_file());
}

#[test]
fn unknown_flag_exits_one_without_writing() {
    let dir = tempfile::tempdir().unwrap();
    let o = graphdepth(dir.path(), &["gen-data", "--out", "d", "--count", "2", "--bogus"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error kind=usage code=1"));
    assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 0);
}

#[test]
fn invalid_config_exits_one_without_writing() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        &["gen-data", "--out", "d", "--count", "2", "--set", "train.base_lr=-1"][..],
        &["gen-data", "--out", "d", "--count", "2", "--set", "scene.nope=1"][..],
        &["gen-data", "--out", "d", "--count", "2", "--config", "missing.conf"][..],
        &["train", "--data", "absent", "--out", "r"][..],
        &["ablate", "--preset", "table9", "--steps", "1"][..],
    ] {
        let o = graphdepth(dir.path(), args);
        assert_eq!(o.status.code(), Some(1), "{args:?}");
        assert!(stderr(&o).starts_with("error kind=config code=1"), "{}", stderr(&o));
    }
    assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 0);
}

#[test]
fn config_file_and_overrides_reach_the_run() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("small.conf"), "# tiny scenes\nscene.height = 32\nscene.width = 32\n").unwrap();
    let o = graphdepth(
        dir.path(),
        &["gen-data", "--out", "d", "--count", "1", "--config", "small.conf", "--set", "scene.width=64"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let conf = fs::read_to_string(dir.path().join("d/run.conf")).unwrap();
    assert!(conf.contains("scene.height = 32"));
    assert!(conf.contains("scene.width = 64"));
    assert!(conf.contains("scene.seed = 0"));
}

#[test]
fn corrupt_checkpoint_is_a_runtime_failure() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    assert!(graphdepth(root, &["gen-data", "--out", "d", "--count", "1", "--val-count", "1", "--set", "scene.height=32", "--set", "scene.width=32"])
        .status
        .success());
    let t = graphdepth(root, &["train", "--data", "d", "--steps", "1", "--set", "train.batch_size=1"]);
    assert!(t.status.success(), "{}", stderr(&t));
    let blob = root.join("run/checkpoint/checkpoint.bin");
    let bytes = fs::read(&blob).unwrap();
    fs::write(&blob, &bytes[..bytes.len() / 2]).unwrap();
    let o = graphdepth(root, &["eval", "--checkpoint", "run/checkpoint", "--data", "d"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).starts_with("error kind=parse code=2"), "{}", stderr(&o));
}

#[test]
fn ablate_table5_emits_six_rows() {
    let dir = tempfile::tempdir().unwrap();
    let o = graphdepth(
        dir.path(),
        &["ablate", "--preset", "table5", "--steps", "10", "--set", "scene.height=32", "--set", "scene.width=32"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("ablation/ablation.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 6);
    let names: Vec<&str> = rows.iter().map(|r| r.split(',').nth(1).unwrap()).collect();
    assert_eq!(names, ["baseline", "+bottleneck-gnn", "+multi-scale", "+attention", "+uncertainty", "+knn"]);
}
