use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn dfr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dfr"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

const SPEC: &str = "classes = 3\ndim = 4\nsamples_per_class = 20\n";
const CONFIG: &str = "epochs = 3\nbatch_size = 8\n";

fn generate(dir: &Path) -> (String, String) {
    let spec = write(dir, "spec.conf", SPEC);
    let src = dir.join("src.csv").to_string_lossy().into_owned();
    let tgt = dir.join("tgt.csv").to_string_lossy().into_owned();
    let out = dfr(&["gen", "--spec", &spec, "--out-source", &src, "--out-target", &tgt, "--seed", "3"]);
    assert!(out.status.success(), "{}", stderr(&out));
    (src, tgt)
}

#[test]
fn gen_train_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (src, tgt) = generate(dir.path());
    assert!(fs::read_to_string(&src).unwrap().starts_with("label,f0,f1,f2,f3\n"));

    let cfg = write(dir.path(), "train.conf", CONFIG);
    let metrics = dir.path().join("m.csv").to_string_lossy().into_owned();
    let ckpt = dir.path().join("model.ckpt").to_string_lossy().into_owned();
    let out = dfr(&[
        "train", "--source", &src, "--target", &tgt, "--config", &cfg, "--out-metrics", &metrics,
        "--out-checkpoint", &ckpt,
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = fs::read_to_string(&metrics).unwrap();
    assert_eq!(text.lines().count(), 4);
    assert!(text.starts_with("epoch,L_R,L_S,L_H,L_T,n_pt,target_accuracy,mmd,coral,seconds\n"));

    let out = dfr(&["eval", "--checkpoint", &ckpt, "--data", &tgt]);
    assert!(out.status.success(), "{}", stderr(&out));
    let stdout = String::from_utf8_lossy(&out.stdout);
    let first = stdout.lines().next().unwrap();
    let acc: f64 = first.strip_prefix("accuracy ").unwrap().parse().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    assert_eq!(stdout.lines().count(), 4);
}

#[test]
fn disable_flags_blank_their_columns() {
    let dir = tempfile::tempdir().unwrap();
    let (src, tgt) = generate(dir.path());
    let cfg = write(dir.path(), "train.conf", CONFIG);
    let metrics = dir.path().join("m.csv").to_string_lossy().into_owned();
    let ckpt = dir.path().join("model.ckpt").to_string_lossy().into_owned();
    let out = dfr(&[
        "train", "--source", &src, "--target", &tgt, "--config", &cfg, "--out-metrics", &metrics,
        "--out-checkpoint", &ckpt, "--disable-registration", "--disable-histogram",
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    for row in fs::read_to_string(&metrics).unwrap().lines().skip(1) {
        let cells: Vec<&str> = row.split(',').collect();
        assert_eq!(cells[1], "", "L_R should be blank: {row}");
        assert_eq!(cells[3], "", "L_H should be blank: {row}");
    }
}

#[test]
fn eval_on_unlabeled_data_prints_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let (src, tgt) = generate(dir.path());
    let cfg = write(dir.path(), "train.conf", "epochs = 1\nbatch_size = 8\n");
    let metrics = dir.path().join("m.csv").to_string_lossy().into_owned();
    let ckpt = dir.path().join("model.ckpt").to_string_lossy().into_owned();
    let out = dfr(&[
        "train", "--source", &src, "--target", &tgt, "--config", &cfg, "--out-metrics", &metrics,
        "--out-checkpoint", &ckpt,
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let unlabeled = write(dir.path(), "u.csv", "f0,f1,f2,f3\n0,0,0,0\n1,2,3,4\n");
    let out = dfr(&["eval", "--checkpoint", &ckpt, "--data", &unlabeled]);
    assert!(out.status.success(), "{}", stderr(&out));
    let stdout = String::from_utf8_lossy(&out.stdout);
    let lines: Vec<&str> = stdout.lines().collect();
    assert_eq!(lines[0], "prediction");
    assert_eq!(lines.len(), 3);
    assert!(lines[1..].iter().all(|l| l.parse::<usize>().unwrap() < 3));
}

#[test]
fn ablate_writes_eight_rows() {
    let dir = tempfile::tempdir().unwrap();
    let (src, tgt) = generate(dir.path());
    let cfg = write(dir.path(), "train.conf", "epochs = 2\nbatch_size = 8\n");
    let table = dir.path().join("ablation.csv").to_string_lossy().into_owned();
    let out = dfr(&["ablate", "--source", &src, "--target", &tgt, "--config", &cfg, "--out", &table]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = fs::read_to_string(&table).unwrap();
    let variants: Vec<&str> = text.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(
        variants,
        ["DFR-H/T/R", "DFR-R/T", "DFR-H/R", "DFR-H/T", "DFR-R", "DFR-T", "DFR-H", "DFR"]
    );
}

#[test]
fn errors_exit_nonzero_with_a_category() {
    let dir = tempfile::tempdir().unwrap();
    let (src, tgt) = generate(dir.path());
    let metrics = dir.path().join("m.csv").to_string_lossy().into_owned();
    let ckpt = dir.path().join("model.ckpt").to_string_lossy().into_owned();

    let bad_cfg = write(dir.path(), "bad.conf", "epochs = 2\nwarmup = 5\n");
    let out = dfr(&[
        "train", "--source", &src, "--target", &tgt, "--config", &bad_cfg, "--out-metrics", &metrics,
        "--out-checkpoint", &ckpt,
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("config error") && stderr(&out).contains("warmup"));

    let bad_data = write(dir.path(), "bad.csv", "label,f0\n0,1\n1,x\n");
    let out = dfr(&["eval", "--checkpoint", &ckpt, "--data", &bad_data]);
    assert_ne!(out.status.code(), Some(0));

    let cfg = write(dir.path(), "ok.conf", CONFIG);
    let out = dfr(&[
        "train", "--source", &bad_data, "--target", &tgt, "--config", &cfg, "--out-metrics", &metrics,
        "--out-checkpoint", &ckpt,
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).contains("data error") && stderr(&out).contains(":3:"));

    let out = dfr(&["eval", "--checkpoint", "/nonexistent/model.ckpt", "--data", &tgt]);
    assert_eq!(out.status.code(), Some(5));
    assert!(stderr(&out).contains("io error"));
}

#[test]
fn seeded_training_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (src, tgt) = generate(dir.path());
    let cfg = write(dir.path(), "train.conf", CONFIG);
    let mut runs = Vec::new();
    for k in 0..2 {
        let metrics = dir.path().join(format!("m{k}.csv")).to_string_lossy().into_owned();
        let ckpt = dir.path().join(format!("c{k}.ckpt")).to_string_lossy().into_owned();
        let out = dfr(&[
            "train", "--source", &src, "--target", &tgt, "--config", &cfg, "--out-metrics", &metrics,
            "--out-checkpoint", &ckpt,
        ]);
        assert!(out.status.success(), "{}", stderr(&out));
        runs.push((fs::read(&metrics).unwrap(), fs::read(&ckpt).unwrap()));
    }
    assert_eq!(runs[0], runs[1]);
}
