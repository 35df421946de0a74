use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn brainomaly(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_brainomaly")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn make_phantoms(dir: &Path) {
    let out = brainomaly(&[
        "phantom",
        "--out",
        dir.to_str().unwrap(),
        "--image-size",
        "16",
        "--slices",
        "2",
        "--h",
        "4",
        "--m-healthy",
        "2",
        "--m-diseased",
        "2",
        "--holdout-healthy",
        "2",
        "--holdout-diseased",
        "2",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
}

fn tiny_config(root: &Path) -> std::path::PathBuf {
    let cfg = format!(
        r#"dataset = "{data}"
output = "{run}"
diffmap_subjects = 1

[training]
total_iterations = 8
checkpoint_interval = 4
batch_size = 2

[training.generator]
width_factor = 0.0625
residual_blocks = 1

[training.critic]
width_factor = 0.0625
downsamplings = 4
"#,
        data = root.join("data").display(),
        run = root.join("run").display()
    );
    let path = root.join("experiment.toml");
    fs::write(&path, cfg).unwrap();
    path
}

#[test]
fn help_and_usage_errors() {
    assert_eq!(code(&brainomaly(&["--help"])), 0);
    assert_eq!(code(&brainomaly(&["--version"])), 0);
    assert_eq!(code(&brainomaly(&["frobnicate"])), 1);
    assert_eq!(code(&brainomaly(&["train", "--iterations", "many"])), 1);
}

#[test]
fn invalid_settings_exit_with_one() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope");
    let out = brainomaly(&["train", "--dataset", missing.to_str().unwrap()]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("does not exist"));

    let out = brainomaly(&["phantom", "--out", tmp.path().join("d").to_str().unwrap(), "--delta", "0.9"]);
    assert_eq!(code(&out), 1);

    make_phantoms(&tmp.path().join("data"));
    let cfg = tiny_config(tmp.path());
    let out = brainomaly(&["pipeline", "--config", cfg.to_str().unwrap(), "--mode", "sideways"]);
    assert_eq!(code(&out), 1);
}

#[test]
fn runtime_failures_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    fs::create_dir_all(&run).unwrap();
    fs::write(run.join("config.toml"), "not = [valid").unwrap();
    make_phantoms(&tmp.path().join("data"));
    let out = brainomaly(&[
        "score",
        "--run",
        run.to_str().unwrap(),
        "--dataset",
        tmp.path().join("data").to_str().unwrap(),
        "--out",
        tmp.path().join("s.csv").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn pipeline_then_rescore_and_eval() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    make_phantoms(&data);
    let cfg = tiny_config(tmp.path());
    let out = brainomaly(&["pipeline", "--config", cfg.to_str().unwrap(), "--log-every", "0"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("selected iteration"), "{stdout}");

    let run = tmp.path().join("run");
    let scores = tmp.path().join("holdout.csv");
    let out = brainomaly(&[
        "score",
        "--run",
        run.to_str().unwrap(),
        "--dataset",
        data.to_str().unwrap(),
        "--set",
        "holdout",
        "--out",
        scores.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(&scores).unwrap();
    assert!(text.starts_with("subject_id,source_set,score,pseudo_label,true_label"));
    assert_eq!(text.lines().count(), 1 + 4);

    let out = brainomaly(&["select", "--run", run.to_str().unwrap(), "--dataset", data.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("selected_iteration,aucp,"));

    let eval_dir = tmp.path().join("eval");
    let out = brainomaly(&[
        "eval",
        "--run",
        run.to_str().unwrap(),
        "--dataset",
        data.to_str().unwrap(),
        "--out",
        eval_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(eval_dir.join("roc_holdout.dat").is_file());
    assert!(String::from_utf8_lossy(&out.stdout).contains("inductive_auc"));
}
