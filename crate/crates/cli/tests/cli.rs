use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
iterations = 1
seeds = [1]

[data]
strong_clips = 3
weak_clips = 3
unlabeled_clips = 4
validation_clips = 3
frames = 40
min_duration = 5
max_duration = 15

[encoder]
max_frames = 40

[pretrain]
epochs = 1

[finetune]
epochs = 2
freeze_epochs = 1
"#;

fn pmam(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pmam")).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn small_config(dir: &Path, extra: &str) -> String {
    let path = dir.join("small.toml");
    std::fs::write(&path, format!("{SMALL}{extra}")).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn unknown_preset_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = pmam(&["--preset", "huge", "--out", dir.path().to_str().unwrap(), "gen-data"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("config"));
}

#[test]
fn invalid_values_are_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "\n[prototypes]\ncomponents = 0\n");
    let out = pmam(&["--config", &cfg, "--out", dir.path().to_str().unwrap(), "gen-data"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("K = 0"));
    let out = pmam(&["--loss", "mse", "--out", dir.path().to_str().unwrap(), "gen-data"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn missing_dataset_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "");
    let missing = dir.path().join("nowhere");
    let out = pmam(&[
        "--config",
        &cfg,
        "--out",
        dir.path().to_str().unwrap(),
        "pretrain",
        "--data",
        missing.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 3);
}

#[test]
fn diverging_pretraining_is_a_numerical_failure() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_str().unwrap();
    let cfg = small_config(dir.path(), "");
    assert_eq!(code(&pmam(&["--config", &cfg, "--out", root, "gen-data"])), 0);
    let wild = small_config(dir.path(), "");
    let text = std::fs::read_to_string(&wild).unwrap().replace(
        "[pretrain]\nepochs = 1\n",
        "[pretrain]\nepochs = 3\nlr_backbone = 1e300\nlr_rest = 1e300\n",
    );
    std::fs::write(&wild, text).unwrap();
    let out = pmam(&["--config", &wild, "--out", root, "pretrain"]);
    assert_eq!(code(&out), 4, "{}", String::from_utf8_lossy(&out.stderr));
}

fn snapshot(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.push((rel, std::fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn full_workflow_succeeds_and_repeats_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "");
    let out_dir = dir.path().join("run");
    let root = out_dir.to_str().unwrap();
    let model = out_dir.join("finetune/iter1/model.ckpt");
    let mut runs = Vec::new();
    for _ in 0..2 {
        let _ = std::fs::remove_dir_all(&out_dir);
        for step in [
            vec!["gen-data"],
            vec!["pretrain"],
            vec!["finetune"],
            vec!["analyze", "--timelines", "1"],
            vec!["evaluate", "--model", model.to_str().unwrap()],
        ] {
            let mut args = vec!["--config", cfg.as_str(), "--out", root];
            args.extend(step);
            let out = pmam(&args);
            assert_eq!(code(&out), 0, "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        }
        assert!(out_dir.join("analysis/iter1/correlation_reordered.csv").exists());
        assert!(out_dir.join("evaluation.txt").exists());
        runs.push(snapshot(&out_dir));
    }
    let names: Vec<&String> = runs[0].iter().map(|(n, _)| n).collect();
    assert!(names.iter().any(|n| n.ends_with("checkpoint.ckpt")));
    assert!(runs[0] == runs[1], "reruns differ");
}

#[test]
fn finetuned_checkpoints_cannot_be_finetuned_again() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_str().unwrap();
    let cfg = small_config(dir.path(), "");
    for step in [&["gen-data"][..], &["pretrain"], &["finetune"]] {
        let mut args = vec!["--config", cfg.as_str(), "--out", root];
        args.extend_from_slice(step);
        assert_eq!(code(&pmam(&args)), 0);
    }
    let model = dir.path().join("finetune/iter1/model.ckpt");
    let out = pmam(&["--config", &cfg, "--out", root, "finetune", "--checkpoint", model.to_str().unwrap()]);
    assert_eq!(code(&out), 3);
}
