use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "\
seeds = 0

[data]
height = 8
width = 8
train = 2
test = 2

[model]
base_channels = 2
depth = 2

[source]
epochs = 1
";

fn sfda(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sfda"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("launch sfda")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn usage_errors_exit_1_and_help_exits_0() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&sfda(dir.path(), &[])), 1);
    assert_eq!(code(&sfda(dir.path(), &["adapt", "--model", "m.bin"])), 1);
    assert_eq!(code(&sfda(dir.path(), &["adapt", "--model", "m", "--target", "t", "--out", "o", "--variant", "nope"])), 1);
    assert_eq!(code(&sfda(dir.path(), &["--help"])), 0);
}

#[test]
fn config_problems_exit_1_with_line_numbers() {
    let dir = tempfile::tempdir().unwrap();
    let missing = sfda(dir.path(), &["gen-data", "--config", "absent.conf", "--out", "data"]);
    assert_eq!(code(&missing), 1);
    assert!(stderr(&missing).contains("absent.conf"));

    fs::write(dir.path().join("bad.conf"), "seeds = 0\n[pls]\nalpah = 0.1\n").unwrap();
    let bad = sfda(dir.path(), &["ablate", "--config", "bad.conf", "--out", "out"]);
    assert_eq!(code(&bad), 1);
    assert!(stderr(&bad).contains("line 3"), "{}", stderr(&bad));

    fs::write(dir.path().join("ok.conf"), TINY).unwrap();
    let no_model = sfda(dir.path(), &["ablate", "--config", "ok.conf", "--out", "out"]);
    assert_eq!(code(&no_model), 1);
    assert!(!dir.path().join("out").exists());
}

#[test]
fn corrupt_artifacts_are_runtime_errors() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    fs::write(p.join("tiny.conf"), TINY).unwrap();
    assert_eq!(code(&sfda(p, &["gen-data", "--config", "tiny.conf", "--out", "data"])), 0);
    assert!(p.join("data/target/test/manifest.txt").is_file());

    fs::write(p.join("model.bin"), b"PSFD\x01\x00").unwrap();
    let out = sfda(p, &["eval", "--model", "model.bin", "--data", "data/target", "--out", "m.csv"]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
    assert!(stderr(&out).contains("truncated"), "{}", stderr(&out));

    let out = sfda(p, &["eval", "--model", "model.bin", "--data", "data/nowhere", "--out", "m.csv"]);
    assert_eq!(code(&out), 1);
}

#[test]
fn tiny_pipeline_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    fs::write(p.join("tiny.conf"), TINY).unwrap();
    let steps: [&[&str]; 4] = [
        &["gen-data", "--config", "tiny.conf", "--out", "data"],
        &["train-source", "--data", "data", "--out", "source.bin", "--config", "tiny.conf"],
        &["adapt", "--model", "source.bin", "--target", "data/target", "--out", "run", "--pls-epochs", "1", "--fas-epochs", "1"],
        &["eval", "--model", "run/model.bin", "--prompt", "run/prompt.tns", "--data", "data/target", "--out", "m.csv"],
    ];
    for args in steps {
        let out = sfda(p, args);
        assert_eq!(code(&out), 0, "{args:?}: {}", stderr(&out));
    }
    let csv = fs::read_to_string(p.join("m.csv")).unwrap();
    assert!(csv.starts_with("variant,domain,class,dice_mean,dice_std,seed\n"));
    assert_eq!(csv.lines().count(), 3);
}

#[test]
fn shipped_desk_config_matches_the_desk_presets() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.conf");
    let c = sfda_core::config::parse_config(&path).unwrap();
    assert_eq!((c.data.height, c.data.width, c.data.channels), (64, 64, 1));
    assert_eq!((c.data.train_count, c.data.test_count), (200, 50));
    assert_eq!(c.data.sources.len(), 2);
    assert_eq!((c.pls.epochs, c.fas.epochs), (30, 30));
    assert_eq!(c.seeds, [0, 1, 2]);
    assert_eq!(c.variants.len(), 5);
    assert!(c.data.root.ends_with("data") && c.data.root.is_absolute());
}
