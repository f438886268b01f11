use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
trials = 4
[system]
n_t = 16
n_r = 4
[training]
samples = 60
epochs = 2
batch_size = 20
[fig8]
n_t = [16, 32]
[fig12]
n_rf = 4
"#;

fn hbf(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hbf"))
        .current_dir(dir)
        .args(args)
        .arg("--quiet")
        .output()
        .unwrap()
}

fn with_config(text: &str) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("run.toml"), text).unwrap();
    dir
}

#[test]
fn fig_writes_csv_under_out_dir() {
    let dir = with_config(SMALL);
    let out = hbf(dir.path(), &["--config", "run.toml", "--out", "res", "fig", "fig8"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(dir.path().join("res/fig8/complexity.csv")).unwrap();
    assert!(csv.starts_with("scheme,n_t,n_r,n_rf,n_s,snr_db,seed,step,value,units,config_hash\n"));
    assert!(String::from_utf8_lossy(&out.stdout).contains("fig8/complexity.csv"));
}

#[test]
fn seed_flag_overrides_config() {
    let dir = with_config(SMALL);
    let a = hbf(
        dir.path(),
        &["--config", "run.toml", "--out", "a", "--seed", "5", "fig", "fig9"],
    );
    let b = hbf(
        dir.path(),
        &["--config", "run.toml", "--out", "b", "--seed", "5", "fig", "fig9"],
    );
    assert!(a.status.success() && b.status.success());
    let read = |d: &str| fs::read(dir.path().join(d).join("fig9/mse_vs_iteration.csv")).unwrap();
    assert_eq!(read("a"), read("b"));
    assert!(String::from_utf8(read("a"))
        .unwrap()
        .lines()
        .nth(1)
        .unwrap()
        .contains(",5,"));
}

#[test]
fn train_then_reuses_checkpoint() {
    let dir = with_config(SMALL);
    let first = hbf(dir.path(), &["--config", "run.toml", "--out", "res", "train"]);
    assert!(first.status.success(), "{}", String::from_utf8_lossy(&first.stderr));
    assert!(String::from_utf8_lossy(&first.stdout).contains("(trained)"));
    let second = hbf(dir.path(), &["--config", "run.toml", "--out", "res", "train"]);
    assert!(String::from_utf8_lossy(&second.stdout).contains("(cached)"));
}

#[test]
fn gen_channels_and_eval_run() {
    let dir = with_config(SMALL);
    let g = hbf(dir.path(), &["--config", "run.toml", "--out", "res", "gen-channels"]);
    assert!(g.status.success());
    assert!(dir.path().join("res/channels/eval_channels.bin").exists());
    let e = hbf(dir.path(), &["--config", "run.toml", "--out", "res", "eval"]);
    assert!(e.status.success(), "{}", String::from_utf8_lossy(&e.stderr));
    let csv = fs::read_to_string(dir.path().join("res/eval/se.csv")).unwrap();
    for s in ["optimal", "omp", "zf", "dnn", "subconnected"] {
        assert!(csv.lines().any(|l| l.starts_with(&format!("{s},"))), "{s} missing");
    }
}

#[test]
fn unknown_config_key_fails_with_structured_error() {
    let dir = with_config("[training]\nepohcs = 3\n");
    let out = hbf(dir.path(), &["--config", "run.toml", "fig", "fig8"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.starts_with("error kind=config"), "{err}");
    assert!(err.contains("epohcs"), "{err}");
}

#[test]
fn unknown_figure_and_bad_values_are_rejected() {
    let dir = with_config(SMALL);
    let out = hbf(dir.path(), &["--config", "run.toml", "fig", "fig5"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown experiment id"));
    let out = hbf(dir.path(), &["--config", "run.toml", "--trials", "0", "fig", "fig8"]);
    assert!(!out.status.success());
    let out = hbf(dir.path(), &["--config", "missing.toml", "fig", "fig8"]);
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error kind=io"));
}
