use std::path::Path;
use std::process::{Command, Output};

fn cromo(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cromo"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const SHORT: [&str; 4] = ["-o", "trainer.epochs=2", "--output-root", "runs"];

#[test]
fn train_eval_plot_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["train", "--config", "toy"];
    args.extend(SHORT);
    let o = cromo(&args, dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let out = stdout(&o);
    assert!(out.contains("LA"), "{out}");
    let run_dir = std::fs::read_dir(dir.path().join("runs"))
        .unwrap()
        .next()
        .unwrap()
        .unwrap()
        .path();
    let rd = run_dir.to_str().unwrap();

    for mode in ["linear", "knn"] {
        let o = cromo(&["eval", "--run-dir", rd, "--mode", mode], dir.path());
        assert!(
            o.status.success(),
            "{mode}: {}",
            String::from_utf8_lossy(&o.stderr)
        );
        assert!(run_dir.join(format!("eval_{mode}.json")).exists());
    }
    assert!(run_dir.join("knn_task_matrix.csv").exists());

    let o = cromo(&["plot", "--run-dir", rd], dir.path());
    assert!(o.status.success());
    assert!(run_dir.join("losses.png").exists());
}

#[test]
fn overrides_change_the_run_hash() {
    let dir = tempfile::tempdir().unwrap();
    let hash = |seed: &str| {
        let o = cromo(
            &["train", "--config", "toy", "-o", seed, "--dry-run"],
            dir.path(),
        );
        assert!(o.status.success());
        stdout(&o)
    };
    assert_ne!(hash("trainer.seed=0"), hash("trainer.seed=7"));
}

#[test]
fn exit_codes_separate_validation_from_runtime() {
    let dir = tempfile::tempdir().unwrap();
    let o = cromo(
        &["train", "--config", "toy", "-o", "trainer.strategy=bogus"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(2));
    let o = cromo(&["train", "--config", "no_such_preset"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    let o = cromo(&["sweep", "--config", "toy", "--axis", "alpha"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    let o = cromo(&["eval", "--run-dir", "missing"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    let o = cromo(
        &[
            "train",
            "--config",
            "cifar10_split2_barlow_cromo",
            "--output-root",
            "runs",
        ],
        dir.path(),
    );
    assert_eq!(
        o.status.code(),
        Some(1),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let o = cromo(&["frobnicate"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn sweep_writes_one_row_per_value() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec![
        "sweep",
        "--config",
        "toy",
        "--axis",
        "buffer_budget",
        "--values",
        "10,20",
    ];
    args.extend(SHORT);
    let o = cromo(&args, dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let sweeps = dir.path().join("runs/sweeps");
    let out = std::fs::read_dir(&sweeps)
        .unwrap()
        .next()
        .unwrap()
        .unwrap()
        .path();
    let csv = std::fs::read_to_string(out.join("tables.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3, "{csv}");
    assert!(out.join("sweep_buffer_budget.png").exists());
}

#[test]
fn confusion_emits_curves() {
    let dir = tempfile::tempdir().unwrap();
    let o = cromo(
        &[
            "confusion",
            "--iterations",
            "20",
            "--modes",
            "cil_minibatch,single_pool",
            "--output-root",
            "runs",
        ],
        dir.path(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let base = dir.path().join("runs/confusion");
    let out = std::fs::read_dir(&base)
        .unwrap()
        .next()
        .unwrap()
        .unwrap()
        .path();
    for f in ["curves.csv", "la.png", "tp.png", "wp.png"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let csv = out.join("curves.csv");
    let replot = dir.path().join("replot");
    let o = cromo(
        &[
            "plot",
            "--curves",
            csv.to_str().unwrap(),
            "--out",
            replot.to_str().unwrap(),
        ],
        dir.path(),
    );
    assert!(o.status.success());
    assert!(replot.join("la.png").exists());
}

#[test]
fn presets_are_listed() {
    let dir = tempfile::tempdir().unwrap();
    let o = cromo(&["presets"], dir.path());
    let out = stdout(&o);
    assert!(out.lines().any(|l| l == "toy"));
    assert!(out.lines().any(|l| l == "cifar100_split5_barlow_cromo"));
}
