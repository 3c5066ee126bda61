use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const CONFIG: &str = r#"
output_dir = "run"

[dataset]
layout = "synthetic"
root = "data"
fraction = "1/4"
val_count = 4
test_count = 4

[prior]
batch_size = 4
epochs = 2
critic_steps = 2

[prior.generator]
latent_dim = 4
widths = [8, 4, 4, 4, 1]

[prior.discriminator]
widths = [4, 4, 4, 4, 1]

[model]
input_size = 64

[model.encoder]
depth = "tiny"
widths = [4, 4, 8, 8, 16]

[model.decoder]
widths = [8, 8, 8, 4, 4]

[trainer.optim]
init_lr = 0.01
epochs = 2
labeled_bs = 2
unlabeled_bs = 2
iters_per_epoch = 2

[trainer.augmentation]
resize_to = 72
crop_to = 64
"#;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_priorseg"));
    c.env("PRIORSEG_DETERMINISTIC", "1");
    c
}

fn run(args: &[&str], cwd: &Path) -> Output {
    bin().args(args).current_dir(cwd).output().unwrap()
}

fn ok(args: &[&str], cwd: &Path) -> Output {
    let out = run(args, cwd);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

/// A workspace with a 32-image synthetic dataset and the tiny config.
fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    ok(
        &[
            "synth-data",
            "--n",
            "32",
            "--canvas",
            "64",
            "--seed",
            "3",
            "--out",
            "data",
        ],
        dir.path(),
    );
    std::fs::write(dir.path().join("exp.toml"), CONFIG).unwrap();
    dir
}

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(
                    p.strip_prefix(root).unwrap().to_path_buf(),
                    std::fs::read(&p).unwrap(),
                );
            }
        }
    }
    out
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["synth-data"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--out"));
    assert_eq!(run(&["no-such-command"], dir.path()).status.code(), Some(2));
    assert_eq!(
        run(
            &[
                "train-seg",
                "--config",
                "x.toml",
                "--no-dsr",
                "--labeled-only"
            ],
            dir.path()
        )
        .status
        .code(),
        Some(2)
    );
    assert_eq!(
        run(
            &[
                "train-seg",
                "--config",
                "x.toml",
                "--resume",
                "a",
                "--epochs",
                "3"
            ],
            dir.path()
        )
        .status
        .code(),
        Some(2)
    );
    assert_eq!(run(&["--help"], dir.path()).status.code(), Some(0));
}

#[test]
fn synth_data_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    for out in ["a", "b"] {
        ok(
            &[
                "synth-data",
                "--n",
                "5",
                "--canvas",
                "64",
                "--seed",
                "1",
                "--out",
                out,
            ],
            dir.path(),
        );
    }
    let a = tree(&dir.path().join("a"));
    assert_eq!(a.len(), 11);
    assert_eq!(a, tree(&dir.path().join("b")));
    ok(
        &[
            "synth-data",
            "--n",
            "5",
            "--canvas",
            "64",
            "--seed",
            "2",
            "--out",
            "c",
        ],
        dir.path(),
    );
    assert_ne!(a, tree(&dir.path().join("c")));
}

#[test]
fn missing_inputs_are_runtime_errors() {
    let ws = workspace();
    let out = run(&["train-seg", "--config", "exp.toml"], ws.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("prior"));
    let out = run(&["train-seg", "--config", "missing.toml"], ws.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.toml"));
    std::fs::write(ws.path().join("bad.toml"), "[trainer]\nlearning_rate = 1\n").unwrap();
    let out = run(&["train-seg", "--config", "bad.toml"], ws.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));
}

#[test]
fn full_pipeline() {
    let ws = workspace();
    let p = ws.path();
    ok(&["train-prior", "--config", "exp.toml"], p);
    let run_dir = p.join("run");
    for f in [
        "run.json",
        "config.toml",
        "split.json",
        "checkpoints/prior.safetensors",
        "logs/prior_loss.csv",
    ] {
        assert!(run_dir.join(f).is_file(), "{f}");
    }
    assert_eq!(
        std::fs::read_to_string(run_dir.join("logs/prior_loss.csv"))
            .unwrap()
            .lines()
            .next()
            .unwrap(),
        "epoch,critic_loss,generator_loss,gp_term"
    );

    ok(&["train-seg", "--config", "exp.toml"], p);
    ok(&["train-seg", "--config", "exp.toml", "--no-dsr"], p);
    ok(&["train-seg", "--config", "exp.toml", "--labeled-only"], p);
    for arm in ["semi", "no_dsr", "labeled_only"] {
        for f in [
            format!("checkpoints/{arm}_best.safetensors"),
            format!("checkpoints/{arm}_latest.safetensors"),
            format!("logs/{arm}_iterations.csv"),
            format!("logs/{arm}_epochs.csv"),
            format!("logs/{arm}_events.jsonl"),
        ] {
            assert!(run_dir.join(&f).is_file(), "{f}");
        }
    }
    let column = |arm: &str, name: &str| -> Vec<f64> {
        let mut r =
            csv::Reader::from_path(run_dir.join(format!("logs/{arm}_iterations.csv"))).unwrap();
        let idx = r.headers().unwrap().iter().position(|h| h == name).unwrap();
        r.records()
            .map(|rec| rec.unwrap()[idx].parse().unwrap())
            .collect()
    };
    assert_eq!(column("semi", "l_u_dsr").len(), 4);
    assert!(column("semi", "l_u_dsr").iter().all(|v| *v != 0.0));
    assert!(column("no_dsr", "l_u_dsr").iter().all(|v| *v == 0.0));
    assert!(column("no_dsr", "l_u_ce").iter().all(|v| *v > 0.0));
    assert!(column("labeled_only", "l_u_ce").iter().all(|v| *v == 0.0));

    // Resuming a finished run changes nothing.
    let before = std::fs::read(run_dir.join("logs/semi_iterations.csv")).unwrap();
    ok(
        &[
            "train-seg",
            "--config",
            "exp.toml",
            "--resume",
            "run/checkpoints/semi_latest.safetensors",
        ],
        p,
    );
    assert_eq!(
        std::fs::read(run_dir.join("logs/semi_iterations.csv")).unwrap(),
        before
    );

    let out = ok(
        &[
            "evaluate",
            "--checkpoint",
            "run/checkpoints/semi_best.safetensors",
            "--config",
            "exp.toml",
        ],
        p,
    );
    assert!(String::from_utf8_lossy(&out.stdout).contains("Dice"));
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(run_dir.join("reports/report.json")).unwrap())
            .unwrap();
    assert_eq!(report["count"], 4);
    assert_eq!(report["fingerprint"]["inference_branch"], "prior");
    ok(
        &[
            "evaluate",
            "--checkpoint",
            "run/checkpoints/labeled_only_best.safetensors",
            "--data",
            "data",
            "--layout",
            "synthetic",
            "--format",
            "csv",
            "--out",
            "all.csv",
        ],
        p,
    );
    let csv_text = std::fs::read_to_string(p.join("all.csv")).unwrap();
    assert!(csv_text.starts_with("id,dice,iou\n"));
    assert_eq!(csv_text.lines().count(), 34);
    assert!(csv_text.lines().last().unwrap().starts_with("mean,"));

    let image = p.join("data/images/synth_00000.png");
    ok(
        &[
            "predict",
            "--checkpoint",
            "run/checkpoints/semi_best.safetensors",
            "--image",
            image.to_str().unwrap(),
            "--out",
            "pred/mask.png",
        ],
        p,
    );
    let mask = image::open(p.join("pred/mask.png")).unwrap().to_luma8();
    assert_eq!(mask.dimensions(), (64, 64));
    assert!(mask.pixels().all(|px| px.0[0] == 0 || px.0[0] == 255));

    std::fs::write(p.join("corrupt.png"), b"not a png").unwrap();
    let out = run(
        &[
            "predict",
            "--checkpoint",
            "run/checkpoints/semi_best.safetensors",
            "--image",
            "corrupt.png",
            "--out",
            "x.png",
        ],
        p,
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("corrupt.png"));
    let out = run(
        &[
            "evaluate",
            "--checkpoint",
            "nope.safetensors",
            "--config",
            "exp.toml",
        ],
        p,
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.safetensors"));
}

#[test]
fn training_commands_repeat_byte_for_byte() {
    let runs: Vec<tempfile::TempDir> = (0..2)
        .map(|_| {
            let ws = workspace();
            let p = ws.path();
            ok(&["train-prior", "--config", "exp.toml"], p);
            ok(&["train-seg", "--config", "exp.toml"], p);
            ok(
                &[
                    "evaluate",
                    "--checkpoint",
                    "run/checkpoints/semi_best.safetensors",
                    "--config",
                    "exp.toml",
                ],
                p,
            );
            ok(
                &[
                    "predict",
                    "--checkpoint",
                    "run/checkpoints/semi_best.safetensors",
                    "--image",
                    "data/images/synth_00001.png",
                    "--out",
                    "run/pred.png",
                ],
                p,
            );
            ws
        })
        .collect();
    let (a, b) = (tree(runs[0].path()), tree(runs[1].path()));
    assert_eq!(a.keys().collect::<Vec<_>>(), b.keys().collect::<Vec<_>>());
    for (k, v) in &a {
        assert!(v == &b[k], "{} differs", k.display());
    }
}
