//! End-to-end checks of the command-line interface: subcommands, exit
//! codes, and the run-directory layout.

use std::fs;
use std::path::Path;
use std::process::Command;

fn vaepca() -> Command {
    Command::new(env!("CARGO_BIN_EXE_vaepca"))
}

fn tiny_config_toml() -> String {
    r#"
name = "cli_tiny"
beta = 0.001
epochs = 2
batch_size = 32
seeds = [0, 1]
eval_every = 4

[dataset]
kind = "linear"
seed = 5
ratio = 2.0
samples = 400

[model]
kind = "beta_vae"
latent_dim = 2
encoder_hidden = []
decoder_hidden = []
hidden_activation = "linear"

[optimizer]
kind = "adam"
learning_rate = 0.01
"#
    .to_string()
}

#[test]
fn help_and_preset_configs() {
    let out = vaepca().arg("--help").output().unwrap();
    assert!(out.status.success());
    let help = String::from_utf8_lossy(&out.stdout);
    for sub in ["generate", "train", "metrics", "sweep-beta", "theory-check", "report"] {
        assert!(help.contains(sub), "missing subcommand {sub} in help");
    }

    for preset in ["synth-lin", "synth-nonlin"] {
        let out = vaepca().args(["show-config", preset]).output().unwrap();
        assert!(out.status.success());
        let text = String::from_utf8_lossy(&out.stdout);
        vaepca::experiment::ExperimentConfig::from_toml(&text).expect("preset TOML parses");
    }
}

#[test]
fn bad_config_exits_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("bad.toml");
    fs::write(&cfg_path, tiny_config_toml().replace("beta = 0.001", "beta = -3.0")).unwrap();
    let out = vaepca()
        .args(["generate", "--config"])
        .arg(&cfg_path)
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2), "stderr: {}", String::from_utf8_lossy(&out.stderr));

    // missing config entirely is also a config error
    let out = vaepca().args(["train", "--out"]).arg(dir.path()).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn train_before_generate_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("cfg.toml");
    fs::write(&cfg_path, tiny_config_toml()).unwrap();
    let out = vaepca()
        .args(["train", "--config"])
        .arg(&cfg_path)
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("generate"));
}

#[test]
fn full_cli_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("cfg.toml");
    fs::write(&cfg_path, tiny_config_toml()).unwrap();

    let run = |args: &[&str]| {
        let out = vaepca()
            .args(args)
            .arg("--config")
            .arg(&cfg_path)
            .arg("--out")
            .arg(dir.path())
            .output()
            .unwrap();
        assert!(
            out.status.success(),
            "{args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8_lossy(&out.stdout).into_owned()
    };

    run(&["generate"]);
    // re-generate without --overwrite refuses with exit 1
    let out = vaepca()
        .args(["generate", "--config"])
        .arg(&cfg_path)
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    run(&["generate", "--overwrite"]);

    let stdout = run(&["train", "--jobs", "2"]);
    assert!(stdout.contains("seed   0: ok"), "stdout: {stdout}");

    for seed in ["0", "1"] {
        let rd = dir.path().join("runs/cli_tiny").join(seed);
        for f in ["model.txt", "trace.csv", "metrics.json"] {
            assert!(rd.join(f).exists(), "missing {f} for seed {seed}");
        }
    }
    assert!(dir.path().join("runs/cli_tiny/summary.json").exists());
    assert!(dir.path().join("runs/cli_tiny/summary.csv").exists());

    // seed-list override trains only the listed seed
    let out = vaepca()
        .args(["train", "--seed-list", "7", "--config"])
        .arg(&cfg_path)
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(dir.path().join("runs/cli_tiny/7/model.txt").exists());

    run(&["metrics"]);

    let out = vaepca().args(["report", "--out"]).arg(dir.path()).output().unwrap();
    assert!(out.status.success());
    let report = String::from_utf8_lossy(&out.stdout);
    assert!(report.contains("cli_tiny"));
    assert!(Path::new(&dir.path().join("report.txt")).exists());
}

#[test]
fn sweep_and_theory_check() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("cfg.toml");
    fs::write(&cfg_path, tiny_config_toml().replace("seeds = [0, 1]", "seeds = [0]")).unwrap();

    let out = vaepca()
        .args(["generate", "--config"])
        .arg(&cfg_path)
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(out.status.success());

    let out = vaepca()
        .args(["sweep-beta", "--betas", "0.0001,0.001", "--jobs", "2", "--config"])
        .arg(&cfg_path)
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let sweep_dir = dir.path().join("runs/cli_tiny_beta_sweep");
    assert!(sweep_dir.join("sweep.json").exists());
    assert!(sweep_dir.join("beta_disent.dat").exists());

    let out = vaepca()
        .args(["theory-check", "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("[PASS]"));
    assert!(!stdout.contains("[FAIL]"));
    assert!(dir.path().join("certificates/isolated_problem.json").exists());
}
