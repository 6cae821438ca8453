//! Black-box tests of the `lcflow` binary: exit codes, the full
//! artifact pipeline, and plan determinism.

use std::path::Path;
use std::process::Output;

fn lcflow(args: &[&str]) -> Output {
    std::process::Command::new(env!("CARGO_BIN_EXE_lcflow"))
        .args(args)
        .output()
        .expect("failed to launch lcflow")
}

fn assert_code(out: &Output, code: i32, what: &str) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "{what}: expected exit {code}\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn write_config(dir: &Path, extra: &str) -> String {
    let path = dir.join("tiny.cfg");
    let base = "epochs = 2\npretrain-epochs = 1\nbatch-size = 32\nscales = 2\n\
                couplings-per-scale = 1\nhidden = 8\nseed = 0\n";
    std::fs::write(&path, format!("{base}{extra}")).unwrap();
    path.display().to_string()
}

#[test]
fn usage_errors_exit_2() {
    assert_code(&lcflow(&[]), 2, "no subcommand");
    assert_code(&lcflow(&["--bogus"]), 2, "unknown flag");
    assert_code(&lcflow(&["train", "--data", "x.fft1"]), 2, "missing required args");
    assert_code(&lcflow(&["--help"]), 0, "help");
}

#[test]
fn unknown_strategy_exits_2_missing_file_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.fft1");
    let gen = lcflow(&["gen-data", "--out", data.to_str().unwrap(), "--n", "20", "--size", "4"]);
    assert_code(&gen, 0, "gen-data");

    let out = dir.path().join("plans");
    let bad_strategy = lcflow(&[
        "plan", "--strategy", "bogus", "--data", data.to_str().unwrap(),
        "--out", out.to_str().unwrap(),
    ]);
    assert_code(&bad_strategy, 2, "unknown strategy");

    // lcma without a pretrained model is a usage error too
    let no_model = lcflow(&[
        "plan", "--strategy", "lcma", "--data", data.to_str().unwrap(),
        "--out", out.to_str().unwrap(),
    ]);
    assert_code(&no_model, 2, "lcma without --model");

    let missing = lcflow(&["eval", "--model", "nope.ffm1", "--data", data.to_str().unwrap()]);
    assert_code(&missing, 1, "missing model file");
}

#[test]
fn full_pipeline_round_trips_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let data = dir.path().join("blobs.fft1");
    let data = data.to_str().unwrap();
    let out = dir.path().join("run");
    let out_s = out.to_str().unwrap();

    let gen = lcflow(&[
        "gen-data", "--out", data, "--n", "80", "--size", "4", "--seed", "3",
    ]);
    assert_code(&gen, 0, "gen-data");
    assert!(dir.path().join("blobs.fft1.meta").exists(), "metadata sidecar missing");

    let pre = lcflow(&["pretrain", "--config", &cfg, "--data", data, "--out", out_s]);
    assert_code(&pre, 0, "pretrain");
    assert!(out.join("pretrain.ffm1").exists());
    assert!(out.join("boundary-maps.fft1").exists());

    let plan = lcflow(&[
        "plan", "--config", &cfg, "--strategy", "lcma", "--data", data,
        "--model", out.join("pretrain.ffm1").to_str().unwrap(), "--out", out_s,
    ]);
    assert_code(&plan, 0, "plan lcma");
    let plan_path = out.join("plan-lcma-seed0.ffplan");
    assert!(plan_path.exists());

    let train = lcflow(&[
        "train", "--config", &cfg, "--data", data,
        "--plan", plan_path.to_str().unwrap(), "--out", out_s,
    ]);
    assert_code(&train, 0, "train");
    assert!(out.join("model.ffm1").exists());
    let metrics = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("epoch,split,bits_per_dim,seconds"));

    let model = out.join("model.ffm1");
    let eval = lcflow(&["eval", "--config", &cfg, "--model", model.to_str().unwrap(), "--data", data]);
    assert_code(&eval, 0, "eval");
    let stdout = String::from_utf8_lossy(&eval.stdout).to_string();
    assert!(stdout.contains("train_bpd="), "eval stdout: {stdout}");
    assert!(stdout.contains("valid_bpd="), "eval stdout: {stdout}");

    let samples = out.join("samples.pgm");
    let s = lcflow(&[
        "sample", "--config", &cfg, "--model", model.to_str().unwrap(),
        "--n", "4", "--out", samples.to_str().unwrap(),
    ]);
    assert_code(&s, 0, "sample");
    let bytes = std::fs::read(&samples).unwrap();
    assert!(bytes.starts_with(b"P5\n"), "samples must be a PGM grid");

    let interp = out.join("interp.pgm");
    let i = lcflow(&[
        "interpolate", "--config", &cfg, "--model", model.to_str().unwrap(),
        "--data", data, "--steps", "4", "--out", interp.to_str().unwrap(),
    ]);
    assert_code(&i, 0, "interpolate");
    assert!(std::fs::read(&interp).unwrap().starts_with(b"P5\n"));
}

#[test]
fn random_plan_with_same_seed_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.fft1");
    let data = data.to_str().unwrap();
    assert_code(
        &lcflow(&["gen-data", "--out", data, "--n", "20", "--size", "4"]),
        0,
        "gen-data",
    );
    for sub in ["a", "b"] {
        let out = dir.path().join(sub);
        let p = lcflow(&[
            "plan", "--strategy", "random", "--seed", "7", "--data", data,
            "--out", out.to_str().unwrap(),
        ]);
        assert_code(&p, 0, "plan random");
    }
    let read = |sub: &str| std::fs::read(dir.path().join(sub).join("plan-random-seed7.ffplan"));
    let (a, b) = (read("a").unwrap(), read("b").unwrap());
    assert!(!a.is_empty());
    assert_eq!(a, b, "same seed must produce byte-identical plan files");
}

#[test]
fn ablate_writes_per_seed_rows_for_all_strategies() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let data = dir.path().join("d.fft1");
    let data = data.to_str().unwrap();
    assert_code(
        &lcflow(&["gen-data", "--out", data, "--n", "80", "--size", "4"]),
        0,
        "gen-data",
    );
    let out = dir.path().join("abl");
    let abl = lcflow(&[
        "ablate", "--config", &cfg, "--data", data, "--seeds", "2",
        "--out", out.to_str().unwrap(),
    ]);
    assert_code(&abl, 0, "ablate");

    let csv = std::fs::read_to_string(out.join("ablation.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "strategy,seed,final_valid_bpd");
    assert_eq!(lines.len(), 1 + 4 * 2, "one row per strategy × seed");
    for tag in ["lcma", "static-realnvp", "random", "reverse-lcma"] {
        assert_eq!(lines.iter().filter(|l| l.starts_with(&format!("{tag},"))).count(), 2);
        assert!(
            out.join(format!("plan-{tag}-seed0.ffplan")).exists()
                && out.join(format!("plan-{tag}-seed1.ffplan")).exists(),
            "missing plan files for {tag}"
        );
    }
    let stdout = String::from_utf8_lossy(&abl.stdout).to_string();
    assert!(stdout.contains("strategy"), "summary table missing: {stdout}");
}

#[test]
fn diverging_run_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "learning-rate = 1e200\nepochs = 1\n");
    let data = dir.path().join("d.fft1");
    let data = data.to_str().unwrap();
    assert_code(
        &lcflow(&["gen-data", "--out", data, "--n", "80", "--size", "4"]),
        0,
        "gen-data",
    );
    let out = dir.path().join("run");
    let out_s = out.to_str().unwrap();
    assert_code(
        &lcflow(&[
            "plan", "--config", &cfg, "--strategy", "static-realnvp",
            "--data", data, "--out", out_s,
        ]),
        0,
        "plan static",
    );
    let train = lcflow(&[
        "train", "--config", &cfg, "--data", data,
        "--plan", out.join("plan-static-realnvp-seed0.ffplan").to_str().unwrap(),
        "--out", out_s,
    ]);
    assert_code(&train, 3, "diverging train");
    let stderr = String::from_utf8_lossy(&train.stderr).to_string();
    assert!(stderr.contains("diverged"), "stderr should report divergence: {stderr}");
}
