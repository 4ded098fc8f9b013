use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
synthetic_steps = 400
d_f = 2
d_a = 4
llm_layers = 1
llm_heads = 2
epochs = 2
denoiser_train_steps = 50
ddim_steps = 5
missing_ratio = 0.01
sweep_grid = [0.0, 0.01]
"#;

fn stllm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stllm")).args(args).output().expect("binary runs")
}

fn write_config(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

fn run_ok(cmd: &str, cfg: &str, out: &Path) -> String {
    let o = stllm(&[cmd, "--config", cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{cmd}: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

#[test]
fn full_pipeline_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run.toml", TINY);
    let out = dir.path().join("out");
    assert!(run_ok("prepare", &cfg, &out).starts_with("Built"));
    assert!(run_ok("prepare", &cfg, &out).starts_with("Hit"));
    run_ok("train-denoiser", &cfg, &out);
    run_ok("train", &cfg, &out);
    let eval = run_ok("eval", &cfg, &out);
    assert!(eval.contains("\"mae\"") && eval.contains("HI baseline MAE"));
    let sweep = run_ok("sweep-missing", &cfg, &out);
    assert_eq!(sweep.lines().count(), 3);
    for f in ["metrics.json", "per_horizon.csv", "baseline_metrics.json", "sweep.csv", "predictions.stdf", "train_curve.csv", "denoiser_curve.csv", "run.log"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    let log = std::fs::read_to_string(out.join("run.log")).unwrap();
    assert!(log.contains("[train] epoch 1:") && log.contains("[eval]"));

    let changed = write_config(dir.path(), "changed.toml", &format!("{TINY}input_len = 6\nhorizons = [2, 5]\n"));
    assert!(run_ok("prepare", &changed, &out).starts_with("Built"));
}

#[test]
fn eval_refuses_a_bundle_from_another_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "a.toml", &format!("{TINY}enable_denoise = false\n"));
    let out = dir.path().join("out");
    run_ok("train", &cfg, &out);
    let other = write_config(dir.path(), "b.toml", &format!("{TINY}enable_denoise = false\nlr = 0.01\n"));
    let o = stllm(&["eval", "--config", &other, "--out", out.to_str().unwrap()]);
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("hash"), "{err}");
    // both hashes are printed in full
    assert_eq!(err.matches(|c: char| c.is_ascii_hexdigit()).count() >= 128, true, "{err}");

    // the seed is not part of the config hash
    let o = stllm(&["eval", "--config", &cfg, "--seed", "9", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let metrics = std::fs::read_to_string(out.join("metrics.json")).unwrap();
    assert!(metrics.contains("\"seed\": 9"));
}

#[test]
fn training_with_denoise_requires_a_denoiser_bundle() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run.toml", TINY);
    let o = stllm(&["train", "--config", &cfg, "--out", dir.path().join("out").to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("train-denoiser"));
}

#[test]
fn bad_configs_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    for (name, text) in [("unknown.toml", "no_such_key = 1\n"), ("grid.toml", "sweep_grid = [0.0, 2.0]\n")] {
        let cfg = write_config(dir.path(), name, text);
        let o = stllm(&["prepare", "--config", &cfg, "--out", out.to_str().unwrap()]);
        assert!(!o.status.success(), "{name}");
        assert!(String::from_utf8_lossy(&o.stderr).contains("configuration"), "{name}");
    }
    let o = stllm(&["prepare", "--config", "/nonexistent.toml", "--out", out.to_str().unwrap()]);
    assert!(!o.status.success());
}

#[test]
fn gradcheck_names_an_injected_fault_and_fails() {
    let dir = tempfile::tempdir().unwrap();
    let o = stllm(&["gradcheck", "--inject-fault", "rmsnorm", "--out", dir.path().to_str().unwrap()]);
    assert!(!o.status.success());
    let stdout = String::from_utf8_lossy(&o.stdout);
    let failing: Vec<&str> = stdout.lines().filter(|l| l.ends_with("FAIL")).collect();
    assert!(failing.iter().any(|l| l.starts_with("op:rmsnorm")), "{stdout}");
    assert!(!failing.iter().any(|l| l.starts_with("op:") && !l.starts_with("op:rmsnorm")), "{stdout}");
    assert!(String::from_utf8_lossy(&o.stderr).contains("op:rmsnorm"));
}
