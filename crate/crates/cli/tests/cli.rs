use std::path::Path;
use std::process::{Command, Output};

fn analogon(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_analogon"))
        .args(args)
        .env("ANALOGON_OUT_DIR", out)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const TINY: &str = r#"
env = "factorchain-3"
seeds = [0]

[dataset]
episodes = 12

[analogy]
d = 4
hidden = [8]
critic_hidden = [8]
batch_size = 16
steps = 20

[cta]
e = 3
b = 2
p = 2
eta_hidden = [6]
component_hidden = [6]
backbone_hidden = [4]
monolithic_hidden = [8]
batch_size = 8
steps = 20

[eval]
tasks = 3
rollouts = 2
every = 10
"#;

#[test]
fn verify_theory_passes_on_chains() {
    let dir = tempfile::tempdir().unwrap();
    let o = analogon(dir.path(), &["verify-theory", "--env", "factorchain-3"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let line = stdout(&o);
    assert!(line.contains("0 triangle violations"), "{line}");
    assert!(line.contains("0 closure violations"), "{line}");
    assert!(line.contains("field deviation 0"), "{line}");
    assert!(dir.path().join("verify-theory.json").exists());
}

#[test]
fn full_command_sequence_with_gates() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, TINY).unwrap();
    let c = cfg.to_str().unwrap();
    let out = dir.path().join("out");
    for cmd in ["gen-data", "train-analogy"] {
        let o = analogon(&out, &[cmd, "--config", c]);
        assert!(o.status.success(), "{cmd}: {}", String::from_utf8_lossy(&o.stderr));
    }
    let o = analogon(&out, &["train-cta", "--config", c, "--variant", "hiql-dual"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("cta-hiql-dual-s0/step-00000020.ckpt").exists());

    let o = analogon(&out, &["describe"]);
    assert!(o.status.success());
    let header: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(header["env_id"], "factorchain-3");
    assert_eq!(header["episodes"], 12);

    let pass = dir.path().join("pass.toml");
    std::fs::write(&pass, "[[gate]]\nname = \"ran\"\nmetric = \"success\"\nmin = 0.0\n").unwrap();
    let o = analogon(&out, &["eval", "--config", c, "--variant", "hiql-dual", "--gate", pass.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("gate ran"));

    let fail = dir.path().join("fail.toml");
    std::fs::write(&fail, "[[gate]]\nname = \"never\"\nmetric = \"direct\"\nmin = 2.0\n").unwrap();
    let o = analogon(&out, &["eval", "--config", c, "--variant", "hiql-dual", "--gate", fail.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));

    let o = analogon(&out, &["nn-probe", "--config", c, "--pairs", "50", "--top", "3"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("nn-probe-s0.csv").exists());
}

#[test]
fn missing_upstream_artifact_names_the_command() {
    let dir = tempfile::tempdir().unwrap();
    let o = analogon(dir.path(), &["train-analogy", "--env", "factorchain-3"]);
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("analogon gen-data"), "{err}");
}

#[test]
fn bad_config_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[cta]\nkappa = 2.0\n").unwrap();
    let o = analogon(dir.path(), &["gen-data", "--config", cfg.to_str().unwrap()]);
    assert!(!o.status.success());
    let o = analogon(dir.path(), &["train-cta", "--variant", "nope"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("nope"));
}

#[test]
fn seed_flag_and_output_flag_override_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, TINY).unwrap();
    let explicit = dir.path().join("explicit");
    let o = Command::new(env!("CARGO_BIN_EXE_analogon"))
        .args(["gen-data", "--config", cfg.to_str().unwrap(), "--seed", "9", "--jobs", "1", "--out"])
        .arg(&explicit)
        .env("ANALOGON_OUT_DIR", dir.path().join("ignored"))
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(explicit.join("dataset.bin").exists());
    assert!(!dir.path().join("ignored").exists());
}
