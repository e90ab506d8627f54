use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_imc-snn"))
}

#[test]
fn selftest_passes_every_check() {
    let tmp = tempfile::tempdir().unwrap();
    let out = bin().args(["selftest", "--dir"]).arg(tmp.path()).output().unwrap();
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(out.status.success(), "{text}\n{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(text.lines().filter(|l| l.starts_with("PASS")).count(), 4, "{text}");
}

#[test]
fn flags_override_the_config_file() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("exp.toml");
    std::fs::write(
        &cfg,
        "schema_version = 1\narchitecture = \"6-16-6\"\n[synthetic]\nsamples = 300\n[pretrain]\nepochs = 3\n[noise]\nsamples = 300\nfit_iterations = 10\n",
    )
    .unwrap();
    let run = tmp.path().join("run");
    let out = bin()
        .args(["adapt", "--config"])
        .arg(&cfg)
        .args(["--mode", "bp", "--epochs", "1", "--seed", "3", "--out"])
        .arg(&run)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let resolved = std::fs::read_to_string(run.join("resolved_config.toml")).unwrap();
    assert!(resolved.contains("seed = 3"));
    assert!(resolved.contains("mode = \"bp\""), "{resolved}");
}

#[test]
fn bad_config_reports_an_error_and_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.toml");
    std::fs::write(&cfg, "schema_version = 1\nunknown_key = 4\n").unwrap();
    let out = bin().args(["adapt", "--config"]).arg(&cfg).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error: "));
}
