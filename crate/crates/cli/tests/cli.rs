use std::path::Path;
use std::process::{Command, Output};

const SMALL: &[&str] = &[
    "base.dataset_size=96",
    "base.steps=60",
    "base.batch=4",
    "curation.prompts=10",
    "curation.samples_per_prompt=3",
    "model.sampler_steps=5",
    "lora.steps=10",
    "lora.batch=4",
    "router.steps=5",
    "router.batch=2",
    "eval.prompts=3",
    "eval.seeds=2",
    "eval.gate_seeds=1",
];

fn aspectmix(out: &Path, extra: &[&str], args: &[&str]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_aspectmix"));
    cmd.arg("--out").arg(out);
    for s in SMALL.iter().chain(extra) {
        cmd.arg("--set").arg(s);
    }
    cmd.args(args)
        .env_remove("ASPECTMIX_OUT")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn init_config_prints_a_loadable_config() {
    let o = Command::new(env!("CARGO_BIN_EXE_aspectmix"))
        .arg("init-config")
        .output()
        .unwrap();
    assert!(o.status.success());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.toml");
    std::fs::write(&path, &o.stdout).unwrap();
    let parsed = aspectmix(dir.path(), &[], &["--config", path.to_str().unwrap(), "train-base"]);
    assert!(parsed.status.success(), "{}", String::from_utf8_lossy(&parsed.stderr));
}

#[test]
fn stages_chain_through_the_output_directory() {
    let dir = tempfile::tempdir().unwrap();
    for stage in ["train-base", "curate", "finetune", "compose"] {
        let o = aspectmix(dir.path(), &[], &[stage]);
        assert!(o.status.success(), "{stage}: {}", String::from_utf8_lossy(&o.stderr));
    }
    let report = aspectmix(dir.path(), &[], &["report"]);
    assert!(report.status.success());
    assert!(stdout(&report).contains("balance_weight"));
    let eval = aspectmix(dir.path(), &[], &["eval"]);
    assert!(eval.status.success());
    let table = stdout(&eval);
    for variant in ["base", "lora/aesthetics", "merge", "mol", "mol_balance0"] {
        assert!(
            table.lines().any(|l| l.starts_with(variant)),
            "no {variant} row in\n{table}"
        );
    }
}

#[test]
fn config_errors_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(
        aspectmix(dir.path(), &["router.balance_weight=-1"], &["run"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        aspectmix(dir.path(), &["no_such_key=1"], &["run"]).status.code(),
        Some(2)
    );
    assert_eq!(aspectmix(dir.path(), &[], &["compose"]).status.code(), Some(2));
}

#[test]
fn divergence_exits_with_3() {
    let dir = tempfile::tempdir().unwrap();
    let o = aspectmix(dir.path(), &["base.lr=1e300", "base.clip=0.0"], &["train-base"]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn strict_empty_manifest_exits_with_4() {
    let dir = tempfile::tempdir().unwrap();
    let strict = ["thresholds.geometry={ mode = \"absolute\", value = 1.0 }"];
    assert!(aspectmix(dir.path(), &strict, &["train-base"]).status.success());
    let o = aspectmix(dir.path(), &strict, &["--strict", "curate"]);
    assert_eq!(o.status.code(), Some(4), "{}", String::from_utf8_lossy(&o.stderr));
}
