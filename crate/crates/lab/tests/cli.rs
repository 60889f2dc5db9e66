use std::path::Path;
use std::process::Command;

const BIN: &str = env!("CARGO_BIN_EXE_vgrpo-lab");

const TINY: &str = r#"
seed = 3
[model]
hidden = [16, 16]
[pretrain]
steps = 40
batch_size = 32
log_every = 10
eval_samples = 64
eval_steps = 4
[eval]
conditions = 4
samples = 4
steps = 4
oracle_n_mc = 200
oracle_points = 20
[grpo]
iterations = 3
prompts_per_batch = 2
group_size = 4
[sampler]
steps = 4
[surrogate]
grid_steps = 8
"#;

fn write_config(dir: &Path, text: &str) -> std::path::PathBuf {
    let p = dir.join("run.toml");
    std::fs::write(&p, text).unwrap();
    p
}

fn lab(args: &[&str]) -> std::process::Output {
    Command::new(BIN)
        .args(args)
        .env_remove("VGRPO_LAB_OUT")
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn pipeline_writes_every_artifact() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), TINY);
    let out = tmp.path().join("run");
    for cmd in ["pretrain", "posttrain"] {
        let o = lab(&[cmd, "--config", s(&cfg), "--out", s(&out)]);
        assert!(o.status.success(), "{cmd}: {}", String::from_utf8_lossy(&o.stderr));
        for f in ["config.toml", "metrics.csv", "final.ckpt", "summary.json"] {
            assert!(out.join(cmd).join(f).exists(), "{cmd}/{f} missing");
        }
    }
    assert!(out.join("posttrain").join("stage0_main.ckpt").exists());
    let metrics = std::fs::read_to_string(out.join("posttrain").join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 4);
    assert!(metrics.ends_with('\n'));

    let o = lab(&["eval", "--config", s(&cfg), "--out", s(&out), "--oracle"]);
    assert!(o.status.success(), "eval: {}", String::from_utf8_lossy(&o.stderr));
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("eval").join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["oracle"]["passed"], true);
    assert!(summary["heldout"][0][1]["score"].is_number());
}

#[test]
fn same_seed_gives_identical_files() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), TINY);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for out in [&a, &b] {
        for cmd in ["pretrain", "posttrain"] {
            assert!(lab(&[cmd, "--config", s(&cfg), "--out", s(out)]).status.success());
        }
    }
    for f in ["pretrain/metrics.csv", "pretrain/final.ckpt", "posttrain/metrics.csv", "posttrain/final.ckpt"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f} differs");
    }
    let c = tmp.path().join("c");
    assert!(lab(&["pretrain", "--config", s(&cfg), "--out", s(&c), "--seed", "4"]).status.success());
    assert_ne!(
        std::fs::read(a.join("pretrain/final.ckpt")).unwrap(),
        std::fs::read(c.join("pretrain/final.ckpt")).unwrap()
    );
}

#[test]
fn zero_iterations_keep_the_input_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &TINY.replace("iterations = 3", "iterations = 0"));
    let out = tmp.path().join("run");
    assert!(lab(&["pretrain", "--config", s(&cfg), "--out", s(&out)]).status.success());
    let o = lab(&["posttrain", "--config", s(&cfg), "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let metrics = std::fs::read_to_string(out.join("posttrain/metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 1);
    assert!(metrics.starts_with("iteration,stage,"));
    assert_eq!(
        std::fs::read(out.join("pretrain/final.ckpt")).unwrap(),
        std::fs::read(out.join("posttrain/final.ckpt")).unwrap()
    );
}

#[test]
fn config_errors_exit_with_2_and_name_the_field() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "[grpo]\ngroup_size = \"twelve\"\n");
    let o = lab(&["pretrain", "--config", s(&cfg), "--out", s(tmp.path())]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("group_size"));

    let cfg = write_config(tmp.path(), "[grpo]\ngroup_size = 1\n");
    assert_eq!(lab(&["posttrain", "--config", s(&cfg), "--out", s(tmp.path())]).status.code(), Some(2));

    let missing = tmp.path().join("nope.toml");
    assert_eq!(lab(&["pretrain", "--config", s(&missing)]).status.code(), Some(2));

    // resuming from a checkpoint that does not exist
    let cfg = write_config(tmp.path(), TINY);
    let o = lab(&["posttrain", "--config", s(&cfg), "--out", s(tmp.path()), "--resume", s(&missing)]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn non_finite_checkpoint_exits_with_3() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), TINY);
    let out = tmp.path().join("run");
    assert!(lab(&["pretrain", "--config", s(&cfg), "--out", s(&out)]).status.success());
    let mut bytes = std::fs::read(out.join("pretrain/final.ckpt")).unwrap();
    // first payload value follows the manifest line
    let nl = bytes.iter().position(|&b| b == b'\n').unwrap();
    bytes[nl + 1..nl + 9].copy_from_slice(&f64::NAN.to_le_bytes());
    let bad = tmp.path().join("bad.ckpt");
    std::fs::write(&bad, bytes).unwrap();
    let o = lab(&["posttrain", "--config", s(&cfg), "--out", s(&out), "--resume", s(&bad)]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn environment_overrides_only_the_output_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), TINY);
    let env_out = tmp.path().join("from_env");
    let o = Command::new(BIN)
        .args(["pretrain", "--config", s(&cfg)])
        .env("VGRPO_LAB_OUT", &env_out)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    assert!(o.status.success());
    let snap = std::fs::read_to_string(env_out.join("pretrain/config.toml")).unwrap();
    assert!(snap.contains("seed = 3"));

    // --out wins over the environment
    let flag_out = tmp.path().join("from_flag");
    let o = Command::new(BIN)
        .args(["pretrain", "--config", s(&cfg), "--out", s(&flag_out)])
        .env("VGRPO_LAB_OUT", &env_out)
        .output()
        .unwrap();
    assert!(o.status.success());
    assert!(flag_out.join("pretrain/final.ckpt").exists());
}

#[test]
fn ablate_grid_writes_one_directory_per_variant() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), TINY);
    let out = tmp.path().join("run");
    assert!(lab(&["pretrain", "--config", s(&cfg), "--out", s(&out)]).status.success());
    let o = lab(&["ablate", "--config", s(&cfg), "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let dir = out.join("ablate");
    let mut metrics = 0;
    for v in ["shared-on_stratified-on", "shared-on_stratified-off", "shared-off_stratified-on", "shared-off_stratified-off"] {
        assert!(dir.join(v).join("seed3/metrics.csv").exists(), "{v}");
        metrics += 1;
    }
    assert_eq!(metrics, 4);
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["variants"].as_array().unwrap().len(), 4);
}
