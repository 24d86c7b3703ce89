use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use flatsim::ArchConfig;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_flatsim"))
}

fn repo_configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn small_arch_file(dir: &Path) -> PathBuf {
    let mut a = ArchConfig::reference();
    a.noc.mesh_x = 4;
    a.noc.mesh_y = 4;
    a.hbm.num_channels = 4;
    let p = dir.join("small.toml");
    std::fs::write(&p, a.to_toml_string()).unwrap();
    p
}

fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, body).unwrap();
    p
}

const SMALL_GRID: &str = r#"
name = "small"
output = "out.csv"
[arch]
file = "small.toml"
[grid]
seq_len = [64, 128]
head_dim = [16]
heads = [2]
batch = [1]
dataflows = ["fa2", "fa3", "flat_sc", "flat_tc", "flat_hc", "flat_async"]
fa_block = 32
[tiling.manual]
slice_r = 16
slice_c = 16
gx = 4
gy = 4
"#;

#[test]
fn attention_grid_config_gives_36_rows() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("grid.csv");
    let cfg = repo_configs().join("attention_grid.toml");
    let o = run(&["sweep", cfg.to_str().unwrap(), "-o", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(out).unwrap();
    let mut lines = text.lines();
    let header = lines.next().unwrap();
    assert!(header.starts_with("schema_version,experiment,grid_index"));
    assert_eq!(lines.filter(|l| l.contains(",ok,")).count(), 36);
}

#[test]
fn sweep_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    small_arch_file(dir.path());
    let cfg = write(dir.path(), "exp.toml", SMALL_GRID);
    let mut outputs = Vec::new();
    for name in ["a.csv", "b.csv"] {
        let out = dir.path().join(name);
        let o = run(&["sweep", cfg.to_str().unwrap(), "--output", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        outputs.push(std::fs::read(out).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);
    assert_eq!(String::from_utf8_lossy(&outputs[0]).lines().count(), 13);
}

#[test]
fn output_path_in_config_is_relative_to_it() {
    let dir = tempfile::tempdir().unwrap();
    small_arch_file(dir.path());
    let cfg = write(dir.path(), "exp.toml", SMALL_GRID);
    assert!(run(&["sweep", cfg.to_str().unwrap()]).status.success());
    assert!(dir.path().join("out.csv").exists());
}

#[test]
fn empty_grid_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    small_arch_file(dir.path());
    let cfg = write(dir.path(), "exp.toml", &SMALL_GRID.replace("seq_len = [64, 128]", "seq_len = []"));
    let o = run(&["sweep", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("grids non-empty"));
}

#[test]
fn missing_or_malformed_configs_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(&["sweep", dir.path().join("nope.toml").to_str().unwrap()]).status.code(), Some(1));
    let cfg = write(dir.path(), "exp.toml", SMALL_GRID);
    // small.toml was never written.
    assert_eq!(run(&["sweep", cfg.to_str().unwrap()]).status.code(), Some(1));
    let cfg = write(dir.path(), "bad.toml", "name = 3");
    assert_eq!(run(&["simulate", cfg.to_str().unwrap()]).status.code(), Some(1));
}

#[test]
fn failing_point_is_logged_and_run_continues() {
    let dir = tempfile::tempdir().unwrap();
    small_arch_file(dir.path());
    // An 8x8 group does not fit the 4x4 mesh, so every Flat row fails.
    let cfg = write(dir.path(), "exp.toml", &SMALL_GRID.replace("gx = 4\ngy = 4", "gx = 8\ngy = 8"));
    let out = dir.path().join("o.csv");
    let o = run(&["sweep", cfg.to_str().unwrap(), "-o", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let text = std::fs::read_to_string(out).unwrap();
    assert_eq!(text.lines().filter(|l| l.contains(",ok,")).count(), 4);
    assert_eq!(text.lines().filter(|l| l.contains(",error,")).count(), 8);
}

#[test]
fn simulate_rejects_multi_point_grids() {
    let dir = tempfile::tempdir().unwrap();
    small_arch_file(dir.path());
    let cfg = write(dir.path(), "exp.toml", SMALL_GRID);
    assert_eq!(run(&["simulate", cfg.to_str().unwrap()]).status.code(), Some(1));
    let one = SMALL_GRID.replace("seq_len = [64, 128]", "seq_len = [64]").replace(
        r#"dataflows = ["fa2", "fa3", "flat_sc", "flat_tc", "flat_hc", "flat_async"]"#,
        r#"dataflows = ["flat_hc"]"#,
    );
    let cfg = write(dir.path(), "one.toml", &one);
    let out = dir.path().join("one.csv");
    let o = run(&["simulate", cfg.to_str().unwrap(), "-o", out.to_str().unwrap()]);
    assert!(o.status.success());
    assert_eq!(std::fs::read_to_string(out).unwrap().lines().count(), 2);
}

#[test]
fn functional_mode_reports_error_column() {
    let dir = tempfile::tempdir().unwrap();
    small_arch_file(dir.path());
    let body = SMALL_GRID.replace("output = \"out.csv\"", "output = \"f.jsonl\"\nformat = \"jsonl\"\nmode = \"functional\"");
    let cfg = write(dir.path(), "exp.toml", &body);
    assert!(run(&["sweep", cfg.to_str().unwrap()]).status.success());
    let text = std::fs::read_to_string(dir.path().join("f.jsonl")).unwrap();
    assert_eq!(text.lines().count(), 12);
    for line in text.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        let err: f64 = v["max_rel_err"].as_str().unwrap().parse().unwrap();
        assert!(err <= 1e-6, "{line}");
    }
}

#[test]
fn autotune_prints_128_slices_for_reference() {
    let cfg = repo_configs().join("autotune.toml");
    let o = run(&["autotune", cfg.to_str().unwrap()]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    let d128: Vec<_> = text.lines().filter(|l| l.contains(",128,2,true,")).collect();
    assert_eq!(d128.len(), 2);
    assert!(d128.iter().all(|l| l.contains(",true,128,128,")));
}

#[test]
fn validate_default_suite_passes() {
    let cfg = repo_configs().join("validate.toml");
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("v.csv");
    let o = run(&["validate", cfg.to_str().unwrap(), "-o", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(out).unwrap();
    assert!(text.lines().skip(1).all(|l| l.ends_with(",true")));
    assert!(text.contains("/S1/"));
}

#[test]
fn wafer_rows_per_plan_batch_and_dataflow() {
    let dir = tempfile::tempdir().unwrap();
    let mut chip = ArchConfig::reference_fp8();
    chip.noc.mesh_x = 8;
    chip.noc.mesh_y = 8;
    chip.hbm.num_channels = 8;
    std::fs::write(dir.path().join("chip.toml"), chip.to_toml_string()).unwrap();
    let body = r#"
name = "tiny"
output = "w.csv"
[arch]
file = "chip.toml"
[wafer]
chips_x = 4
chips_y = 4
d2d_bandwidth = 1.0e12
d2d_latency = 256.0e-9
[plan]
ep_degree = [4, 8]
pp_degree = [2]
layers = 8
spec_len = 2
acceptance_rate = 0.7
routing_seed = 3
[sweep]
batch = [8, 32]
dataflows = ["flat", "flashmla"]
[layer]
d_model = 512
heads = 32
q_rank = 128
kv_rank = 96
rope_dim = 32
nope_dim = 32
v_head_dim = 32
routed_experts = 64
shared_experts = 1
top_k = 4
expert_inter = 128
kv_len = 512
"#;
    let cfg = write(dir.path(), "w.toml", body);
    let o = run(&["wafer", cfg.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(dir.path().join("w.csv")).unwrap();
    assert_eq!(text.lines().count(), 1 + 2 * 2 * 2);
    assert!(text.lines().skip(1).all(|l| l.contains(",ok,")));
}
