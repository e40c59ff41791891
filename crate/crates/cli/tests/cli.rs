use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

#[path = "../src/config.rs"]
#[allow(dead_code)]
mod config;

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn spinsde(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spinsde"))
        .args(args)
        .env_remove("SPINSDE_OUT_DIR")
        .output()
        .unwrap()
}

fn text(o: &Output) -> String {
    format!("{}{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr))
}

fn write_config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    p
}

const CHAIN: &str = r#"
[lattice]
dims = [4]

[hamiltonian]
J = 1.0
gamma = 1.0
h = 0.5

[integrator]
scheme = "strong-order-1"
dt = 0.01
t_max = 0.4
record_every = 10

[sampling]
mode = "importance"
n_traj = 400
seed = 11
observables = ["norm", "mz", "mx:1"]

[output]
prefix = "chain"
"#;

#[test]
fn shipped_configs_resolve() {
    let mut n = 0;
    for entry in fs::read_dir(configs()).unwrap() {
        let path = entry.unwrap().path();
        let cfg = config::RunConfig::from_text(&fs::read_to_string(&path).unwrap()).unwrap();
        cfg.resolve().unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        n += 1;
    }
    assert!(n >= 5);
}

#[test]
fn simulate_is_reproducible_from_embedded_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run.toml", CHAIN);
    let first = dir.path().join("first");
    let o = spinsde(&["simulate", "--config", cfg.to_str().unwrap(), "--out", first.to_str().unwrap(), "--workers", "1"]);
    assert!(o.status.success(), "{}", text(&o));
    for stem in ["norm", "mz", "mx-1"] {
        assert!(first.join(format!("chain_{stem}.csv")).exists(), "{stem}");
    }
    let mz = first.join("chain_mz.csv");
    let second = dir.path().join("second");
    let o = spinsde(&["simulate", "--config", mz.to_str().unwrap(), "--out", second.to_str().unwrap(), "--workers", "3"]);
    assert!(o.status.success(), "{}", text(&o));
    // the embedded config carries no output section, so the prefix falls back
    assert_eq!(fs::read(&mz).unwrap(), fs::read(second.join("run_mz.csv")).unwrap());
}

#[test]
fn seed_flag_changes_results_and_is_embedded() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run.toml", CHAIN);
    let out = dir.path().to_str().unwrap();
    let o = spinsde(&["simulate", "--config", cfg.to_str().unwrap(), "--out", out, "--seed", "99"]);
    assert!(o.status.success(), "{}", text(&o));
    let csv = fs::read_to_string(dir.path().join("chain_mz.csv")).unwrap();
    assert!(csv.contains("#| seed = 99"));
}

#[test]
fn output_dir_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run.toml", CHAIN);
    let out = dir.path().join("env-out");
    let o = Command::new(env!("CARGO_BIN_EXE_spinsde"))
        .args(["simulate", "--config", cfg.to_str().unwrap()])
        .env("SPINSDE_OUT_DIR", &out)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", text(&o));
    assert!(out.join("chain_norm.csv").exists());
}

#[test]
fn invalid_config_lists_every_problem() {
    let dir = tempfile::tempdir().unwrap();
    let bad = CHAIN.replace("strong-order-1", "rk4").replace("n_traj = 400", "n_traj = 401").replace("gamma = 1.0", "gamma = nan");
    let cfg = write_config(dir.path(), "bad.toml", &bad);
    let o = spinsde(&["simulate", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let msg = text(&o);
    assert!(msg.contains("integrator.scheme") && msg.contains("euler-maruyama, heun, strong-order-1"), "{msg}");
    assert!(msg.contains("sampling.n_batches"), "{msg}");
    assert!(msg.contains("hamiltonian.gamma"), "{msg}");

    let unknown = CHAIN.replace("dims = [4]", "dims = [4]\nshape = \"chain\"").replace("seed = 11", "seed = 11\nthreads = 4");
    let cfg = write_config(dir.path(), "unknown.toml", &unknown);
    let o = spinsde(&["simulate", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let msg = text(&o);
    assert!(msg.contains("lattice.shape") && msg.contains("sampling.threads"), "{msg}");
}

#[test]
fn compare_against_oracle_and_itself() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run.toml", CHAIN);
    let out = dir.path().to_str().unwrap();
    assert!(spinsde(&["simulate", "--config", cfg.to_str().unwrap(), "--out", out]).status.success());
    let o = spinsde(&["oracle", "--config", cfg.to_str().unwrap(), "--out", out]);
    assert!(o.status.success(), "{}", text(&o));
    let sampled = dir.path().join("chain_mz.csv");
    let exact = dir.path().join("chain_mz_ed.csv");

    let o = spinsde(&["compare", sampled.to_str().unwrap(), sampled.to_str().unwrap()]);
    assert!(o.status.success());
    let report = String::from_utf8_lossy(&o.stdout).to_string();
    assert!(report.lines().filter(|l| !l.starts_with('#') && !l.starts_with('t')).all(|l| l.ends_with(",0.000")));
    assert!(report.contains("PASS"));

    let o = spinsde(&["compare", sampled.to_str().unwrap(), exact.to_str().unwrap()]);
    assert!(o.status.success(), "{}", text(&o));

    let norm = dir.path().join("chain_norm.csv");
    let o = spinsde(&["compare", norm.to_str().unwrap(), exact.to_str().unwrap(), "--threshold", "0"]);
    assert_eq!(o.status.code(), Some(2), "norm differs from mz, so a zero threshold fails");
}

#[test]
fn compare_rejects_mismatched_grids() {
    let dir = tempfile::tempdir().unwrap();
    let a = write_config(dir.path(), "a.csv", "t,re,stderr\n0,1,0\n0.1,1,0\n");
    let b = write_config(dir.path(), "b.csv", "t,re,stderr\n0,1,0\n0.2,1,0\n");
    let o = spinsde(&["compare", a.to_str().unwrap(), b.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o).contains("time grids"));
}

#[test]
fn variance_fit_reads_embedded_site_count() {
    let dir = tempfile::tempdir().unwrap();
    let body = CHAIN.replace("t_max = 0.4", "t_max = 1.0").replace("\"importance\"", "\"direct\"");
    let cfg = write_config(dir.path(), "run.toml", &body);
    let out = dir.path().to_str().unwrap();
    assert!(spinsde(&["simulate", "--config", cfg.to_str().unwrap(), "--out", out]).status.success());
    let norm = dir.path().join("chain_norm.csv");
    let o = spinsde(&["variance-fit", norm.to_str().unwrap(), "--from", "0.2", "--exact"]);
    assert!(o.status.success(), "{}", text(&o));
    let msg = text(&o);
    assert!(msg.contains("sampled: alpha") && msg.contains("exact direct: alpha"), "{msg}");
}

#[test]
fn saddle_scan_writes_fields_and_trace() {
    let dir = tempfile::tempdir().unwrap();
    let body = format!("{CHAIN}\n[saddle]\naction = \"loschmidt-dd\"\nend_times = [0.1, 0.2, 0.3]\n");
    let cfg = write_config(dir.path(), "run.toml", &body);
    let o = spinsde(&["saddle", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", text(&o));
    let trace = fs::read_to_string(dir.path().join("chain_sp_trace.csv")).unwrap();
    assert!(trace.contains("t_f,n_sp,residual,converged"));
    assert_eq!(trace.lines().filter(|l| !l.starts_with('#')).count(), 4);
    assert!(dir.path().join("chain_sp_fields.csv").exists());
}

#[test]
fn fm_rate_against_oracle() {
    let dir = tempfile::tempdir().unwrap();
    let body = r#"
[lattice]
dims = [2, 2]

[hamiltonian]
J = 1.0
gamma = 2.0
h = 0.0
initial_state = "fm-superposition"

[integrator]
scheme = "heun"
dt = 0.001
t_max = 0.3

[sampling]
mode = "importance"
n_traj = 500
seed = 2
observables = ["loschmidt-dd"]

[saddle]
end_times = [0.1, 0.2, 0.3]
warm_start = true

[output]
prefix = "fm"
"#;
    let cfg = write_config(dir.path(), "run.toml", body);
    let out = dir.path().to_str().unwrap();
    let o = spinsde(&["simulate", "--config", cfg.to_str().unwrap(), "--out", out]);
    assert!(o.status.success(), "{}", text(&o));
    assert!(spinsde(&["oracle", "--config", cfg.to_str().unwrap(), "--out", out]).status.success());
    let o = spinsde(&[
        "compare",
        dir.path().join("fm_rate.csv").to_str().unwrap(),
        dir.path().join("fm_rate_ed.csv").to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", text(&o));
}
