use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_slowfast-reduce"))
}

fn run_in(dir: &Path, args: &[&str], threads: Option<&str>) -> Output {
    let mut c = bin();
    c.current_dir(dir).args(args);
    if let Some(t) = threads {
        c.env("SLOWFAST_THREADS", t);
    }
    c.output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn read(p: impl AsRef<Path>) -> String {
    std::fs::read_to_string(p.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", p.as_ref().display()))
}

fn manifest(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&read(dir.join("manifest.json"))).unwrap()
}

const SIMULATE: &str = r#"
kind = "simulate"
seed = 12
output_dir = "sim"

[system]
builtin = "toy"
sigma = 0.1
eps = 0.01

[paths]
x0 = [0.05]
t_end = 0.2
n_replicas = 8
"#;

#[test]
fn fit_rate_prints_the_slope() {
    let d = tempfile::tempdir().unwrap();
    std::fs::write(d.path().join("r.csv"), "eps,error,stderr\n0.1,0.2,0.01\n0.01,0.02,0.001\n0.001,0.002,0.0001\n").unwrap();
    let o = run_in(d.path(), &["fit-rate", "r.csv"], None);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!((v["slope"].as_f64().unwrap() - 1.0).abs() < 1e-12);

    std::fs::write(d.path().join("flat.csv"), "eps,error,stderr\n0.1,0.2,0.01\n0.1,0.02,0.001\n0.1,0.002,0.0001\n").unwrap();
    let o = run_in(d.path(), &["fit-rate", "flat.csv"], None);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("degenerate fit"));
}

#[test]
fn bad_configs_exit_with_one() {
    let d = tempfile::tempdir().unwrap();
    let cases = [
        (SIMULATE.replace("t_end = 0.2", "t_ned = 0.2"), "t_ned"),
        (
            SIMULATE.replace("kind = \"simulate\"", "kind = \"manifold_gap\"")
                + "\n[manifold]\nx = [0.05]\neps_list = [0.001, 0.01, 0.1, 0.2]\nn_realizations = 4\n",
            "strictly decreasing",
        ),
        (SIMULATE.replace("builtin = \"toy\"", "builtin = \"duffing\""), "unknown builtin"),
    ];
    for (i, (text, needle)) in cases.iter().enumerate() {
        let name = format!("bad{i}.toml");
        std::fs::write(d.path().join(&name), text).unwrap();
        let o = run_in(d.path(), &["run", &name], None);
        let err = String::from_utf8_lossy(&o.stderr);
        assert_eq!(code(&o), 1, "{err}");
        assert!(err.contains(needle), "{err}");
    }
    let o = run_in(d.path(), &["run", "missing.toml"], None);
    assert_eq!(code(&o), 1);
}

#[test]
fn simulate_is_deterministic_and_writes_a_manifest() {
    let d = tempfile::tempdir().unwrap();
    std::fs::write(d.path().join("sim.toml"), SIMULATE).unwrap();
    let o = run_in(d.path(), &["run", "sim.toml"], None);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let out = d.path().join("sim");
    let first = (read(out.join("path_0.csv")), read(out.join("endpoints.csv")));
    assert_eq!(read(out.join("config.toml")), SIMULATE);
    let m = manifest(&out);
    assert_eq!(m["command"]["seed"], 12);
    assert_eq!(m["passed"], true);
    assert!(m["version"].as_str().unwrap().starts_with(env!("CARGO_PKG_VERSION")));
    assert!(m["outputs"].as_array().unwrap().iter().any(|v| v == "endpoints.csv"));
    assert_eq!(first.1.lines().count(), 9);

    let o = run_in(d.path(), &["run", "sim.toml"], Some("3"));
    assert_eq!(code(&o), 0);
    assert_eq!(first, (read(out.join("path_0.csv")), read(out.join("endpoints.csv"))));
}

#[test]
fn manifold_gap_of_a_linear_system_is_exactly_zero() {
    let d = tempfile::tempdir().unwrap();
    let text = r#"
kind = "manifold_gap"
seed = 1
output_dir = "gap"

[system]
nonlinearity = "linear_test"
a = [[0.0]]
b = [[-1.0]]
sigma = 0.2
eps = 0.1

[manifold]
x = [0.3]
eps_list = [0.1, 0.05, 0.02, 0.01]
n_realizations = 4
"#;
    std::fs::write(d.path().join("gap.toml"), text).unwrap();
    let o = run_in(d.path(), &["run", "gap.toml"], None);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let s: serde_json::Value = serde_json::from_str(&read(d.path().join("gap/manifold_gap.json"))).unwrap();
    assert_eq!(s["exact_zero"], true);
    assert!(String::from_utf8_lossy(&o.stdout).contains("exactly zero"));
}

#[test]
fn sweep_with_an_unmet_slope_window_exits_with_two() {
    let d = tempfile::tempdir().unwrap();
    let text = r#"
kind = "average_sweep"
seed = 4
output_dir = "sweep"

[system]
builtin = "toy"
sigma = 0.1
eps = 0.01

[averaging]
x0 = [0.05]
t_end = 0.5
eps_list = [0.1, 0.0316, 0.01]
n_replicas = [100, 100, 100]
grid = [0.03, 0.08, 51]
quadrature_nodes = 200
expected_slope = [5.0, 6.0]
"#;
    std::fs::write(d.path().join("s.toml"), text).unwrap();
    let o = run_in(d.path(), &["run", "s.toml"], None);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["averaging_strong.csv", "averaging_weak.json", "intermediate_weak.dat", "sweep_cells.json", "sigma_table.csv"] {
        assert!(d.path().join("sweep").join(f).exists(), "{f}");
    }
    assert_eq!(manifest(&d.path().join("sweep"))["passed"], false);
}

#[test]
fn sigma_table_and_martingale_check_run() {
    let d = tempfile::tempdir().unwrap();
    let text = r#"
kind = "sigma_table"
seed = 2
output_dir = "sig"

[system]
builtin = "toy"
sigma = 0.1
eps = 0.01

[fluctuation]
grid = [0.03, 0.08, 11]
quadrature_nodes = 200
"#;
    std::fs::write(d.path().join("sig.toml"), text).unwrap();
    let o = run_in(d.path(), &["run", "sig.toml"], None);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = read(d.path().join("sig/sigma_table.csv"));
    assert_eq!(csv.lines().count(), 12);

    let mart = text.replace("sigma_table", "martingale_check").replace("\"sig\"", "\"mart\"")
        + "x0 = [0.05]\nn_replicas = 200\nt_end = 0.5\nn_inner = 128\n";
    std::fs::write(d.path().join("mart.toml"), mart).unwrap();
    let o = run_in(d.path(), &["run", "mart.toml"], None);
    assert!(matches!(code(&o), 0 | 2), "{}", String::from_utf8_lossy(&o.stderr));
    let r: serde_json::Value = serde_json::from_str(&read(d.path().join("mart/martingale.json"))).unwrap();
    assert_eq!(r["rows"].as_array().unwrap().len(), 9);
}

#[test]
fn validate_toy_exit_codes_and_thread_independence() {
    let d = tempfile::tempdir().unwrap();
    let o = run_in(d.path(), &["validate-toy", "--budget", "zero", "--out", "z"], None);
    assert_eq!(code(&o), 0);
    assert_eq!(String::from_utf8_lossy(&o.stdout).matches("SKIP").count(), 18);
    assert!(d.path().join("z/manifest.json").exists());

    // the small budget is too small for every item, so it reports a failure
    let a = run_in(d.path(), &["validate-toy", "--budget", "small", "--out", "a"], Some("1"));
    let b = run_in(d.path(), &["validate-toy", "--budget", "small", "--out", "b"], Some("3"));
    assert_eq!(code(&a), 2);
    assert_eq!(code(&b), 2);
    assert_eq!(a.stdout, b.stdout);
    let (ra, rb) = (read(d.path().join("a/validation_report.json")), read(d.path().join("b/validation_report.json")));
    assert_eq!(ra, rb);
    assert_eq!(manifest(&d.path().join("a"))["threads"], 1);
    assert_eq!(manifest(&d.path().join("b"))["threads"], 3);

    let o = run_in(d.path(), &["validate-toy", "--budget", "huge"], None);
    assert_eq!(code(&o), 1);
}
