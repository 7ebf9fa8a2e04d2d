use std::path::Path;
use std::process::{Command, Output};

fn dpf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dpf")).args(args).output().expect("spawn dpf")
}

fn small(out: &Path) -> Vec<String> {
    [
        "--out",
        out.to_str().unwrap(),
        "--override",
        "gradcheck.points=2",
        "--override",
        "gradcheck.dims=[1]",
        "--override",
        "sinkhorn_bench.n_values=[4, 6]",
        "--override",
        "sinkhorn_bench.instances=3",
        "--override",
        "table1.seeds=3",
        "--override",
        "table1.t_len=10",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

fn run(sub: &str, extra: &[String]) -> Output {
    let mut args = vec![sub.to_string()];
    args.extend_from_slice(extra);
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    dpf(&refs)
}

#[test]
fn missing_config_names_the_path() {
    let out = dpf(&["table1", "--config", "/no/such/dir/exp.toml"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("/no/such/dir/exp.toml"));
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(dpf(&["nonsense"]).status.code(), Some(2));
    assert_eq!(dpf(&[]).status.code(), Some(2));
    assert_eq!(dpf(&["table1", "--seed", "abc"]).status.code(), Some(2));
    assert_eq!(dpf(&["table1", "--override", "table1.nope=1"]).status.code(), Some(2));
    assert_eq!(dpf(&["table1", "--override", "table1.methods=[\"magic\"]"]).status.code(), Some(2));
}

#[test]
fn help_exits_0() {
    let out = dpf(&["--help"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8_lossy(&out.stdout);
    for sub in ["table1", "proposal", "estimators", "biasdemo", "gradcheck", "sinkhorn-bench"] {
        assert!(text.contains(sub), "{sub}");
    }
}

#[test]
fn gradcheck_above_threshold_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = small(dir.path());
    args.extend(["--override".to_string(), "gradcheck.threshold=1e-300".to_string()]);
    let out = run("gradcheck", &args);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("gradcheck.csv").exists());
    let out = run("gradcheck", &small(dir.path()));
    assert_eq!(out.status.code(), Some(0));
}

#[test]
fn reruns_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for sub in ["sinkhorn-bench", "table1"] {
        for dir in [&a, &b] {
            let out = run(sub, &small(dir.path()));
            assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
        }
    }
    for name in ["sinkhorn_bench.csv", "table1.csv"] {
        let x = std::fs::read(a.path().join(name)).unwrap();
        let y = std::fs::read(b.path().join(name)).unwrap();
        assert_eq!(x, y, "{name}");
    }
    assert!(a.path().join("table1.run.toml").exists());
}

#[test]
fn config_file_and_seed_flag() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.toml");
    std::fs::write(&cfg, "seed = 5\n[sinkhorn_bench]\nn_values = [4]\nepsilons = [0.5]\ninstances = 2\n").unwrap();
    let out_dir = dir.path().join("out");
    let out = dpf(&["sinkhorn-bench", "--config", cfg.to_str().unwrap(), "--seed", "9", "--out", out_dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(out_dir.join("sinkhorn_bench.csv")).unwrap();
    assert!(csv.contains("# seed=9"));
    let meta = std::fs::read_to_string(out_dir.join("sinkhorn-bench.run.toml")).unwrap();
    assert!(meta.contains("wall_time_s"));
    assert!(!csv.contains("wall"));
    std::fs::write(&cfg, "[sinkhorn_bench]\ninstances = \"x\"\n").unwrap();
    assert_eq!(dpf(&["sinkhorn-bench", "--config", cfg.to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn library_entry_point() {
    assert_eq!(dpf_cli::cli_main(["dpf", "table1", "--override", "bogus=1"]), 2);
    assert_eq!(dpf_cli::cli_main(["dpf", "--version"]), 0);
}
