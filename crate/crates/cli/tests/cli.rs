use std::path::Path;
use std::process::Command;

const HESSIAN: &str = r#"
kind = "hessian"
seed = 2
tilt = [0.3, 0.0]
[lattice]
dim = 2
half_side = 4
[potential]
name = "quadratic"
c = 1.0
[sampler]
dt = 0.05
samples = 400
stride = 5
"#;

fn gradphi(args: &[&str], env_out: &Path) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_gradphi")).args(args).env("GRADPHI_OUTPUT", env_out).output().unwrap()
}

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("exp.toml");
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn hessian_run_writes_table_with_oracle_column() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), HESSIAN);
    let out = gradphi(&["run", &cfg], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let run_dir = String::from_utf8(out.stdout).unwrap().trim().to_string();
    assert!(run_dir.starts_with(dir.path().to_str().unwrap()));
    let mut rd = csv::Reader::from_path(Path::new(&run_dir).join("hessian.csv")).unwrap();
    let headers = rd.headers().unwrap().clone();
    assert_eq!(&headers[4], "oracle");
    let rows: Vec<csv::StringRecord> = rd.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().all(|r| r[4].parse::<f64>().is_ok()));
    let manifest: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(Path::new(&run_dir).join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["schema_version"], 1);
    assert_eq!(manifest["config_hash"].as_str().unwrap().len(), 64);
}

#[test]
fn verify_without_samples_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &HESSIAN.replace("kind = \"hessian\"", "kind = \"verify\""));
    let out = gradphi(&["run", &cfg, "sampler.samples=0"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let out = gradphi(&["plan", &cfg, "lattice.dim=zero"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn runtime_failures_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    // a blocked output path only shows up when the run writes its results
    let blocker = dir.path().join("blocked");
    std::fs::write(&blocker, "").unwrap();
    let cfg = write_config(dir.path(), HESSIAN);
    let out = gradphi(&["run", &cfg, &format!("output=\"{}\"", blocker.join("x").display())], dir.path());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), HESSIAN);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for d in [&a, &b] {
        let out = gradphi(&["run", &cfg, &format!("output=\"{}\"", d.display())], dir.path());
        assert!(out.status.success());
    }
    for f in ["hessian.csv", "result.json"] {
        let (x, y) = (std::fs::read_to_string(a.join(f)).unwrap(), std::fs::read_to_string(b.join(f)).unwrap());
        assert!(x == y, "{f} differs between runs");
    }
}

fn plan(dir: &Path, cfg: &str, extra: &[&str]) -> serde_json::Value {
    let mut args = vec!["plan", cfg];
    args.extend_from_slice(extra);
    let out = gradphi(&args, dir);
    assert!(out.status.success());
    serde_json::from_slice(&out.stdout).unwrap()
}

#[test]
fn plan_scales_with_size_and_samples() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), HESSIAN);
    let base = plan(dir.path(), &cfg, &[]);
    let big = plan(dir.path(), &cfg, &["lattice.half_side=8"]);
    let more = plan(dir.path(), &cfg, &["sampler.samples=800"]);
    assert_eq!(big["per_step_cost"].as_u64().unwrap(), 4 * base["per_step_cost"].as_u64().unwrap());
    assert_eq!(more["steps"].as_u64().unwrap(), 2 * base["steps"].as_u64().unwrap());
}

#[test]
fn every_kind_runs() {
    let dir = tempfile::tempdir().unwrap();
    let cases: &[(&str, &[&str])] = &[
        ("sample", &[]),
        ("surface-tension", &["experiment.nodes=2"]),
        ("hessian", &["experiment.difference_step=0.1", "experiment.nodes=2"]),
        ("diffusivity", &["lattice.boundary=\"periodic\"", "experiment.environments=2", "experiment.walks=20", "experiment.horizon=10.0"]),
        ("couple", &["experiment.runs=3"]),
        ("couple", &["experiment.mode=\"tilts\"", "experiment.second_tilt=[0.0, 0.0]", "experiment.runs=2", "experiment.ks=[2, 3]", "lattice.half_side=6"]),
        ("couple", &["experiment.mode=\"contraction\"", "experiment.horizon_factor=2.0"]),
        ("verify", &["experiment.checks=[\"brascamp-lieb\", \"exp-moment\", \"spectral-gap\", \"multiscale-poincare\"]", "experiment.level=1", "experiment.draws=5"]),
        ("subadditivity", &["lattice.boundary=\"periodic\"", "lattice.half_side=9", "experiment.top=1", "experiment.chains=2", "experiment.launches=1"]),
        ("clt", &["lattice.boundary=\"periodic\"", "lattice.half_side=16", "experiment.radii=[2]"]),
        ("decay", &["experiment.horizon_factor=2.0"]),
    ];
    for (kind, extra) in cases {
        let cfg = write_config(dir.path(), &HESSIAN.replace("kind = \"hessian\"", &format!("kind = \"{kind}\"")));
        let mut args = vec!["run", cfg.as_str()];
        args.extend_from_slice(extra);
        let out = gradphi(&args, dir.path());
        assert!(out.status.success(), "{kind}: {}", String::from_utf8_lossy(&out.stderr));
    }
}
