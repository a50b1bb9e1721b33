//! End-to-end runs of the `ehopt` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const SMALL: &str = r#"
name = "small"

[system]
tau = 0.1
lambda_bar = 2.0
alpha_bar = 10.0
N_E = 50.0

[sim]
horizon = 20000
n_seeds = 2
policies = ["closed_form", "greedy"]

[mdp]
q_max = 8.0
n_q = 17
n_e = 6
n_h = 3
n_p = 3

[vcts]
q0 = 5.0
e0 = 0.5
horizon = 50.0

[sweep]
axis = "system.lambda_bar"
values = "1.9:2.0:3"
"#;

fn setup() -> (TempDir, PathBuf) {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("small.toml");
    fs::write(&cfg, SMALL).unwrap();
    (dir, cfg)
}

fn ehopt(sub: &str, cfg: &Path, out: &Path, extra: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ehopt"))
        .arg(sub)
        .arg("--config")
        .arg(cfg)
        .arg("--out")
        .arg(out)
        .args(extra)
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn csv_rows(path: &Path) -> (Vec<String>, Vec<csv::StringRecord>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r.records().map(Result::unwrap).collect();
    (header, rows)
}

#[test]
fn config_errors_exit_2() {
    let (dir, cfg) = setup();
    let out = dir.path().join("out");
    let missing = ehopt("simulate", &dir.path().join("nope.toml"), &out, &[]);
    assert_eq!(code(&missing), 2);
    let bad_key = ehopt("simulate", &cfg, &out, &["--set", "system.lambda=1.0"]);
    assert_eq!(code(&bad_key), 2, "{}", String::from_utf8_lossy(&bad_key.stderr));
    let empty = ehopt("sweep", &cfg, &out, &["--set", "sweep.values=\"1:2:0\""]);
    assert_eq!(code(&empty), 2, "{}", String::from_utf8_lossy(&empty.stderr));
    let bad_policy = ehopt("simulate", &cfg, &out, &["--set", "sim.policies=[\"mdp_table\"]"]);
    assert_eq!(code(&bad_policy), 2, "{}", String::from_utf8_lossy(&bad_policy.stderr));
}

#[test]
fn infeasible_rate_exits_3() {
    let (dir, cfg) = setup();
    let out = dir.path().join("out");
    for sub in ["simulate", "sweep"] {
        let o = ehopt(sub, &cfg, &out, &["--set", "system.lambda_bar=3.0", "--set", "sweep.values=\"3.0,3.1\""]);
        assert_eq!(code(&o), 3, "{sub}: {}", String::from_utf8_lossy(&o.stderr));
    }
}

#[test]
fn simulate_writes_summary() {
    let (dir, cfg) = setup();
    let out = dir.path().join("out");
    let o = ehopt("simulate", &cfg, &out, &["--seed", "5"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let (header, rows) = csv_rows(&out.join("summary.csv"));
    assert_eq!(
        header,
        [
            "config_id",
            "policy",
            "seed",
            "lambda_bar",
            "alpha_bar",
            "tau",
            "N_E",
            "avg_delay_s",
            "avg_queue",
            "avg_power_W",
            "stability_verdict"
        ]
    );
    assert_eq!(rows.len(), 4);
    let seeds: Vec<&str> = rows.iter().map(|r| &r[2]).collect();
    assert!(seeds.contains(&"5") && seeds.contains(&"6"));

    let again = dir.path().join("again");
    ehopt("simulate", &cfg, &again, &["--seed", "5", "--jobs", "2"]);
    assert_eq!(
        fs::read_to_string(out.join("summary.csv")).unwrap(),
        fs::read_to_string(again.join("summary.csv")).unwrap()
    );
}

#[test]
fn sweep_covers_the_grid() {
    let (dir, cfg) = setup();
    let out = dir.path().join("out");
    let o = ehopt("sweep", &cfg, &out, &[]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let (header, rows) = csv_rows(&out.join("sweep.csv"));
    assert!(header.ends_with(&[
        "sweep_axis".to_string(),
        "sweep_value".into(),
        "delay_mean".into(),
        "delay_stderr".into()
    ]));
    assert_eq!(rows.len(), 3 * 2 * 2);
    let values: std::collections::BTreeSet<&str> = rows.iter().map(|r| &r[0]).collect();
    assert_eq!(values.len(), 3);
}

#[test]
fn solve_then_compare() {
    let (dir, cfg) = setup();
    let out = dir.path().join("out");
    let early = ehopt("compare", &cfg, &out, &[]);
    assert_eq!(code(&early), 4);

    let solved = ehopt("solve-mdp", &cfg, &out, &[]);
    assert!(solved.status.success(), "{}", String::from_utf8_lossy(&solved.stderr));
    assert!(out.join("mdp_table.csv").exists() && out.join("mdp_meta.toml").exists());

    let o = ehopt("compare", &cfg, &out, &[]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let (header, rows) = csv_rows(&out.join("compare.csv"));
    assert_eq!(header[..5], ["config_id", "policy", "grid_cost", "via_cost", "loss_ratio"]);
    assert_eq!(&rows[0][1], "mdp_table");
    assert_eq!(rows.len(), 3);
    for r in &rows {
        let loss: f64 = r[4].parse().unwrap();
        assert!(loss >= -1e-6, "policy {} beats the oracle: {loss}", &r[1]);
    }

    let other = ehopt("compare", &cfg, &out, &["--set", "system.lambda_bar=1.9"]);
    assert_eq!(code(&other), 4);
    let regrid = ehopt("compare", &cfg, &out, &["--set", "mdp.n_q=20"]);
    assert_eq!(code(&regrid), 4);
}

#[test]
fn vcts_writes_trajectory() {
    let (dir, cfg) = setup();
    let out = dir.path().join("out");
    let o = ehopt("vcts", &cfg, &out, &[]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let (header, rows) = csv_rows(&out.join("vcts.csv"));
    assert_eq!(header, ["t", "q", "e", "L", "U"]);
    assert_eq!(rows.len(), 501);
}

#[test]
fn regimes_report() {
    let (dir, cfg) = setup();
    let out = dir.path().join("out");
    let o = ehopt("regimes", &cfg, &out, &[]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("regime = LargeArrivalEnergySufficient"), "{text}");
    assert!(text.contains("e_th = "));
    let small = ehopt("regimes", &cfg, &out, &["--set", "system.lambda_bar=0.3", "--set", "system.alpha_bar=1.0"]);
    assert!(String::from_utf8(small.stdout).unwrap().contains("regime = SmallArrivalEnergyLimited"));
}

#[test]
fn presets_load() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../presets");
    let mut seen = 0;
    for set in ["paper_figures", "paper_text"] {
        for entry in fs::read_dir(root.join(set)).unwrap() {
            let path = entry.unwrap().path();
            let tmp = TempDir::new().unwrap();
            let o = ehopt("regimes", &path, tmp.path(), &[]);
            assert!(o.status.success(), "{}: {}", path.display(), String::from_utf8_lossy(&o.stderr));
            seen += 1;
        }
    }
    assert_eq!(seen, 12);
}
