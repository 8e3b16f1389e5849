use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BASE: &str = r#"
[system]
n = 2
tau = 1.0
lipschitz_k = 0.5
f = "paper_example"
domain_box = { state = [[-30.0, 30.0], [-30.0, 30.0]] }

[gains]
L = [-14.0, -28.0]
K = [-30.0, -30.0]
theta = 8.0

[sim]
h = 0.001
T = 10.0
x0 = [-20.0, -10.0]
xhat0 = [10.0, 10.0]

[scenario]
mode = "observer_based"
"#;

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new() -> Self {
        Workspace {
            dir: tempfile::tempdir().unwrap(),
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn config(&self, text: &str) -> PathBuf {
        let path = self.path("run.toml");
        fs::write(&path, text).unwrap();
        path
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_ratstab"))
            .args(args)
            .current_dir(self.dir.path())
            .output()
            .unwrap()
    }

    fn run_with(&self, sub: &str, text: &str, extra: &[&str]) -> Output {
        let cfg = self.config(text);
        let out = self.path("out");
        let mut args = vec![sub, "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()];
        args.extend_from_slice(extra);
        self.run(&args)
    }
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn certify_example_passes_and_writes_certificate() {
    let ws = Workspace::new();
    let o = ws.run_with("certify", BASE, &[]);
    assert_eq!(code(&o), 0, "{}{}", stdout(&o), stderr(&o));
    assert!(stdout(&o).contains("CERTIFIED"));
    let cert = json(&ws.path("out/certificate.json"));
    assert_eq!(cert["certified"], true);
    let norm_s = cert["s"]["spectral_norm"].as_f64().unwrap();
    assert!((norm_s - 1.016944).abs() < 1e-5, "{norm_s}");
    for key in ["a", "b", "c", "d"] {
        assert!(cert["margins"][key].as_f64().unwrap() > 0.0, "{key}");
    }
}

#[test]
fn certify_large_lipschitz_constant_fails() {
    let ws = Workspace::new();
    let o = ws.run_with("certify", &BASE.replace("lipschitz_k = 0.5", "lipschitz_k = 2.0"), &[]);
    assert_eq!(code(&o), 1, "{}", stdout(&o));
    let cert = json(&ws.path("out/certificate.json"));
    assert!(cert["margins"]["a"].as_f64().unwrap() < 0.0);
    assert_eq!(cert["certified"], false);
}

#[test]
fn certify_uses_mode_specific_margins() {
    // k = 0.95: a < 0 but c > 0, so only the feedback-side modes certify
    let text = BASE.replace("lipschitz_k = 0.5", "lipschitz_k = 0.95");
    let ws = Workspace::new();
    assert_eq!(code(&ws.run_with("certify", &text, &[])), 1);
    let sf = text.replace("mode = \"observer_based\"", "mode = \"state_feedback\"");
    assert_eq!(code(&ws.run_with("certify", &sf, &[])), 0);
    let obs = text.replace("mode = \"observer_based\"", "mode = \"observer\"");
    assert_eq!(code(&ws.run_with("certify", &obs, &[])), 1);
}

#[test]
fn non_hurwitz_gains_are_input_errors() {
    let ws = Workspace::new();
    let o = ws.run_with("certify", &BASE.replace("K = [-30.0, -30.0]", "K = [0.0, 0.0]"), &[]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("Hurwitz"), "{}", stderr(&o));
}

#[test]
fn misspelled_key_is_echoed() {
    let ws = Workspace::new();
    let o = ws.run_with("certify", &BASE.replace("lipschitz_k", "lipschits_k"), &[]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("lipschits_k"), "{}", stderr(&o));
}

#[test]
fn missing_config_file_is_an_input_error() {
    let ws = Workspace::new();
    let o = ws.run(&["simulate", "--config", "does-not-exist.toml"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("does-not-exist.toml"));
    assert_eq!(code(&ws.run(&["frobnicate"])), 2);
}

fn synthesized_theta(ws: &Workspace, k: &str, extra: &[&str]) -> (i32, Option<f64>) {
    let text = BASE.replace("lipschitz_k = 0.5", &format!("lipschitz_k = {k}"));
    let o = ws.run_with("synthesize", &text, extra);
    let theta = (code(&o) == 0).then(|| json(&ws.path("out/synthesis.json"))["theta_min"].as_f64().unwrap());
    (code(&o), theta)
}

#[test]
fn synthesize_examples() {
    let ws = Workspace::new();
    assert_eq!(synthesized_theta(&ws, "0.0", &[]), (0, Some(1.0)));
    let (status, theta) = synthesized_theta(&ws, "0.5", &["--tol", "1e-6"]);
    assert_eq!(status, 0);
    assert!((theta.unwrap() - 6.21).abs() <= 0.01, "{theta:?}");
    assert_eq!(synthesized_theta(&ws, "5.0", &["--theta-max", "100"]), (1, None));
}

fn csv_rows(path: &Path) -> (Vec<String>, Vec<Vec<f64>>) {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let header = lines.next().unwrap().split(',').map(str::to_string).collect();
    let rows = lines.map(|l| l.split(',').map(|v| v.parse().unwrap()).collect()).collect();
    (header, rows)
}

#[test]
fn simulate_example_converges() {
    let ws = Workspace::new();
    let text = BASE.to_string() + "\n[output]\nemit_plots = true\n";
    let o = ws.run_with("simulate", &text, &[]);
    assert_eq!(code(&o), 0, "{}{}", stdout(&o), stderr(&o));
    let (header, rows) = csv_rows(&ws.path("out/trajectory.csv"));
    assert_eq!(header, ["t", "x1", "x2", "xh1", "xh2", "u", "norm_x", "norm_err"]);
    assert_eq!(rows.len(), 10_001);
    let last = rows.last().unwrap();
    assert!((last[0] - 10.0).abs() < 1e-9);
    assert!(last[6] <= 1e-2 * 500f64.sqrt());
    assert!((rows[0][7] - 1300f64.sqrt()).abs() < 1e-12);
    assert!(last[7] <= 1e-2 * rows[0][7]);
    for svg in ["norms.svg", "states.svg"] {
        assert!(fs::read_to_string(ws.path("out").join(svg)).unwrap().starts_with("<svg"));
    }

    let csv = ws.path("out/trajectory.csv");
    let o = ws.run(&["fit", "--input", csv.to_str().unwrap(), "--column", "norm_err", "--from", "1"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("exp rate"));
    let o = ws.run(&["fit", "--input", csv.to_str().unwrap(), "--column", "bogus"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn zero_history_gives_zero_columns() {
    let ws = Workspace::new();
    let text = BASE
        .replace("x0 = [-20.0, -10.0]", "x0 = [0.0, 0.0]")
        .replace("xhat0 = [10.0, 10.0]", "xhat0 = [0.0, 0.0]");
    let o = ws.run_with("simulate", &text, &["--horizon", "2", "--step", "0.01"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let (_, rows) = csv_rows(&ws.path("out/trajectory.csv"));
    assert_eq!(rows.len(), 201);
    assert!(rows.iter().all(|r| r[1..].iter().all(|v| *v == 0.0)));
}

#[test]
fn simulate_rejects_bad_values() {
    let ws = Workspace::new();
    assert_eq!(code(&ws.run_with("simulate", &BASE.replace("theta = 8.0", "theta = 0.0"), &[])), 2);
    assert_eq!(code(&ws.run_with("simulate", BASE, &["--theta", "0"])), 2);
    assert_eq!(code(&ws.run_with("simulate", BASE, &["--step", "0.3"])), 2);
}

#[test]
fn divergence_exits_with_failure() {
    let ws = Workspace::new();
    let text = BASE
        .replace("f = \"paper_example\"", "f = [\"0\", \"x2^2\"]")
        .replace("x0 = [-20.0, -10.0]", "x0 = [1.0, 10.0]")
        .replace("mode = \"observer_based\"", "mode = \"open_loop\"");
    let o = ws.run_with("simulate", &text, &["--horizon", "1", "--step", "0.01"]);
    assert_eq!(code(&o), 1, "{}{}", stdout(&o), stderr(&o));
    assert!(stdout(&o).contains("diverged"));
}

#[test]
fn observer_mode_with_input_and_columns() {
    let ws = Workspace::new();
    let text = BASE.replace("mode = \"observer_based\"", "mode = \"observer\"\ninput = \"sin(t)\"");
    let o = ws.run_with("simulate", &text, &["--horizon", "2", "--step", "0.01"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let (header, rows) = csv_rows(&ws.path("out/trajectory.csv"));
    assert_eq!(header, ["t", "x1", "x2", "xh1", "xh2", "u", "norm_x", "norm_err"]);
    let t = rows[50][0];
    assert!((rows[50][5] - t.sin()).abs() < 1e-15);

    let open = BASE.replace("mode = \"observer_based\"", "mode = \"open_loop\"");
    let o = ws.run_with("simulate", &open, &["--horizon", "1", "--step", "0.01"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let (header, _) = csv_rows(&ws.path("out/trajectory.csv"));
    assert_eq!(header, ["t", "x1", "x2", "norm_x", "norm_err"]);
}

#[test]
fn repro_reports_the_discrepancy() {
    let ws = Workspace::new();
    let out = ws.path("repro");
    let o = ws.run(&["repro-paper", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("DISCREPANCY: published ||P|| = 1.0682"), "{text}");
    let s_line = text.lines().find(|l| l.starts_with("||S||")).unwrap();
    assert!(s_line.ends_with("match"), "{s_line}");
    let checks = json(&out.join("published_check.json"));
    assert_eq!(checks[0]["norms_agree"], false);
    assert_eq!(checks[1]["norms_agree"], true);
    assert!(checks[1]["residual_transposed"].as_f64().unwrap() < 1e-2);
    assert!(checks[0]["residual_as_printed"].as_f64().unwrap() > 0.5);
    assert!(checks[0]["residual_transposed"].as_f64().unwrap() > 0.5);
    assert!(text.contains("||xhat(0) - x(0)|| = 3.605551e1"));
    assert!(out.join("trajectory.csv").exists());

    // deterministic: identical CSV on a second run
    let again = ws.path("repro2");
    assert_eq!(code(&ws.run(&["repro-paper", "--out", again.to_str().unwrap()])), 0);
    assert_eq!(fs::read(out.join("trajectory.csv")).unwrap(), fs::read(again.join("trajectory.csv")).unwrap());
}
