//! Shared plumbing for the acceptance suite: driving the CLI binary,
//! reading its CSV/JSON outputs, and an adaptive Simpson integrator used as
//! an independent quadrature oracle for the closed-form noise integrals.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

/// One finished CLI invocation and where its outputs landed.
pub struct CliRun {
    pub out_dir: PathBuf,
    pub stdout: String,
    pub code: i32,
}

/// A parsed row of the summary's check list.
#[derive(Debug, Clone)]
pub struct CheckRow {
    pub name: String,
    pub estimate: f64,
    pub target: f64,
    pub tolerance: f64,
    pub pass: bool,
}

fn scratch_dir(name: &str) -> PathBuf {
    Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance").join(name)
}

/// Run a subcommand against a throwaway config file, collecting exit code,
/// stdout, and the output directory. Panics on spawn failure only; callers
/// inspect the exit code.
pub fn run_cli(name: &str, subcommand: &str, config_body: &str, extra: &[&str]) -> CliRun {
    let base = scratch_dir(name);
    let _ = fs::remove_dir_all(&base);
    fs::create_dir_all(&base).expect("create scratch dir");
    let config = base.join("run.cfg");
    fs::write(&config, config_body).expect("write config");
    let out_dir = base.join("out");
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_flowsde"));
    cmd.arg(subcommand)
        .arg("--config")
        .arg(&config)
        .arg("--out")
        .arg(&out_dir);
    for arg in extra {
        cmd.arg(arg);
    }
    let output = cmd.output().expect("spawn flowsde binary");
    CliRun {
        out_dir,
        stdout: String::from_utf8_lossy(&output.stdout).into_owned(),
        code: output.status.code().unwrap_or(-1),
    }
}

/// Parse the run's summary.json into its check rows.
pub fn checks(run: &CliRun) -> Vec<CheckRow> {
    let raw = fs::read_to_string(run.out_dir.join("summary.json")).unwrap_or_else(|e| {
        panic!(
            "summary.json missing (exit {}): {e}\nstdout:\n{}",
            run.code, run.stdout
        )
    });
    let value: serde_json::Value = serde_json::from_str(&raw).expect("parse summary.json");
    value["checks"]
        .as_array()
        .expect("checks array")
        .iter()
        .map(|c| CheckRow {
            name: c["name"].as_str().expect("check name").to_string(),
            estimate: c["estimate"].as_f64().expect("estimate"),
            target: c["target"].as_f64().expect("target"),
            tolerance: c["tolerance"].as_f64().expect("tolerance"),
            pass: c["pass"].as_bool().expect("pass"),
        })
        .collect()
}

/// Find a check by exact name; panics with the available names on a miss so
/// a renamed check fails loudly instead of silently passing.
pub fn find_check<'a>(rows: &'a [CheckRow], name: &str) -> &'a CheckRow {
    rows.iter().find(|c| c.name == name).unwrap_or_else(|| {
        let names: Vec<&str> = rows.iter().map(|c| c.name.as_str()).collect();
        panic!("check {name:?} not found; have {names:#?}")
    })
}

/// Read a CSV written by the reporter: header row plus string cells.
pub fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let raw = fs::read_to_string(path).unwrap_or_else(|e| panic!("read {path:?}: {e}"));
    let mut lines = raw.lines();
    let header = lines
        .next()
        .expect("csv header")
        .split(',')
        .map(str::to_string)
        .collect();
    let rows = lines
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect();
    (header, rows)
}

/// Column index by header name.
pub fn col(header: &[String], name: &str) -> usize {
    header
        .iter()
        .position(|h| h == name)
        .unwrap_or_else(|| panic!("column {name:?} not in {header:?}"))
}

/// Parse a cell as f64.
pub fn cell(row: &[String], idx: usize) -> f64 {
    row[idx]
        .parse()
        .unwrap_or_else(|e| panic!("bad float {:?}: {e}", row[idx]))
}

/// Print the single verdict line for a criterion, then enforce it.
pub fn verdict(criterion: &str, pass: bool, detail: &str) {
    let tag = if pass { "PASS" } else { "FAIL" };
    println!("[{tag}] {criterion}: {detail}");
    assert!(pass, "{criterion}: {detail}");
}

/// Adaptive Simpson quadrature with error sharing, accurate to roughly the
/// requested absolute tolerance for smooth integrands.
pub fn adaptive_simpson<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, tol: f64) -> f64 {
    fn simpson<F: Fn(f64) -> f64>(f: &F, a: f64, fa: f64, b: f64, fb: f64) -> (f64, f64, f64) {
        let m = 0.5 * (a + b);
        let fm = f(m);
        (m, fm, (b - a) / 6.0 * (fa + 4.0 * fm + fb))
    }
    #[allow(clippy::too_many_arguments)]
    fn recurse<F: Fn(f64) -> f64>(
        f: &F,
        a: f64,
        fa: f64,
        b: f64,
        fb: f64,
        m: f64,
        fm: f64,
        whole: f64,
        tol: f64,
        depth: u32,
    ) -> f64 {
        let (lm, flm, left) = simpson(f, a, fa, m, fm);
        let (rm, frm, right) = simpson(f, m, fm, b, fb);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            return left + right + delta / 15.0;
        }
        recurse(f, a, fa, m, fm, lm, flm, left, 0.5 * tol, depth - 1)
            + recurse(f, m, fm, b, fb, rm, frm, right, 0.5 * tol, depth - 1)
    }
    let fa = f(a);
    let fb = f(b);
    let (m, fm, whole) = simpson(f, a, fa, b, fb);
    recurse(f, a, fa, b, fb, m, fm, whole, tol, 48)
}
