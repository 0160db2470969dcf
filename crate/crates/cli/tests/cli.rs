use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use covcal_core::calmaps::{CalibrationMap, MatrixMap, ScalarMap};
use covcal_core::report::ReportTable;
use covcal_core::trace::TraceFile;
use nalgebra::DMatrix;
use tempfile::TempDir;

fn covcal(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_covcal"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = covcal(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    covcal(args).status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn files(dir: &Path) -> Vec<PathBuf> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    v.sort();
    v
}

/// Ten short spring-mass runs sharing one input sequence.
fn spring_traces(tmp: &TempDir) -> PathBuf {
    let cfg = write_config(
        tmp.path(),
        "sm.toml",
        "system = \"spring-mass\"\nruns = 10\nsteps = 400\n",
    );
    let out = tmp.path().join("sm");
    ok(&["simulate", s(&cfg), "--seed", "3", "--out", s(&out)]);
    out
}

fn vio_traces(tmp: &TempDir, name: &str, runs: usize, steps: usize) -> PathBuf {
    let cfg = write_config(
        tmp.path(),
        &format!("{name}.toml"),
        &format!("system = \"synthetic-vio\"\nruns = {runs}\nsteps = {steps}\n"),
    );
    let out = tmp.path().join(name);
    ok(&["simulate", s(&cfg), "--seed", "11", "--out", s(&out)]);
    out
}

#[test]
fn simulate_writes_runs_and_manifest() {
    let tmp = TempDir::new().unwrap();
    let dir = spring_traces(&tmp);
    let listed = files(&dir);
    assert_eq!(listed.len(), 11);
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap();
    let entries = manifest["files"].as_array().unwrap();
    assert_eq!(entries.len(), 10);
    let seeds: Vec<u64> = entries
        .iter()
        .map(|e| e["seed"].as_u64().unwrap())
        .collect();
    let mut distinct = seeds.clone();
    distinct.dedup();
    assert_eq!(distinct.len(), 10);
    let t = TraceFile::load(&dir.join("spring-mass_s00_r004.csv")).unwrap();
    assert_eq!(
        (t.dim(), t.len(), t.header.run, t.header.seed),
        (2, 400, Some(4), Some(seeds[4]))
    );

    let one = tmp.path().join("one");
    let cfg = tmp.path().join("sm.toml");
    ok(&["simulate", s(&cfg), "--runs", "1", "--out", s(&one)]);
    assert_eq!(files(&one).len(), 2);
}

#[test]
fn simulate_is_deterministic() {
    let tmp = TempDir::new().unwrap();
    let a = spring_traces(&tmp);
    let b = tmp.path().join("again");
    ok(&[
        "simulate",
        s(&tmp.path().join("sm.toml")),
        "--seed",
        "3",
        "--threads",
        "1",
        "--out",
        s(&b),
    ]);
    for (x, y) in files(&a).iter().zip(files(&b)) {
        assert_eq!(
            fs::read(x).unwrap(),
            fs::read(&y).unwrap(),
            "{}",
            x.display()
        );
    }
}

#[test]
fn simulate_rejects_bad_configs_and_paths() {
    let tmp = TempDir::new().unwrap();
    let bad = write_config(tmp.path(), "bad.toml", "system = \"pendulum\"\n");
    assert_eq!(
        code(&["simulate", s(&bad), "--out", s(&tmp.path().join("x"))]),
        2
    );
    let cfg = write_config(
        tmp.path(),
        "ok.toml",
        "system = \"spring-mass\"\nruns = 1\nsteps = 10\n",
    );
    let blocker = tmp.path().join("file");
    fs::write(&blocker, "").unwrap();
    assert_eq!(
        code(&["simulate", s(&cfg), "--out", s(&blocker.join("sub"))]),
        2
    );
    assert_eq!(code(&["simulate", s(&tmp.path().join("missing.toml"))]), 2);
    assert_eq!(code(&["simulate"]), 2);
}

#[test]
fn evaluate_writes_report_overlay_and_nees() {
    let tmp = TempDir::new().unwrap();
    let traces = spring_traces(&tmp);
    let out = tmp.path().join("eval");
    let text = ok(&[
        "evaluate",
        s(&traces),
        "--gt",
        "mc",
        "--dof",
        "2",
        "--out",
        s(&out),
    ]);
    assert!(text.contains("estimator") && text.contains("ground truth"));
    for f in [
        "report.json",
        "report.txt",
        "overlay.csv",
        "overlay_gt.csv",
        "nees.csv",
    ] {
        assert!(out.join(f).is_file(), "{f}");
    }
    let table: ReportTable =
        serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    // the linear filter is consistent
    assert!(
        table.rows[0].divergence.pooled < 0.1,
        "{}",
        table.rows[0].divergence.pooled
    );
    for r in &table.rows {
        assert!(r.divergence.std >= 0.0);
        assert!(r.sigma.iter().flatten().all(|p| (0.0..=100.0).contains(p)));
    }
    let overlay = fs::read_to_string(out.join("overlay.csv")).unwrap();
    assert!(overlay.starts_with("x,empirical,chi2,abs_diff\n"));
    assert_eq!(
        fs::read_to_string(out.join("nees.csv"))
            .unwrap()
            .lines()
            .count(),
        1 + 10 * 400
    );

    assert_eq!(
        code(&["evaluate", s(&traces), "--dof", "3", "--out", s(&out)]),
        2
    );
    assert_eq!(
        code(&[
            "evaluate",
            s(&traces),
            "--gt",
            "ergodic:401",
            "--out",
            s(&out)
        ]),
        2
    );
}

#[test]
fn zero_error_trace_is_maximally_divergent() {
    let tmp = TempDir::new().unwrap();
    let traces = spring_traces(&tmp);
    let mut t = TraceFile::load(&traces.join("spring-mass_s00_r000.csv")).unwrap();
    for r in &mut t.rows {
        r.x_true = r.x_hat.clone();
    }
    let zero = tmp.path().join("zero.csv");
    t.save(&zero).unwrap();
    let out = tmp.path().join("eval");
    ok(&["evaluate", s(&zero), "--out", s(&out)]);
    let nees = fs::read_to_string(out.join("nees.csv")).unwrap();
    assert!(nees
        .lines()
        .skip(1)
        .all(|l| l.split(',').nth(2) == Some("0.0")));
    let table: ReportTable =
        serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    // a point mass at zero against χ²₂ leaves the whole ‖p‖² = 1/4 plus the spike
    assert!(table.rows[0].divergence.pooled > 0.5);
}

#[test]
fn fit_apply_and_report_round_trip() {
    let tmp = TempDir::new().unwrap();
    let train = vio_traces(&tmp, "train", 2, 600);
    let model = tmp.path().join("m/scalar.json");
    ok(&[
        "fit",
        s(&train),
        "--method",
        "scalar",
        "--gt",
        "ergodic:101",
        "--out",
        s(&model),
    ]);
    let first = fs::read(&model).unwrap();
    ok(&[
        "fit",
        s(&train),
        "--method",
        "scalar",
        "--gt",
        "ergodic:101",
        "--out",
        s(&model),
    ]);
    assert_eq!(first, fs::read(&model).unwrap());
    assert!(tmp.path().join("m/scalar.curve.csv").is_file());
    let CalibrationMap::Scalar(sm) = CalibrationMap::load(&model).unwrap() else {
        panic!("not scalar")
    };
    assert!(
        sm.s > 1.0,
        "reported covariances are too small, s = {}",
        sm.s
    );

    let adjusted = tmp.path().join("adj");
    ok(&["apply", s(&model), s(&train), "--out", s(&adjusted)]);
    let base = tmp.path().join("base_eval");
    let adj_eval = tmp.path().join("adj_eval");
    ok(&[
        "evaluate",
        s(&train),
        "--gt",
        "ergodic:101",
        "--out",
        s(&base),
    ]);
    ok(&["evaluate", s(&adjusted), "--out", s(&adj_eval)]);
    let report_dir = tmp.path().join("cmp");
    let text = ok(&[
        "report",
        "--baseline",
        s(&base),
        "--method",
        &format!("scalar={}", s(&adj_eval)),
        "--out",
        s(&report_dir),
    ]);
    assert!(text.contains("unadjusted") && text.contains("scalar"));
    let table: ReportTable =
        serde_json::from_str(&fs::read_to_string(report_dir.join("report.json")).unwrap()).unwrap();
    assert_eq!(table.rows.len(), 3);
    // the report recomputes the same divergences the evaluation wrote
    let eval: ReportTable =
        serde_json::from_str(&fs::read_to_string(adj_eval.join("report.json")).unwrap()).unwrap();
    assert_eq!(table.rows[1].divergence, eval.rows[0].divergence);
    assert!(table.rows[1].percent_decrease.unwrap() > 0.0);
}

#[test]
fn identity_scalar_map_leaves_traces_unchanged() {
    let tmp = TempDir::new().unwrap();
    let traces = spring_traces(&tmp);
    let model = tmp.path().join("one.json");
    CalibrationMap::Scalar(ScalarMap::new(1.0).unwrap())
        .save(&model)
        .unwrap();
    let out = tmp.path().join("adj");
    let src = traces.join("spring-mass_s00_r001.csv");
    ok(&["apply", s(&model), s(&src), "--out", s(&out)]);
    assert_eq!(
        fs::read(&src).unwrap(),
        fs::read(out.join("spring-mass_s00_r001.csv")).unwrap()
    );
}

#[test]
fn zero_matrix_map_fails_evaluation_numerically() {
    let tmp = TempDir::new().unwrap();
    let traces = spring_traces(&tmp);
    let model = tmp.path().join("zero.json");
    CalibrationMap::Matrix(MatrixMap::new(DMatrix::zeros(2, 2)).unwrap())
        .save(&model)
        .unwrap();
    let out = tmp.path().join("adj");
    ok(&["apply", s(&model), s(&traces), "--out", s(&out)]);
    let run = covcal(&["evaluate", s(&out), "--out", s(&tmp.path().join("e"))]);
    assert_eq!(run.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&run.stderr).contains("singular"));
}

#[test]
fn apply_rejects_mismatched_dimensions() {
    let tmp = TempDir::new().unwrap();
    let traces = spring_traces(&tmp);
    let model = tmp.path().join("m.json");
    CalibrationMap::Matrix(MatrixMap::scaled_identity(4, 1.0))
        .save(&model)
        .unwrap();
    assert_eq!(
        code(&[
            "apply",
            s(&model),
            s(&traces),
            "--out",
            s(&tmp.path().join("a"))
        ]),
        2
    );
    fs::write(&model, "{\"format\": \"other\"}").unwrap();
    assert_eq!(
        code(&[
            "apply",
            s(&model),
            s(&traces),
            "--out",
            s(&tmp.path().join("a"))
        ]),
        2
    );
}

#[test]
fn state_network_needs_state_features() {
    let tmp = TempDir::new().unwrap();
    let train = vio_traces(&tmp, "train", 1, 200);
    let p = train.join("synthetic-vio_s00_r000.csv");
    let text = fs::read_to_string(&p).unwrap().replacen(
        "\"state_features\":true",
        "\"state_features\":false",
        1,
    );
    assert!(text.contains("\"state_features\":false"));
    fs::write(&p, text).unwrap();
    let model = tmp.path().join("m.json");
    let fit = |method: &str| {
        code(&[
            "fit",
            s(&p),
            "--method",
            method,
            "--gt",
            "ergodic:51",
            "--arch",
            "8",
            "--epochs",
            "1",
            "--out",
            s(&model),
        ])
    };
    assert_eq!(fit("mlp-state"), 2);
    // the covariance-only network trains on the same file
    assert_eq!(fit("mlp"), 0);
}

#[test]
fn network_fit_is_reproducible() {
    let tmp = TempDir::new().unwrap();
    let train = vio_traces(&tmp, "train", 1, 300);
    let a = tmp.path().join("a.json");
    let b = tmp.path().join("b.json");
    let args = [
        "fit",
        s(&train),
        "--method",
        "mlp-state",
        "--gt",
        "ergodic:51",
        "--arch",
        "16,8",
        "--epochs",
        "3",
        "--seed",
        "5",
    ];
    ok(&[&args[..], &["--out", s(&a)]].concat());
    ok(&[&args[..], &["--out", s(&b)]].concat());
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let curve = fs::read_to_string(tmp.path().join("a.curve.csv")).unwrap();
    assert_eq!(curve.lines().count(), 1 + 1 + 3);
    assert_eq!(
        code(&[&args[..], &["--preset", "vio-h3", "--out", s(&a)]].concat()),
        2
    );
}

#[test]
fn align_recovers_frame_and_reports_degenerate_overlap() {
    let tmp = TempDir::new().unwrap();
    let traces = vio_traces(&tmp, "est", 1, 300);
    let est_path = traces.join("synthetic-vio_s00_r000.csv");
    let est = TraceFile::load(&est_path).unwrap();
    // ground truth in a frame rotated 90° about z and shifted
    let mut gt = String::from("t,px,py,pz\n");
    for r in &est.rows {
        let (x, y, z) = (r.x_hat[0], r.x_hat[1], r.x_hat[2]);
        gt.push_str(&format!("{:?},{:?},{:?},{:?}\n", r.t, y - 1.0, -x, z + 2.0));
    }
    let gt_path = tmp.path().join("gt.csv");
    fs::write(&gt_path, gt).unwrap();
    let out = tmp.path().join("aligned.csv");
    ok(&["align", s(&gt_path), s(&est_path), "--out", s(&out)]);
    let side: serde_json::Value = serde_json::from_str(
        &fs::read_to_string(tmp.path().join("aligned.transform.json")).unwrap(),
    )
    .unwrap();
    let rot: Vec<Vec<f64>> = serde_json::from_value(side["rotation"].clone()).unwrap();
    // est = R gt + t with gt = (y − 1, −x, z + 2), so R = [[0, −1, 0], [1, 0, 0], [0, 0, 1]]
    let want = [[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]];
    for i in 0..3 {
        for j in 0..3 {
            assert!((rot[i][j] - want[i][j]).abs() < 1e-9, "{rot:?}");
        }
    }
    let mean: Vec<f64> = serde_json::from_value(side["mean_residual"].clone()).unwrap();
    assert!(mean.iter().all(|m| m.abs() < 1e-9), "{mean:?}");
    // mapped back into the estimate frame the truth positions equal the estimates
    let aligned = TraceFile::load(&out).unwrap();
    assert_eq!(aligned.len(), est.len());
    for (a, b) in aligned.rows.iter().zip(&est.rows) {
        for i in 0..3 {
            assert!((a.x_true[i] - b.x_hat[i]).abs() < 1e-9);
        }
        assert_eq!(a.x_true[3..], b.x_true[3..]);
    }

    fs::write(&gt_path, "t,px,py,pz\n1000,0,0,0\n1001,1,0,0\n").unwrap();
    assert_eq!(
        code(&["align", s(&gt_path), s(&est_path), "--out", s(&out)]),
        3
    );
    let spring = spring_traces(&tmp);
    fs::write(&gt_path, "t,px,py,pz\n0,0,0,0\n10,1,0,0\n").unwrap();
    assert_eq!(
        code(&[
            "align",
            s(&gt_path),
            s(&spring.join("spring-mass_s00_r000.csv")),
            "--out",
            s(&out)
        ]),
        2
    );
}

#[test]
fn window_search_table_and_single_window() {
    let tmp = TempDir::new().unwrap();
    let traces = vio_traces(&tmp, "ws", 2, 400);
    let csv = tmp.path().join("ws.csv");
    let text = ok(&[
        "window-search",
        s(&traces),
        "--range",
        "21:61:4",
        "--dof",
        "9",
        "--out",
        s(&csv),
    ]);
    let table = fs::read_to_string(&csv).unwrap();
    let ks: Vec<usize> = table
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap().parse().unwrap())
        .collect();
    assert_eq!(ks, [21, 25, 29, 33, 37, 41, 45, 49, 53, 57, 61]);
    assert!(text.starts_with("best window "));

    let text = ok(&[
        "window-search",
        s(&traces),
        "--range",
        "45:45",
        "--out",
        s(&csv),
    ]);
    assert!(text.starts_with("best window 45 "), "{text}");
    assert_eq!(
        code(&[
            "window-search",
            s(&traces),
            "--range",
            "20:40:2",
            "--out",
            s(&csv)
        ]),
        2
    );
    assert_eq!(
        code(&[
            "window-search",
            s(&traces),
            "--range",
            "501:601:2",
            "--out",
            s(&csv)
        ]),
        2
    );
}
