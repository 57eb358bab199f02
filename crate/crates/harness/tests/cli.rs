use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use probreg::gridmath::parse_grid_dump;
use tempfile::TempDir;

const SMALL: &str = "repetitions = 2\n[scenario]\nframes = 12\n";
const STATIC: &str = "repetitions = 1\n[scenario]\nkind = \"static\"\nframes = 12\n";

fn probreg(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_probreg"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn with_config(text: &str) -> TempDir {
    let dir = TempDir::new().unwrap();
    fs::write(dir.path().join("run.toml"), text).unwrap();
    dir
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn read(dir: &Path, rel: &str) -> String {
    fs::read_to_string(dir.join(rel)).unwrap_or_else(|e| panic!("{rel}: {e}"))
}

fn csv_rows(text: &str) -> Vec<Vec<String>> {
    text.lines().map(|l| l.split(',').map(str::to_string).collect()).collect()
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    let cases: &[(&str, &[&str])] = &[
        ("", &["frobnicate"]),
        ("", &["compare-losses", "--seed", "x"]),
        ("", &["compare-losses", "--config", "missing.toml"]),
        ("bogus = 1\n", &["compare-losses", "--config", "c.toml"]),
        ("models = [\"huber\"]\n", &["compare-losses", "--config", "c.toml"]),
        ("[tracker]\nmodel = \"svm\"\n", &["track", "--config", "c.toml"]),
        ("[sweep]\nvalues = []\n", &["sigma-sweep", "--config", "c.toml"]),
        ("[tracker]\nlambda = 0.0\n", &["track", "--config", "c.toml"]),
        ("", &["dump-density", "--frame", "500"]),
        ("", &["compare-losses", "--jobs", "0"]),
    ];
    for (cfg, args) in cases {
        fs::write(d.join("c.toml"), cfg).unwrap();
        let o = probreg(d, args);
        assert_eq!(code(&o), 2, "{args:?} with {cfg:?}: {}", String::from_utf8_lossy(&o.stderr));
    }
    assert_eq!(code(&probreg(d, &["--help"])), 0);
}

#[test]
fn compare_losses_is_reproducible_across_job_counts() {
    let dir = with_config(SMALL);
    let d = dir.path();
    let a = probreg(d, &["compare-losses", "--config", "run.toml", "--out", "a", "--jobs", "1"]);
    assert_eq!(code(&a), 0, "{}", String::from_utf8_lossy(&a.stderr));
    let b = probreg(d, &["compare-losses", "--config", "run.toml", "--out", "b", "--jobs", "3"]);
    assert_eq!(code(&b), 0);
    let first = read(d, "a/compare_losses.csv");
    assert_eq!(first, read(d, "b/compare_losses.csv"));
    assert_eq!(String::from_utf8_lossy(&a.stdout), first);

    let rows = csv_rows(&first);
    assert_eq!(rows[0], ["model", "auc", "op50", "op75"]);
    let models: Vec<&str> = rows[1..].iter().map(|r| r[0].as_str()).collect();
    assert_eq!(models, ["l2", "rl2", "nll", "kl"]);
    for r in &rows[1..] {
        assert_eq!(r.len(), 4);
        for v in &r[1..] {
            let x: f64 = v.parse().unwrap();
            assert!((0.0..=1.0).contains(&x));
        }
    }

    let c = probreg(d, &["compare-losses", "--config", "run.toml", "--out", "c", "--seed", "9"]);
    assert_eq!(code(&c), 0);
    assert_ne!(first, read(d, "c/compare_losses.csv"));
}

#[test]
fn sweep_at_the_default_matches_the_kl_row() {
    let dir = with_config(&format!("models = [\"kl\"]\n{SMALL}[sweep]\nvalues = [0.25]\n"));
    let d = dir.path();
    assert_eq!(code(&probreg(d, &["compare-losses", "--config", "run.toml"])), 0);
    assert_eq!(code(&probreg(d, &["sigma-sweep", "--config", "run.toml"])), 0);
    let kl: f64 = csv_rows(&read(d, "probreg-out/compare_losses.csv"))[1][1].parse().unwrap();
    let sweep = csv_rows(&read(d, "probreg-out/sigma_sweep.csv"));
    assert_eq!(sweep[0], ["sigma", "auc"]);
    assert_eq!(sweep.len(), 2);
    let auc: f64 = sweep[1][1].parse().unwrap();
    assert!((auc - kl).abs() <= 1e-12, "{auc} vs {kl}");
}

#[test]
fn sweep_over_sigma_bb_lists_each_value() {
    let dir = with_config("repetitions = 1\n[scenario]\nkind = \"distractor\"\nframes = 8\n[sweep]\nparameter = \"sigma_bb\"\nvalues = [0.02, 0.05, 0.2]\n");
    let d = dir.path();
    let o = probreg(d, &["sigma-sweep", "--config", "run.toml", "--out", "s"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let rows = csv_rows(&read(d, "s/sigma_sweep.csv"));
    let sigmas: Vec<f64> = rows[1..].iter().map(|r| r[0].parse().unwrap()).collect();
    assert_eq!(sigmas, [0.02, 0.05, 0.2]);
}

#[test]
fn density_models_agree_on_the_static_scene() {
    // l2 and rl2 are left out: their confidence box scorer settles on a box
    // a few percent too large even on this scene
    let dir = with_config(STATIC);
    let d = dir.path();
    assert_eq!(code(&probreg(d, &["compare-losses", "--config", "run.toml"])), 0);
    let rows = csv_rows(&read(d, "probreg-out/compare_losses.csv"));
    let auc = |m: &str| -> f64 { rows.iter().find(|r| r[0] == m).unwrap()[1].parse().unwrap() };
    assert!((auc("kl") - auc("nll")).abs() <= 1e-9);
    assert!((auc("kl") - 100.0 / 101.0).abs() <= 1e-9);
}

#[test]
fn track_writes_one_trace_per_sequence() {
    let dir = with_config("repetitions = 2\n[scenario]\nframes = 6\n");
    let d = dir.path();
    let o = probreg(d, &["track", "--config", "run.toml", "--out", "t"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let summary = csv_rows(&read(d, "t/track_summary.csv"));
    assert_eq!(summary[0], ["scenario", "repetition", "seed", "auc", "op50", "op75", "missing_frames"]);
    assert_eq!(summary.len(), 1 + 2 * 4);
    let traces: Vec<_> = fs::read_dir(d.join("t/traces")).unwrap().collect();
    assert_eq!(traces.len(), 8);
    let trace = csv_rows(&read(d, "t/traces/00-distractor-0-r1.csv"));
    assert_eq!(trace[0], ["frame", "cx", "cy", "w", "h", "iou", "missing", "peak_mass"]);
    assert_eq!(trace.len(), 7);
    assert!(trace[1..].iter().all(|r| r.len() == 8));
}

#[test]
fn dump_density_peaks_at_the_static_target() {
    let dir = with_config("[scenario]\nkind = \"static\"\nframes = 6\n[dump]\nframes = [0, 3]\nslice_samples = 21\n");
    let d = dir.path();
    let o = probreg(d, &["dump-density", "--config", "run.toml", "--out", "a"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let index = csv_rows(&read(d, "a/density/index.csv"));
    assert_eq!(index[0], ["frame", "origin_row", "origin_col", "cx", "cy", "w", "h", "missing"]);
    assert_eq!(index.len(), 3);
    for row in &index[1..] {
        let t: usize = row[0].parse().unwrap();
        let origin: (i64, i64) = (row[1].parse().unwrap(), row[2].parse().unwrap());
        let center = parse_grid_dump(&read(d, &format!("a/density/frame{t:04}-center.txt"))).unwrap();
        let (r, c) = center.argmax().unwrap();
        assert_eq!((origin.0 + r as i64, origin.1 + c as i64), (32, 32), "frame {t}");
        for kind in ["box-center", "box-size"] {
            let g = parse_grid_dump(&read(d, &format!("a/density/frame{t:04}-{kind}.txt"))).unwrap();
            assert_eq!(g.shape(), (21, 21));
            let (r, c) = g.argmax().unwrap();
            assert!(r.abs_diff(10) <= 1 && c.abs_diff(10) <= 1, "frame {t} {kind}: peak at {r},{c}");
        }
    }

    let o = probreg(d, &["dump-density", "--config", "run.toml", "--out", "b", "--frame", "3", "--frame", "0"]);
    assert_eq!(code(&o), 0);
    for f in ["index.csv", "frame0000-center.txt", "frame0003-box-center.txt", "frame0003-box-size.txt"] {
        assert_eq!(read(d, &format!("a/density/{f}")), read(d, &format!("b/density/{f}")), "{f}");
    }
}

#[test]
fn selftest_passes() {
    let dir = TempDir::new().unwrap();
    let o = probreg(dir.path(), &["selftest"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let out = String::from_utf8_lossy(&o.stdout);
    assert_eq!(out.lines().filter(|l| l.starts_with("PASS")).count(), 4);
    assert!(!out.contains("FAIL"));
}
