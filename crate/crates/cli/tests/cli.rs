use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use nalgebra::DVector;
use sdkrylov::problems::{generate, read_container, write_container, ProblemKind, ProblemSpec};
use tempfile::TempDir;

const BIN: &str = env!("CARGO_BIN_EXE_sdkrylov");

const SMALL_CASE1: &str = "[problem]\nkind = case1\nside = 16\nseed = 11\n";
const CUSTOM: &str = "[problem]\nkind = custom\nseed = 3\n";

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .current_dir(dir)
        .env_remove("SDKRYLOV_THREADS")
        .output()
        .unwrap()
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// Generates a problem into `dir/name` and returns the container path.
fn gen(dir: &Path, cfg_text: &str, name: &str) -> PathBuf {
    let cfg = write_config(dir, &format!("{name}.cfg"), cfg_text);
    let out = dir.join(name);
    let o = run(
        dir,
        &[
            "gen",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    out.join("problem.sdkp")
}

fn command(dir: &Path, cmd: &str, cfg_text: &str, problem: &Path, out: &str) -> (Output, PathBuf) {
    let cfg = write_config(dir, &format!("{out}.cfg"), cfg_text);
    let out = dir.join(out);
    let o = run(
        dir,
        &[
            cmd,
            "--config",
            cfg.to_str().unwrap(),
            "--problem",
            problem.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ],
    );
    (o, out)
}

/// Data rows of a schema-1 CSV, split into fields.
fn csv_rows(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.split("\r\n");
    assert_eq!(lines.next(), Some("# schema=1"));
    let header = lines.next().unwrap().split(',').map(String::from).collect();
    let rows = lines
        .filter(|l| !l.is_empty())
        .map(|l| l.split(',').map(String::from).collect())
        .collect();
    (header, rows)
}

fn column(header: &[String], rows: &[Vec<String>], name: &str) -> Vec<String> {
    let i = header.iter().position(|h| h == name).unwrap();
    rows.iter().map(|r| r[i].clone()).collect()
}

fn floats(v: &[String]) -> Vec<f64> {
    v.iter().map(|s| s.parse().unwrap()).collect()
}

#[test]
fn gen_writes_container_and_descriptor() {
    let dir = TempDir::new().unwrap();
    let problem = gen(dir.path(), SMALL_CASE1, "a");
    assert!(problem.exists());
    let desc = fs::read_to_string(problem.with_file_name("problem.txt")).unwrap();
    assert!(desc.lines().any(|l| l == "seed = 11"), "{desc}");
    assert!(desc.lines().any(|l| l == "kind = case1"));
}

#[test]
fn gen_is_reproducible() {
    let dir = TempDir::new().unwrap();
    let a = fs::read(gen(dir.path(), SMALL_CASE1, "a")).unwrap();
    let b = fs::read(gen(dir.path(), SMALL_CASE1, "b")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn unknown_key_is_a_config_error() {
    let dir = TempDir::new().unwrap();
    for text in ["foo = 1\n", "[solver]\nfoo = 1\n", "problem.foo = 2\n"] {
        let cfg = write_config(dir.path(), "bad.cfg", text);
        let o = run(dir.path(), &["gen", "--config", cfg.to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(1));
        assert!(stderr(&o).contains("foo"), "{}", stderr(&o));
    }
}

#[test]
fn out_of_range_value_is_a_config_error() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "bad.cfg", "solver.tau = 0.5\n");
    let o = run(dir.path(), &["gen", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("solver.tau"));
}

#[test]
fn io_failures_exit_with_two() {
    let dir = TempDir::new().unwrap();
    let o = run(dir.path(), &["gen", "--config", "missing.cfg"]);
    assert_eq!(o.status.code(), Some(2));

    let cfg = write_config(dir.path(), "c.cfg", CUSTOM);
    let blocker = dir.path().join("file");
    fs::write(&blocker, b"x").unwrap();
    let o = run(
        dir.path(),
        &[
            "gen",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            blocker.join("sub").to_str().unwrap(),
        ],
    );
    assert_eq!(o.status.code(), Some(2));

    let (o, _) = command(
        dir.path(),
        "solve",
        CUSTOM,
        &dir.path().join("nope.sdkp"),
        "s",
    );
    assert_eq!(o.status.code(), Some(2));

    let garbage = dir.path().join("garbage.sdkp");
    fs::write(&garbage, b"not a container").unwrap();
    let (o, _) = command(dir.path(), "solve", CUSTOM, &garbage, "g");
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn solver_failure_exits_with_three() {
    let dir = TempDir::new().unwrap();
    // The dense reference solver refuses problems above its size limit.
    let problem = gen(dir.path(), "[problem]\nkind = custom\nside = 2001\n", "big");
    let cfg = "[problem]\nkind = custom\n[solver]\nmethod = mm\nlambda = 1\nalpha = 1\n";
    let (o, _) = command(dir.path(), "solve", cfg, &problem, "s");
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("mm"));
}

#[test]
fn zero_data_gives_header_only_history() {
    let dir = TempDir::new().unwrap();
    let mut tp = generate(&ProblemSpec::new(ProblemKind::Custom)).unwrap();
    tp.problem.d = DVector::zeros(tp.problem.m());
    let path = dir.path().join("zero.sdkp");
    write_container(&mut BufWriter::new(fs::File::create(&path).unwrap()), &tp).unwrap();
    let (o, out) = command(dir.path(), "solve", CUSTOM, &path, "s");
    assert!(o.status.success(), "{}", stderr(&o));
    let (header, rows) = csv_rows(&out.join("history.csv"));
    assert_eq!(
        header,
        [
            "iter",
            "lambda",
            "alpha",
            "gcv",
            "res_proj",
            "relerr",
            "relerr_s1",
            "relerr_s2"
        ]
    );
    assert!(rows.is_empty());
}

#[test]
fn history_uses_crlf_and_schema_line() {
    let dir = TempDir::new().unwrap();
    let problem = gen(dir.path(), CUSTOM, "p");
    let (o, out) = command(dir.path(), "solve", CUSTOM, &problem, "s");
    assert!(o.status.success(), "{}", stderr(&o));
    let bytes = fs::read(out.join("history.csv")).unwrap();
    assert!(bytes.starts_with(b"# schema=1\r\niter,lambda,"));
    let lf = bytes.iter().filter(|&&b| b == b'\n').count();
    let crlf = bytes.windows(2).filter(|w| w == b"\r\n").count();
    assert_eq!(lf, crlf);
    // 1-D problems have no images.
    assert!(!out.join("s.pgm").exists());
}

#[test]
fn optimal_run_error_decreases_until_gcv_minimum() {
    let dir = TempDir::new().unwrap();
    let desk = "[problem]\nkind = case1\nseed = 1\n";
    let problem = gen(dir.path(), desk, "p");
    let cfg = format!("{desk}[solver]\nrule = optimal\n");
    let (o, out) = command(dir.path(), "solve", &cfg, &problem, "s");
    assert!(o.status.success(), "{}", stderr(&o));
    let (header, rows) = csv_rows(&out.join("history.csv"));
    let gcv: Vec<f64> = column(&header, &rows, "gcv")
        .iter()
        .map(|s| s.parse().unwrap_or(f64::INFINITY))
        .collect();
    let relerr = floats(&column(&header, &rows, "relerr"));
    let stop = gcv
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .unwrap();
    for i in 1..=stop {
        assert!(relerr[i] <= relerr[i - 1] + 1e-12, "row {i}: {relerr:?}");
    }
}

/// Reads a 16-bit binary PGM.
fn read_pgm(path: &Path) -> (usize, usize, Vec<u16>) {
    let bytes = fs::read(path).unwrap();
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        fields.push(String::from_utf8(bytes[start..pos].to_vec()).unwrap());
    }
    pos += 1;
    assert_eq!(fields[0], "P5");
    assert_eq!(fields[3], "65535");
    let (w, h): (usize, usize) = (fields[1].parse().unwrap(), fields[2].parse().unwrap());
    let samples = bytes[pos..]
        .chunks_exact(2)
        .map(|c| u16::from_be_bytes([c[0], c[1]]))
        .collect::<Vec<_>>();
    assert_eq!(samples.len(), w * h);
    (w, h, samples)
}

#[test]
fn pgm_images_round_trip_within_quantization() {
    let dir = TempDir::new().unwrap();
    let problem = gen(dir.path(), SMALL_CASE1, "p");
    let cfg = format!("{SMALL_CASE1}[solver]\nmethod = genhybr\nrule = optimal\n");
    let (o, out) = command(dir.path(), "solve", &cfg, &problem, "s");
    assert!(o.status.success(), "{}", stderr(&o));

    // The stored floats are the estimate of a second, identical run through the library.
    let tp = read_container(&mut fs::File::open(&problem).unwrap()).unwrap();
    let opts = sdkrylov::solvers::SolveOptions {
        rule: sdkrylov::regparam::SelectionRule::Optimal {
            truth: tp.s_true.clone(),
        },
        ..Default::default()
    };
    let r = sdkrylov::solvers::genhybr(&tp.problem, &opts).unwrap();

    let sidecar = fs::read_to_string(out.join("scaling.txt")).unwrap();
    let get = |k: &str| -> f64 {
        sidecar
            .lines()
            .find_map(|l| l.strip_prefix(&format!("{k} = ")))
            .unwrap()
            .parse()
            .unwrap()
    };
    for (name, values) in [("s", &r.s), ("s1", &r.s1)] {
        let (w, h, samples) = read_pgm(&out.join(format!("{name}.pgm")));
        assert_eq!((w, h), (16, 16));
        let (lo, hi) = (get(&format!("{name}.min")), get(&format!("{name}.max")));
        let step = (hi - lo) / 65535.0;
        for (q, v) in samples.iter().zip(values.iter()) {
            let back = lo + *q as f64 * step;
            assert!((back - v).abs() <= 0.5 * step + 1e-12 * hi.abs().max(lo.abs()));
        }
    }
    assert!(out.join("s2.pgm").exists());
}

#[test]
fn compare_is_deterministic_and_reports_parameters() {
    let dir = TempDir::new().unwrap();
    let problem = gen(dir.path(), CUSTOM, "p");
    let cfg = format!("{CUSTOM}[solver]\nrule = dp\n");
    let (o1, out1) = command(dir.path(), "compare", &cfg, &problem, "c1");
    let (o2, out2) = command(dir.path(), "compare", &cfg, &problem, "c2");
    assert!(
        o1.status.success() && o2.status.success(),
        "{}",
        stderr(&o1)
    );
    assert_eq!(
        fs::read(out1.join("compare.csv")).unwrap(),
        fs::read(out2.join("compare.csv")).unwrap()
    );
    let (header, rows) = csv_rows(&out1.join("summary.csv"));
    assert_eq!(
        column(&header, &rows, "method"),
        ["sdhybr", "genhybr", "fhybr"]
    );
    for name in ["lambda", "alpha", "relerr", "wall_time"] {
        assert!(
            column(&header, &rows, name).iter().all(|v| !v.is_empty()),
            "{name}"
        );
    }
    let text = stdout(&o1);
    assert!(text.contains("rule = dp"));
    assert_eq!(text.matches("lambda =").count(), 3);
}

#[test]
fn compare_can_include_alternating() {
    let dir = TempDir::new().unwrap();
    let problem = gen(dir.path(), CUSTOM, "p");
    let cfg = format!("{CUSTOM}[solver]\nalternating = true\n");
    let (o, out) = command(dir.path(), "compare", &cfg, &problem, "c");
    assert!(o.status.success(), "{}", stderr(&o));
    let (header, rows) = csv_rows(&out.join("summary.csv"));
    assert_eq!(column(&header, &rows, "method").len(), 4);
    assert_eq!(column(&header, &rows, "status")[3], "ok");
}

fn sweep_min(dir: &Path, problem: &Path, points: usize, name: &str) -> (usize, f64) {
    let cfg = format!("{CUSTOM}[sweep]\npoints = {points}\niters = 10\n");
    let (o, out) = command(dir, "sweep", &cfg, problem, name);
    assert!(o.status.success(), "{}", stderr(&o));
    let (header, rows) = csv_rows(&out.join("sweep.csv"));
    let errs = floats(&column(&header, &rows, "relerr"));
    (
        rows.len(),
        errs.iter().copied().fold(f64::INFINITY, f64::min),
    )
}

#[test]
fn sweep_grid_has_one_row_per_pair() {
    let dir = TempDir::new().unwrap();
    let problem = gen(dir.path(), CUSTOM, "p");
    assert_eq!(sweep_min(dir.path(), &problem, 3, "s3").0, 9);
}

#[test]
fn refined_sweep_never_raises_the_minimum() {
    let dir = TempDir::new().unwrap();
    let problem = gen(dir.path(), CUSTOM, "p");
    let (_, coarse) = sweep_min(dir.path(), &problem, 9, "s9");
    let (rows, fine) = sweep_min(dir.path(), &problem, 17, "s17");
    assert_eq!(rows, 289);
    assert!(fine <= coarse);
}

#[test]
fn sweep_minimum_bounds_a_fixed_solve_on_the_grid() {
    let dir = TempDir::new().unwrap();
    let problem = gen(dir.path(), CUSTOM, "p");
    let (_, best) = sweep_min(dir.path(), &problem, 3, "s");
    // (1e-2, 1e-6) is a node of the 3-point grid over [1e-6, 1e2].
    let cfg = format!(
        "{CUSTOM}[solver]\nrule = fixed\nlambda = 0.01\nalpha = 0.000001\nmax_iter = 10\ngcv_tol = 0\nwindow = 1000\n"
    );
    let (o, out) = command(dir.path(), "solve", &cfg, &problem, "f");
    assert!(o.status.success(), "{}", stderr(&o));
    let (header, rows) = csv_rows(&out.join("history.csv"));
    assert_eq!(rows.len(), 10);
    let last = floats(&column(&header, &rows, "relerr"))[9];
    assert!(best <= last);
}

#[test]
fn thread_variable_is_validated() {
    let dir = TempDir::new().unwrap();
    let problem = gen(dir.path(), CUSTOM, "p");
    let cfg = write_config(dir.path(), "c.cfg", CUSTOM);
    let base = |threads: &str| {
        Command::new(BIN)
            .args([
                "compare",
                "--config",
                cfg.to_str().unwrap(),
                "--problem",
                problem.to_str().unwrap(),
            ])
            .current_dir(dir.path())
            .env("SDKRYLOV_THREADS", threads)
            .output()
            .unwrap()
    };
    assert!(base("1").status.success());
    let bad = base("zero");
    assert_eq!(bad.status.code(), Some(1));
    assert!(stderr(&bad).contains("SDKRYLOV_THREADS"));
}

#[test]
fn mm_method_reports_full_space_history() {
    let dir = TempDir::new().unwrap();
    // The dense reference is meant for small problems.
    let small = "[problem]\nkind = custom\nside = 24\n";
    let problem = gen(dir.path(), small, "p");
    let cfg = format!("{small}[solver]\nmethod = mm\nlambda = 0.1\nalpha = 0.1\nmax_iter = 5\n");
    let (o, out) = command(dir.path(), "solve", &cfg, &problem, "m");
    assert!(o.status.success(), "{}", stderr(&o));
    let (header, rows) = csv_rows(&out.join("history.csv"));
    assert_eq!(rows.len(), 5);
    assert!(column(&header, &rows, "gcv").iter().all(String::is_empty));
    assert!(stdout(&o).contains("converged"));
}
