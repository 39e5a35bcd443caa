use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use sdkrylov::fggk::OpCounts;
use sdkrylov::mm::{direct_map_small, mm_solve, MmProblem, DEFAULT_MAP_TOL};
use sdkrylov::problems::{generate, read_container, write_container, TestProblem};
use sdkrylov::regparam::{SelectionRule, StopReason};
use sdkrylov::solvers::{
    alternating, fhybr, genhybr, rel_error, sdhybr, sdhybr_alt, AlternatingOptions, IterRecord,
    SolveResult,
};

use crate::config::{Method, RunConfig, SolverConfig};
use crate::error::CliError;
use crate::output::{
    history_fields, num, opt, write_file, write_history, write_images, CsvFile, HISTORY_HEADER,
};

pub const PROBLEM_FILE: &str = "problem.sdkp";
pub const DESCRIPTOR_FILE: &str = "problem.txt";
pub const THREADS_VAR: &str = "SDKRYLOV_THREADS";

/// Output directory from `--out`, then `output.dir`, then the working directory; created if missing.
pub fn out_dir(cli: Option<&Path>, cfg: &RunConfig) -> Result<PathBuf, CliError> {
    let dir = cli
        .map(Path::to_path_buf)
        .or_else(|| cfg.output.dir.clone())
        .unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    Ok(dir)
}

pub fn load_config(path: &Path) -> Result<RunConfig, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    RunConfig::parse(&text)
}

/// Worker pool sized by `SDKRYLOV_THREADS` when set.
pub fn thread_pool() -> Result<rayon::ThreadPool, CliError> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var(THREADS_VAR) {
        let n: usize = v.trim().parse().ok().filter(|&n| n >= 1).ok_or_else(|| {
            CliError::Config(format!(
                "`{THREADS_VAR}` must be a positive integer, got `{v}`"
            ))
        })?;
        builder = builder.num_threads(n);
    }
    builder
        .build()
        .map_err(|e| CliError::Config(format!("cannot start worker pool: {e}")))
}

fn load_problem(path: Option<&Path>) -> Result<TestProblem, CliError> {
    let path =
        path.ok_or_else(|| CliError::Config("`--problem` is required for this command".into()))?;
    let file = File::open(path).map_err(|e| CliError::io(path, e))?;
    read_container(&mut BufReader::new(file)).map_err(|e| CliError::io(path, e))
}

pub fn cmd_gen(cfg: &RunConfig, out: &Path) -> Result<String, CliError> {
    let tp = generate(&cfg.problem).map_err(|e| match e {
        sdkrylov::Error::InvalidParameter(msg) => CliError::Config(msg),
        other => CliError::Solver(format!("generation failed: {other}")),
    })?;
    let path = out.join(PROBLEM_FILE);
    let file = File::create(&path).map_err(|e| CliError::io(&path, e))?;
    let mut w = BufWriter::new(file);
    write_container(&mut w, &tp).map_err(|e| CliError::io(&path, e))?;
    w.flush().map_err(|e| CliError::io(&path, e))?;
    write_file(
        &out.join(DESCRIPTOR_FILE),
        tp.descriptor.to_text().as_bytes(),
    )?;
    Ok(format!(
        "generated {} problem: m = {}, n = {}, seed = {}, sigma = {}\n",
        cfg.problem.kind.as_str(),
        tp.descriptor.m,
        tp.descriptor.n,
        tp.seed,
        tp.descriptor.sigma
    ))
}

/// Runs one method on the problem.
fn run_method(method: Method, sc: &SolverConfig, tp: &TestProblem) -> Result<SolveResult, String> {
    let mut opts = sc.solve_options(&tp.s_true).map_err(|e| e.to_string())?;
    opts.truth = Some(Arc::new(tp.truth()));
    let p = &tp.problem;
    let res = match method {
        Method::Sdhybr => sdhybr(p, &opts),
        Method::Genhybr => genhybr(p, &opts),
        Method::Fhybr => fhybr(p, &opts),
        Method::SdhybrAlt => sdhybr_alt(p, &opts, sc.lambda_ratio),
        Method::Alternating => {
            let ao = AlternatingOptions {
                inner: opts,
                max_sweeps: sc.max_sweeps,
                inner_budget: sc.inner_budget,
                tol: sc.sweep_tol,
                s2_init: None,
            };
            alternating(p, &ao).map(|r| r.result)
        }
        Method::Mm => return run_mm(sc, tp),
    };
    res.map_err(|e| e.to_string())
}

/// Full-space reference: `max_iter` MM steps for the history, then the converged estimate.
fn run_mm(sc: &SolverConfig, tp: &TestProblem) -> Result<SolveResult, String> {
    let start = Instant::now();
    let (lambda, alpha) = sc.fixed_params().map_err(|e| e.to_string())?;
    let p = &tp.problem;
    let mp = MmProblem::new(p).map_err(|e| e.to_string())?;
    let lift = |x: &nalgebra::DVector<f64>, xi: &nalgebra::DVector<f64>| {
        let s1 = &p.mu1 + mp.smooth_part(x);
        let s2 = &p.mu2 + xi;
        let s = &s1 + &s2;
        (s1, s2, s)
    };
    let iterates =
        mm_solve(&mp, lambda, alpha, sc.epsilon, sc.max_iter).map_err(|e| e.to_string())?;
    let history = iterates
        .iter()
        .enumerate()
        .skip(1)
        .map(|(i, it)| {
            let (s1, s2, s) = lift(&it.x, &it.xi);
            IterRecord {
                iter: i,
                lambda,
                alpha,
                gcv: f64::NAN,
                res_proj: f64::NAN,
                relerr: rel_error(&s, &tp.s_true).ok(),
                relerr_s1: rel_error(&s1, &tp.s1_true).ok(),
                relerr_s2: rel_error(&s2, &tp.s2_true).ok(),
            }
        })
        .collect::<Vec<_>>();
    let fin = direct_map_small(&mp, lambda, alpha, sc.epsilon, DEFAULT_MAP_TOL)
        .map_err(|e| e.to_string())?;
    let (s1, s2, s) = lift(&fin.x, &fin.xi);
    Ok(SolveResult {
        s1,
        s2,
        s,
        selected_iter: history.len(),
        history,
        stop_reason: StopReason::Converged,
        counts: OpCounts::default(),
        v_breakdown: false,
        wall_time: start.elapsed().as_secs_f64(),
    })
}

fn final_errors(r: &SolveResult, tp: &TestProblem) -> (Option<f64>, Option<f64>, Option<f64>) {
    (
        rel_error(&r.s, &tp.s_true).ok(),
        rel_error(&r.s1, &tp.s1_true).ok(),
        rel_error(&r.s2, &tp.s2_true).ok(),
    )
}

fn summary_line(method: Method, r: &SolveResult, tp: &TestProblem) -> String {
    let (e, _, _) = final_errors(r, tp);
    let params = r
        .selected_params()
        .map(|(l, a)| format!("lambda = {l:.4e}, alpha = {a:.4e}"))
        .unwrap_or_else(|| "no parameters".into());
    format!(
        "{:<12} relerr = {}, iterations = {}, selected = {}, stop = {}, {params}, time = {:.3} s",
        method.as_str(),
        e.map(|v| format!("{v:.6}")).unwrap_or_else(|| "n/a".into()),
        r.history.len(),
        r.selected_iter,
        r.stop_reason,
        r.wall_time
    )
}

pub fn cmd_solve(cfg: &RunConfig, problem: Option<&Path>, out: &Path) -> Result<String, CliError> {
    let tp = load_problem(problem)?;
    let method = cfg.solver.method;
    let r = run_method(method, &cfg.solver, &tp)
        .map_err(|e| CliError::Solver(format!("{}: {e}", method.as_str())))?;
    if cfg.output.csv {
        write_history(&out.join("history.csv"), &r.history)?;
    }
    if cfg.output.pgm {
        if let Some((nx, _, _)) = tp.descriptor.spec.image_shape() {
            write_images(out, &[("s", &r.s), ("s1", &r.s1), ("s2", &r.s2)], nx)?;
        }
    }
    Ok(summary_line(method, &r, &tp) + "\n")
}

pub fn cmd_compare(
    cfg: &RunConfig,
    problem: Option<&Path>,
    out: &Path,
) -> Result<String, CliError> {
    let tp = load_problem(problem)?;
    let pool = thread_pool()?;
    let mut methods = vec![Method::Sdhybr, Method::Genhybr, Method::Fhybr];
    if cfg.solver.alternating {
        methods.push(Method::Alternating);
    }
    let runs: Vec<(Method, Result<SolveResult, String>)> = pool.install(|| {
        methods
            .par_iter()
            .map(|&m| (m, run_method(m, &cfg.solver, &tp)))
            .collect()
    });

    let mut header = vec!["method"];
    header.extend(HISTORY_HEADER);
    let mut csv = CsvFile::create(&out.join("compare.csv"), &header)?;
    for (m, r) in &runs {
        if let Ok(r) = r {
            for rec in &r.history {
                let mut fields = vec![m.as_str().to_string()];
                fields.extend(history_fields(rec));
                csv.row(fields)?;
            }
        }
    }
    csv.finish()?;

    let mut summary = CsvFile::create(
        &out.join("summary.csv"),
        &[
            "method",
            "status",
            "relerr",
            "relerr_s1",
            "relerr_s2",
            "iterations",
            "selected_iter",
            "stop_reason",
            "lambda",
            "alpha",
            "wall_time",
        ],
    )?;
    let mut text = format!("summary (rule = {})\n", rule_name(cfg, &tp));
    for (m, r) in &runs {
        match r {
            Ok(r) => {
                let (e, e1, e2) = final_errors(r, &tp);
                let (l, a) = r.selected_params().unwrap_or((f64::NAN, f64::NAN));
                summary.row([
                    m.as_str().to_string(),
                    "ok".into(),
                    opt(e),
                    opt(e1),
                    opt(e2),
                    r.history.len().to_string(),
                    r.selected_iter.to_string(),
                    r.stop_reason.to_string(),
                    num(l),
                    num(a),
                    num(r.wall_time),
                ])?;
                text += &summary_line(*m, r, &tp);
            }
            Err(e) => {
                summary.row([
                    m.as_str(),
                    &format!("failed: {e}"),
                    "",
                    "",
                    "",
                    "",
                    "",
                    "",
                    "",
                    "",
                    "",
                ])?;
                text += &format!("{:<12} failed: {e}", m.as_str());
            }
        }
        text.push('\n');
    }
    summary.finish()?;
    if runs.iter().all(|(_, r)| r.is_err()) {
        return Err(CliError::Solver(format!("every method failed\n{text}")));
    }
    Ok(text)
}

fn rule_name(cfg: &RunConfig, tp: &TestProblem) -> &'static str {
    cfg.solver
        .selection_rule(&tp.s_true)
        .map(|r: SelectionRule| r.name())
        .unwrap_or("invalid")
}

pub fn cmd_sweep(cfg: &RunConfig, problem: Option<&Path>, out: &Path) -> Result<String, CliError> {
    let tp = load_problem(problem)?;
    let pool = thread_pool()?;
    let logs = cfg.sweep.log_values();
    let points: Vec<(f64, f64)> = logs
        .iter()
        .flat_map(|&ll| logs.iter().map(move |&la| (10f64.powf(ll), 10f64.powf(la))))
        .collect();
    let method = cfg.solver.method;
    let results: Vec<Result<SolveResult, String>> = pool.install(|| {
        points
            .par_iter()
            .map(|&(lambda, alpha)| {
                let sc = SolverConfig {
                    rule: crate::config::RuleKind::Fixed,
                    lambda: Some(lambda),
                    alpha: Some(alpha),
                    max_iter: cfg.sweep.iters,
                    gcv_tol: 0.0,
                    window: usize::MAX,
                    ..cfg.solver.clone()
                };
                run_method(method, &sc, &tp)
            })
            .collect()
    });

    let mut csv = CsvFile::create(
        &out.join("sweep.csv"),
        &[
            "lambda",
            "alpha",
            "iterations",
            "relerr",
            "relerr_s1",
            "relerr_s2",
            "status",
        ],
    )?;
    let mut best: Option<(f64, f64, f64)> = None;
    for (&(lambda, alpha), r) in points.iter().zip(&results) {
        match r {
            Ok(r) => {
                let (e, e1, e2) = final_errors(r, &tp);
                if let Some(e) = e {
                    if best.is_none_or(|(b, _, _)| e < b) {
                        best = Some((e, lambda, alpha));
                    }
                }
                csv.row([
                    num(lambda),
                    num(alpha),
                    r.history.len().to_string(),
                    opt(e),
                    opt(e1),
                    opt(e2),
                    "ok".into(),
                ])?;
            }
            Err(e) => csv.row([
                num(lambda),
                num(alpha),
                String::new(),
                String::new(),
                String::new(),
                String::new(),
                format!("failed: {e}"),
            ])?,
        }
    }
    csv.finish()?;
    match best {
        Some((e, l, a)) => Ok(format!(
            "{} grid of {} points, {} iterations: minimum relerr = {e:.6} at lambda = {l:.4e}, alpha = {a:.4e}\n",
            method.as_str(),
            points.len(),
            cfg.sweep.iters
        )),
        None => Err(CliError::Solver(format!(
            "{}: no grid point produced an estimate",
            method.as_str()
        ))),
    }
}
