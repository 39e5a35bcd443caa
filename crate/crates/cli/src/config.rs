//! Plain-text run configuration: `key = value` lines, `#` comments, and
//! optional `[problem]`, `[solver]`, `[output]` and `[sweep]` section headers.
//! Keys outside a section carry their block as a dotted prefix.

use std::collections::HashSet;
use std::path::PathBuf;

use nalgebra::DVector;
use sdkrylov::problems::{ProblemKind, ProblemSpec};
use sdkrylov::regparam::{SelectionRule, StoppingPolicy};
use sdkrylov::solvers::{AlternatingOptions, SolveOptions, DEFAULT_EPSILON};

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Sdhybr,
    Genhybr,
    Fhybr,
    Alternating,
    SdhybrAlt,
    Mm,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Sdhybr => "sdhybr",
            Method::Genhybr => "genhybr",
            Method::Fhybr => "fhybr",
            Method::Alternating => "alternating",
            Method::SdhybrAlt => "sdhybr_alt",
            Method::Mm => "mm",
        }
    }

    fn parse(key: &str, value: &str) -> Result<Self, CliError> {
        Ok(match value {
            "sdhybr" => Method::Sdhybr,
            "genhybr" => Method::Genhybr,
            "fhybr" => Method::Fhybr,
            "alternating" => Method::Alternating,
            "sdhybr_alt" => Method::SdhybrAlt,
            "mm" => Method::Mm,
            _ => {
                return Err(bad_value(
                    key,
                    value,
                    "sdhybr, genhybr, fhybr, alternating, sdhybr_alt or mm",
                ))
            }
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RuleKind {
    Optimal,
    Upre,
    Dp,
    Wgcv,
    Fixed,
}

impl RuleKind {
    fn parse(key: &str, value: &str) -> Result<Self, CliError> {
        Ok(match value {
            "optimal" => RuleKind::Optimal,
            "upre" => RuleKind::Upre,
            "dp" => RuleKind::Dp,
            "wgcv" => RuleKind::Wgcv,
            "fixed" => RuleKind::Fixed,
            _ => return Err(bad_value(key, value, "optimal, upre, dp, wgcv or fixed")),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    pub method: Method,
    pub rule: RuleKind,
    pub max_iter: usize,
    pub epsilon: f64,
    pub tau: f64,
    pub gcv_tol: f64,
    pub window: usize,
    pub lambda: Option<f64>,
    pub alpha: Option<f64>,
    /// `α/λ` for the appendix variant.
    pub lambda_ratio: f64,
    pub reorthogonalize: bool,
    pub max_sweeps: usize,
    pub inner_budget: usize,
    pub sweep_tol: f64,
    /// Adds the alternating baseline to `compare`.
    pub alternating: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        let stop = StoppingPolicy::default();
        let alt = AlternatingOptions::default();
        Self {
            method: Method::Sdhybr,
            rule: RuleKind::Wgcv,
            max_iter: stop.max_iter,
            epsilon: DEFAULT_EPSILON,
            tau: 1.0,
            gcv_tol: stop.gcv_tol,
            window: stop.window,
            lambda: None,
            alpha: None,
            lambda_ratio: 1.0,
            reorthogonalize: true,
            max_sweeps: alt.max_sweeps,
            inner_budget: alt.inner_budget,
            sweep_tol: alt.tol,
            alternating: false,
        }
    }
}

impl SolverConfig {
    /// Fixed parameters, required by `rule = fixed` and `method = mm`.
    pub fn fixed_params(&self) -> Result<(f64, f64), CliError> {
        match (self.lambda, self.alpha) {
            (Some(l), Some(a)) => Ok((l, a)),
            (None, _) => Err(CliError::Config(
                "`solver.lambda` is required for fixed parameters".into(),
            )),
            (_, None) => Err(CliError::Config(
                "`solver.alpha` is required for fixed parameters".into(),
            )),
        }
    }

    pub fn selection_rule(&self, truth: &DVector<f64>) -> Result<SelectionRule, CliError> {
        Ok(match self.rule {
            RuleKind::Optimal => SelectionRule::Optimal {
                truth: truth.clone(),
            },
            RuleKind::Upre => SelectionRule::Upre,
            RuleKind::Dp => SelectionRule::Dp { tau: self.tau },
            RuleKind::Wgcv => SelectionRule::Wgcv,
            RuleKind::Fixed => {
                let (lambda, alpha) = self.fixed_params()?;
                SelectionRule::Fixed { lambda, alpha }
            }
        })
    }

    pub fn stopping(&self) -> StoppingPolicy {
        StoppingPolicy {
            max_iter: self.max_iter,
            gcv_tol: self.gcv_tol,
            window: self.window,
        }
    }

    pub fn solve_options(&self, truth: &DVector<f64>) -> Result<SolveOptions, CliError> {
        Ok(SolveOptions {
            rule: self.selection_rule(truth)?,
            stopping: self.stopping(),
            epsilon: self.epsilon,
            reorthogonalize: self.reorthogonalize,
            ..SolveOptions::default()
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutputConfig {
    pub dir: Option<PathBuf>,
    pub csv: bool,
    pub pgm: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: None,
            csv: true,
            pgm: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    pub points: usize,
    pub log_min: f64,
    pub log_max: f64,
    /// Iterations per grid point.
    pub iters: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            points: 9,
            log_min: -6.0,
            log_max: 2.0,
            iters: 20,
        }
    }
}

impl SweepConfig {
    /// `log₁₀` grid values; `min + (max − min)·i/(p − 1)` keeps refined grids nested.
    pub fn log_values(&self) -> Vec<f64> {
        if self.points == 1 {
            return vec![self.log_min];
        }
        let span = self.log_max - self.log_min;
        (0..self.points)
            .map(|i| self.log_min + span * i as f64 / (self.points - 1) as f64)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub problem: ProblemSpec,
    pub solver: SolverConfig,
    pub output: OutputConfig,
    pub sweep: SweepConfig,
}

pub const MAX_SWEEP_POINTS: usize = 101;

fn bad_value(key: &str, value: &str, expected: &str) -> CliError {
    CliError::Config(format!(
        "`{key}`: invalid value `{value}`, expected {expected}"
    ))
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, CliError> {
    value
        .parse()
        .map_err(|_| CliError::Config(format!("`{key}`: cannot parse `{value}`")))
}

fn flag(key: &str, value: &str) -> Result<bool, CliError> {
    match value {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(bad_value(key, value, "true or false")),
    }
}

fn ensure(ok: bool, key: &str, range: &str) -> Result<(), CliError> {
    if ok {
        Ok(())
    } else {
        Err(CliError::Config(format!("`{key}` must be {range}")))
    }
}

/// Splits the text into fully qualified `(block.key, value, line)` entries.
fn entries(text: &str) -> Result<Vec<(String, String, usize)>, CliError> {
    let mut out = Vec::new();
    let mut section: Option<String> = None;
    let mut seen = HashSet::new();
    for (i, raw) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            let name = name.trim();
            if !matches!(name, "problem" | "solver" | "output" | "sweep") {
                return Err(CliError::Config(format!(
                    "line {lineno}: unknown section `{name}`"
                )));
            }
            section = Some(name.to_string());
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("line {lineno}: expected `key = value`")))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(CliError::Config(format!("line {lineno}: empty key")));
        }
        let key = match &section {
            Some(s) if !k.contains('.') => format!("{s}.{k}"),
            _ => k.to_string(),
        };
        if !seen.insert(key.clone()) {
            return Err(CliError::Config(format!(
                "line {lineno}: duplicate key `{key}`"
            )));
        }
        out.push((key, v.to_string(), lineno));
    }
    Ok(out)
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let entries = entries(text)?;
        let kind = match entries.iter().find(|(k, _, _)| k == "problem.kind") {
            Some((k, v, _)) => v
                .parse::<ProblemKind>()
                .map_err(|_| bad_value(k, v, "case1, case2 or custom"))?,
            None => ProblemKind::Case1,
        };
        let mut cfg = RunConfig {
            problem: ProblemSpec::new(kind),
            solver: SolverConfig::default(),
            output: OutputConfig::default(),
            sweep: SweepConfig::default(),
        };
        for (key, value, _) in &entries {
            cfg.set(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let (block, name) = key
            .split_once('.')
            .ok_or_else(|| CliError::Config(format!("unknown key `{key}`")))?;
        match block {
            "problem" if name == "kind" => Ok(()),
            "problem" => self.problem.set(name, value).map_err(|e| match e {
                sdkrylov::Error::InvalidParameter(msg) if msg.starts_with("unknown key") => {
                    CliError::Config(format!("unknown key `{key}`"))
                }
                other => CliError::Config(format!("`{key}`: {other}")),
            }),
            "solver" => self.set_solver(key, name, value),
            "output" => self.set_output(key, name, value),
            "sweep" => self.set_sweep(key, name, value),
            _ => Err(CliError::Config(format!("unknown key `{key}`"))),
        }
    }

    fn set_solver(&mut self, key: &str, name: &str, value: &str) -> Result<(), CliError> {
        let s = &mut self.solver;
        match name {
            "method" => s.method = Method::parse(key, value)?,
            "rule" => s.rule = RuleKind::parse(key, value)?,
            "max_iter" => s.max_iter = num(key, value)?,
            "epsilon" => s.epsilon = num(key, value)?,
            "tau" => s.tau = num(key, value)?,
            "gcv_tol" => s.gcv_tol = num(key, value)?,
            "window" => s.window = num(key, value)?,
            "lambda" => s.lambda = Some(num(key, value)?),
            "alpha" => s.alpha = Some(num(key, value)?),
            "lambda_ratio" => s.lambda_ratio = num(key, value)?,
            "reorthogonalize" => s.reorthogonalize = flag(key, value)?,
            "max_sweeps" => s.max_sweeps = num(key, value)?,
            "inner_budget" => s.inner_budget = num(key, value)?,
            "sweep_tol" => s.sweep_tol = num(key, value)?,
            "alternating" => s.alternating = flag(key, value)?,
            _ => return Err(CliError::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    fn set_output(&mut self, key: &str, name: &str, value: &str) -> Result<(), CliError> {
        match name {
            "dir" => self.output.dir = Some(PathBuf::from(value)),
            "formats" => {
                self.output.csv = false;
                self.output.pgm = false;
                for f in value.split(',').map(str::trim).filter(|f| !f.is_empty()) {
                    match f {
                        "csv" => self.output.csv = true,
                        "pgm" => self.output.pgm = true,
                        _ => return Err(bad_value(key, f, "a list of csv and pgm")),
                    }
                }
            }
            _ => return Err(CliError::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    fn set_sweep(&mut self, key: &str, name: &str, value: &str) -> Result<(), CliError> {
        match name {
            "points" => self.sweep.points = num(key, value)?,
            "log_min" => self.sweep.log_min = num(key, value)?,
            "log_max" => self.sweep.log_max = num(key, value)?,
            "iters" => self.sweep.iters = num(key, value)?,
            _ => return Err(CliError::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    fn validate(&self) -> Result<(), CliError> {
        self.problem
            .validate()
            .map_err(|e| CliError::Config(format!("problem block: {e}")))?;
        let s = &self.solver;
        ensure(s.max_iter >= 1, "solver.max_iter", ">= 1")?;
        ensure(
            s.epsilon > 0.0 && s.epsilon.is_finite(),
            "solver.epsilon",
            "finite and > 0",
        )?;
        ensure(
            s.tau >= 1.0 && s.tau.is_finite(),
            "solver.tau",
            "finite and >= 1",
        )?;
        ensure(
            s.gcv_tol >= 0.0 && s.gcv_tol.is_finite(),
            "solver.gcv_tol",
            "finite and >= 0",
        )?;
        ensure(s.window >= 1, "solver.window", ">= 1")?;
        for (key, v) in [("solver.lambda", s.lambda), ("solver.alpha", s.alpha)] {
            if let Some(v) = v {
                ensure(v >= 0.0 && v.is_finite(), key, "finite and >= 0")?;
            }
        }
        ensure(
            s.lambda_ratio >= 0.0 && s.lambda_ratio.is_finite(),
            "solver.lambda_ratio",
            "finite and >= 0",
        )?;
        ensure(s.max_sweeps >= 1, "solver.max_sweeps", ">= 1")?;
        ensure(s.inner_budget >= 1, "solver.inner_budget", ">= 1")?;
        ensure(
            s.sweep_tol >= 0.0 && s.sweep_tol.is_finite(),
            "solver.sweep_tol",
            "finite and >= 0",
        )?;
        if s.rule == RuleKind::Fixed || s.method == Method::Mm {
            s.fixed_params()?;
        }
        let w = &self.sweep;
        ensure(
            (1..=MAX_SWEEP_POINTS).contains(&w.points),
            "sweep.points",
            "between 1 and 101",
        )?;
        ensure(
            w.log_min.is_finite() && w.log_min.abs() <= 300.0,
            "sweep.log_min",
            "within [-300, 300]",
        )?;
        ensure(
            w.log_max.is_finite() && w.log_max.abs() <= 300.0,
            "sweep.log_max",
            "within [-300, 300]",
        )?;
        ensure(w.log_min <= w.log_max, "sweep.log_min", "<= sweep.log_max")?;
        ensure(w.iters >= 1, "sweep.iters", ">= 1")?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sections_and_dotted_keys_agree() {
        let a =
            RunConfig::parse("[problem]\nkind = case1\nseed = 4\n[solver]\nrule = dp\n").unwrap();
        let b =
            RunConfig::parse("problem.kind = case1\nproblem.seed = 4\nsolver.rule = dp\n").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.problem.seed, 4);
        assert_eq!(a.solver.rule, RuleKind::Dp);
    }

    #[test]
    fn kind_sets_defaults_before_other_keys() {
        let c = RunConfig::parse("problem.side = 16\nproblem.kind = custom\n").unwrap();
        assert_eq!(c.problem.kind, ProblemKind::Custom);
        assert_eq!(c.problem.side, 16);
    }

    #[test]
    fn unknown_keys_are_named() {
        for text in [
            "foo = 1",
            "problem.foo = 1",
            "solver.foo = 1",
            "[output]\nfoo = 1",
            "bar.foo = 1",
        ] {
            let err = RunConfig::parse(text).unwrap_err();
            assert!(matches!(err, CliError::Config(_)));
            assert!(err.to_string().contains("foo"), "{err}");
        }
    }

    #[test]
    fn ranges_are_checked() {
        for (text, key) in [
            ("solver.max_iter = 0", "max_iter"),
            ("solver.tau = 0.5", "tau"),
            ("solver.epsilon = 0", "epsilon"),
            ("solver.rule = fixed\nsolver.alpha = 1", "lambda"),
            ("solver.method = mm\nsolver.lambda = 1", "alpha"),
            ("sweep.points = 0", "points"),
            ("problem.nlevel = -1", "nlevel"),
            ("problem.side = x", "side"),
            ("solver.rule = best", "rule"),
            ("output.formats = png", "formats"),
            ("solver.rule = dp\nsolver.rule = upre", "rule"),
        ] {
            let err = RunConfig::parse(text).unwrap_err();
            assert!(err.to_string().contains(key), "{text}: {err}");
        }
    }

    #[test]
    fn sweep_grids_nest() {
        let coarse = SweepConfig {
            points: 9,
            ..SweepConfig::default()
        }
        .log_values();
        let fine = SweepConfig {
            points: 17,
            ..SweepConfig::default()
        }
        .log_values();
        for (i, v) in coarse.iter().enumerate() {
            assert_eq!(*v, fine[2 * i]);
        }
    }
}
