//! Config-driven experiment runner.
//!
//! One run samples a fine Brownian ensemble, solves the configured scheme at
//! every ladder level on the same noise, measures errors and fits rates.
//!
//! Exit codes: 0 on success, 2 for an invalid configuration, 3 when the
//! Picard iteration fails to converge, 1 for any other failure.

pub mod config;
pub mod plot;

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Context;
use clap::Parser;
use serde::Serialize;

use crate::analysis::{error_report, error_report_against, fit_rate, ErrorReport, RateFit};
use crate::error::BsdeError;
use crate::paths::{sample_ensemble, Partition};
use crate::schemes::solve;
pub use config::{parse, ConfigError, Resolved, RunConfig};
pub use plot::{emit_plot, PlotOutcome};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_PICARD: i32 = 3;

pub const CSV_COLUMNS: [&str; 11] = [
    "scheme",
    "problem",
    "n",
    "mesh",
    "err_Y_max_p",
    "err_Y_stderr",
    "err_Z_int_L2",
    "err_Z_stderr",
    "err_max_joint_p",
    "picard_max_iters",
    "wall_ms",
];

#[derive(Debug, Parser)]
#[command(name = "bsde", version, about = "Run a BSDE convergence experiment from a JSON config")]
pub struct Args {
    /// JSON run configuration.
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory, overriding `output` in the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Seed override.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads; defaults to the available parallelism.
    #[arg(long)]
    pub threads: Option<usize>,
    /// Do not write plot.svg.
    #[arg(long)]
    pub no_plot: bool,
    /// Also fill the wall_ms column of results.csv (makes it run-dependent).
    #[arg(long)]
    pub wall_time: bool,
}

/// One ladder level.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub scheme: String,
    pub problem: String,
    pub n: usize,
    pub mesh: f64,
    pub report: ErrorReport,
    pub picard_max_iters: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(untagged)]
pub enum RateEntry {
    Fit(RateFit),
    Unavailable { error: String },
}

#[derive(Debug, Clone)]
pub struct Experiment {
    pub rows: Vec<ResultRow>,
    pub wall_ms: Vec<f64>,
    pub rates: BTreeMap<String, RateEntry>,
    pub warnings: Vec<String>,
}

/// Solve every ladder level of a resolved configuration.
pub fn execute(resolved: &Resolved) -> crate::Result<Experiment> {
    let cfg = &resolved.config;
    let problem = &resolved.problem;
    let fine = Partition::uniform(cfg.horizon, cfg.fine_n)?;
    let ensemble = sample_ensemble(&fine, cfg.n_paths, cfg.seed)?;
    let kind = cfg.scheme.kind;
    let run = |part: &Partition| solve(kind, problem, part, &ensemble, &resolved.estimator, &resolved.scheme);

    let fine_solution = if problem.reference.is_none() {
        log::info!("`{}` has no closed form; measuring against n = {}", problem.name, cfg.fine_n);
        Some(run(&fine)?)
    } else {
        None
    };

    let mut rows = Vec::with_capacity(cfg.ladder.len());
    let mut wall_ms = Vec::with_capacity(cfg.ladder.len());
    let mut warnings = Vec::new();
    for &n in &cfg.ladder {
        let part = fine.coarse_uniform(n)?;
        let start = Instant::now();
        let sol = run(&part)?;
        wall_ms.push(start.elapsed().as_secs_f64() * 1e3);
        let report = match &fine_solution {
            Some(reference) => error_report_against(&sol, reference, cfg.p)?,
            None => error_report(&sol, problem, &ensemble, cfg.p)?,
        };
        warnings.extend(sol.warnings.iter().map(|w| format!("n = {n}: {w}")));
        rows.push(ResultRow {
            scheme: kind.as_str().to_string(),
            problem: problem.name.clone(),
            n,
            mesh: part.mesh(),
            report,
            picard_max_iters: sol.picard.as_ref().map(|s| s.max_iters()),
        });
    }
    let rates = plot::series(&rows)
        .into_iter()
        .map(|(name, levels)| {
            let entry = match fit_rate(&levels) {
                Ok(fit) => RateEntry::Fit(fit),
                Err(e) => RateEntry::Unavailable { error: e.to_string() },
            };
            (name.to_string(), entry)
        })
        .collect();
    Ok(Experiment {
        rows,
        wall_ms,
        rates,
        warnings,
    })
}

fn num(x: f64) -> String {
    format!("{x:.16e}")
}

/// `results.csv` contents; `wall_ms` is filled only when given.
pub fn results_csv(rows: &[ResultRow], wall_ms: Option<&[f64]>) -> anyhow::Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_COLUMNS)?;
    for (k, r) in rows.iter().enumerate() {
        let e = &r.report;
        w.write_record([
            r.scheme.clone(),
            r.problem.clone(),
            r.n.to_string(),
            num(r.mesh),
            num(e.err_y_max_p),
            num(e.err_y_stderr),
            num(e.err_z_int_l2),
            num(e.err_z_stderr),
            num(e.err_max_joint_p),
            r.picard_max_iters.map(|k| k.to_string()).unwrap_or_default(),
            wall_ms.map(|t| num(t[k])).unwrap_or_default(),
        ])?;
    }
    Ok(w.into_inner()?)
}

fn write_outputs(dir: &Path, resolved: &Resolved, exp: &Experiment, args: &Args) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let wall = args.wall_time.then_some(exp.wall_ms.as_slice());
    std::fs::write(dir.join("results.csv"), results_csv(&exp.rows, wall)?)?;
    std::fs::write(
        dir.join("rates.json"),
        serde_json::to_string_pretty(&exp.rates)? + "\n",
    )?;
    std::fs::write(
        dir.join("resolved-config.json"),
        serde_json::to_string_pretty(&resolved.config)? + "\n",
    )?;
    let mut t = csv::Writer::from_writer(Vec::new());
    t.write_record(["n", "wall_ms"])?;
    for (r, ms) in exp.rows.iter().zip(&exp.wall_ms) {
        t.write_record([r.n.to_string(), format!("{ms:.3}")])?;
    }
    std::fs::write(dir.join("timings.csv"), t.into_inner()?)?;
    if !args.no_plot {
        match emit_plot(&exp.rows, dir)? {
            PlotOutcome::Written => {}
            PlotOutcome::Skipped(reason) => eprintln!("notice: plot skipped: {reason}"),
            PlotOutcome::NoRows => eprintln!("notice: no rows, plot not written"),
        }
    }
    Ok(())
}

fn load(args: &Args) -> Result<Resolved, (i32, String)> {
    let text = std::fs::read_to_string(&args.config)
        .map_err(|e| (EXIT_CONFIG, format!("cannot read {}: {e}", args.config.display())))?;
    let located = |e: ConfigError| (EXIT_CONFIG, format!("{}: {e}", args.config.display()));
    let mut cfg = parse(&text).map_err(located)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &args.out {
        cfg.output = out.clone();
    }
    cfg.resolve(&text).map_err(located)
}

fn run_parsed(args: &Args) -> Result<(), (i32, String)> {
    let resolved = load(args)?;
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(k) = args.threads {
        if k == 0 {
            return Err((EXIT_CONFIG, "--threads must be at least 1".into()));
        }
        pool = pool.num_threads(k);
    }
    let pool = pool
        .build()
        .map_err(|e| (EXIT_FAILURE, format!("thread pool: {e}")))?;
    let exp = pool.install(|| execute(&resolved)).map_err(|e| {
        let code = match e {
            BsdeError::PicardDiverged { .. } => EXIT_PICARD,
            _ => EXIT_FAILURE,
        };
        (code, e.to_string())
    })?;
    for w in &exp.warnings {
        log::warn!("{w}");
    }
    write_outputs(&resolved.config.output, &resolved, &exp, args)
        .map_err(|e| (EXIT_FAILURE, format!("{e:#}")))
}

/// Parse `argv` and run; returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args = match Args::try_parse_from(argv) {
        Ok(a) => a,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match run_parsed(&args) {
        Ok(()) => EXIT_OK,
        Err((code, msg)) => {
            eprintln!("error: {msg}");
            code
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_config(dir: &Path, body: &str) -> PathBuf {
        let path = dir.join("config.json");
        std::fs::write(&path, body).unwrap();
        path
    }

    fn run_in(dir: &Path, body: &str, extra: &[&str]) -> i32 {
        let cfg = write_config(dir, body);
        let out = dir.join("out");
        let mut argv = vec![
            "bsde".to_string(),
            "--config".into(),
            cfg.display().to_string(),
            "--out".into(),
            out.display().to_string(),
        ];
        argv.extend(extra.iter().map(|s| s.to_string()));
        run(argv)
    }

    const MARTINGALE: &str = r#"{"problem": "martingale", "scheme": "explicit", "estimator": "exact",
        "ladder": [4, 8], "fine_n": 64, "n_paths": 1000, "seed": 7}"#;

    #[test]
    fn martingale_run_writes_exact_rows() {
        let dir = tempfile::tempdir().unwrap();
        assert_eq!(run_in(dir.path(), MARTINGALE, &[]), EXIT_OK);
        let out = dir.path().join("out");
        let csv = std::fs::read_to_string(out.join("results.csv")).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], CSV_COLUMNS.join(","));
        assert_eq!(lines.len(), 3);
        for line in &lines[1..] {
            let cols: Vec<&str> = line.split(',').collect();
            assert_eq!(cols.len(), 11);
            assert!(cols[4].parse::<f64>().unwrap() <= 1e-12);
            assert_eq!(cols[10], "");
        }
        let rates: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(out.join("rates.json")).unwrap()).unwrap();
        assert!(rates["err_Y_max_p"]["error"].is_string());
        let echo: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(out.join("resolved-config.json")).unwrap())
                .unwrap();
        assert_eq!(echo["scheme"]["picard"]["tol"], 1e-10);
        assert!(out.join("timings.csv").exists());
        assert!(!out.join("plot.svg").exists());
    }

    #[test]
    fn unknown_scheme_exits_two() {
        let dir = tempfile::tempdir().unwrap();
        let body = MARTINGALE.replace("\"explicit\"", "\"midpoint\"");
        assert_eq!(run_in(dir.path(), &body, &[]), EXIT_CONFIG);
        assert!(!dir.path().join("out").exists());
    }

    #[test]
    fn picard_failure_exits_three() {
        let dir = tempfile::tempdir().unwrap();
        let body = r#"{"problem": {"name": "linear_const", "params": {"a": 0.1, "b": 0.2}},
            "scheme": {"kind": "implicit", "picard": {"tol": 1e-10, "max_iter": 1}},
            "estimator": "exact", "ladder": [4], "fine_n": 8, "n_paths": 50}"#;
        assert_eq!(run_in(dir.path(), body, &[]), EXIT_PICARD);
    }

    #[test]
    fn missing_config_flag_is_a_usage_error() {
        assert_eq!(run(["bsde"]), EXIT_CONFIG);
    }

    #[test]
    fn rates_and_plot_for_a_converging_ladder() {
        let dir = tempfile::tempdir().unwrap();
        let body = r#"{"problem": {"name": "linear_const", "params": {"a": 0.1, "b": 0.2}},
            "scheme": "implicit", "estimator": "exact",
            "ladder": [4, 8, 16], "fine_n": 64, "n_paths": 500, "seed": 3}"#;
        assert_eq!(run_in(dir.path(), body, &["--wall-time"]), EXIT_OK);
        let out = dir.path().join("out");
        let rates: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(out.join("rates.json")).unwrap()).unwrap();
        for key in ["err_Y_max_p", "err_Z_int_L2", "err_max_joint_p"] {
            let r = &rates[key];
            assert!(r["slope"].is_number() && r["intercept"].is_number() && r["r_squared"].is_number());
            assert_eq!(r["levels"].as_array().unwrap().len(), 3);
        }
        assert!(out.join("plot.svg").exists());
        let csv = std::fs::read_to_string(out.join("results.csv")).unwrap();
        let row: Vec<&str> = csv.lines().nth(1).unwrap().split(',').collect();
        assert_eq!(row[9], "2");
        assert!(row[10].parse::<f64>().unwrap() >= 0.0);
    }

    #[test]
    fn self_convergence_without_closed_form() {
        let dir = tempfile::tempdir().unwrap();
        let body = r#"{"problem": "smooth_terminal", "scheme": "explicit",
            "estimator": {"kind": "lsmc", "params": {"degree": 3}},
            "ladder": [2, 4, 8], "fine_n": 16, "n_paths": 2000, "seed": 1}"#;
        assert_eq!(run_in(dir.path(), body, &["--no-plot"]), EXIT_OK);
        let csv = std::fs::read_to_string(dir.path().join("out/results.csv")).unwrap();
        assert_eq!(csv.lines().count(), 4);
    }
}
