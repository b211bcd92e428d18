use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use rank2::classify::{
    classify_orbit, core_rank_method_a, core_rank_method_c, point_class, TriangularCore222, H222_TOL, ORBIT_TOL,
};
use rank2::engines::{LocalMinimum, Problem, Stationarity, DEFAULT_REL_TOL, MULTISTART_MAX_ITER};
use rank2::error::{ExistenceError, HarnessError, TensorError};
use rank2::existence::{
    decide_existence, default_dedup_eps, distinct_converged, multistart, ExistenceVerdict, MultistartConfig,
    DEFAULT_STARTS,
};
use rank2::harness::{hessian_check, simulate, table2_csv, write_outputs, SimulationConfig};
use rank2::tensor::Tensor3;

const WORKERS_ENV: &str = "RANK2_WORKERS";

#[derive(Parser)]
#[command(
    name = "rank2",
    version,
    about = "Best rank-(2,2,2) and closure-of-rank-2 approximations of order-3 tensors"
)]
struct Cli {
    /// Output format.
    #[arg(long, value_enum, default_value_t = Format::Human, global = true)]
    format: Format,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Csv,
    Human,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProblemArg {
    M222,
    S2barTriu,
    S2barRog,
}

impl From<ProblemArg> for Problem {
    fn from(p: ProblemArg) -> Self {
        match p {
            ProblemArg::M222 => Problem::M222,
            ProblemArg::S2barTriu => Problem::S2barTriu,
            ProblemArg::S2barRog => Problem::S2barRog,
        }
    }
}

#[derive(clap::Args, Clone)]
struct MultistartArgs {
    /// Number of starts (the first is the HOSVD start).
    #[arg(long, default_value_t = DEFAULT_STARTS)]
    starts: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Relative convergence tolerance.
    #[arg(long, default_value_t = DEFAULT_REL_TOL)]
    tol: f64,
    /// Squared distance under which two minima are the same [default: 0.001, or 0.1 for large tensors].
    #[arg(long)]
    dedup_eps: Option<f64>,
    #[arg(long, default_value_t = MULTISTART_MAX_ITER)]
    max_iter: usize,
}

impl MultistartArgs {
    fn config(&self, dims: [usize; 3]) -> MultistartConfig {
        MultistartConfig {
            n_starts: self.starts,
            seed: self.seed,
            rel_tol: self.tol,
            max_iter: self.max_iter,
            dedup_eps: self.dedup_eps.unwrap_or_else(|| default_dedup_eps(dims)),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Orbit, hyperdeterminant and point class of a 2x2x2 tensor.
    Classify {
        tensor: PathBuf,
        /// Relative band for a vanishing hyperdeterminant.
        #[arg(long, default_value_t = ORBIT_TOL)]
        tol: f64,
    },
    /// Distinct local minima of one approximation problem.
    Approx {
        tensor: PathBuf,
        #[arg(long, value_enum, default_value_t = ProblemArg::M222)]
        problem: ProblemArg,
        #[command(flatten)]
        ms: MultistartArgs,
        /// Relative threshold for the h222 = 0 test.
        #[arg(long, default_value_t = H222_TOL)]
        h222_tol: f64,
    },
    /// Whether a best rank-2 approximation exists.
    Existence {
        tensor: PathBuf,
        #[command(flatten)]
        ms: MultistartArgs,
        #[arg(long, default_value_t = H222_TOL)]
        h222_tol: f64,
    },
    /// Random-tensor campaign writing the CSV/JSON report set.
    Simulate {
        /// Tensor size as IxJxK.
        #[arg(long, default_value = "4x4x4", value_parser = parse_dims)]
        dims: [usize; 3],
        #[arg(long, default_value_t = 200)]
        tensors: usize,
        #[arg(long, default_value_t = DEFAULT_STARTS)]
        starts: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_REL_TOL)]
        tol: f64,
        #[arg(long)]
        dedup_eps: Option<f64>,
        #[arg(long, default_value_t = MULTISTART_MAX_ITER)]
        max_iter: usize,
        #[arg(long, default_value_t = H222_TOL)]
        h222_tol: f64,
        /// Engines to run, comma separated.
        #[arg(long, value_enum, value_delimiter = ',', default_values_t = [ProblemArg::M222, ProblemArg::S2barTriu, ProblemArg::S2barRog])]
        engines: Vec<ProblemArg>,
        /// Leading tensors whose best minima get a Hessian check.
        #[arg(long, default_value_t = 0)]
        hessian_sample: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Largest finite-difference Hessian eigenvalue at the best minimum.
    Hessian {
        tensor: PathBuf,
        #[arg(long, value_enum, default_value_t = ProblemArg::M222)]
        problem: ProblemArg,
        #[command(flatten)]
        ms: MultistartArgs,
    },
}

fn parse_dims(s: &str) -> Result<[usize; 3], String> {
    let parts: Vec<&str> = s.split(['x', 'X']).collect();
    if parts.len() != 3 {
        return Err(format!("expected IxJxK, got {s:?}"));
    }
    let mut out = [0; 3];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = p.trim().parse().map_err(|_| format!("bad dimension {p:?}"))?;
    }
    Ok(out)
}

#[derive(Debug)]
enum CliError {
    Input(String),
    Dimension(String),
    NoConvergence(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Input(_) => 1,
            CliError::Dimension(_) => 2,
            CliError::NoConvergence(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Input(m) | CliError::Dimension(m) | CliError::NoConvergence(m) => m,
        }
    }
}

impl From<TensorError> for CliError {
    fn from(e: TensorError) -> Self {
        match e {
            TensorError::Length { .. }
            | TensorError::NonFinite(_)
            | TensorError::Order(_)
            | TensorError::NotOrthonormal { .. } => CliError::Input(e.to_string()),
            TensorError::ZeroDimension(_) | TensorError::DimensionMismatch(_) | TensorError::Rank { .. } => {
                CliError::Dimension(e.to_string())
            }
        }
    }
}

impl From<ExistenceError> for CliError {
    fn from(e: ExistenceError) -> Self {
        match e {
            ExistenceError::Tensor(t) => t.into(),
            ExistenceError::NoConvergence { .. } => CliError::NoConvergence(e.to_string()),
            ExistenceError::Config(m) => CliError::Input(m),
        }
    }
}

impl From<HarnessError> for CliError {
    fn from(e: HarnessError) -> Self {
        match e {
            HarnessError::Tensor(t) => t.into(),
            HarnessError::Config(m) if m.contains("dimension") => CliError::Dimension(m),
            other => CliError::Input(other.to_string()),
        }
    }
}

fn read_tensor(path: &Path) -> Result<Tensor3, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    serde_json::from_str::<Tensor3>(&text).map_err(|e| {
        let msg = format!("{}: {e}", path.display());
        if e.to_string().contains("dimensions must be positive") {
            CliError::Dimension(msg)
        } else {
            CliError::Input(msg)
        }
    })
}

fn require_min_dims(z: &Tensor3) -> Result<(), CliError> {
    if z.dims().iter().any(|&d| d < 2) {
        return Err(CliError::Dimension(format!(
            "every dimension must be at least 2, got {:?}",
            z.dims()
        )));
    }
    Ok(())
}

fn ms_echo(cfg: &MultistartConfig) -> Value {
    json!({
        "starts": cfg.n_starts,
        "seed": cfg.seed,
        "tol": cfg.rel_tol,
        "dedup_eps": cfg.dedup_eps,
        "max_iter": cfg.max_iter,
    })
}

fn rank_class(m: &LocalMinimum, h222_tol: f64) -> Result<Value, CliError> {
    let c = core_rank_method_c(&m.core)?;
    let mut v = json!({ "method_c": format!("{c:?}") });
    if m.problem != Problem::M222 {
        let h = TriangularCore222::from_core(&m.core)?.to_rog();
        v["h222"] = json!(h.h222.abs());
        v["method_a"] = json!(format!("{:?}", core_rank_method_a(&h, h222_tol)));
    }
    Ok(v)
}

fn residuals(s: &Stationarity) -> Value {
    serde_json::to_value(s).expect("residuals serialize")
}

fn minimum_json(m: &LocalMinimum, h222_tol: f64) -> Result<Value, CliError> {
    Ok(json!({
        "fit": m.fit,
        "objective": m.objective,
        "core": m.core.data(),
        "rank": rank_class(m, h222_tol)?,
        "residuals": residuals(&m.stationarity),
        "grad_residual": m.grad_residual,
        "iterations": m.iterations,
        "converged": m.converged,
    }))
}

/// A command result: one JSON document plus a flat table for csv output.
struct Output {
    doc: Value,
    header: Vec<String>,
    rows: Vec<Vec<Value>>,
}

fn cols(names: &[&str]) -> Vec<String> {
    names.iter().map(|s| s.to_string()).collect()
}

fn run_classify(tensor: &Path, tol: f64) -> Result<Output, CliError> {
    let g = read_tensor(tensor)?;
    if g.dims() != [2, 2, 2] {
        return Err(CliError::Dimension(format!(
            "classify needs a 2x2x2 tensor, got {:?}",
            g.dims()
        )));
    }
    let c = classify_orbit(&g, tol)?;
    let pc = point_class(&g)?;
    let doc = json!({
        "command": "classify",
        "label": c.label.to_string(),
        "hyperdeterminant": c.hyperdeterminant,
        "point_class": format!("{pc:?}"),
        "mrank": c.mrank,
        "diagnostic": c.diagnostic,
        "tol": tol,
    });
    let row = vec![
        doc["label"].clone(),
        doc["hyperdeterminant"].clone(),
        doc["point_class"].clone(),
        json!(tol),
    ];
    Ok(Output {
        doc,
        header: cols(&["label", "hyperdeterminant", "point_class", "tol"]),
        rows: vec![row],
    })
}

fn run_approx(tensor: &Path, problem: Problem, ms: &MultistartArgs, h222_tol: f64) -> Result<Output, CliError> {
    let z = read_tensor(tensor)?;
    require_min_dims(&z)?;
    let cfg = ms.config(z.dims());
    let runs = multistart(&z, problem, &cfg)?;
    let distinct = distinct_converged(&runs, cfg.dedup_eps);
    if distinct.is_empty() {
        return Err(CliError::NoConvergence(format!(
            "no start converged ({} runs of {problem})",
            runs.len()
        )));
    }
    let minima: Vec<Value> = distinct
        .iter()
        .map(|m| minimum_json(m, h222_tol))
        .collect::<Result<_, _>>()?;
    let rows = minima
        .iter()
        .enumerate()
        .map(|(k, m)| {
            vec![
                json!(k),
                m["fit"].clone(),
                m["objective"].clone(),
                m["rank"]["method_c"].clone(),
                m["rank"].get("h222").cloned().unwrap_or(Value::Null),
                json!(distinct[k].stationarity.max()),
                m["iterations"].clone(),
                json!(cfg.seed),
                json!(cfg.rel_tol),
                json!(cfg.dedup_eps),
                json!(h222_tol),
            ]
        })
        .collect();
    let doc = json!({
        "command": "approx",
        "problem": problem.name(),
        "config": ms_echo(&cfg),
        "h222_tol": h222_tol,
        "n_runs": runs.len(),
        "n_converged": runs.iter().filter(|m| m.converged).count(),
        "minima": minima,
    });
    Ok(Output {
        doc,
        header: cols(&[
            "index",
            "fit",
            "objective",
            "method_c",
            "h222",
            "residual_max",
            "iterations",
            "seed",
            "tol",
            "dedup_eps",
            "h222_tol",
        ]),
        rows,
    })
}

fn run_existence(tensor: &Path, ms: &MultistartArgs, h222_tol: f64) -> Result<Output, CliError> {
    let z = read_tensor(tensor)?;
    require_min_dims(&z)?;
    let cfg = ms.config(z.dims());
    let rep = decide_existence(&z, &cfg, h222_tol)?;
    let (best_fit, detail) = match &rep.verdict {
        ExistenceVerdict::Exists { approx } => (approx.fit, json!({ "approx": minimum_json(approx, h222_tol)? })),
        ExistenceVerdict::NotExists { witnesses } => (
            witnesses.first().map_or(f64::NAN, |w| w.fit),
            json!({ "witnesses": witnesses.iter().map(|w| minimum_json(w, h222_tol)).collect::<Result<Vec<_>, _>>()? }),
        ),
        ExistenceVerdict::Inconclusive { best, reason, evidence } => {
            let ev = evidence.as_ref().map(|e| {
                let cand = |c: &Option<rank2::existence::BoundaryCandidate>| {
                    c.as_ref().map(|c| {
                        json!({
                            "problem": c.problem.name(),
                            "fit": c.fit,
                            "h222": c.h222_abs,
                            "h_norm": c.h_norm,
                            "method_a": format!("{:?}", c.method_a),
                        })
                    })
                };
                json!({ "triu": cand(&e.triu), "rog": cand(&e.rog), "h222_tol": e.h222_tol })
            });
            (
                best.fit,
                json!({ "best": minimum_json(best, h222_tol)?, "reason": reason, "evidence": ev }),
            )
        }
    };
    let subset = rep.subset.map(|s| s.label.name());
    let doc = json!({
        "command": "existence",
        "verdict": rep.verdict.name(),
        "subset": subset,
        "tie": rep.subset.map(|s| s.tie),
        "exact": rep.exact,
        "n_starts": rep.n_starts,
        "n_converged": rep.n_converged,
        "n_distinct": rep.n_distinct,
        "best_fit": best_fit,
        "config": ms_echo(&cfg),
        "h222_tol": h222_tol,
        "detail": detail,
    });
    let row = vec![
        doc["verdict"].clone(),
        doc["subset"].clone(),
        json!(best_fit),
        json!(rep.n_starts),
        json!(rep.n_distinct),
        json!(cfg.seed),
        json!(cfg.rel_tol),
        json!(cfg.dedup_eps),
        json!(h222_tol),
    ];
    Ok(Output {
        doc,
        header: cols(&[
            "verdict",
            "subset",
            "best_fit",
            "n_starts",
            "n_distinct",
            "seed",
            "tol",
            "dedup_eps",
            "h222_tol",
        ]),
        rows: vec![row],
    })
}

#[allow(clippy::too_many_arguments)]
fn run_simulate(
    dims: [usize; 3],
    tensors: usize,
    starts: usize,
    seed: u64,
    tol: f64,
    dedup_eps: Option<f64>,
    max_iter: usize,
    h222_tol: f64,
    engines: &[ProblemArg],
    hessian_sample: usize,
    out: &Path,
) -> Result<Output, CliError> {
    if dims.iter().any(|&d| d < 2) {
        return Err(CliError::Dimension(format!(
            "every dimension must be at least 2, got {dims:?}"
        )));
    }
    let mut cfg = SimulationConfig::new(dims, tensors, seed);
    cfg.starts = starts;
    cfg.rel_tol = tol;
    cfg.max_iter = max_iter;
    cfg.h222_tol = h222_tol;
    cfg.dedup_eps = dedup_eps.unwrap_or_else(|| default_dedup_eps(dims));
    cfg.engines = engines.iter().map(|&p| p.into()).collect();
    cfg.engines.dedup();
    cfg.hessian_sample = hessian_sample;
    let report = simulate(&cfg)?;
    write_outputs(&report, out)?;
    let doc = json!({
        "command": "simulate",
        "out": out.display().to_string(),
        "config": serde_json::to_value(&report.config).expect("config serializes"),
        "table2": serde_json::to_value(&report.table2).expect("table serializes"),
        "warnings": report.warnings,
    });
    let csv_text = table2_csv(&report)?;
    let mut lines = csv_text.lines();
    let header_line = lines.next().unwrap_or_default().to_string();
    let rows = lines.map(|l| l.split(',').map(|c| json!(c)).collect()).collect();
    let header = header_line.split(',').map(str::to_string).collect();
    Ok(Output { doc, header, rows })
}

fn run_hessian(tensor: &Path, problem: Problem, ms: &MultistartArgs) -> Result<Output, CliError> {
    let z = read_tensor(tensor)?;
    require_min_dims(&z)?;
    let cfg = ms.config(z.dims());
    let runs = multistart(&z, problem, &cfg)?;
    let best = runs
        .iter()
        .filter(|m| m.converged)
        .min_by(|a, b| a.fit.total_cmp(&b.fit))
        .ok_or_else(|| CliError::NoConvergence(format!("no start converged ({} runs of {problem})", runs.len())))?;
    let ev = hessian_check(&z, &best.factors, problem.mask())?;
    let doc = json!({
        "command": "hessian",
        "problem": problem.name(),
        "largest_eigenvalue": ev,
        "fit": best.fit,
        "step": rank2::harness::HESSIAN_STEP,
        "config": ms_echo(&cfg),
    });
    let row = vec![
        json!(problem.name()),
        json!(ev),
        json!(best.fit),
        json!(cfg.seed),
        json!(cfg.rel_tol),
        json!(cfg.dedup_eps),
    ];
    Ok(Output {
        doc,
        header: cols(&["problem", "largest_eigenvalue", "fit", "seed", "tol", "dedup_eps"]),
        rows: vec![row],
    })
}

/// Six significant digits; exponent form outside `[1e-4, 1e6)`.
fn sig6(x: f64) -> String {
    if !x.is_finite() || x == 0.0 {
        return x.to_string();
    }
    let sci = format!("{x:.5e}");
    let (mant, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-4..6).contains(&exp) {
        let rounded: f64 = sci.parse().expect("formatted float parses");
        return rounded.to_string();
    }
    let mant = mant.trim_end_matches('0').trim_end_matches('.');
    format!("{mant}e{exp}")
}

fn human(v: &Value) -> String {
    match v {
        Value::Number(n) => match n.as_f64() {
            Some(f) if !n.is_i64() && !n.is_u64() => sig6(f),
            _ => n.to_string(),
        },
        Value::String(s) => s.clone(),
        Value::Null => "-".into(),
        Value::Array(a) => format!("[{}]", a.iter().map(human).collect::<Vec<_>>().join(", ")),
        Value::Bool(b) => b.to_string(),
        Value::Object(_) => v.to_string(),
    }
}

fn write_human(v: &Value, indent: usize, out: &mut String) {
    if let Value::Object(map) = v {
        for (k, val) in map {
            match val {
                Value::Object(_) => {
                    out.push_str(&format!("{:indent$}{k}:\n", ""));
                    write_human(val, indent + 2, out);
                }
                Value::Array(a) if a.iter().any(|x| x.is_object()) => {
                    out.push_str(&format!("{:indent$}{k}:\n", ""));
                    for (i, x) in a.iter().enumerate() {
                        out.push_str(&format!("{:w$}[{i}]\n", "", w = indent + 2));
                        write_human(x, indent + 4, out);
                    }
                }
                _ => out.push_str(&format!("{:indent$}{k}: {}\n", "", human(val))),
            }
        }
    }
}

fn csv_cell(v: &Value) -> String {
    let s = match v {
        Value::String(s) => s.clone(),
        Value::Null => String::new(),
        other => other.to_string(),
    };
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s
    }
}

fn render(out: &Output, format: Format) -> String {
    match format {
        Format::Json => serde_json::to_string_pretty(&out.doc).expect("output serializes") + "\n",
        Format::Csv => {
            let mut s = out.header.join(",") + "\n";
            for r in &out.rows {
                s.push_str(&r.iter().map(csv_cell).collect::<Vec<_>>().join(","));
                s.push('\n');
            }
            s
        }
        Format::Human => {
            let mut s = String::new();
            write_human(&out.doc, 0, &mut s);
            s
        }
    }
}

fn configure_workers() {
    if let Some(n) = std::env::var(WORKERS_ENV).ok().and_then(|v| v.parse::<usize>().ok()) {
        if n > 0 {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    configure_workers();
    let result = match &cli.command {
        Command::Classify { tensor, tol } => run_classify(tensor, *tol),
        Command::Approx {
            tensor,
            problem,
            ms,
            h222_tol,
        } => run_approx(tensor, (*problem).into(), ms, *h222_tol),
        Command::Existence { tensor, ms, h222_tol } => run_existence(tensor, ms, *h222_tol),
        Command::Simulate {
            dims,
            tensors,
            starts,
            seed,
            tol,
            dedup_eps,
            max_iter,
            h222_tol,
            engines,
            hessian_sample,
            out,
        } => run_simulate(
            *dims,
            *tensors,
            *starts,
            *seed,
            *tol,
            *dedup_eps,
            *max_iter,
            *h222_tol,
            engines,
            *hessian_sample,
            out,
        ),
        Command::Hessian { tensor, problem, ms } => run_hessian(tensor, (*problem).into(), ms),
    };
    match result {
        Ok(out) => {
            print!("{}", render(&out, cli.format));
            ExitCode::SUCCESS
        }
        Err(e) => {
            if cli.format == Format::Json {
                eprintln!("{}", json!({ "error": e.message(), "code": e.code() }));
            } else {
                eprintln!("error: {}", e.message());
            }
            ExitCode::from(e.code())
        }
    }
}
