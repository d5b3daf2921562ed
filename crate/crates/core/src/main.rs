use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use hohmm::io::{ingest, params_from_json, ColumnSelector, ParamsFile};
use hohmm::{
    fit, grid_search, local_decode, predict, simulate, smooth, EmSettings, FitResult, HmmError, ModelConfig,
    ObservationSeries, ParameterSet, RecursionOptions,
};

#[derive(Parser)]
#[command(name = "hohmm", version, about = "Higher-order hidden Markov models for volatility regimes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit one (h, k) model by EM.
    Fit {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        h: usize,
        #[arg(long)]
        k: usize,
        #[command(flatten)]
        em: EmArgs,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Fit every (h, k) combination and select by BIC.
    Grid {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_delimiter = ',', required = true)]
        h_list: Vec<usize>,
        #[arg(long, value_delimiter = ',', required = true)]
        k_list: Vec<usize>,
        #[command(flatten)]
        em: EmArgs,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Posterior state marginals and local decoding.
    Decode {
        #[arg(long)]
        params: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        out: OutArgs,
    },
    /// One-step-ahead state prediction and predictive mixture.
    Predict {
        #[arg(long)]
        params: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Draw states and observations from a parameter file.
    Simulate {
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        length: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct DataArgs {
    /// CSV file with one numeric column of returns (or prices with --prices).
    #[arg(long)]
    input: PathBuf,
    /// 1-based column index or header name; defaults to the last column.
    #[arg(long)]
    column: Option<ColumnSelector>,
    /// Treat the column as closing prices and convert to percentage log-returns.
    #[arg(long)]
    prices: bool,
}

#[derive(Args)]
struct EmArgs {
    #[arg(long, default_value_t = 10)]
    starts: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1000)]
    max_iter: usize,
    #[arg(long, default_value_t = 1e-8)]
    tol: f64,
}

impl EmArgs {
    fn settings(&self) -> EmSettings {
        EmSettings {
            max_iterations: self.max_iter,
            rel_tolerance: self.tol,
            n_starts: self.starts,
            seed: self.seed,
            ..EmSettings::default()
        }
    }
}

#[derive(Args)]
struct OutArgs {
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    format: Format,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Csv,
}

/// Rounds to 10 significant digits.
fn sig(x: f64) -> f64 {
    if !x.is_finite() || x == 0.0 {
        return x;
    }
    format!("{x:.9e}").parse().unwrap_or(x)
}

fn num(x: f64) -> Value {
    if x.is_finite() {
        json!(sig(x))
    } else {
        Value::Null
    }
}

fn nums(xs: &[f64]) -> Value {
    Value::Array(xs.iter().map(|&x| num(x)).collect())
}

fn csv_num(x: f64) -> String {
    let r = sig(x);
    if !x.is_finite() {
        String::new()
    } else if r == 0.0 || (1e-4..1e15).contains(&r.abs()) {
        r.to_string()
    } else {
        format!("{r:e}")
    }
}

fn load_series(d: &DataArgs) -> Result<ObservationSeries, HmmError> {
    ingest(&d.input, d.column.as_ref(), d.prices)
}

/// Accepts a bare parameter file or the output of `fit`.
fn load_params(path: &Path) -> Result<ParameterSet, HmmError> {
    let text = std::fs::read_to_string(path).map_err(|source| HmmError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let v: Value =
        serde_json::from_str(&text).map_err(|e| HmmError::Format(format!("{}: {e}", path.display())))?;
    match v.get("params") {
        Some(inner) => {
            let f: ParamsFile = serde_json::from_value(inner.clone())
                .map_err(|e| HmmError::Format(format!("{}: {e}", path.display())))?;
            f.try_into()
        }
        None => params_from_json(&text),
    }
}

fn emit(out: Option<&Path>, body: &str) -> Result<(), HmmError> {
    match out {
        Some(path) => std::fs::write(path, body).map_err(|source| HmmError::Io {
            path: path.display().to_string(),
            source,
        }),
        None => {
            let mut stdout = std::io::stdout().lock();
            match stdout.write_all(body.as_bytes()).and_then(|_| stdout.flush()) {
                Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => {
                    Err(HmmError::Io { path: "<stdout>".into(), source: e })
                }
                _ => Ok(()),
            }
        }
    }
}

fn pretty(v: &Value) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("json serializes");
    s.push('\n');
    s
}

fn window_label(row: usize, k: usize, vars: usize) -> String {
    hohmm::tensor::decode(row, k, vars)
        .iter()
        .map(|s| (s + 1).to_string())
        .collect::<Vec<_>>()
        .join(" ")
}

fn fit_json(r: &FitResult, len: usize) -> Value {
    let (params, _) = r.params.sorted_by_sigma();
    json!({
        "h": params.h(),
        "k": params.k(),
        "len": len,
        "params": serde_json::to_value(ParamsFile::from(&params)).expect("params serialize"),
        "loglik": num(r.loglik),
        "npar": r.npar,
        "bic": num(r.bic),
        "iterations": r.trace.len(),
        "trace": nums(&r.trace),
        "converged": r.converged,
        "start": r.start_index,
        "warnings": r.warnings,
    })
}

fn fit_csv(r: &FitResult) -> String {
    let (p, _) = r.params.sorted_by_sigma();
    let k = p.k();
    let mut s = String::from("kind,window");
    for v in 1..=k {
        let _ = write!(s, ",v{v}");
    }
    s.push('\n');
    let mut row = |kind: &str, window: String, vals: &[f64]| {
        let _ = write!(s, "{kind},{window}");
        for &x in vals {
            let _ = write!(s, ",{}", csv_num(x));
        }
        s.push('\n');
    };
    row("sigma", String::new(), &p.sigma);
    for (i, e) in p.early.iter().enumerate() {
        for (w, r) in e.chunks(k).enumerate() {
            row(&format!("early{}", i + 1), window_label(w, k, i), r);
        }
    }
    for (w, r) in p.pi.chunks(k).enumerate() {
        row("pi", window_label(w, k, p.h()), r);
    }
    row("loglik", String::new(), &[r.loglik]);
    row("npar", String::new(), &[r.npar as f64]);
    row("bic", String::new(), &[r.bic]);
    s
}

fn run(cli: Cli) -> Result<(), HmmError> {
    let opts = RecursionOptions::default();
    match cli.command {
        Command::Fit { data, h, k, em, out } => {
            let y = load_series(&data)?;
            let r = fit(ModelConfig::new(k, h)?, &y, &em.settings())?;
            let body = match out.format {
                Format::Json => pretty(&fit_json(&r, y.len())),
                Format::Csv => fit_csv(&r),
            };
            emit(out.out.as_deref(), &body)
        }
        Command::Grid { data, h_list, k_list, em, out } => {
            let y = load_series(&data)?;
            let report = grid_search(&y, &h_list, &k_list, &em.settings())?;
            let body = match out.format {
                Format::Json => {
                    let cells: Vec<Value> = report
                        .cells
                        .iter()
                        .map(|c| match &c.outcome {
                            Ok(r) => json!({
                                "h": c.h, "k": c.k, "loglik": num(r.loglik), "npar": c.npar,
                                "bic": num(r.bic), "converged": r.converged,
                            }),
                            Err(e) => json!({ "h": c.h, "k": c.k, "npar": c.npar, "error": e }),
                        })
                        .collect();
                    let selected = report.selected.map(|(h, k)| json!({ "h": h, "k": k }));
                    pretty(&json!({ "len": report.len, "cells": cells, "selected": selected }))
                }
                Format::Csv => {
                    let mut s = String::from("h,k,loglik,npar,bic,converged,selected\n");
                    for c in &report.cells {
                        let sel = report.selected == Some((c.h, c.k));
                        match &c.outcome {
                            Ok(r) => {
                                let _ = writeln!(
                                    s,
                                    "{},{},{},{},{},{},{}",
                                    c.h,
                                    c.k,
                                    csv_num(r.loglik),
                                    c.npar,
                                    csv_num(r.bic),
                                    r.converged,
                                    sel
                                );
                            }
                            Err(_) => {
                                let _ = writeln!(s, "{},{},,{},,false,false", c.h, c.k, c.npar);
                            }
                        }
                    }
                    s
                }
            };
            emit(out.out.as_deref(), &body)
        }
        Command::Decode { params, data, out } => {
            let p = load_params(&params)?;
            let y = load_series(&data)?;
            let sm = smooth(&p, &y, opts)?;
            let states = local_decode(&sm.marginals);
            let body = match out.format {
                Format::Json => pretty(&json!({
                    "len": y.len(),
                    "loglik": num(sm.loglik),
                    "states": states.iter().map(|s| s + 1).collect::<Vec<_>>(),
                    "marginals": sm.marginals.iter().map(|m| nums(m)).collect::<Vec<_>>(),
                })),
                Format::Csv => {
                    let mut s = String::from("t");
                    if y.dates.is_some() {
                        s.push_str(",date");
                    }
                    s.push_str(",y,state");
                    for v in 1..=p.k() {
                        let _ = write!(s, ",p{v}");
                    }
                    s.push('\n');
                    for (t, (m, st)) in sm.marginals.iter().zip(&states).enumerate() {
                        let _ = write!(s, "{}", t + 1);
                        if let Some(d) = &y.dates {
                            let _ = write!(s, ",{}", d[t]);
                        }
                        let _ = write!(s, ",{},{}", csv_num(y.values[t]), st + 1);
                        for &x in m {
                            let _ = write!(s, ",{}", csv_num(x));
                        }
                        s.push('\n');
                    }
                    s
                }
            };
            emit(out.out.as_deref(), &body)
        }
        Command::Predict { params, data, out } => {
            let p = load_params(&params)?;
            let y = load_series(&data)?;
            let sm = smooth(&p, &y, opts)?;
            let history = local_decode(&sm.marginals);
            let pr = predict(&p, &history)?;
            let body = match out.format {
                Format::Json => pretty(&json!({
                    "t": y.len() + 1,
                    "state": pr.state + 1,
                    "weights": nums(&pr.weights),
                    "sigma": nums(&pr.sigma),
                })),
                Format::Csv => {
                    let mut s = String::from("state,weight,sigma,predicted\n");
                    for (v, (w, sd)) in pr.weights.iter().zip(&pr.sigma).enumerate() {
                        let _ = writeln!(s, "{},{},{},{}", v + 1, csv_num(*w), csv_num(*sd), v == pr.state);
                    }
                    s
                }
            };
            emit(out.out.as_deref(), &body)
        }
        Command::Simulate { params, length, seed, out } => {
            let p = load_params(&params)?;
            let (states, y) = simulate(&p, length, seed)?;
            let mut s = String::from("t,state,y\n");
            for (t, (st, v)) in states.iter().zip(&y.values).enumerate() {
                let _ = writeln!(s, "{},{},{}", t + 1, st + 1, csv_num(*v));
            }
            emit(out.as_deref(), &s)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("hohmm: {e}");
            ExitCode::FAILURE
        }
    }
}
