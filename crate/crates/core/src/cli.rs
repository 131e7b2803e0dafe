//! Command-line front end and the JSON run report.
//!
//! Exit codes: 0 success, 1 verified negative (FAIL or divergence),
//! 2 infeasible, 3 input error.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::bounds::{BoundInput, SamplingBoundResult};
use crate::design::{
    synthesize_feedback, synthesize_nonlinear_planar, verify_certificate, CTilde, DesignOptions, DesignResult,
    PlanarDesignOptions, Verification,
};
use crate::error::{Error, Result};
use crate::lmi::{LmiCertificate, Tolerance};
use crate::models::{parse_model, Model, SamplingSchedule};
use crate::sim::{
    estimate_as_exponent, estimate_ms_decay, run_ensemble, AsExponentSummary, DecayEstimate, SimConfig,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAIL: i32 = 1;
pub const EXIT_INFEASIBLE: i32 = 2;
pub const EXIT_INPUT: i32 = 3;

/// Margins recorded in a report must be reproduced this closely.
pub const REVERIFY_TOL: f64 = 1e-12;
/// Points in the `τ̂(q)` curve emitted for plotting.
pub const CURVE_POINTS: usize = 200;

#[derive(Parser, Debug)]
#[command(name = "sdcert", version, about = "Sampling-interval bounds and LMI certificates for sampled-data stochastic control")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Model file (JSON).
    #[arg(long, global = true)]
    pub model: Option<PathBuf>,
    /// Certificate file (JSON); read by `verify`/`simulate`, written by `design`.
    #[arg(long, global = true)]
    pub cert: Option<PathBuf>,
    /// Write the run report here instead of stdout.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    pub format: Format,
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// LMI tolerance: `X` or `rel:X` (relative to the block scale), `abs:X`.
    #[arg(long, global = true)]
    pub tol: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Csv,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Maximum allowable sampling interval from bound constants.
    Bound(BoundArgs),
    /// Check an LMI certificate against a model.
    Verify(VerifyArgs),
    /// Synthesize a state-feedback gain with a certificate.
    Design(DesignArgs),
    /// Monte Carlo simulation of the sampled-data loop.
    Simulate(SimulateArgs),
    /// Merge run reports into a summary table.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
#[command(group(ArgGroup::new("kind").required(true).args(["generic", "single_v", "two_v", "dta"])))]
pub struct BoundArgs {
    #[arg(long)]
    pub generic: bool,
    #[arg(long)]
    pub single_v: bool,
    #[arg(long)]
    pub two_v: bool,
    #[arg(long)]
    pub dta: bool,
    /// JSON file with the constants of the chosen bound.
    #[arg(long)]
    pub constants: Option<PathBuf>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub alpha_b: Option<f64>,
    #[arg(long)]
    pub alpha_f: Option<f64>,
    #[arg(long)]
    pub gamma1: Option<f64>,
    #[arg(long)]
    pub gamma2: Option<f64>,
    #[arg(long)]
    pub alpha1: Option<f64>,
    #[arg(long)]
    pub alpha2: Option<f64>,
    #[arg(long)]
    pub alphat1: Option<f64>,
    #[arg(long)]
    pub alphat2: Option<f64>,
    #[arg(long)]
    pub beta1: Option<f64>,
    #[arg(long)]
    pub beta2: Option<f64>,
    #[arg(long)]
    pub beta3: Option<f64>,
    #[arg(long)]
    pub p: Option<f64>,
    #[arg(long)]
    pub q: Option<f64>,
    #[arg(long)]
    pub c_bar: Option<f64>,
    #[arg(long)]
    pub h: Option<f64>,
    #[arg(long)]
    pub alpha_u: Option<f64>,
}

#[derive(Args, Debug)]
pub struct VerifyArgs {
    /// Re-verify the model and certificate recorded in a run report.
    #[arg(long)]
    pub from_report: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct DesignArgs {
    /// `X`, `free`, or `sweep:X1,X2,...`.
    #[arg(long, default_value = "1")]
    pub c_tilde: String,
    /// Comma-separated fractions of the supremal decay rate.
    #[arg(long)]
    pub fractions: Option<String>,
    #[arg(long)]
    pub no_refine: bool,
    /// Local-search starts for the planar plant.
    #[arg(long, default_value_t = 24)]
    pub starts: usize,
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    /// `periodic:DT`, `uniform:LO,HI` or `explicit:T1,T2,...`.
    #[arg(long)]
    pub schedule: String,
    #[arg(long, default_value_t = 200)]
    pub paths: usize,
    #[arg(long, default_value_t = 5.0)]
    pub horizon: f64,
    /// Defaults to min(1e-3, shortest gap / 10).
    #[arg(long)]
    pub dt_sim: Option<f64>,
    #[arg(long, default_value_t = 10)]
    pub store_stride: usize,
    /// Mean-square fit window `LO,HI`; defaults to [0.2·horizon, horizon].
    #[arg(long)]
    pub window: Option<String>,
    /// Initial state override `X1,X2,...`.
    #[arg(long)]
    pub x0: Option<String>,
    #[arg(long)]
    pub traj_csv: Option<PathBuf>,
    #[arg(long)]
    pub stats_csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    pub reports: Vec<PathBuf>,
    /// Where to write the `τ̂(q)` curve of the first report that carries a bound.
    #[arg(long)]
    pub curve_csv: Option<PathBuf>,
}

// ---------------------------------------------------------------------------
// report

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Status {
    Ok,
    Pass,
    Fail,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub c_tilde: f64,
    pub tau_max: Option<f64>,
    pub gain_norm: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub source: String,
    pub model: String,
    pub tau_max: Option<f64>,
    pub gain_norm: Option<f64>,
    pub decay_rate: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "snake_case")]
pub enum RunResult {
    Bound {
        input: BoundInput,
        result: SamplingBoundResult,
    },
    Verify {
        model: Value,
        certificate: LmiCertificate,
        verification: Verification,
    },
    Design {
        model: Value,
        design: Box<DesignResult>,
        sweep: Vec<SweepEntry>,
    },
    Simulate {
        model: Value,
        config: SimConfig,
        n_diverged: usize,
        ms_decay: Option<DecayEstimate>,
        decay_confirmed: bool,
        as_exponent: Option<AsExponentSummary>,
    },
    Report {
        rows: Vec<ReportRow>,
        curve: Option<Vec<(f64, f64)>>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub tool: String,
    pub version: String,
    pub command: Vec<String>,
    pub inputs: Vec<InputDigest>,
    pub status: Status,
    pub wall_time_s: f64,
    #[serde(default)]
    pub notes: Vec<String>,
    pub result: RunResult,
}

impl RunReport {
    pub fn parse(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Format(format!("run report: {e}")))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Bound family and constants behind the run's `τ̂` value, if any.
    pub fn bound_input(&self) -> Option<BoundInput> {
        match &self.result {
            RunResult::Bound { input, .. } => Some(input.clone()),
            RunResult::Verify { verification, .. } if verification.pass => verification
                .two_constants
                .map(BoundInput::TwoV)
                .or(verification.single_constants.map(BoundInput::SingleV)),
            RunResult::Design { design, .. } => Some(BoundInput::TwoV(design.constants)),
            _ => None,
        }
    }

    /// Model and certificate recorded by a verify or design run.
    pub fn recorded_pair(&self) -> Result<(Model, LmiCertificate)> {
        match &self.result {
            RunResult::Verify { model, certificate, .. } => Ok((parse_model(&model.to_string())?, certificate.clone())),
            RunResult::Design { model, design, .. } => Ok((parse_model(&model.to_string())?, design.certificate.clone())),
            _ => Err(Error::validation("result", "report holds no certificate")),
        }
    }

    /// Margins recorded by a verify or design run.
    pub fn recorded_margins(&self) -> Option<Vec<f64>> {
        match &self.result {
            RunResult::Verify { verification, .. } => Some(verification.margins.iter().map(|m| m.margin).collect()),
            RunResult::Design { design, .. } => Some(design.margins.iter().map(|m| m.margin).collect()),
            _ => None,
        }
    }

    fn row(&self, source: &str) -> ReportRow {
        let mut row = ReportRow {
            source: source.to_string(),
            model: String::new(),
            tau_max: None,
            gain_norm: None,
            decay_rate: None,
        };
        let name = |v: &Value| v.get("name").and_then(Value::as_str).unwrap_or("").to_string();
        match &self.result {
            RunResult::Bound { input, result } => {
                row.model = format!("bound:{}", kind_name(input));
                row.tau_max = Some(result.tau_max);
            }
            RunResult::Verify { model, verification, .. } => {
                row.model = name(model);
                row.tau_max = verification.bound.as_ref().map(|b| b.tau_max);
            }
            RunResult::Design { model, design, .. } => {
                row.model = name(model);
                row.tau_max = Some(design.bound.tau_max);
                row.gain_norm = Some(design.gain_norm());
            }
            RunResult::Simulate { model, ms_decay, .. } => {
                row.model = name(model);
                row.decay_rate = ms_decay.map(|d| d.rate);
            }
            RunResult::Report { .. } => row.model = "report".into(),
        }
        row
    }
}

fn kind_name(input: &BoundInput) -> &'static str {
    match input {
        BoundInput::Generic { .. } => "generic",
        BoundInput::SingleV(_) => "single_v",
        BoundInput::TwoV(_) => "two_v",
        BoundInput::Dta { .. } => "dta",
    }
}

// ---------------------------------------------------------------------------
// driver

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Infeasible(_) | Error::Domain(_) | Error::NumericalFailure(_) => EXIT_INFEASIBLE,
        _ => EXIT_INPUT,
    }
}

struct Ctx<'a> {
    cli: &'a Cli,
    argv: Vec<String>,
    inputs: Vec<InputDigest>,
    notes: Vec<String>,
    started: Instant,
}

impl Ctx<'_> {
    fn read(&mut self, path: &Path) -> Result<String> {
        let bytes = std::fs::read(path)?;
        let digest = Sha256::digest(&bytes);
        self.inputs.push(InputDigest {
            path: path.display().to_string(),
            sha256: digest.iter().map(|b| format!("{b:02x}")).collect(),
        });
        String::from_utf8(bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }

    fn model(&mut self) -> Result<Model> {
        let path = self.cli.model.clone().ok_or_else(|| Error::validation("--model", "required"))?;
        parse_model(&self.read(&path)?)
    }

    fn cert(&mut self) -> Result<Option<LmiCertificate>> {
        match self.cli.cert.clone() {
            Some(p) => Ok(Some(LmiCertificate::parse(&self.read(&p)?)?)),
            None => Ok(None),
        }
    }

    fn report(&mut self, status: Status, result: RunResult) -> RunReport {
        RunReport {
            tool: "sdcert".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: self.argv.clone(),
            inputs: std::mem::take(&mut self.inputs),
            status,
            wall_time_s: self.started.elapsed().as_secs_f64(),
            notes: std::mem::take(&mut self.notes),
            result,
        }
    }
}

pub fn parse_tolerance(s: Option<&str>) -> Result<Tolerance> {
    let Some(s) = s else {
        return Ok(Tolerance::default());
    };
    let (kind, v) = match s.split_once(':') {
        Some((k, v)) => (k, v),
        None => ("rel", s),
    };
    let x: f64 = v
        .trim()
        .parse()
        .map_err(|_| Error::validation("--tol", format!("not a number: {v}")))?;
    if !(x >= 0.0 && x.is_finite()) {
        return Err(Error::validation("--tol", "must be finite and >= 0"));
    }
    match kind {
        "rel" => Ok(Tolerance::Relative(x)),
        "abs" => Ok(Tolerance::Absolute(x)),
        other => Err(Error::validation("--tol", format!("unknown kind {other}"))),
    }
}

fn parse_list(flag: &str, s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .map_err(|_| Error::validation(flag, format!("not a number: {t}")))
        })
        .collect()
}

/// Runs the CLI with `args` (including the program name) and returns the
/// exit code; the report or CSV goes to `out`, diagnostics to `err`.
pub fn run(args: &[String], out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            if e.use_stderr() {
                let _ = write!(err, "{e}");
                return EXIT_INPUT;
            }
            let _ = write!(out, "{e}");
            return EXIT_OK;
        }
    };
    let mut ctx = Ctx {
        cli: &cli,
        argv: args.to_vec(),
        inputs: Vec::new(),
        notes: Vec::new(),
        started: Instant::now(),
    };
    let outcome = match &cli.command {
        Command::Bound(a) => cmd_bound(&mut ctx, a),
        Command::Verify(a) => cmd_verify(&mut ctx, a),
        Command::Design(a) => cmd_design(&mut ctx, a),
        Command::Simulate(a) => cmd_simulate(&mut ctx, a),
        Command::Report(a) => cmd_report(&mut ctx, a, err),
    };
    match outcome.and_then(|(report, code, csv)| emit(&cli, &report, csv, out, err).map(|_| code)) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

fn emit(cli: &Cli, report: &RunReport, csv: Option<String>, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    let _ = writeln!(err, "{}", summary(report));
    for n in &report.notes {
        let _ = writeln!(err, "note: {n}");
    }
    let body = match (cli.format, csv) {
        (Format::Csv, Some(csv)) => csv,
        (Format::Csv, None) => return Err(Error::validation("--format", "csv output is not available here")),
        (Format::Json, _) => report.to_json() + "\n",
    };
    match &cli.out {
        Some(p) => std::fs::write(p, body)?,
        None => out.write_all(body.as_bytes())?,
    }
    Ok(())
}

fn summary(r: &RunReport) -> String {
    let status = serde_json::to_value(r.status).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default();
    match &r.result {
        RunResult::Bound { result, .. } => format!("tau_max = {:.6} at q* = {:.6}", result.tau_max, result.q_star),
        RunResult::Verify { verification, .. } => {
            let mut s = format!("{status}:");
            for m in &verification.margins {
                s += &format!(" {} margin {:.3e};", m.name, m.margin);
            }
            if let Some(b) = &verification.bound {
                s += &format!(" tau_max = {:.6}", b.tau_max);
            }
            s
        }
        RunResult::Design { design, .. } => format!(
            "tau_max = {:.6}, |K| = {:.4}, c_tilde = {}",
            design.bound.tau_max,
            design.gain_norm(),
            design.c_tilde
        ),
        RunResult::Simulate { ms_decay, n_diverged, config, .. } => match ms_decay {
            Some(d) => format!(
                "{status}: mean-square rate {:.4} (r² {:.3}), {n_diverged}/{} diverged",
                d.rate, d.r_squared, config.n_paths
            ),
            None => format!("{status}: no decay estimate, {n_diverged}/{} diverged", config.n_paths),
        },
        RunResult::Report { rows, .. } => format!("{} rows", rows.len()),
    }
}

type Outcome = Result<(RunReport, i32, Option<String>)>;

fn bound_input(ctx: &mut Ctx, a: &BoundArgs) -> Result<BoundInput> {
    let kind = if a.generic {
        "generic"
    } else if a.single_v {
        "single_v"
    } else if a.two_v {
        "two_v"
    } else {
        "dta"
    };
    let mut map = match &a.constants {
        Some(p) => match serde_json::from_str::<Value>(&ctx.read(p)?) {
            Ok(Value::Object(m)) => m,
            Ok(_) => return Err(Error::Format("constants file must hold an object".into())),
            Err(e) => return Err(Error::Format(format!("constants: {e}"))),
        },
        None => Map::new(),
    };
    match map.get("kind").and_then(Value::as_str) {
        Some(k) if k != kind => {
            return Err(Error::validation("kind", format!("file is `{k}` but --{} was given", kind.replace('_', "-"))))
        }
        _ => {
            map.insert("kind".into(), Value::from(kind));
        }
    }
    let alpha_key = if kind == "generic" { "alpha" } else { "alpha_bar" };
    // α̃₁ only enters through α₂α̃₁, so it may be omitted when α₂ = 0
    if kind == "generic" && !map.contains_key("alphat1") && a.alphat1.is_none() {
        let alpha2 = a.alpha2.or_else(|| map.get("alpha2").and_then(Value::as_f64));
        if alpha2 == Some(0.0) {
            map.insert("alphat1".into(), Value::from(0.0));
        }
    }
    let inline = [
        (alpha_key, a.alpha),
        ("alpha_b", a.alpha_b),
        ("alpha_f", a.alpha_f),
        ("gamma1", a.gamma1),
        ("gamma2", a.gamma2),
        ("alpha1", a.alpha1),
        ("alpha2", a.alpha2),
        ("alphat1", a.alphat1),
        ("alphat2", a.alphat2),
        ("beta1", a.beta1),
        ("beta2", a.beta2),
        ("beta3", a.beta3),
        ("p", a.p),
        ("q", a.q),
        ("c_bar", a.c_bar),
        ("h", a.h),
        ("alpha_u", a.alpha_u),
    ];
    for (k, v) in inline {
        if let Some(v) = v {
            map.insert(k.into(), Value::from(v));
        }
    }
    serde_json::from_value(Value::Object(map)).map_err(|e| Error::Format(format!("bound constants: {e}")))
}

fn cmd_bound(ctx: &mut Ctx, a: &BoundArgs) -> Outcome {
    let input = bound_input(ctx, a)?;
    let result = input.evaluate()?;
    let csv = curve_csv(&input.curve(CURVE_POINTS)?)?;
    Ok((ctx.report(Status::Ok, RunResult::Bound { input, result }), EXIT_OK, Some(csv)))
}

fn curve_csv(curve: &[(f64, f64)]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let fmt = |e: csv::Error| Error::Format(e.to_string());
    w.write_record(["q", "tau_hat"]).map_err(fmt)?;
    for (q, t) in curve {
        w.write_record([q.to_string(), t.to_string()]).map_err(fmt)?;
    }
    String::from_utf8(w.into_inner().map_err(|e| Error::Format(e.to_string()))?)
        .map_err(|e| Error::Format(e.to_string()))
}

fn model_value(m: &Model) -> Value {
    serde_json::from_str(&m.to_json()).expect("model JSON round-trips")
}

fn margins_csv(v: &Verification) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let fmt = |e: csv::Error| Error::Format(e.to_string());
    w.write_record(["lmi", "margin", "scale", "pass"]).map_err(fmt)?;
    for m in &v.margins {
        w.write_record([m.name.clone(), m.margin.to_string(), m.scale.to_string(), m.passes(v.tolerance).to_string()])
            .map_err(fmt)?;
    }
    String::from_utf8(w.into_inner().map_err(|e| Error::Format(e.to_string()))?)
        .map_err(|e| Error::Format(e.to_string()))
}

fn cmd_verify(ctx: &mut Ctx, a: &VerifyArgs) -> Outcome {
    let tol = parse_tolerance(ctx.cli.tol.as_deref())?;
    if let Some(path) = &a.from_report {
        let recorded = RunReport::parse(&ctx.read(path)?)?;
        let (model, cert) = recorded.recorded_pair()?;
        let tol = match &recorded.result {
            RunResult::Verify { verification, .. } if ctx.cli.tol.is_none() => verification.tolerance,
            RunResult::Design { .. } if ctx.cli.tol.is_none() => Tolerance::Absolute(0.0),
            _ => tol,
        };
        let v = verify_certificate(&model, &cert, tol)?;
        let old = recorded.recorded_margins().unwrap_or_default();
        let agree = old.len() == v.margins.len()
            && old.iter().zip(&v.margins).all(|(o, m)| (o - m.margin).abs() <= REVERIFY_TOL * (1.0 + o.abs()));
        if !agree {
            ctx.notes.push(format!("recorded margins {old:?} not reproduced"));
        }
        let status = if v.pass && agree { Status::Pass } else { Status::Fail };
        let csv = margins_csv(&v)?;
        let report = ctx.report(
            status,
            RunResult::Verify {
                model: model_value(&model),
                certificate: cert,
                verification: v,
            },
        );
        let code = if status == Status::Pass { EXIT_OK } else { EXIT_FAIL };
        return Ok((report, code, Some(csv)));
    }
    let model = ctx.model()?;
    let cert = ctx.cert()?.ok_or_else(|| Error::validation("--cert", "required"))?;
    let v = verify_certificate(&model, &cert, tol)?;
    let status = if v.pass { Status::Pass } else { Status::Fail };
    let csv = margins_csv(&v)?;
    let report = ctx.report(
        status,
        RunResult::Verify {
            model: model_value(&model),
            certificate: cert,
            verification: v,
        },
    );
    Ok((report, if status == Status::Pass { EXIT_OK } else { EXIT_FAIL }, Some(csv)))
}

fn cmd_design(ctx: &mut Ctx, a: &DesignArgs) -> Outcome {
    let model = ctx.model()?;
    let (design, sweep) = match &model {
        Model::Planar(_) => {
            if a.c_tilde != "1" {
                ctx.notes.push("c_tilde does not apply to the planar plant".into());
            }
            let opts = PlanarDesignOptions {
                starts: a.starts.max(1),
                seed: ctx.cli.seed,
                ..Default::default()
            };
            (synthesize_nonlinear_planar(&opts)?, Vec::new())
        }
        Model::Linear(lm) => {
            if lm.b_hat().is_none() {
                return Err(Error::validation("B_hat", "design needs a model with an input matrix"));
            }
            if lm.b_bar().is_some() {
                ctx.notes.push("existing K_hat in the model is ignored".into());
            }
            let mut base = DesignOptions {
                seed: ctx.cli.seed,
                refine: !a.no_refine,
                ..Default::default()
            };
            if let Some(f) = &a.fractions {
                base.alpha_fractions = parse_list("--fractions", f)?;
                if base.alpha_fractions.iter().any(|x| !(*x > 0.0 && *x < 1.0)) {
                    return Err(Error::validation("--fractions", "each fraction must lie in (0, 1)"));
                }
            }
            let choices: Vec<CTilde> = match a.c_tilde.as_str() {
                "free" => vec![CTilde::Free],
                s if s.starts_with("sweep:") => parse_list("--c-tilde", &s["sweep:".len()..])?
                    .into_iter()
                    .map(CTilde::Prescribed)
                    .collect(),
                s => vec![CTilde::Prescribed(parse_list("--c-tilde", s)?[0])],
            };
            let mut best: Option<DesignResult> = None;
            let mut sweep = Vec::new();
            let mut last_err = None;
            for c in choices {
                let opts = DesignOptions {
                    c_tilde: c,
                    ..base.clone()
                };
                match synthesize_feedback(lm, &opts) {
                    Ok(r) => {
                        sweep.push(SweepEntry {
                            c_tilde: r.c_tilde,
                            tau_max: Some(r.bound.tau_max),
                            gain_norm: Some(r.gain_norm()),
                        });
                        if best.as_ref().is_none_or(|b| r.bound.tau_max > b.bound.tau_max) {
                            best = Some(r);
                        }
                    }
                    Err(e @ Error::Validation { .. }) => return Err(e),
                    Err(e) => {
                        sweep.push(SweepEntry {
                            c_tilde: match c {
                                CTilde::Prescribed(v) => v,
                                CTilde::Free => 1.0,
                            },
                            tau_max: None,
                            gain_norm: None,
                        });
                        last_err = Some(e);
                    }
                }
            }
            match best {
                Some(b) => (b, sweep),
                None => return Err(last_err.unwrap_or_else(|| Error::Infeasible("no design".into()))),
            }
        }
    };
    if let Some(p) = &ctx.cli.cert {
        std::fs::write(p, design.certificate.to_json())?;
    }
    let report = ctx.report(
        Status::Ok,
        RunResult::Design {
            model: model_value(&model),
            design: Box::new(design),
            sweep,
        },
    );
    Ok((report, EXIT_OK, None))
}

fn cmd_simulate(ctx: &mut Ctx, a: &SimulateArgs) -> Outcome {
    let mut model = ctx.model()?;
    if model.gain().is_none() && model.is_design_mode() {
        let cert = ctx.cert()?;
        let k = match cert.as_ref().map(LmiCertificate::gain).transpose()?.flatten() {
            Some(k) => k,
            None => return Err(Error::validation("K_hat", "gain missing from model and certificate")),
        };
        model = model.with_gain(k)?;
    }
    if let Some(x0) = &a.x0 {
        model = model.with_x0(parse_list("--x0", x0)?)?;
    }
    let schedule: SamplingSchedule = a.schedule.parse()?;
    schedule.validate()?;
    let cfg = SimConfig {
        dt_sim: a.dt_sim.unwrap_or_else(|| (schedule.underline_dt() / 10.0).min(1e-3)),
        horizon: a.horizon,
        n_paths: a.paths,
        seed: ctx.cli.seed,
        schedule,
        store_stride: a.store_stride,
    };
    let window = a.window.as_deref().map(|w| parse_list("--window", w)).transpose()?;
    let window = match window.as_deref() {
        None => None,
        Some([lo, hi]) => Some((*lo, *hi)),
        Some(_) => return Err(Error::validation("--window", "expected LO,HI")),
    };
    let ens = run_ensemble(&model, &cfg)?;
    let n_diverged = ens.diverged_count();
    let ms_decay = match estimate_ms_decay(&ens, window) {
        Ok(d) => Some(d),
        Err(Error::DegenerateEnsemble(m)) => {
            ctx.notes.push(format!("degenerate ensemble: {m}"));
            None
        }
        Err(e) => return Err(e),
    };
    let as_exponent = match estimate_as_exponent(&ens, window.map(|w| w.1)) {
        Ok(s) => Some(s),
        Err(Error::DegenerateEnsemble(m)) => {
            ctx.notes.push(format!("no almost-sure exponent: {m}"));
            None
        }
        Err(e) => return Err(e),
    };
    if let Some(p) = &a.traj_csv {
        std::fs::write(p, ens.trajectory_csv()?)?;
    }
    let stats = ens.stats_csv()?;
    if let Some(p) = &a.stats_csv {
        std::fs::write(p, &stats)?;
    }
    let diverged = 2 * n_diverged > cfg.n_paths;
    if diverged {
        ctx.notes.push(format!("{n_diverged} of {} paths diverged", cfg.n_paths));
    }
    let decay_confirmed = ms_decay.is_some_and(|d| d.decay_confirmed());
    let status = if diverged { Status::Fail } else { Status::Ok };
    let report = ctx.report(
        status,
        RunResult::Simulate {
            model: model_value(&model),
            config: cfg,
            n_diverged,
            ms_decay,
            decay_confirmed,
            as_exponent,
        },
    );
    Ok((report, if diverged { EXIT_FAIL } else { EXIT_OK }, Some(stats)))
}

fn cmd_report(ctx: &mut Ctx, a: &ReportArgs, err: &mut dyn Write) -> Outcome {
    if a.reports.is_empty() {
        return Err(Error::validation("reports", "at least one report file is required"));
    }
    let mut rows = Vec::new();
    let mut curve = None;
    for path in &a.reports {
        let r = RunReport::parse(&ctx.read(path)?)?;
        if r.version != env!("CARGO_PKG_VERSION") {
            let _ = writeln!(err, "warning: {} was written by version {}", path.display(), r.version);
        }
        if curve.is_none() {
            if let Some(input) = r.bound_input() {
                curve = Some(input.curve(CURVE_POINTS)?);
            }
        }
        rows.push(r.row(&path.display().to_string()));
    }
    if let (Some(p), Some(c)) = (&a.curve_csv, &curve) {
        std::fs::write(p, curve_csv(c)?)?;
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    let fmt = |e: csv::Error| Error::Format(e.to_string());
    w.write_record(["source", "model", "tau_max", "gain_norm", "decay_rate"]).map_err(fmt)?;
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
    for r in &rows {
        w.write_record([r.source.clone(), r.model.clone(), opt(r.tau_max), opt(r.gain_norm), opt(r.decay_rate)])
            .map_err(fmt)?;
    }
    let table = String::from_utf8(w.into_inner().map_err(|e| Error::Format(e.to_string()))?)
        .map_err(|e| Error::Format(e.to_string()))?;
    let report = ctx.report(Status::Ok, RunResult::Report { rows, curve });
    Ok((report, EXIT_OK, Some(table)))
}
