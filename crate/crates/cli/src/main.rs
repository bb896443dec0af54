//! `kinestat`: batch access to the five-bar kinematics, atlases, self-check,
//! live service and trace replay.
//!
//! Structured results go to stdout as JSON; diagnostics go to stderr.
//! Exit codes: 0 success, 1 failed verification or internal error, 2 the
//! request has no solution (e.g. unreachable point), 3 usage or invalid input.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use kinestat_core::atlas::{build_atlas, export_atlas, AtlasFormat, Field, Space, DEFAULT_LEVELS};
use kinestat_core::conditioning::{classify_posture, fivebar_indices};
use kinestat_core::fivebar::{
    forward_kinematics, forward_kinematics_in_mode, inverse_kinematics, PostureState, Sign,
    WorkingMode,
};
use kinestat_core::model::{load_model, FiveBarModel, JointLimits};
use kinestat_core::session::{load_session_config, load_trace, replay_to_writer};
use kinestat_core::verify::{verify_fivebar, Fault, VerifyOptions};
use kinestat_core::Error;
use serde_json::{json, Value};

#[derive(Parser)]
#[command(name = "kinestat", version, about = "Kinetostatic analysis of five-bar manipulators")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Forward kinematics: end point and full posture from the actuated angles.
    Fk {
        /// Five-bar model file (TOML).
        #[arg(long)]
        model: PathBuf,
        /// Actuated angles `theta1,theta2`, degrees unless --radians.
        #[arg(long, allow_hyphen_values = true, value_parser = parse_pair)]
        angles: (f64, f64),
        #[arg(long)]
        radians: bool,
        /// Working mode `s1s2`, e.g. `-+`; picks the matching assembly.
        #[arg(long, allow_hyphen_values = true, value_parser = parse_mode, conflicts_with = "assembly")]
        mode: Option<WorkingMode>,
        /// Assembly branch, the sign of det A.
        #[arg(long, allow_hyphen_values = true, value_parser = parse_sign, default_value = "+")]
        assembly: Sign,
    },
    /// Inverse kinematics of an end point in one working mode.
    Ik {
        #[arg(long)]
        model: PathBuf,
        /// End point `x,y`.
        #[arg(long, allow_hyphen_values = true, value_parser = parse_pair)]
        point: (f64, f64),
        #[arg(long, allow_hyphen_values = true, value_parser = parse_mode)]
        mode: WorkingMode,
    },
    /// Iso-conditioning atlas files, one per working mode.
    Atlas {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_enum, default_value_t = FieldArg::InvKappaA)]
        field: FieldArg,
        /// Working mode `s1s2`, or `all`.
        #[arg(long, allow_hyphen_values = true, default_value = "all")]
        mode: String,
        #[arg(long, value_enum, default_value_t = SpaceArg::Cartesian)]
        space: SpaceArg,
        /// Grid nodes `NxM`.
        #[arg(long, value_parser = parse_res, default_value = "200x200")]
        res: (usize, usize),
        /// Contour levels `a,b,c` in (0, 1].
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_LEVELS.to_vec())]
        levels: Vec<f64>,
        #[arg(long, value_enum, default_value_t = FormatArg::Svg)]
        format: FormatArg,
        /// Output directory, created if missing.
        #[arg(long)]
        out: PathBuf,
    },
    /// Seeded self-check against SVD, finite-difference and round-trip oracles.
    Verify {
        /// Five-bar model file; the built-in 6-8-5 model when omitted.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, default_value_t = 10_000)]
        samples: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, value_enum, hide = true)]
        inject_fault: Option<FaultArg>,
    },
    /// Live WebSocket service; runs until interrupted.
    Serve {
        /// Session configuration file (TOML).
        #[arg(long)]
        config: PathBuf,
        /// `host:port` to listen on.
        #[arg(long, default_value = "127.0.0.1:8765")]
        endpoint: String,
    },
    /// Deterministic replay of a pointer trace into a snapshot log.
    Replay {
        #[arg(long)]
        config: PathBuf,
        /// Pointer trace, one JSON message per line.
        #[arg(long)]
        trace: PathBuf,
        /// Snapshot log to write.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum FieldArg {
    InvKappaA,
    InvKappaB,
    BoundaryDistance,
}

#[derive(Clone, Copy, ValueEnum)]
enum SpaceArg {
    Cartesian,
    Joint,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Svg,
    Csv,
    Json,
}

#[derive(Clone, Copy, ValueEnum)]
enum FaultArg {
    ClosedForm,
}

fn parse_pair(s: &str) -> Result<(f64, f64), String> {
    let (a, b) = s.split_once(',').ok_or("expected two comma-separated numbers")?;
    let num = |v: &str| v.trim().parse::<f64>().map_err(|e| format!("`{v}`: {e}"));
    Ok((num(a)?, num(b)?))
}

fn parse_mode(s: &str) -> Result<WorkingMode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_sign(s: &str) -> Result<Sign, String> {
    match s {
        "+" => Ok(Sign::Plus),
        "-" => Ok(Sign::Minus),
        _ => Err("expected + or -".into()),
    }
}

fn parse_res(s: &str) -> Result<(usize, usize), String> {
    let (a, b) = s.split_once('x').ok_or("expected NxM, e.g. 200x200")?;
    let n = |v: &str| v.parse::<usize>().map_err(|e| format!("`{v}`: {e}"));
    Ok((n(a)?, n(b)?))
}

/// How a command failed, and the exit code that reports it.
enum Failure {
    Check(String),
    Domain(String),
    Input(String),
    Internal(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Check(_) | Failure::Internal(_) => 1,
            Failure::Domain(_) => 2,
            Failure::Input(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Check(m) | Failure::Domain(m) | Failure::Input(m) | Failure::Internal(m) => m,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Io { .. } => Failure::Internal(e.to_string()),
            Error::Singular(_) | Error::NonFinite { .. } => Failure::Domain(e.to_string()),
            _ => Failure::Input(e.to_string()),
        }
    }
}

type Outcome = Result<Value, Failure>;

fn five_bar(path: &Path) -> Result<FiveBarModel, Failure> {
    Ok(load_model(path)?.into_five_bar()?)
}

fn posture_doc(model: &FiveBarModel, s: &PostureState) -> Value {
    let ix = fivebar_indices(s, model);
    let class = classify_posture(&ix, 1e-2).map(|c| c.label()).unwrap_or_default();
    json!({
        "posture": s,
        "angles_deg": [s.theta1.to_degrees(), s.theta2.to_degrees(), s.theta3.to_degrees(), s.theta4.to_degrees()],
        "indices": ix,
        "class": class,
    })
}

fn cmd_fk(model: &Path, angles: (f64, f64), radians: bool, mode: Option<WorkingMode>, assembly: Sign) -> Outcome {
    let m = five_bar(model)?;
    let (t1, t2) = if radians { angles } else { (angles.0.to_radians(), angles.1.to_radians()) };
    let posture = match mode {
        Some(mode) => [Sign::Plus, Sign::Minus]
            .into_iter()
            .find_map(|a| forward_kinematics_in_mode(&m, t1, t2, mode, a)),
        None => forward_kinematics(&m, t1, t2, assembly),
    };
    match posture {
        Some(s) => Ok(posture_doc(&m, &s)),
        None => Err(Failure::Domain(match mode {
            Some(mode) => format!("no assembly in mode {mode} at these angles"),
            None => "distal links cannot close the loop at these angles".into(),
        })),
    }
}

fn cmd_ik(model: &Path, point: (f64, f64), mode: WorkingMode) -> Outcome {
    let m = five_bar(model)?;
    let p = kinestat_core::model::Vec2::new(point.0, point.1);
    match inverse_kinematics(&m, p, mode) {
        Some(s) => Ok(posture_doc(&m, &s)),
        None => Err(Failure::Domain(format!("point ({}, {}) is outside workspace", p.x, p.y))),
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_atlas(
    model: &Path,
    field: FieldArg,
    mode: &str,
    space: SpaceArg,
    res: (usize, usize),
    levels: &[f64],
    format: FormatArg,
    out: &Path,
) -> Outcome {
    let m = five_bar(model)?;
    let modes = match mode {
        "all" => WorkingMode::ALL.to_vec(),
        s => vec![parse_mode(s).map_err(Failure::Input)?],
    };
    let field = match field {
        FieldArg::InvKappaA => Field::InvKappaA,
        FieldArg::InvKappaB => Field::InvKappaB,
        FieldArg::BoundaryDistance => Field::BoundaryDistance,
    };
    let (space, space_name) = match space {
        SpaceArg::Cartesian => (Space::Cartesian, "cartesian"),
        SpaceArg::Joint => (Space::Joint, "joint"),
    };
    let format = match format {
        FormatArg::Svg => AtlasFormat::Svg,
        FormatArg::Csv => AtlasFormat::Csv,
        FormatArg::Json => AtlasFormat::Json,
    };
    std::fs::create_dir_all(out).map_err(|e| Failure::Internal(format!("{}: {e}", out.display())))?;
    let mut rows = Vec::new();
    eprintln!("{:<5} {:>10} {:>10} {:>10} {:>9}  file", "mode", "min", "max", "reachable", "polylines");
    for mode in modes {
        let doc = build_atlas(&m, mode, field, space, res.0, res.1, levels)?;
        let path = out.join(format!("{}_{}_{}.{}", field.name(), space_name, mode.slug(), format.extension()));
        export_atlas(&doc, format, &path)?;
        let (lo, hi) = doc.grid.range().map_or((None, None), |(a, b)| (Some(a), Some(b)));
        eprintln!(
            "{:<5} {:>10} {:>10} {:>10} {:>9}  {}",
            mode.to_string(),
            lo.map_or("-".into(), |v| format!("{v:.4}")),
            hi.map_or("-".into(), |v| format!("{v:.4}")),
            doc.grid.reachable_count(),
            doc.curves.polyline_count(),
            path.display()
        );
        rows.push(json!({
            "mode": mode,
            "file": path,
            "min": lo,
            "max": hi,
            "reachable_nodes": doc.grid.reachable_count(),
            "polylines": doc.curves.polyline_count(),
        }));
    }
    Ok(json!({ "field": field.name(), "space": space_name, "atlases": rows }))
}

/// The 6-8-5 model with unconstrained joints.
fn builtin_model() -> FiveBarModel {
    FiveBarModel::new(6.0, 8.0, 5.0, [JointLimits::full_turn(); 2]).expect("built-in model is valid")
}

fn cmd_verify(model: Option<&Path>, samples: usize, seed: u64, fault: Option<FaultArg>) -> Outcome {
    let m = match model {
        Some(p) => five_bar(p)?,
        None => builtin_model(),
    };
    let opts = VerifyOptions {
        samples,
        seed,
        fault: fault.map(|FaultArg::ClosedForm| Fault::ClosedForm),
    };
    let report = verify_fivebar(&m, &opts);
    eprint!("{}", report.table());
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    let doc = serde_json::to_value(&report).map_err(|e| Failure::Internal(e.to_string()))?;
    if report.passed {
        Ok(doc)
    } else {
        print_json(&doc);
        Err(Failure::Check("verification failed".into()))
    }
}

fn cmd_serve(config: &Path, endpoint: &str) -> Outcome {
    let cfg = load_session_config(config)?;
    let rt = tokio::runtime::Builder::new_current_thread()
        .enable_all()
        .build()
        .map_err(|e| Failure::Internal(e.to_string()))?;
    rt.block_on(async {
        let server = kinestat_server::Server::start(cfg, endpoint).await.map_err(|e| match e {
            kinestat_server::ServerError::Session(e) => Failure::from(e),
            kinestat_server::ServerError::InvalidEndpoint(_) => Failure::Input(e.to_string()),
            _ => Failure::Internal(e.to_string()),
        })?;
        print_json(&json!({ "endpoint": format!("ws://{}", server.local_addr()) }));
        eprintln!("serving on ws://{}; interrupt to stop", server.local_addr());
        server
            .run_until(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await;
        Ok(json!({ "stopped": true }))
    })
}

fn cmd_replay(config: &Path, trace: &Path, out: &Path) -> Outcome {
    let cfg = load_session_config(config)?;
    let with_path = |e: Error| match e {
        Error::Trace { path, line, reason } if path.as_os_str().is_empty() => Error::Trace {
            path: trace.to_path_buf(),
            line,
            reason,
        },
        e => e,
    };
    let events = load_trace(trace)?;
    let file = std::fs::File::create(out).map_err(|e| Failure::Internal(format!("{}: {e}", out.display())))?;
    let mut w = std::io::BufWriter::new(file);
    let ticks = replay_to_writer(&cfg, &events, &mut w).map_err(with_path)?;
    w.flush().map_err(|e| Failure::Internal(format!("{}: {e}", out.display())))?;
    Ok(json!({ "ticks": ticks, "events": events.len(), "out": out }))
}

fn print_json(v: &Value) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{v}");
    let _ = out.flush();
}

fn run(cli: Cli) -> Outcome {
    match cli.command {
        Command::Fk { model, angles, radians, mode, assembly } => cmd_fk(&model, angles, radians, mode, assembly),
        Command::Ik { model, point, mode } => cmd_ik(&model, point, mode),
        Command::Atlas { model, field, mode, space, res, levels, format, out } => {
            cmd_atlas(&model, field, &mode, space, res, &levels, format, &out)
        }
        Command::Verify { model, samples, seed, inject_fault } => {
            cmd_verify(model.as_deref(), samples, seed, inject_fault)
        }
        Command::Serve { config, endpoint } => cmd_serve(&config, &endpoint),
        Command::Replay { config, trace, out } => cmd_replay(&config, &trace, &out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 3 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(v) => {
            print_json(&v);
            ExitCode::SUCCESS
        }
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
