//! Scenario runner and report emitter.
//!
//! `ipim run <scenario.json>` simulates the scenario and writes three
//! artifacts into the output directory: the trace (`trace.jsonl`), the
//! analysis report (`report.json`, plus `report.csv` in tabular mode), and a
//! run manifest binding them to the exact inputs. Expectations embedded in
//! the scenario are checked and failures exit with status 3; invalid
//! scenarios exit with status 2.
//!
//! `ipim report <trace.jsonl>` re-runs the analyses over an existing trace.

use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};

use ipim::analysis::{build_report, check_expectations, report_to_csv};
use ipim::error::BuildError;
use ipim::scenario::{parse_scenario, Scenario};
use ipim::sim::{run_scenario, Trace};

const EXIT_SCHEMA_ERROR: u8 = 2;
const EXIT_ASSERTION_FAILED: u8 = 3;

#[derive(Parser)]
#[command(
    name = "ipim",
    about = "Deterministic in-band measurement simulator and analyzer",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a scenario file and write trace, report, and manifest.
    Run(RunArgs),
    /// Analyze an existing trace file.
    Report(ReportArgs),
    /// Parse and validate a scenario without running it.
    Validate { scenario: PathBuf },
}

#[derive(Args)]
struct RunArgs {
    scenario: PathBuf,
    /// Override the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the scenario horizon (e.g. "2s").
    #[arg(long)]
    horizon: Option<String>,
    /// Output directory for artifacts.
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
    /// Report format: structured (JSON) or tabular (JSON + CSV).
    #[arg(long, default_value = "structured")]
    format: Format,
    /// Dotted-path scenario overrides, e.g. --override workload.flows.0.count=500
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct ReportArgs {
    trace: PathBuf,
    /// Scenario the trace came from; enables salted integrity checks,
    /// configured thresholds, and expectation checking.
    #[arg(long)]
    scenario: Option<PathBuf>,
    #[arg(long, default_value = "structured")]
    format: Format,
    /// Output file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
enum Format {
    Structured,
    Tabular,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run(args) => match cmd_run(&args) {
            Ok(code) => code,
            Err(e) => {
                eprintln!("error: {e:#}");
                ExitCode::FAILURE
            }
        },
        Command::Report(args) => match cmd_report(&args) {
            Ok(code) => code,
            Err(e) => {
                eprintln!("error: {e:#}");
                ExitCode::FAILURE
            }
        },
        Command::Validate { scenario } => match load_with_overrides(&scenario, &[], None, None) {
            Ok(s) => {
                println!("ok: scenario {:?} validates", s.name);
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!("invalid scenario: {e}");
                ExitCode::from(EXIT_SCHEMA_ERROR)
            }
        },
    }
}

/// Apply `--override key=value` entries to the scenario JSON before
/// deserialization. Paths are dotted, with numeric segments indexing arrays.
fn apply_override(root: &mut serde_json::Value, spec: &str) -> Result<(), String> {
    let (path, raw_value) = spec
        .split_once('=')
        .ok_or_else(|| format!("override {spec:?} is not KEY=VALUE"))?;
    let value: serde_json::Value = serde_json::from_str(raw_value)
        .unwrap_or_else(|_| serde_json::Value::String(raw_value.to_string()));
    let mut cursor = root;
    let segments: Vec<&str> = path.split('.').collect();
    for (i, segment) in segments.iter().enumerate() {
        let last = i + 1 == segments.len();
        if let Ok(index) = segment.parse::<usize>() {
            let arr = cursor
                .as_array_mut()
                .ok_or_else(|| format!("override {path:?}: {segment} indexes a non-array"))?;
            if index >= arr.len() {
                return Err(format!("override {path:?}: index {index} out of bounds"));
            }
            if last {
                arr[index] = value;
                return Ok(());
            }
            cursor = &mut arr[index];
        } else {
            let obj = cursor
                .as_object_mut()
                .ok_or_else(|| format!("override {path:?}: {segment} selects into a non-object"))?;
            if last {
                obj.insert(segment.to_string(), value);
                return Ok(());
            }
            cursor = obj
                .get_mut(*segment)
                .ok_or_else(|| format!("override {path:?}: no field {segment:?}"))?;
        }
    }
    Ok(())
}

fn load_with_overrides(
    path: &Path,
    overrides: &[String],
    seed: Option<u64>,
    horizon: Option<&str>,
) -> Result<Scenario, BuildError> {
    let text = fs::read_to_string(path)
        .map_err(|e| BuildError::schema(path.display().to_string(), e.to_string()))?;
    let mut value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| BuildError::schema(path.display().to_string(), e.to_string()))?;
    for entry in overrides {
        apply_override(&mut value, entry).map_err(|e| BuildError::schema("override", e))?;
    }
    if let Some(seed) = seed {
        value["seed"] = serde_json::json!(seed);
    }
    if let Some(horizon) = horizon {
        value["horizon"] = serde_json::json!(horizon);
    }
    parse_scenario(&value.to_string())
}

fn cmd_run(args: &RunArgs) -> Result<ExitCode> {
    let scenario = match load_with_overrides(
        &args.scenario,
        &args.overrides,
        args.seed,
        args.horizon.as_deref(),
    ) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("invalid scenario: {e}");
            return Ok(ExitCode::from(EXIT_SCHEMA_ERROR));
        }
    };

    let output = match run_scenario(&scenario) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("invalid scenario: {e}");
            return Ok(ExitCode::from(EXIT_SCHEMA_ERROR));
        }
    };

    fs::create_dir_all(&args.out_dir)
        .with_context(|| format!("creating {}", args.out_dir.display()))?;
    let trace_path = args.out_dir.join("trace.jsonl");
    let trace_text = output.trace.to_jsonl();
    fs::write(&trace_path, &trace_text).context("writing trace")?;

    let report = build_report(&output.trace, Some(&scenario));
    let report_path = args.out_dir.join("report.json");
    fs::write(&report_path, serde_json::to_string_pretty(&report)?).context("writing report")?;
    if args.format == Format::Tabular {
        fs::write(args.out_dir.join("report.csv"), report_to_csv(&report))
            .context("writing csv report")?;
    }

    let scenario_text = fs::read_to_string(&args.scenario)?;
    let manifest = serde_json::json!({
        "scenario_path": args.scenario.display().to_string(),
        "scenario_sha256": hex_digest(scenario_text.as_bytes()),
        "overrides": args.overrides,
        "seed": scenario.seed,
        "horizon": scenario.horizon.to_string(),
        "trace_sha256": hex_digest(trace_text.as_bytes()),
        "tool_version": env!("CARGO_PKG_VERSION"),
        "shim_version": ipim::wire::SHIM_VERSION,
    });
    fs::write(
        args.out_dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )
    .context("writing manifest")?;

    let failures = check_expectations(&scenario, &report);
    if failures.is_empty() {
        println!(
            "ok: scenario {:?}, {} trace events, artifacts in {}",
            scenario.name,
            output.trace.events.len(),
            args.out_dir.display()
        );
        Ok(ExitCode::SUCCESS)
    } else {
        for failure in &failures {
            eprintln!("assertion failed: {failure}");
        }
        Ok(ExitCode::from(EXIT_ASSERTION_FAILED))
    }
}

fn cmd_report(args: &ReportArgs) -> Result<ExitCode> {
    let file = fs::File::open(&args.trace)
        .with_context(|| format!("opening {}", args.trace.display()))?;
    let trace = match Trace::read_jsonl(BufReader::new(file)) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("trace parse error: {e}");
            return Ok(ExitCode::from(EXIT_SCHEMA_ERROR));
        }
    };
    let scenario = match &args.scenario {
        Some(path) => match load_with_overrides(path, &[], None, None) {
            Ok(s) => Some(s),
            Err(e) => {
                eprintln!("invalid scenario: {e}");
                return Ok(ExitCode::from(EXIT_SCHEMA_ERROR));
            }
        },
        None => None,
    };
    let report = build_report(&trace, scenario.as_ref());
    let text = match args.format {
        Format::Structured => serde_json::to_string_pretty(&report)?,
        Format::Tabular => report_to_csv(&report),
    };
    match &args.out {
        Some(path) => fs::write(path, text).context("writing report")?,
        None => println!("{text}"),
    }
    if let Some(scenario) = &scenario {
        let failures = check_expectations(scenario, &report);
        if !failures.is_empty() {
            for failure in &failures {
                eprintln!("assertion failed: {failure}");
            }
            return Ok(ExitCode::from(EXIT_ASSERTION_FAILED));
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn hex_digest(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}
