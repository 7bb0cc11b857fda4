//! `collapse simulate | verify | export`.
//!
//! Failures print one JSON line `{"error": kind, "message": text}` to stderr
//! and exit with status 2; a verification run whose criteria fail exits 1.
//! `COLLAPSE_WORKERS` sets the worker count and never changes any output.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Arg, ArgAction, ArgMatches, Command};
use collapse_core::io::{
    export_density_csv, parse_pairs, run, ArchiveReader, RunConfig, RunModel, CONFIG_KEYS,
};
use collapse_core::CollapseError;

const WORKERS_ENV: &str = "COLLAPSE_WORKERS";
const DEFAULT_VERIFY_CONFIG: &str = include_str!("../../../configs/verify.conf");

fn config_args(cmd: Command) -> Command {
    let cmd = cmd
        .arg(Arg::new("config").long("config").value_name("FILE").help("key = value config file"))
        .arg(
            Arg::new("set")
                .long("set")
                .value_name("KEY=VALUE")
                .action(ArgAction::Append)
                .help("Override any key, including suite.* paths"),
        );
    CONFIG_KEYS.iter().fold(cmd, |cmd, key| {
        cmd.arg(Arg::new(*key).long(*key).value_name("VALUE").help(format!("Config key {key}")))
    })
}

fn cli() -> Command {
    Command::new("collapse")
        .about("GRW and Diosi collapse-model simulation and verification")
        .subcommand_required(true)
        .subcommand(config_args(
            Command::new("simulate").about("Simulate a grw, diosi, hybrid or master run"),
        ))
        .subcommand(config_args(
            Command::new("verify").about("Run the acceptance criteria (shipped default config unless --config)"),
        ))
        .subcommand(
            Command::new("export")
                .about("Write the ensemble density of one sample time as CSV")
                .arg(Arg::new("archive").long("archive").required(true).value_name("FILE"))
                .arg(Arg::new("time").long("time").required(true).value_name("T"))
                .arg(Arg::new("stride").long("stride").value_name("K").default_value("1"))
                .arg(
                    Arg::new("config")
                        .long("config")
                        .value_name("FILE")
                        .help("Require the archive to have been produced by this config"),
                )
                .arg(Arg::new("output").long("output").value_name("FILE").help("Defaults to stdout")),
        )
}

/// Config file (or `base`) with flag values layered on top.
fn load_config(m: &ArgMatches, base: Option<&str>) -> Result<RunConfig, CollapseError> {
    let text = match m.get_one::<String>("config") {
        Some(path) => fs::read_to_string(path)?,
        None => base.unwrap_or_default().to_string(),
    };
    let mut pairs: BTreeMap<String, String> = parse_pairs(&text)?;
    for key in CONFIG_KEYS {
        if let Some(v) = m.get_one::<String>(key) {
            pairs.insert(key.to_string(), v.clone());
        }
    }
    for kv in m.get_many::<String>("set").into_iter().flatten() {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| CollapseError::Config(format!("--set expects KEY=VALUE, got '{kv}'")))?;
        pairs.insert(k.trim().to_string(), v.trim().to_string());
    }
    RunConfig::from_pairs(&pairs)
}

fn rerun_workers() -> usize {
    if rayon::current_num_threads() == 1 {
        3
    } else {
        1
    }
}

fn simulate(m: &ArgMatches) -> Result<ExitCode, CollapseError> {
    let cfg = load_config(m, None)?;
    if cfg.model == RunModel::Verify {
        return Err(CollapseError::Config("use the verify subcommand for model = verify".into()));
    }
    let out = run(&cfg, rerun_workers())?;
    for f in &out.files {
        println!("{}", f.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn verify(m: &ArgMatches) -> Result<ExitCode, CollapseError> {
    let cfg = load_config(m, Some(DEFAULT_VERIFY_CONFIG))?;
    if cfg.model != RunModel::Verify {
        return Err(CollapseError::Config("verify needs model = verify".into()));
    }
    let out = run(&cfg, rerun_workers())?;
    for c in &out.criteria {
        for r in c.reports.iter().chain(&c.controls) {
            println!("    {}", r.summary_line());
        }
        println!("{}", c.summary_line());
    }
    let passed = out.criteria.iter().filter(|c| c.pass).count();
    println!("{passed}/{} criteria passed", out.criteria.len());
    Ok(if out.passed() { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn export(m: &ArgMatches) -> Result<ExitCode, CollapseError> {
    let archive = PathBuf::from(m.get_one::<String>("archive").expect("required"));
    let parse = |k: &str| {
        let raw = m.get_one::<String>(k).expect("has value");
        raw.parse::<f64>()
            .map_err(|_| CollapseError::Config(format!("--{k}: cannot parse '{raw}'")))
    };
    let time = parse("time")?;
    let stride_raw = m.get_one::<String>("stride").expect("default");
    let stride: usize = stride_raw
        .parse()
        .map_err(|_| CollapseError::Config(format!("--stride: cannot parse '{stride_raw}'")))?;
    let reader = ArchiveReader::new(BufReader::new(File::open(&archive)?))?;
    if let Some(path) = m.get_one::<String>("config") {
        reader.header().check_config(&RunConfig::from_file(path.as_ref())?)?;
    }
    let csv = export_density_csv(reader, time, stride)?;
    match m.get_one::<String>("output") {
        Some(path) => fs::write(path, csv)?,
        None => std::io::stdout().write_all(csv.as_bytes())?,
    }
    Ok(ExitCode::SUCCESS)
}

fn error_line(e: &CollapseError) -> String {
    serde_json::json!({ "error": e.kind(), "message": e.to_string() }).to_string()
}

fn main() -> ExitCode {
    let matches = cli().get_matches();
    if let Some(n) = std::env::var(WORKERS_ENV).ok().filter(|v| !v.is_empty()) {
        let pool = n
            .parse::<usize>()
            .map_err(|_| CollapseError::Config(format!("{WORKERS_ENV} must be a positive integer, got '{n}'")))
            .and_then(|n| {
                rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build_global()
                    .map_err(|e| CollapseError::Config(e.to_string()))
            });
        if let Err(e) = pool {
            eprintln!("{}", error_line(&e));
            return ExitCode::from(2);
        }
    }
    let result = match matches.subcommand() {
        Some(("simulate", m)) => simulate(m),
        Some(("verify", m)) => verify(m),
        Some(("export", m)) => export(m),
        _ => unreachable!("subcommand_required"),
    };
    result.unwrap_or_else(|e| {
        eprintln!("{}", error_line(&e));
        ExitCode::from(2)
    })
}
