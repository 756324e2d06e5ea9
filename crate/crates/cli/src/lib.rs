//! `sepp` command-line front end: train, predict, evaluate, compare and
//! simulate, with every artifact carrying the configuration that made it.

use std::ffi::OsString;
use std::fmt;
use std::path::{Path, PathBuf};

use clap::{Arg, ArgMatches, Command};

pub mod commands;
pub mod config;
pub mod model_file;

pub use config::{ModelKind, RunConfig, KEYS};
pub use model_file::{Model, ModelFile};

pub const EXIT_USAGE: i32 = 1;
pub const EXIT_NONCONVERGENCE: i32 = 2;

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn usage(message: String) -> Self {
        Self { code: EXIT_USAGE, message }
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        Self::usage(format!("{}: {e}", path.display()))
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<sepp_core::Error> for CliError {
    fn from(e: sepp_core::Error) -> Self {
        let code = match e {
            sepp_core::Error::NonConvergence { .. } => EXIT_NONCONVERGENCE,
            _ => EXIT_USAGE,
        };
        Self { code, message: e.to_string() }
    }
}

fn flag_name(key: &str) -> &'static str {
    Box::leak(key.replace('_', "-").into_boxed_str())
}

fn output_arg(help: &'static str) -> Arg {
    Arg::new("output").short('o').long("output").value_name("PATH").required(true).help(help)
}

pub fn command() -> Command {
    let mut cmd = Command::new("sepp")
        .version(env!("CARGO_PKG_VERSION"))
        .about("Self-exciting point-process crime forecasting")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .arg(
            Arg::new("config")
                .long("config")
                .value_name("FILE")
                .global(true)
                .help("key=value configuration file; flags override it"),
        );
    for k in KEYS {
        let mut arg = Arg::new(k.name)
            .long(flag_name(k.name))
            .value_name("VALUE")
            .global(true)
            .help(format!("{} [default: {}]", k.help, if k.default.is_empty() { "none" } else { k.default }));
        if k.default == "false" {
            arg = arg.num_args(0..=1).default_missing_value("true");
        }
        cmd = cmd.arg(arg);
    }
    cmd.subcommand(
        Command::new("train")
            .about("Fit a model to a catalog")
            .arg(Arg::new("catalog").required(true).value_name("CATALOG.csv"))
            .arg(output_arg("model JSON to write")),
    )
    .subcommand(
        Command::new("predict")
            .about("Forecast one shift on a grid")
            .arg(Arg::new("model").required(true).value_name("MODEL.json"))
            .arg(output_arg("output prefix; writes PREFIX.geojson and PREFIX.csv")),
    )
    .subcommand(
        Command::new("evaluate")
            .about("Rolling per-shift forecasts scored against a later catalog")
            .arg(Arg::new("models").required(true).num_args(1..).value_name("MODEL.json"))
            .arg(Arg::new("test").long("test").required(true).value_name("CATALOG.csv"))
            .arg(output_arg("metrics CSV to write")),
    )
    .subcommand(
        Command::new("compare")
            .about("Pairwise Wilcoxon signed-rank tests on per-period hit rates")
            .arg(Arg::new("metrics").required(true).num_args(1..).value_name("METRICS.csv"))
            .arg(Arg::new("output").short('o').long("output").value_name("PATH").help("comparison CSV to write")),
    )
    .subcommand(
        Command::new("simulate")
            .about("Draw a synthetic catalog with known parents")
            .arg(output_arg("catalog CSV to write"))
            .arg(Arg::new("parents").long("parents").value_name("PATH").help("parents CSV [default: <output stem>_parents.csv]")),
    )
}

/// Defaults, then `--config`, then flags.
pub fn effective_config(matches: &ArgMatches) -> Result<RunConfig, CliError> {
    let mut config = RunConfig::default();
    if let Some(path) = matches.get_one::<String>("config") {
        config.load_file(Path::new(path))?;
    }
    for k in KEYS {
        if let Some(v) = matches.get_one::<String>(k.name) {
            config.set(k.name, v)?;
        }
    }
    Ok(config)
}

fn setup_threads(config: &RunConfig) -> Result<(), CliError> {
    let n = config.usize("threads")?;
    if n > 0 {
        // A second call in the same process keeps the first pool.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

fn dispatch(matches: &ArgMatches) -> Result<(), CliError> {
    let (name, sub) = matches.subcommand().expect("subcommand required");
    let config = effective_config(sub)?;
    setup_threads(&config)?;
    let path = |id: &str| sub.get_one::<String>(id).map(PathBuf::from);
    let paths = |id: &str| -> Vec<PathBuf> {
        sub.get_many::<String>(id).map(|v| v.map(PathBuf::from).collect()).unwrap_or_default()
    };
    match name {
        "train" => commands::train(&config, &path("catalog").unwrap(), &path("output").unwrap()),
        "predict" => commands::predict(&config, &path("model").unwrap(), &path("output").unwrap()),
        "evaluate" => commands::evaluate(&config, &paths("models"), &path("test").unwrap(), &path("output").unwrap()),
        "compare" => commands::compare(&config, &paths("metrics"), path("output").as_deref()),
        "simulate" => commands::simulate(&config, &path("output").unwrap(), path("parents").as_deref()),
        _ => unreachable!("unknown subcommand"),
    }
}

/// Runs the CLI and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { 0 };
        }
    };
    match dispatch(&matches) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.code
        }
    }
}
