use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use scalehom::harness::{run_config, Experiment, ExperimentConfig};
use scalehom::Error;
use serde_json::{Map, Value};

const EXIT_PARAM: u8 = 1;
const EXIT_CHECK: u8 = 2;
const EXIT_RESOURCE: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "scalehom", version, about = "Run scale-by-scale homogenization experiments")]
struct Cli {
    /// JSON experiment config; flags on the command line override it.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_name = "U64")]
    seed: Option<u64>,
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,
    /// Directory for `<experiment>.csv` and `<experiment>.json`; without it the CSV goes to stdout.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
struct Common {
    /// Parameter override `key=value`; the value is parsed as JSON, else taken as a string.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Print the effective config and exit.
    #[arg(long)]
    print_config: bool,
}

#[derive(Args, Debug)]
struct MsdArgs {
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long = "T-list", value_delimiter = ',')]
    t_list: Option<Vec<f64>>,
    #[arg(long)]
    dt: Option<f64>,
    #[arg(long)]
    paths: Option<usize>,
    #[arg(long)]
    fields: Option<usize>,
    #[arg(long = "grid-M")]
    grid_m: Option<usize>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct AnisoArgs {
    #[arg(long)]
    n: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    a0: Option<Vec<f64>>,
    #[arg(long)]
    dtau: Option<f64>,
    #[arg(long = "tau-end")]
    tau_end: Option<f64>,
    #[arg(long = "quad-order")]
    quad_order: Option<usize>,
    #[command(flatten)]
    common: Common,
}

#[derive(Subcommand, Debug)]
enum Command {
    LadderCheck(Common),
    FieldStats(Common),
    SlbmMoments(Common),
    SlflowMoments(Common),
    Lyapunov(Common),
    ScalarN2(Common),
    HomogenizeLadder(Common),
    QvCheck(Common),
    CouplingCheck(Common),
    ParticleMsd(MsdArgs),
    AnisoFlow(AnisoArgs),
    EnvelopeIntegrals(Common),
}

fn put<T: Clone + Into<Value>>(m: &mut Map<String, Value>, key: &str, v: &Option<T>) {
    if let Some(v) = v {
        m.insert(key.into(), v.clone().into());
    }
}

impl Command {
    fn split(&self) -> (Experiment, &Common, Map<String, Value>) {
        let mut m = Map::new();
        let (e, c) = match self {
            Command::LadderCheck(c) => (Experiment::LadderCheck, c),
            Command::FieldStats(c) => (Experiment::FieldStats, c),
            Command::SlbmMoments(c) => (Experiment::SlbmMoments, c),
            Command::SlflowMoments(c) => (Experiment::SlflowMoments, c),
            Command::Lyapunov(c) => (Experiment::Lyapunov, c),
            Command::ScalarN2(c) => (Experiment::ScalarN2, c),
            Command::HomogenizeLadder(c) => (Experiment::HomogenizeLadder, c),
            Command::QvCheck(c) => (Experiment::QvCheck, c),
            Command::CouplingCheck(c) => (Experiment::CouplingCheck, c),
            Command::EnvelopeIntegrals(c) => (Experiment::EnvelopeIntegrals, c),
            Command::ParticleMsd(a) => {
                put(&mut m, "epsilon", &a.epsilon);
                put(&mut m, "T_list", &a.t_list);
                put(&mut m, "dt", &a.dt);
                put(&mut m, "paths", &a.paths);
                put(&mut m, "fields", &a.fields);
                put(&mut m, "grid_M", &a.grid_m);
                (Experiment::ParticleMsd, &a.common)
            }
            Command::AnisoFlow(a) => {
                put(&mut m, "n", &a.n);
                put(&mut m, "a0", &a.a0);
                put(&mut m, "dtau", &a.dtau);
                put(&mut m, "tau_end", &a.tau_end);
                put(&mut m, "quad_order", &a.quad_order);
                (Experiment::AnisoFlow, &a.common)
            }
        };
        (e, c, m)
    }
}

fn parse_set(s: &str) -> Result<(String, Value), Error> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("--set `{s}`: expected KEY=VALUE")))?;
    let val = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
    Ok((k.trim().to_string(), val))
}

fn build_config(cli: &Cli) -> Result<(ExperimentConfig, bool), Error> {
    let (exp, common, flags) = cli.command.split();
    let mut cfg = match &cli.config {
        Some(path) => {
            let c = ExperimentConfig::load(path)?;
            if c.experiment != exp {
                return Err(Error::Config(format!(
                    "config is for experiment `{}` but the subcommand is `{exp}`",
                    c.experiment
                )));
            }
            c
        }
        None => ExperimentConfig::new(exp),
    };
    for s in &common.set {
        let (k, v) = parse_set(s)?;
        cfg.params.insert(k, v);
    }
    cfg.params.extend(flags);
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(t) = cli.threads {
        cfg.threads = t;
    }
    if let Some(o) = &cli.out {
        cfg.output = Some(o.clone());
    }
    cfg.resolved_params()?;
    Ok((cfg, common.print_config))
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Resource(_) | Error::Integration(_) | Error::Io(_) => EXIT_RESOURCE,
        _ => EXIT_PARAM,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(EXIT_PARAM),
            };
        }
    };
    let (cfg, print_only) = match build_config(&cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(exit_code(&e));
        }
    };
    if print_only {
        println!("{}", cfg.to_json());
        return ExitCode::SUCCESS;
    }
    let start = Instant::now();
    let bundle = match run_config(&cfg) {
        Ok(b) => b,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(exit_code(&e));
        }
    };
    if cfg.output.is_none() {
        print!("{}", bundle.csv);
    }
    for c in &bundle.checks {
        eprintln!("{} {} {}", if c.pass { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    for f in &bundle.files {
        eprintln!("wrote {}", f.display());
    }
    eprintln!("{} finished in {:.2} s", cfg.experiment, start.elapsed().as_secs_f64());
    if bundle.passed() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_CHECK)
    }
}
