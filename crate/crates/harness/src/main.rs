use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use ztf_harness::scenarios::{self, SCENARIOS};
use ztf_harness::{run_fresh, Federation, HarnessError, ScenarioScript, TopologySpec, Verdict};

/// Zero trust federation testbed.
#[derive(Parser)]
#[command(name = "ztf", version)]
struct Cli {
    /// Log service activity to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Boot a topology and keep it running until interrupted.
    Boot {
        #[arg(long)]
        topology: Option<PathBuf>,
    },
    /// Run one scenario on a fresh federation. `scenario` is a built-in name
    /// or the path of a JSON script.
    Run {
        scenario: String,
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        auto_consent: bool,
        #[arg(long)]
        topology: Option<PathBuf>,
    },
    /// Run every built-in scenario on the default topology.
    Demo {
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn verdict(v: &Verdict) -> String {
    serde_json::to_value(v).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default()
}

fn topology(path: Option<&PathBuf>) -> Result<TopologySpec, HarnessError> {
    match path {
        Some(p) => TopologySpec::load(p),
        None => Ok(TopologySpec::default_topology()),
    }
}

fn script(name: &str) -> Result<ScenarioScript, HarnessError> {
    if let Some(s) = scenarios::script(name) {
        return Ok(s);
    }
    let path = PathBuf::from(name);
    if path.exists() {
        return ScenarioScript::load(&path);
    }
    Err(HarnessError::UnknownScenario(name.to_string()))
}

async fn execute(cli: Cli) -> Result<bool, HarnessError> {
    match cli.command {
        Command::Boot { topology: path } => {
            let mut fed = Federation::boot(topology(path.as_ref())?).await?;
            for s in fed.services() {
                println!("{:<6} {:<28} http://{}", s.name, s.origin, s.addr);
            }
            println!("{} services up; ctrl-c to stop", fed.services().len());
            let _ = tokio::signal::ctrl_c().await;
            fed.shutdown().await;
            Ok(true)
        }
        Command::Run {
            scenario,
            report,
            seed,
            auto_consent,
            topology: path,
        } => {
            let spec = topology(path.as_ref())?;
            let seed = seed.unwrap_or(spec.seed);
            let r = run_fresh(spec, seed, auto_consent, &script(&scenario)?).await?;
            let text = serde_json::to_string_pretty(&r).expect("report serializes");
            match report {
                Some(p) => std::fs::write(&p, text + "\n").map_err(|e| HarnessError::Config(format!("{}: {e}", p.display())))?,
                None => println!("{text}"),
            }
            eprintln!("{} {}", r.scenario, verdict(&r.verdict));
            Ok(r.passed())
        }
        Command::Demo { seed } => {
            let spec = TopologySpec::default_topology();
            let seed = seed.unwrap_or(spec.seed);
            let mut all = true;
            for name in SCENARIOS {
                let r = run_fresh(spec.clone(), seed, true, &script(name)?).await?;
                println!("{:<18} {}", r.scenario, verdict(&r.verdict));
                for c in &r.checks {
                    println!("    {:<34} {}", c.name, if c.passed { "ok" } else { "FAILED" });
                }
                all &= r.passed();
            }
            Ok(all)
        }
    }
}

#[tokio::main]
async fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { tracing::Level::DEBUG } else { tracing::Level::WARN };
    tracing_subscriber::fmt().with_max_level(level).with_writer(std::io::stderr).init();
    match execute(cli).await {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
