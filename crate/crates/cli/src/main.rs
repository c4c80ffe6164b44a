use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use d2_core::harness::{ProbeKind, TransportKind};
use d2sim::serve::{Role, ServeConfig};

#[derive(Parser)]
#[command(name = "d2sim", version, about)]
struct Cli {
    /// Log filter, e.g. `info` or `d2_core=debug`.
    #[arg(long, global = true, default_value = "warn")]
    log: String,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum TransportArg {
    Inproc,
    Http,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a scenario; exits 0 iff every step passes.
    Run {
        #[arg(long)]
        scenario: PathBuf,
        /// Overrides the scenario's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the scenario's transport.
        #[arg(long, value_enum)]
        transport: Option<TransportArg>,
        /// Directory for report.json and transcript.jsonl.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a scenario, then attack it; exits 0 iff every finding holds.
    Probe {
        /// stolen-hub-store, malicious-provider or replay-temp.
        #[arg(long)]
        kind: ProbeKind,
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Launch one hub, provider or agent node over HTTP.
    Serve {
        #[arg(long, value_enum)]
        role: Role,
        #[arg(long)]
        config: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::new(&cli.log))
        .with_writer(std::io::stderr)
        .init();
    let result = match cli.cmd {
        Cmd::Run { scenario, seed, transport, out } => {
            let transport = transport.map(|t| match t {
                TransportArg::Inproc => TransportKind::Inproc,
                TransportArg::Http => TransportKind::Http,
            });
            d2sim::run_scenario(&scenario, seed, transport, out.as_deref()).map(|r| {
                d2sim::print_report(&r);
                r.passed
            })
        }
        Cmd::Probe { kind, scenario, out } => d2sim::run_probe(kind, &scenario, out.as_deref()),
        Cmd::Serve { role, config } => ServeConfig::load(&config).and_then(|cfg| {
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(d2sim::serve::serve(role, cfg)).map(|_| true)
        }),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(2)
        }
    }
}

/// The error chain on one line, skipping causes a parent already quoted.
fn describe(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let msg = cause.to_string();
        if !out.ends_with(&msg) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&msg);
        }
    }
    out
}
