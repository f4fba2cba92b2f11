use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::mpsc;

use clap::Parser;
use wcproxy::config::parse_config;
use wcproxy::{Proxy, UpstreamClient};

/// Write-coalescing HTTP caching proxy.
#[derive(Parser, Debug)]
#[command(name = "proxy", version)]
struct Args {
    /// Path to the configuration file.
    #[arg(long)]
    config: PathBuf,

    /// Re-send dead-lettered bulk batches and exit instead of serving.
    #[arg(long)]
    replay_deadletter: bool,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = Args::parse();

    let text = match std::fs::read_to_string(&args.config) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("cannot read {}: {e}", args.config.display());
            return ExitCode::from(2);
        }
    };
    let config = match parse_config(&text) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("{}: {e}", args.config.display());
            return ExitCode::from(2);
        }
    };

    if args.replay_deadletter {
        let client = match UpstreamClient::new(&config.upstream_base_url, &config.cache_dir) {
            Ok(c) => c,
            Err(e) => {
                eprintln!("{e}");
                return ExitCode::from(2);
            }
        };
        let paths = config.upload_rules().map(|r| r.path.as_str());
        return match client.replay_deadletter(paths) {
            Ok(s) => {
                println!(
                    "delivered {} payloads from {} files; {} failed, {} skipped",
                    s.delivered_payloads, s.delivered_files, s.failed, s.skipped
                );
                if s.failed == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE }
            }
            Err(e) => {
                eprintln!("replay failed: {e}");
                ExitCode::FAILURE
            }
        };
    }

    let handle = match Proxy::start(config) {
        Ok(h) => h,
        Err(e) => {
            eprintln!("failed to start: {e}");
            return ExitCode::FAILURE;
        }
    };

    let (tx, rx) = mpsc::channel();
    if let Err(e) = ctrlc::set_handler(move || {
        let _ = tx.send(());
    }) {
        eprintln!("cannot install signal handler: {e}");
        return ExitCode::FAILURE;
    }
    let _ = rx.recv();
    log::info!("stop signal received");

    let summary = handle.shutdown();
    if summary.is_success() {
        ExitCode::SUCCESS
    } else {
        for failure in &summary.failures {
            log::error!("flush failed: {failure}");
        }
        ExitCode::FAILURE
    }
}
