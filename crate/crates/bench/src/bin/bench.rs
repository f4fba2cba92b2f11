use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use num_rational::Ratio;
use wcproxy::{CostParams, ExactCostParams};
use wcproxy_bench::db::{InsertDb, SqliteDb};
use wcproxy_bench::ladder::{LadderOptions, Mode, FULL_LADDER};
use wcproxy_bench::report::{self, SAMPLES_FILE};
use wcproxy_bench::{build_report, run_ladder, serve_mock_upstream, EntitySchema};

#[derive(Parser)]
#[command(name = "bench", about = "Bulk vs single insert benchmark for wcproxy")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the request ladder and write samples plus report CSVs.
    Run {
        #[arg(long, value_delimiter = ',', default_value = "4c0fk,4c2fk,10c0fk,10c2fk")]
        entities: Vec<EntitySchema>,
        #[arg(long, value_delimiter = ',', default_value = "1,100,1000,5000,10000,25000,50000,100000")]
        ladder: Vec<u64>,
        #[arg(long, value_delimiter = ',', default_value = "coalesced,passthrough")]
        modes: Vec<Mode>,
        #[arg(long)]
        out: PathBuf,
        /// Upload buffer flush threshold in Coalesced mode.
        #[arg(long, default_value_t = 10_000)]
        threshold: u64,
        /// Proxy worker threads.
        #[arg(long, default_value_t = 4)]
        threads: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// SQLite database file; defaults to a temporary file.
        #[arg(long)]
        sqlite: Option<PathBuf>,
        /// PostgreSQL connection string; timings then come from EXPLAIN ANALYZE.
        #[cfg(feature = "postgres")]
        #[arg(long)]
        postgres: Option<String>,
    },
    /// Rebuild the report CSVs from `<dir>/samples.csv`.
    Report { dir: PathBuf },
    /// Predicted bulk speedup from the insert cost model.
    Predict {
        #[arg(long)]
        rows: u64,
        #[arg(long, default_value_t = 1)]
        row_size: i64,
        #[arg(long, default_value_t = 0)]
        indexes: u32,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> Result<(), Box<dyn std::error::Error>> {
    match command {
        Command::Run {
            entities,
            mut ladder,
            modes,
            out,
            threshold,
            threads,
            seed,
            sqlite,
            #[cfg(feature = "postgres")]
            postgres,
        } => {
            if let Some(n) = ladder.iter().find(|n| !FULL_LADDER.contains(n)) {
                return Err(format!("ladder value {n} is not one of {FULL_LADDER:?}").into());
            }
            if threshold == 0 {
                return Err("threshold must be positive".into());
            }
            ladder.sort_unstable();
            ladder.dedup();
            std::fs::create_dir_all(&out)?;

            let scratch = tempfile::tempdir()?;
            #[allow(unused_mut)]
            let mut db: Option<Box<dyn InsertDb>> = None;
            #[cfg(feature = "postgres")]
            if let Some(url) = postgres {
                db = Some(Box::new(wcproxy_bench::db::PostgresDb::connect(&url)?));
            }
            let db = match db {
                Some(db) => db,
                None => {
                    let path = sqlite.unwrap_or_else(|| scratch.path().join("bench.sqlite"));
                    Box::new(SqliteDb::open(&path)?) as Box<dyn InsertDb>
                }
            };
            let upstream = serve_mock_upstream(db, &entities)?;
            let options = LadderOptions {
                threshold,
                threads,
                seed,
                ..Default::default()
            };
            let mut samples = Vec::new();
            for entity in &entities {
                samples.extend(run_ladder(&upstream, entity, &modes, &ladder, &options)?);
            }
            report::write_samples(&out.join(SAMPLES_FILE), &samples)?;
            println!("wrote {}", out.join(SAMPLES_FILE).display());
            match build_report(&samples) {
                Ok(r) => {
                    for p in r.write_csvs(&out)? {
                        println!("wrote {}", p.display());
                    }
                    print!("{}", r.render());
                }
                Err(e) => eprintln!("no report: {e}"),
            }
            Ok(())
        }
        Command::Report { dir } => {
            let samples = report::read_samples(&dir.join(SAMPLES_FILE))?;
            let r = build_report(&samples)?;
            for p in r.write_csvs(&dir)? {
                println!("wrote {}", p.display());
            }
            print!("{}", r.render());
            Ok(())
        }
        Command::Predict { rows, row_size, indexes } => {
            let approx = CostParams::new(row_size as f64, indexes)?;
            let exact = ExactCostParams::new(Ratio::from_integer(row_size as i128), indexes)?;
            println!("single_mode_cost {}", approx.single_mode_cost(rows)?);
            println!("bulk_mode_cost {}", approx.bulk_mode_cost(rows)?);
            println!("predicted_speedup {} ({})", approx.predicted_speedup(rows)?, exact.predicted_speedup(rows)?);
            println!("speedup_bound {}", approx.speedup_bound());
            Ok(())
        }
    }
}
