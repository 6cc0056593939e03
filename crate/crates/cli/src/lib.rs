//! Command-line front end: ODE benchmark, MNIST/ECG classification, sine
//! generation and the alpha sweep. Every run writes `config.json`,
//! a metrics CSV and an SVG chart to its output directory.

pub mod args;
pub mod config;
pub mod plot;
mod run;

use clap::{error::ErrorKind, CommandFactory, Parser};

pub use run::{execute, load_ecg, load_mnist, BoxError, Outcome, SweepRow};

use args::{Cli, Command, UsageError};
use config::RunConfig;

/// Parses `argv`, runs the command and returns the process exit code:
/// 0 on success, 2 on bad flags, 1 on runtime errors.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let (config, out_dir) = match &cli.command {
        Command::Replay(a) => {
            let loaded = std::fs::read_to_string(&a.config)
                .map_err(BoxError::from)
                .and_then(|text| RunConfig::from_json(&text).map_err(BoxError::from));
            match loaded {
                Ok(cfg) => (cfg, a.out_dir.clone()),
                Err(e) => {
                    eprintln!("error: cannot read {}: {e}", a.config.display());
                    return 1;
                }
            }
        }
        cmd => match args::resolve(cmd) {
            Ok(resolved) => resolved,
            Err(UsageError(msg)) => {
                let _ = Cli::command().error(ErrorKind::ArgumentConflict, msg).print();
                return 2;
            }
        },
    };
    match execute(&config, &out_dir) {
        Ok(outcome) => {
            println!("{}", outcome.summary());
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
