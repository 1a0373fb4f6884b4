//! `w2w`: the weights-to-weights pipeline on the command line.
//!
//! Exit status is 0 on success, 1 when the pipeline rejects its inputs and
//! 2 on usage errors. Failures print one JSON line
//! `{"error": <kind>, "message": <text>}` on standard error; data goes to
//! standard output and logs to standard error.

mod args;
mod commands;
mod config;
mod error;
mod provenance;

use clap::Parser;

use args::Cli;
use commands::Context;
use config::PipelineConfig;

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .parse_env("W2W_LOG")
        .format_timestamp(None)
        .init();
}

fn main() {
    let cli = Cli::parse();
    init_logging(cli.verbose);
    let result = (|| {
        let config = match &cli.config {
            Some(p) => PipelineConfig::load(p)?,
            None => PipelineConfig::default(),
        };
        config.validate()?;
        let ctx = Context {
            config,
            config_path: cli.config.clone(),
        };
        commands::run(cli.command, &ctx)
    })();
    if let Err(e) = result {
        eprintln!("{}", e.record());
        std::process::exit(e.exit_code());
    }
}
