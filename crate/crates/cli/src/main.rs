mod args;
mod commands;
mod error;
mod output;

use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;

use args::{Cli, Command, CorpusCommand};
use error::CliError;

fn run(cli: &Cli) -> error::Result<ExitCode> {
    match &cli.command {
        Command::Measures(a) => commands::measures(a)?,
        Command::Glm(a) => commands::glm_cmd(a)?,
        Command::Meta(a) => commands::meta_cmd(a)?,
        Command::Bglmm(a) => commands::bglmm_cmd(a)?,
        Command::Corr(a) => commands::corr(a)?,
        Command::Corpus(CorpusCommand::Analyze(a)) => commands::corpus_analyze(a)?,
        Command::Corpus(CorpusCommand::Simulate(a)) => commands::corpus_simulate(a)?,
        Command::Repro(a) => {
            if !commands::repro_cmd(a)? {
                return Err(CliError::numerical("reproduced values differ from the reference"));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let err = CliError::usage(e.to_string().trim_end());
            eprintln!("{}", err.to_json());
            return ExitCode::from(err.kind.exit_code());
        }
    };
    env_logger::Builder::new().parse_filters(&cli.log_level).format_timestamp(None).init();
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.kind.exit_code())
        }
    }
}
