mod args;
mod commands;
mod error;
mod output;

use std::process::ExitCode;

use clap::Parser;

use args::{Cli, Command, FileConfig};
use error::CliResult;

fn run(cli: Cli) -> CliResult<()> {
    let file = FileConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::GenTrace(a) => commands::gen_trace_cmd(a.or(file.gen_trace)),
        Command::Score(a) => commands::score_cmd(a.or(file.score)),
        Command::OracleRecall(a) => commands::recall_cmd(a.or(file.oracle_recall)),
        Command::SimulateDecode(a) => commands::decode_cmd(a.or(file.simulate_decode)),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("kvevict: {e}");
            e.exit_code()
        }
    }
}
