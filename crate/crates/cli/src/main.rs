use std::process::ExitCode;

use clap::Parser;

mod args;
mod commands;
mod report;

use args::{Cli, Command};

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(a) => commands::run(a),
        Command::Validate(a) => commands::validate(a),
        Command::Eval(a) => commands::eval(a),
        Command::Publish(a) => commands::publish(a),
        Command::Fetch(a) => commands::fetch(a, cli.format),
        Command::Query(a) => commands::query(a),
        Command::CheckInvariance(a) => commands::check_invariance_cmd(a),
        Command::Serve(a) => commands::serve(a),
        Command::Audit(a) => commands::audit(a),
    };
    let report = result.unwrap_or_else(|e| e);
    if report.emit(cli.format).is_err() {
        return ExitCode::from(report::IO);
    }
    ExitCode::from(report.exit_code)
}
