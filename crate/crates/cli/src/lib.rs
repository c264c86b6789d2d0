//! Command-line front end and HTTP service.

pub mod args;
pub mod commands;
pub mod server;

use std::ffi::OsString;

use clap::Parser;

use args::{Cli, Command};
use commands::RunContext;

/// Runs the CLI and returns the process exit code: 0 success, 1 runtime
/// failure, 2 usage error.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", render_error(&e));
            1
        }
    }
}

fn dispatch(cli: &Cli) -> anyhow::Result<()> {
    if let Command::Diagnose(a) = &cli.command {
        return commands::diagnose(a);
    }
    let ctx = RunContext::from_cli(cli)?;
    match &cli.command {
        Command::Extract(a) => commands::extract(&ctx, a),
        Command::Grid(a) => commands::grid(&ctx, a),
        Command::Eval(a) => commands::eval(&ctx, a),
        Command::Serve(a) => server::serve_blocking(&ctx, a),
        Command::Diagnose(_) => unreachable!(),
    }
}

/// Joins the error chain, skipping causes whose text a parent already includes.
pub fn render_error(e: &anyhow::Error) -> String {
    let mut msg = e.to_string();
    for cause in e.chain().skip(1) {
        let c = cause.to_string();
        if !msg.contains(&c) {
            msg.push_str(": ");
            msg.push_str(&c);
        }
    }
    msg
}
