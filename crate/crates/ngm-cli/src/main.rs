mod args;
mod config_file;
mod run;

use clap::error::ErrorKind;
use clap::Parser;

use args::{BenchCommand, Cli, Command};
use run::{CliError, Ctx};

fn dispatch() -> Result<(), CliError> {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e)
            if e.kind() == ErrorKind::DisplayHelp || e.kind() == ErrorKind::DisplayVersion =>
        {
            print!("{e}");
            return Ok(());
        }
        Err(e) => return Err(CliError::Usage(e.to_string())),
    };
    let ctx = Ctx::load(cli.config.as_deref())?;
    match &cli.command {
        Command::Init(args) => run::cmd_init(&ctx, args),
        Command::Encode(args) => run::cmd_encode(&ctx, args),
        Command::Generate(args) => run::cmd_generate(&ctx, args),
        Command::Analyze { what } => match what {
            args::AnalyzeCommand::Align(a) => run::cmd_analyze_align(&ctx, a),
            args::AnalyzeCommand::Locality(a) => run::cmd_analyze_locality(&ctx, a),
        },
        Command::Bench { what } => match what {
            BenchCommand::Prefill(a) => run::cmd_bench(&ctx, ngm::bench::Phase::Prefill, a),
            BenchCommand::Decode(a) => run::cmd_bench(&ctx, ngm::bench::Phase::Decode, a),
        },
    }
}

/// Die quietly on a closed pipe (e.g. `ngm bench ... | head`) instead of
/// panicking in println.
#[cfg(unix)]
fn reset_sigpipe() {
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
}

#[cfg(not(unix))]
fn reset_sigpipe() {}

fn main() {
    reset_sigpipe();
    match dispatch() {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {}", e.message());
            std::process::exit(e.code());
        }
    }
}
